use crate::error::{Result, TensorError};
use crate::graph::Var;
use crate::tensor::Tensor;

fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl<'g> Var<'g> {
    fn binary(
        self,
        other: Var<'g>,
        f: impl Fn(f32, f32) -> f32,
        backward: impl Fn(&Tensor, &[&Tensor], &Tensor) -> Vec<Option<Tensor>> + 'static,
    ) -> Result<Var<'g>> {
        let (a, b) = (self.value(), other.value());
        let out = a.zip_map(&b, f)?;
        Ok(self.graph.custom(&[self, other], out, backward))
    }

    pub fn add(self, other: Var<'g>) -> Result<Var<'g>> {
        self.binary(other, |a, b| a + b, |g, _, _| vec![Some(g.clone()), Some(g.clone())])
    }

    pub fn sub(self, other: Var<'g>) -> Result<Var<'g>> {
        self.binary(other, |a, b| a - b, |g, _, _| vec![Some(g.clone()), Some(g.map(|v| -v))])
    }

    pub fn mul(self, other: Var<'g>) -> Result<Var<'g>> {
        self.binary(
            other,
            |a, b| a * b,
            |g, x, _| {
                vec![
                    Some(g.zip_map(x[1], |g, b| g * b).expect("same shape")),
                    Some(g.zip_map(x[0], |g, a| g * a).expect("same shape")),
                ]
            },
        )
    }

    pub fn div(self, other: Var<'g>) -> Result<Var<'g>> {
        self.binary(
            other,
            |a, b| a / b,
            |g, x, out| {
                let ga = g.zip_map(x[1], |g, b| g / b).expect("same shape");
                // d(a/b)/db = -(a/b)/b
                let q = out.zip_map(x[1], |q, b| q / b).expect("same shape");
                let gb = g.zip_map(&q, |g, q| -g * q).expect("same shape");
                vec![Some(ga), Some(gb)]
            },
        )
    }

    pub fn scale(self, s: f32) -> Var<'g> {
        let out = self.value().map(|v| v * s);
        self.unary(out, move |g, _, _| vec![Some(g.map(|v| v * s))])
    }

    pub fn add_scalar(self, s: f32) -> Var<'g> {
        let out = self.value().map(|v| v + s);
        self.unary(out, |g, _, _| vec![Some(g.clone())])
    }

    pub fn relu(self) -> Var<'g> {
        let out = self.value().map(|v| v.max(0.0));
        self.unary(out, |g, _, out| {
            vec![Some(g.zip_map(out, |g, y| if y > 0.0 { g } else { 0.0 }).expect("same shape"))]
        })
    }

    pub fn sigmoid(self) -> Var<'g> {
        let out = self.value().map(sigmoid);
        self.unary(out, |g, _, out| {
            vec![Some(g.zip_map(out, |g, y| g * y * (1.0 - y)).expect("same shape"))]
        })
    }

    /// Multiplies an NCHW tensor by a `[N, 1, H, W]` map broadcast over channels.
    pub fn mul_channel_map(self, map: Var<'g>) -> Result<Var<'g>> {
        let x = self.value();
        let m = map.value();
        let (n, c, h, w) = x.dims4()?;
        if m.shape() != [n, 1, h, w] {
            return Err(TensorError::Shape(format!(
                "channel map {:?} does not broadcast onto {:?}",
                m.shape(),
                x.shape()
            )));
        }
        let hw = h * w;
        let mut out = x.as_ref().clone();
        for b in 0..n {
            let ms = &m.data()[b * hw..(b + 1) * hw];
            for ch in 0..c {
                let o = &mut out.data_mut()[(b * c + ch) * hw..(b * c + ch + 1) * hw];
                o.iter_mut().zip(ms).for_each(|(v, &s)| *v *= s);
            }
        }
        Ok(self.graph.custom(&[self, map], out, move |g, inp, _| {
            let (x, m) = (inp[0], inp[1]);
            let mut gx = g.clone();
            let mut gm = Tensor::zeros(m.shape());
            for b in 0..n {
                let ms = &m.data()[b * hw..(b + 1) * hw];
                for ch in 0..c {
                    let off = (b * c + ch) * hw;
                    let gs = &mut gx.data_mut()[off..off + hw];
                    gs.iter_mut().zip(ms).for_each(|(v, &s)| *v *= s);
                    let xs = &x.data()[off..off + hw];
                    let go = &g.data()[off..off + hw];
                    let gms = &mut gm.data_mut()[b * hw..(b + 1) * hw];
                    for i in 0..hw {
                        gms[i] += go[i] * xs[i];
                    }
                }
            }
            vec![Some(gx), Some(gm)]
        }))
    }

    /// Adds a per-column bias `[M]` to a `[N, M]` matrix.
    pub fn add_row_bias(self, bias: Var<'g>) -> Result<Var<'g>> {
        let x = self.value();
        let b = bias.value();
        let (n, m) = x.dims2()?;
        if b.numel() != m {
            return Err(TensorError::Shape(format!("bias {:?} vs matrix {:?}", b.shape(), x.shape())));
        }
        let mut out = x.as_ref().clone();
        for r in 0..n {
            for (v, &bb) in out.data_mut()[r * m..(r + 1) * m].iter_mut().zip(b.data()) {
                *v += bb;
            }
        }
        Ok(self.graph.custom(&[self, bias], out, move |g, inp, _| {
            let mut gb = Tensor::zeros(inp[1].shape());
            for r in 0..n {
                for (acc, &v) in gb.data_mut().iter_mut().zip(&g.data()[r * m..(r + 1) * m]) {
                    *acc += v;
                }
            }
            vec![Some(g.clone()), Some(gb)]
        }))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'g>> {
        let x = self.value();
        let out = x.reshape(shape)?;
        let orig = x.shape().to_vec();
        Ok(self.unary(out, move |g, _, _| vec![Some(g.reshape(&orig).expect("numel preserved"))]))
    }
}
