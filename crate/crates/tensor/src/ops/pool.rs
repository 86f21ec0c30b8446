use crate::error::{Result, TensorError};
use crate::graph::Var;
use crate::tensor::Tensor;

impl<'g> Var<'g> {
    /// 2×2 max pooling with stride 2. Spatial dims must be even.
    pub fn max_pool2(self) -> Result<Var<'g>> {
        let x = self.value();
        let (n, c, h, w) = x.dims4()?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(TensorError::Shape(format!("max_pool2 needs even dims, got {h}x{w}")));
        }
        let (oh, ow) = (h / 2, w / 2);
        let mut out = Tensor::zeros(&[n, c, oh, ow]);
        let mut argmax = vec![0u32; n * c * oh * ow];
        for p in 0..n * c {
            let plane = &x.data()[p * h * w..(p + 1) * h * w];
            for oy in 0..oh {
                for ox in 0..ow {
                    let base = 2 * oy * w + 2 * ox;
                    let mut best = base;
                    for idx in [base + 1, base + w, base + w + 1] {
                        if plane[idx] > plane[best] {
                            best = idx;
                        }
                    }
                    let o = p * oh * ow + oy * ow + ox;
                    out.data_mut()[o] = plane[best];
                    argmax[o] = (p * h * w + best) as u32;
                }
            }
        }
        let in_shape = x.shape().to_vec();
        Ok(self.unary(out, move |g, _, _| {
            let mut gx = Tensor::zeros(&in_shape);
            for (&src, &gv) in argmax.iter().zip(g.data()) {
                gx.data_mut()[src as usize] += gv;
            }
            vec![Some(gx)]
        }))
    }

    /// Nearest-neighbour 2× upsampling.
    pub fn upsample2(self) -> Result<Var<'g>> {
        let x = self.value();
        let (n, c, h, w) = x.dims4()?;
        let (oh, ow) = (2 * h, 2 * w);
        let mut out = Tensor::zeros(&[n, c, oh, ow]);
        for p in 0..n * c {
            let src = &x.data()[p * h * w..(p + 1) * h * w];
            let dst = &mut out.data_mut()[p * oh * ow..(p + 1) * oh * ow];
            for oy in 0..oh {
                let srow = &src[(oy / 2) * w..(oy / 2 + 1) * w];
                for (ox, v) in dst[oy * ow..(oy + 1) * ow].iter_mut().enumerate() {
                    *v = srow[ox / 2];
                }
            }
        }
        Ok(self.unary(out, move |g, _, _| {
            let mut gx = Tensor::zeros(&[n, c, h, w]);
            for p in 0..n * c {
                let gs = &g.data()[p * oh * ow..(p + 1) * oh * ow];
                let d = &mut gx.data_mut()[p * h * w..(p + 1) * h * w];
                for oy in 0..oh {
                    for ox in 0..ow {
                        d[(oy / 2) * w + ox / 2] += gs[oy * ow + ox];
                    }
                }
            }
            vec![Some(gx)]
        }))
    }

    /// Non-overlapping `k×k` average pooling. Spatial dims must divide by `k`.
    pub fn avg_pool(self, k: usize) -> Result<Var<'g>> {
        let x = self.value();
        let (n, c, h, w) = x.dims4()?;
        if k == 0 || h % k != 0 || w % k != 0 {
            return Err(TensorError::Shape(format!("avg_pool({k}) of {h}x{w}")));
        }
        let (oh, ow) = (h / k, w / k);
        let inv = 1.0 / (k * k) as f32;
        let mut out = Tensor::zeros(&[n, c, oh, ow]);
        for p in 0..n * c {
            let src = &x.data()[p * h * w..(p + 1) * h * w];
            let dst = &mut out.data_mut()[p * oh * ow..(p + 1) * oh * ow];
            for y in 0..h {
                for xx in 0..w {
                    dst[(y / k) * ow + xx / k] += src[y * w + xx] * inv;
                }
            }
        }
        Ok(self.unary(out, move |g, _, _| {
            let mut gx = Tensor::zeros(&[n, c, h, w]);
            for p in 0..n * c {
                let gs = &g.data()[p * oh * ow..(p + 1) * oh * ow];
                let d = &mut gx.data_mut()[p * h * w..(p + 1) * h * w];
                for y in 0..h {
                    for xx in 0..w {
                        d[y * w + xx] = gs[(y / k) * ow + xx / k] * inv;
                    }
                }
            }
            vec![Some(gx)]
        }))
    }
}
