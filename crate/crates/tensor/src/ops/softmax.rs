use crate::error::Result;
use crate::graph::Var;
use crate::tensor::Tensor;

fn softmax_channels(x: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    let hw = h * w;
    let mut out = Tensor::zeros(x.shape());
    for b in 0..n {
        for p in 0..hw {
            let at = |ch: usize| (b * c + ch) * hw + p;
            let m = (0..c).map(|ch| x.data()[at(ch)]).fold(f32::NEG_INFINITY, f32::max);
            let mut z = 0.0;
            for ch in 0..c {
                let e = (x.data()[at(ch)] - m).exp();
                out.data_mut()[at(ch)] = e;
                z += e;
            }
            for ch in 0..c {
                out.data_mut()[at(ch)] /= z;
            }
        }
    }
    Ok(out)
}

impl<'g> Var<'g> {
    /// Softmax over the channel axis of an NCHW tensor.
    pub fn softmax_channels(self) -> Result<Var<'g>> {
        let out = softmax_channels(&self.value())?;
        let (n, c, h, w) = out.dims4()?;
        Ok(self.unary(out, move |g, _, s| {
            let hw = h * w;
            let mut gx = Tensor::zeros(s.shape());
            for b in 0..n {
                for p in 0..hw {
                    let at = |ch: usize| (b * c + ch) * hw + p;
                    let dot: f32 = (0..c).map(|ch| g.data()[at(ch)] * s.data()[at(ch)]).sum();
                    for ch in 0..c {
                        gx.data_mut()[at(ch)] = s.data()[at(ch)] * (g.data()[at(ch)] - dot);
                    }
                }
            }
            vec![Some(gx)]
        }))
    }

    /// Mean over pixels of `-Σ_k t_k log softmax(x)_k`, with `target` a
    /// per-pixel distribution over channels (usually one-hot).
    pub fn softmax_cross_entropy(self, target: &Tensor) -> Result<Var<'g>> {
        let x = self.value();
        x.expect_same_shape(target)?;
        let s = softmax_channels(&x)?;
        let (n, c, h, w) = x.dims4()?;
        let hw = h * w;
        let pixels = (n * hw) as f64;
        let mut total = 0.0f64;
        for b in 0..n {
            for p in 0..hw {
                for ch in 0..c {
                    let i = (b * c + ch) * hw + p;
                    let t = target.data()[i];
                    if t != 0.0 {
                        total -= t as f64 * (s.data()[i].max(f32::MIN_POSITIVE) as f64).ln();
                    }
                }
            }
        }
        let out = Tensor::scalar((total / pixels) as f32);
        let target = target.clone();
        Ok(self.unary(out, move |g, _, _| {
            let scale = g.item() / pixels as f32;
            // d/dx = (softmax - t) / pixels, assuming Σ_k t_k = 1
            let gx = s.zip_map(&target, |sv, tv| (sv - tv) * scale).expect("same shape");
            vec![Some(gx)]
        }))
    }
}
