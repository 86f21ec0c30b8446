//! Reductions, concatenation, slicing and dense matrix products.

use crate::error::{Result, TensorError};
use crate::gemm::sgemm;
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

impl<'g> Var<'g> {
    pub fn sum_all(self) -> Var<'g> {
        let x = self.value();
        let out = Tensor::scalar(x.sum());
        let shape = x.shape().to_vec();
        self.unary(out, move |g, _, _| vec![Some(Tensor::full(&shape, g.item()))])
    }

    pub fn mean_all(self) -> Var<'g> {
        let n = self.value().numel() as f32;
        self.sum_all().scale(1.0 / n)
    }

    /// Sums over the spatial axes: `[N, C, H, W] -> [N, C]`.
    pub fn sum_hw(self) -> Result<Var<'g>> {
        let x = self.value();
        let (n, c, h, w) = x.dims4()?;
        let hw = h * w;
        let data = x
            .data()
            .chunks_exact(hw)
            .map(|s| s.iter().map(|&v| v as f64).sum::<f64>() as f32)
            .collect();
        let out = Tensor::new(&[n, c], data)?;
        Ok(self.unary(out, move |g, _, _| {
            let mut gx = Vec::with_capacity(n * c * hw);
            for &v in g.data() {
                gx.extend(std::iter::repeat(v).take(hw));
            }
            vec![Some(Tensor::new(&[n, c, h, w], gx).expect("sizes agree"))]
        }))
    }

    pub fn narrow_channels(self, start: usize, len: usize) -> Result<Var<'g>> {
        let x = self.value();
        let out = x.narrow_channels(start, len)?;
        let (n, c, h, w) = x.dims4()?;
        Ok(self.unary(out, move |g, _, _| {
            let hw = h * w;
            let mut gx = Tensor::zeros(&[n, c, h, w]);
            for b in 0..n {
                let dst = (b * c + start) * hw;
                let src = b * len * hw;
                gx.data_mut()[dst..dst + len * hw].copy_from_slice(&g.data()[src..src + len * hw]);
            }
            vec![Some(gx)]
        }))
    }

    /// `[A, B] x [B, C] -> [A, C]`.
    pub fn matmul(self, rhs: Var<'g>) -> Result<Var<'g>> {
        let (a, b) = (self.value(), rhs.value());
        let (m, k) = a.dims2()?;
        let (k2, n) = b.dims2()?;
        if k != k2 {
            return Err(TensorError::Shape(format!("matmul {:?} x {:?}", a.shape(), b.shape())));
        }
        let mut out = Tensor::zeros(&[m, n]);
        sgemm(m, k, n, a.data(), (k, 1), b.data(), (n, 1), out.data_mut(), (n, 1), 0.0);
        Ok(self.graph.custom(&[self, rhs], out, move |g, inp, _| {
            let (a, b) = (inp[0], inp[1]);
            // dA = G * B^T, dB = A^T * G
            let mut ga = Tensor::zeros(&[m, k]);
            sgemm(m, n, k, g.data(), (n, 1), b.data(), (1, n), ga.data_mut(), (k, 1), 0.0);
            let mut gb = Tensor::zeros(&[k, n]);
            sgemm(k, m, n, a.data(), (1, k), g.data(), (n, 1), gb.data_mut(), (n, 1), 0.0);
            vec![Some(ga), Some(gb)]
        }))
    }

    /// `x · W + b` for `x: [N, in]`, `W: [in, out]`, `b: [out]`.
    pub fn linear(self, weight: Var<'g>, bias: Var<'g>) -> Result<Var<'g>> {
        self.matmul(weight)?.add_row_bias(bias)
    }
}

impl Graph {
    /// Concatenates NCHW tensors along the channel axis.
    pub fn concat_channels<'g>(&'g self, parts: &[Var<'g>]) -> Result<Var<'g>> {
        let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
        let (n, _, h, w) = values
            .first()
            .ok_or_else(|| TensorError::Shape("empty concat".into()))?
            .dims4()?;
        let mut chans = Vec::with_capacity(values.len());
        for v in &values {
            let (vn, vc, vh, vw) = v.dims4()?;
            if (vn, vh, vw) != (n, h, w) {
                return Err(TensorError::Shape(format!(
                    "concat of {:?} with {:?}",
                    values[0].shape(),
                    v.shape()
                )));
            }
            chans.push(vc);
        }
        let total: usize = chans.iter().sum();
        let hw = h * w;
        let mut data = Vec::with_capacity(n * total * hw);
        for b in 0..n {
            for (v, &c) in values.iter().zip(&chans) {
                data.extend_from_slice(&v.data()[b * c * hw..(b + 1) * c * hw]);
            }
        }
        let out = Tensor::new(&[n, total, h, w], data)?;
        Ok(self.custom(parts, out, move |g, _, _| {
            let mut grads: Vec<Vec<f32>> = chans.iter().map(|&c| Vec::with_capacity(n * c * hw)).collect();
            let mut off = 0;
            for _ in 0..n {
                for (gv, &c) in grads.iter_mut().zip(&chans) {
                    gv.extend_from_slice(&g.data()[off..off + c * hw]);
                    off += c * hw;
                }
            }
            grads
                .into_iter()
                .zip(&chans)
                .map(|(d, &c)| Some(Tensor::new(&[n, c, h, w], d).expect("sizes agree")))
                .collect()
        }))
    }
}
