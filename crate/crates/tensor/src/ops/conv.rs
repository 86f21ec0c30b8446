//! Stride-1 2D convolution via im2col and GEMM.

use crate::error::{Result, TensorError};
use crate::gemm::sgemm;
use crate::graph::Var;
use crate::tensor::Tensor;

#[derive(Clone, Copy)]
struct ConvGeom {
    ci: usize,
    k: usize,
    pad: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeom {
    fn cols_rows(&self) -> usize {
        self.ci * self.k * self.k
    }

    fn out_hw(&self) -> usize {
        self.oh * self.ow
    }
}

fn im2col(x: &[f32], g: &ConvGeom, cols: &mut [f32]) {
    let ohw = g.out_hw();
    for c in 0..g.ci {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = ((c * g.k + ky) * g.k + kx) * ohw;
                let dst = &mut cols[row..row + ohw];
                for oy in 0..g.oh {
                    let sy = (oy + ky) as isize - g.pad as isize;
                    let d = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    if sy < 0 || sy >= g.h as isize {
                        d.fill(0.0);
                        continue;
                    }
                    let src = &plane[sy as usize * g.w..(sy as usize + 1) * g.w];
                    for (ox, v) in d.iter_mut().enumerate() {
                        let sx = (ox + kx) as isize - g.pad as isize;
                        *v = if sx < 0 || sx >= g.w as isize { 0.0 } else { src[sx as usize] };
                    }
                }
            }
        }
    }
}

fn col2im_add(cols: &[f32], g: &ConvGeom, dx: &mut [f32]) {
    let ohw = g.out_hw();
    for c in 0..g.ci {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = ((c * g.k + ky) * g.k + kx) * ohw;
                let src = &cols[row..row + ohw];
                for oy in 0..g.oh {
                    let sy = (oy + ky) as isize - g.pad as isize;
                    if sy < 0 || sy >= g.h as isize {
                        continue;
                    }
                    let d = &mut plane[sy as usize * g.w..(sy as usize + 1) * g.w];
                    let s = &src[oy * g.ow..(oy + 1) * g.ow];
                    for (ox, &v) in s.iter().enumerate() {
                        let sx = (ox + kx) as isize - g.pad as isize;
                        if sx >= 0 && sx < g.w as isize {
                            d[sx as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

impl<'g> Var<'g> {
    /// Square-kernel convolution, stride 1, zero padding `pad`.
    /// `self: [N, Ci, H, W]`, `weight: [Co, Ci, k, k]`, `bias: [Co]`.
    pub fn conv2d(self, weight: Var<'g>, bias: Var<'g>, pad: usize) -> Result<Var<'g>> {
        let x = self.value();
        let wt = weight.value();
        let bs = bias.value();
        let (n, ci, h, w) = x.dims4()?;
        let (co, wci, k, k2) = wt.dims4()?;
        if wci != ci || k != k2 || bs.numel() != co {
            return Err(TensorError::Shape(format!(
                "conv2d input {:?}, weight {:?}, bias {:?}",
                x.shape(),
                wt.shape(),
                bs.shape()
            )));
        }
        if h + 2 * pad < k || w + 2 * pad < k {
            return Err(TensorError::Shape(format!("kernel {k} larger than padded input {h}x{w}")));
        }
        let geom = ConvGeom { ci, k, pad, h, w, oh: h + 2 * pad - k + 1, ow: w + 2 * pad - k + 1 };
        let kk = geom.cols_rows();
        let ohw = geom.out_hw();
        let direct = k == 1 && pad == 0;
        let mut cols = if direct { Vec::new() } else { vec![0.0f32; kk * ohw] };
        let mut out = Tensor::zeros(&[n, co, geom.oh, geom.ow]);
        for b in 0..n {
            let xb = &x.data()[b * ci * h * w..(b + 1) * ci * h * w];
            let src: &[f32] = if direct {
                xb
            } else {
                im2col(xb, &geom, &mut cols);
                &cols
            };
            let ob = &mut out.data_mut()[b * co * ohw..(b + 1) * co * ohw];
            for (o, &bv) in bs.data().iter().enumerate() {
                ob[o * ohw..(o + 1) * ohw].fill(bv);
            }
            sgemm(co, kk, ohw, wt.data(), (kk, 1), src, (ohw, 1), ob, (ohw, 1), 1.0);
        }
        Ok(self.graph.custom(&[self, weight, bias], out, move |g, inp, _| {
            let (x, wt) = (inp[0], inp[1]);
            let mut gx = Tensor::zeros(x.shape());
            let mut gw = Tensor::zeros(wt.shape());
            let mut gb = Tensor::zeros(&[co]);
            let mut cols = vec![0.0f32; kk * ohw];
            let mut dcols = vec![0.0f32; kk * ohw];
            let in_len = ci * geom.h * geom.w;
            for b in 0..n {
                let xb = &x.data()[b * in_len..(b + 1) * in_len];
                let gob = &g.data()[b * co * ohw..(b + 1) * co * ohw];
                for (o, acc) in gb.data_mut().iter_mut().enumerate() {
                    *acc += gob[o * ohw..(o + 1) * ohw].iter().sum::<f32>();
                }
                let src: &[f32] = if direct {
                    xb
                } else {
                    im2col(xb, &geom, &mut cols);
                    &cols
                };
                // dW += G · colsᵀ
                sgemm(co, ohw, kk, gob, (ohw, 1), src, (1, ohw), gw.data_mut(), (kk, 1), 1.0);
                let gxb = &mut gx.data_mut()[b * in_len..(b + 1) * in_len];
                if direct {
                    // dX = Wᵀ · G straight into the input gradient
                    sgemm(kk, co, ohw, wt.data(), (1, kk), gob, (ohw, 1), gxb, (ohw, 1), 1.0);
                } else {
                    sgemm(kk, co, ohw, wt.data(), (1, kk), gob, (ohw, 1), &mut dcols, (ohw, 1), 0.0);
                    col2im_add(&dcols, &geom, gxb);
                }
            }
            vec![Some(gx), Some(gw), Some(gb)]
        }))
    }
}
