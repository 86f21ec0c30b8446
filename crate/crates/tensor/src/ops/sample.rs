//! Differentiable bilinear sampling.
//!
//! Coordinates are in input pixel units `(row, col)` with pixel centres at
//! integers. Taps that fall outside the input contribute zero.

use crate::error::{Result, TensorError};
use crate::graph::Var;
use crate::tensor::Tensor;

struct Taps {
    idx: [Option<usize>; 4],
    w: [f32; 4],
    // partial derivatives of each tap weight wrt (row, col)
    dr: [f32; 4],
    dc: [f32; 4],
}

fn taps(r: f32, c: f32, h: usize, w: usize) -> Taps {
    let r0 = r.floor();
    let c0 = c.floor();
    let fr = r - r0;
    let fc = c - c0;
    let (r0, c0) = (r0 as isize, c0 as isize);
    let at = |rr: isize, cc: isize| {
        (rr >= 0 && cc >= 0 && (rr as usize) < h && (cc as usize) < w).then(|| rr as usize * w + cc as usize)
    };
    Taps {
        idx: [at(r0, c0), at(r0, c0 + 1), at(r0 + 1, c0), at(r0 + 1, c0 + 1)],
        w: [(1.0 - fr) * (1.0 - fc), (1.0 - fr) * fc, fr * (1.0 - fc), fr * fc],
        dr: [-(1.0 - fc), -fc, 1.0 - fc, fc],
        dc: [-(1.0 - fr), 1.0 - fr, -fr, fr],
    }
}

impl<'g> Var<'g> {
    /// Samples `self: [N, C, H, W]` at `coords: [N, oh*ow, 2]`, producing
    /// `[N, C, oh, ow]`. Differentiable in both the input and the coordinates.
    pub fn grid_sample(self, coords: Var<'g>, oh: usize, ow: usize) -> Result<Var<'g>> {
        let x = self.value();
        let cv = coords.value();
        let (n, c, h, w) = x.dims4()?;
        let p = oh * ow;
        if cv.shape() != [n, p, 2] {
            return Err(TensorError::Shape(format!(
                "grid_sample coords {:?}, expected [{n}, {p}, 2]",
                cv.shape()
            )));
        }
        let hw = h * w;
        let mut out = Tensor::zeros(&[n, c, oh, ow]);
        for b in 0..n {
            let cb = &cv.data()[b * p * 2..(b + 1) * p * 2];
            for (q, rc) in cb.chunks_exact(2).enumerate() {
                let t = taps(rc[0], rc[1], h, w);
                for ch in 0..c {
                    let plane = &x.data()[(b * c + ch) * hw..(b * c + ch + 1) * hw];
                    let mut v = 0.0;
                    for j in 0..4 {
                        if let Some(i) = t.idx[j] {
                            v += t.w[j] * plane[i];
                        }
                    }
                    out.data_mut()[(b * c + ch) * p + q] = v;
                }
            }
        }
        Ok(self.graph.custom(&[self, coords], out, move |g, inp, _| {
            let (x, cv) = (inp[0], inp[1]);
            let mut gx = Tensor::zeros(x.shape());
            let mut gc = Tensor::zeros(cv.shape());
            for b in 0..n {
                for q in 0..p {
                    let ci = (b * p + q) * 2;
                    let t = taps(cv.data()[ci], cv.data()[ci + 1], h, w);
                    let (mut dr, mut dc) = (0.0f32, 0.0f32);
                    for ch in 0..c {
                        let go = g.data()[(b * c + ch) * p + q];
                        if go == 0.0 {
                            continue;
                        }
                        let off = (b * c + ch) * hw;
                        for j in 0..4 {
                            if let Some(i) = t.idx[j] {
                                gx.data_mut()[off + i] += t.w[j] * go;
                                let v = x.data()[off + i];
                                dr += t.dr[j] * v * go;
                                dc += t.dc[j] * v * go;
                            }
                        }
                    }
                    gc.data_mut()[ci] = dr;
                    gc.data_mut()[ci + 1] = dc;
                }
            }
            vec![Some(gx), Some(gc)]
        }))
    }

    /// Bilinear resize with half-pixel centres (`align_corners = false`).
    pub fn resize_bilinear(self, oh: usize, ow: usize) -> Result<Var<'g>> {
        let (n, _, h, w) = self.value().dims4()?;
        let (sr, sc) = (h as f32 / oh as f32, w as f32 / ow as f32);
        let mut coords = Vec::with_capacity(n * oh * ow * 2);
        for _ in 0..n {
            for r in 0..oh {
                for c in 0..ow {
                    coords.push(((r as f32 + 0.5) * sr - 0.5).clamp(0.0, (h - 1) as f32));
                    coords.push(((c as f32 + 0.5) * sc - 0.5).clamp(0.0, (w - 1) as f32));
                }
            }
        }
        let grid = self.graph.constant(Tensor::new(&[n, oh * ow, 2], coords)?);
        self.grid_sample(grid, oh, ow)
    }
}

#[cfg(test)]
mod tests {
    use crate::{Graph, Tensor};

    #[test]
    fn integer_coordinates_copy_pixels() {
        let g = Graph::new();
        let x = g.constant(Tensor::new(&[1, 1, 2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap());
        let c = g.constant(Tensor::new(&[1, 2, 2], vec![1., 2., 0., 0.]).unwrap());
        let y = x.grid_sample(c, 1, 2).unwrap().value();
        assert_eq!(y.data(), &[6., 1.]);
    }

    #[test]
    fn outside_samples_are_zero() {
        let g = Graph::new();
        let x = g.constant(Tensor::full(&[1, 1, 2, 2], 3.0));
        let c = g.constant(Tensor::new(&[1, 2, 2], vec![-1.0, 0.0, 0.5, 0.5]).unwrap());
        let y = x.grid_sample(c, 1, 2).unwrap().value();
        assert_eq!(y.data(), &[0.0, 3.0]);
    }

    #[test]
    fn halving_resize_is_block_average() {
        let g = Graph::new();
        let data: Vec<f32> = (0..16).map(|v| v as f32).collect();
        let x = g.constant(Tensor::new(&[1, 1, 4, 4], data).unwrap());
        let y = x.resize_bilinear(2, 2).unwrap().value();
        assert_eq!(y.data(), &[2.5, 4.5, 10.5, 12.5]);
    }
}
