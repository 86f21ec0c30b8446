//! Thin-plate-spline control grids, closed-form coefficient solves and warps.
//!
//! Coordinates follow a centred canonical frame: a pixel grid of any size
//! `H×W` is mapped onto `[-extent, extent]²`, with the first coordinate `x`
//! running along rows (size `H`) and `y` along columns (size `W`). The TPS
//! mapping is invariant to a uniform rescaling of the frame, so the choice of
//! extent only fixes the numeric scale of the coefficients.
//!
//! A warp samples the moving image at `T(p)` for every output pixel `p`,
//! where `T` interpolates `T(p_k) = p_k + δ_k` at the control points.

use ndarray::{Array2, ArrayView2};
use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::label::{Class, LabelMask};

/// Extent of the canonical frame used when the TPS is set up.
pub const CANONICAL_EXTENT: usize = 256;

const GRID_START: f64 = -0.98;
const GRID_SPAN: f64 = 1.95;

/// `m×m` equally spaced control points, row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ControlGrid {
    m: usize,
    extent: f64,
    points: Vec<[f64; 2]>,
}

/// Builds the control grid. For `m = 4` the axis positions are
/// `extent·(-0.98 + 0.65n)`; other sizes keep the same end points.
pub fn make_control_grid(m: usize, canonical_extent: usize) -> Result<ControlGrid> {
    if m < 2 {
        return Err(Error::InvalidGrid(format!("need at least 2 points per axis, got {m}")));
    }
    if canonical_extent == 0 {
        return Err(Error::InvalidGrid("canonical extent must be positive".into()));
    }
    let extent = canonical_extent as f64;
    let step = GRID_SPAN / (m - 1) as f64;
    let axis: Vec<f64> = (0..m).map(|n| extent * (GRID_START + step * n as f64)).collect();
    let points = axis.iter().flat_map(|&x| axis.iter().map(move |&y| [x, y])).collect();
    Ok(ControlGrid { m, extent, points })
}

impl ControlGrid {
    pub fn m(&self) -> usize {
        self.m
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn extent(&self) -> f64 {
        self.extent
    }

    pub fn points(&self) -> &[[f64; 2]] {
        &self.points
    }

    /// Distinct positions along one axis.
    pub fn axis(&self) -> Vec<f64> {
        self.points.iter().step_by(self.m).map(|p| p[0]).collect()
    }
}

/// Per-control-point displacements in pixels of `frame = (H, W)`.
/// `δx` runs along rows, `δy` along columns.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DisplacementSet {
    pub deltas: Vec<[f64; 2]>,
    pub frame: (usize, usize),
}

impl DisplacementSet {
    pub fn new(deltas: Vec<[f64; 2]>, frame: (usize, usize)) -> Result<Self> {
        if deltas.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Warp("non-finite displacement".into()));
        }
        if frame.0 == 0 || frame.1 == 0 {
            return Err(Error::Shape(format!("zero-sized displacement frame {frame:?}")));
        }
        Ok(Self { deltas, frame })
    }

    pub fn zeros(n: usize, frame: (usize, usize)) -> Self {
        Self { deltas: vec![[0.0; 2]; n], frame }
    }

    pub fn uniform(n: usize, frame: (usize, usize), t: [f64; 2]) -> Self {
        Self { deltas: vec![t; n], frame }
    }

    pub fn len(&self) -> usize {
        self.deltas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.deltas.is_empty()
    }

    /// Flat `[δx0, δy0, δx1, δy1, …]` layout used by checkpoints and the network.
    pub fn to_flat(&self) -> Vec<f64> {
        self.deltas.iter().flatten().copied().collect()
    }

    pub fn from_flat(flat: &[f64], frame: (usize, usize)) -> Result<Self> {
        if flat.len() % 2 != 0 {
            return Err(Error::Shape(format!("odd displacement vector length {}", flat.len())));
        }
        Self::new(flat.chunks_exact(2).map(|c| [c[0], c[1]]).collect(), frame)
    }
}

/// Rescales displacements from an `H×W` frame to an `h×w` frame:
/// `(δx·h/H, δy·w/W)`. Control points live in the canonical frame and are
/// unaffected.
pub fn rescale_displacements(
    d: &DisplacementSet,
    big_h: usize,
    big_w: usize,
    h: usize,
    w: usize,
) -> Result<DisplacementSet> {
    if big_h == 0 || big_w == 0 || h == 0 || w == 0 {
        return Err(Error::Shape(format!("zero dimension in rescale {big_h}x{big_w} -> {h}x{w}")));
    }
    let (sx, sy) = (h as f64 / big_h as f64, w as f64 / big_w as f64);
    Ok(DisplacementSet { deltas: d.deltas.iter().map(|&[dx, dy]| [dx * sx, dy * sy]).collect(), frame: (h, w) })
}

/// Radial basis `U(r) = r² log r²`, written in terms of `r²`.
fn kernel(r2: f64) -> f64 {
    if r2 <= 0.0 {
        0.0
    } else {
        r2 * r2.ln()
    }
}

fn kernel_at(a: [f64; 2], b: [f64; 2]) -> f64 {
    kernel((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2))
}

/// Solves `A X = B` in place by Gaussian elimination with partial pivoting.
/// `a` is `n×n` row-major, `b` is `n×k` row-major; on success `b` holds `X`.
fn solve_dense(mut a: Vec<f64>, b: &mut [f64], n: usize, k: usize) -> Result<()> {
    let scale = a.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1.0);
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&i, &j| a[i * n + col].abs().total_cmp(&a[j * n + col].abs()))
            .expect("non-empty range");
        if a[piv * n + col].abs() <= 1e-12 * scale {
            return Err(Error::DegenerateGrid);
        }
        if piv != col {
            for j in 0..n {
                a.swap(col * n + j, piv * n + j);
            }
            for j in 0..k {
                b.swap(col * k + j, piv * k + j);
            }
        }
        let d = a[col * n + col];
        for row in col + 1..n {
            let f = a[row * n + col] / d;
            if f == 0.0 {
                continue;
            }
            for j in col..n {
                a[row * n + j] -= f * a[col * n + j];
            }
            for j in 0..k {
                b[row * k + j] -= f * b[col * k + j];
            }
        }
    }
    for col in (0..n).rev() {
        let d = a[col * n + col];
        for j in 0..k {
            let mut s = b[col * k + j];
            for i in col + 1..n {
                s -= a[col * n + i] * b[i * k + j];
            }
            b[col * k + j] = s / d;
        }
    }
    Ok(())
}

/// The `(n+3)×(n+3)` system `[[K, P], [Pᵀ, 0]]` with `P = [1, x, y]`.
fn system_matrix(sources: &[[f64; 2]]) -> Vec<f64> {
    let n = sources.len();
    let s = n + 3;
    let mut l = vec![0.0; s * s];
    for i in 0..n {
        for j in 0..n {
            l[i * s + j] = kernel_at(sources[i], sources[j]);
        }
        let p = [1.0, sources[i][0], sources[i][1]];
        for (c, &v) in p.iter().enumerate() {
            l[i * s + n + c] = v;
            l[(n + c) * s + i] = v;
        }
    }
    l
}

/// Affine part plus radial weights of a fitted TPS, in canonical coordinates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TpsCoefficients {
    /// Row `d` maps `[1, x, y]` to output coordinate `d`.
    pub affine: [[f64; 3]; 2],
    pub rbf_weights: Vec<[f64; 2]>,
    pub sources: Vec<[f64; 2]>,
    pub extent: f64,
}

impl TpsCoefficients {
    /// Fits the interpolating TPS taking `sources[k]` to `targets[k]`.
    pub fn fit(sources: &[[f64; 2]], targets: &[[f64; 2]], extent: f64) -> Result<Self> {
        if sources.len() != targets.len() {
            return Err(Error::Shape(format!(
                "{} sources but {} targets",
                sources.len(),
                targets.len()
            )));
        }
        let n = sources.len();
        if n < 3 {
            return Err(Error::InvalidGrid(format!("need at least 3 control points, got {n}")));
        }
        // the interpolant is scale invariant; solving in unit coordinates
        // keeps the kernel and polynomial blocks comparably sized
        let scale = extent.max(f64::MIN_POSITIVE);
        let unit: Vec<[f64; 2]> = sources.iter().map(|p| [p[0] / scale, p[1] / scale]).collect();
        let mut rhs = vec![0.0; (n + 3) * 2];
        for (k, t) in targets.iter().enumerate() {
            rhs[k * 2] = t[0] / scale;
            rhs[k * 2 + 1] = t[1] / scale;
        }
        solve_dense(system_matrix(&unit), &mut rhs, n + 3, 2)?;
        let w_unit: Vec<[f64; 2]> = (0..n).map(|k| [rhs[k * 2], rhs[k * 2 + 1]]).collect();
        let log_s2 = (scale * scale).ln();
        let mut affine = [[0.0; 3]; 2];
        for (d, row) in affine.iter_mut().enumerate() {
            let moment: f64 = w_unit.iter().zip(sources).map(|(w, p)| w[d] * (p[0] * p[0] + p[1] * p[1])).sum();
            row[0] = rhs[n * 2 + d] * scale - log_s2 / scale * moment;
            row[1] = rhs[(n + 1) * 2 + d];
            row[2] = rhs[(n + 2) * 2 + d];
        }
        Ok(Self {
            affine,
            rbf_weights: w_unit.iter().map(|w| [w[0] / scale, w[1] / scale]).collect(),
            sources: sources.to_vec(),
            extent,
        })
    }

    pub fn identity(grid: &ControlGrid) -> Self {
        Self {
            affine: [[0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            rbf_weights: vec![[0.0; 2]; grid.len()],
            sources: grid.points.clone(),
            extent: grid.extent,
        }
    }

    pub fn evaluate(&self, p: [f64; 2]) -> [f64; 2] {
        let mut out = [0.0; 2];
        for (d, o) in out.iter_mut().enumerate() {
            let a = self.affine[d];
            *o = a[0] + a[1] * p[0] + a[2] * p[1];
        }
        for (s, w) in self.sources.iter().zip(&self.rbf_weights) {
            let u = kernel_at(p, *s);
            out[0] += w[0] * u;
            out[1] += w[1] * u;
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.affine.iter().flatten().chain(self.rbf_weights.iter().flatten()).all(|v| v.is_finite())
    }
}

/// Closed-form TPS for displacements expressed in pixels of `displacements.frame`.
pub fn solve_tps(grid: &ControlGrid, displacements: &DisplacementSet) -> Result<TpsCoefficients> {
    if grid.len() != displacements.len() {
        return Err(Error::Shape(format!(
            "grid has {} points but {} displacements",
            grid.len(),
            displacements.len()
        )));
    }
    let frame = PixelFrame::new(displacements.frame.0, displacements.frame.1, grid.extent);
    let targets: Vec<[f64; 2]> = grid
        .points
        .iter()
        .zip(&displacements.deltas)
        .map(|(p, d)| {
            let c = frame.delta_to_canonical(*d);
            [p[0] + c[0], p[1] + c[1]]
        })
        .collect();
    TpsCoefficients::fit(&grid.points, &targets, grid.extent)
}

/// Maps pixel indices of an `h×w` image (pixel centres) to the canonical frame.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PixelFrame {
    pub h: usize,
    pub w: usize,
    pub extent: f64,
}

impl PixelFrame {
    pub fn new(h: usize, w: usize, extent: f64) -> Self {
        Self { h, w, extent }
    }

    pub fn to_canonical(&self, r: f64, c: f64) -> [f64; 2] {
        [
            self.extent * ((2.0 * r + 1.0) / self.h as f64 - 1.0),
            self.extent * ((2.0 * c + 1.0) / self.w as f64 - 1.0),
        ]
    }

    pub fn to_pixel(&self, p: [f64; 2]) -> [f64; 2] {
        [
            (p[0] / self.extent + 1.0) * self.h as f64 / 2.0 - 0.5,
            (p[1] / self.extent + 1.0) * self.w as f64 / 2.0 - 0.5,
        ]
    }

    pub fn delta_to_canonical(&self, d: [f64; 2]) -> [f64; 2] {
        [d[0] * 2.0 * self.extent / self.h as f64, d[1] * 2.0 * self.extent / self.w as f64]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Interpolation {
    Bilinear,
    Nearest,
}

/// Bilinear sample with zero fill outside the image.
pub fn sample_bilinear<F: Float>(img: ArrayView2<F>, r: f64, c: f64) -> F {
    bilinear_with_grad(img, r, c).0
}

/// Bilinear sample and its partial derivatives along rows and columns.
pub fn bilinear_with_grad<F: Float>(img: ArrayView2<F>, r: f64, c: f64) -> (F, F, F) {
    let (h, w) = img.dim();
    let (r0, c0) = (r.floor(), c.floor());
    let (fr, fc) = (r - r0, c - c0);
    let at = |rr: f64, cc: f64| -> f64 {
        if rr < 0.0 || cc < 0.0 || rr >= h as f64 || cc >= w as f64 {
            0.0
        } else {
            img[[rr as usize, cc as usize]].to_f64().unwrap_or(0.0)
        }
    };
    let (v00, v01, v10, v11) = (at(r0, c0), at(r0, c0 + 1.0), at(r0 + 1.0, c0), at(r0 + 1.0, c0 + 1.0));
    let v = (1.0 - fr) * ((1.0 - fc) * v00 + fc * v01) + fr * ((1.0 - fc) * v10 + fc * v11);
    let dr = (1.0 - fc) * (v10 - v00) + fc * (v11 - v01);
    let dc = (1.0 - fr) * (v01 - v00) + fr * (v11 - v10);
    let f = |x: f64| F::from(x).unwrap_or_else(F::zero);
    (f(v), f(dr), f(dc))
}

/// Nearest-neighbour sample with fill outside the image.
pub fn sample_nearest<T: Copy>(img: ArrayView2<T>, r: f64, c: f64, fill: T) -> T {
    let (h, w) = img.dim();
    let (rr, cc) = (r.round(), c.round());
    if rr < 0.0 || cc < 0.0 || rr >= h as f64 || cc >= w as f64 || !rr.is_finite() || !cc.is_finite() {
        fill
    } else {
        img[[rr as usize, cc as usize]]
    }
}

fn check_coeffs(coeffs: &TpsCoefficients) -> Result<()> {
    if !coeffs.is_finite() {
        return Err(Error::Warp("non-finite TPS coefficients".into()));
    }
    Ok(())
}

/// Warps a scalar image by evaluating the TPS at every output pixel.
pub fn warp_image<F: Float>(
    image: ArrayView2<F>,
    coeffs: &TpsCoefficients,
    interpolation: Interpolation,
) -> Result<Array2<F>> {
    check_coeffs(coeffs)?;
    let (h, w) = image.dim();
    let frame = PixelFrame::new(h, w, coeffs.extent);
    Ok(Array2::from_shape_fn((h, w), |(r, c)| {
        let [sr, sc] = frame.to_pixel(coeffs.evaluate(frame.to_canonical(r as f64, c as f64)));
        match interpolation {
            Interpolation::Bilinear => sample_bilinear(image, sr, sc),
            Interpolation::Nearest => sample_nearest(image, sr, sc, F::zero()),
        }
    }))
}

/// Nearest-neighbour label warp with background fill.
pub fn warp_label(mask: &LabelMask, coeffs: &TpsCoefficients) -> Result<LabelMask> {
    check_coeffs(coeffs)?;
    let (h, w) = mask.dim();
    let frame = PixelFrame::new(h, w, coeffs.extent);
    let src = mask.view();
    let out = Array2::from_shape_fn((h, w), |(r, c)| {
        let [sr, sc] = frame.to_pixel(coeffs.evaluate(frame.to_canonical(r as f64, c as f64)));
        sample_nearest(src, sr, sc, Class::Background.code())
    });
    LabelMask::new(out)
}

/// Bilinearly warped one-hot channels, one per entry of `Class::ALL`.
pub fn warp_label_soft(mask: &LabelMask, coeffs: &TpsCoefficients) -> Result<Vec<Array2<f64>>> {
    Class::ALL
        .iter()
        .map(|&class| {
            let onehot = mask.binary(class).mapv(|b| if b { 1.0 } else { 0.0 });
            warp_image(onehot.view(), coeffs, Interpolation::Bilinear)
        })
        .collect()
}

/// Renormalises soft channels and takes the argmax; pixels that received no
/// mass (sampled entirely outside the image) become background.
pub fn soft_to_hard(channels: &[Array2<f64>]) -> Result<LabelMask> {
    let first = channels.first().ok_or_else(|| Error::Shape("no channels".into()))?;
    let (h, w) = first.dim();
    let out = Array2::from_shape_fn((h, w), |(r, c)| {
        let total: f64 = channels.iter().map(|ch| ch[[r, c]]).sum();
        if total <= 1e-9 {
            return 0u8;
        }
        channels
            .iter()
            .enumerate()
            .max_by(|a, b| (a.1[[r, c]] / total).total_cmp(&(b.1[[r, c]] / total)))
            .map(|(i, _)| i as u8)
            .unwrap_or(0)
    });
    LabelMask::new(out)
}

/// Dense linear map from control-point displacements to per-pixel sampling
/// offsets for a fixed grid and output size.
///
/// Row `p` of the `(h·w)×n` matrix gives the weights with which each control
/// point's displacement moves the sampling location of pixel `p`; sampling
/// coordinates in pixel units are `p + B·δ`. Because the TPS reproduces
/// affine maps exactly, this is the same mapping [`solve_tps`] produces.
#[derive(Clone, Debug)]
pub struct TpsBasis {
    h: usize,
    w: usize,
    n: usize,
    weights: Vec<f64>,
}

impl TpsBasis {
    pub fn new(grid: &ControlGrid, h: usize, w: usize) -> Result<Self> {
        if h == 0 || w == 0 {
            return Err(Error::Shape(format!("empty basis frame {h}x{w}")));
        }
        let n = grid.len();
        let s = n + 3;
        // columns 0..n of L⁻¹
        let mut inv = vec![0.0; s * n];
        for k in 0..n {
            inv[k * n + k] = 1.0;
        }
        let unit: Vec<[f64; 2]> = grid.points.iter().map(|p| [p[0] / grid.extent, p[1] / grid.extent]).collect();
        solve_dense(system_matrix(&unit), &mut inv, s, n)?;
        let frame = PixelFrame::new(h, w, 1.0);
        let mut weights = vec![0.0; h * w * n];
        let mut row = vec![0.0; s];
        for r in 0..h {
            for c in 0..w {
                let p = frame.to_canonical(r as f64, c as f64);
                for (i, src) in unit.iter().enumerate() {
                    row[i] = kernel_at(p, *src);
                }
                row[n] = 1.0;
                row[n + 1] = p[0];
                row[n + 2] = p[1];
                let out = &mut weights[(r * w + c) * n..(r * w + c + 1) * n];
                for (j, &rj) in row.iter().enumerate() {
                    if rj == 0.0 {
                        continue;
                    }
                    for (k, o) in out.iter_mut().enumerate() {
                        *o += rj * inv[j * n + k];
                    }
                }
            }
        }
        Ok(Self { h, w, n, weights })
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.h, self.w)
    }

    pub fn num_points(&self) -> usize {
        self.n
    }

    /// Row-major `(h·w)×n` weights.
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    fn check_frame(&self, d: &DisplacementSet) -> Result<()> {
        if d.frame != (self.h, self.w) || d.len() != self.n {
            return Err(Error::Shape(format!(
                "displacements ({} in frame {:?}) do not match basis ({} in {}x{})",
                d.len(),
                d.frame,
                self.n,
                self.h,
                self.w
            )));
        }
        if d.deltas.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Warp("non-finite displacement".into()));
        }
        Ok(())
    }

    /// Sampling coordinates `(row, col)` for every output pixel.
    pub fn sample_coords(&self, d: &DisplacementSet) -> Result<Vec<[f64; 2]>> {
        self.check_frame(d)?;
        let mut out = Vec::with_capacity(self.h * self.w);
        for r in 0..self.h {
            for c in 0..self.w {
                let row = &self.weights[(r * self.w + c) * self.n..(r * self.w + c + 1) * self.n];
                let mut s = [r as f64, c as f64];
                for (b, dk) in row.iter().zip(&d.deltas) {
                    s[0] += b * dk[0];
                    s[1] += b * dk[1];
                }
                out.push(s);
            }
        }
        Ok(out)
    }

    pub fn warp<F: Float>(
        &self,
        image: ArrayView2<F>,
        d: &DisplacementSet,
        interpolation: Interpolation,
    ) -> Result<Array2<F>> {
        if image.dim() != (self.h, self.w) {
            return Err(Error::Shape(format!("image {:?} vs basis {}x{}", image.dim(), self.h, self.w)));
        }
        let coords = self.sample_coords(d)?;
        Ok(Array2::from_shape_fn((self.h, self.w), |(r, c)| {
            let [sr, sc] = coords[r * self.w + c];
            match interpolation {
                Interpolation::Bilinear => sample_bilinear(image, sr, sc),
                Interpolation::Nearest => sample_nearest(image, sr, sc, F::zero()),
            }
        }))
    }

    /// Vector-Jacobian product of the bilinear warp: given `∂L/∂(warped)`,
    /// returns `∂L/∂δ` for every control point.
    pub fn warp_vjp(&self, image: ArrayView2<f64>, d: &DisplacementSet, grad_out: ArrayView2<f64>) -> Result<Vec<[f64; 2]>> {
        if grad_out.dim() != (self.h, self.w) || image.dim() != (self.h, self.w) {
            return Err(Error::Shape("gradient/image do not match basis".into()));
        }
        let coords = self.sample_coords(d)?;
        let mut grad = vec![[0.0; 2]; self.n];
        for (p, [sr, sc]) in coords.into_iter().enumerate() {
            let g = grad_out[[p / self.w, p % self.w]];
            if g == 0.0 {
                continue;
            }
            let (_, dr, dc) = bilinear_with_grad(image, sr, sc);
            let row = &self.weights[p * self.n..(p + 1) * self.n];
            for (acc, &b) in grad.iter_mut().zip(row) {
                acc[0] += g * dr * b;
                acc[1] += g * dc * b;
            }
        }
        Ok(grad)
    }
}
