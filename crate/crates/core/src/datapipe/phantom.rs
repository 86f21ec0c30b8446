use std::collections::BTreeMap;
use std::f64::consts::PI;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{MultiSeqSlice, Provenance, Sequence};
use crate::error::{Error, Result};
use crate::label::{Class, LabelMask};
use crate::tps::{make_control_grid, solve_tps, DisplacementSet, PixelFrame, TpsCoefficients, CANONICAL_EXTENT};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub seed: u64,
    /// Largest control-point displacement of bSSFP and T2, in pixels.
    pub misalign_magnitude: f64,
    pub scar_fraction: f64,
    pub edema_fraction: f64,
    pub noise_sigma: f64,
    pub size: usize,
    pub spacing_mm: f64,
    pub grid_m: usize,
    /// Largest offset of the heart from the image centre, in pixels.
    pub center_jitter: f64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            misalign_magnitude: 8.0,
            scar_fraction: 0.12,
            edema_fraction: 0.25,
            noise_sigma: 0.03,
            size: 64,
            spacing_mm: 1.5,
            grid_m: 4,
            center_jitter: 3.0,
        }
    }
}

impl PhantomSpec {
    /// Spec with pathology fractions drawn from the seed, as used for datasets.
    pub fn sampled(seed: u64, misalign_magnitude: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_f00d);
        let edema = rng.gen_range(0.18..0.32);
        let scar = edema * rng.gen_range(0.4..0.7);
        Self { seed, misalign_magnitude, scar_fraction: scar, edema_fraction: edema, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let frac = |v: f64| (0.0..=1.0).contains(&v);
        if !frac(self.scar_fraction) || !frac(self.edema_fraction) {
            return Err(Error::InvalidSpec("pathology fractions must lie in [0, 1]".into()));
        }
        if self.scar_fraction > self.edema_fraction {
            return Err(Error::InvalidSpec("scar must lie inside edema: scar_fraction > edema_fraction".into()));
        }
        if !(self.misalign_magnitude >= 0.0 && self.misalign_magnitude.is_finite()) {
            return Err(Error::InvalidSpec("misalignment must be finite and non-negative".into()));
        }
        if !(self.noise_sigma >= 0.0) || !(self.spacing_mm > 0.0) || !(self.center_jitter >= 0.0) {
            return Err(Error::InvalidSpec("noise, spacing and jitter must be non-negative".into()));
        }
        if self.size < 32 {
            return Err(Error::InvalidSpec(format!("size {} too small for the heart model", self.size)));
        }
        if self.grid_m < 2 {
            return Err(Error::InvalidSpec("grid needs at least 2 points per axis".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Phantom {
    pub slice: MultiSeqSlice,
    /// Displacements that warp each moving sequence back onto LGE.
    pub displacements: BTreeMap<Sequence, DisplacementSet>,
    /// Heart centre in LGE pixel coordinates.
    pub center: (f64, f64),
    pub spec: PhantomSpec,
}

/// Continuous heart geometry in LGE pixel coordinates.
struct Heart {
    center: (f64, f64),
    rot: f64,
    ecc: f64,
    r_lv: f64,
    wall: f64,
    rv_center: (f64, f64),
    r_rv: f64,
    path_angle: f64,
    edema_half: f64,
    scar_half: f64,
    scar_depth: f64,
    body: (f64, f64),
    blobs: Vec<Blob>,
}

struct Blob {
    center: (f64, f64),
    sigma: f64,
    level: [f64; 3],
}

fn wrap(a: f64) -> f64 {
    (a + PI).rem_euclid(2.0 * PI) - PI
}

impl Heart {
    fn local(&self, p: (f64, f64)) -> (f64, f64) {
        let (dy, dx) = (p.0 - self.center.0, p.1 - self.center.1);
        let (s, c) = self.rot.sin_cos();
        let (u, v) = (c * dy + s * dx, -s * dy + c * dx);
        (u / self.ecc, v * self.ecc)
    }

    fn class(&self, p: (f64, f64)) -> Class {
        let (u, v) = self.local(p);
        let r = u.hypot(v);
        if r < self.r_lv {
            return Class::LeftVentricle;
        }
        if r < self.r_lv + self.wall {
            let depth = (r - self.r_lv) / self.wall;
            let d = wrap(v.atan2(u) - self.path_angle).abs();
            return if d <= self.scar_half && depth <= self.scar_depth {
                Class::Scar
            } else if d <= self.edema_half {
                Class::Edema
            } else {
                Class::Myocardium
            };
        }
        if (u - self.rv_center.0).hypot(v - self.rv_center.1) < self.r_rv {
            return Class::RightVentricle;
        }
        Class::Background
    }

    fn in_body(&self, p: (f64, f64), size: f64) -> bool {
        let c = size / 2.0 - 0.5;
        ((p.0 - c) / self.body.0).powi(2) + ((p.1 - c) / self.body.1).powi(2) < 1.0
    }

    fn intensity(&self, p: (f64, f64), seq: usize, table: &[[f64; 6]; 3], size: f64) -> f64 {
        let class = self.class(p);
        if class != Class::Background {
            return table[seq][class.code() as usize];
        }
        if !self.in_body(p, size) {
            return 0.0;
        }
        let mut v = table[seq][0];
        for b in &self.blobs {
            let g = (-((p.0 - b.center.0).powi(2) + (p.1 - b.center.1).powi(2)) / (2.0 * b.sigma * b.sigma)).exp();
            v += g * (b.level[seq] - v);
        }
        v
    }
}

/// Nominal class intensities per sequence, indexed by class code.
const BASE: [[f64; 6]; 3] = [
    // bg, myo, lv, rv, scar, edema
    [0.35, 0.20, 1.00, 0.95, 0.22, 0.24], // bSSFP
    [0.35, 0.10, 0.75, 0.70, 1.00, 0.14], // LGE
    [0.30, 0.32, 0.12, 0.12, 0.85, 0.90], // T2
];

fn seq_index(s: Sequence) -> usize {
    match s {
        Sequence::Bssfp => 0,
        Sequence::Lge => 1,
        Sequence::T2 => 2,
    }
}

/// Fraction of the annulus area within `depth` of the inner wall.
fn annulus_fraction(r: f64, t: f64, depth: f64) -> f64 {
    ((r + depth * t).powi(2) - r * r) / ((r + t).powi(2) - r * r)
}

fn sample_displacements(rng: &mut ChaCha8Rng, n: usize, mag: f64, frame: (usize, usize)) -> DisplacementSet {
    let t = [rng.gen_range(-0.75..=0.75) * mag, rng.gen_range(-0.75..=0.75) * mag];
    let deltas = (0..n)
        .map(|_| {
            let d = [t[0] + rng.gen_range(-0.25..=0.25) * mag, t[1] + rng.gen_range(-0.25..=0.25) * mag];
            let norm = d[0].hypot(d[1]);
            if norm > mag {
                [d[0] * mag / norm, d[1] * mag / norm]
            } else {
                d
            }
        })
        .collect();
    DisplacementSet { deltas, frame }
}

/// Inverts `q = T(p)` by fixed-point iteration, in pixel coordinates.
fn invert(coeffs: &TpsCoefficients, frame: &PixelFrame, q: (f64, f64)) -> (f64, f64) {
    let mut p = q;
    for _ in 0..50 {
        let t = frame.to_pixel(coeffs.evaluate(frame.to_canonical(p.0, p.1)));
        let next = (q.0 - (t[0] - p.0), q.1 - (t[1] - p.1));
        let moved = (next.0 - p.0).abs() + (next.1 - p.1).abs();
        p = next;
        if moved < 1e-10 {
            break;
        }
    }
    p
}

fn gaussian_blur(img: &Array2<f64>, sigma: f64) -> Array2<f64> {
    let rad = (3.0 * sigma).ceil() as isize;
    let k: Vec<f64> = (-rad..=rad).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let norm: f64 = k.iter().sum();
    let (h, w) = img.dim();
    let pass = |src: &Array2<f64>, vertical: bool| {
        Array2::from_shape_fn((h, w), |(r, c)| {
            let mut acc = 0.0;
            for (o, kv) in (-rad..=rad).zip(&k) {
                let (rr, cc) = if vertical { (r as isize + o, c as isize) } else { (r as isize, c as isize + o) };
                let rr = rr.clamp(0, h as isize - 1) as usize;
                let cc = cc.clamp(0, w as isize - 1) as usize;
                acc += kv * src[[rr, cc]];
            }
            acc / norm
        })
    };
    pass(&pass(img, true), false)
}

/// Renders a three-sequence cardiac phantom. bSSFP and T2 are misaligned by
/// a random TPS whose control-point displacements are returned as ground
/// truth: warping each moving sequence with them recovers the LGE geometry.
pub fn generate_phantom(spec: &PhantomSpec) -> Result<Phantom> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let size = spec.size as f64;
    let f = size / 64.0;
    let mid = size / 2.0 - 0.5;
    let jitter = |rng: &mut ChaCha8Rng| {
        if spec.center_jitter > 0.0 {
            rng.gen_range(-spec.center_jitter..=spec.center_jitter)
        } else {
            0.0
        }
    };
    let center = (mid + jitter(&mut rng), mid + jitter(&mut rng));
    let r_lv = rng.gen_range(7.0..9.0) * f;
    let wall = rng.gen_range(5.0..7.0) * f;
    let r_rv = rng.gen_range(8.0..11.0) * f;
    let rv_angle = PI / 2.0 + rng.gen_range(-0.5..0.5);
    let rv_dist = r_lv + wall + 0.6 * r_rv;
    let edema_half = PI * spec.edema_fraction;
    let scar_depth = rng.gen_range(0.45..1.0);
    let scar_half = (PI * spec.scar_fraction / annulus_fraction(r_lv, wall, scar_depth)).min(edema_half);
    let mut heart = Heart {
        center,
        rot: rng.gen_range(-0.3..0.3),
        ecc: rng.gen_range(0.9..1.1),
        r_lv,
        wall,
        rv_center: (rv_dist * rv_angle.cos(), rv_dist * rv_angle.sin()),
        r_rv,
        path_angle: rng.gen_range(-PI..PI),
        edema_half,
        scar_half,
        scar_depth,
        body: (rng.gen_range(0.42..0.47) * size, rng.gen_range(0.44..0.49) * size),
        blobs: Vec::new(),
    };
    for _ in 0..3 {
        let ang: f64 = rng.gen_range(-PI..PI);
        let dist = rng.gen_range(0.3..0.4) * size;
        heart.blobs.push(Blob {
            center: (mid + dist * ang.cos(), mid + dist * ang.sin()),
            sigma: rng.gen_range(3.0..6.0) * f,
            level: [rng.gen_range(0.2..0.6), rng.gen_range(0.2..0.6), rng.gen_range(0.2..0.6)],
        });
    }
    let mut table = BASE;
    for row in table.iter_mut() {
        for v in row.iter_mut() {
            *v *= rng.gen_range(0.9..1.1);
        }
    }

    let frame_dims = (spec.size, spec.size);
    let grid = make_control_grid(spec.grid_m, CANONICAL_EXTENT)?;
    let frame = PixelFrame::new(spec.size, spec.size, grid.extent());
    let mut displacements = BTreeMap::new();
    let mut transforms = BTreeMap::new();
    for seq in Sequence::MOVING {
        let d = if spec.misalign_magnitude > 0.0 {
            sample_displacements(&mut rng, grid.len(), spec.misalign_magnitude, frame_dims)
        } else {
            DisplacementSet::zeros(grid.len(), frame_dims)
        };
        let coeffs = if spec.misalign_magnitude > 0.0 { Some(solve_tps(&grid, &d)?) } else { None };
        transforms.insert(seq, coeffs);
        displacements.insert(seq, d);
    }
    transforms.insert(Sequence::Lge, None);

    let noise = Normal::new(0.0, spec.noise_sigma.max(1e-12)).map_err(|e| Error::InvalidSpec(e.to_string()))?;
    let mut images = BTreeMap::new();
    let mut labels = BTreeMap::new();
    for seq in Sequence::ALL {
        let t = &transforms[&seq];
        let scene = |q: (f64, f64)| match t {
            Some(c) => invert(c, &frame, q),
            None => q,
        };
        let lab = Array2::from_shape_fn(frame_dims, |(r, c)| heart.class(scene((r as f64, c as f64))).code());
        let img = Array2::from_shape_fn(frame_dims, |(r, c)| {
            let mut acc = 0.0;
            for (or, oc) in [(-0.25, -0.25), (-0.25, 0.25), (0.25, -0.25), (0.25, 0.25)] {
                acc += heart.intensity(scene((r as f64 + or, c as f64 + oc)), seq_index(seq), &table, size);
            }
            acc / 4.0
        });
        let mut img = gaussian_blur(&img, 0.6);
        if spec.noise_sigma > 0.0 {
            img.mapv_inplace(|v| v + noise.sample(&mut rng));
        }
        images.insert(seq, img.mapv(|v| v as f32));
        labels.insert(seq, LabelMask::new(lab)?);
    }
    let provenance = Provenance { source: format!("phantom:{}", spec.seed), slice_indices: BTreeMap::new() };
    let slice = MultiSeqSlice::new(images, labels, (spec.spacing_mm, spec.spacing_mm), Sequence::Lge, provenance)?;
    Ok(Phantom { slice, displacements, center, spec: spec.clone() })
}
