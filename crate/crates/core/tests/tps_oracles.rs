use nalgebra::DMatrix;
use ndarray::Array2;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use umyops::tps::{
    make_control_grid, rescale_displacements, sample_bilinear, solve_tps, warp_image, ControlGrid, DisplacementSet, Interpolation,
    PixelFrame, TpsBasis, TpsCoefficients,
};

fn u(a: [f64; 2], b: [f64; 2]) -> f64 {
    let r2 = (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2);
    if r2 == 0.0 {
        0.0
    } else {
        r2 * r2.ln()
    }
}

/// Dense LU solve of the full system directly in the canonical frame.
fn oracle(grid: &ControlGrid, d: &DisplacementSet) -> (Vec<[f64; 2]>, [[f64; 3]; 2]) {
    let pts = grid.points();
    let n = pts.len();
    let frame = PixelFrame::new(d.frame.0, d.frame.1, grid.extent());
    let mut l = DMatrix::<f64>::zeros(n + 3, n + 3);
    let mut rhs = DMatrix::<f64>::zeros(n + 3, 2);
    for i in 0..n {
        for j in 0..n {
            l[(i, j)] = u(pts[i], pts[j]);
        }
        for (c, v) in [1.0, pts[i][0], pts[i][1]].into_iter().enumerate() {
            l[(i, n + c)] = v;
            l[(n + c, i)] = v;
        }
        let dc = frame.delta_to_canonical(d.deltas[i]);
        rhs[(i, 0)] = pts[i][0] + dc[0];
        rhs[(i, 1)] = pts[i][1] + dc[1];
    }
    let x = l.lu().solve(&rhs).expect("nonsingular");
    let w = (0..n).map(|k| [x[(k, 0)], x[(k, 1)]]).collect();
    let a = [[x[(n, 0)], x[(n + 1, 0)], x[(n + 2, 0)]], [x[(n, 1)], x[(n + 1, 1)], x[(n + 2, 1)]]];
    (w, a)
}

fn random_disp(rng: &mut ChaCha8Rng, n: usize, frame: (usize, usize), mag: f64) -> DisplacementSet {
    DisplacementSet::new((0..n).map(|_| [rng.gen_range(-mag..mag), rng.gen_range(-mag..mag)]).collect(), frame)
        .unwrap()
}

fn bump(h: usize, w: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let (cr, cc) = (rng.gen_range(0.3..0.7) * h as f64, rng.gen_range(0.3..0.7) * w as f64);
    let s = rng.gen_range(0.12..0.2) * h as f64;
    Array2::from_shape_fn((h, w), |(r, c)| (-((r as f64 - cr).powi(2) + (c as f64 - cc).powi(2)) / (2.0 * s * s)).exp())
}

#[test]
fn coefficients_match_dense_solver() {
    let grid = make_control_grid(4, 256).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..100 {
        let d = random_disp(&mut rng, 16, (256, 256), 12.0);
        let c = solve_tps(&grid, &d).unwrap();
        let (w, a) = oracle(&grid, &d);
        for (x, y) in c.rbf_weights.iter().flatten().zip(w.iter().flatten()) {
            assert!((x - y).abs() <= 1e-8, "{x} vs {y}");
        }
        for (x, y) in c.affine.iter().flatten().zip(a.iter().flatten()) {
            assert!((x - y).abs() <= 1e-8, "{x} vs {y}");
        }
    }
}

#[test]
fn side_conditions_hold() {
    let grid = make_control_grid(4, 256).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let d = random_disp(&mut rng, 16, (128, 128), 8.0);
    let c = solve_tps(&grid, &d).unwrap();
    for dim in 0..2 {
        let s: f64 = c.rbf_weights.iter().map(|w| w[dim]).sum();
        let sx: f64 = c.rbf_weights.iter().zip(grid.points()).map(|(w, p)| w[dim] * p[0]).sum();
        let sy: f64 = c.rbf_weights.iter().zip(grid.points()).map(|(w, p)| w[dim] * p[1]).sum();
        assert!(s.abs() < 1e-12 && sx.abs() < 1e-9 && sy.abs() < 1e-9, "{s} {sx} {sy}");
    }
}

#[test]
fn affine_fields_have_no_bending() {
    let grid = make_control_grid(4, 256).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for _ in 0..20 {
        let m: [f64; 6] = std::array::from_fn(|_| rng.gen_range(-0.05..0.05));
        let targets: Vec<[f64; 2]> = grid
            .points()
            .iter()
            .map(|p| [p[0] + m[0] * p[0] + m[1] * p[1] + 10.0 * m[2], p[1] + m[3] * p[0] + m[4] * p[1] + 10.0 * m[5]])
            .collect();
        let c = TpsCoefficients::fit(grid.points(), &targets, grid.extent()).unwrap();
        assert!(c.rbf_weights.iter().flatten().all(|w| w.abs() <= 1e-8));
    }
}

#[test]
fn bilinear_warp_matches_per_pixel_mapping() {
    let grid = make_control_grid(4, 256).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let (h, w) = (48, 40);
    let img = bump(h, w, &mut rng);
    let d = random_disp(&mut rng, 16, (h, w), 3.0);
    let c = solve_tps(&grid, &d).unwrap();
    let out = warp_image(img.view(), &c, Interpolation::Bilinear).unwrap();
    let frame = PixelFrame::new(h, w, 256.0);
    let (wts, a) = oracle(&grid, &d);
    for r in 0..h {
        for cc in 0..w {
            let p = frame.to_canonical(r as f64, cc as f64);
            let mut t = [a[0][0] + a[0][1] * p[0] + a[0][2] * p[1], a[1][0] + a[1][1] * p[0] + a[1][2] * p[1]];
            for (k, q) in grid.points().iter().enumerate() {
                t[0] += wts[k][0] * u(p, *q);
                t[1] += wts[k][1] * u(p, *q);
            }
            let s = frame.to_pixel(t);
            assert!((out[[r, cc]] - sample_bilinear(img.view(), s[0], s[1])).abs() <= 1e-6);
        }
    }
}

#[test]
fn basis_agrees_with_coefficient_warp() {
    let grid = make_control_grid(4, 256).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let (h, w) = (32, 32);
    let basis = TpsBasis::new(&grid, h, w).unwrap();
    let d = random_disp(&mut rng, 16, (h, w), 4.0);
    let c = solve_tps(&grid, &d).unwrap();
    let frame = PixelFrame::new(h, w, 256.0);
    for (p, s) in basis.sample_coords(&d).unwrap().into_iter().enumerate() {
        let t = frame.to_pixel(c.evaluate(frame.to_canonical((p / w) as f64, (p % w) as f64)));
        assert!((s[0] - t[0]).abs() < 1e-9 && (s[1] - t[1]).abs() < 1e-9);
    }
}

/// Soft Dice of the warped image against a fixed target, and its gradient.
fn dice_and_grad(basis: &TpsBasis, img: &Array2<f64>, tgt: &Array2<f64>, d: &DisplacementSet) -> (f64, Vec<[f64; 2]>) {
    let wimg = basis.warp(img.view(), d, Interpolation::Bilinear).unwrap();
    let inter: f64 = (&wimg * tgt).sum();
    let denom = wimg.sum() + tgt.sum() + 1e-5;
    let dice = (2.0 * inter + 1e-5) / denom;
    let g = tgt.mapv(|t| 2.0 * t / denom) - dice / denom;
    (dice, basis.warp_vjp(img.view(), d, g.view()).unwrap())
}

#[test]
fn dice_gradient_matches_finite_differences() {
    let grid = make_control_grid(4, 256).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let (h, w) = (128, 128);
    let basis = TpsBasis::new(&grid, h, w).unwrap();
    for _ in 0..5 {
        let img = bump(h, w, &mut rng);
        let tgt = bump(h, w, &mut rng);
        let d = random_disp(&mut rng, 16, (h, w), 2.0);
        let (_, grad) = dice_and_grad(&basis, &img, &tgt, &d);
        let (mut err, mut norm) = (0.0f64, 0.0f64);
        for k in 0..16 {
            for dim in 0..2 {
                let mut plus = d.clone();
                plus.deltas[k][dim] += 1e-3;
                let mut minus = d.clone();
                minus.deltas[k][dim] -= 1e-3;
                let fd = (dice_and_grad(&basis, &img, &tgt, &plus).0 - dice_and_grad(&basis, &img, &tgt, &minus).0) / 2e-3;
                err += (grad[k][dim] - fd).powi(2);
                norm += fd.powi(2);
            }
        }
        let rel = (err / norm).sqrt();
        assert!(rel <= 1e-3, "relative gradient error {rel}");
    }
}

proptest! {
    #[test]
    fn interpolates_control_points(seed in 0u64..1000, mag in 0.0f64..15.0, m in 2usize..6) {
        let grid = make_control_grid(m, 256).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = DisplacementSet::new(
            (0..m * m).map(|_| [rng.gen_range(-1.0..1.0) * mag, rng.gen_range(-1.0..1.0) * mag]).collect(),
            (128, 96),
        ).unwrap();
        let c = solve_tps(&grid, &d).unwrap();
        let frame = PixelFrame::new(128, 96, 256.0);
        for (p, dk) in grid.points().iter().zip(&d.deltas) {
            let t = c.evaluate(*p);
            let dc = frame.delta_to_canonical(*dk);
            prop_assert!((t[0] - p[0] - dc[0]).abs() <= 1e-8);
            prop_assert!((t[1] - p[1] - dc[1]).abs() <= 1e-8);
        }
    }

    #[test]
    fn zero_displacement_is_identity(h in 2usize..24, w in 2usize..24, seed in 0u64..100) {
        let grid = make_control_grid(4, 256).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let img = Array2::from_shape_fn((h, w), |_| rng.gen_range(-3.0..3.0f64));
        let c = solve_tps(&grid, &DisplacementSet::zeros(16, (h, w))).unwrap();
        prop_assert_eq!(warp_image(img.view(), &c, Interpolation::Nearest).unwrap(), img.clone());
        let b = warp_image(img.view(), &c, Interpolation::Bilinear).unwrap();
        prop_assert!(b.iter().zip(&img).all(|(x, y)| (x - y).abs() <= 1e-6));
    }
}

fn block_mean(img: &Array2<f64>, f: usize) -> Array2<f64> {
    let (h, w) = img.dim();
    Array2::from_shape_fn((h / f, w / f), |(r, c)| {
        img.slice(ndarray::s![r * f..(r + 1) * f, c * f..(c + 1) * f]).sum() / (f * f) as f64
    })
}

#[test]
fn downsampling_commutes_with_rescaled_warp() {
    let grid = make_control_grid(4, 256).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for _ in 0..20 {
        let img = (0..3).fold(Array2::zeros((256, 256)), |acc, _| acc + bump(256, 256, &mut rng));
        let d = random_disp(&mut rng, 16, (256, 256), 10.0);
        let full = warp_image(img.view(), &solve_tps(&grid, &d).unwrap(), Interpolation::Bilinear).unwrap();
        let small = rescale_displacements(&d, 256, 256, 64, 64).unwrap();
        let coarse = warp_image(block_mean(&img, 4).view(), &solve_tps(&grid, &small).unwrap(), Interpolation::Bilinear).unwrap();
        let range = img.fold(f64::MIN, |m, v| m.max(*v)) - img.fold(f64::MAX, |m, v| m.min(*v));
        let mad = (&block_mean(&full, 4) - &coarse).mapv(f64::abs).mean().unwrap();
        assert!(mad <= 0.05 * range, "{mad} vs range {range}");
    }
}
