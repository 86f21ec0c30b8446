use std::f64::consts::PI;

use ndarray::Array2;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use umyops::clinquant::{
    build_chords, bullseye_svg, count_transmural, nsd_segment, pathology_size_pct, pearson_r, quantify,
    scatter_svg, select_remote, transmurality, ViabilityBin, NUM_CHORDS,
};
use umyops::Error;

/// Clockwise angle from 12 o'clock in degrees, computed independently.
fn oracle_degrees(center: (f64, f64), r: usize, c: usize) -> f64 {
    let (up, right) = (center.0 - r as f64, c as f64 - center.1);
    let d = 90.0 - up.atan2(right).to_degrees();
    d.rem_euclid(360.0)
}

fn annulus(n: usize, center: (f64, f64), r0: f64, r1: f64) -> (Array2<bool>, Array2<bool>) {
    let rad = |r: usize, c: usize| (r as f64 - center.0).hypot(c as f64 - center.1);
    (
        Array2::from_shape_fn((n, n), |(r, c)| (r0..r1).contains(&rad(r, c))),
        Array2::from_shape_fn((n, n), |(r, c)| rad(r, c) < r0),
    )
}

#[test]
fn size_percentages() {
    let (myo, _) = annulus(40, (20.0, 20.0), 8.0, 14.0);
    assert_eq!(pathology_size_pct(Array2::from_elem((40, 40), false).view(), myo.view()).unwrap(), 0.0);
    let cells: Vec<_> = myo.indexed_iter().filter(|(_, v)| **v).map(|(p, _)| p).collect();
    let mut half = Array2::from_elem((40, 40), false);
    for p in cells.iter().take(cells.len() / 2) {
        half[*p] = true;
    }
    let expect = 100.0 * (cells.len() / 2) as f64 / cells.len() as f64;
    assert_eq!(pathology_size_pct(half.view(), myo.view()).unwrap(), expect);
    if cells.len() % 2 == 0 {
        assert_eq!(expect, 50.0);
    }
    assert!(matches!(
        pathology_size_pct(half.view(), Array2::from_elem((40, 40), false).view()),
        Err(Error::Geometry(_))
    ));
}

#[test]
fn perfect_annulus_has_balanced_chords() {
    let (myo, lv) = annulus(401, (200.0, 200.0), 120.0, 160.0);
    let chords = build_chords(myo.view(), lv.view()).unwrap();
    assert_eq!(chords.chords.len(), NUM_CHORDS);
    let mean = chords.chords.iter().map(|c| c.myocardium_pixels).sum::<usize>() as f64 / 100.0;
    for c in &chords.chords {
        assert!(!c.empty);
        assert!((c.myocardium_pixels as f64 - mean).abs() <= 0.1 * mean, "{} vs {mean}", c.myocardium_pixels);
    }
}

#[test]
fn open_myocardium_flags_gap_sectors() {
    let (mut myo, lv) = annulus(81, (40.0, 40.0), 15.0, 25.0);
    let center = (40.0, 40.0);
    // remove a 90 degree gap on the right-hand side
    for ((r, c), v) in myo.indexed_iter_mut() {
        let a = oracle_degrees(center, r, c);
        if (45.0..135.0).contains(&a) {
            *v = false;
        }
    }
    let chords = build_chords(myo.view(), lv.view()).unwrap();
    for c in &chords.chords {
        let mid = (c.sector_index as f64 + 0.5) * 3.6;
        if (50.0..130.0).contains(&mid) {
            assert!(c.empty, "sector {}", c.sector_index);
        }
    }
}

#[test]
fn lv_centroid_inside_myocardium_is_rejected() {
    let myo = Array2::from_elem((5, 5), true);
    let mut lv = Array2::from_elem((5, 5), false);
    lv[[2, 2]] = true;
    assert!(matches!(build_chords(myo.view(), lv.view()), Err(Error::Geometry(_))));
}

#[test]
fn sector_assignment_matches_angle_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    for _ in 0..20 {
        let center = (rng.gen_range(30.0..50.0), rng.gen_range(30.0..50.0));
        let (r0, r1) = (rng.gen_range(8.0..14.0), rng.gen_range(18.0..26.0));
        let (myo, lv) = annulus(81, center, r0, r1);
        let chords = build_chords(myo.view(), lv.view()).unwrap();
        let lc = chords.center;
        for ((r, c), &s) in chords.sectors.indexed_iter() {
            if !myo[[r, c]] {
                assert_eq!(s, -1);
                continue;
            }
            let deg = oracle_degrees(lc, r, c);
            let expect = (deg / 3.6).floor() as i16 % 100;
            let near_edge = ((deg / 3.6) - (deg / 3.6).round()).abs() < 1e-9;
            assert!(s == expect || near_edge, "pixel ({r},{c}) sector {s} vs {expect}");
        }
    }
}

fn wedge(k: usize, start: usize) -> (Array2<bool>, Array2<bool>, Array2<bool>) {
    let (myo, lv) = annulus(121, (60.0, 60.0), 20.0, 34.0);
    let chords = build_chords(myo.view(), lv.view()).unwrap();
    let scar = chords.sectors.mapv(|s| s >= 0 && ((s as usize + NUM_CHORDS - start) % NUM_CHORDS) < k);
    (myo, lv, scar)
}

#[test]
fn full_thickness_wedge_counts_exactly() {
    for (k, start) in [(0, 0), (1, 7), (13, 90), (37, 20), (100, 0)] {
        let (myo, lv, scar) = wedge(k, start);
        let chords = transmurality(&build_chords(myo.view(), lv.view()).unwrap(), scar.view()).unwrap();
        assert_eq!(count_transmural(&chords), k);
        assert_eq!(chords.chords.iter().filter(|c| c.transmurality_pct == 100.0).count(), k);
        assert_eq!(chords.chords.iter().filter(|c| c.transmurality_pct == 0.0).count(), 100 - k);
    }
}

#[test]
fn half_thickness_is_not_transmural() {
    let (myo, lv) = annulus(121, (60.0, 60.0), 20.0, 34.0);
    let mut chords = build_chords(myo.view(), lv.view()).unwrap();
    for c in chords.chords.iter_mut() {
        c.transmurality_pct = 50.0;
    }
    assert_eq!(count_transmural(&chords), 0);
    assert_eq!(ViabilityBin::of(50.0), ViabilityBin::LikelyViable);
    assert_eq!(ViabilityBin::of(25.0), ViabilityBin::Viable);
    assert_eq!(ViabilityBin::of(75.1), ViabilityBin::Nonviable);
}

#[test]
fn random_scar_transmurality_matches_ratio_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(32);
    let (myo, lv) = annulus(81, (40.0, 40.0), 12.0, 22.0);
    let chords = build_chords(myo.view(), lv.view()).unwrap();
    let scar = Array2::from_shape_fn((81, 81), |_| rng.gen_bool(0.3));
    let filled = transmurality(&chords, scar.view()).unwrap();
    let mut total = 0;
    for ch in &filled.chords {
        let (mut m, mut s) = (0, 0);
        for ((r, c), &sec) in chords.sectors.indexed_iter() {
            if sec == ch.sector_index as i16 {
                m += 1;
                s += scar[[r, c]] as usize;
            }
        }
        assert_eq!((ch.myocardium_pixels, ch.scar_pixels), (m, s));
        assert_eq!(ch.transmurality_pct, 100.0 * s as f64 / m as f64);
        total += s;
    }
    // partition property
    let inside = scar.iter().zip(myo.iter()).filter(|(s, m)| **s && **m).count();
    assert_eq!(total, inside);
    assert_eq!(filled.excluded_scar_pixels, scar.iter().filter(|v| **v).count() - inside);
}

#[test]
fn one_sd_recovers_shifted_scar() {
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let normal = Normal::new(0.0, 1.0).unwrap();
    let (h, w) = (60, 60);
    let myo = Array2::from_elem((h, w), true);
    let remote = Array2::from_shape_fn((h, w), |(r, _)| r < 30);
    let scar = Array2::from_shape_fn((h, w), |(r, _)| r >= 30);
    let img = Array2::from_shape_fn((h, w), |(r, _)| (normal.sample(&mut rng) + if r >= 30 { 5.0 } else { 0.0 }) as f32);
    let seg = nsd_segment(img.view(), myo.view(), remote.view(), 1.0).unwrap();
    let hit = seg.iter().zip(scar.iter()).filter(|(a, b)| **a && **b).count();
    assert!(hit as f64 >= 0.99 * 1800.0, "{hit}");
    let none = nsd_segment(img.view(), myo.view(), remote.view(), 1e9).unwrap();
    assert!(none.iter().all(|v| !v));
    let flat = Array2::from_elem((h, w), 0.4f32);
    assert!(nsd_segment(flat.view(), myo.view(), remote.view(), 1.0).unwrap().iter().all(|v| !v));
    let tiny = Array2::from_shape_fn((h, w), |(r, c)| r == 0 && c < 9);
    assert!(matches!(nsd_segment(img.view(), myo.view(), tiny.view(), 1.0), Err(Error::UnreliableRemote(9))));
}

#[test]
fn remote_band_avoids_pathology() {
    let (myo, lv, scar) = wedge(15, 10);
    let chords = build_chords(myo.view(), lv.view()).unwrap();
    let remote = select_remote(&chords, scar.view()).unwrap();
    assert!(remote.iter().filter(|v| **v).count() >= 10);
    assert!(remote.iter().zip(scar.iter()).all(|(r, s)| !(*r && *s)));
    for ((r, c), &v) in remote.indexed_iter() {
        if v {
            let sec = chords.sectors[[r, c]] as usize;
            // band is centred near sector 67, opposite the wedge centre at 17
            let dist = (sec as isize - 67).rem_euclid(100).min((67 - sec as isize).rem_euclid(100));
            assert!(dist <= 11, "sector {sec}");
        }
    }
}

#[test]
fn pearson_cases() {
    let x: Vec<f64> = (0..10).map(|i| i as f64 * 0.7 - 2.0).collect();
    let y: Vec<f64> = x.iter().map(|v| 2.0 * v + 3.0).collect();
    assert!((pearson_r(&x, &y).unwrap() - 1.0).abs() < 1e-15);
    let neg: Vec<f64> = x.iter().map(|v| -v).collect();
    assert!((pearson_r(&x, &neg).unwrap() + 1.0).abs() < 1e-15);
    assert!(matches!(pearson_r(&x, &vec![1.0; 10]), Err(Error::UndefinedMetric(_))));
    let mut rng = ChaCha8Rng::seed_from_u64(34);
    let a: Vec<f64> = (0..40).map(|_| rng.gen_range(-5.0..5.0)).collect();
    let b: Vec<f64> = a.iter().map(|v| v * 0.3 + rng.gen_range(-2.0..2.0)).collect();
    let n = 40.0;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov = a.iter().zip(&b).map(|(x, y)| (x - ma) * (y - mb)).sum::<f64>() / (n - 1.0);
    let sa = (a.iter().map(|x| (x - ma).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    let sb = (b.iter().map(|y| (y - mb).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    assert!((pearson_r(&a, &b).unwrap() - cov / (sa * sb)).abs() <= 1e-12);
}

#[test]
fn report_and_plots() {
    let (myo, lv, scar) = wedge(20, 0);
    let q = quantify("s0", "gold", myo.view(), lv.view(), scar.view(), scar.view()).unwrap();
    assert_eq!(q.transmural_count, 20);
    assert_eq!(q.chord_bins, [80, 0, 0, 20]);
    let svg = bullseye_svg("s0", &q.transmurality);
    assert_eq!(svg.matches("<path").count(), 100);
    assert!(svg.contains("mistyrose") && svg.contains("\"red\""));
    let sc = scatter_svg("size", "gold", "pred", &[1.0, 2.0, 3.0], &[1.1, 2.1, 2.9]);
    assert!(sc.contains("R = 0.99"));
    let mut buf = Vec::new();
    umyops::clinquant::write_quant_csv(&[q], &mut buf).unwrap();
    assert!(String::from_utf8(buf).unwrap().starts_with("sample[umyops-quant/1],method,scar_size_pct"));
}

proptest! {
    #[test]
    fn nsd_is_monotone(seed in 0u64..200) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let img = Array2::from_shape_fn((20, 20), |_| rng.gen_range(0.0..1.0f32));
        let myo = Array2::from_shape_fn((20, 20), |_| rng.gen_bool(0.7));
        let remote = Array2::from_shape_fn((20, 20), |(r, _)| r < 6);
        let s1 = nsd_segment(img.view(), myo.view(), remote.view(), 1.0).unwrap();
        let s2 = nsd_segment(img.view(), myo.view(), remote.view(), 2.0).unwrap();
        let s3 = nsd_segment(img.view(), myo.view(), remote.view(), 3.0).unwrap();
        prop_assert!(s3.iter().zip(s2.iter()).all(|(a, b)| !*a || *b));
        prop_assert!(s2.iter().zip(s1.iter()).all(|(a, b)| !*a || *b));
    }

    #[test]
    fn pearson_affine_invariant(seed in 0u64..200, a in 0.1f64..10.0, b in -5.0f64..5.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<f64> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let y: Vec<f64> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let xs: Vec<f64> = x.iter().map(|v| a * v + b).collect();
        prop_assert!((pearson_r(&x, &y).unwrap() - pearson_r(&xs, &y).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn size_is_invariant_under_joint_rotation(seed in 0u64..100, turns in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (myo, _) = annulus(31, (15.0, 15.0), 5.0, 10.0);
        let path = myo.mapv(|m| m && rng.gen_bool(0.3));
        let rot = |m: &Array2<bool>| {
            let mut out = m.clone();
            for _ in 0..turns {
                out = out.t().slice(ndarray::s![.., ..;-1]).to_owned();
            }
            out
        };
        prop_assert_eq!(
            pathology_size_pct(path.view(), myo.view()).unwrap(),
            pathology_size_pct(rot(&path).view(), rot(&myo).view()).unwrap()
        );
    }
}

#[test]
fn sector_helper_wraps() {
    assert_eq!(umyops::clinquant::sector_of(2.0 * PI - 1e-12), 99);
    assert_eq!(umyops::clinquant::sector_of(0.0), 0);
}
