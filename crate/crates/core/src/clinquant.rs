//! Scar and edema size, chord transmurality, n-SD thresholding and
//! method-agreement statistics.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::io::Write;

use ndarray::{Array2, ArrayView2, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::csv_err;

pub const NUM_CHORDS: usize = 100;
pub const TRANSMURAL_PCT: f64 = 50.0;
pub const MIN_REMOTE_PIXELS: usize = 10;

fn count(m: ArrayView2<bool>) -> usize {
    m.iter().filter(|&&v| v).count()
}

/// Pathology area as a percentage of the LV myocardium region. `myo_region`
/// must already include pathology pixels; pathology outside it is ignored.
pub fn pathology_size_pct(path_mask: ArrayView2<bool>, myo_region: ArrayView2<bool>) -> Result<f64> {
    if path_mask.dim() != myo_region.dim() {
        return Err(Error::Shape(format!("{:?} vs {:?}", path_mask.dim(), myo_region.dim())));
    }
    let denom = count(myo_region);
    if denom == 0 {
        return Err(Error::Geometry("empty myocardium".into()));
    }
    let num = Zip::from(path_mask).and(myo_region).fold(0usize, |n, &p, &m| n + (p && m) as usize);
    Ok(100.0 * num as f64 / denom as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ViabilityBin {
    Viable,
    LikelyViable,
    LikelyNonviable,
    Nonviable,
}

impl ViabilityBin {
    pub const ALL: [ViabilityBin; 4] =
        [ViabilityBin::Viable, ViabilityBin::LikelyViable, ViabilityBin::LikelyNonviable, ViabilityBin::Nonviable];

    pub fn of(pct: f64) -> Self {
        if pct <= 25.0 {
            ViabilityBin::Viable
        } else if pct <= 50.0 {
            ViabilityBin::LikelyViable
        } else if pct <= 75.0 {
            ViabilityBin::LikelyNonviable
        } else {
            ViabilityBin::Nonviable
        }
    }

    pub fn color(self) -> &'static str {
        match self {
            ViabilityBin::Viable => "mistyrose",
            ViabilityBin::LikelyViable => "coral",
            ViabilityBin::LikelyNonviable => "orangered",
            ViabilityBin::Nonviable => "red",
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ViabilityBin::Viable => "viable",
            ViabilityBin::LikelyViable => "likely_viable",
            ViabilityBin::LikelyNonviable => "likely_nonviable",
            ViabilityBin::Nonviable => "nonviable",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Chord {
    pub sector_index: usize,
    pub myocardium_pixels: usize,
    pub scar_pixels: usize,
    pub transmurality_pct: f64,
    /// Set when the sector contains no myocardium.
    pub empty: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChordSet {
    pub chords: Vec<Chord>,
    /// Sector of every myocardium pixel, -1 elsewhere.
    pub sectors: Array2<i16>,
    /// LV centroid (row, col).
    pub center: (f64, f64),
    pub excluded_scar_pixels: usize,
}

/// Polar angle of `(r, c)` about `center`, in `[0, 2π)`.
pub fn polar_angle(center: (f64, f64), r: f64, c: f64) -> f64 {
    (c - center.1).atan2(-(r - center.0)).rem_euclid(2.0 * PI)
}

pub fn sector_of(angle: f64) -> usize {
    ((angle / (2.0 * PI) * NUM_CHORDS as f64).floor() as usize).min(NUM_CHORDS - 1)
}

fn centroid(m: ArrayView2<bool>) -> Option<(f64, f64)> {
    let (mut n, mut sr, mut sc) = (0usize, 0.0, 0.0);
    for ((r, c), &v) in m.indexed_iter() {
        if v {
            n += 1;
            sr += r as f64;
            sc += c as f64;
        }
    }
    (n > 0).then(|| (sr / n as f64, sc / n as f64))
}

/// Splits the myocardium into 100 equal-angle sectors about the LV centroid.
pub fn build_chords(myo_mask: ArrayView2<bool>, lv_mask: ArrayView2<bool>) -> Result<ChordSet> {
    if myo_mask.dim() != lv_mask.dim() {
        return Err(Error::Shape(format!("{:?} vs {:?}", myo_mask.dim(), lv_mask.dim())));
    }
    let center = centroid(lv_mask).ok_or_else(|| Error::Geometry("empty LV blood pool".into()))?;
    let (cr, cc) = (center.0.round() as usize, center.1.round() as usize);
    if myo_mask[[cr, cc]] {
        return Err(Error::Geometry("LV centroid falls inside the myocardium".into()));
    }
    let mut chords: Vec<Chord> = (0..NUM_CHORDS)
        .map(|i| Chord { sector_index: i, myocardium_pixels: 0, scar_pixels: 0, transmurality_pct: 0.0, empty: true })
        .collect();
    let sectors = Array2::from_shape_fn(myo_mask.dim(), |(r, c)| {
        if !myo_mask[[r, c]] {
            return -1;
        }
        let s = sector_of(polar_angle(center, r as f64, c as f64));
        chords[s].myocardium_pixels += 1;
        chords[s].empty = false;
        s as i16
    });
    Ok(ChordSet { chords, sectors, center, excluded_scar_pixels: 0 })
}

/// Fills per-chord scar counts and transmurality.
pub fn transmurality(chords: &ChordSet, scar_mask: ArrayView2<bool>) -> Result<ChordSet> {
    if scar_mask.dim() != chords.sectors.dim() {
        return Err(Error::Shape(format!("{:?} vs {:?}", scar_mask.dim(), chords.sectors.dim())));
    }
    let mut out = chords.clone();
    out.excluded_scar_pixels = 0;
    for c in out.chords.iter_mut() {
        c.scar_pixels = 0;
    }
    Zip::from(scar_mask).and(&chords.sectors).for_each(|&s, &sec| {
        if s {
            if sec < 0 {
                out.excluded_scar_pixels += 1;
            } else {
                out.chords[sec as usize].scar_pixels += 1;
            }
        }
    });
    if out.excluded_scar_pixels > 0 {
        log::warn!("{} scar pixels outside the myocardium were ignored", out.excluded_scar_pixels);
    }
    for c in out.chords.iter_mut() {
        c.transmurality_pct =
            if c.myocardium_pixels == 0 { 0.0 } else { 100.0 * c.scar_pixels as f64 / c.myocardium_pixels as f64 };
    }
    Ok(out)
}

/// Chords whose transmurality is strictly above 50 %.
pub fn count_transmural(chords: &ChordSet) -> usize {
    chords.chords.iter().filter(|c| !c.empty && c.transmurality_pct > TRANSMURAL_PCT).count()
}

pub fn chord_bins(chords: &ChordSet) -> [usize; 4] {
    let mut bins = [0; 4];
    for c in chords.chords.iter().filter(|c| !c.empty) {
        bins[ViabilityBin::of(c.transmurality_pct) as usize] += 1;
    }
    bins
}

/// Remote myocardium: pathology-free sectors in a 20-sector band opposite
/// the pathology. Without pathology every myocardium pixel is remote.
pub fn select_remote(chords: &ChordSet, pathology: ArrayView2<bool>) -> Result<Array2<bool>> {
    if pathology.dim() != chords.sectors.dim() {
        return Err(Error::Shape(format!("{:?} vs {:?}", pathology.dim(), chords.sectors.dim())));
    }
    let mut touched = [false; NUM_CHORDS];
    let (mut sx, mut sy, mut n) = (0.0, 0.0, 0usize);
    for ((r, c), &p) in pathology.indexed_iter() {
        if p {
            let a = polar_angle(chords.center, r as f64, c as f64);
            sx += a.cos();
            sy += a.sin();
            n += 1;
            let sec = chords.sectors[[r, c]];
            if sec >= 0 {
                touched[sec as usize] = true;
            }
        }
    }
    if n == 0 {
        return Ok(chords.sectors.mapv(|s| s >= 0));
    }
    let opposite = sector_of((sy.atan2(sx) + PI).rem_euclid(2.0 * PI)) as isize;
    let band: Vec<usize> = (-10..10).map(|o| (opposite + o).rem_euclid(NUM_CHORDS as isize) as usize).collect();
    Ok(chords.sectors.mapv(|s| s >= 0 && band.contains(&(s as usize)) && !touched[s as usize]))
}

/// Scar as myocardium brighter than remote mean + n·SD (population SD).
pub fn nsd_segment(
    lge_image: ArrayView2<f32>,
    myo_mask: ArrayView2<bool>,
    remote_mask: ArrayView2<bool>,
    n: f64,
) -> Result<Array2<bool>> {
    if lge_image.dim() != myo_mask.dim() || myo_mask.dim() != remote_mask.dim() {
        return Err(Error::Shape("image and masks differ in size".into()));
    }
    let remote: Vec<f64> =
        lge_image.iter().zip(remote_mask.iter()).filter(|(_, &m)| m).map(|(&v, _)| v as f64).collect();
    if remote.len() < MIN_REMOTE_PIXELS {
        return Err(Error::UnreliableRemote(remote.len()));
    }
    let mean = remote.iter().sum::<f64>() / remote.len() as f64;
    let sd = (remote.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / remote.len() as f64).sqrt();
    let thr = mean + n * sd;
    Ok(Zip::from(lge_image).and(myo_mask).map_collect(|&v, &m| m && (v as f64) > thr))
}

pub fn pearson_r(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::UndefinedMetric(format!("need paired samples, got {} and {}", x.len(), y.len())));
    }
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::UndefinedMetric("zero variance".into()));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Least-squares line `y = slope·x + intercept`.
pub fn fit_line(x: &[f64], y: &[f64]) -> Result<(f64, f64)> {
    let n = x.len() as f64;
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::UndefinedMetric("need at least two paired samples".into()));
    }
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::UndefinedMetric("zero variance".into()));
    }
    let slope = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum::<f64>() / sxx;
    Ok((slope, my - slope * mx))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantReport {
    pub sample: String,
    pub method: String,
    pub scar_size_pct: f64,
    pub edema_size_pct: f64,
    pub transmural_count: usize,
    pub chord_bins: [usize; 4],
    pub transmurality: Vec<f64>,
}

/// Quantifies one slice from its myocardium region, LV pool, scar and edema
/// (edema already including scar when the union convention applies).
pub fn quantify(
    sample: &str,
    method: &str,
    myo_region: ArrayView2<bool>,
    lv: ArrayView2<bool>,
    scar: ArrayView2<bool>,
    edema: ArrayView2<bool>,
) -> Result<QuantReport> {
    let chords = transmurality(&build_chords(myo_region, lv)?, scar)?;
    Ok(QuantReport {
        sample: sample.into(),
        method: method.into(),
        scar_size_pct: pathology_size_pct(scar, myo_region)?,
        edema_size_pct: pathology_size_pct(edema, myo_region)?,
        transmural_count: count_transmural(&chords),
        chord_bins: chord_bins(&chords),
        transmurality: chords.chords.iter().map(|c| c.transmurality_pct).collect(),
    })
}

pub const QUANT_SCHEMA: &str = "umyops-quant/1";

pub fn write_quant_csv<W: Write>(reports: &[QuantReport], out: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(out);
    let mut header = vec![format!("sample[{QUANT_SCHEMA}]"), "method".into(), "scar_size_pct".into()];
    header.extend(["edema_size_pct", "transmural_count"].map(String::from));
    header.extend(ViabilityBin::ALL.iter().map(|b| format!("chords_{}", b.name())));
    wtr.write_record(&header).map_err(csv_err)?;
    for r in reports {
        let mut rec = vec![
            r.sample.clone(),
            r.method.clone(),
            format!("{:.4}", r.scar_size_pct),
            format!("{:.4}", r.edema_size_pct),
            r.transmural_count.to_string(),
        ];
        rec.extend(r.chord_bins.iter().map(|b| b.to_string()));
        wtr.write_record(&rec).map_err(csv_err)?;
    }
    wtr.flush()?;
    Ok(())
}

/// Ring of 100 chords coloured by viability bin, starting at 12 o'clock.
pub fn bullseye_svg(title: &str, transmurality: &[f64]) -> String {
    let (cx, cy, r0, r1) = (160.0, 170.0, 70.0, 130.0);
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="320" height="340" viewBox="0 0 320 340">"#);
    let _ = writeln!(s, r#"<rect width="320" height="340" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="160" y="22" text-anchor="middle" font-family="sans-serif" font-size="14">{}</text>"#, escape(title));
    let n = transmurality.len().max(1);
    for (i, &pct) in transmurality.iter().enumerate() {
        let (a0, a1) = (2.0 * PI * i as f64 / n as f64, 2.0 * PI * (i + 1) as f64 / n as f64);
        let pt = |r: f64, a: f64| (cx + r * a.sin(), cy - r * a.cos());
        let (p0, p1, p2, p3) = (pt(r1, a0), pt(r1, a1), pt(r0, a1), pt(r0, a0));
        let _ = writeln!(
            s,
            r#"<path d="M{:.2},{:.2} A{r1},{r1} 0 0,1 {:.2},{:.2} L{:.2},{:.2} A{r0},{r0} 0 0,0 {:.2},{:.2} Z" fill="{}" stroke="white" stroke-width="0.3"/>"#,
            p0.0, p0.1, p1.0, p1.1, p2.0, p2.1, p3.0, p3.1,
            ViabilityBin::of(pct).color()
        );
    }
    for (k, b) in ViabilityBin::ALL.iter().enumerate() {
        let x = 12.0 + 76.0 * k as f64;
        let _ = writeln!(s, r#"<rect x="{x}" y="314" width="10" height="10" fill="{}"/>"#, b.color());
        let _ = writeln!(s, r#"<text x="{}" y="323" font-family="sans-serif" font-size="9">{}</text>"#, x + 13.0, b.name());
    }
    s.push_str("</svg>\n");
    s
}

/// Scatter plot with least-squares line and Pearson r.
pub fn scatter_svg(title: &str, xlabel: &str, ylabel: &str, x: &[f64], y: &[f64]) -> String {
    let (w, h, m) = (360.0, 340.0, 50.0);
    let lo = x.iter().chain(y).copied().fold(f64::INFINITY, f64::min).min(0.0);
    let mut hi = x.iter().chain(y).copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        hi = lo + 1.0;
    }
    let sx = |v: f64| m + (v - lo) / (hi - lo) * (w - 2.0 * m);
    let sy = |v: f64| h - m - (v - lo) / (hi - lo) * (h - 2.0 * m);
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#);
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="22" text-anchor="middle" font-family="sans-serif" font-size="14">{}</text>"#, w / 2.0, escape(title));
    let _ = writeln!(s, r#"<rect x="{m}" y="{m}" width="{}" height="{}" fill="none" stroke="black"/>"#, w - 2.0 * m, h - 2.0 * m);
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle" font-family="sans-serif" font-size="11">{}</text>"#, w / 2.0, h - 14.0, escape(xlabel));
    let _ = writeln!(
        s,
        r#"<text x="14" y="{}" text-anchor="middle" font-family="sans-serif" font-size="11" transform="rotate(-90 14 {})">{}</text>"#,
        h / 2.0,
        h / 2.0,
        escape(ylabel)
    );
    for (a, b) in x.iter().zip(y) {
        let _ = writeln!(s, r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="steelblue"/>"#, sx(*a), sy(*b));
    }
    if let Ok((slope, icpt)) = fit_line(x, y) {
        let _ = writeln!(
            s,
            r#"<line x1="{:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="crimson"/>"#,
            sx(lo),
            sy(slope * lo + icpt),
            sx(hi),
            sy(slope * hi + icpt)
        );
    }
    let r = pearson_r(x, y).map(|r| format!("R = {r:.3}")).unwrap_or_else(|_| "R undefined".into());
    let _ = writeln!(s, r#"<text x="{}" y="{}" font-family="sans-serif" font-size="12">{r}</text>"#, m + 8.0, m + 18.0);
    s.push_str("</svg>\n");
    s
}

fn escape(t: &str) -> String {
    t.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
