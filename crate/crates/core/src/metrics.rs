//! Overlap, surface-distance and displacement statistics.

use std::collections::BTreeMap;
use std::io::Write;

use ndarray::{Array2, ArrayView2, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::label::{Class, LabelMask};
use crate::tps::DisplacementSet;

fn count(m: ArrayView2<bool>) -> usize {
    m.iter().filter(|&&v| v).count()
}

/// Hard Dice. Two empty masks agree perfectly and score 1.
pub fn dice_hard(a: ArrayView2<bool>, b: ArrayView2<bool>) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!("dice of {:?} and {:?}", a.dim(), b.dim())));
    }
    let inter = Zip::from(a).and(b).fold(0usize, |n, &x, &y| n + (x && y) as usize);
    let total = count(a) + count(b);
    Ok(if total == 0 { 1.0 } else { 2.0 * inter as f64 / total as f64 })
}

/// Foreground pixels with a 4-neighbour outside the mask (image border counts
/// as outside).
pub fn boundary(m: ArrayView2<bool>) -> Array2<bool> {
    let (h, w) = m.dim();
    Array2::from_shape_fn((h, w), |(r, c)| {
        m[[r, c]]
            && (r == 0 || c == 0 || r + 1 == h || c + 1 == w || !m[[r - 1, c]] || !m[[r + 1, c]] || !m[[r, c - 1]] || !m[[r, c + 1]])
    })
}

/// 1D lower-envelope squared distance transform with sample spacing `step`.
fn edt_1d(f: &[f64], step: f64, out: &mut [f64]) {
    let n = f.len();
    let mut v = vec![0usize; n];
    let mut z = vec![0f64; n + 1];
    let mut k = 0usize;
    let pos = |i: usize| i as f64 * step;
    let mut first = None;
    for (q, &fq) in f.iter().enumerate() {
        if fq.is_finite() {
            first = Some(q);
            break;
        }
    }
    let Some(q0) = first else {
        out.iter_mut().for_each(|o| *o = f64::INFINITY);
        return;
    };
    v[0] = q0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in q0 + 1..n {
        if !f[q].is_finite() {
            continue;
        }
        loop {
            let p = v[k];
            let s = ((f[q] + pos(q) * pos(q)) - (f[p] + pos(p) * pos(p))) / (2.0 * (pos(q) - pos(p)));
            if s <= z[k] {
                if k == 0 {
                    v[0] = q;
                    z[1] = f64::INFINITY;
                    break;
                }
                k -= 1;
            } else {
                k += 1;
                v[k] = q;
                z[k] = s;
                z[k + 1] = f64::INFINITY;
                break;
            }
        }
    }
    k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < pos(q) {
            k += 1;
        }
        let d = pos(q) - pos(v[k]);
        *o = d * d + f[v[k]];
    }
}

/// Exact squared Euclidean distance (in mm²) from every pixel to the nearest
/// set pixel of `m`.
fn squared_distance_map(m: ArrayView2<bool>, spacing: (f64, f64)) -> Array2<f64> {
    let (h, w) = m.dim();
    let mut cols = Array2::<f64>::from_elem((h, w), f64::INFINITY);
    let mut buf_in = vec![0.0; h];
    let mut buf_out = vec![0.0; h];
    for c in 0..w {
        for r in 0..h {
            buf_in[r] = if m[[r, c]] { 0.0 } else { f64::INFINITY };
        }
        edt_1d(&buf_in, spacing.0, &mut buf_out);
        for r in 0..h {
            cols[[r, c]] = buf_out[r];
        }
    }
    let mut out = Array2::<f64>::zeros((h, w));
    let mut row_out = vec![0.0; w];
    for r in 0..h {
        let row: Vec<f64> = cols.row(r).to_vec();
        edt_1d(&row, spacing.1, &mut row_out);
        for c in 0..w {
            out[[r, c]] = row_out[c];
        }
    }
    out
}

/// Hausdorff distance between the 4-connected boundaries of two masks, in mm.
pub fn hausdorff_mm(a: ArrayView2<bool>, b: ArrayView2<bool>, spacing: (f64, f64)) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!("hausdorff of {:?} and {:?}", a.dim(), b.dim())));
    }
    if count(a) == 0 || count(b) == 0 {
        return Err(Error::UndefinedMetric("Hausdorff distance of an empty mask".into()));
    }
    let (ba, bb) = (boundary(a), boundary(b));
    let (da, db) = (squared_distance_map(ba.view(), spacing), squared_distance_map(bb.view(), spacing));
    let directed = |from: &Array2<bool>, to: &Array2<f64>| {
        Zip::from(from).and(to).fold(0.0f64, |m, &f, &d| if f { m.max(d) } else { m })
    };
    Ok(directed(&ba, &db).max(directed(&bb, &da)).sqrt())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SenPre {
    pub sensitivity: f64,
    pub precision: f64,
    /// False when the gold mask is empty (sensitivity reported as 0).
    pub sensitivity_defined: bool,
    /// False when the prediction is empty (precision reported as 0).
    pub precision_defined: bool,
}

pub fn sensitivity_precision(pred: ArrayView2<bool>, gold: ArrayView2<bool>) -> Result<SenPre> {
    if pred.dim() != gold.dim() {
        return Err(Error::Shape(format!("sen/pre of {:?} and {:?}", pred.dim(), gold.dim())));
    }
    let tp = Zip::from(pred).and(gold).fold(0usize, |n, &p, &g| n + (p && g) as usize) as f64;
    let (np, ng) = (count(pred) as f64, count(gold) as f64);
    Ok(SenPre {
        sensitivity: if ng > 0.0 { tp / ng } else { 0.0 },
        precision: if np > 0.0 { tp / np } else { 0.0 },
        sensitivity_defined: ng > 0.0,
        precision_defined: np > 0.0,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegistrationEval {
    pub dice: f64,
    /// Missing when either mask is empty.
    pub hd_mm: Option<f64>,
}

/// Dice and HD of one anatomy class between a warped source and its target.
pub fn eval_registration(
    warped_src: &LabelMask,
    tgt: &LabelMask,
    class: Class,
    spacing: (f64, f64),
) -> Result<RegistrationEval> {
    let (a, b) = (warped_src.anatomy(class), tgt.anatomy(class));
    let dice = dice_hard(a.view(), b.view())?;
    let hd_mm = match hausdorff_mm(a.view(), b.view(), spacing) {
        Ok(v) => Some(v),
        Err(Error::UndefinedMetric(_)) => None,
        Err(e) => return Err(e),
    };
    Ok(RegistrationEval { dice, hd_mm })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DisplacementSummary {
    pub count: usize,
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
}

/// Linear-interpolated quantile of sorted data.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = q * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Summary of per-point norms `sqrt((dx/H)² + (dy/W)²)`.
pub fn displacement_stats(sets: &[DisplacementSet], h: usize, w: usize) -> Result<DisplacementSummary> {
    if h == 0 || w == 0 {
        return Err(Error::Shape("zero frame size".into()));
    }
    let mut norms: Vec<f64> =
        sets.iter().flat_map(|s| s.deltas.iter().map(|d| (d[0] / h as f64).hypot(d[1] / w as f64))).collect();
    if norms.is_empty() {
        return Ok(DisplacementSummary::default());
    }
    norms.sort_by(f64::total_cmp);
    Ok(DisplacementSummary {
        count: norms.len(),
        min: norms[0],
        q1: quantile(&norms, 0.25),
        median: quantile(&norms, 0.5),
        q3: quantile(&norms, 0.75),
        max: norms[norms.len() - 1],
    })
}

/// Dice, HD, sensitivity and precision of one binary structure.
pub fn structure_metrics(
    name: &str,
    pred: ArrayView2<bool>,
    gold: ArrayView2<bool>,
    spacing: (f64, f64),
) -> Result<Vec<(String, Option<f64>)>> {
    let sp = sensitivity_precision(pred, gold)?;
    let hd = match hausdorff_mm(pred, gold, spacing) {
        Ok(v) => Some(v),
        Err(Error::UndefinedMetric(_)) => None,
        Err(e) => return Err(e),
    };
    Ok(vec![
        (format!("{name}_dice"), Some(dice_hard(pred, gold)?)),
        (format!("{name}_hd_mm"), hd),
        (format!("{name}_sen"), sp.sensitivity_defined.then_some(sp.sensitivity)),
        (format!("{name}_pre"), sp.precision_defined.then_some(sp.precision)),
    ])
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean: f64,
    pub stdev: f64,
    pub n: usize,
    pub missing: usize,
}

impl Aggregate {
    pub fn of(values: &[Option<f64>]) -> Self {
        let present: Vec<f64> = values.iter().flatten().copied().collect();
        let n = present.len();
        let mean = if n > 0 { present.iter().sum::<f64>() / n as f64 } else { f64::NAN };
        let stdev = if n > 1 {
            (present.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Self { mean, stdev, n, missing: values.len() - n }
    }
}

pub const EVAL_SCHEMA: &str = "umyops-eval/1";

/// Per-sample metric rows with `mean (stdev)` aggregates.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub columns: Vec<String>,
    pub rows: Vec<(String, Vec<Option<f64>>)>,
    pub displacement: BTreeMap<String, DisplacementSummary>,
}

impl EvalReport {
    pub fn push(&mut self, sample: impl Into<String>, metrics: Vec<(String, Option<f64>)>) -> Result<()> {
        if self.columns.is_empty() && self.rows.is_empty() {
            self.columns = metrics.iter().map(|(k, _)| k.clone()).collect();
        }
        let names: Vec<&String> = metrics.iter().map(|(k, _)| k).collect();
        if names.len() != self.columns.len() || names.iter().zip(&self.columns).any(|(a, b)| *a != b) {
            return Err(Error::Schema("metric columns differ between samples".into()));
        }
        self.rows.push((sample.into(), metrics.into_iter().map(|(_, v)| v).collect()));
        Ok(())
    }

    pub fn column(&self, name: &str) -> Option<Vec<Option<f64>>> {
        let i = self.columns.iter().position(|c| c == name)?;
        Some(self.rows.iter().map(|(_, v)| v[i]).collect())
    }

    pub fn aggregates(&self) -> BTreeMap<String, Aggregate> {
        self.columns
            .iter()
            .enumerate()
            .map(|(i, c)| (c.clone(), Aggregate::of(&self.rows.iter().map(|(_, v)| v[i]).collect::<Vec<_>>())))
            .collect()
    }

    pub fn mean(&self, name: &str) -> Option<f64> {
        self.column(name).map(|v| Aggregate::of(&v).mean)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(out);
        let mut header = vec![format!("sample[{EVAL_SCHEMA}]")];
        header.extend(self.columns.iter().cloned());
        wtr.write_record(&header).map_err(csv_err)?;
        for (sample, vals) in &self.rows {
            let mut rec = vec![sample.clone()];
            rec.extend(vals.iter().map(|v| v.map(|x| format!("{x:.6}")).unwrap_or_default()));
            wtr.write_record(&rec).map_err(csv_err)?;
        }
        let agg = self.aggregates();
        let mut rec = vec!["mean (stdev)".to_string()];
        rec.extend(self.columns.iter().map(|c| {
            let a = &agg[c];
            format!("{:.4} ({:.4})", a.mean, a.stdev)
        }));
        wtr.write_record(&rec).map_err(csv_err)?;
        wtr.flush()?;
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        #[derive(Serialize)]
        struct Out<'a> {
            schema: &'a str,
            samples: Vec<BTreeMap<String, Option<f64>>>,
            sample_ids: Vec<&'a str>,
            aggregate: BTreeMap<String, Aggregate>,
            displacement: &'a BTreeMap<String, DisplacementSummary>,
        }
        let samples = self
            .rows
            .iter()
            .map(|(_, v)| self.columns.iter().cloned().zip(v.iter().copied()).collect())
            .collect();
        let out = Out {
            schema: EVAL_SCHEMA,
            samples,
            sample_ids: self.rows.iter().map(|(s, _)| s.as_str()).collect(),
            aggregate: self.aggregates(),
            displacement: &self.displacement,
        };
        Ok(serde_json::to_string_pretty(&out)?)
    }
}

pub(crate) fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e.to_string()))
}
