//! Training objectives.
//!
//! Every loss exists twice: a plain `f64` function over `ndarray` maps, used
//! for evaluation and as a reference, and a graph version over NCHW [`Var`]s
//! used during training. Both follow the same formulas.

use std::collections::BTreeMap;

use ndarray::{Array2, ArrayView2, ArrayView3, Zip};
use serde::{Deserialize, Serialize};
use umyops_tensor::{Tensor, Var};

use crate::datapipe::Sequence;
use crate::error::{Error, Result};
use crate::label::{Class, LabelMask};

pub const DEFAULT_SMOOTH_EPS: f64 = 1e-5;
pub const DEFAULT_LAMBDA: f64 = 0.1;

/// Pathology output channels, in order.
pub const PATHOLOGY_CLASSES: [Class; 3] = [Class::Background, Class::Edema, Class::Scar];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub lambda_balance: f64,
    pub smooth_eps: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { lambda_balance: DEFAULT_LAMBDA, smooth_eps: DEFAULT_SMOOTH_EPS }
    }
}

impl LossConfig {
    /// `lambda_balance = 0` is accepted so the constraint terms can be ablated.
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_balance >= 0.0 && self.lambda_balance.is_finite()) {
            return Err(Error::Config(format!("lambda_balance must be >= 0, got {}", self.lambda_balance)));
        }
        if !(self.smooth_eps > 0.0 && self.smooth_eps.is_finite()) {
            return Err(Error::Config(format!("smooth_eps must be > 0, got {}", self.smooth_eps)));
        }
        Ok(())
    }
}

fn same_dim(a: (usize, usize), b: (usize, usize), what: &str) -> Result<()> {
    if a != b {
        return Err(Error::Shape(format!("{what}: {a:?} vs {b:?}")));
    }
    Ok(())
}

/// `(2|a∩b| + ε) / (|a| + |b| + ε)` with soft cardinalities.
pub fn soft_dice(pred: ArrayView2<f64>, target: ArrayView2<f64>, eps: f64) -> Result<f64> {
    same_dim(pred.dim(), target.dim(), "soft dice")?;
    let (mut inter, mut sp, mut st) = (0.0, 0.0, 0.0);
    Zip::from(&pred).and(&target).for_each(|&p, &t| {
        inter += p * t;
        sp += p;
        st += t;
    });
    Ok((2.0 * inter + eps) / (sp + st + eps))
}

pub fn indicator(mask: ArrayView2<bool>) -> Array2<f64> {
    mask.mapv(|b| if b { 1.0 } else { 0.0 })
}

/// Negative sum over moving sequences of the class-mean Dice between the
/// warped anatomy channels (`Class::ANATOMY` order) and the reference labels.
pub fn loss_reg(warped: &BTreeMap<Sequence, Vec<Array2<f64>>>, cri: &LabelMask, eps: f64) -> Result<f64> {
    let mut total = 0.0;
    for seq in Sequence::MOVING {
        let chans = warped.get(&seq).ok_or_else(|| Error::Shape(format!("no warped labels for {seq}")))?;
        if chans.len() != Class::ANATOMY.len() {
            return Err(Error::Shape(format!("{seq}: {} anatomy channels, expected 3", chans.len())));
        }
        let mut mean = 0.0;
        for (ch, &class) in chans.iter().zip(Class::ANATOMY.iter()) {
            mean += soft_dice(ch.view(), indicator(cri.anatomy(class).view()).view(), eps)?;
        }
        total += mean / Class::ANATOMY.len() as f64;
    }
    Ok(-total)
}

pub fn loss_myo(pred: ArrayView2<f64>, gold: ArrayView2<f64>, eps: f64) -> Result<f64> {
    Ok(-soft_dice(pred, gold, eps)?)
}

/// Constraint loss over the moving sequences, each in its own frame.
pub fn loss_cons(
    pred: &BTreeMap<Sequence, Array2<f64>>,
    gold: &BTreeMap<Sequence, Array2<f64>>,
    eps: f64,
) -> Result<f64> {
    let mut total = 0.0;
    for seq in Sequence::MOVING {
        let missing = || Error::Shape(format!("no {seq} myocardium map"));
        let p = pred.get(&seq).ok_or_else(missing)?;
        let g = gold.get(&seq).ok_or_else(missing)?;
        total += soft_dice(p.view(), g.view(), eps)?;
    }
    Ok(-total)
}

pub fn loss_hybrid(reg: f64, cons: f64, myo: f64, cfg: &LossConfig) -> f64 {
    reg + cfg.lambda_balance * (cons + myo)
}

/// One-hot `[3, H, W]` target over [`PATHOLOGY_CLASSES`].
pub fn pathology_onehot(gold: &LabelMask) -> Result<ndarray::Array3<f64>> {
    let (h, w) = gold.dim();
    let mut out = ndarray::Array3::zeros((3, h, w));
    for ((r, c), &code) in gold.view().indexed_iter() {
        let k = PATHOLOGY_CLASSES
            .iter()
            .position(|cl| cl.code() == code)
            .ok_or(Error::InvalidLabel(code))?;
        out[[k, r, c]] = 1.0;
    }
    Ok(out)
}

/// Per-pixel softmax over the first axis.
pub fn softmax3(logits: ArrayView3<f64>) -> ndarray::Array3<f64> {
    let mut out = logits.to_owned();
    for mut lane in out.lanes_mut(ndarray::Axis(0)) {
        let m = lane.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        lane.mapv_inplace(|v| (v - m).exp());
        let z: f64 = lane.sum();
        lane.mapv_inplace(|v| v / z);
    }
    out
}

/// `-(mean Dice over EDEMA and SCAR) + mean cross-entropy`, with `logits`
/// shaped `[3, H, W]` in [`PATHOLOGY_CLASSES`] order.
pub fn loss_pathology(logits: ArrayView3<f64>, gold: &LabelMask, eps: f64) -> Result<f64> {
    let (k, h, w) = logits.dim();
    if k != 3 {
        return Err(Error::Shape(format!("pathology logits have {k} channels, expected 3")));
    }
    same_dim((h, w), gold.dim(), "pathology logits vs gold")?;
    let target = pathology_onehot(gold)?;
    let prob = softmax3(logits);
    let mut dice = 0.0;
    for ch in 1..3 {
        dice += soft_dice(prob.index_axis(ndarray::Axis(0), ch), target.index_axis(ndarray::Axis(0), ch), eps)?;
    }
    let mut ce = 0.0;
    Zip::from(&prob).and(&target).for_each(|&p, &t| {
        if t != 0.0 {
            ce -= t * p.ln();
        }
    });
    Ok(-dice / 2.0 + ce / (h * w) as f64)
}

/// Graph versions over `[N, C, H, W]` tensors.
pub mod graph {
    use super::*;

    /// Soft Dice per sample and channel, `[N, C]`.
    pub fn soft_dice<'g>(pred: Var<'g>, target: Var<'g>, eps: f32) -> Result<Var<'g>> {
        let inter = pred.mul(target)?.sum_hw()?;
        let denom = pred.sum_hw()?.add(target.sum_hw()?)?.add_scalar(eps);
        Ok(inter.scale(2.0).add_scalar(eps).div(denom)?)
    }

    /// Registration loss from warped anatomy channels `[N, 3, H, W]` per
    /// moving sequence and the reference one-hot anatomy.
    pub fn loss_reg<'g>(warped: &[Var<'g>], cri_anatomy: Var<'g>, eps: f32) -> Result<Var<'g>> {
        let mut total: Option<Var<'g>> = None;
        for w in warped {
            let d = soft_dice(*w, cri_anatomy, eps)?.mean_all();
            total = Some(match total {
                Some(t) => t.add(d)?,
                None => d,
            });
        }
        Ok(total.ok_or_else(|| Error::Shape("no warped sequences".into()))?.scale(-1.0))
    }

    /// `-mean Dice` for single-channel probability maps.
    pub fn loss_myo<'g>(pred: Var<'g>, gold: Var<'g>, eps: f32) -> Result<Var<'g>> {
        Ok(soft_dice(pred, gold, eps)?.mean_all().scale(-1.0))
    }

    pub fn loss_cons<'g>(pairs: &[(Var<'g>, Var<'g>)], eps: f32) -> Result<Var<'g>> {
        let mut total: Option<Var<'g>> = None;
        for &(p, g) in pairs {
            let d = soft_dice(p, g, eps)?.mean_all();
            total = Some(match total {
                Some(t) => t.add(d)?,
                None => d,
            });
        }
        Ok(total.ok_or_else(|| Error::Shape("no constraint pairs".into()))?.scale(-1.0))
    }

    pub fn loss_hybrid<'g>(reg: Var<'g>, cons: Var<'g>, myo: Var<'g>, lambda: f32) -> Result<Var<'g>> {
        Ok(reg.add(cons.add(myo)?.scale(lambda))?)
    }

    /// Pathology loss from logits `[N, 3, H, W]` and a one-hot target.
    pub fn loss_pathology<'g>(logits: Var<'g>, target: &Tensor, eps: f32) -> Result<Var<'g>> {
        let g = logits.graph();
        let prob = logits.softmax_channels()?;
        let t = g.constant(target.narrow_channels(1, 2)?);
        let dice = soft_dice(prob.narrow_channels(1, 2)?, t, eps)?.mean_all();
        let ce = logits.softmax_cross_entropy(target)?;
        Ok(ce.sub(dice)?)
    }
}
