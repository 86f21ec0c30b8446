//! Two-stage training, inference and evaluation.
//!
//! Stage 1 trains encoders, registration heads and anatomy decoders under
//! the hybrid loss. Stage 2 freezes all of that and trains the pathology
//! U-Net on the aligned image stack, gated by the reference-frame
//! myocardium prior.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::{s, Array2, Array3, ArrayView2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use umyops_tensor::{Adam, Graph, ParamStore, Tensor, Var};

use crate::datapipe::{edema_union_for_eval, merge_pathology_labels, zscore, MultiSeqSlice, Sequence};
use crate::error::{Error, Result};
use crate::label::{Class, LabelMask};
use crate::losses::{self, LossConfig, PATHOLOGY_CLASSES};
use crate::metrics::{dice_hard, eval_registration, structure_metrics, EvalReport};
use crate::netarch::{forward_anatomy, forward_pathology, warp_features, ArchConfig, Model, STAGE1_GROUPS};
use crate::tps::{sample_nearest, solve_tps, warp_label, DisplacementSet, Interpolation, TpsBasis};

pub const CHECKPOINT_SCHEMA: &str = "umyops-checkpoint/1";
pub const TRAIN_LOG_SCHEMA: &str = "umyops-trainlog/1";
const PARAMS_FILE: &str = "params.safetensors";
const CONFIG_FILE: &str = "config.json";
const MANIFEST_FILE: &str = "manifest.json";

/// Source of the myocardium prior fed to the pathology gate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PriorMode {
    /// The sample's own stage-1 myocardium probability.
    True,
    /// A constant map of ones.
    Uniform,
    /// The prior of a different sample in the same split.
    Shuffled,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Augment {
    pub flips: bool,
    pub rot90: bool,
    /// Largest extra random TPS displacement applied to the moving
    /// sequences, in pixels. Zero disables it.
    pub extra_warp_px: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub stage: u8,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_steps: usize,
    pub lambda_balance: f64,
    pub smooth_eps: f64,
    pub seed: u64,
    pub checkpoint_dir: Option<PathBuf>,
    /// Validation evaluations without improvement before stopping.
    pub convergence_patience: usize,
    /// Steps between validation evaluations.
    pub eval_every: usize,
    /// Anneal the learning rate to `lr_floor * learning_rate` along a
    /// half cosine over `max_steps`.
    #[serde(default)]
    pub cosine_decay: bool,
    #[serde(default)]
    pub lr_floor: f64,
    pub augment: Augment,
    pub prior: PriorMode,
    pub arch: ArchConfig,
}

impl TrainConfig {
    pub fn stage1() -> Self {
        Self {
            stage: 1,
            learning_rate: 1e-3,
            batch_size: 8,
            max_steps: 2000,
            lambda_balance: losses::DEFAULT_LAMBDA,
            smooth_eps: losses::DEFAULT_SMOOTH_EPS,
            seed: 0,
            checkpoint_dir: None,
            convergence_patience: 10,
            eval_every: 25,
            cosine_decay: true,
            lr_floor: 0.05,
            augment: Augment::default(),
            prior: PriorMode::True,
            arch: ArchConfig::default(),
        }
    }

    pub fn stage2() -> Self {
        Self { stage: 2, learning_rate: 5e-4, ..Self::stage1() }
    }

    /// Learning rate used for the update after `step` completed steps.
    pub fn learning_rate_at(&self, step: usize) -> f64 {
        if !self.cosine_decay {
            return self.learning_rate;
        }
        let t = (step as f64 / self.max_steps as f64).min(1.0);
        let f = self.lr_floor + (1.0 - self.lr_floor) * 0.5 * (1.0 + (std::f64::consts::PI * t).cos());
        self.learning_rate * f
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig { lambda_balance: self.lambda_balance, smooth_eps: self.smooth_eps }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stage != 1 && self.stage != 2 {
            return Err(Error::Config(format!("stage must be 1 or 2, got {}", self.stage)));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if self.batch_size == 0 || self.max_steps == 0 || self.eval_every == 0 || self.convergence_patience == 0 {
            return Err(Error::Config("batch_size, max_steps, eval_every and convergence_patience must be positive".into()));
        }
        if !(self.augment.extra_warp_px >= 0.0 && self.augment.extra_warp_px.is_finite()) {
            return Err(Error::Config("extra_warp_px must be finite and non-negative".into()));
        }
        if !(0.0..=1.0).contains(&self.lr_floor) {
            return Err(Error::Config("lr_floor must lie in [0, 1]".into()));
        }
        self.loss_config().validate()?;
        self.arch.validate()
    }
}

/// One training unit: Z-scored images, labels in every frame, and the
/// merged pathology gold standard in the reference frame.
#[derive(Clone, Debug)]
pub struct Sample {
    pub id: String,
    pub images: BTreeMap<Sequence, Array2<f32>>,
    pub labels: BTreeMap<Sequence, LabelMask>,
    pub pathology: LabelMask,
    pub spacing: (f64, f64),
}

impl Sample {
    pub fn from_slice(id: impl Into<String>, slice: &MultiSeqSlice) -> Result<Self> {
        let mut images = BTreeMap::new();
        for seq in Sequence::ALL {
            images.insert(seq, zscore(slice.image(seq)?)?);
        }
        let mut labels = BTreeMap::new();
        for seq in Sequence::ALL {
            labels.insert(seq, slice.label(seq)?.clone());
        }
        let lge = &labels[&Sequence::Lge];
        let pathology = merge_pathology_labels(lge, lge)?;
        Ok(Self { id: id.into(), images, labels, pathology, spacing: slice.spacing })
    }

    pub fn dim(&self) -> (usize, usize) {
        self.images[&Sequence::Lge].dim()
    }
}

/// Dihedral transform indexed 0..8: bit 0 flips rows, bit 1 flips columns,
/// bit 2 transposes.
fn dihedral<T: Clone>(a: ArrayView2<T>, code: u8) -> Array2<T> {
    let mut v = a;
    if code & 1 != 0 {
        v.invert_axis(ndarray::Axis(0));
    }
    if code & 2 != 0 {
        v.invert_axis(ndarray::Axis(1));
    }
    if code & 4 != 0 {
        v = v.reversed_axes();
    }
    v.to_owned()
}

struct Augmenter {
    cfg: Augment,
    basis: Option<TpsBasis>,
}

impl Augmenter {
    fn new(cfg: &Augment, arch: &ArchConfig, dim: (usize, usize)) -> Result<Self> {
        let basis = if cfg.extra_warp_px > 0.0 {
            let grid = crate::tps::make_control_grid(arch.grid_m, crate::tps::CANONICAL_EXTENT)?;
            Some(TpsBasis::new(&grid, dim.0, dim.1)?)
        } else {
            None
        };
        Ok(Self { cfg: cfg.clone(), basis })
    }

    fn apply(&self, s: &Sample, rng: &mut ChaCha8Rng) -> Result<Sample> {
        let mut code = 0u8;
        if self.cfg.flips {
            code |= rng.gen_range(0..4u8);
        }
        if self.cfg.rot90 && rng.gen_bool(0.5) {
            code |= 4;
        }
        let mut out = s.clone();
        if code != 0 {
            for img in out.images.values_mut() {
                *img = dihedral(img.view(), code);
            }
            for lab in out.labels.values_mut() {
                *lab = LabelMask::new(dihedral(lab.view(), code))?;
            }
            out.pathology = LabelMask::new(dihedral(out.pathology.view(), code))?;
        }
        if let Some(basis) = &self.basis {
            let mag = self.cfg.extra_warp_px;
            for seq in Sequence::MOVING {
                let deltas = (0..basis.num_points())
                    .map(|_| [rng.gen_range(-mag..=mag), rng.gen_range(-mag..=mag)])
                    .collect();
                let d = DisplacementSet::new(deltas, s.dim())?;
                let img = basis.warp(out.images[&seq].view(), &d, Interpolation::Bilinear)?;
                let coords = basis.sample_coords(&d)?;
                let src = out.labels[&seq].view();
                let (_, w) = s.dim();
                let lab = Array2::from_shape_fn(s.dim(), |(r, c)| {
                    let [sr, sc] = coords[r * w + c];
                    sample_nearest(src, sr, sc, Class::Background.code())
                });
                out.images.insert(seq, img);
                out.labels.insert(seq, LabelMask::new(lab)?);
            }
        }
        Ok(out)
    }
}

fn stack(maps: &[&Array2<f32>]) -> Result<Tensor> {
    let (h, w) = maps.first().map(|m| m.dim()).unwrap_or((0, 0));
    let mut data = Vec::with_capacity(maps.len() * h * w);
    for m in maps {
        data.extend(m.iter());
    }
    Ok(Tensor::new(&[maps.len(), 1, h, w], data)?)
}

fn onehot(masks: &[Vec<Array2<bool>>]) -> Result<Tensor> {
    let c = masks.first().map(|v| v.len()).unwrap_or(0);
    let (h, w) = masks.first().and_then(|v| v.first()).map(|m| m.dim()).unwrap_or((0, 0));
    let mut data = Vec::with_capacity(masks.len() * c * h * w);
    for sample in masks {
        for m in sample {
            data.extend(m.iter().map(|&b| if b { 1.0f32 } else { 0.0 }));
        }
    }
    Ok(Tensor::new(&[masks.len(), c, h, w], data)?)
}

fn anatomy_channels(lab: &LabelMask) -> Vec<Array2<bool>> {
    Class::ANATOMY.iter().map(|&c| lab.anatomy(c)).collect()
}

/// Scalar components of one loss evaluation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub reg: f64,
    pub cons: f64,
    pub myo: f64,
    pub pathology: f64,
    pub total: f64,
}

fn stage1_loss<'g>(g: &'g Graph, model: &Model, batch: &[&Sample], cfg: &TrainConfig) -> Result<(Var<'g>, LossParts)> {
    let mut images = BTreeMap::new();
    for seq in Sequence::ALL {
        let maps: Vec<_> = batch.iter().map(|s| &s.images[&seq]).collect();
        images.insert(seq, g.constant(stack(&maps)?));
    }
    let out = forward_anatomy(g, model, &images)?;
    let eps = cfg.smooth_eps as f32;
    let cri = g.constant(onehot(&batch.iter().map(|s| anatomy_channels(&s.labels[&Sequence::Lge])).collect::<Vec<_>>())?);
    let mut warped = Vec::new();
    let mut cons_pairs = Vec::new();
    for seq in Sequence::MOVING {
        let moving = g.constant(onehot(&batch.iter().map(|s| anatomy_channels(&s.labels[&seq])).collect::<Vec<_>>())?);
        warped.push(warp_features(model, moving, out.disp[&seq])?);
        let gold = g.constant(onehot(&batch.iter().map(|s| vec![s.labels[&seq].myocardium()]).collect::<Vec<_>>())?);
        cons_pairs.push((out.myo_prob[&seq], gold));
    }
    let reg = losses::graph::loss_reg(&warped, cri, eps)?;
    let cons = losses::graph::loss_cons(&cons_pairs, eps)?;
    let gold_lge = g.constant(onehot(&batch.iter().map(|s| vec![s.labels[&Sequence::Lge].myocardium()]).collect::<Vec<_>>())?);
    let myo = losses::graph::loss_myo(out.myo_prob[&Sequence::Lge], gold_lge, eps)?;
    let total = losses::graph::loss_hybrid(reg, cons, myo, cfg.lambda_balance as f32)?;
    let parts = LossParts {
        reg: reg.value().item() as f64,
        cons: cons.value().item() as f64,
        myo: myo.value().item() as f64,
        pathology: 0.0,
        total: total.value().item() as f64,
    };
    Ok((total, parts))
}

/// Per-step training history.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub rows: Vec<LogRow>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: usize,
    pub stage: u8,
    pub split: String,
    pub parts: LossParts,
}

impl TrainLog {
    fn push(&mut self, step: usize, stage: u8, split: &str, parts: LossParts) {
        self.rows.push(LogRow { step, stage, split: split.into(), parts });
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let err = |e: csv::Error| Error::Io(std::io::Error::other(e));
        w.write_record([
            &format!("step[{TRAIN_LOG_SCHEMA}]"),
            "stage",
            "split",
            "loss_reg",
            "loss_cons",
            "loss_myo",
            "loss_pathology",
            "total",
        ])
        .map_err(err)?;
        for r in &self.rows {
            let p = r.parts;
            w.write_record([
                r.step.to_string(),
                r.stage.to_string(),
                r.split.clone(),
                format!("{:.6}", p.reg),
                format!("{:.6}", p.cons),
                format!("{:.6}", p.myo),
                format!("{:.6}", p.pathology),
                format!("{:.6}", p.total),
            ])
            .map_err(err)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Training-split totals in step order.
    pub fn train_totals(&self) -> Vec<f64> {
        self.rows.iter().filter(|r| r.split == "train").map(|r| r.parts.total).collect()
    }
}

/// Result of a training run.
#[derive(Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub log: TrainLog,
    pub steps: usize,
    pub best_step: usize,
    pub best_val_loss: f64,
    pub stopped_early: bool,
}

struct Batcher {
    order: Vec<usize>,
    pos: usize,
}

impl Batcher {
    fn new(n: usize) -> Self {
        Self { order: (0..n).collect(), pos: n }
    }

    fn next(&mut self, k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let mut out = Vec::with_capacity(k);
        while out.len() < k {
            if self.pos == self.order.len() {
                self.order.shuffle(rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

/// Generic optimisation loop shared by both stages: `loss` builds the graph
/// for a batch of indices, `val` scores the current parameters.
fn optimise<L, V>(model: &mut Model, cfg: &TrainConfig, n_train: usize, mut loss: L, mut val: V) -> Result<(TrainLog, usize, usize, f64, bool)>
where
    L: FnMut(&Graph, &Model, &[usize], &mut ChaCha8Rng) -> Result<(f64, LossParts, Vec<(umyops_tensor::ParamId, Tensor)>)>,
    V: FnMut(&Model) -> Result<LossParts>,
{
    if n_train == 0 {
        return Err(Error::Config("empty training set".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(cfg.stage as u64 * 0x9e37_79b9));
    let mut opt = Adam::new(cfg.learning_rate as f32);
    let mut batcher = Batcher::new(n_train);
    let mut log = TrainLog::default();
    let mut best = (f64::INFINITY, 0usize, model.params.clone());
    let mut since_best = 0;
    let mut stopped_early = false;
    let mut step = 0;
    while step < cfg.max_steps {
        let idx = batcher.next(cfg.batch_size.min(n_train), &mut rng);
        let g = Graph::new();
        let (total, parts, grads) = match loss(&g, model, &idx, &mut rng) {
            Err(Error::Numeric(msg)) => return Err(abort(model, &best.2, cfg, step, &msg)),
            other => other?,
        };
        drop(g);
        if !total.is_finite() || grads.iter().any(|(_, t)| !t.is_finite()) {
            return Err(abort(model, &best.2, cfg, step, "non-finite loss or gradient"));
        }
        opt.lr = cfg.learning_rate_at(step) as f32;
        opt.step(&mut model.params, &grads);
        step += 1;
        log.push(step, cfg.stage, "train", parts);
        if step % cfg.eval_every == 0 || step == cfg.max_steps {
            let v = val(model)?;
            log.push(step, cfg.stage, "val", v);
            log::info!("stage {} step {step}: train {:.4} val {:.4}", cfg.stage, parts.total, v.total);
            if v.total < best.0 {
                best = (v.total, step, model.params.clone());
                since_best = 0;
            } else {
                since_best += 1;
                if since_best >= cfg.convergence_patience {
                    stopped_early = true;
                    break;
                }
            }
        }
    }
    let (best_val, best_step, params) = best;
    if best_val.is_finite() {
        restore(&mut model.params, &params);
    }
    Ok((log, step, best_step, best_val, stopped_early))
}

/// Copies values (not freeze flags) from `from` into `into`.
fn restore(into: &mut ParamStore, from: &ParamStore) {
    for p in from.iter() {
        if let Some(id) = into.id(&p.name) {
            *into.value_mut(id) = p.value.as_ref().clone();
        }
    }
}

fn abort(model: &Model, last_good: &ParamStore, cfg: &TrainConfig, step: usize, msg: &str) -> Error {
    if let Some(dir) = &cfg.checkpoint_dir {
        let mut good = model.clone();
        restore(&mut good.params, last_good);
        let manifest_note = format!("aborted at step {step}: {msg}");
        if let Err(e) = save_checkpoint(dir, &good, cfg, step, f64::NAN, Some(manifest_note)) {
            log::warn!("could not save last-good checkpoint: {e}");
        }
    }
    Error::Numeric(format!("training aborted at step {step}: {msg}"))
}

fn grads_of(g: &Graph, total: Var<'_>) -> Result<Vec<(umyops_tensor::ParamId, Tensor)>> {
    Ok(g.backward(total)?.param_grads())
}

fn mean_parts(parts: &[(LossParts, usize)]) -> LossParts {
    let n: usize = parts.iter().map(|p| p.1).sum();
    let mut out = LossParts::default();
    for (p, k) in parts {
        let w = *k as f64 / n.max(1) as f64;
        out.reg += p.reg * w;
        out.cons += p.cons * w;
        out.myo += p.myo * w;
        out.pathology += p.pathology * w;
        out.total += p.total * w;
    }
    out
}

/// Joint registration + anatomy training under the hybrid loss.
pub fn train_stage1(train: &[Sample], val: &[Sample], cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if cfg.stage != 1 {
        return Err(Error::Config("train_stage1 needs a stage-1 config".into()));
    }
    let dim = train.first().ok_or_else(|| Error::Config("empty training set".into()))?.dim();
    if dim != (cfg.arch.size, cfg.arch.size) {
        return Err(Error::Shape(format!("samples are {dim:?}, architecture expects {}", cfg.arch.size)));
    }
    let mut model = Model::new(cfg.arch.clone())?;
    let aug = Augmenter::new(&cfg.augment, &cfg.arch, dim)?;
    let (log, steps, best_step, best_val_loss, stopped_early) = optimise(
        &mut model,
        cfg,
        train.len(),
        |g, m, idx, rng| {
            let batch = idx.iter().map(|&i| aug.apply(&train[i], rng)).collect::<Result<Vec<_>>>()?;
            let refs: Vec<&Sample> = batch.iter().collect();
            let (total, parts) = stage1_loss(g, m, &refs, cfg)?;
            Ok((parts.total, parts, grads_of(g, total)?))
        },
        |m| {
            let mut acc = Vec::new();
            for chunk in val.chunks(cfg.batch_size) {
                let g = Graph::new();
                let refs: Vec<&Sample> = chunk.iter().collect();
                acc.push((stage1_loss(&g, m, &refs, cfg)?.1, chunk.len()));
            }
            Ok(mean_parts(&acc))
        },
    )?;
    let outcome = TrainOutcome { model, log, steps, best_step, best_val_loss, stopped_early };
    finish(&outcome, cfg)?;
    Ok(outcome)
}

fn finish(outcome: &TrainOutcome, cfg: &TrainConfig) -> Result<()> {
    if let Some(dir) = &cfg.checkpoint_dir {
        save_checkpoint(dir, &outcome.model, cfg, outcome.steps, outcome.best_val_loss, None)?;
        let f = fs::File::create(dir.join(format!("stage{}", cfg.stage)).join("train_log.csv"))?;
        outcome.log.write_csv(f)?;
    }
    Ok(())
}

/// Stage-1 outputs the pathology network consumes, computed once.
#[derive(Clone, Debug)]
pub struct PathologyInput {
    /// Aligned bSSFP, LGE, T2 stack `[3, H, W]`.
    pub aligned: Array3<f32>,
    /// Reference-frame myocardium probability.
    pub prior: Array2<f32>,
    pub gold: LabelMask,
}

/// Stage-1 forward pass for a single sample: displacements, aligned images
/// and myocardium probabilities.
pub struct AnatomyResult {
    pub disp: BTreeMap<Sequence, DisplacementSet>,
    pub warped_images: BTreeMap<Sequence, Array2<f32>>,
    pub myo_prob: BTreeMap<Sequence, Array2<f32>>,
}

fn to_map(t: &Tensor, b: usize, c: usize) -> Result<Array2<f32>> {
    let (_, ch, h, w) = t.dims4()?;
    let off = (b * ch + c) * h * w;
    Ok(Array2::from_shape_vec((h, w), t.data()[off..off + h * w].to_vec()).map_err(|e| Error::Shape(e.to_string()))?)
}

pub fn run_anatomy(model: &Model, samples: &[&Sample]) -> Result<Vec<AnatomyResult>> {
    let g = Graph::new();
    let mut images = BTreeMap::new();
    for seq in Sequence::ALL {
        let maps: Vec<_> = samples.iter().map(|s| &s.images[&seq]).collect();
        images.insert(seq, g.constant(stack(&maps)?));
    }
    let out = forward_anatomy(&g, model, &images)?;
    let mut warped = BTreeMap::new();
    for seq in Sequence::MOVING {
        warped.insert(seq, warp_features(model, images[&seq], out.disp[&seq])?.value());
    }
    let frame = (model.config.size, model.config.size);
    let mut results = Vec::with_capacity(samples.len());
    for (b, s) in samples.iter().enumerate() {
        let mut disp = BTreeMap::new();
        for seq in Sequence::MOVING {
            let v = out.disp[&seq].value();
            let k = v.shape()[1];
            let flat: Vec<f64> = v.data()[b * k..(b + 1) * k].iter().map(|&x| x as f64).collect();
            disp.insert(seq, DisplacementSet::from_flat(&flat, frame)?);
        }
        let mut warped_images = BTreeMap::new();
        for seq in Sequence::MOVING {
            warped_images.insert(seq, to_map(&warped[&seq], b, 0)?);
        }
        warped_images.insert(Sequence::Lge, s.images[&Sequence::Lge].clone());
        let mut myo_prob = BTreeMap::new();
        for (seq, p) in &out.myo_prob {
            myo_prob.insert(*seq, to_map(&p.value(), b, 0)?);
        }
        results.push(AnatomyResult { disp, warped_images, myo_prob });
    }
    Ok(results)
}

fn pathology_inputs(model: &Model, samples: &[Sample], chunk: usize) -> Result<Vec<PathologyInput>> {
    let mut out = Vec::with_capacity(samples.len());
    for part in samples.chunks(chunk.max(1)) {
        let refs: Vec<&Sample> = part.iter().collect();
        for (s, r) in part.iter().zip(run_anatomy(model, &refs)?) {
            let (h, w) = s.dim();
            let mut aligned = Array3::zeros((3, h, w));
            for (k, seq) in [Sequence::Bssfp, Sequence::Lge, Sequence::T2].iter().enumerate() {
                aligned.slice_mut(s![k, .., ..]).assign(&r.warped_images[seq]);
            }
            out.push(PathologyInput { aligned, prior: r.myo_prob[&Sequence::Lge].clone(), gold: s.pathology.clone() });
        }
    }
    Ok(out)
}

/// Replaces priors according to `mode`. Shuffled priors come from the next
/// sample in a seeded cyclic permutation, so no sample keeps its own.
pub fn apply_prior_mode(inputs: &mut [PathologyInput], mode: PriorMode, seed: u64) {
    match mode {
        PriorMode::True => {}
        PriorMode::Uniform => inputs.iter_mut().for_each(|p| p.prior.fill(1.0)),
        PriorMode::Shuffled => {
            let n = inputs.len();
            if n < 2 {
                return;
            }
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            let priors: Vec<Array2<f32>> = inputs.iter().map(|p| p.prior.clone()).collect();
            for k in 0..n {
                inputs[order[k]].prior = priors[order[(k + 1) % n]].clone();
            }
        }
    }
}

fn pathology_batch(inputs: &[&PathologyInput], codes: &[u8]) -> Result<(Tensor, Tensor, Tensor)> {
    let (_, h, w) = inputs[0].aligned.dim();
    let n = inputs.len();
    let mut img = Vec::with_capacity(n * 3 * h * w);
    let mut prior = Vec::with_capacity(n * h * w);
    let mut target = Vec::with_capacity(n * 3 * h * w);
    for (p, &code) in inputs.iter().zip(codes) {
        for k in 0..3 {
            img.extend(dihedral(p.aligned.slice(s![k, .., ..]), code).iter());
        }
        prior.extend(dihedral(p.prior.view(), code).iter());
        let gold = dihedral(p.gold.view(), code);
        for class in PATHOLOGY_CLASSES {
            target.extend(gold.iter().map(|&c| if c == class.code() { 1.0f32 } else { 0.0 }));
        }
    }
    Ok((
        Tensor::new(&[n, 3, h, w], img)?,
        Tensor::new(&[n, 1, h, w], prior)?,
        Tensor::new(&[n, 3, h, w], target)?,
    ))
}

fn pathology_loss<'g>(g: &'g Graph, model: &Model, inputs: &[&PathologyInput], codes: &[u8], eps: f32) -> Result<(Var<'g>, LossParts)> {
    let (img, prior, target) = pathology_batch(inputs, codes)?;
    let logits = forward_pathology(g, model, g.constant(img), g.constant(prior))?;
    let loss = losses::graph::loss_pathology(logits, &target, eps)?;
    let v = loss.value().item() as f64;
    Ok((loss, LossParts { pathology: v, total: v, ..Default::default() }))
}

/// Digest of the stage-1 parameter arrays, used to prove they were not
/// touched by stage 2.
pub fn stage1_digest(model: &Model) -> String {
    let mut h = Sha256::new();
    for (name, t) in model.params.named() {
        if STAGE1_GROUPS.iter().any(|g| name.starts_with(&format!("{g}."))) {
            h.update(name.as_bytes());
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
    }
    hex::encode(h.finalize())
}

/// Pathology-network training on top of a frozen stage-1 model.
pub fn train_stage2(train: &[Sample], val: &[Sample], stage1: &Model, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if cfg.stage != 2 {
        return Err(Error::Config("train_stage2 needs a stage-2 config".into()));
    }
    let mut model = stage1.clone();
    model.freeze_stage1();
    let before = stage1_digest(&model);
    let mut tr = pathology_inputs(&model, train, cfg.batch_size)?;
    let mut va = pathology_inputs(&model, val, cfg.batch_size)?;
    apply_prior_mode(&mut tr, cfg.prior, cfg.seed);
    apply_prior_mode(&mut va, cfg.prior, cfg.seed ^ 1);
    let eps = cfg.smooth_eps as f32;
    let aug = cfg.augment.clone();
    let (log, steps, best_step, best_val_loss, stopped_early) = optimise(
        &mut model,
        cfg,
        tr.len(),
        |g, m, idx, rng| {
            let refs: Vec<&PathologyInput> = idx.iter().map(|&i| &tr[i]).collect();
            let codes: Vec<u8> = idx
                .iter()
                .map(|_| {
                    let mut c = if aug.flips { rng.gen_range(0..4u8) } else { 0 };
                    if aug.rot90 && rng.gen_bool(0.5) {
                        c |= 4;
                    }
                    c
                })
                .collect();
            let (total, parts) = pathology_loss(g, m, &refs, &codes, eps)?;
            Ok((parts.total, parts, grads_of(g, total)?))
        },
        |m| {
            let mut acc = Vec::new();
            for chunk in va.chunks(cfg.batch_size) {
                let g = Graph::new();
                let refs: Vec<&PathologyInput> = chunk.iter().collect();
                acc.push((pathology_loss(&g, m, &refs, &vec![0; refs.len()], eps)?.1, chunk.len()));
            }
            Ok(mean_parts(&acc))
        },
    )?;
    if stage1_digest(&model) != before {
        return Err(Error::Numeric("stage-1 parameters changed during stage 2".into()));
    }
    let outcome = TrainOutcome { model, log, steps, best_step, best_val_loss, stopped_early };
    finish(&outcome, cfg)?;
    Ok(outcome)
}

/// Full pipeline output for one sample, in the reference frame.
#[derive(Clone, Debug)]
pub struct Inference {
    pub disp: BTreeMap<Sequence, DisplacementSet>,
    pub warped_images: BTreeMap<Sequence, Array2<f32>>,
    pub myo_prob: BTreeMap<Sequence, Array2<f32>>,
    /// Softmax over (BG, EDEMA, SCAR), `[3, H, W]`.
    pub pathology_prob: Array3<f32>,
    pub myo_mask: Array2<bool>,
    /// Myocardium, then edema, then scar painted on top.
    pub labels: LabelMask,
}

pub fn infer(model: &Model, sample: &Sample, prior: PriorMode) -> Result<Inference> {
    infer_batch(model, &[sample], prior).map(|mut v| v.remove(0))
}

/// Batched inference. With [`PriorMode::Shuffled`] each sample is gated by
/// another sample's prior (needs at least two samples).
pub fn infer_batch(model: &Model, samples: &[&Sample], prior: PriorMode) -> Result<Vec<Inference>> {
    if prior == PriorMode::Shuffled && samples.len() < 2 {
        return Err(Error::Config("shuffled priors need at least two samples per batch".into()));
    }
    let anatomy = run_anatomy(model, samples)?;
    let mut inputs: Vec<PathologyInput> = samples
        .iter()
        .zip(&anatomy)
        .map(|(s, r)| {
            let (h, w) = s.dim();
            let mut aligned = Array3::zeros((3, h, w));
            for (k, seq) in [Sequence::Bssfp, Sequence::Lge, Sequence::T2].iter().enumerate() {
                aligned.slice_mut(s![k, .., ..]).assign(&r.warped_images[seq]);
            }
            PathologyInput { aligned, prior: r.myo_prob[&Sequence::Lge].clone(), gold: s.pathology.clone() }
        })
        .collect();
    apply_prior_mode(&mut inputs, prior, 1);
    let refs: Vec<&PathologyInput> = inputs.iter().collect();
    let (img, pr, _) = pathology_batch(&refs, &vec![0; refs.len()])?;
    let g = Graph::new();
    let probs = forward_pathology(&g, model, g.constant(img), g.constant(pr))?.softmax_channels()?.value();
    let mut out = Vec::with_capacity(samples.len());
    for (b, r) in anatomy.into_iter().enumerate() {
        let (h, w) = samples[b].dim();
        let mut pp = Array3::zeros((3, h, w));
        for k in 0..3 {
            pp.slice_mut(s![k, .., ..]).assign(&to_map(&probs, b, k)?);
        }
        let myo_mask = r.myo_prob[&Sequence::Lge].mapv(|p| p > 0.5);
        let mut labels = Array2::zeros((h, w));
        for ((i, j), l) in labels.indexed_iter_mut() {
            let (bg, ed, sc) = (pp[[0, i, j]], pp[[1, i, j]], pp[[2, i, j]]);
            *l = if sc > bg && sc >= ed {
                Class::Scar.code()
            } else if ed > bg {
                Class::Edema.code()
            } else if myo_mask[[i, j]] {
                Class::Myocardium.code()
            } else {
                Class::Background.code()
            };
        }
        out.push(Inference {
            disp: r.disp,
            warped_images: r.warped_images,
            myo_prob: r.myo_prob,
            pathology_prob: pp,
            myo_mask,
            labels: LabelMask::new(labels)?,
        });
    }
    Ok(out)
}

/// Splits `0..n` into consecutive ranges of about `size` items, none of
/// them a singleton unless `n == 1`.
pub fn batch_ranges(n: usize, size: usize) -> Vec<std::ops::Range<usize>> {
    let size = size.max(2);
    let mut out: Vec<std::ops::Range<usize>> = (0..n).step_by(size).map(|a| a..(a + size).min(n)).collect();
    if out.len() > 1 && out.last().is_some_and(|r| r.len() == 1) {
        let last = out.pop().expect("non-empty");
        out.last_mut().expect("non-empty").end = last.end;
    }
    out
}

/// Evaluates a model on labelled samples: registration of each moving
/// sequence (initial and after warping), reference-frame myocardium, scar
/// and edema (union with scar).
pub fn evaluate(model: &Model, samples: &[Sample], prior: PriorMode, chunk: usize) -> Result<EvalReport> {
    let mut report = EvalReport::default();
    let mut disps: BTreeMap<String, Vec<DisplacementSet>> = BTreeMap::new();
    for range in batch_ranges(samples.len(), chunk) {
        let part = &samples[range];
        let refs: Vec<&Sample> = part.iter().collect();
        let results = infer_batch(model, &refs, prior)?;
        for (s, inf) in part.iter().zip(results) {
            let mut row = Vec::new();
            let lge = &s.labels[&Sequence::Lge];
            for seq in Sequence::MOVING {
                let moving = &s.labels[&seq];
                let name = seq.name().to_lowercase();
                let init = dice_hard(moving.myocardium().view(), lge.myocardium().view())?;
                row.push((format!("{name}_init_myo_dice"), Some(init)));
                let coeffs = solve_tps(model.grid(), &inf.disp[&seq])?;
                let warped = warp_label(moving, &coeffs)?;
                let reg = eval_registration(&warped, lge, Class::Myocardium, s.spacing)?;
                row.push((format!("{name}_reg_myo_dice"), Some(reg.dice)));
                row.push((format!("{name}_reg_myo_hd_mm"), reg.hd_mm));
                disps.entry(seq.name().to_string()).or_default().push(inf.disp[&seq].clone());
            }
            row.extend(structure_metrics("myo", inf.myo_mask.view(), lge.myocardium().view(), s.spacing)?);
            let pred = edema_union_for_eval(&inf.labels);
            let gold = edema_union_for_eval(&s.pathology);
            row.extend(structure_metrics("scar", pred.scar.view(), gold.scar.view(), s.spacing)?);
            row.extend(structure_metrics("edema", pred.edema.view(), gold.edema.view(), s.spacing)?);
            report.push(s.id.clone(), row)?;
        }
    }
    let (h, w) = (model.config.size, model.config.size);
    for (seq, sets) in disps {
        report.displacement.insert(seq, crate::metrics::displacement_stats(&sets, h, w)?);
    }
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointConfig {
    pub schema: String,
    pub arch: ArchConfig,
    pub train: TrainConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub schema: String,
    pub stage: u8,
    pub steps: usize,
    pub best_val_loss: Option<f64>,
    pub params_file: String,
    pub params_sha256: String,
    pub frozen_groups: Vec<String>,
    pub stage1_sha256: String,
    pub note: Option<String>,
}

fn params_bytes(params: &ParamStore) -> Result<Vec<u8>> {
    let raw: Vec<(String, Vec<usize>, Vec<u8>)> = params
        .named()
        .map(|(n, t)| (n.to_string(), t.shape().to_vec(), t.data().iter().flat_map(|v| v.to_le_bytes()).collect()))
        .collect();
    let views = raw
        .iter()
        .map(|(n, s, b)| {
            safetensors::tensor::TensorView::new(safetensors::Dtype::F32, s.clone(), b)
                .map(|v| (n.clone(), v))
                .map_err(|e| Error::Schema(e.to_string()))
        })
        .collect::<Result<Vec<_>>>()?;
    safetensors::serialize(views, &None).map_err(|e| Error::Schema(e.to_string()))
}

/// Writes `<dir>/stage<k>/{params.safetensors, config.json, manifest.json}`.
pub fn save_checkpoint(
    dir: &Path,
    model: &Model,
    cfg: &TrainConfig,
    steps: usize,
    best_val_loss: f64,
    note: Option<String>,
) -> Result<PathBuf> {
    let out = dir.join(format!("stage{}", cfg.stage));
    fs::create_dir_all(&out)?;
    let bytes = params_bytes(&model.params)?;
    let config = CheckpointConfig { schema: CHECKPOINT_SCHEMA.into(), arch: model.config.clone(), train: cfg.clone() };
    let manifest = CheckpointManifest {
        schema: CHECKPOINT_SCHEMA.into(),
        stage: cfg.stage,
        steps,
        best_val_loss: best_val_loss.is_finite().then_some(best_val_loss),
        params_file: PARAMS_FILE.into(),
        params_sha256: hex::encode(Sha256::digest(&bytes)),
        frozen_groups: model.frozen_groups(),
        stage1_sha256: stage1_digest(model),
        note,
    };
    write_checkpoint_files(&out, &bytes, &config, &manifest)?;
    Ok(out)
}

fn write_checkpoint_files(out: &Path, bytes: &[u8], config: &CheckpointConfig, manifest: &CheckpointManifest) -> Result<()> {
    fs::write(out.join(PARAMS_FILE), bytes)?;
    fs::write(out.join(CONFIG_FILE), serde_json::to_string_pretty(config)? + "\n")?;
    fs::write(out.join(MANIFEST_FILE), serde_json::to_string_pretty(manifest)? + "\n")?;
    Ok(())
}

/// A loaded checkpoint directory.
#[derive(Debug)]
pub struct Checkpoint {
    pub model: Model,
    pub config: CheckpointConfig,
    pub manifest: CheckpointManifest,
}

impl Checkpoint {
    /// Rewrites the checkpoint into `out` from the loaded state.
    pub fn save(&self, out: &Path) -> Result<()> {
        fs::create_dir_all(out)?;
        write_checkpoint_files(out, &params_bytes(&self.model.params)?, &self.config, &self.manifest)
    }
}

/// Loads a stage directory (one containing `manifest.json`).
pub fn load_checkpoint(stage_dir: &Path) -> Result<Checkpoint> {
    let manifest: CheckpointManifest = serde_json::from_str(&fs::read_to_string(stage_dir.join(MANIFEST_FILE))?)
        .map_err(|e| Error::Schema(format!("manifest: {e}")))?;
    let config: CheckpointConfig = serde_json::from_str(&fs::read_to_string(stage_dir.join(CONFIG_FILE))?)
        .map_err(|e| Error::Schema(format!("config: {e}")))?;
    if manifest.schema != CHECKPOINT_SCHEMA || config.schema != CHECKPOINT_SCHEMA {
        return Err(Error::Schema(format!("unsupported checkpoint schema `{}`", manifest.schema)));
    }
    let bytes = fs::read(stage_dir.join(&manifest.params_file))?;
    if hex::encode(Sha256::digest(&bytes)) != manifest.params_sha256 {
        return Err(Error::Schema("parameter file checksum mismatch".into()));
    }
    let st = safetensors::SafeTensors::deserialize(&bytes).map_err(|e| Error::Schema(e.to_string()))?;
    let mut params = ParamStore::new();
    let mut names: Vec<String> = st.names().into_iter().cloned().collect();
    names.sort();
    for name in names {
        let view = st.tensor(&name).map_err(|e| Error::Schema(e.to_string()))?;
        if view.dtype() != safetensors::Dtype::F32 {
            return Err(Error::Schema(format!("parameter `{name}` is {:?}, expected F32", view.dtype())));
        }
        let data = view.data().chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        params.insert(&name, Tensor::new(view.shape(), data)?);
    }
    let mut model = Model::with_params(config.arch.clone(), params)?;
    for g in &manifest.frozen_groups {
        model.set_group_frozen(g, true);
    }
    Ok(Checkpoint { model, config, manifest })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dihedral_codes_are_distinct_and_invertible() {
        let a = Array2::from_shape_fn((3, 3), |(r, c)| r * 3 + c);
        let mut seen = Vec::new();
        for code in 0..8u8 {
            let t = dihedral(a.view(), code);
            assert!(!seen.contains(&t));
            seen.push(t);
        }
    }

    #[test]
    fn shuffled_priors_never_stay_put() {
        let mk = |v: f32| PathologyInput {
            aligned: Array3::zeros((3, 2, 2)),
            prior: Array2::from_elem((2, 2), v),
            gold: LabelMask::background(2, 2),
        };
        let mut inputs: Vec<_> = (0..7).map(|i| mk(i as f32)).collect();
        apply_prior_mode(&mut inputs, PriorMode::Shuffled, 3);
        for (i, p) in inputs.iter().enumerate() {
            assert_ne!(p.prior[[0, 0]], i as f32);
        }
        let mut sorted: Vec<f32> = inputs.iter().map(|p| p.prior[[0, 0]]).collect();
        sorted.sort_by(f32::total_cmp);
        assert_eq!(sorted, (0..7).map(|i| i as f32).collect::<Vec<_>>());
    }

    #[test]
    fn batch_ranges_cover_without_singletons() {
        for n in 1..40 {
            for size in 1..9 {
                let r = batch_ranges(n, size);
                assert_eq!(r.first().unwrap().start, 0);
                assert_eq!(r.last().unwrap().end, n);
                assert!(r.windows(2).all(|w| w[0].end == w[1].start));
                assert!(n == 1 || r.iter().all(|x| x.len() >= 2));
            }
        }
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::stage1().validate().is_ok());
        assert!(TrainConfig { stage: 3, ..TrainConfig::stage1() }.validate().is_err());
        assert!(TrainConfig { batch_size: 0, ..TrainConfig::stage1() }.validate().is_err());
    }
}
