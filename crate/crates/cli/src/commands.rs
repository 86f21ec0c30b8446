use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use umyops::clinquant::{bullseye_svg, pearson_r, quantify as quantify_slice, scatter_svg, write_quant_csv, QuantReport};
use umyops::datapipe::{edema_union_for_eval, generate_phantom, write_slice, MultiSeqSlice, PhantomSpec, Provenance, Sequence, SliceRecord};
use umyops::metrics::{structure_metrics, EvalReport};
use umyops::netarch::Model;
use umyops::trainer::{self, load_checkpoint, stage1_digest, PriorMode, Sample, TrainConfig};
use umyops::{Class, Error, LabelMask, Result};

use crate::dataset::{self, par_map, PREDICTIONS_DIR, SAMPLES_DIR};
use crate::manifest::Recorder;
use crate::{Common, EvaluateArgs, InferArgs, PhantomArgs, QuantifyArgs, TrainArgs};

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Overlays the keys of a JSON config file onto `base`.
fn with_config<T: Serialize + DeserializeOwned>(base: T, file: Option<&Path>) -> Result<T> {
    let Some(path) = file else { return Ok(base) };
    let over: Value = serde_json::from_str(&fs::read_to_string(path)?)
        .map_err(|e| Error::Schema(format!("{}: {e}", path.display())))?;
    if !over.is_object() {
        return Err(Error::Schema(format!("{}: expected a JSON object", path.display())));
    }
    let mut v = serde_json::to_value(base)?;
    merge(&mut v, over);
    serde_json::from_value(v).map_err(|e| Error::Schema(format!("{}: {e}", path.display())))
}

fn sample_seed(seed: u64, i: usize) -> u64 {
    seed.wrapping_mul(1_000_003).wrapping_add(i as u64)
}

pub fn phantom(common: &Common, a: &PhantomArgs) -> Result<()> {
    let template = with_config(
        PhantomSpec { size: a.size, misalign_magnitude: a.misalign, ..PhantomSpec::default() },
        common.config.as_deref(),
    )?;
    template.validate()?;
    if a.count == 0 {
        return Err(Error::InvalidSpec("count must be positive".into()));
    }
    let rec = Recorder::start("phantom", &(&template, a.count), common.seed, &[])?;
    let dir = common.out.join(SAMPLES_DIR);
    fs::create_dir_all(&dir)?;
    let idx: Vec<usize> = (0..a.count).collect();
    let entries = par_map(&idx, common.jobs, |&i| {
        let seed = sample_seed(common.seed, i);
        let spec = PhantomSpec { seed, ..template.clone() }.with_sampled_fractions();
        let ph = generate_phantom(&spec)?;
        let id = format!("sample_{i:04}");
        let stem = dir.join(&id);
        write_slice(&stem, &SliceRecord { slice: ph.slice, displacements: ph.displacements.clone() })?;
        let sha = hex::encode(Sha256::digest(fs::read(stem.with_extension("bin"))?));
        Ok(json!({ "id": id, "seed": seed, "path": stem.with_extension("json"), "sha256": sha, "displacements": ph.displacements }))
    })?;
    rec.finish(&common.out, &[dir], json!({ "spec": template, "samples": entries }))?;
    log::info!("wrote {} phantoms to {}", a.count, common.out.display());
    Ok(())
}

trait SampledFractions {
    fn with_sampled_fractions(self) -> Self;
}

impl SampledFractions for PhantomSpec {
    /// Draws the scar and edema fractions from the seed, keeping the rest.
    fn with_sampled_fractions(self) -> Self {
        let s = PhantomSpec::sampled(self.seed, self.misalign_magnitude);
        PhantomSpec { scar_fraction: s.scar_fraction, edema_fraction: s.edema_fraction, ..self }
    }
}

fn load_samples(dir: &Path, jobs: usize) -> Result<Vec<Sample>> {
    dataset::load(dir, jobs)?.iter().map(|(id, r)| Sample::from_slice(id.clone(), &r.slice)).collect()
}

/// Accepts either a stage directory or a run directory containing `stage<k>/`.
fn stage_dir(p: &Path, stage: u8) -> PathBuf {
    let nested = p.join(format!("stage{stage}"));
    if nested.join("manifest.json").is_file() {
        nested
    } else {
        p.to_path_buf()
    }
}

fn load_stage(p: &Path, stage: u8) -> Result<Model> {
    let ck = load_checkpoint(&stage_dir(p, stage))?;
    if ck.manifest.stage != stage {
        return Err(Error::Schema(format!("{} holds a stage-{} checkpoint, expected stage {stage}", p.display(), ck.manifest.stage)));
    }
    Ok(ck.model)
}

pub fn train(common: &Common, a: &TrainArgs) -> Result<()> {
    let base = if a.stage == 1 { TrainConfig::stage1() } else { TrainConfig::stage2() };
    let mut cfg = with_config(base, common.config.as_deref())?;
    cfg.stage = a.stage;
    cfg.seed = common.seed;
    if let Some(s) = a.steps {
        cfg.max_steps = s;
    }
    cfg.checkpoint_dir = Some(common.out.clone());
    let stage1 = match (a.stage, &a.from_stage1) {
        (1, _) => None,
        (_, Some(p)) => Some(load_stage(p, 1)?),
        (_, None) => return Err(Error::Config("stage 2 needs --from-stage1".into())),
    };
    if let Some(m) = &stage1 {
        cfg.arch = m.config.clone();
    }
    let samples = load_samples(&a.data, common.jobs)?;
    let dim = samples[0].dim();
    if dim != (cfg.arch.size, cfg.arch.size) {
        return Err(Error::Config(format!("data is {}x{}, model expects {s}x{s}", dim.0, dim.1, s = cfg.arch.size)));
    }
    if !(0.0..1.0).contains(&a.val_fraction) || samples.len() < 2 {
        return Err(Error::Config("need at least two samples and a validation fraction in [0, 1)".into()));
    }
    let n_val = ((samples.len() as f64 * a.val_fraction).round() as usize).clamp(1, samples.len() - 1);
    let (tr, va) = samples.split_at(samples.len() - n_val);
    cfg.validate()?;
    let mut inputs = vec![a.data.as_path()];
    if let Some(p) = &a.from_stage1 {
        inputs.push(p);
    }
    let rec = Recorder::start("train", &cfg, common.seed, &inputs)?;
    let (outcome, frozen) = match &stage1 {
        None => (trainer::train_stage1(tr, va, &cfg)?, Value::Null),
        Some(m) => {
            let before = stage1_digest(m);
            let out = trainer::train_stage2(tr, va, m, &cfg)?;
            let after = stage1_digest(&out.model);
            log::info!("stage-1 parameters bit-identical after stage 2: {}", before == after);
            (out, json!({ "before": before, "after": after, "identical": before == after }))
        }
    };
    let stage_out = common.out.join(format!("stage{}", a.stage));
    rec.finish(
        &common.out,
        &[stage_out],
        json!({
            "stage": a.stage,
            "train_samples": tr.len(),
            "val_samples": va.len(),
            "steps": outcome.steps,
            "best_step": outcome.best_step,
            "best_val_loss": outcome.best_val_loss,
            "stopped_early": outcome.stopped_early,
            "stage1_sha256": frozen,
        }),
    )?;
    Ok(())
}

pub fn infer(common: &Common, a: &InferArgs) -> Result<()> {
    let model = load_stage(&a.checkpoint, 2)?;
    let samples = load_samples(&a.data, common.jobs)?;
    let rec = Recorder::start("infer", &(a.prior as u8, &model.config), common.seed, &[&a.data, &a.checkpoint])?;
    let dir = common.out.join(PREDICTIONS_DIR);
    fs::create_dir_all(&dir)?;
    let prior = PriorMode::from(a.prior);
    for range in trainer::batch_ranges(samples.len(), 8) {
        let chunk = &samples[range];
        let refs: Vec<&Sample> = chunk.iter().collect();
        for (s, inf) in chunk.iter().zip(trainer::infer_batch(&model, &refs, prior)?) {
            let mut images = inf.warped_images.clone();
            images.insert(Sequence::Lge, s.images[&Sequence::Lge].clone());
            let labels = BTreeMap::from([(Sequence::Lge, inf.labels.clone())]);
            let provenance = Provenance { source: format!("infer:{}", s.id), slice_indices: BTreeMap::new() };
            let slice = MultiSeqSlice::new(images, labels, s.spacing, Sequence::Lge, provenance)?;
            write_slice(&dir.join(&s.id), &SliceRecord { slice, displacements: inf.disp.clone() })?;
        }
    }
    rec.finish(&common.out, &[dir], json!({ "samples": samples.len(), "prior": format!("{prior:?}") }))?;
    Ok(())
}

fn reference_labels(r: &SliceRecord) -> Result<&LabelMask> {
    r.slice.labels.get(&Sequence::Lge).ok_or_else(|| Error::Schema(format!("{} has no LGE labels", r.slice.provenance.source)))
}

pub fn evaluate(common: &Common, a: &EvaluateArgs) -> Result<()> {
    let inputs: Vec<&Path> = [Some(a.data.as_path()), a.checkpoint.as_deref(), a.predictions.as_deref()].into_iter().flatten().collect();
    let rec = Recorder::start("evaluate", &(a.prior as u8), common.seed, &inputs)?;
    let report = match (&a.checkpoint, &a.predictions) {
        (Some(ck), _) => {
            let model = load_stage(ck, 2)?;
            trainer::evaluate(&model, &load_samples(&a.data, common.jobs)?, a.prior.into(), 8)?
        }
        (None, Some(pred_dir)) => {
            let preds: BTreeMap<String, SliceRecord> = dataset::load(pred_dir, common.jobs)?.into_iter().collect();
            let mut report = EvalReport::default();
            for s in load_samples(&a.data, common.jobs)? {
                let p = preds.get(&s.id).ok_or_else(|| Error::Config(format!("no prediction for {}", s.id)))?;
                let labels = reference_labels(p)?;
                let gold = &s.labels[&Sequence::Lge];
                let mut row = structure_metrics("myo", labels.myocardium().view(), gold.myocardium().view(), s.spacing)?;
                let (pm, gm) = (edema_union_for_eval(labels), edema_union_for_eval(&s.pathology));
                row.extend(structure_metrics("scar", pm.scar.view(), gm.scar.view(), s.spacing)?);
                row.extend(structure_metrics("edema", pm.edema.view(), gm.edema.view(), s.spacing)?);
                report.push(s.id.clone(), row)?;
            }
            report
        }
        (None, None) => return Err(Error::Config("evaluate needs --checkpoint or --predictions".into())),
    };
    fs::create_dir_all(&common.out)?;
    let (csv, js) = (common.out.join("eval.csv"), common.out.join("eval.json"));
    report.write_csv(fs::File::create(&csv)?)?;
    fs::write(&js, report.to_json()? + "\n")?;
    let means: BTreeMap<String, f64> = report.aggregates().into_iter().map(|(k, v)| (k, v.mean)).collect();
    rec.finish(&common.out, &[csv, js], json!({ "means": means }))?;
    Ok(())
}

fn quantify_labels(id: &str, method: &str, lab: &LabelMask) -> Result<QuantReport> {
    quantify_slice(
        id,
        method,
        lab.myocardium().view(),
        lab.binary(Class::LeftVentricle).view(),
        lab.binary(Class::Scar).view(),
        lab.any_of(&[Class::Scar, Class::Edema]).view(),
    )
}

pub fn quantify(common: &Common, a: &QuantifyArgs) -> Result<()> {
    let mut inputs = vec![a.data.as_path()];
    if let Some(p) = &a.predictions {
        inputs.push(p);
    }
    let rec = Recorder::start("quantify", &a.predictions.is_some(), common.seed, &inputs)?;
    let gold = dataset::load(&a.data, common.jobs)?;
    let preds: Option<BTreeMap<String, SliceRecord>> =
        a.predictions.as_ref().map(|p| dataset::load(p, common.jobs)).transpose()?.map(|v| v.into_iter().collect());
    let per_sample = par_map(&gold, common.jobs, |(id, r)| {
        let mut out = vec![quantify_labels(id, "gold", reference_labels(r)?)?];
        if let Some(preds) = &preds {
            let p = preds.get(id).ok_or_else(|| Error::Config(format!("no prediction for {id}")))?;
            match quantify_labels(id, "predicted", reference_labels(p)?) {
                Ok(q) => out.push(q),
                Err(e @ Error::Geometry(_)) => log::warn!("{id}: predicted myocardium not quantifiable: {e}"),
                Err(e) => return Err(e),
            }
        }
        Ok(out)
    })?;
    let reports: Vec<QuantReport> = per_sample.into_iter().flatten().collect();

    let plots = common.out.join("plots");
    fs::create_dir_all(&plots)?;
    for r in &reports {
        let svg = bullseye_svg(&format!("{} ({})", r.sample, r.method), &r.transmurality);
        fs::write(plots.join(format!("{}_{}.svg", r.sample, r.method)), svg)?;
    }
    let mut details = json!({ "reports": reports.len() });
    if preds.is_some() {
        let gold_size: BTreeMap<&str, f64> =
            reports.iter().filter(|r| r.method == "gold").map(|r| (r.sample.as_str(), r.scar_size_pct)).collect();
        let (x, y): (Vec<f64>, Vec<f64>) = reports
            .iter()
            .filter(|r| r.method == "predicted")
            .map(|r| (gold_size[r.sample.as_str()], r.scar_size_pct))
            .unzip();
        fs::write(plots.join("scar_size.svg"), scatter_svg("Scar size (%)", "gold", "predicted", &x, &y))?;
        details["scar_size_pearson_r"] = match pearson_r(&x, &y) {
            Ok(r) => json!(r),
            Err(e) => {
                log::warn!("correlation undefined: {e}");
                Value::Null
            }
        };
    }
    let csv = common.out.join("quant.csv");
    write_quant_csv(&reports, fs::File::create(&csv)?)?;
    rec.finish(&common.out, &[csv, plots], details)?;
    Ok(())
}
