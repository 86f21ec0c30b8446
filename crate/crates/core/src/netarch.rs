//! The joint network: three sequence encoders, two registration heads, three
//! anatomy decoders (the LGE one fusing warped bSSFP/T2 features), and a
//! prior-gated pathology U-Net.
//!
//! All tensors are NCHW `f32`. Displacements are `[N, 2n]` in pixels of the
//! full-resolution frame, control point `k` at columns `2k` (row) and `2k+1`
//! (column).

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use umyops_tensor::{kaiming_normal, Graph, ParamStore, Tensor, Var};

use crate::datapipe::Sequence;
use crate::error::{Error, Result};
use crate::tps::{make_control_grid, ControlGrid, TpsBasis, CANONICAL_EXTENT};

pub const ARCH_SCHEMA: &str = "umyops-arch/1";

/// Parameter groups trained in stage 1.
pub const STAGE1_GROUPS: [&str; 8] =
    ["enc_bssfp", "enc_lge", "enc_t2", "reg_bssfp", "reg_t2", "dec_bssfp", "dec_lge", "dec_t2"];
/// Parameter groups trained in stage 2.
pub const STAGE2_GROUPS: [&str; 2] = ["enc_mp", "dec_mp"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub schema: String,
    /// Square input size.
    pub size: usize,
    /// Encoder widths per level for the sequence encoders.
    pub channels: Vec<usize>,
    /// Encoder widths per level for the pathology U-Net.
    pub path_channels: Vec<usize>,
    pub grid_m: usize,
    pub head_hidden: usize,
    /// Spatial size the deepest features are average-pooled to before the
    /// registration head's dense layers.
    pub head_pool: usize,
    /// Displacement in pixels per unit of head output.
    pub disp_scale: f32,
    pub init_seed: u64,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            schema: ARCH_SCHEMA.into(),
            size: 64,
            channels: vec![16, 32, 64, 128],
            path_channels: vec![16, 32, 64, 128],
            grid_m: 4,
            head_hidden: 64,
            head_pool: 4,
            disp_scale: 1.0,
            init_seed: 0,
        }
    }
}

impl ArchConfig {
    pub fn levels(&self) -> usize {
        self.channels.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema != ARCH_SCHEMA {
            return Err(Error::Schema(format!("architecture schema `{}`, expected `{ARCH_SCHEMA}`", self.schema)));
        }
        for (name, ch) in [("channels", &self.channels), ("path_channels", &self.path_channels)] {
            if ch.len() < 2 || ch.contains(&0) {
                return Err(Error::Config(format!("{name} needs at least two non-zero levels")));
            }
            let f = 1 << (ch.len() - 1);
            if self.size % f != 0 {
                return Err(Error::Config(format!("size {} not divisible by {f} for {name}", self.size)));
            }
        }
        let deep = self.size >> (self.levels() - 1);
        if self.head_pool == 0 || deep % self.head_pool != 0 {
            return Err(Error::Config(format!("head_pool {} does not divide deepest size {deep}", self.head_pool)));
        }
        if self.grid_m < 2 || self.head_hidden == 0 || !(self.disp_scale > 0.0) {
            return Err(Error::Config("grid_m >= 2, head_hidden > 0 and disp_scale > 0 required".into()));
        }
        Ok(())
    }

    pub fn num_points(&self) -> usize {
        self.grid_m * self.grid_m
    }
}

fn enc_name(seq: Sequence) -> &'static str {
    match seq {
        Sequence::Bssfp => "enc_bssfp",
        Sequence::Lge => "enc_lge",
        Sequence::T2 => "enc_t2",
    }
}

fn dec_name(seq: Sequence) -> &'static str {
    match seq {
        Sequence::Bssfp => "dec_bssfp",
        Sequence::Lge => "dec_lge",
        Sequence::T2 => "dec_t2",
    }
}

fn reg_name(seq: Sequence) -> Result<&'static str> {
    match seq {
        Sequence::Bssfp => Ok("reg_bssfp"),
        Sequence::T2 => Ok("reg_t2"),
        Sequence::Lge => Err(Error::Shape("the reference sequence has no registration head".into())),
    }
}

/// Pixel-unit TPS basis for one pyramid level, stored as `f32`.
struct LevelBasis {
    h: usize,
    w: usize,
    weights: Vec<f32>,
}

/// Parameters plus the fixed TPS machinery derived from the config.
#[derive(Clone)]
pub struct Model {
    pub config: ArchConfig,
    pub params: ParamStore,
    grid: ControlGrid,
    bases: Vec<Arc<LevelBasis>>,
}

impl std::fmt::Debug for Model {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Model").field("config", &self.config).field("params", &self.params.len()).finish()
    }
}

impl Model {
    /// Fresh parameters from `config.init_seed`: He-normal weights, zero
    /// biases. The last registration layer starts at zero, so an untrained
    /// model predicts the identity warp.
    pub fn new(config: ArchConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let mut store = ParamStore::new();
        for (name, shape) in shape_table(&config) {
            let t = if name.ends_with(".b") || name.ends_with("fc2.w") {
                Tensor::zeros(&shape)
            } else {
                let fan_in = if shape.len() == 4 { shape[1] * shape[2] * shape[3] } else { shape[0] };
                kaiming_normal(&shape, fan_in, &mut rng)
            };
            store.insert(&name, t);
        }
        Self::with_params(config, store)
    }

    /// Wraps existing parameters, checking that exactly the expected arrays
    /// are present with the right shapes.
    pub fn with_params(config: ArchConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        let table = shape_table(&config);
        for (name, shape) in &table {
            let got = params
                .tensor(name)
                .map_err(|_| Error::Schema(format!("checkpoint lacks parameter `{name}`")))?;
            if got.shape() != shape.as_slice() {
                return Err(Error::Schema(format!("parameter `{name}` has shape {:?}, expected {shape:?}", got.shape())));
            }
        }
        if table.len() != params.len() {
            return Err(Error::Schema(format!(
                "checkpoint has {} parameters, architecture expects {}",
                params.len(),
                table.len()
            )));
        }
        let grid = make_control_grid(config.grid_m, CANONICAL_EXTENT)?;
        let mut bases = Vec::new();
        for l in 0..config.levels() {
            let s = config.size >> l;
            let b = TpsBasis::new(&grid, s, s)?;
            bases.push(Arc::new(LevelBasis { h: s, w: s, weights: b.weights().iter().map(|&v| v as f32).collect() }));
        }
        Ok(Self { config, params, grid, bases })
    }

    pub fn grid(&self) -> &ControlGrid {
        &self.grid
    }

    /// Freezes or unfreezes every parameter of a group; returns how many
    /// arrays were affected.
    pub fn set_group_frozen(&mut self, group: &str, frozen: bool) -> usize {
        self.params.set_frozen_prefix(&format!("{group}."), frozen)
    }

    pub fn freeze_stage1(&mut self) {
        for g in STAGE1_GROUPS {
            self.set_group_frozen(g, true);
        }
    }

    /// Names of groups whose parameters are all frozen.
    pub fn frozen_groups(&self) -> Vec<String> {
        STAGE1_GROUPS
            .iter()
            .chain(STAGE2_GROUPS.iter())
            .filter(|g| {
                let prefix = format!("{g}.");
                let mut it = self.params.iter().filter(|p| p.name.starts_with(&prefix)).peekable();
                it.peek().is_some() && it.all(|p| p.frozen)
            })
            .map(|g| g.to_string())
            .collect()
    }

    fn basis_for(&self, h: usize, w: usize) -> Result<Arc<LevelBasis>> {
        self.bases
            .iter()
            .find(|b| b.h == h && b.w == w)
            .cloned()
            .ok_or_else(|| Error::Shape(format!("no pyramid level of size {h}x{w}")))
    }
}

/// Shapes of every parameter for a config, in insertion order.
fn shape_table(config: &ArchConfig) -> Vec<(String, Vec<usize>)> {
    let mut out = Vec::new();
    let conv = |out: &mut Vec<(String, Vec<usize>)>, name: String, ci: usize, co: usize, k: usize| {
        out.push((format!("{name}.w"), vec![co, ci, k, k]));
        out.push((format!("{name}.b"), vec![co]));
    };
    let ch = &config.channels;
    let levels = ch.len();
    for seq in Sequence::ALL {
        for l in 0..levels {
            let ci = if l == 0 { 1 } else { ch[l - 1] };
            conv(&mut out, format!("{}.l{l}.c1", enc_name(seq)), ci, ch[l], 3);
            conv(&mut out, format!("{}.l{l}.c2", enc_name(seq)), ch[l], ch[l], 3);
        }
    }
    let deep = ch[levels - 1];
    let n2 = 2 * config.num_points();
    for r in ["reg_bssfp", "reg_t2"] {
        conv(&mut out, format!("{r}.conv"), 2 * deep, deep, 3);
        let fin = deep * config.head_pool * config.head_pool;
        out.push((format!("{r}.fc1.w"), vec![fin, config.head_hidden]));
        out.push((format!("{r}.fc1.b"), vec![config.head_hidden]));
        out.push((format!("{r}.fc2.w"), vec![config.head_hidden, n2]));
        out.push((format!("{r}.fc2.b"), vec![n2]));
    }
    for seq in Sequence::ALL {
        for l in (0..levels - 1).rev() {
            let skip = if seq == Sequence::Lge { 3 * ch[l] } else { ch[l] };
            conv(&mut out, format!("{}.l{l}.c1", dec_name(seq)), ch[l + 1] + skip, ch[l], 3);
            conv(&mut out, format!("{}.l{l}.c2", dec_name(seq)), ch[l], ch[l], 3);
        }
        conv(&mut out, format!("{}.out", dec_name(seq)), ch[0], 1, 1);
    }
    let pc = &config.path_channels;
    for l in 0..pc.len() {
        let ci = if l == 0 { 3 } else { pc[l - 1] };
        conv(&mut out, format!("enc_mp.l{l}.c1"), ci, pc[l], 3);
        conv(&mut out, format!("enc_mp.l{l}.c2"), pc[l], pc[l], 3);
    }
    for l in (0..pc.len() - 1).rev() {
        conv(&mut out, format!("dec_mp.l{l}.proj"), pc[l + 1], pc[l], 1);
        conv(&mut out, format!("dec_mp.l{l}.c1"), 2 * pc[l], pc[l], 3);
        conv(&mut out, format!("dec_mp.l{l}.c2"), pc[l], pc[l], 3);
    }
    conv(&mut out, "dec_mp.out".into(), pc[0], 3, 1);
    out
}

fn conv<'g>(g: &'g Graph, m: &Model, name: &str, x: Var<'g>, pad: usize) -> Result<Var<'g>> {
    let w = g.param(&m.params, &format!("{name}.w"))?;
    let b = g.param(&m.params, &format!("{name}.b"))?;
    Ok(x.conv2d(w, b, pad)?)
}

fn block<'g>(g: &'g Graph, m: &Model, name: &str, x: Var<'g>) -> Result<Var<'g>> {
    let y = conv(g, m, &format!("{name}.c1"), x, 1)?.relu();
    Ok(conv(g, m, &format!("{name}.c2"), y, 1)?.relu())
}

fn dims(v: Var<'_>) -> Result<(usize, usize, usize, usize)> {
    Ok(v.value().dims4()?)
}

/// Encoder features per level, finest first.
pub fn encode<'g>(g: &'g Graph, m: &Model, seq: Sequence, image: Var<'g>) -> Result<Vec<Var<'g>>> {
    encode_with(g, m, enc_name(seq), image, m.config.levels())
}

fn encode_with<'g>(g: &'g Graph, m: &Model, prefix: &str, image: Var<'g>, levels: usize) -> Result<Vec<Var<'g>>> {
    let mut feats = Vec::with_capacity(levels);
    let mut x = image;
    for l in 0..levels {
        if l > 0 {
            x = x.max_pool2()?;
        }
        x = block(g, m, &format!("{prefix}.l{l}"), x)?;
        feats.push(x);
    }
    Ok(feats)
}

/// Registration head: moving and reference deepest features to `[N, 2n]`
/// pixel displacements.
pub fn register<'g>(g: &'g Graph, m: &Model, seq: Sequence, deep_moving: Var<'g>, deep_ref: Var<'g>) -> Result<Var<'g>> {
    let r = reg_name(seq)?;
    let x = g.concat_channels(&[deep_moving, deep_ref])?;
    let x = conv(g, m, &format!("{r}.conv"), x, 1)?.relu();
    let (n, c, h, _) = dims(x)?;
    let x = x.avg_pool(h / m.config.head_pool)?;
    let p = m.config.head_pool;
    let x = x.reshape(&[n, c * p * p])?;
    let x = x
        .linear(g.param(&m.params, &format!("{r}.fc1.w"))?, g.param(&m.params, &format!("{r}.fc1.b"))?)?
        .relu();
    let d = x.linear(g.param(&m.params, &format!("{r}.fc2.w"))?, g.param(&m.params, &format!("{r}.fc2.b"))?)?;
    Ok(d.scale(m.config.disp_scale))
}

/// Sampling coordinates `[N, h*w, 2]` for an `h×w` level from full-frame
/// displacements `[N, 2n]`: pixel position plus `B·δ·(h/H)`.
pub fn tps_coords<'g>(m: &Model, disp: Var<'g>, h: usize, w: usize) -> Result<Var<'g>> {
    let basis = m.basis_for(h, w)?;
    let np = m.config.num_points();
    let (n, k) = disp.value().dims2()?;
    if k != 2 * np {
        return Err(Error::Shape(format!("displacements have {k} columns, expected {}", 2 * np)));
    }
    let (sr, sc) = (h as f32 / m.config.size as f32, w as f32 / m.config.size as f32);
    let dv = disp.value();
    let hw = h * w;
    let mut out = Vec::with_capacity(n * hw * 2);
    for b in 0..n {
        let d = &dv.data()[b * k..(b + 1) * k];
        for p in 0..hw {
            let row = &basis.weights[p * np..(p + 1) * np];
            let (mut ar, mut ac) = (0.0f32, 0.0f32);
            for (j, &wj) in row.iter().enumerate() {
                ar += wj * d[2 * j];
                ac += wj * d[2 * j + 1];
            }
            out.push((p / w) as f32 + sr * ar);
            out.push((p % w) as f32 + sc * ac);
        }
    }
    let value = Tensor::new(&[n, hw, 2], out)?;
    Ok(disp.graph().custom(&[disp], value, move |gout, _, _| {
        let mut gd = vec![0.0f32; n * k];
        for b in 0..n {
            let go = &gout.data()[b * hw * 2..(b + 1) * hw * 2];
            let acc = &mut gd[b * k..(b + 1) * k];
            for p in 0..hw {
                let (gr, gc) = (go[2 * p] * sr, go[2 * p + 1] * sc);
                if gr == 0.0 && gc == 0.0 {
                    continue;
                }
                let row = &basis.weights[p * np..(p + 1) * np];
                for (j, &wj) in row.iter().enumerate() {
                    acc[2 * j] += wj * gr;
                    acc[2 * j + 1] += wj * gc;
                }
            }
        }
        vec![Some(Tensor::new(&[n, k], gd).expect("sizes agree"))]
    }))
}

/// Bilinearly warps every channel of `x` with full-frame displacements.
pub fn warp_features<'g>(m: &Model, x: Var<'g>, disp: Var<'g>) -> Result<Var<'g>> {
    let (_, _, h, w) = dims(x)?;
    let coords = tps_coords(m, disp, h, w)?;
    Ok(x.grid_sample(coords, h, w)?)
}

/// Misalignment-aware fusion: warps the bSSFP and T2 features with their
/// displacements rescaled to this level, then concatenates
/// `[F_in, warped F_bssfp, warped F_t2, F_lge]`.
pub fn msf_fuse<'g>(
    m: &Model,
    f_in: Var<'g>,
    f_bssfp: Var<'g>,
    f_t2: Var<'g>,
    f_lge: Var<'g>,
    disp: &BTreeMap<Sequence, Var<'g>>,
) -> Result<Var<'g>> {
    let (n, _, h, w) = dims(f_lge)?;
    for (name, v) in [("F_in", f_in), ("F_bssfp", f_bssfp), ("F_t2", f_t2)] {
        let (vn, _, vh, vw) = dims(v)?;
        if (vn, vh, vw) != (n, h, w) {
            return Err(Error::Shape(format!("{name} is {vn}x{vh}x{vw}, F_lge is {n}x{h}x{w}")));
        }
    }
    let get = |s: Sequence| disp.get(&s).copied().ok_or_else(|| Error::Shape(format!("no {s} displacements")));
    let wb = warp_features(m, f_bssfp, get(Sequence::Bssfp)?)?;
    let wt = warp_features(m, f_t2, get(Sequence::T2)?)?;
    let out = f_lge.graph().concat_channels(&[f_in, wb, wt, f_lge])?;
    let expected: usize = [f_in, f_bssfp, f_t2, f_lge].iter().map(|v| v.shape()[1]).sum();
    assert_eq!(out.shape()[1], expected, "fusion channel bookkeeping");
    Ok(out)
}

/// Spatial prior gate. `A = σ((F_in + F_mp) ⊙ prior↓)`; returns
/// `concat(F_mp ⊙ A, F_in)` and the attention map.
pub fn spg_gate<'g>(f_in: Var<'g>, f_mp: Var<'g>, prior: Var<'g>) -> Result<(Var<'g>, Var<'g>)> {
    let (n, c, h, w) = dims(f_mp)?;
    if dims(f_in)? != (n, c, h, w) {
        return Err(Error::Shape(format!("F_in {:?} vs F_mp {:?}", f_in.shape(), f_mp.shape())));
    }
    let (pn, pc, ph, pw) = dims(prior)?;
    if pn != n || pc != 1 {
        return Err(Error::Shape(format!("prior {:?} for features {:?}", prior.shape(), f_mp.shape())));
    }
    let p = if (ph, pw) == (h, w) { prior } else { prior.resize_bilinear(h, w)? };
    let att = f_in.add(f_mp)?.mul_channel_map(p)?.sigmoid();
    let gated = f_mp.mul(att)?;
    let out = f_mp.graph().concat_channels(&[gated, f_in])?;
    assert_eq!(out.shape()[1], 2 * c, "gate channel bookkeeping");
    Ok((out, att))
}

fn decode_plain<'g>(g: &'g Graph, m: &Model, seq: Sequence, feats: &[Var<'g>]) -> Result<Var<'g>> {
    let d = dec_name(seq);
    let mut x = *feats.last().ok_or_else(|| Error::Shape("no features".into()))?;
    for l in (0..feats.len() - 1).rev() {
        let up = x.upsample2()?;
        x = block(g, m, &format!("{d}.l{l}"), g.concat_channels(&[up, feats[l]])?)?;
    }
    conv(g, m, &format!("{d}.out"), x, 0)
}

fn decode_lge<'g>(
    g: &'g Graph,
    m: &Model,
    feats: &BTreeMap<Sequence, Vec<Var<'g>>>,
    disp: &BTreeMap<Sequence, Var<'g>>,
) -> Result<Var<'g>> {
    let lge = &feats[&Sequence::Lge];
    let mut x = *lge.last().ok_or_else(|| Error::Shape("no features".into()))?;
    for l in (0..lge.len() - 1).rev() {
        let up = x.upsample2()?;
        let fused = msf_fuse(m, up, feats[&Sequence::Bssfp][l], feats[&Sequence::T2][l], lge[l], disp)?;
        x = block(g, m, &format!("dec_lge.l{l}"), fused)?;
    }
    conv(g, m, "dec_lge.out", x, 0)
}

/// Everything stage 1 produces for a batch.
pub struct AnatomyOutputs<'g> {
    /// `[N, 2n]` displacements per moving sequence.
    pub disp: BTreeMap<Sequence, Var<'g>>,
    /// Myocardium probabilities `[N, 1, H, W]` per sequence, each in its own
    /// frame.
    pub myo_prob: BTreeMap<Sequence, Var<'g>>,
}

/// Registration followed by myocardium extraction. `images` holds one
/// `[N, 1, H, W]` tensor per sequence.
pub fn forward_anatomy<'g>(
    g: &'g Graph,
    m: &Model,
    images: &BTreeMap<Sequence, Var<'g>>,
) -> Result<AnatomyOutputs<'g>> {
    let mut feats = BTreeMap::new();
    for seq in Sequence::ALL {
        let img = images.get(&seq).ok_or_else(|| Error::Shape(format!("no {seq} input")))?;
        let (_, c, h, w) = dims(*img)?;
        if (c, h, w) != (1, m.config.size, m.config.size) {
            return Err(Error::Shape(format!("{seq} input {:?}, expected 1x{s}x{s}", img.shape(), s = m.config.size)));
        }
        feats.insert(seq, encode(g, m, seq, *img)?);
    }
    let deep_ref = *feats[&Sequence::Lge].last().expect("levels >= 2");
    let mut disp = BTreeMap::new();
    for seq in Sequence::MOVING {
        let d = register(g, m, seq, *feats[&seq].last().expect("levels >= 2"), deep_ref)?;
        check_finite(d, &format!("{seq} displacements"))?;
        disp.insert(seq, d);
    }
    let mut myo_prob = BTreeMap::new();
    for seq in Sequence::MOVING {
        myo_prob.insert(seq, decode_plain(g, m, seq, &feats[&seq])?.sigmoid());
    }
    myo_prob.insert(Sequence::Lge, decode_lge(g, m, &feats, &disp)?.sigmoid());
    for (seq, p) in &myo_prob {
        check_finite(*p, &format!("{seq} myocardium probabilities"))?;
    }
    Ok(AnatomyOutputs { disp, myo_prob })
}

/// Pathology logits `[N, 3, H, W]` over (BG, EDEMA, SCAR) from the aligned
/// image stack `[N, 3, H, W]` and the reference-frame myocardium prior.
pub fn forward_pathology<'g>(g: &'g Graph, m: &Model, aligned: Var<'g>, prior: Var<'g>) -> Result<Var<'g>> {
    let (n, c, h, w) = dims(aligned)?;
    if c != 3 || (h, w) != (m.config.size, m.config.size) {
        return Err(Error::Shape(format!("aligned stack {:?}, expected Nx3x{s}x{s}", aligned.shape(), s = m.config.size)));
    }
    if dims(prior)? != (n, 1, h, w) {
        return Err(Error::Shape(format!("prior {:?} does not match stack {:?}", prior.shape(), aligned.shape())));
    }
    let levels = m.config.path_channels.len();
    let feats = encode_with(g, m, "enc_mp", aligned, levels)?;
    let mut x = feats[levels - 1];
    for l in (0..levels - 1).rev() {
        let f_in = conv(g, m, &format!("dec_mp.l{l}.proj"), x.upsample2()?, 0)?;
        let (gated, _) = spg_gate(f_in, feats[l], prior)?;
        x = block(g, m, &format!("dec_mp.l{l}"), gated)?;
    }
    let logits = conv(g, m, "dec_mp.out", x, 0)?;
    check_finite(logits, "pathology logits")?;
    Ok(logits)
}

fn check_finite(v: Var<'_>, what: &str) -> Result<()> {
    let t = v.value();
    if !t.is_finite() {
        let bad = t.data().iter().filter(|x| !x.is_finite()).count();
        return Err(Error::Numeric(format!("{what}: {bad} of {} values are not finite", t.numel())));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ArchConfig {
        ArchConfig { size: 32, channels: vec![4, 8, 8], path_channels: vec![4, 8], head_pool: 2, head_hidden: 8, ..Default::default() }
    }

    #[test]
    fn untrained_model_predicts_identity() {
        let m = Model::new(small()).unwrap();
        let g = Graph::new();
        let imgs: BTreeMap<_, _> =
            Sequence::ALL.iter().map(|&s| (s, g.constant(Tensor::full(&[2, 1, 32, 32], 0.3)))).collect();
        let out = forward_anatomy(&g, &m, &imgs).unwrap();
        for d in out.disp.values() {
            assert!(d.value().data().iter().all(|&v| v == 0.0));
        }
        for p in out.myo_prob.values() {
            assert!(p.value().data().iter().all(|&v| v > 0.0 && v < 1.0));
        }
    }

    #[test]
    fn params_round_trip_through_with_params() {
        let m = Model::new(small()).unwrap();
        let again = Model::with_params(m.config.clone(), m.params.clone()).unwrap();
        assert_eq!(again.params.len(), m.params.len());
        let mut broken = m.params.clone();
        broken.insert("dec_mp.out.b", Tensor::zeros(&[4]));
        assert!(matches!(Model::with_params(m.config.clone(), broken), Err(Error::Schema(_))));
    }

    #[test]
    fn freezing_groups() {
        let mut m = Model::new(small()).unwrap();
        m.freeze_stage1();
        let frozen = m.frozen_groups();
        assert_eq!(frozen.len(), STAGE1_GROUPS.len());
        assert!(!frozen.iter().any(|g| g.starts_with("enc_mp") || g.starts_with("dec_mp")));
    }
}
