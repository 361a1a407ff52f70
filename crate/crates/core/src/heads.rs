//! Classification, regression and localization branches and their
//! per-level fusion.
//!
//! Parameter names per level `m`:
//! `{cls,reg}.l{m}.conv{1,2}.{weight,bias}`,
//! `loc.l{m}.gc.{mask.weight, fc1.*, ln.gain, ln.bias, fc2.*}`,
//! `loc.l{m}.aspp.{d0,d1,..,out}.{weight,bias}`.

use serde::{Deserialize, Serialize};

use crate::backbone::{conv_bias, split_var, FeaturePyramid, PyramidVars, TEMPLATE_FEAT};
use crate::error::{invalid, mismatch, Result};
use crate::numerics::{ConvGeom, Tape, Tensor, Var};
use crate::params::{Binder, Init, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    Cls,
    Reg,
    Loc,
}

impl Branch {
    pub const ALL: [Branch; 3] = [Branch::Cls, Branch::Reg, Branch::Loc];

    pub fn name(self) -> &'static str {
        match self {
            Branch::Cls => "cls",
            Branch::Reg => "reg",
            Branch::Loc => "loc",
        }
    }

    /// Output channels of the branch for `k` anchors per cell.
    pub fn channels(self, k: usize) -> usize {
        match self {
            Branch::Cls => 2 * k,
            Branch::Reg => 4 * k,
            Branch::Loc => 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeadConfig {
    /// Bottleneck ratio of the global context transform.
    pub gc_ratio: usize,
    pub aspp_rates: Vec<usize>,
    pub ln_eps: f64,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            gc_ratio: 4,
            aspp_rates: vec![2, 4],
            ln_eps: 1e-5,
        }
    }
}

impl HeadConfig {
    pub fn validate(&self, channels: usize) -> Result<()> {
        if self.gc_ratio == 0 || channels % self.gc_ratio != 0 {
            return Err(invalid(
                "head_config",
                format!("{channels} channels not divisible by bottleneck ratio {}", self.gc_ratio),
            ));
        }
        if self.aspp_rates.is_empty() || self.aspp_rates.contains(&0) {
            return Err(invalid("head_config", "atrous rates must be positive"));
        }
        Ok(())
    }
}

/// The fused branch maps.
#[derive(Debug, Clone, PartialEq)]
pub struct BranchOutputs {
    pub cls: Tensor,
    pub reg: Tensor,
    pub loc: Tensor,
}

/// Tape handles of the fused maps, indexed like [`Branch::ALL`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OutputVars {
    pub cls: Var,
    pub reg: Var,
    pub loc: Var,
}

impl OutputVars {
    pub fn get(&self, b: Branch) -> Var {
        match b {
            Branch::Cls => self.cls,
            Branch::Reg => self.reg,
            Branch::Loc => self.loc,
        }
    }

    pub fn values(&self, tape: &Tape) -> BranchOutputs {
        BranchOutputs {
            cls: tape.value(self.cls).clone(),
            reg: tape.value(self.reg).clone(),
            loc: tape.value(self.loc).clone(),
        }
    }
}

fn fan_in(n: usize) -> Init {
    Init::FanIn { fan_in: n, gain: 1.0 }
}

fn init_conv(store: &mut ParamStore, seed: u64, prefix: &str, shape: [usize; 4], gain: f64) {
    let fan = shape[1] * shape[2] * shape[3];
    store.init(seed, &format!("{prefix}.weight"), &shape, Init::FanIn { fan_in: fan, gain });
    store.init(seed, &format!("{prefix}.bias"), &[shape[0]], Init::Zeros);
}

/// Seeds all head parameters for `levels` levels of `channels` features.
pub fn init_heads(
    store: &mut ParamStore,
    cfg: &HeadConfig,
    channels: usize,
    k: usize,
    levels: usize,
    seed: u64,
) -> Result<()> {
    cfg.validate(channels)?;
    let c = channels;
    for m in 0..levels {
        for b in [Branch::Cls, Branch::Reg] {
            let p = format!("{}.l{m}", b.name());
            init_conv(store, seed, &format!("{p}.conv1"), [c, c, 1, 1], 1.0);
            init_conv(store, seed, &format!("{p}.conv2"), [b.channels(k), c, 1, 1], 0.1);
        }
        let p = format!("loc.l{m}");
        let hidden = c / cfg.gc_ratio;
        store.init(seed, &format!("{p}.gc.mask.weight"), &[1, c, 1, 1], fan_in(c));
        store.init(seed, &format!("{p}.gc.fc1.weight"), &[hidden, c], fan_in(c));
        store.init(seed, &format!("{p}.gc.fc1.bias"), &[hidden], Init::Zeros);
        store.init(seed, &format!("{p}.gc.ln.gain"), &[hidden], Init::Constant(1.0));
        store.init(seed, &format!("{p}.gc.ln.bias"), &[hidden], Init::Zeros);
        // zero tail: the block starts as the identity
        store.init(seed, &format!("{p}.gc.fc2.weight"), &[c, hidden], Init::Zeros);
        store.init(seed, &format!("{p}.gc.fc2.bias"), &[c], Init::Zeros);
        for d in 0..cfg.aspp_rates.len() {
            init_conv(store, seed, &format!("{p}.aspp.d{d}"), [c, c, 3, 3], 1.0);
        }
        let cat = c * cfg.aspp_rates.len();
        init_conv(store, seed, &format!("{p}.aspp.out"), [2, cat, 1, 1], 0.1);
    }
    Ok(())
}

const POINTWISE: ConvGeom = ConvGeom::new(1, 1, 0);

fn check_pair(tape: &Tape, t: Var, d: Var, op: &'static str) -> Result<()> {
    let (ts, ds) = (tape.shape(t), tape.shape(d));
    if ts.len() != 3 || ds.len() != 3 || ts[0] != ds[0] {
        return Err(mismatch(op, format!("template {ts:?} vs detection {ds:?}")));
    }
    Ok(())
}

/// Depth-wise correlation followed by the two 1x1 convs of a cls/reg level.
pub fn corr_level_var(
    tape: &mut Tape,
    binder: &mut Binder,
    t: Var,
    d: Var,
    branch: Branch,
    level: usize,
) -> Result<Var> {
    let op = match branch {
        Branch::Reg => "reg_level",
        _ => "cls_level",
    };
    check_pair(tape, t, d, op)?;
    let p = format!("{}.l{level}", branch.name());
    let f = tape.xcorr_depthwise(d, t)?;
    let h = conv_bias(tape, binder, f, &format!("{p}.conv1"), POINTWISE)?;
    let h = tape.relu(h)?;
    conv_bias(tape, binder, h, &format!("{p}.conv2"), POINTWISE)
}

/// Template resized to the detection grid, times the detection features.
pub fn loc_correlation_var(tape: &mut Tape, t: Var, d: Var) -> Result<Var> {
    check_pair(tape, t, d, "loc_correlation")?;
    let (h, w) = (tape.shape(d)[1], tape.shape(d)[2]);
    let r = tape.resize_bilinear(t, h, w)?;
    tape.mul(r, d)
}

pub fn global_context_var(
    tape: &mut Tape,
    binder: &mut Binder,
    x: Var,
    prefix: &str,
    ln_eps: f64,
) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    if shape.len() != 3 {
        return Err(mismatch("global_context", format!("expected [C,H,W], got {shape:?}")));
    }
    let mask_w = binder.var(tape, &format!("{prefix}.mask.weight"))?;
    let logits = tape.conv2d(x, mask_w, POINTWISE)?;
    let logits = tape.reshape(logits, &[shape[1] * shape[2]])?;
    let weights = tape.softmax(logits, 0)?;
    let context = tape.spatial_pool(x, weights)?;

    let w1 = binder.var(tape, &format!("{prefix}.fc1.weight"))?;
    let b1 = binder.var(tape, &format!("{prefix}.fc1.bias"))?;
    let h = tape.linear(context, w1, b1)?;
    let h = tape.layer_norm(h, ln_eps)?;
    let gain = binder.var(tape, &format!("{prefix}.ln.gain"))?;
    let shift = binder.var(tape, &format!("{prefix}.ln.bias"))?;
    let h = tape.mul(h, gain)?;
    let h = tape.add(h, shift)?;
    let h = tape.relu(h)?;
    let w2 = binder.var(tape, &format!("{prefix}.fc2.weight"))?;
    let b2 = binder.var(tape, &format!("{prefix}.fc2.bias"))?;
    let t = tape.linear(h, w2, b2)?;
    tape.add_bias(x, t)
}

pub fn aspp_var(tape: &mut Tape, binder: &mut Binder, x: Var, prefix: &str, rates: &[usize]) -> Result<Var> {
    let mut parts = Vec::with_capacity(rates.len());
    for (d, &rate) in rates.iter().enumerate() {
        let y = conv_bias(tape, binder, x, &format!("{prefix}.d{d}"), ConvGeom::same(3, rate))?;
        parts.push(tape.relu(y)?);
    }
    let cat = tape.concat(&parts)?;
    conv_bias(tape, binder, cat, &format!("{prefix}.out"), POINTWISE)
}

/// Localization map of one level, cropped to the correlation response size.
pub fn loc_level_var(
    tape: &mut Tape,
    binder: &mut Binder,
    t: Var,
    d: Var,
    level: usize,
    cfg: &HeadConfig,
) -> Result<Var> {
    let p = format!("loc.l{level}");
    let x = loc_correlation_var(tape, t, d)?;
    let x = global_context_var(tape, binder, x, &format!("{p}.gc"), cfg.ln_eps)?;
    let y = aspp_var(tape, binder, x, &format!("{p}.aspp"), &cfg.aspp_rates)?;
    let (h, w) = (tape.shape(d)[1], tape.shape(d)[2]);
    let th = tape.shape(t)[1];
    let tw = tape.shape(t)[2];
    if h < th || w < tw {
        return Err(mismatch("loc_level", format!("detection {h}x{w} smaller than template")));
    }
    tape.crop_center(y, h + 1 - th, w + 1 - tw)
}

/// Per-level maps of one branch, starting from shared pyramid features.
pub fn level_maps_var(
    tape: &mut Tape,
    binder: &mut Binder,
    pyr: &PyramidVars,
    branch: Branch,
    cfg: &HeadConfig,
) -> Result<Vec<Var>> {
    pyr.iter()
        .enumerate()
        .map(|(m, &(t, d))| {
            let ts = split_var(tape, binder, t, branch, m)?;
            let ds = split_var(tape, binder, d, branch, m)?;
            match branch {
                Branch::Loc => loc_level_var(tape, binder, ts, ds, m, cfg),
                _ => corr_level_var(tape, binder, ts, ds, branch, m),
            }
        })
        .collect()
}

/// `sum_m gamma[m] * maps[m]`.
pub fn fuse_levels(tape: &mut Tape, maps: &[Var], gamma: Var) -> Result<Var> {
    if maps.is_empty() || tape.value(gamma).numel() != maps.len() {
        return Err(mismatch(
            "forward_heads",
            format!("{} weights for {} levels", tape.value(gamma).numel(), maps.len()),
        ));
    }
    let mut acc: Option<Var> = None;
    for (m, &map) in maps.iter().enumerate() {
        let g = tape.select(gamma, m)?;
        let term = tape.scale_by(map, g)?;
        acc = Some(match acc {
            None => term,
            Some(a) => tape.add(a, term)?,
        });
    }
    Ok(acc.expect("non-empty"))
}

/// Fused outputs of all three branches given per-branch level weights.
pub fn forward_heads_var(
    tape: &mut Tape,
    binder: &mut Binder,
    pyr: &PyramidVars,
    gammas: [Var; 3],
    cfg: &HeadConfig,
) -> Result<OutputVars> {
    let mut out = [None; 3];
    for (i, b) in Branch::ALL.into_iter().enumerate() {
        let maps = level_maps_var(tape, binder, pyr, b, cfg)?;
        out[i] = Some(fuse_levels(tape, &maps, gammas[i])?);
    }
    Ok(OutputVars {
        cls: out[0].unwrap(),
        reg: out[1].unwrap(),
        loc: out[2].unwrap(),
    })
}

fn pyramid_constants(tape: &mut Tape, pyr: &FeaturePyramid) -> PyramidVars {
    pyr.levels
        .iter()
        .map(|l| (tape.constant(l.template.clone()), tape.constant(l.detection.clone())))
        .collect()
}

pub fn cls_level(t_feat: &Tensor, d_feat: &Tensor, level: usize, params: &ParamStore) -> Result<Tensor> {
    eval_pair(t_feat, d_feat, params, |tape, b, t, d| corr_level_var(tape, b, t, d, Branch::Cls, level))
}

pub fn reg_level(t_feat: &Tensor, d_feat: &Tensor, level: usize, params: &ParamStore) -> Result<Tensor> {
    eval_pair(t_feat, d_feat, params, |tape, b, t, d| corr_level_var(tape, b, t, d, Branch::Reg, level))
}

pub fn loc_correlation(t_feat: &Tensor, d_feat: &Tensor) -> Result<Tensor> {
    eval_pair(t_feat, d_feat, &ParamStore::new(), |tape, _, t, d| loc_correlation_var(tape, t, d))
}

pub fn global_context(x: &Tensor, level: usize, params: &ParamStore, cfg: &HeadConfig) -> Result<Tensor> {
    eval_one(x, params, |tape, b, v| {
        global_context_var(tape, b, v, &format!("loc.l{level}.gc"), cfg.ln_eps)
    })
}

pub fn aspp(x: &Tensor, level: usize, params: &ParamStore, cfg: &HeadConfig) -> Result<Tensor> {
    eval_one(x, params, |tape, b, v| aspp_var(tape, b, v, &format!("loc.l{level}.aspp"), &cfg.aspp_rates))
}

/// Fused outputs with fixed level weights per branch (cls, reg, loc).
pub fn forward_heads(
    pyr: &FeaturePyramid,
    params: &ParamStore,
    gammas: &[Vec<f64>; 3],
    cfg: &HeadConfig,
) -> Result<BranchOutputs> {
    let mut tape = Tape::new();
    let mut binder = Binder::frozen(params);
    let vars = pyramid_constants(&mut tape, pyr);
    let g = gammas.clone().map(|g| tape.constant(Tensor::from_vec(g)));
    let out = forward_heads_var(&mut tape, &mut binder, &vars, g, cfg)?;
    Ok(out.values(&tape))
}

fn eval_pair(
    t: &Tensor,
    d: &Tensor,
    params: &ParamStore,
    f: impl FnOnce(&mut Tape, &mut Binder, Var, Var) -> Result<Var>,
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let mut binder = Binder::frozen(params);
    let tv = tape.constant(t.clone());
    let dv = tape.constant(d.clone());
    let out = f(&mut tape, &mut binder, tv, dv)?;
    Ok(tape.value(out).clone())
}

fn eval_one(
    x: &Tensor,
    params: &ParamStore,
    f: impl FnOnce(&mut Tape, &mut Binder, Var) -> Result<Var>,
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let mut binder = Binder::frozen(params);
    let v = tape.constant(x.clone());
    let out = f(&mut tape, &mut binder, v)?;
    Ok(tape.value(out).clone())
}

/// Expected response size for a detection map of side `hd`.
pub fn response_len(hd: usize) -> usize {
    hd + 1 - TEMPLATE_FEAT
}
