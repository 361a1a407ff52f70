//! Pair sampling, augmentation, SGD and the staged training schedule.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::anchors::{match_anchors, BBox, MatchLabels};
use crate::error::{invalid, Result};
use crate::image::{crop_patch, Image};
use crate::inference::context_size;
use crate::losses::{gaussian_center_map, loss_cls_var, loss_loc_var, loss_reg_var, loss_total, LossBreakdown, LossWeights};
use crate::model::SiamMan;
use crate::numerics::{Tape, Tensor, Var};
use crate::params::{Binder, GroupSet, ParamGroup, ParamStore};
use crate::synthetic::TrackStore;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub blur: f64,
    pub rescale: f64,
    pub rotation: f64,
    pub flip: f64,
    pub gray: f64,
    /// Largest relative zoom of the rescale transform.
    pub max_rescale: f64,
    pub max_rotation_deg: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            blur: 0.1,
            rescale: 0.2,
            rotation: 0.1,
            flip: 0.2,
            gray: 0.1,
            max_rescale: 0.05,
            max_rotation_deg: 5.0,
        }
    }
}

impl AugmentConfig {
    pub fn off() -> Self {
        Self {
            blur: 0.0,
            rescale: 0.0,
            rotation: 0.0,
            flip: 0.0,
            gray: 0.0,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PairConfig {
    pub positive_ratio: f64,
    /// Positive pairs use frames strictly closer than this.
    pub max_interval: usize,
    /// Largest displacement of the target from the search center, in search-patch pixels.
    pub max_shift: f64,
    /// Largest log-scale jitter of the search crop.
    pub scale_jitter: f64,
    pub augment: AugmentConfig,
}

impl Default for PairConfig {
    fn default() -> Self {
        Self {
            positive_ratio: 0.8,
            max_interval: 100,
            max_shift: 48.0,
            scale_jitter: 0.1,
            augment: AugmentConfig::default(),
        }
    }
}

/// Which frames and crops make up a pair, before any rendering.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairSpec {
    pub track: usize,
    pub template_frame: usize,
    pub search_track: usize,
    pub search_frame: usize,
    pub is_positive: bool,
    /// Target offset from the search center, in search-patch pixels.
    pub shift: (f64, f64),
    pub scale: f64,
}

impl PairSpec {
    pub fn interval(&self) -> usize {
        self.template_frame.abs_diff(self.search_frame)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainPair {
    pub template: Tensor,
    pub search: Tensor,
    /// Target box in search-patch pixels (positives only are supervised on it).
    pub gt: BBox,
    pub is_positive: bool,
}

/// Draws the frames of one pair: positive with probability `positive_ratio`.
pub fn sample_pair_spec<R: Rng>(dataset: &TrackStore, cfg: &PairConfig, rng: &mut R) -> Result<PairSpec> {
    if dataset.is_empty() || dataset.tracks.iter().any(|t| t.is_empty()) {
        return Err(invalid("sample_pair", "empty dataset"));
    }
    let track = rng.gen_range(0..dataset.len());
    let n = dataset.tracks[track].len();
    let template_frame = rng.gen_range(0..n);
    let is_positive = dataset.len() == 1 || rng.gen_bool(cfg.positive_ratio);
    let (search_track, search_frame) = if is_positive {
        let reach = cfg.max_interval.saturating_sub(1);
        let lo = template_frame.saturating_sub(reach);
        let hi = (template_frame + reach).min(n - 1);
        (track, rng.gen_range(lo..=hi))
    } else {
        let mut other = rng.gen_range(0..dataset.len() - 1);
        if other >= track {
            other += 1;
        }
        (other, rng.gen_range(0..dataset.tracks[other].len()))
    };
    let shift = (
        rng.gen_range(-cfg.max_shift..=cfg.max_shift),
        rng.gen_range(-cfg.max_shift..=cfg.max_shift),
    );
    let scale = rng.gen_range(-cfg.scale_jitter..=cfg.scale_jitter).exp();
    Ok(PairSpec {
        track,
        template_frame,
        search_track,
        search_frame,
        is_positive,
        shift,
        scale,
    })
}

/// Renders the crops of a pair spec.
pub fn materialize_pair(
    dataset: &TrackStore,
    spec: &PairSpec,
    exemplar: usize,
    search: usize,
    augment: &AugmentConfig,
    rng: &mut impl Rng,
) -> TrainPair {
    let t_track = &dataset.tracks[spec.track];
    let t_box = t_track.boxes[spec.template_frame];
    let t_img = t_track.render(spec.template_frame);
    let template = crop_patch(&t_img, t_box.cx, t_box.cy, context_size(&t_box), exemplar, t_img.mean_color());

    let s_track = &dataset.tracks[spec.search_track];
    let s_box = s_track.boxes[spec.search_frame];
    let s_img = s_track.render(spec.search_frame);
    let s_x = context_size(&s_box) * search as f64 / exemplar as f64 * spec.scale;
    let scale = search as f64 / s_x;
    let cx = s_box.cx - spec.shift.0 / scale;
    let cy = s_box.cy - spec.shift.1 / scale;
    let patch = crop_patch(&s_img, cx, cy, s_x, search, s_img.mean_color());
    let mid = (search as f64 - 1.0) / 2.0;
    let gt = BBox {
        cx: mid + (s_box.cx - cx) * scale,
        cy: mid + (s_box.cy - cy) * scale,
        w: s_box.w * scale,
        h: s_box.h * scale,
    };
    let (template, _) = augment_patch(&template, None, rng, augment);
    let (search_patch, gt) = augment_patch(&patch, Some(gt), rng, augment);
    TrainPair {
        template,
        search: search_patch,
        gt: gt.expect("box kept"),
        is_positive: spec.is_positive,
    }
}

pub fn sample_pair<R: Rng>(
    dataset: &TrackStore,
    cfg: &PairConfig,
    exemplar: usize,
    search: usize,
    rng: &mut R,
) -> Result<TrainPair> {
    let spec = sample_pair_spec(dataset, cfg, rng)?;
    Ok(materialize_pair(dataset, &spec, exemplar, search, &cfg.augment, rng))
}

fn resample(img: &Image, f: impl Fn(f64, f64) -> (f64, f64)) -> Image {
    let pad = img.mean_color();
    let mut out = Image::new(img.width, img.height, [0.0; 3]);
    for y in 0..img.height {
        for x in 0..img.width {
            let (sx, sy) = f(x as f64, y as f64);
            out.set(x, y, img.sample(sx, sy, pad));
        }
    }
    out
}

pub fn hflip(img: &Image) -> Image {
    let mut out = img.clone();
    for y in 0..img.height {
        for x in 0..img.width {
            out.set(img.width - 1 - x, y, img.get(x, y));
        }
    }
    out
}

pub fn hflip_box(b: &BBox, width: usize) -> BBox {
    BBox {
        cx: width as f64 - 1.0 - b.cx,
        ..*b
    }
}

pub fn grayscale(img: &Image) -> Image {
    let mut out = img.clone();
    for px in out.data.chunks_exact_mut(3) {
        let l = 0.299 * px[0] + 0.587 * px[1] + 0.114 * px[2];
        px.fill(l);
    }
    out
}

/// Separable `[1, 2, 1] / 4` blur with clamped borders.
pub fn blur(img: &Image) -> Image {
    let (w, h) = (img.width, img.height);
    let pass = |src: &Image, horizontal: bool| {
        let mut out = src.clone();
        for y in 0..h {
            for x in 0..w {
                let (a, b) = if horizontal {
                    (src.get(x.saturating_sub(1), y), src.get((x + 1).min(w - 1), y))
                } else {
                    (src.get(x, y.saturating_sub(1)), src.get(x, (y + 1).min(h - 1)))
                };
                let c = src.get(x, y);
                out.set(x, y, [0, 1, 2].map(|i| 0.25 * a[i] + 0.5 * c[i] + 0.25 * b[i]));
            }
        }
        out
    };
    pass(&pass(img, true), false)
}

/// Applies the enabled transforms, moving the box along with geometric ones.
pub fn augment_patch(
    patch: &Tensor,
    bbox: Option<BBox>,
    rng: &mut impl Rng,
    cfg: &AugmentConfig,
) -> (Tensor, Option<BBox>) {
    let mut draw = |p: f64| p > 0.0 && rng.gen_bool(p.min(1.0));
    let flags = [draw(cfg.blur), draw(cfg.rescale), draw(cfg.rotation), draw(cfg.flip), draw(cfg.gray)];
    if !flags.contains(&true) {
        return (patch.clone(), bbox);
    }
    let mut img = Image::from_tensor(patch).expect("image patch");
    let mut b = bbox;
    let cx = (img.width as f64 - 1.0) / 2.0;
    let cy = (img.height as f64 - 1.0) / 2.0;
    if flags[0] {
        img = blur(&img);
    }
    if flags[1] {
        let s = 1.0 + rng.gen_range(-cfg.max_rescale..=cfg.max_rescale);
        img = resample(&img, |x, y| (cx + (x - cx) / s, cy + (y - cy) / s));
        b = b.map(|b| BBox {
            cx: cx + (b.cx - cx) * s,
            cy: cy + (b.cy - cy) * s,
            w: b.w * s,
            h: b.h * s,
        });
    }
    if flags[2] {
        let a = rng.gen_range(-cfg.max_rotation_deg..=cfg.max_rotation_deg).to_radians();
        let (sin, cos) = a.sin_cos();
        img = resample(&img, |x, y| {
            let (dx, dy) = (x - cx, y - cy);
            (cx + cos * dx + sin * dy, cy - sin * dx + cos * dy)
        });
        b = b.map(|b| {
            // hull of the rotated corners
            let corners = [(-1.0, -1.0), (1.0, -1.0), (1.0, 1.0), (-1.0, 1.0)];
            let pts = corners.map(|(sx, sy)| {
                let (dx, dy) = (b.cx - cx + sx * b.w / 2.0, b.cy - cy + sy * b.h / 2.0);
                (cx + cos * dx - sin * dy, cy + sin * dx + cos * dy)
            });
            let fold = |f: fn(f64, f64) -> f64, init: f64, pick: fn(&(f64, f64)) -> f64| pts.iter().map(pick).fold(init, f);
            let (x1, x2) = (fold(f64::min, f64::INFINITY, |p| p.0), fold(f64::max, f64::NEG_INFINITY, |p| p.0));
            let (y1, y2) = (fold(f64::min, f64::INFINITY, |p| p.1), fold(f64::max, f64::NEG_INFINITY, |p| p.1));
            BBox {
                cx: (x1 + x2) / 2.0,
                cy: (y1 + y2) / 2.0,
                w: x2 - x1,
                h: y2 - y1,
            }
        });
    }
    if flags[3] {
        img = hflip(&img);
        b = b.map(|b| hflip_box(&b, img.width));
    }
    if flags[4] {
        img = grayscale(&img);
    }
    (img.to_tensor(), b)
}

/// `v <- momentum * v + grad + weight_decay * param; param <- param - lr * v`.
pub fn sgd_step(
    params: &mut ParamStore,
    grads: &BTreeMap<String, Tensor>,
    velocity: &mut BTreeMap<String, Tensor>,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    for (name, g) in grads {
        let p = params.get_mut(name)?;
        if p.shape() != g.shape() {
            return Err(invalid("sgd_step", format!("gradient shape mismatch for `{name}`")));
        }
        let v = velocity
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(p.shape().to_vec()));
        for ((pv, vv), gv) in p.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
            *vv = momentum * *vv + gv + weight_decay * *pv;
            *pv -= lr * *vv;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LrSchedule {
    pub start: f64,
    pub peak: f64,
    pub end: f64,
    pub warmup_epochs: usize,
    pub epochs: usize,
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self {
            start: 0.001,
            peak: 0.005,
            end: 0.0005,
            warmup_epochs: 5,
            epochs: 20,
        }
    }
}

/// Linear warmup from `start` to `peak`, then log-linear decay to `end`.
/// Epochs count from 1 within each stage.
pub fn lr_schedule(epoch: usize, cfg: &LrSchedule) -> Result<f64> {
    if epoch == 0 || epoch > cfg.epochs || cfg.warmup_epochs == 0 || cfg.warmup_epochs >= cfg.epochs {
        return Err(invalid("lr_schedule", format!("epoch {epoch} outside 1..={}", cfg.epochs)));
    }
    let w = cfg.warmup_epochs;
    if epoch <= w {
        let t = (epoch - 1) as f64 / (w - 1).max(1) as f64;
        return Ok(cfg.start + (cfg.peak - cfg.start) * t);
    }
    let t = (epoch - w) as f64 / (cfg.epochs - w) as f64;
    Ok(cfg.peak * (cfg.end / cfg.peak).powf(t))
}

/// One contiguous block of epochs with a fixed set of trainable groups.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Phase {
    pub stage: usize,
    pub name: String,
    /// First epoch of the phase within its stage, from 1.
    pub first_epoch: usize,
    pub epochs: usize,
    pub groups: Vec<GroupName>,
    pub attention: bool,
    pub localization: bool,
    /// Overrides [`TrainConfig::steps_per_epoch`] for this phase.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub steps_per_epoch: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupName {
    Backbone,
    Cls,
    Reg,
    Loc,
    Attention,
}

impl From<GroupName> for ParamGroup {
    fn from(g: GroupName) -> Self {
        match g {
            GroupName::Backbone => ParamGroup::Backbone,
            GroupName::Cls => ParamGroup::Cls,
            GroupName::Reg => ParamGroup::Reg,
            GroupName::Loc => ParamGroup::Loc,
            GroupName::Attention => ParamGroup::Attention,
        }
    }
}

impl Phase {
    pub fn group_set(&self) -> GroupSet {
        GroupSet::of(&self.groups.iter().map(|g| (*g).into()).collect::<Vec<_>>())
    }
}

/// The three-stage schedule: heads then heads + backbone; all branches then
/// everything; attention alone then everything with attention.
pub fn default_phases() -> Vec<Phase> {
    use GroupName::*;
    let p = |stage, name: &str, first_epoch, epochs, groups: &[GroupName], attention, localization| Phase {
        stage,
        name: name.to_string(),
        first_epoch,
        epochs,
        groups: groups.to_vec(),
        attention,
        localization,
        steps_per_epoch: None,
    };
    vec![
        p(1, "1a", 1, 10, &[Cls, Reg], false, false),
        p(1, "1b", 11, 10, &[Backbone, Cls, Reg], false, false),
        p(2, "2a", 1, 10, &[Cls, Reg, Loc], false, true),
        p(2, "2b", 11, 10, &[Backbone, Cls, Reg, Loc], false, true),
        p(3, "3a", 1, 15, &[Attention], true, true),
        p(3, "3b", 16, 5, &[Backbone, Cls, Reg, Loc, Attention], true, true),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub seed: u64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub schedule: LrSchedule,
    /// Multiplies every scheduled rate.
    pub lr_scale: f64,
    /// Global gradient-norm clip; 0 disables.
    pub grad_clip: f64,
    pub steps_per_epoch: usize,
    pub batch_size: usize,
    /// Size of the fixed pre-sampled pair pool; 0 samples fresh pairs every step.
    pub pool_size: usize,
    pub lambdas: LossWeights,
    pub pairs: PairConfig,
    pub phases: Vec<Phase>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            momentum: 0.9,
            weight_decay: 1e-4,
            schedule: LrSchedule::default(),
            lr_scale: 1.0,
            grad_clip: 0.0,
            steps_per_epoch: 200,
            batch_size: 4,
            pool_size: 0,
            lambdas: LossWeights::default(),
            pairs: PairConfig::default(),
            phases: default_phases(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [self.schedule.start, self.schedule.peak, self.schedule.end, self.lr_scale];
        if positive.iter().any(|v| !(*v > 0.0)) || self.momentum < 0.0 || self.weight_decay < 0.0 {
            return Err(invalid("train_config", "rates must be positive"));
        }
        if self.batch_size == 0 || self.steps_per_epoch == 0 {
            return Err(invalid("train_config", "batch size and steps per epoch must be positive"));
        }
        for p in &self.phases {
            if p.steps_per_epoch == Some(0) {
                return Err(invalid("train_config", format!("phase {} has no steps", p.name)));
            }
            if p.first_epoch == 0 || p.first_epoch + p.epochs - 1 > self.schedule.epochs {
                return Err(invalid(
                    "train_config",
                    format!("phase {} runs past epoch {}", p.name, self.schedule.epochs),
                ));
            }
        }
        Ok(())
    }
}

/// Supervision derived from a pair's ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct Targets {
    pub labels: MatchLabels,
    pub center: Tensor,
    pub is_positive: bool,
}

pub fn targets_for(model: &SiamMan, pair: &TrainPair) -> Result<Targets> {
    let anchors = model.config.anchor_set();
    let n = model.config.response_size();
    let cfg = &model.config.anchors;
    if pair.is_positive {
        Ok(Targets {
            labels: match_anchors(&anchors, &pair.gt, cfg)?,
            center: gaussian_center_map(&pair.gt, n, n, cfg.stride, cfg.origin)?,
            is_positive: true,
        })
    } else {
        Ok(Targets {
            labels: MatchLabels::all_negative(anchors.len()),
            center: Tensor::zeros([n, n]),
            is_positive: false,
        })
    }
}

/// Training example with optionally cached backbone features.
#[derive(Debug, Clone)]
pub struct Example {
    pub pair: TrainPair,
    pub targets: Targets,
    cached: Option<Vec<(Tensor, Tensor)>>,
}

impl Example {
    pub fn new(model: &SiamMan, pair: TrainPair) -> Result<Self> {
        let targets = targets_for(model, &pair)?;
        Ok(Self {
            pair,
            targets,
            cached: None,
        })
    }
}

/// Loss of one example on a fresh tape section; returns the scalar and its parts.
pub fn example_loss(
    tape: &mut Tape,
    binder: &mut Binder,
    model: &SiamMan,
    ex: &Example,
    attention: bool,
    lambdas: LossWeights,
) -> Result<(Var, LossBreakdown)> {
    let pyr: Vec<(Var, Var)> = match &ex.cached {
        Some(levels) => levels
            .iter()
            .map(|(t, d)| (tape.constant(t.clone()), tape.constant(d.clone())))
            .collect(),
        None => {
            let t = tape.constant(ex.pair.template.clone());
            let s = tape.constant(ex.pair.search.clone());
            let tf = model.template_features(tape, binder, t)?;
            let df = model.detection_features(tape, binder, s)?;
            tf.into_iter().zip(df).collect()
        }
    };
    let fwd = model.heads(tape, binder, &pyr, attention)?;
    let l_cls = loss_cls_var(tape, fwd.out.cls, &ex.targets.labels)?;
    let mut total = tape.scale(l_cls, lambdas.cls)?;
    let (mut v_reg, mut v_loc) = (0.0, 0.0);
    if ex.targets.is_positive {
        let l_reg = loss_reg_var(tape, fwd.out.reg, &ex.targets.labels)?;
        v_reg = tape.value(l_reg).item();
        if lambdas.reg != 0.0 {
            let t = tape.scale(l_reg, lambdas.reg)?;
            total = tape.add(total, t)?;
        }
        let l_loc = loss_loc_var(tape, fwd.out.loc, &ex.targets.center)?;
        v_loc = tape.value(l_loc).item();
        if lambdas.loc != 0.0 {
            let t = tape.scale(l_loc, lambdas.loc)?;
            total = tape.add(total, t)?;
        }
    }
    let breakdown = loss_total(tape.value(l_cls).item(), v_reg, v_loc, lambdas, ex.targets.is_positive);
    Ok((total, breakdown))
}

fn cache_features(model: &SiamMan, ex: &mut Example) -> Result<()> {
    let mut tape = Tape::new();
    let mut binder = Binder::frozen(&model.params);
    let t = tape.constant(ex.pair.template.clone());
    let s = tape.constant(ex.pair.search.clone());
    let tf = model.template_features(&mut tape, &mut binder, t)?;
    let df = model.detection_features(&mut tape, &mut binder, s)?;
    ex.cached = Some(
        tf.iter()
            .zip(&df)
            .map(|(a, b)| (tape.value(*a).clone(), tape.value(*b).clone()))
            .collect(),
    );
    Ok(())
}

/// Mean loss over examples with the given head configuration.
pub fn evaluate_loss(model: &SiamMan, examples: &[Example], attention: bool, lambdas: LossWeights) -> Result<f64> {
    let mut sum = 0.0;
    for ex in examples {
        let mut tape = Tape::new();
        let mut binder = Binder::frozen(&model.params);
        let (_, b) = example_loss(&mut tape, &mut binder, model, ex, attention, lambdas)?;
        sum += b.total;
    }
    Ok(sum / examples.len().max(1) as f64)
}

/// Batch-mean gradients of the trainable groups, and the batch-mean loss parts.
pub fn batch_gradients(
    model: &SiamMan,
    batch: &[&Example],
    trainable: GroupSet,
    attention: bool,
    lambdas: LossWeights,
) -> Result<(BTreeMap<String, Tensor>, LossBreakdown)> {
    let mut acc: BTreeMap<String, Tensor> = BTreeMap::new();
    let mut mean = LossBreakdown {
        l_cls: 0.0,
        l_reg: 0.0,
        l_loc: 0.0,
        lambdas,
        total: 0.0,
    };
    let inv = 1.0 / batch.len() as f64;
    for ex in batch {
        let mut tape = Tape::new();
        let mut binder = Binder::new(&model.params, trainable);
        let (loss, b) = example_loss(&mut tape, &mut binder, model, ex, attention, lambdas)?;
        let grads = tape.backward(loss)?;
        for (name, g) in binder.gradients(&grads) {
            match acc.get_mut(&name) {
                Some(a) => a.data_mut().iter_mut().zip(g.data()).for_each(|(x, y)| *x += inv * y),
                None => {
                    acc.insert(name, g.map(|v| v * inv));
                }
            }
        }
        mean.l_cls += inv * b.l_cls;
        mean.l_reg += inv * b.l_reg;
        mean.l_loc += inv * b.l_loc;
        mean.total += inv * b.total;
    }
    Ok((acc, mean))
}

fn clip_gradients(grads: &mut BTreeMap<String, Tensor>, max_norm: f64) -> f64 {
    let norm = grads
        .values()
        .flat_map(|g| g.data().iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        for g in grads.values_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

/// One logged optimizer step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub stage: usize,
    pub phase: String,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub l_cls: f64,
    pub l_reg: f64,
    pub l_loc: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub records: Vec<StepRecord>,
    /// Parameters at the end of each stage.
    pub checkpoints: Vec<(usize, ParamStore)>,
}

/// Pre-samples the fixed pool of training examples.
pub fn build_pool(model: &SiamMan, dataset: &TrackStore, cfg: &TrainConfig, count: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Example>> {
    let (e, s) = (model.config.backbone.exemplar_size, model.config.backbone.search_size);
    (0..count)
        .map(|_| {
            let pair = sample_pair(dataset, &cfg.pairs, e, s, rng)?;
            Example::new(model, pair)
        })
        .collect()
}

/// Runs every phase in order, updating `model` in place.
pub fn train_stages(
    model: &mut SiamMan,
    cfg: &TrainConfig,
    dataset: &TrackStore,
    mut on_record: impl FnMut(&StepRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut pool = if cfg.pool_size > 0 {
        build_pool(model, dataset, cfg, cfg.pool_size, &mut rng)?
    } else {
        Vec::new()
    };
    // pool examples are visited in reshuffled passes
    let mut order: Vec<usize> = (0..pool.len()).collect();
    let mut cursor = order.len();
    let mut records = Vec::new();
    let mut checkpoints = Vec::new();
    let mut step = 0;
    for (pi, phase) in cfg.phases.iter().enumerate() {
        let groups = phase.group_set();
        let frozen_backbone = !groups.contains(ParamGroup::Backbone);
        for ex in pool.iter_mut() {
            ex.cached = None;
            if frozen_backbone {
                cache_features(model, ex)?;
            }
        }
        let lambdas = LossWeights {
            loc: if phase.localization { cfg.lambdas.loc } else { 0.0 },
            ..cfg.lambdas
        };
        let mut velocity = BTreeMap::new();
        for e in 0..phase.epochs {
            let epoch = phase.first_epoch + e;
            let lr = lr_schedule(epoch, &cfg.schedule)? * cfg.lr_scale;
            for _ in 0..phase.steps_per_epoch.unwrap_or(cfg.steps_per_epoch) {
                let fresh: Vec<Example>;
                let batch: Vec<&Example> = if pool.is_empty() {
                    let (es, ss) = (model.config.backbone.exemplar_size, model.config.backbone.search_size);
                    fresh = (0..cfg.batch_size)
                        .map(|_| {
                            let pair = sample_pair(dataset, &cfg.pairs, es, ss, &mut rng)?;
                            let mut ex = Example::new(model, pair)?;
                            if frozen_backbone {
                                cache_features(model, &mut ex)?;
                            }
                            Ok(ex)
                        })
                        .collect::<Result<_>>()?;
                    fresh.iter().collect()
                } else {
                    (0..cfg.batch_size)
                        .map(|_| {
                            if cursor == order.len() {
                                order.shuffle(&mut rng);
                                cursor = 0;
                            }
                            cursor += 1;
                            &pool[order[cursor - 1]]
                        })
                        .collect()
                };
                let (mut grads, parts) = batch_gradients(model, &batch, groups, phase.attention, lambdas)?;
                let grad_norm = clip_gradients(&mut grads, cfg.grad_clip);
                sgd_step(&mut model.params, &grads, &mut velocity, lr, cfg.momentum, cfg.weight_decay)?;
                let rec = StepRecord {
                    step,
                    stage: phase.stage,
                    phase: phase.name.clone(),
                    epoch,
                    lr,
                    loss: parts.total,
                    l_cls: parts.l_cls,
                    l_reg: parts.l_reg,
                    l_loc: parts.l_loc,
                    grad_norm,
                };
                on_record(&rec);
                records.push(rec);
                step += 1;
            }
        }
        let stage_ends = cfg.phases.get(pi + 1).map_or(true, |n| n.stage != phase.stage);
        if stage_ends {
            checkpoints.push((phase.stage, model.params.clone()));
        }
    }
    Ok(TrainOutcome { records, checkpoints })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::SyntheticConfig;

    #[test]
    fn lr_examples() {
        let s = LrSchedule::default();
        assert!((lr_schedule(1, &s).unwrap() - 0.001).abs() < 1e-15);
        assert!((lr_schedule(5, &s).unwrap() - 0.005).abs() < 1e-15);
        assert!((lr_schedule(20, &s).unwrap() - 0.0005).abs() < 1e-15);
        assert!((lr_schedule(3, &s).unwrap() - 0.003).abs() < 1e-15);
        assert!(lr_schedule(0, &s).is_err() && lr_schedule(21, &s).is_err());
        for e in 6..20 {
            assert!(lr_schedule(e + 1, &s).unwrap() < lr_schedule(e, &s).unwrap());
        }
    }

    #[test]
    fn sgd_examples() {
        let mut p = ParamStore::new();
        p.insert("cls.w", Tensor::from_vec(vec![1.0]));
        let g: BTreeMap<_, _> = [("cls.w".to_string(), Tensor::from_vec(vec![1.0]))].into();
        let mut v = BTreeMap::new();
        sgd_step(&mut p, &g, &mut v, 0.1, 0.0, 0.0).unwrap();
        assert!((p.get("cls.w").unwrap().item() - 0.9).abs() < 1e-15);

        let mut p = ParamStore::new();
        p.insert("cls.w", Tensor::from_vec(vec![1.0]));
        let zero: BTreeMap<_, _> = [("cls.w".to_string(), Tensor::from_vec(vec![0.0]))].into();
        sgd_step(&mut p, &zero, &mut BTreeMap::new(), 0.1, 0.9, 0.0).unwrap();
        assert_eq!(p.get("cls.w").unwrap().item(), 1.0);

        let (lr, gv) = (0.01, 2.0);
        let g: BTreeMap<_, _> = [("cls.w".to_string(), Tensor::from_vec(vec![gv]))].into();
        let mut v = BTreeMap::new();
        sgd_step(&mut p, &g, &mut v, lr, 0.9, 0.0).unwrap();
        assert!((p.get("cls.w").unwrap().item() - (1.0 - lr * gv)).abs() < 1e-15);
        sgd_step(&mut p, &g, &mut v, lr, 0.9, 0.0).unwrap();
        assert!((p.get("cls.w").unwrap().item() - (1.0 - lr * gv - lr * 1.9 * gv)).abs() < 1e-15);
    }

    fn store() -> TrackStore {
        TrackStore::generate(&SyntheticConfig::default(), 4, 3)
    }

    #[test]
    fn pair_specs_respect_constraints() {
        let ds = store();
        let cfg = PairConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut pos = 0;
        let n = 10_000;
        for _ in 0..n {
            let s = sample_pair_spec(&ds, &cfg, &mut rng).unwrap();
            if s.is_positive {
                pos += 1;
                assert_eq!(s.track, s.search_track);
                assert!(s.interval() < 100);
            } else {
                assert_ne!(s.track, s.search_track);
            }
        }
        let frac = pos as f64 / n as f64;
        assert!((frac - 0.8).abs() < 0.02, "{frac}");
        let a: Vec<_> = (0..5).map(|_| sample_pair_spec(&ds, &cfg, &mut ChaCha8Rng::seed_from_u64(9)).unwrap()).collect();
        assert!(a.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn positive_pair_box_lands_on_target() {
        let ds = store();
        let spec = PairSpec {
            track: 1,
            template_frame: 3,
            search_track: 1,
            search_frame: 10,
            is_positive: true,
            shift: (16.0, -8.0),
            scale: 1.0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let pair = materialize_pair(&ds, &spec, 127, 255, &AugmentConfig::off(), &mut rng);
        assert_eq!(pair.template.shape(), &[3, 127, 127]);
        assert!((pair.gt.cx - (127.0 + 16.0)).abs() < 1e-9);
        assert!((pair.gt.cy - (127.0 - 8.0)).abs() < 1e-9);
        let b = ds.tracks[1].boxes[10];
        let s_x = context_size(&b) * 255.0 / 127.0;
        assert!((pair.gt.w - b.w * 255.0 / s_x).abs() < 1e-9);
    }

    fn test_patch() -> Tensor {
        Tensor::from_fn([3, 9, 11], |i| ((i * 7919) % 101) as f64 / 100.0)
    }

    #[test]
    fn augment_identity_flip_gray() {
        let p = test_patch();
        let b = BBox::new(3.0, 4.0, 2.0, 3.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (q, qb) = augment_patch(&p, Some(b), &mut rng, &AugmentConfig::off());
        assert_eq!((q, qb), (p.clone(), Some(b)));

        let flip = AugmentConfig { flip: 1.0, ..AugmentConfig::off() };
        let (once, b1) = augment_patch(&p, Some(b), &mut rng, &flip);
        assert_ne!(once, p);
        let (twice, b2) = augment_patch(&once, b1, &mut rng, &flip);
        assert_eq!((twice, b2), (p.clone(), Some(b)));
        assert_eq!(b1.unwrap().cx, 10.0 - 3.0);

        let gray = AugmentConfig { gray: 1.0, ..AugmentConfig::off() };
        let (g, gb) = augment_patch(&p, Some(b), &mut rng, &gray);
        assert_eq!(gb, Some(b));
        let plane = 99;
        for i in 0..plane {
            let l = 0.299 * p.data()[i] + 0.587 * p.data()[plane + i] + 0.114 * p.data()[2 * plane + i];
            for c in 0..3 {
                assert!((g.data()[c * plane + i] - l).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn rotation_box_contains_original() {
        let p = test_patch();
        let b = BBox::new(5.0, 4.0, 4.0, 2.0).unwrap();
        let cfg = AugmentConfig { rotation: 1.0, max_rotation_deg: 20.0, ..AugmentConfig::off() };
        let (_, rb) = augment_patch(&p, Some(b), &mut ChaCha8Rng::seed_from_u64(4), &cfg);
        let rb = rb.unwrap();
        assert!(rb.w >= b.w && rb.h >= b.h);
        assert!((rb.cx - b.cx).abs() < 1e-9 && (rb.cy - b.cy).abs() < 1e-9);
    }
}
