//! Small seeded siamese feature extractor.
//!
//! Three stride-2 3x3 blocks bring the input to stride 8, then each pyramid
//! level taps the shared trunk with its own 3x3 conv followed by a 1x1
//! reduction to `channels`. Template features are center-cropped to 7x7.
//!
//! Parameter names: `backbone.stem{s}.{weight,bias}`, `backbone.tap{l}.{weight,bias}`,
//! `backbone.reduce{l}.{weight,bias}`, and `split.{cls,reg,loc}.l{l}.weight`.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, mismatch, Result};
use crate::heads::Branch;
use crate::numerics::{ConvGeom, Tape, Tensor, Var};
use crate::params::{Binder, Init, ParamStore};

/// Template feature side after cropping.
pub const TEMPLATE_FEAT: usize = 7;
/// Template feature side before cropping.
pub const TEMPLATE_PRE_CROP: usize = 15;
/// Total stride of the trunk.
pub const STRIDE: usize = 8;

const STEM: ConvGeom = ConvGeom::new(2, 1, 0);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub channels: usize,
    pub levels: usize,
    pub exemplar_size: usize,
    pub search_size: usize,
    /// Output widths of the three stem blocks.
    pub widths: [usize; 3],
    pub seed: u64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            channels: 32,
            levels: 3,
            exemplar_size: 127,
            search_size: 255,
            widths: [16, 32, 32],
            seed: 0,
        }
    }
}

/// Side length after the three stride-2 valid convs, if the input is large enough.
pub fn feature_size(input: usize) -> Option<usize> {
    (0..3).try_fold(input, |n, _| STEM.output_len(n, 3))
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        let op = "backbone_config";
        if self.channels == 0 || self.levels == 0 || self.widths.contains(&0) {
            return Err(invalid(op, "channels, levels and widths must be positive"));
        }
        if self.exemplar_size >= self.search_size {
            return Err(invalid(
                op,
                format!("exemplar {} must be smaller than search {}", self.exemplar_size, self.search_size),
            ));
        }
        if feature_size(self.exemplar_size) != Some(TEMPLATE_PRE_CROP) {
            return Err(invalid(
                op,
                format!("exemplar {} does not give a 15x15 feature map", self.exemplar_size),
            ));
        }
        Ok(())
    }

    /// Detection feature side.
    pub fn detection_feat(&self) -> usize {
        feature_size(self.search_size).unwrap_or(0)
    }

    /// Side of the correlation response map.
    pub fn response_size(&self) -> usize {
        self.detection_feat() + 1 - TEMPLATE_FEAT
    }

    pub fn level_ids(&self) -> Vec<String> {
        (0..self.levels)
            .map(|l| format!("t{0}/s{0}", l + 3))
            .collect()
    }
}

/// Paired template / detection features of one level.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelFeatures {
    pub template: Tensor,
    pub detection: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePyramid {
    pub levels: Vec<LevelFeatures>,
    pub level_ids: Vec<String>,
}

/// Tape handles of a pyramid: `(template, detection)` per level.
pub type PyramidVars = Vec<(Var, Var)>;

fn conv_init(fan_in: usize) -> Init {
    Init::FanIn { fan_in, gain: 1.0 }
}

pub fn init_backbone(store: &mut ParamStore, cfg: &BackboneConfig) -> Result<()> {
    cfg.validate()?;
    let seed = cfg.seed;
    let mut c_in = 3;
    for (s, &w) in cfg.widths.iter().enumerate() {
        store.init(seed, &format!("backbone.stem{s}.weight"), &[w, c_in, 3, 3], conv_init(9 * c_in));
        store.init(seed, &format!("backbone.stem{s}.bias"), &[w], Init::Zeros);
        c_in = w;
    }
    let c = cfg.channels;
    for l in 0..cfg.levels {
        store.init(seed, &format!("backbone.tap{l}.weight"), &[c_in, c_in, 3, 3], conv_init(9 * c_in));
        store.init(seed, &format!("backbone.tap{l}.bias"), &[c_in], Init::Zeros);
        store.init(seed, &format!("backbone.reduce{l}.weight"), &[c, c_in, 1, 1], conv_init(c_in));
        store.init(seed, &format!("backbone.reduce{l}.bias"), &[c], Init::Zeros);
    }
    Ok(())
}

pub fn init_split(store: &mut ParamStore, cfg: &BackboneConfig) {
    let c = cfg.channels;
    for b in Branch::ALL {
        for l in 0..cfg.levels {
            store.init(cfg.seed, &split_name(b, l), &[c, c, 3, 3], conv_init(9 * c));
        }
    }
}

fn split_name(branch: Branch, level: usize) -> String {
    format!("split.{}.l{level}.weight", branch.name())
}

/// Conv + per-channel bias, as used throughout the network.
pub(crate) fn conv_bias(
    tape: &mut Tape,
    binder: &mut Binder,
    x: Var,
    prefix: &str,
    geom: ConvGeom,
) -> Result<Var> {
    let w = binder.var(tape, &format!("{prefix}.weight"))?;
    let b = binder.var(tape, &format!("{prefix}.bias"))?;
    let y = tape.conv2d(x, w, geom)?;
    tape.add_bias(y, b)
}

/// Uncropped per-level features of one patch.
pub fn embed(tape: &mut Tape, binder: &mut Binder, patch: Var, cfg: &BackboneConfig) -> Result<Vec<Var>> {
    let shape = tape.shape(patch);
    if shape.len() != 3 || shape[0] != 3 {
        return Err(mismatch("extract_pyramid", format!("patch must be [3,H,W], got {shape:?}")));
    }
    let mut x = patch;
    for s in 0..3 {
        let y = conv_bias(tape, binder, x, &format!("backbone.stem{s}"), STEM)?;
        x = tape.relu(y)?;
    }
    (0..cfg.levels)
        .map(|l| {
            let y = conv_bias(tape, binder, x, &format!("backbone.tap{l}"), ConvGeom::same(3, 1))?;
            let y = tape.relu(y)?;
            conv_bias(tape, binder, y, &format!("backbone.reduce{l}"), ConvGeom::new(1, 1, 0))
        })
        .collect()
}

fn check_patch(tape: &Tape, v: Var, size: usize, what: &str) -> Result<()> {
    let s = tape.shape(v);
    if s != [3, size, size] {
        return Err(mismatch(
            "extract_pyramid",
            format!("{what} patch {s:?}, config expects [3, {size}, {size}]"),
        ));
    }
    Ok(())
}

/// Template features of every level, cropped to 7x7.
pub fn embed_template(
    tape: &mut Tape,
    binder: &mut Binder,
    template: Var,
    cfg: &BackboneConfig,
) -> Result<Vec<Var>> {
    check_patch(tape, template, cfg.exemplar_size, "template")?;
    embed(tape, binder, template, cfg)?
        .into_iter()
        .map(|f| tape.crop_center(f, TEMPLATE_FEAT, TEMPLATE_FEAT))
        .collect()
}

pub fn embed_detection(
    tape: &mut Tape,
    binder: &mut Binder,
    detection: Var,
    cfg: &BackboneConfig,
) -> Result<Vec<Var>> {
    check_patch(tape, detection, cfg.search_size, "detection")?;
    embed(tape, binder, detection, cfg)
}

pub fn extract_pyramid_vars(
    tape: &mut Tape,
    binder: &mut Binder,
    template: Var,
    detection: Var,
    cfg: &BackboneConfig,
) -> Result<PyramidVars> {
    let t = embed_template(tape, binder, template, cfg)?;
    let d = embed_detection(tape, binder, detection, cfg)?;
    Ok(t.into_iter().zip(d).collect())
}

pub fn extract_pyramid(
    template_patch: &Tensor,
    detection_patch: &Tensor,
    cfg: &BackboneConfig,
    params: &ParamStore,
) -> Result<FeaturePyramid> {
    let mut tape = Tape::new();
    let mut binder = Binder::frozen(params);
    let t = tape.constant(template_patch.clone());
    let d = tape.constant(detection_patch.clone());
    let vars = extract_pyramid_vars(&mut tape, &mut binder, t, d, cfg)?;
    Ok(pyramid_from_vars(&tape, &vars, cfg))
}

pub fn pyramid_from_vars(tape: &Tape, vars: &PyramidVars, cfg: &BackboneConfig) -> FeaturePyramid {
    FeaturePyramid {
        levels: vars
            .iter()
            .map(|(t, d)| LevelFeatures {
                template: tape.value(*t).clone(),
                detection: tape.value(*d).clone(),
            })
            .collect(),
        level_ids: cfg.level_ids(),
    }
}

/// Branch-specific 3x3 bias-free conv of one level's features.
pub fn split_var(tape: &mut Tape, binder: &mut Binder, feat: Var, branch: Branch, level: usize) -> Result<Var> {
    let w = binder.var(tape, &split_name(branch, level))?;
    tape.conv2d(feat, w, ConvGeom::same(3, 1))
}

/// `(cls, reg, loc)` features of one level.
pub fn branch_split(feat: &Tensor, level: usize, params: &ParamStore) -> Result<[Tensor; 3]> {
    let mut tape = Tape::new();
    let mut binder = Binder::frozen(params);
    let x = tape.constant(feat.clone());
    let mut out = Vec::with_capacity(3);
    for b in Branch::ALL {
        let v = split_var(&mut tape, &mut binder, x, b, level)?;
        out.push(tape.value(v).clone());
    }
    Ok(out.try_into().expect("three branches"))
}
