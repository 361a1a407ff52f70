//! The assembled network: backbone, branch heads and level attention.

use serde::{Deserialize, Serialize};

use crate::anchors::{generate_anchors, AnchorConfig, AnchorSet};
use crate::attention::{attention_weights_var, init_attention, uniform_weights, AttentionConfig};
use crate::backbone::{self, init_backbone, init_split, BackboneConfig, PyramidVars};
use crate::error::{invalid, Result};
use crate::heads::{forward_heads_var, init_heads, level_maps_var, fuse_levels, Branch, BranchOutputs, HeadConfig, OutputVars};
use crate::numerics::{Tape, Tensor, Var};
use crate::params::{Binder, ParamStore};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub heads: HeadConfig,
    pub attention: AttentionConfig,
    pub anchors: AnchorConfig,
}

impl ModelConfig {
    /// Small configuration used by tests and desk experiments.
    pub fn tiny() -> Self {
        Self {
            backbone: BackboneConfig {
                channels: 8,
                widths: [4, 8, 8],
                ..BackboneConfig::default()
            },
            attention: AttentionConfig {
                hidden: 4,
                ..AttentionConfig::default()
            },
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.heads.validate(self.backbone.channels)?;
        if self.anchors.anchors_per_cell() == 0 {
            return Err(invalid("model_config", "no anchor shapes"));
        }
        let expect = (self.backbone.search_size as f64 - 1.0) / 2.0;
        if self.anchors.origin != expect {
            return Err(invalid(
                "model_config",
                format!("anchor origin {} does not match search center {expect}", self.anchors.origin),
            ));
        }
        Ok(())
    }

    pub fn k(&self) -> usize {
        self.anchors.anchors_per_cell()
    }

    pub fn response_size(&self) -> usize {
        self.backbone.response_size()
    }

    pub fn anchor_set(&self) -> AnchorSet {
        let n = self.response_size();
        generate_anchors(n, n, &self.anchors)
    }
}

/// Network configuration plus its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct SiamMan {
    pub config: ModelConfig,
    pub params: ParamStore,
}

impl SiamMan {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let seed = config.backbone.seed;
        let mut params = ParamStore::new();
        init_backbone(&mut params, &config.backbone)?;
        init_split(&mut params, &config.backbone);
        let (k, levels) = (config.k(), config.backbone.levels);
        init_heads(&mut params, &config.heads, config.backbone.channels, k, levels, seed)?;
        init_attention(&mut params, &config.attention, k, levels, seed)?;
        Ok(Self { config, params })
    }

    pub fn with_params(config: ModelConfig, params: ParamStore) -> Result<Self> {
        let mut m = Self::new(config)?;
        m.params.load_from(&params)?;
        Ok(m)
    }

    pub fn template_features(&self, tape: &mut Tape, binder: &mut Binder, template: Var) -> Result<Vec<Var>> {
        backbone::embed_template(tape, binder, template, &self.config.backbone)
    }

    pub fn detection_features(&self, tape: &mut Tape, binder: &mut Binder, search: Var) -> Result<Vec<Var>> {
        backbone::embed_detection(tape, binder, search, &self.config.backbone)
    }

    /// Fused branch outputs and level weights from pyramid features.
    pub fn heads(
        &self,
        tape: &mut Tape,
        binder: &mut Binder,
        pyr: &PyramidVars,
        attention: bool,
    ) -> Result<Forward> {
        let cfg = &self.config;
        if !attention {
            let u = uniform_weights(tape, pyr.len());
            let out = forward_heads_var(tape, binder, pyr, [u; 3], &cfg.heads)?;
            return Ok(Forward { out, gammas: [u; 3] });
        }
        let mut fused = [None; 3];
        let mut gammas = [None; 3];
        for (i, b) in Branch::ALL.into_iter().enumerate() {
            let maps = level_maps_var(tape, binder, pyr, b, &cfg.heads)?;
            let g = attention_weights_var(tape, binder, &maps, b, &cfg.attention)?;
            fused[i] = Some(fuse_levels(tape, &maps, g)?);
            gammas[i] = Some(g);
        }
        Ok(Forward {
            out: OutputVars {
                cls: fused[0].unwrap(),
                reg: fused[1].unwrap(),
                loc: fused[2].unwrap(),
            },
            gammas: gammas.map(Option::unwrap),
        })
    }

    pub fn forward_vars(
        &self,
        tape: &mut Tape,
        binder: &mut Binder,
        template: Var,
        search: Var,
        attention: bool,
    ) -> Result<Forward> {
        let t = self.template_features(tape, binder, template)?;
        let d = self.detection_features(tape, binder, search)?;
        let pyr: PyramidVars = t.into_iter().zip(d).collect();
        self.heads(tape, binder, &pyr, attention)
    }

    /// Inference forward pass on patch tensors.
    pub fn forward(&self, template: &Tensor, search: &Tensor, attention: bool) -> Result<BranchOutputs> {
        let mut tape = Tape::new();
        let mut binder = Binder::frozen(&self.params);
        let t = tape.constant(template.clone());
        let s = tape.constant(search.clone());
        let f = self.forward_vars(&mut tape, &mut binder, t, s, attention)?;
        Ok(f.out.values(&tape))
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Forward {
    pub out: OutputVars,
    /// Level weights per branch (cls, reg, loc).
    pub gammas: [Var; 3],
}
