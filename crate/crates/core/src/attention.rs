//! Per-branch level weights computed from the concatenated level maps.
//!
//! Parameter names: `attn.{branch}.conv{1,2}.{weight,bias}`, `attn.{branch}.fc.{weight,bias}`
//! and, for the free-scalar variant, `attn.{branch}.logits`.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, mismatch, Result};
use crate::heads::Branch;
use crate::numerics::{ConvGeom, Tape, Tensor, Var};
use crate::params::{Binder, Init, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionMode {
    /// Softmax over the level logits.
    #[default]
    Softmax,
    /// Independent sigmoid per level, not normalized.
    Sigmoid,
    /// Learned logits that ignore the input maps, softmax-normalized.
    FreeScalars,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttentionConfig {
    pub mode: AttentionMode,
    /// Channels of the two stride-2 convs.
    pub hidden: usize,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        Self {
            mode: AttentionMode::Softmax,
            hidden: 8,
        }
    }
}

const DOWN: ConvGeom = ConvGeom::new(2, 1, 1);

pub fn init_attention(
    store: &mut ParamStore,
    cfg: &AttentionConfig,
    k: usize,
    levels: usize,
    seed: u64,
) -> Result<()> {
    if cfg.hidden == 0 {
        return Err(invalid("attention_config", "hidden width must be positive"));
    }
    let h = cfg.hidden;
    for b in Branch::ALL {
        let p = format!("attn.{}", b.name());
        if cfg.mode == AttentionMode::FreeScalars {
            store.init(seed, &format!("{p}.logits"), &[levels], Init::Zeros);
            continue;
        }
        let c_in = levels * b.channels(k);
        store.init(seed, &format!("{p}.conv1.weight"), &[h, c_in, 3, 3], Init::FanIn { fan_in: 9 * c_in, gain: 1.0 });
        store.init(seed, &format!("{p}.conv1.bias"), &[h], Init::Zeros);
        store.init(seed, &format!("{p}.conv2.weight"), &[h, h, 3, 3], Init::FanIn { fan_in: 9 * h, gain: 1.0 });
        store.init(seed, &format!("{p}.conv2.bias"), &[h], Init::Zeros);
        // zero head: training starts from uniform weights
        store.init(seed, &format!("{p}.fc.weight"), &[levels, h], Init::Zeros);
        store.init(seed, &format!("{p}.fc.bias"), &[levels], Init::Zeros);
    }
    Ok(())
}

fn conv_bias(tape: &mut Tape, binder: &mut Binder, x: Var, prefix: &str) -> Result<Var> {
    let w = binder.var(tape, &format!("{prefix}.weight"))?;
    let b = binder.var(tape, &format!("{prefix}.bias"))?;
    let y = tape.conv2d(x, w, DOWN)?;
    tape.add_bias(y, b)
}

/// Level weights `gamma[L]` for one branch.
pub fn attention_weights_var(
    tape: &mut Tape,
    binder: &mut Binder,
    maps: &[Var],
    branch: Branch,
    cfg: &AttentionConfig,
) -> Result<Var> {
    let first = maps
        .first()
        .ok_or_else(|| invalid("attention_weights", "no level maps"))?;
    let shape = tape.shape(*first).to_vec();
    for m in maps {
        if tape.shape(*m) != shape.as_slice() {
            return Err(mismatch(
                "attention_weights",
                format!("level shapes {:?} vs {shape:?}", tape.shape(*m)),
            ));
        }
    }
    let p = format!("attn.{}", branch.name());
    if cfg.mode == AttentionMode::FreeScalars {
        let logits = binder.var(tape, &format!("{p}.logits"))?;
        return tape.softmax(logits, 0);
    }
    let x = tape.concat(maps)?;
    let h = conv_bias(tape, binder, x, &format!("{p}.conv1"))?;
    let h = tape.relu(h)?;
    let h = conv_bias(tape, binder, h, &format!("{p}.conv2"))?;
    let pooled = tape.global_avg_pool(h)?;
    let w = binder.var(tape, &format!("{p}.fc.weight"))?;
    let b = binder.var(tape, &format!("{p}.fc.bias"))?;
    let logits = tape.linear(pooled, w, b)?;
    match cfg.mode {
        AttentionMode::Sigmoid => tape.sigmoid(logits),
        _ => tape.softmax(logits, 0),
    }
}

/// Equal weights `1/L`, used while attention is disabled.
pub fn uniform_weights(tape: &mut Tape, levels: usize) -> Var {
    tape.constant(Tensor::full([levels], 1.0 / levels as f64))
}

pub fn attention_weights(
    level_maps: &[Tensor],
    branch: Branch,
    params: &ParamStore,
    cfg: &AttentionConfig,
) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let mut binder = Binder::frozen(params);
    let maps: Vec<Var> = level_maps.iter().map(|m| tape.constant(m.clone())).collect();
    let g = attention_weights_var(&mut tape, &mut binder, &maps, branch, cfg)?;
    Ok(tape.value(g).data().to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn setup(levels: usize) -> ParamStore {
        let mut s = ParamStore::new();
        init_attention(&mut s, &AttentionConfig::default(), 1, levels, 9).unwrap();
        s
    }

    fn maps(levels: usize) -> Vec<Tensor> {
        (0..levels)
            .map(|l| Tensor::from_fn([2, 5, 5], |i| ((i + 7 * l) as f64 * 0.61).sin()))
            .collect()
    }

    #[test]
    fn single_level_is_one() {
        let mut s = setup(1);
        *s.get_mut("attn.cls.fc.bias").unwrap() = Tensor::from_vec(vec![3.7]);
        let g = attention_weights(&maps(1), Branch::Cls, &s, &AttentionConfig::default()).unwrap();
        assert_eq!(g, vec![1.0]);
    }

    #[test]
    fn zero_head_is_uniform() {
        let s = setup(3);
        let g = attention_weights(&maps(3), Branch::Cls, &s, &AttentionConfig::default()).unwrap();
        for v in g {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn row_permutation_permutes_weights() {
        let mut s = setup(3);
        let fc = Tensor::from_fn([3, 8], |i| (i as f64 * 0.77).cos());
        *s.get_mut("attn.cls.fc.weight").unwrap() = fc.clone();
        *s.get_mut("attn.cls.fc.bias").unwrap() = Tensor::from_vec(vec![0.1, -0.2, 0.3]);
        let cfg = AttentionConfig::default();
        let g = attention_weights(&maps(3), Branch::Cls, &s, &cfg).unwrap();
        let total: f64 = g.iter().sum();
        assert!((total - 1.0).abs() < 1e-12 && g.iter().all(|v| *v > 0.0));

        let perm = [2, 0, 1];
        let mut pw = Tensor::zeros([3, 8]);
        for (r, &src) in perm.iter().enumerate() {
            pw.data_mut()[r * 8..(r + 1) * 8].copy_from_slice(&fc.data()[src * 8..(src + 1) * 8]);
        }
        *s.get_mut("attn.cls.fc.weight").unwrap() = pw;
        *s.get_mut("attn.cls.fc.bias").unwrap() = Tensor::from_vec(vec![0.3, 0.1, -0.2]);
        let gp = attention_weights(&maps(3), Branch::Cls, &s, &cfg).unwrap();
        for (r, &src) in perm.iter().enumerate() {
            assert!((gp[r] - g[src]).abs() < 1e-15);
        }
    }

    #[test]
    fn mismatched_levels_rejected() {
        let s = setup(2);
        let mut m = maps(2);
        m[1] = Tensor::zeros([2, 4, 5]);
        assert!(attention_weights(&m, Branch::Cls, &s, &AttentionConfig::default()).is_err());
    }

    #[test]
    fn variants() {
        let cfg = AttentionConfig {
            mode: AttentionMode::FreeScalars,
            ..Default::default()
        };
        let mut s = ParamStore::new();
        init_attention(&mut s, &cfg, 1, 2, 9).unwrap();
        assert!(!s.contains("attn.reg.fc.weight"));
        *s.get_mut("attn.reg.logits").unwrap() = Tensor::from_vec(vec![0.0, (3.0f64).ln()]);
        let m: Vec<Tensor> = (0..2).map(|_| Tensor::zeros([4, 3, 3])).collect();
        let g = attention_weights(&m, Branch::Reg, &s, &cfg).unwrap();
        assert!((g[0] - 0.25).abs() < 1e-15 && (g[1] - 0.75).abs() < 1e-15);
        let cfg = AttentionConfig {
            mode: AttentionMode::Sigmoid,
            ..Default::default()
        };
        let s = setup(2);
        let g = attention_weights(&m, Branch::Reg, &s, &cfg).unwrap();
        assert_eq!(g, vec![0.5, 0.5]);
    }
}
