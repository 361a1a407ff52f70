//! Finite-difference checks of every tape op and every composed head and loss.
//!
//! Each case draws its inputs and parameters from a seed and reduces the
//! output to a scalar with fixed pseudo-random weights, so every output
//! element contributes a distinct gradient.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::anchors::{Label, MatchLabels};
use crate::attention::{attention_weights_var, init_attention, AttentionConfig, AttentionMode};
use crate::backbone::{init_split, BackboneConfig};
use crate::error::{invalid, Result};
use crate::heads::{
    aspp_var, corr_level_var, forward_heads_var, fuse_levels, global_context_var, init_heads, loc_correlation_var,
    loc_level_var, Branch, HeadConfig,
};
use crate::losses::{loss_cls_var, loss_loc_var, loss_reg_var};
use crate::numerics::{ConvGeom, GradCheck, OpKind, Tape, Tensor, Var};
use crate::params::{Binder, ParamStore};

/// Largest relative error a case may reach.
pub const TOLERANCE: f64 = 1e-4;
pub const DEFAULT_SEEDS: usize = 10;

pub const CASES: &[&str] = &[
    "conv2d",
    "xcorr_depthwise",
    "softmax",
    "resize_bilinear",
    "global_avg_pool",
    "linear",
    "add_bias",
    "add",
    "mul",
    "scale",
    "scale_by",
    "relu",
    "sigmoid",
    "concat",
    "crop",
    "select",
    "spatial_pool",
    "layer_norm",
    "reshape",
    "sum",
    "cls_level",
    "reg_level",
    "loc_correlation",
    "global_context",
    "aspp",
    "loc_level",
    "attention_softmax",
    "attention_sigmoid",
    "attention_free",
    "fuse_levels",
    "forward_heads",
    "loss_cls",
    "loss_reg",
    "loss_loc",
];

#[derive(Debug, Clone, PartialEq)]
pub struct CaseResult {
    pub name: &'static str,
    pub seeds: usize,
    pub max_rel_error: f64,
}

impl CaseResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error < TOLERANCE
    }
}

/// Cases whose name contains `filter`; an empty selection is an error.
pub fn select(filter: Option<&str>) -> Result<Vec<&'static str>> {
    let picked: Vec<_> = CASES
        .iter()
        .copied()
        .filter(|c| filter.map_or(true, |f| c.contains(f)))
        .collect();
    if picked.is_empty() {
        return Err(invalid(
            "gradcheck",
            format!("filter `{}` matches no case", filter.unwrap_or_default()),
        ));
    }
    Ok(picked)
}

/// Op kind by its reported name, for fault injection.
pub fn parse_op_kind(name: &str) -> Result<OpKind> {
    use OpKind::*;
    let builtin = [
        Conv2d, XCorr, Softmax, Resize, AvgPool, Linear, AddBias, Add, Mul, Scale, ScaleBy, Relu, Sigmoid, Concat, Crop,
        Select, SpatialPool, LayerNorm, Reshape, Sum,
    ];
    let custom = [Custom("loss_cls"), Custom("loss_reg"), Custom("loss_loc")];
    builtin
        .into_iter()
        .chain(custom)
        .find(|k| k.name() == name)
        .ok_or_else(|| invalid("gradcheck", format!("unknown op `{name}`")))
}

pub fn run_suite(filter: Option<&str>, seeds: usize, fault: Option<OpKind>) -> Result<Vec<CaseResult>> {
    select(filter)?
        .into_iter()
        .map(|name| run_case(name, seeds, fault))
        .collect()
}

/// Worst error of one case over seeds `0..seeds`.
pub fn run_case(name: &'static str, seeds: usize, fault: Option<OpKind>) -> Result<CaseResult> {
    let gc = GradCheck::default().with_fault(fault);
    let mut worst: f64 = 0.0;
    for seed in 0..seeds as u64 {
        worst = worst.max(case_error(name, seed, &gc)?);
    }
    Ok(CaseResult {
        name,
        seeds,
        max_rel_error: worst,
    })
}

struct Gen(ChaCha8Rng);

impl Gen {
    fn new(name: &str, seed: u64) -> Self {
        let salt = name.bytes().fold(0u64, |h, b| h.wrapping_mul(131).wrapping_add(b as u64));
        Self(ChaCha8Rng::seed_from_u64(seed ^ salt))
    }

    fn uniform(&mut self, shape: &[usize]) -> Tensor {
        Tensor::from_fn(shape.to_vec(), |_| self.0.gen_range(-1.0..1.0))
    }

    /// Values with magnitude in `[0.1, 1]`, clear of the rectifier kink.
    fn away(&mut self, shape: &[usize]) -> Tensor {
        Tensor::from_fn(shape.to_vec(), |_| {
            let m = self.0.gen_range(0.1..1.0);
            if self.0.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
    }

    fn randomize(&mut self, store: &mut ParamStore, prefixes: &[&str]) -> Vec<(String, Tensor)> {
        store
            .iter()
            .filter(|(n, _)| prefixes.iter().any(|p| n.starts_with(p)))
            .map(|(n, t)| (n.clone(), self.uniform(t.shape()).map(|v| 0.5 * v)))
            .collect()
    }
}

/// `sum(y * r)` with weights fixed by the output shape.
fn readout(tape: &mut Tape, y: Var) -> Result<Var> {
    let shape = tape.shape(y).to_vec();
    let r = Tensor::from_fn(shape, |i| ((i as f64 + 1.0) * 0.754_877_666_2).fract() * 2.0 - 1.0);
    let c = tape.constant(r);
    let p = tape.mul(y, c)?;
    tape.sum(p)
}

fn bind_params<'s>(store: &'s ParamStore, names: &[String], vars: &[Var]) -> Binder<'s> {
    let mut b = Binder::frozen(store);
    for (n, v) in names.iter().zip(vars) {
        b.bind(n, *v);
    }
    b
}

/// Runs `f` with `data` leaves followed by one leaf per parameter.
fn with_params<F>(gc: &GradCheck, store: &ParamStore, params: Vec<(String, Tensor)>, data: Vec<Tensor>, f: F) -> Result<f64>
where
    F: Fn(&mut Tape, &mut Binder, &[Var]) -> Result<Var>,
{
    let n = data.len();
    let (names, values): (Vec<String>, Vec<Tensor>) = params.into_iter().unzip();
    let mut inputs = data;
    inputs.extend(values);
    gc.run(
        |tape, v| {
            let mut b = bind_params(store, &names, &v[n..]);
            let y = f(tape, &mut b, &v[..n])?;
            readout(tape, y)
        },
        &inputs,
    )
}

fn ratio(gc_ratio: usize) -> HeadConfig {
    HeadConfig {
        gc_ratio,
        ..HeadConfig::default()
    }
}

fn head_store(channels: usize, k: usize, levels: usize, cfg: &HeadConfig) -> Result<ParamStore> {
    let mut s = ParamStore::new();
    init_heads(&mut s, cfg, channels, k, levels, 1)?;
    Ok(s)
}

fn random_labels(g: &mut Gen, n: usize) -> MatchLabels {
    let mut labels = Vec::with_capacity(n);
    let mut targets = Vec::with_capacity(n);
    for i in 0..n {
        let l = match i % 3 {
            0 => Label::Positive,
            1 => Label::Negative,
            _ if g.0.gen_bool(0.5) => Label::Ignore,
            _ => Label::Negative,
        };
        targets.push((l == Label::Positive).then(|| [0; 4].map(|_| g.0.gen_range(-1.0..1.0))));
        labels.push(l);
    }
    MatchLabels { labels, targets }
}

fn unary(gc: &GradCheck, x: Tensor, op: impl Fn(&mut Tape, Var) -> Result<Var>) -> Result<f64> {
    gc.run(
        |t, v| {
            let y = op(t, v[0])?;
            readout(t, y)
        },
        &[x],
    )
}

fn binary(gc: &GradCheck, a: Tensor, b: Tensor, op: impl Fn(&mut Tape, Var, Var) -> Result<Var>) -> Result<f64> {
    gc.run(
        |t, v| {
            let y = op(t, v[0], v[1])?;
            readout(t, y)
        },
        &[a, b],
    )
}

fn case_error(name: &str, seed: u64, gc: &GradCheck) -> Result<f64> {
    let mut g = Gen::new(name, seed);
    match name {
        "conv2d" => {
            let geoms = [ConvGeom::new(1, 1, 0), ConvGeom::new(2, 1, 1), ConvGeom::new(1, 2, 2), ConvGeom::new(2, 2, 1)];
            let geom = geoms[seed as usize % geoms.len()];
            binary(gc, g.uniform(&[2, 7, 7]), g.uniform(&[3, 2, 3, 3]), |t, x, k| t.conv2d(x, k, geom))
        }
        "xcorr_depthwise" => binary(gc, g.uniform(&[3, 6, 5]), g.uniform(&[3, 3, 2]), |t, d, k| t.xcorr_depthwise(d, k)),
        "softmax" => {
            let axis = seed as usize % 2;
            unary(gc, g.uniform(&[3, 4]), |t, x| t.softmax(x, axis))
        }
        "resize_bilinear" => {
            let h = 5 + seed as usize % 3;
            unary(gc, g.uniform(&[2, 3, 4]), |t, x| t.resize_bilinear(x, h, 7))
        }
        "global_avg_pool" => unary(gc, g.uniform(&[3, 4, 5]), |t, x| t.global_avg_pool(x)),
        "linear" => gc.run(
            |t, v| {
                let y = t.linear(v[0], v[1], v[2])?;
                readout(t, y)
            },
            &[g.uniform(&[5]), g.uniform(&[3, 5]), g.uniform(&[3])],
        ),
        "add_bias" => binary(gc, g.uniform(&[3, 4, 4]), g.uniform(&[3]), |t, x, b| t.add_bias(x, b)),
        "add" => binary(gc, g.uniform(&[3, 4]), g.uniform(&[3, 4]), |t, a, b| t.add(a, b)),
        "mul" => binary(gc, g.uniform(&[3, 4]), g.uniform(&[3, 4]), |t, a, b| t.mul(a, b)),
        "scale" => {
            let f = g.0.gen_range(-2.0..2.0);
            unary(gc, g.uniform(&[3, 4]), |t, x| t.scale(x, f))
        }
        "scale_by" => {
            let s = Tensor::scalar(g.0.gen_range(-2.0..2.0));
            binary(gc, g.uniform(&[3, 4]), s, |t, x, s| t.scale_by(x, s))
        }
        "relu" => unary(gc, g.away(&[3, 4]), |t, x| t.relu(x)),
        "sigmoid" => unary(gc, g.uniform(&[3, 4]), |t, x| t.sigmoid(x)),
        "concat" => binary(gc, g.uniform(&[2, 3, 3]), g.uniform(&[1, 3, 3]), |t, a, b| t.concat(&[a, b])),
        "crop" => unary(gc, g.uniform(&[2, 6, 6]), |t, x| t.crop(x, 1, 2, 3, 4)),
        "select" => {
            let i = seed as usize % 5;
            unary(gc, g.uniform(&[5]), |t, x| t.select(x, i))
        }
        "spatial_pool" => binary(gc, g.uniform(&[3, 4, 4]), g.uniform(&[16]), |t, x, w| t.spatial_pool(x, w)),
        "layer_norm" => unary(gc, g.uniform(&[6]), |t, x| t.layer_norm(x, 1e-5)),
        "reshape" => unary(gc, g.uniform(&[2, 3, 4]), |t, x| t.reshape(x, &[6, 4])),
        "sum" => unary(gc, g.uniform(&[3, 4]), |t, x| t.sum(x)),
        "cls_level" | "reg_level" => {
            let branch = if name == "cls_level" { Branch::Cls } else { Branch::Reg };
            let mut store = head_store(3, 1, 1, &ratio(3))?;
            let params = g.randomize(&mut store, &[&format!("{}.l0", branch.name())]);
            let data = vec![g.uniform(&[3, 3, 3]), g.uniform(&[3, 7, 7])];
            with_params(gc, &store, params, data, |t, b, v| corr_level_var(t, b, v[0], v[1], branch, 0))
        }
        "loc_correlation" => binary(gc, g.uniform(&[3, 3, 3]), g.uniform(&[3, 6, 6]), loc_correlation_var),
        "global_context" => {
            let cfg = ratio(2);
            let mut store = head_store(4, 1, 1, &cfg)?;
            let params = g.randomize(&mut store, &["loc.l0.gc"]);
            with_params(gc, &store, params, vec![g.uniform(&[4, 4, 4])], |t, b, v| {
                global_context_var(t, b, v[0], "loc.l0.gc", cfg.ln_eps)
            })
        }
        "aspp" => {
            let cfg = ratio(3);
            let mut store = head_store(3, 1, 1, &cfg)?;
            let params = g.randomize(&mut store, &["loc.l0.aspp"]);
            with_params(gc, &store, params, vec![g.uniform(&[3, 6, 6])], |t, b, v| {
                aspp_var(t, b, v[0], "loc.l0.aspp", &cfg.aspp_rates)
            })
        }
        "loc_level" => {
            let cfg = ratio(2);
            let mut store = head_store(4, 1, 1, &cfg)?;
            let params = g.randomize(&mut store, &["loc.l0"]);
            let data = vec![g.uniform(&[4, 3, 3]), g.uniform(&[4, 7, 7])];
            with_params(gc, &store, params, data, |t, b, v| loc_level_var(t, b, v[0], v[1], 0, &cfg))
        }
        "attention_softmax" | "attention_sigmoid" | "attention_free" => {
            let mode = match name {
                "attention_softmax" => AttentionMode::Softmax,
                "attention_sigmoid" => AttentionMode::Sigmoid,
                _ => AttentionMode::FreeScalars,
            };
            let cfg = AttentionConfig { mode, hidden: 3 };
            let mut store = ParamStore::new();
            init_attention(&mut store, &cfg, 1, 3, 1)?;
            let params = g.randomize(&mut store, &["attn.cls"]);
            let data = (0..3).map(|_| g.uniform(&[2, 5, 5])).collect();
            with_params(gc, &store, params, data, |t, b, v| attention_weights_var(t, b, v, Branch::Cls, &cfg))
        }
        "fuse_levels" => {
            let data = vec![g.uniform(&[2, 4, 4]), g.uniform(&[2, 4, 4]), g.uniform(&[2, 4, 4]), g.uniform(&[3])];
            gc.run(
                |t, v| {
                    let y = fuse_levels(t, &v[..3], v[3])?;
                    readout(t, y)
                },
                &data,
            )
        }
        "forward_heads" => {
            let cfg = ratio(2);
            let mut store = head_store(4, 1, 2, &cfg)?;
            init_split(
                &mut store,
                &BackboneConfig {
                    channels: 4,
                    levels: 2,
                    ..BackboneConfig::default()
                },
            );
            let params = g.randomize(&mut store, &["cls.", "reg.", "loc.", "split."]);
            let mut data = Vec::new();
            for _ in 0..2 {
                data.push(g.uniform(&[4, 3, 3]));
                data.push(g.uniform(&[4, 7, 7]));
            }
            for _ in 0..3 {
                data.push(g.uniform(&[2]));
            }
            with_params(gc, &store, params, data, |t, b, v| {
                let pyr = vec![(v[0], v[1]), (v[2], v[3])];
                let out = forward_heads_var(t, b, &pyr, [v[4], v[5], v[6]], &cfg)?;
                // one scalar from all three outputs
                let parts = [out.cls, out.reg, out.loc]
                    .into_iter()
                    .map(|o| {
                        let n = t.value(o).numel();
                        t.reshape(o, &[n])
                    })
                    .collect::<Result<Vec<_>>>()?;
                t.concat(&parts)
            })
        }
        "loss_cls" => {
            let ls = random_labels(&mut g, 2 * 9);
            unary(gc, g.uniform(&[4, 3, 3]), |t, o| loss_cls_var(t, o, &ls))
        }
        "loss_reg" => {
            let ls = random_labels(&mut g, 2 * 9);
            // keep supervised predictions clear of the L1 kink at the targets
            let mut o = g.uniform(&[8, 3, 3]);
            let off = g.away(&[8, 3, 3]);
            for (n, target) in ls.targets.iter().enumerate() {
                if let Some(d) = target {
                    let (a, p) = (n / 9, n % 9);
                    for c in 0..4 {
                        let i = (c * 2 + a) * 9 + p;
                        o.data_mut()[i] = d[c] + off.data()[i];
                    }
                }
            }
            unary(gc, o, |t, o| loss_reg_var(t, o, &ls))
        }
        "loss_loc" => {
            let target = g.uniform(&[4, 4]).map(|v| 0.5 * (v + 1.0));
            unary(gc, g.uniform(&[2, 4, 4]), |t, o| loss_loc_var(t, o, &target))
        }
        _ => Err(invalid("gradcheck", format!("unknown case `{name}`"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn filter_and_fault_names() {
        assert_eq!(select(Some("attention")).unwrap().len(), 3);
        assert!(select(Some("nope")).is_err());
        assert_eq!(select(None).unwrap().len(), CASES.len());
        assert_eq!(parse_op_kind("xcorr_depthwise").unwrap(), OpKind::XCorr);
        assert_eq!(parse_op_kind("loss_loc").unwrap(), OpKind::Custom("loss_loc"));
        assert!(parse_op_kind("leaf").is_err());
    }

    #[test]
    fn every_case_runs_on_one_seed() {
        for name in CASES {
            let r = run_case(name, 1, None).unwrap();
            assert!(r.passed(), "{name}: {}", r.max_rel_error);
        }
    }

    #[test]
    fn injected_fault_is_caught() {
        let r = run_case("xcorr_depthwise", 1, Some(OpKind::XCorr)).unwrap();
        assert!(!r.passed());
    }
}
