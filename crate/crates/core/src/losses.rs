//! Classification, regression and localization loss terms.
//!
//! Score volumes use these channel layouts:
//!
//! * classification `[2k, h, w]`: channel `a` is the background logit of
//!   anchor `a`, channel `k + a` its foreground logit;
//! * regression `[4k, h, w]`: channel `d * k + a` is delta component `d` of anchor `a`;
//! * localization `[2, h, w]`: channel 0 background, channel 1 center.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::anchors::{BBox, Label, MatchLabels};
use crate::error::{invalid, mismatch, Result};
use crate::numerics::{CustomOp, Tape, Tensor, Var};

/// Lower clip applied to probabilities inside the logarithms.
pub const LOG_EPS: f64 = 1e-7;

/// IoU a shifted box must retain for the center-target radius.
pub const CENTER_RADIUS_IOU: f64 = 0.7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub cls: f64,
    pub reg: f64,
    pub loc: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            cls: 1.0,
            reg: 1.0,
            loc: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_cls: f64,
    pub l_reg: f64,
    pub l_loc: f64,
    pub lambdas: LossWeights,
    pub total: f64,
}

/// Weighted sum of the three terms. Pairs without the template object are
/// supervised by classification only.
pub fn loss_total(l_cls: f64, l_reg: f64, l_loc: f64, lambdas: LossWeights, positive_pair: bool) -> LossBreakdown {
    let (l_reg, l_loc) = if positive_pair { (l_reg, l_loc) } else { (0.0, 0.0) };
    LossBreakdown {
        l_cls,
        l_reg,
        l_loc,
        lambdas,
        total: lambdas.cls * l_cls + lambdas.reg * l_reg + lambdas.loc * l_loc,
    }
}

/// Largest diagonal center shift (pixels) that keeps IoU with the original
/// box at or above `min_iou`.
pub fn center_radius(w: f64, h: f64, min_iou: f64) -> f64 {
    let s = w + h;
    let c = w * h * (1.0 - min_iou) / (1.0 + min_iou);
    (s - (s * s - 4.0 * c).sqrt()) / 2.0
}

/// Gaussian center target over a `map_h x map_w` lattice with spacing
/// `stride` whose middle cell sits at pixel `origin`. The target center is
/// snapped to the nearest cell; sigma is a third of the size-adaptive
/// radius in cells, with the radius floored at one cell.
pub fn gaussian_center_map(gt: &BBox, map_w: usize, map_h: usize, stride: f64, origin: f64) -> Result<Tensor> {
    if !gt.is_valid() {
        return Err(invalid("gaussian_center_map", format!("degenerate box {gt:?}")));
    }
    let j0 = ((gt.cx - origin) / stride + (map_w as f64 - 1.0) / 2.0).round();
    let i0 = ((gt.cy - origin) / stride + (map_h as f64 - 1.0) / 2.0).round();
    let radius = (center_radius(gt.w, gt.h, CENTER_RADIUS_IOU) / stride).max(1.0);
    let sigma = radius / 3.0;
    Ok(gaussian_map(map_w, map_h, i0, j0, sigma))
}

/// `exp(-((i - i0)^2 + (j - j0)^2) / (2 sigma^2))` on an `h x w` grid.
pub fn gaussian_map(map_w: usize, map_h: usize, i0: f64, j0: f64, sigma: f64) -> Tensor {
    let denom = 2.0 * sigma * sigma;
    Tensor::from_fn([map_h, map_w], |idx| {
        let i = (idx / map_w) as f64;
        let j = (idx % map_w) as f64;
        (-((i - i0).powi(2) + (j - j0).powi(2)) / denom).exp()
    })
}

fn sigmoid(d: f64) -> (f64, f64) {
    // (p, 1 - p) without cancellation
    (1.0 / (1.0 + (-d).exp()), 1.0 / (1.0 + d.exp()))
}

/// `-1/2 [t log p + (1 - t) log(1 - p)]` with clipped logs, and its
/// derivative with respect to the logit difference `d`.
fn binary_ce(d: f64, target: f64) -> (f64, f64) {
    let (p, q) = sigmoid(d);
    let mut loss = 0.0;
    let mut grad = 0.0;
    if target != 0.0 {
        loss -= 0.5 * target * p.max(LOG_EPS).ln();
        if p > LOG_EPS {
            grad -= 0.5 * target * q;
        }
    }
    if target != 1.0 {
        loss -= 0.5 * (1.0 - target) * q.max(LOG_EPS).ln();
        if q > LOG_EPS {
            grad += 0.5 * (1.0 - target) * p;
        }
    }
    (loss, grad)
}

struct ClsLoss {
    /// (flat anchor index, target probability)
    terms: Vec<(usize, f64)>,
    k: usize,
    plane: usize,
}

impl ClsLoss {
    fn new(shape: &[usize], labels: &MatchLabels) -> Result<Self> {
        if shape.len() != 3 || shape[0] % 2 != 0 {
            return Err(mismatch("loss_cls", format!("expected [2k,h,w], got {shape:?}")));
        }
        let k = shape[0] / 2;
        let plane = shape[1] * shape[2];
        if labels.labels.len() != k * plane {
            return Err(mismatch(
                "loss_cls",
                format!("{} labels for {} anchors", labels.labels.len(), k * plane),
            ));
        }
        let terms = labels
            .labels
            .iter()
            .enumerate()
            .filter_map(|(n, l)| match l {
                Label::Positive => Some((n, 1.0)),
                Label::Negative => Some((n, 0.0)),
                Label::Ignore => None,
            })
            .collect();
        Ok(Self { terms, k, plane })
    }

    fn channels(&self, n: usize) -> (usize, usize) {
        let a = n / self.plane;
        let p = n % self.plane;
        (a * self.plane + p, (self.k + a) * self.plane + p)
    }

    fn forward(&self, logits: &Tensor) -> f64 {
        let z = logits.data();
        self.terms
            .iter()
            .map(|&(n, t)| {
                let (bg, fg) = self.channels(n);
                binary_ce(z[fg] - z[bg], t).0
            })
            .sum()
    }
}

impl CustomOp for ClsLoss {
    fn name(&self) -> &'static str {
        "loss_cls"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad_out: &Tensor) -> Vec<Tensor> {
        let logits = inputs[0];
        let z = logits.data();
        let g = grad_out.item();
        let mut out = Tensor::zeros(logits.shape().to_vec());
        for &(n, t) in &self.terms {
            let (bg, fg) = self.channels(n);
            let (_, dd) = binary_ce(z[fg] - z[bg], t);
            out.data_mut()[fg] += g * dd;
            out.data_mut()[bg] -= g * dd;
        }
        vec![out]
    }
}

struct RegLoss {
    /// (anchor index, target delta)
    terms: Vec<(usize, [f64; 4])>,
    k: usize,
    plane: usize,
}

impl RegLoss {
    fn new(shape: &[usize], labels: &MatchLabels) -> Result<Self> {
        if shape.len() != 3 || shape[0] % 4 != 0 {
            return Err(mismatch("loss_reg", format!("expected [4k,h,w], got {shape:?}")));
        }
        let k = shape[0] / 4;
        let plane = shape[1] * shape[2];
        if labels.labels.len() != k * plane {
            return Err(mismatch(
                "loss_reg",
                format!("{} labels for {} anchors", labels.labels.len(), k * plane),
            ));
        }
        let terms = labels
            .labels
            .iter()
            .zip(&labels.targets)
            .enumerate()
            .filter_map(|(n, (l, t))| match (l, t) {
                (Label::Positive, Some(t)) => Some((n, *t)),
                _ => None,
            })
            .collect();
        Ok(Self { terms, k, plane })
    }

    fn channel(&self, n: usize, d: usize) -> usize {
        let a = n / self.plane;
        (d * self.k + a) * self.plane + n % self.plane
    }

    fn forward(&self, pred: &Tensor) -> f64 {
        if self.terms.is_empty() {
            return 0.0;
        }
        let p = pred.data();
        let sum: f64 = self
            .terms
            .iter()
            .map(|(n, t)| (0..4).map(|d| (p[self.channel(*n, d)] - t[d]).abs()).sum::<f64>())
            .sum();
        sum / self.terms.len() as f64
    }
}

impl CustomOp for RegLoss {
    fn name(&self) -> &'static str {
        "loss_reg"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad_out: &Tensor) -> Vec<Tensor> {
        let pred = inputs[0];
        let mut out = Tensor::zeros(pred.shape().to_vec());
        if self.terms.is_empty() {
            return vec![out];
        }
        let scale = grad_out.item() / self.terms.len() as f64;
        for (n, t) in &self.terms {
            for d in 0..4 {
                let c = self.channel(*n, d);
                let diff = pred.data()[c] - t[d];
                let s = if diff > 0.0 {
                    1.0
                } else if diff < 0.0 {
                    -1.0
                } else {
                    0.0
                };
                out.data_mut()[c] += scale * s;
            }
        }
        vec![out]
    }
}

struct LocLoss {
    target: Tensor,
}

impl LocLoss {
    fn new(shape: &[usize], target: &Tensor) -> Result<Self> {
        if shape.len() != 3 || shape[0] != 2 || target.shape() != &shape[1..] {
            return Err(mismatch(
                "loss_loc",
                format!("prediction {shape:?} vs target {:?}", target.shape()),
            ));
        }
        Ok(Self {
            target: target.clone(),
        })
    }

    fn forward(&self, logits: &Tensor) -> f64 {
        let plane = self.target.numel();
        let z = logits.data();
        self.target
            .data()
            .iter()
            .enumerate()
            .map(|(p, &t)| binary_ce(z[plane + p] - z[p], t).0)
            .sum()
    }
}

impl CustomOp for LocLoss {
    fn name(&self) -> &'static str {
        "loss_loc"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad_out: &Tensor) -> Vec<Tensor> {
        let logits = inputs[0];
        let plane = self.target.numel();
        let g = grad_out.item();
        let z = logits.data();
        let mut out = Tensor::zeros(logits.shape().to_vec());
        for (p, &t) in self.target.data().iter().enumerate() {
            let (_, dd) = binary_ce(z[plane + p] - z[p], t);
            out.data_mut()[plane + p] += g * dd;
            out.data_mut()[p] -= g * dd;
        }
        vec![out]
    }
}

pub fn loss_cls(o_cls: &Tensor, labels: &MatchLabels) -> Result<f64> {
    Ok(ClsLoss::new(o_cls.shape(), labels)?.forward(o_cls))
}

pub fn loss_reg(o_reg: &Tensor, labels: &MatchLabels) -> Result<f64> {
    Ok(RegLoss::new(o_reg.shape(), labels)?.forward(o_reg))
}

pub fn loss_loc(o_loc: &Tensor, target: &Tensor) -> Result<f64> {
    Ok(LocLoss::new(o_loc.shape(), target)?.forward(o_loc))
}

pub fn loss_cls_var(tape: &mut Tape, o_cls: Var, labels: &MatchLabels) -> Result<Var> {
    let op = ClsLoss::new(tape.shape(o_cls), labels)?;
    let value = Tensor::scalar(op.forward(tape.value(o_cls)));
    tape.custom(Arc::new(op), &[o_cls], value)
}

pub fn loss_reg_var(tape: &mut Tape, o_reg: Var, labels: &MatchLabels) -> Result<Var> {
    let op = RegLoss::new(tape.shape(o_reg), labels)?;
    let value = Tensor::scalar(op.forward(tape.value(o_reg)));
    tape.custom(Arc::new(op), &[o_reg], value)
}

pub fn loss_loc_var(tape: &mut Tape, o_loc: Var, target: &Tensor) -> Result<Var> {
    let op = LocLoss::new(tape.shape(o_loc), target)?;
    let value = Tensor::scalar(op.forward(tape.value(o_loc)));
    tape.custom(Arc::new(op), &[o_loc], value)
}
