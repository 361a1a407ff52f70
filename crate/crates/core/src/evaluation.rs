//! Trajectory scoring: VOT accuracy/robustness with resets, a simplified
//! expected-average-overlap, OTB success/precision and long-term F-score.
//!
//! Box files hold one frame per line in corner form `x1,y1,x2,y2`, with an
//! optional fifth confidence column. `nan,nan,nan,nan` marks an absent target.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::anchors::{iou, BBox};
use crate::error::{invalid, mismatch, Error, Result};

/// Frames skipped after a failure before the tracker is re-initialized.
pub const REINIT_GAP: usize = 5;
/// Frames after a re-initialization (inclusive) left out of accuracy.
pub const BURN_IN: usize = 10;
/// Number of overlap thresholds of the success curve, `0, 0.01, ..., 1`.
pub const SUCCESS_STEPS: usize = 101;
pub const PRECISION_RADIUS: f64 = 20.0;
/// Largest center-error threshold of the precision curve, in pixels.
pub const PRECISION_CURVE_MAX: usize = 50;
/// A long-term report counts as correct above this overlap.
pub const LT_IOU: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Trajectory {
    pub boxes: Vec<Option<BBox>>,
    pub confidences: Option<Vec<f64>>,
}

impl Trajectory {
    pub fn new(boxes: Vec<Option<BBox>>) -> Self {
        Self {
            boxes,
            confidences: None,
        }
    }

    pub fn with_confidences(boxes: Vec<Option<BBox>>, confidences: Vec<f64>) -> Result<Self> {
        if boxes.len() != confidences.len() {
            return Err(mismatch(
                "trajectory",
                format!("{} boxes, {} confidences", boxes.len(), confidences.len()),
            ));
        }
        Ok(Self {
            boxes,
            confidences: Some(confidences),
        })
    }

    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut boxes = Vec::new();
        let mut conf = Vec::new();
        let mut columns = None;
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let bad = |why: &str| Error::Format(format!("line {}: {why}: `{line}`", n + 1));
            let vals = line
                .split(',')
                .map(|f| f.trim().parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|_| bad("unparsable number"))?;
            if vals.len() != 4 && vals.len() != 5 {
                return Err(bad("expected 4 or 5 fields"));
            }
            if *columns.get_or_insert(vals.len()) != vals.len() {
                return Err(bad("column count differs from earlier lines"));
            }
            let b = if vals[..4].iter().all(|v| v.is_nan()) {
                None
            } else {
                let b = BBox::from_corners(vals[0], vals[1], vals[2], vals[3]).map_err(|_| bad("invalid box"))?;
                Some(b)
            };
            boxes.push(b);
            if vals.len() == 5 {
                conf.push(vals[4]);
            }
        }
        if columns == Some(5) {
            Self::with_confidences(boxes, conf)
        } else {
            Ok(Self::new(boxes))
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text).map_err(|e| match e {
            Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
            e => e,
        })
    }

    /// Corner-form text; `precision` digits after the decimal point.
    pub fn to_csv(&self, precision: usize) -> String {
        let mut s = String::new();
        for (i, b) in self.boxes.iter().enumerate() {
            let mut fields: Vec<String> = match b {
                Some(b) => b.corners().iter().map(|v| format!("{v:.precision$}")).collect(),
                None => vec!["nan".into(); 4],
            };
            if let Some(c) = &self.confidences {
                fields.push(format!("{:.precision$}", c[i]));
            }
            let _ = writeln!(s, "{}", fields.join(","));
        }
        s
    }
}

fn check_lengths(op: &'static str, traj: &Trajectory, gt: &Trajectory) -> Result<()> {
    if traj.len() != gt.len() {
        return Err(mismatch(op, format!("trajectory has {} frames, ground truth {}", traj.len(), gt.len())));
    }
    Ok(())
}

fn overlap(a: &Option<BBox>, b: &Option<BBox>) -> f64 {
    match (a, b) {
        (Some(a), Some(b)) => iou(a, b),
        _ => 0.0,
    }
}

/// What the reset protocol did at one frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "iou")]
pub enum FrameStatus {
    /// Tracker (re)initialized on ground truth.
    Init,
    /// Counted in accuracy.
    Tracked(f64),
    /// Within the burn-in after a re-initialization; checked for failure only.
    BurnIn(f64),
    Failure,
    /// Waiting for re-initialization, or no ground truth.
    Skipped,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VotResult {
    /// Mean overlap over counted frames; `None` when no frame was counted.
    pub accuracy: Option<f64>,
    pub failures: usize,
    pub trace: Vec<FrameStatus>,
}

/// Offline replay of the supervised reset protocol. The supplied trajectory
/// stands in for the tracker's output after each re-initialization.
pub fn vot_accuracy_robustness(traj: &Trajectory, gt: &Trajectory) -> Result<VotResult> {
    check_lengths("vot_accuracy_robustness", traj, gt)?;
    let n = gt.len();
    let mut trace = Vec::with_capacity(n);
    let mut failures = 0;
    let (mut sum, mut count) = (0.0, 0usize);
    // frame of the next (re)initialization and the last frame of its burn-in
    let mut init_at = 0;
    let mut burn_end = 0;
    let mut first = true;
    for t in 0..n {
        if t < init_at || gt.boxes[t].is_none() && t != init_at {
            trace.push(FrameStatus::Skipped);
            continue;
        }
        if t == init_at {
            if gt.boxes[t].is_none() {
                // wait for the target before initializing
                init_at += 1;
                trace.push(FrameStatus::Skipped);
                continue;
            }
            burn_end = if first { t } else { t + BURN_IN - 1 };
            first = false;
            trace.push(FrameStatus::Init);
            continue;
        }
        let o = overlap(&traj.boxes[t], &gt.boxes[t]);
        if o <= 0.0 {
            failures += 1;
            trace.push(FrameStatus::Failure);
            init_at = t + REINIT_GAP;
        } else if t <= burn_end {
            trace.push(FrameStatus::BurnIn(o));
        } else {
            sum += o;
            count += 1;
            trace.push(FrameStatus::Tracked(o));
        }
    }
    Ok(VotResult {
        accuracy: (count > 0).then(|| sum / count as f64),
        failures,
        trace,
    })
}

/// One tracking run from an initialization to a failure or the sequence end.
#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    /// Overlaps of the frames after the initialization frame.
    pub overlaps: Vec<f64>,
    pub failed: bool,
}

/// Splits a reset trace into segments. Overlaps inside a burn-in count.
pub fn segments(trace: &[FrameStatus]) -> Vec<Segment> {
    let mut out = Vec::new();
    let mut cur: Option<Segment> = None;
    for s in trace {
        match *s {
            FrameStatus::Init => {
                if let Some(seg) = cur.take() {
                    out.push(seg);
                }
                cur = Some(Segment {
                    overlaps: Vec::new(),
                    failed: false,
                });
            }
            FrameStatus::Tracked(o) | FrameStatus::BurnIn(o) => {
                if let Some(seg) = cur.as_mut() {
                    seg.overlaps.push(o);
                }
            }
            FrameStatus::Failure => {
                if let Some(mut seg) = cur.take() {
                    seg.overlaps.push(0.0);
                    seg.failed = true;
                    out.push(seg);
                }
            }
            FrameStatus::Skipped => {}
        }
    }
    out.extend(cur);
    out
}

/// Inclusive range of segment lengths averaged by [`eao_lite`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EaoRange {
    pub lo: usize,
    pub hi: usize,
}

impl Default for EaoRange {
    fn default() -> Self {
        Self { lo: 20, hi: 80 }
    }
}

/// Simplified expected average overlap, an approximation of the VOT measure.
///
/// For each length `N` in the range, every segment that failed or lasts at
/// least `N` frames contributes the mean of its first `N` overlaps, with zeros
/// after a failure. Segments that end early without failing are left out of
/// that `N`. The per-length means are averaged over lengths with at least one
/// contributor; 0 when there are none.
pub fn eao_lite(runs: &[Segment], range: EaoRange) -> Result<f64> {
    if runs.is_empty() {
        return Err(invalid("eao_lite", "no runs"));
    }
    if range.lo == 0 || range.hi < range.lo {
        return Err(invalid("eao_lite", format!("bad length range {}..={}", range.lo, range.hi)));
    }
    let (mut total, mut bins) = (0.0, 0usize);
    for len in range.lo..=range.hi {
        let (mut sum, mut n) = (0.0, 0usize);
        for r in runs {
            if !r.failed && r.overlaps.len() < len {
                continue;
            }
            let s: f64 = r.overlaps.iter().take(len).sum();
            sum += s / len as f64;
            n += 1;
        }
        if n > 0 {
            total += sum / n as f64;
            bins += 1;
        }
    }
    Ok(if bins == 0 { 0.0 } else { total / bins as f64 })
}

/// Threshold `i` of the success grid.
pub fn success_threshold(i: usize) -> f64 {
    i as f64 / (SUCCESS_STEPS - 1) as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuccessPrecision {
    pub success_auc: f64,
    pub precision_at_20: f64,
    /// Fraction of frames with overlap strictly above each grid threshold.
    pub success_curve: Vec<f64>,
    /// Fraction of frames with center error at most `0, 1, ..., 50` pixels.
    pub precision_curve: Vec<f64>,
}

/// Frames without ground truth are skipped; a missing prediction has overlap 0
/// and infinite center error.
pub fn success_precision(traj: &Trajectory, gt: &Trajectory) -> Result<SuccessPrecision> {
    check_lengths("success_precision", traj, gt)?;
    let mut ious = Vec::new();
    let mut dists = Vec::new();
    for (p, g) in traj.boxes.iter().zip(&gt.boxes) {
        let Some(g) = g else { continue };
        ious.push(overlap(p, &Some(*g)));
        dists.push(p.map_or(f64::INFINITY, |p| p.center_distance(g)));
    }
    if ious.is_empty() {
        return Err(invalid("success_precision", "no frame has ground truth"));
    }
    let n = ious.len() as f64;
    let frac = |f: &dyn Fn(usize) -> bool| (0..ious.len()).filter(|i| f(*i)).count() as f64 / n;
    let success_curve: Vec<f64> = (0..SUCCESS_STEPS)
        .map(|i| {
            let th = success_threshold(i);
            frac(&|k| ious[k] > th)
        })
        .collect();
    let precision_curve: Vec<f64> = (0..=PRECISION_CURVE_MAX)
        .map(|r| frac(&|k| dists[k] <= r as f64))
        .collect();
    Ok(SuccessPrecision {
        success_auc: success_curve.iter().sum::<f64>() / SUCCESS_STEPS as f64,
        precision_at_20: frac(&|k| dists[k] <= PRECISION_RADIUS),
        success_curve,
        precision_curve,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
    pub f: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FScore {
    pub max_f: f64,
    /// `None` when the tracker never reports the target.
    pub best_threshold: Option<f64>,
    /// One point per distinct reported confidence, ascending.
    pub curve: Vec<PrPoint>,
}

fn f_measure(p: f64, r: f64) -> f64 {
    if p + r > 0.0 {
        2.0 * p * r / (p + r)
    } else {
        0.0
    }
}

/// At threshold `τ` the tracker reports the frames it has a box for with
/// confidence `≥ τ`. Precision is the fraction of reports with overlap above
/// 0.5, recall the number of such reports over frames with the target present.
/// Ties in F keep the lowest threshold.
pub fn f_score_longterm(traj: &Trajectory, gt: &Trajectory) -> Result<FScore> {
    check_lengths("f_score_longterm", traj, gt)?;
    let conf = traj
        .confidences
        .as_ref()
        .ok_or_else(|| invalid("f_score_longterm", "trajectory has no confidences"))?;
    let mut reports: Vec<(f64, bool)> = Vec::new();
    for ((p, g), c) in traj.boxes.iter().zip(&gt.boxes).zip(conf) {
        if p.is_some() {
            if !c.is_finite() {
                return Err(invalid("f_score_longterm", "non-finite confidence on a reported frame"));
            }
            reports.push((*c, overlap(p, g) > LT_IOU));
        }
    }
    let present = gt.boxes.iter().filter(|b| b.is_some()).count();
    let mut thresholds: Vec<f64> = reports.iter().map(|r| r.0).collect();
    thresholds.sort_by(f64::total_cmp);
    thresholds.dedup();
    let curve: Vec<PrPoint> = thresholds
        .iter()
        .map(|&th| {
            let kept = reports.iter().filter(|r| r.0 >= th);
            let (n, correct) = kept.fold((0usize, 0usize), |(n, c), r| (n + 1, c + r.1 as usize));
            let precision = correct as f64 / n as f64;
            let recall = if present == 0 { 0.0 } else { correct as f64 / present as f64 };
            PrPoint {
                threshold: th,
                precision,
                recall,
                f: f_measure(precision, recall),
            }
        })
        .collect();
    let mut best: Option<&PrPoint> = None;
    for p in &curve {
        if best.map_or(true, |b| p.f > b.f) {
            best = Some(p);
        }
    }
    Ok(FScore {
        max_f: best.map_or(0.0, |b| b.f),
        best_threshold: best.map(|b| b.threshold),
        curve,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    Vot,
    Otb,
    Ltb,
}

impl std::str::FromStr for Protocol {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vot" => Ok(Self::Vot),
            "otb" => Ok(Self::Otb),
            "ltb" => Ok(Self::Ltb),
            _ => Err(invalid("protocol", format!("unknown protocol `{s}` (vot, otb, ltb)"))),
        }
    }
}

/// Sequence-averaged metrics; fields outside the chosen protocol are absent.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub sequences: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<f64>,
    /// Failures per sequence.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub robustness: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eao_lite: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub success_auc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub precision_at_20: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_f_score: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub f_threshold: Option<f64>,
}

/// Plot-ready curves as `(name, csv text)`.
pub type Curves = Vec<(String, String)>;

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Scores `(trajectory, ground truth)` pairs under one protocol.
///
/// VOT accuracy averages per-sequence accuracies of sequences that have one;
/// OTB curves are averaged per sequence; LTB pools all frames of all
/// sequences before sweeping thresholds.
pub fn score(protocol: Protocol, pairs: &[(Trajectory, Trajectory)], eao: EaoRange) -> Result<(MetricReport, Curves)> {
    if pairs.is_empty() {
        return Err(invalid("score", "no sequences"));
    }
    let mut report = MetricReport {
        sequences: pairs.len(),
        ..Default::default()
    };
    let mut curves = Curves::new();
    match protocol {
        Protocol::Vot => {
            let mut accs = Vec::new();
            let mut fails = 0usize;
            let mut segs = Vec::new();
            for (t, g) in pairs {
                let r = vot_accuracy_robustness(t, g)?;
                accs.extend(r.accuracy);
                fails += r.failures;
                segs.extend(segments(&r.trace));
            }
            report.accuracy = (!accs.is_empty()).then(|| mean(&accs));
            report.robustness = Some(fails as f64 / pairs.len() as f64);
            report.eao_lite = Some(if segs.is_empty() { 0.0 } else { eao_lite(&segs, eao)? });
        }
        Protocol::Otb => {
            let all = pairs
                .iter()
                .map(|(t, g)| success_precision(t, g))
                .collect::<Result<Vec<_>>>()?;
            let avg = |f: &dyn Fn(&SuccessPrecision) -> &Vec<f64>| -> Vec<f64> {
                (0..f(&all[0]).len())
                    .map(|i| mean(&all.iter().map(|s| f(s)[i]).collect::<Vec<_>>()))
                    .collect()
            };
            let success = avg(&|s| &s.success_curve);
            let precision = avg(&|s| &s.precision_curve);
            report.success_auc = Some(mean(&all.iter().map(|s| s.success_auc).collect::<Vec<_>>()));
            report.precision_at_20 = Some(mean(&all.iter().map(|s| s.precision_at_20).collect::<Vec<_>>()));
            let mut sc = String::from("threshold,success\n");
            for (i, v) in success.iter().enumerate() {
                let _ = writeln!(sc, "{:.2},{v:.6}", success_threshold(i));
            }
            let mut pc = String::from("threshold,precision\n");
            for (r, v) in precision.iter().enumerate() {
                let _ = writeln!(pc, "{r},{v:.6}");
            }
            curves.push(("success".into(), sc));
            curves.push(("precision".into(), pc));
        }
        Protocol::Ltb => {
            let mut traj = Trajectory::with_confidences(Vec::new(), Vec::new())?;
            let mut gt = Trajectory::new(Vec::new());
            for (t, g) in pairs {
                check_lengths("score", t, g)?;
                let c = t
                    .confidences
                    .as_ref()
                    .ok_or_else(|| invalid("score", "long-term scoring needs confidences"))?;
                traj.boxes.extend(&t.boxes);
                traj.confidences.as_mut().expect("set above").extend(c);
                gt.boxes.extend(&g.boxes);
            }
            let f = f_score_longterm(&traj, &gt)?;
            report.max_f_score = Some(f.max_f);
            report.f_threshold = f.best_threshold;
            let mut pr = String::from("threshold,precision,recall,f\n");
            for p in &f.curve {
                let _ = writeln!(pr, "{:.6},{:.6},{:.6},{:.6}", p.threshold, p.precision, p.recall, p.f);
            }
            curves.push(("pr".into(), pr));
        }
    }
    Ok((report, curves))
}
