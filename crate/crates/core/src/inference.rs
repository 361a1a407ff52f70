//! Score fusion, peak selection and sequence tracking.

use serde::{Deserialize, Serialize};

use crate::anchors::{decode_delta, AnchorSet, BBox};
use crate::error::{invalid, mismatch, Result};
use crate::image::{crop_patch, Image};
use crate::model::SiamMan;
use crate::numerics::{Tape, Tensor, Var};
use crate::params::Binder;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FusionConfig {
    /// Weight of the classification score against the localization score.
    pub omega1: f64,
    /// Weight of the penalized score against the cosine window.
    pub omega2: f64,
    pub k_pen: f64,
    /// Base rate of the size interpolation.
    pub eta0: f64,
    /// When false the localization map is replaced by the classification score.
    pub use_localization: bool,
    pub use_attention: bool,
    /// Smallest box side kept while tracking, in frame pixels.
    pub min_size: f64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            omega1: 0.7,
            omega2: 0.6,
            k_pen: 0.04,
            eta0: 0.3,
            use_localization: true,
            use_attention: true,
            min_size: 10.0,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.omega1) || !(0.0..=1.0).contains(&self.omega2) {
            return Err(invalid("fusion_config", "omega weights must lie in [0, 1]"));
        }
        if self.k_pen < 0.0 || self.eta0 < 0.0 {
            return Err(invalid("fusion_config", "penalty and rate must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrackState {
    pub bbox: BBox,
    pub score: f64,
}

fn hann(n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![1.0];
    }
    (0..n)
        .map(|i| 0.5 - 0.5 * (std::f64::consts::TAU * i as f64 / (n - 1) as f64).cos())
        .collect()
}

/// Outer product of Hann windows, `[h, w]`.
pub fn cosine_window(w: usize, h: usize) -> Tensor {
    let (hx, hy) = (hann(w), hann(h));
    Tensor::from_fn([h, w], |i| hy[i / w] * hx[i % w])
}

/// Padded equivalent side `sqrt((w + p)(h + p))` with `p = (w + h) / 2`.
pub fn padded_size(w: f64, h: f64) -> f64 {
    let p = (w + h) / 2.0;
    ((w + p) * (h + p)).sqrt()
}

fn change(r: f64) -> f64 {
    r.max(1.0 / r)
}

/// Penalty of one candidate against the previous box.
pub fn penalty(candidate: &BBox, prev: &BBox, k_pen: f64) -> f64 {
    let r_c = change((candidate.w / candidate.h) / (prev.w / prev.h));
    let s_c = change(padded_size(candidate.w, candidate.h) / padded_size(prev.w, prev.h));
    (-k_pen * (r_c * s_c - 1.0)).exp()
}

/// `rho` for every candidate, laid out like the anchors.
pub fn scale_penalty(candidates: &[BBox], anchors: &AnchorSet, prev: &BBox, k_pen: f64) -> Result<Tensor> {
    if candidates.len() != anchors.len() {
        return Err(mismatch(
            "scale_penalty",
            format!("{} candidates for {} anchors", candidates.len(), anchors.len()),
        ));
    }
    let data = candidates.iter().map(|c| penalty(c, prev, k_pen)).collect();
    Tensor::new([anchors.k, anchors.map_h, anchors.map_w], data)
}

/// `omega2 * rho * (omega1 * u + (1 - omega1) * c) + (1 - omega2) * xi`, with
/// `c` and `xi` broadcast over anchors.
pub fn fuse_scores(u: &Tensor, c: &Tensor, xi: &Tensor, rho: &Tensor, cfg: &FusionConfig) -> Result<Tensor> {
    if u.rank() != 3 || rho.shape() != u.shape() {
        return Err(mismatch("fuse_scores", format!("u {:?} vs rho {:?}", u.shape(), rho.shape())));
    }
    let (k, h, w) = (u.dim(0), u.dim(1), u.dim(2));
    if c.shape() != [1, h, w] || xi.shape() != [h, w] {
        return Err(mismatch(
            "fuse_scores",
            format!("c {:?} and xi {:?} for maps {h}x{w}", c.shape(), xi.shape()),
        ));
    }
    let plane = h * w;
    let (w1, w2) = (cfg.omega1, cfg.omega2);
    Ok(Tensor::from_fn([k, h, w], |i| {
        let p = i % plane;
        w2 * rho.data()[i] * (w1 * u.data()[i] + (1.0 - w1) * c.data()[p]) + (1.0 - w2) * xi.data()[p]
    }))
}

/// Flat index of the maximum, lowest index on ties.
pub fn argmax(t: &Tensor) -> usize {
    let mut best = 0;
    for (i, v) in t.data().iter().enumerate() {
        if *v > t.data()[best] {
            best = i;
        }
    }
    best
}

/// Foreground probability per anchor, `[k, h, w]`, from a `[2k, h, w]` volume.
pub fn cls_scores(o_cls: &Tensor) -> Tensor {
    let k = o_cls.dim(0) / 2;
    let (h, w) = (o_cls.dim(1), o_cls.dim(2));
    let plane = h * w;
    Tensor::from_fn([k, h, w], |i| {
        let (a, p) = (i / plane, i % plane);
        let d = o_cls.data()[(k + a) * plane + p] - o_cls.data()[a * plane + p];
        1.0 / (1.0 + (-d).exp())
    })
}

/// Center probability `[1, h, w]` from a `[2, h, w]` volume.
pub fn loc_scores(o_loc: &Tensor) -> Tensor {
    let plane = o_loc.dim(1) * o_loc.dim(2);
    Tensor::from_fn([1, o_loc.dim(1), o_loc.dim(2)], |p| {
        let d = o_loc.data()[plane + p] - o_loc.data()[p];
        1.0 / (1.0 + (-d).exp())
    })
}

/// Boxes decoded from a `[4k, h, w]` regression volume.
pub fn decode_all(o_reg: &Tensor, anchors: &AnchorSet, mode: crate::anchors::DeltaMode) -> Result<Vec<BBox>> {
    let plane = anchors.map_h * anchors.map_w;
    let k = anchors.k;
    if o_reg.shape() != [4 * k, anchors.map_h, anchors.map_w] {
        return Err(mismatch("decode", format!("regression {:?} for {k} anchors", o_reg.shape())));
    }
    anchors
        .boxes()
        .iter()
        .enumerate()
        .map(|(n, a)| {
            let (ai, p) = (n / plane, n % plane);
            let d = [0, 1, 2, 3].map(|c| o_reg.data()[(c * k + ai) * plane + p]);
            decode_delta(a, &d, mode)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Selection {
    pub index: usize,
    pub raw: BBox,
    pub theta: f64,
    pub rho: f64,
}

/// Picks the best candidate and moves the state there, interpolating size
/// at rate `eta0 * rho * theta`. All boxes share one coordinate frame.
pub fn select_and_update(
    theta: &Tensor,
    candidates: &[BBox],
    rho: &Tensor,
    prev: &TrackState,
    cfg: &FusionConfig,
) -> Result<(TrackState, Selection)> {
    if theta.numel() != candidates.len() || rho.shape() != theta.shape() {
        return Err(mismatch(
            "select_and_update",
            format!("theta {:?}, rho {:?}, {} candidates", theta.shape(), rho.shape(), candidates.len()),
        ));
    }
    let index = argmax(theta);
    let raw = candidates[index];
    let sel = Selection {
        index,
        raw,
        theta: theta.data()[index],
        rho: rho.data()[index],
    };
    let eta = (cfg.eta0 * sel.rho * sel.theta).clamp(0.0, 1.0);
    let state = TrackState {
        bbox: BBox {
            cx: raw.cx,
            cy: raw.cy,
            w: (1.0 - eta) * prev.bbox.w + eta * raw.w,
            h: (1.0 - eta) * prev.bbox.h + eta * raw.h,
        },
        score: sel.theta,
    };
    Ok((state, sel))
}

/// Template-side crop length for a box.
pub fn context_size(b: &BBox) -> f64 {
    padded_size(b.w, b.h)
}

/// Template patch for a box in a frame.
pub fn template_patch(frame: &Image, b: &BBox, exemplar: usize) -> Tensor {
    crop_patch(frame, b.cx, b.cy, context_size(b), exemplar, frame.mean_color())
}

/// Search patch around a box plus the patch-per-frame pixel scale.
pub fn search_patch(frame: &Image, b: &BBox, exemplar: usize, search: usize) -> (Tensor, f64) {
    let s_x = context_size(b) * search as f64 / exemplar as f64;
    let patch = crop_patch(frame, b.cx, b.cy, s_x, search, frame.mean_color());
    (patch, search as f64 / s_x)
}

/// Single-target tracker holding the first-frame template features.
pub struct Tracker<'m> {
    model: &'m SiamMan,
    cfg: FusionConfig,
    template: Vec<Tensor>,
    anchors: AnchorSet,
    window: Tensor,
    state: TrackState,
}

impl<'m> Tracker<'m> {
    pub fn new(model: &'m SiamMan, cfg: FusionConfig, first: &Image, init: BBox) -> Result<Self> {
        cfg.validate()?;
        if !init.is_valid() {
            return Err(invalid("track_sequence", format!("invalid initial box {init:?}")));
        }
        let e = model.config.backbone.exemplar_size;
        let patch = template_patch(first, &init, e);
        let mut tape = Tape::new();
        let mut binder = Binder::frozen(&model.params);
        let t = tape.constant(patch);
        let feats = model.template_features(&mut tape, &mut binder, t)?;
        let template = feats.iter().map(|v| tape.value(*v).clone()).collect();
        let anchors = model.config.anchor_set();
        let window = cosine_window(anchors.map_w, anchors.map_h);
        Ok(Self {
            model,
            cfg,
            template,
            anchors,
            window,
            state: TrackState { bbox: init, score: 1.0 },
        })
    }

    pub fn state(&self) -> TrackState {
        self.state
    }

    pub fn step(&mut self, frame: &Image) -> Result<TrackState> {
        let m = self.model;
        let (e, s) = (m.config.backbone.exemplar_size, m.config.backbone.search_size);
        let prev = self.state.bbox;
        let (patch, scale) = search_patch(frame, &prev, e, s);

        let mut tape = Tape::new();
        let mut binder = Binder::frozen(&m.params);
        let t: Vec<Var> = self.template.iter().map(|f| tape.constant(f.clone())).collect();
        let x = tape.constant(patch);
        let d = m.detection_features(&mut tape, &mut binder, x)?;
        let pyr = t.into_iter().zip(d).collect();
        let fwd = m.heads(&mut tape, &mut binder, &pyr, self.cfg.use_attention)?;
        let out = fwd.out.values(&tape);

        let u = cls_scores(&out.cls);
        let c = if self.cfg.use_localization {
            loc_scores(&out.loc)
        } else {
            u.clone()
        };
        let candidates = decode_all(&out.reg, &self.anchors, m.config.anchors.delta_mode)?;
        let origin = m.config.anchors.origin;
        let prev_patch = TrackState {
            bbox: BBox {
                cx: origin,
                cy: origin,
                w: prev.w * scale,
                h: prev.h * scale,
            },
            score: self.state.score,
        };
        let rho = scale_penalty(&candidates, &self.anchors, &prev_patch.bbox, self.cfg.k_pen)?;
        let theta = if self.cfg.use_localization {
            fuse_scores(&u, &c, &self.window, &rho, &self.cfg)?
        } else {
            // the classification score stands in for the center map per anchor
            let w2 = self.cfg.omega2;
            let plane = self.window.numel();
            Tensor::from_fn(u.shape().to_vec(), |i| {
                w2 * rho.data()[i] * u.data()[i] + (1.0 - w2) * self.window.data()[i % plane]
            })
        };
        let (next, _) = select_and_update(&theta, &candidates, &rho, &prev_patch, &self.cfg)?;

        let b = next.bbox;
        let (fw, fh) = (frame.width as f64, frame.height as f64);
        let min = self.cfg.min_size;
        self.state = TrackState {
            bbox: BBox {
                cx: (prev.cx + (b.cx - origin) / scale).clamp(0.0, fw - 1.0),
                cy: (prev.cy + (b.cy - origin) / scale).clamp(0.0, fh - 1.0),
                w: (b.w / scale).clamp(min, fw),
                h: (b.h / scale).clamp(min, fh),
            },
            score: next.score,
        };
        Ok(self.state)
    }
}

/// Tracks `init` through `frames`; the first state is the initial box with score 1.
pub fn track_sequence(model: &SiamMan, frames: &[Image], init: BBox, cfg: &FusionConfig) -> Result<Vec<TrackState>> {
    let first = frames
        .first()
        .ok_or_else(|| invalid("track_sequence", "empty sequence"))?;
    let mut tracker = Tracker::new(model, cfg.clone(), first, init)?;
    let mut out = Vec::with_capacity(frames.len());
    out.push(tracker.state());
    for f in &frames[1..] {
        out.push(tracker.step(f)?);
    }
    Ok(out)
}
