//! Anchor paving, jaccard overlap, label assignment and box delta coding.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Axis-aligned box in pixels, center form.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        let b = Self { cx, cy, w, h };
        if !b.is_valid() {
            return Err(invalid("box", format!("invalid box {b:?}")));
        }
        Ok(b)
    }

    pub fn is_valid(&self) -> bool {
        [self.cx, self.cy, self.w, self.h].iter().all(|v| v.is_finite()) && self.w > 0.0 && self.h > 0.0
    }

    pub fn from_corners(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        Self::new((x1 + x2) / 2.0, (y1 + y2) / 2.0, x2 - x1, y2 - y1)
    }

    /// `(x1, y1, x2, y2)`.
    pub fn corners(&self) -> [f64; 4] {
        [
            self.cx - self.w / 2.0,
            self.cy - self.h / 2.0,
            self.cx + self.w / 2.0,
            self.cy + self.h / 2.0,
        ]
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn translated(&self, dx: f64, dy: f64) -> Self {
        Self {
            cx: self.cx + dx,
            cy: self.cy + dy,
            ..*self
        }
    }

    pub fn center_distance(&self, other: &BBox) -> f64 {
        ((self.cx - other.cx).powi(2) + (self.cy - other.cy).powi(2)).sqrt()
    }
}

/// Intersection over union; 0 for disjoint boxes.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let [ax1, ay1, ax2, ay2] = a.corners();
    let [bx1, by1, bx2, by2] = b.corners();
    let iw = (ax2.min(bx2) - ax1.max(bx1)).max(0.0);
    let ih = (ay2.min(by2) - ay1.max(by1)).max(0.0);
    let inter = iw * ih;
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// How box offsets are normalized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeltaMode {
    /// Center offsets divided by anchor width/height, log size ratios.
    #[default]
    Standard,
    /// Center offsets divided by the anchor center coordinates. Singular at
    /// the origin.
    Literal,
}

pub fn encode_delta(anchor: &BBox, gt: &BBox, mode: DeltaMode) -> Result<[f64; 4]> {
    let (nx, ny) = normalizers(anchor, mode)?;
    Ok([
        (gt.cx - anchor.cx) / nx,
        (gt.cy - anchor.cy) / ny,
        (gt.w / anchor.w).ln(),
        (gt.h / anchor.h).ln(),
    ])
}

pub fn decode_delta(anchor: &BBox, delta: &[f64; 4], mode: DeltaMode) -> Result<BBox> {
    let (nx, ny) = normalizers(anchor, mode)?;
    Ok(BBox {
        cx: anchor.cx + delta[0] * nx,
        cy: anchor.cy + delta[1] * ny,
        w: anchor.w * delta[2].exp(),
        h: anchor.h * delta[3].exp(),
    })
}

fn normalizers(anchor: &BBox, mode: DeltaMode) -> Result<(f64, f64)> {
    match mode {
        DeltaMode::Standard => Ok((anchor.w, anchor.h)),
        DeltaMode::Literal => {
            if anchor.cx == 0.0 || anchor.cy == 0.0 {
                return Err(invalid(
                    "encode_delta",
                    "literal mode is singular for an anchor centered on an axis",
                ));
            }
            Ok((anchor.cx, anchor.cy))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnchorConfig {
    pub stride: f64,
    /// Width / height.
    pub ratios: Vec<f64>,
    pub scales: Vec<f64>,
    /// Pixel position the center of the anchor lattice maps to.
    pub origin: f64,
    pub pos_iou: f64,
    pub neg_iou: f64,
    pub delta_mode: DeltaMode,
}

impl Default for AnchorConfig {
    fn default() -> Self {
        Self {
            stride: 8.0,
            ratios: vec![1.0 / 3.0, 0.5, 1.0, 2.0, 3.0],
            scales: vec![8.0],
            origin: 127.0,
            pos_iou: 0.6,
            neg_iou: 0.3,
            delta_mode: DeltaMode::Standard,
        }
    }
}

impl AnchorConfig {
    pub fn anchors_per_cell(&self) -> usize {
        self.ratios.len() * self.scales.len()
    }

    /// Lattice origin for a square search patch of `search_size` pixels.
    pub fn for_search_size(search_size: usize) -> Self {
        Self {
            origin: (search_size as f64 - 1.0) / 2.0,
            ..Self::default()
        }
    }
}

/// Anchors for every cell of a `map_h x map_w` response map.
///
/// Flat index of anchor `a` at row `i`, column `j` is `(a * map_h + i) * map_w + j`,
/// matching channel `a` of a `[k, h, w]` score volume.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorSet {
    pub map_w: usize,
    pub map_h: usize,
    pub k: usize,
    pub stride: f64,
    boxes: Vec<BBox>,
}

impl AnchorSet {
    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    pub fn boxes(&self) -> &[BBox] {
        &self.boxes
    }

    pub fn index(&self, a: usize, i: usize, j: usize) -> usize {
        (a * self.map_h + i) * self.map_w + j
    }

    pub fn get(&self, a: usize, i: usize, j: usize) -> &BBox {
        &self.boxes[self.index(a, i, j)]
    }

    /// `(a, i, j)` of a flat index.
    pub fn unravel(&self, idx: usize) -> (usize, usize, usize) {
        let plane = self.map_h * self.map_w;
        (idx / plane, (idx % plane) / self.map_w, idx % self.map_w)
    }
}

pub fn generate_anchors(map_w: usize, map_h: usize, cfg: &AnchorConfig) -> AnchorSet {
    let mut shapes = Vec::with_capacity(cfg.anchors_per_cell());
    for &r in &cfg.ratios {
        for &s in &cfg.scales {
            let base = s * cfg.stride;
            shapes.push((base * r.sqrt(), base / r.sqrt()));
        }
    }
    let k = shapes.len();
    let x0 = cfg.origin - (map_w as f64 - 1.0) / 2.0 * cfg.stride;
    let y0 = cfg.origin - (map_h as f64 - 1.0) / 2.0 * cfg.stride;
    let mut boxes = Vec::with_capacity(k * map_w * map_h);
    for &(w, h) in &shapes {
        for i in 0..map_h {
            for j in 0..map_w {
                boxes.push(BBox {
                    cx: x0 + j as f64 * cfg.stride,
                    cy: y0 + i as f64 * cfg.stride,
                    w,
                    h,
                });
            }
        }
    }
    AnchorSet {
        map_w,
        map_h,
        k,
        stride: cfg.stride,
        boxes,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Label {
    Positive,
    Negative,
    Ignore,
}

/// Per-anchor assignment; `targets[n]` is set exactly for positive anchors.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchLabels {
    pub labels: Vec<Label>,
    pub targets: Vec<Option<[f64; 4]>>,
}

impl MatchLabels {
    /// Every anchor negative, as for a pair without the template object.
    pub fn all_negative(n: usize) -> Self {
        Self {
            labels: vec![Label::Negative; n],
            targets: vec![None; n],
        }
    }

    pub fn num_positive(&self) -> usize {
        self.labels.iter().filter(|l| **l == Label::Positive).count()
    }

    pub fn num_negative(&self) -> usize {
        self.labels.iter().filter(|l| **l == Label::Negative).count()
    }
}

pub fn match_anchors(anchors: &AnchorSet, gt: &BBox, cfg: &AnchorConfig) -> Result<MatchLabels> {
    let mut labels = Vec::with_capacity(anchors.len());
    let mut targets = Vec::with_capacity(anchors.len());
    for a in anchors.boxes() {
        let o = iou(a, gt);
        if o > cfg.pos_iou {
            labels.push(Label::Positive);
            targets.push(Some(encode_delta(a, gt, cfg.delta_mode)?));
        } else if o < cfg.neg_iou {
            labels.push(Label::Negative);
            targets.push(None);
        } else {
            labels.push(Label::Ignore);
            targets.push(None);
        }
    }
    Ok(MatchLabels { labels, targets })
}
