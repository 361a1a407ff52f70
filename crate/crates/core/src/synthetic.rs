//! Procedural tracking sequences: a textured rectangle or ellipse moving
//! over a cluttered background, optionally passing under an occluder.
//!
//! Frames are rendered on demand from a compact description, so a store of
//! many long tracks stays small.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::anchors::BBox;
use crate::image::Image;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub frame_width: usize,
    pub frame_height: usize,
    pub frames_per_track: usize,
    pub min_size: f64,
    pub max_size: f64,
    /// Largest width/height ratio (and its inverse) of the object.
    pub max_aspect: f64,
    pub min_speed: f64,
    pub max_speed: f64,
    /// Per-frame standard deviation of the multiplicative size drift.
    pub scale_drift: f64,
    pub occluder_prob: f64,
    pub clutter_blobs: usize,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            frame_width: 320,
            frame_height: 240,
            frames_per_track: 120,
            min_size: 28.0,
            max_size: 64.0,
            max_aspect: 2.0,
            min_speed: 0.5,
            max_speed: 4.0,
            scale_drift: 0.004,
            occluder_prob: 0.2,
            clutter_blobs: 6,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ShapeKind {
    Rect,
    Ellipse,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Appearance {
    pub shape: ShapeKind,
    pub color: [f64; 3],
    pub color2: [f64; 3],
    /// Stripe cycles across the object.
    pub stripes: f64,
    pub stripe_angle: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Blob {
    pub cx: f64,
    pub cy: f64,
    pub r: f64,
    pub color: [f64; 3],
}

#[derive(Debug, Clone, PartialEq)]
pub struct Background {
    pub base: [f64; 3],
    pub tint: [f64; 3],
    pub freq: (f64, f64),
    pub phase: f64,
    pub blobs: Vec<Blob>,
}

/// A bar crossing the frame at constant velocity, drawn above the object.
#[derive(Debug, Clone, PartialEq)]
pub struct Occluder {
    pub start: BBox,
    pub velocity: (f64, f64),
    pub color: [f64; 3],
}

#[derive(Debug, Clone, PartialEq)]
pub struct Track {
    pub width: usize,
    pub height: usize,
    pub appearance: Appearance,
    pub background: Background,
    pub boxes: Vec<BBox>,
    pub occluder: Option<Occluder>,
}

fn random_color<R: Rng>(rng: &mut R) -> [f64; 3] {
    [rng.gen_range(0.05..0.95), rng.gen_range(0.05..0.95), rng.gen_range(0.05..0.95)]
}

fn contrasting_color<R: Rng>(rng: &mut R, other: [f64; 3]) -> [f64; 3] {
    loop {
        let c = random_color(rng);
        let d: f64 = c.iter().zip(&other).map(|(a, b)| (a - b).abs()).sum();
        if d > 0.8 {
            return c;
        }
    }
}

fn mix(a: [f64; 3], b: [f64; 3], t: f64) -> [f64; 3] {
    [a[0] + (b[0] - a[0]) * t, a[1] + (b[1] - a[1]) * t, a[2] + (b[2] - a[2]) * t]
}

fn random_appearance<R: Rng>(rng: &mut R, background: [f64; 3]) -> Appearance {
    let color = contrasting_color(rng, background);
    Appearance {
        shape: if rng.gen_bool(0.5) { ShapeKind::Rect } else { ShapeKind::Ellipse },
        color,
        color2: contrasting_color(rng, color),
        stripes: rng.gen_range(1.0..3.0),
        stripe_angle: rng.gen_range(0.0..std::f64::consts::PI),
    }
}

fn random_background<R: Rng>(rng: &mut R, cfg: &SyntheticConfig) -> Background {
    let base = random_color(rng).map(|v| 0.25 + 0.5 * v);
    Background {
        base,
        tint: random_color(rng),
        freq: (rng.gen_range(0.01..0.05), rng.gen_range(0.01..0.05)),
        phase: rng.gen_range(0.0..6.3),
        blobs: (0..cfg.clutter_blobs)
            .map(|_| Blob {
                cx: rng.gen_range(0.0..cfg.frame_width as f64),
                cy: rng.gen_range(0.0..cfg.frame_height as f64),
                r: rng.gen_range(4.0..14.0),
                color: random_color(rng),
            })
            .collect(),
    }
}

fn random_size<R: Rng>(rng: &mut R, cfg: &SyntheticConfig) -> (f64, f64) {
    let side = rng.gen_range(cfg.min_size..=cfg.max_size);
    let aspect = rng.gen_range(-cfg.max_aspect.ln()..=cfg.max_aspect.ln()).exp();
    (side * aspect.sqrt(), side / aspect.sqrt())
}

/// Random track whose object bounces off the frame borders.
pub fn generate_track<R: Rng>(cfg: &SyntheticConfig, rng: &mut R) -> Track {
    let background = random_background(rng, cfg);
    let appearance = random_appearance(rng, background.base);
    let (mut w, mut h) = random_size(rng, cfg);
    let (fw, fh) = (cfg.frame_width as f64, cfg.frame_height as f64);
    let mut cx = rng.gen_range(w..(fw - w).max(w + 1.0));
    let mut cy = rng.gen_range(h..(fh - h).max(h + 1.0));
    let speed = rng.gen_range(cfg.min_speed..=cfg.max_speed);
    let angle: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let (mut vx, mut vy) = (speed * angle.cos(), speed * angle.sin());
    let mut boxes = Vec::with_capacity(cfg.frames_per_track);
    for _ in 0..cfg.frames_per_track {
        boxes.push(BBox { cx, cy, w, h });
        let s = 1.0 + cfg.scale_drift * (rng.gen::<f64>() * 2.0 - 1.0) * 3f64.sqrt();
        w = (w * s).clamp(cfg.min_size * 0.7, cfg.max_size * 1.3);
        h = (h * s).clamp(cfg.min_size * 0.7, cfg.max_size * 1.3);
        cx += vx;
        cy += vy;
        if cx < w / 2.0 || cx > fw - w / 2.0 {
            vx = -vx;
            cx = cx.clamp(w / 2.0, fw - w / 2.0);
        }
        if cy < h / 2.0 || cy > fh - h / 2.0 {
            vy = -vy;
            cy = cy.clamp(h / 2.0, fh - h / 2.0);
        }
    }
    let occluder = rng.gen_bool(cfg.occluder_prob).then(|| {
        let vertical = rng.gen_bool(0.5);
        let t_cross = rng.gen_range(0..cfg.frames_per_track.max(1)) as f64;
        let target = boxes[t_cross as usize];
        let v = rng.gen_range(2.0..5.0) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        let (bw, bh) = if vertical { (rng.gen_range(8.0..16.0), fh) } else { (fw, rng.gen_range(8.0..16.0)) };
        let start = if vertical {
            BBox { cx: target.cx - v * t_cross, cy: fh / 2.0, w: bw, h: bh }
        } else {
            BBox { cx: fw / 2.0, cy: target.cy - v * t_cross, w: bw, h: bh }
        };
        Occluder {
            start,
            velocity: if vertical { (v, 0.0) } else { (0.0, v) },
            color: random_color(rng),
        }
    });
    Track {
        width: cfg.frame_width,
        height: cfg.frame_height,
        appearance,
        background,
        boxes,
        occluder,
    }
}

/// Track with constant velocity `(vx, vy)` px/frame and fixed size, laid out
/// so the object stays inside the frame for all `frames`.
pub fn constant_velocity_track<R: Rng>(
    cfg: &SyntheticConfig,
    frames: usize,
    velocity: (f64, f64),
    rng: &mut R,
) -> Track {
    let background = random_background(rng, cfg);
    let appearance = random_appearance(rng, background.base);
    let (w, h) = random_size(rng, cfg);
    let (fw, fh) = (cfg.frame_width as f64, cfg.frame_height as f64);
    let span = frames.saturating_sub(1) as f64;
    let (cx0, cy0) = (fw / 2.0 - velocity.0 * span / 2.0, fh / 2.0 - velocity.1 * span / 2.0);
    let boxes = (0..frames)
        .map(|t| BBox {
            cx: cx0 + velocity.0 * t as f64,
            cy: cy0 + velocity.1 * t as f64,
            w,
            h,
        })
        .collect();
    Track {
        width: cfg.frame_width,
        height: cfg.frame_height,
        appearance,
        background,
        boxes,
        occluder: None,
    }
}

/// Fraction of a pixel at offset `d` (positive outside) covered by a shape.
fn coverage(d: f64) -> f64 {
    (0.5 - d).clamp(0.0, 1.0)
}

impl Track {
    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    pub fn occluder_at(&self, t: usize) -> Option<BBox> {
        self.occluder.as_ref().map(|o| {
            o.start
                .translated(o.velocity.0 * t as f64, o.velocity.1 * t as f64)
        })
    }

    fn background_color(&self, x: f64, y: f64) -> [f64; 3] {
        let bg = &self.background;
        let wave = 0.5 + 0.5 * (x * bg.freq.0 + bg.phase).sin() * (y * bg.freq.1).cos();
        let mut c = mix(bg.base, bg.tint, 0.3 * wave);
        for b in &bg.blobs {
            let d = ((x - b.cx).powi(2) + (y - b.cy).powi(2)).sqrt() - b.r;
            let a = coverage(d);
            if a > 0.0 {
                c = mix(c, b.color, a);
            }
        }
        c
    }

    fn object_coverage(&self, b: &BBox, x: f64, y: f64) -> f64 {
        let (dx, dy) = (x - b.cx, y - b.cy);
        let d = match self.appearance.shape {
            ShapeKind::Rect => (dx.abs() - b.w / 2.0).max(dy.abs() - b.h / 2.0),
            ShapeKind::Ellipse => {
                let r = ((dx / (b.w / 2.0)).powi(2) + (dy / (b.h / 2.0)).powi(2)).sqrt();
                (r - 1.0) * b.w.min(b.h) / 2.0
            }
        };
        coverage(d)
    }

    fn object_color(&self, b: &BBox, x: f64, y: f64) -> [f64; 3] {
        let a = &self.appearance;
        let (u, v) = ((x - b.cx) / b.w, (y - b.cy) / b.h);
        let s = u * a.stripe_angle.cos() + v * a.stripe_angle.sin();
        let t = 0.5 + 0.5 * (std::f64::consts::TAU * a.stripes * s).sin();
        mix(a.color, a.color2, t)
    }

    pub fn render(&self, t: usize) -> Image {
        let b = self.boxes[t];
        let occ = self.occluder_at(t);
        let occ_color = self.occluder.as_ref().map(|o| o.color).unwrap_or([0.0; 3]);
        let mut img = Image::new(self.width, self.height, [0.0; 3]);
        for py in 0..self.height {
            let y = py as f64;
            for px in 0..self.width {
                let x = px as f64;
                let mut c = self.background_color(x, y);
                let a = self.object_coverage(&b, x, y);
                if a > 0.0 {
                    c = mix(c, self.object_color(&b, x, y), a);
                }
                if let Some(o) = &occ {
                    let d = ((x - o.cx).abs() - o.w / 2.0).max((y - o.cy).abs() - o.h / 2.0);
                    let a = coverage(d);
                    if a > 0.0 {
                        c = mix(c, occ_color, a);
                    }
                }
                img.set(px, py, c);
            }
        }
        img
    }

    pub fn render_all(&self) -> Vec<Image> {
        (0..self.len()).map(|t| self.render(t)).collect()
    }
}

/// Collection of tracks used as a training dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackStore {
    pub tracks: Vec<Track>,
}

impl TrackStore {
    pub fn generate(cfg: &SyntheticConfig, count: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            tracks: (0..count).map(|_| generate_track(cfg, &mut rng)).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.tracks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tracks.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tracks_are_seeded_and_inside_frame() {
        let cfg = SyntheticConfig::default();
        let a = TrackStore::generate(&cfg, 3, 5);
        assert_eq!(a, TrackStore::generate(&cfg, 3, 5));
        for t in &a.tracks {
            assert_eq!(t.len(), cfg.frames_per_track);
            for b in &t.boxes {
                assert!(b.cx >= 0.0 && b.cx <= 320.0 && b.cy >= 0.0 && b.cy <= 240.0);
                assert!(b.is_valid());
            }
        }
    }

    #[test]
    fn object_is_visible_in_render() {
        let cfg = SyntheticConfig {
            occluder_prob: 0.0,
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = constant_velocity_track(&cfg, 10, (3.0, -1.0), &mut rng);
        assert_eq!(t.boxes[9].cx - t.boxes[0].cx, 27.0);
        let img = t.render(0);
        let b = t.boxes[0];
        let center = img.get(b.cx.round() as usize, b.cy.round() as usize);
        let a = &t.appearance;
        let expect = t.object_color(&b, b.cx.round(), b.cy.round());
        for c in 0..3 {
            assert!((center[c] - expect[c]).abs() < 1e-12);
            assert!(center[c] >= a.color[c].min(a.color2[c]) - 1e-12);
        }
    }
}
