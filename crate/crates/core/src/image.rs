//! RGB float images, binary PPM I/O and patch sampling.

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Row-major interleaved RGB image with channel values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, fill: [f64; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for _ in 0..width * height {
            data.extend_from_slice(&fill);
        }
        Self { width, height, data }
    }

    pub fn get(&self, x: usize, y: usize) -> [f64; 3] {
        let o = (y * self.width + x) * 3;
        [self.data[o], self.data[o + 1], self.data[o + 2]]
    }

    pub fn set(&mut self, x: usize, y: usize, rgb: [f64; 3]) {
        let o = (y * self.width + x) * 3;
        self.data[o..o + 3].copy_from_slice(&rgb);
    }

    pub fn mean_color(&self) -> [f64; 3] {
        let mut m = [0.0; 3];
        for px in self.data.chunks_exact(3) {
            for c in 0..3 {
                m[c] += px[c];
            }
        }
        let n = (self.width * self.height).max(1) as f64;
        m.map(|v| v / n)
    }

    /// Bilinear sample at a continuous pixel position; outside taps use `pad`.
    pub fn sample(&self, x: f64, y: f64, pad: [f64; 3]) -> [f64; 3] {
        let x0 = x.floor();
        let y0 = y.floor();
        let fx = x - x0;
        let fy = y - y0;
        let mut out = [0.0; 3];
        for (dy, wy) in [(0.0, 1.0 - fy), (1.0, fy)] {
            for (dx, wx) in [(0.0, 1.0 - fx), (1.0, fx)] {
                let w = wx * wy;
                if w == 0.0 {
                    continue;
                }
                let (px, py) = (x0 + dx, y0 + dy);
                let v = if px >= 0.0 && py >= 0.0 && (px as usize) < self.width && (py as usize) < self.height {
                    self.get(px as usize, py as usize)
                } else {
                    pad
                };
                for c in 0..3 {
                    out[c] += w * v[c];
                }
            }
        }
        out
    }

    /// Channel-first tensor `[3, H, W]`.
    pub fn to_tensor(&self) -> Tensor {
        let (w, h) = (self.width, self.height);
        Tensor::from_fn([3, h, w], |i| {
            let c = i / (w * h);
            let p = i % (w * h);
            self.data[p * 3 + c]
        })
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        if t.rank() != 3 || t.dim(0) != 3 {
            return Err(Error::Format(format!("expected [3,H,W] image tensor, got {:?}", t.shape())));
        }
        let (h, w) = (t.dim(1), t.dim(2));
        let mut img = Image::new(w, h, [0.0; 3]);
        for c in 0..3 {
            for (p, v) in t.channel(c).iter().enumerate() {
                img.data[p * 3 + c] = *v;
            }
        }
        Ok(img)
    }

    pub fn write_ppm<W: Write>(&self, w: &mut W) -> Result<()> {
        write!(w, "P6\n{} {}\n255\n", self.width, self.height)?;
        let bytes: Vec<u8> = self
            .data
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        w.write_all(&bytes)?;
        Ok(())
    }

    pub fn read_ppm<R: Read>(r: R) -> Result<Self> {
        let mut r = BufReader::new(r);
        let mut fields = Vec::with_capacity(4);
        let mut line = String::new();
        while fields.len() < 4 {
            line.clear();
            if r.read_line(&mut line)? == 0 {
                return Err(Error::Format("truncated PPM header".into()));
            }
            let content = line.split('#').next().unwrap_or("");
            fields.extend(content.split_whitespace().map(String::from));
        }
        if fields.len() != 4 || fields[0] != "P6" {
            return Err(Error::Format(format!("unsupported PPM header {fields:?}")));
        }
        let parse = |s: &str| -> Result<usize> {
            s.parse()
                .map_err(|_| Error::Format(format!("bad PPM header field `{s}`")))
        };
        let (width, height, max) = (parse(&fields[1])?, parse(&fields[2])?, parse(&fields[3])?);
        if width == 0 || height == 0 || max != 255 {
            return Err(Error::Format(format!("unsupported PPM {width}x{height} max {max}")));
        }
        let mut bytes = vec![0u8; width * height * 3];
        r.read_exact(&mut bytes)
            .map_err(|_| Error::Format("truncated PPM pixel data".into()))?;
        Ok(Self {
            width,
            height,
            data: bytes.iter().map(|b| *b as f64 / 255.0).collect(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(fs::File::create(path)?);
        self.write_ppm(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_ppm(fs::File::open(path)?)
    }
}

/// Square patch of `side` image pixels centered at `(cx, cy)`, resampled to
/// `out x out`. Patch pixel `u` maps to image coordinate
/// `cx + (u - (out - 1) / 2) * side / out`.
pub fn crop_patch(img: &Image, cx: f64, cy: f64, side: f64, out: usize, pad: [f64; 3]) -> Tensor {
    let step = side / out as f64;
    let half = (out as f64 - 1.0) / 2.0;
    let mut t = Tensor::zeros([3, out, out]);
    let plane = out * out;
    for v in 0..out {
        let y = cy + (v as f64 - half) * step;
        for u in 0..out {
            let x = cx + (u as f64 - half) * step;
            let px = img.sample(x, y, pad);
            for c in 0..3 {
                t.data_mut()[c * plane + v * out + u] = px[c];
            }
        }
    }
    t
}

/// Frame file name for a 0-based index: `00000001.ppm` is the first frame.
pub fn frame_name(index: usize) -> String {
    format!("{:08}.ppm", index + 1)
}

/// Loads frames `00000001.ppm`, `00000002.ppm`, ... from a directory until
/// the numbering stops. Any `.ppm` file beyond a gap is reported as a
/// missing frame.
pub fn load_sequence(dir: &Path) -> Result<Vec<Image>> {
    let mut numbers = Vec::new();
    for entry in fs::read_dir(dir)? {
        let name = entry?.file_name().to_string_lossy().into_owned();
        if let Some(stem) = name.strip_suffix(".ppm") {
            if let Ok(n) = stem.parse::<usize>() {
                numbers.push(n);
            }
        }
    }
    numbers.sort_unstable();
    let last = numbers.last().copied().unwrap_or(0);
    let mut frames = Vec::with_capacity(last);
    for i in 0..last {
        let path = dir.join(frame_name(i));
        if !path.exists() {
            return Err(Error::Format(format!("missing frame {} ({})", i + 1, path.display())));
        }
        frames.push(Image::load(&path)?);
    }
    if frames.is_empty() {
        return Err(Error::Format(format!("no frames in {}", dir.display())));
    }
    Ok(frames)
}

pub fn save_sequence(dir: &Path, frames: &[Image]) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (i, f) in frames.iter().enumerate() {
        f.save(&dir.join(frame_name(i)))?;
    }
    Ok(())
}
