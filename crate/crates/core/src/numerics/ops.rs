//! Forward and backward kernels for the differentiable operations.
//!
//! Every forward here is a pure function of its inputs. The matching
//! `*_backward` functions take the saved forward inputs plus the output
//! gradient and return input gradients; [`super::Tape`] wires them together.

use crate::error::{invalid, mismatch, Result};

use super::Tensor;

/// Stride, dilation and zero padding of a 2-D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub stride: usize,
    pub dilation: usize,
    pub padding: usize,
}

impl ConvGeom {
    pub const fn new(stride: usize, dilation: usize, padding: usize) -> Self {
        Self {
            stride,
            dilation,
            padding,
        }
    }

    /// Stride 1, padding chosen so an odd kernel preserves spatial size.
    pub const fn same(kernel: usize, dilation: usize) -> Self {
        Self::new(1, dilation, dilation * (kernel - 1) / 2)
    }

    pub fn output_len(&self, len: usize, k: usize) -> Option<usize> {
        let span = self.dilation * (k - 1) + 1;
        let padded = len + 2 * self.padding;
        if self.stride == 0 || self.dilation == 0 || padded < span {
            return None;
        }
        Some((padded - span) / self.stride + 1)
    }

    /// Output positions `ox` whose sampled input `ox*s + tap*d - p` lies in `[0, len)`.
    fn valid_range(&self, len: usize, out_len: usize, tap: usize) -> Option<(usize, usize)> {
        let off = (tap * self.dilation) as isize - self.padding as isize;
        let s = self.stride as isize;
        // smallest o with o*s + off >= 0
        let lo = if off >= 0 { 0 } else { (-off + s - 1) / s };
        // largest o with o*s + off <= len - 1
        let hi_num = len as isize - 1 - off;
        if hi_num < 0 {
            return None;
        }
        let hi = (hi_num / s).min(out_len as isize - 1);
        if lo > hi {
            None
        } else {
            Some((lo as usize, hi as usize))
        }
    }
}

fn expect_rank(t: &Tensor, rank: usize, op: &'static str, what: &str) -> Result<()> {
    if t.rank() != rank {
        return Err(mismatch(
            op,
            format!("{what} must have rank {rank}, got shape {:?}", t.shape()),
        ));
    }
    Ok(())
}

fn conv_output_dims(
    input: &Tensor,
    kernel: &Tensor,
    geom: ConvGeom,
) -> Result<(usize, usize, usize)> {
    expect_rank(input, 3, "conv2d", "input")?;
    expect_rank(kernel, 4, "conv2d", "kernel")?;
    let (c_in, h, w) = (input.dim(0), input.dim(1), input.dim(2));
    let (c_out, kc, kh, kw) = (kernel.dim(0), kernel.dim(1), kernel.dim(2), kernel.dim(3));
    if kc != c_in {
        return Err(mismatch(
            "conv2d",
            format!("input has {c_in} channels, kernel expects {kc}"),
        ));
    }
    if geom.stride == 0 || geom.dilation == 0 {
        return Err(invalid("conv2d", "stride and dilation must be positive"));
    }
    let ho = geom
        .output_len(h, kh)
        .ok_or_else(|| invalid("conv2d", format!("kernel does not fit input height {h}")))?;
    let wo = geom
        .output_len(w, kw)
        .ok_or_else(|| invalid("conv2d", format!("kernel does not fit input width {w}")))?;
    Ok((c_out, ho, wo))
}

/// Cross-correlation style 2-D convolution, `[C_in,H,W] * [C_out,C_in,kh,kw] -> [C_out,H',W']`.
pub fn conv2d(input: &Tensor, kernel: &Tensor, geom: ConvGeom) -> Result<Tensor> {
    let (c_out, ho, wo) = conv_output_dims(input, kernel, geom)?;
    let (c_in, h, w) = (input.dim(0), input.dim(1), input.dim(2));
    let (kh, kw) = (kernel.dim(2), kernel.dim(3));
    let mut out = Tensor::zeros([c_out, ho, wo]);
    let kd = kernel.data();
    let id = input.data();
    let s = geom.stride;
    for co in 0..c_out {
        let plane = out.channel_mut(co);
        for ci in 0..c_in {
            let src = &id[ci * h * w..(ci + 1) * h * w];
            for ky in 0..kh {
                let Some((oy0, oy1)) = geom.valid_range(h, ho, ky) else {
                    continue;
                };
                for kx in 0..kw {
                    let Some((ox0, ox1)) = geom.valid_range(w, wo, kx) else {
                        continue;
                    };
                    let wgt = kd[((co * c_in + ci) * kh + ky) * kw + kx];
                    let ix0 = ox0 * s + kx * geom.dilation - geom.padding;
                    let n = ox1 - ox0 + 1;
                    for oy in oy0..=oy1 {
                        let iy = oy * s + ky * geom.dilation - geom.padding;
                        let dst = &mut plane[oy * wo + ox0..oy * wo + ox0 + n];
                        let row = &src[iy * w..(iy + 1) * w];
                        if s == 1 {
                            for (o, &x) in dst.iter_mut().zip(&row[ix0..ix0 + n]) {
                                *o += wgt * x;
                            }
                        } else {
                            for (j, o) in dst.iter_mut().enumerate() {
                                *o += wgt * row[ix0 + j * s];
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Gradients of [`conv2d`] with respect to the input and the kernel.
pub fn conv2d_backward(
    input: &Tensor,
    kernel: &Tensor,
    grad_out: &Tensor,
    geom: ConvGeom,
    need_input: bool,
    need_kernel: bool,
) -> (Option<Tensor>, Option<Tensor>) {
    let (c_in, h, w) = (input.dim(0), input.dim(1), input.dim(2));
    let (c_out, _, kh, kw) = (kernel.dim(0), kernel.dim(1), kernel.dim(2), kernel.dim(3));
    let (ho, wo) = (grad_out.dim(1), grad_out.dim(2));
    let s = geom.stride;
    let mut gi = need_input.then(|| Tensor::zeros(input.shape().to_vec()));
    let mut gk = need_kernel.then(|| Tensor::zeros(kernel.shape().to_vec()));
    let kd = kernel.data();
    let id = input.data();
    let gd = grad_out.data();
    for co in 0..c_out {
        let gplane = &gd[co * ho * wo..(co + 1) * ho * wo];
        for ci in 0..c_in {
            for ky in 0..kh {
                let Some((oy0, oy1)) = geom.valid_range(h, ho, ky) else {
                    continue;
                };
                for kx in 0..kw {
                    let Some((ox0, ox1)) = geom.valid_range(w, wo, kx) else {
                        continue;
                    };
                    let kidx = ((co * c_in + ci) * kh + ky) * kw + kx;
                    let ix0 = ox0 * s + kx * geom.dilation - geom.padding;
                    let n = ox1 - ox0 + 1;
                    let wgt = kd[kidx];
                    let mut acc = 0.0;
                    for oy in oy0..=oy1 {
                        let iy = oy * s + ky * geom.dilation - geom.padding;
                        let g = &gplane[oy * wo + ox0..oy * wo + ox0 + n];
                        let base = ci * h * w + iy * w;
                        if let Some(gi) = gi.as_mut() {
                            let row = &mut gi.data_mut()[base..base + w];
                            if s == 1 {
                                for (r, &gv) in row[ix0..ix0 + n].iter_mut().zip(g) {
                                    *r += wgt * gv;
                                }
                            } else {
                                for (j, &gv) in g.iter().enumerate() {
                                    row[ix0 + j * s] += wgt * gv;
                                }
                            }
                        }
                        if need_kernel {
                            let row = &id[base..base + w];
                            if s == 1 {
                                acc += g.iter().zip(&row[ix0..ix0 + n]).map(|(a, b)| a * b).sum::<f64>();
                            } else {
                                acc += g
                                    .iter()
                                    .enumerate()
                                    .map(|(j, &gv)| gv * row[ix0 + j * s])
                                    .sum::<f64>();
                            }
                        }
                    }
                    if let Some(gk) = gk.as_mut() {
                        gk.data_mut()[kidx] += acc;
                    }
                }
            }
        }
    }
    (gi, gk)
}

fn xcorr_dims(detection: &Tensor, template: &Tensor) -> Result<(usize, usize, usize)> {
    expect_rank(detection, 3, "xcorr_depthwise", "detection")?;
    expect_rank(template, 3, "xcorr_depthwise", "template")?;
    if detection.dim(0) != template.dim(0) {
        return Err(mismatch(
            "xcorr_depthwise",
            format!(
                "detection has {} channels, template {}",
                detection.dim(0),
                template.dim(0)
            ),
        ));
    }
    let (hd, wd) = (detection.dim(1), detection.dim(2));
    let (ht, wt) = (template.dim(1), template.dim(2));
    if ht > hd || wt > wd {
        return Err(invalid(
            "xcorr_depthwise",
            format!("template {ht}x{wt} larger than detection {hd}x{wd}"),
        ));
    }
    Ok((detection.dim(0), hd - ht + 1, wd - wt + 1))
}

/// Per-channel valid correlation of `detection` with `template`.
pub fn xcorr_depthwise(detection: &Tensor, template: &Tensor) -> Result<Tensor> {
    let (c, ho, wo) = xcorr_dims(detection, template)?;
    let (hd, wd) = (detection.dim(1), detection.dim(2));
    let (ht, wt) = (template.dim(1), template.dim(2));
    let mut out = Tensor::zeros([c, ho, wo]);
    for ch in 0..c {
        let det = detection.channel(ch);
        let tmpl = template.channel(ch);
        let plane = out.channel_mut(ch);
        for ty in 0..ht {
            for tx in 0..wt {
                let wgt = tmpl[ty * wt + tx];
                for oy in 0..ho {
                    let row = &det[(oy + ty) * wd + tx..(oy + ty) * wd + tx + wo];
                    for (o, &x) in plane[oy * wo..(oy + 1) * wo].iter_mut().zip(row) {
                        *o += wgt * x;
                    }
                }
            }
        }
        debug_assert_eq!(det.len(), hd * wd);
    }
    Ok(out)
}

pub fn xcorr_depthwise_backward(
    detection: &Tensor,
    template: &Tensor,
    grad_out: &Tensor,
    need_detection: bool,
    need_template: bool,
) -> (Option<Tensor>, Option<Tensor>) {
    let c = detection.dim(0);
    let wd = detection.dim(2);
    let (ht, wt) = (template.dim(1), template.dim(2));
    let (ho, wo) = (grad_out.dim(1), grad_out.dim(2));
    let mut gd = need_detection.then(|| Tensor::zeros(detection.shape().to_vec()));
    let mut gt = need_template.then(|| Tensor::zeros(template.shape().to_vec()));
    for ch in 0..c {
        let g = grad_out.channel(ch);
        let det = detection.channel(ch);
        let tmpl = template.channel(ch);
        for ty in 0..ht {
            for tx in 0..wt {
                let wgt = tmpl[ty * wt + tx];
                let mut acc = 0.0;
                for oy in 0..ho {
                    let grow = &g[oy * wo..(oy + 1) * wo];
                    let start = (oy + ty) * wd + tx;
                    if let Some(gd) = gd.as_mut() {
                        let dst = &mut gd.channel_mut(ch)[start..start + wo];
                        for (d, &gv) in dst.iter_mut().zip(grow) {
                            *d += wgt * gv;
                        }
                    }
                    if need_template {
                        acc += grow
                            .iter()
                            .zip(&det[start..start + wo])
                            .map(|(a, b)| a * b)
                            .sum::<f64>();
                    }
                }
                if let Some(gt) = gt.as_mut() {
                    gt.channel_mut(ch)[ty * wt + tx] += acc;
                }
            }
        }
    }
    (gd, gt)
}

fn axis_layout(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let n = shape[axis];
    let inner = shape[axis + 1..].iter().product();
    (outer, n, inner)
}

/// Numerically stable softmax along `axis`.
pub fn softmax(t: &Tensor, axis: usize) -> Result<Tensor> {
    if axis >= t.rank() {
        return Err(invalid(
            "softmax",
            format!("axis {axis} out of range for shape {:?}", t.shape()),
        ));
    }
    let (outer, n, inner) = axis_layout(t.shape(), axis);
    let mut out = Tensor::zeros(t.shape().to_vec());
    let src = t.data();
    let dst = out.data_mut();
    for o in 0..outer {
        for i in 0..inner {
            let base = o * n * inner + i;
            let max = (0..n)
                .map(|j| src[base + j * inner])
                .fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for j in 0..n {
                let e = (src[base + j * inner] - max).exp();
                dst[base + j * inner] = e;
                sum += e;
            }
            for j in 0..n {
                dst[base + j * inner] /= sum;
            }
        }
    }
    Ok(out)
}

/// Gradient of softmax given its output `y`.
pub fn softmax_backward(y: &Tensor, grad_out: &Tensor, axis: usize) -> Tensor {
    let (outer, n, inner) = axis_layout(y.shape(), axis);
    let mut gx = Tensor::zeros(y.shape().to_vec());
    let yd = y.data();
    let gd = grad_out.data();
    let out = gx.data_mut();
    for o in 0..outer {
        for i in 0..inner {
            let base = o * n * inner + i;
            let dot: f64 = (0..n)
                .map(|j| yd[base + j * inner] * gd[base + j * inner])
                .sum();
            for j in 0..n {
                let k = base + j * inner;
                out[k] = yd[k] * (gd[k] - dot);
            }
        }
    }
    gx
}

/// Source coordinate and the two neighbouring taps for corner-aligned sampling.
fn bilinear_taps(out_len: usize, in_len: usize) -> Vec<(usize, usize, f64)> {
    (0..out_len)
        .map(|o| {
            let src = if out_len > 1 {
                (o * (in_len - 1)) as f64 / (out_len - 1) as f64
            } else {
                0.0
            };
            let lo = (src.floor() as usize).min(in_len - 1);
            let hi = (lo + 1).min(in_len - 1);
            (lo, hi, src - lo as f64)
        })
        .collect()
}

fn lerp(a: f64, b: f64, f: f64) -> f64 {
    let v = a + f * (b - a);
    v.clamp(a.min(b), a.max(b))
}

/// Corner-aligned bilinear resize of a `[C,H,W]` tensor.
pub fn resize_bilinear(t: &Tensor, new_h: usize, new_w: usize) -> Result<Tensor> {
    expect_rank(t, 3, "resize_bilinear", "input")?;
    if new_h == 0 || new_w == 0 {
        return Err(invalid("resize_bilinear", "target size must be positive"));
    }
    let (c, h, w) = (t.dim(0), t.dim(1), t.dim(2));
    let ys = bilinear_taps(new_h, h);
    let xs = bilinear_taps(new_w, w);
    let mut out = Tensor::zeros([c, new_h, new_w]);
    for ch in 0..c {
        let src = t.channel(ch);
        let dst = out.channel_mut(ch);
        for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                let top = lerp(src[y0 * w + x0], src[y0 * w + x1], fx);
                let bottom = lerp(src[y1 * w + x0], src[y1 * w + x1], fx);
                dst[oy * new_w + ox] = lerp(top, bottom, fy);
            }
        }
    }
    Ok(out)
}

pub fn resize_bilinear_backward(input_shape: &[usize], grad_out: &Tensor) -> Tensor {
    let (c, h, w) = (input_shape[0], input_shape[1], input_shape[2]);
    let (nh, nw) = (grad_out.dim(1), grad_out.dim(2));
    let ys = bilinear_taps(nh, h);
    let xs = bilinear_taps(nw, w);
    let mut gi = Tensor::zeros([c, h, w]);
    for ch in 0..c {
        let g = grad_out.channel(ch);
        let dst = gi.channel_mut(ch);
        for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                let gv = g[oy * nw + ox];
                dst[y0 * w + x0] += gv * (1.0 - fy) * (1.0 - fx);
                dst[y0 * w + x1] += gv * (1.0 - fy) * fx;
                dst[y1 * w + x0] += gv * fy * (1.0 - fx);
                dst[y1 * w + x1] += gv * fy * fx;
            }
        }
    }
    gi
}

/// Per-channel spatial mean, `[C,H,W] -> [C]`.
pub fn global_avg_pool(t: &Tensor) -> Result<Tensor> {
    expect_rank(t, 3, "global_avg_pool", "input")?;
    let c = t.dim(0);
    let n = (t.dim(1) * t.dim(2)) as f64;
    Ok(Tensor::from_fn([c], |ch| t.channel(ch).iter().sum::<f64>() / n))
}

pub fn global_avg_pool_backward(input_shape: &[usize], grad_out: &Tensor) -> Tensor {
    let plane = input_shape[1] * input_shape[2];
    let scale = 1.0 / plane as f64;
    Tensor::from_fn(input_shape.to_vec(), |i| grad_out.data()[i / plane] * scale)
}

/// Affine map `weight · v + bias`.
pub fn linear(v: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    expect_rank(v, 1, "linear", "input")?;
    expect_rank(weight, 2, "linear", "weight")?;
    expect_rank(bias, 1, "linear", "bias")?;
    let (m, n) = (weight.dim(0), weight.dim(1));
    if v.dim(0) != n || bias.dim(0) != m {
        return Err(mismatch(
            "linear",
            format!(
                "weight {:?} incompatible with input {:?} and bias {:?}",
                weight.shape(),
                v.shape(),
                bias.shape()
            ),
        ));
    }
    let wd = weight.data();
    let vd = v.data();
    Ok(Tensor::from_fn([m], |i| {
        bias.data()[i]
            + wd[i * n..(i + 1) * n]
                .iter()
                .zip(vd)
                .map(|(a, b)| a * b)
                .sum::<f64>()
    }))
}

/// Returns `(grad_v, grad_weight, grad_bias)`.
pub fn linear_backward(v: &Tensor, weight: &Tensor, grad_out: &Tensor) -> (Tensor, Tensor, Tensor) {
    let (m, n) = (weight.dim(0), weight.dim(1));
    let g = grad_out.data();
    let wd = weight.data();
    let gv = Tensor::from_fn([n], |j| (0..m).map(|i| wd[i * n + j] * g[i]).sum());
    let gw = Tensor::from_fn([m, n], |idx| g[idx / n] * v.data()[idx % n]);
    (gv, gw, grad_out.clone())
}
