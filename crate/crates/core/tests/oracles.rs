//! Kernels and box bookkeeping checked against independently written oracles.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use siamman::anchors::{
    decode_delta, encode_delta, generate_anchors, match_anchors, AnchorConfig, BBox, DeltaMode, Label,
};
use siamman::losses::gaussian_center_map;
use siamman::numerics::{conv2d, resize_bilinear, xcorr_depthwise, ConvGeom, Tensor};

fn random_tensor(rng: &mut ChaCha8Rng, shape: [usize; 3]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

fn xcorr_loops(det: &Tensor, tmpl: &Tensor) -> Tensor {
    let (c, hd, wd) = (det.dim(0), det.dim(1), det.dim(2));
    let (ht, wt) = (tmpl.dim(1), tmpl.dim(2));
    let (ho, wo) = (hd - ht + 1, wd - wt + 1);
    let mut out = Tensor::zeros([c, ho, wo]);
    for ch in 0..c {
        for y in 0..ho {
            for x in 0..wo {
                let mut s = 0.0;
                for u in 0..ht {
                    for v in 0..wt {
                        s += det.get(&[ch, y + u, x + v]) * tmpl.get(&[ch, u, v]);
                    }
                }
                out.set(&[ch, y, x], s);
            }
        }
    }
    out
}

/// One single-channel convolution per channel, stacked.
fn xcorr_channel_conv(det: &Tensor, tmpl: &Tensor) -> Tensor {
    let c = det.dim(0);
    let mut planes = Vec::new();
    let mut shape = [c, 0, 0];
    for ch in 0..c {
        let d = Tensor::new([1, det.dim(1), det.dim(2)], det.channel(ch).to_vec()).unwrap();
        let k = Tensor::new([1, 1, tmpl.dim(1), tmpl.dim(2)], tmpl.channel(ch).to_vec()).unwrap();
        let o = conv2d(&d, &k, ConvGeom::new(1, 1, 0)).unwrap();
        shape = [c, o.dim(1), o.dim(2)];
        planes.extend_from_slice(o.data());
    }
    Tensor::new(shape, planes).unwrap()
}

#[test]
fn xcorr_matches_channel_conv_on_all_small_shapes() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst: f64 = 0.0;
    let mut cases = 0;
    for c in 1..=4 {
        for hd in 1..=8 {
            for wd in 1..=8 {
                for ht in 1..=hd {
                    for wt in 1..=wd {
                        let det = random_tensor(&mut rng, [c, hd, wd]);
                        let tmpl = random_tensor(&mut rng, [c, ht, wt]);
                        let got = xcorr_depthwise(&det, &tmpl).unwrap();
                        let conv = xcorr_channel_conv(&det, &tmpl);
                        let loops = xcorr_loops(&det, &tmpl);
                        assert_eq!(got.shape(), loops.shape());
                        worst = worst.max(got.max_abs_diff(&conv)).max(got.max_abs_diff(&loops));
                        cases += 1;
                    }
                }
            }
        }
    }
    assert_eq!(cases, 4 * 36 * 36);
    assert!(worst <= 1e-12, "max deviation {worst:e}");
}

#[test]
fn xcorr_rejects_template_larger_than_detection() {
    let det = Tensor::zeros([2, 3, 3]);
    assert!(xcorr_depthwise(&det, &Tensor::zeros([2, 4, 3])).is_err());
    assert!(xcorr_depthwise(&det, &Tensor::zeros([1, 2, 2])).is_err());
}

/// Overlap from corner coordinates, written without the library's box helpers.
fn iou_oracle(a: [f64; 4], b: [f64; 4]) -> f64 {
    let ix = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let iy = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = ix * iy;
    if inter == 0.0 {
        return 0.0;
    }
    let area = |r: [f64; 4]| (r[2] - r[0]) * (r[3] - r[1]);
    inter / (area(a) + area(b) - inter)
}

#[test]
fn match_anchors_agrees_with_exhaustive_oracle() {
    let cfg = AnchorConfig::for_search_size(255);
    let set = generate_anchors(25, 25, &cfg);
    assert_eq!(set.len(), 25 * 25 * 5);
    // lattice built by hand: ratio r keeps area 64^2 with w/h = r
    let mut oracle_anchors = Vec::new();
    for &r in &cfg.ratios {
        let (w, h) = (64.0 * f64::sqrt(r), 64.0 / f64::sqrt(r));
        for i in 0..25 {
            for j in 0..25 {
                let (cx, cy) = (31.0 + 8.0 * j as f64, 31.0 + 8.0 * i as f64);
                oracle_anchors.push([cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0]);
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut positives = 0;
    for _ in 0..100 {
        let w = rng.gen_range(20.0..140.0);
        let h = rng.gen_range(20.0..140.0);
        let gt = BBox::new(rng.gen_range(60.0..195.0), rng.gen_range(60.0..195.0), w, h).unwrap();
        let got = match_anchors(&set, &gt, &cfg).unwrap();
        let g = gt.corners();
        for (n, a) in oracle_anchors.iter().enumerate() {
            let o = iou_oracle(*a, g);
            let want = if o > 0.6 {
                Label::Positive
            } else if o < 0.3 {
                Label::Negative
            } else {
                Label::Ignore
            };
            assert_eq!(got.labels[n], want, "anchor {n}, iou {o}");
            match (want, got.targets[n]) {
                (Label::Positive, Some(t)) => {
                    let (acx, acy) = ((a[0] + a[2]) / 2.0, (a[1] + a[3]) / 2.0);
                    let (aw, ah) = (a[2] - a[0], a[3] - a[1]);
                    let expect = [
                        (gt.cx - acx) / aw,
                        (gt.cy - acy) / ah,
                        (gt.w / aw).ln(),
                        (gt.h / ah).ln(),
                    ];
                    for d in 0..4 {
                        assert!((t[d] - expect[d]).abs() < 1e-12);
                    }
                    positives += 1;
                }
                (Label::Positive, None) => panic!("positive anchor {n} without target"),
                (_, t) => assert!(t.is_none()),
            }
        }
    }
    assert!(positives > 0);
}

#[test]
fn encode_decode_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for mode in [DeltaMode::Standard, DeltaMode::Literal] {
        for _ in 0..1000 {
            let mut b = || {
                BBox::new(
                    rng.gen_range(1.0..300.0),
                    rng.gen_range(1.0..300.0),
                    rng.gen_range(2.0..200.0),
                    rng.gen_range(2.0..200.0),
                )
                .unwrap()
            };
            let (anchor, gt) = (b(), b());
            let d = encode_delta(&anchor, &gt, mode).unwrap();
            let back = decode_delta(&anchor, &d, mode).unwrap();
            for (x, y) in [(back.cx, gt.cx), (back.cy, gt.cy), (back.w, gt.w), (back.h, gt.h)] {
                assert!((x - y).abs() <= 1e-12 * y.abs().max(1.0), "{mode:?}: {x} vs {y}");
            }
        }
    }
}

#[test]
fn literal_mode_rejects_anchor_on_axis() {
    let anchor = BBox::new(0.0, 5.0, 10.0, 10.0).unwrap();
    let gt = BBox::new(3.0, 5.0, 10.0, 10.0).unwrap();
    assert!(encode_delta(&anchor, &gt, DeltaMode::Literal).is_err());
}

#[test]
fn resize_spot_values() {
    let t = Tensor::new([1, 2, 2], vec![0.0, 1.0, 2.0, 3.0]).unwrap();
    assert_eq!(resize_bilinear(&t, 2, 2).unwrap(), t);
    let up = resize_bilinear(&t, 3, 3).unwrap();
    // corner aligned: corners kept, midpoints averaged
    assert_eq!(up.data(), &[0.0, 0.5, 1.0, 1.0, 1.5, 2.0, 2.0, 2.5, 3.0]);
    let one = resize_bilinear(&t, 1, 1).unwrap();
    assert_eq!(one.data(), &[0.0]);
}

#[test]
fn center_map_peaks_on_nearest_cell() {
    // 25x25 map with stride 8 centered at pixel 127
    let gt = BBox::new(127.0 + 8.0 * 3.0 + 2.0, 127.0 - 8.0 * 5.0 - 3.0, 60.0, 40.0).unwrap();
    let m = gaussian_center_map(&gt, 25, 25, 8.0, 127.0).unwrap();
    assert_eq!(m.shape(), &[25, 25]);
    assert_eq!(m.get(&[12 - 5, 12 + 3]), 1.0);
    let peaks = m.data().iter().filter(|v| **v == 1.0).count();
    assert_eq!(peaks, 1);
    assert!(m.data().iter().all(|v| (0.0..=1.0).contains(v)));
    assert!(gaussian_center_map(&BBox { w: 0.0, ..gt }, 25, 25, 8.0, 127.0).is_err());
}
