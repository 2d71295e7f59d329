//! Brute-force reference implementations shared by the integration tests.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rtc_core::{LabelMap, Tensor};

pub fn random_tensor(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

pub fn random_labels(h: usize, w: usize, max: u8, seed: u64) -> LabelMap {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    LabelMap::new(h, w, (0..h * w).map(|_| rng.random_range(0..=max)).collect()).unwrap()
}

/// Direct sliding-window convolution with zero padding and floor output extent.
pub fn conv2d(x: &Tensor, k: &Tensor, stride: usize, pad: usize) -> Tensor {
    let (c_in, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (c_out, kh, kw) = (k.shape()[0], k.shape()[2], k.shape()[3]);
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; c_out * oh * ow];
    for o in 0..c_out {
        for y in 0..oh {
            for xx in 0..ow {
                let mut acc = 0.0;
                for c in 0..c_in {
                    for dy in 0..kh {
                        for dx in 0..kw {
                            let iy = (y * stride + dy) as isize - pad as isize;
                            let ix = (xx * stride + dx) as isize - pad as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                continue;
                            }
                            acc += x.at(&[c, iy as usize, ix as usize]) * k.at(&[o, c, dy, dx]);
                        }
                    }
                }
                out[(o * oh + y) * ow + xx] = acc;
            }
        }
    }
    Tensor::new(vec![c_out, oh, ow], out).unwrap()
}

fn pixel(f: &Tensor, i: usize) -> Vec<f64> {
    let (d, hw) = (f.shape()[0], f.shape()[1] * f.shape()[2]);
    (0..d).map(|c| f.data()[c * hw + i]).collect()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `max(0, cos)` between every pixel pair, with the diagonal set to one.
pub fn cosine_affinity(f: &Tensor, eps: f64) -> Vec<Vec<f64>> {
    let hw = f.shape()[1] * f.shape()[2];
    let px: Vec<Vec<f64>> = (0..hw).map(|i| pixel(f, i)).collect();
    let mut a = vec![vec![0.0; hw]; hw];
    for i in 0..hw {
        for j in 0..hw {
            a[i][j] = if i == j {
                1.0
            } else {
                let dot: f64 = px[i].iter().zip(&px[j]).map(|(p, q)| p * q).sum();
                (dot / (norm(&px[i]).max(eps) * norm(&px[j]).max(eps))).max(0.0)
            };
        }
    }
    a
}

/// Indices of the `k` largest values by repeated scans; earlier index wins ties.
pub fn topk(values: &[f64], k: usize) -> Vec<usize> {
    let mut taken = vec![false; values.len()];
    let mut out = Vec::with_capacity(k);
    for _ in 0..k {
        let mut best: Option<usize> = None;
        for (i, &v) in values.iter().enumerate() {
            if !taken[i] && best.is_none_or(|b| v > values[b]) {
                best = Some(i);
            }
        }
        let b = best.expect("k within range");
        taken[b] = true;
        out.push(b);
    }
    out
}

/// CAM-weighted mean of the top-`k` pixel features of `class`, scaled to unit length.
pub fn prototype(cams: &Tensor, features: &Tensor, class: usize, k: usize, eps: f64) -> Vec<f64> {
    let hw = cams.shape()[1] * cams.shape()[2];
    let d = features.shape()[0];
    let row = &cams.data()[class * hw..(class + 1) * hw];
    let idx = topk(row, k);
    let total: f64 = idx.iter().map(|&i| row[i]).sum();
    let mut p = vec![0.0; d];
    for &i in &idx {
        let weight = if total > 0.0 { row[i] / total } else { 1.0 / k as f64 };
        for (c, v) in pixel(features, i).into_iter().enumerate() {
            p[c] += weight * v;
        }
    }
    let n = norm(&p).max(eps);
    p.iter().map(|v| v / n).collect()
}

/// Per-class IoU from explicitly counted intersections and unions; `None` when a class
/// never occurs in either map. `keep[i]` lists the predicted labels allowed for image `i`.
pub fn iou(preds: &[LabelMap], gts: &[LabelMap], labels: usize, keep: Option<&[Vec<bool>]>) -> Vec<Option<f64>> {
    let mut inter = vec![0u64; labels];
    let mut union = vec![0u64; labels];
    for (n, (p, g)) in preds.iter().zip(gts).enumerate() {
        for (&pv, &gv) in p.data().iter().zip(g.data()) {
            let pv = match keep {
                Some(k) if pv > 0 && !k[n][pv as usize - 1] => 0,
                _ => pv,
            };
            for c in 0..labels as u8 {
                let (a, b) = (pv == c, gv == c);
                if a && b {
                    inter[c as usize] += 1;
                }
                if a || b {
                    union[c as usize] += 1;
                }
            }
        }
    }
    (0..labels)
        .map(|c| (union[c] > 0).then(|| inter[c] as f64 / union[c] as f64))
        .collect()
}

pub fn mean_defined(v: &[Option<f64>]) -> f64 {
    let d: Vec<f64> = v.iter().flatten().copied().collect();
    if d.is_empty() {
        0.0
    } else {
        d.iter().sum::<f64>() / d.len() as f64
    }
}
