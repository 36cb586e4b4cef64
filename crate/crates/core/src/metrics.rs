//! Image-quality metrics: PSNR, SSIM and flow-warped temporal consistency.

use crate::error::{invalid, Result};
use crate::scene_synth::{FlowField, SpatioTemporalMatrix};

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

/// Peak signal-to-noise ratio for unit-range values; `+inf` for identical inputs.
pub fn psnr(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let mse = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len().max(1) as f64;
    if mse == 0.0 {
        f64::INFINITY
    } else {
        -10.0 * mse.log10()
    }
}

fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let w: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-(i as f64 - r).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Mean SSIM of two `h × w × c` images, Gaussian window 11 / σ 1.5, averaged over
/// channels and over every window position that fits inside the image.
/// Images smaller than the window use one window covering the whole image.
pub fn ssim(a: &[f64], b: &[f64], h: usize, w: usize, c: usize) -> f64 {
    assert_eq!(a.len(), h * w * c);
    assert_eq!(b.len(), h * w * c);
    let (win, wh, ww) = if h >= SSIM_WINDOW && w >= SSIM_WINDOW {
        let g = gaussian_window();
        let mut k = vec![0.0; SSIM_WINDOW * SSIM_WINDOW];
        for i in 0..SSIM_WINDOW {
            for j in 0..SSIM_WINDOW {
                k[i * SSIM_WINDOW + j] = g[i] * g[j];
            }
        }
        (k, SSIM_WINDOW, SSIM_WINDOW)
    } else {
        (vec![1.0 / (h * w) as f64; h * w], h, w)
    };
    let mut total = 0.0;
    let mut count = 0usize;
    for ch in 0..c {
        for y0 in 0..=h - wh {
            for x0 in 0..=w - ww {
                let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for i in 0..wh {
                    for j in 0..ww {
                        let k = win[i * ww + j];
                        let o = ((y0 + i) * w + x0 + j) * c + ch;
                        let (p, q) = (a[o], b[o]);
                        ma += k * p;
                        mb += k * q;
                        saa += k * p * p;
                        sbb += k * q * q;
                        sab += k * p * q;
                    }
                }
                let va = saa - ma * ma;
                let vb = sbb - mb * mb;
                let cov = sab - ma * mb;
                total += ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
                    / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
                count += 1;
            }
        }
    }
    total / count as f64
}

/// Samples `img` (`h × w × c`, pixel centers at +0.5) at continuous pixel coordinates, clamping to the border.
fn bilinear(img: &[f64], h: usize, w: usize, c: usize, u: f64, v: f64, out: &mut [f64]) {
    let x = (u - 0.5).clamp(0.0, (w - 1) as f64);
    let y = (v - 0.5).clamp(0.0, (h - 1) as f64);
    let (x0, y0) = (x.floor() as usize, y.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
    let (fx, fy) = (x - x0 as f64, y - y0 as f64);
    for ch in 0..c {
        let p = |yy: usize, xx: usize| img[(yy * w + xx) * c + ch];
        out[ch] = (1.0 - fy) * ((1.0 - fx) * p(y0, x0) + fx * p(y0, x1)) + fy * ((1.0 - fx) * p(y1, x0) + fx * p(y1, x1));
    }
}

/// Backward warp of `next` into the frame of `flow`'s source: pixel `p` takes `next(p + flow(p))`.
pub fn warp(next: &[f64], flow: &[f32], h: usize, w: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; h * w * c];
    for y in 0..h {
        for x in 0..w {
            let o = y * w + x;
            let u = x as f64 + 0.5 + flow[o * 2] as f64;
            let v = y as f64 + 0.5 + flow[o * 2 + 1] as f64;
            bilinear(next, h, w, c, u, v, &mut out[o * c..(o + 1) * c]);
        }
    }
    out
}

/// Mean SSIM between each frame and the next frame warped back by ground-truth flow,
/// over all consecutive timestep pairs and views. 1 for single-timestep inputs.
pub fn temporal_consistency(m: &SpatioTemporalMatrix, flow: &FlowField) -> Result<f64> {
    if (flow.timesteps, flow.views, flow.height, flow.width) != (m.timesteps, m.views(), m.height, m.width) {
        return Err(invalid!("flow field dimensions do not match the rendered matrix"));
    }
    if m.timesteps < 2 {
        return Ok(1.0);
    }
    let (h, w) = (m.height, m.width);
    let mut total = 0.0;
    let mut n = 0;
    for t in 0..m.timesteps - 1 {
        for v in 0..m.views() {
            let warped = warp(m.frame(t + 1, v), flow.frame(t, v), h, w, 3);
            total += ssim(m.frame(t, v), &warped, h, w, 3);
            n += 1;
        }
    }
    Ok(total / n as f64)
}

/// Reconstruction quality of one object.
#[derive(Clone, Debug, PartialEq)]
pub struct ObjectMetrics {
    pub psnr: f64,
    pub ssim: f64,
    pub temporal_consistency: f64,
}

/// PSNR and mean per-view SSIM of `pred` against `truth`, and temporal consistency of `pred`.
pub fn evaluate(pred: &SpatioTemporalMatrix, truth: &SpatioTemporalMatrix, flow: &FlowField) -> Result<ObjectMetrics> {
    if pred.pixels.len() != truth.pixels.len() || (pred.height, pred.width) != (truth.height, truth.width) {
        return Err(invalid!("prediction and ground truth differ in shape"));
    }
    let mut s = 0.0;
    let mut n = 0;
    for t in 0..truth.timesteps {
        for v in 0..truth.views() {
            s += ssim(pred.frame(t, v), truth.frame(t, v), truth.height, truth.width, 3);
            n += 1;
        }
    }
    Ok(ObjectMetrics {
        psnr: psnr(&pred.pixels, &truth.pixels),
        ssim: s / n as f64,
        temporal_consistency: temporal_consistency(pred, flow)?,
    })
}
