//! Camera-image augmentation and proprio masking.
//!
//! Images are `[C, H, W]` with values in `[0, 1]` and are augmented before
//! normalization.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::Frame;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugConfig {
    /// Side fraction kept by the random crop.
    pub crop_keep: f64,
    /// Rotation drawn uniformly from `[-rot_deg, rot_deg]`.
    pub rot_deg: f64,
    /// Brightness, contrast and saturation factors drawn from `[1 - jitter, 1 + jitter]`.
    pub jitter: f64,
}

impl Default for AugConfig {
    fn default() -> Self {
        Self {
            crop_keep: 0.95,
            rot_deg: 5.0,
            jitter: 0.3,
        }
    }
}

impl AugConfig {
    pub fn identity() -> Self {
        Self {
            crop_keep: 1.0,
            rot_deg: 0.0,
            jitter: 0.0,
        }
    }
}

/// Crop window `(ch, cw)` for an `h x w` image.
pub fn crop_window(h: usize, w: usize, keep: f64) -> (usize, usize) {
    let side = |n: usize| ((keep * n as f64 + 1e-9).floor() as usize).clamp(1, n);
    (side(h), side(w))
}

fn bilinear(plane: &[f32], h: usize, w: usize, y: f64, x: f64) -> f32 {
    let y = y.clamp(0.0, (h - 1) as f64);
    let x = x.clamp(0.0, (w - 1) as f64);
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (fy, fx) = ((y - y0 as f64) as f32, (x - x0 as f64) as f32);
    let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
    let bot = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
    top * (1.0 - fy) + bot * fy
}

/// Resamples every channel through `map(y, x) -> (src_y, src_x)`.
fn warp(values: &[f32], c: usize, h: usize, w: usize, map: impl Fn(f64, f64) -> (f64, f64)) -> Vec<f32> {
    let mut out = vec![0.0; values.len()];
    for ch in 0..c {
        let plane = &values[ch * h * w..(ch + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                let (sy, sx) = map(y as f64, x as f64);
                out[ch * h * w + y * w + x] = bilinear(plane, h, w, sy, sx);
            }
        }
    }
    out
}

/// Random crop with resize back, small rotation, then color jitter.
/// Output shape equals input shape.
pub fn augment_image<R: Rng + ?Sized>(frame: &Frame, cfg: &AugConfig, rng: &mut R) -> Frame {
    let (c, h, w) = match frame.shape[..] {
        [c, h, w] => (c, h, w),
        _ => panic!("augment_image expects [C, H, W], got {:?}", frame.shape),
    };
    let mut v = frame.values.clone();

    let (ch, cw) = crop_window(h, w, cfg.crop_keep);
    let oy = rng.random_range(0..=h - ch) as f64;
    let ox = rng.random_range(0..=w - cw) as f64;
    if (ch, cw) != (h, w) {
        let (sy, sx) = (ch as f64 / h as f64, cw as f64 / w as f64);
        v = warp(&v, c, h, w, |y, x| (oy + (y + 0.5) * sy - 0.5, ox + (x + 0.5) * sx - 0.5));
    }

    let angle = rng.random_range(-cfg.rot_deg..=cfg.rot_deg).to_radians();
    if angle != 0.0 {
        let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
        let (s, co) = angle.sin_cos();
        v = warp(&v, c, h, w, |y, x| {
            let (dy, dx) = (y - cy, x - cx);
            (cy + co * dy - s * dx, cx + s * dy + co * dx)
        });
    }

    let mut factor = || rng.random_range(1.0 - cfg.jitter..=1.0 + cfg.jitter) as f32;
    let (b, k, sat) = (factor(), factor(), factor());
    if b != 1.0 || k != 1.0 || sat != 1.0 {
        let n = h * w;
        v.iter_mut().for_each(|x| *x *= b);
        let gray = |v: &[f32], i: usize| -> f32 {
            if c == 3 {
                0.299 * v[i] + 0.587 * v[n + i] + 0.114 * v[2 * n + i]
            } else {
                v[i]
            }
        };
        let mean = (0..n).map(|i| gray(&v, i) as f64).sum::<f64>() as f32 / n as f32;
        v.iter_mut().for_each(|x| *x = (*x - mean) * k + mean);
        if c == 3 {
            for i in 0..n {
                let g = gray(&v, i);
                for ch in 0..3 {
                    let x = &mut v[ch * n + i];
                    *x = g + (*x - g) * sat;
                }
            }
        }
        v.iter_mut().for_each(|x| *x = x.clamp(0.0, 1.0));
    }
    Frame {
        shape: frame.shape.clone(),
        values: v,
    }
}

/// Zeroes the whole (normalized) proprio vector with probability `mask_prob`.
pub fn mask_proprio<R: Rng + ?Sized>(p: &[f64], mask_prob: f64, rng: &mut R) -> Vec<f64> {
    if rng.random::<f64>() < mask_prob {
        vec![0.0; p.len()]
    } else {
        p.to_vec()
    }
}
