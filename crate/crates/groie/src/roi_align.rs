//! RoI Align: quantization-free pooling via bilinear sampling.
//!
//! The scaled box is divided into an S x S grid of bins; each bin is sampled
//! at `sampling_ratio`^2 regularly spaced points (at the centers of equal
//! sub-bins), each point is bilinearly interpolated with pixel centers at
//! integer + 0.5, and samples are averaged per bin. Reads outside the feature
//! map contribute zero.

use crate::error::{Error, Result};
use crate::pyramid::RoiBox;

/// The four bilinear taps for a continuous point (y, x), with weights.
/// Returns (index, weight) pairs for in-bounds neighbors only.
#[inline]
fn bilinear_taps(y: f64, x: f64, h: usize, w: usize) -> [(usize, f64); 4] {
    // Pixel i is centered at i + 0.5.
    let u = x - 0.5;
    let v = y - 0.5;
    let x0 = u.floor();
    let y0 = v.floor();
    let fx = u - x0;
    let fy = v - y0;
    let mut taps = [(0usize, 0.0f64); 4];
    let weights = [
        (y0, x0, (1.0 - fy) * (1.0 - fx)),
        (y0, x0 + 1.0, (1.0 - fy) * fx),
        (y0 + 1.0, x0, fy * (1.0 - fx)),
        (y0 + 1.0, x0 + 1.0, fy * fx),
    ];
    for (slot, (ty, tx, wgt)) in taps.iter_mut().zip(weights) {
        if ty >= 0.0 && tx >= 0.0 && (ty as usize) < h && (tx as usize) < w {
            *slot = (ty as usize * w + tx as usize, wgt);
        } else {
            *slot = (0, 0.0);
        }
    }
    taps
}

#[derive(Debug, Clone, Copy)]
pub struct RoiAlignSpec {
    pub out_size: usize,
    pub sampling_ratio: usize,
    pub spatial_scale: f64,
}

impl RoiAlignSpec {
    pub fn validate(&self) -> Result<()> {
        if self.out_size < 1 {
            return Err(Error::Config("out_size must be >= 1".into()));
        }
        if self.sampling_ratio < 1 {
            return Err(Error::Config("sampling_ratio must be >= 1".into()));
        }
        if self.spatial_scale <= 0.0 {
            return Err(Error::Config("spatial_scale must be positive".into()));
        }
        Ok(())
    }
}

/// Forward pass over a flat [N,C,H,W] level. Output is [R,C,S,S] flat.
pub fn roi_align_forward(
    level: &[f64],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    boxes: &[RoiBox],
    spec: &RoiAlignSpec,
) -> Result<Vec<f64>> {
    spec.validate()?;
    let s = spec.out_size;
    let ratio = spec.sampling_ratio;
    let mut out = vec![0.0; boxes.len() * c * s * s];
    let inv_samples = 1.0 / (ratio * ratio) as f64;
    for (r, roi) in boxes.iter().enumerate() {
        if roi.batch_idx >= n {
            return Err(Error::Input(format!(
                "box {r} batch_idx {} out of range (N={n})",
                roi.batch_idx
            )));
        }
        let x1 = roi.x1 * spec.spatial_scale;
        let y1 = roi.y1 * spec.spatial_scale;
        let bin_w = (roi.x2 - roi.x1) * spec.spatial_scale / s as f64;
        let bin_h = (roi.y2 - roi.y1) * spec.spatial_scale / s as f64;
        let img = &level[roi.batch_idx * c * h * w..(roi.batch_idx + 1) * c * h * w];
        for by in 0..s {
            for bx in 0..s {
                // Sample grid shared by all channels of this bin.
                let mut taps: Vec<[(usize, f64); 4]> = Vec::with_capacity(ratio * ratio);
                for sy in 0..ratio {
                    let py = y1 + (by as f64 + (sy as f64 + 0.5) / ratio as f64) * bin_h;
                    for sx in 0..ratio {
                        let px = x1 + (bx as f64 + (sx as f64 + 0.5) / ratio as f64) * bin_w;
                        taps.push(bilinear_taps(py, px, h, w));
                    }
                }
                for ci in 0..c {
                    let plane = &img[ci * h * w..(ci + 1) * h * w];
                    let mut acc = 0.0;
                    for t in &taps {
                        let mut v = 0.0;
                        for &(idx, wgt) in t {
                            v += wgt * plane[idx];
                        }
                        acc += v;
                    }
                    out[((r * c + ci) * s + by) * s + bx] = acc * inv_samples;
                }
            }
        }
    }
    Ok(out)
}

/// Backward pass: scatter d_out [R,C,S,S] into d_level [N,C,H,W].
#[allow(clippy::too_many_arguments)]
pub fn roi_align_backward(
    d_out: &[f64],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    boxes: &[RoiBox],
    spec: &RoiAlignSpec,
    d_level: &mut [f64],
) {
    debug_assert_eq!(d_level.len(), n * c * h * w);
    let s = spec.out_size;
    let ratio = spec.sampling_ratio;
    let inv_samples = 1.0 / (ratio * ratio) as f64;
    for (r, roi) in boxes.iter().enumerate() {
        let x1 = roi.x1 * spec.spatial_scale;
        let y1 = roi.y1 * spec.spatial_scale;
        let bin_w = (roi.x2 - roi.x1) * spec.spatial_scale / s as f64;
        let bin_h = (roi.y2 - roi.y1) * spec.spatial_scale / s as f64;
        let img_off = roi.batch_idx * c * h * w;
        for by in 0..s {
            for bx in 0..s {
                let mut taps: Vec<[(usize, f64); 4]> = Vec::with_capacity(ratio * ratio);
                for sy in 0..ratio {
                    let py = y1 + (by as f64 + (sy as f64 + 0.5) / ratio as f64) * bin_h;
                    for sx in 0..ratio {
                        let px = x1 + (bx as f64 + (sx as f64 + 0.5) / ratio as f64) * bin_w;
                        taps.push(bilinear_taps(py, px, h, w));
                    }
                }
                for ci in 0..c {
                    let g = d_out[((r * c + ci) * s + by) * s + bx] * inv_samples;
                    if g == 0.0 {
                        continue;
                    }
                    let plane = &mut d_level[img_off + ci * h * w..img_off + (ci + 1) * h * w];
                    for t in &taps {
                        for &(idx, wgt) in t {
                            if wgt != 0.0 {
                                plane[idx] += g * wgt;
                            }
                        }
                    }
                }
            }
        }
    }
}
