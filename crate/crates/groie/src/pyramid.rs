//! Feature pyramid representation and FPN level-selection rules.

use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::tensor::Tensor;

/// A region of interest in image pixel coordinates, tagged with the batch
/// element it belongs to.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoiBox {
    pub batch_idx: usize,
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl RoiBox {
    pub fn new(batch_idx: usize, x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        if !(x2 > x1 && y2 > y1) {
            return Err(Error::Input(format!(
                "degenerate box ({x1},{y1})-({x2},{y2})"
            )));
        }
        Ok(RoiBox { batch_idx, x1, y1, x2, y2 })
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    /// Intersection-over-union with another box (batch indices ignored).
    pub fn iou(&self, other: &RoiBox) -> f64 {
        let ix = (self.x2.min(other.x2) - self.x1.max(other.x1)).max(0.0);
        let iy = (self.y2.min(other.y2) - self.y1.max(other.y1)).max(0.0);
        let inter = ix * iy;
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }
}

/// Ordered FPN output levels P_k for k in [k_min, k_max]; level k has stride 2^k.
#[derive(Debug, Clone)]
pub struct FeaturePyramid {
    levels: Vec<(u32, Tensor)>,
    channels: usize,
}

impl FeaturePyramid {
    /// Levels must come in ascending k with matching batch/channel extents.
    pub fn new(levels: Vec<(u32, Tensor)>) -> Result<Self> {
        if levels.is_empty() {
            return Err(Error::Config("pyramid needs at least one level".into()));
        }
        let first = &levels[0].1;
        if first.rank() != 4 {
            return Err(Error::Dim("pyramid levels must be rank 4".into()));
        }
        let (n, c) = (first.shape()[0], first.shape()[1]);
        let mut prev_k = None;
        for (k, t) in &levels {
            if t.shape()[0] != n || t.shape()[1] != c {
                return Err(Error::Dim(format!(
                    "level {k} shape {:?} disagrees on batch/channels",
                    t.shape()
                )));
            }
            if let Some(pk) = prev_k {
                if *k <= pk {
                    return Err(Error::Config("pyramid levels must be in ascending k".into()));
                }
            }
            prev_k = Some(*k);
        }
        Ok(FeaturePyramid { levels, channels: c })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn level_ids(&self) -> Vec<u32> {
        self.levels.iter().map(|(k, _)| *k).collect()
    }

    pub fn levels(&self) -> &[(u32, Tensor)] {
        &self.levels
    }

    pub fn level(&self, k: u32) -> Option<&Tensor> {
        self.levels.iter().find(|(lk, _)| *lk == k).map(|(_, t)| t)
    }

    pub fn stride_of(k: u32) -> usize {
        1usize << k
    }
}

/// Parameters of the size-based level assignment heuristic.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AssignConfig {
    pub k0: u32,
    pub k_min: u32,
    pub k_max: u32,
    /// The image size an RoI of which maps exactly onto level k0.
    pub canonical_size: f64,
}

impl Default for AssignConfig {
    fn default() -> Self {
        AssignConfig {
            k0: 4,
            k_min: 2,
            k_max: 5,
            canonical_size: 224.0,
        }
    }
}

impl AssignConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.k_min <= self.k0 && self.k0 <= self.k_max) {
            return Err(Error::Config(format!(
                "need k_min <= k0 <= k_max, got {} <= {} <= {}",
                self.k_min, self.k0, self.k_max
            )));
        }
        if self.canonical_size <= 0.0 {
            return Err(Error::Config("canonical_size must be positive".into()));
        }
        Ok(())
    }
}

/// Size-based heuristic: k = floor(k0 + log2(sqrt(w*h) / canonical)), clamped
/// to [k_min, k_max].
pub fn assign_level(roi: &RoiBox, cfg: &AssignConfig) -> Result<u32> {
    cfg.validate()?;
    let (w, h) = (roi.width(), roi.height());
    if w <= 0.0 || h <= 0.0 {
        return Err(Error::Input(format!("degenerate box w={w} h={h}")));
    }
    let k = cfg.k0 as f64 + ((w * h).sqrt() / cfg.canonical_size).log2();
    let k = k.floor();
    let k = k.clamp(cfg.k_min as f64, cfg.k_max as f64);
    Ok(k as u32)
}

/// Uniform draw over [k_min, k_max].
pub fn random_level(rng: &mut SeededRng, cfg: &AssignConfig) -> Result<u32> {
    cfg.validate()?;
    Ok(rng.int_range(cfg.k_min as i64, cfg.k_max as i64) as u32)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn boxed(w: f64, h: f64) -> RoiBox {
        RoiBox::new(0, 0.0, 0.0, w, h).unwrap()
    }

    #[test]
    fn canonical_box_maps_to_k0() {
        let cfg = AssignConfig::default();
        assert_eq!(assign_level(&boxed(224.0, 224.0), &cfg).unwrap(), 4);
    }

    #[test]
    fn half_size_box_drops_one_level() {
        let cfg = AssignConfig::default();
        assert_eq!(assign_level(&boxed(112.0, 112.0), &cfg).unwrap(), 3);
    }

    #[test]
    fn oversized_box_clamps_to_k_max() {
        let cfg = AssignConfig::default();
        assert_eq!(assign_level(&boxed(1000.0, 1000.0), &cfg).unwrap(), 5);
    }

    #[test]
    fn tiny_box_clamps_to_k_min() {
        let cfg = AssignConfig::default();
        assert_eq!(assign_level(&boxed(2.0, 2.0), &cfg).unwrap(), 2);
    }

    #[test]
    fn degenerate_box_rejected() {
        assert!(RoiBox::new(0, 5.0, 5.0, 5.0, 9.0).is_err());
    }

    #[test]
    fn doubling_raises_unclamped_level_by_one() {
        // Clamp-free config so the shift property is visible over a wide range.
        let cfg = AssignConfig {
            k0: 10,
            k_min: 0,
            k_max: 20,
            canonical_size: 224.0,
        };
        let mut rng = SeededRng::new(11);
        for _ in 0..200 {
            let w = rng.uniform_range(4.0, 400.0);
            let h = rng.uniform_range(4.0, 400.0);
            let k1 = assign_level(&boxed(w, h), &cfg).unwrap();
            let k2 = assign_level(&boxed(2.0 * w, 2.0 * h), &cfg).unwrap();
            assert_eq!(k2, k1 + 1, "w={w} h={h}");
        }
    }

    #[test]
    fn assignment_monotone_in_area() {
        let cfg = AssignConfig::default();
        let mut rng = SeededRng::new(13);
        for _ in 0..500 {
            let a = rng.uniform_range(4.0, 600.0);
            let b = rng.uniform_range(4.0, 600.0);
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let k_lo = assign_level(&boxed(lo, lo), &cfg).unwrap();
            let k_hi = assign_level(&boxed(hi, hi), &cfg).unwrap();
            assert!(k_lo <= k_hi);
        }
    }

    #[test]
    fn random_level_uniform_within_4_sigma() {
        let cfg = AssignConfig::default();
        let mut rng = SeededRng::new(0);
        let n = 10_000usize;
        let mut counts = [0usize; 4];
        for _ in 0..n {
            let k = random_level(&mut rng, &cfg).unwrap();
            assert!((2..=5).contains(&k));
            counts[(k - 2) as usize] += 1;
        }
        // Binomial(n, 1/4): sigma = sqrt(n * p * (1-p)).
        let p = 0.25;
        let sigma = (n as f64 * p * (1.0 - p)).sqrt();
        for &c in &counts {
            assert!((c as f64 - n as f64 * p).abs() < 4.0 * sigma, "counts {counts:?}");
        }
    }

    #[test]
    fn pyramid_checks_consistency() {
        let ok = FeaturePyramid::new(vec![
            (2, Tensor::zeros(&[1, 8, 32, 32])),
            (3, Tensor::zeros(&[1, 8, 16, 16])),
        ]);
        assert!(ok.is_ok());
        let bad = FeaturePyramid::new(vec![
            (2, Tensor::zeros(&[1, 8, 32, 32])),
            (3, Tensor::zeros(&[1, 4, 16, 16])),
        ]);
        assert!(bad.is_err());
    }
}
