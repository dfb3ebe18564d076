//! Desk-scale two-stage model: a small strided backbone with a top-down
//! pyramid, the configurable RoI extraction layer, and box/mask heads.

use crate::error::Result;
use crate::extractor::{build_extractor, extract, ExtractorConfig, PyramidVars, Strategy};
use crate::graph::{Graph, VarId};
use crate::params::ParamSet;
use crate::pyramid::RoiBox;
use crate::rng::SeededRng;
use crate::tensor::Tensor;

use super::scene::NUM_CLASSES;

pub const BOX_POOL: usize = 7;
pub const MASK_POOL: usize = 14;
pub const MASK_SIZE: usize = 28;
pub const HIDDEN: usize = 128;

pub struct ToyModel {
    pub params: ParamSet,
    pub channels: usize,
    pub box_extractor: ExtractorConfig,
    pub mask_extractor: ExtractorConfig,
}

impl ToyModel {
    /// Allocate every parameter. The box and mask paths share one extraction
    /// strategy but keep separate block/reduction weights.
    pub fn build(strategy: Strategy, channels: usize, rng: &mut SeededRng) -> Result<ToyModel> {
        let c = channels;
        let box_extractor = ExtractorConfig::new(strategy, BOX_POOL, c);
        let mask_extractor = ExtractorConfig::new(strategy, MASK_POOL, c);
        let mut params = ParamSet::new();

        // Backbone: stride-4 stem to 1/4 resolution, then three stride-2
        // stages; laterals + nearest upsampling merge top-down.
        params.add("stem.weight", Tensor::glorot_uniform(&[c, 3, 5, 5], 3 * 25, c, rng))?;
        params.add("stem.bias", Tensor::zeros(&[c]))?;
        for stage in ["c3", "c4", "c5"] {
            params.add(
                format!("{stage}.weight"),
                Tensor::glorot_uniform(&[c, c, 3, 3], c * 9, c, rng),
            )?;
            params.add(format!("{stage}.bias"), Tensor::zeros(&[c]))?;
        }
        for k in 2..=5 {
            params.add(
                format!("lat{k}.weight"),
                Tensor::glorot_uniform(&[c, c, 1, 1], c, c, rng),
            )?;
            params.add(format!("lat{k}.bias"), Tensor::zeros(&[c]))?;
        }

        params.extend_prefixed("box_ext.", build_extractor(&box_extractor, rng)?)?;
        params.extend_prefixed("mask_ext.", build_extractor(&mask_extractor, rng)?)?;

        // Box head: shared fc, then class logits and class-agnostic deltas.
        let flat = c * BOX_POOL * BOX_POOL;
        params.add("fc1.weight", Tensor::glorot_uniform(&[flat, HIDDEN], flat, HIDDEN, rng))?;
        params.add("fc1.bias", Tensor::zeros(&[HIDDEN]))?;
        params.add(
            "cls.weight",
            Tensor::glorot_uniform(&[HIDDEN, NUM_CLASSES + 1], HIDDEN, NUM_CLASSES + 1, rng),
        )?;
        params.add("cls.bias", Tensor::zeros(&[NUM_CLASSES + 1]))?;
        params.add("delta.weight", Tensor::glorot_uniform(&[HIDDEN, 4], HIDDEN, 4, rng))?;
        params.add("delta.bias", Tensor::zeros(&[4]))?;

        // Mask head: two convs at pooled resolution, upsample, 1x1 to a
        // single sigmoid map. Capped width keeps per-RoI cost modest.
        let mc = c.min(32);
        params.add("m1.weight", Tensor::glorot_uniform(&[mc, c, 3, 3], c * 9, mc, rng))?;
        params.add("m1.bias", Tensor::zeros(&[mc]))?;
        params.add("m2.weight", Tensor::glorot_uniform(&[mc, mc, 3, 3], mc * 9, mc, rng))?;
        params.add("m2.bias", Tensor::zeros(&[mc]))?;
        params.add("m3.weight", Tensor::glorot_uniform(&[1, mc, 1, 1], mc, 1, rng))?;
        params.add("m3.bias", Tensor::zeros(&[1]))?;

        Ok(ToyModel { params, channels, box_extractor, mask_extractor })
    }

    fn conv(&self, g: &mut Graph, x: VarId, name: &str, stride: usize, pad: usize) -> Result<VarId> {
        let w = g.param_by_name(&self.params, &format!("{name}.weight"))?;
        let b = g.param_by_name(&self.params, &format!("{name}.bias"))?;
        g.conv2d(x, w, b, stride, pad)
    }

    /// Run the backbone on one [1,3,H,W] image and return pyramid levels
    /// 2..=5 (stride 2^k each).
    pub fn backbone(&self, g: &mut Graph, image: Tensor) -> Result<PyramidVars> {
        let x = g.input(image);
        let c2 = self.conv(g, x, "stem", 4, 2)?;
        let c2 = g.relu(c2);
        let c3 = self.conv(g, c2, "c3", 2, 1)?;
        let c3 = g.relu(c3);
        let c4 = self.conv(g, c3, "c4", 2, 1)?;
        let c4 = g.relu(c4);
        let c5 = self.conv(g, c4, "c5", 2, 1)?;
        let c5 = g.relu(c5);

        let p5 = self.conv(g, c5, "lat5", 1, 0)?;
        let up5 = g.upsample2x(p5)?;
        let l4 = self.conv(g, c4, "lat4", 1, 0)?;
        let p4 = g.add(l4, up5)?;
        let up4 = g.upsample2x(p4)?;
        let l3 = self.conv(g, c3, "lat3", 1, 0)?;
        let p3 = g.add(l3, up4)?;
        let up3 = g.upsample2x(p3)?;
        let l2 = self.conv(g, c2, "lat2", 1, 0)?;
        let p2 = g.add(l2, up3)?;

        Ok(PyramidVars { levels: vec![(2, p2), (3, p3), (4, p4), (5, p5)] })
    }

    pub fn extract_box(
        &self,
        g: &mut Graph,
        pyramid: &PyramidVars,
        boxes: &[RoiBox],
        rng: &mut SeededRng,
    ) -> Result<VarId> {
        Ok(extract(g, &self.params, "box_ext.", pyramid, boxes, &self.box_extractor, rng)?.features)
    }

    pub fn extract_mask(
        &self,
        g: &mut Graph,
        pyramid: &PyramidVars,
        boxes: &[RoiBox],
        rng: &mut SeededRng,
    ) -> Result<VarId> {
        Ok(extract(g, &self.params, "mask_ext.", pyramid, boxes, &self.mask_extractor, rng)?.features)
    }

    /// Class logits [R, classes+1] and class-agnostic deltas [R, 4] from
    /// pooled box features [R, C, 7, 7].
    pub fn box_head(&self, g: &mut Graph, feats: VarId) -> Result<(VarId, VarId)> {
        let r = g.value(feats).shape()[0];
        let flat = self.channels * BOX_POOL * BOX_POOL;
        let x = g.reshape(feats, &[r, flat])?;
        let w1 = g.param_by_name(&self.params, "fc1.weight")?;
        let b1 = g.param_by_name(&self.params, "fc1.bias")?;
        let h = g.linear(x, w1, b1)?;
        let h = g.relu(h);
        let wc = g.param_by_name(&self.params, "cls.weight")?;
        let bc = g.param_by_name(&self.params, "cls.bias")?;
        let logits = g.linear(h, wc, bc)?;
        let wd = g.param_by_name(&self.params, "delta.weight")?;
        let bd = g.param_by_name(&self.params, "delta.bias")?;
        let deltas = g.linear(h, wd, bd)?;
        Ok((logits, deltas))
    }

    /// Per-RoI mask probabilities [R, 1, 28, 28] from pooled features
    /// [R, C, 14, 14].
    pub fn mask_head(&self, g: &mut Graph, feats: VarId) -> Result<VarId> {
        let x = self.conv(g, feats, "m1", 1, 1)?;
        let x = g.relu(x);
        let x = self.conv(g, x, "m2", 1, 1)?;
        let x = g.relu(x);
        let x = g.upsample2x(x)?;
        let x = self.conv(g, x, "m3", 1, 0)?;
        Ok(g.sigmoid(x))
    }
}

/// Box regression targets: center offsets normalized by the proposal size,
/// log size ratios.
pub fn encode_deltas(proposal: &RoiBox, gt: &RoiBox) -> [f64; 4] {
    let (pw, ph) = (proposal.width(), proposal.height());
    let (pcx, pcy) = ((proposal.x1 + proposal.x2) / 2.0, (proposal.y1 + proposal.y2) / 2.0);
    let (gw, gh) = (gt.width(), gt.height());
    let (gcx, gcy) = ((gt.x1 + gt.x2) / 2.0, (gt.y1 + gt.y2) / 2.0);
    [
        (gcx - pcx) / pw,
        (gcy - pcy) / ph,
        (gw / pw).ln(),
        (gh / ph).ln(),
    ]
}

/// Inverse of `encode_deltas`, clipped to the image.
pub fn decode_deltas(proposal: &RoiBox, d: &[f64], img: f64) -> Result<RoiBox> {
    let (pw, ph) = (proposal.width(), proposal.height());
    let (pcx, pcy) = ((proposal.x1 + proposal.x2) / 2.0, (proposal.y1 + proposal.y2) / 2.0);
    let cx = pcx + d[0].clamp(-2.0, 2.0) * pw;
    let cy = pcy + d[1].clamp(-2.0, 2.0) * ph;
    let w = pw * d[2].clamp(-2.0, 2.0).exp();
    let h = ph * d[3].clamp(-2.0, 2.0).exp();
    let x1 = (cx - w / 2.0).clamp(0.0, img - 1.0);
    let y1 = (cy - h / 2.0).clamp(0.0, img - 1.0);
    let x2 = (cx + w / 2.0).clamp(x1 + 1.0, img);
    let y2 = (cy + h / 2.0).clamp(y1 + 1.0, img);
    RoiBox::new(proposal.batch_idx, x1, y1, x2, y2)
}

/// Bilinearly sample a binary image-resolution mask inside `roi` onto an
/// `out`x`out` grid, then threshold at 0.5. Used both for training targets
/// and for pasting predictions back.
pub fn resample_mask(mask: &[bool], img: usize, roi: &RoiBox, out: usize) -> Vec<f64> {
    let bin_w = roi.width() / out as f64;
    let bin_h = roi.height() / out as f64;
    let mut target = vec![0.0; out * out];
    for oy in 0..out {
        let sy = roi.y1 + (oy as f64 + 0.5) * bin_h;
        for ox in 0..out {
            let sx = roi.x1 + (ox as f64 + 0.5) * bin_w;
            let v = bilinear_mask(mask, img, sy, sx);
            if v >= 0.5 {
                target[oy * out + ox] = 1.0;
            }
        }
    }
    target
}

fn bilinear_mask(mask: &[bool], img: usize, y: f64, x: f64) -> f64 {
    let (u, v) = (x - 0.5, y - 0.5);
    let (x0, y0) = (u.floor(), v.floor());
    let (fx, fy) = (u - x0, v - y0);
    let mut acc = 0.0;
    for (dy, wy) in [(0i64, 1.0 - fy), (1, fy)] {
        for (dx, wx) in [(0i64, 1.0 - fx), (1, fx)] {
            let yy = y0 as i64 + dy;
            let xx = x0 as i64 + dx;
            if yy >= 0 && xx >= 0 && (yy as usize) < img && (xx as usize) < img {
                let bit = mask[yy as usize * img + xx as usize] as usize as f64;
                acc += wy * wx * bit;
            }
        }
    }
    acc
}

/// Paste a predicted mask (probabilities on MASK_SIZE^2) into an
/// image-resolution boolean canvas over `roi`.
pub fn paste_mask(probs: &[f64], roi: &RoiBox, img: usize) -> Vec<bool> {
    let mut out = vec![false; img * img];
    let (x0, y0) = (roi.x1.floor().max(0.0) as usize, roi.y1.floor().max(0.0) as usize);
    let (x1, y1) = (
        (roi.x2.ceil() as usize).min(img),
        (roi.y2.ceil() as usize).min(img),
    );
    let s = MASK_SIZE as f64;
    for y in y0..y1 {
        // Map the pixel center into mask grid coordinates.
        let my = ((y as f64 + 0.5 - roi.y1) / roi.height()) * s - 0.5;
        for x in x0..x1 {
            let mx = ((x as f64 + 0.5 - roi.x1) / roi.width()) * s - 0.5;
            let v = bilinear_grid(probs, MASK_SIZE, my, mx);
            if v >= 0.5 {
                out[y * img + x] = true;
            }
        }
    }
    out
}

fn bilinear_grid(grid: &[f64], side: usize, y: f64, x: f64) -> f64 {
    let (y0, x0) = (y.floor(), x.floor());
    let (fy, fx) = (y - y0, x - x0);
    let mut acc = 0.0;
    for (dy, wy) in [(0i64, 1.0 - fy), (1, fy)] {
        for (dx, wx) in [(0i64, 1.0 - fx), (1, fx)] {
            let yy = y0 as i64 + dy;
            let xx = x0 as i64 + dx;
            // Clamp to the border so edge pixels keep full weight.
            let yy = yy.clamp(0, side as i64 - 1) as usize;
            let xx = xx.clamp(0, side as i64 - 1) as usize;
            acc += wy * wx * grid[yy * side + xx];
        }
    }
    acc
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::scene::{generate_scene, SceneSpec};

    #[test]
    fn backbone_produces_expected_pyramid_shapes() {
        let mut rng = SeededRng::new(0);
        let model = ToyModel::build(Strategy::Sum, 16, &mut rng).unwrap();
        let (img, _) = generate_scene(&mut SeededRng::new(1), &SceneSpec::default());
        let mut g = Graph::new();
        let pyr = model.backbone(&mut g, img).unwrap();
        let want = [(2u32, 32usize), (3, 16), (4, 8), (5, 4)];
        for ((k, id), (wk, ws)) in pyr.levels.iter().zip(want) {
            assert_eq!(*k, wk);
            assert_eq!(g.value(*id).shape(), &[1, 16, ws, ws]);
        }
    }

    #[test]
    fn heads_produce_expected_shapes() {
        let mut rng = SeededRng::new(2);
        let model = ToyModel::build(Strategy::Sum, 16, &mut rng).unwrap();
        let (img, gt) = generate_scene(&mut SeededRng::new(3), &SceneSpec::default());
        let boxes: Vec<RoiBox> = gt.objects.iter().map(|o| o.roi).collect();
        let mut g = Graph::new();
        let pyr = model.backbone(&mut g, img).unwrap();
        let mut erng = SeededRng::new(4);
        let bf = model.extract_box(&mut g, &pyr, &boxes, &mut erng).unwrap();
        let (logits, deltas) = model.box_head(&mut g, bf).unwrap();
        assert_eq!(g.value(logits).shape(), &[boxes.len(), NUM_CLASSES + 1]);
        assert_eq!(g.value(deltas).shape(), &[boxes.len(), 4]);
        let mf = model.extract_mask(&mut g, &pyr, &boxes, &mut erng).unwrap();
        let masks = model.mask_head(&mut g, mf).unwrap();
        assert_eq!(g.value(masks).shape(), &[boxes.len(), 1, MASK_SIZE, MASK_SIZE]);
        let probs = g.value(masks).data();
        assert!(probs.iter().all(|&p| (0.0..=1.0).contains(&p)));
    }

    #[test]
    fn delta_encode_decode_roundtrip() {
        let mut rng = SeededRng::new(5);
        for _ in 0..100 {
            let p = RoiBox::new(
                0,
                rng.uniform_range(0.0, 50.0),
                rng.uniform_range(0.0, 50.0),
                rng.uniform_range(60.0, 120.0),
                rng.uniform_range(60.0, 120.0),
            )
            .unwrap();
            let gt = RoiBox::new(
                0,
                p.x1 + rng.uniform_range(-5.0, 5.0),
                p.y1 + rng.uniform_range(-5.0, 5.0),
                p.x2 + rng.uniform_range(-5.0, 5.0),
                p.y2 + rng.uniform_range(-5.0, 5.0),
            )
            .unwrap();
            let d = encode_deltas(&p, &gt);
            let back = decode_deltas(&p, &d, 128.0).unwrap();
            assert!((back.x1 - gt.x1.clamp(0.0, 128.0)).abs() < 1e-9);
            assert!((back.y2 - gt.y2.clamp(0.0, 128.0)).abs() < 1e-9);
        }
    }

    #[test]
    fn mask_resample_of_full_box_is_all_ones() {
        let img = 32;
        let mut mask = vec![false; img * img];
        for y in 8..24 {
            for x in 8..24 {
                mask[y * img + x] = true;
            }
        }
        let roi = RoiBox::new(0, 8.0, 8.0, 24.0, 24.0).unwrap();
        let t = resample_mask(&mask, img, &roi, MASK_SIZE);
        // Interior samples are solid; only border bins can dip below 1.
        let interior: f64 = (2..26)
            .flat_map(|y| (2..26).map(move |x| (y, x)))
            .map(|(y, x)| t[y * MASK_SIZE + x])
            .sum();
        assert_eq!(interior, 24.0 * 24.0);
    }

    #[test]
    fn paste_then_compare_recovers_square() {
        let img = 64;
        let roi = RoiBox::new(0, 10.0, 20.0, 40.0, 50.0).unwrap();
        let probs = vec![1.0; MASK_SIZE * MASK_SIZE];
        let pasted = paste_mask(&probs, &roi, img);
        for y in 0..img {
            for x in 0..img {
                let inside = (10..40).contains(&x) && (20..50).contains(&y);
                assert_eq!(pasted[y * img + x], inside, "at {x},{y}");
            }
        }
    }
}
