//! Forward-pass timing of the extraction strategies at several RoI counts.

use std::time::Instant;

use crate::error::Result;
use crate::extractor::{
    build_extractor, extract, workload_units, ExtractorConfig, PyramidVars, Strategy,
};
use crate::graph::Graph;
use crate::pyramid::RoiBox;
use crate::rng::SeededRng;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct BenchRow {
    pub strategy: String,
    pub rois: usize,
    pub millis: f64,
    pub workload: u64,
}

pub fn strategy_name(s: &Strategy) -> &'static str {
    match s {
        Strategy::SingleLevel => "single",
        Strategy::RandomLevel => "random",
        Strategy::Sum => "sum",
        Strategy::SumPlus => "sum_plus",
        Strategy::Concat => "concat",
        Strategy::Groie { .. } => "groie",
    }
}

fn random_boxes(n: usize, img: f64, rng: &mut SeededRng) -> Vec<RoiBox> {
    (0..n)
        .map(|_| {
            let w = rng.log_uniform(8.0, 96.0);
            let h = rng.log_uniform(8.0, 96.0);
            let x1 = rng.uniform_range(0.0, img - w);
            let y1 = rng.uniform_range(0.0, img - h);
            RoiBox::new(0, x1, y1, x1 + w, y1 + h).unwrap()
        })
        .collect()
}

/// Time one forward extraction per (strategy, roi count) pair on a random
/// pyramid. Timings are wall clock; workload is the analytic MAC count.
pub fn run_bench(strategies: &[Strategy], roi_counts: &[usize], channels: usize) -> Result<Vec<BenchRow>> {
    let mut rng = SeededRng::new(42);
    let sizes = [(2u32, 32usize), (3, 16), (4, 8), (5, 4)];
    let mut rows = Vec::new();
    for &strategy in strategies {
        let config = ExtractorConfig::new(strategy, 7, channels);
        let params = build_extractor(&config, &mut rng)?;
        for &n in roi_counts {
            let boxes = random_boxes(n, 128.0, &mut rng);
            let mut g = Graph::new();
            let levels = sizes
                .iter()
                .map(|&(k, s)| {
                    let t = Tensor::rand_uniform(&[1, channels, s, s], -1.0, 1.0, &mut rng);
                    (k, g.input(t))
                })
                .collect();
            let pyramid = PyramidVars { levels };
            let mut erng = SeededRng::new(7);
            let start = Instant::now();
            let out = extract(&mut g, &params, "", &pyramid, &boxes, &config, &mut erng)?;
            let millis = start.elapsed().as_secs_f64() * 1e3;
            assert_eq!(g.value(out.features).shape()[0], n);
            rows.push(BenchRow {
                strategy: strategy_name(&strategy).into(),
                rois: n,
                millis,
                workload: workload_units(&config, n),
            });
        }
    }
    Ok(rows)
}
