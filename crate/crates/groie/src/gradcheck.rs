//! Central finite-difference gradient checking.
//!
//! The checker perturbs every element of every parameter in place, compares
//! (f(p+eps) - f(p-eps)) / (2 eps) against the tape's backward pass, and
//! restores the parameters afterwards.

use std::fmt;

use crate::error::{Error, Result};
use crate::graph::{Graph, VarId};
use crate::params::ParamSet;

/// Floor under which relative errors fall back to absolute comparison.
const REL_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct ParamCheck {
    pub name: String,
    pub max_abs_err: f64,
    pub max_rel_err: f64,
    pub worst_index: usize,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub per_param: Vec<ParamCheck>,
    pub tol: f64,
    pub pass: bool,
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<44} {:>12} {:>12} {:>8}", "parameter", "max_abs", "max_rel", "worst")?;
        for p in &self.per_param {
            writeln!(
                f,
                "{:<44} {:>12.3e} {:>12.3e} {:>8}",
                p.name, p.max_abs_err, p.max_rel_err, p.worst_index
            )?;
        }
        writeln!(
            f,
            "overall: {} (tol {:.1e})",
            if self.pass { "PASS" } else { "FAIL" },
            self.tol
        )
    }
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR)
}

/// Check the backward-pass gradients of a scalar-valued function of `params`.
///
/// `build` must construct a fresh graph from the current parameter values and
/// return the scalar output node; it is called many times with perturbed
/// parameters.
#[allow(clippy::needless_range_loop)]
pub fn check_gradients<F>(
    build: F,
    params: &mut ParamSet,
    eps: f64,
    tol: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&ParamSet) -> Result<(Graph, VarId)>,
{
    let eval = |params: &ParamSet| -> Result<f64> {
        let (graph, out) = build(params)?;
        let v = graph.value(out);
        if v.len() != 1 {
            return Err(Error::Usage(format!(
                "gradcheck function must be scalar, got shape {:?}",
                v.shape()
            )));
        }
        Ok(v.data()[0])
    };

    let base = eval(params)?;
    let base2 = eval(params)?;
    if base != base2 {
        return Err(Error::Usage(format!(
            "function is not deterministic: {base} vs {base2}"
        )));
    }

    // Analytic gradients from one backward pass.
    params.zero_grads();
    let (mut graph, out) = build(params)?;
    graph.backward(out, params)?;
    let analytic: Vec<Vec<f64>> = params.iter().map(|p| p.grad.data().to_vec()).collect();

    let mut per_param = Vec::with_capacity(params.len());
    let mut pass = true;
    for pidx in 0..params.len() {
        let n_elems = params.get(pidx).value.len();
        let mut check = ParamCheck {
            name: params.get(pidx).name.clone(),
            max_abs_err: 0.0,
            max_rel_err: 0.0,
            worst_index: 0,
        };
        for i in 0..n_elems {
            let orig = params.get(pidx).value.data()[i];
            params.get_mut(pidx).value.data_mut()[i] = orig + eps;
            let up = eval(params)?;
            params.get_mut(pidx).value.data_mut()[i] = orig - eps;
            let down = eval(params)?;
            params.get_mut(pidx).value.data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let a = analytic[pidx][i];
            let abs = (a - numeric).abs();
            let rel = rel_err(a, numeric);
            if rel > check.max_rel_err {
                check.max_rel_err = rel;
                check.worst_index = i;
            }
            check.max_abs_err = check.max_abs_err.max(abs);
            if rel >= tol {
                pass = false;
            }
        }
        per_param.push(check);
    }
    params.zero_grads();
    Ok(GradCheckReport { per_param, tol, pass })
}

/// Run the full battery of gradient checks used by the `gradcheck` command:
/// elementary ops, losses, the RoI pooling op, every processing block, and
/// every extraction strategy end to end.
pub fn standard_suite(tol: f64) -> Result<Vec<(String, GradCheckReport)>> {
    use crate::blocks::{AttentionBlock, Block, ConvBlock, NonLocalBlock};
    use crate::extractor::{
        build_extractor, extract, Aggregation, BlockChoice, ExtractorConfig, PyramidVars, Strategy,
    };
    use crate::pyramid::RoiBox;
    use crate::rng::SeededRng;
    use crate::roi_align::RoiAlignSpec;
    use crate::tensor::Tensor;

    let mut reports = Vec::new();
    let mut rng = SeededRng::new(1234);

    // Composite of the dense ops feeding a classification loss.
    {
        let mut params = ParamSet::new();
        params.add("x", Tensor::rand_uniform(&[1, 2, 6, 6], -1.0, 1.0, &mut rng))?;
        params.add("conv.weight", Tensor::rand_uniform(&[3, 2, 3, 3], -0.5, 0.5, &mut rng))?;
        params.add("conv.bias", Tensor::rand_uniform(&[3], -0.5, 0.5, &mut rng))?;
        params.add("fc.weight", Tensor::rand_uniform(&[3 * 36, 4], -0.2, 0.2, &mut rng))?;
        params.add("fc.bias", Tensor::rand_uniform(&[4], -0.2, 0.2, &mut rng))?;
        let report = check_gradients(
            |ps| {
                let mut g = Graph::new();
                let x = g.param_by_name(ps, "x")?;
                let w = g.param_by_name(ps, "conv.weight")?;
                let b = g.param_by_name(ps, "conv.bias")?;
                let y = g.conv2d(x, w, b, 1, 1)?;
                let y = g.relu(y);
                let y = g.reshape(y, &[1, 3 * 36])?;
                let fw = g.param_by_name(ps, "fc.weight")?;
                let fb = g.param_by_name(ps, "fc.bias")?;
                let logits = g.linear(y, fw, fb)?;
                let loss = g.cross_entropy(logits, &[2])?;
                Ok((g, loss))
            },
            &mut params,
            1e-5,
            tol,
        )?;
        reports.push(("conv_relu_linear_cross_entropy".to_string(), report));
    }

    // Softmax feeding a weighted sum.
    {
        let mut params = ParamSet::new();
        params.add("x", Tensor::rand_uniform(&[3, 5], -2.0, 2.0, &mut rng))?;
        params.add("w", Tensor::rand_uniform(&[3, 5], -1.0, 1.0, &mut rng))?;
        let report = check_gradients(
            |ps| {
                let mut g = Graph::new();
                let x = g.param_by_name(ps, "x")?;
                let w = g.param_by_name(ps, "w")?;
                let p = g.softmax(x, 1)?;
                let y = g.mul(p, w)?;
                let s = g.sum_all(y);
                Ok((g, s))
            },
            &mut params,
            1e-5,
            tol,
        )?;
        reports.push(("softmax_weighted_sum".to_string(), report));
    }

    // Huber loss with elements on both sides of the quadratic/linear switch.
    {
        let mut params = ParamSet::new();
        params.add("pred", Tensor::rand_uniform(&[3, 4], -3.0, 3.0, &mut rng))?;
        let target = Tensor::rand_uniform(&[3, 4], -1.0, 1.0, &mut rng);
        let report = check_gradients(
            |ps| {
                let mut g = Graph::new();
                let p = g.param_by_name(ps, "pred")?;
                let loss = g.smooth_l1(p, &target, 1.0)?;
                Ok((g, loss))
            },
            &mut params,
            1e-5,
            tol,
        )?;
        reports.push(("smooth_l1".to_string(), report));
    }

    // Binary cross entropy behind a sigmoid.
    {
        let mut params = ParamSet::new();
        params.add("logits", Tensor::rand_uniform(&[2, 1, 4, 4], -2.0, 2.0, &mut rng))?;
        let mut tdata = vec![0.0; 32];
        for (i, v) in tdata.iter_mut().enumerate() {
            *v = (i % 2) as f64;
        }
        let target = Tensor::new(vec![2, 1, 4, 4], tdata)?;
        let report = check_gradients(
            |ps| {
                let mut g = Graph::new();
                let x = g.param_by_name(ps, "logits")?;
                let p = g.sigmoid(x);
                let loss = g.bce(p, &target)?;
                Ok((g, loss))
            },
            &mut params,
            1e-5,
            tol,
        )?;
        reports.push(("sigmoid_bce".to_string(), report));
    }

    // RoI pooling with respect to the feature map.
    {
        let mut params = ParamSet::new();
        params.add("level", Tensor::rand_uniform(&[1, 3, 8, 8], -1.0, 1.0, &mut rng))?;
        let boxes = vec![RoiBox::new(0, 1.0, 0.5, 6.5, 7.0)?];
        let spec = RoiAlignSpec { out_size: 3, sampling_ratio: 2, spatial_scale: 1.0 };
        let report = check_gradients(
            |ps| {
                let mut g = Graph::new();
                let x = g.param_by_name(ps, "level")?;
                let y = g.roi_align(x, &boxes, spec)?;
                let sq = g.mul(y, y)?;
                let s = g.sum_all(sq);
                Ok((g, s))
            },
            &mut params,
            1e-5,
            tol,
        )?;
        reports.push(("roi_align".to_string(), report));
    }

    // Each processing block through a quadratic readout.
    let block_cases: Vec<(&str, Block)> = vec![
        ("block_conv3", Block::Conv(ConvBlock::new(3, 8, "")?)),
        ("block_nonlocal", Block::NonLocal(NonLocalBlock::new(8, "")?)),
        ("block_attention", Block::Attention(AttentionBlock::new(8, 8, 5, "")?)),
    ];
    for (name, block) in block_cases {
        let mut params = ParamSet::new();
        block.build(&mut params, &mut rng)?;
        params.add("x", Tensor::rand_uniform(&[2, 8, 5, 5], -1.0, 1.0, &mut rng))?;
        let report = check_gradients(
            |ps| {
                let mut g = Graph::new();
                let x = g.param_by_name(ps, "x")?;
                let y = block.forward(&mut g, ps, x)?;
                let sq = g.mul(y, y)?;
                let s = g.sum_all(sq);
                Ok((g, s))
            },
            &mut params,
            1e-5,
            tol,
        )?;
        reports.push((name.to_string(), report));
    }

    // Every extraction strategy end to end, pyramid values included.
    let strategies = [
        ("extract_single", Strategy::SingleLevel),
        ("extract_random", Strategy::RandomLevel),
        ("extract_sum", Strategy::Sum),
        ("extract_sum_plus", Strategy::SumPlus),
        ("extract_concat", Strategy::Concat),
        (
            "extract_generic",
            Strategy::Groie {
                pre: BlockChoice::Conv(1),
                agg: Aggregation::Sum,
                post: BlockChoice::None,
            },
        ),
    ];
    let boxes = vec![
        RoiBox::new(0, 4.0, 8.0, 40.0, 52.0)?,
        RoiBox::new(0, 30.0, 20.0, 90.0, 110.0)?,
    ];
    for (name, strat) in strategies {
        let config = ExtractorConfig::new(strat, 7, 8);
        let mut srng = SeededRng::new(31);
        let mut params = build_extractor(&config, &mut srng)?;
        let sizes = [(2u32, 8usize), (3, 4), (4, 2), (5, 1)];
        for &(k, sz) in &sizes {
            params.add(
                format!("pyramid.l{k}"),
                Tensor::rand_uniform(&[1, 8, sz, sz], -1.0, 1.0, &mut srng),
            )?;
        }
        let erng = SeededRng::new(77);
        let report = check_gradients(
            |ps| {
                let mut g = Graph::new();
                let levels = sizes
                    .iter()
                    .map(|&(k, _)| Ok((k, g.param_by_name(ps, &format!("pyramid.l{k}"))?)))
                    .collect::<Result<Vec<_>>>()?;
                let out = extract(
                    &mut g,
                    ps,
                    "",
                    &PyramidVars { levels },
                    &boxes,
                    &config,
                    &mut erng.clone(),
                )?;
                let sq = g.mul(out.features, out.features)?;
                let s = g.sum_all(sq);
                Ok((g, s))
            },
            // eps 1e-4: the larger step keeps the finite-difference round-off
            // floor below the tolerance for the high-magnitude readout.
            &mut params,
            1e-4,
            tol,
        )?;
        reports.push((name.to_string(), report));
    }

    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;
    use crate::tensor::Tensor;

    #[test]
    fn linear_map_grad_is_exact() {
        // f(x) = 3 * sum(x) -> grad 3 everywhere.
        let mut params = ParamSet::new();
        let mut rng = SeededRng::new(1);
        params
            .add("x", Tensor::rand_uniform(&[2, 3], -1.0, 1.0, &mut rng))
            .unwrap();
        let report = check_gradients(
            |ps| {
                let mut g = Graph::new();
                let x = g.param_by_name(ps, "x")?;
                let y = g.scale(x, 3.0);
                let s = g.sum_all(y);
                Ok((g, s))
            },
            &mut params,
            1e-5,
            1e-5,
        )
        .unwrap();
        assert!(report.pass, "{report}");
        assert!(report.per_param[0].max_rel_err < 1e-10);
    }

    #[test]
    fn quadratic_grad_confirmed() {
        // f(x) = sum(x^2) at x = 3 -> grad 6.
        let mut params = ParamSet::new();
        params.add("x", Tensor::full(&[1], 3.0)).unwrap();
        params.zero_grads();
        let mut g = Graph::new();
        let x = g.param_by_name(&params, "x").unwrap();
        let y = g.mul(x, x).unwrap();
        let s = g.sum_all(y);
        g.backward(s, &mut params).unwrap();
        assert!((params.by_name("x").unwrap().grad.data()[0] - 6.0).abs() < 1e-12);

        let report = check_gradients(
            |ps| {
                let mut g = Graph::new();
                let x = g.param_by_name(ps, "x")?;
                let y = g.mul(x, x)?;
                let s = g.sum_all(y);
                Ok((g, s))
            },
            &mut params,
            1e-5,
            1e-5,
        )
        .unwrap();
        assert!(report.pass);
    }

    #[test]
    fn report_is_deterministic() {
        let mut params = ParamSet::new();
        let mut rng = SeededRng::new(2);
        params
            .add("x", Tensor::rand_uniform(&[4], -1.0, 1.0, &mut rng))
            .unwrap();
        let run = |params: &mut ParamSet| {
            check_gradients(
                |ps| {
                    let mut g = Graph::new();
                    let x = g.param_by_name(ps, "x")?;
                    let y = g.sigmoid(x);
                    let s = g.sum_all(y);
                    Ok((g, s))
                },
                params,
                1e-5,
                1e-5,
            )
            .unwrap()
        };
        let a = run(&mut params);
        let b = run(&mut params);
        assert_eq!(a.per_param[0].max_rel_err, b.per_param[0].max_rel_err);
        assert_eq!(a.per_param[0].max_abs_err, b.per_param[0].max_abs_err);
    }
}
