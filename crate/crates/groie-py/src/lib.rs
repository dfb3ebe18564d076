//! Python bindings for the RoI extraction layer: tensors, boxes, level
//! assignment, RoI pooling, the extraction strategies, and the gradient
//! check battery.

// The pymethods macro expands to PyErr-to-PyErr conversions that trip this
// lint; nothing hand-written converts uselessly.
#![allow(clippy::useless_conversion)]

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use groie::extractor::{
    build_extractor, extract, Aggregation, BlockChoice, ExtractorConfig, PyramidVars, Strategy,
};
use groie::graph::Graph;
use groie::pyramid::{assign_level, AssignConfig};
use groie::roi_align::{roi_align_forward, RoiAlignSpec};
use groie::{ParamSet, SeededRng, Tensor};

fn err<E: std::fmt::Display>(e: E) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// Dense rank-<=4 tensor: a shape plus row-major f64 data.
#[pyclass(name = "Tensor")]
#[derive(Clone)]
struct PyTensor {
    inner: Tensor,
}

#[pymethods]
impl PyTensor {
    #[new]
    fn new(shape: Vec<usize>, data: Vec<f64>) -> PyResult<Self> {
        Ok(PyTensor { inner: Tensor::new(shape, data).map_err(err)? })
    }

    #[staticmethod]
    fn zeros(shape: Vec<usize>) -> Self {
        PyTensor { inner: Tensor::zeros(&shape) }
    }

    #[staticmethod]
    fn random(shape: Vec<usize>, lo: f64, hi: f64, seed: u64) -> Self {
        let mut rng = SeededRng::new(seed);
        PyTensor { inner: Tensor::rand_uniform(&shape, lo, hi, &mut rng) }
    }

    #[getter]
    fn shape(&self) -> Vec<usize> {
        self.inner.shape().to_vec()
    }

    #[getter]
    fn data(&self) -> Vec<f64> {
        self.inner.data().to_vec()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __repr__(&self) -> String {
        format!("Tensor(shape={:?})", self.inner.shape())
    }
}

/// RoI in image pixel coordinates with a batch index.
#[pyclass(name = "RoiBox")]
#[derive(Clone)]
struct PyRoiBox {
    inner: groie::RoiBox,
}

#[pymethods]
impl PyRoiBox {
    #[new]
    #[pyo3(signature = (x1, y1, x2, y2, batch_idx = 0))]
    fn new(x1: f64, y1: f64, x2: f64, y2: f64, batch_idx: usize) -> PyResult<Self> {
        Ok(PyRoiBox { inner: groie::RoiBox::new(batch_idx, x1, y1, x2, y2).map_err(err)? })
    }

    #[getter]
    fn width(&self) -> f64 {
        self.inner.width()
    }

    #[getter]
    fn height(&self) -> f64 {
        self.inner.height()
    }

    fn iou(&self, other: &PyRoiBox) -> f64 {
        self.inner.iou(&other.inner)
    }

    /// Pyramid level the size heuristic assigns to this box.
    fn level(&self) -> PyResult<u32> {
        assign_level(&self.inner, &AssignConfig::default()).map_err(err)
    }

    fn __repr__(&self) -> String {
        let b = &self.inner;
        format!("RoiBox({}, {}, {}, {})", b.x1, b.y1, b.x2, b.y2)
    }
}

/// Deterministic xoshiro256** generator.
#[pyclass(name = "SeededRng")]
struct PySeededRng {
    inner: SeededRng,
}

#[pymethods]
impl PySeededRng {
    #[new]
    fn new(seed: u64) -> Self {
        PySeededRng { inner: SeededRng::new(seed) }
    }

    fn uniform(&mut self) -> f64 {
        self.inner.uniform()
    }

    fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        self.inner.uniform_range(lo, hi)
    }

    fn int_range(&mut self, lo: i64, hi: i64) -> i64 {
        self.inner.int_range(lo, hi)
    }
}

fn parse_block(name: &str) -> PyResult<BlockChoice> {
    Ok(match name {
        "none" => BlockChoice::None,
        "conv1" => BlockChoice::Conv(1),
        "conv3" => BlockChoice::Conv(3),
        "conv5" => BlockChoice::Conv(5),
        "nonlocal" => BlockChoice::NonLocal,
        "attention" => BlockChoice::Attention,
        other => return Err(PyValueError::new_err(format!("unknown block {other:?}"))),
    })
}

/// One extraction strategy with its parameters, ready to run forward.
#[pyclass(name = "Extractor")]
struct PyExtractor {
    config: ExtractorConfig,
    params: ParamSet,
}

#[pymethods]
impl PyExtractor {
    #[new]
    #[pyo3(signature = (strategy, out_size = 7, channels = 64, pre = "none", agg = "sum", post = "none", seed = 0))]
    fn new(
        strategy: &str,
        out_size: usize,
        channels: usize,
        pre: &str,
        agg: &str,
        post: &str,
        seed: u64,
    ) -> PyResult<Self> {
        let strategy = match strategy {
            "single" => Strategy::SingleLevel,
            "random" => Strategy::RandomLevel,
            "sum" => Strategy::Sum,
            "sum_plus" => Strategy::SumPlus,
            "concat" => Strategy::Concat,
            "groie" => Strategy::Groie {
                pre: parse_block(pre)?,
                agg: match agg {
                    "sum" => Aggregation::Sum,
                    "concat" => Aggregation::Concat,
                    other => {
                        return Err(PyValueError::new_err(format!("unknown aggregation {other:?}")))
                    }
                },
                post: parse_block(post)?,
            },
            other => return Err(PyValueError::new_err(format!("unknown strategy {other:?}"))),
        };
        let config = ExtractorConfig::new(strategy, out_size, channels);
        let params = build_extractor(&config, &mut SeededRng::new(seed)).map_err(err)?;
        Ok(PyExtractor { config, params })
    }

    #[getter]
    fn num_params(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Forward extraction: `pyramid` is a list of (level, Tensor) pairs for
    /// levels 2..=5; returns pooled features of shape [R, C, S, S].
    #[pyo3(signature = (pyramid, boxes, seed = 0))]
    fn extract(
        &self,
        pyramid: Vec<(u32, PyTensor)>,
        boxes: Vec<PyRoiBox>,
        seed: u64,
    ) -> PyResult<PyTensor> {
        let mut g = Graph::new();
        let levels = pyramid
            .into_iter()
            .map(|(k, t)| (k, g.input(t.inner)))
            .collect();
        let boxes: Vec<groie::RoiBox> = boxes.into_iter().map(|b| b.inner).collect();
        let mut rng = SeededRng::new(seed);
        let out = extract(
            &mut g,
            &self.params,
            "",
            &PyramidVars { levels },
            &boxes,
            &self.config,
            &mut rng,
        )
        .map_err(err)?;
        Ok(PyTensor { inner: g.value(out.features).clone() })
    }
}

/// RoI Align pooling on one feature level.
#[pyfunction]
#[pyo3(signature = (level, boxes, out_size = 7, sampling_ratio = 2, spatial_scale = 1.0))]
fn roi_align(
    level: PyTensor,
    boxes: Vec<PyRoiBox>,
    out_size: usize,
    sampling_ratio: usize,
    spatial_scale: f64,
) -> PyResult<PyTensor> {
    let s = level.inner.shape();
    if s.len() != 4 {
        return Err(PyValueError::new_err(format!("level must be [N,C,H,W], got {s:?}")));
    }
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let boxes: Vec<groie::RoiBox> = boxes.into_iter().map(|b| b.inner).collect();
    let spec = RoiAlignSpec { out_size, sampling_ratio, spatial_scale };
    let out = roi_align_forward(level.inner.data(), n, c, h, w, &boxes, &spec).map_err(err)?;
    Ok(PyTensor {
        inner: Tensor::new(vec![boxes.len(), c, out_size, out_size], out).map_err(err)?,
    })
}

/// Run the finite-difference gradient battery; returns
/// (name, max_rel_err, passed) triples.
#[pyfunction]
#[pyo3(signature = (tol = 1e-5))]
fn gradcheck(tol: f64) -> PyResult<Vec<(String, f64, bool)>> {
    let reports = groie::gradcheck::standard_suite(tol).map_err(err)?;
    Ok(reports
        .into_iter()
        .map(|(name, r)| {
            let worst = r.per_param.iter().map(|p| p.max_rel_err).fold(0.0_f64, f64::max);
            (name, worst, r.pass)
        })
        .collect())
}

#[pymodule]
fn groie_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyTensor>()?;
    m.add_class::<PyRoiBox>()?;
    m.add_class::<PySeededRng>()?;
    m.add_class::<PyExtractor>()?;
    m.add_function(wrap_pyfunction!(roi_align, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    Ok(())
}
