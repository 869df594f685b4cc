//! Python bindings for the And-Or graph shape detector.

use std::path::PathBuf;

use andor_shape::cli::{detect_records, inspect_text, truth_of};
use andor_shape::eval::{evaluate, iou, ScoredBox, Truth};
use andor_shape::geometry::{BoundingBox, Contour, ContourSet, Point};
use andor_shape::inference::DetectParams;
use andor_shape::io::{
    load_model, load_sample, parse_sample, sample_to_string, save_model, synth_generate,
    write_synth_dataset, DatasetManifest, SampleRecord, Split, SynthSpec,
};
use andor_shape::model::{AndOrModel, Label, ModelConfig};
use andor_shape::train::{train, Caps, TrainParams};
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

type BoxTuple = (f64, f64, f64, f64);

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn io_err(e: impl std::fmt::Display) -> PyErr {
    PyIOError::new_err(e.to_string())
}

fn to_box(b: BoxTuple) -> PyResult<BoundingBox> {
    BoundingBox::new(b.0, b.1, b.2, b.3).map_err(value_err)
}

fn from_box(b: &BoundingBox) -> BoxTuple {
    (b.xmin, b.ymin, b.xmax, b.ymax)
}

fn label_of(sign: i32) -> PyResult<Label> {
    Label::from_sign(sign).ok_or_else(|| PyValueError::new_err("label must be +1 or -1"))
}

/// One image: contours, label (+1/-1) and groundtruth boxes.
#[pyclass(name = "Sample")]
struct PySample {
    inner: SampleRecord,
}

#[pymethods]
impl PySample {
    #[new]
    #[pyo3(signature = (width, height, contours, label=1, groundtruth=Vec::new(), id=String::new()))]
    fn new(
        width: f64,
        height: f64,
        contours: Vec<Vec<(f64, f64)>>,
        label: i32,
        groundtruth: Vec<BoxTuple>,
        id: String,
    ) -> PyResult<Self> {
        let contours = contours
            .into_iter()
            .enumerate()
            .map(|(k, pts)| {
                Contour::new(k as u32, pts.into_iter().map(|(x, y)| Point::new(x, y)).collect())
            })
            .collect::<Result<Vec<_>, _>>()
            .map_err(value_err)?;
        Ok(PySample {
            inner: SampleRecord {
                id,
                label: label_of(label)?,
                contours: ContourSet::new(width, height, contours).map_err(value_err)?,
                groundtruth: groundtruth.into_iter().map(to_box).collect::<PyResult<_>>()?,
            },
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PySample {
            inner: load_sample(&path).map_err(io_err)?,
        })
    }

    #[staticmethod]
    #[pyo3(signature = (text, id=String::new()))]
    fn parse(text: &str, id: String) -> PyResult<Self> {
        Ok(PySample {
            inner: parse_sample(text, &id).map_err(value_err)?,
        })
    }

    fn to_text(&self) -> String {
        sample_to_string(&self.inner)
    }

    #[getter]
    fn id(&self) -> String {
        self.inner.id.clone()
    }

    #[getter]
    fn label(&self) -> i32 {
        self.inner.label.sign()
    }

    #[getter]
    fn size(&self) -> (f64, f64) {
        (self.inner.contours.width(), self.inner.contours.height())
    }

    #[getter]
    fn groundtruth(&self) -> Vec<BoxTuple> {
        self.inner.groundtruth.iter().map(from_box).collect()
    }

    #[getter]
    fn contours(&self) -> Vec<Vec<(f64, f64)>> {
        self.inner
            .contours
            .contours()
            .iter()
            .map(|c| c.points().iter().map(|p| (p.x, p.y)).collect())
            .collect()
    }

    fn __repr__(&self) -> String {
        format!(
            "Sample(id={:?}, label={}, contours={}, groundtruth={})",
            self.inner.id,
            self.inner.label.sign(),
            self.inner.contours.len(),
            self.inner.groundtruth.len()
        )
    }
}

fn records(samples: &[PyRef<'_, PySample>]) -> Vec<SampleRecord> {
    samples.iter().map(|s| s.inner.clone()).collect()
}

/// And-Or graph model: layout, live leaves and parameter vector.
#[pyclass(name = "Model")]
struct PyModel {
    inner: AndOrModel,
}

#[pymethods]
impl PyModel {
    #[new]
    #[pyo3(signature = (rows=2, cols=3, max_leaves=4, window_width=72.0, window_height=48.0))]
    fn new(rows: usize, cols: usize, max_leaves: usize, window_width: f64, window_height: f64) -> PyResult<Self> {
        let config = ModelConfig {
            or_nodes: rows * cols,
            rows,
            cols,
            max_leaves,
            window_width,
            window_height,
            ..Default::default()
        };
        Ok(PyModel {
            inner: AndOrModel::new(config).map_err(value_err)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyModel {
            inner: load_model(&path).map_err(io_err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        save_model(&path, &self.inner).map_err(io_err)
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.layout().dim()
    }

    #[getter]
    fn live_leaves(&self) -> usize {
        self.inner.live_count()
    }

    #[getter]
    fn omega(&self) -> Vec<f64> {
        self.inner.omega.0.clone()
    }

    fn inspect(&self) -> String {
        inspect_text(&self.inner)
    }

    /// Copy with all collaborative edge weights set to zero.
    fn without_edges(&self) -> PyModel {
        PyModel {
            inner: self.inner.without_edges(),
        }
    }

    /// Detections on one sample as `(score, (xmin, ymin, xmax, ymax))`,
    /// highest score first.
    #[pyo3(signature = (sample, nms_iou=0.5))]
    fn detect(&self, sample: PyRef<'_, PySample>, nms_iou: f64) -> PyResult<Vec<(f64, BoxTuple)>> {
        let params = DetectParams {
            nms_iou,
            ..Default::default()
        };
        let dets = detect_records(&self.inner, std::slice::from_ref(&sample.inner), &params).map_err(value_err)?;
        Ok(dets.iter().map(|d| (d.score, from_box(&d.bbox))).collect())
    }

    fn __repr__(&self) -> String {
        let c = self.inner.config();
        format!(
            "Model(layout={}x{}, max_leaves={}, live_leaves={})",
            c.rows,
            c.cols,
            c.max_leaves,
            self.inner.live_count()
        )
    }
}

/// Trains a model on labeled samples; returns the model and the per-iteration
/// log lines.
#[pyfunction]
#[pyo3(signature = (samples, max_iterations=20, d=0.005, create=1, remove=1))]
fn fit(
    py: Python<'_>,
    samples: Vec<PyRef<'_, PySample>>,
    max_iterations: usize,
    d: f64,
    create: usize,
    remove: usize,
) -> PyResult<(PyModel, Vec<String>)> {
    let data = records(&samples);
    let mut params = TrainParams {
        max_iterations,
        caps: Caps { create, remove },
        ..Default::default()
    };
    params.solver.d = d;
    let (model, report) = py
        .detach(|| train(ModelConfig::default(), &data, &params))
        .map_err(value_err)?;
    Ok((PyModel { inner: model }, report.log_lines()))
}

/// Detects on every sample and evaluates against their groundtruth. Returns a
/// dict with `ap`, `pr`, `fppi` and `detections`.
#[pyfunction]
#[pyo3(signature = (model, samples, iou_threshold=0.5))]
fn benchmark<'py>(
    py: Python<'py>,
    model: PyRef<'_, PyModel>,
    samples: Vec<PyRef<'_, PySample>>,
    iou_threshold: f64,
) -> PyResult<Bound<'py, PyDict>> {
    let data = records(&samples);
    let dets = detect_records(&model.inner, &data, &DetectParams::default()).map_err(value_err)?;
    let curve = evaluate(&dets, &truth_of(&data), iou_threshold);
    let out = PyDict::new(py);
    out.set_item("ap", curve.ap)?;
    out.set_item("pr", curve.pr)?;
    out.set_item("fppi", curve.fppi)?;
    let rows: Vec<(String, f64, BoxTuple)> = dets
        .iter()
        .map(|d| (d.image.clone(), d.score, from_box(&d.bbox)))
        .collect();
    out.set_item("detections", rows)?;
    Ok(out)
}

/// Average precision of `(image, score, box)` detections against
/// `{image: [box, ...]}` groundtruth.
#[pyfunction]
#[pyo3(signature = (detections, truth, iou_threshold=0.5))]
fn average_precision(
    detections: Vec<(String, f64, BoxTuple)>,
    truth: std::collections::BTreeMap<String, Vec<BoxTuple>>,
    iou_threshold: f64,
) -> PyResult<f64> {
    let dets = detections
        .into_iter()
        .map(|(image, score, b)| Ok(ScoredBox { image, score, bbox: to_box(b)? }))
        .collect::<PyResult<Vec<_>>>()?;
    let truth: Truth = truth
        .into_iter()
        .map(|(k, v)| Ok((k, v.into_iter().map(to_box).collect::<PyResult<Vec<_>>>()?)))
        .collect::<PyResult<_>>()?;
    Ok(evaluate(&dets, &truth, iou_threshold).ap)
}

#[pyfunction(name = "iou")]
fn box_iou(a: BoxTuple, b: BoxTuple) -> PyResult<f64> {
    Ok(iou(&to_box(a)?, &to_box(b)?))
}

/// Synthetic positives and negatives from the default templates.
#[pyfunction]
#[pyo3(signature = (n_pos, n_neg, seed=7, jitter=1.5, occlusion=0.2))]
fn synth(n_pos: usize, n_neg: usize, seed: u64, jitter: f64, occlusion: f64) -> PyResult<Vec<PySample>> {
    let spec = SynthSpec {
        seed,
        jitter,
        occlusion,
        ..Default::default()
    };
    Ok(synth_generate(&spec, n_pos, n_neg)
        .map_err(value_err)?
        .into_iter()
        .map(|inner| PySample { inner })
        .collect())
}

/// Writes the default synthetic benchmark and its manifest under `dir`.
#[pyfunction]
fn write_synth(dir: PathBuf) -> PyResult<PathBuf> {
    write_synth_dataset(&SynthSpec::default(), &dir).map_err(io_err)?;
    Ok(dir.join("manifest.txt"))
}

/// Samples of one split (`"train"` or `"test"`) of a manifest.
#[pyfunction]
fn load_split(manifest: PathBuf, split: &str) -> PyResult<Vec<PySample>> {
    let split = match split {
        "train" => Split::Train,
        "test" => Split::Test,
        other => return Err(PyValueError::new_err(format!("unknown split {other:?}"))),
    };
    let m = DatasetManifest::load(&manifest).map_err(io_err)?;
    Ok(m.load_split(&manifest, split)
        .map_err(io_err)?
        .into_iter()
        .map(|inner| PySample { inner })
        .collect())
}

#[pymodule]
fn aogshape(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PySample>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(fit, m)?)?;
    m.add_function(wrap_pyfunction!(benchmark, m)?)?;
    m.add_function(wrap_pyfunction!(average_precision, m)?)?;
    m.add_function(wrap_pyfunction!(box_iou, m)?)?;
    m.add_function(wrap_pyfunction!(synth, m)?)?;
    m.add_function(wrap_pyfunction!(write_synth, m)?)?;
    m.add_function(wrap_pyfunction!(load_split, m)?)?;
    Ok(())
}
