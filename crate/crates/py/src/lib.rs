//! Python bindings: load a checkpoint, track a dataset sequence, parse ground truth, score results.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use tsf_core::backbone::BackboneConfig;
use tsf_core::data_io::{self, DatasetKind, SuiteProfile};
use tsf_core::evaluation::{per_frame_metrics, precision_curve, success_curve, Aggregation};
use tsf_core::model::TsfModel;
use tsf_core::tracker::{run_sequence, TrackConfig};
use tsf_core::{geometry, BBox, TsfError};

type XYWH = (f64, f64, f64, f64);

fn py_err(e: TsfError) -> PyErr {
    match e {
        TsfError::InvalidArgument(_) | TsfError::Parse { .. } | TsfError::InvalidBox(_) => PyValueError::new_err(e.to_string()),
        TsfError::Io(_) | TsfError::MissingData(_) | TsfError::Image { .. } => PyIOError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn xywh(b: &BBox) -> XYWH {
    let [x, y, w, h] = b.to_corner();
    (x, y, w, h)
}

fn bbox((x, y, w, h): XYWH) -> PyResult<BBox> {
    BBox::from_corner(x, y, w, h).map_err(py_err)
}

/// A tracker network (backbone, head and template-update weights).
#[pyclass(module = "tsf_siammu")]
struct Model {
    inner: TsfModel,
}

#[pymethods]
impl Model {
    /// Load a checkpoint written by `tsf train`.
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Model { inner: TsfModel::load(&path).map_err(py_err)? })
    }

    /// Untrained tiny network, seeded.
    #[staticmethod]
    #[pyo3(signature = (seed = 1))]
    fn tiny(seed: u64) -> PyResult<Self> {
        Ok(Model { inner: TsfModel::new(BackboneConfig::tiny(), seed).map_err(py_err)? })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(py_err)
    }

    /// SHA-256 over all weights.
    fn checksum(&self) -> String {
        self.inner.checksum()
    }

    /// Track one sequence of a dataset; returns (boxes as (x, y, w, h), scores).
    #[pyo3(signature = (root, sequence, kind = "synthetic", update = true, twofold = true))]
    fn track(&self, py: Python<'_>, root: PathBuf, sequence: &str, kind: &str, update: bool, twofold: bool) -> PyResult<(Vec<XYWH>, Vec<f64>)> {
        let kind: DatasetKind = kind.parse().map_err(py_err)?;
        let load = data_io::load_dataset(&root, kind).map_err(py_err)?;
        let rec = load
            .records
            .into_iter()
            .find(|r| r.id == sequence)
            .ok_or_else(|| PyValueError::new_err(format!("no sequence {sequence:?} under {}", root.display())))?;
        let cfg = TrackConfig {
            update_templates: update,
            twofold,
            ..Default::default()
        };
        let box0 = rec.init_box().map_err(py_err)?;
        let model = &self.inner;
        let out = py.detach(|| run_sequence(rec.frame_iter(), &box0, model, &cfg)).map_err(py_err)?;
        Ok((out.iter().map(|f| xywh(&f.bbox)).collect(), out.iter().map(|f| f.score).collect()))
    }
}

/// Sequence ids and ground truth of a dataset: list of (id, [box or None]).
#[pyfunction]
#[pyo3(signature = (root, kind = "synthetic"))]
fn load_dataset(root: PathBuf, kind: &str) -> PyResult<Vec<(String, Vec<Option<XYWH>>)>> {
    let kind: DatasetKind = kind.parse().map_err(py_err)?;
    let load = data_io::load_dataset(&root, kind).map_err(py_err)?;
    Ok(load.records.iter().map(|r| (r.id.clone(), r.gt.iter().map(|g| g.as_ref().map(xywh)).collect())).collect())
}

/// Write a seeded synthetic suite (profile: train, motion_size, static) under `out`.
#[pyfunction]
fn write_synthetic_suite(out: PathBuf, profile: &str, count: usize, length: usize, seed: u64) -> PyResult<Vec<String>> {
    let profile = match profile {
        "train" => SuiteProfile::Train,
        "motion_size" => SuiteProfile::MotionSize,
        "static" => SuiteProfile::Static,
        other => return Err(PyValueError::new_err(format!("unknown profile {other:?}"))),
    };
    let mut ids = Vec::new();
    for spec in data_io::synthetic_suite(profile, count, length, seed) {
        let rec = data_io::generate_synthetic(&spec).map_err(py_err)?;
        data_io::write_sequence(&out, &rec).map_err(py_err)?;
        ids.push(rec.id);
    }
    Ok(ids)
}

/// VOT ground truth (4- or 8-value lines); invalid frames are None.
#[pyfunction]
fn parse_vot_groundtruth(text: &str) -> PyResult<Vec<Option<XYWH>>> {
    let gt = data_io::parse_vot_groundtruth(text, "<python>").map_err(py_err)?;
    Ok(gt.iter().map(|g| g.as_ref().map(xywh)).collect())
}

/// GTOT ground truth (`x1 y1 x2 y2` lines).
#[pyfunction]
fn parse_gtot_groundtruth(text: &str) -> PyResult<Vec<XYWH>> {
    let gt = data_io::parse_gtot_groundtruth(text, "<python>").map_err(py_err)?;
    Ok(gt.iter().map(xywh).collect())
}

#[pyfunction]
fn iou(a: XYWH, b: XYWH) -> PyResult<f64> {
    Ok(geometry::iou(&bbox(a)?, &bbox(b)?))
}

/// Success AUC and precision at 20 px of one prediction sequence.
#[pyfunction]
fn score(pred: Vec<XYWH>, gt: Vec<Option<XYWH>>) -> PyResult<(f64, f64)> {
    let pred = pred.into_iter().map(bbox).collect::<PyResult<Vec<_>>>()?;
    let gt = gt.into_iter().map(|g| g.map(bbox).transpose()).collect::<PyResult<Vec<_>>>()?;
    let r = per_frame_metrics("python", &pred, &gt).map_err(py_err)?;
    let s = success_curve(&[&r], Aggregation::Pooled).map_err(py_err)?;
    let p = precision_curve(&[&r], Aggregation::Pooled).map_err(py_err)?;
    Ok((s.auc, p.value_at(20.0).unwrap_or(f64::NAN)))
}

#[pymodule]
fn tsf_siammu(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Model>()?;
    m.add_function(wrap_pyfunction!(load_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(write_synthetic_suite, m)?)?;
    m.add_function(wrap_pyfunction!(parse_vot_groundtruth, m)?)?;
    m.add_function(wrap_pyfunction!(parse_gtot_groundtruth, m)?)?;
    m.add_function(wrap_pyfunction!(iou, m)?)?;
    m.add_function(wrap_pyfunction!(score, m)?)?;
    Ok(())
}
