//! Python bindings. Arrays cross the boundary as nested lists.

use alignfree_distill::affinity::{oracle, AddOptions};
use alignfree_distill::data::generate_synthetic_pair as generate_pair;
use alignfree_distill::eval;
use alignfree_distill::experiment;
use alignfree_distill::model::{BackboneId, ClassifierHandle};
use alignfree_distill::objective::TrainConfig;
use alignfree_distill::srg::{self, Trinary};
use alignfree_distill::Error;
use ndarray::{Array2, Array3};
use pyo3::exceptions::{PyFileNotFoundError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::MissingInput(p) => PyFileNotFoundError::new_err(p.display().to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn array2(rows: Vec<Vec<f32>>) -> PyResult<Array2<f32>> {
    let h = rows.len();
    let w = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != w) {
        return Err(PyValueError::new_err("ragged 2-D list"));
    }
    Ok(Array2::from_shape_vec((h, w), rows.into_iter().flatten().collect()).expect("checked shape"))
}

fn array3(planes: Vec<Vec<Vec<f32>>>) -> PyResult<Array3<f32>> {
    let c = planes.len();
    let mut flat = Vec::new();
    let mut hw = None;
    for p in planes {
        let a = array2(p)?;
        if *hw.get_or_insert(a.dim()) != a.dim() {
            return Err(PyValueError::new_err("ragged 3-D list"));
        }
        flat.extend(a.iter().copied());
    }
    let (h, w) = hw.unwrap_or((0, 0));
    Ok(Array3::from_shape_vec((c, h, w), flat).expect("checked shape"))
}

fn nested2<T: Copy>(a: &Array2<T>) -> Vec<Vec<T>> {
    a.rows().into_iter().map(|r| r.to_vec()).collect()
}

fn nested3(a: &Array3<f32>) -> Vec<Vec<Vec<f32>>> {
    a.outer_iter().map(|p| nested2(&p.to_owned())).collect()
}

fn trinary(v: u8) -> PyResult<Trinary> {
    match v {
        0 => Ok(Trinary::Background),
        1 => Ok(Trinary::Unsure),
        2 => Ok(Trinary::Polyp),
        _ => Err(PyValueError::new_err(format!("mask value {v} not in {{0, 1, 2}}"))),
    }
}

/// A classifier checkpoint: random, or loaded from disk.
#[pyclass(name = "Classifier")]
struct PyClassifier {
    inner: ClassifierHandle,
}

#[pymethods]
impl PyClassifier {
    #[staticmethod]
    #[pyo3(signature = (backbone="resnet-tiny", stage_taps=vec![3, 4], input_size=224, seed=0))]
    fn random(backbone: &str, stage_taps: Vec<usize>, input_size: usize, seed: u64) -> PyResult<Self> {
        let id: BackboneId = backbone.parse().map_err(to_py)?;
        let inner = ClassifierHandle::new_random(id, &stage_taps, input_size, seed).map_err(to_py)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    #[pyo3(signature = (path, trainable=false))]
    fn load(path: &str, trainable: bool) -> PyResult<Self> {
        let inner = ClassifierHandle::load(path.as_ref(), trainable).map_err(to_py)?;
        Ok(Self { inner })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.inner.save(path.as_ref()).map_err(to_py)
    }

    fn checksum(&self) -> PyResult<String> {
        self.inner.checksum().map_err(to_py)
    }

    #[getter]
    fn input_size(&self) -> usize {
        self.inner.input_size()
    }

    #[getter]
    fn stage_taps(&self) -> Vec<usize> {
        self.inner.stage_taps().to_vec()
    }

    /// Logits and `{stage: [C, H, W]}` feature shapes for one `[3][H][W]` image.
    fn extract<'py>(&self, py: Python<'py>, image: Vec<Vec<Vec<f32>>>) -> PyResult<Bound<'py, PyDict>> {
        let img = array3(image)?;
        let p = self.inner.extract(img.view()).map_err(to_py)?;
        let out = PyDict::new(py);
        out.set_item("logits", p.logits_vec(0).map_err(to_py)?)?;
        let shapes = PyDict::new(py);
        for (stage, t) in &p.levels {
            shapes.set_item(*stage, t.dims()[1..].to_vec())?;
        }
        out.set_item("feature_shapes", shapes)?;
        Ok(out)
    }

    /// Normalized class activation map of one image.
    fn cam(&self, image: Vec<Vec<Vec<f32>>>, class_index: usize) -> PyResult<Vec<Vec<f32>>> {
        let img = array3(image)?;
        let p = self.inner.extract(img.view()).map_err(to_py)?;
        let head = self.inner.head_weights().map_err(to_py)?;
        let cam = alignfree_distill::model::compute_cam(&p, head.view(), class_index, 0).map_err(to_py)?;
        Ok(nested2(&cam.map))
    }
}

/// Tensor pipeline versus scalar reference on a seeded random instance.
#[pyfunction]
fn oracle_check(py: Python<'_>, seed: u64) -> PyResult<Bound<'_, PyDict>> {
    let r = experiment::oracle_check(seed).map_err(to_py)?;
    let d = PyDict::new(py);
    d.set_item("brute_force_loss", r.brute_force_loss)?;
    d.set_item("vectorized_loss", r.vectorized_loss)?;
    d.set_item("relative_deviation", r.relative_deviation)?;
    d.set_item("max_affinity_deviation", r.max_affinity_deviation)?;
    Ok(d)
}

/// Dense distillation loss of `N × C` student and `M × C` teacher vectors under an `N × M` relation mask.
#[pyfunction]
#[pyo3(signature = (student, teacher, relations, bidirectional=true))]
fn distillation_loss(student: Vec<Vec<f32>>, teacher: Vec<Vec<f32>>, relations: Vec<Vec<u8>>, bidirectional: bool) -> PyResult<f64> {
    let to64 = |v: Vec<Vec<f32>>| v.into_iter().map(|r| r.into_iter().map(f64::from).collect()).collect();
    let inst = oracle::Instance {
        student: to64(student),
        teacher: to64(teacher),
        relations,
    };
    if inst.relations.len() != inst.n_student() || inst.relations.iter().any(|r| r.len() != inst.n_teacher()) {
        return Err(PyValueError::new_err("relations must be N × M"));
    }
    let (fw, fnn, rel) = experiment::instance_tensors(&inst).map_err(to_py)?;
    let opts = AddOptions {
        bidirectional,
        ..Default::default()
    };
    let loss = alignfree_distill::affinity::scale_loss(&fw, &fnn, &rel, opts).map_err(to_py)?;
    Ok(f64::from(loss.to_scalar::<f32>().map_err(|e| to_py(e.into()))?))
}

#[pyfunction]
fn psr_refine(map: Vec<Vec<f32>>, image: Vec<Vec<Vec<f32>>>, iterations: usize) -> PyResult<Vec<Vec<f32>>> {
    let m = array2(map)?;
    let img = array3(image)?;
    Ok(nested2(&srg::psr_refine(m.view(), img.view(), iterations).map_err(to_py)?))
}

/// Resize to `(height, width)` then threshold: 0 background, 1 unsure, 2 polyp.
#[pyfunction]
#[pyo3(signature = (map, height, width, tau1=0.3, tau2=0.7))]
fn trinarize(map: Vec<Vec<f32>>, height: usize, width: usize, tau1: f32, tau2: f32) -> PyResult<Vec<Vec<u32>>> {
    let m = array2(map)?;
    let t = srg::trinarize(m.view(), (height, width), tau1, tau2).map_err(to_py)?;
    Ok(nested2(&t.mapv(|v| v as u32)))
}

#[pyfunction]
fn relation_matrix(mask_w: Vec<Vec<u8>>, mask_n: Vec<Vec<u8>>) -> PyResult<Vec<Vec<u32>>> {
    let conv = |rows: Vec<Vec<u8>>| -> PyResult<Array2<Trinary>> {
        let h = rows.len();
        let w = rows.first().map_or(0, Vec::len);
        let flat = rows.into_iter().flatten().map(trinary).collect::<PyResult<Vec<_>>>()?;
        Array2::from_shape_vec((h, w), flat).map_err(|e| PyValueError::new_err(e.to_string()))
    };
    let r = srg::relation_matrix(conv(mask_w)?.view(), conv(mask_n)?.view());
    Ok(nested2(&r.mapv(u32::from)))
}

#[pyfunction]
#[pyo3(signature = (scores, labels, threshold=0.5))]
fn compute_metrics(py: Python<'_>, scores: Vec<f64>, labels: Vec<u8>, threshold: f64) -> PyResult<Bound<'_, PyDict>> {
    let r = eval::compute_metrics(&scores, &labels, threshold).map_err(to_py)?;
    let d = PyDict::new(py);
    d.set_item("acc", r.values.acc)?;
    d.set_item("pre", r.values.pre)?;
    d.set_item("sen", r.values.sen)?;
    d.set_item("spe", r.values.spe)?;
    d.set_item("f1", r.values.f1)?;
    d.set_item("auc", r.values.auc)?;
    d.set_item("roc_points", r.roc_points)?;
    Ok(d)
}

/// One synthetic pair as nested lists plus the row-major warp.
#[pyfunction]
fn generate_synthetic_pair(py: Python<'_>, seed: u64, class_label: u8, warp_magnitude: f64, size: usize) -> PyResult<Bound<'_, PyDict>> {
    let s = generate_pair(seed, class_label, warp_magnitude, size).map_err(to_py)?;
    let d = PyDict::new(py);
    d.set_item("pair_id", &s.pair_id)?;
    d.set_item("label", s.label)?;
    d.set_item("image_w", nested3(&s.image_w))?;
    d.set_item("image_n", nested3(&s.image_n))?;
    d.set_item("gt_warp", s.gt_warp.map(|h| h.to_row_major().to_vec()))?;
    d.set_item("gt_lesion_mask_w", s.gt_lesion_mask_w.as_ref().map(nested2))?;
    Ok(d)
}

/// Default training configuration as a JSON string.
#[pyfunction]
fn default_config() -> PyResult<String> {
    serde_json::to_string(&TrainConfig::default()).map_err(|e| PyValueError::new_err(e.to_string()))
}

#[pymodule]
fn alignfree_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyClassifier>()?;
    m.add_function(wrap_pyfunction!(oracle_check, m)?)?;
    m.add_function(wrap_pyfunction!(distillation_loss, m)?)?;
    m.add_function(wrap_pyfunction!(psr_refine, m)?)?;
    m.add_function(wrap_pyfunction!(trinarize, m)?)?;
    m.add_function(wrap_pyfunction!(relation_matrix, m)?)?;
    m.add_function(wrap_pyfunction!(compute_metrics, m)?)?;
    m.add_function(wrap_pyfunction!(generate_synthetic_pair, m)?)?;
    m.add_function(wrap_pyfunction!(default_config, m)?)?;
    Ok(())
}
