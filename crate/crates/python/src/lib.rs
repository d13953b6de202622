//! Python bindings: anchor encoding, losses, metrics, cost estimates,
//! synthetic fixtures, training and checkpoint inference.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use vqa_core::config::TrainConfig;
use vqa_core::io::{load_checkpoint, load_manifest, read_container, save_checkpoint, Checkpoint};
use vqa_core::regression::{self, AnchorCodec};
use vqa_core::train::synth::{make_synthetic_dataset, SynthSpec};
use vqa_core::train::{self, Decoder};
use vqa_core::{flops, metrics, Error, Mode};

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

trait OrPy<T> {
    fn py(self) -> PyResult<T>;
}

impl<T> OrPy<T> for vqa_core::Result<T> {
    fn py(self) -> PyResult<T> {
        self.map_err(to_py)
    }
}

pub fn parse_mode(s: &str) -> PyResult<Mode> {
    s.parse().map_err(|_| PyValueError::new_err(format!("unknown mode {s:?}")))
}

pub fn parse_decoder(s: &str) -> PyResult<Decoder> {
    match s {
        "svr" => Ok(Decoder::Svr),
        "expectation" => Ok(Decoder::Expectation),
        _ => Err(PyValueError::new_err(format!("unknown decoder {s:?}"))),
    }
}

pub fn parse_config(json: Option<&str>) -> PyResult<TrainConfig> {
    match json {
        Some(text) => TrainConfig::from_json(text).py(),
        None => Ok(TrainConfig::default()),
    }
}

fn codec(m: usize, lo: f64, hi: f64) -> PyResult<AnchorCodec> {
    AnchorCodec::new(m, lo, hi).py()
}

/// Anchor points `b_i` spread evenly over `[lo, hi]`.
#[pyfunction]
#[pyo3(signature = (m=6, lo=0.0, hi=5.0))]
fn make_anchors(m: usize, lo: f64, hi: f64) -> PyResult<Vec<f64>> {
    Ok(codec(m, lo, hi)?.anchors().to_vec())
}

/// Soft encoding of a scaled score over the anchors.
#[pyfunction]
#[pyo3(signature = (score, m=6, lo=0.0, hi=5.0))]
fn encode_mos(score: f64, m: usize, lo: f64, hi: f64) -> PyResult<Vec<f64>> {
    Ok(regression::encode_mos(score, &codec(m, lo, hi)?).into_inner())
}

#[pyfunction]
fn vr_loss(y: Vec<f64>, yhat: Vec<f64>) -> PyResult<f64> {
    if y.len() != yhat.len() {
        return Err(PyValueError::new_err("vectors differ in length"));
    }
    regression::vr_loss(&y, &yhat).py()
}

#[pyfunction]
#[pyo3(signature = (probs, lo=0.0, hi=5.0))]
fn expectation_decode(probs: Vec<f64>, lo: f64, hi: f64) -> PyResult<f64> {
    let c = codec(probs.len(), lo, hi)?;
    Ok(regression::expectation_decode(&probs, &c))
}

#[pyfunction]
fn srocc(ground: Vec<f64>, pred: Vec<f64>) -> PyResult<f64> {
    metrics::srocc(&ground, &pred).py()
}

#[pyfunction]
fn plcc(ground: Vec<f64>, pred: Vec<f64>) -> PyResult<f64> {
    metrics::plcc(&ground, &pred).py()
}

/// Multiply-accumulate counts per component for a config given as JSON.
#[pyfunction]
#[pyo3(signature = (config=None, mode="video", source=None))]
fn estimate_flops<'py>(
    py: Python<'py>,
    config: Option<&str>,
    mode: &str,
    source: Option<(usize, usize)>,
) -> PyResult<Bound<'py, PyDict>> {
    let cfg = parse_config(config)?;
    let mode = parse_mode(mode)?;
    let f = match source {
        Some((h, w)) => flops::estimate_flops_for_source(&cfg.model, mode, h, w).py()?,
        None => flops::estimate_flops(&cfg.model, mode),
    };
    let d = PyDict::new(py);
    d.set_item("embedding", f.embedding)?;
    d.set_item("time_attention", f.time)?;
    d.set_item("space_attention", f.space)?;
    d.set_item("mlp", f.mlp)?;
    d.set_item("head", f.head)?;
    d.set_item("total", f.total())?;
    Ok(d)
}

/// Writes a synthetic noise-graded set plus `manifest.json` into `out`;
/// returns the manifest path.
#[pyfunction]
#[pyo3(signature = (out, count=8, frames=8, height=80, width=80, datasets=1, max_noise=48.0, seed=0))]
#[allow(clippy::too_many_arguments)]
fn make_synth(
    out: PathBuf,
    count: usize,
    frames: usize,
    height: usize,
    width: usize,
    datasets: usize,
    max_noise: f64,
    seed: u64,
) -> PyResult<PathBuf> {
    let spec = SynthSpec {
        count,
        frames,
        height,
        width,
        datasets,
        max_noise,
        seed,
    };
    make_synthetic_dataset(&spec, &out).py()?;
    Ok(out.join("manifest.json"))
}

/// `(frames, height, width)` of a video container.
#[pyfunction]
fn video_shape(path: PathBuf) -> PyResult<(usize, usize, usize)> {
    let v = read_container(&path).py()?;
    Ok((v.frame_count(), v.height(), v.width()))
}

/// One three-crop prediction.
#[pyclass(frozen, get_all, skip_from_py_object)]
#[derive(Clone)]
struct Prediction {
    score: f64,
    scaled: f64,
    crop_scores: Vec<f64>,
    probs: Vec<f64>,
}

#[pymethods]
impl Prediction {
    fn __repr__(&self) -> String {
        format!("Prediction(score={:.4}, scaled={:.4})", self.score, self.scaled)
    }
}

/// A trained checkpoint.
#[pyclass(frozen)]
struct Model {
    ckpt: Checkpoint,
}

#[pymethods]
impl Model {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            ckpt: load_checkpoint(&path).py()?,
        })
    }

    /// Trains on the train split of a manifest. A video run may start from
    /// an image checkpoint (weights are transferred) or a video one.
    #[staticmethod]
    #[pyo3(signature = (manifest, config=None, mode="video", init=None))]
    fn train(manifest: PathBuf, config: Option<&str>, mode: &str, init: Option<&Model>) -> PyResult<Self> {
        let mut cfg = parse_config(config)?;
        cfg.mode = parse_mode(mode)?;
        let m = load_manifest(&manifest).py()?;
        let (idx, _) = train::manifest_split(&m, cfg.seed).py()?;
        let items = train::load_items(&m, &idx, &cfg.model.codec().py()?).py()?;
        let outcome = match cfg.mode {
            Mode::Image => {
                if init.is_some() {
                    return Err(PyValueError::new_err("init is only used for the video stage"));
                }
                train::train_stage_image(&items, &cfg, &m.datasets)
            }
            Mode::Video => {
                let start = match init {
                    Some(model) => Some(match model.ckpt.stage {
                        Mode::Image => train::transfer_weights(&model.ckpt.weights, &cfg.model, cfg.seed).py()?,
                        Mode::Video => model.ckpt.weights.clone(),
                    }),
                    None => None,
                };
                train::train_stage_video(&items, &cfg, &m.datasets, start)
            }
        }
        .py()?;
        Ok(Self {
            ckpt: outcome.checkpoint,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        save_checkpoint(&self.ckpt, &path).py()
    }

    #[getter]
    fn stage(&self) -> String {
        self.ckpt.stage.to_string()
    }

    #[getter]
    fn epoch(&self) -> usize {
        self.ckpt.epoch
    }

    #[getter]
    fn config(&self) -> String {
        self.ckpt.config.to_json()
    }

    #[getter]
    fn datasets(&self) -> Vec<(String, f64, f64)> {
        self.ckpt
            .datasets
            .iter()
            .map(|(k, r)| (k.clone(), r.mos_min, r.mos_max))
            .collect()
    }

    #[pyo3(signature = (video, dataset=None, decoder="svr"))]
    fn infer(&self, video: PathBuf, dataset: Option<&str>, decoder: &str) -> PyResult<Prediction> {
        let v = read_container(&video).py()?;
        let p = train::infer_video(&self.ckpt, &v, dataset, parse_decoder(decoder)?).py()?;
        Ok(Prediction {
            score: p.score,
            scaled: p.scaled,
            crop_scores: p.crop_scores,
            probs: p.probs.into_inner(),
        })
    }

    /// Per-dataset `(dataset, srocc, plcc, n)` on a manifest split
    /// (`train`, `test` or `all`).
    #[pyo3(signature = (manifest, split="test", decoder="svr"))]
    fn evaluate(
        &self,
        manifest: PathBuf,
        split: &str,
        decoder: &str,
    ) -> PyResult<Vec<(String, Option<f64>, Option<f64>, usize)>> {
        let m = load_manifest(&manifest).py()?;
        let (tr, te) = train::manifest_split(&m, self.ckpt.config.seed).py()?;
        let idx = match split {
            "train" => tr,
            "test" => te,
            "all" => (0..m.items.len()).collect(),
            _ => return Err(PyValueError::new_err(format!("unknown split {split:?}"))),
        };
        let items = train::load_items(&m, &idx, &self.ckpt.weights.config.codec().py()?).py()?;
        let (rows, _) = train::evaluate(&self.ckpt, &items, split, parse_decoder(decoder)?).py()?;
        Ok(rows.into_iter().map(|r| (r.dataset, r.srocc, r.plcc, r.n)).collect())
    }
}

#[pymodule]
pub fn vqa_native(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(make_anchors, m)?)?;
    m.add_function(wrap_pyfunction!(encode_mos, m)?)?;
    m.add_function(wrap_pyfunction!(vr_loss, m)?)?;
    m.add_function(wrap_pyfunction!(expectation_decode, m)?)?;
    m.add_function(wrap_pyfunction!(srocc, m)?)?;
    m.add_function(wrap_pyfunction!(plcc, m)?)?;
    m.add_function(wrap_pyfunction!(estimate_flops, m)?)?;
    m.add_function(wrap_pyfunction!(make_synth, m)?)?;
    m.add_function(wrap_pyfunction!(video_shape, m)?)?;
    m.add_class::<Model>()?;
    m.add_class::<Prediction>()?;
    Ok(())
}
