//! Python bindings: train a system, enroll personal verifiers, score pairs,
//! and evaluate pair lists, all against the same on-disk formats as the CLI.
//!
//! Tensors hold `Rc` internals, so every class is `unsendable` and must stay
//! on the thread that created it.

use hnfv::config::{PairScorer, RunConfig, System};
use hnfv::data;
use hnfv::eval::{evaluate_pairs as eval_pairs, PairList};
use hnfv::hypernet::WeightSet;
use hnfv::modelio;
use hnfv::pipeline;
use hnfv::tensor::Tensor;
use hnfv::verifier::VerifierArchitecture;
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use std::path::{Path, PathBuf};

fn err(e: hnfv::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn image_tensor(path: &str, size: usize) -> PyResult<Tensor> {
    let pixels = data::load_image(Path::new(path), size).map_err(err)?;
    Ok(Tensor::from_vec(pixels, &[3, size, size]))
}

/// A personal verifier: generated weights plus the architecture that runs
/// them. Scores probe images with an accept probability.
#[pyclass(unsendable)]
struct Verifier {
    theta: WeightSet,
    arch: VerifierArchitecture,
}

#[pymethods]
impl Verifier {
    /// Read a verifier model file written by `save` or the CLI.
    #[staticmethod]
    fn load(path: &str) -> PyResult<Verifier> {
        let (theta, arch) = modelio::load_verifier(path).map_err(err)?;
        Ok(Verifier { theta, arch })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        modelio::save_verifier(&self.theta, &self.arch.id, self.arch.input_size, path)
            .map_err(err)
    }

    /// Accept probability for one probe image.
    fn score(&self, image: &str) -> PyResult<f64> {
        let probe = image_tensor(image, self.arch.input_size)?;
        self.arch.verify(&probe, &self.theta).map_err(err)
    }

    #[getter]
    fn architecture(&self) -> String {
        self.arch.id.clone()
    }

    #[getter]
    fn input_size(&self) -> usize {
        self.arch.input_size
    }

    #[getter]
    fn param_count(&self) -> usize {
        self.arch.count_params()
    }

    #[getter]
    fn flop_count(&self) -> usize {
        self.arch.count_flops()
    }
}

/// A trained system: frozen embedding backbone plus the weight generator.
#[pyclass(unsendable)]
struct TrainedSystem {
    system: System,
}

#[pymethods]
impl TrainedSystem {
    /// Load the backbone and generator from a training output directory.
    #[staticmethod]
    fn load(dir: &str) -> PyResult<TrainedSystem> {
        let system = pipeline::load_system(Path::new(dir)).map_err(err)?;
        Ok(TrainedSystem { system })
    }

    /// Generate a personal verifier from one enrollment image.
    fn enroll(&self, image: &str) -> PyResult<Verifier> {
        let img = image_tensor(image, self.system.arch.input_size)?;
        let theta = self.system.enroll(&img).map_err(err)?;
        Ok(Verifier { theta, arch: self.system.arch.clone() })
    }

    /// Generate a personal verifier from several enrollment images; their
    /// embeddings are averaged and re-normalized before generation.
    fn enroll_many(&self, images: Vec<String>) -> PyResult<Verifier> {
        if images.is_empty() {
            return Err(PyValueError::new_err("enroll_many needs at least one image"));
        }
        let tensors = images
            .iter()
            .map(|p| image_tensor(p, self.system.arch.input_size))
            .collect::<PyResult<Vec<_>>>()?;
        let theta = self.system.enroll_images(&tensors).map_err(err)?;
        Ok(Verifier { theta, arch: self.system.arch.clone() })
    }

    /// Unit-norm embedding of one image.
    fn embed(&self, image: &str) -> PyResult<Vec<f64>> {
        let img = image_tensor(image, self.system.arch.input_size)?;
        let e = self.system.backbone.embed(&img).map_err(err)?;
        Ok(e.as_slice().to_vec())
    }

    /// Enroll on the first image, score the second.
    fn score_pair(&self, enroll: &str, probe: &str) -> PyResult<f64> {
        let a = image_tensor(enroll, self.system.arch.input_size)?;
        let b = image_tensor(probe, self.system.arch.input_size)?;
        self.system.score_pair(&a, &b).map_err(err)
    }

    /// Evaluate a pair-list file and return the report as a JSON string.
    #[pyo3(signature = (pairs, symmetric = false))]
    fn evaluate(&self, pairs: &str, symmetric: bool) -> PyResult<String> {
        let list = PairList::from_file(Path::new(pairs)).map_err(err)?;
        let report = eval_pairs(&self.system, &list, self.system.arch.input_size, symmetric)
            .map_err(err)?;
        serde_json::to_string_pretty(&report)
            .map_err(|e| PyValueError::new_err(e.to_string()))
    }

    #[getter]
    fn architecture(&self) -> String {
        self.system.arch.id.clone()
    }

    #[getter]
    fn input_size(&self) -> usize {
        self.system.arch.input_size
    }

    #[getter]
    fn embedding_dim(&self) -> usize {
        self.system.backbone.embedding_dim()
    }
}

fn parse_config(config_json: Option<&str>) -> PyResult<RunConfig> {
    match config_json {
        None => Ok(RunConfig::default()),
        Some(text) => {
            serde_json::from_str(text).map_err(|e| PyValueError::new_err(e.to_string()))
        }
    }
}

/// Run the whole training pipeline and write its artifacts to `out`.
/// Returns (system, backbone_accuracy, final_loss).
#[pyfunction]
#[pyo3(signature = (out, config_json = None))]
fn train(out: &str, config_json: Option<&str>) -> PyResult<(TrainedSystem, f64, f64)> {
    let cfg = parse_config(config_json)?;
    let outcome = pipeline::run_training(&cfg, Path::new(out)).map_err(err)?;
    let final_loss = outcome.history.last().map(|m| m.loss).unwrap_or(f64::NAN);
    Ok((
        TrainedSystem { system: outcome.system },
        outcome.backbone_accuracy,
        final_loss,
    ))
}

/// Materialize the synthetic identity dataset as a directory of PNGs, one
/// subdirectory per identity. Returns the number of images written.
#[pyfunction]
#[pyo3(signature = (out, config_json = None))]
fn synth_dataset(out: &str, config_json: Option<&str>) -> PyResult<usize> {
    let cfg = parse_config(config_json)?;
    let dataset = data::synth_identity_dataset(&cfg.synth_config()).map_err(err)?;
    data::write_image_dir(&dataset, &PathBuf::from(out)).map_err(err)?;
    Ok(dataset.len())
}

/// The default run configuration as a JSON string; edit and pass back to
/// `train`.
#[pyfunction]
fn default_config() -> PyResult<String> {
    serde_json::to_string_pretty(&RunConfig::default())
        .map_err(|e| PyValueError::new_err(e.to_string()))
}

#[pymodule]
fn hnfv_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Verifier>()?;
    m.add_class::<TrainedSystem>()?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(synth_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(default_config, m)?)?;
    Ok(())
}
