//! On-disk artifacts: the JSON run config, dataset files, and model files.
//!
//! A dataset lives under a path prefix as `<prefix>.obs.rpgt` (rank-3
//! observations), `<prefix>.truth.rpgt` (rank-3 ground truth), and
//! `<prefix>.meta.json`. A model is `<prefix>.manifest.json` (architecture,
//! dims, section names) plus `<prefix>.params.rpgt` (the named tensor
//! sections concatenated in manifest order, transition matrix first).

use clap::ValueEnum;
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rpgssm::data::Dataset;
use rpgssm::prior::StablePrior;
use rpgssm::recognition::{Activation, Architecture, CovarianceKind, RecognitionModel};
use rpgssm::tensorfile::{
    matrix_to_tensor, sequences_to_tensor, tensor_to_matrix, tensor_to_sequences, Tensor,
};
use rpgssm::trainer::{MixtureScope, TrainConfig, TrainState};

use crate::Failure;

/// Synthetic task selector, shared by the CLI flags and the config schema.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Linear,
    Pendulum,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::Linear => "linear",
            Task::Pendulum => "pendulum",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ArchKind {
    Linear,
    Mlp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CovName {
    ConstantFull,
    ConstantDiag,
    DataDiag,
}

impl CovName {
    pub fn to_kind(self) -> CovarianceKind {
        match self {
            CovName::ConstantFull => CovarianceKind::ConstantFull,
            CovName::ConstantDiag => CovarianceKind::ConstantDiag,
            CovName::DataDiag => CovarianceKind::DataDiag,
        }
    }

    pub fn from_kind(kind: CovarianceKind) -> Self {
        match kind {
            CovarianceKind::ConstantFull => CovName::ConstantFull,
            CovarianceKind::ConstantDiag => CovName::ConstantDiag,
            CovarianceKind::DataDiag => CovName::DataDiag,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScopeName {
    #[default]
    Batch,
    Full,
}

fn default_batch_size() -> usize {
    32
}
fn default_learning_rate() -> f64 {
    1e-3
}
fn default_activation() -> String {
    "tanh".into()
}

/// Mean-head description in configs and manifests.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchSpec {
    #[serde(rename = "type")]
    pub kind: ArchKind,
    #[serde(default)]
    pub hidden: Vec<usize>,
    #[serde(default = "default_activation")]
    pub activation: String,
}

impl ArchSpec {
    pub fn to_architecture(&self) -> Result<Architecture, Failure> {
        match self.kind {
            ArchKind::Linear => {
                if !self.hidden.is_empty() {
                    return Err(Failure::Usage(
                        "a linear architecture takes no hidden layers".into(),
                    ));
                }
                Ok(Architecture::Linear)
            }
            ArchKind::Mlp => {
                if self.hidden.is_empty() {
                    return Err(Failure::Usage(
                        "an mlp architecture needs at least one hidden width".into(),
                    ));
                }
                let activation: Activation = self.activation.parse()?;
                Ok(Architecture::Mlp { hidden: self.hidden.clone(), activation })
            }
        }
    }

    pub fn from_architecture(arch: &Architecture) -> Self {
        match arch {
            Architecture::Linear => {
                ArchSpec { kind: ArchKind::Linear, hidden: vec![], activation: "tanh".into() }
            }
            Architecture::Mlp { hidden, activation } => ArchSpec {
                kind: ArchKind::Mlp,
                hidden: hidden.clone(),
                activation: match activation {
                    Activation::Tanh => "tanh".into(),
                },
            },
        }
    }
}

/// The training run configuration document. Unknown keys are rejected.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub task: Task,
    pub latent_dim: usize,
    pub arch: ArchSpec,
    pub cov: CovName,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_learning_rate")]
    pub learning_rate: f64,
    pub iterations: usize,
    pub seed: u64,
    #[serde(default)]
    pub mixture_scope: ScopeName,
}

impl RunConfig {
    pub fn to_train_config(&self) -> Result<TrainConfig, Failure> {
        let mut config = TrainConfig::new(
            self.latent_dim,
            self.iterations,
            self.arch.to_architecture()?,
            self.cov.to_kind(),
            self.seed,
        );
        config.batch_size = self.batch_size;
        config.learning_rate = self.learning_rate;
        config.mixture_scope = match self.mixture_scope {
            ScopeName::Batch => MixtureScope::Batch,
            ScopeName::Full => MixtureScope::Full,
        };
        config.validate()?;
        Ok(config)
    }
}

pub fn read_run_config(path: &Path) -> Result<RunConfig, Failure> {
    let text = fs::read_to_string(path).map_err(|e| io_failure(path, &e))?;
    serde_json::from_str(&text)
        .map_err(|e| Failure::Usage(format!("{}: invalid run config: {e}", path.display())))
}

/// `<prefix>.<suffix>`, preserving the prefix's directory part.
pub fn path_with(prefix: &Path, suffix: &str) -> PathBuf {
    let mut os = prefix.as_os_str().to_owned();
    os.push(".");
    os.push(suffix);
    PathBuf::from(os)
}

pub fn ensure_parent(path: &Path) -> Result<(), Failure> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| io_failure(dir, &e))?;
        }
    }
    Ok(())
}

fn io_failure(path: &Path, e: &io::Error) -> Failure {
    Failure::Io(format!("{}: {e}", path.display()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), Failure> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| Failure::Io(format!("{}: {e}", path.display())))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| io_failure(path, &e))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path, what: &str) -> Result<T, Failure> {
    let text = fs::read_to_string(path).map_err(|e| io_failure(path, &e))?;
    serde_json::from_str(&text)
        .map_err(|e| Failure::Io(format!("{}: invalid {what}: {e}", path.display())))
}

fn write_tensor(path: &Path, tensor: &Tensor) -> Result<(), Failure> {
    let file = File::create(path).map_err(|e| io_failure(path, &e))?;
    let mut w = BufWriter::new(file);
    tensor.write_to(&mut w).map_err(|e| io_failure(path, &e))?;
    w.flush().map_err(|e| io_failure(path, &e))
}

fn read_tensor(path: &Path) -> Result<Tensor, Failure> {
    let file = File::open(path).map_err(|e| io_failure(path, &e))?;
    Tensor::read_from(&mut BufReader::new(file)).map_err(|e| io_failure(path, &e))
}

/// Dataset provenance sidecar.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetaFile {
    pub generator: String,
    pub seed: u64,
    pub params: BTreeMap<String, f64>,
}

pub struct StoredDataset {
    pub observations: Vec<DMatrix<f64>>,
    pub ground_truth: Vec<DMatrix<f64>>,
    pub meta: MetaFile,
}

pub fn write_dataset(prefix: &Path, dataset: &Dataset) -> Result<(), Failure> {
    ensure_parent(prefix)?;
    write_tensor(
        &path_with(prefix, "obs.rpgt"),
        &sequences_to_tensor(&dataset.observations)?,
    )?;
    write_tensor(
        &path_with(prefix, "truth.rpgt"),
        &sequences_to_tensor(&dataset.ground_truth)?,
    )?;
    let meta = MetaFile {
        generator: dataset.meta.generator.clone(),
        seed: dataset.meta.seed,
        params: dataset.meta.params.clone(),
    };
    write_json(&path_with(prefix, "meta.json"), &meta)
}

pub fn read_dataset(prefix: &Path) -> Result<StoredDataset, Failure> {
    let observations = tensor_to_sequences(&read_tensor(&path_with(prefix, "obs.rpgt"))?)?;
    let ground_truth = tensor_to_sequences(&read_tensor(&path_with(prefix, "truth.rpgt"))?)?;
    let meta = read_json(&path_with(prefix, "meta.json"), "dataset meta")?;
    if observations.len() != ground_truth.len() {
        return Err(Failure::Shape(format!(
            "{} observation sequences but {} ground-truth sequences",
            observations.len(),
            ground_truth.len()
        )));
    }
    Ok(StoredDataset { observations, ground_truth, meta })
}

/// Model sidecar: dims, architecture, and the tensor section names in the
/// order they appear in `<prefix>.params.rpgt`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelManifest {
    pub format_version: u32,
    pub task: Task,
    pub latent_dim: usize,
    pub input_dim: usize,
    pub arch: ArchSpec,
    pub cov: CovName,
    pub seed: u64,
    pub iterations_run: usize,
    pub sections: Vec<String>,
}

pub fn write_model(prefix: &Path, state: &TrainState, task: Task) -> Result<(), Failure> {
    ensure_parent(prefix)?;
    let mut sections = vec!["transition".to_string()];
    sections.extend((0..state.recognition.params().len()).map(|i| format!("recognition_{i}")));
    let manifest = ModelManifest {
        format_version: 1,
        task,
        latent_dim: state.prior.latent_dim(),
        input_dim: state.recognition.input_dim(),
        arch: ArchSpec::from_architecture(state.recognition.architecture()),
        cov: CovName::from_kind(state.recognition.covariance()),
        seed: state.config.seed,
        iterations_run: state.iteration,
        sections,
    };
    write_json(&path_with(prefix, "manifest.json"), &manifest)?;

    let path = path_with(prefix, "params.rpgt");
    let file = File::create(&path).map_err(|e| io_failure(&path, &e))?;
    let mut w = BufWriter::new(file);
    matrix_to_tensor(state.prior.a()).write_to(&mut w).map_err(|e| io_failure(&path, &e))?;
    for p in state.recognition.params() {
        matrix_to_tensor(p).write_to(&mut w).map_err(|e| io_failure(&path, &e))?;
    }
    w.flush().map_err(|e| io_failure(&path, &e))
}

pub fn read_model(prefix: &Path) -> Result<(TrainState, ModelManifest), Failure> {
    let manifest: ModelManifest = read_json(&path_with(prefix, "manifest.json"), "manifest")?;
    if manifest.format_version != 1 {
        return Err(Failure::Io(format!(
            "unsupported model format version {}",
            manifest.format_version
        )));
    }
    if manifest.sections.is_empty() || manifest.sections[0] != "transition" {
        return Err(Failure::Io("manifest sections must start with 'transition'".into()));
    }

    let path = path_with(prefix, "params.rpgt");
    let file = File::open(&path).map_err(|e| io_failure(&path, &e))?;
    let mut r = BufReader::new(file);
    let mut tensors = Vec::with_capacity(manifest.sections.len());
    for _ in &manifest.sections {
        tensors.push(Tensor::read_from(&mut r).map_err(|e| io_failure(&path, &e))?);
    }
    let mut probe = [0_u8; 1];
    if r.read(&mut probe).map_err(|e| io_failure(&path, &e))? != 0 {
        return Err(Failure::Io(format!(
            "{}: trailing bytes after the last manifest section",
            path.display()
        )));
    }

    let prior = StablePrior::new(tensor_to_matrix(&tensors[0])?)?;
    let params = tensors[1..]
        .iter()
        .map(tensor_to_matrix)
        .collect::<Result<Vec<_>, _>>()?;
    let architecture = manifest.arch.to_architecture()?;
    let recognition = RecognitionModel::from_parts(
        manifest.input_dim,
        manifest.latent_dim,
        architecture.clone(),
        manifest.cov.to_kind(),
        params,
    )?;
    let config = TrainConfig::new(
        manifest.latent_dim,
        0,
        architecture,
        manifest.cov.to_kind(),
        manifest.seed,
    );
    let state = TrainState::from_parts(config, prior, recognition)?;
    Ok((state, manifest))
}
