//! Data-driven replacements of the reactor section: sampled datasets,
//! polynomial and feedforward-network surrogates, and their embedding into
//! the flowsheet model.

pub mod dataset;
pub mod embed;
pub mod mlp;
pub mod poly;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::flowsheet::build::BuildError;
use crate::model::{Formulation, ModelError};

pub use dataset::{sample_dataset, surrogate_outputs, Dataset, SampleRanges, Split, INPUT_NAMES};
pub use embed::{build_surrogate_flowsheet, embed_surrogate};
pub use mlp::{encode_mlp, mlp_forward, train_mlp, MlpConfig, MlpEncoding, MlpSurrogate, MlpTraining};
pub use poly::{eval_poly, reference_surrogate, select_terms, train_poly, PolySurrogate, Selection, Term};

/// Version written into every persisted dataset and surrogate.
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum SurrogateError {
    #[error("degenerate data: {0}")]
    DegenerateData(String),
    #[error("training loss became non-finite at epoch {epoch} (last finite loss {last_loss:e})")]
    NonFinite { epoch: usize, last_loss: f64 },
    #[error("expected {expected} values, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("malformed data: {0}")]
    Malformed(String),
    #[error("surrogate input `{0}` has no counterpart in the flowsheet")]
    UnknownInput(String),
    #[error("surrogate output `{0}` has no counterpart in the flowsheet")]
    UnknownOutput(String),
    #[error("flowsheet stream variable `{0}` is not predicted by the surrogate")]
    MissingOutput(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Build(#[from] BuildError),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

/// Anything that maps surrogate inputs to outputs.
pub trait Predictor {
    fn output_names(&self) -> Vec<String>;
    fn predict(&self, inputs: &[f64]) -> Vec<f64>;
}

/// A trained surrogate of either family.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Surrogate {
    Poly(PolySurrogate),
    Mlp(MlpSurrogate),
}

impl Surrogate {
    pub fn formulation(&self) -> Formulation {
        match self {
            Surrogate::Poly(_) => Formulation::SurrogateAlamo,
            Surrogate::Mlp(_) => Formulation::SurrogateNn,
        }
    }

    pub fn input_names(&self) -> &[String] {
        match self {
            Surrogate::Poly(p) => &p.input_names,
            Surrogate::Mlp(m) => &m.input_names,
        }
    }

    pub fn format_version(&self) -> u32 {
        match self {
            Surrogate::Poly(p) => p.format_version,
            Surrogate::Mlp(m) => m.format_version,
        }
    }

    pub fn to_json(&self) -> Result<String, SurrogateError> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self, SurrogateError> {
        let v: Surrogate = serde_json::from_str(s)?;
        if v.format_version() != FORMAT_VERSION {
            return Err(SurrogateError::Version { found: v.format_version(), expected: FORMAT_VERSION });
        }
        v.validate()?;
        Ok(v)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<(), SurrogateError> {
        std::fs::write(path, self.to_json()?).map_err(|source| SurrogateError::Io { path: path.display().to_string(), source })
    }

    pub fn load(path: &std::path::Path) -> Result<Self, SurrogateError> {
        let s = std::fs::read_to_string(path).map_err(|source| SurrogateError::Io { path: path.display().to_string(), source })?;
        Self::from_json(&s)
    }

    /// Structural consistency of a deserialized surrogate.
    pub fn validate(&self) -> Result<(), SurrogateError> {
        match self {
            Surrogate::Poly(p) => p.validate(),
            Surrogate::Mlp(m) => m.validate(),
        }
    }
}

impl Predictor for Surrogate {
    fn output_names(&self) -> Vec<String> {
        match self {
            Surrogate::Poly(p) => p.output_names(),
            Surrogate::Mlp(m) => m.output_names(),
        }
    }

    fn predict(&self, inputs: &[f64]) -> Vec<f64> {
        match self {
            Surrogate::Poly(p) => p.predict(inputs),
            Surrogate::Mlp(m) => m.predict(inputs),
        }
    }
}

/// `1 - SS_res / SS_tot` per output over one split, with `SS_tot` taken
/// about the split's own mean.
pub fn r_squared(model: &dyn Predictor, data: &Dataset, split: Split) -> Result<Vec<f64>, SurrogateError> {
    let rows = data.indices(split);
    if rows.is_empty() {
        return Err(SurrogateError::DegenerateData("split is empty".into()));
    }
    let m = data.output_names.len();
    if model.output_names().len() != m {
        return Err(SurrogateError::Dimension { expected: m, got: model.output_names().len() });
    }
    let preds: Vec<Vec<f64>> = rows.iter().map(|&i| model.predict(&data.inputs[i])).collect();
    (0..m)
        .map(|k| {
            let mean = rows.iter().map(|&i| data.outputs[i][k]).sum::<f64>() / rows.len() as f64;
            let ss_tot: f64 = rows.iter().map(|&i| (data.outputs[i][k] - mean).powi(2)).sum();
            let ss_res: f64 = rows.iter().zip(&preds).map(|(&i, p)| (data.outputs[i][k] - p[k]).powi(2)).sum();
            if ss_tot == 0.0 {
                return Err(SurrogateError::DegenerateData(format!("output `{}` is constant on the split", data.output_names[k])));
            }
            Ok(1.0 - ss_res / ss_tot)
        })
        .collect()
}
