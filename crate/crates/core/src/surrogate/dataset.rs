//! Reactor-section samples for surrogate training.

use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{SurrogateError, FORMAT_VERSION};
use crate::flowsheet::params::{FlowsheetParams, Range};
use crate::flowsheet::simulate::{simulate_reactor, SimulationError};
use crate::flowsheet::thermo::ThermoConfig;

/// Surrogate inputs: steam flow, natural-gas temperature and flow entering
/// the reactor section, and methane conversion.
pub const INPUT_NAMES: [&str; 4] = ["F_S", "T_ref", "F_ref", "X"];

/// Sampling box of the surrogate inputs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SampleRanges {
    /// mol/s
    pub steam_flow: Range,
    /// K
    pub gas_temperature: Range,
    /// mol/s
    pub gas_flow: Range,
    pub conversion: Range,
}

impl Default for SampleRanges {
    fn default() -> Self {
        SampleRanges {
            steam_flow: Range::new(200.0, 350.0),
            gas_temperature: Range::new(600.0, 900.0),
            gas_flow: Range::new(600.0, 900.0),
            conversion: Range::new(0.80, 0.95),
        }
    }
}

impl SampleRanges {
    /// Ranges in [`INPUT_NAMES`] order.
    pub fn as_array(&self) -> [Range; 4] {
        [self.steam_flow, self.gas_temperature, self.gas_flow, self.conversion]
    }

    pub fn contains(&self, inputs: &[f64]) -> bool {
        inputs.len() == 4 && self.as_array().iter().zip(inputs).all(|(r, &v)| r.contains(v))
    }

    pub fn midpoint(&self) -> [f64; 4] {
        self.as_array().map(|r| r.mid())
    }
}

/// Output names: outlet temperature, outlet flow, then one mole fraction per
/// species in `cfg` order.
pub fn surrogate_outputs(cfg: &ThermoConfig) -> Vec<String> {
    let mut names = vec!["T_out".to_string(), "F_out".to_string()];
    names.extend(cfg.names().iter().map(|n| format!("x_{n}")));
    names
}

/// Simulates the reactor section at one input vector.
pub fn reactor_outputs(cfg: &ThermoConfig, params: &FlowsheetParams, inputs: &[f64]) -> Result<Vec<f64>, SimulationError> {
    let (_, s) = simulate_reactor(cfg, params, inputs[0], inputs[1], inputs[2], inputs[3])?;
    let mut out = vec![s.temperature, s.total_flow];
    out.extend_from_slice(&s.x);
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Validation,
    All,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub input_names: Vec<String>,
    pub output_names: Vec<String>,
    pub inputs: Vec<Vec<f64>>,
    pub outputs: Vec<Vec<f64>>,
    /// `true` for training rows.
    pub train: Vec<bool>,
    /// Samples whose simulation failed; they are not stored.
    pub failures: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| match split {
                Split::Train => self.train[i],
                Split::Validation => !self.train[i],
                Split::All => true,
            })
            .collect()
    }

    /// Builds a dataset from rows, assigning the first `round(0.8 n)` rows of
    /// a seeded permutation to training.
    pub fn from_rows(
        input_names: Vec<String>,
        output_names: Vec<String>,
        rows: Vec<(Vec<f64>, Vec<f64>)>,
        seed: u64,
    ) -> Result<Self, SurrogateError> {
        for (x, y) in &rows {
            if x.len() != input_names.len() {
                return Err(SurrogateError::Dimension { expected: input_names.len(), got: x.len() });
            }
            if y.len() != output_names.len() {
                return Err(SurrogateError::Dimension { expected: output_names.len(), got: y.len() });
            }
        }
        let n = rows.len();
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ SPLIT_STREAM));
        let n_train = (0.8 * n as f64).round() as usize;
        let mut train = vec![false; n];
        for &i in &order[..n_train] {
            train[i] = true;
        }
        let (inputs, outputs) = rows.into_iter().unzip();
        Ok(Dataset { input_names, output_names, inputs, outputs, train, failures: 0 })
    }

    /// CSV with a header row: `format_version`, `split`, the input columns,
    /// then the output columns. Values use the shortest round-trip form.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), SurrogateError> {
        let mut wr = csv::Writer::from_writer(w);
        let mut header = vec!["format_version".to_string(), "split".to_string()];
        header.extend(self.input_names.iter().cloned());
        header.extend(self.output_names.iter().cloned());
        wr.write_record(&header)?;
        for i in 0..self.len() {
            let mut rec = vec![FORMAT_VERSION.to_string(), if self.train[i] { "train" } else { "validation" }.to_string()];
            rec.extend(self.inputs[i].iter().chain(&self.outputs[i]).map(|v| format!("{v:e}")));
            wr.write_record(&rec)?;
        }
        wr.flush().map_err(|source| SurrogateError::Io { path: "<csv>".into(), source })?;
        Ok(())
    }

    /// Reads [`Self::write_csv`] output. The first [`INPUT_NAMES`]`.len()`
    /// data columns are inputs.
    pub fn read_csv<R: Read>(r: R) -> Result<Self, SurrogateError> {
        let mut rd = csv::Reader::from_reader(r);
        let header: Vec<String> = rd.headers()?.iter().map(str::to_string).collect();
        let k = INPUT_NAMES.len();
        if header.len() < 2 + k + 1 || header[0] != "format_version" || header[1] != "split" {
            return Err(SurrogateError::Malformed(format!("unexpected header {header:?}")));
        }
        let input_names = header[2..2 + k].to_vec();
        let output_names = header[2 + k..].to_vec();
        let mut ds = Dataset { input_names, output_names, inputs: vec![], outputs: vec![], train: vec![], failures: 0 };
        for (line, rec) in rd.records().enumerate() {
            let rec = rec?;
            if rec.len() != header.len() {
                return Err(SurrogateError::Malformed(format!("row {} has {} fields", line + 1, rec.len())));
            }
            let version: u32 = rec[0].trim().parse().map_err(|_| SurrogateError::Malformed(format!("row {}: bad version", line + 1)))?;
            if version != FORMAT_VERSION {
                return Err(SurrogateError::Version { found: version, expected: FORMAT_VERSION });
            }
            let train = match rec[1].trim() {
                "train" => true,
                "validation" => false,
                other => return Err(SurrogateError::Malformed(format!("row {}: unknown split `{other}`", line + 1))),
            };
            let vals = rec
                .iter()
                .skip(2)
                .map(|s| s.trim().parse::<f64>().ok().filter(|v| v.is_finite()))
                .collect::<Option<Vec<f64>>>()
                .ok_or_else(|| SurrogateError::Malformed(format!("row {}: non-numeric value", line + 1)))?;
            ds.inputs.push(vals[..k].to_vec());
            ds.outputs.push(vals[k..].to_vec());
            ds.train.push(train);
        }
        Ok(ds)
    }

    pub fn save(&self, path: &Path) -> Result<(), SurrogateError> {
        let f = std::fs::File::create(path).map_err(|source| SurrogateError::Io { path: path.display().to_string(), source })?;
        self.write_csv(std::io::BufWriter::new(f))
    }

    pub fn load(path: &Path) -> Result<Self, SurrogateError> {
        let f = std::fs::File::open(path).map_err(|source| SurrogateError::Io { path: path.display().to_string(), source })?;
        Self::read_csv(std::io::BufReader::new(f))
    }
}

// the split permutation draws from a stream distinct from the samples
const SPLIT_STREAM: u64 = 0x9e37_79b9_7f4a_7c15;

/// `n` seeded uniform samples of the reactor section. Simulations run in
/// parallel; row order is the sample index, so the result does not depend
/// on scheduling. Failed samples are counted, not stored.
pub fn sample_dataset(cfg: &ThermoConfig, params: &FlowsheetParams, n: usize, ranges: &SampleRanges, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let box_ = ranges.as_array();
    let samples: Vec<Vec<f64>> =
        (0..n).map(|_| box_.iter().map(|r| r.lower + (r.upper - r.lower) * rng.random::<f64>()).collect()).collect();
    let results: Vec<Option<Vec<f64>>> = samples.par_iter().map(|x| reactor_outputs(cfg, params, x).ok()).collect();
    let failures = results.iter().filter(|r| r.is_none()).count();
    let rows: Vec<(Vec<f64>, Vec<f64>)> = samples.into_iter().zip(results).filter_map(|(x, y)| y.map(|y| (x, y))).collect();
    let mut ds = Dataset::from_rows(INPUT_NAMES.iter().map(|s| s.to_string()).collect(), surrogate_outputs(cfg), rows, seed)
        .expect("rows have consistent dimensions");
    ds.failures = failures;
    ds
}
