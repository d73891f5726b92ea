//! Configuration files for the experiment subcommands. Files ending in
//! `.json` are read as JSON, everything else as TOML.

use std::path::{Path, PathBuf};

use acdc_core::data::{self, Dataset};
use acdc_core::experiments::{generate_q, simulate, Design, SimConfig};
use acdc_core::rng::Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::Failure;

/// Stream of the config seed used to draw a random Q.
const Q_STREAM: u64 = u64::MAX;

/// Simulation settings. `relevant` defaults to the first `s` coordinates;
/// `q` defaults to the identity, or to a random matrix when `q_density` is set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimSection {
    pub n: usize,
    pub p: usize,
    #[serde(default)]
    pub s: Option<usize>,
    #[serde(default)]
    pub relevant: Option<Vec<usize>>,
    #[serde(default)]
    pub q: Option<Vec<Vec<f64>>>,
    #[serde(default)]
    pub q_density: Option<f64>,
    #[serde(default = "identity_design")]
    pub design: Design,
    #[serde(default = "unit")]
    pub noise_sd: f64,
    #[serde(default)]
    pub seed: u64,
}

fn identity_design() -> Design {
    Design::Identity
}

fn unit() -> f64 {
    1.0
}

impl SimSection {
    pub fn to_config(&self) -> Result<SimConfig, Failure> {
        let relevant = match (&self.relevant, self.s) {
            (Some(r), Some(s)) if r.len() != s => {
                return Err(Failure::config(format!(
                    "relevant lists {} coordinates but s = {s}",
                    r.len()
                )));
            }
            (Some(r), _) => r.clone(),
            (None, Some(s)) => (0..s).collect(),
            (None, None) => return Err(Failure::config("set either `s` or `relevant`")),
        };
        let s = relevant.len();
        let q = match (&self.q, self.q_density) {
            (Some(_), Some(_)) => return Err(Failure::config("set at most one of `q` and `q_density`")),
            (Some(q), None) => q.clone(),
            (None, Some(d)) => {
                if !(0.0..=1.0).contains(&d) {
                    return Err(Failure::config(format!("q_density must lie in [0, 1], got {d}")));
                }
                generate_q(s, d, &mut Rng::with_stream(self.seed, Q_STREAM))
            }
            (None, None) => (0..s)
                .map(|i| (0..s).map(|j| f64::from(u8::from(i == j))).collect())
                .collect(),
        };
        let cfg = SimConfig {
            n: self.n,
            p: self.p,
            relevant,
            q,
            design: self.design,
            noise_sd: self.noise_sd,
            seed: self.seed,
        };
        cfg.validate().map_err(Failure::from)?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateFile {
    pub simulate: SimSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecoverFile {
    pub simulate: SimSection,
    pub n_grid: Vec<usize>,
    pub trials: usize,
}

/// Either a csv file with a named response or a simulation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    #[serde(default)]
    pub input: Option<PathBuf>,
    #[serde(default)]
    pub response: Option<String>,
    #[serde(default)]
    pub simulate: Option<SimSection>,
}

impl DataSection {
    /// Relative input paths are resolved against the config file's directory.
    pub fn load(&self, base: &Path) -> Result<Dataset, Failure> {
        match (&self.input, &self.simulate) {
            (Some(path), None) => {
                let response = self
                    .response
                    .as_deref()
                    .ok_or_else(|| Failure::config("`input` needs `response`"))?;
                let path = if path.is_relative() {
                    base.join(path)
                } else {
                    path.clone()
                };
                data::load_csv(path, response).map_err(Failure::from)
            }
            (None, Some(sim)) => simulate(&sim.to_config()?).map_err(Failure::from),
            _ => Err(Failure::config("data needs exactly one of `input` and `simulate`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathFile {
    pub data: DataSection,
    pub lambda_grid: Vec<f64>,
    #[serde(default = "default_threshold")]
    pub threshold: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CvFile {
    pub data: DataSection,
    pub lambda_grid: Vec<f64>,
    #[serde(default = "five")]
    pub folds: usize,
    #[serde(default = "three")]
    pub repeats: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_threshold() -> f64 {
    acdc_core::shape::ZERO_THRESHOLD
}

fn five() -> usize {
    5
}

fn three() -> usize {
    3
}

/// Parsed config plus its raw text, which feeds the metadata hash.
pub struct Loaded<T> {
    pub value: T,
    pub text: String,
    pub dir: PathBuf,
}

pub fn load<T: DeserializeOwned>(path: &Path) -> Result<Loaded<T>, Failure> {
    let text =
        std::fs::read_to_string(path).map_err(|e| Failure::config(format!("cannot read {}: {e}", path.display())))?;
    let is_json = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"));
    let value = if is_json {
        serde_json::from_str(&text).map_err(|e| Failure::config(format!("{}: {e}", path.display())))?
    } else {
        toml::from_str(&text).map_err(|e| Failure::config(format!("{}: {e}", path.display())))?
    };
    let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok(Loaded { value, text, dir })
}
