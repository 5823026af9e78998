//! Run configuration: one JSON document with a `version` field that
//! covers data generation, the network template, search and training.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::datasets::{add_noise, gen_massdamper, gen_power, gen_syn, Dataset, MassDamperSpec, PowerSystemSpec};
use crate::error::{Error, Result};
use crate::local::{LayerKind, LocalStructure, TrainConfig};
use crate::mdp::{ConstraintConfig, SearchSpace};
use crate::qlearn::QLearnConfig;
use crate::symbols::SymbolLibrary;

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Seeds {
    pub data: u64,
    pub search: u64,
    pub probe: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Self { data: 0, search: 0, probe: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynParams {
    pub n_train: usize,
    pub n_test: usize,
}

impl Default for SynParams {
    fn default() -> Self {
        Self { n_train: 2000, n_test: 2000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PowParams {
    pub nodes: usize,
    /// Probability of a line beyond the spanning path.
    pub density: f64,
    pub n_train: usize,
    pub n_test: usize,
    pub voltage_range: (f64, f64),
}

impl Default for PowParams {
    fn default() -> Self {
        Self { nodes: 5, density: 0.4, n_train: 8760, n_test: 8760, voltage_range: (-1.0, 1.0) }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MasParams {
    pub nodes: usize,
    pub density: f64,
    pub dt: f64,
    /// Total samples; the first half trains.
    pub steps: usize,
}

impl Default for MasParams {
    fn default() -> Self {
        Self { nodes: 10, density: 0.3, dt: 0.01, steps: 6000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileParams {
    pub train: PathBuf,
    pub test: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "lowercase")]
pub enum DatasetConfig {
    Syn1(SynParams),
    Syn2(SynParams),
    Pow(PowParams),
    Mas(MasParams),
    /// Previously generated CSV files.
    Files(FileParams),
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig::Syn1(SynParams::default())
    }
}

impl DatasetConfig {
    /// Parses a generator name with default parameters.
    pub fn named(name: &str) -> Result<Self> {
        Ok(match name {
            "syn1" => DatasetConfig::Syn1(SynParams::default()),
            "syn2" => DatasetConfig::Syn2(SynParams::default()),
            "pow" => DatasetConfig::Pow(PowParams::default()),
            "mas" => DatasetConfig::Mas(MasParams::default()),
            _ => return Err(Error::Config(format!("unknown dataset '{name}'; expected syn1, syn2, pow or mas"))),
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            DatasetConfig::Syn1(_) => "syn1",
            DatasetConfig::Syn2(_) => "syn2",
            DatasetConfig::Pow(_) => "pow",
            DatasetConfig::Mas(_) => "mas",
            DatasetConfig::Files(_) => "files",
        }
    }

    /// Symbol pool used for the dataset when the config names none.
    pub fn default_library(&self) -> Vec<String> {
        let names: &[&str] = match self {
            DatasetConfig::Syn1(_) => &["id", "square", "cos"],
            DatasetConfig::Syn2(_) => &["sqrt", "id", "square", "log", "sin"],
            _ => &["id"],
        };
        names.iter().map(|s| s.to_string()).collect()
    }

    /// Noiseless train and test sets.
    pub fn generate(&self, seed: u64) -> Result<(Dataset, Option<Dataset>)> {
        match self {
            DatasetConfig::Syn1(p) => gen_syn(1, p.n_train, p.n_test, seed).map(|(a, b)| (a, Some(b))),
            DatasetConfig::Syn2(p) => gen_syn(2, p.n_train, p.n_test, seed).map(|(a, b)| (a, Some(b))),
            DatasetConfig::Pow(p) => {
                if p.n_train == 0 || p.n_test == 0 {
                    return Err(Error::Config("sample counts must be positive".into()));
                }
                let spec = PowerSystemSpec::random(p.nodes, p.density, seed)?;
                let all = gen_power(&spec, p.n_train + p.n_test, p.voltage_range, seed)?;
                Ok((all.slice(0..p.n_train)?, Some(all.slice(p.n_train..p.n_train + p.n_test)?)))
            }
            DatasetConfig::Mas(p) => {
                let spec = MassDamperSpec::random(p.nodes, p.density, p.dt, p.steps, seed)?;
                gen_massdamper(&spec, seed).map(|(a, b)| (a, Some(b)))
            }
            DatasetConfig::Files(f) => {
                let train = crate::datasets::load(&f.train)?;
                let test = f.test.as_deref().map(crate::datasets::load).transpose()?;
                Ok((train, test))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    pub seeds: Seeds,
    pub dataset: DatasetConfig,
    /// Noise level applied to generated training outputs.
    pub snr_db: Option<f64>,
    /// Symbol names; the dataset's pool when absent.
    pub library: Option<Vec<String>>,
    /// Multiplication neurons per block; three per output when absent.
    pub mult_neurons: Option<usize>,
    /// Number of transforms. 3 is activation, product, sum; every extra
    /// product and sum pair adds 2.
    pub depth: usize,
    pub qlearn: QLearnConfig,
    pub train: TrainConfig,
    pub constraints: ConstraintConfig,
    /// Stages chosen by the agent; every non-activation stage when absent.
    pub search_stages: Option<Vec<usize>>,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION,
            seeds: Seeds::default(),
            dataset: DatasetConfig::default(),
            snr_db: None,
            library: None,
            mult_neurons: None,
            depth: 3,
            qlearn: QLearnConfig::default(),
            train: TrainConfig::default(),
            constraints: ConstraintConfig::default(),
            search_stages: None,
            output_dir: PathBuf::from("out"),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::Config(format!("unsupported config version {}", self.version)));
        }
        if self.depth < 3 || self.depth % 2 == 0 {
            return Err(Error::Config("depth must be 3, 5, 7, ...".into()));
        }
        if self.mult_neurons == Some(0) {
            return Err(Error::Config("mult_neurons must be positive".into()));
        }
        if let Some(snr) = self.snr_db {
            if !snr.is_finite() {
                return Err(Error::Config("snr_db must be finite".into()));
            }
        }
        self.symbol_library()?;
        self.qlearn.validate()?;
        self.train.validate()?;
        self.constraints.validate()
    }

    pub fn symbol_library(&self) -> Result<SymbolLibrary> {
        let names = self.library.clone().unwrap_or_else(|| self.dataset.default_library());
        SymbolLibrary::from_names(&names)
    }

    /// Generated (and optionally noised) train set plus the clean test set.
    pub fn datasets(&self) -> Result<(Dataset, Option<Dataset>)> {
        let (train, test) = self.dataset.generate(self.seeds.data)?;
        let train = if self.snr_db.is_some() { add_noise(&train, self.snr_db, self.seeds.data)? } else { train };
        Ok((train, test))
    }

    /// Empty network template for the given data shape.
    pub fn template(&self, n_inputs: usize, n_outputs: usize) -> Result<LocalStructure> {
        let mult = self.mult_neurons.unwrap_or(3 * n_outputs);
        let blocks = (self.depth - 1) / 2;
        let mut kinds = Vec::new();
        let mut sizes = Vec::new();
        for _ in 0..blocks {
            kinds.extend([LayerKind::Multiplication, LayerKind::Summation]);
            sizes.extend([mult, n_outputs]);
        }
        LocalStructure::template(n_inputs, self.symbol_library()?, &kinds, &sizes)
    }

    pub fn search_space(&self, n_inputs: usize, n_outputs: usize) -> Result<SearchSpace> {
        let t = self.template(n_inputs, n_outputs)?;
        match &self.search_stages {
            None => Ok(SearchSpace::new(t)),
            Some(stages) => SearchSpace::with_stages(t, stages),
        }
    }
}
