use std::io::Write;
use std::path::Path;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use consol_core::datasets::{self, Dataset};
use consol_core::local::{CanonicalEquation, LocalStructure, LocalWeights};
use consol_core::metrics::CoefficientReport;
use consol_core::qlearn::EpisodeLog;
use consol_core::Matrix;

/// Writes through a temporary file in the same directory, then renames.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).with_context(|| format!("temporary file in {}", dir.display()))?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

/// A CSV file and its metadata sidecar.
pub fn write_dataset(path: &Path, ds: &Dataset) -> Result<()> {
    write_atomic(path, &datasets::to_csv(ds)?)?;
    write_json(&datasets::meta_path(path), &ds.meta)
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    if !path.exists() {
        anyhow::bail!(consol_core::Error::Config(format!("dataset file {} does not exist", path.display())));
    }
    datasets::load(path).with_context(|| format!("loading {}", path.display()))
}

/// Network structure with optional trained weights.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelFile {
    pub structure: LocalStructure,
    #[serde(default)]
    pub weights: Option<LocalWeights>,
}

impl ModelFile {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let model: ModelFile = serde_json::from_str(&text)
            .map_err(|e| consol_core::Error::Config(format!("{}: {e}", path.display())))?;
        if let Some(w) = &model.weights {
            w.check_shape(&model.structure)?;
        }
        Ok(model)
    }
}

/// 1-based column lists such as `1,2`.
pub fn parse_columns(spec: &str) -> std::result::Result<Vec<usize>, String> {
    spec.split(',')
        .map(|s| match s.trim().parse::<usize>() {
            Ok(c) if c >= 1 => Ok(c - 1),
            _ => Err(format!("'{s}' is not a 1-based column number")),
        })
        .collect()
}

/// `a..b` with unit step, `a..b:step`, or a comma list.
pub fn parse_grid(spec: &str) -> std::result::Result<Vec<f64>, String> {
    let bad = || format!("grid '{spec}' must look like -10..10, 0..1:0.25 or 1,2,3");
    if let Some((lo, rest)) = spec.split_once("..") {
        let (hi, step) = rest.split_once(':').unwrap_or((rest, "1"));
        let (lo, hi, step): (f64, f64, f64) = (
            lo.trim().parse().map_err(|_| bad())?,
            hi.trim().parse().map_err(|_| bad())?,
            step.trim().parse().map_err(|_| bad())?,
        );
        if !(step > 0.0) || hi < lo {
            return Err(bad());
        }
        let n = ((hi - lo) / step + 1e-9).floor() as usize;
        return Ok((0..=n).map(|i| lo + i as f64 * step).collect());
    }
    spec.split(',').map(|s| s.trim().parse().map_err(|_| bad())).collect()
}

/// Restricts a dataset to the given columns. The generating equation is
/// kept only when nothing was dropped or renumbered.
pub fn select(ds: Dataset, inputs: Option<&[usize]>, outputs: Option<&[usize]>) -> Result<Dataset> {
    let identity = |cols: Option<&[usize]>, n: usize| cols.is_none_or(|c| c.iter().copied().eq(0..n));
    if identity(inputs, ds.n_inputs()) && identity(outputs, ds.n_outputs()) {
        return Ok(ds);
    }
    let pick = |m: &Matrix, cols: Option<&[usize]>| -> Result<Matrix> {
        let all: Vec<usize> = (0..m.cols()).collect();
        let cols = cols.unwrap_or(&all);
        if let Some(&c) = cols.iter().find(|&&c| c >= m.cols()) {
            anyhow::bail!(consol_core::Error::Config(format!("column {} out of range 1..={}", c + 1, m.cols())));
        }
        Ok(Matrix::from_fn(m.rows(), cols.len(), |r, j| m.get(r, cols[j])))
    };
    let x = pick(&ds.x, inputs)?;
    let y = pick(&ds.y, outputs)?;
    let mut out = Dataset::new(&ds.meta.name, x, y, ds.meta.seed, None)?;
    out.meta.snr_db = ds.meta.snr_db;
    Ok(out)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SearchReport {
    pub version: u32,
    pub dataset: String,
    pub seeds: consol_core::config::Seeds,
    pub snr_db: Option<f64>,
    /// One rendered equation per output, as in equations.txt.
    pub equations: Vec<String>,
    pub terms: CanonicalEquation,
    pub nrmse_train: f64,
    pub nrmse_test: Option<f64>,
    pub e_c_percent: Option<f64>,
    /// Present when the data carries its generating equation. Learned terms
    /// absent from the truth are listed but excluded from the average.
    pub coefficients: Option<CoefficientReport>,
    pub best_reward: f64,
    pub best_episode: usize,
    pub episodes: usize,
    pub stopped_early: bool,
}

pub const EQUATION_DIGITS: usize = 4;

pub fn equation_lines(eq: &CanonicalEquation) -> Vec<String> {
    eq.render(EQUATION_DIGITS).lines().map(str::to_string).collect()
}

pub fn episodes_csv(logs: &[EpisodeLog]) -> String {
    let mut s = String::from(consol_core::qlearn::EPISODE_CSV_HEADER);
    s.push('\n');
    for l in logs {
        s.push_str(&consol_core::qlearn::episode_csv_row(l));
        s.push('\n');
    }
    s
}
