//! Run configuration: one TOML file, `--set section.key=value` overrides,
//! defaults for everything left out.

use std::path::{Path, PathBuf};

use cherryq::impact::Metric;
use cherryq::lm::ModelConfig;
use cherryq::qat::{Ste, TrainConfig};
use cherryq::quant::QuantConfig;
use cherryq::Error;
use serde::{Deserialize, Serialize};

/// Environment variable naming the directory of the default corpus.
pub const DATA_DIR_ENV: &str = "CHERRYQ_DATA_DIR";
/// File looked up in the data directory when no corpus is configured.
pub const DEFAULT_CORPUS: &str = "sample.txt";

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    pub model: ModelConfig,
    /// Schedule of base training.
    pub train: TrainConfig,
    /// Schedule of the QAT fine-tune.
    pub qat: TrainConfig,
    pub quant: QuantConfig,
    pub analyze: AnalyzeConfig,
    pub cherryq: CherryqConfig,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Corpus file. Unset means `$CHERRYQ_DATA_DIR/sample.txt`, falling
    /// back to `data/sample.txt`.
    pub corpus: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalyzeConfig {
    /// Number of disjoint calibration splits drawn from the training windows.
    pub splits: usize,
    /// Windows per split.
    pub windows_per_split: usize,
    /// Impact samples per matrix written to the scatter CSVs.
    pub scatter_samples: usize,
    pub seed: u64,
}

impl Default for AnalyzeConfig {
    fn default() -> Self {
        Self {
            splits: 2,
            windows_per_split: 64,
            scatter_samples: 4096,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CherryqConfig {
    pub metric: Metric,
    pub ste: Ste,
    /// Calibration windows for impact estimation and the scale search.
    pub calib_windows: usize,
    pub calib_seed: u64,
    pub divergence_factor: f64,
    /// `false` turns the run into plain fine-tuning (matched full-precision
    /// control); the result is stored unquantized.
    pub fake_quant: bool,
}

impl Default for CherryqConfig {
    fn default() -> Self {
        Self {
            metric: Metric::Impact,
            ste: Ste::Identity,
            calib_windows: 64,
            calib_seed: 1,
            divergence_factor: 10.0,
            fake_quant: true,
        }
    }
}

impl RunConfig {
    /// Reads `path` (if any), applies `overrides` in order, fills defaults.
    pub fn resolve(path: Option<&Path>, overrides: &[String]) -> Result<Self, Error> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                text.parse::<toml::Table>()
                    .map_err(|e| Error::config(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), Error> {
        self.model.validate()?;
        self.train.validate()?;
        self.qat.validate()?;
        self.quant.validate()?;
        if self.analyze.splits < 2 || self.analyze.windows_per_split == 0 {
            return Err(Error::config("analyze needs at least 2 splits of at least 1 window"));
        }
        if self.cherryq.calib_windows == 0 {
            return Err(Error::config("cherryq.calib_windows must be positive"));
        }
        for (name, t) in [("train", &self.train), ("qat", &self.qat)] {
            if t.seq_len > self.model.context {
                return Err(Error::config(format!(
                    "{name}.seq_len {} exceeds model.context {}",
                    t.seq_len, self.model.context
                )));
            }
        }
        Ok(())
    }

    /// The corpus file this run reads.
    pub fn corpus_path(&self) -> PathBuf {
        if let Some(p) = &self.data.corpus {
            return p.clone();
        }
        match std::env::var_os(DATA_DIR_ENV) {
            Some(dir) => PathBuf::from(dir).join(DEFAULT_CORPUS),
            None => PathBuf::from("data").join(DEFAULT_CORPUS),
        }
    }
}

/// `section.key=value` (or `a.b.c=value`); the value is parsed as TOML and
/// taken as a bare string if that fails, so `--set data.corpus=x.txt` works
/// without quotes.
fn apply_override(table: &mut toml::Table, spec: &str) -> Result<(), Error> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::config(format!("override `{spec}` is not of the form key=value")))?;
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(Error::config(format!("override `{spec}` has an empty key segment")));
    }
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));

    let (last, parents) = path.split_last().expect("split yields at least one segment");
    let mut cur = table;
    for p in parents {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = match entry {
            toml::Value::Table(t) => t,
            _ => return Err(Error::config(format!("override `{spec}`: `{p}` is not a section"))),
        };
    }
    cur.insert(last.to_string(), value);
    Ok(())
}
