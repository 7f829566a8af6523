//! Experiment configuration files and dotted-path overrides.

use std::path::{Path, PathBuf};

use jtft_core::model::ModelConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::SplitSpec;
use crate::error::{AppError, AppResult};
use crate::train::TrainConfig;

/// Environment variable that replaces the configured seed.
pub const SEED_ENV: &str = "JTFT_SEED";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    pub path: PathBuf,
    /// Defaults to the benchmark ratios for the file's name.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split_ratios: Option<[f64; 3]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_rows: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetSection,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub seed: u64,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> AppResult<Self> {
        Self::from_value(parse_table(text)?)
    }

    fn from_value(value: toml::Table) -> AppResult<Self> {
        let mut cfg: ExperimentConfig =
            value.try_into().map_err(|e: toml::de::Error| AppError::Config(e.message().to_string()))?;
        cfg.train.seed = cfg.seed;
        Ok(cfg)
    }

    /// Reads `path`, applies `key=value` overrides, then `JTFT_SEED`.
    /// A relative dataset path is resolved against the config's directory.
    pub fn load(path: &Path, overrides: &[(String, String)]) -> AppResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| AppError::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut table = parse_table(&text)?;
        for (key, value) in overrides {
            apply_override(&mut table, key, value)?;
        }
        let mut cfg = Self::from_value(table)?;
        if let Ok(seed) = std::env::var(SEED_ENV) {
            cfg.seed = seed.trim().parse().map_err(|_| AppError::Config(format!("{SEED_ENV}={seed} is not a seed")))?;
            cfg.train.seed = cfg.seed;
        }
        if cfg.dataset.path.is_relative() {
            if let Some(dir) = path.parent() {
                cfg.dataset.path = dir.join(&cfg.dataset.path);
            }
        }
        Ok(cfg)
    }

    pub fn split_spec(&self) -> AppResult<SplitSpec> {
        match self.dataset.split_ratios {
            Some([a, b, c]) => SplitSpec::new(a, b, c),
            None => {
                let stem = self.dataset.path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
                Ok(SplitSpec::for_dataset(&stem))
            }
        }
    }

    pub fn validate(&self) -> AppResult<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.split_spec()?;
        Ok(())
    }

    /// Stable digest of the model, training and split settings and the seed.
    pub fn fingerprint(&self) -> String {
        let record = (&self.model, &self.train, self.dataset.split_ratios, self.seed);
        let text = serde_json::to_string(&record).expect("config serializes");
        let digest = Sha256::digest(text.as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}

fn parse_table(text: &str) -> AppResult<toml::Table> {
    text.parse::<toml::Table>().map_err(|e| AppError::Config(e.message().to_string()))
}

/// Sets `a.b.c = value` in `table`. The value is read as a TOML literal and
/// falls back to a plain string.
pub fn apply_override(table: &mut toml::Table, key: &str, value: &str) -> AppResult<()> {
    let parsed = format!("v = {value}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(value.to_string()));
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(AppError::Config(format!("malformed override key '{key}'")));
    }
    let (last, parents) = parts.split_last().expect("split yields one part");
    let mut cur = table;
    for p in parents {
        let entry = cur.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry.as_table_mut().ok_or_else(|| AppError::Config(format!("override '{key}': '{p}' is not a section")))?;
    }
    cur.insert(last.to_string(), parsed);
    Ok(())
}

/// Splits `--a.b value` and `--a.b=value` pairs.
pub fn parse_override_args(args: &[String]) -> AppResult<Vec<(String, String)>> {
    let mut out = Vec::new();
    let mut it = args.iter();
    while let Some(arg) = it.next() {
        let key = arg
            .strip_prefix("--")
            .ok_or_else(|| AppError::Config(format!("unexpected argument '{arg}'; overrides look like --model.d_m 64")))?;
        match key.split_once('=') {
            Some((k, v)) => out.push((k.to_string(), v.to_string())),
            None => {
                let v = it.next().ok_or_else(|| AppError::Config(format!("override --{key} needs a value")))?;
                out.push((key.to_string(), v.clone()));
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_fill_everything_but_the_path() {
        let cfg = ExperimentConfig::from_toml("[dataset]\npath = \"data/ETTm2.csv\"\n").unwrap();
        assert_eq!(cfg.model, ModelConfig::default());
        assert_eq!(cfg.train, TrainConfig::default());
        assert_eq!(cfg.split_spec().unwrap(), SplitSpec { train: 0.6, val: 0.2, test: 0.2 });
        assert!(ExperimentConfig::from_toml("seed = 1\n").is_err());
        assert!(ExperimentConfig::from_toml("[dataset]\n").is_err());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        for text in [
            "[dataset]\npath = \"a.csv\"\n[model]\nd_model = 3\n",
            "[dataset]\npath = \"a.csv\"\nformat = 1\n",
            "[dataset]\npath = \"a.csv\"\n[trian]\nepochs = 1\n",
            "[dataset]\npath = \"a.csv\"\n[train]\nseed = 1\n",
        ] {
            assert!(matches!(ExperimentConfig::from_toml(text), Err(AppError::Config(_))), "{text}");
        }
    }

    #[test]
    fn overrides() {
        let mut t: toml::Table = "[dataset]\npath = \"a.csv\"\n[model]\nd_m = 16\n".parse().unwrap();
        apply_override(&mut t, "model.d_m", "64").unwrap();
        apply_override(&mut t, "model.dropout", "0.5").unwrap();
        apply_override(&mut t, "train.epochs", "2").unwrap();
        apply_override(&mut t, "dataset.path", "other/file.csv").unwrap();
        let cfg = ExperimentConfig::from_value(t.clone()).unwrap();
        assert_eq!((cfg.model.d_m, cfg.model.dropout, cfg.train.epochs), (64, 0.5, 2));
        assert_eq!(cfg.dataset.path, PathBuf::from("other/file.csv"));
        apply_override(&mut t, "model.bogus", "1").unwrap();
        assert!(ExperimentConfig::from_value(t.clone()).is_err());
        assert!(apply_override(&mut t, "dataset.path.x", "1").is_err());
        assert!(apply_override(&mut t, "model..d", "1").is_err());

        let args: Vec<String> = ["--model.d_m", "64", "--train.epochs=3"].iter().map(|s| s.to_string()).collect();
        assert_eq!(
            parse_override_args(&args).unwrap(),
            vec![("model.d_m".into(), "64".into()), ("train.epochs".into(), "3".into())]
        );
        assert!(parse_override_args(&["--model.d_m".to_string()]).is_err());
        assert!(parse_override_args(&["model.d_m".to_string()]).is_err());
    }

    #[test]
    fn fingerprint_tracks_settings() {
        let a = ExperimentConfig::from_toml("[dataset]\npath = \"a.csv\"\n").unwrap();
        let b = ExperimentConfig::from_toml("[dataset]\npath = \"elsewhere/a.csv\"\n").unwrap();
        let c = ExperimentConfig::from_toml("seed = 3\n[dataset]\npath = \"a.csv\"\n").unwrap();
        assert_eq!(a.fingerprint(), b.fingerprint());
        assert_ne!(a.fingerprint(), c.fingerprint());
        assert_eq!(a.fingerprint().len(), 16);
    }
}
