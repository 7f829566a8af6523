//! JSON-lines records written by the commands.

use std::io::Write;
use std::path::Path;

use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::error::{AppError, AppResult};

/// Deterministic metrics; wall-clock times go to [`TimingRecord`]s.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MetricsRecord {
    Epoch {
        dataset: String,
        horizon: usize,
        epoch: usize,
        steps: usize,
        train_loss: f64,
        val_mse: f64,
        val_mae: f64,
        fingerprint: String,
    },
    Test {
        dataset: String,
        horizon: usize,
        mse: f64,
        mae: f64,
        windows: usize,
        best_epoch: Option<usize>,
        fingerprint: String,
    },
    Baseline {
        dataset: String,
        horizon: usize,
        mse: f64,
        mae: f64,
        windows: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingRecord {
    pub stage: String,
    pub seconds: f64,
}

impl TimingRecord {
    pub fn new(stage: impl Into<String>, seconds: f64) -> Self {
        TimingRecord { stage: stage.into(), seconds }
    }
}

pub fn to_jsonl<T: Serialize>(records: &[T]) -> String {
    let mut s = String::new();
    for r in records {
        s.push_str(&serde_json::to_string(r).expect("records serialize"));
        s.push('\n');
    }
    s
}

pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> AppResult<()> {
    let mut f = std::fs::File::create(path).map_err(|e| AppError::io(path, e))?;
    f.write_all(to_jsonl(records).as_bytes()).map_err(|e| AppError::io(path, e))
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> AppResult<Vec<T>> {
    let text = std::fs::read_to_string(path).map_err(|e| AppError::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| AppError::Data(format!("{}: line {}: {e}", path.display(), i + 1)))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn finite() -> impl Strategy<Value = f64> {
        prop_oneof![any::<f64>().prop_filter("finite", |v| v.is_finite()), -1e3..1e3f64]
    }

    proptest! {
        #[test]
        fn metrics_records_round_trip(mse in finite(), mae in finite(), epoch in 0usize..1000, best in proptest::option::of(0usize..50)) {
            let records = vec![
                MetricsRecord::Epoch {
                    dataset: "d".into(), horizon: 96, epoch, steps: epoch * 3, train_loss: mse,
                    val_mse: mae, val_mae: mse, fingerprint: "f".into(),
                },
                MetricsRecord::Test {
                    dataset: "d".into(), horizon: 96, mse, mae, windows: 5, best_epoch: best, fingerprint: "f".into(),
                },
                MetricsRecord::Baseline { dataset: "d".into(), horizon: 1, mse, mae, windows: 1 },
            ];
            let text = to_jsonl(&records);
            let back: Vec<MetricsRecord> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
            prop_assert_eq!(back, records);
        }
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.jsonl");
        let rec = vec![TimingRecord::new("epoch 1", 0.25), TimingRecord::new("total", 1.0 / 3.0)];
        write_jsonl(&path, &rec).unwrap();
        assert_eq!(read_jsonl::<TimingRecord>(&path).unwrap(), rec);
        std::fs::write(&path, "{\"stage\":1}\n").unwrap();
        let err = read_jsonl::<TimingRecord>(&path).unwrap_err().to_string();
        assert!(err.contains("line 1"), "{err}");
    }
}
