//! CSV ingestion, chronological splits and sliding windows.

use std::io::Read;
use std::path::Path;

use jtft_core::Tensor;

use crate::error::{AppError, AppResult};

/// A multivariate series with a leading timestamp column.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    /// Raw timestamp strings; unused by the model.
    pub timestamps: Vec<String>,
    pub channels: Vec<String>,
    /// `rows × D`, row-major.
    pub values: Tensor,
}

impl Dataset {
    pub fn rows(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn num_channels(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn from_columns(name: &str, channels: Vec<String>, timestamps: Vec<String>, values: Vec<f64>) -> AppResult<Self> {
        let d = channels.len();
        if d == 0 || values.is_empty() || !values.len().is_multiple_of(d) || values.len() / d != timestamps.len() {
            return Err(AppError::Data(format!(
                "{name}: {} values do not form {} rows of {d} channels",
                values.len(),
                timestamps.len()
            )));
        }
        let values = Tensor::new(&[timestamps.len(), d], values)?;
        Ok(Dataset { name: name.to_string(), timestamps, channels, values })
    }

    /// First `rows` rows (or all of them).
    pub fn head(&self, rows: usize) -> AppResult<Dataset> {
        let rows = rows.min(self.rows());
        let d = self.num_channels();
        Dataset::from_columns(
            &self.name,
            self.channels.clone(),
            self.timestamps[..rows].to_vec(),
            self.values.data()[..rows * d].to_vec(),
        )
    }

    pub fn write_csv(&self, path: &Path) -> AppResult<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| AppError::Data(format!("{}: {e}", path.display())))?;
        let mut header = vec!["date".to_string()];
        header.extend(self.channels.iter().cloned());
        let d = self.num_channels();
        let res = (|| {
            w.write_record(&header)?;
            for (ts, row) in self.timestamps.iter().zip(self.values.data().chunks_exact(d)) {
                let mut rec = vec![ts.clone()];
                rec.extend(row.iter().map(|v| v.to_string()));
                w.write_record(&rec)?;
            }
            w.flush()?;
            Ok::<_, csv::Error>(())
        })();
        res.map_err(|e| AppError::Data(format!("{}: {e}", path.display())))
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct LoadOptions {
    /// Keep only the first `max_rows` data rows.
    pub max_rows: Option<usize>,
}

pub fn load_csv_dataset(path: &Path, opts: &LoadOptions) -> AppResult<Dataset> {
    let file = std::fs::File::open(path).map_err(|e| AppError::Data(format!("cannot open {}: {e}", path.display())))?;
    let name = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "dataset".into());
    parse_csv_dataset(file, &name, opts)
}

/// Parses CSV text: header row, a timestamp column, then numeric channels.
pub fn parse_csv_dataset<R: Read>(reader: R, name: &str, opts: &LoadOptions) -> AppResult<Dataset> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(reader);
    let header = rdr.headers().map_err(|e| AppError::Data(format!("{name}: unreadable header: {e}")))?.clone();
    if header.len() < 2 {
        return Err(AppError::Data(format!("{name}: need a timestamp column and at least one channel")));
    }
    let channels: Vec<String> = header.iter().skip(1).map(str::to_string).collect();
    let mut timestamps = Vec::new();
    let mut values = Vec::new();
    for rec in rdr.records() {
        if opts.max_rows.is_some_and(|m| timestamps.len() >= m) {
            break;
        }
        let rec = rec.map_err(|e| {
            let line = e.position().map(|p| p.line()).unwrap_or(0);
            AppError::Data(format!("{name}: line {line}: {e}"))
        })?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        if rec.len() != header.len() {
            return Err(AppError::Data(format!(
                "{name}: line {line}: expected {} fields, found {}",
                header.len(),
                rec.len()
            )));
        }
        timestamps.push(rec[0].to_string());
        for (field, channel) in rec.iter().skip(1).zip(&channels) {
            match field.parse::<f64>() {
                Ok(v) if v.is_finite() => values.push(v),
                _ => {
                    return Err(AppError::Data(format!(
                        "{name}: line {line}: channel {channel}: '{field}' is not a finite number"
                    )))
                }
            }
        }
    }
    if timestamps.is_empty() {
        return Err(AppError::Data(format!("{name}: no data rows")));
    }
    Dataset::from_columns(name, channels, timestamps, values)
}

/// Chronological train/validation/test ratios.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SplitSpec {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl SplitSpec {
    pub fn new(train: f64, val: f64, test: f64) -> AppResult<Self> {
        let spec = SplitSpec { train, val, test };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> AppResult<()> {
        let parts = [self.train, self.val, self.test];
        if parts.iter().any(|r| !r.is_finite() || *r <= 0.0) || (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(AppError::Config(format!("split ratios {parts:?} must be positive and sum to 1")));
        }
        Ok(())
    }

    /// Ratios used for a named benchmark dataset.
    pub fn for_dataset(name: &str) -> Self {
        if name.eq_ignore_ascii_case("ettm2") {
            SplitSpec { train: 0.6, val: 0.2, test: 0.2 }
        } else {
            SplitSpec::default()
        }
    }

    /// End rows (exclusive) of the train and validation segments.
    pub fn boundaries(&self, rows: usize) -> (usize, usize) {
        let cut = |r: f64| ((rows as f64 * r) + 1e-9).floor() as usize;
        (cut(self.train), cut(self.train + self.val).min(rows))
    }
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec { train: 0.7, val: 0.1, test: 0.2 }
    }
}

/// Per-channel z-score statistics.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    /// Mean and population standard deviation of `rows × D` values; a
    /// constant channel gets unit scale.
    pub fn fit(values: &[f64], channels: usize) -> Self {
        let rows = values.len() / channels;
        let mut mean = vec![0.0; channels];
        for row in values.chunks_exact(channels) {
            mean.iter_mut().zip(row).for_each(|(m, v)| *m += v);
        }
        mean.iter_mut().for_each(|m| *m /= rows as f64);
        let mut var = vec![0.0; channels];
        for row in values.chunks_exact(channels) {
            for (c, v) in row.iter().enumerate() {
                var[c] += (v - mean[c]) * (v - mean[c]);
            }
        }
        let std = var.iter().map(|v| (v / rows as f64).sqrt()).map(|s| if s > 1e-12 { s } else { 1.0 }).collect();
        Standardizer { mean, std }
    }

    pub fn apply(&self, values: &[f64]) -> Vec<f64> {
        let d = self.mean.len();
        values.iter().enumerate().map(|(i, v)| (v - self.mean[i % d]) / self.std[i % d]).collect()
    }

    /// Maps channel-major `[..., D, T]` values back to the raw scale.
    pub fn invert_channel_major(&self, values: &mut [f64], horizon: usize) {
        let d = self.mean.len();
        for (i, chunk) in values.chunks_exact_mut(horizon).enumerate() {
            let c = i % d;
            chunk.iter_mut().for_each(|v| *v = *v * self.std[c] + self.mean[c]);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

/// Standardized rows of one split, possibly preceded by look-back context
/// taken from the previous split.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitView {
    pub split: Split,
    /// `rows × D`, row-major, standardized.
    pub values: Vec<f64>,
    pub channels: usize,
    /// Dataset row of the first view row.
    pub offset: usize,
    /// Leading rows that may only appear inside look-back windows.
    pub context: usize,
}

impl SplitView {
    pub fn rows(&self) -> usize {
        self.values.len() / self.channels
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub train: SplitView,
    pub val: SplitView,
    pub test: SplitView,
    pub standardizer: Standardizer,
    /// End rows of the train and validation segments.
    pub boundaries: (usize, usize),
}

impl Splits {
    pub fn get(&self, split: Split) -> &SplitView {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

/// Contiguous chronological splits standardized with train statistics.
/// Validation and test views start `lookback` rows early.
pub fn split_dataset(ds: &Dataset, spec: &SplitSpec, lookback: usize) -> AppResult<Splits> {
    spec.validate()?;
    let (rows, d) = (ds.rows(), ds.num_channels());
    let (b1, b2) = spec.boundaries(rows);
    if b1 <= lookback || b2 <= b1 || rows <= b2 {
        return Err(AppError::Data(format!(
            "{}: {rows} rows split at {b1}/{b2} cannot hold a look-back of {lookback} in every split",
            ds.name
        )));
    }
    let raw = ds.values.data();
    let standardizer = Standardizer::fit(&raw[..b1 * d], d);
    let view = |split, start: usize, end: usize, context| SplitView {
        split,
        values: standardizer.apply(&raw[start * d..end * d]),
        channels: d,
        offset: start,
        context,
    };
    Ok(Splits {
        train: view(Split::Train, 0, b1, 0),
        val: view(Split::Val, b1 - lookback, b2, lookback),
        test: view(Split::Test, b2 - lookback, rows, lookback),
        standardizer: standardizer.clone(),
        boundaries: (b1, b2),
    })
}

/// One supervised pair, channel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowSample {
    /// `[D, L]`
    pub x: Tensor,
    /// `[D, T]`
    pub y: Tensor,
    /// View row where the look-back starts.
    pub origin: usize,
}

/// All sliding windows of a view.
#[derive(Debug, Clone)]
pub struct Windows<'a> {
    view: &'a SplitView,
    lookback: usize,
    horizon: usize,
    origins: Vec<usize>,
}

/// Windows at origins `0, stride, 2·stride, …` while the target fits.
pub fn make_windows(view: &SplitView, lookback: usize, horizon: usize, stride: usize) -> AppResult<Windows<'_>> {
    if lookback == 0 || horizon == 0 || stride == 0 {
        return Err(AppError::Config(format!(
            "look-back ({lookback}), horizon ({horizon}) and stride ({stride}) must be positive"
        )));
    }
    let rows = view.rows();
    if rows < lookback + horizon {
        return Err(AppError::Data(format!(
            "{} split has {rows} rows, fewer than look-back {lookback} + horizon {horizon}",
            view.split.name()
        )));
    }
    let origins = (0..=rows - lookback - horizon).step_by(stride).collect();
    Ok(Windows { view, lookback, horizon, origins })
}

impl<'a> Windows<'a> {
    pub fn len(&self) -> usize {
        self.origins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.origins.is_empty()
    }

    pub fn lookback(&self) -> usize {
        self.lookback
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn channels(&self) -> usize {
        self.view.channels
    }

    pub fn origins(&self) -> &[usize] {
        &self.origins
    }

    fn gather(&self, start: usize, len: usize, out: &mut Vec<f64>) {
        let d = self.view.channels;
        for c in 0..d {
            out.extend((start..start + len).map(|r| self.view.values[r * d + c]));
        }
    }

    pub fn get(&self, i: usize) -> WindowSample {
        let o = self.origins[i];
        let d = self.view.channels;
        let (mut x, mut y) = (Vec::new(), Vec::new());
        self.gather(o, self.lookback, &mut x);
        self.gather(o + self.lookback, self.horizon, &mut y);
        WindowSample {
            x: Tensor::new(&[d, self.lookback], x).expect("positive dims"),
            y: Tensor::new(&[d, self.horizon], y).expect("positive dims"),
            origin: o,
        }
    }

    /// Stacks windows `idx` into `[B, D, L]` inputs and `[B, D, T]` targets.
    pub fn batch(&self, idx: &[usize]) -> (Tensor, Tensor) {
        let d = self.view.channels;
        let (mut x, mut y) = (Vec::new(), Vec::new());
        for &i in idx {
            let o = self.origins[i];
            self.gather(o, self.lookback, &mut x);
            self.gather(o + self.lookback, self.horizon, &mut y);
        }
        let b = idx.len();
        (
            Tensor::new(&[b, d, self.lookback], x).expect("non-empty batch"),
            Tensor::new(&[b, d, self.horizon], y).expect("non-empty batch"),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const TOY: &str = "date,a,b\n2020-01-01 00:00,1.0,2\n2020-01-01 00:15,3,4.5\n2020-01-01 00:30,-1,0\n";

    #[test]
    fn parses_small_file() {
        let ds = parse_csv_dataset(TOY.as_bytes(), "toy", &LoadOptions::default()).unwrap();
        assert_eq!((ds.rows(), ds.num_channels()), (3, 2));
        assert_eq!(ds.channels, ["a", "b"]);
        assert_eq!(ds.values.data(), &[1.0, 2.0, 3.0, 4.5, -1.0, 0.0]);
        assert_eq!(ds.timestamps[1], "2020-01-01 00:15");
        let head = parse_csv_dataset(TOY.as_bytes(), "toy", &LoadOptions { max_rows: Some(2) }).unwrap();
        assert_eq!(head.rows(), 2);
    }

    #[test]
    fn reports_line_of_bad_cell() {
        let bad = "date,a\nt0,1\nt1,2\nt2,oops\n";
        let err = parse_csv_dataset(bad.as_bytes(), "bad", &LoadOptions::default()).unwrap_err().to_string();
        assert!(err.contains("line 4") && err.contains("oops"), "{err}");
        let nan = "date,a\nt0,NaN\n";
        assert!(parse_csv_dataset(nan.as_bytes(), "nan", &LoadOptions::default()).is_err());
        for text in ["", "date,a\n", "date\nt0\n", "date,a\nt0,1,2\n"] {
            assert!(matches!(parse_csv_dataset(text.as_bytes(), "x", &LoadOptions::default()), Err(AppError::Data(_))));
        }
    }

    #[test]
    fn split_boundaries() {
        assert_eq!(SplitSpec::default().boundaries(1000), (700, 800));
        assert_eq!(SplitSpec::for_dataset("ETTm2").boundaries(1000), (600, 800));
        assert_eq!(SplitSpec::for_dataset("weather"), SplitSpec::default());
        assert!(SplitSpec::new(0.5, 0.3, 0.3).is_err());
        assert!(SplitSpec::new(1.0, 0.0, 0.0).is_err());
    }

    fn ramp(rows: usize, d: usize) -> Dataset {
        let values = (0..rows * d).map(|i| (i / d) as f64 + 100.0 * (i % d) as f64).collect();
        Dataset::from_columns(
            "ramp",
            (0..d).map(|c| format!("c{c}")).collect(),
            (0..rows).map(|r| r.to_string()).collect(),
            values,
        )
        .unwrap()
    }

    #[test]
    fn split_views_and_train_statistics() {
        let ds = ramp(1000, 2);
        let s = split_dataset(&ds, &SplitSpec::default(), 24).unwrap();
        assert_eq!(s.boundaries, (700, 800));
        // direct oracle over rows 0..700 of channel 0: values 0..699
        let mean = 349.5;
        let var = (0..700).map(|r| (r as f64 - mean).powi(2)).sum::<f64>() / 700.0;
        assert!((s.standardizer.mean[0] - mean).abs() < 1e-9);
        assert!((s.standardizer.mean[1] - (mean + 100.0)).abs() < 1e-9);
        assert!((s.standardizer.std[0] - var.sqrt()).abs() < 1e-9);
        assert_eq!((s.train.rows(), s.val.rows(), s.test.rows()), (700, 124, 224));
        assert_eq!((s.val.offset, s.test.offset), (676, 776));
        assert!(split_dataset(&ds.head(30).unwrap(), &SplitSpec::default(), 24).is_err());
    }

    #[test]
    fn test_rows_do_not_affect_train_statistics() {
        let ds = ramp(500, 3);
        let mut changed = ds.clone();
        let d = changed.num_channels();
        for v in &mut changed.values.data_mut()[450 * d..] {
            *v = *v * -7.0 + 1e6;
        }
        let a = split_dataset(&ds, &SplitSpec::default(), 10).unwrap();
        let b = split_dataset(&changed, &SplitSpec::default(), 10).unwrap();
        assert_eq!(a.standardizer, b.standardizer);
        assert_eq!(a.train, b.train);
        assert_ne!(a.test, b.test);
    }

    #[test]
    fn window_counts_and_contiguity() {
        let ds = ramp(1000, 2);
        let s = split_dataset(&ds, &SplitSpec::default(), 16).unwrap();
        let w = make_windows(&s.train, 16, 8, 1).unwrap();
        assert_eq!(w.len(), 700 - 16 - 8 + 1);
        let std = &s.standardizer;
        for i in [0, 5, w.len() - 1] {
            let sample = w.get(i);
            for c in 0..2 {
                for t in 0..16 {
                    let raw = sample.x.data()[c * 16 + t] * std.std[c] + std.mean[c];
                    assert!((raw - ((sample.origin + t) as f64 + 100.0 * c as f64)).abs() < 1e-9);
                }
                let first_target = sample.y.data()[c * 8] * std.std[c] + std.mean[c];
                assert!((first_target - ((sample.origin + 16) as f64 + 100.0 * c as f64)).abs() < 1e-9);
            }
        }
        // test targets stay inside the test segment
        let t = make_windows(&s.test, 16, 8, 1).unwrap();
        assert_eq!(t.len(), 200 - 8 + 1);
        assert!(t.origins().iter().all(|&o| s.test.offset + o + 16 >= s.boundaries.1));

        let exact = SplitView { split: Split::Train, values: vec![0.0; 24 * 2], channels: 2, offset: 0, context: 0 };
        assert_eq!(make_windows(&exact, 16, 8, 1).unwrap().len(), 1);
        let nine_more = SplitView { values: vec![0.0; 33 * 2], ..exact.clone() };
        assert_eq!(make_windows(&nine_more, 16, 8, 1).unwrap().len(), 10);
        assert_eq!(make_windows(&nine_more, 16, 8, 4).unwrap().len(), 3);
        assert!(matches!(make_windows(&exact, 16, 9, 1), Err(AppError::Data(_))));
    }

    #[test]
    fn batches_stack_windows() {
        let ds = ramp(200, 3);
        let s = split_dataset(&ds, &SplitSpec::default(), 8).unwrap();
        let w = make_windows(&s.train, 8, 4, 1).unwrap();
        let (x, y) = w.batch(&[3, 0]);
        assert_eq!(x.shape(), &[2, 3, 8]);
        assert_eq!(y.shape(), &[2, 3, 4]);
        assert_eq!(&x.data()[..24], w.get(3).x.data());
        assert_eq!(&y.data()[12..], w.get(0).y.data());
    }
}
