//! Reconstruction and scaling benchmarks.


use std::time::Instant;

use jtft_core::model::{instance_normalize, patch_count, patchify, Jtft, ModelConfig, Stage};
use jtft_core::spectral::{
    fit_lrnf, reconstruct_rndf, reconstruct_topf, windows_from_columns, LrnfOptions, Method, ReconstructionReport,
};
use jtft_core::{Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{AppError, AppResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReconOptions {
    pub k_max: Vec<usize>,
    pub len: usize,
    pub seeds: usize,
    pub seed: u64,
    pub lrnf: LrnfOptions,
}

impl Default for ReconOptions {
    fn default() -> Self {
        ReconOptions { k_max: vec![4, 8, 16], len: 128, seeds: 5, seed: 0, lrnf: LrnfOptions::default() }
    }
}

/// One JSON-lines record of the reconstruction benchmark.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ReconRecord {
    Summary { method: Method, k_max: usize, nmse: f64, nmse_std: f64, seeds: usize },
    Seed { method: Method, k_max: usize, seed: u64, nmse: f64 },
}

/// Columns z-scored independently (population std, floored to 1).
pub fn zscore_columns(table: &Tensor) -> Tensor {
    let (rows, cols) = (table.shape()[0], table.shape()[1]);
    let mut out = table.data().to_vec();
    for c in 0..cols {
        let col = || (0..rows).map(|r| table.data()[r * cols + c]);
        let mean = col().sum::<f64>() / rows as f64;
        let var = col().map(|v| (v - mean) * (v - mean)).sum::<f64>() / rows as f64;
        let std = if var.sqrt() > 1e-12 { var.sqrt() } else { 1.0 };
        for r in 0..rows {
            out[r * cols + c] = (out[r * cols + c] - mean) / std;
        }
    }
    Tensor::new(table.shape(), out).expect("same shape")
}

/// Runs TOPF, RNDF and LRNF for every `k_max` on the windows of `values`
/// (`rows × D`). Reports are ordered by `k_max`, then TOPF, RNDF, LRNF.
pub fn reconstruction_benchmark(values: &Tensor, opts: &ReconOptions) -> AppResult<Vec<ReconstructionReport>> {
    if opts.seeds == 0 {
        return Err(AppError::Config("seeds must be at least 1".into()));
    }
    let windows = windows_from_columns(&zscore_columns(values), opts.len)?;
    let mut out = Vec::with_capacity(3 * opts.k_max.len());
    for &k in &opts.k_max {
        out.push(reconstruct_topf(&windows, k)?);
        out.push(reconstruct_rndf(&windows, k, opts.seeds, opts.seed)?);
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ k as u64);
        out.push(fit_lrnf(&windows, k, &opts.lrnf, &mut rng)?.report);
    }
    Ok(out)
}

/// Summary records followed by one record per RNDF seed, for each report.
pub fn recon_records(reports: &[ReconstructionReport], base_seed: u64) -> Vec<ReconRecord> {
    let mut out = Vec::new();
    for r in reports {
        out.push(ReconRecord::Summary {
            method: r.method,
            k_max: r.k_max,
            nmse: r.nmse,
            nmse_std: r.nmse_std,
            seeds: r.seeds(),
        });
        if r.method == Method::Rndf {
            for (s, &v) in r.per_seed.iter().enumerate() {
                out.push(ReconRecord::Seed { method: r.method, k_max: r.k_max, seed: base_seed + s as u64, nmse: v });
            }
        }
    }
    out
}

/// Tab-separated `method, k_max, mean_nmse, std` table with a header row.
pub fn recon_table(reports: &[ReconstructionReport]) -> String {
    let mut s = String::from("method\tk_max\tmean_nmse\tstd\n");
    for r in reports {
        s.push_str(&format!("{}\t{}\t{:.6e}\t{:.6e}\n", r.method.tag(), r.k_max, r.nmse, r.nmse_std));
    }
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleOptions {
    pub lengths: Vec<usize>,
    pub repeats: usize,
    pub batch: usize,
    /// Model template; `lookback` is replaced per length.
    pub model: ModelConfig,
    pub seed: u64,
}

impl Default for ScaleOptions {
    fn default() -> Self {
        ScaleOptions {
            lengths: vec![128, 256, 512, 1024],
            repeats: 5,
            batch: 16,
            model: ModelConfig {
                horizon: 96,
                channels: 7,
                patch_len: 16,
                stride: 8,
                n_t: 32,
                n_f: 16,
                d_m: 8,
                heads: 2,
                encoder_layers: 1,
                ffn_width: 16,
                lra_layers: 1,
                d_r: 4,
                dropout: 0.0,
                ..ModelConfig::default()
            },
            seed: 0,
        }
    }
}

/// Median seconds per stage of one forward+backward pass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTimes {
    pub prepare: f64,
    pub encoder: f64,
    pub lra: f64,
    pub head: f64,
    pub backward: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ScaleRecord {
    Length { lookback: usize, patches: usize, seq_len: usize, median_seconds: f64, stages: StageTimes },
    Skipped { lookback: usize, patches: usize, reason: String },
    Fit {
        slope: f64,
        intercept: f64,
        r2: f64,
        points: usize,
        /// Slope of each stage's median time against the look-back length.
        stage_slopes: StageTimes,
        stage_r2: StageTimes,
    },
}

/// Least-squares line `y = a·x + b` and its coefficient of determination.
pub fn linear_fit(xs: &[f64], ys: &[f64]) -> (f64, f64, f64) {
    let n = xs.len() as f64;
    let (mx, my) = (xs.iter().sum::<f64>() / n, ys.iter().sum::<f64>() / n);
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let a = sxy / sxx;
    let b = my - a * mx;
    let ss_res: f64 = xs.iter().zip(ys).map(|(x, y)| (y - a * x - b).powi(2)).sum();
    let ss_tot: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    let r2 = if ss_tot > 0.0 { 1.0 - ss_res / ss_tot } else { 1.0 };
    (a, b, r2)
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

struct Case {
    lookback: usize,
    patches: usize,
    seq_len: usize,
    model: Jtft,
    x: Tensor,
    target: Tensor,
    totals: Vec<f64>,
    stages: [Vec<f64>; 5],
}

impl Case {
    fn new(lookback: usize, opts: &ScaleOptions) -> Result<Self, String> {
        let cfg = ModelConfig { lookback, ..opts.model.clone() };
        let patches = patch_count(lookback, cfg.patch_len, cfg.stride);
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        let model = Jtft::new(cfg.clone(), &mut rng).map_err(|e| e.to_string())?;
        let mut random = |shape: &[usize]| {
            let n = shape.iter().product();
            Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).expect("shape")
        };
        let x = random(&[opts.batch, cfg.channels, lookback]);
        let target = random(&[opts.batch, cfg.channels, cfg.horizon]);
        let seq_len = {
            let mut tape = Tape::new();
            let (normed, _) = instance_normalize(&x).map_err(|e| e.to_string())?;
            let p = patchify(&normed, cfg.patch_len, cfg.stride).map_err(|e| e.to_string())?;
            let j = model.build_jtfr(&mut tape, &p).map_err(|e| e.to_string())?;
            tape.shape(j)[1]
        };
        Ok(Case { lookback, patches, seq_len, model, x, target, totals: Vec::new(), stages: Default::default() })
    }

    fn time(&mut self, keep: bool) -> AppResult<()> {
        let mut rng = rand::rngs::mock::StepRng::new(0, 0);
        let mut tape = Tape::new();
        let mut marks = Vec::with_capacity(4);
        let start = Instant::now();
        let y = self.model.forward_probed(&mut tape, &self.x, false, &mut rng, &mut |_: Stage| marks.push(Instant::now()))?;
        let t = tape.constant(&self.target);
        let loss = tape.mse(y, t)?;
        let fwd_end = Instant::now();
        tape.backward(loss, self.model.params_mut())?;
        let end = Instant::now();
        self.model.params_mut().zero_grads();
        if keep {
            self.totals.push((end - start).as_secs_f64());
            let mut prev = start;
            for (i, m) in marks.iter().enumerate() {
                self.stages[i].push((*m - prev).as_secs_f64());
                prev = *m;
            }
            if let Some(h) = self.stages[3].last_mut() {
                *h += (fwd_end - prev).as_secs_f64();
            }
            self.stages[4].push((end - fwd_end).as_secs_f64());
        }
        Ok(())
    }
}

/// Times forward+backward of one batch per look-back length. Repeats run
/// round-robin over the lengths so that drift in machine speed affects all
/// of them alike. Lengths the model cannot be built for are reported as
/// skipped; the fit uses the rest.
pub fn scale_benchmark(opts: &ScaleOptions) -> AppResult<Vec<ScaleRecord>> {
    if opts.repeats == 0 || opts.batch == 0 {
        return Err(AppError::Config("repeats and batch must be positive".into()));
    }
    let mut cases: Vec<Result<Case, ScaleRecord>> = opts
        .lengths
        .iter()
        .map(|&l| {
            Case::new(l, opts).map_err(|reason| ScaleRecord::Skipped {
                lookback: l,
                patches: patch_count(l, opts.model.patch_len, opts.model.stride),
                reason,
            })
        })
        .collect();
    // the first round warms up and is discarded
    for rep in 0..=opts.repeats {
        for case in cases.iter_mut().flatten() {
            case.time(rep > 0)?;
        }
    }
    let (mut xs, mut ys) = (Vec::new(), Vec::new());
    let mut per_stage: [Vec<f64>; 5] = Default::default();
    let mut out: Vec<ScaleRecord> = cases
        .into_iter()
        .map(|c| match c {
            Ok(c) => {
                let [p, e, r, h, b] = c.stages.map(median);
                let med = median(c.totals);
                xs.push(c.lookback as f64);
                ys.push(med);
                for (acc, v) in per_stage.iter_mut().zip([p, e, r, h, b]) {
                    acc.push(v);
                }
                ScaleRecord::Length {
                    lookback: c.lookback,
                    patches: c.patches,
                    seq_len: c.seq_len,
                    median_seconds: med,
                    stages: StageTimes { prepare: p, encoder: e, lra: r, head: h, backward: b },
                }
            }
            Err(skipped) => skipped,
        })
        .collect();
    if xs.len() >= 2 {
        let (slope, intercept, r2) = linear_fit(&xs, &ys);
        let fits = per_stage.map(|ys| linear_fit(&xs, &ys));
        let pick = |f: fn(&(f64, f64, f64)) -> f64| StageTimes {
            prepare: f(&fits[0]),
            encoder: f(&fits[1]),
            lra: f(&fits[2]),
            head: f(&fits[3]),
            backward: f(&fits[4]),
        };
        out.push(ScaleRecord::Fit {
            slope,
            intercept,
            r2,
            points: xs.len(),
            stage_slopes: pick(|f| f.0),
            stage_r2: pick(|f| f.2),
        });
    }
    Ok(out)
}
