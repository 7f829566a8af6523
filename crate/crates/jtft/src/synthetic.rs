//! Synthetic series used by the tests, benchmarks and examples.

use std::f64::consts::PI;

use chrono::{Duration, NaiveDate};
use jtft_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::data::Dataset;

/// Column names of the electricity-transformer layout.
pub const ETT_CHANNELS: [&str; 7] = ["HUFL", "HULL", "MUFL", "MULL", "LUFL", "LULL", "OT"];

/// Samples per day at 15-minute resolution.
pub const STEPS_PER_DAY: usize = 96;

/// Seven-channel series shaped like 15-minute transformer load data: daily
/// and weekly cycles, slow load drift, AR(1) noise and an oil temperature
/// that lags the loads.
pub fn ett_like(rows: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let day = STEPS_PER_DAY as f64;
    let loads = [(12.0, 4.0, 0.3), (4.0, 1.2, 0.9), (9.0, 3.0, 0.5), (2.5, 0.8, 1.4), (3.0, 1.5, 0.2), (1.0, 0.4, 1.1)];
    let mut drift = [0.0f64; 6];
    let mut noise = [0.0f64; 6];
    let mut temp = 20.0;
    let start = NaiveDate::from_ymd_opt(2016, 7, 1).and_then(|d| d.and_hms_opt(0, 0, 0)).expect("valid start");
    let mut values = Vec::with_capacity(rows * 7);
    let mut stamps = Vec::with_capacity(rows);
    for t in 0..rows {
        let tf = t as f64;
        let weekly = (2.0 * PI * tf / (7.0 * day)).sin();
        let mut total = 0.0;
        for (c, &(base, amp, phase)) in loads.iter().enumerate() {
            drift[c] = 0.999 * drift[c] + 0.02 * unit.sample(&mut rng);
            noise[c] = 0.8 * noise[c] + 0.15 * amp * unit.sample(&mut rng);
            let daily = (2.0 * PI * tf / day + phase).sin() + 0.3 * (4.0 * PI * tf / day + phase).sin();
            let v = base + amp * daily + 0.2 * amp * weekly + base * drift[c] + noise[c];
            total += v;
            values.push(v);
        }
        let target = 15.0 + 0.35 * total + 3.0 * (2.0 * PI * tf / (365.0 * day)).sin();
        temp += 0.01 * (target - temp) + 0.05 * unit.sample(&mut rng);
        values.push(temp);
        stamps.push((start + Duration::minutes(15 * t as i64)).format("%Y-%m-%d %H:%M:%S").to_string());
    }
    Dataset::from_columns("ETT-like", ETT_CHANNELS.iter().map(|s| s.to_string()).collect(), stamps, values)
        .expect("consistent synthetic table")
}

/// `count` windows `a·cos(ω·πn + φ)`, `n = 0..len`, with `a ~ U[0.5, 2)` and
/// `φ ~ U[0, 2π)`. Returns `[count, len]`.
pub fn cosine_windows<R: Rng + ?Sized>(count: usize, len: usize, omega: f64, rng: &mut R) -> Tensor {
    let mut data = Vec::with_capacity(count * len);
    for _ in 0..count {
        let (a, phi) = (rng.gen_range(0.5..2.0), rng.gen_range(0.0..2.0 * PI));
        data.extend((0..len).map(|j| a * (omega * PI * j as f64 + phi).cos()));
    }
    Tensor::new(&[count, len], data).expect("consistent shape")
}
