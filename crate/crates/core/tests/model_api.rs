use jtft_core::model::{patch_count, Jtft, ModelConfig};
use jtft_core::{Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small() -> ModelConfig {
    ModelConfig {
        lookback: 64,
        horizon: 8,
        channels: 4,
        patch_len: 8,
        stride: 4,
        n_t: 6,
        n_f: 5,
        d_m: 16,
        heads: 4,
        encoder_layers: 2,
        ffn_width: 32,
        lra_layers: 2,
        d_r: 3,
        dropout: 0.1,
    }
}

#[test]
fn default_configuration_forecasts_one_window() {
    let cfg = ModelConfig::default();
    assert_eq!(cfg.patch_count(), 42);
    assert_eq!(cfg.seq_len(), 48);
    let model = Jtft::new(cfg.clone(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let enc = cfg.encoder_layers;
    assert_eq!(model.params().len(), 1 + 3 + 16 * enc + 13 * cfg.lra_layers + 2);
    let x = Tensor::new(&[7, 336], (0..7 * 336).map(|i| ((i % 96) as f64 / 15.0).sin()).collect()).unwrap();
    let y = model.predict(&x).unwrap();
    assert_eq!(y.shape(), &[7, 96]);
    assert!(y.is_finite());
}

#[test]
fn constant_input_forecasts_its_level() {
    let model = Jtft::new(small(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let x = Tensor::full(&[4, 64], 3.25);
    let y = model.predict(&x).unwrap();
    assert!(y.data().iter().all(|v| (v - 3.25).abs() < 1e-3), "{:?}", &y.data()[..4]);
}

#[test]
fn saved_parameters_rebuild_the_same_model() {
    let cfg = small();
    let a = Jtft::new(cfg.clone(), &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    let b = Jtft::from_params(cfg, a.params().clone()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = Tensor::new(&[2, 4, 64], (0..512).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
    assert_eq!(a.predict(&x).unwrap(), b.predict(&x).unwrap());
}

#[test]
fn training_mode_uses_dropout_and_inference_does_not() {
    let model = Jtft::new(small(), &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = Tensor::new(&[4, 64], (0..256).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
    let run = |training: bool, seed: u64| {
        let mut tape = Tape::new();
        let y = model.forward(&mut tape, &x, training, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        tape.tensor(y)
    };
    assert_eq!(run(false, 0), run(false, 1));
    assert_eq!(run(true, 7), run(true, 7));
    assert_ne!(run(true, 7), run(true, 8));
    assert_eq!(run(false, 0), model.predict(&x).unwrap());
}

#[test]
fn internal_length_does_not_grow_with_lookback() {
    for lookback in [64, 128, 512] {
        let cfg = ModelConfig { lookback, ..small() };
        assert!(patch_count(lookback, 8, 4) >= cfg.n_t);
        let model = Jtft::new(cfg.clone(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(model.config().seq_len(), 11);
        let x = Tensor::full(&[4, lookback], 1.0);
        assert_eq!(model.predict(&x).unwrap().shape(), &[4, 8]);
    }
}

#[test]
fn invalid_configurations_are_rejected() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for cfg in [
        ModelConfig { n_t: 17, ..small() },
        ModelConfig { n_f: 17, ..small() },
        ModelConfig { heads: 3, ..small() },
        ModelConfig { lookback: 4, ..small() },
    ] {
        assert!(Jtft::new(cfg, &mut rng).is_err());
    }
    let model = Jtft::new(small(), &mut rng).unwrap();
    assert!(model.predict(&Tensor::zeros(&[3, 64])).is_err());
    assert!(model.predict(&Tensor::zeros(&[4, 63])).is_err());
}
