use super::*;
use crate::tensor::{finite_diff_gradcheck, GradcheckOptions};
use alloc::collections::BTreeSet;
use alloc::string::String;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn tiny() -> ModelConfig {
    ModelConfig {
        lookback: 32,
        horizon: 6,
        channels: 3,
        patch_len: 4,
        stride: 2,
        n_t: 4,
        n_f: 3,
        d_m: 8,
        heads: 2,
        encoder_layers: 1,
        ffn_width: 16,
        lra_layers: 1,
        d_r: 2,
        dropout: 0.2,
    }
}

fn random_input(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    uniform(rng, shape, 2.0)
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn assert_close(a: &[f64], b: &[f64], tol: f64) {
    assert_eq!(a.len(), b.len());
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        assert!((x - y).abs() <= tol, "index {i}: {x} vs {y}");
    }
}

/// Swaps channel axis 1 of a `[B, D, ...]` buffer according to `perm`.
fn permute_channels(data: &[f64], b: usize, d: usize, inner: usize, perm: &[usize]) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for bi in 0..b {
        for (new, &old) in perm.iter().enumerate() {
            let src = (bi * d + old) * inner;
            let dst = (bi * d + new) * inner;
            out[dst..dst + inner].copy_from_slice(&data[src..src + inner]);
        }
    }
    out
}

#[test]
fn default_config_shapes() {
    let cfg = ModelConfig::default();
    assert_eq!(cfg.head_dim(), 16);
    assert_eq!(cfg.patch_count(), 42);
    assert_eq!(cfg.seq_len(), 48);
    let model = Jtft::new(cfg.clone(), &mut rng(0)).unwrap();
    let x = random_input(&mut rng(1), &[7, 336]);
    let y = model.predict(&x).unwrap();
    assert_eq!(y.shape(), &[7, 96]);
    assert!(y.is_finite());

    let mut tape = Tape::new();
    let (normed, _) = instance_normalize(&x).unwrap();
    let patches = patchify(&normed, 16, 8).unwrap();
    let j = model.build_jtfr(&mut tape, &patches).unwrap();
    assert_eq!(tape.shape(j), &[7, 48, 16]);
    let z = model.encode(&mut tape, j, false, &mut rng(2)).unwrap();
    assert_eq!(tape.shape(z), &[7, 48, 128]);
}

#[test]
fn config_validation() {
    let ok = tiny();
    assert!(ok.validate().is_ok());
    let bad = [
        ModelConfig { n_t: 17, ..tiny() },
        ModelConfig { n_t: 0, ..tiny() },
        ModelConfig { heads: 3, ..tiny() },
        ModelConfig { lookback: 3, ..tiny() },
        ModelConfig { stride: 0, ..tiny() },
        ModelConfig { d_r: 0, ..tiny() },
        ModelConfig { dropout: 1.0, ..tiny() },
        ModelConfig { n_f: 17, ..tiny() },
    ];
    for cfg in bad {
        assert!(matches!(Jtft::new(cfg.clone(), &mut rng(0)), Err(Error::Config(_))), "{cfg:?}");
    }
    assert!(Jtft::new(ModelConfig { d_r: 0, lra_layers: 0, ..tiny() }, &mut rng(0)).is_ok());
}

#[test]
fn jtfr_layout() {
    let model = Jtft::new(tiny(), &mut rng(0)).unwrap();
    let x = random_input(&mut rng(1), &[2, 3, 32]);
    let (normed, _) = instance_normalize(&x).unwrap();
    let patches = patchify(&normed, 4, 2).unwrap();
    let mut tape = Tape::new();
    let j = model.build_jtfr(&mut tape, &patches).unwrap();
    assert_eq!(tape.shape(j), &[6, 7, 4]);
    let m = patches.count();
    let psi = model.params().get(model.psi().unwrap()).data().to_vec();
    for s in 0..6 {
        let src = &patches.patches.data()[s * m * 4..(s + 1) * m * 4];
        let got = &tape.value(j)[s * 28..(s + 1) * 28];
        // trailing rows are exactly the latest patches
        assert_eq!(&got[12..], &src[(m - 4) * 4..]);
        // leading rows are the cosine transform along the patch axis
        for (k, &f) in psi.iter().enumerate() {
            for p in 0..4 {
                let expect: f64 = (0..m).map(|i| crate::tensor::tape::cdct_entry(k, i, f, m).0 * src[i * 4 + p]).sum();
                assert!((got[k * 4 + p] - expect).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn jtfr_without_frequency_branch_is_latest_patches() {
    let cfg = ModelConfig { n_f: 0, lra_layers: 0, ..tiny() };
    let model = Jtft::new(cfg, &mut rng(0)).unwrap();
    assert!(model.psi().is_none());
    let x = random_input(&mut rng(1), &[3, 32]);
    let patches = patchify(&instance_normalize(&x).unwrap().0, 4, 2).unwrap();
    let mut tape = Tape::new();
    let j = model.build_jtfr(&mut tape, &patches).unwrap();
    assert_eq!(tape.shape(j), &[3, 4, 4]);
    let m = patches.count();
    for s in 0..3 {
        let src = &patches.patches.data()[(s * m + m - 4) * 4..(s + 1) * m * 4];
        assert_eq!(&tape.value(j)[s * 16..(s + 1) * 16], src);
    }
    assert_eq!(model.predict(&x).unwrap().shape(), &[3, 6]);
}

#[test]
fn constant_series_give_zero_frequency_rows() {
    let model = Jtft::new(tiny(), &mut rng(0)).unwrap();
    let x = Tensor::full(&[3, 32], 4.5);
    let patches = patchify(&instance_normalize(&x).unwrap().0, 4, 2).unwrap();
    let mut tape = Tape::new();
    let j = model.build_jtfr(&mut tape, &patches).unwrap();
    assert!(tape.value(j).iter().all(|v| v.abs() < 1e-12));
    // the head output is scaled by the std floor, so the forecast stays at the constant
    let y = model.predict(&x).unwrap();
    assert!(y.data().iter().all(|v| (v - 4.5).abs() < 1e-3));
}

#[test]
fn sequence_length_is_independent_of_lookback() {
    for l in [128, 1024] {
        let cfg = ModelConfig {
            lookback: l,
            patch_len: 16,
            stride: 8,
            n_t: 8,
            n_f: 4,
            ..tiny()
        };
        let model = Jtft::new(cfg, &mut rng(0)).unwrap();
        let x = random_input(&mut rng(1), &[1, 3, l]);
        let patches = patchify(&instance_normalize(&x).unwrap().0, 16, 8).unwrap();
        let mut tape = Tape::new();
        let j = model.build_jtfr(&mut tape, &patches).unwrap();
        assert_eq!(tape.shape(j), &[3, 12, 16]);
        let mut probe_count = 0;
        let y = model.forward_probed(&mut tape, &x, false, &mut rng(2), &mut |_| probe_count += 1).unwrap();
        assert_eq!(tape.shape(y), &[1, 3, 6]);
        assert_eq!(probe_count, 4);
    }
}

#[test]
fn encoder_is_channel_equivariant() {
    let model = Jtft::new(tiny(), &mut rng(3)).unwrap();
    let x = random_input(&mut rng(4), &[3, 32]);
    let perm = [2, 0, 1];
    let xp = Tensor::new(&[3, 32], permute_channels(x.data(), 1, 3, 32, &perm)).unwrap();
    let encode = |x: &Tensor| {
        let mut tape = Tape::new();
        let patches = patchify(&instance_normalize(x).unwrap().0, 4, 2).unwrap();
        let j = model.build_jtfr(&mut tape, &patches).unwrap();
        let z = model.encode(&mut tape, j, false, &mut rng(0)).unwrap();
        tape.tensor(z)
    };
    let (z, zp) = (encode(&x), encode(&xp));
    assert_eq!(zp.data(), permute_channels(z.data(), 1, 3, 7 * 8, &perm).as_slice());

    // the cross-channel layer uses channel-specific distribution rows
    let (y, yp) = (model.predict(&x).unwrap(), model.predict(&xp).unwrap());
    let permuted_back = permute_channels(y.data(), 1, 3, 6, &perm);
    let gap = yp.data().iter().zip(&permuted_back).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(gap > 1e-6, "LRA output unexpectedly equivariant ({gap})");

    let ci = Jtft::new(ModelConfig { lra_layers: 0, ..tiny() }, &mut rng(3)).unwrap();
    let (y, yp) = (ci.predict(&x).unwrap(), ci.predict(&xp).unwrap());
    assert_close(yp.data(), &permute_channels(y.data(), 1, 3, 6, &perm), 1e-12);
}

#[test]
fn empty_encoder_is_the_embedding() {
    let model = Jtft::new(ModelConfig { encoder_layers: 0, ..tiny() }, &mut rng(0)).unwrap();
    let x = random_input(&mut rng(1), &[3, 32]);
    let patches = patchify(&instance_normalize(&x).unwrap().0, 4, 2).unwrap();
    let mut tape = Tape::new();
    let j = model.build_jtfr(&mut tape, &patches).unwrap();
    let e = model.embed(&mut tape, j).unwrap();
    let z = model.encode(&mut tape, j, true, &mut rng(0)).unwrap();
    assert_eq!(tape.value(e), tape.value(z));
}

fn zero_param(model: &mut Jtft, name: &str) {
    let id = model.params().find(name).unwrap_or_else(|| panic!("{name}"));
    model.params_mut().get_mut(id).data_mut().fill(0.0);
}

fn layer_norm_rows(x: &[f64], w: usize) -> Vec<f64> {
    x.chunks_exact(w)
        .flat_map(|r| {
            let m = r.iter().sum::<f64>() / w as f64;
            let v = r.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / w as f64;
            r.iter().map(move |a| (a - m) / (v + crate::tensor::tape::LAYER_NORM_EPS).sqrt()).collect::<Vec<_>>()
        })
        .collect()
}

#[test]
fn lra_with_silenced_paths_is_layer_norm() {
    let mut model = Jtft::new(tiny(), &mut rng(5)).unwrap();
    zero_param(&mut model, "lra.0.distribute");
    let z = random_input(&mut rng(6), &[2, 3, 7, 8]);
    let mut tape = Tape::new();
    let zv = tape.constant(&z);
    let out = model.lra_layer(&mut tape, 0, zv).unwrap();
    assert_eq!(tape.shape(out), &[2, 3, 7, 8]);

    // W_e = 0: the layer is LayerNorm followed by the residual MLP
    let ln = layer_norm_rows(z.data(), 8);
    let mut t2 = Tape::new();
    let x = t2.constant(&Tensor::new(&[2, 3, 7, 8], ln.clone()).unwrap());
    let mlp = model.lra_layers()[0].mlp;
    let h = mlp.fc1.apply(&mut t2, model.params(), x).unwrap();
    let h = t2.gelu(h);
    let m = mlp.fc2.apply(&mut t2, model.params(), h).unwrap();
    let s = t2.add(x, m).unwrap();
    assert_close(tape.value(out), &layer_norm_rows(t2.value(s), 8), 1e-9);

    for name in ["lra.0.mlp.fc2.weight", "lra.0.mlp.fc2.bias", "lra.0.kv.weight", "lra.0.out.weight", "lra.0.router"] {
        zero_param(&mut model, name);
    }
    let mut tape = Tape::new();
    let zv = tape.constant(&z);
    let out = model.lra_layer(&mut tape, 0, zv).unwrap();
    assert_close(tape.value(out), &ln, 1e-6);
}

#[test]
fn single_channel_lra_is_well_defined() {
    let model = Jtft::new(ModelConfig { channels: 1, d_r: 1, ..tiny() }, &mut rng(0)).unwrap();
    let y = model.predict(&random_input(&mut rng(1), &[2, 1, 32])).unwrap();
    assert_eq!(y.shape(), &[2, 1, 6]);
    assert!(y.is_finite());
}

#[test]
fn head_maps_zero_latent_to_means() {
    let mut model = Jtft::new(tiny(), &mut rng(0)).unwrap();
    zero_param(&mut model, "head.bias");
    let stats = NormStats { shape: vec![1, 3], mean: vec![1.0, -2.0, 3.5], std: vec![2.0, 3.0, 4.0] };
    let mut tape = Tape::new();
    let z = tape.constant(&Tensor::zeros(&[1, 3, 7, 8]));
    let y = model.head(&mut tape, z, &stats, false, &mut rng(0)).unwrap();
    assert_eq!(tape.shape(y), &[1, 3, 6]);
    let expect: Vec<f64> = [1.0, -2.0, 3.5].iter().flat_map(|&m| [m; 6]).collect();
    assert_eq!(tape.value(y), expect.as_slice());
}

#[test]
fn batched_forward_matches_single_windows() {
    let model = Jtft::new(tiny(), &mut rng(7)).unwrap();
    let x = random_input(&mut rng(8), &[3, 3, 32]);
    let y = model.predict(&x).unwrap();
    for b in 0..3 {
        let single = Tensor::new(&[3, 32], x.data()[b * 96..(b + 1) * 96].to_vec()).unwrap();
        assert_close(&y.data()[b * 18..(b + 1) * 18], model.predict(&single).unwrap().data(), 1e-12);
    }
    assert!(matches!(model.predict(&Tensor::zeros(&[3, 31])), Err(Error::Dimension(_))));
}

#[test]
fn training_forward_is_seeded() {
    let model = Jtft::new(tiny(), &mut rng(0)).unwrap();
    assert_eq!(model, Jtft::new(tiny(), &mut rng(0)).unwrap());
    let x = random_input(&mut rng(1), &[2, 3, 32]);
    let run = |seed| {
        let mut tape = Tape::new();
        let y = model.forward(&mut tape, &x, true, &mut rng(seed)).unwrap();
        tape.tensor(y)
    };
    assert_eq!(run(9), run(9));
    assert_ne!(run(9), run(10));
    assert_ne!(run(9).data(), model.predict(&x).unwrap().data());
}

#[test]
fn rebinding_params() {
    let model = Jtft::new(tiny(), &mut rng(0)).unwrap();
    let x = random_input(&mut rng(1), &[3, 32]);
    let rebound = Jtft::from_params(tiny(), model.params().clone()).unwrap();
    assert_eq!(rebound.predict(&x).unwrap(), model.predict(&x).unwrap());
    assert!(matches!(
        Jtft::from_params(ModelConfig { d_m: 4, ..tiny() }, model.params().clone()),
        Err(Error::Parameter(_))
    ));
    assert!(matches!(
        Jtft::from_params(ModelConfig { lra_layers: 0, ..tiny() }, model.params().clone()),
        Err(Error::Parameter(_))
    ));
}

#[test]
fn frequency_init_picks_dominant_patch_axis_frequency() {
    // each patch is shifted along a cosine in the patch index at grid k=5 of M=16
    let mut model = Jtft::new(ModelConfig { n_f: 2, ..tiny() }, &mut rng(0)).unwrap();
    let m = 16;
    let mut data = Vec::new();
    for _ in 0..3 {
        data.extend((0..32).map(|t| libm::cos(core::f64::consts::PI * (t as f64 / 2.0 + 0.5) * 5.0 / m as f64)));
    }
    let x = Tensor::new(&[1, 3, 32], data).unwrap();
    model.init_frequencies(&x).unwrap();
    let psi = model.params().get(model.psi().unwrap()).data();
    assert_eq!(psi, &[0.0, 5.0 / 16.0]);
}

#[test]
fn end_to_end_gradients_on_tiny_config() {
    let mut model = Jtft::new(tiny(), &mut rng(11)).unwrap();
    // move the frequencies off the grid so the psi derivative is generic
    let psi = model.psi().unwrap();
    model.params_mut().get_mut(psi).data_mut().copy_from_slice(&[0.0, 0.23, 0.61]);
    let x = random_input(&mut rng(12), &[2, 3, 32]);
    let target = random_input(&mut rng(13), &[2, 3, 6]);
    let mut params = model.params().clone();
    let report = finite_diff_gradcheck(
        |tape, store| {
            let m = Jtft::from_params(tiny(), store.clone())?;
            let y = m.forward(tape, &x, false, &mut rng(0))?;
            let t = tape.constant(&target);
            tape.mse(y, t)
        },
        &mut params,
        &GradcheckOptions::default(),
    )
    .unwrap();
    assert!(report.passed(), "worst {:?}", report.worst());
    assert!(report.max_rel_err < 1e-4);
    let groups: BTreeSet<String> =
        report.params.iter().map(|p| String::from(p.name.split('.').next().unwrap())).collect();
    let expect: BTreeSet<String> = ["psi", "embed", "encoder", "lra", "head"].into_iter().map(String::from).collect();
    assert_eq!(groups, expect);
    assert_eq!(report.params.len(), model.params().len());
}
