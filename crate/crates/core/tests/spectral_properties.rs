use jtft_core::spectral::{
    build_cdct_matrix, constrain_frequencies, dct, idct, reconstruct_rndf, reconstruct_topf, DctBasis, FrequencySet,
};
use jtft_core::Tensor;
use proptest::prelude::*;

fn windows(n: usize) -> impl Strategy<Value = Tensor> {
    (1usize..6).prop_flat_map(move |count| {
        proptest::collection::vec(-5.0f64..5.0, count * n).prop_map(move |d| Tensor::new(&[count, n], d).unwrap())
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn parseval(z in proptest::collection::vec(-10.0f64..10.0, 1..200)) {
        let c = dct(&z).unwrap();
        let e: f64 = z.iter().map(|v| v * v).sum();
        let ec: f64 = c.iter().map(|v| v * v).sum();
        prop_assert!((e - ec).abs() <= 1e-9 * e.max(1.0));
        let back = idct(&c).unwrap();
        for (a, b) in back.iter().zip(&z) {
            prop_assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn truncations_only_remove_energy(w in windows(24), k in 1usize..24, seed in 0u64..1000) {
        let topf = reconstruct_topf(&w, k).unwrap();
        let rndf = reconstruct_rndf(&w, k, 3, seed).unwrap();
        for v in [topf.nmse].into_iter().chain(rndf.per_seed.iter().copied()) {
            prop_assert!((-1e-12..=1.0 + 1e-12).contains(&v), "{}", v);
        }
        prop_assert_eq!(rndf.seeds(), 3);
    }

    #[test]
    fn topf_is_non_increasing_in_k(w in windows(16)) {
        let mut prev = f64::INFINITY;
        for k in 1..=16 {
            let v = reconstruct_topf(&w, k).unwrap().nmse;
            prop_assert!(v <= prev + 1e-12);
            prev = v;
        }
        prop_assert!(prev < 1e-20);
    }

    #[test]
    fn constrained_frequencies_build_a_valid_basis(raw in proptest::collection::vec(-3.0f64..3.0, 1..10), n in 2usize..40) {
        let mut psi = raw;
        constrain_frequencies(&mut psi);
        let set = FrequencySet::new(psi.clone(), true).unwrap();
        let t = build_cdct_matrix(&set, n).unwrap();
        prop_assert_eq!(t.matrix().shape(), &[psi.len(), n][..]);
        let dc = 1.0 / (n as f64).sqrt();
        prop_assert!(t.matrix().data()[..n].iter().all(|v| (v - dc).abs() < 1e-15));
    }
}

#[test]
fn dct_rows_match_closed_form() {
    for n in [1usize, 3, 17, 100] {
        let b = DctBasis::new(n).unwrap();
        for k in 0..n {
            let s = if k == 0 { (1.0 / n as f64).sqrt() } else { (2.0 / n as f64).sqrt() };
            for j in 0..n {
                let want = s * (std::f64::consts::PI * (j as f64 + 0.5) * k as f64 / n as f64).cos();
                assert!((b.matrix().at(&[k, j]) - want).abs() < 1e-13, "n={n} k={k} j={j}");
            }
        }
    }
}
