use beamcast::autodiff::{GradMode, Graph, Padding, Tensor};
use beamcast::channel::{generate_dataset, ScenarioConfig, SubsetMode};
use beamcast::io::{decode_dataset, encode_dataset};
use beamcast::linalg::{power, ComplexMatrix, C64};
use beamcast::metrics::zero_padding_baseline;
use beamcast::wmmse::{wmmse_solve, WmmseConfig};
use proptest::prelude::*;

fn complex_matrix(rows: usize, cols: usize) -> impl Strategy<Value = ComplexMatrix> {
    prop::collection::vec(-2.0f64..2.0, 2 * rows * cols)
        .prop_map(move |v| ComplexMatrix::from_fn(rows, cols, |r, c| C64::new(v[2 * (r * cols + c)], v[2 * (r * cols + c) + 1])))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn dataset_encoding_round_trips(
        nt_low in prop::sample::select(vec![1usize, 2, 4]),
        factor in prop::sample::select(vec![1usize, 2, 4]),
        users in 1usize..4,
        n in 2usize..6,
        seed in any::<u64>(),
    ) {
        let cfg = ScenarioConfig { nt_low, nt_high: nt_low * factor, n_users: users, ..ScenarioConfig::default() };
        let ds = generate_dataset(&cfg, n, (1, 1), seed).unwrap();
        let bytes = encode_dataset(&ds).unwrap();
        prop_assert_eq!(decode_dataset(&bytes).unwrap(), ds);
    }

    #[test]
    fn wmmse_respects_the_power_budget(h in complex_matrix(6, 3), p in 0.1f64..10.0, snr in -5.0f64..25.0) {
        prop_assume!(power(&h) > 1e-6);
        let cfg = WmmseConfig { power: p, ..WmmseConfig::from_snr_db(snr) };
        let cfg = WmmseConfig { noise_var: p * cfg.noise_var, ..cfg };
        let out = wmmse_solve(&h, &cfg, None).unwrap();
        prop_assert!(out.beam.transmit_power() <= p * (1.0 + 1e-9));
        for w in out.trace.windows(2) {
            prop_assert!(w[1] >= w[0] - 1e-9);
        }
    }

    #[test]
    fn zero_padding_meets_the_budget(v in complex_matrix(4, 2), p in 0.1f64..10.0, strided in any::<bool>()) {
        prop_assume!(power(&v) > 1e-9);
        let mode = if strided { SubsetMode::Strided } else { SubsetMode::Contiguous };
        let padded = zero_padding_baseline(&v, 16, mode, p).unwrap();
        prop_assert!((power(&padded) - p).abs() <= 1e-12 * p);
    }

    #[test]
    fn transposed_convolution_is_the_adjoint(
        h in 2usize..7,
        w in 1usize..5,
        cin in 1usize..3,
        cout in 1usize..3,
        stride in 1usize..3,
        seed in any::<u64>(),
    ) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut rand = |shape: &[usize]| Tensor::<f64>::from_fn(shape, |_| rng.random_range(-1.0..1.0));
        let x = rand(&[h, w, cin]);
        let k = rand(&[3, 3, cin, cout]);
        let mut g = Graph::new(GradMode::FirstOrder);
        let (xv, kv) = (g.constant(x.clone()), g.constant(k.clone()));
        let y = g.conv2d(xv, kv, None, (stride, 1), Padding::Same).unwrap();
        let r = rand(g.shape(y));
        let rv = g.constant(r.clone());
        let xt = g.conv2d_transpose(rv, kv, None, (stride, 1), Padding::Same).unwrap();
        prop_assume!(g.shape(xt) == x.shape());
        let lhs: f64 = g.value(y).data().iter().zip(r.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data().iter().zip(g.value(xt).data()).map(|(a, b)| a * b).sum();
        prop_assert!((lhs - rhs).abs() <= 1e-10 * (1.0 + lhs.abs()));
    }
}
