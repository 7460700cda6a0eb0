use beamcast::channel::{generate_dataset, Dataset, ScenarioConfig};
use beamcast::gan::{GanConfig, Generator};
use beamcast::metrics::{benchmark_runtime, evaluate, spectral_efficiency, zero_padding_baseline, MetricsError};
use beamcast::trainer::{train, TrainConfig, TrainState};
use beamcast::wmmse::{label_dataset, WmmseConfig};

fn labeled(n: usize, seed: u64) -> Dataset {
    let cfg = ScenarioConfig {
        nt_high: 16,
        nt_low: 4,
        n_users: 2,
        ..ScenarioConfig::default()
    };
    let mut ds = generate_dataset(&cfg, n, (4, 1), seed).unwrap();
    label_dataset(&mut ds, &WmmseConfig::from_snr_db(cfg.snr_db)).unwrap();
    ds
}

fn model() -> GanConfig {
    GanConfig::for_dims(4, 16, 2).narrowed(16)
}

#[test]
fn evaluation_scores_every_test_sample_against_both_baselines() {
    let ds = labeled(15, 4);
    let wmmse = WmmseConfig::from_snr_db(10.0);
    let gen = Generator::<f64>::new(&model(), 1).unwrap();
    let report = evaluate(&ds, &gen, &wmmse, 9).unwrap();
    assert_eq!(report.samples.len(), ds.test.len());
    assert_eq!((report.nt_high, report.nt_low), (16, 4));
    for row in &report.samples {
        let s = &ds.samples[row.index];
        let v_real = s.v_real.as_ref().unwrap();
        assert_eq!(row.se_wmmse, spectral_efficiency(&s.h_real, v_real, wmmse.noise_var).1);
        let padded = zero_padding_baseline(s.v_low.as_ref().unwrap(), 16, ds.config.subset, 1.0).unwrap();
        assert_eq!(row.se_zero_padding, spectral_efficiency(&s.h_real, &padded, wmmse.noise_var).1);
        assert!(row.se_generated.is_finite() && row.nmse_db.is_finite());
    }
    let mean = report.samples.iter().map(|r| r.se_wmmse).sum::<f64>() / report.samples.len() as f64;
    assert!((report.se_wmmse.mean - mean).abs() < 1e-12);
    assert_eq!(evaluate(&ds, &gen, &wmmse, 9).unwrap(), report);
}

#[test]
fn evaluation_requires_labels() {
    let cfg = ScenarioConfig {
        nt_high: 16,
        nt_low: 4,
        n_users: 2,
        ..ScenarioConfig::default()
    };
    let ds = generate_dataset(&cfg, 5, (4, 1), 1).unwrap();
    let gen = Generator::<f64>::new(&model(), 1).unwrap();
    let err = evaluate(&ds, &gen, &WmmseConfig::default(), 0).unwrap_err();
    assert!(matches!(err, MetricsError::Unlabeled { .. }));
}

#[test]
fn training_improves_the_generated_beamformers() {
    let ds = labeled(40, 12);
    let wmmse = WmmseConfig::from_snr_db(10.0);
    let cfg = TrainConfig {
        epochs: 4,
        seed: 3,
        ..TrainConfig::default()
    };
    let mut state = TrainState::<f64>::new(&model(), &cfg).unwrap();
    let before = evaluate(&ds, &state.gen, &wmmse, cfg.eval_seed).unwrap();
    let trace = train(&ds, &mut state, &cfg).unwrap();
    let after = evaluate(&ds, &state.gen, &wmmse, cfg.eval_seed).unwrap();
    assert!(trace.all_finite());
    assert!(after.pooled_nmse_db < before.pooled_nmse_db, "{} vs {}", after.pooled_nmse_db, before.pooled_nmse_db);
}

#[test]
fn runtime_table_is_consistent() {
    let ds = labeled(4, 2);
    let gen = Generator::<f32>::new(&model(), 1).unwrap();
    let wmmse = WmmseConfig::from_snr_db(10.0);
    assert_eq!(
        benchmark_runtime(&ds.samples, &wmmse, &gen, 4).unwrap_err(),
        MetricsError::TooFewReps(4)
    );
    let t = benchmark_runtime(&ds.samples, &wmmse, &gen, 5).unwrap();
    assert_eq!((t.nt_high, t.nt_low, t.n_samples, t.reps), (16, 4, 4, 5));
    for v in [t.full_wmmse_s, t.low_wmmse_s, t.forward_s, t.pipeline_s] {
        assert!(v > 0.0);
    }
    assert_eq!(t.ratio, t.pipeline_s / t.full_wmmse_s);
}
