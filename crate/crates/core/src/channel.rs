//! Synthetic narrow-band mmWave channels for a multi-antenna base station
//! and single-antenna users.
//!
//! Each user sees `L` plane-wave paths; the first is a line-of-sight path
//! toward the user's drop position, the rest arrive from uniformly random
//! directions. Per-sample channels are normalized by their largest entry,
//! corrupted with a calibrated estimation error, and subsampled onto the
//! low-dimensional antenna set.

use std::f64::consts::PI;

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{max_abs, ComplexMatrix, C64};

const SPEED_OF_LIGHT: f64 = 299_792_458.0;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ChannelError {
    #[error("invalid array geometry: {0}")]
    Geometry(String),
    #[error("invalid scenario: {0}")]
    Scenario(String),
    #[error("cannot normalize an all-zero channel")]
    ZeroChannel,
    #[error("cannot select {n_low} of {n_high} antennas with a uniform stride")]
    Indivisible { n_high: usize, n_low: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Layout {
    Linear,
    Planar { rows: usize, cols: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ArrayGeometry {
    pub n_antennas: usize,
    pub spacing_wavelengths: f64,
    pub layout: Layout,
}

impl ArrayGeometry {
    pub fn ula(n_antennas: usize, spacing_wavelengths: f64) -> Result<Self, ChannelError> {
        let g = ArrayGeometry {
            n_antennas,
            spacing_wavelengths,
            layout: Layout::Linear,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn upa(rows: usize, cols: usize, spacing_wavelengths: f64) -> Result<Self, ChannelError> {
        let g = ArrayGeometry {
            n_antennas: rows * cols,
            spacing_wavelengths,
            layout: Layout::Planar { rows, cols },
        };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<(), ChannelError> {
        if self.n_antennas == 0 {
            return Err(ChannelError::Geometry("at least one antenna required".into()));
        }
        if !(self.spacing_wavelengths > 0.0 && self.spacing_wavelengths.is_finite()) {
            return Err(ChannelError::Geometry(format!(
                "spacing must be positive, got {}",
                self.spacing_wavelengths
            )));
        }
        if let Layout::Planar { rows, cols } = self.layout {
            if rows * cols != self.n_antennas {
                return Err(ChannelError::Geometry(format!(
                    "{rows}x{cols} planar layout does not hold {} antennas",
                    self.n_antennas
                )));
            }
        }
        Ok(())
    }
}

/// Steering vector of the array toward `(azimuth, elevation)`.
///
/// Linear: `a_m = exp(j·2π·d·m·sin θ·cos φ)`. Planar arrays are separable,
/// with the column index along the azimuth term and the row index along
/// `sin φ`.
pub fn array_response(geom: &ArrayGeometry, azimuth: f64, elevation: f64) -> DVector<C64> {
    let d = geom.spacing_wavelengths;
    let u = 2.0 * PI * d * azimuth.sin() * elevation.cos();
    match geom.layout {
        Layout::Linear => DVector::from_fn(geom.n_antennas, |m, _| C64::from_polar(1.0, u * m as f64)),
        Layout::Planar { cols, .. } => {
            let v = 2.0 * PI * d * elevation.sin();
            DVector::from_fn(geom.n_antennas, |m, _| {
                let (r, c) = (m / cols, m % cols);
                C64::from_polar(1.0, u * c as f64 + v * r as f64)
            })
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Path {
    pub gain: C64,
    pub azimuth: f64,
    pub elevation: f64,
}

/// Multipath description of one user's channel.
#[derive(Debug, Clone, PartialEq)]
pub struct PathSet {
    pub paths: Vec<Path>,
    /// Linear path loss `ρ`.
    pub path_loss: f64,
    /// User position in meters, base station at the origin.
    pub position: [f64; 3],
}

impl PathSet {
    pub fn len(&self) -> usize {
        self.paths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.paths.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SubsetMode {
    /// Every `N_high / N_low`-th antenna starting at 0.
    Strided,
    /// The first `N_low` antennas.
    Contiguous,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenarioConfig {
    pub n_users: usize,
    pub nt_high: usize,
    pub nt_low: usize,
    pub n_paths: usize,
    pub spacing_wavelengths: f64,
    pub carrier_hz: f64,
    pub bandwidth_hz: f64,
    pub snr_db: f64,
    /// Channel estimation error in dB; `None` means perfect estimates.
    pub cee_db: Option<f64>,
    /// User-drop rectangle `[depth, width]` in meters in front of the array.
    pub region_m: [f64; 2],
    pub min_distance_m: f64,
    pub bs_height_m: f64,
    /// Amplitude factor applied to the line-of-sight path gain.
    pub los_gain: f64,
    pub subset: SubsetMode,
    pub seed: u64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            n_users: 4,
            nt_high: 32,
            nt_low: 8,
            n_paths: 5,
            spacing_wavelengths: 0.5,
            carrier_hz: 60e9,
            bandwidth_hz: 50e6,
            snr_db: 10.0,
            cee_db: Some(-20.0),
            region_m: [100.0, 100.0],
            min_distance_m: 5.0,
            bs_height_m: 10.0,
            los_gain: 2.0,
            subset: SubsetMode::Strided,
            seed: 0,
        }
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<(), ChannelError> {
        let bad = |m: String| Err(ChannelError::Scenario(m));
        if self.n_users == 0 || self.nt_high == 0 || self.nt_low == 0 || self.n_paths == 0 {
            return bad("user, antenna and path counts must be positive".into());
        }
        if self.nt_low > self.nt_high || !self.nt_high.is_multiple_of(self.nt_low) {
            return bad(format!(
                "nt_low ({}) must divide nt_high ({})",
                self.nt_low, self.nt_high
            ));
        }
        let positive = [
            self.spacing_wavelengths,
            self.carrier_hz,
            self.bandwidth_hz,
            self.region_m[0],
            self.region_m[1],
            self.min_distance_m,
            self.bs_height_m,
            self.los_gain,
        ];
        if positive.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return bad("spacing, frequencies, region, distances and LOS gain must be positive".into());
        }
        if !self.snr_db.is_finite() || self.cee_db.is_some_and(|c| !c.is_finite()) {
            return bad("SNR and CEE must be finite".into());
        }
        Ok(())
    }

    pub fn high_geometry(&self) -> ArrayGeometry {
        ArrayGeometry {
            n_antennas: self.nt_high,
            spacing_wavelengths: self.spacing_wavelengths,
            layout: Layout::Linear,
        }
    }

    /// Noise variance for unit transmit power at the configured SNR.
    pub fn noise_variance(&self, power: f64) -> f64 {
        power / 10f64.powf(self.snr_db / 10.0)
    }
}

fn complex_normal(rng: &mut impl Rng) -> C64 {
    let re: f64 = StandardNormal.sample(rng);
    let im: f64 = StandardNormal.sample(rng);
    C64::new(re, im) * std::f64::consts::FRAC_1_SQRT_2
}

/// Draws one user's multipath set.
///
/// Gains are unit-variance circular complex Gaussian, the first (line of
/// sight) scaled by `los_gain`. Path loss follows the free-space law at
/// the carrier frequency.
pub fn synth_paths(cfg: &ScenarioConfig, rng: &mut impl Rng) -> PathSet {
    let x = cfg.min_distance_m + rng.random::<f64>() * cfg.region_m[0];
    let y = (rng.random::<f64>() - 0.5) * cfg.region_m[1];
    let ground = x.hypot(y);
    let distance = ground.hypot(cfg.bs_height_m);
    let wavelength = SPEED_OF_LIGHT / cfg.carrier_hz;
    let path_loss = (4.0 * PI * distance / wavelength).powi(2);

    let mut paths = Vec::with_capacity(cfg.n_paths);
    paths.push(Path {
        gain: complex_normal(rng) * cfg.los_gain,
        azimuth: y.atan2(x),
        elevation: -(cfg.bs_height_m.atan2(ground)),
    });
    for _ in 1..cfg.n_paths {
        paths.push(Path {
            gain: complex_normal(rng),
            azimuth: rng.random_range(-PI..=PI),
            elevation: rng.random_range(-PI / 2.0..=PI / 2.0),
        });
    }
    PathSet {
        paths,
        path_loss,
        position: [x, y, -cfg.bs_height_m],
    }
}

/// `h = √(N/ρ) · Σ_l α_l · a(θ_l, φ_l)`.
pub fn assemble_channel(paths: &PathSet, geom: &ArrayGeometry) -> DVector<C64> {
    let scale = (geom.n_antennas as f64 / paths.path_loss).sqrt();
    let mut h = DVector::zeros(geom.n_antennas);
    for p in &paths.paths {
        h += array_response(geom, p.azimuth, p.elevation) * p.gain;
    }
    h * C64::new(scale, 0.0)
}

/// `H / max |H_ij|`.
pub fn normalize_channel(h: &ComplexMatrix) -> Result<ComplexMatrix, ChannelError> {
    let m = max_abs(h);
    if m == 0.0 || !m.is_finite() {
        return Err(ChannelError::ZeroChannel);
    }
    Ok(h.map(|z| z / m))
}

/// Adds white circular Gaussian error whose energy is exactly
/// `10^(cee_db/10)·‖H‖²`. `cee_db = -∞` returns `H` unchanged.
pub fn inject_cee(h: &ComplexMatrix, cee_db: f64, rng: &mut impl Rng) -> ComplexMatrix {
    if cee_db == f64::NEG_INFINITY {
        return h.clone();
    }
    let e = ComplexMatrix::from_fn(h.nrows(), h.ncols(), |_, _| complex_normal(rng));
    let e_energy: f64 = e.iter().map(|z| z.norm_sqr()).sum();
    let h_energy: f64 = h.iter().map(|z| z.norm_sqr()).sum();
    if e_energy == 0.0 || h_energy == 0.0 {
        return h.clone();
    }
    let ratio = 10f64.powf(cee_db / 10.0);
    let scale = (ratio * h_energy / e_energy).sqrt();
    h + e * C64::new(scale, 0.0)
}

/// Row indices of the low-dimensional antenna set.
pub fn subset_indices(n_high: usize, n_low: usize, mode: SubsetMode) -> Result<Vec<usize>, ChannelError> {
    if n_low == 0 || n_low > n_high {
        return Err(ChannelError::Indivisible { n_high, n_low });
    }
    match mode {
        SubsetMode::Contiguous => Ok((0..n_low).collect()),
        SubsetMode::Strided => {
            if !n_high.is_multiple_of(n_low) {
                return Err(ChannelError::Indivisible { n_high, n_low });
            }
            let stride = n_high / n_low;
            Ok((0..n_low).map(|i| i * stride).collect())
        }
    }
}

pub fn subsample_channel(h: &ComplexMatrix, n_low: usize, mode: SubsetMode) -> Result<ComplexMatrix, ChannelError> {
    let idx = subset_indices(h.nrows(), n_low, mode)?;
    Ok(h.select_rows(idx.iter()))
}

/// One user drop: full and subset channels, optionally WMMSE-labeled.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelSample {
    pub h_real: ComplexMatrix,
    pub h_low: ComplexMatrix,
    pub v_real: Option<ComplexMatrix>,
    pub v_low: Option<ComplexMatrix>,
    pub scenario_id: u64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub config: ScenarioConfig,
    pub samples: Vec<ChannelSample>,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    pub seed: u64,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn is_labeled(&self) -> bool {
        self.samples
            .iter()
            .all(|s| s.v_real.is_some() && s.v_low.is_some())
    }

    pub fn train_samples(&self) -> impl Iterator<Item = &ChannelSample> {
        self.train.iter().map(|&i| &self.samples[i])
    }

    pub fn test_samples(&self) -> impl Iterator<Item = &ChannelSample> {
        self.test.iter().map(|&i| &self.samples[i])
    }
}

/// SplitMix64 finalizer, used to derive independent per-item seeds.
pub fn mix_seed(master: u64, index: u64) -> u64 {
    let mut z = master ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Builds one normalized, error-corrupted sample from its own seed.
pub fn generate_sample(cfg: &ScenarioConfig, index: u64, seed: u64) -> Result<ChannelSample, ChannelError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let geom = cfg.high_geometry();
    let mut h = ComplexMatrix::zeros(cfg.nt_high, cfg.n_users);
    for k in 0..cfg.n_users {
        let paths = synth_paths(cfg, &mut rng);
        h.set_column(k, &assemble_channel(&paths, &geom));
    }
    let h = normalize_channel(&h)?;
    let h = match cfg.cee_db {
        Some(db) => inject_cee(&h, db, &mut rng),
        None => h,
    };
    let h_low = subsample_channel(&h, cfg.nt_low, cfg.subset)?;
    Ok(ChannelSample {
        h_real: h,
        h_low,
        v_real: None,
        v_low: None,
        scenario_id: index,
        seed,
    })
}

/// Worker count from `BEAMCAST_THREADS`, defaulting to the machine's parallelism.
pub fn worker_threads() -> usize {
    std::env::var("BEAMCAST_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Runs `f` on a pool capped at [`worker_threads`].
pub fn with_worker_pool<R: Send>(f: impl FnOnce() -> R + Send) -> R {
    match rayon::ThreadPoolBuilder::new()
        .num_threads(worker_threads())
        .build()
    {
        Ok(pool) => pool.install(f),
        Err(_) => f(),
    }
}

/// Generates `n_samples` independent drops and a random `train:test` split.
///
/// Every sample draws from its own seed derived from `seed`, so the result
/// does not depend on the number of worker threads.
pub fn generate_dataset(
    cfg: &ScenarioConfig,
    n_samples: usize,
    split: (u32, u32),
    seed: u64,
) -> Result<Dataset, ChannelError> {
    cfg.validate()?;
    if n_samples < 2 {
        return Err(ChannelError::Scenario("at least two samples are needed".into()));
    }
    if split.0 == 0 || split.1 == 0 {
        return Err(ChannelError::Scenario("both split parts must be positive".into()));
    }
    let samples = with_worker_pool(|| {
        (0..n_samples)
            .into_par_iter()
            .map(|i| generate_sample(cfg, i as u64, mix_seed(seed, i as u64)))
            .collect::<Result<Vec<_>, _>>()
    })?;

    let n_train = ((n_samples as u64 * split.0 as u64) as f64 / (split.0 + split.1) as f64).round() as usize;
    let n_train = n_train.clamp(1, n_samples - 1);
    let mut order: Vec<usize> = (0..n_samples).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, u64::MAX));
    for i in (1..n_samples).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
    let mut train = order[..n_train].to_vec();
    let mut test = order[n_train..].to_vec();
    train.sort_unstable();
    test.sort_unstable();

    let mut config = cfg.clone();
    config.seed = seed;
    Ok(Dataset {
        config,
        samples,
        train,
        test,
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: C64, b: C64, tol: f64) -> bool {
        (a - b).norm() < tol
    }

    #[test]
    fn broadside_response_is_all_ones() {
        for spacing in [0.1, 0.5, 1.3] {
            let g = ArrayGeometry::ula(6, spacing).unwrap();
            let a = array_response(&g, 0.0, 0.4);
            assert!(a.iter().all(|z| close(*z, C64::new(1.0, 0.0), 1e-15)));
        }
    }

    #[test]
    fn half_wavelength_endfire() {
        let g = ArrayGeometry::ula(2, 0.5).unwrap();
        let a = array_response(&g, PI / 2.0, 0.0);
        assert!(close(a[0], C64::new(1.0, 0.0), 1e-15));
        assert!(close(a[1], C64::new(-1.0, 0.0), 1e-15));
    }

    #[test]
    fn response_is_unit_modulus() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ula = ArrayGeometry::ula(16, 0.5).unwrap();
        let upa = ArrayGeometry::upa(4, 4, 0.1).unwrap();
        for _ in 0..100 {
            let az = rng.random_range(-PI..PI);
            let el = rng.random_range(-PI / 2.0..PI / 2.0);
            for g in [&ula, &upa] {
                let a = array_response(g, az, el);
                assert!(a.iter().all(|z| (z.norm() - 1.0).abs() < 1e-12));
                assert!((a.norm_squared() - 16.0).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn geometry_validation() {
        assert!(ArrayGeometry::ula(0, 0.5).is_err());
        assert!(ArrayGeometry::ula(4, 0.0).is_err());
        let bad = ArrayGeometry {
            n_antennas: 5,
            spacing_wavelengths: 0.5,
            layout: Layout::Planar { rows: 2, cols: 2 },
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn synth_paths_shape_and_determinism() {
        let cfg = ScenarioConfig::default();
        let a = synth_paths(&cfg, &mut ChaCha8Rng::seed_from_u64(5));
        let b = synth_paths(&cfg, &mut ChaCha8Rng::seed_from_u64(5));
        assert_eq!(a.len(), 5);
        assert_eq!(a, b);
        assert!(a.path_loss > 0.0);
        for p in &a.paths {
            assert!((-PI..=PI).contains(&p.azimuth));
            assert!((-PI / 2.0..=PI / 2.0).contains(&p.elevation));
        }
    }

    #[test]
    fn path_gains_have_unit_variance() {
        let cfg = ScenarioConfig {
            los_gain: 1.0,
            ..ScenarioConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut total = 0.0;
        let mut count = 0usize;
        while count < 10_000 {
            for p in synth_paths(&cfg, &mut rng).paths {
                total += p.gain.norm_sqr();
                count += 1;
            }
        }
        let mean = total / count as f64;
        assert!((mean - 1.0).abs() < 0.05, "E|α|² = {mean}");
    }

    #[test]
    fn single_path_channel_is_steering_vector() {
        let g = ArrayGeometry::ula(8, 0.5).unwrap();
        let paths = PathSet {
            paths: vec![Path {
                gain: C64::new(1.0, 0.0),
                azimuth: 0.3,
                elevation: -0.1,
            }],
            path_loss: 8.0,
            position: [0.0; 3],
        };
        let h = assemble_channel(&paths, &g);
        let a = array_response(&g, 0.3, -0.1);
        assert!((&h - &a).norm() < 1e-12);
        assert!((h.norm_squared() - 8.0).abs() < 1e-12);
    }

    #[test]
    fn opposite_gains_cancel() {
        let g = ArrayGeometry::ula(8, 0.1).unwrap();
        let p = Path {
            gain: C64::new(0.3, -0.7),
            azimuth: 1.0,
            elevation: 0.2,
        };
        let q = Path { gain: -p.gain, ..p };
        let set = PathSet {
            paths: vec![p, q],
            path_loss: 3.0,
            position: [0.0; 3],
        };
        assert_eq!(assemble_channel(&set, &g).norm(), 0.0);
    }

    #[test]
    fn assemble_matches_element_loop() {
        let cfg = ScenarioConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let g = ArrayGeometry::ula(32, 0.1).unwrap();
        let set = synth_paths(&cfg, &mut rng);
        let h = assemble_channel(&set, &g);
        let scale = (32.0 / set.path_loss).sqrt();
        for m in 0..32 {
            let mut acc = C64::new(0.0, 0.0);
            for p in &set.paths {
                let phase = 2.0 * PI * 0.1 * m as f64 * p.azimuth.sin() * p.elevation.cos();
                acc += p.gain * C64::new(phase.cos(), phase.sin());
            }
            assert!(((acc * scale) - h[m]).norm() < 1e-12 * scale.max(1.0) * 10.0);
        }
    }

    #[test]
    fn assemble_is_linear_in_gains() {
        let g = ArrayGeometry::ula(16, 0.5).unwrap();
        let mk = |gain| PathSet {
            paths: vec![Path {
                gain,
                azimuth: 0.7,
                elevation: 0.1,
            }],
            path_loss: 2.0,
            position: [0.0; 3],
        };
        let (a1, a2) = (C64::new(0.4, 0.1), C64::new(-1.2, 0.5));
        let merged = assemble_channel(&mk(a1 + a2), &g);
        let sum = assemble_channel(&mk(a1), &g) + assemble_channel(&mk(a2), &g);
        assert!((merged - sum).norm() < 1e-12);
    }

    #[test]
    fn normalize_examples() {
        let h = ComplexMatrix::from_element(1, 1, C64::new(2.0, 0.0));
        assert_eq!(normalize_channel(&h).unwrap()[(0, 0)], C64::new(1.0, 0.0));
        let h = ComplexMatrix::from_row_slice(1, 2, &[C64::new(1.0, 0.0), C64::new(0.0, -3.0)]);
        let n = normalize_channel(&h).unwrap();
        assert!(close(n[(0, 0)], C64::new(1.0 / 3.0, 0.0), 1e-15));
        assert!(close(n[(0, 1)], C64::new(0.0, -1.0), 1e-15));
        assert_eq!(
            normalize_channel(&ComplexMatrix::zeros(2, 2)),
            Err(ChannelError::ZeroChannel)
        );
    }

    #[test]
    fn normalize_preserves_phase() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..1000 {
            let h = ComplexMatrix::from_fn(4, 3, |_, _| complex_normal(&mut rng));
            let n = normalize_channel(&h).unwrap();
            assert!((max_abs(&n) - 1.0).abs() < 1e-12);
            for (a, b) in h.iter().zip(n.iter()) {
                assert!((a.arg() - b.arg()).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn cee_levels() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let h = ComplexMatrix::from_fn(8, 4, |_, _| complex_normal(&mut rng));
        assert_eq!(inject_cee(&h, f64::NEG_INFINITY, &mut rng), h);

        let noisy = inject_cee(&h, 0.0, &mut rng);
        let err: f64 = (&noisy - &h).iter().map(|z| z.norm_sqr()).sum();
        let energy: f64 = h.iter().map(|z| z.norm_sqr()).sum();
        assert!((err / energy - 1.0).abs() < 1e-9);

        let (mut err, mut energy) = (0.0, 0.0);
        for _ in 0..1000 {
            let h = ComplexMatrix::from_fn(8, 4, |_, _| complex_normal(&mut rng));
            let noisy = inject_cee(&h, -20.0, &mut rng);
            err += (&noisy - &h).iter().map(|z| z.norm_sqr()).sum::<f64>();
            energy += h.iter().map(|z| z.norm_sqr()).sum::<f64>();
        }
        assert!((err / energy - 0.01).abs() < 0.001);
    }

    #[test]
    fn strided_subset() {
        assert_eq!(
            subset_indices(32, 8, SubsetMode::Strided).unwrap(),
            vec![0, 4, 8, 12, 16, 20, 24, 28]
        );
        assert_eq!(subset_indices(32, 8, SubsetMode::Contiguous).unwrap(), (0..8).collect::<Vec<_>>());
        assert_eq!(
            subset_indices(32, 5, SubsetMode::Strided),
            Err(ChannelError::Indivisible { n_high: 32, n_low: 5 })
        );
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let h = ComplexMatrix::from_fn(32, 4, |_, _| complex_normal(&mut rng));
        assert_eq!(subsample_channel(&h, 32, SubsetMode::Strided).unwrap(), h);
        let low = subsample_channel(&h, 8, SubsetMode::Strided).unwrap();
        for (r, &i) in [0, 4, 8, 12, 16, 20, 24, 28].iter().enumerate() {
            assert_eq!(low.row(r), h.row(i));
        }
    }

    #[test]
    fn dataset_split_and_determinism() {
        let cfg = ScenarioConfig::default();
        let ds = generate_dataset(&cfg, 250, (4, 1), 7).unwrap();
        assert_eq!((ds.train.len(), ds.test.len()), (200, 50));
        let mut all: Vec<usize> = ds.train.iter().chain(&ds.test).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..250).collect::<Vec<_>>());
        let again = generate_dataset(&cfg, 250, (4, 1), 7).unwrap();
        assert_eq!(ds, again);
        let s = &ds.samples[17];
        assert_eq!(s.h_real.shape(), (32, 4));
        assert_eq!(s.h_low, subsample_channel(&s.h_real, 8, SubsetMode::Strided).unwrap());
    }

    #[test]
    fn serial_and_parallel_generation_agree() {
        let cfg = ScenarioConfig::default();
        let parallel = generate_dataset(&cfg, 12, (4, 1), 3).unwrap();
        for (i, s) in parallel.samples.iter().enumerate() {
            let serial = generate_sample(&cfg, i as u64, mix_seed(3, i as u64)).unwrap();
            assert_eq!(&serial, s);
        }
    }

    #[test]
    fn closer_spacing_raises_neighbour_correlation() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let delta = 2f64.to_radians();
        let mean_corr = |spacing: f64, rng: &mut ChaCha8Rng| {
            let g = ArrayGeometry::ula(32, spacing).unwrap();
            let mut acc = 0.0;
            for _ in 0..1000 {
                let az = rng.random_range(-PI / 2.0..PI / 2.0);
                let a = array_response(&g, az, 0.0);
                let b = array_response(&g, az + delta, 0.0);
                acc += a.dotc(&b).norm() / 32.0;
            }
            acc / 1000.0
        };
        let dense = mean_corr(0.1, &mut rng);
        let sparse = mean_corr(0.5, &mut rng);
        assert!(dense > sparse, "{dense} vs {sparse}");
    }
}
