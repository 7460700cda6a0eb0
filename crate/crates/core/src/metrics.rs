//! Spectral efficiency, NMSE, the zero-padding reference beamformer,
//! test-set evaluation and the runtime comparison against full WMMSE.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Real;
use crate::channel::{mix_seed, subset_indices, with_worker_pool, ChannelError, ChannelSample, Dataset, SubsetMode};
use crate::gan::{sample_noise, GanError, Generator};
use crate::linalg::{power, to_tensor, ComplexMatrix, C64};
use crate::trainer::{predict, TrainError};
use crate::wmmse::{wmmse_solve, WmmseConfig, WmmseError};

/// Floor applied to NMSE so a perfect estimate reports a finite value.
pub const NMSE_FLOOR_DB: f64 = -120.0;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetricsError {
    #[error("NMSE target has zero energy")]
    ZeroTarget,
    #[error("shape mismatch: {0:?} vs {1:?}")]
    Shape((usize, usize), (usize, usize)),
    #[error("no samples to evaluate")]
    Empty,
    #[error(transparent)]
    Channel(#[from] ChannelError),
    #[error("sample {index} is not labeled")]
    Unlabeled { index: usize },
    #[error("runtime benchmark needs at least 5 repetitions, got {0}")]
    TooFewReps(usize),
    #[error("prediction failed: {0}")]
    Predict(String),
}

impl From<TrainError> for MetricsError {
    fn from(e: TrainError) -> Self {
        MetricsError::Predict(e.to_string())
    }
}

impl From<WmmseError> for MetricsError {
    fn from(e: WmmseError) -> Self {
        MetricsError::Predict(e.to_string())
    }
}

impl From<GanError> for MetricsError {
    fn from(e: GanError) -> Self {
        MetricsError::Predict(e.to_string())
    }
}

/// Per-user rates `log₂(1 + SINR_k)` and their sum.
pub fn spectral_efficiency(h: &ComplexMatrix, v: &ComplexMatrix, noise_var: f64) -> (Vec<f64>, f64) {
    // g[(k, j)] = h_kᴴ v_j
    let g = h.adjoint() * v;
    let k = h.ncols();
    let rates: Vec<f64> = (0..k)
        .map(|user| {
            let signal = g[(user, user)].norm_sqr();
            let total: f64 = g.row(user).iter().map(|z| z.norm_sqr()).sum();
            (1.0 + signal / (noise_var + total - signal)).log2()
        })
        .collect();
    let sum = rates.iter().sum();
    (rates, sum)
}

/// `10·log₁₀(Σ‖target − est‖² / Σ‖target‖²)` over paired matrices, floored at −120 dB.
pub fn nmse_db_batch<'a>(
    pairs: impl IntoIterator<Item = (&'a ComplexMatrix, &'a ComplexMatrix)>,
) -> Result<f64, MetricsError> {
    let (mut err, mut energy, mut count) = (0.0, 0.0, 0usize);
    for (target, est) in pairs {
        if target.shape() != est.shape() {
            return Err(MetricsError::Shape(target.shape(), est.shape()));
        }
        err += power(&(target - est));
        energy += power(target);
        count += 1;
    }
    if count == 0 {
        return Err(MetricsError::Empty);
    }
    if energy == 0.0 {
        return Err(MetricsError::ZeroTarget);
    }
    let ratio = err / energy;
    Ok(if ratio > 0.0 {
        (10.0 * ratio.log10()).max(NMSE_FLOOR_DB)
    } else {
        NMSE_FLOOR_DB
    })
}

pub fn nmse_db(target: &ComplexMatrix, est: &ComplexMatrix) -> Result<f64, MetricsError> {
    nmse_db_batch([(target, est)])
}

/// Places `v_low` on the subset rows of an `n_high`-row matrix and rescales to `power_budget`.
pub fn zero_padding_baseline(
    v_low: &ComplexMatrix,
    n_high: usize,
    mode: SubsetMode,
    power_budget: f64,
) -> Result<ComplexMatrix, MetricsError> {
    let rows = subset_indices(n_high, v_low.nrows(), mode)?;
    let mut v = ComplexMatrix::zeros(n_high, v_low.ncols());
    for (i, &r) in rows.iter().enumerate() {
        v.row_mut(r).copy_from(&v_low.row(i));
    }
    let p = power(&v);
    if p > 0.0 {
        v *= C64::new((power_budget / p).sqrt(), 0.0);
    }
    Ok(v)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
}

impl Summary {
    /// Mean and population standard deviation.
    pub fn of(values: &[f64]) -> Summary {
        if values.is_empty() {
            return Summary { mean: 0.0, std: 0.0 };
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Summary { mean, std: var.sqrt() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleEval {
    pub index: usize,
    pub se_wmmse: f64,
    pub se_generated: f64,
    pub se_zero_padding: f64,
    pub nmse_db: f64,
}

/// Median wall times of the two beamforming paths at one array size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuntimeTable {
    pub nt_high: usize,
    pub nt_low: usize,
    pub n_samples: usize,
    pub reps: usize,
    /// WMMSE on the full channels.
    pub full_wmmse_s: f64,
    /// WMMSE on the subset channels only.
    pub low_wmmse_s: f64,
    /// Generator forward passes only.
    pub forward_s: f64,
    /// Subset WMMSE followed by the generator, timed as one path.
    pub pipeline_s: f64,
    pub ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub nt_high: usize,
    pub nt_low: usize,
    pub samples: Vec<SampleEval>,
    pub se_wmmse: Summary,
    pub se_generated: Summary,
    pub se_zero_padding: Summary,
    /// Per-sample NMSE statistics.
    pub nmse_db: Summary,
    /// Ratio of summed error energy to summed target energy over the split.
    pub pooled_nmse_db: f64,
    pub runtime: Option<RuntimeTable>,
}

/// Scores the generator on the test split against WMMSE and zero padding.
///
/// Sample `i` draws its noise from a stream seeded by `(eval_seed, i)`.
pub fn evaluate<T: Real>(
    dataset: &Dataset,
    gen: &Generator<T>,
    wmmse: &WmmseConfig,
    eval_seed: u64,
) -> Result<EvalReport, MetricsError> {
    if dataset.test.is_empty() {
        return Err(MetricsError::Empty);
    }
    let n_high = dataset.config.nt_high;
    let subset = dataset.config.subset;
    let rows = with_worker_pool(|| {
        dataset
            .test
            .par_iter()
            .map(|&index| {
                let s = &dataset.samples[index];
                let (v_real, v_low) = match (&s.v_real, &s.v_low) {
                    (Some(a), Some(b)) => (a, b),
                    _ => return Err(MetricsError::Unlabeled { index }),
                };
                let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(eval_seed, index as u64));
                let v_high = predict(gen, &s.h_low, wmmse, &mut rng)?;
                let padded = zero_padding_baseline(v_low, n_high, subset, wmmse.power)?;
                let row = SampleEval {
                    index,
                    se_wmmse: spectral_efficiency(&s.h_real, v_real, wmmse.noise_var).1,
                    se_generated: spectral_efficiency(&s.h_real, &v_high, wmmse.noise_var).1,
                    se_zero_padding: spectral_efficiency(&s.h_real, &padded, wmmse.noise_var).1,
                    nmse_db: nmse_db(v_real, &v_high)?,
                };
                Ok((row, v_real.clone(), v_high))
            })
            .collect::<Result<Vec<_>, MetricsError>>()
    })?;
    let pooled_nmse_db = nmse_db_batch(rows.iter().map(|(_, a, b)| (a, b)))?;
    let samples: Vec<SampleEval> = rows.into_iter().map(|(r, _, _)| r).collect();
    let column = |f: fn(&SampleEval) -> f64| Summary::of(&samples.iter().map(f).collect::<Vec<_>>());
    Ok(EvalReport {
        nt_high: n_high,
        nt_low: dataset.config.nt_low,
        se_wmmse: column(|s| s.se_wmmse),
        se_generated: column(|s| s.se_generated),
        se_zero_padding: column(|s| s.se_zero_padding),
        nmse_db: column(|s| s.nmse_db),
        pooled_nmse_db,
        samples,
        runtime: None,
    })
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

fn time_reps(reps: usize, mut f: impl FnMut() -> Result<(), MetricsError>) -> Result<f64, MetricsError> {
    f()?;
    let mut times = Vec::with_capacity(reps);
    for _ in 0..reps {
        let t = Instant::now();
        f()?;
        times.push(t.elapsed().as_secs_f64());
    }
    Ok(median(times))
}

/// Median (over `reps`, after one discarded warm-up) wall time of full
/// WMMSE versus subset WMMSE plus one generator pass, summed over `samples`.
///
/// Runs on a single-thread pool so neither path gets parallel help.
pub fn benchmark_runtime<T: Real>(
    samples: &[ChannelSample],
    wmmse: &WmmseConfig,
    gen: &Generator<T>,
    reps: usize,
) -> Result<RuntimeTable, MetricsError> {
    if reps < 5 {
        return Err(MetricsError::TooFewReps(reps));
    }
    if samples.is_empty() {
        return Err(MetricsError::Empty);
    }
    let cfg = &gen.arch.config;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let inputs: Vec<_> = samples
        .iter()
        .map(|s| {
            let z = sample_noise::<T>(&[cfg.n_low, cfg.n_users, 2], &mut rng);
            (z, to_tensor::<T>(&s.h_low))
        })
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .map_err(|e| MetricsError::Predict(e.to_string()))?;
    pool.install(|| {
        let full = time_reps(reps, || {
            for s in samples {
                std::hint::black_box(wmmse_solve(&s.h_real, wmmse, None)?);
            }
            Ok(())
        })?;
        let low_beams: Vec<_> = samples
            .iter()
            .map(|s| wmmse_solve(&s.h_low, wmmse, None).map(|o| to_tensor::<T>(&o.beam.v)))
            .collect::<Result<_, _>>()?;
        let low = time_reps(reps, || {
            for s in samples {
                std::hint::black_box(wmmse_solve(&s.h_low, wmmse, None)?);
            }
            Ok(())
        })?;
        let forward = time_reps(reps, || {
            for ((z, h), v) in inputs.iter().zip(&low_beams) {
                std::hint::black_box(gen.forward(z, v, h, wmmse.power)?);
            }
            Ok(())
        })?;
        let pipeline = time_reps(reps, || {
            for (s, (z, h)) in samples.iter().zip(&inputs) {
                let v = wmmse_solve(&s.h_low, wmmse, None)?.beam.v;
                std::hint::black_box(gen.forward(z, &to_tensor::<T>(&v), h, wmmse.power)?);
            }
            Ok(())
        })?;
        Ok(RuntimeTable {
            nt_high: cfg.n_high,
            nt_low: cfg.n_low,
            n_samples: samples.len(),
            reps,
            full_wmmse_s: full,
            low_wmmse_s: low,
            forward_s: forward,
            pipeline_s: pipeline,
            ratio: pipeline / full,
        })
    })
}

/// Least-squares slope of `log t` against `log n`.
pub fn fit_exponent(ns: &[f64], times: &[f64]) -> f64 {
    let xs: Vec<f64> = ns.iter().map(|n| n.ln()).collect();
    let ys: Vec<f64> = times.iter().map(|t| t.ln()).collect();
    let k = xs.len() as f64;
    let (mx, my) = (xs.iter().sum::<f64>() / k, ys.iter().sum::<f64>() / k);
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    sxy / sxx
}
