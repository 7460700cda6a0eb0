//! Weighted MMSE sum-rate maximization for the multi-user MISO downlink.
//!
//! Alternates between MMSE receive scalars, MMSE weights and a
//! power-constrained precoder update. The precoder step solves
//! `(Σ_j w_j|u_j|² h_j h_jᴴ + μI) v_k = h_k u_k w_k` with the multiplier
//! `μ ≥ 0` found by bisection on the transmit power; an eigendecomposition
//! of the Hermitian system matrix makes each power evaluation cheap.

use nalgebra::{DVector, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::channel::{with_worker_pool, Dataset};
use crate::linalg::{is_finite, max_abs, power, ComplexMatrix, C64};
use crate::metrics::spectral_efficiency;

/// Lower end of the multiplier bracket.
pub const MU_MIN: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum WmmseError {
    #[error("channel contains non-finite entries")]
    NonFiniteChannel,
    #[error("invalid WMMSE configuration: {0}")]
    Config(String),
    #[error("initial beamformer is {found:?}, channel needs {expected:?}")]
    InitShape {
        expected: (usize, usize),
        found: (usize, usize),
    },
    #[error("sample {index}: {source}")]
    Sample {
        index: usize,
        #[source]
        source: Box<WmmseError>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum WmmseInit {
    /// `v_k ∝ h_k`, equal power per user.
    MatchedFilter,
    /// Circular Gaussian entries scaled to the power budget.
    Random { seed: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WmmseConfig {
    /// Transmit power budget `P` (linear).
    pub power: f64,
    /// Receiver noise variance `σ²`.
    pub noise_var: f64,
    /// Stop when the sum rate changes by less than this (bits/s/Hz).
    pub tol: f64,
    pub max_iter: usize,
    /// Relative power accuracy of the multiplier search.
    pub bisection_tol: f64,
    pub bisection_max_steps: usize,
    pub init: WmmseInit,
}

impl Default for WmmseConfig {
    fn default() -> Self {
        WmmseConfig {
            power: 1.0,
            noise_var: 0.1,
            tol: 1e-4,
            max_iter: 200,
            bisection_tol: 1e-10,
            bisection_max_steps: 200,
            init: WmmseInit::MatchedFilter,
        }
    }
}

impl WmmseConfig {
    /// Unit power with noise set from an SNR in dB.
    pub fn from_snr_db(snr_db: f64) -> Self {
        WmmseConfig {
            noise_var: 1.0 / 10f64.powf(snr_db / 10.0),
            ..WmmseConfig::default()
        }
    }

    pub fn validate(&self) -> Result<(), WmmseError> {
        let positive = [self.power, self.noise_var, self.tol, self.bisection_tol];
        if positive.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(WmmseError::Config(
                "power, noise variance and tolerances must be positive".into(),
            ));
        }
        if self.tol >= 1.0 {
            return Err(WmmseError::Config("stopping tolerance must be below 1".into()));
        }
        if self.max_iter == 0 || self.bisection_max_steps == 0 {
            return Err(WmmseError::Config("iteration limits must be positive".into()));
        }
        Ok(())
    }
}

/// Beamforming matrix `V` (antennas × users) with its power budget.
#[derive(Debug, Clone, PartialEq)]
pub struct BeamMatrix {
    pub v: ComplexMatrix,
    pub power_budget: f64,
}

impl BeamMatrix {
    pub fn transmit_power(&self) -> f64 {
        power(&self.v)
    }

    pub fn is_feasible(&self) -> bool {
        self.transmit_power() <= self.power_budget * (1.0 + 1e-9)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WmmseOutput {
    pub beam: BeamMatrix,
    /// Sum rate of the initial point followed by one entry per iteration.
    pub trace: Vec<f64>,
    /// Multiplier used in the last precoder update (0 when none ran).
    pub mu: f64,
}

impl WmmseOutput {
    pub fn sum_rate(&self) -> f64 {
        *self.trace.last().expect("trace is never empty")
    }

    pub fn iterations(&self) -> usize {
        self.trace.len() - 1
    }
}

fn matched_filter(h: &ComplexMatrix, p: f64) -> ComplexMatrix {
    let active = h.column_iter().filter(|c| c.norm() > 0.0).count().max(1);
    let per_user = (p / active as f64).sqrt();
    let mut v = h.clone();
    for mut col in v.column_iter_mut() {
        let n = col.norm();
        if n > 0.0 {
            col *= C64::new(per_user / n, 0.0);
        }
    }
    v
}

fn random_init(n: usize, k: usize, p: f64, seed: u64) -> ComplexMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let v = ComplexMatrix::from_fn(n, k, |_, _| {
        let re: f64 = StandardNormal.sample(&mut rng);
        let im: f64 = StandardNormal.sample(&mut rng);
        C64::new(re, im)
    });
    let scale = (p / power(&v)).sqrt();
    v * C64::new(scale, 0.0)
}

/// Precoder solve `V(μ) = Q (Λ + μI)⁻¹ Qᴴ B` for the Hermitian system `A = QΛQᴴ`.
struct PrecoderSystem {
    q: ComplexMatrix,
    eig: Vec<f64>,
    /// `Qᴴ B` with components in the numerical null space of `A` removed.
    c: ComplexMatrix,
    /// `Σ_k |c_mk|²` per eigen-direction.
    weights: Vec<f64>,
}

impl PrecoderSystem {
    fn new(a: ComplexMatrix, b: &ComplexMatrix) -> Self {
        let eig = SymmetricEigen::new(a);
        let q = eig.eigenvectors;
        let eig: Vec<f64> = eig.eigenvalues.iter().map(|&l| l.max(0.0)).collect();
        let lmax = eig.iter().copied().fold(0.0, f64::max);
        let mut c = q.adjoint() * b;
        for (m, &l) in eig.iter().enumerate() {
            if l <= 1e-12 * lmax {
                c.row_mut(m).fill(C64::new(0.0, 0.0));
            }
        }
        let weights = (0..eig.len())
            .map(|m| c.row(m).iter().map(|z| z.norm_sqr()).sum())
            .collect();
        PrecoderSystem { q, eig, c, weights }
    }

    fn power(&self, mu: f64) -> f64 {
        self.eig
            .iter()
            .zip(&self.weights)
            .filter(|(_, &w)| w > 0.0)
            .map(|(&l, &w)| w / (l + mu).powi(2))
            .sum()
    }

    fn precoder(&self, mu: f64) -> ComplexMatrix {
        let mut scaled = self.c.clone();
        for (m, &l) in self.eig.iter().enumerate() {
            if self.weights[m] > 0.0 {
                scaled.row_mut(m).scale_mut(1.0 / (l + mu));
            }
        }
        &self.q * scaled
    }

    /// Smallest `μ ≥ 0` whose precoder meets the power budget (with equality when `μ > 0`).
    fn solve_mu(&self, budget: f64, cfg: &WmmseConfig) -> f64 {
        if self.power(0.0) <= budget {
            return 0.0;
        }
        let mut lo = MU_MIN;
        let mut hi = 1.0;
        let mut doublings = 0;
        while self.power(hi) > budget && doublings < 1100 {
            lo = hi;
            hi *= 2.0;
            doublings += 1;
        }
        let mut mu = hi;
        for _ in 0..cfg.bisection_max_steps {
            mu = 0.5 * (lo + hi);
            let p = self.power(mu);
            if (p - budget).abs() <= cfg.bisection_tol * budget {
                break;
            }
            if p > budget {
                lo = mu;
            } else {
                hi = mu;
            }
            if hi - lo <= f64::EPSILON * hi {
                break;
            }
        }
        mu
    }
}

/// Runs WMMSE on channel `h` (antennas × users).
///
/// `init` overrides the configured initialization. An all-zero channel
/// returns `V = 0` with a single-entry trace.
pub fn wmmse_solve(
    h: &ComplexMatrix,
    cfg: &WmmseConfig,
    init: Option<&BeamMatrix>,
) -> Result<WmmseOutput, WmmseError> {
    cfg.validate()?;
    if !is_finite(h) {
        return Err(WmmseError::NonFiniteChannel);
    }
    let (n, k) = h.shape();
    if max_abs(h) == 0.0 {
        return Ok(WmmseOutput {
            beam: BeamMatrix {
                v: ComplexMatrix::zeros(n, k),
                power_budget: cfg.power,
            },
            trace: vec![0.0],
            mu: 0.0,
        });
    }
    let mut v = match init {
        Some(b) => {
            if b.v.shape() != (n, k) {
                return Err(WmmseError::InitShape {
                    expected: (n, k),
                    found: b.v.shape(),
                });
            }
            b.v.clone()
        }
        None => match cfg.init {
            WmmseInit::MatchedFilter => matched_filter(h, cfg.power),
            WmmseInit::Random { seed } => random_init(n, k, cfg.power, seed),
        },
    };

    let mut rate = spectral_efficiency(h, &v, cfg.noise_var).1;
    let mut trace = vec![rate];
    let mut mu = 0.0;
    let hh = h.adjoint();
    for _ in 0..cfg.max_iter {
        // g[(k, j)] = h_kᴴ v_j
        let g = &hh * &v;
        let mut a_weights = DVector::<C64>::zeros(k);
        let mut b_weights = DVector::<C64>::zeros(k);
        for user in 0..k {
            let total: f64 = cfg.noise_var + g.row(user).iter().map(|z| z.norm_sqr()).sum::<f64>();
            let signal = g[(user, user)];
            let u = signal / total;
            let w = total / (total - signal.norm_sqr());
            a_weights[user] = C64::new(w * u.norm_sqr(), 0.0);
            b_weights[user] = u * w;
        }
        let a = h * ComplexMatrix::from_diagonal(&a_weights) * &hh;
        let a = (&a + a.adjoint()) * C64::new(0.5, 0.0);
        let b = h * ComplexMatrix::from_diagonal(&b_weights);
        let system = PrecoderSystem::new(a, &b);
        mu = system.solve_mu(cfg.power, cfg);
        v = system.precoder(mu);

        let next = spectral_efficiency(h, &v, cfg.noise_var).1;
        trace.push(next);
        let done = (next - rate).abs() < cfg.tol;
        rate = next;
        if done {
            break;
        }
    }
    Ok(WmmseOutput {
        beam: BeamMatrix {
            v,
            power_budget: cfg.power,
        },
        trace,
        mu,
    })
}

/// Fills `v_real` (from `h_real`) and `v_low` (from `h_low`) on every sample.
pub fn label_dataset(dataset: &mut Dataset, cfg: &WmmseConfig) -> Result<(), WmmseError> {
    let labels = with_worker_pool(|| {
        dataset
            .samples
            .par_iter()
            .enumerate()
            .map(|(index, s)| {
                let wrap = |e: WmmseError| WmmseError::Sample {
                    index,
                    source: Box::new(e),
                };
                let high = wmmse_solve(&s.h_real, cfg, None).map_err(wrap)?;
                let low = wmmse_solve(&s.h_low, cfg, None).map_err(wrap)?;
                Ok((high.beam.v, low.beam.v))
            })
            .collect::<Result<Vec<_>, WmmseError>>()
    })?;
    for (s, (v_real, v_low)) in dataset.samples.iter_mut().zip(labels) {
        s.v_real = Some(v_real);
        s.v_low = Some(v_low);
    }
    Ok(())
}
