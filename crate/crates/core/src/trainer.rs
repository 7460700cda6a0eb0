//! Conditional WGAN-GP training and the prediction pipeline.
//!
//! The critic ascends `L1 = D(V_real) − D(G(Z)) − λ·GP`; the generator
//! descends `−D(G(Z)) + β·‖G(Z) − V_real‖²`. Both use RMSProp.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{GradMode, Graph, OptimizerState, Real, Tensor, TensorError, Var};
use crate::channel::{mix_seed, Dataset};
use crate::gan::{
    discriminator_graph, generator_graph, sample_noise, upsample_condition, DiscArch, Discriminator,
    GanConfig, GanError, Generator,
};
use crate::linalg::{from_tensor, to_tensor, ComplexMatrix};
use crate::metrics::{nmse_db_batch, MetricsError};
use crate::wmmse::{wmmse_solve, WmmseConfig, WmmseError};

/// Added under the square root of the gradient norm so a vanishing critic
/// gradient keeps a finite penalty derivative.
const GP_NORM_EPS: f64 = 1e-30;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TrainError {
    #[error(transparent)]
    Gan(#[from] GanError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Wmmse(#[from] WmmseError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("dataset is not labeled")]
    Unlabeled,
    #[error(
        "non-finite {quantity} at epoch {epoch}, step {step} (samples {batch:?}); \
         generator {gen_digest}, critic {disc_digest}"
    )]
    NonFinite {
        quantity: String,
        epoch: usize,
        step: u64,
        batch: Vec<usize>,
        gen_digest: String,
        disc_digest: String,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    /// Generator every `gen_period` batches, critic every `disc_period`.
    #[default]
    Paper,
    /// The two periods swapped: critic every `gen_period`, generator every `disc_period`.
    Standard,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    F32,
    #[default]
    F64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr_gen: f64,
    pub lr_disc: f64,
    pub beta: f64,
    pub lambda: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub gen_period: usize,
    pub disc_period: usize,
    pub schedule: Schedule,
    pub seed: u64,
    /// Noise seed for test-set evaluation, fixed across epochs.
    pub eval_seed: u64,
    pub precision: Precision,
    /// Transmit power budget `P` for the generator output.
    pub power: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr_gen: 2e-4,
            lr_disc: 2e-5,
            beta: 100.0,
            lambda: 10.0,
            epochs: 50,
            batch_size: 1,
            gen_period: 1,
            disc_period: 5,
            schedule: Schedule::Paper,
            seed: 0,
            eval_seed: 0x5eed,
            precision: Precision::F64,
            power: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let positive = [self.lr_gen, self.lr_disc, self.power];
        if positive.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(TrainError::Config("learning rates and power must be positive".into()));
        }
        if !(self.beta >= 0.0 && self.lambda >= 0.0) {
            return Err(TrainError::Config("beta and lambda must be non-negative".into()));
        }
        if self.batch_size == 0 || self.gen_period == 0 || self.disc_period == 0 {
            return Err(TrainError::Config("batch size and update periods must be at least 1".into()));
        }
        Ok(())
    }

    /// `(generator period, critic period)` after applying the schedule.
    pub fn periods(&self) -> (usize, usize) {
        match self.schedule {
            Schedule::Paper => (self.gen_period, self.disc_period),
            Schedule::Standard => (self.disc_period, self.gen_period),
        }
    }
}

/// Losses observed on one batch. Critic-only quantities are present when
/// the critic was updated on that batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: usize,
    pub gen_updated: bool,
    pub disc_updated: bool,
    pub l1: Option<f64>,
    pub gp: Option<f64>,
    pub d_real: Option<f64>,
    pub d_fake: f64,
    pub l2: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub test_nmse_db: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainTrace {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
}

impl TrainTrace {
    pub fn is_empty(&self) -> bool {
        self.steps.is_empty() && self.epochs.is_empty()
    }

    /// Equality of every recorded value except wall-clock times.
    pub fn same_values(&self, other: &TrainTrace) -> bool {
        self.steps == other.steps
            && self.epochs.len() == other.epochs.len()
            && self
                .epochs
                .iter()
                .zip(&other.epochs)
                .all(|(a, b)| a.epoch == b.epoch && a.test_nmse_db.to_bits() == b.test_nmse_db.to_bits())
    }

    pub fn extend(&mut self, other: TrainTrace) {
        self.steps.extend(other.steps);
        self.epochs.extend(other.epochs);
    }

    pub fn all_finite(&self) -> bool {
        self.steps.iter().all(|s| {
            [s.l1, s.gp, s.d_real, Some(s.d_fake), Some(s.l2)]
                .iter()
                .flatten()
                .all(|v| v.is_finite())
        }) && self.epochs.iter().all(|e| e.test_nmse_db.is_finite())
    }

    pub fn final_nmse(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.test_nmse_db)
    }
}

/// Everything needed to continue training.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState<T> {
    pub gen: Generator<T>,
    pub disc: Discriminator<T>,
    pub gen_opt: OptimizerState<T>,
    pub disc_opt: OptimizerState<T>,
    /// Completed epochs.
    pub epoch: usize,
    /// Completed batches over all epochs.
    pub step: u64,
}

impl<T: Real> TrainState<T> {
    /// Fresh networks and optimizer state, seeded from `cfg.seed`.
    pub fn new(model: &GanConfig, cfg: &TrainConfig) -> Result<Self, TrainError> {
        let gen = Generator::new(model, mix_seed(cfg.seed, 0x6e))?;
        let disc = Discriminator::new(model, mix_seed(cfg.seed, 0xd1))?;
        let gen_opt = OptimizerState::new(cfg.lr_gen, &gen.params.shapes());
        let disc_opt = OptimizerState::new(cfg.lr_disc, &disc.params.shapes());
        Ok(TrainState {
            gen,
            disc,
            gen_opt,
            disc_opt,
            epoch: 0,
            step: 0,
        })
    }
}

/// Tensors of one labeled sample in network layout.
#[derive(Debug, Clone)]
pub struct PreparedSample<T> {
    pub index: usize,
    pub h_low: Tensor<T>,
    pub v_low: Tensor<T>,
    pub v_real: Tensor<T>,
    pub cond: Tensor<T>,
}

pub fn prepare_samples<T: Real>(
    dataset: &Dataset,
    indices: &[usize],
    factor: usize,
) -> Result<Vec<PreparedSample<T>>, TrainError> {
    indices
        .iter()
        .map(|&i| {
            let s = &dataset.samples[i];
            let (v_real, v_low) = match (&s.v_real, &s.v_low) {
                (Some(a), Some(b)) => (a, b),
                _ => return Err(TrainError::Unlabeled),
            };
            let v_low_t = to_tensor(v_low);
            let cond = upsample_condition(&v_low_t, factor)?;
            Ok(PreparedSample {
                index: i,
                h_low: to_tensor(&s.h_low),
                v_low: v_low_t,
                v_real: to_tensor(v_real),
                cond,
            })
        })
        .collect()
}

/// `α·V_real + (1−α)·V_fake`.
pub fn interpolate<T: Real>(v_real: &Tensor<T>, v_fake: &Tensor<T>, alpha: f64) -> Tensor<T> {
    let a = T::from_f64_lossy(alpha);
    let b = T::from_f64_lossy(1.0 - alpha);
    v_real.zip_map(v_fake, |r, f| a * r + b * f)
}

/// Penalty `(‖∇_x D(x)‖ − 1)²` at `point`, recorded so it can be
/// differentiated again with respect to the critic's parameters.
///
/// Returns `(penalty, critic value at point)`.
pub fn gradient_penalty_with<T: Real>(
    g: &mut Graph<T>,
    point: Tensor<T>,
    critic: impl FnOnce(&mut Graph<T>, Var) -> Result<Var, GanError>,
) -> Result<(Var, Var), TrainError> {
    let x = g.param(point);
    let d = critic(g, x)?;
    let grad = g.input_gradient(d, x)?;
    let sq = g.square(grad);
    let energy = g.sum(sq);
    let energy = g.add_scalar(energy, GP_NORM_EPS);
    let norm = g.sqrt(energy);
    let gap = g.add_scalar(norm, -1.0);
    Ok((g.square(gap), d))
}

/// Penalty value at `α·V_real + (1−α)·V_fake` with `α ~ U(0, 1)` from `rng`.
pub fn gradient_penalty<T: Real>(
    disc: &Discriminator<T>,
    v_real: &Tensor<T>,
    v_fake: &Tensor<T>,
    v_low: &Tensor<T>,
    rng: &mut impl Rng,
) -> Result<f64, TrainError> {
    let alpha: f64 = rng.random();
    let factor = disc.arch.config.upsampling_factor()?;
    let cond = upsample_condition(v_low, factor)?;
    let mut g = Graph::new(GradMode::Differentiable);
    let p = disc.params.load_into(&mut g, false);
    let c = g.constant(cond);
    let (gp, _) = gradient_penalty_with(&mut g, interpolate(v_real, v_fake, alpha), |g, x| {
        discriminator_graph(g, &disc.arch, &p, x, c)
    })?;
    Ok(g.value(gp).item().as_f64())
}

/// Critic-side terms of one sample.
#[derive(Debug, Clone, Copy)]
pub struct CriticTerms {
    pub l1: Var,
    pub gp: Var,
    pub d_real: Var,
    pub d_fake: Var,
}

/// `L1 = D(V_real) − D(V_fake) − λ·GP` in graph `g` (differentiable mode).
#[allow(clippy::too_many_arguments)]
pub fn critic_loss<T: Real>(
    g: &mut Graph<T>,
    arch: &DiscArch,
    params: &[Var],
    v_real: Var,
    v_fake: Var,
    cond: Var,
    alpha: f64,
    lambda: f64,
) -> Result<CriticTerms, TrainError> {
    let d_real = discriminator_graph(g, arch, params, v_real, cond)?;
    let d_fake = discriminator_graph(g, arch, params, v_fake, cond)?;
    let point = interpolate(g.value(v_real), g.value(v_fake), alpha);
    let (gp, _) = gradient_penalty_with(g, point, |g, x| discriminator_graph(g, arch, params, x, cond))?;
    let diff = g.sub(d_real, d_fake)?;
    let penalty = g.scale(gp, lambda);
    let l1 = g.sub(diff, penalty)?;
    Ok(CriticTerms {
        l1,
        gp,
        d_real,
        d_fake,
    })
}

/// `‖V_gen − V_real‖²` over real and imaginary parts.
pub fn l2_loss<T: Real>(g: &mut Graph<T>, v_gen: Var, v_real: Var) -> Result<Var, TensorError> {
    let diff = g.sub(v_gen, v_real)?;
    let sq = g.square(diff);
    Ok(g.sum(sq))
}

pub fn l2_loss_value<T: Real>(v_gen: &Tensor<T>, v_real: &Tensor<T>) -> f64 {
    v_gen
        .data()
        .iter()
        .zip(v_real.data())
        .map(|(&a, &b)| (a.as_f64() - b.as_f64()).powi(2))
        .sum()
}

/// Test NMSE (dB) with one fixed noise draw per test sample.
pub fn test_nmse<T: Real>(
    gen: &Generator<T>,
    samples: &[PreparedSample<T>],
    eval_seed: u64,
    power: f64,
) -> Result<f64, TrainError> {
    let mut pairs = Vec::with_capacity(samples.len());
    for s in samples {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(eval_seed, s.index as u64));
        let z = sample_noise(s.v_low.shape(), &mut rng);
        let v = gen.forward(&z, &s.v_low, &s.h_low, power)?;
        pairs.push((from_tensor(&s.v_real)?, v));
    }
    Ok(nmse_db_batch(pairs.iter().map(|(a, b)| (a, b)))?)
}

struct StepContext<'a, T> {
    epoch: usize,
    step: u64,
    batch: &'a [&'a PreparedSample<T>],
}

fn non_finite<T: Real>(state: &TrainState<T>, ctx: &StepContext<'_, T>, quantity: impl Into<String>) -> TrainError {
    TrainError::NonFinite {
        quantity: quantity.into(),
        epoch: ctx.epoch,
        step: ctx.step,
        batch: ctx.batch.iter().map(|s| s.index).collect(),
        gen_digest: state.gen.params.digest(),
        disc_digest: state.disc.params.digest(),
    }
}

fn check_finite<T: Real>(
    state: &TrainState<T>,
    ctx: &StepContext<'_, T>,
    quantity: &str,
    value: f64,
) -> Result<f64, TrainError> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(non_finite(state, ctx, quantity))
    }
}

fn apply_update<T: Real>(
    state: &mut TrainState<T>,
    ctx: &StepContext<'_, T>,
    generator: bool,
    grads: Vec<Tensor<T>>,
) -> Result<(), TrainError> {
    let result = if generator {
        let params = &mut state.gen.params;
        state.gen_opt.step(&params.names, &mut params.tensors, &grads)
    } else {
        let params = &mut state.disc.params;
        state.disc_opt.step(&params.names, &mut params.tensors, &grads)
    };
    match result {
        Ok(()) => Ok(()),
        Err(TensorError::NonFiniteGradient { name, index }) => {
            Err(non_finite(state, ctx, format!("gradient of {name}[{index}]")))
        }
        Err(e) => Err(e.into()),
    }
}

/// One critic update on `batch` with noise `zs`; returns the mean terms.
fn critic_step<T: Real>(
    state: &mut TrainState<T>,
    cfg: &TrainConfig,
    ctx: &StepContext<'_, T>,
    zs: &[Tensor<T>],
    rng: &mut ChaCha8Rng,
) -> Result<(f64, f64, f64, f64, f64), TrainError> {
    let mut g = Graph::new(GradMode::Differentiable);
    let dp = state.disc.params.load_into(&mut g, true);
    let gp_params = state.gen.params.load_into(&mut g, false);
    let mut l1s = Vec::new();
    let mut sums = [0.0; 5];
    for (s, z) in ctx.batch.iter().zip(zs) {
        let z = g.constant(z.clone());
        let v_low = g.constant(s.v_low.clone());
        let h_low = g.constant(s.h_low.clone());
        let fake = generator_graph(&mut g, &state.gen.arch, &gp_params, z, v_low, h_low, cfg.power, None)?.output;
        let real = g.constant(s.v_real.clone());
        let cond = g.constant(s.cond.clone());
        let alpha: f64 = rng.random();
        let terms = critic_loss(&mut g, &state.disc.arch, &dp, real, fake, cond, alpha, cfg.lambda)?;
        sums[0] += g.value(terms.l1).item().as_f64();
        sums[1] += g.value(terms.gp).item().as_f64();
        sums[2] += g.value(terms.d_real).item().as_f64();
        sums[3] += g.value(terms.d_fake).item().as_f64();
        sums[4] += l2_loss_value(g.value(fake), &s.v_real);
        l1s.push(terms.l1);
    }
    let n = ctx.batch.len() as f64;
    let [l1, gp, d_real, d_fake, l2] = sums.map(|v| v / n);
    check_finite(state, ctx, "critic loss", l1)?;
    let mut total = l1s[0];
    for &v in &l1s[1..] {
        total = g.add(total, v)?;
    }
    let loss = g.scale(total, -1.0 / n);
    let grads = g.grad(loss, &dp)?;
    let grads: Vec<Tensor<T>> = grads.iter().map(|&v| g.value(v).clone()).collect();
    drop(g);
    apply_update(state, ctx, false, grads)?;
    Ok((l1, gp, d_real, d_fake, l2))
}

/// One generator update; returns mean `(D(G(Z)), L2)`.
fn generator_step<T: Real>(
    state: &mut TrainState<T>,
    cfg: &TrainConfig,
    ctx: &StepContext<'_, T>,
    zs: &[Tensor<T>],
) -> Result<(f64, f64), TrainError> {
    let mut g = Graph::new(GradMode::FirstOrder);
    let gp = state.gen.params.load_into(&mut g, true);
    let dp = state.disc.params.load_into(&mut g, false);
    let mut losses = Vec::new();
    let (mut d_sum, mut l2_sum) = (0.0, 0.0);
    for (s, z) in ctx.batch.iter().zip(zs) {
        let z = g.constant(z.clone());
        let v_low = g.constant(s.v_low.clone());
        let h_low = g.constant(s.h_low.clone());
        let fake = generator_graph(&mut g, &state.gen.arch, &gp, z, v_low, h_low, cfg.power, None)?.output;
        let real = g.constant(s.v_real.clone());
        let cond = g.constant(s.cond.clone());
        let d_fake = discriminator_graph(&mut g, &state.disc.arch, &dp, fake, cond)?;
        let l2 = l2_loss(&mut g, fake, real)?;
        d_sum += g.value(d_fake).item().as_f64();
        l2_sum += g.value(l2).item().as_f64();
        let adv = g.neg(d_fake);
        let weighted = g.scale(l2, cfg.beta);
        losses.push(g.add(adv, weighted)?);
    }
    let n = ctx.batch.len() as f64;
    let (d_fake, l2) = (d_sum / n, l2_sum / n);
    check_finite(state, ctx, "generator loss", -d_fake + cfg.beta * l2)?;
    let mut total = losses[0];
    for &v in &losses[1..] {
        total = g.add(total, v)?;
    }
    let loss = g.scale(total, 1.0 / n);
    let grads = g.grad(loss, &gp)?;
    let grads: Vec<Tensor<T>> = grads.iter().map(|&v| g.value(v).clone()).collect();
    drop(g);
    apply_update(state, ctx, true, grads)?;
    Ok((d_fake, l2))
}

/// Trains from `state.epoch` up to `cfg.epochs`.
///
/// Epoch `e` draws its shuffle order, noise and interpolation weights from
/// a stream seeded by `(cfg.seed, e)`, so stopping after any epoch and
/// resuming from the saved state reproduces an uninterrupted run.
pub fn train<T: Real>(
    dataset: &Dataset,
    state: &mut TrainState<T>,
    cfg: &TrainConfig,
) -> Result<TrainTrace, TrainError> {
    cfg.validate()?;
    if !dataset.is_labeled() {
        return Err(TrainError::Unlabeled);
    }
    let factor = state.gen.arch.config.upsampling_factor()?;
    let train_set = prepare_samples::<T>(dataset, &dataset.train, factor)?;
    let test_set = prepare_samples::<T>(dataset, &dataset.test, factor)?;
    if train_set.is_empty() {
        return Err(TrainError::Config("training split is empty".into()));
    }
    let (gen_period, disc_period) = cfg.periods();
    let noise_shape = [state.gen.arch.config.n_low, state.gen.arch.config.n_users, 2];
    let mut trace = TrainTrace::default();

    while state.epoch < cfg.epochs {
        let epoch = state.epoch;
        let started = Instant::now();
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, 1 + epoch as u64));
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&PreparedSample<T>> = chunk.iter().map(|&i| &train_set[i]).collect();
            let zs: Vec<Tensor<T>> = batch.iter().map(|_| sample_noise(&noise_shape, &mut rng)).collect();
            let ctx = StepContext {
                epoch,
                step: state.step,
                batch: &batch,
            };
            let disc_now = state.step.is_multiple_of(disc_period as u64);
            let gen_now = state.step.is_multiple_of(gen_period as u64);
            let mut record = StepRecord {
                step: state.step,
                epoch,
                gen_updated: gen_now,
                disc_updated: disc_now,
                l1: None,
                gp: None,
                d_real: None,
                d_fake: 0.0,
                l2: 0.0,
            };
            if disc_now {
                let (l1, gp, d_real, d_fake, l2) = critic_step(state, cfg, &ctx, &zs, &mut rng)?;
                record.l1 = Some(l1);
                record.gp = Some(gp);
                record.d_real = Some(d_real);
                record.d_fake = d_fake;
                record.l2 = l2;
            }
            if gen_now {
                let (d_fake, l2) = generator_step(state, cfg, &ctx, &zs)?;
                if !disc_now {
                    record.d_fake = d_fake;
                    record.l2 = l2;
                }
            }
            trace.steps.push(record);
            state.step += 1;
        }
        let nmse = if test_set.is_empty() {
            f64::NAN
        } else {
            test_nmse(&state.gen, &test_set, cfg.eval_seed, cfg.power)?
        };
        state.epoch += 1;
        trace.epochs.push(EpochRecord {
            epoch: state.epoch,
            test_nmse_db: nmse,
            seconds: started.elapsed().as_secs_f64(),
        });
    }
    Ok(trace)
}

/// Prediction stage: low-dimensional WMMSE on `h_low`, then one generator pass.
pub fn predict<T: Real>(
    gen: &Generator<T>,
    h_low: &ComplexMatrix,
    wmmse: &WmmseConfig,
    rng: &mut impl Rng,
) -> Result<ComplexMatrix, TrainError> {
    let v_low = wmmse_solve(h_low, wmmse, None)?.beam.v;
    let cfg = &gen.arch.config;
    let z = sample_noise(&[cfg.n_low, cfg.n_users, 2], rng);
    Ok(gen.forward(&z, &to_tensor(&v_low), &to_tensor(h_low), wmmse.power)?)
}
