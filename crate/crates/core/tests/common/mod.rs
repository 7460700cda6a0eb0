//! Finite-difference gradient checking shared by the gradient tests and
//! the acceptance runner.
#![allow(dead_code)]

use beamcast::autodiff::{GradMode, Graph, Padding, Tensor, Var};
use beamcast::gan::{discriminator_graph, generator_graph, GanConfig, NetworkParams};
use beamcast::gan::{build_discriminator, build_generator};
use beamcast::trainer::gradient_penalty_with;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const STEP: f64 = 1e-6;

pub fn random(rng: &mut impl Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Relative error `‖a − n‖ / max(‖a‖, ‖n‖)` between reverse-mode and
/// central-difference gradients of the scalar built by `f`.
///
/// At most `per_input` entries of each input are perturbed; the rest are
/// skipped. `mode` is used for both the analytic and the numeric passes.
pub fn gradcheck<F>(inputs: &[Tensor<f64>], mode: GradMode, per_input: usize, seed: u64, f: F) -> f64
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Var,
{
    let eval = |values: &[Tensor<f64>]| {
        let mut g = Graph::new(mode);
        let vars: Vec<Var> = values.iter().map(|t| g.leaf(t.clone(), true)).collect();
        let out = f(&mut g, &vars);
        g.value(out).item()
    };

    let mut g = Graph::new(mode);
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let out = f(&mut g, &vars);
    let grads = g.grad(out, &vars).expect("gradient");

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut diff, mut na, mut nn) = (0.0f64, 0.0f64, 0.0f64);
    let mut values = inputs.to_vec();
    for (i, &gv) in grads.iter().enumerate() {
        let analytic = g.value(gv).data().to_vec();
        let n = values[i].len();
        let picks = if n <= per_input {
            (0..n).collect()
        } else {
            sample(&mut rng, n, per_input).into_vec()
        };
        for j in picks {
            let orig = values[i].data()[j];
            values[i].data_mut()[j] = orig + STEP;
            let up = eval(&values);
            values[i].data_mut()[j] = orig - STEP;
            let down = eval(&values);
            values[i].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * STEP);
            diff += (analytic[j] - numeric).powi(2);
            na += analytic[j].powi(2);
            nn += numeric.powi(2);
        }
    }
    let scale = na.sqrt().max(nn.sqrt());
    if scale == 0.0 {
        0.0
    } else {
        diff.sqrt() / scale
    }
}

/// `Σ w ⊙ x` with a fixed random `w`, reducing a tensor to a scalar that
/// depends on every entry.
pub fn project(g: &mut Graph<f64>, x: Var, seed: u64) -> Var {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37);
    let w = random(&mut rng, g.shape(x));
    let w = g.constant(w);
    let y = g.mul(x, w).unwrap();
    g.sum(y)
}

/// Worst relative error per layer kind over `seeds` random instances.
pub fn layer_checks(seeds: std::ops::Range<u64>) -> Vec<(&'static str, f64)> {
    type Case = (&'static str, fn(&mut ChaCha8Rng) -> Vec<Tensor<f64>>, fn(&mut Graph<f64>, &[Var]) -> Var);
    let cases: Vec<Case> = vec![
        (
            "conv2d same stride (1,1)",
            |r| vec![random(r, &[5, 4, 2]), random(r, &[3, 3, 2, 3]), random(r, &[3])],
            |g, v| g.conv2d(v[0], v[1], Some(v[2]), (1, 1), Padding::Same).unwrap(),
        ),
        (
            "conv2d same stride (2,1)",
            |r| vec![random(r, &[6, 4, 2]), random(r, &[3, 3, 2, 3]), random(r, &[3])],
            |g, v| g.conv2d(v[0], v[1], Some(v[2]), (2, 1), Padding::Same).unwrap(),
        ),
        (
            "conv2d valid",
            |r| vec![random(r, &[5, 5, 2]), random(r, &[3, 3, 2, 2]), random(r, &[2])],
            |g, v| g.conv2d(v[0], v[1], Some(v[2]), (1, 1), Padding::Valid).unwrap(),
        ),
        (
            "conv2d_transpose stride (2,1)",
            |r| vec![random(r, &[4, 3, 2]), random(r, &[3, 3, 3, 2]), random(r, &[3])],
            |g, v| g.conv2d_transpose(v[0], v[1], Some(v[2]), (2, 1), Padding::Same).unwrap(),
        ),
        (
            "conv2d_transpose valid",
            |r| vec![random(r, &[3, 3, 2]), random(r, &[3, 3, 2, 2]), random(r, &[2])],
            |g, v| g.conv2d_transpose(v[0], v[1], Some(v[2]), (1, 1), Padding::Valid).unwrap(),
        ),
        (
            "layer_norm",
            |r| vec![random(r, &[8, 4, 2]), random(r, &[2]), random(r, &[2])],
            |g, v| g.layer_norm(v[0], v[1], v[2], 1e-5).unwrap(),
        ),
        (
            "leaky_relu",
            |r| vec![random(r, &[6, 4, 3])],
            |g, v| g.leaky_relu(v[0], 0.2),
        ),
        (
            "concat",
            |r| vec![random(r, &[4, 3, 2]), random(r, &[4, 3, 1]), random(r, &[4, 3, 3])],
            |g, v| g.concat(v, 2).unwrap(),
        ),
        (
            "elementwise chain",
            |r| vec![random(r, &[4, 3]), random(r, &[4, 3])],
            |g, v| {
                let p = g.mul(v[0], v[1]).unwrap();
                let s = g.square(v[0]);
                let s = g.add_scalar(s, 0.5);
                let q = g.sqrt(s);
                let w = g.powf(q, 1.5);
                let d = g.sub(p, w).unwrap();
                g.scale(d, -0.7)
            },
        ),
    ];
    cases
        .into_iter()
        .enumerate()
        .map(|(c, (name, make, build))| {
            let worst = seeds
                .clone()
                .map(|seed| {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed * 101 + c as u64);
                    let inputs = make(&mut rng);
                    gradcheck(&inputs, GradMode::FirstOrder, usize::MAX, seed, |g, v| {
                        let y = build(g, v);
                        project(g, y, seed)
                    })
                })
                .fold(0.0, f64::max);
            (name, worst)
        })
        .collect()
}

pub fn tiny_gan() -> GanConfig {
    GanConfig::for_dims(4, 16, 2).narrowed(16)
}

/// Worst relative error of the projected generator output over `seeds`,
/// with respect to all three inputs and a sample of every parameter tensor.
pub fn generator_check(seeds: std::ops::Range<u64>, per_input: usize) -> f64 {
    let cfg = tiny_gan();
    seeds
        .map(|seed| {
            let (arch, params): (_, NetworkParams<f64>) = build_generator(&cfg, seed).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let shape = [cfg.n_low, cfg.n_users, 2];
            let mut inputs = vec![random(&mut rng, &shape), random(&mut rng, &shape), random(&mut rng, &shape)];
            // Non-trivial affine layer-norm parameters.
            inputs.extend(params.tensors.iter().map(|t| t.zip_map(&random(&mut rng, t.shape()), |a, b| a + 0.1 * b)));
            gradcheck(&inputs, GradMode::FirstOrder, per_input, seed, |g, v| {
                let nodes = generator_graph(g, &arch, &v[3..], v[0], v[1], v[2], 1.0, None).unwrap();
                project(g, nodes.output, seed)
            })
        })
        .fold(0.0, f64::max)
}

/// Worst relative error of the critic score over `seeds`.
pub fn discriminator_check(seeds: std::ops::Range<u64>, per_input: usize) -> f64 {
    let cfg = tiny_gan();
    seeds
        .map(|seed| {
            let (arch, params): (_, NetworkParams<f64>) = build_discriminator(&cfg, seed).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let shape = [cfg.n_high, cfg.n_users, 2];
            let mut inputs = vec![random(&mut rng, &shape), random(&mut rng, &shape)];
            inputs.extend(params.tensors.iter().map(|t| t.zip_map(&random(&mut rng, t.shape()), |a, b| a + 0.1 * b)));
            gradcheck(&inputs, GradMode::FirstOrder, per_input, seed, |g, v| {
                discriminator_graph(g, &arch, &v[2..], v[0], v[1]).unwrap()
            })
        })
        .fold(0.0, f64::max)
}

/// Two-layer critic `Σ conv(lrelu(conv(x)))` used for penalty checks.
pub fn two_layer_critic(g: &mut Graph<f64>, x: Var, w: &[Var]) -> Var {
    let h = g.conv2d(x, w[0], Some(w[1]), (1, 1), Padding::Same).unwrap();
    let h = g.leaky_relu(h, 0.2);
    let y = g.conv2d(h, w[2], Some(w[3]), (1, 1), Padding::Same).unwrap();
    g.sum(y)
}

/// Relative error of `d(GP)/dθ` for the two-layer critic, where the
/// penalty itself contains `∇_x D`.
pub fn penalty_check(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let point = random(&mut rng, &[6, 4, 2]);
    let weights = vec![
        random(&mut rng, &[3, 3, 2, 3]),
        random(&mut rng, &[3]),
        random(&mut rng, &[3, 3, 3, 1]),
        random(&mut rng, &[1]),
    ];
    gradcheck(&weights, GradMode::Differentiable, usize::MAX, seed, |g, w| {
        let (gp, _) = gradient_penalty_with(g, point.clone(), |g, x| Ok(two_layer_critic(g, x, w))).unwrap();
        gp
    })
}

/// Penalty of the linear critic `D(x) = Σx` over a tensor of `shape`,
/// whose exact value is `(√n − 1)²`.
pub fn linear_penalty(shape: &[usize], seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut g = Graph::<f64>::new(GradMode::Differentiable);
    let (gp, _) = gradient_penalty_with(&mut g, random(&mut rng, shape), |g, x| Ok(g.sum(x))).unwrap();
    g.value(gp).item()
}
