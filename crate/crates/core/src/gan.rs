//! Conditional generator and Wasserstein critic.
//!
//! The generator maps `concat(Z, V_low, H_low)` through a resize layer, an
//! encoder group and a decoder group (with encoder→decoder skip concats) to
//! a power-normalized high-dimensional beamformer. The critic scores
//! `concat(V, upsample(V_low))` with a scalar.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::autodiff::{GradMode, Graph, Padding, Real, Tensor, TensorError, Var};
use crate::linalg::{from_tensor, ComplexMatrix};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GanError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid architecture: {0}")]
    Config(String),
    #[error("antenna ratio {n_high}/{n_low} is not reachable with stride-2 upsampling")]
    Upsampling { n_high: usize, n_low: usize },
    #[error("generator produced an all-zero beamformer")]
    ZeroOutput,
    #[error("architecture fingerprint mismatch: expected {expected}, found {found}")]
    Fingerprint { expected: String, found: String },
    #[error("parameter set does not match the architecture: {0}")]
    Params(String),
}

/// Widths and sizes for both networks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GanConfig {
    pub n_low: usize,
    pub n_high: usize,
    pub n_users: usize,
    pub kernel: usize,
    pub resize_width: usize,
    pub encoder_widths: Vec<usize>,
    pub decoder_widths: Vec<usize>,
    pub disc_first_width: usize,
    pub disc_widths: Vec<usize>,
    pub leaky_slope: f64,
    pub ln_eps: f64,
}

impl Default for GanConfig {
    fn default() -> Self {
        GanConfig {
            n_low: 8,
            n_high: 32,
            n_users: 4,
            kernel: 3,
            resize_width: 64,
            encoder_widths: vec![64, 128, 128, 256, 256],
            decoder_widths: vec![256, 128, 128, 64],
            disc_first_width: 64,
            disc_widths: vec![64, 128, 256, 256],
            leaky_slope: 0.2,
            ln_eps: 1e-5,
        }
    }
}

impl GanConfig {
    pub fn for_dims(n_low: usize, n_high: usize, n_users: usize) -> Self {
        GanConfig {
            n_low,
            n_high,
            n_users,
            ..GanConfig::default()
        }
    }

    /// Same topology with every width divided by `divisor` (at least 1).
    pub fn narrowed(&self, divisor: usize) -> Self {
        let d = |w: usize| (w / divisor.max(1)).max(1);
        GanConfig {
            resize_width: d(self.resize_width),
            encoder_widths: self.encoder_widths.iter().map(|&w| d(w)).collect(),
            decoder_widths: self.decoder_widths.iter().map(|&w| d(w)).collect(),
            disc_first_width: d(self.disc_first_width),
            disc_widths: self.disc_widths.iter().map(|&w| d(w)).collect(),
            ..self.clone()
        }
    }

    pub fn upsampling_factor(&self) -> Result<usize, GanError> {
        if self.n_low == 0 || !self.n_high.is_multiple_of(self.n_low) {
            return Err(GanError::Upsampling {
                n_high: self.n_high,
                n_low: self.n_low,
            });
        }
        Ok(self.n_high / self.n_low)
    }

    fn validate(&self) -> Result<(), GanError> {
        let widths = self
            .encoder_widths
            .iter()
            .chain(&self.decoder_widths)
            .chain(&self.disc_widths)
            .chain([&self.resize_width, &self.disc_first_width]);
        if self.n_users == 0 || self.n_low == 0 || self.kernel == 0 || widths.into_iter().any(|&w| w == 0) {
            return Err(GanError::Config("dimensions and widths must be positive".into()));
        }
        if self.encoder_widths.len() != self.decoder_widths.len() + 1 || self.decoder_widths.is_empty() {
            return Err(GanError::Config(
                "the encoder group needs exactly one block more than the decoder group".into(),
            ));
        }
        if self.ln_eps.is_nan() || self.ln_eps <= 0.0 || self.leaky_slope.is_nan() || self.leaky_slope < 0.0 {
            return Err(GanError::Config("layer-norm eps and leaky slope must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Conv,
    ConvTranspose,
}

/// One convolutional block: conv, optional layer norm, optional leaky ReLU.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: (usize, usize),
    pub norm: bool,
    pub act: bool,
}

impl LayerSpec {
    fn encoder(name: String, cin: usize, cout: usize, kernel: usize, stride: (usize, usize)) -> Self {
        LayerSpec {
            name,
            kind: LayerKind::Conv,
            cin,
            cout,
            kernel,
            stride,
            norm: true,
            act: true,
        }
    }

    fn decoder(name: String, cin: usize, cout: usize, kernel: usize, stride: (usize, usize)) -> Self {
        LayerSpec {
            kind: LayerKind::ConvTranspose,
            ..Self::encoder(name, cin, cout, kernel, stride)
        }
    }

    pub fn kernel_shape(&self) -> [usize; 4] {
        let k = self.kernel;
        match self.kind {
            LayerKind::Conv => [k, k, self.cin, self.cout],
            LayerKind::ConvTranspose => [k, k, self.cout, self.cin],
        }
    }

    /// `(name, shape)` of every parameter in storage order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = vec![
            (format!("{}.kernel", self.name), self.kernel_shape().to_vec()),
            (format!("{}.bias", self.name), vec![self.cout]),
        ];
        if self.norm {
            out.push((format!("{}.ln_gain", self.name), vec![self.cout]));
            out.push((format!("{}.ln_offset", self.name), vec![self.cout]));
        }
        out
    }

    fn param_count(&self) -> usize {
        self.param_shapes()
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenArch {
    pub config: GanConfig,
    pub in_channels: usize,
    pub resize: Vec<LayerSpec>,
    pub encoder: Vec<LayerSpec>,
    pub decoder: Vec<LayerSpec>,
    /// `(encoder block, decoder block)`: the encoder output is concatenated
    /// onto the decoder block's input.
    pub skips: Vec<(usize, usize)>,
    pub head: LayerSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscArch {
    pub config: GanConfig,
    pub in_channels: usize,
    pub layers: Vec<LayerSpec>,
}

/// Antenna-axis strides of the decoder group and the resize decoders.
fn stride_plan(factor: usize, n_decoder: usize) -> Option<(Vec<usize>, Vec<usize>)> {
    if !factor.is_power_of_two() {
        return None;
    }
    let mut remaining = factor.trailing_zeros() as usize;
    let mut take = |n: usize| {
        (0..n)
            .map(|_| {
                if remaining > 0 {
                    remaining -= 1;
                    2
                } else {
                    1
                }
            })
            .collect::<Vec<_>>()
    };
    let decoder = take(n_decoder);
    let resize = take(2);
    (remaining == 0).then_some((decoder, resize))
}

impl GenArch {
    pub fn new(config: &GanConfig) -> Result<Self, GanError> {
        config.validate()?;
        let factor = config.upsampling_factor()?;
        let k = config.kernel;
        let n_dec = config.decoder_widths.len();
        let (dec_strides, resize_strides) = stride_plan(factor, n_dec).ok_or(GanError::Upsampling {
            n_high: config.n_high,
            n_low: config.n_low,
        })?;

        let in_channels = 6;
        let rw = config.resize_width;
        let resize = vec![
            LayerSpec::decoder("resize.dec0".into(), in_channels, rw, k, (resize_strides[0], 1)),
            LayerSpec::decoder("resize.dec1".into(), rw, rw, k, (resize_strides[1], 1)),
            LayerSpec::encoder("resize.enc0".into(), rw, rw, k, (1, 1)),
        ];
        let mut encoder = Vec::new();
        let mut c = rw;
        for (i, &w) in config.encoder_widths.iter().enumerate() {
            encoder.push(LayerSpec::encoder(format!("enc{i}"), c, w, k, (1, 1)));
            c = w;
        }
        let n_enc = encoder.len();
        let skips: Vec<(usize, usize)> = (0..n_dec).map(|j| (n_enc - 2 - j, j)).collect();
        let mut decoder = Vec::new();
        for (j, &w) in config.decoder_widths.iter().enumerate() {
            let tap = config.encoder_widths[skips[j].0];
            decoder.push(LayerSpec::decoder(format!("dec{j}"), c + tap, w, k, (dec_strides[j], 1)));
            c = w;
        }
        let head = LayerSpec {
            name: "head".into(),
            kind: LayerKind::Conv,
            cin: c,
            cout: 2,
            kernel: k,
            stride: (1, 1),
            norm: false,
            act: false,
        };
        Ok(GenArch {
            config: config.clone(),
            in_channels,
            resize,
            encoder,
            decoder,
            skips,
            head,
        })
    }

    pub fn layers(&self) -> impl Iterator<Item = &LayerSpec> {
        self.resize
            .iter()
            .chain(&self.encoder)
            .chain(&self.decoder)
            .chain(std::iter::once(&self.head))
    }

    pub fn param_count(&self) -> usize {
        self.layers().map(LayerSpec::param_count).sum()
    }

    pub fn fingerprint(&self) -> String {
        fingerprint("generator", self)
    }
}

impl DiscArch {
    pub fn new(config: &GanConfig) -> Result<Self, GanError> {
        config.validate()?;
        let k = config.kernel;
        let in_channels = 4;
        let mut layers = vec![LayerSpec {
            norm: false,
            ..LayerSpec::encoder("disc.conv0".into(), in_channels, config.disc_first_width, k, (1, 1))
        }];
        let mut c = config.disc_first_width;
        let mut h = config.n_high;
        for (i, &w) in config.disc_widths.iter().enumerate() {
            let s = if h >= 2 && h.is_multiple_of(2) { 2 } else { 1 };
            layers.push(LayerSpec::encoder(format!("disc.enc{i}"), c, w, k, (s, 1)));
            h /= s;
            c = w;
        }
        layers.push(LayerSpec {
            name: "disc.head".into(),
            kind: LayerKind::Conv,
            cin: c,
            cout: 1,
            kernel: k,
            stride: (1, 1),
            norm: false,
            act: false,
        });
        Ok(DiscArch {
            config: config.clone(),
            in_channels,
            layers,
        })
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(LayerSpec::param_count).sum()
    }

    pub fn fingerprint(&self) -> String {
        fingerprint("discriminator", self)
    }
}

fn fingerprint<A: Serialize>(kind: &str, arch: &A) -> String {
    let mut hasher = Sha256::new();
    hasher.update(kind.as_bytes());
    hasher.update(serde_json::to_vec(arch).expect("architecture serializes"));
    hex::encode(hasher.finalize())
}

/// Ordered named parameter tensors of one network.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams<T> {
    pub names: Vec<String>,
    pub tensors: Vec<Tensor<T>>,
    pub fingerprint: String,
}

impl<T: Real> NetworkParams<T> {
    /// He-normal kernels, zero biases, unit gains, zero offsets.
    fn init<'a>(layers: impl Iterator<Item = &'a LayerSpec>, fingerprint: String, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut names = Vec::new();
        let mut tensors = Vec::new();
        for layer in layers {
            for (name, shape) in layer.param_shapes() {
                let t = if name.ends_with(".kernel") {
                    let fan_in = (layer.kernel * layer.kernel * layer.cin) as f64;
                    let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("positive std");
                    Tensor::from_fn(&shape, |_| T::from_f64_lossy(normal.sample(&mut rng)))
                } else if name.ends_with(".ln_gain") {
                    Tensor::ones(&shape)
                } else {
                    Tensor::zeros(&shape)
                };
                names.push(name);
                tensors.push(t);
            }
        }
        NetworkParams {
            names,
            tensors,
            fingerprint,
        }
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn shapes(&self) -> Vec<&[usize]> {
        self.tensors.iter().map(|t| t.shape()).collect()
    }

    /// SHA-256 over names and raw values; changes whenever any value does.
    pub fn digest(&self) -> String {
        let mut hasher = Sha256::new();
        for (name, t) in self.names.iter().zip(&self.tensors) {
            hasher.update(name.as_bytes());
            let mut buf = Vec::with_capacity(t.len() * T::BYTES);
            for &v in t.data() {
                v.write_le(&mut buf);
            }
            hasher.update(&buf);
        }
        hex::encode(hasher.finalize())
    }

    pub fn map_values(&self, f: impl Fn(T) -> T) -> Self {
        NetworkParams {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(|t| t.map(&f)).collect(),
            fingerprint: self.fingerprint.clone(),
        }
    }

    pub fn check_fingerprint(&self, expected: &str) -> Result<(), GanError> {
        if self.fingerprint != expected {
            return Err(GanError::Fingerprint {
                expected: expected.to_string(),
                found: self.fingerprint.clone(),
            });
        }
        Ok(())
    }

    /// Adds every tensor to `g`, trainable or constant.
    pub fn load_into(&self, g: &mut Graph<T>, trainable: bool) -> Vec<Var> {
        self.tensors
            .iter()
            .map(|t| g.leaf(t.clone(), trainable))
            .collect()
    }
}

fn check_params<'a, T: Real>(
    layers: impl Iterator<Item = &'a LayerSpec>,
    fingerprint: &str,
    params: &NetworkParams<T>,
) -> Result<(), GanError> {
    params.check_fingerprint(fingerprint)?;
    let expected: Vec<(String, Vec<usize>)> = layers.flat_map(LayerSpec::param_shapes).collect();
    if expected.len() != params.len() {
        return Err(GanError::Params(format!(
            "expected {} tensors, found {}",
            expected.len(),
            params.len()
        )));
    }
    for ((name, shape), (got_name, t)) in expected.iter().zip(params.names.iter().zip(&params.tensors)) {
        if name != got_name || shape.as_slice() != t.shape() {
            return Err(GanError::Params(format!(
                "{got_name} {:?} where {name} {shape:?} was expected",
                t.shape()
            )));
        }
    }
    Ok(())
}

pub fn build_generator<T: Real>(config: &GanConfig, seed: u64) -> Result<(GenArch, NetworkParams<T>), GanError> {
    let arch = GenArch::new(config)?;
    let params = NetworkParams::init(arch.layers(), arch.fingerprint(), seed);
    Ok((arch, params))
}

pub fn build_discriminator<T: Real>(
    config: &GanConfig,
    seed: u64,
) -> Result<(DiscArch, NetworkParams<T>), GanError> {
    let arch = DiscArch::new(config)?;
    let params = NetworkParams::init(arch.layers.iter(), arch.fingerprint(), seed);
    Ok((arch, params))
}

/// Standard normal noise tensor.
pub fn sample_noise<T: Real>(shape: &[usize], rng: &mut impl rand::Rng) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::from_f64_lossy(StandardNormal.sample(rng)))
}

/// Repeats every antenna row `factor` times.
pub fn upsample_condition<T: Real>(v_low: &Tensor<T>, factor: usize) -> Result<Tensor<T>, GanError> {
    let s = v_low.shape();
    if s.len() != 3 {
        return Err(TensorError::RankMismatch {
            op: "upsample_condition",
            expected: 3,
            found: s.len(),
        }
        .into());
    }
    if factor == 0 {
        return Err(GanError::Config("upsampling factor must be positive".into()));
    }
    let row = s[1] * s[2];
    let mut data = Vec::with_capacity(v_low.len() * factor);
    for chunk in v_low.data().chunks(row) {
        for _ in 0..factor {
            data.extend_from_slice(chunk);
        }
    }
    Ok(Tensor::new(vec![s[0] * factor, s[1], s[2]], data)?)
}

/// Graph version of [`upsample_condition`].
fn repeat_rows<T: Real>(g: &mut Graph<T>, x: Var, factor: usize) -> Result<Var, TensorError> {
    if factor == 1 {
        return Ok(x);
    }
    let s = g.shape(x).to_vec();
    let flat = g.reshape(x, &[s[0], 1, s[1] * s[2]])?;
    let copies = vec![flat; factor];
    let tiled = g.concat(&copies, 1)?;
    g.reshape(tiled, &[s[0] * factor, s[1], s[2]])
}

/// `V·√(P / ΣV²)` on a real-view tensor node.
pub fn power_normalize_graph<T: Real>(g: &mut Graph<T>, v: Var, power: f64) -> Result<Var, GanError> {
    let sq = g.square(v);
    let energy = g.sum(sq);
    if g.value(energy).item() == T::zero() {
        return Err(GanError::ZeroOutput);
    }
    let inv = g.powf(energy, -0.5);
    let scale = g.scale(inv, power.sqrt());
    Ok(g.mul_scalar(v, scale)?)
}

/// `Ṽ·√(P / Tr(ṼᴴṼ))`.
pub fn power_normalize(v_tilde: &ComplexMatrix, power: f64) -> Result<ComplexMatrix, GanError> {
    let energy = crate::linalg::power(v_tilde);
    if energy == 0.0 {
        return Err(GanError::ZeroOutput);
    }
    Ok(v_tilde * crate::linalg::C64::new((power / energy).sqrt(), 0.0))
}

fn apply_layer<T: Real>(
    g: &mut Graph<T>,
    x: Var,
    spec: &LayerSpec,
    params: &mut std::slice::Iter<'_, Var>,
    cfg: &GanConfig,
) -> Result<Var, GanError> {
    let missing = || GanError::Params(format!("missing parameters for {}", spec.name));
    let kernel = *params.next().ok_or_else(missing)?;
    let bias = *params.next().ok_or_else(missing)?;
    let mut y = match spec.kind {
        LayerKind::Conv => g.conv2d(x, kernel, Some(bias), spec.stride, Padding::Same)?,
        LayerKind::ConvTranspose => g.conv2d_transpose(x, kernel, Some(bias), spec.stride, Padding::Same)?,
    };
    if spec.norm {
        let gain = *params.next().ok_or_else(missing)?;
        let offset = *params.next().ok_or_else(missing)?;
        y = g.layer_norm(y, gain, offset, cfg.ln_eps)?;
    }
    if spec.act {
        y = g.leaky_relu(y, cfg.leaky_slope);
    }
    Ok(y)
}

fn expect_shape<T: Real>(g: &Graph<T>, v: Var, expected: &[usize], op: &'static str) -> Result<(), GanError> {
    let found = g.shape(v);
    if found.len() != expected.len() {
        return Err(TensorError::RankMismatch {
            op,
            expected: expected.len(),
            found: found.len(),
        }
        .into());
    }
    for (axis, (&e, &f)) in expected.iter().zip(found).enumerate() {
        if e != f {
            return Err(TensorError::DimMismatch {
                op,
                axis,
                expected: e,
                found: f,
            }
            .into());
        }
    }
    Ok(())
}

/// Generator nodes: the raw head output and its power-normalized version.
#[derive(Debug, Clone, Copy)]
pub struct GenNodes {
    pub raw: Var,
    pub output: Var,
}

/// Builds the generator forward pass in `g`.
///
/// `ablate_skip` replaces the chosen skip tap by zeros.
#[allow(clippy::too_many_arguments)]
pub fn generator_graph<T: Real>(
    g: &mut Graph<T>,
    arch: &GenArch,
    params: &[Var],
    z: Var,
    v_low: Var,
    h_low: Var,
    power: f64,
    ablate_skip: Option<usize>,
) -> Result<GenNodes, GanError> {
    let cfg = &arch.config;
    let in_shape = [cfg.n_low, cfg.n_users, 2];
    expect_shape(g, z, &in_shape, "generator noise")?;
    expect_shape(g, v_low, &in_shape, "generator V_low")?;
    expect_shape(g, h_low, &in_shape, "generator H_low")?;
    let mut it = params.iter();
    let mut x = g.concat(&[z, v_low, h_low], 2)?;
    for spec in &arch.resize {
        x = apply_layer(g, x, spec, &mut it, cfg)?;
    }
    let mut taps = Vec::with_capacity(arch.encoder.len());
    for spec in &arch.encoder {
        x = apply_layer(g, x, spec, &mut it, cfg)?;
        taps.push(x);
    }
    for (j, spec) in arch.decoder.iter().enumerate() {
        let (e, _) = arch.skips[j];
        let mut tap = taps[e];
        if ablate_skip == Some(j) {
            let zeros = Tensor::zeros(g.shape(tap));
            tap = g.constant(zeros);
        }
        let factor = g.shape(x)[0] / g.shape(tap)[0];
        let tap = repeat_rows(g, tap, factor)?;
        let merged = g.concat(&[x, tap], 2)?;
        x = apply_layer(g, merged, spec, &mut it, cfg)?;
    }
    let raw = apply_layer(g, x, &arch.head, &mut it, cfg)?;
    if it.next().is_some() {
        return Err(GanError::Params("unused generator parameters".into()));
    }
    expect_shape(g, raw, &[cfg.n_high, cfg.n_users, 2], "generator output")?;
    let output = power_normalize_graph(g, raw, power)?;
    Ok(GenNodes { raw, output })
}

/// Builds the critic in `g`; `v_low_up` is the already upsampled condition.
pub fn discriminator_graph<T: Real>(
    g: &mut Graph<T>,
    arch: &DiscArch,
    params: &[Var],
    v: Var,
    v_low_up: Var,
) -> Result<Var, GanError> {
    let cfg = &arch.config;
    let shape = [cfg.n_high, cfg.n_users, 2];
    expect_shape(g, v, &shape, "critic input")?;
    expect_shape(g, v_low_up, &shape, "critic condition")?;
    let mut it = params.iter();
    let mut x = g.concat(&[v, v_low_up], 2)?;
    for spec in &arch.layers {
        x = apply_layer(g, x, spec, &mut it, cfg)?;
    }
    if it.next().is_some() {
        return Err(GanError::Params("unused critic parameters".into()));
    }
    Ok(g.sum(x))
}

/// Generator with its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Generator<T> {
    pub arch: GenArch,
    pub params: NetworkParams<T>,
}

impl<T: Real> Generator<T> {
    pub fn new(config: &GanConfig, seed: u64) -> Result<Self, GanError> {
        let (arch, params) = build_generator(config, seed)?;
        Ok(Generator { arch, params })
    }

    pub fn from_parts(arch: GenArch, params: NetworkParams<T>) -> Result<Self, GanError> {
        check_params(arch.layers(), &arch.fingerprint(), &params)?;
        Ok(Generator { arch, params })
    }

    /// Power-normalized output as a `[N_high, N_r, 2]` tensor.
    pub fn forward_tensor(
        &self,
        z: &Tensor<T>,
        v_low: &Tensor<T>,
        h_low: &Tensor<T>,
        power: f64,
        ablate_skip: Option<usize>,
    ) -> Result<Tensor<T>, GanError> {
        let mut g = Graph::new(GradMode::FirstOrder);
        let p = self.params.load_into(&mut g, false);
        let z = g.constant(z.clone());
        let v = g.constant(v_low.clone());
        let h = g.constant(h_low.clone());
        let nodes = generator_graph(&mut g, &self.arch, &p, z, v, h, power, ablate_skip)?;
        Ok(g.value(nodes.output).clone())
    }

    pub fn forward(
        &self,
        z: &Tensor<T>,
        v_low: &Tensor<T>,
        h_low: &Tensor<T>,
        power: f64,
    ) -> Result<ComplexMatrix, GanError> {
        Ok(from_tensor(&self.forward_tensor(z, v_low, h_low, power, None)?)?)
    }
}

/// Critic with its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Discriminator<T> {
    pub arch: DiscArch,
    pub params: NetworkParams<T>,
}

impl<T: Real> Discriminator<T> {
    pub fn new(config: &GanConfig, seed: u64) -> Result<Self, GanError> {
        let (arch, params) = build_discriminator(config, seed)?;
        Ok(Discriminator { arch, params })
    }

    pub fn from_parts(arch: DiscArch, params: NetworkParams<T>) -> Result<Self, GanError> {
        check_params(arch.layers.iter(), &arch.fingerprint(), &params)?;
        Ok(Discriminator { arch, params })
    }

    /// Critic value for `v` conditioned on the low-dimensional `v_low`.
    pub fn forward(&self, v: &Tensor<T>, v_low: &Tensor<T>) -> Result<f64, GanError> {
        let factor = self.arch.config.upsampling_factor()?;
        let mut g = Graph::new(GradMode::FirstOrder);
        let p = self.params.load_into(&mut g, false);
        let v = g.constant(v.clone());
        let c = g.constant(upsample_condition(v_low, factor)?);
        let d = discriminator_graph(&mut g, &self.arch, &p, v, c)?;
        Ok(g.value(d).item().as_f64())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::power;

    fn inputs<T: Real>(cfg: &GanConfig, seed: u64) -> [Tensor<T>; 3] {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = [cfg.n_low, cfg.n_users, 2];
        [sample_noise(&s, &mut rng), sample_noise(&s, &mut rng), sample_noise(&s, &mut rng)]
    }

    fn small(n_low: usize, n_high: usize) -> GanConfig {
        GanConfig::for_dims(n_low, n_high, 4).narrowed(8)
    }

    #[test]
    fn table_one_dims_give_32_by_4_output() {
        let cfg = GanConfig::default();
        let gen = Generator::<f64>::new(&cfg, 1).unwrap();
        let [z, v, h] = inputs(&cfg, 2);
        let out = gen.forward(&z, &v, &h, 1.0).unwrap();
        assert_eq!(out.shape(), (32, 4));
        assert!(out.iter().all(|c| c.re.is_finite() && c.im.is_finite()));
    }

    #[test]
    fn zero_conditions_give_finite_output() {
        let cfg = small(8, 32);
        let gen = Generator::<f64>::new(&cfg, 1).unwrap();
        let zeros = Tensor::zeros(&[8, 4, 2]);
        let [z, _, _] = inputs::<f64>(&cfg, 0);
        let out = gen.forward(&z, &zeros, &zeros, 1.0).unwrap();
        assert_eq!(out.shape(), (32, 4));
        assert!(out.iter().all(|c| c.re.is_finite() && c.im.is_finite()));
        // zero biases and offsets map an all-zero input to an all-zero output
        assert_eq!(gen.forward(&zeros, &zeros, &zeros, 1.0), Err(GanError::ZeroOutput));
    }

    #[test]
    fn equal_dims_use_unit_strides() {
        let cfg = small(8, 8);
        let arch = GenArch::new(&cfg).unwrap();
        assert!(arch.layers().all(|l| l.stride == (1, 1)));
        let gen = Generator::<f64>::new(&cfg, 3).unwrap();
        let [z, v, h] = inputs(&cfg, 4);
        assert_eq!(gen.forward(&z, &v, &h, 1.0).unwrap().shape(), (8, 4));
    }

    #[test]
    fn stride_plan_fills_decoder_group_first() {
        let strides = |n_low, n_high| {
            let arch = GenArch::new(&GanConfig::for_dims(n_low, n_high, 4)).unwrap();
            let dec: Vec<usize> = arch.decoder.iter().map(|l| l.stride.0).collect();
            let res: Vec<usize> = arch.resize.iter().map(|l| l.stride.0).collect();
            (dec, res)
        };
        assert_eq!(strides(8, 32), (vec![2, 2, 1, 1], vec![1, 1, 1]));
        assert_eq!(strides(8, 64), (vec![2, 2, 2, 1], vec![1, 1, 1]));
        assert_eq!(strides(1, 64), (vec![2, 2, 2, 2], vec![2, 2, 1]));
        for (lo, hi) in [(1, 128), (8, 24), (8, 12)] {
            assert!(matches!(
                GenArch::new(&GanConfig::for_dims(lo, hi, 4)),
                Err(GanError::Upsampling { .. })
            ));
        }
    }

    #[test]
    fn parameter_count_matches_closed_form() {
        let cfg = GanConfig::default();
        let k2 = cfg.kernel * cfg.kernel;
        // conv weights + bias, plus layer-norm gain and offset when normalized
        let block = |cin: usize, cout: usize, norm: bool| k2 * cin * cout + cout + if norm { 2 * cout } else { 0 };
        let rw = cfg.resize_width;
        let mut expected = block(6, rw, true) + 2 * block(rw, rw, true);
        let e = &cfg.encoder_widths;
        let mut c = rw;
        for &w in e {
            expected += block(c, w, true);
            c = w;
        }
        for (j, &w) in cfg.decoder_widths.iter().enumerate() {
            expected += block(c + e[e.len() - 2 - j], w, true);
            c = w;
        }
        expected += block(c, 2, false);
        let (arch, params) = build_generator::<f64>(&cfg, 0).unwrap();
        assert_eq!(arch.param_count(), expected);
        assert_eq!(params.scalar_count(), expected);

        let mut disc = block(4, cfg.disc_first_width, false);
        let mut c = cfg.disc_first_width;
        for &w in &cfg.disc_widths {
            disc += block(c, w, true);
            c = w;
        }
        disc += block(c, 1, false);
        let (darch, dparams) = build_discriminator::<f64>(&cfg, 0).unwrap();
        assert_eq!(darch.param_count(), disc);
        assert_eq!(dparams.scalar_count(), disc);
    }

    #[test]
    fn output_meets_power_budget() {
        let cfg = small(8, 32);
        let gen64 = Generator::<f64>::new(&cfg, 5).unwrap();
        let gen32 = Generator::<f32>::new(&cfg, 5).unwrap();
        for seed in 0..10 {
            let p = 0.5 + seed as f64;
            let [z, v, h] = inputs::<f64>(&cfg, seed);
            let out = gen64.forward(&z, &v, &h, p).unwrap();
            assert!((power(&out) / p - 1.0).abs() < 1e-9);
            let [z, v, h] = inputs::<f32>(&cfg, seed);
            let out = gen32.forward(&z, &v, &h, p).unwrap();
            assert!((power(&out) / p - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn forward_is_deterministic_and_noise_sensitive() {
        let cfg = small(8, 32);
        let gen = Generator::<f64>::new(&cfg, 6).unwrap();
        let [z, v, h] = inputs::<f64>(&cfg, 7);
        let a = gen.forward(&z, &v, &h, 1.0).unwrap();
        assert_eq!(a, gen.forward(&z, &v, &h, 1.0).unwrap());
        let [z2, _, _] = inputs::<f64>(&cfg, 8);
        let b = gen.forward(&z2, &v, &h, 1.0).unwrap();
        let gap = (&a - &b).iter().map(|c| c.norm()).fold(0.0, f64::max);
        assert!(gap > 0.0);
    }

    #[test]
    fn every_skip_connection_is_wired() {
        let cfg = small(8, 32);
        let gen = Generator::<f64>::new(&cfg, 9).unwrap();
        let [z, v, h] = inputs::<f64>(&cfg, 10);
        let base = gen.forward_tensor(&z, &v, &h, 1.0, None).unwrap();
        for j in 0..gen.arch.decoder.len() {
            let ablated = gen.forward_tensor(&z, &v, &h, 1.0, Some(j)).unwrap();
            let gap = base.zip_map(&ablated, |a, b| (a - b).abs()).max_abs();
            assert!(gap > 0.0, "skip {j} has no effect");
        }
    }

    #[test]
    fn zero_critic_scores_zero() {
        let cfg = small(8, 32);
        let mut disc = Discriminator::<f64>::new(&cfg, 11).unwrap();
        disc.params = disc.params.map_values(|_| 0.0);
        let [_, v_low, _] = inputs::<f64>(&cfg, 12);
        let v = sample_noise(&[32, 4, 2], &mut ChaCha8Rng::seed_from_u64(13));
        assert_eq!(disc.forward(&v, &v_low).unwrap(), 0.0);
    }

    #[test]
    fn critic_is_deterministic_and_checks_shapes() {
        let cfg = small(8, 32);
        let disc = Discriminator::<f64>::new(&cfg, 14).unwrap();
        let [_, v_low, _] = inputs::<f64>(&cfg, 15);
        let v = sample_noise(&[32, 4, 2], &mut ChaCha8Rng::seed_from_u64(16));
        let d = disc.forward(&v, &v_low).unwrap();
        assert!(d.is_finite());
        assert_eq!(d, disc.forward(&v, &v_low).unwrap());
        let wrong = Tensor::zeros(&[16, 4, 2]);
        assert!(disc.forward(&wrong, &v_low).is_err());
    }

    #[test]
    fn critic_input_gradient_matches_finite_differences() {
        let cfg = small(8, 32);
        let disc = Discriminator::<f64>::new(&cfg, 17).unwrap();
        let [_, v_low, _] = inputs::<f64>(&cfg, 18);
        let cond = upsample_condition(&v_low, 4).unwrap();
        let v0 = sample_noise::<f64>(&[32, 4, 2], &mut ChaCha8Rng::seed_from_u64(19));
        let eval = |v: &Tensor<f64>| {
            let mut g = Graph::new(GradMode::FirstOrder);
            let p = disc.params.load_into(&mut g, false);
            let v = g.param(v.clone());
            let c = g.constant(cond.clone());
            let d = discriminator_graph(&mut g, &disc.arch, &p, v, c).unwrap();
            let grad = g.grad(d, &[v]).unwrap()[0];
            (g.value(d).item(), g.value(grad).clone())
        };
        let (_, analytic) = eval(&v0);
        let h = 1e-6;
        let mut err = 0.0;
        for i in 0..v0.len() {
            let mut plus = v0.clone();
            plus.data_mut()[i] += h;
            let mut minus = v0.clone();
            minus.data_mut()[i] -= h;
            let fd = (eval(&plus).0 - eval(&minus).0) / (2.0 * h);
            err += (fd - analytic.data()[i]).powi(2);
        }
        assert!(err.sqrt() / analytic.sq_norm().sqrt() < 1e-5);
    }

    #[test]
    fn mismatched_parameters_are_rejected() {
        let a = Generator::<f64>::new(&small(8, 32), 0).unwrap();
        let b = Generator::<f64>::new(&small(8, 16), 0).unwrap();
        assert!(matches!(
            Generator::from_parts(a.arch.clone(), b.params.clone()),
            Err(GanError::Fingerprint { .. })
        ));
        let mut bad = a.params.clone();
        bad.tensors.pop();
        assert!(matches!(
            Generator::from_parts(a.arch.clone(), bad),
            Err(GanError::Params(_))
        ));
        assert!(Generator::from_parts(a.arch.clone(), a.params.clone()).is_ok());
    }

    #[test]
    fn upsample_repeats_rows() {
        let v = Tensor::<f64>::from_fn(&[8, 4, 2], |i| i as f64);
        assert_eq!(upsample_condition(&v, 1).unwrap(), v);
        let up = upsample_condition(&v, 4).unwrap();
        assert_eq!(up.shape(), &[32, 4, 2]);
        for r in 0..4 {
            assert_eq!(&up.data()[r * 8..(r + 1) * 8], &v.data()[0..8]);
        }
        assert!((up.sum() - 4.0 * v.sum()).abs() < 1e-9);
    }

    #[test]
    fn power_normalize_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let v: Tensor<f64> = sample_noise(&[8, 4, 2], &mut rng);
        let m = from_tensor(&v).unwrap();
        let scaled = &m * crate::linalg::C64::new(2.0 / power(&m).sqrt(), 0.0);
        let halved = power_normalize(&scaled, 1.0).unwrap();
        assert!((&halved - &scaled * crate::linalg::C64::new(0.5, 0.0)).iter().all(|c| c.norm() < 1e-15));
        let fixed = power_normalize(&halved, 1.0).unwrap();
        assert!((&fixed - &halved).iter().all(|c| c.norm() < 1e-15));
        let r = power_normalize(&m, 3.0).unwrap();
        assert!((power(&r) / 3.0 - 1.0).abs() < 1e-9);
        assert_eq!(
            power_normalize(&ComplexMatrix::zeros(2, 2), 1.0),
            Err(GanError::ZeroOutput)
        );
    }
}
