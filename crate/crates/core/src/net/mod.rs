//! The three-branch matting network.
//!
//! A strided-conv encoder with an SE gate predicts coarse semantics at
//! 1/16 resolution; a thin full-resolution branch refines boundary detail
//! from the image plus upsampled encoder features; a fusion head combines
//! both into the final matte. One forward pass yields all three outputs
//! so the consistency losses can tie them together.
//!
//! Parameters live in the [`Model`] in a fixed order; every forward pass
//! re-registers them on a fresh graph, so the model itself stays free of
//! graph state and can be trained, cloned and serialized independently.

mod checkpoint;

pub use checkpoint::CHECKPOINT_MAGIC;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::gradcheck::{self, Case};
use crate::mattemath::Matte;
use crate::scalar::Scalar;
use crate::tensor::{Graph, Shape, Tensor, TensorError, Var};

/// Variance guard in the optional channel norm.
pub const NORM_EPS: f64 = 1e-5;
/// Blend factor for running-statistics updates of the channel norm.
pub const NORM_MOMENTUM: f64 = 0.1;

#[derive(Debug, thiserror::Error)]
pub enum NetError {
    #[error("config: {field} must {requirement}, got {got}")]
    Config { field: &'static str, requirement: &'static str, got: usize },

    #[error("input {dim} = {size} is not divisible by {divisor}")]
    IndivisibleInput { dim: &'static str, size: usize, divisor: usize },

    #[error("input must have 3 channels, got {got}")]
    ImageChannels { got: usize },

    #[error("input value {value} is outside [0,1]")]
    ImageRange { value: f64 },

    #[error("not a model checkpoint (bad magic)")]
    BadMagic,

    #[error("checkpoint header: {0}")]
    Header(#[from] serde_json::Error),

    #[error("checkpoint param {index}: header says {got:?}, config wiring expects {expected:?}")]
    ParamMismatch { index: usize, expected: String, got: String },

    #[error("checkpoint data ends inside parameter {name}")]
    TruncatedData { name: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Architecture hyperparameters. Defaults give a ~64k-parameter model.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Channels of the first encoder stage; later stages double twice,
    /// capped at 64.
    pub base_channels: usize,
    /// Total encoder downsampling; one stride-2 stage per factor of 2.
    pub s_downsample_factor: usize,
    /// Working width of the detail branch.
    pub d_channels: usize,
    /// Total conv layers in the detail branch.
    pub d_layers: usize,
    /// Resolution reduction inside the detail branch's middle section.
    pub d_internal_downsample: usize,
    /// Channel reduction of the SE gate's hidden layer.
    pub se_reduction: usize,
    /// (h, w) the model is configured for; forward accepts any size that
    /// meets the divisibility rules.
    pub input_size: (usize, usize),
    /// Per-channel affine normalization after each encoder conv, with
    /// running statistics. Off by default: batch statistics are noisy at
    /// toy batch sizes.
    pub channel_norm: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            base_channels: 16,
            s_downsample_factor: 16,
            d_channels: 16,
            d_layers: 12,
            d_internal_downsample: 4,
            se_reduction: 4,
            input_size: (64, 64),
            channel_norm: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), NetError> {
        if self.base_channels == 0 {
            return Err(NetError::Config {
                field: "base_channels",
                requirement: "be at least 1",
                got: 0,
            });
        }
        if !self.s_downsample_factor.is_power_of_two() || self.s_downsample_factor < 4 {
            return Err(NetError::Config {
                field: "s_downsample_factor",
                requirement: "be a power of two, at least 4",
                got: self.s_downsample_factor,
            });
        }
        if self.d_channels == 0 || self.d_channels > 64 {
            return Err(NetError::Config {
                field: "d_channels",
                requirement: "be in 1..=64",
                got: self.d_channels,
            });
        }
        if self.d_layers < 5 {
            return Err(NetError::Config {
                field: "d_layers",
                requirement: "be at least 5",
                got: self.d_layers,
            });
        }
        if !self.d_internal_downsample.is_power_of_two() {
            return Err(NetError::Config {
                field: "d_internal_downsample",
                requirement: "be a power of two",
                got: self.d_internal_downsample,
            });
        }
        let top = self.top_channels();
        if self.se_reduction == 0 || top % self.se_reduction != 0 {
            return Err(NetError::Config {
                field: "se_reduction",
                requirement: "divide the top encoder channel count",
                got: self.se_reduction,
            });
        }
        let (h, w) = self.input_size;
        for (dim, size) in [("height", h), ("width", w)] {
            check_divisible(dim, size, self.s_downsample_factor)?;
            check_divisible(dim, size, self.d_internal_downsample)?;
        }
        Ok(())
    }

    /// Number of stride-2 encoder stages.
    pub fn encoder_stages(&self) -> usize {
        self.s_downsample_factor.trailing_zeros() as usize
    }

    /// Output channels per encoder stage: doubles every other stage,
    /// capped at 64.
    pub fn encoder_channels(&self) -> Vec<usize> {
        (0..self.encoder_stages())
            .map(|i| (self.base_channels << ((i + 1) / 2)).min(64))
            .collect()
    }

    /// Channels of the deepest encoder feature map.
    pub fn top_channels(&self) -> usize {
        *self.encoder_channels().last().expect("at least two stages")
    }

    /// The two upsampling factors that undo `d_internal_downsample`.
    fn detail_upsamples(&self) -> (usize, usize) {
        let late = self.d_internal_downsample.min(2);
        (self.d_internal_downsample / late, late)
    }
}

fn check_divisible(dim: &'static str, size: usize, divisor: usize) -> Result<(), NetError> {
    if size == 0 || size % divisor != 0 {
        return Err(NetError::IndivisibleInput { dim, size, divisor });
    }
    Ok(())
}

/// What a parameter does; norm statistics are data, not weights, and are
/// never trained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    Weight,
    Bias,
    NormAffine,
    NormStat,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub tensor: Tensor<T>,
    pub kind: ParamKind,
    pub trainable: bool,
}

/// One named tensor slot plus how to initialize it.
struct ParamSpec {
    name: String,
    shape: Shape,
    kind: ParamKind,
    init: Init,
}

enum Init {
    /// Uniform in ±sqrt(6 / fan_in), for convs feeding a ReLU.
    Kaiming,
    /// Uniform in ±sqrt(6 / (fan_in + fan_out)), for convs feeding a
    /// sigmoid.
    Xavier,
    Zero,
    One,
}

#[derive(Debug, Clone, Copy)]
struct ConvHandle {
    w: usize,
    b: usize,
}

#[derive(Debug, Clone, Copy)]
struct NormHandle {
    gamma: usize,
    beta: usize,
    mu: usize,
    var: usize,
}

/// Parameter indices of every layer, derived once from the config.
#[derive(Debug, Clone)]
struct Layers {
    enc: Vec<ConvHandle>,
    enc_norm: Vec<Option<NormHandle>>,
    se_w1: ConvHandle,
    se_w2: ConvHandle,
    s_head: ConvHandle,
    d: Vec<ConvHandle>,
    d_norm: Vec<Option<NormHandle>>,
    f1: ConvHandle,
    f2: ConvHandle,
    f3: ConvHandle,
    f_norm: [Option<NormHandle>; 2],
}

fn push_conv(
    specs: &mut Vec<ParamSpec>,
    name: &str,
    co: usize,
    ci: usize,
    k: usize,
    init: Init,
) -> ConvHandle {
    specs.push(ParamSpec {
        name: format!("{name}.weight"),
        shape: Shape::new(co, ci, k, k),
        kind: ParamKind::Weight,
        init,
    });
    specs.push(ParamSpec {
        name: format!("{name}.bias"),
        shape: Shape::new(1, co, 1, 1),
        kind: ParamKind::Bias,
        init: Init::Zero,
    });
    ConvHandle { w: specs.len() - 2, b: specs.len() - 1 }
}

fn push_stat(
    specs: &mut Vec<ParamSpec>,
    name: String,
    channels: usize,
    kind: ParamKind,
    init: Init,
) -> usize {
    specs.push(ParamSpec { name, shape: Shape::new(1, channels, 1, 1), kind, init });
    specs.len() - 1
}

fn push_norm(specs: &mut Vec<ParamSpec>, name: &str, channels: usize) -> NormHandle {
    NormHandle {
        gamma: push_stat(specs, format!("{name}.gamma"), channels, ParamKind::NormAffine, Init::One),
        beta: push_stat(specs, format!("{name}.beta"), channels, ParamKind::NormAffine, Init::Zero),
        mu: push_stat(specs, format!("{name}.mu"), channels, ParamKind::NormStat, Init::Zero),
        var: push_stat(specs, format!("{name}.var"), channels, ParamKind::NormStat, Init::One),
    }
}

/// Single source of truth for parameter order, names and shapes. Build
/// initializes from it; checkpoint load verifies against it.
fn wire(config: &ModelConfig) -> (Vec<ParamSpec>, Layers) {
    let specs = &mut Vec::new();

    let channels = config.encoder_channels();
    let mut enc = Vec::new();
    let mut in_ch = 3;
    for (i, &c) in channels.iter().enumerate() {
        enc.push(push_conv(specs, &format!("enc{i}"), c, in_ch, 3, Init::Kaiming));
        in_ch = c;
    }

    let mut enc_norm = Vec::new();
    for (i, &c) in channels.iter().enumerate() {
        if config.channel_norm {
            enc_norm.push(Some(push_norm(specs, &format!("enc{i}"), c)));
        } else {
            enc_norm.push(None);
        }
    }

    let top = config.top_channels();
    let hidden = top / config.se_reduction;
    let se_w1 = push_conv(specs, "se1", hidden, top, 1, Init::Kaiming);
    let se_w2 = push_conv(specs, "se2", top, hidden, 1, Init::Xavier);
    let s_head = push_conv(specs, "s_head", 1, top, 3, Init::Xavier);

    let dc = config.d_channels;
    let d_in = 3 + top + channels[0];
    let mut d = Vec::new();
    for j in 0..config.d_layers {
        let name = format!("d{}", j + 1);
        let handle = if j == 0 {
            push_conv(specs, &name, dc, d_in, 1, Init::Kaiming)
        } else if j + 1 == config.d_layers {
            push_conv(specs, &name, 1, dc, 3, Init::Xavier)
        } else {
            push_conv(specs, &name, dc, dc, 3, Init::Kaiming)
        };
        d.push(handle);
    }

    // Every hidden detail conv is normalized; the predict head d{last}
    // stays raw so its logits can range freely.
    let mut d_norm = Vec::new();
    for j in 0..config.d_layers - 1 {
        if config.channel_norm {
            d_norm.push(Some(push_norm(specs, &format!("d{}", j + 1), dc)));
        } else {
            d_norm.push(None);
        }
    }

    let f1 = push_conv(specs, "f1", dc, top + dc, 1, Init::Kaiming);
    let f2 = push_conv(specs, "f2", dc, dc, 3, Init::Kaiming);
    let f3 = push_conv(specs, "f3", 1, dc, 3, Init::Xavier);
    let f_norm = if config.channel_norm {
        [Some(push_norm(specs, "f1", dc)), Some(push_norm(specs, "f2", dc))]
    } else {
        [None, None]
    };

    let layers = Layers { enc, enc_norm, se_w1, se_w2, s_head, d, d_norm, f1, f2, f3, f_norm };
    (std::mem::take(specs), layers)
}

/// How parameters enter the forward graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ForwardMode {
    /// Trainable parameters become gradient-tracked leaves. `freeze_norm`
    /// additionally pins the norm's affine parameters.
    Train { freeze_norm: bool },
    /// Everything enters as constants.
    Eval,
}

/// Graph handles from one forward pass.
pub struct ForwardPass {
    pub s_p: Var,
    pub d_p: Var,
    pub alpha_p: Var,
    /// One var per model parameter, in [`Model::params`] order; read
    /// gradients from these after backward.
    pub param_vars: Vec<Var>,
    /// Pre-normalization activations, for running-stat updates.
    norm_activations: Vec<(NormHandle, Var)>,
}

/// Plain-tensor outputs of an inference forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelOutputs<T> {
    /// Coarse semantics, (n,1,h/f,w/f), in (0,1).
    pub s_p: Tensor<T>,
    /// Boundary detail, (n,1,h,w), in (0,1).
    pub d_p: Tensor<T>,
    /// Final matte, (n,1,h,w), in (0,1).
    pub alpha_p: Tensor<T>,
}

impl<T: Scalar> ModelOutputs<T> {
    /// The final matte as a validated [`Matte`].
    pub fn alpha_matte(&self) -> Matte<T> {
        Matte::clamped(self.alpha_p.clone()).expect("alpha_p is single-channel")
    }
}

#[derive(Debug, Clone)]
pub struct Model<T: Scalar> {
    config: ModelConfig,
    params: Vec<Param<T>>,
    layers: Layers,
}

impl<T: Scalar> Model<T> {
    /// Deterministic initialization from the seed; identical seeds give
    /// bit-identical parameters at any precision.
    pub fn build(config: ModelConfig, seed: u64) -> Result<Model<T>, NetError> {
        config.validate()?;
        let (specs, layers) = wire(&config);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = specs
            .into_iter()
            .map(|spec| {
                let tensor = init_tensor(&mut rng, &spec);
                let trainable = spec.kind != ParamKind::NormStat;
                Param { name: spec.name, tensor, kind: spec.kind, trainable }
            })
            .collect();
        Ok(Model { config, params, layers })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<T>] {
        &mut self.params
    }

    /// Total scalar count across all parameters, statistics included.
    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.tensor.shape().len()).sum()
    }

    /// Deep copy with every parameter pinned; survives checkpointing.
    pub fn clone_frozen(&self) -> Model<T> {
        let mut frozen = self.clone();
        for p in &mut frozen.params {
            p.trainable = false;
        }
        frozen
    }

    /// Runs the network on an image already inserted into `g`. The caller
    /// controls whether the image itself tracks gradients. Input values
    /// are trusted; the tensor-level [`Model::forward`] validates range.
    pub fn forward_on(
        &self,
        g: &mut Graph<T>,
        image: Var,
        mode: ForwardMode,
    ) -> Result<ForwardPass, NetError> {
        let shape = g.shape(image);
        if shape.c != 3 {
            return Err(NetError::ImageChannels { got: shape.c });
        }
        check_divisible("height", shape.h, self.config.s_downsample_factor)?;
        check_divisible("width", shape.w, self.config.s_downsample_factor)?;
        check_divisible("height", shape.h, self.config.d_internal_downsample)?;
        check_divisible("width", shape.w, self.config.d_internal_downsample)?;

        let pv: Vec<Var> = self
            .params
            .iter()
            .map(|p| {
                let rg = match mode {
                    ForwardMode::Eval => false,
                    ForwardMode::Train { freeze_norm } => {
                        p.trainable
                            && match p.kind {
                                ParamKind::Weight | ParamKind::Bias => true,
                                ParamKind::NormAffine => !freeze_norm,
                                ParamKind::NormStat => false,
                            }
                    }
                };
                g.leaf(p.tensor.clone(), rg)
            })
            .collect();

        // Encoder: stride-2 stages; the first one doubles as the
        // low-level tap feeding the detail branch.
        let mut norm_activations = Vec::new();
        let mut x = image;
        let mut low = None;
        for (i, h) in self.layers.enc.iter().enumerate() {
            x = g.conv2d(x, pv[h.w], Some(pv[h.b]), 2, 1)?;
            x = self.normed(g, x, &pv, self.layers.enc_norm[i], &mut norm_activations)?;
            x = g.relu(x);
            if i == 0 {
                low = Some(x);
            }
        }
        let low = low.expect("encoder has at least two stages");

        let se = se_block(
            g,
            x,
            pv[self.layers.se_w1.w],
            pv[self.layers.se_w1.b],
            pv[self.layers.se_w2.w],
            pv[self.layers.se_w2.b],
        )?;
        let s_logits = g.conv2d(se, pv[self.layers.s_head.w], Some(pv[self.layers.s_head.b]), 1, 1)?;
        let s_p = g.sigmoid(s_logits);

        // Both downstream branches consume the same full-resolution view
        // of the semantic features.
        let se_up = g.upsample_bilinear(se, self.config.s_downsample_factor)?;
        let low_up = g.upsample_bilinear(low, 2)?;
        let with_se = g.concat_channels(image, se_up)?;
        let d_in = g.concat_channels(with_se, low_up)?;

        let d = &self.layers.d;
        let dn = &self.layers.d_norm;
        let last = d.len() - 1;
        let (up_first, up_second) = self.config.detail_upsamples();
        let d1 = {
            let mut y = g.conv2d(d_in, pv[d[0].w], Some(pv[d[0].b]), 1, 0)?;
            y = self.normed(g, y, &pv, dn[0], &mut norm_activations)?;
            g.relu(y)
        };
        let mut y = g.conv2d(d1, pv[d[1].w], Some(pv[d[1].b]), self.config.d_internal_downsample, 1)?;
        y = self.normed(g, y, &pv, dn[1], &mut norm_activations)?;
        y = g.relu(y);
        for j in 2..last - 2 {
            y = g.conv2d(y, pv[d[j].w], Some(pv[d[j].b]), 1, 1)?;
            y = self.normed(g, y, &pv, dn[j], &mut norm_activations)?;
            y = g.relu(y);
        }
        y = g.upsample_bilinear(y, up_first)?;
        y = g.conv2d(y, pv[d[last - 2].w], Some(pv[d[last - 2].b]), 1, 1)?;
        y = self.normed(g, y, &pv, dn[last - 2], &mut norm_activations)?;
        y = g.relu(y);
        y = g.upsample_bilinear(y, up_second)?;
        y = g.conv2d(y, pv[d[last - 1].w], Some(pv[d[last - 1].b]), 1, 1)?;
        y = self.normed(g, y, &pv, dn[last - 1], &mut norm_activations)?;
        y = g.relu(y);
        let d_feat = g.add(y, d1)?;
        let d_logits = g.conv2d(d_feat, pv[d[last].w], Some(pv[d[last].b]), 1, 1)?;
        let d_p = g.sigmoid(d_logits);

        let f_in = g.concat_channels(se_up, d_feat)?;
        let mut z = g.conv2d(f_in, pv[self.layers.f1.w], Some(pv[self.layers.f1.b]), 1, 0)?;
        z = self.normed(g, z, &pv, self.layers.f_norm[0], &mut norm_activations)?;
        z = g.relu(z);
        z = g.conv2d(z, pv[self.layers.f2.w], Some(pv[self.layers.f2.b]), 1, 1)?;
        z = self.normed(g, z, &pv, self.layers.f_norm[1], &mut norm_activations)?;
        z = g.relu(z);
        let a_logits = g.conv2d(z, pv[self.layers.f3.w], Some(pv[self.layers.f3.b]), 1, 1)?;
        let alpha_p = g.sigmoid(a_logits);

        Ok(ForwardPass { s_p, d_p, alpha_p, param_vars: pv, norm_activations })
    }

    /// Inference on a plain tensor. Validates the [0,1] range contract.
    pub fn forward(&self, image: &Tensor<T>) -> Result<ModelOutputs<T>, NetError> {
        for &v in image.data() {
            if !(v >= T::zero() && v <= T::one()) {
                return Err(NetError::ImageRange { value: v.into_f64() });
            }
        }
        let mut g = Graph::new();
        let iv = g.constant(image.clone());
        let pass = self.forward_on(&mut g, iv, ForwardMode::Eval)?;
        Ok(ModelOutputs {
            s_p: g.value(pass.s_p).clone(),
            d_p: g.value(pass.d_p).clone(),
            alpha_p: g.value(pass.alpha_p).clone(),
        })
    }

    /// Records the pre-norm activation and normalizes; identity for
    /// layers without a norm handle.
    fn normed(
        &self,
        g: &mut Graph<T>,
        x: Var,
        pv: &[Var],
        handle: Option<NormHandle>,
        acts: &mut Vec<(NormHandle, Var)>,
    ) -> Result<Var, NetError> {
        match handle {
            Some(h) => {
                acts.push((h, x));
                self.apply_norm(g, x, pv, h)
            }
            None => Ok(x),
        }
    }

    /// Normalize with running statistics as constants: gradients flow
    /// through the activations and the affine pair, never the stats.
    fn apply_norm(
        &self,
        g: &mut Graph<T>,
        x: Var,
        pv: &[Var],
        h: NormHandle,
    ) -> Result<Var, NetError> {
        let neg_mu = g.constant(self.params[h.mu].tensor.map(|v| -v));
        let inv_std =
            g.constant(self.params[h.var].tensor.map(|v| T::one() / (v + T::of_f64(NORM_EPS)).sqrt()));
        let x = g.add_channel_bias(x, neg_mu)?;
        let x = g.mul_channel_gate(x, inv_std)?;
        let x = g.mul_channel_gate(x, pv[h.gamma])?;
        Ok(g.add_channel_bias(x, pv[h.beta])?)
    }

    /// Folds the batch statistics of this pass's pre-norm activations
    /// into the running estimates. No-op for models without norm layers.
    pub fn update_norm_stats(&mut self, g: &Graph<T>, pass: &ForwardPass, momentum: f64) {
        let m = T::of_f64(momentum);
        let keep = T::one() - m;
        for &(h, var) in &pass.norm_activations {
            let x = g.value(var);
            let s = x.shape();
            let count = T::of_f64((s.n * s.h * s.w) as f64);
            for c in 0..s.c {
                let mut sum = T::zero();
                let mut sum_sq = T::zero();
                for n in 0..s.n {
                    for y in 0..s.h {
                        for xx in 0..s.w {
                            let v = x.at(n, c, y, xx);
                            sum += v;
                            sum_sq += v * v;
                        }
                    }
                }
                let mean = sum / count;
                let var = sum_sq / count - mean * mean;
                let mu_t = &mut self.params[h.mu].tensor;
                let old_mu = mu_t.at(0, c, 0, 0);
                mu_t.set(0, c, 0, 0, keep * old_mu + m * mean);
                let var_t = &mut self.params[h.var].tensor;
                let old_var = var_t.at(0, c, 0, 0);
                var_t.set(0, c, 0, 0, keep * old_var + m * var.max(T::zero()));
            }
        }
    }
}

fn init_tensor<T: Scalar>(rng: &mut ChaCha8Rng, spec: &ParamSpec) -> Tensor<T> {
    let s = spec.shape;
    let fan_in = s.c * s.h * s.w;
    let fan_out = s.n * s.h * s.w;
    let bound = match spec.init {
        Init::Zero => return Tensor::zeros(s),
        Init::One => return Tensor::full(s, T::one()),
        Init::Kaiming => (6.0 / fan_in as f64).sqrt(),
        Init::Xavier => (6.0 / (fan_in + fan_out) as f64).sqrt(),
    };
    Tensor::from_vec(s, (0..s.len()).map(|_| T::of_f64(rng.random_range(-bound..bound))).collect())
        .expect("length matches shape")
}

/// Channel attention: squeeze to per-channel means, excite through a
/// bottleneck, gate the input. `w1`/`w2` are 1x1 conv weights of shape
/// (hidden, c, 1, 1) and (c, hidden, 1, 1).
pub fn se_block<T: Scalar>(
    g: &mut Graph<T>,
    features: Var,
    w1: Var,
    b1: Var,
    w2: Var,
    b2: Var,
) -> Result<Var, TensorError> {
    let pooled = g.global_avg_pool(features);
    let z = g.conv2d(pooled, w1, Some(b1), 1, 0)?;
    let z = g.relu(z);
    let z = g.conv2d(z, w2, Some(b2), 1, 0)?;
    let gate = g.sigmoid(z);
    g.mul_channel_gate(features, gate)
}

/// Gradient checks owned by this module.
pub fn gradcheck_cases<T: Scalar>() -> Vec<Case<T>> {
    vec![Case::new(
        "se_block",
        5,
        |rng| {
            let features: Tensor<T> = gradcheck::uniform(rng, Shape::new(1, 2, 3, 3), 0.0, 1.0);
            let w1: Tensor<T> = gradcheck::uniform(rng, Shape::new(1, 2, 1, 1), -0.4, 0.4);
            // Solve for the bias that parks the single pre-ReLU value at a
            // drawn target with |t| >= 0.25, clear of the kink under any
            // probe reach.
            let gap: Vec<f64> = (0..2)
                .map(|c| {
                    (0..9).map(|i| features.data()[c * 9 + i].into_f64()).sum::<f64>() / 9.0
                })
                .collect();
            let z: f64 = gap
                .iter()
                .zip(w1.data())
                .map(|(&gc, &wc)| gc * wc.into_f64())
                .sum();
            let t = gradcheck::signed_away_from_zero::<f64>(rng, Shape::new(1, 1, 1, 1), 0.25)
                .data()[0];
            let b1 = Tensor::full(Shape::new(1, 1, 1, 1), T::of_f64(t - z));
            let w2 = gradcheck::uniform(rng, Shape::new(2, 1, 1, 1), -0.7, 0.7);
            let b2 = gradcheck::uniform(rng, Shape::new(1, 2, 1, 1), -0.5, 0.5);
            let target = gradcheck::uniform(rng, Shape::new(1, 2, 3, 3), 0.0, 1.0);
            vec![features, w1, b1, w2, b2, target]
        },
        |g, v| {
            let y = se_block(g, v[0], v[1], v[2], v[3], v[4])?;
            g.l2_mean_half(y, v[5])
        },
    )]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;

    fn test_image(h: usize, w: usize) -> Tensor<f64> {
        Tensor::from_fn(Shape::new(1, 3, h, w), |_, c, y, x| {
            ((c + 1) * (y * w + x + 7) % 97) as f64 / 96.0
        })
    }

    fn small_config() -> ModelConfig {
        ModelConfig {
            base_channels: 8,
            s_downsample_factor: 8,
            d_channels: 8,
            d_layers: 8,
            input_size: (32, 32),
            ..Default::default()
        }
    }

    #[test]
    fn config_rejects_out_of_contract_values() {
        let bad = ModelConfig { d_channels: 65, ..Default::default() };
        assert!(matches!(bad.validate(), Err(NetError::Config { field: "d_channels", .. })));
        let bad = ModelConfig { s_downsample_factor: 12, ..Default::default() };
        assert!(matches!(bad.validate(), Err(NetError::Config { field: "s_downsample_factor", .. })));
        let bad = ModelConfig { se_reduction: 5, ..Default::default() };
        assert!(matches!(bad.validate(), Err(NetError::Config { field: "se_reduction", .. })));
        let bad = ModelConfig { input_size: (60, 64), ..Default::default() };
        assert!(matches!(bad.validate(), Err(NetError::IndivisibleInput { .. })));
        assert!(ModelConfig::default().validate().is_ok());
    }

    #[test]
    fn build_is_deterministic_per_seed() {
        let a = Model::<f32>::build(ModelConfig::default(), 0).unwrap();
        let b = Model::<f32>::build(ModelConfig::default(), 0).unwrap();
        assert_eq!(a.params(), b.params());
        let c = Model::<f32>::build(ModelConfig::default(), 1).unwrap();
        assert_ne!(a.params(), c.params());
    }

    #[test]
    fn param_count_matches_closed_form() {
        // Hand-computed from the documented layout.
        // Encoder 3->16->32->32->64, all 3x3 + bias:
        //   448 + 4640 + 9248 + 18496 = 32832
        // SE 64->16->64, 1x1:          1040 + 1088 = 2128
        // s head 3x3 64->1:            577
        // detail: 1x1 83->16 = 1344; ten 3x3 16->16 = 23200; head 145
        // fusion: 1x1 80->16 = 1296; 3x3 16->16 = 2320; head 145
        let m = Model::<f64>::build(ModelConfig::default(), 0).unwrap();
        assert_eq!(m.param_count(), 32832 + 2128 + 577 + 1344 + 23200 + 145 + 1296 + 2320 + 145);
        assert_eq!(m.param_count(), 63987);

        // Norm adds gamma/beta/mu/var per channel of every hidden conv:
        // four encoder stages, eleven detail convs, two fusion convs.
        let m = Model::<f64>::build(ModelConfig { channel_norm: true, ..Default::default() }, 0)
            .unwrap();
        assert_eq!(m.param_count(), 63987 + 4 * (16 + 32 + 32 + 64) + 4 * 11 * 16 + 4 * 2 * 16);

        // Independent arithmetic for a second geometry.
        let m = Model::<f64>::build(small_config(), 0).unwrap();
        let enc = (3 * 8 * 9 + 8) + (8 * 16 * 9 + 16) + (16 * 16 * 9 + 16);
        let se = (16 * 4 + 4) + (4 * 16 + 16);
        let s_head = 16 * 9 + 1;
        let detail = (27 * 8 + 8) + 6 * (8 * 8 * 9 + 8) + (8 * 9 + 1);
        let fusion = (24 * 8 + 8) + (8 * 8 * 9 + 8) + (8 * 9 + 1);
        assert_eq!(m.param_count(), enc + se + s_head + detail + fusion);
    }

    #[test]
    fn forward_shapes_and_ranges_for_default_config() {
        let m = Model::<f64>::build(ModelConfig::default(), 3).unwrap();
        let out = m.forward(&test_image(64, 64)).unwrap();
        assert_eq!(out.s_p.shape(), Shape::new(1, 1, 4, 4));
        assert_eq!(out.d_p.shape(), Shape::new(1, 1, 64, 64));
        assert_eq!(out.alpha_p.shape(), Shape::new(1, 1, 64, 64));
        for t in [&out.s_p, &out.d_p, &out.alpha_p] {
            assert!(t.data().iter().all(|&v| v > 0.0 && v < 1.0), "sigmoid outputs stay open");
        }
    }

    #[test]
    fn shape_contract_holds_up_to_128() {
        let m = Model::<f32>::build(ModelConfig::default(), 0).unwrap();
        for hw in (16..=128).step_by(16) {
            let out = m.forward(&test_image(hw, hw).cast()).unwrap();
            assert_eq!(out.s_p.shape(), Shape::new(1, 1, hw / 16, hw / 16));
            assert_eq!(out.alpha_p.shape(), Shape::new(1, 1, hw, hw));
        }
        let out = m.forward(&test_image(32, 64).cast()).unwrap();
        assert_eq!(out.s_p.shape(), Shape::new(1, 1, 2, 4));
        let err = m.forward(&test_image(40, 64).cast()).unwrap_err();
        assert!(matches!(err, NetError::IndivisibleInput { .. }));
    }

    #[test]
    fn forward_is_pure() {
        let m = Model::<f32>::build(small_config(), 11).unwrap();
        let img: Tensor<f32> = test_image(32, 32).cast();
        assert_eq!(m.forward(&img).unwrap(), m.forward(&img).unwrap());
    }

    #[test]
    fn se_gate_saturates_to_identity_and_to_zero() {
        let mut g = Graph::<f64>::new();
        let features = g.constant(test_image(4, 4));
        let w1 = g.constant(Tensor::zeros(Shape::new(1, 3, 1, 1)));
        let b1 = g.constant(Tensor::zeros(Shape::new(1, 1, 1, 1)));
        let w2 = g.constant(Tensor::zeros(Shape::new(3, 1, 1, 1)));

        let open = g.constant(Tensor::full(Shape::new(1, 3, 1, 1), 50.0));
        let y = se_block(&mut g, features, w1, b1, w2, open).unwrap();
        let diff: f64 = g
            .value(y)
            .data()
            .iter()
            .zip(g.value(features).data())
            .map(|(&a, &b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(diff < 1e-5, "gate at sigmoid(50) must pass features through, diff {diff}");

        let closed = g.constant(Tensor::full(Shape::new(1, 3, 1, 1), -50.0));
        let y = se_block(&mut g, features, w1, b1, w2, closed).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v.abs() < 1e-5));
    }

    #[test]
    fn detail_and_fusion_parameters_cannot_reach_s_p() {
        let config = small_config();
        let img: Tensor<f64> = test_image(32, 32);
        let base = Model::<f64>::build(config.clone(), 5).unwrap();
        let before = base.forward(&img).unwrap();

        // Shove a mid detail conv's bias hard enough to clear any ReLU:
        // semantics must stay bit-identical, the matte must move (detail
        // features feed fusion).
        let mut poked = base.clone();
        let idx = poked.layers.d[3].b;
        poked.params_mut()[idx].tensor.data_mut()[0] += 10.0;
        let after = poked.forward(&img).unwrap();
        assert_eq!(after.s_p, before.s_p);
        assert_ne!(after.d_p, before.d_p);
        assert_ne!(after.alpha_p, before.alpha_p);

        // Bump a fusion conv: only the matte moves.
        let mut poked = base.clone();
        let idx = poked.layers.f2.b;
        poked.params_mut()[idx].tensor.data_mut()[0] += 10.0;
        let after = poked.forward(&img).unwrap();
        assert_eq!(after.s_p, before.s_p);
        assert_eq!(after.d_p, before.d_p);
        assert_ne!(after.alpha_p, before.alpha_p);

        // Bump the encoder: everything downstream moves.
        let mut poked = base.clone();
        let idx = poked.layers.enc[0].b;
        poked.params_mut()[idx].tensor.data_mut()[0] += 10.0;
        let after = poked.forward(&img).unwrap();
        assert_ne!(after.s_p, before.s_p);
        assert_ne!(after.d_p, before.d_p);
        assert_ne!(after.alpha_p, before.alpha_p);
    }

    #[test]
    fn clone_frozen_is_independent_and_gradient_free() {
        let config = small_config();
        let img: Tensor<f64> = test_image(32, 32);
        let mut m = Model::<f64>::build(config, 9).unwrap();
        let frozen = m.clone_frozen();
        assert_eq!(m.forward(&img).unwrap(), frozen.forward(&img).unwrap());

        let before = frozen.forward(&img).unwrap();
        for p in m.params_mut() {
            for v in p.tensor.data_mut() {
                *v += 0.01;
            }
        }
        assert_eq!(frozen.forward(&img).unwrap(), before, "frozen copy shares nothing");

        // Train-mode forward of a frozen model: only the image can carry
        // gradient; every parameter var stays grad-free after backward.
        let mut g = Graph::new();
        let iv = g.leaf(img.clone(), true);
        let pass = frozen.forward_on(&mut g, iv, ForwardMode::Train { freeze_norm: false }).unwrap();
        let target = g.constant(Tensor::full(Shape::new(1, 1, 32, 32), 0.25));
        let loss = g.l1_mean(pass.alpha_p, target).unwrap();
        g.backward(loss).unwrap();
        assert!(g.grad(iv).is_some());
        assert!(pass.param_vars.iter().all(|&v| g.grad(v).is_none()));
    }

    #[test]
    fn norm_layer_keeps_shapes_and_freezes_stats_on_request() {
        let config = ModelConfig { channel_norm: true, ..small_config() };
        let mut m = Model::<f64>::build(config, 2).unwrap();
        let img: Tensor<f64> = test_image(32, 32);

        let mut g = Graph::new();
        let iv = g.constant(img.clone());
        let pass = m.forward_on(&mut g, iv, ForwardMode::Train { freeze_norm: false }).unwrap();
        assert_eq!(g.shape(pass.alpha_p), Shape::new(1, 1, 32, 32));
        // Three encoder stages, seven hidden detail convs, two fusion convs.
        assert_eq!(pass.norm_activations.len(), 12);

        let stats_before: Vec<Tensor<f64>> = m
            .params()
            .iter()
            .filter(|p| p.kind == ParamKind::NormStat)
            .map(|p| p.tensor.clone())
            .collect();
        m.update_norm_stats(&g, &pass, NORM_MOMENTUM);
        let stats_after: Vec<Tensor<f64>> = m
            .params()
            .iter()
            .filter(|p| p.kind == ParamKind::NormStat)
            .map(|p| p.tensor.clone())
            .collect();
        assert_ne!(stats_before, stats_after, "running stats move toward batch stats");

        // freeze_norm pins the affine params in the graph; stats only move
        // when update_norm_stats is called, which SOC skips under freeze.
        let mut g = Graph::new();
        let iv = g.constant(img);
        let pass = m.forward_on(&mut g, iv, ForwardMode::Train { freeze_norm: true }).unwrap();
        let target = g.constant(Tensor::full(Shape::new(1, 1, 32, 32), 0.5));
        let loss = g.l1_mean(pass.alpha_p, target).unwrap();
        g.backward(loss).unwrap();
        for (i, p) in m.params().iter().enumerate() {
            if p.kind == ParamKind::NormAffine {
                assert!(g.grad(pass.param_vars[i]).is_none(), "{} got a gradient", p.name);
            }
        }
    }
}
