//! Supervised training and self-supervised adaptation.
//!
//! Supervised training runs plain SGD over composited samples with the
//! three-branch objective; adaptation fine-tunes on unlabeled images by
//! holding the model's own predictions consistent against a frozen copy
//! of itself. Both loops are deterministic: one seeded generator drives
//! shuffling, batches accumulate in a fixed order, and a non-finite loss
//! aborts with context instead of being clamped away.

mod optim;

pub use optim::{AdamOptimizer, SgdOptimizer};

use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::data::SyntheticSample;
use crate::mattemath::{
    loss_alpha, loss_detail, loss_detail_anchor, loss_semantic, loss_soc,
    prediction_transition_mask, transition_mask, BranchVars, GOperator, LossWeights, Matte,
    MatteMathError, SupervisionTarget, DEFAULT_TRANSITION_ITERS, DEFAULT_TRANSITION_KERNEL,
};
use crate::net::{ForwardMode, Model, ModelOutputs, NetError, NORM_MOMENTUM};
use crate::scalar::Scalar;
use crate::tensor::{Graph, Shape, Tensor, TensorError, Var};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("dataset is empty")]
    EmptyDataset,

    #[error("no images to adapt on")]
    EmptyImageSet,

    #[error("config: {field}: {msg}")]
    Config { field: &'static str, msg: String },

    #[error("sample {index} has {what} shaped {got:?}, expected {expected:?}")]
    SampleShape { index: usize, what: &'static str, expected: Shape, got: Shape },

    #[error("{context}: loss is not finite ({value})")]
    NonFiniteLoss { context: String, value: f64 },

    #[error("expected {params} gradients, got {grads}")]
    GradientCount { params: usize, grads: usize },

    #[error("gradient {index} ({name}) has shape {got:?}, parameter is {expected:?}")]
    GradientShape { index: usize, name: String, expected: Shape, got: Shape },

    #[error(transparent)]
    Net(#[from] NetError),

    #[error(transparent)]
    MatteMath(#[from] MatteMathError),

    #[error(transparent)]
    Tensor(#[from] TensorError),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Which objectives contribute gradient. All sub-losses are still
/// computed and logged; deselected ones just don't enter the total, which
/// is what the ablation study toggles.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossSelection {
    pub semantic: bool,
    pub detail: bool,
    pub alpha: bool,
}

impl Default for LossSelection {
    fn default() -> Self {
        LossSelection { semantic: true, detail: true, alpha: true }
    }
}

impl LossSelection {
    pub fn any(&self) -> bool {
        self.semantic || self.detail || self.alpha
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Zero is allowed: a no-op run is a useful control.
    pub lr: f64,
    pub lr_decay_every: usize,
    pub lr_decay_factor: f64,
    /// Heavy-ball momentum; off by default so the update is the plain
    /// SGD rule.
    pub momentum: f64,
    pub weights: LossWeights,
    pub selection: LossSelection,
    pub transition_kernel: usize,
    pub transition_iters: usize,
    pub g_op: GOperator,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 40,
            batch_size: 8,
            lr: 0.01,
            lr_decay_every: 10,
            lr_decay_factor: 0.1,
            momentum: 0.0,
            weights: LossWeights::default(),
            selection: LossSelection::default(),
            transition_kernel: DEFAULT_TRANSITION_KERNEL,
            transition_iters: DEFAULT_TRANSITION_ITERS,
            g_op: GOperator::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let err = |field, msg: String| Err(TrainError::Config { field, msg });
        if self.epochs == 0 {
            return err("epochs", "must be at least 1".into());
        }
        if self.batch_size == 0 {
            return err("batch_size", "must be at least 1".into());
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return err("lr", format!("must be finite and non-negative, got {}", self.lr));
        }
        if self.lr_decay_every == 0 {
            return err("lr_decay_every", "must be at least 1".into());
        }
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor < 1.0) {
            return err(
                "lr_decay_factor",
                format!("must lie in (0,1), got {}", self.lr_decay_factor),
            );
        }
        if !(self.momentum >= 0.0 && self.momentum < 1.0) {
            return err("momentum", format!("must lie in [0,1), got {}", self.momentum));
        }
        if !self.selection.any() {
            return err("selection", "at least one loss must be selected".into());
        }
        if self.transition_kernel < 3 || self.transition_kernel % 2 == 0 {
            return err(
                "transition_kernel",
                format!("must be odd and at least 3, got {}", self.transition_kernel),
            );
        }
        if self.transition_iters == 0 {
            return err("transition_iters", "must be at least 1".into());
        }
        self.weights.validate()?;
        Ok(())
    }

    /// Step schedule: the rate drops by `lr_decay_factor` once per
    /// `lr_decay_every` epochs, so it never increases.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr * self.lr_decay_factor.powi((epoch / self.lr_decay_every) as i32)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SocConfig {
    pub steps: usize,
    pub lr: f64,
    /// Pin normalization layers: affine parameters get no gradient and
    /// running statistics stop updating.
    pub freeze_norm: bool,
    pub transition_kernel: usize,
    pub transition_iters: usize,
    pub g_op: GOperator,
    pub seed: u64,
}

impl Default for SocConfig {
    fn default() -> Self {
        SocConfig {
            steps: 100,
            lr: 1e-4,
            freeze_norm: true,
            transition_kernel: DEFAULT_TRANSITION_KERNEL,
            transition_iters: DEFAULT_TRANSITION_ITERS,
            g_op: GOperator::default(),
            seed: 0,
        }
    }
}

impl SocConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let err = |field, msg: String| Err(TrainError::Config { field, msg });
        if self.steps == 0 {
            return err("steps", "must be at least 1".into());
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return err("lr", format!("must be positive, got {}", self.lr));
        }
        if self.transition_kernel < 3 || self.transition_kernel % 2 == 0 {
            return err(
                "transition_kernel",
                format!("must be odd and at least 3, got {}", self.transition_kernel),
            );
        }
        if self.transition_iters == 0 {
            return err("transition_iters", "must be at least 1".into());
        }
        Ok(())
    }
}

/// One line per epoch of supervised training. Sub-losses are logged
/// unweighted; `loss_total` is the weighted sum of the selected ones.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub loss_total: f64,
    pub loss_semantic: f64,
    pub loss_detail: f64,
    pub loss_alpha: f64,
}

/// One line per adaptation step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SocRecord {
    pub step: usize,
    pub lr: f64,
    pub loss_cons: f64,
    pub loss_dd: f64,
    pub loss_total: f64,
}

/// Append-only run record, written as one JSON object per line.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainLog<R> {
    records: Vec<R>,
}

impl<R> Default for TrainLog<R> {
    fn default() -> Self {
        TrainLog { records: Vec::new() }
    }
}

impl<R> TrainLog<R> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, record: R) {
        self.records.push(record);
    }

    pub fn records(&self) -> &[R] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

impl<R: Serialize> TrainLog<R> {
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<(), TrainError> {
        for record in &self.records {
            serde_json::to_writer(&mut w, record)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }
}

impl<R: DeserializeOwned> TrainLog<R> {
    pub fn read_jsonl<Rd: BufRead>(r: Rd) -> Result<Self, TrainError> {
        let mut records = Vec::new();
        for line in r.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            records.push(serde_json::from_str(&line)?);
        }
        Ok(TrainLog { records })
    }
}

/// Concatenates per-sample tensors along the batch axis, in order.
fn stack_batch<T: Scalar>(parts: &[&Tensor<T>]) -> Tensor<T> {
    let s = parts[0].shape();
    let mut data = Vec::with_capacity(parts.len() * s.len());
    for p in parts {
        data.extend_from_slice(p.data());
    }
    Tensor::from_vec(Shape { n: parts.len() * s.n, ..s }, data).expect("uniform part shapes")
}

fn check_finite(context: impl Fn() -> String, value: f64) -> Result<f64, TrainError> {
    if !value.is_finite() {
        return Err(TrainError::NonFiniteLoss { context: context(), value });
    }
    Ok(value)
}

/// End-to-end supervised training with per-epoch shuffling and the step
/// lr schedule. Returns the per-epoch loss log.
pub fn train_supervised<T: Scalar>(
    model: &mut Model<T>,
    dataset: &[SyntheticSample<T>],
    config: &TrainConfig,
) -> Result<TrainLog<EpochRecord>, TrainError> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let img_shape = dataset[0].image.shape();
    for (index, s) in dataset.iter().enumerate() {
        if s.image.shape() != img_shape {
            return Err(TrainError::SampleShape {
                index,
                what: "image",
                expected: img_shape,
                got: s.image.shape(),
            });
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut opt = SgdOptimizer::new(config.momentum);
    let mut log = TrainLog::new();
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let has_norm = model.config().channel_norm;

    for epoch in 0..config.epochs {
        let lr = config.lr_at(epoch);
        order.shuffle(&mut rng);
        let mut sums = [0.0f64; 4];
        let mut seen = 0usize;
        for (batch_idx, batch) in order.chunks(config.batch_size).enumerate() {
            let image = stack_batch(&batch.iter().map(|&i| &dataset[i].image).collect::<Vec<_>>());
            let alpha_g =
                stack_batch(&batch.iter().map(|&i| dataset[i].alpha_g.tensor()).collect::<Vec<_>>());
            let fg = stack_batch(&batch.iter().map(|&i| &dataset[i].fg).collect::<Vec<_>>());
            let bg = stack_batch(&batch.iter().map(|&i| &dataset[i].bg).collect::<Vec<_>>());
            let m_d = transition_mask(
                &Matte::new(alpha_g.clone())?,
                config.transition_kernel,
                config.transition_iters,
            )?;

            let mut g = Graph::new();
            let iv = g.constant(image.clone());
            let pass = model.forward_on(&mut g, iv, ForwardMode::Train { freeze_norm: false })?;
            let ls = loss_semantic(&mut g, pass.s_p, &alpha_g, &config.g_op)?;
            let ld = loss_detail(&mut g, pass.d_p, &alpha_g, &m_d)?;
            let target = SupervisionTarget { alpha_g: &alpha_g, image: &image, fg: &fg, bg: &bg };
            let la = loss_alpha(&mut g, pass.alpha_p, &target)?;

            let sel = config.selection;
            let w = &config.weights;
            let mut total: Option<Var> = None;
            for (on, weight, term) in [
                (sel.semantic, w.semantic, ls),
                (sel.detail, w.detail, ld),
                (sel.alpha, w.alpha, la),
            ] {
                if !on {
                    continue;
                }
                let scaled = g.scale(term, T::of_f64(weight));
                total = Some(match total {
                    None => scaled,
                    Some(acc) => g.add(acc, scaled)?,
                });
            }
            let total = total.expect("selection validated non-empty");

            let mut values = [0.0f64; 4];
            for (slot, (name, var)) in
                [("total", total), ("semantic", ls), ("detail", ld), ("alpha", la)]
                    .into_iter()
                    .enumerate()
            {
                values[slot] = check_finite(
                    || format!("epoch {epoch}, batch {batch_idx}, {name} loss"),
                    g.value(var).item().into_f64(),
                )?;
            }

            g.backward(total)?;
            let grads: Vec<Option<Tensor<T>>> =
                pass.param_vars.iter().map(|&v| g.grad(v).cloned()).collect();
            opt.step(model.params_mut(), &grads, lr)?;
            if has_norm {
                model.update_norm_stats(&g, &pass, NORM_MOMENTUM);
            }

            let b = batch.len() as f64;
            for (sum, v) in sums.iter_mut().zip(values) {
                *sum += v * b;
            }
            seen += batch.len();
        }
        let n = seen as f64;
        log.push(EpochRecord {
            epoch,
            lr,
            loss_total: sums[0] / n,
            loss_semantic: sums[1] / n,
            loss_detail: sums[2] / n,
            loss_alpha: sums[3] / n,
        });
    }
    Ok(log)
}

/// What an adaptation run hands back: the step log plus, when a probe
/// image was given, the frozen duplicate's outputs on it at the start and
/// at the end. Equal outputs demonstrate the anchor model never moved.
pub struct SocOutcome<T: Scalar> {
    pub log: TrainLog<SocRecord>,
    pub probe_before: Option<ModelOutputs<T>>,
    pub probe_after: Option<ModelOutputs<T>>,
}

/// Self-supervised adaptation on unlabeled images.
///
/// A frozen duplicate is taken once up front; its detail predictions
/// anchor the fine-tuned model so boundary sharpness survives while the
/// consistency objective pulls semantics, detail and fusion together.
/// Steps go one image at a time in a reshuffled cycle.
pub fn adapt_soc<T: Scalar>(
    model: &mut Model<T>,
    images: &[Tensor<T>],
    config: &SocConfig,
    probe: Option<&Tensor<T>>,
) -> Result<SocOutcome<T>, TrainError> {
    config.validate()?;
    if images.is_empty() {
        return Err(TrainError::EmptyImageSet);
    }
    let frozen = model.clone_frozen();
    let probe_before = probe.map(|img| frozen.forward(img)).transpose()?;
    let anchors: Vec<Tensor<T>> = images
        .iter()
        .map(|img| Ok(frozen.forward(img)?.d_p))
        .collect::<Result<_, NetError>>()?;

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut adam = AdamOptimizer::new();
    let mut order: Vec<usize> = (0..images.len()).collect();
    let mut log = TrainLog::new();
    let has_norm = model.config().channel_norm;

    for step in 0..config.steps {
        if step % images.len() == 0 {
            order.shuffle(&mut rng);
        }
        let i = order[step % images.len()];

        let mut g = Graph::new();
        let iv = g.constant(images[i].clone());
        let pass =
            model.forward_on(&mut g, iv, ForwardMode::Train { freeze_norm: config.freeze_norm })?;
        let alpha = Matte::clamped(g.value(pass.alpha_p).clone())?;
        let mask =
            prediction_transition_mask(&alpha, config.transition_kernel, config.transition_iters)?;
        let vars = BranchVars { s_p: pass.s_p, d_p: pass.d_p, alpha_p: pass.alpha_p };
        let l_cons = loss_soc(&mut g, &vars, &mask, &config.g_op)?;
        let l_dd = loss_detail_anchor(&mut g, pass.d_p, &anchors[i], &mask)?;
        let total = g.add(l_cons, l_dd)?;

        let cons_v = check_finite(
            || format!("step {step}, consistency loss"),
            g.value(l_cons).item().into_f64(),
        )?;
        let dd_v = check_finite(
            || format!("step {step}, detail anchor loss"),
            g.value(l_dd).item().into_f64(),
        )?;

        g.backward(total)?;
        let grads: Vec<Option<Tensor<T>>> =
            pass.param_vars.iter().map(|&v| g.grad(v).cloned()).collect();
        adam.step(model.params_mut(), &grads, config.lr)?;
        if has_norm && !config.freeze_norm {
            model.update_norm_stats(&g, &pass, NORM_MOMENTUM);
        }

        log.push(SocRecord {
            step,
            lr: config.lr,
            loss_cons: cons_v,
            loss_dd: dd_v,
            loss_total: cons_v + dd_v,
        });
    }

    let probe_after = probe.map(|img| frozen.forward(img)).transpose()?;
    Ok(SocOutcome { log, probe_before, probe_after })
}

/// Mean consistency loss of the model's own predictions over `images`,
/// without updating anything. The before/after measurement for
/// adaptation.
pub fn soc_consistency<T: Scalar>(
    model: &Model<T>,
    images: &[Tensor<T>],
    config: &SocConfig,
) -> Result<f64, TrainError> {
    if images.is_empty() {
        return Err(TrainError::EmptyImageSet);
    }
    let mut sum = 0.0;
    for img in images {
        let mut g = Graph::new();
        let iv = g.constant(img.clone());
        let pass = model.forward_on(&mut g, iv, ForwardMode::Eval)?;
        let alpha = Matte::clamped(g.value(pass.alpha_p).clone())?;
        let mask =
            prediction_transition_mask(&alpha, config.transition_kernel, config.transition_iters)?;
        let vars = BranchVars { s_p: pass.s_p, d_p: pass.d_p, alpha_p: pass.alpha_p };
        let l = loss_soc(&mut g, &vars, &mask, &config.g_op)?;
        sum += g.value(l).item().into_f64();
    }
    Ok(sum / images.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{augment, gen_backgrounds, gen_foreground, ForegroundConfig};
    use crate::net::{ModelConfig, ParamKind};

    fn small_model_config(channel_norm: bool) -> ModelConfig {
        ModelConfig {
            base_channels: 8,
            s_downsample_factor: 8,
            d_channels: 8,
            d_layers: 8,
            input_size: (32, 32),
            channel_norm,
            ..Default::default()
        }
    }

    fn tiny_dataset(n: usize) -> Vec<SyntheticSample<f64>> {
        let pool = gen_backgrounds(100, (32, 32), 3);
        let mut out = Vec::new();
        for seed in 0..n as u64 {
            let (fg, alpha) =
                gen_foreground(seed, (32, 32), &ForegroundConfig::default()).unwrap();
            out.extend(augment(&fg, &alpha, &pool, 0, 1, seed).unwrap());
        }
        out
    }

    fn quick_config(epochs: usize, lr: f64, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs,
            batch_size: 2,
            lr,
            g_op: GOperator { factor: 8, ..Default::default() },
            seed,
            ..Default::default()
        }
    }

    #[test]
    fn config_validation_guards_every_field() {
        let ok = TrainConfig::default();
        assert!(ok.validate().is_ok());
        let cases: Vec<(&str, TrainConfig)> = vec![
            ("epochs", TrainConfig { epochs: 0, ..ok.clone() }),
            ("batch_size", TrainConfig { batch_size: 0, ..ok.clone() }),
            ("lr", TrainConfig { lr: -0.1, ..ok.clone() }),
            ("lr_decay_factor", TrainConfig { lr_decay_factor: 1.0, ..ok.clone() }),
            ("momentum", TrainConfig { momentum: 1.0, ..ok.clone() }),
            (
                "selection",
                TrainConfig {
                    selection: LossSelection { semantic: false, detail: false, alpha: false },
                    ..ok.clone()
                },
            ),
            ("transition_kernel", TrainConfig { transition_kernel: 4, ..ok.clone() }),
        ];
        for (field, config) in cases {
            assert!(
                matches!(config.validate(), Err(TrainError::Config { field: f, .. }) if f == field),
                "{field} should be rejected"
            );
        }
        assert!(TrainConfig { lr: 0.0, ..ok }.validate().is_ok(), "zero lr is a valid control");
    }

    #[test]
    fn lr_schedule_steps_down_and_never_up() {
        let config = TrainConfig::default();
        for epoch in 0..10 {
            assert_eq!(config.lr_at(epoch), 0.01);
        }
        for epoch in 10..20 {
            assert!((config.lr_at(epoch) - 0.001).abs() < 1e-15);
        }
        assert!((config.lr_at(25) - 0.0001).abs() < 1e-16);
        for epoch in 1..60 {
            assert!(config.lr_at(epoch) <= config.lr_at(epoch - 1));
        }
    }

    #[test]
    fn empty_and_ragged_datasets_are_rejected() {
        let mut model = Model::<f64>::build(small_model_config(false), 0).unwrap();
        assert!(matches!(
            train_supervised(&mut model, &[], &quick_config(1, 0.01, 0)),
            Err(TrainError::EmptyDataset)
        ));

        let mut mixed = tiny_dataset(1);
        let pool = gen_backgrounds(7, (16, 16), 1);
        let (fg, alpha) = gen_foreground(9, (16, 16), &ForegroundConfig::default()).unwrap();
        mixed.extend(augment(&fg, &alpha, &pool, 0, 1, 1).unwrap());
        assert!(matches!(
            train_supervised(&mut model, &mixed, &quick_config(1, 0.01, 0)),
            Err(TrainError::SampleShape { index: 1, .. })
        ));
    }

    #[test]
    fn zero_lr_training_is_a_bitwise_no_op() {
        let mut model = Model::<f64>::build(small_model_config(false), 1).unwrap();
        let before = model.params().to_vec();
        let log = train_supervised(&mut model, &tiny_dataset(2), &quick_config(2, 0.0, 3)).unwrap();
        assert_eq!(model.params(), &before[..]);
        assert_eq!(log.len(), 2);
        assert!(log.records().iter().all(|r| r.loss_total.is_finite()));
    }

    #[test]
    fn training_descends_and_reproduces_per_seed() {
        let dataset = tiny_dataset(3);
        let base = Model::<f64>::build(small_model_config(false), 7).unwrap();

        let mut a = base.clone();
        let log = train_supervised(&mut a, &dataset, &quick_config(10, 0.02, 5)).unwrap();
        let first = log.records().first().unwrap().loss_total;
        let last = log.records().last().unwrap().loss_total;
        assert!(last < first, "loss should drop: first {first}, last {last}");
        assert_eq!(log.len(), 10);
        for r in log.records() {
            assert_eq!(r.lr, 0.02, "schedule is flat inside the first decay window");
        }

        let mut b = base.clone();
        train_supervised(&mut b, &dataset, &quick_config(10, 0.02, 5)).unwrap();
        assert_eq!(a.params(), b.params(), "same seed must reproduce bitwise");

        let mut c = base.clone();
        train_supervised(&mut c, &dataset, &quick_config(10, 0.02, 6)).unwrap();
        assert_ne!(a.params(), c.params(), "different shuffle order must show up");
    }

    #[test]
    fn deselected_losses_get_no_gradient_but_are_still_logged() {
        let dataset = tiny_dataset(2);
        let base = Model::<f64>::build(small_model_config(false), 2).unwrap();

        // Alpha-only training must leave the semantic head untouched: its
        // parameters sit outside every selected loss path.
        let mut model = base.clone();
        let config = TrainConfig {
            selection: LossSelection { semantic: false, detail: false, alpha: true },
            ..quick_config(2, 0.02, 1)
        };
        let log = train_supervised(&mut model, &dataset, &config).unwrap();
        assert!(log.records()[0].loss_semantic > 0.0, "still measured");
        let head_before: Vec<_> = base
            .params()
            .iter()
            .filter(|p| p.name.starts_with("s_head"))
            .map(|p| p.tensor.clone())
            .collect();
        let head_after: Vec<_> = model
            .params()
            .iter()
            .filter(|p| p.name.starts_with("s_head"))
            .map(|p| p.tensor.clone())
            .collect();
        assert_eq!(head_before, head_after);
        // The encoder does move, via the alpha loss through fusion.
        assert_ne!(base.params()[0].tensor, model.params()[0].tensor);
    }

    #[test]
    fn jsonl_log_round_trips() {
        let mut log = TrainLog::new();
        log.push(EpochRecord {
            epoch: 0,
            lr: 0.01,
            loss_total: 1.25,
            loss_semantic: 0.5,
            loss_detail: 0.05,
            loss_alpha: 0.25,
        });
        log.push(EpochRecord {
            epoch: 1,
            lr: 0.01,
            loss_total: 1.0,
            loss_semantic: 0.4,
            loss_detail: 0.04,
            loss_alpha: 0.2,
        });
        let mut bytes = Vec::new();
        log.write_jsonl(&mut bytes).unwrap();
        assert_eq!(bytes.iter().filter(|&&b| b == b'\n').count(), 2);
        let back = TrainLog::<EpochRecord>::read_jsonl(bytes.as_slice()).unwrap();
        assert_eq!(back, log);
    }

    fn adaptation_images(n: usize) -> Vec<Tensor<f64>> {
        tiny_dataset(n).into_iter().map(|s| s.image).collect()
    }

    fn quick_soc(steps: usize, seed: u64) -> SocConfig {
        SocConfig {
            steps,
            lr: 1e-3,
            g_op: GOperator { factor: 8, ..Default::default() },
            seed,
            ..Default::default()
        }
    }

    #[test]
    fn adaptation_reduces_consistency_and_never_moves_the_anchor() {
        let images = adaptation_images(2);
        let mut model = Model::<f64>::build(small_model_config(false), 11).unwrap();
        let config = quick_soc(60, 4);
        let before = soc_consistency(&model, &images, &config).unwrap();

        let probe = images[0].clone();
        let outcome = adapt_soc(&mut model, &images, &config, Some(&probe)).unwrap();
        assert_eq!(outcome.log.len(), 60);
        assert_eq!(
            outcome.probe_before.unwrap(),
            outcome.probe_after.unwrap(),
            "frozen duplicate must be bit-stable"
        );

        let after = soc_consistency(&model, &images, &config).unwrap();
        assert!(after < before, "consistency should drop: before {before}, after {after}");
    }

    #[test]
    fn adaptation_requires_images() {
        let mut model = Model::<f64>::build(small_model_config(false), 0).unwrap();
        assert!(matches!(
            adapt_soc(&mut model, &[], &quick_soc(1, 0), None),
            Err(TrainError::EmptyImageSet)
        ));
    }

    #[test]
    fn freeze_norm_pins_statistics_and_affine_parameters() {
        let images = adaptation_images(2);
        let stats = |m: &Model<f64>| -> Vec<Tensor<f64>> {
            m.params()
                .iter()
                .filter(|p| matches!(p.kind, ParamKind::NormStat | ParamKind::NormAffine))
                .map(|p| p.tensor.clone())
                .collect()
        };

        let base = Model::<f64>::build(small_model_config(true), 3).unwrap();
        let mut frozen_run = base.clone();
        adapt_soc(&mut frozen_run, &images, &quick_soc(5, 1), None).unwrap();
        assert_eq!(stats(&base), stats(&frozen_run), "freeze_norm holds norm layers still");

        let mut live_run = base.clone();
        let config = SocConfig { freeze_norm: false, ..quick_soc(5, 1) };
        adapt_soc(&mut live_run, &images, &config, None).unwrap();
        assert_ne!(stats(&base), stats(&live_run), "unfrozen stats track activations");

        // Supervised training always updates the running statistics.
        let mut supervised = base.clone();
        train_supervised(&mut supervised, &tiny_dataset(2), &quick_config(1, 0.01, 0)).unwrap();
        assert_ne!(stats(&base), stats(&supervised));
    }
}
