//! Matting-specific math: compositing, the semantic target operator, the
//! transition band around boundaries, and the loss stack built from them.

mod losses;
mod morphology;

pub use losses::{
    loss_alpha, loss_detail, loss_detail_anchor, loss_semantic, loss_soc, loss_total, BranchVars,
    SupervisionTarget, WeightedLosses,
};
pub use morphology::{dilate_binary, erode_binary, prediction_transition_mask, transition_mask};

use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;
use crate::tensor::{Graph, Shape, Tensor, TensorError, Var};

/// Default width of the semantic operator's blur kernel.
pub const DEFAULT_G_KERNEL: usize = 3;
/// Default sigma of the semantic operator's blur.
pub const DEFAULT_G_SIGMA: f64 = 1.0;
/// Default downsampling factor of the semantic operator.
pub const DEFAULT_G_FACTOR: usize = 16;
/// Default morphology kernel for transition masks.
pub const DEFAULT_TRANSITION_KERNEL: usize = 3;
/// Default morphology iterations for transition masks.
pub const DEFAULT_TRANSITION_ITERS: usize = 2;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MatteMathError {
    #[error("matte must be single-channel, got {shape}")]
    NotSingleChannel { shape: Shape },

    #[error("matte value {value} at ({n},{y},{x}) is outside [0,1]")]
    ValueOutOfRange { value: f64, n: usize, y: usize, x: usize },

    #[error("morphology kernel must be odd and at least 3, got {kernel}")]
    BadKernel { kernel: usize },

    #[error("binary map contains {value}, which is neither 0 nor 1")]
    NotBinary { value: f64 },

    #[error("loss weight {name} must be positive, got {value}")]
    NonPositiveWeight { name: &'static str, value: f64 },

    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// An alpha matte: single channel, every value in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Matte<T> {
    tensor: Tensor<T>,
}

impl<T: Scalar> Matte<T> {
    /// Validates channel count and range.
    pub fn new(tensor: Tensor<T>) -> Result<Self, MatteMathError> {
        let shape = tensor.shape();
        if shape.c != 1 {
            return Err(MatteMathError::NotSingleChannel { shape });
        }
        for n in 0..shape.n {
            for y in 0..shape.h {
                for x in 0..shape.w {
                    let v = tensor.at(n, 0, y, x);
                    if !(v >= T::zero() && v <= T::one()) {
                        return Err(MatteMathError::ValueOutOfRange { value: v.into_f64(), n, y, x });
                    }
                }
            }
        }
        Ok(Matte { tensor })
    }

    /// Clamps into `[0, 1]` instead of rejecting. For values that are a
    /// convex combination of in-range inputs up to floating point rounding.
    pub fn clamped(tensor: Tensor<T>) -> Result<Self, MatteMathError> {
        let shape = tensor.shape();
        if shape.c != 1 {
            return Err(MatteMathError::NotSingleChannel { shape });
        }
        Ok(Matte { tensor: tensor.map(|v| v.max(T::zero()).min(T::one())) })
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.tensor
    }

    pub fn into_tensor(self) -> Tensor<T> {
        self.tensor
    }

    pub fn shape(&self) -> Shape {
        self.tensor.shape()
    }

    pub fn at(&self, n: usize, y: usize, x: usize) -> T {
        self.tensor.at(n, 0, y, x)
    }
}

/// Binary membership map of the boundary transition band. Values are
/// exactly 0 or 1 in the carrier tensor so it can gate graph reductions
/// directly.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionMask<T> {
    tensor: Tensor<T>,
    ones: usize,
}

impl<T: Scalar> TransitionMask<T> {
    /// Wraps an existing map, validating that it is binary.
    pub fn new(tensor: Tensor<T>) -> Result<Self, MatteMathError> {
        let mut ones = 0;
        for &v in tensor.data() {
            if v == T::one() {
                ones += 1;
            } else if v != T::zero() {
                return Err(MatteMathError::NotBinary { value: v.into_f64() });
            }
        }
        Ok(TransitionMask { tensor, ones })
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.tensor
    }

    pub fn shape(&self) -> Shape {
        self.tensor.shape()
    }

    /// Number of pixels inside the band.
    pub fn count(&self) -> usize {
        self.ones
    }

    /// True when no pixel is in the band; masked losses degrade to zero.
    pub fn is_empty(&self) -> bool {
        self.ones == 0
    }
}

/// Loss weighting: total = semantic * L_s + detail * L_d + alpha * L_a.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub semantic: f64,
    pub detail: f64,
    pub alpha: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { semantic: 1.0, detail: 10.0, alpha: 1.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), MatteMathError> {
        for (name, value) in [("semantic", self.semantic), ("detail", self.detail), ("alpha", self.alpha)] {
            if !(value > 0.0) || !value.is_finite() {
                return Err(MatteMathError::NonPositiveWeight { name, value });
            }
        }
        Ok(())
    }
}

/// Per-pixel convex blend of foreground over background:
/// `out = alpha * fg + (1 - alpha) * bg`.
pub fn composite<T: Scalar>(
    alpha: &Matte<T>,
    fg: &Tensor<T>,
    bg: &Tensor<T>,
) -> Result<Tensor<T>, MatteMathError> {
    let a = alpha.shape();
    let fs = fg.shape();
    if fs != bg.shape() {
        return Err(TensorError::ShapeMismatch { op: "composite", lhs: fs, rhs: bg.shape() }.into());
    }
    if fs.n != a.n || fs.h != a.h || fs.w != a.w {
        return Err(TensorError::ShapeMismatch { op: "composite", lhs: a, rhs: fs }.into());
    }
    Ok(Tensor::from_fn(fs, |n, c, y, x| {
        let av = alpha.at(n, y, x);
        av * fg.at(n, c, y, x) + (T::one() - av) * bg.at(n, c, y, x)
    }))
}

/// Graph form of [`composite`], differentiable through `alpha`.
pub fn composite_var<T: Scalar>(
    g: &mut Graph<T>,
    alpha: Var,
    fg: Var,
    bg: Var,
) -> Result<Var, TensorError> {
    let fg_part = g.mul_broadcast_mono(alpha, fg)?;
    let inv = g.one_minus(alpha);
    let bg_part = g.mul_broadcast_mono(inv, bg)?;
    g.add(fg_part, bg_part)
}

/// The semantic target operator: average-pool downsampling by `factor`
/// followed by a normalized Gaussian blur with reflect padding. Applied to
/// ground truth it produces the coarse target the low-resolution semantic
/// head is trained against.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GOperator {
    pub factor: usize,
    pub kernel_size: usize,
    pub sigma: f64,
}

impl Default for GOperator {
    fn default() -> Self {
        GOperator { factor: DEFAULT_G_FACTOR, kernel_size: DEFAULT_G_KERNEL, sigma: DEFAULT_G_SIGMA }
    }
}

impl GOperator {
    /// Normalized 2-d kernel weights, row-major.
    pub fn kernel<T: Scalar>(&self) -> Vec<T> {
        gaussian_kernel_2d(self.kernel_size, self.sigma)
    }

    /// Differentiable application inside a graph.
    pub fn apply<T: Scalar>(&self, g: &mut Graph<T>, input: Var) -> Result<Var, TensorError> {
        let down = g.downsample_avg(input, self.factor)?;
        g.gaussian_blur(down, self.kernel_size, &self.kernel::<T>())
    }

    /// Plain tensor application; same code path as [`GOperator::apply`].
    pub fn apply_tensor<T: Scalar>(&self, input: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
        let mut g = Graph::new();
        let v = g.constant(input.clone());
        let out = self.apply(&mut g, v)?;
        Ok(g.value(out).clone())
    }

    /// Matte-to-matte application. The result is a convex combination of
    /// the input, clamped only to absorb floating point rounding.
    pub fn apply_matte<T: Scalar>(&self, input: &Matte<T>) -> Result<Matte<T>, MatteMathError> {
        let out = self.apply_tensor(input.tensor())?;
        Matte::clamped(out)
    }
}

/// Normalized Gaussian weights on a `size` x `size` grid.
pub fn gaussian_kernel_2d<T: Scalar>(size: usize, sigma: f64) -> Vec<T> {
    assert!(size % 2 == 1 && size > 0, "kernel size must be odd, got {size}");
    let r = (size / 2) as f64;
    let mut weights = vec![0.0f64; size * size];
    let mut sum = 0.0;
    for y in 0..size {
        for x in 0..size {
            let dy = y as f64 - r;
            let dx = x as f64 - r;
            let w = (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp();
            weights[y * size + x] = w;
            sum += w;
        }
    }
    weights.iter().map(|&w| T::of_f64(w / sum)).collect()
}
