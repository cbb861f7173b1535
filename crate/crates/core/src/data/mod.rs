//! Synthetic training data, trimaps from depth, and dataset I/O.
//!
//! There is no bundled image corpus: foregrounds, backgrounds and domain
//! shifts are all procedural and deterministic per seed, so datasets are
//! reproducible from a config alone. Every generated sample carries its
//! compositing parts and satisfies `image = alpha*fg + (1-alpha)*bg`
//! exactly by construction.

mod io;
mod synth;

pub use io::{
    read_dataset, read_gray, read_image_dir, read_manifest, read_rgb, write_dataset, write_gray,
    write_manifest, write_rgb, Manifest, ManifestEntry,
};
pub use synth::{augment, gen_backgrounds, gen_foreground, ForegroundConfig};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::mattemath::{
    composite, dilate_binary, erode_binary, gaussian_kernel_2d, Matte, MatteMathError,
};
use crate::scalar::Scalar;
use crate::tensor::{Graph, Shape, Tensor, TensorError};

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("{dim} = {size} is not divisible by {divisor}")]
    SizeNotDivisible { dim: &'static str, size: usize, divisor: usize },

    #[error("config: {field}: {msg}")]
    InvalidConfig { field: &'static str, msg: String },

    #[error("background pool is empty but {n_composites} composites were requested")]
    EmptyBackgroundPool { n_composites: usize },

    #[error("{what} has shape {got:?}, expected {expected:?}")]
    ShapeMismatch { what: &'static str, expected: Shape, got: Shape },

    #[error("depth map needs {expected} values, got {got}")]
    DepthLength { expected: usize, got: usize },

    #[error("depth value at index {index} is {value}; depths must be finite and non-negative")]
    BadDepth { index: usize, value: f64 },

    #[error("trimap values must be 0, 0.5 or 1, got {value}")]
    NotTrimapValue { value: f64 },

    #[error("unsupported image extension {0:?}; use png, ppm or pgm")]
    UnsupportedExtension(String),

    #[error(transparent)]
    Matte(#[from] MatteMathError),

    #[error(transparent)]
    Tensor(#[from] TensorError),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Which side of the deployment gap a sample imitates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DomainTag {
    Source,
    Shifted,
}

impl std::fmt::Display for DomainTag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            DomainTag::Source => write!(f, "source"),
            DomainTag::Shifted => write!(f, "shifted"),
        }
    }
}

/// A composited training sample together with its parts.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSample<T> {
    pub image: Tensor<T>,
    pub alpha_g: Matte<T>,
    pub fg: Tensor<T>,
    pub bg: Tensor<T>,
    pub domain_tag: DomainTag,
}

impl<T: Scalar> SyntheticSample<T> {
    /// Builds the image from its parts, making the compositing equation
    /// hold exactly.
    pub fn compose(
        alpha_g: Matte<T>,
        fg: Tensor<T>,
        bg: Tensor<T>,
        domain_tag: DomainTag,
    ) -> Result<Self, DataError> {
        let image = composite(&alpha_g, &fg, &bg)?;
        Ok(SyntheticSample { image, alpha_g, fg, bg, domain_tag })
    }

    /// Assembles a sample from already-existing tensors (e.g. quantized
    /// files); only shapes are verified, not the compositing equation.
    pub fn from_parts(
        image: Tensor<T>,
        alpha_g: Matte<T>,
        fg: Tensor<T>,
        bg: Tensor<T>,
        domain_tag: DomainTag,
    ) -> Result<Self, DataError> {
        let expect_rgb = Shape { c: 3, ..alpha_g.shape() };
        for (what, t) in [("image", &image), ("fg", &fg), ("bg", &bg)] {
            if t.shape() != expect_rgb {
                return Err(DataError::ShapeMismatch { what, expected: expect_rgb, got: t.shape() });
            }
        }
        Ok(SyntheticSample { image, alpha_g, fg, bg, domain_tag })
    }

    /// Largest absolute deviation from the compositing equation.
    pub fn recomposition_error(&self) -> f64 {
        let rebuilt = composite(&self.alpha_g, &self.fg, &self.bg).expect("shapes were validated");
        self.image
            .data()
            .iter()
            .zip(rebuilt.data())
            .map(|(&a, &b)| (a - b).abs().into_f64())
            .fold(0.0, f64::max)
    }
}

/// Distances from the camera; smaller means closer.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    h: usize,
    w: usize,
    values: Vec<f64>,
}

impl DepthMap {
    pub fn new(h: usize, w: usize, values: Vec<f64>) -> Result<Self, DataError> {
        if values.len() != h * w {
            return Err(DataError::DepthLength { expected: h * w, got: values.len() });
        }
        for (index, &value) in values.iter().enumerate() {
            if !(value.is_finite() && value >= 0.0) {
                return Err(DataError::BadDepth { index, value });
            }
        }
        Ok(DepthMap { h, w, values })
    }

    pub fn from_fn(h: usize, w: usize, f: impl Fn(usize, usize) -> f64) -> Result<Self, DataError> {
        Self::new(h, w, (0..h * w).map(|i| f(i / w, i % w)).collect())
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.h, self.w)
    }

    pub fn at(&self, y: usize, x: usize) -> f64 {
        self.values[y * self.w + x]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

/// Per-pixel label: 1 definite foreground, 0 definite background, 0.5
/// unknown.
#[derive(Debug, Clone, PartialEq)]
pub struct Trimap<T> {
    tensor: Tensor<T>,
}

impl<T: Scalar> Trimap<T> {
    pub fn new(tensor: Tensor<T>) -> Result<Self, DataError> {
        let s = tensor.shape();
        if s.c != 1 {
            return Err(MatteMathError::NotSingleChannel { shape: s }.into());
        }
        let half = T::of_f64(0.5);
        for &v in tensor.data() {
            if v != T::zero() && v != T::one() && v != half {
                return Err(DataError::NotTrimapValue { value: v.into_f64() });
            }
        }
        Ok(Trimap { tensor })
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.tensor
    }

    pub fn shape(&self) -> Shape {
        self.tensor.shape()
    }

    pub fn at(&self, y: usize, x: usize) -> T {
        self.tensor.at(0, 0, y, x)
    }

    /// (foreground, background, unknown) pixel counts.
    pub fn counts(&self) -> (usize, usize, usize) {
        let mut fg = 0;
        let mut bg = 0;
        let mut unknown = 0;
        for &v in self.tensor.data() {
            if v == T::one() {
                fg += 1;
            } else if v == T::zero() {
                bg += 1;
            } else {
                unknown += 1;
            }
        }
        (fg, bg, unknown)
    }

    pub fn into_matte(self) -> Matte<T> {
        Matte::new(self.tensor).expect("trimap values are valid matte values")
    }
}

/// Splits the reversed depth map at `threshold` into an initial
/// foreground, then carves the trimap: 1 on the eroded foreground, 0
/// outside the dilated one, 0.5 in the uncertainty band between.
///
/// Reversal is per map: `reversed = max(depth) - depth`, so closer pixels
/// score higher. Anything nearer than the person, like a held object,
/// lands in the foreground; the label is geometric, not semantic.
pub fn depth_to_trimap<T: Scalar>(
    depth: &DepthMap,
    threshold: f64,
    kernel: usize,
    iterations: usize,
) -> Result<Trimap<T>, DataError> {
    if iterations == 0 {
        return Err(DataError::InvalidConfig {
            field: "iterations",
            msg: "must be at least 1".to_string(),
        });
    }
    let max = depth.values.iter().cloned().fold(0.0, f64::max);
    let fg0 = Tensor::from_vec(
        Shape::new(1, 1, depth.h, depth.w),
        depth
            .values
            .iter()
            .map(|&v| if max - v >= threshold { T::one() } else { T::zero() })
            .collect(),
    )
    .expect("length checked at construction");
    let core = erode_binary(&fg0, kernel, iterations)?;
    let reach = dilate_binary(&fg0, kernel, iterations)?;
    let half = T::of_f64(0.5);
    let data = core
        .data()
        .iter()
        .zip(reach.data())
        .map(|(&c, &r)| if c == T::one() { T::one() } else if r == T::one() { half } else { T::zero() })
        .collect();
    Trimap::new(Tensor::from_vec(fg0.shape(), data).expect("length preserved"))
}

/// Appearance shift applied to held-out data. The default imitates a
/// different capture pipeline: darker, flatter, textured background,
/// slightly soft focus.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ShiftConfig {
    /// Added to every pixel after the contrast curve.
    pub brightness: f64,
    /// Slope of the value curve around 0.5.
    pub contrast: f64,
    /// Amplitude of the spatially correlated texture mixed into the
    /// background.
    pub texture: f64,
    /// Soft-focus blur of both layers.
    pub blur: bool,
}

impl Default for ShiftConfig {
    fn default() -> Self {
        ShiftConfig { brightness: -0.08, contrast: 0.85, texture: 0.15, blur: true }
    }
}

impl ShiftConfig {
    pub fn identity() -> Self {
        ShiftConfig { brightness: 0.0, contrast: 1.0, texture: 0.0, blur: false }
    }
}

/// Re-renders a sample under [`ShiftConfig`]. The matte is label data and
/// never changes; fg and bg shift separately and are recomposited, so the
/// compositing equation keeps holding exactly.
pub fn domain_shift<T: Scalar>(
    sample: &SyntheticSample<T>,
    seed: u64,
    config: &ShiftConfig,
) -> Result<SyntheticSample<T>, DataError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = sample.fg.shape();
    let curve = |v: T| -> T {
        let shifted = (v - T::of_f64(0.5)) * T::of_f64(config.contrast)
            + T::of_f64(0.5 + config.brightness);
        shifted.max(T::zero()).min(T::one())
    };
    // An identity curve must be a bitwise no-op, and (v-0.5)+0.5 is not.
    let curve_is_identity = config.brightness == 0.0 && config.contrast == 1.0;
    let mut fg = if curve_is_identity { sample.fg.clone() } else { sample.fg.map(curve) };
    let mut bg = if curve_is_identity { sample.bg.clone() } else { sample.bg.map(curve) };

    if config.texture != 0.0 {
        // One smooth low-frequency field shared by all channels, so the
        // texture is correlated across space and color.
        let (fx, fy) = (rng.random_range(1.0..3.0), rng.random_range(1.0..3.0));
        let (px, py) = (rng.random_range(0.0..1.0), rng.random_range(0.0..1.0));
        let amp = T::of_f64(config.texture);
        let field = Tensor::<T>::from_fn(s, |_, _, y, x| {
            let u = x as f64 / s.w as f64;
            let v = y as f64 / s.h as f64;
            let val = (std::f64::consts::TAU * (fx * u + px)).sin()
                * (std::f64::consts::TAU * (fy * v + py)).sin();
            T::of_f64(val)
        });
        let data: Vec<T> = bg
            .data()
            .iter()
            .zip(field.data())
            .map(|(&b, &f)| (b + amp * f).max(T::zero()).min(T::one()))
            .collect();
        bg = Tensor::from_vec(s, data).expect("length preserved");
    }

    if config.blur {
        let kernel = gaussian_kernel_2d::<T>(3, 1.0);
        let mut g = Graph::new();
        let fv = g.constant(fg);
        let bv = g.constant(bg);
        let fb = g.gaussian_blur(fv, 3, &kernel)?;
        let bb = g.gaussian_blur(bv, 3, &kernel)?;
        fg = g.value(fb).clone();
        bg = g.value(bb).clone();
    }

    SyntheticSample::compose(sample.alpha_g.clone(), fg, bg, DomainTag::Shifted)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn depth_map_rejects_bad_values() {
        assert!(matches!(
            DepthMap::new(2, 2, vec![0.0; 3]),
            Err(DataError::DepthLength { expected: 4, got: 3 })
        ));
        assert!(matches!(
            DepthMap::new(1, 2, vec![1.0, -0.5]),
            Err(DataError::BadDepth { index: 1, .. })
        ));
        assert!(DepthMap::new(1, 2, vec![0.0, 3.5]).is_ok());
    }

    #[test]
    fn trimap_accepts_only_the_three_labels() {
        let ok = Tensor::from_vec(Shape::new(1, 1, 1, 3), vec![0.0, 0.5, 1.0]).unwrap();
        assert!(Trimap::new(ok).is_ok());
        let bad = Tensor::from_vec(Shape::new(1, 1, 1, 3), vec![0.0, 0.4, 1.0]).unwrap();
        assert!(matches!(Trimap::new(bad), Err(DataError::NotTrimapValue { .. })));
    }

    #[test]
    fn threshold_above_max_reversed_depth_gives_all_background() {
        let depth = DepthMap::from_fn(8, 8, |y, x| (y + x) as f64).unwrap();
        // Max reversed value is max - min = 14.
        let t: Trimap<f64> = depth_to_trimap(&depth, 14.5, 3, 2).unwrap();
        let (fg, bg, unknown) = t.counts();
        assert_eq!((fg, bg, unknown), (0, 64, 0));
    }

    #[test]
    fn uniform_near_depth_is_foreground_with_an_eroded_border_band() {
        let depth = DepthMap::new(16, 16, vec![1.0; 256]).unwrap();
        let t: Trimap<f64> = depth_to_trimap(&depth, 0.0, 3, 2).unwrap();
        for y in 0..16 {
            for x in 0..16 {
                let margin = y.min(x).min(15 - y).min(15 - x) < 2;
                // Outside the image counts as background, so erosion eats
                // a 2-pixel border at 2 iterations; dilation of an all-1
                // map stays all-1, so nothing is labeled 0.
                let expected = if margin { 0.5 } else { 1.0 };
                assert_eq!(t.at(y, x), expected, "at ({y},{x})");
            }
        }
    }

    #[test]
    fn closer_object_in_front_is_labeled_foreground() {
        // Far wall at 10, person at 5, a held object nearest at 2.
        let depth = DepthMap::from_fn(32, 32, |y, x| {
            let person = (8..28).contains(&y) && (10..22).contains(&x);
            let object = (14..21).contains(&y) && (13..20).contains(&x);
            if object {
                2.0
            } else if person {
                5.0
            } else {
                10.0
            }
        })
        .unwrap();
        // Threshold keeps everything at least as close as the person.
        let t: Trimap<f64> = depth_to_trimap(&depth, 5.0, 3, 2).unwrap();
        assert_eq!(t.at(17, 16), 1.0, "object center is confidently foreground");
        assert_eq!(t.at(2, 2), 0.0, "far wall is background");
    }

    proptest! {
        /// The trimap is exactly the erode/dilate rule applied to the
        /// thresholded reversed depth.
        #[test]
        fn trimap_matches_the_morphology_construction(
            seed in 0u64..500,
            h in 3usize..12,
            w in 3usize..12,
            threshold in 0.0f64..1.0,
        ) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let values: Vec<f64> = (0..h * w).map(|_| rng.random_range(0.0..1.0)).collect();
            let depth = DepthMap::new(h, w, values.clone()).unwrap();
            let t: Trimap<f64> = depth_to_trimap(&depth, threshold, 3, 1).unwrap();

            let max = values.iter().cloned().fold(0.0, f64::max);
            let fg0 = Tensor::from_vec(
                Shape::new(1, 1, h, w),
                values.iter().map(|&v| if max - v >= threshold { 1.0 } else { 0.0 }).collect(),
            ).unwrap();
            let core = erode_binary(&fg0, 3, 1).unwrap();
            let reach = dilate_binary(&fg0, 3, 1).unwrap();
            for y in 0..h {
                for x in 0..w {
                    let expected = if core.at(0, 0, y, x) == 1.0 {
                        1.0
                    } else if reach.at(0, 0, y, x) == 1.0 {
                        0.5
                    } else {
                        0.0
                    };
                    prop_assert_eq!(t.at(y, x), expected);
                }
            }
        }
    }

    fn sample_for_shift() -> SyntheticSample<f64> {
        let (fg, alpha) =
            gen_foreground(4, (64, 64), &ForegroundConfig::default()).unwrap();
        let bg = gen_backgrounds(9, (64, 64), 1).remove(0);
        SyntheticSample::compose(alpha, fg, bg, DomainTag::Source).unwrap()
    }

    #[test]
    fn identity_shift_changes_nothing_but_the_tag() {
        let sample = sample_for_shift();
        let shifted = domain_shift(&sample, 7, &ShiftConfig::identity()).unwrap();
        assert_eq!(shifted.image, sample.image);
        assert_eq!(shifted.alpha_g, sample.alpha_g);
        assert_eq!(shifted.fg, sample.fg);
        assert_eq!(shifted.bg, sample.bg);
        assert_eq!(shifted.domain_tag, DomainTag::Shifted);
    }

    #[test]
    fn default_shift_moves_pixel_statistics_but_not_labels() {
        let sample = sample_for_shift();
        let shifted = domain_shift(&sample, 7, &ShiftConfig::default()).unwrap();
        assert_eq!(shifted.alpha_g, sample.alpha_g, "alpha is label data");
        assert_eq!(shifted.domain_tag, DomainTag::Shifted);
        assert!(shifted.recomposition_error() <= 1e-6);

        let mean = |t: &Tensor<f64>| t.data().iter().sum::<f64>() / t.data().len() as f64;
        let delta = mean(&shifted.image) - mean(&sample.image);
        assert!(delta < -0.02, "default shift darkens the frame, got delta {delta}");
        assert!(shifted.image.data().iter().all(|v| (0.0..=1.0).contains(v)));

        assert_eq!(
            domain_shift(&sample, 7, &ShiftConfig::default()).unwrap(),
            shifted,
            "same seed, same shift"
        );
        assert_ne!(domain_shift(&sample, 8, &ShiftConfig::default()).unwrap().bg, shifted.bg);
    }
}
