//! Procedural foregrounds, backgrounds and the augmentation pipeline.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{DataError, DomainTag, SyntheticSample};
use crate::mattemath::Matte;
use crate::scalar::Scalar;
use crate::tensor::{Graph, Shape, Tensor};

/// Knobs of the procedural portrait generator.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ForegroundConfig {
    /// Width of the soft alpha band along the silhouette, in pixels.
    pub feather: f64,
    /// Number of thin hair strands with fractional alpha.
    pub filaments: usize,
}

impl Default for ForegroundConfig {
    fn default() -> Self {
        ForegroundConfig { feather: 3.0, filaments: 12 }
    }
}

fn check_size(size: (usize, usize)) -> Result<(), DataError> {
    for (dim, v) in [("height", size.0), ("width", size.1)] {
        if v == 0 || v % 16 != 0 {
            return Err(DataError::SizeNotDivisible { dim, size: v, divisor: 16 });
        }
    }
    Ok(())
}

/// Signed distance to the ellipse boundary in (approximate) pixels;
/// negative inside.
fn ellipse_dist(px: f64, py: f64, cx: f64, cy: f64, rx: f64, ry: f64) -> f64 {
    let norm = (((px - cx) / rx).powi(2) + ((py - cy) / ry).powi(2)).sqrt();
    (norm - 1.0) * rx.min(ry)
}

/// A portrait-shaped foreground: head and torso ellipses fused into one
/// blob with a feathered silhouette, plus hair filaments whose coverage
/// is fractional. The same seed always produces the same pair.
pub fn gen_foreground<T: Scalar>(
    seed: u64,
    size: (usize, usize),
    config: &ForegroundConfig,
) -> Result<(Tensor<T>, Matte<T>), DataError> {
    check_size(size)?;
    if !(config.feather.is_finite() && config.feather > 0.0) {
        return Err(DataError::InvalidConfig {
            field: "feather",
            msg: format!("must be positive, got {}", config.feather),
        });
    }
    let (h, w) = size;
    let (hf, wf) = (h as f64, w as f64);
    let min_dim = hf.min(wf);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let r_head = min_dim * rng.random_range(0.13..0.17);
    let cx = wf * rng.random_range(0.42..0.58);
    let cy = hf * rng.random_range(0.26..0.36);
    let tx = cx + min_dim * rng.random_range(-0.03..0.03);
    let ty = cy + r_head * rng.random_range(1.6..1.9);
    let t_rx = r_head * rng.random_range(1.5..1.9);
    let t_ry = r_head * rng.random_range(1.9..2.4);

    let mut alpha = vec![0.0f64; h * w];
    for y in 0..h {
        for x in 0..w {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let d = ellipse_dist(px, py, cx, cy, r_head, r_head)
                .min(ellipse_dist(px, py, tx, ty, t_rx, t_ry));
            alpha[y * w + x] = (0.5 - d / config.feather).clamp(0.0, 1.0);
        }
    }

    // Hair: short random walks off the upper arc of the head, deposited
    // at a constant fractional coverage per strand.
    for _ in 0..config.filaments {
        let theta = rng.random_range(-0.85..-0.15) * std::f64::consts::PI;
        let coverage = rng.random_range(0.25..0.75);
        let steps = rng.random_range(8..24);
        let mut angle = theta;
        let mut px = cx + 0.9 * r_head * theta.cos();
        let mut py = cy + 0.9 * r_head * theta.sin();
        for _ in 0..steps {
            angle += rng.random_range(-0.25..0.25);
            px += angle.cos();
            py += angle.sin();
            let (ix, iy) = (px.round() as isize, py.round() as isize);
            if (0..w as isize).contains(&ix) && (0..h as isize).contains(&iy) {
                let cell = &mut alpha[iy as usize * w + ix as usize];
                *cell = cell.max(coverage);
            }
        }
    }

    // Color field: three smooth per-channel waves.
    let mut waves = Vec::new();
    for _ in 0..3 {
        let base = rng.random_range(0.25..0.75);
        let amp = rng.random_range(0.05..0.2);
        let fx = rng.random_range(0.5..2.0);
        let fy = rng.random_range(0.5..2.0);
        let phase = rng.random_range(0.0..1.0);
        waves.push((base, amp, fx, fy, phase));
    }
    let fg = Tensor::from_fn(Shape::new(1, 3, h, w), |_, c, y, x| {
        let (base, amp, fx, fy, phase) = waves[c];
        let angle = std::f64::consts::TAU * (fx * x as f64 / wf + fy * y as f64 / hf + phase);
        T::of_f64((base + amp * angle.sin()).clamp(0.0, 1.0))
    });

    let alpha = Tensor::from_vec(Shape::new(1, 1, h, w), alpha.iter().map(|&v| T::of_f64(v)).collect())
        .expect("length matches shape");
    Ok((fg, Matte::new(alpha)?))
}

/// `count` procedural background plates cycling through three looks:
/// two-color gradients, layered waves, and geometric clutter.
pub fn gen_backgrounds<T: Scalar>(seed: u64, size: (usize, usize), count: usize) -> Vec<Tensor<T>> {
    let (h, w) = size;
    let (hf, wf) = (h as f64, w as f64);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let shape = Shape::new(1, 3, h, w);
        let plate = match i % 3 {
            0 => {
                let c1: Vec<f64> = (0..3).map(|_| rng.random_range(0.0..1.0)).collect();
                let c2: Vec<f64> = (0..3).map(|_| rng.random_range(0.0..1.0)).collect();
                let phi = rng.random_range(0.0..std::f64::consts::TAU);
                Tensor::from_fn(shape, |_, c, y, x| {
                    let t = ((x as f64 / wf - 0.5) * phi.cos() + (y as f64 / hf - 0.5) * phi.sin()
                        + 0.5)
                        .clamp(0.0, 1.0);
                    T::of_f64(t * c1[c] + (1.0 - t) * c2[c])
                })
            }
            1 => {
                let mut octaves = Vec::new();
                for c in 0..3 {
                    let base = rng.random_range(0.2..0.8);
                    let mut parts = Vec::new();
                    for o in 0..3u32 {
                        let scale = f64::from(1 << o);
                        parts.push((
                            rng.random_range(0.05..0.25) / scale,
                            rng.random_range(0.5..1.5) * scale,
                            rng.random_range(0.5..1.5) * scale,
                            rng.random_range(0.0..1.0),
                        ));
                    }
                    octaves.push((base, parts));
                    let _ = c;
                }
                Tensor::from_fn(shape, |_, c, y, x| {
                    let (base, parts) = &octaves[c];
                    let mut v = *base;
                    for &(amp, fx, fy, phase) in parts {
                        let angle = std::f64::consts::TAU
                            * (fx * x as f64 / wf + fy * y as f64 / hf + phase);
                        v += amp * angle.sin();
                    }
                    T::of_f64(v.clamp(0.0, 1.0))
                })
            }
            _ => {
                let base: Vec<f64> = (0..3).map(|_| rng.random_range(0.0..1.0)).collect();
                let mut canvas: Vec<f64> =
                    (0..3 * h * w).map(|i| base[i / (h * w)]).collect();
                for k in 0..6 {
                    let color: Vec<f64> = (0..3).map(|_| rng.random_range(0.0..1.0)).collect();
                    let cx = rng.random_range(0.0..wf);
                    let cy = rng.random_range(0.0..hf);
                    let rx = rng.random_range(0.08..0.35) * wf;
                    let ry = rng.random_range(0.08..0.35) * hf;
                    let round = k % 2 == 0;
                    for y in 0..h {
                        for x in 0..w {
                            let dx = (x as f64 + 0.5 - cx) / rx;
                            let dy = (y as f64 + 0.5 - cy) / ry;
                            let inside = if round {
                                dx * dx + dy * dy <= 1.0
                            } else {
                                dx.abs() <= 1.0 && dy.abs() <= 1.0
                            };
                            if inside {
                                for c in 0..3 {
                                    canvas[c * h * w + y * w + x] = color[c];
                                }
                            }
                        }
                    }
                }
                Tensor::from_vec(shape, canvas.iter().map(|&v| T::of_f64(v)).collect())
                    .expect("length matches shape")
            }
        };
        out.push(plate);
    }
    out
}

fn crop<T: Scalar>(t: &Tensor<T>, oy: usize, ox: usize, ch: usize, cw: usize) -> Tensor<T> {
    let s = t.shape();
    Tensor::from_fn(Shape { h: ch, w: cw, ..s }, |n, c, y, x| t.at(n, c, oy + y, ox + x))
}

fn upsample_x2<T: Scalar>(t: &Tensor<T>) -> Tensor<T> {
    let mut g = Graph::new();
    let v = g.constant(t.clone());
    let up = g.upsample_bilinear(v, 2).expect("factor 2 is always valid");
    g.value(up).clone()
}

/// Expands one foreground into training samples: `n_crops` zoomed crops
/// plus `n_composites` background replacements, every one recomposited
/// exactly. With both counts zero the foreground becomes a single
/// identity sample over a black plate, so the result is never empty.
/// Crops fall back to the black plate too when no backgrounds are given;
/// only explicit composites require a non-empty pool.
pub fn augment<T: Scalar>(
    fg: &Tensor<T>,
    alpha_g: &Matte<T>,
    backgrounds: &[Tensor<T>],
    n_crops: usize,
    n_composites: usize,
    seed: u64,
) -> Result<Vec<SyntheticSample<T>>, DataError> {
    let s = fg.shape();
    let expect_alpha = Shape { c: 1, ..s };
    if s.c != 3 || alpha_g.shape() != expect_alpha {
        return Err(DataError::ShapeMismatch {
            what: "alpha_g",
            expected: expect_alpha,
            got: alpha_g.shape(),
        });
    }
    for bg in backgrounds {
        if bg.shape() != s {
            return Err(DataError::ShapeMismatch { what: "background", expected: s, got: bg.shape() });
        }
    }
    if backgrounds.is_empty() && n_composites > 0 {
        return Err(DataError::EmptyBackgroundPool { n_composites });
    }
    if n_crops > 0 && (s.h % 2 != 0 || s.w % 2 != 0) {
        return Err(DataError::SizeNotDivisible { dim: "crop size", size: s.h.max(s.w), divisor: 2 });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let black = Tensor::zeros(s);
    let mut out = Vec::new();

    if n_crops == 0 && n_composites == 0 {
        out.push(SyntheticSample::compose(
            alpha_g.clone(),
            fg.clone(),
            black,
            DomainTag::Source,
        )?);
        return Ok(out);
    }

    for _ in 0..n_crops {
        let (ch, cw) = (s.h / 2, s.w / 2);
        let oy = rng.random_range(0..=s.h - ch);
        let ox = rng.random_range(0..=s.w - cw);
        let bg = if backgrounds.is_empty() {
            black.clone()
        } else {
            backgrounds[rng.random_range(0..backgrounds.len())].clone()
        };
        let fg_zoom = upsample_x2(&crop(fg, oy, ox, ch, cw));
        let alpha_zoom = upsample_x2(&crop(alpha_g.tensor(), oy, ox, ch, cw));
        out.push(SyntheticSample::compose(
            Matte::new(alpha_zoom)?,
            fg_zoom,
            bg,
            DomainTag::Source,
        )?);
    }

    for _ in 0..n_composites {
        let bg = backgrounds[rng.random_range(0..backgrounds.len())].clone();
        out.push(SyntheticSample::compose(alpha_g.clone(), fg.clone(), bg, DomainTag::Source)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mattemath::composite;

    #[test]
    fn foreground_is_deterministic_per_seed() {
        let config = ForegroundConfig::default();
        let a = gen_foreground::<f64>(42, (64, 64), &config).unwrap();
        let b = gen_foreground::<f64>(42, (64, 64), &config).unwrap();
        assert_eq!(a, b);
        let c = gen_foreground::<f64>(43, (64, 64), &config).unwrap();
        assert_ne!(a.1, c.1);
    }

    #[test]
    fn foreground_rejects_unaligned_sizes() {
        let config = ForegroundConfig::default();
        assert!(matches!(
            gen_foreground::<f64>(0, (60, 64), &config),
            Err(DataError::SizeNotDivisible { dim: "height", size: 60, divisor: 16 })
        ));
        assert!(gen_foreground::<f64>(0, (64, 48), &config).is_ok());
    }

    #[test]
    fn alpha_spans_all_classes_with_a_real_fractional_band() {
        let config = ForegroundConfig::default();
        for seed in 0..100 {
            let (_, alpha) = gen_foreground::<f64>(seed, (64, 64), &config).unwrap();
            let data = alpha.tensor().data();
            let zeros = data.iter().filter(|&&v| v == 0.0).count();
            let ones = data.iter().filter(|&&v| v == 1.0).count();
            let fractional = data.len() - zeros - ones;
            assert!(zeros > 0, "seed {seed}: no definite background");
            assert!(ones > 0, "seed {seed}: no solid interior");
            assert!(
                fractional as f64 / data.len() as f64 >= 0.05,
                "seed {seed}: only {fractional} fractional pixels"
            );
        }
    }

    #[test]
    fn feather_width_controls_the_soft_band() {
        let narrow = ForegroundConfig { feather: 1.5, filaments: 0 };
        let wide = ForegroundConfig { feather: 6.0, filaments: 0 };
        let frac = |cfg: &ForegroundConfig| {
            let (_, alpha) = gen_foreground::<f64>(1, (64, 64), cfg).unwrap();
            alpha.tensor().data().iter().filter(|&&v| v > 0.0 && v < 1.0).count()
        };
        assert!(frac(&wide) > 2 * frac(&narrow));
    }

    #[test]
    fn backgrounds_are_deterministic_in_range_and_distinct() {
        let pool = gen_backgrounds::<f64>(5, (32, 32), 6);
        assert_eq!(pool.len(), 6);
        for bg in &pool {
            assert_eq!(bg.shape(), Shape::new(1, 3, 32, 32));
            assert!(bg.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
        assert_eq!(pool, gen_backgrounds::<f64>(5, (32, 32), 6));
        for i in 0..pool.len() {
            for j in i + 1..pool.len() {
                assert_ne!(pool[i], pool[j], "plates {i} and {j} coincide");
            }
        }
    }

    #[test]
    fn default_augmentation_yields_fifteen_exact_recompositions() {
        let (fg, alpha) = gen_foreground::<f64>(3, (32, 32), &ForegroundConfig::default()).unwrap();
        let pool = gen_backgrounds(8, (32, 32), 4);
        let samples = augment(&fg, &alpha, &pool, 5, 10, 17).unwrap();
        assert_eq!(samples.len(), 15);
        for (i, sample) in samples.iter().enumerate() {
            assert!(
                sample.recomposition_error() <= 1e-6,
                "sample {i} drifted by {}",
                sample.recomposition_error()
            );
            assert_eq!(sample.domain_tag, DomainTag::Source);
        }
        assert_eq!(samples, augment(&fg, &alpha, &pool, 5, 10, 17).unwrap());
        // Crops really zoom: the first five differ from the plain
        // composites' alpha.
        assert_ne!(samples[0].alpha_g, samples[5].alpha_g);
    }

    #[test]
    fn zero_counts_give_one_identity_sample() {
        let (fg, alpha) = gen_foreground::<f64>(3, (32, 32), &ForegroundConfig::default()).unwrap();
        let samples = augment(&fg, &alpha, &[], 0, 0, 0).unwrap();
        assert_eq!(samples.len(), 1);
        assert_eq!(samples[0].alpha_g, alpha);
        assert_eq!(samples[0].fg, fg);
        let black = Tensor::zeros(fg.shape());
        assert_eq!(samples[0].image, composite(&alpha, &fg, &black).unwrap());
    }

    #[test]
    fn composites_require_a_background_pool_but_crops_do_not() {
        let (fg, alpha) = gen_foreground::<f64>(3, (32, 32), &ForegroundConfig::default()).unwrap();
        assert!(matches!(
            augment(&fg, &alpha, &[], 0, 2, 0),
            Err(DataError::EmptyBackgroundPool { n_composites: 2 })
        ));
        assert_eq!(augment(&fg, &alpha, &[], 3, 0, 0).unwrap().len(), 3);
    }

    #[test]
    fn augment_rejects_mismatched_shapes() {
        let (fg, alpha) = gen_foreground::<f64>(3, (32, 32), &ForegroundConfig::default()).unwrap();
        let small_pool = gen_backgrounds(8, (16, 16), 1);
        assert!(matches!(
            augment(&fg, &alpha, &small_pool, 0, 1, 0),
            Err(DataError::ShapeMismatch { what: "background", .. })
        ));
        let (_, other_alpha) =
            gen_foreground::<f64>(3, (16, 16), &ForegroundConfig::default()).unwrap();
        assert!(matches!(
            augment(&fg, &other_alpha, &[], 0, 0, 0),
            Err(DataError::ShapeMismatch { what: "alpha_g", .. })
        ));
    }
}
