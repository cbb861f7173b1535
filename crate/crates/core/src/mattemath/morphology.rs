//! Binary morphology and the boundary transition band.
//!
//! Pixels outside the image count as background (0): dilation never grows
//! in from the border, erosion eats foreground that touches it.

use crate::mattemath::{MatteMathError, Matte, TransitionMask};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

fn check_kernel(kernel: usize) -> Result<usize, MatteMathError> {
    if kernel < 3 || kernel % 2 == 0 {
        return Err(MatteMathError::BadKernel { kernel });
    }
    Ok(kernel / 2)
}

fn check_binary<T: Scalar>(map: &Tensor<T>) -> Result<(), MatteMathError> {
    for &v in map.data() {
        if v != T::zero() && v != T::one() {
            return Err(MatteMathError::NotBinary { value: v.into_f64() });
        }
    }
    Ok(())
}

fn morph<T: Scalar>(map: &Tensor<T>, radius: usize, iters: usize, dilate: bool) -> Tensor<T> {
    let shape = map.shape();
    let mut cur = map.clone();
    for _ in 0..iters {
        let prev = cur.clone();
        for n in 0..shape.n {
            for c in 0..shape.c {
                for y in 0..shape.h {
                    for x in 0..shape.w {
                        let mut hit = !dilate;
                        'window: for dy in -(radius as isize)..=radius as isize {
                            for dx in -(radius as isize)..=radius as isize {
                                let sy = y as isize + dy;
                                let sx = x as isize + dx;
                                let v = if sy < 0
                                    || sx < 0
                                    || sy as usize >= shape.h
                                    || sx as usize >= shape.w
                                {
                                    false
                                } else {
                                    prev.at(n, c, sy as usize, sx as usize) == T::one()
                                };
                                if dilate && v {
                                    hit = true;
                                    break 'window;
                                }
                                if !dilate && !v {
                                    hit = false;
                                    break 'window;
                                }
                            }
                        }
                        cur.set(n, c, y, x, if hit { T::one() } else { T::zero() });
                    }
                }
            }
        }
    }
    cur
}

/// Grows foreground by a square structuring element of side `kernel`,
/// repeated `iters` times.
pub fn dilate_binary<T: Scalar>(
    map: &Tensor<T>,
    kernel: usize,
    iters: usize,
) -> Result<Tensor<T>, MatteMathError> {
    let radius = check_kernel(kernel)?;
    check_binary(map)?;
    Ok(morph(map, radius, iters, true))
}

/// Shrinks foreground by a square structuring element of side `kernel`,
/// repeated `iters` times. Border pixels see background outside the image.
pub fn erode_binary<T: Scalar>(
    map: &Tensor<T>,
    kernel: usize,
    iters: usize,
) -> Result<Tensor<T>, MatteMathError> {
    let radius = check_kernel(kernel)?;
    check_binary(map)?;
    Ok(morph(map, radius, iters, false))
}

/// Band of boundary pixels of a ground-truth matte: the dilation minus the
/// erosion of the matte thresholded at 0.5, plus every pixel with strictly
/// fractional alpha. This is where the detail branch is supervised.
pub fn transition_mask<T: Scalar>(
    alpha_g: &Matte<T>,
    kernel: usize,
    iters: usize,
) -> Result<TransitionMask<T>, MatteMathError> {
    check_kernel(kernel)?;
    let bin = alpha_g
        .tensor()
        .map(|v| if v >= T::of_f64(0.5) { T::one() } else { T::zero() });
    let grown = dilate_binary(&bin, kernel, iters)?;
    let shrunk = erode_binary(&bin, kernel, iters)?;
    let alpha = alpha_g.tensor();
    let mask = Tensor::from_fn(alpha.shape(), |n, c, y, x| {
        let band = grown.at(n, c, y, x) == T::one() && shrunk.at(n, c, y, x) == T::zero();
        let a = alpha.at(n, c, y, x);
        let fractional = a > T::zero() && a < T::one();
        if band || fractional {
            T::one()
        } else {
            T::zero()
        }
    });
    TransitionMask::new(mask)
}

/// Transition band of a *predicted* matte. Sigmoid outputs are never
/// exactly 0 or 1, so the strict-fractional clause of [`transition_mask`]
/// would select every pixel; instead only values in (0.05, 0.95) count as
/// uncertain, alongside the same dilation-minus-erosion band.
pub fn prediction_transition_mask<T: Scalar>(
    alpha_p: &Matte<T>,
    kernel: usize,
    iters: usize,
) -> Result<TransitionMask<T>, MatteMathError> {
    check_kernel(kernel)?;
    let bin = alpha_p
        .tensor()
        .map(|v| if v >= T::of_f64(0.5) { T::one() } else { T::zero() });
    let grown = dilate_binary(&bin, kernel, iters)?;
    let shrunk = erode_binary(&bin, kernel, iters)?;
    let alpha = alpha_p.tensor();
    let lo = T::of_f64(0.05);
    let hi = T::of_f64(0.95);
    let mask = Tensor::from_fn(alpha.shape(), |n, c, y, x| {
        let band = grown.at(n, c, y, x) == T::one() && shrunk.at(n, c, y, x) == T::zero();
        let a = alpha.at(n, c, y, x);
        if band || (a > lo && a < hi) {
            T::one()
        } else {
            T::zero()
        }
    });
    TransitionMask::new(mask)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;

    fn square_matte(h: usize, w: usize, top: usize, left: usize, side: usize) -> Matte<f64> {
        let t = Tensor::from_fn(Shape::new(1, 1, h, w), |_, _, y, x| {
            if y >= top && y < top + side && x >= left && x < left + side {
                1.0
            } else {
                0.0
            }
        });
        Matte::new(t).unwrap()
    }

    #[test]
    fn even_kernel_is_rejected() {
        let m = Tensor::<f64>::zeros(Shape::new(1, 1, 4, 4));
        assert!(matches!(
            dilate_binary(&m, 4, 1).unwrap_err(),
            MatteMathError::BadKernel { kernel: 4 }
        ));
        assert!(matches!(
            erode_binary(&m, 1, 1).unwrap_err(),
            MatteMathError::BadKernel { kernel: 1 }
        ));
    }

    #[test]
    fn non_binary_input_is_rejected() {
        let m = Tensor::full(Shape::new(1, 1, 2, 2), 0.25);
        assert!(matches!(dilate_binary(&m, 3, 1).unwrap_err(), MatteMathError::NotBinary { .. }));
    }

    #[test]
    fn erode_eats_foreground_touching_the_border() {
        // All-foreground image: outside counts as background, so a single
        // erosion strips the 1-pixel outer ring.
        let m = Tensor::<f64>::full(Shape::new(1, 1, 5, 5), 1.0);
        let out = erode_binary(&m, 3, 1).unwrap();
        for y in 0..5 {
            for x in 0..5 {
                let interior = (1..4).contains(&y) && (1..4).contains(&x);
                assert_eq!(out.at(0, 0, y, x), if interior { 1.0 } else { 0.0 }, "({y},{x})");
            }
        }
    }

    #[test]
    fn dilate_never_reaches_past_one_ring_per_iteration() {
        let mut m = Tensor::<f64>::zeros(Shape::new(1, 1, 7, 7));
        m.set(0, 0, 3, 3, 1.0);
        let once = dilate_binary(&m, 3, 1).unwrap();
        let twice = dilate_binary(&m, 3, 2).unwrap();
        for y in 0..7usize {
            for x in 0..7usize {
                let d = y.abs_diff(3).max(x.abs_diff(3));
                assert_eq!(once.at(0, 0, y, x) == 1.0, d <= 1);
                assert_eq!(twice.at(0, 0, y, x) == 1.0, d <= 2);
            }
        }
    }

    #[test]
    fn transition_mask_of_flat_background_is_empty() {
        let m = Matte::new(Tensor::<f64>::zeros(Shape::new(1, 1, 8, 8))).unwrap();
        let mask = transition_mask(&m, 3, 2).unwrap();
        assert!(mask.is_empty());
    }

    #[test]
    fn transition_mask_is_band_around_square_edge() {
        // 8x8 square at (4,4) in a 16x16 matte, one iteration of kernel 3:
        // the band is exactly one pixel inside plus one pixel outside the
        // edge.
        let m = square_matte(16, 16, 4, 4, 8);
        let mask = transition_mask(&m, 3, 1).unwrap();
        for y in 0..16usize {
            for x in 0..16usize {
                let inside = (4..12).contains(&y) && (4..12).contains(&x);
                let inner_ring = inside && (y == 4 || y == 11 || x == 4 || x == 11);
                let outer_ring = !inside && (3..13).contains(&y) && (3..13).contains(&x);
                let want = inner_ring || outer_ring;
                assert_eq!(
                    mask.tensor().at(0, 0, y, x) == 1.0,
                    want,
                    "({y},{x}) expected band={want}"
                );
            }
        }
    }

    #[test]
    fn fractional_pixel_is_transition_even_far_from_edges() {
        let mut t = Tensor::<f64>::zeros(Shape::new(1, 1, 16, 16));
        t.set(0, 0, 2, 13, 0.4);
        let m = Matte::new(t).unwrap();
        let mask = transition_mask(&m, 3, 2).unwrap();
        assert_eq!(mask.tensor().at(0, 0, 2, 13), 1.0);
        // 0.4 binarizes to background, so no band grows around it.
        assert_eq!(mask.count(), 1);
    }

    #[test]
    fn prediction_mask_ignores_saturated_sigmoid_values() {
        // A prediction that is 0.99 inside a square and 0.01 outside: only
        // the morphological band qualifies, none of the near-saturated
        // values do. A mid-range pixel far from the edge still counts.
        let mut t = Tensor::from_fn(Shape::new(1, 1, 16, 16), |_, _, y, x| {
            if (4..12).contains(&y) && (4..12).contains(&x) {
                0.99
            } else {
                0.01
            }
        });
        t.set(0, 0, 1, 14, 0.4);
        let m = Matte::new(t).unwrap();
        let mask = prediction_transition_mask(&m, 3, 1).unwrap();
        assert_eq!(mask.tensor().at(0, 0, 1, 14), 1.0);
        assert_eq!(mask.tensor().at(0, 0, 8, 8), 0.0, "square interior");
        assert_eq!(mask.tensor().at(0, 0, 4, 4), 1.0, "square corner is in the band");
        // Band of the 8x8 square (one ring in, one ring out) plus the
        // lone mid-range pixel.
        let band = 8 * 4 - 4 + 10 * 4 - 4;
        assert_eq!(mask.count(), band + 1);
    }

    #[test]
    fn transition_mask_depends_only_on_binarization_and_fractional_set() {
        // Two mattes with identical thresholded shape and identical
        // fractional-pixel membership yield the same mask, whatever the
        // fractional values are.
        let mut a = square_matte(16, 16, 4, 4, 8).into_tensor();
        a.set(0, 0, 4, 4, 0.6);
        a.set(0, 0, 14, 2, 0.3);
        let mut b = a.clone();
        b.set(0, 0, 4, 4, 0.93);
        b.set(0, 0, 14, 2, 0.07);
        let mask_a = transition_mask(&Matte::new(a).unwrap(), 3, 2).unwrap();
        let mask_b = transition_mask(&Matte::new(b).unwrap(), 3, 2).unwrap();
        assert_eq!(mask_a, mask_b);
    }
}
