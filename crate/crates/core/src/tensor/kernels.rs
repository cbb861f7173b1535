//! Raw compute loops shared by graph forward and backward passes.
//!
//! Inner loops over the width axis run on contiguous slices with a scalar
//! weight so the compiler can vectorize them; everything here is single
//! threaded and allocation free.

use crate::scalar::Scalar;

/// Output length of a convolution axis.
#[inline]
pub(crate) fn conv_out_len(in_len: usize, k: usize, stride: usize, pad: usize) -> usize {
    (in_len + 2 * pad).saturating_sub(k) / stride + 1
}

/// Range of output positions `o` for which `o*stride + k_off - pad` lands
/// inside `[0, in_len)`. Returns an empty range when no position is valid.
#[inline]
fn conv_span(out_len: usize, in_len: usize, k_off: usize, stride: usize, pad: usize) -> (usize, usize) {
    let shift = k_off as isize - pad as isize;
    let lo = if shift >= 0 {
        0
    } else {
        let need = (-shift) as usize;
        need.div_ceil(stride)
    };
    let top = in_len as isize - 1 - shift;
    if top < 0 {
        return (0, 0);
    }
    let hi = top as usize / stride + 1;
    (lo.min(out_len), hi.min(out_len))
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_forward<T: Scalar>(
    input: &[T],
    (n, ci, h, w): (usize, usize, usize, usize),
    weight: &[T],
    (co, kh, kw): (usize, usize, usize),
    bias: Option<&[T]>,
    stride: usize,
    pad: usize,
    out: &mut [T],
    (oh, ow): (usize, usize),
) {
    for b in 0..n {
        for oc in 0..co {
            let base = (b * co + oc) * oh * ow;
            let bv = bias.map_or(T::zero(), |bs| bs[oc]);
            out[base..base + oh * ow].fill(bv);
        }
    }
    for b in 0..n {
        for oc in 0..co {
            let out_base = (b * co + oc) * oh * ow;
            for ic in 0..ci {
                let in_base = (b * ci + ic) * h * w;
                for ky in 0..kh {
                    let (oy_lo, oy_hi) = conv_span(oh, h, ky, stride, pad);
                    for kx in 0..kw {
                        let wv = weight[((oc * ci + ic) * kh + ky) * kw + kx];
                        let (ox_lo, ox_hi) = conv_span(ow, w, kx, stride, pad);
                        if ox_lo >= ox_hi {
                            continue;
                        }
                        let shift_x = kx as isize - pad as isize;
                        for oy in oy_lo..oy_hi {
                            let iy = (oy * stride) as isize + ky as isize - pad as isize;
                            let in_row = in_base + iy as usize * w;
                            let out_row = out_base + oy * ow;
                            if stride == 1 {
                                let ix0 = (ox_lo as isize + shift_x) as usize;
                                let cnt = ox_hi - ox_lo;
                                let src = &input[in_row + ix0..in_row + ix0 + cnt];
                                let dst = &mut out[out_row + ox_lo..out_row + ox_lo + cnt];
                                for (d, s) in dst.iter_mut().zip(src) {
                                    *d += wv * *s;
                                }
                            } else {
                                for ox in ox_lo..ox_hi {
                                    let ix = ((ox * stride) as isize + shift_x) as usize;
                                    out[out_row + ox] += wv * input[in_row + ix];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_backward_input<T: Scalar>(
    grad_out: &[T],
    (n, ci, h, w): (usize, usize, usize, usize),
    weight: &[T],
    (co, kh, kw): (usize, usize, usize),
    stride: usize,
    pad: usize,
    grad_in: &mut [T],
    (oh, ow): (usize, usize),
) {
    for b in 0..n {
        for oc in 0..co {
            let out_base = (b * co + oc) * oh * ow;
            for ic in 0..ci {
                let in_base = (b * ci + ic) * h * w;
                for ky in 0..kh {
                    let (oy_lo, oy_hi) = conv_span(oh, h, ky, stride, pad);
                    for kx in 0..kw {
                        let wv = weight[((oc * ci + ic) * kh + ky) * kw + kx];
                        let (ox_lo, ox_hi) = conv_span(ow, w, kx, stride, pad);
                        if ox_lo >= ox_hi {
                            continue;
                        }
                        let shift_x = kx as isize - pad as isize;
                        for oy in oy_lo..oy_hi {
                            let iy = (oy * stride) as isize + ky as isize - pad as isize;
                            let in_row = in_base + iy as usize * w;
                            let out_row = out_base + oy * ow;
                            if stride == 1 {
                                let ix0 = (ox_lo as isize + shift_x) as usize;
                                let cnt = ox_hi - ox_lo;
                                let src = &grad_out[out_row + ox_lo..out_row + ox_lo + cnt];
                                let dst = &mut grad_in[in_row + ix0..in_row + ix0 + cnt];
                                for (d, g) in dst.iter_mut().zip(src) {
                                    *d += wv * *g;
                                }
                            } else {
                                for ox in ox_lo..ox_hi {
                                    let ix = ((ox * stride) as isize + shift_x) as usize;
                                    grad_in[in_row + ix] += wv * grad_out[out_row + ox];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_backward_weight<T: Scalar>(
    grad_out: &[T],
    input: &[T],
    (n, ci, h, w): (usize, usize, usize, usize),
    (co, kh, kw): (usize, usize, usize),
    stride: usize,
    pad: usize,
    grad_weight: &mut [T],
    (oh, ow): (usize, usize),
) {
    for b in 0..n {
        for oc in 0..co {
            let out_base = (b * co + oc) * oh * ow;
            for ic in 0..ci {
                let in_base = (b * ci + ic) * h * w;
                for ky in 0..kh {
                    let (oy_lo, oy_hi) = conv_span(oh, h, ky, stride, pad);
                    for kx in 0..kw {
                        let (ox_lo, ox_hi) = conv_span(ow, w, kx, stride, pad);
                        if ox_lo >= ox_hi {
                            continue;
                        }
                        let shift_x = kx as isize - pad as isize;
                        let mut acc = T::zero();
                        for oy in oy_lo..oy_hi {
                            let iy = (oy * stride) as isize + ky as isize - pad as isize;
                            let in_row = in_base + iy as usize * w;
                            let out_row = out_base + oy * ow;
                            if stride == 1 {
                                let ix0 = (ox_lo as isize + shift_x) as usize;
                                let cnt = ox_hi - ox_lo;
                                let a = &grad_out[out_row + ox_lo..out_row + ox_lo + cnt];
                                let v = &input[in_row + ix0..in_row + ix0 + cnt];
                                for (g, x) in a.iter().zip(v) {
                                    acc += *g * *x;
                                }
                            } else {
                                for ox in ox_lo..ox_hi {
                                    let ix = ((ox * stride) as isize + shift_x) as usize;
                                    acc += grad_out[out_row + ox] * input[in_row + ix];
                                }
                            }
                        }
                        grad_weight[((oc * ci + ic) * kh + ky) * kw + kx] += acc;
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_backward_bias<T: Scalar>(
    grad_out: &[T],
    (n, co, oh, ow): (usize, usize, usize, usize),
    grad_bias: &mut [T],
) {
    for b in 0..n {
        for oc in 0..co {
            let base = (b * co + oc) * oh * ow;
            let mut acc = T::zero();
            for &g in &grad_out[base..base + oh * ow] {
                acc += g;
            }
            grad_bias[oc] += acc;
        }
    }
}

/// Per-axis lookup for bilinear interpolation with half-pixel centers:
/// `value(o) = (1 - frac) * v[i0] + frac * v[i1]`, edges clamped.
pub(crate) fn bilinear_axis<T: Scalar>(in_len: usize, factor: usize) -> Vec<(usize, usize, T)> {
    let out_len = in_len * factor;
    (0..out_len)
        .map(|o| {
            let src = (o as f64 + 0.5) / factor as f64 - 0.5;
            let floor = src.floor();
            let i0 = floor as isize;
            if i0 < 0 {
                (0, 0, T::zero())
            } else if i0 as usize >= in_len - 1 {
                (in_len - 1, in_len - 1, T::zero())
            } else {
                (i0 as usize, i0 as usize + 1, T::of_f64(src - floor))
            }
        })
        .collect()
}

/// Mirrors an out-of-range index back into `[0, len)`; identity inside.
/// Valid for offsets up to `len` on either side.
#[inline]
pub(crate) fn reflect(i: isize, len: usize) -> usize {
    if i < 0 {
        (-i - 1) as usize
    } else if i as usize >= len {
        2 * len - 1 - i as usize
    } else {
        i as usize
    }
}
