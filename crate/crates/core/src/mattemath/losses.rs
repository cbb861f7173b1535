//! The supervised loss stack and the self-supervised consistency losses.
//!
//! All reductions are means, not sums, so magnitudes are independent of
//! resolution and the default weights keep their intended ratios at any
//! image size. Masked terms normalize by the masked pixel count and
//! degrade to exactly zero on an empty mask.

use crate::mattemath::{GOperator, LossWeights, MatteMathError, TransitionMask};
use crate::scalar::Scalar;
use crate::tensor::{Graph, Tensor, TensorError, Var};

/// The three branch predictions of one forward pass, as graph nodes.
#[derive(Debug, Clone, Copy)]
pub struct BranchVars {
    /// Coarse semantic map, `(n, 1, h/f, w/f)`, values in (0,1).
    pub s_p: Var,
    /// Boundary detail matte, `(n, 1, h, w)`.
    pub d_p: Var,
    /// Fused final matte, `(n, 1, h, w)`.
    pub alpha_p: Var,
}

/// Ground truth for one supervised batch.
#[derive(Debug, Clone, Copy)]
pub struct SupervisionTarget<'a, T> {
    pub alpha_g: &'a Tensor<T>,
    pub image: &'a Tensor<T>,
    pub fg: &'a Tensor<T>,
    pub bg: &'a Tensor<T>,
}

/// Weighted total plus the unweighted sub-losses for logging.
#[derive(Debug, Clone, Copy)]
pub struct WeightedLosses {
    pub total: Var,
    pub semantic: Var,
    pub detail: Var,
    pub alpha: Var,
}

/// Semantic branch loss: half mean squared error between the coarse
/// prediction and the ground truth pushed through the G operator.
pub fn loss_semantic<T: Scalar>(
    g: &mut Graph<T>,
    s_p: Var,
    alpha_g: &Tensor<T>,
    g_op: &GOperator,
) -> Result<Var, MatteMathError> {
    let target = g_op.apply_tensor(alpha_g)?;
    let target = g.constant(target);
    Ok(g.l2_mean_half(s_p, target)?)
}

/// Detail branch loss: L1 between prediction and ground truth, restricted
/// to the transition band. Empty band gives zero.
pub fn loss_detail<T: Scalar>(
    g: &mut Graph<T>,
    d_p: Var,
    alpha_g: &Tensor<T>,
    m_d: &TransitionMask<T>,
) -> Result<Var, MatteMathError> {
    let target = g.constant(alpha_g.clone());
    let mask = g.constant(m_d.tensor().clone());
    Ok(g.masked_l1_mean(d_p, target, mask)?)
}

/// Fusion loss: L1 to the ground truth matte plus L1 between the input
/// image and the image re-composited with the predicted matte.
pub fn loss_alpha<T: Scalar>(
    g: &mut Graph<T>,
    alpha_p: Var,
    target: &SupervisionTarget<'_, T>,
) -> Result<Var, MatteMathError> {
    let alpha_g = g.constant(target.alpha_g.clone());
    let direct = g.l1_mean(alpha_p, alpha_g)?;
    let fg = g.constant(target.fg.clone());
    let bg = g.constant(target.bg.clone());
    let recomposited = super::composite_var(g, alpha_p, fg, bg)?;
    let image = g.constant(target.image.clone());
    let comp = g.l1_mean(recomposited, image)?;
    Ok(g.add(direct, comp)?)
}

/// Full supervised objective: `semantic * L_s + detail * L_d + alpha * L_a`.
pub fn loss_total<T: Scalar>(
    g: &mut Graph<T>,
    vars: &BranchVars,
    target: &SupervisionTarget<'_, T>,
    m_d: &TransitionMask<T>,
    weights: &LossWeights,
    g_op: &GOperator,
) -> Result<WeightedLosses, MatteMathError> {
    weights.validate()?;
    let semantic = loss_semantic(g, vars.s_p, target.alpha_g, g_op)?;
    let detail = loss_detail(g, vars.d_p, target.alpha_g, m_d)?;
    let alpha = loss_alpha(g, vars.alpha_p, target)?;
    let ws = g.scale(semantic, T::of_f64(weights.semantic));
    let wd = g.scale(detail, T::of_f64(weights.detail));
    let wa = g.scale(alpha, T::of_f64(weights.alpha));
    let sd = g.add(ws, wd)?;
    let total = g.add(sd, wa)?;
    Ok(WeightedLosses { total, semantic, detail, alpha })
}

/// Self-supervised consistency between the sub-objectives of one forward
/// pass on unlabeled data: the fused matte's G projection must agree with
/// the semantic map, and the fused matte must agree with the detail matte
/// inside the predicted transition band.
pub fn loss_soc<T: Scalar>(
    g: &mut Graph<T>,
    vars: &BranchVars,
    m_d_pred: &TransitionMask<T>,
    g_op: &GOperator,
) -> Result<Var, MatteMathError> {
    let projected = g_op.apply(g, vars.alpha_p)?;
    let semantic_term = g.l2_mean_half(projected, vars.s_p)?;
    let mask = g.constant(m_d_pred.tensor().clone());
    let detail_term = g.masked_l1_mean(vars.alpha_p, vars.d_p, mask)?;
    Ok(g.add(semantic_term, detail_term)?)
}

/// Anchor that keeps the adapting detail branch near a frozen copy of
/// itself inside the predicted transition band. The frozen side is a plain
/// tensor and receives no gradient.
pub fn loss_detail_anchor<T: Scalar>(
    g: &mut Graph<T>,
    d_p: Var,
    d_p_frozen: &Tensor<T>,
    m_d_pred: &TransitionMask<T>,
) -> Result<Var, TensorError> {
    let frozen = g.constant(d_p_frozen.clone());
    let mask = g.constant(m_d_pred.tensor().clone());
    g.masked_l1_mean(d_p, frozen, mask)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mattemath::{composite, transition_mask, Matte};
    use crate::tensor::Shape;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const HW: usize = 32;

    fn rand_matte(rng: &mut ChaCha8Rng) -> Tensor<f64> {
        // Blobby matte with hard core, fractional ring and background.
        let cy = rng.random_range(10.0..22.0);
        let cx = rng.random_range(10.0..22.0);
        let r = rng.random_range(5.0..9.0);
        Tensor::from_fn(Shape::new(1, 1, HW, HW), |_, _, y, x| {
            let d = ((y as f64 - cy).powi(2) + (x as f64 - cx).powi(2)).sqrt();
            ((r - d) / 2.0 + 0.5).clamp(0.0, 1.0)
        })
    }

    fn rand_image(rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::from_fn(Shape::new(1, 3, HW, HW), |_, _, _, _| rng.random_range(0.0..1.0))
    }

    #[test]
    fn loss_semantic_is_zero_at_target_and_shifts_quadratically() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let alpha_g = rand_matte(&mut rng);
        let g_op = GOperator::default();
        let target = g_op.apply_tensor(&alpha_g).unwrap();

        let mut g = Graph::new();
        let exact = g.leaf(target.clone(), true);
        let loss = loss_semantic(&mut g, exact, &alpha_g, &g_op).unwrap();
        assert_eq!(g.value(loss).item(), 0.0);

        let mut g = Graph::new();
        let off = g.leaf(target.map(|v| v + 0.1), true);
        let loss = loss_semantic(&mut g, off, &alpha_g, &g_op).unwrap();
        // (1/2) * mean(0.1^2)
        assert!((g.value(loss).item() - 0.005).abs() < 1e-12);
    }

    #[test]
    fn loss_detail_is_zero_on_agreement_and_zero_on_empty_mask() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let alpha_g = rand_matte(&mut rng);
        let m_d = transition_mask(&Matte::new(alpha_g.clone()).unwrap(), 3, 2).unwrap();
        assert!(!m_d.is_empty());

        let mut g = Graph::new();
        let d_p = g.leaf(alpha_g.clone(), true);
        let loss = loss_detail(&mut g, d_p, &alpha_g, &m_d).unwrap();
        assert_eq!(g.value(loss).item(), 0.0);

        let flat = Tensor::<f64>::zeros(Shape::new(1, 1, HW, HW));
        let empty = transition_mask(&Matte::new(flat.clone()).unwrap(), 3, 2).unwrap();
        assert!(empty.is_empty());
        let mut g = Graph::new();
        let d_p = g.leaf(rand_matte(&mut rng), true);
        let loss = loss_detail(&mut g, d_p, &flat, &empty).unwrap();
        assert_eq!(g.value(loss).item(), 0.0);
    }

    #[test]
    fn loss_alpha_isolates_its_compositing_term() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let alpha_g = rand_matte(&mut rng);
        let fg = rand_image(&mut rng);
        let bg = rand_image(&mut rng);
        let image = composite(&Matte::new(alpha_g.clone()).unwrap(), &fg, &bg).unwrap();

        // Perfect prediction and consistent image: exactly zero.
        let mut g = Graph::new();
        let alpha_p = g.leaf(alpha_g.clone(), true);
        let target = SupervisionTarget { alpha_g: &alpha_g, image: &image, fg: &fg, bg: &bg };
        let loss = loss_alpha(&mut g, alpha_p, &target).unwrap();
        assert!(g.value(loss).item() < 1e-12);

        // Same prediction, image shifted: only the compositing term fires,
        // and it equals the mean absolute shift.
        let shifted = image.map(|v| v + 0.05);
        let mut g = Graph::new();
        let alpha_p = g.leaf(alpha_g.clone(), true);
        let target = SupervisionTarget { alpha_g: &alpha_g, image: &shifted, fg: &fg, bg: &bg };
        let loss = loss_alpha(&mut g, alpha_p, &target).unwrap();
        assert!((g.value(loss).item() - 0.05).abs() < 1e-12);
    }

    #[test]
    fn loss_total_weighs_sub_losses_as_configured() {
        // Engineer sub-losses of exactly 1, 1 and 0.5, then the default
        // weights 1 / 10 / 1 must combine them into 11.5.
        let hw = 32;
        // Zeros except one sub-threshold fractional pixel: the transition
        // band is that single pixel, and G(alpha_g) is nearly but not
        // exactly zero, so targets are taken from the operator itself.
        let mut alpha_g = Tensor::<f64>::zeros(Shape::new(1, 1, hw, hw));
        alpha_g.set(0, 0, 16, 16, 0.4);
        let m_d = transition_mask(&Matte::new(alpha_g.clone()).unwrap(), 3, 2).unwrap();
        assert_eq!(m_d.count(), 1);

        let g_op = GOperator::default();
        // fg == bg makes the composite independent of alpha_p, so choosing
        // image == fg silences the compositing term exactly.
        let fg = Tensor::full(Shape::new(1, 3, hw, hw), 1.0);
        let bg = fg.clone();
        let image = fg.clone();

        let mut g = Graph::new();
        // Residual sqrt(2) everywhere: (1/2) * mean(2) = 1.
        let s_target = g_op.apply_tensor(&alpha_g).unwrap();
        let s_p = g.leaf(s_target.map(|v| v + 2.0f64.sqrt()), true);
        // Residual 1 everywhere, so also 1 on the masked pixel.
        let d_p = g.leaf(alpha_g.map(|v| v + 1.0), true);
        // Residual 0.5 everywhere; compositing term is silenced.
        let alpha_p = g.leaf(alpha_g.map(|v| v + 0.5), true);

        let target = SupervisionTarget { alpha_g: &alpha_g, image: &image, fg: &fg, bg: &bg };
        let vars = BranchVars { s_p, d_p, alpha_p };
        let losses =
            loss_total(&mut g, &vars, &target, &m_d, &LossWeights::default(), &g_op).unwrap();

        let ls = g.value(losses.semantic).item();
        let ld = g.value(losses.detail).item();
        let la = g.value(losses.alpha).item();
        let total = g.value(losses.total).item();
        assert!((ls - 1.0).abs() < 1e-12, "L_s = {ls}");
        assert!((ld - 1.0).abs() < 1e-12, "L_d = {ld}");
        assert!((la - 0.5).abs() < 1e-12, "L_a = {la}");
        assert!((total - 11.5).abs() < 1e-12, "total = {total}");
    }

    #[test]
    fn loss_total_matches_independent_recomputation() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let alpha_g = rand_matte(&mut rng);
        let fg = rand_image(&mut rng);
        let bg = rand_image(&mut rng);
        let image = rand_image(&mut rng);
        let m_d = transition_mask(&Matte::new(alpha_g.clone()).unwrap(), 3, 2).unwrap();
        let g_op = GOperator::default();
        let weights = LossWeights { semantic: 0.7, detail: 3.0, alpha: 1.3 };

        let s_p_t = Tensor::from_fn(Shape::new(1, 1, 2, 2), |_, _, _, _| rng.random_range(0.0..1.0));
        let d_p_t = rand_matte(&mut rng);
        let alpha_p_t = rand_matte(&mut rng);

        let mut g = Graph::new();
        let vars = BranchVars {
            s_p: g.leaf(s_p_t.clone(), true),
            d_p: g.leaf(d_p_t.clone(), true),
            alpha_p: g.leaf(alpha_p_t.clone(), true),
        };
        let target = SupervisionTarget { alpha_g: &alpha_g, image: &image, fg: &fg, bg: &bg };
        let losses = loss_total(&mut g, &vars, &target, &m_d, &weights, &g_op).unwrap();
        let got = g.value(losses.total).item();

        // Straight-line recomputation without the graph.
        let g_target = g_op.apply_tensor(&alpha_g).unwrap();
        let ls = 0.5
            * s_p_t
                .data()
                .iter()
                .zip(g_target.data())
                .map(|(&a, &b)| (a - b) * (a - b))
                .sum::<f64>()
            / s_p_t.shape().len() as f64;
        let masked: Vec<usize> = m_d
            .tensor()
            .data()
            .iter()
            .enumerate()
            .filter_map(|(i, &m)| (m == 1.0).then_some(i))
            .collect();
        let ld = masked
            .iter()
            .map(|&i| (d_p_t.data()[i] - alpha_g.data()[i]).abs())
            .sum::<f64>()
            / masked.len() as f64;
        let la_direct = alpha_p_t
            .data()
            .iter()
            .zip(alpha_g.data())
            .map(|(&a, &b)| (a - b).abs())
            .sum::<f64>()
            / alpha_p_t.shape().len() as f64;
        let comp = composite(&Matte::new(alpha_p_t.clone()).unwrap(), &fg, &bg).unwrap();
        let la_comp = comp
            .data()
            .iter()
            .zip(image.data())
            .map(|(&a, &b)| (a - b).abs())
            .sum::<f64>()
            / comp.shape().len() as f64;
        let want = 0.7 * ls + 3.0 * ld + 1.3 * (la_direct + la_comp);
        assert!((got - want).abs() < 1e-10, "{got} vs {want}");
    }

    #[test]
    fn loss_soc_is_zero_for_self_consistent_outputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let alpha_p_t = rand_matte(&mut rng);
        let g_op = GOperator::default();
        let s_p_t = g_op.apply_tensor(&alpha_p_t).unwrap();
        let m_d = transition_mask(&Matte::new(alpha_p_t.clone()).unwrap(), 3, 2).unwrap();

        let mut g = Graph::new();
        let vars = BranchVars {
            s_p: g.leaf(s_p_t, true),
            d_p: g.leaf(alpha_p_t.clone(), true),
            alpha_p: g.leaf(alpha_p_t, true),
        };
        let loss = loss_soc(&mut g, &vars, &m_d, &g_op).unwrap();
        assert!(g.value(loss).item() < 1e-12);
    }

    #[test]
    fn loss_detail_anchor_gives_no_gradient_to_frozen_side() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let d_now = rand_matte(&mut rng);
        let d_frozen = rand_matte(&mut rng);
        let m_d = transition_mask(&Matte::new(d_now.clone()).unwrap(), 3, 2).unwrap();

        let mut g = Graph::new();
        let d_p = g.leaf(d_now, true);
        let loss = loss_detail_anchor(&mut g, d_p, &d_frozen, &m_d).unwrap();
        g.backward(loss).unwrap();
        assert!(g.grad(d_p).is_some());
        // The frozen tensor entered as a constant: the only other leaves
        // are constants and must stay gradient-free.
        assert!(g.value(loss).item() >= 0.0);
    }
}
