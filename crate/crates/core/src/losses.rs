use ndarray::{Array3, Array4, ArrayView3, ArrayView4, Axis, Zip};
use serde::{Deserialize, Serialize};

use crate::{CoreError, Result};

/// Smoothing added to the Dice numerator and denominator.
pub const DICE_EPS: f64 = 1e-5;

/// Peak weight of the unsupervised terms.
pub const LAMBDA_MAX: f64 = 0.1;

/// One training step's loss terms and their weighted total.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub sup_aug: f64,
    pub sup_abd: f64,
    pub semi_aug: f64,
    pub semi_abd: f64,
    pub lambda: f64,
    pub total: f64,
}

impl LossReport {
    pub fn is_finite(&self) -> bool {
        [self.sup_aug, self.sup_abd, self.semi_aug, self.semi_abd, self.lambda, self.total]
            .iter()
            .all(|v| v.is_finite())
    }

    /// Name of the first non-finite field, if any.
    pub fn first_non_finite(&self) -> Option<&'static str> {
        [
            ("sup_aug", self.sup_aug),
            ("sup_abd", self.sup_abd),
            ("semi_aug", self.semi_aug),
            ("semi_abd", self.semi_abd),
            ("lambda", self.lambda),
            ("total", self.total),
        ]
        .into_iter()
        .find(|(_, v)| !v.is_finite())
        .map(|(n, _)| n)
    }
}

/// `(sup_aug + sup_abd) + lambda * (semi_aug + semi_abd)`.
pub fn total_loss(sup_aug: f64, sup_abd: f64, semi_aug: f64, semi_abd: f64, lambda: f64) -> LossReport {
    let total = (sup_aug + sup_abd) + lambda * (semi_aug + semi_abd);
    LossReport { sup_aug, sup_abd, semi_aug, semi_abd, lambda, total }
}

/// Gaussian warm-up `0.1 * exp(-5 (1 - t/t_total)^2)`; `t` beyond `t_total`
/// is clamped.
pub fn lambda_schedule(t: u64, t_total: u64) -> f64 {
    if t_total == 0 {
        log::warn!("t_total = 0; using the final unsupervised weight");
        return LAMBDA_MAX;
    }
    let t = if t > t_total {
        log::warn!("iteration {t} exceeds t_total {t_total}; clamping");
        t_total
    } else {
        t
    };
    let phase = 1.0 - t as f64 / t_total as f64;
    LAMBDA_MAX * (-5.0 * phase * phase).exp()
}

/// A loss value with its gradient with respect to each logit input.
#[derive(Clone, Debug)]
pub struct Graded {
    pub value: f64,
    pub grads: Vec<Array4<f64>>,
}

fn check_target(shape: (usize, usize, usize, usize), target: &ArrayView3<'_, u8>) -> Result<()> {
    let (b, c, h, w) = shape;
    if target.dim() != (b, h, w) {
        return Err(CoreError::Shape(format!("target {:?} does not match predictions {:?}", target.dim(), shape)));
    }
    if let Some(bad) = target.iter().find(|&&t| t as usize >= c) {
        return Err(CoreError::Validation(format!("class id {bad} out of range for {c} classes")));
    }
    Ok(())
}

fn same_shape(a: &ArrayView4<'_, f64>, b: &ArrayView4<'_, f64>) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(CoreError::Shape(format!("prediction shapes differ: {:?} vs {:?}", a.dim(), b.dim())));
    }
    Ok(())
}

/// Softmax over the class axis of a `B×C×H×W` array.
pub fn softmax(logits: ArrayView4<'_, f64>) -> Array4<f64> {
    let mut out = logits.to_owned();
    for mut sample in out.axis_iter_mut(Axis(0)) {
        let m = sample.fold_axis(Axis(0), f64::NEG_INFINITY, |&a, &b| a.max(b));
        for mut ch in sample.axis_iter_mut(Axis(0)) {
            Zip::from(&mut ch).and(&m).for_each(|v, &mx| *v = (*v - mx).exp());
        }
        let sum = sample.sum_axis(Axis(0));
        for mut ch in sample.axis_iter_mut(Axis(0)) {
            Zip::from(&mut ch).and(&sum).for_each(|v, &s| *v /= s);
        }
    }
    out
}

/// Per-pixel argmax over classes (lowest class id under ties).
pub fn pseudo_labels(logits: ArrayView4<'_, f64>) -> Array3<u8> {
    let (b, c, h, w) = logits.dim();
    Array3::from_shape_fn((b, h, w), |(i, r, col)| {
        let mut best = 0;
        for k in 1..c {
            if logits[[i, k, r, col]] > logits[[i, best, r, col]] {
                best = k;
            }
        }
        best as u8
    })
}

/// `1 - mean_c (2 Σ p t + eps) / (Σ p + Σ t + eps)`, sums pooled over the
/// batch, mean over all classes including background.
pub fn dice_loss(probs: ArrayView4<'_, f64>, target: ArrayView3<'_, u8>) -> Result<f64> {
    check_target(probs.dim(), &target)?;
    let c = probs.dim().1;
    let mut score = 0.0;
    for k in 0..c {
        let (mut inter, mut ps, mut ts) = (0.0, 0.0, 0.0);
        Zip::from(probs.index_axis(Axis(1), k)).and(&target).for_each(|&p, &t| {
            let t = if t as usize == k { 1.0 } else { 0.0 };
            inter += p * t;
            ps += p;
            ts += t;
        });
        score += (2.0 * inter + DICE_EPS) / (ps + ts + DICE_EPS);
    }
    Ok(1.0 - score / c as f64)
}

/// Mean per-pixel negative log-likelihood of the target class.
pub fn ce_loss(logits: ArrayView4<'_, f64>, target: ArrayView3<'_, u8>) -> Result<f64> {
    check_target(logits.dim(), &target)?;
    let (b, c, h, w) = logits.dim();
    let mut total = 0.0;
    for i in 0..b {
        for r in 0..h {
            for col in 0..w {
                let m = (0..c).map(|k| logits[[i, k, r, col]]).fold(f64::NEG_INFINITY, f64::max);
                let lse = (0..c).map(|k| (logits[[i, k, r, col]] - m).exp()).sum::<f64>().ln() + m;
                total += lse - logits[[i, target[[i, r, col]] as usize, r, col]];
            }
        }
    }
    Ok(total / (b * h * w) as f64)
}

/// Cross-entropy and its gradient with respect to the logits.
pub fn ce_graded(logits: ArrayView4<'_, f64>, target: ArrayView3<'_, u8>) -> Result<(f64, Array4<f64>)> {
    let value = ce_loss(logits, target)?;
    let (b, _, h, w) = logits.dim();
    let n = (b * h * w) as f64;
    let mut grad = softmax(logits);
    for ((i, k, r, col), g) in grad.indexed_iter_mut() {
        if target[[i, r, col]] as usize == k {
            *g -= 1.0;
        }
        *g /= n;
    }
    Ok((value, grad))
}

/// Dice loss of `softmax(logits)` and its gradient with respect to the logits.
pub fn dice_graded(logits: ArrayView4<'_, f64>, target: ArrayView3<'_, u8>) -> Result<(f64, Array4<f64>)> {
    let probs = softmax(logits);
    let value = dice_loss(probs.view(), target)?;
    let (b, c, h, w) = probs.dim();
    // dL/dp for each class.
    let mut gp = Array4::<f64>::zeros((b, c, h, w));
    for k in 0..c {
        let (mut inter, mut ps, mut ts) = (0.0, 0.0, 0.0);
        Zip::from(probs.index_axis(Axis(1), k)).and(&target).for_each(|&p, &t| {
            let t = if t as usize == k { 1.0 } else { 0.0 };
            inter += p * t;
            ps += p;
            ts += t;
        });
        let den = ps + ts + DICE_EPS;
        let num = 2.0 * inter + DICE_EPS;
        Zip::from(gp.index_axis_mut(Axis(1), k)).and(&target).for_each(|g, &t| {
            let t = if t as usize == k { 1.0 } else { 0.0 };
            *g = -(2.0 * t * den - num) / (den * den) / c as f64;
        });
    }
    // Back through the softmax: dz_k = p_k (g_k - Σ_j p_j g_j).
    let dot = (&probs * &gp).sum_axis(Axis(1));
    let mut grad = gp;
    for k in 0..c {
        let pk = probs.index_axis(Axis(1), k);
        Zip::from(grad.index_axis_mut(Axis(1), k)).and(&pk).and(&dot).for_each(|g, &p, &d| *g = p * (*g - d));
    }
    Ok((value, grad))
}

/// Supervised loss on the two augmented views: half of (CE + Dice) for each
/// network against the shared label.
pub fn sup_aug_loss(logits1_w: ArrayView4<'_, f64>, logits2_s: ArrayView4<'_, f64>, y: ArrayView3<'_, u8>) -> Result<f64> {
    sup_abd_loss(logits1_w, logits2_s, y, y)
}

/// Supervised loss on the displaced labeled samples with their displaced labels.
pub fn sup_abd_loss(
    logits1_s_to_w: ArrayView4<'_, f64>,
    logits2_w_to_s: ArrayView4<'_, f64>,
    y_s_to_w: ArrayView3<'_, u8>,
    y_w_to_s: ArrayView3<'_, u8>,
) -> Result<f64> {
    same_shape(&logits1_s_to_w, &logits2_w_to_s)?;
    let p1 = softmax(logits1_s_to_w);
    let p2 = softmax(logits2_w_to_s);
    let first = ce_loss(logits1_s_to_w, y_s_to_w)? + dice_loss(p1.view(), y_s_to_w)?;
    let second = ce_loss(logits2_w_to_s, y_w_to_s)? + dice_loss(p2.view(), y_w_to_s)?;
    Ok(0.5 * first + 0.5 * second)
}

/// [`sup_abd_loss`] (or [`sup_aug_loss`] with equal labels) with gradients
/// `[d/dlogits1, d/dlogits2]`.
pub fn sup_graded(
    logits1: ArrayView4<'_, f64>,
    logits2: ArrayView4<'_, f64>,
    y1: ArrayView3<'_, u8>,
    y2: ArrayView3<'_, u8>,
) -> Result<Graded> {
    same_shape(&logits1, &logits2)?;
    let mut value = 0.0;
    let mut grads = Vec::with_capacity(2);
    for (l, y) in [(logits1, y1), (logits2, y2)] {
        let (ce, gce) = ce_graded(l, y)?;
        let (dice, gdice) = dice_graded(l, y)?;
        value += 0.5 * (ce + dice);
        grads.push((gce + gdice) * 0.5);
    }
    Ok(Graded { value, grads })
}

/// Cross pseudo-supervision on the augmented unlabeled views: each network's
/// probabilities against the other network's hard labels.
pub fn semi_aug_loss(logits1_w: ArrayView4<'_, f64>, logits2_s: ArrayView4<'_, f64>) -> Result<f64> {
    same_shape(&logits1_w, &logits2_s)?;
    let y1 = pseudo_labels(logits1_w);
    let y2 = pseudo_labels(logits2_s);
    Ok(dice_loss(softmax(logits1_w).view(), y2.view())? + dice_loss(softmax(logits2_s).view(), y1.view())?)
}

/// Cross pseudo-supervision on the two displaced unlabeled samples, each seen
/// by both networks; the four Dice terms are summed.
pub fn semi_abd_loss(
    logits1_s_to_w: ArrayView4<'_, f64>,
    logits2_s_to_w: ArrayView4<'_, f64>,
    logits1_w_to_s: ArrayView4<'_, f64>,
    logits2_w_to_s: ArrayView4<'_, f64>,
) -> Result<f64> {
    Ok(semi_aug_loss(logits1_s_to_w, logits2_s_to_w)? + semi_aug_loss(logits1_w_to_s, logits2_w_to_s)?)
}

/// [`semi_aug_loss`] with gradients `[d/dlogits1, d/dlogits2]`. Pseudo-labels
/// are constants.
pub fn semi_pair_graded(logits1: ArrayView4<'_, f64>, logits2: ArrayView4<'_, f64>) -> Result<Graded> {
    same_shape(&logits1, &logits2)?;
    let y1 = pseudo_labels(logits1);
    let y2 = pseudo_labels(logits2);
    let (v1, g1) = dice_graded(logits1, y2.view())?;
    let (v2, g2) = dice_graded(logits2, y1.view())?;
    Ok(Graded { value: v1 + v2, grads: vec![g1, g2] })
}
