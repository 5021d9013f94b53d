//! Losses paired with their gradients wrt logits, plus inference-side
//! activations.
//!
//! Training always differentiates wrt logits (numerically stable forms);
//! sigmoid/softmax are applied explicitly only on the inference path.

use ndarray::{Array1, Array2, Array4, Axis};

use crate::scalar::Scalar;

pub fn sigmoid<F: Scalar>(z: F) -> F {
    if z >= F::zero() {
        F::one() / (F::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (F::one() + e)
    }
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows<F: Scalar>(logits: &Array2<F>) -> Array2<F> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().copied().fold(F::neg_infinity(), F::max);
        let mut sum = F::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

/// Mean categorical cross-entropy over the batch; gradient wrt logits is
/// `(softmax - onehot) / N`.
pub fn softmax_cross_entropy<F: Scalar>(logits: &Array2<F>, targets: &[usize]) -> (f64, Array2<F>) {
    let n = logits.dim().0;
    assert_eq!(n, targets.len(), "batch/target length");
    let probs = softmax_rows(logits);
    let mut loss = 0.0;
    for (i, &t) in targets.iter().enumerate() {
        let p = probs[(i, t)].to_f64().unwrap().max(1e-300);
        loss -= p.ln();
    }
    loss /= n as f64;
    let scale = F::from(1.0 / n as f64).unwrap();
    let mut grad = probs;
    for (i, &t) in targets.iter().enumerate() {
        grad[(i, t)] -= F::one();
    }
    grad.mapv_inplace(|v| v * scale);
    (loss, grad)
}

/// Mean binary cross-entropy with logits; gradient is `(sigmoid - t) / N`.
pub fn bce_with_logits<F: Scalar>(logits: &Array1<F>, targets: &[bool]) -> (f64, Array1<F>) {
    let n = logits.len();
    assert_eq!(n, targets.len(), "batch/target length");
    let mut loss = 0.0;
    let mut grad = Array1::<F>::zeros(n);
    for (i, (&z, &t)) in logits.iter().zip(targets).enumerate() {
        let zf = z.to_f64().unwrap();
        let tf = if t { 1.0 } else { 0.0 };
        // max(z, 0) - z*t + ln(1 + exp(-|z|))
        loss += zf.max(0.0) - zf * tf + (-zf.abs()).exp().ln_1p();
        grad[i] = F::from((sigmoid_f64(zf) - tf) / n as f64).unwrap();
    }
    (loss / n as f64, grad)
}

fn sigmoid_f64(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Pixel-wise BCE plus per-image soft-dice loss on `(N, 1, H, W)` logits;
/// returns the summed loss and its gradient wrt logits.
///
/// Dice on probabilities p: `(2*sum(p*g) + s) / (sum(p) + sum(g) + s)` with
/// smoothing s = 1, averaged over the batch as `1 - dice`.
pub fn bce_dice_with_logits<F: Scalar>(logits: &Array4<F>, target: &Array4<F>) -> (f64, Array4<F>) {
    let (n, c, h, w) = logits.dim();
    assert_eq!(c, 1, "segmentation logits are single channel");
    assert_eq!(target.dim(), logits.dim(), "target shape");
    let px = (h * w) as f64;
    let smooth = 1.0;

    let mut loss = 0.0;
    let mut grad = Array4::<F>::zeros((n, c, h, w));
    for i in 0..n {
        let zi = logits.index_axis(Axis(0), i);
        let gi = target.index_axis(Axis(0), i);
        let zs = zi.to_slice().expect("contiguous");
        let gs = gi.to_slice().expect("contiguous");
        let probs: Vec<f64> = zs
            .iter()
            .map(|&z| sigmoid_f64(z.to_f64().unwrap()))
            .collect();

        let mut bce = 0.0;
        let mut sum_p = 0.0;
        let mut sum_g = 0.0;
        let mut sum_pg = 0.0;
        for ((&z, &g), &p) in zs.iter().zip(gs).zip(&probs) {
            let zf = z.to_f64().unwrap();
            let gf = g.to_f64().unwrap();
            bce += zf.max(0.0) - zf * gf + (-zf.abs()).exp().ln_1p();
            sum_p += p;
            sum_g += gf;
            sum_pg += p * gf;
        }
        let denom = sum_p + sum_g + smooth;
        let dice = (2.0 * sum_pg + smooth) / denom;
        loss += bce / px + (1.0 - dice);

        // d(1-dice)/dp = (2*sum_pg + smooth)/denom^2 - 2*g/denom,
        // chain through dp/dz = p*(1-p); BCE grad is (p - g).
        let mut grad_i = grad.index_axis_mut(Axis(0), i);
        let grad_slice = grad_i.as_slice_mut().expect("contiguous");
        let dice_num = 2.0 * sum_pg + smooth;
        for (k, (&g, &p)) in gs.iter().zip(&probs).enumerate() {
            let gf = g.to_f64().unwrap();
            let bce_grad = (p - gf) / px;
            let ddice_dp = dice_num / (denom * denom) - 2.0 * gf / denom;
            grad_slice[k] = F::from((bce_grad + ddice_dp * p * (1.0 - p)) / n as f64).unwrap();
        }
    }
    (loss / n as f64, grad)
}

/// Hard-threshold dice coefficient for evaluation; empty-vs-empty is 1.
pub fn dice_score<F: Scalar>(probs: &Array4<F>, target: &Array4<F>, threshold: f64) -> f64 {
    let thr = F::from(threshold).unwrap();
    let half = F::from(0.5).unwrap();
    let mut inter = 0u64;
    let mut pred_area = 0u64;
    let mut true_area = 0u64;
    for (&p, &g) in probs.iter().zip(target.iter()) {
        let pred = p >= thr;
        let truth = g >= half;
        inter += u64::from(pred && truth);
        pred_area += u64::from(pred);
        true_area += u64::from(truth);
    }
    if pred_area + true_area == 0 {
        return 1.0;
    }
    2.0 * inter as f64 / (pred_area + true_area) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn softmax_rows_sum_to_one() {
        let logits = array![[1.0f64, 2.0, 3.0], [-5.0, 0.0, 5.0]];
        let probs = softmax_rows(&logits);
        for row in probs.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
        assert!(probs.iter().all(|&p| p > 0.0 && p < 1.0));
    }

    #[test]
    fn cross_entropy_gradient_matches_finite_difference() {
        let logits = array![[0.3f64, -0.7, 1.2], [0.1, 0.2, -0.4]];
        let targets = [2usize, 0];
        let (_, grad) = softmax_cross_entropy(&logits, &targets);
        let h = 1e-6;
        for i in 0..2 {
            for j in 0..3 {
                let mut lp = logits.clone();
                lp[(i, j)] += h;
                let mut lm = logits.clone();
                lm[(i, j)] -= h;
                let (loss_p, _) = softmax_cross_entropy(&lp, &targets);
                let (loss_m, _) = softmax_cross_entropy(&lm, &targets);
                let numeric = (loss_p - loss_m) / (2.0 * h);
                assert!((grad[(i, j)] - numeric).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn bce_gradient_matches_finite_difference() {
        let logits = array![0.5f64, -1.5, 3.0];
        let targets = [true, false, true];
        let (_, grad) = bce_with_logits(&logits, &targets);
        let h = 1e-6;
        for i in 0..3 {
            let mut lp = logits.clone();
            lp[i] += h;
            let mut lm = logits.clone();
            lm[i] -= h;
            let (loss_p, _) = bce_with_logits(&lp, &targets);
            let (loss_m, _) = bce_with_logits(&lm, &targets);
            let numeric = (loss_p - loss_m) / (2.0 * h);
            assert!((grad[i] - numeric).abs() < 1e-6);
        }
    }

    #[test]
    fn bce_dice_gradient_matches_finite_difference() {
        let logits = Array4::from_shape_vec(
            (2, 1, 2, 2),
            vec![0.2f64, -0.5, 1.0, -1.2, 0.7, 0.1, -0.3, 2.0],
        )
        .unwrap();
        let target =
            Array4::from_shape_vec((2, 1, 2, 2), vec![1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 1.0])
                .unwrap();
        let (_, grad) = bce_dice_with_logits(&logits, &target);
        let h = 1e-6;
        for idx in 0..8 {
            let mut lp = logits.clone();
            lp.as_slice_mut().unwrap()[idx] += h;
            let mut lm = logits.clone();
            lm.as_slice_mut().unwrap()[idx] -= h;
            let (loss_p, _) = bce_dice_with_logits(&lp, &target);
            let (loss_m, _) = bce_dice_with_logits(&lm, &target);
            let numeric = (loss_p - loss_m) / (2.0 * h);
            assert!(
                (grad.as_slice().unwrap()[idx] - numeric).abs() < 1e-6,
                "at {idx}A: {} vs {numeric}",
                grad.as_slice().unwrap()[idx]
            );
        }
    }

    #[test]
    fn dice_score_cases() {
        let ones = Array4::<f64>::ones((1, 1, 2, 2));
        let zeros = Array4::<f64>::zeros((1, 1, 2, 2));
        assert_eq!(dice_score(&ones, &ones, 0.5), 1.0);
        assert_eq!(dice_score(&zeros, &zeros, 0.5), 1.0);
        assert_eq!(dice_score(&ones, &zeros, 0.5), 0.0);
        let half = Array4::from_shape_vec((1, 1, 2, 2), vec![1.0, 1.0, 0.0, 0.0]).unwrap();
        assert!((dice_score(&half, &ones, 0.5) - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn sigmoid_bounds() {
        assert!(sigmoid(-30.0f64) > 0.0);
        assert!(sigmoid(30.0f64) < 1.0);
        assert!((sigmoid(0.0f64) - 0.5).abs() < 1e-15);
        // Far saturation stays within [0, 1].
        assert!((0.0..=1.0).contains(&sigmoid(-500.0f64)));
        assert!((0.0..=1.0).contains(&sigmoid(500.0f64)));
    }
}
