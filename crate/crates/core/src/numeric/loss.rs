//! Softmax cross-entropy, numerically stabilized by max-subtraction.

use crate::error::{Error, Result};

/// Softmax probabilities of a logit vector.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    for v in out.iter_mut() {
        *v /= sum;
    }
    out
}

/// Cross-entropy loss of `logits` against `label`, with the gradient
/// w.r.t. the logits: softmax(logits) - onehot(label).
pub fn softmax_xent(logits: &[f64], label: usize) -> Result<(f64, Vec<f64>)> {
    if label >= logits.len() {
        return Err(Error::shape("softmax_xent label", logits.len() - 1, label));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let shifted: Vec<f64> = logits.iter().map(|l| l - max).collect();
    let log_sum: f64 = shifted.iter().map(|v| v.exp()).sum::<f64>().ln();
    let loss = log_sum - shifted[label];
    let mut grad: Vec<f64> = shifted.iter().map(|v| (v - log_sum).exp()).collect();
    grad[label] -= 1.0;
    Ok((loss, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn symmetric_two_class() {
        let (loss, grad) = softmax_xent(&[0.0, 0.0], 0).unwrap();
        assert!((loss - 2.0_f64.ln()).abs() < 1e-15);
        assert!((grad[0] + 0.5).abs() < 1e-15);
        assert!((grad[1] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn large_logit_is_stable() {
        let (loss, grad) = softmax_xent(&[1000.0, 0.0], 0).unwrap();
        assert!(loss.is_finite());
        assert!(loss < 1e-12);
        assert!(grad.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn out_of_range_label() {
        assert!(softmax_xent(&[0.0, 0.0], 2).is_err());
    }

    #[test]
    fn grad_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let h = 1e-6;
        for _ in 0..50 {
            let logits: Vec<f64> = (0..5).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let label = rng.gen_range(0..5);
            let (_, grad) = softmax_xent(&logits, label).unwrap();
            for j in 0..5 {
                let mut up = logits.clone();
                up[j] += h;
                let mut down = logits.clone();
                down[j] -= h;
                let fd = (softmax_xent(&up, label).unwrap().0
                    - softmax_xent(&down, label).unwrap().0)
                    / (2.0 * h);
                let rel = (grad[j] - fd).abs() / grad[j].abs().max(fd.abs()).max(1e-8);
                assert!(rel < 1e-6, "component {j}: {} vs {fd}", grad[j]);
            }
        }
    }

    #[test]
    fn grad_sums_to_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        for _ in 0..50 {
            let logits: Vec<f64> = (0..7).map(|_| rng.gen_range(-5.0..5.0)).collect();
            let (_, grad) = softmax_xent(&logits, 3).unwrap();
            let sum: f64 = grad.iter().sum();
            assert!(sum.abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_sums_to_one() {
        let p = softmax(&[1.0, 2.0, 3.0, -1.0]);
        let sum: f64 = p.iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
    }
}
