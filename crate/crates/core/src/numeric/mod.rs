//! Dense numeric substrate: vectors are `&[f64]` / `Vec<f64>`, matrices are
//! row-major [`Matrix`]. Everything is 64-bit and single-threaded-pure.

mod loss;
mod matrix;
mod mlp;

pub use loss::{softmax, softmax_xent};
pub use matrix::Matrix;
pub use mlp::{
    affine_forward, backbone_grad_slices, Activation, ActivationCache, BackboneGrads,
    BackboneParams, Layer,
};

/// Lower bound applied to every norm that appears as a divisor.
pub const NORM_EPS: f64 = 1e-12;

/// A norm made safe for division: `max(norm, NORM_EPS)`.
pub fn guard_norm(norm: f64) -> f64 {
    norm.max(NORM_EPS)
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Euclidean norm.
pub fn l2_norm(x: &[f64]) -> f64 {
    dot(x, x).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn norm_hand_cases() {
        assert_eq!(l2_norm(&[3.0, 4.0]), 5.0);
        assert_eq!(l2_norm(&[0.0, 0.0, 0.0]), 0.0);
    }

    #[test]
    fn norm_matches_dot_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            let x: Vec<f64> = (0..16).map(|_| rng.gen_range(-4.0..4.0)).collect();
            let by_dot = dot(&x, &x).sqrt();
            assert!((l2_norm(&x) - by_dot).abs() <= 1e-15 * by_dot.max(1.0));
        }
    }

    #[test]
    fn guard_floors_at_eps() {
        assert_eq!(guard_norm(0.0), NORM_EPS);
        assert_eq!(guard_norm(2.5), 2.5);
    }
}
