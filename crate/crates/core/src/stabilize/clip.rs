use crate::diffcore::Array;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClipReport {
    pub pre_norm: f64,
    pub post_norm: f64,
    pub clipped: bool,
}

/// Rescales all gradients together so their global L2 norm is at most `tau`.
pub fn clip_gradients(grads: &mut [Array], tau: f64) -> ClipReport {
    let norm = grads.iter().map(|g| g.data().iter().map(|x| x * x).sum::<f64>()).sum::<f64>().sqrt();
    if norm <= tau || !norm.is_finite() {
        return ClipReport {
            pre_norm: norm,
            post_norm: norm,
            clipped: false,
        };
    }
    let s = tau / norm;
    for g in grads.iter_mut() {
        g.data_mut().iter_mut().for_each(|x| *x *= s);
    }
    let post = grads.iter().map(|g| g.data().iter().map(|x| x * x).sum::<f64>()).sum::<f64>().sqrt();
    ClipReport {
        pre_norm: norm,
        post_norm: post,
        clipped: true,
    }
}

pub fn clip_vector(g: &[f64], tau: f64) -> Vec<f64> {
    let mut a = [Array::vector(g.to_vec())];
    clip_gradients(&mut a, tau);
    let [a] = a;
    a.into_data()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn norm(v: &[f64]) -> f64 {
        v.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    fn cosine(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (norm(a) * norm(b))
    }

    #[test]
    fn documented_cases() {
        let c = clip_vector(&[3.0, 4.0], 1.0);
        assert!((c[0] - 0.6).abs() < 1e-15 && (c[1] - 0.8).abs() < 1e-15);
        assert_eq!(clip_vector(&[0.1, 0.2], 1.0), vec![0.1, 0.2]);
    }

    #[test]
    fn large_random_vector() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let raw: Vec<f64> = (0..1000).map(|_| rng.random_range(-1.0..1.0)).collect();
        let n = norm(&raw);
        let g: Vec<f64> = raw.iter().map(|x| x * 7.3 / n).collect();
        let c = clip_vector(&g, 1.5);
        assert!((norm(&c) - 1.5).abs() < 1e-12);
        assert!((cosine(&c, &g) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn global_norm_spans_tensors() {
        let mut gs = [Array::vector(vec![3.0]), Array::vector(vec![4.0])];
        let r = clip_gradients(&mut gs, 1.0);
        assert!(r.clipped && (r.pre_norm - 5.0).abs() < 1e-15);
        assert!((gs[0].data()[0] - 0.6).abs() < 1e-15);
        assert!((gs[1].data()[0] - 0.8).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn idempotent_and_direction_preserving(g in prop::collection::vec(-50.0f64..50.0, 1..64), tau in 0.01f64..10.0) {
            prop_assume!(norm(&g) > 1e-6);
            let c = clip_vector(&g, tau);
            prop_assert!(norm(&c) <= norm(&g) * (1.0 + 1e-12));
            prop_assert!(norm(&c) <= tau * (1.0 + 1e-12) || c == g);
            prop_assert!((cosine(&c, &g) - 1.0).abs() < 1e-12);
            let cc = clip_vector(&c, tau);
            for (a, b) in cc.iter().zip(&c) {
                prop_assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()));
            }
        }
    }
}
