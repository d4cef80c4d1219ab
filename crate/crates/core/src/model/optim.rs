use crate::diffcore::Array;

use super::ParamSet;

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Array>,
    v: Vec<Array>,
    t: u64,
}

impl Adam {
    pub fn new(params: &ParamSet, lr: f64) -> Self {
        let zeros = |p: &ParamSet| p.values().iter().map(|a| Array::zeros(a.shape())).collect();
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: zeros(params),
            v: zeros(params),
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Applies one update in place. Returns `false` (and leaves `params`
    /// untouched) if the update would produce a non-finite parameter.
    pub fn step(&mut self, params: &mut ParamSet, grads: &[Array]) -> bool {
        assert_eq!(grads.len(), params.len(), "one gradient per parameter");
        let t = self.t + 1;
        let c1 = 1.0 - self.beta1.powi(t as i32);
        let c2 = 1.0 - self.beta2.powi(t as i32);
        let mut new_m = self.m.clone();
        let mut new_v = self.v.clone();
        let mut updated: Vec<Array> = params.values().to_vec();
        for i in 0..grads.len() {
            let g = grads[i].data();
            let m = new_m[i].data_mut();
            for (mj, gj) in m.iter_mut().zip(g) {
                *mj = self.beta1 * *mj + (1.0 - self.beta1) * gj;
            }
            let v = new_v[i].data_mut();
            for (vj, gj) in v.iter_mut().zip(g) {
                *vj = self.beta2 * *vj + (1.0 - self.beta2) * gj * gj;
            }
            let (m, v) = (new_m[i].data(), new_v[i].data());
            for (j, p) in updated[i].data_mut().iter_mut().enumerate() {
                *p -= self.lr * (m[j] / c1) / ((v[j] / c2).sqrt() + self.eps);
            }
        }
        if !updated.iter().all(Array::all_finite) {
            return false;
        }
        for (dst, src) in params.values_mut().iter_mut().zip(updated) {
            *dst = src;
        }
        self.m = new_m;
        self.v = new_v;
        self.t = t;
        true
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = ParamSet::new();
        p.push("x", Array::vector(vec![1.0, -2.0]));
        let mut opt = Adam::new(&p, 0.1);
        assert!(opt.step(&mut p, &[Array::vector(vec![3.0, -0.5])]));
        // bias-corrected first step is lr * sign(g)
        assert!((p.get(0).data()[0] - 0.9).abs() < 1e-6);
        assert!((p.get(0).data()[1] + 1.9).abs() < 1e-6);
    }

    #[test]
    fn minimizes_quadratic() {
        let mut p = ParamSet::new();
        p.push("x", Array::vector(vec![5.0]));
        let mut opt = Adam::new(&p, 0.1);
        for _ in 0..500 {
            let g = Array::vector(vec![2.0 * (p.get(0).data()[0] - 1.0)]);
            opt.step(&mut p, &[g]);
        }
        assert!((p.get(0).data()[0] - 1.0).abs() < 1e-2);
    }

    #[test]
    fn rejects_non_finite_update() {
        let mut p = ParamSet::new();
        p.push("x", Array::vector(vec![1.0]));
        let mut opt = Adam::new(&p, 0.1);
        assert!(!opt.step(&mut p, &[Array::vector(vec![f64::NAN])]));
        assert_eq!(p.get(0).data(), &[1.0]);
        assert_eq!(opt.steps(), 0);
    }
}
