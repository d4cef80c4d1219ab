use nalgebra::{Complex, DMatrix, DVector, Schur};

use crate::cde::BatchPlan;
use crate::diffcore::{Array, CustomOp, DiffError, Tape, Var};
use crate::model::{step_slopes, BoundModel};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StiffnessScore {
    /// `max_i |Re λ_i|`, or the Frobenius norm when the eigensolve failed.
    pub value: f64,
    pub fallback: bool,
}

/// Largest absolute real part among the eigenvalues of `j`.
pub fn stiffness_score(j: &Array) -> StiffnessScore {
    let (value, _, fallback) = score_and_gradient(j.row_major_square(), false);
    StiffnessScore { value, fallback }
}

trait Square {
    fn row_major_square(&self) -> (usize, &[f64]);
}

impl Square for Array {
    fn row_major_square(&self) -> (usize, &[f64]) {
        assert_eq!(self.rows(), self.cols(), "stiffness needs a square matrix");
        (self.rows(), self.data())
    }
}

fn frobenius(n: usize, m: &[f64], want_grad: bool) -> (f64, Option<Vec<f64>>, bool) {
    let f = m.iter().map(|x| x * x).sum::<f64>().sqrt();
    let g = want_grad.then(|| {
        if f > 0.0 {
            m.iter().map(|x| x / f).collect()
        } else {
            vec![0.0; n * n]
        }
    });
    (f, g, true)
}

/// Solves `(a - μ I) x = b` repeatedly from a fixed start; returns the unit eigenvector estimate.
fn inverse_iteration(a: &DMatrix<f64>, mu: Complex<f64>) -> Option<DVector<Complex<f64>>> {
    let n = a.nrows();
    let scale = 1.0 + mu.norm();
    let shift = mu + Complex::new(1e-10 * scale, 1e-10 * scale);
    let mut c: DMatrix<Complex<f64>> = a.map(|x| Complex::new(x, 0.0));
    for i in 0..n {
        c[(i, i)] -= shift;
    }
    let lu = c.lu();
    let mut x = DVector::from_fn(n, |i, _| Complex::new(1.0 + 0.1 * i as f64, 0.3));
    for _ in 0..3 {
        let y = lu.solve(&x)?;
        let norm = y.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
        if !(norm.is_finite() && norm > 0.0) {
            return None;
        }
        x = y.map(|z| z / norm);
    }
    // residual check
    let ax: DVector<Complex<f64>> = a.map(|v| Complex::new(v, 0.0)) * &x;
    let res = (ax - x.map(|z| z * mu)).iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
    (res <= 1e-6 * scale).then_some(x)
}

/// Value, optional gradient (row-major `n×n`), and whether the Frobenius
/// fallback was used. The gradient follows first-order eigenvalue
/// perturbation: `∂λ/∂M_ik = y_i x_k / (yᵀx)` with `Mx = λx`, `Mᵀy = λy`.
fn score_and_gradient((n, m): (usize, &[f64]), want_grad: bool) -> (f64, Option<Vec<f64>>, bool) {
    if n == 0 {
        return (0.0, want_grad.then(Vec::new), false);
    }
    if m.iter().any(|x| !x.is_finite()) {
        return (f64::NAN, want_grad.then(|| vec![0.0; n * n]), true);
    }
    let a = DMatrix::from_row_slice(n, n, m);
    let Some(schur) = Schur::try_new(a.clone(), f64::EPSILON, 10_000) else {
        log::debug!("eigensolve did not converge; using the Frobenius bound");
        return frobenius(n, m, want_grad);
    };
    let eig = schur.complex_eigenvalues();
    let (k, lam) = eig
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.re.abs().total_cmp(&b.1.re.abs()))
        .map(|(k, l)| (k, *l))
        .expect("n > 0");
    let _ = k;
    let value = lam.re.abs();
    if !want_grad {
        return (value, None, false);
    }
    if value == 0.0 {
        return (0.0, Some(vec![0.0; n * n]), false);
    }
    let right = inverse_iteration(&a, lam);
    let left = inverse_iteration(&a.transpose(), lam);
    let (Some(x), Some(y)) = (right, left) else {
        log::debug!("eigenvector refinement failed; using the Frobenius bound");
        return frobenius(n, m, want_grad);
    };
    let denom: Complex<f64> = y.iter().zip(x.iter()).map(|(a, b)| a * b).sum();
    if denom.norm() < 1e-10 {
        log::debug!("near-defective eigenvalue; using the Frobenius bound");
        return frobenius(n, m, want_grad);
    }
    let sign = lam.re.signum();
    let mut g = vec![0.0; n * n];
    for i in 0..n {
        for kk in 0..n {
            g[i * n + kk] = sign * (y[i] * x[kk] / denom).re;
        }
    }
    (value, Some(g), false)
}

/// Masked sum of per-block scores over a stack of square blocks.
struct BlockScores {
    n: usize,
    grads: Vec<Vec<f64>>,
}

impl CustomOp for BlockScores {
    fn name(&self) -> &str {
        "max_abs_real_eigenvalue"
    }

    fn backward(&self, inputs: &[&Array], _output: &Array, grad_output: &Array) -> Vec<Option<Array>> {
        let g = grad_output.item();
        let n = self.n;
        let mut out = Vec::with_capacity(inputs[0].len());
        for block in &self.grads {
            out.extend(block.iter().map(|x| g * x));
        }
        vec![Some(Array::matrix(self.grads.len() * n, n, out).expect("shape"))]
    }
}

fn block_scores(tape: &mut Tape, stacked: Var) -> Result<(Var, Vec<StiffnessScore>), DiffError> {
    let v = tape.value(stacked);
    let n = v.cols();
    if n == 0 || v.rows() % n != 0 {
        return Err(DiffError::Shape("stiffness: blocks must be square".into()));
    }
    let blocks = v.rows() / n;
    let mut total = 0.0;
    let mut scores = Vec::with_capacity(blocks);
    let mut grads = Vec::with_capacity(blocks);
    for b in 0..blocks {
        let m = &v.data()[b * n * n..(b + 1) * n * n];
        let (s, g, fallback) = score_and_gradient((n, m), true);
        total += s;
        scores.push(StiffnessScore { value: s, fallback });
        grads.push(g.expect("requested"));
    }
    let out = tape.custom(&[stacked], Array::scalar(total), Box::new(BlockScores { n, grads }));
    Ok((out, scores))
}

/// Something whose slope-contracted Jacobians can be recorded on a tape.
pub trait JacobianField {
    /// `(B·h)×h` stack of transposed Jacobians of `h ↦ f(h)·slope_b` at each row.
    fn jacobians_t(&self, tape: &mut Tape, h: Var, slopes: &Array) -> Result<Var, DiffError>;
}

impl JacobianField for BoundModel<'_> {
    fn jacobians_t(&self, tape: &mut Tape, h: Var, slopes: &Array) -> Result<Var, DiffError> {
        self.field_jacobians_t(tape, h, slopes)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StiffnessStats {
    pub steps: usize,
    pub mean: f64,
    pub max: f64,
    pub fallbacks: usize,
}

/// Stiffness scores summed over every (trajectory, solver step) pair of the
/// batch and divided by their count. Padded steps are excluded.
pub fn stiffness_penalty(
    tape: &mut Tape,
    field: &dyn JacobianField,
    states: &[Var],
    plan: &BatchPlan,
) -> Result<(Var, StiffnessStats), DiffError> {
    let mut total: Option<Var> = None;
    let mut stats = StiffnessStats::default();
    let mut sum = 0.0;
    for s in 0..plan.n_steps() {
        let rows: Vec<usize> = (0..plan.rows).filter(|&r| plan.step_sizes[s][r] > 0.0).collect();
        if rows.is_empty() {
            continue;
        }
        let slopes_all = step_slopes(plan, s);
        let d = slopes_all.cols();
        let slopes = Array::matrix(
            rows.len(),
            d,
            rows.iter().flat_map(|&r| slopes_all.row(r).iter().copied()).collect(),
        )?;
        let picks: Vec<(Var, usize)> = rows.iter().map(|&r| (states[s], r)).collect();
        let h = tape.gather_rows(&picks)?;
        let jt = field.jacobians_t(tape, h, &slopes)?;
        let (step_sum, scores) = block_scores(tape, jt)?;
        for sc in &scores {
            stats.steps += 1;
            sum += sc.value;
            stats.max = stats.max.max(sc.value);
            stats.fallbacks += sc.fallback as usize;
        }
        total = Some(match total {
            None => step_sum,
            Some(t) => tape.add(t, step_sum)?,
        });
    }
    let Some(total) = total else {
        return Ok((tape.constant(Array::scalar(0.0)), stats));
    };
    stats.mean = sum / stats.steps as f64;
    Ok((tape.scale(total, 1.0 / stats.steps as f64), stats))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cde::{BatchPlan, ControlPath, StepPlan};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn documented_cases() {
        let d = Array::from_rows(&[vec![-3.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 0.5]]).unwrap();
        assert!((stiffness_score(&d).value - 3.0).abs() < 1e-12);
        let w = 2.5;
        let rot = Array::from_rows(&[vec![0.0, -w], vec![w, 0.0]]).unwrap();
        assert!(stiffness_score(&rot).value.abs() < 1e-12);
    }

    // Independent oracle: Faddeev-LeVerrier characteristic polynomial, then
    // Durand-Kerner simultaneous root iteration.
    fn char_poly(m: &[f64], n: usize) -> Vec<f64> {
        // coefficients c[0..=n] of λ^n + c1 λ^{n-1} + ... + cn
        let mul = |a: &[f64], b: &[f64]| {
            let mut o = vec![0.0; n * n];
            for i in 0..n {
                for k in 0..n {
                    for j in 0..n {
                        o[i * n + j] += a[i * n + k] * b[k * n + j];
                    }
                }
            }
            o
        };
        let mut c = vec![1.0];
        let mut mk = vec![0.0; n * n];
        for k in 1..=n {
            let mut next = mul(m, &mk);
            for i in 0..n {
                next[i * n + i] += c[k - 1];
            }
            mk = next;
            let am = mul(m, &mk);
            let tr: f64 = (0..n).map(|i| am[i * n + i]).sum();
            c.push(-tr / k as f64);
        }
        c
    }

    fn durand_kerner(c: &[f64]) -> Vec<Complex<f64>> {
        let n = c.len() - 1;
        let p = |z: Complex<f64>| c.iter().fold(Complex::new(0.0, 0.0), |acc, &ci| acc * z + ci);
        let seed = Complex::new(0.4, 0.9);
        let mut r: Vec<Complex<f64>> = (0..n).map(|i| seed.powu(i as u32) * 3.0).collect();
        for _ in 0..5000 {
            let prev = r.clone();
            for i in 0..n {
                let mut den = Complex::new(1.0, 0.0);
                for j in 0..n {
                    if i != j {
                        den *= r[i] - r[j];
                    }
                }
                let step = p(r[i]) / den;
                r[i] -= step;
            }
            let moved = r.iter().zip(&prev).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max);
            if moved < 1e-15 {
                break;
            }
        }
        r
    }

    #[test]
    fn matches_characteristic_polynomial_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..5 {
            let m: Vec<f64> = (0..64).map(|_| rng.random_range(-1.0..1.0)).collect();
            let roots = durand_kerner(&char_poly(&m, 8));
            let oracle = roots.iter().map(|z| z.re.abs()).fold(0.0, f64::max);
            let got = stiffness_score(&Array::matrix(8, 8, m).unwrap()).value;
            assert!((got - oracle).abs() < 1e-8, "{got} vs {oracle}");
        }
    }

    #[test]
    fn eigen_gradient_matches_finite_differences() {
        use crate::diffcore::gradcheck;
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for n in [2usize, 3, 5] {
            let m = Array::matrix(2 * n, n, (0..2 * n * n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
            let build = |tape: &mut Tape, v: &[Var]| Ok(block_scores(tape, v[0])?.0);
            let rep = gradcheck::check(&build, &[m], 1e-6, 1e-5, 1e-4).unwrap();
            assert!(rep.passed(), "n={n} {rep:?}");
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn invariant_under_orthogonal_similarity(seed in 0u64..10_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = 5;
            let j = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
            let q = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0)).qr().q();
            let jq = q.transpose() * &j * &q;
            let to_arr = |m: &DMatrix<f64>| Array::matrix(n, n, m.transpose().as_slice().to_vec()).unwrap();
            let a = stiffness_score(&to_arr(&j)).value;
            let b = stiffness_score(&to_arr(&jq)).value;
            prop_assert!((a - b).abs() < 1e-9 * (1.0 + a));
        }
    }

    struct Linear(f64);

    impl JacobianField for Linear {
        fn jacobians_t(&self, tape: &mut Tape, h: Var, slopes: &Array) -> Result<Var, DiffError> {
            // f(h) = -c·h with a 1-d control: J = -c · slope
            let data = slopes.data().iter().map(|s| -self.0 * s).collect();
            let _ = h;
            let j = tape.constant(Array::matrix(slopes.rows(), 1, data)?);
            Ok(j)
        }
    }

    fn scalar_plan() -> BatchPlan {
        let p = ControlPath::new(vec![0.0, 1.0, 3.0], Array::matrix(3, 1, vec![0.0, 2.0, 1.0]).unwrap()).unwrap();
        let short = ControlPath::new(vec![0.0, 1.0], Array::matrix(2, 1, vec![0.0, 2.0]).unwrap()).unwrap();
        BatchPlan::new(&[
            StepPlan::new(&p, &[0.0, 3.0], 0.5).unwrap(),
            StepPlan::new(&short, &[0.0, 1.0], 0.5).unwrap(),
        ])
        .unwrap()
    }

    #[test]
    fn penalty_is_linear_in_field_scale() {
        let plan = scalar_plan();
        let mut tape = Tape::new();
        let states: Vec<Var> = (0..=plan.n_steps())
            .map(|_| tape.constant(Array::matrix(2, 1, vec![0.3, 0.3]).unwrap()))
            .collect();
        // row 0: 2 steps at slope 2, 4 at slope -0.5; row 1: 2 steps at slope 2
        let expected = |c: f64| c * (2.0 * 2.0 + 4.0 * 0.5 + 2.0 * 2.0) / 8.0;
        for c in [0.0, 0.5, 1.0, 3.0] {
            let (p, st) = stiffness_penalty(&mut tape, &Linear(c), &states, &plan).unwrap();
            assert_eq!(st.steps, 8);
            assert!((tape.value(p).item() - expected(c)).abs() < 1e-12);
        }
    }

    #[test]
    fn penalty_gradient_through_model() {
        use crate::cohort::{generate_cohort, CohortParams};
        use crate::diffcore::gradcheck;
        use crate::model::{prepare, Batch, CdeAutoencoder, ModelConfig};

        let cfg = ModelConfig {
            hidden_size: 3,
            field_widths: vec![4],
            decoder_width: 4,
            ..ModelConfig::default()
        };
        let m = CdeAutoencoder::new(cfg, 4).unwrap();
        let t = generate_cohort(10, 3, &CohortParams::default()).unwrap();
        let p: Vec<_> = t[..2].iter().map(|x| prepare(x, 4.0).unwrap()).collect();
        let batch = Batch::new(&[&p[0], &p[1]]).unwrap();
        let solver = crate::cde::SolverConfig::rk4(4.0);
        let build = |tape: &mut Tape, v: &[Var]| {
            let bound = m.bind_vars(v.to_vec());
            let fwd = bound
                .forward(tape, &batch, &solver)
                .map_err(|e| DiffError::Contract(e.to_string()))?;
            Ok(stiffness_penalty(tape, &bound, &fwd.states, &batch.plan)?.0)
        };
        let rep = gradcheck::check(&build, m.params().values(), 1e-6, 1e-5, 1e-4).unwrap();
        assert!(rep.passed(), "{rep:?}");
    }
}
