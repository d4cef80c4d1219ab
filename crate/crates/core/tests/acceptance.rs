//! Acceptance suite. Each test covers one criterion and writes a single
//! `criterion N: PASS|FAIL ...` line to stderr (uncaptured) before asserting.
//!
//! Criteria 7 to 10 share one desk-scale experiment: n=2000, h=16, three seeds,
//! trained once with the correlation loss and once without.

use std::io::Write;
use std::path::Path;
use std::sync::{Arc, Mutex, MutexGuard, OnceLock};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use stable_cde::analysis::{loss_correlation, train_val_correlation};
use stable_cde::cde::{implicit_adams_step, integrate_values, rk4_step, AdamsOrder, FnField, SolverConfig};
use stable_cde::cli::{cmd_generate, cmd_rl, cmd_train, rl_on_checkpoint, ExperimentConfig, RunLayout};
use stable_cde::cohort::{bin_action, generate_cohort, read_cohort_csv, split_cohort, CohortParams, SplitRatios, Trajectory};
use stable_cde::diffcore::gradcheck::check;
use stable_cde::diffcore::{Array, DiffError, Tape, Var};
use stable_cde::earlystop::{check_stop, select_checkpoints, EpochRecord, StopCriteria, TrainRecord};
use stable_cde::model::{loss_total, prepare, Batch, CdeAutoencoder, ModelConfig};
use stable_cde::rl::{admissible, train_dbcq, wis_evaluate, DbcqConfig, LatentTrajectory, TabularPolicy, Transitions};
use stable_cde::stabilize::{flatness, stiffness_penalty};

/// The harness runs tests on parallel threads; on a small machine the shared
/// experiment would skew the runtime limits of the others.
fn serial() -> MutexGuard<'static, ()> {
    static LOCK: Mutex<()> = Mutex::new(());
    LOCK.lock().unwrap_or_else(|e| e.into_inner())
}

fn report(n: usize, ok: bool, detail: &str) {
    let verdict = if ok { "PASS" } else { "FAIL" };
    let _ = writeln!(std::io::stderr(), "criterion {n}: {verdict} {detail}");
}

fn rand_array(rng: &mut ChaCha8Rng, shape: &[usize]) -> Array {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    Array::vector(data).reshape(shape.to_vec()).unwrap()
}

type Build = Box<dyn Fn(&mut Tape, &[Var], &Array) -> Result<Var, DiffError>>;

fn weighted(t: &mut Tape, y: Var, w: &Array) -> Result<Var, DiffError> {
    let shape = t.value(y).shape().to_vec();
    let n: usize = shape.iter().product();
    let w = Array::vector(w.data()[..n].to_vec()).reshape(shape).unwrap();
    let c = t.constant(w);
    let p = t.mul(y, c)?;
    Ok(t.sum(p))
}

fn primitives() -> Vec<(&'static str, Vec<Vec<usize>>, Build)> {
    vec![
        ("matmul", vec![vec![2, 3], vec![3, 2]], Box::new(|t, v, w| {
            let y = t.matmul(v[0], v[1])?;
            weighted(t, y, w)
        })),
        ("add", vec![vec![2, 3], vec![2, 3]], Box::new(|t, v, w| {
            let y = t.add(v[0], v[1])?;
            weighted(t, y, w)
        })),
        ("sub", vec![vec![2, 3], vec![2, 3]], Box::new(|t, v, w| {
            let y = t.sub(v[0], v[1])?;
            weighted(t, y, w)
        })),
        ("mul", vec![vec![2, 3], vec![2, 3]], Box::new(|t, v, w| {
            let y = t.mul(v[0], v[1])?;
            weighted(t, y, w)
        })),
        ("scale", vec![vec![6]], Box::new(|t, v, w| {
            let y = t.scale(v[0], -1.7);
            weighted(t, y, w)
        })),
        ("add_const", vec![vec![6]], Box::new(|t, v, w| {
            let y = t.add_const(v[0], 0.4);
            let y = t.mul(y, y)?;
            weighted(t, y, w)
        })),
        ("relu", vec![vec![6]], Box::new(|t, v, w| {
            let y = t.relu(v[0]);
            weighted(t, y, w)
        })),
        ("tanh", vec![vec![6]], Box::new(|t, v, w| {
            let y = t.tanh(v[0]);
            weighted(t, y, w)
        })),
        ("abs", vec![vec![6]], Box::new(|t, v, w| {
            let y = t.abs(v[0]);
            weighted(t, y, w)
        })),
        ("huber", vec![vec![6]], Box::new(|t, v, w| {
            let y = t.scale(v[0], 3.0);
            let y = t.huber(y, 1.0);
            weighted(t, y, w)
        })),
        ("square", vec![vec![6]], Box::new(|t, v, w| {
            let y = t.square(v[0])?;
            weighted(t, y, w)
        })),
        ("add_row", vec![vec![2, 3], vec![3]], Box::new(|t, v, w| {
            let y = t.add_row(v[0], v[1])?;
            weighted(t, y, w)
        })),
        ("layer_norm", vec![vec![2, 3], vec![3], vec![3]], Box::new(|t, v, w| {
            let y = t.layer_norm(v[0], v[1], v[2], 1e-5)?;
            weighted(t, y, w)
        })),
        ("sum", vec![vec![6]], Box::new(|t, v, _| {
            let y = t.mul(v[0], v[0])?;
            Ok(t.sum(y))
        })),
        ("mean", vec![vec![6]], Box::new(|t, v, _| {
            let y = t.tanh(v[0]);
            Ok(t.mean(y))
        })),
        ("contract", vec![vec![2, 6]], Box::new(|t, v, w| {
            let u = Arc::new(Array::from_rows(&[vec![0.5, -1.0, 2.0], vec![1.5, 0.2, -0.3]]).unwrap());
            let y = t.contract(v[0], u, 2)?;
            weighted(t, y, w)
        })),
        ("scale_rows", vec![vec![2, 3]], Box::new(|t, v, w| {
            let y = t.scale_rows(v[0], Arc::new(vec![0.3, -2.0]))?;
            weighted(t, y, w)
        })),
        ("gather_rows", vec![vec![3, 2], vec![2, 2]], Box::new(|t, v, w| {
            let y = t.gather_rows(&[(v[0], 2), (v[1], 0), (v[0], 2)])?;
            weighted(t, y, w)
        })),
        ("column_pearson", vec![vec![6, 2]], Box::new(|t, v, _| {
            let y = t.column_pearson(v[0], &[0.1, 0.5, -0.2, 1.3, 0.7, -0.9])?;
            Ok(t.sum(y))
        })),
        ("pearson", vec![vec![6], vec![6]], Box::new(|t, v, _| t.pearson(v[0], v[1]))),
        ("transpose", vec![vec![2, 3]], Box::new(|t, v, w| {
            let y = t.transpose(v[0]);
            weighted(t, y, w)
        })),
        ("reshape", vec![vec![2, 3]], Box::new(|t, v, w| {
            let y = t.reshape(v[0], vec![3, 2])?;
            let y = t.tanh(y);
            weighted(t, y, w)
        })),
        ("pick", vec![vec![3, 2]], Box::new(|t, v, w| {
            let y = t.pick(v[0], vec![1, 0, 1])?;
            weighted(t, y, w)
        })),
        ("softmax_nll", vec![vec![2, 3]], Box::new(|t, v, _| t.softmax_nll(v[0], vec![2, 0]))),
        ("relu_tangent", vec![vec![2, 3], vec![2, 3]], Box::new(|t, v, w| {
            let y = t.relu_tangent(v[0], v[1])?;
            weighted(t, y, w)
        })),
        ("layer_norm_tangent", vec![vec![2, 3], vec![2, 3], vec![3]], Box::new(|t, v, w| {
            let y = t.layer_norm_tangent(v[0], v[1], v[2], 1e-5)?;
            weighted(t, y, w)
        })),
    ]
}

fn small_batch(n_traj: usize, dt: f64) -> Batch {
    let t = generate_cohort(10, 3, &CohortParams::default()).unwrap();
    let p: Vec<_> = t[..n_traj].iter().map(|x| prepare(x, dt).unwrap()).collect();
    let refs: Vec<_> = p.iter().collect();
    Batch::new(&refs).unwrap()
}

#[test]
fn c01_gradient_fidelity() {
    let _serial = serial();
    let start = Instant::now();
    let (abs_tol, rel_tol) = (1e-5, 1e-4);
    let mut failures = Vec::new();
    let mut checked = 0;

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for trial in 0..10 {
        let w = rand_array(&mut rng, &[12]);
        for (name, shapes, f) in primitives() {
            let inputs: Vec<Array> = shapes.iter().map(|s| rand_array(&mut rng, s)).collect();
            let rep = check(&|t, v| f(t, v, &w), &inputs, 1e-6, abs_tol, rel_tol).unwrap();
            checked += 1;
            if !rep.passed() {
                failures.push(format!("{name}#{trial} ratio {:.2}", rep.worst_ratio));
            }
        }
    }

    let model_cfg = |h| ModelConfig { hidden_size: h, field_widths: vec![4, 4], decoder_width: 5, ..ModelConfig::default() };
    let m = CdeAutoencoder::new(model_cfg(4), 9).unwrap();
    for solver in [
        SolverConfig::rk4(2.0),
        SolverConfig { fixed_point_tol: 1e-13, fixed_point_max_iters: 200, ..SolverConfig::implicit_adams(2.0) },
    ] {
        let batch = small_batch(2, solver.dt);
        let build = |tape: &mut Tape, v: &[Var]| {
            let fwd = m
                .bind_vars(v.to_vec())
                .forward(tape, &batch, &solver)
                .map_err(|e| DiffError::Contract(e.to_string()))?;
            Ok(loss_total(tape, &fwd, &batch, [1.0; 3])?.total)
        };
        let rep = check(&build, m.params().values(), 1e-5, abs_tol, rel_tol).unwrap();
        checked += 1;
        if !rep.passed() {
            failures.push(format!("loss_total {:?} ratio {:.2}", solver.kind, rep.worst_ratio));
        }
    }

    let m = CdeAutoencoder::new(model_cfg(3), 4).unwrap();
    let solver = SolverConfig::rk4(4.0);
    let batch = small_batch(2, solver.dt);
    let build = |tape: &mut Tape, v: &[Var]| {
        let bound = m.bind_vars(v.to_vec());
        let fwd = bound.forward(tape, &batch, &solver).map_err(|e| DiffError::Contract(e.to_string()))?;
        Ok(stiffness_penalty(tape, &bound, &fwd.states, &batch.plan)?.0)
    };
    let rep = check(&build, m.params().values(), 1e-6, abs_tol, rel_tol).unwrap();
    checked += 1;
    if !rep.passed() {
        failures.push(format!("stiffness_penalty ratio {:.2}", rep.worst_ratio));
    }

    let secs = start.elapsed().as_secs_f64();
    let ok = failures.is_empty() && secs < 60.0;
    report(1, ok, &format!("{checked} gradient checks, {} failed, {secs:.1}s {failures:?}", failures.len()));
    assert!(ok);
}

fn linear(lam: f64) -> FnField<impl Fn(&mut Tape, Var) -> Result<Var, DiffError>> {
    FnField::new(1, 1, move |t: &mut Tape, h| Ok(t.scale(h, lam)))
}

fn scalar(tape: &mut Tape, x: f64) -> Var {
    tape.constant(Array::matrix(1, 1, vec![x]).unwrap())
}

#[test]
fn c02_solver_correctness() {
    let _serial = serial();
    let start = Instant::now();
    let path = stable_cde::cde::ControlPath::new(vec![0.0, 1.0], Array::matrix(2, 1, vec![0.0, 1.0]).unwrap()).unwrap();
    let f = linear(-1.0);
    let dts = [0.2, 0.1, 0.05, 0.025];
    let errs: Vec<f64> = dts
        .iter()
        .map(|&dt| {
            let tr = integrate_values(&f, &[1.0], &path, &[1.0], &SolverConfig::rk4(dt)).unwrap();
            (tr.states.item() - (-1.0f64).exp()).abs()
        })
        .collect();
    let xs: Vec<f64> = dts.iter().map(|d| d.ln()).collect();
    let ys: Vec<f64> = errs.iter().map(|e| e.ln()).collect();
    let (mx, my) = (xs.iter().sum::<f64>() / 4.0, ys.iter().sum::<f64>() / 4.0);
    let order = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum::<f64>()
        / xs.iter().map(|x| (x - mx).powi(2)).sum::<f64>();

    let cfg = SolverConfig { fixed_point_tol: 1e-15, fixed_point_max_iters: 400, ..SolverConfig::implicit_adams(0.1) };
    let incr = |x: f64| Arc::new(Array::matrix(1, 1, vec![x]).unwrap());
    let mut tape = Tape::new();
    let h0 = scalar(&mut tape, 1.0);
    let dt = 0.1;
    let (h1, _) = implicit_adams_step(&mut tape, &f, &[h0], &incr(dt), AdamsOrder::One, &cfg).unwrap();
    let trap_err = (tape.value(h1).item() - (1.0 - dt / 2.0) / (1.0 + dt / 2.0)).abs();

    let stiff = linear(-100.0);
    let (h1, _) = implicit_adams_step(&mut tape, &stiff, &[h0], &incr(1.0), AdamsOrder::One, &cfg).unwrap();
    let trap_factor = tape.value(h1).item();
    let r = rk4_step(&mut tape, &stiff, h0, &incr(1.0)).unwrap();
    let rk4_factor = tape.value(r).item();

    let secs = start.elapsed().as_secs_f64();
    let ok = order >= 3.8 && trap_err <= 1e-12 && trap_factor.abs() < 1.0 && rk4_factor.abs() > 1.0 && secs < 60.0;
    report(
        2,
        ok,
        &format!(
            "rk4 order {order:.3}, trapezoid error {trap_err:.1e}, factors at -100: trapezoid {trap_factor:.4} rk4 {rk4_factor:.3e}, {secs:.2}s"
        ),
    );
    assert!(ok);
}

/// Longest run of near-minimal epochs by scanning every window.
fn flatness_brute(l: &[f64], eps2: f64) -> (usize, usize, f64) {
    let min = l.iter().copied().fold(f64::INFINITY, f64::min);
    let tol = if min > 0.0 { eps2 * min } else { eps2 };
    let near = |i: usize| (l[i] - min).abs() <= tol;
    let (mut start, mut len) = (0, 0);
    for i in 0..l.len() {
        for j in i..l.len() {
            if (i..=j).all(near) && j - i + 1 > len {
                start = i;
                len = j - i + 1;
            }
        }
    }
    let s1 = if len < 2 {
        0.0
    } else {
        let mut acc = 0.0;
        for k in start + 1..start + len {
            acc += (l[k] - l[k - 1]).abs();
        }
        acc / (len - 1) as f64
    };
    (start, len, s1)
}

#[test]
fn c03_flatness_matches_brute_force() {
    let _serial = serial();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut mismatches = 0;
    let mut worst = 0.0f64;
    for k in 0..50 {
        let n = rng.random_range(2..80);
        let floor = if k % 5 == 0 { -2.5 } else { 0.3 };
        // decaying curves with noise so plateaus of varied length appear
        let decay = rng.random_range(0.02..0.3);
        let noise = rng.random_range(0.0..0.05);
        let l: Vec<f64> = (0..n)
            .map(|i| floor + 2.0 * (-(i as f64) * decay).exp() + noise * rng.random_range(-1.0..1.0))
            .collect();
        let eps2 = [0.01, 0.02, 0.05, 0.1][k % 4];
        let got = flatness(&l, eps2).unwrap();
        let (start, len, s1) = flatness_brute(&l, eps2);
        if got.plateau_length != len || got.plateau_start != start {
            mismatches += 1;
        }
        worst = worst.max((got.mean_abs_slope - s1).abs());
    }
    let ok = mismatches == 0 && worst <= 1e-12;
    report(3, ok, &format!("50 series, {mismatches} plateau mismatches, worst S1 error {worst:.1e}"));
    assert!(ok);
}

struct Oracle {
    optimal: Option<usize>,
    overtrained: Option<usize>,
}

/// Scans epochs directly: stop at e when the window [e-p, e] spread is within
/// tolerance, validation is within eps1 of its running minimum, and rho holds.
fn early_stop_oracle(r: &TrainRecord, c: &StopCriteria) -> (Vec<bool>, Oracle) {
    let n = r.epochs.len();
    let mut fires = vec![false; n];
    for e in 0..n {
        if e < c.p {
            continue;
        }
        let mut best_val = f64::INFINITY;
        for k in 0..=e {
            best_val = best_val.min(r.epochs[k].val);
        }
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for k in e - c.p..=e {
            lo = lo.min(r.epochs[k].total);
            hi = hi.max(r.epochs[k].total);
        }
        let tol = if lo > 0.0 { c.eps2 * lo } else { c.eps2 };
        fires[e] = r.epochs[e].val - best_val <= c.eps1 && hi - lo <= tol && r.epochs[e].rho >= c.rho_threshold;
    }
    let Some(star) = fires.iter().position(|&f| f) else {
        return (fires, Oracle { optimal: None, overtrained: None });
    };
    let mut left = false;
    let mut refired = false;
    for &f in &fires[star + 1..] {
        if !f {
            left = true;
        } else if left {
            refired = true;
        }
    }
    let overtrained = if refired {
        let mut worst = star + 1;
        for e in star + 1..n {
            if r.epochs[e].val > r.epochs[worst].val {
                worst = e;
            }
        }
        worst
    } else {
        n - 1
    };
    (fires, Oracle { optimal: Some(star), overtrained: Some(overtrained) })
}

fn random_record(rng: &mut ChaCha8Rng) -> TrainRecord {
    let n = rng.random_range(5..120);
    let floor: f64 = if rng.random_bool(0.3) { -2.0 } else { rng.random_range(0.05..1.0) };
    let decay = rng.random_range(0.02..0.3);
    let noise = rng.random_range(0.0..0.02);
    let rho_rate = rng.random_range(0.01..0.2);
    let rebound = rng.random_range(0.0..0.01);
    let mut r = TrainRecord::new(Some(1.0));
    for e in 0..n {
        let x = e as f64;
        let total = floor + (-x * decay).exp() + noise * rng.random_range(-1.0..1.0);
        let val = total + rebound * x + noise * rng.random_range(-1.0..1.0);
        r.push(EpochRecord {
            epoch: e,
            total,
            mse: total.abs(),
            corr: -1.0,
            val,
            rho: 1.0 - (-x * rho_rate).exp(),
            grad_norm: 1.0,
            ..Default::default()
        });
    }
    r
}

#[test]
fn c04_early_stop_matches_epoch_scan() {
    let _serial = serial();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (mut disagreements, mut stopped) = (0, 0);
    for _ in 0..100 {
        let r = random_record(&mut rng);
        let c = StopCriteria {
            eps1: [0.01, 0.05, 0.1][rng.random_range(0..3)],
            p: rng.random_range(1..40),
            eps2: [0.01, 0.02, 0.05, 0.1][rng.random_range(0..4)],
            rho_threshold: [0.5, 0.7, 0.9][rng.random_range(0..3)],
        };
        let (fires, oracle) = early_stop_oracle(&r, &c);
        let per_epoch_agrees = (0..r.len()).all(|e| check_stop(&r, &c, e) == fires[e]);
        let selected = select_checkpoints(&r, &c).ok();
        let selection_agrees = match (selected, oracle.optimal) {
            (Some(s), Some(o)) => s.optimal_stable == o && Some(s.overtrained_unstable) == oracle.overtrained,
            (None, None) => true,
            _ => false,
        };
        stopped += oracle.optimal.is_some() as usize;
        disagreements += !(per_epoch_agrees && selection_agrees) as usize;
    }
    let ok = disagreements == 0;
    report(4, ok, &format!("100 records ({stopped} stop), {disagreements} disagreements"));
    assert!(ok);
}

fn one_hot(idx: &[usize], n: usize) -> Array {
    let mut d = vec![0.0; idx.len() * n];
    for (r, &i) in idx.iter().enumerate() {
        d[r * n + i] = 1.0;
    }
    Array::matrix(idx.len(), n, d).unwrap()
}

fn random_table(rng: &mut ChaCha8Rng, states: usize, actions: usize) -> Vec<Vec<f64>> {
    (0..states)
        .map(|_| {
            let raw: Vec<f64> = (0..actions).map(|_| rng.random_range(0.05..1.0)).collect();
            let s: f64 = raw.iter().sum();
            raw.iter().map(|x| x / s).collect()
        })
        .collect()
}

#[test]
fn c05_wis_matches_hand_rolled_estimate() {
    let _serial = serial();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (n_states, n_actions) = (3, 4);
    let (mut worst, mut out_of_range) = (0.0f64, 0);
    for _ in 0..20 {
        let pe = random_table(&mut rng, n_states, n_actions);
        let pb = random_table(&mut rng, n_states, n_actions);
        let trajs: Vec<LatentTrajectory> = (0..5)
            .map(|i| {
                let k = rng.random_range(1..8);
                let states: Vec<usize> = (0..k).map(|_| rng.random_range(0..n_states)).collect();
                let actions: Vec<usize> = (0..k).map(|_| rng.random_range(0..n_actions)).collect();
                let mut rewards = vec![0.0; k];
                rewards[k - 1] = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                LatentTrajectory { patient_id: i, states: one_hot(&states, n_states), actions, rewards }
            })
            .collect();

        let mut weights = Vec::new();
        let mut returns = Vec::new();
        for t in &trajs {
            let mut w = 1.0;
            for (row, &a) in t.actions.iter().enumerate() {
                let s = TabularPolicy::state_index(t.states.row(row));
                w *= pe[s][a] / pb[s][a];
            }
            weights.push(w);
            returns.push(t.rewards.iter().sum::<f64>());
        }
        let total: f64 = weights.iter().sum();
        let expected: f64 = weights.iter().zip(&returns).map(|(w, g)| w * g).sum::<f64>() / total;

        let got = wis_evaluate(&TabularPolicy::new(pe), &TabularPolicy::new(pb), &trajs).unwrap().wis_return;
        worst = worst.max((got - expected).abs());
        let lo = returns.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = returns.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        out_of_range += !(lo - 1e-12 <= got && got <= hi + 1e-12) as usize;
    }
    let ok = worst <= 1e-12 && out_of_range == 0;
    report(5, ok, &format!("20 batches, worst error {worst:.1e}, {out_of_range} outside [min G, max G]"));
    assert!(ok);
}

/// States 0..n; action 0 advances, action 1 ends the episode with -1; both
/// actions in the last state end it with +1.
fn chain(n: usize) -> Transitions {
    let (mut s, mut s2, mut a, mut r, mut d) = (vec![], vec![], vec![], vec![], vec![]);
    for i in 0..n {
        for act in 0..2 {
            let last = i + 1 == n;
            let advance = act == 0 && !last;
            s.push(i);
            s2.push(if advance { i + 1 } else { i });
            a.push(act);
            r.push(if last { 1.0 } else if act == 1 { -1.0 } else { 0.0 });
            d.push(!advance);
        }
    }
    Transitions { states: one_hot(&s, n), actions: a, rewards: r, next_states: one_hot(&s2, n), terminal: d }
}

fn value_iteration(n: usize, gamma: f64) -> Vec<[f64; 2]> {
    let mut v = vec![0.0f64; n + 1];
    let mut q = vec![[0.0; 2]; n];
    for _ in 0..500 {
        for i in (0..n).rev() {
            q[i] = if i + 1 == n { [1.0, 1.0] } else { [gamma * v[i + 1], -1.0] };
            v[i] = q[i][0].max(q[i][1]);
        }
    }
    q
}

#[test]
fn c06_dbcq_sanity() {
    let _serial = serial();
    let data = chain(4);
    let behavior = TabularPolicy::new(vec![vec![0.5, 0.5]; 4]);
    let cfg = DbcqConfig {
        learning_rate: 1e-2,
        tau_bc: 0.0,
        steps: 6000,
        batch_size: 32,
        sync_interval: 50,
        hidden: vec![],
        ..Default::default()
    };
    let (policy, _) = train_dbcq(&data, &behavior, &cfg, 1, 0, |_, _| Ok(())).unwrap();
    let q = policy.q_values(&Array::eye(4)).unwrap();
    let exact = value_iteration(4, cfg.gamma);
    let mut q_err = 0.0f64;
    for (i, row) in exact.iter().enumerate() {
        for (a, v) in row.iter().enumerate() {
            q_err = q_err.max((q.get2(i, a) - v).abs());
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut violations = 0;
    for _ in 0..1000 {
        let p = random_table(&mut rng, 1, 25).remove(0);
        let (t1, t2) = (rng.random_range(0.0..1.0), rng.random_range(0.0..1.0));
        let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
        let (wide, narrow) = (admissible(&p, lo), admissible(&p, hi));
        let nested = wide.iter().zip(&narrow).all(|(w, n)| *w || !*n);
        violations += !(nested && narrow.iter().any(|&x| x)) as usize;
    }
    let ok = q_err < 1e-3 && violations == 0;
    report(6, ok, &format!("max |Q - Q*| {q_err:.1e}, {violations} monotonicity violations in 1000 draws"));
    assert!(ok);
}

// ---- shared desk-scale experiment -------------------------------------------

/// Desk-scale counterpart of the best configuration. See the README for the
/// scaling choices.
fn desk_config(out: &Path, lambda: f64) -> ExperimentConfig {
    let mut c = ExperimentConfig { out_dir: out.to_path_buf(), ..ExperimentConfig::default() };
    c.seeds = vec![25, 53, 1234];
    c.model.hidden_size = 16;
    c.model.field_widths = vec![32, 32];
    c.model.decoder_width = 32;
    c.train.lambda = lambda;
    c.train.epochs = 120;
    c.train.learning_rate = 1e-3;
    c.train.solver = SolverConfig::rk4(4.0);
    c.rl.dbcq.steps = 20_000;
    c.rl.dbcq.learning_rate = 1e-4;
    c.rl.eval_every = 2000;
    c
}

struct Arm {
    records: Vec<TrainRecord>,
    /// Validation WIS per seed of the optimal-stable and overtrained-unstable
    /// policies. Without a stable checkpoint the final epoch stands in for the first.
    wis: Vec<(Option<f64>, Option<f64>)>,
}

struct Experiment {
    with_corr: Arm,
    without_corr: Arm,
    /// Wall time of the arm with the correlation loss.
    minutes: f64,
}

fn run_arm(root: &Path, lambda: f64) -> Arm {
    let cfg = desk_config(root, lambda);
    cmd_generate(&cfg, true).unwrap();
    let trained = cmd_train(&cfg, true).unwrap();
    let layout = RunLayout::new(root);
    let mut wis = vec![(None, None); cfg.seeds.len()];
    if trained.iter().any(|t| t.checkpoints.is_some()) {
        for s in cmd_rl(&cfg, true).unwrap() {
            let i = cfg.seeds.iter().position(|&x| x == s.seed).unwrap();
            match s.checkpoint.as_str() {
                "optimal_stable" => wis[i].0 = Some(s.final_wis),
                _ => wis[i].1 = Some(s.final_wis),
            }
        }
    }
    if wis.iter().any(|w| w.0.is_none()) {
        let train = read_cohort_csv(&layout.cohort_csv("train")).unwrap();
        let val = read_cohort_csv(&layout.cohort_csv("val")).unwrap();
        let tr: Vec<&Trajectory> = train.iter().collect();
        let va: Vec<&Trajectory> = val.iter().collect();
        for (i, &seed) in cfg.seeds.iter().enumerate() {
            if wis[i].0.is_none() {
                let (s, _) = rl_on_checkpoint(&cfg, &layout, seed, "final", &tr, &va).unwrap();
                wis[i].0 = Some(s.final_wis);
            }
        }
    }
    let records = cfg
        .seeds
        .iter()
        .map(|&s| serde_json::from_slice(&std::fs::read(layout.record(s)).unwrap()).unwrap())
        .collect();
    Arm { records, wis }
}

fn experiment() -> &'static Experiment {
    static CELL: OnceLock<Experiment> = OnceLock::new();
    CELL.get_or_init(|| {
        let start = Instant::now();
        let dir = tempfile::tempdir().unwrap();
        let with_corr = run_arm(&dir.path().join("lambda1"), 1.0);
        let minutes = start.elapsed().as_secs_f64() / 60.0;
        let without_corr = run_arm(&dir.path().join("lambda0"), 0.0);
        Experiment { with_corr, without_corr, minutes }
    })
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

#[test]
fn c07_stable_checkpoint_beats_overtrained() {
    let _serial = serial();
    let x = experiment();
    let pairs: Vec<(f64, f64)> = x.with_corr.wis.iter().filter_map(|&(a, b)| Some((a?, b?))).collect();
    let complete = pairs.len() == x.with_corr.wis.len();
    let every_seed = complete && pairs.iter().all(|(a, b)| a > b);
    let margin = if pairs.is_empty() { f64::NAN } else { mean(&pairs.iter().map(|(a, b)| a - b).collect::<Vec<_>>()) };
    let ok = every_seed && margin >= 0.2 && x.minutes <= 120.0;
    report(
        7,
        ok,
        &format!("WIS (stable, overtrained) per seed {:?}, mean margin {margin:.3}, {:.1} min", x.with_corr.wis, x.minutes),
    );
    assert!(ok);
}

#[test]
fn c08_correlation_loss_helps_downstream() {
    let _serial = serial();
    let x = experiment();
    let stable = |arm: &Arm| mean(&arm.wis.iter().map(|w| w.0.unwrap()).collect::<Vec<_>>());
    let (l1, l0) = (stable(&x.with_corr), stable(&x.without_corr));
    let ok = l1 >= l0;
    report(8, ok, &format!("mean validation WIS with correlation loss {l1:.4}, without {l0:.4}"));
    assert!(ok);
}

#[test]
fn c09_mse_and_correlation_losses_are_coupled() {
    let _serial = serial();
    let x = experiment();
    let reports: Vec<_> = x
        .with_corr
        .records
        .iter()
        .map(|r| loss_correlation(&r.mses(), &r.corrs()).unwrap())
        .collect();
    let ok = reports.iter().all(|r| r.pearson_r > 0.0 && r.p_value < 0.01);
    let summary: Vec<String> = reports.iter().map(|r| format!("r={:.3} p={:.1e}", r.pearson_r, r.p_value)).collect();
    report(9, ok, &format!("{summary:?}"));
    assert!(ok);
}

#[test]
fn c10_plateau_correlation_exceeds_full_run() {
    let _serial = serial();
    let x = experiment();
    let eps2 = StopCriteria::default().eps2;
    let mut rows = Vec::new();
    let mut ok = true;
    for r in &x.with_corr.records {
        let plateau = flatness(&r.totals(), eps2).unwrap();
        let c = train_val_correlation(r, &plateau).unwrap();
        match (c.r_all, c.r_plateau) {
            (Some(all), Some(plateau)) => {
                ok &= plateau > all;
                rows.push(format!("all {all:.3} plateau {plateau:.3} (len {})", c.plateau_length));
            }
            _ => {
                ok = false;
                rows.push(format!("undefined (plateau len {})", c.plateau_length));
            }
        }
    }
    report(10, ok, &format!("{rows:?}"));
    assert!(ok);
}

#[test]
fn c11_cohort_contract() {
    let _serial = serial();
    let mut rows = Vec::new();
    let mut ok = true;
    for seed in [7, 11, 23] {
        let t = generate_cohort(2000, seed, &CohortParams::default()).unwrap();
        let m = t.iter().filter(|x| x.outcome.died()).count() as f64 / t.len() as f64;
        let s = split_cohort(&t, SplitRatios::default(), seed).unwrap();
        let sizes = [s.train.len(), s.val.len(), s.test.len()];
        let drift = s.mortality.iter().map(|x| (x - m).abs()).fold(0.0, f64::max);
        ok &= (m - 0.092).abs() <= 0.005 && sizes == [1400, 300, 300] && drift <= 0.003;
        rows.push(format!("seed {seed}: mortality {:.2}% sizes {sizes:?} split drift {:.2} pp", 100.0 * m, 100.0 * drift));
    }
    report(11, ok, &rows.join("; "));
    assert!(ok);
}

#[test]
fn c12_action_binning() {
    let _serial = serial();
    // bin lower and upper edges from the dose table, right-closed
    let vaso: [(f64, f64); 5] = [(0.0, 0.0), (0.0, 0.08), (0.08, 0.22), (0.22, 0.45), (0.45, f64::INFINITY)];
    let fluid: [(f64, f64); 5] = [(0.0, 0.0), (0.0, 50.0), (50.0, 180.0), (180.0, 530.0), (530.0, f64::INFINITY)];
    let probes = |(lo, hi): (f64, f64)| -> Vec<f64> {
        if hi == 0.0 {
            vec![0.0]
        } else if hi.is_infinite() {
            vec![lo * (1.0 + 1e-12), lo * 2.0, lo * 100.0]
        } else {
            vec![lo + (hi - lo) * 1e-9, 0.5 * (lo + hi), hi]
        }
    };
    let mut failures = Vec::new();
    let mut cells = 0;
    for (v, &vb) in vaso.iter().enumerate() {
        for (f, &fb) in fluid.iter().enumerate() {
            cells += 1;
            for dv in probes(vb) {
                for df in probes(fb) {
                    if bin_action(dv, df).unwrap() != v * 5 + f {
                        failures.push((dv, df));
                    }
                }
            }
        }
    }
    let boundaries = [(0.08, 0.0, 1), (0.22, 0.0, 2), (0.45, 0.0, 3), (0.0, 50.0, 1), (0.0, 180.0, 2), (0.0, 530.0, 3)];
    let boundary_ok = boundaries.iter().all(|&(v, f, bin)| {
        let a = bin_action(v, f).unwrap();
        if v > 0.0 {
            a == bin * 5
        } else {
            a == bin
        }
    });
    let ok = cells == 25 && failures.is_empty() && boundary_ok;
    report(12, ok, &format!("{cells} cells, {} misbinned probes, boundary doses ok: {boundary_ok}", failures.len()));
    assert!(ok);
}
