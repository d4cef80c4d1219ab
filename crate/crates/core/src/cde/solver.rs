use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::diffcore::{Array, DiffError, Tape, Var};

use super::{CdeError, ControlPath};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolverKind {
    Rk4,
    ImplicitAdams,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    pub kind: SolverKind,
    /// Requested step size in hours; each interval between breakpoints is split
    /// into `ceil(gap / dt)` equal sub-steps.
    pub dt: f64,
    pub fixed_point_tol: f64,
    pub fixed_point_max_iters: usize,
    /// Initial relaxation weight of the fixed-point update; halved whenever the
    /// increment grows.
    pub damping: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig::rk4(0.5)
    }
}

impl SolverConfig {
    pub fn rk4(dt: f64) -> Self {
        SolverConfig {
            kind: SolverKind::Rk4,
            dt,
            fixed_point_tol: 1e-8,
            fixed_point_max_iters: 50,
            damping: 0.5,
        }
    }

    pub fn implicit_adams(dt: f64) -> Self {
        SolverConfig {
            kind: SolverKind::ImplicitAdams,
            ..SolverConfig::rk4(dt)
        }
    }

    pub fn validate(&self) -> Result<(), CdeError> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(CdeError::Config(format!("dt must be positive, got {}", self.dt)));
        }
        if !(self.fixed_point_tol > 0.0) {
            return Err(CdeError::Config("fixed_point_tol must be positive".into()));
        }
        if self.fixed_point_max_iters == 0 {
            return Err(CdeError::Config("fixed_point_max_iters must be at least 1".into()));
        }
        if !(self.damping > 0.0 && self.damping <= 1.0) {
            return Err(CdeError::Config("damping must lie in (0, 1]".into()));
        }
        Ok(())
    }
}

/// A vector field `f(h)` evaluated row-wise on a `B×hidden` batch, returning
/// `B×(hidden·control)`: one row-major `hidden×control` matrix per row.
pub trait VectorField {
    fn hidden_size(&self) -> usize;
    fn control_dim(&self) -> usize;
    fn eval(&self, tape: &mut Tape, h: Var) -> Result<Var, DiffError>;
}

/// Adapts a closure into a [`VectorField`].
pub struct FnField<F> {
    hidden: usize,
    control: usize,
    f: F,
}

impl<F> FnField<F>
where
    F: Fn(&mut Tape, Var) -> Result<Var, DiffError>,
{
    pub fn new(hidden: usize, control: usize, f: F) -> Self {
        FnField { hidden, control, f }
    }
}

impl<F> VectorField for FnField<F>
where
    F: Fn(&mut Tape, Var) -> Result<Var, DiffError>,
{
    fn hidden_size(&self) -> usize {
        self.hidden
    }
    fn control_dim(&self) -> usize {
        self.control
    }
    fn eval(&self, tape: &mut Tape, h: Var) -> Result<Var, DiffError> {
        (self.f)(tape, h)
    }
}

/// Adams-Moulton rule used for one implicit step.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AdamsOrder {
    /// Backward Euler.
    Zero,
    /// Trapezoid rule.
    One,
    Two,
    Four,
}

const AM0: [f64; 1] = [1.0];
const AM1: [f64; 2] = [0.5, 0.5];
const AM2: [f64; 3] = [5.0 / 12.0, 8.0 / 12.0, -1.0 / 12.0];
// Standard order-4 weights; they sum to one.
const AM4: [f64; 5] = [
    251.0 / 720.0,
    646.0 / 720.0,
    -264.0 / 720.0,
    106.0 / 720.0,
    -19.0 / 720.0,
];

impl AdamsOrder {
    /// Rule for the `j`-th step after a restart (0-based).
    pub fn startup(j: usize) -> Self {
        match j {
            0 => AdamsOrder::Zero,
            1 => AdamsOrder::One,
            2 => AdamsOrder::Two,
            _ => AdamsOrder::Four,
        }
    }

    /// `[β0, β1, ...]`: β0 weights the unknown state, βj the j-th previous one.
    pub fn coefficients(self) -> &'static [f64] {
        match self {
            AdamsOrder::Zero => &AM0,
            AdamsOrder::One => &AM1,
            AdamsOrder::Two => &AM2,
            AdamsOrder::Four => &AM4,
        }
    }

    /// Number of accepted states the rule reads (including the current one).
    pub fn history_len(self) -> usize {
        self.coefficients().len().saturating_sub(1).max(1)
    }
}

/// Fixed-step schedule of one trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct StepPlan {
    /// Control increment `slope · sub_dt` for each step.
    pub increments: Vec<Vec<f64>>,
    /// Position of each step since the last breakpoint (multistep restart index).
    pub segment_step: Vec<usize>,
    pub start_times: Vec<f64>,
    pub step_sizes: Vec<f64>,
    /// Number of steps completed when each output time is reached.
    pub output_steps: Vec<usize>,
    pub output_times: Vec<f64>,
    pub dim: usize,
}

impl StepPlan {
    /// Splits `[first knot, last output]` at every knot and output time, and each
    /// resulting gap into `ceil(gap / dt)` uniform sub-steps.
    pub fn new(path: &ControlPath, output_times: &[f64], dt: f64) -> Result<Self, CdeError> {
        if !(dt > 0.0) {
            return Err(CdeError::Config(format!("dt must be positive, got {dt}")));
        }
        if let Some(w) = output_times.windows(2).find(|w| w[1] < w[0]) {
            return Err(CdeError::Config(format!(
                "output times must be nondecreasing ({} after {})",
                w[1], w[0]
            )));
        }
        for &t in output_times {
            path.interval_at(t)?;
        }
        let mut breaks: Vec<f64> = path.knot_times().to_vec();
        breaks.extend_from_slice(output_times);
        breaks.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
        breaks.dedup();
        let last_needed = output_times.last().copied().unwrap_or(path.start());
        breaks.retain(|&t| t <= last_needed);

        let mut plan = StepPlan {
            increments: Vec::new(),
            segment_step: Vec::new(),
            start_times: Vec::new(),
            step_sizes: Vec::new(),
            output_steps: Vec::with_capacity(output_times.len()),
            output_times: output_times.to_vec(),
            dim: path.dim(),
        };
        let mut steps_at_break = vec![0usize; breaks.len()];
        for b in 0..breaks.len().saturating_sub(1) {
            let (t0, t1) = (breaks[b], breaks[b + 1]);
            let gap = t1 - t0;
            let n = ((gap / dt) - 1e-9).ceil().max(1.0) as usize;
            let sub = gap / n as f64;
            let slope = path.derivative(t0)?;
            let inc: Vec<f64> = slope.iter().map(|s| s * sub).collect();
            for j in 0..n {
                plan.increments.push(inc.clone());
                plan.segment_step.push(j);
                plan.start_times.push(t0 + j as f64 * sub);
                plan.step_sizes.push(sub);
            }
            steps_at_break[b + 1] = plan.increments.len();
        }
        for &t in output_times {
            let b = breaks.iter().position(|&x| x == t).expect("output time is a breakpoint");
            plan.output_steps.push(steps_at_break[b]);
        }
        Ok(plan)
    }

    pub fn len(&self) -> usize {
        self.increments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.increments.is_empty()
    }
}

/// Step schedules of several trajectories aligned by step index. Trajectories
/// that finish early are padded with zero increments, which leave the state
/// unchanged under both solvers.
#[derive(Debug, Clone)]
pub struct BatchPlan {
    pub rows: usize,
    pub dim: usize,
    pub increments: Vec<Arc<Array>>,
    pub segment_step: Vec<Vec<usize>>,
    pub start_times: Vec<Vec<f64>>,
    /// Sub-step length per row; zero on padded rows.
    pub step_sizes: Vec<Vec<f64>>,
    pub output_steps: Vec<Vec<usize>>,
}

impl BatchPlan {
    pub fn new(plans: &[StepPlan]) -> Result<Self, CdeError> {
        let Some(first) = plans.first() else {
            return Err(CdeError::Config("empty batch".into()));
        };
        let dim = first.dim;
        if plans.iter().any(|p| p.dim != dim) {
            return Err(CdeError::Config("control dimension differs across batch".into()));
        }
        let rows = plans.len();
        let n_steps = plans.iter().map(StepPlan::len).max().unwrap_or(0);
        let mut increments = Vec::with_capacity(n_steps);
        let mut segment_step = Vec::with_capacity(n_steps);
        let mut start_times = Vec::with_capacity(n_steps);
        let mut step_sizes = Vec::with_capacity(n_steps);
        for s in 0..n_steps {
            let mut u = Vec::with_capacity(rows * dim);
            let mut seg = Vec::with_capacity(rows);
            let mut ts = Vec::with_capacity(rows);
            let mut dts = Vec::with_capacity(rows);
            for p in plans {
                if s < p.len() {
                    u.extend_from_slice(&p.increments[s]);
                    seg.push(p.segment_step[s]);
                    ts.push(p.start_times[s]);
                    dts.push(p.step_sizes[s]);
                } else {
                    u.extend(std::iter::repeat_n(0.0, dim));
                    seg.push(s - p.len());
                    ts.push(p.output_times.last().copied().unwrap_or(0.0));
                    dts.push(0.0);
                }
            }
            increments.push(Arc::new(Array::matrix(rows, dim, u)?));
            segment_step.push(seg);
            start_times.push(ts);
            step_sizes.push(dts);
        }
        Ok(BatchPlan {
            rows,
            dim,
            increments,
            segment_step,
            start_times,
            step_sizes,
            output_steps: plans.iter().map(|p| p.output_steps.clone()).collect(),
        })
    }

    pub fn n_steps(&self) -> usize {
        self.increments.len()
    }

    /// Total number of output rows over the batch.
    pub fn n_outputs(&self) -> usize {
        self.output_steps.iter().map(Vec::len).sum()
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SolverStats {
    pub steps: usize,
    pub field_evals: usize,
    pub fixed_point_iters: usize,
    pub max_fixed_point_iters: usize,
}

/// Every state of a batch integration: `states[s]` is the `B×hidden` state after `s` steps.
pub struct BatchSolution {
    pub states: Vec<Var>,
    pub stats: SolverStats,
}

impl BatchSolution {
    /// Stacks the output states row by row (trajectory 0's outputs first).
    pub fn outputs(&self, tape: &mut Tape, plan: &BatchPlan) -> Result<Var, CdeError> {
        let picks: Vec<(Var, usize)> = plan
            .output_steps
            .iter()
            .enumerate()
            .flat_map(|(r, steps)| steps.iter().map(move |&s| (r, s)))
            .map(|(r, s)| (self.states[s], r))
            .collect();
        Ok(tape.gather_rows(&picks)?)
    }
}

fn control_field(
    tape: &mut Tape,
    field: &dyn VectorField,
    h: Var,
    u: &Arc<Array>,
) -> Result<(Var, Var), DiffError> {
    let f = field.eval(tape, h)?;
    let g = tape.contract(f, u.clone(), field.hidden_size())?;
    Ok((f, g))
}

fn first_bad_row(a: &Array) -> Option<usize> {
    let c = a.cols().max(1);
    a.data().iter().position(|x| !x.is_finite()).map(|i| i / c)
}

fn check_finite(tape: &Tape, v: Var, times: &[f64], stage: usize) -> Result<(), CdeError> {
    match first_bad_row(tape.value(v)) {
        Some(r) => Err(CdeError::Divergence {
            t: times.get(r).copied().unwrap_or(f64::NAN),
            stage,
        }),
        None => Ok(()),
    }
}

/// One classical RK4 step of `dh = f(h) · do` with per-row control increment `u`
/// (`slope · dt`).
pub fn rk4_step(
    tape: &mut Tape,
    field: &dyn VectorField,
    h: Var,
    u: &Arc<Array>,
) -> Result<Var, CdeError> {
    let times = vec![f64::NAN; tape.value(h).rows()];
    rk4_step_at(tape, field, h, u, &times)
}

fn rk4_step_at(
    tape: &mut Tape,
    field: &dyn VectorField,
    h: Var,
    u: &Arc<Array>,
    times: &[f64],
) -> Result<Var, CdeError> {
    let (_, k1) = control_field(tape, field, h, u)?;
    check_finite(tape, k1, times, 1)?;
    let half1 = tape.scale(k1, 0.5);
    let h2 = tape.add(h, half1)?;
    let (_, k2) = control_field(tape, field, h2, u)?;
    check_finite(tape, k2, times, 2)?;
    let half2 = tape.scale(k2, 0.5);
    let h3 = tape.add(h, half2)?;
    let (_, k3) = control_field(tape, field, h3, u)?;
    check_finite(tape, k3, times, 3)?;
    let h4 = tape.add(h, k3)?;
    let (_, k4) = control_field(tape, field, h4, u)?;
    check_finite(tape, k4, times, 4)?;
    let k23 = tape.add(k2, k3)?;
    let k23 = tape.scale(k23, 2.0);
    let s = tape.add(k1, k4)?;
    let s = tape.add(s, k23)?;
    let s = tape.scale(s, 1.0 / 6.0);
    let out = tape.add(h, s)?;
    check_finite(tape, out, times, 5)?;
    Ok(out)
}

/// RK4 step from time `t` with the path slope at `t`.
pub fn rk4_step_on_path(
    tape: &mut Tape,
    field: &dyn VectorField,
    h: Var,
    path: &ControlPath,
    t: f64,
    dt: f64,
) -> Result<Var, CdeError> {
    path.interval_at(t + dt)?;
    let slope = path.derivative(t)?;
    let rows = tape.value(h).rows();
    let mut u = Vec::with_capacity(rows * slope.len());
    for _ in 0..rows {
        u.extend(slope.iter().map(|s| s * dt));
    }
    let u = Arc::new(Array::matrix(rows, slope.len(), u)?);
    rk4_step_at(tape, field, h, &u, &vec![t; rows])
}

struct AdamsOutcome {
    state: Var,
    iterations: usize,
}

/// Implicit Adams-Moulton step with per-row rules. `hist_f[j]` is the field value
/// at the j-th most recent accepted state (`hist_f[0]` at `h`).
#[allow(clippy::too_many_arguments)]
fn adams_rows(
    tape: &mut Tape,
    field: &dyn VectorField,
    h: Var,
    hist_f: &[Var],
    u: &Arc<Array>,
    orders: &[AdamsOrder],
    cfg: &SolverConfig,
    times: &[f64],
) -> Result<AdamsOutcome, CdeError> {
    let rows = orders.len();
    let hidden = field.hidden_size();
    let coef = |j: usize| -> Vec<f64> {
        orders
            .iter()
            .map(|o| o.coefficients().get(j).copied().unwrap_or(0.0))
            .collect()
    };

    let mut known = h;
    for j in 1..=4 {
        let beta = coef(j);
        if beta.iter().all(|b| *b == 0.0) {
            continue;
        }
        let Some(&fj) = hist_f.get(j - 1) else {
            return Err(CdeError::Config(format!(
                "Adams step needs {} history states, got {}",
                j,
                hist_f.len()
            )));
        };
        let gj = tape.contract(fj, u.clone(), hidden)?;
        let term = tape.scale_rows(gj, Arc::new(beta))?;
        known = tape.add(known, term)?;
    }
    let beta0 = Arc::new(coef(0));

    // explicit Euler predictor
    let g_n = tape.contract(hist_f[0], u.clone(), hidden)?;
    let mut x = tape.add(h, g_n)?;
    check_finite(tape, x, times, 0)?;

    let mut omega = cfg.damping;
    let mut prev_inc = f64::INFINITY;
    let mut best: Option<(f64, Var)> = None;
    let mut last_inc = f64::INFINITY;
    for it in 1..=cfg.fixed_point_max_iters {
        let (_, g) = control_field(tape, field, x, u)?;
        check_finite(tape, g, times, it)?;
        let implicit = tape.scale_rows(g, beta0.clone())?;
        let target = tape.add(known, implicit)?;
        let next = if omega == 1.0 {
            target
        } else {
            let keep = tape.scale(x, 1.0 - omega);
            let moved = tape.scale(target, omega);
            tape.add(keep, moved)?
        };
        check_finite(tape, next, times, it)?;
        let inc = tape
            .value(next)
            .data()
            .iter()
            .zip(tape.value(x).data())
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        last_inc = inc;
        if inc <= cfg.fixed_point_tol {
            return Ok(AdamsOutcome {
                state: next,
                iterations: it,
            });
        }
        if best.is_none_or(|(b, _)| inc < b) {
            best = Some((inc, x));
        }
        if inc > prev_inc && omega > MIN_DAMPING {
            omega = (omega * 0.5).max(MIN_DAMPING);
            x = best.map(|(_, v)| v).unwrap_or(x);
            prev_inc = f64::INFINITY;
        } else {
            prev_inc = inc;
            x = next;
        }
    }
    let _ = rows;
    Err(CdeError::Stiffness {
        t: times.first().copied().unwrap_or(f64::NAN),
        iterations: cfg.fixed_point_max_iters,
        residual: last_inc,
    })
}

const MIN_DAMPING: f64 = 1.0 / 1024.0;

/// One implicit Adams-Moulton step. `history` holds accepted states oldest
/// first; its last entry is the current state. Returns the new state and the
/// number of fixed-point iterations used.
pub fn implicit_adams_step(
    tape: &mut Tape,
    field: &dyn VectorField,
    history: &[Var],
    u: &Arc<Array>,
    order: AdamsOrder,
    cfg: &SolverConfig,
) -> Result<(Var, usize), CdeError> {
    cfg.validate()?;
    if history.len() < order.history_len() {
        return Err(CdeError::Config(format!(
            "{:?} needs {} history states, got {}",
            order,
            order.history_len(),
            history.len()
        )));
    }
    let h = *history.last().expect("non-empty");
    let rows = tape.value(h).rows();
    let mut hist_f = Vec::new();
    for &s in history.iter().rev().take(4) {
        hist_f.push(field.eval(tape, s)?);
    }
    let out = adams_rows(
        tape,
        field,
        h,
        &hist_f,
        u,
        &vec![order; rows],
        cfg,
        &vec![f64::NAN; rows],
    )?;
    Ok((out.state, out.iterations))
}

/// Integrates a batch of trajectories along their aligned step schedules.
pub fn integrate_batch(
    tape: &mut Tape,
    field: &dyn VectorField,
    h0: Var,
    plan: &BatchPlan,
    cfg: &SolverConfig,
) -> Result<BatchSolution, CdeError> {
    cfg.validate()?;
    let h0v = tape.value(h0);
    if h0v.rows() != plan.rows || h0v.cols() != field.hidden_size() {
        return Err(CdeError::Config(format!(
            "initial state {}x{} does not match batch of {} with hidden size {}",
            h0v.rows(),
            h0v.cols(),
            plan.rows,
            field.hidden_size()
        )));
    }
    if plan.dim != field.control_dim() {
        return Err(CdeError::Config(format!(
            "control dimension {} does not match field input {}",
            plan.dim,
            field.control_dim()
        )));
    }
    let mut states = Vec::with_capacity(plan.n_steps() + 1);
    states.push(h0);
    let mut stats = SolverStats::default();
    match cfg.kind {
        SolverKind::Rk4 => {
            for s in 0..plan.n_steps() {
                let h = *states.last().expect("non-empty");
                let next = rk4_step_at(tape, field, h, &plan.increments[s], &plan.start_times[s])?;
                states.push(next);
                stats.field_evals += 4;
            }
        }
        SolverKind::ImplicitAdams => {
            // most recent first
            let mut hist_f: Vec<Var> = vec![field.eval(tape, h0)?];
            stats.field_evals += 1;
            for s in 0..plan.n_steps() {
                let h = *states.last().expect("non-empty");
                let orders: Vec<AdamsOrder> = plan.segment_step[s]
                    .iter()
                    .map(|&j| AdamsOrder::startup(j))
                    .collect();
                let out = adams_rows(
                    tape,
                    field,
                    h,
                    &hist_f,
                    &plan.increments[s],
                    &orders,
                    cfg,
                    &plan.start_times[s],
                )?;
                stats.fixed_point_iters += out.iterations;
                stats.max_fixed_point_iters = stats.max_fixed_point_iters.max(out.iterations);
                stats.field_evals += out.iterations + 1;
                let f_new = field.eval(tape, out.state)?;
                hist_f.insert(0, f_new);
                hist_f.truncate(4);
                states.push(out.state);
            }
        }
    }
    stats.steps = plan.n_steps();
    Ok(BatchSolution { states, stats })
}

/// States recorded on a tape at the requested output times.
pub struct TapeTrajectory {
    pub times: Vec<f64>,
    /// `K×hidden`
    pub states: Var,
    pub stats: SolverStats,
}

/// Hidden states at requested output times, detached from any tape.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenTrajectory {
    pub times: Vec<f64>,
    pub states: Array,
}

/// Integrates one trajectory from `h0` (`1×hidden`) and records the state at
/// each output time.
pub fn integrate(
    tape: &mut Tape,
    field: &dyn VectorField,
    h0: Var,
    path: &ControlPath,
    output_times: &[f64],
    cfg: &SolverConfig,
) -> Result<TapeTrajectory, CdeError> {
    cfg.validate()?;
    let plan = BatchPlan::new(&[StepPlan::new(path, output_times, cfg.dt)?])?;
    let sol = integrate_batch(tape, field, h0, &plan, cfg)?;
    let states = sol.outputs(tape, &plan)?;
    Ok(TapeTrajectory {
        times: output_times.to_vec(),
        states,
        stats: sol.stats,
    })
}

pub fn integrate_values(
    field: &dyn VectorField,
    h0: &[f64],
    path: &ControlPath,
    output_times: &[f64],
    cfg: &SolverConfig,
) -> Result<HiddenTrajectory, CdeError> {
    let mut tape = Tape::new();
    let h = tape.constant(Array::matrix(1, h0.len(), h0.to_vec())?);
    let traj = integrate(&mut tape, field, h, path, output_times, cfg)?;
    Ok(HiddenTrajectory {
        times: traj.times,
        states: tape.value(traj.states).clone(),
    })
}
