use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{
    bin_action, Acuity, CohortError, Outcome, Trajectory, FLUID_EDGES, MAX_STEPS, N_FEATURES,
    OASIS_RANGE, SAPSII_RANGE, SOFA_RANGE, VASO_EDGES,
};
use crate::diffcore::Array;

/// Knobs of the synthetic severity process. Rates are per hour.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CohortParams {
    pub baseline_severity: f64,
    /// Spread of the per-patient long-run severity.
    pub patient_spread: f64,
    /// Spread of the admission severity around the patient's long-run level.
    pub initial_spread: f64,
    pub mean_reversion: f64,
    pub process_noise: f64,
    /// Pull towards `vaso_pivot` at the top vasopressor bin; scales linearly with the bin.
    pub vaso_effect: f64,
    /// Above this severity vasopressors help; below it they harm.
    pub vaso_pivot: f64,
    /// Extra diffusion while the top fluid bin is given.
    pub fluid_noise: f64,
    pub obs_noise: f64,
    /// Acuity noise as a fraction of each score's range.
    pub acuity_noise: f64,
    /// Features driven by severity; the remainder are autocorrelated nuisance signals.
    pub n_signal_features: usize,
    pub cadence_hours: f64,
    pub jitter_hours: f64,
    /// Probability that an interior observation is dropped.
    pub dropout: f64,
    pub min_stay_steps: usize,
    /// Probability that the clinician picks a random vasopressor bin.
    pub clinician_noise: f64,
    pub target_mortality: f64,
}

impl Default for CohortParams {
    fn default() -> Self {
        CohortParams {
            baseline_severity: 0.0,
            patient_spread: 0.8,
            initial_spread: 0.5,
            mean_reversion: 0.03,
            process_noise: 0.12,
            vaso_effect: 0.06,
            vaso_pivot: 0.6,
            fluid_noise: 0.25,
            obs_noise: 0.1,
            acuity_noise: 0.04,
            n_signal_features: 25,
            cadence_hours: 4.0,
            jitter_hours: 1.0,
            dropout: 0.1,
            min_stay_steps: 6,
            clinician_noise: 0.3,
            target_mortality: 0.092,
        }
    }
}

impl CohortParams {
    /// No randomness in the severity process and no treatment effect: every
    /// patient sits at the baseline severity.
    pub fn frozen() -> Self {
        CohortParams {
            patient_spread: 0.0,
            initial_spread: 0.0,
            process_noise: 0.0,
            vaso_effect: 0.0,
            fluid_noise: 0.0,
            ..CohortParams::default()
        }
    }

    pub fn validate(&self) -> Result<(), CohortError> {
        let err = |m: String| Err(CohortError::Params(m));
        let nonneg = [
            ("patient_spread", self.patient_spread),
            ("initial_spread", self.initial_spread),
            ("mean_reversion", self.mean_reversion),
            ("process_noise", self.process_noise),
            ("vaso_effect", self.vaso_effect),
            ("fluid_noise", self.fluid_noise),
            ("obs_noise", self.obs_noise),
            ("acuity_noise", self.acuity_noise),
            ("jitter_hours", self.jitter_hours),
        ];
        for (name, v) in nonneg {
            if !(v >= 0.0 && v.is_finite()) {
                return err(format!("{name} must be finite and nonnegative, got {v}"));
            }
        }
        if self.n_signal_features > N_FEATURES {
            return err(format!("n_signal_features must be at most {N_FEATURES}"));
        }
        if !(self.cadence_hours > 0.0) || 2.0 * self.jitter_hours >= self.cadence_hours {
            return err("jitter must be less than half the cadence".into());
        }
        if (MAX_STEPS - 1) as f64 * self.cadence_hours + self.jitter_hours > 72.0 {
            return err("nominal grid exceeds the 72 h window".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return err("dropout must lie in [0, 1)".into());
        }
        if !(2..=MAX_STEPS).contains(&self.min_stay_steps) {
            return err(format!("min_stay_steps must lie in 2..={MAX_STEPS}"));
        }
        if !(0.0..=1.0).contains(&self.clinician_noise) {
            return err("clinician_noise must lie in [0, 1]".into());
        }
        if !(self.target_mortality > 0.0 && self.target_mortality < 1.0) {
            return err("target_mortality must lie in (0, 1)".into());
        }
        Ok(())
    }
}

/// A generated cohort together with the hidden severity process behind it.
#[derive(Debug, Clone)]
pub struct GeneratedCohort {
    pub trajectories: Vec<Trajectory>,
    /// Severity at each observation time.
    pub severity: Vec<Vec<f64>>,
    /// Severity one cadence after the last observation; decides the outcome.
    pub terminal_severity: Vec<f64>,
    /// `None` when every terminal severity ties and the outcome is uniform.
    pub death_threshold: Option<f64>,
}

struct FeatureMap {
    amp: f64,
    gain: f64,
    shift: f64,
    offset: f64,
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn feature_maps(rng: &mut ChaCha8Rng, n: usize) -> Vec<FeatureMap> {
    (0..n)
        .map(|_| {
            let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            FeatureMap {
                amp: sign * rng.random_range(0.5..1.5),
                gain: rng.random_range(0.5..1.5),
                shift: rng.random_range(-0.5..0.5),
                offset: 0.5 * normal(rng),
            }
        })
        .collect()
}

fn dose_in_bin(rng: &mut ChaCha8Rng, bin: usize, edges: &[f64; 3], top: f64) -> f64 {
    match bin {
        0 => 0.0,
        b => {
            let lo = if b == 1 { 0.0 } else { edges[b - 2] };
            let hi = if b == 4 { top } else { edges[b - 1] };
            // strictly inside the right-closed bin
            lo + (hi - lo) * rng.random_range(0.05..0.95)
        }
    }
}

fn acuity_of(s: f64, noise: f64, rng: &mut ChaCha8Rng) -> Acuity {
    let score = |(lo, hi): (f64, f64), gain: f64, shift: f64, rng: &mut ChaCha8Rng| {
        let span = hi - lo;
        (lo + span * sigmoid(gain * s - shift) + noise * span * normal(rng)).clamp(lo, hi)
    };
    Acuity {
        sofa: score(SOFA_RANGE, 1.0, 0.5, rng),
        sapsii: score(SAPSII_RANGE, 0.9, 0.8, rng),
        oasis: score(OASIS_RANGE, 0.9, 0.3, rng),
    }
}

struct Patient {
    times: Vec<f64>,
    severity: Vec<f64>,
    terminal: f64,
    observations: Vec<f64>,
    actions: Vec<usize>,
    acuity: Vec<Acuity>,
}

fn simulate_patient(p: &CohortParams, maps: &[FeatureMap], rng: &mut ChaCha8Rng) -> Result<Patient, CohortError> {
    let k_nominal = rng.random_range(p.min_stay_steps..=MAX_STEPS);
    let mut times = Vec::with_capacity(k_nominal);
    for k in 0..k_nominal {
        let keep = k == 0 || k + 1 == k_nominal || !rng.random_bool(p.dropout);
        let jitter = if k == 0 {
            rng.random_range(0.0..=p.jitter_hours)
        } else {
            rng.random_range(-p.jitter_hours..=p.jitter_hours)
        };
        if keep {
            times.push(k as f64 * p.cadence_hours + jitter);
        }
    }

    let mu = p.baseline_severity + p.patient_spread * normal(rng);
    let mut s = mu + p.initial_spread * normal(rng);
    let n_nuisance = N_FEATURES - maps.len();
    let mut nuisance: Vec<f64> = (0..n_nuisance).map(|_| normal(rng)).collect();

    let k = times.len();
    let mut out = Patient {
        times: times.clone(),
        severity: Vec::with_capacity(k),
        terminal: 0.0,
        observations: Vec::with_capacity(k * N_FEATURES),
        actions: Vec::with_capacity(k),
        acuity: Vec::with_capacity(k),
    };
    for i in 0..k {
        out.severity.push(s);
        for m in maps {
            out.observations
                .push(m.amp * (m.gain * s + m.shift).tanh() + m.offset + p.obs_noise * normal(rng));
        }
        out.observations.extend(nuisance.iter().map(|z| 0.5 * z));
        out.acuity.push(acuity_of(s, p.acuity_noise, rng));

        // clinician: vasopressors roughly track perceived severity above the pivot
        let perceived = s + 0.5 * normal(rng);
        let vbin = if rng.random_bool(p.clinician_noise) {
            rng.random_range(0..5)
        } else {
            (((perceived - p.vaso_pivot) * 2.0 + 1.0).floor()).clamp(0.0, 4.0) as usize
        };
        let u: f64 = rng.random();
        let fbin = if u < 0.15 {
            0
        } else if u < 0.9 {
            rng.random_range(1..4)
        } else {
            4
        };
        let vaso = dose_in_bin(rng, vbin, &VASO_EDGES, 1.0);
        let fluid = dose_in_bin(rng, fbin, &FLUID_EDGES, 1500.0);
        out.actions.push(bin_action(vaso, fluid)?);

        let gap = if i + 1 < k {
            times[i + 1] - times[i]
        } else {
            p.cadence_hours
        };
        let decay = (-p.mean_reversion * gap).exp();
        let var = if p.mean_reversion > 0.0 {
            (1.0 - decay * decay) / (2.0 * p.mean_reversion)
        } else {
            gap
        };
        let sigma2 = p.process_noise.powi(2) + if fbin == 4 { p.fluid_noise.powi(2) } else { 0.0 };
        let treatment = -p.vaso_effect * (vbin as f64 / 4.0) * (s - p.vaso_pivot) * gap;
        s = mu + (s - mu) * decay + treatment + (sigma2 * var).sqrt() * normal(rng);
        for z in nuisance.iter_mut() {
            *z = 0.8 * *z + 0.6 * normal(rng);
        }
    }
    out.terminal = s;
    Ok(out)
}

/// Threshold `c` such that `#{x > c}` equals `round(rate · n)`, found by bisection.
/// Returns `None` when all values tie.
fn calibrate_threshold(values: &[f64], rate: f64) -> Result<Option<f64>, CohortError> {
    let lo0 = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi0 = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if hi0 - lo0 <= 1e-12 * (1.0 + hi0.abs()) {
        return Ok(None);
    }
    let n = values.len();
    let target = (rate * n as f64).round() as usize;
    let count = |c: f64| values.iter().filter(|&&x| x > c).count();
    let (mut lo, mut hi) = (lo0, hi0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        match count(mid).cmp(&target) {
            std::cmp::Ordering::Greater => lo = mid,
            std::cmp::Ordering::Less => hi = mid,
            std::cmp::Ordering::Equal => return Ok(Some(mid)),
        }
    }
    let got = count(0.5 * (lo + hi));
    if (got as f64 - target as f64).abs() > 0.005 * n as f64 {
        return Err(CohortError::Params(format!(
            "mortality calibration failed: {got} deaths for target {target}"
        )));
    }
    Ok(Some(0.5 * (lo + hi)))
}

pub fn generate_cohort(n: usize, seed: u64, params: &CohortParams) -> Result<Vec<Trajectory>, CohortError> {
    Ok(generate_cohort_detailed(n, seed, params)?.trajectories)
}

/// Each patient draws from its own ChaCha stream of the master seed, so a
/// patient's record does not depend on how many others are generated.
pub fn generate_cohort_detailed(n: usize, seed: u64, params: &CohortParams) -> Result<GeneratedCohort, CohortError> {
    params.validate()?;
    if n < 10 {
        return Err(CohortError::Params(format!("need at least 10 patients, got {n}")));
    }
    let mut master = ChaCha8Rng::seed_from_u64(seed);
    master.set_stream(0);
    let maps = feature_maps(&mut master, params.n_signal_features);

    let mut patients = Vec::with_capacity(n);
    for i in 0..n {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64 + 1);
        patients.push(simulate_patient(params, &maps, &mut rng)?);
    }
    let terminal: Vec<f64> = patients.iter().map(|p| p.terminal).collect();
    let threshold = calibrate_threshold(&terminal, params.target_mortality)?;

    let mut trajectories = Vec::with_capacity(n);
    let mut severity = Vec::with_capacity(n);
    for (i, p) in patients.into_iter().enumerate() {
        let died = threshold.is_some_and(|c| p.terminal > c);
        let k = p.times.len();
        trajectories.push(Trajectory {
            patient_id: i as u64,
            times: p.times,
            observations: Array::matrix(k, N_FEATURES, p.observations).expect("shape"),
            actions: p.actions,
            acuity: p.acuity,
            outcome: if died { Outcome::Died } else { Outcome::Survived },
        });
        severity.push(p.severity);
    }
    Ok(GeneratedCohort {
        trajectories,
        severity,
        terminal_severity: terminal,
        death_threshold: threshold,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cohort::mortality_rate;

    fn pearson(x: &[f64], y: &[f64]) -> f64 {
        let n = x.len() as f64;
        let mx = x.iter().sum::<f64>() / n;
        let my = y.iter().sum::<f64>() / n;
        let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
        let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
        let syy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
        sxy / (sxx * syy).sqrt()
    }

    #[test]
    fn mortality_hits_target() {
        let c = generate_cohort(2000, 7, &CohortParams::default()).unwrap();
        let m = mortality_rate(&c);
        assert!((0.087..=0.097).contains(&m), "{m}");
        for t in &c {
            t.validate().unwrap();
        }
    }

    #[test]
    fn frozen_dynamics_give_uniform_outcome() {
        let g = generate_cohort_detailed(50, 3, &CohortParams::frozen()).unwrap();
        assert!(g.death_threshold.is_none());
        let s0 = g.severity[0][0];
        assert!(g.severity.iter().flatten().all(|&s| s == s0));
        let first = g.trajectories[0].outcome;
        assert!(g.trajectories.iter().all(|t| t.outcome == first));
    }

    #[test]
    fn acuity_tracks_severity() {
        let g = generate_cohort_detailed(2000, 11, &CohortParams::default()).unwrap();
        let sev: Vec<f64> = g.severity.iter().flatten().copied().collect();
        for idx in 0..3 {
            let score: Vec<f64> = g
                .trajectories
                .iter()
                .flat_map(|t| t.acuity.iter().map(move |a| a.as_array()[idx]))
                .collect();
            let r = pearson(&sev, &score);
            assert!(r >= 0.9, "score {idx}: r={r}");
        }
        let mean_terminal_sofa = |died: bool| {
            let v: Vec<f64> = g
                .trajectories
                .iter()
                .filter(|t| t.outcome.died() == died)
                .map(|t| t.acuity.last().unwrap().sofa)
                .collect();
            v.iter().sum::<f64>() / v.len() as f64
        };
        assert!(mean_terminal_sofa(true) > mean_terminal_sofa(false));
    }

    #[test]
    fn patients_are_prefix_stable() {
        let a = generate_cohort(20, 5, &CohortParams::default()).unwrap();
        let b = generate_cohort(40, 5, &CohortParams::default()).unwrap();
        for i in 0..20 {
            assert_eq!(a[i].times, b[i].times);
            assert_eq!(a[i].observations, b[i].observations);
        }
    }

    #[test]
    fn rewards_are_terminal_only() {
        for t in generate_cohort(200, 1, &CohortParams::default()).unwrap() {
            let r = t.rewards();
            assert!(r[..r.len() - 1].iter().all(|&x| x == 0.0));
            assert!(r[r.len() - 1].abs() == 1.0);
        }
    }

    #[test]
    fn rejects_bad_params() {
        let p = CohortParams {
            dropout: 1.5,
            ..CohortParams::default()
        };
        assert!(generate_cohort(100, 1, &p).is_err());
        assert!(generate_cohort(5, 1, &CohortParams::default()).is_err());
    }
}
