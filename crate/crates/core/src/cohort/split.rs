use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{CohortError, Trajectory};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        SplitRatios {
            train: 0.70,
            val: 0.15,
            test: 0.15,
        }
    }
}

impl SplitRatios {
    pub fn validate(&self) -> Result<(), CohortError> {
        let parts = [self.train, self.val, self.test];
        if parts.iter().any(|r| !(*r > 0.0)) || ((parts.iter().sum::<f64>()) - 1.0).abs() > 1e-9 {
            return Err(CohortError::Params(format!(
                "split ratios must be positive and sum to 1, got {parts:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortSplit {
    pub train: Vec<u64>,
    pub val: Vec<u64>,
    pub test: Vec<u64>,
    /// Mortality of train, val and test.
    pub mortality: [f64; 3],
}

impl CohortSplit {
    /// Selects the trajectories of one split, in id order.
    pub fn select<'a>(&self, ids: &[u64], all: &'a [Trajectory]) -> Vec<&'a Trajectory> {
        let mut want: Vec<u64> = ids.to_vec();
        want.sort_unstable();
        let mut out: Vec<&Trajectory> = all
            .iter()
            .filter(|t| want.binary_search(&t.patient_id).is_ok())
            .collect();
        out.sort_by_key(|t| t.patient_id);
        out
    }
}

/// Outcome-stratified split. Totals are rounded globally, deaths per split are
/// rounded within the death stratum and survivors fill the rest, so both the
/// split sizes and their mortality stay as close to the ratios as integers allow.
pub fn split_cohort(trajectories: &[Trajectory], ratios: SplitRatios, seed: u64) -> Result<CohortSplit, CohortError> {
    ratios.validate()?;
    let n = trajectories.len();
    if n < 20 {
        return Err(CohortError::Split(format!("need at least 20 trajectories, got {n}")));
    }
    let mut died: Vec<u64> = Vec::new();
    let mut survived: Vec<u64> = Vec::new();
    for t in trajectories {
        if t.outcome.died() {
            died.push(t.patient_id)
        } else {
            survived.push(t.patient_id)
        }
    }
    died.sort_unstable();
    survived.sort_unstable();
    if died.windows(2).chain(survived.windows(2)).any(|w| w[0] == w[1]) {
        return Err(CohortError::Split("duplicate patient ids".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    died.shuffle(&mut rng);
    survived.shuffle(&mut rng);

    let count = |m: usize, r: f64| (r * m as f64).round() as usize;
    let n_train = count(n, ratios.train);
    let n_val = count(n, ratios.val);
    let d_train = count(died.len(), ratios.train);
    let d_val = count(died.len(), ratios.val);
    let d = died.len();
    if d > 0 && (d_train == 0 || d_val == 0 || d_train + d_val >= d) {
        return Err(CohortError::Split(format!(
            "{d} deaths cannot populate all three splits"
        )));
    }
    let s_train = n_train.checked_sub(d_train);
    let s_val = n_val.checked_sub(d_val);
    let (Some(s_train), Some(s_val)) = (s_train, s_val) else {
        return Err(CohortError::Split("death stratum larger than a split".into()));
    };
    if s_train + s_val >= survived.len() {
        return Err(CohortError::Split("survivor stratum too small".into()));
    }

    let take = |v: &[u64], a: usize, b: usize| -> (Vec<u64>, Vec<u64>, Vec<u64>) {
        (v[..a].to_vec(), v[a..a + b].to_vec(), v[a + b..].to_vec())
    };
    let (dt, dv, ds) = take(&died, d_train, d_val);
    let (st, sv, ss) = take(&survived, s_train, s_val);
    let merge = |mut a: Vec<u64>, b: Vec<u64>| {
        a.extend(b);
        a.sort_unstable();
        a
    };
    let rate = |deaths: usize, total: usize| deaths as f64 / total as f64;
    let mortality = [
        rate(dt.len(), dt.len() + st.len()),
        rate(dv.len(), dv.len() + sv.len()),
        rate(ds.len(), ds.len() + ss.len()),
    ];
    Ok(CohortSplit {
        train: merge(dt, st),
        val: merge(dv, sv),
        test: merge(ds, ss),
        mortality,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cohort::{Acuity, Outcome};
    use crate::diffcore::Array;

    fn stub(id: u64, died: bool) -> Trajectory {
        Trajectory {
            patient_id: id,
            times: vec![0.0, 4.0],
            observations: Array::zeros(&[2, 33]),
            actions: vec![0, 0],
            acuity: vec![
                Acuity {
                    sofa: 1.0,
                    sapsii: 1.0,
                    oasis: 10.0
                };
                2
            ],
            outcome: if died { Outcome::Died } else { Outcome::Survived },
        }
    }

    #[test]
    fn stratified_counts() {
        let cohort: Vec<_> = (0..1000).map(|i| stub(i, i % 1000 < 92)).collect();
        let s = split_cohort(&cohort, SplitRatios::default(), 3).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (700, 150, 150));
        let deaths = |ids: &[u64]| ids.iter().filter(|&&i| i < 92).count();
        assert!((64..=65).contains(&deaths(&s.train)));
        assert_eq!(deaths(&s.val), 14);
        assert!((13..=14).contains(&deaths(&s.test)));
    }

    #[test]
    fn single_stratum_and_order_invariance() {
        let cohort: Vec<_> = (0..100).map(|i| stub(i, false)).collect();
        let a = split_cohort(&cohort, SplitRatios::default(), 9).unwrap();
        assert_eq!((a.train.len(), a.val.len(), a.test.len()), (70, 15, 15));
        let mut rev = cohort.clone();
        rev.reverse();
        let b = split_cohort(&rev, SplitRatios::default(), 9).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn tiny_death_stratum_is_rejected() {
        let cohort: Vec<_> = (0..100).map(|i| stub(i, i < 2)).collect();
        assert!(matches!(
            split_cohort(&cohort, SplitRatios::default(), 1),
            Err(CohortError::Split(_))
        ));
    }
}
