use serde::{Deserialize, Serialize};

use super::StabilizeError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlatnessReport {
    pub plateau_start: usize,
    pub plateau_length: usize,
    /// Mean absolute epoch-to-epoch change on the plateau; 0 when the plateau
    /// is a single epoch.
    pub mean_abs_slope: f64,
    /// The minimum loss was not positive, so `eps2` was used as an absolute tolerance.
    pub absolute_tolerance: bool,
}

impl FlatnessReport {
    pub fn epochs(&self) -> std::ops::Range<usize> {
        self.plateau_start..self.plateau_start + self.plateau_length
    }
}

/// Plateau = the longest run of consecutive epochs with
/// `|L(i) - min L| <= eps2 · min L` (earliest run on ties).
pub fn flatness(losses: &[f64], eps2: f64) -> Result<FlatnessReport, StabilizeError> {
    if losses.len() < 2 {
        return Err(StabilizeError::TooShort(losses.len()));
    }
    if let Some(i) = losses.iter().position(|l| !l.is_finite()) {
        return Err(StabilizeError::NonFinite(i));
    }
    let min = losses.iter().copied().fold(f64::INFINITY, f64::min);
    let absolute = min <= 0.0;
    let tol = if absolute { eps2 } else { eps2 * min };
    if absolute {
        log::debug!("minimum loss {min} is not positive; plateau tolerance is absolute ({eps2})");
    }

    let (mut best_start, mut best_len) = (0, 0);
    let mut run_start = 0;
    let mut run_len = 0;
    for (i, &l) in losses.iter().enumerate() {
        if (l - min).abs() <= tol {
            if run_len == 0 {
                run_start = i;
            }
            run_len += 1;
            if run_len > best_len {
                best_start = run_start;
                best_len = run_len;
            }
        } else {
            run_len = 0;
        }
    }
    let run = &losses[best_start..best_start + best_len];
    let s1 = if best_len >= 2 {
        run.windows(2).map(|w| (w[1] - w[0]).abs()).sum::<f64>() / (best_len - 1) as f64
    } else {
        0.0
    };
    Ok(FlatnessReport {
        plateau_start: best_start,
        plateau_length: best_len,
        mean_abs_slope: s1,
        absolute_tolerance: absolute,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn documented_cases() {
        let r = flatness(&[10.0, 5.0, 5.05, 5.02, 5.08, 9.0], 0.02).unwrap();
        assert_eq!((r.plateau_start, r.plateau_length), (1, 4));
        assert!((r.mean_abs_slope - 0.14 / 3.0).abs() < 1e-12);

        let r = flatness(&[2.0; 7], 0.02).unwrap();
        assert_eq!((r.plateau_length, r.mean_abs_slope), (7, 0.0));

        let r = flatness(&[1.0, 2.0, 3.0, 4.0], 0.02).unwrap();
        assert_eq!((r.plateau_start, r.plateau_length, r.mean_abs_slope), (0, 1, 0.0));

        assert!(flatness(&[1.0], 0.02).is_err());
    }

    #[test]
    fn negative_losses_use_absolute_tolerance() {
        let r = flatness(&[0.5, -1.0, -0.99, -0.5], 0.02).unwrap();
        assert!(r.absolute_tolerance);
        assert_eq!((r.plateau_start, r.plateau_length), (1, 2));
    }

    proptest! {
        #[test]
        fn plateau_monotone_in_eps(l in prop::collection::vec(0.1f64..5.0, 2..60), a in 0.0f64..0.2, b in 0.0f64..0.2) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let r1 = flatness(&l, lo).unwrap();
            let r2 = flatness(&l, hi).unwrap();
            prop_assert!(r2.plateau_length >= r1.plateau_length);
        }
    }
}
