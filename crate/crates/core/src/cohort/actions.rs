use super::CohortError;

/// Upper edges of the right-closed vasopressor bins 1..=3 (µg/kg/min); bin 0 is
/// exactly zero and bin 4 everything above the last edge.
pub const VASO_EDGES: [f64; 3] = [0.08, 0.22, 0.45];
/// Same layout for fluids (mL per 4 h).
pub const FLUID_EDGES: [f64; 3] = [50.0, 180.0, 530.0];

pub const N_BINS: usize = 5;

fn bin(dose: f64, edges: &[f64; 3]) -> usize {
    if dose == 0.0 {
        return 0;
    }
    match edges.iter().position(|&e| dose <= e) {
        Some(i) => i + 1,
        None => 4,
    }
}

fn check_dose(dose: f64, what: &str) -> Result<(), CohortError> {
    if dose.is_nan() || dose < 0.0 {
        return Err(CohortError::Ingestion {
            row: None,
            column: what.to_string(),
            message: format!("dose must be nonnegative, got {dose}"),
        });
    }
    Ok(())
}

pub fn vaso_bin(dose: f64) -> Result<usize, CohortError> {
    check_dose(dose, "vaso_dose")?;
    Ok(bin(dose, &VASO_EDGES))
}

pub fn fluid_bin(dose: f64) -> Result<usize, CohortError> {
    check_dose(dose, "fluid_dose")?;
    Ok(bin(dose, &FLUID_EDGES))
}

/// Flattens the 5×5 dose grid as `vaso_bin * 5 + fluid_bin`.
pub fn bin_action(vaso_dose: f64, fluid_dose: f64) -> Result<usize, CohortError> {
    Ok(vaso_bin(vaso_dose)? * N_BINS + fluid_bin(fluid_dose)?)
}

/// Inverse of the flattening: `(vaso_bin, fluid_bin)`.
pub fn split_action(action: usize) -> (usize, usize) {
    (action / N_BINS, action % N_BINS)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn documented_cases() {
        assert_eq!(bin_action(0.0, 0.0).unwrap(), 0);
        assert_eq!(bin_action(0.10, 200.0).unwrap(), 13);
        assert_eq!(bin_action(0.08, 50.0).unwrap(), 6);
        assert_eq!(bin_action(1.0, 1000.0).unwrap(), 24);
        assert!(bin_action(-0.1, 0.0).is_err());
        assert!(bin_action(0.0, f64::NAN).is_err());
    }

    #[test]
    fn split_inverts_flattening() {
        for a in 0..25 {
            let (v, f) = split_action(a);
            assert_eq!(v * 5 + f, a);
        }
    }
}
