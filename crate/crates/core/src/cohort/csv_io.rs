//! One row per timestep:
//! `patient_id,t_hours,f0..f32,action,sofa,sapsii,oasis,terminal_flag,outcome`.
//! Rows of a patient are contiguous, `terminal_flag` is 1 only on its last row
//! and `outcome` (1 = died) is repeated on every row.

use std::path::Path;
use std::sync::LazyLock;

use super::{Acuity, CohortError, Outcome, Trajectory, N_ACTIONS, N_FEATURES};
use crate::diffcore::Array;

pub static CSV_HEADER: LazyLock<Vec<String>> = LazyLock::new(|| {
    let mut h = vec!["patient_id".to_string(), "t_hours".to_string()];
    h.extend((0..N_FEATURES).map(|i| format!("f{i}")));
    for c in ["action", "sofa", "sapsii", "oasis", "terminal_flag", "outcome"] {
        h.push(c.to_string());
    }
    h
});

pub fn write_cohort_csv<'a>(
    trajectories: impl IntoIterator<Item = &'a Trajectory>,
    path: &Path,
) -> Result<(), CohortError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(CSV_HEADER.iter())?;
    let mut row: Vec<String> = Vec::with_capacity(CSV_HEADER.len());
    for t in trajectories {
        let outcome = if t.outcome.died() { "1" } else { "0" };
        for k in 0..t.len() {
            row.clear();
            row.push(t.patient_id.to_string());
            row.push(t.times[k].to_string());
            row.extend(t.observations.row(k).iter().map(f64::to_string));
            row.push(t.actions[k].to_string());
            let a = t.acuity[k];
            row.extend([a.sofa, a.sapsii, a.oasis].iter().map(f64::to_string));
            row.push(if k + 1 == t.len() { "1" } else { "0" }.to_string());
            row.push(outcome.to_string());
            w.write_record(&row)?;
        }
    }
    w.flush()?;
    Ok(())
}

#[derive(Default)]
struct Pending {
    id: u64,
    times: Vec<f64>,
    obs: Vec<f64>,
    actions: Vec<usize>,
    acuity: Vec<Acuity>,
    outcome: Option<Outcome>,
    closed: bool,
}

pub fn read_cohort_csv(path: &Path) -> Result<Vec<Trajectory>, CohortError> {
    let mut r = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header != *CSV_HEADER {
        let unknown: Vec<&String> = header.iter().filter(|h| !CSV_HEADER.contains(h)).collect();
        let missing: Vec<&String> = CSV_HEADER.iter().filter(|h| !header.contains(h)).collect();
        return Err(CohortError::Schema(format!(
            "unknown columns {unknown:?}, missing columns {missing:?}; required header is {}",
            CSV_HEADER.join(",")
        )));
    }

    let mut out: Vec<Trajectory> = Vec::new();
    let mut cur: Option<Pending> = None;
    let mut seen = std::collections::HashSet::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        // 1-based data row, header is row 0
        let row = i + 1;
        let err = |col: &str, message: String| CohortError::Ingestion {
            row: Some(row),
            column: col.to_string(),
            message,
        };
        let num = |idx: usize| -> Result<f64, CohortError> {
            let col = &CSV_HEADER[idx];
            let v: f64 = rec[idx]
                .trim()
                .parse()
                .map_err(|_| err(col, format!("not a number: '{}'", &rec[idx])))?;
            if !v.is_finite() {
                return Err(err(col, "non-finite value".into()));
            }
            Ok(v)
        };
        let int = |idx: usize| -> Result<u64, CohortError> {
            rec[idx]
                .trim()
                .parse()
                .map_err(|_| err(&CSV_HEADER[idx], format!("not an integer: '{}'", &rec[idx])))
        };

        let id = int(0)?;
        let t = num(1)?;
        let base = 2 + N_FEATURES;
        let action = int(base)? as usize;
        if action >= N_ACTIONS {
            return Err(err("action", format!("{action} outside [0, 24]")));
        }
        let acuity = Acuity {
            sofa: num(base + 1)?,
            sapsii: num(base + 2)?,
            oasis: num(base + 3)?,
        };
        let terminal = match int(base + 4)? {
            0 => false,
            1 => true,
            v => return Err(err("terminal_flag", format!("{v} is not 0 or 1"))),
        };
        let outcome = match int(base + 5)? {
            0 => Outcome::Survived,
            1 => Outcome::Died,
            v => return Err(err("outcome", format!("{v} is not 0 or 1"))),
        };

        let same = cur.as_ref().is_some_and(|p| p.id == id);
        if !same {
            if let Some(p) = cur.take() {
                if !p.closed {
                    return Err(err("terminal_flag", format!("patient {} ends without a terminal row", p.id)));
                }
                out.push(finish(p, row)?);
            }
            if !seen.insert(id) {
                return Err(err("patient_id", format!("rows of patient {id} are not contiguous")));
            }
            cur = Some(Pending {
                id,
                ..Pending::default()
            });
        }
        let p = cur.as_mut().expect("set above");
        if p.closed {
            return Err(err("terminal_flag", format!("patient {id} has rows after its terminal row")));
        }
        if p.times.last().is_some_and(|&last| t <= last) {
            return Err(err("t_hours", format!("time {t} does not increase for patient {id}")));
        }
        if p.outcome.is_some_and(|o| o != outcome) {
            return Err(err("outcome", format!("outcome changes within patient {id}")));
        }
        p.times.push(t);
        for j in 0..N_FEATURES {
            p.obs.push(num(2 + j)?);
        }
        p.actions.push(action);
        p.acuity.push(acuity);
        p.outcome = Some(outcome);
        p.closed = terminal;
    }
    if let Some(p) = cur.take() {
        if !p.closed {
            return Err(CohortError::Ingestion {
                row: None,
                column: "terminal_flag".into(),
                message: format!("patient {} ends without a terminal row", p.id),
            });
        }
        out.push(finish(p, 0)?);
    }
    Ok(out)
}

fn finish(p: Pending, row: usize) -> Result<Trajectory, CohortError> {
    let k = p.times.len();
    let t = Trajectory {
        patient_id: p.id,
        times: p.times,
        observations: Array::matrix(k, N_FEATURES, p.obs).expect("row width checked"),
        actions: p.actions,
        acuity: p.acuity,
        outcome: p.outcome.expect("at least one row"),
    };
    t.validate().map_err(|e| match e {
        CohortError::Ingestion { column, message, .. } => CohortError::Ingestion {
            row: (row > 0).then_some(row),
            column,
            message,
        },
        other => other,
    })?;
    Ok(t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cohort::{generate_cohort, CohortParams};

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.csv");
        let cohort = generate_cohort(30, 4, &CohortParams::default()).unwrap();
        write_cohort_csv(&cohort, &path).unwrap();
        let back = read_cohort_csv(&path).unwrap();
        assert_eq!(back, cohort);
    }

    fn rewrite(f: impl Fn(&str) -> String) -> Result<Vec<Trajectory>, CohortError> {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.csv");
        let cohort = generate_cohort(12, 4, &CohortParams::default()).unwrap();
        write_cohort_csv(&cohort, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        std::fs::write(&path, f(&text)).unwrap();
        read_cohort_csv(&path)
    }

    #[test]
    fn rejects_out_of_range_action() {
        let err = rewrite(|s| {
            let mut lines: Vec<String> = s.lines().map(str::to_string).collect();
            let mut cells: Vec<String> = lines[3].split(',').map(str::to_string).collect();
            cells[2 + N_FEATURES] = "25".into();
            lines[3] = cells.join(",");
            lines.join("\n") + "\n"
        })
        .unwrap_err();
        match err {
            CohortError::Ingestion { row, column, .. } => {
                assert_eq!(row, Some(3));
                assert_eq!(column, "action");
            }
            other => panic!("{other}"),
        }
    }

    #[test]
    fn rejects_missing_acuity_columns() {
        let err = rewrite(|s| {
            s.lines()
                .map(|l| {
                    let c: Vec<&str> = l.split(',').collect();
                    let keep: Vec<&str> = c[..3 + N_FEATURES].iter().chain(&c[6 + N_FEATURES..]).copied().collect();
                    keep.join(",")
                })
                .collect::<Vec<_>>()
                .join("\n")
        })
        .unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("sofa") && msg.contains("required header"), "{msg}");
    }

    #[test]
    fn rejects_decreasing_times() {
        let err = rewrite(|s| {
            let mut lines: Vec<String> = s.lines().map(str::to_string).collect();
            let mut cells: Vec<String> = lines[2].split(',').map(str::to_string).collect();
            cells[1] = "-5".into();
            lines[2] = cells.join(",");
            lines.join("\n")
        })
        .unwrap_err();
        assert!(matches!(err, CohortError::Ingestion { row: Some(2), .. }), "{err}");
    }
}
