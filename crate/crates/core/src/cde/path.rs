use crate::diffcore::Array;

use super::CdeError;

/// Piecewise-linear interpolant through irregularly timed observations.
///
/// On `[t_k, t_{k+1}]` the derivative is the constant slope
/// `(o_{k+1} - o_k) / (t_{k+1} - t_k)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlPath {
    knot_times: Vec<f64>,
    knot_values: Array,
}

impl ControlPath {
    pub fn new(times: Vec<f64>, observations: Array) -> Result<Self, CdeError> {
        if times.len() < 2 {
            return Err(CdeError::Ingestion(format!(
                "control path needs at least 2 observations, got {}",
                times.len()
            )));
        }
        if observations.rows() != times.len() {
            return Err(CdeError::Ingestion(format!(
                "{} times but {} observation rows",
                times.len(),
                observations.rows()
            )));
        }
        if let Some(k) = times.windows(2).position(|w| !(w[1] > w[0])) {
            return Err(CdeError::Ingestion(format!(
                "times must be strictly increasing (t[{}]={} then t[{}]={})",
                k,
                times[k],
                k + 1,
                times[k + 1]
            )));
        }
        if !observations.all_finite() || times.iter().any(|t| !t.is_finite()) {
            return Err(CdeError::Ingestion("non-finite observation".into()));
        }
        let (k, d) = (observations.rows(), observations.cols());
        let knot_values = observations.reshape(vec![k, d]).expect("same size");
        Ok(ControlPath {
            knot_times: times,
            knot_values,
        })
    }

    pub fn knot_times(&self) -> &[f64] {
        &self.knot_times
    }

    pub fn knot_values(&self) -> &Array {
        &self.knot_values
    }

    pub fn dim(&self) -> usize {
        self.knot_values.cols()
    }

    pub fn len(&self) -> usize {
        self.knot_times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.knot_times.is_empty()
    }

    pub fn start(&self) -> f64 {
        self.knot_times[0]
    }

    pub fn end(&self) -> f64 {
        *self.knot_times.last().expect("non-empty")
    }

    /// Slope on the `k`-th interval `[t_k, t_{k+1}]`.
    pub fn interval_slope(&self, k: usize) -> Vec<f64> {
        let dt = self.knot_times[k + 1] - self.knot_times[k];
        let a = self.knot_values.row(k);
        let b = self.knot_values.row(k + 1);
        a.iter().zip(b).map(|(x, y)| (y - x) / dt).collect()
    }

    /// Index of the interval used for the derivative at `t`: the right interval at
    /// a knot, the left one at the final knot.
    pub fn interval_at(&self, t: f64) -> Result<usize, CdeError> {
        if t < self.start() || t > self.end() || t.is_nan() {
            return Err(CdeError::OutOfDomain {
                t,
                start: self.start(),
                end: self.end(),
            });
        }
        let last = self.knot_times.len() - 2;
        // first knot strictly greater than t, minus one
        let k = self.knot_times.partition_point(|&x| x <= t);
        Ok(k.saturating_sub(1).min(last))
    }

    pub fn derivative(&self, t: f64) -> Result<Vec<f64>, CdeError> {
        Ok(self.interval_slope(self.interval_at(t)?))
    }

    pub fn value(&self, t: f64) -> Result<Vec<f64>, CdeError> {
        let k = self.interval_at(t)?;
        let t0 = self.knot_times[k];
        let s = self.interval_slope(k);
        Ok(self
            .knot_values
            .row(k)
            .iter()
            .zip(s)
            .map(|(v, sl)| v + sl * (t - t0))
            .collect())
    }
}
