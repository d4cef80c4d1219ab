use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::diffcore::{Array, DiffError, Tape, Var};
use crate::model::{Dense, ParamSet};

/// ReLU multilayer perceptron; `dims = [input, hidden.., output]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    dims: Vec<usize>,
    params: ParamSet,
    layers: Vec<Dense>,
}

impl Mlp {
    pub fn new(dims: &[usize], seed: u64) -> Self {
        Self::with_output_gain(dims, seed, 1.0)
    }

    /// Like `new`, with the last layer's initial weights scaled by `gain`.
    pub fn with_output_gain(dims: &[usize], seed: u64, gain: f64) -> Self {
        assert!(dims.len() >= 2, "an MLP needs input and output widths");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let last = dims.len() - 2;
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let g = if i == last { gain } else { 1.0 };
                Dense::new(&mut params, &mut rng, &format!("layer{i}"), w[0], w[1], g)
            })
            .collect();
        Mlp {
            dims: dims.to_vec(),
            params,
            layers,
        }
    }

    /// Rebuilds the layout of `dims` around existing parameters.
    pub fn from_params(dims: &[usize], params: ParamSet) -> Result<Self, DiffError> {
        let fresh = Mlp::new(dims, 0);
        if !fresh.params.same_layout(&params) {
            return Err(DiffError::Shape(format!("parameters do not fit an MLP of widths {dims:?}")));
        }
        Ok(Mlp { params, ..fresh })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn forward(&self, tape: &mut Tape, vars: &[Var], x: Var) -> Result<Var, DiffError> {
        let mut a = x;
        for (i, layer) in self.layers.iter().enumerate() {
            a = layer.apply(tape, vars, a)?;
            if i + 1 < self.layers.len() {
                a = tape.relu(a);
            }
        }
        Ok(a)
    }

    /// Forward pass without gradients.
    pub fn eval(&self, x: &Array) -> Result<Array, DiffError> {
        let mut tape = Tape::new();
        let vars = self.params.bind_frozen(&mut tape);
        let xv = tape.constant(x.clone());
        let out = self.forward(&mut tape, &vars, xv)?;
        Ok(tape.value(out).clone())
    }
}

/// Per-column affine standardization fitted on training states.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub inv_std: Vec<f64>,
}

impl Standardizer {
    pub fn fit(x: &Array) -> Self {
        let (n, d) = (x.rows(), x.cols());
        let mut mean = vec![0.0; d];
        for r in 0..n {
            for (m, v) in mean.iter_mut().zip(x.row(r)) {
                *m += v / n as f64;
            }
        }
        let mut var = vec![0.0; d];
        for r in 0..n {
            for ((s, v), m) in var.iter_mut().zip(x.row(r)).zip(&mean) {
                *s += (v - m) * (v - m) / n as f64;
            }
        }
        let inv_std = var.iter().map(|v| if v.sqrt() > 1e-8 { 1.0 / v.sqrt() } else { 1.0 }).collect();
        Standardizer { mean, inv_std }
    }

    pub fn identity(d: usize) -> Self {
        Standardizer {
            mean: vec![0.0; d],
            inv_std: vec![1.0; d],
        }
    }

    pub fn apply(&self, x: &Array) -> Array {
        let d = x.cols();
        let mut out = x.data().to_vec();
        for row in out.chunks_mut(d) {
            for ((v, m), s) in row.iter_mut().zip(&self.mean).zip(&self.inv_std) {
                *v = (*v - m) * s;
            }
        }
        Array::matrix(x.rows(), d, out).expect("shape")
    }

    pub(crate) fn to_arrays(&self) -> [Array; 2] {
        [Array::vector(self.mean.clone()), Array::vector(self.inv_std.clone())]
    }

    pub(crate) fn from_arrays(mean: &Array, inv_std: &Array) -> Self {
        Standardizer {
            mean: mean.data().to_vec(),
            inv_std: inv_std.data().to_vec(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn standardizer_centers_and_scales() {
        let x = Array::from_rows(&[vec![1.0, 5.0], vec![3.0, 5.0]]).unwrap();
        let s = Standardizer::fit(&x);
        let y = s.apply(&x);
        assert_eq!(y.data(), &[-1.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn mlp_round_trips_through_params() {
        let m = Mlp::new(&[3, 4, 2], 1);
        let back = Mlp::from_params(&[3, 4, 2], m.params().clone()).unwrap();
        let x = Array::from_rows(&[vec![0.1, -0.2, 0.3]]).unwrap();
        assert_eq!(m.eval(&x).unwrap(), back.eval(&x).unwrap());
        assert!(Mlp::from_params(&[3, 5, 2], m.params().clone()).is_err());
    }
}
