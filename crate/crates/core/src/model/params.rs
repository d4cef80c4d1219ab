use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::diffcore::{Array, DiffError, Tape, Var};

/// Named parameter arrays in a fixed order. The order is the layout of the
/// flat vector used by clipping, the optimizer and checkpoints.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet {
    names: Vec<String>,
    values: Vec<Array>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet::default()
    }

    pub fn push(&mut self, name: impl Into<String>, value: Array) -> usize {
        self.names.push(name.into());
        self.values.push(value);
        self.values.len() - 1
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Array] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Array] {
        &mut self.values
    }

    pub fn get(&self, i: usize) -> &Array {
        &self.values[i]
    }

    pub fn by_name(&self, name: &str) -> Option<&Array> {
        self.names.iter().position(|n| n == name).map(|i| &self.values[i])
    }

    /// Total number of scalars.
    pub fn n_scalars(&self) -> usize {
        self.values.iter().map(Array::len).sum()
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_scalars());
        for v in &self.values {
            out.extend_from_slice(v.data());
        }
        out
    }

    pub fn assign_flat(&mut self, flat: &[f64]) -> Result<(), DiffError> {
        if flat.len() != self.n_scalars() {
            return Err(DiffError::Shape(format!(
                "flat vector has {} entries, parameters have {}",
                flat.len(),
                self.n_scalars()
            )));
        }
        let mut at = 0;
        for v in &mut self.values {
            let n = v.len();
            v.data_mut().copy_from_slice(&flat[at..at + n]);
            at += n;
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(Array::all_finite)
    }

    /// Same names and shapes, in the same order.
    pub fn same_layout(&self, other: &ParamSet) -> bool {
        self.names == other.names
            && self
                .values
                .iter()
                .zip(&other.values)
                .all(|(a, b)| a.shape() == b.shape())
    }

    /// Records every parameter as a leaf.
    pub fn bind(&self, tape: &mut Tape) -> Vec<Var> {
        self.values.iter().map(|v| tape.leaf(v.clone())).collect()
    }

    /// Records every parameter as a constant (no gradients).
    pub fn bind_frozen(&self, tape: &mut Tape) -> Vec<Var> {
        self.values.iter().map(|v| tape.constant(v.clone())).collect()
    }

    /// Gradients after `backward`, zeros for parameters the loss did not reach.
    pub fn grads(&self, tape: &Tape, vars: &[Var]) -> Vec<Array> {
        vars.iter()
            .zip(&self.values)
            .map(|(&v, a)| tape.grad(v).cloned().unwrap_or_else(|| Array::zeros(a.shape())))
            .collect()
    }
}

/// Uniform Glorot initialization, scaled by `gain`.
pub fn glorot(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize, gain: f64) -> Array {
    let a = gain * (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out).map(|_| rng.random_range(-a..=a)).collect();
    Array::matrix(fan_in, fan_out, data).expect("shape")
}

/// Affine layer `x · W + b` with `W` stored as `d_in×d_out`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dense {
    pub w: usize,
    pub b: usize,
}

impl Dense {
    pub fn new(
        params: &mut ParamSet,
        rng: &mut ChaCha8Rng,
        name: &str,
        d_in: usize,
        d_out: usize,
        gain: f64,
    ) -> Self {
        let w = params.push(format!("{name}.weight"), glorot(rng, d_in, d_out, gain));
        let b = params.push(format!("{name}.bias"), Array::vector(vec![0.0; d_out]));
        Dense { w, b }
    }

    pub fn apply(&self, tape: &mut Tape, vars: &[Var], x: Var) -> Result<Var, DiffError> {
        let z = tape.matmul(x, vars[self.w])?;
        tape.add_row(z, vars[self.b])
    }

    /// Linear part only (the tangent of an affine map).
    pub fn apply_linear(&self, tape: &mut Tape, vars: &[Var], t: Var) -> Result<Var, DiffError> {
        tape.matmul(t, vars[self.w])
    }

    pub fn d_out(&self, params: &ParamSet) -> usize {
        params.get(self.w).cols()
    }
}
