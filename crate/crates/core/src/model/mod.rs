//! The CDE autoencoder: a learnable linear map into the initial hidden state,
//! a vector-field MLP driving the hidden state along the control path, and a
//! decoder that reconstructs each observation from the hidden state at its
//! own time.

mod batch;
pub mod checkpoint;
mod loss;
mod optim;
mod params;

pub use batch::{prepare, Batch, Prepared};
pub use loss::{acuity_correlation, acuity_correlation_value, loss_total, LossBreakdown, LossTerms};
pub use optim::Adam;
pub use params::{glorot, Dense, ParamSet};

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cde::{
    integrate_batch, BatchPlan, CdeError, HiddenTrajectory, SolverConfig, SolverStats, VectorField,
};
use crate::cohort::Trajectory;
use crate::diffcore::{Array, DiffError, Tape, Var};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("model configuration: {0}")]
    Config(String),
    #[error("solver failed on patients {patient_ids:?}: {source}")]
    Solver {
        patient_ids: Vec<u64>,
        #[source]
        source: CdeError,
    },
    #[error(transparent)]
    Cde(#[from] CdeError),
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden_size: usize,
    pub feature_dim: usize,
    /// Hidden widths of the vector-field MLP.
    pub field_widths: Vec<usize>,
    pub decoder_width: usize,
    pub layer_norm_eps: f64,
    /// Glorot gain of the field's output layer; small values start training
    /// from gentle dynamics.
    pub field_output_gain: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            hidden_size: 64,
            feature_dim: crate::cohort::N_FEATURES,
            field_widths: vec![128, 128],
            decoder_width: 64,
            layer_norm_eps: 1e-5,
            field_output_gain: 0.1,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.hidden_size == 0 || self.feature_dim == 0 || self.decoder_width == 0 {
            return Err(ModelError::Config("sizes must be positive".into()));
        }
        if self.field_widths.is_empty() || self.field_widths.iter().any(|&w| w < 2) {
            return Err(ModelError::Config(
                "field needs at least one hidden layer, each of width >= 2".into(),
            ));
        }
        if !(self.layer_norm_eps > 0.0) {
            return Err(ModelError::Config("layer_norm_eps must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Layout {
    init_map: Dense,
    field: Vec<Dense>,
    norms: Vec<(usize, usize)>,
    dec_hidden: Dense,
    dec_out: Dense,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CdeAutoencoder {
    config: ModelConfig,
    params: ParamSet,
    layout: Layout,
}

impl CdeAutoencoder {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamSet::new();
        let (h, d) = (config.hidden_size, config.feature_dim);
        let init_map = Dense::new(&mut p, &mut rng, "init_map", d, h, 1.0);
        let mut field = Vec::new();
        let mut norms = Vec::new();
        let mut width = h;
        for (i, &w) in config.field_widths.iter().enumerate() {
            field.push(Dense::new(&mut p, &mut rng, &format!("field.{i}"), width, w, 1.0));
            let g = p.push(format!("field.{i}.ln_gain"), Array::vector(vec![1.0; w]));
            let b = p.push(format!("field.{i}.ln_bias"), Array::vector(vec![0.0; w]));
            norms.push((g, b));
            width = w;
        }
        field.push(Dense::new(
            &mut p,
            &mut rng,
            "field.out",
            width,
            h * d,
            config.field_output_gain,
        ));
        let dec_hidden = Dense::new(&mut p, &mut rng, "decoder.hidden", h, config.decoder_width, 1.0);
        let dec_out = Dense::new(&mut p, &mut rng, "decoder.out", config.decoder_width, d, 1.0);
        Ok(CdeAutoencoder {
            config,
            params: p,
            layout: Layout {
                init_map,
                field,
                norms,
                dec_hidden,
                dec_out,
            },
        })
    }

    /// Rebuilds a model around existing parameters, checking their layout.
    pub fn from_params(config: ModelConfig, params: ParamSet) -> Result<Self, ModelError> {
        let mut m = CdeAutoencoder::new(config, 0)?;
        if !m.params.same_layout(&params) {
            return Err(ModelError::Checkpoint(
                "parameter names or shapes do not match the model configuration".into(),
            ));
        }
        m.params = params;
        Ok(m)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn hidden_size(&self) -> usize {
        self.config.hidden_size
    }

    pub fn bind<'a>(&'a self, tape: &mut Tape) -> BoundModel<'a> {
        BoundModel {
            model: self,
            vars: self.params.bind(tape),
        }
    }

    /// Wraps vars already on a tape, in `params()` order.
    pub fn bind_vars(&self, vars: Vec<Var>) -> BoundModel<'_> {
        assert_eq!(vars.len(), self.params.values().len(), "one var per parameter");
        BoundModel { model: self, vars }
    }

    pub fn bind_frozen<'a>(&'a self, tape: &mut Tape) -> BoundModel<'a> {
        BoundModel {
            model: self,
            vars: self.params.bind_frozen(tape),
        }
    }

    /// Hidden states at every observation time of one trajectory.
    pub fn encode(&self, traj: &Trajectory, solver: &SolverConfig) -> Result<HiddenTrajectory, ModelError> {
        let prepared = prepare(traj, solver.dt)?;
        let batch = Batch::new(&[&prepared])?;
        let mut tape = Tape::new();
        let bound = self.bind_frozen(&mut tape);
        let fwd = bound.forward(&mut tape, &batch, solver)?;
        Ok(HiddenTrajectory {
            times: traj.times.clone(),
            states: tape.value(fwd.latents).clone(),
        })
    }

    /// Per-trajectory latents (`K_i × h`), encoded in batches of `batch_size`.
    pub fn encode_all(
        &self,
        prepared: &[&Prepared],
        solver: &SolverConfig,
        batch_size: usize,
    ) -> Result<Vec<Array>, ModelError> {
        let mut out = Vec::with_capacity(prepared.len());
        for chunk in prepared.chunks(batch_size.max(1)) {
            let batch = Batch::new(chunk)?;
            let mut tape = Tape::new();
            let bound = self.bind_frozen(&mut tape);
            let fwd = bound.forward(&mut tape, &batch, solver)?;
            let lat = tape.value(fwd.latents);
            let h = lat.cols();
            let mut row = 0;
            for &k in &batch.lengths {
                let data = lat.data()[row * h..(row + k) * h].to_vec();
                out.push(Array::matrix(k, h, data)?);
                row += k;
            }
        }
        Ok(out)
    }

    pub fn decode(&self, hidden: &[f64]) -> Result<Vec<f64>, ModelError> {
        let mut tape = Tape::new();
        let bound = self.bind_frozen(&mut tape);
        let h = tape.constant(Array::matrix(1, hidden.len(), hidden.to_vec())?);
        let out = bound.decode(&mut tape, h)?;
        Ok(tape.value(out).data().to_vec())
    }
}

/// Model parameters recorded on a tape.
pub struct BoundModel<'a> {
    model: &'a CdeAutoencoder,
    pub vars: Vec<Var>,
}

/// Output of a batched forward pass. Latent and reconstruction rows are
/// ordered trajectory by trajectory, observation by observation.
pub struct Forward {
    pub latents: Var,
    pub recon: Var,
    /// Solver state after each step, `B×h`.
    pub states: Vec<Var>,
    pub stats: SolverStats,
}

impl BoundModel<'_> {
    pub fn model(&self) -> &CdeAutoencoder {
        self.model
    }

    pub fn init_state(&self, tape: &mut Tape, x0: Var) -> Result<Var, DiffError> {
        self.model.layout.init_map.apply(tape, &self.vars, x0)
    }

    pub fn decode(&self, tape: &mut Tape, h: Var) -> Result<Var, DiffError> {
        let l = &self.model.layout;
        let z = l.dec_hidden.apply(tape, &self.vars, h)?;
        let z = tape.relu(z);
        l.dec_out.apply(tape, &self.vars, z)
    }

    pub fn forward(&self, tape: &mut Tape, batch: &Batch, solver: &SolverConfig) -> Result<Forward, ModelError> {
        let x0 = tape.constant(batch.x0.clone());
        let h0 = self.init_state(tape, x0)?;
        let sol = integrate_batch(tape, self, h0, &batch.plan, solver).map_err(|e| {
            let ids = match &e {
                CdeError::Divergence { .. } | CdeError::Stiffness { .. } => batch.ids.clone(),
                _ => Vec::new(),
            };
            ModelError::Solver {
                patient_ids: ids,
                source: e,
            }
        })?;
        let latents = sol.outputs(tape, &batch.plan)?;
        let recon = self.decode(tape, latents)?;
        Ok(Forward {
            latents,
            recon,
            states: sol.states,
            stats: sol.stats,
        })
    }

    /// Jacobians of `h ↦ f(h)·slope` at every row of `h` (`B×hidden`), by
    /// forward-mode tangents along the unit directions. Returns
    /// `(B·hidden)×hidden`; block `b` is the transpose of row `b`'s Jacobian.
    pub fn field_jacobians_t(&self, tape: &mut Tape, h: Var, slopes: &Array) -> Result<Var, DiffError> {
        let hv = tape.value(h).clone();
        let (b, n) = (hv.rows(), hv.cols());
        let d = self.model.config.feature_dim;
        if slopes.rows() != b || slopes.cols() != d {
            return Err(DiffError::Shape("field_jacobians_t: slope shape".into()));
        }
        // replicate each state n times with identity tangents
        let picks: Vec<(Var, usize)> = (0..b).flat_map(|r| std::iter::repeat_n((h, r), n)).collect();
        let x = tape.gather_rows(&picks)?;
        let mut eye = Vec::with_capacity(b * n * n);
        for _ in 0..b {
            eye.extend_from_slice(Array::eye(n).data());
        }
        let t = tape.constant(Array::matrix(b * n, n, eye)?);

        let l = &self.model.layout;
        let eps = self.model.config.layer_norm_eps;
        let (mut a, mut ta) = (x, t);
        for (layer, &(g, bias)) in l.field.iter().zip(&l.norms) {
            let z = layer.apply(tape, &self.vars, a)?;
            let tz = layer.apply_linear(tape, &self.vars, ta)?;
            let y = tape.layer_norm(z, self.vars[g], self.vars[bias], eps)?;
            let ty = tape.layer_norm_tangent(z, tz, self.vars[g], eps)?;
            ta = tape.relu_tangent(y, ty)?;
            a = tape.relu(y);
        }
        let out = l.field.last().expect("output layer");
        let z = out.apply(tape, &self.vars, a)?;
        let tz = out.apply_linear(tape, &self.vars, ta)?;
        let y = tape.tanh(z);
        let y2 = tape.square(y)?;
        let one_minus = tape.scale(y2, -1.0);
        let one_minus = tape.add_const(one_minus, 1.0);
        let ty = tape.mul(one_minus, tz)?;
        let mut u = Vec::with_capacity(b * n * d);
        for r in 0..b {
            for _ in 0..n {
                u.extend_from_slice(slopes.row(r));
            }
        }
        let u = Arc::new(Array::matrix(b * n, d, u)?);
        tape.contract(ty, u, n)
    }
}

impl VectorField for BoundModel<'_> {
    fn hidden_size(&self) -> usize {
        self.model.config.hidden_size
    }

    fn control_dim(&self) -> usize {
        self.model.config.feature_dim
    }

    fn eval(&self, tape: &mut Tape, h: Var) -> Result<Var, DiffError> {
        let l = &self.model.layout;
        let eps = self.model.config.layer_norm_eps;
        let mut a = h;
        for (layer, &(g, b)) in l.field.iter().zip(&l.norms) {
            let z = layer.apply(tape, &self.vars, a)?;
            let z = tape.layer_norm(z, self.vars[g], self.vars[b], eps)?;
            a = tape.relu(z);
        }
        let z = l.field.last().expect("output layer").apply(tape, &self.vars, a)?;
        Ok(tape.tanh(z))
    }
}

/// Control slopes of every row at one step (zero on padded rows).
pub fn step_slopes(plan: &BatchPlan, step: usize) -> Array {
    let u = &plan.increments[step];
    let dt = &plan.step_sizes[step];
    let d = u.cols();
    let mut out = u.data().to_vec();
    for (r, chunk) in out.chunks_mut(d).enumerate() {
        let s = if dt[r] > 0.0 { 1.0 / dt[r] } else { 0.0 };
        chunk.iter_mut().for_each(|x| *x *= s);
    }
    Array::matrix(u.rows(), d, out).expect("shape")
}
