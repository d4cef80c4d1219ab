use std::sync::Arc;

use super::array::gemm;
use super::{Array, DiffError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A primitive defined outside this module (e.g. an eigenvalue reduction).
///
/// `backward` returns one optional gradient per input, each shaped like that input.
pub trait CustomOp: Send + Sync {
    fn name(&self) -> &str;
    fn backward(&self, inputs: &[&Array], output: &Array, grad_output: &Array) -> Vec<Option<Array>>;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Elementwise {
    Add,
    Sub,
    Mul,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Bcast {
    Same,
    LeftScalar,
    RightScalar,
}

enum Op {
    Leaf,
    Constant,
    MatMul(usize, usize),
    Binary(Elementwise, Bcast, usize, usize),
    Scale(usize, f64),
    AddConst(usize),
    Relu(usize),
    Tanh(usize),
    Abs(usize),
    Huber(usize, f64),
    AddRow(usize, usize),
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Sum(usize),
    Mean(usize),
    Contract {
        f: usize,
        u: Arc<Array>,
        hidden: usize,
    },
    ScaleRows(usize, Arc<Vec<f64>>),
    GatherRows(Vec<(usize, usize)>),
    ColumnPearson {
        x: usize,
        yc: Arc<Vec<f64>>,
        sy: f64,
        sx: Vec<f64>,
    },
    Pearson(usize, usize),
    Transpose(usize),
    Reshape(usize),
    Pick(usize, Vec<usize>),
    SoftmaxNll {
        logits: usize,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    ReluTangent(usize, usize),
    LayerNormTangent {
        a: usize,
        ta: usize,
        gain: usize,
        eps: f64,
    },
    Custom(Vec<usize>, Box<dyn CustomOp>),
}

struct Node {
    value: Array,
    op: Op,
    needs_grad: bool,
}

/// Records primitive operations in topological order and replays them in
/// reverse to accumulate gradients.
///
/// A tape supports exactly one `backward` call; call [`Tape::reset`] to record a
/// new computation.
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Array>>,
    backward_done: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
            backward_done: false,
        }
    }

    pub fn reset(&mut self) {
        self.nodes.clear();
        self.grads.clear();
        self.backward_done = false;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Array {
        &self.nodes[v.0].value
    }

    /// Gradient of the last `backward` root with respect to `v`, if `v` was reached.
    pub fn grad(&self, v: Var) -> Option<&Array> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    fn push(&mut self, value: Array, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Trainable input; receives a gradient on `backward`.
    pub fn leaf(&mut self, value: Array) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Array) -> Var {
        self.push(value, Op::Constant, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k) = (av.rows(), av.cols());
        let (k2, n) = (bv.rows(), bv.cols());
        if k != k2 {
            return Err(DiffError::Shape(format!(
                "matmul inner dimensions {}x{} · {}x{}",
                m, k, k2, n
            )));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, 1.0, av.data(), false, bv.data(), false, 0.0, &mut out);
        let value = Array::new(vec![m, n], out)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(value, Op::MatMul(a.0, b.0), ng))
    }

    pub fn binary(&mut self, kind: Elementwise, a: Var, b: Var) -> Result<Var, DiffError> {
        let (av, bv) = (self.value(a), self.value(b));
        let bc = if av.shape() == bv.shape() || (av.len() == bv.len() && av.len() > 1 && av.rows() == bv.rows()) {
            Bcast::Same
        } else if bv.is_scalar() {
            Bcast::RightScalar
        } else if av.is_scalar() {
            Bcast::LeftScalar
        } else {
            return Err(DiffError::Shape(format!(
                "elementwise {:?} on {:?} and {:?}",
                kind,
                av.shape(),
                bv.shape()
            )));
        };
        let f = |x: f64, y: f64| match kind {
            Elementwise::Add => x + y,
            Elementwise::Sub => x - y,
            Elementwise::Mul => x * y,
        };
        let value = match bc {
            Bcast::Same => {
                let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
                Array::new(av.shape().to_vec(), data)?
            }
            Bcast::RightScalar => {
                let y = bv.item();
                av.map(|x| f(x, y))
            }
            Bcast::LeftScalar => {
                let x = av.item();
                bv.map(|y| f(x, y))
            }
        };
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(value, Op::Binary(kind, bc, a.0, b.0), ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.binary(Elementwise::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.binary(Elementwise::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.binary(Elementwise::Mul, a, b)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|x| x * c);
        let ng = self.ng(a);
        self.push(value, Op::Scale(a.0, c), ng)
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|x| x + c);
        let ng = self.ng(a);
        self.push(value, Op::AddConst(a.0), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| if x > 0.0 { x } else { 0.0 });
        let ng = self.ng(a);
        self.push(value, Op::Relu(a.0), ng)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::tanh);
        let ng = self.ng(a);
        self.push(value, Op::Tanh(a.0), ng)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::abs);
        let ng = self.ng(a);
        self.push(value, Op::Abs(a.0), ng)
    }

    /// Elementwise Huber function with threshold `delta`.
    pub fn huber(&mut self, a: Var, delta: f64) -> Var {
        let value = self.value(a).map(|x| {
            if x.abs() <= delta {
                0.5 * x * x
            } else {
                delta * (x.abs() - 0.5 * delta)
            }
        });
        let ng = self.ng(a);
        self.push(value, Op::Huber(a.0, delta), ng)
    }

    pub fn square(&mut self, a: Var) -> Result<Var, DiffError> {
        self.mul(a, a)
    }

    /// Adds a length-`n` row vector to every row of an `r×n` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var, DiffError> {
        let (av, rv) = (self.value(a), self.value(row));
        let n = av.cols();
        if rv.len() != n {
            return Err(DiffError::Shape(format!(
                "add_row: {} columns vs row of {}",
                n,
                rv.len()
            )));
        }
        let mut data = av.data().to_vec();
        for chunk in data.chunks_mut(n) {
            for (x, b) in chunk.iter_mut().zip(rv.data()) {
                *x += b;
            }
        }
        let value = Array::new(av.shape().to_vec(), data)?;
        let ng = self.ng(a) || self.ng(row);
        Ok(self.push(value, Op::AddRow(a.0, row.0), ng))
    }

    /// Row-wise layer normalization with 1/n variance: `(x - mean)/sqrt(var + eps) * gain + bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var, DiffError> {
        let xv = self.value(x);
        let n = xv.cols();
        if n < 2 {
            return Err(DiffError::Degenerate("layer_norm needs at least 2 features".into()));
        }
        if eps < 0.0 {
            return Err(DiffError::Degenerate("layer_norm eps must be nonnegative".into()));
        }
        let (gv, bv) = (self.value(gain), self.value(bias));
        if gv.len() != n || bv.len() != n {
            return Err(DiffError::Shape("layer_norm gain/bias length".into()));
        }
        let rows = xv.rows();
        let mut xhat = vec![0.0; rows * n];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; rows * n];
        for r in 0..rows {
            let row = xv.row(r);
            let mu = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..n {
                let h = (row[j] - mu) * rs;
                xhat[r * n + j] = h;
                out[r * n + j] = h * gv.data()[j] + bv.data()[j];
            }
        }
        let value = Array::new(xv.shape().to_vec(), out)?;
        let ng = self.ng(x) || self.ng(gain) || self.ng(bias);
        Ok(self.push(
            value,
            Op::LayerNorm {
                x: x.0,
                gain: gain.0,
                bias: bias.0,
                xhat,
                rstd,
            },
            ng,
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Array::scalar(self.value(a).sum());
        let ng = self.ng(a);
        self.push(value, Op::Sum(a.0), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let value = Array::scalar(av.sum() / av.len().max(1) as f64);
        let ng = self.ng(a);
        self.push(value, Op::Mean(a.0), ng)
    }

    /// Contracts each row of `f` (`B×(hidden·d)`, a row-major `hidden×d` matrix per
    /// row) with the matching row of the constant `u` (`B×d`), giving `B×hidden`.
    pub fn contract(&mut self, f: Var, u: Arc<Array>, hidden: usize) -> Result<Var, DiffError> {
        let fv = self.value(f);
        let (b, d) = (u.rows(), u.cols());
        if fv.rows() != b || fv.cols() != hidden * d {
            return Err(DiffError::Shape(format!(
                "contract: field {}x{} vs control {}x{} (hidden {})",
                fv.rows(),
                fv.cols(),
                b,
                d,
                hidden
            )));
        }
        let mut out = vec![0.0; b * hidden];
        for r in 0..b {
            let urow = u.row(r);
            let frow = fv.row(r);
            for i in 0..hidden {
                let seg = &frow[i * d..(i + 1) * d];
                out[r * hidden + i] = seg.iter().zip(urow).map(|(x, y)| x * y).sum();
            }
        }
        let value = Array::new(vec![b, hidden], out)?;
        let ng = self.ng(f);
        Ok(self.push(value, Op::Contract { f: f.0, u, hidden }, ng))
    }

    /// Multiplies row `r` of `a` by the constant `s[r]`.
    pub fn scale_rows(&mut self, a: Var, s: Arc<Vec<f64>>) -> Result<Var, DiffError> {
        let av = self.value(a);
        if av.rows() != s.len() {
            return Err(DiffError::Shape("scale_rows: row count".into()));
        }
        let n = av.cols();
        let mut data = av.data().to_vec();
        for (chunk, &c) in data.chunks_mut(n).zip(s.iter()) {
            chunk.iter_mut().for_each(|x| *x *= c);
        }
        let value = Array::new(vec![av.rows(), n], data)?;
        let ng = self.ng(a);
        Ok(self.push(value, Op::ScaleRows(a.0, s), ng))
    }

    /// Stacks selected rows of (possibly different) recorded matrices.
    pub fn gather_rows(&mut self, picks: &[(Var, usize)]) -> Result<Var, DiffError> {
        let Some(&(first, _)) = picks.first() else {
            return Err(DiffError::Shape("gather_rows: empty selection".into()));
        };
        let n = self.value(first).cols();
        let mut data = Vec::with_capacity(picks.len() * n);
        let mut ng = false;
        for &(v, r) in picks {
            let vv = self.value(v);
            if vv.cols() != n || r >= vv.rows() {
                return Err(DiffError::Shape(format!(
                    "gather_rows: row {} of {}x{} (expected {} columns)",
                    r,
                    vv.rows(),
                    vv.cols(),
                    n
                )));
            }
            data.extend_from_slice(vv.row(r));
            ng |= self.ng(v);
        }
        let value = Array::new(vec![picks.len(), n], data)?;
        let list = picks.iter().map(|&(v, r)| (v.0, r)).collect();
        Ok(self.push(value, Op::GatherRows(list), ng))
    }

    /// Pearson correlation of every column of `x` (`N×h`) with the constant `y`.
    ///
    /// Zero-variance columns (or a zero-variance `y`) yield 0 with zero gradient.
    pub fn column_pearson(&mut self, x: Var, y: &[f64]) -> Result<Var, DiffError> {
        let xv = self.value(x);
        let (nr, h) = (xv.rows(), xv.cols());
        if y.len() != nr || nr < 2 {
            return Err(DiffError::Shape(format!(
                "column_pearson: {} rows vs {} targets",
                nr,
                y.len()
            )));
        }
        let ym = y.iter().sum::<f64>() / nr as f64;
        let yc: Vec<f64> = y.iter().map(|v| v - ym).collect();
        let sy = yc.iter().map(|v| v * v).sum::<f64>().sqrt();
        let mut means = vec![0.0; h];
        for r in 0..nr {
            for (m, v) in means.iter_mut().zip(xv.row(r)) {
                *m += v;
            }
        }
        means.iter_mut().for_each(|m| *m /= nr as f64);
        let mut sxx = vec![0.0; h];
        let mut sxy = vec![0.0; h];
        for r in 0..nr {
            for (j, v) in xv.row(r).iter().enumerate() {
                let c = v - means[j];
                sxx[j] += c * c;
                sxy[j] += c * yc[r];
            }
        }
        let sx: Vec<f64> = sxx.iter().map(|v| v.sqrt()).collect();
        let out = (0..h)
            .map(|j| {
                if sx[j] <= ZERO_SPREAD || sy <= ZERO_SPREAD {
                    0.0
                } else {
                    (sxy[j] / (sx[j] * sy)).clamp(-1.0, 1.0)
                }
            })
            .collect();
        let value = Array::vector(out);
        let ng = self.ng(x);
        Ok(self.push(
            value,
            Op::ColumnPearson {
                x: x.0,
                yc: Arc::new(yc),
                sy,
                sx,
            },
            ng,
        ))
    }

    /// Pearson correlation between two equal-length arrays; errors on zero variance.
    pub fn pearson(&mut self, x: Var, y: Var) -> Result<Var, DiffError> {
        let (xv, yv) = (self.value(x), self.value(y));
        if xv.len() != yv.len() || xv.len() < 2 {
            return Err(DiffError::Shape("pearson: need two equal series of length >= 2".into()));
        }
        let (sxy, sx, sy) = centered_moments(xv.data(), yv.data());
        if sx <= ZERO_SPREAD || sy <= ZERO_SPREAD {
            return Err(DiffError::UndefinedCorrelation);
        }
        let r = (sxy / (sx * sy)).clamp(-1.0, 1.0);
        let ng = self.ng(x) || self.ng(y);
        Ok(self.push(Array::scalar(r), Op::Pearson(x.0, y.0), ng))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        let ng = self.ng(a);
        self.push(value, Op::Transpose(a.0), ng)
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var, DiffError> {
        let value = self.value(a).clone().reshape(shape)?;
        let ng = self.ng(a);
        Ok(self.push(value, Op::Reshape(a.0), ng))
    }

    /// Selects `a[r, idx[r]]` for every row, giving a vector.
    pub fn pick(&mut self, a: Var, idx: Vec<usize>) -> Result<Var, DiffError> {
        let av = self.value(a);
        if idx.len() != av.rows() || idx.iter().any(|&i| i >= av.cols()) {
            return Err(DiffError::Shape("pick: index out of range".into()));
        }
        let data = idx.iter().enumerate().map(|(r, &c)| av.get2(r, c)).collect();
        let value = Array::vector(data);
        let ng = self.ng(a);
        Ok(self.push(value, Op::Pick(a.0, idx), ng))
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of `logits`.
    pub fn softmax_nll(&mut self, logits: Var, targets: Vec<usize>) -> Result<Var, DiffError> {
        let lv = self.value(logits);
        let (b, c) = (lv.rows(), lv.cols());
        if targets.len() != b || targets.iter().any(|&t| t >= c) {
            return Err(DiffError::Shape("softmax_nll: targets".into()));
        }
        let probs = softmax_rows(lv);
        let loss = targets
            .iter()
            .enumerate()
            .map(|(r, &t)| -probs[r * c + t].max(f64::MIN_POSITIVE).ln())
            .sum::<f64>()
            / b as f64;
        let ng = self.ng(logits);
        Ok(self.push(
            Array::scalar(loss),
            Op::SoftmaxNll {
                logits: logits.0,
                targets,
                probs,
            },
            ng,
        ))
    }

    /// Forward-mode tangent of ReLU: `t` masked by `a > 0`.
    pub fn relu_tangent(&mut self, a: Var, t: Var) -> Result<Var, DiffError> {
        let (av, tv) = (self.value(a), self.value(t));
        if av.shape() != tv.shape() {
            return Err(DiffError::Shape("relu_tangent shapes".into()));
        }
        let data = av
            .data()
            .iter()
            .zip(tv.data())
            .map(|(&x, &d)| if x > 0.0 { d } else { 0.0 })
            .collect();
        let value = Array::new(av.shape().to_vec(), data)?;
        let ng = self.ng(t);
        Ok(self.push(value, Op::ReluTangent(a.0, t.0), ng))
    }

    /// Forward-mode tangent of row-wise layer normalization at `a` along `ta`.
    pub fn layer_norm_tangent(&mut self, a: Var, ta: Var, gain: Var, eps: f64) -> Result<Var, DiffError> {
        let (av, tv, gv) = (self.value(a), self.value(ta), self.value(gain));
        let n = av.cols();
        if av.shape() != tv.shape() || gv.len() != n || n < 2 {
            return Err(DiffError::Shape("layer_norm_tangent shapes".into()));
        }
        let rows = av.rows();
        let mut out = vec![0.0; rows * n];
        for r in 0..rows {
            let ln = LnRow::new(av.row(r), tv.row(r), eps);
            for j in 0..n {
                out[r * n + j] = gv.data()[j] * ln.r * ln.q[j];
            }
        }
        let value = Array::new(av.shape().to_vec(), out)?;
        let ng = self.ng(a) || self.ng(ta) || self.ng(gain);
        Ok(self.push(
            value,
            Op::LayerNormTangent {
                a: a.0,
                ta: ta.0,
                gain: gain.0,
                eps,
            },
            ng,
        ))
    }

    pub fn custom(&mut self, parents: &[Var], value: Array, op: Box<dyn CustomOp>) -> Var {
        let ng = parents.iter().any(|&p| self.ng(p));
        self.push(value, Op::Custom(parents.iter().map(|p| p.0).collect(), op), ng)
    }

    /// Reverse accumulation from a scalar root.
    pub fn backward(&mut self, root: Var) -> Result<(), DiffError> {
        if self.backward_done {
            return Err(DiffError::Contract(
                "backward already ran on this tape; reset before reuse".into(),
            ));
        }
        if !self.value(root).is_scalar() {
            return Err(DiffError::Contract(format!(
                "backward root must be scalar, got shape {:?}",
                self.value(root).shape()
            )));
        }
        self.backward_done = true;
        let mut grads: Vec<Option<Array>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Array::filled(self.value(root).shape(), 1.0));
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn propagate(&self, i: usize, g: &Array, grads: &mut [Option<Array>]) {
        let node = &self.nodes[i];
        let needs = |p: usize| self.nodes[p].needs_grad;
        let val = |p: usize| &self.nodes[p].value;
        match &node.op {
            Op::Leaf | Op::Constant => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                if needs(*a) {
                    let mut ga = vec![0.0; m * k];
                    gemm(m, n, k, 1.0, g.data(), false, bv.data(), true, 0.0, &mut ga);
                    accumulate(grads, *a, av.shape(), ga);
                }
                if needs(*b) {
                    let mut gb = vec![0.0; k * n];
                    gemm(k, m, n, 1.0, av.data(), true, g.data(), false, 0.0, &mut gb);
                    accumulate(grads, *b, bv.shape(), gb);
                }
            }
            Op::Binary(kind, bc, a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let (ga, gb): (Vec<f64>, Vec<f64>) = match kind {
                    Elementwise::Add => (g.data().to_vec(), g.data().to_vec()),
                    Elementwise::Sub => (g.data().to_vec(), g.data().iter().map(|x| -x).collect()),
                    Elementwise::Mul => match bc {
                        Bcast::Same => (
                            g.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect(),
                            g.data().iter().zip(av.data()).map(|(x, y)| x * y).collect(),
                        ),
                        Bcast::RightScalar => {
                            let y = bv.item();
                            (
                                g.data().iter().map(|x| x * y).collect(),
                                g.data().iter().zip(av.data()).map(|(x, y)| x * y).collect(),
                            )
                        }
                        Bcast::LeftScalar => {
                            let x0 = av.item();
                            (
                                g.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect(),
                                g.data().iter().map(|x| x * x0).collect(),
                            )
                        }
                    },
                };
                let reduce = |v: Vec<f64>, scalar: bool| if scalar { vec![v.iter().sum()] } else { v };
                if needs(*a) {
                    accumulate(grads, *a, av.shape(), reduce(ga, *bc == Bcast::LeftScalar));
                }
                if needs(*b) {
                    accumulate(grads, *b, bv.shape(), reduce(gb, *bc == Bcast::RightScalar));
                }
            }
            Op::Scale(a, c) => {
                accumulate(grads, *a, val(*a).shape(), g.data().iter().map(|x| x * c).collect());
            }
            Op::AddConst(a) => accumulate(grads, *a, val(*a).shape(), g.data().to_vec()),
            Op::Relu(a) => {
                let d = val(*a)
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&x, &gg)| if x > 0.0 { gg } else { 0.0 })
                    .collect();
                accumulate(grads, *a, val(*a).shape(), d);
            }
            Op::Tanh(a) => {
                let d = node
                    .value
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&y, &gg)| gg * (1.0 - y * y))
                    .collect();
                accumulate(grads, *a, val(*a).shape(), d);
            }
            Op::Abs(a) => {
                let d = val(*a)
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&x, &gg)| {
                        if x > 0.0 {
                            gg
                        } else if x < 0.0 {
                            -gg
                        } else {
                            0.0
                        }
                    })
                    .collect();
                accumulate(grads, *a, val(*a).shape(), d);
            }
            Op::Huber(a, delta) => {
                let d = val(*a)
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&x, &gg)| gg * x.clamp(-delta, *delta))
                    .collect();
                accumulate(grads, *a, val(*a).shape(), d);
            }
            Op::AddRow(a, row) => {
                if needs(*a) {
                    accumulate(grads, *a, val(*a).shape(), g.data().to_vec());
                }
                if needs(*row) {
                    let n = val(*row).len();
                    let mut gr = vec![0.0; n];
                    for chunk in g.data().chunks(n) {
                        for (s, x) in gr.iter_mut().zip(chunk) {
                            *s += x;
                        }
                    }
                    accumulate(grads, *row, val(*row).shape(), gr);
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let n = val(*x).cols();
                let gv = val(*gain).data();
                if needs(*gain) {
                    let mut gg = vec![0.0; n];
                    for (r_g, r_h) in g.data().chunks(n).zip(xhat.chunks(n)) {
                        for j in 0..n {
                            gg[j] += r_g[j] * r_h[j];
                        }
                    }
                    accumulate(grads, *gain, val(*gain).shape(), gg);
                }
                if needs(*bias) {
                    let mut gb = vec![0.0; n];
                    for r_g in g.data().chunks(n) {
                        for j in 0..n {
                            gb[j] += r_g[j];
                        }
                    }
                    accumulate(grads, *bias, val(*bias).shape(), gb);
                }
                if needs(*x) {
                    let mut gx = vec![0.0; g.len()];
                    for (r, (r_g, r_h)) in g.data().chunks(n).zip(xhat.chunks(n)).enumerate() {
                        let dxh: Vec<f64> = (0..n).map(|j| r_g[j] * gv[j]).collect();
                        let m1 = dxh.iter().sum::<f64>() / n as f64;
                        let m2 = dxh.iter().zip(r_h).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                        for j in 0..n {
                            gx[r * n + j] = rstd[r] * (dxh[j] - m1 - r_h[j] * m2);
                        }
                    }
                    accumulate(grads, *x, val(*x).shape(), gx);
                }
            }
            Op::Sum(a) => {
                let s = g.item();
                accumulate(grads, *a, val(*a).shape(), vec![s; val(*a).len()]);
            }
            Op::Mean(a) => {
                let n = val(*a).len().max(1);
                let s = g.item() / n as f64;
                accumulate(grads, *a, val(*a).shape(), vec![s; val(*a).len()]);
            }
            Op::Contract { f, u, hidden } => {
                let d = u.cols();
                let h = *hidden;
                let mut gf = vec![0.0; val(*f).len()];
                for r in 0..u.rows() {
                    let urow = u.row(r);
                    for i in 0..h {
                        let gi = g.data()[r * h + i];
                        let base = r * h * d + i * d;
                        for j in 0..d {
                            gf[base + j] = gi * urow[j];
                        }
                    }
                }
                accumulate(grads, *f, val(*f).shape(), gf);
            }
            Op::ScaleRows(a, s) => {
                let n = g.cols();
                let mut d = g.data().to_vec();
                for (chunk, &c) in d.chunks_mut(n).zip(s.iter()) {
                    chunk.iter_mut().for_each(|x| *x *= c);
                }
                accumulate(grads, *a, val(*a).shape(), d);
            }
            Op::GatherRows(list) => {
                let n = g.cols();
                for (k, &(p, r)) in list.iter().enumerate() {
                    if !needs(p) {
                        continue;
                    }
                    let pv = val(p);
                    let slot = grads[p].get_or_insert_with(|| Array::zeros(pv.shape()));
                    let dst = &mut slot.data_mut()[r * n..(r + 1) * n];
                    for (x, y) in dst.iter_mut().zip(g.row(k)) {
                        *x += y;
                    }
                }
            }
            Op::ColumnPearson { x, yc, sy, sx } => {
                let xv = val(*x);
                let (nr, h) = (xv.rows(), xv.cols());
                let r = node.value.data();
                let mut means = vec![0.0; h];
                for i in 0..nr {
                    for (m, v) in means.iter_mut().zip(xv.row(i)) {
                        *m += v;
                    }
                }
                means.iter_mut().for_each(|m| *m /= nr as f64);
                let mut gx = vec![0.0; nr * h];
                for j in 0..h {
                    if sx[j] <= ZERO_SPREAD || *sy <= ZERO_SPREAD {
                        continue;
                    }
                    let gj = g.data()[j];
                    let a = gj / (sx[j] * sy);
                    let b = gj * r[j] / (sx[j] * sx[j]);
                    for i in 0..nr {
                        let xc = xv.get2(i, j) - means[j];
                        gx[i * h + j] = a * yc[i] - b * xc;
                    }
                }
                accumulate(grads, *x, xv.shape(), gx);
            }
            Op::Pearson(x, y) => {
                let (xv, yv) = (val(*x), val(*y));
                let r = node.value.item();
                let gs = g.item();
                let n = xv.len() as f64;
                let mx = xv.sum() / n;
                let my = yv.sum() / n;
                let (_, sx, sy) = centered_moments(xv.data(), yv.data());
                let grad_of = |own: &[f64], own_m: f64, own_s: f64, other: &[f64], other_m: f64, other_s: f64| {
                    own.iter()
                        .zip(other)
                        .map(|(a, b)| {
                            gs * ((b - other_m) / (own_s * other_s) - r * (a - own_m) / (own_s * own_s))
                        })
                        .collect::<Vec<f64>>()
                };
                if needs(*x) {
                    accumulate(grads, *x, xv.shape(), grad_of(xv.data(), mx, sx, yv.data(), my, sy));
                }
                if needs(*y) {
                    accumulate(grads, *y, yv.shape(), grad_of(yv.data(), my, sy, xv.data(), mx, sx));
                }
            }
            Op::Transpose(a) => {
                let t = g.transpose();
                accumulate(grads, *a, val(*a).shape(), t.into_data());
            }
            Op::Reshape(a) => accumulate(grads, *a, val(*a).shape(), g.data().to_vec()),
            Op::Pick(a, idx) => {
                let av = val(*a);
                let c = av.cols();
                let mut d = vec![0.0; av.len()];
                for (r, &j) in idx.iter().enumerate() {
                    d[r * c + j] = g.data()[r];
                }
                accumulate(grads, *a, av.shape(), d);
            }
            Op::SoftmaxNll {
                logits,
                targets,
                probs,
            } => {
                let lv = val(*logits);
                let (b, c) = (lv.rows(), lv.cols());
                let s = g.item() / b as f64;
                let mut d: Vec<f64> = probs.iter().map(|p| p * s).collect();
                for (r, &t) in targets.iter().enumerate() {
                    d[r * c + t] -= s;
                }
                accumulate(grads, *logits, lv.shape(), d);
            }
            Op::ReluTangent(a, t) => {
                let d = val(*a)
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&x, &gg)| if x > 0.0 { gg } else { 0.0 })
                    .collect();
                accumulate(grads, *t, val(*t).shape(), d);
            }
            Op::LayerNormTangent { a, ta, gain, eps } => {
                let (av, tv, gv) = (val(*a), val(*ta), val(*gain));
                let n = av.cols();
                let mut g_a = vec![0.0; av.len()];
                let mut g_t = vec![0.0; av.len()];
                let mut g_g = vec![0.0; n];
                for r in 0..av.rows() {
                    let ln = LnRow::new(av.row(r), tv.row(r), *eps);
                    let yb = g.row(r);
                    let nf = n as f64;
                    let mut z = vec![0.0; n];
                    for j in 0..n {
                        g_g[j] += yb[j] * ln.r * ln.q[j];
                        z[j] = yb[j] * gv.data()[j];
                    }
                    let rbar: f64 = z.iter().zip(&ln.q).map(|(a, b)| a * b).sum();
                    let qbar: Vec<f64> = z.iter().map(|v| ln.r * v).collect();
                    let mbar: f64 = -qbar.iter().zip(&ln.xhat).map(|(a, b)| a * b).sum::<f64>();
                    let mut cbar = qbar.clone();
                    let mut xhbar: Vec<f64> = qbar.iter().map(|v| -ln.m * v).collect();
                    for j in 0..n {
                        cbar[j] += mbar * ln.xhat[j] / nf;
                        xhbar[j] += mbar * ln.c[j] / nf;
                    }
                    let cm = cbar.iter().sum::<f64>() / nf;
                    for j in 0..n {
                        g_t[r * n + j] = cbar[j] - cm;
                    }
                    let mut dbar: Vec<f64> = xhbar.iter().map(|v| ln.r * v).collect();
                    let rtot = rbar + xhbar.iter().zip(&ln.d).map(|(a, b)| a * b).sum::<f64>();
                    let r3 = ln.r * ln.r * ln.r;
                    for j in 0..n {
                        dbar[j] -= rtot * r3 * ln.d[j] / nf;
                    }
                    let dm = dbar.iter().sum::<f64>() / nf;
                    for j in 0..n {
                        g_a[r * n + j] = dbar[j] - dm;
                    }
                }
                if needs(*a) {
                    accumulate(grads, *a, av.shape(), g_a);
                }
                if needs(*ta) {
                    accumulate(grads, *ta, tv.shape(), g_t);
                }
                if needs(*gain) {
                    accumulate(grads, *gain, gv.shape(), g_g);
                }
            }
            Op::Custom(parents, op) => {
                let inputs: Vec<&Array> = parents.iter().map(|&p| val(p)).collect();
                let gs = op.backward(&inputs, &node.value, g);
                for (&p, gp) in parents.iter().zip(gs) {
                    if let Some(gp) = gp {
                        if needs(p) {
                            accumulate(grads, p, val(p).shape(), gp.into_data());
                        }
                    }
                }
            }
        }
    }
}

/// Spread (root sum of squares) below which a series is treated as constant.
pub(crate) const ZERO_SPREAD: f64 = 1e-150;

fn accumulate(grads: &mut [Option<Array>], p: usize, shape: &[usize], data: Vec<f64>) {
    match &mut grads[p] {
        Some(existing) => {
            for (a, b) in existing.data_mut().iter_mut().zip(&data) {
                *a += b;
            }
        }
        slot @ None => {
            *slot = Some(Array::new(shape.to_vec(), data).expect("gradient shape"));
        }
    }
}

/// Returns (Σ xc·yc, ‖xc‖, ‖yc‖) for centered copies of the inputs.
pub(crate) fn centered_moments(x: &[f64], y: &[f64]) -> (f64, f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (ca, cb) = (a - mx, b - my);
        sxy += ca * cb;
        sxx += ca * ca;
        syy += cb * cb;
    }
    (sxy, sxx.sqrt(), syy.sqrt())
}

pub(crate) fn softmax_rows(a: &Array) -> Vec<f64> {
    let c = a.cols();
    let mut out = vec![0.0; a.len()];
    for r in 0..a.rows() {
        let row = a.row(r);
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for j in 0..c {
            let e = (row[j] - m).exp();
            out[r * c + j] = e;
            z += e;
        }
        out[r * c..(r + 1) * c].iter_mut().for_each(|p| *p /= z);
    }
    out
}

/// Per-row quantities of the layer-norm tangent map.
struct LnRow {
    d: Vec<f64>,
    xhat: Vec<f64>,
    c: Vec<f64>,
    q: Vec<f64>,
    r: f64,
    m: f64,
}

impl LnRow {
    fn new(a: &[f64], ta: &[f64], eps: f64) -> Self {
        let n = a.len() as f64;
        let mu = a.iter().sum::<f64>() / n;
        let d: Vec<f64> = a.iter().map(|v| v - mu).collect();
        let var = d.iter().map(|v| v * v).sum::<f64>() / n;
        let r = 1.0 / (var + eps).sqrt();
        let xhat: Vec<f64> = d.iter().map(|v| v * r).collect();
        let tm = ta.iter().sum::<f64>() / n;
        let c: Vec<f64> = ta.iter().map(|v| v - tm).collect();
        let m = xhat.iter().zip(&c).map(|(a, b)| a * b).sum::<f64>() / n;
        let q = c.iter().zip(&xhat).map(|(cv, xv)| cv - xv * m).collect();
        LnRow { d, xhat, c, q, r, m }
    }
}
