//! Reverse-mode differentiation over the matrix operations the tagger uses.
//!
//! A [`Tape`] records each operation with its forward value. [`Tape::backward`]
//! walks the record in reverse and returns the gradient of a scalar output with
//! respect to every node. Only the operations below exist; this is not a
//! general-purpose autodiff library.

use indexmap::IndexMap;

use super::array::{gelu, gelu_grad, log_softmax, normalize_rows, softmax_unchecked, Array};
use super::params::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    MulConst(Var, Array),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Array,
        inv_std: Vec<f64>,
    },
    Softmax(Var),
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    WeightedCe {
        logits: Var,
        targets: Vec<usize>,
        weights: Vec<f64>,
    },
    Kl {
        logits: Var,
        target: Array,
        weights: Vec<f64>,
    },
    Sum(Vec<Var>),
}

struct Node {
    value: Array,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: IndexMap<String, Var>,
}

/// Gradients of one scalar with respect to every node on a tape.
pub struct Grads {
    grads: Vec<Option<Array>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Array> {
        self.grads[v.0].as_ref()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Array, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Array {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    /// A leaf whose gradient can be read back, e.g. an input perturbation.
    pub fn input(&mut self, value: Array) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Leaf for a named parameter; repeated calls share one node.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Var {
        if let Some(&v) = self.params.get(name) {
            return v;
        }
        let v = self.push(store.value(name).clone(), Op::Leaf);
        self.params.insert(name.to_string(), v);
        v
    }

    /// Parameters touched by this tape, in first-use order.
    pub fn params(&self) -> impl Iterator<Item = (&str, Var)> {
        self.params.iter().map(|(k, v)| (k.as_str(), *v))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(self.value(b));
        self.push(value, Op::MatMul(a, b))
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul_nt(self.value(b));
        self.push(value, Op::MatMulNt(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut value = self.value(a).clone();
        assert_eq!(value.shape(), self.value(b).shape(), "add shapes");
        value.add_assign(self.value(b));
        self.push(value, Op::Add(a, b))
    }

    /// Adds a bias vector to every row.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Var {
        let mut value = self.value(a).clone();
        let b = self.value(bias).data().to_vec();
        assert_eq!(b.len(), value.cols(), "bias width");
        for i in 0..value.rows() {
            for (v, bv) in value.row_mut(i).iter_mut().zip(&b) {
                *v += bv;
            }
        }
        self.push(value, Op::AddRow(a, bias))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let mut value = self.value(a).clone();
        value.scale(s);
        self.push(value, Op::Scale(a, s))
    }

    /// Elementwise product with a constant of the same shape (dropout masks).
    pub fn mul_const(&mut self, a: Var, c: Array) -> Var {
        let mut value = self.value(a).clone();
        assert!(value.same_shape(&c), "mul_const shapes");
        for (v, m) in value.data_mut().iter_mut().zip(c.data()) {
            *v *= m;
        }
        self.push(value, Op::MulConst(a, c))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let mut value = self.value(a).clone();
        value.data_mut().iter_mut().for_each(|v| *v = gelu(*v));
        self.push(value, Op::Gelu(a))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Var {
        let stats = normalize_rows(self.value(x), eps);
        let g = self.value(gain).data().to_vec();
        let b = self.value(bias).data().to_vec();
        let mut value = stats.xhat.clone();
        for i in 0..value.rows() {
            for ((v, gv), bv) in value.row_mut(i).iter_mut().zip(&g).zip(&b) {
                *v = *v * gv + bv;
            }
        }
        self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat: stats.xhat,
                inv_std: stats.inv_std,
            },
        )
    }

    /// Row-wise softmax. Columns whose `key_mask` entry is false get zero
    /// probability; a row with no admissible column is all zeros.
    pub fn softmax_rows(&mut self, x: Var, key_mask: Option<&[bool]>) -> Var {
        let mut value = self.value(x).clone();
        for i in 0..value.rows() {
            let row = value.row_mut(i);
            match key_mask {
                None => {
                    let s = softmax_unchecked(row);
                    row.copy_from_slice(&s);
                }
                Some(mask) => {
                    let kept: Vec<f64> = row
                        .iter()
                        .zip(mask)
                        .filter(|(_, m)| **m)
                        .map(|(v, _)| *v)
                        .collect();
                    if kept.is_empty() {
                        row.fill(0.0);
                        continue;
                    }
                    let mut s = softmax_unchecked(&kept).into_iter();
                    for (v, m) in row.iter_mut().zip(mask) {
                        *v = if *m { s.next().unwrap_or(0.0) } else { 0.0 };
                    }
                }
            }
        }
        self.push(value, Op::Softmax(x))
    }

    /// Selects rows of `table` by index (embedding lookup).
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Var {
        let t = self.value(table);
        let d = t.cols();
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            data.extend_from_slice(t.row(id));
        }
        let value = Array::matrix(ids.len(), d, data);
        self.push(
            value,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
        )
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let src = self.value(x);
        let mut data = Vec::with_capacity(src.rows() * len);
        for i in 0..src.rows() {
            data.extend_from_slice(&src.row(i)[start..start + len]);
        }
        let value = Array::matrix(src.rows(), len, data);
        self.push(value, Op::SliceCols { x, start })
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows();
        let width: usize = parts.iter().map(|p| self.value(*p).cols()).sum();
        let mut data = Vec::with_capacity(rows * width);
        for i in 0..rows {
            for p in parts {
                data.extend_from_slice(self.value(*p).row(i));
            }
        }
        self.push(Array::matrix(rows, width, data), Op::ConcatCols(parts.to_vec()))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        for p in parts {
            assert_eq!(self.value(*p).cols(), cols, "concat_rows widths");
            data.extend_from_slice(self.value(*p).data());
        }
        let rows = data.len() / cols.max(1);
        self.push(Array::matrix(rows, cols, data), Op::ConcatRows(parts.to_vec()))
    }

    /// `Σ_i weights[i] · (−log softmax(logits_i)[targets[i]])`.
    ///
    /// Weights are constants; a zero weight removes the row from the loss.
    pub fn weighted_ce(&mut self, logits: Var, targets: &[usize], weights: &[f64]) -> Var {
        let z = self.value(logits);
        assert_eq!(z.rows(), targets.len());
        assert_eq!(z.rows(), weights.len());
        let mut loss = 0.0;
        for (i, (&t, &w)) in targets.iter().zip(weights).enumerate() {
            if w != 0.0 {
                loss -= w * log_softmax(z.row(i))[t];
            }
        }
        self.push(
            Array::scalar(loss),
            Op::WeightedCe {
                logits,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
            },
        )
    }

    /// `Σ_i weights[i] · KL(target_i ‖ softmax(logits_i))` with a constant target.
    pub fn kl_rows(&mut self, logits: Var, target: Array, weights: &[f64]) -> Var {
        let z = self.value(logits);
        assert!(z.same_shape(&target), "kl target shape");
        let mut loss = 0.0;
        for (i, &w) in weights.iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            let logq = log_softmax(z.row(i));
            let kl: f64 = target
                .row(i)
                .iter()
                .zip(&logq)
                .filter(|(p, _)| **p > 0.0)
                .map(|(p, lq)| p * (p.ln() - lq))
                .sum();
            loss += w * kl;
        }
        self.push(
            Array::scalar(loss),
            Op::Kl {
                logits,
                target,
                weights: weights.to_vec(),
            },
        )
    }

    pub fn sum(&mut self, parts: &[Var]) -> Var {
        let mut value = self.value(parts[0]).clone();
        for p in &parts[1..] {
            value.add_assign(self.value(*p));
        }
        self.push(value, Op::Sum(parts.to_vec()))
    }

    /// Backpropagates from a scalar node.
    pub fn backward(&self, output: Var) -> Grads {
        assert_eq!(self.value(output).len(), 1, "backward needs a scalar output");
        let mut grads: Vec<Option<Array>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Array::scalar(1.0));

        for idx in (0..=output.0).rev() {
            let Some(dy) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let da = dy.matmul_nt(self.value(*b));
                    let db = self.value(*a).matmul_tn(&dy);
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::MatMulNt(a, b) => {
                    // y = a bᵀ: da = dy b, db = dyᵀ a
                    let da = dy.matmul(self.value(*b));
                    let db = dy.matmul_tn(self.value(*a));
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, dy.clone());
                    accumulate(&mut grads, *b, dy.clone());
                }
                Op::AddRow(a, bias) => {
                    let mut db = vec![0.0; dy.cols()];
                    for i in 0..dy.rows() {
                        for (s, v) in db.iter_mut().zip(dy.row(i)) {
                            *s += v;
                        }
                    }
                    let shape = self.value(*bias).shape().to_vec();
                    accumulate(&mut grads, *a, dy.clone());
                    accumulate(&mut grads, *bias, Array::new(shape, db).expect("bias shape"));
                }
                Op::Scale(a, s) => {
                    let mut d = dy.clone();
                    d.scale(*s);
                    accumulate(&mut grads, *a, d);
                }
                Op::MulConst(a, c) => {
                    let mut d = dy.clone();
                    for (v, m) in d.data_mut().iter_mut().zip(c.data()) {
                        *v *= m;
                    }
                    accumulate(&mut grads, *a, d);
                }
                Op::Gelu(a) => {
                    let mut d = dy.clone();
                    for (v, x) in d.data_mut().iter_mut().zip(self.value(*a).data()) {
                        *v *= gelu_grad(*x);
                    }
                    accumulate(&mut grads, *a, d);
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    inv_std,
                } => {
                    let g = self.value(*gain).data();
                    let n = dy.cols() as f64;
                    let mut dx = dy.clone();
                    let mut dg = vec![0.0; g.len()];
                    let mut db = vec![0.0; g.len()];
                    for i in 0..dy.rows() {
                        let dyr = dy.row(i);
                        let xh = xhat.row(i);
                        let dxhat: Vec<f64> = dyr.iter().zip(g).map(|(d, gv)| d * gv).collect();
                        let sum_d: f64 = dxhat.iter().sum();
                        let sum_dx: f64 = dxhat.iter().zip(xh).map(|(a, b)| a * b).sum();
                        for (j, out) in dx.row_mut(i).iter_mut().enumerate() {
                            *out = inv_std[i] / n * (n * dxhat[j] - sum_d - xh[j] * sum_dx);
                            dg[j] += dyr[j] * xh[j];
                            db[j] += dyr[j];
                        }
                    }
                    let gshape = self.value(*gain).shape().to_vec();
                    let bshape = self.value(*bias).shape().to_vec();
                    accumulate(&mut grads, *x, dx);
                    accumulate(&mut grads, *gain, Array::new(gshape, dg).expect("gain shape"));
                    accumulate(&mut grads, *bias, Array::new(bshape, db).expect("bias shape"));
                }
                Op::Softmax(x) => {
                    let y = &node.value;
                    let mut dx = dy.clone();
                    for i in 0..y.rows() {
                        let yr = y.row(i);
                        let dot: f64 = yr.iter().zip(dy.row(i)).map(|(a, b)| a * b).sum();
                        for (j, v) in dx.row_mut(i).iter_mut().enumerate() {
                            *v = yr[j] * (dy.row(i)[j] - dot);
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::Gather { table, ids } => {
                    let mut dt = Array::zeros(self.value(*table).shape());
                    for (i, &id) in ids.iter().enumerate() {
                        for (t, v) in dt.row_mut(id).iter_mut().zip(dy.row(i)) {
                            *t += v;
                        }
                    }
                    accumulate(&mut grads, *table, dt);
                }
                Op::SliceCols { x, start } => {
                    let mut dx = Array::zeros(self.value(*x).shape());
                    let len = dy.cols();
                    for i in 0..dy.rows() {
                        dx.row_mut(i)[*start..*start + len].copy_from_slice(dy.row(i));
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let w = self.value(*p).cols();
                        let mut d = Array::zeros(self.value(*p).shape());
                        for i in 0..dy.rows() {
                            d.row_mut(i).copy_from_slice(&dy.row(i)[offset..offset + w]);
                        }
                        offset += w;
                        accumulate(&mut grads, *p, d);
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let n = self.value(*p).len();
                        let shape = self.value(*p).shape().to_vec();
                        let d = Array::new(shape, dy.data()[offset..offset + n].to_vec())
                            .expect("concat part shape");
                        offset += n;
                        accumulate(&mut grads, *p, d);
                    }
                }
                Op::WeightedCe {
                    logits,
                    targets,
                    weights,
                } => {
                    let upstream = dy.data()[0];
                    let z = self.value(*logits);
                    let mut dz = Array::zeros(z.shape());
                    for (i, (&t, &w)) in targets.iter().zip(weights).enumerate() {
                        if w == 0.0 {
                            continue;
                        }
                        let p = softmax_unchecked(z.row(i));
                        for (j, v) in dz.row_mut(i).iter_mut().enumerate() {
                            let onehot = if j == t { 1.0 } else { 0.0 };
                            *v = upstream * w * (p[j] - onehot);
                        }
                    }
                    accumulate(&mut grads, *logits, dz);
                }
                Op::Kl {
                    logits,
                    target,
                    weights,
                } => {
                    let upstream = dy.data()[0];
                    let z = self.value(*logits);
                    let mut dz = Array::zeros(z.shape());
                    for (i, &w) in weights.iter().enumerate() {
                        if w == 0.0 {
                            continue;
                        }
                        let q = softmax_unchecked(z.row(i));
                        let p = target.row(i);
                        let mass: f64 = p.iter().sum();
                        for (j, v) in dz.row_mut(i).iter_mut().enumerate() {
                            *v = upstream * w * (mass * q[j] - p[j]);
                        }
                    }
                    accumulate(&mut grads, *logits, dz);
                }
                Op::Sum(parts) => {
                    for p in parts {
                        accumulate(&mut grads, *p, dy.clone());
                    }
                }
            }
            grads[idx] = Some(dy);
        }
        Grads { grads }
    }

    /// Adds this tape's parameter gradients, times `scale`, into `store`.
    pub fn accumulate_param_grads(&self, grads: &Grads, store: &mut ParamStore, scale: f64) {
        for (name, var) in self.params() {
            if let Some(g) = grads.get(var) {
                store.accumulate_grad(name, g, scale);
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Array>], v: Var, d: Array) {
    match &mut grads[v.0] {
        Some(g) => g.add_assign(&d),
        slot @ None => *slot = Some(d),
    }
}
