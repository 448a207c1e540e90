//! Tape-based reverse-mode differentiation over [`Matrix`] operations.
//!
//! The tape is define-by-run: each operation records its inputs and value,
//! and [`Tape::backward`] walks the records in reverse, accumulating
//! vector-Jacobian products. Matrix inversion participates like any other op,
//! which is what makes the rational orthogonalization map differentiable
//! end to end and lets plain Euclidean optimizers drive manifold-valued
//! weights.
//!
//! One tape serves one forward/backward pass; build a fresh tape per step.

use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    /// Trainable input; receives a gradient (zero if unreached).
    Leaf,
    /// Non-trainable input; no gradient is tracked.
    Constant,
    MatMul(NodeId, NodeId),
    /// Elementwise add; the right side may be a `1 x cols` row vector, which
    /// broadcasts over rows (bias addition).
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Scale(NodeId, f64),
    Transpose(NodeId),
    Inverse(NodeId),
    RowSoftmax(NodeId),
    Tanh(NodeId),
    Sum(NodeId),
    MeanRows(NodeId),
    ConcatCols(Vec<NodeId>),
    SliceCols {
        input: NodeId,
        start: usize,
        len: usize,
    },
    FrobeniusSq(NodeId),
    CrossEntropy {
        logits: NodeId,
        labels: Vec<usize>,
    },
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Matrix,
}

/// Recorded computation graph. Node ids are topological by construction:
/// inputs always precede their consumers.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    leaves: Vec<NodeId>,
}

/// Per-leaf gradients returned by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    /// Gradient of the loss with respect to a leaf. Panics when `id` is not
    /// a leaf of the tape that produced these gradients.
    pub fn wrt(&self, id: NodeId) -> &Matrix {
        self.grads[id.0]
            .as_ref()
            .expect("gradient queried for a non-leaf node")
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Matrix {
        &self.nodes[id.0].value
    }

    fn push(&mut self, op: Op, value: Matrix) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { op, value });
        id
    }

    /// Registers a trainable input.
    pub fn leaf(&mut self, value: Matrix) -> NodeId {
        let id = self.push(Op::Leaf, value);
        self.leaves.push(id);
        id
    }

    /// Registers a non-trainable input (data, identity matrices, ...).
    pub fn constant(&mut self, value: Matrix) -> NodeId {
        self.push(Op::Constant, value)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.push(Op::MatMul(a, b), value))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        let value = if bv.rows() == 1 && av.rows() > 1 {
            av.add_rowvec(bv)?
        } else {
            av.add(bv)?
        };
        Ok(self.push(Op::Add(a, b), value))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).sub(self.value(b))?;
        Ok(self.push(Op::Sub(a, b), value))
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> NodeId {
        let value = self.value(a).scale(factor);
        self.push(Op::Scale(a, factor), value)
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).transpose();
        self.push(Op::Transpose(a), value)
    }

    pub fn inverse(&mut self, a: NodeId) -> Result<NodeId> {
        let value = self.value(a).inverse()?;
        Ok(self.push(Op::Inverse(a), value))
    }

    pub fn row_softmax(&mut self, a: NodeId) -> NodeId {
        let value = row_softmax(self.value(a));
        self.push(Op::RowSoftmax(a), value)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a);
        let data = v.data().iter().map(|x| x.tanh()).collect();
        let value = Matrix::from_raw(v.rows(), v.cols(), data);
        self.push(Op::Tanh(a), value)
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let total: f64 = self.value(a).data().iter().sum();
        self.push(Op::Sum(a), Matrix::from_raw(1, 1, vec![total]))
    }

    /// Column-wise mean over rows: `rows x cols -> 1 x cols`.
    pub fn mean_rows(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a);
        let rows = v.rows() as f64;
        let mut out = vec![0.0; v.cols()];
        for r in 0..v.rows() {
            for (o, x) in out.iter_mut().zip(v.row(r)) {
                *o += x;
            }
        }
        for o in &mut out {
            *o /= rows;
        }
        let value = Matrix::from_raw(1, v.cols(), out);
        self.push(Op::MeanRows(a), value)
    }

    /// Concatenation along the last dimension (columns).
    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        assert!(!parts.is_empty(), "concat_cols needs at least one part");
        let rows = self.value(parts[0]).rows();
        let mut cols = 0;
        for &p in parts {
            let v = self.value(p);
            if v.rows() != rows {
                return Err(Error::ShapeMismatch {
                    op: "concat_cols",
                    left_rows: rows,
                    left_cols: cols,
                    right_rows: v.rows(),
                    right_cols: v.cols(),
                });
            }
            cols += v.cols();
        }
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let value = Matrix::from_raw(rows, cols, data);
        Ok(self.push(Op::ConcatCols(parts.to_vec()), value))
    }

    /// Column band `start .. start + len`.
    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let v = self.value(a);
        if start + len > v.cols() || len == 0 {
            return Err(Error::InvalidArgument(format!(
                "slice {start}..{} out of {} columns",
                start + len,
                v.cols()
            )));
        }
        let mut data = Vec::with_capacity(v.rows() * len);
        for r in 0..v.rows() {
            data.extend_from_slice(&v.row(r)[start..start + len]);
        }
        let value = Matrix::from_raw(v.rows(), len, data);
        Ok(self.push(Op::SliceCols { input: a, start, len }, value))
    }

    /// Sum of squared entries, as a `1 x 1` node.
    pub fn frobenius_sq(&mut self, a: NodeId) -> NodeId {
        let total: f64 = self.value(a).data().iter().map(|x| x * x).sum();
        self.push(Op::FrobeniusSq(a), Matrix::from_raw(1, 1, vec![total]))
    }

    /// Mean over the batch of `-log softmax(logits)[label]`, max-subtracted.
    pub fn cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let v = self.value(logits);
        if labels.len() != v.rows() {
            return Err(Error::InvalidArgument(format!(
                "{} labels for {} logit rows",
                labels.len(),
                v.rows()
            )));
        }
        for (sample, &label) in labels.iter().enumerate() {
            if label >= v.cols() {
                return Err(Error::LabelOutOfRange {
                    sample,
                    label,
                    classes: v.cols(),
                });
            }
        }
        let loss = cross_entropy_value(v, labels);
        Ok(self.push(
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
            },
            Matrix::from_raw(1, 1, vec![loss]),
        ))
    }

    /// Reverse sweep from a scalar loss node. Returns the gradient for every
    /// leaf; leaves the loss does not reach get zero matrices.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let loss_value = self.value(loss);
        if loss_value.shape() != (1, 1) {
            return Err(Error::LossNotScalar {
                rows: loss_value.rows(),
                cols: loss_value.cols(),
            });
        }
        let mut adj: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        adj[loss.0] = Some(Matrix::identity(1));

        for idx in (0..=loss.0).rev() {
            let Some(g) = adj[idx].take() else { continue };
            match &self.nodes[idx].op {
                Op::Leaf => {
                    adj[idx] = Some(g);
                    continue;
                }
                Op::Constant => continue,
                Op::MatMul(a, b) => {
                    let da = g.matmul(&self.value(*b).transpose())?;
                    let db = self.value(*a).transpose().matmul(&g)?;
                    self.accumulate(&mut adj, *a, da)?;
                    self.accumulate(&mut adj, *b, db)?;
                }
                Op::Add(a, b) => {
                    let bv = self.value(*b);
                    self.accumulate(&mut adj, *a, g.clone())?;
                    if bv.rows() == 1 && g.rows() > 1 {
                        // Broadcast bias: column sums.
                        let mut sums = vec![0.0; g.cols()];
                        for r in 0..g.rows() {
                            for (s, x) in sums.iter_mut().zip(g.row(r)) {
                                *s += x;
                            }
                        }
                        self.accumulate(&mut adj, *b, Matrix::from_raw(1, g.cols(), sums))?;
                    } else {
                        self.accumulate(&mut adj, *b, g)?;
                    }
                }
                Op::Sub(a, b) => {
                    self.accumulate(&mut adj, *a, g.clone())?;
                    self.accumulate(&mut adj, *b, g.scale(-1.0))?;
                }
                Op::Scale(a, factor) => {
                    self.accumulate(&mut adj, *a, g.scale(*factor))?;
                }
                Op::Transpose(a) => {
                    self.accumulate(&mut adj, *a, g.transpose())?;
                }
                Op::Inverse(a) => {
                    let da = vjp_inverse(&self.nodes[idx].value, &g)?;
                    self.accumulate(&mut adj, *a, da)?;
                }
                Op::RowSoftmax(a) => {
                    let y = &self.nodes[idx].value;
                    let mut dx = vec![0.0; y.rows() * y.cols()];
                    for r in 0..y.rows() {
                        let yr = y.row(r);
                        let gr = g.row(r);
                        let dot: f64 = yr.iter().zip(gr).map(|(yv, gv)| yv * gv).sum();
                        for c in 0..y.cols() {
                            dx[r * y.cols() + c] = yr[c] * (gr[c] - dot);
                        }
                    }
                    self.accumulate(&mut adj, *a, Matrix::from_raw(y.rows(), y.cols(), dx))?;
                }
                Op::Tanh(a) => {
                    let y = &self.nodes[idx].value;
                    let data = y
                        .data()
                        .iter()
                        .zip(g.data())
                        .map(|(yv, gv)| gv * (1.0 - yv * yv))
                        .collect();
                    self.accumulate(&mut adj, *a, Matrix::from_raw(y.rows(), y.cols(), data))?;
                }
                Op::Sum(a) => {
                    let v = self.value(*a);
                    let s = g.get(0, 0);
                    let data = vec![s; v.rows() * v.cols()];
                    self.accumulate(&mut adj, *a, Matrix::from_raw(v.rows(), v.cols(), data))?;
                }
                Op::MeanRows(a) => {
                    let v = self.value(*a);
                    let rows = v.rows() as f64;
                    let mut data = Vec::with_capacity(v.rows() * v.cols());
                    for _ in 0..v.rows() {
                        data.extend(g.row(0).iter().map(|x| x / rows));
                    }
                    self.accumulate(&mut adj, *a, Matrix::from_raw(v.rows(), v.cols(), data))?;
                }
                Op::ConcatCols(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let cols = self.value(p).cols();
                        let mut data = Vec::with_capacity(g.rows() * cols);
                        for r in 0..g.rows() {
                            data.extend_from_slice(&g.row(r)[start..start + cols]);
                        }
                        self.accumulate(&mut adj, p, Matrix::from_raw(g.rows(), cols, data))?;
                        start += cols;
                    }
                }
                Op::SliceCols { input, start, len } => {
                    let v = self.value(*input);
                    let mut data = vec![0.0; v.rows() * v.cols()];
                    for r in 0..v.rows() {
                        data[r * v.cols() + start..r * v.cols() + start + len]
                            .copy_from_slice(g.row(r));
                    }
                    self.accumulate(&mut adj, *input, Matrix::from_raw(v.rows(), v.cols(), data))?;
                }
                Op::FrobeniusSq(a) => {
                    let da = self.value(*a).scale(2.0 * g.get(0, 0));
                    self.accumulate(&mut adj, *a, da)?;
                }
                Op::CrossEntropy { logits, labels } => {
                    let v = self.value(*logits);
                    let soft = row_softmax(v);
                    let factor = g.get(0, 0) / labels.len() as f64;
                    let mut data = soft.data().to_vec();
                    for (i, &label) in labels.iter().enumerate() {
                        data[i * v.cols() + label] -= 1.0;
                    }
                    for x in &mut data {
                        *x *= factor;
                    }
                    self.accumulate(&mut adj, *logits, Matrix::from_raw(v.rows(), v.cols(), data))?;
                }
            }
        }

        for &leaf in &self.leaves {
            if adj[leaf.0].is_none() {
                let v = self.value(leaf);
                adj[leaf.0] = Some(Matrix::zeros(v.rows(), v.cols()));
            }
        }
        // Drop intermediates so only leaf gradients remain queryable.
        for (idx, node) in self.nodes.iter().enumerate() {
            if !matches!(node.op, Op::Leaf) {
                adj[idx] = None;
            }
        }
        Ok(Gradients { grads: adj })
    }

    fn accumulate(&self, adj: &mut [Option<Matrix>], id: NodeId, grad: Matrix) -> Result<()> {
        if matches!(self.nodes[id.0].op, Op::Constant) {
            return Ok(());
        }
        adj[id.0] = Some(match adj[id.0].take() {
            Some(existing) => existing.add(&grad)?,
            None => grad,
        });
        Ok(())
    }
}

/// Row-wise softmax with the row maximum subtracted before exponentiation,
/// so large scores cannot overflow and flatten gradients.
pub fn row_softmax(m: &Matrix) -> Matrix {
    let mut data = Vec::with_capacity(m.rows() * m.cols());
    for r in 0..m.rows() {
        let row = m.row(r);
        let mx = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let exps: Vec<f64> = row.iter().map(|&v| (v - mx).exp()).collect();
        let total: f64 = exps.iter().sum();
        data.extend(exps.iter().map(|e| e / total));
    }
    Matrix::from_raw(m.rows(), m.cols(), data)
}

pub(crate) fn cross_entropy_value(logits: &Matrix, labels: &[usize]) -> f64 {
    let mut total = 0.0;
    for (i, &label) in labels.iter().enumerate() {
        let row = logits.row(i);
        let mx = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let sum_exp: f64 = row.iter().map(|&v| (v - mx).exp()).sum();
        total += sum_exp.ln() - (row[label] - mx);
    }
    total / labels.len() as f64
}

/// Chain-rule piece for matrix inversion: given `b = a^-1` and an upstream
/// gradient, the gradient with respect to `a` is `-b^T * upstream * b^T`.
pub fn vjp_inverse(b: &Matrix, upstream: &Matrix) -> Result<Matrix> {
    if !b.is_square() || b.shape() != upstream.shape() {
        return Err(Error::ShapeMismatch {
            op: "vjp_inverse",
            left_rows: b.rows(),
            left_cols: b.cols(),
            right_rows: upstream.rows(),
            right_cols: upstream.cols(),
        });
    }
    let bt = b.transpose();
    Ok(bt.matmul(upstream)?.matmul(&bt)?.scale(-1.0))
}

/// Central-difference gradient check.
///
/// `build` reconstructs the scalar loss from leaf nodes; it is called once
/// for the analytic gradient and twice per coordinate for the numeric one.
/// Returns the maximum relative error, with the denominator
/// `max(|analytic|, |numeric|, 1e-12)`.
pub fn finite_difference_check<F>(build: F, leaves: &[Matrix], eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[NodeId]) -> Result<NodeId>,
{
    if eps <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "finite-difference step must be positive, got {eps}"
        )));
    }

    let mut tape = Tape::new();
    let ids: Vec<NodeId> = leaves.iter().map(|m| tape.leaf(m.clone())).collect();
    let loss = build(&mut tape, &ids)?;
    let grads = tape.backward(loss)?;

    let eval = |values: &[Matrix]| -> Result<f64> {
        let mut t = Tape::new();
        let ids: Vec<NodeId> = values.iter().map(|m| t.leaf(m.clone())).collect();
        let loss = build(&mut t, &ids)?;
        let v = t.value(loss);
        if v.shape() != (1, 1) {
            return Err(Error::LossNotScalar {
                rows: v.rows(),
                cols: v.cols(),
            });
        }
        Ok(v.get(0, 0))
    };

    let mut work: Vec<Matrix> = leaves.to_vec();
    let mut max_rel = 0.0f64;
    for (li, id) in ids.iter().enumerate() {
        let analytic = grads.wrt(*id).clone();
        for idx in 0..leaves[li].data().len() {
            let original = work[li].data()[idx];
            work[li].data_mut()[idx] = original + eps;
            let f_plus = eval(&work)?;
            work[li].data_mut()[idx] = original - eps;
            let f_minus = eval(&work)?;
            work[li].data_mut()[idx] = original;

            let numeric = (f_plus - f_minus) / (2.0 * eps);
            let a = analytic.data()[idx];
            let denom = a.abs().max(numeric.abs()).max(1e-12);
            max_rel = max_rel.max((a - numeric).abs() / denom);
        }
    }
    Ok(max_rel)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Rng;

    fn random(rng: &mut Rng, rows: usize, cols: usize) -> Matrix {
        Matrix::from_fn(rows, cols, |_, _| rng.uniform(-1.0, 1.0)).unwrap()
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape = Tape::new();
        let w = tape.leaf(Matrix::from_vec(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let loss = tape.sum(w);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.wrt(w).data(), &[1.0; 6]);
    }

    #[test]
    fn matmul_gradient_closed_form() {
        let mut rng = Rng::new(2);
        let a_val = random(&mut rng, 3, 4);
        let b_val = random(&mut rng, 4, 2);
        let mut tape = Tape::new();
        let a = tape.leaf(a_val.clone());
        let b = tape.leaf(b_val.clone());
        let prod = tape.matmul(a, b).unwrap();
        let loss = tape.sum(prod);
        let grads = tape.backward(loss).unwrap();

        let ones = Matrix::from_raw(3, 2, vec![1.0; 6]);
        let expect_a = ones.matmul(&b_val.transpose()).unwrap();
        let expect_b = a_val.transpose().matmul(&ones).unwrap();
        assert_eq!(grads.wrt(a), &expect_a);
        assert_eq!(grads.wrt(b), &expect_b);

        // Same composite against central differences.
        let err = finite_difference_check(
            |t, ids| {
                let p = t.matmul(ids[0], ids[1])?;
                Ok(t.sum(p))
            },
            &[a_val, b_val],
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-9, "matmul fd error {err}");
    }

    #[test]
    fn unreached_leaf_gets_zero_gradient() {
        let mut tape = Tape::new();
        let used = tape.leaf(Matrix::identity(2));
        let unused = tape.leaf(Matrix::identity(3));
        let loss = tape.sum(used);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.wrt(unused), &Matrix::zeros(3, 3));
    }

    #[test]
    fn leaf_used_twice_accumulates() {
        let mut rng = Rng::new(7);
        let w_val = random(&mut rng, 2, 2);
        // loss = sum(W) + sum(W) should double the single-use gradient.
        let mut tape = Tape::new();
        let w = tape.leaf(w_val.clone());
        let s1 = tape.sum(w);
        let s2 = tape.sum(w);
        let loss = tape.add(s1, s2).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.wrt(w).data(), &[2.0; 4]);

        // Duplicated-leaf construction: two separate leaves holding the same
        // value each get the single-use gradient.
        let mut tape2 = Tape::new();
        let w1 = tape2.leaf(w_val.clone());
        let w2 = tape2.leaf(w_val);
        let s1 = tape2.sum(w1);
        let s2 = tape2.sum(w2);
        let loss = tape2.add(s1, s2).unwrap();
        let grads2 = tape2.backward(loss).unwrap();
        assert_eq!(grads2.wrt(w1).data(), &[1.0; 4]);
        assert_eq!(grads2.wrt(w2).data(), &[1.0; 4]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = Tape::new();
        let w = tape.leaf(Matrix::identity(2));
        assert!(matches!(
            tape.backward(w),
            Err(Error::LossNotScalar { rows: 2, cols: 2 })
        ));
    }

    #[test]
    fn vjp_inverse_examples() {
        let e = Matrix::identity(3);
        let mut rng = Rng::new(9);
        let g = random(&mut rng, 3, 3);
        assert_eq!(vjp_inverse(&e, &g).unwrap(), g.scale(-1.0));

        let b = Matrix::from_vec(2, 2, vec![0.5, 0.0, 0.0, 0.25]).unwrap();
        let dg = vjp_inverse(&b, &Matrix::identity(2)).unwrap();
        assert_eq!(dg.data(), &[-0.25, 0.0, 0.0, -0.0625]);
    }

    #[test]
    fn inverse_gradient_matches_finite_differences() {
        let mut rng = Rng::new(11);
        let mut a_val = random(&mut rng, 4, 4);
        for i in 0..4 {
            let v = a_val.get(i, i) + 4.0;
            a_val.data_mut()[i * 4 + i] = v;
        }
        let err = finite_difference_check(
            |t, ids| {
                let inv = t.inverse(ids[0])?;
                Ok(t.sum(inv))
            },
            &[a_val],
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-6, "inverse fd error {err}");
    }

    #[test]
    fn quadratic_gradient_is_tight() {
        let mut rng = Rng::new(13);
        let w = random(&mut rng, 1, 6);
        // f(w) = w w^T; central differences are exact for quadratics up to
        // roundoff.
        let err = finite_difference_check(
            |t, ids| {
                let wt = t.transpose(ids[0]);
                let p = t.matmul(ids[0], wt)?;
                Ok(t.sum(p))
            },
            &[w],
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-9, "quadratic fd error {err}");
    }

    #[test]
    fn constant_function_reports_zero_error() {
        let mut rng = Rng::new(14);
        let w = random(&mut rng, 2, 2);
        let err = finite_difference_check(
            |t, ids| {
                let _ = ids;
                Ok(t.constant(Matrix::from_raw(1, 1, vec![3.5])))
            },
            &[w],
            1e-5,
        )
        .unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn finite_difference_rejects_bad_eps() {
        assert!(finite_difference_check(
            |t, _| Ok(t.constant(Matrix::identity(1))),
            &[],
            0.0
        )
        .is_err());
    }

    #[test]
    fn softmax_tanh_mean_slice_concat_match_finite_differences() {
        let mut rng = Rng::new(15);
        let x = random(&mut rng, 3, 6);
        let err = finite_difference_check(
            |t, ids| {
                let left = t.slice_cols(ids[0], 0, 3)?;
                let right = t.slice_cols(ids[0], 3, 3)?;
                let soft = t.row_softmax(left);
                let th = t.tanh(right);
                let cat = t.concat_cols(&[soft, th])?;
                let pooled = t.mean_rows(cat);
                Ok(t.frobenius_sq(pooled))
            },
            &[x],
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-8, "composite fd error {err}");
    }

    #[test]
    fn bias_broadcast_gradient_is_column_sum() {
        let mut rng = Rng::new(16);
        let x_val = random(&mut rng, 4, 3);
        let b_val = random(&mut rng, 1, 3);
        let mut tape = Tape::new();
        let x = tape.leaf(x_val.clone());
        let b = tape.leaf(b_val.clone());
        let shifted = tape.add(x, b).unwrap();
        let loss = tape.sum(shifted);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.wrt(b).data(), &[4.0, 4.0, 4.0]);

        let err = finite_difference_check(
            |t, ids| {
                let s = t.add(ids[0], ids[1])?;
                Ok(t.sum(s))
            },
            &[x_val, b_val],
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-9, "bias fd error {err}");
    }

    #[test]
    fn cross_entropy_gradient_matches_finite_differences() {
        let mut rng = Rng::new(17);
        let logits = random(&mut rng, 3, 4);
        let labels = vec![0usize, 3, 2];
        let err = finite_difference_check(
            |t, ids| t.cross_entropy(ids[0], &labels),
            &[logits],
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-8, "cross-entropy fd error {err}");
    }

    #[test]
    fn orthogonal_map_gradient_vanishes_on_norm_loss() {
        // loss = ||x * h(skew(A))||^2 is constant in A because the map image
        // preserves length, so the gradient must be ~0.
        let mut rng = Rng::new(18);
        let n = 4;
        let a_val = random(&mut rng, n, n);
        let x_val = random(&mut rng, 1, n);
        let mut tape = Tape::new();
        let a = tape.leaf(a_val);
        let x = tape.constant(x_val);
        let e = tape.constant(Matrix::identity(n));
        let at = tape.transpose(a);
        let skew = tape.sub(a, at).unwrap();
        let shifted = tape.add(e, skew).unwrap();
        let inv = tape.inverse(shifted).unwrap();
        let scaled = tape.scale(inv, 2.0);
        let w = tape.sub(scaled, e).unwrap();
        let y = tape.matmul(x, w).unwrap();
        let loss = tape.frobenius_sq(y);
        let grads = tape.backward(loss).unwrap();
        let max_abs = grads.wrt(a).max_abs();
        assert!(max_abs <= 1e-8, "norm-loss gradient reached {max_abs}");
    }
}
