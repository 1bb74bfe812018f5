//! Matrix-level reverse-mode differentiation on a tape.
//!
//! The tape records one node per dense primitive (matmul, add, scale,
//! row softmax, GELU, reshape, concatenate, mean-square error) and
//! evaluates eagerly as nodes are pushed, so the forward pass happens
//! while building. `backward` replays the record in reverse and
//! accumulates exact gradients for every tracked parameter leaf.
//!
//! Tapes are single-threaded, one per sample; per-sample gradients for a
//! batch come from looping (or fanning out) over samples, each with its
//! own tape, and reducing in canonical sample order.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::ids::MatrixId;
use crate::tensor::Tensor2D;

/// Which trainable object a parameter leaf refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum LeafKey {
    /// A full weight matrix.
    Weight(MatrixId),
    /// The A factor of the adapter attached to a matrix.
    AdapterA(MatrixId),
    /// The B factor of the adapter attached to a matrix.
    AdapterB(MatrixId),
}

#[derive(Debug, Clone)]
enum Op {
    /// Constant input (no gradient).
    Const,
    /// Tracked parameter leaf.
    Param(LeafKey),
    /// a * b, with optional transposition of b.
    MatMul { a: usize, b: usize, transpose_b: bool },
    Add { a: usize, b: usize },
    Scale { a: usize, factor: f64 },
    /// Row-wise softmax with max subtraction.
    SoftmaxRows { a: usize },
    /// Elementwise GELU, tanh formulation.
    Gelu { a: usize },
    Reshape { a: usize },
    /// Vertical concatenation (rows of a above rows of b).
    ConcatRows { a: usize, b: usize },
    /// Mean over entries of (a - target)^2; target is untracked data.
    MeanSquareError { a: usize, target: Tensor2D },
}

struct Node {
    op: Op,
    value: Tensor2D,
}

/// Per-sample gradients keyed by parameter leaf.
#[derive(Debug, Clone, Default)]
pub struct PerSampleGrad {
    pub entries: BTreeMap<LeafKey, Tensor2D>,
}

impl PerSampleGrad {
    /// Flatten the gradients of `order` into one vector, zero-filling
    /// leaves the tape never touched. `shapes` supplies the expected
    /// shape for absent leaves.
    pub fn flatten(&self, order: &[LeafKey], shapes: &dyn Fn(&LeafKey) -> (usize, usize)) -> Vec<f64> {
        let mut out = Vec::new();
        for key in order {
            match self.entries.get(key) {
                Some(t) => out.extend_from_slice(&t.values),
                None => {
                    let (r, c) = shapes(key);
                    out.extend(std::iter::repeat(0.0).take(r * c));
                }
            }
        }
        out
    }
}

/// Recording tape. Values are computed eagerly when operations are
/// pushed; `backward` may then be called once per loss node.
pub struct Tape {
    nodes: Vec<Node>,
}

/// Index of a node on the tape.
pub type NodeId = usize;

impl Tape {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor2D {
        &self.nodes[id].value
    }

    fn push(&mut self, op: Op, value: Tensor2D) -> NodeId {
        self.nodes.push(Node { op, value });
        self.nodes.len() - 1
    }

    /// Untracked input data.
    pub fn constant(&mut self, value: Tensor2D) -> NodeId {
        self.push(Op::Const, value)
    }

    /// Tracked parameter leaf; its gradient appears in the backward result.
    pub fn param(&mut self, key: LeafKey, value: Tensor2D) -> NodeId {
        self.push(Op::Param(key), value)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ar, ac) = self.nodes[a].value.shape();
        let (br, bc) = self.nodes[b].value.shape();
        if ac != br {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: a,
                rhs: b,
                detail: format!("{ar}x{ac} * {br}x{bc}"),
            });
        }
        let value = self.nodes[a].value.matmul(&self.nodes[b].value);
        Ok(self.push(
            Op::MatMul {
                a,
                b,
                transpose_b: false,
            },
            value,
        ))
    }

    /// a * b^T.
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ar, ac) = self.nodes[a].value.shape();
        let (br, bc) = self.nodes[b].value.shape();
        if ac != bc {
            return Err(Error::ShapeMismatch {
                op: "matmul_nt",
                lhs: a,
                rhs: b,
                detail: format!("{ar}x{ac} * ({br}x{bc})^T"),
            });
        }
        let value = self.nodes[a].value.matmul_nt(&self.nodes[b].value);
        Ok(self.push(
            Op::MatMul {
                a,
                b,
                transpose_b: true,
            },
            value,
        ))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.nodes[a].value.shape() != self.nodes[b].value.shape() {
            let (ar, ac) = self.nodes[a].value.shape();
            let (br, bc) = self.nodes[b].value.shape();
            return Err(Error::ShapeMismatch {
                op: "add",
                lhs: a,
                rhs: b,
                detail: format!("{ar}x{ac} + {br}x{bc}"),
            });
        }
        let value = self.nodes[a].value.add(&self.nodes[b].value);
        Ok(self.push(Op::Add { a, b }, value))
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> NodeId {
        let mut value = self.nodes[a].value.clone();
        value.scale_in_place(factor);
        self.push(Op::Scale { a, factor }, value)
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let x = &self.nodes[a].value;
        let mut value = Tensor2D::zeros(x.rows, x.cols);
        for r in 0..x.rows {
            let row = &x.values[r * x.cols..(r + 1) * x.cols];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for (c, &v) in row.iter().enumerate() {
                let e = (v - max).exp();
                value.values[r * x.cols + c] = e;
                sum += e;
            }
            for c in 0..x.cols {
                value.values[r * x.cols + c] /= sum;
            }
        }
        self.push(Op::SoftmaxRows { a }, value)
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let x = &self.nodes[a].value;
        let mut value = x.clone();
        for v in &mut value.values {
            *v = gelu_tanh(*v);
        }
        self.push(Op::Gelu { a }, value)
    }

    pub fn reshape(&mut self, a: NodeId, rows: usize, cols: usize) -> Result<NodeId> {
        let src = &self.nodes[a].value;
        if src.len() != rows * cols {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: a,
                rhs: a,
                detail: format!("{}x{} -> {rows}x{cols}", src.rows, src.cols),
            });
        }
        let value = Tensor2D {
            rows,
            cols,
            values: src.values.clone(),
        };
        Ok(self.push(Op::Reshape { a }, value))
    }

    pub fn concat_rows(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (x, y) = (&self.nodes[a].value, &self.nodes[b].value);
        if x.cols != y.cols {
            return Err(Error::ShapeMismatch {
                op: "concat_rows",
                lhs: a,
                rhs: b,
                detail: format!("{}x{} over {}x{}", x.rows, x.cols, y.rows, y.cols),
            });
        }
        let mut values = x.values.clone();
        values.extend_from_slice(&y.values);
        let value = Tensor2D {
            rows: x.rows + y.rows,
            cols: x.cols,
            values,
        };
        Ok(self.push(Op::ConcatRows { a, b }, value))
    }

    /// Scalar node: mean over entries of (a - target)^2.
    pub fn mean_square_error(&mut self, a: NodeId, target: &Tensor2D) -> Result<NodeId> {
        let x = &self.nodes[a].value;
        if x.shape() != target.shape() {
            return Err(Error::ShapeMismatch {
                op: "mean_square_error",
                lhs: a,
                rhs: a,
                detail: format!(
                    "{}x{} vs target {}x{}",
                    x.rows, x.cols, target.rows, target.cols
                ),
            });
        }
        let n = x.len() as f64;
        let mse = x
            .values
            .iter()
            .zip(&target.values)
            .map(|(p, t)| (p - t) * (p - t))
            .sum::<f64>()
            / n;
        let value = Tensor2D::from_values(1, 1, vec![mse])?;
        Ok(self.push(
            Op::MeanSquareError {
                a,
                target: target.clone(),
            },
            value,
        ))
    }

    /// Reverse pass from a scalar loss node. Gradients flow only into
    /// `Param` leaves; untracked constants are skipped.
    pub fn backward(&self, loss: NodeId) -> Result<PerSampleGrad> {
        if self.nodes.is_empty() {
            return Err(Error::TapeUsage("backward on an empty tape".into()));
        }
        if loss >= self.nodes.len() {
            return Err(Error::TapeUsage(format!(
                "loss node {loss} out of range (tape has {} nodes)",
                self.nodes.len()
            )));
        }
        if self.nodes[loss].value.shape() != (1, 1) {
            return Err(Error::TapeUsage(format!(
                "loss node must be scalar, got {}x{}",
                self.nodes[loss].value.rows, self.nodes[loss].value.cols
            )));
        }

        let mut grads: Vec<Option<Tensor2D>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss] = Some(Tensor2D::from_values(1, 1, vec![1.0])?);

        for id in (0..=loss).rev() {
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            match &self.nodes[id].op {
                Op::Const | Op::Param(_) => {
                    grads[id] = Some(g);
                }
                Op::MatMul { a, b, transpose_b } => {
                    let (da, db) = if *transpose_b {
                        // c = a b^T: da = g b, db = g^T a
                        (
                            g.matmul(&self.nodes[*b].value),
                            g.matmul_tn(&self.nodes[*a].value),
                        )
                    } else {
                        // c = a b: da = g b^T, db = a^T g
                        (
                            g.matmul_nt(&self.nodes[*b].value),
                            self.nodes[*a].value.matmul_tn(&g),
                        )
                    };
                    accumulate(&mut grads[*a], da);
                    accumulate(&mut grads[*b], db);
                }
                Op::Add { a, b } => {
                    accumulate(&mut grads[*a], g.clone());
                    accumulate(&mut grads[*b], g);
                }
                Op::Scale { a, factor } => {
                    let mut da = g;
                    da.scale_in_place(*factor);
                    accumulate(&mut grads[*a], da);
                }
                Op::SoftmaxRows { a } => {
                    let y = &self.nodes[id].value;
                    let mut da = Tensor2D::zeros(y.rows, y.cols);
                    for r in 0..y.rows {
                        let y_row = &y.values[r * y.cols..(r + 1) * y.cols];
                        let g_row = &g.values[r * y.cols..(r + 1) * y.cols];
                        let dot: f64 = y_row.iter().zip(g_row).map(|(y, g)| y * g).sum();
                        for c in 0..y.cols {
                            da.values[r * y.cols + c] = y_row[c] * (g_row[c] - dot);
                        }
                    }
                    accumulate(&mut grads[*a], da);
                }
                Op::Gelu { a } => {
                    let x = &self.nodes[*a].value;
                    let mut da = g;
                    for (d, &xv) in da.values.iter_mut().zip(&x.values) {
                        *d *= gelu_tanh_derivative(xv);
                    }
                    accumulate(&mut grads[*a], da);
                }
                Op::Reshape { a } => {
                    let src = &self.nodes[*a].value;
                    let da = Tensor2D {
                        rows: src.rows,
                        cols: src.cols,
                        values: g.values,
                    };
                    accumulate(&mut grads[*a], da);
                }
                Op::ConcatRows { a, b } => {
                    let (na, nb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                    let split = na.len();
                    let da = Tensor2D {
                        rows: na.rows,
                        cols: na.cols,
                        values: g.values[..split].to_vec(),
                    };
                    let db = Tensor2D {
                        rows: nb.rows,
                        cols: nb.cols,
                        values: g.values[split..].to_vec(),
                    };
                    accumulate(&mut grads[*a], da);
                    accumulate(&mut grads[*b], db);
                }
                Op::MeanSquareError { a, target } => {
                    let x = &self.nodes[*a].value;
                    let scale = 2.0 * g.values[0] / x.len() as f64;
                    let mut da = Tensor2D::zeros(x.rows, x.cols);
                    for ((d, &p), &t) in da.values.iter_mut().zip(&x.values).zip(&target.values) {
                        *d = scale * (p - t);
                    }
                    accumulate(&mut grads[*a], da);
                }
            }
        }

        let mut out = PerSampleGrad::default();
        for (id, node) in self.nodes.iter().enumerate() {
            if let Op::Param(key) = &node.op {
                if let Some(g) = grads[id].take() {
                    match out.entries.get_mut(key) {
                        Some(existing) => existing.add_in_place(&g),
                        None => {
                            out.entries.insert(*key, g);
                        }
                    }
                }
            }
        }
        Ok(out)
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn accumulate(slot: &mut Option<Tensor2D>, delta: Tensor2D) {
    match slot {
        Some(existing) => existing.add_in_place(&delta),
        None => *slot = Some(delta),
    }
}

const GELU_COEFF: f64 = 0.044_715;

fn sqrt_2_over_pi() -> f64 {
    (2.0 / std::f64::consts::PI).sqrt()
}

/// GELU, tanh approximation.
pub fn gelu_tanh(x: f64) -> f64 {
    0.5 * x * (1.0 + (sqrt_2_over_pi() * (x + GELU_COEFF * x * x * x)).tanh())
}

fn gelu_tanh_derivative(x: f64) -> f64 {
    let c = sqrt_2_over_pi();
    let u = c * (x + GELU_COEFF * x * x * x);
    let t = u.tanh();
    let du = c * (1.0 + 3.0 * GELU_COEFF * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ids::{AttnSite, Role};

    fn key(i: usize) -> LeafKey {
        LeafKey::Weight(MatrixId::attn(i, AttnSite::SelfAttn, Role::Q))
    }

    #[test]
    fn mse_of_identical_tensors_is_zero() {
        let mut tape = Tape::new();
        let x = Tensor2D::from_values(2, 2, vec![1.0, -2.0, 0.5, 3.0]).unwrap();
        let a = tape.constant(x.clone());
        let l = tape.mean_square_error(a, &x).unwrap();
        assert_eq!(tape.value(l).values[0], 0.0);
    }

    #[test]
    fn matmul_by_identity_preserves_values() {
        let mut tape = Tape::new();
        let w = Tensor2D::from_values(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let i = tape.constant(Tensor2D::identity(3));
        let wn = tape.param(key(0), w.clone());
        let out = tape.matmul(i, wn).unwrap();
        assert_eq!(tape.value(out), &w);
    }

    #[test]
    fn softmax_of_constant_row_is_uniform() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor2D::from_values(1, 4, vec![3.3; 4]).unwrap());
        let s = tape.softmax_rows(a);
        for v in &tape.value(s).values {
            assert!((v - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn linear_least_squares_gradient_closed_form() {
        // loss = mean((W x - y)^2) at W = 0 has gradient -(2/n) y x^T.
        let mut tape = Tape::new();
        let w = tape.param(key(0), Tensor2D::zeros(2, 3));
        let x = tape.constant(Tensor2D::from_values(3, 1, vec![1.0, -1.0, 2.0]).unwrap());
        let y = Tensor2D::from_values(2, 1, vec![0.5, -1.5]).unwrap();
        let pred = tape.matmul(w, x).unwrap();
        let loss = tape.mean_square_error(pred, &y).unwrap();
        let grads = tape.backward(loss).unwrap();
        let g = &grads.entries[&key(0)];
        let n = 2.0;
        for r in 0..2 {
            for c in 0..3 {
                let want = -(2.0 / n) * y.values[r] * [1.0, -1.0, 2.0][c];
                assert!((g.get(r, c) - want).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn gradient_at_mse_minimum_is_zero() {
        let mut tape = Tape::new();
        let x = Tensor2D::from_values(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let w = tape.param(key(0), x.clone());
        let loss = tape.mean_square_error(w, &x).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert!(grads.entries[&key(0)].values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn shape_mismatch_names_primitive_and_nodes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor2D::zeros(2, 3));
        let b = tape.constant(Tensor2D::zeros(2, 3));
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("matmul") && err.contains('0') && err.contains('1'), "{err}");
    }

    #[test]
    fn backward_rejects_non_scalar_and_empty_tape() {
        let tape = Tape::new();
        assert!(tape.backward(0).is_err());
        let mut tape = Tape::new();
        let a = tape.constant(Tensor2D::zeros(2, 2));
        assert!(tape.backward(a).is_err());
    }

    #[test]
    fn reshape_and_concat_route_gradients() {
        // loss = mean((concat(reshape(W), V) - T)^2); both leaves get the
        // plain MSE gradient restricted to their slice.
        let mut tape = Tape::new();
        let w = tape.param(key(0), Tensor2D::from_values(1, 4, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let v = tape.param(key(1), Tensor2D::from_values(2, 2, vec![5.0, 6.0, 7.0, 8.0]).unwrap());
        let wr = tape.reshape(w, 2, 2).unwrap();
        let cat = tape.concat_rows(wr, v).unwrap();
        let target = Tensor2D::zeros(4, 2);
        let loss = tape.mean_square_error(cat, &target).unwrap();
        let grads = tape.backward(loss).unwrap();
        let gw = &grads.entries[&key(0)];
        let gv = &grads.entries[&key(1)];
        assert_eq!(gw.shape(), (1, 4));
        for (i, &x) in [1.0, 2.0, 3.0, 4.0].iter().enumerate() {
            assert!((gw.values[i] - 2.0 * x / 8.0).abs() < 1e-15);
        }
        for (i, &x) in [5.0, 6.0, 7.0, 8.0].iter().enumerate() {
            assert!((gv.values[i] - 2.0 * x / 8.0).abs() < 1e-15);
        }
    }

    #[test]
    fn gelu_matches_reference_values() {
        assert!(gelu_tanh(0.0).abs() < 1e-15);
        assert!((gelu_tanh(1.0) - 0.841192).abs() < 1e-5);
        assert!((gelu_tanh(-1.0) + 0.158808).abs() < 1e-5);
        // Derivative against central differences.
        for &x in &[-2.0, -0.5, 0.0, 0.3, 1.7] {
            let h = 1e-6;
            let fd = (gelu_tanh(x + h) - gelu_tanh(x - h)) / (2.0 * h);
            assert!((gelu_tanh_derivative(x) - fd).abs() < 1e-8);
        }
    }

    #[test]
    fn repeated_leaf_accumulates_gradient() {
        // loss = mean((W + W - T)^2): dW = 2 * dSum.
        let mut tape = Tape::new();
        let wv = Tensor2D::from_values(1, 2, vec![1.0, -1.0]).unwrap();
        let w = tape.param(key(0), wv);
        let s = tape.add(w, w).unwrap();
        let t = Tensor2D::zeros(1, 2);
        let loss = tape.mean_square_error(s, &t).unwrap();
        let g = tape.backward(loss).unwrap();
        let gw = &g.entries[&key(0)];
        // d/dW mean((2W)^2) = 8W / n with n = 2.
        assert!((gw.values[0] - 8.0 * 1.0 / 2.0).abs() < 1e-14);
        assert!((gw.values[1] - 8.0 * -1.0 / 2.0).abs() < 1e-14);
    }
}
