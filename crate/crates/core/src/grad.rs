//! Tape-based reverse-mode differentiation over the kernel op set, and the
//! finite-difference checks built on it.
//!
//! The tape exists to verify that the selection pipeline is differentiable
//! end to end: hard top-k is treated as piecewise-constant routing (no
//! gradient through the index choice), while gradients flow through the
//! attention weights and token values, including the fused token's weights.
//! A check is only meaningful while the kept set is locally constant, so
//! every check guards on the tie margin (the gap between the k-th and
//! (k+1)-th score) exceeding `10 * eps`.
//!
//! Forward evaluation reuses the exact kernel functions, so replaying a
//! tape reproduces its recorded values bitwise.

use serde::Serialize;

use crate::attention::{FfnBlock, MhsaLayer};
use crate::error::{KernelError, Result};
use crate::scalar::{norm_cdf, norm_pdf, Real};
use crate::select::{keep_count, GuidanceMode, GuidanceSource};
use crate::tensor::{
    gelu, layer_norm_unit, matmul, seeded_init, softmax_rows, top_k_indices, SeededRng, Tensor,
    LN_EPS,
};

/// Handle to a tape node.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Clone, Debug)]
enum Op<T: Real> {
    Input,
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Add(NodeId, NodeId),
    /// Adds a `[1 x n]` bias row to every row of the operand.
    AddRowBroadcast(NodeId, NodeId),
    Scale(NodeId, T),
    /// Elementwise product with a constant matrix (not a node).
    MulElemConst(NodeId, Tensor<T>),
    SoftmaxRows(NodeId),
    LayerNormRows(NodeId),
    Gelu(NodeId),
    GatherRows(NodeId, Vec<usize>),
    GatherCols(NodeId, Vec<usize>),
    ConcatRows(Vec<NodeId>),
    ConcatCols(Vec<NodeId>),
    /// Per-row division by the row sum.
    NormalizeSumRows(NodeId),
    SumAll(NodeId),
}

struct Node<T: Real> {
    op: Op<T>,
    value: Tensor<T>,
}

/// Recorded computation over matrices.
pub struct Tape<T: Real = f64> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>) -> NodeId {
        self.nodes.push(Node { op, value });
        NodeId(self.nodes.len() - 1)
    }

    pub fn input(&mut self, value: Tensor<T>) -> NodeId {
        self.push(Op::Input, value)
    }

    /// Rank-1 tensors become `[1 x n]` inputs so every node is a matrix.
    pub fn input_row(&mut self, value: &Tensor<T>) -> Result<NodeId> {
        let v = if value.rank() == 1 {
            value.reshape(vec![1, value.len()])?
        } else {
            value.clone()
        };
        Ok(self.input(v))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = matmul(self.value(a), self.value(b))?;
        Ok(self.push(Op::MatMul(a, b), v))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).transpose()?;
        Ok(self.push(Op::Transpose(a), v))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).add(self.value(b))?;
        Ok(self.push(Op::Add(a, b), v))
    }

    pub fn add_row_broadcast(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        let x = self.value(a);
        let b = self.value(bias);
        if b.rows() != 1 || b.cols() != x.cols() {
            return Err(KernelError::ShapeMismatch {
                op: "add_row_broadcast",
                lhs: x.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let mut data = Vec::with_capacity(x.len());
        for i in 0..x.rows() {
            for (j, &v) in x.row(i).iter().enumerate() {
                data.push(v + b.data()[j]);
            }
        }
        let v = Tensor::new(x.shape().to_vec(), data)?;
        Ok(self.push(Op::AddRowBroadcast(a, bias), v))
    }

    pub fn scale(&mut self, a: NodeId, factor: T) -> Result<NodeId> {
        let v = self.value(a).scale(factor)?;
        Ok(self.push(Op::Scale(a, factor), v))
    }

    pub fn mul_elem_const(&mut self, a: NodeId, constant: Tensor<T>) -> Result<NodeId> {
        let x = self.value(a);
        if x.shape() != constant.shape() {
            return Err(KernelError::ShapeMismatch {
                op: "mul_elem_const",
                lhs: x.shape().to_vec(),
                rhs: constant.shape().to_vec(),
            });
        }
        let data = x
            .data()
            .iter()
            .zip(constant.data())
            .map(|(&a, &b)| a * b)
            .collect();
        let v = Tensor::new(x.shape().to_vec(), data)?;
        Ok(self.push(Op::MulElemConst(a, constant), v))
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let v = softmax_rows(self.value(a))?;
        Ok(self.push(Op::SoftmaxRows(a), v))
    }

    pub fn layer_norm_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let v = layer_norm_unit(self.value(a))?;
        Ok(self.push(Op::LayerNormRows(a), v))
    }

    pub fn gelu(&mut self, a: NodeId) -> Result<NodeId> {
        let v = gelu(self.value(a))?;
        Ok(self.push(Op::Gelu(a), v))
    }

    pub fn gather_rows(&mut self, a: NodeId, indices: Vec<usize>) -> Result<NodeId> {
        let v = self.value(a).gather_rows(&indices)?;
        Ok(self.push(Op::GatherRows(a, indices), v))
    }

    pub fn gather_cols(&mut self, a: NodeId, indices: Vec<usize>) -> Result<NodeId> {
        let x = self.value(a);
        let mut data = Vec::with_capacity(x.rows() * indices.len());
        for i in 0..x.rows() {
            let row = x.row(i);
            for &j in &indices {
                if j >= x.cols() {
                    return Err(KernelError::BadOperand {
                        op: "gather_cols",
                        reason: format!("column {j} out of {}", x.cols()),
                    });
                }
                data.push(row[j]);
            }
        }
        let v = Tensor::new(vec![x.rows(), indices.len()], data)?;
        Ok(self.push(Op::GatherCols(a, indices), v))
    }

    pub fn concat_rows(&mut self, parts: Vec<NodeId>) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(KernelError::BadOperand {
                op: "concat_rows",
                reason: "no parts".into(),
            });
        }
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in &parts {
            let t = self.value(p);
            if t.cols() != cols {
                return Err(KernelError::ShapeMismatch {
                    op: "concat_rows",
                    lhs: vec![cols],
                    rhs: t.shape().to_vec(),
                });
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let v = Tensor::new(vec![rows, cols], data)?;
        Ok(self.push(Op::ConcatRows(parts), v))
    }

    pub fn concat_cols(&mut self, parts: Vec<NodeId>) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(KernelError::BadOperand {
                op: "concat_cols",
                reason: "no parts".into(),
            });
        }
        let rows = self.value(parts[0]).rows();
        let total_cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut data = Vec::with_capacity(rows * total_cols);
        for i in 0..rows {
            for &p in &parts {
                let t = self.value(p);
                if t.rows() != rows {
                    return Err(KernelError::ShapeMismatch {
                        op: "concat_cols",
                        lhs: vec![rows],
                        rhs: t.shape().to_vec(),
                    });
                }
                data.extend_from_slice(t.row(i));
            }
        }
        let v = Tensor::new(vec![rows, total_cols], data)?;
        Ok(self.push(Op::ConcatCols(parts), v))
    }

    pub fn normalize_sum_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let x = self.value(a);
        let mut data = Vec::with_capacity(x.len());
        for i in 0..x.rows() {
            let row = x.row(i);
            let s = row.iter().fold(T::zero(), |acc, &v| acc + v);
            if s == T::zero() {
                return Err(KernelError::DegenerateGuidance);
            }
            data.extend(row.iter().map(|&v| v / s));
        }
        let v = Tensor::new(x.shape().to_vec(), data)?;
        Ok(self.push(Op::NormalizeSumRows(a), v))
    }

    pub fn sum_all(&mut self, a: NodeId) -> Result<NodeId> {
        let v = Tensor::new(vec![1, 1], vec![self.value(a).sum()])?;
        Ok(self.push(Op::SumAll(a), v))
    }

    /// Scalar value of a `[1 x 1]` node.
    pub fn scalar(&self, id: NodeId) -> T {
        self.value(id).data()[0]
    }

    /// Re-executes every recorded op from the stored inputs and checks the
    /// recomputed values are bitwise identical to the recorded ones.
    pub fn replay_is_bitwise(&self) -> Result<bool> {
        let mut values: Vec<Tensor<T>> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let v = match &node.op {
                Op::Input => node.value.clone(),
                Op::MatMul(a, b) => matmul(&values[a.0], &values[b.0])?,
                Op::Transpose(a) => values[a.0].transpose()?,
                Op::Add(a, b) => values[a.0].add(&values[b.0])?,
                Op::AddRowBroadcast(a, bias) => {
                    let x = &values[a.0];
                    let b = &values[bias.0];
                    let mut data = Vec::with_capacity(x.len());
                    for i in 0..x.rows() {
                        for (j, &v) in x.row(i).iter().enumerate() {
                            data.push(v + b.data()[j]);
                        }
                    }
                    Tensor::new(x.shape().to_vec(), data)?
                }
                Op::Scale(a, c) => values[a.0].scale(*c)?,
                Op::MulElemConst(a, m) => {
                    let data = values[a.0]
                        .data()
                        .iter()
                        .zip(m.data())
                        .map(|(&x, &y)| x * y)
                        .collect();
                    Tensor::new(values[a.0].shape().to_vec(), data)?
                }
                Op::SoftmaxRows(a) => softmax_rows(&values[a.0])?,
                Op::LayerNormRows(a) => layer_norm_unit(&values[a.0])?,
                Op::Gelu(a) => gelu(&values[a.0])?,
                Op::GatherRows(a, idx) => values[a.0].gather_rows(idx)?,
                Op::GatherCols(a, idx) => {
                    let x = &values[a.0];
                    let mut data = Vec::new();
                    for i in 0..x.rows() {
                        let row = x.row(i);
                        for &j in idx {
                            data.push(row[j]);
                        }
                    }
                    Tensor::new(vec![x.rows(), idx.len()], data)?
                }
                Op::ConcatRows(parts) => {
                    let mut data = Vec::new();
                    let cols = values[parts[0].0].cols();
                    let mut rows = 0;
                    for p in parts {
                        rows += values[p.0].rows();
                        data.extend_from_slice(values[p.0].data());
                    }
                    Tensor::new(vec![rows, cols], data)?
                }
                Op::ConcatCols(parts) => {
                    let rows = values[parts[0].0].rows();
                    let mut data = Vec::new();
                    for i in 0..rows {
                        for p in parts {
                            data.extend_from_slice(values[p.0].row(i));
                        }
                    }
                    let cols: usize = parts.iter().map(|p| values[p.0].cols()).sum();
                    Tensor::new(vec![rows, cols], data)?
                }
                Op::NormalizeSumRows(a) => {
                    let x = &values[a.0];
                    let mut data = Vec::with_capacity(x.len());
                    for i in 0..x.rows() {
                        let row = x.row(i);
                        let s = row.iter().fold(T::zero(), |acc, &v| acc + v);
                        data.extend(row.iter().map(|&v| v / s));
                    }
                    Tensor::new(x.shape().to_vec(), data)?
                }
                Op::SumAll(a) => Tensor::new(vec![1, 1], vec![values[a.0].sum()])?,
            };
            if v != node.value {
                return Ok(false);
            }
            values.push(v);
        }
        Ok(true)
    }

    /// Reverse sweep from `output` seeded with `seed` (same shape as the
    /// output). Returns one gradient per node, `None` where no gradient
    /// flowed.
    pub fn backward(&self, output: NodeId, seed: &Tensor<T>) -> Result<Gradients<T>> {
        if seed.shape() != self.value(output).shape() {
            return Err(KernelError::ShapeMismatch {
                op: "backward seed",
                lhs: seed.shape().to_vec(),
                rhs: self.value(output).shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(seed.clone());

        let accumulate = |slot: &mut Option<Tensor<T>>, delta: Tensor<T>| -> Result<()> {
            *slot = Some(match slot.take() {
                Some(g) => g.add(&delta)?,
                None => delta,
            });
            Ok(())
        };

        for idx in (0..self.nodes.len()).rev() {
            let Some(gout) = grads[idx].clone() else {
                continue;
            };
            match &self.nodes[idx].op {
                Op::Input => {}
                Op::MatMul(a, b) => {
                    let da = matmul(&gout, &self.value(*b).transpose()?)?;
                    let db = matmul(&self.value(*a).transpose()?, &gout)?;
                    accumulate(&mut grads[a.0], da)?;
                    accumulate(&mut grads[b.0], db)?;
                }
                Op::Transpose(a) => {
                    accumulate(&mut grads[a.0], gout.transpose()?)?;
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads[a.0], gout.clone())?;
                    accumulate(&mut grads[b.0], gout)?;
                }
                Op::AddRowBroadcast(a, bias) => {
                    let cols = gout.cols();
                    let mut bias_grad = vec![T::zero(); cols];
                    for i in 0..gout.rows() {
                        for (j, &g) in gout.row(i).iter().enumerate() {
                            bias_grad[j] += g;
                        }
                    }
                    accumulate(&mut grads[a.0], gout)?;
                    accumulate(&mut grads[bias.0], Tensor::new(vec![1, cols], bias_grad)?)?;
                }
                Op::Scale(a, c) => {
                    accumulate(&mut grads[a.0], gout.scale(*c)?)?;
                }
                Op::MulElemConst(a, m) => {
                    let data = gout
                        .data()
                        .iter()
                        .zip(m.data())
                        .map(|(&g, &c)| g * c)
                        .collect();
                    accumulate(&mut grads[a.0], Tensor::new(gout.shape().to_vec(), data)?)?;
                }
                Op::SoftmaxRows(a) => {
                    // dx_j = y_j * (g_j - sum_k g_k y_k), per row.
                    let y = &self.nodes[idx].value;
                    let mut data = Vec::with_capacity(y.len());
                    for i in 0..y.rows() {
                        let yr = y.row(i);
                        let gr = gout.row(i);
                        let dot = yr
                            .iter()
                            .zip(gr)
                            .fold(T::zero(), |acc, (&yv, &gv)| acc + yv * gv);
                        for (j, &yv) in yr.iter().enumerate() {
                            data.push(yv * (gr[j] - dot));
                        }
                    }
                    accumulate(&mut grads[a.0], Tensor::new(y.shape().to_vec(), data)?)?;
                }
                Op::LayerNormRows(a) => {
                    // With unit affine: dx = (g - mean(g) - xhat * mean(g .* xhat)) / std.
                    let x = self.value(*a);
                    let n = x.cols();
                    let inv_n = T::one() / T::from_f64_lossy(n as f64);
                    let eps = T::from_f64_lossy(LN_EPS);
                    let mut data = Vec::with_capacity(x.len());
                    for i in 0..x.rows() {
                        let xr = x.row(i);
                        let gr = gout.row(i);
                        let mean = xr.iter().fold(T::zero(), |acc, &v| acc + v) * inv_n;
                        let var = xr
                            .iter()
                            .fold(T::zero(), |acc, &v| acc + (v - mean) * (v - mean))
                            * inv_n;
                        let std = (var + eps).sqrt();
                        let xhat: Vec<T> = xr.iter().map(|&v| (v - mean) / std).collect();
                        let gmean = gr.iter().fold(T::zero(), |acc, &v| acc + v) * inv_n;
                        let gx = xhat
                            .iter()
                            .zip(gr)
                            .fold(T::zero(), |acc, (&h, &g)| acc + h * g)
                            * inv_n;
                        for (j, &g) in gr.iter().enumerate() {
                            data.push((g - gmean - xhat[j] * gx) / std);
                        }
                    }
                    accumulate(&mut grads[a.0], Tensor::new(x.shape().to_vec(), data)?)?;
                }
                Op::Gelu(a) => {
                    // d/dx [x * Phi(x)] = Phi(x) + x * phi(x).
                    let x = self.value(*a);
                    let data = x
                        .data()
                        .iter()
                        .zip(gout.data())
                        .map(|(&v, &g)| g * (norm_cdf(v) + v * norm_pdf(v)))
                        .collect();
                    accumulate(&mut grads[a.0], Tensor::new(x.shape().to_vec(), data)?)?;
                }
                Op::GatherRows(a, idx_list) => {
                    let src = self.value(*a);
                    let cols = src.cols();
                    let mut data = vec![T::zero(); src.len()];
                    for (out_row, &src_row) in idx_list.iter().enumerate() {
                        for j in 0..cols {
                            data[src_row * cols + j] += gout.at(out_row, j);
                        }
                    }
                    accumulate(&mut grads[a.0], Tensor::new(src.shape().to_vec(), data)?)?;
                }
                Op::GatherCols(a, idx_list) => {
                    let src = self.value(*a);
                    let cols = src.cols();
                    let mut data = vec![T::zero(); src.len()];
                    for i in 0..src.rows() {
                        for (out_col, &src_col) in idx_list.iter().enumerate() {
                            data[i * cols + src_col] += gout.at(i, out_col);
                        }
                    }
                    accumulate(&mut grads[a.0], Tensor::new(src.shape().to_vec(), data)?)?;
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let rows = self.value(p).rows();
                        let slice: Vec<usize> = (offset..offset + rows).collect();
                        let part_grad = gout.gather_rows(&slice)?;
                        accumulate(&mut grads[p.0], part_grad)?;
                        offset += rows;
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let t = self.value(p);
                        let mut data = Vec::with_capacity(t.len());
                        for i in 0..t.rows() {
                            data.extend_from_slice(&gout.row(i)[offset..offset + t.cols()]);
                        }
                        accumulate(
                            &mut grads[p.0],
                            Tensor::new(vec![t.rows(), t.cols()], data)?,
                        )?;
                        offset += t.cols();
                    }
                }
                Op::NormalizeSumRows(a) => {
                    // y = x / s with s the row sum:
                    // dx_j = (g_j - sum_k g_k y_k) / s.
                    let x = self.value(*a);
                    let y = &self.nodes[idx].value;
                    let mut data = Vec::with_capacity(x.len());
                    for i in 0..x.rows() {
                        let s = x.row(i).iter().fold(T::zero(), |acc, &v| acc + v);
                        let gr = gout.row(i);
                        let dot = y
                            .row(i)
                            .iter()
                            .zip(gr)
                            .fold(T::zero(), |acc, (&yv, &gv)| acc + yv * gv);
                        for &g in gr {
                            data.push((g - dot) / s);
                        }
                    }
                    accumulate(&mut grads[a.0], Tensor::new(x.shape().to_vec(), data)?)?;
                }
                Op::SumAll(a) => {
                    let src = self.value(*a);
                    let g = gout.data()[0];
                    let data = vec![g; src.len()];
                    accumulate(&mut grads[a.0], Tensor::new(src.shape().to_vec(), data)?)?;
                }
            }
        }
        Ok(Gradients { grads })
    }
}

/// Gradients from one reverse sweep.
pub struct Gradients<T: Real = f64> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.grads[id.0].as_ref()
    }

    /// Gradient for the node, or a zero tensor of the given shape when no
    /// gradient reached it.
    pub fn get_or_zero(&self, id: NodeId, shape: &[usize]) -> Tensor<T> {
        self.grads[id.0]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(shape.to_vec()))
    }
}

/// Central-difference gradient of a scalar function, coordinate by
/// coordinate.
pub fn numeric_grad<T, F>(mut f: F, x: &Tensor<T>, eps: T) -> Result<Tensor<T>>
where
    T: Real,
    F: FnMut(&Tensor<T>) -> Result<T>,
{
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let mut plus = x.data().to_vec();
        plus[i] += eps;
        let mut minus = x.data().to_vec();
        minus[i] -= eps;
        let fp = f(&Tensor::new(x.shape().to_vec(), plus)?)?;
        let fm = f(&Tensor::new(x.shape().to_vec(), minus)?)?;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(KernelError::NonFinite { op: "numeric_grad" });
        }
        out.push((fp - fm) / (T::from_f64_lossy(2.0) * eps));
    }
    Tensor::new(x.shape().to_vec(), out)
}

// --- tape builders for the transformer blocks -------------------------------

/// Weight node ids of one linear layer on a tape.
#[derive(Clone, Copy)]
pub struct TapeLinear {
    pub weight: NodeId,
    pub bias: NodeId,
}

pub fn tape_linear_weights<T: Real>(
    tape: &mut Tape<T>,
    layer: &crate::tensor::LinearLayer<T>,
) -> Result<TapeLinear> {
    let weight = tape.input(layer.weight().clone());
    let bias = tape.input_row(layer.bias())?;
    Ok(TapeLinear { weight, bias })
}

/// `x W^T + b` on the tape.
pub fn tape_linear<T: Real>(tape: &mut Tape<T>, lin: TapeLinear, x: NodeId) -> Result<NodeId> {
    let wt = tape.transpose(lin.weight)?;
    let y = tape.matmul(x, wt)?;
    tape.add_row_broadcast(y, lin.bias)
}

/// MHSA weight nodes.
#[derive(Clone, Copy)]
pub struct TapeMhsa {
    pub wq: TapeLinear,
    pub wk: TapeLinear,
    pub wv: TapeLinear,
    pub wo: TapeLinear,
    pub heads: usize,
}

pub fn tape_mhsa_weights<T: Real>(tape: &mut Tape<T>, layer: &MhsaLayer<T>) -> Result<TapeMhsa> {
    Ok(TapeMhsa {
        wq: tape_linear_weights(tape, &layer.wq)?,
        wk: tape_linear_weights(tape, &layer.wk)?,
        wv: tape_linear_weights(tape, &layer.wv)?,
        wo: tape_linear_weights(tape, &layer.wo)?,
        heads: layer.heads(),
    })
}

/// Multi-head attention on the tape; returns the output and per-head maps.
pub fn tape_mhsa<T: Real>(
    tape: &mut Tape<T>,
    w: &TapeMhsa,
    x: NodeId,
) -> Result<(NodeId, Vec<NodeId>)> {
    let d = tape.value(x).cols();
    let hd = d / w.heads;
    let q = tape_linear(tape, w.wq, x)?;
    let k = tape_linear(tape, w.wk, x)?;
    let v = tape_linear(tape, w.wv, x)?;
    let scale = T::one() / T::from_f64_lossy(hd as f64).sqrt();
    let mut maps = Vec::with_capacity(w.heads);
    let mut mixed = Vec::with_capacity(w.heads);
    for h in 0..w.heads {
        let cols: Vec<usize> = (h * hd..(h + 1) * hd).collect();
        let qh = tape.gather_cols(q, cols.clone())?;
        let kh = tape.gather_cols(k, cols.clone())?;
        let vh = tape.gather_cols(v, cols)?;
        let kt = tape.transpose(kh)?;
        let logits = tape.matmul(qh, kt)?;
        let scaled = tape.scale(logits, scale)?;
        let map = tape.softmax_rows(scaled)?;
        let mix = tape.matmul(map, vh)?;
        maps.push(map);
        mixed.push(mix);
    }
    let cat = tape.concat_cols(mixed)?;
    let out = tape_linear(tape, w.wo, cat)?;
    Ok((out, maps))
}

/// Post-norm self-attention sub-block on the tape.
pub fn tape_sa_block<T: Real>(
    tape: &mut Tape<T>,
    w: &TapeMhsa,
    x: NodeId,
) -> Result<(NodeId, Vec<NodeId>)> {
    let (y, maps) = tape_mhsa(tape, w, x)?;
    let res = tape.add(y, x)?;
    Ok((tape.layer_norm_rows(res)?, maps))
}

/// FFN weight nodes.
#[derive(Clone, Copy)]
pub struct TapeFfn {
    pub w1: TapeLinear,
    pub w2: TapeLinear,
}

pub fn tape_ffn_weights<T: Real>(tape: &mut Tape<T>, ffn: &FfnBlock<T>) -> Result<TapeFfn> {
    Ok(TapeFfn {
        w1: tape_linear_weights(tape, &ffn.w1)?,
        w2: tape_linear_weights(tape, &ffn.w2)?,
    })
}

/// Post-norm FFN sub-block on the tape.
pub fn tape_ffn_block<T: Real>(tape: &mut Tape<T>, w: &TapeFfn, x: NodeId) -> Result<NodeId> {
    let h = tape_linear(tape, w.w1, x)?;
    let g = tape.gelu(h)?;
    let y = tape_linear(tape, w.w2, g)?;
    let res = tape.add(y, x)?;
    tape.layer_norm_rows(res)
}

// --- the selection-pipeline check -------------------------------------------

/// Small-instance configuration for [`check_selection_pipeline`].
#[derive(Clone, Copy, Debug)]
pub struct PipelineConfig {
    /// Candidate patch tokens (the sequence adds a `[CLS]` row).
    pub patches: usize,
    pub width: usize,
    pub heads: usize,
    pub rate: f64,
    pub mode: GuidanceMode,
    pub seed: u64,
}

impl PipelineConfig {
    pub fn small(seed: u64, mode: GuidanceMode) -> Self {
        Self {
            patches: 12,
            width: 16,
            heads: 2,
            rate: 0.6,
            mode,
            seed,
        }
    }
}

/// Per-parameter comparison of analytic vs central-difference gradients.
#[derive(Clone, Debug, Serialize)]
pub struct ParamGrad {
    pub name: String,
    pub max_abs_diff: f64,
    /// `max|analytic - numeric| / max(1, max|numeric|)`.
    pub rel_error: f64,
}

/// Outcome of one pipeline gradient check.
#[derive(Clone, Debug, Serialize)]
pub struct GradReport {
    pub per_param: Vec<ParamGrad>,
    pub max_rel_error: f64,
    pub eps: f64,
    /// Gap between the k-th and (k+1)-th selection score.
    pub tie_margin: f64,
    /// True when `tie_margin > 10 * eps`; the comparison is skipped and the
    /// report marked invalid otherwise.
    pub valid: bool,
}

struct PipelineParts {
    x: Tensor<f64>,
    guidance: Tensor<f64>,
    mhsa: MhsaLayer<f64>,
    ffn: FfnBlock<f64>,
    probe: Tensor<f64>,
}

fn pipeline_parts(cfg: &PipelineConfig) -> Result<PipelineParts> {
    let mut rng = SeededRng::new(cfg.seed);
    let d = cfg.width;
    let n = cfg.patches;
    let x = seeded_init(&[n + 1, d], 1.0, &mut rng);
    let guidance = seeded_init(&[1, d], 1.0, &mut rng);
    let mhsa = MhsaLayer::seeded(d, cfg.heads, 0.4, &mut rng)?;
    let ffn = FfnBlock::seeded(d, 0.4, &mut rng)?;
    let k = keep_count(n, cfg.rate);
    let out_len = 1 + k + usize::from(!cfg.mode.disable_fusion);
    let probe = seeded_init(&[out_len, d], 1.0, &mut rng);
    Ok(PipelineParts {
        x,
        guidance,
        mhsa,
        ffn,
        probe,
    })
}

struct BuiltPipeline {
    tape: Tape<f64>,
    loss: NodeId,
    x: NodeId,
    guidance: NodeId,
    wq: NodeId,
    tie_margin: f64,
}

/// Records one selection layer on a tape: SA block, scoring per mode,
/// routing by the concrete top-k, fusion, FFN, and a probe-weighted scalar
/// loss. Top-k indices are taken from the concrete values; gradients flow
/// through token values and scores, never through the index choice.
fn build_pipeline(
    cfg: &PipelineConfig,
    parts: &PipelineParts,
    x_val: &Tensor<f64>,
    guidance_val: &Tensor<f64>,
    wq_val: &Tensor<f64>,
) -> Result<BuiltPipeline> {
    cfg.mode.validate()?;
    let n = cfg.patches;
    let d = cfg.width;
    let mut tape = Tape::new();
    let x = tape.input(x_val.clone());
    let guidance = tape.input(guidance_val.clone());
    let wq = tape.input(wq_val.clone());
    let wq_bias = tape.input_row(parts.mhsa.wq.bias())?;
    let wq_lin = TapeLinear {
        weight: wq,
        bias: wq_bias,
    };
    let w = TapeMhsa {
        wq: wq_lin,
        wk: tape_linear_weights(&mut tape, &parts.mhsa.wk)?,
        wv: tape_linear_weights(&mut tape, &parts.mhsa.wv)?,
        wo: tape_linear_weights(&mut tape, &parts.mhsa.wo)?,
        heads: cfg.heads,
    };
    let ffn = tape_ffn_weights(&mut tape, &parts.ffn)?;

    let (v_post, maps) = tape_sa_block(&mut tape, &w, x)?;

    let use_td_att = cfg.mode.source == GuidanceSource::TextCls && !cfg.mode.disable_td_att;
    let scores = if use_td_att {
        let q_text = tape_linear(&mut tape, wq_lin, guidance)?;
        let patches = tape.gather_rows(v_post, (1..=n).collect())?;
        let pt = tape.transpose(patches)?;
        let logits = tape.matmul(q_text, pt)?;
        let scale = 1.0 / (d as f64).sqrt();
        let scaled = tape.scale(logits, scale)?;
        tape.softmax_rows(scaled)?
    } else {
        // Image-CLS scoring: head-averaged [CLS] row without its own column.
        let mut rows = Vec::with_capacity(cfg.heads);
        for &map in &maps {
            let r = tape.gather_rows(map, vec![0])?;
            rows.push(tape.gather_cols(r, (1..=n).collect())?);
        }
        let mut acc = rows[0];
        for &r in &rows[1..] {
            acc = tape.add(acc, r)?;
        }
        let mean = tape.scale(acc, 1.0 / cfg.heads as f64)?;
        tape.normalize_sum_rows(mean)?
    };

    // Concrete routing decision plus the stability margin.
    let score_vals = tape.value(scores).clone().reshape(vec![n])?;
    let k = keep_count(n, cfg.rate);
    let kept = top_k_indices(&score_vals, k)?;
    let tie_margin = {
        let mut sorted: Vec<f64> = score_vals.data().to_vec();
        sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
        if k < n {
            sorted[k - 1] - sorted[k]
        } else {
            f64::INFINITY
        }
    };

    let mut kept_global = vec![0usize];
    kept_global.extend(kept.iter().map(|&i| i + 1));
    let kept_nodes = tape.gather_rows(v_post, kept_global)?;
    let seq = if cfg.mode.disable_fusion {
        kept_nodes
    } else if k < n {
        let inattentive: Vec<usize> = (0..n).filter(|i| !kept.contains(i)).collect();
        let weights = tape.gather_cols(scores, inattentive.clone())?;
        let values = tape.gather_rows(v_post, inattentive.iter().map(|&i| i + 1).collect())?;
        let fused = tape.matmul(weights, values)?;
        tape.concat_rows(vec![kept_nodes, fused])?
    } else {
        let zero = tape.input(Tensor::zeros(vec![1, d]));
        tape.concat_rows(vec![kept_nodes, zero])?
    };

    let out = tape_ffn_block(&mut tape, &ffn, seq)?;
    let weighted = tape.mul_elem_const(out, parts.probe.clone())?;
    let loss = tape.sum_all(weighted)?;
    Ok(BuiltPipeline {
        tape,
        loss,
        x,
        guidance,
        wq,
        tie_margin,
    })
}

fn rel_error(analytic: &Tensor<f64>, numeric: &Tensor<f64>) -> (f64, f64) {
    let mut max_diff = 0.0f64;
    let mut max_num = 0.0f64;
    for (&a, &n) in analytic.data().iter().zip(numeric.data()) {
        max_diff = max_diff.max((a - n).abs());
        max_num = max_num.max(n.abs());
    }
    (max_diff, max_diff / max_num.max(1.0))
}

/// Compares analytic and central-difference gradients of the probe loss
/// with respect to the input tokens, the guidance vector, and the shared
/// query weights, on a seeded small instance.
///
/// Returns an invalid report (comparison skipped) when the selection's tie
/// margin is not above `10 * eps`, since the finite-difference step could
/// then cross a routing boundary.
pub fn check_selection_pipeline(cfg: &PipelineConfig, eps: f64) -> Result<GradReport> {
    let parts = pipeline_parts(cfg)?;
    let built = build_pipeline(
        cfg,
        &parts,
        &parts.x,
        &parts.guidance,
        parts.mhsa.wq.weight(),
    )?;
    if !built.tie_margin.is_infinite() && built.tie_margin <= 10.0 * eps {
        return Ok(GradReport {
            per_param: Vec::new(),
            max_rel_error: f64::NAN,
            eps,
            tie_margin: built.tie_margin,
            valid: false,
        });
    }

    let seed = Tensor::new(vec![1, 1], vec![1.0])?;
    let grads = built.tape.backward(built.loss, &seed)?;
    let analytic_x = grads.get_or_zero(built.x, parts.x.shape());
    let analytic_t = grads.get_or_zero(built.guidance, parts.guidance.shape());
    let analytic_wq = grads.get_or_zero(built.wq, parts.mhsa.wq.weight().shape());

    let numeric_x = numeric_grad(
        |x| {
            Ok(
                build_pipeline(cfg, &parts, x, &parts.guidance, parts.mhsa.wq.weight())?
                    .tape
                    .scalar(built.loss),
            )
        },
        &parts.x,
        eps,
    )?;
    let numeric_t = numeric_grad(
        |t| {
            Ok(
                build_pipeline(cfg, &parts, &parts.x, t, parts.mhsa.wq.weight())?
                    .tape
                    .scalar(built.loss),
            )
        },
        &parts.guidance,
        eps,
    )?;
    let numeric_wq = numeric_grad(
        |wq| {
            Ok(build_pipeline(cfg, &parts, &parts.x, &parts.guidance, wq)?
                .tape
                .scalar(built.loss))
        },
        parts.mhsa.wq.weight(),
        eps,
    )?;

    let mut per_param = Vec::new();
    for (name, a, n) in [
        ("input_patches", &analytic_x, &numeric_x),
        ("guidance_t_cls", &analytic_t, &numeric_t),
        ("wq_shared", &analytic_wq, &numeric_wq),
    ] {
        let (max_abs_diff, rel) = rel_error(a, n);
        per_param.push(ParamGrad {
            name: name.into(),
            max_abs_diff,
            rel_error: rel,
        });
    }
    let max_rel_error = per_param.iter().map(|p| p.rel_error).fold(0.0f64, f64::max);
    Ok(GradReport {
        per_param,
        max_rel_error,
        eps,
        tie_margin: built.tie_margin,
        valid: true,
    })
}

/// Analytic gradient of the guidance vector on a fresh instance, used by
/// the text-influence property.
pub fn guidance_gradient(cfg: &PipelineConfig) -> Result<Tensor<f64>> {
    let parts = pipeline_parts(cfg)?;
    let built = build_pipeline(
        cfg,
        &parts,
        &parts.x,
        &parts.guidance,
        parts.mhsa.wq.weight(),
    )?;
    let seed = Tensor::new(vec![1, 1], vec![1.0])?;
    let grads = built.tape.backward(built.loss, &seed)?;
    Ok(grads.get_or_zero(built.guidance, parts.guidance.shape()))
}

/// Builds the pipeline on identical patch tokens, which forces uniform
/// scores and a zero tie margin; used to exercise the guard.
pub fn check_constructed_near_tie(cfg: &PipelineConfig, eps: f64) -> Result<GradReport> {
    let parts = pipeline_parts(cfg)?;
    let d = cfg.width;
    let mut rng = SeededRng::new(cfg.seed ^ 0xDEAD_BEEF);
    let row: Vec<f64> = seeded_init::<f64>(&[d], 1.0, &mut rng).data().to_vec();
    let mut rows = vec![seeded_init::<f64>(&[d], 1.0, &mut rng).data().to_vec()];
    for _ in 0..cfg.patches {
        rows.push(row.clone());
    }
    let x = Tensor::from_rows(&rows)?;
    let built = build_pipeline(cfg, &parts, &x, &parts.guidance, parts.mhsa.wq.weight())?;
    Ok(GradReport {
        per_param: Vec::new(),
        max_rel_error: f64::NAN,
        eps,
        tie_margin: built.tie_margin,
        valid: built.tie_margin > 10.0 * eps,
    })
}
