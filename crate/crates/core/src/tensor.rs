//! Dense row-major tensors and the deterministic kernels built on them.
//!
//! Tensors are immutable after construction and hold only finite values;
//! every kernel validates its output, so a NaN or Inf surfaces as
//! [`KernelError::NonFinite`] instead of propagating. All operations are
//! pure and the types are `Send + Sync`.

use crate::error::{KernelError, Result};
use crate::scalar::{erf, Real};

/// Dense row-major numeric array. `shape` may have any rank; rank-2 carries
/// almost all of the traffic.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T: Real = f64> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    /// Builds a tensor, checking the length invariant and finiteness.
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if data.len() != expected {
            return Err(KernelError::DataLength {
                expected,
                got: data.len(),
            });
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(KernelError::NonFinite { op: "tensor" });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let len = shape.iter().product();
        Self {
            shape,
            data: vec![T::zero(); len],
        }
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(KernelError::BadOperand {
                op: "from_rows",
                reason: "ragged rows".into(),
            });
        }
        Self::new(vec![rows.len(), cols], rows.concat())
    }

    pub fn vector(data: Vec<T>) -> Result<Self> {
        let n = data.len();
        Self::new(vec![n], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Rows of a rank-2 tensor (or a rank-1 tensor seen as a single row).
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            1 => 1,
            2 => self.shape[0],
            _ => panic!("rows() on rank-{} tensor", self.shape.len()),
        }
    }

    pub fn cols(&self) -> usize {
        match self.shape.len() {
            1 => self.shape[0],
            2 => self.shape[1],
            _ => panic!("cols() on rank-{} tensor", self.shape.len()),
        }
    }

    pub fn at(&self, row: usize, col: usize) -> T {
        self.data[row * self.cols() + col]
    }

    pub fn row(&self, row: usize) -> &[T] {
        let c = self.cols();
        &self.data[row * c..(row + 1) * c]
    }

    /// Reinterprets the buffer under a new shape of equal length.
    pub fn reshape(&self, shape: Vec<usize>) -> Result<Self> {
        Self::new(shape, self.data.clone())
    }

    pub fn transpose(&self) -> Result<Self> {
        if self.rank() != 2 {
            return Err(KernelError::BadOperand {
                op: "transpose",
                reason: format!("rank {} != 2", self.rank()),
            });
        }
        let (m, n) = (self.shape[0], self.shape[1]);
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Self::new(vec![n, m], out)
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        if self.shape != other.shape {
            return Err(KernelError::ShapeMismatch {
                op: "add",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| a + b)
            .collect();
        Self::new(self.shape.clone(), data)
    }

    pub fn scale(&self, factor: T) -> Result<Self> {
        let data = self.data.iter().map(|&v| v * factor).collect();
        Self::new(self.shape.clone(), data)
    }

    /// Sum of all entries.
    pub fn sum(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &v| acc + v)
    }

    /// New tensor keeping the given rows of a rank-2 tensor, in order.
    pub fn gather_rows(&self, indices: &[usize]) -> Result<Self> {
        if self.rank() != 2 {
            return Err(KernelError::BadOperand {
                op: "gather_rows",
                reason: format!("rank {} != 2", self.rank()),
            });
        }
        let c = self.cols();
        let mut data = Vec::with_capacity(indices.len() * c);
        for &i in indices {
            if i >= self.rows() {
                return Err(KernelError::BadOperand {
                    op: "gather_rows",
                    reason: format!("row {i} out of {}", self.rows()),
                });
            }
            data.extend_from_slice(self.row(i));
        }
        Self::new(vec![indices.len(), c], data)
    }
}

/// Affine map `x -> x W^T + b`, stored as `weight` of shape `[out, in]` and a
/// bias of length `out` (zero allowed).
#[derive(Clone, Debug, PartialEq)]
pub struct LinearLayer<T: Real = f64> {
    weight: Tensor<T>,
    bias: Tensor<T>,
}

impl<T: Real> LinearLayer<T> {
    pub fn new(weight: Tensor<T>, bias: Option<Tensor<T>>) -> Result<Self> {
        if weight.rank() != 2 {
            return Err(KernelError::BadOperand {
                op: "linear",
                reason: format!("weight rank {} != 2", weight.rank()),
            });
        }
        let out_dim = weight.shape()[0];
        let bias = match bias {
            Some(b) => {
                if b.rank() != 1 || b.len() != out_dim {
                    return Err(KernelError::ShapeMismatch {
                        op: "linear bias",
                        lhs: weight.shape().to_vec(),
                        rhs: b.shape().to_vec(),
                    });
                }
                b
            }
            None => Tensor::zeros(vec![out_dim]),
        };
        Ok(Self { weight, bias })
    }

    pub fn identity(n: usize) -> Self {
        let mut data = vec![T::zero(); n * n];
        for i in 0..n {
            data[i * n + i] = T::one();
        }
        Self {
            weight: Tensor::new(vec![n, n], data).expect("identity"),
            bias: Tensor::zeros(vec![n]),
        }
    }

    pub fn weight(&self) -> &Tensor<T> {
        &self.weight
    }

    pub fn bias(&self) -> &Tensor<T> {
        &self.bias
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    /// Random layer with Gaussian(0, scale^2) weights and zero bias.
    pub fn seeded(out_dim: usize, in_dim: usize, scale: f64, rng: &mut SeededRng) -> Self {
        let weight = seeded_init(&[out_dim, in_dim], T::from_f64_lossy(scale), rng);
        Self {
            weight,
            bias: Tensor::zeros(vec![out_dim]),
        }
    }
}

/// Deterministic seeded generator: SplitMix64.
///
/// State advances by the constant 0x9E3779B97F4A7C15 and each output is the
/// finalizer `z ^= z >> 30; z *= 0xBF58476D1CE4E5B9; z ^= z >> 27;
/// z *= 0x94D049BB133111EB; z ^= z >> 31` of the advanced state. Identical
/// seeds produce identical streams on every platform; Gaussians come from
/// the Box-Muller transform (cosine branch) applied to consecutive uniforms.
#[derive(Clone, Debug)]
pub struct SeededRng {
    state: u64,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform in `[0, 1)`, from the top 53 bits.
    pub fn next_uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Standard Gaussian via Box-Muller; `u1` is shifted into `(0, 1]` so the
    /// logarithm is always finite.
    pub fn next_gaussian(&mut self) -> f64 {
        let u1 = ((self.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64);
        let u2 = self.next_uniform();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }
}

/// i.i.d. Gaussian(0, scale^2) tensor; `scale = 0` gives the zero tensor.
pub fn seeded_init<T: Real>(shape: &[usize], scale: T, rng: &mut SeededRng) -> Tensor<T> {
    let len: usize = shape.iter().product();
    let data = (0..len)
        .map(|_| scale * T::from_f64_lossy(rng.next_gaussian()))
        .collect();
    Tensor::new(shape.to_vec(), data).expect("seeded_init stays finite")
}

/// Exact mathematical product of two rank-2 tensors.
pub fn matmul<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
        return Err(KernelError::ShapeMismatch {
            op: "matmul",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        for p in 0..k {
            let aip = a.data[i * k + p];
            let brow = &b.data[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    Tensor::new(vec![m, n], out)
}

/// Row-wise softmax with per-row max subtraction.
pub fn softmax_rows<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, n) = (x.rows(), x.cols());
    if n == 0 {
        return Err(KernelError::BadOperand {
            op: "softmax_rows",
            reason: "empty rows".into(),
        });
    }
    let mut out = Vec::with_capacity(m * n);
    for i in 0..m {
        let row = &x.data[i * n..(i + 1) * n];
        let max = row.iter().cloned().fold(row[0], T::max);
        let exps: Vec<T> = row.iter().map(|&v| (v - max).exp()).collect();
        let sum = exps.iter().fold(T::zero(), |acc, &v| acc + v);
        out.extend(exps.iter().map(|&e| e / sum));
    }
    let mut shape = x.shape().to_vec();
    if shape.len() == 1 {
        shape = vec![n];
    }
    Tensor::new(shape, out)
}

/// Layer normalization over the last axis with affine parameters.
///
/// Each row is standardized with the population variance and `eps` added
/// under the square root, then scaled by `gamma` and shifted by `beta`.
/// The default epsilon used by the transformer blocks is [`LN_EPS`].
pub fn layer_norm<T: Real>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: T,
) -> Result<Tensor<T>> {
    let n = x.cols();
    if gamma.len() != n || beta.len() != n {
        return Err(KernelError::ShapeMismatch {
            op: "layer_norm",
            lhs: x.shape().to_vec(),
            rhs: gamma.shape().to_vec(),
        });
    }
    if eps <= T::zero() {
        return Err(KernelError::BadOperand {
            op: "layer_norm",
            reason: "eps must be positive".into(),
        });
    }
    let m = x.rows();
    let inv_n = T::one() / T::from_f64_lossy(n as f64);
    let mut out = Vec::with_capacity(m * n);
    for i in 0..m {
        let row = &x.data[i * n..(i + 1) * n];
        let mean = row.iter().fold(T::zero(), |a, &v| a + v) * inv_n;
        let var = row
            .iter()
            .fold(T::zero(), |a, &v| a + (v - mean) * (v - mean))
            * inv_n;
        let inv_std = T::one() / (var + eps).sqrt();
        for (j, &v) in row.iter().enumerate() {
            out.push((v - mean) * inv_std * gamma.data[j] + beta.data[j]);
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// Default layer-norm epsilon used by the blocks, 1e-6.
pub const LN_EPS: f64 = 1e-6;

/// Layer norm with unit gamma and zero beta at [`LN_EPS`]; the form the
/// attention and FFN blocks apply.
pub fn layer_norm_unit<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let n = x.cols();
    let gamma = Tensor::new(vec![n], vec![T::one(); n])?;
    let beta = Tensor::zeros(vec![n]);
    layer_norm(x, &gamma, &beta, T::from_f64_lossy(LN_EPS))
}

/// Elementwise exact-erf GELU: `x * Phi(x)` with `Phi` the standard normal
/// CDF (not the tanh approximation).
pub fn gelu<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let half = T::from_f64_lossy(0.5);
    let inv_sqrt2 = T::from_f64_lossy(std::f64::consts::FRAC_1_SQRT_2);
    let data = x
        .data
        .iter()
        .map(|&v| half * v * (T::one() + erf(v * inv_sqrt2)))
        .collect();
    Tensor::new(x.shape().to_vec(), data)
}

/// Applies a linear layer to rows: `x W^T + b`.
pub fn linear_apply<T: Real>(layer: &LinearLayer<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    if x.cols() != layer.in_dim() {
        return Err(KernelError::ShapeMismatch {
            op: "linear_apply",
            lhs: x.shape().to_vec(),
            rhs: layer.weight.shape().to_vec(),
        });
    }
    let x2 = if x.rank() == 1 {
        x.reshape(vec![1, x.len()])?
    } else {
        x.clone()
    };
    let wt = layer.weight.transpose()?;
    let mut y = matmul(&x2, &wt)?;
    let (m, out_dim) = (y.rows(), y.cols());
    for i in 0..m {
        for j in 0..out_dim {
            y.data[i * out_dim + j] += layer.bias.data[j];
        }
    }
    if x.rank() == 1 {
        y.reshape(vec![out_dim])
    } else {
        Ok(y)
    }
}

/// Indices of the `k` largest entries, ties broken toward the lower index,
/// returned sorted ascending.
pub fn top_k_indices<T: Real>(scores: &Tensor<T>, k: usize) -> Result<Vec<usize>> {
    let n = scores.len();
    if k == 0 || k > n {
        return Err(KernelError::KOutOfRange { k, n });
    }
    let mut order: Vec<usize> = (0..n).collect();
    // Stable sort by descending value keeps the lower index first on ties.
    order.sort_by(|&a, &b| {
        scores.data[b]
            .partial_cmp(&scores.data[a])
            .expect("finite scores")
    });
    let mut kept: Vec<usize> = order[..k].to_vec();
    kept.sort_unstable();
    Ok(kept)
}
