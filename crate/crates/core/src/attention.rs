//! Multi-head self-attention, FFN, and cross-attention blocks.
//!
//! The residual blocks here are post-norm: `LN(sublayer(x) + x)`, applied
//! literally. Standard ViT-B places the norm before the sublayer instead;
//! both orders are available through [`NormOrder`], with post-norm as the
//! default used everywhere else in the crate. Layer norms use unit gamma
//! and zero beta at [`crate::tensor::LN_EPS`].

use crate::error::{KernelError, Result};
use crate::scalar::Real;
use crate::tensor::{
    gelu, layer_norm_unit, linear_apply, matmul, softmax_rows, LinearLayer, SeededRng, Tensor,
};

/// Multi-head self-attention parameters; all four projections are `d -> d`.
#[derive(Clone, Debug)]
pub struct MhsaLayer<T: Real = f64> {
    pub wq: LinearLayer<T>,
    pub wk: LinearLayer<T>,
    pub wv: LinearLayer<T>,
    pub wo: LinearLayer<T>,
    heads: usize,
}

impl<T: Real> MhsaLayer<T> {
    pub fn new(
        wq: LinearLayer<T>,
        wk: LinearLayer<T>,
        wv: LinearLayer<T>,
        wo: LinearLayer<T>,
        heads: usize,
    ) -> Result<Self> {
        let d = wq.out_dim();
        for (name, l) in [("wq", &wq), ("wk", &wk), ("wv", &wv), ("wo", &wo)] {
            if l.out_dim() != d || l.in_dim() != d {
                return Err(KernelError::InvalidConfig {
                    reason: format!("{name} must be {d}x{d}"),
                });
            }
        }
        if heads == 0 || d % heads != 0 {
            return Err(KernelError::InvalidConfig {
                reason: format!("width {d} not divisible by {heads} heads"),
            });
        }
        Ok(Self {
            wq,
            wk,
            wv,
            wo,
            heads,
        })
    }

    pub fn seeded(d: usize, heads: usize, scale: f64, rng: &mut SeededRng) -> Result<Self> {
        Self::new(
            LinearLayer::seeded(d, d, scale, rng),
            LinearLayer::seeded(d, d, scale, rng),
            LinearLayer::seeded(d, d, scale, rng),
            LinearLayer::seeded(d, d, scale, rng),
            heads,
        )
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn width(&self) -> usize {
        self.wq.out_dim()
    }

    pub fn head_dim(&self) -> usize {
        self.width() / self.heads
    }
}

/// Two-layer FFN with the ViT-B expansion factor of 4 and GELU activation.
#[derive(Clone, Debug)]
pub struct FfnBlock<T: Real = f64> {
    pub w1: LinearLayer<T>,
    pub w2: LinearLayer<T>,
}

/// Fixed FFN expansion factor (hidden width = 4d).
pub const FFN_MULT: usize = 4;

impl<T: Real> FfnBlock<T> {
    pub fn new(w1: LinearLayer<T>, w2: LinearLayer<T>) -> Result<Self> {
        let d = w1.in_dim();
        if w1.out_dim() != FFN_MULT * d || w2.in_dim() != FFN_MULT * d || w2.out_dim() != d {
            return Err(KernelError::InvalidConfig {
                reason: format!(
                    "ffn must be {d}->{h}->{d}, got {}->{} and {}->{}",
                    w1.in_dim(),
                    w1.out_dim(),
                    w2.in_dim(),
                    w2.out_dim(),
                    h = FFN_MULT * d
                ),
            });
        }
        Ok(Self { w1, w2 })
    }

    pub fn seeded(d: usize, scale: f64, rng: &mut SeededRng) -> Result<Self> {
        Self::new(
            LinearLayer::seeded(FFN_MULT * d, d, scale, rng),
            LinearLayer::seeded(d, FFN_MULT * d, scale, rng),
        )
    }
}

/// Cross-attention layer of the fusion encoder: one attention block whose
/// queries and keys/values come from different sequences, followed by an
/// FFN, both with residual + post-norm.
#[derive(Clone, Debug)]
pub struct CrossAttnLayer<T: Real = f64> {
    pub wq: LinearLayer<T>,
    pub wk: LinearLayer<T>,
    pub wv: LinearLayer<T>,
    pub wo: LinearLayer<T>,
    heads: usize,
    pub ffn: FfnBlock<T>,
}

impl<T: Real> CrossAttnLayer<T> {
    pub fn new(
        wq: LinearLayer<T>,
        wk: LinearLayer<T>,
        wv: LinearLayer<T>,
        wo: LinearLayer<T>,
        heads: usize,
        ffn: FfnBlock<T>,
    ) -> Result<Self> {
        let probe = MhsaLayer::new(wq, wk, wv, wo, heads)?;
        Ok(Self {
            wq: probe.wq,
            wk: probe.wk,
            wv: probe.wv,
            wo: probe.wo,
            heads,
            ffn,
        })
    }

    pub fn seeded(d: usize, heads: usize, scale: f64, rng: &mut SeededRng) -> Result<Self> {
        Self::new(
            LinearLayer::seeded(d, d, scale, rng),
            LinearLayer::seeded(d, d, scale, rng),
            LinearLayer::seeded(d, d, scale, rng),
            LinearLayer::seeded(d, d, scale, rng),
            heads,
            FfnBlock::seeded(d, scale, rng)?,
        )
    }

    pub fn heads(&self) -> usize {
        self.heads
    }
}

/// Per-head attention matrices, each `nq x nk` with softmax rows.
#[derive(Clone, Debug)]
pub struct AttnMaps<T: Real = f64> {
    heads: Vec<Tensor<T>>,
}

impl<T: Real> AttnMaps<T> {
    /// Builds maps from per-head matrices, checking that every row is a
    /// distribution: nonnegative and summing to one within 1e-10.
    pub fn from_heads(heads: Vec<Tensor<T>>) -> Result<Self> {
        let tol = T::from_f64_lossy(1e-10);
        for map in &heads {
            if map.rank() != 2 || map.shape() != heads[0].shape() {
                return Err(KernelError::BadOperand {
                    op: "attn_maps",
                    reason: "heads must share one nq x nk shape".into(),
                });
            }
            for i in 0..map.rows() {
                let row = map.row(i);
                if row.iter().any(|&v| v < T::zero()) {
                    return Err(KernelError::BadOperand {
                        op: "attn_maps",
                        reason: "negative attention weight".into(),
                    });
                }
                let sum = row.iter().fold(T::zero(), |a, &v| a + v);
                if (sum - T::one()).abs() > tol {
                    return Err(KernelError::BadOperand {
                        op: "attn_maps",
                        reason: format!("row sum {sum} != 1"),
                    });
                }
            }
        }
        Ok(Self { heads })
    }

    pub fn heads(&self) -> &[Tensor<T>] {
        &self.heads
    }

    pub fn num_heads(&self) -> usize {
        self.heads.len()
    }
}

/// Sublayer norm order: `Post` is `LN(f(x) + x)`, `Pre` is `x + f(LN(x))`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormOrder {
    Post,
    Pre,
}

fn split_heads<T: Real>(x: &Tensor<T>, heads: usize) -> Vec<Tensor<T>> {
    let (n, d) = (x.rows(), x.cols());
    let hd = d / heads;
    (0..heads)
        .map(|h| {
            let mut data = Vec::with_capacity(n * hd);
            for i in 0..n {
                data.extend_from_slice(&x.row(i)[h * hd..(h + 1) * hd]);
            }
            Tensor::new(vec![n, hd], data).expect("head slice")
        })
        .collect()
}

fn concat_heads<T: Real>(heads: &[Tensor<T>]) -> Tensor<T> {
    let n = heads[0].rows();
    let hd = heads[0].cols();
    let mut data = Vec::with_capacity(n * hd * heads.len());
    for i in 0..n {
        for h in heads {
            data.extend_from_slice(h.row(i));
        }
    }
    Tensor::new(vec![n, hd * heads.len()], data).expect("head concat")
}

fn attention_core<T: Real>(
    wq: &LinearLayer<T>,
    wk: &LinearLayer<T>,
    wv: &LinearLayer<T>,
    wo: &LinearLayer<T>,
    heads: usize,
    xq: &Tensor<T>,
    xkv: &Tensor<T>,
) -> Result<(Tensor<T>, AttnMaps<T>)> {
    let q = linear_apply(wq, xq)?;
    let k = linear_apply(wk, xkv)?;
    let v = linear_apply(wv, xkv)?;
    let hd = wq.out_dim() / heads;
    let scale = T::one() / T::from_f64_lossy(hd as f64).sqrt();
    let qh = split_heads(&q, heads);
    let kh = split_heads(&k, heads);
    let vh = split_heads(&v, heads);
    let mut maps = Vec::with_capacity(heads);
    let mut mixed = Vec::with_capacity(heads);
    for h in 0..heads {
        let logits = matmul(&qh[h], &kh[h].transpose()?)?.scale(scale)?;
        let map = softmax_rows(&logits)?;
        mixed.push(matmul(&map, &vh[h])?);
        maps.push(map);
    }
    let y = linear_apply(wo, &concat_heads(&mixed))?;
    Ok((y, AttnMaps { heads: maps }))
}

/// Scaled dot-product multi-head self-attention, per-head scale
/// `1/sqrt(d/h)`. Residual and norm are the caller's job ([`sa_block`]);
/// the per-head maps come back for guidance reuse.
pub fn mhsa_forward<T: Real>(
    layer: &MhsaLayer<T>,
    x: &Tensor<T>,
) -> Result<(Tensor<T>, AttnMaps<T>)> {
    if x.rank() != 2 || x.cols() != layer.width() || x.rows() == 0 {
        return Err(KernelError::ShapeMismatch {
            op: "mhsa_forward",
            lhs: x.shape().to_vec(),
            rhs: vec![layer.width(), layer.width()],
        });
    }
    attention_core(
        &layer.wq,
        &layer.wk,
        &layer.wv,
        &layer.wo,
        layer.heads,
        x,
        x,
    )
}

/// Self-attention sub-block: `LN(SA(x) + x)` in the default post-norm order.
pub fn sa_block<T: Real>(layer: &MhsaLayer<T>, x: &Tensor<T>) -> Result<(Tensor<T>, AttnMaps<T>)> {
    sa_block_with(layer, x, NormOrder::Post)
}

pub fn sa_block_with<T: Real>(
    layer: &MhsaLayer<T>,
    x: &Tensor<T>,
    order: NormOrder,
) -> Result<(Tensor<T>, AttnMaps<T>)> {
    match order {
        NormOrder::Post => {
            let (y, maps) = mhsa_forward(layer, x)?;
            Ok((layer_norm_unit(&y.add(x)?)?, maps))
        }
        NormOrder::Pre => {
            let (y, maps) = mhsa_forward(layer, &layer_norm_unit(x)?)?;
            Ok((x.add(&y)?, maps))
        }
    }
}

/// FFN sub-block: `LN(W2 gelu(W1 x) + x)` in the default post-norm order.
pub fn ffn_block<T: Real>(ffn: &FfnBlock<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    ffn_block_with(ffn, x, NormOrder::Post)
}

pub fn ffn_block_with<T: Real>(
    ffn: &FfnBlock<T>,
    x: &Tensor<T>,
    order: NormOrder,
) -> Result<Tensor<T>> {
    let inner = |inp: &Tensor<T>| -> Result<Tensor<T>> {
        linear_apply(&ffn.w2, &gelu(&linear_apply(&ffn.w1, inp)?)?)
    };
    match order {
        NormOrder::Post => layer_norm_unit(&inner(x)?.add(x)?),
        NormOrder::Pre => x.add(&inner(&layer_norm_unit(x)?)?),
    }
}

/// One fusion-encoder layer: cross-attention with queries from `xq` and
/// keys/values from `xkv`, then the FFN, each with residual + post-norm.
pub fn cross_attn_forward<T: Real>(
    layer: &CrossAttnLayer<T>,
    xq: &Tensor<T>,
    xkv: &Tensor<T>,
) -> Result<Tensor<T>> {
    if xkv.rows() == 0 {
        return Err(KernelError::BadOperand {
            op: "cross_attn_forward",
            reason: "empty key/value sequence".into(),
        });
    }
    let (y, _) = attention_core(
        &layer.wq,
        &layer.wk,
        &layer.wv,
        &layer.wo,
        layer.heads,
        xq,
        xkv,
    )?;
    let attended = layer_norm_unit(&y.add(xq)?)?;
    ffn_block(&layer.ffn, &attended)
}
