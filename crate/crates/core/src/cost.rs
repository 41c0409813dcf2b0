//! Analytic sequence-length schedules and FLOPs accounting.
//!
//! Costs are exact MAC (multiply-accumulate) counts in integer arithmetic;
//! [`FlopsConvention::TwoPerMac`] doubles them. Because the counting
//! convention cancels in every ratio, comparisons between reports are
//! convention-invariant.
//!
//! At a selection layer the sequence shrinks between the attention and FFN
//! sub-blocks. Two attribution rules are provided: charge the whole layer
//! at the reduced length ([`SelectionCostSplit::WholeLayer`], the default,
//! which is how module-level FLOPs profilers see a pruned layer), or charge
//! the attention at the incoming length and only the FFN at the reduced one
//! ([`SelectionCostSplit::SaPreFfnPost`], the literal sub-block order).
//! Token schedules are identical under both; only the FLOPs attribution of
//! the selection layer itself differs.

use serde::Serialize;

use crate::backbone::SelectionConfig;
use crate::error::{KernelError, Result};
use crate::select::keep_count;

/// How a multiply-accumulate is counted.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum FlopsConvention {
    /// One op per MAC.
    MacCount,
    /// Two ops per MAC (multiply + add).
    TwoPerMac,
}

impl FlopsConvention {
    fn apply(self, macs: u128) -> u128 {
        match self {
            Self::MacCount => macs,
            Self::TwoPerMac => 2 * macs,
        }
    }
}

/// FLOPs attribution rule for selection layers (see module docs).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum SelectionCostSplit {
    WholeLayer,
    SaPreFfnPost,
}

/// Transformer encoder dimensions.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct EncoderDims {
    pub layers: usize,
    pub width: usize,
    pub heads: usize,
    pub ffn_mult: usize,
}

impl EncoderDims {
    /// ViT-B scale: 12 layers, width 768, 12 heads, 4x FFN.
    pub fn vit_base() -> Self {
        Self {
            layers: 12,
            width: 768,
            heads: 12,
            ffn_mult: 4,
        }
    }

    /// Half-depth encoder at the same width, used for text and fusion.
    pub fn six_layer_base() -> Self {
        Self {
            layers: 6,
            ..Self::vit_base()
        }
    }
}

/// Full cost-model configuration: vision encoder, text encoder (with its
/// sequence length), cross-attention fusion encoder (queried by the text),
/// the visual token count including `[CLS]`, and the selection schedule.
#[derive(Clone, Debug, Serialize)]
pub struct CostConfig {
    pub vision: EncoderDims,
    pub text: EncoderDims,
    pub text_len: usize,
    pub fusion: EncoderDims,
    pub image_tokens: usize,
    #[serde(skip)]
    pub selection: SelectionConfig,
    pub convention: FlopsConvention,
    pub split: SelectionCostSplit,
}

impl CostConfig {
    /// Reference-scale defaults: ViT-B vision at the given visual token count,
    /// 6-layer text encoder over 40 tokens, 6-layer fusion encoder.
    pub fn reference_scale(image_tokens: usize, selection: SelectionConfig) -> Self {
        Self {
            vision: EncoderDims::vit_base(),
            text: EncoderDims::six_layer_base(),
            text_len: 40,
            fusion: EncoderDims::six_layer_base(),
            image_tokens,
            selection,
            convention: FlopsConvention::MacCount,
            split: SelectionCostSplit::WholeLayer,
        }
    }

    /// Visual token count for a square image at ViT-B/16 patching.
    pub fn tokens_for_image(image_size: usize) -> usize {
        let side = image_size / 16;
        side * side + 1
    }

    fn validate(&self) -> Result<()> {
        if self.image_tokens < 2 || self.text_len == 0 {
            return Err(KernelError::InvalidConfig {
                reason: "need at least 2 visual tokens and 1 text token".into(),
            });
        }
        for dims in [&self.vision, &self.text, &self.fusion] {
            if dims.layers == 0 || dims.width == 0 || dims.ffn_mult == 0 {
                return Err(KernelError::InvalidConfig {
                    reason: "encoder dims must be positive".into(),
                });
            }
        }
        self.selection.validate(self.vision.layers)
    }
}

/// Cost of one run, broken down by component.
#[derive(Clone, Debug, Serialize)]
pub struct CostReport {
    /// Visual sequence length at the end of each vision layer.
    pub lengths: Vec<usize>,
    pub vision_flops: u128,
    pub text_flops: u128,
    pub fusion_flops: u128,
    pub total_flops: u128,
    /// `round(100 * product of keep rates)`.
    pub overall_keep_rate: u32,
    pub convention: FlopsConvention,
    /// `total / baseline_total`, when the report was built against one.
    pub baseline_ratio: Option<f64>,
}

impl CostReport {
    pub fn gflops(&self) -> f64 {
        self.total_flops as f64 / 1e9
    }
}

/// Per-layer visual sequence lengths. The reported length of a selection
/// layer is the reduced one: the reduction lands between that layer's
/// attention and FFN, so the layer ends (and its FFN runs) at the new
/// length while its attention saw the old one.
pub fn token_schedule(n0: usize, selection: &SelectionConfig, layers: usize) -> Result<Vec<usize>> {
    selection.validate(layers)?;
    if n0 < 2 {
        return Err(KernelError::InvalidConfig {
            reason: format!("initial length {n0} below CLS + 1 patch"),
        });
    }
    let mut out = Vec::with_capacity(layers);
    let mut cur = n0;
    for layer in 1..=layers {
        if let Some(rate) = selection.rate_at(layer) {
            let candidates = cur - 1;
            cur = keep_count(candidates, rate) + 2;
        }
        out.push(cur);
    }
    Ok(out)
}

/// `round(100 * product of keep rates)` as an integer percentage.
pub fn overall_keep_rate(rates: &[f64]) -> u32 {
    let product: f64 = rates.iter().product();
    (100.0 * product).round() as u32
}

/// MACs of one self-attention encoder layer at sequence length `n`:
/// `4 n d^2` for the Q/K/V/output projections, `2 n^2 d` for the score and
/// mixing products, and `2 m n d^2` for an `m`-fold FFN.
pub fn encoder_layer_flops(n: usize, d: usize, ffn_mult: usize, conv: FlopsConvention) -> u128 {
    let (n, d, m) = (n as u128, d as u128, ffn_mult as u128);
    conv.apply(4 * n * d * d + 2 * n * n * d + 2 * m * n * d * d)
}

fn encoder_sa_flops(n: usize, d: usize) -> u128 {
    let (n, d) = (n as u128, d as u128);
    4 * n * d * d + 2 * n * n * d
}

fn encoder_ffn_flops(n: usize, d: usize, ffn_mult: usize) -> u128 {
    2 * (ffn_mult as u128) * (n as u128) * (d as u128) * (d as u128)
}

/// MACs of one fusion layer: self-attention over the `nq` query tokens,
/// cross-attention with keys/values from `nk` tokens (`2 nq d^2` for the
/// query and output projections, `2 nk d^2` for K and V, `2 nq nk d` for
/// scores and mixing), and the FFN on the query side.
pub fn cross_layer_flops(
    nq: usize,
    nk: usize,
    d: usize,
    ffn_mult: usize,
    conv: FlopsConvention,
) -> Result<u128> {
    if nk == 0 || nq == 0 {
        return Err(KernelError::InvalidConfig {
            reason: format!("cross layer with nq={nq}, nk={nk}"),
        });
    }
    let (nq, nk, d, m) = (nq as u128, nk as u128, d as u128, ffn_mult as u128);
    let self_part = 4 * nq * d * d + 2 * nq * nq * d;
    let cross_part = 2 * nq * d * d + 2 * nk * d * d + 2 * nq * nk * d;
    let ffn = 2 * m * nq * d * d;
    Ok(conv.apply(self_part + cross_part + ffn))
}

/// Full-model cost: vision stack over the token schedule, text encoder at
/// its fixed length, and the fusion encoder keyed by the final visual
/// length.
pub fn model_flops(config: &CostConfig) -> Result<CostReport> {
    config.validate()?;
    let d = config.vision.width;
    let mult = config.vision.ffn_mult;
    let lengths = token_schedule(config.image_tokens, &config.selection, config.vision.layers)?;

    let mut vision_macs: u128 = 0;
    let mut prev = config.image_tokens;
    for (i, &len) in lengths.iter().enumerate() {
        let layer = i + 1;
        if config.selection.rate_at(layer).is_some() {
            match config.split {
                SelectionCostSplit::WholeLayer => {
                    vision_macs += encoder_layer_flops(len, d, mult, FlopsConvention::MacCount);
                }
                SelectionCostSplit::SaPreFfnPost => {
                    vision_macs += encoder_sa_flops(prev, d) + encoder_ffn_flops(len, d, mult);
                }
            }
        } else {
            vision_macs += encoder_layer_flops(len, d, mult, FlopsConvention::MacCount);
        }
        prev = len;
    }

    let text_macs = config.text.layers as u128
        * encoder_layer_flops(
            config.text_len,
            config.text.width,
            config.text.ffn_mult,
            FlopsConvention::MacCount,
        );

    let final_visual = *lengths.last().expect("at least one layer");
    let fusion_macs = config.fusion.layers as u128
        * cross_layer_flops(
            config.text_len,
            final_visual,
            config.fusion.width,
            config.fusion.ffn_mult,
            FlopsConvention::MacCount,
        )?;

    let total = vision_macs + text_macs + fusion_macs;
    Ok(CostReport {
        lengths,
        vision_flops: config.convention.apply(vision_macs),
        text_flops: config.convention.apply(text_macs),
        fusion_flops: config.convention.apply(fusion_macs),
        total_flops: config.convention.apply(total),
        overall_keep_rate: overall_keep_rate(&config.selection.rates),
        convention: config.convention,
        baseline_ratio: None,
    })
}

/// One sweep row: a selection schedule at an image size.
#[derive(Clone, Debug)]
pub struct SweepRow {
    pub label: String,
    pub locations: Vec<usize>,
    pub rates: Vec<f64>,
    pub image_size: usize,
}

/// Runs `model_flops` per row and attaches each row's ratio to the baseline
/// report.
pub fn sweep(baseline: &CostConfig, rows: &[SweepRow]) -> Result<Vec<CostReport>> {
    let base = model_flops(baseline)?;
    let mut out = Vec::with_capacity(rows.len());
    for row in rows {
        let config = CostConfig {
            image_tokens: CostConfig::tokens_for_image(row.image_size),
            selection: SelectionConfig::new(row.locations.clone(), row.rates.clone()),
            ..baseline.clone()
        };
        let mut report = model_flops(&config)?;
        report.baseline_ratio = Some(report.total_flops as f64 / base.total_flops as f64);
        out.push(report);
    }
    Ok(out)
}

/// Plain total-over-total ratio of two reports.
pub fn speedup_estimate(a: &CostReport, b: &CostReport) -> f64 {
    a.total_flops as f64 / b.total_flops as f64
}

/// Pretty-printed JSON for a batch of reports.
pub fn reports_to_json(reports: &[CostReport]) -> String {
    serde_json::to_string_pretty(reports).expect("reports serialize")
}
