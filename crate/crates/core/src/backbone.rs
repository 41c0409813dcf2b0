//! The assembled visual encoder: patch embedding, a stack of transformer
//! layers with selection layers at configured positions, the placement
//! formula, and the single-stream and toy fusion variants.
//!
//! Positional embeddings are added once at embedding time and are not
//! re-indexed after selection; surviving tokens keep the embedding they
//! received at layer zero, matching common token-pruning practice.

use crate::attention::{
    cross_attn_forward, ffn_block, sa_block, CrossAttnLayer, FfnBlock, MhsaLayer,
};
use crate::error::{KernelError, Result};
use crate::scalar::Real;
use crate::select::{
    multimodal_cls_scores, selection_layer_forward, GuidanceMode, GuidanceSource, Provenance,
    SelectionOutcome, TokenSequence,
};
use crate::tensor::{LinearLayer, SeededRng, Tensor};

/// Selection layer positions (1-based) and the keep rate at each.
#[derive(Clone, Debug, PartialEq)]
pub struct SelectionConfig {
    pub locations: Vec<usize>,
    pub rates: Vec<f64>,
}

impl SelectionConfig {
    pub fn none() -> Self {
        Self {
            locations: Vec::new(),
            rates: Vec::new(),
        }
    }

    pub fn new(locations: Vec<usize>, rates: Vec<f64>) -> Self {
        Self { locations, rates }
    }

    pub fn is_empty(&self) -> bool {
        self.locations.is_empty()
    }

    /// Keep rate at the given 1-based layer, if it is a selection layer.
    pub fn rate_at(&self, layer: usize) -> Option<f64> {
        self.locations
            .iter()
            .position(|&l| l == layer)
            .map(|i| self.rates[i])
    }

    pub fn validate(&self, layers: usize) -> Result<()> {
        if self.locations.len() != self.rates.len() {
            return Err(KernelError::InvalidConfig {
                reason: format!(
                    "{} locations but {} rates",
                    self.locations.len(),
                    self.rates.len()
                ),
            });
        }
        for w in self.locations.windows(2) {
            if w[1] <= w[0] {
                return Err(KernelError::InvalidConfig {
                    reason: "locations must be strictly increasing".into(),
                });
            }
        }
        for &l in &self.locations {
            if l == 0 || l > layers {
                return Err(KernelError::InvalidConfig {
                    reason: format!("location {l} outside 1..={layers}"),
                });
            }
        }
        for &r in &self.rates {
            if !(r > 0.0 && r <= 1.0) {
                return Err(KernelError::InvalidKeepRate { rate: r });
            }
        }
        Ok(())
    }
}

/// Full model configuration.
#[derive(Clone, Debug)]
pub struct ModelConfig {
    pub layers: usize,
    pub width: usize,
    pub heads: usize,
    pub patch_size: usize,
    pub image_size: usize,
    pub selection: SelectionConfig,
    pub mode: GuidanceMode,
    pub seed: u64,
}

impl ModelConfig {
    /// Desk-scale defaults used by the tests: 12 layers, width 64, 4 heads,
    /// 96x96 input (36 patches), selection at [5, 10] with rate 0.7.
    pub fn desk() -> Self {
        Self {
            layers: 12,
            width: 64,
            heads: 4,
            patch_size: 16,
            image_size: 96,
            selection: SelectionConfig::new(vec![5, 10], vec![0.7, 0.7]),
            mode: GuidanceMode::text_cls(),
            seed: 42,
        }
    }

    pub fn grid_side(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn patch_tokens(&self) -> usize {
        self.grid_side() * self.grid_side()
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.width == 0 || self.heads == 0 {
            return Err(KernelError::InvalidConfig {
                reason: "layers, width, and heads must be positive".into(),
            });
        }
        if self.width % self.heads != 0 {
            return Err(KernelError::InvalidConfig {
                reason: format!("width {} not divisible by {} heads", self.width, self.heads),
            });
        }
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(KernelError::InvalidConfig {
                reason: format!(
                    "image size {} not divisible by patch size {}",
                    self.image_size, self.patch_size
                ),
            });
        }
        self.selection.validate(self.layers)?;
        self.mode.validate()
    }
}

/// Uniform placement of `t` selection layers in an `L`-layer stack:
/// `s = floor(L / (t + 1))`, selection at layers `i*s + 1` for `i = 1..=t`.
///
/// Note `placement(12, 2)` gives `[5, 9]`, while the experimental default
/// used elsewhere in this crate is `[5, 10]`; the two disagree and both are
/// kept as stated.
pub fn placement(layers: usize, selectors: usize) -> Result<Vec<usize>> {
    if selectors == 0 {
        return Err(KernelError::InvalidConfig {
            reason: "need at least one selection layer".into(),
        });
    }
    if layers < selectors + 1 {
        return Err(KernelError::InvalidConfig {
            reason: format!("{selectors} selection layers need more than {layers} layers"),
        });
    }
    let s = layers / (selectors + 1);
    Ok((1..=selectors).map(|i| i * s + 1).collect())
}

/// Model weights: patch projection, positional and `[CLS]` embeddings, and
/// one (MHSA, FFN) pair per layer.
#[derive(Clone, Debug)]
pub struct SelectiveVit<T: Real = f64> {
    pub(crate) patch_proj: LinearLayer<T>,
    pub(crate) pos_embed: Tensor<T>,
    pub(crate) cls_embed: Tensor<T>,
    blocks: Vec<(MhsaLayer<T>, FfnBlock<T>)>,
    config: ModelConfig,
}

impl<T: Real> SelectiveVit<T> {
    /// Builds a model with Gaussian(0, 0.02^2)-initialized weights from the
    /// config seed.
    pub fn seeded(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = SeededRng::new(config.seed);
        let d = config.width;
        let scale = 0.02;
        let patch_dim = 3 * config.patch_size * config.patch_size;
        let patch_proj = LinearLayer::seeded(d, patch_dim, scale, &mut rng);
        let pos_embed = crate::tensor::seeded_init(
            &[1 + config.patch_tokens(), d],
            T::from_f64_lossy(scale),
            &mut rng,
        );
        let cls_embed = crate::tensor::seeded_init(&[d], T::from_f64_lossy(scale), &mut rng);
        let mut blocks = Vec::with_capacity(config.layers);
        for _ in 0..config.layers {
            blocks.push((
                MhsaLayer::seeded(d, config.heads, scale, &mut rng)?,
                FfnBlock::seeded(d, scale, &mut rng)?,
            ));
        }
        Ok(Self {
            patch_proj,
            pos_embed,
            cls_embed,
            blocks,
            config,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn blocks(&self) -> &[(MhsaLayer<T>, FfnBlock<T>)] {
        &self.blocks
    }
}

/// One selection event inside a trace.
#[derive(Clone, Debug)]
pub struct SelectionRecord<T: Real = f64> {
    /// 1-based layer index.
    pub layer: usize,
    /// Sequence length entering the layer.
    pub n_before: usize,
    /// Sequence length after reconstruction.
    pub n_after: usize,
    pub outcome: SelectionOutcome<T>,
    /// Grid cells whose original patch token is still alive after this
    /// event, row-major over `grid`.
    pub grid_mask: Vec<bool>,
    pub grid: (usize, usize),
}

/// Per-layer lengths and the selection events of one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardTrace<T: Real = f64> {
    /// Sequence length at the end of each layer (the length its FFN ran at).
    pub lengths: Vec<usize>,
    pub selections: Vec<SelectionRecord<T>>,
}

impl<T: Real> ForwardTrace<T> {
    pub fn selection_at(&self, layer: usize) -> Option<&SelectionRecord<T>> {
        self.selections.iter().find(|r| r.layer == layer)
    }
}

fn grid_mask_of<T: Real>(seq: &TokenSequence<T>) -> Vec<bool> {
    let (rows, cols) = seq.grid();
    let mut mask = vec![false; rows * cols];
    for p in seq.provenance() {
        if let Provenance::GridPatch { row, col } = p {
            mask[row * cols + col] = true;
        }
    }
    mask
}

/// Splits a flat [3, H, W] image into non-overlapping `patch` x `patch`
/// blocks, flattened channel-major in raster order.
fn patch_vectors<T: Real>(image: &Tensor<T>, patch: usize) -> Result<Vec<Vec<T>>> {
    let shape = image.shape();
    if shape.len() != 3 || shape[0] != 3 {
        return Err(KernelError::BadOperand {
            op: "patch_embed",
            reason: format!("expected [3, H, W] image, got {shape:?}"),
        });
    }
    let (h, w) = (shape[1], shape[2]);
    if h % patch != 0 || w % patch != 0 {
        return Err(KernelError::BadOperand {
            op: "patch_embed",
            reason: format!("{h}x{w} image not divisible into {patch}x{patch} patches"),
        });
    }
    let data = image.data();
    let plane = h * w;
    let mut out = Vec::with_capacity((h / patch) * (w / patch));
    for py in 0..h / patch {
        for px in 0..w / patch {
            let mut v = Vec::with_capacity(3 * patch * patch);
            for c in 0..3 {
                for dy in 0..patch {
                    let base = c * plane + (py * patch + dy) * w + px * patch;
                    v.extend_from_slice(&data[base..base + patch]);
                }
            }
            out.push(v);
        }
    }
    Ok(out)
}

/// Embeds an image: patches are flattened, linearly projected, the `[CLS]`
/// embedding is prepended, and positional embeddings are added. Provenance
/// records the grid coordinate of every patch token in raster order.
pub fn patch_embed<T: Real>(
    image: &Tensor<T>,
    model: &SelectiveVit<T>,
) -> Result<TokenSequence<T>> {
    let cfg = &model.config;
    let patches = patch_vectors(image, cfg.patch_size)?;
    let side_h = image.shape()[1] / cfg.patch_size;
    let side_w = image.shape()[2] / cfg.patch_size;
    if patches.len() != cfg.patch_tokens() {
        return Err(KernelError::InvalidConfig {
            reason: format!(
                "image yields {} patches but the model embeds {}",
                patches.len(),
                cfg.patch_tokens()
            ),
        });
    }
    let d = cfg.width;
    let flat = Tensor::from_rows(&patches)?;
    let projected = crate::tensor::linear_apply(&model.patch_proj, &flat)?;
    let mut data = Vec::with_capacity((patches.len() + 1) * d);
    data.extend_from_slice(model.cls_embed.data());
    data.extend_from_slice(projected.data());
    let mut tokens = Tensor::new(vec![patches.len() + 1, d], data)?;
    tokens = tokens.add(&model.pos_embed)?;
    let mut provenance = vec![Provenance::Cls];
    for i in 0..patches.len() {
        provenance.push(Provenance::GridPatch {
            row: i / side_w,
            col: i % side_w,
        });
    }
    TokenSequence::new(tokens, provenance, (side_h, side_w))
}

/// Runs the layer stack. Selection layers (per the config) apply the
/// scoring mode; other layers are plain attention + FFN blocks. `guidance`
/// is required in text-cls mode unless text scoring is ablated.
pub fn forward<T: Real>(
    model: &SelectiveVit<T>,
    seq: &TokenSequence<T>,
    guidance: Option<&Tensor<T>>,
) -> Result<(TokenSequence<T>, ForwardTrace<T>)> {
    let cfg = &model.config;
    cfg.validate()?;
    if cfg.mode.source == GuidanceSource::MultimodalCls {
        return Err(KernelError::InvalidConfig {
            reason: "multimodal-cls mode runs through single_stream_forward".into(),
        });
    }
    let needs_guidance = cfg.mode.source == GuidanceSource::TextCls && !cfg.mode.disable_td_att;
    if needs_guidance && guidance.is_none() {
        return Err(KernelError::MissingGuidance);
    }
    let mut cur = seq.clone();
    let mut trace = ForwardTrace {
        lengths: Vec::with_capacity(cfg.layers),
        selections: Vec::new(),
    };
    for layer in 1..=cfg.layers {
        match cfg.selection.rate_at(layer) {
            Some(rate) => {
                let n_before = cur.len();
                let (mhsa, ffn) = &model.blocks[layer - 1];
                let (next, outcome, _maps) =
                    selection_layer_forward(mhsa, ffn, &cur, guidance, rate, cfg.mode)?;
                let record = SelectionRecord {
                    layer,
                    n_before,
                    n_after: next.len(),
                    outcome,
                    grid_mask: grid_mask_of(&next),
                    grid: next.grid(),
                };
                trace.selections.push(record);
                cur = next;
            }
            None => {
                let (mhsa, ffn) = &model.blocks[layer - 1];
                let (v_post, _) = sa_block(mhsa, cur.tokens())?;
                let out = ffn_block(ffn, &v_post)?;
                cur = cur.with_tokens(out)?;
            }
        }
        trace.lengths.push(cur.len());
    }
    Ok((cur, trace))
}

/// Single-stream forward: one sequence `[CLS, text.., image..]` runs through
/// the stack; selection layers score only the image positions from the
/// global `[CLS]` attention, text tokens and `[CLS]` are always kept, and the
/// fused token is appended to the image segment.
pub fn single_stream_forward<T: Real>(
    model: &SelectiveVit<T>,
    text_tokens: &Tensor<T>,
    image_seq: &TokenSequence<T>,
) -> Result<(TokenSequence<T>, ForwardTrace<T>)> {
    let cfg = &model.config;
    cfg.validate()?;
    if cfg.mode.source != GuidanceSource::MultimodalCls {
        return Err(KernelError::InvalidConfig {
            reason: "single-stream forward requires the multimodal-cls mode".into(),
        });
    }
    if text_tokens.rank() != 2 || text_tokens.cols() != cfg.width {
        return Err(KernelError::ShapeMismatch {
            op: "single_stream_forward",
            lhs: text_tokens.shape().to_vec(),
            rhs: vec![cfg.width],
        });
    }
    let m = text_tokens.rows();
    let d = cfg.width;

    // One stream: global CLS (reusing the image CLS slot), text, patches.
    let img = image_seq.tokens();
    let mut data = Vec::with_capacity((image_seq.len() + m) * d);
    let mut provenance = Vec::with_capacity(image_seq.len() + m);
    data.extend_from_slice(img.row(0));
    provenance.push(Provenance::Cls);
    for i in 0..m {
        data.extend_from_slice(text_tokens.row(i));
        provenance.push(Provenance::Text { index: i });
    }
    for i in 1..image_seq.len() {
        data.extend_from_slice(img.row(i));
        provenance.push(image_seq.provenance()[i]);
    }
    let tokens = Tensor::new(vec![image_seq.len() + m, d], data)?;
    let mut cur = TokenSequence::new(tokens, provenance, image_seq.grid())?;

    let mut trace = ForwardTrace {
        lengths: Vec::with_capacity(cfg.layers),
        selections: Vec::new(),
    };
    for layer in 1..=cfg.layers {
        let (mhsa, ffn) = &model.blocks[layer - 1];
        let (v_post, maps) = sa_block(mhsa, cur.tokens())?;
        match cfg.selection.rate_at(layer) {
            Some(rate) => {
                let n_before = cur.len();
                let image_positions: Vec<usize> = cur
                    .provenance()
                    .iter()
                    .enumerate()
                    .filter(|(_, p)| matches!(p, Provenance::GridPatch { .. } | Provenance::Fused))
                    .map(|(i, _)| i)
                    .collect();
                let n = image_positions.len();
                if n < 2 {
                    return Err(KernelError::TooFewTokens { n });
                }
                let scores = multimodal_cls_scores(&maps, &image_positions)?;
                let k = crate::select::keep_count(n, rate);
                let kept_rel = crate::tensor::top_k_indices(&scores, k)?;
                let mut kept_set = vec![false; n];
                for &i in &kept_rel {
                    kept_set[i] = true;
                }
                let mut fused = vec![T::zero(); d];
                let mut fused_mass = T::zero();
                for (rel, &abs) in image_positions.iter().enumerate() {
                    if !kept_set[rel] {
                        let w = scores.data()[rel];
                        fused_mass += w;
                        for (f, &v) in fused.iter_mut().zip(v_post.row(abs)) {
                            *f += w * v;
                        }
                    }
                }
                let disable_fusion = cfg.mode.disable_fusion;
                let out_len = 1 + m + k + usize::from(!disable_fusion);
                let mut ndata = Vec::with_capacity(out_len * d);
                let mut nprov = Vec::with_capacity(out_len);
                ndata.extend_from_slice(v_post.row(0));
                nprov.push(Provenance::Cls);
                for i in 0..cur.len() {
                    if matches!(cur.provenance()[i], Provenance::Text { .. }) {
                        ndata.extend_from_slice(v_post.row(i));
                        nprov.push(cur.provenance()[i]);
                    }
                }
                for &rel in &kept_rel {
                    let abs = image_positions[rel];
                    ndata.extend_from_slice(v_post.row(abs));
                    nprov.push(cur.provenance()[abs]);
                }
                if !disable_fusion {
                    ndata.extend_from_slice(&fused);
                    nprov.push(Provenance::Fused);
                }
                let selected =
                    TokenSequence::new(Tensor::new(vec![out_len, d], ndata)?, nprov, cur.grid())?;
                let out = ffn_block(ffn, selected.tokens())?;
                let next = selected.with_tokens(out)?;
                trace.selections.push(SelectionRecord {
                    layer,
                    n_before,
                    n_after: next.len(),
                    outcome: SelectionOutcome {
                        scores,
                        kept_indices: kept_rel,
                        fused_mass,
                        k,
                        n,
                    },
                    grid_mask: grid_mask_of(&next),
                    grid: next.grid(),
                });
                cur = next;
            }
            None => {
                let out = ffn_block(ffn, &v_post)?;
                cur = cur.with_tokens(out)?;
            }
        }
        trace.lengths.push(cur.len());
    }
    Ok((cur, trace))
}

/// Toy fusion encoder: text rows are the queries, the reduced visual
/// sequence provides keys/values, and the layers apply in order. Row 0 of
/// the result is the multimodal `[CLS]`.
pub fn fuse_toy<T: Real>(
    text_seq: &Tensor<T>,
    visual_out: &TokenSequence<T>,
    fusion_layers: &[CrossAttnLayer<T>],
) -> Result<Tensor<T>> {
    let mut cur = text_seq.clone();
    for layer in fusion_layers {
        cur = cross_attn_forward(layer, &cur, visual_out.tokens())?;
    }
    Ok(cur)
}
