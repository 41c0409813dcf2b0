//! Text-aware patch scoring, top-k selection, and inattentive token fusion.
//!
//! A selection layer sits between the self-attention and FFN sub-blocks of
//! a transformer layer. Scores over patch tokens come from one of three
//! guidance sources; the `k = floor(n*r)` best-scored tokens are kept in
//! their original order, and the rest collapse into a single fused token by
//! a score-weighted sum whose weights are deliberately *not* renormalized,
//! so the fused token carries total mass below one.

use crate::attention::{ffn_block, sa_block, AttnMaps, FfnBlock, MhsaLayer};
use crate::error::{KernelError, Result};
use crate::scalar::Real;
use crate::tensor::{linear_apply, softmax_rows, top_k_indices, LinearLayer, Tensor};

/// Which `[CLS]` source drives the scores.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GuidanceSource {
    /// Text `[CLS]` projected through the layer's shared query projection
    /// (dual-stream operation).
    TextCls,
    /// Image `[CLS]` attention row, for text-free or generative operation.
    ImageCls,
    /// Global `[CLS]` attention restricted to image positions
    /// (single-stream operation).
    MultimodalCls,
}

/// Guidance source plus the two ablation switches.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GuidanceMode {
    pub source: GuidanceSource,
    /// Drop inattentive tokens instead of fusing them.
    pub disable_fusion: bool,
    /// Score by the image `[CLS]` row even under `TextCls`; only meaningful
    /// there.
    pub disable_td_att: bool,
}

impl GuidanceMode {
    pub fn text_cls() -> Self {
        Self {
            source: GuidanceSource::TextCls,
            disable_fusion: false,
            disable_td_att: false,
        }
    }

    pub fn image_cls() -> Self {
        Self {
            source: GuidanceSource::ImageCls,
            disable_fusion: false,
            disable_td_att: false,
        }
    }

    pub fn multimodal_cls() -> Self {
        Self {
            source: GuidanceSource::MultimodalCls,
            disable_fusion: false,
            disable_td_att: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.disable_td_att && self.source != GuidanceSource::TextCls {
            return Err(KernelError::InvalidConfig {
                reason: "disable_td_att only applies to the text-cls source".into(),
            });
        }
        Ok(())
    }
}

/// Origin of a token in a sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Provenance {
    /// The `[CLS]` summary slot, always row 0.
    Cls,
    /// A patch from the original grid, raster coordinates.
    GridPatch { row: usize, col: usize },
    /// The fused remainder of a selection event.
    Fused,
    /// A text token of a single-stream sequence.
    Text { index: usize },
}

/// Token matrix plus per-token origin tags and the source grid dimensions.
#[derive(Clone, Debug)]
pub struct TokenSequence<T: Real = f64> {
    tokens: Tensor<T>,
    provenance: Vec<Provenance>,
    grid: (usize, usize),
}

impl<T: Real> TokenSequence<T> {
    pub fn new(
        tokens: Tensor<T>,
        provenance: Vec<Provenance>,
        grid: (usize, usize),
    ) -> Result<Self> {
        if tokens.rank() != 2 || tokens.rows() != provenance.len() {
            return Err(KernelError::BadOperand {
                op: "token_sequence",
                reason: format!(
                    "{} provenance tags for {:?} tokens",
                    provenance.len(),
                    tokens.shape()
                ),
            });
        }
        if provenance.first() != Some(&Provenance::Cls)
            || provenance.iter().skip(1).any(|p| *p == Provenance::Cls)
        {
            return Err(KernelError::BadOperand {
                op: "token_sequence",
                reason: "exactly one Cls tag, at row 0".into(),
            });
        }
        for p in &provenance {
            if let Provenance::GridPatch { row, col } = p {
                if *row >= grid.0 || *col >= grid.1 {
                    return Err(KernelError::BadOperand {
                        op: "token_sequence",
                        reason: format!("grid patch ({row},{col}) outside {grid:?}"),
                    });
                }
            }
        }
        Ok(Self {
            tokens,
            provenance,
            grid,
        })
    }

    pub fn tokens(&self) -> &Tensor<T> {
        &self.tokens
    }

    pub fn provenance(&self) -> &[Provenance] {
        &self.provenance
    }

    pub fn grid(&self) -> (usize, usize) {
        self.grid
    }

    /// Total length including the `[CLS]` slot.
    pub fn len(&self) -> usize {
        self.provenance.len()
    }

    pub fn is_empty(&self) -> bool {
        self.provenance.is_empty()
    }

    /// Candidate patch tokens, i.e. everything but `[CLS]`.
    pub fn patch_count(&self) -> usize {
        self.len() - 1
    }

    /// Same provenance/grid with replaced token values (used after FFN).
    pub fn with_tokens(&self, tokens: Tensor<T>) -> Result<Self> {
        Self::new(tokens, self.provenance.clone(), self.grid)
    }
}

/// Result of one selection event over `n` candidates.
#[derive(Clone, Debug)]
pub struct SelectionOutcome<T: Real = f64> {
    /// Score distribution over the candidate patch tokens; sums to one.
    pub scores: Tensor<T>,
    /// Kept candidate indices, ascending.
    pub kept_indices: Vec<usize>,
    /// Total score mass of the inattentive set.
    pub fused_mass: T,
    pub k: usize,
    pub n: usize,
}

/// Keep-count rounding rule. `Floor` is the default everywhere; `Nearest`
/// exists for experimentation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum KeepRounding {
    Floor,
    Nearest,
}

/// `k = floor(n*r)` clamped to at least one token.
pub fn keep_count(n: usize, rate: f64) -> usize {
    keep_count_with(n, rate, KeepRounding::Floor)
}

pub fn keep_count_with(n: usize, rate: f64, rounding: KeepRounding) -> usize {
    let raw = n as f64 * rate;
    let k = match rounding {
        KeepRounding::Floor => raw.floor() as usize,
        KeepRounding::Nearest => raw.round() as usize,
    };
    k.clamp(1, n)
}

fn rate_valid(rate: f64) -> Result<()> {
    if !(rate > 0.0 && rate <= 1.0) {
        return Err(KernelError::InvalidKeepRate { rate });
    }
    Ok(())
}

/// Text-guided scores: the text `[CLS]` embedding goes through the layer's
/// shared query projection and is dotted against the raw post-SA tokens
/// (no key projection), scaled by `1/sqrt(d)` with `d` the full model
/// width, then softmaxed over the patch tokens (the `[CLS]` column is
/// excluded). The key-projected reading is available as
/// [`td_att_scores_key_projected`].
pub fn td_att_scores<T: Real>(
    t_cls: &Tensor<T>,
    v_post: &Tensor<T>,
    wq_shared: &LinearLayer<T>,
) -> Result<Tensor<T>> {
    td_att_logit_scores(t_cls, v_post, wq_shared, None)
}

/// Variant that dots the projected text query against key-projected tokens
/// instead of the raw ones.
pub fn td_att_scores_key_projected<T: Real>(
    t_cls: &Tensor<T>,
    v_post: &Tensor<T>,
    wq_shared: &LinearLayer<T>,
    wk: &LinearLayer<T>,
) -> Result<Tensor<T>> {
    td_att_logit_scores(t_cls, v_post, wq_shared, Some(wk))
}

fn td_att_logit_scores<T: Real>(
    t_cls: &Tensor<T>,
    v_post: &Tensor<T>,
    wq_shared: &LinearLayer<T>,
    wk: Option<&LinearLayer<T>>,
) -> Result<Tensor<T>> {
    let d = v_post.cols();
    if t_cls.len() != d || t_cls.rank() > 2 {
        return Err(KernelError::ShapeMismatch {
            op: "td_att_scores",
            lhs: t_cls.shape().to_vec(),
            rhs: vec![d],
        });
    }
    let n = v_post.rows().saturating_sub(1);
    if n == 0 {
        return Err(KernelError::TooFewTokens { n: 0 });
    }
    let q_text = linear_apply(wq_shared, &t_cls.reshape(vec![1, d])?)?;
    let patches = v_post.gather_rows(&(1..=n).collect::<Vec<_>>())?;
    let keys = match wk {
        Some(wk) => linear_apply(wk, &patches)?,
        None => patches,
    };
    let scale = T::one() / T::from_f64_lossy(d as f64).sqrt();
    let logits = crate::tensor::matmul(&q_text, &keys.transpose()?)?.scale(scale)?;
    softmax_rows(&logits)?.reshape(vec![n])
}

/// Scores from the image `[CLS]` attention: the `[CLS]` query row of each head
/// with the `[CLS]` column dropped, averaged across heads and renormalized to
/// sum one.
pub fn image_cls_scores<T: Real>(maps: &AttnMaps<T>) -> Result<Tensor<T>> {
    let heads = maps.heads();
    if heads.is_empty() {
        return Err(KernelError::BadOperand {
            op: "image_cls_scores",
            reason: "no heads".into(),
        });
    }
    let nk = heads[0].cols();
    if nk < 2 {
        return Err(KernelError::TooFewTokens {
            n: nk.saturating_sub(1),
        });
    }
    let mut acc = vec![T::zero(); nk - 1];
    for map in heads {
        let row = map.row(0);
        for (a, &v) in acc.iter_mut().zip(&row[1..]) {
            *a += v;
        }
    }
    let total = acc.iter().fold(T::zero(), |a, &v| a + v);
    if total == T::zero() {
        return Err(KernelError::DegenerateGuidance);
    }
    Tensor::new(vec![nk - 1], acc.iter().map(|&v| v / total).collect())
}

/// Scores from a global `[CLS]` over a mixed stream, restricted to the given
/// image-token columns, head-averaged and renormalized. Text tokens are
/// never scored. Errors with [`KernelError::DegenerateGuidance`] when the
/// restricted mass is exactly zero.
pub fn multimodal_cls_scores<T: Real>(
    maps: &AttnMaps<T>,
    image_positions: &[usize],
) -> Result<Tensor<T>> {
    let heads = maps.heads();
    if heads.is_empty() || image_positions.is_empty() {
        return Err(KernelError::BadOperand {
            op: "multimodal_cls_scores",
            reason: "no heads or no image positions".into(),
        });
    }
    let nk = heads[0].cols();
    let mut acc = vec![T::zero(); image_positions.len()];
    for map in heads {
        let row = map.row(0);
        for (a, &pos) in acc.iter_mut().zip(image_positions) {
            if pos >= nk {
                return Err(KernelError::BadOperand {
                    op: "multimodal_cls_scores",
                    reason: format!("image position {pos} out of {nk}"),
                });
            }
            *a += row[pos];
        }
    }
    let total = acc.iter().fold(T::zero(), |a, &v| a + v);
    if total == T::zero() {
        return Err(KernelError::DegenerateGuidance);
    }
    Tensor::new(
        vec![image_positions.len()],
        acc.iter().map(|&v| v / total).collect(),
    )
}

/// Splits candidates into kept and inattentive sets and fuses the latter.
///
/// Keeps the `k = floor(n*r)` top-scored patch tokens in their original
/// order and appends one fused token `sum_i scores[z_i] * token[z_i]` over
/// the inattentive set; output layout is `[CLS, kept.., fused]`. With
/// `disable_fusion` the fused token is omitted. When `k = n` the
/// inattentive set is empty and the fused token is the zero vector, still
/// appended so the length arithmetic stays uniform.
pub fn select_and_fuse<T: Real>(
    seq: &TokenSequence<T>,
    scores: &Tensor<T>,
    rate: f64,
    disable_fusion: bool,
) -> Result<(TokenSequence<T>, SelectionOutcome<T>)> {
    rate_valid(rate)?;
    let n = seq.patch_count();
    if n < 2 {
        return Err(KernelError::TooFewTokens { n });
    }
    if scores.len() != n {
        return Err(KernelError::ShapeMismatch {
            op: "select_and_fuse",
            lhs: scores.shape().to_vec(),
            rhs: vec![n],
        });
    }
    let k = keep_count(n, rate);
    let kept = top_k_indices(scores, k)?;
    let kept_set: Vec<bool> = {
        let mut mask = vec![false; n];
        for &i in &kept {
            mask[i] = true;
        }
        mask
    };
    let inattentive: Vec<usize> = (0..n).filter(|&i| !kept_set[i]).collect();

    let d = seq.tokens().cols();
    let mut fused = vec![T::zero(); d];
    let mut fused_mass = T::zero();
    for &z in &inattentive {
        let w = scores.data()[z];
        fused_mass += w;
        for (f, &v) in fused.iter_mut().zip(seq.tokens().row(z + 1)) {
            *f += w * v;
        }
    }

    let out_len = 1 + k + usize::from(!disable_fusion);
    let mut data = Vec::with_capacity(out_len * d);
    let mut provenance = Vec::with_capacity(out_len);
    data.extend_from_slice(seq.tokens().row(0));
    provenance.push(Provenance::Cls);
    for &i in &kept {
        data.extend_from_slice(seq.tokens().row(i + 1));
        provenance.push(seq.provenance()[i + 1]);
    }
    if !disable_fusion {
        data.extend_from_slice(&fused);
        provenance.push(Provenance::Fused);
    }
    let tokens = Tensor::new(vec![out_len, d], data)?;
    let out = TokenSequence::new(tokens, provenance, seq.grid())?;
    Ok((
        out,
        SelectionOutcome {
            scores: scores.clone(),
            kept_indices: kept,
            fused_mass,
            k,
            n,
        },
    ))
}

/// Full patch-selection layer: self-attention sub-block, scoring in the
/// requested mode, select-and-fuse, then the FFN sub-block over the
/// reconstructed sequence (the fused token goes through the FFN with the
/// rest).
pub fn selection_layer_forward<T: Real>(
    mhsa: &MhsaLayer<T>,
    ffn: &FfnBlock<T>,
    seq: &TokenSequence<T>,
    guidance: Option<&Tensor<T>>,
    rate: f64,
    mode: GuidanceMode,
) -> Result<(TokenSequence<T>, SelectionOutcome<T>, AttnMaps<T>)> {
    mode.validate()?;
    let (v_post, maps) = sa_block(mhsa, seq.tokens())?;
    let scores = match mode.source {
        GuidanceSource::TextCls if !mode.disable_td_att => {
            let t_cls = guidance.ok_or(KernelError::MissingGuidance)?;
            td_att_scores(t_cls, &v_post, &mhsa.wq)?
        }
        GuidanceSource::TextCls | GuidanceSource::ImageCls => image_cls_scores(&maps)?,
        GuidanceSource::MultimodalCls => {
            return Err(KernelError::InvalidConfig {
                reason: "multimodal-cls scoring needs a mixed stream; use the \
                         single-stream forward"
                    .into(),
            })
        }
    };
    let mid = seq.with_tokens(v_post)?;
    let (selected, outcome) = select_and_fuse(&mid, &scores, rate, mode.disable_fusion)?;
    let out_tokens = ffn_block(ffn, selected.tokens())?;
    Ok((selected.with_tokens(out_tokens)?, outcome, maps))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{seeded_init, SeededRng};

    fn grid_sequence(n: usize, d: usize, rng: &mut SeededRng) -> TokenSequence<f64> {
        let tokens = seeded_init(&[n + 1, d], 1.0, rng);
        let mut prov = vec![Provenance::Cls];
        for i in 0..n {
            prov.push(Provenance::GridPatch { row: 0, col: i });
        }
        TokenSequence::new(tokens, prov, (1, n)).unwrap()
    }

    #[test]
    fn td_att_uniform_for_identical_tokens() {
        let mut rng = SeededRng::new(1);
        let d = 8;
        let row: Vec<f64> = seeded_init::<f64>(&[d], 1.0, &mut rng).data().to_vec();
        let mut rows = vec![seeded_init::<f64>(&[d], 1.0, &mut rng).data().to_vec()];
        for _ in 0..5 {
            rows.push(row.clone());
        }
        let v_post = Tensor::from_rows(&rows).unwrap();
        let t_cls = seeded_init::<f64>(&[d], 1.0, &mut rng);
        let wq = LinearLayer::seeded(d, d, 0.5, &mut rng);
        let scores = td_att_scores(&t_cls, &v_post, &wq).unwrap();
        for &s in scores.data() {
            assert!((s - 0.2).abs() <= 1e-12);
        }
    }

    #[test]
    fn td_att_orthogonal_query_gives_uniform() {
        // Identity projection and a query orthogonal to every token row.
        let d = 4;
        let v_post = Tensor::<f64>::from_rows(&[
            vec![9.0, 9.0, 9.0, 9.0], // CLS, excluded
            vec![1.0, 0.0, 0.0, 0.0],
            vec![0.0, 1.0, 0.0, 0.0],
            vec![2.0, 3.0, 0.0, 0.0],
        ])
        .unwrap();
        let t_cls = Tensor::vector(vec![0.0, 0.0, 1.0, 1.0]).unwrap();
        let wq = LinearLayer::identity(d);
        let scores = td_att_scores(&t_cls, &v_post, &wq).unwrap();
        for &s in scores.data() {
            assert!((s - 1.0 / 3.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn td_att_matches_loop_oracle() {
        let mut rng = SeededRng::new(2);
        let (n, d) = (7, 8);
        let v_post = seeded_init::<f64>(&[n + 1, d], 1.0, &mut rng);
        let t_cls = seeded_init::<f64>(&[d], 1.0, &mut rng);
        let wq = LinearLayer::seeded(d, d, 0.5, &mut rng);
        let scores = td_att_scores(&t_cls, &v_post, &wq).unwrap();

        let q = linear_apply(&wq, &t_cls).unwrap();
        let mut logits = vec![0.0; n];
        for (i, l) in logits.iter_mut().enumerate() {
            let mut dot = 0.0;
            for c in 0..d {
                dot += q.data()[c] * v_post.at(i + 1, c);
            }
            *l = dot / (d as f64).sqrt();
        }
        let sum: f64 = logits.iter().map(|l| l.exp()).sum();
        for i in 0..n {
            let want = logits[i].exp() / sum;
            assert!((scores.data()[i] - want).abs() <= 1e-12);
        }
    }

    #[test]
    fn td_att_key_projected_variant() {
        let mut rng = SeededRng::new(21);
        let (n, d) = (6, 8);
        let v_post = seeded_init::<f64>(&[n + 1, d], 1.0, &mut rng);
        let t_cls = seeded_init::<f64>(&[d], 1.0, &mut rng);
        let wq = LinearLayer::seeded(d, d, 0.5, &mut rng);
        let wk = LinearLayer::seeded(d, d, 0.5, &mut rng);
        let projected = td_att_scores_key_projected(&t_cls, &v_post, &wq, &wk).unwrap();
        // Still a distribution over the patch tokens.
        let sum: f64 = projected.data().iter().sum();
        assert!((sum - 1.0).abs() <= 1e-12);
        // Identity keys collapse to the literal form.
        let literal = td_att_scores(&t_cls, &v_post, &wq).unwrap();
        let via_identity =
            td_att_scores_key_projected(&t_cls, &v_post, &wq, &LinearLayer::identity(d)).unwrap();
        assert_eq!(literal, via_identity);
        assert_ne!(literal, projected);
    }

    #[test]
    fn keep_count_rounding_modes() {
        assert_eq!(keep_count(576, 0.7), 403);
        assert_eq!(keep_count_with(576, 0.7, KeepRounding::Nearest), 403);
        assert_eq!(keep_count(10, 0.55), 5);
        assert_eq!(keep_count_with(10, 0.55, KeepRounding::Nearest), 6);
        // Floor never drops below one token.
        assert_eq!(keep_count(5, 0.01), 1);
        assert_eq!(keep_count_with(5, 0.01, KeepRounding::Nearest), 1);
    }

    #[test]
    fn td_att_dimension_mismatch() {
        let mut rng = SeededRng::new(3);
        let v_post = seeded_init::<f64>(&[4, 8], 1.0, &mut rng);
        let t_cls = seeded_init::<f64>(&[6], 1.0, &mut rng);
        let wq = LinearLayer::seeded(8, 8, 0.5, &mut rng);
        assert!(matches!(
            td_att_scores(&t_cls, &v_post, &wq),
            Err(KernelError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn image_cls_single_head_renormalizes() {
        // One head, 1+3 tokens; CLS row [0.4, 0.3, 0.2, 0.1].
        let map = Tensor::<f64>::from_rows(&[
            vec![0.4, 0.3, 0.2, 0.1],
            vec![0.25; 4],
            vec![0.25; 4],
            vec![0.25; 4],
        ])
        .unwrap();
        let maps = crate::attention::AttnMaps::from_heads(vec![map]).unwrap();
        let scores = image_cls_scores(&maps).unwrap();
        let want = [0.3 / 0.6, 0.2 / 0.6, 0.1 / 0.6];
        for (s, w) in scores.data().iter().zip(want) {
            assert!((s - w).abs() <= 1e-12);
        }
    }

    #[test]
    fn image_cls_two_identical_heads_match_one() {
        let map = Tensor::<f64>::from_rows(&[
            vec![0.1, 0.5, 0.4],
            vec![1.0 / 3.0; 3],
            vec![1.0 / 3.0; 3],
        ])
        .unwrap();
        let one =
            image_cls_scores(&crate::attention::AttnMaps::from_heads(vec![map.clone()]).unwrap())
                .unwrap();
        let two = image_cls_scores(
            &crate::attention::AttnMaps::from_heads(vec![map.clone(), map]).unwrap(),
        )
        .unwrap();
        for (a, b) in one.data().iter().zip(two.data()) {
            assert!((a - b).abs() <= 1e-15);
        }
    }

    #[test]
    fn image_cls_matches_per_head_average_oracle() {
        let mut rng = SeededRng::new(4);
        let layer = crate::attention::MhsaLayer::seeded(8, 2, 0.5, &mut rng).unwrap();
        let x = seeded_init::<f64>(&[5, 8], 1.0, &mut rng);
        let (_, maps) = crate::attention::mhsa_forward(&layer, &x).unwrap();
        let scores = image_cls_scores(&maps).unwrap();
        let mut acc = [0.0; 4];
        for m in maps.heads() {
            for j in 0..4 {
                acc[j] += m.at(0, j + 1);
            }
        }
        let z: f64 = acc.iter().sum();
        for j in 0..4 {
            assert!((scores.data()[j] - acc[j] / z).abs() <= 1e-12);
        }
        let total: f64 = scores.data().iter().sum();
        assert!((total - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn multimodal_restriction_and_degenerate() {
        // Hand-built map rows: CLS row puts mass only on text columns 1..3.
        let map = Tensor::<f64>::from_rows(&[
            vec![0.5, 0.25, 0.25, 0.0, 0.0],
            vec![0.2; 5],
            vec![0.2; 5],
            vec![0.2; 5],
            vec![0.2; 5],
        ])
        .unwrap();
        let maps = crate::attention::AttnMaps::from_heads(vec![map]).unwrap();
        assert!(matches!(
            multimodal_cls_scores(&maps, &[3, 4]),
            Err(KernelError::DegenerateGuidance)
        ));
        // Single image column gets score one.
        let got = multimodal_cls_scores(&maps, &[1]).unwrap();
        assert_eq!(got.data(), &[1.0]);
        // Random maps against the restriction oracle.
        let mut rng = SeededRng::new(5);
        let layer = crate::attention::MhsaLayer::seeded(8, 2, 0.5, &mut rng).unwrap();
        let x = seeded_init::<f64>(&[6, 8], 1.0, &mut rng);
        let (_, maps) = crate::attention::mhsa_forward(&layer, &x).unwrap();
        let pos = [2usize, 4, 5];
        let got = multimodal_cls_scores(&maps, &pos).unwrap();
        let mut acc = vec![0.0; 3];
        for m in maps.heads() {
            for (a, &p) in acc.iter_mut().zip(&pos) {
                *a += m.at(0, p);
            }
        }
        let z: f64 = acc.iter().sum();
        for (g, a) in got.data().iter().zip(&acc) {
            assert!((g - a / z).abs() <= 1e-12);
        }
    }

    #[test]
    fn select_uniform_scores_keeps_first_half() {
        let mut rng = SeededRng::new(6);
        let seq = grid_sequence(4, 4, &mut rng);
        let scores = Tensor::vector(vec![0.25; 4]).unwrap();
        let (out, outcome) = select_and_fuse(&seq, &scores, 0.5, false).unwrap();
        assert_eq!(outcome.k, 2);
        assert_eq!(outcome.kept_indices, vec![0, 1]);
        assert_eq!(out.len(), 4); // CLS + 2 kept + fused
                                  // v_f = 0.25*(t3 + t4)
        for c in 0..4 {
            let want = 0.25 * (seq.tokens().at(3, c) + seq.tokens().at(4, c));
            assert!((out.tokens().at(3, c) - want).abs() <= 1e-15);
        }
        assert!((outcome.fused_mass - 0.5).abs() <= 1e-15);
    }

    #[test]
    fn select_hand_case_three_tokens() {
        let mut rng = SeededRng::new(7);
        let seq = grid_sequence(3, 4, &mut rng);
        let scores = Tensor::vector(vec![0.7, 0.2, 0.1]).unwrap();
        let (out, outcome) = select_and_fuse(&seq, &scores, 2.0 / 3.0, false).unwrap();
        assert_eq!(outcome.k, 2);
        assert_eq!(outcome.kept_indices, vec![0, 1]);
        assert!((outcome.fused_mass - 0.1).abs() <= 1e-15);
        for c in 0..4 {
            let want = 0.1 * seq.tokens().at(3, c);
            assert!((out.tokens().at(3, c) - want).abs() <= 1e-15);
        }
    }

    #[test]
    fn select_matches_brute_force_partition_oracle() {
        let mut rng = SeededRng::new(8);
        let n = 30;
        let seq = grid_sequence(n, 6, &mut rng);
        let logits = seeded_init::<f64>(&[n], 1.0, &mut rng);
        let scores = softmax_rows(&logits).unwrap();
        let (out, outcome) = select_and_fuse(&seq, &scores, 0.7, false).unwrap();

        // Oracle: sort score/index pairs, partition, recompute directly.
        let k = (n as f64 * 0.7).floor() as usize;
        let mut pairs: Vec<(usize, f64)> = scores.data().iter().cloned().enumerate().collect();
        pairs.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        let mut kept: Vec<usize> = pairs[..k].iter().map(|&(i, _)| i).collect();
        kept.sort_unstable();
        assert_eq!(outcome.kept_indices, kept);
        let mut fused = [0.0; 6];
        let mut mass = 0.0;
        for &(i, s) in &pairs[k..] {
            mass += s;
            for (f, &v) in fused.iter_mut().zip(seq.tokens().row(i + 1)) {
                *f += s * v;
            }
        }
        assert!((outcome.fused_mass - mass).abs() <= 1e-12);
        for c in 0..6 {
            assert!((out.tokens().at(k + 1, c) - fused[c]).abs() <= 1e-12);
        }
    }

    #[test]
    fn select_rejects_bad_rate_and_tiny_sequences() {
        let mut rng = SeededRng::new(9);
        let seq = grid_sequence(4, 4, &mut rng);
        let scores = Tensor::vector(vec![0.25; 4]).unwrap();
        assert!(matches!(
            select_and_fuse(&seq, &scores, 0.0, false),
            Err(KernelError::InvalidKeepRate { .. })
        ));
        assert!(matches!(
            select_and_fuse(&seq, &scores, 1.5, false),
            Err(KernelError::InvalidKeepRate { .. })
        ));
        let tiny = grid_sequence(1, 4, &mut rng);
        let s1 = Tensor::vector(vec![1.0]).unwrap();
        assert!(matches!(
            select_and_fuse(&tiny, &s1, 0.5, false),
            Err(KernelError::TooFewTokens { .. })
        ));
    }

    #[test]
    fn disable_fusion_drops_the_fused_slot() {
        let mut rng = SeededRng::new(10);
        let seq = grid_sequence(6, 4, &mut rng);
        let logits = seeded_init::<f64>(&[6], 1.0, &mut rng);
        let scores = softmax_rows(&logits).unwrap();
        let (out, outcome) = select_and_fuse(&seq, &scores, 0.5, true).unwrap();
        assert_eq!(out.len(), 1 + outcome.k);
        assert!(out
            .provenance()
            .iter()
            .all(|p| !matches!(p, Provenance::Fused)));
    }

    #[test]
    fn keep_all_appends_zero_fused_token() {
        let mut rng = SeededRng::new(11);
        let seq = grid_sequence(5, 4, &mut rng);
        let scores = Tensor::vector(vec![0.2; 5]).unwrap();
        let (out, outcome) = select_and_fuse(&seq, &scores, 1.0, false).unwrap();
        assert_eq!(outcome.k, 5);
        assert_eq!(out.len(), 7);
        assert!(out.tokens().row(6).iter().all(|&v| v == 0.0));
        assert_eq!(outcome.fused_mass, 0.0);
    }

    #[test]
    fn selection_layer_degenerate_keep_all_without_fusion_is_plain_layer() {
        let mut rng = SeededRng::new(12);
        let d = 8;
        let mhsa = MhsaLayer::seeded(d, 2, 0.4, &mut rng).unwrap();
        let ffn = FfnBlock::seeded(d, 0.4, &mut rng).unwrap();
        let seq = grid_sequence(5, d, &mut rng);
        let mode = GuidanceMode {
            source: GuidanceSource::TextCls,
            disable_fusion: true,
            disable_td_att: false,
        };
        let guidance = seeded_init::<f64>(&[d], 1.0, &mut rng);
        let (out, _, _) =
            selection_layer_forward(&mhsa, &ffn, &seq, Some(&guidance), 1.0, mode).unwrap();
        let (v_post, _) = sa_block(&mhsa, seq.tokens()).unwrap();
        let want = ffn_block(&ffn, &v_post).unwrap();
        assert_eq!(out.tokens(), &want);
        assert_eq!(out.len(), seq.len());
    }

    #[test]
    fn selection_layer_keep_all_with_fusion_appends_zero_vector_pre_ffn() {
        let mut rng = SeededRng::new(13);
        let d = 8;
        let mhsa = MhsaLayer::seeded(d, 2, 0.4, &mut rng).unwrap();
        let ffn = FfnBlock::seeded(d, 0.4, &mut rng).unwrap();
        let seq = grid_sequence(5, d, &mut rng);
        let guidance = seeded_init::<f64>(&[d], 1.0, &mut rng);
        let (out, outcome, _) = selection_layer_forward(
            &mhsa,
            &ffn,
            &seq,
            Some(&guidance),
            1.0,
            GuidanceMode::text_cls(),
        )
        .unwrap();
        assert_eq!(outcome.k, 5);
        assert_eq!(out.len(), 7);
        assert_eq!(out.provenance()[6], Provenance::Fused);
    }

    #[test]
    fn selection_layer_matches_step_by_step_composition() {
        let mut rng = SeededRng::new(14);
        let d = 8;
        let mhsa = MhsaLayer::seeded(d, 2, 0.4, &mut rng).unwrap();
        let ffn = FfnBlock::seeded(d, 0.4, &mut rng).unwrap();
        let seq = grid_sequence(6, d, &mut rng);
        let guidance = seeded_init::<f64>(&[d], 1.0, &mut rng);
        let (out, outcome, _) = selection_layer_forward(
            &mhsa,
            &ffn,
            &seq,
            Some(&guidance),
            0.5,
            GuidanceMode::text_cls(),
        )
        .unwrap();

        let (v_post, _) = sa_block(&mhsa, seq.tokens()).unwrap();
        let scores = td_att_scores(&guidance, &v_post, &mhsa.wq).unwrap();
        let mid = seq.with_tokens(v_post).unwrap();
        let (sel, want_outcome) = select_and_fuse(&mid, &scores, 0.5, false).unwrap();
        let want = ffn_block(&ffn, sel.tokens()).unwrap();
        assert_eq!(out.tokens(), &want);
        assert_eq!(outcome.kept_indices, want_outcome.kept_indices);
    }

    #[test]
    fn missing_guidance_is_an_error() {
        let mut rng = SeededRng::new(15);
        let d = 8;
        let mhsa = MhsaLayer::seeded(d, 2, 0.4, &mut rng).unwrap();
        let ffn = FfnBlock::seeded(d, 0.4, &mut rng).unwrap();
        let seq = grid_sequence(4, d, &mut rng);
        assert!(matches!(
            selection_layer_forward(&mhsa, &ffn, &seq, None, 0.5, GuidanceMode::text_cls()),
            Err(KernelError::MissingGuidance)
        ));
    }
}
