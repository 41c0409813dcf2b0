//! Shared property checks: each function runs `cases` seeded random
//! instances and panics with context on the first violation. The property
//! suite and the acceptance gate both drive these.

// Each integration test binary compiles this module separately and uses a
// different subset of it.
#![allow(dead_code)]

use patchsel::attention::{ffn_block, mhsa_forward, sa_block, FfnBlock, MhsaLayer};
use patchsel::backbone::{forward, patch_embed, ModelConfig, SelectionConfig, SelectiveVit};
use patchsel::cost::{
    model_flops, overall_keep_rate, speedup_estimate, token_schedule, CostConfig, FlopsConvention,
};
use patchsel::grad::{
    numeric_grad, tape_ffn_block, tape_ffn_weights, tape_mhsa_weights, tape_sa_block, Tape,
};
use patchsel::io::{synthetic_guidance, synthetic_image};
use patchsel::select::{select_and_fuse, GuidanceMode, Provenance, TokenSequence};
use patchsel::tensor::{matmul, seeded_init, softmax_rows, top_k_indices, SeededRng, Tensor};

pub fn rand_tensor(shape: &[usize], rng: &mut SeededRng) -> Tensor {
    seeded_init(shape, 1.0, rng)
}

fn permutation(n: usize, rng: &mut SeededRng) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = (rng.next_u64() % (i as u64 + 1)) as usize;
        p.swap(i, j);
    }
    p
}

fn grid_sequence(n: usize, d: usize, rng: &mut SeededRng) -> TokenSequence {
    let tokens = rand_tensor(&[n + 1, d], rng);
    let mut prov = vec![Provenance::Cls];
    for i in 0..n {
        prov.push(Provenance::GridPatch { row: 0, col: i });
    }
    TokenSequence::new(tokens, prov, (1, n)).unwrap()
}

fn random_scores(n: usize, rng: &mut SeededRng) -> Tensor {
    softmax_rows(&rand_tensor(&[n], rng)).unwrap()
}

// --- tensor-kernel invariants -----------------------------------------------

pub fn check_softmax_rows_sum_to_one(cases: usize, seed: u64) {
    let mut rng = SeededRng::new(seed);
    for case in 0..cases {
        let m = 1 + (rng.next_u64() % 6) as usize;
        let n = 1 + (rng.next_u64() % 12) as usize;
        let scale = 10.0_f64.powi((rng.next_u64() % 4) as i32);
        let x = rand_tensor(&[m, n], &mut rng).scale(scale).unwrap();
        let y = softmax_rows(&x).unwrap();
        for i in 0..m {
            let sum: f64 = y.row(i).iter().sum();
            assert!(
                (sum - 1.0).abs() <= 1e-12,
                "case {case}: row sum {sum} departs from 1"
            );
            assert!(y.row(i).iter().all(|&v| v >= 0.0));
        }
    }
}

pub fn check_top_k_full_and_monotone_invariant(cases: usize, seed: u64) {
    let mut rng = SeededRng::new(seed);
    for case in 0..cases {
        let n = 2 + (rng.next_u64() % 40) as usize;
        let scores = rand_tensor(&[n], &mut rng);
        // k = n returns every index.
        let all = top_k_indices(&scores, n).unwrap();
        assert_eq!(all, (0..n).collect::<Vec<_>>(), "case {case}");
        // Strictly increasing transforms preserve the selection.
        let k = 1 + (rng.next_u64() % n as u64) as usize;
        let base = top_k_indices(&scores, k).unwrap();
        let scaled =
            Tensor::vector(scores.data().iter().map(|&v| 2.5 * v + 1.25).collect()).unwrap();
        let cubed = Tensor::vector(scores.data().iter().map(|&v| v * v * v).collect()).unwrap();
        assert_eq!(
            base,
            top_k_indices(&scaled, k).unwrap(),
            "case {case}: affine"
        );
        assert_eq!(base, top_k_indices(&cubed, k).unwrap(), "case {case}: cube");
    }
}

pub fn check_matmul_associativity(cases: usize, seed: u64) {
    let mut rng = SeededRng::new(seed);
    for case in 0..cases {
        let m = 1 + (rng.next_u64() % 6) as usize;
        let k = 1 + (rng.next_u64() % 6) as usize;
        let p = 1 + (rng.next_u64() % 6) as usize;
        let q = 1 + (rng.next_u64() % 6) as usize;
        let a = rand_tensor(&[m, k], &mut rng);
        let b = rand_tensor(&[k, p], &mut rng);
        let c = rand_tensor(&[p, q], &mut rng);
        let left = matmul(&matmul(&a, &b).unwrap(), &c).unwrap();
        let right = matmul(&a, &matmul(&b, &c).unwrap()).unwrap();
        let norm = left.data().iter().map(|v| v.abs()).fold(1.0_f64, f64::max);
        for (l, r) in left.data().iter().zip(right.data()) {
            assert!(
                (l - r).abs() / norm <= 1e-9,
                "case {case}: associativity broke, {l} vs {r}"
            );
        }
    }
}

// --- attention invariants ------------------------------------------------------

pub fn check_attention_rows_and_key_permutation(cases: usize, seed: u64) {
    let mut rng = SeededRng::new(seed);
    for case in 0..cases {
        let d = 8;
        let h = 2;
        let n = 2 + (rng.next_u64() % 8) as usize;
        let layer = MhsaLayer::seeded(d, h, 0.5, &mut rng).unwrap();
        let x = rand_tensor(&[n, d], &mut rng);
        let (_, maps) = mhsa_forward(&layer, &x).unwrap();
        for map in maps.heads() {
            for i in 0..n {
                let sum: f64 = map.row(i).iter().sum();
                assert!((sum - 1.0).abs() <= 1e-10, "case {case}: map row sum {sum}");
                assert!(map.row(i).iter().all(|&v| v >= 0.0));
            }
        }
        // Permuting tokens permutes map rows and columns together.
        let perm = permutation(n, &mut rng);
        let xp = x.gather_rows(&perm).unwrap();
        let (_, maps_p) = mhsa_forward(&layer, &xp).unwrap();
        for (map, map_p) in maps.heads().iter().zip(maps_p.heads()) {
            for ip in 0..n {
                for jp in 0..n {
                    let want = map.at(perm[ip], perm[jp]);
                    let got = map_p.at(ip, jp);
                    assert!(
                        (want - got).abs() <= 1e-12,
                        "case {case}: map permutation mismatch {want} vs {got}"
                    );
                }
            }
        }
    }
}

pub fn check_mhsa_row_equivariance(cases: usize, seed: u64) {
    let mut rng = SeededRng::new(seed);
    for case in 0..cases {
        let d = 8;
        let n = 2 + (rng.next_u64() % 8) as usize;
        let layer = MhsaLayer::seeded(d, 2, 0.5, &mut rng).unwrap();
        let x = rand_tensor(&[n, d], &mut rng);
        let (y, _) = mhsa_forward(&layer, &x).unwrap();
        let perm = permutation(n, &mut rng);
        let xp = x.gather_rows(&perm).unwrap();
        let (yp, _) = mhsa_forward(&layer, &xp).unwrap();
        for ip in 0..n {
            for c in 0..d {
                let want = y.at(perm[ip], c);
                let got = yp.at(ip, c);
                assert!(
                    (want - got).abs() <= 1e-12,
                    "case {case}: row equivariance broke at ({ip},{c})"
                );
            }
        }
    }
}

/// Analytic-vs-numeric input gradient of a probe loss over a tape built by
/// `build`; returns the scale-aware relative error.
fn tape_gradient_rel_error<F>(xv: &Tensor, build: F) -> f64
where
    F: Fn(&Tensor) -> (Tape<f64>, patchsel::grad::NodeId, patchsel::grad::NodeId),
{
    let (tape, loss, x) = build(xv);
    let grads = tape
        .backward(loss, &Tensor::new(vec![1, 1], vec![1.0]).unwrap())
        .unwrap();
    let analytic = grads.get(x).unwrap().clone();
    let numeric = numeric_grad(
        |t| {
            let (tape, loss, _) = build(t);
            Ok(tape.scalar(loss))
        },
        xv,
        1e-5,
    )
    .unwrap();
    let mut max_diff = 0.0f64;
    let mut max_num = 0.0f64;
    for (&a, &nv) in analytic.data().iter().zip(numeric.data()) {
        max_diff = max_diff.max((a - nv).abs());
        max_num = max_num.max(nv.abs());
    }
    max_diff / max_num.max(1.0)
}

/// The attention and FFN sub-blocks, separately and composed, against
/// central differences.
pub fn check_block_gradients(cases: usize, seed: u64) {
    let mut rng = SeededRng::new(seed);
    for case in 0..cases {
        let d = 8;
        let n = 2 + (rng.next_u64() % 4) as usize;
        let mhsa = MhsaLayer::seeded(d, 2, 0.4, &mut rng).unwrap();
        let ffn = FfnBlock::seeded(d, 0.4, &mut rng).unwrap();
        let xv = rand_tensor(&[n, d], &mut rng);
        let probe = rand_tensor(&[n, d], &mut rng);

        let sa_only = |xv: &Tensor| {
            let mut tape = Tape::new();
            let x = tape.input(xv.clone());
            let w = tape_mhsa_weights(&mut tape, &mhsa).unwrap();
            let (sa, _) = tape_sa_block(&mut tape, &w, x).unwrap();
            let weighted = tape.mul_elem_const(sa, probe.clone()).unwrap();
            let loss = tape.sum_all(weighted).unwrap();
            (tape, loss, x)
        };
        let ffn_only = |xv: &Tensor| {
            let mut tape = Tape::new();
            let x = tape.input(xv.clone());
            let fw = tape_ffn_weights(&mut tape, &ffn).unwrap();
            let out = tape_ffn_block(&mut tape, &fw, x).unwrap();
            let weighted = tape.mul_elem_const(out, probe.clone()).unwrap();
            let loss = tape.sum_all(weighted).unwrap();
            (tape, loss, x)
        };
        let composed = |xv: &Tensor| {
            let mut tape = Tape::new();
            let x = tape.input(xv.clone());
            let w = tape_mhsa_weights(&mut tape, &mhsa).unwrap();
            let (sa, _) = tape_sa_block(&mut tape, &w, x).unwrap();
            let fw = tape_ffn_weights(&mut tape, &ffn).unwrap();
            let out = tape_ffn_block(&mut tape, &fw, sa).unwrap();
            let weighted = tape.mul_elem_const(out, probe.clone()).unwrap();
            let loss = tape.sum_all(weighted).unwrap();
            (tape, loss, x)
        };
        for (name, rel) in [
            ("sa_block", tape_gradient_rel_error(&xv, sa_only)),
            ("ffn_block", tape_gradient_rel_error(&xv, ffn_only)),
            ("composed", tape_gradient_rel_error(&xv, composed)),
        ] {
            assert!(rel <= 1e-6, "case {case}: {name} gradient rel error {rel}");
        }
    }
}

// --- patch-select invariants ------------------------------------------------------

pub fn check_token_count_arithmetic(cases: usize, seed: u64) {
    let mut rng = SeededRng::new(seed);
    for case in 0..cases {
        let n = 2 + (rng.next_u64() % 40) as usize;
        let d = 4 + (rng.next_u64() % 8) as usize;
        let rate = 0.05 + 0.95 * rng.next_uniform();
        let seq = grid_sequence(n, d, &mut rng);
        let scores = random_scores(n, &mut rng);
        let fusion = rng.next_u64() % 2 == 0;
        let (out, outcome) = select_and_fuse(&seq, &scores, rate, !fusion).unwrap();
        let k = ((n as f64 * rate).floor() as usize).clamp(1, n);
        assert_eq!(outcome.k, k, "case {case}");
        let want_len = 1 + k + usize::from(fusion);
        assert_eq!(out.len(), want_len, "case {case}");
        // CLS survives untouched at row 0.
        assert_eq!(out.provenance()[0], Provenance::Cls, "case {case}");
        assert_eq!(out.tokens().row(0), seq.tokens().row(0), "case {case}");
        assert!(!outcome.kept_indices.iter().any(|&i| i >= n));
    }
}

pub fn check_selection_monotone_invariance(cases: usize, seed: u64) {
    let mut rng = SeededRng::new(seed);
    for case in 0..cases {
        let n = 3 + (rng.next_u64() % 30) as usize;
        let logits = rand_tensor(&[n], &mut rng);
        let rate = 0.1 + 0.8 * rng.next_uniform();
        let k = ((n as f64 * rate).floor() as usize).clamp(1, n);
        let base = top_k_indices(&softmax_rows(&logits).unwrap(), k).unwrap();
        let alpha = 0.2 + 3.0 * rng.next_uniform();
        let shift = 4.0 * rng.next_uniform() - 2.0;
        let transformed =
            Tensor::vector(logits.data().iter().map(|&v| alpha * v + shift).collect()).unwrap();
        let moved = top_k_indices(&softmax_rows(&transformed).unwrap(), k).unwrap();
        assert_eq!(base, moved, "case {case}: kept set moved under a*z+c");
    }
}

pub fn check_selection_permutation_equivariance(cases: usize, seed: u64) {
    let mut rng = SeededRng::new(seed);
    for case in 0..cases {
        let n = 3 + (rng.next_u64() % 20) as usize;
        let d = 4;
        let seq = grid_sequence(n, d, &mut rng);
        let scores = random_scores(n, &mut rng);
        let rate = 0.2 + 0.6 * rng.next_uniform();
        let (out, outcome) = select_and_fuse(&seq, &scores, rate, false).unwrap();

        let perm = permutation(n, &mut rng);
        // Permuted sequence: patch token at position i is old token perm[i].
        let mut rows = vec![0usize];
        rows.extend(perm.iter().map(|&i| i + 1));
        let ptokens = seq.tokens().gather_rows(&rows).unwrap();
        let mut prov = vec![Provenance::Cls];
        for i in 0..n {
            prov.push(Provenance::GridPatch { row: 0, col: i });
        }
        let pseq = TokenSequence::new(ptokens, prov, (1, n)).unwrap();
        let pscores = Tensor::vector(perm.iter().map(|&i| scores.data()[i]).collect()).unwrap();
        let (pout, poutcome) = select_and_fuse(&pseq, &pscores, rate, false).unwrap();

        // kept sets correspond through the permutation.
        let mapped: std::collections::BTreeSet<usize> =
            poutcome.kept_indices.iter().map(|&i| perm[i]).collect();
        let want: std::collections::BTreeSet<usize> =
            outcome.kept_indices.iter().cloned().collect();
        assert_eq!(mapped, want, "case {case}: kept identity set changed");
        // Fused token value is permutation-invariant.
        let fused_a = out.tokens().row(out.len() - 1);
        let fused_b = pout.tokens().row(pout.len() - 1);
        for (a, b) in fused_a.iter().zip(fused_b) {
            assert!((a - b).abs() <= 1e-12, "case {case}: fused value moved");
        }
        assert!((outcome.fused_mass - poutcome.fused_mass).abs() <= 1e-12);
    }
}

pub fn check_selection_conservation(cases: usize, seed: u64) {
    let mut rng = SeededRng::new(seed);
    for case in 0..cases {
        let n = 2 + (rng.next_u64() % 50) as usize;
        let seq = grid_sequence(n, 4, &mut rng);
        let scores = random_scores(n, &mut rng);
        let rate = 0.05 + 0.9 * rng.next_uniform();
        let (_, outcome) = select_and_fuse(&seq, &scores, rate, false).unwrap();
        let total: f64 = scores.data().iter().sum();
        assert!((total - 1.0).abs() <= 1e-10, "case {case}");
        let kept: f64 = outcome.kept_indices.iter().map(|&i| scores.data()[i]).sum();
        assert!(
            (outcome.fused_mass + kept - 1.0).abs() <= 1e-10,
            "case {case}: mass leak {}",
            outcome.fused_mass + kept
        );
        // kept and inattentive partition the candidates.
        let kept_set: std::collections::BTreeSet<usize> =
            outcome.kept_indices.iter().cloned().collect();
        assert_eq!(kept_set.len(), outcome.k);
    }
}

pub fn check_itf_linearity(cases: usize, seed: u64) {
    let mut rng = SeededRng::new(seed);
    for case in 0..cases {
        let n = 3 + (rng.next_u64() % 20) as usize;
        let d = 5;
        let scores = random_scores(n, &mut rng);
        let rate = 0.2 + 0.5 * rng.next_uniform();
        let alpha = 2.0 * rng.next_uniform() - 1.0;
        let beta = 2.0 * rng.next_uniform() - 1.0;

        let v = grid_sequence(n, d, &mut rng);
        let u = grid_sequence(n, d, &mut rng);
        let combined_tokens = v
            .tokens()
            .scale(alpha)
            .unwrap()
            .add(&u.tokens().scale(beta).unwrap())
            .unwrap();
        let combined = v.with_tokens(combined_tokens).unwrap();

        let (vo, _) = select_and_fuse(&v, &scores, rate, false).unwrap();
        let (uo, _) = select_and_fuse(&u, &scores, rate, false).unwrap();
        let (co, _) = select_and_fuse(&combined, &scores, rate, false).unwrap();
        let fv = vo.tokens().row(vo.len() - 1);
        let fu = uo.tokens().row(uo.len() - 1);
        let fc = co.tokens().row(co.len() - 1);
        for i in 0..d {
            let want = alpha * fv[i] + beta * fu[i];
            assert!(
                (fc[i] - want).abs() <= 1e-10,
                "case {case}: fuse not linear, {} vs {want}",
                fc[i]
            );
        }
    }
}

pub fn check_removal_stability(cases: usize, seed: u64) {
    let mut rng = SeededRng::new(seed);
    let mut done = 0usize;
    while done < cases {
        let n = 4 + (rng.next_u64() % 16) as usize;
        let scores = random_scores(n, &mut rng);
        let k = 1 + (rng.next_u64() % (n as u64 - 2)) as usize;
        let kept = top_k_indices(&scores, k).unwrap();
        // The lowest-scored index, required strictly below the k-th score.
        let lowest = (0..n)
            .min_by(|&a, &b| scores.data()[a].partial_cmp(&scores.data()[b]).unwrap())
            .unwrap();
        if kept.contains(&lowest) {
            continue;
        }
        let kth = kept
            .iter()
            .map(|&i| scores.data()[i])
            .fold(f64::INFINITY, f64::min);
        if scores.data()[lowest] >= kth {
            continue;
        }
        done += 1;
        // Remove it and re-select with the same k; identities must match.
        let reduced: Vec<f64> = scores
            .data()
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != lowest)
            .map(|(_, &v)| v)
            .collect();
        let survivors: Vec<usize> = (0..n).filter(|&i| i != lowest).collect();
        let re = top_k_indices(&Tensor::vector(reduced).unwrap(), k).unwrap();
        let mapped: Vec<usize> = re.iter().map(|&i| survivors[i]).collect();
        assert_eq!(mapped, kept, "kept identities changed after removal");
    }
}

// --- backbone invariants --------------------------------------------------------

/// Random small-but-valid model configurations for live-forward checks.
pub fn random_model_config(rng: &mut SeededRng) -> ModelConfig {
    let layers = 2 + (rng.next_u64() % 8) as usize;
    let image_size = 16 * (2 + (rng.next_u64() % 6) as usize); // 32..112
    let n_patches = (image_size / 16) * (image_size / 16);
    let mut locations = Vec::new();
    let mut rates = Vec::new();
    let mut layer = 1 + (rng.next_u64() % 3) as usize;
    while layer <= layers && locations.len() < 3 {
        if rng.next_u64() % 2 == 0 {
            locations.push(layer);
            rates.push(0.3 + 0.7 * rng.next_uniform());
        }
        layer += 1 + (rng.next_u64() % 3) as usize;
    }
    let _ = n_patches;
    ModelConfig {
        layers,
        width: 8,
        heads: 2,
        patch_size: 16,
        image_size,
        selection: SelectionConfig::new(locations, rates),
        mode: GuidanceMode::text_cls(),
        seed: rng.next_u64(),
    }
}

pub fn check_schedule_equivalence(cases: usize, seed: u64) {
    let mut rng = SeededRng::new(seed);
    for case in 0..cases {
        let config = random_model_config(&mut rng);
        let schedule =
            token_schedule(config.patch_tokens() + 1, &config.selection, config.layers).unwrap();
        let model = SelectiveVit::<f64>::seeded(config.clone()).unwrap();
        let image = synthetic_image(config.image_size, rng.next_u64());
        let seq = patch_embed(&image, &model).unwrap();
        let guidance = synthetic_guidance(config.width, rng.next_u64());
        let (_, trace) = forward(&model, &seq, Some(&guidance)).unwrap();
        assert_eq!(
            trace.lengths, schedule,
            "case {case}: trace diverged from schedule for {config:?}"
        );
    }
}

pub fn check_baseline_matches_plain_vit(cases: usize, seed: u64) {
    let mut rng = SeededRng::new(seed);
    for case in 0..cases {
        let mut config = random_model_config(&mut rng);
        config.selection = SelectionConfig::none();
        let model = SelectiveVit::<f64>::seeded(config.clone()).unwrap();
        let image = synthetic_image(config.image_size, rng.next_u64());
        let seq = patch_embed(&image, &model).unwrap();
        let guidance = synthetic_guidance(config.width, rng.next_u64());
        let (out, _) = forward(&model, &seq, Some(&guidance)).unwrap();
        let mut x = seq.tokens().clone();
        for (mhsa, ffn) in model.blocks() {
            let (v, _) = sa_block(mhsa, &x).unwrap();
            x = ffn_block(ffn, &v).unwrap();
        }
        assert_eq!(out.tokens(), &x, "case {case}: baseline not bitwise plain");
    }
}

/// Final patch-side count shrinks whenever some rate is meaningfully below
/// one. Rates within 1/n of one are excluded from the domain: there
/// `floor(n*r) = n - 1` and the appended fused token keeps the length
/// unchanged, so no reduction can happen at that event. The first event's
/// rate is capped at `1 - 2/n` to guarantee one genuine shrink.
pub fn check_final_count_shrinks(cases: usize, seed: u64) {
    let mut rng = SeededRng::new(seed);
    let mut done = 0usize;
    while done < cases {
        let mut config = random_model_config(&mut rng);
        if config.selection.is_empty() {
            continue;
        }
        let u = config.patch_tokens();
        config.selection.rates[0] = config.selection.rates[0].min(1.0 - 2.0 / u as f64);
        done += 1;
        let schedule = token_schedule(u + 1, &config.selection, config.layers).unwrap();
        let e = schedule.last().unwrap() - 1;
        assert!(
            e < u,
            "final patch count {e} did not shrink below {u} for {config:?}"
        );
    }
    // The documented boundary: a rate inside (1 - 1/n, 1) keeps the length
    // constant because the fused slot replaces the single dropped token.
    let sel = SelectionConfig::new(vec![1], vec![0.99]);
    let schedule = token_schedule(5, &sel, 2).unwrap();
    assert_eq!(schedule, vec![5, 5]);
}

pub fn check_trace_masks_partition(cases: usize, seed: u64) {
    let mut rng = SeededRng::new(seed);
    let mut done = 0usize;
    while done < cases {
        let config = random_model_config(&mut rng);
        if config.selection.is_empty() {
            continue;
        }
        done += 1;
        let model = SelectiveVit::<f64>::seeded(config.clone()).unwrap();
        let image = synthetic_image(config.image_size, rng.next_u64());
        let seq = patch_embed(&image, &model).unwrap();
        let guidance = synthetic_guidance(config.width, rng.next_u64());
        let (_, trace) = forward(&model, &seq, Some(&guidance)).unwrap();
        for record in &trace.selections {
            // kept + inattentive = candidates, disjoint.
            let kept: std::collections::BTreeSet<usize> =
                record.outcome.kept_indices.iter().cloned().collect();
            assert_eq!(kept.len(), record.outcome.k);
            assert!(kept.iter().all(|&i| i < record.outcome.n));
            let inattentive = record.outcome.n - record.outcome.k;
            assert_eq!(
                kept.len() + inattentive,
                record.outcome.n,
                "selection event lost tokens"
            );
            // Grid mask counts the kept grid-origin tokens.
            let mask_count = record.grid_mask.iter().filter(|&&b| b).count();
            assert!(mask_count <= record.outcome.k);
        }
        // First event candidates are all grid-origin: mask count equals k.
        if let Some(first) = trace.selections.first() {
            let mask_count = first.grid_mask.iter().filter(|&&b| b).count();
            assert_eq!(mask_count, first.outcome.k);
        }
    }
}

// --- cost-model invariants ---------------------------------------------------------

pub fn check_flops_decrease_with_rate(cases: usize, seed: u64) {
    let mut rng = SeededRng::new(seed);
    let mut done = 0usize;
    while done < cases {
        let config = random_model_config(&mut rng);
        if config.selection.is_empty() {
            continue;
        }
        done += 1;
        let tokens = config.patch_tokens() + 1;
        let mut cost = CostConfig::reference_scale(tokens, config.selection.clone());
        cost.vision.layers = config.layers;
        let base = model_flops(&cost).unwrap();
        // Lower one rate; total must strictly drop.
        let which = (rng.next_u64() as usize) % cost.selection.rates.len();
        let mut lowered = cost.clone();
        lowered.selection.rates[which] = (lowered.selection.rates[which] * 0.5).max(0.05);
        // Skip draws where the floor rule absorbs the change entirely.
        let before = token_schedule(tokens, &cost.selection, config.layers).unwrap();
        let after = token_schedule(tokens, &lowered.selection, config.layers).unwrap();
        if before == after {
            continue;
        }
        let low = model_flops(&lowered).unwrap();
        assert!(
            low.total_flops < base.total_flops,
            "flops did not drop: {} -> {} for {:?}",
            base.total_flops,
            low.total_flops,
            lowered.selection
        );
    }
}

pub fn check_keep_rate_permutation_invariance(cases: usize, seed: u64) {
    let mut rng = SeededRng::new(seed);
    for case in 0..cases {
        let n = 1 + (rng.next_u64() % 5) as usize;
        let rates: Vec<f64> = (0..n).map(|_| 0.05 + 0.95 * rng.next_uniform()).collect();
        let perm = permutation(n, &mut rng);
        let permuted: Vec<f64> = perm.iter().map(|&i| rates[i]).collect();
        assert_eq!(
            overall_keep_rate(&rates),
            overall_keep_rate(&permuted),
            "case {case}"
        );
    }
}

pub fn check_ratio_convention_invariance(cases: usize, seed: u64) {
    let mut rng = SeededRng::new(seed);
    let mut done = 0usize;
    while done < cases {
        let config = random_model_config(&mut rng);
        if config.selection.is_empty() {
            continue;
        }
        done += 1;
        let tokens = config.patch_tokens() + 1;
        let mut a = CostConfig::reference_scale(tokens, config.selection.clone());
        a.vision.layers = config.layers;
        let mut b = CostConfig::reference_scale(tokens, SelectionConfig::none());
        b.vision.layers = config.layers;
        let r_mac = speedup_estimate(&model_flops(&a).unwrap(), &model_flops(&b).unwrap());
        a.convention = FlopsConvention::TwoPerMac;
        b.convention = FlopsConvention::TwoPerMac;
        let r_two = speedup_estimate(&model_flops(&a).unwrap(), &model_flops(&b).unwrap());
        assert!(
            (r_mac - r_two).abs() <= 1e-15,
            "convention changed a ratio: {r_mac} vs {r_two}"
        );
    }
}
