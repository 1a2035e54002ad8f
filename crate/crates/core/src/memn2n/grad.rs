//! Exact reverse-mode gradients for the memory network.
//!
//! The loss path is mean cross-entropy of the candidate softmax against the
//! gold index. An externally supplied gradient at the dialog state vector
//! (from the handoff classifier) can be added per instance; it is chained
//! through the hop stack into the `a`, `b`, `c`, `t_a`, `t_c` matrices,
//! exactly like the loss's own state gradient.

use ndarray::{Array1, Array2, ArrayView1};

use super::{
    encode_candidates, hop_forward, EncodedCandidates, EncodedInstance, HopCache, Hyperparams,
    Memn2nError, ModelParams,
};
use crate::corpus::PAD_ID;

use super::position_weight;

/// Accumulates `dvec` into the embedding rows of `tokens`, weighted by the
/// position encoding (the transpose of [`super::encode_sentence`]).
fn scatter_sentence(tokens: &[usize], dvec: ArrayView1<f64>, grad: &mut Array2<f64>) {
    let d = grad.ncols();
    let ids: Vec<usize> = tokens.iter().copied().filter(|&t| t != PAD_ID).collect();
    let len = ids.len();
    for (j, &tok) in ids.iter().enumerate() {
        let mut row = grad.row_mut(tok);
        for k in 0..d {
            row[k] += position_weight(j, len, k, d) * dvec[k];
        }
    }
}

/// Backpropagates a gradient at the dialog state through the hop stack into
/// `grads`. `instance` and `cache` must come from the same forward pass.
fn backward_hops(
    instance: &EncodedInstance,
    hyper: &Hyperparams,
    cache: &HopCache,
    ds: Array1<f64>,
    grads: &mut ModelParams,
) {
    let n = cache.mem.len();
    let mut du = ds;

    if n > 0 {
        let d = du.len();
        let mut d_a_rows: Array2<f64> = Array2::zeros((n, d));
        let mut d_c_rows: Array2<f64> = Array2::zeros((n, d));
        for h in (0..hyper.hops).rev() {
            let p = &cache.attention[h];
            let u_h = &cache.u_states[h];
            // s = o + u: the incoming gradient flows to both summands.
            let d_o = du.clone();
            // o = sum_i p_i c_i
            let dp = cache.mem.c.dot(&d_o);
            for i in 0..n {
                d_c_rows.row_mut(i).scaled_add(p[i], &d_o);
            }
            // p = softmax(z), z_i = u . a_i
            let pdp = p.dot(&dp);
            let dz: Array1<f64> = (&dp - pdp) * p;
            for i in 0..n {
                d_a_rows.row_mut(i).scaled_add(dz[i], u_h);
            }
            let du_attention = dz.dot(&cache.mem.a);
            du = d_o + du_attention;
        }
        let kept = &instance.memory[cache.mem_skip..];
        for i in 0..n {
            let slot = n - 1 - i;
            grads.t_a.row_mut(slot).scaled_add(1.0, &d_a_rows.row(i));
            grads.t_c.row_mut(slot).scaled_add(1.0, &d_c_rows.row(i));
            scatter_sentence(&kept[i], d_a_rows.row(i), &mut grads.a);
            scatter_sentence(&kept[i], d_c_rows.row(i), &mut grads.c);
        }
    }
    // With an empty memory every hop is the identity, so `du` is already the
    // gradient at the query encoding.
    scatter_sentence(&instance.query, du.view(), &mut grads.b);
}

/// Mean cross-entropy over the batch plus exact gradients for every matrix.
///
/// `external_state_grads`, when given, supplies one extra gradient at each
/// instance's dialog state vector; it is added to the loss's own state
/// gradient unscaled (the caller owns its weighting).
pub fn loss_and_gradients(
    batch: &[&EncodedInstance],
    params: &ModelParams,
    hyper: &Hyperparams,
    candidates: &EncodedCandidates,
    external_state_grads: Option<&[Array1<f64>]>,
) -> Result<(f64, ModelParams), Memn2nError> {
    assert!(!batch.is_empty(), "batch must be non-empty");
    if let Some(ext) = external_state_grads {
        assert_eq!(ext.len(), batch.len());
    }

    let cand_enc = encode_candidates(candidates, &params.w);
    let k_count = candidates.len();
    let d = params.dim();
    let mut grads = params.zeros_like();
    let mut d_cand: Array2<f64> = Array2::zeros((k_count, d));
    let scale = 1.0 / batch.len() as f64;
    let mut total_loss = 0.0;

    for (bi, instance) in batch.iter().enumerate() {
        let (state, cache) = hop_forward(instance, params, hyper);
        let scores = cand_enc.matrix.dot(&state);

        let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exp: Array1<f64> = scores.mapv(|v| (v - m).exp());
        let sum = exp.sum();
        total_loss += (m + sum.ln() - scores[instance.answer]) * scale;

        let mut dscores = exp.mapv(|v| v / sum);
        dscores[instance.answer] -= 1.0;
        dscores.mapv_inplace(|v| v * scale);

        let mut ds = dscores.dot(&cand_enc.matrix);
        if let Some(ext) = external_state_grads {
            ds += &ext[bi];
        }
        for y in 0..k_count {
            d_cand.row_mut(y).scaled_add(dscores[y], &state);
        }
        backward_hops(instance, hyper, &cache, ds, &mut grads);
    }

    // Candidates are plain bags under `w`.
    for (y, tokens) in candidates.iter().enumerate() {
        let src = d_cand.row(y);
        for &tok in tokens.iter().filter(|&&t| t != PAD_ID) {
            grads.w.row_mut(tok).scaled_add(1.0, &src);
        }
    }

    if !total_loss.is_finite() {
        return Err(Memn2nError::NonFiniteLoss);
    }
    Ok((total_loss, grads))
}

/// Chains per-instance gradients at the dialog state vector into the model,
/// with no loss term. The candidate matrix `w` never enters this path, so its
/// gradient block stays zero.
pub fn backprop_state_grads(
    batch: &[&EncodedInstance],
    params: &ModelParams,
    hyper: &Hyperparams,
    state_grads: &[Array1<f64>],
) -> ModelParams {
    assert_eq!(batch.len(), state_grads.len());
    let mut grads = params.zeros_like();
    for (instance, ds) in batch.iter().zip(state_grads) {
        let (_, cache) = hop_forward(instance, params, hyper);
        backward_hops(instance, hyper, &cache, ds.clone(), &mut grads);
    }
    grads
}

#[cfg(test)]
mod tests {
    use super::super::{forward, EncodedCandidates, EncodedInstance, Hyperparams, ModelParams};
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small_hyper(dim: usize, hops: usize, cap: usize) -> Hyperparams {
        Hyperparams {
            embedding_dim: dim,
            hops,
            memory_cap: cap,
            ..Hyperparams::default()
        }
    }

    fn random_instance(
        rng: &mut ChaCha8Rng,
        vocab_size: usize,
        n_candidates: usize,
    ) -> EncodedInstance {
        let n_mem = rng.random_range(0..5);
        let sent = |rng: &mut ChaCha8Rng| {
            let len = rng.random_range(1..4);
            (0..len).map(|_| rng.random_range(1..vocab_size)).collect::<Vec<_>>()
        };
        EncodedInstance {
            memory: (0..n_mem).map(|_| sent(rng)).collect(),
            query: sent(rng),
            answer: rng.random_range(0..n_candidates),
            dialog_id: 0,
            turn_index: 0,
        }
    }

    fn random_candidates(rng: &mut ChaCha8Rng, vocab_size: usize, n: usize) -> EncodedCandidates {
        EncodedCandidates::new(
            (0..n)
                .map(|_| {
                    let len = rng.random_range(1..3);
                    (0..len).map(|_| rng.random_range(1..vocab_size)).collect()
                })
                .collect(),
        )
    }

    fn batch_loss(
        batch: &[&EncodedInstance],
        params: &ModelParams,
        hyper: &Hyperparams,
        cands: &EncodedCandidates,
    ) -> f64 {
        let cand_enc = encode_candidates(cands, &params.w);
        let mut total = 0.0;
        for instance in batch {
            let (state, _) = hop_forward(instance, params, hyper);
            let scores = cand_enc.matrix.dot(&state);
            let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + scores.mapv(|v| (v - m).exp()).sum().ln();
            total += lse - scores[instance.answer];
        }
        total / batch.len() as f64
    }

    /// Central finite differences over every coordinate of every matrix.
    fn max_relative_error(
        batch: &[&EncodedInstance],
        params: &ModelParams,
        hyper: &Hyperparams,
        cands: &EncodedCandidates,
    ) -> f64 {
        let (_, grads) = loss_and_gradients(batch, params, hyper, cands, None).unwrap();
        let eps = 1e-4;
        let mut worst: f64 = 0.0;
        let names: Vec<&str> = params.matrices().iter().map(|(n, _)| *n).collect();
        for name in names {
            let shape = {
                let m = params
                    .matrices()
                    .iter()
                    .find(|(n, _)| *n == name)
                    .unwrap()
                    .1
                    .raw_dim();
                m
            };
            for r in 0..shape[0] {
                for c in 0..shape[1] {
                    let mut plus = params.clone();
                    let mut minus = params.clone();
                    for (n, m) in plus.matrices_mut() {
                        if n == name {
                            m[[r, c]] += eps;
                        }
                    }
                    for (n, m) in minus.matrices_mut() {
                        if n == name {
                            m[[r, c]] -= eps;
                        }
                    }
                    let fd = (batch_loss(batch, &plus, hyper, cands)
                        - batch_loss(batch, &minus, hyper, cands))
                        / (2.0 * eps);
                    let analytic = grads
                        .matrices()
                        .iter()
                        .find(|(n, _)| *n == name)
                        .unwrap()
                        .1[[r, c]];
                    let denom = analytic.abs().max(fd.abs());
                    if denom > 1e-7 {
                        worst = worst.max((analytic - fd).abs() / denom);
                    } else {
                        worst = worst.max((analytic - fd).abs());
                    }
                }
            }
        }
        worst
    }

    #[test]
    fn uniform_probs_loss_is_ln_k() {
        let hyper = small_hyper(3, 2, 6);
        let params = ModelParams::zeros(8, 6, 3);
        let cands = EncodedCandidates::new(vec![vec![2], vec![3], vec![4], vec![5], vec![6]]);
        let instance = EncodedInstance {
            memory: vec![vec![2, 3]],
            query: vec![4],
            answer: 2,
            dialog_id: 0,
            turn_index: 0,
        };
        let (loss, _) = loss_and_gradients(&[&instance], &params, &hyper, &cands, None).unwrap();
        assert!((loss - (5.0f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn gradients_match_finite_differences_on_three_instance_batch() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let vocab = 9;
        let hyper = small_hyper(4, 3, 4);
        let params = ModelParams::init(vocab, &hyper);
        let cands = random_candidates(&mut rng, vocab, 5);
        let instances: Vec<EncodedInstance> =
            (0..3).map(|_| random_instance(&mut rng, vocab, 5)).collect();
        let batch: Vec<&EncodedInstance> = instances.iter().collect();
        let worst = max_relative_error(&batch, &params, &hyper, &cands);
        assert!(worst < 1e-4, "max relative error {worst}");
    }

    #[test]
    fn gradients_match_finite_differences_with_memory_truncation() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let vocab = 8;
        let hyper = small_hyper(3, 2, 2); // cap 2 forces truncation
        let params = ModelParams::init(vocab, &hyper);
        let cands = random_candidates(&mut rng, vocab, 4);
        let instance = EncodedInstance {
            memory: vec![vec![2], vec![3, 4], vec![5], vec![6, 7]],
            query: vec![2, 5],
            answer: 1,
            dialog_id: 0,
            turn_index: 0,
        };
        let worst = max_relative_error(&[&instance], &params, &hyper, &cands);
        assert!(worst < 1e-4, "max relative error {worst}");
    }

    #[test]
    fn zero_external_state_gradient_changes_nothing() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let vocab = 10;
        let hyper = small_hyper(4, 2, 6);
        let params = ModelParams::init(vocab, &hyper);
        let cands = random_candidates(&mut rng, vocab, 6);
        let instances: Vec<EncodedInstance> =
            (0..2).map(|_| random_instance(&mut rng, vocab, 6)).collect();
        let batch: Vec<&EncodedInstance> = instances.iter().collect();

        let zeros = vec![Array1::zeros(4); 2];
        let (l1, g1) = loss_and_gradients(&batch, &params, &hyper, &cands, None).unwrap();
        let (l2, g2) = loss_and_gradients(&batch, &params, &hyper, &cands, Some(&zeros)).unwrap();
        assert_eq!(l1, l2);
        assert_eq!(g1, g2);
    }

    #[test]
    fn external_state_gradient_adds_the_pass_through_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let vocab = 10;
        let hyper = small_hyper(4, 2, 6);
        let params = ModelParams::init(vocab, &hyper);
        let cands = random_candidates(&mut rng, vocab, 5);
        let instances: Vec<EncodedInstance> =
            (0..2).map(|_| random_instance(&mut rng, vocab, 5)).collect();
        let batch: Vec<&EncodedInstance> = instances.iter().collect();

        let ext: Vec<Array1<f64>> = (0..2)
            .map(|_| Array1::from_shape_fn(4, |_| rng.random_range(-1.0..1.0)))
            .collect();

        let (_, plain) = loss_and_gradients(&batch, &params, &hyper, &cands, None).unwrap();
        let (_, combined) = loss_and_gradients(&batch, &params, &hyper, &cands, Some(&ext)).unwrap();
        let pass_through = backprop_state_grads(&batch, &params, &hyper, &ext);

        for (((_, a), (_, b)), (_, c)) in combined
            .matrices()
            .into_iter()
            .zip(plain.matrices())
            .zip(pass_through.matrices())
        {
            for ((x, y), z) in a.iter().zip(b.iter()).zip(c.iter()) {
                assert!((x - (y + z)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn state_grad_pass_through_matches_finite_differences() {
        // Objective: J = sum_i g_i . s_i with fixed g; dJ/dtheta must match
        // finite differences through the hop stack.
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let vocab = 8;
        let hyper = small_hyper(3, 3, 5);
        let params = ModelParams::init(vocab, &hyper);
        let instances: Vec<EncodedInstance> =
            (0..2).map(|_| random_instance(&mut rng, vocab, 3)).collect();
        let batch: Vec<&EncodedInstance> = instances.iter().collect();
        let gs: Vec<Array1<f64>> = (0..2)
            .map(|_| Array1::from_shape_fn(3, |_| rng.random_range(-1.0..1.0)))
            .collect();

        let objective = |p: &ModelParams| -> f64 {
            batch
                .iter()
                .zip(&gs)
                .map(|(inst, g)| {
                    let (state, _) = hop_forward(inst, p, &hyper);
                    g.dot(&state)
                })
                .sum()
        };

        let grads = backprop_state_grads(&batch, &params, &hyper, &gs);
        let eps = 1e-5;
        let mut worst: f64 = 0.0;
        for name in ["a", "b", "c", "t_a", "t_c"] {
            let dimr = grads
                .matrices()
                .iter()
                .find(|(n, _)| *n == name)
                .unwrap()
                .1
                .raw_dim();
            for r in 0..dimr[0] {
                for c in 0..dimr[1] {
                    let mut plus = params.clone();
                    let mut minus = params.clone();
                    for (n, m) in plus.matrices_mut() {
                        if n == name {
                            m[[r, c]] += eps;
                        }
                    }
                    for (n, m) in minus.matrices_mut() {
                        if n == name {
                            m[[r, c]] -= eps;
                        }
                    }
                    let fd = (objective(&plus) - objective(&minus)) / (2.0 * eps);
                    let analytic = grads
                        .matrices()
                        .iter()
                        .find(|(n, _)| *n == name)
                        .unwrap()
                        .1[[r, c]];
                    let denom = analytic.abs().max(fd.abs());
                    if denom > 1e-7 {
                        worst = worst.max((analytic - fd).abs() / denom);
                    }
                }
            }
        }
        assert!(worst < 1e-4, "max relative error {worst}");
        // w is untouched by the pass-through path.
        assert!(grads.w.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn loss_decreases_along_negative_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let vocab = 10;
        let hyper = small_hyper(4, 3, 6);
        let mut params = ModelParams::init(vocab, &hyper);
        let cands = random_candidates(&mut rng, vocab, 6);
        let instances: Vec<EncodedInstance> =
            (0..4).map(|_| random_instance(&mut rng, vocab, 6)).collect();
        let batch: Vec<&EncodedInstance> = instances.iter().collect();

        let (before, grads) = loss_and_gradients(&batch, &params, &hyper, &cands, None).unwrap();
        for ((_, p), (_, g)) in params.matrices_mut().into_iter().zip(grads.matrices()) {
            p.scaled_add(-0.1, g);
        }
        let after = batch_loss(&batch, &params, &hyper, &cands);
        assert!(after < before, "{after} !< {before}");
    }

    #[test]
    fn forward_and_loss_agree_on_probabilities() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let vocab = 9;
        let hyper = small_hyper(3, 2, 6);
        let params = ModelParams::init(vocab, &hyper);
        let cands = random_candidates(&mut rng, vocab, 4);
        let instance = random_instance(&mut rng, vocab, 4);
        let f = forward(&instance, &params, &hyper, &cands);
        let (loss, _) = loss_and_gradients(&[&instance], &params, &hyper, &cands, None).unwrap();
        assert!((loss + f.probs[instance.answer].ln()).abs() < 1e-9);
    }
}
