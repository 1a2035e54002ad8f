//! The routing classifier: a one-hidden-layer MLP over the dialog state
//! vector that decides, per turn, whether the model answers or the turn is
//! handed to a human agent.
//!
//! It is trained online with REINFORCE on a three-valued reward: a flat
//! reward for choosing the human (whose response is assumed correct), a
//! higher reward for a correct model response, and a penalty for an
//! incorrect one. Its gradient can optionally be continued through the
//! dialog state vector into the model.

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::memn2n::{DialogStateVector, INIT_SIGMA};

#[derive(Debug, Error)]
pub enum HandoffError {
    #[error("reward spec must satisfy model_correct > human > model_incorrect, got {0:?}")]
    BadRewardSpec(RewardSpec),
    #[error("cannot parse reward spec {0:?}: expected three comma-separated numbers")]
    UnparsableRewardSpec(String),
    #[error("non-finite update")]
    NonFiniteUpdate,
}

/// Turn-level routing decision. `Model` answers with the model's top
/// candidate; `Human` hands the turn to the (simulated) human agent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RouteAction {
    Model,
    Human,
}

impl RouteAction {
    pub fn index(self) -> usize {
        match self {
            RouteAction::Model => 0,
            RouteAction::Human => 1,
        }
    }
}

/// The three-valued reward: `r_human` for a handoff, `r_model_correct` /
/// `r_model_incorrect` for the model answering right or wrong. Correct model
/// answers must pay more than a handoff, and failures must pay less.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardSpec {
    pub r_human: f64,
    pub r_model_correct: f64,
    pub r_model_incorrect: f64,
}

impl Default for RewardSpec {
    fn default() -> Self {
        RewardSpec {
            r_human: 1.0,
            r_model_correct: 2.0,
            r_model_incorrect: -4.0,
        }
    }
}

impl RewardSpec {
    pub fn new(r_human: f64, r_model_correct: f64, r_model_incorrect: f64) -> Result<Self, HandoffError> {
        let spec = RewardSpec {
            r_human,
            r_model_correct,
            r_model_incorrect,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), HandoffError> {
        if self.r_model_correct > self.r_human && self.r_human > self.r_model_incorrect {
            Ok(())
        } else {
            Err(HandoffError::BadRewardSpec(*self))
        }
    }

    /// Parses `"1,2,-4"`-style triples.
    pub fn parse(text: &str) -> Result<Self, HandoffError> {
        let parts: Vec<f64> = text
            .split(',')
            .map(|p| p.trim().parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|_| HandoffError::UnparsableRewardSpec(text.to_owned()))?;
        if parts.len() != 3 {
            return Err(HandoffError::UnparsableRewardSpec(text.to_owned()));
        }
        RewardSpec::new(parts[0], parts[1], parts[2])
    }

    pub fn label(&self) -> String {
        format!(
            "{},{},{}",
            self.r_human, self.r_model_correct, self.r_model_incorrect
        )
    }
}

/// MLP weights: tanh hidden layer, softmax over the two actions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierParams {
    /// dim x hidden
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    /// hidden x 2
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

impl ClassifierParams {
    pub fn init(dim: usize, hidden: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::init_with_rng(dim, hidden, &mut rng)
    }

    pub fn init_with_rng(dim: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        let normal = Normal::new(0.0, INIT_SIGMA).unwrap();
        ClassifierParams {
            w1: Array2::from_shape_fn((dim, hidden), |_| normal.sample(rng)),
            b1: Array1::from_shape_fn(hidden, |_| normal.sample(rng)),
            w2: Array2::from_shape_fn((hidden, 2), |_| normal.sample(rng)),
            b2: Array1::from_shape_fn(2, |_| normal.sample(rng)),
        }
    }

    pub fn zeros(dim: usize, hidden: usize) -> Self {
        ClassifierParams {
            w1: Array2::zeros((dim, hidden)),
            b1: Array1::zeros(hidden),
            w2: Array2::zeros((hidden, 2)),
            b2: Array1::zeros(2),
        }
    }

    pub fn dim(&self) -> usize {
        self.w1.nrows()
    }

    pub fn hidden(&self) -> usize {
        self.w1.ncols()
    }

    /// A copy whose output bias overwhelmingly favors one action; handy for
    /// forcing a route in tests and diagnostics.
    pub fn hard_wired(dim: usize, hidden: usize, action: RouteAction) -> Self {
        let mut params = ClassifierParams::zeros(dim, hidden);
        params.b2[action.index()] = 1e6;
        params
    }

    pub fn all_finite(&self) -> bool {
        self.w1.iter().all(|v| v.is_finite())
            && self.b1.iter().all(|v| v.is_finite())
            && self.w2.iter().all(|v| v.is_finite())
            && self.b2.iter().all(|v| v.is_finite())
    }
}

/// One recorded routing decision, with everything needed to recompute the
/// policy gradient at update time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionEpisode {
    pub state: DialogStateVector,
    pub action: RouteAction,
    /// Probability the policy assigned to the taken action when sampled.
    pub action_prob: f64,
    pub reward: f64,
    /// Position of the turn in the deployment sequence.
    pub instance_idx: usize,
}

fn forward_parts(
    state: &DialogStateVector,
    params: &ClassifierParams,
) -> (Array1<f64>, [f64; 2]) {
    let mut z1 = state.0.dot(&params.w1);
    z1 += &params.b1;
    let hidden = z1.mapv(f64::tanh);
    let mut logits = hidden.dot(&params.w2);
    logits += &params.b2;
    let m = logits[0].max(logits[1]);
    let e0 = (logits[0] - m).exp();
    let e1 = (logits[1] - m).exp();
    let sum = e0 + e1;
    (hidden, [e0 / sum, e1 / sum])
}

/// Action distribution for a dialog state: `[p(model), p(human)]`.
pub fn policy(state: &DialogStateVector, params: &ClassifierParams) -> [f64; 2] {
    forward_parts(state, params).1
}

/// Samples an action from the distribution, returning it with its
/// probability. Deterministic given the rng state.
pub fn sample_action(probs: [f64; 2], rng: &mut ChaCha8Rng) -> (RouteAction, f64) {
    let u: f64 = rng.random();
    if u < probs[0] {
        (RouteAction::Model, probs[0])
    } else {
        (RouteAction::Human, probs[1])
    }
}

/// The three-valued reward. The human agent's response is assumed always
/// correct, so `model_correct` is ignored for handoffs.
pub fn reward(action: RouteAction, model_correct: bool, spec: &RewardSpec) -> f64 {
    match (action, model_correct) {
        (RouteAction::Human, _) => spec.r_human,
        (RouteAction::Model, true) => spec.r_model_correct,
        (RouteAction::Model, false) => spec.r_model_incorrect,
    }
}

/// One REINFORCE step: gradient ascent on the mean of
/// `reward * log pi(action | state)` over the episode batch, with raw
/// rewards (no baseline). When `want_state_grads` is set, also returns the
/// objective's gradient at each episode's state vector, for continuation
/// into the model.
pub fn reinforce_update(
    episodes: &[DecisionEpisode],
    params: &mut ClassifierParams,
    lr: f64,
    want_state_grads: bool,
) -> Result<Option<Vec<Array1<f64>>>, HandoffError> {
    assert!(!episodes.is_empty(), "episode batch must be non-empty");
    let dim = params.dim();
    let hidden_n = params.hidden();
    let scale = 1.0 / episodes.len() as f64;

    let mut g_w1 = Array2::<f64>::zeros((dim, hidden_n));
    let mut g_b1 = Array1::<f64>::zeros(hidden_n);
    let mut g_w2 = Array2::<f64>::zeros((hidden_n, 2));
    let mut g_b2 = Array1::<f64>::zeros(2);
    let mut state_grads = want_state_grads.then(|| Vec::with_capacity(episodes.len()));

    for episode in episodes {
        let (hidden, probs) = forward_parts(&episode.state, params);
        let weight = episode.reward * scale;
        // d/dlogits of log pi(action) = onehot(action) - probs.
        let mut d_logits = Array1::zeros(2);
        d_logits[episode.action.index()] = 1.0;
        d_logits[0] -= probs[0];
        d_logits[1] -= probs[1];
        d_logits.mapv_inplace(|v| v * weight);

        for h in 0..hidden_n {
            g_w2[[h, 0]] += hidden[h] * d_logits[0];
            g_w2[[h, 1]] += hidden[h] * d_logits[1];
        }
        g_b2 += &d_logits;

        let d_hidden = params.w2.dot(&d_logits);
        let d_z1: Array1<f64> =
            Array1::from_shape_fn(hidden_n, |h| d_hidden[h] * (1.0 - hidden[h] * hidden[h]));

        for i in 0..dim {
            let s_i = episode.state.0[i];
            for h in 0..hidden_n {
                g_w1[[i, h]] += s_i * d_z1[h];
            }
        }
        g_b1 += &d_z1;

        if let Some(grads) = state_grads.as_mut() {
            grads.push(params.w1.dot(&d_z1));
        }
    }

    let finite = g_w1.iter().all(|v| v.is_finite())
        && g_b1.iter().all(|v| v.is_finite())
        && g_w2.iter().all(|v| v.is_finite())
        && g_b2.iter().all(|v| v.is_finite());
    if !finite {
        return Err(HandoffError::NonFiniteUpdate);
    }

    params.w1.scaled_add(lr, &g_w1);
    params.b1.scaled_add(lr, &g_b1);
    params.w2.scaled_add(lr, &g_w2);
    params.b2.scaled_add(lr, &g_b2);

    Ok(state_grads)
}

const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct ClassifierCheckpoint {
    format_version: u32,
    params: ClassifierParams,
}

pub fn save_classifier(params: &ClassifierParams, path: &std::path::Path) -> std::io::Result<()> {
    let file = ClassifierCheckpoint {
        format_version: CHECKPOINT_VERSION,
        params: params.clone(),
    };
    std::fs::write(path, serde_json::to_string(&file).expect("serializable"))
}

pub fn load_classifier(path: &std::path::Path) -> std::io::Result<ClassifierParams> {
    let text = std::fs::read_to_string(path)?;
    let file: ClassifierCheckpoint = serde_json::from_str(&text)
        .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))?;
    Ok(file.params)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn state(values: &[f64]) -> DialogStateVector {
        DialogStateVector(Array1::from_vec(values.to_vec()))
    }

    #[test]
    fn zero_params_give_even_odds() {
        let params = ClassifierParams::zeros(3, 4);
        let probs = policy(&state(&[0.5, -1.0, 2.0]), &params);
        assert!((probs[0] - 0.5).abs() < 1e-12);
        assert!((probs[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn policy_is_a_distribution_for_random_params() {
        for seed in 0..20 {
            let params = ClassifierParams::init(5, 7, seed);
            let s = state(&[0.1, -0.2, 0.3, 1.5, -2.0]);
            let probs = policy(&s, &params);
            assert!((probs[0] + probs[1] - 1.0).abs() < 1e-9);
            assert!(probs[0] > 0.0 && probs[1] > 0.0);
        }
    }

    #[test]
    fn policy_matches_scalar_hand_computation() {
        // dim 1, hidden 1: h = tanh(s*w1 + b1), logits = (h*w2_0 + b2_0,
        // h*w2_1 + b2_1).
        let mut params = ClassifierParams::zeros(1, 1);
        params.w1[[0, 0]] = 0.5;
        params.b1[0] = -0.25;
        params.w2[[0, 0]] = 1.5;
        params.w2[[0, 1]] = -0.5;
        params.b2[0] = 0.1;
        params.b2[1] = 0.2;
        let s = 0.8;
        let h = (s * 0.5 - 0.25_f64).tanh();
        let l0 = h * 1.5 + 0.1;
        let l1 = h * -0.5 + 0.2;
        let p0 = l0.exp() / (l0.exp() + l1.exp());

        let probs = policy(&state(&[s]), &params);
        assert!((probs[0] - p0).abs() < 1e-12);
    }

    #[test]
    fn sample_is_deterministic_and_respects_certainty() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let (action, prob) = sample_action([1.0, 0.0], &mut rng);
            assert_eq!(action, RouteAction::Model);
            assert_eq!(prob, 1.0);
        }
        let mut r1 = ChaCha8Rng::seed_from_u64(2);
        let mut r2 = ChaCha8Rng::seed_from_u64(2);
        let seq1: Vec<RouteAction> = (0..50).map(|_| sample_action([0.5, 0.5], &mut r1).0).collect();
        let seq2: Vec<RouteAction> = (0..50).map(|_| sample_action([0.5, 0.5], &mut r2).0).collect();
        assert_eq!(seq1, seq2);
    }

    #[test]
    fn sample_frequency_tracks_probability() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 10_000;
        let picks = (0..n)
            .filter(|_| sample_action([0.5, 0.5], &mut rng).0 == RouteAction::Model)
            .count();
        let freq = picks as f64 / n as f64;
        assert!((0.45..=0.55).contains(&freq), "frequency {freq}");
    }

    #[test]
    fn reward_table_matches_spec_values() {
        let spec = RewardSpec::new(1.0, 2.0, -4.0).unwrap();
        assert_eq!(reward(RouteAction::Human, true, &spec), 1.0);
        assert_eq!(reward(RouteAction::Human, false, &spec), 1.0);
        assert_eq!(reward(RouteAction::Model, true, &spec), 2.0);
        assert_eq!(reward(RouteAction::Model, false, &spec), -4.0);

        let alt = RewardSpec::new(1.0, 3.0, -3.0).unwrap();
        assert_eq!(reward(RouteAction::Model, false, &alt), -3.0);
        assert_eq!(reward(RouteAction::Model, true, &alt), 3.0);
    }

    #[test]
    fn reward_spec_ordering_is_enforced() {
        assert!(RewardSpec::new(1.0, 0.5, -1.0).is_err());
        assert!(RewardSpec::new(1.0, 2.0, 1.5).is_err());
        assert!(RewardSpec::new(1.0, 2.0, -4.0).is_ok());
    }

    #[test]
    fn reward_spec_parses_cli_triples() {
        let spec = RewardSpec::parse("1,3,-3").unwrap();
        assert_eq!(spec.r_model_correct, 3.0);
        assert_eq!(spec.label(), "1,3,-3");
        assert!(RewardSpec::parse("1,2").is_err());
        assert!(RewardSpec::parse("a,b,c").is_err());
    }

    fn episode(state_v: &[f64], action: RouteAction, rew: f64, params: &ClassifierParams) -> DecisionEpisode {
        let s = state(state_v);
        let probs = policy(&s, params);
        DecisionEpisode {
            state: s,
            action,
            action_prob: probs[action.index()],
            reward: rew,
            instance_idx: 0,
        }
    }

    #[test]
    fn zero_reward_leaves_params_unchanged() {
        let mut params = ClassifierParams::init(3, 4, 7);
        let before = params.clone();
        let eps = vec![
            episode(&[0.1, 0.2, 0.3], RouteAction::Model, 0.0, &params),
            episode(&[-1.0, 0.5, 0.0], RouteAction::Human, 0.0, &params),
        ];
        reinforce_update(&eps, &mut params, 0.01, false).unwrap();
        assert_eq!(params, before);
    }

    #[test]
    fn positive_reward_raises_taken_action_probability() {
        let mut params = ClassifierParams::init(3, 4, 11);
        let s = state(&[0.4, -0.7, 1.2]);
        let before = policy(&s, &params)[RouteAction::Human.index()];
        let eps = vec![DecisionEpisode {
            state: s.clone(),
            action: RouteAction::Human,
            action_prob: before,
            reward: 1.0,
            instance_idx: 0,
        }];
        reinforce_update(&eps, &mut params, 0.01, false).unwrap();
        let after = policy(&s, &params)[RouteAction::Human.index()];
        assert!(after > before, "{after} !> {before}");
    }

    #[test]
    fn repeated_positive_updates_increase_monotonically() {
        let mut params = ClassifierParams::init(2, 3, 13);
        let s = state(&[0.3, 0.9]);
        let mut last = policy(&s, &params)[0];
        for _ in 0..200 {
            let eps = vec![DecisionEpisode {
                state: s.clone(),
                action: RouteAction::Model,
                action_prob: last,
                reward: 2.0,
                instance_idx: 0,
            }];
            reinforce_update(&eps, &mut params, 0.05, false).unwrap();
            let now = policy(&s, &params)[0];
            assert!(now >= last);
            last = now;
        }
        assert!(last > 0.99);
    }

    /// Surrogate objective for finite differences:
    /// mean_e r_e * ln pi(a_e | s_e).
    fn surrogate(episodes: &[DecisionEpisode], params: &ClassifierParams) -> f64 {
        episodes
            .iter()
            .map(|e| e.reward * policy(&e.state, params)[e.action.index()].ln())
            .sum::<f64>()
            / episodes.len() as f64
    }

    #[test]
    fn reinforce_gradient_matches_finite_differences() {
        let params0 = ClassifierParams::init(3, 4, 17);
        let eps = vec![
            episode(&[0.2, -0.4, 0.6], RouteAction::Model, 2.0, &params0),
            episode(&[-0.9, 0.1, 0.3], RouteAction::Human, -4.0, &params0),
        ];
        // Analytic update with lr=1 equals the objective gradient.
        let mut updated = params0.clone();
        reinforce_update(&eps, &mut updated, 1.0, false).unwrap();

        let h = 1e-4;
        let mut worst: f64 = 0.0;
        let mut check = |get: &dyn Fn(&ClassifierParams) -> f64,
                         set: &dyn Fn(&mut ClassifierParams, f64),
                         analytic: f64| {
            let base = get(&params0);
            let mut plus = params0.clone();
            set(&mut plus, base + h);
            let mut minus = params0.clone();
            set(&mut minus, base - h);
            let fd = (surrogate(&eps, &plus) - surrogate(&eps, &minus)) / (2.0 * h);
            let denom = analytic.abs().max(fd.abs());
            if denom > 1e-7 {
                worst = worst.max((analytic - fd).abs() / denom);
            }
        };

        for i in 0..3 {
            for j in 0..4 {
                let analytic = updated.w1[[i, j]] - params0.w1[[i, j]];
                check(
                    &move |p: &ClassifierParams| p.w1[[i, j]],
                    &move |p: &mut ClassifierParams, v| p.w1[[i, j]] = v,
                    analytic,
                );
            }
        }
        for j in 0..4 {
            let analytic = updated.b1[j] - params0.b1[j];
            check(
                &move |p: &ClassifierParams| p.b1[j],
                &move |p: &mut ClassifierParams, v| p.b1[j] = v,
                analytic,
            );
            for k in 0..2 {
                let analytic = updated.w2[[j, k]] - params0.w2[[j, k]];
                check(
                    &move |p: &ClassifierParams| p.w2[[j, k]],
                    &move |p: &mut ClassifierParams, v| p.w2[[j, k]] = v,
                    analytic,
                );
            }
        }
        for k in 0..2 {
            let analytic = updated.b2[k] - params0.b2[k];
            check(
                &move |p: &ClassifierParams| p.b2[k],
                &move |p: &mut ClassifierParams, v| p.b2[k] = v,
                analytic,
            );
        }
        assert!(worst < 1e-4, "max relative error {worst}");
    }

    #[test]
    fn state_gradients_match_finite_differences() {
        let params = ClassifierParams::init(3, 5, 19);
        let eps = vec![
            episode(&[0.25, -0.5, 0.75], RouteAction::Model, 2.0, &params),
            episode(&[-0.3, 0.8, -0.1], RouteAction::Human, 1.0, &params),
        ];
        let mut scratch = params.clone();
        let grads = reinforce_update(&eps, &mut scratch, 0.0, true).unwrap().unwrap();
        assert_eq!(grads.len(), 2);

        let h = 1e-5;
        for (e, g) in eps.iter().zip(&grads) {
            assert_eq!(g.len(), 3);
            assert!(g.iter().all(|v| v.is_finite()));
            for i in 0..3 {
                let mut plus = e.clone();
                plus.state.0[i] += h;
                let mut minus = e.clone();
                minus.state.0[i] -= h;
                // Per-episode objective contribution (already includes the
                // 1/n batch scale).
                let f = |ep: &DecisionEpisode| {
                    ep.reward * policy(&ep.state, &params)[ep.action.index()].ln() / eps.len() as f64
                };
                let fd = (f(&plus) - f(&minus)) / (2.0 * h);
                let denom = g[i].abs().max(fd.abs());
                if denom > 1e-7 {
                    assert!((g[i] - fd).abs() / denom < 1e-4);
                }
            }
        }
    }

    #[test]
    fn non_finite_reward_is_rejected() {
        let mut params = ClassifierParams::init(2, 2, 23);
        let eps = vec![episode(&[0.1, 0.2], RouteAction::Model, f64::NAN, &params)];
        let err = reinforce_update(&eps, &mut params, 0.01, false).unwrap_err();
        assert!(matches!(err, HandoffError::NonFiniteUpdate));
    }

    #[test]
    fn hard_wired_params_force_the_action() {
        let params = ClassifierParams::hard_wired(4, 3, RouteAction::Human);
        let probs = policy(&state(&[0.0, 1.0, -1.0, 2.0]), &params);
        assert!(probs[RouteAction::Human.index()] > 0.999_999);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(sample_action(probs, &mut rng).0, RouteAction::Human);
    }

    #[test]
    fn classifier_checkpoint_round_trips() {
        let params = ClassifierParams::init(4, 6, 31);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("classifier.json");
        save_classifier(&params, &path).unwrap();
        assert_eq!(load_classifier(&path).unwrap(), params);
    }
}
