//! Streaming deployment: test turns arrive in dialog order; each turn is
//! routed by the classifier (or forced to the model in baseline mode), the
//! oracle human agent and oracle user feedback supply ground truth, and the
//! configured online updates run after every batch of turns.
//!
//! A full run over one ordering of the test set produces a
//! [`MetricsReport`]; [`run_permutations`] repeats it over shuffled dialog
//! orders with fresh classifiers and fresh model copies.

use ndarray::Array1;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::handoff::{
    policy, reinforce_update, reward, sample_action, ClassifierParams, DecisionEpisode,
    HandoffError, RewardSpec, RouteAction,
};
use crate::memn2n::{
    apply_sgd, argmax, backprop_state_grads, evaluate, loss_and_gradients, EncodedInstance,
    Memn2nError, Model,
};

#[derive(Debug, Error)]
pub enum DeployError {
    #[error(transparent)]
    Model(#[from] Memn2nError),
    #[error(transparent)]
    Handoff(#[from] HandoffError),
}

/// Deployment regimes.
///
/// - `Baseline`: every turn answered by the frozen model; no classifier.
/// - `Handoff`: classifier routes turns and learns; model frozen.
/// - `HandoffOnline`: classifier learns and the model is updated online
///   (classifier gradients through the state vector, supervised steps on
///   collected human responses, and a fixed number of replay batches).
/// - `HandoffAdaptive`: like `HandoffOnline`, but the replay batch count is
///   chosen from the drop in dev accuracy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Baseline,
    Handoff,
    HandoffOnline,
    HandoffAdaptive,
}

impl Mode {
    pub fn uses_classifier(self) -> bool {
        self != Mode::Baseline
    }

    pub fn updates_model(self) -> bool {
        matches!(self, Mode::HandoffOnline | Mode::HandoffAdaptive)
    }

    pub const ALL: [Mode; 4] = [
        Mode::Baseline,
        Mode::Handoff,
        Mode::HandoffOnline,
        Mode::HandoffAdaptive,
    ];
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Mode::Baseline => "baseline",
            Mode::Handoff => "handoff",
            Mode::HandoffOnline => "handoff-online",
            Mode::HandoffAdaptive => "handoff-adaptive",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "baseline" => Ok(Mode::Baseline),
            "handoff" => Ok(Mode::Handoff),
            "handoff-online" => Ok(Mode::HandoffOnline),
            "handoff-adaptive" => Ok(Mode::HandoffAdaptive),
            other => Err(format!(
                "unknown mode {other:?}; expected baseline | handoff | handoff-online | handoff-adaptive"
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeploymentConfig {
    pub mode: Mode,
    pub reward: RewardSpec,
    /// Turns per deployment batch; updates run at batch boundaries.
    pub deploy_batch: usize,
    /// Supervised passes over each batch's newly collected human responses.
    pub human_sl_repeats: usize,
    /// Replay batches per deployment batch in `HandoffOnline` mode.
    pub replay_batches: usize,
    /// Replay batches per percentage point of dev-accuracy drop in
    /// `HandoffAdaptive` mode.
    pub alpha: f64,
    /// Upper bound on adaptive replay batches.
    pub alpha_cap: usize,
    pub classifier_lr: f64,
    pub model_lr: f64,
    pub classifier_hidden: usize,
    /// Evaluate dev accuracy on only this many leading dev instances
    /// (adaptive mode); `None` uses the full dev set.
    pub dev_eval_size: Option<usize>,
}

impl Default for DeploymentConfig {
    fn default() -> Self {
        DeploymentConfig {
            mode: Mode::Baseline,
            reward: RewardSpec::default(),
            deploy_batch: 32,
            human_sl_repeats: 3,
            replay_batches: 2,
            alpha: 0.5,
            alpha_cap: 10,
            classifier_lr: 0.01,
            model_lr: 0.01,
            classifier_hidden: 20,
            dev_eval_size: None,
        }
    }
}

/// Replay batches for the adaptive regime: proportional to the drop of the
/// current dev accuracy below the best seen, rounded, capped, never
/// negative. Accuracies are percentage points.
pub fn adaptive_batches(v_current_acc: f64, v_best_acc: f64, alpha: f64, cap: usize) -> usize {
    let drop = (v_best_acc - v_current_acc).max(0.0);
    ((alpha * drop).round() as usize).min(cap)
}

/// Original training instances plus the human responses collected during
/// deployment. Replay samples uniformly over the union.
#[derive(Debug, Clone)]
pub struct AugmentedStore {
    base: Vec<EncodedInstance>,
    collected: Vec<EncodedInstance>,
}

impl AugmentedStore {
    pub fn new(base: Vec<EncodedInstance>) -> Self {
        AugmentedStore {
            base,
            collected: Vec::new(),
        }
    }

    pub fn add(&mut self, instance: EncodedInstance) {
        self.collected.push(instance);
    }

    pub fn len(&self) -> usize {
        self.base.len() + self.collected.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn collected_len(&self) -> usize {
        self.collected.len()
    }

    pub fn get(&self, idx: usize) -> &EncodedInstance {
        if idx < self.base.len() {
            &self.base[idx]
        } else {
            &self.collected[idx - self.base.len()]
        }
    }

    /// Uniform sample of `n` distinct instances (all of them if the store is
    /// smaller than `n`).
    pub fn sample(&self, n: usize, rng: &mut ChaCha8Rng) -> Vec<&EncodedInstance> {
        let total = self.len();
        if total <= n {
            return (0..total).map(|i| self.get(i)).collect();
        }
        rand::seq::index::sample(rng, total, n)
            .into_iter()
            .map(|i| self.get(i))
            .collect()
    }
}

/// Running counters for one deployment pass. The accounting identities hold
/// at every step: turns = human + model_correct + model_incorrect, and the
/// reported ratios recompute exactly from the counters.
#[derive(Debug, Clone)]
pub struct MetricsAccumulator {
    pub n_human: usize,
    pub n_model_correct: usize,
    pub n_model_incorrect: usize,
    pub total_reward: f64,
    dialogs_done: usize,
    dialogs_ok: usize,
    current_dialog: Option<(usize, bool)>,
    /// Best dev per-turn accuracy seen so far (percentage points).
    pub v_best_acc: f64,
}

impl MetricsAccumulator {
    pub fn new(v_best_acc: f64) -> Self {
        MetricsAccumulator {
            n_human: 0,
            n_model_correct: 0,
            n_model_incorrect: 0,
            total_reward: 0.0,
            dialogs_done: 0,
            dialogs_ok: 0,
            current_dialog: None,
            v_best_acc,
        }
    }

    pub fn record_turn(
        &mut self,
        dialog_id: usize,
        action: RouteAction,
        delivered_correct: bool,
        reward: f64,
    ) {
        match (action, delivered_correct) {
            (RouteAction::Human, _) => self.n_human += 1,
            (RouteAction::Model, true) => self.n_model_correct += 1,
            (RouteAction::Model, false) => self.n_model_incorrect += 1,
        }
        self.total_reward += reward;
        match &mut self.current_dialog {
            Some((id, ok)) if *id == dialog_id => *ok &= delivered_correct,
            current => {
                if let Some((_, ok)) = current.take() {
                    self.dialogs_done += 1;
                    self.dialogs_ok += usize::from(ok);
                }
                *current = Some((dialog_id, delivered_correct));
            }
        }
    }

    /// Commits the trailing dialog; call once after the last turn.
    pub fn finish(&mut self) {
        if let Some((_, ok)) = self.current_dialog.take() {
            self.dialogs_done += 1;
            self.dialogs_ok += usize::from(ok);
        }
    }

    pub fn total_turns(&self) -> usize {
        self.n_human + self.n_model_correct + self.n_model_incorrect
    }

    /// Fraction of turns answered correctly from the user's side, whoever
    /// answered.
    pub fn user_per_turn(&self) -> f64 {
        let total = self.total_turns();
        if total == 0 {
            0.0
        } else {
            (self.n_human + self.n_model_correct) as f64 / total as f64
        }
    }

    /// Fraction of completed dialogs with every turn delivered correctly.
    pub fn user_per_dialog(&self) -> f64 {
        if self.dialogs_done == 0 {
            0.0
        } else {
            self.dialogs_ok as f64 / self.dialogs_done as f64
        }
    }

    /// Fraction of turns answered by the model.
    pub fn model_ratio(&self) -> f64 {
        let total = self.total_turns();
        if total == 0 {
            0.0
        } else {
            (self.n_model_correct + self.n_model_incorrect) as f64 / total as f64
        }
    }
}

/// One row of the per-batch time series. Accuracy/ratio columns are
/// cumulative percentages; `total_reward` is cumulative; `replay_batches` is
/// this batch's replay count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchRow {
    pub batch_no: usize,
    pub user_per_turn: f64,
    pub user_per_dialog: f64,
    pub model_ratio: f64,
    pub total_reward: f64,
    pub replay_batches: usize,
}

pub fn series_to_csv(rows: &[BatchRow]) -> String {
    let mut out =
        String::from("batch_no,user_per_turn,user_per_dialog,model_ratio,total_reward,replay_batches\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.batch_no, r.user_per_turn, r.user_per_dialog, r.model_ratio, r.total_reward, r.replay_batches
        ));
    }
    out
}

/// Final metrics of one deployment pass. Accuracies and ratios are
/// percentages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub permutation: usize,
    pub user_per_turn: f64,
    pub user_per_dialog: f64,
    pub model_ratio: f64,
    pub final_model_per_turn: f64,
    pub final_model_per_dialog: f64,
    pub total_reward: f64,
    pub turns: usize,
    pub n_human: usize,
    pub n_model_correct: usize,
    pub n_model_incorrect: usize,
    pub series: Vec<BatchRow>,
}

#[derive(Debug, Clone)]
pub struct DeploymentOutcome {
    pub report: MetricsReport,
    pub model: Model,
    pub classifier: ClassifierParams,
    pub store: AugmentedStore,
}

/// Runs one sequential pass over `test_seq` (instances in dialog order,
/// dialogs contiguous), applying the mode's updates after every
/// `deploy_batch` turns and once more for a trailing partial batch.
#[allow(clippy::too_many_arguments)]
pub fn run_deployment(
    test_seq: &[EncodedInstance],
    mut model: Model,
    mut classifier: ClassifierParams,
    dev_set: &[EncodedInstance],
    mut store: AugmentedStore,
    config: &DeploymentConfig,
    permutation: usize,
    action_rng: &mut ChaCha8Rng,
    replay_rng: &mut ChaCha8Rng,
) -> Result<DeploymentOutcome, DeployError> {
    assert!(!test_seq.is_empty(), "deployment needs at least one turn");
    let mode = config.mode;
    let deploy_batch = config.deploy_batch.max(1);

    let dev_slice = match config.dev_eval_size {
        Some(n) => &dev_set[..n.min(dev_set.len())],
        None => dev_set,
    };

    let v_best0 = if mode == Mode::HandoffAdaptive {
        100.0
            * evaluate(
                dev_slice,
                &model.params,
                &model.hyper,
                &model.candidates,
            )
            .per_turn
    } else {
        0.0
    };
    let mut acc = MetricsAccumulator::new(v_best0);

    let mut cand_enc = model.encode_candidates();
    let mut episodes: Vec<DecisionEpisode> = Vec::with_capacity(deploy_batch);
    let mut collected_batch: Vec<EncodedInstance> = Vec::new();
    let mut series: Vec<BatchRow> = Vec::new();
    let mut batch_no = 0usize;

    for (idx, instance) in test_seq.iter().enumerate() {
        let fwd = model.forward_with(instance, &cand_enc);

        let (action, action_prob) = if mode.uses_classifier() {
            let probs = policy(&fwd.state, &classifier);
            sample_action(probs, action_rng)
        } else {
            (RouteAction::Model, 1.0)
        };

        let delivered_correct = match action {
            // Oracle human agent: the ground-truth response is delivered and
            // the exchange joins the store.
            RouteAction::Human => {
                store.add(instance.clone());
                collected_batch.push(instance.clone());
                true
            }
            // Oracle user feedback: compares the model's top candidate with
            // the ground truth.
            RouteAction::Model => argmax(&fwd.scores) == instance.answer,
        };
        let r = reward(action, delivered_correct, &config.reward);
        acc.record_turn(instance.dialog_id, action, delivered_correct, r);

        if mode.uses_classifier() {
            episodes.push(DecisionEpisode {
                state: fwd.state,
                action,
                action_prob,
                reward: r,
                instance_idx: idx,
            });
        }

        let boundary = (idx + 1) % deploy_batch == 0 || idx + 1 == test_seq.len();
        if !boundary {
            continue;
        }
        batch_no += 1;
        let mut replay_used = 0usize;

        if mode.uses_classifier() && !episodes.is_empty() {
            // (1) Policy update; optionally continue its gradient through
            // the state vector into the model. This must run before any
            // supervised update so the recomputed forward passes match the
            // recorded states.
            let state_grads = reinforce_update(
                &episodes,
                &mut classifier,
                config.classifier_lr,
                mode.updates_model(),
            )?;
            if let Some(state_grads) = state_grads {
                let batch: Vec<&EncodedInstance> = episodes
                    .iter()
                    .map(|e| &test_seq[e.instance_idx])
                    .collect();
                // `reinforce_update` returns ascent-direction gradients;
                // negate for the descent step.
                let descent: Vec<Array1<f64>> =
                    state_grads.iter().map(|g| g.mapv(|v| -v)).collect();
                let grads = backprop_state_grads(&batch, &model.params, &model.hyper, &descent);
                apply_sgd(&mut model.params, &grads, config.model_lr, None);
            }

            if mode.updates_model() {
                // (2) Supervised steps on this batch's human responses.
                if !collected_batch.is_empty() {
                    for _ in 0..config.human_sl_repeats {
                        let batch: Vec<&EncodedInstance> = collected_batch.iter().collect();
                        let (_, grads) = loss_and_gradients(
                            &batch,
                            &model.params,
                            &model.hyper,
                            &model.candidates,
                            None,
                        )?;
                        apply_sgd(&mut model.params, &grads, config.model_lr, None);
                    }
                }

                // (3) Replay from the augmented store (which already holds
                // this batch's collected responses).
                replay_used = match mode {
                    Mode::HandoffOnline => config.replay_batches,
                    Mode::HandoffAdaptive => {
                        let v_current = 100.0
                            * evaluate(
                                dev_slice,
                                &model.params,
                                &model.hyper,
                                &model.candidates,
                            )
                            .per_turn;
                        let b =
                            adaptive_batches(v_current, acc.v_best_acc, config.alpha, config.alpha_cap);
                        acc.v_best_acc = acc.v_best_acc.max(v_current);
                        b
                    }
                    _ => 0,
                };
                for _ in 0..replay_used {
                    let grads = {
                        let batch = store.sample(model.hyper.batch_size, replay_rng);
                        loss_and_gradients(
                            &batch,
                            &model.params,
                            &model.hyper,
                            &model.candidates,
                            None,
                        )?
                        .1
                    };
                    apply_sgd(&mut model.params, &grads, config.model_lr, None);
                }

                cand_enc = model.encode_candidates();
            }
        }

        series.push(BatchRow {
            batch_no,
            user_per_turn: 100.0 * acc.user_per_turn(),
            user_per_dialog: 100.0 * acc.user_per_dialog(),
            model_ratio: 100.0 * acc.model_ratio(),
            total_reward: acc.total_reward,
            replay_batches: replay_used,
        });
        episodes.clear();
        collected_batch.clear();
    }

    acc.finish();
    debug_assert_eq!(acc.total_turns(), test_seq.len());
    debug_assert_eq!(store.collected_len(), acc.n_human);

    let final_acc = evaluate(test_seq, &model.params, &model.hyper, &model.candidates);
    let report = MetricsReport {
        permutation,
        user_per_turn: 100.0 * acc.user_per_turn(),
        user_per_dialog: 100.0 * acc.user_per_dialog(),
        model_ratio: 100.0 * acc.model_ratio(),
        final_model_per_turn: 100.0 * final_acc.per_turn,
        final_model_per_dialog: 100.0 * final_acc.per_dialog,
        total_reward: acc.total_reward,
        turns: acc.total_turns(),
        n_human: acc.n_human,
        n_model_correct: acc.n_model_correct,
        n_model_incorrect: acc.n_model_incorrect,
        series,
    };
    Ok(DeploymentOutcome {
        report,
        model,
        classifier,
        store,
    })
}

fn sub_rng(master: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    rng.set_stream(stream);
    rng
}

/// Splits a dialog-contiguous instance sequence into per-dialog groups.
pub fn group_by_dialog(instances: &[EncodedInstance]) -> Vec<Vec<EncodedInstance>> {
    let mut groups: Vec<Vec<EncodedInstance>> = Vec::new();
    for instance in instances {
        match groups.last_mut() {
            Some(group) if group[0].dialog_id == instance.dialog_id => {
                group.push(instance.clone())
            }
            _ => groups.push(vec![instance.clone()]),
        }
    }
    groups
}

/// One permutation: shuffles dialog order (turns stay in order inside each
/// dialog), draws a fresh classifier, copies the trained model and runs a
/// deployment pass. Fully determined by `base_seed + perm`.
pub fn run_one_permutation(
    perm: usize,
    base_seed: u64,
    model: &Model,
    test_groups: &[Vec<EncodedInstance>],
    dev_set: &[EncodedInstance],
    base_store: &[EncodedInstance],
    config: &DeploymentConfig,
) -> Result<DeploymentOutcome, DeployError> {
    let master = base_seed.wrapping_add(perm as u64);
    let mut shuffle_rng = sub_rng(master, 0);
    let mut order: Vec<usize> = (0..test_groups.len()).collect();
    order.shuffle(&mut shuffle_rng);
    let seq: Vec<EncodedInstance> = order
        .into_iter()
        .flat_map(|i| test_groups[i].iter().cloned())
        .collect();

    let mut classifier_rng = sub_rng(master, 1);
    let classifier = ClassifierParams::init_with_rng(
        model.hyper.embedding_dim,
        config.classifier_hidden,
        &mut classifier_rng,
    );
    let mut action_rng = sub_rng(master, 2);
    let mut replay_rng = sub_rng(master, 3);

    run_deployment(
        &seq,
        model.clone(),
        classifier,
        dev_set,
        AugmentedStore::new(base_store.to_vec()),
        config,
        perm,
        &mut action_rng,
        &mut replay_rng,
    )
}

/// Runs `n` independent permutations sequentially.
pub fn run_permutations(
    n: usize,
    base_seed: u64,
    model: &Model,
    test_instances: &[EncodedInstance],
    dev_set: &[EncodedInstance],
    base_store: &[EncodedInstance],
    config: &DeploymentConfig,
) -> Result<Vec<DeploymentOutcome>, DeployError> {
    assert!(n >= 1);
    let groups = group_by_dialog(test_instances);
    (0..n)
        .map(|perm| {
            run_one_permutation(perm, base_seed, model, &groups, dev_set, base_store, config)
        })
        .collect()
}

/// Mean/std pair per headline metric, over permutations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsSummary {
    pub user_per_turn: f64,
    pub user_per_dialog: f64,
    pub model_ratio: f64,
    pub final_model_per_turn: f64,
    pub final_model_per_dialog: f64,
    pub total_reward: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AggregateStats {
    pub runs: usize,
    pub mean: MetricsSummary,
    pub std: MetricsSummary,
}

fn mean_std(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count();
    if n == 0 {
        return (0.0, 0.0);
    }
    let mean = values.clone().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, 0.0);
    }
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

/// Aggregates per-permutation reports into means and sample standard
/// deviations (zero for a single run).
pub fn aggregate(reports: &[MetricsReport]) -> AggregateStats {
    macro_rules! stat {
        ($field:ident) => {
            mean_std(reports.iter().map(|r| r.$field))
        };
    }
    let user_per_turn = stat!(user_per_turn);
    let user_per_dialog = stat!(user_per_dialog);
    let model_ratio = stat!(model_ratio);
    let final_model_per_turn = stat!(final_model_per_turn);
    let final_model_per_dialog = stat!(final_model_per_dialog);
    let total_reward = stat!(total_reward);
    AggregateStats {
        runs: reports.len(),
        mean: MetricsSummary {
            user_per_turn: user_per_turn.0,
            user_per_dialog: user_per_dialog.0,
            model_ratio: model_ratio.0,
            final_model_per_turn: final_model_per_turn.0,
            final_model_per_dialog: final_model_per_dialog.0,
            total_reward: total_reward.0,
        },
        std: MetricsSummary {
            user_per_turn: user_per_turn.1,
            user_per_dialog: user_per_dialog.1,
            model_ratio: model_ratio.1,
            final_model_per_turn: final_model_per_turn.1,
            final_model_per_dialog: final_model_per_dialog.1,
            total_reward: total_reward.1,
        },
    }
}
