//! Supervised training: SGD with step-annealed learning rate, shuffled
//! batches, best-on-dev checkpointing, and evaluation.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{
    argmax, encode_candidates, hop_forward, loss_and_gradients, EncodedCandidates,
    EncodedInstance, Hyperparams, Model, ModelParams,
};
use crate::corpus::Vocabulary;

#[derive(Debug, Error)]
pub enum Memn2nError {
    #[error("loss is not finite")]
    NonFiniteLoss,
    #[error("training diverged at epoch {0}: loss is not finite")]
    Divergence(usize),
    #[error("invalid hyperparameters: {0}")]
    BadHyper(String),
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint format: {0}")]
    Format(#[from] serde_json::Error),
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
}

/// Step-annealed learning rate: `lr0 * ratio^(epoch / period)`.
pub fn learning_rate(epoch: usize, hyper: &Hyperparams) -> f64 {
    hyper.lr0 * hyper.anneal_ratio.powi((epoch / hyper.anneal_period) as i32)
}

/// One SGD step at a fixed learning rate, with optional global-norm clipping.
pub fn apply_sgd(params: &mut ModelParams, grads: &ModelParams, lr: f64, clip: Option<f64>) {
    let mut step = lr;
    if let Some(clip) = clip {
        let norm = grads.global_norm();
        if norm > clip {
            step *= clip / norm;
        }
    }
    for ((_, p), (_, g)) in params.matrices_mut().into_iter().zip(grads.matrices()) {
        p.scaled_add(-step, g);
    }
}

/// One SGD step at the epoch's annealed learning rate.
pub fn sgd_step(params: &mut ModelParams, grads: &ModelParams, epoch: usize, hyper: &Hyperparams) {
    apply_sgd(params, grads, learning_rate(epoch, hyper), hyper.grad_clip);
}

/// Per-turn and per-dialog accuracy, both as fractions in [0, 1].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Accuracy {
    pub per_turn: f64,
    pub per_dialog: f64,
}

/// Fraction of turns whose top-scored candidate is the gold one, and of
/// dialogs where that holds for every turn. A dialog with a single wrong
/// turn counts as failed.
pub fn evaluate(
    instances: &[EncodedInstance],
    params: &ModelParams,
    hyper: &Hyperparams,
    candidates: &EncodedCandidates,
) -> Accuracy {
    if instances.is_empty() {
        return Accuracy {
            per_turn: 0.0,
            per_dialog: 0.0,
        };
    }
    let cand_enc = encode_candidates(candidates, &params.w);
    let mut correct = 0usize;
    let mut dialogs: BTreeMap<usize, bool> = BTreeMap::new();
    for instance in instances {
        let (state, _) = hop_forward(instance, params, hyper);
        let scores = cand_enc.matrix.dot(&state);
        let ok = argmax(&scores) == instance.answer;
        correct += usize::from(ok);
        *dialogs.entry(instance.dialog_id).or_insert(true) &= ok;
    }
    let per_turn = correct as f64 / instances.len() as f64;
    let per_dialog = dialogs.values().filter(|&&ok| ok).count() as f64 / dialogs.len() as f64;
    Accuracy {
        per_turn,
        per_dialog,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub dev_per_turn: f64,
    pub best_dev_per_turn: f64,
}

/// Renders the training log as CSV.
pub fn log_to_csv(log: &[EpochLog]) -> String {
    let mut out = String::from("epoch,lr,train_loss,dev_per_turn,best_dev_per_turn\n");
    for row in log {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            row.epoch, row.lr, row.train_loss, row.dev_per_turn, row.best_dev_per_turn
        ));
    }
    out
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters of the epoch with the best dev per-turn accuracy.
    pub params: ModelParams,
    pub best_dev_per_turn: f64,
    pub log: Vec<EpochLog>,
}

/// Full training loop: shuffled batches per epoch, annealed SGD, returning
/// the parameters with the highest dev per-turn accuracy. Deterministic in
/// (`hyper.init_seed`, `shuffle_seed`).
pub fn train(
    train_set: &[EncodedInstance],
    dev_set: &[EncodedInstance],
    hyper: &Hyperparams,
    candidates: &EncodedCandidates,
    vocab_size: usize,
    shuffle_seed: u64,
) -> Result<TrainOutcome, Memn2nError> {
    hyper.validate()?;
    assert!(!train_set.is_empty() && !dev_set.is_empty());

    let mut params = ModelParams::init(vocab_size, hyper);
    let mut best_params = params.clone();
    let mut best_dev = f64::NEG_INFINITY;
    let mut rng = ChaCha8Rng::seed_from_u64(shuffle_seed);
    let mut log = Vec::with_capacity(hyper.max_epochs);
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    for epoch in 0..hyper.max_epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(hyper.batch_size) {
            let batch: Vec<&EncodedInstance> = chunk.iter().map(|&i| &train_set[i]).collect();
            let (loss, grads) = loss_and_gradients(&batch, &params, hyper, candidates, None)
                .map_err(|_| Memn2nError::Divergence(epoch))?;
            loss_sum += loss * batch.len() as f64;
            sgd_step(&mut params, &grads, epoch, hyper);
        }
        let train_loss = loss_sum / train_set.len() as f64;
        let dev_acc = evaluate(dev_set, &params, hyper, candidates).per_turn;
        if dev_acc > best_dev {
            best_dev = dev_acc;
            best_params = params.clone();
        }
        log.push(EpochLog {
            epoch,
            lr: learning_rate(epoch, hyper),
            train_loss,
            dev_per_turn: dev_acc,
            best_dev_per_turn: best_dev,
        });
    }

    Ok(TrainOutcome {
        params: best_params,
        best_dev_per_turn: best_dev,
        log,
    })
}

const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    format_version: u32,
    hyper: Hyperparams,
    vocab: Vocabulary,
    vocab_hash: String,
    candidates: EncodedCandidates,
    params: ModelParams,
}

impl Model {
    /// Writes the model as a versioned JSON checkpoint.
    pub fn save(&self, path: &Path) -> Result<(), Memn2nError> {
        let file = CheckpointFile {
            format_version: CHECKPOINT_VERSION,
            hyper: self.hyper.clone(),
            vocab: self.vocab.clone(),
            vocab_hash: self.vocab.hash_hex(),
            candidates: self.candidates.clone(),
            params: self.params.clone(),
        };
        let json = serde_json::to_string(&file)?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Model, Memn2nError> {
        let text = std::fs::read_to_string(path)?;
        let file: CheckpointFile = serde_json::from_str(&text)?;
        if file.format_version != CHECKPOINT_VERSION {
            return Err(Memn2nError::UnsupportedVersion(file.format_version));
        }
        Ok(Model {
            params: file.params,
            hyper: file.hyper,
            vocab: file.vocab,
            candidates: file.candidates,
        })
    }
}
