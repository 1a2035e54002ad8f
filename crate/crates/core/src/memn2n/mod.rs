//! The retrieval dialog model: a multi-hop memory network scoring a fixed
//! candidate set.
//!
//! A turn is encoded as a bag of position-weighted word embeddings. Each hop
//! attends over the memory sentences with a dot-product softmax, reads a
//! weighted sum of output embeddings and adds it to the running state. The
//! final state is the dialog state vector: it scores candidates through a
//! separate embedding matrix and doubles as the input to the handoff
//! classifier.

mod grad;
mod train;

pub use grad::{backprop_state_grads, loss_and_gradients};
pub use train::{
    apply_sgd, evaluate, learning_rate, log_to_csv, sgd_step, train, Accuracy, EpochLog,
    Memn2nError, TrainOutcome,
};

use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::corpus::{CandidateSet, Instance, Vocabulary, PAD_ID};

/// Standard deviation of the Gaussian weight initialization.
pub const INIT_SIGMA: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hyperparams {
    pub embedding_dim: usize,
    pub hops: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub anneal_ratio: f64,
    /// Epochs between learning-rate halvings (for the default ratio).
    pub anneal_period: usize,
    pub max_epochs: usize,
    /// Memory truncates to the most recent this many sentences.
    pub memory_cap: usize,
    pub init_seed: u64,
    pub grad_clip: Option<f64>,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Hyperparams {
            embedding_dim: 20,
            hops: 3,
            batch_size: 32,
            lr0: 0.01,
            anneal_ratio: 0.5,
            anneal_period: 25,
            max_epochs: 200,
            memory_cap: 130,
            init_seed: 599,
            grad_clip: None,
        }
    }
}

impl Hyperparams {
    pub fn validate(&self) -> Result<(), Memn2nError> {
        if self.embedding_dim == 0 {
            return Err(Memn2nError::BadHyper("embedding_dim must be >= 1".into()));
        }
        if self.hops == 0 {
            return Err(Memn2nError::BadHyper("hops must be >= 1".into()));
        }
        if !(self.anneal_ratio > 0.0 && self.anneal_ratio <= 1.0) {
            return Err(Memn2nError::BadHyper(
                "anneal_ratio must be in (0, 1]".into(),
            ));
        }
        if self.batch_size == 0 || self.anneal_period == 0 {
            return Err(Memn2nError::BadHyper(
                "batch_size and anneal_period must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// The trainable state: word embedding matrices `a`/`c` for memory input and
/// output representations, `b` for the query, temporal embeddings `t_a`/`t_c`
/// indexed by distance from the most recent memory sentence, and the
/// candidate embedding matrix `w`. All matrices are shared across hops.
///
/// The same struct doubles as the gradient container.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub a: Array2<f64>,
    pub b: Array2<f64>,
    pub c: Array2<f64>,
    pub t_a: Array2<f64>,
    pub t_c: Array2<f64>,
    pub w: Array2<f64>,
}

impl ModelParams {
    /// Gaussian init, deterministic in the seed.
    pub fn init(vocab_size: usize, hyper: &Hyperparams) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(hyper.init_seed);
        let normal = Normal::new(0.0, INIT_SIGMA).unwrap();
        let d = hyper.embedding_dim;
        let mut fill = |rows: usize| {
            Array2::from_shape_fn((rows, d), |_| normal.sample(&mut rng))
        };
        let a = fill(vocab_size);
        let b = fill(vocab_size);
        let c = fill(vocab_size);
        let t_a = fill(hyper.memory_cap);
        let t_c = fill(hyper.memory_cap);
        let w = fill(vocab_size);
        ModelParams { a, b, c, t_a, t_c, w }
    }

    pub fn zeros(vocab_size: usize, memory_cap: usize, dim: usize) -> Self {
        ModelParams {
            a: Array2::zeros((vocab_size, dim)),
            b: Array2::zeros((vocab_size, dim)),
            c: Array2::zeros((vocab_size, dim)),
            t_a: Array2::zeros((memory_cap, dim)),
            t_c: Array2::zeros((memory_cap, dim)),
            w: Array2::zeros((vocab_size, dim)),
        }
    }

    pub fn zeros_like(&self) -> Self {
        ModelParams {
            a: Array2::zeros(self.a.raw_dim()),
            b: Array2::zeros(self.b.raw_dim()),
            c: Array2::zeros(self.c.raw_dim()),
            t_a: Array2::zeros(self.t_a.raw_dim()),
            t_c: Array2::zeros(self.t_c.raw_dim()),
            w: Array2::zeros(self.w.raw_dim()),
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.a.nrows()
    }

    pub fn dim(&self) -> usize {
        self.a.ncols()
    }

    pub fn memory_cap(&self) -> usize {
        self.t_a.nrows()
    }

    pub fn matrices(&self) -> [(&'static str, &Array2<f64>); 6] {
        [
            ("a", &self.a),
            ("b", &self.b),
            ("c", &self.c),
            ("t_a", &self.t_a),
            ("t_c", &self.t_c),
            ("w", &self.w),
        ]
    }

    pub fn matrices_mut(&mut self) -> [(&'static str, &mut Array2<f64>); 6] {
        [
            ("a", &mut self.a),
            ("b", &mut self.b),
            ("c", &mut self.c),
            ("t_a", &mut self.t_a),
            ("t_c", &mut self.t_c),
            ("w", &mut self.w),
        ]
    }

    pub fn global_norm(&self) -> f64 {
        self.matrices()
            .iter()
            .map(|(_, m)| m.iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.matrices()
            .iter()
            .all(|(_, m)| m.iter().all(|v| v.is_finite()))
    }
}

/// An instance with token ids resolved, ready for the model.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncodedInstance {
    pub memory: Vec<Vec<usize>>,
    pub query: Vec<usize>,
    pub answer: usize,
    pub dialog_id: usize,
    pub turn_index: usize,
}

pub fn encode_instance(instance: &Instance, vocab: &Vocabulary) -> EncodedInstance {
    EncodedInstance {
        memory: instance.memory.iter().map(|s| vocab.encode(s)).collect(),
        query: vocab.encode(&instance.query),
        answer: instance.answer,
        dialog_id: instance.dialog_id,
        turn_index: instance.turn_index,
    }
}

pub fn encode_instances(instances: &[Instance], vocab: &Vocabulary) -> Vec<EncodedInstance> {
    instances.iter().map(|i| encode_instance(i, vocab)).collect()
}

/// Candidate responses as token-id sequences, in candidate-index order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncodedCandidates {
    sentences: Vec<Vec<usize>>,
}

impl EncodedCandidates {
    pub fn new(sentences: Vec<Vec<usize>>) -> Self {
        EncodedCandidates { sentences }
    }

    pub fn from_candidate_set(candidates: &CandidateSet, vocab: &Vocabulary) -> Self {
        EncodedCandidates {
            sentences: candidates.iter().map(|c| vocab.encode(c)).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &[usize]> {
        self.sentences.iter().map(Vec::as_slice)
    }
}

/// Bag-of-words encodings of every candidate under the current `w` matrix;
/// recompute whenever `w` changes.
#[derive(Debug, Clone)]
pub struct CandidateEncoding {
    /// One row per candidate.
    pub matrix: Array2<f64>,
}

pub fn encode_candidates(candidates: &EncodedCandidates, w: &Array2<f64>) -> CandidateEncoding {
    let d = w.ncols();
    let mut matrix = Array2::zeros((candidates.len(), d));
    for (y, tokens) in candidates.iter().enumerate() {
        let mut row = matrix.row_mut(y);
        for &tok in tokens.iter().filter(|&&t| t != PAD_ID) {
            row.scaled_add(1.0, &w.row(tok));
        }
    }
    CandidateEncoding { matrix }
}

/// The final hop state: the model's summary of the dialog so far. Scores
/// candidates and feeds the handoff classifier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DialogStateVector(pub Array1<f64>);

impl DialogStateVector {
    pub fn dim(&self) -> usize {
        self.0.len()
    }
}

/// Per-sentence memory representations: `a` feeds attention, `c` the read.
#[derive(Debug, Clone)]
pub struct EncodedMemory {
    pub a: Array2<f64>,
    pub c: Array2<f64>,
}

impl EncodedMemory {
    pub fn len(&self) -> usize {
        self.a.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Position weight for word `j` (0-based) of a `len`-word sentence at
/// embedding dimension `k` (0-based) of `dim`. Midpoint form: identically 1
/// for single-word sentences, so such a sentence encodes to its embedding
/// row.
pub fn position_weight(j: usize, len: usize, k: usize, dim: usize) -> f64 {
    let j = (j + 1) as f64;
    let k = (k + 1) as f64;
    let len = len as f64;
    let dim = dim as f64;
    1.0 + 4.0 * (k - (dim + 1.0) / 2.0) * (j - (len + 1.0) / 2.0) / (dim * len)
}

/// The full `len`×`dim` position-weight matrix.
pub fn position_weights(len: usize, dim: usize) -> Array2<f64> {
    Array2::from_shape_fn((len, dim), |(j, k)| position_weight(j, len, k, dim))
}

/// Position-weighted bag of embedding rows. Padding contributes nothing; an
/// empty (or all-padding) sentence encodes to the zero vector.
pub fn encode_sentence(tokens: &[usize], matrix: &Array2<f64>) -> Array1<f64> {
    let d = matrix.ncols();
    let ids: Vec<usize> = tokens.iter().copied().filter(|&t| t != PAD_ID).collect();
    let mut out = Array1::zeros(d);
    let len = ids.len();
    for (j, &tok) in ids.iter().enumerate() {
        let row = matrix.row(tok);
        for k in 0..d {
            out[k] += position_weight(j, len, k, d) * row[k];
        }
    }
    out
}

/// Plain (unweighted) bag of embedding rows; used for candidates.
pub fn encode_bag(tokens: &[usize], matrix: &Array2<f64>) -> Array1<f64> {
    let mut out = Array1::zeros(matrix.ncols());
    for &tok in tokens.iter().filter(|&&t| t != PAD_ID) {
        out.scaled_add(1.0, &matrix.row(tok));
    }
    out
}

/// Encodes an instance's memory, keeping only the most recent
/// `hyper.memory_cap` sentences. Row `i` is the `i`-th kept sentence in
/// chronological order; its temporal embedding slot counts back from the most
/// recent sentence (slot 0).
pub fn encode_memory(
    instance: &EncodedInstance,
    params: &ModelParams,
    hyper: &Hyperparams,
) -> EncodedMemory {
    let skip = instance.memory.len().saturating_sub(hyper.memory_cap);
    let sents = &instance.memory[skip..];
    let n = sents.len();
    let d = params.dim();
    let mut a = Array2::zeros((n, d));
    let mut c = Array2::zeros((n, d));
    for (i, sent) in sents.iter().enumerate() {
        let slot = n - 1 - i;
        let mut a_row = encode_sentence(sent, &params.a);
        a_row += &params.t_a.row(slot);
        a.row_mut(i).assign(&a_row);
        let mut c_row = encode_sentence(sent, &params.c);
        c_row += &params.t_c.row(slot);
        c.row_mut(i).assign(&c_row);
    }
    EncodedMemory { a, c }
}

pub fn softmax(z: &Array1<f64>) -> Array1<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut e = z.mapv(|v| (v - m).exp());
    let sum = e.sum();
    e.mapv_inplace(|v| v / sum);
    e
}

/// Attention over memory: softmax of dot products between the query state and
/// each input representation. Requires a non-empty memory.
pub fn attend(u: &Array1<f64>, mem: &EncodedMemory) -> Array1<f64> {
    softmax(&mem.a.dot(u))
}

/// Weighted sum of output representations.
pub fn read(p: &Array1<f64>, mem: &EncodedMemory) -> Array1<f64> {
    p.dot(&mem.c)
}

/// One hop's state update.
pub fn hop_update(o: &Array1<f64>, u: &Array1<f64>) -> Array1<f64> {
    o + u
}

/// Everything recorded on the way to the state vector, for the backward pass.
#[derive(Debug, Clone)]
pub(crate) struct HopCache {
    /// States u^0 .. u^H (H = hops).
    pub u_states: Vec<Array1<f64>>,
    /// Attention distributions per hop; empty when the memory is empty.
    pub attention: Vec<Array1<f64>>,
    pub mem: EncodedMemory,
    /// How many (oldest) memory sentences were truncated away.
    pub mem_skip: usize,
}

/// Runs the hop stack and returns the dialog state with its cache.
pub(crate) fn hop_forward(
    instance: &EncodedInstance,
    params: &ModelParams,
    hyper: &Hyperparams,
) -> (Array1<f64>, HopCache) {
    let mem = encode_memory(instance, params, hyper);
    let mem_skip = instance.memory.len().saturating_sub(hyper.memory_cap);
    let mut u = encode_sentence(&instance.query, &params.b);
    let mut u_states = vec![u.clone()];
    let mut attention = Vec::new();
    for _ in 0..hyper.hops {
        if mem.is_empty() {
            // Empty memory (first turn): nothing to attend over, o = 0.
            u_states.push(u.clone());
            continue;
        }
        let p = attend(&u, &mem);
        let o = read(&p, &mem);
        u = hop_update(&o, &u);
        attention.push(p);
        u_states.push(u.clone());
    }
    (
        u,
        HopCache {
            u_states,
            attention,
            mem,
            mem_skip,
        },
    )
}

/// Output of a full forward pass.
#[derive(Debug, Clone)]
pub struct Forward {
    pub scores: Array1<f64>,
    pub probs: Array1<f64>,
    pub state: DialogStateVector,
}

/// Forward pass against a precomputed candidate encoding.
pub fn forward_with(
    instance: &EncodedInstance,
    params: &ModelParams,
    hyper: &Hyperparams,
    cand_enc: &CandidateEncoding,
) -> Forward {
    let (state, _) = hop_forward(instance, params, hyper);
    let scores = cand_enc.matrix.dot(&state);
    let probs = softmax(&scores);
    Forward {
        scores,
        probs,
        state: DialogStateVector(state),
    }
}

/// Forward pass; encodes the candidates on the fly.
pub fn forward(
    instance: &EncodedInstance,
    params: &ModelParams,
    hyper: &Hyperparams,
    candidates: &EncodedCandidates,
) -> Forward {
    forward_with(instance, params, hyper, &encode_candidates(candidates, &params.w))
}

/// Argmax with ties broken toward the lowest index.
pub fn argmax(scores: &Array1<f64>) -> usize {
    let mut best = 0;
    let mut best_v = f64::NEG_INFINITY;
    for (i, &v) in scores.iter().enumerate() {
        if v > best_v {
            best = i;
            best_v = v;
        }
    }
    best
}

/// The model bundle: parameters plus everything needed to run them.
#[derive(Debug, Clone)]
pub struct Model {
    pub params: ModelParams,
    pub hyper: Hyperparams,
    pub vocab: Vocabulary,
    pub candidates: EncodedCandidates,
}

impl Model {
    pub fn new(
        params: ModelParams,
        hyper: Hyperparams,
        vocab: Vocabulary,
        candidates: EncodedCandidates,
    ) -> Self {
        Model {
            params,
            hyper,
            vocab,
            candidates,
        }
    }

    pub fn encode_candidates(&self) -> CandidateEncoding {
        encode_candidates(&self.candidates, &self.params.w)
    }

    pub fn forward(&self, instance: &EncodedInstance) -> Forward {
        forward(instance, &self.params, &self.hyper, &self.candidates)
    }

    pub fn forward_with(&self, instance: &EncodedInstance, cand_enc: &CandidateEncoding) -> Forward {
        forward_with(instance, &self.params, &self.hyper, cand_enc)
    }

    pub fn evaluate(&self, instances: &[EncodedInstance]) -> Accuracy {
        evaluate(instances, &self.params, &self.hyper, &self.candidates)
    }

    pub fn encode_instance(&self, instance: &Instance) -> EncodedInstance {
        encode_instance(instance, &self.vocab)
    }
}
