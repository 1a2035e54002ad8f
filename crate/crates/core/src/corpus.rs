//! Dialog corpus handling: the bAbI dialog file format, candidate sets,
//! vocabularies and per-turn training instances.
//!
//! The wire format is one dialog per blank-line-separated block. Each line
//! starts with a 1-based line number (restarting per dialog). A line with a
//! single tab is an exchange `N user\tbot`; a line with no tab is a
//! knowledge-base fact `N entity attribute value`.

use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// Reserved id 0: padding. Contributes nothing to sentence encodings.
pub const PAD_ID: usize = 0;
/// Reserved id 1: any token never seen while building the vocabulary.
pub const UNK_ID: usize = 1;
pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";
/// Speaker marker appended to user memory sentences.
pub const USER_MARKER: &str = "$user";
/// Speaker marker appended to bot memory sentences.
pub const BOT_MARKER: &str = "$bot";

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("line {line}: malformed line number in {text:?}")]
    BadLineNumber { line: usize, text: String },
    #[error("line {line}: expected line number {expected}, found {found}")]
    NonConsecutiveLineNumber {
        line: usize,
        expected: usize,
        found: usize,
    },
    #[error("line {line}: more than one tab separator")]
    ExtraTab { line: usize },
    #[error("line {line}: kb fact needs exactly 3 fields after the line number, found {found}")]
    BadFactArity { line: usize, found: usize },
    #[error("dialog ending at line {line} has no exchange lines")]
    DialogWithoutExchange { line: usize },
    #[error("duplicate candidate text {0:?}")]
    DuplicateCandidate(String),
    #[error("bot response {0:?} is not in the candidate set")]
    UnknownBotText(String),
}

/// Whitespace tokenization. No lowercasing, no punctuation stripping: the
/// corpora are pre-normalized and candidate retrieval is exact-match.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_owned).collect()
}

fn join(tokens: &[String]) -> String {
    tokens.join(" ")
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LineKind {
    Exchange {
        user: Vec<String>,
        bot: Vec<String>,
    },
    KbFact {
        entity: String,
        attribute: String,
        value: String,
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DialogLine {
    /// 1-based position within the dialog.
    pub line_no: usize,
    pub kind: LineKind,
}

/// One full dialog: numbered exchange and kb-fact lines, in order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dialog {
    pub lines: Vec<DialogLine>,
}

impl Dialog {
    /// Builds a dialog from line kinds, assigning consecutive line numbers.
    pub fn from_kinds(kinds: Vec<LineKind>) -> Self {
        let lines = kinds
            .into_iter()
            .enumerate()
            .map(|(i, kind)| DialogLine { line_no: i + 1, kind })
            .collect();
        Dialog { lines }
    }

    /// (user, bot) token slices of every exchange line, in order.
    pub fn exchanges(&self) -> impl Iterator<Item = (&[String], &[String])> {
        self.lines.iter().filter_map(|l| match &l.kind {
            LineKind::Exchange { user, bot } => Some((user.as_slice(), bot.as_slice())),
            LineKind::KbFact { .. } => None,
        })
    }

    pub fn exchange_count(&self) -> usize {
        self.exchanges().count()
    }

    pub fn user_utterances(&self) -> impl Iterator<Item = &[String]> {
        self.exchanges().map(|(u, _)| u)
    }

    pub fn bot_utterances(&self) -> impl Iterator<Item = &[String]> {
        self.exchanges().map(|(_, b)| b)
    }
}

/// Parses a dialog file: newline-separated lines, dialogs separated by one
/// blank line. The inverse of [`serialize_dialogs`].
pub fn parse_dialog_file(text: &str) -> Result<Vec<Dialog>, CorpusError> {
    let mut dialogs = Vec::new();
    let mut current: Vec<DialogLine> = Vec::new();

    let flush = |current: &mut Vec<DialogLine>,
                 dialogs: &mut Vec<Dialog>,
                 line: usize|
     -> Result<(), CorpusError> {
        if current.is_empty() {
            return Ok(());
        }
        let lines = std::mem::take(current);
        if !lines
            .iter()
            .any(|l| matches!(l.kind, LineKind::Exchange { .. }))
        {
            return Err(CorpusError::DialogWithoutExchange { line });
        }
        dialogs.push(Dialog { lines });
        Ok(())
    };

    for (idx, raw) in text.lines().enumerate() {
        let file_line = idx + 1;
        if raw.trim().is_empty() {
            flush(&mut current, &mut dialogs, file_line.saturating_sub(1))?;
            continue;
        }
        let (num_str, rest) = raw.split_once(' ').ok_or_else(|| CorpusError::BadLineNumber {
            line: file_line,
            text: raw.to_owned(),
        })?;
        let line_no: usize = num_str.parse().map_err(|_| CorpusError::BadLineNumber {
            line: file_line,
            text: raw.to_owned(),
        })?;
        let expected = current.len() + 1;
        if line_no != expected {
            return Err(CorpusError::NonConsecutiveLineNumber {
                line: file_line,
                expected,
                found: line_no,
            });
        }
        let kind = match rest.matches('\t').count() {
            0 => {
                let fields = tokenize(rest);
                if fields.len() != 3 {
                    return Err(CorpusError::BadFactArity {
                        line: file_line,
                        found: fields.len(),
                    });
                }
                let mut it = fields.into_iter();
                LineKind::KbFact {
                    entity: it.next().unwrap(),
                    attribute: it.next().unwrap(),
                    value: it.next().unwrap(),
                }
            }
            1 => {
                let (user, bot) = rest.split_once('\t').unwrap();
                LineKind::Exchange {
                    user: tokenize(user),
                    bot: tokenize(bot),
                }
            }
            _ => return Err(CorpusError::ExtraTab { line: file_line }),
        };
        current.push(DialogLine { line_no, kind });
    }
    let last = text.lines().count();
    flush(&mut current, &mut dialogs, last)?;
    Ok(dialogs)
}

/// Serializes dialogs to the wire format: each line terminated by `\n`,
/// dialogs separated by one blank line, tokens joined by single spaces.
pub fn serialize_dialogs(dialogs: &[Dialog]) -> String {
    let mut out = String::new();
    for (i, dialog) in dialogs.iter().enumerate() {
        if i > 0 {
            out.push('\n');
        }
        for line in &dialog.lines {
            match &line.kind {
                LineKind::Exchange { user, bot } => {
                    out.push_str(&format!("{} {}\t{}\n", line.line_no, join(user), join(bot)));
                }
                LineKind::KbFact {
                    entity,
                    attribute,
                    value,
                } => {
                    out.push_str(&format!(
                        "{} {} {} {}\n",
                        line.line_no, entity, attribute, value
                    ));
                }
            }
        }
    }
    out
}

/// The fixed list of every response the system may produce. Retrieval labels
/// are indices into this list; identity is exact text match.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CandidateSet {
    candidates: Vec<Vec<String>>,
    index: HashMap<String, usize>,
}

impl CandidateSet {
    pub fn from_texts<I, S>(texts: I) -> Result<Self, CorpusError>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut candidates = Vec::new();
        let mut index = HashMap::new();
        for text in texts {
            let text = text.as_ref();
            let tokens = tokenize(text);
            let key = join(&tokens);
            if index.insert(key.clone(), candidates.len()).is_some() {
                return Err(CorpusError::DuplicateCandidate(key));
            }
            candidates.push(tokens);
        }
        Ok(CandidateSet { candidates, index })
    }

    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }

    pub fn get(&self, idx: usize) -> &[String] {
        &self.candidates[idx]
    }

    pub fn iter(&self) -> impl Iterator<Item = &[String]> {
        self.candidates.iter().map(Vec::as_slice)
    }

    pub fn index_of(&self, tokens: &[String]) -> Option<usize> {
        self.index.get(&join(tokens)).copied()
    }

    pub fn index_of_text(&self, text: &str) -> Option<usize> {
        self.index_of(&tokenize(text))
    }

    /// Candidate file form: `1 <text>` per line, order preserved.
    pub fn to_file_string(&self) -> String {
        let mut out = String::new();
        for cand in &self.candidates {
            out.push_str(&format!("1 {}\n", join(cand)));
        }
        out
    }
}

/// Loads a candidate file: one candidate per line, `N <text>`. Order is
/// preserved; duplicate texts are rejected.
pub fn load_candidates(text: &str) -> Result<CandidateSet, CorpusError> {
    let mut texts = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        if raw.trim().is_empty() {
            continue;
        }
        let (num_str, rest) = raw.split_once(' ').ok_or_else(|| CorpusError::BadLineNumber {
            line: idx + 1,
            text: raw.to_owned(),
        })?;
        let _: usize = num_str.parse().map_err(|_| CorpusError::BadLineNumber {
            line: idx + 1,
            text: raw.to_owned(),
        })?;
        texts.push(rest.to_owned());
    }
    CandidateSet::from_texts(texts)
}

/// Token-to-id mapping. Ids 0 and 1 are reserved for padding and unknowns;
/// speaker and turn-index marker tokens come next, then all corpus tokens in
/// sorted order. Built from train + dev + candidates only, never from test.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl From<Vec<String>> for Vocabulary {
    fn from(tokens: Vec<String>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Vocabulary { tokens, index }
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.tokens
    }
}

/// The marker token carrying the 1-based turn index of a memory sentence.
pub fn turn_marker(turn: usize) -> String {
    format!("#{turn}")
}

impl Vocabulary {
    pub fn build(train: &[Dialog], dev: &[Dialog], candidates: &CandidateSet) -> Self {
        let mut seen: HashSet<&str> = HashSet::new();
        let mut max_turns = 0usize;
        for dialog in train.iter().chain(dev) {
            max_turns = max_turns.max(dialog.exchange_count());
            for line in &dialog.lines {
                match &line.kind {
                    LineKind::Exchange { user, bot } => {
                        seen.extend(user.iter().map(String::as_str));
                        seen.extend(bot.iter().map(String::as_str));
                    }
                    LineKind::KbFact {
                        entity,
                        attribute,
                        value,
                    } => {
                        seen.insert(entity);
                        seen.insert(attribute);
                        seen.insert(value);
                    }
                }
            }
        }
        for cand in candidates.iter() {
            seen.extend(cand.iter().map(String::as_str));
        }

        let mut tokens: Vec<String> = vec![PAD_TOKEN.into(), UNK_TOKEN.into()];
        tokens.push(USER_MARKER.into());
        tokens.push(BOT_MARKER.into());
        for turn in 1..=max_turns {
            tokens.push(turn_marker(turn));
        }
        let reserved: HashSet<&str> = tokens.iter().map(String::as_str).collect();
        let mut rest: Vec<String> = seen
            .into_iter()
            .filter(|t| !reserved.contains(t))
            .map(str::to_owned)
            .collect();
        drop(reserved);
        rest.sort_unstable();
        tokens.extend(rest);
        Vocabulary::from(tokens)
    }

    /// Id of a token; unknown tokens map to [`UNK_ID`].
    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn encode(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t)).collect()
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// SHA-256 over the id-ordered token list; identifies a vocabulary in
    /// checkpoints.
    pub fn hash_hex(&self) -> String {
        let mut hasher = Sha256::new();
        for token in &self.tokens {
            hasher.update(token.as_bytes());
            hasher.update(b"\n");
        }
        let digest = hasher.finalize();
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// One system turn as the model sees it: everything strictly before the
/// current exchange expanded into memory sentences, the current user
/// utterance as query, and the gold candidate index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Instance {
    /// Memory sentences, oldest first. Exchange lines contribute their user
    /// and bot utterances as two sentences, each suffixed with a speaker
    /// marker and a turn-index marker; kb facts contribute one plain
    /// three-token sentence.
    pub memory: Vec<Vec<String>>,
    pub query: Vec<String>,
    pub answer: usize,
    pub dialog_id: usize,
    /// 0-based exchange index within the dialog.
    pub turn_index: usize,
}

/// Expands one dialog into per-turn instances. Every bot utterance must
/// resolve in the candidate set.
pub fn build_instances(
    dialog: &Dialog,
    dialog_id: usize,
    candidates: &CandidateSet,
) -> Result<Vec<Instance>, CorpusError> {
    let mut instances = Vec::new();
    let mut memory: Vec<Vec<String>> = Vec::new();
    let mut turn = 0usize;
    for line in &dialog.lines {
        match &line.kind {
            LineKind::Exchange { user, bot } => {
                turn += 1;
                let answer = candidates
                    .index_of(bot)
                    .ok_or_else(|| CorpusError::UnknownBotText(join(bot)))?;
                instances.push(Instance {
                    memory: memory.clone(),
                    query: user.clone(),
                    answer,
                    dialog_id,
                    turn_index: turn - 1,
                });
                let marker = turn_marker(turn);
                let mut user_sent = user.clone();
                user_sent.push(USER_MARKER.into());
                user_sent.push(marker.clone());
                let mut bot_sent = bot.clone();
                bot_sent.push(BOT_MARKER.into());
                bot_sent.push(marker);
                memory.push(user_sent);
                memory.push(bot_sent);
            }
            LineKind::KbFact {
                entity,
                attribute,
                value,
            } => {
                memory.push(vec![entity.clone(), attribute.clone(), value.clone()]);
            }
        }
    }
    Ok(instances)
}

/// Instances for a whole corpus; `dialog_id` is the dialog's position.
pub fn build_corpus_instances(
    dialogs: &[Dialog],
    candidates: &CandidateSet,
) -> Result<Vec<Instance>, CorpusError> {
    let mut out = Vec::new();
    for (id, dialog) in dialogs.iter().enumerate() {
        out.extend(build_instances(dialog, id, candidates)?);
    }
    Ok(out)
}
