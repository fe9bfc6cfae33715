//! Trainable strategist backends: the `PolicyBackend` interface, a tabular
//! softmax policy with closed-form gradients, and the context reduction that
//! keys its rows.
//!
//! The softmax policy is deliberately small: logits live in a table indexed by
//! (context key, token), log-probabilities are exact log-softmax values, and
//! the gradient of each token's log-probability with respect to its row is
//! available analytically — which is what makes every training update in this
//! crate checkable against finite differences.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::Path;
use std::sync::RwLock;

use rand::RngCore;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::model::{Goal, Observation, Strategy, Token};

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("greedy mode: use greedy_decode")]
    GreedyTemperature,
    #[error("temperature must be positive and finite, got {0}")]
    BadTemperature(f64),
    #[error("token {0:?} is not in this policy's vocabulary")]
    UnknownToken(String),
    #[error("token index {index} out of range for vocabulary of size {vocab}")]
    TokenIndex { index: usize, vocab: usize },
    #[error("vocabulary invalid: {0}")]
    BadVocabulary(String),
    #[error("gradient row has {got} entries, vocabulary has {want}")]
    GradientShape { got: usize, want: usize },
    #[error("non-finite value in {what}")]
    NonFinite { what: String },
    #[error("{0} is not supported by this backend")]
    Unsupported(&'static str),
    #[error("chat transport failed after {attempts} attempt(s): {reason}")]
    Transport { attempts: u32, reason: String },
    #[error("chat service returned status {status}: {body}")]
    Service { status: u16, body: String },
    #[error("chat response has no text at path {path:?}")]
    ResponsePath { path: String },
    #[error("cannot load policy from {path}: {reason}")]
    PolicyFile { path: String, reason: String },
}

pub type Result<T> = std::result::Result<T, BackendError>;

// --- decoding & context -----------------------------------------------------

/// How a strategy is decoded from the policy at rollout time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decoding {
    Greedy,
    Sample { temperature: f64 },
}

/// One past turn as the strategist saw it: what came in, what the actor did.
#[derive(Debug, Clone, PartialEq)]
pub struct HistoryStep {
    pub observation: Observation,
    pub behavior: String,
}

/// Everything the strategist may condition on at one turn: the private goal,
/// the interaction history so far, its own previous strategies, and the
/// current observation. Chat backends consume all of it; the tabular policy
/// reduces it through [`context_key`].
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyContext {
    pub goal: Goal,
    pub scenario_context: String,
    pub history: Vec<HistoryStep>,
    pub prior_strategies: Vec<Strategy>,
    pub observation: Observation,
}

/// Number of trailing strategy tokens that participate in the context key.
pub const CONTEXT_TOKEN_WINDOW: usize = 2;

/// Deterministic reduction of (goal id, last strategies, last observation) to
/// a table key. Digit runs in the observation are canonicalized to `#` so
/// rows recur across scenarios that differ only in concrete prices or counts;
/// the qualitative words in observations carry the state signal.
pub fn context_key(ctx: &PolicyContext) -> u64 {
    let mut hasher = Fnv1a::new();
    hasher.write(ctx.goal.agent_id.as_bytes());
    hasher.write(b"\x1f");
    let window_start = ctx.prior_strategies.len().saturating_sub(CONTEXT_TOKEN_WINDOW);
    for strategy in &ctx.prior_strategies[window_start..] {
        if let Some(token) = strategy.tokens.first() {
            hasher.write(token.to_string().as_bytes());
        }
        hasher.write(b"\x1f");
    }
    hasher.write(b"\x1f");
    hasher.write(normalize_digits(&ctx.observation.content).as_bytes());
    hasher.finish()
}

/// Replace every maximal digit run with `#`.
pub fn normalize_digits(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    let mut in_digits = false;
    for ch in text.chars() {
        if ch.is_ascii_digit() {
            if !in_digits {
                out.push('#');
                in_digits = true;
            }
        } else {
            in_digits = false;
            out.push(ch);
        }
    }
    out
}

/// FNV-1a, 64-bit: a stable hash so context keys and saved policies survive
/// across builds (the std hasher makes no such promise).
struct Fnv1a(u64);

impl Fnv1a {
    fn new() -> Self {
        Fnv1a(0xcbf2_9ce4_8422_2325)
    }

    fn write(&mut self, bytes: &[u8]) {
        for b in bytes {
            self.0 ^= u64::from(*b);
            self.0 = self.0.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }

    fn finish(&self) -> u64 {
        self.0
    }
}

/// Stable 64-bit mix used wherever one seed must spawn independent streams.
pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

// --- gradients ----------------------------------------------------------------

/// Sparse loss gradient: one dense row per touched context, ordered so that
/// applying it is reproducible float-for-float.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PolicyGradient {
    pub rows: BTreeMap<u64, Vec<f64>>,
}

impl PolicyGradient {
    pub fn accumulate(&mut self, key: u64, row: &[f64]) {
        let slot = self.rows.entry(key).or_insert_with(|| vec![0.0; row.len()]);
        for (s, g) in slot.iter_mut().zip(row) {
            *s += g;
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for row in self.rows.values_mut() {
            for g in row.iter_mut() {
                *g *= factor;
            }
        }
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn max_abs(&self) -> f64 {
        self.rows
            .values()
            .flat_map(|row| row.iter())
            .fold(0.0_f64, |acc, g| acc.max(g.abs()))
    }
}

// --- the backend interface ---------------------------------------------------

/// A trainable strategist: sampling, scoring, and parameter updates.
pub trait PolicyBackend: Send + Sync {
    /// Propose a strategy for the given context.
    fn sample(&self, ctx: &PolicyContext, decoding: Decoding, rng: &mut dyn RngCore) -> Result<Strategy>;

    /// Per-token log-probabilities of `tokens` under this policy in `ctx`.
    fn logprobs(&self, ctx: &PolicyContext, tokens: &[Token]) -> Result<Vec<f64>>;

    /// Descend along `gradient` with the given step size; returns the new
    /// parameter version tag.
    fn apply_gradient(&self, gradient: &PolicyGradient, step_size: f64) -> Result<String>;

    fn version(&self) -> String;

    /// Content hash of the parameters; equal digests mean equal policies.
    fn param_digest(&self) -> String;
}

// --- the tabular softmax policy ----------------------------------------------

#[derive(Debug, Default, Serialize, Deserialize)]
struct Table {
    rows: HashMap<u64, Vec<f64>>,
    updates: u64,
}

/// Tabular softmax strategist over a fixed whole-token vocabulary.
///
/// Unknown context rows read as all-zero logits (a uniform distribution) and
/// materialize only when an update touches them.
#[derive(Debug)]
pub struct ContextSoftmaxPolicy {
    vocab: Vec<String>,
    temperature: f64,
    table: RwLock<Table>,
}

#[derive(Serialize, Deserialize)]
struct PolicyFile {
    format_version: u32,
    temperature: f64,
    vocab: Vec<String>,
    updates: u64,
    rows: BTreeMap<String, Vec<f64>>,
}

impl ContextSoftmaxPolicy {
    pub fn new(vocab: Vec<String>, temperature: f64) -> Result<Self> {
        if vocab.is_empty() {
            return Err(BackendError::BadVocabulary("no tokens".into()));
        }
        let mut seen = vocab.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != vocab.len() {
            return Err(BackendError::BadVocabulary("duplicate tokens".into()));
        }
        if vocab.iter().any(|t| t.is_empty()) {
            return Err(BackendError::BadVocabulary("empty token name".into()));
        }
        if !(temperature.is_finite() && temperature > 0.0) {
            return Err(BackendError::BadTemperature(temperature));
        }
        Ok(ContextSoftmaxPolicy { vocab, temperature, table: RwLock::new(Table::default()) })
    }

    pub fn vocab(&self) -> &[String] {
        &self.vocab
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    pub fn token_index(&self, text: &str) -> Result<usize> {
        self.vocab
            .iter()
            .position(|t| t == text)
            .ok_or_else(|| BackendError::UnknownToken(text.to_string()))
    }

    fn check_index(&self, index: usize) -> Result<()> {
        if index >= self.vocab.len() {
            return Err(BackendError::TokenIndex { index, vocab: self.vocab.len() });
        }
        Ok(())
    }

    /// Copy of the logit row for a context key; absent rows read as zeros.
    pub fn row(&self, key: u64) -> Vec<f64> {
        self.table
            .read()
            .expect("policy lock poisoned")
            .rows
            .get(&key)
            .cloned()
            .unwrap_or_else(|| vec![0.0; self.vocab.len()])
    }

    /// Log-softmax of a row at an explicit temperature, max-subtracted for
    /// stability. A zero temperature is a greedy request, not a distribution.
    pub fn logprob_row_at(&self, key: u64, temperature: f64) -> Result<Vec<f64>> {
        if temperature == 0.0 {
            return Err(BackendError::GreedyTemperature);
        }
        if !(temperature.is_finite() && temperature > 0.0) {
            return Err(BackendError::BadTemperature(temperature));
        }
        let row = self.row(key);
        let scaled: Vec<f64> = row.iter().map(|l| l / temperature).collect();
        let max = scaled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum_exp: f64 = scaled.iter().map(|x| (x - max).exp()).sum();
        let lse = max + sum_exp.ln();
        Ok(scaled.iter().map(|x| x - lse).collect())
    }

    /// Log-probability of one token under the policy's own temperature.
    pub fn softmax_logprob(&self, key: u64, token: usize) -> Result<f64> {
        self.check_index(token)?;
        Ok(self.logprob_row_at(key, self.temperature)?[token])
    }

    /// Probabilities of the whole row at an explicit temperature.
    pub fn probabilities_at(&self, key: u64, temperature: f64) -> Result<Vec<f64>> {
        Ok(self.logprob_row_at(key, temperature)?.iter().map(|lp| lp.exp()).collect())
    }

    /// Gradient of `log p(token)` with respect to every logit in the row:
    /// `(1[token = b] − p_b) / temperature`.
    pub fn softmax_grad(&self, key: u64, token: usize) -> Result<Vec<f64>> {
        self.check_index(token)?;
        let probs = self.probabilities_at(key, self.temperature)?;
        Ok(probs
            .iter()
            .enumerate()
            .map(|(b, p)| {
                let indicator = if b == token { 1.0 } else { 0.0 };
                (indicator - p) / self.temperature
            })
            .collect())
    }

    /// Highest-logit token, lowest index winning ties.
    pub fn greedy_decode(&self, key: u64) -> usize {
        let row = self.row(key);
        let mut best = 0;
        for (i, logit) in row.iter().enumerate() {
            if *logit > row[best] {
                best = i;
            }
        }
        best
    }

    /// Draw one token index from the softmax at the given decode temperature.
    pub fn sample_index(&self, key: u64, temperature: f64, rng: &mut dyn RngCore) -> Result<usize> {
        let probs = self.probabilities_at(key, temperature)?;
        let draw: f64 = rand::Rng::gen(rng);
        let mut cumulative = 0.0;
        for (i, p) in probs.iter().enumerate() {
            cumulative += p;
            if draw < cumulative {
                return Ok(i);
            }
        }
        Ok(probs.len() - 1)
    }

    /// Direct logit access for fixtures and finite-difference checks.
    pub fn logit(&self, key: u64, token: usize) -> f64 {
        self.row(key)[token]
    }

    /// Add `delta` to one logit (fixture construction, finite differences).
    pub fn add_logit(&self, key: u64, token: usize, delta: f64) -> Result<()> {
        self.check_index(token)?;
        let mut table = self.table.write().expect("policy lock poisoned");
        let width = self.vocab.len();
        let row = table.rows.entry(key).or_insert_with(|| vec![0.0; width]);
        row[token] += delta;
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> std::io::Result<()> {
        let table = self.table.read().expect("policy lock poisoned");
        let mut rows = BTreeMap::new();
        for (key, row) in &table.rows {
            rows.insert(format!("{key:016x}"), row.clone());
        }
        let file = PolicyFile {
            format_version: 1,
            temperature: self.temperature,
            vocab: self.vocab.clone(),
            updates: table.updates,
            rows,
        };
        std::fs::write(path, serde_json::to_string_pretty(&file).expect("policy serialization"))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| BackendError::PolicyFile {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
        let file: PolicyFile = serde_json::from_str(&text).map_err(|e| BackendError::PolicyFile {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
        let policy = ContextSoftmaxPolicy::new(file.vocab, file.temperature)?;
        {
            let mut table = policy.table.write().expect("policy lock poisoned");
            table.updates = file.updates;
            for (hex, row) in file.rows {
                let key = u64::from_str_radix(&hex, 16).map_err(|e| BackendError::PolicyFile {
                    path: path.display().to_string(),
                    reason: format!("bad row key {hex:?}: {e}"),
                })?;
                if row.len() != policy.vocab.len() {
                    return Err(BackendError::PolicyFile {
                        path: path.display().to_string(),
                        reason: format!("row {hex} width {} != vocabulary {}", row.len(), policy.vocab.len()),
                    });
                }
                table.rows.insert(key, row);
            }
        }
        Ok(policy)
    }
}

impl PolicyBackend for ContextSoftmaxPolicy {
    fn sample(&self, ctx: &PolicyContext, decoding: Decoding, rng: &mut dyn RngCore) -> Result<Strategy> {
        let key = context_key(ctx);
        let index = match decoding {
            Decoding::Greedy => self.greedy_decode(key),
            Decoding::Sample { temperature } => self.sample_index(key, temperature, rng)?,
        };
        // Recorded log-probabilities are always the policy's own distribution
        // (its configured temperature): that is the quantity training uses,
        // whatever the decode mode was.
        let logprob = self.softmax_logprob(key, index)?;
        let text = self.vocab[index].clone();
        Ok(Strategy {
            tokens: vec![Token::Text(text.clone())],
            token_logprobs: Some(vec![logprob]),
            rendered: text,
        })
    }

    fn logprobs(&self, ctx: &PolicyContext, tokens: &[Token]) -> Result<Vec<f64>> {
        let key = context_key(ctx);
        let row = self.logprob_row_at(key, self.temperature)?;
        tokens
            .iter()
            .map(|token| {
                let text = token
                    .as_text()
                    .ok_or_else(|| BackendError::UnknownToken(token.to_string()))?;
                Ok(row[self.token_index(text)?])
            })
            .collect()
    }

    fn apply_gradient(&self, gradient: &PolicyGradient, step_size: f64) -> Result<String> {
        let width = self.vocab.len();
        for row in gradient.rows.values() {
            if row.len() != width {
                return Err(BackendError::GradientShape { got: row.len(), want: width });
            }
            if row.iter().any(|g| !g.is_finite()) {
                return Err(BackendError::NonFinite { what: "gradient row".into() });
            }
        }
        let mut table = self.table.write().expect("policy lock poisoned");
        for (key, grads) in &gradient.rows {
            if grads.iter().all(|g| *g == 0.0) {
                continue; // keep untouched rows implicit so digests stay clean
            }
            let slot = table.rows.entry(*key).or_insert_with(|| vec![0.0; width]);
            for (logit, g) in slot.iter_mut().zip(grads) {
                *logit -= step_size * g;
            }
        }
        table.updates += 1;
        Ok(format!("v{}", table.updates))
    }

    fn version(&self) -> String {
        format!("v{}", self.table.read().expect("policy lock poisoned").updates)
    }

    fn param_digest(&self) -> String {
        let table = self.table.read().expect("policy lock poisoned");
        let mut hasher = Sha256::new();
        hasher.update(format!("temperature={}", self.temperature.to_bits()));
        for token in &self.vocab {
            hasher.update(token.as_bytes());
            hasher.update([0x1f]);
        }
        let mut keys: Vec<&u64> = table.rows.keys().collect();
        keys.sort();
        for key in keys {
            let row = &table.rows[key];
            if row.iter().all(|l| *l == 0.0) {
                continue; // an all-zero row is indistinguishable from an absent one
            }
            hasher.update(key.to_be_bytes());
            for logit in row {
                hasher.update(logit.to_bits().to_be_bytes());
            }
        }
        let mut out = String::with_capacity(64);
        for byte in hasher.finalize() {
            let _ = write!(out, "{byte:02x}");
        }
        out
    }
}
