//! Per-character text features: syntactic statistics, character-to-phoneme
//! replication, and word/utterance embeddings from a pluggable provider.

use std::path::{Path, PathBuf};

use ndarray::{s, Array1, Array2};
use rand::SeedableRng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::corpus::{Span, Utterance};
use crate::error::{Error, Result};
use crate::tensor_io;

pub const EMBEDDING_DIM: usize = 768;
pub const STAT_DIM: usize = 6;

/// Global maxima used to scale the integer counts into `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NormalizationConfig {
    pub max_chars_per_sentence: usize,
    pub max_chars_per_utterance: usize,
    pub max_sentences_per_utterance: usize,
}

impl NormalizationConfig {
    pub fn new(sentence: usize, utterance: usize, sentences: usize) -> Result<Self> {
        let cfg = Self {
            max_chars_per_sentence: sentence,
            max_chars_per_utterance: utterance,
            max_sentences_per_utterance: sentences,
        };
        cfg.check()?;
        Ok(cfg)
    }

    pub fn check(&self) -> Result<()> {
        if self.max_chars_per_sentence == 0
            || self.max_chars_per_utterance == 0
            || self.max_sentences_per_utterance == 0
        {
            return Err(Error::Config("normalization maxima must all be >= 1".into()));
        }
        Ok(())
    }

    /// Maxima observed over a set of utterances (each at least 1).
    pub fn from_utterances<'a>(utterances: impl IntoIterator<Item = &'a Utterance>) -> Self {
        let mut cfg = Self {
            max_chars_per_sentence: 1,
            max_chars_per_utterance: 1,
            max_sentences_per_utterance: 1,
        };
        for u in utterances {
            cfg.max_chars_per_utterance = cfg.max_chars_per_utterance.max(u.num_chars());
            cfg.max_sentences_per_utterance = cfg.max_sentences_per_utterance.max(u.sentence_spans.len());
            for s in &u.sentence_spans {
                cfg.max_chars_per_sentence = cfg.max_chars_per_sentence.max(s.len());
            }
        }
        cfg
    }
}

/// `(F1..F6)`: sentence length, position in sentence, utterance length,
/// position in utterance, sentence count, sentence position.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StatFeatureVector(pub [f64; STAT_DIM]);

impl StatFeatureVector {
    pub fn sentence_len(&self) -> f64 {
        self.0[0]
    }
    pub fn pos_in_sentence(&self) -> f64 {
        self.0[1]
    }
    pub fn utterance_len(&self) -> f64 {
        self.0[2]
    }
    pub fn pos_in_utterance(&self) -> f64 {
        self.0[3]
    }
    pub fn sentence_count(&self) -> f64 {
        self.0[4]
    }
    pub fn sentence_pos(&self) -> f64 {
        self.0[5]
    }
}

/// How counts above the configured maximum are handled.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Overflow {
    /// Training data must fit the maxima.
    Error,
    /// Inference input is clamped to 1.0.
    Clamp,
}

fn ratio(count: usize, max: usize, field: &'static str, overflow: Overflow) -> Result<f64> {
    if count > max {
        return match overflow {
            Overflow::Error => Err(Error::Normalization { field, count, max }),
            Overflow::Clamp => Ok(1.0),
        };
    }
    Ok(count as f64 / max as f64)
}

/// Statistical features from the sentence structure alone.
pub fn stat_features_from_spans(
    spans: &[Span],
    norm: &NormalizationConfig,
    overflow: Overflow,
) -> Result<Vec<StatFeatureVector>> {
    let n_chars: usize = spans.iter().map(Span::len).sum();
    let n_sent = spans.len();
    let f3 = ratio(n_chars, norm.max_chars_per_utterance, "max_chars_per_utterance", overflow)?;
    let f5 = ratio(n_sent, norm.max_sentences_per_utterance, "max_sentences_per_utterance", overflow)?;
    let mut out = Vec::with_capacity(n_chars);
    let mut k = 0;
    for (si, span) in spans.iter().enumerate() {
        let len = span.len();
        let f1 = ratio(len, norm.max_chars_per_sentence, "max_chars_per_sentence", overflow)?;
        let f6 = (si + 1) as f64 / n_sent as f64;
        for j in 0..len {
            k += 1;
            out.push(StatFeatureVector([
                f1,
                (j + 1) as f64 / len as f64,
                f3,
                k as f64 / n_chars as f64,
                f5,
                f6,
            ]));
        }
    }
    Ok(out)
}

pub fn compute_stat_features(u: &Utterance, norm: &NormalizationConfig) -> Result<Vec<StatFeatureVector>> {
    check_spans(u)?;
    stat_features_from_spans(&u.sentence_spans, norm, Overflow::Error)
}

/// Inference variant: counts beyond the frozen maxima clamp to 1.0.
pub fn compute_stat_features_clamped(u: &Utterance, norm: &NormalizationConfig) -> Result<Vec<StatFeatureVector>> {
    check_spans(u)?;
    stat_features_from_spans(&u.sentence_spans, norm, Overflow::Clamp)
}

fn check_spans(u: &Utterance) -> Result<()> {
    let total: usize = u.sentence_spans.iter().map(Span::len).sum();
    if total != u.num_chars() {
        return Err(Error::Input(format!(
            "sentence spans cover {total} characters but the text has {}",
            u.num_chars()
        )));
    }
    Ok(())
}

/// `[embedding ‖ stats]` per character.
pub fn char_feature_matrix(embeddings: &Array2<f64>, stats: &[StatFeatureVector]) -> Result<Array2<f64>> {
    if embeddings.nrows() != stats.len() {
        return Err(Error::Shape(format!(
            "{} embedding rows for {} characters",
            embeddings.nrows(),
            stats.len()
        )));
    }
    let d = embeddings.ncols();
    let mut m = Array2::zeros((stats.len(), d + STAT_DIM));
    m.slice_mut(s![.., ..d]).assign(embeddings);
    for (i, st) in stats.iter().enumerate() {
        for (j, v) in st.0.iter().enumerate() {
            m[[i, d + j]] = *v;
        }
    }
    Ok(m)
}

/// Owner character for every phoneme position (`None` for unowned symbols).
pub fn phoneme_owners(alignment: &[Span], n_phonemes: usize) -> Result<Vec<Option<usize>>> {
    let mut owners = vec![None; n_phonemes];
    let mut prev_end = 0;
    for (c, span) in alignment.iter().enumerate() {
        if span.end > n_phonemes {
            return Err(Error::Alignment(format!(
                "character {c} range [{}, {}) exceeds {n_phonemes} phonemes",
                span.start, span.end
            )));
        }
        if span.start < prev_end || span.end < span.start {
            return Err(Error::Alignment(format!("character {c} range overlaps or is reversed")));
        }
        prev_end = span.end;
        for slot in &mut owners[span.start..span.end] {
            *slot = Some(c);
        }
    }
    Ok(owners)
}

/// Replicates character rows onto the phonemes they own; unowned phonemes get zeros.
pub fn upsample_to_phonemes(char_matrix: &Array2<f64>, alignment: &[Span], n_phonemes: usize) -> Result<Array2<f64>> {
    if alignment.len() != char_matrix.nrows() {
        return Err(Error::Alignment(format!(
            "{} alignment ranges for {} character rows",
            alignment.len(),
            char_matrix.nrows()
        )));
    }
    let owners = phoneme_owners(alignment, n_phonemes)?;
    let mut out = Array2::zeros((n_phonemes, char_matrix.ncols()));
    for (p, owner) in owners.iter().enumerate() {
        if let Some(c) = owner {
            out.row_mut(p).assign(&char_matrix.row(*c));
        }
    }
    Ok(out)
}

fn fnv1a(bytes: &[u8], mut h: u64) -> u64 {
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100_0000_01b3);
    }
    h
}

fn unit_vector(unit: &str, dim: usize, seed: u64) -> Array1<f64> {
    let mut h = fnv1a(unit.as_bytes(), 0xcbf2_9ce4_8422_2325);
    h = fnv1a(&(dim as u64).to_le_bytes(), h);
    h = fnv1a(&seed.to_le_bytes(), h);
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(h);
    let v: Array1<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
    let norm = v.dot(&v).sqrt();
    if norm > 0.0 {
        v / norm
    } else {
        let mut e = Array1::zeros(dim);
        e[0] = 1.0;
        e
    }
}

/// Deterministic stand-in for a sentence encoder: each unit maps to a unit-norm
/// vector that depends only on `(unit, dim, seed)`.
pub fn stub_embedder(units: &[&str], dim: usize, seed: u64) -> Array2<f64> {
    assert!(dim >= 1, "embedding dim must be positive");
    let mut m = Array2::zeros((units.len(), dim));
    for (i, u) in units.iter().enumerate() {
        m.row_mut(i).assign(&unit_vector(u, dim, seed));
    }
    m
}

pub fn save_embeddings(path: &Path, m: &Array2<f64>) -> Result<()> {
    tensor_io::write_matrix(path, m)
}

pub fn load_embeddings(path: &Path) -> Result<Array2<f64>> {
    tensor_io::read_matrix(path)
}

/// An utterance-level embedding tagged with its speaker scalar.
#[derive(Clone, Debug, PartialEq)]
pub struct UtteranceEmbedding {
    pub vector: Array1<f64>,
    pub speaker: f64,
}

impl UtteranceEmbedding {
    pub fn new(vector: Array1<f64>, speaker: f64) -> Result<Self> {
        if vector.len() != EMBEDDING_DIM {
            return Err(Error::Input(format!(
                "utterance embedding has dim {}, expected {EMBEDDING_DIM}",
                vector.len()
            )));
        }
        Ok(Self { vector, speaker })
    }
}

/// Identifies one turn for providers that look embeddings up by position.
#[derive(Clone, Copy, Debug)]
pub struct TurnRef<'a> {
    pub conversation: &'a str,
    pub index: usize,
    pub utterance: &'a Utterance,
}

/// Source of character-level and utterance-level text embeddings.
pub trait EmbeddingProvider {
    /// `n_chars × dim`, one row per character (wordpiece vectors replicated
    /// over the characters they cover).
    fn char_embeddings(&self, turn: TurnRef<'_>) -> Result<Array2<f64>>;
    fn utterance_embedding(&self, turn: TurnRef<'_>) -> Result<Array1<f64>>;
    fn dim(&self) -> usize;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct StubEmbedder {
    pub dim: usize,
    pub seed: u64,
}

impl Default for StubEmbedder {
    fn default() -> Self {
        Self {
            dim: EMBEDDING_DIM,
            seed: 0,
        }
    }
}

impl EmbeddingProvider for StubEmbedder {
    fn char_embeddings(&self, turn: TurnRef<'_>) -> Result<Array2<f64>> {
        let chars: Vec<String> = turn.utterance.text.chars().map(|c| c.to_string()).collect();
        let units: Vec<&str> = chars.iter().map(String::as_str).collect();
        Ok(stub_embedder(&units, self.dim, self.seed))
    }

    fn utterance_embedding(&self, turn: TurnRef<'_>) -> Result<Array1<f64>> {
        let unit = format!("\u{1}utt\u{1}{}", turn.utterance.text);
        Ok(stub_embedder(&[unit.as_str()], self.dim, self.seed).row(0).to_owned())
    }

    fn dim(&self) -> usize {
        self.dim
    }
}

/// Precomputed provider output laid out as
/// `<root>/<conversation>/<turn>.chars.f32` and `<root>/<conversation>/<turn>.utt.f32`.
#[derive(Clone, Debug)]
pub struct EmbeddingDir {
    pub root: PathBuf,
    pub dim: usize,
}

impl EmbeddingDir {
    pub fn char_path(&self, conversation: &str, index: usize) -> PathBuf {
        self.root.join(conversation).join(format!("{index}.chars.f32"))
    }

    pub fn utterance_path(&self, conversation: &str, index: usize) -> PathBuf {
        self.root.join(conversation).join(format!("{index}.utt.f32"))
    }
}

impl EmbeddingProvider for EmbeddingDir {
    fn char_embeddings(&self, turn: TurnRef<'_>) -> Result<Array2<f64>> {
        let m = load_embeddings(&self.char_path(turn.conversation, turn.index))?;
        if m.dim() != (turn.utterance.num_chars(), self.dim) {
            return Err(Error::Format(format!(
                "character embeddings for {}#{} have shape {:?}, expected ({}, {})",
                turn.conversation,
                turn.index,
                m.dim(),
                turn.utterance.num_chars(),
                self.dim
            )));
        }
        Ok(m)
    }

    fn utterance_embedding(&self, turn: TurnRef<'_>) -> Result<Array1<f64>> {
        let m = load_embeddings(&self.utterance_path(turn.conversation, turn.index))?;
        if m.dim() != (1, self.dim) {
            return Err(Error::Format(format!(
                "utterance embedding for {}#{} has shape {:?}",
                turn.conversation,
                turn.index,
                m.dim()
            )));
        }
        Ok(m.row(0).to_owned())
    }

    fn dim(&self) -> usize {
        self.dim
    }
}
