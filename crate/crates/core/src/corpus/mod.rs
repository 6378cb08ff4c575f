//! Conversational corpus: record format, loading, validation and splitting.
//!
//! A corpus is described by a JSON manifest pointing at one or more
//! line-delimited conversation files (one JSON conversation per line), a
//! phoneme inventory (one symbol per line) and an optional frozen
//! [`NormalizationConfig`](crate::features::NormalizationConfig).

mod audio;
mod mel;
pub mod synthetic;
mod validate;

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

pub use audio::{read_wav, write_wav};
pub use mel::{extract_mel, MelConfig, MelExtractor, MelSidecar, MelSpectrogram, N_MELS};
pub use validate::{validate_conversation, Diagnostic, ValidationRules};

use crate::error::{Error, Result};
use crate::features::NormalizationConfig;

/// Half-open range `[start, end)`, serialized as a two-element array.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(from = "(usize, usize)", into = "(usize, usize)")]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn new(start: usize, end: usize) -> Self {
        Self { start, end }
    }

    pub fn len(&self) -> usize {
        self.end.saturating_sub(self.start)
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }

    pub fn contains_span(&self, other: &Span) -> bool {
        self.start <= other.start && other.end <= self.end
    }
}

impl From<(usize, usize)> for Span {
    fn from((start, end): (usize, usize)) -> Self {
        Span { start, end }
    }
}

impl From<Span> for (usize, usize) {
    fn from(s: Span) -> Self {
        (s.start, s.end)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnnotationKind {
    Filler,
    Repeat,
    FalseStart,
    HesitationPause,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpontaneousAnnotation {
    pub kind: AnnotationKind,
    #[serde(rename = "span")]
    pub char_span: Span,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Utterance {
    pub text: String,
    pub sentence_spans: Vec<Span>,
    pub phonemes: Vec<String>,
    pub char_alignment: Vec<Span>,
    #[serde(default)]
    pub annotations: Vec<SpontaneousAnnotation>,
}

impl Utterance {
    pub fn chars(&self) -> Vec<char> {
        self.text.chars().collect()
    }

    pub fn num_chars(&self) -> usize {
        self.text.chars().count()
    }

    /// For every phoneme position, the index of the character that owns it.
    pub fn phoneme_owners(&self) -> Vec<Option<usize>> {
        let mut owners = vec![None; self.phonemes.len()];
        for (c, span) in self.char_alignment.iter().enumerate() {
            for slot in owners.iter_mut().take(span.end).skip(span.start) {
                *slot = Some(c);
            }
        }
        owners
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub index: usize,
    pub speaker: String,
    #[serde(flatten)]
    pub utterance: Utterance,
    #[serde(rename = "audio")]
    pub audio_path: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Conversation {
    pub id: String,
    pub turns: Vec<Turn>,
}

/// Phoneme symbols, punctuation and boundary markers, in id order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Inventory {
    symbols: Vec<String>,
    index: HashMap<String, usize>,
}

impl From<Vec<String>> for Inventory {
    fn from(symbols: Vec<String>) -> Self {
        let index = symbols
            .iter()
            .enumerate()
            .map(|(i, s)| (s.clone(), i))
            .collect();
        Self { symbols, index }
    }
}

impl From<Inventory> for Vec<String> {
    fn from(inv: Inventory) -> Self {
        inv.symbols
    }
}

impl Inventory {
    pub fn new<S: Into<String>>(symbols: impl IntoIterator<Item = S>) -> Self {
        Self::from(symbols.into_iter().map(Into::into).collect::<Vec<String>>())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let symbols: Vec<String> = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(String::from)
            .collect();
        let mut seen = HashMap::new();
        for (line, s) in symbols.iter().enumerate() {
            if seen.insert(s.clone(), line).is_some() {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: line + 1,
                    message: format!("duplicate symbol {s:?}"),
                });
            }
        }
        Ok(Self::from(symbols))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = self.symbols.join("\n");
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn contains(&self, symbol: &str) -> bool {
        self.index.contains_key(symbol)
    }

    pub fn id(&self, symbol: &str) -> Option<usize> {
        self.index.get(symbol).copied()
    }

    pub fn symbols(&self) -> &[String] {
        &self.symbols
    }

    pub fn without(&self, symbol: &str) -> Self {
        Self::new(self.symbols.iter().filter(|s| *s != symbol).cloned())
    }

    pub fn encode(&self, phonemes: &[String]) -> Result<Vec<usize>> {
        phonemes
            .iter()
            .map(|p| {
                self.id(p)
                    .ok_or_else(|| Error::Input(format!("symbol {p:?} not in inventory")))
            })
            .collect()
    }
}

/// Which label plays the agent (the synthesized, trainable voice). The
/// agent is encoded as speaker scalar 1, the customer as 0.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpeakerLabels {
    pub agent: String,
    pub customer: String,
}

impl Default for SpeakerLabels {
    fn default() -> Self {
        Self {
            agent: "agent".into(),
            customer: "customer".into(),
        }
    }
}

impl SpeakerLabels {
    pub fn scalar(&self, label: &str) -> Option<f64> {
        if label == self.agent {
            Some(1.0)
        } else if label == self.customer {
            Some(0.0)
        } else {
            None
        }
    }

    pub fn is_agent(&self, label: &str) -> bool {
        label == self.agent
    }
}

/// On-disk manifest. `speaker_labels` is `[agent, customer]`. Paths are
/// relative to the manifest's directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub conversations: Vec<PathBuf>,
    pub speaker_labels: (String, String),
    #[serde(rename = "inventory")]
    pub inventory_path: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub normalization: Option<PathBuf>,
}

impl CorpusManifest {
    pub fn speakers(&self) -> SpeakerLabels {
        SpeakerLabels {
            agent: self.speaker_labels.0.clone(),
            customer: self.speaker_labels.1.clone(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Corpus {
    pub root: PathBuf,
    pub manifest: CorpusManifest,
    pub conversations: Vec<Conversation>,
    pub inventory: Inventory,
    pub speakers: SpeakerLabels,
    pub normalization: Option<NormalizationConfig>,
}

impl Corpus {
    pub fn conversation(&self, id: &str) -> Option<&Conversation> {
        self.conversations.iter().find(|c| c.id == id)
    }

    pub fn ids(&self) -> Vec<String> {
        self.conversations.iter().map(|c| c.id.clone()).collect()
    }

    pub fn rules(&self) -> ValidationRules<'_> {
        ValidationRules {
            inventory: &self.inventory,
            speakers: &self.speakers,
            require_agent_audio: true,
        }
    }
}

/// Parses line-delimited conversation records. Relative audio paths are
/// resolved against the file's directory.
pub fn read_conversations(path: &Path) -> Result<Vec<Conversation>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("")).to_path_buf();
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let mut conv: Conversation = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: n + 1,
            message: e.to_string(),
        })?;
        for turn in &mut conv.turns {
            if let Some(audio) = &turn.audio_path {
                if audio.is_relative() {
                    turn.audio_path = Some(base.join(audio));
                }
            }
        }
        out.push(conv);
    }
    Ok(out)
}

pub fn write_conversations(path: &Path, conversations: &[Conversation]) -> Result<()> {
    let mut text = String::new();
    for conv in conversations {
        text.push_str(&serde_json::to_string(conv).map_err(|e| Error::Format(e.to_string()))?);
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Loads every conversation listed by the manifest, in manifest order, and
/// rejects the corpus if any conversation fails validation.
pub fn load_corpus(manifest_path: &Path) -> Result<Corpus> {
    let (corpus, diagnostics) = load_corpus_unchecked(manifest_path)?;
    if diagnostics.is_empty() {
        Ok(corpus)
    } else {
        Err(Error::Validation(diagnostics))
    }
}

/// Like [`load_corpus`] but returns diagnostics instead of failing on them.
pub fn load_corpus_unchecked(manifest_path: &Path) -> Result<(Corpus, Vec<Diagnostic>)> {
    let manifest: CorpusManifest = crate::tensor_io::read_json(manifest_path)?;
    let root = manifest_path
        .parent()
        .unwrap_or(Path::new(""))
        .to_path_buf();
    let inventory = Inventory::load(&root.join(&manifest.inventory_path))?;
    let normalization = match &manifest.normalization {
        Some(p) => Some(crate::tensor_io::read_json(&root.join(p))?),
        None => None,
    };
    let mut conversations = Vec::new();
    for file in &manifest.conversations {
        conversations.extend(read_conversations(&root.join(file))?);
    }
    let speakers = manifest.speakers();
    let corpus = Corpus {
        root,
        manifest,
        conversations,
        inventory,
        speakers,
        normalization,
    };
    let rules = corpus.rules();
    let mut diagnostics: Vec<Diagnostic> = corpus
        .conversations
        .iter()
        .flat_map(|c| validate_conversation(c, &rules))
        .collect();
    let mut seen = HashMap::new();
    for conv in &corpus.conversations {
        if seen.insert(conv.id.clone(), ()).is_some() {
            diagnostics.push(Diagnostic::new(&conv.id, None, "duplicate_conversation_id", ""));
        }
    }
    Ok((corpus, diagnostics))
}

/// Splits conversation ids into `(train, val)` at conversation granularity.
/// The validation count is `round(n · val_fraction)`; both halves keep the
/// input order.
pub fn split_corpus(ids: &[String], val_fraction: f64, seed: u64) -> Result<(Vec<String>, Vec<String>)> {
    if !(0.0..1.0).contains(&val_fraction) {
        return Err(Error::Config(format!(
            "val_fraction must lie in [0, 1), got {val_fraction}"
        )));
    }
    let n_val = (ids.len() as f64 * val_fraction).round() as usize;
    let mut order: Vec<usize> = (0..ids.len()).collect();
    order.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
    let mut is_val = vec![false; ids.len()];
    for &i in order.iter().take(n_val) {
        is_val[i] = true;
    }
    let (val, train): (Vec<_>, Vec<_>) = ids.iter().cloned().zip(is_val).partition(|(_, v)| *v);
    Ok((
        train.into_iter().map(|(id, _)| id).collect(),
        val.into_iter().map(|(id, _)| id).collect(),
    ))
}

/// Extracts the log-mel of every agent turn with audio into
/// `<out_dir>/<conversation>/turn_<index>.mel.f32` plus sidecar, returning
/// the payload paths in corpus order.
pub fn extract_corpus_mels(corpus: &Corpus, out_dir: &Path, config: &MelConfig) -> Result<Vec<PathBuf>> {
    let extractor = MelExtractor::new(config.clone())?;
    let mut written = Vec::new();
    for conv in &corpus.conversations {
        let dir = out_dir.join(&conv.id);
        for turn in &conv.turns {
            let Some(audio) = &turn.audio_path else { continue };
            if !corpus.speakers.is_agent(&turn.speaker) {
                continue;
            }
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            let (samples, rate) = read_wav(audio)?;
            let path = dir.join(format!("turn_{:03}.mel.f32", turn.index));
            extractor.extract(&samples, rate)?.save(&path)?;
            written.push(path);
        }
    }
    Ok(written)
}

impl fmt::Display for AnnotationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            AnnotationKind::Filler => "filler",
            AnnotationKind::Repeat => "repeat",
            AnnotationKind::FalseStart => "false_start",
            AnnotationKind::HesitationPause => "hesitation_pause",
        };
        f.write_str(s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("c{i}")).collect()
    }

    #[test]
    fn zero_fraction_keeps_everything_in_train() {
        let (train, val) = split_corpus(&ids(7), 0.0, 3).unwrap();
        assert_eq!(train, ids(7));
        assert!(val.is_empty());
    }

    #[test]
    fn split_is_reproducible() {
        let a = split_corpus(&ids(10), 0.2, 11).unwrap();
        let b = split_corpus(&ids(10), 0.2, 11).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.1.len(), 2);
    }

    #[test]
    fn out_of_range_fraction_is_config_error() {
        assert!(matches!(split_corpus(&ids(3), 1.0, 0), Err(Error::Config(_))));
        assert!(matches!(split_corpus(&ids(3), -0.1, 0), Err(Error::Config(_))));
    }

    #[test]
    fn span_serializes_as_pair() {
        let s = serde_json::to_string(&Span::new(2, 5)).unwrap();
        assert_eq!(s, "[2,5]");
        let back: Span = serde_json::from_str(&s).unwrap();
        assert_eq!(back, Span::new(2, 5));
    }

    #[test]
    fn record_field_names_match_format() {
        let turn = Turn {
            index: 0,
            speaker: "agent".into(),
            utterance: Utterance {
                text: "AB.".into(),
                sentence_spans: vec![Span::new(0, 3)],
                phonemes: vec!["b".into(), "a".into(), ".".into()],
                char_alignment: vec![Span::new(0, 1), Span::new(1, 2), Span::new(2, 3)],
                annotations: vec![SpontaneousAnnotation {
                    kind: AnnotationKind::FalseStart,
                    char_span: Span::new(0, 1),
                }],
            },
            audio_path: None,
        };
        let v: serde_json::Value = serde_json::to_value(&turn).unwrap();
        for key in ["index", "speaker", "text", "sentence_spans", "phonemes", "char_alignment", "annotations", "audio"] {
            assert!(v.get(key).is_some(), "missing {key}");
        }
        assert_eq!(v["annotations"][0]["kind"], "false_start");
        assert_eq!(v["annotations"][0]["span"], serde_json::json!([0, 1]));
        assert!(v["audio"].is_null());
    }

    proptest::proptest! {
        #[test]
        fn split_is_disjoint_and_exhaustive(n in 0usize..40, frac in 0.0f64..0.99, seed: u64) {
            let all = ids(n);
            let (train, val) = split_corpus(&all, frac, seed).unwrap();
            proptest::prop_assert_eq!(train.len() + val.len(), n);
            for id in &val {
                proptest::prop_assert!(!train.contains(id));
            }
            let mut merged: Vec<_> = train.iter().chain(val.iter()).cloned().collect();
            merged.sort();
            let mut sorted = all.clone();
            sorted.sort();
            proptest::prop_assert_eq!(merged, sorted);
        }
    }
}
