//! Small generated corpus for tests and demos: toy phonemization of
//! lowercase text and tone-sequence audio.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use super::{
    write_conversations, write_wav, AnnotationKind, Conversation, CorpusManifest, Inventory, Span,
    SpontaneousAnnotation, Turn, Utterance,
};
use crate::error::{Error, Result};

const CONSONANTS: [&str; 8] = ["p", "t", "k", "s", "m", "n", "l", "r"];
const VOWELS: [&str; 5] = ["a", "e", "i", "o", "u"];
const PUNCTUATION: [char; 4] = ['.', ',', '?', '!'];
pub const WORD_BOUNDARY: &str = "-";
pub const END_SYMBOL: &str = "#";
pub const SAMPLE_RATE: u32 = 16_000;

pub fn inventory() -> Inventory {
    let mut symbols: Vec<String> = CONSONANTS.iter().chain(VOWELS.iter()).map(|s| s.to_string()).collect();
    symbols.extend(PUNCTUATION.iter().map(|c| c.to_string()));
    symbols.push(WORD_BOUNDARY.into());
    symbols.push(END_SYMBOL.into());
    Inventory::new(symbols)
}

fn letter_phonemes(c: char) -> [&'static str; 2] {
    let i = (c as u32 - 'a' as u32) as usize;
    [CONSONANTS[(i * 3) % CONSONANTS.len()], VOWELS[i % VOWELS.len()]]
}

/// Toy phonemization. Letters own a consonant-vowel pair, punctuation owns
/// its own symbol, spaces own nothing and emit an unowned word boundary, and
/// an unowned end symbol closes the utterance. A sentence ends after each
/// punctuation mark.
pub fn phonemize(text: &str) -> Result<Utterance> {
    let mut phonemes: Vec<String> = Vec::new();
    let mut alignment = Vec::new();
    let mut sentences = Vec::new();
    let mut sent_start = 0;
    let chars: Vec<char> = text.chars().collect();
    for (i, &c) in chars.iter().enumerate() {
        let start = phonemes.len();
        if c.is_ascii_lowercase() {
            phonemes.extend(letter_phonemes(c).iter().map(|s| s.to_string()));
        } else if PUNCTUATION.contains(&c) {
            phonemes.push(c.to_string());
        } else if c == ' ' {
            alignment.push(Span::new(start, start));
            phonemes.push(WORD_BOUNDARY.into());
            continue;
        } else {
            return Err(Error::Input(format!("synthetic phonemizer cannot handle {c:?}")));
        }
        alignment.push(Span::new(start, phonemes.len()));
        if PUNCTUATION.contains(&c) && i + 1 < chars.len() {
            sentences.push(Span::new(sent_start, i + 1));
            sent_start = i + 1;
        }
    }
    if chars.is_empty() {
        return Err(Error::Input("empty text".into()));
    }
    sentences.push(Span::new(sent_start, chars.len()));
    phonemes.push(END_SYMBOL.into());
    Ok(Utterance {
        text: text.to_string(),
        sentence_spans: sentences,
        phonemes,
        char_alignment: alignment,
        annotations: Vec::new(),
    })
}

/// Duration in samples and tone frequency (0 for silence) of a symbol.
fn sound(symbol: &str, inv: &Inventory) -> (usize, f64) {
    let id = inv.id(symbol).unwrap_or(0) as f64;
    match symbol {
        s if CONSONANTS.contains(&s) => (400, 300.0 + 90.0 * id),
        s if VOWELS.contains(&s) => (800, 250.0 + 120.0 * id),
        WORD_BOUNDARY => (200, 0.0),
        END_SYMBOL => (400, 0.0),
        _ => (600, 180.0),
    }
}

/// Tone-sequence rendering of a phoneme sequence with raised-cosine edges
/// and a faint fixed noise floor.
pub fn render(phonemes: &[String], inv: &Inventory) -> Vec<f64> {
    let mut out = Vec::new();
    for p in phonemes {
        let (n, f) = sound(p, inv);
        let ramp = 80.min(n / 2);
        for i in 0..n {
            let env = if i < ramp {
                0.5 - 0.5 * (PI * i as f64 / ramp as f64).cos()
            } else if i >= n - ramp {
                0.5 - 0.5 * (PI * (n - i) as f64 / ramp as f64).cos()
            } else {
                1.0
            };
            let t = i as f64 / SAMPLE_RATE as f64;
            let tone = if f > 0.0 {
                0.3 * env * (2.0 * PI * f * t).sin() + 0.1 * env * (4.0 * PI * f * t).sin()
            } else {
                0.0
            };
            out.push(tone);
        }
    }
    // deterministic low-level dither keeps silent frames off the log floor
    let mut state: u32 = 0x1234_5678;
    for s in &mut out {
        state ^= state << 13;
        state ^= state >> 17;
        state ^= state << 5;
        *s += 2e-3 * (state as f64 / u32::MAX as f64 - 0.5);
    }
    out
}

fn turn(index: usize, speaker: &str, text: &str, audio: Option<PathBuf>) -> Result<Turn> {
    Ok(Turn {
        index,
        speaker: speaker.into(),
        utterance: phonemize(text)?,
        audio_path: audio,
    })
}

/// Scripts of the generated corpus: `(conversation id, [(speaker, text)])`.
pub fn scripts() -> Vec<(&'static str, Vec<(&'static str, &'static str)>)> {
    vec![
        (
            "conv_a",
            vec![
                ("customer", "hi. need help."),
                ("agent", "sure, go on."),
                ("customer", "my bill is odd."),
                ("agent", "let me see."),
                ("customer", "ok."),
                ("agent", "it is fixed."),
            ],
        ),
        (
            "conv_b",
            vec![
                ("agent", "hello."),
                ("customer", "hey, a card is lost."),
                ("agent", "um, we block it."),
                ("customer", "thanks."),
                ("agent", "you are safe."),
            ],
        ),
        (
            "conv_c",
            vec![
                ("customer", "is it open?"),
                ("agent", "yes, till six."),
                ("customer", "fine."),
                ("agent", "bye now."),
            ],
        ),
    ]
}

/// Writes the generated corpus into `dir` and returns the manifest path:
/// three conversations between two speakers with eight agent turns, each
/// agent turn backed by a 16-bit mono wave file.
pub fn write_synthetic_corpus(dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir.join("wav")).map_err(|e| Error::io(dir, e))?;
    let inv = inventory();
    inv.save(&dir.join("inventory.txt"))?;
    let mut convs = Vec::new();
    for (id, lines) in scripts() {
        let mut turns = Vec::new();
        for (i, (speaker, text)) in lines.iter().enumerate() {
            let audio = if *speaker == "agent" {
                let rel = PathBuf::from("wav").join(format!("{id}_{i}.wav"));
                let u = phonemize(text)?;
                write_wav(&dir.join(&rel), &render(&u.phonemes, &inv), SAMPLE_RATE)?;
                Some(rel)
            } else {
                None
            };
            let mut t = turn(i, speaker, text, audio)?;
            if text.starts_with("um,") {
                t.utterance.annotations.push(SpontaneousAnnotation {
                    kind: AnnotationKind::Filler,
                    char_span: Span::new(0, 2),
                });
            }
            turns.push(t);
        }
        convs.push(Conversation { id: id.into(), turns });
    }
    write_conversations(&dir.join("conversations.jsonl"), &convs)?;
    let manifest = CorpusManifest {
        conversations: vec![PathBuf::from("conversations.jsonl")],
        speaker_labels: ("agent".into(), "customer".into()),
        inventory_path: PathBuf::from("inventory.txt"),
        normalization: None,
    };
    let path = dir.join("manifest.json");
    crate::tensor_io::write_json(&path, &manifest)?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::load_corpus;

    #[test]
    fn phonemize_structure() {
        let u = phonemize("ab. c").unwrap();
        assert_eq!(u.sentence_spans, vec![Span::new(0, 3), Span::new(3, 5)]);
        assert_eq!(u.phonemes.len(), 2 + 2 + 1 + 1 + 2 + 1);
        assert_eq!(u.char_alignment[3], Span::new(5, 5));
        assert_eq!(u.phonemes[5], WORD_BOUNDARY);
        assert_eq!(u.phonemes.last().unwrap(), END_SYMBOL);
        assert!(phonemize("A").is_err());
    }

    #[test]
    fn generated_corpus_loads_and_validates() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = write_synthetic_corpus(dir.path()).unwrap();
        let corpus = load_corpus(&manifest).unwrap();
        assert_eq!(corpus.conversations.len(), 3);
        let agent_turns = corpus
            .conversations
            .iter()
            .flat_map(|c| &c.turns)
            .filter(|t| t.speaker == "agent")
            .count();
        assert_eq!(agent_turns, 8);
    }
}
