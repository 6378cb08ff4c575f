//! Browser bindings for a few self-contained pieces of the model.
//!
//! The plain functions are ordinary Rust and tested natively; the
//! `#[wasm_bindgen]` wrappers flatten matrices row-major for JavaScript.

use convtts::attention::{initial_alignment, sma_step};
use convtts::corpus::{extract_mel, synthetic, MelConfig, Span};
use convtts::features::{stat_features_from_spans, NormalizationConfig, Overflow, STAT_DIM};
use convtts::synthesis::griffin_lim;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use wasm_bindgen::prelude::*;

/// Sentence spans of `text`: a sentence ends after `.`, `?` or `!`.
pub fn sentence_spans(text: &str) -> Vec<Span> {
    let chars: Vec<char> = text.chars().collect();
    let mut spans = Vec::new();
    let mut start = 0;
    for (i, c) in chars.iter().enumerate() {
        if matches!(c, '.' | '?' | '!') {
            spans.push(Span::new(start, i + 1));
            start = i + 1;
        }
    }
    if start < chars.len() {
        spans.push(Span::new(start, chars.len()));
    }
    spans
}

/// `n × 6` features of every character, counts clamped to the maxima.
pub fn char_stat_features(text: &str, max_sentence: usize, max_utterance: usize, max_sentences: usize) -> Result<Vec<[f64; STAT_DIM]>, String> {
    let norm = NormalizationConfig::new(max_sentence, max_utterance, max_sentences).map_err(|e| e.to_string())?;
    let spans = sentence_spans(text);
    let f = stat_features_from_spans(&spans, &norm, Overflow::Clamp).map_err(|e| e.to_string())?;
    Ok(f.into_iter().map(|v| v.0).collect())
}

/// Alignment rows of a soft monotonic attention run over `positions` memory
/// rows. Energies are `bias + noise · N` with uniform `N` in [-1, 1].
pub fn attention_rollout(positions: usize, steps: usize, bias: f64, noise: f64, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut a = initial_alignment(positions);
    let mut rows = vec![a.clone()];
    for _ in 1..steps {
        let energies: Vec<f64> = (0..positions).map(|_| bias + noise * rng.random_range(-1.0..=1.0)).collect();
        a = sma_step(&a, &energies).expect("lengths agree");
        rows.push(a.clone());
    }
    rows
}

pub struct RoundTrip {
    pub original: Vec<f64>,
    pub mel: Vec<Vec<f64>>,
    pub reconstructed: Vec<f64>,
}

/// Renders lowercase text with the toy tone voice, takes its log-mel and
/// inverts it again with Griffin-Lim.
pub fn tone_round_trip(text: &str, iterations: usize, seed: u64) -> Result<RoundTrip, String> {
    let u = synthetic::phonemize(text).map_err(|e| e.to_string())?;
    let original = synthetic::render(&u.phonemes, &synthetic::inventory());
    let cfg = MelConfig::default();
    let mel = extract_mel(&original, synthetic::SAMPLE_RATE, &cfg).map_err(|e| e.to_string())?;
    let reconstructed = griffin_lim(&mel.frames, iterations, &cfg, seed).map_err(|e| e.to_string())?;
    Ok(RoundTrip {
        original,
        mel: mel.frames.rows().into_iter().map(|r| r.to_vec()).collect(),
        reconstructed,
    })
}

fn flatten<const N: usize>(rows: &[[f64; N]]) -> Vec<f64> {
    rows.iter().flatten().copied().collect()
}

#[wasm_bindgen(js_name = statFeatures)]
pub fn stat_features_js(text: &str, max_sentence: usize, max_utterance: usize, max_sentences: usize) -> Result<Vec<f64>, JsError> {
    char_stat_features(text, max_sentence, max_utterance, max_sentences)
        .map(|f| flatten(&f))
        .map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = attentionRollout)]
pub fn attention_rollout_js(positions: usize, steps: usize, bias: f64, noise: f64, seed: u32) -> Vec<f64> {
    attention_rollout(positions.max(1), steps.max(1), bias, noise, seed as u64)
        .into_iter()
        .flatten()
        .collect()
}

#[wasm_bindgen]
pub struct ToneRoundTrip {
    inner: RoundTrip,
}

#[wasm_bindgen]
impl ToneRoundTrip {
    #[wasm_bindgen(getter)]
    pub fn original(&self) -> Vec<f32> {
        self.inner.original.iter().map(|&v| v as f32).collect()
    }

    #[wasm_bindgen(getter)]
    pub fn reconstructed(&self) -> Vec<f32> {
        self.inner.reconstructed.iter().map(|&v| v as f32).collect()
    }

    #[wasm_bindgen(getter)]
    pub fn mel(&self) -> Vec<f64> {
        self.inner.mel.iter().flatten().copied().collect()
    }

    #[wasm_bindgen(getter, js_name = nFrames)]
    pub fn n_frames(&self) -> usize {
        self.inner.mel.len()
    }

    #[wasm_bindgen(getter, js_name = sampleRate)]
    pub fn sample_rate(&self) -> u32 {
        synthetic::SAMPLE_RATE
    }
}

#[wasm_bindgen(js_name = toneRoundTrip)]
pub fn tone_round_trip_js(text: &str, iterations: usize, seed: u32) -> Result<ToneRoundTrip, JsError> {
    tone_round_trip(text, iterations, seed as u64)
        .map(|inner| ToneRoundTrip { inner })
        .map_err(|e| JsError::new(&e))
}
