//! Shared helpers for integration and acceptance tests.
#![allow(dead_code)]

use std::path::{Path, PathBuf};

use convtts::auxiliary::{AuxEncoderConfig, AuxiliaryEncoder};
use convtts::autograd::{Graph, Var};
use convtts::context::{ContextEncoder, ContextEncoderConfig};
use convtts::corpus::{load_corpus, synthetic, Corpus, MelConfig};
use convtts::decoder::{Decoder, DecoderConfig, Postnet, PostnetConfig};
use convtts::encoder::{Encoder, EncoderConfig};
use convtts::features::{NormalizationConfig, Overflow, StubEmbedder, UtteranceEmbedding, EMBEDDING_DIM, STAT_DIM};
use convtts::inputs::InputBuilder;
use convtts::nn::{Mode, Packed, RngStreams, Stream};
use convtts::params::ParamStore;
use convtts::training::{prepare_examples, TrainingExample};
use convtts::ModelVariant;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;
pub const GRAD_REL_TOL: f64 = 1e-4;
/// Below this magnitude on both sides a gradient counts as zero (a bias
/// feeding batch norm, say) and is compared absolutely instead.
pub const ZERO_GRAD: f64 = 1e-8;
pub const ENTRIES_PER_TENSOR: usize = 16;

#[derive(Debug, Clone)]
pub struct GradReport {
    pub max_rel: f64,
    pub worst: String,
    pub checked: usize,
    /// Entries that are zero on both sides, and their largest absolute gap.
    pub zero_entries: usize,
    pub max_zero_gap: f64,
}

impl GradReport {
    pub fn passes(&self) -> bool {
        self.checked > self.zero_entries && self.max_rel < GRAD_REL_TOL && self.max_zero_gap < ZERO_GRAD
    }
}

pub fn uniform(shape: (usize, usize), scale: f64, rng: &mut ChaCha8Rng) -> Array2<f64> {
    Array2::from_shape_simple_fn(shape, || rng.random_range(-scale..scale))
}

/// Gives every all-zero trainable tensor small random values so gradients
/// flow through zero-initialized projections.
pub fn randomize_zero_params(store: &mut ParamStore, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<_> = store.trainable_ids().collect();
    for id in ids {
        if store.value(id).iter().all(|&v| v == 0.0) {
            let shape = store.value(id).dim();
            *store.value_mut(id) = uniform(shape, 0.2, &mut rng);
        }
    }
}

/// Scalar `Σ_i Σ out_i ⊙ R_i` with fixed random probes `R_i`.
fn probe_loss(g: &mut Graph, outs: &[Var]) -> Var {
    let mut total: Option<Var> = None;
    for (i, &o) in outs.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + i as u64);
        let r = uniform(g.shape(o), 1.0, &mut rng);
        let weighted = g.mul_const(o, r);
        let s = g.sum(weighted);
        total = Some(match total {
            Some(t) => g.add(t, s),
            None => s,
        });
    }
    total.expect("at least one output")
}

/// Central-difference check of every trainable tensor of `store` against the
/// tape's gradients, probing a seeded sample of entries per tensor.
pub fn grad_check<F>(store: &mut ParamStore, seed: u64, forward: F) -> GradReport
where
    F: Fn(&mut Graph, &ParamStore) -> Vec<Var>,
{
    let loss_value = |store: &ParamStore| {
        let mut g = Graph::new();
        let outs = forward(&mut g, store);
        let l = probe_loss(&mut g, &outs);
        g.scalar(l)
    };
    let mut g = Graph::new();
    let outs = forward(&mut g, store);
    let l = probe_loss(&mut g, &outs);
    let grads = g.backward(l);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradReport {
        max_rel: 0.0,
        worst: String::new(),
        checked: 0,
        zero_entries: 0,
        max_zero_gap: 0.0,
    };
    let ids: Vec<_> = store.trainable_ids().collect();
    for id in ids {
        let (rows, cols) = store.value(id).dim();
        let n = rows * cols;
        let picks: Vec<usize> = if n <= ENTRIES_PER_TENSOR {
            (0..n).collect()
        } else {
            (0..ENTRIES_PER_TENSOR).map(|_| rng.random_range(0..n)).collect()
        };
        for k in picks {
            let (r, c) = (k / cols, k % cols);
            let analytic = grads.param(id).map_or(0.0, |gr| gr[[r, c]]);
            let orig = store.value(id)[[r, c]];
            store.value_mut(id)[[r, c]] = orig + FD_STEP;
            let plus = loss_value(store);
            store.value_mut(id)[[r, c]] = orig - FD_STEP;
            let minus = loss_value(store);
            store.value_mut(id)[[r, c]] = orig;
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            report.checked += 1;
            let scale = analytic.abs().max(numeric.abs());
            if scale < ZERO_GRAD {
                report.zero_entries += 1;
                report.max_zero_gap = report.max_zero_gap.max((analytic - numeric).abs());
                continue;
            }
            let rel = (analytic - numeric).abs() / scale;
            if rel > report.max_rel {
                report.max_rel = rel;
                report.worst = format!("{}[{r},{c}] analytic {analytic:e} numeric {numeric:e}", store.name(id));
            }
        }
    }
    report
}

pub fn check_encoder() -> GradReport {
    let mut store = ParamStore::new();
    let mut init = RngStreams::new(11).get(Stream::Init);
    let enc = Encoder::new(&mut store, EncoderConfig::desk(20), &mut init);
    let a: Vec<usize> = (0..9).map(|i| (i * 7) % 20).collect();
    let b: Vec<usize> = (0..6).map(|i| (i * 3 + 1) % 20).collect();
    grad_check(&mut store, 1, |g, store| {
        let mut rng = RngStreams::new(5).get(Stream::Encoder);
        enc.forward(g, store, &[&a, &b], Mode::Train, &mut rng).unwrap()
    })
}

pub fn check_auxiliary() -> GradReport {
    let mut store = ParamStore::new();
    let mut init = RngStreams::new(12).get(Stream::Init);
    let aux = AuxiliaryEncoder::new(&mut store, AuxEncoderConfig::desk(16), &mut init).unwrap();
    randomize_zero_params(&mut store, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x1 = uniform((7, EMBEDDING_DIM + STAT_DIM), 1.0, &mut rng);
    let x2 = uniform((4, EMBEDDING_DIM + STAT_DIM), 1.0, &mut rng);
    grad_check(&mut store, 2, |g, store| {
        let mut rng = RngStreams::new(5).get(Stream::Auxiliary);
        aux.encode_chars(g, store, &[&x1, &x2], Mode::Train, &mut rng).unwrap()
    })
}

pub fn random_history(len: usize, rng: &mut ChaCha8Rng) -> Vec<UtteranceEmbedding> {
    (0..len)
        .map(|i| UtteranceEmbedding {
            vector: uniform((1, EMBEDDING_DIM), 1.0, rng).row(0).to_owned(),
            speaker: if i % 2 == 0 { 1.0 } else { 0.0 },
        })
        .collect()
}

pub fn check_context() -> GradReport {
    let mut store = ParamStore::new();
    let mut init = RngStreams::new(13).get(Stream::Init);
    let ctx = ContextEncoder::new(&mut store, ContextEncoderConfig::full(16), &mut init);
    randomize_zero_params(&mut store, 4);
    let history = random_history(6, &mut ChaCha8Rng::seed_from_u64(21));
    grad_check(&mut store, 3, |g, store| vec![ctx.forward(g, store, &history).unwrap()])
}

pub fn check_decoder_step() -> GradReport {
    const MEMORY_DIM: usize = 16;
    let mut store = ParamStore::new();
    let mut init = RngStreams::new(14).get(Stream::Init);
    let config = DecoderConfig {
        prenet_dims: vec![16, 16],
        lstm_units: 12,
        attention_dim: 8,
        ..DecoderConfig::desk()
    };
    let dec = Decoder::new(&mut store, config, MEMORY_DIM, &mut init).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let memories = [uniform((5, MEMORY_DIM), 1.0, &mut rng), uniform((3, MEMORY_DIM), 1.0, &mut rng)];
    let frames: Vec<Array2<f64>> = (0..3).map(|_| uniform((2, 80), 1.0, &mut rng)).collect();
    grad_check(&mut store, 4, |g, store| {
        let mut rng = RngStreams::new(5).get(Stream::Decoder);
        let mems: Vec<Var> = memories.iter().map(|m| g.leaf(m.clone())).collect();
        let keys: Vec<Var> = mems.iter().map(|&m| dec.attention.keys(g, store, m)).collect();
        let mut state = dec.initial_state(g, &[5, 3]);
        let mut outs = Vec::new();
        for f in &frames {
            let prev = g.leaf(f.clone());
            let step = dec.step(g, store, &mems, &keys, &state, prev, Mode::Train, &mut rng);
            outs.push(step.mel);
            outs.push(step.stop);
            state = step.state;
        }
        outs.extend(state.alignments.iter().copied());
        outs
    })
}

pub fn check_postnet() -> GradReport {
    let mut store = ParamStore::new();
    let mut init = RngStreams::new(15).get(Stream::Init);
    let config = PostnetConfig {
        channels: 8,
        ..PostnetConfig::desk()
    };
    let post = Postnet::new(&mut store, config, 80, &mut init).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let mels = [uniform((6, 80), 1.0, &mut rng), uniform((4, 80), 1.0, &mut rng)];
    grad_check(&mut store, 5, |g, store| {
        let mut rng = RngStreams::new(5).get(Stream::Postnet);
        let leaves: Vec<Var> = mels.iter().map(|m| g.leaf(m.clone())).collect();
        let packed = Packed::pack(g, &leaves);
        vec![post.forward(g, store, &packed, Mode::Train, &mut rng).var]
    })
}

/// Generated corpus written into `dir`.
pub fn synthetic_corpus(dir: &Path) -> (PathBuf, Corpus) {
    let manifest = synthetic::write_synthetic_corpus(dir).unwrap();
    let corpus = load_corpus(&manifest).unwrap();
    (manifest, corpus)
}

pub fn corpus_normalization(corpus: &Corpus) -> NormalizationConfig {
    NormalizationConfig::from_utterances(corpus.conversations.iter().flat_map(|c| c.turns.iter().map(|t| &t.utterance)))
}

/// Training examples of every agent turn for `variant`, using the stub embedder.
pub fn synthetic_examples(corpus: &Corpus, variant: ModelVariant) -> Vec<TrainingExample> {
    let norm = corpus_normalization(corpus);
    let stub = StubEmbedder::default();
    let builder = InputBuilder {
        variant,
        inventory: &corpus.inventory,
        speakers: &corpus.speakers,
        normalization: &norm,
        provider: Some(&stub),
        overflow: Overflow::Error,
    };
    prepare_examples(corpus, &corpus.ids(), &builder, &MelConfig::default()).unwrap()
}
