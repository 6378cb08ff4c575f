mod common;

use std::fs;
use std::path::{Path, PathBuf};

use common::*;
use convtts::corpus::synthetic::phonemize;
use convtts::corpus::{write_conversations, Corpus, MelConfig, MelExtractor, MelSpectrogram, Turn};
use convtts::features::{Overflow, StubEmbedder};
use convtts::inputs::InputBuilder;
use convtts::model::{Model, ModelConfig, ModelVariant};
use convtts::nn::RngStreams;
use convtts::synthesis::{griffin_lim, read_script, run_conversation, SynthesisOptions, TurnResult};
use convtts::training::{Checkpoint, CheckpointMeta, TrainConfig, Trainer};
use convtts::Error;

fn save_checkpoint(corpus: &Corpus, variant: ModelVariant, path: &Path) {
    let mut model = Model::new(ModelConfig::desk(variant, corpus.inventory.len()), 0).unwrap();
    randomize_zero_params(&mut model.store, 1);
    let meta = CheckpointMeta {
        train: TrainConfig {
            model_variant: variant,
            ..TrainConfig::default()
        },
        normalization: corpus_normalization(corpus),
        inventory: corpus.inventory.clone(),
        speaker_labels: corpus.speakers.clone(),
        mel: MelConfig::default(),
        embedder: None,
    };
    Checkpoint::from_model(&model, &meta, 0, None).save(path).unwrap();
}

fn options() -> SynthesisOptions {
    SynthesisOptions {
        stub_embedder: true,
        max_frames: 30,
        griffin_lim_iters: 4,
        ..SynthesisOptions::default()
    }
}

struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
    corpus: Corpus,
}

fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    let (_, corpus) = synthetic_corpus(&root.join("corpus"));
    let script = root.join("script.jsonl");
    write_conversations(&script, &corpus.conversations[1..2]).unwrap();
    Fixture { _dir: dir, root, corpus }
}

#[test]
fn empty_script_is_rejected() {
    let f = fixture();
    let empty = f.root.join("empty.jsonl");
    fs::write(&empty, "").unwrap();
    match read_script(&empty) {
        Err(Error::Input(msg)) => assert_eq!(msg, "empty script"),
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn variant_mismatch_is_rejected() {
    let f = fixture();
    let ck = f.root.join("m1.ckpt");
    save_checkpoint(&f.corpus, ModelVariant::M1, &ck);
    let opts = SynthesisOptions {
        variant: Some(ModelVariant::M3),
        ..options()
    };
    let err = run_conversation(&f.root.join("script.jsonl"), &ck, &f.root.join("out"), &opts).unwrap_err();
    assert!(matches!(err, Error::Checkpoint(_)), "{err}");
}

#[test]
fn every_agent_turn_gets_its_artifacts() {
    let f = fixture();
    let ck = f.root.join("m3.ckpt");
    save_checkpoint(&f.corpus, ModelVariant::M3, &ck);
    let out = f.root.join("out");
    let results = run_conversation(&f.root.join("script.jsonl"), &ck, &out, &options()).unwrap();
    assert_eq!(results.iter().map(|r| r.turn).collect::<Vec<_>>(), vec![0, 2, 4]);
    for r in &results {
        let mel = MelSpectrogram::load(&r.mel).unwrap();
        assert_eq!(mel.frames.dim(), (r.n_frames, 80));
        let (samples, rate) = convtts::corpus::read_wav(r.wav.as_ref().unwrap()).unwrap();
        assert_eq!(rate, 16_000);
        assert_eq!(samples.len(), (r.n_frames - 1) * 200);
        assert_eq!(r.stopped, r.warning.is_none());
    }
    let listed: Vec<TurnResult> = serde_json::from_slice(&fs::read(out.join("results.json")).unwrap()).unwrap();
    assert_eq!(listed, results);
}

#[test]
fn fixed_seed_reproduces_every_file() {
    let f = fixture();
    let ck = f.root.join("m2.ckpt");
    save_checkpoint(&f.corpus, ModelVariant::M2, &ck);
    let a = run_conversation(&f.root.join("script.jsonl"), &ck, &f.root.join("a"), &options()).unwrap();
    let b = run_conversation(&f.root.join("script.jsonl"), &ck, &f.root.join("b"), &options()).unwrap();
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(fs::read(&x.mel).unwrap(), fs::read(&y.mel).unwrap());
        assert_eq!(fs::read(&x.alignment).unwrap(), fs::read(&y.alignment).unwrap());
        assert_eq!(fs::read(x.wav.as_ref().unwrap()).unwrap(), fs::read(y.wav.as_ref().unwrap()).unwrap());
    }
}

#[test]
fn only_context_models_hear_the_history() {
    let f = fixture();
    let examples = |v| synthetic_examples(&f.corpus, v);
    let inv = f.corpus.inventory.len();
    for (variant, listens) in [(ModelVariant::M1, false), (ModelVariant::M2, false), (ModelVariant::M3, true)] {
        let mut model = Model::new(ModelConfig::desk(variant, inv), 0).unwrap();
        randomize_zero_params(&mut model.store, 2);
        let ex = &examples(variant)[2];
        let mut alone = ex.inputs.clone();
        if let Some(last) = alone.history.last().cloned() {
            alone.history = vec![last];
        }
        let full = model.synthesize(&ex.inputs, 20, &RngStreams::new(0)).unwrap();
        let cut = model.synthesize(&alone, 20, &RngStreams::new(0)).unwrap();
        assert_eq!(full.mel != cut.mel, listens, "{variant}");
    }
}

/// Spectral convergence of `wav` against the mel-domain magnitudes of `log_mel`.
fn mel_error(ex: &MelExtractor, log_mel: &ndarray::Array2<f64>, wav: &[f64]) -> f64 {
    let floor = ex.config.log_floor;
    let target = log_mel.mapv(|v| (v.exp() - floor).max(0.0));
    let got = ex.mel_magnitudes(wav);
    let n = target.nrows().min(got.nrows());
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..n {
        for j in 0..target.ncols() {
            num += (got[[i, j]] - target[[i, j]]).powi(2);
            den += target[[i, j]].powi(2);
        }
    }
    (num / den).sqrt()
}

#[test]
fn phase_iterations_do_not_hurt() {
    let f = fixture();
    let cfg = MelConfig::default();
    let ex = MelExtractor::new(cfg.clone()).unwrap();
    let examples = synthetic_examples(&f.corpus, ModelVariant::M1);
    let mel = &examples[1].mel;
    for seed in 0..5 {
        let rough = mel_error(&ex, mel, &griffin_lim(mel, 0, &cfg, seed).unwrap());
        let refined = mel_error(&ex, mel, &griffin_lim(mel, 60, &cfg, seed).unwrap());
        assert!(refined <= rough, "seed {seed}: {refined} > {rough}");
    }
}

#[test]
fn fillers_lengthen_the_utterance() {
    let f = fixture();
    let examples = synthetic_examples(&f.corpus, ModelVariant::M1);
    let model = Model::new(ModelConfig::desk(ModelVariant::M1, f.corpus.inventory.len()), 0).unwrap();
    let cfg = TrainConfig {
        batch_size: 8,
        lr_start: 2e-3,
        lr_end: 2e-5,
        steps: 500,
        ..TrainConfig::default()
    };
    let mut trainer = Trainer::new(model, cfg).unwrap();
    while trainer.step < 500 {
        trainer.train_step(&examples).unwrap();
    }
    let norm = corpus_normalization(&f.corpus);
    let stub = StubEmbedder::default();
    let builder = InputBuilder {
        variant: ModelVariant::M1,
        inventory: &f.corpus.inventory,
        speakers: &f.corpus.speakers,
        normalization: &norm,
        provider: Some(&stub),
        overflow: Overflow::Clamp,
    };
    let frames = |text: &str| {
        let turn = Turn {
            index: 0,
            speaker: "agent".into(),
            utterance: phonemize(text).unwrap(),
            audio_path: None,
        };
        let inputs = builder.turn_inputs("demo", &turn, Vec::new()).unwrap();
        let out = trainer.model.synthesize(&inputs, 300, &RngStreams::new(1)).unwrap();
        println!("{text:?}: {} frames, stopped {}", out.mel.nrows(), out.stopped);
        out.mel.nrows()
    };
    for (with, without) in [("um, we block it.", "we block it."), ("let me, let me see.", "let me see.")] {
        assert!(frames(with) > frames(without), "{with:?} vs {without:?}");
    }
}
