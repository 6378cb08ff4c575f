//! Conversation-driven synthesis and the Griffin-Lim vocoder.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::corpus::{
    read_conversations, validate_conversation, write_wav, Conversation, MelConfig, MelExtractor, MelSpectrogram,
    ValidationRules,
};
use crate::error::{Error, Result};
use crate::features::{EmbeddingDir, EmbeddingProvider, Overflow, StubEmbedder, EMBEDDING_DIM};
use crate::inputs::InputBuilder;
use crate::model::{Model, ModelVariant};
use crate::nn::RngStreams;
use crate::tensor_io::write_matrix;
use crate::training::Checkpoint;

/// Griffin-Lim reconstruction from a log-mel spectrogram.
#[derive(Clone)]
pub struct GriffinLim {
    extractor: MelExtractor,
    inverse_fb: Array2<f64>,
}

impl GriffinLim {
    pub fn new(config: &MelConfig) -> Result<Self> {
        let extractor = MelExtractor::new(config.clone())?;
        let fb = &extractor.filterbank;
        let m = DMatrix::from_fn(fb.nrows(), fb.ncols(), |i, j| fb[[i, j]]);
        let pinv = m
            .pseudo_inverse(1e-10)
            .map_err(|e| Error::Config(format!("mel filterbank pseudo-inverse failed: {e}")))?;
        let inverse_fb = Array2::from_shape_fn((pinv.nrows(), pinv.ncols()), |(i, j)| pinv[(i, j)]);
        Ok(Self { extractor, inverse_fb })
    }

    /// Linear magnitudes `n × n_bins` from a log-mel `n × n_mels`.
    pub fn magnitudes(&self, log_mel: &Array2<f64>) -> Result<Array2<f64>> {
        if log_mel.ncols() != self.extractor.config.n_mels {
            return Err(Error::Shape(format!(
                "mel has {} bins, vocoder expects {}",
                log_mel.ncols(),
                self.extractor.config.n_mels
            )));
        }
        let floor = self.extractor.config.log_floor;
        let mel = log_mel.mapv(|v| (v.exp() - floor).max(0.0));
        Ok(mel.dot(&self.inverse_fb.t()).mapv(|v| v.max(0.0)))
    }

    /// Waveform of `(n - 1) · hop` samples after `iterations` phase refinements.
    pub fn run(&self, log_mel: &Array2<f64>, iterations: usize, seed: u64) -> Result<Vec<f64>> {
        let mags = self.magnitudes(log_mel)?;
        let stft = &self.extractor.stft;
        let (n, bins) = mags.dim();
        if n < 2 {
            return Ok(Vec::new());
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut phases: Vec<Vec<Complex64>> = (0..n)
            .map(|_| {
                (0..bins)
                    .map(|_| Complex64::from_polar(1.0, rng.random_range(0.0..std::f64::consts::TAU)))
                    .collect()
            })
            .collect();
        let combine = |phases: &[Vec<Complex64>]| -> Vec<Vec<Complex64>> {
            phases
                .iter()
                .enumerate()
                .map(|(f, row)| row.iter().enumerate().map(|(k, p)| p * mags[[f, k]]).collect())
                .collect()
        };
        for _ in 0..iterations {
            let signal = stft.inverse(&combine(&phases));
            let spectra = stft.forward(&signal);
            for (row, spec) in phases.iter_mut().zip(spectra) {
                for (p, s) in row.iter_mut().zip(spec) {
                    let norm = s.norm();
                    *p = if norm > 1e-12 { s / norm } else { Complex64::new(1.0, 0.0) };
                }
            }
        }
        Ok(stft.inverse(&combine(&phases)))
    }
}

pub fn griffin_lim(mel: &Array2<f64>, iterations: usize, config: &MelConfig, seed: u64) -> Result<Vec<f64>> {
    GriffinLim::new(config)?.run(mel, iterations, seed)
}

#[derive(Clone, Debug)]
pub struct SynthesisOptions {
    /// Expected checkpoint variant.
    pub variant: Option<ModelVariant>,
    pub stub_embedder: bool,
    pub embeddings_dir: Option<PathBuf>,
    pub seed: u64,
    pub griffin_lim_iters: usize,
    pub max_frames: usize,
    pub write_wav: bool,
}

impl Default for SynthesisOptions {
    fn default() -> Self {
        Self {
            variant: None,
            stub_embedder: false,
            embeddings_dir: None,
            seed: 0,
            griffin_lim_iters: 60,
            max_frames: 2000,
            write_wav: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TurnResult {
    pub conversation: String,
    pub turn: usize,
    pub mel: PathBuf,
    pub alignment: PathBuf,
    pub wav: Option<PathBuf>,
    pub stopped: bool,
    pub n_frames: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warning: Option<String>,
}

/// Reads a script file, or every `*.jsonl` file of a script directory in
/// name order.
pub fn read_script(path: &Path) -> Result<Vec<Conversation>> {
    let files = if path.is_dir() {
        let mut files: Vec<PathBuf> = fs::read_dir(path)
            .map_err(|e| Error::io(path, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "jsonl"))
            .collect();
        files.sort();
        files
    } else {
        vec![path.to_path_buf()]
    };
    let mut convs = Vec::new();
    for f in files {
        convs.extend(read_conversations(&f)?);
    }
    if convs.is_empty() || convs.iter().all(|c| c.turns.is_empty()) {
        return Err(Error::Input("empty script".into()));
    }
    Ok(convs)
}

/// Synthesizes every agent turn of every conversation in the script.
///
/// Each turn (either speaker) joins the chat history once processed;
/// agent turns are decoded with a fresh copy of the seeded random streams,
/// so outputs depend only on the turn's inputs.
pub fn run_conversation(
    script_path: &Path,
    checkpoint_path: &Path,
    out_dir: &Path,
    opts: &SynthesisOptions,
) -> Result<Vec<TurnResult>> {
    let convs = read_script(script_path)?;
    let ck = Checkpoint::load(checkpoint_path)?;
    if let Some(v) = opts.variant {
        if v != ck.variant() {
            return Err(Error::Checkpoint(format!(
                "variant mismatch: requested {v}, checkpoint holds {}",
                ck.variant()
            )));
        }
    }
    let model = ck.build_model(None)?;
    let meta = ck.meta();

    let provider: Option<Box<dyn EmbeddingProvider>> = if opts.stub_embedder {
        Some(Box::new(meta.embedder.unwrap_or_else(StubEmbedder::default)))
    } else {
        opts.embeddings_dir.as_ref().map(|root| {
            Box::new(EmbeddingDir {
                root: root.clone(),
                dim: EMBEDDING_DIM,
            }) as Box<dyn EmbeddingProvider>
        })
    };
    let builder = InputBuilder {
        variant: model.variant(),
        inventory: &meta.inventory,
        speakers: &meta.speaker_labels,
        normalization: &meta.normalization,
        provider: provider.as_deref(),
        overflow: Overflow::Clamp,
    };
    builder.check()?;

    let rules = ValidationRules {
        inventory: &meta.inventory,
        speakers: &meta.speaker_labels,
        require_agent_audio: false,
    };
    let diagnostics: Vec<_> = convs.iter().flat_map(|c| validate_conversation(c, &rules)).collect();
    if !diagnostics.is_empty() {
        return Err(Error::Validation(diagnostics));
    }

    let vocoder = if opts.write_wav { Some(GriffinLim::new(&meta.mel)?) } else { None };
    let mut results = Vec::new();
    for conv in &convs {
        let dir = out_dir.join(&conv.id);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let inputs = builder.conversation_inputs(conv)?;
        for (turn, inputs) in conv.turns.iter().zip(&inputs) {
            if !meta.speaker_labels.is_agent(&turn.speaker) {
                continue;
            }
            results.push(synthesize_turn(&model, conv, turn.index, inputs, &dir, opts, &meta.mel, vocoder.as_ref())?);
        }
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    crate::tensor_io::write_json(&out_dir.join("results.json"), &results)?;
    Ok(results)
}

#[allow(clippy::too_many_arguments)]
fn synthesize_turn(
    model: &Model,
    conv: &Conversation,
    index: usize,
    inputs: &crate::model::UtteranceInputs,
    dir: &Path,
    opts: &SynthesisOptions,
    mel_cfg: &MelConfig,
    vocoder: Option<&GriffinLim>,
) -> Result<TurnResult> {
    let out = model.synthesize(inputs, opts.max_frames, &RngStreams::new(opts.seed))?;
    let mel_path = dir.join(format!("turn_{index:03}.mel.f32"));
    MelSpectrogram {
        frames: out.mel.clone(),
        hop_ms: mel_cfg.hop_ms,
        win_ms: mel_cfg.win_ms,
        sample_rate: mel_cfg.sample_rate,
    }
    .save(&mel_path)?;
    let align_path = dir.join(format!("turn_{index:03}.align.f32"));
    write_matrix(&align_path, &out.alignments)?;
    let wav = match vocoder {
        Some(v) => {
            let samples = v.run(&out.mel, opts.griffin_lim_iters, opts.seed)?;
            let path = dir.join(format!("turn_{index:03}.wav"));
            write_wav(&path, &samples, mel_cfg.sample_rate)?;
            Some(path)
        }
        None => None,
    };
    let warning = (!out.stopped).then(|| format!("stop token never fired within {} frames", opts.max_frames));
    if let Some(w) = &warning {
        log::warn!("{}#{index}: {w}", conv.id);
    }
    Ok(TurnResult {
        conversation: conv.id.clone(),
        turn: index,
        mel: mel_path,
        alignment: align_path,
        wav,
        stopped: out.stopped,
        n_frames: out.mel.nrows(),
        warning,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn silence_inverts_to_near_silence() {
        let cfg = MelConfig::default();
        let mel = Array2::from_elem((41, 80), cfg.floor_value());
        let wav = griffin_lim(&mel, 5, &cfg, 0).unwrap();
        assert_eq!(wav.len(), 8000);
        assert!(wav.iter().all(|v| v.abs() < 1e-3));
    }

    #[test]
    fn length_law() {
        let cfg = MelConfig::default();
        let mel = Array2::from_shape_fn((41, 80), |(i, j)| -3.0 - ((i + j) % 5) as f64);
        let wav = griffin_lim(&mel, 2, &cfg, 1).unwrap();
        assert!((7200..=8800).contains(&wav.len()));
    }

    #[test]
    fn wrong_mel_width() {
        let gl = GriffinLim::new(&MelConfig::default()).unwrap();
        assert!(matches!(gl.run(&Array2::zeros((4, 12)), 1, 0), Err(Error::Shape(_))));
    }
}
