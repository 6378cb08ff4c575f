use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::Array2;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::checkpoint::CheckpointMeta;
use super::{graph_loss, lr_at, Adam, Checkpoint, LossBreakdown, TrainConfig};
use crate::autograd::Graph;
use crate::corpus::{load_corpus, read_wav, split_corpus, Corpus, MelConfig, MelExtractor};
use crate::error::{Error, Result};
use crate::features::{EmbeddingDir, EmbeddingProvider, NormalizationConfig, Overflow, StubEmbedder, EMBEDDING_DIM};
use crate::inputs::InputBuilder;
use crate::model::{Model, ModelConfig, UtteranceInputs};
use crate::nn::{apply_batch_stats, Mode, RngStreams, Stream};

/// One agent turn with its acoustic target.
#[derive(Clone, Debug)]
pub struct TrainingExample {
    /// `<conversation>#<turn>`.
    pub id: String,
    pub inputs: UtteranceInputs,
    pub mel: Array2<f64>,
}

/// Agent turns of the listed conversations, in corpus order.
pub fn prepare_examples(
    corpus: &Corpus,
    ids: &[String],
    builder: &InputBuilder<'_>,
    mel: &MelConfig,
) -> Result<Vec<TrainingExample>> {
    builder.check()?;
    let extractor = MelExtractor::new(mel.clone())?;
    let mut out = Vec::new();
    for conv in corpus.conversations.iter().filter(|c| ids.contains(&c.id)) {
        let inputs = builder.conversation_inputs(conv)?;
        for (turn, inputs) in conv.turns.iter().zip(inputs) {
            if !corpus.speakers.is_agent(&turn.speaker) {
                continue;
            }
            let Some(audio) = &turn.audio_path else { continue };
            let (samples, rate) = read_wav(audio)?;
            let mel = extractor.extract(&samples, rate)?;
            out.push(TrainingExample {
                id: format!("{}#{}", conv.id, turn.index),
                inputs,
                mel: mel.frames,
            });
        }
    }
    Ok(out)
}

/// Example indices for 1-based `step`. Each epoch is a seeded permutation
/// cut into `n / min(batch_size, n)` batches.
pub fn batch_indices(n: usize, batch_size: usize, seed: u64, step: u64) -> Vec<usize> {
    if n == 0 {
        return Vec::new();
    }
    let b = batch_size.min(n);
    let per_epoch = (n / b) as u64;
    let k = step.saturating_sub(1);
    let (epoch, slot) = (k / per_epoch, (k % per_epoch) as usize);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut RngStreams::new(seed).for_step(epoch).get(Stream::Data));
    order[slot * b..(slot + 1) * b].to_vec()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub step: u64,
    pub lr: f64,
    pub loss: LossBreakdown,
    pub grad_norm: f64,
}

/// One line of the training log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: u64,
    pub lr: f64,
    pub mel_before: f64,
    pub mel_after: f64,
    pub stop: f64,
    pub total: f64,
    pub wall_ms: u64,
}

pub struct Trainer {
    pub model: Model,
    pub config: TrainConfig,
    pub adam: Adam,
    /// Last completed step.
    pub step: u64,
}

impl Trainer {
    pub fn new(model: Model, config: TrainConfig) -> Result<Self> {
        config.check()?;
        if model.variant() != config.model_variant {
            return Err(Error::Config(format!(
                "model is {} but the training config asks for {}",
                model.variant(),
                config.model_variant
            )));
        }
        let adam = Adam::new(config.adam_beta1, config.adam_beta2, config.adam_eps, config.grad_clip);
        Ok(Self {
            model,
            config,
            adam,
            step: 0,
        })
    }

    /// Resumes a checkpoint of the configured variant (step counter and
    /// optimizer state continue), or finetunes a checkpoint of another
    /// variant from step 0 with its weights as initialization.
    pub fn from_checkpoint(ck: &Checkpoint, config: TrainConfig) -> Result<Self> {
        let variant = config.model_variant;
        let model = ck.build_model(Some(variant))?;
        let mut t = Self::new(model, config)?;
        if ck.variant() == variant {
            t.step = ck.manifest.step;
            if let Some(adam) = ck.adam(&t.model) {
                t.adam = adam;
            }
        }
        Ok(t)
    }

    /// Loss of a batch without updating anything.
    pub fn loss(&self, batch: &[&TrainingExample], mode: Mode, streams: &RngStreams) -> Result<LossBreakdown> {
        let mut g = Graph::new();
        let items: Vec<&UtteranceInputs> = batch.iter().map(|e| &e.inputs).collect();
        let targets: Vec<&Array2<f64>> = batch.iter().map(|e| &e.mel).collect();
        let out = self.model.teacher_forced_forward(&mut g, &items, &targets, mode, streams)?;
        Ok(graph_loss(&mut g, &out, &targets)?.breakdown(&g))
    }

    /// Random streams of 1-based `step`.
    pub fn streams(&self, step: u64) -> RngStreams {
        RngStreams::new(self.config.seed).for_step(step)
    }

    pub fn next_batch<'a>(&self, examples: &'a [TrainingExample]) -> Vec<&'a TrainingExample> {
        batch_indices(examples.len(), self.config.batch_size, self.config.seed, self.step + 1)
            .into_iter()
            .map(|i| &examples[i])
            .collect()
    }

    pub fn train_step(&mut self, examples: &[TrainingExample]) -> Result<StepReport> {
        if examples.is_empty() {
            return Err(Error::Input("no training examples".into()));
        }
        let step = self.step + 1;
        let batch = self.next_batch(examples);
        let streams = self.streams(step);
        let mut g = Graph::new();
        let items: Vec<&UtteranceInputs> = batch.iter().map(|e| &e.inputs).collect();
        let targets: Vec<&Array2<f64>> = batch.iter().map(|e| &e.mel).collect();
        let out = self
            .model
            .teacher_forced_forward(&mut g, &items, &targets, Mode::Train, &streams)?;
        let loss = graph_loss(&mut g, &out, &targets)?;
        let breakdown = loss.breakdown(&g);
        if !breakdown.is_finite() {
            return Err(Error::NonFiniteLoss { step });
        }
        let grads = g.backward(loss.total);
        apply_batch_stats(&mut self.model.store, g.batch_stats());
        let lr = lr_at(step - 1, &self.config);
        let grad_norm = self.adam.step(&mut self.model.store, &grads, lr);
        if !grad_norm.is_finite() {
            return Err(Error::NonFiniteLoss { step });
        }
        self.step = step;
        Ok(StepReport {
            step,
            lr,
            loss: breakdown,
            grad_norm,
        })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelPreset {
    #[default]
    Desk,
    Full,
}

/// Contents of the file passed to `train --config`. Relative paths are
/// resolved against the file's directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainRunConfig {
    pub manifest: PathBuf,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub preset: ModelPreset,
    /// Full model configuration; overrides `preset`.
    #[serde(default)]
    pub model: Option<ModelConfig>,
    #[serde(default)]
    pub stub_embedder: Option<StubEmbedder>,
    #[serde(default)]
    pub embeddings_dir: Option<PathBuf>,
    #[serde(default)]
    pub val_fraction: f64,
    #[serde(default)]
    pub mel: MelConfig,
}

impl TrainRunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let mut cfg: Self = crate::tensor_io::read_json(path)?;
        let base = path.parent().unwrap_or(Path::new(""));
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut cfg.manifest);
        fix(&mut cfg.output_dir);
        if let Some(d) = &mut cfg.embeddings_dir {
            fix(d);
        }
        Ok(cfg)
    }
}

/// Outcome of [`run_training`].
#[derive(Clone, Debug)]
pub struct RunSummary {
    pub checkpoint: PathBuf,
    pub first_step: u64,
    pub reports: Vec<StepReport>,
}

fn provider_for(cfg: &TrainRunConfig) -> Option<Box<dyn EmbeddingProvider>> {
    if let Some(stub) = cfg.stub_embedder {
        Some(Box::new(stub))
    } else {
        cfg.embeddings_dir.as_ref().map(|root| {
            Box::new(EmbeddingDir {
                root: root.clone(),
                dim: EMBEDDING_DIM,
            }) as Box<dyn EmbeddingProvider>
        })
    }
}

/// Full training run: load and split the corpus, build inputs, train up to
/// `train.steps`, log every step and write checkpoints into `output_dir`.
pub fn run_training(cfg: &TrainRunConfig, init: Option<&Path>) -> Result<RunSummary> {
    let tc = cfg.train.clone();
    tc.check()?;
    let corpus = load_corpus(&cfg.manifest)?;
    let (train_ids, _val_ids) = split_corpus(&corpus.ids(), cfg.val_fraction, tc.seed)?;
    let init_ck = init.map(Checkpoint::load).transpose()?;

    let resumes = init_ck.as_ref().is_some_and(|ck| ck.variant() == tc.model_variant);
    let normalization = match (&init_ck, corpus.normalization) {
        (Some(ck), _) if resumes => ck.manifest.normalization,
        (_, Some(n)) => n,
        _ => NormalizationConfig::from_utterances(
            corpus
                .conversations
                .iter()
                .filter(|c| train_ids.contains(&c.id))
                .flat_map(|c| c.turns.iter().map(|t| &t.utterance)),
        ),
    };
    normalization.check()?;
    if let Some(ck) = &init_ck {
        if ck.manifest.inventory != corpus.inventory {
            return Err(Error::Checkpoint("checkpoint inventory differs from the corpus inventory".into()));
        }
    }

    let provider = provider_for(cfg);
    let builder = InputBuilder {
        variant: tc.model_variant,
        inventory: &corpus.inventory,
        speakers: &corpus.speakers,
        normalization: &normalization,
        provider: provider.as_deref(),
        overflow: Overflow::Error,
    };
    let examples = prepare_examples(&corpus, &train_ids, &builder, &cfg.mel)?;
    if examples.is_empty() {
        return Err(Error::Input("corpus has no agent turns with audio".into()));
    }

    let mut trainer = match &init_ck {
        Some(ck) => Trainer::from_checkpoint(ck, tc.clone())?,
        None => {
            let model_cfg = match &cfg.model {
                Some(m) => m.with_variant(tc.model_variant),
                None => match cfg.preset {
                    ModelPreset::Desk => ModelConfig::desk(tc.model_variant, corpus.inventory.len()),
                    ModelPreset::Full => ModelConfig::full(tc.model_variant, corpus.inventory.len()),
                },
            };
            if model_cfg.encoder.inventory_size != corpus.inventory.len() {
                return Err(Error::Config(format!(
                    "model inventory size {} vs corpus inventory of {}",
                    model_cfg.encoder.inventory_size,
                    corpus.inventory.len()
                )));
            }
            Trainer::new(Model::new(model_cfg, tc.seed)?, tc.clone())?
        }
    };
    let meta = CheckpointMeta {
        train: tc.clone(),
        normalization,
        inventory: corpus.inventory.clone(),
        speaker_labels: corpus.speakers.clone(),
        mel: cfg.mel.clone(),
        embedder: cfg.stub_embedder,
    };

    fs::create_dir_all(&cfg.output_dir).map_err(|e| Error::io(&cfg.output_dir, e))?;
    let log_path = cfg.output_dir.join("train_log.jsonl");
    let mut log = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)
        .map_err(|e| Error::io(&log_path, e))?;
    let latest = cfg.output_dir.join("latest.ckpt");
    let first_step = trainer.step + 1;
    let started = Instant::now();
    let mut reports = Vec::new();
    while trainer.step < tc.steps {
        let report = trainer.train_step(&examples)?;
        let record = LogRecord {
            step: report.step,
            lr: report.lr,
            mel_before: report.loss.mel_before,
            mel_after: report.loss.mel_after,
            stop: report.loss.stop,
            total: report.loss.total,
            wall_ms: started.elapsed().as_millis() as u64,
        };
        let line = serde_json::to_string(&record).map_err(|e| Error::Format(e.to_string()))?;
        writeln!(log, "{line}").map_err(|e| Error::io(&log_path, e))?;
        reports.push(report);
        if tc.checkpoint_every > 0 && trainer.step % tc.checkpoint_every == 0 && trainer.step < tc.steps {
            let ck = Checkpoint::from_model(&trainer.model, &meta, trainer.step, Some(&trainer.adam));
            ck.save(&cfg.output_dir.join(format!("step-{}.ckpt", trainer.step)))?;
            ck.save(&latest)?;
        }
    }
    Checkpoint::from_model(&trainer.model, &meta, trainer.step, Some(&trainer.adam)).save(&latest)?;
    Ok(RunSummary {
        checkpoint: latest,
        first_step,
        reports,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batches_cover_each_epoch_once() {
        for step in [1u64, 5, 9] {
            let mut seen: Vec<usize> = (0..4).flat_map(|k| batch_indices(12, 3, 7, step + k)).collect();
            seen.sort();
            assert_eq!(seen, (0..12).collect::<Vec<_>>());
        }
        assert_eq!(batch_indices(8, 32, 1, 3).len(), 8);
        assert_eq!(batch_indices(10, 4, 2, 6), batch_indices(10, 4, 2, 6));
    }
}
