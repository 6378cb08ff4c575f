//! Full model: base encoder, optional auxiliary and context encoders, decoder
//! and post-net, for the three variants M1 (base), M2 (+ auxiliary) and
//! M3 (+ auxiliary + conversation context).

use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::auxiliary::{AuxEncoderConfig, AuxiliaryEncoder};
use crate::context::{ContextEncoder, ContextEncoderConfig};
use crate::corpus::Span;
use crate::decoder::{synthesize_utterance, Decoder, DecoderConfig, Postnet, PostnetConfig, Synthesis};
use crate::encoder::{Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::features::UtteranceEmbedding;
use crate::nn::{Mode, Packed, RngStreams, Stream};
use crate::params::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ModelVariant {
    M1,
    M2,
    M3,
}

impl ModelVariant {
    pub fn has_auxiliary(self) -> bool {
        self != ModelVariant::M1
    }

    pub fn has_context(self) -> bool {
        self == ModelVariant::M3
    }

    pub fn all() -> [ModelVariant; 3] {
        [ModelVariant::M1, ModelVariant::M2, ModelVariant::M3]
    }
}

impl fmt::Display for ModelVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ModelVariant::M1 => "M1",
            ModelVariant::M2 => "M2",
            ModelVariant::M3 => "M3",
        };
        f.write_str(s)
    }
}

impl FromStr for ModelVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "M1" => Ok(ModelVariant::M1),
            "M2" => Ok(ModelVariant::M2),
            "M3" => Ok(ModelVariant::M3),
            other => Err(Error::Config(format!("unknown model variant {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub variant: ModelVariant,
    pub encoder: EncoderConfig,
    pub auxiliary: AuxEncoderConfig,
    pub context: ContextEncoderConfig,
    pub decoder: DecoderConfig,
    pub postnet: PostnetConfig,
}

impl ModelConfig {
    pub fn full(variant: ModelVariant, inventory_size: usize) -> Self {
        let encoder = EncoderConfig::full(inventory_size);
        let m = encoder.memory_dim();
        Self {
            variant,
            encoder,
            auxiliary: AuxEncoderConfig::full(m),
            context: ContextEncoderConfig::full(m),
            decoder: DecoderConfig::default(),
            postnet: PostnetConfig::default(),
        }
    }

    pub fn desk(variant: ModelVariant, inventory_size: usize) -> Self {
        let encoder = EncoderConfig::desk(inventory_size);
        let m = encoder.memory_dim();
        Self {
            variant,
            encoder,
            auxiliary: AuxEncoderConfig::desk(m),
            context: ContextEncoderConfig::full(m),
            decoder: DecoderConfig::desk(),
            postnet: PostnetConfig::desk(),
        }
    }

    /// The same dimensions under another variant.
    pub fn with_variant(&self, variant: ModelVariant) -> Self {
        Self {
            variant,
            ..self.clone()
        }
    }

    pub fn check(&self) -> Result<()> {
        let m = self.encoder.memory_dim();
        if self.auxiliary.out_dim != m || self.context.out_dim != m {
            return Err(Error::Config(format!(
                "auxiliary/context output dims ({}, {}) must equal memory dim {m}",
                self.auxiliary.out_dim, self.context.out_dim
            )));
        }
        if self.encoder.inventory_size == 0 {
            return Err(Error::Config("empty phoneme inventory".into()));
        }
        self.decoder.check()
    }
}

/// Model inputs for one utterance.
#[derive(Clone, Debug)]
pub struct UtteranceInputs {
    pub phonemes: Vec<usize>,
    /// `n_chars × (768 + 6)`; needed by M2 and M3.
    pub char_features: Option<Array2<f64>>,
    pub char_alignment: Vec<Span>,
    /// Chat history ending with the current utterance; needed by M3.
    pub history: Vec<UtteranceEmbedding>,
}

/// Teacher-forced outputs for a batch, one entry per item.
pub struct ForwardVars {
    pub before: Vec<Var>,
    pub after: Vec<Var>,
    pub stop: Vec<Var>,
    pub alignments: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub encoder: Encoder,
    pub auxiliary: Option<AuxiliaryEncoder>,
    pub context: Option<ContextEncoder>,
    pub decoder: Decoder,
    pub postnet: Postnet,
}

impl Model {
    /// Builds a freshly initialized model. Shared modules are initialized
    /// first, so all variants built from one seed agree on them.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.check()?;
        let mut store = ParamStore::new();
        let mut rng = RngStreams::new(seed).get(Stream::Init);
        let encoder = Encoder::new(&mut store, config.encoder.clone(), &mut rng);
        let m = config.encoder.memory_dim();
        let decoder = Decoder::new(&mut store, config.decoder.clone(), m, &mut rng)?;
        let postnet = Postnet::new(&mut store, config.postnet.clone(), config.decoder.mel_dim, &mut rng)?;
        let auxiliary = if config.variant.has_auxiliary() {
            Some(AuxiliaryEncoder::new(&mut store, config.auxiliary.clone(), &mut rng)?)
        } else {
            None
        };
        let context = if config.variant.has_context() {
            Some(ContextEncoder::new(&mut store, config.context.clone(), &mut rng))
        } else {
            None
        };
        Ok(Self {
            config,
            store,
            encoder,
            auxiliary,
            context,
            decoder,
            postnet,
        })
    }

    pub fn variant(&self) -> ModelVariant {
        self.config.variant
    }

    /// Combined encoder memory (`T × memory_dim`) for every item.
    pub fn memories(
        &self,
        g: &mut Graph,
        items: &[&UtteranceInputs],
        mode: Mode,
        streams: &RngStreams,
    ) -> Result<Vec<Var>> {
        let store = &self.store;
        let ids: Vec<&[usize]> = items.iter().map(|it| it.phonemes.as_slice()).collect();
        let mut rng = streams.get(Stream::Encoder);
        let mut mem = self.encoder.forward(g, store, &ids, mode, &mut rng)?;

        if let Some(aux) = &self.auxiliary {
            let mut aux_items = Vec::with_capacity(items.len());
            for it in items {
                let chars = it
                    .char_features
                    .as_ref()
                    .ok_or_else(|| Error::Input("auxiliary encoder needs character features".into()))?;
                if chars.ncols() != aux.config.in_dim {
                    return Err(Error::Config(format!(
                        "character features have {} columns, auxiliary encoder expects {}",
                        chars.ncols(),
                        aux.config.in_dim
                    )));
                }
                aux_items.push((chars, it.char_alignment.as_slice(), it.phonemes.len()));
            }
            let mut rng = streams.get(Stream::Auxiliary);
            let contrib = aux.forward(g, store, &aux_items, mode, &mut rng)?;
            for (m, a) in mem.iter_mut().zip(contrib) {
                *m = g.add(*m, a);
            }
        }

        if let Some(ctx) = &self.context {
            for (m, it) in mem.iter_mut().zip(items) {
                let v = ctx.forward(g, store, &it.history)?;
                *m = g.add_row(*m, v);
            }
        }
        Ok(mem)
    }

    /// Teacher-forced forward pass over a batch.
    pub fn teacher_forced_forward(
        &self,
        g: &mut Graph,
        items: &[&UtteranceInputs],
        targets: &[&Array2<f64>],
        mode: Mode,
        streams: &RngStreams,
    ) -> Result<ForwardVars> {
        let memories = self.memories(g, items, mode, streams)?;
        let mut rng = streams.get(Stream::Decoder);
        let out = self
            .decoder
            .teacher_forced(g, &self.store, &memories, targets, mode, &mut rng)?;
        let packed = Packed::pack(g, &out.mel);
        let mut rng = streams.get(Stream::Postnet);
        let residual = self.postnet.forward(g, &self.store, &packed, mode, &mut rng);
        let after = g.add(packed.var, residual.var);
        let after = packed.with_var(after).unpack(g);
        Ok(ForwardVars {
            before: out.mel,
            after,
            stop: out.stop,
            alignments: out.alignments,
        })
    }

    /// Eval-mode memory for a single utterance.
    pub fn memory(&self, inputs: &UtteranceInputs, streams: &RngStreams) -> Result<Array2<f64>> {
        let mut g = Graph::new();
        let m = self.memories(&mut g, &[inputs], Mode::Eval, streams)?;
        Ok(g.value(m[0]).clone())
    }

    /// Free-running synthesis of one utterance.
    pub fn synthesize(&self, inputs: &UtteranceInputs, max_frames: usize, streams: &RngStreams) -> Result<Synthesis> {
        let memory = self.memory(inputs, streams)?;
        let mut rng = streams.get(Stream::Decoder);
        synthesize_utterance(&self.decoder, &self.postnet, &self.store, &memory, max_frames, &mut rng)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variant_parsing() {
        assert_eq!("m2".parse::<ModelVariant>().unwrap(), ModelVariant::M2);
        assert!("M4".parse::<ModelVariant>().is_err());
        assert_eq!(ModelVariant::M3.to_string(), "M3");
    }

    #[test]
    fn shared_parameters_agree_across_variants() {
        let m1 = Model::new(ModelConfig::desk(ModelVariant::M1, 12), 9).unwrap();
        let m3 = Model::new(ModelConfig::desk(ModelVariant::M3, 12), 9).unwrap();
        for id in m1.store.ids() {
            let name = m1.store.name(id);
            let other = m3.store.get(name).unwrap();
            assert_eq!(m1.store.value(id), m3.store.value(other), "{name}");
        }
        assert!(m3.store.len() > m1.store.len());
    }

    #[test]
    fn memory_dims_checked() {
        let mut cfg = ModelConfig::desk(ModelVariant::M2, 12);
        cfg.auxiliary.out_dim = 7;
        assert!(matches!(Model::new(cfg, 0), Err(Error::Config(_))));
    }
}
