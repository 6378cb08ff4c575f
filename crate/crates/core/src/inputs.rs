//! Turns conversations into model inputs: phoneme ids, character features
//! and chat histories.

use crate::corpus::{Conversation, Inventory, SpeakerLabels, Turn};
use crate::error::{Error, Result};
use crate::features::{
    char_feature_matrix, stat_features_from_spans, EmbeddingProvider, NormalizationConfig, Overflow, TurnRef,
    UtteranceEmbedding,
};
use crate::model::{ModelVariant, UtteranceInputs};

pub struct InputBuilder<'a> {
    pub variant: ModelVariant,
    pub inventory: &'a Inventory,
    pub speakers: &'a SpeakerLabels,
    pub normalization: &'a NormalizationConfig,
    pub provider: Option<&'a dyn EmbeddingProvider>,
    pub overflow: Overflow,
}

impl<'a> InputBuilder<'a> {
    fn provider(&self) -> Result<&'a dyn EmbeddingProvider> {
        self.provider
            .ok_or_else(|| Error::Config(format!("variant {} needs an embedding provider", self.variant)))
    }

    /// Checks that the builder can serve its variant.
    pub fn check(&self) -> Result<()> {
        if self.variant.has_auxiliary() {
            self.provider()?;
        }
        Ok(())
    }

    pub fn history_entry(&self, conversation: &str, turn: &Turn) -> Result<UtteranceEmbedding> {
        let speaker = self.speakers.scalar(&turn.speaker).ok_or_else(|| {
            Error::Input(format!(
                "{conversation}#{}: unknown speaker {:?}",
                turn.index, turn.speaker
            ))
        })?;
        let vector = self.provider()?.utterance_embedding(TurnRef {
            conversation,
            index: turn.index,
            utterance: &turn.utterance,
        })?;
        UtteranceEmbedding::new(vector, speaker)
    }

    /// Inputs for one turn, given the history that ends with it.
    pub fn turn_inputs(
        &self,
        conversation: &str,
        turn: &Turn,
        history: Vec<UtteranceEmbedding>,
    ) -> Result<UtteranceInputs> {
        let u = &turn.utterance;
        let phonemes = self.inventory.encode(&u.phonemes)?;
        let char_features = if self.variant.has_auxiliary() {
            let emb = self.provider()?.char_embeddings(TurnRef {
                conversation,
                index: turn.index,
                utterance: u,
            })?;
            let stats = stat_features_from_spans(&u.sentence_spans, self.normalization, self.overflow)?;
            Some(char_feature_matrix(&emb, &stats)?)
        } else {
            None
        };
        Ok(UtteranceInputs {
            phonemes,
            char_features,
            char_alignment: u.char_alignment.clone(),
            history,
        })
    }

    /// Inputs for every turn of a conversation. Turn `t` sees the history of
    /// turns `0..=t` of both speakers.
    pub fn conversation_inputs(&self, conv: &Conversation) -> Result<Vec<UtteranceInputs>> {
        let mut history = Vec::with_capacity(conv.turns.len());
        let mut out = Vec::with_capacity(conv.turns.len());
        for turn in &conv.turns {
            if self.variant.has_context() {
                history.push(self.history_entry(&conv.id, turn)?);
            }
            out.push(self.turn_inputs(&conv.id, turn, history.clone())?);
        }
        Ok(out)
    }
}
