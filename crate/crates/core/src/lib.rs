//! Conversation context-aware end-to-end speech synthesis.
//!
//! A phoneme encoder produces the attention memory. Variant M2 adds an
//! auxiliary encoder over character embeddings and sentence statistics;
//! M3 also adds a conversation-context vector built from the chat history.
//! A stepwise monotonic attention decoder with zoneout LSTMs predicts mel
//! frames and a stop token, refined by a convolutional post-net. Waveforms
//! come from Griffin-Lim.
//!
//! All computation runs in `f64` on a small reverse-mode tape ([`autograd`]).

pub mod attention;
pub mod autograd;
pub mod auxiliary;
pub mod context;
pub mod corpus;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod features;
pub mod inputs;
pub mod model;
pub mod nn;
pub mod params;
pub mod synthesis;
pub mod tensor_io;
pub mod training;

pub use error::{Error, Result};
pub use model::{Model, ModelConfig, ModelVariant, UtteranceInputs};
