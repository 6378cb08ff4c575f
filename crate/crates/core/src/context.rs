//! Conversation context encoder.
//!
//! Each chat-history entry (utterance embedding plus speaker scalar) passes
//! through a shared LeakyReLU projection. The projected past, limited to the
//! newest `capacity` entries, is summarized by a GRU into a state vector; that
//! state is concatenated with the projected current utterance and mapped to
//! the memory dimension. The result is added to every encoder time step.

use ndarray::{s, Array1, Array2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::features::{UtteranceEmbedding, EMBEDDING_DIM};
use crate::nn::{GruCell, Linear};
use crate::params::ParamStore;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContextEncoderConfig {
    /// Embedding dim + 1 speaker scalar.
    pub in_dim: usize,
    pub proj_dim: usize,
    pub leaky_slope: f64,
    pub gru_units: usize,
    pub out_dim: usize,
    pub capacity: usize,
}

impl ContextEncoderConfig {
    pub fn full(memory_dim: usize) -> Self {
        Self {
            in_dim: EMBEDDING_DIM + 1,
            proj_dim: 64,
            leaky_slope: 0.01,
            gru_units: 64,
            out_dim: memory_dim,
            capacity: 10,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ContextEncoder {
    pub config: ContextEncoderConfig,
    pub input_proj: Linear,
    pub gru: GruCell,
    pub out_proj: Linear,
}

impl ContextEncoder {
    pub fn new<R: Rng>(store: &mut ParamStore, config: ContextEncoderConfig, rng: &mut R) -> Self {
        let input_proj = Linear::new(store, "context.input_proj", config.in_dim, config.proj_dim, true, rng);
        let gru = GruCell::new(store, "context.gru", config.proj_dim, config.gru_units, rng);
        let out_proj = Linear::zeros(store, "context.out_proj", config.gru_units + config.proj_dim, config.out_dim);
        Self {
            config,
            input_proj,
            gru,
            out_proj,
        }
    }

    /// The entries that can influence the output: the newest `capacity`
    /// past utterances followed by the current one.
    pub fn window<'a>(&self, history: &'a [UtteranceEmbedding]) -> &'a [UtteranceEmbedding] {
        let past = history.len().saturating_sub(1);
        let start = past.saturating_sub(self.config.capacity);
        &history[start..]
    }

    fn input_matrix(&self, entries: &[UtteranceEmbedding]) -> Result<Array2<f64>> {
        let d = self.config.in_dim - 1;
        let mut m = Array2::zeros((entries.len(), self.config.in_dim));
        for (i, e) in entries.iter().enumerate() {
            if e.vector.len() != d {
                return Err(Error::Input(format!(
                    "history entry {i} has embedding dim {}, expected {d}",
                    e.vector.len()
                )));
            }
            m.slice_mut(s![i, ..d]).assign(&e.vector);
            m[[i, d]] = e.speaker;
        }
        Ok(m)
    }

    /// `1 × out_dim` conditioning vector for the last entry of `history`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, history: &[UtteranceEmbedding]) -> Result<Var> {
        if history.is_empty() {
            return Err(Error::Input("chat history must contain the current utterance".into()));
        }
        let window = self.window(history);
        let x = g.leaf(self.input_matrix(window)?);
        let proj = self.input_proj.forward(g, store, x);
        let proj = g.leaky_relu(proj, self.config.leaky_slope);
        let n_past = window.len() - 1;
        let h0 = g.zeros(1, self.config.gru_units);
        let state = if n_past == 0 {
            h0
        } else {
            let past = g.slice_rows(proj, 0, n_past);
            self.gru.last_state(g, store, past, h0)
        };
        let current = g.slice_rows(proj, n_past, n_past + 1);
        let joined = g.concat_cols(&[state, current]);
        Ok(self.out_proj.forward(g, store, joined))
    }
}

pub fn encode_context(ctx: &ContextEncoder, store: &ParamStore, history: &[UtteranceEmbedding]) -> Result<Array1<f64>> {
    let mut g = Graph::new();
    let v = ctx.forward(&mut g, store, history)?;
    Ok(g.value(v).row(0).to_owned())
}

/// Adds the context vector to every row of the memory.
pub fn broadcast_combine(memory: &Array2<f64>, ctx: &Array1<f64>) -> Result<Array2<f64>> {
    if memory.ncols() != ctx.len() {
        return Err(Error::Shape(format!(
            "memory width {} vs context dim {}",
            memory.ncols(),
            ctx.len()
        )));
    }
    Ok(memory + ctx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::stub_embedder;
    use crate::nn::{RngStreams, Stream};

    fn history(n: usize, seed: u64) -> Vec<UtteranceEmbedding> {
        let names: Vec<String> = (0..n).map(|i| format!("u{i}")).collect();
        let refs: Vec<&str> = names.iter().map(String::as_str).collect();
        let m = stub_embedder(&refs, EMBEDDING_DIM, seed);
        m.rows()
            .into_iter()
            .enumerate()
            .map(|(i, r)| UtteranceEmbedding::new(r.to_owned(), (i % 2) as f64).unwrap())
            .collect()
    }

    fn encoder(random_out: bool) -> (ContextEncoder, ParamStore) {
        let mut store = ParamStore::new();
        let mut rng = RngStreams::new(5).get(Stream::Init);
        let ctx = ContextEncoder::new(&mut store, ContextEncoderConfig::full(32), &mut rng);
        if random_out {
            let w = ctx.out_proj.weight;
            *store.value_mut(w) = Array2::from_shape_fn(store.value(w).dim(), |(i, j)| ((i * 3 + j) % 7) as f64 * 0.05 - 0.15);
        }
        (ctx, store)
    }

    #[test]
    fn all_zero_weights_give_zero_vector() {
        let (ctx, mut store) = encoder(false);
        for id in store.ids().collect::<Vec<_>>() {
            store.value_mut(id).fill(0.0);
        }
        let v = encode_context(&ctx, &store, &history(4, 1)).unwrap();
        assert!(v.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn capacity_truncation_matches_deleting_old_entries() {
        let (ctx, store) = encoder(true);
        let h = history(13, 2); // 12 past + current
        let full = encode_context(&ctx, &store, &h).unwrap();
        let trimmed = encode_context(&ctx, &store, &h[2..]).unwrap();
        assert_eq!(full, trimmed);
    }

    #[test]
    fn first_turn_uses_zero_state() {
        let (ctx, store) = encoder(true);
        let h = history(1, 3);
        let v = encode_context(&ctx, &store, &h).unwrap();
        // out_linear([0 ‖ proj(E_t)]) computed directly
        let mut x = h[0].vector.to_vec();
        x.push(h[0].speaker);
        let x = Array2::from_shape_vec((1, 769), x).unwrap();
        let p = x.dot(store.value(ctx.input_proj.weight)) + store.value(ctx.input_proj.bias.unwrap());
        let p = p.mapv(|v| if v > 0.0 { v } else { 0.01 * v });
        let mut joined = Array2::zeros((1, 128));
        joined.slice_mut(s![.., 64..]).assign(&p);
        let expect = joined.dot(store.value(ctx.out_proj.weight)) + store.value(ctx.out_proj.bias.unwrap());
        for (a, b) in v.iter().zip(expect.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn order_matters_for_the_past() {
        let (ctx, store) = encoder(true);
        let h = history(5, 4);
        let mut swapped = h.clone();
        swapped.swap(0, 2);
        assert_ne!(
            encode_context(&ctx, &store, &h).unwrap(),
            encode_context(&ctx, &store, &swapped).unwrap()
        );
    }

    #[test]
    fn bad_dims() {
        let (ctx, store) = encoder(false);
        let bad = vec![UtteranceEmbedding {
            vector: Array1::zeros(10),
            speaker: 0.0,
        }];
        assert!(matches!(encode_context(&ctx, &store, &bad), Err(Error::Input(_))));
        assert!(matches!(encode_context(&ctx, &store, &[]), Err(Error::Input(_))));
        let m = Array2::zeros((3, 4));
        assert!(matches!(broadcast_combine(&m, &Array1::zeros(5)), Err(Error::Shape(_))));
    }

    #[test]
    fn broadcast_adds_to_every_row() {
        let m = Array2::from_shape_fn((3, 2), |(i, j)| (i * 2 + j) as f64);
        let v = ndarray::arr1(&[10.0, 20.0]);
        let out = broadcast_combine(&m, &v).unwrap();
        for i in 0..3 {
            for j in 0..2 {
                assert_eq!(out[[i, j]], m[[i, j]] + v[j]);
            }
        }
    }
}
