//! Soft stepwise monotonic attention.
//!
//! At each decoder step the attention mass at position `j` either stays
//! (probability `p_j = sigmoid(energy_j)`) or advances to `j + 1`. The soft
//! recurrence propagates the expectation:
//!
//! `out_j = prev_j · p_j + prev_{j-1} · (1 - p_{j-1})`
//!
//! The final position always keeps its mass (`p_{T-1} = 1`), so a
//! distribution on the simplex stays on the simplex.

use ndarray::Array2;
use rand::Rng;

use crate::autograd::{logistic, Graph, Var};
use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::params::{ParamId, ParamStore};

/// Selection ("stay") probabilities with the last position pinned to 1.
pub fn stay_probabilities(energies: &[f64]) -> Vec<f64> {
    let n = energies.len();
    energies
        .iter()
        .enumerate()
        .map(|(j, &e)| if j + 1 == n { 1.0 } else { logistic(e) })
        .collect()
}

pub fn sma_step(prev: &[f64], energies: &[f64]) -> Result<Vec<f64>> {
    if prev.len() != energies.len() {
        return Err(Error::Shape(format!(
            "alignment has {} positions but {} energies were given",
            prev.len(),
            energies.len()
        )));
    }
    let p = stay_probabilities(energies);
    let mut out = vec![0.0; prev.len()];
    let mut carried = 0.0;
    for j in 0..prev.len() {
        let stay = prev[j] * p[j];
        out[j] = stay + carried;
        carried = prev[j] - stay;
    }
    Ok(out)
}

/// Graph version of [`sma_step`] on `1 × T` rows.
pub fn sma_step_graph(g: &mut Graph, prev: Var, energies: Var) -> Var {
    let (_, t) = g.shape(energies);
    let p = g.sigmoid(energies);
    let mut keep = Array2::ones((1, t));
    keep[[0, t - 1]] = 0.0;
    let mut pin = Array2::zeros((1, t));
    pin[[0, t - 1]] = 1.0;
    let p = g.mul_const(p, keep);
    let p = g.offset(p, &pin);
    let stay = g.mul(prev, p);
    let moved = g.sub(prev, stay);
    let shifted = g.shift_right(moved);
    g.add(stay, shifted)
}

/// One-hot alignment on the first memory row.
pub fn initial_alignment(t: usize) -> Vec<f64> {
    let mut a = vec![0.0; t];
    if t > 0 {
        a[0] = 1.0;
    }
    a
}

/// Additive energy function `v · tanh(W_q q + W_k m_j + b) + r`.
#[derive(Clone, Debug)]
pub struct EnergyScorer {
    pub query: Linear,
    pub key: Linear,
    pub score: Linear,
    pub bias: ParamId,
}

impl EnergyScorer {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        query_dim: usize,
        memory_dim: usize,
        hidden: usize,
        bias_init: f64,
        rng: &mut R,
    ) -> Self {
        Self {
            query: Linear::new(store, &format!("{name}.query"), query_dim, hidden, false, rng),
            key: Linear::new(store, &format!("{name}.key"), memory_dim, hidden, true, rng),
            score: Linear::new(store, &format!("{name}.score"), hidden, 1, false, rng),
            bias: store.add(format!("{name}.energy_bias"), Array2::from_elem((1, 1), bias_init)),
        }
    }

    /// Memory projection, computed once per utterance.
    pub fn keys(&self, g: &mut Graph, store: &ParamStore, memory: Var) -> Var {
        self.key.forward(g, store, memory)
    }

    /// Query projection for a batch of query rows.
    pub fn project_query(&self, g: &mut Graph, store: &ParamStore, query: Var) -> Var {
        self.query.forward(g, store, query)
    }

    /// `1 × T` energies for one query row.
    pub fn energies(&self, g: &mut Graph, store: &ParamStore, keys: Var, query: Var) -> Var {
        let q = self.project_query(g, store, query);
        self.energies_projected(g, store, keys, q)
    }

    /// `1 × T` energies from an already projected `1 × hidden` query.
    pub fn energies_projected(&self, g: &mut Graph, store: &ParamStore, keys: Var, q: Var) -> Var {
        let hidden = g.add_row(keys, q);
        let hidden = g.tanh(hidden);
        let e = self.score.forward(g, store, hidden);
        let r = g.param(store, self.bias);
        let e = g.add_row(e, r);
        g.transpose(e)
    }
}
