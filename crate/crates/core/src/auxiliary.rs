//! Auxiliary text encoder: pre-net and CBHG over per-character
//! `[embedding ‖ statistics]` features, replicated to phoneme rate after
//! encoding and added to the encoder memory.

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::features::{phoneme_owners, EMBEDDING_DIM, STAT_DIM};
use crate::corpus::Span;
use crate::nn::{dropout, BatchNorm, Conv1d, GruCell, Linear, Mode, ModelRng, Packed};
use crate::params::ParamStore;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuxEncoderConfig {
    pub in_dim: usize,
    pub prenet_dims: Vec<usize>,
    pub prenet_dropout: f64,
    /// Conv bank holds kernels 1..=bank_k.
    pub bank_k: usize,
    pub bank_channels: usize,
    pub pool_width: usize,
    pub proj_kernel: usize,
    pub highway_layers: usize,
    pub gru_units: usize,
    pub out_dim: usize,
}

impl AuxEncoderConfig {
    pub fn full(memory_dim: usize) -> Self {
        Self {
            in_dim: EMBEDDING_DIM + STAT_DIM,
            prenet_dims: vec![256, 128],
            prenet_dropout: 0.5,
            bank_k: 8,
            bank_channels: 128,
            pool_width: 2,
            proj_kernel: 3,
            highway_layers: 4,
            gru_units: 128,
            out_dim: memory_dim,
        }
    }

    pub fn desk(memory_dim: usize) -> Self {
        Self {
            prenet_dims: vec![64, 32],
            bank_k: 4,
            bank_channels: 32,
            highway_layers: 2,
            gru_units: 32,
            ..Self::full(memory_dim)
        }
    }

    pub fn highway_dim(&self) -> usize {
        *self.prenet_dims.last().expect("prenet needs at least one layer")
    }
}

#[derive(Clone, Debug)]
struct Highway {
    transform: Linear,
    gate: Linear,
}

#[derive(Clone, Debug)]
pub struct AuxiliaryEncoder {
    pub config: AuxEncoderConfig,
    prenet: Vec<Linear>,
    bank: Vec<(Conv1d, BatchNorm)>,
    projections: Vec<(Conv1d, BatchNorm)>,
    highways: Vec<Highway>,
    gru_fwd: GruCell,
    gru_bwd: GruCell,
    pub out_proj: Linear,
}

impl AuxiliaryEncoder {
    pub fn new<R: Rng>(store: &mut ParamStore, config: AuxEncoderConfig, rng: &mut R) -> Result<Self> {
        if config.prenet_dims.is_empty() || config.bank_k == 0 || config.pool_width == 0 {
            return Err(Error::Config("auxiliary encoder needs a pre-net, a conv bank and a pool".into()));
        }
        let mut prenet = Vec::new();
        let mut d = config.in_dim;
        for (i, &h) in config.prenet_dims.iter().enumerate() {
            prenet.push(Linear::new(store, &format!("aux.prenet{i}"), d, h, true, rng));
            d = h;
        }
        let hw = config.highway_dim();
        let bank = (1..=config.bank_k)
            .map(|k| {
                (
                    Conv1d::new(store, &format!("aux.bank{k}"), hw, config.bank_channels, k, rng),
                    BatchNorm::new(store, &format!("aux.bank{k}.bn"), config.bank_channels),
                )
            })
            .collect();
        let proj_in = config.bank_k * config.bank_channels;
        let projections = vec![
            (
                Conv1d::new(store, "aux.proj0", proj_in, config.bank_channels, config.proj_kernel, rng),
                BatchNorm::new(store, "aux.proj0.bn", config.bank_channels),
            ),
            (
                Conv1d::new(store, "aux.proj1", config.bank_channels, hw, config.proj_kernel, rng),
                BatchNorm::new(store, "aux.proj1.bn", hw),
            ),
        ];
        let highways = (0..config.highway_layers)
            .map(|i| {
                let transform = Linear::new(store, &format!("aux.highway{i}.h"), hw, hw, true, rng);
                let gate = Linear::new(store, &format!("aux.highway{i}.t"), hw, hw, true, rng);
                // bias the gate toward carrying the input through
                store.value_mut(gate.bias.unwrap()).fill(-1.0);
                Highway { transform, gate }
            })
            .collect();
        let gru_fwd = GruCell::new(store, "aux.gru.fwd", hw, config.gru_units, rng);
        let gru_bwd = GruCell::new(store, "aux.gru.bwd", hw, config.gru_units, rng);
        let out_proj = Linear::zeros(store, "aux.out_proj", 2 * config.gru_units, config.out_dim);
        Ok(Self {
            config,
            prenet,
            bank,
            projections,
            highways,
            gru_fwd,
            gru_bwd,
            out_proj,
        })
    }

    /// Character-rate encoding, `n_chars × out_dim` per item.
    pub fn encode_chars(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        chars: &[&Array2<f64>],
        mode: Mode,
        rng: &mut ModelRng,
    ) -> Result<Vec<Var>> {
        for m in chars {
            if m.ncols() != self.config.in_dim {
                return Err(Error::Config(format!(
                    "auxiliary input has {} columns, configured for {}",
                    m.ncols(),
                    self.config.in_dim
                )));
            }
            if m.nrows() == 0 {
                return Err(Error::Input("auxiliary input has no characters".into()));
            }
        }
        let leaves: Vec<Var> = chars.iter().map(|m| g.leaf((*m).clone())).collect();
        let packed = Packed::pack(g, &leaves);

        let mut x = packed.var;
        for layer in &self.prenet {
            x = layer.forward(g, store, x);
            x = g.relu(x);
            if mode.is_train() {
                x = dropout(g, x, self.config.prenet_dropout, rng);
            }
        }
        let residual = x;
        let input = packed.with_var(x);

        let mut bank_out = Vec::with_capacity(self.bank.len());
        for (conv, bn) in &self.bank {
            let y = conv.forward(g, store, &input);
            let y = bn.forward(g, store, y.var, mode);
            bank_out.push(g.relu(y));
        }
        let stacked = g.concat_cols(&bank_out);
        let pooled: Vec<Var> = packed
            .with_var(stacked)
            .unpack(g)
            .into_iter()
            .map(|s| g.max_pool(s, self.config.pool_width))
            .collect();
        let mut y = Packed::pack(g, &pooled);

        for (i, (conv, bn)) in self.projections.iter().enumerate() {
            let z = conv.forward(g, store, &y);
            let mut z = bn.forward(g, store, z.var, mode);
            if i + 1 < self.projections.len() {
                z = g.relu(z);
            }
            y = y.with_var(z);
        }
        let mut h = g.add(y.var, residual);

        for hw in &self.highways {
            let t = hw.transform.forward(g, store, h);
            let t = g.relu(t);
            let gate = hw.gate.forward(g, store, h);
            let gate = g.sigmoid(gate);
            let delta = g.sub(t, h);
            let delta = g.mul(gate, delta);
            h = g.add(h, delta);
        }

        let encoded: Vec<Var> = packed
            .with_var(h)
            .unpack(g)
            .into_iter()
            .map(|s| {
                let f = self.gru_fwd.run(g, store, s, false);
                let b = self.gru_bwd.run(g, store, s, true);
                g.concat_cols(&[f, b])
            })
            .collect();
        let enc = Packed::pack(g, &encoded);
        let out = self.out_proj.forward(g, store, enc.var);
        Ok(enc.with_var(out).unpack(g))
    }

    /// Encodes at character rate, then replicates each character's row onto
    /// the phonemes it owns (unowned phonemes receive zeros).
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        items: &[(&Array2<f64>, &[Span], usize)],
        mode: Mode,
        rng: &mut ModelRng,
    ) -> Result<Vec<Var>> {
        let mut owners = Vec::with_capacity(items.len());
        for (chars, alignment, n_phonemes) in items {
            if alignment.len() != chars.nrows() {
                return Err(Error::Alignment(format!(
                    "{} alignment ranges for {} characters",
                    alignment.len(),
                    chars.nrows()
                )));
            }
            owners.push(phoneme_owners(alignment, *n_phonemes)?);
        }
        let chars: Vec<&Array2<f64>> = items.iter().map(|(c, _, _)| *c).collect();
        let encoded = self.encode_chars(g, store, &chars, mode, rng)?;
        Ok(encoded
            .into_iter()
            .zip(owners)
            .map(|(e, own)| g.gather(e, own))
            .collect())
    }
}

/// Stand-alone auxiliary contribution for one utterance, `T_phoneme × out_dim`.
pub fn encode_auxiliary(
    aux: &AuxiliaryEncoder,
    store: &ParamStore,
    char_matrix: &Array2<f64>,
    alignment: &[Span],
    n_phonemes: usize,
    mode: Mode,
    rng: &mut ModelRng,
) -> Result<Array2<f64>> {
    let mut g = Graph::new();
    let out = aux.forward(&mut g, store, &[(char_matrix, alignment, n_phonemes)], mode, rng)?;
    Ok(g.value(out[0]).clone())
}

/// Elementwise sum of the encoder memory and an auxiliary contribution.
pub fn combine_additive(memory: &Array2<f64>, aux: &Array2<f64>) -> Result<Array2<f64>> {
    if memory.dim() != aux.dim() {
        return Err(Error::Shape(format!(
            "memory {:?} vs auxiliary {:?}",
            memory.dim(),
            aux.dim()
        )));
    }
    Ok(memory + aux)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{RngStreams, Stream};

    fn setup() -> (AuxiliaryEncoder, ParamStore) {
        let mut store = ParamStore::new();
        let mut rng = RngStreams::new(9).get(Stream::Init);
        let aux = AuxiliaryEncoder::new(&mut store, AuxEncoderConfig::desk(128), &mut rng).unwrap();
        (aux, store)
    }

    fn chars(n: usize) -> Array2<f64> {
        Array2::from_shape_fn((n, EMBEDDING_DIM + STAT_DIM), |(i, j)| ((i * 31 + j * 7) % 13) as f64 / 13.0 - 0.5)
    }

    fn alignment() -> Vec<Span> {
        // 5 characters over 12 phonemes with two unowned boundary symbols
        vec![Span::new(0, 2), Span::new(2, 4), Span::new(5, 7), Span::new(7, 9), Span::new(10, 12)]
    }

    #[test]
    fn zero_projection_gives_zero_output() {
        let (aux, store) = setup();
        let mut rng = RngStreams::new(1).get(Stream::Auxiliary);
        let out = encode_auxiliary(&aux, &store, &chars(5), &alignment(), 12, Mode::Train, &mut rng).unwrap();
        assert_eq!(out.dim(), (12, 128));
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn replication_after_encoding() {
        let (aux, mut store) = setup();
        let w = aux.out_proj.weight;
        *store.value_mut(w) = Array2::from_shape_fn(store.value(w).dim(), |(i, j)| ((i + 2 * j) % 5) as f64 * 0.1 - 0.2);
        let mut rng = RngStreams::new(1).get(Stream::Auxiliary);
        let out = encode_auxiliary(&aux, &store, &chars(5), &alignment(), 12, Mode::Eval, &mut rng).unwrap();
        assert_eq!(out.row(0), out.row(1));
        assert_eq!(out.row(7), out.row(8));
        assert!(out.row(4).iter().all(|&v| v == 0.0));
        assert!(out.row(9).iter().all(|&v| v == 0.0));
        assert!(out.row(0) != out.row(2));
    }

    #[test]
    fn wrong_input_width_is_config_error() {
        let (aux, store) = setup();
        let mut rng = RngStreams::new(1).get(Stream::Auxiliary);
        let bad = Array2::zeros((5, 10));
        assert!(matches!(
            encode_auxiliary(&aux, &store, &bad, &alignment(), 12, Mode::Eval, &mut rng),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn additive_combine() {
        let m = Array2::from_shape_fn((3, 4), |(i, j)| (i * 4 + j) as f64);
        let z = Array2::zeros((3, 4));
        assert_eq!(combine_additive(&m, &z).unwrap(), m);
        assert_eq!(combine_additive(&z, &m).unwrap(), m);
        assert!(matches!(combine_additive(&m, &Array2::zeros((2, 4))), Err(Error::Shape(_))));
    }
}
