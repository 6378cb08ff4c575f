//! Base phoneme encoder: embedding, conv/batch-norm/ReLU stack, BLSTM.

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{dropout, BatchNorm, Conv1d, LstmCell, Mode, ModelRng, Packed};
use crate::params::{ParamId, ParamStore};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub inventory_size: usize,
    pub embed_dim: usize,
    pub conv_layers: usize,
    pub conv_kernel: usize,
    pub conv_channels: usize,
    pub blstm_units: usize,
    pub conv_dropout: f64,
    pub lstm_dropout: f64,
}

impl EncoderConfig {
    pub fn full(inventory_size: usize) -> Self {
        Self {
            inventory_size,
            embed_dim: 512,
            conv_layers: 3,
            conv_kernel: 5,
            conv_channels: 512,
            blstm_units: 256,
            conv_dropout: 0.5,
            lstm_dropout: 0.1,
        }
    }

    pub fn desk(inventory_size: usize) -> Self {
        Self {
            embed_dim: 64,
            conv_channels: 64,
            blstm_units: 32,
            ..Self::full(inventory_size)
        }
    }

    pub fn memory_dim(&self) -> usize {
        2 * self.blstm_units
    }
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub embedding: ParamId,
    pub convs: Vec<(Conv1d, BatchNorm)>,
    pub forward_lstm: LstmCell,
    pub backward_lstm: LstmCell,
}

impl Encoder {
    pub fn new<R: Rng>(store: &mut ParamStore, config: EncoderConfig, rng: &mut R) -> Self {
        let embedding = store.add_uniform(
            "encoder.embedding",
            (config.inventory_size, config.embed_dim),
            1,
            rng,
        );
        let mut convs = Vec::with_capacity(config.conv_layers);
        let mut in_ch = config.embed_dim;
        for i in 0..config.conv_layers {
            let conv = Conv1d::new(
                store,
                &format!("encoder.conv{i}"),
                in_ch,
                config.conv_channels,
                config.conv_kernel,
                rng,
            );
            let bn = BatchNorm::new(store, &format!("encoder.bn{i}"), config.conv_channels);
            convs.push((conv, bn));
            in_ch = config.conv_channels;
        }
        let forward_lstm = LstmCell::new(store, "encoder.blstm.fwd", in_ch, config.blstm_units, rng);
        let backward_lstm = LstmCell::new(store, "encoder.blstm.bwd", in_ch, config.blstm_units, rng);
        Self {
            config,
            embedding,
            convs,
            forward_lstm,
            backward_lstm,
        }
    }

    pub fn check_ids(&self, ids: &[usize]) -> Result<()> {
        if ids.is_empty() {
            return Err(Error::Input("empty phoneme sequence".into()));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= self.config.inventory_size) {
            return Err(Error::Input(format!(
                "phoneme id {bad} out of range for inventory of {}",
                self.config.inventory_size
            )));
        }
        Ok(())
    }

    /// Embedding plus the convolution stack, with batch statistics shared
    /// across every sequence of the batch.
    pub fn conv_stack(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        batch: &[&[usize]],
        mode: Mode,
        rng: &mut ModelRng,
    ) -> Result<Packed> {
        for ids in batch {
            self.check_ids(ids)?;
        }
        let table = g.param(store, self.embedding);
        let embedded: Vec<Var> = batch
            .iter()
            .map(|ids| g.gather(table, ids.iter().map(|&i| Some(i)).collect()))
            .collect();
        let mut x = Packed::pack(g, &embedded);
        for (conv, bn) in &self.convs {
            let y = conv.forward(g, store, &x);
            let y = bn.forward(g, store, y.var, mode);
            let y = g.relu(y);
            let y = if mode.is_train() {
                dropout(g, y, self.config.conv_dropout, rng)
            } else {
                y
            };
            x = x.with_var(y);
        }
        Ok(x)
    }

    /// Encoder memory (`T × memory_dim`) for every sequence of the batch.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        batch: &[&[usize]],
        mode: Mode,
        rng: &mut ModelRng,
    ) -> Result<Vec<Var>> {
        let convs = self.conv_stack(g, store, batch, mode, rng)?;
        let seqs = convs.unpack(g);
        let mut out = Vec::with_capacity(seqs.len());
        for x in seqs {
            let fwd = self.forward_lstm.run(g, store, x, false);
            let bwd = self.backward_lstm.run(g, store, x, true);
            let y = g.concat_cols(&[fwd, bwd]);
            let y = if mode.is_train() {
                dropout(g, y, self.config.lstm_dropout, rng)
            } else {
                y
            };
            out.push(y);
        }
        Ok(out)
    }
}

/// Stand-alone encoding of one phoneme sequence.
pub fn encode_phonemes(
    encoder: &Encoder,
    store: &ParamStore,
    ids: &[usize],
    mode: Mode,
    rng: &mut ModelRng,
) -> Result<Array2<f64>> {
    let mut g = Graph::new();
    let out = encoder.forward(&mut g, store, &[ids], mode, rng)?;
    Ok(g.value(out[0]).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{RngStreams, Stream};

    fn setup() -> (Encoder, ParamStore) {
        let mut store = ParamStore::new();
        let mut rng = RngStreams::new(3).get(Stream::Init);
        let enc = Encoder::new(&mut store, EncoderConfig::desk(20), &mut rng);
        (enc, store)
    }

    #[test]
    fn shape_law_and_eval_determinism() {
        let (enc, store) = setup();
        let ids: Vec<usize> = (0..17).map(|i| i % 20).collect();
        let mut r1 = RngStreams::new(1).get(Stream::Encoder);
        let mut r2 = RngStreams::new(2).get(Stream::Encoder);
        let a = encode_phonemes(&enc, &store, &ids, Mode::Eval, &mut r1).unwrap();
        let b = encode_phonemes(&enc, &store, &ids, Mode::Eval, &mut r2).unwrap();
        assert_eq!(a.dim(), (17, 64));
        assert_eq!(a, b);
        assert!(a.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn input_errors() {
        let (enc, store) = setup();
        let mut rng = RngStreams::new(1).get(Stream::Encoder);
        assert!(matches!(
            encode_phonemes(&enc, &store, &[], Mode::Eval, &mut rng),
            Err(Error::Input(_))
        ));
        assert!(matches!(
            encode_phonemes(&enc, &store, &[3, 20], Mode::Eval, &mut rng),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn conv_stack_is_local() {
        let (enc, store) = setup();
        let base: Vec<usize> = (0..30).map(|i| (i * 7) % 20).collect();
        let mut changed = base.clone();
        changed[15] = (changed[15] + 1) % 20;
        let run = |ids: &[usize]| {
            let mut g = Graph::new();
            let mut rng = RngStreams::new(0).get(Stream::Encoder);
            let p = enc.conv_stack(&mut g, &store, &[ids], Mode::Eval, &mut rng).unwrap();
            g.value(p.var).clone()
        };
        let (a, b) = (run(&base), run(&changed));
        for t in 0..30 {
            let differs = a.row(t) != b.row(t);
            if (t as isize - 15).abs() > 6 {
                assert!(!differs, "row {t} changed");
            }
        }
        assert!(a.row(15) != b.row(15));
    }
}
