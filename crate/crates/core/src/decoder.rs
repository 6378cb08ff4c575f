//! Autoregressive decoder: pre-net, two zoneout LSTMs, stepwise monotonic
//! attention, mel and stop-token heads, and the convolutional post-net.

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::attention::{initial_alignment, sma_step_graph, EnergyScorer};
use crate::autograd::{logistic, Graph, Var};
use crate::corpus::N_MELS;
use crate::error::{Error, Result};
use crate::nn::{dropout, BatchNorm, Conv1d, Linear, LstmCell, Mode, ModelRng, Packed};
use crate::params::ParamStore;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub mel_dim: usize,
    pub prenet_dims: Vec<usize>,
    /// Active in both train and eval mode.
    pub prenet_dropout: f64,
    pub lstm_units: usize,
    pub zoneout: f64,
    pub attention_dim: usize,
    /// Std of the pre-sigmoid energy noise, train mode only.
    pub attention_noise: f64,
    pub energy_bias_init: f64,
    pub reduction_factor: usize,
    pub stop_threshold: f64,
    pub max_frames: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            mel_dim: N_MELS,
            prenet_dims: vec![256, 256],
            prenet_dropout: 0.5,
            lstm_units: 1024,
            zoneout: 0.1,
            attention_dim: 128,
            attention_noise: 1.0,
            energy_bias_init: 1.0,
            reduction_factor: 1,
            stop_threshold: 0.5,
            max_frames: 2000,
        }
    }
}

impl DecoderConfig {
    pub fn desk() -> Self {
        Self {
            prenet_dims: vec![64, 64],
            lstm_units: 64,
            attention_dim: 32,
            max_frames: 400,
            ..Self::default()
        }
    }

    pub fn check(&self) -> Result<()> {
        if !(self.stop_threshold > 0.0 && self.stop_threshold < 1.0) {
            return Err(Error::Config(format!("stop_threshold {} outside (0, 1)", self.stop_threshold)));
        }
        if self.max_frames == 0 {
            return Err(Error::Config("max_frames must be >= 1".into()));
        }
        if self.reduction_factor != 1 {
            return Err(Error::Config("only reduction_factor = 1 is supported".into()));
        }
        if self.prenet_dims.is_empty() {
            return Err(Error::Config("decoder pre-net needs at least one layer".into()));
        }
        if !(0.0..1.0).contains(&self.zoneout) {
            return Err(Error::Config(format!("zoneout rate {} outside [0, 1)", self.zoneout)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PostnetConfig {
    pub layers: usize,
    pub kernel: usize,
    pub channels: usize,
    pub dropout: f64,
}

impl Default for PostnetConfig {
    fn default() -> Self {
        Self {
            layers: 5,
            kernel: 5,
            channels: 512,
            dropout: 0.5,
        }
    }
}

impl PostnetConfig {
    pub fn desk() -> Self {
        Self {
            channels: 32,
            ..Self::default()
        }
    }
}

/// Recurrent state as graph nodes; one row per batch item.
#[derive(Clone, Debug)]
pub struct StepVars {
    pub h1: Var,
    pub c1: Var,
    pub h2: Var,
    pub c2: Var,
    /// `1 × T_b` per item.
    pub alignments: Vec<Var>,
    pub context: Var,
}

/// Plain-value decoder state of a single utterance between steps.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderState {
    pub h: [Array1<f64>; 2],
    pub c: [Array1<f64>; 2],
    pub alignment: Array1<f64>,
    pub context: Array1<f64>,
    pub prev_frame: Array1<f64>,
}

impl DecoderState {
    fn is_finite(&self) -> bool {
        let all = |a: &Array1<f64>| a.iter().all(|v| v.is_finite());
        self.h.iter().all(all)
            && self.c.iter().all(all)
            && all(&self.alignment)
            && all(&self.context)
            && all(&self.prev_frame)
    }
}

pub struct StepOutput {
    /// `B × mel_dim`.
    pub mel: Var,
    /// `B × 1`.
    pub stop: Var,
    pub state: StepVars,
}

/// Teacher-forced outputs per batch item.
pub struct DecoderOutput {
    /// `n_b × mel_dim`.
    pub mel: Vec<Var>,
    /// `n_b × 1`.
    pub stop: Vec<Var>,
    /// `n_b × T_b`.
    pub alignments: Vec<Var>,
}

fn row_leaf(g: &mut Graph, a: &Array1<f64>) -> Var {
    g.leaf(a.clone().insert_axis(Axis(0)))
}

fn row_value(g: &Graph, v: Var) -> Array1<f64> {
    g.value(v).row(0).to_owned()
}

/// `z·prev + (1−z)·new`: Bernoulli masks in train mode, the expectation in eval.
pub fn zoneout<R: Rng>(g: &mut Graph, prev: Var, new: Var, rate: f64, mode: Mode, rng: &mut R) -> Var {
    match mode {
        Mode::Train => {
            let mask = Array2::from_shape_simple_fn(g.shape(prev), || {
                if rng.random::<f64>() < rate {
                    1.0
                } else {
                    0.0
                }
            });
            let inv = mask.mapv(|m| 1.0 - m);
            let kept = g.mul_const(prev, mask);
            let fresh = g.mul_const(new, inv);
            g.add(kept, fresh)
        }
        Mode::Eval => {
            let kept = g.scale(prev, rate);
            let fresh = g.scale(new, 1.0 - rate);
            g.add(kept, fresh)
        }
    }
}

#[derive(Clone, Debug)]
pub struct Decoder {
    pub config: DecoderConfig,
    pub memory_dim: usize,
    pub prenet: Vec<Linear>,
    pub lstm1: LstmCell,
    pub lstm2: LstmCell,
    pub attention: EnergyScorer,
    pub mel_head: Linear,
    pub stop_head: Linear,
}

impl Decoder {
    pub fn new<R: Rng>(store: &mut ParamStore, config: DecoderConfig, memory_dim: usize, rng: &mut R) -> Result<Self> {
        config.check()?;
        let mut prenet = Vec::new();
        let mut d = config.mel_dim;
        for (i, &h) in config.prenet_dims.iter().enumerate() {
            prenet.push(Linear::new(store, &format!("decoder.prenet{i}"), d, h, true, rng));
            d = h;
        }
        let h = config.lstm_units;
        let lstm1 = LstmCell::new(store, "decoder.lstm1", d + memory_dim, h, rng);
        let lstm2 = LstmCell::new(store, "decoder.lstm2", h, h, rng);
        let attention = EnergyScorer::new(
            store,
            "decoder.attention",
            h,
            memory_dim,
            config.attention_dim,
            config.energy_bias_init,
            rng,
        );
        let mel_head = Linear::new(store, "decoder.mel_head", memory_dim + h, config.mel_dim, true, rng);
        let stop_head = Linear::new(store, "decoder.stop_head", memory_dim + h, 1, true, rng);
        Ok(Self {
            config,
            memory_dim,
            prenet,
            lstm1,
            lstm2,
            attention,
            mel_head,
            stop_head,
        })
    }

    /// Zero recurrent state and one-hot alignments for memories of the given lengths.
    pub fn initial_state(&self, g: &mut Graph, lens: &[usize]) -> StepVars {
        let (b, h) = (lens.len(), self.config.lstm_units);
        StepVars {
            h1: g.zeros(b, h),
            c1: g.zeros(b, h),
            h2: g.zeros(b, h),
            c2: g.zeros(b, h),
            alignments: lens.iter().map(|&t| g.row(&initial_alignment(t))).collect(),
            context: g.zeros(b, self.memory_dim),
        }
    }

    pub fn initial_state_values(&self, t: usize) -> DecoderState {
        let h = self.config.lstm_units;
        DecoderState {
            h: [Array1::zeros(h), Array1::zeros(h)],
            c: [Array1::zeros(h), Array1::zeros(h)],
            alignment: Array1::from(initial_alignment(t)),
            context: Array1::zeros(self.memory_dim),
            prev_frame: Array1::zeros(self.config.mel_dim),
        }
    }

    fn prenet(&self, g: &mut Graph, store: &ParamStore, x: Var, rng: &mut ModelRng) -> Var {
        let mut x = x;
        for layer in &self.prenet {
            x = layer.forward(g, store, x);
            x = g.relu(x);
            x = dropout(g, x, self.config.prenet_dropout, rng);
        }
        x
    }

    /// One decoder step for a batch. `prev_frame` is `B × mel_dim`; `memories`
    /// and `keys` hold one entry per batch item.
    #[allow(clippy::too_many_arguments)]
    pub fn step(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        memories: &[Var],
        keys: &[Var],
        state: &StepVars,
        prev_frame: Var,
        mode: Mode,
        rng: &mut ModelRng,
    ) -> StepOutput {
        let z = self.config.zoneout;
        let p = self.prenet(g, store, prev_frame, rng);

        let x1 = g.concat_cols(&[p, state.context]);
        let x1 = self.lstm1.project_input(g, store, x1);
        let (h1, c1) = self.lstm1.step(g, store, x1, state.h1, state.c1);
        let h1 = zoneout(g, state.h1, h1, z, mode, rng);
        let c1 = zoneout(g, state.c1, c1, z, mode, rng);

        let x2 = self.lstm2.project_input(g, store, h1);
        let (h2, c2) = self.lstm2.step(g, store, x2, state.h2, state.c2);
        let h2 = zoneout(g, state.h2, h2, z, mode, rng);
        let c2 = zoneout(g, state.c2, c2, z, mode, rng);

        let q = self.attention.project_query(g, store, h2);
        let noise = if mode.is_train() && self.config.attention_noise > 0.0 {
            Some(Normal::new(0.0, self.config.attention_noise).expect("noise std is positive"))
        } else {
            None
        };
        let mut alignments = Vec::with_capacity(memories.len());
        let mut contexts = Vec::with_capacity(memories.len());
        for (b, (&memory, &key)) in memories.iter().zip(keys).enumerate() {
            let qb = if memories.len() == 1 { q } else { g.slice_rows(q, b, b + 1) };
            let mut energies = self.attention.energies_projected(g, store, key, qb);
            if let Some(normal) = &noise {
                let n = Array2::from_shape_simple_fn(g.shape(energies), || normal.sample(rng));
                energies = g.offset(energies, &n);
            }
            let alignment = sma_step_graph(g, state.alignments[b], energies);
            contexts.push(g.matmul(alignment, memory));
            alignments.push(alignment);
        }
        let context = if contexts.len() == 1 {
            contexts[0]
        } else {
            g.concat_rows(&contexts)
        };

        let joined = g.concat_cols(&[context, h2]);
        let mel = self.mel_head.forward(g, store, joined);
        let stop = self.stop_head.forward(g, store, joined);
        StepOutput {
            mel,
            stop,
            state: StepVars {
                h1,
                c1,
                h2,
                c2,
                alignments,
                context,
            },
        }
    }

    /// Runs the decoder over ground-truth targets (`n_b × mel_dim` each),
    /// feeding frame `t-1` as the input of step `t`. Shorter items keep
    /// stepping over zero padding; those steps are dropped from the output.
    pub fn teacher_forced(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        memories: &[Var],
        targets: &[&Array2<f64>],
        mode: Mode,
        rng: &mut ModelRng,
    ) -> Result<DecoderOutput> {
        if memories.len() != targets.len() || memories.is_empty() {
            return Err(Error::Shape(format!(
                "{} memories for {} targets",
                memories.len(),
                targets.len()
            )));
        }
        for t in targets {
            if t.ncols() != self.config.mel_dim {
                return Err(Error::Shape(format!(
                    "target has {} mel bins, decoder expects {}",
                    t.ncols(),
                    self.config.mel_dim
                )));
            }
            if t.nrows() == 0 {
                return Err(Error::Input("empty target".into()));
            }
        }
        let b = targets.len();
        let n_max = targets.iter().map(|t| t.nrows()).max().unwrap_or(0);
        let lens: Vec<usize> = memories.iter().map(|&m| g.shape(m).0).collect();
        let keys: Vec<Var> = memories.iter().map(|&m| self.attention.keys(g, store, m)).collect();
        let mut state = self.initial_state(g, &lens);

        let mut mels = Vec::with_capacity(n_max);
        let mut stops = Vec::with_capacity(n_max);
        let mut aligns: Vec<Vec<Var>> = vec![Vec::new(); b];
        let mut prev = g.zeros(b, self.config.mel_dim);
        for step in 0..n_max {
            let out = self.step(g, store, memories, &keys, &state, prev, mode, rng);
            mels.push(out.mel);
            stops.push(out.stop);
            for (i, t) in targets.iter().enumerate() {
                if step < t.nrows() {
                    aligns[i].push(out.state.alignments[i]);
                }
            }
            state = out.state;
            if step + 1 < n_max {
                prev = g.leaf(Array2::from_shape_fn((b, self.config.mel_dim), |(i, j)| {
                    targets[i].get((step, j)).copied().unwrap_or(0.0)
                }));
            }
        }
        // step-major rows: row s·B + i holds item i at step s
        let all_mel = g.concat_rows(&mels);
        let all_stop = g.concat_rows(&stops);
        let mut mel = Vec::with_capacity(b);
        let mut stop = Vec::with_capacity(b);
        let mut alignments = Vec::with_capacity(b);
        for (i, t) in targets.iter().enumerate() {
            let rows: Vec<Option<usize>> = (0..t.nrows()).map(|s| Some(s * b + i)).collect();
            mel.push(g.gather(all_mel, rows.clone()));
            stop.push(g.gather(all_stop, rows));
            alignments.push(g.concat_rows(&aligns[i]));
        }
        Ok(DecoderOutput { mel, stop, alignments })
    }
}

/// A single step on plain values.
pub fn decode_step(
    decoder: &Decoder,
    store: &ParamStore,
    state: &DecoderState,
    memory: &Array2<f64>,
    mode: Mode,
    rng: &mut ModelRng,
) -> Result<(Array1<f64>, f64, DecoderState)> {
    if state.alignment.len() != memory.nrows() {
        return Err(Error::Shape(format!(
            "alignment over {} positions but memory has {} rows",
            state.alignment.len(),
            memory.nrows()
        )));
    }
    if !state.is_finite() {
        return Err(Error::Input("decoder state contains non-finite values".into()));
    }
    let mut g = Graph::new();
    let mem = g.leaf(memory.clone());
    let keys = decoder.attention.keys(&mut g, store, mem);
    let vars = StepVars {
        h1: row_leaf(&mut g, &state.h[0]),
        c1: row_leaf(&mut g, &state.c[0]),
        h2: row_leaf(&mut g, &state.h[1]),
        c2: row_leaf(&mut g, &state.c[1]),
        alignments: vec![row_leaf(&mut g, &state.alignment)],
        context: row_leaf(&mut g, &state.context),
    };
    let prev = row_leaf(&mut g, &state.prev_frame);
    let out = decoder.step(&mut g, store, &[mem], &[keys], &vars, prev, mode, rng);
    let mel = row_value(&g, out.mel);
    let stop = g.scalar(out.stop);
    let next = DecoderState {
        h: [row_value(&g, out.state.h1), row_value(&g, out.state.h2)],
        c: [row_value(&g, out.state.c1), row_value(&g, out.state.c2)],
        alignment: row_value(&g, out.state.alignments[0]),
        context: row_value(&g, out.state.context),
        prev_frame: mel.clone(),
    };
    Ok((mel, stop, next))
}

#[derive(Clone, Debug)]
pub struct Postnet {
    pub config: PostnetConfig,
    pub layers: Vec<(Conv1d, BatchNorm)>,
}

impl Postnet {
    pub fn new<R: Rng>(store: &mut ParamStore, config: PostnetConfig, mel_dim: usize, rng: &mut R) -> Result<Self> {
        if config.layers == 0 {
            return Err(Error::Config("post-net needs at least one layer".into()));
        }
        let mut layers = Vec::with_capacity(config.layers);
        for i in 0..config.layers {
            let cin = if i == 0 { mel_dim } else { config.channels };
            let cout = if i + 1 == config.layers { mel_dim } else { config.channels };
            layers.push((
                Conv1d::new(store, &format!("postnet.conv{i}"), cin, cout, config.kernel, rng),
                BatchNorm::new(store, &format!("postnet.bn{i}"), cout),
            ));
        }
        Ok(Self { config, layers })
    }

    /// Residual for every sequence of the batch (tanh on all but the last layer).
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, mels: &Packed, mode: Mode, rng: &mut ModelRng) -> Packed {
        let mut x = mels.clone();
        let last = self.layers.len() - 1;
        for (i, (conv, bn)) in self.layers.iter().enumerate() {
            let y = conv.forward(g, store, &x);
            let mut y = bn.forward(g, store, y.var, mode);
            if i < last {
                y = g.tanh(y);
            }
            if mode.is_train() {
                y = dropout(g, y, self.config.dropout, rng);
            }
            x = x.with_var(y);
        }
        x
    }
}

/// Post-net residual for one spectrogram; the refined output is `mel + residual`.
pub fn postnet(net: &Postnet, store: &ParamStore, mel: &Array2<f64>, mode: Mode, rng: &mut ModelRng) -> Result<Array2<f64>> {
    if mel.iter().any(|v| !v.is_finite()) {
        return Err(Error::Input("post-net input contains non-finite values".into()));
    }
    if mel.nrows() == 0 {
        return Err(Error::Input("post-net input has no frames".into()));
    }
    let mut g = Graph::new();
    let x = g.leaf(mel.clone());
    let packed = Packed::pack(&mut g, &[x]);
    let out = net.forward(&mut g, store, &packed, mode, rng);
    Ok(g.value(out.var).clone())
}

/// Free-running synthesis output.
#[derive(Clone, Debug)]
pub struct Synthesis {
    /// Post-net refined mel, `n × mel_dim`.
    pub mel: Array2<f64>,
    pub mel_before: Array2<f64>,
    /// `n × T` attention weights, one row per frame.
    pub alignments: Array2<f64>,
    pub stop_probs: Vec<f64>,
    /// True if the stop token fired before `max_frames`.
    pub stopped: bool,
}

/// Free-running decode from zero frame and one-hot alignment until the stop
/// probability exceeds the threshold or `max_frames` is reached.
pub fn synthesize_utterance(
    decoder: &Decoder,
    post: &Postnet,
    store: &ParamStore,
    memory: &Array2<f64>,
    max_frames: usize,
    rng: &mut ModelRng,
) -> Result<Synthesis> {
    if memory.nrows() == 0 {
        return Err(Error::Input("empty encoder memory".into()));
    }
    if max_frames == 0 {
        return Err(Error::Config("max_frames must be >= 1".into()));
    }
    let mut state = decoder.initial_state_values(memory.nrows());
    let mut frames = Vec::new();
    let mut aligns = Vec::new();
    let mut stop_probs = Vec::new();
    let mut stopped = false;
    while frames.len() < max_frames {
        let (mel, stop, next) = decode_step(decoder, store, &state, memory, Mode::Eval, rng)?;
        let prob = logistic(stop);
        frames.push(mel);
        aligns.push(next.alignment.clone());
        stop_probs.push(prob);
        state = next;
        if prob > decoder.config.stop_threshold {
            stopped = true;
            break;
        }
    }
    let n = frames.len();
    let mel_before = Array2::from_shape_fn((n, decoder.config.mel_dim), |(i, j)| frames[i][j]);
    let alignments = Array2::from_shape_fn((n, memory.nrows()), |(i, j)| aligns[i][j]);
    let residual = postnet(post, store, &mel_before, Mode::Eval, rng)?;
    Ok(Synthesis {
        mel: &mel_before + &residual,
        mel_before,
        alignments,
        stop_probs,
        stopped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{RngStreams, Stream};

    fn setup(memory_dim: usize) -> (Decoder, Postnet, ParamStore) {
        let mut store = ParamStore::new();
        let mut rng = RngStreams::new(2).get(Stream::Init);
        let cfg = DecoderConfig {
            prenet_dims: vec![16, 16],
            lstm_units: 24,
            attention_dim: 12,
            ..DecoderConfig::desk()
        };
        let dec = Decoder::new(&mut store, cfg, memory_dim, &mut rng).unwrap();
        let post = Postnet::new(
            &mut store,
            PostnetConfig {
                channels: 16,
                ..PostnetConfig::default()
            },
            N_MELS,
            &mut rng,
        )
        .unwrap();
        (dec, post, store)
    }

    fn memory(t: usize, d: usize) -> Array2<f64> {
        Array2::from_shape_fn((t, d), |(i, j)| ((i * 7 + j * 3) % 11) as f64 / 11.0 - 0.4)
    }

    #[test]
    fn one_hot_alignment_picks_memory_row() {
        let mut g = Graph::new();
        let m = memory(5, 8);
        let mem = g.leaf(m.clone());
        let a = g.row(&[0.0, 0.0, 1.0, 0.0, 0.0]);
        let ctx = g.matmul(a, mem);
        assert_eq!(g.value(ctx).row(0), m.row(2));
    }

    #[test]
    fn decode_step_shapes_and_determinism() {
        let (dec, _, store) = setup(8);
        let m = memory(6, 8);
        let state = dec.initial_state_values(6);
        let run = || {
            let mut rng = RngStreams::new(4).get(Stream::Decoder);
            decode_step(&dec, &store, &state, &m, Mode::Eval, &mut rng).unwrap()
        };
        let (mel, stop, next) = run();
        let (mel2, stop2, next2) = run();
        assert_eq!(mel.len(), 80);
        assert_eq!((mel, stop, next.clone()), (mel2, stop2, next2));
        assert!((next.alignment.sum() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn decode_step_rejects_bad_state() {
        let (dec, _, store) = setup(8);
        let mut rng = RngStreams::new(4).get(Stream::Decoder);
        let state = dec.initial_state_values(3);
        assert!(matches!(
            decode_step(&dec, &store, &state, &memory(6, 8), Mode::Eval, &mut rng),
            Err(Error::Shape(_))
        ));
        let mut state = dec.initial_state_values(6);
        state.h[0][0] = f64::NAN;
        assert!(matches!(
            decode_step(&dec, &store, &state, &memory(6, 8), Mode::Eval, &mut rng),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn zoneout_modes_coincide_at_zero_rate() {
        let mut g = Graph::new();
        let prev = g.row(&[0.3, -0.2, 0.9]);
        let new = g.row(&[-0.7, 0.1, 0.25]);
        let mut rng = RngStreams::new(0).get(Stream::Decoder);
        let a = zoneout(&mut g, prev, new, 0.0, Mode::Train, &mut rng);
        let b = zoneout(&mut g, prev, new, 0.0, Mode::Eval, &mut rng);
        assert_eq!(g.value(a), g.value(b));
        let e = zoneout(&mut g, prev, new, 0.1, Mode::Eval, &mut rng);
        let expect = [0.1 * 0.3 + 0.9 * -0.7, 0.1 * -0.2 + 0.9 * 0.1, 0.1 * 0.9 + 0.9 * 0.25];
        for (x, y) in g.value(e).iter().zip(expect) {
            assert!((x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn postnet_shapes_and_zero_weights() {
        let (_, post, mut store) = setup(8);
        for n in [1, 7, 100] {
            let mel = Array2::from_shape_fn((n, 80), |(i, j)| ((i + j) % 9) as f64 - 4.0);
            let mut rng = RngStreams::new(1).get(Stream::Postnet);
            assert_eq!(postnet(&post, &store, &mel, Mode::Train, &mut rng).unwrap().dim(), (n, 80));
        }
        for id in store.ids_with_prefix("postnet.").collect::<Vec<_>>() {
            if store.is_trainable(id) {
                store.value_mut(id).fill(0.0);
            }
        }
        let mel = Array2::from_shape_fn((7, 80), |(i, j)| (i * j) as f64 * 0.01);
        let mut rng = RngStreams::new(1).get(Stream::Postnet);
        let r = postnet(&post, &store, &mel, Mode::Eval, &mut rng).unwrap();
        assert!(r.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn synthesis_cap_and_alignment_rows() {
        let (dec, post, store) = setup(8);
        let m = memory(5, 8);
        let mut rng = RngStreams::new(3).get(Stream::Decoder);
        let one = synthesize_utterance(&dec, &post, &store, &m, 1, &mut rng).unwrap();
        assert_eq!(one.mel.nrows(), 1);
        let mut rng = RngStreams::new(3).get(Stream::Decoder);
        let s = synthesize_utterance(&dec, &post, &store, &m, 30, &mut rng).unwrap();
        assert!(s.mel.nrows() <= 30);
        assert_eq!(s.stopped, s.mel.nrows() < 30 || s.stop_probs.last().unwrap() > &0.5);
        let mut prev = initial_alignment(5);
        for row in s.alignments.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-6);
            let (mut cp, mut co) = (0.0, 0.0);
            for j in 0..5 {
                cp += prev[j];
                co += row[j];
                assert!(co <= cp + 1e-12);
            }
            prev = row.to_vec();
        }
    }
}
