//! Layer building blocks on top of the autograd tape.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{BatchStats, Graph, Var};
use crate::params::{ParamId, ParamStore};

pub type ModelRng = ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}

impl Mode {
    pub fn is_train(self) -> bool {
        self == Mode::Train
    }
}

/// Independent random streams derived from one seed. Each sub-network draws
/// from its own stream so adding a module never shifts another module's masks.
#[derive(Clone, Copy, Debug)]
pub struct RngStreams {
    seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Encoder = 1,
    Auxiliary = 2,
    Context = 3,
    Decoder = 4,
    Postnet = 5,
    Data = 6,
    Init = 7,
}

impl RngStreams {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn get(&self, stream: Stream) -> ModelRng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream as u64);
        rng
    }

    /// Streams for a particular training step.
    pub fn for_step(&self, step: u64) -> RngStreams {
        RngStreams {
            seed: self
                .seed
                .wrapping_mul(0x9E37_79B9_7F4A_7C15)
                .wrapping_add(step.wrapping_mul(0xD1B5_4A32_D192_ED03) + 1),
        }
    }
}

/// Inverted dropout. Identity when `p == 0`.
pub fn dropout<R: Rng>(g: &mut Graph, x: Var, p: f64, rng: &mut R) -> Var {
    if p <= 0.0 {
        return x;
    }
    let keep = 1.0 - p;
    let mask = Array2::from_shape_simple_fn(g.shape(x), || {
        if rng.random::<f64>() < keep {
            1.0 / keep
        } else {
            0.0
        }
    });
    g.mul_const(x, mask)
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let weight = store.add_uniform(format!("{name}.weight"), (in_dim, out_dim), in_dim, rng);
        let bias = bias.then(|| store.add_uniform(format!("{name}.bias"), (1, out_dim), in_dim, rng));
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    /// Weight and bias start at zero.
    pub fn zeros(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize) -> Self {
        let weight = store.add_zeros(format!("{name}.weight"), (in_dim, out_dim));
        let bias = Some(store.add_zeros(format!("{name}.bias"), (1, out_dim)));
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let w = g.param(store, self.weight);
        let y = g.matmul(x, w);
        match self.bias {
            Some(b) => {
                let b = g.param(store, b);
                g.add_row(y, b)
            }
            None => y,
        }
    }
}

/// Several variable-length sequences stacked row-wise into one matrix so that
/// per-row work (matmuls, batch statistics) runs once for the whole batch.
#[derive(Clone, Debug)]
pub struct Packed {
    pub var: Var,
    pub lens: Vec<usize>,
}

impl Packed {
    pub fn pack(g: &mut Graph, seqs: &[Var]) -> Self {
        let lens = seqs.iter().map(|&s| g.shape(s).0).collect();
        let var = if seqs.len() == 1 {
            seqs[0]
        } else {
            g.concat_rows(seqs)
        };
        Self { var, lens }
    }

    pub fn unpack(&self, g: &mut Graph) -> Vec<Var> {
        if self.lens.len() == 1 {
            return vec![self.var];
        }
        let mut start = 0;
        self.lens
            .iter()
            .map(|&n| {
                let v = g.slice_rows(self.var, start, start + n);
                start += n;
                v
            })
            .collect()
    }

    pub fn with_var(&self, var: Var) -> Self {
        Self {
            var,
            lens: self.lens.clone(),
        }
    }
}

/// 1-D convolution over time with "same" output length.
#[derive(Clone, Debug)]
pub struct Conv1d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub kernel: usize,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl Conv1d {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = kernel * in_channels;
        Self {
            weight: store.add_uniform(
                format!("{name}.weight"),
                (fan_in, out_channels),
                fan_in,
                rng,
            ),
            bias: store.add_uniform(format!("{name}.bias"), (1, out_channels), fan_in, rng),
            kernel,
            in_channels,
            out_channels,
        }
    }

    pub fn pad_left(&self) -> usize {
        (self.kernel - 1) / 2
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: &Packed) -> Packed {
        let seqs = x.unpack(g);
        let cols: Vec<Var> = seqs
            .iter()
            .map(|&s| g.im2col(s, self.kernel, self.pad_left()))
            .collect();
        let cols = if cols.len() == 1 {
            cols[0]
        } else {
            g.concat_rows(&cols)
        };
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        let y = g.matmul(cols, w);
        let y = g.add_row(y, b);
        x.with_var(y)
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

pub const BN_MOMENTUM: f64 = 0.1;

impl BatchNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Array2::ones((1, channels))),
            beta: store.add_zeros(format!("{name}.beta"), (1, channels)),
            running_mean: store.add_buffer(format!("{name}.running_mean"), Array2::zeros((1, channels))),
            running_var: store.add_buffer(format!("{name}.running_var"), Array2::ones((1, channels))),
        }
    }

    /// Train mode normalizes with the statistics of all rows of `x` and records
    /// them on the graph; eval mode uses the running buffers.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, mode: Mode) -> Var {
        let normalized = match mode {
            Mode::Train => {
                let (xhat, mean, var) = g.batch_norm(x);
                let n = g.shape(x).0 as f64;
                let unbiased = if n > 1.0 { var * (n / (n - 1.0)) } else { var };
                g.record_batch_stats(BatchStats {
                    running_mean: self.running_mean,
                    running_var: self.running_var,
                    mean,
                    var: unbiased,
                });
                xhat
            }
            Mode::Eval => {
                let shift = g.leaf(-store.value(self.running_mean));
                let inv_std = g.leaf(store.value(self.running_var).mapv(|v| 1.0 / (v + 1e-5).sqrt()));
                let centered = g.add_row(x, shift);
                g.mul_row(centered, inv_std)
            }
        };
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        let y = g.mul_row(normalized, gamma);
        g.add_row(y, beta)
    }
}

/// Folds train-mode batch statistics into the running buffers.
pub fn apply_batch_stats(store: &mut ParamStore, stats: &[BatchStats]) {
    for s in stats {
        let mean = store.value_mut(s.running_mean);
        for (r, b) in mean.iter_mut().zip(s.mean.iter()) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
        }
        let var = store.value_mut(s.running_var);
        for (r, b) in var.iter_mut().zip(s.var.iter()) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
        }
    }
}

/// LSTM cell with gate order (input, forget, cell, output).
#[derive(Clone, Debug)]
pub struct LstmCell {
    pub w_x: ParamId,
    pub w_h: ParamId,
    pub bias: ParamId,
    pub hidden: usize,
}

impl LstmCell {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, input: usize, hidden: usize, rng: &mut R) -> Self {
        let fan_in = input + hidden;
        Self {
            w_x: store.add_uniform(format!("{name}.w_x"), (input, 4 * hidden), fan_in, rng),
            w_h: store.add_uniform(format!("{name}.w_h"), (hidden, 4 * hidden), fan_in, rng),
            bias: store.add_uniform(format!("{name}.bias"), (1, 4 * hidden), fan_in, rng),
            hidden,
        }
    }

    /// `x · W_x + b` for every row at once.
    pub fn project_input(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let w = g.param(store, self.w_x);
        let b = g.param(store, self.bias);
        let y = g.matmul(x, w);
        g.add_row(y, b)
    }

    /// One step from a pre-projected input row. Returns `(h, c)`.
    pub fn step(&self, g: &mut Graph, store: &ParamStore, x_proj: Var, h: Var, c: Var) -> (Var, Var) {
        let hd = self.hidden;
        let w_h = g.param(store, self.w_h);
        let rec = g.matmul(h, w_h);
        let gates = g.add(x_proj, rec);
        let i = g.slice_cols(gates, 0, hd);
        let f = g.slice_cols(gates, hd, 2 * hd);
        let cand = g.slice_cols(gates, 2 * hd, 3 * hd);
        let o = g.slice_cols(gates, 3 * hd, 4 * hd);
        let i = g.sigmoid(i);
        let f = g.sigmoid(f);
        let cand = g.tanh(cand);
        let o = g.sigmoid(o);
        let keep = g.mul(f, c);
        let write = g.mul(i, cand);
        let c_new = g.add(keep, write);
        let tc = g.tanh(c_new);
        let h_new = g.mul(o, tc);
        (h_new, c_new)
    }

    /// Runs over every row of `x`, optionally right-to-left, returning `T × hidden`.
    pub fn run(&self, g: &mut Graph, store: &ParamStore, x: Var, reverse: bool) -> Var {
        let x = if reverse { g.reverse_rows(x) } else { x };
        let proj = self.project_input(g, store, x);
        let t = g.shape(x).0;
        let mut h = g.zeros(1, self.hidden);
        let mut c = g.zeros(1, self.hidden);
        let mut outs = Vec::with_capacity(t);
        for step in 0..t {
            let xp = g.slice_rows(proj, step, step + 1);
            (h, c) = self.step(g, store, xp, h, c);
            outs.push(h);
        }
        let y = g.concat_rows(&outs);
        if reverse {
            g.reverse_rows(y)
        } else {
            y
        }
    }
}

/// GRU cell with gate order (reset, update, candidate).
#[derive(Clone, Debug)]
pub struct GruCell {
    pub w_x: ParamId,
    pub b_x: ParamId,
    pub w_h: ParamId,
    pub b_h: ParamId,
    pub hidden: usize,
}

impl GruCell {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, input: usize, hidden: usize, rng: &mut R) -> Self {
        Self {
            w_x: store.add_uniform(format!("{name}.w_x"), (input, 3 * hidden), hidden, rng),
            b_x: store.add_uniform(format!("{name}.b_x"), (1, 3 * hidden), hidden, rng),
            w_h: store.add_uniform(format!("{name}.w_h"), (hidden, 3 * hidden), hidden, rng),
            b_h: store.add_uniform(format!("{name}.b_h"), (1, 3 * hidden), hidden, rng),
            hidden,
        }
    }

    pub fn project_input(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let w = g.param(store, self.w_x);
        let b = g.param(store, self.b_x);
        let y = g.matmul(x, w);
        g.add_row(y, b)
    }

    pub fn step(&self, g: &mut Graph, store: &ParamStore, x_proj: Var, h: Var) -> Var {
        let hd = self.hidden;
        let w_h = g.param(store, self.w_h);
        let b_h = g.param(store, self.b_h);
        let hp = g.matmul(h, w_h);
        let hp = g.add_row(hp, b_h);
        let xr = g.slice_cols(x_proj, 0, hd);
        let xz = g.slice_cols(x_proj, hd, 2 * hd);
        let xn = g.slice_cols(x_proj, 2 * hd, 3 * hd);
        let hr = g.slice_cols(hp, 0, hd);
        let hz = g.slice_cols(hp, hd, 2 * hd);
        let hn = g.slice_cols(hp, 2 * hd, 3 * hd);
        let r = g.add(xr, hr);
        let r = g.sigmoid(r);
        let z = g.add(xz, hz);
        let z = g.sigmoid(z);
        let gated = g.mul(r, hn);
        let n = g.add(xn, gated);
        let n = g.tanh(n);
        // h' = n + z ⊙ (h - n)
        let diff = g.sub(h, n);
        let blend = g.mul(z, diff);
        g.add(n, blend)
    }

    /// Final state after consuming every row of `x` from `h0`.
    pub fn last_state(&self, g: &mut Graph, store: &ParamStore, x: Var, h0: Var) -> Var {
        let proj = self.project_input(g, store, x);
        let mut h = h0;
        for step in 0..g.shape(x).0 {
            let xp = g.slice_rows(proj, step, step + 1);
            h = self.step(g, store, xp, h);
        }
        h
    }

    pub fn run(&self, g: &mut Graph, store: &ParamStore, x: Var, reverse: bool) -> Var {
        let x = if reverse { g.reverse_rows(x) } else { x };
        let proj = self.project_input(g, store, x);
        let t = g.shape(x).0;
        let mut h = g.zeros(1, self.hidden);
        let mut outs = Vec::with_capacity(t);
        for step in 0..t {
            let xp = g.slice_rows(proj, step, step + 1);
            h = self.step(g, store, xp, h);
            outs.push(h);
        }
        let y = g.concat_rows(&outs);
        if reverse {
            g.reverse_rows(y)
        } else {
            y
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dropout_zero_is_identity() {
        let mut g = Graph::new();
        let x = g.leaf(Array2::ones((2, 3)));
        let mut rng = RngStreams::new(0).get(Stream::Decoder);
        assert_eq!(dropout(&mut g, x, 0.0, &mut rng), x);
    }

    #[test]
    fn streams_are_independent_and_reproducible() {
        let s = RngStreams::new(42);
        let a: u64 = s.get(Stream::Encoder).random();
        let b: u64 = s.get(Stream::Decoder).random();
        assert_ne!(a, b);
        assert_eq!(a, s.get(Stream::Encoder).random::<u64>());
        assert_ne!(s.for_step(1).seed(), s.for_step(2).seed());
    }

    #[test]
    fn eval_batch_norm_uses_running_buffers() {
        let mut store = ParamStore::new();
        let bn = BatchNorm::new(&mut store, "bn", 2);
        *store.value_mut(bn.running_mean) = ndarray::array![[1.0, -1.0]];
        *store.value_mut(bn.running_var) = ndarray::array![[4.0 - 1e-5, 1.0 - 1e-5]];
        let mut g = Graph::new();
        let x = g.leaf(ndarray::array![[3.0, 0.0]]);
        let y = bn.forward(&mut g, &store, x, Mode::Eval);
        let y = g.value(y);
        assert!((y[[0, 0]] - 1.0).abs() < 1e-9);
        assert!((y[[0, 1]] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn packed_round_trip() {
        let mut g = Graph::new();
        let a = g.leaf(Array2::from_elem((2, 3), 1.0));
        let b = g.leaf(Array2::from_elem((4, 3), 2.0));
        let p = Packed::pack(&mut g, &[a, b]);
        assert_eq!(g.shape(p.var), (6, 3));
        let parts = p.unpack(&mut g);
        assert_eq!(g.value(parts[0]), g.value(a));
        assert_eq!(g.value(parts[1]), g.value(b));
    }
}
