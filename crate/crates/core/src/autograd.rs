//! A small reverse-mode tape over dense `f64` matrices.
//!
//! Every value is a 2-D matrix (row vectors are `1 × n`). Sequences are
//! stored time-major: one row per time step. The tape records each op and
//! its inputs; [`Graph::backward`] walks it in reverse and accumulates
//! gradients. Parameters enter through [`Graph::param`], which caches one
//! node per parameter so repeated use inside a recurrence shares a node.

use ndarray::{s, Array1, Array2, Axis};

use crate::params::{ParamId, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

const BN_EPS: f64 = 1e-5;

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulRow(Var, Var),
    MulConst(Var, Array2<f64>),
    Scale(Var, f64),
    Offset(Var),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    LeakyRelu(Var, f64),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    Transpose(Var),
    Gather(Var, Vec<Option<usize>>),
    ReverseRows(Var),
    ShiftRight(Var),
    Im2Col {
        input: Var,
        kernel: usize,
        pad_left: usize,
    },
    MaxPool {
        input: Var,
        argmax: Vec<usize>,
    },
    BatchNorm {
        input: Var,
        xhat: Array2<f64>,
        inv_std: Array1<f64>,
    },
    Sum(Var),
    SumSquaredDiff(Var, Array2<f64>),
    WeightedBce {
        logits: Var,
        targets: Array2<f64>,
        weights: Array2<f64>,
    },
}

struct Node {
    value: Array2<f64>,
    op: Op,
}

/// Batch statistics observed by a train-mode batch-norm, waiting to be folded
/// into the running buffers once the step completes.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub mean: Array1<f64>,
    /// Unbiased variance estimate.
    pub var: Array1<f64>,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    param_nodes: Vec<Option<Var>>,
    bn_stats: Vec<BatchStats>,
}

/// Gradients of one scalar with respect to every node of a graph.
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
    param_nodes: Vec<Option<Var>>,
}

impl Gradients {
    pub fn of(&self, v: Var) -> Option<&Array2<f64>> {
        self.grads[v.0].as_ref()
    }

    /// Gradient for a parameter. `None` if the parameter was never used.
    pub fn param(&self, id: ParamId) -> Option<&Array2<f64>> {
        self.param_nodes
            .get(id.index())
            .copied()
            .flatten()
            .and_then(|v| self.grads[v.0].as_ref())
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    pub fn batch_stats(&self) -> &[BatchStats] {
        &self.bn_stats
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn zeros(&mut self, rows: usize, cols: usize) -> Var {
        self.leaf(Array2::zeros((rows, cols)))
    }

    pub fn row(&mut self, values: &[f64]) -> Var {
        self.leaf(Array2::from_shape_vec((1, values.len()), values.to_vec()).unwrap())
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if self.param_nodes.len() <= id.index() {
            self.param_nodes.resize(id.index() + 1, None);
        }
        if let Some(v) = self.param_nodes[id.index()] {
            return v;
        }
        let v = self.leaf(store.value(id).clone());
        self.param_nodes[id.index()] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        self.push(value, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add: shape mismatch");
        let value = self.value(a) + self.value(b);
        self.push(value, Op::Add(a, b))
    }

    /// `a` is `n × m`, `row` is `1 × m`; the row is added to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        assert_eq!(self.shape(row).0, 1);
        assert_eq!(self.shape(a).1, self.shape(row).1, "add_row: width mismatch");
        let value = self.value(a) + self.value(row);
        self.push(value, Op::AddRow(a, row))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "sub: shape mismatch");
        let value = self.value(a) - self.value(b);
        self.push(value, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mul: shape mismatch");
        let value = self.value(a) * self.value(b);
        self.push(value, Op::Mul(a, b))
    }

    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        assert_eq!(self.shape(row).0, 1);
        assert_eq!(self.shape(a).1, self.shape(row).1, "mul_row: width mismatch");
        let value = self.value(a) * self.value(row);
        self.push(value, Op::MulRow(a, row))
    }

    pub fn mul_const(&mut self, a: Var, c: Array2<f64>) -> Var {
        assert_eq!(self.shape(a), c.dim(), "mul_const: shape mismatch");
        let value = self.value(a) * &c;
        self.push(value, Op::MulConst(a, c))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let value = self.value(a) * k;
        self.push(value, Op::Scale(a, k))
    }

    /// Adds a constant matrix; gradient passes through unchanged.
    pub fn offset(&mut self, a: Var, c: &Array2<f64>) -> Var {
        assert_eq!(self.shape(a), c.dim(), "offset: shape mismatch");
        let value = self.value(a) + c;
        self.push(value, Op::Offset(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(sigmoid);
        self.push(value, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::tanh);
        self.push(value, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| x.max(0.0));
        self.push(value, Op::Relu(a))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let value = self.value(a).mapv(|x| if x > 0.0 { x } else { slope * x });
        self.push(value, Op::LeakyRelu(a, slope))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let value = ndarray::concatenate(Axis(1), &views).expect("concat_cols: row mismatch");
        self.push(value, Op::ConcatCols(parts.to_vec()))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let value = ndarray::concatenate(Axis(0), &views).expect("concat_rows: width mismatch");
        self.push(value, Op::ConcatRows(parts.to_vec()))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Var {
        let value = self.value(a).slice(s![start..end, ..]).to_owned();
        self.push(value, Op::SliceRows(a, start))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let value = self.value(a).slice(s![.., start..end]).to_owned();
        self.push(value, Op::SliceCols(a, start))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).t().to_owned();
        self.push(value, Op::Transpose(a))
    }

    /// Builds a matrix whose row `i` is row `index[i]` of `table`, or zeros for `None`.
    pub fn gather(&mut self, table: Var, index: Vec<Option<usize>>) -> Var {
        let t = self.value(table);
        let mut value = Array2::zeros((index.len(), t.ncols()));
        for (i, src) in index.iter().enumerate() {
            if let Some(src) = *src {
                value.row_mut(i).assign(&t.row(src));
            }
        }
        self.push(value, Op::Gather(table, index))
    }

    pub fn reverse_rows(&mut self, a: Var) -> Var {
        let value = self.value(a).slice(s![..;-1, ..]).to_owned();
        self.push(value, Op::ReverseRows(a))
    }

    /// Shifts columns one place to the right: `out[:, j] = a[:, j-1]`, `out[:, 0] = 0`.
    pub fn shift_right(&mut self, a: Var) -> Var {
        let src = self.value(a);
        let mut value = Array2::zeros(src.dim());
        let n = src.ncols();
        if n > 1 {
            value.slice_mut(s![.., 1..]).assign(&src.slice(s![.., ..n - 1]));
        }
        self.push(value, Op::ShiftRight(a))
    }

    /// Unfolds a `T × C` sequence into `T × (kernel·C)` windows, zero padded with
    /// `pad_left` rows before and `kernel - 1 - pad_left` rows after.
    pub fn im2col(&mut self, input: Var, kernel: usize, pad_left: usize) -> Var {
        assert!(pad_left < kernel);
        let x = self.value(input);
        let (t, c) = x.dim();
        let mut value = Array2::zeros((t, kernel * c));
        for row in 0..t {
            for k in 0..kernel {
                let src = row as isize + k as isize - pad_left as isize;
                if src >= 0 && (src as usize) < t {
                    value
                        .slice_mut(s![row, k * c..(k + 1) * c])
                        .assign(&x.row(src as usize));
                }
            }
        }
        self.push(
            value,
            Op::Im2Col {
                input,
                kernel,
                pad_left,
            },
        )
    }

    /// Stride-1 max pooling over time with the window anchored at each row
    /// (`out[t] = max(x[t..t+width])`, truncated at the end).
    pub fn max_pool(&mut self, input: Var, width: usize) -> Var {
        let x = self.value(input);
        let (t, c) = x.dim();
        let mut value = Array2::zeros((t, c));
        let mut argmax = vec![0usize; t * c];
        for row in 0..t {
            for col in 0..c {
                let mut best = row;
                for r in row + 1..(row + width).min(t) {
                    if x[[r, col]] > x[[best, col]] {
                        best = r;
                    }
                }
                value[[row, col]] = x[[best, col]];
                argmax[row * c + col] = best;
            }
        }
        self.push(value, Op::MaxPool { input, argmax })
    }

    /// Normalizes every column over the rows with the batch mean and biased
    /// variance. Returns the normalized values plus the statistics used.
    pub fn batch_norm(&mut self, input: Var) -> (Var, Array1<f64>, Array1<f64>) {
        let x = self.value(input);
        let n = x.nrows() as f64;
        let mean = x.mean_axis(Axis(0)).expect("batch_norm on empty input");
        let centered = x - &mean;
        let var = centered.mapv(|v| v * v).sum_axis(Axis(0)) / n;
        let inv_std = var.mapv(|v| 1.0 / (v + BN_EPS).sqrt());
        let xhat = &centered * &inv_std;
        let out = self.push(
            xhat.clone(),
            Op::BatchNorm {
                input,
                xhat,
                inv_std,
            },
        );
        (out, mean, var)
    }

    pub(crate) fn record_batch_stats(&mut self, stats: BatchStats) {
        self.bn_stats.push(stats);
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Array2::from_elem((1, 1), self.value(a).sum());
        self.push(value, Op::Sum(a))
    }

    /// `Σ (a - target)²` as a `1 × 1` value.
    pub fn sum_squared_diff(&mut self, a: Var, target: Array2<f64>) -> Var {
        assert_eq!(self.shape(a), target.dim(), "sum_squared_diff: shape mismatch");
        let total: f64 = self
            .value(a)
            .iter()
            .zip(target.iter())
            .map(|(p, t)| (p - t) * (p - t))
            .sum();
        self.push(
            Array2::from_elem((1, 1), total),
            Op::SumSquaredDiff(a, target),
        )
    }

    /// `Σ w · bce(logit, target)` with a numerically stable log-sigmoid.
    pub fn weighted_bce(
        &mut self,
        logits: Var,
        targets: Array2<f64>,
        weights: Array2<f64>,
    ) -> Var {
        assert_eq!(self.shape(logits), targets.dim());
        assert_eq!(targets.dim(), weights.dim());
        let x = self.value(logits);
        let mut total = 0.0;
        for ((&x, &y), &w) in x.iter().zip(targets.iter()).zip(weights.iter()) {
            total += w * bce_with_logit(x, y);
        }
        self.push(
            Array2::from_elem((1, 1), total),
            Op::WeightedBce {
                logits,
                targets,
                weights,
            },
        )
    }

    /// Reverse sweep from a `1 × 1` output.
    pub fn backward(&self, output: Var) -> Gradients {
        assert_eq!(self.shape(output), (1, 1), "backward from a non-scalar");
        let mut grads: Vec<Option<Array2<f64>>> = Vec::with_capacity(output.0 + 1);
        grads.resize_with(output.0 + 1, || None);
        grads[output.0] = Some(Array2::ones((1, 1)));

        fn acc(grads: &mut [Option<Array2<f64>>], v: Var, g: Array2<f64>) {
            match &mut grads[v.0] {
                Some(existing) => *existing += &g,
                slot @ None => *slot = Some(g),
            }
        }

        for idx in (0..=output.0).rev() {
            let Some(gout) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let ga = gout.dot(&self.value(*b).t());
                    let gb = self.value(*a).t().dot(&gout);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *a, gout.clone());
                    acc(&mut grads, *b, gout.clone());
                }
                Op::AddRow(a, row) => {
                    acc(&mut grads, *row, gout.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    acc(&mut grads, *a, gout.clone());
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *b, -&gout);
                    acc(&mut grads, *a, gout.clone());
                }
                Op::Mul(a, b) => {
                    let ga = &gout * self.value(*b);
                    let gb = &gout * self.value(*a);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::MulRow(a, row) => {
                    let ga = &gout * self.value(*row);
                    let grow = (&gout * self.value(*a))
                        .sum_axis(Axis(0))
                        .insert_axis(Axis(0));
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *row, grow);
                }
                Op::MulConst(a, c) => acc(&mut grads, *a, &gout * c),
                Op::Scale(a, k) => acc(&mut grads, *a, &gout * *k),
                Op::Offset(a) => acc(&mut grads, *a, gout.clone()),
                Op::Sigmoid(a) => {
                    let g = ndarray::Zip::from(&gout)
                        .and(&node.value)
                        .map_collect(|&g, &y| g * y * (1.0 - y));
                    acc(&mut grads, *a, g);
                }
                Op::Tanh(a) => {
                    let g = ndarray::Zip::from(&gout)
                        .and(&node.value)
                        .map_collect(|&g, &y| g * (1.0 - y * y));
                    acc(&mut grads, *a, g);
                }
                Op::Relu(a) => {
                    let g = ndarray::Zip::from(&gout)
                        .and(self.value(*a))
                        .map_collect(|&g, &x| if x > 0.0 { g } else { 0.0 });
                    acc(&mut grads, *a, g);
                }
                Op::LeakyRelu(a, slope) => {
                    let g = ndarray::Zip::from(&gout)
                        .and(self.value(*a))
                        .map_collect(|&g, &x| if x > 0.0 { g } else { slope * g });
                    acc(&mut grads, *a, g);
                }
                Op::ConcatCols(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let w = self.shape(p).1;
                        acc(&mut grads, p, gout.slice(s![.., start..start + w]).to_owned());
                        start += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let h = self.shape(p).0;
                        acc(&mut grads, p, gout.slice(s![start..start + h, ..]).to_owned());
                        start += h;
                    }
                }
                Op::SliceRows(a, start) => {
                    let mut g = Array2::zeros(self.shape(*a));
                    let h = gout.nrows();
                    g.slice_mut(s![*start..*start + h, ..]).assign(&gout);
                    acc(&mut grads, *a, g);
                }
                Op::SliceCols(a, start) => {
                    let mut g = Array2::zeros(self.shape(*a));
                    let w = gout.ncols();
                    g.slice_mut(s![.., *start..*start + w]).assign(&gout);
                    acc(&mut grads, *a, g);
                }
                Op::Transpose(a) => acc(&mut grads, *a, gout.t().to_owned()),
                Op::Gather(table, index) => {
                    let mut g = Array2::zeros(self.shape(*table));
                    for (i, src) in index.iter().enumerate() {
                        if let Some(src) = *src {
                            let mut row = g.row_mut(src);
                            row += &gout.row(i);
                        }
                    }
                    acc(&mut grads, *table, g);
                }
                Op::ReverseRows(a) => {
                    acc(&mut grads, *a, gout.slice(s![..;-1, ..]).to_owned());
                }
                Op::ShiftRight(a) => {
                    let mut g = Array2::zeros(gout.dim());
                    let n = gout.ncols();
                    if n > 1 {
                        g.slice_mut(s![.., ..n - 1]).assign(&gout.slice(s![.., 1..]));
                    }
                    acc(&mut grads, *a, g);
                }
                Op::Im2Col {
                    input,
                    kernel,
                    pad_left,
                } => {
                    let (t, c) = self.shape(*input);
                    let mut g = Array2::zeros((t, c));
                    for row in 0..t {
                        for k in 0..*kernel {
                            let src = row as isize + k as isize - *pad_left as isize;
                            if src >= 0 && (src as usize) < t {
                                let mut dst = g.row_mut(src as usize);
                                dst += &gout.slice(s![row, k * c..(k + 1) * c]);
                            }
                        }
                    }
                    acc(&mut grads, *input, g);
                }
                Op::MaxPool { input, argmax } => {
                    let (t, c) = self.shape(*input);
                    let mut g = Array2::zeros((t, c));
                    for row in 0..t {
                        for col in 0..c {
                            g[[argmax[row * c + col], col]] += gout[[row, col]];
                        }
                    }
                    acc(&mut grads, *input, g);
                }
                Op::BatchNorm {
                    input,
                    xhat,
                    inv_std,
                } => {
                    let n = xhat.nrows() as f64;
                    let sum_g = gout.sum_axis(Axis(0));
                    let sum_gx = (&gout * xhat).sum_axis(Axis(0));
                    let g = (&gout * n - &sum_g - &(xhat * &sum_gx)) * &(inv_std / n);
                    acc(&mut grads, *input, g);
                }
                Op::Sum(a) => {
                    let g = Array2::from_elem(self.shape(*a), gout[[0, 0]]);
                    acc(&mut grads, *a, g);
                }
                Op::SumSquaredDiff(a, target) => {
                    let k = 2.0 * gout[[0, 0]];
                    let g = (self.value(*a) - target) * k;
                    acc(&mut grads, *a, g);
                }
                Op::WeightedBce {
                    logits,
                    targets,
                    weights,
                } => {
                    let k = gout[[0, 0]];
                    let g = ndarray::Zip::from(self.value(*logits))
                        .and(targets)
                        .and(weights)
                        .map_collect(|&x, &y, &w| k * w * (sigmoid(x) - y));
                    acc(&mut grads, *logits, g);
                }
            }
            grads[idx] = Some(gout);
        }

        Gradients {
            grads,
            param_nodes: self.param_nodes.clone(),
        }
    }
}

/// Binary cross-entropy of a single logit against a target in `[0, 1]`.
pub fn bce_with_logit(x: f64, y: f64) -> f64 {
    x.max(0.0) - x * y + (-x.abs()).exp().ln_1p()
}

pub fn logistic(x: f64) -> f64 {
    sigmoid(x)
}
