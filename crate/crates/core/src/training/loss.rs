use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::autograd::{bce_with_logit, Graph, Var};
use crate::error::{Error, Result};
use crate::model::ForwardVars;

/// Weight of positive stop frames in the binary cross-entropy.
pub const STOP_POS_WEIGHT: f64 = 5.0;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub mel_before: f64,
    pub mel_after: f64,
    pub stop: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn new(mel_before: f64, mel_after: f64, stop: f64) -> Self {
        Self {
            mel_before,
            mel_after,
            stop,
            total: mel_before + mel_after + stop,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.total.is_finite() && self.mel_before.is_finite() && self.mel_after.is_finite() && self.stop.is_finite()
    }
}

/// Stop targets for an utterance of `n` frames padded to `padded`: 1 on the
/// final frame and across the padding, 0 elsewhere.
pub fn stop_targets(n: usize, padded: usize) -> Array1<f64> {
    Array1::from_shape_fn(padded.max(n), |t| if t + 1 >= n { 1.0 } else { 0.0 })
}

fn stop_weight(target: f64) -> f64 {
    if target > 0.5 {
        STOP_POS_WEIGHT
    } else {
        1.0
    }
}

/// Masked losses over a padded batch. Items may carry padding rows beyond
/// `lengths[b]`; those rows never enter any mean.
///
/// * mel terms: mean squared error over valid frames and mel bins;
/// * stop term: weighted binary cross-entropy, normalized by the total weight.
pub fn compute_loss(
    pred_before: &[Array2<f64>],
    pred_after: &[Array2<f64>],
    target_mel: &[Array2<f64>],
    stop_logits: &[Array1<f64>],
    stop_targets: &[Array1<f64>],
    lengths: &[usize],
) -> Result<LossBreakdown> {
    let b = lengths.len();
    if [pred_before.len(), pred_after.len(), target_mel.len(), stop_logits.len(), stop_targets.len()]
        .iter()
        .any(|&n| n != b)
    {
        return Err(Error::Shape("loss inputs disagree on batch size".into()));
    }
    let (mut se_before, mut se_after, mut n_cells) = (0.0, 0.0, 0usize);
    let (mut bce, mut weight) = (0.0, 0.0);
    for i in 0..b {
        let n = lengths[i];
        let dims = target_mel[i].ncols();
        if pred_before[i].ncols() != dims || pred_after[i].ncols() != dims {
            return Err(Error::Shape(format!("item {i}: mel widths differ")));
        }
        if [pred_before[i].nrows(), pred_after[i].nrows(), target_mel[i].nrows(), stop_logits[i].len(), stop_targets[i].len()]
            .iter()
            .any(|&r| r < n)
        {
            return Err(Error::Shape(format!("item {i}: fewer rows than its length {n}")));
        }
        for t in 0..n {
            for j in 0..dims {
                let y = target_mel[i][[t, j]];
                se_before += (pred_before[i][[t, j]] - y).powi(2);
                se_after += (pred_after[i][[t, j]] - y).powi(2);
            }
            let w = stop_weight(stop_targets[i][t]);
            bce += w * bce_with_logit(stop_logits[i][t], stop_targets[i][t]);
            weight += w;
        }
        n_cells += n * dims;
    }
    if n_cells == 0 {
        return Err(Error::Input("batch has no valid frames".into()));
    }
    Ok(LossBreakdown::new(
        se_before / n_cells as f64,
        se_after / n_cells as f64,
        bce / weight,
    ))
}

/// Loss nodes of a teacher-forced pass.
pub struct LossVars {
    pub total: Var,
    pub mel_before: Var,
    pub mel_after: Var,
    pub stop: Var,
}

impl LossVars {
    pub fn breakdown(&self, g: &Graph) -> LossBreakdown {
        LossBreakdown::new(g.scalar(self.mel_before), g.scalar(self.mel_after), g.scalar(self.stop))
    }
}

/// Same objective as [`compute_loss`] on graph outputs of unpadded items.
pub fn graph_loss(g: &mut Graph, out: &ForwardVars, targets: &[&Array2<f64>]) -> Result<LossVars> {
    if out.before.len() != targets.len() {
        return Err(Error::Shape("forward outputs and targets disagree on batch size".into()));
    }
    let cells: usize = targets.iter().map(|t| t.len()).sum();
    let mut before = Vec::new();
    let mut after = Vec::new();
    let mut stop = Vec::new();
    let mut weight = 0.0;
    for (i, t) in targets.iter().enumerate() {
        before.push(g.sum_squared_diff(out.before[i], (*t).clone()));
        after.push(g.sum_squared_diff(out.after[i], (*t).clone()));
        let y = stop_targets(t.nrows(), t.nrows()).insert_axis(ndarray::Axis(1));
        let w = y.mapv(stop_weight);
        weight += w.sum();
        stop.push(g.weighted_bce(out.stop[i], y, w));
    }
    let sum = |g: &mut Graph, vs: &[Var]| vs[1..].iter().fold(vs[0], |acc, &v| g.add(acc, v));
    let mel_before = sum(g, &before);
    let mel_before = g.scale(mel_before, 1.0 / cells as f64);
    let mel_after = sum(g, &after);
    let mel_after = g.scale(mel_after, 1.0 / cells as f64);
    let stop = sum(g, &stop);
    let stop = g.scale(stop, 1.0 / weight);
    let total = g.add(mel_before, mel_after);
    let total = g.add(total, stop);
    Ok(LossVars {
        total,
        mel_before,
        mel_after,
        stop,
    })
}

#[cfg(test)]
#[allow(clippy::cloned_ref_to_slice_refs)]
mod tests {
    use super::*;

    #[test]
    fn perfect_prediction() {
        let y = Array2::from_shape_fn((4, 3), |(i, j)| (i + j) as f64);
        let st = stop_targets(4, 4);
        let logits = st.mapv(|t| if t > 0.5 { 20.0 } else { -20.0 });
        let l = compute_loss(&[y.clone()], &[y.clone()], &[y], &[logits], &[st], &[4]).unwrap();
        assert!(l.total < 1e-6);
    }

    #[test]
    fn zero_logit_gives_ln2() {
        let y = Array2::zeros((5, 2));
        let st = stop_targets(5, 5);
        let l = compute_loss(&[y.clone()], &[y.clone()], &[y], &[Array1::zeros(5)], &[st], &[5]).unwrap();
        assert!((l.stop - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn stop_target_layout() {
        assert_eq!(stop_targets(3, 5).to_vec(), vec![0.0, 0.0, 1.0, 1.0, 1.0]);
        assert_eq!(stop_targets(1, 1).to_vec(), vec![1.0]);
    }

    #[test]
    fn shape_errors() {
        let y = Array2::zeros((2, 2));
        let st = stop_targets(2, 2);
        assert!(compute_loss(&[y.clone()], &[], &[y.clone()], &[Array1::zeros(2)], &[st.clone()], &[2]).is_err());
        assert!(compute_loss(&[y.clone()], &[y.clone()], &[y], &[Array1::zeros(2)], &[st], &[3]).is_err());
    }
}
