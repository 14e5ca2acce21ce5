//! Training objective: cross-entropy plus the Lovász-Softmax relaxation
//! of the Jaccard loss.
//!
//! Both losses are implemented as kernels that return the value together
//! with the gradient w.r.t. their input, and are exposed in two forms:
//! plain evaluation on tensors, and tape ops for the training graph (the
//! gradient of the Lovász term treats the error sort as fixed at the
//! forward-pass ordering).

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Loss weighting and ignore-class configuration.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossConfig {
    /// Weight of the Lovász term.
    pub lambda: f64,
    /// Class id excluded from the loss and metrics.
    pub ignore_index: u32,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda: 1.0,
            ignore_index: 0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.lambda.is_finite() || self.lambda < 0.0 {
            return Err(Error::config(format!(
                "loss lambda must be finite and >= 0 (got {})",
                self.lambda
            )));
        }
        Ok(())
    }
}

/// Mean negative log-softmax of the labeled class over non-ignored
/// points. Returns the loss and its gradient w.r.t. the logits.
pub fn cross_entropy_kernel<R: Real>(
    logits: &Tensor<R>,
    labels: &[u32],
    ignore_index: u32,
) -> Result<(R, Tensor<R>)> {
    let (n, c) = (logits.rows(), logits.cols());
    if labels.len() != n {
        return Err(Error::shape(format!(
            "{} labels for {n} logit rows",
            labels.len()
        )));
    }
    let scored = labels.iter().filter(|&&y| y != ignore_index).count();
    if scored == 0 {
        return Err(Error::empty("cross entropy with every point ignored"));
    }
    let inv = R::one() / R::from_f64_c(scored as f64);
    let mut total = R::zero();
    let mut grad = Tensor::zeros(&[n, c]);
    for i in 0..n {
        let y = labels[i];
        if y == ignore_index {
            continue;
        }
        if y as usize >= c {
            return Err(Error::arg(format!(
                "label {y} outside the {c} network classes"
            )));
        }
        let row = logits.row(i);
        let max = row.iter().cloned().fold(R::neg_infinity(), R::max);
        let mut sum = R::zero();
        for &v in row {
            sum += (v - max).exp();
        }
        let lse = max + sum.ln();
        total += lse - row[y as usize];
        let grow = grad.row_mut(i);
        for ch in 0..c {
            grow[ch] = (row[ch] - lse).exp() * inv;
        }
        grow[y as usize] -= inv;
    }
    Ok((total * inv, grad))
}

/// Lovász extension of the per-class Jaccard loss over softmax
/// probabilities, averaged over the classes present in the labels.
/// Returns the loss and its gradient w.r.t. `probs` with the sort fixed.
pub fn lovasz_softmax_kernel<R: Real>(
    probs: &Tensor<R>,
    labels: &[u32],
    ignore_index: u32,
) -> Result<(R, Tensor<R>)> {
    let (n, c) = (probs.rows(), probs.cols());
    if labels.len() != n {
        return Err(Error::shape(format!(
            "{} labels for {n} probability rows",
            labels.len()
        )));
    }
    let scored: Vec<usize> = (0..n).filter(|&i| labels[i] != ignore_index).collect();
    if scored.is_empty() {
        return Err(Error::empty("lovasz softmax with every point ignored"));
    }
    // Callers must pass row-stochastic inputs; enforcement leaves slack for
    // finite-difference probes that perturb single coordinates.
    for &i in &scored {
        let row_sum: R = probs.row(i).iter().cloned().sum();
        if (row_sum - R::one()).abs() > R::from_f64_c(1e-4) {
            return Err(Error::arg(format!(
                "probability row {i} sums to {row_sum}, expected 1"
            )));
        }
        if labels[i] as usize >= c {
            return Err(Error::arg(format!(
                "label {} outside the {c} network classes",
                labels[i]
            )));
        }
    }
    let mut present: Vec<u32> = scored.iter().map(|&i| labels[i]).collect();
    present.sort_unstable();
    present.dedup();

    let mut total = R::zero();
    let mut grad = Tensor::zeros(&[n, c]);
    for &class in &present {
        let ch = class as usize;
        // Prediction errors for this class over the scored points.
        let mut order: Vec<(R, usize)> = scored
            .iter()
            .map(|&i| {
                let p = probs.at2(i, ch);
                let m = if labels[i] == class { R::one() - p } else { p };
                (m, i)
            })
            .collect();
        // Descending by error, ties by ascending point index.
        order.sort_by(|a, b| {
            b.0.partial_cmp(&a.0)
                .expect("finite errors")
                .then(a.1.cmp(&b.1))
        });
        // Gradient of the Jaccard extension along the sorted ground truth.
        let gts = scored.iter().filter(|&&i| labels[i] == class).count();
        let mut intersection = gts as i64;
        let mut union = gts as i64;
        let mut prev_jaccard = R::zero();
        for &(m, i) in &order {
            if labels[i] == class {
                intersection -= 1;
            } else {
                union += 1;
            }
            let jaccard =
                R::one() - R::from_f64_c(intersection as f64) / R::from_f64_c(union as f64);
            let weight = jaccard - prev_jaccard;
            prev_jaccard = jaccard;
            total += m * weight;
            let sign = if labels[i] == class { -R::one() } else { R::one() };
            grad.row_mut(i)[ch] += sign * weight;
        }
    }
    let inv = R::one() / R::from_f64_c(present.len() as f64);
    for g in grad.data_mut() {
        *g *= inv;
    }
    Ok((total * inv, grad))
}

/// Plain cross-entropy evaluation.
pub fn cross_entropy<R: Real>(logits: &Tensor<R>, labels: &[u32], cfg: &LossConfig) -> Result<R> {
    cross_entropy_kernel(logits, labels, cfg.ignore_index).map(|(v, _)| v)
}

/// Plain Lovász-Softmax evaluation on probabilities.
pub fn lovasz_softmax<R: Real>(probs: &Tensor<R>, labels: &[u32], cfg: &LossConfig) -> Result<R> {
    lovasz_softmax_kernel(probs, labels, cfg.ignore_index).map(|(v, _)| v)
}

/// Differentiable cross-entropy node on a tape.
pub fn tape_cross_entropy<R: Real>(
    tape: &mut Tape<R>,
    logits: Var,
    labels: &[u32],
    cfg: &LossConfig,
) -> Result<Var> {
    let (value, grad) = cross_entropy_kernel(tape.value(logits), labels, cfg.ignore_index)?;
    tape.precomputed_scalar(logits, value, grad)
}

/// Differentiable Lovász-Softmax node on softmax probabilities.
pub fn tape_lovasz_softmax<R: Real>(
    tape: &mut Tape<R>,
    probs: Var,
    labels: &[u32],
    cfg: &LossConfig,
) -> Result<Var> {
    let (value, grad) = lovasz_softmax_kernel(tape.value(probs), labels, cfg.ignore_index)?;
    tape.precomputed_scalar(probs, value, grad)
}

/// Combined objective on logits: `CE + lambda * Lovasz(softmax(logits))`.
pub fn tape_total_loss<R: Real>(
    tape: &mut Tape<R>,
    logits: Var,
    labels: &[u32],
    cfg: &LossConfig,
) -> Result<Var> {
    cfg.validate()?;
    let ce = tape_cross_entropy(tape, logits, labels, cfg)?;
    if cfg.lambda == 0.0 {
        return Ok(ce);
    }
    let probs = tape.softmax_rows(logits);
    let lovasz = tape_lovasz_softmax(tape, probs, labels, cfg)?;
    let weighted = tape.scale(lovasz, R::from_f64_c(cfg.lambda));
    tape.add(ce, weighted)
}

/// Plain combined objective evaluation.
pub fn total_loss<R: Real>(logits: &Tensor<R>, labels: &[u32], cfg: &LossConfig) -> Result<R> {
    let mut tape = Tape::new();
    let l = tape.leaf(logits.clone());
    let out = tape_total_loss(&mut tape, l, labels, cfg)?;
    Ok(tape.value(out).item())
}
