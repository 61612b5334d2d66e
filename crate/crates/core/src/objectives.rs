//! Task, stability and adversarial-training losses.
//!
//! The scalar functions operate on a single [`Likelihood`] and serve as the
//! reference definitions. The [`graph`] functions build the same quantities
//! on a tape from batches of logits, averaging over the batch.

use crate::error::{Error, Result};
use crate::tensor::log_softmax_row;

const SUM_TOL: f64 = 1e-6;

/// Class distribution `P(y_j | x)`, held as log-probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct Likelihood {
    log_probs: Vec<f64>,
}

impl Likelihood {
    pub fn from_probs(probs: &[f64]) -> Result<Self> {
        if probs.len() < 2 {
            return Err(Error::invalid("a likelihood needs at least two classes"));
        }
        if let Some(bad) = probs.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::invalid(format!("probability {bad} outside [0, 1]")));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > SUM_TOL {
            return Err(Error::invalid(format!("probabilities sum to {total}, expected 1")));
        }
        Ok(Likelihood {
            log_probs: probs.iter().map(|p| p.ln()).collect(),
        })
    }

    pub fn from_logits(logits: &[f64]) -> Result<Self> {
        if logits.len() < 2 || logits.iter().any(|z| !z.is_finite()) {
            return Err(Error::invalid("logits must be finite with at least two classes"));
        }
        let mut log_probs = vec![0.0; logits.len()];
        log_softmax_row(logits, &mut log_probs);
        Ok(Likelihood { log_probs })
    }

    pub fn len(&self) -> usize {
        self.log_probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.log_probs.is_empty()
    }

    pub fn log_probs(&self) -> &[f64] {
        &self.log_probs
    }

    pub fn probs(&self) -> Vec<f64> {
        self.log_probs.iter().map(|l| l.exp()).collect()
    }
}

/// Hyperparameters of the composite objectives.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StabilityWeights {
    /// Weight of the stability term.
    pub alpha: f64,
    /// Weight of the clean loss in adversarial training.
    pub mu: f64,
    pub symmetric: bool,
}

impl StabilityWeights {
    pub fn validate(&self) -> Result<()> {
        check_alpha(self.alpha)?;
        check_mu(self.mu)
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if alpha.is_nan() || alpha < 0.0 {
        return Err(Error::invalid(format!("alpha must be >= 0, got {alpha}")));
    }
    Ok(())
}

fn check_mu(mu: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&mu) {
        return Err(Error::invalid(format!("mu must lie in [0, 1], got {mu}")));
    }
    Ok(())
}

fn check_pair(p: &Likelihood, q: &Likelihood) -> Result<()> {
    if p.len() != q.len() {
        return Err(Error::Shape {
            op: "kl_divergence",
            lhs: vec![p.len()],
            rhs: vec![q.len()],
        });
    }
    Ok(())
}

/// `-log P(label | x)`.
pub fn cross_entropy(probs: &Likelihood, label: usize) -> Result<f64> {
    let lp = probs
        .log_probs
        .get(label)
        .ok_or_else(|| Error::invalid(format!("label {label} out of range for {} classes", probs.len())))?;
    Ok(-lp + 0.0)
}

/// Cross-entropy straight from logits, accurate even when the loss is far
/// below machine epsilon relative to one.
pub fn cross_entropy_from_logits(logits: &[f64], label: usize) -> Result<f64> {
    let zl = *logits
        .get(label)
        .ok_or_else(|| Error::invalid(format!("label {label} out of range for {} classes", logits.len())))?;
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if zl >= max {
        // log(1 + sum_{j != label} exp(z_j - z_label))
        let rest: f64 = logits
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != label)
            .map(|(_, &z)| (z - zl).exp())
            .sum();
        return Ok(rest.ln_1p());
    }
    let lse = max + logits.iter().map(|&z| (z - max).exp()).sum::<f64>().ln();
    Ok(lse - zl)
}

/// `KL(p || q) = sum_j p_j (log p_j - log q_j)`, with `0 log 0 = 0`.
pub fn kl_divergence(p: &Likelihood, q: &Likelihood) -> Result<f64> {
    check_pair(p, q)?;
    let mut total = 0.0;
    for (&lp, &lq) in p.log_probs.iter().zip(&q.log_probs) {
        if lp == f64::NEG_INFINITY {
            continue;
        }
        total += lp.exp() * (lp - lq);
    }
    Ok(total.max(0.0))
}

/// `(KL(p || q) + KL(q || p)) / 2`, evaluated as
/// `sum_j (p_j - q_j)(log p_j - log q_j) / 2` so swapping the arguments
/// gives bit-identical results.
pub fn sym_kl(p: &Likelihood, q: &Likelihood) -> Result<f64> {
    check_pair(p, q)?;
    let mut total = 0.0;
    for (&lp, &lq) in p.log_probs.iter().zip(&q.log_probs) {
        if lp == lq {
            continue;
        }
        total += (lp.exp() - lq.exp()) * (lp - lq);
    }
    Ok(0.5 * total)
}

/// Divergence between predictions on a clean input and a perturbed copy.
pub fn stability_loss(clean: &Likelihood, perturbed: &Likelihood, symmetric: bool) -> Result<f64> {
    if symmetric {
        sym_kl(clean, perturbed)
    } else {
        kl_divergence(clean, perturbed)
    }
}

/// `task + alpha * stability`.
pub fn combined_loss(task: f64, stability: f64, alpha: f64) -> Result<f64> {
    check_alpha(alpha)?;
    Ok(task + alpha * stability)
}

/// `mu * clean + (1 - mu) * adversarial`.
pub fn adversarial_objective(clean: f64, adversarial: f64, mu: f64) -> Result<f64> {
    check_mu(mu)?;
    Ok(mu * clean + (1.0 - mu) * adversarial)
}

/// Batch versions of the losses, built on a tape from `[N, C]` logits.
pub mod graph {
    use super::{check_alpha, check_mu};
    use crate::autodiff::{Tape, Var};
    use crate::error::{Error, Result};
    use crate::tensor::{Scalar, Tensor};

    /// Mean cross-entropy over the batch.
    pub fn cross_entropy<T: Scalar>(tape: &mut Tape<T>, logits: Var, labels: &[usize]) -> Result<Var> {
        let shape = tape.shape(logits).to_vec();
        if shape.len() != 2 || shape[0] != labels.len() {
            return Err(Error::Shape {
                op: "cross_entropy",
                lhs: shape,
                rhs: vec![labels.len()],
            });
        }
        let classes = shape[1];
        let mut onehot = Tensor::<T>::zeros(shape.clone());
        for (i, &l) in labels.iter().enumerate() {
            if l >= classes {
                return Err(Error::invalid(format!("label {l} out of range for {classes} classes")));
            }
            onehot.data_mut()[i * classes + l] = T::one();
        }
        let logp = tape.log_softmax(logits)?;
        let mask = tape.constant(onehot);
        let picked = tape.mul(logp, mask)?;
        let total = tape.sum(picked);
        Ok(tape.scale(total, T::of(-1.0 / labels.len() as f64)))
    }

    /// Mean per-sample divergence between `softmax(clean)` and
    /// `softmax(perturbed)`. Gradients reach both branches unless
    /// `stop_clean` detaches the clean logits.
    pub fn stability<T: Scalar>(
        tape: &mut Tape<T>,
        clean: Var,
        perturbed: Var,
        symmetric: bool,
        stop_clean: bool,
    ) -> Result<Var> {
        let shape = tape.shape(clean).to_vec();
        if shape.len() != 2 || tape.shape(perturbed) != shape.as_slice() {
            return Err(Error::Shape {
                op: "stability_loss",
                lhs: shape,
                rhs: tape.shape(perturbed).to_vec(),
            });
        }
        let clean = if stop_clean { tape.detach(clean) } else { clean };
        let logp = tape.log_softmax(clean)?;
        let logq = tape.log_softmax(perturbed)?;
        let diff = tape.sub(logp, logq)?;
        let p = tape.exp(logp);
        let (weight, half) = if symmetric {
            let q = tape.exp(logq);
            (tape.sub(p, q)?, 0.5)
        } else {
            (p, 1.0)
        };
        let terms = tape.mul(weight, diff)?;
        let total = tape.sum(terms);
        Ok(tape.scale(total, T::of(half / shape[0] as f64)))
    }

    pub fn combined<T: Scalar>(tape: &mut Tape<T>, task: Var, stability: Var, alpha: f64) -> Result<Var> {
        check_alpha(alpha)?;
        let weighted = tape.scale(stability, T::of(alpha));
        tape.add(task, weighted)
    }

    pub fn adversarial<T: Scalar>(tape: &mut Tape<T>, clean: Var, adversarial: Var, mu: f64) -> Result<Var> {
        check_mu(mu)?;
        let a = tape.scale(clean, T::of(mu));
        let b = tape.scale(adversarial, T::of(1.0 - mu));
        tape.add(a, b)
    }
}
