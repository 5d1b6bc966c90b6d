//! Count-based objectives for LLP, MIL and PU learning, each returning the
//! loss and its gradient with respect to the per-instance log probabilities.
//!
//! | setting   | weak label             | loss                                         |
//! |-----------|------------------------|----------------------------------------------|
//! | LLP       | proportion `y~`        | `-log p(sum y_i = k y~)`                     |
//! | MIL       | bag label `y~`         | `-y~ log p(sum >= 1) - (1-y~) log p(sum = 0)` |
//! | PU (KL)   | mixture proportion `b` | `KL(Bin(k, b) || p(sum y_i))`                |
//! | PU (mean) | mixture proportion `b` | `-log p(sum y_i = round(k b))`               |
//!
//! When a target count has probability exactly zero the loss is capped at
//! `-ln(LOSS_CAP_EPS)` and [`LossValue::capped`] is set.

use serde::{Deserialize, Serialize};
use statrs::function::factorial::ln_binomial;

use crate::countdp::{
    backward_count, count_log_prob_with_grad, forward_count, log1mexp, CountGradient,
    InstanceScores,
};
use crate::error::{Error, Result};

/// Probability floor used when a loss would be infinite.
pub const LOSS_CAP_EPS: f64 = 1e-12;

/// Tolerance on `k * proportion` being an integer.
pub const COUNT_INTEGRALITY_TOL: f64 = 1e-6;

pub fn loss_cap() -> f64 {
    -LOSS_CAP_EPS.ln()
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossValue {
    pub loss: f64,
    /// d loss / d t_i
    pub grad: CountGradient,
    /// Set when the exact loss was infinite and [`loss_cap`] was returned.
    pub capped: bool,
}

impl LossValue {
    fn capped(k: usize) -> Self {
        LossValue {
            loss: loss_cap(),
            grad: CountGradient::zeros(k),
            capped: true,
        }
    }

    pub fn scaled(mut self, weight: f64) -> Self {
        self.loss *= weight;
        self.grad = self.grad.scale(weight);
        self
    }
}

/// Rounds `k * fraction` to the nearest count, ties to even.
pub fn target_count(k: usize, fraction: f64) -> usize {
    (k as f64 * fraction).round_ties_even() as usize
}

fn negative_log_count(scores: &InstanceScores, s: usize) -> Result<LossValue> {
    let (lp, grad) = count_log_prob_with_grad(scores, s)?;
    if lp == f64::NEG_INFINITY {
        return Ok(LossValue::capped(scores.k()));
    }
    Ok(LossValue {
        loss: (-lp).max(0.0),
        grad: grad.scale(-1.0),
        capped: false,
    })
}

/// `-log p(sum y_i = k * proportion)`.
pub fn llp_loss(scores: &InstanceScores, proportion: f64) -> Result<LossValue> {
    if !(0.0..=1.0).contains(&proportion) {
        return Err(Error::arg(format!(
            "proportion {proportion} outside [0, 1]"
        )));
    }
    let k = scores.k();
    let exact = k as f64 * proportion;
    if (exact - exact.round_ties_even()).abs() > COUNT_INTEGRALITY_TOL {
        return Err(Error::arg(format!(
            "proportion {proportion} does not give an integer count for k = {k}"
        )));
    }
    negative_log_count(scores, target_count(k, proportion))
}

/// Bag-level cross entropy from a lattice truncated at `s_max = 0`.
///
/// `p(sum >= 1)` is taken as `1 - p(sum = 0)` from the same pass.
pub fn mil_loss(scores: &InstanceScores, bag_label: bool) -> Result<LossValue> {
    let k = scores.k();
    let table = forward_count(scores, 0)?;
    let l0 = table.get(k, 0);
    let (loss, seed) = if bag_label {
        if l0 == 0.0 {
            return Ok(LossValue::capped(k));
        }
        let l_any = log1mexp(l0)?;
        // d(-log(1 - e^l0)) / d l0 = e^l0 / (1 - e^l0)
        (-l_any, (l0 - l_any).exp())
    } else {
        if l0 == f64::NEG_INFINITY {
            return Ok(LossValue::capped(k));
        }
        (-l0, -1.0)
    };
    let grad = backward_count(&table, scores, &[seed])?;
    Ok(LossValue {
        loss: loss.max(0.0),
        grad,
        capped: false,
    })
}

/// `log Bin(s; k, beta)` with `0 * log 0 = 0`. Returns `-inf` for `s > k`.
pub fn binomial_log_pmf(k: usize, beta: f64, s: usize) -> f64 {
    if s > k {
        return f64::NEG_INFINITY;
    }
    if !(0.0..=1.0).contains(&beta) {
        return f64::NAN;
    }
    let term = |count: usize, p: f64| {
        if count == 0 {
            0.0
        } else {
            count as f64 * p.ln()
        }
    };
    ln_binomial(k as u64, s as u64) + term(s, beta) + term(k - s, 1.0 - beta)
}

/// `KL(Bin(k, beta) || p(sum y_i))` from one full `O(k^2)` lattice.
///
/// If the model assigns zero probability to a count the binomial supports,
/// the loss is capped but the gradient of the finite terms is kept.
pub fn pu_kl_loss(scores: &InstanceScores, beta: f64) -> Result<LossValue> {
    if !(beta > 0.0 && beta < 1.0) {
        return Err(Error::arg(format!(
            "mixture proportion {beta} outside (0, 1)"
        )));
    }
    let k = scores.k();
    let table = forward_count(scores, k)?;
    let logp = table.last_row();
    let mut seed = vec![0.0; k + 1];
    let mut loss = 0.0;
    let mut infinite = false;
    for (s, &lp) in logp.iter().enumerate() {
        let log_bin = binomial_log_pmf(k, beta, s);
        let bin = log_bin.exp();
        if bin == 0.0 {
            continue;
        }
        if lp == f64::NEG_INFINITY {
            infinite = true;
            continue;
        }
        loss += bin * (log_bin - lp);
        seed[s] = -bin;
    }
    let grad = backward_count(&table, scores, &seed)?;
    Ok(LossValue {
        loss: if infinite { loss_cap() } else { loss.max(0.0) },
        grad,
        capped: infinite,
    })
}

/// `-log p(sum y_i = round(k * beta))`: matches only the binomial mean.
pub fn pu_expect_loss(scores: &InstanceScores, beta: f64) -> Result<LossValue> {
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::arg(format!(
            "mixture proportion {beta} outside [0, 1]"
        )));
    }
    negative_log_count(scores, target_count(scores.k(), beta))
}

/// Mean cross entropy over instances that all carry positive labels.
pub fn positive_ce_loss(scores: &InstanceScores) -> LossValue {
    let k = scores.k();
    let t = scores.log_probs();
    let sum: f64 = t.iter().sum();
    if sum == f64::NEG_INFINITY {
        return LossValue::capped(k);
    }
    LossValue {
        loss: (-sum / k as f64).max(0.0),
        grad: CountGradient::new(vec![-1.0 / k as f64; k]),
        capped: false,
    }
}

/// Class prior, label frequency and the implied positive rate among
/// unlabeled instances.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixtureEstimate {
    /// p(y = 1)
    pub alpha: f64,
    /// p(labeled | y = 1)
    pub c: f64,
    /// p(y = 1 | unlabeled)
    pub beta: f64,
}

/// Under SCAR, `c = p(labeled) / alpha` and `beta = (1 - c) alpha / (1 - alpha c)`.
pub fn estimate_mixture_proportion(alpha: f64, labeled_fraction: f64) -> Result<MixtureEstimate> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::arg(format!("class prior {alpha} outside (0, 1)")));
    }
    if !(labeled_fraction > 0.0) {
        return Err(Error::arg(format!(
            "labeled fraction {labeled_fraction} must be positive"
        )));
    }
    if labeled_fraction > alpha {
        return Err(Error::InconsistentPrior {
            alpha,
            labeled_fraction,
        });
    }
    let c = labeled_fraction / alpha;
    let beta = (1.0 - c) * alpha / (1.0 - alpha * c);
    Ok(MixtureEstimate { alpha, c, beta })
}
