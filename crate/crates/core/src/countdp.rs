//! Exact count probabilities over independent Bernoulli predictions.
//!
//! Given per-instance log probabilities `t_i = log p(y_i = 1)`, the lattice
//! `a[i][m] = log p(y_1 + ... + y_i = m)` is filled row by row with
//!
//! ```text
//! a[i][m] = logsumexp(a[i-1][m-1] + t_i, a[i-1][m] + t'_i),   t'_i = log(1 - exp(t_i))
//! ```
//!
//! starting from `a[0][0] = 0`. Truncating the lattice at column `s_max`
//! costs `O(k * s_max)` cell updates; the full distribution costs `O(k^2)`.
//! Everything stays in log space, with `f64::NEG_INFINITY` standing for an
//! impossible count.
//!
//! [`backward_count`] runs the recurrence in reverse to obtain the gradient of
//! any linear functional of the last row with respect to every `t_i`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;

const NEG_INF: f64 = f64::NEG_INFINITY;

/// `log(1 - exp(x))` for `x < 0`.
///
/// Uses `log(-expm1(x))` above `-ln 2` and `log1p(-exp(x))` below it, which
/// keeps full relative precision on both sides.
pub fn log1mexp(x: f64) -> Result<f64> {
    if x.is_nan() || x >= 0.0 {
        return Err(Error::Domain(x));
    }
    Ok(log1mexp_unchecked(x))
}

#[inline]
fn log1mexp_unchecked(x: f64) -> f64 {
    if x > -std::f64::consts::LN_2 {
        (-x.exp_m1()).ln()
    } else {
        (-x.exp()).ln_1p()
    }
}

/// `log(exp(a) + exp(b))`. Either argument may be `-inf`.
#[inline]
pub fn logsumexp2(a: f64, b: f64) -> f64 {
    if a == NEG_INF {
        return b;
    }
    if b == NEG_INF {
        return a;
    }
    a.max(b) + (-(a - b).abs()).exp().ln_1p()
}

/// Stable `log(sum(exp(values)))`, summed in slice order. Empty input gives `-inf`.
pub fn logsumexp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(NEG_INF, f64::max);
    if max == NEG_INF {
        return NEG_INF;
    }
    if max == f64::INFINITY {
        return f64::INFINITY;
    }
    let sum: f64 = values.iter().map(|&v| (v - max).exp()).sum();
    max + sum.ln()
}

/// A validated log probability: `<= 0`, finite or exactly `-inf`.
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd, Serialize, Deserialize)]
pub struct LogProb(f64);

impl LogProb {
    pub const ONE: LogProb = LogProb(0.0);
    pub const ZERO: LogProb = LogProb(NEG_INF);

    pub fn new(value: f64) -> Result<Self> {
        if value.is_nan() || value > 0.0 || value == f64::INFINITY {
            return Err(Error::arg(format!("{value} is not a log probability")));
        }
        Ok(LogProb(value))
    }

    pub fn from_prob(p: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::arg(format!("{p} is not a probability")));
        }
        Ok(LogProb(p.ln()))
    }

    pub fn get(self) -> f64 {
        self.0
    }

    pub fn prob(self) -> f64 {
        self.0.exp()
    }
}

impl From<LogProb> for f64 {
    fn from(lp: LogProb) -> f64 {
        lp.0
    }
}

/// Per-instance log success probabilities for one bag, with cached complements.
#[derive(Clone, Debug, PartialEq)]
pub struct InstanceScores {
    t: Vec<f64>,
    t_complement: Vec<f64>,
}

impl InstanceScores {
    /// Builds scores from `t_i = log p(y_i = 1)`.
    pub fn new(log_probs: Vec<f64>) -> Result<Self> {
        if log_probs.is_empty() {
            return Err(Error::arg("a bag needs at least one instance"));
        }
        let mut t_complement = Vec::with_capacity(log_probs.len());
        for &t in &log_probs {
            LogProb::new(t)?;
            t_complement.push(if t == 0.0 {
                NEG_INF
            } else {
                log1mexp_unchecked(t)
            });
        }
        Ok(InstanceScores {
            t: log_probs,
            t_complement,
        })
    }

    pub fn from_log_probs(log_probs: &[f64]) -> Result<Self> {
        Self::new(log_probs.to_vec())
    }

    /// Builds scores from probabilities in `[0, 1]`; complements use `log1p(-p)`.
    pub fn from_probs(probs: &[f64]) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::arg("a bag needs at least one instance"));
        }
        let mut t = Vec::with_capacity(probs.len());
        let mut t_complement = Vec::with_capacity(probs.len());
        for &p in probs {
            t.push(LogProb::from_prob(p)?.get());
            t_complement.push((-p).ln_1p());
        }
        Ok(InstanceScores { t, t_complement })
    }

    pub fn k(&self) -> usize {
        self.t.len()
    }

    pub fn log_probs(&self) -> &[f64] {
        &self.t
    }

    pub fn log_complements(&self) -> &[f64] {
        &self.t_complement
    }
}

/// The `(k + 1) x (s_max + 1)` lattice of partial-sum log probabilities.
#[derive(Clone, Debug, PartialEq)]
pub struct CountTable {
    a: Vec<f64>,
    k: usize,
    s_max: usize,
}

impl CountTable {
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn s_max(&self) -> usize {
        self.s_max
    }

    fn width(&self) -> usize {
        self.s_max + 1
    }

    /// `log p(y_1 + ... + y_i = m)`.
    pub fn get(&self, i: usize, m: usize) -> f64 {
        assert!(
            i <= self.k && m <= self.s_max,
            "cell ({i}, {m}) outside lattice"
        );
        self.a[i * self.width() + m]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let w = self.width();
        &self.a[i * w..(i + 1) * w]
    }

    pub fn last_row(&self) -> &[f64] {
        self.row(self.k)
    }
}

/// `log p(sum y_i = s)` for `s = 0..=k`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CountDistribution {
    logp: Vec<f64>,
}

impl CountDistribution {
    pub fn k(&self) -> usize {
        self.logp.len() - 1
    }

    pub fn log_probs(&self) -> &[f64] {
        &self.logp
    }

    pub fn probs(&self) -> Vec<f64> {
        self.logp.iter().map(|l| l.exp()).collect()
    }

    /// Expected count `sum_s s * p(s)`.
    pub fn mean(&self) -> f64 {
        self.logp
            .iter()
            .enumerate()
            .map(|(s, l)| s as f64 * l.exp())
            .sum()
    }
}

/// Gradient of a scalar target with respect to each `t_i`.
#[derive(Clone, Debug, PartialEq)]
pub struct CountGradient {
    d_t: Vec<f64>,
}

impl CountGradient {
    pub fn new(d_t: Vec<f64>) -> Self {
        CountGradient { d_t }
    }

    pub fn zeros(k: usize) -> Self {
        CountGradient { d_t: vec![0.0; k] }
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.d_t
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.d_t
    }

    pub fn scale(mut self, factor: f64) -> Self {
        self.d_t.iter_mut().for_each(|g| *g *= factor);
        self
    }
}

/// Fills the lattice up to column `s_max`.
pub fn forward_count(scores: &InstanceScores, s_max: usize) -> Result<CountTable> {
    let k = scores.k();
    if s_max > k {
        return Err(Error::arg(format!("s_max = {s_max} exceeds k = {k}")));
    }
    let width = s_max + 1;
    let mut a = vec![NEG_INF; (k + 1) * width];
    a[0] = 0.0;
    for i in 1..=k {
        let t = scores.t[i - 1];
        let tc = scores.t_complement[i - 1];
        let (done, rest) = a.split_at_mut(i * width);
        let prev = &done[(i - 1) * width..];
        let cur = &mut rest[..width];
        // Columns above i stay at -inf: fewer than m instances cannot sum to m.
        let reach = i.min(s_max);
        cur[0] = prev[0] + tc;
        for m in 1..=reach {
            cur[m] = logsumexp2(prev[m - 1] + t, prev[m] + tc);
        }
    }
    Ok(CountTable { a, k, s_max })
}

/// `log p(sum y_i = s)` in `O(k * s)`.
pub fn count_log_prob(scores: &InstanceScores, s: usize) -> Result<f64> {
    let table = forward_count(scores, s)?;
    Ok(table.get(table.k, s))
}

/// All `k + 1` count log probabilities from one `O(k^2)` pass.
pub fn count_distribution(scores: &InstanceScores) -> CountDistribution {
    let table = forward_count(scores, scores.k()).expect("s_max = k is always valid");
    CountDistribution {
        logp: table.last_row().to_vec(),
    }
}

/// `log p(s1 <= sum y_i <= s2)`, using a lattice truncated at `s2`.
pub fn interval_log_prob(scores: &InstanceScores, s1: usize, s2: usize) -> Result<f64> {
    let k = scores.k();
    if s1 > s2 || s2 > k {
        return Err(Error::arg(format!(
            "interval [{s1}, {s2}] is not inside [0, {k}]"
        )));
    }
    let table = forward_count(scores, s2)?;
    Ok(logsumexp(&table.last_row()[s1..=s2]))
}

/// Gradient of `sum_s seed[s] * a[k][s]` with respect to each `t_i`.
///
/// Sweeps the lattice from row `k` back to row 0. A cell's adjoint is split
/// between its two parents in proportion to their share of the cell's
/// probability mass. Adjoint flowing into `t'_i` is pushed onto `t_i` with
/// `dt'_i/dt_i = -exp(t_i - t'_i)`. Cells at `-inf` pass no adjoint.
pub fn backward_count(
    table: &CountTable,
    scores: &InstanceScores,
    seed: &[f64],
) -> Result<CountGradient> {
    let k = table.k;
    if scores.k() != k {
        return Err(Error::arg(format!(
            "table has k = {k} but scores have k = {}",
            scores.k()
        )));
    }
    let width = table.width();
    if seed.len() != width {
        return Err(Error::arg(format!(
            "seed has length {} but the lattice row has {width} entries",
            seed.len()
        )));
    }

    let mut adj_cur = seed.to_vec();
    let mut adj_prev = vec![0.0; width];
    let mut d_t = vec![0.0; k];
    for i in (1..=k).rev() {
        adj_prev.iter_mut().for_each(|x| *x = 0.0);
        let t = scores.t[i - 1];
        let tc = scores.t_complement[i - 1];
        let cur = table.row(i);
        let prev = table.row(i - 1);
        let mut g_plus = 0.0;
        let mut g_minus = 0.0;
        for m in 0..width {
            let adj = adj_cur[m];
            let out = cur[m];
            if adj == 0.0 || out == NEG_INF {
                continue;
            }
            if m > 0 {
                let plus = prev[m - 1] + t;
                if plus != NEG_INF {
                    let g = adj * (plus - out).exp();
                    g_plus += g;
                    adj_prev[m - 1] += g;
                }
            }
            let minus = prev[m] + tc;
            if minus != NEG_INF {
                let g = adj * (minus - out).exp();
                g_minus += g;
                adj_prev[m] += g;
            }
        }
        d_t[i - 1] = g_plus;
        if g_minus != 0.0 {
            d_t[i - 1] -= (t - tc).exp() * g_minus;
        }
        std::mem::swap(&mut adj_cur, &mut adj_prev);
    }
    Ok(CountGradient { d_t })
}

/// `log p(sum y_i = s)` together with its gradient.
pub fn count_log_prob_with_grad(scores: &InstanceScores, s: usize) -> Result<(f64, CountGradient)> {
    let table = forward_count(scores, s)?;
    let mut seed = vec![0.0; s + 1];
    seed[s] = 1.0;
    let grad = backward_count(&table, scores, &seed)?;
    Ok((table.get(table.k, s), grad))
}

/// Count distributions for many bags, evaluated on the rayon pool when the
/// `parallel` feature is on. Output order matches input order.
pub fn batch_count_distributions(bags: &[InstanceScores]) -> Vec<CountDistribution> {
    par::map_slice(bags, count_distribution)
}

/// Sequential reference for [`batch_count_distributions`].
pub fn batch_count_distributions_sequential(bags: &[InstanceScores]) -> Vec<CountDistribution> {
    bags.iter().map(count_distribution).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fig2() -> InstanceScores {
        InstanceScores::from_probs(&[0.1, 0.2, 0.3]).unwrap()
    }

    #[test]
    fn log1mexp_examples() {
        assert!((log1mexp(0.5f64.ln()).unwrap() - 0.5f64.ln()).abs() < 1e-15);
        assert_eq!(log1mexp(NEG_INF).unwrap(), 0.0);
        // extended-precision reference: -27.631021115929048208...
        let v = log1mexp(-1e-12).unwrap();
        assert!((v - (-27.631_021_115_929_048)).abs() < 1e-9, "{v}");
    }

    #[test]
    fn log1mexp_rejects_non_negative() {
        assert!(matches!(log1mexp(0.0), Err(Error::Domain(_))));
        assert!(matches!(log1mexp(1e-300), Err(Error::Domain(_))));
        assert!(log1mexp(f64::NAN).is_err());
    }

    #[test]
    fn log1mexp_branches_agree_near_switch() {
        let x = -std::f64::consts::LN_2;
        let lo = (-(x - 1e-12f64).exp()).ln_1p();
        let hi = (-(x + 1e-12f64).exp_m1()).ln();
        assert!((log1mexp(x - 1e-12).unwrap() - lo).abs() < 1e-15);
        assert!((log1mexp(x + 1e-12).unwrap() - hi).abs() < 1e-15);
        assert!((lo - hi).abs() < 1e-11);
    }

    #[test]
    fn logsumexp2_examples() {
        assert!((logsumexp2(0.3f64.ln(), 0.2f64.ln()) - 0.5f64.ln()).abs() < 1e-15);
        assert_eq!(logsumexp2(NEG_INF, NEG_INF), NEG_INF);
        assert_eq!(logsumexp2(NEG_INF, -3.0), -3.0);
        assert_eq!(logsumexp2(-3.0, NEG_INF), -3.0);
        let v = logsumexp2(-1000.0, -1000.0);
        assert!((v - (-999.306_852_819_44)).abs() < 1e-12, "{v}");
    }

    #[test]
    fn forward_fig2_rows() {
        let table = forward_count(&fig2(), 3).unwrap();
        let expected = [0.504, 0.398, 0.092, 0.006];
        for (got, want) in table.last_row().iter().zip(expected) {
            assert!((got.exp() - want).abs() < 1e-12);
        }
        assert_eq!(table.get(0, 0), 0.0);
        assert!(table.row(0)[1..].iter().all(|&v| v == NEG_INF));
    }

    #[test]
    fn forward_single_and_fair_coins() {
        let q = 0.37;
        let table = forward_count(&InstanceScores::from_probs(&[q]).unwrap(), 1).unwrap();
        assert!((table.get(1, 0) - (1.0f64 - q).ln()).abs() < 1e-15);
        assert!((table.get(1, 1) - q.ln()).abs() < 1e-15);

        let table = forward_count(&InstanceScores::from_probs(&[0.5, 0.5]).unwrap(), 2).unwrap();
        let want = [0.25, 0.5, 0.25];
        for (got, w) in table.last_row().iter().zip(want) {
            assert!((got - f64::ln(w)).abs() < 1e-15);
        }
    }

    #[test]
    fn forward_rejects_s_max_above_k() {
        assert!(matches!(forward_count(&fig2(), 4), Err(Error::Argument(_))));
    }

    #[test]
    fn forward_is_bit_deterministic() {
        let scores = InstanceScores::from_probs(&[0.11, 0.93, 0.5, 0.02, 0.7]).unwrap();
        let a = forward_count(&scores, 5).unwrap();
        let b = forward_count(&scores, 5).unwrap();
        for (x, y) in a.a.iter().zip(&b.a) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn truncated_lattice_matches_full_prefix() {
        let scores = InstanceScores::from_probs(&[0.11, 0.93, 0.5, 0.02, 0.7]).unwrap();
        let full = forward_count(&scores, 5).unwrap();
        let cut = forward_count(&scores, 2).unwrap();
        for i in 0..=5 {
            assert_eq!(&full.row(i)[..3], cut.row(i));
        }
    }

    #[test]
    fn count_log_prob_examples() {
        assert!((count_log_prob(&fig2(), 2).unwrap() - 0.092f64.ln()).abs() < 1e-12);
        let q = 0.42;
        let single = InstanceScores::from_probs(&[q]).unwrap();
        assert!((count_log_prob(&single, 1).unwrap() - q.ln()).abs() < 1e-15);
        let coins = InstanceScores::from_probs(&[0.5; 10]).unwrap();
        let v = count_log_prob(&coins, 3).unwrap();
        assert!((v - (120.0f64 / 1024.0).ln()).abs() < 1e-12);
        assert!(count_log_prob(&coins, 11).is_err());
    }

    #[test]
    fn count_distribution_examples() {
        let d = count_distribution(&fig2());
        assert_eq!(d.k(), 3);
        for (got, want) in d.probs().iter().zip([0.504, 0.398, 0.092, 0.006]) {
            assert!((got - want).abs() < 1e-12);
        }
        let d = count_distribution(&InstanceScores::from_probs(&[0.7]).unwrap());
        assert!((d.probs()[0] - 0.3).abs() < 1e-15);
        assert!((d.probs()[1] - 0.7).abs() < 1e-15);
        assert!((d.mean() - 0.7).abs() < 1e-15);
    }

    #[test]
    fn certain_instances_give_point_masses() {
        let d = count_distribution(&InstanceScores::from_probs(&[1.0, 1.0, 0.0]).unwrap());
        assert_eq!(d.log_probs(), &[NEG_INF, NEG_INF, 0.0, NEG_INF]);
    }

    #[test]
    fn interval_examples() {
        let v = interval_log_prob(&fig2(), 1, 3).unwrap();
        assert!((v.exp() - 0.496).abs() < 1e-12);
        assert!(interval_log_prob(&fig2(), 0, 3).unwrap().abs() < 1e-12);
        assert_eq!(
            interval_log_prob(&fig2(), 2, 2).unwrap(),
            count_log_prob(&fig2(), 2).unwrap()
        );
        assert!(interval_log_prob(&fig2(), 2, 1).is_err());
        assert!(interval_log_prob(&fig2(), 0, 4).is_err());
    }

    #[test]
    fn backward_single_instance_is_identity() {
        let scores = InstanceScores::from_probs(&[0.3]).unwrap();
        let table = forward_count(&scores, 1).unwrap();
        let g = backward_count(&table, &scores, &[0.0, 1.0]).unwrap();
        assert_eq!(g.as_slice(), &[1.0]);
    }

    #[test]
    fn backward_zero_count_closed_form() {
        // log p(sum = 0) = sum_j t'_j, so d/dt_i = -exp(t_i) / (1 - exp(t_i))
        let probs = [0.1, 0.2, 0.3, 0.9];
        let scores = InstanceScores::from_probs(&probs).unwrap();
        let table = forward_count(&scores, 0).unwrap();
        let g = backward_count(&table, &scores, &[1.0]).unwrap();
        for (gi, p) in g.as_slice().iter().zip(probs) {
            assert!((gi - (-p / (1.0 - p))).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_matches_central_differences_on_fig2() {
        let scores = fig2();
        let (_, g) = count_log_prob_with_grad(&scores, 2).unwrap();
        let h = 1e-5;
        let base = scores.log_probs().to_vec();
        for i in 0..3 {
            let mut up = base.clone();
            let mut dn = base.clone();
            up[i] += h;
            dn[i] -= h;
            let f = |t: Vec<f64>| count_log_prob(&InstanceScores::new(t).unwrap(), 2).unwrap();
            let fd = (f(up) - f(dn)) / (2.0 * h);
            assert!((fd - g.as_slice()[i]).abs() < 1e-5);
        }
    }

    #[test]
    fn backward_checks_shapes() {
        let scores = fig2();
        let table = forward_count(&scores, 2).unwrap();
        assert!(backward_count(&table, &scores, &[1.0, 0.0]).is_err());
        let other = InstanceScores::from_probs(&[0.5, 0.5]).unwrap();
        assert!(backward_count(&table, &other, &[0.0, 0.0, 1.0]).is_err());
    }

    #[test]
    fn backward_through_impossible_cells_is_finite() {
        let scores = InstanceScores::from_probs(&[1.0, 0.4, 0.0]).unwrap();
        let table = forward_count(&scores, 3).unwrap();
        let g = backward_count(&table, &scores, &[1.0, 1.0, 1.0, 1.0]).unwrap();
        assert!(g.as_slice().iter().all(|x| x.is_finite()));
    }

    #[test]
    fn scores_validate_inputs() {
        assert!(InstanceScores::new(vec![]).is_err());
        assert!(InstanceScores::new(vec![0.1]).is_err());
        assert!(InstanceScores::new(vec![f64::NAN]).is_err());
        assert!(InstanceScores::from_probs(&[1.5]).is_err());
        let s = InstanceScores::new(vec![0.0, NEG_INF, -0.5]).unwrap();
        assert_eq!(s.log_complements()[0], NEG_INF);
        assert_eq!(s.log_complements()[1], 0.0);
        for (t, tc) in s.log_probs().iter().zip(s.log_complements()) {
            assert!((t.exp() + tc.exp() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn batch_matches_sequential() {
        let bags: Vec<_> = (1..20)
            .map(|k| {
                let p: Vec<f64> = (0..k)
                    .map(|j| (j as f64 + 0.5) / (k as f64 + 1.0))
                    .collect();
                InstanceScores::from_probs(&p).unwrap()
            })
            .collect();
        assert_eq!(
            batch_count_distributions(&bags),
            batch_count_distributions_sequential(&bags)
        );
    }
}
