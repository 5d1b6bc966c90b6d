//! Brute-force references for the count lattice.
//!
//! These never touch `countdp`: the distribution is obtained by enumerating
//! all `2^k` labelings in plain probability space, and gradients by central
//! differences of an arbitrary scalar function.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::countdp::{count_distribution, InstanceScores};
use crate::error::{Error, Result};
use crate::par;

/// Largest bag the enumerator accepts.
pub const MAX_ENUMERATION_K: usize = 20;

// Bitmasks are summed per fixed-size chunk, then chunks in ascending order,
// so the result does not depend on how chunks are scheduled.
const CHUNK: usize = 1 << 12;

/// `p(sum y_i = s)` for `s = 0..=k` by summing over every labeling.
pub fn brute_force_count_distribution(probs: &[f64]) -> Result<Vec<f64>> {
    let k = probs.len();
    if k > MAX_ENUMERATION_K {
        return Err(Error::OracleTooLarge {
            k,
            limit: MAX_ENUMERATION_K,
        });
    }
    if let Some(p) = probs.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(Error::arg(format!("{p} is not a probability")));
    }
    let total = 1usize << k;
    let chunks = total.div_ceil(CHUNK);
    let partials = par::map_range(chunks, |c| {
        let mut bins = vec![0.0; k + 1];
        let start = c * CHUNK;
        let end = (start + CHUNK).min(total);
        for mask in start..end {
            let mut weight = 1.0;
            for (i, &p) in probs.iter().enumerate() {
                weight *= if mask >> i & 1 == 1 { p } else { 1.0 - p };
            }
            bins[mask.count_ones() as usize] += weight;
        }
        bins
    });
    let mut dist = vec![0.0; k + 1];
    for bins in partials {
        for (d, b) in dist.iter_mut().zip(bins) {
            *d += b;
        }
    }
    Ok(dist)
}

/// Central differences `(f(t + h e_i) - f(t - h e_i)) / 2h` per coordinate.
pub fn finite_diff_gradient<F>(f: F, t: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> Result<f64>,
{
    if !(h > 0.0) {
        return Err(Error::arg(format!("step h = {h} must be positive")));
    }
    let mut point = t.to_vec();
    let mut grad = Vec::with_capacity(t.len());
    for i in 0..t.len() {
        let orig = point[i];
        point[i] = orig + h;
        let up = f(&point).map_err(|_| Error::NonFinite { coordinate: i })?;
        point[i] = orig - h;
        let down = f(&point).map_err(|_| Error::NonFinite { coordinate: i })?;
        point[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::NonFinite { coordinate: i });
        }
        grad.push((up - down) / (2.0 * h));
    }
    Ok(grad)
}

/// Outcome of comparing the lattice against enumeration over random inputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleReport {
    pub trials: usize,
    pub k_max: usize,
    pub tolerance: f64,
    pub max_abs_error: f64,
    pub max_rel_error: f64,
    pub worst_case_input: Vec<f64>,
    pub pass: bool,
}

/// Draws `trials` random probability vectors with `k` uniform on `[1, k_max]`
/// and compares `count_distribution` with enumeration entrywise.
pub fn verify_count_distribution(
    trials: usize,
    k_max: usize,
    tolerance: f64,
    seed: u64,
) -> Result<OracleReport> {
    if k_max == 0 || k_max > MAX_ENUMERATION_K {
        return Err(Error::arg(format!(
            "k_max must lie in [1, {MAX_ENUMERATION_K}], got {k_max}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs: Vec<Vec<f64>> = (0..trials)
        .map(|_| {
            let k = rng.random_range(1..=k_max);
            (0..k).map(|_| rng.random::<f64>()).collect()
        })
        .collect();

    let errors = par::map_slice(&inputs, |probs| -> Result<(f64, f64)> {
        let exact = brute_force_count_distribution(probs)?;
        let lattice = count_distribution(&InstanceScores::from_probs(probs)?).probs();
        let mut abs = 0.0f64;
        let mut rel = 0.0f64;
        for (a, b) in lattice.iter().zip(&exact) {
            let e = (a - b).abs();
            abs = abs.max(e);
            if *b > 0.0 {
                rel = rel.max(e / b);
            }
        }
        Ok((abs, rel))
    });

    let mut report = OracleReport {
        trials,
        k_max,
        tolerance,
        max_abs_error: 0.0,
        max_rel_error: 0.0,
        worst_case_input: Vec::new(),
        pass: true,
    };
    for (probs, err) in inputs.iter().zip(errors) {
        let (abs, rel) = err?;
        if abs > report.max_abs_error || report.worst_case_input.is_empty() {
            report.max_abs_error = abs;
            report.worst_case_input = probs.clone();
        }
        report.max_rel_error = report.max_rel_error.max(rel);
    }
    report.pass = report.max_abs_error <= tolerance;
    Ok(report)
}
