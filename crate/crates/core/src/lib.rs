//! Exact, differentiable count probabilities for weakly supervised learning.
//!
//! The central object is the distribution of `sum y_i` over independent
//! Bernoulli predictions (a Poisson-binomial), computed exactly in log space
//! by a dynamic program over a `(k + 1) x (s + 1)` lattice. Losses for
//! learning from label proportions, multiple-instance learning and
//! positive-unlabeled learning are all expressed through it, and gradients
//! flow back through the lattice to any instance scorer.
//!
//! Modules:
//!
//! - [`countdp`]: `log1mexp`, `logsumexp`, the lattice, its reverse sweep.
//! - [`losses`]: the four count objectives and the SCAR mixture estimate.
//! - [`oracle`]: brute-force enumeration and finite differences.
//! - [`model`]: MLP scorers with log-sigmoid output, Adam/SGD.
//! - [`datasets`]: CSV ingestion, synthetic data, bag construction, bag files.
//! - [`metrics`]: AUC and thresholded classification metrics.
//! - [`trainer`]: training loops, early stopping, bag prediction.
//!
//! With the default `parallel` feature, batch work (bag groups, evaluation,
//! oracle trials) runs on rayon. Reductions always happen in index order, so
//! results do not depend on the feature.
//!
//! ```
//! use countloss::countdp::{count_distribution, InstanceScores};
//!
//! let scores = InstanceScores::from_probs(&[0.1, 0.2, 0.3]).unwrap();
//! let dist = count_distribution(&scores).probs();
//! assert!((dist[1] - 0.398).abs() < 1e-12);
//! ```

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod countdp;
pub mod datasets;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod oracle;
mod par;
pub mod trainer;

pub use error::{Error, Result};
pub use par::is_parallel;
