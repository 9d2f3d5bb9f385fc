//! Exact entropy minimization for autoregressive policies.
//!
//! The crate models a finite-support autoregressive policy as a tabular
//! softmax over `(position, previous token)` contexts, so every quantity of
//! interest can be checked against exhaustive enumeration:
//!
//! * [`policy`]: the policy, sampling, log-probabilities and analytic gradients.
//! * [`estimators`]: sequence-level and token-level single-sample entropy estimators.
//! * [`decoding`]: greedy decoding, i.i.d. sampling batches and beam search.
//! * [`objectives`]: gradient assembly for the entropy-minimization objectives
//!   (EM-tok, EM-seq and the partial PG-tok / ENT-tok / Greedy-EM variants).
//! * [`oracle`]: enumeration-based ground truth and finite differences.
//! * [`harness`]: synthetic domain-shifted episodes and the adapt-then-reset loop.
//! * [`verify`]: the oracle-backed property checks behind `em-ar-lab verify`.
//!
//! All entropies are in nats.

pub mod decoding;
pub mod error;
pub mod estimators;
pub mod fixtures;
pub mod harness;
pub mod objectives;
pub mod oracle;
pub mod policy;
pub mod rng;
pub mod verify;

pub use error::{Error, Result};
