//! Desk-scale simulator of vertical federated learning.
//!
//! Passive parties train bottom models on disjoint feature columns; the
//! active party owns the labels and the top model. The crate covers split
//! training ([`vfl`]), exact and estimated mutual information ([`info`],
//! [`chain`]), label-inference attacks ([`attacks`]), defenses
//! ([`defenses`]), datasets and task reassignment ([`data`]) and a
//! config-driven experiment runner ([`harness`]).

pub mod attacks;
pub mod chain;
pub mod data;
pub mod defenses;
pub mod error;
pub mod harness;
pub mod info;
pub mod matrix;
pub mod nn;
pub mod vfl;

pub use error::{Error, Result};
pub use matrix::Matrix;
