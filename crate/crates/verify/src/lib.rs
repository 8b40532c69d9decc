//! Acceptance checks for the LoGoNet implementation. Each criterion returns
//! an [`Outcome`]; the `acceptance` test target runs them all.

pub mod grad_suite;
pub mod criteria;
