//! Concurrent Markov options over factored MDPs.
//!
//! Options that control disjoint blocks of state variables can run at the
//! same time. A tuple of such options (a multi-option) terminates either at
//! the first member termination (T1) or once all members have terminated
//! (T2); in both cases the decision process over multi-options is an SMDP,
//! so it can be planned with value iteration or learned with SMDP
//! Q-learning.

pub mod concurrent;
pub mod error;
pub mod executor;
pub mod learning;
pub mod mdp;
pub mod model;
pub mod option;
pub mod planning;
pub mod rooms;
pub mod stats;

pub use error::{Error, Result};
