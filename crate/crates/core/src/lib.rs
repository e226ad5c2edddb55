//! Interval reachability analysis for a three-link sit-to-stand robot under
//! parameter uncertainty.
//!
//! The crate plans a rest-to-rest standing motion for a planar shank-thigh-
//! torso model, designs a finite-horizon LQR along it, and computes interval
//! over-approximations of the closed-loop reachable sets in state, CoM-output
//! and input space from trajectory sensitivities sampled over a 12-parameter
//! uncertainty box.
//!
//! Pipeline: [`planning`] → [`allocation`] → [`lqr`] → [`reach`], orchestrated
//! by [`pipeline`] with scenario defaults in [`scenario`].

pub mod allocation;
pub mod exec;
pub mod grid;
pub mod integrate;
pub mod lqr;
pub mod pipeline;
pub mod planning;
pub mod reach;
pub mod robot;
pub mod scenario;
