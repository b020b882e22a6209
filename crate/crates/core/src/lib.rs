//! Context-aware residual Lagrangian dynamics learning and receding-horizon
//! control on a simulated planar manipulator.
//!
//! The crate covers the whole pipeline: an analytic n-link plant, excitation
//! and data collection, a latent-context residual dynamics model with exact
//! derivatives, joint training of the model and its recurrent context
//! encoder, an SQP-RTI style MPC, an external-force EKF baseline, and the
//! evaluation harness that compares the three controllers.

pub mod dataset;
pub mod dynamics;
pub mod math;
pub mod sim;
