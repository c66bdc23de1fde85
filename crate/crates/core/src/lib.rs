//! Federated learning through empirical neural tangent kernel (NTK) evolution.
//!
//! Clients upload per-sample Jacobians, labels and initial outputs; the server
//! assembles a global Jacobian tensor, forms the empirical kernel and evolves
//! the global model in closed form over a grid of step counts. A compressed,
//! projected and shuffled variant, a FedAvg baseline and numerical checks of
//! the convergence theory are included.

pub mod error;
#[macro_use]
pub mod rng;
pub mod data;
pub mod linalg;
pub mod model;
pub mod ntk;
pub mod fed;
pub mod cp;
pub mod analysis;

pub use error::{Error, Result};
