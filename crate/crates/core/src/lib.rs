//! Dictionary-free identification of Koopman eigenfunctions from trajectory
//! data, with Kalman filtering and gain-scheduled LQR built on the learned
//! coordinates.

pub mod control;
pub mod error;
pub mod inputdyn;
pub mod io;
pub mod linalg;
pub mod optimizer;
pub mod par;
pub mod spatial;
pub mod spectral;
pub mod spline;
pub mod systems;

pub use error::{Error, Result};
