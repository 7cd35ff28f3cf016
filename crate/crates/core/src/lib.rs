//! Numerical laboratory for SRB measures and (fractional) linear response of
//! hyperbolic model maps.
//!
//! The crate is organized bottom-up:
//!
//! * [`dynamics`]: model map families on flat domains and their perturbation fields.
//! * [`rates`]: finite-time hyperbolicity rates and the volume/contraction conditions
//!   that control fractional response.
//! * [`transfer`]: Ulam discretization of the transfer operator, SRB estimation,
//!   resolvent solves.
//! * [`observables`]: smooth and Heaviside observables, mollification, transversality.
//! * [`norms`]: FFT-based Sobolev and anisotropic cone norms.
//! * [`response`]: response curves and fluctuation-dissipation formulas.
//! * [`analysis`]: Hölder fits, jump detection, extreme-value quotients.
//! * [`cli`]: config-driven experiment runner.

pub mod analysis;
pub mod cli;
pub mod dynamics;
pub mod error;
pub mod io;
pub mod norms;
pub mod observables;
pub mod params;
pub mod rates;
pub mod response;
pub mod transfer;

pub use dynamics::{make_builtin_family, Family, MapFamily, ModelDomain, Point};
pub use error::{Error, Result};
pub use params::Params;
