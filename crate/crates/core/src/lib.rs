//! Learning the downscaling operator that maps cheap coarse-scale solutions
//! of multiscale elliptic problems to fine-scale solutions.
//!
//! The pipeline: [`elliptic`] produces fine references and coarse solves,
//! [`homogenize`] builds `u₀` and the first-order corrector, [`patch`] turns
//! coarse fields and scarce observations into training triplets, [`don`] is
//! the branch/trunk operator network, [`train`] fits it with Adam and
//! [`bayes`] samples an ensemble with replica-exchange Langevin dynamics.
//! [`experiment`] and [`plot`] drive the sweeps behind the command-line tool.

pub mod bayes;
pub mod coefficient;
pub mod don;
pub mod elliptic;
pub mod error;
pub mod experiment;
pub mod grid;
pub mod homogenize;
pub mod patch;
pub mod plot;
pub mod train;
pub mod trend;

pub use error::{Error, Result};
