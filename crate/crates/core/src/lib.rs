//! Radar-echo nowcasting with a test-time-training translator.
//!
//! The crate is a self-contained stack: a reverse-mode tensor core, synthetic
//! reflectivity data with controllable dynamics regimes, the predictor
//! (per-frame encoder, fast-weight translator, skip branch, decoder with a
//! super-resolution stream), the composite training objective, a forecast
//! verification suite, and the experiment harness behind the CLI.
//!
//! All math is generic over [`scalar::Scalar`]; the concrete working
//! precision is pinned by the aliases below (64-bit everywhere — gradient
//! checks and the spectral oracles depend on it).

pub mod error;
pub mod scalar;

pub mod rng;

pub mod tensor;
pub mod ops;
pub mod conv;
pub mod fft;
pub mod gradcheck;
pub mod optim;
pub mod param;

pub mod attention;
pub mod data;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod ttt;

pub use error::{Error, Result};

/// Working scalar precision for the model, data, and harness layers.
pub type Real = f64;
/// Tensor at working precision.
pub type Tensor = tensor::Tensor<Real>;
/// Tape at working precision.
pub type Tape = tensor::Tape<Real>;
/// Parameter at working precision.
pub type Parameter = param::Parameter<Real>;
/// Parameter collection at working precision.
pub type ParamSet = param::ParamSet<Real>;
/// Optimizer at working precision.
pub type AdamW = optim::AdamW<Real>;
