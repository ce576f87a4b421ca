//! Observation-error covariance specification for dynamical data assimilation.
//!
//! The crate is organised bottom-up:
//!
//! * [`covmat`] – SPD covariance matrices, parametric generators, kernels and
//!   the regularisation primitives.
//! * [`dynmodels`] – the Lorenz-63 style ODE and the 2D shallow-water PDE,
//!   plus their linear observation operators.
//! * [`assim`] – BLUE analysis, ensemble covariance and the stochastic EnKF cycle.
//! * [`tuning`] – DI01 trace-ratio tuning and the D05 residual iteration.
//! * [`lstmnet`] – a many-to-one LSTM with hand-written BPTT and Adam.
//! * [`datagen`] – simulated observation datasets and their on-disk format.
//! * [`experiment`] – twin experiments and the error metrics.

// `!(x > 0.0)` is used on purpose so NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod assim;
pub mod covmat;
pub mod datagen;
pub mod dynmodels;
pub mod error;
pub mod experiment;
pub mod lstmnet;
pub mod rng;
pub mod tuning;

mod binio;

pub use assim::{AnalysisResult, Ensemble, InnovationRecord};
pub use covmat::{CovarianceMatrix, LorenzRParams, SwRParams};
pub use datagen::{CovParams, Dataset, DatasetSample, GenConfig, ProblemKind};
pub use dynmodels::{Dynamics, LorenzModel, LorenzParams, ObservationOperator, ShallowWater, SwParams};
pub use error::{Error, Result};
pub use experiment::{Method, MetricsReport, TwinConfig};
pub use lstmnet::{LstmParams, TrainConfig, TrainedModel};
pub use rng::RandomSource;

pub use nalgebra::{DMatrix, DVector};
