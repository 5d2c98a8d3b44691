//! Bilevel hyperparameter optimization with hypergradients.
//!
//! The crate covers the full pipeline of gradient-based hyperparameter
//! tuning on small dense problems:
//!
//! * [`linalg`]: dense kernels plus matrix-free CG and fixed-point solvers.
//! * [`data`]: datasets, libsvm ingestion, synthetic generators and the
//!   seeded train/validation splitting process.
//! * [`problems`]: the [`BilevelProblem`] contract and the model zoo.
//! * [`hypergrad`]: unrolled (ITD, truncated) and implicit (AID)
//!   hypergradient engines.
//! * [`strategies`]: single-split, ensemble (EHG) and online ensemble (OEHG)
//!   outer loops.
//! * [`diagnostics`]: ridge closed-form oracle, bias-variance sweeps and the
//!   finite-population sampling check.

// Negated float comparisons are used on purpose so that NaN is rejected.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod data;
pub mod diagnostics;
pub mod error;
pub mod hypergrad;
pub mod linalg;
pub mod problems;
pub mod rng;
pub mod strategies;

pub use data::{DataView, Dataset, Split, SplitMode, SplitPlan, Task};
pub use error::{Error, Result};
pub use hypergrad::{HypergradMethod, HypergradResult, InnerTrajectory, MethodKind};

pub use linalg::{LinearOperator, Mat};
pub use problems::{build_problem, BilevelProblem, ModelKind, ModelSpec};
pub use strategies::{HpoTrace, OuterOptimizer};

