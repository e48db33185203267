//! Mixture-of-Experts layer with intra-expert activation sparsity.
//!
//! The crate covers one MoE layer end to end: top-k routing, SwiGLU experts,
//! threshold calibration, a gather-based sparse execution path checked
//! against masked-dense and dense references, router-weight neuron
//! budgeting, activation profiling and exact multiply-accumulate accounting.

pub mod activation;
pub mod budget;
pub mod calibrate;
pub mod engine;
pub mod error;
pub mod fmt;
pub mod linalg;
pub mod model;
pub mod profiler;
pub mod router;

pub use activation::{ActiveIndexBuffer, SparsityLevel};
pub use budget::BudgetRatios;
pub use calibrate::{CalibrationTable, SparsityShape};
pub use engine::{Engine, ExecPath, ForwardReport, MaskSet, SwitchTable};
pub use error::{Error, Result};
pub use linalg::{MacCounter, Matrix};
pub use model::{MoEConfig, MoELayerWeights};
pub use router::{DispatchPlan, RouteResult};
