//! Exact sequence-chunked backpropagation for a small causal transformer.
//!
//! The crate provides a metered dense-matrix core, a single-head transformer
//! with full and chunked forward paths, three backward engines (standard,
//! checkpointed, streamed), three training objectives with streaming heads,
//! an independent reference implementation for gradient checking, a
//! two-matmul demonstration and a communication-count simulator.

pub mod distsim;
pub mod engines;
pub mod error;
pub mod gradcheck;
pub mod linear_demo;
pub mod metering;
pub mod model;
pub mod objectives;
pub mod oracle;
pub mod plan;
pub mod scenario;
pub mod tensor;

pub use distsim::{simulate_standard_step, simulate_step, ClusterSpec, CommReport, Sharding, Strategy};
pub use engines::{
    backward_checkpoint, backward_standard, backward_stream, layer_stream_backward, run_engine,
    BackwardResult, EngineKind, GradStore,
};
pub use error::{Error, Result};
pub use metering::{FlopCategory, FlopsReport, MemoryReport, Meter, PassReport, Phase, Ratio, Tag};
pub use model::{LayerParams, LayerTensor, ModelConfig, ModelParams, ParamId};
pub use objectives::{DpoSpec, GrpoSpec, LossSpec, ObjectiveKind, SftSpec};
pub use linear_demo::{linear_demo_sweep, linear_standard_backward, linear_stream_backward, LinearDemoRow};
pub use plan::{ChunkPlan, PartitionPlan};
pub use scenario::{build_scenario, ObjectiveConfig, Scenario};
pub use tensor::{DType, Element, Matrix, SeededRng};
