//! Minimal differentiable substrate: graph, parameters, execution, SGD.

pub mod checkpoint;
pub mod exec;
pub mod gradcheck;
pub mod graph;
pub mod optim;
pub mod params;

pub use exec::{backward, forward, forward_shared_channel, Activations, Executor, Mode};
pub use gradcheck::{finite_diff_check, GradCheckReport};
pub use graph::{ConvSpec, LayerKind, NetworkGraph, Node, NodeId, ParamDecl, ParamInit, Role};
pub use optim::{sgd_step, OptimizerState};
pub use params::{GradientSet, ParameterSet};
