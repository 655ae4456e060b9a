//! The differentiable supernet and the discrete networks derived from it.

mod arch;
mod genotype;
mod model;
mod ops;
mod params;

pub use arch::{cell_edges, ArchParams, BoundArch, MixWeights, Relaxation};
pub use genotype::{derive_genotype, DeriveMode, Genotype, DEFAULT_THRESHOLD};
pub use model::{
    analytic_parameter_count, discretize_and_retain_weights, mixed_edge_forward, update_running_stats, Binding,
    Cell, Edge, MixedEdge, Mode, Network, SupernetConfig, BN_EPS, BN_MOMENTUM,
};
pub use ops::{BatchNormIds, CandidateOp, Layer, OpKind};
pub use params::{Init, ParamId, ParamStore};
