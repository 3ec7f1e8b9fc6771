//! Single- and multi-channel E(n)-equivariant message passing.

pub mod checkpoint;
mod graph;
mod model;
pub mod reference;

pub use checkpoint::{load_model, save_model};
pub use graph::{complete_edges, permute_rows, GraphBatch};
pub use model::{
    BatchCtx, CoordAggregation, Fault, LayerState, MCEGNNConfig, MCEGNNModel, McLayer, ModelOutput, Readout,
};
pub use reference::EgnnModel;
