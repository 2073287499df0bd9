//! Value-level tensor engine with reverse-mode differentiation and the layer
//! set used by the ConvBiLSTM backbones and the fusion block.

pub mod gradcheck;
pub mod graph;
pub mod layers;
pub mod params;
pub mod tensor;

pub use graph::{BnUpdate, Graph, Mode, Var};
pub use layers::{BatchNormLayer, BiLstmLayer, Conv1dLayer, Conv2dLayer, LinearLayer};
pub use params::ParamStore;
pub use tensor::Tensor;
