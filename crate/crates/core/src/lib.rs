//! CPU implementation of the FPENet real-time semantic segmentation
//! architecture: feature pyramid encoding blocks, mutual embedding upsample
//! decoder modules, the full encoder-decoder network, a reverse-mode gradient
//! tape for desk-scale training, and a static cost model (parameters,
//! multiply-accumulates, receptive fields).

pub mod analysis;
pub mod block;
pub mod config;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod image_io;
pub mod net;
pub mod ops;
pub mod tape;
pub mod tensor;
pub mod train;
pub mod weights;

pub use config::{ConfigError, DecoderKind, ModelConfig};
pub use error::{Axis, OpError};
pub use graph::{GraphBuilder, LayerGraph, NodeId, NodeKind, ParamId, Recorded};
pub use ops::{BatchNormState, BnMode, ConvSpec};
pub use tape::{Gradients, Tape, ValueId};
pub use tensor::{Element, Labels, Shape, Tensor};
