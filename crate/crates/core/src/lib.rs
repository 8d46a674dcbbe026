//! Multi-label recognition head built around two coupled graph passes over
//! content-aware category representations: a semantic attention module that
//! decomposes a backbone feature map into one vector per class, a static
//! (dataset-level) graph convolution, and a dynamic graph convolution whose
//! adjacency is estimated per input. Runs on a minimal dense-tensor
//! reverse-mode autodiff engine, trainable end-to-end on synthetic or
//! file-ingested feature maps.

pub mod adgt;
pub mod config;
pub mod data;
pub mod dgcn;
pub mod error;
pub mod head;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod params;
pub mod sam;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tape::{PoolMode, Tape, Var};
pub use tensor::Tensor;
