//! A small CPU autodiff engine: dense tensors, a reverse-mode tape, the layers
//! the watermarking networks need, and AdamW.

pub mod conv;
pub mod layers;
pub mod ops;
pub mod optim;
pub mod param;
pub mod spatial;
pub mod tape;
pub mod tensor;

pub use layers::{Conv2d, Linear, ResBlock};
pub use optim::AdamW;
pub use param::{checksum, Module, Param};
pub use spatial::SpatialMap;
pub use tape::{Gradients, Tape, Var};
pub use tensor::{Real, Tensor};
