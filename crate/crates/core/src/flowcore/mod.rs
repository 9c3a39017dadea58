//! Decoupled generative flow: an encoder maps an image to a global code `z`,
//! and an invertible flow conditioned on `z` maps the preprocessed image to an
//! image-shaped local code `nu`. Decoding inverts the flow at fixed `z`, so
//! `decode(encode(x))` reproduces `x` up to floating-point error.

mod arch;
mod checkpoint;
mod model;
mod preprocess;
mod train;

pub use arch::{FlowArch, MaskKind};
pub use model::{bpd_from_nats, EncodeMode, EncoderOutput, FlowModel, GlobalCode, LocalCode};
pub use preprocess::Preprocess;
pub use train::{train_flow, train_flow_with, FlowTrainConfig, FlowTrainLog};
