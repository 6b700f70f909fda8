//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! Operations are methods on [`Tape`]; each records its forward value and a
//! backward rule. Pipeline stages with bespoke derivatives (potentials,
//! mean-field, interpolation, losses) register their own rules through
//! [`Tape::record`].

pub mod gradcheck;
mod ops;
mod params;
mod tape;
mod tensor;

pub use gradcheck::{check_gradients, GradCheckOptions, GradCheckReport};
pub use ops::conv_out_extent;
pub use params::{
    adam_step, decode_prm1, encode_prm1, read_prm1, write_prm1, AdamConfig, AdamState, BoundParams,
    ParameterSet,
};
pub use tape::{BackwardFn, Gradients, Tape, Var};
pub use tensor::Tensor;
