//! Dense f64 tensors, the computation record, and layers built on it.

pub mod nn;
pub mod tape;
pub mod tensor;

pub use nn::{Bound, Embedding, GruCell, Linear, LstmCell, ParamId, ParamSet};
pub use tape::{Gradients, Tape, TapeError, Var};
pub use tensor::Tensor;
