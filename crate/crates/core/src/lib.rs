pub mod accountant;
pub mod analysis;
pub mod data;
pub mod error;
pub mod generator;
pub mod gradcheck;
pub mod nn;
pub mod params;
pub mod phm;
pub mod run;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use params::{ParamGroup, ParamId, ParamKind, ParamStore};
pub use tensor::{Scalar, Tape, Tensor, Var};
