pub mod autograd;
pub mod config;
pub mod conv;
pub mod error;
pub mod evaluation;
pub mod inference;
pub mod losses;
pub mod networks;
pub mod optim;
pub mod patch;
pub mod phantom;
pub mod tensor;
pub mod training;
pub mod uncertainty;
pub mod volume_io;
pub mod wavelet;

pub use error::{Error, Result};
pub use tensor::{Real, Tensor};
