pub mod cli;
pub mod data;
pub mod error;
pub mod kernel;
pub mod linalg;
pub mod model;
pub mod nystrom;
pub mod oracle;
pub mod pivot;
pub mod subspace;
pub mod tensor;
pub mod uncertainty;
pub mod verify;

pub use error::{Result, UktlError};
