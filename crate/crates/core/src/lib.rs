pub mod cg;
pub mod error;
pub mod implicit;
pub mod nmf;
pub mod nnls;
pub mod pipeline;
pub mod npy;
pub mod rng;
pub mod run;
pub mod sobol;
pub mod tensor;
pub mod toy;

pub use error::{CraftError, Result};
pub use tensor::{Matrix, Tensor4};
