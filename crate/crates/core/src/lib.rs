pub mod data;
pub mod error;
pub mod evaluation;
pub mod gradcheck;
pub mod losses;
pub mod par;
pub mod params;
pub mod autograd;
pub mod networks;
pub mod training;

pub use error::{Error, Result};
