pub mod analysis;
pub mod backbone;
pub mod checkpoint;
pub mod cli;
pub mod error;
pub mod gradsuite;
pub mod head;
pub mod image;
pub mod lfr;
pub mod losses;
pub mod model;
pub mod numerics;
pub mod parallel;
pub mod params;
pub mod synth;
pub mod train;

pub use error::{Error, FormatError, Result};
