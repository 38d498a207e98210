pub mod checkpoint;
pub mod cli;
pub mod dataset;
pub mod error;
pub mod imaging;
pub mod losses;
pub mod matching;
pub mod metrics;
pub mod networks;
pub mod training;
pub mod features;
pub mod wavelet;

pub use error::{Error, Result};
pub use imaging::{ColorSpace, ImageTensor};
