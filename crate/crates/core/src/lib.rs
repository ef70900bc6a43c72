//! Three-stage ECG sleep-stage classification.
//!
//! Stage 1 pretrains a convolutional + liquid time-constant network to
//! reproduce kurtosis and skewness of synthetic signals. Stage 2 trains an
//! N1-vs-rest detector on synchrosqueezed time-frequency images. Stage 3
//! strips both heads, concatenates their features and classifies five sleep
//! stages with Kolmogorov-Arnold dense layers.

pub mod augment;
pub mod autodiff;
pub mod dataset;
pub mod dsp;
pub mod layers;
pub mod metrics;
pub mod models;
pub mod train;
pub mod error;

pub use error::{Error, Result};
