//! Self-supervised training of physics-driven unrolled MRI reconstruction
//! networks, with sparse parallel-imaging consistency (SPIC) and the usual
//! baseline objectives, on synthetic multi-coil data.

pub mod autodiff;
pub mod cg;
mod conv;
pub mod data;
pub mod encoding;
pub mod error;
pub mod fft;
pub mod harness;
pub mod image;
pub mod losses;
pub mod metrics;
pub mod net;
pub mod perturbation;
pub mod sampling;
pub mod sparsity;
pub mod wavelet;

pub use error::{Error, Result};
pub use image::{ComplexImage, C64};
