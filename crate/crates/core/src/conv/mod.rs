//! Sparse convolution engine: kernel geometry, rulebooks, parameters and the
//! dense reference convolution.

mod kernel;
mod oracle;
mod params;
mod rulebook;

pub use kernel::{ConvMode, KernelSpec};
pub use oracle::dense_conv_oracle;
pub use params::{init_params, kaiming_bound, ConvParams};
pub use rulebook::{build_rulebook, Rulebook};
