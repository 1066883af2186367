pub mod sdf;
pub use sdf::*;
