//! Hit file formats and restoration of time order.

pub mod format;
pub mod sort;

pub use format::*;
pub use sort::*;
