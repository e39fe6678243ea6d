//! Building blocks for semi-supervised segmentation with bidirectional
//! patch displacement between weak and strong views.
//!
//! Image tensors are `f32` arrays shaped `C×H×W` (batches `B×C×H×W`), label
//! masks are `u8` class-id arrays shaped `H×W` (batches `B×H×W`). Loss values
//! and gradients are computed in `f64`.

pub mod augmentation;
pub mod confidence;
pub mod data;
pub mod displacement;
mod error;
pub mod losses;
pub mod metrics;
pub mod patch_grid;

pub use error::{CoreError, Result};
pub use patch_grid::PatchGrid;
