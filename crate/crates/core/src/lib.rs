pub mod error;
pub mod eval;
pub mod gradcam;
pub mod heatmap;
pub mod lime;
pub mod lrp;
pub mod netgraph;
pub mod par;
pub mod pgm;
pub mod shap;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
