pub mod layers;
pub mod params;

pub use layers::*;
pub use params::{Init, ParamPath, ParamStore};
