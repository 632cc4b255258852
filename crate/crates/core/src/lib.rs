pub mod affine_model;
pub mod error;
pub mod format;
pub mod market;
pub mod mc_oracle;
pub mod mixture;
pub mod riccati;
pub mod yield_curves;
