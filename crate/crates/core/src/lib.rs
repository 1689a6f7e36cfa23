pub mod autodiff;
pub mod grid;
pub mod palette;
pub mod field;
pub mod render;
pub mod constraints;
pub mod guidance;
pub mod train;
pub mod baseline;
pub mod eval;
pub mod export;
pub mod experiments;
