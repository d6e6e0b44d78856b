pub mod tensor;
pub mod masking;
pub mod params;
pub mod layers;
pub mod vit;
pub mod decoder;
pub mod objective;
pub mod model;
pub mod data;
pub mod analysis;
pub mod train;
pub mod cli;
