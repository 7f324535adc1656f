pub mod archive;
pub mod data;
pub mod error;
pub mod harness;
pub mod inference;
pub mod losses;
pub mod memory;
pub mod model;
pub mod optim;
pub mod scalar;
pub mod trainer;
