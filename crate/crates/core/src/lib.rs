pub mod cli;
pub mod config;
pub mod coupling;
pub mod data_io;
pub mod error;
pub mod flow;
pub mod numerics;
pub mod patchify;
pub mod rng;
pub mod splitting;
pub mod training;
pub mod verify;
pub mod vit;
