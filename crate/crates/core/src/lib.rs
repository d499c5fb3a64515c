pub mod cell;
pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod eval;
pub mod gradcheck;
pub mod lstm;
pub mod model;
pub mod rng;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod train;
pub mod text;
