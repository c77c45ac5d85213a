pub mod geometry;
pub mod harness;
pub mod learn;
pub mod log;
pub mod prompting;
pub mod reward;
pub mod seed;
pub mod sim;
