pub mod agents;
pub mod cli;
pub mod envs;
pub mod harness;
pub mod style;
pub mod tensor;
