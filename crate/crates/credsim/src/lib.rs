//! Scenario parsing, deterministic execution, the attack × defense outcome
//! matrix, and report rendering for the credsim world model.

pub mod matrix;
pub mod report;
pub mod runner;
pub mod scenario;
