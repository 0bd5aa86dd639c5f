pub mod cli;
pub mod controller;
pub mod encoder;
pub mod formula;
pub mod lpsolver;
pub mod robustness;
pub mod scenario;
pub mod system;
