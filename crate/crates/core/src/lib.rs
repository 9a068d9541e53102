pub mod autograd;
pub mod bench;
pub mod data;
pub mod metrics;
pub mod net;
pub mod npa;
pub mod parallel;
