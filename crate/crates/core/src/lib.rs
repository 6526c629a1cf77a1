pub mod backend;
pub mod client;
pub mod executor;
pub mod harness;
pub mod master;
pub mod model;
pub mod trace;
pub mod wire;
