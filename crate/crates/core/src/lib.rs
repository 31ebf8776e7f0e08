pub mod inference;
pub mod integrity;
pub mod observer;
pub mod schedule;
pub mod sender;
pub mod simulator;
pub mod wire;
