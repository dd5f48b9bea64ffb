pub mod diffcore;
pub mod grid;
pub mod swing;
pub mod scenario;
pub mod koopman;
pub mod dpc;
pub mod online;
pub mod bench;
