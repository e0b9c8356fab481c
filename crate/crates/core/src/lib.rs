pub mod numerics;
pub mod radial;
pub mod operators;
pub mod grid;
pub mod verify;
pub mod cli;
