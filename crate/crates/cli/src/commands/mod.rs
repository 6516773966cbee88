pub mod eval;
pub mod inspect;
pub mod segment;
pub mod synth;
pub mod train;
