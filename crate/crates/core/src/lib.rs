pub mod events;
pub mod tokenizer;
pub mod model;
pub mod simulator;
pub mod risk;
pub mod eval;
pub mod synth;
