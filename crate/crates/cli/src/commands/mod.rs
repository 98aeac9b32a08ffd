pub mod ambiguity;
pub mod check;
pub mod eval;
pub mod synth;
pub mod track;
