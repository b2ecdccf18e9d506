pub mod earley;
pub mod frontend;
pub mod harness;
pub mod lalr;
pub mod mask;
pub mod operators;
pub mod pattern;
pub mod regex;
pub mod template;
pub mod vocab;
