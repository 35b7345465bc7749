pub mod context;
pub mod embed;
pub mod eval;
pub mod kg;
pub mod pipeline;
pub mod prompt;
pub mod vlm;
