//! Dense neural network building blocks.

pub mod act;
pub mod bn;
pub mod concat;
pub mod conv;
pub mod loss;
pub mod upsample;
