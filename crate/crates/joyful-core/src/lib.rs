pub mod error;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod optim;
pub mod params;
pub mod seeding;
pub mod graph;
pub mod fusion;
pub mod encoder;
pub mod metrics;
pub mod stats;
pub mod trainer;
pub mod gradcheck;
