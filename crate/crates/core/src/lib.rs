pub mod corpus;
pub mod encoder;
pub mod evaluation;
pub mod experiment;
pub mod error;
pub mod personalization;
pub mod seeding;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
