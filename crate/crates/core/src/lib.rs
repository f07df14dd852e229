//! Faithfulness auditing for language-model self-explanations.
//!
//! Given activation traces, a prediction and the model's own explanation,
//! the crate extracts the concepts the explanation invokes, checks whether
//! those concepts are mechanistically present or influential inside a
//! circuit, and scores, classifies and intervenes on the result. A
//! synthetic planted-concept lab supplies ground truth for every measure.

pub mod concepts;
pub mod error;
pub mod evalcas;
pub mod faithmetrics;
pub mod linfaith;
pub mod mechinterp;
pub mod pipeline;
pub mod steering;
pub mod store;
pub mod synthlab;
pub mod text;
pub mod trace;
pub mod vecops;

pub use error::{FaithError, Result};
