//! Empathetic response generation controlled by three hierarchically
//! predicted factors: communication mechanism, dialog act and emotion.

pub mod error;
pub mod numerics;

pub use error::{Error, Result};
pub mod taxonomy;
pub mod classifier;
pub mod corpus;
pub mod decoding;
pub mod evaluation;
pub mod model;
pub mod text;
pub mod training;
