//! Two-branch ("still" + "fast") detector for short-term object interaction
//! anticipation: given a high-resolution frame and a low-resolution clip
//! ending at the same instant, predict the next-active object's box, noun,
//! verb and time to contact.

pub mod autograd;
pub mod boxes;
pub mod datamodel;
pub mod dataset;
pub mod error;
pub mod head;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod pyramid;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
