//! Diagnose and repair attribute-object binding in contrastive image-text
//! embedding spaces, working entirely from precomputed embeddings.

pub mod align;
pub mod captions;
pub mod cli;
pub mod datamodel;
pub mod error;
pub mod eval;
pub mod numerics;
pub mod probes;
pub mod synth;

pub use error::{Error, Result};
