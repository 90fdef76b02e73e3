//! Chain-of-thought prompting for speech translation on a small
//! encoder-decoder transformer.
//!
//! A first pass transcribes synthetic speech; the transcript is spliced,
//! together with the encoded speech, into the encoder prompt of a second
//! pass that translates. The crate contains everything needed to train and
//! compare that system against a speech-only baseline, a joint
//! transcribe-then-translate decoder, and a cascade.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod harness;
pub mod lora;
pub mod numerics;
pub mod prompt;
pub mod speech;
pub mod system;
pub mod training;
pub mod transformer;

pub use error::{Error, Result};
