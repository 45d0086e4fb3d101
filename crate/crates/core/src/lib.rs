//! Desk-scale masked acoustic token modeling for click-train audio.
//!
//! The crate is organised by pipeline stage:
//!
//! * [`audio`]: waveform I/O, resampling, STFT, denoising, onset detection
//! * [`synth`]: parametric coda / echolocation / beep generators and corpora
//! * [`codec`]: frame transform + residual vector quantizer (audio <-> token grid)
//! * [`matm`]: bidirectional masked token transformer, LoRA, training
//! * [`vamp`]: prompt masks and iterative parallel decoding
//! * [`eval`]: Fréchet distances, calibration, reconstruction study, probes, κ
//!
//! Everything is deterministic given its seed.

pub mod audio;
pub mod checkpoint;
pub mod codec;
pub mod error;
pub mod eval;
pub mod matm;
pub mod rng;
pub mod synth;
pub mod vamp;

pub use audio::Waveform;
pub use codec::{Codec, TokenGrid, MASK};
pub use error::{Error, ErrorKind, Result};
