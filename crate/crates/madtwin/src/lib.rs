//! Monaural singing-voice separation.
//!
//! The pipeline factors a mixture spectrogram into a voice estimate with two
//! recurrent stages: a *masker* (bidirectional GRU encoder, GRU decoder, and a
//! sparsifying feed-forward layer that predicts a time-frequency mask) and a
//! *denoiser* (a per-frame autoencoder that cleans the masked magnitudes).
//! During training a *twin* decoder runs over the encoder output in reverse
//! time order and is tied to the forward decoder through an affine bridge,
//! regularizing the decoder states toward representations that are also
//! predictive backwards in time.
//!
//! Everything is plain `f64` numerics on [`ndarray`] types, with hand-written
//! backpropagation that is verified against central finite differences (see
//! [`training::gradient_check_full`]). Training, separation, and evaluation
//! are deterministic for a fixed seed and configuration.
//!
//! Entry points:
//! - [`signal`]: STFT/ISTFT, Griffin-Lim phase reconstruction, WAV I/O.
//! - [`data`]: oracle masks, training targets, subsequencing, synthetic
//!   fixtures and the on-disk dataset layout.
//! - [`masker`], [`twinnet`], [`denoiser`]: the network stages.
//! - [`training`]: losses, initialization, Adam, checkpoints, training loop.
//! - [`eval`]: energy-ratio source-separation metrics (SDR/SIR).
//! - [`cli`]: the command bodies behind the `madtwin` binary.

pub mod cli;
pub mod config;
pub mod data;
pub mod denoiser;
pub mod error;
pub mod eval;
pub mod masker;
pub mod rnn;
pub mod signal;
pub mod training;
pub mod twinnet;

pub use error::{Error, Result};
