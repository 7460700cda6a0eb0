//! Beamforming inference laboratory.
//!
//! Infers full-array multi-user beamforming matrices from the channel and
//! WMMSE beamformer of a small antenna subset with a conditional WGAN-GP,
//! and measures the result against a WMMSE reference on synthetic mmWave
//! channels.

pub mod autodiff;
pub mod channel;
pub mod gan;
pub mod io;
pub mod linalg;
pub mod metrics;
pub mod trainer;
pub mod wmmse;
