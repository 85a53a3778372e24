//! Automated longitudinal and circumferential co-registration of
//! intravascular ultrasound (IVUS) and optical coherence tomography (OCT)
//! pullbacks from per-frame feature records.
//!
//! The pipeline: [`features`] turns each pullback into smoothed, downsampled
//! longitudinal feature sequences; [`dtw`] aligns them with feature-weighted
//! dynamic time warping; [`circumferential`] picks landmark anchor pairs,
//! scores every rotation by weighted circular cross-correlation and finds a
//! regularized rotation path. [`synth`] renders synthetic pairs with ground
//! truth and [`metrics`] computes agreement statistics.

pub mod circumferential;
pub mod cli;
pub mod config;
pub mod dtw;
pub mod features;
pub mod metrics;
pub mod oracle;
pub mod pipeline;
pub mod pullback;
pub mod synth;

pub use config::EngineConfig;
pub use pipeline::{register, register_batch, Registration, RegistrationResult};
pub use pullback::{parse_pullback, Modality, Pullback, RawFrame};
