//! Metasurface spectral-prediction lab.
//!
//! A 25×25 binary pixel "screen" is the design variable. The [`surrogate`]
//! oracle turns a screen into transmitted x/y amplitude and phase spectra over
//! 0–2 THz; the [`models`] (CNN, LSTM, GRU, Transformer) learn that mapping in
//! both directions on top of a small tape-based [`autograd`] engine, and the
//! [`pipeline`] runs cross-validated studies: band supplementation and the
//! low/high band information asymmetry.

pub mod autograd;
pub mod error;
pub mod models;
pub mod pipeline;
pub mod screen;
pub mod surrogate;

pub use autograd::{AdamConfig, AdamState, Tape, Tensor, Var};
pub use error::{Error, Result};
pub use models::{
    Channel, Direction, Family, InputMode, Model, ModelConfig, SupplementBand, Target,
};
pub use pipeline::{Dataset, ExperimentReport, FoldSplit, ReportRow, TrainConfig};
pub use screen::{PatternFeatures, PixelGrid, TokenSequence, UnitGeometry};
pub use surrogate::{Band, DrudeParams, FrequencyGrid, OracleConfig, Resonator, SpectralResponse};
