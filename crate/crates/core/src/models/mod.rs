//! CNN, LSTM, GRU and Transformer networks for forward (screen → spectrum),
//! inverse (spectrum → screen) and band-to-band prediction.

mod config;
pub mod layers;
mod network;
mod params;

pub use config::{Channel, Direction, Family, InputMode, ModelConfig, SupplementBand, Target};
pub use network::{build_model, Batch, ForwardBatch, InverseBatch, Model, SpectralBatch};
pub use params::ParamStore;

use crate::screen::CELLS;
use crate::surrogate::SpectralResponse;

/// Per-sample features fed to spectrum encoders: amp_x, amp_y, sin φ, cos φ.
pub const SPECTRUM_FEATURES: usize = 4;

/// Row-major `[len, 4]` feature matrix of a (band-sliced) response.
pub fn spectrum_features(resp: &SpectralResponse) -> Vec<f64> {
    let mut out = Vec::with_capacity(resp.len() * SPECTRUM_FEATURES);
    for i in 0..resp.len() {
        let (s, c) = resp.phase[i].sin_cos();
        out.extend([resp.amp_x[i], resp.amp_y[i], s, c]);
    }
    out
}

/// Values of `channel` as reported (phase stays wrapped).
pub fn channel_values(resp: &SpectralResponse, channel: Channel) -> &[f64] {
    match channel {
        Channel::AmpX => &resp.amp_x,
        Channel::AmpY => &resp.amp_y,
        Channel::Phase => &resp.phase,
    }
}

/// Training-space target: the channel itself, or `[sin φ…, cos φ…]` for phase.
pub fn encode_target(resp: &SpectralResponse, channel: Channel) -> Vec<f64> {
    match channel {
        Channel::Phase => resp
            .phase
            .iter()
            .map(|p| p.sin())
            .chain(resp.phase.iter().map(|p| p.cos()))
            .collect(),
        c => channel_values(resp, c).to_vec(),
    }
}

/// Inverse of [`encode_target`] for one output row.
pub fn decode_output(raw: &[f64], channel: Channel) -> Vec<f64> {
    match channel {
        Channel::Phase => {
            let (s, c) = raw.split_at(raw.len() / 2);
            s.iter().zip(c).map(|(s, c)| s.atan2(*c)).collect()
        }
        _ => raw.to_vec(),
    }
}

/// Mean squared error of the constant-0.5 pixel predictor on binary targets.
pub const CHANCE_PIXEL_MSE: f64 = 0.25;

pub(crate) const PIXELS: usize = CELLS;
