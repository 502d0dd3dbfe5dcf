use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::surrogate::Band;

macro_rules! named_enum {
    ($(#[$meta:meta])* $name:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        $(#[$meta])*
        #[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
        pub enum $name {
            $(#[serde(rename = $text)] $variant),+
        }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn as_str(self) -> &'static str {
                match self {
                    $($name::$variant => $text),+
                }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl FromStr for $name {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($text => Ok($name::$variant),)+
                    other => Err(Error::config(format!(
                        concat!("unknown ", stringify!($name), " {:?}; expected one of {}"),
                        other,
                        [$($text),+].join(", ")
                    ))),
                }
            }
        }
    };
}

named_enum!(Family {
    Cnn => "cnn",
    Lstm => "lstm",
    Gru => "gru",
    Transformer => "transformer",
});

named_enum!(
    /// `Spectral` maps the opposite band's spectra onto the target band.
    Direction {
        Forward => "forward",
        Inverse => "inverse",
        Spectral => "spectral",
    }
);

named_enum!(InputMode {
    Image => "image",
    Tokens => "tokens",
});

named_enum!(SupplementBand {
    None => "none",
    Low => "low",
    High => "high",
});

named_enum!(Channel {
    AmpX => "amp_x",
    AmpY => "amp_y",
    Phase => "phase",
});

impl SupplementBand {
    pub fn band(self) -> Option<Band> {
        match self {
            SupplementBand::None => None,
            SupplementBand::Low => Some(Band::Low),
            SupplementBand::High => Some(Band::High),
        }
    }

    pub fn from_band(band: Band) -> Self {
        match band {
            Band::Low => SupplementBand::Low,
            Band::High => SupplementBand::High,
        }
    }
}

impl Family {
    /// Natural forward input for the family.
    pub fn default_input_mode(self) -> InputMode {
        match self {
            Family::Cnn => InputMode::Image,
            _ => InputMode::Tokens,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Target {
    pub channel: Channel,
    pub band: Band,
}

impl Default for Target {
    fn default() -> Self {
        Self {
            channel: Channel::AmpX,
            band: Band::Low,
        }
    }
}

impl fmt::Display for Target {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}@{}", self.channel, self.band)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub family: Family,
    pub direction: Direction,
    /// Forward models only.
    pub input_mode: InputMode,
    pub hidden_size: usize,
    pub depth: usize,
    pub attention_heads: usize,
    /// Spectrum samples folded into one sequence step for LSTM/GRU/Transformer.
    pub patch: usize,
    pub band_samples: usize,
    pub supplement_band: SupplementBand,
    /// Predicted channel and band. Inverse models read every channel of
    /// `target.band`; spectral models read the opposite band.
    pub target: Target,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            family: Family::Cnn,
            direction: Direction::Forward,
            input_mode: InputMode::Image,
            hidden_size: 128,
            depth: 2,
            attention_heads: 4,
            patch: 32,
            band_samples: 512,
            supplement_band: SupplementBand::None,
            target: Target::default(),
            seed: 0,
        }
    }
}

/// Largest depth whose pooling still leaves at least one cell.
fn max_pool_depth(len: usize, window: usize) -> usize {
    let mut depth = 0;
    let mut n = len;
    while n / window >= 1 {
        n /= window;
        depth += 1;
    }
    depth
}

pub(crate) const IMAGE_POOL: usize = 2;
pub(crate) const SPECTRUM_POOL: usize = 4;
/// Samples averaged per bin before the supplementary-band dense layer.
pub(crate) const SUPPLEMENT_POOL: usize = 8;

impl ModelConfig {
    pub fn forward(family: Family, target: Target) -> Self {
        Self {
            family,
            input_mode: family.default_input_mode(),
            target,
            ..Self::default()
        }
    }

    pub fn inverse(family: Family, band: Band) -> Self {
        Self {
            family,
            direction: Direction::Inverse,
            input_mode: family.default_input_mode(),
            target: Target {
                channel: Channel::AmpX,
                band,
            },
            ..Self::default()
        }
    }

    pub fn spectral(family: Family, target: Target) -> Self {
        Self {
            family,
            direction: Direction::Spectral,
            input_mode: family.default_input_mode(),
            target,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden_size == 0 || self.depth == 0 || self.attention_heads == 0 {
            return Err(Error::config(
                "hidden_size, depth and attention_heads must be positive",
            ));
        }
        if self.band_samples == 0 {
            return Err(Error::config("band_samples must be positive"));
        }
        if self.family == Family::Transformer
            && !self.hidden_size.is_multiple_of(self.attention_heads)
        {
            return Err(Error::config(format!(
                "transformer hidden_size {} is not divisible by attention_heads {}",
                self.hidden_size, self.attention_heads
            )));
        }
        if self.direction == Direction::Forward {
            match (self.input_mode, self.family) {
                (InputMode::Image, Family::Cnn) => {}
                (InputMode::Image, f) => {
                    return Err(Error::config(format!(
                        "image input requires family cnn, got {f}"
                    )))
                }
                (InputMode::Tokens, Family::Cnn) => {
                    return Err(Error::config(
                        "token input requires lstm, gru or transformer",
                    ))
                }
                (InputMode::Tokens, _) => {}
            }
        }
        if let Some(band) = self.supplement_band.band() {
            if band == self.target.band {
                return Err(Error::config(format!(
                    "supplement band {band} must differ from target band {}",
                    self.target.band
                )));
            }
            if self.direction != Direction::Forward {
                return Err(Error::config(format!(
                    "supplementary input applies to forward models only, not {}",
                    self.direction
                )));
            }
            if !self.band_samples.is_multiple_of(SUPPLEMENT_POOL) {
                return Err(Error::config(format!(
                    "band_samples {} is not a multiple of the supplement pooling {SUPPLEMENT_POOL}",
                    self.band_samples
                )));
            }
        }
        let spectrum_input = self.direction != Direction::Forward;
        if spectrum_input
            && self.family != Family::Cnn
            && !self.band_samples.is_multiple_of(self.patch.max(1))
        {
            return Err(Error::config(format!(
                "band_samples {} is not a multiple of patch {}",
                self.band_samples, self.patch
            )));
        }
        if self.patch == 0 {
            return Err(Error::config("patch must be positive"));
        }
        if self.family == Family::Cnn {
            let limit = if spectrum_input {
                max_pool_depth(self.band_samples, SPECTRUM_POOL)
            } else {
                max_pool_depth(crate::screen::SIDE, IMAGE_POOL)
            };
            if self.depth > limit {
                return Err(Error::config(format!(
                    "cnn depth {} exceeds {limit} for this input",
                    self.depth
                )));
            }
        }
        Ok(())
    }

    /// Width of the raw network output.
    pub fn output_len(&self) -> usize {
        match (self.direction, self.target.channel) {
            (Direction::Inverse, _) => super::PIXELS,
            (_, Channel::Phase) => 2 * self.band_samples,
            _ => self.band_samples,
        }
    }

    /// Band whose spectra are the main input, if the input is a spectrum.
    pub fn input_band(&self) -> Option<Band> {
        match self.direction {
            Direction::Forward => None,
            Direction::Inverse => Some(self.target.band),
            Direction::Spectral => Some(self.target.band.opposite()),
        }
    }
}
