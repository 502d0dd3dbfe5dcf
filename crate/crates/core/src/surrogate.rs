//! Deterministic stand-in for a full-wave solver.
//!
//! A screen is reduced to a handful of Lorentzian resonators. Their transmission
//! dips shape `amp_x`, their cross-polarized share feeds `amp_y`, and each adds a
//! phase step on top of a fixed group delay. Resonator linewidths are loaded by
//! the metal's ohmic loss, taken from the Drude permittivity. A damping envelope
//! and a frequency-proportional noise floor make the upper band carry less
//! usable signal than the lower one; both can be switched off.

use std::f64::consts::PI;
use std::io::Write;
use std::ops::Range;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::screen::{PatternFeatures, PixelGrid, SIDE};

/// Boundary between the low and high analysis bands, in THz.
pub const BAND_SPLIT_THZ: f64 = 1.0;

/// Uniform frequency sampling in THz, endpoints included.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FrequencyGrid {
    pub count: usize,
    pub f_min: f64,
    pub f_max: f64,
}

impl Default for FrequencyGrid {
    /// 1024 samples at multiples of 2/1024 THz, so that 1 THz is exactly sample 511.
    fn default() -> Self {
        Self {
            count: 1024,
            f_min: 2.0 / 1024.0,
            f_max: 2.0,
        }
    }
}

impl FrequencyGrid {
    pub fn new(count: usize, f_min: f64, f_max: f64) -> Result<Self> {
        let grid = Self {
            count,
            f_min,
            f_max,
        };
        grid.validate()?;
        Ok(grid)
    }

    /// `count` samples ending at `f_max` with spacing `f_max / count`.
    pub fn uniform_from_zero(count: usize, f_max: f64) -> Result<Self> {
        Self::new(count, f_max / count as f64, f_max)
    }

    pub fn validate(&self) -> Result<()> {
        if self.count < 2 {
            return Err(Error::domain("frequency grid needs at least 2 samples"));
        }
        if !(self.f_min > 0.0) {
            return Err(Error::domain(format!(
                "f_min = {} must be > 0 (the Drude loss term has a pole at 0)",
                self.f_min
            )));
        }
        if !(self.f_max > self.f_min) || !self.f_max.is_finite() {
            return Err(Error::domain("f_max must be finite and exceed f_min"));
        }
        Ok(())
    }

    pub fn step(&self) -> f64 {
        (self.f_max - self.f_min) / (self.count - 1) as f64
    }

    pub fn point(&self, i: usize) -> f64 {
        if i + 1 == self.count {
            self.f_max
        } else {
            self.f_min + self.step() * i as f64
        }
    }

    pub fn points(&self) -> Vec<f64> {
        (0..self.count).map(|i| self.point(i)).collect()
    }

    /// Index range of the samples inside `band`: `(0, 1]` THz for low, `(1, 2]` for high.
    pub fn band_range(&self, band: Band) -> Result<Range<usize>> {
        let pts = self.points();
        let split = pts.partition_point(|&f| f <= BAND_SPLIT_THZ);
        let range = match band {
            Band::Low => 0..split,
            Band::High => split..pts.partition_point(|&f| f <= 2.0 * BAND_SPLIT_THZ),
        };
        if range.is_empty() {
            return Err(Error::domain(format!(
                "{band} band holds no samples of a grid over [{}, {}] THz",
                self.f_min, self.f_max
            )));
        }
        Ok(range)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Band {
    Low,
    High,
}

impl Band {
    pub const ALL: [Band; 2] = [Band::Low, Band::High];

    pub fn opposite(self) -> Band {
        match self {
            Band::Low => Band::High,
            Band::High => Band::Low,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Band::Low => "low",
            Band::High => "high",
        }
    }
}

impl std::fmt::Display for Band {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Band {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "low" => Ok(Band::Low),
            "high" => Ok(Band::High),
            other => Err(Error::config(format!("unknown band {other:?}"))),
        }
    }
}

/// Drude parameters in rad/ps (angular THz).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DrudeParams {
    pub omega_p: f64,
    pub gamma: f64,
}

impl Default for DrudeParams {
    /// Aluminium: plasma frequency ≈ 3570 THz, scattering rate ≈ 19.4 THz.
    fn default() -> Self {
        Self {
            omega_p: 2.0 * PI * 3570.0,
            gamma: 2.0 * PI * 19.4,
        }
    }
}

impl DrudeParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.omega_p > 0.0) || !(self.gamma > 0.0) {
            return Err(Error::domain("omega_p and gamma must be positive"));
        }
        Ok(())
    }
}

/// ε(ω) = 1 − ωp²/(ω²+γ²) + i·ωp²γ/(ω(ω²+γ²)).
pub fn drude_permittivity(omega: f64, params: &DrudeParams) -> Result<Complex64> {
    if !(omega > 0.0) {
        return Err(Error::domain(format!(
            "omega = {omega}: permittivity is undefined for omega <= 0"
        )));
    }
    params.validate()?;
    let wp2 = params.omega_p * params.omega_p;
    let denom = omega * omega + params.gamma * params.gamma;
    Ok(Complex64::new(
        1.0 - wp2 / denom,
        wp2 * params.gamma / (omega * denom),
    ))
}

/// Every constant the oracle uses besides the frequency grid.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OracleConfig {
    pub drude: DrudeParams,
    /// Bare-substrate transmission.
    pub t0: f64,
    /// Exponent of the damping envelope `exp(-alpha f / f_max)`.
    pub alpha: f64,
    /// Noise-floor amplitude at `f_max`.
    pub eta0: f64,
    /// Group delay in ps; 4 ps gives 8 phase cycles over 0–2 THz.
    pub tau_ps: f64,
    /// Scale from surface resistance `Re(1/sqrt(ε))` to extra `1/Q`.
    pub loss_coupling: f64,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            drude: DrudeParams::default(),
            t0: 0.7,
            alpha: 0.5,
            eta0: 0.01,
            tau_ps: 4.0,
            loss_coupling: 5.0,
        }
    }
}

impl OracleConfig {
    /// Same oracle with the damping envelope and noise floor switched off.
    pub fn undamped(&self) -> Self {
        Self {
            alpha: 0.0,
            eta0: 0.0,
            ..*self
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.drude.validate()?;
        if !(0.0..=1.0).contains(&self.t0) {
            return Err(Error::domain("t0 must lie in [0, 1]"));
        }
        if !(self.alpha >= 0.0) || !(self.eta0 >= 0.0) || !(self.tau_ps >= 0.0) {
            return Err(Error::domain("alpha, eta0 and tau must be non-negative"));
        }
        if !(self.loss_coupling >= 0.0) {
            return Err(Error::domain("loss coupling must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Resonator {
    /// Center frequency in THz.
    pub f0: f64,
    pub q_factor: f64,
    pub strength: f64,
    pub cross_pol_fraction: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpectralResponse {
    pub amp_x: Vec<f64>,
    pub amp_y: Vec<f64>,
    /// Wrapped to `[-π, π]`.
    pub phase: Vec<f64>,
}

impl SpectralResponse {
    pub fn len(&self) -> usize {
        self.amp_x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.amp_x.is_empty()
    }

    pub fn slice(&self, range: Range<usize>) -> SpectralResponse {
        SpectralResponse {
            amp_x: self.amp_x[range.clone()].to_vec(),
            amp_y: self.amp_y[range.clone()].to_vec(),
            phase: self.phase[range].to_vec(),
        }
    }

    /// CSV with header `f_thz,amp_x,amp_y,phase`, shortest round-trip decimals.
    pub fn write_csv<W: Write>(&self, freq: &FrequencyGrid, out: W) -> Result<()> {
        if freq.count != self.len() {
            return Err(Error::domain(format!(
                "response has {} samples, grid has {}",
                self.len(),
                freq.count
            )));
        }
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["f_thz", "amp_x", "amp_y", "phase"])?;
        for i in 0..self.len() {
            w.write_record(&[
                freq.point(i).to_string(),
                self.amp_x[i].to_string(),
                self.amp_y[i].to_string(),
                self.phase[i].to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Column groups that each host one resonator slot.
const SLOT_COLUMNS: [Range<usize>; 6] = [0..4, 4..8, 8..12, 12..16, 16..20, 20..SIDE];
/// Minimum group fill for a slot to resonate.
const ACTIVE_FILL: f64 = 0.3;
const F0_LOW: f64 = 0.2;
const F0_HIGH: f64 = 1.9;
/// Slot centers move by this many THz per unit of (group fill − mean fill).
const FILL_DETUNING: f64 = 0.3;
/// Half-range in THz of the per-grid frequency offset.
const SHIFT_SPAN: f64 = 0.03;
/// Per-grid linewidth scale lies in `[LW_MIN, LW_MIN + LW_SPAN]`.
const LW_MIN: f64 = 0.8;
const LW_SPAN: f64 = 0.45;
const CROSS_POL_GAIN: f64 = 1.2;
/// Geometric full width in THz before the per-grid scale and loss loading.
const BASE_LINEWIDTH: f64 = 0.08;

/// Maps a screen to its resonators.
///
/// Slot `k` sits over column group `k` and resonates when that group is at
/// least 30% metal (the fullest group always resonates on a non-empty grid).
/// Centers are spread over (0.2, 1.9) THz and pulled down by locally dense
/// metal. Strength follows the fill fraction, cross-polarization the mirror
/// asymmetry. A hash of the grid picks a global frequency scale (±3%) and
/// linewidth scale shared by all slots.
pub fn derive_resonators(features: &PatternFeatures, grid: &PixelGrid) -> Vec<Resonator> {
    if features.fill_fraction == 0.0 {
        return Vec::new();
    }
    let group_fill: Vec<f64> = SLOT_COLUMNS
        .iter()
        .map(|cols| cols.clone().map(|c| features.column_fill[c]).sum::<f64>() / cols.len() as f64)
        .collect();

    let mut latent = ChaCha8Rng::seed_from_u64(grid.stable_hash() ^ 0x005e_ed0f_7e50_a7e5);
    let shift = SHIFT_SPAN * (2.0 * latent.gen::<f64>() - 1.0);
    let linewidth = LW_MIN + LW_SPAN * latent.gen::<f64>();

    let fullest =
        group_fill.iter().enumerate().fold(
            0,
            |best, (k, &g)| if g > group_fill[best] { k } else { best },
        );

    let cross_pol = (CROSS_POL_GAIN * features.mirror_asymmetry).min(1.0);
    let slots = SLOT_COLUMNS.len() as f64;
    group_fill
        .iter()
        .enumerate()
        .filter(|&(k, &g)| g >= ACTIVE_FILL || k == fullest)
        .map(|(k, &g)| {
            let center = F0_LOW + (F0_HIGH - F0_LOW) * (k as f64 + 0.5) / slots;
            let detune = -FILL_DETUNING * (g - features.fill_fraction);
            let f0 = (center + detune + shift).clamp(F0_LOW + 1e-3, F0_HIGH - 1e-3);
            let width = BASE_LINEWIDTH * linewidth;
            Resonator {
                f0,
                q_factor: f0 / width,
                strength: (features.fill_fraction * (0.6 + 0.8 * g)).min(1.0),
                cross_pol_fraction: cross_pol,
            }
        })
        .collect()
}

/// Unit-peak Lorentzian and its phase: `(1/(1+x²), atan2(x, 1))` with `x = 2(f−f0)/width`.
fn lorentzian(f: f64, f0: f64, width: f64) -> (f64, f64) {
    let x = 2.0 * (f - f0) / width;
    (1.0 / (1.0 + x * x), x.atan2(1.0))
}

pub fn wrap_phase(phi: f64) -> f64 {
    let wrapped = (phi + PI).rem_euclid(2.0 * PI) - PI;
    if wrapped < -PI {
        -PI
    } else {
        wrapped
    }
}

/// Linewidth after loading the geometric Q with the metal's surface resistance at `f0`.
fn loaded_width(r: &Resonator, cfg: &OracleConfig) -> Result<f64> {
    let eps = drude_permittivity(2.0 * PI * r.f0, &cfg.drude)?;
    let surface_resistance = (1.0 / eps.sqrt()).re.max(0.0);
    let inv_q = 1.0 / r.q_factor + cfg.loss_coupling * surface_resistance;
    Ok(r.f0 * inv_q)
}

pub fn simulate(
    grid: &PixelGrid,
    freq: &FrequencyGrid,
    cfg: &OracleConfig,
) -> Result<SpectralResponse> {
    freq.validate()?;
    cfg.validate()?;
    let resonators = derive_resonators(&grid.features(), grid);
    let widths = resonators
        .iter()
        .map(|r| loaded_width(r, cfg))
        .collect::<Result<Vec<_>>>()?;

    let mut noise = ChaCha8Rng::seed_from_u64(grid.stable_hash() ^ 0x0a15_e0f1_00f0_0d5e);
    let mut out = SpectralResponse {
        amp_x: Vec::with_capacity(freq.count),
        amp_y: Vec::with_capacity(freq.count),
        phase: Vec::with_capacity(freq.count),
    };
    for i in 0..freq.count {
        let f = freq.point(i);
        let envelope = (-cfg.alpha * f / freq.f_max).exp();
        let mut through = cfg.t0;
        let mut converted = 0.0;
        let mut phase = -2.0 * PI * f * cfg.tau_ps;
        for (r, &w) in resonators.iter().zip(&widths) {
            let (l, arg) = lorentzian(f, r.f0, w);
            through *= 1.0 - r.strength * (1.0 - r.cross_pol_fraction) * l;
            converted += r.strength * r.cross_pol_fraction * l;
            phase += r.strength * arg;
        }
        let floor = cfg.eta0 * f / freq.f_max;
        let (nx, ny, np) = (noise.gen::<f64>(), noise.gen::<f64>(), noise.gen::<f64>());
        let ax = (through * envelope).clamp(0.0, 1.0);
        let ay = (converted * envelope).clamp(0.0, 1.0);
        out.amp_x.push((ax + floor * nx).clamp(0.0, 1.0));
        out.amp_y.push((ay + floor * ny).clamp(0.0, 1.0));
        out.phase.push(wrap_phase(wrap_phase(phase) + floor * np));
    }
    Ok(out)
}

/// Restricts a response to the samples of `band`.
pub fn band_slice(
    resp: &SpectralResponse,
    freq: &FrequencyGrid,
    band: Band,
) -> Result<SpectralResponse> {
    if resp.len() != freq.count {
        return Err(Error::domain(format!(
            "response has {} samples, grid has {}",
            resp.len(),
            freq.count
        )));
    }
    Ok(resp.slice(freq.band_range(band)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::screen::random_pattern;

    fn mirror_symmetric_grid(seed: u64) -> PixelGrid {
        let g = random_pattern(seed, 0.5).unwrap();
        let mut out = g;
        for r in 0..SIDE {
            for c in 0..SIDE / 2 + 1 {
                out.set(r, SIDE - 1 - c, g.get(r, c));
            }
        }
        assert!(out.is_mirror_symmetric());
        out
    }

    #[test]
    fn permittivity_hand_value() {
        let eps = drude_permittivity(
            1.0,
            &DrudeParams {
                omega_p: 2.0,
                gamma: 1.0,
            },
        )
        .unwrap();
        assert!((eps.re + 1.0).abs() < 1e-12);
        assert!((eps.im - 2.0).abs() < 1e-12);
    }

    #[test]
    fn permittivity_limits() {
        let p = DrudeParams {
            omega_p: 3.0,
            gamma: 3e-9,
        };
        assert!(drude_permittivity(3.0, &p).unwrap().re.abs() < 1e-6);

        let p = DrudeParams {
            omega_p: 5.0,
            gamma: 2.0,
        };
        let eps = drude_permittivity(5e3, &p).unwrap();
        assert!((eps - Complex64::new(1.0, 0.0)).norm() < 1e-5);
    }

    #[test]
    fn permittivity_rejects_nonpositive_omega() {
        let p = DrudeParams::default();
        assert!(matches!(drude_permittivity(0.0, &p), Err(Error::Domain(_))));
        assert!(drude_permittivity(-1.0, &p).is_err());
    }

    #[test]
    fn permittivity_monotone() {
        let p = DrudeParams {
            omega_p: 10.0,
            gamma: 0.7,
        };
        let mut prev = drude_permittivity(0.01 * p.gamma, &p).unwrap();
        for i in 1..=2000 {
            let w = p.gamma * 0.01 * (1e4f64).powf(i as f64 / 2000.0);
            let eps = drude_permittivity(w, &p).unwrap();
            assert!(eps.re > prev.re && eps.im < prev.im, "at omega = {w}");
            prev = eps;
        }
    }

    #[test]
    fn default_grid_splits_evenly() {
        let f = FrequencyGrid::default();
        assert_eq!(f.band_range(Band::Low).unwrap(), 0..512);
        assert_eq!(f.band_range(Band::High).unwrap(), 512..1024);
        assert_eq!(f.point(511), 1.0);
        assert_eq!(f.point(1023), 2.0);
        let pts = f.points();
        assert!(pts.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn empty_band_is_an_error() {
        let f = FrequencyGrid::new(64, 0.01, 0.9).unwrap();
        assert!(f.band_range(Band::Low).is_ok());
        assert!(matches!(f.band_range(Band::High), Err(Error::Domain(_))));
        assert!(FrequencyGrid::new(64, 0.0, 2.0).is_err());
    }

    #[test]
    fn empty_grid_has_no_resonators() {
        let g = PixelGrid::zeros();
        assert!(derive_resonators(&g.features(), &g).is_empty());
    }

    #[test]
    fn resonators_respect_bounds_and_symmetry() {
        for seed in 0..50 {
            let g = random_pattern(seed, 0.05 + 0.018 * seed as f64).unwrap();
            let rs = derive_resonators(&g.features(), &g);
            assert!((1..=6).contains(&rs.len()));
            for r in &rs {
                assert!(r.f0 > 0.2 && r.f0 < 1.9);
                assert!(r.q_factor > 0.0);
                assert!((0.0..=1.0).contains(&r.strength));
                assert!((0.0..=1.0).contains(&r.cross_pol_fraction));
            }
            assert_eq!(rs, derive_resonators(&g.features(), &g));

            let s = mirror_symmetric_grid(seed);
            assert!(derive_resonators(&s.features(), &s)
                .iter()
                .all(|r| r.cross_pol_fraction == 0.0));
        }
    }

    #[test]
    fn empty_grid_spectrum() {
        let cfg = OracleConfig::default();
        let freq = FrequencyGrid::default();
        let resp = simulate(&PixelGrid::zeros(), &freq, &cfg).unwrap();
        for (i, f) in freq.points().into_iter().enumerate() {
            assert!(resp.amp_y[i] <= cfg.eta0);
            let bare = cfg.t0 * (-cfg.alpha * f / freq.f_max).exp();
            assert!((resp.amp_x[i] - bare).abs() <= cfg.eta0);
        }
    }

    #[test]
    fn spectra_bounds_and_determinism() {
        let cfg = OracleConfig::default();
        let freq = FrequencyGrid::default();
        for seed in 0..20 {
            let g = random_pattern(seed, 0.5).unwrap();
            let a = simulate(&g, &freq, &cfg).unwrap();
            assert_eq!(a, simulate(&g, &freq, &cfg).unwrap());
            assert_eq!(a.len(), freq.count);
            assert!(a
                .amp_x
                .iter()
                .chain(&a.amp_y)
                .all(|v| (0.0..=1.0).contains(v)));
            assert!(a.phase.iter().all(|p| (-PI..=PI).contains(p)));

            let s = mirror_symmetric_grid(seed);
            let b = simulate(&s, &freq, &cfg).unwrap();
            assert!(b.amp_y.iter().all(|&v| v <= cfg.eta0));
        }
    }

    #[test]
    fn band_slices_partition_the_response() {
        let freq = FrequencyGrid::default();
        let resp = simulate(
            &random_pattern(4, 0.4).unwrap(),
            &freq,
            &OracleConfig::default(),
        )
        .unwrap();
        let low = band_slice(&resp, &freq, Band::Low).unwrap();
        let high = band_slice(&resp, &freq, Band::High).unwrap();
        assert_eq!((low.len(), high.len()), (512, 512));
        let joined: Vec<f64> = low.amp_x.iter().chain(&high.amp_x).copied().collect();
        assert_eq!(joined, resp.amp_x);
        let joined: Vec<f64> = low.phase.iter().chain(&high.phase).copied().collect();
        assert_eq!(joined, resp.phase);
    }

    #[test]
    fn wrap_phase_range() {
        for k in -50..50 {
            let p = wrap_phase(k as f64 * 0.77);
            let raw = k as f64 * 0.77;
            assert!((-PI..=PI).contains(&p));
            assert!((p.sin() - raw.sin()).abs() < 1e-9 && (p.cos() - raw.cos()).abs() < 1e-9);
        }
    }

    #[test]
    fn csv_export_header() {
        let freq = FrequencyGrid::new(4, 0.5, 2.0).unwrap();
        let resp = simulate(&PixelGrid::zeros(), &freq, &OracleConfig::default()).unwrap();
        let mut buf = Vec::new();
        resp.write_csv(&freq, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("f_thz,amp_x,amp_y,phase"));
        assert_eq!(lines.count(), 4);
    }
}
