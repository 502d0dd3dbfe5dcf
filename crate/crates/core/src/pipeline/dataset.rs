//! Surrogate datasets and their binary container.
//!
//! ```text
//! "MSDS" | u32 version | u64 n | u64 count | f64 f_min | f64 f_max
//! f64 omega_p | f64 gamma | f64 t0 | f64 alpha | f64 eta0 | f64 tau_ps | f64 loss_coupling
//! u64 generation_seed | f64 fill_lo | f64 fill_hi
//! n × { 79 packed pixel bytes | count × f64 amp_x | count × f64 amp_y | count × f64 phase }
//! ```
//! Everything little-endian.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::screen::{random_pattern, PixelGrid, PACKED_BYTES};
use crate::surrogate::{
    simulate, Band, DrudeParams, FrequencyGrid, OracleConfig, SpectralResponse,
};

pub const MAGIC: &[u8; 4] = b"MSDS";
pub const VERSION: u32 = 1;
pub const MIN_SAMPLES: usize = 10;

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub grids: Vec<PixelGrid>,
    pub responses: Vec<SpectralResponse>,
    pub freq: FrequencyGrid,
    pub oracle: OracleConfig,
    pub generation_seed: u64,
    pub fill_range: (f64, f64),
}

fn check_range(range: (f64, f64)) -> Result<()> {
    let (lo, hi) = range;
    if !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&hi) || lo > hi {
        return Err(Error::domain(format!(
            "fill range [{lo}, {hi}] must satisfy 0 ≤ lo ≤ hi ≤ 1"
        )));
    }
    Ok(())
}

/// `n` random screens with per-sample fill probability uniform in `fill_range`,
/// simulated on the default grid and oracle.
pub fn generate_dataset(n: usize, seed: u64, fill_range: (f64, f64)) -> Result<Dataset> {
    generate_dataset_with(
        n,
        seed,
        fill_range,
        &FrequencyGrid::default(),
        &OracleConfig::default(),
    )
}

pub fn generate_dataset_with(
    n: usize,
    seed: u64,
    fill_range: (f64, f64),
    freq: &FrequencyGrid,
    oracle: &OracleConfig,
) -> Result<Dataset> {
    if n < MIN_SAMPLES {
        return Err(Error::domain(format!(
            "dataset needs at least {MIN_SAMPLES} samples, got {n}"
        )));
    }
    check_range(fill_range)?;
    freq.validate()?;
    oracle.validate()?;
    let (lo, hi) = fill_range;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let grids = (0..n)
        .map(|_| {
            let u: f64 = rng.gen();
            let p = (lo + (hi - lo) * u).min(hi);
            random_pattern(rng.next_u64(), p)
        })
        .collect::<Result<Vec<_>>>()?;
    let responses = simulate_all(&grids, freq, oracle)?;
    Ok(Dataset {
        grids,
        responses,
        freq: *freq,
        oracle: *oracle,
        generation_seed: seed,
        fill_range,
    })
}

fn simulate_all(
    grids: &[PixelGrid],
    freq: &FrequencyGrid,
    oracle: &OracleConfig,
) -> Result<Vec<SpectralResponse>> {
    grids
        .par_iter()
        .map(|g| simulate(g, freq, oracle))
        .collect()
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.grids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grids.is_empty()
    }

    /// Response of sample `i` restricted to `band`.
    pub fn band(&self, i: usize, band: Band) -> SpectralResponse {
        let range = self
            .freq
            .band_range(band)
            .expect("dataset grids cover both bands");
        self.responses[i].slice(range)
    }

    pub fn band_len(&self, band: Band) -> Result<usize> {
        Ok(self.freq.band_range(band)?.len())
    }

    /// Same screens under a different oracle.
    pub fn resimulate(&self, oracle: &OracleConfig) -> Result<Dataset> {
        oracle.validate()?;
        Ok(Dataset {
            responses: simulate_all(&self.grids, &self.freq, oracle)?,
            oracle: *oracle,
            ..self.clone()
        })
    }

    /// First sample whose stored spectra differ from a fresh simulation.
    pub fn verify_regeneration(&self) -> Result<()> {
        let fresh = simulate_all(&self.grids, &self.freq, &self.oracle)?;
        match fresh
            .iter()
            .zip(&self.responses)
            .position(|(a, b)| !bit_equal(a, b))
        {
            None => Ok(()),
            Some(i) => Err(Error::domain(format!(
                "sample {i} does not regenerate from its screen"
            ))),
        }
    }

    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(self.len() as u64).to_le_bytes())?;
        w.write_all(&(self.freq.count as u64).to_le_bytes())?;
        let o = &self.oracle;
        for x in [
            self.freq.f_min,
            self.freq.f_max,
            o.drude.omega_p,
            o.drude.gamma,
            o.t0,
            o.alpha,
            o.eta0,
            o.tau_ps,
            o.loss_coupling,
        ] {
            w.write_all(&x.to_le_bytes())?;
        }
        w.write_all(&self.generation_seed.to_le_bytes())?;
        w.write_all(&self.fill_range.0.to_le_bytes())?;
        w.write_all(&self.fill_range.1.to_le_bytes())?;
        for (g, r) in self.grids.iter().zip(&self.responses) {
            w.write_all(&g.to_packed())?;
            for arr in [&r.amp_x, &r.amp_y, &r.phase] {
                for x in arr.iter() {
                    w.write_all(&x.to_le_bytes())?;
                }
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read<R: Read>(mut r: R) -> Result<Dataset> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(bad(format!("bad magic {magic:?}")));
        }
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4)?;
        let version = u32::from_le_bytes(b4);
        if version != VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let n = read_u64(&mut r)? as usize;
        let count = read_u64(&mut r)? as usize;
        if n > 1 << 24 || count > 1 << 24 {
            return Err(bad(format!("implausible header n={n} count={count}")));
        }
        let mut f = [0.0; 9];
        for x in f.iter_mut() {
            *x = read_f64(&mut r)?;
        }
        let freq = FrequencyGrid::new(count, f[0], f[1])?;
        let oracle = OracleConfig {
            drude: DrudeParams {
                omega_p: f[2],
                gamma: f[3],
            },
            t0: f[4],
            alpha: f[5],
            eta0: f[6],
            tau_ps: f[7],
            loss_coupling: f[8],
        };
        oracle.validate()?;
        let generation_seed = read_u64(&mut r)?;
        let fill_range = (read_f64(&mut r)?, read_f64(&mut r)?);
        let mut grids = Vec::with_capacity(n);
        let mut responses = Vec::with_capacity(n);
        let mut packed = [0u8; PACKED_BYTES];
        let mut raw = vec![0u8; count * 8];
        for i in 0..n {
            r.read_exact(&mut packed)
                .map_err(|e| bad(format!("record {i}: {e}")))?;
            grids.push(PixelGrid::from_packed(&packed)?);
            let mut arrays: [Vec<f64>; 3] = Default::default();
            for arr in arrays.iter_mut() {
                r.read_exact(&mut raw)
                    .map_err(|e| bad(format!("record {i}: {e}")))?;
                *arr = raw
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                    .collect();
            }
            let [amp_x, amp_y, phase] = arrays;
            responses.push(SpectralResponse {
                amp_x,
                amp_y,
                phase,
            });
        }
        let mut trailing = [0u8; 1];
        if r.read(&mut trailing)? != 0 {
            return Err(bad("trailing bytes after last record"));
        }
        Ok(Dataset {
            grids,
            responses,
            freq,
            oracle,
            generation_seed,
            fill_range,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Dataset> {
        Self::read(BufReader::new(File::open(path)?))
    }
}

fn bit_equal(a: &SpectralResponse, b: &SpectralResponse) -> bool {
    let eq = |x: &[f64], y: &[f64]| {
        x.len() == y.len() && x.iter().zip(y).all(|(p, q)| p.to_bits() == q.to_bits())
    };
    eq(&a.amp_x, &b.amp_x) && eq(&a.amp_y, &b.amp_y) && eq(&a.phase, &b.phase)
}

fn bad(detail: impl Into<String>) -> Error {
    Error::Format {
        what: "dataset",
        detail: detail.into(),
    }
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64<R: Read>(r: &mut R) -> Result<f64> {
    Ok(f64::from_bits(read_u64(r)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_freq() -> FrequencyGrid {
        FrequencyGrid::new(64, 2.0 / 64.0, 2.0).unwrap()
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_dataset_with(10, 1, (0.2, 0.8), &small_freq(), &OracleConfig::default())
            .unwrap();
        let b = generate_dataset_with(10, 1, (0.2, 0.8), &small_freq(), &OracleConfig::default())
            .unwrap();
        assert_eq!(a, b);
        let c = generate_dataset_with(10, 2, (0.2, 0.8), &small_freq(), &OracleConfig::default())
            .unwrap();
        assert_ne!(a.grids, c.grids);
    }

    #[test]
    fn empty_fill_gives_quiet_cross_pol() {
        let cfg = OracleConfig::default();
        let d = generate_dataset_with(10, 5, (0.0, 0.0), &small_freq(), &cfg).unwrap();
        for r in &d.responses {
            assert!(r.amp_y.iter().all(|&v| v <= cfg.eta0));
        }
    }

    #[test]
    fn invalid_arguments() {
        assert!(generate_dataset(9, 0, (0.2, 0.8)).is_err());
        assert!(generate_dataset(10, 0, (0.8, 0.2)).is_err());
        assert!(generate_dataset(10, 0, (-0.1, 0.2)).is_err());
        assert!(generate_dataset(10, 0, (0.1, 1.2)).is_err());
    }

    #[test]
    fn container_round_trip_and_regeneration() {
        let d = generate_dataset_with(12, 9, (0.1, 0.9), &small_freq(), &OracleConfig::default())
            .unwrap();
        let mut buf = Vec::new();
        d.write(&mut buf).unwrap();
        assert_eq!(
            buf.len(),
            4 + 4 + 16 + 9 * 8 + 8 + 16 + 12 * (PACKED_BYTES + 3 * 64 * 8)
        );
        let back = Dataset::read(buf.as_slice()).unwrap();
        assert_eq!(back, d);
        back.verify_regeneration().unwrap();

        let mut tampered = back.clone();
        tampered.responses[7].phase[3] += 1e-12;
        let err = tampered.verify_regeneration().unwrap_err().to_string();
        assert!(err.contains("sample 7"), "{err}");

        assert!(Dataset::read(&buf[..buf.len() - 3]).is_err());
    }
}
