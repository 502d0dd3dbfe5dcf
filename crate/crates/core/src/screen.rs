//! The 25×25 binary metasurface screen and its token encoding.
//!
//! A cell value of 1 is a metal patch, 0 is bare substrate. Column `i` of the
//! grid becomes token `i`, with row 0 as the least significant bit.

use std::collections::VecDeque;
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Pixels along one side of the screen.
pub const SIDE: usize = 25;
/// Total pixel count.
pub const CELLS: usize = SIDE * SIDE;
/// Exclusive upper bound on a token value.
pub const TOKEN_LIMIT: u32 = 1 << SIDE;
/// Bytes needed for the packed-bit representation.
pub const PACKED_BYTES: usize = CELLS.div_ceil(8);

#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct PixelGrid {
    cells: [[bool; SIDE]; SIDE],
}

impl PixelGrid {
    pub fn zeros() -> Self {
        Self {
            cells: [[false; SIDE]; SIDE],
        }
    }

    pub fn ones() -> Self {
        Self {
            cells: [[true; SIDE]; SIDE],
        }
    }

    /// Builds a grid from 0/1 values, rejecting anything else.
    pub fn from_values(values: &[[u8; SIDE]; SIDE]) -> Result<Self> {
        let mut grid = Self::zeros();
        for (r, row) in values.iter().enumerate() {
            for (c, &v) in row.iter().enumerate() {
                grid.cells[r][c] = match v {
                    0 => false,
                    1 => true,
                    other => {
                        return Err(Error::domain(format!(
                            "cell ({r},{c}) holds {other}; cells must be 0 or 1"
                        )))
                    }
                };
            }
        }
        Ok(grid)
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> bool {
        self.cells[row][col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, value: bool) {
        self.cells[row][col] = value;
    }

    pub fn rows(&self) -> &[[bool; SIDE]; SIDE] {
        &self.cells
    }

    pub fn count_ones(&self) -> usize {
        self.cells.iter().flatten().filter(|&&b| b).count()
    }

    /// Reflection about the vertical centerline (column `c` ↔ `24 - c`).
    pub fn mirror(&self) -> Self {
        let mut out = *self;
        for row in out.cells.iter_mut() {
            row.reverse();
        }
        out
    }

    pub fn is_mirror_symmetric(&self) -> bool {
        *self == self.mirror()
    }

    /// Row-major cell values as 0.0/1.0.
    pub fn to_f64(&self) -> Vec<f64> {
        self.cells
            .iter()
            .flatten()
            .map(|&b| if b { 1.0 } else { 0.0 })
            .collect()
    }

    pub fn to_tokens(&self) -> TokenSequence {
        let mut tokens = [0u32; SIDE];
        for (col, token) in tokens.iter_mut().enumerate() {
            for row in 0..SIDE {
                if self.cells[row][col] {
                    *token |= 1 << row;
                }
            }
        }
        TokenSequence { tokens }
    }

    pub fn from_tokens(seq: &TokenSequence) -> Self {
        let mut grid = Self::zeros();
        for (col, &token) in seq.tokens.iter().enumerate() {
            for row in 0..SIDE {
                grid.cells[row][col] = token >> row & 1 == 1;
            }
        }
        grid
    }

    /// Row-major bits, least significant bit first within each byte.
    pub fn to_packed(&self) -> [u8; PACKED_BYTES] {
        let mut out = [0u8; PACKED_BYTES];
        for (i, &b) in self.cells.iter().flatten().enumerate() {
            if b {
                out[i / 8] |= 1 << (i % 8);
            }
        }
        out
    }

    pub fn from_packed(bytes: &[u8]) -> Result<Self> {
        if bytes.len() != PACKED_BYTES {
            return Err(Error::Format {
                what: "packed grid",
                detail: format!("expected {PACKED_BYTES} bytes, got {}", bytes.len()),
            });
        }
        let padding = bytes[PACKED_BYTES - 1] >> (CELLS % 8);
        if padding != 0 {
            return Err(Error::Format {
                what: "packed grid",
                detail: "nonzero padding bits".into(),
            });
        }
        let mut grid = Self::zeros();
        for i in 0..CELLS {
            grid.cells[i / SIDE][i % SIDE] = bytes[i / 8] >> (i % 8) & 1 == 1;
        }
        Ok(grid)
    }

    /// Stable 64-bit digest of the pattern, used to key per-grid random streams.
    pub fn stable_hash(&self) -> u64 {
        let digest = Sha256::digest(self.to_packed());
        u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
    }

    pub fn features(&self) -> PatternFeatures {
        extract_features(self)
    }

    /// 25 lines of 25 `0`/`1` characters, each newline-terminated.
    pub fn to_text(&self) -> String {
        let mut s = String::with_capacity(SIDE * (SIDE + 1));
        for row in &self.cells {
            for &b in row {
                s.push(if b { '1' } else { '0' });
            }
            s.push('\n');
        }
        s
    }

    /// Parses the grid text format. Errors name the 1-based offending line.
    pub fn parse_text(text: &str) -> Result<Self> {
        let mut grid = Self::zeros();
        let mut lines = text.lines();
        for r in 0..SIDE {
            let line_no = r + 1;
            let line = lines.next().ok_or_else(|| Error::Format {
                what: "pattern file",
                detail: format!("line {line_no}: missing (expected {SIDE} lines)"),
            })?;
            let line = line.strip_suffix('\r').unwrap_or(line);
            if line.chars().count() != SIDE {
                return Err(Error::Format {
                    what: "pattern file",
                    detail: format!(
                        "line {line_no}: expected {SIDE} characters, found {}",
                        line.chars().count()
                    ),
                });
            }
            for (c, ch) in line.chars().enumerate() {
                grid.cells[r][c] = match ch {
                    '0' => false,
                    '1' => true,
                    other => {
                        return Err(Error::Format {
                            what: "pattern file",
                            detail: format!("line {line_no}: unexpected character {other:?}"),
                        })
                    }
                };
            }
        }
        if let Some((extra, _)) = lines.enumerate().find(|(_, l)| !l.trim().is_empty()) {
            return Err(Error::Format {
                what: "pattern file",
                detail: format!("line {}: trailing content", SIDE + extra + 1),
            });
        }
        Ok(grid)
    }
}

impl Default for PixelGrid {
    fn default() -> Self {
        Self::zeros()
    }
}

impl fmt::Debug for PixelGrid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "PixelGrid(\n{})", self.to_text())
    }
}

/// 25 column tokens, each `< 2^25`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct TokenSequence {
    tokens: [u32; SIDE],
}

impl TokenSequence {
    pub fn new(tokens: [u32; SIDE]) -> Result<Self> {
        if let Some((i, &t)) = tokens.iter().enumerate().find(|(_, &t)| t >= TOKEN_LIMIT) {
            return Err(Error::domain(format!(
                "token {i} = {t} exceeds the 25-bit limit {}",
                TOKEN_LIMIT - 1
            )));
        }
        Ok(Self { tokens })
    }

    pub fn from_slice(tokens: &[u32]) -> Result<Self> {
        let arr: [u32; SIDE] = tokens
            .try_into()
            .map_err(|_| Error::domain(format!("expected {SIDE} tokens, got {}", tokens.len())))?;
        Self::new(arr)
    }

    pub fn tokens(&self) -> &[u32; SIDE] {
        &self.tokens
    }

    /// Each token unpacked to its 25 bits (row 0 first), token-major.
    pub fn to_bit_vectors(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(CELLS);
        for &t in &self.tokens {
            for bit in 0..SIDE {
                out.push(f64::from(t >> bit & 1));
            }
        }
        out
    }
}

/// Physical dimensions of one unit cell. Carried as metadata only.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnitGeometry {
    pub period_um: f64,
    pub pixel_side_um: f64,
    pub metal_thickness_nm: f64,
    pub substrate_thickness_um: f64,
    pub substrate_material: String,
}

impl Default for UnitGeometry {
    fn default() -> Self {
        Self {
            period_um: 200.0,
            pixel_side_um: 8.0,
            metal_thickness_nm: 200.0,
            substrate_thickness_um: 500.0,
            substrate_material: "high-resistance silicon".into(),
        }
    }
}

impl UnitGeometry {
    pub fn validate(&self) -> Result<()> {
        let lengths = [
            self.period_um,
            self.pixel_side_um,
            self.metal_thickness_nm,
            self.substrate_thickness_um,
        ];
        if lengths.iter().any(|&l| !(l > 0.0)) {
            return Err(Error::domain(
                "all unit-cell lengths must be strictly positive",
            ));
        }
        if self.pixel_side_um * SIDE as f64 > self.period_um {
            return Err(Error::domain(format!(
                "{SIDE} pixels of {} µm do not fit in a {} µm period",
                self.pixel_side_um, self.period_um
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PatternFeatures {
    pub fill_fraction: f64,
    pub column_fill: [f64; SIDE],
    pub row_fill: [f64; SIDE],
    /// Normalized Hamming distance between the grid and its mirror image.
    pub mirror_asymmetry: f64,
    /// 4-connected metal regions.
    pub component_count: usize,
}

/// Samples a grid with each cell independently set with probability `fill_prob`.
pub fn random_pattern(seed: u64, fill_prob: f64) -> Result<PixelGrid> {
    if !(0.0..=1.0).contains(&fill_prob) {
        return Err(Error::domain(format!(
            "fill probability {fill_prob} outside [0, 1]"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut grid = PixelGrid::zeros();
    for r in 0..SIDE {
        for c in 0..SIDE {
            grid.cells[r][c] = rng.gen::<f64>() < fill_prob;
        }
    }
    Ok(grid)
}

pub fn extract_features(grid: &PixelGrid) -> PatternFeatures {
    let mut column_fill = [0.0; SIDE];
    let mut row_fill = [0.0; SIDE];
    for r in 0..SIDE {
        for c in 0..SIDE {
            if grid.cells[r][c] {
                column_fill[c] += 1.0;
                row_fill[r] += 1.0;
            }
        }
    }
    column_fill.iter_mut().for_each(|v| *v /= SIDE as f64);
    row_fill.iter_mut().for_each(|v| *v /= SIDE as f64);

    let mirrored = grid.mirror();
    let mismatches = grid
        .cells
        .iter()
        .flatten()
        .zip(mirrored.cells.iter().flatten())
        .filter(|(a, b)| a != b)
        .count();

    PatternFeatures {
        fill_fraction: grid.count_ones() as f64 / CELLS as f64,
        column_fill,
        row_fill,
        mirror_asymmetry: mismatches as f64 / CELLS as f64,
        component_count: count_components(grid),
    }
}

fn count_components(grid: &PixelGrid) -> usize {
    let mut seen = [[false; SIDE]; SIDE];
    let mut queue = VecDeque::new();
    let mut count = 0;
    for r0 in 0..SIDE {
        for c0 in 0..SIDE {
            if !grid.cells[r0][c0] || seen[r0][c0] {
                continue;
            }
            count += 1;
            seen[r0][c0] = true;
            queue.push_back((r0, c0));
            while let Some((r, c)) = queue.pop_front() {
                let neighbours = [
                    (r.wrapping_sub(1), c),
                    (r + 1, c),
                    (r, c.wrapping_sub(1)),
                    (r, c + 1),
                ];
                for (nr, nc) in neighbours {
                    if nr < SIDE && nc < SIDE && grid.cells[nr][nc] && !seen[nr][nc] {
                        seen[nr][nc] = true;
                        queue.push_back((nr, nc));
                    }
                }
            }
        }
    }
    count
}
