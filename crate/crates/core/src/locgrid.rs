//! Discretization of pixel boxes onto a `P x P` grid of location tokens.
//!
//! Each side of the image is split into `P` equal real-valued intervals
//! `[k*W/P, (k+1)*W/P)`. A cell is named by one token; a box becomes the
//! pair (top-left cell, bottom-right cell) and decodes back to the centers
//! of those two cells.
//!
//! Tokens are numbered zero-based in row-major order. [`token_of_cell`] and
//! [`cell_of_token`] are the only functions that encode that ordering.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::PixelBox;

pub const DEFAULT_BINS: u32 = 32;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum GridError {
    #[error("grid must have at least one bin per side")]
    NoBins,
    #[error("image dimensions must be positive, got {width}x{height}")]
    EmptyImage { width: u32, height: u32 },
    #[error("cell ({row}, {col}) is outside a {bins}x{bins} grid")]
    CellOutOfRange { row: u32, col: u32, bins: u32 },
    #[error("location token {index} is outside a vocabulary of {vocab}")]
    TokenOutOfRange { index: u32, vocab: u32 },
    #[error("top-left token {tl} lies below or right of bottom-right token {br}")]
    InvertedPair { tl: u32, br: u32 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ImageDims {
    pub width: u32,
    pub height: u32,
}

impl ImageDims {
    pub fn new(width: u32, height: u32) -> Result<Self, GridError> {
        if width == 0 || height == 0 {
            return Err(GridError::EmptyImage { width, height });
        }
        Ok(Self { width, height })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct GridSpec {
    bins: u32,
}

impl GridSpec {
    /// The 32 x 32 grid, 1024 location tokens.
    pub const DEFAULT: Self = Self { bins: DEFAULT_BINS };

    pub fn new(bins: u32) -> Result<Self, GridError> {
        if bins == 0 {
            return Err(GridError::NoBins);
        }
        Ok(Self { bins })
    }

    pub fn bins(&self) -> u32 {
        self.bins
    }

    /// Number of location tokens, `P * P`.
    pub fn vocab_size(&self) -> u32 {
        self.bins * self.bins
    }

    pub fn check_token(&self, index: u32) -> Result<LocToken, GridError> {
        if index >= self.vocab_size() {
            return Err(GridError::TokenOutOfRange {
                index,
                vocab: self.vocab_size(),
            });
        }
        Ok(LocToken(index))
    }
}

impl Default for GridSpec {
    fn default() -> Self {
        Self::DEFAULT
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LocToken(pub u32);

impl LocToken {
    pub fn index(self) -> u32 {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenBoxPair {
    pub tl: LocToken,
    pub br: LocToken,
}

impl TokenBoxPair {
    /// Checks range and corner ordering.
    pub fn new(tl: u32, br: u32, grid: GridSpec) -> Result<Self, GridError> {
        let tl = grid.check_token(tl)?;
        let br = grid.check_token(br)?;
        let (tr, tc) = cell_of_token(tl, grid);
        let (br_row, br_col) = cell_of_token(br, grid);
        if tr > br_row || tc > br_col {
            return Err(GridError::InvertedPair { tl: tl.0, br: br.0 });
        }
        Ok(Self { tl, br })
    }
}

pub fn token_of_cell(row: u32, col: u32, grid: GridSpec) -> Result<LocToken, GridError> {
    let p = grid.bins();
    if row >= p || col >= p {
        return Err(GridError::CellOutOfRange { row, col, bins: p });
    }
    Ok(LocToken(row * p + col))
}

/// Returns `(row, col)`. The token must already be in range for `grid`.
pub fn cell_of_token(token: LocToken, grid: GridSpec) -> (u32, u32) {
    (token.0 / grid.bins(), token.0 % grid.bins())
}

fn bin_of(coord: f64, extent: u32, bins: u32) -> u32 {
    let raw = (coord * bins as f64 / extent as f64).floor();
    raw.clamp(0.0, (bins - 1) as f64) as u32
}

fn center_of(bin: u32, extent: u32, bins: u32) -> f64 {
    (bin as f64 + 0.5) * extent as f64 / bins as f64
}

/// Maps both corners to their cells. Coordinates outside the image are
/// clamped into the border bins, so `x == W` lands in the last column.
pub fn quantize_box(bbox: &PixelBox, dims: ImageDims, grid: GridSpec) -> TokenBoxPair {
    let p = grid.bins();
    let cell = |x: f64, y: f64| {
        let col = bin_of(x, dims.width, p);
        let row = bin_of(y, dims.height, p);
        LocToken(row * p + col)
    };
    TokenBoxPair {
        tl: cell(bbox.x1, bbox.y1),
        br: cell(bbox.x2, bbox.y2),
    }
}

pub fn dequantize_box(pair: &TokenBoxPair, dims: ImageDims, grid: GridSpec) -> PixelBox {
    let p = grid.bins();
    let (r1, c1) = cell_of_token(pair.tl, grid);
    let (r2, c2) = cell_of_token(pair.br, grid);
    PixelBox {
        x1: center_of(c1, dims.width, p),
        y1: center_of(r1, dims.height, p),
        x2: center_of(c2, dims.width, p),
        y2: center_of(r2, dims.height, p),
    }
}
