//! Parameterless oriented binary edges.
//!
//! Channel `d` holds edges whose intensity increases towards direction
//! `d·45°` (E, NE, N, NW, W, SW, S, SE, counter-clockwise on screen). For a
//! pixel `p` with unit offset `u` the directed difference is taken across the
//! pixel pair `(p − u, p + u)`:
//!
//! ```text
//! δ = I(p + u) − I(p − u)
//! ```
//!
//! The bit is ON when `δ > τ` and `δ` strictly exceeds the absolute value of
//! six flanking differences: the two parallel ones `I(p∓u) − I(p∓2u)` and the
//! four lateral ones `I(p±u) − I(p±u±v)` with `v ⟂ u`. Intensities are
//! compared in 2⁻²⁴ fixed point, which keeps the rule exactly equivariant
//! under quarter turns and under intensity inversion (`d → d + 4`).

use crate::error::{Error, Result};
use crate::map::{FeatureMap, GrayImage};

/// Number of edge channels per intensity channel.
pub const EDGE_CHANNELS: usize = 8;

/// Pixels within this Chebyshev distance of the border are always OFF.
pub const EDGE_MARGIN: usize = 2;

const SCALE: f64 = (1u64 << 24) as f64;

/// `(dy, dx)` offsets for the eight directions; `y` grows downwards.
pub const DIRECTIONS: [(isize, isize); 8] = [(0, 1), (-1, 1), (-1, 0), (-1, -1), (0, -1), (1, -1), (1, 0), (1, 1)];

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EdgeConfig {
    /// Absolute floor `τ` on the directed difference.
    pub threshold: f64,
}

impl Default for EdgeConfig {
    fn default() -> Self {
        EdgeConfig { threshold: 0.02 }
    }
}

pub fn extract_edges(img: &GrayImage, cfg: &EdgeConfig) -> Result<FeatureMap> {
    let (h, w) = (img.height(), img.width());
    let min = 2 * EDGE_MARGIN + 1;
    if h < min || w < min {
        return Err(Error::InvalidArgument(format!(
            "edge extraction needs at least {min}x{min} pixels, got {h}x{w}"
        )));
    }
    let q: Vec<i64> = img.pixels().iter().map(|&v| (v * SCALE).round() as i64).collect();
    let at = |y: usize, x: usize, dy: isize, dx: isize| -> i64 {
        q[(y as isize + dy) as usize * w + (x as isize + dx) as usize]
    };
    let tau = cfg.threshold * SCALE;
    let mut out = FeatureMap::zeros(h, w, EDGE_CHANNELS);
    for y in EDGE_MARGIN..h - EDGE_MARGIN {
        for x in EDGE_MARGIN..w - EDGE_MARGIN {
            for (d, &(uy, ux)) in DIRECTIONS.iter().enumerate() {
                let (vy, vx) = (-ux, uy);
                let lo = at(y, x, -uy, -ux);
                let hi = at(y, x, uy, ux);
                let delta = hi - lo;
                if delta <= 0 || (delta as f64) <= tau {
                    continue;
                }
                let flanks = [
                    lo - at(y, x, -2 * uy, -2 * ux),
                    hi - at(y, x, 2 * uy, 2 * ux),
                    lo - at(y, x, -uy + vy, -ux + vx),
                    lo - at(y, x, -uy - vy, -ux - vx),
                    hi - at(y, x, uy + vy, ux + vx),
                    hi - at(y, x, uy - vy, ux - vx),
                ];
                if flanks.iter().all(|f| delta > f.abs()) {
                    out.set(y, x, d, true);
                }
            }
        }
    }
    Ok(out)
}
