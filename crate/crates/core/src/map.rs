//! Image and binary feature-map containers.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major grayscale image with intensities in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    height: usize,
    width: usize,
    pixels: Vec<f64>,
}

impl GrayImage {
    pub fn new(height: usize, width: usize, pixels: Vec<f64>) -> Result<Self> {
        if pixels.len() != height * width {
            return Err(Error::dim("image pixels", height * width, pixels.len()));
        }
        Ok(GrayImage { height, width, pixels })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        GrayImage {
            height,
            width,
            pixels: vec![0.0; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> f64) -> Self {
        let mut pixels = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                pixels.push(f(y, x));
            }
        }
        GrayImage { height, width, pixels }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.pixels[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: f64) {
        self.pixels[y * self.width + x] = v;
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [f64] {
        &mut self.pixels
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> GrayImage {
        GrayImage {
            height: self.height,
            width: self.width,
            pixels: self.pixels.iter().map(|&p| f(p)).collect(),
        }
    }
}

/// Binary `H×W×C` tensor stored channel-last: index `(y·W + x)·C + c`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct FeatureMap {
    height: usize,
    width: usize,
    channels: usize,
    bits: Vec<u8>,
}

impl FeatureMap {
    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        FeatureMap {
            height,
            width,
            channels,
            bits: vec![0; height * width * channels],
        }
    }

    pub fn from_bits(height: usize, width: usize, channels: usize, bits: Vec<u8>) -> Result<Self> {
        if bits.len() != height * width * channels {
            return Err(Error::dim("feature map bits", height * width * channels, bits.len()));
        }
        if bits.iter().any(|&b| b > 1) {
            return Err(Error::InvalidArgument("feature map values must be 0 or 1".into()));
        }
        Ok(FeatureMap {
            height,
            width,
            channels,
            bits,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// Total number of bits `H·W·C`.
    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    #[inline]
    pub fn index(&self, y: usize, x: usize, c: usize) -> usize {
        (y * self.width + x) * self.channels + c
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> bool {
        self.bits[self.index(y, x, c)] != 0
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, on: bool) {
        let i = self.index(y, x, c);
        self.bits[i] = on as u8;
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    /// Channel slice at one spatial location.
    #[inline]
    pub fn pixel(&self, y: usize, x: usize) -> &[u8] {
        let start = (y * self.width + x) * self.channels;
        &self.bits[start..start + self.channels]
    }

    pub fn count_ones(&self) -> usize {
        self.bits.iter().map(|&b| b as usize).sum()
    }

    /// Flat indices of ON bits in increasing order.
    pub fn on_indices(&self) -> Vec<u32> {
        self.bits
            .iter()
            .enumerate()
            .filter(|(_, &b)| b != 0)
            .map(|(i, _)| i as u32)
            .collect()
    }

    /// Copies the `size×size` window with top-left corner `(y, x)`.
    pub fn crop(&self, y: usize, x: usize, size: usize) -> Result<FeatureMap> {
        if y + size > self.height || x + size > self.width {
            return Err(Error::InvalidArgument(format!(
                "crop {size}x{size} at ({y},{x}) exceeds {}x{}",
                self.height, self.width
            )));
        }
        let mut out = FeatureMap::zeros(size, size, self.channels);
        for dy in 0..size {
            let src = self.index(y + dy, x, 0);
            let dst = out.index(dy, 0, 0);
            let n = size * self.channels;
            out.bits[dst..dst + n].copy_from_slice(&self.bits[src..src + n]);
        }
        Ok(out)
    }

    /// Bitwise OR with another map of identical shape.
    pub fn or_assign(&mut self, other: &FeatureMap) {
        assert_eq!(self.bits.len(), other.bits.len());
        for (a, &b) in self.bits.iter_mut().zip(&other.bits) {
            *a |= b;
        }
    }

    /// True when every ON bit of `other` is also ON here.
    pub fn contains(&self, other: &FeatureMap) -> bool {
        self.bits.len() == other.bits.len() && self.bits.iter().zip(&other.bits).all(|(&a, &b)| a >= b)
    }
}

/// How feature channels decompose into orientation-equivariant groups.
///
/// Channel `c = g·(R·T) + t·R + r` for group `g`, polarity `t` and
/// orientation `r`. Edge maps are one group of 8 orientations whose polarity
/// flip is a half turn of the orientation index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelLayout {
    pub groups: usize,
    pub rotations: usize,
    pub polarities: usize,
    /// Polarity flips act as a half-turn of the orientation index instead of a separate axis.
    pub polarity_is_half_turn: bool,
}

impl ChannelLayout {
    pub fn edges() -> Self {
        ChannelLayout {
            groups: 1,
            rotations: 8,
            polarities: 1,
            polarity_is_half_turn: true,
        }
    }

    pub fn parts(groups: usize, rotations: usize, polarities: usize) -> Self {
        ChannelLayout {
            groups,
            rotations,
            polarities,
            polarity_is_half_turn: false,
        }
    }

    pub fn channels(&self) -> usize {
        self.groups * self.rotations * self.polarities
    }

    /// Channel index after shifting the orientation by `rot_shift` and polarity by `pol_shift`.
    pub fn shift(&self, channel: usize, rot_shift: usize, pol_shift: usize) -> usize {
        let per_group = self.rotations * self.polarities;
        let g = channel / per_group;
        let t = (channel % per_group) / self.rotations;
        let r = channel % self.rotations;
        let (r, t) = if self.polarity_is_half_turn {
            let half = self.rotations / 2;
            ((r + rot_shift + pol_shift * half) % self.rotations, t)
        } else {
            ((r + rot_shift) % self.rotations, (t + pol_shift) % self.polarities)
        };
        g * per_group + t * self.rotations + r
    }
}

/// Binary vectors of a common dimension stored as sorted ON-index lists.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct BinaryRows {
    dim: usize,
    offsets: Vec<usize>,
    indices: Vec<u32>,
}

impl BinaryRows {
    pub fn new(dim: usize) -> Self {
        BinaryRows {
            dim,
            offsets: vec![0],
            indices: Vec::new(),
        }
    }

    pub fn from_dense(dim: usize, rows: &[Vec<u8>]) -> Result<Self> {
        let mut out = BinaryRows::new(dim);
        for row in rows {
            out.push_dense(row)?;
        }
        Ok(out)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn push_dense(&mut self, row: &[u8]) -> Result<()> {
        if row.len() != self.dim {
            return Err(Error::dim("binary row", self.dim, row.len()));
        }
        for (i, &b) in row.iter().enumerate() {
            match b {
                0 => {}
                1 => self.indices.push(i as u32),
                _ => return Err(Error::InvalidArgument("binary rows must hold 0/1 values".into())),
            }
        }
        self.offsets.push(self.indices.len());
        Ok(())
    }

    /// Appends a row given as strictly increasing ON indices.
    pub fn push_indices(&mut self, on: &[u32]) -> Result<()> {
        if on.windows(2).any(|w| w[0] >= w[1]) || on.last().is_some_and(|&i| i as usize >= self.dim) {
            return Err(Error::InvalidArgument(
                "ON indices must be increasing and below dim".into(),
            ));
        }
        self.indices.extend_from_slice(on);
        self.offsets.push(self.indices.len());
        Ok(())
    }

    pub fn push_map(&mut self, map: &FeatureMap) -> Result<()> {
        self.push_dense(map.bits())
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[u32] {
        &self.indices[self.offsets[i]..self.offsets[i + 1]]
    }

    pub fn to_dense(&self, i: usize) -> Vec<u8> {
        let mut out = vec![0u8; self.dim];
        for &d in self.row(i) {
            out[d as usize] = 1;
        }
        out
    }

    pub fn iter(&self) -> impl Iterator<Item = &[u32]> + '_ {
        (0..self.len()).map(move |i| self.row(i))
    }

    pub fn extend(&mut self, other: &BinaryRows) -> Result<()> {
        if other.dim != self.dim {
            return Err(Error::dim("binary rows", self.dim, other.dim));
        }
        for row in other.iter() {
            self.indices.extend_from_slice(row);
            self.offsets.push(self.indices.len());
        }
        Ok(())
    }

    /// Rows `range` as a new collection.
    pub fn slice(&self, start: usize, end: usize) -> BinaryRows {
        let mut out = BinaryRows::new(self.dim);
        for i in start..end {
            out.indices.extend_from_slice(self.row(i));
            out.offsets.push(out.indices.len());
        }
        out
    }
}

/// `N` complete samples of `P` blocks each, stored block-major per sample.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CompleteBatch {
    blocks: usize,
    rows: BinaryRows,
}

impl CompleteBatch {
    pub fn new(blocks: usize, block_dim: usize) -> Self {
        CompleteBatch {
            blocks,
            rows: BinaryRows::new(block_dim),
        }
    }

    pub fn from_rows(blocks: usize, rows: BinaryRows) -> Result<Self> {
        if blocks == 0 || !rows.len().is_multiple_of(blocks) {
            return Err(Error::dim("complete batch rows", blocks, rows.len()));
        }
        Ok(CompleteBatch { blocks, rows })
    }

    pub fn blocks(&self) -> usize {
        self.blocks
    }

    pub fn block_dim(&self) -> usize {
        self.rows.dim()
    }

    pub fn len(&self) -> usize {
        self.rows.len() / self.blocks
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn block(&self, sample: usize, block: usize) -> &[u32] {
        self.rows.row(sample * self.blocks + block)
    }

    pub fn push(&mut self, sample: &crate::transforms::CompleteSample) -> Result<()> {
        if sample.blocks.len() != self.blocks {
            return Err(Error::dim("complete sample blocks", self.blocks, sample.blocks.len()));
        }
        for b in &sample.blocks {
            self.rows.push_map(b)?;
        }
        Ok(())
    }

    pub fn push_blocks(&mut self, blocks: &[Vec<u32>]) -> Result<()> {
        if blocks.len() != self.blocks {
            return Err(Error::dim("complete sample blocks", self.blocks, blocks.len()));
        }
        for b in blocks {
            self.rows.push_indices(b)?;
        }
        Ok(())
    }

    pub fn rows(&self) -> &BinaryRows {
        &self.rows
    }

    /// Samples `start..end` as a new batch.
    pub fn slice(&self, start: usize, end: usize) -> CompleteBatch {
        CompleteBatch {
            blocks: self.blocks,
            rows: self.rows.slice(start * self.blocks, end * self.blocks),
        }
    }
}
