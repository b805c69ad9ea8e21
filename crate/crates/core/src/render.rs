//! Montages of dictionary means for visual inspection.

use std::path::Path;

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::map::GrayImage;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ChannelView {
    /// One `S×S` tile per part, the maximum over channels.
    #[default]
    Max,
    /// One `S×(S·C)` tile per part, channels side by side.
    PerChannel,
}

/// Lays out `count` parts of shape `size×size×channels` (row-major,
/// channel fastest) on a near-square grid with one pixel of padding.
pub fn montage(parts: &[f64], count: usize, size: usize, channels: usize, view: ChannelView) -> Result<GrayImage> {
    let dim = size * size * channels;
    if count == 0 || parts.len() != count * dim {
        return Err(Error::dim("montage parts", count * dim, parts.len()));
    }
    let (th, tw) = match view {
        ChannelView::Max => (size, size),
        ChannelView::PerChannel => (size, size * channels),
    };
    let cols = (count as f64).sqrt().ceil() as usize;
    let rows = count.div_ceil(cols);
    let mut img = GrayImage::zeros(rows * (th + 1) + 1, cols * (tw + 1) + 1);
    for k in 0..count {
        let part = &parts[k * dim..(k + 1) * dim];
        let (oy, ox) = ((k / cols) * (th + 1) + 1, (k % cols) * (tw + 1) + 1);
        for y in 0..size {
            for x in 0..size {
                let px = &part[(y * size + x) * channels..(y * size + x + 1) * channels];
                match view {
                    ChannelView::Max => img.set(oy + y, ox + x, px.iter().copied().fold(0.0, f64::max)),
                    ChannelView::PerChannel => {
                        for (c, &v) in px.iter().enumerate() {
                            img.set(oy + y, ox + c * size + x, v);
                        }
                    }
                }
            }
        }
    }
    Ok(img)
}

/// Writes `[0, 1]` intensities as 8-bit grayscale; the format follows the
/// extension (`.pgm` binary graymap or `.png`).
pub fn save_gray(img: &GrayImage, path: &Path) -> Result<()> {
    let bytes: Vec<u8> = img
        .pixels()
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let buf = image::GrayImage::from_raw(img.width() as u32, img.height() as u32, bytes).expect("buffer size matches");
    if path
        .extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("pgm"))
    {
        // the generic pnm writer picks PAM; force a binary graymap
        let file = std::io::BufWriter::new(std::fs::File::create(path)?);
        let enc = PnmEncoder::new(file).with_subtype(PnmSubtype::Graymap(SampleEncoding::Binary));
        buf.write_with_encoder(enc)?;
    } else {
        buf.save(path)?;
    }
    Ok(())
}
