//! Datasets: IDX and amat loaders, synthetic MNIST variations, and splits.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::map::GrayImage;
use crate::parallel::par_map;
use crate::transforms::{rotate_image, Interpolation};

pub const IMAGE_MAGIC: u32 = 2051;
pub const LABEL_MAGIC: u32 = 2049;
pub const NUM_CLASSES: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitTag {
    #[default]
    Train,
    Valid,
    Test,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub images: Vec<GrayImage>,
    pub labels: Vec<u8>,
    pub split: SplitTag,
}

impl Dataset {
    pub fn new(images: Vec<GrayImage>, labels: Vec<u8>, split: SplitTag) -> Result<Self> {
        if images.len() != labels.len() {
            return Err(Error::dim("dataset labels", images.len(), labels.len()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= NUM_CLASSES) {
            return Err(Error::IndexOutOfRange {
                what: "label",
                value: bad as usize,
                limit: NUM_CLASSES,
            });
        }
        Ok(Dataset { images, labels, split })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Subset by indices, keeping their order.
    pub fn select(&self, indices: &[usize], split: SplitTag) -> Dataset {
        Dataset {
            images: indices.iter().map(|&i| self.images[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            split,
        }
    }

    pub fn class_counts(&self) -> [usize; NUM_CLASSES] {
        let mut c = [0; NUM_CLASSES];
        for &l in &self.labels {
            c[l as usize] += 1;
        }
        c
    }
}

fn read_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Truncated(format!("header of {}", path.display())))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    if !path.exists() {
        return Err(Error::MissingInput(path.to_path_buf()));
    }
    Ok(fs::read(path)?)
}

fn check_magic(bytes: &[u8], expected: u32, path: &Path) -> Result<()> {
    let found = read_u32(bytes, 0, path)?;
    if found != expected {
        return Err(Error::BadMagic {
            path: path.display().to_string(),
            expected: expected.to_string(),
            found: found.to_string(),
        });
    }
    Ok(())
}

/// Parses a big-endian IDX image/label file pair; pixels are scaled by 1/255.
pub fn load_idx(images: &Path, labels: &Path) -> Result<Dataset> {
    let ib = read_file(images)?;
    check_magic(&ib, IMAGE_MAGIC, images)?;
    let n = read_u32(&ib, 4, images)? as usize;
    let h = read_u32(&ib, 8, images)? as usize;
    let w = read_u32(&ib, 12, images)? as usize;
    let body = &ib[16..];
    if body.len() < n * h * w {
        return Err(Error::Truncated(format!(
            "{}: {} pixel bytes, header promises {}",
            images.display(),
            body.len(),
            n * h * w
        )));
    }
    let lb = read_file(labels)?;
    check_magic(&lb, LABEL_MAGIC, labels)?;
    let nl = read_u32(&lb, 4, labels)? as usize;
    if nl != n {
        return Err(Error::dim("IDX label count", n, nl));
    }
    if lb.len() < 8 + n {
        return Err(Error::Truncated(format!("{}: {} labels expected", labels.display(), n)));
    }
    let imgs = (0..n)
        .map(|i| {
            let px = body[i * h * w..(i + 1) * h * w]
                .iter()
                .map(|&b| b as f64 / 255.0)
                .collect();
            GrayImage::new(h, w, px).expect("sized buffer")
        })
        .collect();
    Dataset::new(imgs, lb[8..8 + n].to_vec(), SplitTag::Train)
}

/// Loaded amat file plus the number of pixel values clamped into `[0, 1]`.
#[derive(Debug, Clone)]
pub struct AmatLoad {
    pub dataset: Dataset,
    pub clamped: usize,
}

/// Parses an amat matrix: one sample per line, 784 pixels then the label.
pub fn load_amat(path: &Path) -> Result<AmatLoad> {
    let text = String::from_utf8(read_file(path)?).map_err(|e| Error::Format(e.to_string()))?;
    let name = path.display().to_string();
    let mut images = Vec::new();
    let mut labels = Vec::new();
    let mut clamped = 0;
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let vals: Vec<f64> = line
            .split_whitespace()
            .map(|t| t.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Parse {
                path: name.clone(),
                line: i + 1,
                message: e.to_string(),
            })?;
        if vals.len() != 785 {
            return Err(Error::Parse {
                path: name.clone(),
                line: i + 1,
                message: format!("expected 785 columns, found {}", vals.len()),
            });
        }
        let label = vals[784];
        if label.fract() != 0.0 || !(0.0..NUM_CLASSES as f64).contains(&label) {
            return Err(Error::Parse {
                path: name.clone(),
                line: i + 1,
                message: format!("label {label} out of range"),
            });
        }
        let px = vals[..784]
            .iter()
            .map(|&v| {
                if (0.0..=1.0).contains(&v) {
                    v
                } else {
                    clamped += 1;
                    if v.is_nan() {
                        0.0
                    } else {
                        v.clamp(0.0, 1.0)
                    }
                }
            })
            .collect();
        images.push(GrayImage::new(28, 28, px)?);
        labels.push(label as u8);
    }
    if clamped > 0 {
        log::warn!("{name}: clamped {clamped} pixel values into [0, 1]");
    }
    Ok(AmatLoad {
        dataset: Dataset::new(images, labels, SplitTag::Train)?,
        clamped,
    })
}

/// Loads grayscale textures (PNG, PGM, …) scaled to `[0, 1]`.
pub fn load_texture(path: &Path) -> Result<GrayImage> {
    if !path.exists() {
        return Err(Error::MissingInput(path.to_path_buf()));
    }
    let img = image::open(path)?.into_luma8();
    let (w, h) = img.dimensions();
    GrayImage::new(
        h as usize,
        w as usize,
        img.into_raw().into_iter().map(|b| b as f64 / 255.0).collect(),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variation {
    Basic,
    Rot,
    BgRand,
    BgImg,
    BgImgRot,
}

impl Variation {
    pub const ALL: [Variation; 5] = [
        Variation::Basic,
        Variation::BgRand,
        Variation::BgImg,
        Variation::Rot,
        Variation::BgImgRot,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Variation::Basic => "basic",
            Variation::Rot => "rot",
            Variation::BgRand => "bg-rand",
            Variation::BgImg => "bg-img",
            Variation::BgImgRot => "bg-img-rot",
        }
    }

    pub fn needs_textures(&self) -> bool {
        matches!(self, Variation::BgImg | Variation::BgImgRot)
    }
}

impl std::str::FromStr for Variation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variation::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown variation `{s}`")))
    }
}

fn texture_crop(rng: &mut ChaCha8Rng, textures: &[GrayImage], h: usize, w: usize) -> Result<GrayImage> {
    let tex = &textures[rng.random_range(0..textures.len())];
    if tex.height() < h || tex.width() < w {
        return Err(Error::InvalidArgument(format!(
            "texture {}×{} is smaller than {h}×{w}",
            tex.height(),
            tex.width()
        )));
    }
    let y0 = rng.random_range(0..=tex.height() - h);
    let x0 = rng.random_range(0..=tex.width() - w);
    Ok(GrayImage::from_fn(h, w, |y, x| tex.get(y0 + y, x0 + x)))
}

fn vary_one(img: &GrayImage, kind: Variation, rng: &mut ChaCha8Rng, textures: &[GrayImage]) -> Result<GrayImage> {
    let rotated = match kind {
        Variation::Rot | Variation::BgImgRot => {
            let angle = rng.random_range(0.0..360.0);
            rotate_image(img, angle, Interpolation::Bilinear)
        }
        _ => img.clone(),
    };
    let (h, w) = (img.height(), img.width());
    let background = match kind {
        Variation::BgRand => Some(GrayImage::new(h, w, (0..h * w).map(|_| rng.random::<f64>()).collect())?),
        Variation::BgImg | Variation::BgImgRot => Some(texture_crop(rng, textures, h, w)?),
        _ => None,
    };
    Ok(match background {
        Some(bg) => GrayImage::new(
            h,
            w,
            rotated
                .pixels()
                .iter()
                .zip(bg.pixels())
                .map(|(a, b)| a.max(*b))
                .collect(),
        )?,
        None => rotated,
    })
}

/// Synthetic variation of `base`; image `i` uses its own random stream so
/// the output does not depend on the number of worker threads.
pub fn make_variation(base: &Dataset, kind: Variation, seed: u64, textures: Option<&[GrayImage]>) -> Result<Dataset> {
    let textures = textures.unwrap_or(&[]);
    if kind.needs_textures() && textures.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "variation {} needs texture images",
            kind.name()
        )));
    }
    let images = par_map(base.len(), |i| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        vary_one(&base.images[i], kind, &mut rng, textures)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        images,
        labels: base.labels.clone(),
        split: base.split,
    })
}

/// Shuffled train/valid/test partition of the given sizes.
pub fn split_standard(ds: &Dataset, train: usize, valid: usize, test: usize, seed: u64) -> Result<[Dataset; 3]> {
    let need = train + valid + test;
    if ds.len() < need {
        return Err(Error::InsufficientSamples(format!(
            "split needs {need} samples, dataset has {}",
            ds.len()
        )));
    }
    let mut idx: Vec<usize> = (0..ds.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok([
        ds.select(&idx[..train], SplitTag::Train),
        ds.select(&idx[train..train + valid], SplitTag::Valid),
        ds.select(&idx[train + valid..need], SplitTag::Test),
    ])
}

/// Stratified subsample with `per_class` samples of every class, in class order.
pub fn split_per_class(ds: &Dataset, per_class: usize, seed: u64) -> Result<Dataset> {
    Ok(ds.select(&per_class_indices(ds, per_class, seed)?, ds.split))
}

/// Indices chosen by [`split_per_class`].
pub fn per_class_indices(ds: &Dataset, per_class: usize, seed: u64) -> Result<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = Vec::with_capacity(per_class * NUM_CLASSES);
    for c in 0..NUM_CLASSES as u8 {
        let mut idx: Vec<usize> = (0..ds.len()).filter(|&i| ds.labels[i] == c).collect();
        if idx.len() < per_class {
            return Err(Error::InsufficientSamples(format!(
                "class {c} has {} samples, {per_class} requested",
                idx.len()
            )));
        }
        idx.shuffle(&mut rng);
        chosen.extend_from_slice(&idx[..per_class]);
    }
    Ok(chosen)
}
