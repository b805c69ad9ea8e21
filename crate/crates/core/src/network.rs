//! Layer stacks: presets, forward pass, patch sampling and greedy training.

use std::collections::BTreeMap;
use std::hash::{Hash, Hasher};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::coding::{dilate, or_pool_with, Coder, CodingConfig, TieBreak};
use crate::edges::{extract_edges, EdgeConfig};
use crate::error::{Error, Result};
use crate::groups::{GroupElement, GroupSpec};
use crate::map::{BinaryRows, ChannelLayout, CompleteBatch, FeatureMap, GrayImage};
use crate::mixture::{bm_fit, EmOptions, FitTrace};
use crate::parallel::par_map;
use crate::permem::{pem_fit_complete, pem_flatten, PartsDictionary, PemOptions, QuarterTie};
use crate::transforms::{
    quarter_turn_permutation, rotate_feature_map, rotate_window, transform_image, Interpolation, MapGrid, RotationSplit,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum LayerKind {
    Edges(EdgeConfig),
    Mixture {
        components: usize,
    },
    RotMix {
        components: usize,
        rotations: usize,
        polarities: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub kind: LayerKind,
    /// Patch size, dilation, pooling and rejection settings (unused by edges).
    pub coding: CodingConfig,
    pub pool: bool,
    /// Share parameters between parts a quarter turn apart (RotMix, R divisible by 4).
    pub tie_quarter_turns: bool,
}

impl LayerSpec {
    pub fn edges() -> Self {
        LayerSpec {
            kind: LayerKind::Edges(EdgeConfig::default()),
            coding: CodingConfig::default(),
            pool: false,
            tie_quarter_turns: false,
        }
    }

    pub fn mixture(patch_size: usize, components: usize) -> Self {
        LayerSpec {
            kind: LayerKind::Mixture { components },
            coding: CodingConfig {
                patch_size,
                ..CodingConfig::default()
            },
            pool: true,
            tie_quarter_turns: false,
        }
    }

    pub fn rotmix(patch_size: usize, components: usize, rotations: usize) -> Self {
        LayerSpec {
            kind: LayerKind::RotMix {
                components,
                rotations,
                polarities: 1,
            },
            coding: CodingConfig {
                patch_size,
                tie_break: if rotations.is_multiple_of(4) {
                    TieBreak::AllMaxima
                } else {
                    TieBreak::LowestIndex
                },
                ..CodingConfig::default()
            },
            pool: true,
            tie_quarter_turns: rotations.is_multiple_of(4),
        }
    }

    /// Number of coded parts (`M` or `M·R·T`); `None` for edges.
    pub fn parts(&self) -> Option<usize> {
        match self.kind {
            LayerKind::Edges(_) => None,
            LayerKind::Mixture { components } => Some(components),
            LayerKind::RotMix {
                components,
                rotations,
                polarities,
            } => Some(components * rotations * polarities),
        }
    }

    pub fn group(&self) -> Result<GroupSpec> {
        match self.kind {
            LayerKind::RotMix {
                rotations, polarities, ..
            } => GroupSpec::new(rotations, polarities),
            _ => Ok(GroupSpec::trivial()),
        }
    }

    /// Channel structure of this layer's output.
    pub fn output_layout(&self) -> ChannelLayout {
        match self.kind {
            LayerKind::Edges(_) => ChannelLayout::edges(),
            LayerKind::Mixture { components } => ChannelLayout::parts(components, 1, 1),
            LayerKind::RotMix {
                components,
                rotations,
                polarities,
            } => ChannelLayout::parts(components, rotations, polarities),
        }
    }
}

/// Task layer configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum TaskSpec {
    Mixture { components: usize },
    RotMix { components: usize, rotations: usize },
    Svm { lambdas: Vec<f64>, epochs: usize },
}

pub const SVM_LAMBDAS: [f64; 5] = [1e-6, 1e-5, 1e-4, 1e-3, 1e-2];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Preset {
    pub name: String,
    pub layers: Vec<LayerSpec>,
    pub task: TaskSpec,
}

pub const PRESETS: [&str; 3] = ["plain", "plain-svm", "oriented"];

pub fn build_preset(name: &str) -> Result<Preset> {
    let (layers, task) = match name {
        "plain" => (
            vec![LayerSpec::edges(), LayerSpec::mixture(6, 1280)],
            TaskSpec::Mixture { components: 1 },
        ),
        "plain-svm" => (
            vec![LayerSpec::edges(), LayerSpec::mixture(6, 1280)],
            TaskSpec::Svm {
                lambdas: SVM_LAMBDAS.to_vec(),
                epochs: 10,
            },
        ),
        "oriented" => (
            vec![LayerSpec::edges(), LayerSpec::rotmix(6, 40, 32)],
            TaskSpec::RotMix {
                components: 1,
                rotations: 16,
            },
        ),
        other => return Err(Error::UnknownPreset(other.to_string())),
    };
    Ok(Preset {
        name: name.to_string(),
        layers,
        task,
    })
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub seed: u64,
    pub preset: String,
    pub dataset: String,
}

#[derive(Debug, Clone)]
pub struct Network {
    layers: Vec<LayerSpec>,
    dictionaries: Vec<Option<PartsDictionary>>,
    coders: Vec<Option<Arc<Coder>>>,
    pub provenance: Provenance,
}

impl PartialEq for Network {
    fn eq(&self, other: &Self) -> bool {
        self.layers == other.layers && self.dictionaries == other.dictionaries && self.provenance == other.provenance
    }
}

/// Spatial size after coding, dilation and pooling.
fn coded_len(len: usize, spec: &LayerSpec) -> Result<usize> {
    let s = spec.coding.patch_size;
    if len < s {
        return Err(Error::InvalidArgument(format!(
            "map of size {len} is smaller than patch size {s}"
        )));
    }
    let coded = len - s + 1;
    Ok(if spec.pool {
        coded.div_ceil(spec.coding.pool_size)
    } else {
        coded
    })
}

impl Network {
    pub fn new(layers: Vec<LayerSpec>) -> Result<Self> {
        if !matches!(layers.first().map(|l| l.kind), Some(LayerKind::Edges(_))) {
            return Err(Error::InvalidArgument("the first layer must be Edges".into()));
        }
        for (i, l) in layers.iter().enumerate().skip(1) {
            if matches!(l.kind, LayerKind::Edges(_)) {
                return Err(Error::InvalidArgument(format!(
                    "layer {i}: Edges may only be the first layer"
                )));
            }
            l.coding.validate()?;
            l.group()?;
            if l.tie_quarter_turns && l.group()?.rotations() % 4 != 0 {
                return Err(Error::InvalidArgument(format!(
                    "layer {i}: quarter-turn tying needs R divisible by 4"
                )));
            }
        }
        let n = layers.len();
        Ok(Network {
            layers,
            dictionaries: vec![None; n],
            coders: vec![None; n],
            provenance: Provenance::default(),
        })
    }

    pub fn from_preset(preset: &Preset) -> Result<Self> {
        let mut net = Network::new(preset.layers.clone())?;
        net.provenance.preset = preset.name.clone();
        Ok(net)
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn dictionary(&self, layer: usize) -> Option<&PartsDictionary> {
        self.dictionaries.get(layer).and_then(|d| d.as_ref())
    }

    /// Input channel count of layer `layer` (the output channels of the layer below).
    pub fn input_channels(&self, layer: usize) -> usize {
        if layer == 0 {
            1
        } else {
            self.layers[layer - 1].output_layout().channels()
        }
    }

    pub fn input_layout(&self, layer: usize) -> ChannelLayout {
        self.layers[layer - 1].output_layout()
    }

    pub fn set_dictionary(&mut self, layer: usize, dict: PartsDictionary) -> Result<()> {
        let spec = self.layers.get(layer).ok_or(Error::IndexOutOfRange {
            what: "layer",
            value: layer,
            limit: self.layers.len(),
        })?;
        let parts = spec
            .parts()
            .ok_or_else(|| Error::InvalidArgument("edge layers have no dictionary".into()))?;
        let s = spec.coding.patch_size;
        let dim = s * s * self.input_channels(layer);
        if dict.dim() != dim {
            return Err(Error::dim("dictionary dimension", dim, dict.dim()));
        }
        if dict.len() != parts {
            return Err(Error::dim("dictionary size", parts, dict.len()));
        }
        self.coders[layer] = Some(Arc::new(Coder::new(&dict, spec.coding.use_prior)));
        self.dictionaries[layer] = Some(dict);
        Ok(())
    }

    pub fn is_fitted(&self) -> bool {
        self.layers
            .iter()
            .zip(&self.dictionaries)
            .all(|(l, d)| matches!(l.kind, LayerKind::Edges(_)) || d.is_some())
    }

    /// Shape `(H, W, C)` after the first `upto` layers.
    pub fn shape_after(&self, upto: usize, height: usize, width: usize) -> Result<(usize, usize, usize)> {
        let (mut h, mut w, mut c) = (height, width, 1);
        for spec in &self.layers[..upto] {
            match spec.kind {
                LayerKind::Edges(_) => c = ChannelLayout::edges().channels(),
                _ => {
                    h = coded_len(h, spec)?;
                    w = coded_len(w, spec)?;
                    c = spec.parts().unwrap_or(c);
                }
            }
        }
        Ok((h, w, c))
    }

    pub fn output_shape(&self, height: usize, width: usize) -> Result<(usize, usize, usize)> {
        self.shape_after(self.layers.len(), height, width)
    }

    /// Spatial grid of the output of the first `upto` layers.
    pub fn grid_after(&self, upto: usize, height: usize, width: usize) -> Result<MapGrid> {
        if upto == 0 {
            return Ok(MapGrid::Pixels);
        }
        let spec = &self.layers[upto - 1];
        if !spec.pool || matches!(spec.kind, LayerKind::Edges(_)) {
            return Ok(MapGrid::Pixels);
        }
        let (h, w, _) = self.shape_after(upto - 1, height, width)?;
        let s = spec.coding.patch_size;
        Ok(MapGrid::Pooled {
            pre_height: h - s + 1,
            pre_width: w - s + 1,
            pool: spec.coding.pool_size,
            layout: spec.coding.pool_layout,
        })
    }

    fn apply_layer(&self, index: usize, input: Option<FeatureMap>, img: &GrayImage) -> Result<FeatureMap> {
        let spec = &self.layers[index];
        match spec.kind {
            LayerKind::Edges(cfg) => extract_edges(img, &cfg),
            _ => {
                let coder = self.coders[index].as_ref().ok_or(Error::Unfitted(index))?;
                let input = input.expect("non-edge layers have an input map");
                let coded = coder.code(&input, &spec.coding)?;
                let spread = dilate(&coded, spec.coding.spread_radius);
                Ok(if spec.pool {
                    or_pool_with(&spread, spec.coding.pool_size, spec.coding.pool_layout)
                } else {
                    spread
                })
            }
        }
    }

    /// Output of the first `upto` layers.
    pub fn forward_prefix(&self, img: &GrayImage, upto: usize) -> Result<FeatureMap> {
        if upto == 0 || upto > self.layers.len() {
            return Err(Error::IndexOutOfRange {
                what: "layer count",
                value: upto,
                limit: self.layers.len() + 1,
            });
        }
        let mut cur = None;
        for i in 0..upto {
            cur = Some(self.apply_layer(i, cur, img)?);
        }
        Ok(cur.expect("at least one layer"))
    }

    pub fn forward(&self, img: &GrayImage) -> Result<FeatureMap> {
        self.forward_prefix(img, self.layers.len())
    }

    /// Forward pass over many images in parallel.
    pub fn forward_batch(&self, images: &[GrayImage]) -> Result<Vec<FeatureMap>> {
        par_map(images.len(), |i| self.forward(&images[i]))
            .into_iter()
            .collect()
    }

    /// True when the output rotates exactly under quarter turns of the input:
    /// the top layer is a rotation-aware mixture with a multiple of 4 orientations.
    pub fn quarter_turn_equivariant(&self) -> bool {
        match self.layers.last().map(|l| l.kind) {
            Some(LayerKind::RotMix { rotations, .. }) => rotations % 4 == 0,
            Some(LayerKind::Edges(_)) => true,
            _ => false,
        }
    }

    /// Rotates a network output by `quarter_turns` counter-clockwise quarter
    /// turns: the spatial grid turns and orientation channels shift.
    pub fn quarter_turn_output(
        &self,
        fm: &FeatureMap,
        quarter_turns: usize,
        height: usize,
        width: usize,
    ) -> Result<FeatureMap> {
        let layout = self.layers.last().expect("non-empty stack").output_layout();
        let grid = self.grid_after(self.layers.len(), height, width)?;
        rotate_feature_map(fm, quarter_turns % 4, &GroupSpec::new(4, 1)?, &layout, &grid)
    }

    /// Hash of a layer's parameters, for checking that training leaves it untouched.
    pub fn checksum(&self, layer: usize) -> u64 {
        let mut h = std::collections::hash_map::DefaultHasher::new();
        self.layers[layer].kind.components_hash(&mut h);
        if let Some(d) = &self.dictionaries[layer] {
            for v in d.parts().iter().chain(d.priors()) {
                v.to_bits().hash(&mut h);
            }
        }
        h.finish()
    }
}

impl LayerKind {
    fn components_hash<H: Hasher>(&self, h: &mut H) {
        match *self {
            LayerKind::Edges(cfg) => cfg.threshold.to_bits().hash(h),
            LayerKind::Mixture { components } => components.hash(h),
            LayerKind::RotMix {
                components,
                rotations,
                polarities,
            } => (components, rotations, polarities).hash(h),
        }
    }
}

/// Location of one sampled patch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchDraw {
    pub image: usize,
    pub y: usize,
    pub x: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatchBatch {
    pub draws: Vec<PatchDraw>,
    pub rows: BinaryRows,
}

fn window_counts(fm: &FeatureMap, s: usize) -> Vec<usize> {
    // summed-area table of per-pixel ON counts
    let (h, w) = (fm.height(), fm.width());
    let mut sat = vec![0usize; (h + 1) * (w + 1)];
    for y in 0..h {
        for x in 0..w {
            let c = fm.pixel(y, x).iter().filter(|&&b| b != 0).count();
            sat[(y + 1) * (w + 1) + x + 1] =
                c + sat[y * (w + 1) + x + 1] + sat[(y + 1) * (w + 1) + x] - sat[y * (w + 1) + x];
        }
    }
    let (oh, ow) = (h - s + 1, w - s + 1);
    let mut out = vec![0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            let at = |yy: usize, xx: usize| sat[yy * (w + 1) + xx];
            out[y * ow + x] = at(y + s, x + s) + at(y, x) - at(y, x + s) - at(y + s, x);
        }
    }
    out
}

/// Uniform `(image, location)` draws of `S×S` patches from the input maps of
/// `layer`, rejecting patches with fewer than `min_active_bits` ON bits.
pub fn sample_patches(
    net: &Network,
    images: &[GrayImage],
    layer: usize,
    n_patches: usize,
    seed: u64,
    min_active_bits: usize,
) -> Result<PatchBatch> {
    let spec = net.layers.get(layer).ok_or(Error::IndexOutOfRange {
        what: "layer",
        value: layer,
        limit: net.layers.len(),
    })?;
    if layer == 0 {
        return Err(Error::InvalidArgument(
            "patches are sampled for mixture layers only".into(),
        ));
    }
    let s = spec.coding.patch_size;
    let c = net.input_channels(layer);
    let mut rows = BinaryRows::new(s * s * c);
    if n_patches == 0 {
        return Ok(PatchBatch {
            draws: Vec::new(),
            rows,
        });
    }
    if images.is_empty() {
        return Err(Error::EmptyData("images"));
    }
    let maps: Vec<FeatureMap> = par_map(images.len(), |i| net.forward_prefix(&images[i], layer))
        .into_iter()
        .collect::<Result<_>>()?;
    let (h, w) = (maps[0].height(), maps[0].width());
    if h < s || w < s {
        return Err(Error::InvalidArgument(format!(
            "{h}×{w} input maps are smaller than {s}×{s} patches"
        )));
    }
    let counts: Vec<Vec<usize>> = par_map(maps.len(), |i| window_counts(&maps[i], s));
    let budget = 50 * n_patches + 1000;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draws = Vec::with_capacity(n_patches);
    let mut attempts = 0;
    while draws.len() < n_patches {
        if attempts == budget {
            return Err(Error::RetryBudget {
                wanted: n_patches,
                found: draws.len(),
                attempts,
            });
        }
        attempts += 1;
        let image = rng.random_range(0..images.len());
        let y = rng.random_range(0..=h - s);
        let x = rng.random_range(0..=w - s);
        if counts[image][y * (w - s + 1) + x] >= min_active_bits {
            draws.push(PatchDraw { image, y, x });
        }
    }
    for d in &draws {
        rows.push_map(&maps[d.image].crop(d.y, d.x, s)?)?;
    }
    Ok(PatchBatch { draws, rows })
}

/// Complete samples by the pass-through method: every group element
/// transforms the source image, the lower layers re-extract features, and
/// the patch is cropped at the correspondingly rotated window.
pub fn pass_through_samples(
    net: &Network,
    images: &[GrayImage],
    layer: usize,
    draws: &[PatchDraw],
    spec: &GroupSpec,
) -> Result<CompleteBatch> {
    let s = net.layers[layer].coding.patch_size;
    let c = net.input_channels(layer);
    let mut by_image: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, d) in draws.iter().enumerate() {
        by_image.entry(d.image).or_default().push(i);
    }
    let groups: Vec<(usize, Vec<usize>)> = by_image.into_iter().collect();
    let per_group = par_map(groups.len(), |g| -> Result<Vec<(usize, Vec<Vec<u32>>)>> {
        let (img_idx, members) = &groups[g];
        let img = &images[*img_idx];
        let maps: Vec<FeatureMap> = spec
            .elements()
            .map(|e| net.forward_prefix(&transform_image(img, e, spec, Interpolation::Bilinear), layer))
            .collect::<Result<_>>()?;
        let (h, w) = (maps[0].height(), maps[0].width());
        members
            .iter()
            .map(|&m| {
                let d = draws[m];
                let blocks = spec
                    .elements()
                    .zip(&maps)
                    .map(|(e, map)| {
                        let (y, x) = rotate_window(
                            d.y,
                            d.x,
                            s,
                            h,
                            w,
                            RotationSplit::from_steps(e.rotation, spec.rotations()),
                        );
                        Ok(map.crop(y, x, s)?.on_indices())
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok((m, blocks))
            })
            .collect()
    });
    let mut ordered: Vec<Option<Vec<Vec<u32>>>> = vec![None; draws.len()];
    for g in per_group {
        for (m, blocks) in g? {
            ordered[m] = Some(blocks);
        }
    }
    let mut batch = CompleteBatch::new(spec.order(), s * s * c);
    for blocks in ordered {
        batch.push_blocks(&blocks.expect("every draw is grouped"))?;
    }
    Ok(batch)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    pub n_patches: usize,
    pub em: EmOptions,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            n_patches: 200_000,
            em: EmOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerReport {
    pub layer: usize,
    pub patches: usize,
    pub trace: FitTrace,
}

/// Fits each mixture layer bottom-up on patches drawn through the frozen layers below.
pub fn train_greedy(
    mut net: Network,
    images: &[GrayImage],
    opts: &TrainOptions,
) -> Result<(Network, Vec<LayerReport>)> {
    let mut reports = Vec::new();
    for layer in 1..net.layers.len() {
        let spec = net.layers[layer];
        let layer_seed = opts.em.seed.wrapping_add(layer as u64);
        let patches = sample_patches(
            &net,
            images,
            layer,
            opts.n_patches,
            layer_seed,
            spec.coding.min_active_bits,
        )?;
        let em = EmOptions {
            seed: layer_seed,
            ..opts.em
        };
        log::info!(
            "layer {layer}: fitting {:?} on {} patches",
            spec.kind,
            patches.rows.len()
        );
        let (dict, trace) = match spec.kind {
            LayerKind::Edges(_) => unreachable!("validated in Network::new"),
            LayerKind::Mixture { components } => {
                let (model, trace) = bm_fit(&patches.rows, components, &em)?;
                (PartsDictionary::from_mixture(&model), trace)
            }
            LayerKind::RotMix { components, .. } => {
                let group = spec.group()?;
                let batch = pass_through_samples(&net, images, layer, &patches.draws, &group)?;
                let quarter_tie = if spec.tie_quarter_turns {
                    Some(QuarterTie {
                        permutation: quarter_turn_permutation(spec.coding.patch_size, &net.input_layout(layer))?,
                    })
                } else {
                    None
                };
                let (model, trace) = pem_fit_complete(&batch, &group, components, &PemOptions { em, quarter_tie })?;
                (pem_flatten(&model), trace)
            }
        };
        net.set_dictionary(layer, dict)?;
        reports.push(LayerReport {
            layer,
            patches: patches.rows.len(),
            trace,
        });
    }
    net.provenance.seed = opts.em.seed;
    Ok((net, reports))
}

/// Images transformed by every element of `spec`, identity first.
pub fn transformed_images(img: &GrayImage, spec: &GroupSpec) -> Vec<GrayImage> {
    spec.elements()
        .map(|e: GroupElement| transform_image(img, e, spec, Interpolation::Bilinear))
        .collect()
}
