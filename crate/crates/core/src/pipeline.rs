//! End-to-end training and evaluation driven by a serializable run config.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::classifier::{
    calibrate, canonicalize, complete_features, fit_class_mixtures, fit_rotmix_classes, select_linear_svm,
    PredictOptions, RotScoring, ScoreInput, Scorer, TaskModels,
};
use crate::container::{Model, TaskLayer};
use crate::data::{
    load_amat, load_idx, load_texture, make_variation, per_class_indices, split_standard, Dataset, SplitTag, Variation,
    NUM_CLASSES,
};
use crate::error::{Error, Result};
use crate::map::{BinaryRows, FeatureMap, GrayImage};
use crate::mixture::EmOptions;
use crate::network::{build_preset, train_greedy, LayerReport, LayerSpec, Network, Preset, TaskSpec, TrainOptions};

pub const IDX_IMAGES: &str = "train-images-idx3-ubyte";
pub const IDX_LABELS: &str = "train-labels-idx1-ubyte";
pub const TEXTURE_DIR: &str = "textures";

/// Where images come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DataSource {
    /// An IDX digit pair in `dir`; variations are generated synthetically
    /// with textures from `dir/textures`.
    Idx { dir: PathBuf },
    /// Published amat files: the first `train + valid` rows of `train` and
    /// the first `test` rows of `test`.
    Amat { train: PathBuf, test: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub source: DataSource,
    pub variation: Variation,
    pub train: usize,
    pub valid: usize,
    pub test: usize,
    /// Labeled samples per class for the task layer; the feature layers
    /// still see the whole training split.
    pub per_class: Option<usize>,
    pub seed: u64,
}

impl DataConfig {
    pub fn idx(dir: impl Into<PathBuf>, variation: Variation) -> Self {
        DataConfig {
            source: DataSource::Idx { dir: dir.into() },
            variation,
            train: 7000,
            valid: 1000,
            test: 2000,
            per_class: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PreparedData {
    pub id: String,
    pub train: Dataset,
    pub valid: Dataset,
    pub test: Dataset,
    /// Unrotated counterparts of the training images, when known.
    pub upright_train: Option<Dataset>,
    /// Pixels clamped into `[0, 1]` while parsing.
    pub clamped: usize,
}

impl PreparedData {
    /// Labeled task-layer set: the training split, or a per-class subsample.
    pub fn labeled(&self, per_class: Option<usize>, seed: u64) -> Result<(Dataset, Option<Dataset>)> {
        match per_class {
            None => Ok((self.train.clone(), self.upright_train.clone())),
            Some(k) => {
                let idx = per_class_indices(&self.train, k, seed)?;
                Ok((
                    self.train.select(&idx, self.train.split),
                    self.upright_train.as_ref().map(|u| u.select(&idx, u.split)),
                ))
            }
        }
    }
}

/// Digits directory: `$PERMIX_DATA`, else `data/` at the workspace root.
pub fn default_data_dir() -> PathBuf {
    std::env::var_os("PERMIX_DATA")
        .map(PathBuf::from)
        .unwrap_or_else(|| Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data"))
}

pub fn load_textures(dir: &Path) -> Result<Vec<GrayImage>> {
    let tex_dir = dir.join(TEXTURE_DIR);
    if !tex_dir.is_dir() {
        return Err(Error::MissingInput(tex_dir));
    }
    let mut paths: Vec<PathBuf> = std::fs::read_dir(&tex_dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| matches!(p.extension().and_then(|e| e.to_str()), Some("pgm" | "png")))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::EmptyData("texture directory"));
    }
    paths.iter().map(|p| load_texture(p)).collect()
}

pub fn prepare_data(cfg: &DataConfig) -> Result<PreparedData> {
    match &cfg.source {
        DataSource::Idx { dir } => {
            let base = load_idx(&dir.join(IDX_IMAGES), &dir.join(IDX_LABELS))?;
            let textures = if cfg.variation.needs_textures() {
                Some(load_textures(dir)?)
            } else {
                None
            };
            let varied = make_variation(&base, cfg.variation, cfg.seed, textures.as_deref())?;
            let [train, valid, test] = split_standard(&varied, cfg.train, cfg.valid, cfg.test, cfg.seed)?;
            let upright_train = match cfg.variation {
                Variation::Rot | Variation::BgImgRot => {
                    Some(split_standard(&base, cfg.train, cfg.valid, cfg.test, cfg.seed)?[0].clone())
                }
                _ => None,
            };
            Ok(PreparedData {
                id: format!("idx:{}:{}:seed{}", dir.display(), cfg.variation.name(), cfg.seed),
                train,
                valid,
                test,
                upright_train,
                clamped: 0,
            })
        }
        DataSource::Amat { train, test } => {
            let tr = load_amat(train)?;
            let te = load_amat(test)?;
            let n = tr.dataset.len();
            if n < cfg.train + cfg.valid {
                return Err(Error::InsufficientSamples(format!(
                    "{} has {n} rows, {} needed",
                    train.display(),
                    cfg.train + cfg.valid
                )));
            }
            let first: Vec<usize> = (0..cfg.train).collect();
            let second: Vec<usize> = (cfg.train..cfg.train + cfg.valid).collect();
            let tests: Vec<usize> = (0..cfg.test.min(te.dataset.len())).collect();
            Ok(PreparedData {
                id: format!("amat:{}", train.display()),
                train: tr.dataset.select(&first, SplitTag::Train),
                valid: tr.dataset.select(&second, SplitTag::Valid),
                test: te.dataset.select(&tests, SplitTag::Test),
                upright_train: None,
                clamped: tr.clamped + te.clamped,
            })
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub preset: String,
    /// Replaces the preset's feature layers when set.
    pub layers: Option<Vec<LayerSpec>>,
    /// Replaces the preset's task layer when set.
    pub task: Option<TaskSpec>,
    pub data: DataConfig,
    pub seed: u64,
    /// Worker threads; 0 uses every core.
    pub threads: usize,
    pub n_patches: usize,
    pub em: EmOptions,
    pub task_em: EmOptions,
    pub predict: PredictOptions,
    /// Upright labeled samples per class used to pick the canonical rotation.
    pub canonical_samples: usize,
    /// Calibrate score standardization on the training features.
    pub calibrate: bool,
}

impl RunConfig {
    pub fn new(preset: &str, data: DataConfig) -> Self {
        RunConfig {
            preset: preset.to_string(),
            layers: None,
            task: None,
            data,
            seed: 0,
            threads: 0,
            n_patches: 200_000,
            em: EmOptions::default(),
            task_em: EmOptions::default(),
            predict: PredictOptions::default(),
            canonical_samples: 5,
            calibrate: false,
        }
    }

    pub fn resolve_preset(&self) -> Result<Preset> {
        let mut preset = build_preset(&self.preset)?;
        if let Some(layers) = &self.layers {
            preset.layers = layers.clone();
        }
        if let Some(task) = &self.task {
            preset.task = task.clone();
        }
        Ok(preset)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SvmReport {
    pub lambda: f64,
    pub validation_curve: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub config: RunConfig,
    pub dataset: String,
    pub seed: u64,
    pub layers: Vec<LayerReport>,
    pub labeled_samples: usize,
    pub svm: Option<SvmReport>,
    pub canonical_shifts: Option<Vec<usize>>,
    pub wall_time_secs: f64,
}

/// Binary features of many images, one row per image.
pub fn feature_rows(net: &Network, images: &[GrayImage]) -> Result<BinaryRows> {
    let maps = net.forward_batch(images)?;
    let dim = maps.first().map_or(0, FeatureMap::len);
    let mut rows = BinaryRows::new(dim);
    for m in &maps {
        rows.push_map(m)?;
    }
    Ok(rows)
}

fn rows_by_class(rows: &BinaryRows, labels: &[u8]) -> Vec<BinaryRows> {
    let mut out: Vec<BinaryRows> = (0..NUM_CLASSES).map(|_| BinaryRows::new(rows.dim())).collect();
    for (n, &l) in labels.iter().enumerate() {
        out[l as usize]
            .push_indices(rows.row(n))
            .expect("row of matching width");
    }
    out
}

fn images_by_class(ds: &Dataset) -> Vec<Vec<GrayImage>> {
    let mut out = vec![Vec::new(); NUM_CLASSES];
    for (img, &l) in ds.images.iter().zip(&ds.labels) {
        out[l as usize].push(img.clone());
    }
    out
}

fn first_per_class(ds: &Dataset, k: usize) -> Vec<Vec<GrayImage>> {
    images_by_class(ds)
        .into_iter()
        .map(|v| v.into_iter().take(k).collect())
        .collect()
}

/// Fits the task layer of `preset` on top of a trained network.
pub fn train_task(
    net: &Network,
    preset: &Preset,
    cfg: &RunConfig,
    labeled: &Dataset,
    upright: Option<&Dataset>,
    valid: &Dataset,
) -> Result<(TaskLayer, Option<SvmReport>, Option<Vec<usize>>)> {
    let task_em = EmOptions {
        seed: cfg.seed,
        ..cfg.task_em
    };
    let mut svm_report = None;
    let mut shifts = None;
    let mut model = match &preset.task {
        TaskSpec::Mixture { components } => {
            let rows = feature_rows(net, &labeled.images)?;
            fit_class_mixtures(&rows_by_class(&rows, &labeled.labels), *components, &task_em)?
        }
        TaskSpec::RotMix { components, rotations } => {
            let model = fit_rotmix_classes(net, &images_by_class(labeled), *rotations, *components, &task_em)?;
            match upright {
                Some(up) if cfg.canonical_samples > 0 => {
                    let samples: Vec<BinaryRows> = first_per_class(up, cfg.canonical_samples)
                        .iter()
                        .map(|imgs| feature_rows(net, imgs))
                        .collect::<Result<_>>()?;
                    let (canon, s) = canonicalize(&model, &samples)?;
                    shifts = Some(s);
                    canon
                }
                _ => model,
            }
        }
        TaskSpec::Svm { lambdas, epochs } => {
            let train_rows = feature_rows(net, &labeled.images)?;
            let valid_rows = feature_rows(net, &valid.images)?;
            let tl: Vec<usize> = labeled.labels.iter().map(|&l| l as usize).collect();
            let vl: Vec<usize> = valid.labels.iter().map(|&l| l as usize).collect();
            let (model, curve) = select_linear_svm(
                (&train_rows, &tl),
                (&valid_rows, &vl),
                NUM_CLASSES,
                lambdas,
                *epochs,
                cfg.seed,
            )?;
            if let TaskModels::Svm(svm) = &model.models {
                svm_report = Some(SvmReport {
                    lambda: svm.lambda,
                    validation_curve: curve,
                });
            }
            model
        }
    };
    if cfg.calibrate {
        let inputs = task_inputs(net, &cfg.predict, &labeled.images, &preset.task)?;
        inputs.with_inputs(|refs| calibrate(&mut model, refs, cfg.predict))?;
    }
    Ok((
        TaskLayer {
            spec: preset.task.clone(),
            options: cfg.predict,
            model,
        },
        svm_report,
        shifts,
    ))
}

/// Scorer inputs for a set of images: single maps, or complete samples for
/// exact rotation scoring.
pub enum TaskInputs {
    Maps(BinaryRows),
    Complete(Vec<Vec<Vec<u32>>>),
}

impl TaskInputs {
    pub fn len(&self) -> usize {
        match self {
            TaskInputs::Maps(r) => r.len(),
            TaskInputs::Complete(c) => c.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Calls `f` with borrowed scorer inputs.
    pub fn with_inputs<R>(&self, f: impl FnOnce(&[ScoreInput<'_>]) -> R) -> R {
        match self {
            TaskInputs::Maps(rows) => f(&rows.iter().map(ScoreInput::Map).collect::<Vec<_>>()),
            TaskInputs::Complete(samples) => {
                let blocks: Vec<Vec<&[u32]>> = samples.iter().map(|s| s.iter().map(Vec::as_slice).collect()).collect();
                f(&blocks.iter().map(|b| ScoreInput::Complete(b)).collect::<Vec<_>>())
            }
        }
    }
}

pub fn task_inputs(net: &Network, opts: &PredictOptions, images: &[GrayImage], task: &TaskSpec) -> Result<TaskInputs> {
    match task {
        TaskSpec::RotMix { rotations, .. } if opts.rot_scoring == RotScoring::Exact => {
            let batch = complete_features(net, images, *rotations)?;
            Ok(TaskInputs::Complete(
                (0..batch.len())
                    .map(|n| (0..batch.blocks()).map(|b| batch.block(n, b).to_vec()).collect())
                    .collect(),
            ))
        }
        _ => Ok(TaskInputs::Maps(feature_rows(net, images)?)),
    }
}

/// Trains feature layers and the task layer.
pub fn run_train(cfg: &RunConfig, data: &PreparedData) -> Result<(Model, TrainReport)> {
    let start = Instant::now();
    let preset = cfg.resolve_preset()?;
    let mut net = Network::from_preset(&preset)?;
    net.provenance.dataset = data.id.clone();
    let opts = TrainOptions {
        n_patches: cfg.n_patches,
        em: EmOptions {
            seed: cfg.seed,
            ..cfg.em
        },
    };
    let (net, layers) = train_greedy(net, &data.train.images, &opts)?;
    let (model, report) = run_train_task(net, layers, cfg, data, &preset)?;
    Ok((
        model,
        TrainReport {
            wall_time_secs: start.elapsed().as_secs_f64(),
            ..report
        },
    ))
}

/// Fits only the task layer on an already trained network.
pub fn run_train_task(
    net: Network,
    layers: Vec<LayerReport>,
    cfg: &RunConfig,
    data: &PreparedData,
    preset: &Preset,
) -> Result<(Model, TrainReport)> {
    let start = Instant::now();
    let (labeled, upright) = data.labeled(cfg.data.per_class, cfg.seed)?;
    let (task, svm, canonical_shifts) = train_task(&net, preset, cfg, &labeled, upright.as_ref(), &data.valid)?;
    let report = TrainReport {
        config: cfg.clone(),
        dataset: data.id.clone(),
        seed: cfg.seed,
        layers,
        labeled_samples: labeled.len(),
        svm,
        canonical_shifts,
        wall_time_secs: start.elapsed().as_secs_f64(),
    };
    Ok((
        Model {
            network: net,
            task: Some(task),
        },
        report,
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Percent of misclassified samples.
    pub error_rate: f64,
    pub n: usize,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
}

pub fn evaluate(model: &Model, ds: &Dataset) -> Result<EvalReport> {
    let task = model
        .task
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument("model has no task layer".into()))?;
    if ds.is_empty() {
        return Err(Error::EmptyData("evaluation set"));
    }
    let inputs = task_inputs(&model.network, &task.options, &ds.images, &task.spec)?;
    let scorer = Scorer::new(&task.model, task.options);
    let preds = inputs.with_inputs(|all| {
        crate::parallel::par_map(all.len(), |n| scorer.predict(all[n]).map(|p| p.label))
            .into_iter()
            .collect::<Result<Vec<_>>>()
    })?;
    let mut confusion = vec![vec![0usize; NUM_CLASSES]; NUM_CLASSES];
    let mut wrong = 0;
    for (&p, &l) in preds.iter().zip(&ds.labels) {
        confusion[l as usize][p.min(NUM_CLASSES - 1)] += 1;
        wrong += usize::from(p != l as usize);
    }
    Ok(EvalReport {
        error_rate: 100.0 * wrong as f64 / ds.len() as f64,
        n: ds.len(),
        confusion,
    })
}
