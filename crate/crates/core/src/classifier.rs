//! Task layers: per-class mixtures, per-class rotation mixtures and a linear SVM.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::groups::GroupSpec;
use crate::map::{BinaryRows, ChannelLayout, CompleteBatch, FeatureMap, GrayImage};
use crate::math::{argmax, log_sum_exp};
use crate::mixture::{bm_fit, bm_m_step, BernoulliMixture, EmOptions, LogTables};
use crate::network::Network;
use crate::parallel::par_map;
use crate::permem::{pem_fit_complete, PemOptions, PermutationMixture, QuarterTie, Schedule};
use crate::transforms::{quarter_turn_permutation, rotate_image_steps, Interpolation};

const STD_FLOOR: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScoreMode {
    /// `log Σ π·p` over components (and rotations).
    #[default]
    Marginal,
    /// Best single component (and rotation).
    Max,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RotScoring {
    /// Score the unrotated feature map against every rotated block.
    #[default]
    Shortcut,
    /// Score the complete sample of all rotated feature maps.
    Exact,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct PredictOptions {
    pub mode: ScoreMode,
    pub rot_scoring: RotScoring,
    pub standardize: bool,
}

/// Mean and spread of one class model's scores over a calibration set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreStats {
    pub mean: f64,
    pub std: f64,
}

/// One-vs-rest weights, `classes × (dim + 1)` with the bias last.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearSvm {
    pub dim: usize,
    pub lambda: f64,
    pub weights: Vec<f64>,
}

impl LinearSvm {
    pub fn classes(&self) -> usize {
        self.weights.len() / (self.dim + 1)
    }

    pub fn score(&self, on: &[u32], out: &mut [f64]) {
        let w = self.dim + 1;
        for (c, o) in out.iter_mut().enumerate() {
            let row = &self.weights[c * w..(c + 1) * w];
            *o = row[self.dim] + on.iter().map(|&d| row[d as usize]).sum::<f64>();
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TaskModels {
    Mixture(Vec<BernoulliMixture>),
    RotMix(Vec<PermutationMixture>),
    Svm(LinearSvm),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassModel {
    pub models: TaskModels,
    pub standardization: Option<Vec<ScoreStats>>,
}

impl ClassModel {
    pub fn classes(&self) -> usize {
        match &self.models {
            TaskModels::Mixture(m) => m.len(),
            TaskModels::RotMix(m) => m.len(),
            TaskModels::Svm(svm) => svm.classes(),
        }
    }

    pub fn dim(&self) -> usize {
        match &self.models {
            TaskModels::Mixture(m) => m[0].dim(),
            TaskModels::RotMix(m) => m[0].dim(),
            TaskModels::Svm(svm) => svm.dim,
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self.models {
            TaskModels::Mixture(_) => "mixture",
            TaskModels::RotMix(_) => "rotmix",
            TaskModels::Svm(_) => "svm",
        }
    }

    /// Fits a mixture for one more class. Existing class models are untouched.
    pub fn add_class(&mut self, features: &BinaryRows, components: usize, em: &EmOptions) -> Result<()> {
        let dim = self.dim();
        if features.dim() != dim {
            return Err(Error::dim("class features", dim, features.dim()));
        }
        match &mut self.models {
            TaskModels::Mixture(models) => {
                let seed = em.seed.wrapping_add(models.len() as u64);
                models.push(fit_one_mixture(features, components, &EmOptions { seed, ..*em })?);
            }
            _ => {
                return Err(Error::InvalidArgument(format!(
                    "cannot add a class to a {} model",
                    self.kind_name()
                )))
            }
        }
        // stale once the class set changes
        self.standardization = None;
        Ok(())
    }
}

fn fit_one_mixture(features: &BinaryRows, components: usize, em: &EmOptions) -> Result<BernoulliMixture> {
    if features.len() < components.max(1) {
        return Err(Error::InsufficientSamples(format!(
            "{} samples for {components} components",
            features.len()
        )));
    }
    if components == 1 {
        // a single component is the clamped average
        let ones = vec![1.0; features.len()];
        return bm_m_step(features, &ones, 1, em.eps, &mut ChaCha8Rng::seed_from_u64(em.seed));
    }
    Ok(bm_fit(features, components, em)?.0)
}

/// One mixture per class on that class's binary features.
pub fn fit_class_mixtures(features: &[BinaryRows], components: usize, em: &EmOptions) -> Result<ClassModel> {
    if features.is_empty() {
        return Err(Error::EmptyData("classes"));
    }
    let dim = features[0].dim();
    if let Some(bad) = features.iter().find(|f| f.dim() != dim) {
        return Err(Error::dim("class features", dim, bad.dim()));
    }
    let models = par_map(features.len(), |y| {
        fit_one_mixture(
            &features[y],
            components,
            &EmOptions {
                seed: em.seed.wrapping_add(y as u64),
                ..*em
            },
        )
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    Ok(ClassModel {
        models: TaskModels::Mixture(models),
        standardization: None,
    })
}

/// One rotation mixture per class on ready-made complete samples.
pub fn fit_rotmix_complete(
    batches: &[CompleteBatch],
    spec: &GroupSpec,
    components: usize,
    opts: &PemOptions,
) -> Result<ClassModel> {
    if batches.is_empty() {
        return Err(Error::EmptyData("classes"));
    }
    for b in batches {
        if b.len() < components {
            return Err(Error::InsufficientSamples(format!(
                "{} samples for {components} components",
                b.len()
            )));
        }
    }
    let models = par_map(batches.len(), |y| {
        let em = EmOptions {
            seed: opts.em.seed.wrapping_add(y as u64),
            ..opts.em
        };
        pem_fit_complete(
            &batches[y],
            spec,
            components,
            &PemOptions {
                em,
                quarter_tie: opts.quarter_tie.clone(),
            },
        )
        .map(|(m, _)| m)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    Ok(ClassModel {
        models: TaskModels::RotMix(models),
        standardization: None,
    })
}

/// Network features of `img` rotated to each of `rotations` orientations, in
/// flat group order. When the network output turns exactly with the input,
/// only the first quarter of the orientations is forwarded and the rest are
/// obtained by rotating those outputs.
pub fn rotated_features(net: &Network, img: &GrayImage, rotations: usize) -> Result<Vec<FeatureMap>> {
    let (h, w) = (img.height(), img.width());
    if rotations.is_multiple_of(4) && h == w && net.quarter_turn_equivariant() {
        let q = rotations / 4;
        let base: Vec<FeatureMap> = (0..q)
            .map(|r| net.forward(&rotate_image_steps(img, r, rotations, Interpolation::Bilinear)))
            .collect::<Result<_>>()?;
        let mut out = base.clone();
        for turns in 1..4 {
            for fm in &base {
                out.push(net.quarter_turn_output(fm, turns, h, w)?);
            }
        }
        Ok(out)
    } else {
        (0..rotations)
            .map(|s| net.forward(&rotate_image_steps(img, s, rotations, Interpolation::Bilinear)))
            .collect()
    }
}

/// Complete samples of network features for many images.
pub fn complete_features(net: &Network, images: &[GrayImage], rotations: usize) -> Result<CompleteBatch> {
    let per_image = par_map(images.len(), |i| rotated_features(net, &images[i], rotations));
    let dim = {
        let (h, w, c) = net.output_shape(
            images.first().map_or(0, |i| i.height()),
            images.first().map_or(0, |i| i.width()),
        )?;
        h * w * c
    };
    let mut batch = CompleteBatch::new(rotations, dim);
    for maps in per_image {
        let blocks: Vec<Vec<u32>> = maps?.iter().map(|m| m.on_indices()).collect();
        batch.push_blocks(&blocks)?;
    }
    Ok(batch)
}

/// Quarter-turn tie for a rotation task layer over this network's output, if exact.
pub fn task_quarter_tie(net: &Network, rotations: usize, height: usize, width: usize) -> Result<Option<QuarterTie>> {
    let (h, w, _) = net.output_shape(height, width)?;
    if !rotations.is_multiple_of(4) || h != w || height != width || !net.quarter_turn_equivariant() {
        return Ok(None);
    }
    let layout = net
        .layers()
        .last()
        .map_or(ChannelLayout::edges(), |l| l.output_layout());
    Ok(Some(QuarterTie {
        permutation: quarter_turn_permutation(h, &layout)?,
    }))
}

/// Per-class rotation mixtures on network features of `images_per_class`
/// rotated to `rotations` orientations.
pub fn fit_rotmix_classes(
    net: &Network,
    images_per_class: &[Vec<GrayImage>],
    rotations: usize,
    components: usize,
    em: &EmOptions,
) -> Result<ClassModel> {
    let first = images_per_class
        .iter()
        .flat_map(|c| c.first())
        .next()
        .ok_or(Error::EmptyData("class images"))?;
    let spec = GroupSpec::new(rotations, 1)?;
    let quarter_tie = task_quarter_tie(net, rotations, first.height(), first.width())?;
    let batches = images_per_class
        .iter()
        .map(|imgs| complete_features(net, imgs, rotations))
        .collect::<Result<Vec<_>>>()?;
    fit_rotmix_complete(&batches, &spec, components, &PemOptions { em: *em, quarter_tie })
}

/// Relabels each class's rotations so that the one best matching the upright
/// samples becomes index 0. Returns the new model and the chosen shifts.
pub fn canonicalize(model: &ClassModel, upright: &[BinaryRows]) -> Result<(ClassModel, Vec<usize>)> {
    let TaskModels::RotMix(models) = &model.models else {
        return Err(Error::InvalidArgument(format!(
            "canonicalize needs a rotmix model, got {}",
            model.kind_name()
        )));
    };
    if upright.len() != models.len() {
        return Err(Error::dim("upright sample classes", models.len(), upright.len()));
    }
    let mut shifts = Vec::with_capacity(models.len());
    let mut out = Vec::with_capacity(models.len());
    for (m, samples) in models.iter().zip(upright) {
        if samples.is_empty() {
            return Err(Error::EmptyData("upright samples"));
        }
        if samples.dim() != m.dim() {
            return Err(Error::dim("upright samples", m.dim(), samples.dim()));
        }
        let p = m.order();
        let f = m.components();
        let tables = m.tables();
        let mut ll = vec![0.0; f * p];
        let mut totals = vec![0.0; p];
        let mut per_comp = vec![0.0; f];
        for on in samples.iter() {
            tables.log_likelihoods(on, &mut ll);
            for (w, t) in totals.iter_mut().enumerate() {
                for (z, v) in per_comp.iter_mut().enumerate() {
                    *v = ll[z * p + w];
                }
                *t += log_sum_exp(&per_comp);
            }
        }
        let best = argmax(&totals);
        shifts.push(best);
        out.push(m.relabel(best)?);
    }
    Ok((
        ClassModel {
            models: TaskModels::RotMix(out),
            standardization: model.standardization.clone(),
        },
        shifts,
    ))
}

/// One sample presented to a scorer.
#[derive(Debug, Clone, Copy)]
pub enum ScoreInput<'a> {
    /// ON indices of a single feature map.
    Map(&'a [u32]),
    /// ON indices of every rotated block of one complete sample.
    Complete(&'a [&'a [u32]]),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub label: usize,
    /// Best matching rotation of the winning class (rotation models only).
    pub rotation: Option<usize>,
    pub scores: Vec<f64>,
}

/// Precomputed log tables for fast repeated prediction.
pub struct Scorer<'a> {
    model: &'a ClassModel,
    opts: PredictOptions,
    tables: Vec<LogTables>,
    log_pi: Vec<Vec<f64>>,
    /// Flattened priors for the shortcut: part `(z, u)` pairs with `π_{z,u⁻¹}`.
    flat_log_pi: Vec<Vec<f64>>,
    schedules: Vec<Schedule>,
}

impl<'a> Scorer<'a> {
    pub fn new(model: &'a ClassModel, opts: PredictOptions) -> Self {
        let (mut tables, mut log_pi, mut flat_log_pi, mut schedules) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        match &model.models {
            TaskModels::Mixture(ms) => {
                for m in ms {
                    tables.push(m.tables());
                    log_pi.push(m.pi().iter().map(|p| p.ln()).collect());
                }
            }
            TaskModels::RotMix(ms) => {
                for m in ms {
                    let table = m.table();
                    tables.push(m.tables());
                    log_pi.push(m.pi().iter().map(|p| p.ln()).collect());
                    let p = m.order();
                    flat_log_pi.push(
                        (0..m.components() * p)
                            .map(|k| m.prior(k / p, table.inverse(k % p)).ln())
                            .collect(),
                    );
                    schedules.push(Schedule::general(&table));
                }
            }
            TaskModels::Svm(_) => {}
        }
        Scorer {
            model,
            opts,
            tables,
            log_pi,
            flat_log_pi,
            schedules,
        }
    }

    /// Raw per-class scores and, for rotation models, each class's best rotation.
    pub fn raw_scores(&self, input: ScoreInput<'_>) -> Result<(Vec<f64>, Vec<usize>)> {
        let c = self.model.classes();
        let mut scores = vec![0.0; c];
        let mut rots = Vec::new();
        let dim = self.model.dim();
        let check = |on: &[u32]| -> Result<()> {
            match on.iter().max() {
                Some(&d) if d as usize >= dim => Err(Error::dim("feature index bound", dim, d as usize + 1)),
                _ => Ok(()),
            }
        };
        let combine = |joint: &[f64]| match self.opts.mode {
            ScoreMode::Marginal => log_sum_exp(joint),
            ScoreMode::Max => joint.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        };
        match (&self.model.models, input) {
            (TaskModels::Svm(svm), ScoreInput::Map(on)) => {
                check(on)?;
                svm.score(on, &mut scores);
            }
            (TaskModels::Mixture(_), ScoreInput::Map(on)) => {
                check(on)?;
                for (y, s) in scores.iter_mut().enumerate() {
                    let mut ll = vec![0.0; self.tables[y].k];
                    self.tables[y].log_likelihoods(on, &mut ll);
                    ll.iter_mut().zip(&self.log_pi[y]).for_each(|(l, p)| *l += p);
                    *s = combine(&ll);
                }
            }
            (TaskModels::RotMix(ms), ScoreInput::Map(on)) if self.opts.rot_scoring == RotScoring::Shortcut => {
                check(on)?;
                for (y, s) in scores.iter_mut().enumerate() {
                    let mut ll = vec![0.0; self.tables[y].k];
                    self.tables[y].log_likelihoods(on, &mut ll);
                    ll.iter_mut().zip(&self.flat_log_pi[y]).for_each(|(l, p)| *l += p);
                    *s = combine(&ll);
                    rots.push(argmax(&ll) % ms[y].order());
                }
            }
            (TaskModels::RotMix(ms), ScoreInput::Complete(blocks)) if self.opts.rot_scoring == RotScoring::Exact => {
                blocks.iter().try_for_each(|b| check(b))?;
                let mut scratch = Vec::new();
                for (y, s) in scores.iter_mut().enumerate() {
                    if blocks.len() != ms[y].order() {
                        return Err(Error::dim("complete sample blocks", ms[y].order(), blocks.len()));
                    }
                    let mut joint = vec![0.0; self.tables[y].k];
                    ms[y].joint_scores(&self.tables[y], &self.schedules[y], blocks, &mut scratch, &mut joint);
                    *s = combine(&joint);
                    rots.push(argmax(&joint) % ms[y].order());
                }
            }
            (_, ScoreInput::Map(_)) => {
                return Err(Error::InvalidArgument(
                    "exact rotation scoring needs complete samples".into(),
                ))
            }
            (_, ScoreInput::Complete(_)) => {
                return Err(Error::InvalidArgument(
                    "complete samples are only scored exactly by rotation models".into(),
                ))
            }
        }
        Ok((scores, rots))
    }

    pub fn predict(&self, input: ScoreInput<'_>) -> Result<Prediction> {
        let (mut scores, rots) = self.raw_scores(input)?;
        if self.opts.standardize {
            if let Some(stats) = &self.model.standardization {
                for (s, st) in scores.iter_mut().zip(stats) {
                    *s = (*s - st.mean) / st.std;
                }
            }
        }
        let label = argmax(&scores);
        Ok(Prediction {
            label,
            rotation: rots.get(label).copied(),
            scores,
        })
    }
}

/// Convenience single-sample prediction; build a [`Scorer`] for many samples.
pub fn predict(model: &ClassModel, input: ScoreInput<'_>, opts: PredictOptions) -> Result<Prediction> {
    Scorer::new(model, opts).predict(input)
}

/// Per-class mean and standard deviation of raw scores (`N×C`, row-major).
pub fn standardize_logliks(scores: &[f64], classes: usize) -> Result<Vec<ScoreStats>> {
    if classes == 0 || scores.is_empty() || !scores.len().is_multiple_of(classes) {
        return Err(Error::EmptyData("calibration scores"));
    }
    let n = (scores.len() / classes) as f64;
    Ok((0..classes)
        .map(|c| {
            let col = scores.iter().skip(c).step_by(classes);
            let mean = col.clone().sum::<f64>() / n;
            let var = col.map(|s| (s - mean) * (s - mean)).sum::<f64>() / n;
            ScoreStats {
                mean,
                std: var.sqrt().max(STD_FLOOR),
            }
        })
        .collect())
}

/// Calibrates standardization on `inputs` and stores the stats in `model`.
pub fn calibrate(model: &mut ClassModel, inputs: &[ScoreInput<'_>], opts: PredictOptions) -> Result<()> {
    let scorer = Scorer::new(model, opts);
    let rows = par_map(inputs.len(), |i| scorer.raw_scores(inputs[i]).map(|r| r.0));
    let mut flat = Vec::with_capacity(inputs.len() * model.classes());
    for r in rows {
        flat.extend(r?);
    }
    let stats = standardize_logliks(&flat, model.classes())?;
    model.standardization = Some(stats);
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SvmOptions {
    pub lambda: f64,
    pub epochs: usize,
    pub seed: u64,
}

/// One-vs-rest L2 hinge loss by stochastic subgradient descent with step
/// `1/(λt)`. The bias is an extra always-on feature.
pub fn fit_linear_svm(
    features: &BinaryRows,
    labels: &[usize],
    classes: usize,
    opts: &SvmOptions,
) -> Result<ClassModel> {
    if features.len() != labels.len() {
        return Err(Error::dim("labels", features.len(), labels.len()));
    }
    if features.is_empty() {
        return Err(Error::EmptyData("svm features"));
    }
    if classes < 2 {
        return Err(Error::InvalidArgument("an svm needs at least two classes".into()));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::IndexOutOfRange {
            what: "label",
            value: bad,
            limit: classes,
        });
    }
    if !(opts.lambda > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "lambda must be positive, got {}",
            opts.lambda
        )));
    }
    let dim = features.dim();
    let width = dim + 1;
    let rows = par_map(classes, |c| {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        // w = scale · v keeps the shrinkage step O(1)
        let mut v = vec![0.0; width];
        let mut scale = 1.0;
        let mut order: Vec<usize> = (0..features.len()).collect();
        let mut t = 0usize;
        for _ in 0..opts.epochs {
            order.shuffle(&mut rng);
            for &n in &order {
                t += 1;
                let on = features.row(n);
                let y = if labels[n] == c { 1.0 } else { -1.0 };
                let margin = y * scale * (v[dim] + on.iter().map(|&d| v[d as usize]).sum::<f64>());
                let eta = 1.0 / (opts.lambda * t as f64);
                if t == 1 {
                    v.iter_mut().for_each(|x| *x = 0.0);
                    scale = 1.0;
                } else {
                    scale *= 1.0 - 1.0 / t as f64;
                }
                if margin < 1.0 {
                    let step = eta * y / scale;
                    v[dim] += step;
                    for &d in on {
                        v[d as usize] += step;
                    }
                }
                if scale < 1e-9 {
                    v.iter_mut().for_each(|x| *x *= scale);
                    scale = 1.0;
                }
            }
        }
        v.into_iter().map(|x| x * scale).collect::<Vec<f64>>()
    });
    Ok(ClassModel {
        models: TaskModels::Svm(LinearSvm {
            dim,
            lambda: opts.lambda,
            weights: rows.concat(),
        }),
        standardization: None,
    })
}

/// Error rate of a model on single-map inputs, as a fraction.
pub fn error_rate(model: &ClassModel, features: &BinaryRows, labels: &[usize], opts: PredictOptions) -> Result<f64> {
    let scorer = Scorer::new(model, opts);
    let wrong = par_map(features.len(), |n| {
        scorer
            .predict(ScoreInput::Map(features.row(n)))
            .map(|p| p.label != labels[n])
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?
    .into_iter()
    .filter(|&w| w)
    .count();
    Ok(wrong as f64 / features.len().max(1) as f64)
}

/// Fits one SVM per `λ` and keeps the one with the lowest validation error
/// (ties go to the larger `λ`).
pub fn select_linear_svm(
    train: (&BinaryRows, &[usize]),
    valid: (&BinaryRows, &[usize]),
    classes: usize,
    lambdas: &[f64],
    epochs: usize,
    seed: u64,
) -> Result<(ClassModel, Vec<(f64, f64)>)> {
    let mut best: Option<(f64, ClassModel)> = None;
    let mut curve = Vec::new();
    let mut sorted = lambdas.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    for &lambda in &sorted {
        let model = fit_linear_svm(train.0, train.1, classes, &SvmOptions { lambda, epochs, seed })?;
        let err = error_rate(&model, valid.0, valid.1, PredictOptions::default())?;
        log::info!("svm lambda {lambda:e}: validation error {:.4}", err);
        curve.push((lambda, err));
        if best.as_ref().is_none_or(|(e, _)| err < *e) {
            best = Some((err, model));
        }
    }
    let (_, model) = best.ok_or(Error::EmptyData("lambda grid"))?;
    Ok((model, curve))
}
