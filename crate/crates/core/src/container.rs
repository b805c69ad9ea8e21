//! Single-file model container: magic, manifest length, JSON manifest, raw tensors.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::classifier::{ClassModel, LinearSvm, PredictOptions, ScoreStats, TaskModels};
use crate::error::{Error, Result};
use crate::groups::GroupSpec;
use crate::mixture::BernoulliMixture;
use crate::network::{LayerSpec, Network, Provenance, TaskSpec};
use crate::permem::{PartsDictionary, PermutationMixture};

pub const MAGIC: &[u8; 8] = b"PMXMODEL";
pub const FORMAT_VERSION: u32 = 1;

/// A fitted task layer together with how it was configured.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskLayer {
    pub spec: TaskSpec,
    pub options: PredictOptions,
    pub model: ClassModel,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub network: Network,
    pub task: Option<TaskLayer>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorInfo {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
enum TaskManifest {
    Mixture {
        classes: usize,
        components: usize,
        eps: Vec<f64>,
    },
    RotMix {
        classes: usize,
        components: usize,
        group: GroupSpec,
        eps: Vec<f64>,
    },
    Svm {
        classes: usize,
        dim: usize,
        lambda: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ClassifierManifest {
    spec: TaskSpec,
    options: PredictOptions,
    model: TaskManifest,
    standardized: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub preset: String,
    pub seed: u64,
    pub dataset: String,
    pub layers: Vec<LayerSpec>,
    pub group_specs: Vec<GroupSpec>,
    classifier: Option<ClassifierManifest>,
    pub tensors: Vec<TensorInfo>,
}

struct Tensors {
    info: Vec<TensorInfo>,
    data: Vec<f64>,
}

impl Tensors {
    fn push(&mut self, name: String, shape: Vec<usize>, values: &[f64]) {
        debug_assert_eq!(shape.iter().product::<usize>(), values.len());
        self.info.push(TensorInfo { name, shape });
        self.data.extend_from_slice(values);
    }
}

/// Reads tensors back in manifest order, checking names and shapes.
struct TensorReader<'a> {
    info: &'a [TensorInfo],
    bytes: &'a [u8],
    next: usize,
}

impl TensorReader<'_> {
    fn take(&mut self, name: &str, shape: &[usize]) -> Result<Vec<f64>> {
        let info = self
            .info
            .get(self.next)
            .ok_or_else(|| Error::Format(format!("missing tensor {name}")))?;
        if info.name != name || info.shape != shape {
            return Err(Error::Format(format!(
                "expected tensor {name} {shape:?}, found {} {:?}",
                info.name, info.shape
            )));
        }
        self.next += 1;
        let n: usize = shape.iter().product();
        if self.bytes.len() < n * 8 {
            return Err(Error::Truncated(format!("tensor {name}")));
        }
        let (head, rest) = self.bytes.split_at(n * 8);
        self.bytes = rest;
        Ok(head
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect())
    }
}

pub fn to_bytes(model: &Model) -> Result<Vec<u8>> {
    let net = &model.network;
    let mut t = Tensors {
        info: Vec::new(),
        data: Vec::new(),
    };
    for (i, _) in net.layers().iter().enumerate() {
        if let Some(d) = net.dictionary(i) {
            t.push(format!("layer{i}.parts"), vec![d.len(), d.dim()], d.parts());
            t.push(format!("layer{i}.priors"), vec![d.len()], d.priors());
        } else if i > 0 {
            return Err(Error::Unfitted(i));
        }
    }
    let classifier = match &model.task {
        None => None,
        Some(task) => {
            let manifest = match &task.model.models {
                TaskModels::Mixture(ms) => {
                    for (y, m) in ms.iter().enumerate() {
                        t.push(format!("class{y}.pi"), vec![m.components()], m.pi());
                        t.push(format!("class{y}.mu"), vec![m.components(), m.dim()], m.mu());
                    }
                    TaskManifest::Mixture {
                        classes: ms.len(),
                        components: ms[0].components(),
                        eps: ms.iter().map(|m| m.eps()).collect(),
                    }
                }
                TaskModels::RotMix(ms) => {
                    for (y, m) in ms.iter().enumerate() {
                        let k = m.components() * m.order();
                        t.push(format!("class{y}.pi"), vec![k], m.pi());
                        t.push(format!("class{y}.mu"), vec![k, m.dim()], m.mu());
                    }
                    TaskManifest::RotMix {
                        classes: ms.len(),
                        components: ms[0].components(),
                        group: *ms[0].spec(),
                        eps: ms.iter().map(|m| m.eps()).collect(),
                    }
                }
                TaskModels::Svm(svm) => {
                    t.push("svm.weights".into(), vec![svm.classes(), svm.dim + 1], &svm.weights);
                    TaskManifest::Svm {
                        classes: svm.classes(),
                        dim: svm.dim,
                        lambda: svm.lambda,
                    }
                }
            };
            if let Some(stats) = &task.model.standardization {
                let flat: Vec<f64> = stats.iter().flat_map(|s| [s.mean, s.std]).collect();
                t.push("standardization".into(), vec![stats.len(), 2], &flat);
            }
            Some(ClassifierManifest {
                spec: task.spec.clone(),
                options: task.options,
                model: manifest,
                standardized: task.model.standardization.is_some(),
            })
        }
    };
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        preset: net.provenance.preset.clone(),
        seed: net.provenance.seed,
        dataset: net.provenance.dataset.clone(),
        layers: net.layers().to_vec(),
        group_specs: net.layers().iter().map(|l| l.group()).collect::<Result<_>>()?,
        classifier,
        tensors: t.info,
    };
    let json = serde_json::to_vec(&manifest)?;
    let mut out = Vec::with_capacity(12 + json.len() + t.data.len() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for v in &t.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

/// Parses the header and manifest only.
pub fn read_manifest<'a>(bytes: &'a [u8], origin: &str) -> Result<(Manifest, &'a [u8])> {
    if bytes.len() < 8 || &bytes[..8] != MAGIC {
        return Err(Error::BadMagic {
            path: origin.to_string(),
            expected: String::from_utf8_lossy(MAGIC).into_owned(),
            found: String::from_utf8_lossy(&bytes[..bytes.len().min(8)]).into_owned(),
        });
    }
    if bytes.len() < 12 {
        return Err(Error::Truncated(format!("{origin}: header")));
    }
    let len = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let body = &bytes[12..];
    if body.len() < len {
        return Err(Error::Truncated(format!("{origin}: manifest")));
    }
    let manifest: Manifest = serde_json::from_slice(&body[..len])?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported format version {}",
            manifest.format_version
        )));
    }
    Ok((manifest, &body[len..]))
}

pub fn from_bytes(bytes: &[u8], origin: &str) -> Result<Model> {
    let (manifest, data) = read_manifest(bytes, origin)?;
    let mut r = TensorReader {
        info: &manifest.tensors,
        bytes: data,
        next: 0,
    };
    let mut net = Network::new(manifest.layers.clone())?;
    net.provenance = Provenance {
        seed: manifest.seed,
        preset: manifest.preset.clone(),
        dataset: manifest.dataset.clone(),
    };
    for (i, spec) in manifest.layers.iter().enumerate().skip(1) {
        let k = spec.parts().expect("non-edge layer");
        let s = spec.coding.patch_size;
        let dim = s * s * net.input_channels(i);
        let parts = r.take(&format!("layer{i}.parts"), &[k, dim])?;
        let priors = r.take(&format!("layer{i}.priors"), &[k])?;
        net.set_dictionary(i, PartsDictionary::from_raw(dim, parts, priors, spec.group()?)?)?;
    }
    let task = match manifest.classifier.clone() {
        None => None,
        Some(c) => {
            let shape_of = |name: &str| {
                manifest
                    .tensors
                    .iter()
                    .find(|t| t.name == name)
                    .map(|t| t.shape.clone())
                    .ok_or_else(|| Error::Format(format!("missing tensor {name}")))
            };
            let models = match c.model {
                TaskManifest::Mixture {
                    classes,
                    components,
                    eps,
                } => {
                    let dim = shape_of("class0.mu")?.get(1).copied().unwrap_or(0);
                    let ms = (0..classes)
                        .map(|y| {
                            let pi = r.take(&format!("class{y}.pi"), &[components])?;
                            let mu = r.take(&format!("class{y}.mu"), &[components, dim])?;
                            BernoulliMixture::new(pi, mu, dim, eps[y])
                        })
                        .collect::<Result<Vec<_>>>()?;
                    TaskModels::Mixture(ms)
                }
                TaskManifest::RotMix {
                    classes,
                    components,
                    group,
                    eps,
                } => {
                    let k = components * group.order();
                    let dim = shape_of("class0.mu")?.get(1).copied().unwrap_or(0);
                    let ms = (0..classes)
                        .map(|y| {
                            let pi = r.take(&format!("class{y}.pi"), &[k])?;
                            let mu = r.take(&format!("class{y}.mu"), &[k, dim])?;
                            PermutationMixture::new(group, components, dim, pi, mu, eps[y])
                        })
                        .collect::<Result<Vec<_>>>()?;
                    TaskModels::RotMix(ms)
                }
                TaskManifest::Svm { classes, dim, lambda } => TaskModels::Svm(LinearSvm {
                    dim,
                    lambda,
                    weights: r.take("svm.weights", &[classes, dim + 1])?,
                }),
            };
            let classes = match &models {
                TaskModels::Mixture(m) => m.len(),
                TaskModels::RotMix(m) => m.len(),
                TaskModels::Svm(s) => s.classes(),
            };
            let standardization = if c.standardized {
                let flat = r.take("standardization", &[classes, 2])?;
                Some(
                    flat.chunks_exact(2)
                        .map(|p| ScoreStats { mean: p[0], std: p[1] })
                        .collect(),
                )
            } else {
                None
            };
            Some(TaskLayer {
                spec: c.spec,
                options: c.options,
                model: ClassModel {
                    models,
                    standardization,
                },
            })
        }
    };
    if r.next != manifest.tensors.len() || !r.bytes.is_empty() {
        return Err(Error::Format("trailing tensors or bytes".into()));
    }
    Ok(Model { network: net, task })
}

pub fn save_model(path: &Path, model: &Model) -> Result<()> {
    fs::write(path, to_bytes(model)?)?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<Model> {
    if !path.exists() {
        return Err(Error::MissingInput(path.to_path_buf()));
    }
    from_bytes(&fs::read(path)?, &path.display().to_string())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classifier::{fit_class_mixtures, fit_linear_svm, fit_rotmix_complete, SvmOptions};
    use crate::map::{BinaryRows, CompleteBatch};
    use crate::mixture::EmOptions;
    use crate::network::LayerSpec;
    use crate::permem::PemOptions;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_dict(rng: &mut ChaCha8Rng, k: usize, dim: usize, spec: GroupSpec) -> PartsDictionary {
        let parts = (0..k * dim).map(|_| rng.random_range(0.01..0.99)).collect();
        let mut priors: Vec<f64> = (0..k).map(|_| rng.random::<f64>()).collect();
        let s: f64 = priors.iter().sum();
        priors.iter_mut().for_each(|p| *p /= s);
        PartsDictionary::from_raw(dim, parts, priors, spec).unwrap()
    }

    fn random_rows(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> BinaryRows {
        let rows: Vec<Vec<u8>> = (0..n)
            .map(|_| (0..dim).map(|_| rng.random_range(0..2)).collect())
            .collect();
        BinaryRows::from_dense(dim, &rows).unwrap()
    }

    fn plain_model(rng: &mut ChaCha8Rng) -> Model {
        let mut net = Network::new(vec![LayerSpec::edges(), LayerSpec::mixture(3, 5)]).unwrap();
        net.set_dictionary(1, random_dict(rng, 5, 3 * 3 * 8, GroupSpec::trivial()))
            .unwrap();
        net.provenance = Provenance {
            seed: 7,
            preset: "custom".into(),
            dataset: "unit".into(),
        };
        Model {
            network: net,
            task: None,
        }
    }

    fn assert_round_trip(model: &Model) {
        let bytes = to_bytes(model).unwrap();
        let back = from_bytes(&bytes, "memory").unwrap();
        assert_eq!(&back, model);
        assert_eq!(to_bytes(&back).unwrap(), bytes);
    }

    #[test]
    fn network_round_trips_bit_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let model = plain_model(&mut rng);
        let bytes = to_bytes(&model).unwrap();
        assert_eq!(&bytes[..8], MAGIC);
        assert_round_trip(&model);

        let mut oriented = Network::new(vec![LayerSpec::edges(), LayerSpec::rotmix(3, 2, 4)]).unwrap();
        oriented
            .set_dictionary(1, random_dict(&mut rng, 8, 3 * 3 * 8, GroupSpec::new(4, 1).unwrap()))
            .unwrap();
        assert_round_trip(&Model {
            network: oriented,
            task: None,
        });
    }

    #[test]
    fn task_layers_round_trip_bit_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let base = plain_model(&mut rng);
        let dim = 12;
        let data: Vec<BinaryRows> = (0..3).map(|_| random_rows(&mut rng, 10, dim)).collect();
        let em = EmOptions {
            max_iters: 4,
            ..EmOptions::default()
        };

        let mut mix = fit_class_mixtures(&data, 2, &em).unwrap();
        mix.standardization = Some(vec![
            ScoreStats {
                mean: -1.5,
                std: 0.1 + 0.2
            };
            3
        ]);
        assert_round_trip(&Model {
            task: Some(TaskLayer {
                spec: TaskSpec::Mixture { components: 2 },
                options: PredictOptions::default(),
                model: mix,
            }),
            ..base.clone()
        });

        let spec = GroupSpec::new(4, 1).unwrap();
        let batches: Vec<CompleteBatch> = (0..2)
            .map(|_| CompleteBatch::from_rows(4, random_rows(&mut rng, 24, dim)).unwrap())
            .collect();
        let rot = fit_rotmix_complete(&batches, &spec, 1, &PemOptions::new(em)).unwrap();
        assert_round_trip(&Model {
            task: Some(TaskLayer {
                spec: TaskSpec::RotMix {
                    components: 1,
                    rotations: 4,
                },
                options: PredictOptions::default(),
                model: rot,
            }),
            ..base.clone()
        });

        let feats = random_rows(&mut rng, 30, dim);
        let labels: Vec<usize> = (0..30).map(|i| i % 3).collect();
        let svm = fit_linear_svm(
            &feats,
            &labels,
            3,
            &SvmOptions {
                lambda: 1e-3,
                epochs: 2,
                seed: 0,
            },
        )
        .unwrap();
        assert_round_trip(&Model {
            task: Some(TaskLayer {
                spec: TaskSpec::Svm {
                    lambdas: vec![1e-3],
                    epochs: 2,
                },
                options: PredictOptions::default(),
                model: svm,
            }),
            ..base
        });
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let bytes = to_bytes(&plain_model(&mut rng)).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(from_bytes(&bad, "x"), Err(Error::BadMagic { .. })));
        assert!(matches!(
            from_bytes(&bytes[..bytes.len() - 8], "x"),
            Err(Error::Truncated(_))
        ));
        assert!(matches!(from_bytes(&bytes[..10], "x"), Err(Error::Truncated(_))));
        let mut longer = bytes.clone();
        longer.extend_from_slice(&[0; 8]);
        assert!(matches!(from_bytes(&longer, "x"), Err(Error::Format(_))));
        assert!(matches!(
            load_model(Path::new("/nonexistent/m.pmx")),
            Err(Error::MissingInput(_))
        ));
    }

    #[test]
    fn unfitted_networks_cannot_be_saved() {
        let net = Network::new(vec![LayerSpec::edges(), LayerSpec::mixture(3, 5)]).unwrap();
        assert!(matches!(
            to_bytes(&Model {
                network: net,
                task: None
            }),
            Err(Error::Unfitted(1))
        ));
    }

    #[test]
    fn files_on_disk_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let model = plain_model(&mut rng);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.pmx");
        save_model(&path, &model).unwrap();
        assert_eq!(load_model(&path).unwrap(), model);
    }
}
