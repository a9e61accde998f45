//! Two-modality toy dataset: synthetic generation, seen/unseen splits,
//! triplet mining and the semantic embedding text format.
//!
//! Every class owns a low-dimensional latent code. The code is pushed
//! through one shared linear template to produce the mid-level feature grid
//! of both modalities; images then receive dense background clutter and
//! smooth noise while sketches are noised more heavily and binarized into
//! sparse strokes. Semantic prototypes are a separate linear view of the same
//! codes, and the codes themselves are grouped into super-clusters so the
//! class neighbourhood structure is not trivial.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, TAG_GENERATE, TAG_MINE, TAG_SPLIT};
use crate::tensor::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Modality {
    Image,
    Sketch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub modality: Modality,
    pub class_id: usize,
    /// `G x G x C_mid`, channel-fastest.
    pub feature_map: Vec<f64>,
    pub flat_features: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassSplit {
    pub seen_classes: Vec<usize>,
    pub unseen_classes: Vec<usize>,
}

impl ClassSplit {
    pub fn is_seen(&self, class_id: usize) -> bool {
        self.seen_classes.binary_search(&class_id).is_ok()
    }

    pub fn is_unseen(&self, class_id: usize) -> bool {
        self.unseen_classes.binary_search(&class_id).is_ok()
    }

    /// Row of `class_id` in seen-class indexed tensors (classifier logits,
    /// semantic projection rows).
    pub fn seen_index(&self, class_id: usize) -> Option<usize> {
        self.seen_classes.binary_search(&class_id).ok()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SemanticPrototypes {
    pub class_names: Vec<String>,
    pub vectors: Matrix,
}

impl SemanticPrototypes {
    pub fn new(class_names: Vec<String>, vectors: Matrix) -> Result<Self> {
        if class_names.len() != vectors.rows {
            return Err(Error::Shape(format!(
                "{} class names for {} vectors",
                class_names.len(),
                vectors.rows
            )));
        }
        for (i, name) in class_names.iter().enumerate() {
            if vectors.row(i).iter().all(|v| *v == 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "prototype `{name}` is the zero vector"
                )));
            }
        }
        Ok(Self {
            class_names,
            vectors,
        })
    }

    pub fn dim(&self) -> usize {
        self.vectors.cols
    }

    /// Rows for `class_ids`, in the given order.
    pub fn select(&self, class_ids: &[usize]) -> Matrix {
        let mut out = Matrix::zeros(class_ids.len(), self.dim());
        for (r, &c) in class_ids.iter().enumerate() {
            out.row_mut(r).copy_from_slice(self.vectors.row(c));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetBundle {
    pub images: Vec<SampleRecord>,
    pub sketches: Vec<SampleRecord>,
    pub split: ClassSplit,
    pub prototypes: SemanticPrototypes,
    pub grid: usize,
    pub channels: usize,
}

impl DatasetBundle {
    pub fn num_classes(&self) -> usize {
        self.prototypes.class_names.len()
    }

    pub fn images_of(&self, class_id: usize) -> Vec<usize> {
        indices_of(&self.images, class_id)
    }

    pub fn sketches_of(&self, class_id: usize) -> Vec<usize> {
        indices_of(&self.sketches, class_id)
    }
}

fn indices_of(samples: &[SampleRecord], class_id: usize) -> Vec<usize> {
    samples
        .iter()
        .enumerate()
        .filter(|(_, s)| s.class_id == class_id)
        .map(|(i, _)| i)
        .collect()
}

/// Anchor is a sketch index, positive and negative are image indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Triplet {
    pub anchor: usize,
    pub positive: usize,
    pub negative: usize,
    pub positive_prototype: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorSpec {
    pub num_classes: usize,
    pub images_per_class: usize,
    pub sketches_per_class: usize,
    pub grid: usize,
    pub channels: usize,
    pub raw_dim: usize,
    pub semantic_dim: usize,
    pub class_latent_dim: usize,
    pub super_clusters: usize,
    pub image_noise: f64,
    pub sketch_noise: f64,
    pub clutter: f64,
    pub sketch_threshold: f64,
    pub semantic_noise: f64,
    pub unseen_fraction: f64,
    pub seed: u64,
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        Self {
            num_classes: 8,
            images_per_class: 20,
            sketches_per_class: 20,
            grid: 7,
            channels: 8,
            raw_dim: 32,
            semantic_dim: 16,
            class_latent_dim: 6,
            super_clusters: 3,
            image_noise: 0.3,
            sketch_noise: 0.6,
            clutter: 1.0,
            sketch_threshold: 1.0,
            semantic_noise: 0.1,
            unseen_fraction: 0.25,
            seed: 0,
        }
    }
}

impl GeneratorSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidSpec(m.to_string()));
        if self.num_classes < 4 {
            return bad("need at least 4 classes");
        }
        if self.images_per_class < 2 || self.sketches_per_class < 2 {
            return bad("need at least 2 samples per class per modality");
        }
        if self.grid == 0 || self.channels == 0 || self.raw_dim == 0 {
            return bad("grid, channels and raw_dim must be positive");
        }
        if self.semantic_dim == 0 || self.class_latent_dim == 0 || self.super_clusters == 0 {
            return bad("semantic_dim, class_latent_dim and super_clusters must be positive");
        }
        let noises = [
            self.image_noise,
            self.sketch_noise,
            self.clutter,
            self.semantic_noise,
        ];
        if noises.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return bad("noise scales must be finite and non-negative");
        }
        if !(self.unseen_fraction > 0.0 && self.unseen_fraction < 1.0) {
            return bad("unseen_fraction must lie in (0, 1)");
        }
        let unseen = unseen_count(self.num_classes, self.unseen_fraction);
        if unseen == 0 || self.num_classes - unseen < 2 {
            return bad("split leaves no unseen classes or fewer than 2 seen classes");
        }
        Ok(())
    }

    pub fn map_len(&self) -> usize {
        self.grid * self.grid * self.channels
    }
}

fn unseen_count(k: usize, fraction: f64) -> usize {
    (k as f64 * fraction).round() as usize
}

fn gaussian_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

/// White noise blurred by a 3x3 box filter per channel (edges clamp to the
/// in-bounds neighbours), rescaled back to roughly unit variance.
fn smooth_field(rng: &mut ChaCha8Rng, grid: usize, channels: usize) -> Vec<f64> {
    let white = gaussian_vec(rng, grid * grid * channels);
    let mut out = vec![0.0; white.len()];
    for x in 0..grid {
        for y in 0..grid {
            for c in 0..channels {
                let mut acc = 0.0;
                let mut n = 0.0f64;
                for dx in -1i64..=1 {
                    for dy in -1i64..=1 {
                        let (nx, ny) = (x as i64 + dx, y as i64 + dy);
                        if nx < 0 || ny < 0 || nx >= grid as i64 || ny >= grid as i64 {
                            continue;
                        }
                        acc += white[(nx as usize * grid + ny as usize) * channels + c];
                        n += 1.0;
                    }
                }
                out[(x * grid + y) * channels + c] = acc / n.sqrt();
            }
        }
    }
    out
}

fn mat_vec(m: &[f64], cols: usize, v: &[f64]) -> Vec<f64> {
    m.chunks(cols)
        .map(|row| row.iter().zip(v).map(|(a, b)| a * b).sum())
        .collect()
}

pub fn generate_synthetic_dataset(spec: &GeneratorSpec) -> Result<DatasetBundle> {
    spec.validate()?;
    let mut rng = rng::stream(spec.seed, &[TAG_GENERATE]);
    let dz = spec.class_latent_dim;
    let map_len = spec.map_len();

    let centers: Vec<Vec<f64>> = (0..spec.super_clusters)
        .map(|_| gaussian_vec(&mut rng, dz).into_iter().map(|v| 2.0 * v).collect())
        .collect();
    let class_codes: Vec<Vec<f64>> = (0..spec.num_classes)
        .map(|k| {
            let center = &centers[k % spec.super_clusters];
            gaussian_vec(&mut rng, dz)
                .iter()
                .zip(center)
                .map(|(n, c)| c + 0.7 * n)
                .collect()
        })
        .collect();

    let inv_dz = 1.0 / (dz as f64).sqrt();
    let semantic_mix: Vec<f64> = gaussian_vec(&mut rng, spec.semantic_dim * dz)
        .into_iter()
        .map(|v| v * inv_dz)
        .collect();
    let template: Vec<f64> = gaussian_vec(&mut rng, map_len * dz)
        .into_iter()
        .map(|v| v * inv_dz)
        .collect();
    let inv_map = 1.0 / (map_len as f64).sqrt();
    let raw_projection: Vec<f64> = gaussian_vec(&mut rng, spec.raw_dim * map_len)
        .into_iter()
        .map(|v| v * inv_map)
        .collect();

    let mut proto_rows = Vec::with_capacity(spec.num_classes);
    for code in &class_codes {
        let noise = gaussian_vec(&mut rng, spec.semantic_dim);
        let row: Vec<f64> = mat_vec(&semantic_mix, dz, code)
            .into_iter()
            .zip(noise)
            .map(|(v, n)| v + spec.semantic_noise * n)
            .collect();
        proto_rows.push(row);
    }
    let class_names = (0..spec.num_classes)
        .map(|k| format!("class_{k:02}"))
        .collect();
    let prototypes = SemanticPrototypes::new(class_names, Matrix::from_rows(&proto_rows)?)?;

    let bases: Vec<Vec<f64>> = class_codes.iter().map(|z| mat_vec(&template, dz, z)).collect();

    let make = |modality: Modality, class_id: usize, idx: usize| -> SampleRecord {
        let tag = match modality {
            Modality::Image => 0,
            Modality::Sketch => 1,
        };
        let mut srng = rng::stream(spec.seed, &[TAG_GENERATE, tag, class_id as u64, idx as u64]);
        let base = &bases[class_id];
        let feature_map: Vec<f64> = match modality {
            Modality::Image => {
                let noise = smooth_field(&mut srng, spec.grid, spec.channels);
                let clutter = smooth_field(&mut srng, spec.grid, spec.channels);
                base.iter()
                    .zip(noise.iter().zip(&clutter))
                    .map(|(b, (n, c))| b + spec.image_noise * n + spec.clutter * (0.5 + c))
                    .collect()
            }
            Modality::Sketch => {
                let noise = gaussian_vec(&mut srng, map_len);
                base.iter()
                    .zip(&noise)
                    .map(|(b, n)| {
                        if b + spec.sketch_noise * n > spec.sketch_threshold {
                            1.0
                        } else {
                            0.0
                        }
                    })
                    .collect()
            }
        };
        let flat_features = mat_vec(&raw_projection, map_len, &feature_map);
        SampleRecord {
            modality,
            class_id,
            feature_map,
            flat_features,
        }
    };

    let mut images = Vec::new();
    let mut sketches = Vec::new();
    for k in 0..spec.num_classes {
        for i in 0..spec.images_per_class {
            images.push(make(Modality::Image, k, i));
        }
        for i in 0..spec.sketches_per_class {
            sketches.push(make(Modality::Sketch, k, i));
        }
    }

    let bundle = DatasetBundle {
        images,
        sketches,
        split: ClassSplit {
            seen_classes: (0..spec.num_classes).collect(),
            unseen_classes: Vec::new(),
        },
        prototypes,
        grid: spec.grid,
        channels: spec.channels,
    };
    split_seen_unseen(bundle, spec.unseen_fraction, spec.seed)
}

pub fn split_seen_unseen(
    mut bundle: DatasetBundle,
    unseen_fraction: f64,
    seed: u64,
) -> Result<DatasetBundle> {
    if !(unseen_fraction > 0.0 && unseen_fraction < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "unseen_fraction {unseen_fraction} outside (0, 1)"
        )));
    }
    let k = bundle.num_classes();
    let unseen = unseen_count(k, unseen_fraction);
    if unseen == 0 || k - unseen < 2 {
        return Err(Error::InvalidArgument(format!(
            "fraction {unseen_fraction} of {k} classes gives {unseen} unseen"
        )));
    }
    let mut order: Vec<usize> = (0..k).collect();
    order.shuffle(&mut rng::stream(seed, &[TAG_SPLIT]));
    let mut unseen_classes = order[..unseen].to_vec();
    let mut seen_classes = order[unseen..].to_vec();
    unseen_classes.sort_unstable();
    seen_classes.sort_unstable();
    bundle.split = ClassSplit {
        seen_classes,
        unseen_classes,
    };
    Ok(bundle)
}

pub fn mine_triplets(bundle: &DatasetBundle, count: usize, seed: u64) -> Result<Vec<Triplet>> {
    if count == 0 {
        return Err(Error::InvalidArgument("triplet count must be positive".into()));
    }
    let split = &bundle.split;
    if split.seen_classes.len() < 2 {
        return Err(Error::InvalidArgument("need at least 2 seen classes".into()));
    }
    let anchors: Vec<usize> = bundle
        .sketches
        .iter()
        .enumerate()
        .filter(|(_, s)| split.is_seen(s.class_id))
        .map(|(i, _)| i)
        .collect();
    let seen_images: Vec<usize> = bundle
        .images
        .iter()
        .enumerate()
        .filter(|(_, s)| split.is_seen(s.class_id))
        .map(|(i, _)| i)
        .collect();
    let by_class: Vec<Vec<usize>> = split
        .seen_classes
        .iter()
        .map(|&c| bundle.images_of(c))
        .collect();
    if anchors.is_empty() || by_class.iter().any(Vec::is_empty) {
        return Err(Error::InvalidArgument(
            "every seen class needs at least one sketch and one image".into(),
        ));
    }

    let mut rng = rng::stream(seed, &[TAG_MINE]);
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let anchor = anchors[rng.random_range(0..anchors.len())];
        let class_id = bundle.sketches[anchor].class_id;
        let row = split.seen_index(class_id).expect("anchor is seen");
        let pool = &by_class[row];
        let positive = pool[rng.random_range(0..pool.len())];
        let n_neg = seen_images.len() - pool.len();
        // Walk to the j-th seen image not in the anchor class.
        let j = rng.random_range(0..n_neg);
        let negative = seen_images
            .iter()
            .copied()
            .filter(|&i| bundle.images[i].class_id != class_id)
            .nth(j)
            .expect("negative pool is non-empty");
        out.push(Triplet {
            anchor,
            positive,
            negative,
            positive_prototype: class_id,
        });
    }
    Ok(out)
}

pub fn parse_semantic_embeddings(text: &str) -> Result<SemanticPrototypes> {
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or(Error::Parse {
        line: 1,
        message: "empty file".into(),
    })?;
    let mut head = header.split_whitespace();
    let parse_usize = |tok: Option<&str>, what: &str| -> Result<usize> {
        tok.and_then(|t| t.parse().ok()).ok_or(Error::Parse {
            line: 1,
            message: format!("header needs `<class_count> <dim>`, bad {what}"),
        })
    };
    let count = parse_usize(head.next(), "class count")?;
    let dim = parse_usize(head.next(), "dimension")?;
    if head.next().is_some() {
        return Err(Error::Parse {
            line: 1,
            message: "trailing tokens in header".into(),
        });
    }

    let mut names = Vec::with_capacity(count);
    let mut seen_names = HashSet::new();
    let mut values = Vec::with_capacity(count * dim);
    for (i, line) in lines {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let mut toks = line.split_whitespace();
        let name = toks.next().expect("non-empty line");
        if !seen_names.insert(name.to_string()) {
            return Err(Error::Parse {
                line: line_no,
                message: format!("duplicate class name `{name}`"),
            });
        }
        let row: Vec<f64> = toks
            .map(|t| {
                t.parse::<f64>().map_err(|_| Error::Parse {
                    line: line_no,
                    message: format!("non-numeric token `{t}`"),
                })
            })
            .collect::<Result<_>>()?;
        if row.len() != dim {
            return Err(Error::Parse {
                line: line_no,
                message: format!("expected {dim} values, found {}", row.len()),
            });
        }
        names.push(name.to_string());
        values.extend(row);
    }
    if names.len() != count {
        return Err(Error::Parse {
            line: 1,
            message: format!("header declares {count} classes, file has {}", names.len()),
        });
    }
    let vectors = Matrix {
        rows: count,
        cols: dim,
        data: values,
    };
    SemanticPrototypes::new(names, vectors)
}

pub fn format_semantic_embeddings(protos: &SemanticPrototypes) -> String {
    let mut out = format!("{} {}\n", protos.class_names.len(), protos.dim());
    for (i, name) in protos.class_names.iter().enumerate() {
        out.push_str(name);
        for v in protos.vectors.row(i) {
            write!(out, " {v}").expect("write to string");
        }
        out.push('\n');
    }
    out
}

pub fn load_semantic_embeddings(path: &Path) -> Result<SemanticPrototypes> {
    parse_semantic_embeddings(&std::fs::read_to_string(path)?)
}

pub fn save_semantic_embeddings(protos: &SemanticPrototypes, path: &Path) -> Result<()> {
    std::fs::write(path, format_semantic_embeddings(protos))?;
    Ok(())
}

pub fn concat_prototypes(
    a: &SemanticPrototypes,
    b: &SemanticPrototypes,
) -> Result<SemanticPrototypes> {
    if a.class_names != b.class_names {
        return Err(Error::InvalidArgument(
            "prototype sets name different classes".into(),
        ));
    }
    let rows: Vec<Vec<f64>> = (0..a.class_names.len())
        .map(|i| [a.vectors.row(i), b.vectors.row(i)].concat())
        .collect();
    SemanticPrototypes::new(a.class_names.clone(), Matrix::from_rows(&rows)?)
}
