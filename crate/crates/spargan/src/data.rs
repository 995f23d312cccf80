//! Deterministic synthetic multimodal world: per-class caption-embedding
//! prototypes plus a hidden nonlinear renderer from captions to images, and
//! the base/novel, train/test, n-shot splits drawn from it.
//!
//! Class generation uses one counter-based substream per class id, so the
//! dataset is a pure function of `(seed, config)` regardless of generation
//! order.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeding::{self, mix, substream};
use crate::tensor::{matmul_acc, Tensor};

fn d_num_base() -> usize {
    40
}
fn d_num_novel() -> usize {
    10
}
fn d_caption_dim() -> usize {
    16
}
fn d_image_dim() -> usize {
    64
}
fn d_captions_per_image() -> usize {
    10
}
fn d_caption_noise() -> f64 {
    0.3
}
fn d_image_noise() -> f64 {
    0.05
}
fn d_samples_per_base() -> usize {
    30
}
fn d_samples_per_novel_train() -> usize {
    20
}
fn d_samples_per_novel_test() -> usize {
    20
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldConfig {
    pub seed: u64,
    #[serde(default = "d_num_base")]
    pub num_base_classes: usize,
    #[serde(default = "d_num_novel")]
    pub num_novel_classes: usize,
    #[serde(default = "d_caption_dim")]
    pub caption_dim: usize,
    #[serde(default = "d_image_dim")]
    pub image_dim: usize,
    #[serde(default = "d_captions_per_image")]
    pub captions_per_image: usize,
    #[serde(default = "d_caption_noise")]
    pub caption_noise: f64,
    #[serde(default = "d_image_noise")]
    pub image_noise: f64,
    #[serde(default = "d_samples_per_base")]
    pub samples_per_base_class: usize,
    #[serde(default = "d_samples_per_novel_train")]
    pub samples_per_novel_train: usize,
    #[serde(default = "d_samples_per_novel_test")]
    pub samples_per_novel_test: usize,
}

impl WorldConfig {
    /// All defaults with the given seed.
    pub fn with_seed(seed: u64) -> Self {
        WorldConfig {
            seed,
            num_base_classes: d_num_base(),
            num_novel_classes: d_num_novel(),
            caption_dim: d_caption_dim(),
            image_dim: d_image_dim(),
            captions_per_image: d_captions_per_image(),
            caption_noise: d_caption_noise(),
            image_noise: d_image_noise(),
            samples_per_base_class: d_samples_per_base(),
            samples_per_novel_train: d_samples_per_novel_train(),
            samples_per_novel_test: d_samples_per_novel_test(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive: [(&str, usize); 8] = [
            ("num_base_classes", self.num_base_classes),
            ("num_novel_classes", self.num_novel_classes),
            ("caption_dim", self.caption_dim),
            ("image_dim", self.image_dim),
            ("captions_per_image", self.captions_per_image),
            ("samples_per_base_class", self.samples_per_base_class),
            ("samples_per_novel_train", self.samples_per_novel_train),
            ("samples_per_novel_test", self.samples_per_novel_test),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::InvalidConfig {
                    field: field.into(),
                    reason: "must be positive".into(),
                });
            }
        }
        if self.num_novel_classes < 2 {
            return Err(Error::InvalidConfig {
                field: "num_novel_classes".into(),
                reason: "need at least 2 novel classes".into(),
            });
        }
        for (field, v) in [
            ("caption_noise", self.caption_noise),
            ("image_noise", self.image_noise),
        ] {
            if !(v >= 0.0) {
                return Err(Error::InvalidConfig {
                    field: field.into(),
                    reason: format!("noise scale must be >= 0, got {v}"),
                });
            }
        }
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        self.num_base_classes + self.num_novel_classes
    }

    /// Base class ids: `[0, num_base)`.
    pub fn base_class_ids(&self) -> std::ops::Range<usize> {
        0..self.num_base_classes
    }

    /// Novel class ids: `[num_base, num_base + num_novel)`.
    pub fn novel_class_ids(&self) -> std::ops::Range<usize> {
        self.num_base_classes..self.num_classes()
    }

    pub fn is_novel(&self, label: usize) -> bool {
        label >= self.num_base_classes && label < self.num_classes()
    }
}

/// One data point: an image vector, its caption embeddings and a class label.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub id: usize,
    pub label: usize,
    pub image: Vec<f64>,
    pub captions: Vec<Vec<f64>>,
}

/// The hidden ground truth: class prototypes and a fixed random 2-layer tanh
/// renderer from caption space to image space.
#[derive(Clone, Debug)]
pub struct World {
    pub config: WorldConfig,
    prototypes: Vec<Vec<f64>>,
    render_w1: Tensor,
    render_w2: Tensor,
}

fn draw_normal(rng: &mut ChaCha8Rng, n: usize, sd: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z * sd
        })
        .collect()
}

/// Build the world deterministically from its config.
pub fn make_world(config: &WorldConfig) -> Result<World> {
    config.validate()?;
    let mut prototypes = Vec::with_capacity(config.num_classes());
    for class in 0..config.num_classes() {
        let mut rng = substream(config.seed, seeding::SALT_PROTOTYPES, class as u64);
        prototypes.push(draw_normal(&mut rng, config.caption_dim, 1.0));
    }
    let hidden = 2 * config.image_dim;
    let mut rng = substream(config.seed, seeding::SALT_RENDERER, 0);
    let w1 = draw_normal(
        &mut rng,
        config.caption_dim * hidden,
        1.0 / (config.caption_dim as f64).sqrt(),
    );
    let w2 = draw_normal(
        &mut rng,
        hidden * config.image_dim,
        1.0 / (hidden as f64).sqrt(),
    );
    Ok(World {
        config: config.clone(),
        prototypes,
        render_w1: Tensor::from_values(&[config.caption_dim, hidden], w1)?,
        render_w2: Tensor::from_values(&[hidden, config.image_dim], w2)?,
    })
}

impl World {
    pub fn prototype(&self, class: usize) -> &[f64] {
        &self.prototypes[class]
    }

    pub fn prototypes(&self) -> &[Vec<f64>] {
        &self.prototypes
    }

    /// The hidden caption-to-image map: tanh of two linear layers, so the
    /// output always lies in (-1, 1)^image_dim.
    pub fn render(&self, caption: &[f64]) -> Vec<f64> {
        let hidden = 2 * self.config.image_dim;
        let mut h = vec![0.0; hidden];
        matmul_acc(caption, self.render_w1.values(), 1, self.config.caption_dim, hidden, &mut h);
        for v in &mut h {
            *v = v.tanh();
        }
        let mut out = vec![0.0; self.config.image_dim];
        matmul_acc(&h, self.render_w2.values(), 1, hidden, self.config.image_dim, &mut out);
        for v in &mut out {
            *v = v.tanh();
        }
        out
    }

    /// Draw one sample of `class` from the given stream. Caption k is
    /// `prototype + caption_noise * eps_k`; the image is the render of the
    /// first caption plus image noise, clamped to [-1, 1].
    pub fn draw_sample(&self, class: usize, rng: &mut ChaCha8Rng) -> Sample {
        let cfg = &self.config;
        let proto = &self.prototypes[class];
        let captions: Vec<Vec<f64>> = (0..cfg.captions_per_image)
            .map(|_| {
                let eps = draw_normal(rng, cfg.caption_dim, cfg.caption_noise);
                proto.iter().zip(&eps).map(|(p, e)| p + e).collect()
            })
            .collect();
        let mut image = self.render(&captions[0]);
        let eps = draw_normal(rng, cfg.image_dim, cfg.image_noise);
        for (x, e) in image.iter_mut().zip(&eps) {
            *x = (*x + e).clamp(-1.0, 1.0);
        }
        Sample {
            id: 0,
            label: class,
            image,
            captions,
        }
    }

    /// Fresh samples of a class under a caller-chosen seed. The stream is
    /// derived from `(world seed, seed)`, so these never alias the dataset's
    /// own draws; useful for held-out evaluation pools.
    pub fn draw_samples(&self, class: usize, count: usize, seed: u64) -> Vec<Sample> {
        let mut rng = substream(mix(&[self.config.seed, seed]), seeding::SALT_SAMPLES, class as u64);
        (0..count).map(|_| self.draw_sample(class, &mut rng)).collect()
    }
}

/// The dataset splits. Base classes contribute training data only; test data
/// comes from novel classes, disjoint from the novel training pool.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub config: WorldConfig,
    pub train_base: Vec<Sample>,
    pub train_novel: Vec<Sample>,
    pub test: Vec<Sample>,
    /// Per-class cap applied by `nshot_view`; `None` for the full split.
    pub n_shot: Option<usize>,
}

impl DatasetSplit {
    pub fn all_samples(&self) -> impl Iterator<Item = &Sample> {
        self.train_base
            .iter()
            .chain(self.train_novel.iter())
            .chain(self.test.iter())
    }

    pub fn novel_train_of(&self, class: usize) -> Vec<&Sample> {
        self.train_novel.iter().filter(|s| s.label == class).collect()
    }
}

/// Sample the full dataset from a world. Counts per split follow the config;
/// train and test sample ids are disjoint by construction.
pub fn sample_dataset(world: &World) -> DatasetSplit {
    let cfg = &world.config;
    let mut train_base = Vec::new();
    let mut train_novel = Vec::new();
    let mut test = Vec::new();

    for class in cfg.base_class_ids() {
        let mut rng = substream(cfg.seed, seeding::SALT_SAMPLES, class as u64);
        for _ in 0..cfg.samples_per_base_class {
            train_base.push(world.draw_sample(class, &mut rng));
        }
    }
    for class in cfg.novel_class_ids() {
        let mut rng = substream(cfg.seed, seeding::SALT_SAMPLES, class as u64);
        for _ in 0..cfg.samples_per_novel_train {
            train_novel.push(world.draw_sample(class, &mut rng));
        }
        for _ in 0..cfg.samples_per_novel_test {
            test.push(world.draw_sample(class, &mut rng));
        }
    }

    let mut next_id = 0;
    for sample in train_base
        .iter_mut()
        .chain(train_novel.iter_mut())
        .chain(test.iter_mut())
    {
        sample.id = next_id;
        next_id += 1;
    }

    DatasetSplit {
        config: cfg.clone(),
        train_base,
        train_novel,
        test,
        n_shot: None,
    }
}

/// Restrict the novel training pool to exactly `n` samples per class, chosen
/// deterministically from `seed`. Base and test splits are untouched.
pub fn nshot_view(split: &DatasetSplit, n: usize, seed: u64) -> Result<DatasetSplit> {
    let cfg = &split.config;
    if n == 0 || n > cfg.samples_per_novel_train {
        return Err(Error::NShotTooLarge {
            n,
            available: cfg.samples_per_novel_train,
        });
    }
    let mut train_novel = Vec::with_capacity(n * cfg.num_novel_classes);
    for class in cfg.novel_class_ids() {
        let of_class: Vec<&Sample> = split.train_novel.iter().filter(|s| s.label == class).collect();
        if of_class.len() < n {
            return Err(Error::NShotTooLarge {
                n,
                available: of_class.len(),
            });
        }
        let mut order: Vec<usize> = (0..of_class.len()).collect();
        let mut rng = substream(seed, seeding::SALT_NSHOT, class as u64);
        for i in (1..order.len()).rev() {
            let j = rng.random_range(0..=i);
            order.swap(i, j);
        }
        for &idx in order.iter().take(n) {
            train_novel.push(of_class[idx].clone());
        }
    }
    Ok(DatasetSplit {
        config: cfg.clone(),
        train_base: split.train_base.clone(),
        train_novel,
        test: split.test.clone(),
        n_shot: Some(n),
    })
}

/// On-disk dataset document. Samples are stored in canonical order (base
/// train block, novel train block, novel test block, ascending class id
/// within each), which is how `import` reconstructs the split.
#[derive(Serialize, Deserialize)]
pub struct DatasetFile {
    pub config: WorldConfig,
    pub classes: Vec<ClassInfo>,
    pub samples: Vec<Sample>,
}

#[derive(Serialize, Deserialize)]
pub struct ClassInfo {
    pub id: usize,
    pub prototype: Vec<f64>,
}

pub fn export_dataset(world: &World, split: &DatasetSplit, path: &Path) -> Result<()> {
    let file = DatasetFile {
        config: split.config.clone(),
        classes: world
            .prototypes()
            .iter()
            .enumerate()
            .map(|(id, prototype)| ClassInfo {
                id,
                prototype: prototype.clone(),
            })
            .collect(),
        samples: split.all_samples().cloned().collect(),
    };
    let json = serde_json::to_string(&file).expect("dataset serialization cannot fail");
    fs::write(path, json).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn import_dataset(path: &Path) -> Result<DatasetSplit> {
    let text = fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let file: DatasetFile = serde_json::from_str(&text).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })?;
    let cfg = file.config;
    cfg.validate()?;
    let n_base = cfg.num_base_classes * cfg.samples_per_base_class;
    let n_novel_train = cfg.num_novel_classes * cfg.samples_per_novel_train;
    let n_total = n_base + n_novel_train + cfg.num_novel_classes * cfg.samples_per_novel_test;
    if file.samples.len() != n_total {
        return Err(Error::InvalidConfig {
            field: "samples".into(),
            reason: format!("expected {n_total} samples, file has {}", file.samples.len()),
        });
    }
    let mut samples = file.samples;
    let test = samples.split_off(n_base + n_novel_train);
    let train_novel = samples.split_off(n_base);
    Ok(DatasetSplit {
        config: cfg,
        train_base: samples,
        train_novel,
        test,
        n_shot: None,
    })
}
