//! Text-conditioned GAN with an auxiliary class head, and the representation
//! learning phase on base classes.
//!
//! The generator is a single-stage MLP from (caption, noise) to an image in
//! (-1, 1)^d. The discriminator runs a shared trunk over (image, caption) and
//! carries two heads: a sigmoid source head (real vs fake, matching-aware)
//! and a softmax class head. The two losses are optimized in alternation,
//! one Adam step each per batch.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{DatasetSplit, Sample};
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::optim::{adam_step, ParamSet};
use crate::seeding::{self, substream};
use crate::tensor::Tensor;

/// Slope of the leaky rectifier used in every hidden layer.
pub const LEAKY_SLOPE: f64 = 0.2;

fn d_epochs() -> usize {
    300
}
fn d_batch_size() -> usize {
    24
}
fn d_learning_rate() -> f64 {
    2e-4
}
fn d_lambda() -> f64 {
    1.0
}
fn d_hidden_dim() -> usize {
    128
}
fn d_feature_dim() -> usize {
    64
}
fn d_noise_dim() -> usize {
    8
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GanTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Weight of the real-image/mismatched-caption rejection term.
    pub lambda_mismatch: f64,
    /// Weight of the auxiliary classification term.
    pub lambda_class: f64,
    pub hidden_dim: usize,
    pub feature_dim: usize,
    pub noise_dim: usize,
}

impl Default for GanTrainConfig {
    fn default() -> Self {
        GanTrainConfig {
            epochs: d_epochs(),
            batch_size: d_batch_size(),
            learning_rate: d_learning_rate(),
            lambda_mismatch: d_lambda(),
            lambda_class: d_lambda(),
            hidden_dim: d_hidden_dim(),
            feature_dim: d_feature_dim(),
            noise_dim: d_noise_dim(),
        }
    }
}

impl GanTrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (field, v) in [
            ("gan.epochs", self.epochs),
            ("gan.batch_size", self.batch_size),
            ("gan.hidden_dim", self.hidden_dim),
            ("gan.feature_dim", self.feature_dim),
            ("gan.noise_dim", self.noise_dim),
        ] {
            if v == 0 {
                return Err(Error::InvalidConfig {
                    field: field.into(),
                    reason: "must be positive".into(),
                });
            }
        }
        if self.learning_rate <= 0.0 {
            return Err(Error::InvalidConfig {
                field: "gan.learning_rate".into(),
                reason: format!("must be positive, got {}", self.learning_rate),
            });
        }
        for (field, v) in [
            ("gan.lambda_mismatch", self.lambda_mismatch),
            ("gan.lambda_class", self.lambda_class),
        ] {
            if v < 0.0 {
                return Err(Error::InvalidConfig {
                    field: field.into(),
                    reason: format!("must be >= 0, got {v}"),
                });
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneratorDims {
    pub caption_dim: usize,
    pub noise_dim: usize,
    pub hidden_dim: usize,
    pub image_dim: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiscriminatorDims {
    pub image_dim: usize,
    pub caption_dim: usize,
    pub hidden_dim: usize,
    pub feature_dim: usize,
    pub num_classes: usize,
}

/// Generator parameters: MLP `[caption + noise -> h -> h -> image]` with a
/// tanh output layer.
#[derive(Clone, Debug, PartialEq)]
pub struct Generator {
    pub dims: GeneratorDims,
    pub params: ParamSet,
}

/// Discriminator parameters: trunk `[image + caption -> h -> h -> f]`, a
/// sigmoid source head and a linear class head of width `num_classes`.
/// `label_offset` maps global labels onto class-head indices (0 for base
/// models, `num_base` after adaptation to novel classes).
#[derive(Clone, Debug, PartialEq)]
pub struct Discriminator {
    pub dims: DiscriminatorDims,
    pub label_offset: usize,
    pub params: ParamSet,
}

fn init_weight(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let sd = 1.0 / (rows as f64).sqrt();
    let values = (0..rows * cols)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z * sd
        })
        .collect();
    Tensor::from_values(&[rows, cols], values).unwrap()
}

impl Generator {
    pub fn new(dims: GeneratorDims, rng: &mut ChaCha8Rng) -> Self {
        let input = dims.caption_dim + dims.noise_dim;
        let mut params = ParamSet::new();
        params.insert("w1", init_weight(rng, input, dims.hidden_dim));
        params.insert("b1", Tensor::zeros(&[dims.hidden_dim]));
        params.insert("w2", init_weight(rng, dims.hidden_dim, dims.hidden_dim));
        params.insert("b2", Tensor::zeros(&[dims.hidden_dim]));
        params.insert("w3", init_weight(rng, dims.hidden_dim, dims.image_dim));
        params.insert("b3", Tensor::zeros(&[dims.image_dim]));
        Generator { dims, params }
    }
}

impl Discriminator {
    pub fn new(dims: DiscriminatorDims, rng: &mut ChaCha8Rng) -> Self {
        let input = dims.image_dim + dims.caption_dim;
        let mut params = ParamSet::new();
        params.insert("t_w1", init_weight(rng, input, dims.hidden_dim));
        params.insert("t_b1", Tensor::zeros(&[dims.hidden_dim]));
        params.insert("t_w2", init_weight(rng, dims.hidden_dim, dims.hidden_dim));
        params.insert("t_b2", Tensor::zeros(&[dims.hidden_dim]));
        params.insert("t_w3", init_weight(rng, dims.hidden_dim, dims.feature_dim));
        params.insert("t_b3", Tensor::zeros(&[dims.feature_dim]));
        params.insert("src_w", init_weight(rng, dims.feature_dim, 1));
        params.insert("src_b", Tensor::zeros(&[1]));
        params.insert("cls_w", init_weight(rng, dims.feature_dim, dims.num_classes));
        params.insert("cls_b", Tensor::zeros(&[dims.num_classes]));
        Discriminator {
            dims,
            label_offset: 0,
            params,
        }
    }

    /// Map a global label onto this model's class-head index.
    pub fn head_label(&self, label: usize) -> Result<usize> {
        let classes = self.dims.num_classes;
        label
            .checked_sub(self.label_offset)
            .filter(|&l| l < classes)
            .ok_or(Error::LabelOutOfRange { label, classes })
    }
}

/// Build the generator forward pass on a graph from registered parameter
/// nodes. Returns the image node, shaped like the caption batch.
pub fn build_generator(
    graph: &mut Graph,
    nodes: &BTreeMap<String, NodeId>,
    captions: NodeId,
    noise: NodeId,
) -> Result<NodeId> {
    let x = graph.concat_cols(captions, noise)?;
    let h = graph.matmul(x, nodes["w1"])?;
    let h = graph.add_bias(h, nodes["b1"])?;
    let h = graph.leaky_relu(h, LEAKY_SLOPE);
    let h = graph.matmul(h, nodes["w2"])?;
    let h = graph.add_bias(h, nodes["b2"])?;
    let h = graph.leaky_relu(h, LEAKY_SLOPE);
    let h = graph.matmul(h, nodes["w3"])?;
    let h = graph.add_bias(h, nodes["b3"])?;
    Ok(graph.tanh(h))
}

pub struct DiscOutput {
    pub features: NodeId,
    /// Sigmoid source-head probability, `[batch, 1]`.
    pub source_prob: NodeId,
    /// Unnormalized class logits, `[batch, num_classes]`.
    pub class_logits: NodeId,
}

/// Build the discriminator forward pass on a graph from registered parameter
/// nodes.
pub fn build_discriminator(
    graph: &mut Graph,
    nodes: &BTreeMap<String, NodeId>,
    images: NodeId,
    captions: NodeId,
) -> Result<DiscOutput> {
    let x = graph.concat_cols(images, captions)?;
    let h = graph.matmul(x, nodes["t_w1"])?;
    let h = graph.add_bias(h, nodes["t_b1"])?;
    let h = graph.leaky_relu(h, LEAKY_SLOPE);
    let h = graph.matmul(h, nodes["t_w2"])?;
    let h = graph.add_bias(h, nodes["t_b2"])?;
    let h = graph.leaky_relu(h, LEAKY_SLOPE);
    let h = graph.matmul(h, nodes["t_w3"])?;
    let h = graph.add_bias(h, nodes["t_b3"])?;
    let features = graph.leaky_relu(h, LEAKY_SLOPE);
    let s = graph.matmul(features, nodes["src_w"])?;
    let s = graph.add_bias(s, nodes["src_b"])?;
    let source_prob = graph.sigmoid(s);
    let logits = graph.matmul(features, nodes["cls_w"])?;
    let class_logits = graph.add_bias(logits, nodes["cls_b"])?;
    Ok(DiscOutput {
        features,
        source_prob,
        class_logits,
    })
}

/// Run the generator on a caption batch. Deterministic in (captions, noise);
/// every output coordinate lies in (-1, 1).
pub fn generator_forward(gen: &Generator, captions: &Tensor, noise: &Tensor) -> Result<Tensor> {
    let mut graph = Graph::new();
    let c = graph.input("captions", captions.clone());
    let z = graph.input("noise", noise.clone());
    let nodes = gen.params.register(&mut graph, "g.", false);
    let image = build_generator(&mut graph, &nodes, c, z)?;
    Ok(graph.value(image).clone())
}

/// Run the discriminator on an (image, caption) batch. Returns the source
/// probabilities `[batch, 1]` and the raw class logits `[batch, classes]`.
pub fn discriminator_forward(
    disc: &Discriminator,
    images: &Tensor,
    captions: &Tensor,
) -> Result<(Tensor, Tensor)> {
    let mut graph = Graph::new();
    let i = graph.input("images", images.clone());
    let c = graph.input("captions", captions.clone());
    let nodes = disc.params.register(&mut graph, "d.", false);
    let out = build_discriminator(&mut graph, &nodes, i, c)?;
    Ok((
        graph.value(out.source_prob).clone(),
        graph.value(out.class_logits).clone(),
    ))
}

/// A caption batch with everything one alternating step needs: matching
/// captions, mismatched captions from other classes, and the noise draw.
#[derive(Clone, Debug)]
pub struct GanBatch {
    pub images: Tensor,
    pub captions: Tensor,
    pub mismatched: Tensor,
    pub noise: Tensor,
    pub labels: Vec<usize>,
}

impl GanBatch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Assemble a batch from `pool[idxs]`: one caption drawn per sample, one
/// mismatched caption from a different class, one noise vector per sample.
pub fn assemble_batch(
    pool: &[Sample],
    idxs: &[usize],
    noise_dim: usize,
    rng: &mut ChaCha8Rng,
) -> Result<GanBatch> {
    if idxs.is_empty() {
        return Err(Error::EmptyBatch("assemble_batch"));
    }
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, s) in pool.iter().enumerate() {
        by_class.entry(s.label).or_default().push(i);
    }
    if by_class.len() < 2 {
        return Err(Error::SingleClassPool);
    }
    let classes: Vec<usize> = by_class.keys().copied().collect();

    let mut images = Vec::new();
    let mut captions = Vec::new();
    let mut mismatched = Vec::new();
    let mut labels = Vec::with_capacity(idxs.len());
    for &idx in idxs {
        let sample = &pool[idx];
        images.push(sample.image.clone());
        let pick = rng.random_range(0..sample.captions.len());
        captions.push(sample.captions[pick].clone());
        // a caption of a random sample from a random other class
        let other_class = loop {
            let c = classes[rng.random_range(0..classes.len())];
            if c != sample.label {
                break c;
            }
        };
        let members = &by_class[&other_class];
        let other = &pool[members[rng.random_range(0..members.len())]];
        mismatched.push(other.captions[rng.random_range(0..other.captions.len())].clone());
        labels.push(sample.label);
    }
    let noise: Vec<f64> = (0..idxs.len() * noise_dim)
        .map(|_| StandardNormal.sample(rng))
        .collect();
    Ok(GanBatch {
        images: Tensor::from_rows(&images)?,
        captions: Tensor::from_rows(&captions)?,
        mismatched: Tensor::from_rows(&mismatched)?,
        noise: Tensor::from_values(&[idxs.len(), noise_dim], noise)?,
        labels,
    })
}

/// The discriminator objective on one batch:
/// `BCE(D_s(real, caption), 1) + BCE(D_s(fake, caption), 0)
///  + lambda_mm * BCE(D_s(real, mismatched), 0)
///  + lambda_c * CE(class head on real, labels)`.
/// Fake images are generated outside the loss graph, so the discriminator
/// step never touches generator parameters.
fn discriminator_loss_graph(
    disc: &Discriminator,
    fake_images: &Tensor,
    batch: &GanBatch,
    lambda_mismatch: f64,
    lambda_class: f64,
    trainable: bool,
) -> Result<(Graph, NodeId, NodeId)> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch("loss_discriminator"));
    }
    let head_labels: Vec<usize> = batch
        .labels
        .iter()
        .map(|&l| disc.head_label(l))
        .collect::<Result<_>>()?;

    let mut graph = Graph::new();
    let real = graph.input("images", batch.images.clone());
    let captions = graph.input("captions", batch.captions.clone());
    let mismatched = graph.input("mismatched", batch.mismatched.clone());
    let fake = graph.input("fake_images", fake_images.clone());
    let nodes = disc.params.register(&mut graph, "d.", trainable);

    let real_out = build_discriminator(&mut graph, &nodes, real, captions)?;
    let fake_out = build_discriminator(&mut graph, &nodes, fake, captions)?;
    let mis_out = build_discriminator(&mut graph, &nodes, real, mismatched)?;

    let real_term = graph.bce_uniform(real_out.source_prob, 1.0)?;
    let fake_term = graph.bce_uniform(fake_out.source_prob, 0.0)?;
    let mis_term = graph.bce_uniform(mis_out.source_prob, 0.0)?;
    let class_term = graph.softmax_cross_entropy(real_out.class_logits, &head_labels)?;

    let mut loss = graph.add(real_term, fake_term)?;
    let lam_mm = graph.constant(Tensor::scalar(lambda_mismatch));
    let mis_scaled = graph.mul(mis_term, lam_mm)?;
    loss = graph.add(loss, mis_scaled)?;
    let lam_c = graph.constant(Tensor::scalar(lambda_class));
    let class_scaled = graph.mul(class_term, lam_c)?;
    loss = graph.add(loss, class_scaled)?;
    Ok((graph, loss, real_out.class_logits))
}

/// Evaluate the discriminator loss for a batch; the fake images are drawn
/// from the generator with the batch's noise.
pub fn loss_discriminator(
    disc: &Discriminator,
    gen: &Generator,
    batch: &GanBatch,
    lambda_mismatch: f64,
    lambda_class: f64,
) -> Result<f64> {
    let fake = generator_forward(gen, &batch.captions, &batch.noise)?;
    let (graph, loss, _) =
        discriminator_loss_graph(disc, &fake, batch, lambda_mismatch, lambda_class, false)?;
    Ok(graph.value(loss).item())
}

/// The generator objective on one batch, non-saturating form:
/// `BCE(D_s(G(caption, z), caption), 1) + lambda_c * CE(class head on fakes, labels)`.
fn generator_loss_graph(
    disc: &Discriminator,
    gen: &Generator,
    batch: &GanBatch,
    lambda_class: f64,
    trainable: bool,
) -> Result<(Graph, NodeId)> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch("loss_generator"));
    }
    let head_labels: Vec<usize> = batch
        .labels
        .iter()
        .map(|&l| disc.head_label(l))
        .collect::<Result<_>>()?;

    let mut graph = Graph::new();
    let captions = graph.input("captions", batch.captions.clone());
    let noise = graph.input("noise", batch.noise.clone());
    let g_nodes = gen.params.register(&mut graph, "g.", trainable);
    let d_nodes = disc.params.register(&mut graph, "d.", false);

    let fake = build_generator(&mut graph, &g_nodes, captions, noise)?;
    let out = build_discriminator(&mut graph, &d_nodes, fake, captions)?;
    let realism = graph.bce_uniform(out.source_prob, 1.0)?;
    let class_term = graph.softmax_cross_entropy(out.class_logits, &head_labels)?;
    let lam_c = graph.constant(Tensor::scalar(lambda_class));
    let class_scaled = graph.mul(class_term, lam_c)?;
    let loss = graph.add(realism, class_scaled)?;
    Ok((graph, loss))
}

pub fn loss_generator(
    disc: &Discriminator,
    gen: &Generator,
    batch: &GanBatch,
    lambda_class: f64,
) -> Result<f64> {
    let (graph, loss) = generator_loss_graph(disc, gen, batch, lambda_class, false)?;
    Ok(graph.value(loss).item())
}

/// One alternating training step: an Adam step on the discriminator, then an
/// Adam step on the generator, both on the same batch. Returns
/// `(loss_d, loss_g, class-head hits on real samples)`.
pub fn alternating_step(
    gen: &mut Generator,
    disc: &mut Discriminator,
    batch: &GanBatch,
    cfg: &GanTrainConfig,
) -> Result<(f64, f64, usize)> {
    // discriminator step; fakes are constants here
    let fake = generator_forward(gen, &batch.captions, &batch.noise)?;
    let (graph, loss, class_logits) = discriminator_loss_graph(
        disc,
        &fake,
        batch,
        cfg.lambda_mismatch,
        cfg.lambda_class,
        true,
    )?;
    let loss_d = graph.value(loss).item();
    let hits = {
        let logits = graph.value(class_logits);
        batch
            .labels
            .iter()
            .enumerate()
            .filter(|(row, &label)| {
                let head = disc.head_label(label).unwrap();
                argmax(logits.row(*row)) == head
            })
            .count()
    };
    let grads = graph.backward(loss)?.strip_prefix("d.");
    adam_step(&mut disc.params, &grads, cfg.learning_rate)?;

    // generator step on the same captions, labels and noise
    let (graph, loss) = generator_loss_graph(disc, gen, batch, cfg.lambda_class, true)?;
    let loss_g = graph.value(loss).item();
    let grads = graph.backward(loss)?.strip_prefix("g.");
    adam_step(&mut gen.params, &grads, cfg.learning_rate)?;

    Ok((loss_d, loss_g, hits))
}

pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss_d: f64,
    pub loss_g: f64,
    /// Class-head top-1 on the real samples seen this epoch.
    pub base_top1: f64,
}

/// Everything a representation-learning run carries between epochs; the
/// checkpoint file is a serialization of this state.
#[derive(Clone, Debug)]
pub struct PretrainState {
    pub generator: Generator,
    pub discriminator: Discriminator,
    pub epochs_done: usize,
    pub log: Vec<EpochLog>,
    pub seed: u64,
    pub rng: ChaCha8Rng,
}

/// Initialize models and the training stream for a pretraining run.
pub fn pretrain_init(split: &DatasetSplit, cfg: &GanTrainConfig, seed: u64) -> Result<PretrainState> {
    cfg.validate()?;
    if split.train_base.is_empty() {
        return Err(Error::EmptyBatch("pretrain_representation"));
    }
    let world = &split.config;
    let mut init_rng = substream(seed, seeding::SALT_GAN_INIT, 0);
    let generator = Generator::new(
        GeneratorDims {
            caption_dim: world.caption_dim,
            noise_dim: cfg.noise_dim,
            hidden_dim: cfg.hidden_dim,
            image_dim: world.image_dim,
        },
        &mut init_rng,
    );
    let discriminator = Discriminator::new(
        DiscriminatorDims {
            image_dim: world.image_dim,
            caption_dim: world.caption_dim,
            hidden_dim: cfg.hidden_dim,
            feature_dim: cfg.feature_dim,
            num_classes: world.num_base_classes,
        },
        &mut init_rng,
    );
    Ok(PretrainState {
        generator,
        discriminator,
        epochs_done: 0,
        log: Vec::new(),
        seed,
        rng: substream(seed, seeding::SALT_GAN_TRAIN, 0),
    })
}

/// Continue a pretraining run up to `target_epochs`. All randomness comes
/// from the state's stream, so interrupting and resuming reproduces the
/// uninterrupted run bit for bit.
pub fn pretrain_run(
    state: &mut PretrainState,
    split: &DatasetSplit,
    cfg: &GanTrainConfig,
    target_epochs: usize,
) -> Result<()> {
    let pool = &split.train_base;
    while state.epochs_done < target_epochs {
        let mut order: Vec<usize> = (0..pool.len()).collect();
        for i in (1..order.len()).rev() {
            let j = state.rng.random_range(0..=i);
            order.swap(i, j);
        }
        let (mut sum_d, mut sum_g, mut hits, mut seen, mut batches) = (0.0, 0.0, 0usize, 0usize, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let batch = assemble_batch(pool, chunk, cfg.noise_dim, &mut state.rng)?;
            let (loss_d, loss_g, batch_hits) =
                alternating_step(&mut state.generator, &mut state.discriminator, &batch, cfg)?;
            sum_d += loss_d;
            sum_g += loss_g;
            hits += batch_hits;
            seen += batch.len();
            batches += 1;
        }
        state.log.push(EpochLog {
            epoch: state.epochs_done,
            loss_d: sum_d / batches as f64,
            loss_g: sum_g / batches as f64,
            base_top1: hits as f64 / seen as f64,
        });
        state.epochs_done += 1;
    }
    Ok(())
}

/// The representation learning phase: alternating GAN training on the base
/// split for `cfg.epochs` epochs.
pub fn pretrain_representation(
    split: &DatasetSplit,
    cfg: &GanTrainConfig,
    seed: u64,
) -> Result<PretrainState> {
    let mut state = pretrain_init(split, cfg, seed)?;
    pretrain_run(&mut state, split, cfg, cfg.epochs)?;
    Ok(state)
}

/// A caption tensor of zeros, the stand-in used whenever a model classifies
/// plain images (test samples carry no caption at evaluation time).
pub fn zero_captions(batch: usize, caption_dim: usize) -> Tensor {
    Tensor::zeros(&[batch, caption_dim])
}

/// Class logits for bare images: the discriminator run with zero captions.
pub fn classifier_logits(disc: &Discriminator, images: &Tensor) -> Result<Tensor> {
    let captions = zero_captions(images.nrows(), disc.dims.caption_dim);
    Ok(discriminator_forward(disc, images, &captions)?.1)
}

/// Train a conventional classifier with the discriminator's architecture on
/// the base split: plain cross-entropy on (image, zero caption), no
/// adversarial terms. This is the non-adversarial pretraining baseline.
pub fn pretrain_classifier(
    split: &DatasetSplit,
    cfg: &GanTrainConfig,
    seed: u64,
) -> Result<Discriminator> {
    cfg.validate()?;
    if split.train_base.is_empty() {
        return Err(Error::EmptyBatch("pretrain_classifier"));
    }
    let world = &split.config;
    let mut init_rng = substream(seed, seeding::SALT_CLASSIFIER, 0);
    let mut model = Discriminator::new(
        DiscriminatorDims {
            image_dim: world.image_dim,
            caption_dim: world.caption_dim,
            hidden_dim: cfg.hidden_dim,
            feature_dim: cfg.feature_dim,
            num_classes: world.num_base_classes,
        },
        &mut init_rng,
    );
    let mut rng = substream(seed, seeding::SALT_CLASSIFIER, 1);
    let pool = &split.train_base;
    for _ in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..pool.len()).collect();
        for i in (1..order.len()).rev() {
            let j = rng.random_range(0..=i);
            order.swap(i, j);
        }
        for chunk in order.chunks(cfg.batch_size) {
            let images: Vec<Vec<f64>> = chunk.iter().map(|&i| pool[i].image.clone()).collect();
            let labels: Vec<usize> = chunk
                .iter()
                .map(|&i| model.head_label(pool[i].label))
                .collect::<Result<_>>()?;
            let images = Tensor::from_rows(&images)?;
            let captions = zero_captions(chunk.len(), world.caption_dim);

            let mut graph = Graph::new();
            let i_node = graph.input("images", images);
            let c_node = graph.input("captions", captions);
            let nodes = model.params.register(&mut graph, "d.", true);
            let out = build_discriminator(&mut graph, &nodes, i_node, c_node)?;
            let loss = graph.softmax_cross_entropy(out.class_logits, &labels)?;
            let grads = graph.backward(loss)?.strip_prefix("d.");
            adam_step(&mut model.params, &grads, cfg.learning_rate)?;
        }
    }
    Ok(model)
}
