//! Discriminator adaptation, n-shot initialization finetuning, and the
//! self-paced loop: generate candidates per novel class, rank them by the
//! adapted discriminator's class confidence, keep the top K, and retrain on
//! the union of real and curated generated samples.
//!
//! Classification always runs on bare images (zero caption vector): test
//! samples carry no caption at evaluation time. Generated candidates keep
//! their source caption and are scored with it.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::eval::topk_accuracy;
use crate::gan::{
    build_discriminator, classifier_logits, discriminator_forward, generator_forward,
    zero_captions, Discriminator, GanBatch, Generator,
};
use crate::graph::Graph;
use crate::optim::{adam_step, sgd_momentum_step};
use crate::seeding::{self, substream};
use crate::tensor::Tensor;

fn d_iterations() -> usize {
    30
}
fn d_top_k() -> usize {
    1
}
fn d_epochs_per_iteration() -> usize {
    10
}
fn d_candidates_per_caption() -> usize {
    3
}
fn d_dprime_rate() -> f64 {
    1e-3
}
fn d_dprime_momentum() -> f64 {
    0.5
}
fn d_dprime_batch() -> usize {
    32
}
fn d_g_rate() -> f64 {
    2e-5
}
fn d_init_epochs() -> usize {
    20
}
fn d_lambda_class() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplConfig {
    pub iterations: usize,
    /// Generated samples kept per class per iteration.
    pub top_k: usize,
    pub epochs_per_iteration: usize,
    pub candidates_per_caption: usize,
    pub dprime_rate: f64,
    pub dprime_momentum: f64,
    pub dprime_batch: usize,
    /// Generator learning rate during the self-paced phase.
    pub g_rate: f64,
    pub init_epochs: usize,
    /// Class-loss weight for generator updates.
    pub lambda_class: f64,
    /// false: update the classifier only; true: alternate generator updates.
    pub update_g: bool,
}

impl Default for SplConfig {
    fn default() -> Self {
        SplConfig {
            iterations: d_iterations(),
            top_k: d_top_k(),
            epochs_per_iteration: d_epochs_per_iteration(),
            candidates_per_caption: d_candidates_per_caption(),
            dprime_rate: d_dprime_rate(),
            dprime_momentum: d_dprime_momentum(),
            dprime_batch: d_dprime_batch(),
            g_rate: d_g_rate(),
            init_epochs: d_init_epochs(),
            lambda_class: d_lambda_class(),
            update_g: false,
        }
    }
}

impl SplConfig {
    pub fn validate(&self) -> Result<()> {
        for (field, v) in [
            ("spl.iterations", self.iterations),
            ("spl.top_k", self.top_k),
            ("spl.epochs_per_iteration", self.epochs_per_iteration),
            ("spl.candidates_per_caption", self.candidates_per_caption),
            ("spl.dprime_batch", self.dprime_batch),
            ("spl.init_epochs", self.init_epochs),
        ] {
            if v == 0 {
                return Err(Error::InvalidConfig {
                    field: field.into(),
                    reason: "must be positive".into(),
                });
            }
        }
        for (field, v) in [
            ("spl.dprime_rate", self.dprime_rate),
            ("spl.g_rate", self.g_rate),
        ] {
            if v <= 0.0 {
                return Err(Error::InvalidConfig {
                    field: field.into(),
                    reason: format!("must be positive, got {v}"),
                });
            }
        }
        if !(0.0..1.0).contains(&self.dprime_momentum) {
            return Err(Error::InvalidConfig {
                field: "spl.dprime_momentum".into(),
                reason: format!("must lie in [0, 1), got {}", self.dprime_momentum),
            });
        }
        if self.lambda_class < 0.0 {
            return Err(Error::InvalidConfig {
                field: "spl.lambda_class".into(),
                reason: "must be >= 0".into(),
            });
        }
        Ok(())
    }
}

/// Swap the class head: trunk and source head are copied bit-identically from
/// the pretrained discriminator, the class head is reinitialized at width
/// `num_novel` with scale `1/sqrt(feature_dim)` and fresh optimizer slots.
pub fn adapt_discriminator(
    disc: &Discriminator,
    num_novel: usize,
    label_offset: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Discriminator> {
    if num_novel < 2 {
        return Err(Error::TooFewClasses(num_novel));
    }
    let mut dims = disc.dims;
    dims.num_classes = num_novel;
    let mut adapted = Discriminator::new(dims, rng);
    adapted.label_offset = label_offset;
    // overwrite everything except the class head with the pretrained tensors
    let names: Vec<String> = disc.params.iter().map(|(n, _)| n.clone()).collect();
    for name in names {
        if name.starts_with("cls_") {
            continue;
        }
        adapted
            .params
            .set_value(&name, disc.params.value(&name).unwrap().clone())?;
    }
    // the head was drawn with the generic init; redraw at the adapted scale
    let f = dims.feature_dim;
    let sd = 1.0 / (f as f64).sqrt();
    let head: Vec<f64> = (0..f * num_novel)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z * sd
        })
        .collect();
    adapted
        .params
        .set_value("cls_w", Tensor::from_values(&[f, num_novel], head)?)?;
    adapted
        .params
        .set_value("cls_b", Tensor::zeros(&[num_novel]))?;
    adapted.params.set_step(0);
    Ok(adapted)
}

fn class_ids_of(pool: &[Sample]) -> Vec<usize> {
    let mut ids: Vec<usize> = pool.iter().map(|s| s.label).collect();
    ids.sort_unstable();
    ids.dedup();
    ids
}

/// One cross-entropy SGD epoch over (image, zero caption) batches.
fn dprime_epoch(
    disc: &mut Discriminator,
    images: &[Vec<f64>],
    labels: &[usize],
    cfg: &SplConfig,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let mut order: Vec<usize> = (0..images.len()).collect();
    for i in (1..order.len()).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
    let (mut total, mut batches) = (0.0, 0usize);
    for chunk in order.chunks(cfg.dprime_batch) {
        let batch_images: Vec<Vec<f64>> = chunk.iter().map(|&i| images[i].clone()).collect();
        let head_labels: Vec<usize> = chunk
            .iter()
            .map(|&i| disc.head_label(labels[i]))
            .collect::<Result<_>>()?;
        let images_t = Tensor::from_rows(&batch_images)?;
        let captions = zero_captions(chunk.len(), disc.dims.caption_dim);

        let mut graph = Graph::new();
        let i_node = graph.input("images", images_t);
        let c_node = graph.input("captions", captions);
        let nodes = disc.params.register(&mut graph, "d.", true);
        let out = build_discriminator(&mut graph, &nodes, i_node, c_node)?;
        let loss = graph.softmax_cross_entropy(out.class_logits, &head_labels)?;
        total += graph.value(loss).item();
        batches += 1;
        let grads = graph.backward(loss)?.strip_prefix("d.");
        sgd_momentum_step(&mut disc.params, &grads, cfg.dprime_rate, cfg.dprime_momentum)?;
    }
    Ok(total / batches as f64)
}

/// Initialization finetuning: `init_epochs` of cross-entropy SGD on the
/// n-shot real pool. Returns the per-epoch mean losses.
pub fn init_finetune(
    disc: &mut Discriminator,
    pool: &[Sample],
    cfg: &SplConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    if pool.is_empty() {
        return Err(Error::EmptyBatch("init_finetune"));
    }
    for class in disc.label_offset..disc.label_offset + disc.dims.num_classes {
        if !pool.iter().any(|s| s.label == class) {
            return Err(Error::EmptyClass { class });
        }
    }
    let images: Vec<Vec<f64>> = pool.iter().map(|s| s.image.clone()).collect();
    let labels: Vec<usize> = pool.iter().map(|s| s.label).collect();
    let mut losses = Vec::with_capacity(cfg.init_epochs);
    for _ in 0..cfg.init_epochs {
        losses.push(dprime_epoch(disc, &images, &labels, cfg, rng)?);
    }
    Ok(losses)
}

/// A generated image with its conditioning class, source caption, and the
/// ranking score assigned by the adapted discriminator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub image: Vec<f64>,
    pub class_id: usize,
    /// Index into the caption list the candidate batch was generated from.
    pub caption_id: usize,
    pub caption: Vec<f64>,
    pub score: f64,
}

/// Generate `captions.len() * candidates_per_caption` candidates for one
/// class: one image per (caption, noise draw). Scores start at zero and are
/// assigned by `rank_candidates`.
pub fn generate_candidates(
    gen: &Generator,
    class_id: usize,
    captions: &[Vec<f64>],
    candidates_per_caption: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Candidate>> {
    if captions.is_empty() {
        return Err(Error::EmptyBatch("generate_candidates"));
    }
    let count = captions.len() * candidates_per_caption;
    let mut caption_rows = Vec::with_capacity(count);
    let mut caption_ids = Vec::with_capacity(count);
    for (cid, caption) in captions.iter().enumerate() {
        for _ in 0..candidates_per_caption {
            caption_rows.push(caption.clone());
            caption_ids.push(cid);
        }
    }
    let noise: Vec<f64> = (0..count * gen.dims.noise_dim)
        .map(|_| StandardNormal.sample(rng))
        .collect();
    let captions_t = Tensor::from_rows(&caption_rows)?;
    let noise_t = Tensor::from_values(&[count, gen.dims.noise_dim], noise)?;
    let images = generator_forward(gen, &captions_t, &noise_t)?;
    Ok((0..count)
        .map(|i| Candidate {
            image: images.row(i).to_vec(),
            class_id,
            caption_id: caption_ids[i],
            caption: caption_rows[i].clone(),
            score: 0.0,
        })
        .collect())
}

/// Softmax confidence of the conditioning class for each candidate, scored
/// with the candidate's source caption.
pub fn score_candidates(disc: &Discriminator, candidates: &[Candidate]) -> Result<Vec<f64>> {
    let images = Tensor::from_rows(&candidates.iter().map(|c| c.image.clone()).collect::<Vec<_>>())?;
    let captions =
        Tensor::from_rows(&candidates.iter().map(|c| c.caption.clone()).collect::<Vec<_>>())?;
    let (_, logits) = discriminator_forward(disc, &images, &captions)?;
    let mut graph = Graph::new();
    let l = graph.input("logits", logits);
    let sm = graph.softmax_rows(l)?;
    let probs = graph.value(sm);
    candidates
        .iter()
        .enumerate()
        .map(|(i, c)| Ok(probs.row(i)[disc.head_label(c.class_id)?]))
        .collect()
}

/// Rank candidates of a single class by descending score; ties keep the
/// original candidate order. The returned candidates carry their scores.
pub fn rank_candidates(disc: &Discriminator, candidates: &[Candidate]) -> Result<Vec<Candidate>> {
    if candidates.is_empty() {
        return Err(Error::EmptyBatch("rank_candidates"));
    }
    let first = candidates[0].class_id;
    if let Some(other) = candidates.iter().find(|c| c.class_id != first) {
        return Err(Error::MixedClasses {
            first,
            second: other.class_id,
        });
    }
    let scores = score_candidates(disc, candidates)?;
    let mut scored: Vec<Candidate> = candidates
        .iter()
        .zip(&scores)
        .map(|(c, &score)| Candidate {
            score,
            ..c.clone()
        })
        .collect();
    let mut order: Vec<usize> = (0..scored.len()).collect();
    order.sort_by(|&a, &b| {
        scored[b]
            .score
            .partial_cmp(&scored[a].score)
            .expect("scores are finite")
            .then(a.cmp(&b))
    });
    scored = order.into_iter().map(|i| scored[i].clone()).collect();
    Ok(scored)
}

/// First K of a ranked list: the hard realization of the soft per-candidate
/// selector with budget K.
pub fn select_top_k(ranked: &[Candidate], k: usize) -> Result<Vec<Candidate>> {
    if k > ranked.len() {
        return Err(Error::SelectionTooLarge {
            k,
            available: ranked.len(),
        });
    }
    Ok(ranked[..k].to_vec())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationMetrics {
    pub iteration: usize,
    pub top1: f64,
    pub top5: f64,
    pub generated_pool_size: usize,
}

/// The evolving loop state: adapted discriminator, generator, the immutable
/// real pool, the cumulative curated generated pool, and per-iteration
/// metrics on the test split.
#[derive(Clone, Debug)]
pub struct SplState {
    pub dprime: Discriminator,
    pub generator: Generator,
    pub real_pool: Vec<Sample>,
    pub test_set: Vec<Sample>,
    pub generated: Vec<Candidate>,
    pub iteration: usize,
    pub metrics: Vec<IterationMetrics>,
    /// Candidate sets ranked during iteration 1, kept per class for chunk
    /// analysis (the post-initialization ranking snapshot).
    pub first_ranking: BTreeMap<usize, Vec<Candidate>>,
    rng_main: ChaCha8Rng,
    /// Separate stream for generator-update draws, so runs with and without
    /// generator updates share identical candidate streams.
    rng_gupdate: ChaCha8Rng,
}

impl SplState {
    pub fn new(
        dprime: Discriminator,
        generator: Generator,
        real_pool: Vec<Sample>,
        test_set: Vec<Sample>,
        seed: u64,
    ) -> Self {
        SplState {
            dprime,
            generator,
            real_pool,
            test_set,
            generated: Vec::new(),
            iteration: 0,
            metrics: Vec::new(),
            first_ranking: BTreeMap::new(),
            rng_main: substream(seed, seeding::SALT_SPL, 0),
            rng_gupdate: substream(seed, seeding::SALT_SPL_GEN, 1),
        }
    }

    pub fn novel_classes(&self) -> Vec<usize> {
        class_ids_of(&self.real_pool)
    }

    /// Test top-1/top-5 of the current classifier on bare images.
    pub fn evaluate(&self) -> Result<(f64, f64)> {
        let images = Tensor::from_rows(
            &self.test_set.iter().map(|s| s.image.clone()).collect::<Vec<_>>(),
        )?;
        let labels: Vec<usize> = self
            .test_set
            .iter()
            .map(|s| self.dprime.head_label(s.label))
            .collect::<Result<_>>()?;
        let logits = classifier_logits(&self.dprime, &images)?;
        let top1 = topk_accuracy(&logits, &labels, 1)?;
        let top5 = topk_accuracy(&logits, &labels, 5.min(self.dprime.dims.num_classes))?;
        Ok((top1, top5))
    }
}

/// Captions of a class's real pool, in pool order (every caption of every
/// sample).
pub fn class_captions(pool: &[Sample], class: usize) -> Vec<Vec<f64>> {
    pool.iter()
        .filter(|s| s.label == class)
        .flat_map(|s| s.captions.iter().cloned())
        .collect()
}

/// One generator Adam step on the captions and labels of a training batch.
fn g_update_step(
    state: &mut SplState,
    items: &[(Vec<f64>, usize, Option<Vec<f64>>)],
    cfg: &SplConfig,
) -> Result<()> {
    let mut captions = Vec::with_capacity(items.len());
    let mut labels = Vec::with_capacity(items.len());
    for (_, label, caption) in items {
        let caption = match caption {
            Some(c) => c.clone(),
            None => unreachable!("real samples carry a drawn caption"),
        };
        captions.push(caption);
        labels.push(*label);
    }
    let noise: Vec<f64> = (0..items.len() * state.generator.dims.noise_dim)
        .map(|_| StandardNormal.sample(&mut state.rng_gupdate))
        .collect();
    let batch = GanBatch {
        images: Tensor::zeros(&[items.len(), state.dprime.dims.image_dim]),
        captions: Tensor::from_rows(&captions)?,
        mismatched: Tensor::zeros(&[items.len(), state.dprime.dims.caption_dim]),
        noise: Tensor::from_values(&[items.len(), state.generator.dims.noise_dim], noise)?,
        labels,
    };
    let head_labels: Vec<usize> = batch
        .labels
        .iter()
        .map(|&l| state.dprime.head_label(l))
        .collect::<Result<_>>()?;

    let mut graph = Graph::new();
    let captions_node = graph.input("captions", batch.captions.clone());
    let noise_node = graph.input("noise", batch.noise.clone());
    let g_nodes = state.generator.params.register(&mut graph, "g.", true);
    let d_nodes = state.dprime.params.register(&mut graph, "d.", false);
    let fake = crate::gan::build_generator(&mut graph, &g_nodes, captions_node, noise_node)?;
    let out = build_discriminator(&mut graph, &d_nodes, fake, captions_node)?;
    let realism = graph.bce_uniform(out.source_prob, 1.0)?;
    let class_term = graph.softmax_cross_entropy(out.class_logits, &head_labels)?;
    let lam = graph.constant(Tensor::scalar(cfg.lambda_class));
    let scaled = graph.mul(class_term, lam)?;
    let loss = graph.add(realism, scaled)?;
    let grads = graph.backward(loss)?.strip_prefix("g.");
    adam_step(&mut state.generator.params, &grads, cfg.g_rate)?;
    Ok(())
}

/// One self-paced iteration: per novel class generate, rank, select top-K and
/// append to the generated pool; then train `epochs_per_iteration` epochs on
/// real + generated, alternating generator updates when configured.
pub fn spl_iteration(state: &mut SplState, cfg: &SplConfig) -> Result<()> {
    cfg.validate()?;
    let classes = state.novel_classes();
    if classes.is_empty() {
        return Err(Error::EmptyBatch("spl_iteration"));
    }

    // curate: generate, rank, keep the best K per class
    for &class in &classes {
        let captions = class_captions(&state.real_pool, class);
        let candidates = generate_candidates(
            &state.generator,
            class,
            &captions,
            cfg.candidates_per_caption,
            &mut state.rng_main,
        )?;
        let ranked = rank_candidates(&state.dprime, &candidates)?;
        if state.iteration == 0 {
            state.first_ranking.insert(class, ranked.clone());
        }
        state.generated.extend(select_top_k(&ranked, cfg.top_k)?);
    }

    // train on the union; the real pool itself never changes
    let mut images: Vec<Vec<f64>> = Vec::new();
    let mut labels: Vec<usize> = Vec::new();
    // caption carried per item for generator updates: generated samples keep
    // their source caption, real samples draw one of theirs per epoch
    let mut fixed_captions: Vec<Option<Vec<f64>>> = Vec::new();
    for s in &state.real_pool {
        images.push(s.image.clone());
        labels.push(s.label);
        fixed_captions.push(None);
    }
    for c in &state.generated {
        images.push(c.image.clone());
        labels.push(c.class_id);
        fixed_captions.push(Some(c.caption.clone()));
    }

    for _ in 0..cfg.epochs_per_iteration {
        let mut order: Vec<usize> = (0..images.len()).collect();
        for i in (1..order.len()).rev() {
            let j = state.rng_main.random_range(0..=i);
            order.swap(i, j);
        }
        for chunk in order.chunks(cfg.dprime_batch) {
            let batch_images: Vec<Vec<f64>> = chunk.iter().map(|&i| images[i].clone()).collect();
            let head_labels: Vec<usize> = chunk
                .iter()
                .map(|&i| state.dprime.head_label(labels[i]))
                .collect::<Result<_>>()?;
            let images_t = Tensor::from_rows(&batch_images)?;
            let captions_t = zero_captions(chunk.len(), state.dprime.dims.caption_dim);

            let mut graph = Graph::new();
            let i_node = graph.input("images", images_t);
            let c_node = graph.input("captions", captions_t);
            let nodes = state.dprime.params.register(&mut graph, "d.", true);
            let out = build_discriminator(&mut graph, &nodes, i_node, c_node)?;
            let loss = graph.softmax_cross_entropy(out.class_logits, &head_labels)?;
            let grads = graph.backward(loss)?.strip_prefix("d.");
            sgd_momentum_step(
                &mut state.dprime.params,
                &grads,
                cfg.dprime_rate,
                cfg.dprime_momentum,
            )?;

            if cfg.update_g {
                let items: Vec<(Vec<f64>, usize, Option<Vec<f64>>)> = chunk
                    .iter()
                    .map(|&i| {
                        let caption = match &fixed_captions[i] {
                            Some(c) => Some(c.clone()),
                            None => {
                                // a real sample: draw one of its captions
                                let sample = &state.real_pool[i];
                                let pick =
                                    state.rng_gupdate.random_range(0..sample.captions.len());
                                Some(sample.captions[pick].clone())
                            }
                        };
                        (images[i].clone(), labels[i], caption)
                    })
                    .collect();
                g_update_step(state, &items, cfg)?;
            }
        }
    }

    state.iteration += 1;
    let (top1, top5) = state.evaluate()?;
    state.metrics.push(IterationMetrics {
        iteration: state.iteration,
        top1,
        top5,
        generated_pool_size: state.generated.len(),
    });
    Ok(())
}

/// Run the full self-paced phase. The state must already be initialization-
/// finetuned; the log gains exactly `cfg.iterations` rows.
pub fn run_spl(state: &mut SplState, cfg: &SplConfig) -> Result<()> {
    for _ in 0..cfg.iterations {
        spl_iteration(state, cfg)?;
    }
    Ok(())
}

/// Write an evolution log as CSV: header `iteration,top1,top5`.
pub fn evolution_csv(metrics: &[IterationMetrics]) -> String {
    let mut out = String::from("iteration,top1,top5\n");
    for m in metrics {
        out.push_str(&format!("{},{},{}\n", m.iteration, m.top1, m.top5));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_world, nshot_view, sample_dataset, DatasetSplit, WorldConfig};
    use crate::gan::{pretrain_representation, GanTrainConfig, PretrainState};
    use std::sync::OnceLock;

    fn world_cfg() -> WorldConfig {
        WorldConfig {
            num_base_classes: 5,
            num_novel_classes: 3,
            caption_dim: 6,
            image_dim: 12,
            captions_per_image: 4,
            samples_per_base_class: 8,
            samples_per_novel_train: 4,
            samples_per_novel_test: 6,
            ..WorldConfig::with_seed(42)
        }
    }

    fn gan_cfg() -> GanTrainConfig {
        GanTrainConfig {
            epochs: 12,
            hidden_dim: 16,
            feature_dim: 8,
            noise_dim: 4,
            ..GanTrainConfig::default()
        }
    }

    fn spl_cfg() -> SplConfig {
        SplConfig {
            iterations: 2,
            epochs_per_iteration: 2,
            init_epochs: 5,
            ..SplConfig::default()
        }
    }

    fn shared() -> &'static (DatasetSplit, PretrainState) {
        static SHARED: OnceLock<(DatasetSplit, PretrainState)> = OnceLock::new();
        SHARED.get_or_init(|| {
            let split = sample_dataset(&make_world(&world_cfg()).unwrap());
            let state = pretrain_representation(&split, &gan_cfg(), 7).unwrap();
            (split, state)
        })
    }

    fn fresh_state(seed: u64) -> SplState {
        let (split, pre) = shared();
        let view = nshot_view(split, 1, seed).unwrap();
        let mut rng = substream(seed, seeding::SALT_ADAPT, 0);
        let mut dprime = adapt_discriminator(
            &pre.discriminator,
            split.config.num_novel_classes,
            split.config.num_base_classes,
            &mut rng,
        )
        .unwrap();
        let mut ft_rng = substream(seed, seeding::SALT_INIT_FT, 0);
        init_finetune(&mut dprime, &view.train_novel, &spl_cfg(), &mut ft_rng).unwrap();
        SplState::new(
            dprime,
            pre.generator.clone(),
            view.train_novel.clone(),
            split.test.clone(),
            seed,
        )
    }

    #[test]
    fn adapt_copies_trunk_bits_and_resizes_head() {
        let (_, pre) = shared();
        let mut rng = substream(1, seeding::SALT_ADAPT, 0);
        let adapted = adapt_discriminator(&pre.discriminator, 3, 5, &mut rng).unwrap();
        for name in ["t_w1", "t_b1", "t_w2", "t_b2", "t_w3", "t_b3", "src_w", "src_b"] {
            assert_eq!(
                adapted.params.value(name).unwrap().values(),
                pre.discriminator.params.value(name).unwrap().values(),
                "{name} should be copied bit-identically"
            );
        }
        assert_eq!(adapted.params.value("cls_w").unwrap().shape(), &[8, 3]);
        assert_eq!(adapted.label_offset, 5);
        assert_eq!(adapted.dims.num_classes, 3);
    }

    #[test]
    fn adapt_seeds_give_different_heads() {
        let (_, pre) = shared();
        let mut r1 = substream(1, seeding::SALT_ADAPT, 0);
        let mut r2 = substream(2, seeding::SALT_ADAPT, 0);
        let a = adapt_discriminator(&pre.discriminator, 3, 5, &mut r1).unwrap();
        let b = adapt_discriminator(&pre.discriminator, 3, 5, &mut r2).unwrap();
        assert_ne!(
            a.params.value("cls_w").unwrap().values(),
            b.params.value("cls_w").unwrap().values()
        );
    }

    #[test]
    fn adapt_rejects_tiny_head() {
        let (_, pre) = shared();
        let mut rng = substream(1, seeding::SALT_ADAPT, 0);
        assert!(matches!(
            adapt_discriminator(&pre.discriminator, 1, 5, &mut rng),
            Err(Error::TooFewClasses(1))
        ));
    }

    #[test]
    fn init_finetune_requires_every_class() {
        let (split, pre) = shared();
        let mut rng = substream(3, seeding::SALT_ADAPT, 0);
        let mut dprime = adapt_discriminator(&pre.discriminator, 3, 5, &mut rng).unwrap();
        let view = nshot_view(split, 1, 3).unwrap();
        let partial: Vec<Sample> = view
            .train_novel
            .iter()
            .filter(|s| s.label != 6)
            .cloned()
            .collect();
        let mut ft_rng = substream(3, seeding::SALT_INIT_FT, 0);
        assert!(matches!(
            init_finetune(&mut dprime, &partial, &spl_cfg(), &mut ft_rng),
            Err(Error::EmptyClass { class: 6 })
        ));
    }

    #[test]
    fn init_finetune_only_touches_dprime() {
        let (split, pre) = shared();
        let view = nshot_view(split, 2, 9).unwrap();
        let mut rng = substream(9, seeding::SALT_ADAPT, 0);
        let mut dprime = adapt_discriminator(&pre.discriminator, 3, 5, &mut rng).unwrap();
        let before = dprime.clone();
        let gen_before = pre.generator.clone();
        let mut ft_rng = substream(9, seeding::SALT_INIT_FT, 0);
        init_finetune(&mut dprime, &view.train_novel, &spl_cfg(), &mut ft_rng).unwrap();
        assert!(!dprime.params.values_bit_equal(&before.params));
        assert!(pre.generator.params.values_bit_equal(&gen_before.params));
        // trunk moves too (finetuning is end to end), but the source head
        // has no gradient under the pure class loss
        assert_eq!(
            dprime.params.value("src_w").unwrap().values(),
            before.params.value("src_w").unwrap().values()
        );
    }

    #[test]
    fn candidate_count_is_captions_times_draws() {
        let (split, pre) = shared();
        let view = nshot_view(split, 1, 5).unwrap();
        let captions = class_captions(&view.train_novel, 5 + 1);
        assert_eq!(captions.len(), 4); // 1 sample x 4 captions
        let mut rng = substream(5, seeding::SALT_SPL, 0);
        let cands =
            generate_candidates(&pre.generator, 6, &captions, 3, &mut rng).unwrap();
        assert_eq!(cands.len(), 12);
        assert!(cands.iter().all(|c| c.class_id == 6));
        // deterministic per stream
        let mut rng2 = substream(5, seeding::SALT_SPL, 0);
        let cands2 =
            generate_candidates(&pre.generator, 6, &captions, 3, &mut rng2).unwrap();
        assert_eq!(cands, cands2);
    }

    #[test]
    fn ranking_sorts_by_descending_score_with_stable_ties() {
        let state = fresh_state(21);
        let captions = class_captions(&state.real_pool, 6);
        let mut rng = substream(21, seeding::SALT_SPL, 7);
        let mut cands =
            generate_candidates(&state.generator, 6, &captions, 3, &mut rng).unwrap();
        // exact duplicates force score ties; stability keeps their order
        cands[3] = cands[0].clone();
        let ranked = rank_candidates(&state.dprime, &cands).unwrap();
        for w in ranked.windows(2) {
            assert!(w[0].score >= w[1].score);
        }
        let scores = score_candidates(&state.dprime, &cands).unwrap();
        let mut expect: Vec<usize> = (0..cands.len()).collect();
        expect.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
        let expect_images: Vec<&Vec<f64>> = expect.iter().map(|&i| &cands[i].image).collect();
        let got_images: Vec<&Vec<f64>> = ranked.iter().map(|c| &c.image).collect();
        assert_eq!(got_images, expect_images);
        // stored scores match a recomputation under the same model
        let rescored = score_candidates(&state.dprime, &ranked).unwrap();
        for (c, s) in ranked.iter().zip(rescored) {
            assert_eq!(c.score, s);
        }
    }

    #[test]
    fn ranking_rejects_mixed_classes() {
        let state = fresh_state(22);
        let captions = class_captions(&state.real_pool, 6);
        let mut rng = substream(22, seeding::SALT_SPL, 7);
        let mut cands =
            generate_candidates(&state.generator, 6, &captions, 2, &mut rng).unwrap();
        cands[1].class_id = 7;
        assert!(matches!(
            rank_candidates(&state.dprime, &cands),
            Err(Error::MixedClasses { first: 6, second: 7 })
        ));
    }

    #[test]
    fn select_top_k_contract() {
        let state = fresh_state(23);
        let captions = class_captions(&state.real_pool, 7);
        let mut rng = substream(23, seeding::SALT_SPL, 7);
        let cands = generate_candidates(&state.generator, 7, &captions, 3, &mut rng).unwrap();
        let ranked = rank_candidates(&state.dprime, &cands).unwrap();
        let top1 = select_top_k(&ranked, 1).unwrap();
        assert_eq!(top1[0], ranked[0]);
        let all = select_top_k(&ranked, ranked.len()).unwrap();
        assert_eq!(all, ranked);
        let k_sel = 3;
        let selected = select_top_k(&ranked, k_sel).unwrap();
        let min_selected = selected.iter().map(|c| c.score).fold(f64::INFINITY, f64::min);
        for c in &ranked[k_sel..] {
            assert!(c.score <= min_selected);
        }
        assert!(matches!(
            select_top_k(&ranked, ranked.len() + 1),
            Err(Error::SelectionTooLarge { .. })
        ));
    }

    #[test]
    fn iteration_grows_pool_by_k_per_class_and_respects_update_g() {
        let mut state = fresh_state(31);
        let cfg = spl_cfg();
        let gen_before = state.generator.clone();
        spl_iteration(&mut state, &cfg).unwrap();
        assert_eq!(state.generated.len(), cfg.top_k * 3);
        assert_eq!(state.iteration, 1);
        assert_eq!(state.metrics.len(), 1);
        assert_eq!(state.metrics[0].generated_pool_size, cfg.top_k * 3);
        // SPL without generator updates leaves the generator bit-identical
        assert!(state.generator.params.values_bit_equal(&gen_before.params));
        spl_iteration(&mut state, &cfg).unwrap();
        assert_eq!(state.generated.len(), 2 * cfg.top_k * 3);
        // every generated sample keeps a novel-class label
        assert!(state.generated.iter().all(|c| (5..8).contains(&c.class_id)));
    }

    #[test]
    fn update_g_changes_the_generator() {
        let mut state = fresh_state(32);
        let cfg = SplConfig {
            update_g: true,
            ..spl_cfg()
        };
        let gen_before = state.generator.clone();
        spl_iteration(&mut state, &cfg).unwrap();
        assert!(!state.generator.params.values_bit_equal(&gen_before.params));
    }

    #[test]
    fn iterations_are_reproducible_bit_for_bit() {
        let run = || {
            let mut state = fresh_state(33);
            spl_iteration(&mut state, &spl_cfg()).unwrap();
            state
        };
        let a = run();
        let b = run();
        assert!(a.dprime.params.values_bit_equal(&b.dprime.params));
        assert_eq!(a.generated, b.generated);
        assert_eq!(a.metrics, b.metrics);
    }

    #[test]
    fn real_pool_is_immutable_and_log_length_matches() {
        let mut state = fresh_state(34);
        let pool_before = state.real_pool.clone();
        let cfg = spl_cfg();
        run_spl(&mut state, &cfg).unwrap();
        assert_eq!(state.real_pool, pool_before);
        assert_eq!(state.metrics.len(), cfg.iterations);
        for (i, m) in state.metrics.iter().enumerate() {
            assert_eq!(m.generated_pool_size, (i + 1) * cfg.top_k * 3);
        }
    }

    #[test]
    fn evolution_csv_format() {
        let metrics = vec![
            IterationMetrics {
                iteration: 1,
                top1: 0.25,
                top5: 0.5,
                generated_pool_size: 3,
            },
            IterationMetrics {
                iteration: 2,
                top1: 0.5,
                top5: 1.0,
                generated_pool_size: 6,
            },
        ];
        assert_eq!(
            evolution_csv(&metrics),
            "iteration,top1,top5\n1,0.25,0.5\n2,0.5,1\n"
        );
    }
}
