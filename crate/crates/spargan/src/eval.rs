//! The evaluation battery: top-k accuracy, a frozen oracle classifier that
//! stands in for a perfect judge of sample quality, the confidence-times-
//! diversity quality score, ranked-chunk analysis, and the four-arm ablation.

use std::collections::BTreeMap;
use std::fmt;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{nshot_view, DatasetSplit, Sample};
use crate::error::{Error, Result};
use crate::gan::{
    argmax, classifier_logits, Discriminator, Generator, LEAKY_SLOPE,
};
use crate::graph::Graph;
use crate::optim::{adam_step, ParamSet};
use crate::seeding::{self, mix, substream};
use crate::spl::{
    adapt_discriminator, class_captions, generate_candidates, init_finetune, rank_candidates,
    run_spl, Candidate, IterationMetrics, SplConfig, SplState,
};
use crate::tensor::Tensor;

/// Fraction of test samples whose true label ranks among the `k` highest
/// logits; logit ties are broken by ascending class id.
pub fn topk_accuracy(logits: &Tensor, labels: &[usize], k: usize) -> Result<f64> {
    if labels.is_empty() || logits.nrows() == 0 {
        return Err(Error::EmptyBatch("topk_accuracy"));
    }
    let classes = logits.ncols();
    if k == 0 || k > classes {
        return Err(Error::InvalidConfig {
            field: "k".into(),
            reason: format!("k={k} outside [1, {classes}]"),
        });
    }
    if logits.nrows() != labels.len() {
        return Err(Error::GradShapeMismatch {
            name: "topk_accuracy".into(),
            param: logits.shape().to_vec(),
            grad: vec![labels.len()],
        });
    }
    let mut hits = 0usize;
    for (i, &label) in labels.iter().enumerate() {
        if label >= classes {
            return Err(Error::LabelOutOfRange { label, classes });
        }
        let row = logits.row(i);
        let own = row[label];
        // rank = better classes + equal classes with a smaller id
        let rank = row
            .iter()
            .enumerate()
            .filter(|&(c, &v)| v > own || (v == own && c < label))
            .count();
        if rank < k {
            hits += 1;
        }
    }
    Ok(hits as f64 / labels.len() as f64)
}

/// Frozen MLP classifier `[image -> 128 -> num_classes]` trained on the
/// pooled dataset (all classes, every split) with an internal holdout. Used
/// as the judge for generation quality; never touched by any training loop.
#[derive(Clone, Debug)]
pub struct QualityOracle {
    pub image_dim: usize,
    pub hidden_dim: usize,
    pub num_classes: usize,
    pub held_out_top1: f64,
    params: ParamSet,
}

pub const ORACLE_HIDDEN: usize = 128;
pub const ORACLE_FLOOR: f64 = 0.95;
const ORACLE_EPOCHS: usize = 80;
const ORACLE_BATCH: usize = 32;
const ORACLE_RATE: f64 = 1e-3;

impl QualityOracle {
    /// Class probabilities for a batch of images.
    pub fn predict_probs(&self, images: &Tensor) -> Result<Tensor> {
        let mut graph = Graph::new();
        let x = graph.input("images", images.clone());
        let nodes = self.params.register(&mut graph, "o.", false);
        let h = graph.matmul(x, nodes["w1"])?;
        let h = graph.add_bias(h, nodes["b1"])?;
        let h = graph.leaky_relu(h, LEAKY_SLOPE);
        let logits = graph.matmul(h, nodes["w2"])?;
        let logits = graph.add_bias(logits, nodes["b2"])?;
        let probs = graph.softmax_rows(logits)?;
        Ok(graph.value(probs).clone())
    }

    /// Oracle top-1 labels for a batch of images.
    pub fn predict_labels(&self, images: &Tensor) -> Result<Vec<usize>> {
        let probs = self.predict_probs(images)?;
        Ok((0..probs.nrows()).map(|i| argmax(probs.row(i))).collect())
    }

    /// Serialized parameter bytes, for before/after immutability checks.
    pub fn fingerprint(&self) -> String {
        let tensors: Vec<(&String, &[f64])> = self
            .params
            .iter()
            .map(|(n, e)| (n, e.value.values()))
            .collect();
        format!("{tensors:?}")
    }
}

/// Train the oracle on the full dataset (all classes, train and test pooled)
/// with a deterministic 80/20 holdout; fails if the holdout top-1 misses the
/// 0.95 floor.
pub fn train_quality_oracle(split: &DatasetSplit, seed: u64) -> Result<QualityOracle> {
    let all: Vec<&Sample> = split.all_samples().collect();
    if all.is_empty() {
        return Err(Error::EmptyBatch("train_quality_oracle"));
    }
    let num_classes = split.config.num_classes();
    let image_dim = split.config.image_dim;

    let mut order: Vec<usize> = (0..all.len()).collect();
    let mut rng = substream(seed, seeding::SALT_ORACLE, 0);
    for i in (1..order.len()).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
    let held = (all.len() / 5).max(1);
    let (held_idx, train_idx) = order.split_at(held);

    let mut params = ParamSet::new();
    let randn = |rng: &mut ChaCha8Rng, rows: usize, cols: usize| -> Tensor {
        use rand_distr::{Distribution, StandardNormal};
        let sd = 1.0 / (rows as f64).sqrt();
        let v = (0..rows * cols)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                z * sd
            })
            .collect();
        Tensor::from_values(&[rows, cols], v).unwrap()
    };
    params.insert("w1", randn(&mut rng, image_dim, ORACLE_HIDDEN));
    params.insert("b1", Tensor::zeros(&[ORACLE_HIDDEN]));
    params.insert("w2", randn(&mut rng, ORACLE_HIDDEN, num_classes));
    params.insert("b2", Tensor::zeros(&[num_classes]));
    let mut oracle = QualityOracle {
        image_dim,
        hidden_dim: ORACLE_HIDDEN,
        num_classes,
        held_out_top1: 0.0,
        params,
    };

    let mut train: Vec<usize> = train_idx.to_vec();
    for _ in 0..ORACLE_EPOCHS {
        for i in (1..train.len()).rev() {
            let j = rng.random_range(0..=i);
            train.swap(i, j);
        }
        for chunk in train.chunks(ORACLE_BATCH) {
            let images: Vec<Vec<f64>> = chunk.iter().map(|&i| all[i].image.clone()).collect();
            let labels: Vec<usize> = chunk.iter().map(|&i| all[i].label).collect();
            let images = Tensor::from_rows(&images)?;

            let mut graph = Graph::new();
            let x = graph.input("images", images);
            let nodes = oracle.params.register(&mut graph, "o.", true);
            let h = graph.matmul(x, nodes["w1"])?;
            let h = graph.add_bias(h, nodes["b1"])?;
            let h = graph.leaky_relu(h, LEAKY_SLOPE);
            let logits = graph.matmul(h, nodes["w2"])?;
            let logits = graph.add_bias(logits, nodes["b2"])?;
            let loss = graph.softmax_cross_entropy(logits, &labels)?;
            let grads = graph.backward(loss)?.strip_prefix("o.");
            adam_step(&mut oracle.params, &grads, ORACLE_RATE)?;
        }
    }

    let held_images: Vec<Vec<f64>> = held_idx.iter().map(|&i| all[i].image.clone()).collect();
    let held_labels: Vec<usize> = held_idx.iter().map(|&i| all[i].label).collect();
    let predicted = oracle.predict_labels(&Tensor::from_rows(&held_images)?)?;
    let hits = predicted
        .iter()
        .zip(&held_labels)
        .filter(|(p, l)| p == l)
        .count();
    oracle.held_out_top1 = hits as f64 / held_labels.len() as f64;
    if oracle.held_out_top1 < ORACLE_FLOOR {
        return Err(Error::OracleBelowFloor {
            achieved: oracle.held_out_top1,
            floor: ORACLE_FLOOR,
        });
    }
    Ok(oracle)
}

/// exp of the mean KL divergence between per-image predictive distributions
/// and their average. 1 for a judge that cannot tell images apart, up to the
/// class count for confident and evenly spread predictions.
pub fn score_from_probs(probs: &Tensor) -> Result<f64> {
    let (rows, cols) = (probs.nrows(), probs.ncols());
    if rows == 0 {
        return Err(Error::EmptyBatch("quality_score"));
    }
    let mut mean = vec![0.0; cols];
    for r in 0..rows {
        for (m, p) in mean.iter_mut().zip(probs.row(r)) {
            *m += p;
        }
    }
    for m in &mut mean {
        *m /= rows as f64;
    }
    let mut kl_sum = 0.0;
    for r in 0..rows {
        for (&p, &q) in probs.row(r).iter().zip(&mean) {
            if p > 0.0 {
                kl_sum += p * (p / q).ln();
            }
        }
    }
    Ok((kl_sum / rows as f64).exp())
}

/// Quality of an image batch under the frozen oracle.
pub fn quality_score(images: &Tensor, oracle: &QualityOracle) -> Result<f64> {
    if images.nrows() == 0 {
        return Err(Error::EmptyBatch("quality_score"));
    }
    score_from_probs(&oracle.predict_probs(images)?)
}

pub const CHUNK_SIZE: usize = 3;
pub const CHUNK_COUNT: usize = 10;

/// Accuracy and quality of one ranked chunk, pooled over classes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChunkReport {
    /// 1-based chunk index; chunk 1 holds the highest-ranked candidates.
    pub chunk: usize,
    pub top1: f64,
    pub top5: f64,
    pub quality: f64,
}

/// Split each class's 30 ranked candidates into 10 ordered chunks of 3 and
/// report, per chunk pooled over classes: the adapted discriminator's top-1
/// and top-5 against the conditioning labels (scored with each candidate's
/// source caption, as at ranking time) and the oracle quality score.
pub fn chunk_analysis(
    ranked_per_class: &BTreeMap<usize, Vec<Candidate>>,
    dprime: &Discriminator,
    oracle: &QualityOracle,
) -> Result<Vec<ChunkReport>> {
    if ranked_per_class.is_empty() {
        return Err(Error::EmptyBatch("chunk_analysis"));
    }
    let expected = CHUNK_SIZE * CHUNK_COUNT;
    for (&class, ranked) in ranked_per_class {
        if ranked.len() != expected {
            return Err(Error::WrongCandidateCount {
                class,
                expected,
                actual: ranked.len(),
            });
        }
    }
    let mut reports = Vec::with_capacity(CHUNK_COUNT);
    for chunk_idx in 0..CHUNK_COUNT {
        let mut images = Vec::new();
        let mut captions = Vec::new();
        let mut labels = Vec::new();
        for ranked in ranked_per_class.values() {
            for c in &ranked[chunk_idx * CHUNK_SIZE..(chunk_idx + 1) * CHUNK_SIZE] {
                images.push(c.image.clone());
                captions.push(c.caption.clone());
                labels.push(dprime.head_label(c.class_id)?);
            }
        }
        let images = Tensor::from_rows(&images)?;
        let captions = Tensor::from_rows(&captions)?;
        let (_, logits) = crate::gan::discriminator_forward(dprime, &images, &captions)?;
        let top1 = topk_accuracy(&logits, &labels, 1)?;
        let top5 = topk_accuracy(&logits, &labels, 5.min(dprime.dims.num_classes))?;
        let quality = quality_score(&images, oracle)?;
        reports.push(ChunkReport {
            chunk: chunk_idx + 1,
            top1,
            top5,
            quality,
        });
    }
    Ok(reports)
}

/// One ablation arm.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Arm {
    /// Conventional classifier pretraining, then n-shot finetuning.
    Finetuning,
    /// Adversarially pretrained discriminator, head swap, n-shot finetuning.
    Initialization,
    /// Initialization plus the self-paced loop updating the classifier only.
    SplD,
    /// Initialization plus the self-paced loop updating classifier and generator.
    SplDg,
}

impl Arm {
    pub const ALL: [Arm; 4] = [Arm::Finetuning, Arm::Initialization, Arm::SplD, Arm::SplDg];

    fn salt(self) -> u64 {
        match self {
            Arm::Finetuning => 1,
            Arm::Initialization => 2,
            Arm::SplD => 3,
            Arm::SplDg => 4,
        }
    }
}

impl fmt::Display for Arm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Arm::Finetuning => "Finetuning",
            Arm::Initialization => "Initialization",
            Arm::SplD => "SPL-D'",
            Arm::SplDg => "SPL-D'G",
        };
        f.write_str(name)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub arm: Arm,
    pub n_shot: usize,
    pub seed: u64,
    pub top1: f64,
    pub top3: f64,
    pub top5: f64,
}

/// Everything `run_ablation` produces beyond the record table: per-iteration
/// evolution logs for the self-paced arms and per-seed chunk reports.
#[derive(Clone, Debug, Default)]
pub struct AblationOutcome {
    pub records: Vec<MetricsRecord>,
    /// Keyed by (arm, n, seed); self-paced arms only.
    pub evolution: BTreeMap<(Arm, usize, u64), Vec<IterationMetrics>>,
    /// Ranked-chunk reports per seed, computed on the 1-shot view with the
    /// post-initialization classifier and iteration-1 candidates.
    pub chunks: Vec<(u64, Vec<ChunkReport>)>,
}

fn eval_record(
    model: &Discriminator,
    test: &[Sample],
    arm: Arm,
    n: usize,
    seed: u64,
) -> Result<MetricsRecord> {
    let images = Tensor::from_rows(&test.iter().map(|s| s.image.clone()).collect::<Vec<_>>())?;
    let labels: Vec<usize> = test
        .iter()
        .map(|s| model.head_label(s.label))
        .collect::<Result<_>>()?;
    let logits = classifier_logits(model, &images)?;
    let classes = model.dims.num_classes;
    Ok(MetricsRecord {
        arm,
        n_shot: n,
        seed,
        top1: topk_accuracy(&logits, &labels, 1)?,
        top3: topk_accuracy(&logits, &labels, 3.min(classes))?,
        top5: topk_accuracy(&logits, &labels, 5.min(classes))?,
    })
}

struct CellOutput {
    n: usize,
    seed: u64,
    records: BTreeMap<Arm, MetricsRecord>,
    evolution: BTreeMap<Arm, Vec<IterationMetrics>>,
    chunks: Option<Vec<ChunkReport>>,
}

/// One (n, seed) cell: every requested arm, sharing the n-shot pool and the
/// initialized classifier so the arms differ only in the studied component.
#[allow(clippy::too_many_arguments)]
fn run_cell(
    dataset: &DatasetSplit,
    generator: &Generator,
    discriminator: &Discriminator,
    finetuning_trunk: &Discriminator,
    arms: &[Arm],
    n: usize,
    seed: u64,
    spl_cfg: &SplConfig,
    oracle: Option<&QualityOracle>,
) -> Result<CellOutput> {
    let cfg = &dataset.config;
    let num_novel = cfg.num_novel_classes;
    let offset = cfg.num_base_classes;
    let view = nshot_view(dataset, n, mix(&[seed, n as u64]))?;
    let mut records = BTreeMap::new();
    let mut evolution = BTreeMap::new();
    let mut chunks = None;

    // conventional-pretraining baseline: same head swap, same finetuning
    if arms.contains(&Arm::Finetuning) {
        let mut rng = substream(mix(&[seed, n as u64, Arm::Finetuning.salt()]), seeding::SALT_ADAPT, 0);
        let mut model = adapt_discriminator(finetuning_trunk, num_novel, offset, &mut rng)?;
        let mut ft_rng =
            substream(mix(&[seed, n as u64, Arm::Finetuning.salt()]), seeding::SALT_INIT_FT, 0);
        init_finetune(&mut model, &view.train_novel, spl_cfg, &mut ft_rng)?;
        records.insert(
            Arm::Finetuning,
            eval_record(&model, &dataset.test, Arm::Finetuning, n, seed)?,
        );
    }

    let needs_init = arms
        .iter()
        .any(|a| matches!(a, Arm::Initialization | Arm::SplD | Arm::SplDg));
    if !needs_init {
        return Ok(CellOutput {
            n,
            seed,
            records,
            evolution,
            chunks,
        });
    }

    // shared initialization for the adversarially pretrained arms
    let mut rng = substream(mix(&[seed, n as u64, Arm::Initialization.salt()]), seeding::SALT_ADAPT, 0);
    let mut dprime = adapt_discriminator(discriminator, num_novel, offset, &mut rng)?;
    let mut ft_rng =
        substream(mix(&[seed, n as u64, Arm::Initialization.salt()]), seeding::SALT_INIT_FT, 0);
    init_finetune(&mut dprime, &view.train_novel, spl_cfg, &mut ft_rng)?;
    if arms.contains(&Arm::Initialization) {
        records.insert(
            Arm::Initialization,
            eval_record(&dprime, &dataset.test, Arm::Initialization, n, seed)?,
        );
    }

    // ranked-chunk snapshot: 1-shot candidates under the initialized model
    if let Some(oracle) = oracle {
        if n == 1 {
            let mut per_class = BTreeMap::new();
            for class in cfg.novel_class_ids() {
                let captions = class_captions(&view.train_novel, class);
                let mut gen_rng =
                    substream(mix(&[seed, class as u64]), seeding::SALT_CHUNKS, class as u64);
                let cands = generate_candidates(
                    generator,
                    class,
                    &captions,
                    spl_cfg.candidates_per_caption,
                    &mut gen_rng,
                )?;
                per_class.insert(class, rank_candidates(&dprime, &cands)?);
            }
            chunks = Some(chunk_analysis(&per_class, &dprime, oracle)?);
        }
    }

    for arm in [Arm::SplD, Arm::SplDg] {
        if !arms.contains(&arm) {
            continue;
        }
        let mut state = SplState::new(
            dprime.clone(),
            generator.clone(),
            view.train_novel.clone(),
            dataset.test.clone(),
            mix(&[seed, n as u64]),
        );
        let cfg_arm = SplConfig {
            update_g: arm == Arm::SplDg,
            ..spl_cfg.clone()
        };
        run_spl(&mut state, &cfg_arm)?;
        records.insert(arm, eval_record(&state.dprime, &dataset.test, arm, n, seed)?);
        evolution.insert(arm, state.metrics);
    }

    Ok(CellOutput {
        n,
        seed,
        records,
        evolution,
        chunks,
    })
}

/// The full ablation grid. Cells are independent and may run concurrently
/// (capped by `threads`); results are assembled in canonical order
/// (arm-major, then n, then seed) regardless of completion order.
#[allow(clippy::too_many_arguments)]
pub fn run_ablation(
    dataset: &DatasetSplit,
    generator: &Generator,
    discriminator: &Discriminator,
    finetuning_trunk: &Discriminator,
    arms: &[Arm],
    n_values: &[usize],
    seeds: &[u64],
    spl_cfg: &SplConfig,
    oracle: Option<&QualityOracle>,
    threads: usize,
) -> Result<AblationOutcome> {
    if arms.is_empty() || n_values.is_empty() || seeds.is_empty() {
        return Err(Error::EmptyBatch("run_ablation"));
    }
    let cells: Vec<(usize, u64)> = n_values
        .iter()
        .flat_map(|&n| seeds.iter().map(move |&s| (n, s)))
        .collect();

    let run = |&(n, seed): &(usize, u64)| -> Result<CellOutput> {
        run_cell(
            dataset,
            generator,
            discriminator,
            finetuning_trunk,
            arms,
            n,
            seed,
            spl_cfg,
            oracle,
        )
    };

    let outputs: Vec<CellOutput> = if threads > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .expect("thread pool");
        pool.install(|| {
            use rayon::prelude::*;
            cells.par_iter().map(run).collect::<Result<Vec<_>>>()
        })?
    } else {
        cells.iter().map(run).collect::<Result<Vec<_>>>()?
    };

    let mut outcome = AblationOutcome::default();
    for arm in arms {
        for output in &outputs {
            if let Some(record) = output.records.get(arm) {
                outcome.records.push(record.clone());
            }
            if let Some(metrics) = output.evolution.get(arm) {
                outcome
                    .evolution
                    .insert((*arm, output.n, output.seed), metrics.clone());
            }
        }
    }
    for output in &outputs {
        if let Some(reports) = &output.chunks {
            outcome.chunks.push((output.seed, reports.clone()));
        }
    }
    outcome.chunks.sort_by_key(|(seed, _)| *seed);
    Ok(outcome)
}

/// Ablation results as CSV: header `arm,n,seed,top1,top3,top5`.
pub fn ablation_csv(records: &[MetricsRecord]) -> String {
    let mut out = String::from("arm,n,seed,top1,top3,top5\n");
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.arm, r.n_shot, r.seed, r.top1, r.top3, r.top5
        ));
    }
    out
}

/// Chunk reports as CSV: header `chunk,top1,top5,quality`.
pub fn chunk_csv(reports: &[ChunkReport]) -> String {
    let mut out = String::from("chunk,top1,top5,quality\n");
    for r in reports {
        out.push_str(&format!("{},{},{},{}\n", r.chunk, r.top1, r.top5, r.quality));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_world, sample_dataset, WorldConfig};

    #[test]
    fn topk_is_one_at_full_k_and_for_perfect_logits() {
        let logits = Tensor::from_values(&[2, 4], vec![9.0, 1.0, 2.0, 3.0, 0.0, 0.1, 0.2, 8.0])
            .unwrap();
        let labels = [0usize, 3];
        assert_eq!(topk_accuracy(&logits, &labels, 4).unwrap(), 1.0);
        assert_eq!(topk_accuracy(&logits, &labels, 1).unwrap(), 1.0);
    }

    #[test]
    fn topk_breaks_ties_by_ascending_class_id() {
        // all-equal logits: the label is in the top-k iff label < k
        let logits = Tensor::from_values(&[1, 4], vec![0.5, 0.5, 0.5, 0.5]).unwrap();
        assert_eq!(topk_accuracy(&logits, &[0], 1).unwrap(), 1.0);
        assert_eq!(topk_accuracy(&logits, &[1], 1).unwrap(), 0.0);
        assert_eq!(topk_accuracy(&logits, &[1], 2).unwrap(), 1.0);
        assert_eq!(topk_accuracy(&logits, &[3], 3).unwrap(), 0.0);
    }

    #[test]
    fn topk_is_monotone_in_k() {
        let mut rng = substream(5, 0xe5a1, 0);
        let values: Vec<f64> = (0..50 * 8).map(|_| rng.random_range(-1.0..1.0)).collect();
        let logits = Tensor::from_values(&[50, 8], values).unwrap();
        let labels: Vec<usize> = (0..50).map(|_| rng.random_range(0..8)).collect();
        let mut prev = 0.0;
        for k in 1..=8 {
            let acc = topk_accuracy(&logits, &labels, k).unwrap();
            assert!(acc >= prev, "top-{k} dropped below top-{}", k - 1);
            prev = acc;
        }
        assert_eq!(prev, 1.0);
    }

    #[test]
    fn topk_on_random_logits_matches_chance() {
        let mut rng = substream(11, 0xe5a1, 1);
        let n = 10_000;
        let values: Vec<f64> = (0..n * 10).map(|_| rng.random_range(-1.0..1.0)).collect();
        let logits = Tensor::from_values(&[n, 10], values).unwrap();
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..10)).collect();
        let acc = topk_accuracy(&logits, &labels, 5).unwrap();
        assert!((acc - 0.5).abs() < 0.05, "random top-5 of 10 was {acc}");
    }

    #[test]
    fn topk_rejects_empty_and_oversized_k() {
        let logits = Tensor::from_values(&[1, 2], vec![0.0, 1.0]).unwrap();
        assert!(matches!(
            topk_accuracy(&logits, &[], 1),
            Err(Error::EmptyBatch(_))
        ));
        assert!(topk_accuracy(&logits, &[0], 3).is_err());
    }

    #[test]
    fn quality_score_closed_forms() {
        // a judge that cannot tell images apart: score 1
        let uniform = Tensor::filled(&[6, 4], 0.25);
        assert!((score_from_probs(&uniform).unwrap() - 1.0).abs() < 1e-12);
        // confident predictions evenly covering C classes: score C
        let mut one_hot = vec![0.0; 4 * 4];
        for i in 0..4 {
            one_hot[i * 4 + i] = 1.0;
        }
        let one_hot = Tensor::from_values(&[4, 4], one_hot).unwrap();
        assert!((score_from_probs(&one_hot).unwrap() - 4.0).abs() < 1e-12);
    }

    #[test]
    fn quality_score_matches_brute_force_and_ignores_order() {
        let mut rng = substream(3, 0xe5a1, 2);
        let rows = 7;
        let cols = 5;
        let mut values = Vec::new();
        for _ in 0..rows {
            let mut row: Vec<f64> = (0..cols).map(|_| rng.random_range(0.01..1.0)).collect();
            let sum: f64 = row.iter().sum();
            row.iter_mut().for_each(|v| *v /= sum);
            values.extend(row);
        }
        let probs = Tensor::from_values(&[rows, cols], values.clone()).unwrap();
        let got = score_from_probs(&probs).unwrap();

        // brute force straight from the definition
        let mut mean = vec![0.0; cols];
        for r in 0..rows {
            for c in 0..cols {
                mean[c] += values[r * cols + c] / rows as f64;
            }
        }
        let mut kl = 0.0;
        for r in 0..rows {
            for c in 0..cols {
                let p = values[r * cols + c];
                kl += p * (p / mean[c]).ln();
            }
        }
        let expected = (kl / rows as f64).exp();
        assert!((got - expected).abs() < 1e-12);

        // permutation invariance
        let mut perm_values = Vec::new();
        for r in (0..rows).rev() {
            perm_values.extend_from_slice(&values[r * cols..(r + 1) * cols]);
        }
        let perm = Tensor::from_values(&[rows, cols], perm_values).unwrap();
        assert_eq!(score_from_probs(&perm).unwrap(), got);
    }

    #[test]
    fn oracle_reaches_floor_on_a_solvable_world_and_is_deterministic() {
        let cfg = WorldConfig {
            num_base_classes: 6,
            num_novel_classes: 4,
            caption_dim: 8,
            image_dim: 16,
            captions_per_image: 3,
            samples_per_base_class: 12,
            samples_per_novel_train: 8,
            samples_per_novel_test: 8,
            ..WorldConfig::with_seed(17)
        };
        let split = sample_dataset(&make_world(&cfg).unwrap());
        let a = train_quality_oracle(&split, 2).unwrap();
        let b = train_quality_oracle(&split, 2).unwrap();
        assert!(a.held_out_top1 >= ORACLE_FLOOR);
        assert_eq!(a.fingerprint(), b.fingerprint());
        assert_eq!(a.held_out_top1, b.held_out_top1);
    }

    #[test]
    fn arm_names_round_trip_through_serde() {
        let json = serde_json::to_string(&Arm::ALL.to_vec()).unwrap();
        assert_eq!(json, r#"["finetuning","initialization","spl-d","spl-dg"]"#);
        let back: Vec<Arm> = serde_json::from_str(&json).unwrap();
        assert_eq!(back, Arm::ALL.to_vec());
        assert_eq!(Arm::SplDg.to_string(), "SPL-D'G");
    }

    #[test]
    fn csv_headers_match_the_interface() {
        assert!(ablation_csv(&[]).starts_with("arm,n,seed,top1,top3,top5\n"));
        assert!(chunk_csv(&[]).starts_with("chunk,top1,top5,quality\n"));
    }
}
