//! Checkpoint serialization for the representation-learning phase.
//!
//! The document stores every tensor and optimizer slot at full round-trip
//! precision plus the training stream's exact position, so loading a mid-run
//! checkpoint and resuming reproduces the uninterrupted run bit for bit.

use std::fs;
use std::path::Path;

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gan::{
    Discriminator, DiscriminatorDims, EpochLog, GanTrainConfig, Generator, GeneratorDims,
    PretrainState,
};
use crate::optim::ParamSet;
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u32 = 1;

/// Exact position of a ChaCha8 stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos_hi: u64,
    pub word_pos_lo: u64,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        let word_pos = rng.get_word_pos();
        RngState {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos_hi: (word_pos >> 64) as u64,
            word_pos_lo: word_pos as u64,
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(((self.word_pos_hi as u128) << 64) | self.word_pos_lo as u128);
        rng
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

/// Optimizer slots for one named tensor (shapes follow the tensor).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SlotEntry {
    pub name: String,
    pub momentum: Vec<f64>,
    pub adam_m: Vec<f64>,
    pub adam_v: Vec<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckpointConfig {
    pub gan: GanTrainConfig,
    pub generator_dims: GeneratorDims,
    pub discriminator_dims: DiscriminatorDims,
    pub seed: u64,
    pub epochs_done: usize,
    pub generator_step: u64,
    pub discriminator_step: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub config: CheckpointConfig,
    pub tensors: Vec<NamedTensor>,
    pub optimizer_slots: Vec<SlotEntry>,
    pub rng_state: RngState,
    pub training_log: Vec<EpochLog>,
}

fn dump_params(set: &ParamSet, prefix: &str, tensors: &mut Vec<NamedTensor>, slots: &mut Vec<SlotEntry>) {
    for (name, entry) in set.iter() {
        let full = format!("{prefix}{name}");
        tensors.push(NamedTensor {
            name: full.clone(),
            shape: entry.value.shape().to_vec(),
            values: entry.value.values().to_vec(),
        });
        slots.push(SlotEntry {
            name: full,
            momentum: entry.momentum.values().to_vec(),
            adam_m: entry.adam_m.values().to_vec(),
            adam_v: entry.adam_v.values().to_vec(),
        });
    }
}

fn load_params(
    set: &mut ParamSet,
    prefix: &str,
    tensors: &[NamedTensor],
    slots: &[SlotEntry],
) -> Result<()> {
    for t in tensors.iter().filter(|t| t.name.starts_with(prefix)) {
        let name = &t.name[prefix.len()..];
        let value = Tensor::from_values(&t.shape, t.values.clone())?;
        set.set_value(name, value.clone())?;
        let slot = slots
            .iter()
            .find(|s| s.name == t.name)
            .ok_or_else(|| Error::UnknownNode {
                name: t.name.clone(),
            })?;
        set.set_slots(
            name,
            Tensor::from_values(&t.shape, slot.momentum.clone())?,
            Tensor::from_values(&t.shape, slot.adam_m.clone())?,
            Tensor::from_values(&t.shape, slot.adam_v.clone())?,
        )?;
    }
    Ok(())
}

impl Checkpoint {
    pub fn from_state(state: &PretrainState, cfg: &GanTrainConfig) -> Self {
        let mut tensors = Vec::new();
        let mut slots = Vec::new();
        dump_params(&state.generator.params, "g.", &mut tensors, &mut slots);
        dump_params(&state.discriminator.params, "d.", &mut tensors, &mut slots);
        Checkpoint {
            format_version: FORMAT_VERSION,
            config: CheckpointConfig {
                gan: cfg.clone(),
                generator_dims: state.generator.dims,
                discriminator_dims: state.discriminator.dims,
                seed: state.seed,
                epochs_done: state.epochs_done,
                generator_step: state.generator.params.step(),
                discriminator_step: state.discriminator.params.step(),
            },
            tensors,
            optimizer_slots: slots,
            rng_state: RngState::capture(&state.rng),
            training_log: state.log.clone(),
        }
    }

    pub fn into_state(self) -> Result<PretrainState> {
        if self.format_version != FORMAT_VERSION {
            return Err(Error::BadCheckpointVersion {
                found: self.format_version,
                expected: FORMAT_VERSION,
            });
        }
        // fresh models give the right parameter names and shapes; every
        // tensor is then overwritten from the file
        let mut scratch = ChaCha8Rng::seed_from_u64(0);
        let mut generator = Generator::new(self.config.generator_dims, &mut scratch);
        let mut discriminator = Discriminator::new(self.config.discriminator_dims, &mut scratch);
        load_params(&mut generator.params, "g.", &self.tensors, &self.optimizer_slots)?;
        load_params(&mut discriminator.params, "d.", &self.tensors, &self.optimizer_slots)?;
        generator.params.set_step(self.config.generator_step);
        discriminator.params.set_step(self.config.discriminator_step);
        Ok(PretrainState {
            generator,
            discriminator,
            epochs_done: self.config.epochs_done,
            log: self.training_log,
            seed: self.config.seed,
            rng: self.rng_state.restore(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string(self).expect("checkpoint serialization cannot fail");
        fs::write(path, json).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let text = fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        serde_json::from_str(&text).map_err(|source| Error::Json {
            path: path.to_path_buf(),
            source,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_world, sample_dataset, WorldConfig};
    use crate::gan::{pretrain_init, pretrain_run};

    fn tiny() -> (crate::data::DatasetSplit, GanTrainConfig) {
        let cfg = WorldConfig {
            num_base_classes: 4,
            num_novel_classes: 2,
            caption_dim: 5,
            image_dim: 10,
            captions_per_image: 3,
            samples_per_base_class: 6,
            samples_per_novel_train: 3,
            samples_per_novel_test: 3,
            ..WorldConfig::with_seed(9)
        };
        let split = sample_dataset(&make_world(&cfg).unwrap());
        let gan = GanTrainConfig {
            epochs: 4,
            hidden_dim: 12,
            feature_dim: 6,
            noise_dim: 3,
            ..GanTrainConfig::default()
        };
        (split, gan)
    }

    #[test]
    fn rng_state_round_trip_preserves_the_stream() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(1234);
        rng.set_stream(7);
        let _: [u64; 5] = rng.random();
        let state = RngState::capture(&rng);
        let mut restored = state.restore();
        let a: [u64; 8] = rng.random();
        let b: [u64; 8] = restored.random();
        assert_eq!(a, b);
    }

    #[test]
    fn resume_reproduces_the_uninterrupted_run_bit_for_bit() {
        let (split, gan) = tiny();

        let straight = {
            let mut s = pretrain_init(&split, &gan, 5).unwrap();
            pretrain_run(&mut s, &split, &gan, 4).unwrap();
            s
        };

        let resumed = {
            let mut s = pretrain_init(&split, &gan, 5).unwrap();
            pretrain_run(&mut s, &split, &gan, 2).unwrap();
            let ckpt = Checkpoint::from_state(&s, &gan);
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("ckpt.json");
            ckpt.save(&path).unwrap();
            let mut s2 = Checkpoint::load(&path).unwrap().into_state().unwrap();
            pretrain_run(&mut s2, &split, &gan, 4).unwrap();
            s2
        };

        assert!(straight
            .generator
            .params
            .values_bit_equal(&resumed.generator.params));
        assert!(straight
            .discriminator
            .params
            .values_bit_equal(&resumed.discriminator.params));
        assert_eq!(straight.log, resumed.log);
        assert_eq!(
            RngState::capture(&straight.rng),
            RngState::capture(&resumed.rng)
        );
        // and the serialized documents are byte-identical
        let a = serde_json::to_string(&Checkpoint::from_state(&straight, &gan)).unwrap();
        let b = serde_json::to_string(&Checkpoint::from_state(&resumed, &gan)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn version_mismatch_is_rejected() {
        let (split, gan) = tiny();
        let state = pretrain_init(&split, &gan, 1).unwrap();
        let mut ckpt = Checkpoint::from_state(&state, &gan);
        ckpt.format_version = 99;
        assert!(matches!(
            ckpt.into_state(),
            Err(Error::BadCheckpointVersion { found: 99, .. })
        ));
    }
}
