//! Mini-batch samplers over the train split.
//!
//! Both samplers are deterministic per (seed, epoch): re-asking for the same
//! epoch reproduces the same batch sequence.

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{mix_seed, Dataset, SplitTag};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SamplerKind {
    InstanceBalanced,
    ClassBalanced,
}

impl SamplerKind {
    pub fn as_str(self) -> &'static str {
        match self {
            SamplerKind::InstanceBalanced => "instance_balanced",
            SamplerKind::ClassBalanced => "class_balanced",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "instance_balanced" => SamplerKind::InstanceBalanced,
            "class_balanced" => SamplerKind::ClassBalanced,
            other => return Err(Error::InvalidConfig(format!("unknown sampler '{other}'"))),
        })
    }
}

/// A shuffled pass over every train index, chunked into batches; the final
/// short batch is kept.
#[derive(Debug, Clone)]
pub struct InstanceBalancedSampler {
    indices: Vec<usize>,
    batch_size: usize,
    seed: u64,
}

impl InstanceBalancedSampler {
    pub fn new(dataset: &Dataset, batch_size: usize, seed: u64) -> Result<Self> {
        let indices = dataset.indices(SplitTag::Train);
        if batch_size == 0 || batch_size > indices.len() {
            return Err(Error::InvalidConfig(format!(
                "batch_size {} out of range 1..={}",
                batch_size,
                indices.len()
            )));
        }
        Ok(InstanceBalancedSampler { indices, batch_size, seed })
    }

    pub fn epoch_batches(&self, epoch: u64) -> Vec<Vec<usize>> {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(self.seed, epoch));
        let mut perm = self.indices.clone();
        perm.shuffle(&mut rng);
        perm.chunks(self.batch_size).map(|c| c.to_vec()).collect()
    }
}

/// Draw a class uniformly, then an instance uniformly within the class (with
/// replacement). One epoch makes as many draws as there are train samples.
#[derive(Debug, Clone)]
pub struct ClassBalancedSampler {
    per_class: Vec<Vec<usize>>,
    draws: usize,
    batch_size: usize,
    seed: u64,
}

impl ClassBalancedSampler {
    pub fn new(dataset: &Dataset, batch_size: usize, seed: u64) -> Result<Self> {
        let train = dataset.indices(SplitTag::Train);
        if batch_size == 0 || batch_size > train.len() {
            return Err(Error::InvalidConfig(format!(
                "batch_size {} out of range 1..={}",
                batch_size,
                train.len()
            )));
        }
        let mut per_class = vec![Vec::new(); dataset.classes()];
        for i in train.iter().copied() {
            per_class[dataset.label(i)].push(i);
        }
        if let Some(c) = per_class.iter().position(Vec::is_empty) {
            return Err(Error::InvalidConfig(format!("class {c} has no train samples")));
        }
        Ok(ClassBalancedSampler { per_class, draws: train.len(), batch_size, seed })
    }

    pub fn epoch_batches(&self, epoch: u64) -> Vec<Vec<usize>> {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(self.seed, epoch));
        let classes = self.per_class.len();
        let mut flat = Vec::with_capacity(self.draws);
        for _ in 0..self.draws {
            let class = rng.gen_range(0..classes);
            let pool = &self.per_class[class];
            flat.push(pool[rng.gen_range(0..pool.len())]);
        }
        flat.chunks(self.batch_size).map(|c| c.to_vec()).collect()
    }
}

/// Kind-dispatched sampler handle used by the trainer.
#[derive(Debug, Clone)]
pub enum Sampler {
    Instance(InstanceBalancedSampler),
    Class(ClassBalancedSampler),
}

impl Sampler {
    pub fn new(kind: SamplerKind, dataset: &Dataset, batch_size: usize, seed: u64) -> Result<Self> {
        Ok(match kind {
            SamplerKind::InstanceBalanced => {
                Sampler::Instance(InstanceBalancedSampler::new(dataset, batch_size, seed)?)
            }
            SamplerKind::ClassBalanced => {
                Sampler::Class(ClassBalancedSampler::new(dataset, batch_size, seed)?)
            }
        })
    }

    pub fn epoch_batches(&self, epoch: u64) -> Vec<Vec<usize>> {
        match self {
            Sampler::Instance(s) => s.epoch_batches(epoch),
            Sampler::Class(s) => s.epoch_batches(epoch),
        }
    }
}
