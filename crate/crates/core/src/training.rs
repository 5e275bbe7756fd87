//! Data partitioning and the multi-format training loop.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::{multitask_step, AdamConfig, FormatBatch, OptimizerState};
use crate::corpus::ScoredExample;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams};
use crate::packing::TaskFormat;

/// Seeded shuffle, then contiguous thirds bound to `Ref`, `Src` and
/// `SrcRef` in that order. Earlier thirds take the remainder.
pub fn partition_three_way<T: Clone>(items: &[T], seed: u64) -> Result<[Vec<T>; 3]> {
    if items.len() < 3 {
        return Err(Error::CorpusTooSmall(format!(
            "{} examples cannot fill three partitions",
            items.len()
        )));
    }
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (base, extra) = (items.len() / 3, items.len() % 3);
    let mut parts: [Vec<T>; 3] = Default::default();
    let mut cursor = 0;
    for (k, part) in parts.iter_mut().enumerate() {
        let size = base + usize::from(k < extra);
        *part = order[cursor..cursor + size].iter().map(|&i| items[i].clone()).collect();
        cursor += size;
    }
    Ok(parts)
}

/// Number of held-out examples: `fraction·n` rounded up, at least `min`,
/// and never more than half the corpus.
pub fn dev_size(n: usize, fraction: f64, min: usize) -> usize {
    ((fraction * n as f64).ceil() as usize).max(min).min(n / 2)
}

/// Seeded `(train, dev)` split.
pub fn dev_split<T: Clone>(items: &[T], seed: u64, fraction: f64, min: usize) -> (Vec<T>, Vec<T>) {
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0xde75_0000));
    let held = dev_size(items.len(), fraction, min);
    let mut dev_idx = order[..held].to_vec();
    let mut train_idx = order[held..].to_vec();
    dev_idx.sort_unstable();
    train_idx.sort_unstable();
    (
        train_idx.iter().map(|&i| items[i].clone()).collect(),
        dev_idx.iter().map(|&i| items[i].clone()).collect(),
    )
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainOptions {
    pub steps: u64,
    /// Examples per format per step.
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub seed: u64,
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepLog {
    pub step: u64,
    pub loss_ref: f64,
    pub loss_src: f64,
    pub loss_src_ref: f64,
    pub loss: f64,
    pub grad_norm: f64,
    pub lr: f64,
    pub wall_ms: f64,
}

/// Cycles through one partition, reshuffling at every epoch boundary.
struct EpochSampler {
    order: Vec<usize>,
    cursor: usize,
}

impl EpochSampler {
    fn new(len: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut order: Vec<usize> = (0..len).collect();
        order.shuffle(rng);
        Self { order, cursor: 0 }
    }

    fn next_batch(&mut self, size: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            if self.cursor == self.order.len() {
                self.order.shuffle(rng);
                self.cursor = 0;
            }
            out.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        out
    }
}

/// Partitions `data` three ways and runs `opts.steps` summed-loss updates,
/// calling `on_step` after each.
pub fn train(
    params: &mut ModelParams,
    config: &ModelConfig,
    data: &[ScoredExample],
    opts: &TrainOptions,
    mut on_step: impl FnMut(&StepLog) -> Result<()>,
) -> Result<()> {
    if opts.batch_size == 0 {
        return Err(Error::EmptyBatch("batch_size is 0".into()));
    }
    params.check_shapes(config)?;
    let parts = partition_three_way(data, opts.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x7a1e_0000);
    let mut samplers: Vec<EpochSampler> = parts.iter().map(|p| EpochSampler::new(p.len(), &mut rng)).collect();
    let mut state = OptimizerState::new(opts.adam, params.tensors().iter().map(|(_, m)| m.shape()));
    let started = Instant::now();
    for step in 1..=opts.steps {
        let picks: Vec<Vec<usize>> = samplers
            .iter_mut()
            .map(|s| s.next_batch(opts.batch_size, &mut rng))
            .collect();
        let batches: Vec<FormatBatch<'_>> = TaskFormat::ALL
            .iter()
            .zip(&parts)
            .zip(&picks)
            .map(|((&format, part), idx)| FormatBatch::new(format, idx.iter().map(|&i| &part[i]).collect()))
            .collect();
        let losses = multitask_step(params, config, &batches, &mut state)?;
        let log = StepLog {
            step,
            loss_ref: losses.ref_loss.unwrap_or(0.0),
            loss_src: losses.src_loss.unwrap_or(0.0),
            loss_src_ref: losses.src_ref_loss.unwrap_or(0.0),
            loss: losses.total(),
            grad_norm: losses.grad_norm,
            lr: opts.adam.lr,
            wall_ms: started.elapsed().as_secs_f64() * 1e3,
        };
        on_step(&log)?;
    }
    Ok(())
}
