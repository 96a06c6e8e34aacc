//! Seeded producer pool for training minibatches.
//!
//! Batch `i` of an epoch is built by worker `i % workers` from that worker's
//! own ChaCha stream, and the consumer reads the worker queues round-robin.
//! The batch sequence therefore depends only on the seed, the epoch and the
//! worker count, never on thread timing.

use std::sync::mpsc;
use std::thread;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::augment::{augment, AugmentConfig};
use super::patch::sample_patch;
use super::volume::{Case, LabelVolume};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Batches each worker may hold ahead of the consumer.
pub const QUEUE_DEPTH: usize = 2;

/// A stacked minibatch.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    /// `[B, 4, P, P, P]`
    pub image: Tensor<f32>,
    pub labels: Vec<LabelVolume>,
    /// Index of the source each sample was drawn from.
    pub sources: Vec<usize>,
}

/// What one minibatch is made of: `per_source` samples from each source.
///
/// Plain training uses a single source with `per_source = batch_size`;
/// cotraining uses one source per dataset with one sample each.
#[derive(Clone, Debug)]
pub struct BatchPlan<'a> {
    pub sources: Vec<&'a [Case]>,
    pub per_source: usize,
    pub patch: [usize; 3],
    pub augment: AugmentConfig,
}

impl BatchPlan<'_> {
    pub fn batch_size(&self) -> usize {
        self.sources.len() * self.per_source
    }

    pub fn validate(&self) -> Result<()> {
        if self.sources.is_empty() || self.per_source == 0 {
            return Err(Error::Config("a batch needs at least one sample".into()));
        }
        for (s, cases) in self.sources.iter().enumerate() {
            if cases.is_empty() {
                return Err(Error::Config(format!("training source {s} has no cases")));
            }
            if let Some(c) = cases.iter().find(|c| c.label.is_none()) {
                return Err(Error::Value(format!(
                    "training case `{}` has no reference label",
                    c.id
                )));
            }
        }
        self.augment.validate()
    }

    /// Draws one batch from `rng`.
    pub fn draw(&self, rng: &mut ChaCha8Rng) -> Result<Batch> {
        let [p0, p1, p2] = self.patch;
        let mut image = Vec::with_capacity(self.batch_size() * 4 * p0 * p1 * p2);
        let mut labels = Vec::with_capacity(self.batch_size());
        let mut sources = Vec::with_capacity(self.batch_size());
        for (s, cases) in self.sources.iter().enumerate() {
            for _ in 0..self.per_source {
                let case = &cases[rand::Rng::random_range(rng, 0..cases.len())];
                let p = augment(&sample_patch(case, self.patch, rng)?, &self.augment, rng)?;
                image.extend_from_slice(p.image.data());
                labels.push(p.label.expect("validated labels"));
                sources.push(s);
            }
        }
        Ok(Batch {
            image: Tensor::new(&[self.batch_size(), 4, p0, p1, p2], image)?,
            labels,
            sources,
        })
    }
}

/// The rng stream of `worker` during `epoch`.
pub fn worker_rng(seed: u64, epoch: usize, worker: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((epoch as u64) << 16) | worker as u64);
    rng
}

/// Produces `count` batches for `epoch` and hands them to `consume` in order.
///
/// `workers == 0` builds batches on the calling thread with the worker-0
/// stream, giving the same sequence as `workers == 1`. An error from either
/// side stops the pool and is returned.
pub fn for_each_batch<F>(
    plan: &BatchPlan<'_>,
    count: usize,
    workers: usize,
    seed: u64,
    epoch: usize,
    mut consume: F,
) -> Result<()>
where
    F: FnMut(usize, Batch) -> Result<()>,
{
    plan.validate()?;
    if workers == 0 {
        let mut rng = worker_rng(seed, epoch, 0);
        for i in 0..count {
            consume(i, plan.draw(&mut rng)?)?;
        }
        return Ok(());
    }
    thread::scope(|scope| {
        let mut queues = Vec::with_capacity(workers);
        for w in 0..workers {
            let (tx, rx) = mpsc::sync_channel::<Result<Batch>>(QUEUE_DEPTH);
            queues.push(rx);
            scope.spawn(move || {
                let mut rng = worker_rng(seed, epoch, w);
                for _ in (w..count).step_by(workers) {
                    let batch = plan.draw(&mut rng);
                    let failed = batch.is_err();
                    if tx.send(batch).is_err() || failed {
                        break;
                    }
                }
            });
        }
        for i in 0..count {
            let batch = queues[i % workers]
                .recv()
                .map_err(|_| Error::Contract(format!("batch producer {} exited early", i % workers)))??;
            consume(i, batch)?;
        }
        Ok(())
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth::{synth_cohort, SynthConfig};

    fn collect(plan: &BatchPlan<'_>, workers: usize, seed: u64) -> Vec<Batch> {
        let mut out = Vec::new();
        for_each_batch(plan, 5, workers, seed, 0, |_, b| {
            out.push(b);
            Ok(())
        })
        .unwrap();
        out
    }

    #[test]
    fn sequence_depends_on_seed_and_workers_only() {
        let cases = synth_cohort(3, &SynthConfig::cube(16), 2).unwrap();
        let plan = BatchPlan {
            sources: vec![&cases],
            per_source: 2,
            patch: [8; 3],
            augment: AugmentConfig::default(),
        };
        assert_eq!(collect(&plan, 0, 4), collect(&plan, 1, 4));
        assert_eq!(collect(&plan, 3, 4), collect(&plan, 3, 4));
        assert_ne!(collect(&plan, 1, 4), collect(&plan, 1, 5));
        let b = &collect(&plan, 2, 4)[0];
        assert_eq!(b.image.shape(), &[2, 4, 8, 8, 8]);
    }

    #[test]
    fn one_sample_per_source() {
        let a = synth_cohort(2, &SynthConfig::cube(16), 1).unwrap();
        let b = synth_cohort(2, &SynthConfig::cube(16), 9).unwrap();
        let plan = BatchPlan {
            sources: vec![&a, &b],
            per_source: 1,
            patch: [8; 3],
            augment: AugmentConfig::disabled(),
        };
        for batch in collect(&plan, 2, 0) {
            assert_eq!(batch.sources, vec![0, 1]);
        }
    }

    #[test]
    fn consumer_error_stops_the_pool() {
        let cases = synth_cohort(1, &SynthConfig::cube(16), 2).unwrap();
        let plan = BatchPlan {
            sources: vec![&cases],
            per_source: 1,
            patch: [8; 3],
            augment: AugmentConfig::disabled(),
        };
        let err = for_each_batch(&plan, 50, 2, 0, 0, |i, _| {
            if i == 3 {
                Err(Error::Value("stop".into()))
            } else {
                Ok(())
            }
        });
        assert!(matches!(err, Err(Error::Value(_))));
    }
}
