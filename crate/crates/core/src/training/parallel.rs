//! Data-parallel training: full weight replicas per worker, gradient
//! averaging at a barrier, one optimizer step on the master copy.

use std::collections::BTreeMap;

use super::{batch_gradients, Adam, Batch};
use crate::error::{Error, Result};
use crate::model::SegModel;

type ShardResult = Result<(f64, BTreeMap<String, Vec<f64>>)>;

pub struct DataParallel {
    replicas: Vec<SegModel>,
}

impl DataParallel {
    /// Spawns `workers` independent replicas of `model`.
    pub fn setup(model: &SegModel, workers: usize) -> Result<Self> {
        if workers == 0 {
            return Err(Error::Config("worker count must be at least 1".into()));
        }
        Ok(DataParallel {
            replicas: (0..workers).map(|_| model.deep_clone()).collect(),
        })
    }

    pub fn workers(&self) -> usize {
        self.replicas.len()
    }

    /// One synchronous step: shard the batch, compute shard gradients in
    /// parallel, average them weighted by shard size, update `master` and
    /// broadcast the new weights. Returns the batch mean loss.
    pub fn step(&mut self, master: &mut SegModel, batch: &Batch, optimizer: &mut Adam, lr: f64) -> Result<f64> {
        let n = batch.len();
        let shards = batch.shards(self.replicas.len());
        let results: Vec<ShardResult> = std::thread::scope(|s| {
            let handles: Vec<_> = self
                .replicas
                .iter()
                .zip(&shards)
                .map(|(replica, shard)| s.spawn(move || batch_gradients(replica, shard)))
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("worker thread panicked"))
                .collect()
        });
        let mut loss = 0.0;
        let mut avg: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        for (res, shard) in results.into_iter().zip(&shards) {
            let (l, grads) = res?;
            let w = shard.len() as f64 / n as f64;
            loss += w * l;
            for (name, g) in grads {
                let acc = avg.entry(name).or_insert_with(|| vec![0.0; g.len()]);
                acc.iter_mut().zip(&g).for_each(|(a, b)| *a += w * b);
            }
        }
        optimizer.step(master.params_mut(), &avg, lr);
        self.sync(master);
        Ok(loss)
    }

    /// Copies trainable weights from `master` into every replica.
    pub fn sync(&mut self, master: &SegModel) {
        for r in &mut self.replicas {
            for (name, p) in master.params().iter() {
                if p.trainable() {
                    r.params_mut().update(name, p.tensor().data().to_vec());
                }
            }
        }
    }

    pub fn in_sync_with(&self, master: &SegModel) -> bool {
        let want = master.params().snapshot();
        self.replicas.iter().all(|r| r.params().snapshot() == want)
    }

    /// Releases the replicas.
    pub fn teardown(self) {
        drop(self.replicas);
    }
}
