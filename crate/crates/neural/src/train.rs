use std::fs;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use ambienc_core::array::QuantizedGeometry;
use ambienc_core::dataset::{stream_rng, BatchLoader, Example};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{NnError, Result};
use crate::network::{spectrogram_to_tensor, Network};
use crate::optim::Adam;
use crate::real::Real;
use crate::tensor::Tensor;

/// Dropout masks draw from this stream family.
const DROPOUT_STREAM: u64 = 0xd0_0000_0000;

/// One supervised pair in network layout.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainExample<T> {
    pub id: String,
    pub x: Tensor<T>,
    pub geometry: QuantizedGeometry,
    pub target: Tensor<T>,
}

impl<T: Real> TrainExample<T> {
    pub fn from_example(ex: &Example) -> Self {
        Self {
            id: format!("{}/{}/{}", ex.scene_id, ex.array_id, ex.variant),
            x: spectrogram_to_tensor(&ex.x),
            geometry: ex.quantized.clone(),
            target: spectrogram_to_tensor(&ex.reference),
        }
    }
}

/// Source of training batches.
pub trait BatchProvider<T>: Send {
    /// Examples for `step`; must be deterministic given the provider's seed.
    fn batch(&mut self, step: usize, size: usize) -> Result<Vec<Arc<TrainExample<T>>>>;
}

/// Fixed examples held in memory, reshuffled every epoch.
#[derive(Debug, Clone)]
pub struct InMemory<T> {
    examples: Vec<Arc<TrainExample<T>>>,
    seed: u64,
    order: Vec<usize>,
    cursor: usize,
    epoch: u64,
}

impl<T: Real> InMemory<T> {
    pub fn new(examples: Vec<TrainExample<T>>, seed: u64) -> Result<Self> {
        if examples.is_empty() {
            return Err(NnError::Input("no training examples".into()));
        }
        let mut p = Self {
            examples: examples.into_iter().map(Arc::new).collect(),
            seed,
            order: Vec::new(),
            cursor: 0,
            epoch: 0,
        };
        p.reshuffle();
        Ok(p)
    }

    fn reshuffle(&mut self) {
        self.order = (0..self.examples.len()).collect();
        self.order.shuffle(&mut stream_rng(self.seed, self.epoch));
        self.cursor = 0;
    }

    pub fn examples(&self) -> &[Arc<TrainExample<T>>] {
        &self.examples
    }
}

impl<T: Real> BatchProvider<T> for InMemory<T> {
    fn batch(&mut self, _step: usize, size: usize) -> Result<Vec<Arc<TrainExample<T>>>> {
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            if self.cursor == self.order.len() {
                self.epoch += 1;
                self.reshuffle();
            }
            out.push(self.examples[self.order[self.cursor]].clone());
            self.cursor += 1;
        }
        Ok(out)
    }
}

/// Streams examples from a dataset on disk; epochs roll over as needed.
pub struct FromLoader {
    loader: BatchLoader,
}

impl FromLoader {
    pub fn new(loader: BatchLoader) -> Result<Self> {
        if loader.is_empty() {
            return Err(NnError::Input("the training split has no examples".into()));
        }
        Ok(Self { loader })
    }
}

impl<T: Real> BatchProvider<T> for FromLoader {
    fn batch(&mut self, _step: usize, size: usize) -> Result<Vec<Arc<TrainExample<T>>>> {
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            match self.loader.next_batch(size - out.len())? {
                Some(b) => out.extend(b.iter().map(|e| Arc::new(TrainExample::from_example(e)))),
                None => {
                    let next = self.loader.epoch() + 1;
                    self.loader.start_epoch(next);
                }
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch: usize,
    pub steps: usize,
    pub seed: u64,
    /// Log every this many steps; 0 disables logging.
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            batch: 32,
            steps: 1000,
            seed: 0,
            log_every: 10,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 {
            return Err(NnError::Config("batch size must be at least 1".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(NnError::Config(format!("learning rate {} must be finite and non-negative", self.lr)));
        }
        Ok(())
    }
}

/// Mean training loss per step, recorded before that step's update.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LossTrace {
    pub losses: Vec<f64>,
}

impl LossTrace {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,loss\n");
        for (i, l) in self.losses.iter().enumerate() {
            s.push_str(&format!("{},{l}\n", i + 1));
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path)?;
        f.write_all(self.to_csv().as_bytes())?;
        Ok(())
    }

    /// Mean over a window of steps at the start and at the end.
    pub fn start_end(&self, window: usize) -> Option<(f64, f64)> {
        let n = self.losses.len();
        let w = window.clamp(1, n.max(1));
        if n == 0 {
            return None;
        }
        let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
        Some((mean(&self.losses[..w]), mean(&self.losses[n - w..])))
    }
}

/// Per-example gradients summed in batch order, so results do not depend
/// on how the parallel map was scheduled.
fn reduce<T: Real>(per_example: Vec<(f64, Vec<Option<Tensor<T>>>)>) -> (f64, Vec<Option<Tensor<T>>>) {
    let n = per_example.len();
    let mut it = per_example.into_iter();
    let (mut loss, mut acc) = it.next().expect("non-empty batch");
    for (l, grads) in it {
        loss += l;
        for (a, g) in acc.iter_mut().zip(grads) {
            match (a.as_mut(), g) {
                (Some(a), Some(g)) => a.add_assign(&g),
                (None, Some(g)) => *a = Some(g),
                _ => {}
            }
        }
    }
    let inv = T::of(1.0 / n as f64);
    for t in acc.iter_mut().flatten() {
        t.scale(inv);
    }
    (loss / n as f64, acc)
}

/// Trains `net` in place with Adam on the mean complex L1 loss of each batch.
pub fn train_loop<T: Real>(
    net: &mut Network<T>,
    provider: &mut dyn BatchProvider<T>,
    cfg: &TrainConfig,
    mut on_step: impl FnMut(usize, f64),
) -> Result<LossTrace> {
    cfg.validate()?;
    let adam = Adam::new(cfg.lr);
    let mut trace = LossTrace::default();
    for step in 0..cfg.steps {
        let batch = provider.batch(step, cfg.batch)?;
        if batch.is_empty() {
            return Err(NnError::Input("empty batch".into()));
        }
        let model = &*net;
        let per_example = batch
            .par_iter()
            .enumerate()
            .map(|(i, ex)| {
                let rng = stream_rng(cfg.seed, DROPOUT_STREAM + (step * cfg.batch + i) as u64);
                model.loss_and_grads(&ex.x, &ex.geometry, &ex.target, true, rng)
            })
            .collect::<Result<Vec<_>>>()
            .map_err(|e| match e {
                NnError::NonFinite { layer } if layer.starts_with("loss") => NnError::NonFiniteLoss { step },
                other => other,
            })?;
        let (loss, grads) = reduce(per_example);
        if !loss.is_finite() {
            return Err(NnError::NonFiniteLoss { step });
        }
        adam.step(net.params_mut(), &grads)?;
        if !net.params().is_finite() {
            return Err(NnError::NonFiniteLoss { step });
        }
        trace.losses.push(loss);
        if cfg.log_every > 0 && (step + 1) % cfg.log_every == 0 {
            log::info!("step {} loss {loss:.5}", step + 1);
        }
        on_step(step, loss);
    }
    Ok(trace)
}
