use std::sync::Arc;
use std::thread;
use std::time::Duration;

use super::TrainError;
use crate::data::{Batch, DataError};
use crate::model::{BertMini, ForwardOptions, Optimizer};
use crate::tensor::{Tape, Tensor};

/// Receives backward progress from a replica.
pub trait GradSink {
    fn backward_started(&mut self);
    /// Called once per parameter per backward, when its gradient is final.
    fn grad_ready(&mut self, param: usize, grad: &[f32]);
}

/// One worker's model copy as seen by the engine.
pub trait Replica: Send {
    fn param_sizes(&self) -> Vec<usize>;
    /// Forward and backward on micro-batch `micro` of `step`, seeding the
    /// backward with `loss_scale`. Returns the unscaled loss.
    fn micro_step(
        &mut self,
        step: usize,
        micro: usize,
        loss_scale: f32,
        sink: &mut dyn GradSink,
    ) -> Result<f32, TrainError>;
    /// Apply averaged, unscaled gradients.
    fn apply(&mut self, grads: &[Vec<f32>]) -> Result<(), TrainError>;
    fn param_hash(&self) -> u64;
}

/// Supplies micro-batch `micro` of step `step` for `rank`.
pub trait DataSource: Send + Sync {
    fn batch(&self, rank: usize, step: usize, micro: usize) -> Result<Batch, DataError>;
}

impl<F> DataSource for F
where
    F: Fn(usize, usize, usize) -> Result<Batch, DataError> + Send + Sync,
{
    fn batch(&self, rank: usize, step: usize, micro: usize) -> Result<Batch, DataError> {
        self(rank, step, micro)
    }
}

pub struct BertReplica {
    rank: usize,
    model: BertMini,
    optimizer: Box<dyn Optimizer + Send>,
    data: Arc<dyn DataSource>,
    opts: ForwardOptions,
}

impl BertReplica {
    /// `opts.dropout_seed` is the base seed; each micro-step derives its own.
    pub fn new(
        rank: usize,
        model: BertMini,
        optimizer: Box<dyn Optimizer + Send>,
        data: Arc<dyn DataSource>,
        opts: ForwardOptions,
    ) -> BertReplica {
        BertReplica {
            rank,
            model,
            optimizer,
            data,
            opts,
        }
    }

    pub fn model(&self) -> &BertMini {
        &self.model
    }

    pub fn into_model(self) -> BertMini {
        self.model
    }
}

impl Replica for BertReplica {
    fn param_sizes(&self) -> Vec<usize> {
        self.model.tensors().iter().map(Tensor::numel).collect()
    }

    fn micro_step(
        &mut self,
        step: usize,
        micro: usize,
        loss_scale: f32,
        sink: &mut dyn GradSink,
    ) -> Result<f32, TrainError> {
        let batch = self.data.batch(self.rank, step, micro)?;
        let mut tape = match &self.opts.autocast {
            Some(t) => Tape::with_autocast(t.clone()),
            None => Tape::new(),
        };
        let opts = ForwardOptions {
            dropout_seed: self.opts.dropout_seed.map(|s| {
                s ^ ((self.rank as u64) << 48) ^ ((step as u64) << 8) ^ micro as u64
            }),
            ..self.opts.clone()
        };
        let f = self.model.forward(&mut tape, &batch, &opts)?;
        let loss = tape.value(f.loss).item();
        sink.backward_started();
        tape.backward_with(f.loss, loss_scale, |v, g| sink.grad_ready(v.index(), g.data()))
            .map_err(crate::model::ModelError::from)?;
        Ok(loss)
    }

    fn apply(&mut self, grads: &[Vec<f32>]) -> Result<(), TrainError> {
        let grads: Vec<Tensor> = grads
            .iter()
            .zip(self.model.tensors())
            .map(|(g, p)| Tensor::from_vec(p.shape(), g.clone()))
            .collect::<Result<_, _>>()
            .map_err(crate::model::ModelError::from)?;
        self.optimizer.step(self.model.tensors_mut(), &grads)?;
        Ok(())
    }

    fn param_hash(&self) -> u64 {
        self.model.param_hash()
    }
}

/// Stand-in replica that sleeps instead of computing. Backward releases
/// gradients in reverse parameter order, spread over the backward time in
/// proportion to parameter size.
pub struct SimulatedReplica {
    rank: usize,
    forward: Duration,
    backward: Duration,
    params: Vec<Vec<f32>>,
    grads: Vec<Vec<f32>>,
    lr: f32,
}

impl SimulatedReplica {
    pub fn new(rank: usize, sizes: &[usize], forward: Duration, backward: Duration) -> SimulatedReplica {
        SimulatedReplica {
            rank,
            forward,
            backward,
            params: sizes.iter().map(|&n| vec![1.0; n]).collect(),
            grads: sizes.iter().map(|&n| vec![(rank + 1) as f32 / 64.0; n]).collect(),
            lr: 0.5,
        }
    }

    pub fn params(&self) -> &[Vec<f32>] {
        &self.params
    }
}

impl Replica for SimulatedReplica {
    fn param_sizes(&self) -> Vec<usize> {
        self.params.iter().map(Vec::len).collect()
    }

    fn micro_step(&mut self, _: usize, _: usize, _: f32, sink: &mut dyn GradSink) -> Result<f32, TrainError> {
        thread::sleep(self.forward);
        sink.backward_started();
        let total: usize = self.params.iter().map(Vec::len).sum::<usize>().max(1);
        for p in (0..self.params.len()).rev() {
            thread::sleep(self.backward.mul_f64(self.params[p].len() as f64 / total as f64));
            sink.grad_ready(p, &self.grads[p]);
        }
        Ok(self.rank as f32)
    }

    fn apply(&mut self, grads: &[Vec<f32>]) -> Result<(), TrainError> {
        for (p, g) in self.params.iter_mut().zip(grads) {
            for (w, d) in p.iter_mut().zip(g) {
                *w -= self.lr * d;
            }
        }
        Ok(())
    }

    fn param_hash(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for v in self.params.iter().flatten() {
            for byte in v.to_bits().to_le_bytes() {
                h ^= byte as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        }
        h
    }
}
