//! Minibatch SGD over an abstract objective.

use ndarray::Axis;
use rand::seq::SliceRandom;

use crate::data::ClientData;
use crate::error::{FlError, Result};
use crate::model::{network, Batch, LossKind, ModelSpec, ParamVector, Targets};
use crate::rng::{rng_from, SimRng};

/// A differentiable objective over an indexable set of examples.
pub trait Objective: Sync {
    fn num_examples(&self) -> usize;

    fn dim(&self) -> usize;

    /// Loss and gradient averaged over the examples named by `indices`.
    fn loss_and_grad(&self, params: &[f64], indices: &[usize]) -> Result<(f64, Vec<f64>)>;

    fn full_loss_and_grad(&self, params: &[f64]) -> Result<(f64, Vec<f64>)> {
        let all: Vec<usize> = (0..self.num_examples()).collect();
        self.loss_and_grad(params, &all)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SgdConfig {
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(FlError::domain("learning rate must be positive"));
        }
        if self.batch_size == 0 {
            return Err(FlError::domain("batch size must be at least 1"));
        }
        Ok(())
    }
}

/// Shuffle-per-epoch minibatch schedule. When the batch covers the whole
/// dataset every step uses all examples in natural order.
pub struct MinibatchSampler {
    order: Vec<usize>,
    pos: usize,
    batch_size: usize,
    rng: SimRng,
    full: bool,
}

impl MinibatchSampler {
    pub fn new(n: usize, batch_size: usize, seed: u64) -> Self {
        MinibatchSampler {
            order: (0..n).collect(),
            pos: n,
            batch_size,
            rng: rng_from(seed),
            full: batch_size >= n,
        }
    }

    pub fn next_batch(&mut self) -> &[usize] {
        if self.full {
            return &self.order;
        }
        if self.pos >= self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
        }
        let start = self.pos;
        let end = (start + self.batch_size).min(self.order.len());
        self.pos = end;
        &self.order[start..end]
    }
}

/// Runs `cfg.steps` minibatch steps, delegating the parameter update to
/// `update(params, grad)`.
pub fn sgd_minimize_with<O, F>(obj: &O, init: Vec<f64>, cfg: &SgdConfig, mut update: F) -> Result<Vec<f64>>
where
    O: Objective + ?Sized,
    F: FnMut(&mut [f64], &[f64]),
{
    cfg.validate()?;
    if init.len() != obj.dim() {
        return Err(FlError::shape("initial point does not match objective dimension"));
    }
    if cfg.steps == 0 {
        return Ok(init);
    }
    if obj.num_examples() == 0 {
        return Err(FlError::domain("cannot train on an empty dataset"));
    }
    let mut params = init;
    let mut sampler = MinibatchSampler::new(obj.num_examples(), cfg.batch_size, cfg.seed);
    for _ in 0..cfg.steps {
        let (_, grad) = obj.loss_and_grad(&params, sampler.next_batch())?;
        update(&mut params, &grad);
    }
    if params.iter().any(|v| !v.is_finite()) {
        return Err(FlError::domain("training diverged to non-finite parameters"));
    }
    Ok(params)
}

/// Plain SGD: `w <- w - lr * g`.
pub fn sgd_minimize<O: Objective + ?Sized>(obj: &O, init: Vec<f64>, cfg: &SgdConfig) -> Result<Vec<f64>> {
    let lr = cfg.lr;
    sgd_minimize_with(obj, init, cfg, |w, g| {
        w.iter_mut().zip(g).for_each(|(w, g)| *w -= lr * g);
    })
}

/// A model's loss on a dataset, viewed as an [`Objective`].
pub struct ModelObjective<'a> {
    pub spec: &'a ModelSpec,
    pub data: &'a ClientData,
    pub loss: LossKind,
}

impl<'a> ModelObjective<'a> {
    pub fn new(spec: &'a ModelSpec, data: &'a ClientData) -> Self {
        ModelObjective { spec, data, loss: LossKind::natural(spec) }
    }
}

impl Objective for ModelObjective<'_> {
    fn num_examples(&self) -> usize {
        self.data.len()
    }

    fn dim(&self) -> usize {
        self.spec.param_count()
    }

    fn loss_and_grad(&self, params: &[f64], indices: &[usize]) -> Result<(f64, Vec<f64>)> {
        if indices.len() == self.data.len() && indices.iter().enumerate().all(|(i, &j)| i == j) {
            let batch = self.data.batch(self.loss);
            return network::weighted_loss_and_grad(self.spec, params, &batch, self.loss, None);
        }
        let x = self.data.x.select(Axis(0), indices);
        let y: Vec<usize> = indices.iter().map(|&i| self.data.y[i]).collect();
        let batch = match self.loss {
            LossKind::CrossEntropy => Batch::labeled(x.view(), &y),
            LossKind::SquaredError => Batch { x: x.view(), targets: Targets::Reconstruction },
            LossKind::SoftKl { .. } => {
                return Err(FlError::domain("soft-kl needs soft targets; use the distillation objective"))
            }
        };
        network::weighted_loss_and_grad(self.spec, params, &batch, self.loss, None)
    }
}

/// Trains `init` on a client's data with the model's natural loss.
pub fn sgd_train(
    spec: &ModelSpec,
    init: &ParamVector,
    data: &ClientData,
    steps: usize,
    lr: f64,
    batch_size: usize,
    seed: u64,
) -> Result<ParamVector> {
    init.check_spec(spec)?;
    let cfg = SgdConfig { steps, lr, batch_size, seed };
    cfg.validate()?;
    if steps == 0 {
        return Ok(init.clone());
    }
    let obj = ModelObjective::new(spec, data);
    let out = sgd_minimize(&obj, init.as_slice().to_vec(), &cfg)?;
    ParamVector::new(out)
}

/// Number of minibatch steps that make up `epochs` passes over `n` examples.
pub fn steps_for_epochs(n: usize, batch_size: usize, epochs: usize) -> usize {
    n.div_ceil(batch_size.max(1)) * epochs
}
