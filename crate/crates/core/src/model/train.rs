use serde::{Deserialize, Serialize};

use super::{ForwardContext, Model};
use crate::bank::PrototypeBank;
use crate::error::{config_err, Error, Result};
use crate::numerics::{ParamStore, Rng, Tensor};

/// Optimizer and schedule settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub max_iter: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    /// Polynomial decay exponent for `lr (1 - it / max_iter)^power`; 0 keeps `lr` fixed.
    pub lr_power: f64,
    /// Global gradient-norm clip; 0 disables.
    pub grad_clip: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            max_iter: 300,
            batch_size: 4,
            lr: 5e-3,
            momentum: 0.98,
            lr_power: 0.0,
            grad_clip: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iter == 0 || self.batch_size == 0 {
            return Err(config_err!("max_iter and batch_size must be positive"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || !(0.0..1.0).contains(&self.momentum) {
            return Err(config_err!("need lr > 0 and momentum in [0, 1)"));
        }
        if self.lr_power < 0.0 || self.grad_clip < 0.0 {
            return Err(config_err!("lr_power and grad_clip must be non-negative"));
        }
        Ok(())
    }

    pub fn lr_at(&self, iteration: usize) -> f64 {
        if self.lr_power == 0.0 {
            return self.lr;
        }
        let frac = 1.0 - iteration.min(self.max_iter) as f64 / self.max_iter as f64;
        self.lr * frac.powf(self.lr_power)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    /// Plain self-attention everywhere; codec and bank still learn.
    Warmup,
    /// Pseudo-perspective attention chains.
    Pmp,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub seg: f64,
    pub rec: f64,
    pub total: f64,
}

/// `v <- mu v + g; theta <- theta - lr v`.
#[derive(Clone, Debug, PartialEq)]
pub struct SgdMomentum {
    pub momentum: f64,
    pub velocity: Vec<Tensor>,
}

impl SgdMomentum {
    pub fn new(params: &ParamStore, momentum: f64) -> Self {
        Self { momentum, velocity: params.zeros_like() }
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &[Tensor], lr: f64) {
        let mu = self.momentum;
        for ((p, v), g) in params.tensors_mut().iter_mut().zip(&mut self.velocity).zip(grads) {
            for ((pv, vv), gv) in p.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
                *vv = mu * *vv + gv;
                *pv -= lr * *vv;
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub iteration: usize,
    pub phase: Phase,
    pub loss: LossParts,
    pub lr: f64,
    pub grad_norm: f64,
    pub pseudo_uses: usize,
}

/// Everything needed to continue training.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub model: Model,
    pub bank: Option<PrototypeBank>,
    pub optimizer: SgdMomentum,
    pub train: TrainConfig,
    pub iteration: usize,
}

impl TrainState {
    pub fn new(model: Model, train: TrainConfig) -> Result<Self> {
        train.validate()?;
        let bank = model.new_bank()?;
        let optimizer = SgdMomentum::new(model.params(), train.momentum);
        Ok(Self { model, bank, optimizer, train, iteration: 0 })
    }

    pub fn warmup_iterations(&self) -> usize {
        self.model.config().warmup_iterations(self.train.max_iter)
    }

    pub fn phase(&self) -> Phase {
        phase_at(self.iteration, self.warmup_iterations())
    }

    /// Context for evaluation after training.
    pub fn eval_context(&self) -> ForwardContext<'_> {
        match &self.bank {
            Some(b) if self.phase() == Phase::Pmp => ForwardContext::pmp(b),
            _ => ForwardContext::warmup(),
        }
    }

    /// One optimizer step on the mean loss of `batch`. The bank reads the
    /// pre-step state during the forward passes and observes every
    /// descriptor afterwards.
    pub fn train_step(&mut self, batch: &[(&Tensor, &[u8])]) -> Result<StepReport> {
        if batch.is_empty() {
            return Err(config_err!("empty batch"));
        }
        let phase = self.phase();
        let weight = 1.0 / batch.len() as f64;
        let mut grads = self.model.params().zeros_like();
        let mut loss = LossParts::default();
        let mut pending = Vec::new();
        let mut pseudo_uses = 0;
        let stochastic = self.model.config().pseudo.stochastic_step > 0.0;
        for (i, (image, labels)) in batch.iter().enumerate() {
            let mut rng = Rng::new(self.train.seed).fork(self.iteration as u64).fork(i as u64);
            let mut ctx = ForwardContext {
                phase,
                bank: self.bank.as_ref(),
                rng: if stochastic { Some(&mut rng) } else { None },
            };
            let (parts, g, out) = self.model.loss_and_grads(image, labels, &mut ctx).map_err(|e| self.diagnose(e))?;
            for (acc, gi) in grads.iter_mut().zip(&g) {
                acc.add_assign(&gi.scale(weight));
            }
            loss.seg += weight * parts.seg;
            loss.rec += weight * parts.rec;
            loss.total += weight * parts.total;
            pseudo_uses += out.pseudo_uses;
            pending.extend(out.descriptors);
        }
        let grad_norm = grads.iter().map(Tensor::sum_sq).sum::<f64>().sqrt();
        if !grad_norm.is_finite() {
            return Err(self.diagnose(Error::Numeric(format!(
                "non-finite gradient (seg {}, rec {})",
                loss.seg, loss.rec
            ))));
        }
        if self.train.grad_clip > 0.0 && grad_norm > self.train.grad_clip {
            let s = self.train.grad_clip / grad_norm;
            for g in &mut grads {
                *g = g.scale(s);
            }
        }
        let lr = self.train.lr_at(self.iteration);
        self.optimizer.step(self.model.params_mut(), &grads, lr);
        if let Some(bad) = self.model.params().iter().find(|(_, _, t)| !t.is_finite()) {
            return Err(self.diagnose(Error::Numeric(format!("parameter {} became non-finite", bad.1))));
        }
        if let Some(bank) = &mut self.bank {
            for p in &pending {
                bank.observe(p)?;
            }
        }
        let report = StepReport { iteration: self.iteration, phase, loss, lr, grad_norm, pseudo_uses };
        self.iteration += 1;
        Ok(report)
    }

    fn diagnose(&self, e: Error) -> Error {
        match e {
            Error::Numeric(m) => Error::Numeric(format!("iteration {} ({:?}): {m}", self.iteration, self.phase())),
            other => other,
        }
    }
}

pub(crate) fn phase_at(iteration: usize, warmup: usize) -> Phase {
    if iteration < warmup {
        Phase::Warmup
    } else {
        Phase::Pmp
    }
}
