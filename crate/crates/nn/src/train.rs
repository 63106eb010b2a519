//! Bridge training: L1 regression of the noise part, Adam, parameter EMA and
//! plateau learning-rate decay.

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use c2v_core::diffusion::{forward_sample, loss_target, BridgeSchedule};
use c2v_core::{rng, ConditionSet, Volume};

use crate::error::{NnError, Result};
use crate::model::Model;
use crate::params::ParamStore;
use crate::tape::{Tape, Tensor};
use crate::unet::DenoiserConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub plateau_factor: f64,
    /// Epochs without improvement before the learning rate drops.
    pub plateau_patience: usize,
    /// Relative improvement that counts as progress.
    pub plateau_threshold: f64,
    pub batch_size: usize,
    pub ema_rate: f64,
    /// Bridge length `T`.
    pub total_steps: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 40,
            learning_rate: 1e-4,
            plateau_factor: 0.5,
            plateau_patience: 10,
            plateau_threshold: 1e-4,
            batch_size: 2,
            ema_rate: 0.995,
            total_steps: 1000,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.epochs > 0
            && self.learning_rate > 0.0
            && self.plateau_factor > 0.0
            && self.plateau_factor < 1.0
            && self.plateau_patience > 0
            && self.plateau_threshold >= 0.0
            && self.batch_size > 0
            && self.ema_rate > 0.0
            && self.ema_rate < 1.0
            && self.total_steps > 0;
        if ok {
            Ok(())
        } else {
            Err(NnError::Config(format!(
                "training settings must be positive with ema_rate and plateau_factor in (0, 1): {self:?}"
            )))
        }
    }
}

/// One training example: conditions and the image they describe.
#[derive(Debug, Clone)]
pub struct TrainPair {
    pub cond: ConditionSet,
    pub image: Volume,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub steps: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(params: &ParamStore) -> Adam {
        let zeros: Vec<Vec<f64>> = params
            .tensors()
            .iter()
            .map(|t| vec![0.0; t.len()])
            .collect();
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            steps: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn update(&mut self, params: &mut ParamStore, grads: &[Vec<f64>], lr: f64) {
        self.steps += 1;
        let c1 = 1.0 - self.beta1.powf(self.steps as f64);
        let c2 = 1.0 - self.beta2.powf(self.steps as f64);
        for (i, p) in params.tensors_mut().iter_mut().enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (k, w) in p.data.iter_mut().enumerate() {
                let g = grads[i][k];
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g;
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * g * g;
                *w -= lr * (m[k] / c1) / ((v[k] / c2).sqrt() + self.eps);
            }
        }
    }
}

/// `ema ← r·ema + (1 − r)·current`, elementwise.
pub fn ema_update(ema: &mut ParamStore, current: &ParamStore, rate: f64) {
    for (e, c) in ema.tensors_mut().iter_mut().zip(current.tensors()) {
        for (a, b) in e.data.iter_mut().zip(&c.data) {
            *a = rate * *a + (1.0 - rate) * b;
        }
    }
}

/// Learning-rate decay when the monitored loss stops improving.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Plateau {
    pub best: Option<f64>,
    pub bad_epochs: usize,
}

impl Plateau {
    pub fn new() -> Plateau {
        Plateau {
            best: None,
            bad_epochs: 0,
        }
    }

    /// Feed one epoch's loss; returns true when the rate should be cut.
    pub fn observe(&mut self, loss: f64, patience: usize, threshold: f64) -> bool {
        match self.best {
            Some(b) if loss >= b * (1.0 - threshold) => {
                self.bad_epochs += 1;
                if self.bad_epochs >= patience {
                    self.bad_epochs = 0;
                    return true;
                }
                false
            }
            _ => {
                self.best = Some(loss);
                self.bad_epochs = 0;
                false
            }
        }
    }
}

impl Default for Plateau {
    fn default() -> Self {
        Plateau::new()
    }
}

/// Everything besides tensors that a resumed run needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    /// Optimizer steps taken.
    pub step: u64,
    /// Completed epochs.
    pub epoch: usize,
    pub learning_rate: f64,
    pub plateau: Plateau,
    /// Mean training loss of each completed epoch.
    pub loss_curve: Vec<f64>,
    /// Learning rate each completed epoch ran at.
    #[serde(default)]
    pub lr_curve: Vec<f64>,
}

pub struct Trainer {
    pub tcfg: TrainConfig,
    pub model: Model,
    pub ema: ParamStore,
    pub adam: Adam,
    pub state: TrainState,
    sched: BridgeSchedule,
}

/// Loss and per-parameter gradients for one example.
type SampleGrad = (f64, usize, Vec<Vec<f64>>);

impl Trainer {
    pub fn new(dcfg: DenoiserConfig, tcfg: TrainConfig) -> Result<Trainer> {
        tcfg.validate()?;
        let model = Model::new(dcfg, tcfg.seed)?;
        let ema = model.params().clone();
        let adam = Adam::new(model.params());
        let state = TrainState {
            step: 0,
            epoch: 0,
            learning_rate: tcfg.learning_rate,
            plateau: Plateau::new(),
            loss_curve: Vec::new(),
            lr_curve: Vec::new(),
        };
        Trainer::resume(tcfg, model, ema, adam, state)
    }

    /// Continue from saved pieces.
    pub fn resume(
        tcfg: TrainConfig,
        model: Model,
        ema: ParamStore,
        adam: Adam,
        state: TrainState,
    ) -> Result<Trainer> {
        tcfg.validate()?;
        if !ema.same_layout(model.params())
            || adam.m.len() != model.params().len()
            || adam.v.len() != adam.m.len()
        {
            return Err(NnError::Checkpoint(
                "EMA or optimizer state does not match the parameters".into(),
            ));
        }
        let sched = BridgeSchedule::new(tcfg.total_steps)?;
        Ok(Trainer {
            tcfg,
            model,
            ema,
            adam,
            state,
            sched,
        })
    }

    pub fn schedule(&self) -> &BridgeSchedule {
        &self.sched
    }

    /// The EMA weights as a standalone model (what sampling uses).
    pub fn ema_model(&self) -> Model {
        Model::from_params(self.model.config().clone(), self.ema.clone())
            .expect("EMA mirrors the live parameters")
    }

    fn sample_grad(&self, pair: &TrainPair, slot: u64) -> Result<SampleGrad> {
        let cfg = self.model.config();
        let mut r = rng::stream(self.tcfg.seed, "train-draw", &[self.state.step, slot]);
        let t = r.random_range(1..=self.tcfg.total_steps);
        let eps = Volume::new(
            *pair.image.grid(),
            rng::standard_normal(&mut r, pair.image.len()),
        )?;
        let x_end = pair.cond.primary(cfg.primary);
        let x_t = forward_sample(&pair.image, &x_end, t, &eps, &self.sched)?;
        let target = loss_target(&pair.image, &x_end, t, &eps, &self.sched)?;
        let input = self.model.input(&x_t, &pair.cond)?;
        let mut shape = input.shape.clone();
        shape[1] = 1;
        let target = Tensor::new(shape, target.into_data())?;

        let mut tape = Tape::new();
        let (out, vars) = self.model.record(&mut tape, input, &[t], true)?;
        let loss = tape.l1_loss(out, &target)?;
        let value = tape.value(loss).data[0];
        tape.backward(loss)?;
        let grads = vars
            .iter()
            .zip(self.model.params().tensors())
            .map(|(&v, p)| {
                tape.grad(v)
                    .map_or_else(|| vec![0.0; p.len()], <[f64]>::to_vec)
            })
            .collect();
        Ok((value, t, grads))
    }

    /// One optimizer step on a batch; returns the batch-mean L1 loss.
    pub fn step(&mut self, batch: &[&TrainPair]) -> Result<f64> {
        if batch.is_empty() {
            return Err(NnError::Config("empty batch".into()));
        }
        // examples fan out; the reduction below runs in slot order
        let per: Vec<Result<SampleGrad>> = batch
            .par_iter()
            .enumerate()
            .map(|(slot, p)| self.sample_grad(p, slot as u64))
            .collect();
        let per = per.into_iter().collect::<Result<Vec<_>>>()?;
        let n = per.len() as f64;
        let loss = per.iter().map(|p| p.0).sum::<f64>() / n;
        if !loss.is_finite() {
            return Err(NnError::NonFiniteLoss {
                loss,
                step: self.state.step,
                epoch: self.state.epoch,
                timesteps: per.iter().map(|p| p.1).collect(),
            });
        }
        let mut iter = per.into_iter();
        let mut grads = iter.next().expect("nonempty batch").2;
        for (_, _, g) in iter {
            for (acc, gi) in grads.iter_mut().zip(g) {
                acc.iter_mut().zip(gi).for_each(|(a, b)| *a += b);
            }
        }
        grads.iter_mut().flatten().for_each(|g| *g /= n);

        self.adam
            .update(self.model.params_mut(), &grads, self.state.learning_rate);
        ema_update(&mut self.ema, self.model.params(), self.tcfg.ema_rate);
        self.state.step += 1;
        Ok(loss)
    }

    /// One pass over `data` in a seeded shuffled order; returns the mean batch loss.
    pub fn epoch(&mut self, data: &[TrainPair]) -> Result<f64> {
        if data.is_empty() {
            return Err(NnError::Config("empty training set".into()));
        }
        let dims = data[0].image.dims();
        if let Some(bad) = data
            .iter()
            .find(|p| p.image.dims() != dims || !p.image.same_geometry(&p.cond.s_c))
        {
            return Err(NnError::Shape(format!(
                "inconsistent training geometry: {:?} vs {:?}",
                bad.image.dims(),
                dims
            )));
        }
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut rng::stream(
            self.tcfg.seed,
            "train-shuffle",
            &[self.state.epoch as u64],
        ));
        let mut losses = Vec::new();
        for chunk in order.chunks(self.tcfg.batch_size) {
            let batch: Vec<&TrainPair> = chunk.iter().map(|&i| &data[i]).collect();
            losses.push(self.step(&batch)?);
        }
        let mean = losses.iter().sum::<f64>() / losses.len() as f64;
        self.state.epoch += 1;
        self.state.loss_curve.push(mean);
        self.state.lr_curve.push(self.state.learning_rate);
        if self.state.plateau.observe(
            mean,
            self.tcfg.plateau_patience,
            self.tcfg.plateau_threshold,
        ) {
            self.state.learning_rate *= self.tcfg.plateau_factor;
            log::info!(
                "loss plateau at epoch {}: learning rate -> {:e}",
                self.state.epoch,
                self.state.learning_rate
            );
        }
        Ok(mean)
    }

    /// Run epochs until `tcfg.epochs` are complete, reporting each one.
    pub fn fit(&mut self, data: &[TrainPair], mut on_epoch: impl FnMut(&Trainer)) -> Result<()> {
        while self.state.epoch < self.tcfg.epochs {
            let loss = self.epoch(data)?;
            log::info!(
                "epoch {}/{}: loss {loss:.5}, lr {:e}",
                self.state.epoch,
                self.tcfg.epochs,
                self.state.learning_rate
            );
            on_epoch(self);
        }
        Ok(())
    }
}

/// Train from scratch.
pub fn train(data: &[TrainPair], dcfg: DenoiserConfig, tcfg: TrainConfig) -> Result<Trainer> {
    let mut trainer = Trainer::new(dcfg, tcfg)?;
    trainer.fit(data, |_| {})?;
    Ok(trainer)
}
