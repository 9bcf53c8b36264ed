//! Full-batch training: Adam, plateau learning-rate schedule, global-norm
//! gradient clipping and per-epoch metrics.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::diffengine::{EngineError, Tape, Tensor};
use crate::error::{invalid, Error, Result};
use crate::model::{Arch, Network};
use crate::regularize::{needs_profiles, total_loss, RegWeights};
use crate::targets::Dataset;

pub const DEFAULT_SEEDS: [u64; 5] = [42, 123, 456, 789, 2024];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlateauConfig {
    pub patience: usize,
    pub factor: f64,
    pub min_lr: f64,
    /// Relative improvement threshold (`loss < best·(1 − threshold)`).
    pub threshold: f64,
}

impl Default for PlateauConfig {
    fn default() -> Self {
        Self { patience: 50, factor: 0.5, min_lr: 1e-6, threshold: 1e-4 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr0: f64,
    pub plateau: PlateauConfig,
    pub adam: AdamConfig,
    pub clip_norm: f64,
    pub reg: RegWeights,
    pub seeds: Vec<u64>,
    /// Record the bounded contraction vector of every layer each epoch.
    pub track_contractions: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 500,
            lr0: 1e-3,
            plateau: PlateauConfig::default(),
            adam: AdamConfig::default(),
            clip_norm: 1.0,
            reg: RegWeights::default(),
            seeds: DEFAULT_SEEDS.to_vec(),
            track_contractions: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return Err(invalid(format!("learning rate {} must be positive", self.lr0)));
        }
        if !(self.clip_norm > 0.0) {
            return Err(invalid("clip norm must be positive"));
        }
        let p = &self.plateau;
        if !(p.factor > 0.0 && p.factor < 1.0) || !(p.min_lr >= 0.0) || !(p.threshold >= 0.0) {
            return Err(invalid("bad plateau schedule"));
        }
        self.reg.validate()
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

/// One bias-corrected Adam update, in place.
pub fn adam_step(params: &mut [&mut Tensor], grads: &[Tensor], state: &mut AdamState, lr: f64, cfg: &AdamConfig) -> Result<()> {
    if params.len() != grads.len() || params.iter().zip(grads).any(|(p, g)| p.shape() != g.shape()) {
        return Err(invalid("parameter and gradient shapes differ"));
    }
    if grads.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite("gradient"));
    }
    if state.m.is_empty() {
        state.m = grads.iter().map(|g| vec![0.0; g.numel()]).collect();
        state.v = state.m.clone();
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let step_size = lr / bc1;
    let bc2_sqrt = bc2.sqrt();
    for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(state.m.iter_mut().zip(state.v.iter_mut())) {
        for (((p, &g), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
            let denom = v.sqrt() / bc2_sqrt + cfg.eps;
            *p -= step_size * *m / denom;
        }
    }
    Ok(())
}

/// Rescales all gradients by `max_norm / norm` when their joint L2 norm
/// exceeds `max_norm`. Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.data())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

/// Reduce-on-plateau state, monitoring a loss to be minimized.
#[derive(Clone, Debug, PartialEq)]
pub struct Plateau {
    pub config: PlateauConfig,
    pub lr: f64,
    pub best: f64,
    pub bad_epochs: usize,
}

impl Plateau {
    pub fn new(lr0: f64, config: PlateauConfig) -> Self {
        Self { config, lr: lr0, best: f64::INFINITY, bad_epochs: 0 }
    }

    /// Feeds one epoch's loss and returns the learning rate for the next.
    pub fn step(&mut self, loss: f64) -> f64 {
        if loss < self.best * (1.0 - self.config.threshold) {
            self.best = loss;
            self.bad_epochs = 0;
        } else {
            self.bad_epochs += 1;
        }
        if self.bad_epochs > self.config.patience {
            self.lr = (self.lr * self.config.factor).max(self.config.min_lr);
            self.bad_epochs = 0;
        }
        self.lr
    }
}

/// Learning rate after the most recent entry of `history` is fed to
/// `state`.
pub fn plateau_schedule(history: &[f64], state: &mut Plateau) -> f64 {
    match history.last() {
        Some(&l) => state.step(l),
        None => state.lr,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub arch: Arch,
    pub seed: u64,
    pub n_params: usize,
    pub initial_train_mse: f64,
    pub initial_test_mse: f64,
    /// Training MSE of the forward pass of each epoch (before its update).
    pub train_mse: Vec<f64>,
    /// Clean test MSE after each epoch's update.
    pub test_mse: Vec<f64>,
    pub final_train_mse: f64,
    pub final_test_mse: f64,
    pub lr: Vec<f64>,
    /// Mean learned box dimension after each epoch (fractal models).
    pub dim_trajectory: Vec<f64>,
    /// Fractal energy ratio after each epoch (Hybrid).
    pub energy_trajectory: Vec<f64>,
    pub contraction_trajectory: Option<Vec<Vec<f64>>>,
    pub final_dim: Option<f64>,
    pub final_energy_ratio: Option<f64>,
    /// Set when a non-finite loss or gradient stopped the run; the
    /// trajectories then end at the last finite epoch.
    pub diverged_at: Option<usize>,
    pub config: TrainConfig,
    #[serde(skip)]
    pub wall_time_s: f64,
}

impl RunResult {
    pub fn diverged(&self) -> bool {
        self.diverged_at.is_some()
    }

    /// Final test MSE, with diverged runs counted as `+∞`.
    pub fn score(&self) -> f64 {
        if self.diverged() {
            f64::INFINITY
        } else {
            self.final_test_mse
        }
    }
}

fn mse(pred: &[f64], y: &[f64]) -> f64 {
    pred.iter().zip(y).map(|(p, t)| (p - t).powi(2)).sum::<f64>() / y.len() as f64
}

pub fn evaluate_mse(net: &Network, data: &Dataset) -> Result<f64> {
    Ok(mse(net.predict(&data.x)?.data(), data.y.data()))
}

fn is_divergence(e: &Error) -> bool {
    matches!(
        e,
        Error::NonFinite(_) | Error::Engine(EngineError::NonFinite { .. }) | Error::Engine(EngineError::Domain { .. })
    )
}

enum Epoch {
    Done(f64),
    Diverged,
}

struct Trainer<'a> {
    net: &'a mut Network,
    train: &'a Dataset,
    config: &'a TrainConfig,
    adam: AdamState,
    plateau: Plateau,
}

impl Trainer<'_> {
    fn epoch(&mut self) -> Result<Epoch> {
        let tape = Tape::new();
        let pass = self.net.forward(&tape, &self.train.x, true, needs_profiles(&self.config.reg))?;
        let target = tape.constant(self.train.y.clone());
        let fit = pass.output.sub(&target)?.square()?.mean()?;
        let fit_value = fit.item().unwrap_or(f64::NAN);
        let loss = total_loss(&fit, &pass, &self.config.reg)?;
        let grads = tape.backward(&loss)?;
        let mut g: Vec<Tensor> = pass
            .params
            .iter()
            .map(|p| grads.get(p).cloned().ok_or(Error::NonFinite("missing gradient")))
            .collect::<Result<_>>()?;
        clip_global_norm(&mut g, self.config.clip_norm);
        if g.iter().any(|t| !t.is_finite()) || !fit_value.is_finite() {
            return Ok(Epoch::Diverged);
        }
        let loss_value = loss.item().unwrap_or(f64::NAN);
        drop(pass);
        let mut params = self.net.params_mut();
        adam_step(&mut params, &g, &mut self.adam, self.plateau.lr, &self.config.adam)?;
        if params.iter().any(|p| !p.is_finite()) {
            return Ok(Epoch::Diverged);
        }
        self.plateau.step(loss_value);
        Ok(Epoch::Done(fit_value))
    }
}

/// Trains `net` in place for `config.epochs` full-batch epochs.
///
/// `seed` is recorded in the result; initialization is the caller's.
pub fn run(net: &mut Network, train: &Dataset, test: &Dataset, config: &TrainConfig, seed: u64) -> Result<RunResult> {
    config.validate()?;
    if train.dim() != net.n_in() || test.dim() != net.n_in() || net.n_out() != 1 {
        return Err(invalid(format!(
            "network [{} → {}] does not fit {}-dimensional scalar data",
            net.n_in(),
            net.n_out(),
            train.dim()
        )));
    }
    let started = Instant::now();
    let initial_train_mse = evaluate_mse(net, train)?;
    let initial_test_mse = evaluate_mse(net, test)?;
    let mut res = RunResult {
        arch: net.arch,
        seed,
        n_params: net.count_params(),
        initial_train_mse,
        initial_test_mse,
        train_mse: Vec::with_capacity(config.epochs),
        test_mse: Vec::with_capacity(config.epochs),
        final_train_mse: initial_train_mse,
        final_test_mse: initial_test_mse,
        lr: Vec::with_capacity(config.epochs),
        dim_trajectory: Vec::new(),
        energy_trajectory: Vec::new(),
        contraction_trajectory: config.track_contractions.then(Vec::new),
        final_dim: net.mean_box_dimension()?,
        final_energy_ratio: net.fractal_energy_ratio(),
        diverged_at: None,
        config: config.clone(),
        wall_time_s: 0.0,
    };
    let mut trainer = Trainer {
        net,
        train,
        config,
        adam: AdamState::default(),
        plateau: Plateau::new(config.lr0, config.plateau),
    };
    for epoch in 0..config.epochs {
        let lr = trainer.plateau.lr;
        let outcome = match trainer.epoch() {
            Ok(o) => o,
            Err(e) if is_divergence(&e) => Epoch::Diverged,
            Err(e) => return Err(e),
        };
        let train_mse = match outcome {
            Epoch::Done(v) => v,
            Epoch::Diverged => {
                res.diverged_at = Some(epoch);
                break;
            }
        };
        let test_mse = match evaluate_mse(trainer.net, test) {
            Ok(v) if v.is_finite() => v,
            Ok(_) => {
                res.diverged_at = Some(epoch);
                break;
            }
            Err(e) if is_divergence(&e) => {
                res.diverged_at = Some(epoch);
                break;
            }
            Err(e) => return Err(e),
        };
        res.train_mse.push(train_mse);
        res.test_mse.push(test_mse);
        res.lr.push(lr);
        if let Some(d) = trainer.net.mean_box_dimension()? {
            res.dim_trajectory.push(d);
        }
        if let Some(r) = trainer.net.fractal_energy_ratio() {
            res.energy_trajectory.push(r);
        }
        if let Some(traj) = res.contraction_trajectory.as_mut() {
            let mut all = Vec::new();
            for c in trainer.net.edge_banks().filter_map(|e| e.contraction.as_ref()) {
                all.extend(c.bounded().into_data());
            }
            traj.push(all);
        }
        res.final_test_mse = test_mse;
    }
    if res.diverged_at.is_none() {
        res.final_train_mse = evaluate_mse(trainer.net, train)?;
    } else if let Some(&last) = res.train_mse.last() {
        res.final_train_mse = last;
    }
    res.final_dim = trainer.net.mean_box_dimension()?.filter(|v| v.is_finite());
    res.final_energy_ratio = trainer.net.fractal_energy_ratio().filter(|v| v.is_finite());
    res.wall_time_s = started.elapsed().as_secs_f64();
    Ok(res)
}
