//! Per-layer-type optimization.
//!
//! Mul, shift and norm parameters use an adaptive-moment (Adam) update.
//! Adder weights use plain SGD on a modulated gradient whose RMS is pinned to
//! `eta`, so every adder layer moves at the same rate regardless of how small
//! its raw gradient is.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{LayerKind, ParamRef};
use crate::tensor::Tensor;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    AdaptiveMoment,
    ModulatedSgd,
}

/// Cosine annealing from `lr_start` to `lr_end` over `total_epochs`, optionally
/// split into `cycles` equal restarts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub total_epochs: usize,
    pub lr_start: f64,
    pub lr_end: f64,
    #[serde(default = "one")]
    pub cycles: usize,
}

fn one() -> usize {
    1
}

impl Schedule {
    pub fn new(total_epochs: usize, lr_start: f64, lr_end: f64) -> Self {
        Schedule {
            total_epochs,
            lr_start,
            lr_end,
            cycles: 1,
        }
    }
}

pub fn lr_at(schedule: &Schedule, epoch: usize) -> Result<f64> {
    let total = schedule.total_epochs;
    if epoch > total {
        return Err(Error::Epoch { epoch, total });
    }
    if total == 0 {
        return Ok(schedule.lr_start);
    }
    let cycles = schedule.cycles.clamp(1, total);
    let progress = if cycles == 1 || epoch == total {
        epoch as f64 / total as f64
    } else {
        let period = total as f64 / cycles as f64;
        (epoch as f64 % period) / period
    };
    let (start, end) = (schedule.lr_start, schedule.lr_end);
    Ok(end + 0.5 * (start - end) * (1.0 + (PI * progress).cos()))
}

/// Rescales `g` so its RMS equals `eta`: `g·η·√n/‖g‖₂`. An all-zero gradient
/// yields zeros.
pub fn modulate_gradient(g: &Tensor, eta: f64) -> Tensor {
    let norm = g.sum_sq().sqrt();
    if norm == 0.0 || g.is_empty() {
        log::warn!("modulate_gradient: zero gradient norm, skipping update");
        return Tensor::zeros(g.shape());
    }
    let scale = eta * (g.len() as f64).sqrt() / norm;
    g.map(|v| (f64::from(v) * scale) as f32)
}

/// `w ← w − lr·modulate_gradient(g, eta)`; no momentum, no weight decay.
pub fn modulated_sgd_step(w: &mut Tensor, g: &Tensor, lr: f64, eta: f64) -> Result<()> {
    if w.shape() != g.shape() {
        return Err(Error::shape("modulated_sgd_step", w.shape(), g.shape()));
    }
    let step = modulate_gradient(g, eta);
    for (wv, &s) in w.data_mut().iter_mut().zip(step.data()) {
        *wv = (f64::from(*wv) - lr * f64::from(s)) as f32;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        AdamState {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }
}

/// Bias-corrected Adam update with β1 = 0.9, β2 = 0.999, ε = 1e-8.
pub fn adaptive_moment_step(w: &mut Tensor, g: &Tensor, state: &mut AdamState, lr: f64) -> Result<()> {
    if w.shape() != g.shape() || state.m.len() != w.len() || state.v.len() != w.len() {
        return Err(Error::shape("adaptive_moment_step", w.shape(), g.shape()));
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - ADAM_BETA1.powi(t);
    let c2 = 1.0 - ADAM_BETA2.powi(t);
    for (((wv, &gv), m), v) in w
        .data_mut()
        .iter_mut()
        .zip(g.data())
        .zip(state.m.iter_mut())
        .zip(state.v.iter_mut())
    {
        let gv = f64::from(gv);
        *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * gv;
        *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * gv * gv;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *wv = (f64::from(*wv) - lr * m_hat / (v_hat.sqrt() + ADAM_EPS)) as f32;
    }
    Ok(())
}

/// Learning-rate range for one optimizer family.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateRange {
    pub lr_start: f64,
    pub lr_end: f64,
}

/// Optimizer hyperparameters and the layer-kind → optimizer table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimConfig {
    pub adaptive: RateRange,
    pub modulated: RateRange,
    pub eta: f64,
    pub cycles: usize,
    pub routing: BTreeMap<LayerKind, OptimizerKind>,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            adaptive: RateRange {
                lr_start: 1e-3,
                lr_end: 1e-6,
            },
            modulated: RateRange {
                lr_start: 2e-2,
                lr_end: 2e-3,
            },
            eta: 0.2,
            cycles: 1,
            routing: BTreeMap::from([
                (LayerKind::Mul, OptimizerKind::AdaptiveMoment),
                (LayerKind::Shift, OptimizerKind::AdaptiveMoment),
                (LayerKind::Norm, OptimizerKind::AdaptiveMoment),
                (LayerKind::Adder, OptimizerKind::ModulatedSgd),
            ]),
        }
    }
}

/// Binding of a layer kind to an optimizer, its schedule bounds and η.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimRoute {
    pub layer_kind: LayerKind,
    pub optimizer_kind: OptimizerKind,
    pub lr_start: f64,
    pub lr_end: f64,
    pub eta: Option<f64>,
}

impl OptimConfig {
    pub fn route_for(&self, kind: LayerKind) -> Result<OptimRoute> {
        let optimizer_kind = *self
            .routing
            .get(&kind)
            .ok_or_else(|| Error::Config(format!("no optimizer routed for {kind} parameters")))?;
        let (range, eta) = match optimizer_kind {
            OptimizerKind::AdaptiveMoment => (self.adaptive, None),
            OptimizerKind::ModulatedSgd => {
                if self.eta.is_nan() || self.eta <= 0.0 {
                    return Err(Error::Config(format!("eta must be positive, got {}", self.eta)));
                }
                (self.modulated, Some(self.eta))
            }
        };
        if !(range.lr_start > 0.0 && range.lr_end > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        Ok(OptimRoute {
            layer_kind: kind,
            optimizer_kind,
            lr_start: range.lr_start,
            lr_end: range.lr_end,
            eta,
        })
    }
}

/// Parameters sharing one optimizer.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGroup {
    pub optimizer_kind: OptimizerKind,
    pub routes: Vec<OptimRoute>,
    /// Parameter names, in model order.
    pub params: Vec<String>,
}

/// Partitions parameters into one group per optimizer kind. Groups appear in
/// [`OptimizerKind`] order and only when nonempty.
pub fn route_parameters(params: &[ParamRef<'_>], cfg: &OptimConfig) -> Result<Vec<ParamGroup>> {
    let mut groups: BTreeMap<OptimizerKind, ParamGroup> = BTreeMap::new();
    for p in params {
        let route = cfg.route_for(p.kind)?;
        let group = groups.entry(route.optimizer_kind).or_insert_with(|| ParamGroup {
            optimizer_kind: route.optimizer_kind,
            routes: Vec::new(),
            params: Vec::new(),
        });
        if !group.routes.contains(&route) {
            group.routes.push(route);
        }
        group.params.push(p.name.clone());
    }
    Ok(groups.into_values().collect())
}

/// Learning rates in effect for one epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRates {
    pub adaptive: f64,
    pub modulated: f64,
}

/// Applies routed updates to a model's parameters, owning all optimizer state.
#[derive(Debug, Clone)]
pub struct Optimizer {
    cfg: OptimConfig,
    adaptive: Schedule,
    modulated: Schedule,
    routes: Vec<(String, OptimRoute)>,
    adam: Vec<Option<AdamState>>,
}

impl Optimizer {
    pub fn new(params: &[ParamRef<'_>], cfg: OptimConfig, total_epochs: usize) -> Result<Self> {
        // validates the table and fails on unrouted kinds
        route_parameters(params, &cfg)?;
        let mut routes = Vec::with_capacity(params.len());
        let mut adam = Vec::with_capacity(params.len());
        for p in params {
            let route = cfg.route_for(p.kind)?;
            adam.push((route.optimizer_kind == OptimizerKind::AdaptiveMoment).then(|| AdamState::new(p.value.len())));
            routes.push((p.name.clone(), route));
        }
        let schedule = |r: RateRange| Schedule {
            total_epochs,
            lr_start: r.lr_start,
            lr_end: r.lr_end,
            cycles: cfg.cycles.max(1),
        };
        Ok(Optimizer {
            adaptive: schedule(cfg.adaptive),
            modulated: schedule(cfg.modulated),
            cfg,
            routes,
            adam,
        })
    }

    pub fn config(&self) -> &OptimConfig {
        &self.cfg
    }

    pub fn rates(&self, epoch: usize) -> Result<EpochRates> {
        Ok(EpochRates {
            adaptive: lr_at(&self.adaptive, epoch)?,
            modulated: lr_at(&self.modulated, epoch)?,
        })
    }

    pub fn uses(&self, kind: OptimizerKind) -> bool {
        self.routes.iter().any(|(_, r)| r.optimizer_kind == kind)
    }

    /// One update of every parameter using the rates for `epoch`.
    /// `params` must be in the order the optimizer was built with.
    pub fn step(&mut self, params: &mut [ParamRef<'_>], epoch: usize) -> Result<()> {
        if params.len() != self.routes.len() {
            return Err(Error::Config(format!(
                "optimizer built for {} parameters, got {}",
                self.routes.len(),
                params.len()
            )));
        }
        let rates = self.rates(epoch)?;
        for ((p, (name, route)), state) in params.iter_mut().zip(&self.routes).zip(&mut self.adam) {
            if &p.name != name {
                return Err(Error::Config(format!("parameter order changed: {} vs {name}", p.name)));
            }
            match (route.optimizer_kind, state) {
                (OptimizerKind::AdaptiveMoment, Some(state)) => {
                    adaptive_moment_step(p.value, p.grad, state, rates.adaptive)?
                }
                (OptimizerKind::ModulatedSgd, _) => {
                    modulated_sgd_step(p.value, p.grad, rates.modulated, route.eta.unwrap_or(self.cfg.eta))?
                }
                (OptimizerKind::AdaptiveMoment, None) => unreachable!("state allocated in new"),
            }
        }
        Ok(())
    }
}
