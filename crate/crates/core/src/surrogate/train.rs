//! Adam training on MSE, metrics and finite-difference gradient checks.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::{Cache, DropoutMode};
use super::{pack_role, Feed, Model, Trace};
use crate::dataset::{KindDataset, Normalization, Split};
use crate::error::{invalid, Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps_adam: f64,
    pub seed: u64,
    /// Stop after the epoch that crosses this wall-clock budget.
    pub max_seconds: Option<f64>,
    /// Geometric decay from `learning_rate` to this value at the last epoch.
    pub final_learning_rate: Option<f64>,
    /// Trailing epochs trained with dropout disabled.
    pub epochs_without_dropout: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 500,
            batch_size: 90,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps_adam: 1e-8,
            seed: 0,
            max_seconds: None,
            final_learning_rate: None,
            epochs_without_dropout: 0,
        }
    }
}

impl TrainConfig {
    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        match self.final_learning_rate {
            Some(end) if self.epochs > 1 && self.learning_rate > 0.0 => {
                let f = epoch as f64 / (self.epochs - 1) as f64;
                self.learning_rate * (end / self.learning_rate).powf(f)
            }
            _ => self.learning_rate,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub train_mse: f64,
    pub val_mse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub curve: Vec<EpochLoss>,
    pub best_epoch: usize,
    pub best_val_mse: f64,
    pub seconds: f64,
    pub stopped_on_budget: bool,
}

impl TrainReport {
    pub fn curve_csv(&self) -> String {
        let mut s = String::from("epoch,train_mse,val_mse\n");
        for e in &self.curve {
            s.push_str(&format!("{},{:e},{:e}\n", e.epoch, e.train_mse, e.val_mse));
        }
        s
    }
}

/// Normalized copy of a kind's data, laid out for batching.
struct Prepared {
    statics: Vec<Vec<f64>>,
    dynamic: Vec<f64>,
    dyn_len: usize,
    targets: Vec<f64>,
    slots: Vec<usize>,
    /// Offset of every role inside its static or dynamic vector.
    role_offsets: Vec<usize>,
}

impl Prepared {
    fn new(ds: &KindDataset, norm: &Normalization) -> Self {
        let n_fine = ds.n_fine_roles();
        let statics = ds
            .static_inputs
            .iter()
            .map(|x| {
                let mut x = x.clone();
                norm.apply_inputs(&ds.roles[..n_fine], 0, &mut x);
                x
            })
            .collect();
        let dyn_len = ds.dynamic_len();
        let mut dynamic = ds.dynamic_inputs.clone();
        for chunk in dynamic.chunks_mut(dyn_len.max(1)) {
            norm.apply_inputs(&ds.roles[n_fine..], n_fine, chunk);
        }
        let mut targets = ds.targets.clone();
        norm.apply_targets(&mut targets);
        let mut role_offsets = Vec::new();
        let (mut s, mut d) = (0, 0);
        for r in &ds.roles {
            if r.fine {
                role_offsets.push(s);
                s += r.len();
            } else {
                role_offsets.push(d);
                d += r.len();
            }
        }
        Self {
            statics,
            dynamic,
            dyn_len,
            targets,
            slots: ds.samples.iter().map(|m| m.slot).collect(),
            role_offsets,
        }
    }

    fn feeds(&self, model: &Model, idx: &[usize]) -> Vec<Feed> {
        let t = &model.topology;
        let mut unique: Vec<usize> = Vec::new();
        let mut row_of = std::collections::HashMap::new();
        let static_gather: Vec<usize> = idx
            .iter()
            .map(|&i| {
                let slot = self.slots[i];
                *row_of.entry(slot).or_insert_with(|| {
                    unique.push(slot);
                    unique.len() - 1
                })
            })
            .collect();
        t.branches
            .iter()
            .map(|b| {
                let role = &t.roles[b.role];
                let off = self.role_offsets[b.role];
                if role.fine {
                    let rows: Vec<&[f64]> = unique.iter().map(|&s| &self.statics[s][off..off + role.len()]).collect();
                    Feed {
                        x: pack_role(role, &rows),
                        gather: static_gather.clone(),
                        embedded: false,
                    }
                } else {
                    let rows: Vec<&[f64]> = idx
                        .iter()
                        .map(|&i| &self.dynamic[i * self.dyn_len + off..i * self.dyn_len + off + role.len()])
                        .collect();
                    Feed {
                        x: pack_role(role, &rows),
                        gather: (0..idx.len()).collect(),
                        embedded: false,
                    }
                }
            })
            .collect()
    }

    /// Inference-mode predictions (normalized) for `idx`.
    fn predict(&self, model: &Model, idx: &[usize]) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(idx.len() * model.topology.n_outputs);
        for chunk in idx.chunks(256) {
            let feeds = self.feeds(model, chunk);
            let (y, _) = model.forward_batch(&feeds, chunk.len(), &mut DropoutMode::Off, false)?;
            out.extend(y);
        }
        Ok(out)
    }

    fn mse(&self, model: &Model, idx: &[usize]) -> Result<f64> {
        if idx.is_empty() {
            return Ok(f64::NAN);
        }
        let m = model.topology.n_outputs;
        let y = self.predict(model, idx)?;
        let mut s = 0.0;
        for (k, &i) in idx.iter().enumerate() {
            for o in 0..m {
                let d = y[k * m + o] - self.targets[i * m + o];
                s += d * d;
            }
        }
        Ok(s / (idx.len() * m) as f64)
    }
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    fn step(&mut self, cfg: &TrainConfig, lr: f64, params: &mut [f64], g: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - cfg.beta1.powi(self.t);
        let c2 = 1.0 - cfg.beta2.powi(self.t);
        for i in 0..params.len() {
            self.m[i] = cfg.beta1 * self.m[i] + (1.0 - cfg.beta1) * g[i];
            self.v[i] = cfg.beta2 * self.v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            params[i] -= lr * mh / (vh.sqrt() + cfg.eps_adam);
        }
    }
}

/// Trains on the train split with per-epoch train/validation MSE (normalized
/// units, inference mode) and keeps the best-validation weights.
pub fn train(model: &mut Model, ds: &KindDataset, cfg: &TrainConfig) -> Result<TrainReport> {
    if cfg.batch_size == 0 || !(cfg.learning_rate >= 0.0) || cfg.final_learning_rate.is_some_and(|r| !(r > 0.0)) {
        return invalid("batch size must be >= 1, learning rate >= 0 and a final learning rate > 0");
    }
    let Some(norm) = ds.norm.clone() else {
        return invalid(format!("{}: dataset has no split/normalization", ds.kind.name()));
    };
    if model.topology.roles != ds.roles || model.topology.n_outputs != ds.n_outputs {
        return Err(Error::Shape("model topology does not match the dataset".into()));
    }
    let prep = Prepared::new(ds, &norm);
    model.norm = Some(norm);
    let train_idx = ds.indices(Split::Train);
    let val_idx = ds.indices(Split::Val);
    if train_idx.is_empty() {
        return invalid("empty training split");
    }
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut drop_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_d20f);
    let mut adam = Adam {
        m: vec![0.0; model.params.len()],
        v: vec![0.0; model.params.len()],
        t: 0,
    };
    let m = model.topology.n_outputs;
    let mut grads = vec![0.0; model.params.len()];
    let mut order = train_idx.clone();
    let mut curve = Vec::with_capacity(cfg.epochs);
    let mut best = (f64::INFINITY, 0usize, model.params.clone());
    let mut stopped = false;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let lr = cfg.learning_rate_at(epoch);
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let feeds = prep.feeds(model, batch);
            let mut mode = if epoch + cfg.epochs_without_dropout >= cfg.epochs {
                DropoutMode::Off
            } else {
                DropoutMode::Sample(&mut drop_rng)
            };
            let (y, trace) = model.forward_batch(&feeds, batch.len(), &mut mode, true)?;
            let scale = 2.0 / (batch.len() * m) as f64;
            let mut loss = 0.0;
            let mut dout = vec![0.0; y.len()];
            for (k, &i) in batch.iter().enumerate() {
                for o in 0..m {
                    let d = y[k * m + o] - prep.targets[i * m + o];
                    loss += d * d;
                    dout[k * m + o] = scale * d;
                }
            }
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch: b });
            }
            grads.fill(0.0);
            model.backward(&feeds, trace.as_ref().expect("trace kept"), &dout, &mut grads);
            adam.step(cfg, lr, &mut model.params, &grads);
        }
        let train_mse = prep.mse(model, &train_idx)?;
        let val_mse = if val_idx.is_empty() { train_mse } else { prep.mse(model, &val_idx)? };
        if !train_mse.is_finite() || !val_mse.is_finite() {
            return Err(Error::NonFiniteLoss { epoch, batch: usize::MAX });
        }
        curve.push(EpochLoss {
            epoch,
            train_mse,
            val_mse,
        });
        if val_mse < best.0 {
            best = (val_mse, epoch, model.params.clone());
        }
        log::debug!("{} epoch {epoch}: train {train_mse:.3e} val {val_mse:.3e}", ds.kind.name());
        if let Some(limit) = cfg.max_seconds {
            if started.elapsed().as_secs_f64() > limit && epoch + 1 < cfg.epochs {
                log::warn!("{}: training budget reached after {} epochs", ds.kind.name(), epoch + 1);
                stopped = true;
                break;
            }
        }
    }
    if !curve.is_empty() {
        model.params = best.2;
    }
    Ok(TrainReport {
        curve,
        best_epoch: best.1,
        best_val_mse: best.0,
        seconds: started.elapsed().as_secs_f64(),
        stopped_on_budget: stopped,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub n: usize,
    /// Mean squared error in target units.
    pub mse: f64,
    /// `sqrt(sum |Y - Y~|^2 / sum |Y|^2)` in percent.
    pub rmse_pct: f64,
    /// `sum |Y - Y~| / sum |Y|` in percent.
    pub mae_pct: f64,
}

/// Metrics from denormalized predictions and targets.
pub fn metrics(pred: &[f64], target: &[f64]) -> Result<Metrics> {
    if pred.len() != target.len() || pred.is_empty() {
        return invalid("metrics need equal, nonempty vectors");
    }
    let (mut se, mut ae, mut y2, mut ya) = (0.0, 0.0, 0.0, 0.0);
    for (p, y) in pred.iter().zip(target) {
        se += (y - p) * (y - p);
        ae += (y - p).abs();
        y2 += y * y;
        ya += y.abs();
    }
    if y2 == 0.0 {
        return Err(Error::DivisionGuard("all targets are zero".into()));
    }
    Ok(Metrics {
        n: pred.len(),
        mse: se / pred.len() as f64,
        rmse_pct: 100.0 * (se / y2).sqrt(),
        mae_pct: 100.0 * ae / ya,
    })
}

/// Metrics of `model` on one split, in denormalized target units.
pub fn evaluate(model: &Model, ds: &KindDataset, split: Split) -> Result<Metrics> {
    let Some(norm) = model.norm.as_ref() else {
        return invalid("model has no normalization statistics");
    };
    let idx = ds.indices(split);
    if idx.is_empty() {
        return invalid(format!("{}: empty {split:?} split", ds.kind.name()));
    }
    let prep = Prepared::new(ds, norm);
    let mut pred = prep.predict(model, &idx)?;
    norm.invert_targets(&mut pred);
    let m = ds.n_outputs;
    let target: Vec<f64> = idx.iter().flat_map(|&i| ds.targets[i * m..(i + 1) * m].iter().copied()).collect();
    metrics(&pred, &target)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Parameters whose perturbation flips a ReLU or a max-pool choice.
    pub skipped: usize,
}

fn pattern(trace: &Trace) -> Vec<usize> {
    let mut out = Vec::new();
    for c in trace.branch.iter().flatten().chain(&trace.trunk) {
        match c {
            Cache::Relu { active } => out.extend(active.iter().map(|&b| b as usize)),
            Cache::Pool { argmax, .. } => out.extend_from_slice(argmax),
            _ => {}
        }
    }
    out
}

fn loss_and_pattern(model: &Model, feeds: &[Feed], target: &[f64]) -> Result<(f64, Vec<usize>)> {
    let (y, trace) = model.forward_batch(feeds, 1, &mut DropoutMode::Off, true)?;
    let l = y.iter().zip(target).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / y.len() as f64;
    Ok((l, pattern(trace.as_ref().expect("trace kept"))))
}

/// Central differences with step `h` against backprop for every parameter,
/// dropout off; reports `max |g - fd| / max(|g|, |fd|, 1e-12)`.
pub fn grad_check(model: &Model, inputs: &[f64], target: &[f64], h: f64) -> Result<GradCheck> {
    let feeds = model.feeds(&[inputs])?;
    if target.len() != model.topology.n_outputs {
        return Err(Error::Shape("target length does not match the model".into()));
    }
    let (y, trace) = model.forward_batch(&feeds, 1, &mut DropoutMode::Off, true)?;
    let trace = trace.expect("trace kept");
    let base = pattern(&trace);
    let dout: Vec<f64> = y
        .iter()
        .zip(target)
        .map(|(a, b)| 2.0 * (a - b) / y.len() as f64)
        .collect();
    let mut g = vec![0.0; model.params.len()];
    model.backward(&feeds, &trace, &dout, &mut g);
    let mut probe = model.clone();
    let mut out = GradCheck {
        max_rel_error: 0.0,
        checked: 0,
        skipped: 0,
    };
    for i in 0..model.params.len() {
        let p0 = model.params[i];
        probe.params[i] = p0 + h;
        let (lp, pp) = loss_and_pattern(&probe, &feeds, target)?;
        probe.params[i] = p0 - h;
        let (lm, pm) = loss_and_pattern(&probe, &feeds, target)?;
        probe.params[i] = p0;
        if pp != base || pm != base {
            out.skipped += 1;
            continue;
        }
        let fd = (lp - lm) / (2.0 * h);
        let err = (g[i] - fd).abs() / g[i].abs().max(fd.abs()).max(1e-12);
        out.max_rel_error = out.max_rel_error.max(err);
        out.checked += 1;
    }
    Ok(out)
}
