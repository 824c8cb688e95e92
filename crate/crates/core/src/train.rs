//! Next-token training: person-level splits, AdamW with decay exclusions, a
//! one-cycle schedule, global-norm clipping, exact gradient accumulation,
//! per-epoch projection redraws, and early stopping on validation loss.
//!
//! Gradients accumulate as raw per-sequence sums and are divided by the
//! step's token count once, so splitting a step into micro-batches cannot
//! change the update: five micro-batches of 18 and one batch of 90 produce
//! bit-identical parameters.

use std::io::Write;
use std::path::Path;

use lifeseq_tensor::{GradStore, ParamSet, Tensor};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::encode::LifeSequence;
use crate::model::{build_loss_sum, ForwardOpts, ModelParams, Projections};
use crate::rng::substream_indexed;
use crate::{Error, Result};

pub const ADAM_BETAS: (f64, f64) = (0.9, 0.999);
pub const ADAM_EPS: f64 = 1e-8;

fn default_batch_size() -> usize {
    18
}
fn default_accumulation() -> usize {
    5
}
fn default_max_lr() -> f64 {
    // The source material never states its peak learning rate.
    3e-4
}
fn default_warmup() -> f64 {
    0.30
}
fn default_clip() -> f64 {
    5.0
}
fn default_weight_decay() -> f64 {
    0.01
}
fn default_epochs() -> usize {
    15
}
fn default_patience() -> usize {
    3
}

/// Training hyperparameters. Defaults follow the published run where stated;
/// `max_lr` and `weight_decay` magnitudes are this crate's own choices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_accumulation")]
    pub accumulation_steps: usize,
    #[serde(default = "default_max_lr")]
    pub max_lr: f64,
    #[serde(default = "default_warmup")]
    pub warmup_fraction: f64,
    #[serde(default = "default_clip")]
    pub clip_norm: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_patience")]
    pub patience: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: default_batch_size(),
            accumulation_steps: default_accumulation(),
            max_lr: default_max_lr(),
            warmup_fraction: default_warmup(),
            clip_norm: default_clip(),
            weight_decay: default_weight_decay(),
            epochs: default_epochs(),
            patience: default_patience(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn effective_batch(&self) -> usize {
        self.batch_size * self.accumulation_steps
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.batch_size == 0 || self.accumulation_steps == 0 {
            return bad("batch_size and accumulation_steps must be positive".into());
        }
        if !(self.warmup_fraction > 0.0 && self.warmup_fraction < 1.0) {
            return bad(format!("warmup_fraction {} outside (0,1)", self.warmup_fraction));
        }
        if !(self.clip_norm > 0.0) {
            return bad(format!("clip_norm {} must be positive", self.clip_norm));
        }
        // Zero is allowed so a frozen run can exercise early stopping.
        if !(self.max_lr >= 0.0 && self.max_lr.is_finite()) {
            return bad(format!("max_lr {} must be finite and non-negative", self.max_lr));
        }
        if !(self.weight_decay >= 0.0) {
            return bad(format!("weight_decay {} must be non-negative", self.weight_decay));
        }
        if self.epochs == 0 {
            return bad("epochs must be positive".into());
        }
        if self.patience == 0 {
            return bad("patience must be positive".into());
        }
        Ok(())
    }
}

/// Person-level split fractions. Every person's sequences land in exactly one
/// partition, so no history leaks across the train/validation/test boundary.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train: f64,
    pub validation: f64,
    pub test: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec { train: 0.70, validation: 0.15, test: 0.15, seed: 0 }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        let parts = [self.train, self.validation, self.test];
        if parts.iter().any(|p| !(*p > 0.0)) {
            return Err(Error::Config("every split fraction must be positive".into()));
        }
        let sum: f64 = parts.iter().sum();
        if (sum - 1.0).abs() > 1e-12 {
            return Err(Error::Config(format!("split fractions sum to {sum}, want 1")));
        }
        Ok(())
    }

    /// Partitions sequence indices by person id. Persons are shuffled under
    /// the split seed and cut at the cumulative fractions.
    pub fn split(&self, seqs: &[LifeSequence]) -> Result<(Vec<usize>, Vec<usize>, Vec<usize>)> {
        self.validate()?;
        let mut persons: Vec<u64> = seqs.iter().map(|s| s.person_id).collect();
        persons.sort_unstable();
        persons.dedup();
        let mut rng = substream_indexed(self.seed, "person-split", 0);
        persons.shuffle(&mut rng);
        let n = persons.len();
        let n_train = ((n as f64) * self.train).floor() as usize;
        let n_val = ((n as f64) * self.validation).floor() as usize;
        let bucket_of = |pid: u64| -> usize {
            let pos = persons.iter().position(|&p| p == pid).expect("person is present");
            if pos < n_train {
                0
            } else if pos < n_train + n_val {
                1
            } else {
                2
            }
        };
        let mut out = (Vec::new(), Vec::new(), Vec::new());
        for (i, s) in seqs.iter().enumerate() {
            match bucket_of(s.person_id) {
                0 => out.0.push(i),
                1 => out.1.push(i),
                _ => out.2.push(i),
            }
        }
        Ok(out)
    }
}

/// One-cycle learning rate: cosine ramp from zero to `max_lr` across the
/// warmup steps, then cosine decay back to zero at `total_steps`.
pub fn onecycle_lr(step: usize, total_steps: usize, max_lr: f64, warmup_fraction: f64) -> f64 {
    if total_steps == 0 || step >= total_steps {
        return 0.0;
    }
    let warmup = ((total_steps as f64) * warmup_fraction).round().max(1.0);
    let s = step as f64;
    if s <= warmup {
        max_lr * (1.0 - (std::f64::consts::PI * s / warmup).cos()) / 2.0
    } else {
        let left = (total_steps as f64) - warmup;
        max_lr * (1.0 + (std::f64::consts::PI * (s - warmup) / left).cos()) / 2.0
    }
}

/// Scales all gradients by `max_norm / norm` when the global L2 norm exceeds
/// `max_norm`; returns the pre-clip norm.
pub fn clip_global_norm(grads: &mut GradStore, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if norm > max_norm {
        grads.scale(max_norm / norm);
    }
    norm
}

/// First and second moment estimates, one pair per parameter.
#[derive(Debug, Clone)]
pub struct AdamState {
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(params: &ParamSet) -> Self {
        let zeros: Vec<Tensor> =
            params.iter().map(|(_, p)| Tensor::zeros(p.value.rows(), p.value.cols())).collect();
        AdamState { step: 0, m: zeros.clone(), v: zeros }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// Decoupled-decay Adam update with bias correction. Decay touches only
/// parameters flagged eligible; a missing gradient counts as zero, so moments
/// keep decaying. Non-finite gradients abort the step untouched.
pub fn adamw_step(
    params: &mut ParamSet,
    grads: &GradStore,
    state: &mut AdamState,
    lr: f64,
    betas: (f64, f64),
    eps: f64,
    weight_decay: f64,
) -> Result<()> {
    if state.m.len() != params.len() {
        return Err(Error::Training(format!(
            "optimizer state covers {} parameters, model has {}",
            state.m.len(),
            params.len()
        )));
    }
    if !grads.is_finite() {
        return Err(Error::Training("non-finite gradient; step aborted".into()));
    }
    let (b1, b2) = betas;
    state.step += 1;
    let t = state.step as i32;
    let corr1 = 1.0 - b1.powi(t);
    let corr2 = 1.0 - b2.powi(t);
    for id in params.ids().collect::<Vec<_>>() {
        let decay = params.get(id)?.decay_eligible;
        let g_opt = grads.get(id);
        let m = state.m[id.0].data_mut();
        let v = state.v[id.0].data_mut();
        let p = params.get_mut(id)?.value.data_mut();
        for i in 0..p.len() {
            let g = g_opt.map(|g| g.data()[i]).unwrap_or(0.0);
            m[i] = b1 * m[i] + (1.0 - b1) * g;
            v[i] = b2 * v[i] + (1.0 - b2) * g * g;
            let m_hat = m[i] / corr1;
            let v_hat = v[i] / corr2;
            let mut update = m_hat / (v_hat.sqrt() + eps);
            if decay {
                update += weight_decay * p[i];
            }
            p[i] -= lr * update;
        }
    }
    Ok(())
}

/// Token-weighted mean cross-entropy over `seqs` in evaluation mode.
pub fn mean_cross_entropy(params: &ModelParams, proj: &Projections, seqs: &[LifeSequence]) -> Result<f64> {
    if seqs.is_empty() {
        return Err(Error::Training("cannot evaluate on an empty set".into()));
    }
    let mut total = 0.0;
    let mut tokens = 0usize;
    for s in seqs {
        let built = build_loss_sum(params, proj, &s.ids, &s.year_index, &s.age, ForwardOpts::default())?;
        total += built.graph.value(built.loss_sum).item()?;
        tokens += built.n_predicted;
    }
    Ok(total / tokens as f64)
}

/// One epoch's summary line.
#[derive(Debug, Clone, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Token-weighted mean training cross-entropy across the epoch's steps.
    pub train_ce: f64,
    pub val_ce: f64,
    /// Learning rate of the epoch's last step.
    pub lr_last: f64,
    pub projection_seed: u64,
}

/// Outcome of a training run. `best_*` refer to the epoch with the lowest
/// validation cross-entropy; the model passed to [`train`] is left at that
/// epoch's parameters.
#[derive(Debug, Clone)]
pub struct TrainReport {
    pub initial_val_ce: f64,
    pub best_val_ce: f64,
    pub best_epoch: usize,
    pub best_projection_seed: u64,
    pub epochs: Vec<EpochRecord>,
    pub stopped_early: bool,
    pub aborted_steps: usize,
}

/// Dropout stream for one sequence: unique per (epoch, position in epoch), so
/// regrouping micro-batches cannot change any mask.
fn dropout_seed(root: u64, epoch: usize, pos_in_epoch: usize) -> u64 {
    substream_indexed(root, "dropout", ((epoch as u64) << 32) | pos_in_epoch as u64).gen()
}

fn projection_seed(root: u64, epoch: usize) -> u64 {
    substream_indexed(root, "projection-epoch", epoch as u64).gen()
}

/// Trains in place. Per epoch: redraw projections, reshuffle, accumulate
/// summed gradients over each step's sequences, divide once by the step's
/// token count, clip, and apply AdamW under the one-cycle schedule. Stops
/// when validation loss fails to improve for `patience` epochs and restores
/// the best-validation parameters. Writes `train_log.csv` and the best
/// checkpoint under `out_dir` when given.
pub fn train(
    train_seqs: &[LifeSequence],
    val_seqs: &[LifeSequence],
    params: &mut ModelParams,
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<TrainReport> {
    cfg.validate()?;
    if train_seqs.is_empty() || val_seqs.is_empty() {
        return Err(Error::Training("training and validation sets must be non-empty".into()));
    }
    let per_step = cfg.effective_batch();
    let steps_per_epoch = train_seqs.len().div_ceil(per_step);
    let total_steps = steps_per_epoch * cfg.epochs;

    let mut state = AdamState::new(&params.set);
    let mut log: Vec<String> = vec!["epoch,step,lr,train_loss,val_loss".into()];
    let mut report = TrainReport {
        initial_val_ce: f64::NAN,
        best_val_ce: f64::INFINITY,
        best_epoch: 0,
        best_projection_seed: 0,
        epochs: Vec::new(),
        stopped_early: false,
        aborted_steps: 0,
    };
    let mut best_set: Option<ParamSet> = None;
    let mut bad_epochs = 0usize;
    let mut global_step = 0usize;

    for epoch in 0..cfg.epochs {
        let proj_seed = projection_seed(cfg.seed, epoch);
        let proj = Projections::draw(&params.config, proj_seed);

        if epoch == 0 {
            report.initial_val_ce = mean_cross_entropy(params, &proj, val_seqs)?;
            if !report.initial_val_ce.is_finite() {
                return Err(Error::Training("validation loss is not finite before training".into()));
            }
        }

        let mut order: Vec<usize> = (0..train_seqs.len()).collect();
        order.shuffle(&mut substream_indexed(cfg.seed, "shuffle-epoch", epoch as u64));

        let mut epoch_loss = 0.0;
        let mut epoch_tokens = 0usize;
        let mut lr_last = 0.0;
        for (step_in_epoch, chunk) in order.chunks(per_step).enumerate() {
            let mut grads = GradStore::new(&params.set);
            let mut step_loss = 0.0;
            let mut step_tokens = 0usize;
            for (j, &idx) in chunk.iter().enumerate() {
                let s = &train_seqs[idx];
                let opts = ForwardOpts {
                    train: true,
                    dropout_seed: dropout_seed(cfg.seed, epoch, step_in_epoch * per_step + j),
                    include_time_streams: true,
                };
                let mut built = build_loss_sum(params, &proj, &s.ids, &s.year_index, &s.age, opts)?;
                step_loss += built.graph.value(built.loss_sum).item()?;
                step_tokens += built.n_predicted;
                built.graph.backward_into(built.loss_sum, &mut grads)?;
            }
            grads.scale(1.0 / step_tokens as f64);
            let lr = onecycle_lr(global_step, total_steps, cfg.max_lr, cfg.warmup_fraction);
            lr_last = lr;
            let train_loss = step_loss / step_tokens as f64;
            if grads.is_finite() {
                clip_global_norm(&mut grads, cfg.clip_norm);
                adamw_step(&mut params.set, &grads, &mut state, lr, ADAM_BETAS, ADAM_EPS, cfg.weight_decay)?;
            } else {
                report.aborted_steps += 1;
            }
            epoch_loss += step_loss;
            epoch_tokens += step_tokens;
            log.push(format!("{epoch},{global_step},{lr},{train_loss},"));
            global_step += 1;
        }

        let val_ce = mean_cross_entropy(params, &proj, val_seqs)?;
        if !val_ce.is_finite() {
            return Err(Error::Training(format!(
                "validation loss became non-finite at epoch {epoch} (step {global_step})"
            )));
        }
        let train_ce = epoch_loss / epoch_tokens as f64;
        if let Some(last) = log.last_mut() {
            *last = format!("{epoch},{},{lr_last},{train_ce},{val_ce}", global_step - 1);
        }
        report.epochs.push(EpochRecord { epoch, train_ce, val_ce, lr_last, projection_seed: proj_seed });

        if val_ce < report.best_val_ce {
            report.best_val_ce = val_ce;
            report.best_epoch = epoch;
            report.best_projection_seed = proj_seed;
            best_set = Some(params.set.clone());
            bad_epochs = 0;
            if let Some(dir) = out_dir {
                params.save(
                    &dir.join("checkpoint"),
                    &json!({ "projection_seed": proj_seed, "epoch": epoch, "val_ce": val_ce }),
                )?;
            }
        } else {
            bad_epochs += 1;
            if bad_epochs >= cfg.patience {
                report.stopped_early = true;
                break;
            }
        }
    }

    if let Some(best) = best_set {
        params.set = best;
    }
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
        let mut f = std::fs::File::create(dir.join("train_log.csv"))?;
        writeln!(f, "{}", log.join("\n"))?;
    }
    Ok(report)
}
