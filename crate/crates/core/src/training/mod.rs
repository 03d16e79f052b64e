//! Unsupervised training on the negative rate quantile, evaluation, and
//! checkpoints.

mod checkpoint;
mod model;

pub use checkpoint::{Checkpoint, CheckpointError, CHECKPOINT_VERSION};
pub use model::{BoundModel, Mode, Model, SampleMessages, Slot, DNN_HIDDEN};

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bgnn::{BgnnConfig, BgnnError};
use crate::channel::{dbm_to_mw, derive_rng, gen_errors_for, stream, ChannelError, ChannelSample, Dataset, SystemConfig};
use crate::metrics::{daqe, daqe_var, quantile_index, MetricsError};
use crate::numerics::{adam_step, AdamState, NumericsError, RealTensor, Tape};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("non-finite loss at epoch {epoch}, sample {sample}: {detail}")]
    NonFiniteLoss { epoch: usize, sample: usize, detail: String },
    #[error(transparent)]
    Bgnn(#[from] BgnnError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Channel(#[from] ChannelError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub mode: Mode,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Error realizations per quantile estimate.
    pub error_samples: usize,
    pub power_range_dbm: [f64; 2],
    pub patience: usize,
    /// Share of the training split held out when the dataset has no
    /// validation split.
    pub validation_fraction: f64,
    /// Cap on validation channels (all when `None`).
    pub validation_limit: Option<usize>,
    pub validation_power_dbm: f64,
    pub seed: u64,
    pub snet: BgnnConfig,
    pub pnet: BgnnConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Proposed,
            epochs: 150,
            batch_size: 100,
            learning_rate: 1e-3,
            error_samples: 500,
            power_range_dbm: [0.0, 35.0],
            patience: 10,
            validation_fraction: 0.1,
            validation_limit: None,
            validation_power_dbm: 30.0,
            seed: 1,
            snet: BgnnConfig::snet(),
            pnet: BgnnConfig::pnet(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, system: &SystemConfig) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::InvalidConfig(m));
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if !(self.learning_rate > 0.0) {
            return bad("learning_rate must be positive".into());
        }
        let [lo, hi] = self.power_range_dbm;
        if !(lo < hi) {
            return bad(format!("power range [{lo}, {hi}] must satisfy lo < hi"));
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return bad("validation_fraction must lie in (0, 1)".into());
        }
        quantile_index(self.error_samples, system.outage_target).map_err(|e| TrainError::InvalidConfig(e.to_string()))?;
        self.snet.validate()?;
        self.pnet.validate()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_rhat_mbps: f64,
    pub seconds: f64,
    pub clamp_rate: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    /// Validation quantile before the first update.
    pub initial_val_rhat_mbps: f64,
    pub epochs: Vec<EpochRecord>,
}

impl TrainHistory {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,train_loss,val_rhat_mbps,seconds,clamp_rate\n");
        for r in &self.epochs {
            s.push_str(&format!(
                "{},{},{},{:.3},{}\n",
                r.epoch, r.train_loss, r.val_rhat_mbps, r.seconds, r.clamp_rate
            ));
        }
        s
    }
}

/// Everything needed to continue training after an interruption.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    /// Next epoch to run (0-based).
    pub next_epoch: usize,
    pub model: Model,
    pub adam: AdamState,
    pub best_model: Model,
    pub best_val_rhat_mbps: f64,
    pub epochs_since_best: usize,
    pub history: TrainHistory,
}

/// Loss `-r_hat` for one sample with its gradient over [`Model::tensors`].
pub struct SampleLoss {
    pub loss: f64,
    pub grads: Vec<RealTensor>,
    pub clamped: usize,
}

/// Evaluates `-r_hat` at one power and differentiates it.
pub fn sample_loss(
    model: &Model,
    system: &SystemConfig,
    sample: &ChannelSample,
    power_dbm: f64,
    errors: &crate::channel::ErrorBatch,
    messages: &SampleMessages,
) -> Result<SampleLoss, TrainError> {
    let tape = Tape::new();
    let bound = model.bind(&tape, true);
    let h = tape.cconstant(&sample.h_est);
    let noise = system.noise_powers_mw();
    let (w, clamped) = bound.beams(&tape, &sample.h_est, h, dbm_to_mw(power_dbm), &noise, messages)?;
    let q = daqe_var(
        &tape,
        &sample.h_est,
        w,
        errors,
        system.outage_target,
        system.bandwidth_mhz(),
        &noise,
    )?;
    let loss = tape.scale(q.r_hat, -1.0)?;
    let mut grads = tape.backward(loss)?;
    let grads = bound
        .vars
        .iter()
        .map(|&v| grads.take(v).unwrap_or_else(|| RealTensor::zeros(tape.shape(v))))
        .collect();
    Ok(SampleLoss {
        loss: tape.item(loss),
        grads,
        clamped,
    })
}

/// Mean of `-r_hat` over a batch of `(sample, power_dbm, errors, messages)`.
pub fn batch_loss(
    model: &Model,
    system: &SystemConfig,
    batch: &[(&ChannelSample, f64, &crate::channel::ErrorBatch, &SampleMessages)],
) -> Result<f64, TrainError> {
    if batch.is_empty() {
        return Err(TrainError::InvalidConfig("empty batch".into()));
    }
    let mut total = 0.0;
    for (s, p, e, m) in batch {
        total += sample_loss(model, system, s, *p, e, m)?.loss;
    }
    Ok(total / batch.len() as f64)
}

/// Training and validation channels, falling back to a held-out tail of the
/// training split when the dataset has no validation split.
fn splits<'a>(dataset: &'a Dataset, cfg: &TrainConfig) -> (&'a [ChannelSample], &'a [ChannelSample]) {
    let (train, val) = if dataset.validation.is_empty() {
        let cut = ((1.0 - cfg.validation_fraction) * dataset.train.len() as f64).round() as usize;
        dataset.train.split_at(cut.min(dataset.train.len()))
    } else {
        (&dataset.train[..], &dataset.validation[..])
    };
    let limit = cfg.validation_limit.unwrap_or(val.len()).min(val.len());
    (train, &val[..limit])
}

/// Mean quantile rate over `samples` at one power, with fixed error and
/// message streams so repeated calls are comparable.
pub fn mean_rate(
    model: &Model,
    system: &SystemConfig,
    samples: &[ChannelSample],
    power_dbm: f64,
    error_samples: usize,
    seed: u64,
    stream_tag: u64,
) -> Result<f64, TrainError> {
    if samples.is_empty() {
        return Ok(0.0);
    }
    let rates = samples
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let mut rng = derive_rng(seed, &[stream_tag, i as u64]);
            let errs = gen_errors_for(&mut rng, system, s, error_samples)?;
            let msgs = model.messages(seed, &[stream_tag, i as u64], s.n_antennas(), s.n_users());
            let noise = system.noise_powers_mw();
            let w = model.beams(&s.h_est, dbm_to_mw(power_dbm), &noise, &msgs)?;
            Ok(daqe(&s.h_est, &w, &errs, system.outage_target, system.bandwidth_mhz(), &noise)?.r_hat)
        })
        .collect::<Result<Vec<f64>, TrainError>>()?;
    Ok(rates.iter().sum::<f64>() / rates.len() as f64)
}

fn validation_rate(model: &Model, system: &SystemConfig, val: &[ChannelSample], cfg: &TrainConfig) -> Result<f64, TrainError> {
    mean_rate(model, system, val, cfg.validation_power_dbm, cfg.error_samples, cfg.seed, stream::VALIDATION)
}

/// Fresh training state at random initialization.
pub fn init_state(dataset: &Dataset, cfg: &TrainConfig) -> Result<TrainState, TrainError> {
    let system = &dataset.config;
    cfg.validate(system)?;
    let mut rng = derive_rng(cfg.seed, &[stream::INIT]);
    let model = Model::init(&mut rng, cfg.mode, &cfg.snet, &cfg.pnet, system.n_antennas, system.n_users)?;
    let (_, val) = splits(dataset, cfg);
    let initial = validation_rate(&model, system, val, cfg)?;
    let params: Vec<RealTensor> = model.tensors().into_iter().cloned().collect();
    Ok(TrainState {
        next_epoch: 0,
        adam: AdamState::new(&params),
        best_model: model.clone(),
        model,
        best_val_rhat_mbps: initial,
        epochs_since_best: 0,
        history: TrainHistory {
            initial_val_rhat_mbps: initial,
            epochs: Vec::new(),
        },
    })
}

/// Trains from scratch and returns the best-validation model.
pub fn train(dataset: &Dataset, cfg: &TrainConfig) -> Result<(Model, TrainHistory), TrainError> {
    let state = train_from(dataset, cfg, init_state(dataset, cfg)?, |_| {})?;
    Ok((state.best_model, state.history))
}

/// Runs epochs from `state` until the epoch budget or early stopping ends
/// training. `on_epoch` sees the state after every completed epoch.
pub fn train_from(
    dataset: &Dataset,
    cfg: &TrainConfig,
    mut state: TrainState,
    mut on_epoch: impl FnMut(&TrainState),
) -> Result<TrainState, TrainError> {
    let system = &dataset.config;
    cfg.validate(system)?;
    if state.model.mode != cfg.mode {
        return Err(TrainError::InvalidConfig(format!(
            "state holds a {} model but config asks for {}",
            state.model.mode, cfg.mode
        )));
    }
    let (train, val) = splits(dataset, cfg);
    if train.is_empty() {
        return Err(TrainError::InvalidConfig("no training samples".into()));
    }
    let users = system.n_users;
    while state.next_epoch < cfg.epochs && state.epochs_since_best < cfg.patience.max(1) {
        let epoch = state.next_epoch;
        let started = Instant::now();
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut derive_rng(cfg.seed, &[stream::SHUFFLE, epoch as u64]));
        let (mut loss_sum, mut clamped) = (0.0, 0usize);
        for batch in order.chunks(cfg.batch_size) {
            let model = &state.model;
            let results = batch
                .par_iter()
                .map(|&i| {
                    let tags = [epoch as u64, i as u64];
                    let power = derive_rng(cfg.seed, &[stream::POWER, tags[0], tags[1]])
                        .random_range(cfg.power_range_dbm[0]..=cfg.power_range_dbm[1]);
                    let mut erng = derive_rng(cfg.seed, &[stream::ERRORS, tags[0], tags[1]]);
                    let errs = gen_errors_for(&mut erng, system, &train[i], cfg.error_samples)?;
                    let msgs = model.messages(cfg.seed, &tags, system.n_antennas, users);
                    sample_loss(model, system, &train[i], power, &errs, &msgs).map_err(|e| match e {
                        TrainError::Numerics(NumericsError::NonFinite { op, index }) => TrainError::NonFiniteLoss {
                            epoch,
                            sample: i,
                            detail: format!("{op} produced a non-finite value at index {index}"),
                        },
                        other => other,
                    })
                })
                .collect::<Vec<_>>();
            let mut sum: Option<Vec<RealTensor>> = None;
            for (r, &i) in results.into_iter().zip(batch) {
                let r = r?;
                if !r.loss.is_finite() {
                    return Err(TrainError::NonFiniteLoss {
                        epoch,
                        sample: i,
                        detail: "loss".into(),
                    });
                }
                loss_sum += r.loss;
                clamped += r.clamped;
                match &mut sum {
                    None => sum = Some(r.grads),
                    Some(acc) => {
                        for (a, g) in acc.iter_mut().zip(&r.grads) {
                            for (x, y) in a.data_mut().iter_mut().zip(g.data()) {
                                *x += y;
                            }
                        }
                    }
                }
            }
            let mut grads = sum.expect("nonempty batch");
            let scale = 1.0 / batch.len() as f64;
            for g in &mut grads {
                for x in g.data_mut() {
                    *x *= scale;
                }
            }
            let mut params: Vec<RealTensor> = state.model.tensors().into_iter().cloned().collect();
            adam_step(&mut params, &grads, &mut state.adam, cfg.learning_rate)?;
            if let Some(i) = params.iter().position(|p| !p.is_finite()) {
                return Err(TrainError::NonFiniteLoss {
                    epoch,
                    sample: batch[0],
                    detail: format!("parameter tensor {i} became non-finite"),
                });
            }
            for (dst, src) in state.model.tensors_mut().into_iter().zip(params) {
                *dst = src;
            }
        }
        let val_rate = validation_rate(&state.model, system, val, cfg)?;
        state.history.epochs.push(EpochRecord {
            epoch: epoch + 1,
            train_loss: loss_sum / train.len() as f64,
            val_rhat_mbps: val_rate,
            seconds: started.elapsed().as_secs_f64(),
            clamp_rate: clamped as f64 / (train.len() * users) as f64,
        });
        if val_rate > state.best_val_rhat_mbps {
            state.best_val_rhat_mbps = val_rate;
            state.best_model = state.model.clone();
            state.epochs_since_best = 0;
        } else {
            state.epochs_since_best += 1;
        }
        state.next_epoch += 1;
        on_epoch(&state);
    }
    Ok(state)
}

/// Mean and spread of the quantile rate across channels at one power.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub p_dbm: f64,
    pub mean_rhat_mbps: f64,
    pub std_rhat_mbps: f64,
}

/// Quantile rate of every channel at every grid power. Each channel uses
/// one error batch and one set of messages across the whole grid.
pub fn evaluate_per_channel(
    model: &Model,
    system: &SystemConfig,
    samples: &[ChannelSample],
    p_grid_dbm: &[f64],
    error_samples: usize,
    seed: u64,
) -> Result<Vec<Vec<f64>>, TrainError> {
    quantile_index(error_samples, system.outage_target)?;
    let noise = system.noise_powers_mw();
    samples
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let tags = [stream::EVAL, i as u64];
            let errs = gen_errors_for(&mut derive_rng(seed, &tags), system, s, error_samples)?;
            let msgs = model.messages(seed, &tags, s.n_antennas(), s.n_users());
            p_grid_dbm
                .iter()
                .map(|&p| {
                    let w = model.beams(&s.h_est, dbm_to_mw(p), &noise, &msgs)?;
                    Ok(daqe(&s.h_est, &w, &errs, system.outage_target, system.bandwidth_mhz(), &noise)?.r_hat)
                })
                .collect()
        })
        .collect()
}

pub fn evaluate(
    model: &Model,
    system: &SystemConfig,
    samples: &[ChannelSample],
    p_grid_dbm: &[f64],
    error_samples: usize,
    seed: u64,
) -> Result<Vec<EvalRow>, TrainError> {
    let table = evaluate_per_channel(model, system, samples, p_grid_dbm, error_samples, seed)?;
    Ok(summarize(&table, p_grid_dbm))
}

/// Column means and population standard deviations of a channel x grid table.
pub fn summarize(table: &[Vec<f64>], p_grid_dbm: &[f64]) -> Vec<EvalRow> {
    let n = table.len().max(1) as f64;
    p_grid_dbm
        .iter()
        .enumerate()
        .map(|(j, &p)| {
            let mean = table.iter().map(|r| r[j]).sum::<f64>() / n;
            let var = table.iter().map(|r| (r[j] - mean).powi(2)).sum::<f64>() / n;
            EvalRow {
                p_dbm: p,
                mean_rhat_mbps: mean,
                std_rhat_mbps: var.sqrt(),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Activation;

    fn tiny_cfg(mode: Mode) -> TrainConfig {
        let net = |head_dim, head_activation| BgnnConfig {
            layers: 2,
            message_dim: 2,
            hidden: 8,
            head_dim,
            head_activation,
            power_input: true,
        };
        TrainConfig {
            mode,
            epochs: 2,
            batch_size: 4,
            error_samples: 20,
            learning_rate: 1e-2,
            snet: net(1, Activation::Linear),
            pnet: net(2, Activation::Softmax),
            ..TrainConfig::default()
        }
    }

    fn data() -> Dataset {
        Dataset::generate(&SystemConfig { n_antennas: 2, n_users: 2, ..SystemConfig::default() }, 3, 12, 4, 4).unwrap()
    }

    #[test]
    fn seeded_training_is_deterministic() {
        let ds = data();
        let cfg = tiny_cfg(Mode::Proposed);
        let (m1, h1) = train(&ds, &cfg).unwrap();
        let (m2, h2) = train(&ds, &cfg).unwrap();
        assert_eq!(m1, m2);
        assert_eq!(h1.epochs.len(), h2.epochs.len());
        for (a, b) in h1.epochs.iter().zip(&h2.epochs) {
            assert_eq!(a.train_loss.to_bits(), b.train_loss.to_bits());
            assert_eq!(a.val_rhat_mbps.to_bits(), b.val_rhat_mbps.to_bits());
        }
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let ds = data();
        let cfg = tiny_cfg(Mode::SZero);
        let full = train_from(&ds, &cfg, init_state(&ds, &cfg).unwrap(), |_| {}).unwrap();
        let one = train_from(&ds, &TrainConfig { epochs: 1, ..cfg.clone() }, init_state(&ds, &cfg).unwrap(), |_| {}).unwrap();
        let resumed = train_from(&ds, &cfg, one, |_| {}).unwrap();
        assert_eq!(resumed.model, full.model);
        assert_eq!(
            resumed.history.epochs[1].train_loss.to_bits(),
            full.history.epochs[1].train_loss.to_bits()
        );
    }

    #[test]
    fn batch_loss_is_a_mean() {
        let ds = data();
        let sys = &ds.config;
        let cfg = tiny_cfg(Mode::Proposed);
        let model = init_state(&ds, &cfg).unwrap().model;
        let errs = gen_errors_for(&mut derive_rng(1, &[]), sys, &ds.train[0], 20).unwrap();
        let msgs = model.messages(1, &[0], 2, 2);
        let one = batch_loss(&model, sys, &[(&ds.train[0], 20.0, &errs, &msgs)]).unwrap();
        let single = sample_loss(&model, sys, &ds.train[0], 20.0, &errs, &msgs).unwrap().loss;
        assert_eq!(one, single);
        let errs2 = gen_errors_for(&mut derive_rng(2, &[]), sys, &ds.train[1], 20).unwrap();
        let pair = [(&ds.train[0], 20.0, &errs, &msgs), (&ds.train[1], 10.0, &errs2, &msgs)];
        let dup = [pair[0], pair[1], pair[1], pair[0]];
        let a = batch_loss(&model, sys, &pair).unwrap();
        let b = batch_loss(&model, sys, &dup).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn s_zero_matches_proposed_without_interference_net() {
        let ds = data();
        let sys = &ds.config;
        let cfg = tiny_cfg(Mode::Proposed);
        let proposed = init_state(&ds, &cfg).unwrap().model;
        let ablated = Model {
            mode: Mode::SZero,
            snet: None,
            ..proposed.clone()
        };
        let mut zeroed = proposed.clone();
        // zero the final decision layer so the raw interference output is 0
        let last = zeroed.snet.as_mut().unwrap().layers.last_mut().unwrap();
        for t in last.decision.tensors_mut() {
            t.data_mut().iter_mut().for_each(|x| *x = 0.0);
        }
        let msgs = proposed.messages(4, &[1], 2, 2);
        let noise = sys.noise_powers_mw();
        let a = zeroed.beams(&ds.test[0].h_est, 100.0, &noise, &msgs).unwrap();
        let b = ablated
            .beams(&ds.test[0].h_est, 100.0, &noise, &SampleMessages { s: None, p: msgs.p.clone() })
            .unwrap();
        assert!(a.w.max_abs_diff(&b.w) < 1e-12);
    }

    #[test]
    fn evaluation_is_reproducible() {
        let ds = data();
        let cfg = tiny_cfg(Mode::RzfPowerOnly);
        let model = init_state(&ds, &cfg).unwrap().model;
        let a = evaluate(&model, &ds.config, &ds.test, &[0.0, 20.0], 20, 5).unwrap();
        let b = evaluate(&model, &ds.config, &ds.test, &[0.0, 20.0], 20, 5).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 2);
    }

    #[test]
    fn invalid_configs_rejected() {
        let sys = SystemConfig::default();
        let cfg = TrainConfig { error_samples: 10, ..TrainConfig::default() };
        assert!(cfg.validate(&sys).is_err());
        let cfg = TrainConfig { batch_size: 0, ..TrainConfig::default() };
        assert!(cfg.validate(&sys).is_err());
        TrainConfig::default().validate(&sys).unwrap();
    }
}
