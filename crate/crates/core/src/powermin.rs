//! Minimum transmit power meeting a rate-quantile target, by bisection on
//! the dBm axis over a power-conditioned model.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::beamform::BeamMatrix;
use crate::channel::{dbm_to_mw, derive_rng, gen_errors_for, stream, ChannelSample, SystemConfig};
use crate::metrics::{daqe, quantile_index};
use crate::training::{Model, TrainError};

/// Extra probes allowed after the bracket is resolved to `power_tol_db`.
const REFINE_PROBES: usize = 2;

#[derive(Debug, Error)]
pub enum PowerMinError {
    #[error("invalid bisection config: {0}")]
    InvalidConfig(String),
    #[error("iteration cap {cap} exceeded; trace {trace:?}")]
    IterationCap { cap: usize, trace: Vec<(f64, f64)> },
    #[error(transparent)]
    Eval(#[from] TrainError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BisectConfig {
    pub p_lo_dbm: f64,
    pub p_hi_dbm: f64,
    pub target_mbps: f64,
    /// Acceptable distance of the achieved rate from the target.
    pub tolerance_mbps: f64,
    /// Bracket width (dB) below which bisection stops halving.
    pub power_tol_db: f64,
    /// Defaults to the theoretical bound when `None`.
    pub max_iterations: Option<usize>,
    pub error_samples: usize,
}

impl Default for BisectConfig {
    fn default() -> Self {
        Self {
            p_lo_dbm: 0.0,
            p_hi_dbm: 35.0,
            target_mbps: 8.0,
            tolerance_mbps: 0.01,
            power_tol_db: 0.05,
            max_iterations: None,
            error_samples: 1000,
        }
    }
}

impl BisectConfig {
    pub fn validate(&self) -> Result<(), PowerMinError> {
        let bad = |m: &str| Err(PowerMinError::InvalidConfig(m.into()));
        if !(self.p_lo_dbm < self.p_hi_dbm) {
            return bad("p_lo_dbm must be below p_hi_dbm");
        }
        if !(self.tolerance_mbps > 0.0) || !(self.power_tol_db > 0.0) {
            return bad("tolerances must be positive");
        }
        if !self.target_mbps.is_finite() {
            return bad("rate target must be finite");
        }
        Ok(())
    }

    /// `ceil(log2((hi - lo) / power_tol)) + 2`.
    pub fn iteration_bound(&self) -> usize {
        let halvings = ((self.p_hi_dbm - self.p_lo_dbm) / self.power_tol_db).log2().ceil().max(0.0) as usize;
        halvings + REFINE_PROBES
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum BisectStatus {
    Feasible { p_dbm: f64, rate_mbps: f64 },
    Infeasible { rate_at_max_mbps: f64 },
}

/// Outcome of a search over a scalar monotone function.
#[derive(Debug, Clone, PartialEq)]
pub struct SearchResult {
    pub status: BisectStatus,
    /// Interior probes; the two endpoint evaluations are not counted.
    pub iterations: usize,
    /// Every `(p_dbm, rate)` evaluated, in order.
    pub trace: Vec<(f64, f64)>,
}

/// Smallest power in `[p_lo, p_hi]` at which the nondecreasing `rate`
/// reaches the target.
///
/// The bracket keeps `rate(lower) < target <= rate(upper)`. A probe within
/// `tolerance` of the target is returned at once. Once the bracket is
/// narrower than `power_tol_db`, up to two interpolation probes are tried;
/// failing those, the upper endpoint is returned.
pub fn bisect_monotone(
    cfg: &BisectConfig,
    mut rate: impl FnMut(f64) -> Result<f64, PowerMinError>,
) -> Result<SearchResult, PowerMinError> {
    cfg.validate()?;
    let target = cfg.target_mbps;
    let mut trace = Vec::new();
    let mut eval = |p: f64, trace: &mut Vec<(f64, f64)>| -> Result<f64, PowerMinError> {
        let r = rate(p)?;
        trace.push((p, r));
        Ok(r)
    };
    let r_hi = eval(cfg.p_hi_dbm, &mut trace)?;
    if r_hi < target {
        return Ok(SearchResult {
            status: BisectStatus::Infeasible { rate_at_max_mbps: r_hi },
            iterations: 0,
            trace,
        });
    }
    let r_lo = eval(cfg.p_lo_dbm, &mut trace)?;
    let done = |p: f64, r: f64, iterations: usize, trace: Vec<(f64, f64)>| SearchResult {
        status: BisectStatus::Feasible { p_dbm: p, rate_mbps: r },
        iterations,
        trace,
    };
    if r_lo >= target {
        return Ok(done(cfg.p_lo_dbm, r_lo, 0, trace));
    }
    let cap = cfg.max_iterations.unwrap_or_else(|| cfg.iteration_bound());
    let (mut lo, mut hi) = ((cfg.p_lo_dbm, r_lo), (cfg.p_hi_dbm, r_hi));
    let mut iterations = 0;
    let mut refines = 0;
    loop {
        let narrow = hi.0 - lo.0 < cfg.power_tol_db;
        if narrow && refines == REFINE_PROBES {
            return Ok(done(hi.0, hi.1, iterations, trace));
        }
        if iterations == cap {
            if narrow || cfg.max_iterations.is_none() {
                return Ok(done(hi.0, hi.1, iterations, trace));
            }
            return Err(PowerMinError::IterationCap { cap, trace });
        }
        let p = if narrow {
            refines += 1;
            // linear interpolation of the rate inside the bracket
            let t = ((target - lo.1) / (hi.1 - lo.1)).clamp(0.0, 1.0);
            lo.0 + t * (hi.0 - lo.0)
        } else {
            0.5 * (lo.0 + hi.0)
        };
        iterations += 1;
        let r = eval(p, &mut trace)?;
        if (r - target).abs() <= cfg.tolerance_mbps {
            return Ok(done(p, r, iterations, trace));
        }
        if r < target {
            lo = (p, r);
        } else {
            hi = (p, r);
        }
    }
}

/// Power-minimization result for one channel.
#[derive(Debug, Clone, PartialEq)]
pub struct BisectResult {
    pub search: SearchResult,
    /// Beams at the returned power when feasible.
    pub beams: Option<BeamMatrix>,
}

/// Searches the minimum power for one channel. A single error batch and one
/// set of initial messages are drawn per call and reused at every probe, so
/// the searched rate is a fixed function of power.
pub fn bisect_power(
    model: &Model,
    system: &SystemConfig,
    sample: &ChannelSample,
    cfg: &BisectConfig,
    seed: u64,
    tags: &[u64],
) -> Result<BisectResult, PowerMinError> {
    quantile_index(cfg.error_samples, system.outage_target).map_err(TrainError::from)?;
    let mut all = vec![stream::POWER];
    all.extend_from_slice(tags);
    let errs = gen_errors_for(&mut derive_rng(seed, &all), system, sample, cfg.error_samples).map_err(TrainError::from)?;
    let msgs = model.messages(seed, &all, sample.n_antennas(), sample.n_users());
    let noise = system.noise_powers_mw();
    let beams_at = |p_dbm: f64| -> Result<BeamMatrix, TrainError> {
        Ok(model.beams(&sample.h_est, dbm_to_mw(p_dbm), &noise, &msgs)?)
    };
    let search = bisect_monotone(cfg, |p| {
        let w = beams_at(p)?;
        let q = daqe(&sample.h_est, &w, &errs, system.outage_target, system.bandwidth_mhz(), &noise);
        Ok(q.map_err(TrainError::from)?.r_hat)
    })?;
    let beams = match search.status {
        BisectStatus::Feasible { p_dbm, .. } => Some(beams_at(p_dbm)?),
        BisectStatus::Infeasible { .. } => None,
    };
    Ok(BisectResult { search, beams })
}

/// Aggregate over a set of channels at one rate target.
#[derive(Debug, Clone, PartialEq)]
pub struct FeasibilitySummary {
    pub target_mbps: f64,
    pub feasibility: f64,
    /// Mean minimum power over feasible channels (`None` if none are).
    pub mean_p_dbm: Option<f64>,
    pub per_channel: Vec<BisectStatus>,
}

/// Feasible fraction and mean feasible power at `cfg.target_mbps`. Channel
/// `i` uses the same error stream for every target.
pub fn feasibility_rate(
    model: &Model,
    system: &SystemConfig,
    samples: &[ChannelSample],
    cfg: &BisectConfig,
    seed: u64,
) -> Result<FeasibilitySummary, PowerMinError> {
    let per_channel = samples
        .par_iter()
        .enumerate()
        .map(|(i, s)| Ok(bisect_power(model, system, s, cfg, seed, &[i as u64])?.search.status))
        .collect::<Result<Vec<_>, PowerMinError>>()?;
    let feasible: Vec<f64> = per_channel
        .iter()
        .filter_map(|s| match s {
            BisectStatus::Feasible { p_dbm, .. } => Some(*p_dbm),
            BisectStatus::Infeasible { .. } => None,
        })
        .collect();
    Ok(FeasibilitySummary {
        target_mbps: cfg.target_mbps,
        feasibility: feasible.len() as f64 / samples.len().max(1) as f64,
        mean_p_dbm: (!feasible.is_empty()).then(|| feasible.iter().sum::<f64>() / feasible.len() as f64),
        per_channel,
    })
}
