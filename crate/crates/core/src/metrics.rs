//! SINR, rates, empirical outage and the Monte-Carlo rate-quantile estimator.

use thiserror::Error;

use crate::beamform::BeamMatrix;
use crate::channel::{apply_error, ChannelError, ErrorBatch};
use crate::numerics::{CVar, ComplexMat, NumericsError, RealTensor, Tape, Var};

/// Quantile indices within this distance of an integer are treated as exact.
const INDEX_SNAP: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("quantile index U*rho = {index} is below 1 (U = {samples}, rho = {rho})")]
    QuantileUnderflow { index: f64, samples: usize, rho: f64 },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("empty error batch")]
    EmptyBatch,
    #[error(transparent)]
    Channel(#[from] ChannelError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// Order-statistic ranks (1-based) and interpolation weight of the
/// `rho`-quantile over `samples` values.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantileIndex {
    pub lower: usize,
    pub upper: usize,
    pub beta: f64,
}

pub fn quantile_index(samples: usize, rho: f64) -> Result<QuantileIndex, MetricsError> {
    let mut index = samples as f64 * rho;
    if (index - index.round()).abs() < INDEX_SNAP {
        index = index.round();
    }
    if !(index >= 1.0) {
        return Err(MetricsError::QuantileUnderflow { index, samples, rho });
    }
    let lower = index.floor() as usize;
    let beta = index - lower as f64;
    let upper = if beta > 0.0 { lower + 1 } else { lower };
    Ok(QuantileIndex {
        lower: lower.min(samples),
        upper: upper.min(samples),
        beta,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantileResult {
    /// Quantile rate in Mbps.
    pub r_hat: f64,
    pub lower: usize,
    pub upper: usize,
    pub beta: f64,
}

/// Differentiable quantile: the scalar variable plus its index data.
#[derive(Debug, Clone, Copy)]
pub struct QuantileVar {
    pub r_hat: Var,
    pub index: QuantileIndex,
}

/// `Gamma_k = |h_k^H w_k|^2 / (sum_{j != k} |h_k^H w_j|^2 + sigma_k^2)`.
pub fn sinr(h: &ComplexMat, w: &BeamMatrix, noise_mw: &[f64]) -> Result<Vec<f64>, MetricsError> {
    let (n, k) = (h.rows(), h.cols());
    if w.w.rows() != n || w.w.cols() != k || noise_mw.len() != k {
        return Err(MetricsError::ShapeMismatch(format!(
            "channel {n}x{k}, beams {}x{}, {} noise powers",
            w.w.rows(),
            w.w.cols(),
            noise_mw.len()
        )));
    }
    let gains = cross_gains(h, &w.w);
    Ok((0..k)
        .map(|u| {
            let row = &gains[u * k..(u + 1) * k];
            let interference: f64 = row.iter().enumerate().filter(|&(j, _)| j != u).map(|(_, g)| g).sum();
            row[u] / (interference + noise_mw[u])
        })
        .collect())
}

/// `|h_k^H w_j|^2` laid out row-major over `(k, j)`.
fn cross_gains(h: &ComplexMat, w: &ComplexMat) -> Vec<f64> {
    let (n, k) = (h.rows(), h.cols());
    let mut out = vec![0.0; k * k];
    for u in 0..k {
        for j in 0..k {
            let (mut re, mut im) = (0.0, 0.0);
            for a in 0..n {
                let (hr, hi) = h.get(a, u);
                let (wr, wi) = w.get(a, j);
                // conj(h) * w
                re += hr * wr + hi * wi;
                im += hr * wi - hi * wr;
            }
            out[u * k + j] = re * re + im * im;
        }
    }
    out
}

/// Rates in Mbps for bandwidth in MHz.
pub fn rate(sinr: &[f64], bandwidth_mhz: f64) -> Vec<f64> {
    sinr.iter().map(|g| bandwidth_mhz * g.log2_1p()).collect()
}

trait Log2OnePlus {
    fn log2_1p(self) -> f64;
}

impl Log2OnePlus for f64 {
    fn log2_1p(self) -> f64 {
        self.ln_1p() / std::f64::consts::LN_2
    }
}

/// Minimum user rate for each error realization.
pub fn min_rates(
    h_est: &ComplexMat,
    w: &BeamMatrix,
    errs: &ErrorBatch,
    bandwidth_mhz: f64,
    noise_mw: &[f64],
) -> Result<Vec<f64>, MetricsError> {
    errs.errors
        .iter()
        .map(|e| {
            let h = apply_error(h_est, e)?;
            let r = rate(&sinr(&h, w, noise_mw)?, bandwidth_mhz);
            Ok(r.into_iter().fold(f64::INFINITY, f64::min))
        })
        .collect()
}

/// Fraction of error realizations whose minimum rate is at most `r`.
pub fn empirical_outage(
    h_est: &ComplexMat,
    w: &BeamMatrix,
    errs: &ErrorBatch,
    r: f64,
    bandwidth_mhz: f64,
    noise_mw: &[f64],
) -> Result<f64, MetricsError> {
    if errs.is_empty() {
        return Err(MetricsError::EmptyBatch);
    }
    let mins = min_rates(h_est, w, errs, bandwidth_mhz, noise_mw)?;
    Ok(mins.iter().filter(|&&m| m <= r).count() as f64 / mins.len() as f64)
}

/// Interpolated order statistic of a `U x 1` variable of per-sample values.
pub fn quantile_var(tape: &Tape, values: Var, rho: f64) -> Result<QuantileVar, MetricsError> {
    let u = tape.value(values).numel();
    let index = quantile_index(u, rho)?;
    let lo = tape.order_select(values, index.lower)?;
    let r_hat = if index.beta > 0.0 {
        let hi = tape.order_select(values, index.upper)?;
        let gap = tape.sub(hi, lo)?;
        let step = tape.scale(gap, index.beta)?;
        tape.add(lo, step)?
    } else {
        lo
    };
    Ok(QuantileVar { r_hat, index })
}

/// Differentiable rate quantile of beams `w` over the error batch.
///
/// Every error realization is evaluated in one stacked product:
/// row `u*K + k` of the stacked matrix holds `h_{u,k}^H W`.
pub fn daqe_var(
    tape: &Tape,
    h_est: &ComplexMat,
    w: CVar,
    errs: &ErrorBatch,
    rho: f64,
    bandwidth_mhz: f64,
    noise_mw: &[f64],
) -> Result<QuantileVar, MetricsError> {
    let (n, k) = (h_est.rows(), h_est.cols());
    let u = errs.len();
    if u == 0 {
        return Err(MetricsError::EmptyBatch);
    }
    quantile_index(u, rho)?;
    if noise_mw.len() != k || tape.shape(w.re) != [n, k] {
        return Err(MetricsError::ShapeMismatch(format!(
            "channel {n}x{k}, beams {:?}, {} noise powers",
            tape.shape(w.re),
            noise_mw.len()
        )));
    }
    // conj-transposed true channels, stacked
    let mut re = Vec::with_capacity(u * k * n);
    let mut im = Vec::with_capacity(u * k * n);
    for e in &errs.errors {
        if e.rows() != n || e.cols() != k {
            return Err(MetricsError::ShapeMismatch(format!("error {}x{} vs channel {n}x{k}", e.rows(), e.cols())));
        }
        for user in 0..k {
            for a in 0..n {
                let (hr, hi) = h_est.get(a, user);
                let (er, ei) = e.get(a, user);
                re.push(hr + er);
                im.push(-(hi + ei));
            }
        }
    }
    let stacked = tape.cconstant(&ComplexMat::from_parts(u * k, n, re, im)?);
    let products = tape.cmatmul(stacked, w)?;
    let power = tape.cabs2(products)?;
    let signal = tape.diag_blocks(power)?;
    let total = tape.row_sum(power)?;
    let interference = tape.sub(total, signal)?;
    let noise_col: Vec<f64> = (0..u * k).map(|r| noise_mw[r % k]).collect();
    let noise = tape.constant(RealTensor::column(noise_col)?);
    let denom = tape.add(interference, noise)?;
    let gamma = tape.div(signal, denom)?;
    let spectral = tape.log2_1p(gamma)?;
    let rates = tape.scale(spectral, bandwidth_mhz)?;
    let grid = tape.reshape(rates, vec![u, k])?;
    let minima = tape.min_rows(grid)?;
    quantile_var(tape, minima, rho)
}

pub fn daqe(
    h_est: &ComplexMat,
    w: &BeamMatrix,
    errs: &ErrorBatch,
    rho: f64,
    bandwidth_mhz: f64,
    noise_mw: &[f64],
) -> Result<QuantileResult, MetricsError> {
    let tape = Tape::new();
    let wv = tape.cconstant(&w.w);
    let q = daqe_var(&tape, h_est, wv, errs, rho, bandwidth_mhz, noise_mw)?;
    Ok(QuantileResult {
        r_hat: tape.item(q.r_hat),
        lower: q.index.lower,
        upper: q.index.upper,
        beta: q.index.beta,
    })
}
