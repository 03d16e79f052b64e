//! Beamformer recovery from per-user features, and fixed-structure baselines.
//!
//! Differentiable variants take tape variables; the plain variants wrap them
//! with constant inputs.

use thiserror::Error;

use crate::numerics::{CVar, ComplexMat, LuFactors, NumericsError, RealTensor, Tape, Var};

/// Floor on `1 + s_k` so the recovery matrix stays positive definite.
pub const S_FLOOR: f64 = 1e-3;

#[derive(Debug, Error)]
pub enum BeamformError {
    #[error("user {user} has an all-zero channel column")]
    ZeroDirection { user: usize },
    #[error("invalid features: {0}")]
    InvalidFeatures(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// Per-user features plus the total power they were normalized to (mW).
#[derive(Debug, Clone, PartialEq)]
pub struct BeamFeatures {
    pub s: Vec<f64>,
    pub p: Vec<f64>,
    pub q: Vec<f64>,
    pub total_power_mw: f64,
}

/// `N x K` beamforming matrix; column `k` serves user `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct BeamMatrix {
    pub w: ComplexMat,
}

impl BeamMatrix {
    /// `sum_k ||w_k||^2` in mW.
    pub fn total_power(&self) -> f64 {
        self.w.frobenius_sqr()
    }
}

/// Feature variables on a tape, each `1 x K`.
#[derive(Debug, Clone, Copy)]
pub struct FeatureVars {
    pub s: Var,
    pub p: Var,
    pub q: Var,
}

fn check_columns(h: &ComplexMat) -> Result<(), BeamformError> {
    for k in 0..h.cols() {
        if h.col_norm_sqr(k) == 0.0 {
            return Err(BeamformError::ZeroDirection { user: k });
        }
    }
    Ok(())
}

fn row(values: &[f64]) -> Result<RealTensor, NumericsError> {
    RealTensor::row(values.to_vec())
}

/// Robust recovery on a tape:
/// `w_k = sqrt(p_k) x_k / ||x_k||`, `x_k = A_k^{-1} h_k`,
/// `A_k = max(1 + s_k, S_FLOOR) I + H diag(q / sigma^2) H^H`.
pub fn recover_robust_var(
    tape: &Tape,
    h: CVar,
    feats: FeatureVars,
    noise_mw: &[f64],
) -> Result<CVar, BeamformError> {
    let hv = tape.cvalue(h);
    let k = hv.cols();
    check_columns(&hv)?;
    if noise_mw.len() != k {
        return Err(BeamformError::InvalidFeatures(format!(
            "{} noise powers for {k} users",
            noise_mw.len()
        )));
    }
    for (name, v) in [("s", feats.s), ("p", feats.p), ("q", feats.q)] {
        if tape.shape(v) != [1, k] {
            return Err(BeamformError::InvalidFeatures(format!(
                "{name} has shape {:?}, expected [1, {k}]",
                tape.shape(v)
            )));
        }
    }
    let inv_noise = tape.constant(row(&noise_mw.iter().map(|s| 1.0 / s).collect::<Vec<_>>())?);
    let weights = tape.mul(feats.q, inv_noise)?;
    let hq = tape.cmul_cols(h, weights)?;
    let hh = tape.conj_transpose(h)?;
    let gram = tape.cmatmul(hq, hh)?;
    let mut cols = Vec::with_capacity(k);
    for user in 0..k {
        let s_k = tape.slice_cols(feats.s, user, 1)?;
        let shifted = tape.offset(s_k, 1.0)?;
        let diag = tape.clamp_min(shifted, S_FLOOR)?;
        let a = CVar {
            re: tape.add_diag(gram.re, diag)?,
            im: gram.im,
        };
        let h_k = tape.cslice_cols(h, user, 1)?;
        let x = tape.csolve(a, h_k)?;
        let p_k = tape.slice_cols(feats.p, user, 1)?;
        cols.push(unit_scaled(tape, x, p_k)?);
    }
    Ok(tape.cconcat_cols(&cols)?)
}

/// `sqrt(p) x / ||x||` for a single column `x`.
fn unit_scaled(tape: &Tape, x: CVar, p: Var) -> Result<CVar, NumericsError> {
    let mag = tape.cabs2(x)?;
    let norm2 = tape.sum_all(mag)?;
    let ratio = tape.div(p, norm2)?;
    let factor = tape.sqrt(ratio)?;
    tape.cmul_cols(x, factor)
}

/// Columns of constant unit `directions` scaled by `sqrt(p_k)`.
pub fn scale_directions_var(tape: &Tape, directions: &ComplexMat, p: Var) -> Result<CVar, BeamformError> {
    let d = tape.cconstant(directions);
    let amp = tape.sqrt(p)?;
    Ok(tape.cmul_cols(d, amp)?)
}

fn features_on(tape: &Tape, feats: &BeamFeatures) -> Result<FeatureVars, BeamformError> {
    let k = feats.s.len();
    if feats.p.len() != k || feats.q.len() != k {
        return Err(BeamformError::InvalidFeatures("s, p, q lengths differ".into()));
    }
    if feats.p.iter().chain(&feats.q).any(|&v| !(v >= 0.0)) {
        return Err(BeamformError::InvalidFeatures("p and q must be nonnegative".into()));
    }
    Ok(FeatureVars {
        s: tape.constant(row(&feats.s)?),
        p: tape.constant(row(&feats.p)?),
        q: tape.constant(row(&feats.q)?),
    })
}

pub fn recover_robust(
    h_est: &ComplexMat,
    feats: &BeamFeatures,
    noise_mw: &[f64],
) -> Result<BeamMatrix, BeamformError> {
    let tape = Tape::new();
    let fv = features_on(&tape, feats)?;
    let h = tape.cconstant(h_est);
    let w = recover_robust_var(&tape, h, fv, noise_mw)?;
    Ok(BeamMatrix { w: tape.cvalue(w) })
}

/// Perfect-CSI structure: robust recovery with `s = 0`.
pub fn recover_perfect(
    h: &ComplexMat,
    p: &[f64],
    q: &[f64],
    noise_mw: &[f64],
) -> Result<BeamMatrix, BeamformError> {
    let feats = BeamFeatures {
        s: vec![0.0; p.len()],
        p: p.to_vec(),
        q: q.to_vec(),
        total_power_mw: p.iter().sum(),
    };
    recover_robust(h, &feats, noise_mw)
}

/// Unit-norm columns `h_k / ||h_k||`.
pub fn mrt_directions(h: &ComplexMat) -> Result<ComplexMat, BeamformError> {
    check_columns(h)?;
    let mut out = h.clone();
    for k in 0..h.cols() {
        let inv = 1.0 / h.col_norm_sqr(k).sqrt();
        for n in 0..h.rows() {
            let (a, b) = h.get(n, k);
            out.set(n, k, (a * inv, b * inv));
        }
    }
    Ok(out)
}

/// Unit-norm columns of `(H H^H + alpha I)^{-1} H`, `alpha = K mean(sigma^2) / P`.
pub fn rzf_directions(h: &ComplexMat, total_power_mw: f64, noise_mw: &[f64]) -> Result<ComplexMat, BeamformError> {
    check_columns(h)?;
    let (n, k) = (h.rows(), h.cols());
    let mean_noise = noise_mw.iter().sum::<f64>() / noise_mw.len().max(1) as f64;
    let alpha = k as f64 * mean_noise / total_power_mw;
    rzf_directions_with(h, alpha, n, k)
}

fn rzf_directions_with(h: &ComplexMat, alpha: f64, n: usize, k: usize) -> Result<ComplexMat, BeamformError> {
    // real embedding of (H H^H + alpha I)
    let dim = 2 * n;
    let mut emb = vec![0.0; dim * dim];
    for i in 0..n {
        for j in 0..n {
            let (mut re, mut im) = (0.0, 0.0);
            for u in 0..k {
                let (ar, ai) = h.get(i, u);
                let (br, bi) = h.get(j, u);
                // a * conj(b)
                re += ar * br + ai * bi;
                im += ai * br - ar * bi;
            }
            if i == j {
                re += alpha;
            }
            emb[i * dim + j] = re;
            emb[i * dim + n + j] = -im;
            emb[(n + i) * dim + j] = im;
            emb[(n + i) * dim + n + j] = re;
        }
    }
    let lu = LuFactors::factor(&emb, dim)?;
    let mut rhs = h.re.data().to_vec();
    rhs.extend_from_slice(h.im.data());
    let x = lu.solve(&rhs, k);
    let raw = ComplexMat::from_parts(n, k, x[..n * k].to_vec(), x[n * k..].to_vec())?;
    mrt_directions(&raw)
}

fn scale_plain(directions: ComplexMat, p: &[f64]) -> Result<BeamMatrix, BeamformError> {
    if p.len() != directions.cols() || p.iter().any(|&v| !(v >= 0.0)) {
        return Err(BeamformError::InvalidFeatures("p must be nonnegative, one per user".into()));
    }
    let mut w = directions;
    for (k, &pk) in p.iter().enumerate() {
        let a = pk.sqrt();
        for n in 0..w.rows() {
            let (x, y) = w.get(n, k);
            w.set(n, k, (x * a, y * a));
        }
    }
    Ok(BeamMatrix { w })
}

pub fn rzf(h_est: &ComplexMat, p: &[f64], noise_mw: &[f64]) -> Result<BeamMatrix, BeamformError> {
    let total: f64 = p.iter().sum();
    scale_plain(rzf_directions(h_est, total, noise_mw)?, p)
}

pub fn mrt(h_est: &ComplexMat, p: &[f64]) -> Result<BeamMatrix, BeamformError> {
    scale_plain(mrt_directions(h_est)?, p)
}

/// Turns raw network outputs into feature variables.
///
/// `raw_s` is `K x 1`; it is scaled by the per-user SNR `P / sigma_k^2` and
/// clamped so `1 + s_k >= S_FLOOR`. `pq` is `K x 2` holding per-user softmax
/// pairs `(p~_k, q~_k)`; `p` and `q` are rescaled to sum to `P`. Returns the
/// features and the number of clamped users.
pub fn normalize_features_var(
    tape: &Tape,
    raw_s: Option<Var>,
    pq: Var,
    total_power_mw: f64,
    noise_mw: &[f64],
) -> Result<(FeatureVars, usize), BeamformError> {
    let k = noise_mw.len();
    if tape.shape(pq) != [k, 2] {
        return Err(BeamformError::InvalidFeatures(format!(
            "power head has shape {:?}, expected [{k}, 2]",
            tape.shape(pq)
        )));
    }
    let total = tape.constant(RealTensor::scalar(total_power_mw)?);
    let normalized = |col: usize| -> Result<Var, BeamformError> {
        let c = tape.slice_cols(pq, col, 1)?;
        let sum = tape.sum_all(c)?;
        if !(tape.item(sum) > 0.0) {
            return Err(BeamformError::InvalidFeatures("power weights sum to zero".into()));
        }
        let factor = tape.div(total, sum)?;
        let scaled = tape.mul_cols(c, factor)?;
        Ok(tape.transpose(scaled)?)
    };
    let p = normalized(0)?;
    let q = normalized(1)?;
    let (s, clamped) = match raw_s {
        None => (tape.constant(RealTensor::zeros(vec![1, k])), 0),
        Some(raw) => {
            if tape.shape(raw) != [k, 1] {
                return Err(BeamformError::InvalidFeatures(format!(
                    "interference head has shape {:?}, expected [{k}, 1]",
                    tape.shape(raw)
                )));
            }
            let snr = tape.constant(row(&noise_mw.iter().map(|s| total_power_mw / s).collect::<Vec<_>>())?);
            let rt = tape.transpose(raw)?;
            let scaled = tape.mul(rt, snr)?;
            let shifted = tape.offset(scaled, 1.0)?;
            let clamped = tape.value(shifted).data().iter().filter(|&&v| v < S_FLOOR).count();
            let floor = tape.clamp_min(shifted, S_FLOOR)?;
            (tape.offset(floor, -1.0)?, clamped)
        }
    };
    Ok((FeatureVars { s, p, q }, clamped))
}

/// Plain counterpart of [`normalize_features_var`]; `raw_s` is taken as the
/// already SNR-scaled interference feature (only clamped here).
pub fn normalize_features(
    raw_s: &[f64],
    p_tilde: &[f64],
    q_tilde: &[f64],
    total_power_mw: f64,
) -> Result<(BeamFeatures, usize), BeamformError> {
    let k = raw_s.len();
    if p_tilde.len() != k || q_tilde.len() != k {
        return Err(BeamformError::InvalidFeatures("feature lengths differ".into()));
    }
    let norm = |v: &[f64]| -> Result<Vec<f64>, BeamformError> {
        let sum: f64 = v.iter().sum();
        if !(sum > 0.0) || v.iter().any(|&x| x < 0.0) {
            return Err(BeamformError::InvalidFeatures("power weights must be nonnegative and not all zero".into()));
        }
        Ok(v.iter().map(|x| total_power_mw * x / sum).collect())
    };
    let floor = S_FLOOR - 1.0;
    let clamped = raw_s.iter().filter(|&&s| s < floor).count();
    Ok((
        BeamFeatures {
            s: raw_s.iter().map(|&s| s.max(floor)).collect(),
            p: norm(p_tilde)?,
            q: norm(q_tilde)?,
            total_power_mw,
        },
        clamped,
    ))
}
