//! System configuration, channel and channel-error generation, and the
//! binary dataset format.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{ComplexMat, NumericsError, RealTensor};

#[derive(Debug, Error)]
pub enum ChannelError {
    #[error("invalid system config: {0}")]
    InvalidConfig(String),
    #[error("distance must be positive, got {0} km")]
    NonpositiveDistance(f64),
    #[error("shape mismatch: {lhs:?} vs {rhs:?}")]
    ShapeMismatch { lhs: Vec<usize>, rhs: Vec<usize> },
    #[error("not a dataset file (bad magic)")]
    BadMagic,
    #[error("unsupported dataset version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("corrupt dataset: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LargeScale {
    pub d_min_km: f64,
    pub d_max_km: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SystemConfig {
    pub n_antennas: usize,
    pub n_users: usize,
    pub bandwidth_hz: f64,
    pub noise_psd_dbm_per_hz: f64,
    pub error_variance: f64,
    pub outage_target: f64,
    pub power_range_dbm: [f64; 2],
    pub large_scale: Option<LargeScale>,
}

impl Default for SystemConfig {
    fn default() -> Self {
        Self {
            n_antennas: 4,
            n_users: 4,
            bandwidth_hz: 10e6,
            noise_psd_dbm_per_hz: -75.0,
            error_variance: 0.075,
            outage_target: 0.05,
            power_range_dbm: [0.0, 35.0],
            large_scale: None,
        }
    }
}

impl SystemConfig {
    pub fn validate(&self) -> Result<(), ChannelError> {
        let bad = |m: &str| Err(ChannelError::InvalidConfig(m.to_string()));
        if self.n_antennas == 0 || self.n_users == 0 {
            return bad("antenna and user counts must be at least 1");
        }
        if !(self.bandwidth_hz > 0.0) || !self.noise_psd_dbm_per_hz.is_finite() {
            return bad("bandwidth must be positive and noise PSD finite");
        }
        if !(self.error_variance >= 0.0) || !self.error_variance.is_finite() {
            return bad("error variance must be nonnegative");
        }
        if !(self.outage_target > 0.0 && self.outage_target < 1.0) {
            return bad("outage target must lie in (0, 1)");
        }
        let [lo, hi] = self.power_range_dbm;
        if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
            return bad("power range must satisfy lo < hi");
        }
        if let Some(ls) = self.large_scale {
            if !(ls.d_min_km > 0.0 && ls.d_min_km <= ls.d_max_km) {
                return bad("large-scale distances must satisfy 0 < d_min <= d_max");
            }
        }
        Ok(())
    }

    /// Per-user noise power in milliwatts.
    pub fn noise_power_mw(&self) -> f64 {
        10f64.powf(self.noise_psd_dbm_per_hz / 10.0) * self.bandwidth_hz
    }

    pub fn noise_powers_mw(&self) -> Vec<f64> {
        vec![self.noise_power_mw(); self.n_users]
    }

    pub fn bandwidth_mhz(&self) -> f64 {
        self.bandwidth_hz / 1e6
    }
}

pub fn dbm_to_mw(dbm: f64) -> f64 {
    10f64.powf(dbm / 10.0)
}

pub fn mw_to_dbm(mw: f64) -> f64 {
    10.0 * mw.log10()
}

/// Path loss in dB at distance `d_km`.
pub fn pathloss_db(d_km: f64) -> Result<f64, ChannelError> {
    if !(d_km > 0.0) {
        return Err(ChannelError::NonpositiveDistance(d_km));
    }
    Ok(128.1 + 37.6 * d_km.log10())
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent stream for `(seed, tags...)`; distinct tag paths give
/// statistically independent streams, identical paths identical ones.
pub fn derive_rng(seed: u64, tags: &[u64]) -> ChaCha8Rng {
    let mut state = seed;
    let mut acc = splitmix64(&mut state);
    for &t in tags {
        state ^= t.wrapping_mul(0xD6E8_FEB8_6659_FD93) ^ acc;
        acc = splitmix64(&mut state);
    }
    let mut key = [0u8; 32];
    for chunk in key.chunks_mut(8) {
        chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}

/// Stream tags separating the uses of a single run seed.
pub mod stream {
    pub const CHANNEL: u64 = 1;
    pub const ERRORS: u64 = 2;
    pub const MESSAGES: u64 = 3;
    pub const INIT: u64 = 4;
    pub const POWER: u64 = 5;
    pub const SHUFFLE: u64 = 6;
    pub const VALIDATION: u64 = 7;
    pub const EVAL: u64 = 8;
}

fn cn_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, variance: f64) -> ComplexMat {
    let sd = (variance / 2.0).sqrt();
    let mut re = Vec::with_capacity(rows * cols);
    let mut im = Vec::with_capacity(rows * cols);
    for _ in 0..rows * cols {
        re.push(sd * rng.sample::<f64, _>(StandardNormal));
        im.push(sd * rng.sample::<f64, _>(StandardNormal));
    }
    ComplexMat {
        re: RealTensor::matrix(rows, cols, re).expect("finite normals"),
        im: RealTensor::matrix(rows, cols, im).expect("finite normals"),
    }
}

/// Estimated channel, optionally with per-user linear large-scale gains.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelSample {
    pub h_est: ComplexMat,
    pub gains: Option<Vec<f64>>,
}

impl ChannelSample {
    pub fn new(h_est: ComplexMat) -> Self {
        Self { h_est, gains: None }
    }

    pub fn n_antennas(&self) -> usize {
        self.h_est.rows()
    }

    pub fn n_users(&self) -> usize {
        self.h_est.cols()
    }
}

pub fn gen_channel(rng: &mut ChaCha8Rng, cfg: &SystemConfig) -> Result<ChannelSample, ChannelError> {
    let mut h = cn_matrix(rng, cfg.n_antennas, cfg.n_users, 1.0);
    let gains = match cfg.large_scale {
        None => None,
        Some(ls) => {
            let mut gains = Vec::with_capacity(cfg.n_users);
            for k in 0..cfg.n_users {
                let d = if ls.d_max_km > ls.d_min_km {
                    rng.random_range(ls.d_min_km..ls.d_max_km)
                } else {
                    ls.d_min_km
                };
                let g = 10f64.powf(-pathloss_db(d)? / 10.0);
                let amp = g.sqrt();
                for n in 0..cfg.n_antennas {
                    let (a, b) = h.get(n, k);
                    h.set(n, k, (a * amp, b * amp));
                }
                gains.push(g);
            }
            Some(gains)
        }
    };
    Ok(ChannelSample { h_est: h, gains })
}

/// A batch of iid channel-error realizations.
#[derive(Debug, Clone, PartialEq)]
pub struct ErrorBatch {
    pub errors: Vec<ComplexMat>,
}

impl ErrorBatch {
    pub fn len(&self) -> usize {
        self.errors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.errors.is_empty()
    }

    /// Scales user column `k` of every error by `sqrt(gains[k])`, so the
    /// error stays proportional to the channel under large-scale fading.
    pub fn scaled_by_gains(mut self, gains: &[f64]) -> Self {
        for e in &mut self.errors {
            for (k, g) in gains.iter().enumerate() {
                let amp = g.sqrt();
                for n in 0..e.rows() {
                    let (a, b) = e.get(n, k);
                    e.set(n, k, (a * amp, b * amp));
                }
            }
        }
        self
    }
}

pub fn gen_errors(
    rng: &mut ChaCha8Rng,
    error_variance: f64,
    n_antennas: usize,
    n_users: usize,
    count: usize,
) -> Result<ErrorBatch, ChannelError> {
    if count == 0 {
        return Err(ChannelError::InvalidConfig("error batch size must be at least 1".into()));
    }
    if !(error_variance >= 0.0) {
        return Err(ChannelError::InvalidConfig("error variance must be nonnegative".into()));
    }
    let errors = (0..count)
        .map(|_| cn_matrix(rng, n_antennas, n_users, error_variance))
        .collect();
    Ok(ErrorBatch { errors })
}

/// Error batch for `sample`, honoring large-scale gains if present.
pub fn gen_errors_for(
    rng: &mut ChaCha8Rng,
    cfg: &SystemConfig,
    sample: &ChannelSample,
    count: usize,
) -> Result<ErrorBatch, ChannelError> {
    let batch = gen_errors(rng, cfg.error_variance, sample.n_antennas(), sample.n_users(), count)?;
    Ok(match &sample.gains {
        Some(g) => batch.scaled_by_gains(g),
        None => batch,
    })
}

/// True channel `H = H_est + E`.
pub fn apply_error(h_est: &ComplexMat, e: &ComplexMat) -> Result<ComplexMat, ChannelError> {
    h_est.add(e).map_err(|_| ChannelError::ShapeMismatch {
        lhs: h_est.re.shape().to_vec(),
        rhs: e.re.shape().to_vec(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    fn tag(self) -> u64 {
        match self {
            Split::Train => 0,
            Split::Validation => 1,
            Split::Test => 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub config: SystemConfig,
    pub seed: u64,
    pub train: Vec<ChannelSample>,
    pub validation: Vec<ChannelSample>,
    pub test: Vec<ChannelSample>,
}

const MAGIC: &[u8; 8] = b"RBFDSET\0";
const VERSION: u32 = 1;

impl Dataset {
    /// Sample `i` of a split is drawn from its own stream, so splits are
    /// disjoint and generation order does not matter.
    pub fn generate(
        config: &SystemConfig,
        seed: u64,
        n_train: usize,
        n_validation: usize,
        n_test: usize,
    ) -> Result<Self, ChannelError> {
        config.validate()?;
        let make = |split: Split, n: usize| -> Result<Vec<ChannelSample>, ChannelError> {
            (0..n)
                .map(|i| {
                    let mut rng = derive_rng(seed, &[stream::CHANNEL, split.tag(), i as u64]);
                    gen_channel(&mut rng, config)
                })
                .collect()
        };
        Ok(Self {
            config: config.clone(),
            seed,
            train: make(Split::Train, n_train)?,
            validation: make(Split::Validation, n_validation)?,
            test: make(Split::Test, n_test)?,
        })
    }

    pub fn split(&self, split: Split) -> &[ChannelSample] {
        match split {
            Split::Train => &self.train,
            Split::Validation => &self.validation,
            Split::Test => &self.test,
        }
    }

    pub fn save(&self, path: &Path) -> Result<(), ChannelError> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ChannelError> {
        Self::read_from(&mut BufReader::new(File::open(path)?))
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<(), ChannelError> {
        let c = &self.config;
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        put_u64(w, c.n_antennas as u64)?;
        put_u64(w, c.n_users as u64)?;
        for v in [
            c.bandwidth_hz,
            c.noise_psd_dbm_per_hz,
            c.error_variance,
            c.outage_target,
            c.power_range_dbm[0],
            c.power_range_dbm[1],
        ] {
            put_f64(w, v)?;
        }
        match c.large_scale {
            Some(ls) => {
                w.write_all(&[1])?;
                put_f64(w, ls.d_min_km)?;
                put_f64(w, ls.d_max_km)?;
            }
            None => w.write_all(&[0])?,
        }
        put_u64(w, self.seed)?;
        for split in [&self.train, &self.validation, &self.test] {
            put_u64(w, split.len() as u64)?;
        }
        for split in [&self.train, &self.validation, &self.test] {
            for s in split {
                if s.h_est.rows() != c.n_antennas || s.h_est.cols() != c.n_users {
                    return Err(ChannelError::ShapeMismatch {
                        lhs: vec![c.n_antennas, c.n_users],
                        rhs: s.h_est.re.shape().to_vec(),
                    });
                }
                w.write_all(&[u8::from(s.gains.is_some())])?;
                for &v in s.h_est.re.data().iter().chain(s.h_est.im.data()) {
                    put_f64(w, v)?;
                }
                if let Some(g) = &s.gains {
                    for &v in g {
                        put_f64(w, v)?;
                    }
                }
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self, ChannelError> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|_| ChannelError::BadMagic)?;
        if &magic != MAGIC {
            return Err(ChannelError::BadMagic);
        }
        let mut vb = [0u8; 4];
        r.read_exact(&mut vb)?;
        let version = u32::from_le_bytes(vb);
        if version != VERSION {
            return Err(ChannelError::VersionMismatch {
                found: version,
                expected: VERSION,
            });
        }
        let n = get_u64(r)? as usize;
        let k = get_u64(r)? as usize;
        let mut f = [0.0; 6];
        for v in &mut f {
            *v = get_f64(r)?;
        }
        let large_scale = match get_u8(r)? {
            0 => None,
            1 => Some(LargeScale {
                d_min_km: get_f64(r)?,
                d_max_km: get_f64(r)?,
            }),
            other => return Err(ChannelError::Corrupt(format!("large-scale flag {other}"))),
        };
        let config = SystemConfig {
            n_antennas: n,
            n_users: k,
            bandwidth_hz: f[0],
            noise_psd_dbm_per_hz: f[1],
            error_variance: f[2],
            outage_target: f[3],
            power_range_dbm: [f[4], f[5]],
            large_scale,
        };
        config.validate()?;
        let seed = get_u64(r)?;
        let counts = [get_u64(r)?, get_u64(r)?, get_u64(r)?];
        let mut splits: Vec<Vec<ChannelSample>> = Vec::with_capacity(3);
        for &count in &counts {
            let mut out = Vec::new();
            for _ in 0..count {
                let has_gains = match get_u8(r)? {
                    0 => false,
                    1 => true,
                    other => return Err(ChannelError::Corrupt(format!("gain flag {other}"))),
                };
                let mut re = vec![0.0; n * k];
                let mut im = vec![0.0; n * k];
                for v in re.iter_mut().chain(im.iter_mut()) {
                    *v = get_f64(r)?;
                }
                let gains = if has_gains {
                    Some((0..k).map(|_| get_f64(r)).collect::<Result<Vec<_>, _>>()?)
                } else {
                    None
                };
                out.push(ChannelSample {
                    h_est: ComplexMat::from_parts(n, k, re, im)?,
                    gains,
                });
            }
            splits.push(out);
        }
        let test = splits.pop().unwrap_or_default();
        let validation = splits.pop().unwrap_or_default();
        let train = splits.pop().unwrap_or_default();
        Ok(Self {
            config,
            seed,
            train,
            validation,
            test,
        })
    }
}

fn put_u64(w: &mut impl Write, v: u64) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn put_f64(w: &mut impl Write, v: f64) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn get_u8(r: &mut impl Read) -> Result<u8, ChannelError> {
    let mut b = [0u8; 1];
    r.read_exact(&mut b)?;
    Ok(b[0])
}

fn get_u64(r: &mut impl Read) -> Result<u64, ChannelError> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn get_f64(r: &mut impl Read) -> Result<f64, ChannelError> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}
