use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::beamform::{normalize_features_var, rzf_directions, scale_directions_var, BeamMatrix};
use crate::bgnn::{
    init_messages, pipeline_forward_var, BgnnConfig, BgnnError, BgnnParams, BoundBgnn, BoundMlp, MessagesState, Mlp,
    POWER_SCALE_DBM,
};
use crate::channel::{derive_rng, mw_to_dbm, stream};
use crate::numerics::{Activation, CVar, ComplexMat, RealTensor, Tape, Var};

/// Which learned pipeline a model implements.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Interference features and powers, robust recovery.
    Proposed,
    /// Same as `Proposed` with the interference feature fixed at zero.
    SZero,
    /// Learned downlink powers on fixed RZF directions.
    RzfPowerOnly,
    /// A plain network mapping the channel straight to beams.
    DirectDnn,
}

impl Mode {
    pub const ALL: [Mode; 4] = [Mode::Proposed, Mode::SZero, Mode::RzfPowerOnly, Mode::DirectDnn];

    pub fn name(self) -> &'static str {
        match self {
            Mode::Proposed => "proposed",
            Mode::SZero => "s_zero",
            Mode::RzfPowerOnly => "rzf_power_only",
            Mode::DirectDnn => "direct_dnn",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.name() == s)
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Which network a slot holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Slot {
    Interference,
    Power,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub mode: Mode,
    pub n_antennas: usize,
    pub n_users: usize,
    pub snet: Option<BgnnParams>,
    pub pnet: Option<BgnnParams>,
    pub dnn: Option<Mlp>,
}

/// Hidden width of the direct network.
pub const DNN_HIDDEN: usize = 200;

impl Model {
    pub fn init(
        rng: &mut ChaCha8Rng,
        mode: Mode,
        snet: &BgnnConfig,
        pnet: &BgnnConfig,
        n_antennas: usize,
        n_users: usize,
    ) -> Result<Self, BgnnError> {
        let mut model = Self {
            mode,
            n_antennas,
            n_users,
            snet: None,
            pnet: None,
            dnn: None,
        };
        match mode {
            Mode::Proposed => {
                model.snet = Some(BgnnParams::init(rng, snet)?);
                model.pnet = Some(BgnnParams::init(rng, pnet)?);
            }
            Mode::SZero | Mode::RzfPowerOnly => model.pnet = Some(BgnnParams::init(rng, pnet)?),
            Mode::DirectDnn => {
                let io = 2 * n_antennas * n_users;
                model.dnn = Some(Mlp::new(
                    rng,
                    &[io + 1, DNN_HIDDEN, DNN_HIDDEN, io],
                    Activation::Relu,
                    Activation::Linear,
                ));
            }
        }
        model.validate()?;
        Ok(model)
    }

    /// Checks that each slot holds the right kind of network for the mode.
    pub fn validate(&self) -> Result<(), BgnnError> {
        let need = |present: bool, wanted: bool, what: &str| {
            if present != wanted {
                Err(BgnnError::ConfigMismatch(format!(
                    "mode {} {} a {what}",
                    self.mode,
                    if wanted { "requires" } else { "does not use" }
                )))
            } else {
                Ok(())
            }
        };
        let (s, p, d) = match self.mode {
            Mode::Proposed => (true, true, false),
            Mode::SZero | Mode::RzfPowerOnly => (false, true, false),
            Mode::DirectDnn => (false, false, true),
        };
        need(self.snet.is_some(), s, "interference network")?;
        need(self.pnet.is_some(), p, "power network")?;
        need(self.dnn.is_some(), d, "direct network")?;
        if let Some(net) = &self.snet {
            check_slot(net, Slot::Interference)?;
        }
        if let Some(net) = &self.pnet {
            check_slot(net, Slot::Power)?;
        }
        if let Some(dnn) = &self.dnn {
            let io = 2 * self.n_antennas * self.n_users;
            if dnn.input_dim() != io + 1 || dnn.output_dim() != io {
                return Err(BgnnError::ConfigMismatch(format!(
                    "direct network maps {} -> {}, expected {} -> {io}",
                    dnn.input_dim(),
                    dnn.output_dim(),
                    io + 1
                )));
            }
        }
        Ok(())
    }

    /// Replaces the network in `slot` after checking it fits there.
    pub fn set_net(&mut self, slot: Slot, params: BgnnParams) -> Result<(), BgnnError> {
        check_slot(&params, slot)?;
        match slot {
            Slot::Interference => self.snet = Some(params),
            Slot::Power => self.pnet = Some(params),
        }
        Ok(())
    }

    pub fn tensors(&self) -> Vec<&RealTensor> {
        let mut out: Vec<&RealTensor> = Vec::new();
        for net in [&self.snet, &self.pnet].into_iter().flatten() {
            out.extend(net.tensors());
        }
        if let Some(d) = &self.dnn {
            out.extend(d.tensors());
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut RealTensor> {
        let mut out: Vec<&mut RealTensor> = Vec::new();
        for net in [&mut self.snet, &mut self.pnet].into_iter().flatten() {
            out.extend(net.tensors_mut());
        }
        if let Some(d) = &mut self.dnn {
            out.extend(d.tensors_mut());
        }
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|t| t.numel()).sum()
    }

    /// Initial messages for the stream identified by `tags`.
    pub fn messages(&self, seed: u64, tags: &[u64], n: usize, k: usize) -> SampleMessages {
        let mut all = vec![stream::MESSAGES];
        all.extend_from_slice(tags);
        let mut rng = derive_rng(seed, &all);
        let mut draw = |net: &Option<BgnnParams>| {
            net.as_ref()
                .map(|p| init_messages(&mut rng, n, k, p.config.message_dim, p.config.head_dim))
        };
        let s = draw(&self.snet);
        let p = draw(&self.pnet);
        SampleMessages { s, p }
    }

    pub fn bind(&self, tape: &Tape, trainable: bool) -> BoundModel {
        let mut vars = Vec::new();
        let snet = self.snet.as_ref().map(|p| {
            let b = p.bind(tape, trainable);
            vars.extend(&b.vars);
            b
        });
        let pnet = self.pnet.as_ref().map(|p| {
            let b = p.bind(tape, trainable);
            vars.extend(&b.vars);
            b
        });
        let dnn = self.dnn.as_ref().map(|d| BoundMlp::bind(tape, d, trainable, &mut vars));
        BoundModel {
            mode: self.mode,
            snet,
            pnet,
            dnn,
            vars,
        }
    }

    /// Beamformer at `power_mw`, without gradients.
    pub fn beams(
        &self,
        h_est: &ComplexMat,
        power_mw: f64,
        noise_mw: &[f64],
        messages: &SampleMessages,
    ) -> Result<BeamMatrix, BgnnError> {
        let tape = Tape::new();
        let bound = self.bind(&tape, false);
        let h = tape.cconstant(h_est);
        let (w, _) = bound.beams(&tape, h_est, h, power_mw, noise_mw, messages)?;
        Ok(BeamMatrix { w: tape.cvalue(w) })
    }
}

fn check_slot(params: &BgnnParams, slot: Slot) -> Result<(), BgnnError> {
    params.validate()?;
    let c = &params.config;
    let ok = match slot {
        Slot::Interference => c.head_dim == 1 && c.head_activation == Activation::Linear,
        Slot::Power => c.head_dim == 2 && c.head_activation == Activation::Softmax,
    };
    if !ok {
        return Err(BgnnError::ConfigMismatch(format!(
            "network with head {}x{:?} cannot fill the {slot:?} slot",
            c.head_dim, c.head_activation
        )));
    }
    Ok(())
}

/// Initial messages for one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleMessages {
    pub s: Option<MessagesState>,
    pub p: Option<MessagesState>,
}

/// Model weights bound to a tape.
pub struct BoundModel {
    pub mode: Mode,
    snet: Option<BoundBgnn>,
    pnet: Option<BoundBgnn>,
    dnn: Option<BoundMlp>,
    /// Leaves in the order of [`Model::tensors`].
    pub vars: Vec<Var>,
}

impl BoundModel {
    /// Beam variables and the number of clamped interference features.
    pub fn beams(
        &self,
        tape: &Tape,
        h_est: &ComplexMat,
        h: CVar,
        power_mw: f64,
        noise_mw: &[f64],
        messages: &SampleMessages,
    ) -> Result<(CVar, usize), BgnnError> {
        let missing = || BgnnError::ConfigMismatch("initial messages missing for a network".into());
        match self.mode {
            Mode::Proposed | Mode::SZero => {
                let pnet = self.pnet.as_ref().ok_or_else(missing)?;
                let pm = messages.p.as_ref().ok_or_else(missing)?;
                let snet = match (&self.snet, self.mode) {
                    (Some(s), Mode::Proposed) => Some((s, messages.s.as_ref().ok_or_else(missing)?)),
                    _ => None,
                };
                pipeline_forward_var(tape, snet, (pnet, pm), h_est, h, power_mw, noise_mw)
            }
            Mode::RzfPowerOnly => {
                let pnet = self.pnet.as_ref().ok_or_else(missing)?;
                let pm = messages.p.as_ref().ok_or_else(missing)?;
                let pq = pnet.forward(tape, h_est, mw_to_dbm(power_mw), pm)?;
                let (feats, _) = normalize_features_var(tape, None, pq, power_mw, noise_mw)?;
                let dirs = rzf_directions(h_est, power_mw, noise_mw)?;
                Ok((scale_directions_var(tape, &dirs, feats.p)?, 0))
            }
            Mode::DirectDnn => {
                let dnn = self.dnn.as_ref().ok_or_else(missing)?;
                Ok((direct_beams(tape, dnn, h_est, power_mw)?, 0))
            }
        }
    }
}

/// Channel flattened with the normalized power appended, mapped to a raw
/// beam matrix that is then rescaled to total power `power_mw`.
fn direct_beams(tape: &Tape, dnn: &BoundMlp, h_est: &ComplexMat, power_mw: f64) -> Result<CVar, BgnnError> {
    let (n, k) = (h_est.rows(), h_est.cols());
    let mut input: Vec<f64> = h_est.re.data().to_vec();
    input.extend_from_slice(h_est.im.data());
    input.push(mw_to_dbm(power_mw) / POWER_SCALE_DBM);
    let x = tape.constant(RealTensor::row(input)?);
    let out = dnn.forward(tape, x)?;
    let nk = n * k;
    let re = tape.slice_cols(out, 0, nk)?;
    let im = tape.slice_cols(out, nk, nk)?;
    let raw = CVar {
        re: tape.reshape(re, vec![nk, 1])?,
        im: tape.reshape(im, vec![nk, 1])?,
    };
    let mag = tape.cabs2(raw)?;
    let norm2 = tape.sum_all(mag)?;
    let budget = tape.constant(RealTensor::scalar(power_mw)?);
    let ratio = tape.div(budget, norm2)?;
    let factor = tape.sqrt(ratio)?;
    let scaled = tape.cmul_cols(raw, factor)?;
    Ok(CVar {
        re: tape.reshape(scaled.re, vec![n, k])?,
        im: tape.reshape(scaled.im, vec![n, k])?,
    })
}
