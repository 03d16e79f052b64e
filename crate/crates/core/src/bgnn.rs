//! Bipartite message passing between antenna and user vertices.
//!
//! Edges are ordered antenna-major: edge `e = n * K + k` joins antenna `n`
//! and user `k`. Every aggregation is an order-independent sum pool, so
//! permuting users permutes the decisions and permuting antennas leaves them
//! unchanged, bit for bit.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::beamform::{normalize_features_var, recover_robust_var, BeamMatrix, BeamformError};
use crate::channel::{derive_rng, mw_to_dbm, stream};
use crate::numerics::{Activation, CVar, ComplexMat, NumericsError, RealTensor, Tape, Var};

/// Power input fed to the decision nets is `P_dBm / POWER_SCALE_DBM`.
pub const POWER_SCALE_DBM: f64 = 35.0;

#[derive(Debug, Error)]
pub enum BgnnError {
    #[error("config mismatch: {0}")]
    ConfigMismatch(String),
    #[error(transparent)]
    Beamform(#[from] BeamformError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BgnnConfig {
    pub layers: usize,
    pub message_dim: usize,
    pub hidden: usize,
    pub head_dim: usize,
    pub head_activation: Activation,
    pub power_input: bool,
}

impl BgnnConfig {
    /// Interference-feature network: one linear output per user.
    pub fn snet() -> Self {
        Self {
            layers: 5,
            message_dim: 3,
            hidden: 200,
            head_dim: 1,
            head_activation: Activation::Linear,
            power_input: true,
        }
    }

    /// Power network: a softmax pair `(p~, q~)` per user.
    pub fn pnet() -> Self {
        Self {
            layers: 5,
            message_dim: 5,
            hidden: 200,
            head_dim: 2,
            head_activation: Activation::Softmax,
            power_input: true,
        }
    }

    pub fn validate(&self) -> Result<(), BgnnError> {
        if self.layers == 0 || self.message_dim == 0 || self.hidden == 0 || self.head_dim == 0 {
            return Err(BgnnError::ConfigMismatch(
                "layers, message_dim, hidden and head_dim must be at least 1".into(),
            ));
        }
        Ok(())
    }

    pub fn user_net_dims(&self) -> (usize, usize) {
        (self.head_dim + self.message_dim + 2, self.message_dim)
    }

    pub fn antenna_net_dims(&self) -> (usize, usize) {
        (3 * self.message_dim + 2, self.message_dim)
    }

    pub fn decision_net_dims(&self) -> (usize, usize) {
        (2 * self.message_dim + usize::from(self.power_input), self.head_dim)
    }
}

/// Fully connected layer `x W + b` with `W: in x out`, `b: 1 x out`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub weight: RealTensor,
    pub bias: RealTensor,
}

impl Dense {
    /// Glorot-uniform weights, zero bias.
    pub fn glorot(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Self {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data = (0..fan_in * fan_out).map(|_| rng.random_range(-limit..=limit)).collect();
        Self {
            weight: RealTensor::matrix(fan_in, fan_out, data).expect("finite init"),
            bias: RealTensor::zeros(vec![1, fan_out]),
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.weight.rows(), self.weight.cols())
    }
}

/// Multilayer perceptron; every layer but the last uses `hidden_activation`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Dense>,
    pub hidden_activation: Activation,
    pub output_activation: Activation,
}

impl Mlp {
    pub fn new(rng: &mut ChaCha8Rng, widths: &[usize], hidden: Activation, output: Activation) -> Self {
        Self {
            layers: widths.windows(2).map(|w| Dense::glorot(rng, w[0], w[1])).collect(),
            hidden_activation: hidden,
            output_activation: output,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layers.first().map_or(0, |l| l.dims().0)
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.dims().1)
    }

    /// Widths from input to output.
    pub fn widths(&self) -> Vec<usize> {
        let mut w: Vec<usize> = self.layers.iter().map(|l| l.dims().0).collect();
        w.push(self.output_dim());
        w
    }

    pub fn tensors(&self) -> Vec<&RealTensor> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias]).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut RealTensor> {
        self.layers.iter_mut().flat_map(|l| [&mut l.weight, &mut l.bias]).collect()
    }

    fn check(&self, name: &str, widths: &[usize], output: Activation) -> Result<(), BgnnError> {
        if self.widths() != widths || self.output_activation != output {
            return Err(BgnnError::ConfigMismatch(format!(
                "{name}: widths {:?} / {:?} head, expected {widths:?} / {output:?}",
                self.widths(),
                self.output_activation
            )));
        }
        for (i, l) in self.layers.iter().enumerate() {
            if l.bias.shape() != [1, l.dims().1] {
                return Err(BgnnError::ConfigMismatch(format!("{name}: layer {i} bias shape")));
            }
        }
        Ok(())
    }
}

/// Tape-bound MLP weights.
#[derive(Debug, Clone)]
pub struct BoundMlp {
    layers: Vec<(Var, Var)>,
    hidden_activation: Activation,
    output_activation: Activation,
}

impl BoundMlp {
    pub fn bind(tape: &Tape, mlp: &Mlp, trainable: bool, vars: &mut Vec<Var>) -> Self {
        let leaf = |t: &RealTensor| if trainable { tape.param(t.clone()) } else { tape.constant(t.clone()) };
        let layers = mlp
            .layers
            .iter()
            .map(|l| {
                let (w, b) = (leaf(&l.weight), leaf(&l.bias));
                vars.push(w);
                vars.push(b);
                (w, b)
            })
            .collect();
        Self {
            layers,
            hidden_activation: mlp.hidden_activation,
            output_activation: mlp.output_activation,
        }
    }

    /// Applies the network row-wise to `x`.
    pub fn forward(&self, tape: &Tape, x: Var) -> Result<Var, NumericsError> {
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, &(w, b)) in self.layers.iter().enumerate() {
            let z = tape.matmul(h, w)?;
            let z = tape.add_bias(z, b)?;
            let act = if i == last { self.output_activation } else { self.hidden_activation };
            h = tape.activation(z, act)?;
        }
        Ok(h)
    }
}

/// The three vertex operators of one message-passing layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerParams {
    /// User vertex: `(g_k, b_k, Re h, Im h) -> c_kn`.
    pub user: Mlp,
    /// Antenna vertex: `(m_nk, c_n, Re h, Im h) -> b_nk`.
    pub antenna: Mlp,
    /// Decision: `(m_k, p_norm) -> g_k`.
    pub decision: Mlp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BgnnParams {
    pub config: BgnnConfig,
    pub layers: Vec<LayerParams>,
}

impl BgnnParams {
    pub fn init(rng: &mut ChaCha8Rng, config: &BgnnConfig) -> Result<Self, BgnnError> {
        config.validate()?;
        let z = config.hidden;
        let mlp = |rng: &mut ChaCha8Rng, (i, o): (usize, usize), head: Activation| {
            Mlp::new(rng, &[i, z, o], Activation::Relu, head)
        };
        let layers = (0..config.layers)
            .map(|_| LayerParams {
                user: mlp(rng, config.user_net_dims(), Activation::Tanh),
                antenna: mlp(rng, config.antenna_net_dims(), Activation::Tanh),
                decision: mlp(rng, config.decision_net_dims(), config.head_activation),
            })
            .collect();
        Ok(Self {
            config: config.clone(),
            layers,
        })
    }

    /// Checks every tensor against the dimensions implied by the config.
    pub fn validate(&self) -> Result<(), BgnnError> {
        let c = &self.config;
        c.validate()?;
        if self.layers.len() != c.layers {
            return Err(BgnnError::ConfigMismatch(format!(
                "{} layers stored, config says {}",
                self.layers.len(),
                c.layers
            )));
        }
        let widths = |(i, o): (usize, usize)| [i, c.hidden, o];
        for l in &self.layers {
            l.user.check("user net", &widths(c.user_net_dims()), Activation::Tanh)?;
            l.antenna.check("antenna net", &widths(c.antenna_net_dims()), Activation::Tanh)?;
            l.decision.check("decision net", &widths(c.decision_net_dims()), c.head_activation)?;
        }
        Ok(())
    }

    pub fn tensors(&self) -> Vec<&RealTensor> {
        self.layers
            .iter()
            .flat_map(|l| [&l.user, &l.antenna, &l.decision])
            .flat_map(Mlp::tensors)
            .collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut RealTensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.user, &mut l.antenna, &mut l.decision])
            .flat_map(Mlp::tensors_mut)
            .collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|t| t.numel()).sum()
    }

    pub fn bind(&self, tape: &Tape, trainable: bool) -> BoundBgnn {
        let mut vars = Vec::new();
        let layers = self
            .layers
            .iter()
            .map(|l| {
                (
                    BoundMlp::bind(tape, &l.user, trainable, &mut vars),
                    BoundMlp::bind(tape, &l.antenna, trainable, &mut vars),
                    BoundMlp::bind(tape, &l.decision, trainable, &mut vars),
                )
            })
            .collect();
        BoundBgnn {
            config: self.config.clone(),
            layers,
            vars,
        }
    }
}

/// Messages carried between layers.
#[derive(Debug, Clone, PartialEq)]
pub struct MessagesState {
    /// `K x head_dim` decisions.
    pub g: RealTensor,
    /// `K x M` aggregated antenna messages per user.
    pub b: RealTensor,
    /// `(N*K) x 2M` antenna memories, antenna-major edge order.
    pub m: RealTensor,
}

pub fn init_messages(rng: &mut ChaCha8Rng, n: usize, k: usize, m: usize, dim_g: usize) -> MessagesState {
    let mut draw = |rows: usize, cols: usize| {
        let data = (0..rows * cols).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        RealTensor::matrix(rows, cols, data).expect("finite normals")
    };
    MessagesState {
        g: draw(k, dim_g),
        b: draw(k, m),
        m: draw(n * k, 2 * m),
    }
}

/// Messages for sample `index` of a run seeded with `seed`, for both nets.
pub fn sample_messages(seed: u64, index: u64, n: usize, k: usize, s: &BgnnConfig, p: &BgnnConfig) -> (MessagesState, MessagesState) {
    let mut rng = derive_rng(seed, &[stream::MESSAGES, index]);
    let ms = init_messages(&mut rng, n, k, s.message_dim, s.head_dim);
    let mp = init_messages(&mut rng, n, k, p.message_dim, p.head_dim);
    (ms, mp)
}

/// Messages as tape variables.
#[derive(Debug, Clone, Copy)]
pub struct MessageVars {
    pub g: Var,
    pub b: Var,
    pub m: Var,
}

/// Edge-index bookkeeping for an `N x K` bipartite graph.
#[derive(Debug, Clone)]
pub struct Graph {
    pub n: usize,
    pub k: usize,
    edge_user: Vec<usize>,
    edge_antenna: Vec<usize>,
    by_antenna: Vec<Vec<usize>>,
    by_user: Vec<Vec<usize>>,
    others: Vec<Vec<usize>>,
}

impl Graph {
    pub fn new(n: usize, k: usize) -> Self {
        let edges = 0..n * k;
        Self {
            n,
            k,
            edge_user: edges.clone().map(|e| e % k).collect(),
            edge_antenna: edges.clone().map(|e| e / k).collect(),
            by_antenna: (0..n).map(|a| (0..k).map(|u| a * k + u).collect()).collect(),
            by_user: (0..k).map(|u| (0..n).map(|a| a * k + u).collect()).collect(),
            others: edges
                .map(|e| {
                    let (a, u) = (e / k, e % k);
                    (0..k).filter(|&j| j != u).map(|j| a * k + j).collect()
                })
                .collect(),
        }
    }
}

/// Per-edge channel features `[Re h_nk, Im h_nk]` as an `(N*K) x 2` tensor.
pub fn edge_features(h: &ComplexMat) -> RealTensor {
    let (n, k) = (h.rows(), h.cols());
    let mut data = Vec::with_capacity(n * k * 2);
    for a in 0..n {
        for u in 0..k {
            let (re, im) = h.get(a, u);
            data.push(re);
            data.push(im);
        }
    }
    RealTensor::matrix(n * k, 2, data).expect("finite channel")
}

/// Network weights bound to a tape.
#[derive(Debug, Clone)]
pub struct BoundBgnn {
    pub config: BgnnConfig,
    layers: Vec<(BoundMlp, BoundMlp, BoundMlp)>,
    /// Leaves in the order of [`BgnnParams::tensors`].
    pub vars: Vec<Var>,
}

impl BoundBgnn {
    pub fn messages(&self, tape: &Tape, init: &MessagesState) -> MessageVars {
        MessageVars {
            g: tape.constant(init.g.clone()),
            b: tape.constant(init.b.clone()),
            m: tape.constant(init.m.clone()),
        }
    }

    /// One round of message passing followed by a decision.
    pub fn layer_forward(
        &self,
        tape: &Tape,
        layer: usize,
        graph: &Graph,
        state: MessageVars,
        h_feat: Var,
        p_norm: Option<Var>,
    ) -> Result<MessageVars, BgnnError> {
        let (user_net, antenna_net, decision_net) = &self.layers[layer];
        let g_edges = tape.gather_rows(state.g, graph.edge_user.clone())?;
        let b_edges = tape.gather_rows(state.b, graph.edge_user.clone())?;
        let user_in = tape.concat_cols(&[g_edges, b_edges, h_feat])?;
        let c = user_net.forward(tape, user_in)?;

        let c_ant = tape.pool_rows(c, graph.by_antenna.clone())?;
        let c_edges = tape.gather_rows(c_ant, graph.edge_antenna.clone())?;
        let antenna_in = tape.concat_cols(&[state.m, c_edges, h_feat])?;
        let b_nk = antenna_net.forward(tape, antenna_in)?;
        let b_others = tape.pool_rows(b_nk, graph.others.clone())?;
        let m = tape.concat_cols(&[b_nk, b_others])?;

        let m_user = tape.pool_rows(m, graph.by_user.clone())?;
        let b = tape.pool_rows(b_nk, graph.by_user.clone())?;
        let decision_in = match p_norm {
            Some(p) => {
                let col = tape.gather_rows(p, vec![0; graph.k])?;
                tape.concat_cols(&[m_user, col])?
            }
            None => m_user,
        };
        let g = decision_net.forward(tape, decision_in)?;
        Ok(MessageVars { g, b, m })
    }

    /// Runs all layers and returns the final `K x head_dim` decisions.
    pub fn forward(
        &self,
        tape: &Tape,
        h_est: &ComplexMat,
        power_dbm: f64,
        init: &MessagesState,
    ) -> Result<Var, BgnnError> {
        let (n, k) = (h_est.rows(), h_est.cols());
        let c = &self.config;
        let expect = [
            (init.g.shape(), [k, c.head_dim]),
            (init.b.shape(), [k, c.message_dim]),
            (init.m.shape(), [n * k, 2 * c.message_dim]),
        ];
        if let Some((got, want)) = expect.iter().find(|(got, want)| *got != want) {
            return Err(BgnnError::ConfigMismatch(format!("initial message shape {got:?}, expected {want:?}")));
        }
        let graph = Graph::new(n, k);
        let h_feat = tape.constant(edge_features(h_est));
        let p_norm = c
            .power_input
            .then(|| RealTensor::scalar(power_dbm / POWER_SCALE_DBM).map(|t| tape.constant(t)))
            .transpose()?;
        let mut state = self.messages(tape, init);
        for l in 0..self.layers.len() {
            state = self.layer_forward(tape, l, &graph, state, h_feat, p_norm)?;
        }
        Ok(state.g)
    }
}

/// Beamformer variables from bound interference and power networks. With
/// `snet = None` the interference feature is fixed at zero.
#[allow(clippy::too_many_arguments)]
pub fn pipeline_forward_var(
    tape: &Tape,
    snet: Option<(&BoundBgnn, &MessagesState)>,
    pnet: (&BoundBgnn, &MessagesState),
    h_est: &ComplexMat,
    h: CVar,
    power_mw: f64,
    noise_mw: &[f64],
) -> Result<(CVar, usize), BgnnError> {
    let power_dbm = mw_to_dbm(power_mw);
    let raw_s = match snet {
        Some((net, init)) => Some(net.forward(tape, h_est, power_dbm, init)?),
        None => None,
    };
    let pq = pnet.0.forward(tape, h_est, power_dbm, pnet.1)?;
    let (feats, clamped) = normalize_features_var(tape, raw_s, pq, power_mw, noise_mw)?;
    let w = recover_robust_var(tape, h, feats, noise_mw)?;
    Ok((w, clamped))
}

/// Beamformer for `h_est` at total power `power_mw` (no gradients).
pub fn pipeline_forward(
    h_est: &ComplexMat,
    power_mw: f64,
    snet: &BgnnParams,
    pnet: &BgnnParams,
    noise_mw: &[f64],
    messages: (&MessagesState, &MessagesState),
) -> Result<BeamMatrix, BgnnError> {
    let tape = Tape::new();
    let s = snet.bind(&tape, false);
    let p = pnet.bind(&tape, false);
    let h = tape.cconstant(h_est);
    let (w, _) = pipeline_forward_var(&tape, Some((&s, messages.0)), (&p, messages.1), h_est, h, power_mw, noise_mw)?;
    Ok(BeamMatrix { w: tape.cvalue(w) })
}
