//! The recognizer network: stacked conv blocks squeeze a grayscale image
//! into a width-indexed feature sequence, a bidirectional recurrent layer
//! reads it in both directions, and a linear projection emits per-frame
//! log-probabilities over the alphabet plus blank.

use crate::ctc::LogitsSequence;
use crate::tensor::{Graph, NodeId, Tensor, TensorError};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("invalid model input: {0}")]
    Input(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RnnKind {
    Simple,
    Gru,
}

impl RnnKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            RnnKind::Simple => "simple",
            RnnKind::Gru => "gru",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "simple" => Some(RnnKind::Simple),
            "gru" => Some(RnnKind::Gru),
            _ => None,
        }
    }

    fn gate_width(&self, hidden: usize) -> usize {
        match self {
            RnnKind::Simple => hidden,
            RnnKind::Gru => 3 * hidden,
        }
    }
}

/// Architecture hyperparameters. Every conv block is 3×3 kernels with
/// padding 1 followed by relu and a 2×2/2 max pool, so each block halves
/// both spatial extents; sequence length and feature width follow from
/// the input size and the channel stack.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelConfig {
    pub input_height: usize,
    pub input_width: usize,
    pub conv_channels: Vec<usize>,
    pub rnn_hidden: usize,
    pub rnn_kind: RnnKind,
    pub bidirectional: bool,
    pub alphabet_size: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input_height: 50,
            input_width: 200,
            conv_channels: vec![32, 64],
            rnn_hidden: 128,
            rnn_kind: RnnKind::Gru,
            bidirectional: true,
            alphabet_size: 19,
        }
    }
}

fn pool_extent(e: usize) -> usize {
    (e - 2) / 2 + 1
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.conv_channels.is_empty() {
            return Err(ModelError::Config("need at least one conv block".into()));
        }
        if self.conv_channels.iter().any(|&c| c == 0) {
            return Err(ModelError::Config("conv channels must be positive".into()));
        }
        if self.rnn_hidden == 0 {
            return Err(ModelError::Config("rnn hidden size must be positive".into()));
        }
        if self.alphabet_size == 0 {
            return Err(ModelError::Config("alphabet must be non-empty".into()));
        }
        let min = 1 << self.conv_channels.len();
        if self.input_height < min || self.input_width < min {
            return Err(ModelError::Config(format!(
                "input {}×{} too small for {} pooling stages (needs ≥ {min} per axis)",
                self.input_height,
                self.input_width,
                self.conv_channels.len()
            )));
        }
        Ok(())
    }

    fn pooled(&self, mut e: usize) -> usize {
        for _ in 0..self.conv_channels.len() {
            e = pool_extent(e);
        }
        e
    }

    pub fn pooled_height(&self) -> usize {
        self.pooled(self.input_height)
    }

    /// Sequence length produced for an image of the given width.
    pub fn time_steps_for_width(&self, width: usize) -> Result<usize, ModelError> {
        let min = 1 << self.conv_channels.len();
        if width < min {
            return Err(ModelError::Input(format!(
                "width {width} too small for {} pooling stages (needs ≥ {min})",
                self.conv_channels.len()
            )));
        }
        Ok(self.pooled(width))
    }

    pub fn time_steps(&self) -> usize {
        self.pooled(self.input_width)
    }

    /// Features per time step handed to the recurrent layer.
    pub fn feature_dim(&self) -> usize {
        self.conv_channels.last().unwrap() * self.pooled_height()
    }

    pub fn rnn_output_dim(&self) -> usize {
        self.rnn_hidden * if self.bidirectional { 2 } else { 1 }
    }

    /// Class count including the blank.
    pub fn n_classes(&self) -> usize {
        self.alphabet_size + 1
    }

    /// A label of length L needs at least 2L+1 frames (repeats must be
    /// blank-separated). Returns a message when the configured width
    /// cannot carry labels of the given length.
    pub fn capacity_warning(&self, max_label_len: usize) -> Option<String> {
        let needed = 2 * max_label_len + 1;
        let have = self.time_steps();
        if have < needed {
            Some(format!(
                "sequence length {have} cannot represent labels of length \
                 {max_label_len} (needs at least {needed} frames)"
            ))
        } else {
            None
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub kernel: Tensor,
    pub bias: Tensor,
}

/// One recurrent direction. For the GRU the gate axis packs [reset|update|
/// candidate] blocks of `hidden` columns each; the simple RNN has a single
/// block. `w_ih` is [feature_dim × gates], `w_hh` [hidden × gates].
#[derive(Debug, Clone, PartialEq)]
pub struct DirectionParams {
    pub w_ih: Tensor,
    pub w_hh: Tensor,
    pub bias: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub conv: Vec<ConvLayer>,
    pub forward_rnn: DirectionParams,
    pub backward_rnn: Option<DirectionParams>,
    pub proj_weight: Tensor,
    pub proj_bias: Tensor,
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

fn xavier_uniform(rng: &mut ChaCha8Rng, shape: Vec<usize>, fan_in: usize, fan_out: usize) -> Tensor {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-a..a)).collect();
    Tensor::from_vec(shape, data).expect("shape matches data")
}

/// Square matrix with orthonormal columns: Gaussian fill followed by
/// modified Gram-Schmidt.
fn orthogonal_block(rng: &mut ChaCha8Rng, h: usize) -> Vec<f64> {
    let mut m: Vec<f64> = (0..h * h).map(|_| gaussian(rng)).collect();
    for j in 0..h {
        for i in 0..j {
            let dot: f64 = (0..h).map(|r| m[r * h + i] * m[r * h + j]).sum();
            for r in 0..h {
                m[r * h + j] -= dot * m[r * h + i];
            }
        }
        let norm: f64 = (0..h).map(|r| m[r * h + j] * m[r * h + j]).sum::<f64>().sqrt();
        for r in 0..h {
            m[r * h + j] /= norm;
        }
    }
    m
}

fn recurrent_init(rng: &mut ChaCha8Rng, kind: RnnKind, hidden: usize) -> Tensor {
    let gates = kind.gate_width(hidden);
    let n_blocks = gates / hidden;
    let mut data = vec![0.0; hidden * gates];
    for b in 0..n_blocks {
        let block = orthogonal_block(rng, hidden);
        for r in 0..hidden {
            for c in 0..hidden {
                data[r * gates + b * hidden + c] = block[r * hidden + c];
            }
        }
    }
    Tensor::from_vec(vec![hidden, gates], data).expect("shape matches data")
}

fn direction_init(rng: &mut ChaCha8Rng, config: &ModelConfig) -> DirectionParams {
    let f = config.feature_dim();
    let gates = config.rnn_kind.gate_width(config.rnn_hidden);
    DirectionParams {
        w_ih: xavier_uniform(rng, vec![f, gates], f, gates),
        w_hh: recurrent_init(rng, config.rnn_kind, config.rnn_hidden),
        bias: Tensor::zeros(vec![gates]),
    }
}

impl ModelParams {
    /// Fresh parameters: Xavier-uniform conv, input, and projection
    /// weights, orthogonal recurrent blocks, zero biases. The same seed
    /// always produces bit-identical tensors.
    pub fn build(config: &ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut conv = Vec::new();
        let mut c_in = 1;
        for &c_out in &config.conv_channels {
            conv.push(ConvLayer {
                kernel: xavier_uniform(
                    &mut rng,
                    vec![c_out, c_in, 3, 3],
                    c_in * 9,
                    c_out * 9,
                ),
                bias: Tensor::zeros(vec![c_out]),
            });
            c_in = c_out;
        }
        let forward_rnn = direction_init(&mut rng, config);
        let backward_rnn = config.bidirectional.then(|| direction_init(&mut rng, config));
        let out = config.rnn_output_dim();
        let classes = config.n_classes();
        Ok(ModelParams {
            proj_weight: xavier_uniform(&mut rng, vec![out, classes], out, classes),
            proj_bias: Tensor::zeros(vec![classes]),
            config: config.clone(),
            conv,
            forward_rnn,
            backward_rnn,
        })
    }

    /// All-zero tensors of the right shapes, a skeleton for deserialization.
    pub fn zeros(config: &ModelConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let mut conv = Vec::new();
        let mut c_in = 1;
        for &c_out in &config.conv_channels {
            conv.push(ConvLayer {
                kernel: Tensor::zeros(vec![c_out, c_in, 3, 3]),
                bias: Tensor::zeros(vec![c_out]),
            });
            c_in = c_out;
        }
        let f = config.feature_dim();
        let gates = config.rnn_kind.gate_width(config.rnn_hidden);
        let dir = || DirectionParams {
            w_ih: Tensor::zeros(vec![f, gates]),
            w_hh: Tensor::zeros(vec![config.rnn_hidden, gates]),
            bias: Tensor::zeros(vec![gates]),
        };
        Ok(ModelParams {
            config: config.clone(),
            conv,
            forward_rnn: dir(),
            backward_rnn: config.bidirectional.then(dir),
            proj_weight: Tensor::zeros(vec![config.rnn_output_dim(), config.n_classes()]),
            proj_bias: Tensor::zeros(vec![config.n_classes()]),
        })
    }

    /// Stable name/tensor pairing; serialization, optimizer state, and
    /// gradient bookkeeping all index parameters through this order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, layer) in self.conv.iter().enumerate() {
            out.push((format!("conv{i}.kernel"), &layer.kernel));
            out.push((format!("conv{i}.bias"), &layer.bias));
        }
        out.push(("rnn.fwd.w_ih".into(), &self.forward_rnn.w_ih));
        out.push(("rnn.fwd.w_hh".into(), &self.forward_rnn.w_hh));
        out.push(("rnn.fwd.bias".into(), &self.forward_rnn.bias));
        if let Some(b) = &self.backward_rnn {
            out.push(("rnn.bwd.w_ih".into(), &b.w_ih));
            out.push(("rnn.bwd.w_hh".into(), &b.w_hh));
            out.push(("rnn.bwd.bias".into(), &b.bias));
        }
        out.push(("proj.weight".into(), &self.proj_weight));
        out.push(("proj.bias".into(), &self.proj_bias));
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        for (i, layer) in self.conv.iter_mut().enumerate() {
            out.push((format!("conv{i}.kernel"), &mut layer.kernel));
            out.push((format!("conv{i}.bias"), &mut layer.bias));
        }
        out.push(("rnn.fwd.w_ih".into(), &mut self.forward_rnn.w_ih));
        out.push(("rnn.fwd.w_hh".into(), &mut self.forward_rnn.w_hh));
        out.push(("rnn.fwd.bias".into(), &mut self.forward_rnn.bias));
        if let Some(b) = &mut self.backward_rnn {
            out.push(("rnn.bwd.w_ih".into(), &mut b.w_ih));
            out.push(("rnn.bwd.w_hh".into(), &mut b.w_hh));
            out.push(("rnn.bwd.bias".into(), &mut b.bias));
        }
        out.push(("proj.weight".into(), &mut self.proj_weight));
        out.push(("proj.bias".into(), &mut self.proj_bias));
        out
    }

    pub fn param_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.numel()).sum()
    }
}

/// Graph handles for every parameter, in `named_tensors` order.
#[derive(Debug, Clone)]
pub struct ParamNodes {
    conv: Vec<(NodeId, NodeId)>,
    forward_rnn: (NodeId, NodeId, NodeId),
    backward_rnn: Option<(NodeId, NodeId, NodeId)>,
    proj: (NodeId, NodeId),
}

impl ParamNodes {
    pub fn in_named_order(&self) -> Vec<NodeId> {
        let mut out = Vec::new();
        for &(k, b) in &self.conv {
            out.push(k);
            out.push(b);
        }
        let f = self.forward_rnn;
        out.extend([f.0, f.1, f.2]);
        if let Some(b) = self.backward_rnn {
            out.extend([b.0, b.1, b.2]);
        }
        out.extend([self.proj.0, self.proj.1]);
        out
    }

    #[cfg(test)]
    pub(crate) fn from_ordered(ids: &[NodeId], config: &ModelConfig) -> ParamNodes {
        let mut it = ids.iter().copied();
        let conv = config
            .conv_channels
            .iter()
            .map(|_| (it.next().unwrap(), it.next().unwrap()))
            .collect();
        let mut dir = || (it.next().unwrap(), it.next().unwrap(), it.next().unwrap());
        let forward_rnn = dir();
        let backward_rnn = config.bidirectional.then(&mut dir);
        ParamNodes {
            conv,
            forward_rnn,
            backward_rnn,
            proj: (it.next().unwrap(), it.next().unwrap()),
        }
    }
}

/// Register every parameter tensor as a gradient-tracked graph node.
pub fn insert_params(g: &mut Graph, params: &ModelParams) -> ParamNodes {
    let conv = params
        .conv
        .iter()
        .map(|l| (g.param(l.kernel.clone()), g.param(l.bias.clone())))
        .collect();
    let mut dir = |d: &DirectionParams| {
        (
            g.param(d.w_ih.clone()),
            g.param(d.w_hh.clone()),
            g.param(d.bias.clone()),
        )
    };
    let forward_rnn = dir(&params.forward_rnn);
    let backward_rnn = params.backward_rnn.as_ref().map(&mut dir);
    ParamNodes {
        conv,
        forward_rnn,
        backward_rnn,
        proj: (
            g.param(params.proj_weight.clone()),
            g.param(params.proj_bias.clone()),
        ),
    }
}

fn gru_direction(
    g: &mut Graph,
    seq: NodeId,
    dir: (NodeId, NodeId, NodeId),
    hidden: usize,
    reverse: bool,
) -> Result<NodeId, TensorError> {
    let t_len = g.value(seq).shape()[0];
    let (w_ih, w_hh, bias) = dir;
    let gx = g.matmul(seq, w_ih)?;
    let gx = g.add_row_bias(gx, bias)?;
    let mut h = g.input(Tensor::zeros(vec![1, hidden]));
    let mut steps = Vec::with_capacity(t_len);
    for i in 0..t_len {
        let t = if reverse { t_len - 1 - i } else { i };
        let gx_t = g.slice_row(gx, t)?;
        let gh = g.matmul(h, w_hh)?;
        let gx_r = g.slice_cols(gx_t, 0, hidden)?;
        let gx_z = g.slice_cols(gx_t, hidden, hidden)?;
        let gx_n = g.slice_cols(gx_t, 2 * hidden, hidden)?;
        let gh_r = g.slice_cols(gh, 0, hidden)?;
        let gh_z = g.slice_cols(gh, hidden, hidden)?;
        let gh_n = g.slice_cols(gh, 2 * hidden, hidden)?;
        let r_pre = g.add(gx_r, gh_r)?;
        let r = g.sigmoid(r_pre);
        let z_pre = g.add(gx_z, gh_z)?;
        let z = g.sigmoid(z_pre);
        let gated = g.mul(r, gh_n)?;
        let n_pre = g.add(gx_n, gated)?;
        let n = g.tanh(n_pre);
        let keep = g.one_minus(z);
        let new_part = g.mul(keep, n)?;
        let old_part = g.mul(z, h)?;
        h = g.add(new_part, old_part)?;
        steps.push(h);
    }
    if reverse {
        steps.reverse();
    }
    g.concat_rows(&steps)
}

fn simple_direction(
    g: &mut Graph,
    seq: NodeId,
    dir: (NodeId, NodeId, NodeId),
    hidden: usize,
    reverse: bool,
) -> Result<NodeId, TensorError> {
    let t_len = g.value(seq).shape()[0];
    let (w_ih, w_hh, bias) = dir;
    let gx = g.matmul(seq, w_ih)?;
    let gx = g.add_row_bias(gx, bias)?;
    let mut h = g.input(Tensor::zeros(vec![1, hidden]));
    let mut steps = Vec::with_capacity(t_len);
    for i in 0..t_len {
        let t = if reverse { t_len - 1 - i } else { i };
        let gx_t = g.slice_row(gx, t)?;
        let gh = g.matmul(h, w_hh)?;
        let pre = g.add(gx_t, gh)?;
        h = g.tanh(pre);
        steps.push(h);
    }
    if reverse {
        steps.reverse();
    }
    g.concat_rows(&steps)
}

fn rnn_direction(
    g: &mut Graph,
    seq: NodeId,
    dir: (NodeId, NodeId, NodeId),
    kind: RnnKind,
    hidden: usize,
    reverse: bool,
) -> Result<NodeId, TensorError> {
    match kind {
        RnnKind::Gru => gru_direction(g, seq, dir, hidden, reverse),
        RnnKind::Simple => simple_direction(g, seq, dir, hidden, reverse),
    }
}

/// Build the whole forward pass for one image and return the node holding
/// T×(K+1) log-probabilities. The image must be [1 × input_height × W] for
/// any W the pooling stack can carry; narrower or wider images simply
/// change T.
pub fn forward(
    g: &mut Graph,
    nodes: &ParamNodes,
    config: &ModelConfig,
    image: &Tensor,
) -> Result<NodeId, ModelError> {
    let shape = image.shape().to_vec();
    if shape.len() != 3 || shape[0] != 1 || shape[1] != config.input_height {
        return Err(ModelError::Input(format!(
            "expected image shaped [1, {}, W], got {shape:?}",
            config.input_height
        )));
    }
    config.time_steps_for_width(shape[2])?;

    let mut x = g.input(image.clone());
    for &(kernel, bias) in &nodes.conv {
        x = g.conv2d(x, kernel, 1, 1)?;
        x = g.add_channel_bias(x, bias)?;
        x = g.relu(x);
        x = g.max_pool2d(x, 2, 2)?;
    }
    let seq = g.map_to_sequence(x)?;

    let fwd = rnn_direction(
        g,
        seq,
        nodes.forward_rnn,
        config.rnn_kind,
        config.rnn_hidden,
        false,
    )?;
    let features = match nodes.backward_rnn {
        Some(dir) => {
            let bwd = rnn_direction(g, seq, dir, config.rnn_kind, config.rnn_hidden, true)?;
            g.concat_cols(fwd, bwd)?
        }
        None => fwd,
    };

    let logits = g.matmul(features, nodes.proj.0)?;
    let logits = g.add_row_bias(logits, nodes.proj.1)?;
    Ok(g.log_softmax_rows(logits)?)
}

/// Run inference on one image with a throwaway graph.
pub fn log_probs(params: &ModelParams, image: &Tensor) -> Result<LogitsSequence, ModelError> {
    let mut g = Graph::new();
    let nodes = insert_params(&mut g, params);
    let out = forward(&mut g, &nodes, &params.config, image)?;
    Ok(LogitsSequence::new(g.value(out).clone()).expect("output is a frame sequence"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fdcheck::check_param_gradients;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            input_height: 8,
            input_width: 12,
            conv_channels: vec![2],
            rnn_hidden: 2,
            rnn_kind: RnnKind::Gru,
            bidirectional: true,
            alphabet_size: 2,
        }
    }

    fn random_image(seed: u64, h: usize, w: usize) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_vec(vec![1, h, w], (0..h * w).map(|_| rng.gen_range(0.0..1.0)).collect())
            .unwrap()
    }

    #[test]
    fn default_config_derived_shapes() {
        let c = ModelConfig::default();
        assert_eq!(c.time_steps(), 50);
        assert_eq!(c.pooled_height(), 12);
        assert_eq!(c.feature_dim(), 768);
        assert_eq!(c.rnn_output_dim(), 256);
        assert_eq!(c.n_classes(), 20);
    }

    #[test]
    fn default_parameter_count() {
        let params = ModelParams::build(&ModelConfig::default(), 0).unwrap();
        assert_eq!(params.param_count(), 712_852);
    }

    #[test]
    fn named_tensor_order_is_pinned() {
        let params = ModelParams::build(&ModelConfig::default(), 0).unwrap();
        let names: Vec<String> = params.named_tensors().into_iter().map(|(n, _)| n).collect();
        assert_eq!(
            names,
            [
                "conv0.kernel",
                "conv0.bias",
                "conv1.kernel",
                "conv1.bias",
                "rnn.fwd.w_ih",
                "rnn.fwd.w_hh",
                "rnn.fwd.bias",
                "rnn.bwd.w_ih",
                "rnn.bwd.w_hh",
                "rnn.bwd.bias",
                "proj.weight",
                "proj.bias"
            ]
        );
        let zeros = ModelParams::zeros(&ModelConfig::default()).unwrap();
        for ((n1, t1), (n2, t2)) in params.named_tensors().iter().zip(zeros.named_tensors()) {
            assert_eq!(n1, &n2);
            assert_eq!(t1.shape(), t2.shape());
        }
    }

    #[test]
    fn build_is_seed_deterministic() {
        let c = tiny_config();
        let a = ModelParams::build(&c, 42).unwrap();
        let b = ModelParams::build(&c, 42).unwrap();
        assert_eq!(a, b);
        let other = ModelParams::build(&c, 43).unwrap();
        assert_ne!(a.conv[0].kernel, other.conv[0].kernel);
    }

    #[test]
    fn recurrent_blocks_have_orthonormal_columns() {
        let params = ModelParams::build(&ModelConfig::default(), 7).unwrap();
        let w = &params.forward_rnn.w_hh;
        let h = 128;
        for block in 0..3 {
            for i in 0..h {
                for j in i..h {
                    let dot: f64 = (0..h)
                        .map(|r| {
                            w.data()[r * 3 * h + block * h + i] * w.data()[r * 3 * h + block * h + j]
                        })
                        .sum();
                    let expected = if i == j { 1.0 } else { 0.0 };
                    assert!(
                        (dot - expected).abs() < 1e-10,
                        "block {block} columns {i},{j}: dot {dot}"
                    );
                }
            }
        }
    }

    #[test]
    fn zeroed_projection_yields_uniform_distributions() {
        let c = tiny_config();
        let mut params = ModelParams::build(&c, 3).unwrap();
        params.proj_weight = Tensor::zeros(vec![c.rnn_output_dim(), c.n_classes()]);
        params.proj_bias = Tensor::zeros(vec![c.n_classes()]);
        let image = Tensor::zeros(vec![1, 8, 12]);
        let lp = log_probs(&params, &image).unwrap();
        let expected = -(c.n_classes() as f64).ln();
        for v in lp.frames().data() {
            assert!((v - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn output_rows_are_normalized_distributions() {
        let c = tiny_config();
        let params = ModelParams::build(&c, 5).unwrap();
        let lp = log_probs(&params, &random_image(11, 8, 12)).unwrap();
        assert_eq!(lp.time_steps(), c.time_steps());
        assert_eq!(lp.n_classes(), 3);
        for t in 0..lp.time_steps() {
            let sum: f64 = lp.row(t).iter().map(|v| v.exp()).sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn wider_images_make_longer_sequences() {
        let c = ModelConfig::default();
        let params = ModelParams::build(&c, 9).unwrap();
        let mut lengths = Vec::new();
        for width in [96, 128, 200] {
            let lp = log_probs(&params, &Tensor::zeros(vec![1, 50, width])).unwrap();
            lengths.push(lp.time_steps());
        }
        assert_eq!(lengths, [24, 32, 50]);
    }

    #[test]
    fn forward_rejects_bad_inputs() {
        let c = tiny_config();
        let params = ModelParams::build(&c, 1).unwrap();
        assert!(matches!(
            log_probs(&params, &Tensor::zeros(vec![1, 9, 12])),
            Err(ModelError::Input(_))
        ));
        assert!(matches!(
            log_probs(&params, &Tensor::zeros(vec![2, 8, 12])),
            Err(ModelError::Input(_))
        ));
        assert!(matches!(
            log_probs(&params, &Tensor::zeros(vec![1, 8, 1])),
            Err(ModelError::Input(_))
        ));
    }

    #[test]
    fn config_validation_rejects_degenerate_settings() {
        let mut c = ModelConfig::default();
        c.rnn_hidden = 0;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::default();
        c.conv_channels.clear();
        assert!(c.validate().is_err());
        let mut c = ModelConfig::default();
        c.input_height = 3;
        assert!(c.validate().is_err());
    }

    #[test]
    fn capacity_warning_triggers_on_short_sequences() {
        let mut c = ModelConfig::default();
        c.input_width = 40;
        assert_eq!(c.time_steps(), 10);
        assert!(c.capacity_warning(5).is_some());
        assert!(c.capacity_warning(4).is_none());
        assert!(ModelConfig::default().capacity_warning(5).is_none());
    }

    #[test]
    fn unidirectional_model_works_with_half_the_features() {
        let mut c = tiny_config();
        c.bidirectional = false;
        let params = ModelParams::build(&c, 13).unwrap();
        assert!(params.backward_rnn.is_none());
        assert_eq!(params.proj_weight.shape(), &[2, 3]);
        let lp = log_probs(&params, &random_image(17, 8, 12)).unwrap();
        assert_eq!(lp.time_steps(), 6);
    }

    fn end_to_end_gradient_check(config: ModelConfig, seed: u64) {
        let shapes: Vec<Vec<usize>> = ModelParams::zeros(&config)
            .unwrap()
            .named_tensors()
            .iter()
            .map(|(_, t)| t.shape().to_vec())
            .collect();
        let image = random_image(seed, config.input_height, config.input_width);
        let t = config.time_steps();
        let classes = config.n_classes();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcd);
        let weights = Tensor::from_vec(
            vec![t, classes],
            (0..t * classes).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        check_param_gradients(
            seed,
            2,
            &shapes,
            move |g, p| {
                let nodes = ParamNodes::from_ordered(p, &config);
                let lp = forward(g, &nodes, &config, &image).unwrap();
                let w = g.input(weights.clone());
                let weighted = g.mul(lp, w).unwrap();
                g.sum(weighted)
            },
            None,
            1e-3,
        );
    }

    #[test]
    fn gru_model_gradients_match_finite_differences() {
        end_to_end_gradient_check(tiny_config(), 211);
    }

    #[test]
    fn simple_rnn_model_gradients_match_finite_differences() {
        let mut c = tiny_config();
        c.rnn_kind = RnnKind::Simple;
        end_to_end_gradient_check(c, 223);
    }
}

#[cfg(test)]
mod bench {
    use crate::ctc::{attach_ctc_loss, Alphabet};
    use crate::model::{forward, insert_params, ModelConfig, ModelParams};
    use crate::tensor::{Graph, Tensor};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::time::Instant;

    #[test]
    #[ignore]
    fn bench_full_size_step() {
        let config = ModelConfig::default();
        let params = ModelParams::build(&config, 1).unwrap();
        let alphabet = Alphabet::standard();
        let label = alphabet.encode("2b8cf").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let image = Tensor::from_vec(
            vec![1, 50, 200],
            (0..10000).map(|_| rng.gen_range(0.0..1.0)).collect(),
        )
        .unwrap();

        // warm up
        for _ in 0..2 {
            let mut g = Graph::new();
            let nodes = insert_params(&mut g, &params);
            let lp = forward(&mut g, &nodes, &config, &image).unwrap();
            let (root, _) = attach_ctc_loss(&mut g, lp, &label, alphabet.blank_index()).unwrap();
            let _ = g.backward(root).unwrap();
        }

        let n = 10;
        let t0 = Instant::now();
        for _ in 0..n {
            let mut g = Graph::new();
            let nodes = insert_params(&mut g, &params);
            let _ = forward(&mut g, &nodes, &config, &image).unwrap();
        }
        let fwd = t0.elapsed().as_secs_f64() / n as f64;

        let t0 = Instant::now();
        for _ in 0..n {
            let mut g = Graph::new();
            let nodes = insert_params(&mut g, &params);
            let lp = forward(&mut g, &nodes, &config, &image).unwrap();
            let (root, loss) = attach_ctc_loss(&mut g, lp, &label, alphabet.blank_index()).unwrap();
            let grads = g.backward(root).unwrap();
            assert!(loss.is_finite());
            std::hint::black_box(grads);
        }
        let full = t0.elapsed().as_secs_f64() / n as f64;
        eprintln!("forward only: {:.1} ms", fwd * 1e3);
        eprintln!("forward+ctc+backward: {:.1} ms", full * 1e3);
        eprintln!("epoch at 1600 train + 200 val: {:.0} s", 1600.0 * full + 200.0 * fwd);
    }
}
