//! Neural building blocks: multilayer perceptrons, causal dilated 1-D
//! convolutions, residual blocks and temporal convolutional encoders.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Tape, Tensor, Var};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NnError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("input dimension mismatch: expected {expected}, got shape {got:?}")]
    InputDim { expected: usize, got: Vec<usize> },
    #[error("sequence of length {len} exceeds the receptive field {receptive_field}")]
    ReceptiveField { len: usize, receptive_field: usize },
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    #[default]
    Silu,
    Gelu,
    Tanh,
}

impl Activation {
    pub fn apply(self, tape: &mut Tape, x: Var) -> Var {
        match self {
            Activation::Relu => tape.relu(x),
            Activation::Silu => tape.silu(x),
            Activation::Gelu => tape.gelu(x),
            Activation::Tanh => tape.tanh(x),
        }
    }

    pub fn tag(self) -> u8 {
        match self {
            Activation::Relu => 0,
            Activation::Silu => 1,
            Activation::Gelu => 2,
            Activation::Tanh => 3,
        }
    }
}

/// Walks a flat list of bound parameter handles in registration order.
pub struct ParamCursor<'a> {
    vars: &'a [Var],
    pos: usize,
}

impl<'a> ParamCursor<'a> {
    pub fn new(vars: &'a [Var]) -> Self {
        Self { vars, pos: 0 }
    }

    pub fn next_var(&mut self) -> Var {
        let v = self.vars[self.pos];
        self.pos += 1;
        v
    }

    pub fn take(&mut self, n: usize) -> &'a [Var] {
        let s = &self.vars[self.pos..self.pos + n];
        self.pos += n;
        s
    }

    pub fn remaining(&self) -> usize {
        self.vars.len() - self.pos
    }
}

/// Records every tensor as a leaf; `track` selects whether gradients flow.
pub fn bind_params(tape: &mut Tape, params: &[&Tensor], track: bool) -> Vec<Var> {
    params
        .iter()
        .map(|p| {
            if track {
                tape.param(p)
            } else {
                let mut t = (*p).clone();
                t.set_requires_grad(false);
                tape.leaf(&t)
            }
        })
        .collect()
}

fn uniform_tensor<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor {
    let bound = (1.0 / fan_in.max(1) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::new(shape, data).expect("shape matches data").with_grad()
}

// ---------------------------------------------------------------------------
// MLP

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpConfig {
    pub input_dim: usize,
    pub hidden_layers: usize,
    pub hidden_width: usize,
    pub output_dim: usize,
    #[serde(default)]
    pub activation: Activation,
}

impl MlpConfig {
    pub fn validate(&self) -> Result<(), NnError> {
        if self.input_dim == 0 || self.output_dim == 0 || (self.hidden_layers > 0 && self.hidden_width == 0) {
            return Err(NnError::Config(format!("all MLP dimensions must be >= 1: {self:?}")));
        }
        Ok(())
    }

    /// `(fan_in, fan_out)` of each affine layer, input to output.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden_layers + 1);
        let mut prev = self.input_dim;
        for _ in 0..self.hidden_layers {
            dims.push((prev, self.hidden_width));
            prev = self.hidden_width;
        }
        dims.push((prev, self.output_dim));
        dims
    }

    pub fn param_count(&self) -> usize {
        self.layer_dims().iter().map(|(i, o)| (i + 1) * o).sum()
    }
}

/// Weights are stored `[fan_in, fan_out]` so a batch `[n, fan_in]` maps by `x @ W + b`.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    cfg: MlpConfig,
    weights: Vec<Tensor>,
    biases: Vec<Tensor>,
}

impl Mlp {
    pub fn new<R: Rng + ?Sized>(cfg: MlpConfig, rng: &mut R) -> Result<Self, NnError> {
        cfg.validate()?;
        let (weights, biases) = cfg
            .layer_dims()
            .into_iter()
            .map(|(i, o)| (uniform_tensor(&[i, o], i, rng), Tensor::zeros(&[o]).with_grad()))
            .unzip();
        Ok(Self { cfg, weights, biases })
    }

    pub fn zeros(cfg: MlpConfig) -> Result<Self, NnError> {
        cfg.validate()?;
        let (weights, biases) = cfg
            .layer_dims()
            .into_iter()
            .map(|(i, o)| (Tensor::zeros(&[i, o]).with_grad(), Tensor::zeros(&[o]).with_grad()))
            .unzip();
        Ok(Self { cfg, weights, biases })
    }

    /// Builds from `[W1, b1, W2, b2, ...]`.
    pub fn from_params(cfg: MlpConfig, params: Vec<Tensor>) -> Result<Self, NnError> {
        cfg.validate()?;
        let dims = cfg.layer_dims();
        if params.len() != 2 * dims.len() {
            return Err(NnError::Config(format!("expected {} MLP tensors, got {}", 2 * dims.len(), params.len())));
        }
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        let mut it = params.into_iter();
        for (i, o) in dims {
            let (mut w, mut b) = (it.next().unwrap(), it.next().unwrap());
            if w.shape() != [i, o] || b.shape() != [o] {
                return Err(NnError::Config(format!(
                    "layer ({i},{o}) got weight {:?} and bias {:?}",
                    w.shape(),
                    b.shape()
                )));
            }
            w.set_requires_grad(true);
            b.set_requires_grad(true);
            weights.push(w);
            biases.push(b);
        }
        Ok(Self { cfg, weights, biases })
    }

    pub fn config(&self) -> &MlpConfig {
        &self.cfg
    }

    pub fn params(&self) -> Vec<&Tensor> {
        self.weights.iter().zip(&self.biases).flat_map(|(w, b)| [w, b]).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.weights.iter_mut().zip(self.biases.iter_mut()).flat_map(|(w, b)| [w, b]).collect()
    }

    pub fn param_names(&self, prefix: &str) -> Vec<String> {
        (0..self.weights.len())
            .flat_map(|l| [format!("{prefix}.layer{l}.weight"), format!("{prefix}.layer{l}.bias")])
            .collect()
    }

    pub fn bind_from(&self, cursor: &mut ParamCursor<'_>) -> MlpVars {
        let layers = (0..self.weights.len()).map(|_| (cursor.next_var(), cursor.next_var())).collect();
        MlpVars {
            layers,
            input_dim: self.cfg.input_dim,
            activation: self.cfg.activation,
        }
    }

    pub fn bind(&self, tape: &mut Tape, track: bool) -> MlpVars {
        let vars = bind_params(tape, &self.params(), track);
        self.bind_from(&mut ParamCursor::new(&vars))
    }
}

/// An MLP whose parameters live on a tape.
#[derive(Clone, Debug)]
pub struct MlpVars {
    layers: Vec<(Var, Var)>,
    input_dim: usize,
    activation: Activation,
}

impl MlpVars {
    /// `x: [batch, input_dim]` → `[batch, output_dim]`.
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var, NnError> {
        let shape = tape.shape(x);
        if shape.len() != 2 || shape[1] != self.input_dim {
            return Err(NnError::InputDim {
                expected: self.input_dim,
                got: shape.to_vec(),
            });
        }
        let mut h = x;
        let last = self.layers.len() - 1;
        for (l, (w, b)) in self.layers.iter().enumerate() {
            h = tape.affine(h, *w, *b)?;
            if l < last {
                h = self.activation.apply(tape, h);
            }
        }
        Ok(h)
    }
}

// ---------------------------------------------------------------------------
// causal convolutions

/// Causal dilated convolution of `seq: [T, I]` or `[M, T, I]` with
/// `weights: [O, K, I]`, `bias: [O]`; indices before the start read as zero.
pub fn causal_conv1d(tape: &mut Tape, weights: Var, bias: Var, dilation: usize, seq: Var) -> Result<Var, NnError> {
    let shape = tape.shape(seq).to_vec();
    match shape.len() {
        2 => {
            let s3 = tape.reshape(seq, &[1, shape[0], shape[1]])?;
            let out = tape.causal_conv1d(s3, weights, bias, dilation)?;
            let o = tape.shape(out)[2];
            Ok(tape.reshape(out, &[shape[0], o])?)
        }
        3 => Ok(tape.causal_conv1d(seq, weights, bias, dilation)?),
        _ => Err(NnError::InputDim {
            expected: 3,
            got: shape,
        }),
    }
}

/// Two causal convolutions `[C, K, C]` of one residual block.
#[derive(Clone, Debug, PartialEq)]
pub struct ResidualBlock {
    pub conv1_weight: Tensor,
    pub conv1_bias: Tensor,
    pub conv2_weight: Tensor,
    pub conv2_bias: Tensor,
}

impl ResidualBlock {
    fn new<R: Rng + ?Sized>(channels: usize, kernel: usize, rng: &mut R) -> Self {
        let fan_in = channels * kernel;
        Self {
            conv1_weight: uniform_tensor(&[channels, kernel, channels], fan_in, rng),
            conv1_bias: Tensor::zeros(&[channels]).with_grad(),
            conv2_weight: uniform_tensor(&[channels, kernel, channels], fan_in, rng),
            conv2_bias: Tensor::zeros(&[channels]).with_grad(),
        }
    }

    fn params(&self) -> [&Tensor; 4] {
        [&self.conv1_weight, &self.conv1_bias, &self.conv2_weight, &self.conv2_bias]
    }

    fn params_mut(&mut self) -> [&mut Tensor; 4] {
        [&mut self.conv1_weight, &mut self.conv1_bias, &mut self.conv2_weight, &mut self.conv2_bias]
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ResidualBlockVars {
    pub conv1_weight: Var,
    pub conv1_bias: Var,
    pub conv2_weight: Var,
    pub conv2_bias: Var,
}

impl ResidualBlockVars {
    pub fn bind_from(cursor: &mut ParamCursor<'_>) -> Self {
        Self {
            conv1_weight: cursor.next_var(),
            conv1_bias: cursor.next_var(),
            conv2_weight: cursor.next_var(),
            conv2_bias: cursor.next_var(),
        }
    }
}

/// `seq + relu(conv(relu(conv(seq))))`, both convolutions dilated by `dilation`.
pub fn residual_block(tape: &mut Tape, params: &ResidualBlockVars, dilation: usize, seq: Var) -> Result<Var, NnError> {
    let channels = *tape.shape(seq).last().unwrap_or(&0);
    for w in [params.conv1_weight, params.conv2_weight] {
        let ws = tape.shape(w);
        if ws.len() != 3 || ws[0] != channels || ws[2] != channels {
            return Err(NnError::InputDim {
                expected: channels,
                got: ws.to_vec(),
            });
        }
    }
    let h = causal_conv1d(tape, params.conv1_weight, params.conv1_bias, dilation, seq)?;
    let h = tape.relu(h);
    let h = causal_conv1d(tape, params.conv2_weight, params.conv2_bias, dilation, h)?;
    let h = tape.relu(h);
    Ok(tape.add(seq, h)?)
}

/// `R = 1 + 2 (K - 1) (2^B - 1)`: two convolutions per block, dilation `2^(b-1)`.
pub fn receptive_field(kernel_size: usize, blocks: usize) -> usize {
    1 + 2 * kernel_size.saturating_sub(1) * ((1usize << blocks) - 1)
}

/// Smallest block count whose receptive field covers `history` steps.
pub fn blocks_for_history(kernel_size: usize, history: usize) -> Result<usize, NnError> {
    if history <= 1 {
        return Ok(1);
    }
    if kernel_size < 2 {
        return Err(NnError::Config(format!("kernel size {kernel_size} cannot cover a history of {history}")));
    }
    let mut b = 1;
    while receptive_field(kernel_size, b) < history {
        b += 1;
    }
    Ok(b)
}

// ---------------------------------------------------------------------------
// TCN

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TcnConfig {
    pub in_channels: usize,
    pub hidden_channels: usize,
    pub out_dim: usize,
    pub kernel_size: usize,
    pub blocks: usize,
}

impl TcnConfig {
    pub fn validate(&self) -> Result<(), NnError> {
        if self.in_channels == 0 || self.out_dim == 0 || self.kernel_size == 0 || self.blocks == 0 {
            return Err(NnError::Config(format!("TCN dimensions must be >= 1: {self:?}")));
        }
        if self.hidden_channels < self.in_channels {
            return Err(NnError::Config(format!(
                "hidden channels ({}) must be >= input channels ({})",
                self.hidden_channels, self.in_channels
            )));
        }
        Ok(())
    }

    pub fn receptive_field(&self) -> usize {
        receptive_field(self.kernel_size, self.blocks)
    }

    pub fn param_count(&self) -> usize {
        let c = self.hidden_channels;
        self.blocks * 2 * (c * self.kernel_size * c + c) + (c + 1) * self.out_dim
    }
}

/// Residual stack over inputs zero-padded from `in_channels` to
/// `hidden_channels`, read out at the last step by a linear projection.
#[derive(Clone, Debug, PartialEq)]
pub struct Tcn {
    cfg: TcnConfig,
    blocks: Vec<ResidualBlock>,
    proj_weight: Tensor,
    proj_bias: Tensor,
}

impl Tcn {
    pub fn new<R: Rng + ?Sized>(cfg: TcnConfig, rng: &mut R) -> Result<Self, NnError> {
        cfg.validate()?;
        let blocks = (0..cfg.blocks).map(|_| ResidualBlock::new(cfg.hidden_channels, cfg.kernel_size, rng)).collect();
        let proj_weight = uniform_tensor(&[cfg.hidden_channels, cfg.out_dim], cfg.hidden_channels, rng);
        let proj_bias = Tensor::zeros(&[cfg.out_dim]).with_grad();
        Ok(Self {
            cfg,
            blocks,
            proj_weight,
            proj_bias,
        })
    }

    /// Builds from `[block0.conv1.w, block0.conv1.b, block0.conv2.w, block0.conv2.b, ..., proj.w, proj.b]`.
    pub fn from_params(cfg: TcnConfig, params: Vec<Tensor>) -> Result<Self, NnError> {
        cfg.validate()?;
        if params.len() != 4 * cfg.blocks + 2 {
            return Err(NnError::Config(format!("expected {} TCN tensors, got {}", 4 * cfg.blocks + 2, params.len())));
        }
        let (c, k) = (cfg.hidden_channels, cfg.kernel_size);
        let mut it = params.into_iter().map(|mut t| {
            t.set_requires_grad(true);
            t
        });
        let mut blocks = Vec::new();
        for _ in 0..cfg.blocks {
            let b = ResidualBlock {
                conv1_weight: it.next().unwrap(),
                conv1_bias: it.next().unwrap(),
                conv2_weight: it.next().unwrap(),
                conv2_bias: it.next().unwrap(),
            };
            for w in [&b.conv1_weight, &b.conv2_weight] {
                if w.shape() != [c, k, c] {
                    return Err(NnError::Config(format!("conv weight shape {:?}, expected {:?}", w.shape(), [c, k, c])));
                }
            }
            for bias in [&b.conv1_bias, &b.conv2_bias] {
                if bias.shape() != [c] {
                    return Err(NnError::Config(format!("conv bias shape {:?}, expected [{c}]", bias.shape())));
                }
            }
            blocks.push(b);
        }
        let proj_weight = it.next().unwrap();
        let proj_bias = it.next().unwrap();
        if proj_weight.shape() != [c, cfg.out_dim] || proj_bias.shape() != [cfg.out_dim] {
            return Err(NnError::Config("projection head shape mismatch".into()));
        }
        Ok(Self {
            cfg,
            blocks,
            proj_weight,
            proj_bias,
        })
    }

    pub fn config(&self) -> &TcnConfig {
        &self.cfg
    }

    /// Rejects histories longer than the receptive field.
    pub fn check_history(&self, len: usize) -> Result<(), NnError> {
        let receptive_field = self.cfg.receptive_field();
        if len > receptive_field {
            return Err(NnError::ReceptiveField { len, receptive_field });
        }
        Ok(())
    }

    pub fn params(&self) -> Vec<&Tensor> {
        let mut v: Vec<&Tensor> = self.blocks.iter().flat_map(|b| b.params()).collect();
        v.push(&self.proj_weight);
        v.push(&self.proj_bias);
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v: Vec<&mut Tensor> = self.blocks.iter_mut().flat_map(|b| b.params_mut()).collect();
        v.push(&mut self.proj_weight);
        v.push(&mut self.proj_bias);
        v
    }

    pub fn param_names(&self, prefix: &str) -> Vec<String> {
        let mut v: Vec<String> = (0..self.blocks.len())
            .flat_map(|b| {
                [
                    format!("{prefix}.block{b}.conv1.weight"),
                    format!("{prefix}.block{b}.conv1.bias"),
                    format!("{prefix}.block{b}.conv2.weight"),
                    format!("{prefix}.block{b}.conv2.bias"),
                ]
            })
            .collect();
        v.push(format!("{prefix}.proj.weight"));
        v.push(format!("{prefix}.proj.bias"));
        v
    }

    pub fn bind_from(&self, cursor: &mut ParamCursor<'_>) -> TcnVars {
        let blocks = (0..self.blocks.len()).map(|_| ResidualBlockVars::bind_from(cursor)).collect();
        TcnVars {
            cfg: self.cfg.clone(),
            blocks,
            proj_weight: cursor.next_var(),
            proj_bias: cursor.next_var(),
        }
    }

    pub fn bind(&self, tape: &mut Tape, track: bool) -> TcnVars {
        let vars = bind_params(tape, &self.params(), track);
        self.bind_from(&mut ParamCursor::new(&vars))
    }
}

#[derive(Clone, Debug)]
pub struct TcnVars {
    cfg: TcnConfig,
    blocks: Vec<ResidualBlockVars>,
    proj_weight: Var,
    proj_bias: Var,
}

impl TcnVars {
    /// Full residual-stack output `[M, T, hidden]` for `seq: [M, T, in_channels]`.
    pub fn sequence(&self, tape: &mut Tape, seq: Var) -> Result<Var, NnError> {
        let shape = tape.shape(seq).to_vec();
        if shape.len() != 3 || shape[2] != self.cfg.in_channels {
            return Err(NnError::InputDim {
                expected: self.cfg.in_channels,
                got: shape,
            });
        }
        let (m, t) = (shape[0], shape[1]);
        let mut h = if self.cfg.hidden_channels > self.cfg.in_channels {
            let pad = tape.zeros(&[m, t, self.cfg.hidden_channels - self.cfg.in_channels]);
            tape.concat(&[seq, pad], 2)?
        } else {
            seq
        };
        for (b, block) in self.blocks.iter().enumerate() {
            h = residual_block(tape, block, 1 << b, h)?;
        }
        Ok(h)
    }

    /// Encodes `seq: [M, T, I]` (or `[T, I]`) into `[M, out_dim]` (or `[out_dim]`).
    pub fn encode(&self, tape: &mut Tape, seq: Var) -> Result<Var, NnError> {
        let shape = tape.shape(seq).to_vec();
        let batched = shape.len() == 3;
        let seq = if shape.len() == 2 {
            tape.reshape(seq, &[1, shape[0], shape[1]])?
        } else {
            seq
        };
        let t = tape.shape(seq)[1];
        let receptive_field = self.cfg.receptive_field();
        if t > receptive_field {
            return Err(NnError::ReceptiveField { len: t, receptive_field });
        }
        let h = self.sequence(tape, seq)?;
        let m = tape.shape(h)[0];
        let last = tape.slice(h, 1, t - 1, t)?;
        let last = tape.reshape(last, &[m, self.cfg.hidden_channels])?;
        let out = tape.affine(last, self.proj_weight, self.proj_bias)?;
        if batched {
            Ok(out)
        } else {
            Ok(tape.reshape(out, &[self.cfg.out_dim])?)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check_many;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap()
    }

    #[test]
    fn mlp_zero_weights_output_last_bias() {
        let cfg = MlpConfig {
            input_dim: 3,
            hidden_layers: 2,
            hidden_width: 4,
            output_dim: 2,
            activation: Activation::Silu,
        };
        let mut mlp = Mlp::zeros(cfg).unwrap();
        let last = mlp.params_mut().pop().unwrap();
        last.data_mut().copy_from_slice(&[0.7, -1.1]);
        let mut tape = Tape::new();
        let vars = mlp.bind(&mut tape, false);
        let x = tape.leaf(&t(&[2, 3], &[1.0, 2.0, 3.0, -4.0, 5.0, 6.0]));
        let y = vars.forward(&mut tape, x).unwrap();
        assert_eq!(tape.value(y), &[0.7, -1.1, 0.7, -1.1]);
    }

    #[test]
    fn mlp_hand_evaluated() {
        // relu([2, -2]) = [2, 0]; [1, 1] . [2, 0] = 2
        let cfg = MlpConfig {
            input_dim: 1,
            hidden_layers: 1,
            hidden_width: 2,
            output_dim: 1,
            activation: Activation::Relu,
        };
        let mlp = Mlp::from_params(
            cfg,
            vec![t(&[1, 2], &[1.0, -1.0]), t(&[2], &[0.0, 0.0]), t(&[2, 1], &[1.0, 1.0]), t(&[1], &[0.0])],
        )
        .unwrap();
        let mut tape = Tape::new();
        let vars = mlp.bind(&mut tape, false);
        let x = tape.leaf(&t(&[1, 1], &[2.0]));
        let y = vars.forward(&mut tape, x).unwrap();
        assert_eq!(tape.value(y), &[2.0]);
    }

    #[test]
    fn mlp_without_hidden_layers_is_affine() {
        let cfg = MlpConfig {
            input_dim: 2,
            hidden_layers: 0,
            hidden_width: 0,
            output_dim: 1,
            activation: Activation::Tanh,
        };
        assert_eq!(cfg.param_count(), 3);
        let mlp = Mlp::from_params(cfg, vec![t(&[2, 1], &[2.0, -3.0]), t(&[1], &[0.5])]).unwrap();
        let mut tape = Tape::new();
        let vars = mlp.bind(&mut tape, false);
        let x = tape.leaf(&t(&[1, 2], &[1.5, 4.0]));
        let y = vars.forward(&mut tape, x).unwrap();
        assert_eq!(tape.value(y), &[2.0 * 1.5 - 3.0 * 4.0 + 0.5]);
    }

    #[test]
    fn mlp_rejects_wrong_input_dim() {
        let cfg = MlpConfig {
            input_dim: 3,
            hidden_layers: 1,
            hidden_width: 4,
            output_dim: 1,
            activation: Activation::Silu,
        };
        let mlp = Mlp::new(cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let mut tape = Tape::new();
        let vars = mlp.bind(&mut tape, false);
        let x = tape.zeros(&[2, 4]);
        assert!(matches!(vars.forward(&mut tape, x), Err(NnError::InputDim { expected: 3, .. })));
    }

    #[test]
    fn conv_hand_evaluated() {
        // W = [1, 1], d = 1: out_k = x_k + x_{k-1}, x_{-1} = 0
        let mut tape = Tape::new();
        let w = tape.leaf(&t(&[1, 2, 1], &[1.0, 1.0]));
        let b = tape.leaf(&t(&[1], &[0.0]));
        let seq = tape.leaf(&t(&[3, 1], &[1.0, 2.0, 3.0]));
        let y = causal_conv1d(&mut tape, w, b, 1, seq).unwrap();
        assert_eq!(tape.value(y), &[1.0, 3.0, 5.0]);

        let w0 = tape.zeros(&[2, 3, 1]);
        let c = tape.leaf(&t(&[2], &[0.25, -4.0]));
        let y = causal_conv1d(&mut tape, w0, c, 2, seq).unwrap();
        assert_eq!(tape.value(y), &[0.25, -4.0, 0.25, -4.0, 0.25, -4.0]);
    }

    #[test]
    fn conv_matches_direct_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (tt, ci, co, k, d) = (9, 3, 2, 3, 2);
        let (x, w, b) = (random(&[tt, ci], &mut rng), random(&[co, k, ci], &mut rng), random(&[co], &mut rng));
        let mut tape = Tape::new();
        let (xv, wv, bv) = (tape.leaf(&x), tape.leaf(&w), tape.leaf(&b));
        let y = causal_conv1d(&mut tape, wv, bv, d, xv).unwrap();
        for step in 0..tt {
            for o in 0..co {
                let mut direct = b.data()[o];
                for i in 0..ci {
                    for j in 0..k {
                        if step >= d * j {
                            direct += w.data()[(o * k + j) * ci + i] * x.data()[(step - d * j) * ci + i];
                        }
                    }
                }
                let got = tape.value(y)[step * co + o];
                assert!((got - direct).abs() < 1e-12, "t={step} o={o}: {got} vs {direct}");
            }
        }
    }

    fn zero_block(tape: &mut Tape, c: usize, k: usize) -> ResidualBlockVars {
        ResidualBlockVars {
            conv1_weight: tape.zeros(&[c, k, c]),
            conv1_bias: tape.zeros(&[c]),
            conv2_weight: tape.zeros(&[c, k, c]),
            conv2_bias: tape.zeros(&[c]),
        }
    }

    #[test]
    fn residual_block_zero_params_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for len in [1, 4, 13] {
            let x = random(&[len, 3], &mut rng);
            let mut tape = Tape::new();
            let p = zero_block(&mut tape, 3, 2);
            let xv = tape.leaf(&x);
            let y = residual_block(&mut tape, &p, 4, xv).unwrap();
            assert_eq!(tape.shape(y), &[len, 3]);
            assert_eq!(tape.value(y), x.data());
        }
    }

    #[test]
    fn residual_block_hand_evaluated() {
        // single channel, K = 2, d = 1
        // conv1: a0 x_t + a1 x_{t-1} + c1 ; conv2: b0 h_t + b1 h_{t-1} + c2
        let (a0, a1, c1, b0, b1, c2) = (0.5, -1.0, 0.2, 1.5, 0.25, -0.1);
        let x = [1.0, -2.0, 3.0, 0.5];
        let relu = |v: f64| v.max(0.0);
        let h: Vec<f64> = (0..4)
            .map(|t| relu(a0 * x[t] + if t > 0 { a1 * x[t - 1] } else { 0.0 } + c1))
            .collect();
        let expected: Vec<f64> = (0..4)
            .map(|t| x[t] + relu(b0 * h[t] + if t > 0 { b1 * h[t - 1] } else { 0.0 } + c2))
            .collect();

        let mut tape = Tape::new();
        let p = ResidualBlockVars {
            conv1_weight: tape.leaf(&t(&[1, 2, 1], &[a0, a1])),
            conv1_bias: tape.leaf(&t(&[1], &[c1])),
            conv2_weight: tape.leaf(&t(&[1, 2, 1], &[b0, b1])),
            conv2_bias: tape.leaf(&t(&[1], &[c2])),
        };
        let xv = tape.leaf(&t(&[4, 1], &x));
        let y = residual_block(&mut tape, &p, 1, xv).unwrap();
        for (g, e) in tape.value(y).iter().zip(&expected) {
            assert!((g - e).abs() < 1e-15);
        }
    }

    #[test]
    fn residual_block_rejects_channel_mismatch() {
        let mut tape = Tape::new();
        let p = zero_block(&mut tape, 3, 2);
        let x = tape.zeros(&[5, 2]);
        assert!(residual_block(&mut tape, &p, 1, x).is_err());
    }

    fn tcn_cfg(k: usize, b: usize) -> TcnConfig {
        TcnConfig {
            in_channels: 2,
            hidden_channels: 4,
            out_dim: 3,
            kernel_size: k,
            blocks: b,
        }
    }

    #[test]
    fn tcn_zero_convs_project_last_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cfg = tcn_cfg(2, 2);
        let mut tcn = Tcn::new(cfg, &mut rng).unwrap();
        let n = tcn.params().len();
        for (i, p) in tcn.params_mut().into_iter().enumerate() {
            if i < n - 2 {
                p.data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
        tcn.proj_bias.data_mut().copy_from_slice(&[0.1, 0.2, 0.3]);
        let seq = random(&[6, 2], &mut rng);
        let mut tape = Tape::new();
        let vars = tcn.bind(&mut tape, false);
        let sv = tape.leaf(&seq);
        let y = vars.encode(&mut tape, sv).unwrap();
        assert_eq!(tape.shape(y), &[3]);
        let last = &seq.data()[10..12];
        let wp = tcn.proj_weight.data();
        for o in 0..3 {
            let expected = tcn.proj_bias.data()[o] + last[0] * wp[o] + last[1] * wp[3 + o];
            assert!((tape.value(y)[o] - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn tcn_output_shape_is_independent_of_length() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let tcn = Tcn::new(tcn_cfg(3, 2), &mut rng).unwrap();
        for len in [1, 5, 13] {
            let mut tape = Tape::new();
            let vars = tcn.bind(&mut tape, false);
            let s = tape.leaf(&random(&[4, len, 2], &mut rng));
            let y = vars.encode(&mut tape, s).unwrap();
            assert_eq!(tape.shape(y), &[4, 3]);
        }
        let mut tape = Tape::new();
        let vars = tcn.bind(&mut tape, false);
        let s = tape.zeros(&[1, 14, 2]);
        assert!(matches!(
            vars.encode(&mut tape, s),
            Err(NnError::ReceptiveField {
                len: 14,
                receptive_field: 13
            })
        ));
        assert!(tcn.check_history(14).is_err());
        assert!(tcn.check_history(13).is_ok());
    }

    #[test]
    fn tcn_senses_first_step_within_receptive_field() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let cfg = tcn_cfg(2, 3);
        let tcn = Tcn::new(cfg.clone(), &mut rng).unwrap();
        let len = cfg.receptive_field();
        let seq = random(&[len, 2], &mut rng);
        let eval = |s: &Tensor| {
            let mut tape = Tape::new();
            let vars = tcn.bind(&mut tape, false);
            let sv = tape.leaf(s);
            let y = vars.encode(&mut tape, sv).unwrap();
            tape.value(y).to_vec()
        };
        let eps = 1e-5;
        let mut up = seq.clone();
        up.data_mut()[0] += eps;
        let mut down = seq.clone();
        down.data_mut()[0] -= eps;
        let sens: f64 = eval(&up).iter().zip(eval(&down)).map(|(a, b)| ((a - b) / (2.0 * eps)).abs()).sum();
        assert!(sens > 0.0);
    }

    /// Receptive field measured by perturbing one input step at a time.
    fn impulse_receptive_field(k: usize, b: usize) -> usize {
        let len = 4 * k * (1 << b) + 3;
        let mut tape = Tape::new();
        let blocks: Vec<ResidualBlockVars> = (0..b)
            .map(|_| ResidualBlockVars {
                conv1_weight: tape.constant(&[1, k, 1], vec![0.5; k]).unwrap(),
                conv1_bias: tape.zeros(&[1]),
                conv2_weight: tape.constant(&[1, k, 1], vec![0.5; k]).unwrap(),
                conv2_bias: tape.zeros(&[1]),
            })
            .collect();
        let run = |tape: &mut Tape, seq: Vec<f64>| {
            let mut h = tape.constant(&[1, len, 1], seq).unwrap();
            for (i, blk) in blocks.iter().enumerate() {
                h = residual_block(tape, blk, 1 << i, h).unwrap();
            }
            tape.value(h)[len - 1]
        };
        let base = run(&mut tape, vec![1.0; len]);
        let mut sensitive = 0;
        for step in 0..len {
            let mut seq = vec![1.0; len];
            seq[step] += 1.0;
            if run(&mut tape, seq) != base {
                sensitive += 1;
            }
        }
        sensitive
    }

    #[test]
    fn receptive_field_examples() {
        assert_eq!(receptive_field(1, 3), 1);
        assert_eq!(receptive_field(2, 1), 3);
        assert_eq!(receptive_field(3, 3), 29);
        assert_eq!(impulse_receptive_field(2, 1), 3);
        assert_eq!(impulse_receptive_field(3, 3), 29);
    }

    #[test]
    fn receptive_field_matches_impulse_oracle() {
        for k in 1..=4 {
            for b in 1..=4 {
                assert_eq!(receptive_field(k, b), impulse_receptive_field(k, b), "K={k}, B={b}");
            }
        }
    }

    #[test]
    fn blocks_cover_history() {
        assert_eq!(blocks_for_history(2, 32).unwrap(), 5);
        assert_eq!(blocks_for_history(3, 29).unwrap(), 3);
        assert_eq!(blocks_for_history(2, 64).unwrap(), 6);
        assert!(blocks_for_history(1, 5).is_err());
    }

    #[test]
    fn tcn_is_causal_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let tcn = Tcn::new(tcn_cfg(3, 3), &mut rng).unwrap();
        let len = 20;
        let seq = random(&[1, len, 2], &mut rng);
        let full = |s: &Tensor| {
            let mut tape = Tape::new();
            let vars = tcn.bind(&mut tape, false);
            let sv = tape.leaf(s);
            let h = vars.sequence(&mut tape, sv).unwrap();
            tape.value(h).to_vec()
        };
        let base = full(&seq);
        for k in [0, 7, 19] {
            let mut p = seq.clone();
            p.data_mut()[k * 2] += 0.75;
            p.data_mut()[k * 2 + 1] -= 1.25;
            let out = full(&p);
            let c = 4;
            assert_eq!(
                out[..k * c].iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                base[..k * c].iter().map(|v| v.to_bits()).collect::<Vec<_>>()
            );
            assert_ne!(out[k * c..], base[k * c..]);
        }
    }

    #[test]
    fn layer_gradients_pass_grad_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for act in [Activation::Relu, Activation::Silu, Activation::Gelu, Activation::Tanh] {
            let cfg = MlpConfig {
                input_dim: 3,
                hidden_layers: 2,
                hidden_width: 5,
                output_dim: 2,
                activation: act,
            };
            let mlp = Mlp::new(cfg, &mut rng).unwrap();
            let mut inputs: Vec<Tensor> = mlp.params().into_iter().cloned().collect();
            inputs.push(random(&[4, 3], &mut rng));
            let err = grad_check_many(
                |tape, vars| {
                    let mv = mlp.bind_from(&mut ParamCursor::new(&vars[..vars.len() - 1]));
                    let y = mv.forward(tape, vars[vars.len() - 1]).map_err(to_ad)?;
                    let y = tape.sin(y);
                    Ok(tape.sum(y))
                },
                &inputs,
                1e-6,
            )
            .unwrap();
            assert!(err < 1e-6, "{act:?}: {err}");
        }

        let tcn = Tcn::new(tcn_cfg(2, 2), &mut rng).unwrap();
        let mut inputs: Vec<Tensor> = tcn.params().into_iter().cloned().collect();
        inputs.push(random(&[2, 6, 2], &mut rng));
        let err = grad_check_many(
            |tape, vars| {
                let tv = tcn.bind_from(&mut ParamCursor::new(&vars[..vars.len() - 1]));
                let y = tv.encode(tape, vars[vars.len() - 1]).map_err(to_ad)?;
                let y = tape.sin(y);
                Ok(tape.sum(y))
            },
            &inputs,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-6, "tcn: {err}");
    }

    fn to_ad(e: NnError) -> AutodiffError {
        match e {
            NnError::Autodiff(a) => a,
            other => AutodiffError::Invalid {
                op: "nn",
                msg: other.to_string(),
            },
        }
    }
}
