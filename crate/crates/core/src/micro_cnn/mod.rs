//! Small convolutional network trained from scratch: stacked 3×3
//! convolution, ReLU and 2×2 max-pool blocks, dense layers and a two-way
//! softmax. Everything runs in `f64` on the CPU.
//!
//! Layers are numbered from 1 in order: the convolution blocks first, then
//! the hidden dense layers. Dropout is attached to layer numbers.

mod io;
mod layers;
mod train;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use io::{load_network, read_network, save_network, write_network, WEIGHTS_FORMAT_VERSION};
pub use train::{gradient_check, tiny_gradient_check, train, GradCheckReport, TrainConfig};

use layers::*;

pub const OUTPUT_CLASSES: usize = 2;
/// Samples per parallel work unit; fixed so reductions do not depend on
/// the thread count.
const CHUNK: usize = 4;

#[derive(Debug, thiserror::Error)]
pub enum CnnError {
    #[error("architecture collapses: spatial size is 0 after block {block}")]
    ArchitectureCollapses { block: usize },
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("shape mismatch: sample {index} has {got} values, expected {expected}")]
    ShapeMismatch { index: usize, expected: usize, got: usize },
    #[error("degenerate labels: training data holds a single class")]
    DegenerateLabels,
    #[error("weights file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub kernel: usize,
    pub channels: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DropoutSpec {
    /// 1-based layer number.
    pub layer: usize,
    /// Probability of dropping a unit.
    pub p: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    /// Squared error between the softmax output and the one-hot target.
    Mse,
    /// Cross-entropy of the softmax output.
    Xent,
}

impl std::str::FromStr for LossKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "mse" => Ok(LossKind::Mse),
            "xent" => Ok(LossKind::Xent),
            other => Err(format!("unknown loss {other:?}, expected mse or xent")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    /// Side of the square input.
    pub input_size: usize,
    pub input_channels: usize,
    pub conv: Vec<ConvSpec>,
    /// Hidden dense layer widths; the two-unit output layer follows.
    pub fc: Vec<usize>,
    pub dropout: Vec<DropoutSpec>,
    pub loss: LossKind,
}

impl Default for NetworkConfig {
    /// 256×256 grey input, six blocks of 8, 16, 32, 32, 64, 64 channels,
    /// dense 256 and 64, dropping 0.75 of units after layers 6 and 7.
    fn default() -> Self {
        Self {
            input_size: 256,
            input_channels: 1,
            conv: [8, 16, 32, 32, 64, 64].iter().map(|&c| ConvSpec { kernel: 3, channels: c }).collect(),
            fc: vec![256, 64],
            dropout: vec![DropoutSpec { layer: 6, p: 0.75 }, DropoutSpec { layer: 7, p: 0.75 }],
            loss: LossKind::Mse,
        }
    }
}

impl NetworkConfig {
    /// Same depth for 64×64 patches with narrower layers.
    pub fn desk() -> Self {
        Self {
            input_size: 64,
            conv: [4, 8, 8, 16, 16, 32].iter().map(|&c| ConvSpec { kernel: 3, channels: c }).collect(),
            fc: vec![32, 16],
            ..Self::default()
        }
    }

    /// 8×8 input with two blocks, for gradient checking.
    pub fn tiny() -> Self {
        Self {
            input_size: 8,
            input_channels: 1,
            conv: vec![ConvSpec { kernel: 3, channels: 4 }, ConvSpec { kernel: 3, channels: 6 }],
            fc: vec![8],
            dropout: Vec::new(),
            loss: LossKind::Mse,
        }
    }

    pub fn input_len(&self) -> usize {
        self.input_channels * self.input_size * self.input_size
    }

    pub fn dropout_at(&self, layer: usize) -> f64 {
        self.dropout.iter().filter(|d| d.layer == layer).map(|d| d.p).fold(0.0, f64::max)
    }

    /// Checks the config and returns the spatial side entering each block
    /// followed by the side after the last pool.
    pub fn spatial_sizes(&self) -> Result<Vec<usize>, CnnError> {
        if self.input_size == 0 || self.input_channels == 0 {
            return Err(CnnError::InvalidConfig("input must be non-empty".into()));
        }
        for (i, c) in self.conv.iter().enumerate() {
            if c.kernel % 2 == 0 || c.channels == 0 {
                return Err(CnnError::InvalidConfig(format!("block {}: kernel must be odd and channels positive", i + 1)));
            }
        }
        if self.fc.iter().any(|&n| n == 0) {
            return Err(CnnError::InvalidConfig("dense widths must be positive".into()));
        }
        let n_layers = self.conv.len() + self.fc.len();
        for d in &self.dropout {
            if !(0.0..1.0).contains(&d.p) || d.layer == 0 || d.layer > n_layers {
                return Err(CnnError::InvalidConfig(format!("dropout on layer {} with p {}", d.layer, d.p)));
            }
        }
        let mut sizes = vec![self.input_size];
        let mut s = self.input_size;
        for block in 1..=self.conv.len() {
            s /= 2;
            if s == 0 {
                return Err(CnnError::ArchitectureCollapses { block });
            }
            sizes.push(s);
        }
        Ok(sizes)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerKind {
    Conv { input_channels: usize, channels: usize, kernel: usize, size: usize },
    Dense { inputs: usize, outputs: usize },
}

/// Placement of one layer's tensors inside the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerLayout {
    pub name: String,
    pub kind: LayerKind,
    pub weight_shape: Vec<usize>,
    pub weight_offset: usize,
    pub bias_offset: usize,
    pub bias_len: usize,
}

impl LayerLayout {
    pub fn weight_len(&self) -> usize {
        self.weight_shape.iter().product()
    }

    pub fn fan_in(&self) -> usize {
        match self.kind {
            LayerKind::Conv { input_channels, kernel, .. } => input_channels * kernel * kernel,
            LayerKind::Dense { inputs, .. } => inputs,
        }
    }
}

pub fn layout_for(config: &NetworkConfig) -> Result<Vec<LayerLayout>, CnnError> {
    let sizes = config.spatial_sizes()?;
    let mut out = Vec::new();
    let mut offset = 0;
    let mut push = |name: String, kind: LayerKind, weight_shape: Vec<usize>, bias_len: usize| {
        let wl: usize = weight_shape.iter().product();
        out.push(LayerLayout { name, kind, weight_shape, weight_offset: offset, bias_offset: offset + wl, bias_len });
        offset += wl + bias_len;
    };
    let mut cin = config.input_channels;
    for (i, c) in config.conv.iter().enumerate() {
        push(
            format!("layer{}", i + 1),
            LayerKind::Conv { input_channels: cin, channels: c.channels, kernel: c.kernel, size: sizes[i] },
            vec![c.channels, cin, c.kernel, c.kernel],
            c.channels,
        );
        cin = c.channels;
    }
    let last = sizes[sizes.len() - 1];
    let mut n_in = cin * last * last;
    for (j, &n) in config.fc.iter().enumerate() {
        push(format!("layer{}", config.conv.len() + j + 1), LayerKind::Dense { inputs: n_in, outputs: n }, vec![n, n_in], n);
        n_in = n;
    }
    push("output".into(), LayerKind::Dense { inputs: n_in, outputs: OUTPUT_CLASSES }, vec![OUTPUT_CLASSES, n_in], OUTPUT_CLASSES);
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Infer,
    /// Dropout active, masks drawn from this seed.
    Train { seed: u64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub config: NetworkConfig,
    pub layers: Vec<LayerLayout>,
    /// Every weight and bias in declaration order.
    pub params: Vec<f64>,
}

/// Network with He-uniform weights `U(±√(6/fan_in))` and zero biases.
pub fn build_network(config: &NetworkConfig, seed: u64) -> Result<Network, CnnError> {
    let mut net = Network::zeros(config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for l in &net.layers {
        let limit = (6.0 / l.fan_in() as f64).sqrt();
        for v in &mut net.params[l.weight_offset..l.weight_offset + l.weight_len()] {
            *v = rng.gen_range(-limit..limit);
        }
    }
    Ok(net)
}

pub fn one_hot(class: usize) -> [f64; 2] {
    let mut t = [0.0; 2];
    t[class.min(1)] = 1.0;
    t
}

struct ConvTrace {
    input: Vec<f64>,
    pre: Vec<f64>,
    argmax: Vec<u32>,
    mask: Option<Vec<f64>>,
}

struct DenseTrace {
    input: Vec<f64>,
    pre: Vec<f64>,
    mask: Option<Vec<f64>>,
}

struct Trace {
    conv: Vec<ConvTrace>,
    dense: Vec<DenseTrace>,
    probs: [f64; 2],
}

fn dropout_mask(rng: &mut Option<ChaCha8Rng>, p: f64, n: usize) -> Option<Vec<f64>> {
    let rng = rng.as_mut()?;
    if p <= 0.0 {
        return None;
    }
    let keep = 1.0 - p;
    Some((0..n).map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 }).collect())
}

fn sample_rng(mode: Mode, index: usize) -> Option<ChaCha8Rng> {
    match mode {
        Mode::Infer => None,
        Mode::Train { seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(index as u64);
            Some(rng)
        }
    }
}

impl Network {
    pub fn zeros(config: &NetworkConfig) -> Result<Self, CnnError> {
        let layers = layout_for(config)?;
        let n = layers.last().map(|l| l.bias_offset + l.bias_len).unwrap_or(0);
        Ok(Self { config: config.clone(), layers, params: vec![0.0; n] })
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    fn weights(&self, l: &LayerLayout) -> (&[f64], &[f64]) {
        (
            &self.params[l.weight_offset..l.weight_offset + l.weight_len()],
            &self.params[l.bias_offset..l.bias_offset + l.bias_len],
        )
    }

    fn check_inputs<T: AsRef<[f64]>>(&self, inputs: &[T]) -> Result<(), CnnError> {
        let expected = self.config.input_len();
        for (index, x) in inputs.iter().enumerate() {
            let got = x.as_ref().len();
            if got != expected {
                return Err(CnnError::ShapeMismatch { index, expected, got });
            }
        }
        Ok(())
    }

    fn trace(&self, input: &[f64], mut rng: Option<ChaCha8Rng>) -> Trace {
        let n_conv = self.config.conv.len();
        let mut x = input.to_vec();
        let mut conv = Vec::with_capacity(n_conv);
        for (b, l) in self.layers[..n_conv].iter().enumerate() {
            let LayerKind::Conv { input_channels, channels, kernel, size } = l.kind else { unreachable!() };
            let (w, bias) = self.weights(l);
            let pre = conv_forward(&x, input_channels, size, w, bias, channels, kernel);
            let act: Vec<f64> = pre.iter().map(|v| v.max(0.0)).collect();
            let (mut pooled, argmax) = maxpool_forward(&act, channels, size);
            let mask = dropout_mask(&mut rng, self.config.dropout_at(b + 1), pooled.len());
            if let Some(m) = &mask {
                pooled.iter_mut().zip(m).for_each(|(v, s)| *v *= s);
            }
            conv.push(ConvTrace { input: std::mem::replace(&mut x, pooled), pre, argmax, mask });
        }
        let mut dense = Vec::with_capacity(self.config.fc.len() + 1);
        let last = self.layers.len() - 1;
        for (j, l) in self.layers[n_conv..].iter().enumerate() {
            let (w, bias) = self.weights(l);
            let pre = dense_forward(&x, w, bias);
            let (next, mask) = if n_conv + j == last {
                (pre.clone(), None)
            } else {
                let mut a: Vec<f64> = pre.iter().map(|v| v.max(0.0)).collect();
                let mask = dropout_mask(&mut rng, self.config.dropout_at(n_conv + j + 1), a.len());
                if let Some(m) = &mask {
                    a.iter_mut().zip(m).for_each(|(v, s)| *v *= s);
                }
                (a, mask)
            };
            dense.push(DenseTrace { input: std::mem::replace(&mut x, next), pre, mask });
        }
        let probs = softmax2(&x);
        Trace { conv, dense, probs }
    }

    fn sample_loss(&self, probs: &[f64; 2], target: &[f64; 2]) -> f64 {
        match self.config.loss {
            LossKind::Mse => (0..2).map(|c| (probs[c] - target[c]).powi(2)).sum(),
            LossKind::Xent => -(0..2).map(|c| target[c] * probs[c].max(1e-300).ln()).sum::<f64>(),
        }
    }

    /// Adds `scale ×` the loss gradient of one traced sample into `grad`.
    fn backprop(&self, t: &Trace, target: &[f64; 2], scale: f64, grad: &mut [f64]) {
        let p = t.probs;
        let mut g: Vec<f64> = match self.config.loss {
            LossKind::Mse => {
                let dp = [2.0 * (p[0] - target[0]) * scale, 2.0 * (p[1] - target[1]) * scale];
                let s = dp[0] * p[0] + dp[1] * p[1];
                vec![p[0] * (dp[0] - s), p[1] * (dp[1] - s)]
            }
            LossKind::Xent => {
                let tsum = target[0] + target[1];
                vec![(p[0] * tsum - target[0]) * scale, (p[1] * tsum - target[1]) * scale]
            }
        };
        let n_conv = self.config.conv.len();
        for (j, tr) in t.dense.iter().enumerate().rev() {
            let l = &self.layers[n_conv + j];
            let (w, _) = self.weights(l);
            let (gw, gb) = grad[l.weight_offset..l.bias_offset + l.bias_len].split_at_mut(l.weight_len());
            let mut dx = dense_backward(&tr.input, w, &g, gw, gb);
            if j > 0 {
                let prev = &t.dense[j - 1];
                for (k, d) in dx.iter_mut().enumerate() {
                    let m = prev.mask.as_ref().map_or(1.0, |m| m[k]);
                    *d = if prev.pre[k] > 0.0 { *d * m } else { 0.0 };
                }
            }
            g = dx;
        }
        for (b, tr) in t.conv.iter().enumerate().rev() {
            let l = &self.layers[b];
            let LayerKind::Conv { input_channels, channels, kernel, size } = l.kind else { unreachable!() };
            if let Some(m) = &tr.mask {
                g.iter_mut().zip(m).for_each(|(v, s)| *v *= s);
            }
            let mut dz = maxpool_backward(&g, &tr.argmax, tr.pre.len());
            dz.iter_mut().zip(&tr.pre).for_each(|(d, &z)| {
                if z <= 0.0 {
                    *d = 0.0
                }
            });
            let (w, _) = self.weights(l);
            let (gw, gb) = grad[l.weight_offset..l.bias_offset + l.bias_len].split_at_mut(l.weight_len());
            g = conv_backward(&tr.input, input_channels, size, w, channels, kernel, &dz, gw, gb, b > 0);
        }
    }

    /// Class probabilities of every input.
    pub fn forward<T: AsRef<[f64]> + Sync>(&self, inputs: &[T], mode: Mode) -> Result<Vec<[f64; 2]>, CnnError> {
        self.check_inputs(inputs)?;
        Ok(inputs.par_iter().enumerate().map(|(i, x)| self.trace(x.as_ref(), sample_rng(mode, i)).probs).collect())
    }

    /// Most probable class per input; ties go to class 0.
    pub fn predict<T: AsRef<[f64]> + Sync>(&self, inputs: &[T]) -> Result<Vec<usize>, CnnError> {
        Ok(self.forward(inputs, Mode::Infer)?.iter().map(|p| usize::from(p[1] > p[0])).collect())
    }

    /// Mean loss over the batch.
    pub fn loss<T: AsRef<[f64]> + Sync>(&self, inputs: &[T], targets: &[[f64; 2]], mode: Mode) -> Result<f64, CnnError> {
        let probs = self.forward(inputs, mode)?;
        let total: f64 = probs.iter().zip(targets).map(|(p, t)| self.sample_loss(p, t)).sum();
        Ok(total / inputs.len().max(1) as f64)
    }

    /// Mean loss over the batch and its gradient with respect to `params`.
    pub fn loss_and_gradients<T: AsRef<[f64]> + Sync>(
        &self,
        inputs: &[T],
        targets: &[[f64; 2]],
        mode: Mode,
    ) -> Result<(f64, Vec<f64>), CnnError> {
        self.check_inputs(inputs)?;
        if targets.len() != inputs.len() {
            return Err(CnnError::InvalidConfig(format!("{} targets for {} inputs", targets.len(), inputs.len())));
        }
        if inputs.is_empty() {
            return Ok((0.0, vec![0.0; self.params.len()]));
        }
        let scale = 1.0 / inputs.len() as f64;
        let partials: Vec<(f64, Vec<f64>)> = (0..inputs.len().div_ceil(CHUNK))
            .into_par_iter()
            .map(|c| {
                let mut grad = vec![0.0; self.params.len()];
                let mut loss = 0.0;
                for i in c * CHUNK..((c + 1) * CHUNK).min(inputs.len()) {
                    let t = self.trace(inputs[i].as_ref(), sample_rng(mode, i));
                    loss += self.sample_loss(&t.probs, &targets[i]);
                    self.backprop(&t, &targets[i], scale, &mut grad);
                }
                (loss, grad)
            })
            .collect();
        let mut grad = vec![0.0; self.params.len()];
        let mut loss = 0.0;
        for (l, g) in partials {
            loss += l;
            grad.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
        }
        Ok((loss * scale, grad))
    }
}
