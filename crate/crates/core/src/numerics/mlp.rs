use super::{all_finite, Rng};
use crate::error::{check_dim, Error, Result};
use rand_distr::{Distribution, StandardNormal};

/// Fully connected network: tanh on hidden layers, identity on the output.
///
/// Parameters live in one flat buffer so optimizers and checkpoints can treat
/// them uniformly. Layer `l` stores its weights row-major (`out x in`)
/// followed by its bias.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    widths: Vec<usize>,
    params: Vec<f64>,
}

/// Activations recorded by [`Mlp::forward_trace`]; index 0 is the input.
#[derive(Debug, Clone)]
pub struct Trace {
    activations: Vec<Vec<f64>>,
}

impl Trace {
    pub fn output(&self) -> &[f64] {
        self.activations.last().expect("trace has an input layer")
    }
}

/// Result of [`Mlp::gradients`].
#[derive(Debug, Clone, PartialEq)]
pub struct MlpGradients {
    pub params: Vec<f64>,
    pub input: Vec<f64>,
}

fn param_count(widths: &[usize]) -> usize {
    widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

impl Mlp {
    /// Gaussian initialisation scaled by `1/sqrt(fan_in)`, zero biases.
    pub fn new(widths: &[usize], rng: &mut Rng) -> Result<Self> {
        let mut net = Self::zeros(widths)?;
        let mut offset = 0;
        for w in widths.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let scale = 1.0 / (fan_in as f64).sqrt();
            for p in &mut net.params[offset..offset + fan_in * fan_out] {
                let z: f64 = StandardNormal.sample(rng);
                *p = z * scale;
            }
            offset += fan_in * fan_out + fan_out;
        }
        Ok(net)
    }

    pub fn zeros(widths: &[usize]) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(Error::InvalidArgument(format!(
                "mlp needs at least two non-zero layer widths, got {widths:?}"
            )));
        }
        Ok(Self {
            widths: widths.to_vec(),
            params: vec![0.0; param_count(widths)],
        })
    }

    pub fn from_params(widths: &[usize], params: Vec<f64>) -> Result<Self> {
        let mut net = Self::zeros(widths)?;
        check_dim("mlp parameter count", net.params.len(), params.len())?;
        if !all_finite(&params) {
            return Err(Error::NonFinite("mlp parameters"));
        }
        net.params = params;
        Ok(net)
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// Weight `(row, col)` of layer `layer`, mostly for hand-built test nets.
    pub fn set_weight(&mut self, layer: usize, row: usize, col: usize, value: f64) {
        let offset = self.layer_offset(layer);
        let fan_in = self.widths[layer];
        self.params[offset + row * fan_in + col] = value;
    }

    pub fn set_bias(&mut self, layer: usize, row: usize, value: f64) {
        let offset = self.layer_offset(layer);
        let (fan_in, fan_out) = (self.widths[layer], self.widths[layer + 1]);
        self.params[offset + fan_in * fan_out + row] = value;
    }

    fn layer_offset(&self, layer: usize) -> usize {
        self.widths[..=layer].windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        check_dim("mlp input", self.input_dim(), input.len())?;
        let mut x = input.to_vec();
        let mut offset = 0;
        let layers = self.widths.len() - 1;
        for (l, w) in self.widths.windows(2).enumerate() {
            x = self.affine(offset, w[0], w[1], &x, l + 1 < layers);
            offset += w[0] * w[1] + w[1];
        }
        Ok(x)
    }

    pub fn forward_trace(&self, input: &[f64]) -> Result<Trace> {
        check_dim("mlp input", self.input_dim(), input.len())?;
        let mut activations = Vec::with_capacity(self.widths.len());
        activations.push(input.to_vec());
        let mut offset = 0;
        let layers = self.widths.len() - 1;
        for (l, w) in self.widths.windows(2).enumerate() {
            let next = self.affine(offset, w[0], w[1], &activations[l], l + 1 < layers);
            activations.push(next);
            offset += w[0] * w[1] + w[1];
        }
        Ok(Trace { activations })
    }

    fn affine(&self, offset: usize, fan_in: usize, fan_out: usize, x: &[f64], tanh: bool) -> Vec<f64> {
        let weights = &self.params[offset..offset + fan_in * fan_out];
        let bias = &self.params[offset + fan_in * fan_out..offset + fan_in * fan_out + fan_out];
        weights
            .chunks_exact(fan_in)
            .zip(bias)
            .map(|(row, b)| {
                let z = row.iter().zip(x).fold(*b, |acc, (w, xi)| acc + w * xi);
                if tanh {
                    z.tanh()
                } else {
                    z
                }
            })
            .collect()
    }

    /// Backpropagates `output_grad` through a recorded pass.
    ///
    /// Parameter gradients of `output · output_grad` are *added* into
    /// `param_grad`; the input gradient is returned.
    pub fn backward(&self, trace: &Trace, output_grad: &[f64], param_grad: &mut [f64]) -> Result<Vec<f64>> {
        check_dim("mlp output gradient", self.output_dim(), output_grad.len())?;
        check_dim("mlp parameter gradient", self.params.len(), param_grad.len())?;
        let layers = self.widths.len() - 1;
        let mut offsets = Vec::with_capacity(layers);
        let mut offset = 0;
        for w in self.widths.windows(2) {
            offsets.push(offset);
            offset += w[0] * w[1] + w[1];
        }
        let mut delta = output_grad.to_vec();
        for l in (0..layers).rev() {
            let (fan_in, fan_out) = (self.widths[l], self.widths[l + 1]);
            if l + 1 < layers {
                // delta arrives w.r.t. the tanh output; convert to pre-activation.
                for (d, h) in delta.iter_mut().zip(&trace.activations[l + 1]) {
                    *d *= 1.0 - h * h;
                }
            }
            let input = &trace.activations[l];
            let off = offsets[l];
            let (wgrad, rest) = param_grad[off..off + fan_in * fan_out + fan_out].split_at_mut(fan_in * fan_out);
            for ((row, b), d) in wgrad.chunks_exact_mut(fan_in).zip(rest.iter_mut()).zip(&delta) {
                if *d == 0.0 {
                    continue;
                }
                *b += d;
                for (g, x) in row.iter_mut().zip(input) {
                    *g += d * x;
                }
            }
            let weights = &self.params[off..off + fan_in * fan_out];
            let mut next = vec![0.0; fan_in];
            for (row, d) in weights.chunks_exact(fan_in).zip(&delta) {
                if *d == 0.0 {
                    continue;
                }
                for (n, w) in next.iter_mut().zip(row) {
                    *n += d * w;
                }
            }
            delta = next;
        }
        Ok(delta)
    }

    /// Exact gradients of `forward(input) · output_grad` w.r.t. parameters and input.
    pub fn gradients(&self, input: &[f64], output_grad: &[f64]) -> Result<MlpGradients> {
        let trace = self.forward_trace(input)?;
        let mut params = vec![0.0; self.params.len()];
        let input = self.backward(&trace, output_grad, &mut params)?;
        Ok(MlpGradients { params, input })
    }
}
