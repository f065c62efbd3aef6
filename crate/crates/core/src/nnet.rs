//! Dense feed-forward networks with hand-written reverse-mode gradients and
//! an Adam optimizer.
//!
//! Parameters live in one flat vector. Layer `k` stores its weight matrix
//! row-major (`out x in`) followed by its `out` biases.

use ndarray::{Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const CHECKPOINT_FORMAT: &str = "trafficrlhf.mlp";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Tanh,
    Relu,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Identity => z,
            Activation::Tanh => z.tanh(),
            Activation::Relu => z.max(0.0),
        }
    }

    /// Derivative expressed through the activation output.
    fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Tanh => 1.0 - y * y,
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MlpRecord", into = "MlpRecord")]
pub struct Mlp {
    widths: Vec<usize>,
    activations: Vec<Activation>,
    params: Vec<f64>,
    seed: u64,
}

#[derive(Serialize, Deserialize)]
struct MlpRecord {
    format: String,
    version: u32,
    widths: Vec<usize>,
    activations: Vec<Activation>,
    seed: u64,
    params: Vec<f64>,
}

impl From<Mlp> for MlpRecord {
    fn from(m: Mlp) -> Self {
        MlpRecord {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            widths: m.widths,
            activations: m.activations,
            seed: m.seed,
            params: m.params,
        }
    }
}

impl TryFrom<MlpRecord> for Mlp {
    type Error = Error;

    fn try_from(r: MlpRecord) -> Result<Self> {
        if r.format != CHECKPOINT_FORMAT {
            return Err(Error::Data(format!(
                "unknown network format {:?}",
                r.format
            )));
        }
        if r.version != CHECKPOINT_VERSION {
            return Err(Error::Data(format!(
                "unsupported network checkpoint version {}",
                r.version
            )));
        }
        let mut m = Mlp::zeros(&r.widths, &r.activations)?;
        if r.params.len() != m.params.len() {
            return Err(Error::Dimension {
                expected: m.params.len(),
                got: r.params.len(),
            });
        }
        if r.params.iter().any(|p| !p.is_finite()) {
            return Err(Error::Data(
                "network checkpoint contains non-finite parameters".into(),
            ));
        }
        m.params = r.params;
        m.seed = r.seed;
        Ok(m)
    }
}

/// Intermediate values of a batched forward pass, needed by backward.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// `layers[0]` is the input batch; `layers[k + 1]` is the output of layer `k`.
    layers: Vec<Array2<f64>>,
}

impl ForwardCache {
    pub fn output(&self) -> &Array2<f64> {
        self.layers.last().unwrap()
    }
}

pub fn param_count(widths: &[usize]) -> usize {
    widths.windows(2).map(|w| (w[0] + 1) * w[1]).sum()
}

impl Mlp {
    /// Network with all parameters zero.
    pub fn zeros(widths: &[usize], activations: &[Activation]) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(Error::Config(format!("invalid layer widths {widths:?}")));
        }
        if activations.len() != widths.len() - 1 {
            return Err(Error::Dimension {
                expected: widths.len() - 1,
                got: activations.len(),
            });
        }
        Ok(Self {
            widths: widths.to_vec(),
            activations: activations.to_vec(),
            params: vec![0.0; param_count(widths)],
            seed: 0,
        })
    }

    /// Glorot-uniform weights, zero biases.
    pub fn new(widths: &[usize], activations: &[Activation], seed: u64) -> Result<Self> {
        let mut m = Self::zeros(widths, activations)?;
        m.seed = seed;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut offset = 0;
        for w in widths.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for p in &mut m.params[offset..offset + fan_in * fan_out] {
                *p = rng.random_range(-bound..bound);
            }
            offset += (fan_in + 1) * fan_out;
        }
        Ok(m)
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn activations(&self) -> &[Activation] {
        &self.activations
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(Error::Dimension {
                expected: self.params.len(),
                got: params.len(),
            });
        }
        self.params.copy_from_slice(params);
        Ok(())
    }

    /// Offset of layer `k`'s weights inside the flat parameter vector.
    pub fn layer_offset(&self, k: usize) -> usize {
        param_count(&self.widths[..=k])
    }

    fn layer_views(&self, k: usize) -> (ArrayView2<'_, f64>, &[f64]) {
        let (fan_in, fan_out) = (self.widths[k], self.widths[k + 1]);
        let off = self.layer_offset(k);
        let w =
            ArrayView2::from_shape((fan_out, fan_in), &self.params[off..off + fan_in * fan_out])
                .expect("layer shape");
        let b = &self.params[off + fan_in * fan_out..off + (fan_in + 1) * fan_out];
        (w, b)
    }

    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        if input.len() != self.input_dim() {
            return Err(Error::Dimension {
                expected: self.input_dim(),
                got: input.len(),
            });
        }
        let mut x = input.to_vec();
        for k in 0..self.widths.len() - 1 {
            let (w, b) = self.layer_views(k);
            let act = self.activations[k];
            x = w
                .outer_iter()
                .zip(b)
                .map(|(row, bias)| {
                    act.apply(row.iter().zip(&x).map(|(a, b)| a * b).sum::<f64>() + bias)
                })
                .collect();
        }
        Ok(x)
    }

    /// Parameter gradient of `upstream . forward(input)`.
    pub fn backward(&self, input: &[f64], upstream: &[f64]) -> Result<Vec<f64>> {
        let x = Array2::from_shape_vec((1, input.len()), input.to_vec()).expect("row");
        let cache = self.forward_batch(x)?;
        let up = Array2::from_shape_vec((1, upstream.len()), upstream.to_vec()).expect("row");
        let (g, _) = self.backward_batch(&cache, up)?;
        Ok(g)
    }

    /// Row-wise forward pass over a `batch x input_dim` matrix.
    pub fn forward_batch(&self, input: Array2<f64>) -> Result<ForwardCache> {
        if input.ncols() != self.input_dim() {
            return Err(Error::Dimension {
                expected: self.input_dim(),
                got: input.ncols(),
            });
        }
        let mut layers = Vec::with_capacity(self.widths.len());
        layers.push(input);
        for k in 0..self.widths.len() - 1 {
            let (w, b) = self.layer_views(k);
            let act = self.activations[k];
            let mut z = layers[k].dot(&w.t());
            for mut row in z.rows_mut() {
                for (v, bias) in row.iter_mut().zip(b) {
                    *v = act.apply(*v + bias);
                }
            }
            layers.push(z);
        }
        Ok(ForwardCache { layers })
    }

    /// Returns the summed parameter gradient over the batch and the gradient
    /// with respect to the input rows.
    pub fn backward_batch(
        &self,
        cache: &ForwardCache,
        upstream: Array2<f64>,
    ) -> Result<(Vec<f64>, Array2<f64>)> {
        let out = cache.output();
        if upstream.dim() != out.dim() {
            return Err(Error::Dimension {
                expected: out.len(),
                got: upstream.len(),
            });
        }
        let mut grads = vec![0.0; self.params.len()];
        let mut delta = upstream;
        for k in (0..self.widths.len() - 1).rev() {
            let act = self.activations[k];
            let y = &cache.layers[k + 1];
            delta.zip_mut_with(y, |d, &yv| *d *= act.derivative_from_output(yv));
            let x = &cache.layers[k];
            let (fan_in, fan_out) = (self.widths[k], self.widths[k + 1]);
            let off = self.layer_offset(k);
            let gw = delta.t().dot(x);
            // Logical (row-major) order, whatever the memory layout of the product.
            for (g, v) in grads[off..off + fan_in * fan_out].iter_mut().zip(gw.iter()) {
                *g = *v;
            }
            let gb = delta.sum_axis(Axis(0));
            for (g, v) in grads[off + fan_in * fan_out..off + (fan_in + 1) * fan_out]
                .iter_mut()
                .zip(gb.iter())
            {
                *g = *v;
            }
            let (w, _) = self.layer_views(k);
            delta = delta.dot(&w);
        }
        Ok((grads, delta))
    }
}

/// Adam optimizer state with bias correction and optional decoupled weight
/// decay.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimState {
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl OptimState {
    pub fn new(n_params: usize, lr: f64) -> Self {
        Self {
            step: 0,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }

    pub fn adam_step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Dimension {
                expected: self.m.len(),
                got: params.len().min(grads.len()),
            });
        }
        if let Some((i, g)) = grads.iter().enumerate().find(|(_, g)| !g.is_finite()) {
            return Err(Error::Training(format!(
                "non-finite gradient {g} at parameter {i} (optimizer step {})",
                self.step + 1
            )));
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -=
                self.lr * (m_hat / (v_hat.sqrt() + self.eps) + self.weight_decay * params[i]);
        }
        Ok(())
    }
}
