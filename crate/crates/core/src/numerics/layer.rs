use serde::{Deserialize, Serialize};

use super::{Matrix, Param, Rng};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Identity,
    Relu,
}

impl Activation {
    pub fn code(self) -> u8 {
        match self {
            Activation::Identity => 0,
            Activation::Relu => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Activation::Identity),
            1 => Some(Activation::Relu),
            _ => None,
        }
    }
}

#[derive(Debug, Clone)]
struct Cache {
    input: Matrix,
    pre: Matrix,
}

/// Fully connected layer `act(x·Wᵀ + b)` with `W` stored `[out × in]`.
#[derive(Debug, Clone)]
pub struct DenseLayer {
    pub weight: Matrix,
    pub bias: Vec<f32>,
    pub activation: Activation,
    cache: Option<Cache>,
}

#[derive(Debug, Clone)]
pub struct LayerGrads {
    pub input: Matrix,
    pub weight: Matrix,
    pub bias: Vec<f32>,
}

impl PartialEq for DenseLayer {
    fn eq(&self, other: &Self) -> bool {
        self.weight == other.weight
            && self.bias == other.bias
            && self.activation == other.activation
    }
}

impl DenseLayer {
    pub fn new(weight: Matrix, bias: Vec<f32>, activation: Activation) -> Result<Self> {
        if bias.len() != weight.rows() {
            return Err(Error::Shape {
                op: "DenseLayer::new",
                left: weight.shape(),
                right: (1, bias.len()),
            });
        }
        Ok(Self {
            weight,
            bias,
            activation,
            cache: None,
        })
    }

    /// Kaiming-uniform (fan-in) for ReLU layers, Xavier-uniform otherwise; zero bias.
    pub fn init(inputs: usize, outputs: usize, activation: Activation, rng: &mut Rng) -> Self {
        let bound = match activation {
            Activation::Relu => (6.0 / inputs as f32).sqrt(),
            Activation::Identity => (6.0 / (inputs + outputs) as f32).sqrt(),
        };
        Self {
            weight: rng.uniform_matrix(outputs, inputs, -bound, bound),
            bias: vec![0.0; outputs],
            activation,
            cache: None,
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.cols()
    }

    pub fn outputs(&self) -> usize {
        self.weight.rows()
    }

    pub fn param_count(&self) -> usize {
        self.weight.rows() * self.weight.cols() + self.bias.len()
    }

    fn pre_activation(&self, input: &Matrix) -> Result<Matrix> {
        if input.cols() != self.inputs() {
            return Err(Error::Shape {
                op: "dense_forward",
                left: input.shape(),
                right: self.weight.shape(),
            });
        }
        let mut pre = input.matmul_bt(&self.weight)?;
        pre.add_row_vector(&self.bias)?;
        Ok(pre)
    }

    fn activate(&self, pre: &Matrix) -> Matrix {
        match self.activation {
            Activation::Identity => pre.clone(),
            Activation::Relu => pre.map(|v| v.max(0.0)),
        }
    }

    /// Forward pass that caches what `backward` needs.
    pub fn forward(&mut self, input: &Matrix) -> Result<Matrix> {
        let pre = self.pre_activation(input)?;
        let out = self.activate(&pre);
        self.cache = Some(Cache {
            input: input.clone(),
            pre,
        });
        Ok(out)
    }

    /// Stateless forward pass for evaluation.
    pub fn infer(&self, input: &Matrix) -> Result<Matrix> {
        let pre = self.pre_activation(input)?;
        Ok(self.activate(&pre))
    }

    pub fn backward(&self, grad_out: &Matrix) -> Result<LayerGrads> {
        let cache = self
            .cache
            .as_ref()
            .ok_or_else(|| Error::State("dense_backward called before forward".into()))?;
        if grad_out.shape() != cache.pre.shape() {
            return Err(Error::Shape {
                op: "dense_backward",
                left: grad_out.shape(),
                right: cache.pre.shape(),
            });
        }
        let grad_pre = match self.activation {
            Activation::Identity => grad_out.clone(),
            Activation::Relu => {
                let mut g = grad_out.clone();
                // subgradient at exactly 0 is 0
                for (gv, &p) in g.data_mut().iter_mut().zip(cache.pre.data()) {
                    if p <= 0.0 {
                        *gv = 0.0;
                    }
                }
                g
            }
        };
        Ok(LayerGrads {
            input: grad_pre.matmul(&self.weight)?,
            weight: grad_pre.matmul_at(&cache.input)?,
            bias: grad_pre.sum_rows(),
        })
    }

    pub fn clear_cache(&mut self) {
        self.cache = None;
    }
}

/// Ordered stack of dense layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub layers: Vec<DenseLayer>,
}

impl Network {
    /// Builds `widths[0] → … → widths[n]` with ReLU on every layer except the
    /// last, which uses `output`.
    pub fn init(widths: &[usize], output: Activation, rng: &mut Rng) -> Self {
        assert!(widths.len() >= 2, "a network needs at least one layer");
        let n = widths.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let act = if i + 1 == n { output } else { Activation::Relu };
                DenseLayer::init(widths[i], widths[i + 1], act, rng)
            })
            .collect();
        Self { layers }
    }

    pub fn input_dim(&self) -> usize {
        self.layers.first().map_or(0, DenseLayer::inputs)
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, DenseLayer::outputs)
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(DenseLayer::param_count).sum()
    }

    pub fn forward(&mut self, input: &Matrix) -> Result<Matrix> {
        let mut x = input.clone();
        for layer in &mut self.layers {
            x = layer.forward(&x)?;
        }
        Ok(x)
    }

    pub fn infer(&self, input: &Matrix) -> Result<Matrix> {
        let mut x = input.clone();
        for layer in &self.layers {
            x = layer.infer(&x)?;
        }
        Ok(x)
    }

    /// Returns the gradient w.r.t. the network input and per-layer gradients
    /// (in layer order).
    pub fn backward(&self, grad_out: &Matrix) -> Result<(Matrix, Vec<LayerGrads>)> {
        let mut grads = Vec::with_capacity(self.layers.len());
        let mut g = grad_out.clone();
        for layer in self.layers.iter().rev() {
            let lg = layer.backward(&g)?;
            g = lg.input.clone();
            grads.push(lg);
        }
        grads.reverse();
        Ok((g, grads))
    }

    /// Pairs every parameter tensor with its gradient for an optimizer step.
    pub fn params<'a>(&'a mut self, grads: &'a [LayerGrads], prefix: &str) -> Vec<Param<'a>> {
        let mut out = Vec::with_capacity(2 * self.layers.len());
        for (i, (layer, g)) in self.layers.iter_mut().zip(grads).enumerate() {
            out.push(Param {
                name: format!("{prefix}layer{i}.weight"),
                value: layer.weight.data_mut(),
                grad: g.weight.data(),
            });
            out.push(Param {
                name: format!("{prefix}layer{i}.bias"),
                value: &mut layer.bias,
                grad: &g.bias,
            });
        }
        out
    }

    pub fn clear_cache(&mut self) {
        self.layers.iter_mut().for_each(DenseLayer::clear_cache);
    }
}
