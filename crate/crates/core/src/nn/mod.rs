//! Small differentiable-network substrate: tensors, a reverse-mode tape,
//! dense / conv1d / GRU layers, Adam, and finite-difference checking.

mod adam;
mod gradcheck;
mod graph;
mod io;
mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use gradcheck::{gradient_check, GradCheckReport};
pub use graph::{Activation, Graph, NodeId};
pub use io::{read_container, write_container, Container, TensorEntry, FORMAT_VERSION};
pub use tensor::Tensor;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("convolution width {width} exceeds sequence length {len}")]
    ConvWidth { width: usize, len: usize },
    #[error("backward called on a node that was never recorded")]
    BackwardBeforeForward,
    #[error("target rule {target} is masked out at row {row}")]
    MaskedTarget { row: usize, target: usize },
    #[error("non-finite gradient in tensor `{0}`")]
    NonFiniteGradient(String),
    #[error("model file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Named parameter tensors, in a fixed order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a tensor and returns its index.
    pub fn add(&mut self, name: impl Into<String>, t: Tensor) -> usize {
        self.names.push(name.into());
        self.tensors.push(t);
        self.tensors.len() - 1
    }

    /// Weight of shape `[fan_in, fan_out]` drawn from U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
    pub fn add_weight<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> usize {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let data = (0..fan_in * fan_out)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        self.add(name, Tensor::new(vec![fan_in, fan_out], data).unwrap())
    }

    pub fn add_bias(&mut self, name: impl Into<String>, n: usize) -> usize {
        self.add(name, Tensor::zeros(&[n]))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn tensor(&self, i: usize) -> &Tensor {
        &self.tensors[i]
    }

    pub fn tensor_mut(&mut self, i: usize) -> &mut Tensor {
        &mut self.tensors[i]
    }

    pub fn name(&self, i: usize) -> &str {
        &self.names[i]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn num_values(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn zero_all(&mut self) {
        for t in &mut self.tensors {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }
}

/// One gradient tensor per parameter, shape-matched.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub tensors: Vec<Tensor>,
}

impl Gradients {
    pub fn zeros_like(params: &ParamSet) -> Self {
        Gradients {
            tensors: params
                .tensors()
                .iter()
                .map(|t| Tensor::zeros(t.shape()))
                .collect(),
        }
    }

    pub fn scale(&mut self, s: f64) {
        for t in &mut self.tensors {
            t.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            a.add_assign(b);
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.tensors
            .iter()
            .flat_map(|t| t.data().iter())
            .fold(0.0f64, |m, v| m.max(v.abs()))
    }
}

/// Parameter indices of a fully connected layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dense {
    pub weight: usize,
    pub bias: usize,
    pub activation: Activation,
}

impl Dense {
    pub fn init<R: Rng + ?Sized>(
        params: &mut ParamSet,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Self {
        Dense {
            weight: params.add_weight(format!("{name}.weight"), fan_in, fan_out, rng),
            bias: params.add_bias(format!("{name}.bias"), fan_out),
            activation,
        }
    }

    pub fn forward(&self, g: &mut Graph, params: &ParamSet, x: NodeId) -> Result<NodeId, NnError> {
        let w = g.param(params, self.weight);
        let b = g.param(params, self.bias);
        let y = g.matmul(x, w)?;
        let y = g.add_bias(y, b)?;
        Ok(g.activation(y, self.activation))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv1d {
    pub weight: usize,
    pub bias: usize,
    pub width: usize,
    pub activation: Activation,
}

impl Conv1d {
    pub fn init<R: Rng + ?Sized>(
        params: &mut ParamSet,
        name: &str,
        channels_in: usize,
        channels_out: usize,
        width: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Self {
        Conv1d {
            weight: params.add_weight(
                format!("{name}.weight"),
                width * channels_in,
                channels_out,
                rng,
            ),
            bias: params.add_bias(format!("{name}.bias"), channels_out),
            width,
            activation,
        }
    }

    pub fn forward(&self, g: &mut Graph, params: &ParamSet, x: NodeId) -> Result<NodeId, NnError> {
        let w = g.param(params, self.weight);
        let b = g.param(params, self.bias);
        let y = g.conv1d(x, w, b, self.width)?;
        Ok(g.activation(y, self.activation))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GruLayer {
    pub input_weight: usize,
    pub hidden_weight: usize,
    pub bias: usize,
    pub hidden: usize,
}

impl GruLayer {
    pub fn init<R: Rng + ?Sized>(
        params: &mut ParamSet,
        name: &str,
        input: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        GruLayer {
            input_weight: params.add_weight(format!("{name}.w"), input, 3 * hidden, rng),
            hidden_weight: params.add_weight(format!("{name}.u"), hidden, 3 * hidden, rng),
            bias: params.add_bias(format!("{name}.bias"), 3 * hidden),
            hidden,
        }
    }

    /// Records the parameter leaves once so an unrolled sequence shares them.
    pub fn bind(&self, g: &mut Graph, params: &ParamSet) -> BoundGru {
        BoundGru {
            w: g.param(params, self.input_weight),
            u: g.param(params, self.hidden_weight),
            b: g.param(params, self.bias),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BoundGru {
    w: NodeId,
    u: NodeId,
    b: NodeId,
}

impl BoundGru {
    pub fn step(&self, g: &mut Graph, h: NodeId, x: NodeId) -> Result<NodeId, NnError> {
        g.gru(x, h, self.w, self.u, self.b)
    }
}

/// Affine map plus activation on a `[batch, in]` input.
pub fn dense_forward(
    x: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
    activation: Activation,
) -> Result<Tensor, NnError> {
    let mut params = ParamSet::new();
    let layer = Dense {
        weight: params.add("w", weight.clone()),
        bias: params.add("b", bias.clone()),
        activation,
    };
    let mut g = Graph::new();
    let xi = g.input(x.clone());
    let y = layer.forward(&mut g, &params, xi)?;
    Ok(g.value(y).clone())
}

/// Valid 1-D convolution of a single `[time, channels]` sequence.
pub fn conv1d_forward(
    x: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
    width: usize,
) -> Result<Tensor, NnError> {
    if x.shape().len() != 2 {
        return Err(NnError::Shape(format!(
            "conv1d input {:?} is not [T, C]",
            x.shape()
        )));
    }
    let mut g = Graph::new();
    let xi = g.input(x.clone().reshaped(vec![1, x.rows(), x.cols()])?);
    let w = g.input(weight.clone());
    let b = g.input(bias.clone());
    let y = g.conv1d(xi, w, b, width)?;
    let v = g.value(y).clone();
    let (t, c) = (v.shape()[1], v.shape()[2]);
    v.reshaped(vec![t, c])
}

/// One GRU update for a `[batch, hidden]` state.
pub fn gru_step(
    h_prev: &Tensor,
    x: &Tensor,
    input_weight: &Tensor,
    hidden_weight: &Tensor,
    bias: &Tensor,
) -> Result<Tensor, NnError> {
    let mut g = Graph::new();
    let h = g.input(h_prev.clone());
    let xi = g.input(x.clone());
    let w = g.input(input_weight.clone());
    let u = g.input(hidden_weight.clone());
    let b = g.input(bias.clone());
    let y = g.gru(xi, h, w, u, b)?;
    Ok(g.value(y).clone())
}

#[cfg(test)]
mod tests;
