//! Parameter storage and the convolution layers shared by every network.

use autograd::{Activation, ConvGeometry, Float, Graph, Tensor, Var};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::{Error, Result};

/// Ordered, named parameter tensors of one network.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Float> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Float> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: vec![],
            tensors: vec![],
        }
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> usize {
        self.names.push(name.into());
        self.tensors.push(tensor);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn get(&self, i: usize) -> &Tensor<T> {
        &self.tensors[i]
    }

    pub fn get_mut(&mut self, i: usize) -> &mut Tensor<T> {
        &mut self.tensors[i]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    /// Records every tensor on `g`; trainable bindings receive gradients.
    pub fn bind(&self, g: &Graph<T>, trainable: bool) -> Vec<Var> {
        self.tensors
            .iter()
            .map(|t| {
                if trainable {
                    g.leaf(t.clone())
                } else {
                    g.constant(t.clone())
                }
            })
            .collect()
    }

    pub fn cast<U: Float>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(|t| t.cast()).collect(),
        }
    }

    /// Replaces all tensors, checking names and shapes.
    pub fn load(&mut self, named: Vec<(String, Tensor<T>)>) -> Result<()> {
        if named.len() != self.len() {
            return Err(Error::Shape(format!(
                "expected {} parameter tensors, got {}",
                self.len(),
                named.len()
            )));
        }
        for (i, (name, t)) in named.into_iter().enumerate() {
            if name != self.names[i] || t.shape() != self.tensors[i].shape() {
                return Err(Error::Shape(format!(
                    "parameter {i}: expected {} {:?}, got {name} {:?}",
                    self.names[i],
                    self.tensors[i].shape(),
                    t.shape()
                )));
            }
            self.tensors[i] = t;
        }
        Ok(())
    }
}

/// Gaussian tensor with standard deviation `gain / sqrt(fan_in)`.
pub fn fan_in_normal<T: Float>(
    rng: &mut impl Rng,
    shape: &[usize],
    fan_in: usize,
    gain: f64,
) -> Tensor<T> {
    let std = gain / (fan_in.max(1) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let z: f64 = rng.sample(StandardNormal);
            T::lit(z * std)
        })
        .collect();
    Tensor::from_vec(shape, data).expect("init shape")
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub weight: usize,
    pub bias: usize,
    pub geo: ConvGeometry,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Float>(
        store: &mut ParamStore<T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        geo: ConvGeometry,
        gain: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let k = geo.kernel;
        let fan_in = in_channels * k * k;
        let weight = store.push(
            format!("{name}.weight"),
            fan_in_normal(rng, &[out_channels, in_channels, k, k], fan_in, gain),
        );
        let bias = store.push(format!("{name}.bias"), Tensor::zeros(&[out_channels]));
        Self {
            weight,
            bias,
            geo,
            in_channels,
            out_channels,
        }
    }

    pub fn forward<T: Float>(&self, g: &Graph<T>, params: &[Var], x: Var) -> Result<Var> {
        Ok(g.conv2d(x, params[self.weight], params[self.bias], self.geo)?)
    }
}

/// Gated convolution: one convolution producing feature and gate halves,
/// combined as `act(feature) ⊙ sigmoid(gate)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GatedConv2d {
    pub conv: Conv2d,
    pub act: Activation,
}

impl GatedConv2d {
    pub fn new<T: Float>(
        store: &mut ParamStore<T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        geo: ConvGeometry,
        act: Activation,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            conv: Conv2d::new(
                store,
                name,
                in_channels,
                2 * out_channels,
                geo,
                2f64.sqrt(),
                rng,
            ),
            act,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.conv.out_channels / 2
    }

    pub fn forward<T: Float>(&self, g: &Graph<T>, params: &[Var], x: Var) -> Result<Var> {
        let y = self.conv.forward(g, params, x)?;
        Ok(g.gate(y, self.act)?)
    }
}
