//! Parameterised building blocks: affine layers, MLPs and conv layers.
//!
//! Layers hold parameter *names*; values live in a [`ParameterStore`] and are
//! bound into a [`Graph`] on each forward pass.

use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::kernels::Padding;
use crate::params::ParameterStore;

/// `y = xW + b` over rows.
#[derive(Clone, Debug)]
pub struct LinearLayer {
    pub weight: String,
    pub bias: String,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl LinearLayer {
    pub fn new(
        store: &mut ParameterStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_dim: usize,
        out_dim: usize,
    ) -> Result<Self> {
        let weight = format!("{name}.weight");
        let bias = format!("{name}.bias");
        store.insert_uniform(&weight, &[in_dim, out_dim], in_dim, rng)?;
        store.insert_uniform(&bias, &[out_dim], in_dim, rng)?;
        Ok(Self {
            weight,
            bias,
            in_dim,
            out_dim,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParameterStore, x: Var) -> Result<Var> {
        let w = g.param(store, &self.weight)?;
        let b = g.param(store, &self.bias)?;
        g.linear(x, w, b)
    }

    /// Sets weights and bias to zero.
    pub fn zero(&self, store: &mut ParameterStore) -> Result<()> {
        for name in [&self.weight, &self.bias] {
            let shape = store.value(name)?.shape().to_vec();
            store.set_value(name, crate::Tensor::zeros(&shape))?;
        }
        Ok(())
    }
}

/// Stack of affine layers with leaky-ReLU between them.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<LinearLayer>,
    pub slope: f64,
    /// Apply the activation after the last layer too.
    pub activate_last: bool,
}

impl Mlp {
    pub fn new(
        store: &mut ParameterStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        widths: &[usize],
        slope: f64,
        activate_last: bool,
    ) -> Result<Self> {
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| LinearLayer::new(store, rng, &format!("{name}.{i}"), w[0], w[1]))
            .collect::<Result<_>>()?;
        Ok(Self {
            layers,
            slope,
            activate_last,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParameterStore, mut x: Var) -> Result<Var> {
        let last = self.layers.len().saturating_sub(1);
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward(g, store, x)?;
            if i < last || self.activate_last {
                x = g.leaky_relu(x, self.slope);
            }
        }
        Ok(x)
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.out_dim)
    }
}

/// Square-kernel 2D convolution over `H×W×C` maps.
#[derive(Clone, Debug)]
pub struct ConvLayer {
    pub kernel: String,
    pub bias: Option<String>,
    pub size: usize,
    pub stride: usize,
    pub padding: Padding,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl ConvLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParameterStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        size: usize,
        stride: usize,
        with_bias: bool,
    ) -> Result<Self> {
        let kernel = format!("{name}.kernel");
        let fan_in = size * size * in_channels;
        store.insert_uniform(&kernel, &[size, size, in_channels, out_channels], fan_in, rng)?;
        let bias = if with_bias {
            let b = format!("{name}.bias");
            store.insert_uniform(&b, &[out_channels], fan_in, rng)?;
            Some(b)
        } else {
            None
        };
        Ok(Self {
            kernel,
            bias,
            size,
            stride,
            padding: Padding::Same,
            in_channels,
            out_channels,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParameterStore, x: Var) -> Result<Var> {
        let k = g.param(store, &self.kernel)?;
        let b = self
            .bias
            .as_deref()
            .map(|b| g.param(store, b))
            .transpose()?;
        g.conv2d(x, k, b, self.stride, self.padding)
    }
}
