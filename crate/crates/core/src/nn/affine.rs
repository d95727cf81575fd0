use super::{NnError, ParamId, ParamInit, ParamSpec, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::{Graph, NodeId, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Relu,
    Sigmoid,
    None,
}

impl Activation {
    pub fn apply<T: Scalar>(self, g: &mut Graph<T>, x: NodeId) -> NodeId {
        match self {
            Activation::Tanh => g.tanh(x),
            Activation::Relu => g.relu(x),
            Activation::Sigmoid => g.sigmoid(x),
            Activation::None => x,
        }
    }
}

/// Fully connected layer `activation(x·Wᵀ + b)` with `W: [out×in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineLayer {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
    pub activation: Activation,
}

impl AffineLayer {
    pub fn specs(prefix: &str, in_dim: usize, out_dim: usize) -> Vec<ParamSpec> {
        vec![
            ParamSpec {
                name: format!("{prefix}.weight"),
                shape: vec![out_dim, in_dim],
                init: ParamInit::Glorot {
                    fan_in: in_dim,
                    fan_out: out_dim,
                },
            },
            ParamSpec {
                name: format!("{prefix}.bias"),
                shape: vec![out_dim],
                init: ParamInit::Zeros,
            },
        ]
    }

    /// Looks up `{prefix}.weight` and `{prefix}.bias` and checks they agree.
    pub fn bind<T: Scalar>(store: &ParamStore<T>, prefix: &str, activation: Activation) -> Result<Self, NnError> {
        let weight = lookup(store, &format!("{prefix}.weight"))?;
        let bias = lookup(store, &format!("{prefix}.bias"))?;
        let ws = store.get(weight).shape();
        let bs = store.get(bias).shape();
        if ws.len() != 2 || bs != [ws[0]] {
            return Err(TensorError::Shape {
                op: "affine bind",
                left: ws.to_vec(),
                right: bs.to_vec(),
            }
            .into());
        }
        Ok(Self {
            weight,
            bias,
            in_dim: ws[1],
            out_dim: ws[0],
            activation,
        })
    }

    /// Accepts `[in]` or `[batch×in]`; the output keeps the input's rank.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, x: NodeId) -> Result<NodeId, TensorError> {
        let shape = g.shape(x).to_vec();
        let flat = shape.len() == 1;
        if shape.last() != Some(&self.in_dim) || shape.len() > 2 {
            return Err(TensorError::Shape {
                op: "affine",
                left: shape,
                right: vec![self.out_dim, self.in_dim],
            });
        }
        let x2 = if flat { g.reshape(x, &[1, self.in_dim])? } else { x };
        let w = g.param(ps, self.weight);
        let b = g.param(ps, self.bias);
        let xw = g.matmul_t(x2, w)?;
        let pre = g.add_row(xw, b)?;
        let y = self.activation.apply(g, pre);
        if flat {
            g.reshape(y, &[self.out_dim])
        } else {
            Ok(y)
        }
    }

    pub fn params(&self) -> [ParamId; 2] {
        [self.weight, self.bias]
    }
}

pub(crate) fn lookup<T: Scalar>(store: &ParamStore<T>, name: &str) -> Result<ParamId, NnError> {
    store.id(name).ok_or_else(|| NnError::Unknown(name.to_string()))
}

fn stack_specs(prefix: &str, dims: &[usize]) -> Result<Vec<ParamSpec>, NnError> {
    if dims.len() < 2 || dims.contains(&0) {
        return Err(NnError::NonPositive(dims.to_vec()));
    }
    Ok(dims
        .windows(2)
        .enumerate()
        .flat_map(|(i, w)| AffineLayer::specs(&format!("{prefix}.{i}"), w[0], w[1]))
        .collect())
}

fn bind_stack<T: Scalar>(
    store: &ParamStore<T>,
    prefix: &str,
    depth: usize,
    hidden: Activation,
    last: Activation,
) -> Result<Vec<AffineLayer>, NnError> {
    let layers: Vec<AffineLayer> = (0..depth)
        .map(|i| {
            let act = if i + 1 == depth { last } else { hidden };
            AffineLayer::bind(store, &format!("{prefix}.{i}"), act)
        })
        .collect::<Result<_, _>>()?;
    for pair in layers.windows(2) {
        if pair[0].out_dim != pair[1].in_dim {
            return Err(TensorError::Shape {
                op: "stack bind",
                left: vec![pair[0].out_dim],
                right: vec![pair[1].in_dim],
            }
            .into());
        }
    }
    Ok(layers)
}

fn run_stack<T: Scalar>(
    layers: &[AffineLayer],
    g: &mut Graph<T>,
    ps: &ParamStore<T>,
    x: NodeId,
) -> Result<NodeId, TensorError> {
    layers.iter().try_fold(x, |h, layer| layer.forward(g, ps, h))
}

/// Chain of affine layers ending at the latent width.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderStack {
    pub layers: Vec<AffineLayer>,
    pub latent_dim: usize,
}

impl EncoderStack {
    /// `dims = [input, hidden…, latent]`.
    pub fn specs(prefix: &str, dims: &[usize]) -> Result<Vec<ParamSpec>, NnError> {
        stack_specs(prefix, dims)
    }

    pub fn bind<T: Scalar>(
        store: &ParamStore<T>,
        prefix: &str,
        depth: usize,
        activation: Activation,
    ) -> Result<Self, NnError> {
        let layers = bind_stack(store, prefix, depth, activation, activation)?;
        let latent_dim = layers.last().map(|l| l.out_dim).unwrap_or(0);
        Ok(Self { layers, latent_dim })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, x: NodeId) -> Result<NodeId, TensorError> {
        run_stack(&self.layers, g, ps, x)
    }
}

/// Mirror of an encoder; the last layer is always a sigmoid so outputs are pixels in `(0,1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderStack {
    pub layers: Vec<AffineLayer>,
    pub latent_dim: usize,
}

impl DecoderStack {
    pub fn specs(prefix: &str, dims: &[usize]) -> Result<Vec<ParamSpec>, NnError> {
        stack_specs(prefix, dims)
    }

    pub fn bind<T: Scalar>(
        store: &ParamStore<T>,
        prefix: &str,
        depth: usize,
        hidden: Activation,
    ) -> Result<Self, NnError> {
        let layers = bind_stack(store, prefix, depth, hidden, Activation::Sigmoid)?;
        let latent_dim = layers.first().map(|l| l.in_dim).unwrap_or(0);
        Ok(Self { layers, latent_dim })
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map(|l| l.out_dim).unwrap_or(0)
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, z: NodeId) -> Result<NodeId, TensorError> {
        run_stack(&self.layers, g, ps, z)
    }
}
