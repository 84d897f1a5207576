//! Parameterised layers and the per-pass binding of parameters to graph
//! leaves.

use rand::Rng;
use rand_distr::{Distribution, Uniform};

use super::graph::{BatchNormStats, Graph, Mode, NodeId};
use super::tensor::Tensor;
use crate::error::Result;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor<f32>,
    pub trainable: bool,
}

/// Owns every trainable tensor of a model, in registration order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<f32>) -> ParamId {
        self.params.push(Param {
            name: name.into(),
            value,
            trainable: true,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn shapes(&self) -> Vec<Vec<usize>> {
        self.params.iter().map(|p| p.value.shape().to_vec()).collect()
    }

    pub fn set_trainable(&mut self, prefix: &str, trainable: bool) {
        for p in &mut self.params {
            if p.name.starts_with(prefix) {
                p.trainable = trainable;
            }
        }
    }
}

/// One forward (and optionally backward) pass: a graph plus the lazily
/// created leaf for each parameter it touches.
pub struct Session<'a> {
    pub graph: Graph<f32>,
    store: &'a ParamStore,
    bound: Vec<Option<NodeId>>,
    pub mode: Mode,
}

impl<'a> Session<'a> {
    pub fn new(store: &'a ParamStore, mode: Mode, record: bool) -> Self {
        Self {
            graph: if record { Graph::new() } else { Graph::inference() },
            store,
            bound: vec![None; store.len()],
            mode,
        }
    }

    pub fn param(&mut self, id: ParamId) -> NodeId {
        if let Some(node) = self.bound[id.0] {
            return node;
        }
        let p = self.store.get(id);
        let node = if p.trainable {
            self.graph.parameter(p.value.clone())
        } else {
            self.graph.input(p.value.clone())
        };
        self.bound[id.0] = Some(node);
        node
    }

    /// Gradients aligned with the store's registration order.
    pub fn grads(&self) -> Vec<Option<&Tensor<f32>>> {
        self.bound
            .iter()
            .zip(self.store.iter())
            .map(|(node, p)| match node {
                Some(n) if p.trainable => self.graph.grad(*n),
                _ => None,
            })
            .collect()
    }
}

/// Uniform on `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`, for weights and biases alike.
fn fan_in_uniform(shape: Vec<usize>, fan_in: usize, rng: &mut impl Rng) -> Tensor<f32> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
    Tensor::from_fn(shape, |_| dist.sample(rng) as f32)
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub kernel: ParamId,
    pub bias: ParamId,
}

impl Conv2d {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        size: usize,
        in_channels: usize,
        out_channels: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = size * size * in_channels;
        let kernel = store.add(
            format!("{name}.kernel"),
            fan_in_uniform(vec![size, size, in_channels, out_channels], fan_in, rng),
        );
        let bias = store.add(format!("{name}.bias"), fan_in_uniform(vec![out_channels], fan_in, rng));
        Self { kernel, bias }
    }

    pub fn forward(&self, s: &mut Session<'_>, x: NodeId) -> Result<NodeId> {
        let (k, b) = (s.param(self.kernel), s.param(self.bias));
        s.graph.conv2d(x, k, b)
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub name: String,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub stats: BatchNormStats<f32>,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        Self {
            name: name.to_string(),
            gamma: store.add(format!("{name}.gamma"), Tensor::full(vec![channels], 1.0)),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(vec![channels])),
            stats: BatchNormStats::new(channels),
        }
    }

    pub fn forward(&mut self, s: &mut Session<'_>, x: NodeId) -> Result<NodeId> {
        let (g, b) = (s.param(self.gamma), s.param(self.beta));
        let mode = s.mode;
        s.graph.batch_norm(x, g, b, &mut self.stats, mode)
    }
}

#[derive(Clone, Debug)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Dense {
    pub fn new(store: &mut ParamStore, name: &str, inputs: usize, outputs: usize, rng: &mut impl Rng) -> Self {
        Self {
            weight: store.add(
                format!("{name}.weight"),
                fan_in_uniform(vec![inputs, outputs], inputs, rng),
            ),
            bias: store.add(format!("{name}.bias"), fan_in_uniform(vec![outputs], inputs, rng)),
        }
    }

    pub fn forward(&self, s: &mut Session<'_>, x: NodeId) -> Result<NodeId> {
        let (w, b) = (s.param(self.weight), s.param(self.bias));
        s.graph.dense(x, w, b)
    }
}

/// `relu(x + bn2(conv2(relu(bn1(conv1(x))))))`.
#[derive(Clone, Debug)]
pub struct ResidualBlock {
    pub conv1: Conv2d,
    pub bn1: BatchNorm,
    pub conv2: Conv2d,
    pub bn2: BatchNorm,
}

impl ResidualBlock {
    pub fn new(store: &mut ParamStore, name: &str, width: usize, rng: &mut impl Rng) -> Self {
        Self {
            conv1: Conv2d::new(store, &format!("{name}.conv1"), 3, width, width, rng),
            bn1: BatchNorm::new(store, &format!("{name}.bn1"), width),
            conv2: Conv2d::new(store, &format!("{name}.conv2"), 3, width, width, rng),
            bn2: BatchNorm::new(store, &format!("{name}.bn2"), width),
        }
    }

    pub fn forward(&mut self, s: &mut Session<'_>, x: NodeId) -> Result<NodeId> {
        let h = self.conv1.forward(s, x)?;
        let h = self.bn1.forward(s, h)?;
        let h = s.graph.relu(h);
        let h = self.conv2.forward(s, h)?;
        let h = self.bn2.forward(s, h)?;
        let h = s.graph.add(x, h)?;
        Ok(s.graph.relu(h))
    }

    pub fn batch_norms(&self) -> [&BatchNorm; 2] {
        [&self.bn1, &self.bn2]
    }

    pub fn batch_norms_mut(&mut self) -> [&mut BatchNorm; 2] {
        [&mut self.bn1, &mut self.bn2]
    }
}
