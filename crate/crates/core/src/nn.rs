//! Named parameters and the layers built on them.

use std::collections::{BTreeMap, HashMap};

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Gradients, Graph, NodeId};
use crate::tensor::Tensor;

/// Parameter tensors keyed by dotted path, e.g. `backbone.rgb.stage1.weight`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.params.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| Error::InvalidValue(format!("unknown parameter `{name}`")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    /// Overwrite every parameter whose path starts with `prefix` with zeros.
    pub fn zero_prefix(&mut self, prefix: &str) {
        for (name, t) in self.params.iter_mut() {
            if name.starts_with(prefix) {
                t.data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
    }

    /// FNV-1a over the bit patterns of all parameters under `prefix`.
    pub fn fingerprint(&self, prefix: &str) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        };
        for (name, t) in self.params.iter().filter(|(n, _)| n.starts_with(prefix)) {
            eat(name.as_bytes());
            for v in t.data() {
                eat(&v.to_bits().to_le_bytes());
            }
        }
        h
    }
}

/// One forward pass: a fresh [`Graph`] plus lazily bound parameters.
pub struct Session<'a> {
    pub graph: Graph,
    store: &'a ParamStore,
    bound: HashMap<String, NodeId>,
    trainable: bool,
}

impl<'a> Session<'a> {
    /// Parameters are differentiable leaves.
    pub fn training(store: &'a ParamStore) -> Self {
        Self::with_mode(store, true)
    }

    /// Parameters are constants; no backward caches are kept.
    pub fn inference(store: &'a ParamStore) -> Self {
        Self::with_mode(store, false)
    }

    fn with_mode(store: &'a ParamStore, trainable: bool) -> Self {
        Session {
            graph: Graph::new(),
            store,
            bound: HashMap::new(),
            trainable,
        }
    }

    pub fn is_training(&self) -> bool {
        self.trainable
    }

    pub fn param(&mut self, name: &str) -> Result<NodeId> {
        if let Some(&id) = self.bound.get(name) {
            return Ok(id);
        }
        let value = self.store.require(name)?.clone();
        let id = if self.trainable {
            self.graph.param(value)
        } else {
            self.graph.input(value)
        };
        self.bound.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.graph.input(value)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        self.graph.value(id)
    }

    /// Gradients of every bound parameter that received one.
    pub fn param_grads(&self, grads: &Gradients) -> BTreeMap<String, Tensor> {
        self.bound
            .iter()
            .filter_map(|(name, &id)| grads.get(id).map(|g| (name.clone(), g.clone())))
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// He-normal on fan-in.
    He,
    /// Normal with the given standard deviation.
    Normal(f64),
    Zeros,
}

fn init_tensor<R: Rng + ?Sized>(shape: Vec<usize>, fan_in: usize, init: Init, rng: &mut R) -> Tensor {
    match init {
        Init::He => Tensor::randn(shape, (2.0 / fan_in.max(1) as f64).sqrt(), rng),
        Init::Normal(std) => Tensor::randn(shape, std, rng),
        Init::Zeros => Tensor::zeros(shape),
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    weight: String,
    bias: Option<String>,
    stride: usize,
    pad: usize,
    in_ch: usize,
    out_ch: usize,
}

impl Conv2d {
    /// Square kernel, "same" padding for odd sizes, bias initialised to zero.
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        bias: bool,
        init: Init,
        rng: &mut R,
    ) -> Self {
        let weight = format!("{name}.weight");
        let fan_in = in_ch * kernel * kernel;
        store.insert(
            weight.clone(),
            init_tensor(vec![out_ch, in_ch, kernel, kernel], fan_in, init, rng),
        );
        let bias = bias.then(|| {
            let b = format!("{name}.bias");
            store.insert(b.clone(), Tensor::zeros(vec![out_ch]));
            b
        });
        Conv2d {
            weight,
            bias,
            stride,
            pad: kernel / 2,
            in_ch,
            out_ch,
        }
    }

    pub fn forward(&self, s: &mut Session, x: NodeId) -> Result<NodeId> {
        let w = s.param(&self.weight)?;
        let b = self.bias.as_deref().map(|b| s.param(b)).transpose()?;
        s.graph.conv2d(x, w, b, self.stride, self.pad)
    }

    pub fn out_channels(&self) -> usize {
        self.out_ch
    }

    pub fn in_channels(&self) -> usize {
        self.in_ch
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    weight: String,
    bias: Option<String>,
    out_dim: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        init: Init,
        rng: &mut R,
    ) -> Self {
        let weight = format!("{name}.weight");
        store.insert(
            weight.clone(),
            init_tensor(vec![out_dim, in_dim], in_dim, init, rng),
        );
        let bias = bias.then(|| {
            let b = format!("{name}.bias");
            store.insert(b.clone(), Tensor::zeros(vec![out_dim]));
            b
        });
        Linear {
            weight,
            bias,
            out_dim,
        }
    }

    pub fn forward(&self, s: &mut Session, x: NodeId) -> Result<NodeId> {
        let w = s.param(&self.weight)?;
        let b = self.bias.as_deref().map(|b| s.param(b)).transpose()?;
        s.graph.linear(x, w, b)
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }
}
