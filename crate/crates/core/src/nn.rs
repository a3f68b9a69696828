//! Parameter storage and the small set of layers the networks are built from.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Tags the parameter store a graph node was bound from.
pub type GroupId = u32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named parameter tensors of one network.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore {
    group: GroupId,
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParamStore {
    pub fn new(group: GroupId) -> Self {
        ParamStore {
            group,
            names: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn group(&self) -> GroupId {
        self.group
    }

    pub fn insert(&mut self, name: &str, value: Tensor) -> ParamId {
        debug_assert!(!self.names.iter().any(|n| n == name), "duplicate parameter {name}");
        self.names.push(name.to_string());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.values.iter_mut()
    }

    pub fn parameter_count(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    /// Replaces every tensor by the same-named entry of `named`, which must
    /// cover exactly this store's names and shapes.
    pub fn load_named(&mut self, named: &[(String, Tensor)]) -> Result<()> {
        if named.len() != self.values.len() {
            return Err(Error::Config(format!(
                "expected {} tensors, got {}",
                self.values.len(),
                named.len()
            )));
        }
        for (name, value) in named {
            let id = self
                .id_of(name)
                .ok_or_else(|| Error::Config(format!("unknown parameter {name}")))?;
            if self.values[id.0].shape() != value.shape() {
                return Err(Error::shape(format!(
                    "parameter {name}: expected {:?}, got {:?}",
                    self.values[id.0].shape(),
                    value.shape()
                )));
            }
            self.values[id.0] = value.clone();
        }
        Ok(())
    }

    pub fn to_named(&self) -> Vec<(String, Tensor)> {
        self.names.iter().cloned().zip(self.values.iter().cloned()).collect()
    }
}

/// Weight initialisation schemes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Uniform with He bound for a leaky activation of the given slope,
    /// multiplied by `gain`.
    He { slope: f64, gain: f64 },
    Zeros,
}

impl Init {
    pub const PRELU: Init = Init::He { slope: 0.25, gain: 1.0 };
    pub const LEAKY: Init = Init::He { slope: 0.2, gain: 1.0 };
    pub const LINEAR: Init = Init::He { slope: 1.0, gain: 1.0 };

    fn sample(self, shape: &[usize], fan_in: f64, rng: &mut impl Rng) -> Tensor {
        match self {
            Init::Zeros => Tensor::zeros(shape),
            Init::He { slope, gain } => {
                let bound = gain * libm::sqrt(6.0 / ((1.0 + slope * slope) * fan_in));
                let n: usize = shape.iter().product();
                let data = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
                Tensor::from_vec(shape, data).expect("shape")
            }
        }
    }
}

/// Square-kernel 2-D convolution with bias.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        init: Init,
        rng: &mut impl Rng,
    ) -> Self {
        let shape = [cout, cin, k, k];
        let w = init.sample(&shape, (cin * k * k) as f64, rng);
        Conv2d {
            weight: store.insert(&format!("{name}.weight"), w),
            bias: store.insert(&format!("{name}.bias"), Tensor::zeros(&[cout])),
            stride,
            pad,
        }
    }

    /// 3x3, stride 1, same padding.
    pub fn same3(store: &mut ParamStore, name: &str, cin: usize, cout: usize, init: Init, rng: &mut impl Rng) -> Self {
        Self::new(store, name, cin, cout, 3, 1, 1, init, rng)
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        g.conv2d(x, w, Some(b), self.stride, self.pad)
    }

    pub fn zero(&self, store: &mut ParamStore) {
        store.get_mut(self.weight).data_mut().iter_mut().for_each(|v| *v = 0.0);
        store.get_mut(self.bias).data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
}

/// Square-kernel transposed convolution with bias.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConvTranspose2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl ConvTranspose2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        init: Init,
        rng: &mut impl Rng,
    ) -> Self {
        let shape = [cin, cout, k, k];
        let fan_in = (cin * k * k) as f64 / (stride * stride) as f64;
        let w = init.sample(&shape, fan_in, rng);
        ConvTranspose2d {
            weight: store.insert(&format!("{name}.weight"), w),
            bias: store.insert(&format!("{name}.bias"), Tensor::zeros(&[cout])),
            stride,
            pad,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        g.conv_transpose2d(x, w, Some(b), self.stride, self.pad)
    }
}

/// Per-channel PReLU, slopes initialised to 0.25.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PRelu {
    pub alpha: ParamId,
}

impl PRelu {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        PRelu {
            alpha: store.insert(&format!("{name}.alpha"), Tensor::full(&[channels], 0.25)),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let a = g.param(store, self.alpha);
        g.prelu(x, a)
    }
}

/// Convolution followed by PReLU.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConvAct {
    pub conv: Conv2d,
    pub act: PRelu,
}

impl ConvAct {
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let y = self.conv.forward(g, store, x)?;
        self.act.forward(g, store, y)
    }
}

/// Transposed convolution followed by PReLU.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DeconvAct {
    pub deconv: ConvTranspose2d,
    pub act: PRelu,
}

impl DeconvAct {
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let y = self.deconv.forward(g, store, x)?;
        self.act.forward(g, store, y)
    }
}

/// `x + conv(prelu(conv(x)))`, all 3x3 at fixed width.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResBlock {
    pub conv1: Conv2d,
    pub act: PRelu,
    pub conv2: Conv2d,
}

impl ResBlock {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, rng: &mut impl Rng) -> Self {
        ResBlock {
            conv1: Conv2d::same3(store, &format!("{name}.conv1"), channels, channels, Init::PRELU, rng),
            act: PRelu::new(store, &format!("{name}.act"), channels),
            // Residual branch starts small so stacked blocks begin near identity.
            conv2: Conv2d::same3(
                store,
                &format!("{name}.conv2"),
                channels,
                channels,
                Init::He { slope: 1.0, gain: 0.1 },
                rng,
            ),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let y = self.conv1.forward(g, store, x)?;
        let y = self.act.forward(g, store, y)?;
        let y = self.conv2.forward(g, store, y)?;
        g.add(x, y)
    }
}

/// Two stride-2 transposed convolutions (k=4, p=1): exact x4 enlargement.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Up4 {
    pub stages: [DeconvAct; 2],
}

impl Up4 {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, rng: &mut impl Rng) -> Self {
        let mk = |store: &mut ParamStore, i: usize, rng: &mut _| DeconvAct {
            deconv: ConvTranspose2d::new(store, &format!("{name}.{i}"), channels, channels, 4, 2, 1, Init::PRELU, rng),
            act: PRelu::new(store, &format!("{name}.{i}.act"), channels),
        };
        let a = mk(store, 0, rng);
        let b = mk(store, 1, rng);
        Up4 { stages: [a, b] }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let y = self.stages[0].forward(g, store, x)?;
        self.stages[1].forward(g, store, y)
    }
}

/// Two stride-2 convolutions (k=4, p=1): exact x4 reduction of even dims.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Down4 {
    pub stages: [ConvAct; 2],
}

impl Down4 {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, rng: &mut impl Rng) -> Self {
        let mk = |store: &mut ParamStore, i: usize, rng: &mut _| ConvAct {
            conv: Conv2d::new(store, &format!("{name}.{i}"), channels, channels, 4, 2, 1, Init::PRELU, rng),
            act: PRelu::new(store, &format!("{name}.{i}.act"), channels),
        };
        let a = mk(store, 0, rng);
        let b = mk(store, 1, rng);
        Down4 { stages: [a, b] }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let y = self.stages[0].forward(g, store, x)?;
        self.stages[1].forward(g, store, y)
    }
}
