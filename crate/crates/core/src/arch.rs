//! Dense network builders: DenseNet baseline, CondenseNet and its light
//! variant.
//!
//! A model is a 3×3 stem convolution followed by dense blocks of basic
//! layers. Each basic layer appends `k` feature maps to the running
//! concatenation:
//!
//! ```text
//! BN-ReLU → 1×1 learned group conv (R → b·k) → permute → BN-ReLU → 3×3 group conv (b·k → k)
//! ```
//!
//! Between blocks the running concatenation is average pooled (fully dense
//! connectivity) or passed through a BN-ReLU-1×1 transition and pooled
//! (blockwise). The head is BN-ReLU, global average pooling and a linear
//! classifier whose weight can itself be condensed with `G = 1`.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::convert::{CondensedGroupConv, CondensedLinear};
use crate::error::{Error, Result};
use crate::lgc::LearnedGroupConv;
use crate::ops::BatchStats;
use crate::optim::ParamMut;
use crate::tensor::{Element, Tensor};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GrowthMode {
    Constant,
    /// `k = 2^{m−1}·k0` for block `m` (1-based).
    Exponential,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Connectivity {
    Blockwise,
    FullyDense,
}

impl fmt::Display for GrowthMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GrowthMode::Constant => "constant",
            GrowthMode::Exponential => "exponential",
        })
    }
}

impl FromStr for GrowthMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "constant" => Ok(GrowthMode::Constant),
            "exponential" => Ok(GrowthMode::Exponential),
            _ => Err(Error::InvalidConfig(format!("unknown growth mode '{s}'"))),
        }
    }
}

impl fmt::Display for Connectivity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Connectivity::Blockwise => "blockwise",
            Connectivity::FullyDense => "fully_dense",
        })
    }
}

impl FromStr for Connectivity {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "blockwise" => Ok(Connectivity::Blockwise),
            "fully_dense" => Ok(Connectivity::FullyDense),
            _ => Err(Error::InvalidConfig(format!("unknown connectivity '{s}'"))),
        }
    }
}

/// Everything needed to rebuild a model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub block_layers: Vec<usize>,
    pub k0: usize,
    pub growth_mode: GrowthMode,
    pub connectivity: Connectivity,
    /// Filter groups `G` of the learned 1×1 convolutions.
    pub groups: usize,
    /// Condensation factor `C`.
    pub condense_factor: usize,
    /// Groups of the standard 3×3 group convolution.
    pub groups_3x3: usize,
    /// 1×1 output channels per unit of growth.
    pub bottleneck: usize,
    pub stem_stride: usize,
    pub stem_channels: usize,
    pub in_channels: usize,
    pub num_classes: usize,
    pub input_resolution: usize,
    pub dropout_rate: f64,
    /// Condensation factor of the classifier (`1` = never pruned).
    pub fc_condense_factor: usize,
}

impl ModelConfig {
    /// Small CIFAR-style CondenseNet: 3 blocks of 4 layers, `k0 = 8`, `G = C = 4`.
    pub fn cifar_lgc_small() -> Self {
        ModelConfig {
            block_layers: vec![4, 4, 4],
            k0: 8,
            growth_mode: GrowthMode::Exponential,
            connectivity: Connectivity::FullyDense,
            groups: 4,
            condense_factor: 4,
            groups_3x3: 4,
            bottleneck: 4,
            stem_stride: 1,
            stem_channels: 16,
            in_channels: 3,
            num_classes: 10,
            input_resolution: 32,
            dropout_rate: 0.0,
            fc_condense_factor: 1,
        }
    }

    /// The five-block ImageNet CondenseNet with `G = C = 8`.
    pub fn imagenet_table3() -> Self {
        ModelConfig {
            block_layers: vec![4, 6, 8, 10, 8],
            k0: 8,
            growth_mode: GrowthMode::Exponential,
            connectivity: Connectivity::FullyDense,
            groups: 8,
            condense_factor: 8,
            groups_3x3: 8,
            bottleneck: 4,
            stem_stride: 2,
            stem_channels: 16,
            in_channels: 3,
            num_classes: 1000,
            input_resolution: 224,
            dropout_rate: 0.0,
            fc_condense_factor: 2,
        }
    }

    /// DenseNet-B style baseline: constant growth, blockwise, no grouping.
    pub fn densenet_cifar() -> Self {
        ModelConfig {
            block_layers: vec![4, 4, 4],
            k0: 12,
            growth_mode: GrowthMode::Constant,
            connectivity: Connectivity::Blockwise,
            groups: 1,
            condense_factor: 1,
            groups_3x3: 1,
            bottleneck: 4,
            stem_stride: 1,
            stem_channels: 24,
            in_channels: 3,
            num_classes: 10,
            input_resolution: 32,
            dropout_rate: 0.0,
            fc_condense_factor: 1,
        }
    }

    /// Learned group convolutions on a constant-growth, blockwise DenseNet.
    pub fn condensenet_light() -> Self {
        ModelConfig {
            k0: 8,
            growth_mode: GrowthMode::Constant,
            connectivity: Connectivity::Blockwise,
            groups: 4,
            condense_factor: 4,
            groups_3x3: 4,
            stem_channels: 16,
            ..Self::densenet_cifar()
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "cifar-lgc-small" => Some(Self::cifar_lgc_small()),
            "imagenet-table3" => Some(Self::imagenet_table3()),
            "densenet-cifar" => Some(Self::densenet_cifar()),
            "condensenet-light" => Some(Self::condensenet_light()),
            _ => None,
        }
    }

    pub const PRESETS: [&'static str; 4] = [
        "cifar-lgc-small",
        "imagenet-table3",
        "densenet-cifar",
        "condensenet-light",
    ];

    /// Growth rate of block `m` (0-based).
    pub fn growth(&self, block: usize) -> usize {
        match self.growth_mode {
            GrowthMode::Constant => self.k0,
            GrowthMode::Exponential => self.k0 << block,
        }
    }

    pub fn stem_resolution(&self) -> usize {
        (self.input_resolution + 2).saturating_sub(3) / self.stem_stride + 1
    }

    /// Spatial size of each block.
    pub fn block_resolutions(&self) -> Vec<usize> {
        let mut r = self.stem_resolution();
        let mut out = Vec::with_capacity(self.block_layers.len());
        for m in 0..self.block_layers.len() {
            if m > 0 {
                r /= 2;
            }
            out.push(r);
        }
        out
    }

    pub fn total_layers(&self) -> usize {
        self.block_layers.iter().sum()
    }

    /// Checks every structural constraint, reporting the first violation.
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.block_layers.is_empty() || self.block_layers.contains(&0) {
            return bad(format!(
                "block_layers must be non-empty and positive, got {:?}",
                self.block_layers
            ));
        }
        for (name, v) in [
            ("k0", self.k0),
            ("groups", self.groups),
            ("condense_factor", self.condense_factor),
            ("groups_3x3", self.groups_3x3),
            ("bottleneck", self.bottleneck),
            ("stem_stride", self.stem_stride),
            ("stem_channels", self.stem_channels),
            ("in_channels", self.in_channels),
            ("num_classes", self.num_classes),
            ("input_resolution", self.input_resolution),
            ("fc_condense_factor", self.fc_condense_factor),
        ] {
            if v == 0 {
                return bad(format!("{name} must be >= 1"));
            }
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad(format!("dropout_rate {} not in [0, 1)", self.dropout_rate));
        }
        for m in 0..self.block_layers.len() {
            let k = self.growth(m);
            if !k.is_multiple_of(self.groups) {
                return bad(format!(
                    "growth rate {k} of block {} not divisible by G = {}",
                    m + 1,
                    self.groups
                ));
            }
            if !k.is_multiple_of(self.groups_3x3) {
                return bad(format!(
                    "growth rate {k} of block {} not divisible by groups_3x3 = {}",
                    m + 1,
                    self.groups_3x3
                ));
            }
            let b = self.bottleneck * k;
            if !b.is_multiple_of(self.groups) || !b.is_multiple_of(self.groups_3x3) {
                return bad(format!(
                    "bottleneck width {b} not divisible by the group counts"
                ));
            }
        }
        let res = self.block_resolutions();
        let mut r = self.stem_resolution();
        for (m, _) in res.iter().enumerate().skip(1) {
            if r < 2 {
                return bad(format!(
                    "resolution {r} too small to downsample before block {}",
                    m + 1
                ));
            }
            if self.connectivity == Connectivity::FullyDense && !r.is_multiple_of(2) {
                return bad(format!(
                    "fully dense connectivity needs exact 2x downsampling, resolution {r} before block {} is odd",
                    m + 1
                ));
            }
            r /= 2;
        }
        let graph = LayerGraph::from_config(self)?;
        for node in graph.nodes.iter() {
            if let NodeKind::Layer { .. } = node.kind {
                let r = graph.input_channels(node);
                if r < self.condense_factor {
                    return bad(format!(
                        "layer with R = {r} inputs is narrower than C = {}",
                        self.condense_factor
                    ));
                }
            }
        }
        let fc_in = graph.input_channels(graph.nodes.last().expect("classifier node"));
        if fc_in < self.fc_condense_factor {
            return bad(format!(
                "classifier input {fc_in} narrower than its C = {}",
                self.fc_condense_factor
            ));
        }
        Ok(())
    }

    /// Flat `key = value` text, readable back with [`ModelConfig::parse_kv`].
    pub fn to_kv(&self) -> String {
        let blocks: Vec<String> = self.block_layers.iter().map(|v| v.to_string()).collect();
        format!(
            "block_layers = {}\nk0 = {}\ngrowth_mode = {}\nconnectivity = {}\ngroups = {}\ncondense_factor = {}\n\
             groups_3x3 = {}\nbottleneck = {}\nstem_stride = {}\nstem_channels = {}\nin_channels = {}\n\
             num_classes = {}\ninput_resolution = {}\ndropout_rate = {}\nfc_condense_factor = {}\n",
            blocks.join(","),
            self.k0,
            self.growth_mode,
            self.connectivity,
            self.groups,
            self.condense_factor,
            self.groups_3x3,
            self.bottleneck,
            self.stem_stride,
            self.stem_channels,
            self.in_channels,
            self.num_classes,
            self.input_resolution,
            self.dropout_rate,
            self.fc_condense_factor,
        )
    }

    /// Applies one `key = value` setting. Returns `false` for keys that are
    /// not model fields.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        fn num<V: FromStr>(key: &str, value: &str) -> Result<V> {
            value
                .parse()
                .map_err(|_| Error::InvalidConfig(format!("{key}: cannot parse '{value}'")))
        }
        match key {
            "block_layers" => {
                self.block_layers = value
                    .split(',')
                    .map(|s| num::<usize>(key, s.trim()))
                    .collect::<Result<_>>()?
            }
            "k0" => self.k0 = num(key, value)?,
            "growth_mode" => self.growth_mode = value.parse()?,
            "connectivity" => self.connectivity = value.parse()?,
            "groups" => self.groups = num(key, value)?,
            "condense_factor" => self.condense_factor = num(key, value)?,
            "groups_3x3" => self.groups_3x3 = num(key, value)?,
            "bottleneck" => self.bottleneck = num(key, value)?,
            "stem_stride" => self.stem_stride = num(key, value)?,
            "stem_channels" => self.stem_channels = num(key, value)?,
            "in_channels" => self.in_channels = num(key, value)?,
            "num_classes" => self.num_classes = num(key, value)?,
            "input_resolution" => self.input_resolution = num(key, value)?,
            "dropout_rate" => self.dropout_rate = num(key, value)?,
            "fc_condense_factor" => self.fc_condense_factor = num(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    /// Parses `key = value` lines (`#` comments allowed), starting from the
    /// preset named by an optional `preset` key.
    pub fn parse_kv(text: &str) -> Result<Self> {
        let pairs = parse_pairs(text)?;
        let mut cfg = match pairs.iter().find(|(k, _)| k == "preset") {
            Some((_, name)) => Self::preset(name)
                .ok_or_else(|| Error::InvalidConfig(format!("unknown preset '{name}'")))?,
            None => Self::cifar_lgc_small(),
        };
        for (k, v) in &pairs {
            if k != "preset" && !cfg.set(k, v)? {
                return Err(Error::InvalidConfig(format!("unknown key '{k}'")));
            }
        }
        Ok(cfg)
    }
}

/// Splits `key = value` lines, skipping blanks and `#` comments.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            Error::InvalidConfig(format!("line {}: expected 'key = value'", lineno + 1))
        })?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NodeKind {
    Stem,
    Layer { block: usize, index: usize },
    Transition { block: usize },
    Classifier,
}

impl fmt::Display for NodeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NodeKind::Stem => write!(f, "stem"),
            NodeKind::Layer { block, index } => write!(f, "b{}l{}", block + 1, index + 1),
            NodeKind::Transition { block } => write!(f, "t{}", block + 1),
            NodeKind::Classifier => write!(f, "classifier"),
        }
    }
}

/// An edge into a node: the source output, average pooled by `downsample`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Source {
    pub node: usize,
    pub downsample: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GraphNode {
    pub kind: NodeKind,
    pub out_channels: usize,
    pub resolution: usize,
    /// Concatenated in this order to form the node's input.
    pub sources: Vec<Source>,
}

/// Which earlier outputs feed each layer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerGraph {
    pub nodes: Vec<GraphNode>,
}

impl LayerGraph {
    pub fn from_config(cfg: &ModelConfig) -> Result<Self> {
        let res = cfg.block_resolutions();
        let mut nodes = vec![GraphNode {
            kind: NodeKind::Stem,
            out_channels: cfg.stem_channels,
            resolution: cfg.stem_resolution(),
            sources: Vec::new(),
        }];
        // Sources visible at the current point, in concatenation order.
        let mut visible: Vec<usize> = vec![0];
        for (m, &n) in cfg.block_layers.iter().enumerate() {
            if m > 0 && cfg.connectivity == Connectivity::Blockwise {
                let sources = visible
                    .iter()
                    .map(|&s| Source {
                        node: s,
                        downsample: 1,
                    })
                    .collect();
                let width = visible.iter().map(|&s| nodes[s].out_channels).sum();
                nodes.push(GraphNode {
                    kind: NodeKind::Transition { block: m - 1 },
                    out_channels: width,
                    resolution: res[m],
                    sources,
                });
                visible = vec![nodes.len() - 1];
            }
            for i in 0..n {
                let sources = visible
                    .iter()
                    .map(|&s| Source {
                        node: s,
                        downsample: ratio(nodes[s].resolution, res[m]),
                    })
                    .collect();
                nodes.push(GraphNode {
                    kind: NodeKind::Layer { block: m, index: i },
                    out_channels: cfg.growth(m),
                    resolution: res[m],
                    sources,
                });
                visible.push(nodes.len() - 1);
            }
        }
        let last = *res.last().expect("at least one block");
        let sources = visible
            .iter()
            .map(|&s| Source {
                node: s,
                downsample: ratio(nodes[s].resolution, last),
            })
            .collect();
        nodes.push(GraphNode {
            kind: NodeKind::Classifier,
            out_channels: cfg.num_classes,
            resolution: 1,
            sources,
        });
        Ok(LayerGraph { nodes })
    }

    pub fn input_channels(&self, node: &GraphNode) -> usize {
        node.sources
            .iter()
            .map(|s| self.nodes[s.node].out_channels)
            .sum()
    }

    /// `(source node, first channel, channel count)` for each input edge.
    pub fn channel_ranges(&self, node: &GraphNode) -> Vec<(usize, usize, usize)> {
        let mut off = 0;
        node.sources
            .iter()
            .map(|s| {
                let c = self.nodes[s.node].out_channels;
                let r = (s.node, off, c);
                off += c;
                r
            })
            .collect()
    }

    pub fn layers(&self) -> impl Iterator<Item = &GraphNode> {
        self.nodes
            .iter()
            .filter(|n| matches!(n.kind, NodeKind::Layer { .. }))
    }
}

fn ratio(from: usize, to: usize) -> usize {
    (from / to.max(1)).max(1)
}

/// Batch normalization parameters and running statistics.
#[derive(Debug, Clone)]
pub struct BatchNorm<T> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
}

impl<T: Element> BatchNorm<T> {
    pub fn new(channels: usize) -> Self {
        BatchNorm {
            gamma: Tensor::ones(&[channels]),
            beta: Tensor::zeros(&[channels]),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::ones(&[channels]),
        }
    }

    fn forward(
        &self,
        g: &mut Graph<T>,
        x: Var,
        ctx: &mut ForwardCtx<'_, T>,
        binder: &mut dyn Binder<T>,
    ) -> Result<Var> {
        let gamma = binder.bind(g, &self.gamma);
        let beta = binder.bind(g, &self.beta);
        let (y, stats) = g.batch_norm(
            x,
            gamma,
            beta,
            &self.running_mean,
            &self.running_var,
            ctx.train,
            BN_EPS,
        )?;
        if ctx.train {
            ctx.bn_stats.push(stats);
        }
        Ok(y)
    }

    fn update_running(&mut self, stats: &BatchStats<T>) {
        let m = T::from_f64_lossy(BN_MOMENTUM);
        let keep = T::one() - m;
        let unbias = if stats.count > 1 {
            T::from_usize(stats.count).unwrap() / T::from_usize(stats.count - 1).unwrap()
        } else {
            T::one()
        };
        for (r, &b) in self.running_mean.data_mut().iter_mut().zip(&stats.mean) {
            *r = keep * *r + m * b;
        }
        for (r, &b) in self.running_var.data_mut().iter_mut().zip(&stats.var) {
            *r = keep * *r + m * b * unbias;
        }
    }

    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamMut<'a, T>>) {
        out.push(ParamMut {
            name: format!("{prefix}.gamma"),
            tensor: &mut self.gamma,
            mask: None,
            is_norm: true,
        });
        out.push(ParamMut {
            name: format!("{prefix}.beta"),
            tensor: &mut self.beta,
            mask: None,
            is_norm: true,
        });
    }
}

/// Supplies graph variables for parameter tensors in forward order.
pub trait Binder<T: Element> {
    fn bind(&mut self, g: &mut Graph<T>, tensor: &Tensor<T>) -> Var;
}

/// Copies each parameter onto the graph as a trainable leaf and remembers it.
#[derive(Default)]
pub struct FreshBinder {
    pub vars: Vec<Var>,
}

impl<T: Element> Binder<T> for FreshBinder {
    fn bind(&mut self, g: &mut Graph<T>, tensor: &Tensor<T>) -> Var {
        let v = g.input(tensor.clone());
        self.vars.push(v);
        v
    }
}

/// Hands out pre-made variables in order (for gradient checks).
pub struct GivenBinder<'a> {
    vars: &'a [Var],
    next: usize,
}

impl<'a> GivenBinder<'a> {
    pub fn new(vars: &'a [Var]) -> Self {
        GivenBinder { vars, next: 0 }
    }

    pub fn consumed(&self) -> usize {
        self.next
    }
}

impl<T: Element> Binder<T> for GivenBinder<'_> {
    fn bind(&mut self, g: &mut Graph<T>, tensor: &Tensor<T>) -> Var {
        let v = self.vars[self.next];
        debug_assert_eq!(g.value(v).shape(), tensor.shape());
        self.next += 1;
        v
    }
}

/// Per-forward options and side outputs.
pub struct ForwardCtx<'a, T> {
    pub train: bool,
    pub rng: Option<&'a mut dyn RngCore>,
    /// Record a group-lasso term for every learned group convolution.
    pub collect_lasso: bool,
    pub lasso_terms: Vec<Var>,
    /// Batch statistics of each training-mode batch norm, in forward order.
    pub bn_stats: Vec<BatchStats<T>>,
}

impl<'a, T> ForwardCtx<'a, T> {
    pub fn eval() -> Self {
        ForwardCtx {
            train: false,
            rng: None,
            collect_lasso: false,
            lasso_terms: Vec::new(),
            bn_stats: Vec::new(),
        }
    }

    pub fn train(rng: Option<&'a mut dyn RngCore>, collect_lasso: bool) -> Self {
        ForwardCtx {
            train: true,
            rng,
            collect_lasso,
            lasso_terms: Vec::new(),
            bn_stats: Vec::new(),
        }
    }
}

/// The 1×1 convolution of a basic layer in either form.
#[derive(Debug, Clone)]
pub enum Pointwise<T> {
    Learned(LearnedGroupConv<T>),
    Condensed(CondensedGroupConv<T>),
}

/// BN-ReLU-1×1 LGC-permute-BN-ReLU-3×3 group conv.
#[derive(Debug, Clone)]
pub struct BasicLayer<T> {
    pub bn1: BatchNorm<T>,
    pub conv1: Pointwise<T>,
    pub bn2: BatchNorm<T>,
    /// `[k, b·k / groups_3x3, 3, 3]`.
    pub conv2: Tensor<T>,
    pub groups_3x3: usize,
    pub dropout_rate: f64,
}

/// Builds one basic layer mapping `R` inputs to `growth` new feature maps.
#[allow(clippy::too_many_arguments)]
pub fn build_basic_layer<T: Element, R: Rng + ?Sized>(
    in_channels: usize,
    growth: usize,
    groups: usize,
    condense_factor: usize,
    groups_3x3: usize,
    bottleneck: usize,
    dropout_rate: f64,
    rng: &mut R,
) -> Result<BasicLayer<T>> {
    let width = bottleneck * growth;
    for (what, value, divisor) in [
        ("growth rate k", growth, groups),
        ("growth rate k", growth, groups_3x3),
        ("bottleneck width", width, groups),
        ("bottleneck width", width, groups_3x3),
    ] {
        if divisor == 0 || value % divisor != 0 {
            return Err(Error::Indivisible {
                op: "basic layer",
                what,
                value,
                divisor: divisor.max(1),
            });
        }
    }
    let conv1 = LearnedGroupConv::new(in_channels, width, groups, condense_factor, rng)?;
    let fan_in = (width / groups_3x3) * 9;
    let conv2 = Tensor::randn(
        &[growth, width / groups_3x3, 3, 3],
        (2.0 / fan_in as f64).sqrt(),
        rng,
    );
    Ok(BasicLayer {
        bn1: BatchNorm::new(in_channels),
        conv1: Pointwise::Learned(conv1),
        bn2: BatchNorm::new(width),
        conv2,
        groups_3x3,
        dropout_rate,
    })
}

impl<T: Element> BasicLayer<T> {
    pub fn in_channels(&self) -> usize {
        self.bn1.gamma.len()
    }

    pub fn growth(&self) -> usize {
        self.conv2.dim(0)
    }

    pub fn bottleneck_width(&self) -> usize {
        self.bn2.gamma.len()
    }

    /// LGC group count; the permutation interleaves these groups.
    pub fn groups(&self) -> usize {
        match &self.conv1 {
            Pointwise::Learned(l) => l.groups,
            Pointwise::Condensed(c) => c.groups(),
        }
    }

    pub fn forward(
        &self,
        g: &mut Graph<T>,
        x: Var,
        ctx: &mut ForwardCtx<'_, T>,
        binder: &mut dyn Binder<T>,
    ) -> Result<Var> {
        let h = self.bn1.forward(g, x, ctx, binder)?;
        let h = g.relu(h);
        let h = match &self.conv1 {
            Pointwise::Learned(lgc) => {
                let w = binder.bind(g, &lgc.weight);
                let m = g.constant(lgc.mask.clone());
                let wm = g.mul(w, m)?;
                if ctx.collect_lasso {
                    let p = g.group_lasso(wm, lgc.groups)?;
                    ctx.lasso_terms.push(p);
                }
                g.conv2d(h, wm, 1, 0, 1)?
            }
            Pointwise::Condensed(c) => {
                let gathered = g.index_channels(h, &c.index.gather)?;
                let w = binder.bind(g, &c.weight);
                g.conv2d(gathered, w, 1, 0, c.groups())?
            }
        };
        let h = g.permute_channels(h, self.groups())?;
        let h = self.bn2.forward(g, h, ctx, binder)?;
        let h = g.relu(h);
        let w2 = binder.bind(g, &self.conv2);
        let mut out = g.conv2d(h, w2, 1, 1, self.groups_3x3)?;
        if ctx.train && self.dropout_rate > 0.0 {
            if let Some(rng) = ctx.rng.as_deref_mut() {
                let n = g.value(out).len();
                let keep: Vec<bool> = (0..n)
                    .map(|_| rng.random::<f64>() >= self.dropout_rate)
                    .collect();
                out = g.dropout(out, &keep, self.dropout_rate)?;
            }
        }
        Ok(out)
    }

    /// Parameters in forward order.
    pub fn params(&self) -> Vec<&Tensor<T>> {
        let w1 = match &self.conv1 {
            Pointwise::Learned(l) => &l.weight,
            Pointwise::Condensed(c) => &c.weight,
        };
        vec![
            &self.bn1.gamma,
            &self.bn1.beta,
            w1,
            &self.bn2.gamma,
            &self.bn2.beta,
            &self.conv2,
        ]
    }

    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamMut<'a, T>>) {
        self.bn1.params_mut(&format!("{prefix}.bn1"), out);
        match &mut self.conv1 {
            Pointwise::Learned(l) => out.push(ParamMut {
                name: format!("{prefix}.conv1.weight"),
                tensor: &mut l.weight,
                mask: Some(&l.mask),
                is_norm: false,
            }),
            Pointwise::Condensed(c) => out.push(ParamMut {
                name: format!("{prefix}.conv1.weight"),
                tensor: &mut c.weight,
                mask: None,
                is_norm: false,
            }),
        }
        self.bn2.params_mut(&format!("{prefix}.bn2"), out);
        out.push(ParamMut {
            name: format!("{prefix}.conv2.weight"),
            tensor: &mut self.conv2,
            mask: None,
            is_norm: false,
        });
    }

    fn norms_mut(&mut self) -> [&mut BatchNorm<T>; 2] {
        [&mut self.bn1, &mut self.bn2]
    }
}

/// BN-ReLU-1×1 convolution preserving width, used between blocks in
/// blockwise mode; average pooling follows.
#[derive(Debug, Clone)]
pub struct Transition<T> {
    pub bn: BatchNorm<T>,
    pub conv: Tensor<T>,
}

/// Final linear layer, prunable like a learned group convolution with `G = 1`.
#[derive(Debug, Clone)]
pub enum Classifier<T> {
    Dense {
        /// `[out, in]` weight with its column mask.
        lgc: LearnedGroupConv<T>,
        bias: Tensor<T>,
    },
    Condensed(CondensedLinear<T>),
}

/// Training (masked) or test (index layer + group conv) form.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Form {
    Train,
    Test,
}

impl fmt::Display for Form {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Form::Train => "train",
            Form::Test => "test",
        })
    }
}

impl FromStr for Form {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Form::Train),
            "test" => Ok(Form::Test),
            _ => Err(Error::InvalidConfig(format!("unknown form '{s}'"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub graph: LayerGraph,
    pub form: Form,
    /// `[stem_channels, in_channels, 3, 3]`.
    pub stem: Tensor<T>,
    /// All basic layers, block after block.
    pub layers: Vec<BasicLayer<T>>,
    /// One per block boundary in blockwise mode, empty otherwise.
    pub transitions: Vec<Transition<T>>,
    pub final_bn: BatchNorm<T>,
    pub classifier: Classifier<T>,
}

/// Builds the training form of `config` with weights drawn from `seed`.
pub fn build_model<T: Element>(config: &ModelConfig, seed: u64) -> Result<Model<T>> {
    config.validate()?;
    let graph = LayerGraph::from_config(config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let stem_fan = (config.in_channels * 9) as f64;
    let stem = Tensor::randn(
        &[config.stem_channels, config.in_channels, 3, 3],
        (2.0 / stem_fan).sqrt(),
        &mut rng,
    );
    let mut layers = Vec::with_capacity(config.total_layers());
    let mut transitions = Vec::new();
    for node in &graph.nodes {
        let r = graph.input_channels(node);
        match node.kind {
            NodeKind::Layer { block, .. } => layers.push(build_basic_layer(
                r,
                config.growth(block),
                config.groups,
                config.condense_factor,
                config.groups_3x3,
                config.bottleneck,
                config.dropout_rate,
                &mut rng,
            )?),
            NodeKind::Transition { .. } => transitions.push(Transition {
                bn: BatchNorm::new(r),
                conv: Tensor::randn(&[r, r, 1, 1], (2.0 / r as f64).sqrt(), &mut rng),
            }),
            NodeKind::Stem => {}
            NodeKind::Classifier => {}
        }
    }
    let classifier_node = graph.nodes.last().expect("classifier");
    let fin = graph.input_channels(classifier_node);
    let bound = 1.0 / (fin as f64).sqrt();
    let fc_weight = Tensor::uniform(&[config.num_classes, fin], bound, &mut rng);
    let classifier = Classifier::Dense {
        lgc: LearnedGroupConv::from_weight(fc_weight, 1, config.fc_condense_factor)?,
        bias: Tensor::zeros(&[config.num_classes]),
    };
    // LearnedGroupConv::from_weight reshapes to [O, R, 1, 1]; the classifier
    // keeps its weight as a matrix.
    let classifier = match classifier {
        Classifier::Dense { mut lgc, bias } => {
            let (o, r) = (lgc.out_channels(), lgc.in_channels());
            lgc.weight = lgc.weight.reshape(&[o, r])?;
            lgc.mask = lgc.mask.reshape(&[o, r])?;
            Classifier::Dense { lgc, bias }
        }
        c => c,
    };
    Ok(Model {
        config: config.clone(),
        graph,
        form: Form::Train,
        stem,
        layers,
        transitions,
        final_bn: BatchNorm::new(fin),
        classifier,
    })
}

/// Prunes the classifier's input columns in one shot so that `⌊R/C⌋`
/// survive (`G = 1`). `C = 1` leaves it untouched.
pub fn fc_condense<T: Element>(
    lgc: &mut LearnedGroupConv<T>,
    condense_factor: usize,
) -> Result<()> {
    if condense_factor <= 1 {
        return Ok(());
    }
    if lgc.groups != 1 {
        return Err(Error::invalid(
            "fc_condense",
            "classifier pruning uses a single group",
        ));
    }
    if lgc.stage > 0 {
        return Err(Error::Schedule("classifier already condensed".into()));
    }
    let (rows, cols) = (lgc.out_channels(), lgc.in_channels());
    let keep = cols / condense_factor;
    crate::lgc::prune_columns(
        lgc.weight.data_mut(),
        lgc.mask.data_mut(),
        rows,
        cols,
        1,
        keep,
    )?;
    lgc.condense_factor = condense_factor;
    lgc.stage = condense_factor - 1;
    Ok(())
}

impl<T: Element> Model<T> {
    fn block_ranges(&self) -> Vec<std::ops::Range<usize>> {
        let mut start = 0;
        self.config
            .block_layers
            .iter()
            .map(|&n| {
                let r = start..start + n;
                start += n;
                r
            })
            .collect()
    }

    /// Logits for a batch `[N, in_channels, H, W]`.
    pub fn forward(
        &self,
        g: &mut Graph<T>,
        x: Var,
        ctx: &mut ForwardCtx<'_, T>,
        binder: &mut dyn Binder<T>,
    ) -> Result<Var> {
        let stem = binder.bind(g, &self.stem);
        let mut feats = g.conv2d(x, stem, self.config.stem_stride, 1, 1)?;
        for (m, range) in self.block_ranges().into_iter().enumerate() {
            if m > 0 {
                if let Some(t) = self.transitions.get(m - 1) {
                    let h = t.bn.forward(g, feats, ctx, binder)?;
                    let h = g.relu(h);
                    let w = binder.bind(g, &t.conv);
                    feats = g.conv2d(h, w, 1, 0, 1)?;
                }
                feats = g.avg_pool2d(feats, 2, 2)?;
            }
            for layer in &self.layers[range] {
                let out = layer.forward(g, feats, ctx, binder)?;
                feats = g.concat(&[feats, out])?;
            }
        }
        let h = self.final_bn.forward(g, feats, ctx, binder)?;
        let h = g.relu(h);
        let pooled = g.global_avg_pool(h)?;
        match &self.classifier {
            Classifier::Dense { lgc, bias } => {
                let w = binder.bind(g, &lgc.weight);
                let w = if lgc.stage > 0 {
                    let m = g.constant(lgc.mask.clone());
                    g.mul(w, m)?
                } else {
                    w
                };
                let b = binder.bind(g, bias);
                g.linear(pooled, w, Some(b))
            }
            Classifier::Condensed(c) => {
                let x = g.index_channels(pooled, &c.index.gather)?;
                let w = binder.bind(g, &c.weight);
                let b = binder.bind(g, &c.bias);
                g.linear(x, w, Some(b))
            }
        }
    }

    /// Trainable parameters in forward order.
    pub fn params_mut(&mut self) -> Vec<ParamMut<'_, T>> {
        let ranges = self.block_ranges();
        let mut out = Vec::new();
        out.push(ParamMut {
            name: "stem.weight".into(),
            tensor: &mut self.stem,
            mask: None,
            is_norm: false,
        });
        let mut layers: Vec<Option<&mut BasicLayer<T>>> =
            self.layers.iter_mut().map(Some).collect();
        let mut transitions: Vec<Option<&mut Transition<T>>> =
            self.transitions.iter_mut().map(Some).collect();
        for (m, range) in ranges.into_iter().enumerate() {
            if m > 0 {
                if let Some(t) = transitions.get_mut(m - 1).and_then(Option::take) {
                    t.bn.params_mut(&format!("t{m}.bn"), &mut out);
                    out.push(ParamMut {
                        name: format!("t{m}.conv.weight"),
                        tensor: &mut t.conv,
                        mask: None,
                        is_norm: false,
                    });
                }
            }
            for (i, li) in range.enumerate() {
                let layer = layers[li].take().expect("each layer visited once");
                layer.params_mut(&format!("b{}l{}", m + 1, i + 1), &mut out);
            }
        }
        self.final_bn.params_mut("final_bn", &mut out);
        match &mut self.classifier {
            Classifier::Dense { lgc, bias } => {
                let mask = (lgc.stage > 0).then_some(&lgc.mask);
                out.push(ParamMut {
                    name: "classifier.weight".into(),
                    tensor: &mut lgc.weight,
                    mask,
                    is_norm: false,
                });
                out.push(ParamMut {
                    name: "classifier.bias".into(),
                    tensor: bias,
                    mask: None,
                    is_norm: false,
                });
            }
            Classifier::Condensed(c) => {
                out.push(ParamMut {
                    name: "classifier.weight".into(),
                    tensor: &mut c.weight,
                    mask: None,
                    is_norm: false,
                });
                out.push(ParamMut {
                    name: "classifier.bias".into(),
                    tensor: &mut c.bias,
                    mask: None,
                    is_norm: false,
                });
            }
        }
        out
    }

    /// Batch norms in forward order.
    fn norms_mut(&mut self) -> Vec<&mut BatchNorm<T>> {
        let ranges = self.block_ranges();
        let mut layers: Vec<Option<&mut BasicLayer<T>>> =
            self.layers.iter_mut().map(Some).collect();
        let mut transitions: Vec<Option<&mut Transition<T>>> =
            self.transitions.iter_mut().map(Some).collect();
        let mut out = Vec::new();
        for (m, range) in ranges.into_iter().enumerate() {
            if m > 0 {
                if let Some(t) = transitions.get_mut(m - 1).and_then(Option::take) {
                    out.push(&mut t.bn);
                }
            }
            for li in range {
                out.extend(
                    layers[li]
                        .take()
                        .expect("each layer visited once")
                        .norms_mut(),
                );
            }
        }
        out.push(&mut self.final_bn);
        out
    }

    /// Folds the batch statistics of a training forward into the running averages.
    pub fn update_running_stats(&mut self, stats: &[BatchStats<T>]) -> Result<()> {
        let norms = self.norms_mut();
        if norms.len() != stats.len() {
            return Err(Error::ShapeMismatch {
                op: "update_running_stats",
                left_name: "batch norms",
                left: norms.len(),
                right_name: "recorded statistics",
                right: stats.len(),
            });
        }
        for (bn, s) in norms.into_iter().zip(stats) {
            bn.update_running(s);
        }
        Ok(())
    }

    /// Learned group convolutions in forward order.
    pub fn lgc_layers(&self) -> impl Iterator<Item = &LearnedGroupConv<T>> {
        self.layers.iter().filter_map(|l| match &l.conv1 {
            Pointwise::Learned(lgc) => Some(lgc),
            Pointwise::Condensed(_) => None,
        })
    }

    pub fn lgc_layers_mut(&mut self) -> impl Iterator<Item = &mut LearnedGroupConv<T>> {
        self.layers.iter_mut().filter_map(|l| match &mut l.conv1 {
            Pointwise::Learned(lgc) => Some(lgc),
            Pointwise::Condensed(_) => None,
        })
    }

    /// Applies condensing stage `stage` to every learned group convolution.
    pub fn condense(&mut self, stage: usize) -> Result<()> {
        for lgc in self.lgc_layers_mut() {
            lgc.condense(stage)?;
        }
        Ok(())
    }

    /// Runs all remaining stages (and the classifier pruning, when configured).
    pub fn condense_fully(&mut self) -> Result<()> {
        for lgc in self.lgc_layers_mut() {
            lgc.condense_fully()?;
        }
        if !self.fc_condensed() {
            self.condense_classifier()?;
        }
        Ok(())
    }

    pub fn fc_condensed(&self) -> bool {
        match &self.classifier {
            Classifier::Dense { lgc, .. } => self.config.fc_condense_factor <= 1 || lgc.stage > 0,
            Classifier::Condensed(_) => true,
        }
    }

    pub fn condense_classifier(&mut self) -> Result<()> {
        let factor = self.config.fc_condense_factor;
        match &mut self.classifier {
            Classifier::Dense { lgc, .. } => fc_condense(lgc, factor),
            Classifier::Condensed(_) => Err(Error::AlreadyConverted),
        }
    }

    /// `(unmasked, total)` weights over all learned group convolutions.
    pub fn lgc_survivors(&self) -> (usize, usize) {
        self.lgc_layers().fold((0, 0), |(s, t), l| {
            (s + l.surviving_weights(), t + l.weight.len())
        })
    }

    /// Eval-mode logits for a batch.
    pub fn predict(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let x = g.constant(input.clone());
        let mut ctx = ForwardCtx::eval();
        let mut binder = FreshBinder::default();
        let y = self.forward(&mut g, x, &mut ctx, &mut binder)?;
        Ok(g.value(y).clone())
    }

    /// Copies the model into another element type.
    pub fn cast<U: Element>(&self) -> Model<U> {
        fn bn<T: Element, U: Element>(b: &BatchNorm<T>) -> BatchNorm<U> {
            BatchNorm {
                gamma: b.gamma.cast(),
                beta: b.beta.cast(),
                running_mean: b.running_mean.cast(),
                running_var: b.running_var.cast(),
            }
        }
        fn lgc<T: Element, U: Element>(l: &LearnedGroupConv<T>) -> LearnedGroupConv<U> {
            LearnedGroupConv {
                weight: l.weight.cast(),
                mask: l.mask.cast(),
                groups: l.groups,
                condense_factor: l.condense_factor,
                stage: l.stage,
            }
        }
        Model {
            config: self.config.clone(),
            graph: self.graph.clone(),
            form: self.form,
            stem: self.stem.cast(),
            layers: self
                .layers
                .iter()
                .map(|l| BasicLayer {
                    bn1: bn(&l.bn1),
                    conv1: match &l.conv1 {
                        Pointwise::Learned(x) => Pointwise::Learned(lgc(x)),
                        Pointwise::Condensed(c) => Pointwise::Condensed(c.cast()),
                    },
                    bn2: bn(&l.bn2),
                    conv2: l.conv2.cast(),
                    groups_3x3: l.groups_3x3,
                    dropout_rate: l.dropout_rate,
                })
                .collect(),
            transitions: self
                .transitions
                .iter()
                .map(|t| Transition {
                    bn: bn(&t.bn),
                    conv: t.conv.cast(),
                })
                .collect(),
            final_bn: bn(&self.final_bn),
            classifier: match &self.classifier {
                Classifier::Dense { lgc: l, bias } => Classifier::Dense {
                    lgc: lgc(l),
                    bias: bias.cast(),
                },
                Classifier::Condensed(c) => Classifier::Condensed(c.cast()),
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn basic_layer_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let l: BasicLayer<f64> = build_basic_layer(8, 8, 4, 4, 4, 4, 0.0, &mut rng).unwrap();
        match &l.conv1 {
            Pointwise::Learned(lgc) => assert_eq!((lgc.in_channels(), lgc.out_channels()), (8, 32)),
            _ => unreachable!(),
        }
        assert_eq!(l.conv2.shape(), &[8, 8, 3, 3]);
        let mut g = Graph::new();
        let x = g.constant(Tensor::randn(&[2, 8, 5, 5], 1.0, &mut rng));
        let mut ctx = ForwardCtx::eval();
        let y = l
            .forward(&mut g, x, &mut ctx, &mut FreshBinder::default())
            .unwrap();
        assert_eq!(g.value(y).shape(), &[2, 8, 5, 5]);
    }

    #[test]
    fn basic_layer_divisibility_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(build_basic_layer::<f64, _>(8, 6, 4, 4, 4, 4, 0.0, &mut rng).is_err());
        assert!(build_basic_layer::<f64, _>(8, 8, 3, 1, 1, 4, 0.0, &mut rng).is_err());
    }

    #[test]
    fn ungrouped_layer_has_dense_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let l: BasicLayer<f64> = build_basic_layer(12, 12, 1, 1, 1, 4, 0.0, &mut rng).unwrap();
        assert_eq!(l.conv2.shape(), &[12, 48, 3, 3]);
        assert_eq!(l.groups(), 1);
    }

    #[test]
    fn imagenet_feature_map_sizes() {
        let cfg = ModelConfig::imagenet_table3();
        cfg.validate().unwrap();
        assert_eq!(cfg.block_resolutions(), vec![112, 56, 28, 14, 7]);
        let growth: Vec<usize> = (0..5).map(|m| cfg.growth(m)).collect();
        assert_eq!(growth, vec![8, 16, 32, 64, 128]);
    }

    #[test]
    fn cifar_resolutions() {
        assert_eq!(
            ModelConfig::cifar_lgc_small().block_resolutions(),
            vec![32, 16, 8]
        );
    }

    #[test]
    fn fully_dense_sources_cover_all_predecessors() {
        let cfg = ModelConfig::cifar_lgc_small();
        let g = LayerGraph::from_config(&cfg).unwrap();
        let mut expected = cfg.stem_channels;
        for (i, node) in g.layers().enumerate() {
            let idx = g.nodes.iter().position(|n| n == node).unwrap();
            assert_eq!(node.sources.len(), i + 1);
            assert!(node.sources.iter().all(|s| s.node < idx));
            assert_eq!(g.input_channels(node), expected);
            expected += node.out_channels;
        }
        let layer9 = g.layers().nth(8).unwrap();
        assert_eq!(layer9.sources[0].downsample, 4);
    }

    #[test]
    fn config_validation_errors() {
        let mut c = ModelConfig::cifar_lgc_small();
        c.k0 = 6;
        assert!(matches!(c.validate(), Err(Error::InvalidConfig(_))));
        let mut c = ModelConfig::cifar_lgc_small();
        c.input_resolution = 30;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::cifar_lgc_small();
        c.block_layers = vec![];
        assert!(c.validate().is_err());
    }

    #[test]
    fn kv_roundtrip() {
        let c = ModelConfig::imagenet_table3();
        assert_eq!(ModelConfig::parse_kv(&c.to_kv()).unwrap(), c);
        let c = ModelConfig::parse_kv(
            "preset = imagenet-table3\ngroups = 4 # override\ncondense_factor=4",
        )
        .unwrap();
        assert_eq!((c.groups, c.condense_factor, c.k0), (4, 4, 8));
        assert!(ModelConfig::parse_kv("bogus = 1").is_err());
    }

    #[test]
    fn fc_condense_masks_low_columns() {
        let w = Tensor::from_vec(
            &[4, 4],
            vec![
                4.0, 3.0, 2.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0,
            ],
        )
        .unwrap();
        let mut l = LearnedGroupConv::<f64>::from_weight(w.clone(), 1, 1).unwrap();
        fc_condense(&mut l, 1).unwrap();
        assert_eq!(l.surviving_weights(), 16);
        fc_condense(&mut l, 2).unwrap();
        assert_eq!(l.surviving_columns(0).unwrap(), vec![0, 1]);
    }

    #[test]
    fn model_forward_shape_and_param_order() {
        let mut cfg = ModelConfig::cifar_lgc_small();
        cfg.input_resolution = 8;
        cfg.block_layers = vec![2, 2];
        let mut model: Model<f64> = build_model(&cfg, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = Tensor::randn(&[3, 3, 8, 8], 1.0, &mut rng);
        let mut g = Graph::new();
        let xv = g.constant(x);
        let mut ctx = ForwardCtx::train(None, true);
        let mut binder = FreshBinder::default();
        let y = model.forward(&mut g, xv, &mut ctx, &mut binder).unwrap();
        assert_eq!(g.value(y).shape(), &[3, 10]);
        assert_eq!(ctx.lasso_terms.len(), 4);
        let stats = std::mem::take(&mut ctx.bn_stats);
        let shapes: Vec<Vec<usize>> = binder
            .vars
            .iter()
            .map(|&v| g.value(v).shape().to_vec())
            .collect();
        let params = model.params_mut();
        assert_eq!(params.len(), shapes.len());
        for (p, s) in params.iter().zip(&shapes) {
            assert_eq!(p.tensor.shape(), &s[..], "{}", p.name);
        }
        drop(params);
        model.update_running_stats(&stats).unwrap();
    }

    #[test]
    fn blockwise_model_runs() {
        let mut cfg = ModelConfig::densenet_cifar();
        cfg.input_resolution = 8;
        let mut model: Model<f64> = build_model(&cfg, 3).unwrap();
        assert_eq!(model.transitions.len(), 2);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = Tensor::randn(&[2, 3, 8, 8], 1.0, &mut rng);
        let mut g = Graph::new();
        let xv = g.constant(x);
        let mut ctx = ForwardCtx::train(None, false);
        let mut binder = FreshBinder::default();
        let y = model.forward(&mut g, xv, &mut ctx, &mut binder).unwrap();
        assert_eq!(g.value(y).shape(), &[2, 10]);
        assert_eq!(binder.vars.len(), model.params_mut().len());
        model.update_running_stats(&ctx.bn_stats).unwrap();
    }

    fn layer_gradcheck(form: Form, seed: u64) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layer: BasicLayer<f64> =
            build_basic_layer(8, 4, 2, 2, 2, 2, 0.0, &mut rng).unwrap();
        if form == Form::Test {
            if let Pointwise::Learned(l) = &mut layer.conv1 {
                l.condense_fully().unwrap();
                layer.conv1 = Pointwise::Condensed(CondensedGroupConv::from_learned(l).unwrap());
            }
        }
        for bn in [&mut layer.bn1, &mut layer.bn2] {
            bn.gamma = Tensor::uniform(bn.gamma.shape(), 1.0, &mut rng);
            bn.beta = Tensor::randn(bn.beta.shape(), 0.5, &mut rng);
        }
        let x = Tensor::randn(&[3, 8, 4, 4], 1.0, &mut rng);
        let probe = Tensor::randn(&[3, 4, 4, 4], 1.0, &mut rng);
        let mut params = vec![x];
        params.extend(layer.params().into_iter().cloned());
        let rep = crate::gradcheck::grad_check(
            |g, vars| {
                let mut ctx = ForwardCtx::train(None, false);
                let mut binder = GivenBinder::new(&vars[1..]);
                let y = layer.forward(g, vars[0], &mut ctx, &mut binder)?;
                assert_eq!(binder.consumed(), vars.len() - 1);
                let p = g.constant(probe.clone());
                let yp = g.mul(y, p)?;
                Ok(g.sum(yp))
            },
            &params,
            1e-5,
        )
        .unwrap();
        rep.max_rel_error
    }

    #[test]
    fn basic_layer_gradients_match_differences() {
        for seed in 0..3 {
            for form in [Form::Train, Form::Test] {
                let err = layer_gradcheck(form, seed);
                assert!(err < 1e-4, "{form} seed {seed}: {err}");
            }
        }
    }
}
