//! Parameter and multiply-add counts.
//!
//! A convolution costs `O·(R/G)·kh·kw·H'·W'` multiply-adds, a linear layer
//! `in·out`; batch norm, ReLU, pooling and index layers count as zero.
//! Parameters include batch-norm scale/shift and the classifier bias but not
//! running statistics. Masked-out weights of a training-form model are not
//! counted as parameters, although their multiply-adds still are.

use std::fmt::Write as _;

use crate::arch::{Classifier, Form, LayerGraph, Model, ModelConfig, NodeKind, Pointwise};
use crate::error::Result;
use crate::tensor::Element;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CostRow {
    pub name: String,
    pub params: u64,
    pub flops: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CostReport {
    pub form: Form,
    pub resolution: usize,
    pub rows: Vec<CostRow>,
}

impl CostReport {
    pub fn params(&self) -> u64 {
        self.rows.iter().map(|r| r.params).sum()
    }

    pub fn flops(&self) -> u64 {
        self.rows.iter().map(|r| r.flops).sum()
    }

    /// `key = value` lines; per-node rows follow the totals.
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "form = {}", self.form);
        let _ = writeln!(s, "resolution = {}", self.resolution);
        let _ = writeln!(s, "params = {}", self.params());
        let _ = writeln!(s, "flops = {}", self.flops());
        for r in &self.rows {
            let _ = writeln!(
                s,
                "layer.{} = params {} flops {}",
                r.name, r.params, r.flops
            );
        }
        s
    }
}

pub fn conv_flops(out: usize, in_per_group: usize, kernel: usize, out_res: usize) -> u64 {
    (out * in_per_group * kernel * kernel) as u64 * (out_res * out_res) as u64
}

fn graph_at(config: &ModelConfig, resolution: usize) -> Result<(ModelConfig, LayerGraph)> {
    let mut cfg = config.clone();
    cfg.input_resolution = resolution;
    cfg.validate()?;
    let graph = LayerGraph::from_config(&cfg)?;
    Ok((cfg, graph))
}

/// Per-node shapes shared by both counting paths.
struct NodeShape {
    name: String,
    kind: NodeKind,
    in_channels: usize,
    out_channels: usize,
    resolution: usize,
}

fn node_shapes(graph: &LayerGraph) -> Vec<NodeShape> {
    let mut out = Vec::new();
    for (i, node) in graph.nodes.iter().enumerate() {
        let resolution = match node.kind {
            // The transition convolution runs before pooling.
            NodeKind::Transition { .. } => graph.nodes[i - 1].resolution,
            NodeKind::Classifier => 1,
            _ => node.resolution,
        };
        out.push(NodeShape {
            name: node.kind.to_string(),
            kind: node.kind,
            in_channels: graph.input_channels(node),
            out_channels: node.out_channels,
            resolution,
        });
    }
    out
}

/// Counts from the configuration alone. `Train` is the freshly built
/// (unpruned) model, `Test` the fully condensed and converted one.
pub fn count_config(config: &ModelConfig, form: Form, resolution: usize) -> Result<CostReport> {
    let (cfg, graph) = graph_at(config, resolution)?;
    let mut rows = Vec::new();
    for n in node_shapes(&graph) {
        let (params, flops) = match n.kind {
            NodeKind::Stem => {
                let p = n.out_channels * cfg.in_channels * 9;
                (
                    p as u64,
                    conv_flops(n.out_channels, cfg.in_channels, 3, n.resolution),
                )
            }
            NodeKind::Layer { block, .. } => {
                let (r, k) = (n.in_channels, cfg.growth(block));
                let b = cfg.bottleneck * k;
                let hw = n.resolution;
                let cols = match form {
                    Form::Train => r,
                    Form::Test => {
                        if cfg.condense_factor > 1 {
                            r / cfg.condense_factor
                        } else {
                            r
                        }
                    }
                };
                let p1 = match form {
                    Form::Train => b * r,
                    Form::Test => b * cols,
                };
                let f1 = conv_flops(b, cols, 1, hw);
                let p2 = k * (b / cfg.groups_3x3) * 9;
                let f2 = conv_flops(k, b / cfg.groups_3x3, 3, hw);
                ((2 * r + p1 + 2 * b + p2) as u64, f1 + f2)
            }
            NodeKind::Transition { .. } => {
                let c = n.in_channels;
                ((2 * c + c * c) as u64, conv_flops(c, c, 1, n.resolution))
            }
            NodeKind::Classifier => {
                let f = n.in_channels;
                let kept = match form {
                    Form::Test if cfg.fc_condense_factor > 1 => f / cfg.fc_condense_factor,
                    _ => f,
                };
                rows.push(CostRow {
                    name: "final_bn".into(),
                    params: 2 * f as u64,
                    flops: 0,
                });
                let flops = (kept * n.out_channels) as u64;
                (flops + n.out_channels as u64, flops)
            }
        };
        rows.push(CostRow {
            name: n.name,
            params,
            flops,
        });
    }
    Ok(CostReport {
        form,
        resolution,
        rows,
    })
}

/// Counts from the weights of an actual model.
pub fn count_model<T: Element>(model: &Model<T>, resolution: usize) -> Result<CostReport> {
    let (_, graph) = graph_at(&model.config, resolution)?;
    let shapes = node_shapes(&graph);
    let mut rows = Vec::new();
    let mut layers = model.layers.iter();
    let mut transitions = model.transitions.iter();
    for n in shapes {
        let (params, flops) = match n.kind {
            NodeKind::Stem => {
                let s = model.stem.shape();
                (
                    model.stem.len() as u64,
                    conv_flops(s[0], s[1], s[2], n.resolution),
                )
            }
            NodeKind::Layer { .. } => {
                let l = layers.next().expect("one layer per graph node");
                let (p1, f1) = match &l.conv1 {
                    Pointwise::Learned(lgc) => (
                        lgc.surviving_weights(),
                        conv_flops(lgc.out_channels(), lgc.in_channels(), 1, n.resolution),
                    ),
                    Pointwise::Condensed(c) => (
                        c.weight.len(),
                        conv_flops(c.weight.dim(0), c.weight.dim(1), 1, n.resolution),
                    ),
                };
                let s = l.conv2.shape();
                let norms =
                    l.bn1.gamma.len() + l.bn1.beta.len() + l.bn2.gamma.len() + l.bn2.beta.len();
                (
                    (norms + p1 + l.conv2.len()) as u64,
                    f1 + conv_flops(s[0], s[1], s[2], n.resolution),
                )
            }
            NodeKind::Transition { .. } => {
                let t = transitions.next().expect("one transition per graph node");
                let s = t.conv.shape();
                (
                    (t.bn.gamma.len() + t.bn.beta.len() + t.conv.len()) as u64,
                    conv_flops(s[0], s[1], 1, n.resolution),
                )
            }
            NodeKind::Classifier => {
                rows.push(CostRow {
                    name: "final_bn".into(),
                    params: (model.final_bn.gamma.len() + model.final_bn.beta.len()) as u64,
                    flops: 0,
                });
                match &model.classifier {
                    Classifier::Dense { lgc, bias } => (
                        (lgc.surviving_weights() + bias.len()) as u64,
                        lgc.weight.len() as u64,
                    ),
                    Classifier::Condensed(c) => (
                        (c.weight.len() + c.bias.len()) as u64,
                        c.weight.len() as u64,
                    ),
                }
            }
        };
        rows.push(CostRow {
            name: n.name,
            params,
            flops,
        });
    }
    Ok(CostReport {
        form: model.form,
        resolution,
        rows,
    })
}
