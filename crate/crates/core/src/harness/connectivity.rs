//! Connection strengths between layers: the mean absolute unmasked 1×1
//! weight from every source feature map into every learned group
//! convolution, per filter group and aggregated per layer.

use std::fmt::Write as _;

use crate::arch::{Model, NodeKind, Pointwise};
use crate::error::{Error, Result};
use crate::tensor::Element;

#[derive(Debug, Clone, PartialEq)]
pub struct GroupStrength {
    pub target: String,
    pub group: usize,
    pub source: String,
    pub strength: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConnectivityReport {
    pub groups: Vec<GroupStrength>,
    /// Row labels of `block`.
    pub targets: Vec<String>,
    /// Column labels of `block`.
    pub sources: Vec<String>,
    /// `block[t][s]`: `None` where source `s` does not feed target `t`.
    pub block: Vec<Vec<Option<f64>>>,
}

/// `(|w|, alive)` of a 1×1 layer as a dense `O×R` matrix.
fn dense_view<T: Element>(
    conv: &Pointwise<T>,
    in_channels: usize,
) -> (Vec<f64>, Vec<bool>, usize, usize) {
    match conv {
        Pointwise::Learned(l) => {
            let w = l.weight.data().iter().map(|v| v.as_f64().abs()).collect();
            let m = l.mask.data().iter().map(|&v| v != T::zero()).collect();
            (w, m, l.groups, l.out_channels())
        }
        Pointwise::Condensed(c) => {
            let o = c.weight.dim(0);
            let per = c.index.per_group;
            let rows = o / c.index.groups;
            let mut w = vec![0.0; o * in_channels];
            let mut m = vec![false; o * in_channels];
            for i in 0..o {
                for (jj, &j) in c.index.group(i / rows).iter().enumerate() {
                    w[i * in_channels + j] += c.weight.data()[i * per + jj].as_f64().abs();
                    m[i * in_channels + j] = true;
                }
            }
            (w, m, c.groups(), o)
        }
    }
}

fn mean_alive(
    w: &[f64],
    m: &[bool],
    cols: usize,
    rows: std::ops::Range<usize>,
    c0: usize,
    c1: usize,
) -> f64 {
    let (mut sum, mut n) = (0.0, 0usize);
    for i in rows {
        for j in c0..c1 {
            if m[i * cols + j] {
                sum += w[i * cols + j];
                n += 1;
            }
        }
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

pub fn connectivity<T: Element>(model: &Model<T>) -> Result<ConnectivityReport> {
    let graph = &model.graph;
    let names: Vec<String> = graph.nodes.iter().map(|n| n.kind.to_string()).collect();
    let sources: Vec<String> = graph
        .nodes
        .iter()
        .filter(|n| !matches!(n.kind, NodeKind::Classifier))
        .map(|n| n.kind.to_string())
        .collect();
    let mut report = ConnectivityReport {
        groups: Vec::new(),
        targets: Vec::new(),
        sources: sources.clone(),
        block: Vec::new(),
    };
    let mut layers = model.layers.iter();
    for node in &graph.nodes {
        if !matches!(node.kind, NodeKind::Layer { .. }) {
            continue;
        }
        let layer = layers
            .next()
            .ok_or_else(|| Error::invalid("connectivity", "graph and model disagree"))?;
        let r = graph.input_channels(node);
        let (w, m, groups, o) = dense_view(&layer.conv1, r);
        let per = o / groups;
        let target = node.kind.to_string();
        let mut row = vec![None; sources.len()];
        for (src, off, count) in graph.channel_ranges(node) {
            for g in 0..groups {
                report.groups.push(GroupStrength {
                    target: target.clone(),
                    group: g,
                    source: names[src].clone(),
                    strength: mean_alive(&w, &m, r, g * per..(g + 1) * per, off, off + count),
                });
            }
            let col = sources
                .iter()
                .position(|s| *s == names[src])
                .expect("source is a non-classifier node");
            row[col] = Some(mean_alive(&w, &m, r, 0..o, off, off + count));
        }
        report.targets.push(target);
        report.block.push(row);
    }
    if report.targets.is_empty() {
        return Err(Error::invalid(
            "connectivity",
            "model has no 1x1 learned group convolutions",
        ));
    }
    Ok(report)
}

impl ConnectivityReport {
    /// Defined entries of the per-layer matrix, row-major.
    pub fn block_values(&self) -> Vec<f64> {
        self.block.iter().flatten().filter_map(|v| *v).collect()
    }

    /// Delimited text: a per-group section then a per-layer matrix.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        s.push_str("# connectivity strength: mean |w| over unmasked 1x1 weights\n");
        s.push_str("# section group\n");
        s.push_str("target,group,source,strength\n");
        for g in &self.groups {
            let _ = writeln!(s, "{},{},{},{}", g.target, g.group, g.source, g.strength);
        }
        s.push_str("# section block\n");
        s.push_str("# rows: target layer; columns: source feature maps; empty = no edge\n");
        let _ = writeln!(s, "target,{}", self.sources.join(","));
        for (t, row) in self.targets.iter().zip(&self.block) {
            let cells: Vec<String> = row
                .iter()
                .map(|v| v.map_or(String::new(), |x| x.to_string()))
                .collect();
            let _ = writeln!(s, "{t},{}", cells.join(","));
        }
        s
    }
}

/// Pearson correlation; `None` for fewer than two points or zero variance.
pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return None;
    }
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return None;
    }
    Some(sab / (saa * sbb).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::{build_model, ModelConfig};
    use crate::convert::convert_model;

    fn small() -> ModelConfig {
        let mut c = ModelConfig::cifar_lgc_small();
        c.block_layers = vec![2, 2];
        c.input_resolution = 8;
        c
    }

    #[test]
    fn pearson_basics() {
        assert!((pearson(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]).unwrap() - 1.0).abs() < 1e-12);
        assert!((pearson(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-12);
        assert_eq!(pearson(&[1.0, 1.0], &[1.0, 2.0]), None);
    }

    #[test]
    fn pruned_sources_have_zero_strength() {
        let mut m = build_model::<f64>(&small(), 1).unwrap();
        // Stem columns of the second layer start at zero, so all of them are pruned.
        if let Pointwise::Learned(l) = &mut m.layers[1].conv1 {
            let r = l.in_channels();
            for i in 0..l.out_channels() {
                for j in 0..16 {
                    l.weight.data_mut()[i * r + j] = 0.0;
                }
            }
        }
        m.condense_fully().unwrap();
        let rep = connectivity(&m).unwrap();
        let stem: Vec<&GroupStrength> = rep
            .groups
            .iter()
            .filter(|g| g.target == "b1l2" && g.source == "stem")
            .collect();
        assert_eq!(stem.len(), 4);
        assert!(stem.iter().all(|g| g.strength == 0.0));
        assert_eq!(rep.block[1][0], Some(0.0));
        let converted = convert_model(&m).unwrap();
        assert_eq!(connectivity(&converted).unwrap(), rep);
    }

    #[test]
    fn unpruned_model_has_no_zeros() {
        let m = build_model::<f64>(&small(), 2).unwrap();
        let rep = connectivity(&m).unwrap();
        assert!(rep.groups.iter().all(|g| g.strength > 0.0));
        assert_eq!(rep.targets.len(), 4);
        let text = rep.to_text();
        assert!(text.contains("# section group") && text.contains("# section block"));
        assert_eq!(rep.block_values().len(), 1 + 2 + 3 + 4);
    }
}
