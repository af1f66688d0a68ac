//! Conversion of a condensed training-form model into the test form: an
//! index layer that gathers each group's surviving input channels followed
//! by a standard group convolution.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::arch::{Classifier, Form, Model, Pointwise};
use crate::error::{Error, Result};
use crate::lgc::LearnedGroupConv;
use crate::tensor::{Element, Tensor};

/// Channel gather: output channel `g·per_group + j` reads input channel
/// `gather[g·per_group + j]`. An input channel may appear in several groups.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IndexLayer {
    pub gather: Vec<usize>,
    pub groups: usize,
    pub per_group: usize,
}

impl IndexLayer {
    pub fn group(&self, g: usize) -> &[usize] {
        &self.gather[g * self.per_group..(g + 1) * self.per_group]
    }
}

/// Builds the gather list of a fully condensed layer, surviving columns in
/// ascending order within each group.
pub fn build_index<T: Element>(lgc: &LearnedGroupConv<T>) -> Result<IndexLayer> {
    if !lgc.is_fully_condensed() {
        return Err(Error::NotCondensed(format!(
            "learned group conv at stage {} of {}",
            lgc.stage,
            lgc.condense_factor.saturating_sub(1)
        )));
    }
    let mut gather = Vec::new();
    let mut per_group = None;
    for g in 0..lgc.groups {
        let cols = lgc.surviving_columns(g)?;
        match per_group {
            None => per_group = Some(cols.len()),
            Some(p) if p != cols.len() => {
                return Err(Error::ShapeMismatch {
                    op: "build_index",
                    left_name: "group 0 survivors",
                    left: p,
                    right_name: "later group survivors",
                    right: cols.len(),
                })
            }
            _ => {}
        }
        gather.extend(cols);
    }
    Ok(IndexLayer {
        gather,
        groups: lgc.groups,
        per_group: per_group.unwrap_or(0),
    })
}

/// Packs the surviving weights into a `[O, per_group, 1, 1]` group-conv weight.
pub fn extract_weights<T: Element>(
    lgc: &LearnedGroupConv<T>,
    index: &IndexLayer,
) -> Result<Tensor<T>> {
    let (o, r) = (lgc.out_channels(), lgc.in_channels());
    let rows = o / index.groups;
    let w = lgc.weight.data();
    let mut out = Vec::with_capacity(o * index.per_group);
    for i in 0..o {
        for &j in index.group(i / rows) {
            out.push(w[i * r + j]);
        }
    }
    Tensor::from_vec(&[o, index.per_group, 1, 1], out)
}

/// Test-form 1×1 convolution.
#[derive(Debug, Clone)]
pub struct CondensedGroupConv<T> {
    pub index: IndexLayer,
    /// `[O, per_group, 1, 1]`.
    pub weight: Tensor<T>,
}

impl<T: Element> CondensedGroupConv<T> {
    pub fn from_learned(lgc: &LearnedGroupConv<T>) -> Result<Self> {
        let index = build_index(lgc)?;
        let weight = extract_weights(lgc, &index)?;
        Ok(CondensedGroupConv { index, weight })
    }

    pub fn groups(&self) -> usize {
        self.index.groups
    }

    pub fn cast<U: Element>(&self) -> CondensedGroupConv<U> {
        CondensedGroupConv {
            index: self.index.clone(),
            weight: self.weight.cast(),
        }
    }
}

/// Test-form classifier: gather of surviving features, then a smaller linear layer.
#[derive(Debug, Clone)]
pub struct CondensedLinear<T> {
    pub index: IndexLayer,
    /// `[out, kept]`.
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Element> CondensedLinear<T> {
    pub fn from_learned(lgc: &LearnedGroupConv<T>, bias: &Tensor<T>) -> Result<Self> {
        let index = build_index(lgc)?;
        let packed = extract_weights(lgc, &index)?;
        let weight = packed.reshape(&[lgc.out_channels(), index.per_group])?;
        Ok(CondensedLinear {
            index,
            weight,
            bias: bias.clone(),
        })
    }

    pub fn cast<U: Element>(&self) -> CondensedLinear<U> {
        CondensedLinear {
            index: self.index.clone(),
            weight: self.weight.cast(),
            bias: self.bias.cast(),
        }
    }
}

/// Replaces every learned group convolution (and a pruned classifier) with
/// its index-layer form. All other parameters are copied.
pub fn convert_model<T: Element>(model: &Model<T>) -> Result<Model<T>> {
    if model.form == Form::Test {
        return Err(Error::AlreadyConverted);
    }
    if let Some(i) = model.lgc_layers().position(|l| !l.is_fully_condensed()) {
        let l = model.lgc_layers().nth(i).expect("position is in range");
        return Err(Error::NotCondensed(format!(
            "layer {i} is at stage {} of {}",
            l.stage,
            l.condense_factor - 1
        )));
    }
    if !model.fc_condensed() {
        return Err(Error::NotCondensed("classifier has not been pruned".into()));
    }
    let mut out = model.clone();
    out.form = Form::Test;
    for layer in &mut out.layers {
        if let Pointwise::Learned(lgc) = &layer.conv1 {
            layer.conv1 = Pointwise::Condensed(CondensedGroupConv::from_learned(lgc)?);
        }
    }
    if let Classifier::Dense { lgc, bias } = &out.classifier {
        if lgc.stage > 0 {
            out.classifier = Classifier::Condensed(CondensedLinear::from_learned(lgc, bias)?);
        }
    }
    Ok(out)
}

/// Outcome of comparing two models on the same random inputs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EquivalenceReport {
    pub inputs: usize,
    pub max_abs_diff: f64,
    pub argmax_agree: usize,
}

impl EquivalenceReport {
    pub fn argmax_identical(&self) -> bool {
        self.argmax_agree == self.inputs
    }
}

/// Runs both models in eval mode on `n_inputs` standard-normal images drawn
/// from `seed` and reports the largest logit difference.
pub fn verify_equivalence<T: Element>(
    a: &Model<T>,
    b: &Model<T>,
    n_inputs: usize,
    seed: u64,
) -> Result<EquivalenceReport> {
    let cfg = &a.config;
    if cfg.in_channels != b.config.in_channels || cfg.input_resolution != b.config.input_resolution
    {
        return Err(Error::invalid(
            "verify_equivalence",
            "models take different inputs",
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (c, r) = (cfg.in_channels, cfg.input_resolution);
    let mut report = EquivalenceReport {
        inputs: 0,
        max_abs_diff: 0.0,
        argmax_agree: 0,
    };
    const BATCH: usize = 16;
    let mut done = 0;
    while done < n_inputs {
        let n = BATCH.min(n_inputs - done);
        let x = Tensor::<T>::randn(&[n, c, r, r], 1.0, &mut rng);
        let ya = a.predict(&x)?;
        let yb = b.predict(&x)?;
        ya.check_finite("verify_equivalence")?;
        yb.check_finite("verify_equivalence")?;
        report.max_abs_diff = report.max_abs_diff.max(ya.max_abs_diff(&yb)?);
        report.argmax_agree += ya
            .argmax_rows()
            .iter()
            .zip(yb.argmax_rows())
            .filter(|(p, q)| **p == *q)
            .count();
        done += n;
    }
    report.inputs = n_inputs;
    Ok(report)
}
