//! Versioned binary checkpoints.
//!
//! ```text
//! b"CNDSCKPT" | u32 LE version | u32 LE header length | UTF-8 header | payload
//! ```
//!
//! The header is line oriented: scalar fields, the training configuration as
//! `config <key> = <value>` lines, log rows, condensing stages, then one
//! `tensor <name> <dtype> <shape>` line per payload entry in payload order.
//! Float tensors are stored little-endian in the checkpoint dtype; index
//! layers as little-endian `u32`.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::arch::{build_model, Classifier, Form, Model, Pointwise};
use crate::convert::{CondensedGroupConv, CondensedLinear, IndexLayer};
use crate::error::{Error, Result};
use crate::harness::train::{LogRow, Phase, TrainConfig, Trainer};
use crate::optim::OptimizerState;
use crate::tensor::{DType, Element, Tensor};

pub const MAGIC: &[u8; 8] = b"CNDSCKPT";
pub const VERSION: u32 = 1;

/// Everything needed to rebuild a model and, for training-form checkpoints,
/// to resume its run.
#[derive(Debug, Clone)]
pub struct Checkpoint<T> {
    pub config: TrainConfig,
    pub model: Model<T>,
    /// Completed epochs.
    pub epoch: usize,
    pub phase: Phase,
    pub phase_start: usize,
    pub log: Vec<LogRow>,
    pub velocity: Vec<Vec<T>>,
}

enum Slot<'a, T> {
    Float(&'a mut Tensor<T>),
    Index(&'a mut IndexLayer),
}

fn layer_names(config: &crate::arch::ModelConfig) -> Vec<String> {
    let mut out = Vec::new();
    for (m, &n) in config.block_layers.iter().enumerate() {
        for i in 0..n {
            out.push(format!("b{}l{}", m + 1, i + 1));
        }
    }
    out
}

fn bn_slots<'a, T>(
    prefix: &str,
    bn: &'a mut crate::arch::BatchNorm<T>,
    out: &mut Vec<(String, Slot<'a, T>)>,
) {
    out.push((format!("{prefix}.gamma"), Slot::Float(&mut bn.gamma)));
    out.push((format!("{prefix}.beta"), Slot::Float(&mut bn.beta)));
    out.push((
        format!("{prefix}.running_mean"),
        Slot::Float(&mut bn.running_mean),
    ));
    out.push((
        format!("{prefix}.running_var"),
        Slot::Float(&mut bn.running_var),
    ));
}

/// Every stored tensor of a model, in a fixed order.
fn slots<T: Element>(model: &mut Model<T>) -> Vec<(String, Slot<'_, T>)> {
    let names = layer_names(&model.config);
    let mut out = Vec::new();
    out.push(("stem.weight".to_string(), Slot::Float(&mut model.stem)));
    for (name, l) in names.iter().zip(model.layers.iter_mut()) {
        bn_slots(&format!("{name}.bn1"), &mut l.bn1, &mut out);
        match &mut l.conv1 {
            Pointwise::Learned(lgc) => {
                out.push((format!("{name}.conv1.weight"), Slot::Float(&mut lgc.weight)));
                out.push((format!("{name}.conv1.mask"), Slot::Float(&mut lgc.mask)));
            }
            Pointwise::Condensed(c) => {
                out.push((format!("{name}.conv1.weight"), Slot::Float(&mut c.weight)));
                out.push((format!("{name}.conv1.index"), Slot::Index(&mut c.index)));
            }
        }
        bn_slots(&format!("{name}.bn2"), &mut l.bn2, &mut out);
        out.push((format!("{name}.conv2.weight"), Slot::Float(&mut l.conv2)));
    }
    for (m, t) in model.transitions.iter_mut().enumerate() {
        bn_slots(&format!("t{}.bn", m + 1), &mut t.bn, &mut out);
        out.push((format!("t{}.conv.weight", m + 1), Slot::Float(&mut t.conv)));
    }
    bn_slots("final_bn", &mut model.final_bn, &mut out);
    match &mut model.classifier {
        Classifier::Dense { lgc, bias } => {
            out.push(("classifier.weight".into(), Slot::Float(&mut lgc.weight)));
            out.push(("classifier.mask".into(), Slot::Float(&mut lgc.mask)));
            out.push(("classifier.bias".into(), Slot::Float(bias)));
        }
        Classifier::Condensed(c) => {
            out.push(("classifier.weight".into(), Slot::Float(&mut c.weight)));
            out.push(("classifier.index".into(), Slot::Index(&mut c.index)));
            out.push(("classifier.bias".into(), Slot::Float(&mut c.bias)));
        }
    }
    out
}

fn shape_str(shape: &[usize]) -> String {
    if shape.is_empty() {
        return "scalar".into();
    }
    shape
        .iter()
        .map(|d| d.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

fn parse_shape(s: &str) -> Option<Vec<usize>> {
    if s == "scalar" {
        return Some(Vec::new());
    }
    s.split(',').map(|d| d.parse().ok()).collect()
}

impl<T: Element> Checkpoint<T> {
    pub fn from_trainer(tr: &Trainer<T>) -> Self {
        Checkpoint {
            config: tr.config.clone(),
            model: tr.model.clone(),
            epoch: tr.epoch,
            phase: tr.phase,
            phase_start: tr.phase_start,
            log: tr.log.clone(),
            velocity: tr.optimizer.velocities().to_vec(),
        }
    }

    /// A checkpoint holding only a model (no optimizer state).
    pub fn from_model(
        config: TrainConfig,
        model: Model<T>,
        epoch: usize,
        log: Vec<LogRow>,
    ) -> Self {
        Checkpoint {
            config,
            model,
            epoch,
            phase: Phase::Condensing,
            phase_start: 0,
            log,
            velocity: Vec::new(),
        }
    }

    pub fn into_trainer(self) -> Result<Trainer<T>> {
        if self.model.form == Form::Test {
            return Err(Error::AlreadyConverted);
        }
        self.config.validate()?;
        let mut optimizer = OptimizerState::new(self.config.momentum, self.config.weight_decay)?;
        optimizer.decay_norm_params = self.config.decay_norm_params;
        optimizer.set_velocities(self.velocity);
        Ok(Trainer {
            config: self.config,
            model: self.model,
            optimizer,
            phase: self.phase,
            epoch: self.epoch,
            phase_start: self.phase_start,
            log: self.log,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut model = self.model.clone();
        let mut header = String::new();
        let _ = writeln!(header, "form {}", model.form);
        let _ = writeln!(header, "dtype {}", T::DTYPE);
        let _ = writeln!(header, "epoch {}", self.epoch);
        let _ = writeln!(
            header,
            "phase {}",
            match self.phase {
                Phase::Condensing => "condensing",
                Phase::Plain => "plain",
            }
        );
        let _ = writeln!(header, "phase_start {}", self.phase_start);
        // Each epoch draws from stream `epoch` of a ChaCha8 generator seeded
        // with `seed`, so the next epoch starts at word 0 of the next stream.
        let _ = writeln!(
            header,
            "rng chacha8 seed {} stream {} word_pos 0",
            self.config.seed, self.epoch
        );
        for line in self.config.to_kv().lines() {
            let _ = writeln!(header, "config {line}");
        }
        for r in &self.log {
            let _ = writeln!(header, "log {}", r.to_tsv());
        }
        let names = layer_names(&model.config);
        for (name, l) in names.iter().zip(&model.layers) {
            if let Pointwise::Learned(lgc) = &l.conv1 {
                let _ = writeln!(header, "stage {name}.conv1 {}", lgc.stage);
            }
        }
        if let Classifier::Dense { lgc, .. } = &model.classifier {
            let _ = writeln!(header, "stage classifier {}", lgc.stage);
        }
        let mut payload = Vec::new();
        for (name, slot) in slots(&mut model) {
            match slot {
                Slot::Float(t) => {
                    let _ = writeln!(
                        header,
                        "tensor {name} {} {}",
                        T::DTYPE,
                        shape_str(t.shape())
                    );
                    for &v in t.data() {
                        v.write_le(&mut payload);
                    }
                }
                Slot::Index(ix) => {
                    let _ = writeln!(header, "tensor {name} u32 {},{}", ix.groups, ix.per_group);
                    for &i in &ix.gather {
                        payload.extend((i as u32).to_le_bytes());
                    }
                }
            }
        }
        for (i, v) in self.velocity.iter().enumerate() {
            let _ = writeln!(header, "tensor optim.velocity.{i} {} {}", T::DTYPE, v.len());
            for &x in v {
                x.write_le(&mut payload);
            }
        }
        let mut out = Vec::with_capacity(16 + header.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend(VERSION.to_le_bytes());
        out.extend((header.len() as u32).to_le_bytes());
        out.extend(header.as_bytes());
        out.extend(payload);
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::Format {
            path: path.display().to_string(),
            offset: 0,
            msg: format!("cannot read: {e}"),
        })?;
        Self::from_bytes(&bytes, &path.display().to_string())
    }

    pub fn from_bytes(bytes: &[u8], path: &str) -> Result<Self> {
        let err = |offset: usize, msg: String| Error::Format {
            path: path.to_string(),
            offset,
            msg,
        };
        let header = read_header(bytes, path)?;
        let payload_start = 16 + header.len();
        let mut fields: HashMap<&str, &str> = HashMap::new();
        let mut config_lines = String::new();
        let mut log = Vec::new();
        let mut stages: HashMap<String, usize> = HashMap::new();
        let mut tensors: Vec<(String, String, Vec<usize>)> = Vec::new();
        for line in header.lines() {
            let (key, rest) = line.split_once(' ').unwrap_or((line, ""));
            match key {
                "config" => {
                    config_lines.push_str(rest);
                    config_lines.push('\n');
                }
                "log" => log.push(LogRow::parse_tsv(rest)?),
                "stage" => {
                    let (name, s) = rest
                        .split_once(' ')
                        .ok_or_else(|| err(0, format!("malformed stage line '{line}'")))?;
                    let s = s
                        .parse()
                        .map_err(|_| err(0, format!("malformed stage line '{line}'")))?;
                    stages.insert(name.to_string(), s);
                }
                "tensor" => {
                    let parts: Vec<&str> = rest.split(' ').collect();
                    let shape = (parts.len() == 3).then(|| parse_shape(parts[2])).flatten();
                    let shape =
                        shape.ok_or_else(|| err(0, format!("malformed tensor line '{line}'")))?;
                    tensors.push((parts[0].to_string(), parts[1].to_string(), shape));
                }
                _ => {
                    fields.insert(key, rest);
                }
            }
        }
        let field = |k: &str| {
            fields
                .get(k)
                .copied()
                .ok_or_else(|| err(0, format!("header lacks '{k}'")))
        };
        let dtype = field("dtype")?;
        if dtype != T::DTYPE.name() {
            return Err(err(
                0,
                format!("checkpoint holds {dtype}, expected {}", T::DTYPE),
            ));
        }
        let form: Form = field("form")?.parse()?;
        let num = |k: &str| -> Result<usize> {
            field(k)?
                .parse()
                .map_err(|_| err(0, format!("bad value for '{k}'")))
        };
        let epoch = num("epoch")?;
        let phase_start = num("phase_start")?;
        let phase = match field("phase")? {
            "condensing" => Phase::Condensing,
            "plain" => Phase::Plain,
            p => return Err(err(0, format!("unknown phase '{p}'"))),
        };
        let config = TrainConfig::parse_kv(&config_lines)?;
        let mut model = build_model::<T>(&config.model, 0)?;
        model.form = form;
        let shapes: HashMap<&str, &Vec<usize>> =
            tensors.iter().map(|(n, _, s)| (n.as_str(), s)).collect();
        // Give condensed layers their stored shapes before filling them.
        let names = layer_names(&config.model);
        for (name, l) in names.iter().zip(model.layers.iter_mut()) {
            if let Some(ix) = shapes.get(format!("{name}.conv1.index").as_str()) {
                let w = shapes
                    .get(format!("{name}.conv1.weight").as_str())
                    .ok_or_else(|| err(0, format!("{name}.conv1.weight missing")))?;
                l.conv1 = Pointwise::Condensed(CondensedGroupConv {
                    index: index_placeholder(ix, path)?,
                    weight: Tensor::zeros(w),
                });
            } else if let Pointwise::Learned(lgc) = &mut l.conv1 {
                lgc.stage = *stages.get(&format!("{name}.conv1")).unwrap_or(&0);
            }
        }
        if let Some(ix) = shapes.get("classifier.index") {
            let w = shapes
                .get("classifier.weight")
                .ok_or_else(|| err(0, "classifier.weight missing".into()))?;
            model.classifier = Classifier::Condensed(CondensedLinear {
                index: index_placeholder(ix, path)?,
                weight: Tensor::zeros(w),
                bias: Tensor::zeros(&[config.model.num_classes]),
            });
        } else if let Classifier::Dense { lgc, .. } = &mut model.classifier {
            lgc.stage = *stages.get("classifier").unwrap_or(&0);
        }
        let mut offset = payload_start;
        let mut slot_list = slots(&mut model);
        let mut by_name: HashMap<String, usize> = HashMap::new();
        for (i, (n, _)) in slot_list.iter().enumerate() {
            by_name.insert(n.clone(), i);
        }
        let mut filled = vec![false; slot_list.len()];
        let mut velocity = Vec::new();
        for (name, dt, shape) in &tensors {
            let len: usize = shape.iter().product();
            if let Some(i) = name.strip_prefix("optim.velocity.") {
                if i.parse::<usize>().ok() != Some(velocity.len()) {
                    return Err(err(offset, format!("velocity buffer {i} out of order")));
                }
                velocity.push(read_floats::<T>(bytes, &mut offset, len, path)?);
                continue;
            }
            let idx = *by_name
                .get(name)
                .ok_or_else(|| err(offset, format!("unexpected tensor '{name}'")))?;
            match &mut slot_list[idx].1 {
                Slot::Float(t) => {
                    if dt != T::DTYPE.name() || t.shape() != &shape[..] {
                        return Err(err(
                            offset,
                            format!(
                                "tensor {name}: stored {dt} {shape:?}, model expects {} {:?}",
                                T::DTYPE,
                                t.shape()
                            ),
                        ));
                    }
                    let data = read_floats::<T>(bytes, &mut offset, len, path)?;
                    t.data_mut().copy_from_slice(&data);
                }
                Slot::Index(ix) => {
                    if dt != "u32" {
                        return Err(err(offset, format!("index {name} must be u32")));
                    }
                    let end = offset + 4 * len;
                    let raw = bytes.get(offset..end).ok_or_else(|| {
                        err(bytes.len(), format!("payload truncated in '{name}'"))
                    })?;
                    ix.gather = raw
                        .chunks_exact(4)
                        .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]) as usize)
                        .collect();
                    offset = end;
                }
            }
            filled[idx] = true;
        }
        if let Some(i) = filled.iter().position(|f| !f) {
            return Err(err(offset, format!("tensor '{}' missing", slot_list[i].0)));
        }
        drop(slot_list);
        if offset != bytes.len() {
            return Err(err(
                offset,
                format!("{} trailing bytes", bytes.len() - offset),
            ));
        }
        Ok(Checkpoint {
            config,
            model,
            epoch,
            phase,
            phase_start,
            log,
            velocity,
        })
    }
}

fn index_placeholder(shape: &[usize], path: &str) -> Result<IndexLayer> {
    if shape.len() != 2 {
        return Err(Error::Format {
            path: path.to_string(),
            offset: 0,
            msg: format!("index shape {shape:?} must be groups,per_group"),
        });
    }
    Ok(IndexLayer {
        gather: vec![0; shape[0] * shape[1]],
        groups: shape[0],
        per_group: shape[1],
    })
}

fn read_floats<T: Element>(
    bytes: &[u8],
    offset: &mut usize,
    len: usize,
    path: &str,
) -> Result<Vec<T>> {
    let end = *offset + len * T::BYTES;
    let raw = bytes.get(*offset..end).ok_or_else(|| Error::Format {
        path: path.to_string(),
        offset: bytes.len(),
        msg: format!("payload truncated: need {end} bytes"),
    })?;
    let out = raw.chunks_exact(T::BYTES).map(T::read_le).collect();
    *offset = end;
    Ok(out)
}

fn read_header<'a>(bytes: &'a [u8], path: &str) -> Result<&'a str> {
    let err = |offset: usize, msg: String| Error::Format {
        path: path.to_string(),
        offset,
        msg,
    };
    if bytes.len() < 16 {
        return Err(err(
            bytes.len(),
            "file shorter than the fixed preamble".into(),
        ));
    }
    if &bytes[..8] != MAGIC {
        return Err(err(0, "bad magic, not a checkpoint".into()));
    }
    let version = u32::from_le_bytes([bytes[8], bytes[9], bytes[10], bytes[11]]);
    if version != VERSION {
        return Err(err(
            8,
            format!("unsupported version {version}, expected {VERSION}"),
        ));
    }
    let len = u32::from_le_bytes([bytes[12], bytes[13], bytes[14], bytes[15]]) as usize;
    let raw = bytes
        .get(16..16 + len)
        .ok_or_else(|| err(bytes.len(), format!("header of {len} bytes truncated")))?;
    std::str::from_utf8(raw).map_err(|e| err(16 + e.valid_up_to(), "header is not UTF-8".into()))
}

/// Element type recorded in a checkpoint file.
pub fn peek_dtype(path: &Path) -> Result<DType> {
    let bytes = fs::read(path).map_err(|e| Error::Format {
        path: path.display().to_string(),
        offset: 0,
        msg: format!("cannot read: {e}"),
    })?;
    let p = path.display().to_string();
    let header = read_header(&bytes, &p)?;
    header
        .lines()
        .find_map(|l| l.strip_prefix("dtype "))
        .and_then(DType::parse)
        .ok_or_else(|| Error::Format {
            path: p,
            offset: 16,
            msg: "header lacks a valid dtype".into(),
        })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::ModelConfig;
    use crate::convert::convert_model;

    fn small_config() -> TrainConfig {
        let mut m = ModelConfig::cifar_lgc_small();
        m.block_layers = vec![2, 1];
        m.input_resolution = 4;
        m.in_channels = 1;
        m.fc_condense_factor = 2;
        let mut c = TrainConfig::new(m);
        c.epochs = 6;
        c
    }

    #[test]
    fn training_form_roundtrip() {
        let cfg = small_config();
        let mut tr = Trainer::<f32>::new(cfg.clone()).unwrap();
        tr.model.condense(1).unwrap();
        tr.epoch = 2;
        let mut ck = Checkpoint::from_trainer(&tr);
        ck.velocity = vec![vec![0.5; 3], vec![-1.0]];
        let bytes = ck.to_bytes();
        let back = Checkpoint::<f32>::from_bytes(&bytes, "mem").unwrap();
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back.epoch, 2);
        assert_eq!(back.model.lgc_layers().next().unwrap().stage, 1);
        assert_eq!(back.velocity, ck.velocity);
    }

    #[test]
    fn test_form_roundtrip() {
        let cfg = small_config();
        let mut m = build_model::<f64>(&cfg.model, 4).unwrap();
        m.condense_fully().unwrap();
        let t = convert_model(&m).unwrap();
        let ck = Checkpoint::from_model(cfg, t.clone(), 6, Vec::new());
        let back = Checkpoint::<f64>::from_bytes(&ck.to_bytes(), "mem").unwrap();
        assert_eq!(back.model.form, Form::Test);
        let x = Tensor::randn(&[2, 1, 4, 4], 1.0, &mut rand::rng());
        assert_eq!(back.model.predict(&x).unwrap(), t.predict(&x).unwrap());
    }

    #[test]
    fn corrupt_files_rejected() {
        let cfg = small_config();
        let tr = Trainer::<f32>::new(cfg).unwrap();
        let bytes = Checkpoint::from_trainer(&tr).to_bytes();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(
            Checkpoint::<f32>::from_bytes(&bad, "m"),
            Err(Error::Format { offset: 0, .. })
        ));
        let mut bad = bytes.clone();
        bad[8] = 9;
        assert!(matches!(
            Checkpoint::<f32>::from_bytes(&bad, "m"),
            Err(Error::Format { offset: 8, .. })
        ));
        assert!(Checkpoint::<f32>::from_bytes(&bytes[..bytes.len() - 3], "m").is_err());
        assert!(Checkpoint::<f64>::from_bytes(&bytes, "m").is_err());
    }
}
