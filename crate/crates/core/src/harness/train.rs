//! Training loop with on-the-fly condensation, and the prune-after-training
//! baseline.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::arch::{build_model, parse_pairs, ForwardCtx, FreshBinder, Model, ModelConfig};
use crate::autograd::Graph;
use crate::error::{Error, Result};
use crate::harness::data::{Dataset, DatasetName};
use crate::lgc::{apply_group_lasso_to_loss, cosine_lr, CondensationSchedule};
use crate::optim::OptimizerState;
use crate::tensor::{DType, Element};

/// Model plus optimization settings.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub dataset: DatasetName,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lambda_lasso: f64,
    /// Keep the group lasso on after the condensing stages.
    pub lasso_all_epochs: bool,
    pub decay_norm_params: bool,
    pub seed: u64,
    /// 1-based epoch after which the classifier is pruned; defaults to the
    /// end of the condensing window when `fc_condense_factor > 1`.
    pub fc_condense_epoch: Option<usize>,
    pub train_subset: Option<usize>,
    pub test_subset: Option<usize>,
    pub dtype: DType,
}

impl TrainConfig {
    pub fn new(model: ModelConfig) -> Self {
        TrainConfig {
            model,
            dataset: DatasetName::Mnist,
            epochs: 24,
            batch_size: 64,
            lr0: 0.1,
            momentum: 0.9,
            weight_decay: 1e-4,
            lambda_lasso: 1e-5,
            lasso_all_epochs: false,
            decay_norm_params: true,
            seed: 0,
            fc_condense_epoch: None,
            train_subset: None,
            test_subset: None,
            dtype: DType::F32,
        }
    }

    /// Adapts the model input to a dataset's channels and resolution.
    pub fn fit_to(&mut self, data: &Dataset) {
        self.model.in_channels = data.channels();
        self.model.input_resolution = data.resolution();
        self.model.num_classes = data.num_classes;
    }

    pub fn schedule(&self) -> Result<CondensationSchedule> {
        CondensationSchedule::new(self.epochs, self.model.condense_factor, self.model.groups)
    }

    pub fn fc_epoch(&self) -> Result<Option<usize>> {
        if self.model.fc_condense_factor <= 1 {
            return Ok(None);
        }
        Ok(Some(match self.fc_condense_epoch {
            Some(e) => e,
            None => self.schedule()?.condensing_epochs().max(1),
        }))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidConfig(
                "epochs and batch_size must be >= 1".into(),
            ));
        }
        if self.lambda_lasso < 0.0 || self.lr0 < 0.0 {
            return Err(Error::InvalidConfig(
                "lr0 and lambda_lasso must be >= 0".into(),
            ));
        }
        self.schedule()?;
        if let Some(e) = self.fc_epoch()? {
            if e == 0 || e > self.epochs {
                return Err(Error::InvalidConfig(format!(
                    "fc_condense_epoch {e} outside [1, {}]",
                    self.epochs
                )));
            }
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<V: std::str::FromStr>(key: &str, value: &str) -> Result<V> {
            value
                .parse()
                .map_err(|_| Error::InvalidConfig(format!("{key}: cannot parse '{value}'")))
        }
        fn opt<V: std::str::FromStr>(key: &str, value: &str) -> Result<Option<V>> {
            if value == "none" {
                Ok(None)
            } else {
                num(key, value).map(Some)
            }
        }
        match key {
            "dataset" => self.dataset = value.parse()?,
            "epochs" => self.epochs = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "lr0" => self.lr0 = num(key, value)?,
            "momentum" => self.momentum = num(key, value)?,
            "weight_decay" => self.weight_decay = num(key, value)?,
            "lambda_lasso" => self.lambda_lasso = num(key, value)?,
            "lasso_all_epochs" => self.lasso_all_epochs = num(key, value)?,
            "decay_norm_params" => self.decay_norm_params = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "fc_condense_epoch" => self.fc_condense_epoch = opt(key, value)?,
            "train_subset" => self.train_subset = opt(key, value)?,
            "test_subset" => self.test_subset = opt(key, value)?,
            "dtype" => {
                self.dtype = DType::parse(value)
                    .ok_or_else(|| Error::InvalidConfig(format!("unknown dtype '{value}'")))?
            }
            _ => {
                if !self.model.set(key, value)? {
                    return Err(Error::InvalidConfig(format!("unknown key '{key}'")));
                }
            }
        }
        Ok(())
    }

    /// Flat `key = value` text; an optional `preset` key selects the base model.
    pub fn parse_kv(text: &str) -> Result<Self> {
        let pairs = parse_pairs(text)?;
        let model = match pairs.iter().find(|(k, _)| k == "preset") {
            Some((_, p)) => ModelConfig::preset(p)
                .ok_or_else(|| Error::InvalidConfig(format!("unknown preset '{p}'")))?,
            None => ModelConfig::cifar_lgc_small(),
        };
        let mut cfg = TrainConfig::new(model);
        for (k, v) in &pairs {
            if k != "preset" {
                cfg.set(k, v)?;
            }
        }
        Ok(cfg)
    }

    pub fn to_kv(&self) -> String {
        fn opt<V: std::fmt::Display>(v: &Option<V>) -> String {
            v.as_ref()
                .map_or_else(|| "none".to_string(), |x| x.to_string())
        }
        let mut s = self.model.to_kv();
        let _ = write!(
            s,
            "dataset = {}\nepochs = {}\nbatch_size = {}\nlr0 = {}\nmomentum = {}\nweight_decay = {}\n\
             lambda_lasso = {}\nlasso_all_epochs = {}\ndecay_norm_params = {}\nseed = {}\n\
             fc_condense_epoch = {}\ntrain_subset = {}\ntest_subset = {}\ndtype = {}\n",
            self.dataset,
            self.epochs,
            self.batch_size,
            self.lr0,
            self.momentum,
            self.weight_decay,
            self.lambda_lasso,
            self.lasso_all_epochs,
            self.decay_norm_params,
            self.seed,
            opt(&self.fc_condense_epoch),
            opt(&self.train_subset),
            opt(&self.test_subset),
            self.dtype,
        );
        s
    }
}

/// One line of the per-epoch log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRow {
    /// 1-based count of completed epochs.
    pub epoch: usize,
    /// Learning rate of the last step of the epoch.
    pub lr: f64,
    /// Mean cross-entropy over the epoch's batches (penalty excluded).
    pub train_loss: f64,
    pub test_err: f64,
    pub test_loss: f64,
    /// Unmasked fraction of learned-group-conv weights, after any pruning at
    /// the end of the epoch.
    pub surviving_fraction: f64,
}

pub const LOG_HEADER: &str = "epoch\tlr\ttrain_loss\ttest_err\ttest_loss\tsurviving_fraction";

impl LogRow {
    pub fn to_tsv(&self) -> String {
        format!(
            "{}\t{:e}\t{:e}\t{:e}\t{:e}\t{:e}",
            self.epoch,
            self.lr,
            self.train_loss,
            self.test_err,
            self.test_loss,
            self.surviving_fraction
        )
    }

    pub fn parse_tsv(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.split('\t').collect();
        let bad = || Error::InvalidConfig(format!("malformed log row '{line}'"));
        if f.len() != 6 {
            return Err(bad());
        }
        let x = |i: usize| f[i].parse::<f64>().map_err(|_| bad());
        Ok(LogRow {
            epoch: f[0].parse().map_err(|_| bad())?,
            lr: x(1)?,
            train_loss: x(2)?,
            test_err: x(3)?,
            test_loss: x(4)?,
            surviving_fraction: x(5)?,
        })
    }
}

pub fn format_log(rows: &[LogRow]) -> String {
    let mut s = String::from(LOG_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&r.to_tsv());
        s.push('\n');
    }
    s
}

pub fn surviving_fraction<T: Element>(model: &Model<T>) -> f64 {
    let (alive, total) = model.lgc_survivors();
    if total == 0 {
        1.0
    } else {
        alive as f64 / total as f64
    }
}

/// `(error rate, mean cross-entropy)` in eval mode.
pub fn evaluate<T: Element>(
    model: &Model<T>,
    data: &Dataset,
    batch_size: usize,
) -> Result<(f64, f64)> {
    let mut wrong = 0;
    let mut loss = 0.0;
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let (x, labels) = data.batch::<T, ChaCha8Rng>(chunk, None)?;
        let mut g = Graph::new();
        let xv = g.constant(x);
        let mut ctx = ForwardCtx::eval();
        let logits = model.forward(&mut g, xv, &mut ctx, &mut FreshBinder::default())?;
        let preds = g.value(logits).argmax_rows();
        wrong += preds.iter().zip(&labels).filter(|(p, l)| p != l).count();
        let l = g.softmax_cross_entropy(logits, &labels)?;
        loss += g.value(l).data()[0].as_f64() * chunk.len() as f64;
    }
    let n = data.len().max(1) as f64;
    Ok((wrong as f64 / n, loss / n))
}

/// Eval-mode predictions for every example.
pub fn predict_all<T: Element>(
    model: &Model<T>,
    data: &Dataset,
    batch_size: usize,
) -> Result<Vec<usize>> {
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut out = Vec::with_capacity(data.len());
    for chunk in idx.chunks(batch_size.max(1)) {
        let (x, _) = data.batch::<T, ChaCha8Rng>(chunk, None)?;
        out.extend(model.predict(&x)?.argmax_rows());
    }
    Ok(out)
}

/// RNG driving shuffling, augmentation and dropout of one epoch.
pub fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    rng
}

/// What the epoch loop does besides plain SGD.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    /// Group lasso and pruning at the stage boundaries.
    Condensing,
    /// No pruning and no group lasso.
    Plain,
}

/// Training state that survives between epochs.
#[derive(Debug, Clone)]
pub struct Trainer<T> {
    pub config: TrainConfig,
    pub model: Model<T>,
    pub optimizer: OptimizerState<T>,
    pub phase: Phase,
    /// Completed epochs, counted over the whole run.
    pub epoch: usize,
    /// Epoch at which the current cosine schedule started.
    pub phase_start: usize,
    pub log: Vec<LogRow>,
}

impl<T: Element> Trainer<T> {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let model = build_model(&config.model, config.seed)?;
        let mut optimizer = OptimizerState::new(config.momentum, config.weight_decay)?;
        optimizer.decay_norm_params = config.decay_norm_params;
        Ok(Trainer {
            config,
            model,
            optimizer,
            phase: Phase::Condensing,
            epoch: 0,
            phase_start: 0,
            log: Vec::new(),
        })
    }

    fn batches_per_epoch(&self, data: &Dataset) -> usize {
        data.len().div_ceil(self.config.batch_size)
    }

    /// Trains one epoch, applies any pruning due at its end, evaluates on
    /// `test` and appends the log row.
    pub fn run_epoch(&mut self, train: &Dataset, test: &Dataset) -> Result<LogRow> {
        let cfg = &self.config;
        let schedule = cfg.schedule()?;
        let e = self.epoch;
        let local = e - self.phase_start;
        if local >= cfg.epochs {
            return Err(Error::Schedule(format!(
                "epoch {} beyond the {}-epoch schedule",
                e + 1,
                cfg.epochs
            )));
        }
        let nb = self.batches_per_epoch(train);
        let total_steps = cfg.epochs * nb;
        let lasso = self.phase == Phase::Condensing
            && cfg.lambda_lasso > 0.0
            && (cfg.lasso_all_epochs || schedule.is_condensing(local));
        let mut rng = epoch_rng(cfg.seed, e);
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut lr = cfg.lr0;
        let lambda = cfg.lambda_lasso;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            lr = cosine_lr(local * nb + b, total_steps, cfg.lr0)?;
            let (x, labels) = train.batch::<T, _>(chunk, Some(&mut rng))?;
            let mut g = Graph::new();
            let xv = g.constant(x);
            let mut binder = FreshBinder::default();
            let (loss, stats) = {
                let mut ctx = ForwardCtx::train(Some(&mut rng as &mut dyn RngCore), lasso);
                let logits = self.model.forward(&mut g, xv, &mut ctx, &mut binder)?;
                let ce = g.softmax_cross_entropy(logits, &labels)?;
                let total = apply_group_lasso_to_loss(&mut g, ce, &ctx.lasso_terms, lambda)?;
                let ce_value = g.value(ce).data()[0].as_f64();
                if !ce_value.is_finite() || !g.value(total).data()[0].as_f64().is_finite() {
                    return Err(Error::NonFinite(format!(
                        "loss at epoch {} step {}",
                        e + 1,
                        b
                    )));
                }
                loss_sum += ce_value;
                (total, std::mem::take(&mut ctx.bn_stats))
            };
            let mut grads = g.backward(loss)?;
            let mut params = self.model.params_mut();
            if params.len() != binder.vars.len() {
                return Err(Error::ShapeMismatch {
                    op: "train step",
                    left_name: "parameters",
                    left: params.len(),
                    right_name: "graph leaves",
                    right: binder.vars.len(),
                });
            }
            for (p, &v) in params.iter_mut().zip(&binder.vars) {
                p.tensor.grad = grads.take(v);
            }
            self.optimizer.learning_rate = lr;
            self.optimizer.step(&mut params)?;
            drop(params);
            self.model.update_running_stats(&stats)?;
        }
        if self.phase == Phase::Condensing {
            if let Some(stage) = schedule.tick(local + 1) {
                self.model.condense(stage)?;
            }
            if cfg.fc_epoch()? == Some(local + 1) {
                self.model.condense_classifier()?;
            }
        }
        let (test_err, test_loss) = evaluate(&self.model, test, 256)?;
        let row = LogRow {
            epoch: e + 1,
            lr,
            train_loss: loss_sum / nb as f64,
            test_err,
            test_loss,
            surviving_fraction: surviving_fraction(&self.model),
        };
        self.epoch += 1;
        self.log.push(row);
        Ok(row)
    }

    /// Runs until `stop_at` completed epochs (default: end of the phase),
    /// calling `on_epoch` after each one.
    pub fn run(
        &mut self,
        train: &Dataset,
        test: &Dataset,
        stop_at: Option<usize>,
        mut on_epoch: impl FnMut(&Self, &LogRow) -> Result<()>,
    ) -> Result<()> {
        let end = self.phase_start + self.config.epochs;
        let stop = stop_at.map_or(end, |s| s.min(end));
        while self.epoch < stop {
            let row = self.run_epoch(train, test)?;
            on_epoch(self, &row)?;
        }
        Ok(())
    }
}

/// Result of the prune-after-training baseline.
#[derive(Debug, Clone)]
pub struct BaselineReport<T> {
    pub model: Model<T>,
    /// `2M` rows: dense training then fine-tuning.
    pub log: Vec<LogRow>,
    pub pre_prune_eval_loss: f64,
    pub post_prune_eval_loss: f64,
    pub pre_prune_eval_err: f64,
    pub post_prune_eval_err: f64,
}

/// Trains without pruning for `M` epochs, prunes every learned group
/// convolution to its final sparsity in one shot, then fine-tunes for `M`
/// epochs with a fresh cosine schedule and fresh momentum.
pub fn traditional_prune_baseline<T: Element>(
    config: &TrainConfig,
    train: &Dataset,
    test: &Dataset,
    mut on_epoch: impl FnMut(&LogRow),
) -> Result<BaselineReport<T>> {
    let mut tr = Trainer::<T>::new(config.clone())?;
    tr.phase = Phase::Plain;
    tr.run(train, test, None, |_, r| {
        on_epoch(r);
        Ok(())
    })?;
    let (pre_err, pre_loss) = evaluate(&tr.model, test, 256)?;
    tr.model.condense_fully()?;
    let (post_err, post_loss) = evaluate(&tr.model, test, 256)?;
    let mut optimizer = OptimizerState::new(config.momentum, config.weight_decay)?;
    optimizer.decay_norm_params = config.decay_norm_params;
    tr.optimizer = optimizer;
    tr.phase_start = tr.epoch;
    tr.run(train, test, None, |_, r| {
        on_epoch(r);
        Ok(())
    })?;
    Ok(BaselineReport {
        model: tr.model,
        log: tr.log,
        pre_prune_eval_loss: pre_loss,
        post_prune_eval_loss: post_loss,
        pre_prune_eval_err: pre_err,
        post_prune_eval_err: post_err,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::data::Split;

    pub(crate) fn toy_data(n: usize, seed: u64) -> Dataset {
        // Two classes separated by the sign of the mean pixel.
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut images = Vec::new();
        let mut labels = Vec::new();
        for i in 0..n {
            let label = i % 2;
            let shift = if label == 0 { -0.8 } else { 0.8 };
            for _ in 0..16 {
                images.push(shift + 0.5 * (rand::Rng::random::<f32>(&mut rng) - 0.5));
            }
            labels.push(label);
        }
        Dataset {
            images,
            shape: [n, 1, 4, 4],
            labels,
            num_classes: 2,
            split: Split::Train,
            augment: false,
        }
    }

    fn toy_config() -> TrainConfig {
        let mut m = ModelConfig::cifar_lgc_small();
        m.block_layers = vec![2, 2];
        m.in_channels = 1;
        m.input_resolution = 4;
        m.num_classes = 2;
        let mut c = TrainConfig::new(m);
        c.epochs = 6;
        c.batch_size = 8;
        c.lr0 = 0.05;
        c.seed = 11;
        c
    }

    #[test]
    fn kv_roundtrip() {
        let mut c = toy_config();
        c.fc_condense_epoch = Some(3);
        assert_eq!(TrainConfig::parse_kv(&c.to_kv()).unwrap(), c);
        assert!(TrainConfig::parse_kv("nonsense = 3").is_err());
    }

    #[test]
    fn log_row_roundtrip() {
        let r = LogRow {
            epoch: 3,
            lr: 0.05,
            train_loss: 0.1234567891,
            test_err: 0.02,
            test_loss: 0.3,
            surviving_fraction: 0.75,
        };
        assert_eq!(LogRow::parse_tsv(&r.to_tsv()).unwrap(), r);
    }

    #[test]
    fn condensing_run_hits_stage_fractions() {
        let data = toy_data(32, 1);
        let mut tr = Trainer::<f64>::new(toy_config()).unwrap();
        tr.run(&data, &data, None, |_, _| Ok(())).unwrap();
        let fr: Vec<f64> = tr.log.iter().map(|r| r.surviving_fraction).collect();
        assert_eq!(fr, vec![0.75, 0.5, 0.25, 0.25, 0.25, 0.25]);
        assert!(tr.model.lgc_layers().all(|l| l.is_fully_condensed()));
        assert!(tr.log.last().unwrap().lr < 1e-3);
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let data = toy_data(24, 2);
        let run = || {
            let mut c = toy_config();
            c.epochs = 2;
            c.model.condense_factor = 1;
            let mut tr = Trainer::<f64>::new(c).unwrap();
            tr.run(&data, &data, None, |_, _| Ok(())).unwrap();
            tr.model.stem.data().to_vec()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn baseline_runs_two_phases() {
        let data = toy_data(16, 3);
        let mut c = toy_config();
        c.epochs = 2;
        c.model.condense_factor = 2;
        let rep = traditional_prune_baseline::<f64>(&c, &data, &data, |_| {}).unwrap();
        assert_eq!(rep.log.len(), 4);
        assert_eq!(rep.log[1].surviving_fraction, 1.0);
        assert_eq!(rep.log[2].surviving_fraction, 0.5);
    }
}
