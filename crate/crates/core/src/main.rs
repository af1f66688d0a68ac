use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use condense::arch::{Form, ModelConfig};
use condense::convert::{convert_model, verify_equivalence};
use condense::harness::checkpoint::{peek_dtype, Checkpoint};
use condense::harness::connectivity::connectivity;
use condense::harness::data::{default_data_dir, load_dataset, DatasetName};
use condense::harness::train::{
    format_log, traditional_prune_baseline, LogRow, TrainConfig, Trainer, LOG_HEADER,
};
use condense::metrics::{count_config, count_model};
use condense::{DType, Element};

#[derive(Parser)]
#[command(
    name = "condense",
    version,
    about = "Train, condense and convert CondenseNet models"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train with on-the-fly condensation; writes a checkpoint and a log.
    Train(TrainArgs),
    /// Convert a condensed training-form checkpoint to the test form.
    Convert {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Compare a training-form and a test-form checkpoint on random inputs.
    Verify {
        #[arg(long = "train-form")]
        train_form: PathBuf,
        #[arg(long = "test-form")]
        test_form: PathBuf,
        #[arg(long, default_value_t = 100)]
        inputs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Print parameter and multiply-add counts.
    Count {
        /// Preset name or config file.
        #[arg(long, conflicts_with = "checkpoint")]
        config: Option<String>,
        /// Count an existing checkpoint instead of a config.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        resolution: Option<usize>,
        /// Sets G, C and the 3×3 group count together.
        #[arg(long)]
        gc: Option<usize>,
        #[arg(long, default_value = "test")]
        form: String,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Write per-group and per-layer connection strengths.
    ExportConnectivity {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Train dense, prune once, fine-tune (2M epochs in total).
    PruneBaseline(TrainArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Preset name or config file.
    #[arg(long, default_value = "cifar-lgc-small")]
    config: String,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Data root holding `mnist/` or `cifar10/` (or the dataset directory itself).
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<String>,
    /// Training subset size (first k/10 examples per class).
    #[arg(long)]
    subset: Option<usize>,
    #[arg(long = "test-subset")]
    test_subset: Option<usize>,
    #[arg(long)]
    dtype: Option<String>,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Checkpoint path, rewritten after every epoch.
    #[arg(long, default_value = "run.ckpt")]
    out: PathBuf,
    /// Log path; defaults to the checkpoint path with `.log.tsv` appended.
    #[arg(long)]
    log: Option<PathBuf>,
    /// Continue from a training-form checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Stop once this many epochs are complete.
    #[arg(long = "stop-after")]
    stop_after: Option<usize>,
}

fn apply_sets(cfg: &mut TrainConfig, sets: &[String]) -> anyhow::Result<()> {
    for s in sets {
        let (k, v) = s
            .split_once('=')
            .with_context(|| format!("--set expects KEY=VALUE, got '{s}'"))?;
        cfg.set(k.trim(), v.trim())?;
    }
    Ok(())
}

fn load_config(spec: &str) -> anyhow::Result<TrainConfig> {
    if let Some(m) = ModelConfig::preset(spec) {
        return Ok(TrainConfig::new(m));
    }
    let path = Path::new(spec);
    if !path.exists() {
        bail!(
            "'{spec}' is neither a preset ({}) nor a config file",
            ModelConfig::PRESETS.join(", ")
        );
    }
    let text = fs::read_to_string(path).with_context(|| format!("reading {spec}"))?;
    Ok(TrainConfig::parse_kv(&text)?)
}

fn resolve_data(root: Option<&Path>, name: DatasetName) -> PathBuf {
    match root {
        Some(r) => {
            let nested = r.join(name.to_string());
            if nested.is_dir() {
                nested
            } else {
                r.to_path_buf()
            }
        }
        None => default_data_dir(name),
    }
}

fn build_train_config(args: &TrainArgs) -> anyhow::Result<TrainConfig> {
    let mut cfg = load_config(&args.config)?;
    apply_sets(&mut cfg, &args.set)?;
    if let Some(e) = args.epochs {
        cfg.epochs = e;
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(d) = &args.dataset {
        cfg.dataset = d.parse()?;
    }
    if args.subset.is_some() {
        cfg.train_subset = args.subset;
    }
    if args.test_subset.is_some() {
        cfg.test_subset = args.test_subset;
    }
    if let Some(d) = &args.dtype {
        cfg.dtype = DType::parse(d).with_context(|| format!("unknown dtype '{d}'"))?;
    }
    Ok(cfg)
}

fn log_path(args: &TrainArgs) -> PathBuf {
    args.log.clone().unwrap_or_else(|| {
        let mut p = args.out.clone().into_os_string();
        p.push(".log.tsv");
        PathBuf::from(p)
    })
}

fn print_row(r: &LogRow) {
    println!("{}", r.to_tsv());
}

fn train<T: Element>(args: &TrainArgs, baseline: bool) -> anyhow::Result<()> {
    let (mut trainer, cfg) = match &args.resume {
        Some(p) => {
            let ck = Checkpoint::<T>::load(p)?;
            let cfg = ck.config.clone();
            (Some(ck.into_trainer()?), cfg)
        }
        None => (None, build_train_config(args)?),
    };
    let dir = resolve_data(args.data.as_deref(), cfg.dataset);
    let (train_set, test_set) = load_dataset(cfg.dataset, &dir, cfg.train_subset, cfg.test_subset)
        .with_context(|| format!("loading {} from {}", cfg.dataset, dir.display()))?;
    let log = log_path(args);
    if baseline {
        let mut cfg = cfg;
        cfg.fit_to(&train_set);
        println!("{LOG_HEADER}");
        let rep = traditional_prune_baseline::<T>(&cfg, &train_set, &test_set, print_row)?;
        println!(
            "one-shot prune: eval loss {:.6} -> {:.6}, eval error {:.4} -> {:.4}",
            rep.pre_prune_eval_loss,
            rep.post_prune_eval_loss,
            rep.pre_prune_eval_err,
            rep.post_prune_eval_err
        );
        fs::write(&log, format_log(&rep.log))?;
        let epochs = rep.log.len();
        Checkpoint::from_model(cfg, rep.model, epochs, rep.log).save(&args.out)?;
        return Ok(());
    }
    let mut trainer = match trainer.take() {
        Some(t) => t,
        None => {
            let mut cfg = cfg;
            cfg.fit_to(&train_set);
            Trainer::<T>::new(cfg)?
        }
    };
    println!("{LOG_HEADER}");
    trainer.run(&train_set, &test_set, args.stop_after, |tr, row| {
        print_row(row);
        fs::write(&log, format_log(&tr.log))?;
        Checkpoint::from_trainer(tr).save(&args.out)?;
        Ok(())
    })?;
    fs::write(&log, format_log(&trainer.log))?;
    Checkpoint::from_trainer(&trainer).save(&args.out)?;
    Ok(())
}

fn convert<T: Element>(input: &Path, output: &Path) -> anyhow::Result<()> {
    let ck = Checkpoint::<T>::load(input)?;
    let test = convert_model(&ck.model)?;
    let before = count_model(&ck.model, ck.model.config.input_resolution)?;
    let after = count_model(&test, test.config.input_resolution)?;
    Checkpoint::from_model(ck.config, test, ck.epoch, ck.log).save(output)?;
    println!("params {} -> {}", before.params(), after.params());
    println!("flops {} -> {}", before.flops(), after.flops());
    Ok(())
}

fn verify<T: Element>(a: &Path, b: &Path, inputs: usize, seed: u64) -> anyhow::Result<bool> {
    let ma = Checkpoint::<T>::load(a)?.model;
    let mb = Checkpoint::<T>::load(b)?.model;
    let rep = verify_equivalence(&ma, &mb, inputs, seed)?;
    let ok = rep.max_abs_diff <= T::EQUIVALENCE_TOL && rep.argmax_identical();
    println!("inputs = {}", rep.inputs);
    println!("max_abs_diff = {:e}", rep.max_abs_diff);
    println!("tolerance = {:e}", T::EQUIVALENCE_TOL);
    println!("argmax_agreement = {}/{}", rep.argmax_agree, rep.inputs);
    println!("result = {}", if ok { "pass" } else { "fail" });
    Ok(ok)
}

fn count_checkpoint<T: Element>(path: &Path, resolution: Option<usize>) -> anyhow::Result<()> {
    let m = Checkpoint::<T>::load(path)?.model;
    let r = count_model(&m, resolution.unwrap_or(m.config.input_resolution))?;
    print!("{}", r.to_kv());
    Ok(())
}

fn export<T: Element>(ckpt: &Path, output: &Path) -> anyhow::Result<()> {
    let m = Checkpoint::<T>::load(ckpt)?.model;
    fs::write(output, connectivity(&m)?.to_text())?;
    Ok(())
}

macro_rules! by_dtype {
    ($dtype:expr, $f:ident ( $($arg:expr),* )) => {
        match $dtype {
            DType::F32 => $f::<f32>($($arg),*),
            DType::F64 => $f::<f64>($($arg),*),
        }
    };
}

fn run(cli: Cli) -> anyhow::Result<bool> {
    match cli.command {
        Command::Train(args) | Command::PruneBaseline(args)
            if args.resume.is_some() && args.dtype.is_some() =>
        {
            bail!("--dtype cannot be combined with --resume; the checkpoint fixes it")
        }
        Command::Train(args) => {
            let dtype = match &args.resume {
                Some(p) => peek_dtype(p)?,
                None => build_train_config(&args)?.dtype,
            };
            by_dtype!(dtype, train(&args, false))?;
        }
        Command::PruneBaseline(args) => {
            if args.resume.is_some() {
                bail!("prune-baseline does not support --resume");
            }
            let dtype = build_train_config(&args)?.dtype;
            by_dtype!(dtype, train(&args, true))?;
        }
        Command::Convert { input, output } => {
            by_dtype!(peek_dtype(&input)?, convert(&input, &output))?
        }
        Command::Verify {
            train_form,
            test_form,
            inputs,
            seed,
        } => {
            return by_dtype!(
                peek_dtype(&train_form)?,
                verify(&train_form, &test_form, inputs, seed)
            )
        }
        Command::Count {
            config,
            checkpoint,
            resolution,
            gc,
            form,
            set,
        } => {
            if let Some(p) = checkpoint {
                by_dtype!(peek_dtype(&p)?, count_checkpoint(&p, resolution))?;
                return Ok(true);
            }
            let mut cfg = load_config(config.as_deref().unwrap_or("cifar-lgc-small"))?;
            if let Some(n) = gc {
                cfg.model.groups = n;
                cfg.model.condense_factor = n;
                cfg.model.groups_3x3 = n;
            }
            apply_sets(&mut cfg, &set)?;
            let form: Form = form.parse()?;
            let res = resolution.unwrap_or(cfg.model.input_resolution);
            print!("{}", count_config(&cfg.model, form, res)?.to_kv());
        }
        Command::ExportConnectivity { checkpoint, output } => {
            by_dtype!(peek_dtype(&checkpoint)?, export(&checkpoint, &output))?
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return if usage {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
