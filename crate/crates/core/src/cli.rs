//! The `ibp` command line: `train`, `eval` and `demo-wrapping`.
//!
//! Settings come from flags, then an optional `--config` file of
//! `key=value` lines (keys are the long flag names with `_` for `-`), then
//! built-in defaults. The resolved set is written to `run_manifest.txt`,
//! which is itself a valid `--config` file.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt::{Display, Write as _};
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};

use crate::attack::AttackConfig;
use crate::checkpoint::Checkpoint;
use crate::data::{load_cifar10, load_mnist, synthetic, Dataset, Split};
use crate::error::{Error, Result};
use crate::interval::wrapping_demo;
use crate::loss::{LossConfig, Objective, PenaltyReduction};
use crate::metrics::EvalOptions;
use crate::network::{preset, Network};
use crate::optim::{OptimizerConfig, OptimizerKind};
use crate::trainer::{evaluate_network, run, Schedule, TrainConfig, Trainer};

pub const EXIT_OK: i32 = 0;
pub const EXIT_OTHER: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;

pub const MANIFEST_FILE: &str = "run_manifest.txt";

#[derive(Debug, Parser)]
#[command(name = "ibp", version, about = "Certified-robust training with interval bound propagation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a network and write metrics, checkpoints and a run manifest.
    Train(TrainArgs),
    /// Report test, PGD and verified error of a checkpoint.
    Eval(EvalArgs),
    /// Show interval growth under repeated 45 degree rotations.
    DemoWrapping(DemoArgs),
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// mnist, cifar10 or synthetic.
    #[arg(long)]
    pub dataset: Option<String>,
    /// Directory holding the dataset files.
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
    /// Use only the first N test examples.
    #[arg(long)]
    pub test_limit: Option<usize>,
    /// Size of the generated synthetic test split.
    #[arg(long)]
    pub synthetic_test: Option<usize>,
    /// Seed of the generated synthetic data.
    #[arg(long)]
    pub data_seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// key=value file; flags take precedence.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub data: DataArgs,
    /// Use only the first N training examples.
    #[arg(long)]
    pub train_limit: Option<usize>,
    /// Size of the generated synthetic training split.
    #[arg(long)]
    pub synthetic_train: Option<usize>,
    /// tiny, small, medium or large.
    #[arg(long)]
    pub arch: Option<String>,
    /// ibp or constrained-ibp.
    #[arg(long)]
    pub loss: Option<String>,
    /// Final training radius (pixel units).
    #[arg(long)]
    pub epsilon: Option<f64>,
    /// Radius for the per-epoch verified error (default: --epsilon).
    #[arg(long)]
    pub eval_epsilon: Option<f64>,
    /// Width-penalty weight.
    #[arg(long)]
    pub lambda: Option<f64>,
    /// mean or sum of squared widths within a layer.
    #[arg(long)]
    pub penalty_reduction: Option<String>,
    /// Penalize the logit layer as well as hidden layers.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub penalty_include_logits: Option<bool>,
    #[arg(long)]
    pub warmup_epochs: Option<f64>,
    #[arg(long)]
    pub ramp_epochs: Option<f64>,
    /// Divide the ramp length by this factor.
    #[arg(long)]
    pub ramp_speedup: Option<f64>,
    #[arg(long)]
    pub kappa_start: Option<f64>,
    #[arg(long)]
    pub kappa_end: Option<f64>,
    /// adam or sgd.
    #[arg(long)]
    pub optimizer: Option<String>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    /// Comma-separated epochs at which the learning rate decays.
    #[arg(long)]
    pub lr_milestones: Option<String>,
    #[arg(long)]
    pub lr_decay: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub eval_batch_size: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub augment: Option<bool>,
    /// Clip input boxes to [0, 1].
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub clamp: Option<bool>,
    /// Checkpoint every N epochs (0: final only).
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Worker threads for evaluation (default: all cores).
    #[arg(long)]
    pub threads: Option<usize>,
    /// No progress output.
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    /// Expected architecture; rejected if the checkpoint differs.
    #[arg(long)]
    pub arch: Option<String>,
    /// Radius (default: the one the checkpoint was evaluated at).
    #[arg(long)]
    pub epsilon: Option<f64>,
    /// Also run the PGD attack.
    #[arg(long)]
    pub pgd: bool,
    #[arg(long, default_value_t = 200)]
    pub pgd_iters: usize,
    #[arg(long, default_value_t = 10)]
    pub pgd_restarts: usize,
    /// Step size (default: epsilon / 8).
    #[arg(long)]
    pub pgd_step: Option<f64>,
    #[arg(long, default_value_t = 0)]
    pub pgd_seed: u64,
    #[arg(long, num_args = 0..=1, default_missing_value = "true", default_value_t = true)]
    pub clamp: bool,
    /// Also write the report to this file.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub threads: Option<usize>,
}

#[derive(Debug, Args)]
pub struct DemoArgs {
    #[arg(long, default_value_t = 10)]
    pub steps: usize,
}

/// Exit status for an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::InvalidArgument(_) | Error::Unknown { .. } => EXIT_USAGE,
        Error::Format { .. } | Error::Io { .. } | Error::ShapeMismatch { .. } => EXIT_DATA,
        Error::NonFiniteLoss { .. } => EXIT_NUMERIC,
    }
}

/// Parses `args` (including the program name) and runs the command.
pub fn run_cli<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match execute(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn execute(cmd: Command) -> Result<()> {
    match cmd {
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::DemoWrapping(a) => cmd_demo_wrapping(a),
    }
}

/// Parses a `key=value` file. Blank lines and `#` comments are skipped.
pub fn parse_config(text: &str, path: &Path) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    let mut offset = 0u64;
    for line in text.lines() {
        let at = offset;
        offset += line.len() as u64 + 1;
        let t = line.trim();
        if t.is_empty() || t.starts_with('#') {
            continue;
        }
        let (k, v) = t
            .split_once('=')
            .ok_or_else(|| Error::format(path, at, format!("expected key=value, got `{t}`")))?;
        map.insert(k.trim().replace('-', "_"), v.trim().to_string());
    }
    Ok(map)
}

/// Flag, then config file, then default; records every resolved value.
struct Resolver {
    file: BTreeMap<String, String>,
    resolved: Vec<(String, String)>,
}

impl Resolver {
    fn new(file: BTreeMap<String, String>) -> Self {
        Self {
            file,
            resolved: Vec::new(),
        }
    }

    fn get<T>(&mut self, key: &str, flag: Option<T>, default: impl FnOnce() -> T) -> Result<T>
    where
        T: FromStr + Display,
        T::Err: Display,
    {
        let from_file = self.file.remove(key);
        let v = match flag {
            Some(v) => v,
            None => match from_file {
                Some(s) => s
                    .parse::<T>()
                    .map_err(|e| Error::invalid(format!("config key `{key}`: bad value `{s}`: {e}")))?,
                None => default(),
            },
        };
        self.resolved.push((key.to_string(), v.to_string()));
        Ok(v)
    }

    fn get_opt<T>(&mut self, key: &str, flag: Option<T>) -> Result<Option<T>>
    where
        T: FromStr + Display,
        T::Err: Display,
    {
        let from_file = self.file.remove(key);
        let v = match flag {
            Some(v) => Some(v),
            None => match from_file {
                Some(s) if s == "none" => None,
                Some(s) => Some(
                    s.parse::<T>()
                        .map_err(|e| Error::invalid(format!("config key `{key}`: bad value `{s}`: {e}")))?,
                ),
                None => None,
            },
        };
        let shown = v.as_ref().map_or_else(|| "none".to_string(), |v| v.to_string());
        self.resolved.push((key.to_string(), shown));
        Ok(v)
    }

    /// Rejects config keys nobody asked for.
    fn finish(&self, allowed_extra: &[&str]) -> Result<()> {
        if let Some(k) = self.file.keys().find(|k| !allowed_extra.contains(&k.as_str())) {
            return Err(Error::invalid(format!("unknown config key `{k}`")));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum DatasetKind {
    Mnist,
    Cifar10,
    Synthetic,
}

impl FromStr for DatasetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mnist" => Ok(DatasetKind::Mnist),
            "cifar10" => Ok(DatasetKind::Cifar10),
            "synthetic" => Ok(DatasetKind::Synthetic),
            _ => Err(Error::Unknown {
                kind: "dataset",
                name: s.to_string(),
                valid: "mnist, cifar10, synthetic".into(),
            }),
        }
    }
}

impl std::fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            DatasetKind::Mnist => "mnist",
            DatasetKind::Cifar10 => "cifar10",
            DatasetKind::Synthetic => "synthetic",
        })
    }
}

struct DataChoice {
    kind: DatasetKind,
    dir: Option<PathBuf>,
    train_limit: Option<usize>,
    test_limit: Option<usize>,
    synthetic_train: usize,
    synthetic_test: usize,
    data_seed: u64,
}

fn resolve_data(r: &mut Resolver, d: DataArgs, train_limit: Option<usize>, synthetic_train: Option<usize>) -> Result<DataChoice> {
    let kind: DatasetKind = r.get("dataset", d.dataset.map(|s| s.parse()).transpose()?, || DatasetKind::Synthetic)?;
    let dir = r.get_opt("data_dir", d.data_dir.map(|p| p.display().to_string()))?.map(PathBuf::from);
    if kind != DatasetKind::Synthetic && dir.is_none() {
        return Err(Error::invalid(format!("--dataset {kind} needs --data-dir")));
    }
    Ok(DataChoice {
        kind,
        dir,
        train_limit: r.get_opt("train_limit", train_limit)?,
        test_limit: r.get_opt("test_limit", d.test_limit)?,
        synthetic_train: r.get("synthetic_train", synthetic_train, || 400)?,
        synthetic_test: r.get("synthetic_test", d.synthetic_test, || 200)?,
        data_seed: r.get("data_seed", d.data_seed, || 0)?,
    })
}

fn load_data(c: &DataChoice) -> Result<(Dataset, Dataset)> {
    let (mut train, mut test) = match c.kind {
        DatasetKind::Mnist => load_mnist(c.dir.as_deref().unwrap())?,
        DatasetKind::Cifar10 => load_cifar10(c.dir.as_deref().unwrap())?,
        DatasetKind::Synthetic => (
            synthetic(c.synthetic_train, c.data_seed, Split::Train),
            synthetic(c.synthetic_test, c.data_seed, Split::Test),
        ),
    };
    if let Some(n) = c.train_limit {
        train = train.take(n);
    }
    if let Some(n) = c.test_limit {
        test = test.take(n);
    }
    Ok((train, test))
}

fn set_threads(n: Option<usize>) -> Result<()> {
    if let Some(n) = n {
        if n == 0 {
            return Err(Error::invalid("--threads must be positive"));
        }
        // A second call in one process (tests) keeps the first pool.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(())
}

struct Defaults {
    arch: &'static str,
    epsilon: f64,
    warmup: f64,
    ramp: f64,
    epochs: usize,
    batch_size: usize,
    augment: bool,
}

fn defaults(kind: DatasetKind) -> Defaults {
    match kind {
        DatasetKind::Mnist => Defaults {
            arch: "small",
            epsilon: 0.4,
            warmup: 3.0,
            ramp: 15.0,
            epochs: 25,
            batch_size: 100,
            augment: false,
        },
        DatasetKind::Cifar10 => Defaults {
            arch: "small",
            epsilon: 8.0 / 255.0,
            warmup: 10.0,
            ramp: 150.0,
            epochs: 350,
            batch_size: 50,
            augment: true,
        },
        DatasetKind::Synthetic => Defaults {
            arch: "tiny",
            epsilon: 0.1,
            warmup: 1.0,
            ramp: 4.0,
            epochs: 10,
            batch_size: 50,
            augment: false,
        },
    }
}

fn parse_milestones(s: &str) -> Result<Vec<usize>> {
    if s.is_empty() || s == "none" {
        return Ok(Vec::new());
    }
    s.split(',')
        .map(|m| {
            m.trim()
                .parse()
                .map_err(|_| Error::invalid(format!("bad learning-rate milestone `{m}`")))
        })
        .collect()
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let file = match &a.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::io(format!("reading {}", p.display()), e))?;
            parse_config(&text, p)?
        }
        None => BTreeMap::new(),
    };
    let expected_hashes = (file.get("train_sha256").cloned(), file.get("test_sha256").cloned());
    let mut r = Resolver::new(file);
    let data = resolve_data(&mut r, a.data, a.train_limit, a.synthetic_train)?;
    let d = defaults(data.kind);
    let arch: String = r.get("arch", a.arch, || d.arch.to_string())?;
    let objective: Objective = r.get("loss", a.loss.map(|s| s.parse()).transpose()?, || Objective::ConstrainedIbp)?;
    let epsilon: f64 = r.get("epsilon", a.epsilon, || d.epsilon)?;
    let eval_epsilon: f64 = r.get("eval_epsilon", a.eval_epsilon, || epsilon)?;
    let lambda: f64 = r.get("lambda", a.lambda, || 1.0)?;
    let reduction: PenaltyReduction = r.get(
        "penalty_reduction",
        a.penalty_reduction.map(|s| s.parse()).transpose()?,
        PenaltyReduction::default,
    )?;
    let include_logits = r.get("penalty_include_logits", a.penalty_include_logits, || true)?;
    let warmup = r.get("warmup_epochs", a.warmup_epochs, || d.warmup)?;
    let ramp = r.get("ramp_epochs", a.ramp_epochs, || d.ramp)?;
    let speedup = r.get("ramp_speedup", a.ramp_speedup, || 1.0)?;
    let kappa_start = r.get("kappa_start", a.kappa_start, || 1.0)?;
    let kappa_end = r.get("kappa_end", a.kappa_end, || 0.5)?;
    let optimizer: OptimizerKind = r.get("optimizer", a.optimizer.map(|s| s.parse()).transpose()?, OptimizerKind::default)?;
    let learning_rate = r.get("learning_rate", a.learning_rate, || 1e-3)?;
    let epochs = r.get("epochs", a.epochs, || d.epochs)?;
    let milestones_text: String = r.get("lr_milestones", a.lr_milestones, || format!("{},{}", epochs * 3 / 5, epochs * 4 / 5))?;
    let lr_decay = r.get("lr_decay", a.lr_decay, || 0.1)?;
    let batch_size = r.get("batch_size", a.batch_size, || d.batch_size)?;
    let eval_batch_size = r.get("eval_batch_size", a.eval_batch_size, || 200)?;
    let seed = r.get("seed", a.seed, || 0)?;
    let augment = r.get("augment", a.augment, || d.augment)?;
    let clamp = r.get("clamp", a.clamp, || true)?;
    let checkpoint_every = r.get("checkpoint_every", a.checkpoint_every, || 0)?;
    let out: String = r.get("out", a.out.map(|p| p.display().to_string()), || "runs/latest".to_string())?;
    r.finish(&["train_sha256", "test_sha256"])?;

    if !(speedup > 0.0) || !speedup.is_finite() {
        return Err(Error::invalid(format!("--ramp-speedup must be > 0, got {speedup}")));
    }
    if objective == Objective::Ibp && a.lambda.is_some() {
        return Err(Error::invalid("--lambda only applies to --loss constrained-ibp"));
    }

    let cfg = TrainConfig {
        loss: LossConfig {
            objective,
            lambda,
            reduction,
            include_logits,
        },
        epsilon_schedule: Schedule::new(0.0, epsilon, warmup, ramp),
        kappa_schedule: Schedule::new(kappa_start, kappa_end, warmup, ramp),
        eval_epsilon,
        optimizer: OptimizerConfig {
            kind: optimizer,
            learning_rate,
            milestones: parse_milestones(&milestones_text)?,
            decay: lr_decay,
            ..OptimizerConfig::default()
        },
        epochs,
        batch_size,
        seed,
        augment,
        clamp,
        checkpoint_every,
        eval_batch_size,
        verbose: !a.quiet,
    }
    .ramp_speedup(speedup);
    cfg.validate()?;
    set_threads(a.threads)?;

    let (train, test) = load_data(&data)?;
    let hashes = (train.content_hash(), test.content_hash());
    for (want, got, which) in [(&expected_hashes.0, &hashes.0, "training"), (&expected_hashes.1, &hashes.1, "test")] {
        if let Some(w) = want {
            if w != got {
                return Err(Error::invalid(format!("{which} data hash {got} differs from the manifest's {w}")));
            }
        }
    }
    let spec = preset(&arch, train.image_shape(), train.num_classes)?.with_normalization(train.normalization.clone());
    let out = PathBuf::from(out);
    fs::create_dir_all(&out).map_err(|e| Error::io(format!("creating {}", out.display()), e))?;

    let mut manifest = String::new();
    manifest.push_str(&format!("# ibp {}\n", env!("CARGO_PKG_VERSION")));
    manifest.push_str(&format!("# train examples: {}, test examples: {}\n", train.len(), test.len()));
    for (k, v) in &r.resolved {
        manifest.push_str(&format!("{k}={v}\n"));
    }
    manifest.push_str(&format!("train_sha256={}\ntest_sha256={}\n", hashes.0, hashes.1));
    for (k, v) in cfg.to_key_values() {
        manifest.push_str(&format!("# resolved {k}={v}\n"));
    }
    let mpath = out.join(MANIFEST_FILE);
    fs::write(&mpath, manifest).map_err(|e| Error::io(format!("writing {}", mpath.display()), e))?;

    let mut trainer = match &a.resume {
        Some(p) => {
            let ckpt = Checkpoint::load(p)?;
            if ckpt.spec != spec {
                return Err(Error::invalid(format!("checkpoint {} does not match --arch {arch}", p.display())));
            }
            Trainer::resume(&ckpt, cfg)?
        }
        None => Trainer::new(Network::init(spec, seed)?, cfg)?,
    };
    for (k, v) in &r.resolved {
        trainer.insert_metadata(k, v);
    }
    let outcome = run(trainer, &train, &test, Some(&out))?;
    if let Some(m) = outcome.metrics.last() {
        eprintln!(
            "finished epoch {}: test error {:.4}, verified error {:.4} at eps {}",
            m.epoch, m.test_error, m.verified_test_error, eval_epsilon
        );
    }
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    set_threads(a.threads)?;
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    if let Some(arch) = &a.arch {
        let want = preset(arch, ckpt.spec.input_shape, ckpt.spec.num_classes)?;
        if want.layers != ckpt.spec.layers {
            return Err(Error::invalid(format!(
                "checkpoint {} does not hold a `{arch}` network",
                a.checkpoint.display()
            )));
        }
    }
    let extra = &ckpt.meta.extra;
    let mut r = Resolver::new(BTreeMap::new());
    let mut data_args = a.data;
    // Default to the data the checkpoint was trained on.
    if data_args.dataset.is_none() {
        data_args.dataset = extra.get("dataset").cloned();
    }
    if data_args.data_dir.is_none() {
        data_args.data_dir = extra.get("data_dir").filter(|s| *s != "none").map(PathBuf::from);
    }
    if data_args.synthetic_test.is_none() {
        data_args.synthetic_test = extra.get("synthetic_test").and_then(|s| s.parse().ok());
    }
    if data_args.data_seed.is_none() {
        data_args.data_seed = extra.get("data_seed").and_then(|s| s.parse().ok());
    }
    let data = resolve_data(&mut r, data_args, None, Some(1))?;
    let epsilon = match a.epsilon.or_else(|| extra.get("eval_epsilon").and_then(|s| s.parse().ok())) {
        Some(e) => e,
        None => return Err(Error::invalid("--epsilon is required for this checkpoint")),
    };
    let (_, test) = load_data(&data)?;
    let net = ckpt.network()?;
    let attack = a.pgd.then(|| AttackConfig {
        iterations: a.pgd_iters,
        restarts: a.pgd_restarts,
        step_size: a.pgd_step,
        seed: a.pgd_seed,
        clamp: a.clamp.then_some(crate::metrics::PIXEL_RANGE),
        ..AttackConfig::new(epsilon)
    });
    let opts = EvalOptions {
        clamp: a.clamp,
        ..EvalOptions::default()
    };
    let report = evaluate_network(&net, &test, epsilon, attack.as_ref(), &opts)?;
    let text = format!("checkpoint={}\ndataset={}\n{}", a.checkpoint.display(), data.kind, report.to_text());
    emit(&text)?;
    if let Some(p) = &a.out {
        fs::write(p, &text).map_err(|e| Error::io(format!("writing {}", p.display()), e))?;
    }
    Ok(())
}

fn cmd_demo_wrapping(a: DemoArgs) -> Result<()> {
    let steps = wrapping_demo(a.steps)?;
    let mut text = String::from("step,interval_half_width,exact_half_width,growth,sqrt2_pow_step\n");
    for s in &steps {
        let _ = writeln!(
            text,
            "{},{:.6},{:.6},{:.6},{:.6}",
            s.step,
            s.interval_half_width,
            s.exact_half_width,
            s.growth,
            2f64.sqrt().powi(s.step as i32)
        );
    }
    emit(&text)
}

/// Writes to stdout. A closed pipe (e.g. `| head`) is not an error.
fn emit(text: &str) -> Result<()> {
    use std::io::Write as _;
    match std::io::stdout().lock().write_all(text.as_bytes()) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(Error::io("writing to stdout", e)),
        _ => Ok(()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_parsing_skips_comments() {
        let m = parse_config("# hi\nepochs=3\n\nloss = ibp\nlr-milestones=1,2\n", Path::new("c")).unwrap();
        assert_eq!(m["epochs"], "3");
        assert_eq!(m["loss"], "ibp");
        assert_eq!(m["lr_milestones"], "1,2");
        let err = parse_config("epochs=3\nnope\n", Path::new("c")).unwrap_err().to_string();
        assert!(err.contains("byte offset 9"), "{err}");
    }

    #[test]
    fn flags_beat_config_beats_default() {
        let mut file = BTreeMap::new();
        file.insert("epochs".to_string(), "7".to_string());
        file.insert("seed".to_string(), "3".to_string());
        let mut r = Resolver::new(file);
        assert_eq!(r.get("epochs", Some(9usize), || 1).unwrap(), 9);
        assert_eq!(r.get("seed", None::<u64>, || 1).unwrap(), 3);
        assert_eq!(r.get("batch_size", None::<usize>, || 5).unwrap(), 5);
        // an overridden file key still counts as known
        assert!(r.finish(&[]).is_ok());
        let mut file = BTreeMap::new();
        file.insert("epochz".to_string(), "7".to_string());
        assert!(Resolver::new(file).finish(&[]).is_err());
    }

    #[test]
    fn usage_errors_map_to_exit_two() {
        assert_eq!(run_cli(["ibp", "train", "--loss", "hinge"]), EXIT_USAGE);
        assert_eq!(run_cli(["ibp", "demo-wrapping", "--steps", "0"]), EXIT_USAGE);
        assert_eq!(run_cli(["ibp", "frobnicate"]), EXIT_USAGE);
        assert_eq!(run_cli(["ibp", "train", "--dataset", "mnist"]), EXIT_USAGE);
    }

    #[test]
    fn milestones_parse() {
        assert_eq!(parse_milestones("3, 5").unwrap(), vec![3, 5]);
        assert!(parse_milestones("").unwrap().is_empty());
        assert!(parse_milestones("x").is_err());
    }
}
