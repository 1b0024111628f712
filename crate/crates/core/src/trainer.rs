//! Training loop with ε and κ ramps, per-epoch evaluation, metrics CSV and
//! checkpoints.
//!
//! Runs are deterministic: the shuffle of epoch `e` comes from the stream
//! `e` of a generator seeded with `seed`, augmentation draws from separate
//! streams, and gradients are computed on a single thread.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attack::{pgd_error, AttackConfig};
use crate::autodiff::Graph;
use crate::checkpoint::{Checkpoint, CheckpointMeta};
use crate::data::{augment, Dataset};
use crate::error::{Error, Result};
use crate::interval::{input_interval, IntervalVars};
use crate::loss::{objective_graph, LossBreakdown, LossConfig};
use crate::metrics::{evaluate as eval_metrics, EvalOptions, PIXEL_RANGE};
use crate::network::Network;
use crate::optim::{Optimizer, OptimizerConfig};

pub const METRICS_HEADER: &str = "epoch,epsilon,kappa,train_total,train_nominal_ce,train_robust_ce,train_width_penalty,test_error,verified_test_error,width_sum,wall_time_s";

/// Piecewise-linear ramp: `start` through the warmup, linear over the ramp,
/// `end` afterwards. Times are in epochs and may be fractional.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Schedule {
    pub start: f64,
    pub end: f64,
    pub warmup_epochs: f64,
    pub ramp_epochs: f64,
}

impl Schedule {
    pub fn new(start: f64, end: f64, warmup_epochs: f64, ramp_epochs: f64) -> Self {
        Self {
            start,
            end,
            warmup_epochs,
            ramp_epochs,
        }
    }

    pub fn constant(v: f64) -> Self {
        Self::new(v, v, 0.0, 0.0)
    }

    /// Value at `epoch + fraction`.
    pub fn value(&self, epoch: usize, fraction: f64) -> f64 {
        self.value_at(epoch as f64 + fraction)
    }

    pub fn value_at(&self, t: f64) -> f64 {
        let s = t - self.warmup_epochs;
        if s <= 0.0 {
            self.start
        } else if s >= self.ramp_epochs {
            self.end
        } else {
            self.start + (self.end - self.start) * (s / self.ramp_epochs)
        }
    }

    /// Same endpoints, ramp shortened by `factor`.
    pub fn faster(self, factor: f64) -> Self {
        Self {
            ramp_epochs: self.ramp_epochs / factor,
            ..self
        }
    }

    pub fn ramp_end(&self) -> f64 {
        self.warmup_epochs + self.ramp_epochs
    }

    fn validate(&self, what: &str) -> Result<()> {
        let ok = [self.start, self.end, self.warmup_epochs, self.ramp_epochs].iter().all(|v| v.is_finite())
            && self.warmup_epochs >= 0.0
            && self.ramp_epochs >= 0.0;
        if !ok {
            return Err(Error::invalid(format!("{what} schedule is malformed: {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub loss: LossConfig,
    pub epsilon_schedule: Schedule,
    pub kappa_schedule: Schedule,
    /// Radius used for the verified error reported each epoch.
    pub eval_epsilon: f64,
    pub optimizer: OptimizerConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub augment: bool,
    /// Intersect input boxes with the pixel range.
    pub clamp: bool,
    /// Write a checkpoint every this many epochs (0: final only).
    pub checkpoint_every: usize,
    pub eval_batch_size: usize,
    /// Progress lines on standard error.
    pub verbose: bool,
}

impl TrainConfig {
    /// Ramps of `warmup` and `ramp` epochs for both ε (0 to `epsilon`) and
    /// κ (1 to 0.5); learning rate decays at 60% and 80% of the budget.
    pub fn with_ramp(epsilon: f64, epochs: usize, warmup: f64, ramp: f64) -> Self {
        Self {
            loss: LossConfig::default(),
            epsilon_schedule: Schedule::new(0.0, epsilon, warmup, ramp),
            kappa_schedule: Schedule::new(1.0, 0.5, warmup, ramp),
            eval_epsilon: epsilon,
            optimizer: OptimizerConfig {
                milestones: vec![epochs * 3 / 5, epochs * 4 / 5],
                ..OptimizerConfig::default()
            },
            epochs,
            batch_size: 100,
            seed: 0,
            augment: false,
            clamp: true,
            checkpoint_every: 0,
            eval_batch_size: 200,
            verbose: false,
        }
    }

    /// MNIST defaults: 3 warmup epochs, 15 ramp epochs, no augmentation.
    pub fn mnist(epsilon: f64, epochs: usize) -> Self {
        Self::with_ramp(epsilon, epochs, 3.0, 15.0)
    }

    /// CIFAR-10 defaults: 10 warmup epochs, 150 ramp epochs, augmentation.
    pub fn cifar10(epsilon: f64, epochs: usize) -> Self {
        Self {
            augment: true,
            batch_size: 50,
            ..Self::with_ramp(epsilon, epochs, 10.0, 150.0)
        }
    }

    /// Shortens both ramps by `factor` (2.5 gives the fast stress preset).
    pub fn ramp_speedup(mut self, factor: f64) -> Self {
        self.epsilon_schedule = self.epsilon_schedule.faster(factor);
        self.kappa_schedule = self.kappa_schedule.faster(factor);
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        self.optimizer.validate()?;
        self.epsilon_schedule.validate("epsilon")?;
        self.kappa_schedule.validate("kappa")?;
        let e = &self.epsilon_schedule;
        if e.start < 0.0 || e.end < 0.0 || !(self.eval_epsilon >= 0.0) {
            return Err(Error::invalid("epsilon values must be >= 0"));
        }
        let k = &self.kappa_schedule;
        if !(0.0..=1.0).contains(&k.start) || !(0.0..=1.0).contains(&k.end) {
            return Err(Error::invalid(format!("kappa must stay within [0, 1], got {} to {}", k.start, k.end)));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.eval_batch_size == 0 {
            return Err(Error::invalid("epochs and batch sizes must be positive"));
        }
        Ok(())
    }

    pub fn eval_options(&self) -> EvalOptions {
        EvalOptions {
            batch_size: self.eval_batch_size,
            clamp: self.clamp,
            include_logits: self.loss.include_logits,
        }
    }

    /// Every setting as `key=value` lines, defaults included.
    pub fn to_key_values(&self) -> Vec<(String, String)> {
        let e = &self.epsilon_schedule;
        let k = &self.kappa_schedule;
        let o = &self.optimizer;
        let milestones = o.milestones.iter().map(|m| m.to_string()).collect::<Vec<_>>().join(",");
        [
            ("loss", self.loss.objective.to_string()),
            ("lambda", self.loss.lambda.to_string()),
            ("penalty_reduction", self.loss.reduction.to_string()),
            ("penalty_include_logits", self.loss.include_logits.to_string()),
            ("epsilon_start", e.start.to_string()),
            ("epsilon_end", e.end.to_string()),
            ("epsilon_warmup", e.warmup_epochs.to_string()),
            ("epsilon_ramp", e.ramp_epochs.to_string()),
            ("kappa_start", k.start.to_string()),
            ("kappa_end", k.end.to_string()),
            ("kappa_warmup", k.warmup_epochs.to_string()),
            ("kappa_ramp", k.ramp_epochs.to_string()),
            ("eval_epsilon", self.eval_epsilon.to_string()),
            ("optimizer", o.kind.to_string()),
            ("learning_rate", o.learning_rate.to_string()),
            ("lr_milestones", milestones),
            ("lr_decay", o.decay.to_string()),
            ("momentum", o.momentum.to_string()),
            ("adam_beta1", o.beta1.to_string()),
            ("adam_beta2", o.beta2.to_string()),
            ("adam_eps", o.adam_eps.to_string()),
            ("epochs", self.epochs.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("seed", self.seed.to_string()),
            ("augment", self.augment.to_string()),
            ("clamp", self.clamp.to_string()),
            ("checkpoint_every", self.checkpoint_every.to_string()),
            ("eval_batch_size", self.eval_batch_size.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochMetrics {
    /// 1-based.
    pub epoch: usize,
    /// Training radius at the epoch's last step.
    pub epsilon: f64,
    pub kappa: f64,
    /// Mean over the epoch's training examples.
    pub train: LossBreakdown,
    pub test_error: f64,
    pub verified_test_error: f64,
    pub width_sum: f64,
    pub wall_time_s: f64,
}

impl EpochMetrics {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{:.3}",
            self.epoch,
            self.epsilon,
            self.kappa,
            self.train.total,
            self.train.nominal_ce,
            self.train.robust_ce,
            self.train.width_penalty,
            self.test_error,
            self.verified_test_error,
            self.width_sum,
            self.wall_time_s
        )
    }

    /// All fields except wall time, for comparing runs.
    pub fn deterministic_part(&self) -> EpochMetrics {
        EpochMetrics {
            wall_time_s: 0.0,
            ..*self
        }
    }
}

/// Owns the network and optimizer across epochs.
#[derive(Clone, Debug)]
pub struct Trainer {
    cfg: TrainConfig,
    net: Network<f32>,
    opt: Optimizer,
    epochs_done: usize,
    metadata: BTreeMap<String, String>,
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

const AUGMENT_STREAM: u64 = 1 << 40;

impl Trainer {
    pub fn new(net: Network<f32>, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let opt = Optimizer::new(cfg.optimizer.clone(), &net.spec().param_shapes()?)?;
        Ok(Self {
            cfg,
            net,
            opt,
            epochs_done: 0,
            metadata: BTreeMap::new(),
        })
    }

    /// Continues a run from a checkpoint written by [`Trainer::checkpoint`].
    pub fn resume(ckpt: &Checkpoint, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        if ckpt.meta.seed != cfg.seed {
            return Err(Error::invalid(format!(
                "checkpoint was trained with seed {}, configuration has {}",
                ckpt.meta.seed, cfg.seed
            )));
        }
        let net = ckpt.network()?;
        let state = ckpt
            .optimizer
            .clone()
            .ok_or_else(|| Error::invalid("checkpoint carries no optimizer state"))?;
        let opt = Optimizer::restore(cfg.optimizer.clone(), state, &net.spec().param_shapes()?)?;
        Ok(Self {
            cfg,
            net,
            opt,
            epochs_done: ckpt.meta.epoch,
            metadata: ckpt.meta.extra.clone(),
        })
    }

    pub fn network(&self) -> &Network<f32> {
        &self.net
    }

    pub fn into_network(self) -> Network<f32> {
        self.net
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn epochs_done(&self) -> usize {
        self.epochs_done
    }

    /// Extra `key=value` pairs stored in every checkpoint.
    pub fn insert_metadata(&mut self, key: &str, value: &str) {
        self.metadata.insert(key.to_string(), value.to_string());
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let t = self.epochs_done as f64;
        let mut meta = CheckpointMeta {
            epoch: self.epochs_done,
            epsilon: self.cfg.epsilon_schedule.value_at(t),
            kappa: self.cfg.kappa_schedule.value_at(t),
            seed: self.cfg.seed,
            extra: self.metadata.clone(),
        };
        for (k, v) in self.cfg.to_key_values() {
            meta.extra.insert(k, v);
        }
        Checkpoint::from_network(&self.net, meta, Some(self.opt.state().clone()))
    }

    /// One optimizer step on a batch; returns the loss terms before the step.
    fn step(&mut self, train: &Dataset, idx: &[usize], epoch: usize, batch: usize, fraction: f64) -> Result<LossBreakdown> {
        let epsilon = self.cfg.epsilon_schedule.value(epoch, fraction);
        let kappa = self.cfg.kappa_schedule.value(epoch, fraction);
        let (mut x, labels) = train.batch(idx);
        if self.cfg.augment {
            let mut rng = stream_rng(self.cfg.seed, AUGMENT_STREAM + epoch as u64);
            let mut s = 0;
            for _ in 0..=batch {
                s = rng.next_u64();
            }
            x = augment(&x, s);
        }
        let z0 = input_interval(&x, epsilon, self.cfg.clamp.then_some(PIXEL_RANGE))?;
        let g = Graph::new();
        let params = self.net.bind(&g, true);
        let logits = self.net.forward_graph(&g, &params, g.constant(x))?;
        let trace = self.net.forward_interval_graph(&g, &params, IntervalVars::constant(&g, &z0))?;
        let obj = objective_graph(&g, logits, trace.logits, &trace.layers, &labels, kappa, &self.cfg.loss)?;
        let breakdown = obj.breakdown(&g, kappa, epsilon);
        if !breakdown.total.is_finite() {
            return Err(Error::NonFiniteLoss {
                epoch: epoch + 1,
                batch,
                epsilon,
                kappa,
                value: breakdown.total,
            });
        }
        let mut grads = g.backward(obj.total)?;
        let grads: Vec<_> = params.iter().map(|&p| grads.take(p)).collect();
        drop(g);
        let lr = self.cfg.optimizer.lr_at(epoch);
        self.opt.step(self.net.parameters_mut(), &grads, lr);
        Ok(breakdown)
    }

    /// Trains one epoch and evaluates on `test`.
    pub fn train_epoch(&mut self, train: &Dataset, test: &Dataset) -> Result<EpochMetrics> {
        let started = Instant::now();
        let epoch = self.epochs_done;
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut stream_rng(self.cfg.seed, epoch as u64));
        let batches: Vec<&[usize]> = order.chunks(self.cfg.batch_size).collect();
        let nb = batches.len();
        let mut sum = LossBreakdown::default();
        for (b, idx) in batches.iter().enumerate() {
            let part = self.step(train, idx, epoch, b, b as f64 / nb as f64)?;
            sum.accumulate(&part, idx.len() as f64);
            if self.cfg.verbose && (b + 1) % 20 == 0 {
                eprintln!(
                    "epoch {} batch {}/{} eps={:.4} kappa={:.3} loss={:.4}",
                    epoch + 1,
                    b + 1,
                    nb,
                    part.epsilon,
                    part.kappa,
                    part.total
                );
            }
        }
        let last = (nb - 1) as f64 / nb as f64;
        let mut train_mean = sum.scaled(1.0 / train.len() as f64);
        train_mean.epsilon = self.cfg.epsilon_schedule.value(epoch, last);
        train_mean.kappa = self.cfg.kappa_schedule.value(epoch, last);
        let eval = eval_metrics(&self.net, test, self.cfg.eval_epsilon, &self.cfg.eval_options())?;
        self.epochs_done += 1;
        let m = EpochMetrics {
            epoch: self.epochs_done,
            epsilon: train_mean.epsilon,
            kappa: train_mean.kappa,
            train: train_mean,
            test_error: eval.nominal_error,
            verified_test_error: eval.verified_error,
            width_sum: eval.width_sum,
            wall_time_s: started.elapsed().as_secs_f64(),
        };
        if self.cfg.verbose {
            eprintln!(
                "epoch {} done: loss={:.4} test_err={:.4} verified_err={:.4} width_sum={:.4e} ({:.1}s)",
                m.epoch, m.train.total, m.test_error, m.verified_test_error, m.width_sum, m.wall_time_s
            );
        }
        Ok(m)
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub network: Network<f32>,
    pub metrics: Vec<EpochMetrics>,
    pub checkpoints: Vec<PathBuf>,
}

fn append_line(path: &Path, line: &str) -> Result<()> {
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
    writeln!(f, "{line}").map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

/// Runs `trainer` until `cfg.epochs`. With `out`, appends rows to
/// `out/metrics.csv` and writes `checkpoint-epoch-NNNN.ibpc` periodically
/// and `final.ibpc` at the end.
pub fn run(mut trainer: Trainer, train: &Dataset, test: &Dataset, out: Option<&Path>) -> Result<TrainOutcome> {
    if train.image_shape() != trainer.net.spec().input_shape || test.image_shape() != train.image_shape() {
        return Err(Error::invalid(format!(
            "dataset images {:?} do not match the network input {:?}",
            train.image_shape(),
            trainer.net.spec().input_shape
        )));
    }
    if train.num_classes != trainer.net.num_classes() {
        return Err(Error::invalid(format!(
            "dataset has {} classes, network outputs {}",
            train.num_classes,
            trainer.net.num_classes()
        )));
    }
    let csv = out.map(|d| d.join("metrics.csv"));
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
        let path = csv.as_ref().unwrap();
        if !path.exists() {
            append_line(path, METRICS_HEADER)?;
        }
    }
    let mut metrics = Vec::new();
    let mut checkpoints = Vec::new();
    while trainer.epochs_done < trainer.cfg.epochs {
        let m = trainer.train_epoch(train, test)?;
        if let (Some(dir), Some(path)) = (out, &csv) {
            append_line(path, &m.csv_row())?;
            let every = trainer.cfg.checkpoint_every;
            if every > 0 && m.epoch % every == 0 && m.epoch < trainer.cfg.epochs {
                let p = dir.join(format!("checkpoint-epoch-{:04}.ibpc", m.epoch));
                trainer.checkpoint().save(&p)?;
                checkpoints.push(p);
            }
        }
        metrics.push(m);
    }
    if let Some(dir) = out {
        let p = dir.join("final.ibpc");
        trainer.checkpoint().save(&p)?;
        checkpoints.push(p);
    }
    Ok(TrainOutcome {
        network: trainer.net,
        metrics,
        checkpoints,
    })
}

/// Trains `net` from scratch under `cfg`.
pub fn train(net: Network<f32>, train: &Dataset, test: &Dataset, cfg: &TrainConfig, out: Option<&Path>) -> Result<TrainOutcome> {
    run(Trainer::new(net, cfg.clone())?, train, test, out)
}

/// Test error, optional PGD error and verified error at one radius.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub epsilon: f64,
    pub examples: usize,
    pub test_error: f64,
    pub pgd_error: Option<f64>,
    pub verified_error: f64,
    pub width_sum: f64,
    pub attack: Option<AttackConfig>,
}

impl EvalReport {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "epsilon={}", self.epsilon);
        let _ = writeln!(s, "examples={}", self.examples);
        let _ = writeln!(s, "test_error={}", self.test_error);
        match self.pgd_error {
            Some(p) => {
                let _ = writeln!(s, "pgd_error={p}");
            }
            None => s.push_str("pgd_error=not-run\n"),
        }
        let _ = writeln!(s, "verified_error={}", self.verified_error);
        let _ = writeln!(s, "width_sum={}", self.width_sum);
        if let Some(a) = &self.attack {
            let _ = writeln!(s, "pgd_iterations={}", a.iterations);
            let _ = writeln!(s, "pgd_restarts={}", a.restarts);
            let _ = writeln!(s, "pgd_step_size={}", a.step());
            let _ = writeln!(s, "pgd_seed={}", a.seed);
        }
        s
    }
}

pub fn evaluate_network(
    net: &Network<f32>,
    ds: &Dataset,
    epsilon: f64,
    attack: Option<&AttackConfig>,
    opts: &EvalOptions,
) -> Result<EvalReport> {
    if ds.image_shape() != net.spec().input_shape || ds.num_classes != net.num_classes() {
        return Err(Error::invalid(format!(
            "network expects {:?} images with {} classes, dataset has {:?} with {}",
            net.spec().input_shape,
            net.num_classes(),
            ds.image_shape(),
            ds.num_classes
        )));
    }
    let s = eval_metrics(net, ds, epsilon, opts)?;
    let pgd = match attack {
        Some(a) => {
            if a.epsilon != epsilon {
                return Err(Error::invalid(format!(
                    "attack radius {} differs from evaluation radius {epsilon}",
                    a.epsilon
                )));
            }
            Some(pgd_error(net, ds, a)?)
        }
        None => None,
    };
    Ok(EvalReport {
        epsilon,
        examples: ds.len(),
        test_error: s.nominal_error,
        pgd_error: pgd,
        verified_error: s.verified_error,
        width_sum: s.width_sum,
        attack: attack.cloned(),
    })
}

/// Loads a checkpoint and evaluates it.
pub fn evaluate(checkpoint: &Path, ds: &Dataset, epsilon: f64, attack: Option<&AttackConfig>) -> Result<EvalReport> {
    let net = Checkpoint::load(checkpoint)?.network()?;
    evaluate_network(&net, ds, epsilon, attack, &EvalOptions::default())
}
