//! SGD with momentum over sampled windows, per-epoch checkpoints, resume, and
//! the fold-wise cross-validation harness.
//!
//! Every random draw comes from a stream derived from the run seed (see
//! [`crate::seed`]), and training is single-threaded, so a run is a pure
//! function of its inputs: two runs with the same seed write identical
//! checkpoints, and resuming from epoch `e` reproduces the uninterrupted run.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::data::{
    augment_training_set, compute_standardization, fold_split, sample_windows, standardize, ElasticParams,
    SliceRecord, Standardization, DEFAULT_NEGATIVE_WINDOWS, DEFAULT_POSITIVE_WINDOWS, NUM_FOLDS,
};
use crate::error::{io_err, Error, Result};
use crate::layers::{softmax_cross_entropy, Mode};
use crate::metrics::{evaluate_network, Aggregate, EvalReport, PositiveSet, DEFAULT_TAU};
use crate::net::{Network, NetworkConfig};
use crate::seed::{self, Stream};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: u32,
    pub lr0: f64,
    pub momentum: f64,
    /// Factor applied to the learning rate every `decay_every` epochs.
    pub decay_gamma: f64,
    pub decay_every: u32,
    pub dropout_p: f64,
    /// Windows per SGD step.
    pub batch_size: usize,
    pub seed: u64,
    /// Tumor-centered windows sampled per slice.
    pub positive_windows: usize,
    /// Healthy-centered windows sampled per slice.
    pub negative_windows: usize,
    /// Add one elastically deformed copy of every training slice.
    pub augment: bool,
    /// Deformation strength; `None` scales the defaults to each slice's size.
    pub elastic: Option<ElasticParams>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 80,
            lr0: 0.005,
            momentum: 0.9,
            decay_gamma: 0.5,
            decay_every: 20,
            dropout_p: 0.5,
            batch_size: 64,
            seed: 0,
            positive_windows: DEFAULT_POSITIVE_WINDOWS,
            negative_windows: DEFAULT_NEGATIVE_WINDOWS,
            augment: true,
            elastic: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return fail(format!("lr0 {} must be positive", self.lr0));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return fail(format!("momentum {} outside [0, 1)", self.momentum));
        }
        if self.epochs == 0 {
            return fail("epochs must be >= 1".into());
        }
        if !(self.decay_gamma > 0.0 && self.decay_gamma <= 1.0) {
            return fail(format!("decay_gamma {} outside (0, 1]", self.decay_gamma));
        }
        if self.decay_every == 0 || self.batch_size == 0 {
            return fail("decay_every and batch_size must be >= 1".into());
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return fail(format!("dropout_p {} outside [0, 1)", self.dropout_p));
        }
        if self.positive_windows + self.negative_windows == 0 {
            return fail("at least one window per slice is required".into());
        }
        Ok(())
    }
}

/// `lr0 · γ^⌊epoch / decay_every⌋` for a 0-based epoch.
pub fn lr_schedule(config: &TrainConfig, epoch: u32) -> f64 {
    config.lr0 * config.decay_gamma.powi((epoch / config.decay_every.max(1)) as i32)
}

/// Classical momentum: `v ← μ·v + g`, then `w ← w − lr·v`.
pub fn sgd_step<T: Scalar>(
    param: &mut Tensor<T>,
    grad: &Tensor<T>,
    velocity: &mut Tensor<T>,
    lr: T,
    mu: T,
) -> Result<()> {
    if param.shape() != grad.shape() || param.shape() != velocity.shape() {
        return Err(Error::Shape(format!(
            "sgd step: param {:?}, grad {:?}, velocity {:?}",
            param.shape(),
            grad.shape(),
            velocity.shape()
        )));
    }
    for ((w, &g), v) in param.data_mut().iter_mut().zip(grad.data()).zip(velocity.data_mut()) {
        *v = mu * *v + g;
        *w -= lr * *v;
    }
    Ok(())
}

/// Momentum buffers for every network parameter.
#[derive(Debug, Clone)]
pub struct Sgd<T: Scalar> {
    pub velocity: Vec<Tensor<T>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(net: &Network<T>) -> Result<Self> {
        let velocity = net
            .params()
            .iter()
            .map(|p| Tensor::zeros(p.value.shape()))
            .collect::<Result<_>>()?;
        Ok(Self { velocity })
    }

    pub fn from_velocity(net: &Network<T>, velocity: Vec<Tensor<T>>) -> Result<Self> {
        let params = net.params();
        if velocity.len() != params.len()
            || params.iter().zip(&velocity).any(|(p, v)| p.value.shape() != v.shape())
        {
            return Err(Error::Shape("momentum buffers do not match the network".into()));
        }
        Ok(Self { velocity })
    }

    pub fn step(&mut self, net: &mut Network<T>, lr: f64, mu: f64) -> Result<()> {
        let (lr, mu) = (T::from_f64_lossy(lr), T::from_f64_lossy(mu));
        for (p, v) in net.params_mut().into_iter().zip(&mut self.velocity) {
            sgd_step(&mut p.value, &p.grad, v, lr, mu)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    /// 1-based.
    pub epoch: u32,
    pub lr: f64,
    pub loss: f64,
    /// Fraction of training windows whose argmax matched the target.
    pub accuracy: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochStats>,
}

const HISTORY_HEADER: &str = "epoch,lr,loss,window_accuracy,seconds";

impl TrainHistory {
    pub fn to_csv(&self) -> String {
        let mut out = format!("{HISTORY_HEADER}\n");
        for e in &self.epochs {
            writeln!(out, "{},{},{},{},{:.3}", e.epoch, e.lr, e.loss, e.accuracy, e.seconds).unwrap();
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let bad = |line: &str| Error::Parameter(format!("malformed history row {line:?}"));
        let mut lines = text.lines();
        if lines.next() != Some(HISTORY_HEADER) {
            return Err(Error::Parameter("history CSV lacks its header".into()));
        }
        let epochs = lines
            .filter(|l| !l.is_empty())
            .map(|line| {
                let f: Vec<&str> = line.split(',').collect();
                if f.len() != 5 {
                    return Err(bad(line));
                }
                Ok(EpochStats {
                    epoch: f[0].parse().map_err(|_| bad(line))?,
                    lr: f[1].parse().map_err(|_| bad(line))?,
                    loss: f[2].parse().map_err(|_| bad(line))?,
                    accuracy: f[3].parse().map_err(|_| bad(line))?,
                    seconds: f[4].parse().map_err(|_| bad(line))?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { epochs })
    }
}

/// Standardized training windows stored contiguously.
#[derive(Debug, Clone)]
pub struct WindowPool {
    pub side: usize,
    pub patches: Vec<f32>,
    pub targets: Vec<u8>,
    pub stats: Standardization,
}

impl WindowPool {
    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    fn batch(&self, indices: &[usize]) -> Result<(Tensor<f32>, Vec<usize>)> {
        let n = self.side * self.side;
        let mut data = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            data.extend_from_slice(&self.patches[i * n..(i + 1) * n]);
        }
        let x = Tensor::from_vec(&[indices.len(), 1, self.side, self.side], data)?;
        Ok((x, indices.iter().map(|&i| usize::from(self.targets[i])).collect()))
    }
}

/// Augments the slices, samples windows from each and standardizes them with
/// statistics computed over the whole pool.
pub fn prepare_windows(records: &[SliceRecord], config: &TrainConfig, side: usize) -> Result<WindowPool> {
    if records.is_empty() {
        return Err(Error::Parameter("training set is empty".into()));
    }
    let slices = if config.augment {
        augment_training_set(records, config.elastic, &mut seed::rng(config.seed, Stream::Augment))?
    } else {
        records.to_vec()
    };
    let mut windows = Vec::new();
    for (i, slice) in slices.iter().enumerate() {
        let mut rng = seed::rng(config.seed, Stream::Sample(i as u64));
        windows.extend(sample_windows(
            slice,
            config.positive_windows,
            config.negative_windows,
            side,
            &mut rng,
        )?);
    }
    let stats = compute_standardization(&windows)?;
    let mut patches = Vec::with_capacity(windows.len() * side * side);
    let mut targets = Vec::with_capacity(windows.len());
    for mut w in windows {
        standardize(&mut w.patch, &stats);
        patches.extend_from_slice(&w.patch);
        targets.push(w.target);
    }
    Ok(WindowPool {
        side,
        patches,
        targets,
        stats,
    })
}

/// File name of the checkpoint written after `epoch` completed epochs.
pub fn epoch_checkpoint_name(epoch: u32) -> String {
    format!("epoch-{epoch:03}.mscn")
}

pub const FINAL_CHECKPOINT: &str = "model.mscn";
pub const HISTORY_FILE: &str = "history.csv";

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Network, momentum buffers and epoch counter after the last epoch.
    pub checkpoint: Checkpoint,
    /// Every completed epoch, including those before a resume when the
    /// output directory still holds their history.
    pub history: TrainHistory,
}

/// Trains a freshly built network for `config.epochs` epochs.
///
/// With `out` set, writes `epoch-NNN.mscn` after each epoch, `model.mscn` at
/// the end and `history.csv` throughout. `progress` sees each finished epoch.
pub fn train(
    mut net: Network<f32>,
    records: &[SliceRecord],
    config: &TrainConfig,
    out: Option<&Path>,
    progress: &mut dyn FnMut(&EpochStats),
) -> Result<TrainOutcome> {
    config.validate()?;
    net.set_dropout(config.dropout_p)?;
    let pool = prepare_windows(records, config, net.config().window)?;
    net.stats = Some(pool.stats);
    let sgd = Sgd::new(&net)?;
    let state = Checkpoint {
        network: net,
        velocity: None,
        epoch: 0,
        seed: config.seed,
        train: Some(config.clone()),
    };
    run_epochs(state, sgd, &pool, config, out, TrainHistory::default(), progress)
}

/// Continues training from a checkpoint that carries momentum buffers, up to
/// `config.epochs` total epochs. The windows are regenerated from the seed,
/// so the result equals an uninterrupted run.
pub fn resume(
    checkpoint: Checkpoint,
    records: &[SliceRecord],
    config: &TrainConfig,
    out: Option<&Path>,
    progress: &mut dyn FnMut(&EpochStats),
) -> Result<TrainOutcome> {
    config.validate()?;
    if checkpoint.seed != config.seed {
        return Err(Error::Config(format!(
            "checkpoint seed {} differs from run seed {}",
            checkpoint.seed, config.seed
        )));
    }
    let velocity = checkpoint
        .velocity
        .clone()
        .ok_or_else(|| Error::State("checkpoint has no momentum buffers to resume from".into()))?;
    let mut state = checkpoint;
    state.network.set_dropout(config.dropout_p)?;
    let pool = prepare_windows(records, config, state.network.config().window)?;
    if state.network.stats != Some(pool.stats) {
        return Err(Error::State(
            "checkpoint statistics differ from the regenerated training windows".into(),
        ));
    }
    let sgd = Sgd::from_velocity(&state.network, velocity)?;
    let mut history = TrainHistory::default();
    if let Some(dir) = out {
        let path = dir.join(HISTORY_FILE);
        if path.exists() {
            history = TrainHistory::from_csv(&fs::read_to_string(&path).map_err(io_err(&path))?)?;
            history.epochs.retain(|e| e.epoch <= state.epoch);
        }
    }
    state.train = Some(config.clone());
    run_epochs(state, sgd, &pool, config, out, history, progress)
}

fn run_epochs(
    mut state: Checkpoint,
    mut sgd: Sgd<f32>,
    pool: &WindowPool,
    config: &TrainConfig,
    out: Option<&Path>,
    mut history: TrainHistory,
    progress: &mut dyn FnMut(&EpochStats),
) -> Result<TrainOutcome> {
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let net = &mut state.network;
    for epoch in state.epoch..config.epochs {
        let start = Instant::now();
        let lr = lr_schedule(config, epoch);
        let mut order: Vec<usize> = (0..pool.len()).collect();
        order.shuffle(&mut seed::rng(config.seed, Stream::Shuffle(u64::from(epoch))));
        let mut dropout_rng = seed::rng(config.seed, Stream::Dropout(u64::from(epoch)));
        let (mut loss_sum, mut correct) = (0.0f64, 0usize);
        for chunk in order.chunks(config.batch_size) {
            let (x, targets) = pool.batch(chunk)?;
            net.zero_grad();
            let pred = net.forward(&x, Mode::Train, &mut dropout_rng)?;
            let loss = softmax_cross_entropy(&pred.logits, &targets)?;
            if !loss.loss.is_finite() {
                return Err(Error::Degenerate(format!("loss diverged at epoch {}", epoch + 1)));
            }
            net.backward(&loss.grad_logits)?;
            sgd.step(net, lr, config.momentum)?;
            loss_sum += f64::from(loss.loss) * chunk.len() as f64;
            let classes = pred.logits.shape()[1];
            correct += pred
                .logits
                .data()
                .chunks_exact(classes)
                .zip(&targets)
                .filter(|(row, &t)| argmax(row) == t)
                .count();
        }
        let stats = EpochStats {
            epoch: epoch + 1,
            lr,
            loss: loss_sum / pool.len() as f64,
            accuracy: correct as f64 / pool.len() as f64,
            seconds: start.elapsed().as_secs_f64(),
        };
        history.epochs.push(stats.clone());
        progress(&stats);
        if let Some(dir) = out {
            let snapshot = Checkpoint {
                network: net.clone(),
                velocity: Some(sgd.velocity.clone()),
                epoch: epoch + 1,
                seed: config.seed,
                train: Some(config.clone()),
            };
            snapshot.save(&dir.join(epoch_checkpoint_name(epoch + 1)))?;
            let path = dir.join(HISTORY_FILE);
            fs::write(&path, history.to_csv()).map_err(io_err(&path))?;
        }
    }
    state.epoch = state.epoch.max(config.epochs);
    state.velocity = Some(sgd.velocity);
    if let Some(dir) = out {
        state.save(&dir.join(FINAL_CHECKPOINT))?;
    }
    Ok(TrainOutcome { checkpoint: state, history })
}

fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// How held-out slices are segmented and scored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalOptions {
    pub stride: usize,
    pub batch: usize,
    pub tau: f64,
    pub positive_set: PositiveSet,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            stride: 1,
            batch: 256,
            tau: DEFAULT_TAU,
            positive_set: PositiveSet::LabelMatched,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FoldResult {
    pub fold: u8,
    pub outcome: TrainOutcome,
    pub report: EvalReport,
}

#[derive(Debug, Clone)]
pub struct CrossValidation {
    pub folds: Vec<FoldResult>,
    /// Pooled over every held-out slice, i.e. fold means weighted by fold size.
    pub aggregate: Aggregate,
}

/// Per-fold seed so folds train on independent streams of one run seed.
pub fn fold_seed(seed: u64, fold: u8) -> u64 {
    seed::derive(seed, Stream::Fold(u64::from(fold)))
}

/// Trains one network per fold on the other four folds and evaluates it on
/// the held-out fold. Fold `k` writes into `out/fold-k` when `out` is set.
pub fn cross_validate(
    records: &[SliceRecord],
    net_config: &NetworkConfig,
    train_config: &TrainConfig,
    eval: &EvalOptions,
    folds: &[u8],
    out: Option<&Path>,
    progress: &mut dyn FnMut(u8, &EpochStats),
) -> Result<CrossValidation> {
    net_config.validate()?;
    let mut results = Vec::new();
    for &k in folds {
        if k >= NUM_FOLDS {
            return Err(Error::Parameter(format!("fold {k} outside 0..{NUM_FOLDS}")));
        }
        let (train_set, test_set) = fold_split(records, k)?;
        if test_set.is_empty() {
            return Err(Error::Parameter(format!("fold {k} has no test slices")));
        }
        let config = TrainConfig {
            seed: fold_seed(train_config.seed, k),
            ..train_config.clone()
        };
        let net = Network::build(net_config.clone(), &mut seed::rng(config.seed, Stream::Init))?;
        let dir: Option<PathBuf> = out.map(|o| o.join(format!("fold-{k}")));
        let outcome = train(net, &train_set, &config, dir.as_deref(), &mut |e| progress(k, e))?;
        let report = evaluate_network(
            &outcome.checkpoint.network,
            &test_set,
            eval.stride,
            eval.batch,
            eval.tau,
            eval.positive_set,
        )?;
        if let Some(d) = &dir {
            report.write_json(&d.join("report.json"))?;
        }
        results.push(FoldResult {
            fold: k,
            outcome,
            report,
        });
    }
    let all: Vec<_> = results.iter().flat_map(|f| f.report.slices.iter().cloned()).collect();
    Ok(CrossValidation {
        aggregate: Aggregate::of(&all),
        folds: results,
    })
}
