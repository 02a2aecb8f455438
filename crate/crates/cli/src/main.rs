mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mscnn::checkpoint::Checkpoint;
use mscnn::data::{fold_split, gen_synthetic, load_dataset, SliceRecord, MIN_PHANTOM_SIZE};
use mscnn::gradcheck::check_network;
use mscnn::metrics::{
    class_scores, evaluate_slice, metric_histograms, predict_label, sweep_csv, tau_grid, threshold_sweep,
    EvalReport, PositiveSet,
};
use mscnn::segment::{read_label_map, segment_slice, write_label_map, write_overlay, SegmentOptions};
use mscnn::seed::{self, Stream};
use mscnn::train::{cross_validate, resume, train, EpochStats, TrainConfig};
use mscnn::{Network, NetworkConfig};
use serde::Serialize;

use config::{Precision, RunConfig};

/// Multiscale CNN tumor segmentation and classification.
#[derive(Debug, Parser)]
#[command(name = "mscnn", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run seed [default: 0, or the config's `seed`]
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads, 0 for every core [default: 0]
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Debug, Args, Default)]
struct NetFlags {
    /// Multiplier on every feature-map count [default: 1]
    #[arg(long)]
    width_scale: Option<f64>,
    /// Input window side in pixels [default: 65]
    #[arg(long)]
    window: Option<usize>,
}

#[derive(Debug, Args, Default)]
struct TrainFlags {
    /// Training epochs [default: 80]
    #[arg(long)]
    epochs: Option<u32>,
    /// Windows per SGD step [default: 64]
    #[arg(long)]
    batch_size: Option<usize>,
    /// Initial learning rate [default: 0.005]
    #[arg(long)]
    lr0: Option<f64>,
    /// Tumor-centered windows per slice [default: 150]
    #[arg(long)]
    positive_windows: Option<usize>,
    /// Healthy-centered windows per slice [default: 325]
    #[arg(long)]
    negative_windows: Option<usize>,
    /// Skip elastic augmentation
    #[arg(long)]
    no_augment: bool,
}

#[derive(Debug, Args, Default)]
struct EvalFlags {
    /// Segmentation stride in pixels [default: 1]
    #[arg(long)]
    stride: Option<usize>,
    /// Confidence threshold τ for slice classification [default: 0.75]
    #[arg(long)]
    tau: Option<f64>,
    /// Positive pixels for Dice and sensitivity [default: label-matched]
    #[arg(long, value_enum)]
    positive_set: Option<PositiveSetArg>,
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
enum PositiveSetArg {
    LabelMatched,
    AnyTumor,
}

impl From<PositiveSetArg> for PositiveSet {
    fn from(v: PositiveSetArg) -> Self {
        match v {
            PositiveSetArg::LabelMatched => PositiveSet::LabelMatched,
            PositiveSetArg::AnyTumor => PositiveSet::AnyTumor,
        }
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a phantom dataset with textured elliptical tumors.
    GenSynthetic {
        #[command(flatten)]
        common: Common,
        /// Output dataset directory
        #[arg(long)]
        out: PathBuf,
        /// Number of slices
        #[arg(long, default_value_t = 60)]
        slices: usize,
        /// Slice side in pixels
        #[arg(long, default_value_t = 128)]
        size: usize,
    },
    /// Train a network, writing a checkpoint after every epoch.
    Train {
        #[command(flatten)]
        common: Common,
        /// Dataset directory or manifest
        #[arg(long)]
        data: Option<PathBuf>,
        /// Output directory for checkpoints and history.csv
        #[arg(long)]
        out: Option<PathBuf>,
        /// Hold out this fold (train on the other four); all slices when absent
        #[arg(long)]
        fold: Option<u8>,
        /// Continue from a checkpoint carrying momentum buffers
        #[arg(long)]
        resume: Option<PathBuf>,
        #[command(flatten)]
        net: NetFlags,
        #[command(flatten)]
        train: TrainFlags,
    },
    /// Train and evaluate one network per fold.
    CrossValidate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Folds to run
        #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4")]
        folds: Vec<u8>,
        #[command(flatten)]
        net: NetFlags,
        #[command(flatten)]
        train: TrainFlags,
        #[command(flatten)]
        eval: EvalFlags,
    },
    /// Label every pixel of the selected slices.
    Segment {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Directory receiving `<id>.labels` and `<id>.json`
        #[arg(long)]
        out: Option<PathBuf>,
        /// Only slices of this fold
        #[arg(long)]
        fold: Option<u8>,
        /// Only these slice ids
        #[arg(long, value_delimiter = ',')]
        ids: Vec<String>,
        #[command(flatten)]
        eval: EvalFlags,
        /// Also write `<id>.png` overlays
        #[arg(long)]
        overlay: bool,
    },
    /// Classify slices from their label maps; prints CSV.
    Classify {
        #[command(flatten)]
        common: Common,
        /// Label-map files, or directories of `*.labels` files
        #[arg(required = true)]
        labels: Vec<PathBuf>,
        #[command(flatten)]
        eval: EvalFlags,
    },
    /// Score label maps against ground truth.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Directory of label maps named `<id>.labels`
        #[arg(long, conflicts_with = "checkpoint", required_unless_present = "checkpoint")]
        labels: Option<PathBuf>,
        /// Segment on the fly with this checkpoint instead
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Only slices of this fold
        #[arg(long)]
        fold: Option<u8>,
        /// Report JSON path (stdout when absent)
        #[arg(long)]
        out: Option<PathBuf>,
        /// Histogram CSV path
        #[arg(long)]
        histograms: Option<PathBuf>,
        /// Histogram bins
        #[arg(long, default_value_t = 10)]
        bins: usize,
        #[command(flatten)]
        eval: EvalFlags,
    },
    /// Classification precision and coverage over a grid of thresholds.
    SweepThreshold {
        #[command(flatten)]
        common: Common,
        /// Evaluation report JSON
        #[arg(long)]
        report: PathBuf,
        /// Grid points from 0 to 1
        #[arg(long, default_value_t = 101)]
        points: usize,
        /// CSV path (stdout when absent)
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the number of trainable parameters.
    ParamCount {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        net: NetFlags,
        /// Also print per-layer counts
        #[arg(long)]
        breakdown: bool,
    },
    /// Finite-difference check of the full network gradient.
    GradCheck {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        net: NetFlags,
        /// Run in 64-bit precision (required)
        #[arg(long)]
        f64: bool,
        /// Windows in the probe batch
        #[arg(long, default_value_t = 2)]
        batch: usize,
        /// Probed elements per tensor
        #[arg(long, default_value_t = 8)]
        samples: usize,
        /// Finite-difference step
        #[arg(long, default_value_t = 1e-6)]
        eps: f64,
        /// Pass threshold on the maximum relative error
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
}

/// Errors that map to a usage exit code versus a runtime failure.
enum Failure {
    Usage(String),
    Run(String),
}

impl From<mscnn::Error> for Failure {
    fn from(e: mscnn::Error) -> Self {
        Failure::Run(e.to_string())
    }
}

type Outcome = Result<(), Failure>;

fn run_err(e: impl std::fmt::Display) -> Failure {
    Failure::Run(e.to_string())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Run(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
    }
}

fn load_config(common: &Common) -> Result<RunConfig, Failure> {
    let mut config = match &common.config {
        Some(p) => RunConfig::load(p).map_err(Failure::Usage)?,
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        config.seed = s;
    }
    if let Some(t) = common.threads {
        config.threads = t;
    }
    config.train.seed = config.seed;
    if config.threads > 0 {
        // only fails if a pool already exists, which cannot happen this early
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(config.threads)
            .build_global();
    }
    Ok(config)
}

fn apply_net(config: &mut NetworkConfig, flags: &NetFlags) -> Outcome {
    if flags.width_scale.is_none() && flags.window.is_none() {
        return Ok(());
    }
    if let Some(s) = flags.width_scale {
        config.width_scale = s;
    }
    if let Some(w) = flags.window {
        config.window = w;
    }
    config.fc_in = config.shape_trace().map_err(|e| Failure::Usage(e.to_string()))?.flatten;
    Ok(())
}

fn apply_train(config: &mut TrainConfig, flags: &TrainFlags) {
    if let Some(v) = flags.epochs {
        config.epochs = v;
    }
    if let Some(v) = flags.batch_size {
        config.batch_size = v;
    }
    if let Some(v) = flags.lr0 {
        config.lr0 = v;
    }
    if let Some(v) = flags.positive_windows {
        config.positive_windows = v;
    }
    if let Some(v) = flags.negative_windows {
        config.negative_windows = v;
    }
    if flags.no_augment {
        config.augment = false;
    }
}

fn apply_eval(config: &mut RunConfig, flags: &EvalFlags) -> Outcome {
    if let Some(s) = flags.stride {
        config.stride = s;
    }
    if let Some(t) = flags.tau {
        config.tau = t;
    }
    if let Some(p) = flags.positive_set {
        config.positive_set = p.into();
    }
    if !(0.0..=1.0).contains(&config.tau) {
        return Err(Failure::Usage(format!("--tau {} outside [0, 1]", config.tau)));
    }
    if config.stride == 0 {
        return Err(Failure::Usage("--stride must be >= 1".into()));
    }
    Ok(())
}

fn required(path: Option<PathBuf>, fallback: &Option<PathBuf>, flag: &str) -> Result<PathBuf, Failure> {
    path.or_else(|| fallback.clone())
        .ok_or_else(|| Failure::Usage(format!("--{flag} is required (or set `{flag}` in the config)")))
}

fn select(records: Vec<SliceRecord>, fold: Option<u8>, ids: &[String]) -> Result<Vec<SliceRecord>, Failure> {
    let mut out = match fold {
        Some(k) => fold_split(&records, k)?.1,
        None => records,
    };
    if !ids.is_empty() {
        for id in ids {
            if !out.iter().any(|r| &r.id == id) {
                return Err(Failure::Run(format!("no slice with id {id:?}")));
            }
        }
        out.retain(|r| ids.contains(&r.id));
    }
    if out.is_empty() {
        return Err(Failure::Run("selection contains no slices".into()));
    }
    Ok(out)
}

fn print_epoch(e: &EpochStats) {
    println!(
        "epoch {:>3}  lr {:.6}  loss {:.5}  window-accuracy {:.4}  {:.1}s",
        e.epoch, e.lr, e.loss, e.accuracy, e.seconds
    );
}

fn to_json<T: Serialize>(value: &T) -> Result<String, Failure> {
    serde_json::to_string_pretty(value).map_err(run_err)
}

fn write_or_print(path: Option<&Path>, text: &str) -> Outcome {
    match path {
        Some(p) => fs::write(p, text).map_err(|e| Failure::Run(format!("{}: {e}", p.display()))),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn label_files(paths: &[PathBuf]) -> Result<Vec<PathBuf>, Failure> {
    let mut out = Vec::new();
    for p in paths {
        if p.is_dir() {
            let mut found: Vec<PathBuf> = fs::read_dir(p)
                .map_err(|e| Failure::Run(format!("{}: {e}", p.display())))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| f.extension().is_some_and(|x| x == "labels"))
                .collect();
            found.sort();
            out.extend(found);
        } else {
            out.push(p.clone());
        }
    }
    Ok(out)
}

fn dispatch(command: Command) -> Outcome {
    match command {
        Command::GenSynthetic {
            common,
            out,
            slices,
            size,
        } => {
            let config = load_config(&common)?;
            if size < MIN_PHANTOM_SIZE {
                return Err(Failure::Usage(format!("--size must be at least {MIN_PHANTOM_SIZE}")));
            }
            let records = gen_synthetic(&out, slices, size, config.seed)?;
            println!("wrote {} slices to {}", records.len(), out.display());
            Ok(())
        }

        Command::Train {
            common,
            data,
            out,
            fold,
            resume: from,
            net,
            train: flags,
        } => {
            let mut config = load_config(&common)?;
            apply_net(&mut config.network, &net)?;
            apply_train(&mut config.train, &flags);
            let data = required(data, &config.data, "data")?;
            let out = required(out, &config.out, "out")?;
            let records = load_dataset(&data)?;
            let records = match fold {
                Some(k) => fold_split(&records, k)?.0,
                None => records,
            };
            let outcome = match from {
                Some(path) => {
                    let ck = Checkpoint::load(&path)?;
                    resume(ck, &records, &config.train, Some(&out), &mut print_epoch)?
                }
                None => {
                    config.network.validate()?;
                    let network = Network::build(config.network.clone(), &mut seed::rng(config.seed, Stream::Init))?;
                    train(network, &records, &config.train, Some(&out), &mut print_epoch)?
                }
            };
            println!(
                "trained {} epochs on {} slices; checkpoint {}",
                outcome.checkpoint.epoch,
                records.len(),
                out.join(mscnn::train::FINAL_CHECKPOINT).display()
            );
            Ok(())
        }

        Command::CrossValidate {
            common,
            data,
            out,
            folds,
            net,
            train: flags,
            eval,
        } => {
            let mut config = load_config(&common)?;
            apply_net(&mut config.network, &net)?;
            apply_train(&mut config.train, &flags);
            apply_eval(&mut config, &eval)?;
            let data = required(data, &config.data, "data")?;
            let out = required(out, &config.out, "out")?;
            let records = load_dataset(&data)?;
            let cv = cross_validate(
                &records,
                &config.network,
                &config.train,
                &config.eval_options(),
                &folds,
                Some(&out),
                &mut |k, e| {
                    print!("fold {k}  ");
                    print_epoch(e);
                },
            )?;
            #[derive(Serialize)]
            struct Summary<'a> {
                folds: Vec<(u8, &'a mscnn::metrics::Aggregate)>,
                aggregate: &'a mscnn::metrics::Aggregate,
            }
            let summary = Summary {
                folds: cv.folds.iter().map(|f| (f.fold, &f.report.aggregate)).collect(),
                aggregate: &cv.aggregate,
            };
            let json = to_json(&summary)?;
            write_or_print(Some(&out.join("summary.json")), &json)?;
            println!("{json}");
            Ok(())
        }

        Command::Segment {
            common,
            checkpoint,
            data,
            out,
            fold,
            ids,
            eval,
            overlay,
        } => {
            let mut config = load_config(&common)?;
            apply_eval(&mut config, &eval)?;
            let data = required(data, &config.data, "data")?;
            let out = required(out, &config.out, "out")?;
            let ck = Checkpoint::load(&checkpoint)?;
            let records = select(load_dataset(&data)?, fold, &ids)?;
            fs::create_dir_all(&out).map_err(|e| Failure::Run(format!("{}: {e}", out.display())))?;
            let opts = SegmentOptions {
                stride: config.stride,
                batch: config.batch,
                checkpoint: checkpoint.display().to_string(),
            };
            for r in &records {
                let map = segment_slice(&ck.network, r, &opts)?;
                write_label_map(&out.join(format!("{}.labels", r.id)), &map)?;
                if overlay {
                    write_overlay(&out.join(format!("{}.png", r.id)), &r.image, &map, &r.mask)?;
                }
                println!("{}", r.id);
            }
            Ok(())
        }

        Command::Classify { common, labels, eval } => {
            let mut config = load_config(&common)?;
            apply_eval(&mut config, &eval)?;
            let mut csv = String::from("slice_id,predicted,r1,r2,r3\n");
            for path in label_files(&labels)? {
                let map = read_label_map(&path)?;
                let scores = class_scores(&map.labels);
                let predicted = predict_label(&scores, config.tau)?.map_or(-1, i32::from);
                let r = scores.ratios();
                csv.push_str(&format!("{},{predicted},{},{},{}\n", map.meta.slice_id, r[0], r[1], r[2]));
            }
            print!("{csv}");
            Ok(())
        }

        Command::Evaluate {
            common,
            data,
            labels,
            checkpoint,
            fold,
            out,
            histograms,
            bins,
            eval,
        } => {
            let mut config = load_config(&common)?;
            apply_eval(&mut config, &eval)?;
            let data = required(data, &config.data, "data")?;
            let records = select(load_dataset(&data)?, fold, &[])?;
            let (tau, set) = (config.tau, config.positive_set);
            let mut slices = Vec::new();
            if let Some(dir) = labels {
                for r in &records {
                    let path = dir.join(format!("{}.labels", r.id));
                    if fold.is_none() && !path.exists() {
                        continue;
                    }
                    slices.push(evaluate_slice(&read_label_map(&path)?, r, tau, set)?);
                }
            } else if let Some(ck) = checkpoint {
                let ck = Checkpoint::load(&ck)?;
                let opts = SegmentOptions {
                    stride: config.stride,
                    batch: config.batch,
                    checkpoint: String::new(),
                };
                for r in &records {
                    slices.push(evaluate_slice(&segment_slice(&ck.network, r, &opts)?, r, tau, set)?);
                }
            }
            if slices.is_empty() {
                return Err(Failure::Run("no label maps matched the dataset".into()));
            }
            if let Some(h) = histograms {
                write_or_print(Some(&h), &metric_histograms(&slices, bins)?.to_csv())?;
            }
            let report = EvalReport::new(slices, tau, set)?;
            match out {
                Some(p) => {
                    report.write_json(&p)?;
                    let a = &report.aggregate;
                    println!(
                        "slices {}  accuracy {:.4}  dice {:.4}  sensitivity {:.4}  pttas {:.4}  nonclassified {}",
                        a.slices, a.accuracy, a.mean_dice, a.mean_sensitivity, a.mean_pttas, a.nonclassified
                    );
                }
                None => println!("{}", to_json(&report)?),
            }
            Ok(())
        }

        Command::SweepThreshold {
            common,
            report,
            points,
            out,
        } => {
            load_config(&common)?;
            if points == 0 {
                return Err(Failure::Usage("--points must be >= 1".into()));
            }
            let report = EvalReport::read_json(&report)?;
            let rows = threshold_sweep(&report.sweep_pairs(), &tau_grid(points))?;
            write_or_print(out.as_deref(), &sweep_csv(&rows))
        }

        Command::ParamCount { common, net, breakdown } => {
            let mut config = load_config(&common)?;
            apply_net(&mut config.network, &net)?;
            config.network.validate()?;
            let network = Network::<f32>::build(config.network, &mut seed::rng(config.seed, Stream::Init))?;
            println!("{}", network.param_count());
            if breakdown {
                for (i, n) in network.layer_param_counts().iter().enumerate() {
                    println!("layer {i}: {n}");
                }
            }
            Ok(())
        }

        Command::GradCheck {
            common,
            net,
            f64,
            batch,
            samples,
            eps,
            tolerance,
        } => {
            let mut config = load_config(&common)?;
            if !(f64 || config.precision == Precision::F64) {
                return Err(Failure::Usage(
                    "gradient checks need 64-bit precision; pass --f64".into(),
                ));
            }
            apply_net(&mut config.network, &net)?;
            config.network.validate()?;
            let report = check_network(config.network, config.seed, batch, samples, eps)?;
            println!("max relative error {:.3e}", report.max_relative_error);
            println!("checked {} probes, skipped {} at kinks", report.checked, report.skipped);
            if let Some((name, at, a, n)) = &report.worst {
                println!("worst: {name}[{at}] analytic {a:.6e} numeric {n:.6e}");
            }
            if report.max_relative_error < tolerance {
                println!("PASS");
                Ok(())
            } else {
                Err(Failure::Run(format!(
                    "max relative error {:.3e} >= {tolerance:e}",
                    report.max_relative_error
                )))
            }
        }
    }
}
