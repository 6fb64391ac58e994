//! Command-line surface of the pipeline.
//!
//! Exit codes: 0 success, 2 validation/protocol errors, 3 I/O and
//! format errors.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use facerep::bench::{
    self, compare_fixture, evaluate, sweep, CPolicy, FeatureBank, ReportMeta, SweepOptions,
};
use facerep::config::Config;
use facerep::data::{attach_partition, decode_image, parse_attr_list, parse_partition, Split};
use facerep::error::{Error, Result};
use facerep::formats::{
    load_feature_cache, load_weights, save_feature_cache, save_weights, FeatureRecord,
};
use facerep_core::featex::{condense_c6, extract, Region};
use facerep_core::netdef::{build_network, init_weights, Layer, LayerOp, NetConfig, TapPoint};
use facerep_core::patch::preprocess;
use facerep_core::tensor::PoolMode;
use facerep_core::trainer::{grad_check, train_cnn, Sample, TrainConfig};
use facerep_core::Tensor;

#[derive(Parser)]
#[command(name = "facerep", version, about = "Hierarchical face-attribute representation pipeline")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// key=value configuration file
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// RNG seed for the subcommand
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Worker threads (accepted for interface stability; execution is
    /// single-threaded)
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Create a randomly initialized weight file
    InitWeights {
        #[arg(long)]
        out: PathBuf,
        /// Build the 224-input variant
        #[arg(long)]
        doubled: bool,
        /// Attach an N-way classification head
        #[arg(long)]
        classes: Option<usize>,
    },
    /// Train the network on labeled identities (toy scale)
    TrainCnn {
        /// Lines: "filename class split" with split 0=train 1=val
        #[arg(long)]
        labels: PathBuf,
        /// Directory containing the listed images
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Where to write the JSON training log
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Extract the seven pooled representations into a feature cache
    Extract {
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Image id assigned to the first image; subsequent images count up
        #[arg(long, default_value_t = 0)]
        first_id: u32,
        /// Also print the condensed C6 length for each image
        #[arg(long, value_parser = ["upper", "lower"])]
        condense: Option<String>,
        /// Input images (PPM/PGM/MRT1), pre-aligned 120x120
        #[arg(required = true)]
        images: Vec<PathBuf>,
    },
    /// Train the 40x7 SVM grid and report the per-attribute selection
    Sweep {
        #[command(flatten)]
        bench: BenchArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Sweep, then evaluate the chosen models on the test split
    Evaluate {
        #[command(flatten)]
        bench: BenchArgs,
        /// Dataset name recorded in the report (celeba / lfwa / ...)
        #[arg(long, default_value = "celeba")]
        dataset: String,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value = "report")]
        stem: String,
    },
    /// Re-emit a stored report and optionally diff it against a fixture
    Report {
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        out_dir: Option<PathBuf>,
        #[arg(long, default_value = "report")]
        stem: String,
        /// Per-attribute accuracy fixture CSV (attribute,celeba,lfwa)
        #[arg(long)]
        fixture: Option<PathBuf>,
        #[arg(long, default_value_t = 0.5)]
        tolerance: f64,
    },
    /// Finite-difference verification of the backward passes
    GradCheck {
        #[arg(long, default_value_t = 200)]
        probes: usize,
        #[arg(long, default_value_t = 1e-5)]
        h: f64,
        #[arg(long, default_value_t = 1e-6)]
        tolerance: f64,
    },
}

#[derive(Args)]
struct BenchArgs {
    /// Feature cache produced by `extract`
    #[arg(long)]
    cache: PathBuf,
    /// Attribute list (CelebA layout)
    #[arg(long)]
    list: PathBuf,
    /// Partition file: "filename idx" with 0=train 1=val 2=test
    #[arg(long)]
    partition: PathBuf,
    #[arg(long, value_parser = ["train", "val"], default_value = "train")]
    selection_split: String,
    /// Fixed C, or a comma-separated grid chosen on the validation split
    #[arg(long, default_value = "1.0")]
    c: String,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn load_config(common: &Common) -> Result<Config> {
    match &common.config {
        Some(path) => Config::from_file(path),
        None => Ok(Config::default()),
    }
}

fn run(cli: &Cli) -> Result<()> {
    if cli.common.threads == 0 {
        return Err(Error::Protocol("--threads must be >= 1".into()));
    }
    let config = load_config(&cli.common)?;
    match &cli.command {
        Command::InitWeights { out, doubled, classes } => {
            let spec = build_network(&NetConfig::Standard { doubled: *doubled, num_classes: *classes })?;
            let store = init_weights::<f32>(&spec, cli.common.seed);
            save_weights(&store, out)?;
            println!(
                "wrote {} ({} parameter sets, seed {})",
                out.display(),
                store.entries.len(),
                cli.common.seed
            );
            Ok(())
        }
        Command::TrainCnn { labels, images, out, log } => cmd_train(cli, &config, labels, images, out, log.as_deref()),
        Command::Extract { weights, out, first_id, condense, images } => {
            cmd_extract(weights, out, *first_id, condense.as_deref(), images)
        }
        Command::Sweep { bench, out } => {
            let (result, _, _) = run_sweep(cli, bench)?;
            let summary = serde_json::json!({
                "attributes": result.attributes,
                "reps": result.reps,
                "selection_grid": result.selection_grid,
                "chosen": result.chosen.iter().map(|&i| result.reps[i].clone()).collect::<Vec<_>>(),
                "selection_split": result.selection_split.name(),
            });
            let text = serde_json::to_string_pretty(&summary).expect("summary serializes");
            match out {
                Some(path) => std::fs::write(path, text).map_err(|e| Error::io(path, e))?,
                None => println!("{text}"),
            }
            Ok(())
        }
        Command::Evaluate { bench: args, dataset, out_dir, stem } => {
            let (result, bank, table) = run_sweep(cli, args)?;
            let meta = ReportMeta {
                dataset: dataset.clone(),
                weights_hash: String::new(),
                seed: cli.common.seed,
                selection_split: result.selection_split.name().to_string(),
            };
            let report = evaluate(&result, &bank, &table, Split::Test, meta)?;
            std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
            bench::write_report(&report, out_dir, stem)?;
            println!(
                "overall mean {:.4}% over {} attributes -> {}",
                report.overall_mean_pct,
                report.attributes.len(),
                out_dir.join(format!("{stem}.json")).display()
            );
            Ok(())
        }
        Command::Report { report, out_dir, stem, fixture, tolerance } => {
            let text = std::fs::read_to_string(report).map_err(|e| Error::io(report, e))?;
            let parsed = bench::parse_report_json(&text)?;
            if let Some(dir) = out_dir {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                bench::write_report(&parsed, dir, stem)?;
            }
            if let Some(fx) = fixture {
                let diffs = compare_fixture(&parsed, fx, *tolerance)?;
                let failed = diffs.iter().filter(|d| !d.pass).count();
                for d in &diffs {
                    println!(
                        "{}: report {:.4} fixture {:.4} delta {:+.4} [{}]",
                        d.name,
                        d.report_value,
                        d.fixture_value,
                        d.delta,
                        if d.pass { "ok" } else { "FAIL" }
                    );
                }
                if failed > 0 {
                    return Err(Error::Fixture(format!("{failed} cells exceed tolerance {tolerance}")));
                }
            }
            Ok(())
        }
        Command::GradCheck { probes, h, tolerance } => cmd_grad_check(cli, *probes, *h, *tolerance),
    }
}

fn cmd_extract(
    weights: &Path,
    out: &Path,
    first_id: u32,
    condense: Option<&str>,
    images: &[PathBuf],
) -> Result<()> {
    let store = load_weights(weights)?;
    let doubled = store.meta.input_side == 224;
    let spec = build_network(&NetConfig::Standard { doubled, num_classes: None })?;
    store.validate_against(&spec)?;
    let mut records = Vec::new();
    for (i, path) in images.iter().enumerate() {
        let image = decode_image(path)?;
        let patch = preprocess(&image, doubled, first_id + i as u32)?;
        let reps = extract(&spec, &store, &patch.data)?;
        for tap in TapPoint::ALL {
            let v = reps.get(tap).expect("extract yields every tap");
            records.push(FeatureRecord {
                image_id: first_id + i as u32,
                rep_id: tap.rep_id(),
                values: v.to_vec(),
            });
        }
        if let Some(region) = condense {
            let region = if region == "upper" { Region::Upper } else { Region::Lower };
            let c = condense_c6(&reps, region)?;
            println!("{}: condensed C6 ({region:?}) length {}", path.display(), c.len());
        }
    }
    save_feature_cache(&records, out)?;
    println!("wrote {} records to {}", records.len(), out.display());
    Ok(())
}

fn run_sweep(
    cli: &Cli,
    args: &BenchArgs,
) -> Result<(bench::SweepResult, FeatureBank, facerep::data::AttributeTable)> {
    let mut table = parse_attr_list(&args.list)?;
    let partition = parse_partition(&args.partition)?;
    attach_partition(&mut table, partition)?;
    let bank = FeatureBank::from_records(load_feature_cache(&args.cache)?);
    let c_policy = parse_c_policy(&args.c)?;
    let options = SweepOptions {
        selection_split: if args.selection_split == "val" { Split::Val } else { Split::Train },
        c_policy,
        seed: cli.common.seed,
    };
    let result = sweep(&bank, &table, &options)?;
    Ok((result, bank, table))
}

fn parse_c_policy(raw: &str) -> Result<CPolicy> {
    let values = raw
        .split(',')
        .map(|t| {
            t.trim()
                .parse::<f32>()
                .map_err(|_| Error::Protocol(format!("bad C value {t:?}")))
        })
        .collect::<Result<Vec<f32>>>()?;
    match values.as_slice() {
        [] => Err(Error::Protocol("empty C policy".into())),
        [c] => Ok(CPolicy::Fixed(*c)),
        _ => Ok(CPolicy::Grid(values)),
    }
}

fn cmd_train(
    cli: &Cli,
    config: &Config,
    labels: &Path,
    images: &Path,
    out: &Path,
    log_path: Option<&Path>,
) -> Result<()> {
    let text = std::fs::read_to_string(labels).map_err(|e| Error::io(labels, e))?;
    let mut train = Vec::new();
    let mut val = Vec::new();
    let mut classes = 0usize;
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split_whitespace().collect();
        if parts.len() != 3 {
            return Err(Error::parse(labels, idx + 1, "expected: filename class split"));
        }
        let class: usize = parts[1]
            .parse()
            .map_err(|_| Error::parse(labels, idx + 1, format!("bad class {:?}", parts[1])))?;
        classes = classes.max(class + 1);
        let image = decode_image(&images.join(parts[0]))?;
        let sample = Sample { image, label: class };
        match parts[2] {
            "0" => train.push(sample),
            "1" => val.push(sample),
            other => {
                return Err(Error::parse(labels, idx + 1, format!("bad split {other:?} (0 or 1)")))
            }
        }
    }

    let spec = build_training_spec(config, classes)?;
    let train_config = TrainConfig {
        base_lr: config.get_or("base_lr", 0.015)?,
        lr_decay_factor: config.get_or("lr_decay_factor", 0.1)?,
        plateau_patience: config.get_or("plateau_patience", 3)?,
        max_decays: config.get_or("max_decays", 2)?,
        momentum: config.get_or("momentum", 0.9)?,
        batch_size: config.get_or("batch_size", 16)?,
        weight_decay: config.get_or("weight_decay", 0.0)?,
        seed: cli.common.seed,
        max_epochs: config.get_or("max_epochs", 30)?,
    };
    let t0 = Instant::now();
    let mut clock = move || t0.elapsed().as_secs_f64();
    let (store, log) = train_cnn(&spec, &train, &val, &train_config, Some(&mut clock))?;
    save_weights(&store, out)?;
    println!(
        "best val accuracy {:.4} at epoch {}; wrote {}",
        log.best_val_accuracy,
        log.best_epoch,
        out.display()
    );
    if let Some(path) = log_path {
        let rows: Vec<serde_json::Value> = log
            .epochs
            .iter()
            .map(|e| {
                serde_json::json!({
                    "epoch": e.epoch,
                    "train_loss": e.train_loss,
                    "val_accuracy": e.val_accuracy,
                    "lr": e.lr,
                    "wall_secs": e.wall_secs,
                })
            })
            .collect();
        let doc = serde_json::json!({
            "initial_loss": log.initial_loss,
            "epochs": rows,
            "decay_events": log.decay_events,
            "best_val_accuracy": log.best_val_accuracy,
            "best_epoch": log.best_epoch,
        });
        std::fs::write(path, serde_json::to_string_pretty(&doc).expect("log serializes"))
            .map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

/// `net=standard` trains the full stack; the default is a reduced-width
/// stack that keeps toy runs fast on one core.
fn build_training_spec(config: &Config, classes: usize) -> Result<facerep_core::netdef::NetworkSpec> {
    if classes < 2 {
        return Err(Error::Protocol(format!("need >= 2 classes, found {classes}")));
    }
    match config.raw("net").unwrap_or("toy") {
        "standard" => Ok(build_network(&NetConfig::Standard { doubled: false, num_classes: Some(classes) })?),
        "toy" => {
            let layers = vec![
                Layer {
                    name: "C1".to_string(),
                    op: LayerOp::Conv { in_ch: 3, out_ch: 8, kernel: 3, stride: 2, padding: 1, prelu: true },
                    tap: None,
                },
                Layer {
                    name: "P1".to_string(),
                    op: LayerOp::Pool { mode: PoolMode::Max, window: 4, stride: 4 },
                    tap: None,
                },
                Layer {
                    name: "P2".to_string(),
                    op: LayerOp::Pool { mode: PoolMode::Average, window: 14, stride: 14 },
                    tap: None,
                },
                Layer { name: "Flatten".to_string(), op: LayerOp::Flatten, tap: None },
                Layer {
                    name: "Head".to_string(),
                    op: LayerOp::Affine { in_dim: 8, out_dim: classes, prelu: false },
                    tap: None,
                },
            ];
            Ok(build_network(&NetConfig::Custom {
                layers,
                input_side: 112,
                num_classes: Some(classes),
            })?)
        }
        other => Err(Error::Protocol(format!("unknown net preset {other:?}"))),
    }
}

fn cmd_grad_check(cli: &Cli, probes: usize, h: f64, tolerance: f64) -> Result<()> {
    // Width-reduced analogue of the full stack at S=56: every layer kind
    // is exercised, at a cost that suits repeated probing.
    let layers = vec![
        Layer {
            name: "C1".to_string(),
            op: LayerOp::Conv { in_ch: 3, out_ch: 4, kernel: 3, stride: 2, padding: 1, prelu: true },
            tap: None,
        },
        Layer {
            name: "N1".to_string(),
            op: LayerOp::Lrn(facerep_core::tensor::LrnParams::window5()),
            tap: None,
        },
        Layer {
            name: "C2".to_string(),
            op: LayerOp::Conv { in_ch: 4, out_ch: 6, kernel: 1, stride: 1, padding: 0, prelu: true },
            tap: None,
        },
        Layer {
            name: "P1".to_string(),
            op: LayerOp::Pool { mode: PoolMode::Max, window: 2, stride: 2 },
            tap: None,
        },
        Layer {
            name: "P2".to_string(),
            op: LayerOp::Pool { mode: PoolMode::Average, window: 14, stride: 14 },
            tap: None,
        },
        Layer { name: "Flatten".to_string(), op: LayerOp::Flatten, tap: None },
        Layer {
            name: "F1".to_string(),
            op: LayerOp::Affine { in_dim: 6, out_dim: 8, prelu: true },
            tap: None,
        },
        Layer { name: "Drop".to_string(), op: LayerOp::Dropout { rate: 0.5 }, tap: None },
        Layer {
            name: "Head".to_string(),
            op: LayerOp::Affine { in_dim: 8, out_dim: 3, prelu: false },
            tap: None,
        },
    ];
    let spec = build_network(&NetConfig::Custom { layers, input_side: 56, num_classes: Some(3) })?;
    let store = init_weights::<f64>(&spec, cli.common.seed);
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(cli.common.seed ^ 0x5eed);
    let input = Tensor::from_fn(&[3, 56, 56], |_| rng.random::<f64>() * 2.0 - 1.0);
    let err = grad_check(&spec, &store, &input, 1, probes, h, cli.common.seed)?;
    println!("max relative error over {probes} probes: {err:.3e}");
    if err > tolerance {
        return Err(Error::Protocol(format!(
            "gradient check failed: {err:.3e} > tolerance {tolerance:.1e}"
        )));
    }
    Ok(())
}
