//! Command-line entry point: synthetic data generation, pretraining, the
//! evaluation protocols, stream fusion and embedding export.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};

use aimclr::checkpoint::load_checkpoint;
use aimclr::encoder::ModelParams;
use aimclr::error::Error;
use aimclr::eval::{
    export_embeddings, finetune_eval, fuse_streams, knn_eval, linear_eval, ClassifierOpts,
    EvalReport, ScoreSet,
};
use aimclr::skeleton::{
    apply_stream, generate_synthetic, load_dataset, DatasetManifest, SkeletonGraph,
    SkeletonSequence, Stream,
};
use aimclr::train::{run_pretraining, TrainConfig};

#[derive(Parser)]
#[command(
    name = "aimclr",
    version,
    about = "Contrastive pretraining and evaluation for skeleton action sequences"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a labeled synthetic dataset (SKL1 files + manifest + graph).
    Synth {
        #[arg(long, default_value_t = 4)]
        classes: usize,
        /// Training samples per class.
        #[arg(long = "per-class", default_value_t = 64)]
        per_class: usize,
        /// Extra held-out samples per class, written to test_manifest.json.
        #[arg(long = "test-per-class", default_value_t = 0)]
        test_per_class: usize,
        #[arg(long, default_value_t = 32)]
        frames: usize,
        #[arg(long, default_value_t = 9)]
        joints: usize,
        #[arg(long, default_value_t = 1)]
        persons: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Two-stage contrastive pretraining.
    Pretrain {
        /// JSON config; every omitted field takes its default.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Dataset manifest.
        #[arg(long)]
        data: PathBuf,
        /// Skeleton graph JSON; defaults to graph.json beside the manifest.
        #[arg(long)]
        graph: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides the config stream (joint|bone|motion).
        #[arg(long)]
        stream: Option<Stream>,
        /// Resume from a saved training state.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Nearest-neighbor evaluation of frozen encoder features.
    EvalKnn {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        test: PathBuf,
        #[arg(long)]
        graph: Option<PathBuf>,
        /// Config used for pretraining; defaults to config.json beside the checkpoint.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        k: usize,
        #[arg(long)]
        stream: Option<Stream>,
        #[arg(long = "report-out")]
        report_out: Option<PathBuf>,
    },
    /// Linear probe on frozen encoder features.
    EvalLinear {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        test: PathBuf,
        #[arg(long)]
        graph: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 60)]
        epochs: usize,
        #[arg(long, default_value_t = 0.5)]
        lr: f64,
        #[arg(long)]
        stream: Option<Stream>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long = "scores-out")]
        scores_out: Option<PathBuf>,
        #[arg(long = "report-out")]
        report_out: Option<PathBuf>,
    },
    /// Finetune the whole model on a labeled fraction of the train set.
    Finetune {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        test: PathBuf,
        #[arg(long)]
        graph: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "label-fraction", default_value_t = 1.0)]
        label_fraction: f64,
        #[arg(long, default_value_t = 15)]
        epochs: usize,
        #[arg(long, default_value_t = 0.01)]
        lr: f64,
        #[arg(long)]
        stream: Option<Stream>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long = "scores-out")]
        scores_out: Option<PathBuf>,
        #[arg(long = "report-out")]
        report_out: Option<PathBuf>,
    },
    /// Weighted fusion of per-stream score files.
    Fuse {
        /// Score files produced by eval-linear/finetune, one per stream.
        #[arg(long = "scores", required = true)]
        scores: Vec<PathBuf>,
        /// Comma-separated weights, one per score file (default 0.6,0.6,0.4).
        #[arg(long, default_value = "0.6,0.6,0.4")]
        weights: String,
        #[arg(long = "report-out")]
        report_out: Option<PathBuf>,
    },
    /// Write pooled encoder features as line-delimited JSON records.
    ExportEmbeddings {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        graph: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        stream: Option<Stream>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

/// Loaded evaluation inputs: config, weights, graph and both datasets in the
/// requested stream.
struct EvalContext {
    cfg: TrainConfig,
    params: ModelParams,
    graph: SkeletonGraph,
    train: Vec<SkeletonSequence>,
    test: Vec<SkeletonSequence>,
    num_classes: usize,
    stream: Stream,
}

fn sibling(path: &Path, name: &str) -> PathBuf {
    path.parent().unwrap_or(Path::new(".")).join(name)
}

fn resolve_config(ckpt: &Path, explicit: Option<&PathBuf>) -> Result<TrainConfig, Error> {
    let path = match explicit {
        Some(p) => p.clone(),
        None => {
            let p = sibling(ckpt, "config.json");
            if !p.exists() {
                return Err(Error::invalid(
                    "config",
                    format!(
                        "no --config given and {} does not exist; pass --config",
                        p.display()
                    ),
                ));
            }
            p
        }
    };
    TrainConfig::load(&path)
}

fn resolve_graph(manifest: &Path, explicit: Option<&PathBuf>) -> Result<SkeletonGraph, Error> {
    let path = match explicit {
        Some(p) => p.clone(),
        None => {
            let p = sibling(manifest, "graph.json");
            if !p.exists() {
                return Err(Error::invalid(
                    "graph",
                    format!(
                        "no --graph given and {} does not exist; pass --graph",
                        p.display()
                    ),
                ));
            }
            p
        }
    };
    SkeletonGraph::load(&path)
}

#[allow(clippy::too_many_arguments)]
fn load_eval_context(
    ckpt: &Path,
    config: Option<&PathBuf>,
    graph: Option<&PathBuf>,
    train: &Path,
    test: &Path,
    stream: Option<Stream>,
) -> Result<EvalContext, Error> {
    let cfg = resolve_config(ckpt, config)?;
    let params = load_checkpoint(ckpt, &cfg.encoder)?;
    let graph = resolve_graph(train, graph)?;
    let stream = stream.unwrap_or(cfg.stream);
    let train_manifest = DatasetManifest::load(train)?;
    let test_manifest = DatasetManifest::load(test)?;
    if train_manifest.num_classes != test_manifest.num_classes {
        return Err(Error::InvalidManifest(format!(
            "train has {} classes, test has {}",
            train_manifest.num_classes, test_manifest.num_classes
        )));
    }
    let to_stream = |seqs: Vec<SkeletonSequence>| -> Result<Vec<SkeletonSequence>, Error> {
        seqs.iter().map(|s| apply_stream(s, stream, &graph)).collect()
    };
    let train_data = to_stream(load_dataset(train)?)?;
    let test_data = to_stream(load_dataset(test)?)?;
    Ok(EvalContext {
        num_classes: train_manifest.num_classes,
        cfg,
        params,
        graph,
        train: train_data,
        test: test_data,
        stream,
    })
}

fn emit_report(report: &EvalReport, report_out: Option<&PathBuf>) -> Result<(), Error> {
    print!("{}", report.render());
    if let Some(p) = report_out {
        report.save(p)?;
        println!("report written to {}", p.display());
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Synth {
            classes,
            per_class,
            test_per_class,
            frames,
            joints,
            persons,
            seed,
            out,
        } => {
            let total = per_class + test_per_class;
            let manifest =
                generate_synthetic(&out, classes, total, frames, joints, persons, seed, "seq_")?;
            let mut train_entries = Vec::new();
            let mut test_entries = Vec::new();
            for (i, e) in manifest.entries.iter().enumerate() {
                if i % total < per_class {
                    train_entries.push(e.clone());
                } else {
                    test_entries.push(e.clone());
                }
            }
            let train_manifest = DatasetManifest {
                num_classes: classes,
                entries: train_entries,
            };
            train_manifest.save(&out.join("manifest.json"))?;
            println!(
                "wrote {} training sequences to {}",
                train_manifest.entries.len(),
                out.join("manifest.json").display()
            );
            if test_per_class > 0 {
                let test_manifest = DatasetManifest {
                    num_classes: classes,
                    entries: test_entries,
                };
                test_manifest.save(&out.join("test_manifest.json"))?;
                println!(
                    "wrote {} test sequences to {}",
                    test_manifest.entries.len(),
                    out.join("test_manifest.json").display()
                );
            }
            println!("graph written to {}", out.join("graph.json").display());
            Ok(())
        }
        Command::Pretrain {
            config,
            data,
            graph,
            out,
            seed,
            stream,
            resume,
        } => {
            let mut cfg = match config {
                Some(p) => TrainConfig::load(&p)?,
                None => TrainConfig::default(),
            };
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(s) = stream {
                cfg.stream = s;
            }
            let graph_path = match graph {
                Some(p) => p,
                None => {
                    let p = sibling(&data, "graph.json");
                    if !p.exists() {
                        return Err(Error::invalid(
                            "graph",
                            format!("no --graph given and {} does not exist", p.display()),
                        ));
                    }
                    p
                }
            };
            let summary = run_pretraining(&cfg, &data, &graph_path, &out, resume.as_deref())?;
            println!("metrics: {}", summary.metrics_path.display());
            println!("last checkpoint: {}", summary.last_checkpoint.display());
            println!("last state: {}", summary.last_state.display());
            if let Some(final_loss) = summary.loss_history.last() {
                println!("final epoch mean loss: {final_loss:.6}");
            }
            Ok(())
        }
        Command::EvalKnn {
            ckpt,
            train,
            test,
            graph,
            config,
            k,
            stream,
            report_out,
        } => {
            let ctx = load_eval_context(&ckpt, config.as_ref(), graph.as_ref(), &train, &test, stream)?;
            let report = knn_eval(
                &ctx.params,
                &ctx.cfg.encoder,
                &ctx.graph,
                &ctx.train,
                &ctx.test,
                ctx.num_classes,
                k,
                &ctx.stream.to_string(),
            )?;
            emit_report(&report, report_out.as_ref())
        }
        Command::EvalLinear {
            ckpt,
            train,
            test,
            graph,
            config,
            epochs,
            lr,
            stream,
            seed,
            scores_out,
            report_out,
        } => {
            let ctx = load_eval_context(&ckpt, config.as_ref(), graph.as_ref(), &train, &test, stream)?;
            let opts = ClassifierOpts {
                epochs,
                lr,
                seed,
                ..ClassifierOpts::default()
            };
            let (report, scores) = linear_eval(
                &ctx.params,
                &ctx.cfg.encoder,
                &ctx.graph,
                &ctx.train,
                &ctx.test,
                ctx.num_classes,
                &opts,
                &ctx.stream.to_string(),
            )?;
            if let Some(p) = scores_out {
                scores.save(&p)?;
                println!("scores written to {}", p.display());
            }
            emit_report(&report, report_out.as_ref())
        }
        Command::Finetune {
            ckpt,
            train,
            test,
            graph,
            config,
            label_fraction,
            epochs,
            lr,
            stream,
            seed,
            scores_out,
            report_out,
        } => {
            let ctx = load_eval_context(&ckpt, config.as_ref(), graph.as_ref(), &train, &test, stream)?;
            let opts = ClassifierOpts {
                epochs,
                lr,
                batch_size: Some(16),
                momentum: 0.9,
                seed,
            };
            let (report, scores) = finetune_eval(
                &ctx.params,
                &ctx.cfg.encoder,
                &ctx.graph,
                &ctx.train,
                label_fraction,
                &ctx.test,
                ctx.num_classes,
                &opts,
                &ctx.stream.to_string(),
            )?;
            if let Some(p) = scores_out {
                scores.save(&p)?;
                println!("scores written to {}", p.display());
            }
            emit_report(&report, report_out.as_ref())
        }
        Command::Fuse {
            scores,
            weights,
            report_out,
        } => {
            let sets: Vec<ScoreSet> = scores
                .iter()
                .map(|p| ScoreSet::load(p))
                .collect::<Result<_, _>>()?;
            let parsed: Vec<f64> = weights
                .split(',')
                .map(|w| {
                    w.trim()
                        .parse::<f64>()
                        .map_err(|_| Error::invalid("fuse", format!("bad weight '{w}'")))
                })
                .collect::<Result<_, _>>()?;
            let weights = if parsed.len() > sets.len() {
                parsed[..sets.len()].to_vec()
            } else {
                parsed
            };
            let num_classes = sets
                .first()
                .and_then(|s| s.scores.first())
                .map(|s| s.len())
                .ok_or_else(|| Error::invalid("fuse", "empty score sets"))?;
            let report = fuse_streams(&sets, &weights, num_classes)?;
            emit_report(&report, report_out.as_ref())
        }
        Command::ExportEmbeddings {
            ckpt,
            data,
            graph,
            config,
            stream,
            out,
        } => {
            let cfg = resolve_config(&ckpt, config.as_ref())?;
            let params = load_checkpoint(&ckpt, &cfg.encoder)?;
            let graph = resolve_graph(&data, graph.as_ref())?;
            let stream = stream.unwrap_or(cfg.stream);
            let manifest = DatasetManifest::load(&data)?;
            let seqs: Vec<SkeletonSequence> = load_dataset(&data)?
                .iter()
                .map(|s| apply_stream(s, stream, &graph))
                .collect::<Result<_, _>>()?;
            let ids: Vec<String> = manifest
                .entries
                .iter()
                .map(|e| {
                    Path::new(&e.path)
                        .file_stem()
                        .map(|s| s.to_string_lossy().into_owned())
                        .unwrap_or_else(|| e.path.clone())
                })
                .collect();
            export_embeddings(&params, &cfg.encoder, &graph, &seqs, &ids, &out)?;
            println!("wrote {} embeddings to {}", seqs.len(), out.display());
            Ok(())
        }
    }
}
