//! `kcrec`: generate data, train, evaluate, recommend, explain, benchmark
//! and run ablations from the command line.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use rand::Rng;

use kcrec_core::checkpoint::Checkpoint;
use kcrec_core::config::RunConfig;
use kcrec_core::error::{Error, Result};
use kcrec_core::hin::{synth_generate, SynthConfig};
use kcrec_core::implicit::explain_metapaths;
use kcrec_core::pipeline::{ablation_suite, evaluate_model, load_dataset, load_graph, recommend, restore, train_run};
use kcrec_core::rng::{self, Stream};
use kcrec_core::tensor::Tape;

#[derive(Parser)]
#[command(name = "kcrec", version, about = "Knowledge-concept recommendation over heterogeneous graphs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a planted-group dataset (schema.txt, edges.tsv) into an existing directory.
    Synth(SynthArgs),
    /// Train a model; writes model.ckpt, loss.tsv and config.txt.
    Train {
        #[command(flatten)]
        run: RunArgs,
        /// Output directory (created if missing).
        #[arg(long)]
        out: PathBuf,
    },
    /// Rank held-out interactions and write a report.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Cutoffs, comma separated.
        #[arg(long, value_delimiter = ',')]
        ks: Option<Vec<usize>>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Top-N unseen concepts for one user.
    Recommend {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        user: usize,
        #[arg(long, default_value_t = 10)]
        top: usize,
    },
    /// Highest-weight relation sequences per channel.
    Explain {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 3)]
        top_k: usize,
        /// Write here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Time forward passes over random batches.
    Bench {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 20)]
        batches: usize,
        /// Defaults to the checkpoint's training batch size.
        #[arg(long)]
        batch_size: Option<usize>,
    },
    /// Train and evaluate every ablation variant under shared seeds.
    Ablate {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_delimiter = ',', default_value = "0")]
        seeds: Vec<u64>,
        /// Subset of variants, comma separated (default: all six).
        #[arg(long, value_delimiter = ',')]
        variants: Option<Vec<String>>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 5)]
    groups: usize,
    #[arg(long, default_value_t = 40)]
    users_per_group: usize,
    #[arg(long, default_value_t = 20)]
    concepts_per_group: usize,
    #[arg(long, default_value_t = 10)]
    courses: usize,
    #[arg(long, default_value_t = 20)]
    videos: usize,
    #[arg(long, default_value_t = 5)]
    teachers: usize,
    #[arg(long, default_value_t = 0.3)]
    p_in: f64,
    #[arg(long, default_value_t = 0.01)]
    p_out: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

/// Config resolution: defaults, then `--config`, then `--data` and
/// `--features`, then each `--set` in order, then `--ablate`.
#[derive(Args)]
struct RunArgs {
    /// Flat `key = value` file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset directory.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Feature file overriding seeded node features.
    #[arg(long)]
    features: Option<PathBuf>,
    /// `key=value` override; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Ablation variant: full, w/-er, w/-ir, w/o-cl, w/o-att:⊕ (concat), w/o-att:+ (add).
    #[arg(long)]
    ablate: Option<String>,
}

impl RunArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        if let Some(path) = &self.config {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            cfg.apply_text(&text)?;
        }
        if let Some(d) = &self.data {
            cfg.data = Some(d.clone());
        }
        if let Some(f) = &self.features {
            cfg.features = Some(f.clone());
        }
        for kv in &self.sets {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::Usage(format!("`--set {kv}` is not key=value")))?;
            cfg.set(k.trim(), v.trim())?;
        }
        if let Some(a) = &self.ablate {
            cfg.apply_ablation(a)?;
        }
        cfg.validate()?;
        eprint!("# effective config\n{}", cfg.echo());
        Ok(cfg)
    }
}

fn data_dir(cfg: &RunConfig) -> Result<&Path> {
    cfg.data
        .as_deref()
        .ok_or_else(|| Error::Usage("no dataset: pass --data or set `data`".into()))
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(a) => {
            let cfg = SynthConfig {
                groups: a.groups,
                users_per_group: a.users_per_group,
                concepts_per_group: a.concepts_per_group,
                courses: a.courses,
                videos: a.videos,
                teachers: a.teachers,
                p_in: a.p_in,
                p_out: a.p_out,
                seed: a.seed,
            };
            let hin = synth_generate(&cfg, &a.out)?;
            println!("wrote {} nodes, {}", hin.node_count(), hin.shape_signature());
        }
        Command::Train { run, out } => {
            let cfg = run.resolve()?;
            let (hin, features, report) = load_dataset(data_dir(&cfg)?, &cfg)?;
            if report.duplicate_edges > 0 {
                eprintln!("warning: {} duplicate edges ignored", report.duplicate_edges);
            }
            let trained = train_run(&hin, features, &cfg)?;
            std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
            trained.checkpoint(&hin).save(&out.join("model.ckpt"))?;
            write(&out.join("loss.tsv"), &trained.outcome.trace_text())?;
            write(&out.join("config.txt"), &cfg.echo())?;
            let t = &trained.outcome.trace;
            println!(
                "trained {} epochs{}; loss {:.6} -> {:.6}",
                t.len(),
                if trained.outcome.stopped_early { " (plateau)" } else { "" },
                t.first().copied().unwrap_or(f64::NAN),
                t.last().copied().unwrap_or(f64::NAN)
            );
        }
        Command::Evaluate { checkpoint, data, ks, out } => {
            let mut ckpt = Checkpoint::load(&checkpoint)?;
            if let Some(ks) = ks {
                ckpt.model.config.ks = ks;
                ckpt.model.config.validate()?;
            }
            let (hin, _) = load_graph(&data)?;
            let prepared = restore(&ckpt, &hin)?;
            let report = evaluate_model(&ckpt.model, &ckpt.prototypes, &prepared)?;
            write(&out, &report.to_text())?;
            if report.skipped > 0 {
                eprintln!("warning: {} test cases skipped (user has no training interactions)", report.skipped);
            }
            println!("{}", report.summary());
        }
        Command::Recommend {
            checkpoint,
            data,
            user,
            top,
        } => {
            let ckpt = Checkpoint::load(&checkpoint)?;
            let (hin, _) = load_graph(&data)?;
            let prepared = restore(&ckpt, &hin)?;
            let scores = ckpt.model.score_matrix(&prepared.inputs, &ckpt.prototypes)?;
            for (rank, (item, score)) in recommend(&scores, &prepared.split, user, top)?.iter().enumerate() {
                println!("{}\t{item}\t{score:?}", rank + 1);
            }
        }
        Command::Explain { checkpoint, top_k, out } => {
            let ckpt = Checkpoint::load(&checkpoint)?;
            let report = explain_metapaths(&ckpt.model.store, &ckpt.model.implicit, top_k)?;
            let text = report.to_text(&ckpt.relation_names);
            match out {
                Some(p) => write(&p, &text)?,
                None => print!("{text}"),
            }
        }
        Command::Bench {
            checkpoint,
            data,
            batches,
            batch_size,
        } => {
            if batches == 0 {
                return Err(Error::Usage("--batches must be at least 1".into()));
            }
            let ckpt = Checkpoint::load(&checkpoint)?;
            let (hin, _) = load_graph(&data)?;
            let prepared = restore(&ckpt, &hin)?;
            let size = batch_size.unwrap_or(ckpt.model.config.batch);
            if size == 0 {
                return Err(Error::Usage("--batch-size must be at least 1".into()));
            }
            let (nu, ni) = (prepared.inputs.n_users(), prepared.inputs.n_items());
            let mut draw = rng::stream(ckpt.model.config.seed, Stream::Sampling);
            let mut times = Vec::with_capacity(batches);
            for _ in 0..batches {
                let users: Vec<usize> = (0..size).map(|_| draw.random_range(0..nu)).collect();
                let items: Vec<usize> = (0..size).map(|_| draw.random_range(0..ni)).collect();
                let start = Instant::now();
                let mut tape = Tape::new();
                ckpt.model
                    .forward_batch(&mut tape, &prepared.inputs, &ckpt.prototypes, &users, &items, false)?;
                times.push(start.elapsed().as_secs_f64() * 1e3);
            }
            let mean = times.iter().sum::<f64>() / times.len() as f64;
            let var = times.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / times.len() as f64;
            println!("batch_size = {size}");
            println!("batches = {batches}");
            println!("mean_ms = {mean:.4}");
            println!("std_ms = {:.4}", var.sqrt());
        }
        Command::Ablate {
            run,
            seeds,
            variants,
            out,
        } => {
            let cfg = run.resolve()?;
            let (hin, _) = load_graph(data_dir(&cfg)?)?;
            let feature_text = match &cfg.features {
                Some(p) => Some(std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?),
                None => None,
            };
            let names: Vec<&str> = variants.iter().flatten().map(String::as_str).collect();
            let report = ablation_suite(&hin, feature_text.as_deref(), &cfg, &seeds, &names)?;
            let text = report.to_text();
            match out {
                Some(p) => write(&p, &text)?,
                None => print!("{text}"),
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
