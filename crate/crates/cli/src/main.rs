use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::json;

use pgot::bench::{memory_ratios, run_bench, write_csv};
use pgot::checkpoint::{load_checkpoint, save_checkpoint};
use pgot::data::{self, has_split, read_split, write_split, Manifest, NormStats, Sample, Split, Task};
use pgot::inspect::write_dump;
use pgot::model::{ModelConfig, PgotModel};
use pgot::train::{evaluate, prepare, train_with, RunConfig};
use pgot::Error;

const EXIT_USAGE: u8 = 2;
const EXIT_DATA: u8 = 3;
const EXIT_NUMERICAL: u8 = 4;

#[derive(Parser)]
#[command(name = "pgot", version, about = "Geometry-aware neural operator: data, training, evaluation, benchmarks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Gen(GenArgs),
    /// Train a model and write a checkpoint plus run report.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset split.
    Eval(EvalArgs),
    /// Time and memory scaling against the number of points.
    Bench(BenchArgs),
    /// Dump per-layer slice assignments and gate activations for one sample.
    Inspect(InspectArgs),
}

#[derive(clap::Args)]
struct GenArgs {
    /// poisson2d or pointcloud_stress
    #[arg(long)]
    task: Task,
    /// Number of training samples.
    #[arg(long, value_parser = clap::value_parser!(u32).range(1..))]
    samples: u32,
    /// Number of held-out test samples (written as a second split).
    #[arg(long, default_value_t = 0)]
    test_samples: u32,
    /// Grid side for poisson2d, point count for pointcloud_stress.
    #[arg(long, visible_alias = "points")]
    resolution: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Write into a non-empty output directory.
    #[arg(long)]
    force: bool,
}

#[derive(clap::Args)]
struct TrainArgs {
    /// JSON run configuration (`model` and `training` sections).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset directory written by `gen`.
    #[arg(long)]
    data: PathBuf,
    /// Output directory for model.pgck and report.json.
    #[arg(long)]
    out: PathBuf,
    /// Overrides both the model and the training seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the number of optimizer steps.
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    force: bool,
    /// Suppress per-step progress on stderr.
    #[arg(long)]
    quiet: bool,
}

#[derive(clap::Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Split to evaluate; defaults to test when present, else train.
    #[arg(long)]
    split: Option<SplitArg>,
    /// Also write the metrics as JSON to this file.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum SplitArg {
    Train,
    Test,
}

#[derive(clap::Args)]
struct BenchArgs {
    /// JSON run configuration; only its `model` section is used.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Ascending point counts.
    #[arg(long, value_delimiter = ',', default_value = "1024,2048,4096,8192")]
    sizes: Vec<usize>,
    #[arg(long, default_value_t = 5)]
    repeats: usize,
    /// CSV path; the dense-attention contrast goes to `<stem>_dense.csv`.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Skip the dense-attention contrast run.
    #[arg(long)]
    no_dense: bool,
}

#[derive(clap::Args)]
struct InspectArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// A PGDS sample file.
    #[arg(long)]
    sample: PathBuf,
    /// Manifest holding the normalization statistics; defaults to
    /// `train.json` next to the sample.
    #[arg(long)]
    stats: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config(_) | Error::Parameter(_) | Error::Contract(_) | Error::Shape { .. } => EXIT_USAGE,
        Error::Data(_) | Error::Generator(_) | Error::Format(_) | Error::Io(_) | Error::Json(_) => EXIT_DATA,
        Error::Numerical { .. } | Error::UndefinedMetric(_) => EXIT_NUMERICAL,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Gen(a) => cmd_gen(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Bench(a) => cmd_bench(a),
        Command::Inspect(a) => cmd_inspect(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn prepare_out_dir(dir: &Path, force: bool) -> pgot::Result<()> {
    if dir.exists() {
        let non_empty = dir.read_dir()?.next().is_some();
        if non_empty && !force {
            return Err(Error::Config(format!(
                "output directory {} is not empty (use --force to write into it)",
                dir.display()
            )));
        }
    }
    fs::create_dir_all(dir)?;
    Ok(())
}

fn read_config(path: Option<&Path>) -> pgot::Result<RunConfig> {
    let cfg = match path {
        None => RunConfig::default(),
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::Config(format!("cannot read {}: {e}", p.display())))?;
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
        }
    };
    cfg.validate()?;
    Ok(cfg)
}

fn write_json<V: serde::Serialize + ?Sized>(path: &Path, value: &V) -> pgot::Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn cmd_gen(a: GenArgs) -> pgot::Result<()> {
    let resolution = a.resolution.unwrap_or(match a.task {
        Task::Poisson2d => 16,
        Task::PointcloudStress => 512,
    });
    prepare_out_dir(&a.out, a.force)?;
    let train = data::generate(a.task, resolution, a.seed, 0, a.samples as usize)?;
    let stats = NormStats::from_samples(&train);
    write_split(&a.out, Split::Train, a.seed, &train, &stats)?;
    if a.test_samples > 0 {
        let test = data::generate(a.task, resolution, a.seed, a.samples as usize, a.test_samples as usize)?;
        write_split(&a.out, Split::Test, a.seed, &test, &stats)?;
    }
    let (d, da, du) = a.task.dims();
    println!(
        "{}: {} train / {} test samples, {} points each, d={d} d_a={da} d_u={du}, seed {} -> {}",
        a.task,
        a.samples,
        a.test_samples,
        train[0].len(),
        a.seed,
        a.out.display()
    );
    Ok(())
}

fn cmd_train(a: TrainArgs) -> pgot::Result<()> {
    let mut cfg = read_config(a.config.as_deref())?;
    if let Some(seed) = a.seed {
        cfg.model.seed = seed;
        cfg.training.seed = seed;
    }
    if let Some(steps) = a.steps {
        cfg.training.steps = steps;
    }
    let train_set = read_split(&a.data, Split::Train)?;
    cfg.check_dataset(&train_set)?;
    let stats = train_set.stats().clone();
    let eval_set = if has_split(&a.data, Split::Test) {
        read_split(&a.data, Split::Test)?
    } else {
        train_set.clone()
    };
    prepare_out_dir(&a.out, a.force)?;

    let train_data = prepare::<f32>(&train_set.samples, &stats)?;
    let eval_data = prepare::<f32>(&eval_set.samples, &stats)?;
    let model = PgotModel::<f32>::new(cfg.model.clone())?;
    eprintln!(
        "training {} parameters for {} steps on {} samples",
        model.param_count(),
        cfg.training.steps,
        train_data.len()
    );
    let quiet = a.quiet;
    let every = cfg.training.eval_every;
    let outcome = train_with(model, &train_data, &eval_data, &cfg.training, |step, loss| {
        if !quiet && step % every == 0 {
            eprintln!("step {step:>6}  loss {loss:.6}");
        }
    });
    match outcome {
        Ok(out) => {
            save_checkpoint(&out.model, a.out.join("model.pgck"))?;
            write_json(&a.out.join("report.json"), &out.report.deterministic())?;
            write_json(&a.out.join("resources.json"), &out.report.resources)?;
            let r = &out.report;
            println!(
                "final train relative L2 {:.6}, best eval relative L2 {:.6} at step {}",
                r.final_train_rel_l2, r.best_eval_rel_l2, r.best_step
            );
            println!(
                "{}",
                json!({
                    "final_train_rel_l2": r.final_train_rel_l2,
                    "best_eval_rel_l2": r.best_eval_rel_l2,
                    "best_step": r.best_step,
                    "eval_spearman": r.eval_spearman,
                })
            );
            Ok(())
        }
        Err(failure) => {
            if let Some(report) = &failure.report {
                write_json(&a.out.join("report.json"), &report.deterministic())?;
                write_json(&a.out.join("resources.json"), &report.resources)?;
            }
            Err(failure.error)
        }
    }
}

fn cmd_eval(a: EvalArgs) -> pgot::Result<()> {
    let model: PgotModel<f32> = load_checkpoint(&a.checkpoint)?;
    let split = match a.split {
        Some(SplitArg::Train) => Split::Train,
        Some(SplitArg::Test) => Split::Test,
        None if has_split(&a.data, Split::Test) => Split::Test,
        None => Split::Train,
    };
    let ds = read_split(&a.data, split)?;
    let m = evaluate(&model, &ds, ds.stats())?;
    let rho = m.spearman.map_or("undefined".to_string(), |r| format!("{r:.6}"));
    println!(
        "{} split ({} samples): relative L2 {:.6}, spearman {rho}",
        split.name(),
        ds.samples.len(),
        m.rel_l2
    );
    let line = json!({
        "split": split.name(),
        "samples": ds.samples.len(),
        "rel_l2": m.rel_l2,
        "rel_l2_per_field": m.rel_l2_per_field,
        "spearman": m.spearman,
    });
    println!("{line}");
    if let Some(out) = &a.out {
        write_json(out, &m)?;
    }
    Ok(())
}

fn dense_path(out: &Path) -> PathBuf {
    let stem = out.file_stem().and_then(|s| s.to_str()).unwrap_or("bench");
    let ext = out.extension().and_then(|s| s.to_str()).unwrap_or("csv");
    out.with_file_name(format!("{stem}_dense.{ext}"))
}

fn cmd_bench(a: BenchArgs) -> pgot::Result<()> {
    let cfg = read_config(a.config.as_deref())?.model;
    let mut runs = vec![(cfg.clone(), a.out.clone(), "pgot")];
    if !a.no_dense {
        let dense = ModelConfig {
            dense_attention: true,
            ..cfg
        };
        runs.push((dense, dense_path(&a.out), "dense"));
    }
    for (config, path, label) in runs {
        let run = run_bench(&config, &a.sizes, a.repeats, a.seed)?;
        for w in &run.warnings {
            eprintln!("warning: {label}: {w}");
        }
        write_csv(&run.records, fs::File::create(&path)?)?;
        let ratios: Vec<String> = memory_ratios(&run.records).iter().map(|r| format!("{r:.3}")).collect();
        println!(
            "{label}: peak-memory ratio per step [{}] -> {}",
            ratios.join(", "),
            path.display()
        );
    }
    Ok(())
}

fn cmd_inspect(a: InspectArgs) -> pgot::Result<()> {
    let model: PgotModel<f32> = load_checkpoint(&a.checkpoint)?;
    let sample = Sample::read(&a.sample)?;
    let stats_path = match a.stats {
        Some(p) => p,
        None => a
            .sample
            .parent()
            .unwrap_or(Path::new("."))
            .join(Manifest::file_name(Split::Train)),
    };
    let text = fs::read_to_string(&stats_path)
        .map_err(|e| Error::Data(format!("cannot read {}: {e}", stats_path.display())))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", stats_path.display())))?;
    let (d, da, du) = sample.dims();
    let c = model.config();
    if (c.coord_dim, c.input_dim, c.output_dim) != (d, da, du) {
        return Err(Error::Config(format!(
            "checkpoint expects coord_dim {} input_dim {} output_dim {}, sample has {d} {da} {du}",
            c.coord_dim, c.input_dim, c.output_dim
        )));
    }
    let files = write_dump(&model, &sample, &manifest.normalization, &a.out)?;
    println!("wrote {} files to {}", files.len(), a.out.display());
    Ok(())
}
