use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use patchmerger::config::RunConfigFile;
use patchmerger::costmodel::{catalog, find_variant, model_cost, model_cost_vs, CostReport};
use patchmerger::experiments::{
    generate_dataset, sweep_placement, sweep_tokens, train, write_sweep_csv, RunStatus, SweepKind,
    SweepRow, TrainSpec,
};
use patchmerger::gradcheck::gradcheck_groups;
use patchmerger::vit::save_checkpoint;
use patchmerger::Error;

const VERSION: &str = concat!(env!("CARGO_PKG_VERSION"), " (config schema 1)");

/// Gradient-check failure threshold for the command-line audit.
const GRADCHECK_LIMIT: f64 = 1e-4;

mod exit {
    pub const FAILURE: u8 = 1;
    pub const USAGE: u8 = 2;
    pub const DIVERGED: u8 = 3;
    pub const IO: u8 = 4;
}

#[derive(Parser)]
#[command(name = "patchmerger", version = VERSION, about = "PatchMerger cost analysis and toy experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Analytic FLOPs and parameter counts for catalog variants or a config file.
    Cost(CostArgs),
    /// Train one toy model and write its report, plot data and checkpoint.
    Train(TrainArgs),
    /// Placement or output-token sweep over several seeds.
    Sweep(SweepArgs),
    /// Finite-difference audit of every backward pass.
    Gradcheck(GradcheckArgs),
    /// Dump synthetic samples for inspection.
    Dataset(DatasetArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum TableFormat {
    Text,
    Csv,
    Json,
}

#[derive(Args)]
struct CostArgs {
    /// Catalog names such as `H/14` or `Merger-H/14`.
    variants: Vec<String>,
    /// Print all catalog names and exit.
    #[arg(long)]
    list: bool,
    /// Cost the model described by a run config file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, conflicts_with = "json")]
    csv: bool,
    #[arg(long)]
    json: bool,
    /// Write the table to this file instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct RunArgs {
    /// Run config file (JSON); defaults apply without one.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the number of training steps.
    #[arg(long)]
    steps: Option<usize>,
    /// Output directory.
    #[arg(long, env = "PATCHMERGER_OUT_DIR", default_value = "patchmerger-out")]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    run: RunArgs,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum SweepTarget {
    Placement,
    Tokens,
}

#[derive(Args)]
struct SweepArgs {
    target: SweepTarget,
    #[command(flatten)]
    run: RunArgs,
    /// Number of seeds, counted up from the config's training seed.
    #[arg(long, default_value_t = 3)]
    seeds: u64,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Run in 64-bit floating point (required).
    #[arg(long)]
    f64: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Clone, Copy, ValueEnum)]
enum DumpFormat {
    Png,
    Raw,
}

#[derive(Args)]
struct DatasetArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Number of samples to write.
    #[arg(long, default_value_t = 16)]
    count: usize,
    #[arg(long, value_enum, default_value = "png")]
    format: DumpFormat,
    #[arg(long, env = "PATCHMERGER_OUT_DIR", default_value = "patchmerger-out")]
    out: PathBuf,
}

fn code_for(err: &Error) -> u8 {
    match err {
        Error::Config(_) | Error::Usage(_) | Error::Json(_) | Error::Checkpoint(_) => exit::USAGE,
        Error::NonFinite(_) | Error::Diverged { .. } => exit::DIVERGED,
        Error::Io(_) | Error::Csv(_) => exit::IO,
        _ => exit::FAILURE,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Cost(a) => cmd_cost(a),
        Command::Train(a) => cmd_train(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::Dataset(a) => cmd_dataset(a),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(code_for(&e))
        }
    }
}

fn load_config(path: Option<&Path>) -> patchmerger::Result<RunConfigFile> {
    match path {
        Some(p) => {
            let text = fs::read_to_string(p)?;
            RunConfigFile::from_json(&text)
        }
        None => Ok(RunConfigFile::default()),
    }
}

fn emit(out: Option<&Path>, text: &str) -> patchmerger::Result<()> {
    match out {
        Some(p) => {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir)?;
            }
            fs::write(p, text)?;
        }
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout.write_all(text.as_bytes())?;
        }
    }
    Ok(())
}

fn cost_table(rows: &[CostReport], format: TableFormat) -> patchmerger::Result<String> {
    Ok(match format {
        TableFormat::Json => serde_json::to_string_pretty(rows)? + "\n",
        TableFormat::Csv => {
            let mut w = csv_writer();
            for r in rows {
                w.serialize(r)?;
            }
            String::from_utf8(w.into_inner().map_err(|e| Error::Io(e.into_error()))?)
                .expect("csv output is UTF-8")
        }
        TableFormat::Text => {
            let mut s = format!(
                "{:<14} {:>14} {:>14} {:>8}\n",
                "variant", "gflops", "params", "ratio"
            );
            for r in rows {
                s += &format!(
                    "{:<14} {:>14.2} {:>14} {:>8.3}\n",
                    r.variant,
                    r.flops_forward as f64 / 1e9,
                    r.params_total,
                    r.ratio_vs_backbone
                );
            }
            s
        }
    })
}

fn csv_writer() -> csv::Writer<Vec<u8>> {
    csv::Writer::from_writer(Vec::new())
}

fn cmd_cost(a: CostArgs) -> patchmerger::Result<u8> {
    if a.list {
        let names: Vec<String> = catalog().into_iter().map(|v| v.name.to_string()).collect();
        emit(a.out.as_deref(), &(names.join("\n") + "\n"))?;
        return Ok(0);
    }
    let mut rows = Vec::new();
    if let Some(path) = &a.config {
        let cfg = load_config(Some(path))?.model_config()?;
        let mut r = model_cost(&cfg)?;
        r.variant = path.display().to_string();
        rows.push(r);
    }
    for name in &a.variants {
        rows.push(find_variant(name)?.cost()?);
    }
    if rows.is_empty() {
        // Whole catalog, each against its reference.
        for v in catalog() {
            let reference = find_variant(v.reference)?;
            rows.push(model_cost_vs(v.name, &v.config, &reference.config)?);
        }
    }
    let format = match (a.csv, a.json) {
        (true, _) => TableFormat::Csv,
        (_, true) => TableFormat::Json,
        _ => TableFormat::Text,
    };
    emit(a.out.as_deref(), &cost_table(&rows, format)?)?;
    Ok(0)
}

fn run_spec(run: &RunArgs) -> patchmerger::Result<(RunConfigFile, TrainSpec)> {
    let cfg = load_config(run.config.as_deref())?;
    let mut spec = cfg.train_spec()?;
    if let Some(steps) = run.steps {
        spec.steps = steps;
        spec.optimizer.warmup_steps = spec.optimizer.warmup_steps.min(steps / 10);
        spec.eval_every = spec.eval_every.min(steps);
    }
    spec.validate()?;
    Ok((cfg, spec))
}

fn cmd_train(a: TrainArgs) -> patchmerger::Result<u8> {
    let (_, mut spec) = run_spec(&a.run)?;
    if let Some(seed) = a.seed {
        spec.seed = seed;
    }
    let out_dir = &a.run.out;
    fs::create_dir_all(out_dir)?;
    let started = Instant::now();
    let outcome = train(&spec)?;
    let r = &outcome.report;
    fs::write(out_dir.join("report.json"), serde_json::to_string_pretty(r)? + "\n")?;

    let mut loss = csv::Writer::from_path(out_dir.join("loss.csv"))?;
    loss.write_record(["step", "loss"])?;
    for (i, l) in r.loss_curve.iter().enumerate() {
        loss.write_record([(i + 1).to_string(), l.to_string()])?;
    }
    loss.flush()?;
    let mut evals = csv::Writer::from_path(out_dir.join("evals.csv"))?;
    evals.write_record(["step", "train_accuracy", "eval_accuracy", "flops"])?;
    for e in &r.evals {
        evals.write_record([
            e.step.to_string(),
            format!("{:.6}", e.train_accuracy),
            format!("{:.6}", e.eval_accuracy),
            r.flops_forward.to_string(),
        ])?;
    }
    evals.flush()?;
    save_checkpoint(&outcome.model, fs::File::create(out_dir.join("model.ckpt"))?)?;

    eprintln!(
        "trained {} steps in {:.1}s, eval accuracy {:.4}",
        r.loss_curve.len(),
        started.elapsed().as_secs_f64(),
        r.final_eval_accuracy
    );
    match r.status {
        RunStatus::Completed => Ok(0),
        RunStatus::Diverged { step } => {
            eprintln!("error: loss became non-finite at step {step}");
            Ok(exit::DIVERGED)
        }
    }
}

fn cmd_sweep(a: SweepArgs) -> patchmerger::Result<u8> {
    let (cfg, spec) = run_spec(&a.run)?;
    if a.seeds == 0 {
        return Err(Error::Usage("--seeds must be at least 1".into()));
    }
    let seeds: Vec<u64> = (spec.seed..spec.seed + a.seeds).collect();
    let (kind, name, rows) = match a.target {
        SweepTarget::Placement => {
            let m = cfg.sweep.output_tokens.unwrap_or(8);
            let rows = sweep_placement(&spec, &cfg.placements(spec.model.depth), m, &seeds)?;
            (SweepKind::Placement, "placement", rows)
        }
        SweepTarget::Tokens => {
            let p = match cfg.sweep.placement {
                Some(p) => p,
                None => spec.model.mid_merger(1)?.placement,
            };
            (SweepKind::Tokens, "tokens", sweep_tokens(&spec, &cfg.token_counts(), p, &seeds)?)
        }
    };
    fs::create_dir_all(&a.run.out)?;
    let csv_path = a.run.out.join(format!("sweep_{name}.csv"));
    write_sweep_csv(kind, &rows, fs::File::create(&csv_path)?)?;
    let json_path = a.run.out.join(format!("sweep_{name}.json"));
    fs::write(&json_path, serde_json::to_string_pretty(&rows)? + "\n")?;
    for r in &rows {
        eprintln!("x={} seed={} accuracy={:.4} {}", r.x, r.seed, r.accuracy, r.status);
    }
    let diverged = rows.iter().any(|r: &SweepRow| r.status.starts_with("diverged"));
    Ok(if diverged { exit::DIVERGED } else { 0 })
}

fn cmd_gradcheck(a: GradcheckArgs) -> patchmerger::Result<u8> {
    if !a.f64 {
        return Err(Error::Usage(
            "gradient checks run in 64-bit only; pass --f64".into(),
        ));
    }
    let groups = gradcheck_groups(a.seed)?;
    let mut worst: f64 = 0.0;
    for g in &groups {
        println!("{:<32} {:.3e}", g.name, g.max_rel_error);
        worst = worst.max(g.max_rel_error);
    }
    println!("max relative error {worst:.3e} (limit {GRADCHECK_LIMIT:.0e})");
    Ok(if worst > GRADCHECK_LIMIT { exit::FAILURE } else { 0 })
}

fn cmd_dataset(a: DatasetArgs) -> patchmerger::Result<u8> {
    let cfg = load_config(a.config.as_deref())?;
    let spec = cfg.train_spec()?.dataset;
    let data = generate_dataset(&spec)?;
    let count = a.count.min(data.len());
    fs::create_dir_all(&a.out)?;
    let mut labels = csv::Writer::from_path(a.out.join("labels.csv"))?;
    labels.write_record(["index", "label", "file"])?;
    let s = spec.image_size as u32;
    match a.format {
        DumpFormat::Png => {
            for i in 0..count {
                let file = format!("sample_{i:04}_class_{}.png", data.labels[i]);
                let bytes: Vec<u8> = data
                    .image(i)
                    .iter()
                    .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
                    .collect();
                let path = a.out.join(&file);
                let saved = match spec.channels {
                    1 => image::GrayImage::from_raw(s, s, bytes).map(|img| img.save(&path)),
                    3 => image::RgbImage::from_raw(s, s, bytes).map(|img| img.save(&path)),
                    c => {
                        return Err(Error::Usage(format!(
                            "PNG export supports 1 or 3 channels, dataset has {c}; use --format raw"
                        )))
                    }
                };
                saved
                    .expect("buffer matches image size")
                    .map_err(|e| Error::Io(std::io::Error::other(e)))?;
                labels.write_record([i.to_string(), data.labels[i].to_string(), file])?;
            }
        }
        DumpFormat::Raw => {
            let n = data.image_len();
            let mut raw = Vec::with_capacity(count * n * 4);
            for v in &data.images[..count * n] {
                raw.extend_from_slice(&v.to_le_bytes());
            }
            fs::write(a.out.join("images.f32"), raw)?;
            let meta = serde_json::json!({
                "layout": "[n, height, width, channels] little-endian f32",
                "count": count,
                "image_size": spec.image_size,
                "channels": spec.channels,
                "num_classes": spec.num_classes,
                "seed": spec.seed,
            });
            fs::write(a.out.join("images.json"), serde_json::to_string_pretty(&meta)? + "\n")?;
            for i in 0..count {
                labels.write_record([i.to_string(), data.labels[i].to_string(), "images.f32".into()])?;
            }
        }
    }
    labels.flush()?;
    eprintln!("wrote {count} samples to {}", a.out.display());
    Ok(0)
}
