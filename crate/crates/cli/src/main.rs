use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use tocomm::config::ExperimentConfig;
use tocomm::data::Dataset;
use tocomm::eval::{budgeted_run, calibrate};
use tocomm::nn::checkpoint;
use tocomm::pipeline::{accuracy, ModelKind, TocModel};
use tocomm::report::{self, rows_from_csv};
use tocomm::scheduler::ExitPolicy;
use tocomm::sweep::{build_model, flops_json, run_sweep, stream_seed, train_cell, write_outputs};
use tocomm::{seeded_rng, Error, Result};

#[derive(Parser)]
#[command(name = "tocomm", version, about = "Budgeted task-oriented communication experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// JSON experiment config.
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Built-in preset: synthetic-static, synthetic-dynamic or cifar10-dynamic.
    #[arg(long)]
    preset: Option<String>,
    /// Dotted override such as `train.epochs=3`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory; defaults to the config's `output`.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl ConfigArgs {
    fn load(&self) -> Result<ExperimentConfig> {
        let base = match (&self.config, &self.preset) {
            (Some(p), _) => ExperimentConfig::load(p)?,
            (None, Some(name)) => ExperimentConfig::preset(name)?,
            (None, None) => return Err(Error::Config("pass --config or --preset".into())),
        };
        let mut cfg = base.with_overrides(&self.overrides)?;
        if let Some(out) = &self.out {
            cfg.output = out.clone();
        }
        Ok(cfg)
    }
}

#[derive(Args)]
struct ModelArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Trained parameters written by a train command.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Trial seed selecting the data draw.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Subcommand)]
enum Command {
    /// Train the static model for every channel and seed of the config.
    TrainStatic(ConfigArgs),
    /// Train the dynamic model for every channel and seed of the config.
    TrainDynamic(ConfigArgs),
    /// Calibrate exit thresholds of a trained dynamic model for one budget.
    Calibrate {
        #[command(flatten)]
        model: ModelArgs,
        /// Total transmitter budget for the test batch.
        #[arg(long)]
        budget: f64,
        /// Where to write the policy; stdout when absent.
        #[arg(long)]
        policy: Option<PathBuf>,
    },
    /// Score a trained model on the test split, optionally under a policy.
    Eval {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        policy: Option<PathBuf>,
    },
    /// Train and score the whole channel x seed x budget grid.
    Sweep(ConfigArgs),
    /// Print the FLOPs profile of the configured model.
    Flops(ConfigArgs),
    /// Render the configured synthetic splits as JSON lines.
    GenData(ConfigArgs),
    /// Rebuild curves and JSON from an existing report CSV and print a summary.
    Report {
        /// report.csv written by a sweep.
        #[arg(long)]
        input: PathBuf,
        /// Directory for the regenerated files; defaults to the input's directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    match run(Cli::parse().command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::TrainStatic(a) => train_all(&a, ModelKind::Static),
        Command::TrainDynamic(a) => train_all(&a, ModelKind::Dynamic),
        Command::Calibrate { model, budget, policy } => calibrate_cmd(&model, budget, policy.as_deref()),
        Command::Eval { model, policy } => eval_cmd(&model, policy.as_deref()),
        Command::Sweep(a) => {
            let cfg = a.load()?;
            let result = run_sweep(&cfg)?;
            write_outputs(&cfg, &result, &cfg.output)?;
            print!("{}", report::rows_to_csv(&result.rows)?);
            Ok(())
        }
        Command::Flops(a) => {
            let cfg = a.load()?;
            let channel = first_channel(&cfg)?;
            let model = build_model(&cfg, channel, &mut seeded_rng(0))?;
            print!("{}", flops_json(&model)?);
            Ok(())
        }
        Command::GenData(a) => gen_data(&a),
        Command::Report { input, out } => report_cmd(&input, out.as_deref()),
    }
}

fn first_channel(cfg: &ExperimentConfig) -> Result<tocomm::link::ChannelSpec> {
    cfg.channel
        .grid()
        .into_iter()
        .next()
        .ok_or_else(|| Error::Config("config has an empty channel grid".into()))
}

fn train_all(a: &ConfigArgs, kind: ModelKind) -> Result<()> {
    let mut cfg = a.load()?;
    cfg.model = kind;
    let dir = cfg.output.clone();
    for (i, channel) in cfg.channel.grid().into_iter().enumerate() {
        for &seed in &cfg.sweep.seeds {
            let splits = cfg.dataset.load(seed)?;
            let (model, trace) = train_cell(&cfg, channel, i, seed, &splits)?;
            let tag = format!("{}_{}_seed{seed}", model.name, channel.label().replace('@', "_"));
            checkpoint::save(&dir.join(format!("model_{tag}.ckpt")), &model.params)?;
            report::write_text(&dir.join(format!("trace_{tag}.csv")), &trace.to_csv())?;
            let last = trace.epochs.last();
            println!(
                "{tag}: val_loss={} val_accuracy={}",
                last.map_or(f64::NAN, |e| e.val_loss),
                last.map_or(f64::NAN, |e| e.val_accuracy)
            );
        }
    }
    report::write_text(&dir.join("config.json"), &(cfg.to_json()? + "\n"))
}

fn load_model(m: &ModelArgs) -> Result<(ExperimentConfig, TocModel)> {
    let cfg = m.cfg.load()?;
    let mut model = build_model(&cfg, first_channel(&cfg)?, &mut seeded_rng(0))?;
    checkpoint::load(&m.checkpoint, &mut model.params)?;
    Ok((cfg, model))
}

fn calibrate_cmd(m: &ModelArgs, budget: f64, out: Option<&Path>) -> Result<()> {
    let (cfg, model) = load_model(m)?;
    let splits = cfg.dataset.load(m.seed)?;
    let costs = model.costs(cfg.sweep.convention)?;
    let val = model.exit_pass(&splits.val.images, &mut seeded_rng(stream_seed(m.seed, 0, 3)))?;
    let (policy, cal) = calibrate(&val, &costs, budget / splits.test.len() as f64)?;
    let text = serde_json::to_string_pretty(&policy)? + "\n";
    match out {
        Some(p) => {
            report::write_text(p, &text)?;
            println!("calibrated counts {:?} on {} validation samples", cal.counts, val.confidences.len());
        }
        None => print!("{text}"),
    }
    Ok(())
}

fn eval_cmd(m: &ModelArgs, policy: Option<&Path>) -> Result<()> {
    let (cfg, model) = load_model(m)?;
    let splits = cfg.dataset.load(m.seed)?;
    let costs = model.costs(cfg.sweep.convention)?;
    let pass = model.exit_pass(&splits.test.images, &mut seeded_rng(stream_seed(m.seed, 0, 4)))?;
    let out = match policy {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            let policy: ExitPolicy = serde_json::from_str(&text)?;
            let o = budgeted_run(&pass, &splits.test.labels, &policy)?;
            json!({
                "model": model.name,
                "accuracy": o.accuracy,
                "avg_tx_flops": o.avg_tx_flops,
                "exit_hist": o.histogram,
            })
        }
        None => {
            let k = model.num_exits();
            let per_exit: Vec<f64> = (0..k)
                .map(|j| {
                    let preds: Vec<usize> = pass.predictions.iter().map(|p| p[j]).collect();
                    accuracy(&preds, &splits.test.labels)
                })
                .collect::<Result<_>>()?;
            json!({ "model": model.name, "exit_accuracy": per_exit, "costs": costs })
        }
    };
    println!("{}", serde_json::to_string_pretty(&out)?);
    Ok(())
}

fn write_jsonl(path: &Path, d: &Dataset) -> Result<()> {
    let mut buf = Vec::new();
    for i in 0..d.len() {
        let line = json!({ "label": d.labels[i], "noise": d.noise[i], "pixels": d.images.sample(i) });
        serde_json::to_writer(&mut buf, &line)?;
        buf.push(b'\n');
    }
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

fn gen_data(a: &ConfigArgs) -> Result<()> {
    let cfg = a.load()?;
    for &seed in &cfg.sweep.seeds {
        let splits = cfg.dataset.load(seed)?;
        for (name, d) in [("train", &splits.train), ("val", &splits.val), ("test", &splits.test)] {
            let path = cfg.output.join(format!("seed{seed}_{name}.jsonl"));
            write_jsonl(&path, d)?;
            println!("{} ({} samples)", path.display(), d.len());
        }
    }
    Ok(())
}

fn report_cmd(input: &Path, out: Option<&Path>) -> Result<()> {
    let text = std::fs::read_to_string(input).map_err(|e| Error::io(input, e))?;
    let rows = rows_from_csv(&text)?;
    let dir = out
        .map(Path::to_path_buf)
        .or_else(|| input.parent().map(Path::to_path_buf))
        .unwrap_or_default();
    report::emit_report(&rows, &dir)?;
    report::emit_curves(&rows, &dir)?;
    for (name, pts) in report::budget_curves(&rows) {
        println!("{name}");
        for (b, acc) in pts {
            println!("  budget {b:>14.0}  accuracy {acc:.4}");
        }
    }
    for (name, pts) in report::psnr_curves(&rows) {
        println!("{name}");
        for (p, acc) in pts {
            println!("  psnr {p:>6} dB  accuracy {acc:.4}");
        }
    }
    Ok(())
}
