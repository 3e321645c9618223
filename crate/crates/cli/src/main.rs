use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fpbilstm::checkpoint::{Checkpoint, Pipeline};
use fpbilstm::config::{DataSource, RunConfig};
use fpbilstm::experiment::{
    ablate, channels_for, load_source, prepare, sweep, train_and_evaluate, AblationMode, ABLATION_CSV_HEADER,
    SWEEP_CSV_HEADER,
};
use fpbilstm::ingest::{load_shl, write_shl, Dataset, LoadOptions, Mode, SplitTag};
use fpbilstm::metrics::evaluate_sets;
use fpbilstm::model::{predict, summarize};
use fpbilstm::synth::synth_generate;
use fpbilstm::{Error, Result};

/// Transportation-mode detection with a feature-pyramid CNN + biLSTM.
#[derive(Parser)]
#[command(name = "fpbilstm", version)]
struct Cli {
    /// TOML run configuration layered over the built-in defaults.
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,
    /// Override one setting, e.g. `--set train.lr=1e-3`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// More log output (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset in SHL file layout.
    Synth(SynthArgs),
    /// Compute and cache the feature channels.
    Preprocess,
    /// Train one model per configured seed.
    Train,
    /// Score a checkpoint per frame and per sample.
    Eval(EvalArgs),
    /// Predict modes for every frame of an SHL-format directory.
    Predict(PredictArgs),
    /// Train and score every (window, rate) pair.
    Sweep(SweepArgs),
    /// Run one of the ablation grids.
    Ablate(AblateArgs),
    /// Print the layer table and parameter count of the configured model.
    Summarize(SummarizeArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long)]
    frames_per_mode: Option<usize>,
    /// Samples per frame at the native rate.
    #[arg(long)]
    frame_len: Option<usize>,
    #[arg(long)]
    transition_fraction: Option<f64>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Labeled SHL-format directory; defaults to the configured test split.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Write both reports as JSON here.
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// CSV destination; standard output when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    /// Window lengths in seconds.
    #[arg(long, value_delimiter = ',', default_values_t = [60.0, 30.0, 20.0, 10.0, 5.0])]
    windows: Vec<f64>,
    /// Target rates in Hz.
    #[arg(long, value_delimiter = ',', default_values_t = [100.0, 50.0, 25.0, 20.0, 10.0, 5.0, 1.0])]
    rates: Vec<f64>,
}

#[derive(Args)]
struct AblateArgs {
    /// conv_depth, pyramid_taps or features.
    #[arg(long)]
    mode: AblationMode,
    /// Single-frame forward passes timed per row.
    #[arg(long, default_value_t = 1000)]
    timing_passes: usize,
}

#[derive(Args)]
struct SummarizeArgs {
    /// Model input length; defaults to the configured window and rate.
    #[arg(long)]
    input_len: Option<usize>,
    #[arg(long)]
    json: bool,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let cfg = RunConfig::load(cli.config.as_deref(), &cli.overrides)?;
    match cli.command {
        Command::Synth(a) => cmd_synth(&cfg, a),
        Command::Preprocess => cmd_preprocess(cfg),
        Command::Train => cmd_train(&cfg),
        Command::Eval(a) => cmd_eval(&cfg, a),
        Command::Predict(a) => cmd_predict(a),
        Command::Sweep(a) => cmd_sweep(&cfg, a),
        Command::Ablate(a) => cmd_ablate(&cfg, a),
        Command::Summarize(a) => cmd_summarize(&cfg, a),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::Io { path: path.to_path_buf(), source: e }
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| io_err(path, e))
}

/// Every output directory records the exact configuration that produced it.
fn write_resolved(cfg: &RunConfig) -> Result<()> {
    create_dir(&cfg.output_dir)?;
    write_file(&cfg.output_dir.join("config.toml"), cfg.to_toml_string()?)
}

fn cmd_synth(cfg: &RunConfig, a: SynthArgs) -> Result<()> {
    let mut spec = match &cfg.data {
        DataSource::Synth { spec, .. } => spec.clone(),
        DataSource::Shl { .. } => Default::default(),
    };
    if let Some(n) = a.frames_per_mode {
        spec.frames_per_mode = n;
    }
    if let Some(n) = a.frame_len {
        spec.frame_len = n;
    }
    if let Some(f) = a.transition_fraction {
        spec.transition_fraction = f;
    }
    let ds = synth_generate(&spec, a.seed)?;
    write_shl(&ds, &a.out)?;
    println!(
        "wrote {} frames of {} samples at {} Hz to {}",
        ds.len(),
        spec.frame_len,
        spec.sample_rate_hz,
        a.out.display()
    );
    Ok(())
}

fn cmd_preprocess(mut cfg: RunConfig) -> Result<()> {
    if cfg.cache_dir.is_none() {
        cfg.cache_dir = Some(cfg.output_dir.join("cache"));
    }
    write_resolved(&cfg)?;
    let p = prepare(&cfg, None)?;
    let len = p.train.first().map(|s| s.len()).unwrap_or(0);
    println!("train: {} channel sets of length {len}", p.train.len());
    if let Some(t) = &p.test {
        println!("test: {} channel sets", t.len());
    }
    println!(
        "cache: {} hits, {} misses ({:.0}% hits) in {}",
        p.stats.hits,
        p.stats.misses,
        p.stats.hit_rate(),
        cfg.cache_dir.as_ref().expect("set above").display()
    );
    Ok(())
}

fn cmd_train(cfg: &RunConfig) -> Result<()> {
    write_resolved(cfg)?;
    let prepared = prepare(cfg, None)?;
    for &seed in &cfg.seeds {
        let dir = cfg.output_dir.join(format!("seed-{seed}"));
        create_dir(&dir)?;
        let log_path = dir.join("train_log.csv");
        let mut log_file = fs::File::create(&log_path).map_err(|e| io_err(&log_path, e))?;
        writeln!(log_file, "epoch,train_loss,train_acc,val_loss,val_acc,lr,seconds").map_err(|e| io_err(&log_path, e))?;
        let out = train_and_evaluate(&cfg.model, &cfg.train, &prepared.train, prepared.test.as_deref(), seed, |r| {
            eprintln!(
                "seed {seed} epoch {:>3}  loss {:.5}  acc {:5.1}  val_loss {:.5}  val_acc {:5.1}  lr {:.1e}  {:.1}s",
                r.epoch, r.train_loss, r.train_acc, r.val_loss, r.val_acc, r.lr, r.seconds
            );
            // the log stays readable even if a later epoch aborts
            let _ = writeln!(
                log_file,
                "{},{},{},{},{},{},{:.3}",
                r.epoch, r.train_loss, r.train_acc, r.val_loss, r.val_acc, r.lr, r.seconds
            );
        })?;
        let ck = Checkpoint {
            model: out.fit.model.clone(),
            pipeline: cfg.pipeline(),
            optimizer: Some(out.fit.optimizer.clone()),
            best_epoch: Some(out.fit.best_epoch),
        };
        ck.save(dir.join("checkpoint.fpb"))?;
        write_file(&dir.join("train_log.csv"), out.fit.log.to_csv())?;
        write_file(&dir.join("report_frame.json"), out.frame.to_json()?)?;
        write_file(&dir.join("report_sample.json"), out.sample.to_json()?)?;
        let text = format!("{}\n{}", out.frame.to_table(), out.sample.to_table());
        write_file(&dir.join("report.txt"), &text)?;
        println!("seed {seed}: best epoch {}, {:.1} s", out.fit.best_epoch, out.train_seconds);
        println!("{text}");
    }
    Ok(())
}

/// Frames cut to the checkpoint's window, checked against its sample rate.
fn frames_for(pipeline: &Pipeline, ds: &Dataset) -> Result<Vec<fpbilstm::dsp::ChannelSet>> {
    if let Some(rate) = ds.sample_rate_hz() {
        if (rate - pipeline.sample_rate_hz).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "data is sampled at {rate} Hz but the checkpoint expects {} Hz",
                pipeline.sample_rate_hz
            )));
        }
    }
    channels_for(ds, &pipeline.features, pipeline.window_s)
}

fn cmd_eval(cfg: &RunConfig, a: EvalArgs) -> Result<()> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let ds = match &a.data {
        Some(dir) => load_shl(dir, SplitTag::Test, &LoadOptions { sample_rate_hz: ck.pipeline.sample_rate_hz, ..LoadOptions::default() })?,
        None => load_source(&cfg.data)?
            .1
            .ok_or_else(|| Error::Config("no test split configured; pass --data".into()))?,
    };
    let sets = frames_for(&ck.pipeline, &ds)?;
    let refs: Vec<_> = sets.iter().collect();
    let pred = predict(&ck.model.predict_proba(&refs, 50)?);
    let (frame, sample) = evaluate_sets(&sets, &pred)?;
    println!("{}\n{}", frame.to_table(), sample.to_table());
    if let Some(path) = a.json {
        let json = format!("{{\"frame\": {}, \"sample\": {}}}\n", frame.to_json()?, sample.to_json()?);
        write_file(&path, json)?;
    }
    Ok(())
}

fn cmd_predict(a: PredictArgs) -> Result<()> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let opts = LoadOptions {
        sample_rate_hz: ck.pipeline.sample_rate_hz,
        require_labels: false,
        ..LoadOptions::default()
    };
    let ds = load_shl(&a.data, SplitTag::Test, &opts)?;
    let sets = frames_for(&ck.pipeline, &ds)?;
    let refs: Vec<_> = sets.iter().collect();
    let probs = ck.model.predict_proba(&refs, 50)?;
    let mut out = String::from("frame,mode_id,mode");
    for m in Mode::ALL {
        out.push_str(&format!(",p_{}", m.name().to_lowercase()));
    }
    out.push('\n');
    for (i, (p, row)) in predict(&probs).iter().zip(&probs).enumerate() {
        let mode = Mode::from_id(*p).expect("argmax is a mode");
        out.push_str(&format!("{i},{p},{}", mode.name()));
        for v in row {
            out.push_str(&format!(",{v:.6}"));
        }
        out.push('\n');
    }
    match a.out {
        Some(path) => write_file(&path, out),
        None => {
            print!("{out}");
            Ok(())
        }
    }
}

fn cmd_sweep(cfg: &RunConfig, a: SweepArgs) -> Result<()> {
    write_resolved(cfg)?;
    let path = cfg.output_dir.join("sweep.csv");
    let mut file = fs::File::create(&path).map_err(|e| io_err(&path, e))?;
    writeln!(file, "{SWEEP_CSV_HEADER}").map_err(|e| io_err(&path, e))?;
    let (rows, skipped) = sweep(cfg, &a.windows, &a.rates, |row| {
        println!("{}", row.csv());
        writeln!(file, "{}", row.csv()).and_then(|_| file.flush()).map_err(|e| io_err(&path, e))
    })?;
    for s in &skipped {
        eprintln!("skipped {}: {}", s.label, s.reason);
    }
    println!("{} rows written to {}, {} cells skipped", rows.len(), path.display(), skipped.len());
    Ok(())
}

fn cmd_ablate(cfg: &RunConfig, a: AblateArgs) -> Result<()> {
    write_resolved(cfg)?;
    let name = format!("{:?}", a.mode).to_lowercase();
    let path = cfg.output_dir.join(format!("ablate-{name}.csv"));
    let mut file = fs::File::create(&path).map_err(|e| io_err(&path, e))?;
    writeln!(file, "{ABLATION_CSV_HEADER}").map_err(|e| io_err(&path, e))?;
    let rows = ablate(cfg, a.mode, a.timing_passes, |row| {
        println!("{}", row.csv());
        writeln!(file, "{}", row.csv()).and_then(|_| file.flush()).map_err(|e| io_err(&path, e))
    })?;
    println!("{} rows written to {}", rows.len(), path.display());
    Ok(())
}

fn cmd_summarize(cfg: &RunConfig, a: SummarizeArgs) -> Result<()> {
    let len = a.input_len.unwrap_or_else(|| cfg.pipeline().input_len());
    let s = summarize(&cfg.model, len)?;
    if a.json {
        println!("{}", serde_json::to_string_pretty(&s).map_err(Error::from)?);
        return Ok(());
    }
    println!("{:<28} {:>18} {:>10}", "layer", "output", "params");
    for row in &s.layers {
        println!("{:<28} {:>18} {:>10}", row.name, format!("{:?}", row.output), row.params);
    }
    for t in &s.taps {
        println!("tap on pool {}: length {}, width {}", t.pool, t.length, t.width);
    }
    println!("input length {len}");
    println!("parameters {} ({} trainable)", s.parameter_count, s.trainable_count);
    println!("multiply-accumulates per frame {}", s.macs);
    Ok(())
}
