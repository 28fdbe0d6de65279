use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use log::info;

use zrforge::data::{load_dataset, parse_quadruples, save_dataset, VocabPolicy, Vocabularies};
use zrforge::eval::{evaluate_split, SplitSelector};
use zrforge::forecaster::{fit, load_checkpoint, save_checkpoint, TrainConfig};
use zrforge::pipeline::{ablate, ablation_table, mock_texts};
use zrforge::semantics::{load_text_matrices, save_text_matrices, Sidecar, TextRecord};
use zrforge::split::{build_zero_shot, SplitConfig};
use zrforge::synth::{generate, SynthConfig};
use zrforge::Error;

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_NUMERIC: u8 = 3;

/// Zero-shot relational forecasting on temporal knowledge graphs.
#[derive(Debug, Parser)]
#[command(name = "zrforge", version)]
struct Cli {
    /// Upper bound on worker threads; 0 uses every core.
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic graph with planted relation clusters.
    Synth(SynthArgs),
    /// Build a zero-shot train/valid/test split from a quadruple file.
    Split(SplitArgs),
    /// Write deterministic stand-in text matrices for a split dataset.
    EmbedMock(EmbedArgs),
    /// Train a forecaster and save a checkpoint.
    Train(TrainArgs),
    /// Evaluate a checkpoint with filtered ranking metrics.
    Eval(EvalArgs),
    /// Train and compare the full model, the random-text control and the model without history learning.
    Ablate(AblateArgs),
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 200)]
    entities: usize,
    #[arg(long, default_value_t = 6)]
    clusters: usize,
    #[arg(long, default_value_t = 4)]
    relations_per_cluster: usize,
    #[arg(long, default_value_t = 200)]
    pairs: usize,
    #[arg(long, default_value_t = 60)]
    train_steps: usize,
    #[arg(long, default_value_t = 20)]
    eval_steps: usize,
    #[arg(long, default_value_t = 0.5)]
    emission_prob: f64,
    #[arg(long, default_value_t = 1)]
    holdout_per_cluster: usize,
    #[arg(long, default_value_t = 0.2)]
    holdout_weight: f64,
}

#[derive(Debug, Args)]
struct SplitArgs {
    #[arg(long)]
    input: PathBuf,
    /// Label of the first evaluation timestamp, as written in the input.
    #[arg(long)]
    split_ts: String,
    #[arg(long, default_value_t = 40)]
    threshold: usize,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Debug, Args)]
struct EmbedArgs {
    #[arg(long)]
    data_dir: PathBuf,
    #[arg(long, default_value_t = 16)]
    d_w: usize,
    /// Defaults to `rel_emb.zrle` inside the data directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    data_dir: PathBuf,
    /// Defaults to `rel_emb.zrle` inside the data directory.
    #[arg(long)]
    embeddings: Option<PathBuf>,
    /// Flat `key=value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides one configuration key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    out: PathBuf,
    /// Writes the per-epoch training log as JSON.
    #[arg(long)]
    log_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data_dir: PathBuf,
    #[arg(long, default_value = "both", value_parser = ["valid", "test", "both"])]
    split: String,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct AblateArgs {
    /// Split dataset directories, each holding `rel_emb.zrle`; repeatable.
    #[arg(long = "data-dir", required = true)]
    data_dirs: Vec<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(e) if e.is_numeric() => EXIT_NUMERIC,
        Some(Error::Config(_)) => EXIT_USAGE,
        _ => EXIT_DATA,
    }
}

/// The error chain joined by `: `, skipping causes already spelled out.
fn describe(err: &anyhow::Error) -> String {
    let mut msg = String::new();
    for cause in err.chain() {
        let text = cause.to_string();
        if !msg.contains(&text) {
            if !msg.is_empty() {
                msg.push_str(": ");
            }
            msg.push_str(&text);
        }
    }
    msg
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("ZRFORGE_LOG", "info")).init();
    if let Err(e) = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads)
        .build_global()
    {
        eprintln!("error: {e}");
        return ExitCode::from(EXIT_USAGE);
    }
    info!(
        "threads={} seed={} command={:?}",
        cli.threads, cli.seed, cli.command
    );
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", describe(&e));
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(cli: &Cli) -> anyhow::Result<()> {
    match &cli.command {
        Command::Synth(a) => synth(a, cli.seed),
        Command::Split(a) => split(a),
        Command::EmbedMock(a) => embed_mock(a, cli.seed),
        Command::Train(a) => train(a, cli.seed),
        Command::Eval(a) => eval(a),
        Command::Ablate(a) => ablate_cmd(a, cli.seed),
    }
}

fn write(path: &Path, body: &str) -> anyhow::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::Io {
            path: dir.into(),
            source: e,
        })?;
    }
    fs::write(path, body).map_err(|e| Error::Io {
        path: path.into(),
        source: e,
    })?;
    Ok(())
}

fn synth(a: &SynthArgs, seed: u64) -> anyhow::Result<()> {
    let cfg = SynthConfig {
        seed,
        n_entities: a.entities,
        n_clusters: a.clusters,
        relations_per_cluster: a.relations_per_cluster,
        scripts: SynthConfig::default().scripts,
        n_pairs: a.pairs,
        train_steps: a.train_steps,
        eval_steps: a.eval_steps,
        emission_prob: a.emission_prob,
        holdout_per_cluster: a.holdout_per_cluster,
        holdout_weight: a.holdout_weight,
    };
    info!("synth config: {}", serde_json::to_string(&cfg)?);
    let out = generate(&cfg)?;
    out.write_to(&a.out_dir)?;
    println!(
        "wrote {} facts to {} (first evaluation timestamp {})",
        out.n_facts,
        a.out_dir.display(),
        out.planted.split_timestamp
    );
    Ok(())
}

fn split(a: &SplitArgs) -> anyhow::Result<()> {
    let file = fs::File::open(&a.input).map_err(|e| Error::Io {
        path: a.input.clone(),
        source: e,
    })?;
    let mut vocab = Vocabularies::default();
    let facts = parse_quadruples(std::io::BufReader::new(file), &mut vocab, VocabPolicy::Grow)
        .with_context(|| format!("reading {}", a.input.display()))?;
    let split_timestamp = vocab.timeline.lookup(&a.split_ts).ok_or_else(|| {
        Error::Split(format!(
            "timestamp `{}` does not occur in the input",
            a.split_ts
        ))
    })?;
    let cfg = SplitConfig {
        split_timestamp,
        freq_threshold: a.threshold,
    };
    info!(
        "split config: split_ts={} index={split_timestamp} threshold={}",
        a.split_ts, a.threshold
    );
    let ds = build_zero_shot(vocab, &facts, cfg)?;
    let stats = save_dataset(&a.out_dir, &ds)?;
    println!("{}", serde_json::to_string_pretty(&stats)?);
    Ok(())
}

fn embed_mock(a: &EmbedArgs, seed: u64) -> anyhow::Result<()> {
    let ds = load_dataset(&a.data_dir)?;
    let out = a
        .out
        .clone()
        .unwrap_or_else(|| a.data_dir.join("rel_emb.zrle"));
    info!(
        "embed-mock config: d_w={} seed={seed} out={}",
        a.d_w,
        out.display()
    );
    let rels = &ds.vocab.relations;
    let store = mock_texts(rels, a.d_w, seed)?;
    save_text_matrices(&out, &store)?;
    let sidecar: Sidecar = (0..store.len())
        .map(|r| {
            let text = rels.text(r);
            (
                r.to_string(),
                TextRecord {
                    erd: text.clone(),
                    text,
                },
            )
        })
        .collect();
    write(
        &out.with_extension("json"),
        &(serde_json::to_string_pretty(&sidecar)? + "\n"),
    )?;
    println!("wrote {} text matrices to {}", store.len(), out.display());
    Ok(())
}

fn load_config(
    path: Option<&Path>,
    overrides: &[String],
    seed: u64,
) -> anyhow::Result<TrainConfig> {
    let mut text = match path {
        Some(p) => fs::read_to_string(p).map_err(|e| Error::Io {
            path: p.into(),
            source: e,
        })?,
        None => String::new(),
    };
    text.push_str(&format!("\nseed={seed}\n"));
    for o in overrides {
        text.push_str(o);
        text.push('\n');
    }
    Ok(TrainConfig::from_kv(&text)?)
}

fn train(a: &TrainArgs, seed: u64) -> anyhow::Result<()> {
    let cfg = load_config(a.config.as_deref(), &a.overrides, seed)?;
    info!("train config:\n{}", cfg.to_kv());
    let ds = load_dataset(&a.data_dir)?;
    let path = a
        .embeddings
        .clone()
        .unwrap_or_else(|| a.data_dir.join("rel_emb.zrle"));
    let texts = load_text_matrices(&path, 2 * ds.n_base(), None)?;
    let (model, log) = fit(&ds, texts, &cfg)?;
    save_checkpoint(&a.out, &model, &ds.fingerprint())?;
    if let Some(p) = &a.log_out {
        write(p, &(serde_json::to_string_pretty(&log)? + "\n"))?;
    }
    println!(
        "saved {} (best epoch {}, validation MRR {:.3})",
        a.out.display(),
        log.best_epoch,
        log.best_valid_mrr
    );
    Ok(())
}

fn eval(a: &EvalArgs) -> anyhow::Result<()> {
    let which: SplitSelector = a.split.parse()?;
    info!(
        "eval config: checkpoint={} split={}",
        a.checkpoint.display(),
        a.split
    );
    let ds = load_dataset(&a.data_dir)?;
    let (model, header) = load_checkpoint(&a.checkpoint)?;
    if header.dataset_fingerprint != ds.fingerprint() {
        return Err(Error::Format("checkpoint was trained on a different dataset".into()).into());
    }
    let report = evaluate_split(&model, &ds, which)?;
    if let Some(p) = &a.out {
        write(p, &(report.to_json()? + "\n"))?;
    }
    print!("{}", report.table());
    Ok(())
}

fn ablate_cmd(a: &AblateArgs, seed: u64) -> anyhow::Result<()> {
    let cfg = load_config(a.config.as_deref(), &a.overrides, seed)?;
    info!("ablate config:\n{}", cfg.to_kv());
    let mut rows = Vec::new();
    for dir in &a.data_dirs {
        let ds = load_dataset(dir)?;
        let texts = load_text_matrices(&dir.join("rel_emb.zrle"), 2 * ds.n_base(), None)?;
        let name = dir.file_name().map_or_else(
            || dir.display().to_string(),
            |n| n.to_string_lossy().into_owned(),
        );
        rows.extend(ablate(&name, &ds, &texts, &cfg)?);
    }
    if let Some(p) = &a.out {
        write(p, &(serde_json::to_string_pretty(&rows)? + "\n"))?;
    }
    print!("{}", ablation_table(&rows));
    Ok(())
}
