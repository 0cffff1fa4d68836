//! Command-line surface: ingest/synth corpora, train, evaluate, diagnose
//! routing collapse, and sweep the hardness parameter.

use std::fs;
use std::fs::File;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use remi::config::{parse_config, RunConfig};
use remi::corpus::{generate_synthetic, ingest, split_users, InteractionCorpus, UserSplit};
use remi::error::{Error, Result};
use remi::eval::{collapse_diagnostics, evaluate_users, CollapseReport, EvalMetrics};
use remi::model::ModelParams;
use remi::trainer::{train_loop, HistoryRow, TrainResult};

#[derive(Parser)]
#[command(name = "remi", about = "Multi-interest candidate matching engine", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct CommonArgs {
    /// Flat key=value config file.
    #[arg(long)]
    config: Option<PathBuf>,

    /// Extra override as key=value (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,

    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    max_iters: Option<u64>,
    #[arg(long)]
    corpus_dir: Option<String>,
    #[arg(long)]
    checkpoint: Option<String>,
    #[arg(long)]
    report_dir: Option<String>,
    /// Input interaction log (TSV: user, item, timestamp).
    #[arg(long)]
    input: Option<String>,
}

#[derive(Subcommand, Clone)]
enum Command {
    /// Ingest a TSV interaction log into a corpus directory.
    Ingest(CommonArgs),
    /// Generate a synthetic multi-topic corpus.
    Synth(CommonArgs),
    /// Train a model on a corpus.
    Train(CommonArgs),
    /// Evaluate a checkpoint on the test users.
    Eval(CommonArgs),
    /// Report routing-collapse diagnostics for a checkpoint.
    Diagnose(CommonArgs),
    /// Train and evaluate over the beta grid.
    Sweep(CommonArgs),
}

impl Command {
    fn common(&self) -> &CommonArgs {
        match self {
            Command::Ingest(c)
            | Command::Synth(c)
            | Command::Train(c)
            | Command::Eval(c)
            | Command::Diagnose(c)
            | Command::Sweep(c) => c,
        }
    }

}

fn overrides_from(args: &CommonArgs) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for pair in &args.set {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects key=value, got {pair:?}")))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    let mut push = |key: &str, value: Option<String>| {
        if let Some(v) = value {
            out.push((key.to_string(), v));
        }
    };
    push("beta", args.beta.map(|v| v.to_string()));
    push("lambda", args.lambda.map(|v| v.to_string()));
    push("seed", args.seed.map(|v| v.to_string()));
    push("max_iters", args.max_iters.map(|v| v.to_string()));
    push("corpus_dir", args.corpus_dir.clone());
    push("checkpoint", args.checkpoint.clone());
    push("report_dir", args.report_dir.clone());
    push("input", args.input.clone());
    Ok(out)
}

fn write_manifest(config: &RunConfig, command: &str, corpus: Option<&InteractionCorpus>) -> Result<()> {
    fs::create_dir_all(&config.report_dir)?;
    let mut text = format!("# run manifest: command={command}\n");
    if let Some(c) = corpus {
        text.push_str(&format!("# corpus_hash={}\n", c.content_hash()));
    }
    text.push_str(&config.snapshot());
    fs::write(Path::new(&config.report_dir).join("manifest.txt"), text)?;
    Ok(())
}

fn load_corpus(config: &RunConfig) -> Result<InteractionCorpus> {
    InteractionCorpus::load_dir(Path::new(&config.corpus_dir))
}

fn split_for(config: &RunConfig, corpus: &InteractionCorpus) -> Result<UserSplit> {
    split_users(corpus, (8, 1, 1), config.seed)
}

fn run_train(config: &RunConfig, corpus: &InteractionCorpus) -> Result<TrainResult> {
    let split = split_for(config, corpus)?;
    let result = train_loop(corpus, &split, &config.train_config())?;
    fs::create_dir_all(&config.report_dir)?;
    if let Some(parent) = Path::new(&config.checkpoint).parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    // best-validation checkpoint at the configured path, last iterate beside it
    result.best_params.save(Path::new(&config.checkpoint))?;
    result.final_params.save(&PathBuf::from(format!("{}.final", config.checkpoint)))?;
    let mut csv = String::from(HistoryRow::csv_header());
    csv.push('\n');
    for row in &result.history {
        csv.push_str(&row.to_csv());
        csv.push('\n');
    }
    fs::write(Path::new(&config.report_dir).join("history.csv"), csv)?;
    Ok(result)
}

fn run_eval(config: &RunConfig, corpus: &InteractionCorpus, params: &ModelParams) -> Result<EvalMetrics> {
    let split = split_for(config, corpus)?;
    let metrics = evaluate_users(params, corpus, &split.test, &[20, 50])?;
    fs::create_dir_all(&config.report_dir)?;
    let mut csv = String::from(EvalMetrics::csv_header());
    csv.push('\n');
    csv.push_str(&metrics.to_csv());
    fs::write(Path::new(&config.report_dir).join("metrics.csv"), csv)?;
    Ok(metrics)
}

fn run_diagnose(config: &RunConfig, corpus: &InteractionCorpus, params: &ModelParams) -> Result<CollapseReport> {
    let split = split_for(config, corpus)?;
    let report = collapse_diagnostics(params, corpus, &split.test, config.dump_routing > 0)?;
    fs::create_dir_all(&config.report_dir)?;
    let mut csv = String::from(CollapseReport::csv_header());
    csv.push('\n');
    csv.push_str(&report.to_csv());
    fs::write(Path::new(&config.report_dir).join("collapse.csv"), csv)?;
    if config.dump_routing > 0 {
        let dump_dir = Path::new(&config.report_dir).join("routing");
        fs::create_dir_all(&dump_dir)?;
        for (user, weights, mask) in report.routing_dumps.iter().take(config.dump_routing) {
            let mut out = String::from("position,interest,weight\n");
            for t in 0..weights.nrows() {
                if !mask[t] {
                    continue;
                }
                for k in 0..weights.ncols() {
                    out.push_str(&format!("{t},{k},{}\n", weights[[t, k]]));
                }
            }
            fs::write(dump_dir.join(format!("user_{user}.csv")), out)?;
        }
    }
    Ok(report)
}

fn dispatch(command: &Command, config: &RunConfig) -> Result<()> {
    match command {
        Command::Ingest(_) => {
            if config.input.is_empty() {
                return Err(Error::Config("key 'input': required for ingest".into()));
            }
            let file = File::open(&config.input)?;
            let corpus = ingest(file, config.min_count)?;
            corpus.save_dir(Path::new(&config.corpus_dir))?;
            write_manifest(config, "ingest", Some(&corpus))?;
            println!(
                "ingested {} users, {} items into {}",
                corpus.user_count(),
                corpus.item_count(),
                config.corpus_dir
            );
        }
        Command::Synth(_) => {
            let corpus = generate_synthetic(&config.synthetic_spec())?;
            corpus.save_dir(Path::new(&config.corpus_dir))?;
            write_manifest(config, "synth", Some(&corpus))?;
            println!(
                "generated {} users, {} items into {}",
                corpus.user_count(),
                corpus.item_count(),
                config.corpus_dir
            );
        }
        Command::Train(_) => {
            let corpus = load_corpus(config)?;
            write_manifest(config, "train", Some(&corpus))?;
            let result = run_train(config, &corpus)?;
            println!(
                "trained {} iters; best valid Recall@50 {:.4} at iter {}; checkpoint {}",
                config.max_iters, result.best_recall50, result.best_iter, config.checkpoint
            );
        }
        Command::Eval(_) => {
            let corpus = load_corpus(config)?;
            let params = ModelParams::load(Path::new(&config.checkpoint))?;
            write_manifest(config, "eval", Some(&corpus))?;
            let metrics = run_eval(config, &corpus, &params)?;
            for at in &metrics.per_n {
                println!(
                    "N={}: recall {:.4} hit {:.4} ndcg {:.4} ({} users)",
                    at.n, at.recall, at.hit_rate, at.ndcg, metrics.users
                );
            }
        }
        Command::Diagnose(_) => {
            let corpus = load_corpus(config)?;
            let params = ModelParams::load(Path::new(&config.checkpoint))?;
            write_manifest(config, "diagnose", Some(&corpus))?;
            let report = run_diagnose(config, &corpus, &params)?;
            println!(
                "mean max routing weight {:.4}, mean variance {:.6} over {} users",
                report.mean_max_weight(),
                report.mean_variance(),
                report.users
            );
        }
        Command::Sweep(_) => {
            let corpus = load_corpus(config)?;
            write_manifest(config, "sweep", Some(&corpus))?;
            fs::create_dir_all(&config.report_dir)?;
            let mut csv =
                String::from("beta,recall20,hit20,ndcg20,recall50,hit50,ndcg50\n");
            for &beta in &config.beta_grid {
                let mut run_cfg = config.clone();
                run_cfg.beta = beta;
                run_cfg.checkpoint = format!("{}.beta{}", config.checkpoint, beta);
                let result = run_train(&run_cfg, &corpus)?;
                let split = split_for(&run_cfg, &corpus)?;
                let metrics = evaluate_users(&result.best_params, &corpus, &split.test, &[20, 50])?;
                let m20 = &metrics.per_n[0];
                let m50 = &metrics.per_n[1];
                csv.push_str(&format!(
                    "{},{},{},{},{},{},{}\n",
                    beta, m20.recall, m20.hit_rate, m20.ndcg, m50.recall, m50.hit_rate, m50.ndcg
                ));
                println!("beta={beta}: recall@20 {:.4} recall@50 {:.4}", m20.recall, m50.recall);
            }
            fs::write(Path::new(&config.report_dir).join("sweep.csv"), csv)?;
        }
    }
    Ok(())
}

fn run() -> Result<()> {
    let cli = Cli::parse();
    let args = cli.command.common();
    let overrides = overrides_from(args)?;
    let config = parse_config(args.config.as_deref(), &overrides)?;
    dispatch(&cli.command, &config)
}

fn main() {
    if let Err(err) = run() {
        eprintln!("error: {err}");
        std::process::exit(err.exit_code());
    }
}
