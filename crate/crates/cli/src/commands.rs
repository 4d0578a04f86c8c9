use std::collections::BTreeMap;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde_json::json;

use bip_core::biploop::{
    baseline_sentence_level, evaluate, pretrain, train_bandit, write_stats, FeedbackMode, TrainStats,
};
use bip_core::config::{DataConfig, RunConfig, SyntheticData};
use bip_core::corpus::{load_lines, TokenId, TokenizedPair, Vocab};
use bip_core::feedback::{simulated_reward, ConsoleSource, FeedbackSource, SimulatedOracle};
use bip_core::metrics::chrf;
use bip_core::{ActorParams, Checkpoint, Error};
use bip_service::{AppState, ServiceConfig};

use crate::{Cli, CliError, Command, FeedbackArg, ServeArgs, TrainArgs};

pub const EFFECTIVE_CONFIG_FILE: &str = "effective_config.json";

type Result<T> = std::result::Result<T, CliError>;
/// Tokenized source lines and their references.
type Parallel = (Vec<Vec<String>>, Vec<Vec<String>>);

fn usage(e: Error) -> CliError {
    match e {
        Error::Config(msg) => CliError::Usage(msg),
        other => CliError::Core(other),
    }
}

/// Config file, then `--seed`, then subcommand flags.
fn effective_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path).map_err(usage)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.model.seed = seed;
        cfg.train.seed = seed;
        cfg.pretrain.seed = seed;
        if let DataConfig::Synthetic(s) = &mut cfg.data {
            s.task.seed = seed;
        }
    }
    let (epsilon, mu, feedback) = match &cli.command {
        Command::Train(a) | Command::Baseline(a) => (a.epsilon, a.mu, a.feedback),
        Command::Serve(a) => (a.epsilon, a.mu, None),
        _ => (None, None, None),
    };
    if let Some(e) = epsilon {
        cfg.train.epsilon = e;
    }
    if let Some(m) = mu {
        cfg.train.mu = m;
    }
    if let Some(f) = feedback {
        cfg.train.feedback = match f {
            FeedbackArg::Simulated => FeedbackMode::Simulated,
            FeedbackArg::Human => FeedbackMode::Human,
        };
    }
    cfg.validate().map_err(usage)?;
    Ok(cfg)
}

pub fn run(cli: Cli) -> Result<()> {
    let cfg = effective_config(&cli)?;
    if cli.dump_config {
        println!("{}", cfg.to_json());
        return Ok(());
    }
    tracing::info!(event = "effective_config", config = %serde_json::to_string(&cfg).expect("config serializes"));
    match &cli.command {
        Command::Pretrain { out } => run_pretrain(&cfg, out),
        Command::Train(args) => run_train(&cfg, args, false),
        Command::Baseline(args) => run_train(&cfg, args, true),
        Command::Eval { checkpoint, test } => run_eval(&cfg, checkpoint, test.as_deref()),
        Command::Chrf {
            hyp,
            reference,
            partial,
        } => run_chrf(&cfg, hyp, reference, *partial),
        Command::Serve(args) => run_serve(&cfg, args),
        Command::GenerateSynthetic { out } => run_generate(&cfg, out),
    }
}

fn synthetic(cfg: &RunConfig, what: &str) -> Result<SyntheticData> {
    match &cfg.data {
        DataConfig::Synthetic(s) => Ok(*s),
        DataConfig::Files(_) => Err(CliError::Usage(format!(
            "the configuration uses file data; pass {what} explicitly"
        ))),
    }
}

fn save_config(cfg: &RunConfig, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join(EFFECTIVE_CONFIG_FILE);
    fs::write(&path, cfg.to_json()).map_err(|e| Error::io(&path, e))?;
    Ok(())
}

fn parallel_files(files: &[PathBuf]) -> Result<Parallel> {
    let sources = load_lines(&files[0])?;
    let references = load_lines(&files[1])?;
    if sources.len() != references.len() {
        return Err(CliError::Runtime(format!(
            "{} has {} lines but {} has {}",
            files[0].display(),
            sources.len(),
            files[1].display(),
            references.len()
        )));
    }
    Ok((sources, references))
}

fn split_pairs(pairs: &[TokenizedPair]) -> Parallel {
    pairs.iter().map(|p| (p.source.clone(), p.target.clone())).unzip()
}

fn run_pretrain(cfg: &RunConfig, out: &Path) -> Result<()> {
    let (vocabs, train, valid) = match &cfg.data {
        DataConfig::Synthetic(s) => {
            let splits = s.splits()?;
            (splits.vocabs, splits.train, splits.valid)
        }
        DataConfig::Files(f) => f.load()?,
    };
    let mut actor = ActorParams::init(cfg.model.dims(&vocabs)?, cfg.model.seed)?;
    tracing::info!(event = "pretrain_start", train_pairs = train.len(), valid_pairs = valid.len());
    let report = pretrain(&mut actor, &train, &valid, &cfg.pretrain, &cfg.optim, |e| {
        tracing::info!(
            event = "epoch",
            epoch = e.epoch,
            train_nll = e.train_nll,
            valid_perplexity = e.valid_perplexity,
            rate = e.rate
        );
    })?;
    Checkpoint::actor_only(actor, vocabs).save(out)?;
    save_config(cfg, out)?;
    tracing::info!(event = "pretrain_done", best_epoch = report.best_epoch, best_perplexity = report.best_perplexity);
    println!(
        "{}",
        json!({
            "initial_perplexity": report.initial_perplexity,
            "best_epoch": report.best_epoch,
            "best_perplexity": report.best_perplexity,
            "epochs": report.epochs.len(),
        })
    );
    Ok(())
}

fn run_train(cfg: &RunConfig, args: &TrainArgs, baseline: bool) -> Result<()> {
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    let (sources, references) = match &args.stream {
        Some(files) => parallel_files(files)?,
        None => split_pairs(&synthetic(cfg, "--stream SRC REF")?.splits()?.stream),
    };
    let ids: Vec<_> = sources.iter().map(|s| ckpt.vocabs.source.encode(s)).collect();
    let mut learner = ckpt.resume(cfg.model.seed.wrapping_add(1))?;
    let tcfg = cfg.train_config();

    let mut feedback: Box<dyn FeedbackSource> = match tcfg.feedback {
        FeedbackMode::Simulated => Box::new(SimulatedOracle::new(references, ckpt.vocabs.target.clone(), cfg.chrf)),
        FeedbackMode::Human => Box::new(ConsoleSource::new(io::stdin().lock(), io::stdout())),
    };
    tracing::info!(
        event = "train_start",
        protocol = if baseline { "sentence_level" } else { "interactive" },
        inputs = ids.len(),
        epsilon = tcfg.epsilon,
        mu = tcfg.mu
    );
    let stats = if baseline {
        baseline_sentence_level(&mut learner, &ids, feedback.as_mut(), &tcfg, &ckpt.vocabs)?
    } else {
        train_bandit(&mut learner, &ids, feedback.as_mut(), &tcfg, &ckpt.vocabs)?
    };
    Checkpoint::from_learner(&learner, ckpt.vocabs.clone()).save(&args.out)?;
    save_config(cfg, &args.out)?;
    if let Some(dir) = &args.stats {
        write_stats(dir, &stats)?;
        save_config(cfg, dir)?;
    }
    let summary = summarize(&stats);
    tracing::info!(event = "train_done", k = stats.k, summary = %summary);
    println!("{summary}");
    Ok(())
}

fn summarize(stats: &TrainStats) -> serde_json::Value {
    let inputs = stats.requests_per_input.len();
    let requests: usize = stats.requests_per_input.iter().sum();
    json!({
        "inputs": inputs,
        "k": stats.k,
        "requests_per_input": if inputs == 0 { 0.0 } else { requests as f64 / inputs as f64 },
        "mean_reward": stats.running_reward_mean.last().copied().unwrap_or(0.0),
        "final_cumulative_entropy": stats.cumulative_entropy.last().copied().unwrap_or(0.0),
    })
}

fn run_eval(cfg: &RunConfig, checkpoint: &Path, test: Option<&[PathBuf]>) -> Result<()> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let (sources, references) = match test {
        Some(files) => parallel_files(files)?,
        None => split_pairs(&synthetic(cfg, "--test SRC REF")?.splits()?.test),
    };
    let ids: Vec<_> = sources.iter().map(|s| ckpt.vocabs.source.encode(s)).collect();
    let report = evaluate(
        &ckpt.actor,
        &ids,
        &references,
        &ckpt.vocabs.target,
        cfg.train.t_max,
        &cfg.chrf,
    )?;
    tracing::info!(event = "eval_done", avg_chrf = report.avg_chrf, bleu = report.bleu);
    println!(
        "{}",
        json!({"inputs": ids.len(), "avg_chrf": report.avg_chrf, "bleu": report.bleu})
    );
    Ok(())
}

fn run_chrf(cfg: &RunConfig, hyp: &Path, reference: &Path, partial: bool) -> Result<()> {
    let (hyps, refs) = parallel_files(&[hyp.to_path_buf(), reference.to_path_buf()])?;
    if hyps.is_empty() {
        return Err(CliError::Runtime(format!("{} is empty", hyp.display())));
    }
    let mut out = io::stdout().lock();
    let mut total = 0.0;
    for (h, r) in hyps.iter().zip(&refs) {
        let score = if partial {
            simulated_reward(h, r, &cfg.chrf)
        } else {
            chrf(h, r, &cfg.chrf)
        };
        total += score;
        writeln!(out, "{score:.6}").map_err(|e| CliError::Runtime(e.to_string()))?;
    }
    writeln!(out, "mean {:.6}", total / hyps.len() as f64).map_err(|e| CliError::Runtime(e.to_string()))?;
    Ok(())
}

fn run_serve(cfg: &RunConfig, args: &ServeArgs) -> Result<()> {
    let mut checkpoints = BTreeMap::new();
    for dir in &args.checkpoint {
        let name = dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .ok_or_else(|| CliError::Usage(format!("{} has no directory name", dir.display())))?;
        // fail at startup rather than on the first session
        Checkpoint::load(dir)?;
        if checkpoints.insert(name.clone(), dir.clone()).is_some() {
            return Err(CliError::Usage(format!("two checkpoints named {name:?}")));
        }
    }
    let corpus = load_lines(&args.corpus[0])?;
    let references = match args.corpus.get(1) {
        Some(path) => Some(parallel_files(&[args.corpus[0].clone(), path.clone()])?.1),
        None => None,
    };
    let mut service = ServiceConfig::new(checkpoints, corpus);
    service.references = references;
    service.train = cfg.train_config();
    service.chrf = cfg.chrf;
    service.critic_seed = cfg.model.seed.wrapping_add(1);
    service.timeout = Duration::from_secs(args.timeout_secs);
    service.output_dir = args.out.clone();
    if let Some(dir) = &args.out {
        save_config(cfg, dir)?;
    }

    let runtime = tokio::runtime::Runtime::new().map_err(|e| CliError::Runtime(e.to_string()))?;
    runtime.block_on(async {
        let listener = tokio::net::TcpListener::bind((args.host.as_str(), args.port))
            .await
            .map_err(|e| CliError::Runtime(format!("cannot bind {}:{}: {e}", args.host, args.port)))?;
        let addr = listener.local_addr().map_err(|e| CliError::Runtime(e.to_string()))?;
        tracing::info!(event = "listening", addr = %addr);
        bip_service::serve(listener, AppState::new(service))
            .await
            .map_err(|e| CliError::Runtime(e.to_string()))
    })
}

fn write_lines(path: &Path, lines: impl Iterator<Item = String>) -> Result<()> {
    let mut text = String::new();
    for l in lines {
        text.push_str(&l);
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))?;
    Ok(())
}

fn run_generate(cfg: &RunConfig, out: &Path) -> Result<()> {
    let splits = synthetic(cfg, "nothing; generation needs a synthetic data section")?.splits()?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let decode = |v: &Vocab, ids: &[TokenId]| v.decode_text(ids).join(" ");
    for (name, pairs) in [("train", &splits.train), ("valid", &splits.valid)] {
        write_lines(
            &out.join(format!("{name}.src")),
            pairs.iter().map(|p| decode(&splits.vocabs.source, &p.source)),
        )?;
        write_lines(
            &out.join(format!("{name}.tgt")),
            pairs.iter().map(|p| decode(&splits.vocabs.target, &p.target)),
        )?;
    }
    for (name, pairs) in [("stream", &splits.stream), ("test", &splits.test)] {
        write_lines(&out.join(format!("{name}.src")), pairs.iter().map(|p| p.source.join(" ")))?;
        write_lines(&out.join(format!("{name}.tgt")), pairs.iter().map(|p| p.target.join(" ")))?;
    }
    save_config(cfg, out)?;
    tracing::info!(
        event = "generated",
        train = splits.train.len(),
        valid = splits.valid.len(),
        stream = splits.stream.len(),
        test = splits.test.len()
    );
    Ok(())
}
