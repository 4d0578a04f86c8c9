use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};

use super::episode::{EpisodeLog, EPISODE_SCHEMA_VERSION};
use super::train::TrainStats;

pub const ENTROPY_TRACE_FILE: &str = "entropy_trace.csv";
pub const REQUESTS_FILE: &str = "requests.csv";
pub const EPISODES_FILE: &str = "episodes.jsonl";

/// Writes the entropy trace, per-input request counts and episode logs into `dir`.
pub fn write_stats(dir: &Path, stats: &TrainStats) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;

    let path = dir.join(ENTROPY_TRACE_FILE);
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record(["input_index", "step", "step_entropy", "avg_entropy", "gamma", "triggered"])?;
    for ep in &stats.episodes {
        for s in &ep.steps {
            w.write_record([
                ep.input_index.to_string(),
                s.step.to_string(),
                s.step_entropy.to_string(),
                s.avg_entropy.to_string(),
                s.gamma.to_string(),
                s.triggered.to_string(),
            ])?;
        }
    }
    w.flush().map_err(|e| Error::io(&path, e))?;

    let path = dir.join(REQUESTS_FILE);
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record(["input_index", "n_requests", "n_tokens", "final_reward"])?;
    for ep in &stats.episodes {
        let n_tokens = ep
            .final_hypothesis
            .iter()
            .filter(|&&t| t != crate::corpus::EOS)
            .count();
        w.write_record([
            ep.input_index.to_string(),
            ep.requests.to_string(),
            n_tokens.to_string(),
            ep.final_reward.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;

    let path = dir.join(EPISODES_FILE);
    let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
    let mut w = BufWriter::new(file);
    for ep in &stats.episodes {
        serde_json::to_writer(&mut w, ep)?;
        w.write_all(b"\n").map_err(|e| Error::io(&path, e))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    Ok(())
}

/// Reads an episodes file, rejecting logs of another schema version.
pub fn read_episodes(path: &Path) -> Result<Vec<EpisodeLog>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let log: EpisodeLog = serde_json::from_str(&line)?;
        if log.schema_version != EPISODE_SCHEMA_VERSION {
            return Err(Error::Input(format!(
                "episode schema version {} (expected {EPISODE_SCHEMA_VERSION})",
                log.schema_version
            )));
        }
        out.push(log);
    }
    Ok(out)
}
