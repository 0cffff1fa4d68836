//! Flat key=value run configuration with documented defaults, file values
//! and flag overrides, in that precedence. Unknown keys are rejected.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::corpus::SyntheticSpec;
use crate::error::{Error, Result};
use crate::model::Dims;
use crate::trainer::TrainConfig;

/// Full run configuration. `d_a = 0` means "auto": resolved to `4*d`.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub d: usize,
    pub d_a: usize,
    pub k: usize,
    pub n: usize,
    pub batch_size: usize,
    pub neg_multiplier: usize,
    pub beta: f64,
    pub lambda: f64,
    pub lr: f64,
    pub max_iters: u64,
    pub eval_every: u64,
    pub seed: u64,
    pub min_count: u32,
    pub n_topics: usize,
    pub items_per_topic: usize,
    pub n_users: usize,
    pub topics_min: usize,
    pub topics_max: usize,
    pub seq_min: usize,
    pub seq_max: usize,
    pub popularity_skew: f64,
    pub beta_grid: Vec<f64>,
    pub dump_routing: usize,
    pub corpus_dir: String,
    pub checkpoint: String,
    pub report_dir: String,
    pub input: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            d: 64,
            d_a: 0,
            k: 4,
            n: 20,
            batch_size: 128,
            neg_multiplier: 10,
            beta: 1.0,
            lambda: 1e2,
            lr: 1e-3,
            max_iters: 20_000,
            eval_every: 1000,
            seed: 42,
            min_count: 5,
            n_topics: 8,
            items_per_topic: 250,
            n_users: 5000,
            topics_min: 1,
            topics_max: 3,
            seq_min: 30,
            seq_max: 60,
            popularity_skew: 1.0,
            beta_grid: vec![0.1, 1.0, 4.0, 10.0],
            dump_routing: 0,
            corpus_dir: "corpus".into(),
            checkpoint: "report/model.ckpt".into(),
            report_dir: "report".into(),
            input: String::new(),
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("key '{key}': cannot parse value {value:?}")))
}

impl RunConfig {
    fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "d" => self.d = parse_num(key, value)?,
            "d_a" => self.d_a = parse_num(key, value)?,
            "k" => self.k = parse_num(key, value)?,
            "n" => self.n = parse_num(key, value)?,
            "batch_size" => self.batch_size = parse_num(key, value)?,
            "neg_multiplier" => self.neg_multiplier = parse_num(key, value)?,
            "beta" => self.beta = parse_num(key, value)?,
            "lambda" => self.lambda = parse_num(key, value)?,
            "lr" => self.lr = parse_num(key, value)?,
            "max_iters" => self.max_iters = parse_num(key, value)?,
            "eval_every" => self.eval_every = parse_num(key, value)?,
            "seed" => self.seed = parse_num(key, value)?,
            "min_count" => self.min_count = parse_num(key, value)?,
            "n_topics" => self.n_topics = parse_num(key, value)?,
            "items_per_topic" => self.items_per_topic = parse_num(key, value)?,
            "n_users" => self.n_users = parse_num(key, value)?,
            "topics_min" => self.topics_min = parse_num(key, value)?,
            "topics_max" => self.topics_max = parse_num(key, value)?,
            "seq_min" => self.seq_min = parse_num(key, value)?,
            "seq_max" => self.seq_max = parse_num(key, value)?,
            "popularity_skew" => self.popularity_skew = parse_num(key, value)?,
            "beta_grid" => {
                self.beta_grid = value
                    .split(',')
                    .map(|t| parse_num::<f64>(key, t))
                    .collect::<Result<_>>()?;
            }
            "dump_routing" => self.dump_routing = parse_num(key, value)?,
            "corpus_dir" => self.corpus_dir = value.trim().to_string(),
            "checkpoint" => self.checkpoint = value.trim().to_string(),
            "report_dir" => self.report_dir = value.trim().to_string(),
            "input" => self.input = value.trim().to_string(),
            _ => return Err(Error::Config(format!("unknown config key '{key}'"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let positives: &[(&str, bool)] = &[
            ("d", self.d > 0),
            ("k", self.k > 0),
            ("n", self.n > 0),
            ("batch_size", self.batch_size > 0),
            ("neg_multiplier", self.neg_multiplier > 0),
            ("eval_every", self.eval_every > 0),
            ("lr", self.lr > 0.0),
            ("beta", self.beta >= 0.0),
            ("lambda", self.lambda >= 0.0),
            ("popularity_skew", self.popularity_skew >= 0.0),
            ("n_topics", self.n_topics > 0),
            ("items_per_topic", self.items_per_topic > 0),
            ("n_users", self.n_users > 0),
            ("topics_min", self.topics_min > 0 && self.topics_min <= self.topics_max),
            ("topics_max", self.topics_max <= self.n_topics),
            ("seq_min", self.seq_min > 0 && self.seq_min <= self.seq_max),
            ("beta_grid", self.beta_grid.iter().all(|&b| b >= 0.0)),
            ("report_dir", !self.report_dir.is_empty()),
            ("corpus_dir", !self.corpus_dir.is_empty()),
        ];
        for (key, ok) in positives {
            if !ok {
                return Err(Error::Config(format!("key '{key}': invalid value")));
            }
        }
        Ok(())
    }

    pub fn resolved_d_a(&self) -> usize {
        if self.d_a == 0 {
            4 * self.d
        } else {
            self.d_a
        }
    }

    pub fn dims(&self) -> Dims {
        Dims { d: self.d, d_a: self.resolved_d_a(), k: self.k, n: self.n }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            dims: self.dims(),
            batch_size: self.batch_size,
            neg_multiplier: self.neg_multiplier,
            beta: self.beta,
            lambda: self.lambda,
            lr: self.lr,
            max_iters: self.max_iters,
            eval_every: self.eval_every,
            seed: self.seed,
        }
    }

    pub fn synthetic_spec(&self) -> SyntheticSpec {
        SyntheticSpec {
            n_topics: self.n_topics,
            items_per_topic: self.items_per_topic,
            n_users: self.n_users,
            topics_per_user: (self.topics_min, self.topics_max),
            seq_length: (self.seq_min, self.seq_max),
            popularity_skew: self.popularity_skew,
            seed: self.seed,
        }
    }

    /// All keys as a flat key=value snapshot, itself a valid config file.
    pub fn snapshot(&self) -> String {
        let grid: Vec<String> = self.beta_grid.iter().map(|b| b.to_string()).collect();
        let mut pairs: BTreeMap<&str, String> = BTreeMap::new();
        pairs.insert("d", self.d.to_string());
        pairs.insert("d_a", self.d_a.to_string());
        pairs.insert("k", self.k.to_string());
        pairs.insert("n", self.n.to_string());
        pairs.insert("batch_size", self.batch_size.to_string());
        pairs.insert("neg_multiplier", self.neg_multiplier.to_string());
        pairs.insert("beta", self.beta.to_string());
        pairs.insert("lambda", self.lambda.to_string());
        pairs.insert("lr", self.lr.to_string());
        pairs.insert("max_iters", self.max_iters.to_string());
        pairs.insert("eval_every", self.eval_every.to_string());
        pairs.insert("seed", self.seed.to_string());
        pairs.insert("min_count", self.min_count.to_string());
        pairs.insert("n_topics", self.n_topics.to_string());
        pairs.insert("items_per_topic", self.items_per_topic.to_string());
        pairs.insert("n_users", self.n_users.to_string());
        pairs.insert("topics_min", self.topics_min.to_string());
        pairs.insert("topics_max", self.topics_max.to_string());
        pairs.insert("seq_min", self.seq_min.to_string());
        pairs.insert("seq_max", self.seq_max.to_string());
        pairs.insert("popularity_skew", self.popularity_skew.to_string());
        pairs.insert("beta_grid", grid.join(","));
        pairs.insert("dump_routing", self.dump_routing.to_string());
        pairs.insert("corpus_dir", self.corpus_dir.clone());
        pairs.insert("checkpoint", self.checkpoint.clone());
        pairs.insert("report_dir", self.report_dir.clone());
        pairs.insert("input", self.input.clone());
        let mut out = String::new();
        for (k, v) in pairs {
            writeln!(out, "{k}={v}").unwrap();
        }
        out
    }
}

/// Builds a config from defaults, then file values, then flag overrides.
/// `REMI_SEED` (when set) applies only if neither the file nor a flag sets
/// the seed.
pub fn parse_config(
    file: Option<&Path>,
    overrides: &[(String, String)],
) -> Result<RunConfig> {
    let mut config = RunConfig::default();
    let mut seed_set = false;

    if let Some(path) = file {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        for (ln, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value", ln + 1)))?;
            let key = key.trim();
            config.apply(key, value)?;
            if key == "seed" {
                seed_set = true;
            }
        }
    }
    for (key, value) in overrides {
        config.apply(key, value)?;
        if key == "seed" {
            seed_set = true;
        }
    }
    if !seed_set {
        if let Ok(env_seed) = std::env::var("REMI_SEED") {
            config.seed = parse_num("REMI_SEED", &env_seed)?;
        }
    }
    config.validate()?;
    Ok(config)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_config(content: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f
    }

    #[test]
    fn empty_file_yields_defaults() {
        let f = write_config("# nothing here\n");
        let c = parse_config(Some(f.path()), &[]).unwrap();
        assert_eq!(c.d, 64);
        assert_eq!(c.lambda, 1e2);
        assert_eq!(c.beta, 1.0);
        assert_eq!(c.resolved_d_a(), 256);
    }

    #[test]
    fn flags_override_file() {
        let f = write_config("beta=1\n");
        let c = parse_config(Some(f.path()), &[("beta".into(), "4".into())]).unwrap();
        assert_eq!(c.beta, 4.0);
    }

    #[test]
    fn negative_beta_rejected() {
        let f = write_config("beta=-1\n");
        let err = parse_config(Some(f.path()), &[]).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        assert!(err.to_string().contains("beta"));
    }

    #[test]
    fn unknown_key_rejected_by_name() {
        let f = write_config("betta=1\n");
        let err = parse_config(Some(f.path()), &[]).unwrap_err();
        assert!(err.to_string().contains("betta"));
    }

    #[test]
    fn type_mismatch_names_key() {
        let f = write_config("max_iters=soon\n");
        let err = parse_config(Some(f.path()), &[]).unwrap_err();
        assert!(err.to_string().contains("max_iters"));
    }

    #[test]
    fn snapshot_round_trips() {
        let f = write_config("beta=4\nd=16\ncorpus_dir=/tmp/c\nbeta_grid=0.5,2\n");
        let c = parse_config(Some(f.path()), &[]).unwrap();
        let snap = write_config(&c.snapshot());
        let back = parse_config(Some(snap.path()), &[]).unwrap();
        assert_eq!(c, back);
    }
}
