//! Interaction corpus: ingestion, filtering, user splits, batch construction
//! and synthetic corpus generation.
//!
//! Item id 0 is reserved as the padding sentinel; real items are 1-based.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader, Read};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};

/// Reindexed interaction corpus. Users are 0-based, items 1-based with 0
/// reserved for padding. Sequences are time-ordered.
#[derive(Debug, Clone, PartialEq)]
pub struct InteractionCorpus {
    /// Per-user item sequences, ascending by original timestamp.
    pub sequences: Vec<Vec<u32>>,
    /// Original user tokens, indexed by new user id.
    pub user_orig: Vec<String>,
    /// Original item tokens, indexed by new item id; index 0 is the padding
    /// sentinel and holds an empty string.
    pub item_orig: Vec<String>,
    /// Interaction count per item id (index 0 always zero).
    pub item_counts: Vec<u32>,
}

impl InteractionCorpus {
    pub fn user_count(&self) -> usize {
        self.sequences.len()
    }

    /// Number of real items (excludes the padding sentinel).
    pub fn item_count(&self) -> usize {
        self.item_orig.len().saturating_sub(1)
    }

    /// Embedding table row count: real items plus the padding row.
    pub fn embedding_rows(&self) -> usize {
        self.item_orig.len()
    }

    /// Writes `items.tsv`, `users.tsv` and `sequences.tsv` into `dir`.
    pub fn save_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut items = String::new();
        for id in 1..self.item_orig.len() {
            writeln!(items, "{}\t{}\t{}", id, self.item_orig[id], self.item_counts[id]).unwrap();
        }
        fs::write(dir.join("items.tsv"), items)?;

        let mut users = String::new();
        for (id, orig) in self.user_orig.iter().enumerate() {
            writeln!(users, "{}\t{}\t{}", id, orig, self.sequences[id].len()).unwrap();
        }
        fs::write(dir.join("users.tsv"), users)?;

        let mut seqs = String::new();
        for (id, seq) in self.sequences.iter().enumerate() {
            let joined: Vec<String> = seq.iter().map(|i| i.to_string()).collect();
            writeln!(seqs, "{}\t{}", id, joined.join(" ")).unwrap();
        }
        fs::write(dir.join("sequences.tsv"), seqs)?;
        Ok(())
    }

    pub fn load_dir(dir: &Path) -> Result<Self> {
        let items_txt = fs::read_to_string(dir.join("items.tsv"))?;
        let users_txt = fs::read_to_string(dir.join("users.tsv"))?;
        let seqs_txt = fs::read_to_string(dir.join("sequences.tsv"))?;

        let mut item_orig = vec![String::new()];
        let mut item_counts = vec![0u32];
        for (ln, line) in items_txt.lines().enumerate() {
            let mut f = line.split('\t');
            let id: usize = next_field(&mut f, ln)?.parse().map_err(|_| bad_line(ln))?;
            let orig = next_field(&mut f, ln)?.to_string();
            let count: u32 = next_field(&mut f, ln)?.parse().map_err(|_| bad_line(ln))?;
            if id != item_orig.len() {
                return Err(Error::Data(format!("items.tsv: non-contiguous id {id}")));
            }
            item_orig.push(orig);
            item_counts.push(count);
        }

        let mut user_orig = Vec::new();
        for (ln, line) in users_txt.lines().enumerate() {
            let mut f = line.split('\t');
            let id: usize = next_field(&mut f, ln)?.parse().map_err(|_| bad_line(ln))?;
            if id != user_orig.len() {
                return Err(Error::Data(format!("users.tsv: non-contiguous id {id}")));
            }
            user_orig.push(next_field(&mut f, ln)?.to_string());
        }

        let mut sequences = vec![Vec::new(); user_orig.len()];
        for (ln, line) in seqs_txt.lines().enumerate() {
            let mut f = line.split('\t');
            let id: usize = next_field(&mut f, ln)?.parse().map_err(|_| bad_line(ln))?;
            let seq: Vec<u32> = next_field(&mut f, ln)?
                .split_whitespace()
                .map(|t| t.parse().map_err(|_| bad_line(ln)))
                .collect::<Result<_>>()?;
            if id >= sequences.len() {
                return Err(Error::Data(format!("sequences.tsv: unknown user {id}")));
            }
            sequences[id] = seq;
        }
        if sequences.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        Ok(InteractionCorpus { sequences, user_orig, item_orig, item_counts })
    }

    /// Content hash over the serialized corpus, for run manifests.
    pub fn content_hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for (id, seq) in self.sequences.iter().enumerate() {
            h.update(self.user_orig[id].as_bytes());
            h.update(b"\t");
            for item in seq {
                h.update(item.to_le_bytes());
            }
            h.update(b"\n");
        }
        for orig in &self.item_orig {
            h.update(orig.as_bytes());
            h.update(b"\n");
        }
        let digest = h.finalize();
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

fn next_field<'a>(fields: &mut impl Iterator<Item = &'a str>, ln: usize) -> Result<&'a str> {
    fields.next().ok_or_else(|| bad_line(ln))
}

fn bad_line(ln: usize) -> Error {
    Error::Parse { line: ln + 1, msg: "malformed field".into() }
}

/// Parses a TSV log of `(user, item, timestamp)` lines, iteratively removes
/// users and items with fewer than `min_count` interactions until fixpoint,
/// and reindexes ids contiguously (items 1-based, 0 reserved for padding).
pub fn ingest<R: Read>(reader: R, min_count: u32) -> Result<InteractionCorpus> {
    let mut events: Vec<(String, String, i64)> = Vec::new();
    for (ln, line) in BufReader::new(reader).lines().enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let mut f = line.split('\t');
        let user = f
            .next()
            .filter(|s| !s.is_empty())
            .ok_or_else(|| Error::Parse { line: ln + 1, msg: "missing user field".into() })?;
        let item = f
            .next()
            .filter(|s| !s.is_empty())
            .ok_or_else(|| Error::Parse { line: ln + 1, msg: "missing item field".into() })?;
        let ts_str = f
            .next()
            .ok_or_else(|| Error::Parse { line: ln + 1, msg: "missing timestamp field".into() })?;
        let ts: i64 = ts_str.trim().parse().map_err(|_| Error::Parse {
            line: ln + 1,
            msg: format!("bad timestamp {ts_str:?}"),
        })?;
        events.push((user.to_string(), item.to_string(), ts));
    }

    // Iterative filter to fixpoint: dropping an item can push a user below
    // min_count and vice versa.
    let mut alive: Vec<bool> = vec![true; events.len()];
    loop {
        let mut user_counts: HashMap<&str, u32> = HashMap::new();
        let mut item_counts: HashMap<&str, u32> = HashMap::new();
        for (i, (u, it, _)) in events.iter().enumerate() {
            if alive[i] {
                *user_counts.entry(u).or_default() += 1;
                *item_counts.entry(it).or_default() += 1;
            }
        }
        let mut changed = false;
        for (i, (u, it, _)) in events.iter().enumerate() {
            if alive[i] && (user_counts[u.as_str()] < min_count || item_counts[it.as_str()] < min_count)
            {
                alive[i] = false;
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }

    // Reindex by first appearance in the (filtered) input.
    let mut user_ids: HashMap<&str, usize> = HashMap::new();
    let mut item_ids: HashMap<&str, u32> = HashMap::new();
    let mut user_orig = Vec::new();
    let mut item_orig = vec![String::new()];
    for (i, (u, it, _)) in events.iter().enumerate() {
        if !alive[i] {
            continue;
        }
        user_ids.entry(u).or_insert_with(|| {
            user_orig.push(u.clone());
            user_orig.len() - 1
        });
        item_ids.entry(it).or_insert_with(|| {
            item_orig.push(it.clone());
            (item_orig.len() - 1) as u32
        });
    }
    if user_orig.is_empty() {
        return Err(Error::EmptyCorpus);
    }

    let mut per_user: Vec<Vec<(i64, usize, u32)>> = vec![Vec::new(); user_orig.len()];
    let mut item_counts = vec![0u32; item_orig.len()];
    for (i, (u, it, ts)) in events.iter().enumerate() {
        if !alive[i] {
            continue;
        }
        let uid = user_ids[u.as_str()];
        let iid = item_ids[it.as_str()];
        per_user[uid].push((*ts, i, iid));
        item_counts[iid as usize] += 1;
    }
    let sequences = per_user
        .into_iter()
        .map(|mut evs| {
            // stable in timestamp, ties broken by input order
            evs.sort_by_key(|(ts, idx, _)| (*ts, *idx));
            evs.into_iter().map(|(_, _, iid)| iid).collect()
        })
        .collect();

    Ok(InteractionCorpus { sequences, user_orig, item_orig, item_counts })
}

/// Disjoint train/valid/test user sets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UserSplit {
    pub train: Vec<usize>,
    pub valid: Vec<usize>,
    pub test: Vec<usize>,
}

/// Shuffles users under `seed` and partitions them contiguously by ratio.
/// Valid and test take the floor share (at least one user each); the
/// remainder goes to train.
pub fn split_users(
    corpus: &InteractionCorpus,
    ratios: (u32, u32, u32),
    seed: u64,
) -> Result<UserSplit> {
    let n = corpus.user_count();
    if n < 3 {
        return Err(Error::Data(format!("need at least 3 users to split, have {n}")));
    }
    let mut ids: Vec<usize> = (0..n).collect();
    let mut rng = crate::seeded_rng(seed);
    ids.shuffle(&mut rng);

    let total = (ratios.0 + ratios.1 + ratios.2) as usize;
    let valid_n = (n * ratios.1 as usize / total).max(1);
    let test_n = (n * ratios.2 as usize / total).max(1);
    let train_n = n - valid_n - test_n;
    if train_n == 0 {
        return Err(Error::Data("no users left for the train partition".into()));
    }
    Ok(UserSplit {
        train: ids[..train_n].to_vec(),
        valid: ids[train_n..train_n + valid_n].to_vec(),
        test: ids[train_n + valid_n..].to_vec(),
    })
}

/// One training batch: left-padded histories, per-row targets and `L`
/// negatives shared across the batch.
#[derive(Debug, Clone)]
pub struct TrainingBatch {
    /// Row-major `batch_size x n`, left-padded with 0.
    pub histories: Vec<u32>,
    pub n: usize,
    pub valid_lengths: Vec<usize>,
    pub targets: Vec<u32>,
    pub negatives: Vec<u32>,
}

impl TrainingBatch {
    pub fn batch_size(&self) -> usize {
        self.valid_lengths.len()
    }

    pub fn history_row(&self, row: usize) -> &[u32] {
        &self.histories[row * self.n..(row + 1) * self.n]
    }
}

/// Draws a batch: per row a train user is sampled uniformly, then a target
/// position `t` in `1..len`; the history is the up-to-`n` most recent items
/// before `t`.
pub fn draw_training_batch<R: Rng>(
    corpus: &InteractionCorpus,
    train_users: &[usize],
    batch_size: usize,
    n: usize,
    rng: &mut R,
) -> Result<TrainingBatch> {
    let eligible: Vec<usize> =
        train_users.iter().copied().filter(|&u| corpus.sequences[u].len() >= 2).collect();
    if eligible.is_empty() {
        return Err(Error::Data("no train users with sequence length >= 2".into()));
    }
    let mut histories = vec![0u32; batch_size * n];
    let mut valid_lengths = Vec::with_capacity(batch_size);
    let mut targets = Vec::with_capacity(batch_size);
    for row in 0..batch_size {
        let user = eligible[rng.random_range(0..eligible.len())];
        let seq = &corpus.sequences[user];
        let t = rng.random_range(1..seq.len());
        let start = t.saturating_sub(n);
        let window = &seq[start..t];
        let dst = &mut histories[row * n..(row + 1) * n];
        dst[n - window.len()..].copy_from_slice(window);
        valid_lengths.push(window.len());
        targets.push(seq[t]);
    }
    Ok(TrainingBatch { histories, n, valid_lengths, targets, negatives: Vec::new() })
}

/// `L` item ids drawn uniformly with replacement from `1..=|I|`. Shared
/// across the batch; positives are not excluded.
pub fn sample_negatives<R: Rng>(
    corpus: &InteractionCorpus,
    l: usize,
    rng: &mut R,
) -> Result<Vec<u32>> {
    let items = corpus.item_count() as u32;
    if items == 0 {
        return Err(Error::EmptyCorpus);
    }
    Ok((0..l).map(|_| rng.random_range(1..=items)).collect())
}

/// Splits a sequence into the observed prefix (first `ceil(0.8*len)` items)
/// and the holdout remainder. If rounding would empty the holdout, the last
/// observed item moves over. Returns `None` for sequences shorter than 2.
pub fn eval_split(sequence: &[u32]) -> Option<(&[u32], &[u32])> {
    let len = sequence.len();
    if len < 2 {
        return None;
    }
    let mut cut = (len * 4).div_ceil(5); // ceil(0.8 * len)
    if cut == len {
        cut = len - 1;
    }
    Some((&sequence[..cut], &sequence[cut..]))
}

/// Parameters for synthetic multi-topic corpus generation.
#[derive(Debug, Clone)]
pub struct SyntheticSpec {
    pub n_topics: usize,
    pub items_per_topic: usize,
    pub n_users: usize,
    pub topics_per_user: (usize, usize),
    pub seq_length: (usize, usize),
    pub popularity_skew: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_topics == 0 || self.items_per_topic == 0 || self.n_users == 0 {
            return Err(Error::Config("synthetic counts must be positive".into()));
        }
        if self.topics_per_user.0 == 0 || self.topics_per_user.0 > self.topics_per_user.1 {
            return Err(Error::Config("invalid topics_per_user range".into()));
        }
        if self.topics_per_user.1 > self.n_topics {
            return Err(Error::Config("topics_per_user.max exceeds n_topics".into()));
        }
        if self.seq_length.0 == 0 || self.seq_length.0 > self.seq_length.1 {
            return Err(Error::Config("invalid seq_length range".into()));
        }
        if self.popularity_skew < 0.0 {
            return Err(Error::Config("popularity_skew must be >= 0".into()));
        }
        Ok(())
    }
}

/// Generates a corpus where items are partitioned into topics, each user
/// draws from a fixed topic subset, and within-topic popularity follows a
/// power law with exponent `popularity_skew`.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<InteractionCorpus> {
    spec.validate()?;
    let mut rng = crate::seeded_rng(spec.seed);

    // Within-topic CDF over ranks: weight(r) = (r+1)^-skew.
    let ipt = spec.items_per_topic;
    let mut cdf = Vec::with_capacity(ipt);
    let mut acc = 0.0;
    for r in 0..ipt {
        acc += ((r + 1) as f64).powf(-spec.popularity_skew);
        cdf.push(acc);
    }
    let total = acc;

    let n_items = spec.n_topics * ipt;
    let mut item_counts = vec![0u32; n_items + 1];
    let mut sequences = Vec::with_capacity(spec.n_users);
    let mut topic_ids: Vec<usize> = (0..spec.n_topics).collect();
    for _ in 0..spec.n_users {
        let k = rng.random_range(spec.topics_per_user.0..=spec.topics_per_user.1);
        topic_ids.shuffle(&mut rng);
        let user_topics = &topic_ids[..k];
        let len = rng.random_range(spec.seq_length.0..=spec.seq_length.1);
        let mut seq = Vec::with_capacity(len);
        for _ in 0..len {
            let topic = user_topics[rng.random_range(0..k)];
            let u: f64 = rng.random::<f64>() * total;
            let rank = cdf.partition_point(|&c| c < u).min(ipt - 1);
            let item = (topic * ipt + rank + 1) as u32;
            item_counts[item as usize] += 1;
            seq.push(item);
        }
        sequences.push(seq);
    }

    let user_orig = (0..spec.n_users).map(|u| format!("u{u}")).collect();
    let mut item_orig = vec![String::new()];
    item_orig.extend((1..=n_items).map(|i| format!("i{i}")));
    Ok(InteractionCorpus { sequences, user_orig, item_orig, item_counts })
}
