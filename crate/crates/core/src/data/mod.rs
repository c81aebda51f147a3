//! Interaction loading, leave-one-out splits, feature tables, batching, and
//! the synthetic dataset generator used for desk-scale verification.

mod batch;
mod features;
mod synthetic;

pub use batch::{make_batches, make_eval_batch, Batch, DataBundle};
pub use features::{DenseFeatures, FeatureTable, Modality};
pub use synthetic::{generate_synthetic, SynthConfig, SynthTruth};

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("parse error at line {line}: {details}")]
    Parse { line: usize, details: String },
    #[error("no user survives the 5-interaction filter")]
    EmptyDataset,
    #[error("bad magic bytes in feature file")]
    BadMagic,
    #[error("unsupported feature file version {found:?}")]
    VersionMismatch { found: String },
    #[error("feature table has no vector for item {0}")]
    MissingItem(u64),
    #[error("file truncated or corrupt: {0}")]
    Corrupt(String),
    #[error("invalid generator config: {0}")]
    Config(String),
}

/// One row of an interactions file.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Interaction {
    pub user_id: u64,
    pub item_id: u64,
    pub timestamp: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetStats {
    pub n_users: usize,
    pub n_items: usize,
    pub n_interactions: usize,
    pub sparsity: f64,
    pub avg_len: f64,
}

/// Canonicalized interactions: users reindexed to `0..n_users`, items to
/// `1..=n_items` (0 is the padding id), per-user sequences in ascending
/// timestamp order with ties kept in file order.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub sequences: Vec<Vec<u32>>,
    pub stats: DatasetStats,
    /// Raw item id -> reindexed id, for joining feature files.
    pub item_index: HashMap<u64, u32>,
    /// Raw user id per reindexed user, ascending.
    pub user_ids: Vec<u64>,
}

impl Dataset {
    pub fn n_items(&self) -> usize {
        self.stats.n_items
    }

    pub fn n_users(&self) -> usize {
        self.stats.n_users
    }
}

/// A single ranked prediction instance: strict-prefix context and the next item.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    pub user: u32,
    pub context: Vec<u32>,
    pub target: u32,
}

#[derive(Debug, Clone)]
pub struct Split {
    pub examples: Vec<Example>,
}

/// Parse a `user<TAB>item<TAB>timestamp` file, drop users with fewer than 5
/// interactions, reindex, and sort each sequence by timestamp (stable).
pub fn load_interactions(path: impl AsRef<Path>) -> Result<Dataset, DataError> {
    let text = fs::read_to_string(path)?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let mut parts = line.split('\t');
        let mut field = |name: &str| {
            parts
                .next()
                .ok_or_else(|| DataError::Parse { line: i + 1, details: format!("missing {name}") })
        };
        let user_id = parse_u64(field("user id")?, i + 1)?;
        let item_id = parse_u64(field("item id")?, i + 1)?;
        let timestamp = parse_u64(field("timestamp")?, i + 1)?;
        if parts.next().is_some() {
            return Err(DataError::Parse { line: i + 1, details: "too many fields".into() });
        }
        if item_id == 0 {
            return Err(DataError::Parse { line: i + 1, details: "item id 0 is reserved".into() });
        }
        rows.push(Interaction { user_id, item_id, timestamp });
    }
    build_dataset(rows)
}

fn parse_u64(s: &str, line: usize) -> Result<u64, DataError> {
    s.parse()
        .map_err(|_| DataError::Parse { line, details: format!("not an integer: {s:?}") })
}

fn build_dataset(rows: Vec<Interaction>) -> Result<Dataset, DataError> {
    let mut by_user: HashMap<u64, Vec<Interaction>> = HashMap::new();
    for r in rows {
        by_user.entry(r.user_id).or_default().push(r);
    }
    let mut user_ids: Vec<u64> = by_user
        .iter()
        .filter(|(_, v)| v.len() >= 5)
        .map(|(&u, _)| u)
        .collect();
    user_ids.sort_unstable();
    if user_ids.is_empty() {
        return Err(DataError::EmptyDataset);
    }

    // itemize over surviving users only
    let mut raw_items: Vec<u64> = user_ids
        .iter()
        .flat_map(|u| by_user[u].iter().map(|r| r.item_id))
        .collect();
    raw_items.sort_unstable();
    raw_items.dedup();
    let item_index: HashMap<u64, u32> = raw_items
        .iter()
        .enumerate()
        .map(|(i, &raw)| (raw, (i + 1) as u32))
        .collect();

    let mut sequences = Vec::with_capacity(user_ids.len());
    let mut n_interactions = 0;
    for u in &user_ids {
        let mut rows = by_user.remove(u).unwrap();
        rows.sort_by_key(|r| r.timestamp); // stable: file order breaks ties
        n_interactions += rows.len();
        sequences.push(rows.iter().map(|r| item_index[&r.item_id]).collect());
    }

    let n_users = user_ids.len();
    let n_items = raw_items.len();
    let stats = DatasetStats {
        n_users,
        n_items,
        n_interactions,
        sparsity: 1.0 - n_interactions as f64 / (n_users as f64 * n_items as f64),
        avg_len: n_interactions as f64 / n_users as f64,
    };
    Ok(Dataset { sequences, stats, item_index, user_ids })
}

/// Leave-one-out: per user the last item is the test target, the
/// second-to-last the validation target, and the remaining prefix trains the
/// model through its own next-item instances.
pub fn leave_one_out_split(ds: &Dataset) -> (Split, Split, Split) {
    let mut train = Vec::new();
    let mut valid = Vec::new();
    let mut test = Vec::new();
    for (u, seq) in ds.sequences.iter().enumerate() {
        let user = u as u32;
        let len = seq.len();
        debug_assert!(len >= 5, "loader guarantees the 5-interaction floor");
        let prefix = &seq[..len - 2];
        for j in 1..prefix.len() {
            train.push(Example { user, context: prefix[..j].to_vec(), target: prefix[j] });
        }
        valid.push(Example { user, context: prefix.to_vec(), target: seq[len - 2] });
        test.push(Example { user, context: seq[..len - 1].to_vec(), target: seq[len - 1] });
    }
    (Split { examples: train }, Split { examples: valid }, Split { examples: test })
}
