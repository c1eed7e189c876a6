//! Interaction-log ingestion, k-core filtering, leave-one-out splits and
//! fixed-length left-padded batches.

mod cache;
pub mod synthetic;

use std::io::BufRead;

use indexmap::IndexMap;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub use cache::{load_dataset, save_dataset, DATASET_MAGIC, DATASET_VERSION};

/// Item id reserved for padding.
pub const PAD: u32 = 0;

/// Default minimum interaction count for users and items.
pub const MIN_COUNT: usize = 5;

/// Raw implicit-feedback log with dense 1-based user and item ids.
#[derive(Clone, Debug, Default)]
pub struct InteractionLog {
    user_index: IndexMap<String, u32>,
    item_index: IndexMap<String, u32>,
    /// `histories[u - 1]` holds `(item, timestamp)` for user id `u`, ascending by time.
    histories: Vec<Vec<(u32, i64)>>,
}

impl InteractionLog {
    /// Builds a log from `(user, item, timestamp)` triples. Ids are assigned in
    /// first-appearance order; ties in time keep input order.
    pub fn from_events<U, I>(events: impl IntoIterator<Item = (U, I, i64)>) -> Self
    where
        U: AsRef<str>,
        I: AsRef<str>,
    {
        let mut log = Self::default();
        for (user, item, ts) in events {
            log.push(user.as_ref(), item.as_ref(), ts);
        }
        log.sort();
        log
    }

    fn push(&mut self, user: &str, item: &str, ts: i64) {
        let next_user = self.user_index.len() as u32 + 1;
        let u = *self.user_index.entry(user.to_string()).or_insert(next_user);
        let next_item = self.item_index.len() as u32 + 1;
        let i = *self.item_index.entry(item.to_string()).or_insert(next_item);
        if u as usize > self.histories.len() {
            self.histories.push(Vec::new());
        }
        self.histories[u as usize - 1].push((i, ts));
    }

    fn sort(&mut self) {
        for h in &mut self.histories {
            h.sort_by_key(|&(_, ts)| ts);
        }
    }

    pub fn num_users(&self) -> usize {
        self.user_index.len()
    }

    pub fn num_items(&self) -> usize {
        self.item_index.len()
    }

    pub fn num_events(&self) -> usize {
        self.histories.iter().map(Vec::len).sum()
    }

    pub fn user_id(&self, key: &str) -> Option<u32> {
        self.user_index.get(key).copied()
    }

    pub fn item_id(&self, key: &str) -> Option<u32> {
        self.item_index.get(key).copied()
    }

    /// Chronological `(item, timestamp)` history of user id `user`.
    pub fn history(&self, user: u32) -> &[(u32, i64)] {
        &self.histories[user as usize - 1]
    }

    pub fn user_keys(&self) -> impl Iterator<Item = &str> {
        self.user_index.keys().map(String::as_str)
    }

    pub fn item_keys(&self) -> impl Iterator<Item = &str> {
        self.item_index.keys().map(String::as_str)
    }
}

/// Parses `user<TAB>item<TAB>timestamp` lines. Blank lines are skipped.
pub fn parse_interactions(source: impl BufRead) -> Result<InteractionLog> {
    let mut log = InteractionLog::default();
    for (n, line) in source.lines().enumerate() {
        let lineno = n + 1;
        let line = line.map_err(|e| Error::Parse {
            line: lineno,
            message: e.to_string(),
        })?;
        let line = line.strip_suffix('\r').unwrap_or(&line);
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(Error::Parse {
                line: lineno,
                message: format!("expected 3 tab-separated fields, found {}", fields.len()),
            });
        }
        if fields[0].is_empty() || fields[1].is_empty() {
            return Err(Error::Parse {
                line: lineno,
                message: "empty user or item key".into(),
            });
        }
        let ts: i64 = fields[2].trim().parse().map_err(|_| Error::Parse {
            line: lineno,
            message: format!("invalid timestamp {:?}", fields[2]),
        })?;
        log.push(fields[0], fields[1], ts);
    }
    if log.num_events() == 0 {
        return Err(Error::EmptyLog);
    }
    log.sort();
    Ok(log)
}

/// Leave-one-out split of one user's chronological sequence.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UserSplit {
    pub train: Vec<u32>,
    pub valid: u32,
    pub test: u32,
}

impl UserSplit {
    pub fn len(&self) -> usize {
        self.train.len() + 2
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// Filtered, re-indexed, split dataset. Immutable after construction.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceDataset {
    pub(crate) user_keys: Vec<String>,
    pub(crate) item_keys: Vec<String>,
    pub(crate) users: Vec<UserSplit>,
    pub(crate) max_len: usize,
}

/// Which target a window predicts.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Valid,
    Test,
}

/// Summary counts of a dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetStats {
    pub users: usize,
    pub items: usize,
    pub interactions: usize,
    pub avg_seq_len: f64,
    pub sparsity: f64,
}

impl SequenceDataset {
    pub fn new(
        user_keys: Vec<String>,
        item_keys: Vec<String>,
        users: Vec<UserSplit>,
        max_len: usize,
    ) -> Result<Self> {
        if users.is_empty() {
            return Err(Error::EmptyDataset);
        }
        if max_len < 3 {
            return Err(Error::Config(format!("max_len {max_len} < 3")));
        }
        if user_keys.len() != users.len() {
            return Err(Error::Contract("one key per user required".into()));
        }
        if users.iter().any(|u| u.train.len() < 2) {
            return Err(Error::Contract(
                "every user needs at least two training items".into(),
            ));
        }
        let n = item_keys.len() as u32;
        let in_range = |i: u32| (1..=n).contains(&i);
        if !users
            .iter()
            .all(|u| u.train.iter().all(|&i| in_range(i)) && in_range(u.valid) && in_range(u.test))
        {
            return Err(Error::Index("item id outside 1..=num_items".into()));
        }
        Ok(Self {
            user_keys,
            item_keys,
            users,
            max_len,
        })
    }

    pub fn num_users(&self) -> usize {
        self.users.len()
    }

    pub fn num_items(&self) -> usize {
        self.item_keys.len()
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    pub fn users(&self) -> &[UserSplit] {
        &self.users
    }

    pub fn user_keys(&self) -> &[String] {
        &self.user_keys
    }

    pub fn item_keys(&self) -> &[String] {
        &self.item_keys
    }

    /// Copy with a different window length.
    pub fn with_max_len(&self, max_len: usize) -> Result<Self> {
        Self::new(
            self.user_keys.clone(),
            self.item_keys.clone(),
            self.users.clone(),
            max_len,
        )
    }

    /// Restriction to the given user indices (in the given order).
    pub fn subset(&self, users: &[usize]) -> Result<Self> {
        Self::new(
            users.iter().map(|&u| self.user_keys[u].clone()).collect(),
            self.item_keys.clone(),
            users.iter().map(|&u| self.users[u].clone()).collect(),
            self.max_len,
        )
    }

    pub fn stats(&self) -> DatasetStats {
        let interactions: usize = self.users.iter().map(UserSplit::len).sum();
        let (u, i) = (self.num_users(), self.num_items());
        DatasetStats {
            users: u,
            items: i,
            interactions,
            avg_seq_len: interactions as f64 / u as f64,
            sparsity: 1.0 - interactions as f64 / (u as f64 * i as f64),
        }
    }

    /// Input history and target for `user` under `split`.
    pub fn example(&self, user: usize, split: Split) -> (Vec<u32>, u32) {
        let s = &self.users[user];
        match split {
            Split::Train => {
                let n = s.train.len();
                (s.train[..n - 1].to_vec(), s.train[n - 1])
            }
            Split::Valid => (s.train.clone(), s.valid),
            Split::Test => {
                let mut h = s.train.clone();
                h.push(s.valid);
                (h, s.test)
            }
        }
    }

    /// Training interactions per item; index `i` holds the count of item
    /// id `i + 1`.
    pub fn train_item_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_items()];
        for u in &self.users {
            for &i in &u.train {
                counts[i as usize - 1] += 1;
            }
        }
        counts
    }
}

/// Iterative k-core filtering followed by the leave-one-out split.
pub fn build_sequences(
    log: &InteractionLog,
    min_count: usize,
    max_len: usize,
) -> Result<SequenceDataset> {
    if max_len < 3 {
        return Err(Error::Config(format!("max_len {max_len} < 3")));
    }
    // A user needs at least three training items plus validation and test.
    let min_user = min_count.max(5);
    let mut seqs: Vec<Option<Vec<u32>>> = log
        .histories
        .iter()
        .map(|h| Some(h.iter().map(|&(i, _)| i).collect()))
        .collect();
    let mut item_alive = vec![true; log.num_items() + 1];
    loop {
        let mut counts = vec![0usize; log.num_items() + 1];
        for s in seqs.iter().flatten() {
            for &i in s {
                counts[i as usize] += 1;
            }
        }
        let mut changed = false;
        for (i, alive) in item_alive.iter_mut().enumerate().skip(1) {
            if *alive && counts[i] < min_count {
                *alive = false;
                changed = true;
            }
        }
        for slot in &mut seqs {
            if let Some(s) = slot {
                s.retain(|&i| item_alive[i as usize]);
                if s.len() < min_user {
                    *slot = None;
                    changed = true;
                }
            }
        }
        if !changed {
            break;
        }
    }

    let item_keys_all: Vec<&str> = log.item_keys().collect();
    let user_keys_all: Vec<&str> = log.user_keys().collect();
    let mut remap = vec![PAD; log.num_items() + 1];
    let mut item_keys = Vec::new();
    for (i, &alive) in item_alive.iter().enumerate().skip(1) {
        if alive {
            item_keys.push(item_keys_all[i - 1].to_string());
            remap[i] = item_keys.len() as u32;
        }
    }
    let mut user_keys = Vec::new();
    let mut users = Vec::new();
    for (u, slot) in seqs.iter().enumerate() {
        let Some(s) = slot else { continue };
        let ids: Vec<u32> = s.iter().map(|&i| remap[i as usize]).collect();
        let n = ids.len();
        user_keys.push(user_keys_all[u].to_string());
        users.push(UserSplit {
            train: ids[..n - 2].to_vec(),
            valid: ids[n - 2],
            test: ids[n - 1],
        });
    }
    if users.is_empty() {
        return Err(Error::EmptyDataset);
    }
    SequenceDataset::new(user_keys, item_keys, users, max_len)
}

/// Keeps the most recent `max_len` items, left-padding shorter sequences with [`PAD`].
pub fn pad_or_truncate(seq: &[u32], max_len: usize) -> Result<Vec<u32>> {
    if seq.is_empty() {
        return Err(Error::Contract("cannot pad an empty sequence".into()));
    }
    if seq.len() >= max_len {
        return Ok(seq[seq.len() - max_len..].to_vec());
    }
    let mut out = vec![PAD; max_len - seq.len()];
    out.extend_from_slice(seq);
    Ok(out)
}

/// Fixed-length, left-padded window batch.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    /// Dataset user index of each row.
    pub users: Vec<usize>,
    /// `[B × T]`, row-major.
    pub padded_ids: Vec<u32>,
    /// Next-item target per row.
    pub targets: Vec<u32>,
    /// `[B × T]`, true exactly where `padded_ids != PAD`.
    pub valid_mask: Vec<bool>,
    /// `[B × T]` next-item target at every position (`PAD` where none).
    pub position_targets: Vec<u32>,
    pub max_len: usize,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn window(&self, row: usize) -> &[u32] {
        &self.padded_ids[row * self.max_len..(row + 1) * self.max_len]
    }

    /// Builds a batch directly from histories and targets.
    pub fn from_histories(histories: &[Vec<u32>], targets: &[u32], max_len: usize) -> Result<Self> {
        if histories.len() != targets.len() {
            return Err(Error::Contract("one target per history required".into()));
        }
        let mut padded_ids = Vec::with_capacity(histories.len() * max_len);
        let mut position_targets = Vec::with_capacity(histories.len() * max_len);
        for (h, &target) in histories.iter().zip(targets) {
            let window = pad_or_truncate(h, max_len)?;
            let mut shifted = h[1..].to_vec();
            shifted.push(target);
            let next = pad_or_truncate(&shifted, max_len)?;
            // Padding in `window` and `next` lines up because both have length len(h).
            padded_ids.extend_from_slice(&window);
            position_targets.extend_from_slice(&next);
        }
        Ok(Self {
            users: (0..histories.len()).collect(),
            valid_mask: padded_ids.iter().map(|&i| i != PAD).collect(),
            padded_ids,
            targets: targets.to_vec(),
            position_targets,
            max_len,
        })
    }
}

fn batch_for(dataset: &SequenceDataset, users: &[usize], split: Split) -> Result<Batch> {
    let (histories, targets): (Vec<_>, Vec<_>) =
        users.iter().map(|&u| dataset.example(u, split)).unzip();
    let mut batch = Batch::from_histories(&histories, &targets, dataset.max_len)?;
    batch.users = users.to_vec();
    Ok(batch)
}

/// One epoch of training batches. Every user appears exactly once; the final
/// partial batch is kept as-is.
pub fn make_batches(
    dataset: &SequenceDataset,
    batch_size: usize,
    shuffle: bool,
    seed: u64,
    contrastive: bool,
) -> Result<Vec<Batch>> {
    if batch_size == 0 || (contrastive && batch_size < 2) {
        return Err(Error::Config(format!(
            "batch size {batch_size} too small{}",
            if contrastive {
                " for in-batch negatives"
            } else {
                ""
            }
        )));
    }
    let mut order: Vec<usize> = (0..dataset.num_users()).collect();
    if shuffle {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    order
        .chunks(batch_size)
        .map(|c| batch_for(dataset, c, Split::Train))
        .collect()
}

/// Evaluation batches in user order.
pub fn eval_batches(
    dataset: &SequenceDataset,
    split: Split,
    batch_size: usize,
) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(Error::Config("batch size 0".into()));
    }
    let order: Vec<usize> = (0..dataset.num_users()).collect();
    order
        .chunks(batch_size)
        .map(|c| batch_for(dataset, c, split))
        .collect()
}
