//! Interaction data: loading, binarization, per-user splits and negative
//! sampling, plus a seeded synthetic generator for desk-scale experiments.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::index;
use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::{rng_for, Stream};

/// Ratings at or above this value count as positive.
pub const DEFAULT_POSITIVE_THRESHOLD: u8 = 4;
/// Users with fewer positives are dropped.
pub const DEFAULT_MIN_POSITIVES: usize = 25;
pub const DEFAULT_TRAIN_FRACTION: f64 = 0.8;
/// Negative sampling ratios of the standard protocol.
pub const PROTOCOL_NSRS: [f64; 3] = [1.0, 2.0, 5.0];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RatingFormat {
    /// `user<TAB>item`, every row is a positive interaction.
    Unary,
    /// `user<TAB>item<TAB>rating` with ratings 1..=5.
    Graded,
}

impl FromStr for RatingFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "unary" => Ok(RatingFormat::Unary),
            "graded" => Ok(RatingFormat::Graded),
            other => Err(Error::arg(format!("unknown rating format `{other}`"))),
        }
    }
}

impl fmt::Display for RatingFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RatingFormat::Unary => "unary",
            RatingFormat::Graded => "graded",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawRecord {
    pub user: String,
    pub item: String,
    pub rating: u8,
}

/// Raw observations as read from disk, before binarization.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawRatings {
    format: RatingFormat,
    records: Vec<RawRecord>,
}

impl RawRatings {
    pub fn new(format: RatingFormat, records: Vec<RawRecord>) -> Result<Self> {
        let mut seen = HashSet::with_capacity(records.len());
        for r in &records {
            check_rating(format, r.rating).map_err(Error::Data)?;
            if !seen.insert((r.user.as_str(), r.item.as_str())) {
                return Err(Error::data(format!(
                    "duplicate interaction ({}, {})",
                    r.user, r.item
                )));
            }
        }
        Ok(RawRatings { format, records })
    }

    pub fn format(&self) -> RatingFormat {
        self.format
    }

    pub fn records(&self) -> &[RawRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

fn check_rating(format: RatingFormat, rating: u8) -> std::result::Result<(), String> {
    match format {
        RatingFormat::Unary if rating != 1 => {
            Err(format!("unary data must have rating 1, got {rating}"))
        }
        RatingFormat::Graded if !(1..=5).contains(&rating) => {
            Err(format!("graded rating {rating} outside 1..=5"))
        }
        _ => Ok(()),
    }
}

pub fn load_interactions(path: impl AsRef<Path>, format: RatingFormat) -> Result<RawRatings> {
    let path = path.as_ref();
    let file = File::open(path)?;
    parse_interactions(BufReader::new(file), path, format)
}

/// Parses tab-separated `user, item[, rating]` rows. Blank lines are skipped.
pub fn parse_interactions<R: BufRead>(
    reader: R,
    origin: impl AsRef<Path>,
    format: RatingFormat,
) -> Result<RawRatings> {
    let origin = origin.as_ref();
    let parse_err = |line: usize, message: String| Error::Parse {
        path: origin.to_path_buf(),
        line,
        message,
    };

    let mut records = Vec::new();
    let mut seen: HashSet<(String, String)> = HashSet::new();
    for (idx, line) in reader.lines().enumerate() {
        let lineno = idx + 1;
        let line = line?;
        let line = line.trim_end_matches(['\r', '\n']);
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let (user, item, rating) = match (format, fields.as_slice()) {
            (RatingFormat::Unary, [u, i]) => (*u, *i, 1),
            (_, [u, i, r]) => {
                let rating = r
                    .trim()
                    .parse::<u8>()
                    .map_err(|_| parse_err(lineno, format!("bad rating `{r}`")))?;
                (*u, *i, rating)
            }
            _ => {
                return Err(parse_err(
                    lineno,
                    format!(
                        "expected {} tab-separated fields",
                        match format {
                            RatingFormat::Unary => "2 or 3",
                            RatingFormat::Graded => "3",
                        }
                    ),
                ))
            }
        };
        if user.is_empty() || item.is_empty() {
            return Err(parse_err(lineno, "empty user or item key".into()));
        }
        check_rating(format, rating).map_err(|m| parse_err(lineno, m))?;
        if !seen.insert((user.to_owned(), item.to_owned())) {
            return Err(Error::data(format!(
                "{}:{lineno}: duplicate interaction ({user}, {item})",
                origin.display()
            )));
        }
        records.push(RawRecord {
            user: user.to_owned(),
            item: item.to_owned(),
            rating,
        });
    }
    Ok(RawRatings { format, records })
}

/// Binary user-item relevance with dense index spaces.
///
/// Users and items are indexed in ascending key order. Each user's item lists
/// are sorted and disjoint.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InteractionSet {
    user_keys: Vec<String>,
    item_keys: Vec<String>,
    positives: Vec<Vec<usize>>,
    explicit_negatives: Vec<Vec<usize>>,
}

impl InteractionSet {
    /// Builds a set from already-indexed lists, checking the index invariants.
    pub fn from_parts(
        user_keys: Vec<String>,
        item_keys: Vec<String>,
        mut positives: Vec<Vec<usize>>,
        mut explicit_negatives: Vec<Vec<usize>>,
    ) -> Result<Self> {
        let n_items = item_keys.len();
        if positives.len() != user_keys.len() || explicit_negatives.len() != user_keys.len() {
            return Err(Error::data("per-user lists do not match the user count"));
        }
        for (u, (pos, neg)) in positives
            .iter_mut()
            .zip(explicit_negatives.iter_mut())
            .enumerate()
        {
            pos.sort_unstable();
            neg.sort_unstable();
            if pos.windows(2).any(|w| w[0] == w[1]) || neg.windows(2).any(|w| w[0] == w[1]) {
                return Err(Error::data(format!("user {u} has duplicate items")));
            }
            if pos.iter().chain(neg.iter()).any(|&i| i >= n_items) {
                return Err(Error::data(format!("user {u} references an unknown item")));
            }
            if sorted_intersects(pos, neg) {
                return Err(Error::data(format!(
                    "user {u} has items that are both positive and negative"
                )));
            }
        }
        Ok(InteractionSet {
            user_keys,
            item_keys,
            positives,
            explicit_negatives,
        })
    }

    pub fn n_users(&self) -> usize {
        self.user_keys.len()
    }

    pub fn n_items(&self) -> usize {
        self.item_keys.len()
    }

    pub fn positives(&self, user: usize) -> &[usize] {
        &self.positives[user]
    }

    pub fn explicit_negatives(&self, user: usize) -> &[usize] {
        &self.explicit_negatives[user]
    }

    pub fn n_positives(&self, user: usize) -> usize {
        self.positives[user].len()
    }

    /// Observed interactions retained, positive or negative.
    pub fn n_ratings(&self) -> usize {
        self.positives.iter().map(Vec::len).sum::<usize>()
            + self.explicit_negatives.iter().map(Vec::len).sum::<usize>()
    }

    pub fn density(&self) -> f64 {
        self.n_ratings() as f64 / (self.n_users() as f64 * self.n_items() as f64)
    }

    pub fn user_keys(&self) -> &[String] {
        &self.user_keys
    }

    pub fn item_keys(&self) -> &[String] {
        &self.item_keys
    }

    /// Writes the index maps as `index<TAB>key` rows.
    pub fn write_index_maps<W: Write>(&self, users: W, items: W) -> Result<()> {
        fn dump<W: Write>(mut w: W, keys: &[String]) -> Result<()> {
            writeln!(w, "index\tkey")?;
            for (i, k) in keys.iter().enumerate() {
                writeln!(w, "{i}\t{k}")?;
            }
            w.flush()?;
            Ok(())
        }
        dump(users, &self.user_keys)?;
        dump(items, &self.item_keys)
    }
}

fn sorted_intersects(a: &[usize], b: &[usize]) -> bool {
    let (mut i, mut j) = (0, 0);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => return true,
        }
    }
    false
}

/// Splits raw ratings into positives (`rating >= positive_threshold`, or every
/// row of unary data) and explicit negatives, drops users with fewer than
/// `min_positives` positives, and re-indexes over the surviving users and every
/// item they interacted with.
pub fn binarize_and_filter(
    raw: &RawRatings,
    positive_threshold: u8,
    min_positives: usize,
) -> Result<InteractionSet> {
    if raw.is_empty() {
        return Err(Error::data("no interactions to binarize"));
    }
    let unary = raw.format == RatingFormat::Unary;

    let mut per_user: BTreeMap<&str, (Vec<&str>, Vec<&str>)> = BTreeMap::new();
    for r in &raw.records {
        let entry = per_user.entry(r.user.as_str()).or_default();
        if unary || r.rating >= positive_threshold {
            entry.0.push(r.item.as_str());
        } else {
            entry.1.push(r.item.as_str());
        }
    }
    per_user.retain(|_, (pos, _)| pos.len() >= min_positives);
    if per_user.is_empty() {
        return Err(Error::data(format!(
            "no user has at least {min_positives} positive interactions"
        )));
    }

    let items: BTreeSet<&str> = per_user
        .values()
        .flat_map(|(p, n)| p.iter().chain(n.iter()).copied())
        .collect();
    let item_keys: Vec<String> = items.iter().map(|s| s.to_string()).collect();
    let item_index = |k: &str| item_keys.binary_search_by(|x| x.as_str().cmp(k)).unwrap();

    let mut user_keys = Vec::with_capacity(per_user.len());
    let mut positives = Vec::with_capacity(per_user.len());
    let mut negatives = Vec::with_capacity(per_user.len());
    for (user, (pos, neg)) in per_user {
        user_keys.push(user.to_owned());
        positives.push(pos.into_iter().map(item_index).collect());
        negatives.push(neg.into_iter().map(item_index).collect());
    }
    InteractionSet::from_parts(user_keys, item_keys, positives, negatives)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserPositives {
    pub train_pos: Vec<usize>,
    pub test_pos: Vec<usize>,
}

/// Positive side of a split, before negatives are sampled.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PositiveSplit {
    pub split_id: u32,
    pub users: Vec<UserPositives>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct UserSplit {
    pub train_pos: Vec<usize>,
    pub test_pos: Vec<usize>,
    pub train_neg: Vec<usize>,
    pub test_neg: Vec<usize>,
}

impl UserSplit {
    /// Training candidates: positives first, then negatives.
    pub fn train_candidates(&self) -> (Vec<usize>, Vec<bool>) {
        candidates(&self.train_pos, &self.train_neg)
    }

    pub fn test_candidates(&self) -> (Vec<usize>, Vec<bool>) {
        candidates(&self.test_pos, &self.test_neg)
    }
}

fn candidates(pos: &[usize], neg: &[usize]) -> (Vec<usize>, Vec<bool>) {
    let items = pos.iter().chain(neg.iter()).copied().collect();
    let labels = std::iter::repeat_n(true, pos.len())
        .chain(std::iter::repeat_n(false, neg.len()))
        .collect();
    (items, labels)
}

/// One Monte Carlo split at one negative sampling ratio.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitAssignment {
    pub split_id: u32,
    pub nsr: f64,
    pub users: Vec<UserSplit>,
    /// Users whose negative pool was too small for the requested count.
    pub short_pool_users: Vec<usize>,
}

impl SplitAssignment {
    pub fn n_users(&self) -> usize {
        self.users.len()
    }

    /// Writes `split_id, user, item, role` rows, tab separated, with a header.
    pub fn write_tsv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "split_id\tuser\titem\trole")?;
        for (u, s) in self.users.iter().enumerate() {
            for (role, items) in [
                ("train_pos", &s.train_pos),
                ("test_pos", &s.test_pos),
                ("train_neg", &s.train_neg),
                ("test_neg", &s.test_neg),
            ] {
                for &i in items {
                    writeln!(w, "{}\t{u}\t{i}\t{role}", self.split_id)?;
                }
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Reads the format produced by [`SplitAssignment::write_tsv`]. The ratio is
    /// not part of the file and must be supplied; pool-shortage flags are not
    /// persisted.
    pub fn read_tsv<R: Read>(r: R, n_users: usize, nsr: f64) -> Result<Self> {
        let mut users = vec![UserSplit::default(); n_users];
        let mut split_id = None;
        for (idx, line) in BufReader::new(r).lines().enumerate() {
            let line = line?;
            if idx == 0 || line.trim().is_empty() {
                continue;
            }
            let err = |m: &str| Error::Parse {
                path: "<split>".into(),
                line: idx + 1,
                message: m.to_owned(),
            };
            let f: Vec<&str> = line.split('\t').collect();
            let [sid, user, item, role] = f.as_slice() else {
                return Err(err("expected 4 fields"));
            };
            let sid: u32 = sid.parse().map_err(|_| err("bad split_id"))?;
            if *split_id.get_or_insert(sid) != sid {
                return Err(err("mixed split ids"));
            }
            let user: usize = user.parse().map_err(|_| err("bad user"))?;
            let item: usize = item.parse().map_err(|_| err("bad item"))?;
            let s = users
                .get_mut(user)
                .ok_or_else(|| err("user out of range"))?;
            match *role {
                "train_pos" => s.train_pos.push(item),
                "test_pos" => s.test_pos.push(item),
                "train_neg" => s.train_neg.push(item),
                "test_neg" => s.test_neg.push(item),
                _ => return Err(err("unknown role")),
            }
        }
        Ok(SplitAssignment {
            split_id: split_id.unwrap_or(0),
            nsr,
            users,
            short_pool_users: Vec::new(),
        })
    }
}

/// `round(x)` with halves rounded up; tolerant of products like 0.7 * 5.
fn round_half_up(x: f64) -> usize {
    (x + 0.5 + 1e-9).floor().max(0.0) as usize
}

/// Per-user random partition of positives; `train_frac` of them (rounded half
/// up) go to training. Deterministic in `(seed, split_id)`.
pub fn split_train_test(
    set: &InteractionSet,
    split_id: u32,
    seed: u64,
    train_frac: f64,
) -> Result<PositiveSplit> {
    if !(0.0..=1.0).contains(&train_frac) || train_frac.is_nan() {
        return Err(Error::arg(format!(
            "train fraction {train_frac} outside [0, 1]"
        )));
    }
    let users = (0..set.n_users())
        .map(|u| {
            let mut pos = set.positives(u).to_vec();
            let n_train = round_half_up(train_frac * pos.len() as f64).min(pos.len());
            if n_train == 0 || n_train == pos.len() {
                return Err(Error::arg(format!(
                    "user {u} with {} positives cannot be split into non-empty train and test",
                    pos.len()
                )));
            }
            let mut rng = rng_for(seed, Stream::Split, &[split_id as u64, u as u64]);
            pos.shuffle(&mut rng);
            let mut test_pos = pos.split_off(n_train);
            pos.sort_unstable();
            test_pos.sort_unstable();
            Ok(UserPositives {
                train_pos: pos,
                test_pos,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PositiveSplit { split_id, users })
}

/// Completes a positive split with uniformly sampled negatives.
///
/// Each user's pool is every item that is not one of their positives, so
/// explicit negatives and unobserved items are treated alike. Training
/// negatives are drawn first; test negatives come from what remains.
pub fn sample_negatives(
    split: &PositiveSplit,
    set: &InteractionSet,
    nsr: f64,
    seed: u64,
) -> Result<SplitAssignment> {
    if !(nsr > 0.0 && nsr.is_finite()) {
        return Err(Error::arg(format!(
            "negative sampling ratio {nsr} must be positive"
        )));
    }
    if split.users.len() != set.n_users() {
        return Err(Error::contract(
            "split and interaction set disagree on user count",
        ));
    }
    let mut short_pool_users = Vec::new();
    let users = split
        .users
        .iter()
        .enumerate()
        .map(|(u, up)| {
            let positives = set.positives(u);
            let mut pool: Vec<usize> = complement(positives, set.n_items());
            let want_train = round_half_up(nsr * up.train_pos.len() as f64);
            let want_test = round_half_up(nsr * up.test_pos.len() as f64);
            let mut rng = rng_for(
                seed,
                Stream::Negatives,
                &[split.split_id as u64, nsr.to_bits(), u as u64],
            );

            let train_neg = draw(&mut pool, want_train, &mut rng);
            let test_neg = draw(&mut pool, want_test, &mut rng);
            if train_neg.len() < want_train || test_neg.len() < want_test {
                short_pool_users.push(u);
            }
            UserSplit {
                train_pos: up.train_pos.clone(),
                test_pos: up.test_pos.clone(),
                train_neg,
                test_neg,
            }
        })
        .collect();
    Ok(SplitAssignment {
        split_id: split.split_id,
        nsr,
        users,
        short_pool_users,
    })
}

fn complement(sorted: &[usize], n: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(n.saturating_sub(sorted.len()));
    let mut it = sorted.iter().peekable();
    for i in 0..n {
        if it.peek() == Some(&&i) {
            it.next();
        } else {
            out.push(i);
        }
    }
    out
}

/// Removes up to `k` uniformly chosen items from `pool`, returned sorted.
fn draw<R: rand::Rng>(pool: &mut Vec<usize>, k: usize, rng: &mut R) -> Vec<usize> {
    let k = k.min(pool.len());
    let mut picked: Vec<usize> = index::sample(rng, pool.len(), k).into_vec();
    picked.sort_unstable();
    let mut out = Vec::with_capacity(k);
    for &idx in picked.iter().rev() {
        out.push(pool.swap_remove(idx));
    }
    // swap_remove scrambles the tail; restore order for the next draw.
    pool.sort_unstable();
    out.sort_unstable();
    out
}

/// Parameters of the synthetic generator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub n_users: usize,
    pub n_items: usize,
    pub latent_dim: usize,
    pub positives_per_user: usize,
    pub seed: u64,
}

/// Draws standard-normal user and item factors and marks each user's
/// `positives_per_user` highest-scoring items as positive.
pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<InteractionSet> {
    if cfg.n_users == 0 || cfg.n_items == 0 {
        return Err(Error::arg(
            "synthetic data needs at least one user and one item",
        ));
    }
    if cfg.latent_dim == 0 {
        return Err(Error::arg("latent dimension must be at least 1"));
    }
    if cfg.positives_per_user < DEFAULT_MIN_POSITIVES {
        return Err(Error::arg(format!(
            "positives per user must be at least {DEFAULT_MIN_POSITIVES}"
        )));
    }
    if cfg.n_items < cfg.positives_per_user {
        return Err(Error::arg(format!(
            "{} items cannot hold {} positives per user",
            cfg.n_items, cfg.positives_per_user
        )));
    }

    let d = cfg.latent_dim;
    let mut rng = rng_for(cfg.seed, Stream::Synthetic, &[]);
    let mut draw_matrix = |rows: usize| -> Vec<f64> {
        (0..rows * d)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect()
    };
    let users = draw_matrix(cfg.n_users);
    let items = draw_matrix(cfg.n_items);

    let positives = (0..cfg.n_users)
        .map(|u| {
            let uf = &users[u * d..(u + 1) * d];
            let mut scored: Vec<(f64, usize)> = (0..cfg.n_items)
                .map(|i| {
                    let vf = &items[i * d..(i + 1) * d];
                    (uf.iter().zip(vf).map(|(a, b)| a * b).sum(), i)
                })
                .collect();
            scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
            scored
                .into_iter()
                .take(cfg.positives_per_user)
                .map(|(_, i)| i)
                .collect()
        })
        .collect();

    let uw = digits(cfg.n_users);
    let iw = digits(cfg.n_items);
    InteractionSet::from_parts(
        (0..cfg.n_users).map(|u| format!("u{u:0uw$}")).collect(),
        (0..cfg.n_items).map(|i| format!("i{i:0iw$}")).collect(),
        positives,
        vec![Vec::new(); cfg.n_users],
    )
}

fn digits(n: usize) -> usize {
    n.saturating_sub(1).max(1).to_string().len()
}

/// Writes a set's positives as a unary interaction file.
pub fn write_unary<W: Write>(set: &InteractionSet, mut w: W) -> Result<()> {
    for u in 0..set.n_users() {
        for &i in set.positives(u) {
            writeln!(w, "{}\t{}", set.user_keys[u], set.item_keys[i])?;
        }
    }
    w.flush()?;
    Ok(())
}
