//! Dataset loading, ID remapping, and the seeded 80/10/10 split.
//!
//! Raw user/item IDs are remapped to dense indices in first-seen order, so a
//! dataset file always produces the same index space. Splitting shuffles with
//! a seeded ChaCha stream and slices train/validation/test; the exact split
//! can be written to and rebuilt from a manifest file.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RatingTriple {
    pub user: usize,
    pub item: usize,
    pub rating: f64,
}

/// Summary statistics of a loaded dataset. `global_mean` covers every loaded
/// rating until a split is made; after splitting it should be replaced by the
/// train-only mean (see [`DatasetSplit::train_mean`]).
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetMeta {
    pub users: usize,
    pub items: usize,
    pub interactions: usize,
    pub range_min: f64,
    pub range_max: f64,
    pub global_mean: f64,
}

/// A dataset in dense index space plus the raw IDs backing each index
/// (`user_ids[i]` is the raw ID remapped to user index `i`).
#[derive(Clone, Debug)]
pub struct LoadedDataset {
    pub triples: Vec<RatingTriple>,
    pub meta: DatasetMeta,
    pub user_ids: Vec<String>,
    pub item_ids: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSplit {
    pub train: Vec<RatingTriple>,
    pub validation: Vec<RatingTriple>,
    pub test: Vec<RatingTriple>,
    pub seed: u64,
}

impl DatasetSplit {
    pub fn train_mean(&self) -> f64 {
        let sum: f64 = self.train.iter().map(|t| t.rating).sum();
        sum / self.train.len() as f64
    }
}

/// Category labels per item index (empty slice when an item has none).
#[derive(Clone, Debug, Default)]
pub struct ItemMetadata {
    labels: Vec<Vec<String>>,
}

impl ItemMetadata {
    /// Metadata from per-item category lists, indexed by dense item id.
    pub fn from_labels(labels: Vec<Vec<String>>) -> Self {
        ItemMetadata { labels }
    }

    pub fn categories(&self, item: usize) -> &[String] {
        self.labels.get(item).map_or(&[], Vec::as_slice)
    }

    pub fn is_empty(&self) -> bool {
        self.labels.iter().all(Vec::is_empty)
    }
}

struct Remapper {
    index: HashMap<String, usize>,
    ids: Vec<String>,
}

impl Remapper {
    fn new() -> Self {
        Remapper {
            index: HashMap::new(),
            ids: Vec::new(),
        }
    }

    fn map(&mut self, raw: &str) -> usize {
        if let Some(&i) = self.index.get(raw) {
            return i;
        }
        let i = self.ids.len();
        self.index.insert(raw.to_string(), i);
        self.ids.push(raw.to_string());
        i
    }
}

/// Loads a MovieLens-100k `u.data` file: tab-separated
/// `user_id  item_id  rating  timestamp` lines, ratings in [1, 5].
pub fn load_movielens_100k(path: &Path) -> Result<LoadedDataset> {
    load_delimited(path, "\t", 1.0, 5.0, false)
}

/// Loads a delimited ratings file with columns `user, item, rating`
/// (extra columns are ignored). `delimiter` is a single character or the
/// literal `"::"`. Ratings are validated against the declared range.
pub fn load_generic_delimited(
    path: &Path,
    delimiter: &str,
    range_min: f64,
    range_max: f64,
    has_header: bool,
) -> Result<LoadedDataset> {
    if delimiter != "::" && delimiter.chars().count() != 1 {
        return Err(Error::Config(format!(
            "delimiter must be one character or \"::\", got {delimiter:?}"
        )));
    }
    if range_min >= range_max {
        return Err(Error::Config(format!(
            "rating range [{range_min}, {range_max}] is empty"
        )));
    }
    load_delimited(path, delimiter, range_min, range_max, has_header)
}

fn load_delimited(
    path: &Path,
    delimiter: &str,
    range_min: f64,
    range_max: f64,
    has_header: bool,
) -> Result<LoadedDataset> {
    let shown = path.display().to_string();
    let file = fs::File::open(path).map_err(|source| Error::Read {
        path: shown.clone(),
        source,
    })?;
    let reader = BufReader::new(file);

    let mut users = Remapper::new();
    let mut items = Remapper::new();
    let mut triples = Vec::new();
    let mut rating_sum = 0.0;

    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        if line.is_empty() || (has_header && idx == 0) {
            continue;
        }
        let mut fields = line.split(delimiter);
        let (user_raw, item_raw, rating_raw) = match (fields.next(), fields.next(), fields.next())
        {
            (Some(u), Some(i), Some(r)) => (u.trim(), i.trim(), r.trim()),
            _ => {
                return Err(Error::Parse {
                    path: shown,
                    line: line_no,
                    message: format!("expected at least 3 {delimiter:?}-separated fields"),
                })
            }
        };
        let rating: f64 = rating_raw.parse().map_err(|_| Error::Parse {
            path: shown.clone(),
            line: line_no,
            message: format!("rating {rating_raw:?} is not a number"),
        })?;
        if !(range_min..=range_max).contains(&rating) {
            return Err(Error::RatingOutOfRange {
                path: shown,
                line: line_no,
                rating,
                min: range_min,
                max: range_max,
            });
        }
        triples.push(RatingTriple {
            user: users.map(user_raw),
            item: items.map(item_raw),
            rating,
        });
        rating_sum += rating;
    }

    if triples.is_empty() {
        return Err(Error::EmptyDataset(shown));
    }

    let meta = DatasetMeta {
        users: users.ids.len(),
        items: items.ids.len(),
        interactions: triples.len(),
        range_min,
        range_max,
        global_mean: rating_sum / triples.len() as f64,
    };
    Ok(LoadedDataset {
        triples,
        meta,
        user_ids: users.ids,
        item_ids: items.ids,
    })
}

/// Shuffles the triples with a ChaCha stream seeded by `seed`, then slices:
/// validation and test each take floor(N/10) rows, train keeps the remainder.
pub fn split_dataset(triples: &[RatingTriple], seed: u64) -> Result<DatasetSplit> {
    let n = triples.len();
    if n < 10 {
        return Err(Error::DatasetTooSmall(n));
    }
    let mut shuffled = triples.to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    shuffled.shuffle(&mut rng);

    let tenth = n / 10;
    let train_len = n - 2 * tenth;
    let test = shuffled.split_off(train_len + tenth);
    let validation = shuffled.split_off(train_len);
    Ok(DatasetSplit {
        train: shuffled,
        validation,
        test,
        seed,
    })
}

/// Writes the split as tab-separated `split  user  item  rating` rows with a
/// leading `# seed=...` comment, in split order, so the exact split can be
/// rebuilt without re-shuffling.
pub fn write_split_manifest(split: &DatasetSplit, path: &Path) -> Result<()> {
    let mut out = String::new();
    writeln!(out, "# seed={}", split.seed).expect("string write");
    for (name, rows) in [
        ("train", &split.train),
        ("validation", &split.validation),
        ("test", &split.test),
    ] {
        for t in rows {
            writeln!(out, "{name}\t{}\t{}\t{}", t.user, t.item, t.rating).expect("string write");
        }
    }
    fs::write(path, out)?;
    Ok(())
}

/// Rebuilds a split from a manifest written by [`write_split_manifest`],
/// validating every row against the dataset's index space and rating range.
pub fn read_split_manifest(path: &Path, meta: &DatasetMeta) -> Result<DatasetSplit> {
    let shown = path.display().to_string();
    let file = fs::File::open(path).map_err(|source| Error::Read {
        path: shown.clone(),
        source,
    })?;
    let reader = BufReader::new(file);

    let mut split = DatasetSplit {
        train: Vec::new(),
        validation: Vec::new(),
        test: Vec::new(),
        seed: 0,
    };
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        if let Some(comment) = line.strip_prefix('#') {
            if let Some(seed) = comment.trim().strip_prefix("seed=") {
                split.seed = seed
                    .parse()
                    .map_err(|_| Error::Manifest(format!("{shown}: bad seed line {line:?}")))?;
            }
            continue;
        }
        let bad = |msg: String| Error::Manifest(format!("{shown}:{}: {msg}", idx + 1));
        let fields: Vec<&str> = line.split('\t').collect();
        let [name, user, item, rating] = fields[..] else {
            return Err(bad(format!("expected 4 tab-separated fields, got {}", fields.len())));
        };
        let user: usize = user.parse().map_err(|_| bad(format!("bad user index {user:?}")))?;
        let item: usize = item.parse().map_err(|_| bad(format!("bad item index {item:?}")))?;
        let rating: f64 = rating.parse().map_err(|_| bad(format!("bad rating {rating:?}")))?;
        if user >= meta.users || item >= meta.items {
            return Err(bad(format!(
                "index ({user}, {item}) outside dataset of {} users x {} items",
                meta.users, meta.items
            )));
        }
        if !(meta.range_min..=meta.range_max).contains(&rating) {
            return Err(bad(format!("rating {rating} outside declared range")));
        }
        let triple = RatingTriple { user, item, rating };
        match name {
            "train" => split.train.push(triple),
            "validation" => split.validation.push(triple),
            "test" => split.test.push(triple),
            other => return Err(bad(format!("unknown split name {other:?}"))),
        }
    }
    let total = split.train.len() + split.validation.len() + split.test.len();
    if total != meta.interactions {
        return Err(Error::Manifest(format!(
            "{shown}: {total} rows but dataset has {} interactions",
            meta.interactions
        )));
    }
    if split.train.is_empty() {
        return Err(Error::Manifest(format!("{shown}: train split is empty")));
    }
    Ok(split)
}

/// The 19 genre flags of a MovieLens-100k `u.item` row, in file order.
const ML_100K_GENRES: [&str; 19] = [
    "unknown",
    "Action",
    "Adventure",
    "Animation",
    "Children's",
    "Comedy",
    "Crime",
    "Documentary",
    "Drama",
    "Fantasy",
    "Film-Noir",
    "Horror",
    "Musical",
    "Mystery",
    "Romance",
    "Sci-Fi",
    "Thriller",
    "War",
    "Western",
];

/// Loads genre labels from a MovieLens-100k `u.item` file (pipe-delimited,
/// Latin-1; only the ASCII id and genre-flag fields are interpreted).
/// `item_ids` maps raw IDs to dense indices; rows for unseen items are
/// skipped since they cannot occur in the interaction data.
pub fn load_movielens_genres(path: &Path, item_ids: &[String]) -> Result<ItemMetadata> {
    let shown = path.display().to_string();
    let bytes = fs::read(path).map_err(|source| Error::Read {
        path: shown.clone(),
        source,
    })?;
    let index: HashMap<&str, usize> = item_ids
        .iter()
        .enumerate()
        .map(|(i, id)| (id.as_str(), i))
        .collect();

    let mut labels = vec![Vec::new(); item_ids.len()];
    for (idx, raw_line) in bytes.split(|&b| b == b'\n').enumerate() {
        let raw_line = raw_line.strip_suffix(b"\r").unwrap_or(raw_line);
        if raw_line.is_empty() {
            continue;
        }
        let fields: Vec<&[u8]> = raw_line.split(|&b| b == b'|').collect();
        if fields.len() != 5 + ML_100K_GENRES.len() {
            return Err(Error::Parse {
                path: shown,
                line: idx + 1,
                message: format!("expected 24 pipe-separated fields, got {}", fields.len()),
            });
        }
        let raw_id = String::from_utf8_lossy(fields[0]);
        let Some(&item) = index.get(raw_id.trim()) else {
            continue;
        };
        for (g, flag) in fields[5..].iter().enumerate() {
            match *flag {
                b"1" => labels[item].push(ML_100K_GENRES[g].to_string()),
                b"0" => {}
                other => {
                    return Err(Error::Parse {
                        path: shown,
                        line: idx + 1,
                        message: format!(
                            "genre flag {:?} is not 0/1",
                            String::from_utf8_lossy(other)
                        ),
                    })
                }
            }
        }
    }
    Ok(ItemMetadata { labels })
}

/// Loads category labels from `raw_item_id<delim>label<delim>label...` rows.
/// Rows for items absent from `item_ids` are skipped.
pub fn load_categories_delimited(
    path: &Path,
    delimiter: &str,
    item_ids: &[String],
) -> Result<ItemMetadata> {
    let shown = path.display().to_string();
    let file = fs::File::open(path).map_err(|source| Error::Read {
        path: shown.clone(),
        source,
    })?;
    let reader = BufReader::new(file);
    let index: HashMap<&str, usize> = item_ids
        .iter()
        .enumerate()
        .map(|(i, id)| (id.as_str(), i))
        .collect();

    let mut labels = vec![Vec::new(); item_ids.len()];
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let mut fields = line.split(delimiter);
        let raw_id = fields.next().ok_or_else(|| Error::Parse {
            path: shown.clone(),
            line: idx + 1,
            message: "empty row".to_string(),
        })?;
        let Some(&item) = index.get(raw_id.trim()) else {
            continue;
        };
        labels[item].extend(fields.map(|f| f.trim().to_string()).filter(|f| !f.is_empty()));
    }
    Ok(ItemMetadata { labels })
}
