//! Sparse rating data: declared-scale normalization, inverted indexes, CSV round-trip.
//!
//! Ratings are stored normalized to `[0, 1]`. Normalization always uses the
//! declared scale bounds, never the observed min/max, so two files on the same
//! scale normalize identically even when one of them happens not to contain
//! the extreme values. User and item ids are mapped to dense indices in order
//! of first appearance; the original ids are retained for export.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use thiserror::Error;

/// Errors raised while loading, constructing, or exporting rating data.
#[derive(Debug, Error)]
pub enum RatingsError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("row {row}: {source}")]
    Csv { row: u64, source: csv::Error },
    #[error("expected header `user,item,rating`, found `{found}`")]
    BadHeader { found: String },
    #[error("row {row}: malformed rating `{value}`")]
    MalformedRating { row: u64, value: String },
    #[error("row {row}: rating {value} outside declared scale [{min}, {max}]")]
    OutOfScale {
        row: u64,
        value: f64,
        min: f64,
        max: f64,
    },
    #[error("row {row}: duplicate rating for user `{user}` and item `{item}`")]
    DuplicateEntry { row: u64, user: String, item: String },
    #[error("duplicate rating for user index {user} and item index {item}")]
    DuplicateIndex { user: usize, item: usize },
    #[error("rating scale requires max > min, got [{min}, {max}]")]
    BadScale { min: f64, max: f64 },
    #[error("normalized rating {value} for user {user}, item {item} outside [0, 1]")]
    OutOfUnitRange { user: usize, item: usize, value: f64 },
    #[error("entry references user {user} but only {count} users are declared")]
    UserOutOfBounds { user: usize, count: usize },
    #[error("entry references item {item} but only {count} items are declared")]
    ItemOutOfBounds { item: usize, count: usize },
    #[error("matrix has no users or no items")]
    EmptyDimensions,
    #[error("matrix has no rating entries")]
    NoEntries,
}

/// Declared bounds of the raw rating scale, e.g. `[0, 10]` with step `0.5`.
///
/// `step` is informational (0 marks a continuous scale); values are validated
/// against the bounds only.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct RatingScale {
    pub min_raw: f64,
    pub max_raw: f64,
    pub step: f64,
}

impl RatingScale {
    pub fn new(min_raw: f64, max_raw: f64, step: f64) -> Result<Self, RatingsError> {
        if !(max_raw > min_raw) || !min_raw.is_finite() || !max_raw.is_finite() || step < 0.0 {
            return Err(RatingsError::BadScale {
                min: min_raw,
                max: max_raw,
            });
        }
        Ok(Self {
            min_raw,
            max_raw,
            step,
        })
    }

    /// The unit scale `[0, 1]`; input already normalized.
    pub fn unit() -> Self {
        Self {
            min_raw: 0.0,
            max_raw: 1.0,
            step: 0.0,
        }
    }

    /// Map a raw value onto `[0, 1]`.
    pub fn normalize(&self, raw: f64) -> f64 {
        (raw - self.min_raw) / (self.max_raw - self.min_raw)
    }
}

/// One observed rating in dense index space, value already in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RatingEntry {
    pub user: usize,
    pub item: usize,
    pub rating: f64,
}

/// Sparse user-by-item rating matrix with inverted indexes.
///
/// `ratings_of_user(i)` and `ratings_of_item(j)` are exact inversions of the
/// entry list: every entry appears in exactly one user list and one item list.
#[derive(Debug, Clone, PartialEq)]
pub struct RatingMatrix {
    user_ids: Vec<String>,
    item_ids: Vec<String>,
    entries: Vec<RatingEntry>,
    by_user: Vec<Vec<(usize, f64)>>,
    by_item: Vec<Vec<(usize, f64)>>,
}

impl RatingMatrix {
    /// Build a matrix from normalized entries; validates bounds, the `[0, 1]`
    /// range, and rejects duplicate `(user, item)` cells.
    pub fn from_entries(
        user_ids: Vec<String>,
        item_ids: Vec<String>,
        entries: Vec<RatingEntry>,
    ) -> Result<Self, RatingsError> {
        let m = user_ids.len();
        let n = item_ids.len();
        let mut by_user: Vec<Vec<(usize, f64)>> = vec![Vec::new(); m];
        let mut by_item: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
        let mut seen: HashMap<(usize, usize), ()> = HashMap::with_capacity(entries.len());
        for e in &entries {
            if e.user >= m {
                return Err(RatingsError::UserOutOfBounds {
                    user: e.user,
                    count: m,
                });
            }
            if e.item >= n {
                return Err(RatingsError::ItemOutOfBounds {
                    item: e.item,
                    count: n,
                });
            }
            if !(e.rating >= 0.0 && e.rating <= 1.0) {
                return Err(RatingsError::OutOfUnitRange {
                    user: e.user,
                    item: e.item,
                    value: e.rating,
                });
            }
            if seen.insert((e.user, e.item), ()).is_some() {
                return Err(RatingsError::DuplicateIndex {
                    user: e.user,
                    item: e.item,
                });
            }
            by_user[e.user].push((e.item, e.rating));
            by_item[e.item].push((e.user, e.rating));
        }
        Ok(Self {
            user_ids,
            item_ids,
            entries,
            by_user,
            by_item,
        })
    }

    /// Load a `user,item,rating` CSV, normalizing values by the declared scale.
    ///
    /// Ids are assigned dense indices in order of first appearance. Errors
    /// carry 1-based file line numbers (the header is line 1).
    pub fn load_csv(path: &Path, scale: &RatingScale) -> Result<Self, RatingsError> {
        let file = std::fs::File::open(path).map_err(|source| RatingsError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::read_csv(std::io::BufReader::new(file), scale)
    }

    /// Same as [`RatingMatrix::load_csv`] for any reader.
    pub fn read_csv<R: std::io::Read>(
        reader: R,
        scale: &RatingScale,
    ) -> Result<Self, RatingsError> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(true)
            .trim(csv::Trim::All)
            .from_reader(reader);
        {
            let headers = rdr.headers().map_err(|source| RatingsError::Csv {
                row: 1,
                source,
            })?;
            let got: Vec<&str> = headers.iter().collect();
            if got != ["user", "item", "rating"] {
                return Err(RatingsError::BadHeader {
                    found: got.join(","),
                });
            }
        }

        let mut user_index: HashMap<String, usize> = HashMap::new();
        let mut item_index: HashMap<String, usize> = HashMap::new();
        let mut user_ids: Vec<String> = Vec::new();
        let mut item_ids: Vec<String> = Vec::new();
        let mut entries: Vec<RatingEntry> = Vec::new();
        let mut seen: HashMap<(usize, usize), ()> = HashMap::new();

        for (i, record) in rdr.records().enumerate() {
            let row = i as u64 + 2; // 1-based line number; header is line 1
            let record = record.map_err(|source| RatingsError::Csv { row, source })?;
            if record.len() != 3 {
                return Err(RatingsError::MalformedRating {
                    row,
                    value: record.iter().collect::<Vec<_>>().join(","),
                });
            }
            let user_id = record[0].to_string();
            let item_id = record[1].to_string();
            let raw: f64 = record[2].parse().map_err(|_| RatingsError::MalformedRating {
                row,
                value: record[2].to_string(),
            })?;
            if !raw.is_finite() || raw < scale.min_raw || raw > scale.max_raw {
                return Err(RatingsError::OutOfScale {
                    row,
                    value: raw,
                    min: scale.min_raw,
                    max: scale.max_raw,
                });
            }
            let u = *user_index.entry(user_id.clone()).or_insert_with(|| {
                user_ids.push(user_id.clone());
                user_ids.len() - 1
            });
            let g = *item_index.entry(item_id.clone()).or_insert_with(|| {
                item_ids.push(item_id.clone());
                item_ids.len() - 1
            });
            if seen.insert((u, g), ()).is_some() {
                return Err(RatingsError::DuplicateEntry {
                    row,
                    user: user_id,
                    item: item_id,
                });
            }
            entries.push(RatingEntry {
                user: u,
                item: g,
                rating: scale.normalize(raw),
            });
        }

        Self::from_entries(user_ids, item_ids, entries)
    }

    /// Number of users (`m`).
    pub fn user_count(&self) -> usize {
        self.user_ids.len()
    }

    /// Number of items (`n`).
    pub fn item_count(&self) -> usize {
        self.item_ids.len()
    }

    /// Number of observed ratings.
    pub fn rating_count(&self) -> usize {
        self.entries.len()
    }

    pub fn user_ids(&self) -> &[String] {
        &self.user_ids
    }

    pub fn item_ids(&self) -> &[String] {
        &self.item_ids
    }

    pub fn entries(&self) -> &[RatingEntry] {
        &self.entries
    }

    /// `(item, rating)` pairs observed for user `i`.
    pub fn ratings_of_user(&self, i: usize) -> &[(usize, f64)] {
        &self.by_user[i]
    }

    /// `(user, rating)` pairs observed for item `j`.
    pub fn ratings_of_item(&self, j: usize) -> &[(usize, f64)] {
        &self.by_item[j]
    }

    /// Fraction of the `m x n` grid that is observed.
    pub fn density(&self) -> Result<f64, RatingsError> {
        let cells = self.user_count() * self.item_count();
        if cells == 0 {
            return Err(RatingsError::EmptyDimensions);
        }
        Ok(self.entries.len() as f64 / cells as f64)
    }

    /// Sorted distinct normalized rating values; its length is the default
    /// number of quantization levels for fitting a rating function.
    pub fn distinct_levels(&self) -> Result<Vec<f64>, RatingsError> {
        if self.entries.is_empty() {
            return Err(RatingsError::NoEntries);
        }
        let mut levels: Vec<f64> = self.entries.iter().map(|e| e.rating).collect();
        levels.sort_unstable_by(f64::total_cmp);
        levels.dedup();
        Ok(levels)
    }

    /// Write the matrix back out as `user,item,rating` with normalized values.
    ///
    /// Re-loading the output with the unit scale reproduces the matrix
    /// exactly; values are printed with shortest round-trip precision.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "user,item,rating")?;
        for e in &self.entries {
            writeln!(
                w,
                "{},{},{}",
                self.user_ids[e.user], self.item_ids[e.item], e.rating
            )?;
        }
        Ok(())
    }

    /// Write the sidecar mapping from dense indices back to original ids.
    pub fn write_index_map<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "index,original_id,kind")?;
        for (i, id) in self.user_ids.iter().enumerate() {
            writeln!(w, "{},{},user", i, id)?;
        }
        for (j, id) in self.item_ids.iter().enumerate() {
            writeln!(w, "{},{},item", j, id)?;
        }
        Ok(())
    }
}

/// Read an `item,category` label CSV for plotting; returns pairs in file order.
pub fn read_labels<R: std::io::Read>(reader: R) -> Result<Vec<(String, String)>, RatingsError> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    {
        let headers = rdr.headers().map_err(|source| RatingsError::Csv {
            row: 1,
            source,
        })?;
        let got: Vec<&str> = headers.iter().collect();
        if got != ["item", "category"] {
            return Err(RatingsError::BadHeader {
                found: got.join(","),
            });
        }
    }
    let mut labels = Vec::new();
    for (i, record) in rdr.records().enumerate() {
        let row = i as u64 + 2;
        let record = record.map_err(|source| RatingsError::Csv { row, source })?;
        if record.len() != 2 {
            return Err(RatingsError::MalformedRating {
                row,
                value: record.iter().collect::<Vec<_>>().join(","),
            });
        }
        labels.push((record[0].to_string(), record[1].to_string()));
    }
    Ok(labels)
}

/// Load labels from a file path, wrapping IO errors with the path.
pub fn load_labels(path: &Path) -> Result<Vec<(String, String)>, RatingsError> {
    let file = std::fs::File::open(path).map_err(|source| RatingsError::Io {
        path: path.display().to_string(),
        source,
    })?;
    read_labels(std::io::BufReader::new(file))
}
