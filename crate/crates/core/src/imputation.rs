//! Regression-based densification of a sparse rating matrix.
//!
//! Stage 1 fills every missing cell with the user's mean rating (the global
//! mean for users with no ratings at all). Stage 2 replaces those fills, per
//! user, with predictions from a linear model fit by minimum-norm least
//! squares: the features of item `k` are the stage-1 column `k` with the
//! user's own row removed, so a user is never regressed on itself, and the
//! regression always reads the stage-1 grid rather than its own output.
//! Predictions are clamped to `[0, 1]`.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::ratings::{RatingEntry, RatingMatrix, RatingsError};

#[derive(Debug, Error)]
pub enum ImputationError {
    #[error("regression fill needs at least 2 users, got {0}")]
    TooFewUsers(usize),
    #[error("matrix has no users or no items")]
    EmptyDimensions,
    #[error("matrix has no rating entries")]
    NoEntries,
    #[error("item `{id}` (index {index}) has a zero-norm column; cosine undefined")]
    ZeroNormColumn { index: usize, id: String },
    #[error("shape mismatch: correlation is {c_rows}x{c_cols}, expected {n}x{n}")]
    ShapeMismatch {
        c_rows: usize,
        c_cols: usize,
        n: usize,
    },
    #[error("least-squares solve failed: {0}")]
    SolveFailed(String),
    #[error(transparent)]
    Ratings(#[from] RatingsError),
}

/// Dense row-major grid of `f64` values.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Grid {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    /// Write the grid as TSV, one row per line.
    pub fn write_tsv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for r in 0..self.rows {
            for c in 0..self.cols {
                if c > 0 {
                    write!(w, "\t")?;
                }
                write!(w, "{}", self.at(r, c))?;
            }
            writeln!(w)?;
        }
        Ok(())
    }
}

/// A fully populated user-by-item rating grid, with the observation mask
/// distinguishing original ratings (`O`) from imputed ones (`I`).
#[derive(Debug, Clone, PartialEq)]
pub struct DenseRatings {
    user_ids: Vec<String>,
    item_ids: Vec<String>,
    values: Grid,
    observed: Vec<bool>,
}

impl DenseRatings {
    pub fn user_count(&self) -> usize {
        self.values.rows()
    }

    pub fn item_count(&self) -> usize {
        self.values.cols()
    }

    pub fn user_ids(&self) -> &[String] {
        &self.user_ids
    }

    pub fn item_ids(&self) -> &[String] {
        &self.item_ids
    }

    pub fn value(&self, user: usize, item: usize) -> f64 {
        self.values.at(user, item)
    }

    pub fn is_observed(&self, user: usize, item: usize) -> bool {
        self.observed[user * self.values.cols() + item]
    }

    pub fn values(&self) -> &Grid {
        &self.values
    }

    /// Reinterpret the dense grid as a rating matrix with every cell observed.
    pub fn to_rating_matrix(&self) -> RatingMatrix {
        let mut entries = Vec::with_capacity(self.user_count() * self.item_count());
        for u in 0..self.user_count() {
            for g in 0..self.item_count() {
                entries.push(RatingEntry {
                    user: u,
                    item: g,
                    rating: self.value(u, g),
                });
            }
        }
        RatingMatrix::from_entries(self.user_ids.clone(), self.item_ids.clone(), entries)
            .expect("dense grid values are clamped to [0, 1]")
    }

    /// Write the value grid as TSV.
    pub fn write_values_tsv<W: Write>(&self, w: W) -> std::io::Result<()> {
        self.values.write_tsv(w)
    }

    /// Write the companion mask: `O` for observed cells, `I` for imputed.
    pub fn write_mask_tsv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for u in 0..self.user_count() {
            for g in 0..self.item_count() {
                if g > 0 {
                    write!(w, "\t")?;
                }
                write!(w, "{}", if self.is_observed(u, g) { "O" } else { "I" })?;
            }
            writeln!(w)?;
        }
        Ok(())
    }
}

/// Minimum-norm least-squares solution of `A theta ~ b` via SVD, i.e. the
/// pseudo-inverse applied to `b`. Singular values below a relative cutoff
/// are treated as zero.
fn min_norm_lstsq(a: DMatrix<f64>, b: DVector<f64>) -> Result<DVector<f64>, ImputationError> {
    let svd = a.svd(true, true);
    let max_sv = svd.singular_values.iter().cloned().fold(0.0f64, f64::max);
    let eps = if max_sv > 0.0 { max_sv * 1e-12 } else { f64::MIN_POSITIVE };
    svd.solve(&b, eps)
        .map_err(|e| ImputationError::SolveFailed(e.to_string()))
}

/// Fill every missing cell of a sparse rating matrix; see the module docs for
/// the two-stage procedure.
pub fn fill_linear_regression(matrix: &RatingMatrix) -> Result<DenseRatings, ImputationError> {
    let m = matrix.user_count();
    let n = matrix.item_count();
    if m == 0 || n == 0 {
        return Err(ImputationError::EmptyDimensions);
    }
    if m < 2 {
        return Err(ImputationError::TooFewUsers(m));
    }
    if matrix.rating_count() == 0 {
        return Err(ImputationError::NoEntries);
    }

    // Stage 1: user-mean fill (global mean for ratingless users).
    let global_mean = matrix
        .entries()
        .iter()
        .map(|e| e.rating)
        .sum::<f64>()
        / matrix.rating_count() as f64;
    let mut stage1 = Grid::zeros(m, n);
    let mut observed = vec![false; m * n];
    for u in 0..m {
        let rated = matrix.ratings_of_user(u);
        let fill = if rated.is_empty() {
            global_mean
        } else {
            rated.iter().map(|&(_, r)| r).sum::<f64>() / rated.len() as f64
        };
        for g in 0..n {
            stage1.set(u, g, fill);
        }
    }
    for e in matrix.entries() {
        stage1.set(e.user, e.item, e.rating);
        observed[e.user * n + e.item] = true;
    }

    // Stage 2: per-user regression against the stage-1 grid. Output cells are
    // written to a copy so later users still see the pristine stage-1 values.
    let mut out = stage1.clone();
    for u in 0..m {
        let rated = matrix.ratings_of_user(u);
        let missing: Vec<usize> = (0..n).filter(|g| !observed[u * n + g]).collect();
        if missing.is_empty() || rated.is_empty() {
            // Nothing to predict, or no equations: keep the stage-1 fill.
            continue;
        }
        // Features of item k: stage-1 column k with row u removed, plus an
        // intercept column of ones. One equation per rated item.
        let p = m - 1;
        let mut a = DMatrix::zeros(rated.len(), p + 1);
        let mut b = DVector::zeros(rated.len());
        for (row, &(k, r)) in rated.iter().enumerate() {
            let mut col = 0;
            for v in 0..m {
                if v == u {
                    continue;
                }
                a[(row, col)] = stage1.at(v, k);
                col += 1;
            }
            a[(row, p)] = 1.0;
            b[row] = r;
        }
        let theta = min_norm_lstsq(a, b)?;
        for &g in &missing {
            let mut pred = theta[p];
            let mut col = 0;
            for v in 0..m {
                if v == u {
                    continue;
                }
                pred += theta[col] * stage1.at(v, g);
                col += 1;
            }
            out.set(u, g, pred.clamp(0.0, 1.0));
        }
    }

    Ok(DenseRatings {
        user_ids: matrix.user_ids().to_vec(),
        item_ids: matrix.item_ids().to_vec(),
        values: out,
        observed,
    })
}

/// Cosine similarity between every pair of dense item columns; the diagonal
/// is exactly 1.
pub fn item_correlation(dense: &DenseRatings) -> Result<Grid, ImputationError> {
    let m = dense.user_count();
    let n = dense.item_count();
    let mut norms = vec![0.0f64; n];
    for (j, norm) in norms.iter_mut().enumerate() {
        let mut s = 0.0;
        for u in 0..m {
            let v = dense.value(u, j);
            s += v * v;
        }
        if s <= 0.0 {
            return Err(ImputationError::ZeroNormColumn {
                index: j,
                id: dense.item_ids[j].clone(),
            });
        }
        *norm = s.sqrt();
    }
    let mut c = Grid::zeros(n, n);
    for j in 0..n {
        c.set(j, j, 1.0);
        for l in j + 1..n {
            let mut dot = 0.0;
            for u in 0..m {
                dot += dense.value(u, j) * dense.value(u, l);
            }
            let cos = dot / (norms[j] * norms[l]);
            c.set(j, l, cos);
            c.set(l, j, cos);
        }
    }
    Ok(c)
}

/// Stack the item-correlation block on top of the transposed dense ratings:
/// an `(n + m) x n` matrix whose column `j` describes item `j` first by its
/// similarity to every item, then by every user's rating of it.
pub fn augment(dense: &DenseRatings, correlation: &Grid) -> Result<Grid, ImputationError> {
    let m = dense.user_count();
    let n = dense.item_count();
    if correlation.rows() != n || correlation.cols() != n {
        return Err(ImputationError::ShapeMismatch {
            c_rows: correlation.rows(),
            c_cols: correlation.cols(),
            n,
        });
    }
    let mut x = Grid::zeros(n + m, n);
    for j in 0..n {
        for l in 0..n {
            x.set(j, l, correlation.at(j, l));
        }
    }
    for u in 0..m {
        for j in 0..n {
            x.set(n + u, j, dense.value(u, j));
        }
    }
    Ok(x)
}
