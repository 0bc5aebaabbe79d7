//! Quantized step function from distance to rating, and its least-squares fit.
//!
//! A function with `K` levels takes the value `1 - (i-1)/(K-1)` on the
//! half-open bracket `[theta_{i-1}, theta_i)`, with `theta_0 = 0` implicit and
//! `theta_K = +inf` implicit, so the value at distance 0 is always 1 and the
//! value past the last threshold is always 0. Fitting chooses the `K-1` finite
//! thresholds minimizing the summed squared error against observed
//! `(distance, rating)` pairs; level values themselves are fixed.

use thiserror::Error;

/// Minimum separation enforced between returned thresholds so that empty
/// levels still yield a strictly increasing sequence.
pub const THRESHOLD_GAP: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum RatingFunctionError {
    #[error("need at least 2 levels, got {0}")]
    TooFewLevels(usize),
    #[error("expected {expected} thresholds for {levels} levels, got {got}")]
    WrongThresholdCount {
        levels: usize,
        expected: usize,
        got: usize,
    },
    #[error("thresholds must be finite, positive, and strictly increasing: {0:?}")]
    BadThresholds(Vec<f64>),
    #[error("distance must be non-negative and finite, got {0}")]
    BadDistance(f64),
    #[error("no (distance, rating) pairs to fit")]
    NoPairs,
    #[error("pair {index} has invalid distance {distance}")]
    BadPair { index: usize, distance: f64 },
    #[error("malformed rating function line: {0}")]
    Parse(String),
}

/// Monotone non-increasing step function defined by `K` and its thresholds.
#[derive(Debug, Clone, PartialEq)]
pub struct RatingFunction {
    k: usize,
    thetas: Vec<f64>,
}

impl RatingFunction {
    /// Build from the level count and the `K-1` finite thresholds.
    pub fn new(k: usize, thetas: Vec<f64>) -> Result<Self, RatingFunctionError> {
        if k < 2 {
            return Err(RatingFunctionError::TooFewLevels(k));
        }
        if thetas.len() != k - 1 {
            return Err(RatingFunctionError::WrongThresholdCount {
                levels: k,
                expected: k - 1,
                got: thetas.len(),
            });
        }
        let increasing = thetas
            .windows(2)
            .all(|w| w[0] < w[1]);
        let positive = thetas.iter().all(|t| t.is_finite() && *t > 0.0);
        if !increasing || !positive {
            return Err(RatingFunctionError::BadThresholds(thetas));
        }
        Ok(Self { k, thetas })
    }

    /// Number of quantization levels `K`.
    pub fn k(&self) -> usize {
        self.k
    }

    /// The `K-1` finite thresholds in increasing order.
    pub fn thetas(&self) -> &[f64] {
        &self.thetas
    }

    /// The fixed level values `1, 1 - 1/(K-1), ..., 0` in bracket order.
    pub fn level_values(&self) -> Vec<f64> {
        (0..self.k)
            .map(|i| 1.0 - i as f64 / (self.k - 1) as f64)
            .collect()
    }

    /// Evaluate the function at a non-negative distance.
    pub fn eval(&self, x: f64) -> Result<f64, RatingFunctionError> {
        if !x.is_finite() || x < 0.0 {
            return Err(RatingFunctionError::BadDistance(x));
        }
        Ok(self.value(x))
    }

    /// Evaluation without the argument check; callers pass computed norms.
    pub(crate) fn value(&self, x: f64) -> f64 {
        debug_assert!(x >= 0.0);
        let crossed = self.thetas.partition_point(|t| *t <= x);
        1.0 - crossed as f64 / (self.k - 1) as f64
    }

    /// Summed squared error of the function against `(distance, rating)` pairs.
    pub fn sse(&self, pairs: &[(f64, f64)]) -> f64 {
        pairs
            .iter()
            .map(|&(d, r)| {
                let e = self.value(d) - r;
                e * e
            })
            .sum()
    }

    /// Fit the thresholds minimizing summed squared error over the pairs.
    ///
    /// Exact minimization by dynamic programming over the distance-sorted
    /// pairs: a partition of the sorted sequence into `K` consecutive runs
    /// (empty runs allowed) determines the assignment of level values, and a
    /// running minimum over partition points makes each level a single O(N)
    /// sweep. Pairs at equal distance always land in the same run, and no run
    /// boundary may precede distance-0 pairs (the value at 0 is pinned to 1).
    /// Interior thresholds sit at midpoints between adjacent distinct
    /// distances; a boundary after all pairs maps to `max distance + 1`.
    pub fn fit(pairs: &[(f64, f64)], k: usize) -> Result<Self, RatingFunctionError> {
        if k < 2 {
            return Err(RatingFunctionError::TooFewLevels(k));
        }
        if pairs.is_empty() {
            return Err(RatingFunctionError::NoPairs);
        }
        for (index, &(d, _)) in pairs.iter().enumerate() {
            if !d.is_finite() || d < 0.0 {
                return Err(RatingFunctionError::BadPair {
                    index,
                    distance: d,
                });
            }
        }

        let mut sorted: Vec<(f64, f64)> = pairs.to_vec();
        sorted.sort_unstable_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
        let n = sorted.len();

        // Prefix sums of ratings and squared ratings over the sorted order.
        let mut s1 = vec![0.0f64; n + 1];
        let mut s2 = vec![0.0f64; n + 1];
        for (t, &(_, r)) in sorted.iter().enumerate() {
            s1[t + 1] = s1[t] + r;
            s2[t + 1] = s2[t] + r * r;
        }

        // A partition point is valid where the distance strictly increases.
        // Position 0 is valid only when the smallest distance is positive:
        // thresholds are positive, so distance-0 pairs cannot be pushed out
        // of the first level.
        let valid = |p: usize| -> bool {
            if p == n {
                true
            } else if p == 0 {
                sorted[0].0 > 0.0
            } else {
                sorted[p - 1].0 < sorted[p].0
            }
        };

        let km1 = (k - 1) as f64;
        // cost(q..p, v) = sum over pairs in q..p of (v - r)^2, via prefix sums.
        let seg_cost = |q: usize, p: usize, v: f64| -> f64 {
            (s2[p] - s2[q]) - 2.0 * v * (s1[p] - s1[q]) + v * v * (p - q) as f64
        };

        let mut prev = vec![f64::INFINITY; n + 1];
        for p in 0..=n {
            if valid(p) {
                prev[p] = seg_cost(0, p, 1.0);
            }
        }

        // backs[level - 2][p] = best partition point feeding level `level`
        // when its run ends at p.
        let mut backs: Vec<Vec<u32>> = Vec::with_capacity(k - 1);
        let mut curr = vec![f64::INFINITY; n + 1];
        for level in 2..=k {
            let v = 1.0 - (level - 1) as f64 / km1;
            let mut back = vec![u32::MAX; n + 1];
            let mut best = f64::INFINITY;
            let mut best_q = u32::MAX;
            for p in 0..=n {
                if !valid(p) {
                    continue;
                }
                // Offer q = p first: the run for this level may be empty.
                let offer = prev[p] - s2[p] + 2.0 * v * s1[p] - v * v * p as f64;
                if offer < best {
                    best = offer;
                    best_q = p as u32;
                }
                curr[p] = best + s2[p] - 2.0 * v * s1[p] + v * v * p as f64;
                back[p] = best_q;
            }
            backs.push(back);
            std::mem::swap(&mut prev, &mut curr);
            curr.iter_mut().for_each(|x| *x = f64::INFINITY);
        }

        // Trace the partition points back from the full sequence.
        let mut bounds = vec![0usize; k + 1];
        bounds[k] = n;
        let mut p = n;
        for level in (2..=k).rev() {
            let q = backs[level - 2][p] as usize;
            bounds[level - 1] = q;
            p = q;
        }

        let mut thetas = Vec::with_capacity(k - 1);
        for &q in bounds.iter().take(k).skip(1) {
            let t = if q == 0 {
                sorted[0].0 / 2.0
            } else if q == n {
                sorted[n - 1].0 + 1.0
            } else {
                0.5 * (sorted[q - 1].0 + sorted[q].0)
            };
            thetas.push(t);
        }
        for i in 0..thetas.len() {
            let floor = if i == 0 {
                THRESHOLD_GAP
            } else {
                thetas[i - 1] + THRESHOLD_GAP
            };
            if thetas[i] < floor {
                thetas[i] = floor;
            }
        }

        Self::new(k, thetas)
    }

    /// One-line text form: `K theta_1 ... theta_{K-1}`.
    pub fn to_line(&self) -> String {
        let mut s = self.k.to_string();
        for t in &self.thetas {
            s.push(' ');
            s.push_str(&t.to_string());
        }
        s
    }

    /// Parse the [`RatingFunction::to_line`] form.
    pub fn from_line(line: &str) -> Result<Self, RatingFunctionError> {
        let mut fields = line.split_whitespace();
        let k: usize = fields
            .next()
            .ok_or_else(|| RatingFunctionError::Parse("empty line".into()))?
            .parse()
            .map_err(|_| RatingFunctionError::Parse(format!("bad level count in `{line}`")))?;
        let thetas: Vec<f64> = fields
            .map(|f| {
                f.parse::<f64>()
                    .map_err(|_| RatingFunctionError::Parse(format!("bad threshold `{f}`")))
            })
            .collect::<Result<_, _>>()?;
        Self::new(k, thetas)
    }
}
