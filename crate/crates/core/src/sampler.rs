//! Metropolis-Hastings sampler over user/item positions, with an EM loop that
//! alternates sampling (E-step) with refitting the rating function (M-step).
//!
//! The target density couples a zero-mean isotropic Gaussian prior on every
//! point with a Gaussian observation model around the step function: a rating
//! `r` between user `u` and item `g` contributes `N(r; f(|u - g|), sigma_r)`.
//! One sampler step picks a single point uniformly at random, proposes a
//! Gaussian move, and accepts with the Metropolis-Hastings ratio. All ratios
//! are computed in log space so that annealing exponents up to 1e6 stay
//! finite. Annealing raises the prior-times-likelihood part of the ratio to
//! the inverse temperature `beta`; the proposal-density part is left alone.

use std::io::{BufRead, Write};
use std::time::Instant;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rating_function::{RatingFunction, RatingFunctionError};
use crate::ratings::{RatingMatrix, RatingsError};

#[derive(Debug, Error)]
pub enum SamplerError {
    #[error("invalid sampler config: {0}")]
    InvalidConfig(String),
    #[error("need at least 2 distinct rating levels to fit, found {0}")]
    TooFewLevels(usize),
    #[error("normalization needs at least 2 points")]
    TooFewPoints,
    #[error("all points coincide: zero variance, cannot normalize")]
    ZeroVariance,
    #[error("non-finite transition gain for {kind} {index}")]
    NonFiniteGain { kind: &'static str, index: usize },
    #[error("embedding parse error: {0}")]
    Parse(String),
    #[error("failed to read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error(transparent)]
    Fit(#[from] RatingFunctionError),
    #[error(transparent)]
    Ratings(#[from] RatingsError),
}

/// Positions of all users and items in `dim`-dimensional space, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    dim: usize,
    users: Vec<f64>,
    items: Vec<f64>,
}

impl Embedding {
    pub fn zeros(dim: usize, users: usize, items: usize) -> Self {
        Self {
            dim,
            users: vec![0.0; users * dim],
            items: vec![0.0; items * dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn user_count(&self) -> usize {
        self.users.len() / self.dim.max(1)
    }

    pub fn item_count(&self) -> usize {
        self.items.len() / self.dim.max(1)
    }

    pub fn user(&self, i: usize) -> &[f64] {
        &self.users[i * self.dim..(i + 1) * self.dim]
    }

    pub fn item(&self, j: usize) -> &[f64] {
        &self.items[j * self.dim..(j + 1) * self.dim]
    }

    pub fn user_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.users[i * self.dim..(i + 1) * self.dim]
    }

    pub fn item_mut(&mut self, j: usize) -> &mut [f64] {
        &mut self.items[j * self.dim..(j + 1) * self.dim]
    }

    /// Euclidean distance between user `i` and item `j`.
    pub fn distance(&self, i: usize, j: usize) -> f64 {
        euclidean(self.user(i), self.item(j))
    }

    /// Write `kind index original_id x_1 .. x_D` rows, tab-separated.
    pub fn write_tsv<W: Write>(
        &self,
        mut w: W,
        user_ids: &[String],
        item_ids: &[String],
    ) -> std::io::Result<()> {
        for i in 0..self.user_count() {
            write!(w, "user\t{}\t{}", i, user_ids[i])?;
            for x in self.user(i) {
                write!(w, "\t{}", x)?;
            }
            writeln!(w)?;
        }
        for j in 0..self.item_count() {
            write!(w, "item\t{}\t{}", j, item_ids[j])?;
            for x in self.item(j) {
                write!(w, "\t{}", x)?;
            }
            writeln!(w)?;
        }
        Ok(())
    }

    /// Parse the [`Embedding::write_tsv`] form; returns the embedding along
    /// with the original user and item ids.
    pub fn read_tsv<R: BufRead>(
        reader: R,
    ) -> Result<(Self, Vec<String>, Vec<String>), SamplerError> {
        let mut dim: Option<usize> = None;
        let mut users: Vec<f64> = Vec::new();
        let mut items: Vec<f64> = Vec::new();
        let mut user_ids = Vec::new();
        let mut item_ids = Vec::new();
        for (lineno, line) in reader.lines().enumerate() {
            let line = line.map_err(|source| SamplerError::Io {
                path: "<embedding>".into(),
                source,
            })?;
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() < 4 {
                return Err(SamplerError::Parse(format!(
                    "line {}: expected `kind index id x_1 ..`, got `{line}`",
                    lineno + 1
                )));
            }
            let coords: Vec<f64> = fields[3..]
                .iter()
                .map(|f| {
                    f.parse::<f64>().map_err(|_| {
                        SamplerError::Parse(format!("line {}: bad coordinate `{f}`", lineno + 1))
                    })
                })
                .collect::<Result<_, _>>()?;
            match dim {
                None => dim = Some(coords.len()),
                Some(d) if d != coords.len() => {
                    return Err(SamplerError::Parse(format!(
                        "line {}: inconsistent dimension {} vs {}",
                        lineno + 1,
                        coords.len(),
                        d
                    )))
                }
                _ => {}
            }
            match fields[0] {
                "user" => {
                    users.extend_from_slice(&coords);
                    user_ids.push(fields[2].to_string());
                }
                "item" => {
                    items.extend_from_slice(&coords);
                    item_ids.push(fields[2].to_string());
                }
                other => {
                    return Err(SamplerError::Parse(format!(
                        "line {}: unknown kind `{other}`",
                        lineno + 1
                    )))
                }
            }
        }
        let dim = dim.ok_or_else(|| SamplerError::Parse("empty embedding file".into()))?;
        Ok((Self { dim, users, items }, user_ids, item_ids))
    }
}

/// Sampler and EM-loop parameters. [`SamplerConfig::new`] fills the standard
/// defaults: 1000 burn-in steps, 2000 saved sweeps, annealing rate 0.02,
/// unit prior and proposal deviations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    /// Embedding dimensionality `D`.
    pub dim: usize,
    /// Prior standard deviation for user points.
    pub sigma_u: f64,
    /// Prior standard deviation for item points.
    pub sigma_g: f64,
    /// Proposal standard deviation for user moves.
    pub sigma_qu: f64,
    /// Proposal standard deviation for item moves.
    pub sigma_qg: f64,
    /// Observation noise of the rating model.
    pub sigma_r: f64,
    /// Inner iterations discarded before sampling starts (`l_b`).
    pub burn_in: usize,
    /// Inner iterations whose configurations feed the M-step (`l_s`).
    pub samples: usize,
    /// Annealing rate: `beta` grows by `(1 + epsilon)` per EM iteration.
    pub epsilon: f64,
    /// Whether annealing is on; off keeps `beta = 1` throughout.
    pub anneal: bool,
    /// Hard cap on EM iterations.
    pub max_em_iters: usize,
    /// Stop once the relative change in training SSE drops below this.
    pub stability_tol: f64,
    /// Optional wall-clock cap in seconds, checked between EM iterations.
    pub budget_secs: Option<f64>,
    /// Normalize the embedding every this many inner iterations.
    pub normalize_stride: usize,
    /// RNG seed; equal seeds give bit-identical runs.
    pub seed: u64,
}

impl SamplerConfig {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            sigma_u: 1.0,
            sigma_g: 1.0,
            sigma_qu: 1.0,
            sigma_qg: 1.0,
            sigma_r: 0.25,
            burn_in: 1000,
            samples: 2000,
            epsilon: 0.02,
            anneal: true,
            max_em_iters: 50,
            stability_tol: 1e-3,
            budget_secs: Some(30.0),
            normalize_stride: 1,
            seed: 0,
        }
    }

    /// Observation-noise preset by number of rating levels: 0.25 for binary
    /// data, 0.1 for mid-resolution scales, 0.05 for fine-grained ones.
    pub fn sigma_r_preset(levels: usize) -> f64 {
        if levels <= 2 {
            0.25
        } else if levels <= 10 {
            0.1
        } else {
            0.05
        }
    }

    pub fn validate(&self) -> Result<(), SamplerError> {
        let complain = |msg: String| Err(SamplerError::InvalidConfig(msg));
        if self.dim == 0 {
            return complain("dim must be at least 1".into());
        }
        for (name, v) in [
            ("sigma_u", self.sigma_u),
            ("sigma_g", self.sigma_g),
            ("sigma_qu", self.sigma_qu),
            ("sigma_qg", self.sigma_qg),
            ("sigma_r", self.sigma_r),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return complain(format!("{name} must be positive, got {v}"));
            }
        }
        if self.samples == 0 {
            return complain("samples must be at least 1".into());
        }
        if !(self.epsilon >= 0.0) {
            return complain(format!("epsilon must be non-negative, got {}", self.epsilon));
        }
        if self.max_em_iters == 0 {
            return complain("max_em_iters must be at least 1".into());
        }
        if !(self.stability_tol >= 0.0) {
            return complain(format!(
                "stability_tol must be non-negative, got {}",
                self.stability_tol
            ));
        }
        if self.normalize_stride == 0 {
            return complain("normalize_stride must be at least 1".into());
        }
        if let Some(b) = self.budget_secs {
            if !(b > 0.0) {
                return complain(format!("budget_secs must be positive, got {b}"));
            }
        }
        Ok(())
    }
}

/// Inverse-temperature schedule: starts at 1 and grows geometrically.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnnealState {
    beta: f64,
}

impl AnnealState {
    pub fn new() -> Self {
        Self { beta: 1.0 }
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    /// Multiply `beta` by `(1 + epsilon)`.
    pub fn advance(&mut self, epsilon: f64) {
        self.beta *= 1.0 + epsilon;
    }
}

impl Default for AnnealState {
    fn default() -> Self {
        Self::new()
    }
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for (x, y) in a.iter().zip(b) {
        let d = x - y;
        s += d * d;
    }
    s.sqrt()
}

fn norm_sq(a: &[f64]) -> f64 {
    a.iter().map(|x| x * x).sum()
}

fn dist_sq(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for (x, y) in a.iter().zip(b) {
        let d = x - y;
        s += d * d;
    }
    s
}

/// Log density of an isotropic Gaussian centered at `mean`.
fn log_iso_gaussian(x: &[f64], mean: &[f64], sigma: f64) -> f64 {
    let d = x.len() as f64;
    -0.5 * d * (2.0 * std::f64::consts::PI * sigma * sigma).ln()
        - dist_sq(x, mean) / (2.0 * sigma * sigma)
}

/// Draw all user and item points from their zero-mean Gaussian priors.
pub fn sample_prior<R: Rng>(
    config: &SamplerConfig,
    users: usize,
    items: usize,
    rng: &mut R,
) -> Embedding {
    let nu = Normal::new(0.0, config.sigma_u).expect("finite sigma_u");
    let ng = Normal::new(0.0, config.sigma_g).expect("finite sigma_g");
    let mut emb = Embedding::zeros(config.dim, users, items);
    for x in emb.users.iter_mut() {
        *x = nu.sample(rng);
    }
    for x in emb.items.iter_mut() {
        *x = ng.sample(rng);
    }
    emb
}

/// Log transition gain for moving user `i` to `proposed`.
///
/// The proposal-density ratio is computed as such (it vanishes for the
/// symmetric Gaussian proposal but keeps the expression correct for
/// asymmetric ones); the prior and likelihood ratios are scaled by `beta`.
pub fn log_gain_user(
    i: usize,
    proposed: &[f64],
    emb: &Embedding,
    matrix: &RatingMatrix,
    func: &RatingFunction,
    config: &SamplerConfig,
    beta: f64,
) -> f64 {
    let current = emb.user(i);
    let q_term = log_iso_gaussian(current, proposed, config.sigma_qu)
        - log_iso_gaussian(proposed, current, config.sigma_qu);
    let prior_term =
        (norm_sq(current) - norm_sq(proposed)) / (2.0 * config.sigma_u * config.sigma_u);
    let inv_two_sr2 = 1.0 / (2.0 * config.sigma_r * config.sigma_r);
    let mut like_term = 0.0;
    for &(j, r) in matrix.ratings_of_user(i) {
        let g = emb.item(j);
        let e_old = r - func.value(euclidean(current, g));
        let e_new = r - func.value(euclidean(proposed, g));
        like_term += (e_old * e_old - e_new * e_new) * inv_two_sr2;
    }
    q_term + beta * (prior_term + like_term)
}

/// Log transition gain for moving item `j` to `proposed`; mirrors
/// [`log_gain_user`] over the item's observed ratings.
pub fn log_gain_item(
    j: usize,
    proposed: &[f64],
    emb: &Embedding,
    matrix: &RatingMatrix,
    func: &RatingFunction,
    config: &SamplerConfig,
    beta: f64,
) -> f64 {
    let current = emb.item(j);
    let q_term = log_iso_gaussian(current, proposed, config.sigma_qg)
        - log_iso_gaussian(proposed, current, config.sigma_qg);
    let prior_term =
        (norm_sq(current) - norm_sq(proposed)) / (2.0 * config.sigma_g * config.sigma_g);
    let inv_two_sr2 = 1.0 / (2.0 * config.sigma_r * config.sigma_r);
    let mut like_term = 0.0;
    for &(i, r) in matrix.ratings_of_item(j) {
        let u = emb.user(i);
        let e_old = r - func.value(euclidean(u, current));
        let e_new = r - func.value(euclidean(u, proposed));
        like_term += (e_old * e_old - e_new * e_new) * inv_two_sr2;
    }
    q_term + beta * (prior_term + like_term)
}

/// One sampler step: pick one of the `m + n` points uniformly, propose a
/// Gaussian move, and accept or reject it in place. Returns whether the move
/// was accepted. A non-negative log gain always accepts; otherwise the gain
/// is compared against the log of a uniform draw.
pub fn mh_step<R: Rng>(
    emb: &mut Embedding,
    matrix: &RatingMatrix,
    func: &RatingFunction,
    config: &SamplerConfig,
    beta: f64,
    rng: &mut R,
) -> Result<bool, SamplerError> {
    let m = emb.user_count();
    let n = emb.item_count();
    let pick = rng.gen_range(0..m + n);
    let is_user = pick < m;
    let (current, sigma_q): (&[f64], f64) = if is_user {
        (emb.user(pick), config.sigma_qu)
    } else {
        (emb.item(pick - m), config.sigma_qg)
    };
    let step = Normal::new(0.0, sigma_q).expect("finite proposal sigma");
    let proposed: Vec<f64> = current.iter().map(|&c| c + step.sample(rng)).collect();

    let log_gain = if is_user {
        log_gain_user(pick, &proposed, emb, matrix, func, config, beta)
    } else {
        log_gain_item(pick - m, &proposed, emb, matrix, func, config, beta)
    };
    if log_gain.is_nan() {
        return Err(SamplerError::NonFiniteGain {
            kind: if is_user { "user" } else { "item" },
            index: if is_user { pick } else { pick - m },
        });
    }

    let accept = log_gain >= 0.0 || rng.gen::<f64>().ln() < log_gain;
    if accept {
        let target = if is_user {
            emb.user_mut(pick)
        } else {
            emb.item_mut(pick - m)
        };
        target.copy_from_slice(&proposed);
    }
    Ok(accept)
}

/// Translate all points so their mean is zero, then multiply by one scalar so
/// the mean squared deviation pooled over all points and coordinates is 1.
/// A single scalar (never a per-axis rescale) preserves distance ratios.
pub fn normalize(emb: &mut Embedding) -> Result<(), SamplerError> {
    let dim = emb.dim;
    let total = emb.user_count() + emb.item_count();
    if total < 2 {
        return Err(SamplerError::TooFewPoints);
    }
    let mut mean = vec![0.0f64; dim];
    for p in emb.users.chunks_exact(dim).chain(emb.items.chunks_exact(dim)) {
        for (acc, x) in mean.iter_mut().zip(p) {
            *acc += x;
        }
    }
    for acc in mean.iter_mut() {
        *acc /= total as f64;
    }
    let mut sq = 0.0f64;
    for p in emb.users.chunks_exact(dim).chain(emb.items.chunks_exact(dim)) {
        for (mu, x) in mean.iter().zip(p) {
            let d = x - mu;
            sq += d * d;
        }
    }
    let pooled = sq / (total * dim) as f64;
    if !(pooled > 0.0) || !pooled.is_finite() {
        return Err(SamplerError::ZeroVariance);
    }
    let scale = 1.0 / pooled.sqrt();
    for p in emb
        .users
        .chunks_exact_mut(dim)
        .chain(emb.items.chunks_exact_mut(dim))
    {
        for (x, mu) in p.iter_mut().zip(&mean) {
            *x = (*x - mu) * scale;
        }
    }
    Ok(())
}

/// Why an EM run ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    /// Relative training-SSE change fell below `stability_tol`.
    Stable,
    /// `max_em_iters` reached.
    MaxIterations,
    /// Wall-clock budget exhausted.
    Budget,
}

/// Per-EM-iteration diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmIteration {
    /// Inverse temperature used during this iteration's sampling.
    pub beta: f64,
    /// Training SSE of the previous rating function on this iteration's pool.
    pub sse_before: f64,
    /// Training SSE of the refitted rating function on the same pool.
    pub sse_after: f64,
    /// Fraction of proposals accepted during this iteration.
    pub acceptance_rate: f64,
}

/// Everything recorded about one EM run, config echo included.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config: SamplerConfig,
    pub users: usize,
    pub items: usize,
    pub ratings: usize,
    pub levels: usize,
    pub iterations: Vec<EmIteration>,
    pub final_thetas: Vec<f64>,
    pub stop: StopReason,
    /// Not serialized: reruns must produce byte-identical report files.
    #[serde(skip)]
    pub wall_secs: f64,
}

/// Result of an EM run: final positions, learned function, diagnostics.
#[derive(Debug, Clone)]
pub struct EmOutcome {
    pub embedding: Embedding,
    pub rating_function: RatingFunction,
    pub report: RunReport,
}

fn push_observed_pairs(out: &mut Vec<(f64, f64)>, emb: &Embedding, matrix: &RatingMatrix) {
    for e in matrix.entries() {
        out.push((emb.distance(e.user, e.item), e.rating));
    }
}

/// Run the full EM loop on a rating matrix.
///
/// Starts from prior draws, fits the initial rating function on that
/// configuration, then repeats: `burn_in + samples` sampler steps (saving the
/// `(distance, rating)` pairs of each post-burn-in configuration), an
/// annealing advance, and a refit on the pooled pairs. Stops on SSE
/// stability, the EM-iteration cap, or the wall-clock budget.
pub fn run_em(matrix: &RatingMatrix, config: &SamplerConfig) -> Result<EmOutcome, SamplerError> {
    config.validate()?;
    let levels = matrix.distinct_levels()?;
    if levels.len() < 2 {
        return Err(SamplerError::TooFewLevels(levels.len()));
    }
    let k = levels.len();
    let m = matrix.user_count();
    let n = matrix.item_count();

    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut emb = sample_prior(config, m, n, &mut rng);

    let mut pool: Vec<(f64, f64)> = Vec::with_capacity(config.samples * matrix.rating_count());
    push_observed_pairs(&mut pool, &emb, matrix);
    let mut func = RatingFunction::fit(&pool, k)?;

    let mut anneal = AnnealState::new();
    let mut iterations: Vec<EmIteration> = Vec::new();
    let mut prev_sse: Option<f64> = None;
    let steps = config.burn_in + config.samples;

    let stop = loop {
        if iterations.len() >= config.max_em_iters {
            break StopReason::MaxIterations;
        }
        if let Some(budget) = config.budget_secs {
            if started.elapsed().as_secs_f64() >= budget {
                break StopReason::Budget;
            }
        }

        let beta = anneal.beta();
        pool.clear();
        let mut accepted = 0usize;
        for step in 1..=steps {
            if mh_step(&mut emb, matrix, &func, config, beta, &mut rng)? {
                accepted += 1;
            }
            if step > config.burn_in {
                push_observed_pairs(&mut pool, &emb, matrix);
            }
            if step % config.normalize_stride == 0 {
                normalize(&mut emb)?;
            }
        }
        if config.anneal {
            anneal.advance(config.epsilon);
        }

        let sse_before = func.sse(&pool);
        func = RatingFunction::fit(&pool, k)?;
        let sse_after = func.sse(&pool);
        iterations.push(EmIteration {
            beta,
            sse_before,
            sse_after,
            acceptance_rate: accepted as f64 / steps as f64,
        });

        if let Some(prev) = prev_sse {
            let rel = (sse_after - prev).abs() / prev.abs().max(1e-12);
            if rel < config.stability_tol {
                break StopReason::Stable;
            }
        }
        prev_sse = Some(sse_after);
    };

    let report = RunReport {
        config: config.clone(),
        users: m,
        items: n,
        ratings: matrix.rating_count(),
        levels: k,
        iterations,
        final_thetas: func.thetas().to_vec(),
        stop,
        wall_secs: started.elapsed().as_secs_f64(),
    };
    Ok(EmOutcome {
        embedding: emb,
        rating_function: func,
        report,
    })
}
