//! K-means over 4-D feature points.
//!
//! Lloyd iterations from k-means++ seeds, best of `n_init` restarts. All
//! floating-point reductions run over fixed-size chunks that are combined in
//! chunk order, so results are bit-identical for any rayon pool size.

use std::collections::HashSet;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DIM: usize = 4;
pub type Point = [f64; DIM];

/// Points per reduction chunk. Fixed: changing it changes low-order bits.
const CHUNK: usize = 1024;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ClusterError {
    #[error("no points to cluster")]
    EmptyInput,
    #[error("k must be at least 1")]
    ZeroK,
    #[error("k = {k} exceeds the {distinct} distinct points available")]
    KExceedsDistinctPoints { k: usize, distinct: usize },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("assignment {index} is out of range for {k} centroids")]
    IndexOutOfRange { index: usize, k: usize },
    #[error("{points} points but {assignments} assignments")]
    LengthMismatch { points: usize, assignments: usize },
}

pub fn squared_distance(a: &Point, b: &Point) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nearest centroid; ties go to the lowest index.
pub fn nearest(point: &Point, centroids: &[Point]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.iter().enumerate() {
        let d = squared_distance(point, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

/// Per-feature z-score parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StandardizationParams {
    pub mean: Point,
    /// Population standard deviation; 1 for constant features.
    pub std: Point,
}

impl StandardizationParams {
    pub fn identity() -> Self {
        Self {
            mean: [0.0; DIM],
            std: [1.0; DIM],
        }
    }

    pub fn fit(points: &[Point]) -> Result<Self, ClusterError> {
        if points.is_empty() {
            return Err(ClusterError::EmptyInput);
        }
        let n = points.len() as f64;
        let mut mean = [0.0; DIM];
        let mut std = [1.0; DIM];
        for f in 0..DIM {
            let column = || points.iter().map(move |p| p[f]);
            let (lo, hi) = column().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), x| {
                (lo.min(x), hi.max(x))
            });
            mean[f] = column().sum::<f64>() / n;
            if lo < hi {
                let var = column().map(|x| (x - mean[f]) * (x - mean[f])).sum::<f64>() / n;
                std[f] = var.sqrt();
            } else {
                mean[f] = lo;
            }
        }
        Ok(Self { mean, std })
    }

    pub fn apply_one(&self, point: &Point) -> Point {
        std::array::from_fn(|f| (point[f] - self.mean[f]) / self.std[f])
    }

    pub fn apply(&self, points: &[Point]) -> Vec<Point> {
        points.iter().map(|p| self.apply_one(p)).collect()
    }

    /// Maps a standardized point back to raw feature units.
    pub fn invert_one(&self, point: &Point) -> Point {
        std::array::from_fn(|f| point[f] * self.std[f] + self.mean[f])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KMeansConfig {
    pub k: usize,
    pub seed: u64,
    pub n_init: usize,
    pub max_iter: usize,
    /// Convergence threshold on the largest centroid displacement.
    pub tol: f64,
}

impl KMeansConfig {
    pub const DEFAULT_N_INIT: usize = 10;
    pub const DEFAULT_MAX_ITER: usize = 300;
    pub const DEFAULT_TOL: f64 = 1e-4;

    pub fn new(k: usize, seed: u64) -> Self {
        Self {
            k,
            seed,
            n_init: Self::DEFAULT_N_INIT,
            max_iter: Self::DEFAULT_MAX_ITER,
            tol: Self::DEFAULT_TOL,
        }
    }

    pub fn with_k(mut self, k: usize) -> Self {
        self.k = k;
        self
    }

    fn validate(&self) -> Result<(), ClusterError> {
        if self.k == 0 {
            return Err(ClusterError::ZeroK);
        }
        if self.n_init == 0 {
            return Err(ClusterError::InvalidParameter(
                "n_init must be at least 1".into(),
            ));
        }
        if self.max_iter == 0 {
            return Err(ClusterError::InvalidParameter(
                "max_iter must be at least 1".into(),
            ));
        }
        if self.tol.is_nan() || self.tol < 0.0 {
            return Err(ClusterError::InvalidParameter(format!(
                "tol must be non-negative, got {}",
                self.tol
            )));
        }
        Ok(())
    }
}

/// Result of one k-means fit in the space the points were given in.
#[derive(Debug, Clone, PartialEq)]
pub struct KMeansFit {
    pub centroids: Vec<Point>,
    pub assignments: Vec<usize>,
    pub wcss: f64,
    pub iterations_run: usize,
    pub converged: bool,
    /// WCSS after each (assign, update) step.
    pub wcss_history: Vec<f64>,
}

pub fn count_distinct(points: &[Point]) -> usize {
    let key = |p: &Point| p.map(|x| if x == 0.0 { 0u64 } else { x.to_bits() });
    points.iter().map(key).collect::<HashSet<_>>().len()
}

fn check_points(points: &[Point], k: usize) -> Result<(), ClusterError> {
    if points.is_empty() {
        return Err(ClusterError::EmptyInput);
    }
    if points.iter().flatten().any(|x| !x.is_finite()) {
        return Err(ClusterError::InvalidParameter(
            "points must be finite".into(),
        ));
    }
    let distinct = count_distinct(points);
    if k > distinct {
        return Err(ClusterError::KExceedsDistinctPoints { k, distinct });
    }
    Ok(())
}

/// Seeds for the `n_init` restarts, drawn from one master stream.
fn restart_seeds(seed: u64, n_init: usize) -> Vec<u64> {
    let mut master = ChaCha8Rng::seed_from_u64(seed);
    (0..n_init).map(|_| master.next_u64()).collect()
}

/// Best-of-`n_init` k-means with k-means++ seeding.
pub fn kmeans_fit(points: &[Point], config: &KMeansConfig) -> Result<KMeansFit, ClusterError> {
    config.validate()?;
    check_points(points, config.k)?;
    let runs: Vec<KMeansFit> = restart_seeds(config.seed, config.n_init)
        .into_par_iter()
        .map(|seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let init = kmeans_plus_plus(points, config.k, &mut rng);
            lloyd(points, init, config.max_iter, config.tol)
        })
        .collect();
    Ok(best_of(runs))
}

/// Lloyd iterations from caller-chosen initial centroids.
pub fn kmeans_fit_from(
    points: &[Point],
    initial: Vec<Point>,
    max_iter: usize,
    tol: f64,
) -> Result<KMeansFit, ClusterError> {
    KMeansConfig {
        k: initial.len(),
        seed: 0,
        n_init: 1,
        max_iter,
        tol,
    }
    .validate()?;
    check_points(points, initial.len())?;
    Ok(lloyd(points, initial, max_iter, tol))
}

fn best_of(runs: impl IntoIterator<Item = KMeansFit>) -> KMeansFit {
    runs.into_iter()
        .reduce(|best, run| if run.wcss < best.wcss { run } else { best })
        .expect("at least one run")
}

fn kmeans_plus_plus(points: &[Point], k: usize, rng: &mut ChaCha8Rng) -> Vec<Point> {
    let n = points.len();
    let mut centroids = Vec::with_capacity(k);
    centroids.push(points[rng.random_range(0..n)]);
    let mut d2: Vec<f64> = points
        .iter()
        .map(|p| squared_distance(p, &centroids[0]))
        .collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let target = rng.random::<f64>() * total;
        let mut acc = 0.0;
        let mut pick = None;
        for (i, &d) in d2.iter().enumerate() {
            if d > 0.0 {
                pick = Some(i);
                acc += d;
                if acc > target {
                    break;
                }
            }
        }
        // k <= distinct points guarantees some positive distance remains.
        let chosen = points[pick.expect("a point away from every centroid")];
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(squared_distance(p, &chosen));
        }
        centroids.push(chosen);
    }
    centroids
}

/// Assigns every point to its nearest centroid; returns whether anything moved.
fn assign(points: &[Point], centroids: &[Point], assignments: &mut [usize]) -> bool {
    points
        .par_chunks(CHUNK)
        .zip(assignments.par_chunks_mut(CHUNK))
        .map(|(ps, out)| {
            let mut changed = false;
            for (p, a) in ps.iter().zip(out.iter_mut()) {
                let j = nearest(p, centroids).0;
                changed |= *a != j;
                *a = j;
            }
            changed
        })
        .reduce(|| false, |a, b| a || b)
}

/// Per-cluster coordinate sums and member counts.
fn accumulate(points: &[Point], assignments: &[usize], k: usize) -> (Vec<Point>, Vec<usize>) {
    let partials: Vec<(Vec<Point>, Vec<usize>)> = points
        .par_chunks(CHUNK)
        .zip(assignments.par_chunks(CHUNK))
        .map(|(ps, asg)| {
            let mut sums = vec![[0.0; DIM]; k];
            let mut counts = vec![0usize; k];
            for (p, &a) in ps.iter().zip(asg) {
                counts[a] += 1;
                for f in 0..DIM {
                    sums[a][f] += p[f];
                }
            }
            (sums, counts)
        })
        .collect();
    let mut sums = vec![[0.0; DIM]; k];
    let mut counts = vec![0usize; k];
    for (ps, cs) in partials {
        for j in 0..k {
            counts[j] += cs[j];
            for f in 0..DIM {
                sums[j][f] += ps[j][f];
            }
        }
    }
    (sums, counts)
}

fn wcss_unchecked(points: &[Point], centroids: &[Point], assignments: &[usize]) -> f64 {
    let partials: Vec<f64> = points
        .par_chunks(CHUNK)
        .zip(assignments.par_chunks(CHUNK))
        .map(|(ps, asg)| {
            ps.iter()
                .zip(asg)
                .map(|(p, &a)| squared_distance(p, &centroids[a]))
                .sum::<f64>()
        })
        .collect();
    partials.into_iter().sum()
}

/// Sum of squared distances from each point to its assigned centroid.
pub fn wcss(
    points: &[Point],
    centroids: &[Point],
    assignments: &[usize],
) -> Result<f64, ClusterError> {
    if points.len() != assignments.len() {
        return Err(ClusterError::LengthMismatch {
            points: points.len(),
            assignments: assignments.len(),
        });
    }
    if let Some(&index) = assignments.iter().find(|&&a| a >= centroids.len()) {
        return Err(ClusterError::IndexOutOfRange {
            index,
            k: centroids.len(),
        });
    }
    Ok(wcss_unchecked(points, centroids, assignments))
}

/// Moves the point farthest from its current centroid into each empty
/// cluster. Donor clusters always keep at least one member.
fn repair_empty(
    points: &[Point],
    centroids: &[Point],
    assignments: &mut [usize],
    counts: &mut [usize],
    sums: &mut [Point],
) {
    let empty: Vec<usize> = (0..counts.len()).filter(|&j| counts[j] == 0).collect();
    if empty.is_empty() {
        return;
    }
    let mut moved = vec![false; points.len()];
    for j in empty {
        let mut best: Option<(usize, f64)> = None;
        for (i, p) in points.iter().enumerate() {
            let a = assignments[i];
            if moved[i] || counts[a] < 2 {
                continue;
            }
            let d = squared_distance(p, &centroids[a]);
            if best.is_none_or(|(_, bd)| d > bd) {
                best = Some((i, d));
            }
        }
        let (i, _) = best.expect("k <= n leaves a donor cluster");
        let from = assignments[i];
        counts[from] -= 1;
        counts[j] += 1;
        for f in 0..DIM {
            sums[from][f] -= points[i][f];
            sums[j][f] += points[i][f];
        }
        assignments[i] = j;
        moved[i] = true;
    }
}

fn lloyd(points: &[Point], mut centroids: Vec<Point>, max_iter: usize, tol: f64) -> KMeansFit {
    let k = centroids.len();
    let mut assignments = vec![0usize; points.len()];
    assign(points, &centroids, &mut assignments);
    let mut history = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    loop {
        let (mut sums, mut counts) = accumulate(points, &assignments, k);
        repair_empty(points, &centroids, &mut assignments, &mut counts, &mut sums);
        let mut shift: f64 = 0.0;
        for j in 0..k {
            let mean: Point = std::array::from_fn(|f| sums[j][f] / counts[j] as f64);
            shift = shift.max(squared_distance(&mean, &centroids[j]).sqrt());
            centroids[j] = mean;
        }
        iterations += 1;
        history.push(wcss_unchecked(points, &centroids, &assignments));
        if shift <= tol {
            converged = true;
            break;
        }
        if iterations == max_iter {
            break;
        }
        if !assign(points, &centroids, &mut assignments) {
            converged = true;
            break;
        }
    }
    KMeansFit {
        wcss: *history.last().expect("at least one iteration"),
        centroids,
        assignments,
        iterations_run: iterations,
        converged,
        wcss_history: history,
    }
}

/// A fitted model: centroids in the standardized space plus the scaling that
/// maps raw feature vectors into it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KMeansModel {
    pub k: usize,
    pub centroids: Vec<Point>,
    pub standardized: bool,
    pub standardization: StandardizationParams,
    pub seed: u64,
    pub n_init: usize,
    pub max_iter: usize,
    pub tol: f64,
    pub iterations_run: usize,
    pub converged: bool,
    pub wcss: f64,
}

impl KMeansModel {
    pub fn from_fit(fit: &KMeansFit, config: &KMeansConfig, scaling: Scaling) -> Self {
        Self {
            k: fit.centroids.len(),
            centroids: fit.centroids.clone(),
            standardized: scaling.enabled,
            standardization: scaling.params,
            seed: config.seed,
            n_init: config.n_init,
            max_iter: config.max_iter,
            tol: config.tol,
            iterations_run: fit.iterations_run,
            converged: fit.converged,
            wcss: fit.wcss,
        }
    }

    pub fn raw_centroids(&self) -> Vec<Point> {
        self.centroids
            .iter()
            .map(|c| self.standardization.invert_one(c))
            .collect()
    }
}

/// Whether and how raw features are scaled before clustering.
#[derive(Debug, Clone, PartialEq)]
pub struct Scaling {
    pub enabled: bool,
    pub params: StandardizationParams,
}

impl Scaling {
    pub fn fit(raw: &[Point], enabled: bool) -> Result<Self, ClusterError> {
        let params = if enabled {
            StandardizationParams::fit(raw)?
        } else if raw.is_empty() {
            return Err(ClusterError::EmptyInput);
        } else {
            StandardizationParams::identity()
        };
        Ok(Self { enabled, params })
    }

    pub fn apply(&self, raw: &[Point]) -> Vec<Point> {
        self.params.apply(raw)
    }
}

/// Scales raw points and fits a model on them.
pub fn fit_model(
    raw: &[Point],
    config: &KMeansConfig,
    standardize: bool,
) -> Result<(KMeansModel, Vec<usize>), ClusterError> {
    let scaling = Scaling::fit(raw, standardize)?;
    let fit = kmeans_fit(&scaling.apply(raw), config)?;
    let model = KMeansModel::from_fit(&fit, config, scaling);
    Ok((model, fit.assignments))
}

/// Assigns raw points to the nearest model centroid after scaling.
pub fn kmeans_predict(model: &KMeansModel, raw: &[Point]) -> Vec<usize> {
    raw.par_iter()
        .map(|p| nearest(&model.standardization.apply_one(p), &model.centroids).0)
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ElbowPoint {
    pub k: usize,
    pub wcss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ElbowCurve {
    pub points: Vec<ElbowPoint>,
    pub selected_k: usize,
}

impl ElbowCurve {
    /// Picks the interior k with the largest second difference of log WCSS,
    /// `ln w(k-1) - 2 ln w(k) + ln w(k+1)`: the k after which the relative
    /// reduction falls off most sharply. Ties (within 1e-12) go to the smaller
    /// k; curves with no interior point select the first k. WCSS values are
    /// floored at 1e-12 of the curve maximum so exact fits stay finite.
    pub fn from_points(points: Vec<ElbowPoint>) -> Self {
        let top = points.iter().map(|p| p.wcss).fold(0.0, f64::max);
        let floor = if top > 0.0 {
            top * 1e-12
        } else {
            f64::MIN_POSITIVE
        };
        let log = |w: f64| w.max(floor).ln();
        let mut selected = points.first().map_or(0, |p| p.k);
        let mut best = f64::NEG_INFINITY;
        for w in points.windows(3) {
            let second = log(w[0].wcss) - 2.0 * log(w[1].wcss) + log(w[2].wcss);
            if second > best + 1e-12 {
                best = second;
                selected = w[1].k;
            }
        }
        Self {
            points,
            selected_k: selected,
        }
    }
}

/// Elbow search output: the curve and the winning fit for every k.
#[derive(Debug, Clone)]
pub struct ElbowSearch {
    pub curve: ElbowCurve,
    pub fits: Vec<(usize, KMeansFit)>,
}

impl ElbowSearch {
    pub fn fit_for(&self, k: usize) -> Option<&KMeansFit> {
        self.fits.iter().find(|(kk, _)| *kk == k).map(|(_, f)| f)
    }
}

/// Fits every k in `k_min..=k_max` and selects the knee.
///
/// Each k runs the usual `n_init` k-means++ restarts with the shared seed,
/// plus one extra candidate started from the best (k-1) centroids and the
/// point farthest from them. That candidate can only lower WCSS relative to
/// k-1, so the curve is non-increasing.
pub fn elbow_curve(
    points: &[Point],
    k_min: usize,
    k_max: usize,
    config: &KMeansConfig,
) -> Result<ElbowSearch, ClusterError> {
    if k_min == 0 {
        return Err(ClusterError::ZeroK);
    }
    if k_min > k_max {
        return Err(ClusterError::InvalidParameter(format!(
            "k_min {k_min} exceeds k_max {k_max}"
        )));
    }
    let mut fits: Vec<(usize, KMeansFit)> = Vec::new();
    for k in k_min..=k_max {
        let cfg = config.with_k(k);
        let mut fit = kmeans_fit(points, &cfg)?;
        if let Some((_, prev)) = fits.last() {
            let mut init = prev.centroids.clone();
            init.push(farthest_point(points, prev));
            let warm = lloyd(points, init, cfg.max_iter, cfg.tol);
            if warm.wcss < fit.wcss {
                fit = warm;
            }
        }
        fits.push((k, fit));
    }
    let curve = ElbowCurve::from_points(
        fits.iter()
            .map(|(k, f)| ElbowPoint {
                k: *k,
                wcss: f.wcss,
            })
            .collect(),
    );
    Ok(ElbowSearch { curve, fits })
}

fn farthest_point(points: &[Point], fit: &KMeansFit) -> Point {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, (p, &a)) in points.iter().zip(&fit.assignments).enumerate() {
        let d = squared_distance(p, &fit.centroids[a]);
        if d > best.1 {
            best = (i, d);
        }
    }
    points[best.0]
}
