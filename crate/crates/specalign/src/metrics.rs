//! Evaluation measures: Grassmann subspace distance, orthogonality defect,
//! clustering agreement (NMI / ACC with optimal assignment), K-means and a
//! linear probe.
//!
//! Grassmann distance compares embeddings as subspaces, so any invertible
//! recombination of the columns is invisible to it:
//!
//! ```
//! use ndarray::Array2;
//! use specalign::metrics::grassmann_distance;
//!
//! let y = Array2::from_shape_fn((40, 3), |(i, j)| ((i * 7 + j * 3) as f64).sin());
//! // Mixing the columns by an invertible matrix does not move the subspace.
//! let m = ndarray::array![[2.0, 0.1, 0.0], [0.3, 1.0, 0.0], [0.0, -0.2, 0.5]];
//! let ym = y.dot(&m);
//! assert!(grassmann_distance(&y, &ym).unwrap() < 1e-10);
//! ```
//!
//! NMI and ACC are invariant to label renaming:
//!
//! ```
//! use specalign::metrics::{acc, nmi};
//!
//! let truth = vec![0, 0, 1, 1, 2, 2];
//! let flipped = vec![2, 2, 0, 0, 1, 1]; // same partition, renamed
//! assert!((nmi(&truth, &flipped).unwrap() - 1.0).abs() < 1e-12);
//! assert!((acc(&truth, &flipped).unwrap() - 1.0).abs() < 1e-12);
//! ```

use nalgebra::DMatrix;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::{self, MlpSpec};

/// Fixed-order evaluation summary.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub grassmann: f64,
    pub orth_defect: f64,
    pub nmi: f64,
    pub acc: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub probe_accuracy: Option<f64>,
    pub k: usize,
    pub n: usize,
    pub seed: u64,
}

impl MetricsReport {
    /// Fixed-order human-readable table.
    pub fn render_table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("grassmann_distance   {:.6}\n", self.grassmann));
        out.push_str(&format!("orthogonality_defect {:.6}\n", self.orth_defect));
        out.push_str(&format!("nmi                  {:.6}\n", self.nmi));
        out.push_str(&format!("acc                  {:.6}\n", self.acc));
        if let Some(p) = self.probe_accuracy {
            out.push_str(&format!("probe_accuracy       {p:.6}\n"));
        }
        out
    }
}

/// Orthonormal basis of a matrix's column span via QR; errors on rank
/// deficiency.
fn orthonormal_basis(y: &Array2<f64>) -> Result<DMatrix<f64>> {
    let n = y.nrows();
    let k = y.ncols();
    if n < k {
        return Err(Error::Precondition(format!("{n} rows for {k} columns")));
    }
    let m = DMatrix::from_fn(n, k, |i, j| y[[i, j]]);
    let scale = m.iter().map(|v| v.abs()).fold(0.0f64, f64::max);
    if scale == 0.0 {
        return Err(Error::DegenerateGeometry("zero matrix has no column span".into()));
    }
    let qr = m.qr();
    let r = qr.r();
    let tol = scale * 1e-10 * (n as f64);
    for i in 0..k {
        if r[(i, i)].abs() < tol {
            return Err(Error::DegenerateGeometry(format!(
                "rank-deficient subspace matrix (R[{i},{i}] = {:.3e})",
                r[(i, i)]
            )));
        }
    }
    Ok(qr.q())
}

/// Squared projection-metric Grassmann distance between the column spans
/// of two n x K matrices: K minus the sum of squared principal cosines.
///
/// Inputs are orthonormalized internally, so raw network outputs are fine.
pub fn grassmann_distance(y1: &Array2<f64>, y2: &Array2<f64>) -> Result<f64> {
    if y1.dim() != y2.dim() {
        return Err(Error::Shape(format!(
            "{:?} vs {:?}",
            y1.dim(),
            y2.dim()
        )));
    }
    let k = y1.ncols();
    let q1 = orthonormal_basis(y1)?;
    let q2 = orthonormal_basis(y2)?;
    let cross = q1.transpose() * q2;
    let svd = cross.svd(false, false);
    let sum_cos2: f64 = svd
        .singular_values
        .iter()
        .map(|&s| s.clamp(0.0, 1.0).powi(2))
        .sum();
    Ok((k as f64 - sum_cos2).max(0.0))
}

/// Scales every row to unit norm (rows with negligible norm are left
/// untouched).
///
/// Spectral-clustering convention for K-means on eigenvector coordinates:
/// it removes the degree scaling that stretches clusters into rays
/// through the origin.
pub fn row_normalize(y: &Array2<f64>) -> Array2<f64> {
    let mut out = y.clone();
    for mut row in out.rows_mut() {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 1e-12 {
            row.mapv_inplace(|v| v / norm);
        }
    }
    out
}

/// ||Y^T Y - I||_F^2 after scaling each column to unit norm.
///
/// Column normalization makes the defect attainable (and comparable) for
/// network output over a test set of arbitrary size.
pub fn orthogonality_defect(y: &Array2<f64>) -> Result<f64> {
    let n = y.nrows();
    let k = y.ncols();
    if n < k {
        return Err(Error::Precondition(format!("{n} rows for {k} columns")));
    }
    let mut normed = y.clone();
    for mut col in normed.columns_mut() {
        let norm = col.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(Error::DegenerateGeometry("zero column".into()));
        }
        col.mapv_inplace(|v| v / norm);
    }
    let gram = normed.t().dot(&normed);
    let mut defect = 0.0;
    for i in 0..k {
        for j in 0..k {
            let want = if i == j { 1.0 } else { 0.0 };
            defect += (gram[[i, j]] - want).powi(2);
        }
    }
    Ok(defect)
}

/// Lloyd's algorithm with distance-weighted (k-means++) seeding, best of
/// `restarts` runs by within-cluster sum of squares. Deterministic under
/// the seed; ties go to the lowest restart index.
pub fn kmeans(coords: &Array2<f64>, clusters: usize, restarts: usize, seed: u64) -> Result<Vec<usize>> {
    let n = coords.nrows();
    if clusters == 0 || clusters > n {
        return Err(Error::Size(format!("{clusters} clusters for {n} points")));
    }
    if restarts == 0 {
        return Err(Error::Config("need at least one restart".into()));
    }
    let mut best: Option<(f64, Vec<usize>)> = None;
    for r in 0..restarts {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(r as u64));
        let (labels, wss) = lloyd_once(coords, clusters, &mut rng);
        if best.as_ref().map_or(true, |(b, _)| wss < *b) {
            best = Some((wss, labels));
        }
    }
    Ok(best.unwrap().1)
}

fn lloyd_once<R: Rng>(coords: &Array2<f64>, clusters: usize, rng: &mut R) -> (Vec<usize>, f64) {
    let n = coords.nrows();
    let d = coords.ncols();
    let sq_dist = |i: usize, center: &[f64]| -> f64 {
        (0..d).map(|j| (coords[[i, j]] - center[j]).powi(2)).sum()
    };

    // k-means++ seeding
    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(clusters);
    let first = rng.gen_range(0..n);
    centers.push(coords.row(first).to_vec());
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(i, &centers[0])).collect();
    while centers.len() < clusters {
        let total: f64 = d2.iter().sum();
        let pick = if total <= 0.0 {
            rng.gen_range(0..n)
        } else {
            let mut target = rng.gen::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                target -= w;
                if target <= 0.0 {
                    chosen = i;
                    break;
                }
            }
            chosen
        };
        centers.push(coords.row(pick).to_vec());
        for i in 0..n {
            d2[i] = d2[i].min(sq_dist(i, centers.last().unwrap()));
        }
    }

    let mut labels = vec![0usize; n];
    for _ in 0..100 {
        let mut changed = false;
        for i in 0..n {
            let mut best_c = 0;
            let mut best_d = f64::INFINITY;
            for (c, center) in centers.iter().enumerate() {
                let dd = sq_dist(i, center);
                if dd < best_d {
                    best_d = dd;
                    best_c = c;
                }
            }
            if labels[i] != best_c {
                labels[i] = best_c;
                changed = true;
            }
        }
        // recompute centers; empty clusters reseed from the farthest point
        let mut sums = vec![vec![0.0; d]; clusters];
        let mut counts = vec![0usize; clusters];
        for i in 0..n {
            counts[labels[i]] += 1;
            for j in 0..d {
                sums[labels[i]][j] += coords[[i, j]];
            }
        }
        for c in 0..clusters {
            if counts[c] == 0 {
                let far = (0..n)
                    .max_by(|&a, &b| {
                        sq_dist(a, &centers[labels[a]])
                            .partial_cmp(&sq_dist(b, &centers[labels[b]]))
                            .unwrap()
                    })
                    .unwrap();
                centers[c] = coords.row(far).to_vec();
                labels[far] = c;
                changed = true;
            } else {
                for j in 0..d {
                    centers[c][j] = sums[c][j] / counts[c] as f64;
                }
            }
        }
        if !changed {
            break;
        }
    }
    let wss: f64 = (0..n).map(|i| sq_dist(i, &centers[labels[i]])).sum();
    (labels, wss)
}

/// Minimum-cost perfect assignment on a square cost matrix (Jonker-style
/// potentials formulation, O(n^3)). Returns `perm` with `perm[row] = col`.
pub fn kuhn_munkres(cost: &Array2<f64>) -> Result<Vec<usize>> {
    let n = cost.nrows();
    if cost.ncols() != n {
        return Err(Error::Shape(format!("cost matrix is {n} x {}", cost.ncols())));
    }
    if n == 0 {
        return Ok(Vec::new());
    }
    if !cost.iter().all(|v| v.is_finite()) {
        return Err(Error::Precondition("non-finite cost entry".into()));
    }
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut assigned_row = vec![0usize; n + 1]; // column -> row (1-based, 0 = free)
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        assigned_row[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = assigned_row[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[[i0 - 1, j - 1]] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[assigned_row[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if assigned_row[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            assigned_row[j0] = assigned_row[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut perm = vec![0usize; n];
    for j in 1..=n {
        perm[assigned_row[j] - 1] = j - 1;
    }
    Ok(perm)
}

/// Normalized mutual information I(c, c_hat) / max(H(c), H(c_hat)) with
/// natural-log entropies; 1 when both partitions are single-cluster.
pub fn nmi(true_labels: &[usize], pred_labels: &[usize]) -> Result<f64> {
    if true_labels.len() != pred_labels.len() {
        return Err(Error::Shape("label length mismatch".into()));
    }
    if true_labels.is_empty() {
        return Err(Error::Size("empty label vectors".into()));
    }
    let n = true_labels.len() as f64;
    let c1 = true_labels.iter().max().unwrap() + 1;
    let c2 = pred_labels.iter().max().unwrap() + 1;
    let mut joint = vec![vec![0.0f64; c2]; c1];
    let mut p1 = vec![0.0f64; c1];
    let mut p2 = vec![0.0f64; c2];
    for (&a, &b) in true_labels.iter().zip(pred_labels) {
        joint[a][b] += 1.0 / n;
        p1[a] += 1.0 / n;
        p2[b] += 1.0 / n;
    }
    let entropy = |p: &[f64]| -> f64 {
        p.iter().filter(|&&v| v > 0.0).map(|&v| -v * v.ln()).sum()
    };
    let h1 = entropy(&p1);
    let h2 = entropy(&p2);
    if h1 == 0.0 && h2 == 0.0 {
        return Ok(1.0);
    }
    let mut mi = 0.0;
    for a in 0..c1 {
        for b in 0..c2 {
            let pab = joint[a][b];
            if pab > 0.0 && p1[a] > 0.0 && p2[b] > 0.0 {
                mi += pab * (pab / (p1[a] * p2[b])).ln();
            }
        }
    }
    Ok((mi / h1.max(h2)).clamp(0.0, 1.0))
}

/// Unsupervised clustering accuracy: best label matching over the
/// confusion matrix via optimal assignment.
pub fn acc(true_labels: &[usize], pred_labels: &[usize]) -> Result<f64> {
    if true_labels.len() != pred_labels.len() {
        return Err(Error::Shape("label length mismatch".into()));
    }
    if true_labels.is_empty() {
        return Err(Error::Size("empty label vectors".into()));
    }
    let n = true_labels.len();
    let c1 = true_labels.iter().max().unwrap() + 1;
    let c2 = pred_labels.iter().max().unwrap() + 1;
    let c = c1.max(c2); // pad square
    let mut counts = Array2::zeros((c, c));
    for (&t, &p) in true_labels.iter().zip(pred_labels) {
        counts[[p, t]] += 1.0;
    }
    let perm = kuhn_munkres(&counts.mapv(|v: f64| -v))?;
    let matched: f64 = (0..c).map(|p| counts[[p, perm[p]]]).sum();
    Ok(matched / n as f64)
}

/// Training settings for the single-layer softmax probe.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub iterations: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            iterations: 500,
            lr: 0.1,
            seed: 0,
        }
    }
}

/// Trains a single fully-connected layer (no activation) with
/// cross-entropy on the train split and returns test accuracy.
pub fn linear_probe_accuracy(
    train_emb: &Array2<f64>,
    train_labels: &[usize],
    test_emb: &Array2<f64>,
    test_labels: &[usize],
    cfg: &ProbeConfig,
) -> Result<f64> {
    if train_emb.nrows() != train_labels.len() || test_emb.nrows() != test_labels.len() {
        return Err(Error::Shape("embedding/label length mismatch".into()));
    }
    let k = train_emb.ncols();
    if test_emb.ncols() != k {
        return Err(Error::Shape("train/test embedding width mismatch".into()));
    }
    let classes = train_labels
        .iter()
        .chain(test_labels)
        .max()
        .map(|m| m + 1)
        .unwrap_or(0);
    let spec = MlpSpec::new(vec![k, classes], cfg.seed)?;
    let mut probe = net::init(&spec);
    for _ in 0..cfg.iterations {
        let (logits, cache) = probe.forward(train_emb)?;
        let (_, gy) = net::cross_entropy_loss_grad(&logits, train_labels)?;
        let grads = probe.backward(&cache, &gy)?;
        probe.step(&grads, cfg.lr)?;
    }
    let logits = probe.infer(test_emb)?;
    let mut correct = 0usize;
    for (i, &label) in test_labels.iter().enumerate() {
        let pred = logits
            .row(i)
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        if pred == label {
            correct += 1;
        }
    }
    Ok(correct as f64 / test_labels.len() as f64)
}

/// All permutations of `0..n`, for brute-force oracles in tests.
#[doc(hidden)]
pub fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![Vec::new()];
    }
    let mut out = Vec::new();
    for sub in permutations(n - 1) {
        for pos in 0..=sub.len() {
            let mut p = sub.clone();
            p.insert(pos, n - 1);
            out.push(p);
        }
    }
    out
}
