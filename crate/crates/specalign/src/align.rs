//! Affine registration of batch embeddings onto a fixed reference frame.
//!
//! Eigenvector embeddings of different graph samples differ by sign flips,
//! rotations and mild scale/translation. Those degrees of freedom are
//! absorbed by a K x (K+1) affine map acting on homogeneous coordinates,
//! fitted over the anchor nodes shared by every batch.
//!
//! ```
//! use ndarray::array;
//! use specalign::align::fit_affine;
//!
//! // A planted map: rotate 90 degrees and shift.
//! let src = array![[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [1.0, 1.0]];
//! let dst = array![[1.0, 2.0], [1.0, 3.0], [0.0, 2.0], [0.0, 3.0]];
//! let fit = fit_affine(&src, &dst).unwrap();
//! assert!(fit.residual_rmse < 1e-10);
//!
//! let mapped = fit.map.transform_rows(&src).unwrap();
//! assert!((mapped[[1, 0]] - 1.0).abs() < 1e-10);
//! assert!((mapped[[1, 1]] - 3.0).abs() < 1e-10);
//! ```
//!
//! With corrupted correspondences, the robust variant recovers the map and
//! reports which anchors it trusted:
//!
//! ```
//! use ndarray::Array2;
//! use specalign::align::{fit_affine_ransac, RansacConfig};
//!
//! // 20 anchors following y = 2x + 1 in each coordinate, 4 corrupted.
//! let src = Array2::from_shape_fn((20, 2), |(i, j)| (i * 2 + j) as f64 * 0.1);
//! let mut dst = src.mapv(|v| 2.0 * v + 1.0);
//! for i in 0..4 {
//!     dst[[i, 0]] += 10.0 + i as f64;
//! }
//! let (fit, mask) = fit_affine_ransac(&src, &dst, &RansacConfig::default()).unwrap();
//! assert!(fit.residual_rmse < 1e-8);
//! assert_eq!(mask.iter().filter(|&&b| !b).count(), 4);
//! assert!(mask[..4].iter().all(|&b| !b));
//! ```

use log::warn;
use nalgebra::DMatrix;
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spectral::Embedding;

/// Residual above which a batch's distortion is poorly explained by an
/// affine model; fits past it are logged as warnings.
pub const RESIDUAL_WARN_THRESHOLD: f64 = 0.1;

/// K x (K+1) affine map on homogeneous embedding coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineMap {
    t: Array2<f64>,
}

impl AffineMap {
    pub fn new(t: Array2<f64>) -> Result<Self> {
        let k = t.nrows();
        if t.ncols() != k + 1 {
            return Err(Error::Shape(format!(
                "affine map must be K x (K+1), got {k} x {}",
                t.ncols()
            )));
        }
        if !t.iter().all(|v| v.is_finite()) {
            return Err(Error::Numeric("non-finite affine map entry".into()));
        }
        let map = Self { t };
        let det = map.linear_det();
        if det.abs() <= 1e-12 {
            return Err(Error::DegenerateGeometry(format!(
                "linear block is singular (|det| = {:.3e})",
                det.abs()
            )));
        }
        Ok(map)
    }

    pub fn identity(k: usize) -> Self {
        let mut t = Array2::zeros((k, k + 1));
        for i in 0..k {
            t[[i, i]] = 1.0;
        }
        Self { t }
    }

    pub fn k(&self) -> usize {
        self.t.nrows()
    }

    pub fn matrix(&self) -> &Array2<f64> {
        &self.t
    }

    /// Determinant of the K x K linear block.
    pub fn linear_det(&self) -> f64 {
        let k = self.k();
        DMatrix::from_fn(k, k, |i, j| self.t[[i, j]]).determinant()
    }

    /// Applies the map to each row of an n x K matrix.
    pub fn transform_rows(&self, coords: &Array2<f64>) -> Result<Array2<f64>> {
        let k = self.k();
        if coords.ncols() != k {
            return Err(Error::Shape(format!(
                "coords have {} columns, map expects {k}",
                coords.ncols()
            )));
        }
        let n = coords.nrows();
        let mut out = Array2::zeros((n, k));
        for i in 0..n {
            for r in 0..k {
                let mut v = self.t[[r, k]]; // translation
                for c in 0..k {
                    v += self.t[[r, c]] * coords[[i, c]];
                }
                out[[i, r]] = v;
            }
        }
        Ok(out)
    }

    /// `self` after `other`: (self . other)(x) = self(other(x)).
    pub fn compose(&self, other: &AffineMap) -> Result<AffineMap> {
        let k = self.k();
        if other.k() != k {
            return Err(Error::Shape("composing maps of different K".into()));
        }
        let mut t = Array2::zeros((k, k + 1));
        for r in 0..k {
            for c in 0..k {
                let mut v = 0.0;
                for m in 0..k {
                    v += self.t[[r, m]] * other.t[[m, c]];
                }
                t[[r, c]] = v;
            }
            let mut b = self.t[[r, k]];
            for m in 0..k {
                b += self.t[[r, m]] * other.t[[m, k]];
            }
            t[[r, k]] = b;
        }
        AffineMap::new(t)
    }

    /// Max absolute deviation from the identity map.
    pub fn deviation_from_identity(&self) -> f64 {
        let k = self.k();
        let mut dev: f64 = 0.0;
        for r in 0..k {
            for c in 0..=k {
                let want = if r == c { 1.0 } else { 0.0 };
                dev = dev.max((self.t[[r, c]] - want).abs());
            }
        }
        dev
    }
}

// JSON form: row-major nested arrays, reproducibility artifact
impl Serialize for AffineMap {
    fn serialize<S: serde::Serializer>(&self, ser: S) -> std::result::Result<S::Ok, S::Error> {
        let rows: Vec<Vec<f64>> = (0..self.t.nrows())
            .map(|i| self.t.row(i).to_vec())
            .collect();
        rows.serialize(ser)
    }
}

impl<'de> Deserialize<'de> for AffineMap {
    fn deserialize<D: serde::Deserializer<'de>>(de: D) -> std::result::Result<Self, D::Error> {
        let rows: Vec<Vec<f64>> = Vec::deserialize(de)?;
        let k = rows.len();
        let mut t = Array2::zeros((k, k + 1));
        for (i, row) in rows.iter().enumerate() {
            if row.len() != k + 1 {
                return Err(serde::de::Error::custom("affine map row of wrong width"));
            }
            for (j, &v) in row.iter().enumerate() {
                t[[i, j]] = v;
            }
        }
        AffineMap::new(t).map_err(serde::de::Error::custom)
    }
}

/// The frozen anchor reference: which nodes anchor the frame and where
/// they live in the reference embedding.
#[derive(Debug, Clone)]
pub struct AnchorFrame {
    pub anchor_ids: Vec<usize>,
    pub ref_coords: Array2<f64>,
}

impl AnchorFrame {
    pub fn new(anchor_ids: Vec<usize>, ref_coords: Array2<f64>) -> Result<Self> {
        let l = anchor_ids.len();
        let k = ref_coords.ncols();
        if ref_coords.nrows() != l {
            return Err(Error::Shape(format!(
                "{l} anchor ids for {} reference rows",
                ref_coords.nrows()
            )));
        }
        if l < k + 1 {
            return Err(Error::Precondition(format!(
                "need at least K+1 = {} anchors, got {l}",
                k + 1
            )));
        }
        let mut sorted = anchor_ids.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != l {
            return Err(Error::Precondition("duplicate anchor ids".into()));
        }
        Ok(Self {
            anchor_ids,
            ref_coords,
        })
    }

    pub fn k(&self) -> usize {
        self.ref_coords.ncols()
    }
}

/// A fitted map together with its anchor RMSE.
#[derive(Debug, Clone)]
pub struct AffineFit {
    pub map: AffineMap,
    /// Root-mean-square anchor registration error of the fit.
    pub residual_rmse: f64,
}

/// Least-squares fit of the map sending `src` rows onto `dst` rows,
/// solved by singular value decomposition of the homogeneous design
/// matrix (no normal equations).
pub fn fit_affine(src: &Array2<f64>, dst: &Array2<f64>) -> Result<AffineFit> {
    let l = src.nrows();
    let k = src.ncols();
    if dst.nrows() != l || dst.ncols() != k {
        return Err(Error::Shape(format!(
            "src is {l} x {k}, dst is {} x {}",
            dst.nrows(),
            dst.ncols()
        )));
    }
    if l < k + 1 {
        return Err(Error::Precondition(format!(
            "need at least K+1 = {} correspondences, got {l}",
            k + 1
        )));
    }
    // the geometry is degenerate when the anchors span less than K
    // affine dimensions (e.g. all collinear); test the centered sources
    let mut centered = DMatrix::from_fn(l, k, |i, j| src[[i, j]]);
    for j in 0..k {
        let mean = centered.column(j).mean();
        for i in 0..l {
            centered[(i, j)] -= mean;
        }
    }
    let c_svd = centered.svd(false, false);
    let c_max = c_svd.singular_values.max();
    let c_tol = c_max * 1e-10 * (l as f64);
    let c_rank = c_svd.singular_values.iter().filter(|&&s| s > c_tol).count();
    if c_rank < k {
        return Err(Error::DegenerateGeometry(format!(
            "anchors span only {c_rank} affine dimensions, need {k} (anchors collinear \
             or coincident in embedding space)"
        )));
    }

    // design matrix [src | 1], l x (K+1); the truncated minimum-norm SVD
    // solution tolerates a redundant intercept column (common when the
    // embedding coordinates already contain a near-constant direction)
    let x = DMatrix::from_fn(l, k + 1, |i, j| if j == k { 1.0 } else { src[[i, j]] });
    let rhs = DMatrix::from_fn(l, k, |i, j| dst[[i, j]]);
    let svd = x.clone().svd(true, true);
    let s_max = svd.singular_values.max();
    let rank_tol = s_max * 1e-12 * (l.max(k + 1) as f64);
    let solution = svd
        .solve(&rhs, rank_tol)
        .map_err(|e| Error::Numeric(e.to_string()))?; // (K+1) x K
    let t = Array2::from_shape_fn((k, k + 1), |(r, c)| solution[(c, r)]);
    let map = AffineMap::new(t)?;

    let pred = map.transform_rows(src)?;
    let mut sq = 0.0;
    for i in 0..l {
        for j in 0..k {
            sq += (dst[[i, j]] - pred[[i, j]]).powi(2);
        }
    }
    let residual_rmse = (sq / l as f64).sqrt();
    if residual_rmse > RESIDUAL_WARN_THRESHOLD {
        warn!("affine fit residual {residual_rmse:.4} exceeds {RESIDUAL_WARN_THRESHOLD}; the affine model may poorly explain this batch");
    }
    Ok(AffineFit { map, residual_rmse })
}

/// RANSAC parameters. Unset fields fall back to data-derived defaults:
/// with `inlier_tol` unset, candidates are scored by their median residual
/// (least-median-of-squares) and the tolerance is derived from the winning
/// candidate's residual scale (2.5x the MAD-based sigma estimate), so it
/// adapts to the inlier noise level; `min_inliers` defaults to
/// max(K+1, ceil(l/2)).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RansacConfig {
    pub iterations: usize,
    #[serde(default)]
    pub inlier_tol: Option<f64>,
    #[serde(default)]
    pub min_inliers: Option<usize>,
    pub seed: u64,
}

impl Default for RansacConfig {
    fn default() -> Self {
        Self {
            iterations: 200,
            inlier_tol: None,
            min_inliers: None,
            seed: 0,
        }
    }
}

/// Robust affine fit: repeatedly fits on random (K+1)-subsets, scores by
/// inlier count, then refits on the best consensus set.
pub fn fit_affine_ransac(
    src: &Array2<f64>,
    dst: &Array2<f64>,
    cfg: &RansacConfig,
) -> Result<(AffineFit, Vec<bool>)> {
    let l = src.nrows();
    let k = src.ncols();
    if dst.nrows() != l || dst.ncols() != k {
        return Err(Error::Shape("src/dst shape mismatch".into()));
    }
    if cfg.iterations < 1 {
        return Err(Error::Config("ransac iterations must be >= 1".into()));
    }
    if l < k + 1 {
        return Err(Error::Precondition(format!(
            "need at least K+1 = {} correspondences, got {l}",
            k + 1
        )));
    }
    let fixed_tol = match cfg.inlier_tol {
        Some(t) if t > 0.0 => Some(t),
        Some(t) => return Err(Error::Config(format!("inlier_tol must be positive, got {t}"))),
        None => None,
    };
    let min_inliers = cfg.min_inliers.unwrap_or_else(|| (k + 1).max(l.div_ceil(2)));

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut indices: Vec<usize> = (0..l).collect();
    // With a fixed tolerance, candidates are scored by inlier count; without
    // one, by median residual (least-median-of-squares), with the mask built
    // afterwards from the winner's residual scale.
    let mut best_mask: Option<Vec<bool>> = None;
    let mut best_count = 0usize;
    let mut best_residuals: Option<Vec<f64>> = None;
    let mut best_median = f64::INFINITY;
    for _ in 0..cfg.iterations {
        indices.shuffle(&mut rng);
        let subset = &indices[..k + 1];
        let sub_src = src.select(ndarray::Axis(0), subset);
        let sub_dst = dst.select(ndarray::Axis(0), subset);
        let fit = match fit_affine(&sub_src, &sub_dst) {
            Ok(f) => f,
            Err(Error::DegenerateGeometry(_)) => continue,
            Err(e) => return Err(e),
        };
        let pred = fit.map.transform_rows(src)?;
        let residuals: Vec<f64> = (0..l)
            .map(|i| {
                let d2: f64 = (0..k).map(|j| (dst[[i, j]] - pred[[i, j]]).powi(2)).sum();
                d2.sqrt()
            })
            .collect();
        match fixed_tol {
            Some(tol) => {
                let mask: Vec<bool> = residuals.iter().map(|&r| r < tol).collect();
                let count = mask.iter().filter(|&&b| b).count();
                if count > best_count {
                    best_count = count;
                    best_mask = Some(mask);
                }
            }
            None => {
                let mut sorted = residuals.clone();
                sorted.sort_by(|a, b| a.total_cmp(b));
                let median = sorted[l / 2];
                if median < best_median {
                    best_median = median;
                    best_residuals = Some(residuals);
                }
            }
        }
    }

    if fixed_tol.is_none() {
        if let Some(residuals) = best_residuals {
            // Consistency-corrected MAD scale estimate; the floor keeps the
            // tolerance meaningful when inliers fit almost exactly.
            let sigma = 1.4826 * best_median * (1.0 + 5.0 / (l.saturating_sub(k + 1).max(1)) as f64);
            let tol = (2.5 * sigma).max(1e-9);
            let mask: Vec<bool> = residuals.iter().map(|&r| r < tol).collect();
            best_count = mask.iter().filter(|&&b| b).count();
            best_mask = Some(mask);
        }
    }

    let mask = best_mask.ok_or_else(|| {
        Error::RobustFit("no candidate fit succeeded (all minimal subsets degenerate)".into())
    })?;
    if best_count < min_inliers {
        return Err(Error::RobustFit(format!(
            "best consensus set has {best_count} inliers, {min_inliers} required"
        )));
    }
    let inlier_rows: Vec<usize> = mask
        .iter()
        .enumerate()
        .filter_map(|(i, &b)| b.then_some(i))
        .collect();
    let fit = fit_affine(
        &src.select(ndarray::Axis(0), &inlier_rows),
        &dst.select(ndarray::Axis(0), &inlier_rows),
    )?;
    Ok((fit, mask))
}

/// Applies a map to every row of an embedding; ids and eigenvalues carry
/// through, the `aligned` flag is set.
pub fn apply_affine(map: &AffineMap, emb: &Embedding) -> Result<Embedding> {
    if emb.k() != map.k() {
        return Err(Error::Shape(format!(
            "embedding K = {} but map K = {}",
            emb.k(),
            map.k()
        )));
    }
    let coords = map.transform_rows(&emb.coords)?;
    Ok(Embedding {
        coords,
        eigenvalues: emb.eigenvalues.clone(),
        node_ids: emb.node_ids.clone(),
        kind: emb.kind,
        aligned: true,
    })
}

/// Result of aligning one batch against the anchor frame.
#[derive(Debug, Clone)]
pub struct AlignedBatch {
    pub embedding: Embedding,
    pub fit: AffineFit,
    /// Present when RANSAC was used.
    pub inlier_mask: Option<Vec<bool>>,
}

/// Extracts the anchor rows of a batch embedding, fits the map onto the
/// reference frame (robustly if configured) and applies it to the whole
/// batch.
pub fn align_batch(
    batch_emb: &Embedding,
    frame: &AnchorFrame,
    ransac: Option<&RansacConfig>,
) -> Result<AlignedBatch> {
    let missing: Vec<usize> = frame
        .anchor_ids
        .iter()
        .filter(|id| !batch_emb.node_ids.contains(id))
        .copied()
        .collect();
    if !missing.is_empty() {
        return Err(Error::Precondition(format!(
            "anchors missing from batch: {missing:?}"
        )));
    }
    let src = batch_emb.rows_for_ids(&frame.anchor_ids)?;
    let (fit, inlier_mask) = match ransac {
        Some(cfg) => {
            let (fit, mask) = fit_affine_ransac(&src, &frame.ref_coords, cfg)?;
            (fit, Some(mask))
        }
        None => (fit_affine(&src, &frame.ref_coords)?, None),
    };
    let embedding = apply_affine(&fit.map, batch_emb)?;
    Ok(AlignedBatch {
        embedding,
        fit,
        inlier_mask,
    })
}

/// Alignment under feature change: fits the map sending the updated
/// anchor coordinates onto their previous coordinates and applies it to
/// the entire updated embedding.
pub fn align_feature_update(
    prev_anchor_coords: &Array2<f64>,
    updated_full_emb: &Embedding,
    anchor_ids: &[usize],
) -> Result<(Embedding, AffineFit)> {
    let updated_anchor_coords = updated_full_emb.rows_for_ids(anchor_ids)?;
    let fit = fit_affine(&updated_anchor_coords, prev_anchor_coords)?;
    let aligned = apply_affine(&fit.map, updated_full_emb)?;
    Ok((aligned, fit))
}
