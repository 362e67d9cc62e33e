//! Dense symmetric eigendecomposition and spectral / diffusion-map
//! embeddings of a node subset.
//!
//! ```
//! use specalign::dataset::{generate_toy, ToyKind};
//! use specalign::graph::{build_graph, GraphConfig, LaplacianKind};
//! use specalign::spectral::embed;
//!
//! let data = generate_toy(ToyKind::GaussianBlobs, 150, 0.3, 3).unwrap();
//! let g = build_graph(&data.features, &data.ids, &GraphConfig::default()).unwrap();
//!
//! // K = 2 coordinates from the symmetric normalised Laplacian,
//! // skipping the trivial constant-direction eigenvector.
//! let emb = embed(&g, 2, LaplacianKind::SymNormalized, true, 0.0).unwrap();
//! assert_eq!(emb.coords.dim(), (150, 2));
//! assert_eq!(emb.eigenvalues.len(), 2);
//! // Eigenvalues come out ascending.
//! assert!(emb.eigenvalues[0] <= emb.eigenvalues[1]);
//! ```

use std::path::Path;

use nalgebra::DMatrix;
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{laplacian, Graph, LaplacianKind, LaplacianMatrices};

/// Hard cap on dense eigendecomposition size. Batching exists precisely so
/// that full-graph eigensolves are never needed.
pub const SPECTRAL_CAP: usize = 4096;

/// Provenance of an embedding's coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingKind {
    pub laplacian: LaplacianKind,
    pub skip_trivial: bool,
    /// Diffusion time t; only meaningful for the random-walk kind.
    pub diffusion_time: f64,
}

/// Coordinates of a node subset in eigenvector space.
#[derive(Debug, Clone)]
pub struct Embedding {
    /// count x K coordinate matrix.
    pub coords: Array2<f64>,
    /// K eigenvalues: ascending Laplacian eigenvalues, or descending
    /// diffusion eigenvalues gamma_j for the random-walk kind.
    pub eigenvalues: Vec<f64>,
    /// Dataset indices covered, row-aligned with `coords`.
    pub node_ids: Vec<usize>,
    pub kind: EmbeddingKind,
    /// Set once the embedding has been mapped into a reference frame.
    pub aligned: bool,
}

impl Embedding {
    pub fn k(&self) -> usize {
        self.coords.ncols()
    }

    pub fn len(&self) -> usize {
        self.coords.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.nrows() == 0
    }

    /// Rows corresponding to the given node ids, in the order given.
    pub fn rows_for_ids(&self, ids: &[usize]) -> Result<Array2<f64>> {
        let mut out = Array2::zeros((ids.len(), self.k()));
        for (r, id) in ids.iter().enumerate() {
            let pos = self
                .node_ids
                .iter()
                .position(|n| n == id)
                .ok_or_else(|| Error::Precondition(format!("node id {id} not in embedding")))?;
            out.row_mut(r).assign(&self.coords.row(pos));
        }
        Ok(out)
    }
}

/// Eigendecomposition of a dense symmetric matrix.
///
/// Returns the `k` smallest eigenvalues in ascending order with their
/// orthonormal eigenvectors as columns. Signs follow a deterministic
/// convention: the largest-magnitude component of each vector is positive,
/// ties broken by lowest index.
pub fn eig_symmetric(a: &Array2<f64>, k: usize) -> Result<(Vec<f64>, Array2<f64>)> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(Error::Shape(format!("matrix is {n} x {}", a.ncols())));
    }
    if k > n {
        return Err(Error::Size(format!("k = {k} exceeds matrix dimension {n}")));
    }
    let mut asym: f64 = 0.0;
    for i in 0..n {
        for j in (i + 1)..n {
            asym = asym.max((a[[i, j]] - a[[j, i]]).abs());
        }
    }
    if asym > 1e-10 {
        return Err(Error::Precondition(format!(
            "matrix not symmetric: max |A - A^T| entry is {asym:e}"
        )));
    }

    let m = DMatrix::from_fn(n, n, |i, j| 0.5 * (a[[i, j]] + a[[j, i]]));
    let max_iter = 30 * n.max(10);
    let eig = nalgebra::SymmetricEigen::try_new(m.clone(), f64::EPSILON, max_iter).ok_or_else(
        || {
            Error::Numeric(format!(
                "symmetric eigensolver did not converge within {max_iter} iterations"
            ))
        },
    )?;

    // sort ascending and take the k smallest
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[i].partial_cmp(&eig.eigenvalues[j]).unwrap());
    let mut values = Vec::with_capacity(k);
    let mut columns: Vec<nalgebra::DVector<f64>> = Vec::with_capacity(k);
    for &src in order.iter().take(k) {
        values.push(eig.eigenvalues[src]);
        columns.push(eig.eigenvectors.column(src).into_owned());
    }

    // The QR iteration occasionally accepts a poorly converged eigenpair
    // (residuals around 1e-3 on random matrices past n = 100). Refine any
    // offender by shifted inverse iteration with Rayleigh-quotient
    // updates; one LU solve per pass, so this is cheap and usually a
    // no-op.
    let scale = m.iter().map(|v| v * v).sum::<f64>().sqrt().max(1.0);
    for (val, vec) in values.iter_mut().zip(&mut columns) {
        for _pass in 0..8 {
            let resid = (&m * &*vec - &*vec * *val).norm();
            if resid <= 1e-12 * scale {
                break;
            }
            // a tiny shift keeps the factorization nonsingular when the
            // eigenvalue estimate is already exact
            let shifted = &m - DMatrix::identity(n, n) * (*val + 1e-14 * scale);
            let Some(x) = shifted.lu().solve(&*vec) else {
                break;
            };
            let norm = x.norm();
            if !(norm.is_finite() && norm > 0.0) {
                break;
            }
            *vec = x / norm;
            *val = vec.dot(&(&m * &*vec));
        }
    }
    // refinement can swap the order of near-ties
    let mut sel: Vec<usize> = (0..k).collect();
    sel.sort_by(|&i, &j| values[i].partial_cmp(&values[j]).unwrap());

    // deterministic sign convention: largest-magnitude entry positive
    let mut out_values = Vec::with_capacity(k);
    let mut vectors = Array2::zeros((n, k));
    for (col, &src) in sel.iter().enumerate() {
        out_values.push(values[src]);
        let v = &columns[src];
        let mut pivot = 0;
        for i in 1..n {
            if v[i].abs() > v[pivot].abs() {
                pivot = i;
            }
        }
        let flip = if v[pivot] < 0.0 { -1.0 } else { 1.0 };
        for i in 0..n {
            vectors[[i, col]] = flip * v[i];
        }
    }
    Ok((out_values, vectors))
}

/// Computes the spectral or diffusion-map embedding of a graph.
///
/// For Laplacian kinds, column j holds the eigenvector with the j-th
/// smallest eigenvalue, skipping the trivial first one when requested.
/// For the random-walk kind the eigenvectors of P are recovered through
/// the symmetric conjugate S, the K largest non-trivial eigenvalues are
/// kept (the trivial gamma = 1 is always skipped) and each column is
/// scaled by gamma_j^t.
pub fn embed(g: &Graph, k: usize, kind: LaplacianKind, skip_trivial: bool, t: f64) -> Result<Embedding> {
    let m = g.len();
    if m > SPECTRAL_CAP {
        return Err(Error::Size(format!(
            "node set of size {m} exceeds the dense eigendecomposition cap {SPECTRAL_CAP}; \
             embed smaller batches instead (that is what batching is for)"
        )));
    }
    // DM always discards the trivial constant-direction eigenvector
    let skip_trivial = skip_trivial || kind == LaplacianKind::RandomWalk;
    let needed = k + usize::from(skip_trivial);
    if needed > m {
        return Err(Error::Size(format!(
            "K = {k} (+{} trivial) exceeds node count {m}",
            usize::from(skip_trivial)
        )));
    }
    if !(t.is_finite() && t >= 0.0) {
        return Err(Error::Config(format!("diffusion time must be >= 0, got {t}")));
    }

    let (coords, eigenvalues) = match laplacian(g, kind) {
        LaplacianMatrices::Unnormalized(l) | LaplacianMatrices::SymNormalized(l) => {
            let (vals, vecs) = eig_symmetric(&l, needed)?;
            let skip = usize::from(skip_trivial);
            let coords = vecs.slice(ndarray::s![.., skip..skip + k]).to_owned();
            (coords, vals[skip..skip + k].to_vec())
        }
        LaplacianMatrices::RandomWalk { s, .. } => {
            // full spectrum of S ascending; P's eigenvalues are the same,
            // largest first, and eigvec(P) = D^{1/2} eigvec(S)
            let (vals, vecs) = eig_symmetric(&s, m)?;
            let mut coords = Array2::zeros((m, k));
            let mut gammas = Vec::with_capacity(k);
            for j in 0..k {
                let src = m - 2 - j; // skip the trivial gamma = 1 at m-1
                let gamma: f64 = vals[src];
                gammas.push(gamma);
                let col: Vec<f64> = (0..m)
                    .map(|i| vecs[[i, src]] * g.degrees()[i].sqrt())
                    .collect();
                let norm: f64 = col.iter().map(|v| v * v).sum::<f64>().sqrt();
                let scale = if t == 0.0 { 1.0 } else { gamma.powf(t) };
                if !scale.is_finite() {
                    return Err(Error::Numeric(format!(
                        "gamma^t not finite for gamma = {gamma}, t = {t}"
                    )));
                }
                // unit-normalize the P-eigenvector, then apply gamma^t
                for i in 0..m {
                    coords[[i, j]] = col[i] / norm * scale;
                }
            }
            (coords, gammas)
        }
    };

    if cfg!(debug_assertions) {
        debug_check_residuals(g, kind, &coords, &eigenvalues, t)?;
    }

    Ok(Embedding {
        coords,
        eigenvalues,
        node_ids: g.node_ids().to_vec(),
        kind: EmbeddingKind {
            laplacian: kind,
            skip_trivial,
            diffusion_time: t,
        },
        aligned: false,
    })
}

/// Verifies the eigen-residual bound on an embed result (debug builds).
fn debug_check_residuals(
    g: &Graph,
    kind: LaplacianKind,
    coords: &Array2<f64>,
    eigenvalues: &[f64],
    t: f64,
) -> Result<()> {
    if kind == LaplacianKind::RandomWalk && t != 0.0 {
        return Ok(()); // columns are gamma^t-scaled, residual bound shifts
    }
    let mat = match laplacian(g, kind) {
        LaplacianMatrices::Unnormalized(l) | LaplacianMatrices::SymNormalized(l) => l,
        LaplacianMatrices::RandomWalk { p, .. } => p,
    };
    let frob = mat.iter().map(|v| v * v).sum::<f64>().sqrt();
    let tol = 1e-8 * frob.max(1.0);
    let prod = mat.dot(coords);
    for (j, &lam) in eigenvalues.iter().enumerate() {
        let mut resid2 = 0.0;
        for i in 0..mat.nrows() {
            let r = prod[[i, j]] - lam * coords[[i, j]];
            resid2 += r * r;
        }
        if resid2.sqrt() > tol {
            return Err(Error::Numeric(format!(
                "eigen-residual {:.3e} exceeds {tol:.3e} for column {j}",
                resid2.sqrt()
            )));
        }
    }
    Ok(())
}

/// Writes the embedding as CSV (`node_id` + K coordinate columns) with a
/// JSON sidecar of eigenvalues and kind.
pub fn dump_embedding(emb: &Embedding, csv_path: &Path, json_path: &Path) -> Result<()> {
    let mut wtr = csv::Writer::from_path(csv_path)?;
    let k = emb.k();
    let mut header = vec!["node_id".to_string()];
    header.extend((0..k).map(|j| format!("phi{j}")));
    wtr.write_record(&header)
        .map_err(|e| Error::Numeric(e.to_string()))?;
    for i in 0..emb.len() {
        let mut rec = vec![emb.node_ids[i].to_string()];
        rec.extend((0..k).map(|j| format!("{}", emb.coords[[i, j]])));
        wtr.write_record(&rec)
            .map_err(|e| Error::Numeric(e.to_string()))?;
    }
    wtr.flush()?;

    #[derive(Serialize)]
    struct Sidecar<'a> {
        eigenvalues: &'a [f64],
        kind: &'a EmbeddingKind,
        aligned: bool,
    }
    let sidecar = Sidecar {
        eigenvalues: &emb.eigenvalues,
        kind: &emb.kind,
        aligned: emb.aligned,
    };
    std::fs::write(json_path, serde_json::to_string_pretty(&sidecar)?)?;
    Ok(())
}
