//! Gaussian-kernel kNN affinity graphs and their Laplacian variants.
//!
//! ```
//! use specalign::dataset::{generate_toy, ToyKind};
//! use specalign::graph::{build_graph, GraphConfig, SigmaMode};
//!
//! let data = generate_toy(ToyKind::TwoCircles, 200, 0.05, 1).unwrap();
//! let cfg = GraphConfig {
//!     k_neighbors: 8,
//!     sigma_mode: SigmaMode::MedianKnn,
//!     ..Default::default()
//! };
//! let g = build_graph(&data.features, &data.ids, &cfg).unwrap();
//! assert_eq!(g.len(), 200);
//! assert!(g.sigma() > 0.0);
//! // W is symmetric with an empty diagonal.
//! let w = g.affinities();
//! assert_eq!(w[[0, 0]], 0.0);
//! assert_eq!(w[[3, 5]], w[[5, 3]]);
//! ```
//!
//! Laplacian matrices are derived from a built graph:
//!
//! ```
//! use specalign::dataset::{generate_toy, ToyKind};
//! use specalign::graph::{build_graph, laplacian, GraphConfig, LaplacianKind, LaplacianMatrices};
//!
//! let data = generate_toy(ToyKind::GaussianBlobs, 120, 0.3, 2).unwrap();
//! let g = build_graph(&data.features, &data.ids, &GraphConfig::default()).unwrap();
//! match laplacian(&g, LaplacianKind::SymNormalized) {
//!     LaplacianMatrices::SymNormalized(l_n) => assert_eq!(l_n.dim(), (120, 120)),
//!     _ => unreachable!(),
//! }
//! ```

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Bandwidth rule for the Gaussian kernel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SigmaMode {
    /// Explicit bandwidth.
    Fixed(f64),
    /// Median of the retained kNN edge distances.
    MedianKnn,
}

/// Which Laplacian the embedding is computed from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LaplacianKind {
    /// L = D - W
    Unnormalized,
    /// L_N = I - D^{-1/2} W D^{-1/2}
    SymNormalized,
    /// P = W D^{-1} (diffusion maps)
    RandomWalk,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GraphConfig {
    #[serde(default = "default_k_neighbors")]
    pub k_neighbors: usize,
    #[serde(default = "default_sigma_mode")]
    pub sigma_mode: SigmaMode,
    #[serde(default = "default_laplacian_kind")]
    pub laplacian_kind: LaplacianKind,
    /// When set, adds eps to every degree so pathological inputs with
    /// fully underflowed rows still pass the isolation check.
    #[serde(default)]
    pub self_loop_epsilon: Option<f64>,
}

fn default_k_neighbors() -> usize {
    10
}

fn default_sigma_mode() -> SigmaMode {
    SigmaMode::MedianKnn
}

fn default_laplacian_kind() -> LaplacianKind {
    LaplacianKind::SymNormalized
}

impl Default for GraphConfig {
    fn default() -> Self {
        Self {
            k_neighbors: 10,
            sigma_mode: SigmaMode::MedianKnn,
            laplacian_kind: LaplacianKind::SymNormalized,
            self_loop_epsilon: None,
        }
    }
}

impl GraphConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k_neighbors < 1 {
            return Err(Error::Config("k_neighbors must be >= 1".into()));
        }
        if let SigmaMode::Fixed(s) = self.sigma_mode {
            if !s.is_finite() || s <= 0.0 {
                return Err(Error::Config(format!("fixed sigma must be positive, got {s}")));
            }
        }
        Ok(())
    }
}

/// Symmetric nonnegative affinity matrix over a node subset.
#[derive(Debug, Clone)]
pub struct Graph {
    w: Array2<f64>,
    degrees: Array1<f64>,
    node_ids: Vec<usize>,
    sigma: f64,
}

impl Graph {
    pub fn affinities(&self) -> &Array2<f64> {
        &self.w
    }

    pub fn degrees(&self) -> &Array1<f64> {
        &self.degrees
    }

    pub fn node_ids(&self) -> &[usize] {
        &self.node_ids
    }

    pub fn len(&self) -> usize {
        self.w.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.w.nrows() == 0
    }

    /// Bandwidth actually used by the kernel.
    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    /// Builds a graph from an explicit affinity matrix, validating the
    /// invariants (symmetry, zero diagonal, entries in [0,1], no isolated
    /// node).
    pub fn from_affinities(w: Array2<f64>, node_ids: Vec<usize>) -> Result<Self> {
        let m = w.nrows();
        if w.ncols() != m || node_ids.len() != m {
            return Err(Error::Shape(format!(
                "affinities {m} x {}, {} node ids",
                w.ncols(),
                node_ids.len()
            )));
        }
        for i in 0..m {
            if w[[i, i]] != 0.0 {
                return Err(Error::Precondition(format!("nonzero diagonal at {i}")));
            }
            for j in 0..m {
                let v = w[[i, j]];
                if v != w[[j, i]] || !(0.0..=1.0).contains(&v) {
                    return Err(Error::Precondition(format!("bad affinity at ({i},{j})")));
                }
            }
        }
        let mut degrees = Array1::zeros(m);
        for i in 0..m {
            let deg: f64 = w.row(i).sum();
            if deg <= 0.0 {
                return Err(Error::IsolatedNode { node: node_ids[i] });
            }
            degrees[i] = deg;
        }
        Ok(Self {
            w,
            degrees,
            node_ids,
            sigma: f64::NAN,
        })
    }

    /// Upper-triangle coordinate-list dump, one `i,j,w` line per edge.
    pub fn dump_coo(&self) -> String {
        let m = self.len();
        let mut out = String::new();
        for i in 0..m {
            for j in (i + 1)..m {
                if self.w[[i, j]] != 0.0 {
                    out.push_str(&format!("{i},{j},{}\n", self.w[[i, j]]));
                }
            }
        }
        out
    }
}

/// Builds the union-symmetrized kNN graph with Gaussian affinities
/// W[i,j] = exp(-||x_i - x_j||^2 / (2 sigma^2)).
///
/// An edge (i,j) is retained iff j is among i's k nearest neighbors or
/// vice versa. `node_ids` records which dataset rows the graph covers.
pub fn build_graph(
    features: &Array2<f64>,
    node_ids: &[usize],
    cfg: &GraphConfig,
) -> Result<Graph> {
    cfg.validate()?;
    let m = features.nrows();
    if node_ids.len() != m {
        return Err(Error::Shape(format!(
            "{} node ids for {m} feature rows",
            node_ids.len()
        )));
    }
    if m < cfg.k_neighbors + 1 {
        return Err(Error::Size(format!(
            "need at least k_neighbors + 1 = {} nodes, got {m}",
            cfg.k_neighbors + 1
        )));
    }
    if !features.iter().all(|v| v.is_finite()) {
        return Err(Error::Precondition("non-finite feature entry".into()));
    }

    // dense pairwise squared distances; batches stay small by design
    let mut dist2 = Array2::zeros((m, m));
    for i in 0..m {
        for j in (i + 1)..m {
            let d2: f64 = features
                .row(i)
                .iter()
                .zip(features.row(j).iter())
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            dist2[[i, j]] = d2;
            dist2[[j, i]] = d2;
        }
    }

    // kNN edge set, union-symmetrized
    let mut retained = vec![false; m * m];
    let mut idx: Vec<usize> = Vec::with_capacity(m - 1);
    for i in 0..m {
        idx.clear();
        idx.extend((0..m).filter(|&j| j != i));
        idx.sort_by(|&a, &b| {
            dist2[[i, a]]
                .partial_cmp(&dist2[[i, b]])
                .unwrap()
                .then(a.cmp(&b))
        });
        for &j in idx.iter().take(cfg.k_neighbors) {
            retained[i * m + j] = true;
            retained[j * m + i] = true;
        }
    }

    let sigma = match cfg.sigma_mode {
        SigmaMode::Fixed(s) => s,
        SigmaMode::MedianKnn => {
            let mut ds: Vec<f64> = Vec::new();
            for i in 0..m {
                for j in (i + 1)..m {
                    if retained[i * m + j] {
                        ds.push(dist2[[i, j]].sqrt());
                    }
                }
            }
            ds.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let med = if ds.len() % 2 == 1 {
                ds[ds.len() / 2]
            } else {
                0.5 * (ds[ds.len() / 2 - 1] + ds[ds.len() / 2])
            };
            if med <= 0.0 {
                return Err(Error::DegenerateScale(
                    "median kNN distance is zero (duplicate points); use a fixed sigma".into(),
                ));
            }
            med
        }
    };

    let mut w = Array2::zeros((m, m));
    for i in 0..m {
        for j in 0..m {
            if i != j && retained[i * m + j] {
                w[[i, j]] = (-dist2[[i, j]] / (2.0 * sigma * sigma)).exp();
            }
        }
    }

    let eps = cfg.self_loop_epsilon.unwrap_or(0.0);
    let mut degrees = Array1::zeros(m);
    for i in 0..m {
        let deg: f64 = w.row(i).sum() + eps;
        if deg <= 0.0 {
            return Err(Error::IsolatedNode { node: node_ids[i] });
        }
        degrees[i] = deg;
    }

    Ok(Graph {
        w,
        degrees,
        node_ids: node_ids.to_vec(),
        sigma,
    })
}

/// Dense Laplacian-family matrices derived from a graph.
#[derive(Debug, Clone)]
pub enum LaplacianMatrices {
    /// L = D - W, symmetric PSD.
    Unnormalized(Array2<f64>),
    /// L_N = I - D^{-1/2} W D^{-1/2}, symmetric PSD with spectrum in [0, 2].
    SymNormalized(Array2<f64>),
    /// The random-walk matrix P = W D^{-1} together with its symmetric
    /// conjugate S = D^{-1/2} W D^{-1/2}; P = D^{1/2} S D^{-1/2}, so the
    /// two share eigenvalues and eigvec(P) = D^{1/2} eigvec(S).
    RandomWalk {
        p: Array2<f64>,
        s: Array2<f64>,
    },
}

pub fn laplacian(g: &Graph, kind: LaplacianKind) -> LaplacianMatrices {
    let m = g.len();
    let w = &g.w;
    match kind {
        LaplacianKind::Unnormalized => {
            let mut l = -w.clone();
            for i in 0..m {
                l[[i, i]] = g.degrees[i];
            }
            LaplacianMatrices::Unnormalized(l)
        }
        LaplacianKind::SymNormalized => {
            let mut ln = Array2::zeros((m, m));
            for i in 0..m {
                for j in 0..m {
                    let v = -w[[i, j]] / (g.degrees[i] * g.degrees[j]).sqrt();
                    ln[[i, j]] = if i == j { 1.0 + v } else { v };
                }
            }
            LaplacianMatrices::SymNormalized(ln)
        }
        LaplacianKind::RandomWalk => {
            let mut p = Array2::zeros((m, m));
            let mut s = Array2::zeros((m, m));
            for i in 0..m {
                for j in 0..m {
                    p[[i, j]] = w[[i, j]] / g.degrees[j];
                    s[[i, j]] = w[[i, j]] / (g.degrees[i] * g.degrees[j]).sqrt();
                }
            }
            LaplacianMatrices::RandomWalk { p, s }
        }
    }
}
