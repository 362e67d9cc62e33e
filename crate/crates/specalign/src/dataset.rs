//! Toy dataset generation, CSV ingest and seeded batch/anchor sampling.
//!
//! All sampling operations are pure functions of their inputs and a 64-bit
//! seed, so experiments replay exactly.

use std::f64::consts::PI;
use std::path::Path;

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A feature matrix with optional cluster labels and stable node ids.
#[derive(Debug, Clone)]
pub struct Dataset {
    /// n x d feature coordinates.
    pub features: Array2<f64>,
    /// Optional labels in `0..C`, one per row.
    pub labels: Option<Vec<usize>>,
    /// Stable node identity of each row, preserved by subsetting.
    pub ids: Vec<usize>,
}

/// Sampling parameters for one training run.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SampleSpec {
    pub batch_size: usize,
    pub anchor_count: usize,
    pub seed: u64,
}

/// Built-in toy dataset families.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ToyKind {
    ThreeMoons,
    TwoCircles,
    GaussianBlobs,
}

impl ToyKind {
    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "three_moons" => Ok(Self::ThreeMoons),
            "two_circles" => Ok(Self::TwoCircles),
            "gaussian_blobs" => Ok(Self::GaussianBlobs),
            other => Err(Error::Config(format!("unknown toy dataset kind '{other}'"))),
        }
    }
}

impl Dataset {
    /// Validates and constructs a dataset. `ids` defaults to row order.
    pub fn new(
        features: Array2<f64>,
        labels: Option<Vec<usize>>,
        ids: Option<Vec<usize>>,
    ) -> Result<Self> {
        let n = features.nrows();
        let d = features.ncols();
        if n < 2 {
            return Err(Error::Size(format!("dataset needs at least 2 rows, got {n}")));
        }
        if d < 1 {
            return Err(Error::Size("dataset needs at least 1 feature column".into()));
        }
        if !features.iter().all(|v| v.is_finite()) {
            return Err(Error::Precondition("non-finite feature entry".into()));
        }
        if let Some(ref lab) = labels {
            if lab.len() != n {
                return Err(Error::Shape(format!(
                    "{} labels for {} rows",
                    lab.len(),
                    n
                )));
            }
            let c = lab.iter().max().map(|m| m + 1).unwrap_or(0);
            let mut counts = vec![0usize; c];
            for &l in lab {
                counts[l] += 1;
            }
            if counts.iter().any(|&k| k == 0) {
                return Err(Error::Precondition("empty label class".into()));
            }
        }
        let ids = ids.unwrap_or_else(|| (0..n).collect());
        if ids.len() != n {
            return Err(Error::Shape(format!("{} ids for {} rows", ids.len(), n)));
        }
        let mut sorted = ids.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != n {
            return Err(Error::Precondition("duplicate node ids".into()));
        }
        Ok(Self { features, labels, ids })
    }

    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.features.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    /// Number of label classes, if labeled.
    pub fn class_count(&self) -> Option<usize> {
        self.labels
            .as_ref()
            .map(|l| l.iter().max().map(|m| m + 1).unwrap_or(0))
    }

    /// Rows at the given indices as a new dataset; ids carry over.
    pub fn subset(&self, rows: &[usize]) -> Result<Self> {
        for &r in rows {
            if r >= self.len() {
                return Err(Error::Size(format!("row {r} out of range")));
            }
        }
        let features = self.features.select(Axis(0), rows);
        let labels = self
            .labels
            .as_ref()
            .map(|l| rows.iter().map(|&r| l[r]).collect());
        let ids = rows.iter().map(|&r| self.ids[r]).collect();
        Ok(Self {
            features,
            labels,
            ids,
        })
    }

    /// Feature rows at the given indices.
    pub fn features_at(&self, rows: &[usize]) -> Array2<f64> {
        self.features.select(Axis(0), rows)
    }

    /// Seeded disjoint train/test split by row permutation.
    pub fn split(&self, train_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
        if !(0.0..1.0).contains(&train_fraction) || train_fraction <= 0.0 {
            return Err(Error::Config(format!(
                "train_fraction must be in (0,1), got {train_fraction}"
            )));
        }
        let n = self.len();
        let mut rows: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rows.shuffle(&mut rng);
        let n_train = ((n as f64) * train_fraction).round() as usize;
        let n_train = n_train.clamp(1, n - 1);
        let train = self.subset(&rows[..n_train])?;
        let test = self.subset(&rows[n_train..])?;
        Ok((train, test))
    }
}

/// Generates one of the toy datasets with ground-truth labels.
///
/// `three_moons` has 3 classes, `two_circles` 2, `gaussian_blobs` a
/// configurable count (pass via [`generate_toy_blobs`]; default 3).
pub fn generate_toy(kind: ToyKind, n: usize, noise: f64, seed: u64) -> Result<Dataset> {
    match kind {
        ToyKind::GaussianBlobs => generate_toy_blobs(n, noise, seed, 3),
        _ => generate_toy_inner(kind, n, noise, seed, 0),
    }
}

/// Gaussian blobs with an explicit cluster count.
pub fn generate_toy_blobs(n: usize, noise: f64, seed: u64, blobs: usize) -> Result<Dataset> {
    if blobs < 2 {
        return Err(Error::Config(format!("need at least 2 blobs, got {blobs}")));
    }
    generate_toy_inner(ToyKind::GaussianBlobs, n, noise, seed, blobs)
}

fn generate_toy_inner(
    kind: ToyKind,
    n: usize,
    noise: f64,
    seed: u64,
    blobs: usize,
) -> Result<Dataset> {
    if !noise.is_finite() || noise < 0.0 {
        return Err(Error::Config(format!("noise must be finite and >= 0, got {noise}")));
    }
    let classes = match kind {
        ToyKind::ThreeMoons => 3,
        ToyKind::TwoCircles => 2,
        ToyKind::GaussianBlobs => blobs,
    };
    if n < classes {
        return Err(Error::Size(format!(
            "n = {n} too small for {classes} classes"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut features = Array2::zeros((n, 2));
    let mut labels = vec![0usize; n];
    for i in 0..n {
        // balanced label assignment, fractions exact up to rounding
        let c = i % classes;
        labels[i] = c;
        let (x, y) = match kind {
            ToyKind::ThreeMoons => {
                // three interleaved crescents (middle one flipped);
                // adjacent arcs stay ~0.4 apart
                let theta = rng.gen::<f64>() * PI;
                if c == 1 {
                    (1.2 + theta.cos(), 0.5 - theta.sin())
                } else {
                    (1.2 * c as f64 + theta.cos(), theta.sin())
                }
            }
            ToyKind::TwoCircles => {
                // concentric circles, radii ratio 0.5
                let theta = rng.gen::<f64>() * 2.0 * PI;
                let r = if c == 0 { 1.0 } else { 0.5 };
                (r * theta.cos(), r * theta.sin())
            }
            ToyKind::GaussianBlobs => {
                let angle = 2.0 * PI * c as f64 / classes as f64;
                (3.0 * angle.cos(), 3.0 * angle.sin())
            }
        };
        let (nx, ny) = (gauss(&mut rng), gauss(&mut rng));
        features[[i, 0]] = x + noise * nx;
        features[[i, 1]] = y + noise * ny;
    }
    Dataset::new(features, Some(labels), None)
}

/// Standard normal via Box-Muller; keeps the rand dependency surface small
/// and the stream stable across rand versions.
fn gauss<R: Rng>(rng: &mut R) -> f64 {
    let u1: f64 = rng.gen::<f64>().max(f64::MIN_POSITIVE);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * PI * u2).cos()
}

/// Draws `l` unique anchor row indices.
///
/// With `stratified`, anchors are balanced across label classes (counts
/// differ by at most one); requires labels.
pub fn draw_anchors(ds: &Dataset, l: usize, seed: u64, stratified: bool) -> Result<Vec<usize>> {
    let n = ds.len();
    if l == 0 || l > n {
        return Err(Error::Size(format!("anchor count {l} out of range 1..={n}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = if stratified {
        let labels = ds
            .labels
            .as_ref()
            .ok_or_else(|| Error::Precondition("stratified anchors require labels".into()))?;
        let classes = ds.class_count().unwrap_or(0);
        let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); classes];
        for (row, &lab) in labels.iter().enumerate() {
            by_class[lab].push(row);
        }
        let base = l / classes;
        let extra = l % classes;
        let mut out = Vec::with_capacity(l);
        for (c, rows) in by_class.iter().enumerate() {
            let want = base + usize::from(c < extra);
            if want > rows.len() {
                return Err(Error::Size(format!(
                    "class {c} has {} rows, {want} anchors requested",
                    rows.len()
                )));
            }
            out.extend(sample_without_replacement(rows, want, &mut rng));
        }
        out
    } else {
        let all: Vec<usize> = (0..n).collect();
        sample_without_replacement(&all, l, &mut rng)
    };
    picked.sort_unstable();
    Ok(picked)
}

/// Draws a batch of exactly `m` rows: the anchors plus `m - l` fresh
/// uniform samples from their complement. Anchors come first.
pub fn draw_batch(ds: &Dataset, anchors: &[usize], m: usize, seed: u64) -> Result<Vec<usize>> {
    let n = ds.len();
    let l = anchors.len();
    if m > n {
        return Err(Error::Size(format!("batch size {m} exceeds dataset size {n}")));
    }
    if l > m {
        return Err(Error::Size(format!("{l} anchors exceed batch size {m}")));
    }
    let mut is_anchor = vec![false; n];
    for &a in anchors {
        if a >= n {
            return Err(Error::Precondition(format!("anchor row {a} out of range")));
        }
        if std::mem::replace(&mut is_anchor[a], true) {
            return Err(Error::Precondition(format!("duplicate anchor row {a}")));
        }
    }
    let complement: Vec<usize> = (0..n).filter(|&r| !is_anchor[r]).collect();
    let fresh = m - l;
    if fresh > complement.len() {
        return Err(Error::Size(format!(
            "cannot draw {fresh} fresh rows from complement of size {}",
            complement.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = anchors.to_vec();
    out.extend(sample_without_replacement(&complement, fresh, &mut rng));
    Ok(out)
}

fn sample_without_replacement<R: Rng>(pool: &[usize], k: usize, rng: &mut R) -> Vec<usize> {
    let mut pool = pool.to_vec();
    pool.shuffle(rng);
    pool.truncate(k);
    pool
}

/// Writes features (columns `f0..f{d-1}`) and, if present, a final `label`
/// column, with a header line. Floats use round-trip decimal formatting.
pub fn save_csv(ds: &Dataset, path: &Path) -> Result<()> {
    let mut wtr = csv::Writer::from_path(path)?;
    let d = ds.dim();
    let mut header: Vec<String> = (0..d).map(|j| format!("f{j}")).collect();
    if ds.labels.is_some() {
        header.push("label".into());
    }
    wtr.write_record(&header).map_err(csv_io)?;
    for i in 0..ds.len() {
        let mut rec: Vec<String> = (0..d).map(|j| format!("{}", ds.features[[i, j]])).collect();
        if let Some(ref labels) = ds.labels {
            rec.push(labels[i].to_string());
        }
        wtr.write_record(&rec).map_err(csv_io)?;
    }
    wtr.flush()?;
    Ok(())
}

fn csv_io(e: csv::Error) -> Error {
    Error::Parse {
        row: 0,
        col: 0,
        msg: e.to_string(),
    }
}

/// Reads a rectangular numeric table; a final column headed `label` becomes
/// integer labels. Row order defines the node ids.
pub fn load_csv(path: &Path) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_path(path)?;
    let mut rows: Vec<Vec<String>> = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::Parse {
            row: i,
            col: 0,
            msg: e.to_string(),
        })?;
        rows.push(rec.iter().map(|s| s.trim().to_string()).collect());
    }
    if rows.is_empty() {
        return Err(Error::Parse {
            row: 0,
            col: 0,
            msg: "empty file".into(),
        });
    }
    // header detection: first line with any non-numeric cell
    let has_header = rows[0].iter().any(|c| c.parse::<f64>().is_err());
    let label_col = if has_header {
        rows[0].iter().position(|c| c == "label")
    } else {
        None
    };
    let data_rows = if has_header { &rows[1..] } else { &rows[..] };
    if data_rows.is_empty() {
        return Err(Error::Parse {
            row: 1,
            col: 0,
            msg: "no data rows".into(),
        });
    }
    let width = data_rows[0].len();
    let d = match label_col {
        Some(c) => {
            if c != width - 1 {
                return Err(Error::Parse {
                    row: 0,
                    col: c,
                    msg: "label column must be last".into(),
                });
            }
            width - 1
        }
        None => width,
    };
    let header_offset = usize::from(has_header);
    let mut features = Array2::zeros((data_rows.len(), d));
    let mut labels: Vec<usize> = Vec::new();
    for (i, row) in data_rows.iter().enumerate() {
        if row.len() != width {
            return Err(Error::Parse {
                row: i + header_offset,
                col: row.len(),
                msg: format!("ragged row: expected {width} cells, got {}", row.len()),
            });
        }
        for j in 0..d {
            features[[i, j]] = row[j].parse::<f64>().map_err(|e| Error::Parse {
                row: i + header_offset,
                col: j,
                msg: e.to_string(),
            })?;
        }
        if label_col.is_some() {
            labels.push(row[width - 1].parse::<usize>().map_err(|e| Error::Parse {
                row: i + header_offset,
                col: width - 1,
                msg: e.to_string(),
            })?);
        }
    }
    Dataset::new(features, label_col.map(|_| labels), None)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_three_moons_shape() {
        let ds = generate_toy(ToyKind::ThreeMoons, 9000, 0.05, 7).unwrap();
        assert_eq!(ds.len(), 9000);
        assert_eq!(ds.dim(), 2);
        assert_eq!(ds.class_count(), Some(3));
    }

    #[test]
    fn toy_blobs_zero_noise_collapses_to_centers() {
        let ds = generate_toy_blobs(3, 0.0, 1, 3).unwrap();
        assert_eq!(ds.len(), 3);
        let labels = ds.labels.as_ref().unwrap();
        for i in 0..3 {
            let c = labels[i];
            let angle = 2.0 * PI * c as f64 / 3.0;
            assert!((ds.features[[i, 0]] - 3.0 * angle.cos()).abs() < 1e-12);
            assert!((ds.features[[i, 1]] - 3.0 * angle.sin()).abs() < 1e-12);
        }
    }

    #[test]
    fn toy_circles_radii_within_three_sigma() {
        // radial oracle: recompute each point's radius and compare to its
        // class radius
        let noise = 0.02;
        let ds = generate_toy(ToyKind::TwoCircles, 1000, noise, 3).unwrap();
        let labels = ds.labels.as_ref().unwrap();
        for i in 0..ds.len() {
            let r = (ds.features[[i, 0]].powi(2) + ds.features[[i, 1]].powi(2)).sqrt();
            let nominal = if labels[i] == 0 { 1.0 } else { 0.5 };
            // noise is 2-d isotropic; 3 sigma on the radial deviation is
            // conservative at ~4.3 sigma of the 1-d projection
            assert!(
                (r - nominal).abs() < 3.0 * noise * 1.5,
                "point {i}: radius {r} vs nominal {nominal}"
            );
        }
    }

    #[test]
    fn toy_label_fractions_near_nominal() {
        for kind in [ToyKind::ThreeMoons, ToyKind::TwoCircles, ToyKind::GaussianBlobs] {
            let ds = generate_toy(kind, 1000, 0.05, 11).unwrap();
            let c = ds.class_count().unwrap();
            let labels = ds.labels.as_ref().unwrap();
            for class in 0..c {
                let frac = labels.iter().filter(|&&l| l == class).count() as f64 / 1000.0;
                assert!((frac - 1.0 / c as f64).abs() < 0.02);
            }
        }
    }

    #[test]
    fn toy_rejects_bad_inputs() {
        assert!(generate_toy(ToyKind::ThreeMoons, 2, 0.05, 0).is_err());
        assert!(generate_toy(ToyKind::ThreeMoons, 100, f64::NAN, 0).is_err());
        assert!(ToyKind::from_name("spiral").is_err());
    }

    #[test]
    fn toy_is_seed_deterministic() {
        let a = generate_toy(ToyKind::ThreeMoons, 100, 0.05, 42).unwrap();
        let b = generate_toy(ToyKind::ThreeMoons, 100, 0.05, 42).unwrap();
        assert_eq!(a.features, b.features);
    }

    #[test]
    fn anchors_stratified_counts() {
        let ds = generate_toy(ToyKind::ThreeMoons, 9000, 0.05, 7).unwrap();
        let anchors = draw_anchors(&ds, 75, 1, true).unwrap();
        assert_eq!(anchors.len(), 75);
        let labels = ds.labels.as_ref().unwrap();
        for class in 0..3 {
            let k = anchors.iter().filter(|&&a| labels[a] == class).count();
            assert_eq!(k, 25);
        }
    }

    #[test]
    fn anchors_exhaustive_and_deterministic() {
        let ds = generate_toy(ToyKind::TwoCircles, 50, 0.02, 2).unwrap();
        let all = draw_anchors(&ds, 50, 9, false).unwrap();
        assert_eq!(all, (0..50).collect::<Vec<_>>());
        let a = draw_anchors(&ds, 10, 9, false).unwrap();
        let b = draw_anchors(&ds, 10, 9, false).unwrap();
        assert_eq!(a, b);
        assert!(draw_anchors(&Dataset::new(ds.features.clone(), None, None).unwrap(), 5, 0, true).is_err());
    }

    #[test]
    fn batch_contains_anchors() {
        let ds = generate_toy(ToyKind::ThreeMoons, 9000, 0.05, 7).unwrap();
        let anchors = draw_anchors(&ds, 9, 1, true).unwrap();
        let batch = draw_batch(&ds, &anchors, 256, 3).unwrap();
        assert_eq!(batch.len(), 256);
        for a in &anchors {
            assert!(batch.contains(a));
        }
        let mut uniq = batch.clone();
        uniq.sort_unstable();
        uniq.dedup();
        assert_eq!(uniq.len(), 256);
    }

    #[test]
    fn batch_equals_anchor_set_when_l_is_m() {
        let ds = generate_toy(ToyKind::TwoCircles, 100, 0.02, 5).unwrap();
        let anchors = draw_anchors(&ds, 12, 1, false).unwrap();
        let batch = draw_batch(&ds, &anchors, 12, 3).unwrap();
        assert_eq!(batch, anchors);
    }

    #[test]
    fn batches_share_anchors_and_differ_elsewhere() {
        let ds = generate_toy(ToyKind::ThreeMoons, 600, 0.05, 7).unwrap();
        let anchors = draw_anchors(&ds, 9, 1, true).unwrap();
        let mut non_anchor_parts = Vec::new();
        for seed in 0..20 {
            let batch = draw_batch(&ds, &anchors, 64, seed).unwrap();
            for a in &anchors {
                assert!(batch.contains(a));
            }
            let mut rest: Vec<usize> = batch[9..].to_vec();
            rest.sort_unstable();
            non_anchor_parts.push(rest);
        }
        non_anchor_parts.dedup();
        assert!(non_anchor_parts.len() > 1, "all 20 draws identical");
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ds.csv");
        let ds = generate_toy(ToyKind::ThreeMoons, 40, 0.05, 3).unwrap();
        save_csv(&ds, &path).unwrap();
        let back = load_csv(&path).unwrap();
        assert_eq!(ds.features, back.features);
        assert_eq!(ds.labels, back.labels);
    }

    #[test]
    fn csv_small_labeled_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("small.csv");
        std::fs::write(&path, "f0,f1,label\n1,2,0\n3,4,1\n5,6,0\n7,8,1\n").unwrap();
        let ds = load_csv(&path).unwrap();
        assert_eq!(ds.len(), 4);
        assert_eq!(ds.dim(), 2);
        assert_eq!(ds.labels.as_ref().unwrap(), &vec![0, 1, 0, 1]);
    }

    #[test]
    fn csv_errors() {
        let dir = tempfile::tempdir().unwrap();
        let empty = dir.path().join("empty.csv");
        std::fs::write(&empty, "").unwrap();
        assert!(load_csv(&empty).is_err());

        let bad = dir.path().join("bad.csv");
        std::fs::write(&bad, "f0,f1\n1,x\n2,3\n").unwrap();
        match load_csv(&bad) {
            Err(Error::Parse { row, col, .. }) => {
                assert_eq!((row, col), (1, 1));
            }
            other => panic!("expected parse error, got {other:?}"),
        }

        assert!(load_csv(&dir.path().join("missing.csv")).is_err());
    }

    #[test]
    fn split_is_disjoint_and_seeded() {
        let ds = generate_toy(ToyKind::ThreeMoons, 100, 0.05, 7).unwrap();
        let (tr, te) = ds.split(0.8, 5).unwrap();
        assert_eq!(tr.len(), 80);
        assert_eq!(te.len(), 20);
        let mut all: Vec<usize> = tr.ids.iter().chain(te.ids.iter()).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
        let (tr2, _) = ds.split(0.8, 5).unwrap();
        assert_eq!(tr.ids, tr2.ids);
    }
}
