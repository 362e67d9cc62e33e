//! End-to-end acceptance checks, one printed verdict line per guarantee.
//!
//! Built with `harness = false` so the lines always reach the terminal:
//! run with `cargo test --test acceptance` (optionally passing substrings
//! of check names to run a subset). The process exits nonzero if any
//! check fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use specalign::align::{apply_affine, fit_affine, fit_affine_ransac, RansacConfig};
use specalign::dataset::{draw_anchors, draw_batch, generate_toy, Dataset, ToyKind};
use specalign::graph::{build_graph, GraphConfig, LaplacianKind, SigmaMode};
use specalign::metrics;
use specalign::net::{self, MlpParams, MlpSpec};
use specalign::spectral::{eig_symmetric, embed};
use specalign::trainer::{train, train_joint, JointConfig, TrainConfig};

fn main() {
    let filters: Vec<String> = std::env::args()
        .skip(1)
        .filter(|a| !a.starts_with('-'))
        .collect();
    type Check = (&'static str, fn() -> Result<String, String>);
    let checks: [Check; 9] = [
        ("1 toy clustering", check_toy_clustering),
        ("2 anchor consistency", check_anchor_consistency),
        ("3 embedding fidelity", check_embedding_fidelity),
        ("4 affine recovery", check_affine_recovery),
        ("5 numerical kernels", check_numerical_kernels),
        ("6 metric oracles", check_metric_oracles),
        ("7 gradient checks", check_gradients),
        ("8 feature change", check_feature_change),
        ("9 determinism", check_determinism),
    ];
    let mut failures = 0;
    for (name, f) in checks {
        if !filters.is_empty() && !filters.iter().any(|s| name.contains(s.as_str())) {
            continue;
        }
        let t0 = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            Err(format!("panicked: {msg}"))
        });
        let secs = t0.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("acceptance {name}: PASS ({detail}) [{secs:.0}s]"),
            Err(detail) => {
                failures += 1;
                println!("acceptance {name}: FAIL ({detail}) [{secs:.0}s]");
            }
        }
    }
    if failures > 0 {
        std::process::exit(1);
    }
}

fn fail(msg: String) -> Result<String, String> {
    Err(msg)
}

/// The standard quality-run training configuration used by checks 1-3.
fn toy_config(k: usize, sigma: SigmaMode, steps: usize, hidden: Vec<usize>, seed: u64) -> TrainConfig {
    TrainConfig {
        k,
        batch_size: 256,
        anchor_count: 75,
        iterations: 1000,
        lr: 3e-3,
        lr_final: Some(1e-5),
        steps_per_batch: steps,
        hidden,
        graph: GraphConfig {
            k_neighbors: 20,
            sigma_mode: sigma,
            ..Default::default()
        },
        ransac: None,
        seed,
        eval_every: 0,
        stratified_anchors: true,
        skip_trivial: false,
        diffusion_time: 0.0,
    }
}

/// Test-set clustering agreement of a trained model.
fn model_test_scores(model: &MlpParams, test: &Dataset, seed: u64) -> (f64, f64) {
    let labels = test.labels.as_ref().unwrap();
    let classes = test.class_count().unwrap();
    let out = model.infer(&test.features).unwrap();
    let pred = metrics::kmeans(&metrics::row_normalize(&out), classes, 10, seed).unwrap();
    (
        metrics::nmi(labels, &pred).unwrap(),
        metrics::acc(labels, &pred).unwrap(),
    )
}

/// Check 1: on each toy dataset (n = 9000, batches of 256, 1000
/// iterations, K = cluster count), test-set NMI and ACC reach 0.98 on at
/// least 4 of 5 seeds, within 10 minutes per dataset.
fn check_toy_clustering() -> Result<String, String> {
    let cases: [(ToyKind, usize, f64, SigmaMode, usize, Vec<usize>); 3] = [
        (
            ToyKind::ThreeMoons,
            3,
            0.05,
            SigmaMode::Fixed(0.12),
            16,
            vec![128, 128],
        ),
        (
            ToyKind::TwoCircles,
            2,
            0.05,
            SigmaMode::Fixed(0.12),
            8,
            vec![64, 64],
        ),
        (
            ToyKind::GaussianBlobs,
            3,
            0.3,
            SigmaMode::MedianKnn,
            8,
            vec![64, 64],
        ),
    ];
    let mut summary = Vec::new();
    for (kind, k, noise, sigma, steps, hidden) in cases {
        let t0 = Instant::now();
        let mut passing = 0;
        let mut worst = (1.0f64, 1.0f64);
        for seed in 0..5u64 {
            let ds = generate_toy(kind, 9000, noise, seed).map_err(|e| e.to_string())?;
            let (train_ds, test_ds) = ds.split(0.8, seed).map_err(|e| e.to_string())?;
            let cfg = toy_config(k, sigma, steps, hidden.clone(), seed);
            let state = train(&train_ds, &cfg, None).map_err(|e| e.to_string())?;
            let (nmi, acc) = model_test_scores(&state.model, &test_ds, seed);
            if nmi >= 0.98 && acc >= 0.98 {
                passing += 1;
            }
            worst = (worst.0.min(nmi), worst.1.min(acc));
        }
        let secs = t0.elapsed().as_secs_f64();
        if passing < 4 {
            return fail(format!(
                "{kind:?}: only {passing}/5 seeds reach NMI/ACC 0.98 (worst nmi {:.3} acc {:.3})",
                worst.0, worst.1
            ));
        }
        if secs > 600.0 {
            return fail(format!("{kind:?}: 5 seeds took {secs:.0}s (> 600s budget)"));
        }
        summary.push(format!("{kind:?} {passing}/5 in {secs:.0}s"));
    }
    Ok(summary.join(", "))
}

/// Check 2: over 20 batches of 256 nodes sharing 9 stratified anchors on
/// three_moons, the per-anchor per-coordinate standard deviation of the
/// aligned anchor coordinates is at most 0.1x the unaligned one and at
/// most 0.02 in absolute terms.
fn check_anchor_consistency() -> Result<String, String> {
    let ds = generate_toy(ToyKind::ThreeMoons, 9000, 0.05, 0).map_err(|e| e.to_string())?;
    // Unnormalized Laplacian contrasts with a tight kernel: eigenvectors
    // carry no degree scaling, so batch-to-batch jitter is almost pure
    // gauge (signs/rotations), which the affine registration removes.
    let graph = GraphConfig {
        k_neighbors: 20,
        sigma_mode: SigmaMode::Fixed(0.07),
        laplacian_kind: LaplacianKind::Unnormalized,
        ..Default::default()
    };
    let k = 2;
    let l = 9;
    let anchors = draw_anchors(&ds, l, 1, true).map_err(|e| e.to_string())?;
    let anchor_ids: Vec<usize> = anchors.iter().map(|&r| ds.ids[r]).collect();
    let mut raw: Vec<Array2<f64>> = Vec::new();
    let mut aligned: Vec<Array2<f64>> = Vec::new();
    let mut reference: Option<Array2<f64>> = None;
    for s in 0..20u64 {
        let rows = draw_batch(&ds, &anchors, 256, 100 + s).map_err(|e| e.to_string())?;
        let sub = ds.subset(&rows).map_err(|e| e.to_string())?;
        let g = build_graph(&sub.features, &sub.ids, &graph).map_err(|e| e.to_string())?;
        let emb = embed(&g, k, graph.laplacian_kind, true, 0.0).map_err(|e| e.to_string())?;
        let src = emb.rows_for_ids(&anchor_ids).map_err(|e| e.to_string())?;
        raw.push(src.clone());
        match &reference {
            None => {
                reference = Some(src.clone());
                aligned.push(src);
            }
            Some(r) => {
                let fit = fit_affine(&src, r).map_err(|e| e.to_string())?;
                let al = apply_affine(&fit.map, &emb).map_err(|e| e.to_string())?;
                aligned.push(al.rows_for_ids(&anchor_ids).map_err(|e| e.to_string())?);
            }
        }
    }
    let stds = |mats: &[Array2<f64>]| -> Vec<f64> {
        let b = mats.len() as f64;
        let mut out = Vec::with_capacity(l * k);
        for a in 0..l {
            for c in 0..k {
                let mu: f64 = mats.iter().map(|m| m[[a, c]]).sum::<f64>() / b;
                let var: f64 = mats.iter().map(|m| (m[[a, c]] - mu).powi(2)).sum::<f64>() / b;
                out.push(var.sqrt());
            }
        }
        out
    };
    let raw_stds = stds(&raw);
    let aligned_stds = stds(&aligned);
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let raw_mean = mean(&raw_stds);
    let al_mean = mean(&aligned_stds);
    let al_max = aligned_stds.iter().cloned().fold(0.0f64, f64::max);
    if al_mean > 0.1 * raw_mean {
        return fail(format!(
            "aligned std {al_mean:.4} exceeds 0.1x unaligned std {raw_mean:.4}"
        ));
    }
    if al_max > 0.02 {
        return fail(format!("worst aligned std {al_max:.4} exceeds 0.02"));
    }
    Ok(format!(
        "aligned std {al_mean:.4} (max {al_max:.4}) vs unaligned {raw_mean:.4}, ratio {:.3}",
        al_mean / raw_mean
    ))
}

/// Check 3: the trained model's output on a 1000-node held-out subgraph
/// stays within Grassmann distance 0.15 of that subgraph's analytic
/// embedding, with orthogonality defect at most 0.5.
fn check_embedding_fidelity() -> Result<String, String> {
    let ds = generate_toy(ToyKind::ThreeMoons, 9000, 0.05, 0).map_err(|e| e.to_string())?;
    let (train_ds, test_ds) = ds.split(0.8, 0).map_err(|e| e.to_string())?;
    let cfg = toy_config(3, SigmaMode::Fixed(0.12), 16, vec![128, 128], 0);
    let state = train(&train_ds, &cfg, None).map_err(|e| e.to_string())?;
    let rows: Vec<usize> = (0..1000).collect();
    let held = test_ds.subset(&rows).map_err(|e| e.to_string())?;
    let out = state.model.infer(&held.features).map_err(|e| e.to_string())?;
    let g = build_graph(&held.features, &held.ids, &cfg.graph).map_err(|e| e.to_string())?;
    let analytic = embed(&g, cfg.k, cfg.graph.laplacian_kind, cfg.skip_trivial, 0.0)
        .map_err(|e| e.to_string())?;
    let dg = metrics::grassmann_distance(&out, &analytic.coords).map_err(|e| e.to_string())?;
    let orth = metrics::orthogonality_defect(&out).map_err(|e| e.to_string())?;
    if dg > 0.15 {
        return fail(format!("Grassmann distance {dg:.3} exceeds 0.15"));
    }
    if orth > 0.5 {
        return fail(format!("orthogonality defect {orth:.3} exceeds 0.5"));
    }
    Ok(format!("d_G {dg:.3}, orth defect {orth:.3}"))
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.gen::<f64>() * 2.0 - 1.0)
}

/// Check 4: fit_affine recovers a planted affine map from 10 exact
/// correspondences to 1e-8, and RANSAC excludes exactly the planted 20%
/// outliers in at least 95 of 100 seeded trials.
fn check_affine_recovery() -> Result<String, String> {
    // exact recovery
    for k in [2usize, 3, 5] {
        let mut rng = ChaCha8Rng::seed_from_u64(40 + k as u64);
        let mut a = random_matrix(&mut rng, k, k);
        for i in 0..k {
            a[[i, i]] += 2.0; // keep the planted map well-conditioned
        }
        let b = Array1::from_shape_fn(k, |_| rng.gen::<f64>() * 2.0 - 1.0);
        let src = random_matrix(&mut rng, 10, k);
        let mut dst = src.dot(&a.t());
        for mut row in dst.rows_mut() {
            row += &b;
        }
        let fit = fit_affine(&src, &dst).map_err(|e| e.to_string())?;
        let mut planted = Array2::zeros((k, k + 1));
        for i in 0..k {
            for j in 0..k {
                planted[[i, j]] = a[[i, j]];
            }
            planted[[i, k]] = b[i];
        }
        let err = (fit.map.matrix() - &planted)
            .iter()
            .fold(0.0f64, |m, v| m.max(v.abs()));
        if err > 1e-8 {
            return fail(format!("K={k}: planted map recovered only to {err:.2e}"));
        }
    }
    // robust outlier exclusion: 10 anchors, 2 corrupted
    let mut exact = 0;
    for trial in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + trial);
        let k = 2;
        let mut a = random_matrix(&mut rng, k, k);
        for i in 0..k {
            a[[i, i]] += 2.0;
        }
        let b = Array1::from_shape_fn(k, |_| rng.gen::<f64>() * 2.0 - 1.0);
        let src = random_matrix(&mut rng, 10, k);
        let mut dst = src.dot(&a.t());
        for mut row in dst.rows_mut() {
            row += &b;
        }
        // corrupt two distinct rows with offsets well outside the noise
        let o1 = rng.gen_range(0..10);
        let o2 = (o1 + 1 + rng.gen_range(0..9)) % 10;
        for &o in &[o1, o2] {
            for j in 0..k {
                dst[[o, j]] += 1.0 + rng.gen::<f64>();
            }
        }
        let cfg = RansacConfig {
            seed: trial,
            ..Default::default()
        };
        if let Ok((_, mask)) = fit_affine_ransac(&src, &dst, &cfg) {
            let excluded: Vec<usize> = mask
                .iter()
                .enumerate()
                .filter_map(|(i, &m)| (!m).then_some(i))
                .collect();
            let mut want = vec![o1, o2];
            want.sort_unstable();
            if excluded == want {
                exact += 1;
            }
        }
    }
    if exact < 95 {
        return fail(format!(
            "RANSAC excluded exactly the planted outliers in only {exact}/100 trials"
        ));
    }
    Ok(format!(
        "planted maps recovered for K in {{2,3,5}}; outliers isolated in {exact}/100 trials"
    ))
}

/// Check 5: eigensolver residuals and orthonormality on random symmetric
/// matrices, analytic-embedding column orthonormality, and the 1 - lambda
/// correspondence between the normalized Laplacian and diffusion spectra.
fn check_numerical_kernels() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst_resid = 0.0f64;
    for _ in 0..100 {
        let n = rng.gen_range(2..=200);
        let m = random_matrix(&mut rng, n, n);
        let a = (&m + &m.t()) * 0.5;
        let frob = a.iter().map(|v| v * v).sum::<f64>().sqrt();
        let (vals, vecs) = eig_symmetric(&a, n).map_err(|e| e.to_string())?;
        // residuals
        let av = a.dot(&vecs);
        for j in 0..n {
            let mut r2 = 0.0;
            for i in 0..n {
                let r = av[[i, j]] - vals[j] * vecs[[i, j]];
                r2 += r * r;
            }
            let resid = r2.sqrt() / frob.max(1.0);
            worst_resid = worst_resid.max(resid);
            if resid >= 1e-8 {
                return fail(format!("eigen-residual {resid:.2e} at n={n}"));
            }
        }
        // orthonormality of the eigenvector basis
        let gram = vecs.t().dot(&vecs);
        for i in 0..n {
            for j in 0..n {
                let want = if i == j { 1.0 } else { 0.0 };
                if (gram[[i, j]] - want).abs() > 1e-8 {
                    return fail(format!(
                        "eigenvector gram deviates by {:.2e} at n={n}",
                        (gram[[i, j]] - want).abs()
                    ));
                }
            }
        }
    }
    // analytic embedding columns are orthonormal (symmetric kind)
    let ds = generate_toy(ToyKind::GaussianBlobs, 400, 0.3, 7).map_err(|e| e.to_string())?;
    let g = build_graph(&ds.features, &ds.ids, &GraphConfig::default()).map_err(|e| e.to_string())?;
    let emb = embed(&g, 4, LaplacianKind::SymNormalized, true, 0.0).map_err(|e| e.to_string())?;
    let gram = emb.coords.t().dot(&emb.coords);
    for i in 0..4 {
        for j in 0..4 {
            let want = if i == j { 1.0 } else { 0.0 };
            if (gram[[i, j]] - want).abs() > 1e-8 {
                return fail(format!(
                    "embedding gram deviates by {:.2e}",
                    (gram[[i, j]] - want).abs()
                ));
            }
        }
    }
    // spectrum correspondence: gamma_j(P) = 1 - lambda_j(L_N)
    let lam = embed(&g, 5, LaplacianKind::SymNormalized, true, 0.0)
        .map_err(|e| e.to_string())?
        .eigenvalues;
    let gam = embed(&g, 5, LaplacianKind::RandomWalk, true, 0.0)
        .map_err(|e| e.to_string())?
        .eigenvalues;
    let mut worst_gap = 0.0f64;
    for j in 0..5 {
        worst_gap = worst_gap.max(((1.0 - lam[j]) - gam[j]).abs());
    }
    if worst_gap > 1e-10 {
        return fail(format!("spectrum correspondence off by {worst_gap:.2e}"));
    }
    Ok(format!(
        "worst eigen-residual {worst_resid:.1e}, spectra agree to {worst_gap:.1e}"
    ))
}

/// Check 6: clustering metrics agree with brute-force oracles and respect
/// their invariances.
fn check_metric_oracles() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    // ACC equals exhaustive permutation search
    for trial in 0..1000 {
        let c = rng.gen_range(2..=5);
        let n = rng.gen_range(c..=60);
        let truth: Vec<usize> = (0..n).map(|_| rng.gen_range(0..c)).collect();
        let pred: Vec<usize> = (0..n).map(|_| rng.gen_range(0..c)).collect();
        let fast = metrics::acc(&truth, &pred).map_err(|e| e.to_string())?;
        let classes = truth.iter().chain(&pred).max().unwrap() + 1;
        let mut best = 0usize;
        for perm in metrics::permutations(classes) {
            let hits = truth
                .iter()
                .zip(&pred)
                .filter(|&(&t, &p)| t == perm[p])
                .count();
            best = best.max(hits);
        }
        let brute = best as f64 / n as f64;
        if (fast - brute).abs() > 1e-12 {
            return fail(format!(
                "trial {trial}: acc {fast} != exhaustive {brute} (C={c}, n={n})"
            ));
        }
    }
    // assignment solver equals brute force up to 7x7
    for trial in 0..200 {
        let n = rng.gen_range(1..=7);
        let cost = random_matrix(&mut rng, n, n);
        let perm = metrics::kuhn_munkres(&cost).map_err(|e| e.to_string())?;
        let got: f64 = (0..n).map(|i| cost[[i, perm[i]]]).sum();
        let best = metrics::permutations(n)
            .into_iter()
            .map(|p| (0..n).map(|i| cost[[i, p[i]]]).sum::<f64>())
            .fold(f64::INFINITY, f64::min);
        if (got - best).abs() > 1e-12 {
            return fail(format!("trial {trial}: assignment cost {got} != brute {best}"));
        }
    }
    // NMI is exactly 1 under any label permutation
    for _ in 0..50 {
        let c = rng.gen_range(2..=6);
        let n = rng.gen_range(c * 2..=80);
        let mut truth: Vec<usize> = (0..n).map(|_| rng.gen_range(0..c)).collect();
        for v in 0..c {
            truth[v] = v; // every class present
        }
        let mut perm: Vec<usize> = (0..c).collect();
        for i in (1..c).rev() {
            perm.swap(i, rng.gen_range(0..=i));
        }
        let renamed: Vec<usize> = truth.iter().map(|&t| perm[t]).collect();
        let v = metrics::nmi(&truth, &renamed).map_err(|e| e.to_string())?;
        if (v - 1.0).abs() > 1e-12 {
            return fail(format!("NMI under permutation is {v}, expected 1"));
        }
    }
    // Grassmann distance is invariant under invertible column mixing
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let y = random_matrix(&mut rng, 30, 4);
        // shifting the diagonal keeps the random mixing matrix invertible
        let mut m = random_matrix(&mut rng, 4, 4);
        for i in 0..4 {
            m[[i, i]] += 2.5;
        }
        let d = metrics::grassmann_distance(&y, &y.dot(&m)).map_err(|e| e.to_string())?;
        worst = worst.max(d);
        if d > 1e-10 {
            return fail(format!("grassmann(Y, YM) = {d:.2e} for invertible M"));
        }
    }
    Ok(format!(
        "acc/assignment match brute force; invariances hold (worst grassmann {worst:.1e})"
    ))
}

fn flatten_grads(model: &MlpParams, grads: &net::Grads) -> Vec<f64> {
    // same order as MlpParams::flatten: weights then biases, per layer
    let _ = model;
    let mut out = Vec::new();
    for (w, b) in grads.w.iter().zip(&grads.b) {
        out.extend(w.iter());
        out.extend(b.iter());
    }
    out
}

fn central_diff(
    model: &mut MlpParams,
    loss_of: &mut dyn FnMut(&MlpParams) -> f64,
) -> Vec<f64> {
    let theta = model.flatten();
    let h = 1e-6;
    let mut fd = Vec::with_capacity(theta.len());
    for i in 0..theta.len() {
        let mut plus = theta.clone();
        plus[i] += h;
        model.unflatten(&plus).unwrap();
        let fp = loss_of(model);
        let mut minus = theta.clone();
        minus[i] -= h;
        model.unflatten(&minus).unwrap();
        let fm = loss_of(model);
        fd.push((fp - fm) / (2.0 * h));
    }
    model.unflatten(&theta).unwrap();
    fd
}

fn compare_grads(name: &str, analytic: &[f64], fd: &[f64]) -> Result<f64, String> {
    let mut worst = 0.0f64;
    for (i, (&a, &f)) in analytic.iter().zip(fd).enumerate() {
        let rel = (a - f).abs() / (a.abs() + f.abs()).max(1e-4);
        worst = worst.max(rel);
        if rel >= 1e-4 {
            return Err(format!(
                "{name}: gradient component {i} mismatch (analytic {a:.6e}, fd {f:.6e}, rel {rel:.2e})"
            ));
        }
    }
    Ok(worst)
}

/// Check 7: analytic gradients of every loss match central finite
/// differences through the full network.
fn check_gradients() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst = 0.0f64;

    // MSE through a 3-layer network
    {
        let spec = MlpSpec::new(vec![4, 8, 6, 3], 70).map_err(|e| e.to_string())?;
        let mut model = net::init(&spec);
        let x = random_matrix(&mut rng, 5, 4);
        let t = random_matrix(&mut rng, 5, 3);
        let (y, cache) = model.forward(&x).map_err(|e| e.to_string())?;
        let (_, gy) = net::mse_loss_grad(&y, &t).map_err(|e| e.to_string())?;
        let grads = model.backward(&cache, &gy).map_err(|e| e.to_string())?;
        let analytic = flatten_grads(&model, &grads);
        let fd = central_diff(&mut model, &mut |m| {
            let y = m.infer(&x).unwrap();
            net::mse_loss_grad(&y, &t).unwrap().0
        });
        worst = worst.max(compare_grads("mse", &analytic, &fd)?);
    }

    // contrastive loss through a shared encoder, away from kinks
    {
        let spec = MlpSpec::new(vec![4, 8, 3], 71).map_err(|e| e.to_string())?;
        let mut model = net::init(&spec);
        let x_i = random_matrix(&mut rng, 6, 4);
        let x_j = random_matrix(&mut rng, 6, 4);
        let same = [true, false, true, false, true, false];
        let margin = {
            // choose a margin that puts every different-label pair safely
            // on the active side of the hinge, away from the kink
            let (z_i, _) = model.forward(&x_i).map_err(|e| e.to_string())?;
            let (z_j, _) = model.forward(&x_j).map_err(|e| e.to_string())?;
            let mut max_d = 0.0f64;
            for r in 0..6 {
                let d: f64 = (0..3)
                    .map(|c| (z_i[[r, c]] - z_j[[r, c]]).powi(2))
                    .sum::<f64>()
                    .sqrt();
                max_d = max_d.max(d);
            }
            2.0 * max_d + 1.0
        };
        let (z_i, cache_i) = model.forward(&x_i).map_err(|e| e.to_string())?;
        let (z_j, cache_j) = model.forward(&x_j).map_err(|e| e.to_string())?;
        let (_, g_i, g_j) =
            net::contrastive_loss_grad(&z_i, &z_j, &same, margin).map_err(|e| e.to_string())?;
        let gr_i = model.backward(&cache_i, &g_i).map_err(|e| e.to_string())?;
        let gr_j = model.backward(&cache_j, &g_j).map_err(|e| e.to_string())?;
        let analytic: Vec<f64> = flatten_grads(&model, &gr_i)
            .iter()
            .zip(flatten_grads(&model, &gr_j))
            .map(|(a, b)| a + b)
            .collect();
        let fd = central_diff(&mut model, &mut |m| {
            let z_i = m.infer(&x_i).unwrap();
            let z_j = m.infer(&x_j).unwrap();
            net::contrastive_loss_grad(&z_i, &z_j, &same, margin).unwrap().0
        });
        worst = worst.max(compare_grads("contrastive", &analytic, &fd)?);
    }

    // cross-entropy through a classifier head
    {
        let spec = MlpSpec::new(vec![4, 8, 4], 72).map_err(|e| e.to_string())?;
        let mut model = net::init(&spec);
        let x = random_matrix(&mut rng, 6, 4);
        let labels = [0usize, 1, 2, 3, 1, 2];
        let (logits, cache) = model.forward(&x).map_err(|e| e.to_string())?;
        let (_, gy) = net::cross_entropy_loss_grad(&logits, &labels).map_err(|e| e.to_string())?;
        let grads = model.backward(&cache, &gy).map_err(|e| e.to_string())?;
        let analytic = flatten_grads(&model, &grads);
        let fd = central_diff(&mut model, &mut |m| {
            let logits = m.infer(&x).unwrap();
            net::cross_entropy_loss_grad(&logits, &labels).unwrap().0
        });
        worst = worst.max(compare_grads("cross-entropy", &analytic, &fd)?);
    }

    Ok(format!("worst relative gradient error {worst:.1e}"))
}

/// Check 8: after joint feature/embedding training, the model's validation
/// NMI lands within 0.05 of the concurrent analytic-embedding NMI, and
/// disabling the feature-update alignment inflates the final spectral MSE
/// at least 5x on the same seed.
fn check_feature_change() -> Result<String, String> {
    let ds = generate_toy(ToyKind::GaussianBlobs, 2000, 0.3, 0).map_err(|e| e.to_string())?;
    let (train_ds, val_ds) = ds.split(0.8, 0).map_err(|e| e.to_string())?;
    let cfg = JointConfig {
        feature_dim: 2,
        feature_hidden: vec![],
        embed_hidden: vec![32, 32],
        k: 3,
        batch_size: 128,
        anchor_count: 12,
        feature_iters: 500,
        spectral_period: 2,
        margin: 2.0,
        feature_lr: 1e-3,
        spectral_lr: 1e-2,
        pair_batch: 128,
        graph: GraphConfig {
            k_neighbors: 10,
            ..Default::default()
        },
        seed: 0,
        skip_trivial: false,
        disable_alignment: false,
    };
    let state = train_joint(&train_ds, Some(&val_ds), &cfg).map_err(|e| e.to_string())?;
    let last = state
        .history
        .iter()
        .rev()
        .find(|h| h.validation.is_some() && h.analytic.is_some())
        .ok_or("no spectral step recorded validation metrics")?;
    let val_nmi = last.validation.unwrap().nmi;
    let analytic_nmi = last.analytic.unwrap().nmi;
    if val_nmi < analytic_nmi - 0.05 {
        return fail(format!(
            "validation NMI {val_nmi:.3} trails analytic NMI {analytic_nmi:.3} by more than 0.05"
        ));
    }
    let mut ablated_cfg = cfg.clone();
    ablated_cfg.disable_alignment = true;
    let ablated = train_joint(&train_ds, Some(&val_ds), &ablated_cfg).map_err(|e| e.to_string())?;
    let ratio = ablated.final_spectral_loss / state.final_spectral_loss;
    if !(ratio >= 5.0) {
        return fail(format!(
            "ablation/aligned spectral MSE ratio {ratio:.1} below 5 (aligned {:.5}, ablated {:.5})",
            state.final_spectral_loss, ablated.final_spectral_loss
        ));
    }
    Ok(format!(
        "val NMI {val_nmi:.3} vs analytic {analytic_nmi:.3}; ablation MSE ratio {ratio:.1}x"
    ))
}

/// Check 9: two CLI training runs with the same config produce
/// byte-identical history and checkpoint files.
fn check_determinism() -> Result<String, String> {
    let bin = env!("CARGO_BIN_EXE_specalign");
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let config_path = tmp.path().join("experiment.json");
    std::fs::write(
        &config_path,
        r#"{
            "dataset": {"kind": "gaussian_blobs", "n": 400, "noise": 0.25, "seed": 5},
            "train": {
                "k": 2, "batch_size": 60, "anchor_count": 9, "iterations": 40,
                "hidden": [32, 32], "graph": {"k_neighbors": 6},
                "eval_every": 20, "seed": 5
            }
        }"#,
    )
    .map_err(|e| e.to_string())?;
    let mut outputs = Vec::new();
    for run in 0..2 {
        let out_dir = tmp.path().join(format!("run{run}"));
        let status = std::process::Command::new(bin)
            .args(["--config"])
            .arg(&config_path)
            .args(["--out"])
            .arg(&out_dir)
            .arg("train")
            .output()
            .map_err(|e| e.to_string())?;
        if !status.status.success() {
            return fail(format!(
                "train run {run} failed: {}",
                String::from_utf8_lossy(&status.stderr)
            ));
        }
        let history = std::fs::read(out_dir.join("history.jsonl")).map_err(|e| e.to_string())?;
        let ckpt = std::fs::read(out_dir.join("checkpoint.json")).map_err(|e| e.to_string())?;
        outputs.push((history, ckpt));
    }
    if outputs[0].0 != outputs[1].0 {
        return fail("history.jsonl differs between identical runs".into());
    }
    if outputs[0].1 != outputs[1].1 {
        return fail("checkpoint.json differs between identical runs".into());
    }
    Ok(format!(
        "history ({} bytes) and checkpoint ({} bytes) byte-identical",
        outputs[0].0.len(),
        outputs[0].1.len()
    ))
}
