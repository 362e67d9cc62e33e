//! Training orchestration: batch-aligned embedding regression and the
//! joint feature-change loop, plus out-of-sample inference.
//!
//! Each training iteration draws a fresh batch containing the anchors,
//! computes its analytic embedding, registers it onto the frozen anchor
//! reference frame and takes one gradient step of the MSE loss toward the
//! aligned coordinates. Inference on new nodes is a single forward pass;
//! no graph is built.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::align::{self, AnchorFrame, RansacConfig};
use crate::dataset::{draw_anchors, draw_batch, Dataset};
use crate::error::{Error, Result};
use crate::graph::{build_graph, GraphConfig};
use crate::metrics;
use crate::net::{self, Grads, MlpParams, MlpSpec};
use crate::spectral::{embed, Embedding};

/// How many fresh draws to attempt when a batch graph comes out with an
/// isolated node.
const CONNECTIVITY_RETRIES: usize = 5;

fn default_hidden() -> Vec<usize> {
    // 5 FC layers total: input, three hidden of width 256, output
    vec![256, 256, 256]
}

fn default_lr() -> f64 {
    1e-3
}

fn default_true() -> bool {
    true
}

fn default_steps_per_batch() -> usize {
    1
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Embedding dimension K.
    pub k: usize,
    /// Batch size m.
    pub batch_size: usize,
    /// Anchor count l; at least K+1.
    pub anchor_count: usize,
    pub iterations: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    /// When set, the learning rate decays cosine-style from `lr` to this
    /// value over the run. Spectral targets carry irreducible batch
    /// sampling noise; letting the step size shrink makes the network
    /// settle on the batch-average target instead of chasing the noise.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lr_final: Option<f64>,
    /// Optimizer steps taken on each drawn batch. The eigendecomposition
    /// dominates an iteration's cost, so several cheap network steps per
    /// batch buy convergence almost for free.
    #[serde(default = "default_steps_per_batch")]
    pub steps_per_batch: usize,
    /// Hidden layer widths of the regression network.
    #[serde(default = "default_hidden")]
    pub hidden: Vec<usize>,
    #[serde(default)]
    pub graph: GraphConfig,
    #[serde(default)]
    pub ransac: Option<RansacConfig>,
    #[serde(default)]
    pub seed: u64,
    /// Evaluate on the held-out split every this many iterations; 0 = never.
    #[serde(default)]
    pub eval_every: usize,
    /// Balance anchors across label classes when labels exist.
    #[serde(default = "default_true")]
    pub stratified_anchors: bool,
    #[serde(default = "default_true")]
    pub skip_trivial: bool,
    /// Diffusion time t (random-walk kind only).
    #[serde(default)]
    pub diffusion_time: f64,
}

impl TrainConfig {
    pub fn validate(&self, n: usize) -> Result<()> {
        self.graph.validate()?;
        if self.anchor_count < self.k + 1 {
            return Err(Error::Config(format!(
                "anchor_count {} must be at least K+1 = {}",
                self.anchor_count,
                self.k + 1
            )));
        }
        if self.anchor_count > self.batch_size {
            return Err(Error::Config(format!(
                "anchor_count {} exceeds batch_size {}",
                self.anchor_count, self.batch_size
            )));
        }
        if self.batch_size > n {
            return Err(Error::Config(format!(
                "batch_size {} exceeds dataset size {n}",
                self.batch_size
            )));
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::Config(format!("bad learning rate {}", self.lr)));
        }
        if self.steps_per_batch == 0 {
            return Err(Error::Config("steps_per_batch must be >= 1".into()));
        }
        if let Some(f) = self.lr_final {
            if !(f.is_finite() && f >= 0.0 && f <= self.lr) {
                return Err(Error::Config(format!(
                    "lr_final {f} must be finite and in [0, lr = {}]",
                    self.lr
                )));
            }
        }
        Ok(())
    }
}

/// Clustering agreement of an evaluation pass.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub nmi: f64,
    pub acc: f64,
}

/// One line of training history, serialized as JSON-lines.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HistoryRecord {
    pub iter: usize,
    pub loss: f64,
    pub align_rmse: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub metrics: Option<EvalMetrics>,
}

/// Final state of a training run.
#[derive(Debug)]
pub struct TrainState {
    pub model: MlpParams,
    pub frame: AnchorFrame,
    /// Row indices of the anchors in the training dataset.
    pub anchor_rows: Vec<usize>,
    pub history: Vec<HistoryRecord>,
}

fn derive_seed(base: u64, stream: u64, index: u64) -> u64 {
    // splitmix-style mixing keeps the derived streams independent
    let mut z = base
        .wrapping_add(stream.wrapping_mul(0x9E3779B97F4A7C15))
        .wrapping_add(index.wrapping_mul(0xBF58476D1CE4E5B9));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

/// Draws the anchor set, extends it to the reference set, embeds it and
/// freezes the anchors' coordinates as the reference frame.
pub fn init_reference(ds: &Dataset, cfg: &TrainConfig) -> Result<(AnchorFrame, Vec<usize>)> {
    cfg.validate(ds.len())?;
    let stratified = cfg.stratified_anchors && ds.labels.is_some();
    let anchor_rows = draw_anchors(ds, cfg.anchor_count, derive_seed(cfg.seed, 1, 0), stratified)?;
    let ref_rows = draw_batch(ds, &anchor_rows, cfg.batch_size, derive_seed(cfg.seed, 2, 0))?;
    let emb = embed_rows(ds, &ref_rows, cfg)?;
    let anchor_ids: Vec<usize> = anchor_rows.iter().map(|&r| ds.ids[r]).collect();
    let ref_coords = emb.rows_for_ids(&anchor_ids)?;
    Ok((AnchorFrame::new(anchor_ids, ref_coords)?, anchor_rows))
}

/// Analytic embedding of a row subset of a dataset.
fn embed_rows(ds: &Dataset, rows: &[usize], cfg: &TrainConfig) -> Result<Embedding> {
    let ids: Vec<usize> = rows.iter().map(|&r| ds.ids[r]).collect();
    let g = build_graph(&ds.features_at(rows), &ids, &cfg.graph)?;
    embed(
        &g,
        cfg.k,
        cfg.graph.laplacian_kind,
        cfg.skip_trivial,
        cfg.diffusion_time,
    )
}

fn draw_connected_batch(
    ds: &Dataset,
    anchor_rows: &[usize],
    cfg: &TrainConfig,
    iter: usize,
) -> Result<(Vec<usize>, Embedding)> {
    let mut last_err = None;
    for attempt in 0..CONNECTIVITY_RETRIES {
        let seed = derive_seed(cfg.seed, 3 + attempt as u64, iter as u64);
        let rows = draw_batch(ds, anchor_rows, cfg.batch_size, seed)?;
        match embed_rows(ds, &rows, cfg) {
            Ok(emb) => return Ok((rows, emb)),
            Err(e @ Error::IsolatedNode { .. }) => last_err = Some(e),
            Err(e) => return Err(e),
        }
    }
    Err(Error::Training {
        iter,
        msg: format!(
            "no connected batch after {CONNECTIVITY_RETRIES} draws: {}",
            last_err.unwrap()
        ),
    })
}

/// Clustering agreement of K-means on the model's output for a labeled set.
fn eval_model(model: &MlpParams, eval: &Dataset, seed: u64) -> Result<Option<EvalMetrics>> {
    let Some(labels) = eval.labels.as_ref() else {
        return Ok(None);
    };
    let classes = eval.class_count().unwrap();
    let coords = model.infer(&eval.features)?;
    let pred = metrics::kmeans(&metrics::row_normalize(&coords), classes, 10, seed)?;
    Ok(Some(EvalMetrics {
        nmi: metrics::nmi(labels, &pred)?,
        acc: metrics::acc(labels, &pred)?,
    }))
}

/// Runs the batch-aligned training scheme and returns the final state.
///
/// `eval_set` is an optional held-out labeled split; clustering metrics on
/// it are recorded every `eval_every` iterations.
pub fn train(ds: &Dataset, cfg: &TrainConfig, eval_set: Option<&Dataset>) -> Result<TrainState> {
    let (frame, anchor_rows) = init_reference(ds, cfg)?;
    let mut widths = vec![ds.dim()];
    widths.extend(&cfg.hidden);
    widths.push(cfg.k);
    let mut model = net::init(&MlpSpec::new(widths, derive_seed(cfg.seed, 0, 0))?);
    let mut history = Vec::with_capacity(cfg.iterations);

    for iter in 0..cfg.iterations {
        let (rows, emb) = draw_connected_batch(ds, &anchor_rows, cfg, iter)?;
        let aligned = align_batch_step(&emb, &frame, cfg, iter)?;
        let x = ds.features_at(&rows);
        let lr = match cfg.lr_final {
            Some(f) if cfg.iterations > 1 => {
                let progress = iter as f64 / (cfg.iterations - 1) as f64;
                f + 0.5 * (cfg.lr - f) * (1.0 + (std::f64::consts::PI * progress).cos())
            }
            _ => cfg.lr,
        };
        let mut loss = f64::NAN;
        for sub_step in 0..cfg.steps_per_batch {
            let (y, cache) = model.forward(&x).map_err(|e| at_iter(e, iter))?;
            let (step_loss, gy) = net::mse_loss_grad(&y, &aligned.embedding.coords)?;
            if !step_loss.is_finite() {
                return Err(Error::Training {
                    iter,
                    msg: format!("non-finite training loss {step_loss}"),
                });
            }
            if sub_step == 0 {
                loss = step_loss;
            }
            let grads = model.backward(&cache, &gy).map_err(|e| at_iter(e, iter))?;
            model.step(&grads, lr).map_err(|e| at_iter(e, iter))?;
        }

        let metrics = match (eval_set, cfg.eval_every) {
            (Some(eval), every) if every > 0 && (iter + 1) % every == 0 => {
                eval_model(&model, eval, derive_seed(cfg.seed, 9, iter as u64))?
            }
            _ => None,
        };
        history.push(HistoryRecord {
            iter,
            loss,
            align_rmse: aligned.fit.residual_rmse,
            metrics,
        });
    }

    Ok(TrainState {
        model,
        frame,
        anchor_rows,
        history,
    })
}

fn align_batch_step(
    emb: &Embedding,
    frame: &AnchorFrame,
    cfg: &TrainConfig,
    iter: usize,
) -> Result<align::AlignedBatch> {
    let ransac = cfg.ransac.as_ref().map(|r| RansacConfig {
        seed: derive_seed(cfg.seed, 7, iter as u64),
        ..r.clone()
    });
    align::align_batch(emb, frame, ransac.as_ref()).map_err(|e| at_iter(e, iter))
}

fn at_iter(e: Error, iter: usize) -> Error {
    match e {
        e @ Error::Training { .. } => e,
        other => Error::Training {
            iter,
            msg: other.to_string(),
        },
    }
}

/// Out-of-sample extension: one forward pass, no graph construction.
pub fn infer(model: &MlpParams, features: &Array2<f64>) -> Result<Array2<f64>> {
    model.infer(features)
}

/// Settings for the joint feature-change training loop.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct JointConfig {
    /// Output dimension of the feature module.
    pub feature_dim: usize,
    /// Hidden widths of the feature module.
    #[serde(default = "default_hidden")]
    pub feature_hidden: Vec<usize>,
    /// Hidden widths of the spectral module.
    #[serde(default = "default_hidden")]
    pub embed_hidden: Vec<usize>,
    pub k: usize,
    pub batch_size: usize,
    pub anchor_count: usize,
    /// Total feature-module iterations.
    pub feature_iters: usize,
    /// A spectral-module step runs every this many feature iterations.
    pub spectral_period: usize,
    /// Contrastive margin epsilon.
    pub margin: f64,
    #[serde(default = "default_lr")]
    pub feature_lr: f64,
    #[serde(default = "default_lr")]
    pub spectral_lr: f64,
    /// Contrastive pairs per feature step.
    #[serde(default = "default_pair_batch")]
    pub pair_batch: usize,
    #[serde(default)]
    pub graph: GraphConfig,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_true")]
    pub skip_trivial: bool,
    /// Ablation: skip the feature-update alignment (T_G forced identity).
    #[serde(default)]
    pub disable_alignment: bool,
}

fn default_pair_batch() -> usize {
    128
}

/// One line of joint-training history. Spectral fields are present only on
/// iterations where a spectral step ran.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct JointHistoryRecord {
    pub iter: usize,
    pub feature_loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub spectral_loss: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub align_rmse: Option<f64>,
    /// Max deviation of the fitted feature-update map from identity.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub update_map_identity_dev: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub analytic: Option<EvalMetrics>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub model_train: Option<EvalMetrics>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub validation: Option<EvalMetrics>,
}

#[derive(Debug)]
pub struct JointState {
    pub feature_model: MlpParams,
    pub spectral_model: MlpParams,
    pub history: Vec<JointHistoryRecord>,
    /// Mean spectral loss over the final 10 spectral steps.
    pub final_spectral_loss: f64,
}

/// Trains the supervised feature module (contrastive loss) and the
/// spectral module simultaneously; before every spectral step the
/// reference embedding is recomputed under the current features and
/// re-registered onto its previous anchor coordinates.
pub fn train_joint(
    ds: &Dataset,
    validation: Option<&Dataset>,
    cfg: &JointConfig,
) -> Result<JointState> {
    let labels = ds
        .labels
        .as_ref()
        .ok_or_else(|| Error::Precondition("joint training requires labels".into()))?;
    cfg.graph.validate()?;
    if cfg.margin <= 0.0 {
        return Err(Error::Config(format!("margin must be positive, got {}", cfg.margin)));
    }
    if cfg.spectral_period == 0 {
        return Err(Error::Config("spectral_period must be >= 1".into()));
    }
    if cfg.anchor_count < cfg.k + 1 {
        return Err(Error::Config(format!(
            "anchor_count {} must be at least K+1 = {}",
            cfg.anchor_count,
            cfg.k + 1
        )));
    }

    let mut feat_widths = vec![ds.dim()];
    feat_widths.extend(&cfg.feature_hidden);
    feat_widths.push(cfg.feature_dim);
    let mut feature_model = net::init(&MlpSpec::new(feat_widths, derive_seed(cfg.seed, 10, 0))?);

    let mut spec_widths = vec![cfg.feature_dim];
    spec_widths.extend(&cfg.embed_hidden);
    spec_widths.push(cfg.k);
    let mut spectral_model = net::init(&MlpSpec::new(spec_widths, derive_seed(cfg.seed, 11, 0))?);

    let anchor_rows = draw_anchors(ds, cfg.anchor_count, derive_seed(cfg.seed, 12, 0), true)?;
    let ref_rows = draw_batch(ds, &anchor_rows, cfg.batch_size, derive_seed(cfg.seed, 13, 0))?;
    let anchor_ids: Vec<usize> = anchor_rows.iter().map(|&r| ds.ids[r]).collect();

    // anchor coordinates in the rolling frame, under the previous features
    let mut prev_anchor_coords: Option<Array2<f64>> = None;
    let mut pair_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 14, 0));
    let mut history = Vec::new();
    let mut spectral_losses: Vec<f64> = Vec::new();

    for iter in 0..cfg.feature_iters {
        // feature step: contrastive loss on sampled pairs
        let n = ds.len();
        let rows_i: Vec<usize> = (0..cfg.pair_batch).map(|_| pair_rng.gen_range(0..n)).collect();
        let rows_j: Vec<usize> = (0..cfg.pair_batch).map(|_| pair_rng.gen_range(0..n)).collect();
        let same: Vec<bool> = rows_i
            .iter()
            .zip(&rows_j)
            .map(|(&a, &b)| labels[a] == labels[b])
            .collect();
        let x_i = ds.features_at(&rows_i);
        let x_j = ds.features_at(&rows_j);
        let (z_i, cache_i) = feature_model.forward(&x_i).map_err(|e| at_iter(e, iter))?;
        let (z_j, cache_j) = feature_model.forward(&x_j).map_err(|e| at_iter(e, iter))?;
        let (feature_loss, g_i, g_j) = net::contrastive_loss_grad(&z_i, &z_j, &same, cfg.margin)?;
        let grads_i = feature_model.backward(&cache_i, &g_i)?;
        let grads_j = feature_model.backward(&cache_j, &g_j)?;
        let grads = add_grads(grads_i, grads_j);
        feature_model
            .step(&grads, cfg.feature_lr)
            .map_err(|e| at_iter(e, iter))?;

        let mut record = JointHistoryRecord {
            iter,
            feature_loss,
            spectral_loss: None,
            align_rmse: None,
            update_map_identity_dev: None,
            analytic: None,
            model_train: None,
            validation: None,
        };

        if (iter + 1) % cfg.spectral_period == 0 {
            spectral_update(
                ds,
                validation,
                cfg,
                iter,
                &anchor_rows,
                &ref_rows,
                &anchor_ids,
                &feature_model,
                &mut spectral_model,
                &mut prev_anchor_coords,
                &mut record,
            )?;
            if let Some(l) = record.spectral_loss {
                spectral_losses.push(l);
            }
        }
        history.push(record);
    }

    let tail = spectral_losses.len().saturating_sub(10);
    let final_spectral_loss = if spectral_losses.is_empty() {
        f64::NAN
    } else {
        spectral_losses[tail..].iter().sum::<f64>() / (spectral_losses.len() - tail) as f64
    };

    Ok(JointState {
        feature_model,
        spectral_model,
        history,
        final_spectral_loss,
    })
}

#[allow(clippy::too_many_arguments)]
fn spectral_update(
    ds: &Dataset,
    validation: Option<&Dataset>,
    cfg: &JointConfig,
    iter: usize,
    anchor_rows: &[usize],
    ref_rows: &[usize],
    anchor_ids: &[usize],
    feature_model: &MlpParams,
    spectral_model: &mut MlpParams,
    prev_anchor_coords: &mut Option<Array2<f64>>,
    record: &mut JointHistoryRecord,
) -> Result<()> {
    let labels = ds.labels.as_ref().unwrap();
    let classes = ds.class_count().unwrap();

    // reference embedding under the current features
    let ref_ids: Vec<usize> = ref_rows.iter().map(|&r| ds.ids[r]).collect();
    let z_ref = feature_model.infer(&ds.features_at(ref_rows))?;
    let g_ref = build_graph(&z_ref, &ref_ids, &cfg.graph).map_err(|e| at_iter(e, iter))?;
    let emb_ref = embed(
        &g_ref,
        cfg.k,
        cfg.graph.laplacian_kind,
        cfg.skip_trivial,
        0.0,
    )
    .map_err(|e| at_iter(e, iter))?;

    let aligned_ref = match (&*prev_anchor_coords, cfg.disable_alignment) {
        (Some(prev), false) => {
            let (aligned, fit) = crate::align::align_feature_update(prev, &emb_ref, anchor_ids)
                .map_err(|e| at_iter(e, iter))?;
            record.align_rmse = Some(fit.residual_rmse);
            record.update_map_identity_dev = Some(fit.map.deviation_from_identity());
            aligned
        }
        _ => emb_ref,
    };
    let frame_coords = aligned_ref.rows_for_ids(anchor_ids)?;
    *prev_anchor_coords = Some(frame_coords.clone());
    let frame = AnchorFrame::new(anchor_ids.to_vec(), frame_coords)?;

    // one aligned batch step for the spectral module
    let mut batch = None;
    let mut last_err = None;
    for attempt in 0..CONNECTIVITY_RETRIES {
        let seed = derive_seed(cfg.seed, 20 + attempt as u64, iter as u64);
        let rows = draw_batch(ds, anchor_rows, cfg.batch_size, seed)?;
        let ids: Vec<usize> = rows.iter().map(|&r| ds.ids[r]).collect();
        let z = feature_model.infer(&ds.features_at(&rows))?;
        match build_graph(&z, &ids, &cfg.graph) {
            Ok(g) => {
                batch = Some((rows, z, g));
                break;
            }
            Err(e @ Error::IsolatedNode { .. }) => last_err = Some(e),
            Err(e) => return Err(at_iter(e, iter)),
        }
    }
    let Some((rows, z, g)) = batch else {
        return Err(Error::Training {
            iter,
            msg: format!(
                "no connected batch after {CONNECTIVITY_RETRIES} draws: {}",
                last_err.unwrap()
            ),
        });
    };
    let emb = embed(&g, cfg.k, cfg.graph.laplacian_kind, cfg.skip_trivial, 0.0)
        .map_err(|e| at_iter(e, iter))?;
    let aligned = crate::align::align_batch(&emb, &frame, None).map_err(|e| at_iter(e, iter))?;

    let (y, cache) = spectral_model.forward(&z)?;
    let (loss, gy) = net::mse_loss_grad(&y, &aligned.embedding.coords)?;
    let grads = spectral_model.backward(&cache, &gy)?;
    spectral_model
        .step(&grads, cfg.spectral_lr)
        .map_err(|e| at_iter(e, iter))?;
    record.spectral_loss = Some(loss);

    // clustering metrics: analytic embedding, model on train batch, model
    // on validation
    let batch_labels: Vec<usize> = rows.iter().map(|&r| labels[r]).collect();
    let km_seed = derive_seed(cfg.seed, 30, iter as u64);
    let analytic_pred = metrics::kmeans(
        &metrics::row_normalize(&aligned.embedding.coords),
        classes,
        10,
        km_seed,
    )?;
    record.analytic = Some(EvalMetrics {
        nmi: metrics::nmi(&batch_labels, &analytic_pred)?,
        acc: metrics::acc(&batch_labels, &analytic_pred)?,
    });
    let model_pred = metrics::kmeans(&metrics::row_normalize(&y), classes, 10, km_seed.wrapping_add(1))?;
    record.model_train = Some(EvalMetrics {
        nmi: metrics::nmi(&batch_labels, &model_pred)?,
        acc: metrics::acc(&batch_labels, &model_pred)?,
    });
    if let Some(val) = validation {
        if let Some(val_labels) = val.labels.as_ref() {
            let z_val = feature_model.infer(&val.features)?;
            let y_val = spectral_model.infer(&z_val)?;
            let val_pred = metrics::kmeans(
                &metrics::row_normalize(&y_val),
                classes,
                10,
                km_seed.wrapping_add(2),
            )?;
            record.validation = Some(EvalMetrics {
                nmi: metrics::nmi(val_labels, &val_pred)?,
                acc: metrics::acc(val_labels, &val_pred)?,
            });
        }
    }
    Ok(())
}

fn add_grads(mut a: Grads, b: Grads) -> Grads {
    for (ga, gb) in a.w.iter_mut().zip(&b.w) {
        *ga += gb;
    }
    for (ga, gb) in a.b.iter_mut().zip(&b.b) {
        *ga += gb;
    }
    a
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_toy, generate_toy_blobs, ToyKind};

    fn blob_cfg() -> TrainConfig {
        TrainConfig {
            k: 2,
            batch_size: 60,
            anchor_count: 9,
            iterations: 30,
            lr: 1e-3,
            lr_final: None,
            steps_per_batch: 1,
            hidden: vec![32, 32],
            graph: GraphConfig {
                k_neighbors: 6,
                ..Default::default()
            },
            ransac: None,
            seed: 7,
            eval_every: 0,
            stratified_anchors: true,
            skip_trivial: true,
            diffusion_time: 0.0,
        }
    }

    #[test]
    fn reference_is_deterministic() {
        let ds = generate_toy_blobs(300, 0.3, 3, 3).unwrap();
        let cfg = blob_cfg();
        let (a, rows_a) = init_reference(&ds, &cfg).unwrap();
        let (b, rows_b) = init_reference(&ds, &cfg).unwrap();
        assert_eq!(rows_a, rows_b);
        assert_eq!(a.anchor_ids, b.anchor_ids);
        assert_eq!(a.ref_coords, b.ref_coords);
    }

    #[test]
    fn reference_with_l_equals_m_is_the_anchor_embedding() {
        let ds = generate_toy_blobs(300, 0.3, 3, 3).unwrap();
        let mut cfg = blob_cfg();
        cfg.batch_size = cfg.anchor_count;
        let (frame, rows) = init_reference(&ds, &cfg).unwrap();
        assert_eq!(rows.len(), cfg.anchor_count);
        // ref_coords are the full reference embedding of exactly the anchors
        let emb = embed_rows(&ds, &rows, &cfg).unwrap();
        let from_emb = emb
            .rows_for_ids(&rows.iter().map(|&r| ds.ids[r]).collect::<Vec<_>>())
            .unwrap();
        assert_eq!(frame.ref_coords, from_emb);
    }

    #[test]
    fn reference_clusters_are_grouped_in_embedding_space() {
        let ds = generate_toy_blobs(300, 0.2, 3, 3).unwrap();
        let cfg = blob_cfg();
        let (frame, rows) = init_reference(&ds, &cfg).unwrap();
        let labels = ds.labels.as_ref().unwrap();
        let anchor_labels: Vec<usize> = rows.iter().map(|&r| labels[r]).collect();
        // same-cluster anchors sit closer than cross-cluster anchors once
        // the degree scaling is removed (rows compared as directions)
        let l = rows.len();
        let mut unit = frame.ref_coords.clone();
        for mut row in unit.rows_mut() {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            row.mapv_inplace(|v| v / norm);
        }
        let dist = |a: usize, b: usize| -> f64 {
            (0..frame.k())
                .map(|j| (unit[[a, j]] - unit[[b, j]]).powi(2))
                .sum::<f64>()
                .sqrt()
        };
        let mut max_same: f64 = 0.0;
        let mut min_cross = f64::INFINITY;
        for a in 0..l {
            for b in (a + 1)..l {
                let d = dist(a, b);
                if anchor_labels[a] == anchor_labels[b] {
                    max_same = max_same.max(d);
                } else {
                    min_cross = min_cross.min(d);
                }
            }
        }
        assert!(
            max_same < min_cross,
            "same-cluster spread {max_same} vs cross-cluster gap {min_cross}"
        );
    }

    #[test]
    fn zero_iterations_returns_init_model() {
        let ds = generate_toy_blobs(200, 0.3, 3, 3).unwrap();
        let mut cfg = blob_cfg();
        cfg.iterations = 0;
        let state = train(&ds, &cfg, None).unwrap();
        assert!(state.history.is_empty());
        let mut widths = vec![2];
        widths.extend(&cfg.hidden);
        widths.push(cfg.k);
        let fresh = net::init(&MlpSpec::new(widths, derive_seed(cfg.seed, 0, 0)).unwrap());
        assert_eq!(state.model.flatten(), fresh.flatten());
    }

    #[test]
    fn training_records_history_and_descends() {
        let ds = generate_toy_blobs(300, 0.25, 5, 3).unwrap();
        let mut cfg = blob_cfg();
        cfg.iterations = 120;
        let state = train(&ds, &cfg, None).unwrap();
        assert_eq!(state.history.len(), 120);
        let early: f64 =
            state.history[..20].iter().map(|h| h.loss).sum::<f64>() / 20.0;
        let late: f64 =
            state.history[100..].iter().map(|h| h.loss).sum::<f64>() / 20.0;
        assert!(late < early, "loss trend: early {early}, late {late}");
    }

    #[test]
    fn training_is_reproducible() {
        let ds = generate_toy_blobs(200, 0.3, 3, 3).unwrap();
        let cfg = blob_cfg();
        let a = train(&ds, &cfg, None).unwrap();
        let b = train(&ds, &cfg, None).unwrap();
        assert_eq!(a.model.flatten(), b.model.flatten());
        for (ha, hb) in a.history.iter().zip(&b.history) {
            assert_eq!(ha.loss.to_bits(), hb.loss.to_bits());
            assert_eq!(ha.align_rmse.to_bits(), hb.align_rmse.to_bits());
        }
    }

    #[test]
    fn inference_is_a_pure_forward_pass() {
        let ds = generate_toy_blobs(200, 0.3, 3, 3).unwrap();
        let mut cfg = blob_cfg();
        cfg.iterations = 5;
        let state = train(&ds, &cfg, None).unwrap();
        let mut x = ds.features_at(&[0, 1, 0]);
        let out = infer(&state.model, &x).unwrap();
        // duplicated input row gives identical output rows
        for j in 0..cfg.k {
            assert_eq!(out[[0, j]], out[[2, j]]);
        }
        // a grid beyond the training support stays finite
        x = Array2::from_shape_fn((25, 2), |(i, j)| {
            let v = -10.0 + (i as f64) * 0.8;
            if j == 0 {
                v
            } else {
                10.0 - (i as f64) * 0.8
            }
        });
        let out = infer(&state.model, &x).unwrap();
        assert!(out.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn eval_metrics_recorded_when_requested() {
        let ds = generate_toy_blobs(300, 0.2, 3, 3).unwrap();
        let (train_ds, test_ds) = ds.split(0.8, 1).unwrap();
        let mut cfg = blob_cfg();
        cfg.iterations = 20;
        cfg.eval_every = 10;
        let state = train(&train_ds, &cfg, Some(&test_ds)).unwrap();
        let with_metrics: Vec<_> = state
            .history
            .iter()
            .filter(|h| h.metrics.is_some())
            .collect();
        assert_eq!(with_metrics.len(), 2);
    }

    fn joint_cfg() -> JointConfig {
        JointConfig {
            feature_dim: 2,
            feature_hidden: vec![16],
            embed_hidden: vec![32, 32],
            k: 2,
            batch_size: 60,
            anchor_count: 9,
            feature_iters: 40,
            spectral_period: 10,
            margin: 1.0,
            feature_lr: 1e-3,
            spectral_lr: 1e-3,
            pair_batch: 32,
            graph: GraphConfig {
                k_neighbors: 6,
                ..Default::default()
            },
            seed: 3,
            skip_trivial: true,
            disable_alignment: false,
        }
    }

    #[test]
    fn joint_requires_labels() {
        let ds = generate_toy_blobs(200, 0.3, 3, 3).unwrap();
        let unlabeled = Dataset::new(ds.features.clone(), None, None).unwrap();
        assert!(matches!(
            train_joint(&unlabeled, None, &joint_cfg()),
            Err(Error::Precondition(_))
        ));
    }

    #[test]
    fn joint_frozen_features_give_identity_update_map() {
        let ds = generate_toy(ToyKind::GaussianBlobs, 300, 0.25, 5).unwrap();
        let mut cfg = joint_cfg();
        cfg.feature_lr = 0.0;
        let state = train_joint(&ds, None, &cfg).unwrap();
        let devs: Vec<f64> = state
            .history
            .iter()
            .filter_map(|h| h.update_map_identity_dev)
            .collect();
        assert!(!devs.is_empty());
        for d in devs {
            assert!(d < 1e-6, "update map deviates from identity by {d}");
        }
    }

    #[test]
    fn joint_records_spectral_steps_on_schedule() {
        let ds = generate_toy(ToyKind::GaussianBlobs, 300, 0.25, 5).unwrap();
        let state = train_joint(&ds, None, &joint_cfg()).unwrap();
        let spectral_iters: Vec<usize> = state
            .history
            .iter()
            .filter(|h| h.spectral_loss.is_some())
            .map(|h| h.iter)
            .collect();
        assert_eq!(spectral_iters, vec![9, 19, 29, 39]);
        assert!(state.final_spectral_loss.is_finite());
    }
}
