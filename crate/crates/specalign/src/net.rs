//! Minimal fully-connected networks with explicit forward/backward passes
//! and an adaptive-moment optimizer.
//!
//! Used for the embedding regressor (MSE loss), the supervised feature
//! module (contrastive loss) and the linear probe (cross-entropy). No
//! autodiff graph: each loss supplies its own output gradient and the
//! backward pass propagates it through the layers.

use std::path::Path;

use ndarray::{Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Architecture: layer widths `[d, h1, ..., K]` with a rectifier between
/// all layers except after the last.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub layer_widths: Vec<usize>,
    pub seed: u64,
}

impl MlpSpec {
    pub fn new(layer_widths: Vec<usize>, seed: u64) -> Result<Self> {
        if layer_widths.len() < 2 {
            return Err(Error::Config("need at least input and output widths".into()));
        }
        if layer_widths.iter().any(|&w| w == 0) {
            return Err(Error::Config("zero layer width".into()));
        }
        Ok(Self { layer_widths, seed })
    }

    pub fn input_dim(&self) -> usize {
        self.layer_widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_widths.last().unwrap()
    }
}

/// Network parameters plus optimizer state.
#[derive(Debug, Clone)]
pub struct MlpParams {
    spec: MlpSpec,
    /// Per layer, (fan_in x fan_out).
    weights: Vec<Array2<f64>>,
    biases: Vec<Array1<f64>>,
    step_count: u64,
    m_w: Vec<Array2<f64>>,
    v_w: Vec<Array2<f64>>,
    m_b: Vec<Array1<f64>>,
    v_b: Vec<Array1<f64>>,
}

/// Cached activations from a forward pass, consumed by `backward`.
pub struct ForwardCache {
    /// Input to each layer (layer count + 1 entries, last is the output).
    activations: Vec<Array2<f64>>,
    /// Pre-activation of each layer.
    pre_activations: Vec<Array2<f64>>,
}

/// Parameter gradients, shaped like the parameters.
#[derive(Debug, Clone)]
pub struct Grads {
    pub w: Vec<Array2<f64>>,
    pub b: Vec<Array1<f64>>,
}

/// Weights drawn zero-mean with variance 2/fan_in, biases zero;
/// deterministic under the spec seed.
pub fn init(spec: &MlpSpec) -> MlpParams {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut weights = Vec::new();
    let mut biases = Vec::new();
    for pair in spec.layer_widths.windows(2) {
        let (fan_in, fan_out) = (pair[0], pair[1]);
        let std = (2.0 / fan_in as f64).sqrt();
        weights.push(Array2::from_shape_fn((fan_in, fan_out), |_| {
            std * standard_normal(&mut rng)
        }));
        biases.push(Array1::zeros(fan_out));
    }
    let m_w = weights.iter().map(|w| Array2::zeros(w.dim())).collect();
    let v_w = weights.iter().map(|w| Array2::zeros(w.dim())).collect();
    let m_b = biases.iter().map(|b| Array1::zeros(b.len())).collect();
    let v_b = biases.iter().map(|b| Array1::zeros(b.len())).collect();
    MlpParams {
        spec: spec.clone(),
        weights,
        biases,
        step_count: 0,
        m_w,
        v_w,
        m_b,
        v_b,
    }
}

fn standard_normal<R: Rng>(rng: &mut R) -> f64 {
    let u1: f64 = rng.gen::<f64>().max(f64::MIN_POSITIVE);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

impl MlpParams {
    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn weights(&self) -> &[Array2<f64>] {
        &self.weights
    }

    pub fn biases(&self) -> &[Array1<f64>] {
        &self.biases
    }

    fn layer_count(&self) -> usize {
        self.weights.len()
    }

    /// Forward pass with cached activations for `backward`.
    pub fn forward(&self, x: &Array2<f64>) -> Result<(Array2<f64>, ForwardCache)> {
        if x.ncols() != self.spec.input_dim() {
            return Err(Error::Shape(format!(
                "input has {} columns, network expects {}",
                x.ncols(),
                self.spec.input_dim()
            )));
        }
        let layers = self.layer_count();
        let mut activations = Vec::with_capacity(layers + 1);
        let mut pre_activations = Vec::with_capacity(layers);
        activations.push(x.clone());
        for (i, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let mut z = activations[i].dot(w);
            for mut row in z.rows_mut() {
                row += b;
            }
            pre_activations.push(z.clone());
            let a = if i + 1 == layers {
                z
            } else {
                z.mapv_into(|v| v.max(0.0))
            };
            activations.push(a);
        }
        let out = activations.last().unwrap().clone();
        Ok((
            out,
            ForwardCache {
                activations,
                pre_activations,
            },
        ))
    }

    /// Inference-only forward pass.
    pub fn infer(&self, x: &Array2<f64>) -> Result<Array2<f64>> {
        Ok(self.forward(x)?.0)
    }

    /// Backpropagates an output gradient through the cached pass.
    pub fn backward(&self, cache: &ForwardCache, grad_out: &Array2<f64>) -> Result<Grads> {
        let layers = self.layer_count();
        let out = cache.activations.last().unwrap();
        if grad_out.dim() != out.dim() {
            return Err(Error::Shape("output gradient shape mismatch".into()));
        }
        let mut dw = vec![Array2::zeros((0, 0)); layers];
        let mut db = vec![Array1::zeros(0); layers];
        let mut delta = grad_out.clone();
        for i in (0..layers).rev() {
            if i + 1 != layers {
                // rectifier gate; subgradient 0 at the kink
                let z = &cache.pre_activations[i];
                delta.zip_mut_with(z, |d, &zv| {
                    if zv <= 0.0 {
                        *d = 0.0;
                    }
                });
            }
            dw[i] = cache.activations[i].t().dot(&delta);
            db[i] = delta.sum_axis(Axis(0));
            if i > 0 {
                delta = delta.dot(&self.weights[i].t());
            }
        }
        Ok(Grads { w: dw, b: db })
    }

    /// One adaptive-moment update (decay 0.9/0.999, eps 1e-8).
    pub fn step(&mut self, grads: &Grads, lr: f64) -> Result<()> {
        if grads.w.len() != self.layer_count() || grads.b.len() != self.layer_count() {
            return Err(Error::Shape("gradient layer count mismatch".into()));
        }
        for (g, w) in grads.w.iter().zip(&self.weights) {
            if g.dim() != w.dim() {
                return Err(Error::Shape("weight gradient shape mismatch".into()));
            }
            if !g.iter().all(|v| v.is_finite()) {
                return Err(Error::Training {
                    iter: self.step_count as usize,
                    msg: "non-finite weight gradient".into(),
                });
            }
        }
        for (g, b) in grads.b.iter().zip(&self.biases) {
            if g.len() != b.len() {
                return Err(Error::Shape("bias gradient shape mismatch".into()));
            }
            if !g.iter().all(|v| v.is_finite()) {
                return Err(Error::Training {
                    iter: self.step_count as usize,
                    msg: "non-finite bias gradient".into(),
                });
            }
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let bc1 = 1.0 - ADAM_BETA1.powi(t);
        let bc2 = 1.0 - ADAM_BETA2.powi(t);
        for i in 0..self.layer_count() {
            adam_update(
                self.weights[i].iter_mut(),
                self.m_w[i].iter_mut(),
                self.v_w[i].iter_mut(),
                grads.w[i].iter(),
                lr,
                bc1,
                bc2,
            );
            adam_update(
                self.biases[i].iter_mut(),
                self.m_b[i].iter_mut(),
                self.v_b[i].iter_mut(),
                grads.b[i].iter(),
                lr,
                bc1,
                bc2,
            );
        }
        for w in &self.weights {
            if !w.iter().all(|v| v.is_finite()) {
                return Err(Error::Training {
                    iter: self.step_count as usize,
                    msg: "non-finite parameter after update".into(),
                });
            }
        }
        Ok(())
    }

    /// All parameters as one flat vector (weights then biases, per layer).
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for i in 0..self.layer_count() {
            out.extend(self.weights[i].iter());
            out.extend(self.biases[i].iter());
        }
        out
    }

    /// Writes a flat vector back into the parameters; optimizer state is
    /// untouched.
    pub fn unflatten(&mut self, flat: &[f64]) -> Result<()> {
        let expected: usize = self
            .weights
            .iter()
            .map(|w| w.len())
            .sum::<usize>()
            + self.biases.iter().map(|b| b.len()).sum::<usize>();
        if flat.len() != expected {
            return Err(Error::Shape(format!(
                "flat vector has {} entries, expected {expected}",
                flat.len()
            )));
        }
        let mut it = flat.iter();
        for i in 0..self.layer_count() {
            for v in self.weights[i].iter_mut() {
                *v = *it.next().unwrap();
            }
            for v in self.biases[i].iter_mut() {
                *v = *it.next().unwrap();
            }
        }
        Ok(())
    }
}

fn adam_update<'a>(
    params: impl Iterator<Item = &'a mut f64>,
    m: impl Iterator<Item = &'a mut f64>,
    v: impl Iterator<Item = &'a mut f64>,
    grads: impl Iterator<Item = &'a f64>,
    lr: f64,
    bias_corr1: f64,
    bias_corr2: f64,
) {
    for (((p, m), v), &g) in params.zip(m).zip(v).zip(grads) {
        *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
        *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
        let m_hat = *m / bias_corr1;
        let v_hat = *v / bias_corr2;
        *p -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
    }
}

/// Mean squared row-norm loss and its gradient w.r.t. the outputs.
pub fn mse_loss_grad(y: &Array2<f64>, targets: &Array2<f64>) -> Result<(f64, Array2<f64>)> {
    if y.dim() != targets.dim() {
        return Err(Error::Shape("output/target shape mismatch".into()));
    }
    let m = y.nrows() as f64;
    let diff = y - targets;
    let loss = diff.iter().map(|v| v * v).sum::<f64>() / m;
    let grad = diff.mapv(|v| 2.0 * v / m);
    Ok((loss, grad))
}

/// Supervised pairwise contrastive loss.
///
/// Same-label pairs contribute the squared distance, different-label pairs
/// the squared hinge max(0, margin - distance)^2; mean over pairs.
/// Subgradients are zero at the hinge kink and at zero distance.
pub fn contrastive_loss_grad(
    z_i: &Array2<f64>,
    z_j: &Array2<f64>,
    same_label: &[bool],
    margin: f64,
) -> Result<(f64, Array2<f64>, Array2<f64>)> {
    if z_i.dim() != z_j.dim() {
        return Err(Error::Shape("paired batches of unequal shape".into()));
    }
    if same_label.len() != z_i.nrows() {
        return Err(Error::Shape("mask length mismatch".into()));
    }
    if margin <= 0.0 {
        return Err(Error::Config(format!("margin must be positive, got {margin}")));
    }
    let p = z_i.nrows();
    let k = z_i.ncols();
    let mut loss = 0.0;
    let mut grad_i = Array2::zeros((p, k));
    let mut grad_j = Array2::zeros((p, k));
    for r in 0..p {
        let mut d2 = 0.0;
        for c in 0..k {
            let diff = z_i[[r, c]] - z_j[[r, c]];
            d2 += diff * diff;
        }
        let d = d2.sqrt();
        if same_label[r] {
            loss += d2;
            for c in 0..k {
                let diff = z_i[[r, c]] - z_j[[r, c]];
                grad_i[[r, c]] = 2.0 * diff / p as f64;
                grad_j[[r, c]] = -2.0 * diff / p as f64;
            }
        } else if d < margin && d > 0.0 {
            let hinge = margin - d;
            loss += hinge * hinge;
            // d/dz_i max(0, margin - d)^2 = -2 (margin - d) (z_i - z_j) / d
            for c in 0..k {
                let diff = z_i[[r, c]] - z_j[[r, c]];
                let g = -2.0 * hinge * diff / d / p as f64;
                grad_i[[r, c]] = g;
                grad_j[[r, c]] = -g;
            }
        }
    }
    Ok((loss / p as f64, grad_i, grad_j))
}

/// Softmax cross-entropy loss and gradient w.r.t. the logits.
pub fn cross_entropy_loss_grad(
    logits: &Array2<f64>,
    labels: &[usize],
) -> Result<(f64, Array2<f64>)> {
    let m = logits.nrows();
    let c = logits.ncols();
    if labels.len() != m {
        return Err(Error::Shape("label count mismatch".into()));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::Precondition(format!(
            "label {bad} out of range for {c} classes"
        )));
    }
    let mut loss = 0.0;
    let mut grad = Array2::zeros((m, c));
    for i in 0..m {
        let row = logits.row(i);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|&v| (v - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        loss += -(exps[labels[i]] / sum).ln();
        for j in 0..c {
            let p = exps[j] / sum;
            grad[[i, j]] = (p - f64::from(u8::from(j == labels[i]))) / m as f64;
        }
    }
    Ok((loss / m as f64, grad))
}

/// JSON checkpoint; full-precision floats so load round-trips bitwise.
#[derive(Serialize, Deserialize)]
struct Checkpoint {
    spec: MlpSpec,
    step_count: u64,
    weights: Vec<Vec<f64>>,
    biases: Vec<Vec<f64>>,
    m_w: Vec<Vec<f64>>,
    v_w: Vec<Vec<f64>>,
    m_b: Vec<Vec<f64>>,
    v_b: Vec<Vec<f64>>,
}

pub fn save_checkpoint(params: &MlpParams, path: &Path) -> Result<()> {
    let ck = Checkpoint {
        spec: params.spec.clone(),
        step_count: params.step_count,
        weights: params.weights.iter().map(|w| w.iter().copied().collect()).collect(),
        biases: params.biases.iter().map(|b| b.to_vec()).collect(),
        m_w: params.m_w.iter().map(|w| w.iter().copied().collect()).collect(),
        v_w: params.v_w.iter().map(|w| w.iter().copied().collect()).collect(),
        m_b: params.m_b.iter().map(|b| b.to_vec()).collect(),
        v_b: params.v_b.iter().map(|b| b.to_vec()).collect(),
    };
    std::fs::write(path, serde_json::to_string(&ck)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<MlpParams> {
    let ck: Checkpoint = serde_json::from_str(&std::fs::read_to_string(path)?)?;
    let mut params = init(&ck.spec);
    let unflatten2 = |shape: (usize, usize), data: &[f64]| -> Result<Array2<f64>> {
        Array2::from_shape_vec(shape, data.to_vec())
            .map_err(|e| Error::Shape(format!("checkpoint array: {e}")))
    };
    if ck.weights.len() != params.layer_count() {
        return Err(Error::Shape("checkpoint layer count mismatch".into()));
    }
    for i in 0..params.layer_count() {
        let dim = params.weights[i].dim();
        params.weights[i] = unflatten2(dim, &ck.weights[i])?;
        params.m_w[i] = unflatten2(dim, &ck.m_w[i])?;
        params.v_w[i] = unflatten2(dim, &ck.v_w[i])?;
        if ck.biases[i].len() != params.biases[i].len() {
            return Err(Error::Shape("checkpoint bias width mismatch".into()));
        }
        params.biases[i] = Array1::from_vec(ck.biases[i].clone());
        params.m_b[i] = Array1::from_vec(ck.m_b[i].clone());
        params.v_b[i] = Array1::from_vec(ck.v_b[i].clone());
    }
    params.step_count = ck.step_count;
    Ok(params)
}
