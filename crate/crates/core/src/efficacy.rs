//! Dirichlet regression from similarity to post-transfer prediction quality.
//!
//! A 1-8-8-4 perceptron with softplus hidden and output units maps a scalar
//! similarity to four positive Dirichlet concentrations over
//! `(TR, FPR, FNR, FDR)`. Training minimises
//!
//! ```text
//! L = -sum_n log Dir(q_n | alpha(s_n))
//!   + lambda_mono * sum_g [ (m_TR(s_g) - m_TR(s_g+1))+ + sum_e (m_e(s_g+1) - m_e(s_g))+ ]
//!   + lambda_conc * mean_g ||alpha(s_g)||_2
//! ```
//!
//! over an equispaced grid on `[0, 1]`, where `m = alpha / sum(alpha)` and
//! `e` ranges over the three error rates. Gradients are computed by hand and
//! the parameters are updated with full-batch Adam.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::{digamma, ln_gamma};

use crate::error::{Error, Result};
use crate::transfer::QualityVector;

/// Layer widths, input to output.
pub const LAYER_SIZES: [usize; 4] = [1, 8, 8, 4];

/// Floor applied to quality components before evaluating the density.
pub const BOUNDARY_EPS: f64 = 1e-6;

/// Positive concentrations ordered `(TR, FPR, FNR, FDR)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DirichletParams([f64; 4]);

impl DirichletParams {
    pub fn new(alpha: [f64; 4]) -> Result<Self> {
        if alpha.iter().any(|a| !(a.is_finite() && *a > 0.0)) {
            return Err(Error::invalid(format!(
                "concentrations must be positive and finite, got {alpha:?}"
            )));
        }
        Ok(Self(alpha))
    }

    pub fn alpha(&self) -> &[f64; 4] {
        &self.0
    }

    pub fn total(&self) -> f64 {
        self.0.iter().sum()
    }

    pub fn mean(&self) -> [f64; 4] {
        let s = self.total();
        self.0.map(|a| a / s)
    }

    pub fn mean_quality(&self) -> QualityVector {
        let m = self.mean();
        QualityVector {
            tr: m[0],
            fpr: m[1],
            fnr: m[2],
            fdr: m[3],
        }
    }
}

/// Floors every component at [`BOUNDARY_EPS`] and renormalises when any
/// component was floored.
pub fn clamp_to_interior(q: &QualityVector) -> [f64; 4] {
    let a = q.to_array();
    if a.iter().all(|&v| v >= BOUNDARY_EPS) {
        return a;
    }
    let floored = a.map(|v| v.max(BOUNDARY_EPS));
    let s: f64 = floored.iter().sum();
    floored.map(|v| v / s)
}

fn log_pdf_interior(q: &[f64; 4], alpha: &[f64; 4]) -> f64 {
    let total: f64 = alpha.iter().sum();
    let mut lp = ln_gamma(total);
    for k in 0..4 {
        lp += -ln_gamma(alpha[k]) + (alpha[k] - 1.0) * q[k].ln();
    }
    lp
}

/// Log density of `Dir(alpha)` at `q`. Boundary points are first moved to the
/// interior with [`clamp_to_interior`].
pub fn dirichlet_log_pdf(q: &QualityVector, alpha: &DirichletParams) -> f64 {
    log_pdf_interior(&clamp_to_interior(q), &alpha.0)
}

/// Anything that predicts Dirichlet concentrations from a similarity score.
pub trait EfficacyModel {
    fn concentrations(&self, similarity: f64) -> DirichletParams;
}

/// A model that ignores similarity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConstantConcentration(pub DirichletParams);

impl EfficacyModel for ConstantConcentration {
    fn concentrations(&self, _similarity: f64) -> DirichletParams {
        self.0
    }
}

#[inline]
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    /// Row-major, `outputs x inputs`.
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
}

impl Dense {
    fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            inputs,
            outputs,
            weights: vec![0.0; inputs * outputs],
            biases: vec![0.0; outputs],
        }
    }

    fn affine(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        for o in 0..self.outputs {
            let row = &self.weights[o * self.inputs..(o + 1) * self.inputs];
            out.push(row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + self.biases[o]);
        }
    }
}

/// Pre-activations of every layer for one input.
struct Trace {
    input: f64,
    pre: Vec<Vec<f64>>,
    post: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpModel {
    layers: Vec<Dense>,
}

impl MlpModel {
    pub fn zeros() -> Self {
        Self {
            layers: LAYER_SIZES
                .windows(2)
                .map(|w| Dense::zeros(w[0], w[1]))
                .collect(),
        }
    }

    /// Weights uniform on `(-0.5, 0.5)`, biases zero.
    pub fn initialize(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = Self::zeros();
        for layer in &mut m.layers {
            for w in &mut layer.weights {
                *w = rng.random_range(-0.5..0.5);
            }
        }
        m
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.biases.len())
            .sum()
    }

    /// Flat parameters: per layer, weights (row-major) then biases.
    pub fn params(&self) -> Vec<f64> {
        let mut p = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            p.extend_from_slice(&l.weights);
            p.extend_from_slice(&l.biases);
        }
        p
    }

    pub fn set_params(&mut self, p: &[f64]) -> Result<()> {
        if p.len() != self.param_count() {
            return Err(Error::invalid(format!(
                "expected {} parameters, got {}",
                self.param_count(),
                p.len()
            )));
        }
        let mut offset = 0;
        for l in &mut self.layers {
            let nw = l.weights.len();
            l.weights.copy_from_slice(&p[offset..offset + nw]);
            offset += nw;
            let nb = l.biases.len();
            l.biases.copy_from_slice(&p[offset..offset + nb]);
            offset += nb;
        }
        Ok(())
    }

    pub fn from_params(p: &[f64]) -> Result<Self> {
        let mut m = Self::zeros();
        m.set_params(p)?;
        Ok(m)
    }

    fn trace(&self, similarity: f64) -> Trace {
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut post: Vec<Vec<f64>> = Vec::with_capacity(self.layers.len());
        let mut x = vec![similarity];
        for l in &self.layers {
            let mut z = Vec::with_capacity(l.outputs);
            l.affine(&x, &mut z);
            x = z.iter().map(|&v| softplus(v)).collect();
            pre.push(z);
            post.push(x.clone());
        }
        Trace {
            input: similarity,
            pre,
            post,
        }
    }

    /// Raw output vector; always four positive values for finite input.
    pub fn forward(&self, similarity: f64) -> [f64; 4] {
        let out = self
            .trace(similarity)
            .post
            .pop()
            .expect("non-empty network");
        [out[0], out[1], out[2], out[3]]
    }

    /// Accumulates `d loss / d params` into `grad` given `d loss / d alpha`.
    fn backprop(&self, trace: &Trace, d_alpha: &[f64; 4], grad: &mut [f64]) {
        let mut offsets = Vec::with_capacity(self.layers.len());
        let mut offset = 0;
        for l in &self.layers {
            offsets.push(offset);
            offset += l.weights.len() + l.biases.len();
        }
        let mut d_post: Vec<f64> = d_alpha.to_vec();
        for li in (0..self.layers.len()).rev() {
            let l = &self.layers[li];
            let delta: Vec<f64> = d_post
                .iter()
                .zip(&trace.pre[li])
                .map(|(g, z)| g * sigmoid(*z))
                .collect();
            let input: &[f64] = if li == 0 {
                std::slice::from_ref(&trace.input)
            } else {
                &trace.post[li - 1]
            };
            let base = offsets[li];
            for o in 0..l.outputs {
                for i in 0..l.inputs {
                    grad[base + o * l.inputs + i] += delta[o] * input[i];
                }
                grad[base + l.weights.len() + o] += delta[o];
            }
            if li > 0 {
                let mut next = vec![0.0; l.inputs];
                for (row, d) in l.weights.chunks_exact(l.inputs).zip(&delta) {
                    for (n, w) in next.iter_mut().zip(row) {
                        *n += w * d;
                    }
                }
                d_post = next;
            }
        }
    }
}

impl EfficacyModel for MlpModel {
    fn concentrations(&self, similarity: f64) -> DirichletParams {
        // Softplus can underflow to exactly 0 for very negative inputs.
        DirichletParams(self.forward(similarity).map(|a| a.max(f64::MIN_POSITIVE)))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub seed: u64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub epochs: usize,
    pub lambda_mono: f64,
    pub lambda_conc: f64,
    pub grid_points: usize,
    /// Learning rate at the last epoch as a fraction of `learning_rate`;
    /// the rate follows a cosine schedule between the two.
    pub final_lr_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            learning_rate: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            epochs: 5000,
            lambda_mono: 1.0,
            lambda_conc: 1e-3,
            grid_points: 101,
            final_lr_fraction: 0.01,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::config("train.learning_rate", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.beta1) {
            return Err(Error::config("train.beta1", "must lie in [0, 1)"));
        }
        if !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::config("train.beta2", "must lie in [0, 1)"));
        }
        if self.epsilon.is_nan() || self.epsilon <= 0.0 {
            return Err(Error::config("train.epsilon", "must be positive"));
        }
        if self.epochs == 0 {
            return Err(Error::config("train.epochs", "must be at least 1"));
        }
        if !(self.lambda_mono >= 0.0 && self.lambda_mono.is_finite()) {
            return Err(Error::config(
                "train.lambda_mono",
                "must be finite and >= 0",
            ));
        }
        if !(self.lambda_conc >= 0.0 && self.lambda_conc.is_finite()) {
            return Err(Error::config(
                "train.lambda_conc",
                "must be finite and >= 0",
            ));
        }
        if self.grid_points < 2 {
            return Err(Error::config("train.grid_points", "must be at least 2"));
        }
        if !(self.final_lr_fraction > 0.0 && self.final_lr_fraction <= 1.0) {
            return Err(Error::config(
                "train.final_lr_fraction",
                "must lie in (0, 1]",
            ));
        }
        Ok(())
    }

    pub fn grid(&self) -> Vec<f64> {
        similarity_grid(self.grid_points)
    }
}

/// `n` equispaced points on `[0, 1]`.
pub fn similarity_grid(n: usize) -> Vec<f64> {
    let last = (n.max(2) - 1) as f64;
    (0..n).map(|g| g as f64 / last).collect()
}

/// One training example: a similarity score and the quality it produced.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EfficacySample {
    pub similarity: f64,
    pub quality: QualityVector,
}

impl From<&crate::transfer::TransferRecord> for EfficacySample {
    fn from(r: &crate::transfer::TransferRecord) -> Self {
        Self {
            similarity: r.similarity,
            quality: r.quality,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub nll: f64,
    pub monotonicity: f64,
    pub concentration: f64,
}

impl LossBreakdown {
    pub fn total(&self) -> f64 {
        self.nll + self.monotonicity + self.concentration
    }
}

/// Sum of hinge violations of "mean TR non-decreasing, mean error rates
/// non-increasing" between consecutive grid points. Also returns
/// `d penalty / d mean` for each grid point.
fn monotonicity_terms(means: &[[f64; 4]]) -> (f64, Vec<[f64; 4]>) {
    let mut penalty = 0.0;
    let mut d_mean = vec![[0.0; 4]; means.len()];
    for g in 0..means.len().saturating_sub(1) {
        let (a, b) = (&means[g], &means[g + 1]);
        let v = a[0] - b[0];
        if v > 0.0 {
            penalty += v;
            d_mean[g][0] += 1.0;
            d_mean[g + 1][0] -= 1.0;
        }
        for k in 1..4 {
            let v = b[k] - a[k];
            if v > 0.0 {
                penalty += v;
                d_mean[g + 1][k] += 1.0;
                d_mean[g][k] -= 1.0;
            }
        }
    }
    (penalty, d_mean)
}

fn loss_impl(
    model: &MlpModel,
    samples: &[EfficacySample],
    cfg: &TrainConfig,
    mut grad: Option<&mut [f64]>,
) -> LossBreakdown {
    let mut out = LossBreakdown::default();

    for s in samples {
        let trace = model.trace(s.similarity);
        let alpha = last4(&trace);
        let q = clamp_to_interior(&s.quality);
        out.nll -= log_pdf_interior(&q, &alpha);
        if let Some(g) = grad.as_deref_mut() {
            let psi_total = digamma(alpha.iter().sum());
            let d: [f64; 4] = std::array::from_fn(|k| -(psi_total - digamma(alpha[k]) + q[k].ln()));
            model.backprop(&trace, &d, g);
        }
    }

    if cfg.lambda_mono == 0.0 && cfg.lambda_conc == 0.0 {
        return out;
    }
    let grid = cfg.grid();
    let traces: Vec<Trace> = grid.iter().map(|&s| model.trace(s)).collect();
    let alphas: Vec<[f64; 4]> = traces.iter().map(last4).collect();
    let means: Vec<[f64; 4]> = alphas
        .iter()
        .map(|a| {
            let t: f64 = a.iter().sum();
            a.map(|v| v / t)
        })
        .collect();
    let (mono, d_mean) = monotonicity_terms(&means);
    out.monotonicity = cfg.lambda_mono * mono;
    let n_grid = grid.len() as f64;
    let norms: Vec<f64> = alphas
        .iter()
        .map(|a| a.iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    out.concentration = cfg.lambda_conc * norms.iter().sum::<f64>() / n_grid;

    if let Some(g) = grad {
        for (gi, trace) in traces.iter().enumerate() {
            let a = &alphas[gi];
            let m = &means[gi];
            let total: f64 = a.iter().sum();
            let dm = d_mean[gi].map(|v| cfg.lambda_mono * v);
            let dot: f64 = dm.iter().zip(m).map(|(x, y)| x * y).sum();
            let d: [f64; 4] = std::array::from_fn(|j| {
                (dm[j] - dot) / total + cfg.lambda_conc / n_grid * a[j] / norms[gi]
            });
            if d.iter().any(|v| *v != 0.0) {
                model.backprop(trace, &d, g);
            }
        }
    }
    out
}

fn last4(t: &Trace) -> [f64; 4] {
    let o = t.post.last().expect("non-empty network");
    [o[0], o[1], o[2], o[3]]
}

/// Three-term training loss, split by term.
pub fn loss_breakdown(
    model: &MlpModel,
    samples: &[EfficacySample],
    cfg: &TrainConfig,
) -> LossBreakdown {
    loss_impl(model, samples, cfg, None)
}

pub fn loss(model: &MlpModel, samples: &[EfficacySample], cfg: &TrainConfig) -> f64 {
    loss_breakdown(model, samples, cfg).total()
}

/// Loss and its gradient with respect to [`MlpModel::params`].
pub fn loss_and_gradient(
    model: &MlpModel,
    samples: &[EfficacySample],
    cfg: &TrainConfig,
) -> (f64, Vec<f64>) {
    let mut grad = vec![0.0; model.param_count()];
    let l = loss_impl(model, samples, cfg, Some(&mut grad));
    (l.total(), grad)
}

/// Result of [`train`].
#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub model: MlpModel,
    pub initial_loss: f64,
    pub best_loss: f64,
    pub best_epoch: usize,
}

/// Full-batch Adam from a seeded initialisation. Returns the parameters with
/// the lowest loss seen, including the initial ones.
pub fn train(samples: &[EfficacySample], cfg: &TrainConfig) -> Result<TrainedModel> {
    cfg.validate()?;
    if samples.len() < 4 {
        return Err(Error::invalid(format!(
            "training needs at least 4 records, got {}",
            samples.len()
        )));
    }
    if samples.iter().any(|s| !s.similarity.is_finite()) {
        return Err(Error::invalid("similarity values must be finite"));
    }
    let first = samples[0].similarity;
    if samples.iter().all(|s| s.similarity == first) {
        return Err(Error::invalid(
            "training records must span at least two similarity values",
        ));
    }

    let mut model = MlpModel::initialize(cfg.seed);
    let mut params = model.params();
    let mut m = vec![0.0; params.len()];
    let mut v = vec![0.0; params.len()];
    let (initial_loss, _) = loss_and_gradient(&model, samples, cfg);
    if !initial_loss.is_finite() {
        return Err(Error::TrainingDiverged {
            epoch: 0,
            loss: initial_loss,
        });
    }
    let mut best = (initial_loss, params.clone(), 0);

    for epoch in 1..=cfg.epochs {
        let (l, grad) = loss_and_gradient(&model, samples, cfg);
        if !l.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::TrainingDiverged {
                epoch: epoch - 1,
                loss: l,
            });
        }
        if l < best.0 {
            best = (l, params.clone(), epoch - 1);
        }
        let t = epoch as i32;
        let progress = (epoch - 1) as f64 / (cfg.epochs.max(2) - 1) as f64;
        let lr = cfg.learning_rate
            * (cfg.final_lr_fraction
                + (1.0 - cfg.final_lr_fraction)
                    * 0.5
                    * (1.0 + (std::f64::consts::PI * progress).cos()));
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        for i in 0..params.len() {
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * grad[i];
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * grad[i] * grad[i];
            params[i] -= lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + cfg.epsilon);
        }
        model.set_params(&params)?;
    }
    let final_loss = loss(&model, samples, cfg);
    if !final_loss.is_finite() {
        return Err(Error::TrainingDiverged {
            epoch: cfg.epochs,
            loss: final_loss,
        });
    }
    if final_loss < best.0 {
        best = (final_loss, params, cfg.epochs);
    }
    model.set_params(&best.1)?;
    Ok(TrainedModel {
        model,
        initial_loss,
        best_loss: best.0,
        best_epoch: best.2,
    })
}

/// Draws `n` points from `Dir(alpha)` by normalising independent
/// `Gamma(alpha_k, 1)` variates.
pub fn sample_dirichlet<R: Rng + ?Sized>(
    alpha: &DirichletParams,
    n: usize,
    rng: &mut R,
) -> Vec<[f64; 4]> {
    let gammas: Vec<Gamma<f64>> = alpha
        .0
        .iter()
        .map(|&a| Gamma::new(a, 1.0).expect("validated concentration"))
        .collect();
    let mean = alpha.mean();
    (0..n)
        .map(|_| {
            let g: [f64; 4] = std::array::from_fn(|k| gammas[k].sample(rng));
            let s: f64 = g.iter().sum();
            if s > 0.0 && s.is_finite() {
                g.map(|x| x / s)
            } else {
                // all four draws underflowed; only possible for tiny alphas
                mean
            }
        })
        .collect()
}

/// Linear-interpolation quantile of sorted data.
pub(crate) fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Analytic mean and sampled central interval per quality component.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QualityPrediction {
    pub similarity: f64,
    pub alpha: DirichletParams,
    pub mean: [f64; 4],
    pub lower: [f64; 4],
    pub upper: [f64; 4],
}

pub fn predict_with_ci<M: EfficacyModel + ?Sized>(
    model: &M,
    similarity: f64,
    n_samples: usize,
    level: f64,
    seed: u64,
) -> Result<QualityPrediction> {
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::invalid(format!(
            "confidence level must lie in (0, 1), got {level}"
        )));
    }
    if n_samples == 0 {
        return Err(Error::invalid("need at least one sample"));
    }
    let alpha = model.concentrations(similarity);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let draws = sample_dirichlet(&alpha, n_samples, &mut rng);
    let tail = (1.0 - level) / 2.0;
    let mut lower = [0.0; 4];
    let mut upper = [0.0; 4];
    let mut column = Vec::with_capacity(n_samples);
    for k in 0..4 {
        column.clear();
        column.extend(draws.iter().map(|d| d[k]));
        column.sort_by(f64::total_cmp);
        lower[k] = quantile_sorted(&column, tail);
        upper[k] = quantile_sorted(&column, 1.0 - tail);
    }
    Ok(QualityPrediction {
        similarity,
        alpha,
        mean: alpha.mean(),
        lower,
        upper,
    })
}

/// On-disk form of a trained model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub layer_sizes: Vec<usize>,
    pub activation: String,
    pub layers: Vec<Dense>,
    pub config: TrainConfig,
}

impl ModelFile {
    pub fn new(model: &MlpModel, config: &TrainConfig) -> Self {
        Self {
            layer_sizes: LAYER_SIZES.to_vec(),
            activation: "softplus".into(),
            layers: model.layers.clone(),
            config: config.clone(),
        }
    }

    pub fn into_model(self) -> Result<MlpModel> {
        if self.layer_sizes != LAYER_SIZES {
            return Err(Error::invalid(format!(
                "unsupported layer sizes {:?}",
                self.layer_sizes
            )));
        }
        let expected = MlpModel::zeros();
        for (l, e) in self.layers.iter().zip(&expected.layers) {
            if l.inputs != e.inputs
                || l.outputs != e.outputs
                || l.weights.len() != e.weights.len()
                || l.biases.len() != e.biases.len()
            {
                return Err(Error::invalid("layer shapes do not match 1-8-8-4"));
            }
        }
        if self.layers.len() != expected.layers.len() {
            return Err(Error::invalid("expected three dense layers"));
        }
        Ok(MlpModel {
            layers: self.layers,
        })
    }
}
