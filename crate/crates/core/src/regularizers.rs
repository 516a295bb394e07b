//! Anchored regression mixup penalty and the baselines it is compared with.
//!
//! The anchored penalty pairs each sample `i` with an anchor `j` drawn from
//! the training set. A contrast-sensitive kernel on the targets,
//!
//! ```text
//! w_i = exp(-|y_i - y_j| / beta^2)
//! ```
//!
//! gates a proportional distance between hidden features,
//!
//! ```text
//! d_i = (lambda / n) * sum_m (y_i * z_jm - y_j * z_im) / (y_j * z_jm)
//! ```
//!
//! which vanishes exactly when `z_i = (y_i / y_j) * z_j`. The penalty added to
//! the empirical risk of batch `i` is `w_i * |d_i|`.

use rand::Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Graph, Scalar, Tensor, Var};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RegularizerError {
    #[error("beta must be positive, got {0}")]
    Beta(f64),
    #[error("alpha must be positive, got {0}")]
    Alpha(f64),
    #[error("lambda must be non-negative, got {0}")]
    Lambda(f64),
    #[error("length mismatch: {0} vs {1}")]
    Length(usize, usize),
    #[error("zero denominator in proportional distance at feature {feature}")]
    GuardViolation { feature: usize },
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    /// Plain dual-batch empirical risk.
    #[default]
    #[serde(alias = "erm")]
    None,
    InputMixup,
    ManifoldMixup,
    #[serde(alias = "anchored")]
    AnchoredRegressionMixup,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::None => "none",
            Method::InputMixup => "input-mixup",
            Method::ManifoldMixup => "manifold-mixup",
            Method::AnchoredRegressionMixup => "anchored-regression-mixup",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "none" | "erm" => Ok(Method::None),
            "input-mixup" => Ok(Method::InputMixup),
            "manifold-mixup" => Ok(Method::ManifoldMixup),
            "anchored-regression-mixup" | "anchored" => Ok(Method::AnchoredRegressionMixup),
            other => Err(format!("unknown method `{other}`")),
        }
    }
}

/// Which pairs a zero denominator removes from the penalty.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum GuardMode {
    /// Drop only the offending pair.
    #[default]
    PerPair,
    /// Drop the penalty for the whole batch if any pair has a zero denominator.
    Batch,
}

/// How the ratio terms are reduced to a penalty.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    /// `mean_i w_i * |d_i|` with `d_i` averaged over features per pair.
    #[default]
    PerPair,
    /// `mean_i(w_i) * |lambda * mean_{i,m}(ratio)|`: one global distance.
    Listing,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MixupConfig {
    pub method: Method,
    /// Kernel width; larger values let more distant targets interact.
    pub beta: f64,
    /// Fixed penalty scale for the anchored method (never sampled).
    pub lambda: f64,
    /// Beta(alpha, alpha) parameter for the mixup baselines.
    pub alpha: f64,
    pub guard: GuardMode,
    pub reduction: Reduction,
}

impl Default for MixupConfig {
    fn default() -> Self {
        Self {
            method: Method::None,
            beta: 1.1,
            lambda: 1e-4,
            alpha: 1.0,
            guard: GuardMode::PerPair,
            reduction: Reduction::PerPair,
        }
    }
}

impl MixupConfig {
    pub fn validate(&self) -> Result<(), RegularizerError> {
        if !(self.beta > 0.0) {
            return Err(RegularizerError::Beta(self.beta));
        }
        if !(self.lambda >= 0.0) {
            return Err(RegularizerError::Lambda(self.lambda));
        }
        if !(self.alpha > 0.0) {
            return Err(RegularizerError::Alpha(self.alpha));
        }
        Ok(())
    }
}

/// Contrast-sensitive kernel `exp(-|y_i - y_j| / beta^2)`, elementwise.
pub fn kernel_weight(y_i: &[f64], y_j: &[f64], beta: f64) -> Result<Vec<f64>, RegularizerError> {
    if !(beta > 0.0) {
        return Err(RegularizerError::Beta(beta));
    }
    if y_i.len() != y_j.len() {
        return Err(RegularizerError::Length(y_i.len(), y_j.len()));
    }
    let b2 = beta * beta;
    Ok(y_i
        .iter()
        .zip(y_j)
        .map(|(a, b)| (-(a - b).abs() / b2).exp())
        .collect())
}

/// Proportional distance `d_i` for one pair, on plain values.
///
/// Errors if any `y_j * z_jm` is exactly zero; callers filter such pairs.
pub fn proportional_distance(
    y_i: f64,
    y_j: f64,
    z_i: &[f64],
    z_j: &[f64],
    lambda: f64,
) -> Result<f64, RegularizerError> {
    if z_i.len() != z_j.len() {
        return Err(RegularizerError::Length(z_i.len(), z_j.len()));
    }
    let mut acc = 0.0;
    for (m, (&zi, &zj)) in z_i.iter().zip(z_j).enumerate() {
        let den = y_j * zj;
        if den == 0.0 {
            return Err(RegularizerError::GuardViolation { feature: m });
        }
        acc += (y_i * zj - y_j * zi) / den;
    }
    Ok(lambda / z_i.len() as f64 * acc)
}

#[derive(Clone, Copy, Debug)]
pub struct PenaltyResult {
    /// Scalar node holding the penalty.
    pub penalty: Var,
    pub applied: usize,
    pub skipped: usize,
}

fn pair_passes_guard<T: Scalar>(y_j: T, z_j_row: &[T]) -> bool {
    z_j_row.iter().all(|&z| y_j * z != T::zero())
}

/// Anchored mixup penalty for a pair of batches, recorded on `g`.
///
/// `z_i` and `z_j` are `[batch, n]` feature nodes; the targets are plain
/// values (already shifted away from zero if desired). The kernel weights are
/// constants, so gradients flow only through the proportional distance.
pub fn anchored_mixup_penalty<T: Scalar>(
    g: &mut Graph<T>,
    y_i: &[f64],
    y_j: &[f64],
    z_i: Var,
    z_j: Var,
    cfg: &MixupConfig,
) -> Result<PenaltyResult, RegularizerError> {
    cfg.validate()?;
    let (zi_shape, zj_shape) = (g.shape(z_i).to_vec(), g.shape(z_j).to_vec());
    if zi_shape != zj_shape || zi_shape.len() != 2 {
        return Err(AutodiffError::ShapeMismatch {
            op: "anchored_mixup_penalty",
            lhs: zi_shape,
            rhs: zj_shape,
        }
        .into());
    }
    let (batch, n) = (zi_shape[0], zi_shape[1]);
    if y_i.len() != batch || y_j.len() != batch {
        return Err(RegularizerError::Length(y_i.len().min(y_j.len()), batch));
    }

    let zj_vals = g.value(z_j).data();
    let mut kept: Vec<usize> = (0..batch)
        .filter(|&b| pair_passes_guard(T::of(y_j[b]), &zj_vals[b * n..(b + 1) * n]))
        .collect();
    if cfg.guard == GuardMode::Batch && kept.len() != batch {
        kept.clear();
    }
    let applied = kept.len();
    let skipped = batch - applied;
    if applied == 0 {
        let penalty = g.scalar(T::zero());
        return Ok(PenaltyResult { penalty, applied, skipped });
    }

    let yi_k: Vec<f64> = kept.iter().map(|&b| y_i[b]).collect();
    let yj_k: Vec<f64> = kept.iter().map(|&b| y_j[b]).collect();
    let weights = kernel_weight(&yi_k, &yj_k, cfg.beta)?;

    // zero-weight pairs contribute nothing; keep them out of the graph
    let (kept, yi_k, yj_k, weights) = if cfg.reduction == Reduction::PerPair {
        let live: Vec<usize> = (0..applied).filter(|&k| T::of(weights[k]) != T::zero()).collect();
        if live.is_empty() {
            let penalty = g.scalar(T::zero());
            return Ok(PenaltyResult { penalty, applied, skipped });
        }
        (
            live.iter().map(|&k| kept[k]).collect(),
            live.iter().map(|&k| yi_k[k]).collect(),
            live.iter().map(|&k| yj_k[k]).collect(),
            live.iter().map(|&k| weights[k]).collect(),
        )
    } else {
        (kept, yi_k, yj_k, weights)
    };
    let rows = kept.len();

    let zi_k = g.index_select(z_i, kept.clone())?;
    let zj_k = g.index_select(z_j, kept)?;
    let yi_c = g.constant(Tensor::from_f64(vec![rows, 1], &yi_k)?);
    let yj_c = g.constant(Tensor::from_f64(vec![rows, 1], &yj_k)?);
    let cross_a = g.mul(yi_c, zj_k)?;
    let cross_b = g.mul(yj_c, zi_k)?;
    let num = g.sub(cross_a, cross_b)?;
    let den = g.mul(yj_c, zj_k)?;
    let ratio = g.div(num, den)?;

    let penalty = match cfg.reduction {
        Reduction::PerPair => {
            let per_pair = g.mean_axis(ratio, 1)?;
            let d = g.scale(per_pair, T::of(cfg.lambda))?;
            let abs_d = g.abs(d)?;
            let w = g.constant(Tensor::from_f64(vec![rows], &weights)?);
            let weighted = g.mul(w, abs_d)?;
            let total = g.sum(weighted)?;
            g.scale(total, T::of(1.0 / applied as f64))?
        }
        Reduction::Listing => {
            let global = g.mean(ratio)?;
            let d = g.scale(global, T::of(cfg.lambda))?;
            let abs_d = g.abs(d)?;
            let w_mean = weights.iter().sum::<f64>() / applied as f64;
            g.scale(abs_d, T::of(w_mean))?
        }
    };
    Ok(PenaltyResult { penalty, applied, skipped })
}

/// Draws `count` mixing coefficients from Beta(alpha, alpha).
pub fn sample_mix_weights<R: Rng + ?Sized>(
    alpha: f64,
    count: usize,
    rng: &mut R,
) -> Result<Vec<f64>, RegularizerError> {
    if !(alpha > 0.0) {
        return Err(RegularizerError::Alpha(alpha));
    }
    let dist = Beta::new(alpha, alpha).map_err(|_| RegularizerError::Alpha(alpha))?;
    Ok((0..count).map(|_| dist.sample(rng)).collect())
}

/// Convex combination of two sample batches with one coefficient per sample.
///
/// `x_i`/`x_j` are `[batch, ...]`; returns `(lam*x_i + (1-lam)*x_j, lam*y_i + (1-lam)*y_j)`.
pub fn mix_with<T: Scalar>(
    x_i: &Tensor<T>,
    y_i: &[T],
    x_j: &Tensor<T>,
    y_j: &[T],
    lams: &[f64],
) -> Result<(Tensor<T>, Vec<T>), RegularizerError> {
    if x_i.shape() != x_j.shape() {
        return Err(AutodiffError::ShapeMismatch {
            op: "mixup",
            lhs: x_i.shape().to_vec(),
            rhs: x_j.shape().to_vec(),
        }
        .into());
    }
    let batch = lams.len();
    if y_i.len() != batch || y_j.len() != batch || x_i.shape().first() != Some(&batch) {
        return Err(RegularizerError::Length(y_i.len(), batch));
    }
    let row = x_i.numel() / batch.max(1);
    let mut data = Vec::with_capacity(x_i.numel());
    let mut ys = Vec::with_capacity(batch);
    for (b, &lam) in lams.iter().enumerate() {
        let (l, r) = (T::of(lam), T::of(1.0 - lam));
        let (a, c) = (&x_i.data()[b * row..(b + 1) * row], &x_j.data()[b * row..(b + 1) * row]);
        data.extend(a.iter().zip(c).map(|(&p, &q)| l * p + r * q));
        ys.push(l * y_i[b] + r * y_j[b]);
    }
    Ok((Tensor::new(x_i.shape().to_vec(), data)?, ys))
}

/// Input mixup: per-sample Beta(alpha, alpha) interpolation of inputs and targets.
pub fn input_mixup<T: Scalar, R: Rng + ?Sized>(
    x_i: &Tensor<T>,
    y_i: &[T],
    x_j: &Tensor<T>,
    y_j: &[T],
    alpha: f64,
    rng: &mut R,
) -> Result<(Tensor<T>, Vec<T>), RegularizerError> {
    let lams = sample_mix_weights(alpha, y_i.len(), rng)?;
    mix_with(x_i, y_i, x_j, y_j, &lams)
}

/// Interpolates hidden features `[batch, n]` with per-sample coefficients, on the graph.
pub fn mix_hidden<T: Scalar>(
    g: &mut Graph<T>,
    z_i: Var,
    z_j: Var,
    lams: &[f64],
) -> Result<Var, RegularizerError> {
    let batch = lams.len();
    let lam = g.constant(Tensor::from_f64(vec![batch, 1], lams)?);
    let one_minus: Vec<f64> = lams.iter().map(|l| 1.0 - l).collect();
    let rest = g.constant(Tensor::from_f64(vec![batch, 1], &one_minus)?);
    let a = g.mul(lam, z_i)?;
    let b = g.mul(rest, z_j)?;
    Ok(g.add(a, b)?)
}

/// Manifold mixup at the extractor output: mixed features and mixed targets.
pub fn manifold_mixup<T: Scalar, R: Rng + ?Sized>(
    g: &mut Graph<T>,
    z_i: Var,
    y_i: &[T],
    z_j: Var,
    y_j: &[T],
    alpha: f64,
    rng: &mut R,
) -> Result<(Var, Vec<T>), RegularizerError> {
    if y_i.len() != y_j.len() || g.shape(z_i).first() != Some(&y_i.len()) {
        return Err(RegularizerError::Length(y_i.len(), y_j.len()));
    }
    let lams = sample_mix_weights(alpha, y_i.len(), rng)?;
    let z = mix_hidden(g, z_i, z_j, &lams)?;
    let ys = lams
        .iter()
        .zip(y_i.iter().zip(y_j))
        .map(|(&l, (&a, &b))| T::of(l) * a + T::of(1.0 - l) * b)
        .collect();
    Ok((z, ys))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    Ridge,
    Lasso,
}

/// `lambda * sum ||p||_2^2` (ridge) or `lambda * sum ||p||_1` (lasso).
pub fn norm_penalty<T: Scalar>(
    g: &mut Graph<T>,
    params: &[Var],
    kind: NormKind,
    lambda: f64,
) -> Result<Var, RegularizerError> {
    if !(lambda >= 0.0) {
        return Err(RegularizerError::Lambda(lambda));
    }
    let mut total = g.scalar(T::zero());
    for &p in params {
        let term = match kind {
            NormKind::Ridge => g.mul(p, p)?,
            NormKind::Lasso => g.abs(p)?,
        };
        let s = g.sum(term)?;
        total = g.add(total, s)?;
    }
    Ok(g.scale(total, T::of(lambda))?)
}
