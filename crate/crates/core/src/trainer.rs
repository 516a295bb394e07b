//! Dual-loader training loop, SGD with momentum, and MAE evaluation.
//!
//! Every step draws a batch `i` and an anchor batch `j` from two independent
//! shuffles of the training set. Plain ERM averages the two batch losses; the
//! anchored method adds its penalty to the loss of batch `i` only; the mixup
//! baselines train on the interpolated batch instead.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Graph, Scalar, Tensor, Var};
use crate::datasets::{Dataset, PairBatch};
use crate::models::{BoundParams, ModelError, SplitModel};
use crate::regularizers::{
    anchored_mixup_penalty, input_mixup, manifold_mixup, norm_penalty, Method, MixupConfig, NormKind,
    RegularizerError,
};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(
        "non-finite loss at epoch {epoch}, batch {batch} (penalty {penalty}, skipped pair ratio {skipped_ratio:.3})"
    )]
    NonFinite {
        epoch: usize,
        batch: usize,
        penalty: f64,
        skipped_ratio: f64,
    },
    #[error("cannot evaluate on an empty dataset")]
    EmptyDataset,
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Regularizer(#[from] RegularizerError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormConfig {
    pub kind: NormKind,
    pub lambda: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Added to targets before they enter the anchored penalty, keeping
    /// `y_j = 0` away from the denominator. The L1 loss uses raw targets.
    pub target_shift: f64,
    pub norm: Option<NormConfig>,
    pub eval_batch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-2,
            momentum: 0.9,
            batch_size: 64,
            epochs: 30,
            target_shift: 1.0,
            norm: None,
            eval_batch: 500,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.learning_rate >= 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return Err(TrainError::Config(
                "learning rate must be >= 0 and momentum in [0, 1)".into(),
            ));
        }
        if self.batch_size == 0 || self.epochs == 0 || self.eval_batch == 0 {
            return Err(TrainError::Config("batch sizes and epochs must be positive".into()));
        }
        Ok(())
    }
}

/// SGD with heavy-ball momentum: `v <- mu v + g`, `p <- p - lr v`.
#[derive(Clone, Debug)]
pub struct Sgd<T> {
    pub learning_rate: T,
    pub momentum: T,
    velocity: Vec<Vec<T>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(learning_rate: f64, momentum: f64, params: &[Tensor<T>]) -> Self {
        Self {
            learning_rate: T::of(learning_rate),
            momentum: T::of(momentum),
            velocity: params.iter().map(|p| vec![T::zero(); p.numel()]).collect(),
        }
    }

    pub fn velocity(&self) -> &[Vec<T>] {
        &self.velocity
    }

    /// Applies one update. Parameters without a gradient are treated as having zero gradient.
    pub fn step(&mut self, params: &mut [Tensor<T>], grads: &[Option<Tensor<T>>]) {
        for ((p, v), g) in params.iter_mut().zip(&mut self.velocity).zip(grads) {
            let data = p.data_mut();
            match g {
                Some(g) => {
                    for ((pv, vv), &gv) in data.iter_mut().zip(v.iter_mut()).zip(g.data()) {
                        *vv = self.momentum * *vv + gv;
                        *pv = *pv - self.learning_rate * *vv;
                    }
                }
                None => {
                    for (pv, vv) in data.iter_mut().zip(v.iter_mut()) {
                        *vv = self.momentum * *vv;
                        *pv = *pv - self.learning_rate * *vv;
                    }
                }
            }
        }
    }
}

/// `mean |pred - y|` recorded on the graph; `pred` is `[batch, 1]` or `[batch]`.
pub fn l1_loss<T: Scalar>(g: &mut Graph<T>, pred: Var, y: &[T]) -> Result<Var, TrainError> {
    let shape = g.shape(pred).to_vec();
    if shape.first() != Some(&y.len()) || shape.iter().product::<usize>() != y.len() {
        return Err(AutodiffError::ShapeMismatch {
            op: "l1_loss",
            lhs: shape,
            rhs: vec![y.len()],
        }
        .into());
    }
    let target = g.constant(Tensor::new(shape, y.to_vec())?);
    let diff = g.sub(pred, target)?;
    let abs = g.abs(diff)?;
    Ok(g.mean(abs)?)
}

fn batch_tensor<T: Scalar>(model: &SplitModel<T>, inputs: Vec<f32>, batch: usize) -> Result<Tensor<T>, TrainError> {
    let mut shape = vec![batch];
    shape.extend(model.spec().input_shape());
    let data = inputs.into_iter().map(|v| T::of(v as f64)).collect();
    Ok(Tensor::new(shape, data)?)
}

/// Model predictions for every sample of `ds`, in order.
pub fn predict_dataset<T: Scalar>(model: &SplitModel<T>, ds: &Dataset, eval_batch: usize) -> Result<Vec<f64>, TrainError> {
    let mut out = Vec::with_capacity(ds.len());
    let idx: Vec<usize> = (0..ds.len()).collect();
    for chunk in idx.chunks(eval_batch.max(1)) {
        let (inputs, _) = ds.gather(chunk);
        let x = batch_tensor(model, inputs, chunk.len())?;
        let preds = model.predict(x.data(), chunk.len())?;
        out.extend(preds.into_iter().map(|v| v.as_f64()));
    }
    Ok(out)
}

/// Mean absolute error over every sample of `ds`.
pub fn mae<T: Scalar>(model: &SplitModel<T>, ds: &Dataset, eval_batch: usize) -> Result<f64, TrainError> {
    if ds.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let preds = predict_dataset(model, ds, eval_batch)?;
    let total: f64 = preds
        .iter()
        .zip(ds.targets())
        .map(|(p, &y)| (p - y as f64).abs())
        .sum();
    Ok(total / ds.len() as f64)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub loss_mean: f64,
    pub penalty_mean: f64,
    pub applied_pairs: usize,
    pub skipped_pairs: usize,
    pub batches: usize,
}

impl EpochStats {
    pub fn skipped_ratio(&self) -> f64 {
        let total = self.applied_pairs + self.skipped_pairs;
        if total == 0 {
            0.0
        } else {
            self.skipped_pairs as f64 / total as f64
        }
    }
}

/// Outcome of one optimisation step, before the parameter update.
pub struct StepOutcome<T> {
    pub loss: f64,
    pub penalty: f64,
    pub applied: usize,
    pub skipped: usize,
    pub grads: Vec<Option<Tensor<T>>>,
}

/// A pair-batch loss recorded on a graph.
pub struct PairLoss {
    pub loss: Var,
    pub penalty: f64,
    pub applied: usize,
    pub skipped: usize,
}

/// Records the training loss for one pair batch `(x_i, y_i)`, `(x_j, y_j)`
/// on `g`, using parameters already bound as `p`.
#[allow(clippy::too_many_arguments)]
pub fn pair_loss<T: Scalar, R: Rng + ?Sized>(
    g: &mut Graph<T>,
    model: &SplitModel<T>,
    p: &BoundParams,
    (xi, yi): (Tensor<T>, &[T]),
    (xj, yj): (Tensor<T>, &[T]),
    mixup: &MixupConfig,
    train: &TrainConfig,
    rng: &mut R,
) -> Result<PairLoss, TrainError> {
    let mut penalty = 0.0;
    let (mut applied, mut skipped) = (0, 0);
    let mut loss = match mixup.method {
        Method::None | Method::AnchoredRegressionMixup => {
            let vi = g.constant(xi);
            let vj = g.constant(xj);
            let zi = model.extract(g, p, vi)?;
            let zj = model.extract(g, p, vj)?;
            let pi = model.predict_from_z(g, p, zi)?;
            let pj = model.predict_from_z(g, p, zj)?;
            let mut erm_i = l1_loss(g, pi, yi)?;
            let erm_j = l1_loss(g, pj, yj)?;
            if mixup.method == Method::AnchoredRegressionMixup {
                let shift = train.target_shift;
                let ti: Vec<f64> = yi.iter().map(|v| v.as_f64() + shift).collect();
                let tj: Vec<f64> = yj.iter().map(|v| v.as_f64() + shift).collect();
                let r = anchored_mixup_penalty(g, &ti, &tj, zi, zj, mixup)?;
                penalty = g.value(r.penalty).item().map_or(0.0, |v| v.as_f64());
                applied = r.applied;
                skipped = r.skipped;
                erm_i = g.add(erm_i, r.penalty)?;
            }
            let both = g.add(erm_i, erm_j)?;
            g.scale(both, T::of(0.5))?
        }
        Method::InputMixup => {
            let (xm, ym) = input_mixup(&xi, yi, &xj, yj, mixup.alpha, rng)?;
            let vm = g.constant(xm);
            let pred = model.forward(g, p, vm)?;
            l1_loss(g, pred, &ym)?
        }
        Method::ManifoldMixup => {
            let vi = g.constant(xi);
            let vj = g.constant(xj);
            let zi = model.extract(g, p, vi)?;
            let zj = model.extract(g, p, vj)?;
            let (zm, ym) = manifold_mixup(g, zi, yi, zj, yj, mixup.alpha, rng)?;
            let pred = model.predict_from_z(g, p, zm)?;
            l1_loss(g, pred, &ym)?
        }
    };
    if let Some(norm) = train.norm {
        let reg = norm_penalty(g, &p.vars, norm.kind, norm.lambda)?;
        loss = g.add(loss, reg)?;
    }
    Ok(PairLoss {
        loss,
        penalty,
        applied,
        skipped,
    })
}

/// Builds the loss for one pair batch and returns its gradients.
pub fn compute_step<T: Scalar, R: Rng + ?Sized>(
    model: &SplitModel<T>,
    data: &Dataset,
    batch: &PairBatch,
    mixup: &MixupConfig,
    train: &TrainConfig,
    rng: &mut R,
) -> Result<StepOutcome<T>, TrainError> {
    let n = batch.i.len();
    let (xi, yi) = data.gather(&batch.i);
    let (xj, yj) = data.gather(&batch.j);
    let yi: Vec<T> = yi.into_iter().map(|v| T::of(v as f64)).collect();
    let yj: Vec<T> = yj.into_iter().map(|v| T::of(v as f64)).collect();
    let xi = batch_tensor(model, xi, n)?;
    let xj = batch_tensor(model, xj, n)?;

    let mut g = Graph::new();
    let p = model.bind(&mut g);
    let out = pair_loss(&mut g, model, &p, (xi, &yi), (xj, &yj), mixup, train, rng)?;
    let loss_value = g.value(out.loss).item().map_or(f64::NAN, |v| v.as_f64());
    if loss_value.is_finite() {
        g.backward(out.loss)?;
    }
    let grads = p.vars.iter().map(|&v| g.grad(v)).collect();
    Ok(StepOutcome {
        loss: loss_value,
        penalty: out.penalty,
        applied: out.applied,
        skipped: out.skipped,
        grads,
    })
}

/// One pass over `batches`, updating `model` in place.
#[allow(clippy::too_many_arguments)]
pub fn train_epoch<T: Scalar, R: Rng + ?Sized>(
    model: &mut SplitModel<T>,
    data: &Dataset,
    batches: &[PairBatch],
    mixup: &MixupConfig,
    train: &TrainConfig,
    opt: &mut Sgd<T>,
    rng: &mut R,
    epoch: usize,
) -> Result<EpochStats, TrainError> {
    mixup.validate()?;
    let mut stats = EpochStats::default();
    for (b, batch) in batches.iter().enumerate() {
        let step = compute_step(model, data, batch, mixup, train, rng)?;
        stats.applied_pairs += step.applied;
        stats.skipped_pairs += step.skipped;
        if !step.loss.is_finite() || step.grads.iter().flatten().any(|g| g.data().iter().any(|v| !v.is_finite())) {
            return Err(TrainError::NonFinite {
                epoch,
                batch: b,
                penalty: step.penalty,
                skipped_ratio: stats.skipped_ratio(),
            });
        }
        opt.step(model.params_mut(), &step.grads);
        stats.loss_mean += step.loss;
        stats.penalty_mean += step.penalty;
        stats.batches += 1;
    }
    if stats.batches > 0 {
        stats.loss_mean /= stats.batches as f64;
        stats.penalty_mean /= stats.batches as f64;
    }
    Ok(stats)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::MlpSpec;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn l1_examples() {
        let mut g = Graph::<f64>::new();
        let p = g.constant(Tensor::new(vec![2, 1], vec![1.0, 3.0]).unwrap());
        let l = l1_loss(&mut g, p, &[0.0, 0.0]).unwrap();
        assert_eq!(g.value(l).item(), Some(2.0));
        let l = l1_loss(&mut g, p, &[1.0, 3.0]).unwrap();
        assert_eq!(g.value(l).item(), Some(0.0));
        assert!(l1_loss(&mut g, p, &[1.0]).is_err());
    }

    #[test]
    fn zero_learning_rate_keeps_params() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut model = SplitModel::<f64>::build_mlp(
            &MlpSpec {
                input_dim: 1,
                hidden: vec![4],
                z_dim: 3,
            },
            &mut rng,
        )
        .unwrap();
        let data = Dataset::new(vec![1], vec![0.1, 0.5, 0.9, 0.3], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let before = model.params().to_vec();
        let train = TrainConfig {
            learning_rate: 0.0,
            batch_size: 2,
            ..TrainConfig::default()
        };
        let mut opt = Sgd::new(0.0, 0.9, model.params());
        let batches = crate::datasets::pair_loader(&data, 2, &mut rng).unwrap();
        let mixup = MixupConfig {
            method: Method::AnchoredRegressionMixup,
            ..MixupConfig::default()
        };
        train_epoch(&mut model, &data, &batches, &mixup, &train, &mut opt, &mut rng, 0).unwrap();
        assert_eq!(model.params(), &before[..]);
    }

    #[test]
    fn momentum_update_rule() {
        let mut params = vec![Tensor::new(vec![1], vec![1.0f64]).unwrap()];
        let mut opt = Sgd::new(0.1, 0.9, &params);
        let g = vec![Some(Tensor::new(vec![1], vec![2.0]).unwrap())];
        opt.step(&mut params, &g);
        assert!((params[0].data()[0] - 0.8).abs() < 1e-15);
        opt.step(&mut params, &g);
        // v = 0.9*2 + 2 = 3.8
        assert!((params[0].data()[0] - (0.8 - 0.38)).abs() < 1e-15);
    }

    #[test]
    fn quadratic_bowl_descends() {
        // f(p) = 0.5 * |p|^2, grad = p
        let mut params = vec![Tensor::new(vec![3], vec![1.0f64, -2.0, 0.5]).unwrap()];
        let f = |p: &Tensor<f64>| 0.5 * p.data().iter().map(|v| v * v).sum::<f64>();
        let before = f(&params[0]);
        let mut opt = Sgd::new(0.1, 0.0, &params);
        let g = vec![Some(params[0].clone())];
        opt.step(&mut params, &g);
        assert!(f(&params[0]) < before);
    }

    #[test]
    fn mae_of_empty_dataset_fails() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let model = SplitModel::<f32>::build_mlp(
            &MlpSpec {
                input_dim: 1,
                hidden: vec![],
                z_dim: 1,
            },
            &mut rng,
        )
        .unwrap();
        let empty = Dataset::new(vec![1], vec![], vec![]).unwrap();
        assert!(matches!(mae(&model, &empty, 10), Err(TrainError::EmptyDataset)));
    }
}
