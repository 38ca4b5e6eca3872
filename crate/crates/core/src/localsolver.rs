//! Local training: momentum SGD on the loss plus a per-layer proximal pull
//! toward a reference model.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{FedError, Result};
use crate::model::{self, ModelSpec};
use crate::params::ParamVector;
use crate::rng::{stream_rng, Stream};

/// Below this initial gradient norm the inexactness ratio is not computed.
pub const STATIONARY_THRESHOLD: f64 = 1e-20;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverBudget {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
}

impl Default for SolverBudget {
    fn default() -> Self {
        SolverBudget {
            epochs: 1,
            batch_size: 500,
            lr: 0.01,
            momentum: 0.5,
        }
    }
}

impl SolverBudget {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(FedError::InvalidArgument("solver epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(FedError::InvalidArgument("solver batch_size must be at least 1".into()));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(FedError::InvalidArgument(format!("solver lr must be positive, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(FedError::InvalidArgument(format!(
                "solver momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        Ok(())
    }
}

/// Proximal term `sum_j lambda_j / 2 * |w_[j] - ref_[j]|^2`.
#[derive(Clone, Debug, PartialEq)]
pub struct ProxSpec {
    reference: ParamVector,
    base_lambda: f64,
    adaptive: bool,
    per_layer: Vec<f64>,
}

impl ProxSpec {
    /// The same weight on every layer.
    pub fn fixed(reference: ParamVector, lambda: f64) -> Result<Self> {
        check_lambda(lambda)?;
        let per_layer = vec![lambda; reference.layer_map().num_layers()];
        Ok(ProxSpec {
            reference,
            base_lambda: lambda,
            adaptive: false,
            per_layer,
        })
    }

    /// No pull at all; local training reduces to plain SGD.
    pub fn none(reference: ParamVector) -> Self {
        Self::fixed(reference, 0.0).expect("zero is a valid weight")
    }

    /// Per-layer weights computed at `w_init` and frozen afterwards.
    pub fn adaptive(reference: ParamVector, w_init: &ParamVector, base_lambda: f64) -> Result<Self> {
        check_lambda(base_lambda)?;
        let per_layer = layer_adaptive_lambda(w_init, &reference, base_lambda)?;
        Ok(ProxSpec {
            reference,
            base_lambda,
            adaptive: true,
            per_layer,
        })
    }

    pub fn reference(&self) -> &ParamVector {
        &self.reference
    }

    pub fn base_lambda(&self) -> f64 {
        self.base_lambda
    }

    pub fn is_adaptive(&self) -> bool {
        self.adaptive
    }

    pub fn per_layer_lambda(&self) -> &[f64] {
        &self.per_layer
    }

    pub fn is_active(&self) -> bool {
        self.per_layer.iter().any(|&l| l > 0.0)
    }

    fn penalty(&self, w: &ParamVector) -> f64 {
        self.per_layer
            .iter()
            .enumerate()
            .map(|(j, l)| 0.5 * l * w.layer_dist_sq(&self.reference, j))
            .sum()
    }

    /// Adds `lambda_j (w_[j] - ref_[j])` to `g`.
    fn add_gradient(&self, w: &ParamVector, g: &mut ParamVector) {
        let spans = w.layer_map().spans().to_vec();
        let (wv, rv) = (w.values(), self.reference.values());
        let gv = g.values_mut();
        for (span, &l) in spans.iter().zip(&self.per_layer) {
            if l == 0.0 {
                continue;
            }
            for i in span.range() {
                gv[i] += l * (wv[i] - rv[i]);
            }
        }
    }
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !(lambda.is_finite() && lambda >= 0.0) {
        return Err(FedError::InvalidArgument(format!(
            "proximal weight must be finite and nonnegative, got {lambda}"
        )));
    }
    Ok(())
}

/// `base / |w_[j] - ref_[j]|` per layer, or `base` where the layer difference is zero.
pub fn layer_adaptive_lambda(w: &ParamVector, reference: &ParamVector, base: f64) -> Result<Vec<f64>> {
    w.ensure_same_layout(reference)?;
    Ok((0..w.layer_map().num_layers())
        .map(|j| {
            let norm = w.layer_dist_sq(reference, j).sqrt();
            if norm > 0.0 {
                base / norm
            } else {
                base
            }
        })
        .collect())
}

pub fn prox_objective(
    spec: &ModelSpec,
    w: &ParamVector,
    data: &model::Batch,
    prox: &ProxSpec,
) -> Result<f64> {
    w.ensure_same_layout(prox.reference())?;
    Ok(model::forward_loss(spec, w, data)? + prox.penalty(w))
}

fn prox_gradient(
    spec: &ModelSpec,
    w: &ParamVector,
    data: &model::Batch,
    prox: &ProxSpec,
) -> Result<ParamVector> {
    w.ensure_same_layout(prox.reference())?;
    let mut g = model::grad(spec, w, data)?;
    prox.add_gradient(w, &mut g);
    Ok(g)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Inexactness {
    Ratio(f64),
    /// The starting point already had a vanishing gradient.
    AlreadyStationary,
}

impl Inexactness {
    pub fn ratio(self) -> Option<f64> {
        match self {
            Inexactness::Ratio(r) => Some(r),
            Inexactness::AlreadyStationary => None,
        }
    }
}

/// `|grad h(candidate)| / |grad h(w_init)|` on the full local data.
pub fn gamma_inexactness(
    spec: &ModelSpec,
    candidate: &ParamVector,
    w_init: &ParamVector,
    data: &model::Batch,
    prox: &ProxSpec,
) -> Result<Inexactness> {
    let g0 = prox_gradient(spec, w_init, data, prox)?.norm();
    if g0 < STATIONARY_THRESHOLD {
        return Ok(Inexactness::AlreadyStationary);
    }
    let g1 = prox_gradient(spec, candidate, data, prox)?.norm();
    Ok(Inexactness::Ratio(g1 / g0))
}

#[derive(Clone, Debug)]
pub struct LocalSolution {
    pub params: ParamVector,
    pub gamma: Inexactness,
}

/// Fixed-budget momentum SGD (`buf = mu * buf + g; w -= lr * buf`) over
/// shuffled minibatches. The proximal term is applied implicitly, so each
/// step solves `w' = w - lr * buf - lr * lambda_j (w' - ref)` layer by layer;
/// this stays stable for arbitrarily large weights.
pub fn local_solve(
    spec: &ModelSpec,
    w_init: &ParamVector,
    shard: &Dataset,
    prox: &ProxSpec,
    budget: &SolverBudget,
    seed: u64,
) -> Result<LocalSolution> {
    budget.validate()?;
    if shard.is_empty() {
        return Err(FedError::EmptyDataset);
    }
    spec.check_params(w_init)?;
    w_init.ensure_same_layout(prox.reference())?;
    let full = shard.batch();
    spec.check_batch(full)?;

    let mut rng = stream_rng(seed, Stream::LocalSolve, 0, 0);
    let mut order: Vec<usize> = (0..shard.len()).collect();
    let mut w = w_init.clone();
    let mut buf = w_init.zeros_like();
    let spans = w_init.layer_map().spans().to_vec();
    let active = prox.is_active();
    let mut step = 0;
    for _ in 0..budget.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(budget.batch_size) {
            let batch = full.gather(chunk)?;
            let g = model::grad(spec, &w, &batch)?;
            buf.scale(budget.momentum);
            buf.axpy(1.0, &g);
            w.axpy(-budget.lr, &buf);
            if active {
                let rv = prox.reference().values();
                let wv = w.values_mut();
                for (span, &l) in spans.iter().zip(prox.per_layer_lambda()) {
                    if l == 0.0 {
                        continue;
                    }
                    let c = budget.lr * l;
                    for i in span.range() {
                        wv[i] = (wv[i] + c * rv[i]) / (1.0 + c);
                    }
                }
            }
            if !w.is_finite() {
                return Err(FedError::NonFiniteStep {
                    phase: "local solve",
                    step,
                });
            }
            step += 1;
        }
    }
    let gamma = gamma_inexactness(spec, &w, w_init, full, prox)?;
    Ok(LocalSolution { params: w, gamma })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::LayerMap;

    fn two_layer(a: Vec<f64>) -> ParamVector {
        ParamVector::new(a, LayerMap::from_lengths(&[2, 1]).unwrap()).unwrap()
    }

    #[test]
    fn adaptive_lambda_formula_and_fallback() {
        let w = ParamVector::from_vec(vec![0.3, 0.4]).unwrap();
        let r = ParamVector::from_vec(vec![0.0, 0.0]).unwrap();
        assert!((layer_adaptive_lambda(&w, &r, 0.05).unwrap()[0] - 0.1).abs() < 1e-15);
        assert_eq!(layer_adaptive_lambda(&r, &r, 0.05).unwrap(), vec![0.05]);

        let w = two_layer(vec![0.1, 0.0, 1.0]);
        let r = two_layer(vec![0.0, 0.0, 0.0]);
        let l = layer_adaptive_lambda(&w, &r, 0.05).unwrap();
        assert!((l[0] - 0.5).abs() < 1e-12 && (l[1] - 0.05).abs() < 1e-15);
    }

    #[test]
    fn fixed_prox_has_uniform_weights() {
        let p = ProxSpec::fixed(two_layer(vec![0.0; 3]), 0.2).unwrap();
        assert_eq!(p.per_layer_lambda(), &[0.2, 0.2]);
        assert!(ProxSpec::fixed(two_layer(vec![0.0; 3]), -1.0).is_err());
        assert!(!ProxSpec::none(two_layer(vec![0.0; 3])).is_active());
    }

    #[test]
    fn penalty_arithmetic() {
        let w = ParamVector::from_vec(vec![1.5]).unwrap();
        let p = ProxSpec::fixed(ParamVector::from_vec(vec![1.0]).unwrap(), 2.0).unwrap();
        assert!((0.3 + p.penalty(&w) - 0.55).abs() < 1e-15);
    }

    #[test]
    fn budget_validation() {
        assert!(SolverBudget::default().validate().is_ok());
        let bad = SolverBudget { momentum: 1.0, ..Default::default() };
        assert!(bad.validate().is_err());
        let bad = SolverBudget { epochs: 0, ..Default::default() };
        assert!(bad.validate().is_err());
    }
}
