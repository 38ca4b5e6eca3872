//! Finite-difference checks of every analytic derivative, on seeded random
//! instances.

use std::time::{Duration, Instant};

use anyhow::Result;
use fedptr_core::data::{init_auxiliary, AuxMode, AuxiliaryDataset};
use fedptr_core::model::{forward_loss, grad, hvp, Activation, Batch, ModelSpec};
use fedptr_core::oracle::{central_diff, directional_diff, relative_error};
use fedptr_core::trajectory::{meta_gradient, mtt_loss, mtt_update, unroll_inner, MttConfig};
use fedptr_core::ParamVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Debug)]
pub struct OracleCheck {
    pub name: &'static str,
    pub instances: usize,
    /// Largest observed error over the instances.
    pub worst: f64,
    pub tolerance: f64,
    pub elapsed: Duration,
}

impl OracleCheck {
    pub fn passed(&self) -> bool {
        self.worst <= self.tolerance
    }
}

fn timed(name: &'static str, instances: usize, tolerance: f64, f: impl FnOnce() -> Result<f64>) -> Result<OracleCheck> {
    let start = Instant::now();
    let worst = f()?;
    Ok(OracleCheck {
        name,
        instances,
        worst,
        tolerance,
        elapsed: start.elapsed(),
    })
}

fn with_values(p: &ParamVector, v: &[f64]) -> ParamVector {
    ParamVector::new(v.to_vec(), p.layer_map().clone()).expect("same length")
}

fn random_instance(seed: u64, act: Activation) -> Result<(ModelSpec, ParamVector, Batch)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = rng.random_range(1..5);
    let c = rng.random_range(2..5);
    let hidden: Vec<usize> = (0..rng.random_range(0..3)).map(|_| rng.random_range(1..5)).collect();
    let spec = ModelSpec::mlp(d, &hidden, c, act)?;
    let values = (0..spec.param_count()).map(|_| rng.random_range(-1.0..1.0)).collect();
    let params = ParamVector::new(values, spec.layer_map())?;
    let n = rng.random_range(1..6);
    let feats = (0..n * d).map(|_| rng.random_range(-2.0..2.0)).collect();
    let labels = (0..n).map(|_| rng.random_range(0..c)).collect();
    Ok((spec, params, Batch::new(feats, labels, d)?))
}

fn smooth(seed: u64) -> Activation {
    if seed.is_multiple_of(2) {
        Activation::Tanh
    } else {
        Activation::Softplus
    }
}

/// Loss gradients against central differences of the loss.
pub fn gradient_check(instances: usize) -> Result<OracleCheck> {
    timed("gradient", instances, 1e-5, || {
        let mut worst: f64 = 0.0;
        for seed in 0..instances as u64 {
            let (spec, params, batch) = random_instance(seed, smooth(seed))?;
            let analytic = grad(&spec, &params, &batch)?;
            let numeric = central_diff(
                |v| forward_loss(&spec, &with_values(&params, v), &batch).expect("valid instance"),
                params.values(),
                1e-4,
            );
            worst = worst.max(relative_error(analytic.values(), &numeric, 1e-8));
        }
        Ok(worst)
    })
}

/// Hessian-vector products against directional differences of the gradient.
pub fn hvp_check(instances: usize) -> Result<OracleCheck> {
    timed("hessian-vector product", instances, 1e-4, || {
        let mut worst: f64 = 0.0;
        for seed in 1000..1000 + instances as u64 {
            let (spec, params, batch) = random_instance(seed, smooth(seed))?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let v: Vec<f64> = (0..params.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
            let analytic = hvp(&spec, &params, &batch, &with_values(&params, &v))?;
            let numeric = directional_diff(
                |w| grad(&spec, &with_values(&params, w), &batch).expect("valid instance").into_values(),
                params.values(),
                &v,
                1e-4,
            );
            worst = worst.max(relative_error(analytic.values(), &numeric, 1e-8));
        }
        Ok(worst)
    })
}

fn composed_loss(
    spec: &ModelSpec,
    aux: &AuxiliaryDataset,
    features: &[f64],
    log_beta: f64,
    w_start: &ParamVector,
    w_end: &ParamVector,
    r: usize,
) -> f64 {
    let probe = AuxiliaryDataset::new(
        features.to_vec(),
        aux.labels().to_vec(),
        aux.dim(),
        aux.num_classes(),
        log_beta.exp(),
    )
    .expect("perturbed copy of a valid set");
    let w_hat = unroll_inner(spec, &probe, w_start, r).expect("valid instance");
    mtt_loss(&w_hat, w_start, w_end).expect("non-degenerate trajectory")
}

/// Small tanh instances: d ≤ 4, at most 4 auxiliary rows, at most 4 inner steps.
fn meta_instance(seed: u64) -> Result<(ModelSpec, AuxiliaryDataset, ParamVector, ParamVector, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = rng.random_range(1..5);
    let c = 2;
    let hidden: Vec<usize> = if seed.is_multiple_of(2) { vec![] } else { vec![rng.random_range(1..4)] };
    let spec = ModelSpec::mlp(d, &hidden, c, Activation::Tanh)?;
    let per_class = rng.random_range(1..3);
    let feats: Vec<f64> = (0..per_class * c * d).map(|_| rng.random_range(-1.5..1.5)).collect();
    let labels: Vec<usize> = (0..c).flat_map(|k| std::iter::repeat_n(k, per_class)).collect();
    let beta = rng.random_range(0.05..0.5);
    let aux = AuxiliaryDataset::new(feats, labels, d, c, beta)?;
    let w_start = spec.init_params(seed);
    let mut w_end = w_start.clone();
    for x in w_end.values_mut() {
        *x += rng.random_range(-0.3..0.3);
    }
    let r = rng.random_range(1..5);
    Ok((spec, aux, w_start, w_end, r))
}

/// Matching-loss gradients w.r.t. every auxiliary feature and the inner step
/// size, against central differences through the unrolled inner loop.
pub fn meta_gradient_check(instances: usize) -> Result<OracleCheck> {
    timed("matching meta-gradient", instances, 1e-3, || {
        let mut worst: f64 = 0.0;
        for seed in 0..instances as u64 {
            let (spec, aux, w_start, w_end, r) = meta_instance(seed)?;
            let mg = meta_gradient(&spec, &aux, &w_start, &w_end, r)?;
            let numeric = central_diff(
                |x| composed_loss(&spec, &aux, x, aux.log_beta(), &w_start, &w_end, r),
                aux.features(),
                1e-4,
            );
            worst = worst.max(relative_error(&mg.d_features, &numeric, 1e-10));
            let dlogb = central_diff(
                |lb| composed_loss(&spec, &aux, aux.features(), lb[0], &w_start, &w_end, r),
                &[aux.log_beta()],
                1e-4,
            )[0];
            let numeric_beta = dlogb / aux.beta();
            let err = (mg.d_beta - numeric_beta).abs() / mg.d_beta.abs().max(numeric_beta.abs()).max(1e-10);
            worst = worst.max(err);
        }
        Ok(worst)
    })
}

/// Matching an auxiliary set to the trajectory it generated itself keeps the
/// loss near zero for every outer iteration.
pub fn fixed_point_check(instances: usize) -> Result<OracleCheck> {
    timed("self-trajectory fixed point", instances, 1e-4, || {
        let cfg = MttConfig::default();
        let mut worst: f64 = 0.0;
        for seed in 0..instances as u64 {
            let act = smooth(seed);
            let spec = ModelSpec::mlp(3, &[4], 3, act)?;
            let aux = init_auxiliary(None, 3, 2, 3, AuxMode::Server, seed)?;
            let w_start = spec.init_params(seed);
            let w_end = unroll_inner(&spec, &aux, &w_start, cfg.inner_steps)?;
            let out = mtt_update(&spec, &aux, &w_start, &w_end, &cfg)?;
            for &l in out.losses.iter().chain(out.final_loss.iter()) {
                worst = worst.max(l);
            }
        }
        Ok(worst)
    })
}

pub fn run_all() -> Result<Vec<OracleCheck>> {
    Ok(vec![
        gradient_check(50)?,
        hvp_check(50)?,
        meta_gradient_check(20)?,
        fixed_point_check(5)?,
    ])
}
