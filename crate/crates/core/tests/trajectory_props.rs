use fedptr_core::data::{init_auxiliary, AuxMode, AuxiliaryDataset};
use fedptr_core::model::{Activation, ModelSpec};
use fedptr_core::trajectory::{
    mtt_loss, mtt_update, project_trajectory, unroll_inner, MttConfig, TrajectoryWindow,
};
use fedptr_core::ParamVector;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_instance() -> (ModelSpec, AuxiliaryDataset, ParamVector, ParamVector) {
    let spec = ModelSpec::softmax_regression(3, 2).unwrap();
    let aux = init_auxiliary(None, 2, 2, 3, AuxMode::Server, 21).unwrap();
    let w_start = spec.init_params(3);
    let target = init_auxiliary(None, 2, 2, 3, AuxMode::Server, 99).unwrap();
    let target = AuxiliaryDataset::new(target.features().to_vec(), target.labels().to_vec(), 3, 2, 0.2).unwrap();
    let w_end = unroll_inner(&spec, &target, &w_start, 5).unwrap();
    (spec, aux, w_start, w_end)
}

#[test]
fn matching_reduces_loss_and_matches_golden_sequence() {
    let (spec, aux, w_start, w_end) = small_instance();
    let cfg = MttConfig {
        outer_steps: 20,
        inner_steps: 5,
        aux_lr: 100.0,
        beta_lr: Some(0.1),
    };
    let out = mtt_update(&spec, &aux, &w_start, &w_end, &cfg).unwrap();
    assert_eq!(out.losses.len(), 20);
    let final_loss = out.final_loss.unwrap();
    assert!(final_loss < out.losses[0]);
    let golden = [1.0412822804288184, 0.029683628614982565, 0.028670959687614236];
    let got = [out.losses[0], out.losses[10], final_loss];
    for (g, e) in got.iter().zip(golden) {
        assert!((g - e).abs() <= 1e-9 * e.abs().max(1.0), "got {got:?}");
    }
}

#[test]
fn zero_step_size_leaves_aux_untouched() {
    let (spec, aux, w_start, w_end) = small_instance();
    let cfg = MttConfig {
        outer_steps: 5,
        inner_steps: 3,
        aux_lr: 0.0,
        beta_lr: None,
    };
    let out = mtt_update(&spec, &aux, &w_start, &w_end, &cfg).unwrap();
    assert_eq!(out.aux.features(), aux.features());
    assert_eq!(out.aux.beta().to_bits(), aux.beta().to_bits());
    assert!(out.losses.windows(2).all(|w| w[0] == w[1]));
}

#[test]
fn self_generated_trajectory_is_a_fixed_point() {
    for (seed, act) in [(1, Activation::Tanh), (2, Activation::Softplus), (3, Activation::Tanh)] {
        let spec = ModelSpec::mlp(3, &[4], 3, act).unwrap();
        let aux = init_auxiliary(None, 3, 2, 3, AuxMode::Server, seed).unwrap();
        let w_start = spec.init_params(seed);
        let cfg = MttConfig::default();
        let w_end = unroll_inner(&spec, &aux, &w_start, cfg.inner_steps).unwrap();
        let out = mtt_update(&spec, &aux, &w_start, &w_end, &cfg).unwrap();
        assert!(out.losses[0] <= 1e-6);
        assert!(out.losses.iter().chain(out.final_loss.iter()).all(|&l| l <= 1e-4));
    }
}

#[test]
fn projection_with_no_steps_is_identity() {
    let (spec, aux, w_start, _) = small_instance();
    let p = project_trajectory(&spec, &w_start, &aux, 0, 0.01).unwrap();
    assert_eq!(p, w_start);
}

fn householder(v: &[f64], u: &[f64]) -> Vec<f64> {
    let uu: f64 = u.iter().map(|x| x * x).sum();
    let vu: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
    v.iter().zip(u).map(|(a, b)| a - 2.0 * vu / uu * b).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn matching_loss_is_rotation_invariant(seed in any::<u64>(), n in 2usize..8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = || (0..n).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>();
        let (a, b, c, u) = (draw(), draw(), draw(), draw());
        prop_assume!(u.iter().map(|x| x * x).sum::<f64>() > 1e-3);
        prop_assume!(b.iter().zip(&c).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() > 1e-3);
        let pv = |v: Vec<f64>| ParamVector::from_vec(v).unwrap();
        let l0 = mtt_loss(&pv(a.clone()), &pv(b.clone()), &pv(c.clone())).unwrap();
        let l1 = mtt_loss(&pv(householder(&a, &u)), &pv(householder(&b, &u)), &pv(householder(&c, &u))).unwrap();
        prop_assert!((l0 - l1).abs() <= 1e-10 * l0.max(1.0));
    }

    #[test]
    fn window_serves_only_in_range_endpoints(
        m in 1usize..5,
        gaps in proptest::collection::vec(1u64..4, 1..20),
        query_back in 0u64..6,
    ) {
        let mut w = TrajectoryWindow::new(m);
        let mut round = 0;
        for g in &gaps {
            round += g;
            w.push(round, ParamVector::from_vec(vec![round as f64]).unwrap()).unwrap();
            prop_assert!(w.len() <= m + 1);
            let rounds = w.rounds();
            prop_assert!(rounds.windows(2).all(|p| p[0] < p[1]));
        }
        let t = round;
        if let Some((r, start, end)) = w.endpoints_or_oldest(t, m as u64) {
            prop_assert!(r < t && t - r <= m as u64);
            prop_assert_eq!(start.values()[0], r as f64);
            prop_assert_eq!(end.values()[0], t as f64);
        }
        let q = query_back.min(t);
        if let Some((start, end)) = w.endpoints(t, q) {
            prop_assert!(q >= 1 && q as usize <= m);
            prop_assert_eq!(start.values()[0], (t - q) as f64);
            prop_assert_eq!(end.values()[0], t as f64);
        }
        prop_assert!(w.push(round, ParamVector::from_vec(vec![0.0]).unwrap()).is_err());
    }
}
