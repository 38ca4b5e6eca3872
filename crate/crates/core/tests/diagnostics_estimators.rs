use fedptr_core::data::{
    dirichlet_partition, gen_synthetic_mixture, init_auxiliary, AuxMode, AuxiliaryDataset, ClientPartition, Dataset,
    Mixture,
};
use fedptr_core::federation::{Algorithm, FedConfig, Federation, ModelConfig};
use fedptr_core::localsolver::SolverBudget;
use fedptr_core::diagnostics::{
    client_gradients, cosine_similarity, estimate_b, estimate_sigma_d, layer_norms, Dissimilarity,
};
use fedptr_core::model::{grad, Activation, ModelSpec};
use fedptr_core::trajectory::MttConfig;
use fedptr_core::ParamVector;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn value(d: Dissimilarity) -> f64 {
    match d {
        Dissimilarity::Value(v) => v,
        Dissimilarity::Unbounded => panic!("expected a finite value"),
    }
}

/// The same shard stacked `copies` times, one copy per client.
fn replicated(base: &Dataset, copies: usize) -> (Dataset, ClientPartition) {
    let n = base.len();
    let mut features = Vec::new();
    let mut labels = Vec::new();
    for _ in 0..copies {
        features.extend_from_slice(base.features());
        labels.extend_from_slice(base.labels());
    }
    let data = Dataset::new(features, labels, base.dim(), base.num_classes()).unwrap();
    let clients = (0..copies).map(|c| (c * n..(c + 1) * n).collect()).collect();
    (data, ClientPartition::new(clients, n * copies).unwrap())
}

#[test]
fn identical_clients_have_unit_dissimilarity() {
    let base = gen_synthetic_mixture(10, 3, 4, 1.5, 2).unwrap();
    let spec = ModelSpec::mlp(4, &[5], 3, Activation::Tanh).unwrap();
    for copies in [1, 2, 5] {
        let (data, partition) = replicated(&base, copies);
        for seed in 0..3 {
            let b = value(estimate_b(&spec, &partition, &data, &spec.init_params(seed)).unwrap());
            assert!((b - 1.0).abs() <= 1e-12, "{copies} copies: {b}");
        }
    }
}

#[test]
fn single_client_has_unit_dissimilarity() {
    let data = gen_synthetic_mixture(20, 4, 3, 2.0, 7).unwrap();
    let spec = ModelSpec::softmax_regression(3, 4).unwrap();
    let partition = ClientPartition::new(vec![(0..data.len()).collect()], data.len()).unwrap();
    let b = value(estimate_b(&spec, &partition, &data, &spec.init_params(1)).unwrap());
    assert!((b - 1.0).abs() <= 1e-12);
}

#[test]
fn opposite_gradients_are_unbounded() {
    // at w = 0 both classes are equally likely, so the two rows pull in opposite directions
    let data = Dataset::new(vec![1.0, 1.0], vec![0, 1], 1, 2).unwrap();
    let spec = ModelSpec::softmax_regression(1, 2).unwrap();
    let w = ParamVector::zeros(spec.layer_map());
    let partition = ClientPartition::new(vec![vec![0], vec![1]], 2).unwrap();
    let (global, locals) = client_gradients(&spec, &partition, &data, &w).unwrap();
    assert_eq!(global.norm(), 0.0);
    let mut sum = locals[0].clone();
    sum.axpy(1.0, &locals[1]);
    assert_eq!(sum.norm(), 0.0);
    assert_eq!(estimate_b(&spec, &partition, &data, &w).unwrap(), Dissimilarity::Unbounded);
}

#[test]
fn dissimilarity_matches_direct_recomputation() {
    let data = gen_synthetic_mixture(25, 5, 4, 1.0, 3).unwrap();
    let spec = ModelSpec::mlp(4, &[6], 5, Activation::Softplus).unwrap();
    for seed in 0..4 {
        let partition = dirichlet_partition(&data, 6, 0.3, seed).unwrap();
        let w = spec.init_params(seed + 10);
        let total = data.len() as f64;
        let mut global = vec![0.0; w.len()];
        let mut sq = Vec::new();
        for idx in partition.clients().iter().filter(|c| !c.is_empty()) {
            let shard = data.subset(idx).unwrap();
            let g = grad(&spec, &w, shard.batch()).unwrap();
            for (acc, v) in global.iter_mut().zip(g.values()) {
                *acc += idx.len() as f64 / total * v;
            }
            sq.push(g.values().iter().map(|v| v * v).sum::<f64>());
        }
        let gn: f64 = global.iter().map(|v| v * v).sum();
        let expected = (sq.iter().sum::<f64>() / sq.len() as f64 / gn).sqrt();
        let b = value(estimate_b(&spec, &partition, &data, &w).unwrap());
        assert!((b - expected).abs() <= 1e-10 * expected, "{b} vs {expected}");
        assert!(b >= 1.0 - 1e-12);
    }
}

#[test]
fn replicated_auxiliary_rows_have_zero_gap() {
    let data = gen_synthetic_mixture(6, 3, 4, 1.0, 5).unwrap();
    let spec = ModelSpec::mlp(4, &[3], 3, Activation::Tanh).unwrap();
    let (twice, _) = replicated(&data, 2);
    let aux = AuxiliaryDataset::new(twice.features().to_vec(), twice.labels().to_vec(), 4, 3, 0.1).unwrap();
    let probes: Vec<_> = (0..4).map(|s| spec.init_params(s)).collect();
    let gap = estimate_sigma_d(&spec, &aux, data.batch(), &probes).unwrap();
    assert!(gap <= 1e-12, "{gap}");
    assert!(estimate_sigma_d(&spec, &aux, data.batch(), &[]).is_err());
}

#[test]
fn gap_is_the_worst_probe() {
    let data = gen_synthetic_mixture(8, 2, 3, 2.0, 1).unwrap();
    let spec = ModelSpec::softmax_regression(3, 2).unwrap();
    let aux = init_auxiliary(None, 2, 3, 3, AuxMode::Server, 4).unwrap();
    let probes: Vec<_> = (0..5).map(|s| spec.init_params(s)).collect();
    let each: Vec<f64> = probes
        .iter()
        .map(|p| estimate_sigma_d(&spec, &aux, data.batch(), std::slice::from_ref(p)).unwrap())
        .collect();
    let all = estimate_sigma_d(&spec, &aux, data.batch(), &probes).unwrap();
    assert_eq!(all, each.iter().cloned().fold(0.0, f64::max));
}

/// The server auxiliary set, probed at the models in the trajectory window,
/// sits closer to the data gradients after its first matching step.
#[test]
fn matching_shrinks_the_gradient_gap() {
    let mut shrunk = 0;
    for seed in 0..3 {
        let mix = Mixture::new(4, 6, 2.0, seed).unwrap();
        let train = mix.sample(40, seed).unwrap();
        let test = mix.sample(10, seed + 1).unwrap();
        let partition = dirichlet_partition(&train, 4, 0.1, seed).unwrap();
        let cfg = FedConfig {
            algorithm: Algorithm::FedPtrS,
            rounds: 4,
            n_clients: 4,
            seed,
            model: ModelConfig {
                hidden: vec![],
                ..Default::default()
            },
            solver: SolverBudget {
                epochs: 3,
                batch_size: 10,
                lr: 0.02,
                momentum: 0.5,
            },
            mtt: MttConfig {
                outer_steps: 20,
                inner_steps: 10,
                aux_lr: 10.0,
                beta_lr: Some(0.1),
            },
            ..FedConfig::default()
        };
        let fed = Federation::new(cfg, &train, &partition, &test).unwrap();
        let mut st = fed.init_state().unwrap();
        let init = st.server_aux().unwrap().clone();
        while st.counters().server == 0 {
            fed.run_round(&mut st).unwrap();
        }
        let probes: Vec<_> = st.window().entries().map(|(_, w)| w.clone()).collect();
        let before = estimate_sigma_d(fed.spec(), &init, fed.train_batch(), &probes).unwrap();
        let after = estimate_sigma_d(fed.spec(), st.server_aux().unwrap(), fed.train_batch(), &probes).unwrap();
        if after < before {
            shrunk += 1;
        }
    }
    assert_eq!(shrunk, 3, "gap shrank on {shrunk} of 3 seeds");
}

#[test]
fn layer_norms_agree_with_total_distance() {
    let spec = ModelSpec::mlp(3, &[4, 2], 2, Activation::Tanh).unwrap();
    let a = spec.init_params(1);
    let b = spec.init_params(2);
    let norms = layer_norms(&a, &b).unwrap();
    assert_eq!(norms.len(), 3);
    let total: f64 = norms.iter().map(|n| n * n).sum();
    assert!((total - a.dist_sq(&b)).abs() <= 1e-12 * total);
    assert!(layer_norms(&a, &a).unwrap().iter().all(|&n| n == 0.0));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn cosine_ignores_positive_scale(seed in any::<u64>(), s in 1e-3f64..1e3, t in 1e-3f64..1e3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
        let pv = |v: &[f64], k: f64| ParamVector::from_vec(v.iter().map(|x| x * k).collect()).unwrap();
        let c0 = cosine_similarity(&pv(&a, 1.0), &pv(&b, 1.0)).unwrap();
        let c1 = cosine_similarity(&pv(&a, s), &pv(&b, t)).unwrap();
        prop_assert!((c0 - c1).abs() <= 1e-12);
        let flipped = cosine_similarity(&pv(&a, -s), &pv(&b, t)).unwrap();
        prop_assert!((c0 + flipped).abs() <= 1e-12);
        prop_assert!((-1.0..=1.0).contains(&c0));
    }
}
