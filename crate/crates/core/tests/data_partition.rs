use fedptr_core::data::{
    dirichlet_partition, gen_synthetic_mixture, init_auxiliary, AuxMode, Dataset, PartitionWarning,
};
use fedptr_core::localsolver::{local_solve, ProxSpec, SolverBudget};
use fedptr_core::model::{accuracy, ModelSpec};
use proptest::prelude::*;

fn pool(classes: usize, per_class: usize) -> Dataset {
    let labels: Vec<usize> = (0..classes).flat_map(|k| std::iter::repeat_n(k, per_class)).collect();
    let features = (0..labels.len()).map(|i| i as f64).collect();
    Dataset::new(features, labels, 1, classes).unwrap()
}

fn check_partition(data: &Dataset, n: usize, alpha: f64, seed: u64) {
    let p = dirichlet_partition(data, n, alpha, seed).unwrap();
    let mut seen = vec![false; data.len()];
    for idx in p.clients() {
        for &i in idx {
            assert!(!seen[i], "index {i} assigned twice");
            seen[i] = true;
        }
    }
    assert!(seen.iter().all(|&s| s), "some sample was not assigned");
    let mut per_class = vec![0; data.num_classes()];
    for counts in p.label_counts(data) {
        for (k, c) in counts.into_iter().enumerate() {
            per_class[k] += c;
        }
    }
    assert_eq!(per_class, data.class_counts());
}

#[test]
fn large_pool_sums_to_size() {
    let data = pool(10, 6000);
    let p = dirichlet_partition(&data, 10, 0.01, 3).unwrap();
    assert_eq!(p.sizes().iter().sum::<usize>(), 60000);
    check_partition(&data, 10, 0.01, 3);
}

#[test]
fn huge_alpha_is_nearly_uniform() {
    let data = pool(2, 500);
    let p = dirichlet_partition(&data, 10, 10000.0, 11).unwrap();
    for s in p.sizes() {
        assert!((80..=120).contains(&s), "client size {s}");
    }
}

#[test]
fn golden_counts_seed_42() {
    let data = pool(4, 100);
    let p = dirichlet_partition(&data, 4, 0.01, 42).unwrap();
    assert_eq!(p.sizes(), [0, 104, 98, 198]);
}

#[test]
fn entropy_decreases_with_heterogeneity() {
    let data = pool(10, 50);
    let mean_entropy = |alpha: f64| {
        (0..100)
            .map(|s| dirichlet_partition(&data, 10, alpha, s).unwrap().mean_label_entropy(&data))
            .sum::<f64>()
            / 100.0
    };
    let (lo, mid, hi) = (mean_entropy(0.01), mean_entropy(1.0), mean_entropy(100.0));
    assert!(lo < mid && mid < hi, "{lo} {mid} {hi}");
}

#[test]
fn tiny_alpha_leaves_some_client_empty() {
    let data = pool(10, 50);
    let hits = (0..20)
        .filter(|&s| {
            let p = dirichlet_partition(&data, 40, 0.01, s).unwrap();
            p.warnings()
                .iter()
                .any(|w| matches!(w, PartitionWarning::ZeroSampleClient { .. }))
        })
        .count();
    assert!(hits >= 1);
}

#[test]
fn mixture_is_deterministic() {
    let a = gen_synthetic_mixture(20, 3, 4, 2.0, 9).unwrap();
    let b = gen_synthetic_mixture(20, 3, 4, 2.0, 9).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, gen_synthetic_mixture(20, 3, 4, 2.0, 10).unwrap());
}

fn train_to_convergence(data: &Dataset) -> (ModelSpec, fedptr_core::ParamVector) {
    let spec = ModelSpec::softmax_regression(data.dim(), data.num_classes()).unwrap();
    let w0 = spec.init_params(1);
    let budget = SolverBudget {
        epochs: 200,
        batch_size: data.len(),
        lr: 0.5,
        momentum: 0.5,
    };
    let sol = local_solve(&spec, &w0, data, &ProxSpec::none(w0.clone()), &budget, 0).unwrap();
    (spec, sol.params)
}

#[test]
fn well_separated_pair_is_linearly_learnable() {
    let data = gen_synthetic_mixture(200, 2, 2, 10.0, 4).unwrap();
    let (spec, w) = train_to_convergence(&data);
    assert!(accuracy(&spec, &w, data.batch()).unwrap() >= 0.99);
}

#[test]
fn zero_separation_is_chance_level() {
    let train = gen_synthetic_mixture(500, 2, 2, 0.0, 4).unwrap();
    let test = gen_synthetic_mixture(2000, 2, 2, 0.0, 5).unwrap();
    let (spec, w) = train_to_convergence(&train);
    let acc = accuracy(&spec, &w, test.batch()).unwrap();
    assert!((acc - 0.5).abs() < 0.05, "accuracy {acc}");
}

#[test]
fn auxiliary_labels_are_class_ordered_copies() {
    let data = gen_synthetic_mixture(5, 3, 2, 1.0, 0).unwrap();
    let local = data.subset(&[0, 1, 2]).unwrap();
    for (mode, src) in [(AuxMode::Client, Some(&local)), (AuxMode::Server, None)] {
        let aux = init_auxiliary(src, 3, 4, 2, mode, 8).unwrap();
        let expected: Vec<usize> = (0..3).flat_map(|k| std::iter::repeat_n(k, 4)).collect();
        assert_eq!(aux.labels(), expected.as_slice());
        assert_eq!(aux.len(), 12);
        assert!(aux.beta() > 0.0);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn partition_conserves_samples(
        classes in 2usize..6,
        per_class in 1usize..40,
        n in 1usize..12,
        alpha in prop_oneof![Just(0.01), 0.05f64..5.0, Just(1000.0)],
        seed in any::<u64>(),
    ) {
        check_partition(&pool(classes, per_class), n, alpha, seed);
    }

    #[test]
    fn partition_is_deterministic(seed in any::<u64>(), alpha in 0.01f64..10.0) {
        let data = pool(4, 25);
        let a = dirichlet_partition(&data, 5, alpha, seed).unwrap();
        let b = dirichlet_partition(&data, 5, alpha, seed).unwrap();
        prop_assert_eq!(a.clients(), b.clients());
    }
}
