//! Monte Carlo objectives against exact enumeration and their ordering
//! properties.

use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use shrinknet::net::{Masks, Network, NetworkConfig, NoiseStructure, WeightSet};
use shrinknet::noise::NoiseFamily;
use shrinknet::objectives::{
    enumerate_log_marginal, iw_objective, iw_objective_fixed, iw_stderr, mc_lower_bound, mc_lower_bound_fixed,
    tail_adaptive_weights, ta_objective, Batch, ToyProblem,
};
use shrinknet::report::WeightHistogram;
use shrinknet::rng::stream;
use shrinknet::Tensor;

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

#[test]
fn importance_weighting_tightens_with_more_samples() {
    let mut toy = ToyProblem::new(0.5, 3).unwrap();
    let (w, x, y) = (toy.weights.clone(), toy.x.clone(), toy.y.clone());
    let batch = Batch { x: &x, y: &y, noise_var: toy.noise_var };
    let exact = enumerate_log_marginal(&mut toy.net, &w, batch).unwrap();
    let mut rng = stream(4);
    let mut averages = Vec::new();
    for s in [1, 10, 100] {
        let reps: Vec<f64> = (0..300)
            .map(|_| iw_objective(&mut toy.net, &w, batch, s, &mut rng).unwrap().value)
            .collect();
        averages.push(mean(&reps));
    }
    assert!(averages[0] < averages[1] && averages[1] < averages[2], "{averages:?}");
    assert!(averages[2] < exact + 1e-3, "S = 100 average {} above exact {exact}", averages[2]);
    // S = 1 is the plain lower bound, whose expectation sits well below.
    assert!(exact - averages[0] > exact - averages[2]);
}

#[test]
fn large_sample_importance_weighting_hits_the_enumerated_value() {
    let mut toy = ToyProblem::new(0.5, 5).unwrap();
    let (w, x, y) = (toy.weights.clone(), toy.x.clone(), toy.y.clone());
    let batch = Batch { x: &x, y: &y, noise_var: toy.noise_var };
    let exact = enumerate_log_marginal(&mut toy.net, &w, batch).unwrap();
    let mut rng = stream(6);
    let iw = iw_objective(&mut toy.net, &w, batch, 100_000, &mut rng).unwrap();
    let se = iw_stderr(&iw.log_likelihoods);
    assert!((iw.value - exact).abs() < 3.0 * se, "IW {} ± {se} vs {exact}", iw.value);
    let lb = mc_lower_bound(&mut toy.net, &w, batch, 100_000, &mut rng).unwrap();
    assert!(lb.value < exact);
}

#[test]
fn deterministic_network_enumerates_to_its_own_likelihood() {
    let config = NetworkConfig::mlp(2, &[3], 1);
    let mut net = Network::deterministic(&config).unwrap();
    let mut rng = stream(7);
    let w = WeightSet::init_he(&config, &mut rng);
    let x = Tensor::matrix(4, 2, (0..8).map(|_| rng.sample(StandardNormal)).collect()).unwrap();
    let y = Tensor::column(&[0.1, -0.2, 0.3, 0.0]);
    let batch = Batch { x: &x, y: &y, noise_var: 0.5 };
    let exact = enumerate_log_marginal(&mut net, &w, batch).unwrap();
    let ll = net.log_likelihood(&w, &net.ones_masks(), &x, &y, 0.5).unwrap();
    assert!((exact - ll).abs() < 1e-12);
}

fn toy_with_masks(seed: u64, samples: usize) -> (ToyProblem, Vec<Masks>) {
    let toy = ToyProblem::new(0.4, seed).unwrap();
    let mut rng = stream(seed + 1000);
    let masks = (0..samples).map(|_| toy.net.sample_masks(&mut rng)).collect();
    (toy, masks)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn lower_bound_never_exceeds_importance_weighted(seed in 0u64..10_000, samples in 1usize..40) {
        let (mut toy, masks) = toy_with_masks(seed, samples);
        let (w, x, y) = (toy.weights.clone(), toy.x.clone(), toy.y.clone());
        let batch = Batch { x: &x, y: &y, noise_var: toy.noise_var };
        let lb = mc_lower_bound_fixed(&mut toy.net, &w, &masks, batch).unwrap();
        let iw = iw_objective_fixed(&mut toy.net, &w, &masks, batch).unwrap();
        prop_assert!(lb.value <= iw.value + 1e-12);
    }

    #[test]
    fn importance_weighted_ignores_sample_order(seed in 0u64..10_000, samples in 2usize..40) {
        let (mut toy, mut masks) = toy_with_masks(seed, samples);
        let (w, x, y) = (toy.weights.clone(), toy.x.clone(), toy.y.clone());
        let batch = Batch { x: &x, y: &y, noise_var: toy.noise_var };
        let before = iw_objective_fixed(&mut toy.net, &w, &masks, batch).unwrap();
        masks.shuffle(&mut stream(seed));
        let after = iw_objective_fixed(&mut toy.net, &w, &masks, batch).unwrap();
        prop_assert!((before.value - after.value).abs() <= 1e-12 * (1.0 + before.value.abs()));
        for (a, b) in before.gradient.flat().iter().zip(after.gradient.flat()) {
            prop_assert!((a - b).abs() <= 1e-10 * (1.0 + a.abs()));
        }
    }

    #[test]
    fn tail_adaptive_weights_follow_a_permutation(raw in prop::collection::vec(-50.0f64..50.0, 2..60), seed: u64) {
        let w = tail_adaptive_weights(&raw).unwrap();
        let mut order: Vec<usize> = (0..raw.len()).collect();
        order.shuffle(&mut stream(seed));
        let permuted: Vec<f64> = order.iter().map(|&i| raw[i]).collect();
        let wp = tail_adaptive_weights(&permuted).unwrap();
        for (j, &i) in order.iter().enumerate() {
            prop_assert!((wp[j] - w[i]).abs() < 1e-15);
        }
    }

    #[test]
    fn tail_adaptive_weights_depend_only_on_ranks(raw in prop::collection::vec(-5.0f64..5.0, 2..60)) {
        let w = tail_adaptive_weights(&raw).unwrap();
        let through_exp = tail_adaptive_weights(&raw.iter().map(|v| v.exp()).collect::<Vec<_>>()).unwrap();
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for i in 0..raw.len() {
            prop_assert!((w[i] - through_exp[i]).abs() < 1e-15);
            for j in 0..raw.len() {
                if raw[i] > raw[j] {
                    prop_assert!(w[i] > w[j]);
                }
            }
        }
    }
}

#[test]
fn tail_adaptive_weights_small_example() {
    // Ranks from the top: 1 → S/1, 3 → S/3, 2 → S/2.
    let w = tail_adaptive_weights(&[5.0, -1.0, 0.0]).unwrap();
    let raw = [3.0, 1.0, 1.5];
    let total: f64 = raw.iter().sum();
    for (a, b) in w.iter().zip(raw) {
        assert!((a - b / total).abs() < 1e-15);
    }
    // Ties share the weight of their best rank.
    let tied = tail_adaptive_weights(&[1.0, 1.0, 1.0]).unwrap();
    assert!(tied.iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-15));
}

#[test]
fn tail_adaptive_weights_spread_where_uniform_weights_cannot() {
    let config = NetworkConfig::mlp(6, &[40], 1);
    let structure = NoiseStructure::unit_wise(NoiseFamily::Bernoulli { keep: 0.995 });
    let mut net = Network::new(&config, &structure).unwrap();
    let mut rng = stream(11);
    let w = WeightSet::init_he(&config, &mut rng);
    let x = Tensor::matrix(32, 6, (0..192).map(|_| rng.sample(StandardNormal)).collect()).unwrap();
    let y = Tensor::column(&(0..32).map(|i| x.get(i, 0)).collect::<Vec<_>>());
    let batch = Batch { x: &x, y: &y, noise_var: 0.1 };
    let (mut uniform, mut tail) = (WeightHistogram::new(20), WeightHistogram::new(20));
    for _ in 0..200 {
        uniform.add(&mc_lower_bound(&mut net, &w, batch, 10, &mut rng).unwrap().weights);
        tail.add(&ta_objective(&mut net, &w, batch, 10, &mut rng).unwrap().weights);
    }
    assert_eq!(uniform.occupied_bins(), 1);
    assert!(uniform.counts[2] > 0, "uniform weights land at 0.1");
    assert!(tail.occupied_bins() >= 3, "tail-adaptive bins {:?}", tail.counts);
}
