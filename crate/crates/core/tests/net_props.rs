//! Structural invariants of noisy forward passes.

use proptest::prelude::*;
use rand::Rng;
use rand_distr::StandardNormal;
use shrinknet::net::{
    forward_deterministic, posterior_moment_map, predict_mc, MomentSource, Network, NetworkConfig, NoiseStructure,
    WeightSet,
};
use shrinknet::noise::NoiseFamily;
use shrinknet::rng::{stream, Stream};
use shrinknet::Tensor;

fn inputs(rng: &mut Stream, n: usize, d: usize) -> Tensor {
    Tensor::matrix(n, d, (0..n * d).map(|_| rng.sample(StandardNormal)).collect()).unwrap()
}

fn random_weights(config: &NetworkConfig, rng: &mut Stream) -> WeightSet {
    let mut w = WeightSet::zeros(config);
    for layer in &mut w.layers {
        for v in layer.data_mut() {
            *v = 0.8 * rng.sample::<f64, _>(StandardNormal);
        }
    }
    w
}

fn close(a: &Tensor, b: &Tensor, tol: f64) -> bool {
    a.shape() == b.shape() && a.data().iter().zip(b.data()).all(|(x, y)| (x - y).abs() <= tol * (1.0 + x.abs()))
}

fn structures() -> Vec<NoiseStructure> {
    vec![
        NoiseStructure::unit_wise(NoiseFamily::dropout(0.3)),
        NoiseStructure::unit_wise(NoiseFamily::Gaussian { scale: 0.6 }).with_output_layer(true),
        NoiseStructure::weight_wise(NoiseFamily::Rayleigh { scale: 0.9 }),
        NoiseStructure::layer_wise(NoiseFamily::HalfCauchy { scale: 1.0 }),
        NoiseStructure::combined(NoiseFamily::InverseNakagami { shape: 2.0, scale: 1.0 }, NoiseFamily::Rayleigh { scale: 1.0 }),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    /// Scaling units, weights or layers is the same as scaling the weights.
    #[test]
    fn noisy_pass_equals_deterministic_pass_with_absorbed_masks(seed: u64, which in 0usize..5) {
        let mut rng = stream(seed);
        let config = NetworkConfig::resnet(3, 5, 2, 2);
        let structure = structures()[which];
        let mut net = Network::new(&config, &structure).unwrap();
        let w = random_weights(&config, &mut rng);
        let x = inputs(&mut rng, 7, 3);
        let masks = net.sample_masks(&mut rng);
        let noisy = net.predict(&w, &masks, &x).unwrap();
        let absorbed = forward_deterministic(&config, &w.absorb_masks(&config, &masks), &x).unwrap();
        prop_assert!(close(&noisy, &absorbed, 1e-12));
    }

    /// A dropped input unit disconnects its row of the weight matrix.
    #[test]
    fn zeroed_unit_ignores_its_weight_row(seed: u64, layer in 0usize..3, unit in 0usize..4) {
        let mut rng = stream(seed);
        let config = NetworkConfig::mlp(4, &[4, 4], 1);
        let structure = NoiseStructure::unit_wise(NoiseFamily::Gaussian { scale: 0.5 }).with_output_layer(true);
        let mut net = Network::new(&config, &structure).unwrap();
        let w = random_weights(&config, &mut rng);
        let x = inputs(&mut rng, 6, 4);
        let mut masks = net.sample_masks(&mut rng);
        masks.layers[layer].unit.as_mut().unwrap()[unit] = 0.0;
        let before = net.predict(&w, &masks, &x).unwrap();
        let mut perturbed = w.clone();
        for v in perturbed.layers[layer].row_mut(unit) {
            *v += rng.sample::<f64, _>(StandardNormal) * 10.0;
        }
        let after = net.predict(&perturbed, &masks, &x).unwrap();
        prop_assert!(close(&before, &after, 1e-12));
    }

    /// Residual blocks scaled to zero pass their input through, leaving the
    /// one-hidden-layer network.
    #[test]
    fn zero_layer_scales_collapse_residual_blocks(seed: u64, combined: bool) {
        let mut rng = stream(seed);
        let config = NetworkConfig::resnet(3, 4, 3, 1);
        let structure = if combined {
            NoiseStructure::combined(NoiseFamily::Gaussian { scale: 0.5 }, NoiseFamily::Rayleigh { scale: 1.0 })
        } else {
            NoiseStructure::layer_wise(NoiseFamily::Rayleigh { scale: 1.0 })
        };
        let mut net = Network::new(&config, &structure).unwrap();
        let w = random_weights(&config, &mut rng);
        let x = inputs(&mut rng, 5, 3);
        let mut masks = net.sample_masks(&mut rng);
        for k in config.hidden_to_hidden().collect::<Vec<_>>() {
            masks.layers[k].layer = Some(0.0);
        }
        // Only the first and last layers survive; fold their masks in.
        let absorbed = w.absorb_masks(&config, &masks);
        let shallow = NetworkConfig::mlp(3, &[4], 1);
        let oracle = WeightSet {
            layers: vec![absorbed.layers[0].clone(), absorbed.layers[4].clone()],
        };
        let expected = forward_deterministic(&shallow, &oracle, &x).unwrap();
        let got = net.predict(&w, &masks, &x).unwrap();
        prop_assert!(close(&got, &expected, 1e-12));
        // And the unit noise on the collapsed blocks no longer matters.
        if combined {
            for k in 1..4 {
                for v in masks.layers[k].unit.as_mut().unwrap() {
                    *v = rng.sample(StandardNormal);
                }
            }
            prop_assert!(close(&net.predict(&w, &masks, &x).unwrap(), &expected, 1e-12));
        }
    }
}

#[test]
fn monte_carlo_prediction_variance_falls_as_one_over_samples() {
    let mut rng = stream(21);
    let config = NetworkConfig::mlp(3, &[8], 1);
    let structure = NoiseStructure::unit_wise(NoiseFamily::dropout(0.5));
    let w = random_weights(&config, &mut rng);
    let x = inputs(&mut rng, 1, 3);
    let counts = [10usize, 100, 1000];
    let variances: Vec<f64> = counts
        .iter()
        .map(|&s| {
            let means: Vec<f64> = (0..150)
                .map(|_| predict_mc(&config, &w, &structure, &x, s, &mut rng).unwrap().mean.item())
                .collect();
            let m = means.iter().sum::<f64>() / means.len() as f64;
            means.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (means.len() - 1) as f64
        })
        .collect();
    // Least-squares slope of log variance against log S.
    let lx: Vec<f64> = counts.iter().map(|&s| (s as f64).ln()).collect();
    let ly: Vec<f64> = variances.iter().map(|v| v.ln()).collect();
    let (mx, my) = (lx.iter().sum::<f64>() / 3.0, ly.iter().sum::<f64>() / 3.0);
    let slope = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum::<f64>()
        / lx.iter().map(|a| (a - mx).powi(2)).sum::<f64>();
    assert!((slope + 1.0).abs() <= 0.15, "slope {slope}, variances {variances:?}");
}

#[test]
fn moment_map_covers_hidden_to_hidden_layers_only() {
    let mut rng = stream(22);
    let config = NetworkConfig::mlp(3, &[4, 5, 6], 1);
    let w = random_weights(&config, &mut rng);
    let grids = posterior_moment_map(&config, MomentSource::Point(&w)).unwrap();
    assert_eq!(grids.iter().map(|g| g.layer).collect::<Vec<_>>(), vec![2, 3]);
    // Bias rows are left out; entries are squared weights.
    assert_eq!(grids[0].grid.shape(), &[4, 5]);
    assert_eq!(grids[1].grid.shape(), &[5, 6]);
    assert_eq!(grids[0].grid.get(2, 3), w.layers[1].get(2, 3).powi(2));

    let variances = w.map(|_| 0.25);
    let grids = posterior_moment_map(&config, MomentSource::Gaussian { means: &w, variances: &variances }).unwrap();
    assert_eq!(grids[1].grid.get(0, 0), w.layers[2].get(0, 0).powi(2) + 0.25);

    let shallow = NetworkConfig::mlp(3, &[4], 1);
    assert!(posterior_moment_map(&shallow, MomentSource::Point(&WeightSet::zeros(&shallow))).is_err());
}
