//! Fixtures shared by the benchmarks.

use rand::Rng;
use rand_distr::StandardNormal;
use shrinknet::net::{Network, NetworkConfig, NoiseStructure, WeightSet};
use shrinknet::noise::NoiseFamily;
use shrinknet::rng::stream;
use shrinknet::Tensor;

/// A UCI-sized minibatch problem: 13 inputs, one hidden layer of 50,
/// unit-wise dropout, 32 rows.
pub struct Minibatch {
    pub net: Network,
    pub weights: WeightSet,
    pub x: Tensor,
    pub y: Tensor,
}

pub fn minibatch(seed: u64) -> Minibatch {
    let config = NetworkConfig::mlp(13, &[50], 1);
    let structure = NoiseStructure::unit_wise(NoiseFamily::dropout(0.05));
    let mut rng = stream(seed);
    let weights = WeightSet::init_he(&config, &mut rng);
    let mut randn = |n: usize| (0..n).map(|_| rng.sample(StandardNormal)).collect::<Vec<f64>>();
    let x = Tensor::matrix(32, 13, randn(32 * 13)).expect("shape matches data");
    let y = Tensor::column(&randn(32));
    Minibatch {
        net: Network::new(&config, &structure).expect("valid structure"),
        weights,
        x,
        y,
    }
}
