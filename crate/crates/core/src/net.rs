//! Feedforward and residual networks under multiplicative noise.
//!
//! Weight layer `k` (0-based) maps `h_k` to `h_{k+1}`; layer `L` is the
//! output layer. With bias enabled each weight matrix has one extra
//! trailing row multiplied by a constant-1 unit. The noise structures act
//! as follows:
//!
//! * unit-wise: `f(((h ⊙ ξ) ⊕ 1) W)`, one `ξ` per input unit, bias untouched
//! * weight-wise: `f((h ⊕ 1)(W ⊙ Ξ))`, one `ξ` per non-bias weight
//! * layer-wise: `f(τ · ((h ⊕ 1) W)) + h` on hidden-to-hidden residual layers
//! * combined: unit-wise and layer-wise together, `f(τ · (((h ⊙ ξ) ⊕ 1) W)) + h`

use std::io::Write;
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::noise::NoiseFamily;
use crate::rng::Stream;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    Relu,
    Identity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    /// `D_0, …, D_{L+1}`.
    pub widths: Vec<usize>,
    /// One per hidden layer.
    pub activations: Vec<Activation>,
    /// One per hidden layer; `residual[k]` adds `h_k` to `h_{k+1}`.
    pub residual: Vec<bool>,
    /// Base prior scale `σ₀`.
    pub sigma0: f64,
    #[serde(default = "default_true")]
    pub bias: bool,
}

fn default_true() -> bool {
    true
}

impl NetworkConfig {
    pub fn new(
        widths: Vec<usize>,
        activations: Vec<Activation>,
        residual: Vec<bool>,
        sigma0: f64,
    ) -> Result<Self> {
        let config = NetworkConfig {
            widths,
            activations,
            residual,
            sigma0,
            bias: true,
        };
        config.validate()?;
        Ok(config)
    }

    /// ReLU network without skip connections.
    pub fn mlp(input: usize, hidden: &[usize], output: usize) -> Self {
        let mut widths = vec![input];
        widths.extend_from_slice(hidden);
        widths.push(output);
        NetworkConfig {
            widths,
            activations: vec![Activation::Relu; hidden.len()],
            residual: vec![false; hidden.len()],
            sigma0: 1.0,
            bias: true,
        }
    }

    /// An input layer of `width` units followed by `blocks` residual ReLU
    /// layers of the same width.
    pub fn resnet(input: usize, width: usize, blocks: usize, output: usize) -> Self {
        let hidden = vec![width; blocks + 1];
        let mut config = Self::mlp(input, &hidden, output);
        for r in config.residual.iter_mut().skip(1) {
            *r = true;
        }
        config
    }

    /// A linear model with no hidden layer, `y = x W (+ b)`.
    pub fn linear(input: usize, output: usize, bias: bool) -> Self {
        NetworkConfig {
            widths: vec![input, output],
            activations: vec![],
            residual: vec![],
            sigma0: 1.0,
            bias,
        }
    }

    pub fn with_sigma0(mut self, sigma0: f64) -> Self {
        self.sigma0 = sigma0;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.len() < 2 || self.widths.contains(&0) {
            return Err(Error::Config(format!(
                "need at least input and output widths, all positive: {:?}",
                self.widths
            )));
        }
        let hidden = self.hidden_layers();
        if self.activations.len() != hidden || self.residual.len() != hidden {
            return Err(Error::Config(format!(
                "{hidden} hidden layers need {hidden} activations and residual flags"
            )));
        }
        for (k, &res) in self.residual.iter().enumerate() {
            if res && self.widths[k] != self.widths[k + 1] {
                return Err(Error::Config(format!(
                    "residual connection on hidden layer {} needs equal widths, got {} -> {}",
                    k + 1,
                    self.widths[k],
                    self.widths[k + 1]
                )));
            }
        }
        if !(self.sigma0 > 0.0) {
            return Err(Error::Config(format!("sigma0 must be positive, got {}", self.sigma0)));
        }
        Ok(())
    }

    /// `L`.
    pub fn hidden_layers(&self) -> usize {
        self.widths.len() - 2
    }

    /// `L + 1`.
    pub fn weight_layers(&self) -> usize {
        self.widths.len() - 1
    }

    pub fn input_width(&self) -> usize {
        self.widths[0]
    }

    pub fn output_width(&self) -> usize {
        *self.widths.last().expect("validated")
    }

    /// Rows of weight layer `k` including the bias row.
    pub fn layer_rows(&self, k: usize) -> usize {
        self.widths[k] + usize::from(self.bias)
    }

    pub fn layer_shape(&self, k: usize) -> [usize; 2] {
        [self.layer_rows(k), self.widths[k + 1]]
    }

    /// Weight layers whose input and output are both hidden units.
    pub fn hidden_to_hidden(&self) -> impl Iterator<Item = usize> + '_ {
        1..self.hidden_layers()
    }

    pub fn is_hidden_to_hidden(&self, k: usize) -> bool {
        k >= 1 && k < self.hidden_layers()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "layout", rename_all = "kebab-case")]
pub enum NoiseLayout {
    Deterministic,
    /// One scale per input unit of each noisy layer (ARD structure).
    UnitWise { family: NoiseFamily },
    /// One scale per weight (DropConnect).
    WeightWise { family: NoiseFamily },
    /// One scale per hidden-to-hidden residual layer (ADD structure).
    LayerWise { family: NoiseFamily },
    /// Unit-wise and layer-wise scales multiplied together (ARD-ADD).
    Combined { unit: NoiseFamily, layer: NoiseFamily },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseStructure {
    pub layout: NoiseLayout,
    /// Also apply unit/weight noise to the output layer's inputs.
    #[serde(default)]
    pub mask_output_layer: bool,
}

impl NoiseStructure {
    pub fn deterministic() -> Self {
        Self::new(NoiseLayout::Deterministic)
    }

    pub fn new(layout: NoiseLayout) -> Self {
        NoiseStructure {
            layout,
            mask_output_layer: false,
        }
    }

    pub fn unit_wise(family: NoiseFamily) -> Self {
        Self::new(NoiseLayout::UnitWise { family })
    }

    pub fn weight_wise(family: NoiseFamily) -> Self {
        Self::new(NoiseLayout::WeightWise { family })
    }

    pub fn layer_wise(family: NoiseFamily) -> Self {
        Self::new(NoiseLayout::LayerWise { family })
    }

    pub fn combined(unit: NoiseFamily, layer: NoiseFamily) -> Self {
        Self::new(NoiseLayout::Combined { unit, layer })
    }

    pub fn with_output_layer(mut self, on: bool) -> Self {
        self.mask_output_layer = on;
        self
    }

    pub fn unit_family(&self) -> Option<NoiseFamily> {
        match self.layout {
            NoiseLayout::UnitWise { family } => Some(family),
            NoiseLayout::Combined { unit, .. } => Some(unit),
            _ => None,
        }
    }

    pub fn weight_family(&self) -> Option<NoiseFamily> {
        match self.layout {
            NoiseLayout::WeightWise { family } => Some(family),
            _ => None,
        }
    }

    pub fn layer_family(&self) -> Option<NoiseFamily> {
        match self.layout {
            NoiseLayout::LayerWise { family } => Some(family),
            NoiseLayout::Combined { layer, .. } => Some(layer),
            _ => None,
        }
    }

    pub fn families(&self) -> Vec<NoiseFamily> {
        [self.unit_family(), self.weight_family(), self.layer_family()]
            .into_iter()
            .flatten()
            .collect()
    }

    /// Whether unit- or weight-wise noise touches weight layer `k`.
    pub fn masks_layer(&self, config: &NetworkConfig, k: usize) -> bool {
        k < config.hidden_layers() || self.mask_output_layer
    }

    pub fn validate(&self, config: &NetworkConfig) -> Result<()> {
        config.validate()?;
        for f in self.families() {
            f.validate()?;
        }
        if self.layer_family().is_some() {
            if config.hidden_layers() < 2 {
                return Err(Error::Config(
                    "layer-wise scales need at least one hidden-to-hidden layer".into(),
                ));
            }
            for k in config.hidden_to_hidden() {
                if !config.residual[k] {
                    return Err(Error::Config(format!(
                        "layer-wise scale on hidden layer {} needs a residual connection",
                        k + 1
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Scale variables for one weight layer.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LayerMask {
    /// One entry per non-bias input unit.
    pub unit: Option<Vec<f64>>,
    /// Same shape as the weight matrix; the bias row is always 1.
    pub weight: Option<Tensor>,
    pub layer: Option<f64>,
}

/// One draw of every scale variable in the network.
#[derive(Debug, Clone, PartialEq)]
pub struct Masks {
    pub layers: Vec<LayerMask>,
}

impl Masks {
    /// All scales equal to 1, shaped for `structure`.
    pub fn ones(config: &NetworkConfig, structure: &NoiseStructure) -> Self {
        Self::build(config, structure, |_| 1.0)
    }

    pub fn sample(config: &NetworkConfig, structure: &NoiseStructure, rng: &mut Stream) -> Self {
        Self::build(config, structure, |f| f.sample(rng))
    }

    fn build(
        config: &NetworkConfig,
        structure: &NoiseStructure,
        mut draw: impl FnMut(&NoiseFamily) -> f64,
    ) -> Self {
        let mut layers = Vec::with_capacity(config.weight_layers());
        for k in 0..config.weight_layers() {
            let mut mask = LayerMask::default();
            if structure.masks_layer(config, k) {
                if let Some(f) = structure.unit_family() {
                    mask.unit = Some((0..config.widths[k]).map(|_| draw(&f)).collect());
                }
                if let Some(f) = structure.weight_family() {
                    let [rows, cols] = config.layer_shape(k);
                    let mut t = Tensor::full(&[rows, cols], 1.0);
                    for r in 0..config.widths[k] {
                        for v in t.row_mut(r) {
                            *v = draw(&f);
                        }
                    }
                    mask.weight = Some(t);
                }
            }
            if config.is_hidden_to_hidden(k) {
                if let Some(f) = structure.layer_family() {
                    mask.layer = Some(draw(&f));
                }
            }
            layers.push(mask);
        }
        Masks { layers }
    }
}

/// Per-layer weight matrices `W_1 … W_{L+1}`, bias as the trailing row.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightSet {
    pub layers: Vec<Tensor>,
}

impl WeightSet {
    pub fn zeros(config: &NetworkConfig) -> Self {
        Self::filled(config, 0.0)
    }

    pub fn filled(config: &NetworkConfig, value: f64) -> Self {
        WeightSet {
            layers: (0..config.weight_layers())
                .map(|k| Tensor::full(&config.layer_shape(k), value))
                .collect(),
        }
    }

    /// Zero-mean Gaussian weights with standard deviation `√(2 / D_{l-1})`,
    /// zero biases.
    pub fn init_he(config: &NetworkConfig, rng: &mut Stream) -> Self {
        let mut w = Self::zeros(config);
        for (k, layer) in w.layers.iter_mut().enumerate() {
            let sd = (2.0 / config.widths[k] as f64).sqrt();
            for r in 0..config.widths[k] {
                for v in layer.row_mut(r) {
                    *v = sd * rng.sample::<f64, _>(StandardNormal);
                }
            }
        }
        w
    }

    pub fn check(&self, config: &NetworkConfig) -> Result<()> {
        if self.layers.len() != config.weight_layers() {
            return Err(Error::Config(format!(
                "expected {} weight layers, got {}",
                config.weight_layers(),
                self.layers.len()
            )));
        }
        for (k, layer) in self.layers.iter().enumerate() {
            if layer.shape() != config.layer_shape(k) {
                return Err(Error::Config(format!(
                    "weight layer {} has shape {:?}, expected {:?}",
                    k + 1,
                    layer.shape(),
                    config.layer_shape(k)
                )));
            }
        }
        Ok(())
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(Tensor::numel).sum()
    }

    pub fn sum_squares(&self) -> f64 {
        self.layers.iter().map(Tensor::sum_squares).sum()
    }

    pub fn axpy(&mut self, alpha: f64, other: &WeightSet) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.axpy(alpha, b);
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        for l in &mut self.layers {
            l.scale_in_place(alpha);
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64 + Copy) -> WeightSet {
        WeightSet {
            layers: self.layers.iter().map(|t| t.map(f)).collect(),
        }
    }

    pub fn zip_map(&self, other: &WeightSet, f: impl Fn(f64, f64) -> f64 + Copy) -> WeightSet {
        WeightSet {
            layers: self
                .layers
                .iter()
                .zip(&other.layers)
                .map(|(a, b)| a.zip_map(b, f))
                .collect(),
        }
    }

    pub fn flat(&self) -> Vec<f64> {
        self.layers.iter().flat_map(|t| t.data().iter().copied()).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(Tensor::is_finite)
    }

    /// Applies a sampled mask to the weights themselves, so that a
    /// deterministic pass with the result reproduces the noisy pass.
    pub fn absorb_masks(&self, config: &NetworkConfig, masks: &Masks) -> WeightSet {
        let mut out = self.clone();
        for (k, (layer, mask)) in out.layers.iter_mut().zip(&masks.layers).enumerate() {
            if let Some(unit) = &mask.unit {
                for (r, &xi) in unit.iter().enumerate() {
                    layer.row_mut(r).iter_mut().for_each(|v| *v *= xi);
                }
            }
            if let Some(c) = &mask.weight {
                *layer = layer.zip_map(c, |a, b| a * b);
            }
            if let Some(tau) = mask.layer {
                layer.scale_in_place(tau);
            }
            debug_assert_eq!(layer.shape(), config.layer_shape(k));
        }
        out
    }
}

#[derive(Debug, Clone)]
struct LayerNodes {
    unit: Option<(String, NodeId)>,
    weight_mask: Option<(String, NodeId)>,
    layer: Option<(String, NodeId)>,
    weight: (String, NodeId),
}

/// A network bound to a noise structure, holding its reusable graph.
#[derive(Debug, Clone)]
pub struct Network {
    config: NetworkConfig,
    structure: NoiseStructure,
    graph: Graph,
    layers: Vec<LayerNodes>,
    prediction: NodeId,
    log_lik: NodeId,
}

impl Network {
    pub fn new(config: &NetworkConfig, structure: &NoiseStructure) -> Result<Self> {
        structure.validate(config)?;
        let mut g = Graph::new();
        let x = g.input("x");
        let mut h = x;
        let mut layers = Vec::with_capacity(config.weight_layers());
        let mut prediction = x;
        for k in 0..config.weight_layers() {
            let masked = structure.masks_layer(config, k);
            let mut input = h;
            let unit = (masked && structure.unit_family().is_some()).then(|| {
                let name = format!("unit{k}");
                let id = g.input(&name);
                input = g.mul(input, id);
                (name, id)
            });
            if config.bias {
                input = g.append_ones(input);
            }
            let wname = format!("w{k}");
            let w = g.parameter(&wname);
            let mut weight = w;
            let weight_mask = (masked && structure.weight_family().is_some()).then(|| {
                let name = format!("connect{k}");
                let id = g.input(&name);
                weight = g.mul(weight, id);
                (name, id)
            });
            let mut z = g.matmul(input, weight);
            let layer = (config.is_hidden_to_hidden(k) && structure.layer_family().is_some())
                .then(|| {
                    let name = format!("layer{k}");
                    let id = g.input(&name);
                    z = g.mul(z, id);
                    (name, id)
                });
            if k == config.hidden_layers() {
                prediction = z;
            } else {
                let mut a = match config.activations[k] {
                    Activation::Relu => g.relu(z),
                    Activation::Identity => z,
                };
                if config.residual[k] {
                    a = g.add(a, h);
                }
                h = a;
            }
            layers.push(LayerNodes {
                unit,
                weight_mask,
                layer,
                weight: (wname, w),
            });
        }
        let y = g.input("y");
        let var = g.input("noise_var");
        let log_lik = g.gaussian_log_lik(y, prediction, var);
        Ok(Network {
            config: config.clone(),
            structure: *structure,
            graph: g,
            layers,
            prediction,
            log_lik,
        })
    }

    pub fn deterministic(config: &NetworkConfig) -> Result<Self> {
        Self::new(config, &NoiseStructure::deterministic())
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn structure(&self) -> &NoiseStructure {
        &self.structure
    }

    pub fn sample_masks(&self, rng: &mut Stream) -> Masks {
        Masks::sample(&self.config, &self.structure, rng)
    }

    pub fn ones_masks(&self) -> Masks {
        Masks::ones(&self.config, &self.structure)
    }

    fn bindings(&self, weights: &WeightSet, masks: &Masks, x: &Tensor) -> Result<Vec<(String, Tensor)>> {
        weights.check(&self.config)?;
        if x.cols() != self.config.input_width() || !x.is_matrix() {
            return Err(Error::InvalidTensor(format!(
                "input has shape {:?}, network expects width {}",
                x.shape(),
                self.config.input_width()
            )));
        }
        if masks.layers.len() != self.layers.len() {
            return Err(Error::Config("mask layer count does not match the network".into()));
        }
        let n = x.rows();
        let mut out = Vec::with_capacity(3 * self.layers.len());
        for (k, (nodes, mask)) in self.layers.iter().zip(&masks.layers).enumerate() {
            out.push((nodes.weight.0.clone(), weights.layers[k].clone()));
            if let Some((name, _)) = &nodes.unit {
                let unit = mask
                    .unit
                    .as_ref()
                    .ok_or_else(|| Error::Config(format!("missing unit mask for layer {}", k + 1)))?;
                let width = self.config.widths[k];
                if unit.len() != width {
                    return Err(Error::Config(format!(
                        "unit mask for layer {} has {} entries, expected {width}",
                        k + 1,
                        unit.len()
                    )));
                }
                let mut data = Vec::with_capacity(n * width);
                for _ in 0..n {
                    data.extend_from_slice(unit);
                }
                out.push((name.clone(), Tensor::matrix(n, width, data)?));
            }
            if let Some((name, _)) = &nodes.weight_mask {
                let c = mask
                    .weight
                    .as_ref()
                    .ok_or_else(|| Error::Config(format!("missing weight mask for layer {}", k + 1)))?;
                out.push((name.clone(), c.clone()));
            }
            if let Some((name, _)) = &nodes.layer {
                let tau = mask
                    .layer
                    .ok_or_else(|| Error::Config(format!("missing layer scale for layer {}", k + 1)))?;
                out.push((name.clone(), Tensor::full(&[n, self.config.widths[k + 1]], tau)));
            }
        }
        out.push(("x".into(), x.clone()));
        Ok(out)
    }

    pub fn predict(&mut self, weights: &WeightSet, masks: &Masks, x: &Tensor) -> Result<Tensor> {
        let bindings = self.bindings(weights, masks, x)?;
        let refs: Vec<(&str, &Tensor)> = bindings.iter().map(|(n, t)| (n.as_str(), t)).collect();
        self.graph.evaluate(self.prediction, &refs)
    }

    fn bind_likelihood(
        &mut self,
        weights: &WeightSet,
        masks: &Masks,
        x: &Tensor,
        y: &Tensor,
        noise_var: f64,
    ) -> Result<f64> {
        let mut bindings = self.bindings(weights, masks, x)?;
        bindings.push(("y".into(), y.clone()));
        bindings.push(("noise_var".into(), Tensor::scalar(noise_var)));
        let refs: Vec<(&str, &Tensor)> = bindings.iter().map(|(n, t)| (n.as_str(), t)).collect();
        Ok(self.graph.evaluate(self.log_lik, &refs)?.item())
    }

    /// `log p(y | X, W, masks)` under homoscedastic Gaussian noise.
    pub fn log_likelihood(
        &mut self,
        weights: &WeightSet,
        masks: &Masks,
        x: &Tensor,
        y: &Tensor,
        noise_var: f64,
    ) -> Result<f64> {
        self.bind_likelihood(weights, masks, x, y, noise_var)
    }

    /// Log-likelihood and its gradient with respect to every weight.
    pub fn log_likelihood_grad(
        &mut self,
        weights: &WeightSet,
        masks: &Masks,
        x: &Tensor,
        y: &Tensor,
        noise_var: f64,
    ) -> Result<(f64, WeightSet)> {
        let value = self.bind_likelihood(weights, masks, x, y, noise_var)?;
        let mut grads = self.graph.gradient(self.log_lik)?;
        let layers = self
            .layers
            .iter()
            .map(|l| grads.take_node(l.weight.1).expect("every weight is a parameter"))
            .collect();
        Ok((value, WeightSet { layers }))
    }
}

/// One noisy forward pass with freshly drawn masks.
pub fn forward_noisy(
    config: &NetworkConfig,
    weights: &WeightSet,
    structure: &NoiseStructure,
    x: &Tensor,
    rng: &mut Stream,
) -> Result<(Tensor, Masks)> {
    let mut net = Network::new(config, structure)?;
    let masks = net.sample_masks(rng);
    let prediction = net.predict(weights, &masks, x)?;
    Ok((prediction, masks))
}

/// Noiseless forward pass.
pub fn forward_deterministic(config: &NetworkConfig, weights: &WeightSet, x: &Tensor) -> Result<Tensor> {
    let mut net = Network::deterministic(config)?;
    let masks = net.ones_masks();
    net.predict(weights, &masks, x)
}

#[derive(Debug, Clone)]
pub struct McPrediction {
    pub mean: Tensor,
    pub samples: Vec<Tensor>,
}

/// Averages `samples` noisy forward passes.
pub fn predict_mc_with(
    net: &mut Network,
    weights: &WeightSet,
    x: &Tensor,
    samples: usize,
    rng: &mut Stream,
) -> Result<McPrediction> {
    if samples == 0 {
        return Err(Error::InvalidParameter("need at least one sample".into()));
    }
    let mut outputs = Vec::with_capacity(samples);
    for _ in 0..samples {
        let masks = net.sample_masks(rng);
        outputs.push(net.predict(weights, &masks, x)?);
    }
    let mut mean = Tensor::zeros(outputs[0].shape());
    for o in &outputs {
        mean.axpy(1.0 / samples as f64, o);
    }
    Ok(McPrediction {
        mean,
        samples: outputs,
    })
}

pub fn predict_mc(
    config: &NetworkConfig,
    weights: &WeightSet,
    structure: &NoiseStructure,
    x: &Tensor,
    samples: usize,
    rng: &mut Stream,
) -> Result<McPrediction> {
    let mut net = Network::new(config, structure)?;
    predict_mc_with(&mut net, weights, x, samples, rng)
}

/// Where the per-weight second moments come from.
#[derive(Debug, Clone, Copy)]
pub enum MomentSource<'a> {
    /// Point estimates; the moment is `w²`.
    Point(&'a WeightSet),
    /// Mean-field Gaussian; the moment is `μ² + σ²`.
    Gaussian {
        means: &'a WeightSet,
        variances: &'a WeightSet,
    },
}

/// Second-moment grid of one hidden-to-hidden weight matrix (bias row
/// excluded), row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentGrid {
    /// 1-based index of the weight matrix.
    pub layer: usize,
    pub grid: Tensor,
}

pub fn posterior_moment_map(config: &NetworkConfig, source: MomentSource<'_>) -> Result<Vec<MomentGrid>> {
    if config.hidden_layers() < 2 {
        return Err(Error::Config(
            "moment maps need at least one hidden-to-hidden layer".into(),
        ));
    }
    let moments = match source {
        MomentSource::Point(w) => {
            w.check(config)?;
            w.map(|v| v * v)
        }
        MomentSource::Gaussian { means, variances } => {
            means.check(config)?;
            variances.check(config)?;
            means.zip_map(variances, |m, s| m * m + s)
        }
    };
    Ok(config
        .hidden_to_hidden()
        .map(|k| {
            let rows: Vec<usize> = (0..config.widths[k]).collect();
            MomentGrid {
                layer: k + 1,
                grid: moments.layers[k].select_rows(&rows),
            }
        })
        .collect())
}

/// Writes one `layer_<l>.csv` per grid: one line per matrix row.
pub fn write_moment_grids(dir: &Path, grids: &[MomentGrid]) -> Result<Vec<std::path::PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    for g in grids {
        let path = dir.join(format!("layer_{}.csv", g.layer));
        let mut f = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        for r in 0..g.grid.rows() {
            let line: Vec<String> = g.grid.row(r).iter().map(|v| format!("{v:?}")).collect();
            writeln!(f, "{}", line.join(",")).map_err(|e| Error::io(&path, e))?;
        }
        written.push(path);
    }
    Ok(written)
}
