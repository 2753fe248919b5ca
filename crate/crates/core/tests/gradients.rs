//! Reverse-mode gradients against five-point finite differences.

mod common;

use common::{check_objective_gradient, numeric_gradient, randn, relative_error, Objective};
use rand::Rng;
use shrinknet::autodiff::{Graph, NodeId};
use shrinknet::rng::{stream, Stream};
use shrinknet::Tensor;

const H: f64 = 1e-6;
const TOL: f64 = 1e-5;

/// A graph plus parameter shapes and fixed input bindings.
struct Case {
    graph: Graph,
    out: NodeId,
    params: Vec<(&'static str, Vec<usize>)>,
    inputs: Vec<(&'static str, Tensor)>,
}

impl Case {
    fn value(&mut self, flat: &[f64]) -> f64 {
        let mut tensors = Vec::new();
        let mut at = 0;
        for (_, shape) in &self.params {
            let n: usize = shape.iter().product();
            tensors.push(Tensor::new(shape.clone(), flat[at..at + n].to_vec()).unwrap());
            at += n;
        }
        let mut bind: Vec<(&str, &Tensor)> = self.params.iter().map(|(n, _)| *n).zip(&tensors).collect();
        bind.extend(self.inputs.iter().map(|(n, t)| (*n, t)));
        self.graph.evaluate(self.out, &bind).unwrap().item()
    }

    fn error(&mut self, rng: &mut Stream) -> f64 {
        let flat: Vec<f64> = self
            .params
            .iter()
            .flat_map(|(_, s)| randn(rng, s).into_data())
            .collect();
        self.value(&flat);
        let g = self.graph.gradient(self.out).unwrap();
        let analytic: Vec<f64> = self
            .params
            .iter()
            .flat_map(|(n, _)| g.get(n).unwrap().data().to_vec())
            .collect();
        let numeric = numeric_gradient(|p| self.value(p), &flat, H);
        relative_error(&analytic, &numeric, 1e-8)
    }
}

/// `Σ c ⊙ op(...)` with a random fixed `c`, so every output entry matters.
fn weighted_sum(g: &mut Graph, node: NodeId, shape: &[usize], rng: &mut Stream) -> (NodeId, (&'static str, Tensor)) {
    let c = g.input("c");
    let prod = g.mul(node, c);
    (g.sum(prod), ("c", randn(rng, shape)))
}

fn primitive_case(name: &str, rng: &mut Stream) -> Case {
    let mut g = Graph::new();
    let a = g.parameter("a");
    let (out, params, inputs) = match name {
        "matmul" => {
            let b = g.parameter("b");
            let m = g.matmul(a, b);
            let (out, c) = weighted_sum(&mut g, m, &[3, 2], rng);
            (out, vec![("a", vec![3, 4]), ("b", vec![4, 2])], vec![c])
        }
        "mul" | "add" => {
            let b = g.parameter("b");
            let m = if name == "mul" { g.mul(a, b) } else { g.add(a, b) };
            let (out, c) = weighted_sum(&mut g, m, &[3, 4], rng);
            (out, vec![("a", vec![3, 4]), ("b", vec![3, 4])], vec![c])
        }
        "relu" => {
            let m = g.relu(a);
            let (out, c) = weighted_sum(&mut g, m, &[5, 3], rng);
            (out, vec![("a", vec![5, 3])], vec![c])
        }
        "append_ones" => {
            let m = g.append_ones(a);
            let (out, c) = weighted_sum(&mut g, m, &[4, 3], rng);
            (out, vec![("a", vec![4, 2])], vec![c])
        }
        "scale" => {
            let m = g.scale(a, -1.7);
            let (out, c) = weighted_sum(&mut g, m, &[2, 3], rng);
            (out, vec![("a", vec![2, 3])], vec![c])
        }
        "sum" => {
            // Squared through `mul` so the gradient depends on the point.
            let sq = g.mul(a, a);
            (g.sum(sq), vec![("a", vec![3, 3])], vec![])
        }
        "gaussian_log_lik" => {
            let y = g.input("y");
            let v = g.parameter("v");
            let out = g.gaussian_log_lik(y, a, v);
            (out, vec![("a", vec![6, 1])], vec![("y", randn(rng, &[6, 1]))])
        }
        other => unreachable!("unknown primitive {other}"),
    };
    let mut params = params;
    if name == "gaussian_log_lik" {
        params.push(("v", vec![]));
    }
    Case {
        graph: g,
        out,
        params,
        inputs,
    }
}

#[test]
fn every_primitive_matches_finite_differences() {
    let mut rng = stream(11);
    for name in ["matmul", "mul", "add", "relu", "append_ones", "scale", "sum"] {
        for trial in 0..100 {
            let mut case = primitive_case(name, &mut rng);
            let err = case.error(&mut rng);
            assert!(err <= TOL, "{name} trial {trial}: relative error {err:e}");
        }
    }
}

#[test]
fn gaussian_log_lik_gradient_includes_variance() {
    let mut rng = stream(12);
    for trial in 0..100 {
        let mut case = primitive_case("gaussian_log_lik", &mut rng);
        // The variance must stay positive: evaluate away from zero.
        let mean = randn(&mut rng, &[6, 1]).into_data();
        let v = 0.5 + rng.random::<f64>() * 2.0;
        let flat: Vec<f64> = mean.into_iter().chain([v]).collect();
        case.value(&flat);
        let g = case.graph.gradient(case.out).unwrap();
        let analytic: Vec<f64> = g.get("a").unwrap().data().iter().copied().chain([g.get("v").unwrap().item()]).collect();
        let numeric = numeric_gradient(|p| case.value(p), &flat, H);
        let err = relative_error(&analytic, &numeric, 1e-8);
        assert!(err <= TOL, "trial {trial}: relative error {err:e}");
    }
}

// ---- objectives -----------------------------------------------------------

fn assert_gradient(objective: Objective, seed: u64) {
    let report = check_objective_gradient(objective, seed);
    assert!(report.passes(), "{objective:?}: {report:?}");
}

#[test]
fn lower_bound_gradient() {
    assert_gradient(Objective::LowerBound, 21);
}

#[test]
fn importance_weighted_gradient() {
    assert_gradient(Objective::ImportanceWeighted, 22);
}

#[test]
fn tail_adaptive_surrogate_gradient() {
    assert_gradient(Objective::TailAdaptive, 23);
}

#[test]
fn hierarchical_gradient() {
    assert_gradient(Objective::Hierarchical, 24);
}

#[test]
fn elbo_gradient() {
    assert_gradient(Objective::Elbo, 25);
}
