//! Central finite-difference gradient checking, shared by unit tests.

use crate::tensor::{Graph, NodeId, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub(crate) fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-scale..scale)).collect();
    Tensor::from_vec(shape.to_vec(), data).unwrap()
}

/// Like `random_tensor` but every value keeps |v| in [margin, 1), so
/// finite-difference probes cannot cross kinks like relu's at zero.
fn random_tensor_with_margin(rng: &mut ChaCha8Rng, shape: &[usize], margin: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let sign = if rng.gen::<bool>() { 1.0 } else { -1.0 };
            sign * rng.gen_range(margin..1.0)
        })
        .collect();
    Tensor::from_vec(shape.to_vec(), data).unwrap()
}

/// Builds the same scalar-rooted graph over fresh random parameters `trials`
/// times and asserts the analytic gradient of every parameter element agrees
/// with central finite differences (ε = 1e-5) within relative 1e-4.
pub(crate) fn check_param_gradients(
    seed: u64,
    trials: usize,
    shapes: &[Vec<usize>],
    build: impl Fn(&mut Graph, &[NodeId]) -> NodeId,
    min_magnitude: Option<f64>,
    tol: f64,
) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let eps = 1e-5;
    for trial in 0..trials {
        let params: Vec<Tensor> = shapes
            .iter()
            .map(|s| match min_magnitude {
                Some(m) => random_tensor_with_margin(&mut rng, s, m),
                None => random_tensor(&mut rng, s, 1.0),
            })
            .collect();

        let eval = |tensors: &[Tensor]| -> f64 {
            let mut g = Graph::new();
            let ids: Vec<NodeId> = tensors.iter().map(|t| g.param(t.clone())).collect();
            let root = build(&mut g, &ids);
            g.value(root).data()[0]
        };

        let mut g = Graph::new();
        let ids: Vec<NodeId> = params.iter().map(|t| g.param(t.clone())).collect();
        let root = build(&mut g, &ids);
        let grads = g.backward(root).unwrap();

        for (pi, p) in params.iter().enumerate() {
            let analytic = grads
                .get(ids[pi])
                .unwrap_or_else(|| panic!("no gradient for parameter {pi}"));
            for ei in 0..p.numel() {
                let mut plus = params.clone();
                plus[pi].data_mut()[ei] += eps;
                let mut minus = params.clone();
                minus[pi].data_mut()[ei] -= eps;
                let numeric = (eval(&plus) - eval(&minus)) / (2.0 * eps);
                let a = analytic.data()[ei];
                let denom = a.abs().max(numeric.abs()).max(1e-3);
                let rel = (a - numeric).abs() / denom;
                assert!(
                    rel <= tol,
                    "trial {trial}, param {pi}, element {ei}: analytic {a} vs numeric {numeric} (rel {rel:.2e})"
                );
            }
        }
    }
}
