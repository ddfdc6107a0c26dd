//! Central finite-difference gradient checking.
//!
//! The checker re-evaluates a caller-supplied graph builder with perturbed
//! inputs, so it is independent of the backward pass it verifies. It runs in
//! `f64`; the canonical settings are step `1e-5` and relative tolerance
//! `1e-4`.

use super::{ExecMode, Graph, NodeId, Result, Tensor};

/// Canonical central-difference step.
pub const DEFAULT_STEP: f64 = 1e-5;

/// Builds a scalar-rooted graph over the given leaf inputs.
pub trait BuildFn: Fn(&mut Graph<f64>, &[NodeId]) -> Result<NodeId> {}
impl<F: Fn(&mut Graph<f64>, &[NodeId]) -> Result<NodeId>> BuildFn for F {}

fn eval(build: &impl BuildFn, inputs: &[Tensor<f64>]) -> Result<f64> {
    let mut g = Graph::new(ExecMode::Deterministic);
    let ids: Vec<NodeId> = inputs
        .iter()
        .map(|t| g.leaf(t.clone(), true))
        .collect::<Result<_>>()?;
    let root = build(&mut g, &ids)?;
    Ok(g.value(root).item())
}

/// Analytic gradients of the built scalar w.r.t. every input.
pub fn analytic_gradients(build: &impl BuildFn, inputs: &[Tensor<f64>]) -> Result<Vec<Tensor<f64>>> {
    let mut g = Graph::new(ExecMode::Deterministic);
    let ids: Vec<NodeId> = inputs
        .iter()
        .map(|t| g.leaf(t.clone(), true))
        .collect::<Result<_>>()?;
    let root = build(&mut g, &ids)?;
    let mut grads = g.backward(root)?;
    Ok(ids
        .iter()
        .zip(inputs)
        .map(|(&id, t)| grads.take(id).unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect())
}

/// Central finite-difference gradients, one component at a time.
pub fn numeric_gradients(
    build: &impl BuildFn,
    inputs: &[Tensor<f64>],
    step: f64,
) -> Result<Vec<Tensor<f64>>> {
    let mut out = Vec::with_capacity(inputs.len());
    for which in 0..inputs.len() {
        let mut grad = Tensor::zeros(inputs[which].shape());
        for i in 0..inputs[which].numel() {
            let mut plus = inputs.to_vec();
            plus[which].data_mut()[i] += step;
            let mut minus = inputs.to_vec();
            minus[which].data_mut()[i] -= step;
            grad.data_mut()[i] = (eval(build, &plus)? - eval(build, &minus)?) / (2.0 * step);
        }
        out.push(grad);
    }
    Ok(out)
}

/// Relative error normalized by `max(1, |a|, |b|)`, so tiny gradients are
/// compared absolutely.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / 1.0_f64.max(a.abs()).max(b.abs())
}

/// Worst relative error per input between analytic and central-difference
/// gradients.
pub fn per_input_max_rel_err(
    build: &impl BuildFn,
    inputs: &[Tensor<f64>],
    step: f64,
) -> Result<Vec<f64>> {
    let analytic = analytic_gradients(build, inputs)?;
    let numeric = numeric_gradients(build, inputs, step)?;
    Ok(analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| {
            a.data()
                .iter()
                .zip(n.data())
                .map(|(&x, &y)| rel_err(x, y))
                .fold(0.0, f64::max)
        })
        .collect())
}

/// Worst relative error across all inputs.
pub fn max_rel_err(build: &impl BuildFn, inputs: &[Tensor<f64>], step: f64) -> Result<f64> {
    Ok(per_input_max_rel_err(build, inputs, step)?
        .into_iter()
        .fold(0.0, f64::max))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn catches_a_wrong_gradient() {
        // d/dx of sum(x*x) is 2x; a builder computing sum(x*x*x) instead
        // would disagree with its own finite differences only if backward
        // were broken, so here we compare two *different* functions to make
        // sure the checker can actually fail.
        let x = Tensor::new(vec![2], vec![0.7, -1.3]).unwrap();
        let analytic = analytic_gradients(
            &|g: &mut Graph<f64>, ids: &[NodeId]| {
                let sq = g.mul(ids[0], ids[0])?;
                g.sum(sq)
            },
            &[x.clone()],
        )
        .unwrap();
        let numeric = numeric_gradients(
            &|g: &mut Graph<f64>, ids: &[NodeId]| {
                let sq = g.mul(ids[0], ids[0])?;
                let cube = g.mul(sq, ids[0])?;
                g.sum(cube)
            },
            &[x],
            DEFAULT_STEP,
        )
        .unwrap();
        let worst = analytic[0]
            .data()
            .iter()
            .zip(numeric[0].data())
            .map(|(&a, &n)| rel_err(a, n))
            .fold(0.0, f64::max);
        assert!(worst > 1e-2);
    }

    #[test]
    fn matmul_gradient_matches() {
        let a = Tensor::from_fn(&[3, 4], |i| ((i * 31 % 13) as f64) * 0.21 - 1.1);
        let b = Tensor::from_fn(&[4, 2], |i| ((i * 17 % 7) as f64) * 0.33 - 0.9);
        let err = max_rel_err(
            &|g: &mut Graph<f64>, ids: &[NodeId]| {
                let y = g.matmul(ids[0], ids[1])?;
                g.sum(y)
            },
            &[a, b],
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(err < 1e-4, "rel err {err}");
    }
}
