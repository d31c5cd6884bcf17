use super::{Bindings, Graph, GraphError, NodeId, Tensor};

/// `max_i |a_i - n_i| / (|n_i| + 1e-12)`.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / (n.abs() + 1e-12))
        .fold(0.0, f64::max)
}

fn bind_flat(g: &Graph, inputs: &[NodeId], flat: &[f64]) -> Bindings {
    let mut offset = 0;
    let mut b = Bindings::new();
    for &id in inputs {
        let shape = g.shape(id).to_vec();
        let n: usize = shape.iter().product();
        b.insert(id, Tensor::new(shape, flat[offset..offset + n].to_vec()));
        offset += n;
    }
    assert_eq!(offset, flat.len(), "parameter vector length does not match the declared inputs");
    b
}

/// Compares reverse-mode gradients against central differences.
///
/// `build` appends a scalar loss to an empty graph and returns it together
/// with the input nodes that `params` is split across (in order). The
/// numerical side re-evaluates the loss with every stop-gradient node pinned
/// to its value at `params`, so both sides differentiate the same function.
pub fn grad_check<F>(build: F, params: &[f64], step: f64) -> Result<f64, GraphError>
where
    F: FnOnce(&mut Graph) -> (NodeId, Vec<NodeId>),
{
    assert!(step > 0.0, "finite-difference step must be positive");
    let mut g = Graph::new();
    let (loss, inputs) = build(&mut g);
    g.mark_output(loss);

    let bindings = bind_flat(&g, &inputs, params);
    let value = g.forward(&bindings)?[0].item();
    if !value.is_finite() {
        return Err(GraphError::NonFiniteLoss(value));
    }
    let grads = g.backward(loss)?;
    let analytic: Vec<f64> = inputs.iter().flat_map(|id| grads[id].data().to_vec()).collect();

    let frozen = g.stop_gradient_values();
    let mut numeric = Vec::with_capacity(params.len());
    let mut theta = params.to_vec();
    for i in 0..params.len() {
        let orig = theta[i];
        theta[i] = orig + step;
        let plus = g.forward_frozen(&bind_flat(&g, &inputs, &theta), &frozen)?[0].item();
        theta[i] = orig - step;
        let minus = g.forward_frozen(&bind_flat(&g, &inputs, &theta), &frozen)?[0].item();
        theta[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(GraphError::NonFiniteLoss(if plus.is_finite() { minus } else { plus }));
        }
        numeric.push((plus - minus) / (2.0 * step));
    }
    Ok(max_relative_error(&analytic, &numeric))
}
