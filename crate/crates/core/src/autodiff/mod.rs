//! Reverse-mode differentiation, including gradients through one inner
//! gradient-descent step.

mod graph;
mod params;

pub use graph::{Graph, Indices, NodeId, Var};
pub use params::{relative_error, ParamSet};

use crate::error::{Error, Result};

/// A recorded scalar computation over a parameter set.
pub struct Evaluation {
    graph: Graph,
    loss: NodeId,
    params: Vec<NodeId>,
    layout: ParamSet,
}

impl std::fmt::Debug for Evaluation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Evaluation")
            .field("loss", &self.loss())
            .field("nodes", &self.graph.len())
            .finish()
    }
}

/// Run `build` on leaves holding `params` and record the result.
pub fn evaluate<F>(params: &ParamSet, build: F) -> Result<Evaluation>
where
    F: for<'g> FnOnce(&'g Graph, &[Var<'g>]) -> Result<Var<'g>>,
{
    let graph = Graph::new();
    let (loss, ids) = {
        let vars = param_leaves(&graph, params);
        let loss = build(&graph, &vars)?;
        if loss.shape() != (1, 1) {
            return Err(Error::contract(format!(
                "computation must be scalar, got shape {:?}",
                loss.shape()
            )));
        }
        (loss.id(), vars.iter().map(|v| v.id()).collect::<Vec<_>>())
    };
    graph.check_finite()?;
    Ok(Evaluation {
        graph,
        loss,
        params: ids,
        layout: params.zeros_like(),
    })
}

/// Leaves for every entry of `params`, in order.
pub fn param_leaves<'g>(graph: &'g Graph, params: &ParamSet) -> Vec<Var<'g>> {
    params.values().map(|v| graph.leaf(v.clone())).collect()
}

/// Collect gradient nodes into a parameter set, filling unreachable entries with zeros.
pub fn collect_gradients(layout: &ParamSet, grads: &[Option<Var<'_>>]) -> Result<ParamSet> {
    let mut flat = Vec::with_capacity(layout.num_scalars());
    for (g, p) in grads.iter().zip(layout.values()) {
        match g {
            Some(g) => {
                let v = g.value();
                if v.dim() != p.dim() {
                    return Err(Error::contract("gradient shape differs from parameter"));
                }
                flat.extend(v.iter().copied());
            }
            None => flat.extend(std::iter::repeat_n(0.0, p.len())),
        }
    }
    layout.unflatten(&flat)
}

impl Evaluation {
    pub fn loss(&self) -> f64 {
        self.graph.value(self.loss)[[0, 0]]
    }

    pub fn graph(&self) -> &Graph {
        &self.graph
    }

    /// Gradient of the recorded loss with respect to every parameter.
    pub fn gradient(&self) -> Result<ParamSet> {
        let g = &self.graph;
        let vars: Vec<Var<'_>> = self.params.iter().map(|&id| g.var(id)).collect();
        let grads = g.grad(g.var(self.loss), &vars);
        g.check_finite()
            .map_err(|e| e.in_context("backward pass"))?;
        collect_gradients(&self.layout, &grads)
    }
}

/// One graph-connected gradient-descent step: `params - eta * grads`.
///
/// Entries whose gradient is `None` are passed through unchanged.
pub fn inner_step<'g>(
    params: &[Var<'g>],
    grads: &[Option<Var<'g>>],
    eta: f64,
) -> Result<Vec<Var<'g>>> {
    if !(eta >= 0.0 && eta.is_finite()) {
        return Err(Error::contract(format!(
            "step size must be finite and >= 0, got {eta}"
        )));
    }
    if params.len() != grads.len() {
        return Err(Error::contract(format!(
            "{} parameters but {} gradients",
            params.len(),
            grads.len()
        )));
    }
    params
        .iter()
        .zip(grads)
        .map(|(&p, g)| match g {
            None => Ok(p),
            Some(g) if g.shape() != p.shape() => Err(Error::contract(format!(
                "gradient shape {:?} differs from parameter shape {:?}",
                g.shape(),
                p.shape()
            ))),
            Some(g) if eta == 0.0 => Ok(p),
            Some(g) => Ok(p - g.scale(eta)),
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct MetaGradient {
    /// Outer loss evaluated at the adapted parameters.
    pub loss: f64,
    pub grads: ParamSet,
}

/// Gradient of `outer(params - eta * grad inner(params))` with respect to `params`.
///
/// With `first_order` the inner gradient is treated as a constant, which drops
/// the Hessian term of the exact meta-gradient.
pub fn meta_gradient<O, I>(
    outer: O,
    inner: I,
    params: &ParamSet,
    eta: f64,
    first_order: bool,
) -> Result<MetaGradient>
where
    O: for<'g> Fn(&'g Graph, &[Var<'g>]) -> Result<Var<'g>>,
    I: for<'g> Fn(&'g Graph, &[Var<'g>]) -> Result<Var<'g>>,
{
    let g = Graph::new();
    let theta = param_leaves(&g, params);
    let inner_loss = inner(&g, &theta)?;
    let mut inner_grads = g.grad(inner_loss, &theta);
    if first_order {
        for slot in inner_grads.iter_mut() {
            *slot = slot.map(Var::detach);
        }
    }
    let adapted = inner_step(&theta, &inner_grads, eta)?;
    let outer_loss = outer(&g, &adapted)?;
    let grads = g.grad(outer_loss, &theta);
    g.check_finite()?;
    Ok(MetaGradient {
        loss: outer_loss.item(),
        grads: collect_gradients(params, &grads)?,
    })
}

/// Central differences `(f(x + h) - f(x - h)) / 2h`, one coordinate at a time.
pub fn finite_diff_gradient<F>(loss: F, params: &ParamSet, step: f64) -> Result<ParamSet>
where
    F: Fn(&ParamSet) -> Result<f64>,
{
    if step.is_nan() || step <= 0.0 {
        return Err(Error::contract("finite-difference step must be > 0"));
    }
    let mut flat = params.flatten();
    let mut grad = vec![0.0; flat.len()];
    for i in 0..flat.len() {
        let x = flat[i];
        flat[i] = x + step;
        let up = loss(&params.unflatten(&flat)?)?;
        flat[i] = x - step;
        let down = loss(&params.unflatten(&flat)?)?;
        flat[i] = x;
        grad[i] = (up - down) / (2.0 * step);
    }
    params.unflatten(&grad)
}
