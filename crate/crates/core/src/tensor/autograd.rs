use std::collections::{HashMap, HashSet};

use super::{GradModeGuard, Tensor};
use crate::error::{Error, Result};

/// Parents-before-children order of every grad-requiring node reachable from `root`.
fn topo_order(root: &Tensor) -> Vec<Tensor> {
    let mut visited = HashSet::new();
    let mut order = Vec::new();
    let mut stack = vec![(root.clone(), false)];
    while let Some((t, expanded)) = stack.pop() {
        if expanded {
            order.push(t);
            continue;
        }
        if !visited.insert(t.id()) {
            continue;
        }
        stack.push((t.clone(), true));
        if let Some(node) = t.node() {
            for p in &node.parents {
                if p.requires_grad() && !visited.contains(&p.id()) {
                    stack.push((p.clone(), false));
                }
            }
        }
    }
    order
}

/// Gradients of a one-element `output` with respect to each of `inputs`.
///
/// With `create_graph` the returned gradients are themselves differentiable.
/// An input that `output` does not depend on is an error, never a silent zero.
pub fn grad(output: &Tensor, inputs: &[&Tensor], create_graph: bool) -> Result<Vec<Tensor>> {
    if output.numel() != 1 {
        return Err(Error::Autograd(format!(
            "grad() needs a one-element output, got shape {:?}",
            output.shape()
        )));
    }
    let seed = Tensor::ones(output.shape());
    grad_with_seed(output, &seed, inputs, create_graph)
}

pub fn grad_with_seed(
    output: &Tensor,
    seed: &Tensor,
    inputs: &[&Tensor],
    create_graph: bool,
) -> Result<Vec<Tensor>> {
    if seed.shape() != output.shape() {
        return Err(Error::Autograd(format!(
            "seed shape {:?} does not match output {:?}",
            seed.shape(),
            output.shape()
        )));
    }
    if !output.requires_grad() {
        return Err(Error::Autograd(
            "output is not connected to any differentiable input".into(),
        ));
    }
    let order = topo_order(output);
    let input_ids: HashSet<u64> = inputs.iter().map(|t| t.id()).collect();

    // A node is needed when it is an input or lies on a path to one.
    let mut needed = HashSet::new();
    for t in &order {
        let via_parent = t
            .node()
            .map(|n| n.parents.iter().any(|p| needed.contains(&p.id())))
            .unwrap_or(false);
        if input_ids.contains(&t.id()) || via_parent {
            needed.insert(t.id());
        }
    }
    for (i, t) in inputs.iter().enumerate() {
        if !needed.contains(&t.id()) {
            return Err(Error::Autograd(format!(
                "input #{i} (shape {:?}) is not on any differentiable path to the output",
                t.shape()
            )));
        }
    }

    let _mode = GradModeGuard::new(create_graph);
    let mut grads: HashMap<u64, Tensor> = HashMap::new();
    grads.insert(output.id(), seed.clone());
    let mut results: HashMap<u64, Tensor> = HashMap::new();

    for t in order.iter().rev() {
        if !needed.contains(&t.id()) {
            continue;
        }
        let Some(g) = grads.remove(&t.id()) else {
            continue;
        };
        if input_ids.contains(&t.id()) {
            results.insert(t.id(), g.clone());
        }
        let Some(node) = t.node() else {
            continue;
        };
        let mask: Vec<bool> = node
            .parents
            .iter()
            .map(|p| needed.contains(&p.id()))
            .collect();
        if !mask.iter().any(|&m| m) {
            continue;
        }
        let parent_grads = node.op.backward(t, &node.parents, &g, &mask)?;
        for ((p, pg), want) in node.parents.iter().zip(parent_grads).zip(&mask) {
            let (Some(pg), true) = (pg, *want) else {
                continue;
            };
            if pg.shape() != p.shape() {
                return Err(Error::Autograd(format!(
                    "{} backward produced {:?} for parent {:?}",
                    node.op.name(),
                    pg.shape(),
                    p.shape()
                )));
            }
            let acc = match grads.remove(&p.id()) {
                Some(prev) => prev.add(&pg)?,
                None => pg,
            };
            grads.insert(p.id(), acc);
        }
    }

    inputs
        .iter()
        .map(|t| {
            results
                .get(&t.id())
                .cloned()
                .ok_or_else(|| Error::Autograd("gradient was not produced".into()))
        })
        .collect()
}
