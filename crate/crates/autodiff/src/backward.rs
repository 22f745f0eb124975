use std::collections::{HashMap, HashSet};

use crate::error::AutodiffError;
use crate::value::{no_grad, with_grad_enabled, Value};

/// Gradients of the scalar `output` with respect to each value in `wrt`.
///
/// With `create_graph` set, the returned gradients carry their own history
/// and can be differentiated again. Inputs that `output` does not depend on
/// receive an all-zero gradient of matching shape. Multiple uses of a value
/// accumulate by summation.
pub fn grad(
    output: &Value,
    wrt: &[Value],
    create_graph: bool,
) -> Result<Vec<Value>, AutodiffError> {
    if output.numel() != 1 {
        return Err(AutodiffError::NonScalarOutput(output.shape().to_vec()));
    }
    let zeros = |v: &Value| no_grad(|| Value::zeros(v.shape()));
    if !output.requires_grad() {
        return Ok(wrt.iter().map(zeros).collect());
    }

    // Every node reachable through tracked edges.
    let mut reachable: HashMap<u64, Value> = HashMap::new();
    let mut stack = vec![output.clone()];
    while let Some(v) = stack.pop() {
        if reachable.contains_key(&v.id()) {
            continue;
        }
        if let Some(op) = v.op() {
            stack.extend(op.inputs.iter().filter(|i| i.requires_grad()).cloned());
        }
        reachable.insert(v.id(), v);
    }

    // Ids increase with creation, so ascending id order is topological.
    let mut order: Vec<Value> = reachable.into_values().collect();
    order.sort_unstable_by_key(|v| v.id());

    let wrt_ids: HashSet<u64> = wrt.iter().map(|v| v.id()).collect();
    let mut leads: HashSet<u64> = HashSet::new();
    for v in &order {
        let hit = wrt_ids.contains(&v.id())
            || v.op()
                .is_some_and(|op| op.inputs.iter().any(|i| leads.contains(&i.id())));
        if hit {
            leads.insert(v.id());
        }
    }

    let run = || {
        let mut grads: HashMap<u64, Value> = HashMap::new();
        let mut found: HashMap<u64, Value> = HashMap::new();
        grads.insert(output.id(), Value::ones(output.shape()));
        for v in order.iter().rev() {
            if !leads.contains(&v.id()) {
                continue;
            }
            let Some(g) = grads.remove(&v.id()) else {
                continue;
            };
            if wrt_ids.contains(&v.id()) {
                found.insert(v.id(), g.clone());
            }
            let Some(op) = v.op() else { continue };
            if !op.inputs.iter().any(|i| leads.contains(&i.id())) {
                continue;
            }
            for (input, gi) in op.inputs.iter().zip(v.vjp(&g)) {
                let Some(gi) = gi else { continue };
                if !leads.contains(&input.id()) {
                    continue;
                }
                let acc = match grads.remove(&input.id()) {
                    Some(prev) => prev.add(&gi),
                    None => gi,
                };
                grads.insert(input.id(), acc);
            }
        }
        found
    };
    let found = if create_graph { with_grad_enabled(run) } else { no_grad(run) };

    Ok(wrt
        .iter()
        .map(|v| found.get(&v.id()).cloned().unwrap_or_else(|| zeros(v)))
        .collect())
}
