//! Independent reference computations used by the `check` subcommand and
//! the test suites.
//!
//! Nothing here calls the production path it is meant to verify: gradients
//! are checked against central differences of the loss alone, grouping is
//! checked against a literal used-set simulation, and a SCAFFOLD round with
//! zero controls is checked against plain weighted federated averaging.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;

use crate::error::Result;
use crate::model::{loss_and_grad, Batch, ModelSpec};
use crate::numeric::ParamVector;
use crate::rng::{stream_rng, Stream};
use crate::scaffold::{ClientState, Objective};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradientCheck {
    /// Largest relative error over coordinates whose magnitude reaches the
    /// absolute floor.
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub coordinates: usize,
}

impl GradientCheck {
    pub fn passes(&self, rel_tol: f64) -> bool {
        self.max_rel_error < rel_tol
    }
}

/// Compares the analytic gradient with central differences of the loss.
///
/// Coordinates where both derivatives are smaller than `abs_floor` only need
/// to agree to within `abs_floor`.
pub fn check_gradient(
    spec: &ModelSpec,
    params: &ParamVector,
    batch: &Batch,
    eps: f64,
    abs_floor: f64,
) -> Result<GradientCheck> {
    let (_, grad) = loss_and_grad(spec, params, batch)?;
    let mut probe = params.clone();
    let mut max_rel = 0.0f64;
    let mut max_abs = 0.0f64;
    for k in 0..params.len() {
        let orig = probe.as_slice()[k];
        probe.as_mut_slice()[k] = orig + eps;
        let (plus, _) = loss_and_grad(spec, &probe, batch)?;
        probe.as_mut_slice()[k] = orig - eps;
        let (minus, _) = loss_and_grad(spec, &probe, batch)?;
        probe.as_mut_slice()[k] = orig;

        let numeric = (plus - minus) / (2.0 * eps);
        let analytic = grad.as_slice()[k];
        let abs = (numeric - analytic).abs();
        max_abs = max_abs.max(abs);
        let magnitude = numeric.abs().max(analytic.abs());
        let rel = if magnitude >= abs_floor {
            abs / magnitude
        } else if abs <= abs_floor {
            0.0
        } else {
            f64::INFINITY
        };
        max_rel = max_rel.max(rel);
    }
    Ok(GradientCheck {
        max_rel_error: max_rel,
        max_abs_error: max_abs,
        coordinates: params.len(),
    })
}

/// Literal used-set transcription of the greedy grouping procedure.
///
/// Returns `(groups, unmerged_nodes)`.
#[allow(clippy::needless_range_loop)]
pub fn reference_grouping(
    correlation: &[Vec<f64>],
    threshold: f64,
    max_group_size: usize,
) -> (Vec<Vec<usize>>, Vec<usize>) {
    let mut groups: Vec<Vec<usize>> = Vec::new();
    let mut used_nodes: BTreeSet<usize> = BTreeSet::new();
    let mut unmerged_nodes: Vec<usize> = Vec::new();

    for i in 0..correlation.len() {
        if used_nodes.contains(&i) {
            continue;
        }
        let mut group = vec![i];
        for (j, &r) in correlation[i].iter().enumerate() {
            if j == i {
                continue;
            }
            if !used_nodes.contains(&j) && r >= threshold {
                group.push(j);
                if group.len() == max_group_size {
                    break;
                }
            }
        }
        if group.len() > 1 {
            used_nodes.extend(group.iter().copied());
            groups.push(group);
        } else {
            unmerged_nodes.push(i);
        }
    }
    for i in 0..correlation.len() {
        if !used_nodes.contains(&i) && !unmerged_nodes.contains(&i) {
            unmerged_nodes.push(i);
        }
    }
    (groups, unmerged_nodes)
}

/// One round of plain weighted FedAvg with local minibatch SGD, using the same
/// per-client shuffle streams as the simulator.
#[allow(clippy::too_many_arguments)]
pub fn fedavg_round<O: Objective>(
    x_t: &ParamVector,
    clients: &[ClientState],
    objective: &O,
    epochs: usize,
    eta_l: f64,
    batch_size: usize,
    eta_g: f64,
    round: usize,
    seed: u64,
) -> Result<ParamVector> {
    let total: usize = clients.iter().map(|c| c.partition_indices.len()).sum();
    let mut out = x_t.as_slice().to_vec();
    for client in clients {
        let mut rng = stream_rng(seed, Stream::Shuffle, &[round as u64, client.id as u64]);
        let mut x = x_t.as_slice().to_vec();
        let mut order = client.partition_indices.clone();
        for _ in 0..epochs {
            order.shuffle(&mut rng);
            for batch in order.chunks(batch_size) {
                let (_, g) = objective.loss_and_grad(&ParamVector::new(x.clone()), batch)?;
                for (xi, gi) in x.iter_mut().zip(g.as_slice()) {
                    *xi -= eta_l * gi;
                }
            }
        }
        let w = client.partition_indices.len() as f64 / total as f64;
        for ((o, xi), x0) in out.iter_mut().zip(&x).zip(x_t.as_slice()) {
            *o += eta_g * w * (xi - x0);
        }
    }
    Ok(ParamVector::new(out))
}
