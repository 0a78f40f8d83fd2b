//! Pearson-similarity node merging.
//!
//! After the configured round, the freshly trained local models are compared
//! pairwise, similar nodes are grouped greedily under a threshold and a size
//! cap, and each group is fused into one intermediary node that owns the
//! union of its members' data and the weighted mean of their models and
//! control vectors.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{pearson_corr, weighted_mean, ParamVector};
use crate::scaffold::ClientState;

/// Symmetric node-similarity matrix with unit diagonal.
///
/// Pairs involving a constant (zero-variance) model hold `-inf`, which never
/// passes a threshold.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    n: usize,
    r: Vec<f64>,
}

impl SimilarityMatrix {
    /// Builds a matrix from row-major entries, checking symmetry and the diagonal.
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let n = rows.len();
        let mut r = Vec::with_capacity(n * n);
        for row in &rows {
            if row.len() != n {
                return Err(Error::dims(n, row.len()));
            }
            r.extend_from_slice(row);
        }
        let m = SimilarityMatrix { n, r };
        for i in 0..n {
            if m.get(i, i) != 1.0 {
                return Err(Error::ConfigInvalid(format!("diagonal entry {i} is not 1")));
            }
            for j in 0..i {
                if m.get(i, j) != m.get(j, i) {
                    return Err(Error::ConfigInvalid(format!(
                        "entry ({i}, {j}) is not symmetric"
                    )));
                }
            }
        }
        Ok(m)
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.r[i * self.n + j]
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        self.r.chunks(self.n.max(1)).map(<[f64]>::to_vec).collect()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MergePlan {
    pub groups: Vec<Vec<usize>>,
    pub unmerged: Vec<usize>,
}

impl MergePlan {
    pub fn merged_nodes(&self) -> usize {
        self.groups.iter().map(Vec::len).sum()
    }

    pub fn roster_size(&self) -> usize {
        self.groups.len() + self.unmerged.len()
    }

    /// Checks that groups and unmerged nodes partition `0..n` exactly.
    pub fn check_partition(&self, n: usize) -> Result<()> {
        let mut seen = vec![false; n];
        for &i in self.groups.iter().flatten().chain(&self.unmerged) {
            if i >= n {
                return Err(Error::PlanMismatch(format!(
                    "node {i} outside roster of {n}"
                )));
            }
            if std::mem::replace(&mut seen[i], true) {
                return Err(Error::PlanMismatch(format!("node {i} listed twice")));
            }
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(Error::PlanMismatch(format!(
                "node {missing} missing from plan"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlphaRule {
    /// Every member weighs `1 / |group|`.
    Uniform,
    /// Members weigh by sample count.
    #[default]
    SizeWeighted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MergeConfig {
    pub threshold: f64,
    pub max_group_size: usize,
    /// Rounds after which a merge event runs.
    pub merge_rounds: Vec<usize>,
    pub alpha_rule: AlphaRule,
}

impl Default for MergeConfig {
    fn default() -> Self {
        MergeConfig {
            threshold: 0.7,
            max_group_size: 3,
            merge_rounds: vec![4],
            alpha_rule: AlphaRule::SizeWeighted,
        }
    }
}

impl MergeConfig {
    pub fn validate(&self, rounds: usize) -> Result<()> {
        if !(self.threshold > -1.0 && self.threshold <= 1.0) {
            return Err(Error::ConfigInvalid(format!(
                "merge threshold must be in (-1, 1], got {}",
                self.threshold
            )));
        }
        if self.max_group_size < 2 {
            return Err(Error::ConfigInvalid(
                "max_group_size must be at least 2".into(),
            ));
        }
        if let Some(&r) = self.merge_rounds.iter().find(|&&r| r >= rounds) {
            return Err(Error::ConfigInvalid(format!(
                "merge round {r} is not below the round count {rounds}"
            )));
        }
        Ok(())
    }
}

/// Pairwise Pearson correlations between models.
pub fn correlation_matrix(models: &[&ParamVector]) -> Result<SimilarityMatrix> {
    let n = models.len();
    if n < 2 {
        return Err(Error::dims(2, n));
    }
    for m in &models[1..] {
        models[0].check_dim(m)?;
    }
    let mut r = vec![0.0; n * n];
    for i in 0..n {
        r[i * n + i] = 1.0;
        for j in (i + 1)..n {
            let v = match pearson_corr(models[i], models[j]) {
                Ok(v) => v,
                Err(Error::ZeroVariance) => f64::NEG_INFINITY,
                Err(e) => return Err(e),
            };
            r[i * n + j] = v;
            r[j * n + i] = v;
        }
    }
    Ok(SimilarityMatrix { n, r })
}

/// Greedy grouping in ascending index order.
///
/// Each unused node seeds a group and pulls in every later-scanned unused node
/// whose similarity to the seed reaches `threshold`, until the group holds
/// `max_group_size` nodes. Groups of one are reported as unmerged.
pub fn group_similar(
    matrix: &SimilarityMatrix,
    threshold: f64,
    max_group_size: usize,
) -> MergePlan {
    let n = matrix.len();
    let mut used = vec![false; n];
    let mut plan = MergePlan::default();
    for seed in 0..n {
        if used[seed] {
            continue;
        }
        let mut group = vec![seed];
        for (j, &taken) in used.iter().enumerate() {
            if group.len() >= max_group_size {
                break;
            }
            if j != seed && !taken && matrix.get(seed, j) >= threshold {
                group.push(j);
            }
        }
        if group.len() > 1 {
            for &m in &group {
                used[m] = true;
            }
            plan.groups.push(group);
        } else {
            plan.unmerged.push(seed);
        }
    }
    // leftover sweep; never adds anything for a symmetric matrix
    for (i, &taken) in used.iter().enumerate() {
        if !taken && !plan.unmerged.contains(&i) {
            plan.unmerged.push(i);
        }
    }
    plan
}

fn member_weights(members: &[&ClientState], rule: AlphaRule) -> Vec<f64> {
    match rule {
        AlphaRule::Uniform => vec![1.0; members.len()],
        AlphaRule::SizeWeighted => members.iter().map(|c| c.n_samples() as f64).collect(),
    }
}

/// Fuses roster positions `group` into one intermediary node.
pub fn merge_group(
    group: &[usize],
    clients: &[ClientState],
    rule: AlphaRule,
) -> Result<ClientState> {
    if group.is_empty() {
        return Err(Error::EmptyGroup);
    }
    let members: Vec<&ClientState> = group
        .iter()
        .map(|&i| {
            clients.get(i).ok_or_else(|| {
                Error::PlanMismatch(format!("node {i} outside roster of {}", clients.len()))
            })
        })
        .collect::<Result<_>>()?;
    let weights = member_weights(&members, rule);
    let xs: Vec<&ParamVector> = members.iter().map(|c| &c.x).collect();
    let cs: Vec<&ParamVector> = members.iter().map(|c| &c.c).collect();
    let x = weighted_mean(&xs, &weights)?;
    let c = weighted_mean(&cs, &weights)?;

    let mut partition_indices = Vec::new();
    for m in &members {
        partition_indices.extend_from_slice(&m.partition_indices);
    }
    let flags = members
        .iter()
        .map(|m| m.flags)
        .reduce(|a, b| a.union(b))
        .unwrap_or_default();
    Ok(ClientState {
        id: members.iter().map(|m| m.id).min().unwrap_or(0),
        partition_indices,
        x,
        c,
        flags,
    })
}

/// New roster: one intermediary per group, then the unmerged nodes, each
/// part ordered by id.
pub fn apply_merge(
    clients: &[ClientState],
    plan: &MergePlan,
    rule: AlphaRule,
) -> Result<Vec<ClientState>> {
    plan.check_partition(clients.len())?;
    if plan.groups.iter().any(|g| g.len() < 2) {
        return Err(Error::PlanMismatch(
            "groups must hold at least two nodes".into(),
        ));
    }
    let mut merged = plan
        .groups
        .iter()
        .map(|g| merge_group(g, clients, rule))
        .collect::<Result<Vec<_>>>()?;
    merged.sort_by_key(|c| c.id);
    let mut rest: Vec<ClientState> = plan.unmerged.iter().map(|&i| clients[i].clone()).collect();
    rest.sort_by_key(|c| c.id);
    merged.extend(rest);
    Ok(merged)
}
