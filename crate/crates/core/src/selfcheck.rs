//! Verification suites behind the `check` subcommand: gradient checks,
//! Pearson properties, grouping-oracle equivalence, formula substitutions
//! and the zero-control reduction to FedAvg.

use std::time::Instant;

use ndarray::Array2;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::adversity::AdversityConfig;
use crate::data::{generate_synthetic, partition_noniid};
use crate::error::{Error, Result};
use crate::merge::{group_similar, merge_group, AlphaRule, SimilarityMatrix};
use crate::model::{init_params, Activation, Batch, ModelSpec};
use crate::numeric::{pearson_corr, ParamVector};
use crate::oracle::{check_gradient, fedavg_round, reference_grouping};
use crate::scaffold::{
    client_local_update, run_round, server_aggregate, update_global_control, ClientState,
    ClientUpdate, History, LocalTraining, MlpObjective, Objective, ServerState, UpdateMode,
};

#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
    pub elapsed_ms: u128,
}

impl std::fmt::Display for CheckResult {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "[{}] {} ({} ms): {}",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.elapsed_ms,
            self.detail
        )
    }
}

fn timed(name: &str, f: impl FnOnce() -> (bool, String)) -> CheckResult {
    let start = Instant::now();
    let (passed, detail) = f();
    CheckResult {
        name: name.to_string(),
        passed,
        detail,
        elapsed_ms: start.elapsed().as_millis(),
    }
}

pub const GRAD_EPS: f64 = 1e-5;
pub const GRAD_REL_TOL: f64 = 1e-4;
pub const GRAD_ABS_FLOOR: f64 = 1e-7;

/// Analytic vs central-difference gradients on `cases` random small models.
pub fn check_gradients(cases: usize, seed: u64) -> CheckResult {
    timed("gradient check", || {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut worst = 0.0f64;
        let mut failures = Vec::new();
        for case in 0..cases {
            let hidden: Vec<usize> = (0..rng.gen_range(0..3))
                .map(|_| rng.gen_range(2..7))
                .collect();
            let activation = if case % 2 == 0 {
                Activation::Tanh
            } else {
                Activation::Relu
            };
            let spec = ModelSpec::new(rng.gen_range(2..9), hidden, rng.gen_range(2..6))
                .with_activation(activation);
            let mut params = init_params(&spec, rng.gen());
            for v in params.as_mut_slice() {
                *v += rng.gen_range(-0.1..0.1);
            }
            let rows = rng.gen_range(1..7);
            let inputs =
                Array2::from_shape_fn((rows, spec.input_dim), |_| rng.gen_range(-1.0..1.0));
            let labels = (0..rows)
                .map(|_| rng.gen_range(0..spec.num_classes))
                .collect();
            let batch = Batch { inputs, labels };
            match check_gradient(&spec, &params, &batch, GRAD_EPS, GRAD_ABS_FLOOR) {
                Ok(r) => {
                    worst = worst.max(r.max_rel_error);
                    if !r.passes(GRAD_REL_TOL) {
                        failures.push(format!("case {case}: rel {:.3e}", r.max_rel_error));
                    }
                }
                Err(e) => failures.push(format!("case {case}: {e}")),
            }
        }
        (
            failures.is_empty(),
            format!(
                "{cases} models, worst relative error {worst:.3e} (tol {GRAD_REL_TOL:e}) {}",
                failures.join("; ")
            ),
        )
    })
}

/// Symmetry, unit self-correlation, range, affine invariance and the
/// zero-variance error on `cases` random vector pairs.
pub fn check_pearson(cases: usize, seed: u64) -> CheckResult {
    timed("pearson properties", || {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut failures = Vec::new();
        for case in 0..cases {
            let len = rng.gen_range(2..64);
            let scale = 10f64.powi(rng.gen_range(-3..4));
            let a: Vec<f64> = (0..len).map(|_| rng.gen_range(-1.0..1.0) * scale).collect();
            let b: Vec<f64> = (0..len).map(|_| rng.gen_range(-1.0..1.0) * scale).collect();
            if a.iter().all(|&v| v == a[0]) || b.iter().all(|&v| v == b[0]) {
                continue;
            }
            let (a, b) = (ParamVector::new(a), ParamVector::new(b));
            let ab = pearson_corr(&a, &b);
            let ba = pearson_corr(&b, &a);
            let (Ok(ab), Ok(ba)) = (ab, ba) else {
                failures.push(format!("case {case}: unexpected error"));
                continue;
            };
            if ab != ba {
                failures.push(format!("case {case}: asymmetric {ab} vs {ba}"));
            }
            if !(-1.0..=1.0).contains(&ab) {
                failures.push(format!("case {case}: out of range {ab}"));
            }
            match pearson_corr(&a, &a) {
                Ok(r) if (r - 1.0).abs() <= 1e-12 => {}
                other => failures.push(format!("case {case}: self-correlation {other:?}")),
            }
            let p = rng.gen_range(0.01..100.0);
            let q = rng.gen_range(-100.0..100.0) * scale;
            for (slope, target) in [(p, 1.0), (-p, -1.0)] {
                let t = ParamVector::new(a.as_slice().iter().map(|x| slope * x + q).collect());
                match pearson_corr(&a, &t) {
                    Ok(r) if (r - target).abs() <= 1e-9 => {}
                    other => failures.push(format!("case {case}: affine {slope} gave {other:?}")),
                }
            }
            let constant = ParamVector::new(vec![rng.gen_range(-5.0..5.0); len]);
            if !matches!(pearson_corr(&constant, &a), Err(Error::ZeroVariance))
                || !matches!(pearson_corr(&a, &constant), Err(Error::ZeroVariance))
            {
                failures.push(format!("case {case}: constant vector not rejected"));
            }
        }
        failures.truncate(5);
        (
            failures.is_empty(),
            format!("{cases} cases {}", failures.join("; ")),
        )
    })
}

pub const ORACLE_THRESHOLDS: [f64; 4] = [0.3, 0.5, 0.7, 0.9];
pub const ORACLE_CAPS: [usize; 3] = [2, 3, 4];

/// Random symmetric matrix with unit diagonal; some entries land exactly on
/// the tested thresholds.
#[allow(clippy::needless_range_loop)]
pub fn random_similarity(rng: &mut impl Rng, n: usize) -> SimilarityMatrix {
    let mut rows = vec![vec![1.0; n]; n];
    for i in 0..n {
        for j in (i + 1)..n {
            let v = if rng.gen_bool(0.15) {
                ORACLE_THRESHOLDS[rng.gen_range(0..ORACLE_THRESHOLDS.len())]
            } else {
                rng.gen_range(-1.0..1.0)
            };
            rows[i][j] = v;
            rows[j][i] = v;
        }
    }
    SimilarityMatrix::from_rows(rows).expect("symmetric by construction")
}

/// `group_similar` against the literal reference on `matrices` random
/// matrices with 2..=6 nodes, every tested threshold and cap.
pub fn check_grouping(matrices: usize, seed: u64) -> CheckResult {
    timed("grouping oracle", || {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut compared = 0;
        let mut failures = Vec::new();
        for _ in 0..matrices {
            let n = rng.gen_range(2..=6);
            let m = random_similarity(&mut rng, n);
            let rows = m.rows();
            for &threshold in &ORACLE_THRESHOLDS {
                for &cap in &ORACLE_CAPS {
                    let plan = group_similar(&m, threshold, cap);
                    let (groups, unmerged) = reference_grouping(&rows, threshold, cap);
                    compared += 1;
                    if plan.groups != groups || plan.unmerged != unmerged {
                        failures.push(format!(
                            "n={n} t={threshold} cap={cap}: {plan:?} vs {groups:?}/{unmerged:?}"
                        ));
                    }
                }
            }
        }
        failures.truncate(3);
        (
            failures.is_empty(),
            format!("{compared} plans compared {}", failures.join("; ")),
        )
    })
}

struct Quadratic(Vec<f64>);

impl Objective for Quadratic {
    fn loss_and_grad(&self, params: &ParamVector, _: &[usize]) -> Result<(f64, ParamVector)> {
        let g: Vec<f64> = params
            .as_slice()
            .iter()
            .zip(&self.0)
            .map(|(x, a)| x - a)
            .collect();
        Ok((
            0.5 * g.iter().map(|v| v * v).sum::<f64>(),
            ParamVector::new(g),
        ))
    }
}

fn close(a: &ParamVector, b: &[f64], tol: f64) -> bool {
    a.len() == b.len()
        && a.as_slice()
            .iter()
            .zip(b)
            .all(|(x, y)| (x - y).abs() <= tol)
}

/// The literal update rules on hand-substituted inputs.
pub fn check_formulas() -> CheckResult {
    timed("formula substitution", || {
        const TOL: f64 = 1e-12;
        let pv = |v: &[f64]| ParamVector::new(v.to_vec());
        let delivered = |x: &[f64], c: &[f64], n: usize| ClientUpdate {
            client_id: 0,
            x_new: pv(x),
            c_new: pv(c),
            n_samples: n,
            delivered: true,
        };
        let mut results = Vec::new();

        let server = ServerState::new(pv(&[0.0]), 1.0, 0.5, 1, UpdateMode::PaperLiteral);
        let x1 = server_aggregate(&server, &[delivered(&[1.0], &[0.0], 1)]);
        results.push((
            "global model x_t=[0], x_i=[1] -> [-1]",
            x1.map(|x| close(&x, &[-1.0], TOL)),
        ));

        let client = ClientState {
            c: pv(&[0.0, 0.0]),
            ..ClientState::new(0, vec![0, 1, 2, 3], 2)
        };
        let training = LocalTraining {
            epochs: 1,
            eta_l: 0.5,
            batch_size: 4,
            mode: UpdateMode::PaperLiteral,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let local = client_local_update(
            &client,
            &pv(&[0.0, 0.0]),
            &pv(&[0.1, 0.1]),
            &Quadratic(vec![1.0, 1.0]),
            &training,
            &mut rng,
        );
        results.push((
            "local model -> [0.6, 0.6]",
            local.map(|u| close(&u.x_new, &[0.6, 0.6], TOL)),
        ));

        let c = pv(&[0.25, -1.5]);
        let fixed = update_global_control(
            &c,
            &[
                delivered(&[0.0, 0.0], &[0.25, -1.5], 3),
                delivered(&[0.0, 0.0], &[0.25, -1.5], 7),
            ],
        );
        results.push((
            "global control fixed point",
            fixed.map(|v| close(&v, c.as_slice(), TOL)),
        ));
        let k1 = update_global_control(&pv(&[0.0]), &[delivered(&[0.0], &[2.0], 1)]);
        results.push((
            "global control K=1 [0] + [2] -> [2]",
            k1.map(|v| close(&v, &[2.0], TOL)),
        ));

        let members = vec![
            ClientState {
                x: pv(&[1.0, 3.0]),
                c: pv(&[0.5, -0.5]),
                ..ClientState::new(0, vec![0], 2)
            },
            ClientState {
                x: pv(&[3.0, 1.0]),
                c: pv(&[-0.5, 0.5]),
                ..ClientState::new(1, vec![1], 2)
            },
        ];
        let merged = merge_group(&[0, 1], &members, AlphaRule::Uniform);
        results.push((
            "midpoint merge of x and c",
            merged.map(|m| close(&m.x, &[2.0, 2.0], TOL) && close(&m.c, &[0.0, 0.0], TOL)),
        ));

        let mut ok = true;
        let mut detail = Vec::new();
        for (name, r) in results {
            let pass = matches!(r, Ok(true));
            ok &= pass;
            detail.push(format!("{name}: {}", if pass { "ok" } else { "MISMATCH" }));
        }
        (ok, detail.join("; "))
    })
}

pub const ZERO_CONTROL_TOL: f64 = 1e-9;

/// A standard-mode round with zero controls equals weighted FedAvg.
pub fn check_zero_control(seed: u64) -> CheckResult {
    timed("zero-control reduction", || {
        let run = || -> Result<f64> {
            let spec = ModelSpec::new(12, vec![8], 4);
            let data = generate_synthetic(400, 12, 4, seed);
            let partition = partition_noniid(&data, 4, 3, seed)?;
            let objective = MlpObjective {
                spec: &spec,
                dataset: &data,
            };
            let x0 = init_params(&spec, seed);
            let mut clients: Vec<ClientState> = partition
                .client_indices
                .iter()
                .enumerate()
                .map(|(i, idx)| ClientState::new(i, idx.clone(), x0.len()))
                .collect();
            let mut server = ServerState::new(x0, 1.0, 0.1, 2, UpdateMode::Standard);
            let mut history = History::new();
            let mut worst = 0.0f64;
            for round in 0..3 {
                // pin every control to zero before the round
                server.c = ParamVector::zeros(server.x.len());
                for c in &mut clients {
                    c.c = ParamVector::zeros(server.x.len());
                }
                let expected = fedavg_round(
                    &server.x, &clients, &objective, 2, 0.1, 16, 1.0, round, seed,
                )?;
                run_round(
                    &mut server,
                    &mut clients,
                    &objective,
                    16,
                    &AdversityConfig::default(),
                    &mut history,
                    seed,
                )?;
                for (a, b) in server.x.as_slice().iter().zip(expected.as_slice()) {
                    worst = worst.max((a - b).abs());
                }
            }
            Ok(worst)
        };
        match run() {
            Ok(worst) => (
                worst <= ZERO_CONTROL_TOL,
                format!("max elementwise difference {worst:.3e} over 3 rounds (tol {ZERO_CONTROL_TOL:e})"),
            ),
            Err(e) => (false, e.to_string()),
        }
    })
}

/// All suites with the acceptance-level case counts.
pub fn run_all(seed: u64) -> Vec<CheckResult> {
    vec![
        check_gradients(20, seed),
        check_pearson(1000, seed),
        check_grouping(500, seed),
        check_formulas(),
        check_zero_control(seed),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quick_suites_pass() {
        for r in [
            check_gradients(4, 9),
            check_pearson(100, 9),
            check_grouping(40, 9),
            check_formulas(),
        ] {
            assert!(r.passed, "{r}");
        }
    }
}
