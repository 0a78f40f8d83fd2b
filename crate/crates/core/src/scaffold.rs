//! SCAFFOLD round machinery: local training with control-variate correction,
//! weighted model aggregation and global control averaging.
//!
//! Two formula conventions are supported. [`UpdateMode::Standard`] follows the
//! reference SCAFFOLD algorithm (correction scaled by the local learning rate,
//! server steps towards the clients). [`UpdateMode::PaperLiteral`] applies the
//! update rules with the signs and scaling exactly as they are usually printed
//! in the merging-variant pseudocode:
//!
//! ```text
//! x_i   <- x_i - eta_l * g + (c - c_i)
//! c_i'  <- c_i + (c - c_i) - eta_l * g_last
//! x'    <- x - eta_g * sum_i (n_i / n) (x_i' - x)
//! ```
//!
//! The literal server rule moves away from the client models, so it does not
//! train; it exists so those formulas stay executable and testable.

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adversity::{self, AdversityConfig};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{self, ModelSpec};
use crate::numeric::ParamVector;
use crate::rng::{stream_rng, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpdateMode {
    PaperLiteral,
    #[default]
    Standard,
}

impl UpdateMode {
    pub fn as_str(self) -> &'static str {
        match self {
            UpdateMode::PaperLiteral => "paper_literal",
            UpdateMode::Standard => "standard",
        }
    }
}

/// Adversity markers carried by a client. Merging ORs them together.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClientFlags {
    pub poisoned: bool,
    pub loss_affected: bool,
    pub delay_rounds: usize,
}

impl ClientFlags {
    pub fn union(self, other: ClientFlags) -> ClientFlags {
        ClientFlags {
            poisoned: self.poisoned || other.poisoned,
            loss_affected: self.loss_affected || other.loss_affected,
            delay_rounds: self.delay_rounds.max(other.delay_rounds),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientState {
    pub id: usize,
    pub partition_indices: Vec<usize>,
    /// Most recent local model.
    pub x: ParamVector,
    /// Local control vector.
    pub c: ParamVector,
    pub flags: ClientFlags,
}

impl ClientState {
    pub fn new(id: usize, partition_indices: Vec<usize>, dim: usize) -> Self {
        ClientState {
            id,
            partition_indices,
            x: ParamVector::zeros(dim),
            c: ParamVector::zeros(dim),
            flags: ClientFlags::default(),
        }
    }

    pub fn n_samples(&self) -> usize {
        self.partition_indices.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ServerState {
    pub x: ParamVector,
    pub c: ParamVector,
    pub round: usize,
    pub eta_g: f64,
    pub eta_l: f64,
    pub local_epochs: usize,
    pub mode: UpdateMode,
}

impl ServerState {
    /// Global model `x0` with a zero global control vector.
    pub fn new(
        x0: ParamVector,
        eta_g: f64,
        eta_l: f64,
        local_epochs: usize,
        mode: UpdateMode,
    ) -> Self {
        let dim = x0.len();
        ServerState {
            x: x0,
            c: ParamVector::zeros(dim),
            round: 0,
            eta_g,
            eta_l,
            local_epochs,
            mode,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientUpdate {
    pub client_id: usize,
    pub x_new: ParamVector,
    pub c_new: ParamVector,
    pub n_samples: usize,
    pub delivered: bool,
}

/// Source of local minibatch gradients.
pub trait Objective: Sync {
    fn loss_and_grad(&self, params: &ParamVector, samples: &[usize]) -> Result<(f64, ParamVector)>;
}

/// Mean cross-entropy of an MLP over dataset rows.
pub struct MlpObjective<'a> {
    pub spec: &'a ModelSpec,
    pub dataset: &'a Dataset,
}

impl Objective for MlpObjective<'_> {
    fn loss_and_grad(&self, params: &ParamVector, samples: &[usize]) -> Result<(f64, ParamVector)> {
        model::loss_and_grad(self.spec, params, &self.dataset.batch(samples))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalTraining {
    pub epochs: usize,
    pub eta_l: f64,
    pub batch_size: usize,
    pub mode: UpdateMode,
}

/// Trains one client from the broadcast `(x_t, c_t)`.
///
/// A non-finite loss or model marks the update undelivered; the returned
/// vectors are then the unchanged inputs.
pub fn client_local_update<O, R>(
    client: &ClientState,
    x_t: &ParamVector,
    c_t: &ParamVector,
    objective: &O,
    training: &LocalTraining,
    rng: &mut R,
) -> Result<ClientUpdate>
where
    O: Objective + ?Sized,
    R: Rng + ?Sized,
{
    x_t.check_dim(c_t)?;
    x_t.check_dim(&client.c)?;
    if training.epochs == 0 || training.batch_size == 0 {
        return Err(Error::ConfigInvalid(
            "epochs and batch size must be at least 1".into(),
        ));
    }
    match train_locally(client, x_t, c_t, objective, training, rng) {
        Ok((x_new, c_new)) => Ok(ClientUpdate {
            client_id: client.id,
            x_new,
            c_new,
            n_samples: client.n_samples(),
            delivered: true,
        }),
        Err(Error::NonFiniteLoss) | Err(Error::NonFinite) => {
            log::warn!("client {} diverged; update withheld", client.id);
            Ok(ClientUpdate {
                client_id: client.id,
                x_new: x_t.clone(),
                c_new: client.c.clone(),
                n_samples: client.n_samples(),
                delivered: false,
            })
        }
        Err(e) => Err(e),
    }
}

fn train_locally<O, R>(
    client: &ClientState,
    x_t: &ParamVector,
    c_t: &ParamVector,
    objective: &O,
    training: &LocalTraining,
    rng: &mut R,
) -> Result<(ParamVector, ParamVector)>
where
    O: Objective + ?Sized,
    R: Rng + ?Sized,
{
    let eta = training.eta_l;
    let correction: Vec<f64> = c_t
        .as_slice()
        .iter()
        .zip(client.c.as_slice())
        .map(|(c, ci)| c - ci)
        .collect();

    let mut x = x_t.clone();
    let mut order = client.partition_indices.clone();
    let mut steps = 0usize;
    let mut last_grad: Option<ParamVector> = None;

    for _ in 0..training.epochs {
        order.shuffle(rng);
        for batch in order.chunks(training.batch_size) {
            let (_, grad) = objective.loss_and_grad(&x, batch)?;
            let xs = x.as_mut_slice();
            match training.mode {
                UpdateMode::Standard => {
                    for ((xi, g), corr) in xs.iter_mut().zip(grad.as_slice()).zip(&correction) {
                        *xi -= eta * (g + corr);
                    }
                }
                UpdateMode::PaperLiteral => {
                    for ((xi, g), corr) in xs.iter_mut().zip(grad.as_slice()).zip(&correction) {
                        *xi = *xi - eta * g + corr;
                    }
                }
            }
            steps += 1;
            last_grad = Some(grad);
        }
    }
    if !x.is_finite() {
        return Err(Error::NonFinite);
    }

    let c_new = match training.mode {
        UpdateMode::Standard => {
            let scale = 1.0 / (steps as f64 * eta);
            client
                .c
                .as_slice()
                .iter()
                .zip(c_t.as_slice())
                .zip(x_t.as_slice().iter().zip(x.as_slice()))
                .map(|((ci, c), (x0, x1))| ci - c + (x0 - x1) * scale)
                .collect::<Vec<_>>()
        }
        UpdateMode::PaperLiteral => {
            let g = last_grad.ok_or(Error::ConfigInvalid("client has no samples".into()))?;
            client
                .c
                .as_slice()
                .iter()
                .zip(&correction)
                .zip(g.as_slice())
                .map(|((ci, corr), g)| ci + corr - eta * g)
                .collect::<Vec<_>>()
        }
    };
    let c_new = ParamVector::new(c_new);
    if !c_new.is_finite() {
        return Err(Error::NonFinite);
    }
    Ok((x, c_new))
}

/// Normalized `n_i / n` weights over delivered updates, in update order.
pub fn delivered_weights(updates: &[ClientUpdate]) -> Vec<(usize, f64)> {
    let total: usize = updates
        .iter()
        .filter(|u| u.delivered)
        .map(|u| u.n_samples)
        .sum();
    updates
        .iter()
        .enumerate()
        .filter(|(_, u)| u.delivered)
        .map(|(i, u)| (i, u.n_samples as f64 / total as f64))
        .collect()
}

/// New global model from the delivered client models.
pub fn server_aggregate(server: &ServerState, updates: &[ClientUpdate]) -> Result<ParamVector> {
    let weights = delivered_weights(updates);
    if weights.is_empty() {
        return Err(Error::NoDeliveredUpdates);
    }
    let mut displacement = vec![0.0; server.x.len()];
    for &(i, w) in &weights {
        let u = &updates[i];
        server.x.check_dim(&u.x_new)?;
        for ((d, xn), x) in displacement
            .iter_mut()
            .zip(u.x_new.as_slice())
            .zip(server.x.as_slice())
        {
            *d += w * (xn - x);
        }
    }
    let sign = match server.mode {
        UpdateMode::Standard => 1.0,
        UpdateMode::PaperLiteral => -1.0,
    };
    let out: Vec<f64> = server
        .x
        .as_slice()
        .iter()
        .zip(&displacement)
        .map(|(x, d)| x + sign * server.eta_g * d)
        .collect();
    let out = ParamVector::new(out);
    if !out.is_finite() {
        return Err(Error::NonFinite);
    }
    Ok(out)
}

/// `c + (1/K) Σ (c_i' - c)` over the K delivered updates.
pub fn update_global_control(c_t: &ParamVector, updates: &[ClientUpdate]) -> Result<ParamVector> {
    let delivered: Vec<&ClientUpdate> = updates.iter().filter(|u| u.delivered).collect();
    if delivered.is_empty() {
        return Err(Error::NoDeliveredUpdates);
    }
    let k = delivered.len() as f64;
    let mut acc = vec![0.0; c_t.len()];
    for u in &delivered {
        c_t.check_dim(&u.c_new)?;
        for ((a, cn), c) in acc.iter_mut().zip(u.c_new.as_slice()).zip(c_t.as_slice()) {
            *a += cn - c;
        }
    }
    Ok(ParamVector::new(
        c_t.as_slice()
            .iter()
            .zip(&acc)
            .map(|(c, a)| c + a / k)
            .collect(),
    ))
}

/// Broadcast state at the start of a round.
#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub x: ParamVector,
    pub c: ParamVector,
}

/// Broadcast snapshots indexed by round, used to serve stale views to
/// delayed clients.
#[derive(Debug, Clone, Default)]
pub struct History {
    snapshots: Vec<Snapshot>,
}

impl History {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&mut self, server: &ServerState) {
        let snap = Snapshot {
            x: server.x.clone(),
            c: server.c.clone(),
        };
        let t = server.round;
        if t < self.snapshots.len() {
            self.snapshots[t] = snap;
            self.snapshots.truncate(t + 1);
        } else {
            self.snapshots.resize(t + 1, snap);
        }
    }

    pub fn snapshots(&self) -> &[Snapshot] {
        &self.snapshots
    }
}

#[derive(Debug, Clone)]
pub struct RoundReport {
    pub round: usize,
    pub updates: Vec<ClientUpdate>,
    pub delivered: usize,
    /// True when nothing was delivered and the global state was left as is.
    pub skipped: bool,
}

/// One communication round: broadcast, local training, aggregation.
///
/// Clients train in parallel; each client's shuffle stream depends only on
/// `(seed, round, client id)`, so the result does not depend on scheduling.
#[allow(clippy::too_many_arguments)]
pub fn run_round<O: Objective>(
    server: &mut ServerState,
    clients: &mut [ClientState],
    objective: &O,
    batch_size: usize,
    adversity: &AdversityConfig,
    history: &mut History,
    seed: u64,
) -> Result<RoundReport> {
    for client in clients.iter() {
        server.x.check_dim(&client.c)?;
    }
    let t = server.round;
    history.record(server);
    let snapshots = history.snapshots();

    let updates: Vec<ClientUpdate> = clients
        .par_iter()
        .map(|client| {
            let view = adversity::broadcast_view(snapshots, client, adversity, t);
            let training = LocalTraining {
                epochs: adversity::effective_epochs(
                    client,
                    adversity,
                    t,
                    server.local_epochs,
                    seed,
                ),
                eta_l: server.eta_l,
                batch_size,
                mode: server.mode,
            };
            let mut rng = stream_rng(seed, Stream::Shuffle, &[t as u64, client.id as u64]);
            let mut update =
                client_local_update(client, &view.x, &view.c, objective, &training, &mut rng)?;
            if update.delivered && adversity::update_dropped(client, adversity, t, seed) {
                update.delivered = false;
            }
            Ok(update)
        })
        .collect::<Result<_>>()?;

    for (client, update) in clients.iter_mut().zip(&updates) {
        if update.delivered {
            client.x = update.x_new.clone();
            client.c = update.c_new.clone();
        }
    }

    let delivered = updates.iter().filter(|u| u.delivered).count();
    let skipped = delivered == 0;
    if skipped {
        log::warn!("round {t}: no client update delivered, global state unchanged");
    } else {
        let x = server_aggregate(server, &updates)?;
        let c = update_global_control(&server.c, &updates)?;
        server.x = x;
        server.c = c;
    }
    server.round += 1;
    Ok(RoundReport {
        round: t,
        updates,
        delivered,
        skipped,
    })
}
