//! Seeded injection of the experiment conditions: packet loss (truncated
//! local training), stale broadcasts (delay) and label-flipping poisoning.
//!
//! Every draw is keyed by `(seed, stream, round, client id)` so the schedule
//! is fixed up front and independent of client execution order.

use std::fmt;
use std::str::FromStr;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{poison_labels, Dataset, PoisonMode};
use crate::error::{Error, Result};
use crate::rng::{stream_rng, Stream};
use crate::scaffold::{ClientState, Snapshot};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Condition {
    #[default]
    Normal,
    PacketLoss,
    Poisoning,
    Delay,
}

impl Condition {
    pub fn as_str(self) -> &'static str {
        match self {
            Condition::Normal => "normal",
            Condition::PacketLoss => "packet_loss",
            Condition::Poisoning => "poisoning",
            Condition::Delay => "delay",
        }
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Condition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "normal" => Ok(Condition::Normal),
            "packet_loss" => Ok(Condition::PacketLoss),
            "poisoning" => Ok(Condition::Poisoning),
            "delay" => Ok(Condition::Delay),
            other => Err(Error::ConfigInvalid(format!("unknown condition '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdversityConfig {
    pub condition: Condition,
    /// Fraction of clients exposed to the condition.
    pub affected_fraction: f64,
    /// Per-round probability that an affected client's training is cut to one epoch.
    pub loss_prob: f64,
    /// Fraction of an affected client's samples whose labels are corrupted.
    pub poison_fraction: f64,
    pub poison_mode: PoisonMode,
    pub delay_rounds: usize,
    /// Per-round probability that an affected client's update never arrives
    /// (packet loss only; off by default).
    pub drop_prob: f64,
    /// Overrides the run seed for adversity draws.
    pub seed: Option<u64>,
}

impl Default for AdversityConfig {
    fn default() -> Self {
        AdversityConfig {
            condition: Condition::Normal,
            affected_fraction: 0.3,
            loss_prob: 0.8,
            poison_fraction: 0.8,
            poison_mode: PoisonMode::FlipMap,
            delay_rounds: 2,
            drop_prob: 0.0,
            seed: None,
        }
    }
}

impl AdversityConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("affected_fraction", self.affected_fraction),
            ("loss_prob", self.loss_prob),
            ("poison_fraction", self.poison_fraction),
            ("drop_prob", self.drop_prob),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::ConfigInvalid(format!(
                    "{name} must be in [0, 1], got {v}"
                )));
            }
        }
        Ok(())
    }

    pub fn effective_seed(&self, run_seed: u64) -> u64 {
        self.seed.unwrap_or(run_seed)
    }
}

/// `floor(fraction * num_clients)` distinct client ids, sorted.
pub fn select_affected(num_clients: usize, fraction: f64, seed: u64) -> Vec<usize> {
    let count = ((fraction.clamp(0.0, 1.0) * num_clients as f64).floor() as usize).min(num_clients);
    let mut rng = stream_rng(seed, Stream::Adversity, &[]);
    let mut ids = index::sample(&mut rng, num_clients, count).into_vec();
    ids.sort_unstable();
    ids
}

/// Marks the affected clients' flags for the configured condition.
pub fn mark_affected(
    clients: &mut [ClientState],
    config: &AdversityConfig,
    seed: u64,
) -> Vec<usize> {
    if config.condition == Condition::Normal {
        return Vec::new();
    }
    let affected = select_affected(clients.len(), config.affected_fraction, seed);
    for &i in &affected {
        let flags = &mut clients[i].flags;
        match config.condition {
            Condition::PacketLoss => flags.loss_affected = true,
            Condition::Poisoning => flags.poisoned = true,
            Condition::Delay => flags.delay_rounds = config.delay_rounds,
            Condition::Normal => {}
        }
    }
    affected.iter().map(|&i| clients[i].id).collect()
}

/// Local epochs a client completes this round: 1 when its packet-loss draw
/// hits, otherwise `epochs`.
pub fn effective_epochs(
    client: &ClientState,
    config: &AdversityConfig,
    round: usize,
    epochs: usize,
    seed: u64,
) -> usize {
    if config.condition != Condition::PacketLoss || !client.flags.loss_affected {
        return epochs;
    }
    let mut rng = stream_rng(
        config.effective_seed(seed),
        Stream::PacketLoss,
        &[round as u64, client.id as u64],
    );
    if rng.gen_bool(config.loss_prob) {
        epochs.min(1)
    } else {
        epochs
    }
}

/// Whether an affected client's update is lost in transit this round.
pub fn update_dropped(
    client: &ClientState,
    config: &AdversityConfig,
    round: usize,
    seed: u64,
) -> bool {
    if config.condition != Condition::PacketLoss
        || !client.flags.loss_affected
        || config.drop_prob == 0.0
    {
        return false;
    }
    let mut rng = stream_rng(
        config.effective_seed(seed),
        Stream::Drop,
        &[round as u64, client.id as u64],
    );
    rng.gen_bool(config.drop_prob)
}

/// Broadcast a client sees at `round`: delayed clients get the snapshot from
/// `max(0, round - delay)`.
pub fn broadcast_view<'a>(
    history: &'a [Snapshot],
    client: &ClientState,
    config: &AdversityConfig,
    round: usize,
) -> &'a Snapshot {
    let current = round.min(history.len() - 1);
    if config.condition != Condition::Delay {
        return &history[current];
    }
    &history[current.saturating_sub(client.flags.delay_rounds)]
}

/// Corrupts a seeded `poison_fraction` of each poisoned client's labels.
pub fn apply_poisoning(
    clients: &[ClientState],
    dataset: &Dataset,
    config: &AdversityConfig,
    seed: u64,
) -> Result<Dataset> {
    if config.condition != Condition::Poisoning {
        return Ok(dataset.clone());
    }
    let seed = config.effective_seed(seed);
    let mut targets = Vec::new();
    for client in clients.iter().filter(|c| c.flags.poisoned) {
        let n = client.partition_indices.len();
        let count = ((config.poison_fraction * n as f64).floor() as usize).min(n);
        let mut rng = stream_rng(seed, Stream::Poison, &[client.id as u64]);
        for pos in index::sample(&mut rng, n, count) {
            targets.push(client.partition_indices[pos]);
        }
    }
    targets.sort_unstable();
    poison_labels(dataset, &targets, config.poison_mode, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_synthetic;
    use crate::numeric::ParamVector;

    fn clients(n: usize) -> Vec<ClientState> {
        (0..n).map(|i| ClientState::new(i, vec![i], 1)).collect()
    }

    fn snapshots(n: usize) -> Vec<Snapshot> {
        (0..n)
            .map(|t| Snapshot {
                x: ParamVector::new(vec![t as f64]),
                c: ParamVector::new(vec![-(t as f64)]),
            })
            .collect()
    }

    #[test]
    fn select_affected_counts() {
        assert!(select_affected(10, 0.0, 1).is_empty());
        assert_eq!(select_affected(10, 1.0, 1), (0..10).collect::<Vec<_>>());
        let three = select_affected(10, 0.3, 4);
        assert_eq!(three.len(), 3);
        assert!(three.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(three, select_affected(10, 0.3, 4));
    }

    #[test]
    fn epochs_under_packet_loss() {
        let mut cs = clients(2);
        cs[1].flags.loss_affected = true;
        let certain = AdversityConfig {
            condition: Condition::PacketLoss,
            loss_prob: 1.0,
            ..Default::default()
        };
        for round in 0..20 {
            assert_eq!(effective_epochs(&cs[0], &certain, round, 3, 0), 3);
            assert_eq!(effective_epochs(&cs[1], &certain, round, 3, 0), 1);
        }
        let normal = AdversityConfig::default();
        assert_eq!(effective_epochs(&cs[1], &normal, 0, 3, 0), 3);
    }

    #[test]
    fn truncation_frequency_matches_loss_prob() {
        let mut c = ClientState::new(7, vec![0], 1);
        c.flags.loss_affected = true;
        let cfg = AdversityConfig {
            condition: Condition::PacketLoss,
            loss_prob: 0.5,
            ..Default::default()
        };
        let hits = (0..1000)
            .filter(|&r| effective_epochs(&c, &cfg, r, 2, 11) == 1)
            .count();
        let freq = hits as f64 / 1000.0;
        assert!((freq - 0.5).abs() <= 0.05, "frequency {freq}");
    }

    #[test]
    fn delayed_views() {
        let h = snapshots(6);
        let mut c = ClientState::new(0, vec![0], 1);
        let cfg = AdversityConfig {
            condition: Condition::Delay,
            ..Default::default()
        };
        assert_eq!(broadcast_view(&h, &c, &cfg, 5).x.as_slice(), &[5.0]);
        c.flags.delay_rounds = 2;
        assert_eq!(broadcast_view(&h, &c, &cfg, 5).x.as_slice(), &[3.0]);
        c.flags.delay_rounds = 5;
        assert_eq!(broadcast_view(&h[..2], &c, &cfg, 1).x.as_slice(), &[0.0]);
        assert_eq!(
            broadcast_view(&h, &c, &AdversityConfig::default(), 5)
                .x
                .as_slice(),
            &[5.0]
        );
    }

    fn poisoning_setup() -> (Dataset, Vec<ClientState>) {
        let d = generate_synthetic(200, 3, 10, 1);
        let cs = (0..4)
            .map(|i| ClientState::new(i, (i * 50..(i + 1) * 50).collect(), 1))
            .collect();
        (d, cs)
    }

    #[test]
    fn poisoning_touches_only_affected_clients() {
        let (d, mut cs) = poisoning_setup();
        let cfg = AdversityConfig {
            condition: Condition::Poisoning,
            affected_fraction: 0.5,
            poison_fraction: 1.0,
            ..Default::default()
        };
        let affected = mark_affected(&mut cs, &cfg, 3);
        assert_eq!(affected.len(), 2);
        let p = apply_poisoning(&cs, &d, &cfg, 3).unwrap();
        for c in &cs {
            for &i in &c.partition_indices {
                if c.flags.poisoned {
                    assert_ne!(p.labels[i], d.labels[i]);
                } else {
                    assert_eq!(p.labels[i], d.labels[i]);
                }
            }
        }
        assert_eq!(p.inputs, d.inputs);
    }

    #[test]
    fn zero_poison_fraction_is_identity() {
        let (d, mut cs) = poisoning_setup();
        let cfg = AdversityConfig {
            condition: Condition::Poisoning,
            affected_fraction: 1.0,
            poison_fraction: 0.0,
            ..Default::default()
        };
        mark_affected(&mut cs, &cfg, 0);
        assert_eq!(apply_poisoning(&cs, &d, &cfg, 0).unwrap(), d);
    }

    #[test]
    fn normal_condition_marks_nothing() {
        let mut cs = clients(10);
        assert!(mark_affected(&mut cs, &AdversityConfig::default(), 0).is_empty());
        assert!(cs.iter().all(|c| c.flags == Default::default()));
    }

    #[test]
    fn rejects_out_of_range_knobs() {
        let cfg = AdversityConfig {
            loss_prob: 1.5,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }
}
