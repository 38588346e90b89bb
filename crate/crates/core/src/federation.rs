//! Step-1 FedAvg simulation.
//!
//! Each round every client receives the global weights, trains a private
//! copy on its own data and returns the weight difference. The server
//! averages the differences and moves the global model by `server_lr` times
//! that average.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{to_batch, ClientDataset};
use crate::error::{Error, Result};
use crate::ledger::AccessLedger;
use crate::nn::{self, sgd_step, CnnSpec, FlatWeights, OptimizerState, SgdConfig};
use crate::personalization::ConfusionMatrix;
use crate::seeds;

/// How one client trains its local copy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LocalTrainConfig {
    pub epochs: usize,
    pub sgd: SgdConfig,
    /// `None` trains on the full local dataset in one batch per epoch.
    pub batch_size: Option<usize>,
    /// Seeds mini-batch shuffling; unused for full-batch training.
    pub shuffle_seed: u64,
}

impl Default for LocalTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 1,
            sgd: SgdConfig::default(),
            batch_size: None,
            shuffle_seed: 0,
        }
    }
}

impl LocalTrainConfig {
    /// Same settings with the shuffle stream advanced by `salt`.
    pub fn reseeded(&self, salt: u64) -> Self {
        Self {
            shuffle_seed: seeds::mix(self.shuffle_seed, salt),
            ..*self
        }
    }
}

/// How client deltas are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    /// `1/m * sum(delta_i)`.
    #[default]
    Unweighted,
    /// Weighted by local sample count.
    SampleWeighted,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FedAvgConfig {
    pub rounds: usize,
    pub local: LocalTrainConfig,
    pub server_lr: f64,
    pub aggregation: Aggregation,
}

impl Default for FedAvgConfig {
    fn default() -> Self {
        Self {
            rounds: 50,
            local: LocalTrainConfig::default(),
            server_lr: 1.0,
            aggregation: Aggregation::Unweighted,
        }
    }
}

/// Server-side model: the weights `w_t`, the round `t` and the server step.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalModelState {
    pub weights: FlatWeights,
    pub round: usize,
    pub server_lr: f64,
}

impl GlobalModelState {
    pub fn new(weights: FlatWeights, server_lr: f64) -> Result<Self> {
        if !(server_lr.is_finite() && server_lr >= 0.0) {
            return Err(Error::Config(format!(
                "server_lr must be non-negative, got {server_lr}"
            )));
        }
        Ok(Self {
            weights,
            round: 0,
            server_lr,
        })
    }
}

/// What a client sends back after local training.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientUpdate {
    pub client_id: String,
    /// Locally trained weights minus the weights the client started from.
    pub delta: FlatWeights,
    pub num_samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RoundReport {
    pub round: usize,
    /// Mean of the per-client training losses of the updated model.
    pub loss: f64,
    /// Accuracy of the updated model on all participating clients' samples.
    pub accuracy: f64,
    pub client_losses: Vec<(String, f64)>,
}

/// Trains a copy of `global` on one client and returns the weight delta.
///
/// A fresh optimizer is used for every call, so momentum never carries over
/// between rounds.
pub fn local_train(
    global: &FlatWeights,
    spec: &CnnSpec,
    client: &ClientDataset,
    config: &LocalTrainConfig,
    ledger: &AccessLedger,
) -> Result<ClientUpdate> {
    let trained = train_copy(global, spec, client, config, ledger)?;
    Ok(ClientUpdate {
        client_id: client.client_id().to_owned(),
        delta: trained.sub(global)?,
        num_samples: client.len(),
    })
}

/// Locally trained weights, without the subtraction.
pub(crate) fn train_copy(
    global: &FlatWeights,
    spec: &CnnSpec,
    client: &ClientDataset,
    config: &LocalTrainConfig,
    ledger: &AccessLedger,
) -> Result<FlatWeights> {
    if config.epochs == 0 {
        return Err(Error::Config("local epochs must be at least 1".into()));
    }
    if client.is_empty() {
        return Err(Error::EmptyDataset(client.client_id().to_owned()));
    }
    let samples = client.samples(ledger);
    let mut weights = global.clone();
    let mut opt = OptimizerState::new(config.sgd, &weights);
    let batch_size = config
        .batch_size
        .unwrap_or(samples.len())
        .clamp(1, samples.len());

    if batch_size == samples.len() {
        let (batch, labels) = to_batch(samples)?;
        for _ in 0..config.epochs {
            let (_, grad) = nn::loss_and_grad(&weights, spec, &batch, &labels)?;
            sgd_step(&mut weights, &grad, &mut opt)?;
        }
        return Ok(weights);
    }

    let stream = seeds::mix(
        config.shuffle_seed,
        seeds::fnv1a(client.client_id().as_bytes()),
    );
    let mut order: Vec<usize> = (0..samples.len()).collect();
    for epoch in 0..config.epochs {
        use rand::seq::SliceRandom;
        order.shuffle(&mut seeds::rng(seeds::mix(stream, epoch as u64)));
        for chunk in order.chunks(batch_size) {
            let (batch, labels) = to_batch(chunk.iter().map(|&i| &samples[i]))?;
            let (_, grad) = nn::loss_and_grad(&weights, spec, &batch, &labels)?;
            sgd_step(&mut weights, &grad, &mut opt)?;
        }
    }
    Ok(weights)
}

/// Averages client deltas. Updates are summed in ascending `client_id`
/// order so the result does not depend on arrival order.
pub fn aggregate(updates: &[ClientUpdate], mode: Aggregation) -> Result<FlatWeights> {
    let first = updates.first().ok_or(Error::NoUpdates)?;
    let mut ordered: Vec<&ClientUpdate> = updates.iter().collect();
    ordered.sort_by(|a, b| a.client_id.cmp(&b.client_id));

    let mut sum = first.delta.zeros_like();
    let total = match mode {
        Aggregation::Unweighted => {
            for u in &ordered {
                sum.add_scaled(&u.delta, 1.0)?;
            }
            updates.len() as f64
        }
        Aggregation::SampleWeighted => {
            for u in &ordered {
                sum.add_scaled(&u.delta, u.num_samples as f64)?;
            }
            updates.iter().map(|u| u.num_samples as f64).sum()
        }
    };
    sum.values_mut().iter_mut().for_each(|v| *v /= total);
    Ok(sum)
}

/// `w_{t+1} = w_t + server_lr * mean_delta`.
pub fn apply_update(
    global: &GlobalModelState,
    mean_delta: &FlatWeights,
) -> Result<GlobalModelState> {
    let mut weights = global.weights.clone();
    weights.add_scaled(mean_delta, global.server_lr)?;
    Ok(GlobalModelState {
        weights,
        round: global.round + 1,
        server_lr: global.server_lr,
    })
}

/// Loss and confusion counts of one model on one client.
pub(crate) fn score_client(
    weights: &FlatWeights,
    spec: &CnnSpec,
    client: &ClientDataset,
    ledger: &AccessLedger,
) -> Result<(f64, ConfusionMatrix)> {
    let (batch, labels) = to_batch(client.samples(ledger))?;
    let logits = nn::forward(weights, spec, &batch)?;
    let loss = nn::softmax_cross_entropy(&logits, &labels)?;
    let mut confusion = ConfusionMatrix::new(spec.num_classes);
    for (i, &label) in labels.iter().enumerate() {
        confusion.add(label, nn::argmax(logits.row(i)));
    }
    Ok((loss, confusion))
}

/// Runs `config.rounds` FedAvg rounds over `clients` starting from `init`.
/// Every client takes part in every round.
pub fn run_fedavg(
    spec: &CnnSpec,
    init: FlatWeights,
    clients: &[ClientDataset],
    config: &FedAvgConfig,
    ledger: &AccessLedger,
) -> Result<(GlobalModelState, Vec<RoundReport>)> {
    if clients.is_empty() {
        return Err(Error::NoClients);
    }
    let mut state = GlobalModelState::new(init, config.server_lr)?;
    let mut reports = Vec::with_capacity(config.rounds);
    for round in 0..config.rounds {
        let local = config.local.reseeded(round as u64);
        let updates = clients
            .par_iter()
            .map(|c| local_train(&state.weights, spec, c, &local, ledger))
            .collect::<Result<Vec<_>>>()?;
        let mean = aggregate(&updates, config.aggregation)?;
        state = apply_update(&state, &mean)?;
        reports.push(round_report(&state, spec, clients, ledger)?);
    }
    Ok((state, reports))
}

fn round_report(
    state: &GlobalModelState,
    spec: &CnnSpec,
    clients: &[ClientDataset],
    ledger: &AccessLedger,
) -> Result<RoundReport> {
    let scores = clients
        .par_iter()
        .map(|c| score_client(&state.weights, spec, c, ledger))
        .collect::<Result<Vec<_>>>()?;
    let mut pooled = ConfusionMatrix::new(spec.num_classes);
    let mut client_losses = Vec::with_capacity(clients.len());
    for (client, (loss, confusion)) in clients.iter().zip(scores) {
        pooled.merge(&confusion);
        client_losses.push((client.client_id().to_owned(), loss));
    }
    let loss = client_losses.iter().map(|(_, l)| l).sum::<f64>() / client_losses.len() as f64;
    Ok(RoundReport {
        round: state.round,
        loss,
        accuracy: pooled.accuracy(),
        client_losses,
    })
}
