//! Registration and evaluation of new clients.
//!
//! A client that took no part in training fine-tunes the global model `w_T`
//! for `P` rounds, sends the resulting delta to the server and is handed the
//! cluster model whose update direction is most cosine-similar. Its data is
//! then scored with that model only.

mod metrics;

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use self::metrics::mean_defined;
pub use self::metrics::ConfusionMatrix;
use crate::cluster::{cosine_similarity, ClusterModel};
use crate::dataset::{to_batch, ClientDataset};
use crate::error::{Error, Result};
use crate::federation::{train_copy, LocalTrainConfig};
use crate::ledger::{AccessLedger, Phase};
use crate::nn::{self, init_weights, CnnSpec, FlatWeights};

/// What a test delta is compared against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AssignmentMode {
    /// Cluster weights minus `w_T`, so both sides are displacements from
    /// the same origin.
    #[default]
    Direction,
    /// The absolute cluster weights.
    Literal,
}

/// Where a registering client's training starts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegistrationStart {
    /// The global model `w_T`.
    #[default]
    Global,
    /// A freshly initialized model.
    Fresh,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PersonalizationConfig {
    /// Local rounds `P` a new client trains before registering.
    pub rounds: usize,
    pub local: LocalTrainConfig,
    pub assignment: AssignmentMode,
    pub start: RegistrationStart,
    /// Initialization seed for [`RegistrationStart::Fresh`].
    pub fresh_seed: u64,
}

impl Default for PersonalizationConfig {
    fn default() -> Self {
        let local = LocalTrainConfig::default();
        Self {
            rounds: local.epochs * 5,
            local,
            assignment: AssignmentMode::Direction,
            start: RegistrationStart::Global,
            fresh_seed: 0,
        }
    }
}

/// A new client's locally trained weights `w_P` and `w_P - w_T`.
#[derive(Debug, Clone, PartialEq)]
pub struct TestRegistration {
    pub client_id: String,
    pub trained: FlatWeights,
    pub delta: FlatWeights,
}

/// Trains `P` rounds on the client alone, starting from `w_T` (or a fresh
/// model), and measures the delta against `w_T`.
pub fn register_client(
    spec: &CnnSpec,
    client: &ClientDataset,
    global: &FlatWeights,
    config: &PersonalizationConfig,
    ledger: &AccessLedger,
) -> Result<TestRegistration> {
    if client.is_empty() {
        return Err(Error::EmptyDataset(client.client_id().to_owned()));
    }
    let mut weights = match config.start {
        RegistrationStart::Global => global.clone(),
        RegistrationStart::Fresh => init_weights(spec, config.fresh_seed)?,
    };
    for round in 0..config.rounds {
        weights = train_copy(
            &weights,
            spec,
            client,
            &config.local.reseeded(round as u64),
            ledger,
        )?;
    }
    let delta = weights.sub(global)?;
    Ok(TestRegistration {
        client_id: client.client_id().to_owned(),
        trained: weights,
        delta,
    })
}

/// Outcome of matching a delta against the cluster models.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Assignment {
    pub cluster_id: usize,
    /// Cosine similarity to every cluster, in the order given; `None` where
    /// a vector has zero norm.
    pub similarities: Vec<Option<f64>>,
}

impl Assignment {
    pub fn similarity(&self, clusters: &[ClusterModel]) -> Option<f64> {
        clusters
            .iter()
            .position(|c| c.cluster_id == self.cluster_id)
            .and_then(|i| self.similarities[i])
    }
}

/// Cluster maximizing cosine similarity with `delta`; ties go to the lowest
/// cluster id. If no similarity is defined the lowest cluster id is used.
pub fn find_nearest_cluster(
    delta: &FlatWeights,
    clusters: &[ClusterModel],
    global: &FlatWeights,
    mode: AssignmentMode,
) -> Result<Assignment> {
    if clusters.is_empty() {
        return Err(Error::NoClusters);
    }
    let similarities = clusters
        .iter()
        .map(|c| {
            let target = match mode {
                AssignmentMode::Direction => c.weights.sub(global)?,
                AssignmentMode::Literal => c.weights.clone(),
            };
            delta.check_layout(&target)?;
            Ok(cosine_similarity(delta.values(), target.values()))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut best: Option<(f64, usize)> = None;
    for (c, sim) in clusters.iter().zip(&similarities) {
        let Some(sim) = *sim else { continue };
        let better = match best {
            None => true,
            Some((s, id)) => sim > s || (sim == s && c.cluster_id < id),
        };
        if better {
            best = Some((sim, c.cluster_id));
        }
    }
    let cluster_id = match best {
        Some((_, id)) => id,
        None => {
            warn!("all cluster similarities undefined; falling back to the lowest cluster id");
            clusters
                .iter()
                .map(|c| c.cluster_id)
                .min()
                .expect("non-empty")
        }
    };
    Ok(Assignment {
        cluster_id,
        similarities,
    })
}

/// Confusion counts of `weights` on one client's data. Never modifies the
/// model.
pub fn evaluate(
    weights: &FlatWeights,
    spec: &CnnSpec,
    client: &ClientDataset,
    ledger: &AccessLedger,
) -> Result<ConfusionMatrix> {
    let (batch, labels) = to_batch(client.samples(ledger))?;
    let predictions = nn::predict(weights, spec, &batch)?;
    let mut confusion = ConfusionMatrix::new(spec.num_classes);
    for (truth, predicted) in labels.into_iter().zip(predictions) {
        confusion.add(truth, predicted);
    }
    Ok(confusion)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClientResult {
    pub client_id: String,
    /// Cluster whose model scored this client; `None` for a single global
    /// model.
    pub cluster_id: Option<usize>,
    pub similarity: Option<f64>,
    pub samples: u64,
    pub correct: u64,
    pub accuracy: f64,
}

/// Test metrics of a set of clients.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub class_names: Vec<String>,
    pub clients: Vec<ClientResult>,
    /// Mean of the per-client accuracies.
    pub final_accuracy: f64,
    /// Accuracy over all test samples pooled.
    pub pooled_accuracy: f64,
    pub confusion: ConfusionMatrix,
    pub sensitivity: Vec<Option<f64>>,
    pub specificity: Vec<Option<f64>>,
    pub avg_sensitivity: Option<f64>,
    pub avg_specificity: Option<f64>,
}

impl EvalReport {
    /// Builds the report from per-client results and their confusion counts.
    pub fn from_clients(
        class_names: &[&str],
        results: Vec<(ClientResult, ConfusionMatrix)>,
    ) -> Result<Self> {
        if results.is_empty() {
            return Err(Error::EmptyQueue);
        }
        let mut pooled = ConfusionMatrix::new(class_names.len());
        for (_, m) in &results {
            pooled.merge(m);
        }
        let clients: Vec<ClientResult> = results.into_iter().map(|(r, _)| r).collect();
        let final_accuracy = clients.iter().map(|c| c.accuracy).sum::<f64>() / clients.len() as f64;
        let classes = 0..class_names.len();
        let sensitivity: Vec<_> = classes.clone().map(|c| pooled.sensitivity(c)).collect();
        let specificity: Vec<_> = classes.map(|c| pooled.specificity(c)).collect();
        Ok(Self {
            class_names: class_names.iter().map(|s| (*s).to_owned()).collect(),
            final_accuracy,
            pooled_accuracy: pooled.accuracy(),
            avg_sensitivity: mean_defined(&sensitivity),
            avg_specificity: mean_defined(&specificity),
            sensitivity,
            specificity,
            confusion: pooled,
            clients,
        })
    }
}

fn client_result(
    client: &ClientDataset,
    cluster_id: Option<usize>,
    similarity: Option<f64>,
    confusion: &ConfusionMatrix,
) -> ClientResult {
    ClientResult {
        client_id: client.client_id().to_owned(),
        cluster_id,
        similarity,
        samples: confusion.total(),
        correct: confusion.trace(),
        accuracy: confusion.accuracy(),
    }
}

/// Full personalized test run over a queue of held-out clients.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TestOutcome {
    pub report: EvalReport,
    pub assignments: Vec<(String, Assignment)>,
}

/// Registers every queued client, routes it to its nearest cluster model and
/// evaluates it there. Final accuracy is the mean of per-client accuracies.
pub fn test_all(
    spec: &CnnSpec,
    queue: &[ClientDataset],
    clusters: &[ClusterModel],
    global: &FlatWeights,
    config: &PersonalizationConfig,
    class_names: &[&str],
    ledger: &AccessLedger,
) -> Result<TestOutcome> {
    if queue.is_empty() {
        return Err(Error::EmptyQueue);
    }
    if clusters.is_empty() {
        return Err(Error::NoClusters);
    }
    ledger.enter(Phase::Registration);
    let assignments = queue
        .par_iter()
        .map(|client| {
            let reg = register_client(spec, client, global, config, ledger)?;
            find_nearest_cluster(&reg.delta, clusters, global, config.assignment)
        })
        .collect::<Result<Vec<_>>>()?;

    ledger.enter(Phase::Evaluation);
    let results = queue
        .par_iter()
        .zip(&assignments)
        .map(|(client, assignment)| {
            let model = clusters
                .iter()
                .find(|c| c.cluster_id == assignment.cluster_id)
                .expect("assigned cluster exists");
            let confusion = evaluate(&model.weights, spec, client, ledger)?;
            let sim = assignment.similarity(clusters);
            Ok((
                client_result(client, Some(model.cluster_id), sim, &confusion),
                confusion,
            ))
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(TestOutcome {
        report: EvalReport::from_clients(class_names, results)?,
        assignments: queue
            .iter()
            .map(|c| c.client_id().to_owned())
            .zip(assignments)
            .collect(),
    })
}

/// Scores one shared model on every queued client (the FedAvg baseline).
pub fn evaluate_global(
    spec: &CnnSpec,
    weights: &FlatWeights,
    queue: &[ClientDataset],
    class_names: &[&str],
    ledger: &AccessLedger,
) -> Result<EvalReport> {
    ledger.enter(Phase::Evaluation);
    let results = queue
        .par_iter()
        .map(|client| {
            let confusion = evaluate(weights, spec, client, ledger)?;
            Ok((client_result(client, None, None, &confusion), confusion))
        })
        .collect::<Result<Vec<_>>>()?;
    EvalReport::from_clients(class_names, results)
}
