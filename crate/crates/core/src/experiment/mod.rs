//! End-to-end runs: data preparation, the two-step training procedure, the
//! personalized test and the FedAvg comparison.

mod artifacts;
mod config;

use std::collections::BTreeMap;
use std::path::Path;

use log::info;
use serde::Serialize;

pub use self::artifacts::{
    load_models, write_comparison, write_eval_report, write_rounds, write_test_outcome,
    write_training, RoundRow,
};
pub use self::config::ExperimentConfig;

use crate::cluster::{
    adjusted_rand_index, agglomerate, compute_deltas, pairwise_distance, train_clusters,
    ClusterModel, Dendrogram, DistanceMatrix, Partition, TrainedCluster,
};
use crate::dataset::{
    generate_synthetic, load_csv, partition_by_subject, split_train_test, ClientDataset, NormStats,
    RawRecord,
};
use crate::error::{Error, Result};
use crate::federation::{run_fedavg, GlobalModelState, RoundReport};
use crate::ledger::{AccessLedger, Phase};
use crate::nn::{init_weights, FlatWeights};
use crate::personalization::{evaluate_global, test_all, EvalReport, TestOutcome};

/// Preprocessed train and test clients.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub train: Vec<ClientDataset>,
    pub test: Vec<ClientDataset>,
    /// Ground-truth group of each subject, when known.
    pub groups: Option<GroupMap>,
    /// Test feature values clamped into the training range.
    pub clamped: usize,
}

impl PreparedData {
    pub fn client_ids(&self) -> impl Iterator<Item = (&str, bool)> {
        self.train
            .iter()
            .map(|c| (c.client_id(), true))
            .chain(self.test.iter().map(|c| (c.client_id(), false)))
    }
}

fn read_groups(path: &Path) -> Result<BTreeMap<String, usize>> {
    let mut reader = csv::Reader::from_path(path)
        .map_err(|e| Error::Record(format!("{}: {e}", path.display())))?;
    let mut groups = BTreeMap::new();
    for (i, row) in reader.deserialize::<(String, usize)>().enumerate() {
        let (id, g) = row.map_err(|e| Error::Csv {
            row: i + 2,
            column: None,
            message: e.to_string(),
        })?;
        groups.insert(id, g);
    }
    Ok(groups)
}

/// Ground-truth group of each client, when known.
pub type GroupMap = BTreeMap<String, usize>;

/// Loads or generates the records of a run without preprocessing them.
pub fn load_records(config: &ExperimentConfig) -> Result<(Vec<RawRecord>, Option<GroupMap>)> {
    match &config.data {
        Some(path) => {
            let records = load_csv(path)?;
            let groups = config.groups.as_deref().map(read_groups).transpose()?;
            Ok((records, groups))
        }
        None => {
            let data = generate_synthetic(&config.synthetic_spec())?;
            Ok((data.records, Some(data.groups.into_iter().collect())))
        }
    }
}

/// Splits subjects into train and test clients and preprocesses both with
/// normalization statistics fitted on the training records only.
pub fn prepare_data(config: &ExperimentConfig) -> Result<PreparedData> {
    let (records, groups) = load_records(config)?;
    let subjects = partition_by_subject(records);
    if subjects.is_empty() {
        return Err(Error::EmptyDataset("input".into()));
    }
    let (train, test) = split_train_test(subjects, config.split_fraction, config.seeds().split)?;
    let stats = NormStats::fit(train.iter().flat_map(|s| &s.records))?;
    let scheme = config.label_scheme();
    let train = train
        .iter()
        .map(|s| ClientDataset::from_subject(s, &stats, scheme).map(|(c, _)| c))
        .collect::<Result<Vec<_>>>()?;
    let mut clamped = 0;
    let test = test
        .iter()
        .map(|s| {
            let (c, n) = ClientDataset::from_subject(s, &stats, scheme)?;
            clamped += n;
            Ok(c)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PreparedData {
        train,
        test,
        groups,
        clamped,
    })
}

/// Everything the two training steps produce.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub global: GlobalModelState,
    pub global_reports: Vec<RoundReport>,
    pub distances: DistanceMatrix,
    pub dendrogram: Dendrogram,
    pub partition: Partition,
    pub clusters: Vec<TrainedCluster>,
}

impl TrainOutcome {
    pub fn cluster_models(&self) -> Vec<ClusterModel> {
        self.clusters.iter().map(|c| c.model.clone()).collect()
    }
}

/// Step 1 (global FedAvg) followed by step 2 (delta clustering and
/// per-cluster FedAvg) on the training clients.
pub fn train(
    config: &ExperimentConfig,
    train: &[ClientDataset],
    ledger: &AccessLedger,
) -> Result<TrainOutcome> {
    let spec = config.cnn_spec();
    let init = init_weights(&spec, config.seeds().init)?;

    ledger.enter(Phase::FedAvg);
    info!(
        "global FedAvg: {} rounds over {} clients",
        config.rounds,
        train.len()
    );
    let (global, global_reports) = run_fedavg(&spec, init, train, &config.fedavg(), ledger)?;

    ledger.enter(Phase::Deltas);
    let deltas = compute_deltas(&spec, &global.weights, train, &config.local(), ledger)?;
    let distances = pairwise_distance(&deltas, config.metric, config.delta_layers)?;
    let dendrogram = agglomerate(&distances, config.linkage)?;
    let partition = dendrogram.cut(config.cut)?;
    info!(
        "cut `{}` produced {} clusters",
        config.cut,
        partition.num_clusters()
    );

    ledger.enter(Phase::ClusterTraining);
    let clusters = train_clusters(
        &spec,
        &partition,
        &global.weights,
        train,
        &config.cluster_fedavg(),
        ledger,
    )?;
    Ok(TrainOutcome {
        global,
        global_reports,
        distances,
        dendrogram,
        partition,
        clusters,
    })
}

/// Personalized test of every held-out client.
pub fn test(
    config: &ExperimentConfig,
    queue: &[ClientDataset],
    clusters: &[ClusterModel],
    global: &FlatWeights,
    ledger: &AccessLedger,
) -> Result<TestOutcome> {
    let spec = config.cnn_spec();
    test_all(
        &spec,
        queue,
        clusters,
        global,
        &config.personalization(),
        config.label_scheme().class_names(),
        ledger,
    )
}

/// Plain FedAvg given the same training budget as PFCM: `w_T` trained for
/// another `cluster_rounds` rounds over all training clients.
pub fn baseline(
    config: &ExperimentConfig,
    train: &[ClientDataset],
    global: &FlatWeights,
    ledger: &AccessLedger,
) -> Result<(FlatWeights, Vec<RoundReport>)> {
    ledger.enter(Phase::Baseline);
    let (state, reports) = run_fedavg(
        &config.cnn_spec(),
        global.clone(),
        train,
        &config.cluster_fedavg(),
        ledger,
    )?;
    Ok((state.weights, reports))
}

/// PFCM and FedAvg scored on the same test clients.
#[derive(Debug, Clone, Serialize)]
pub struct Comparison {
    pub pfcm: EvalReport,
    pub fedavg: EvalReport,
    pub num_clusters: usize,
    /// Agreement of the recovered clusters with the ground-truth groups.
    pub ari: Option<f64>,
    pub test_clients: Vec<String>,
}

impl Comparison {
    pub fn margin(&self) -> f64 {
        self.pfcm.final_accuracy - self.fedavg.final_accuracy
    }
}

/// Full run: training, personalized test and FedAvg baseline.
#[derive(Debug, Clone)]
pub struct CompareOutcome {
    pub train: TrainOutcome,
    pub test: TestOutcome,
    pub baseline_weights: FlatWeights,
    pub baseline_reports: Vec<RoundReport>,
    pub comparison: Comparison,
}

/// ARI between a partition and ground-truth groups, if every leaf has a group.
pub fn partition_ari(partition: &Partition, groups: &BTreeMap<String, usize>) -> Option<f64> {
    let truth = partition
        .leaves()
        .iter()
        .map(|id| groups.get(id).copied())
        .collect::<Option<Vec<_>>>()?;
    Some(adjusted_rand_index(partition.assignment(), &truth))
}

pub fn compare(
    config: &ExperimentConfig,
    data: &PreparedData,
    ledger: &AccessLedger,
) -> Result<CompareOutcome> {
    let trained = train(config, &data.train, ledger)?;
    let (baseline_weights, baseline_reports) =
        baseline(config, &data.train, &trained.global.weights, ledger)?;
    let outcome = test(
        config,
        &data.test,
        &trained.cluster_models(),
        &trained.global.weights,
        ledger,
    )?;
    let fedavg = evaluate_global(
        &config.cnn_spec(),
        &baseline_weights,
        &data.test,
        config.label_scheme().class_names(),
        ledger,
    )?;
    let comparison = Comparison {
        pfcm: outcome.report.clone(),
        fedavg,
        num_clusters: trained.partition.num_clusters(),
        ari: data
            .groups
            .as_ref()
            .and_then(|g| partition_ari(&trained.partition, g)),
        test_clients: data.test.iter().map(|c| c.client_id().to_owned()).collect(),
    };
    Ok(CompareOutcome {
        train: trained,
        test: outcome,
        baseline_weights,
        baseline_reports,
        comparison,
    })
}
