//! Step 2: clustering clients by how they move the global model.
//!
//! Every training client fine-tunes `w_T` once; the deltas are compared
//! pairwise, merged bottom-up into a dendrogram and cut into flat clusters.
//! Each cluster then continues FedAvg from `w_T` with only its members.

mod linkage;

use std::collections::{BTreeMap, BTreeSet};

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use self::linkage::{agglomerate, CutCriterion, Dendrogram, Linkage, Merge, Partition};
use crate::dataset::ClientDataset;
use crate::error::{Error, Result};
use crate::federation::{local_train, run_fedavg, FedAvgConfig, LocalTrainConfig, RoundReport};
use crate::ledger::AccessLedger;
use crate::nn::{CnnSpec, FlatWeights};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    /// `1 - cos(a, b)`.
    #[default]
    Cosine,
    Euclidean,
}

/// Which parameters enter the vectors being compared.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeltaSelection {
    #[default]
    All,
    /// Only the output layer (`fc2` weight and bias).
    FinalLayer,
}

impl DeltaSelection {
    pub fn extract(self, weights: &FlatWeights) -> Result<Vec<f64>> {
        match self {
            Self::All => Ok(weights.values().to_vec()),
            Self::FinalLayer => weights.select(&["fc2.weight", "fc2.bias"]),
        }
    }
}

/// Per-client deltas relative to the same global model, ordered by client id.
#[derive(Debug, Clone, PartialEq)]
pub struct DeltaMatrix {
    rows: Vec<(String, FlatWeights)>,
}

impl DeltaMatrix {
    pub fn new(mut rows: Vec<(String, FlatWeights)>) -> Result<Self> {
        rows.sort_by(|a, b| a.0.cmp(&b.0));
        if let Some((_, first)) = rows.first() {
            for (_, d) in &rows[1..] {
                first.check_layout(d)?;
            }
        }
        Ok(Self { rows })
    }

    pub fn rows(&self) -> &[(String, FlatWeights)] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn client_ids(&self) -> Vec<String> {
        self.rows.iter().map(|(id, _)| id.clone()).collect()
    }
}

/// Trains every client once from `global` and collects the deltas.
pub fn compute_deltas(
    spec: &CnnSpec,
    global: &FlatWeights,
    clients: &[ClientDataset],
    local: &LocalTrainConfig,
    ledger: &AccessLedger,
) -> Result<DeltaMatrix> {
    if clients.is_empty() {
        return Err(Error::NoClients);
    }
    let rows = clients
        .par_iter()
        .map(|c| {
            let update = local_train(global, spec, c, local, ledger)?;
            Ok((update.client_id, update.delta))
        })
        .collect::<Result<Vec<_>>>()?;
    DeltaMatrix::new(rows)
}

/// Cosine similarity, `None` if either vector has zero norm.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Option<f64> {
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return None;
    }
    Some((dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0))
}

/// Symmetric `n × n` distance matrix with named rows.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMatrix {
    labels: Vec<String>,
    values: Vec<f64>,
}

impl DistanceMatrix {
    pub fn new(labels: Vec<String>, values: Vec<f64>) -> Result<Self> {
        let n = labels.len();
        if values.len() != n * n {
            return Err(Error::Length {
                expected: n * n,
                actual: values.len(),
            });
        }
        for i in 0..n {
            if values[i * n + i] != 0.0 {
                return Err(Error::Config(format!(
                    "distance of {} to itself is not 0",
                    labels[i]
                )));
            }
            for j in 0..i {
                if values[i * n + j] != values[j * n + i] {
                    return Err(Error::Config("distance matrix is not symmetric".into()));
                }
            }
        }
        Ok(Self { labels, values })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.labels.len() + j]
    }
}

/// Pairwise distances between deltas. Under the cosine metric a zero delta
/// is at distance 1 from everything else.
pub fn pairwise_distance(
    deltas: &DeltaMatrix,
    metric: Metric,
    selection: DeltaSelection,
) -> Result<DistanceMatrix> {
    let vectors = deltas
        .rows()
        .iter()
        .map(|(_, d)| selection.extract(d))
        .collect::<Result<Vec<_>>>()?;
    let n = vectors.len();
    let mut values = vec![0.0; n * n];
    let mut degenerate = BTreeSet::new();
    for i in 0..n {
        for j in i + 1..n {
            let d = match metric {
                Metric::Cosine => match cosine_similarity(&vectors[i], &vectors[j]) {
                    Some(sim) => 1.0 - sim,
                    None => {
                        for k in [i, j] {
                            if vectors[k].iter().all(|v| *v == 0.0) {
                                degenerate.insert(k);
                            }
                        }
                        1.0
                    }
                },
                Metric::Euclidean => vectors[i]
                    .iter()
                    .zip(&vectors[j])
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt(),
            };
            values[i * n + j] = d;
            values[j * n + i] = d;
        }
    }
    for k in degenerate {
        warn!(
            "delta of client {} has zero norm; treated as distance 1 to all others",
            deltas.rows()[k].0
        );
    }
    DistanceMatrix::new(deltas.client_ids(), values)
}

/// A cluster of training clients and its model.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterModel {
    pub cluster_id: usize,
    pub member_client_ids: BTreeSet<String>,
    pub weights: FlatWeights,
}

/// A trained cluster model with its per-round history.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainedCluster {
    pub model: ClusterModel,
    pub reports: Vec<RoundReport>,
}

/// Runs FedAvg from `global` separately inside every cluster of `partition`.
pub fn train_clusters(
    spec: &CnnSpec,
    partition: &Partition,
    global: &FlatWeights,
    clients: &[ClientDataset],
    config: &FedAvgConfig,
    ledger: &AccessLedger,
) -> Result<Vec<TrainedCluster>> {
    let by_id: BTreeMap<&str, &ClientDataset> =
        clients.iter().map(|c| (c.client_id(), c)).collect();
    if by_id.len() != partition.leaves().len()
        || partition
            .leaves()
            .iter()
            .any(|l| !by_id.contains_key(l.as_str()))
    {
        return Err(Error::Config(
            "partition members do not match the training clients".into(),
        ));
    }
    (0..partition.num_clusters())
        .into_par_iter()
        .map(|cluster_id| {
            let members: Vec<ClientDataset> = partition
                .members(cluster_id)
                .into_iter()
                .map(|id| by_id[id].clone())
                .collect();
            let (state, reports) = run_fedavg(spec, global.clone(), &members, config, ledger)?;
            Ok(TrainedCluster {
                model: ClusterModel {
                    cluster_id,
                    member_client_ids: members.iter().map(|c| c.client_id().to_owned()).collect(),
                    weights: state.weights,
                },
                reports,
            })
        })
        .collect()
}

/// Adjusted Rand Index between two labelings of the same items.
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> f64 {
    assert_eq!(a.len(), b.len(), "labelings must cover the same items");
    let pairs = |n: u64| n * n.saturating_sub(1) / 2;
    let mut table: BTreeMap<(usize, usize), u64> = BTreeMap::new();
    let mut rows: BTreeMap<usize, u64> = BTreeMap::new();
    let mut cols: BTreeMap<usize, u64> = BTreeMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *table.entry((x, y)).or_default() += 1;
        *rows.entry(x).or_default() += 1;
        *cols.entry(y).or_default() += 1;
    }
    let index: u64 = table.values().map(|&n| pairs(n)).sum();
    let sum_a: u64 = rows.values().map(|&n| pairs(n)).sum();
    let sum_b: u64 = cols.values().map(|&n| pairs(n)).sum();
    let total = pairs(a.len() as u64);
    if total == 0 {
        return 1.0;
    }
    let expected = sum_a as f64 * sum_b as f64 / total as f64;
    let max = 0.5 * (sum_a + sum_b) as f64;
    if max == expected {
        // both labelings are all-singletons or all-one-cluster
        return if sum_a == sum_b { 1.0 } else { 0.0 };
    }
    (index as f64 - expected) / (max - expected)
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::nn::Layout;

    fn deltas(vectors: &[&[f64]]) -> DeltaMatrix {
        let layout = Arc::new(Layout::packed([("v", vec![vectors[0].len()])]).unwrap());
        DeltaMatrix::new(
            vectors
                .iter()
                .enumerate()
                .map(|(i, v)| {
                    (
                        format!("c{i}"),
                        FlatWeights::new(layout.clone(), v.to_vec()).unwrap(),
                    )
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn cosine_distance_examples() {
        let d = pairwise_distance(
            &deltas(&[&[1.0, 0.0], &[1.0, 1.0], &[0.0, 3.0], &[2.0, 0.0]]),
            Metric::Cosine,
            DeltaSelection::All,
        )
        .unwrap();
        assert!((d.get(0, 1) - (1.0 - 1.0 / 2f64.sqrt())).abs() < 1e-15);
        assert!((d.get(0, 2) - 1.0).abs() < 1e-15);
        assert_eq!(d.get(0, 3), 0.0);
        assert_eq!(d.get(1, 1), 0.0);
        assert_eq!(d.get(1, 0), d.get(0, 1));
    }

    #[test]
    fn zero_delta_is_far_from_everything() {
        let d = pairwise_distance(
            &deltas(&[&[0.0, 0.0], &[1.0, 1.0], &[0.0, 0.0]]),
            Metric::Cosine,
            DeltaSelection::All,
        )
        .unwrap();
        assert_eq!(d.get(0, 1), 1.0);
        assert_eq!(d.get(0, 2), 1.0);
        assert_eq!(d.get(0, 0), 0.0);
    }

    #[test]
    fn euclidean_distance() {
        let d = pairwise_distance(
            &deltas(&[&[0.0, 0.0], &[3.0, 4.0]]),
            Metric::Euclidean,
            DeltaSelection::All,
        )
        .unwrap();
        assert_eq!(d.get(0, 1), 5.0);
    }

    #[test]
    fn distance_matrix_validation() {
        let labels = vec!["a".to_owned(), "b".to_owned()];
        assert!(DistanceMatrix::new(labels.clone(), vec![0.0, 1.0, 2.0, 0.0]).is_err());
        assert!(DistanceMatrix::new(labels.clone(), vec![1.0, 1.0, 1.0, 0.0]).is_err());
        assert!(DistanceMatrix::new(labels, vec![0.0; 3]).is_err());
    }

    #[test]
    fn three_direction_groups_are_recovered() {
        // three bundles of nearly parallel vectors
        let vectors: Vec<Vec<f64>> = (0..12)
            .map(|i| {
                let g = i % 3;
                let mut v = vec![0.05 * (i as f64).sin(); 3];
                v[g] += 1.0 + 0.01 * i as f64;
                v
            })
            .collect();
        let refs: Vec<&[f64]> = vectors.iter().map(Vec::as_slice).collect();
        let m = deltas(&refs);
        let d = pairwise_distance(&m, Metric::Cosine, DeltaSelection::All).unwrap();
        let part = agglomerate(&d, Linkage::Average)
            .unwrap()
            .cut(CutCriterion::LargestGap)
            .unwrap();
        // leaves are sorted by id: c0, c1, c10, c11, c2, ...
        let truth: Vec<usize> = m
            .client_ids()
            .iter()
            .map(|id| id[1..].parse::<usize>().unwrap() % 3)
            .collect();
        assert_eq!(adjusted_rand_index(part.assignment(), &truth), 1.0);
    }

    #[test]
    fn ari_reference_values() {
        assert_eq!(adjusted_rand_index(&[0, 0, 1, 1], &[1, 1, 0, 0]), 1.0);
        assert_eq!(adjusted_rand_index(&[0, 0, 0], &[0, 0, 0]), 1.0);
        assert_eq!(adjusted_rand_index(&[0, 1, 2], &[0, 0, 0]), 0.0);
        // index 1, expected 1/3, max 3/2  ->  4/7
        assert!((adjusted_rand_index(&[0, 0, 1, 1], &[0, 0, 1, 2]) - 4.0 / 7.0).abs() < 1e-12);
        // index 2, expected 36/15, max 6  ->  (2 - 2.4) / (6 - 2.4) = -1/9
        assert!(
            (adjusted_rand_index(&[0, 0, 0, 1, 1, 1], &[0, 1, 0, 1, 0, 1]) + 1.0 / 9.0).abs()
                < 1e-12
        );
    }
}
