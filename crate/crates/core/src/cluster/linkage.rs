use serde::{Deserialize, Serialize};

use super::DistanceMatrix;
use crate::error::{Error, Result};

/// Inter-cluster distance used when merging.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Linkage {
    /// Mean pairwise distance between members (UPGMA).
    #[default]
    Average,
    /// Closest pair of members.
    Single,
    /// Farthest pair of members.
    Complete,
}

impl Linkage {
    pub const ALL: [Linkage; 3] = [Linkage::Average, Linkage::Single, Linkage::Complete];

    /// Lance-Williams update: distance from `k` to the union of `i` (size
    /// `si`) and `j` (size `sj`).
    fn update(self, dik: f64, djk: f64, si: usize, sj: usize) -> f64 {
        match self {
            Linkage::Single => dik.min(djk),
            Linkage::Complete => dik.max(djk),
            Linkage::Average => (si as f64 * dik + sj as f64 * djk) / (si + sj) as f64,
        }
    }
}

/// One merge step. Leaves are nodes `0..n`; the node created by merge `s` is
/// `n + s`. `left < right` always holds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Merge {
    pub left: usize,
    pub right: usize,
    pub distance: f64,
    pub node: usize,
    pub size: usize,
}

/// Result of bottom-up clustering: `n - 1` merges over `n` named leaves.
#[derive(Debug, Clone, PartialEq)]
pub struct Dendrogram {
    leaves: Vec<String>,
    merges: Vec<Merge>,
}

/// Builds the dendrogram by repeatedly merging the closest pair of clusters.
///
/// Among pairs at exactly the same distance, the pair with the
/// lexicographically smallest `(smaller node id, larger node id)` is merged
/// first.
pub fn agglomerate(distances: &DistanceMatrix, linkage: Linkage) -> Result<Dendrogram> {
    let n = distances.len();
    if n == 0 {
        return Err(Error::NoClients);
    }
    if distances.values().iter().any(|d| !d.is_finite()) {
        return Err(Error::Config(
            "distance matrix contains non-finite values".into(),
        ));
    }
    let mut dist = distances.values().to_vec();
    let mut node: Vec<usize> = (0..n).collect();
    let mut size = vec![1usize; n];
    let mut alive = vec![true; n];
    let mut merges = Vec::with_capacity(n.saturating_sub(1));

    for step in 0..n.saturating_sub(1) {
        let mut best: Option<(f64, (usize, usize), usize, usize)> = None;
        for i in (0..n).filter(|&i| alive[i]) {
            for j in (i + 1..n).filter(|&j| alive[j]) {
                let d = dist[i * n + j];
                let ids = (node[i].min(node[j]), node[i].max(node[j]));
                let better = match best {
                    None => true,
                    Some((bd, bids, _, _)) => d < bd || (d == bd && ids < bids),
                };
                if better {
                    best = Some((d, ids, i, j));
                }
            }
        }
        let (d, (left, right), i, j) = best.expect("at least two live clusters");
        for k in (0..n).filter(|&k| alive[k] && k != i && k != j) {
            let updated = linkage.update(dist[i * n + k], dist[j * n + k], size[i], size[j]);
            dist[i * n + k] = updated;
            dist[k * n + i] = updated;
        }
        alive[j] = false;
        size[i] += size[j];
        node[i] = n + step;
        merges.push(Merge {
            left,
            right,
            distance: d,
            node: n + step,
            size: size[i],
        });
    }
    Ok(Dendrogram {
        leaves: distances.labels().to_vec(),
        merges,
    })
}

/// How to turn a dendrogram into flat clusters.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub enum CutCriterion {
    /// Exactly `k` clusters.
    Clusters(usize),
    /// Apply every merge at distance `<= tau`.
    Threshold(f64),
    /// Cut just below the merge that follows the largest jump in merge
    /// distance.
    #[default]
    LargestGap,
}

impl std::str::FromStr for CutCriterion {
    type Err = Error;

    /// Parses `gap`, `k=<n>` or `tau=<x>`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || {
            Error::Config(format!(
                "cut must be `gap`, `k=<n>` or `tau=<x>`, got `{s}`"
            ))
        };
        match s.trim() {
            "gap" => Ok(Self::LargestGap),
            other => match other.split_once('=') {
                Some(("k", k)) => Ok(Self::Clusters(k.trim().parse().map_err(|_| bad())?)),
                Some(("tau", t)) => {
                    let tau: f64 = t.trim().parse().map_err(|_| bad())?;
                    if tau.is_finite() {
                        Ok(Self::Threshold(tau))
                    } else {
                        Err(bad())
                    }
                }
                _ => Err(bad()),
            },
        }
    }
}

impl std::fmt::Display for CutCriterion {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::LargestGap => write!(f, "gap"),
            Self::Clusters(k) => write!(f, "k={k}"),
            Self::Threshold(t) => write!(f, "tau={t}"),
        }
    }
}

/// A flat clustering of named leaves. Clusters are numbered in order of
/// their first leaf.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Partition {
    leaves: Vec<String>,
    assignment: Vec<usize>,
}

impl Partition {
    /// Builds a partition from arbitrary labels, renumbering them by first
    /// appearance.
    pub fn from_labels(leaves: Vec<String>, labels: &[usize]) -> Result<Self> {
        if leaves.len() != labels.len() {
            return Err(Error::Length {
                expected: leaves.len(),
                actual: labels.len(),
            });
        }
        let mut map = std::collections::BTreeMap::new();
        let assignment = labels
            .iter()
            .map(|l| {
                let next = map.len();
                *map.entry(*l).or_insert(next)
            })
            .collect();
        Ok(Self { leaves, assignment })
    }

    pub fn leaves(&self) -> &[String] {
        &self.leaves
    }

    /// Cluster index of every leaf, in leaf order.
    pub fn assignment(&self) -> &[usize] {
        &self.assignment
    }

    pub fn num_clusters(&self) -> usize {
        self.assignment.iter().max().map_or(0, |m| m + 1)
    }

    pub fn members(&self, cluster: usize) -> Vec<&str> {
        self.leaves
            .iter()
            .zip(&self.assignment)
            .filter(|(_, c)| **c == cluster)
            .map(|(l, _)| l.as_str())
            .collect()
    }

    pub fn clusters(&self) -> Vec<Vec<&str>> {
        (0..self.num_clusters()).map(|c| self.members(c)).collect()
    }
}

impl Dendrogram {
    pub fn leaves(&self) -> &[String] {
        &self.leaves
    }

    pub fn merges(&self) -> &[Merge] {
        &self.merges
    }

    /// Number of leading merges each criterion applies.
    fn merges_to_apply(&self, criterion: CutCriterion) -> Result<usize> {
        let n = self.leaves.len();
        match criterion {
            CutCriterion::Clusters(k) => {
                if k == 0 || k > n {
                    return Err(Error::Config(format!(
                        "cannot cut {n} leaves into {k} clusters"
                    )));
                }
                Ok(n - k)
            }
            CutCriterion::Threshold(tau) => {
                Ok(self.merges.iter().take_while(|m| m.distance <= tau).count())
            }
            CutCriterion::LargestGap => {
                if self.merges.len() < 2 {
                    return Ok(self.merges.len());
                }
                // merges[..=i] are applied when cutting inside gap i; on ties
                // the later gap wins, giving fewer clusters.
                let mut best = (f64::NEG_INFINITY, 0);
                for (i, w) in self.merges.windows(2).enumerate() {
                    let gap = w[1].distance - w[0].distance;
                    if gap >= best.0 {
                        best = (gap, i);
                    }
                }
                Ok(best.1 + 1)
            }
        }
    }

    pub fn cut(&self, criterion: CutCriterion) -> Result<Partition> {
        let n = self.leaves.len();
        let applied = self.merges_to_apply(criterion)?;
        // parent pointers over all 2n - 1 nodes
        let mut parent: Vec<usize> = (0..2 * n - 1).collect();
        fn root(parent: &mut [usize], mut x: usize) -> usize {
            while parent[x] != x {
                parent[x] = parent[parent[x]];
                x = parent[x];
            }
            x
        }
        for m in &self.merges[..applied] {
            parent[m.left] = m.node;
            parent[m.right] = m.node;
        }
        let roots: Vec<usize> = (0..n).map(|leaf| root(&mut parent, leaf)).collect();
        Partition::from_labels(self.leaves.clone(), &roots)
    }
}
