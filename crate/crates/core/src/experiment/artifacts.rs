use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{CompareOutcome, ExperimentConfig, PreparedData, TrainOutcome};
use crate::cluster::ClusterModel;
use crate::error::{Error, Result};
use crate::federation::RoundReport;
use crate::nn::{read_checkpoint_file, write_checkpoint_file, CnnSpec, FlatWeights, Layout};
use crate::personalization::{EvalReport, TestOutcome};

/// One row of the plot-ready round history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRow {
    pub round: usize,
    pub loss: f64,
    pub accuracy: f64,
    /// `global`, `cluster` or `baseline`.
    pub phase: String,
    pub cluster: Option<usize>,
}

impl RoundRow {
    fn from_reports(
        reports: &[RoundReport],
        offset: usize,
        phase: &str,
        cluster: Option<usize>,
    ) -> Vec<Self> {
        reports
            .iter()
            .map(|r| Self {
                round: offset + r.round,
                loss: r.loss,
                accuracy: r.accuracy,
                phase: phase.to_owned(),
                cluster,
            })
            .collect()
    }
}

#[derive(Serialize, Deserialize)]
struct AssignmentRow {
    client_id: String,
    cluster_id: usize,
}

#[derive(Serialize)]
struct SplitRow<'a> {
    client_id: &'a str,
    split: &'a str,
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(source) => Error::io(path, source),
        other => Error::Record(format!("{}: {other:?}", path.display())),
    }
}

fn write_rows<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    for row in rows {
        w.serialize(row).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Record(e.to_string()))?;
    text.push('\n');
    write_text(path, &text)
}

pub fn write_rounds(path: &Path, rows: &[RoundRow]) -> Result<()> {
    write_rows(path, rows)
}

fn cluster_path(dir: &Path, cluster_id: usize) -> PathBuf {
    dir.join(format!("cluster_{cluster_id}.ckpt"))
}

fn training_rounds(config: &ExperimentConfig, outcome: &TrainOutcome) -> Vec<RoundRow> {
    let mut rows = RoundRow::from_reports(&outcome.global_reports, 0, "global", None);
    for c in &outcome.clusters {
        rows.extend(RoundRow::from_reports(
            &c.reports,
            config.rounds,
            "cluster",
            Some(c.model.cluster_id),
        ));
    }
    rows
}

/// Writes the resolved config, split, round history, cluster assignment,
/// dendrogram and checkpoints of a training run.
pub fn write_training(
    dir: &Path,
    config: &ExperimentConfig,
    data: &PreparedData,
    outcome: &TrainOutcome,
) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_text(&dir.join("config.toml"), &config.resolved().to_toml())?;
    write_rows(
        &dir.join("split.csv"),
        data.client_ids().map(|(client_id, train)| SplitRow {
            client_id,
            split: if train { "train" } else { "test" },
        }),
    )?;
    write_rounds(&dir.join("rounds.csv"), &training_rounds(config, outcome))?;
    write_rows(
        &dir.join("assignments.csv"),
        outcome
            .partition
            .leaves()
            .iter()
            .zip(outcome.partition.assignment())
            .map(|(id, &k)| AssignmentRow {
                client_id: id.clone(),
                cluster_id: k,
            }),
    )?;
    write_rows(&dir.join("dendrogram.csv"), outcome.dendrogram.merges())?;
    write_checkpoint_file(&outcome.global.weights, &dir.join("global.ckpt"))?;
    for c in &outcome.clusters {
        write_checkpoint_file(&c.model.weights, &cluster_path(dir, c.model.cluster_id))?;
    }
    Ok(())
}

fn checked(weights: FlatWeights, spec: &CnnSpec, path: &Path) -> Result<FlatWeights> {
    let expected = Layout::for_spec(spec)?;
    if **weights.layout() != expected {
        return Err(Error::Checkpoint(format!(
            "{}: layout does not match the configured model",
            path.display()
        )));
    }
    Ok(weights)
}

/// Reads `w_T` and the cluster models written by [`write_training`].
pub fn load_models(dir: &Path, spec: &CnnSpec) -> Result<(FlatWeights, Vec<ClusterModel>)> {
    let global_path = dir.join("global.ckpt");
    let global = checked(read_checkpoint_file(&global_path)?, spec, &global_path)?;
    let path = dir.join("assignments.csv");
    let mut reader = csv::Reader::from_path(&path).map_err(|e| csv_err(&path, e))?;
    let mut members: BTreeMap<usize, BTreeSet<String>> = BTreeMap::new();
    for row in reader.deserialize::<AssignmentRow>() {
        let row = row.map_err(|e| csv_err(&path, e))?;
        members
            .entry(row.cluster_id)
            .or_default()
            .insert(row.client_id);
    }
    if members.is_empty() {
        return Err(Error::NoClusters);
    }
    let clusters = members
        .into_iter()
        .map(|(cluster_id, member_client_ids)| {
            let p = cluster_path(dir, cluster_id);
            Ok(ClusterModel {
                cluster_id,
                member_client_ids,
                weights: checked(read_checkpoint_file(&p)?, spec, &p)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((global, clusters))
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

fn pct(v: Option<f64>) -> String {
    v.map(|x| format!("{:.2}%", 100.0 * x))
        .unwrap_or_else(|| "n/a".into())
}

fn table_csv(report: &EvalReport) -> String {
    let mut out = String::from("metric");
    for name in &report.class_names {
        let _ = write!(out, ",{name}");
    }
    out.push_str(",average\n");
    for (metric, values, avg) in [
        ("sensitivity", &report.sensitivity, report.avg_sensitivity),
        ("specificity", &report.specificity, report.avg_specificity),
    ] {
        out.push_str(metric);
        for v in values {
            let _ = write!(out, ",{}", opt(*v));
        }
        let _ = writeln!(out, ",{}", opt(avg));
    }
    out
}

fn text_report(title: &str, report: &EvalReport) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{title}");
    let _ = writeln!(out, "test clients:     {}", report.clients.len());
    let _ = writeln!(
        out,
        "final accuracy:   {:.2}% (mean over clients)",
        100.0 * report.final_accuracy
    );
    let _ = writeln!(
        out,
        "pooled accuracy:  {:.2}%",
        100.0 * report.pooled_accuracy
    );
    let _ = writeln!(out, "\nconfusion matrix (rows: true, columns: predicted)");
    let width = report
        .class_names
        .iter()
        .map(|n| n.len())
        .max()
        .unwrap_or(0)
        .max(6);
    let _ = write!(out, "{:width$}", "");
    for name in &report.class_names {
        let _ = write!(out, " {name:>width$}");
    }
    out.push('\n');
    for (name, row) in report.class_names.iter().zip(report.confusion.rows()) {
        let _ = write!(out, "{name:width$}");
        for n in row {
            let _ = write!(out, " {n:>width$}");
        }
        out.push('\n');
    }
    let _ = writeln!(
        out,
        "\n{:width$} {:>12} {:>12}",
        "class", "sensitivity", "specificity"
    );
    for (i, name) in report.class_names.iter().enumerate() {
        let _ = writeln!(
            out,
            "{name:width$} {:>12} {:>12}",
            pct(report.sensitivity[i]),
            pct(report.specificity[i])
        );
    }
    let _ = writeln!(
        out,
        "{:width$} {:>12} {:>12}",
        "average",
        pct(report.avg_sensitivity),
        pct(report.avg_specificity)
    );
    out
}

/// Writes `<stem>.json`, `<stem>.csv` (per-class sensitivity and
/// specificity), `<stem>.txt` and `<stem>_clients.csv`.
pub fn write_eval_report(dir: &Path, stem: &str, title: &str, report: &EvalReport) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_json(&dir.join(format!("{stem}.json")), report)?;
    write_text(&dir.join(format!("{stem}.csv")), &table_csv(report))?;
    write_text(
        &dir.join(format!("{stem}.txt")),
        &text_report(title, report),
    )?;
    write_rows(&dir.join(format!("{stem}_clients.csv")), &report.clients)
}

#[derive(Serialize)]
struct TestAssignmentRow<'a> {
    client_id: &'a str,
    cluster_id: usize,
    similarity: Option<f64>,
}

/// Writes the PFCM report and the test clients' cluster assignments.
pub fn write_test_outcome(
    dir: &Path,
    config: &ExperimentConfig,
    outcome: &TestOutcome,
) -> Result<()> {
    write_eval_report(
        dir,
        "eval_report",
        "PFCM personalized test",
        &outcome.report,
    )?;
    write_text(&dir.join("config.toml"), &config.resolved().to_toml())?;
    write_rows(
        &dir.join("test_assignments.csv"),
        outcome.report.clients.iter().map(|c| TestAssignmentRow {
            client_id: &c.client_id,
            cluster_id: c.cluster_id.unwrap_or_default(),
            similarity: c.similarity,
        }),
    )
}

#[derive(Serialize)]
struct ComparisonRow<'a> {
    method: &'a str,
    final_accuracy: f64,
    pooled_accuracy: f64,
    avg_sensitivity: Option<f64>,
    avg_specificity: Option<f64>,
    test_clients: usize,
}

impl<'a> ComparisonRow<'a> {
    fn new(method: &'a str, r: &EvalReport) -> Self {
        Self {
            method,
            final_accuracy: r.final_accuracy,
            pooled_accuracy: r.pooled_accuracy,
            avg_sensitivity: r.avg_sensitivity,
            avg_specificity: r.avg_specificity,
            test_clients: r.clients.len(),
        }
    }
}

#[derive(Serialize)]
struct Summary<'a> {
    pfcm_accuracy: f64,
    fedavg_accuracy: f64,
    margin: f64,
    num_clusters: usize,
    ari: Option<f64>,
    train_clients: usize,
    test_clients: &'a [String],
    clamped_test_values: usize,
}

/// Writes everything [`write_training`] and [`write_test_outcome`] write,
/// plus the baseline report, `comparison.csv` and `summary.json`. The
/// round history gains the baseline rows.
pub fn write_comparison(
    dir: &Path,
    config: &ExperimentConfig,
    data: &PreparedData,
    outcome: &CompareOutcome,
) -> Result<()> {
    write_training(dir, config, data, &outcome.train)?;
    write_test_outcome(dir, config, &outcome.test)?;
    let mut rows = training_rounds(config, &outcome.train);
    rows.extend(RoundRow::from_reports(
        &outcome.baseline_reports,
        config.rounds,
        "baseline",
        None,
    ));
    write_rounds(&dir.join("rounds.csv"), &rows)?;
    write_checkpoint_file(&outcome.baseline_weights, &dir.join("fedavg.ckpt"))?;

    let cmp = &outcome.comparison;
    write_eval_report(dir, "fedavg_report", "FedAvg baseline", &cmp.fedavg)?;
    write_rows(
        &dir.join("comparison.csv"),
        [
            ComparisonRow::new("pfcm", &cmp.pfcm),
            ComparisonRow::new("fedavg", &cmp.fedavg),
        ],
    )?;
    write_json(
        &dir.join("summary.json"),
        &Summary {
            pfcm_accuracy: cmp.pfcm.final_accuracy,
            fedavg_accuracy: cmp.fedavg.final_accuracy,
            margin: cmp.margin(),
            num_clusters: cmp.num_clusters,
            ari: cmp.ari,
            train_clients: data.train.len(),
            test_clients: &cmp.test_clients,
            clamped_test_values: data.clamped,
        },
    )
}
