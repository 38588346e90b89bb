//! Records, preprocessing, client partitioning and splits.
//!
//! A raw record has 80 opaque feature values and a HAM-D score. Preprocessing
//! min-max scales the features with statistics fitted on the training split,
//! appends one zero dummy value and reshapes the 81 values row-major into a
//! 9×9 matrix. Records are grouped into one client per subject.

mod csv;
mod synthetic;

use std::collections::BTreeMap;

use log::warn;
use rand::seq::SliceRandom;

pub use self::csv::{load_csv, read_csv, write_csv, write_csv_file, CSV_HEADER_LEN};
pub use self::synthetic::{generate_synthetic, write_groups_csv, SyntheticData, SyntheticSpec};
use crate::error::{Error, Result};
use crate::ledger::{AccessLedger, SampleId};
use crate::nn::Tensor;
use crate::seeds;

pub const NUM_FEATURES: usize = 80;
pub const MATRIX_SIDE: usize = 9;
pub const MATRIX_CELLS: usize = MATRIX_SIDE * MATRIX_SIDE;
/// Index of the zero dummy cell (the appended 81st value).
pub const DUMMY_CELL: usize = MATRIX_CELLS - 1;
pub const HAMD_MAX: u32 = 50;

/// One subject visit as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct RawRecord {
    pub subject_id: String,
    pub visit: u32,
    pub features: Vec<f64>,
    pub hamd: u32,
}

impl RawRecord {
    pub fn new(
        subject_id: impl Into<String>,
        visit: u32,
        features: Vec<f64>,
        hamd: u32,
    ) -> Result<Self> {
        let record = Self {
            subject_id: subject_id.into(),
            visit,
            features,
            hamd,
        };
        record.validate()?;
        Ok(record)
    }

    pub fn validate(&self) -> Result<()> {
        if self.features.len() != NUM_FEATURES {
            return Err(Error::Record(format!(
                "subject {} visit {}: expected {NUM_FEATURES} features, got {}",
                self.subject_id,
                self.visit,
                self.features.len()
            )));
        }
        if let Some(i) = self.features.iter().position(|v| !v.is_finite()) {
            return Err(Error::Record(format!(
                "subject {} visit {}: feature {i} is not finite",
                self.subject_id, self.visit
            )));
        }
        if self.hamd > HAMD_MAX {
            return Err(Error::HamdOutOfRange(i64::from(self.hamd)));
        }
        Ok(())
    }
}

/// How HAM-D scores map onto class ids.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LabelScheme {
    /// Normal `[0, 7]`, Mild `[8, 16]`, Moderate-Severe `[17, 50]`.
    #[default]
    ThreeClass,
    /// Normal and Mild merged into one class: `[0, 16]` and `[17, 50]`.
    TwoClass,
}

impl LabelScheme {
    pub fn from_classes(classes: usize) -> Result<Self> {
        match classes {
            3 => Ok(Self::ThreeClass),
            2 => Ok(Self::TwoClass),
            n => Err(Error::Config(format!("classes must be 2 or 3, got {n}"))),
        }
    }

    pub fn num_classes(self) -> usize {
        match self {
            Self::ThreeClass => 3,
            Self::TwoClass => 2,
        }
    }

    pub fn class_names(self) -> &'static [&'static str] {
        match self {
            Self::ThreeClass => &["Normal", "Mild", "Moderate-Severe"],
            Self::TwoClass => &["Normal-Mild", "Moderate-Severe"],
        }
    }

    /// Inclusive upper HAM-D bound of every class but the last.
    fn upper_bounds(self) -> &'static [u32] {
        match self {
            Self::ThreeClass => &[7, 16],
            Self::TwoClass => &[16],
        }
    }
}

/// Class id of a HAM-D score under `scheme`.
pub fn bin_hamd(score: i64, scheme: LabelScheme) -> Result<usize> {
    let score = u32::try_from(score)
        .ok()
        .filter(|s| *s <= HAMD_MAX)
        .ok_or(Error::HamdOutOfRange(score))?;
    Ok(scheme
        .upper_bounds()
        .iter()
        .take_while(|&&bound| score > bound)
        .count())
}

/// Per-feature minimum and maximum of the training split.
#[derive(Debug, Clone, PartialEq)]
pub struct NormStats {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl NormStats {
    pub fn fit<'a>(records: impl IntoIterator<Item = &'a RawRecord>) -> Result<Self> {
        let mut min = vec![f64::INFINITY; NUM_FEATURES];
        let mut max = vec![f64::NEG_INFINITY; NUM_FEATURES];
        let mut seen = false;
        for record in records {
            record.validate()?;
            seen = true;
            for (j, &v) in record.features.iter().enumerate() {
                min[j] = min[j].min(v);
                max[j] = max[j].max(v);
            }
        }
        if !seen {
            return Err(Error::NoClients);
        }
        Ok(Self { min, max })
    }

    /// Statistics that leave values in `[0, 1]` unchanged.
    pub fn identity() -> Self {
        Self {
            min: vec![0.0; NUM_FEATURES],
            max: vec![1.0; NUM_FEATURES],
        }
    }

    /// Scales one feature into `[0, 1]`; constant features map to 0. Returns
    /// the value and whether it had to be clamped.
    pub fn scale(&self, feature: usize, value: f64) -> (f64, bool) {
        let (lo, hi) = (self.min[feature], self.max[feature]);
        if hi <= lo {
            return (0.0, false);
        }
        let scaled = (value - lo) / (hi - lo);
        if scaled < 0.0 {
            (0.0, true)
        } else if scaled > 1.0 {
            (1.0, true)
        } else {
            (scaled, false)
        }
    }
}

/// Appends the zero dummy value and lays the 81 values out row-major, so
/// cell `(row, col)` holds feature `9 * row + col`.
pub fn to_matrix(features: &[f64]) -> Result<[f64; MATRIX_CELLS]> {
    if features.len() != NUM_FEATURES {
        return Err(Error::Length {
            expected: NUM_FEATURES,
            actual: features.len(),
        });
    }
    let mut matrix = [0.0; MATRIX_CELLS];
    matrix[..NUM_FEATURES].copy_from_slice(features);
    Ok(matrix)
}

/// A preprocessed visit: a 9×9 matrix in `[0, 1]` and its class.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub visit: u32,
    pub matrix: [f64; MATRIX_CELLS],
    pub label: usize,
}

impl Sample {
    pub fn cell(&self, row: usize, col: usize) -> f64 {
        self.matrix[row * MATRIX_SIDE + col]
    }
}

/// Scales, pads and reshapes one record. The second value counts features
/// that fell outside the fitted range and were clamped.
pub fn preprocess(
    record: &RawRecord,
    stats: &NormStats,
    scheme: LabelScheme,
) -> Result<(Sample, usize)> {
    record.validate()?;
    let mut clamped = 0;
    let scaled: Vec<f64> = record
        .features
        .iter()
        .enumerate()
        .map(|(j, &v)| {
            let (s, c) = stats.scale(j, v);
            clamped += usize::from(c);
            s
        })
        .collect();
    let sample = Sample {
        visit: record.visit,
        matrix: to_matrix(&scaled)?,
        label: bin_hamd(i64::from(record.hamd), scheme)?,
    };
    Ok((sample, clamped))
}

/// One subject's raw records, sorted by visit.
#[derive(Debug, Clone, PartialEq)]
pub struct SubjectRecords {
    pub subject_id: String,
    pub records: Vec<RawRecord>,
}

/// Groups records into one entry per subject, ordered by subject id. The
/// result does not depend on the input order.
pub fn partition_by_subject(records: Vec<RawRecord>) -> Vec<SubjectRecords> {
    let mut by_subject: BTreeMap<String, Vec<RawRecord>> = BTreeMap::new();
    for record in records {
        by_subject
            .entry(record.subject_id.clone())
            .or_default()
            .push(record);
    }
    by_subject
        .into_iter()
        .map(|(subject_id, mut records)| {
            records.sort_by(|a, b| {
                a.visit
                    .cmp(&b.visit)
                    .then(a.hamd.cmp(&b.hamd))
                    .then_with(|| {
                        a.features
                            .iter()
                            .zip(&b.features)
                            .map(|(x, y)| x.total_cmp(y))
                            .find(|o| o.is_ne())
                            .unwrap_or(std::cmp::Ordering::Equal)
                    })
            });
            SubjectRecords {
                subject_id,
                records,
            }
        })
        .collect()
}

/// Splits whole clients into train and test sets. `round(fraction * n)`
/// clients go to training; both halves keep their input order.
pub fn split_train_test<T>(items: Vec<T>, fraction: f64, seed: u64) -> Result<(Vec<T>, Vec<T>)> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::Config(format!(
            "split fraction {fraction} outside [0, 1]"
        )));
    }
    let n = items.len();
    let n_train = (fraction * n as f64).round() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seeds::rng(seed));
    let mut is_train = vec![false; n];
    for &i in &order[..n_train] {
        is_train[i] = true;
    }
    let (mut train, mut test) = (Vec::with_capacity(n_train), Vec::with_capacity(n - n_train));
    for (item, train_side) in items.into_iter().zip(is_train) {
        if train_side {
            train.push(item);
        } else {
            test.push(item);
        }
    }
    Ok((train, test))
}

/// One client's private samples.
///
/// Sample contents are only reachable through [`ClientDataset::samples`],
/// which reports every read to an [`AccessLedger`].
#[derive(Debug, Clone, PartialEq)]
pub struct ClientDataset {
    client_id: String,
    samples: Vec<Sample>,
}

impl ClientDataset {
    pub fn new(client_id: impl Into<String>, samples: Vec<Sample>) -> Result<Self> {
        let client_id = client_id.into();
        if samples.is_empty() {
            return Err(Error::EmptyDataset(client_id));
        }
        Ok(Self { client_id, samples })
    }

    /// Preprocesses one subject's records. Returns the dataset and the number
    /// of clamped feature values.
    pub fn from_subject(
        subject: &SubjectRecords,
        stats: &NormStats,
        scheme: LabelScheme,
    ) -> Result<(Self, usize)> {
        let mut clamped = 0;
        let samples = subject
            .records
            .iter()
            .map(|r| {
                let (s, c) = preprocess(r, stats, scheme)?;
                clamped += c;
                Ok(s)
            })
            .collect::<Result<Vec<_>>>()?;
        if clamped > 0 {
            warn!(
                "client {}: {clamped} feature values outside the training range were clamped",
                subject.subject_id
            );
        }
        Ok((Self::new(subject.subject_id.clone(), samples)?, clamped))
    }

    pub fn client_id(&self) -> &str {
        &self.client_id
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn sample_ids(&self) -> Vec<SampleId> {
        self.samples
            .iter()
            .map(|s| SampleId {
                client_id: self.client_id.clone(),
                visit: s.visit,
            })
            .collect()
    }

    /// Reads the samples, recording the access in `ledger`.
    pub fn samples(&self, ledger: &AccessLedger) -> &[Sample] {
        ledger.record(&self.client_id, self.samples.iter().map(|s| &s.visit));
        &self.samples
    }

    /// Same client under a new id, e.g. to simulate a returning subject.
    pub fn with_id(&self, client_id: impl Into<String>) -> Self {
        Self {
            client_id: client_id.into(),
            samples: self.samples.clone(),
        }
    }
}

/// Stacks samples into a `[n, 1, 9, 9]` batch plus labels.
pub fn to_batch<'a>(samples: impl IntoIterator<Item = &'a Sample>) -> Result<(Tensor, Vec<usize>)> {
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for s in samples {
        data.extend_from_slice(&s.matrix);
        labels.push(s.label);
    }
    let n = labels.len();
    let batch = Tensor::new(vec![n, 1, MATRIX_SIDE, MATRIX_SIDE], data)?;
    Ok((batch, labels))
}
