//! Synthetic non-IID clients.
//!
//! Every client belongs to a latent group. A sample with HAM-D class `y` from
//! group `g` has features
//!
//! ```text
//! x = class_separation * mu[y] + feature_shift_scale * delta[g] + noise * eps
//! ```
//!
//! with `mu`, `delta` and `eps` standard normal. Labels are drawn from
//! `(1 - label_skew) * uniform + label_skew * onehot(g mod 3)`, so a skew of 0
//! gives every client the same label distribution and a skew of 1 gives each
//! client a single class. HAM-D scores are drawn uniformly inside the class's
//! three-class bin so the records go through the regular pipeline.

use std::io::Write;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{RawRecord, NUM_FEATURES};
use crate::error::{Error, Result};
use crate::seeds;

const HAMD_BINS: [(u32, u32); 3] = [(0, 7), (8, 16), (17, 50)];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub num_clients: usize,
    /// Inclusive range of visits per client.
    pub min_samples: usize,
    pub max_samples: usize,
    pub num_latent_groups: usize,
    pub label_skew: f64,
    pub feature_shift_scale: f64,
    pub class_separation: f64,
    pub noise: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_clients: 100,
            min_samples: 3,
            max_samples: 6,
            num_latent_groups: 3,
            label_skew: 0.9,
            feature_shift_scale: 0.5,
            class_separation: 0.25,
            noise: 1.0,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.num_clients == 0 {
            return fail("synthetic num_clients must be positive".into());
        }
        if self.num_latent_groups == 0 || self.num_latent_groups > self.num_clients {
            return fail(format!(
                "num_latent_groups {} must be in [1, num_clients = {}]",
                self.num_latent_groups, self.num_clients
            ));
        }
        if self.min_samples == 0 || self.min_samples > self.max_samples {
            return fail(format!(
                "samples per client range [{}, {}] is invalid",
                self.min_samples, self.max_samples
            ));
        }
        if !(0.0..=1.0).contains(&self.label_skew) {
            return fail(format!("label_skew {} outside [0, 1]", self.label_skew));
        }
        for (name, v) in [
            ("feature_shift_scale", self.feature_shift_scale),
            ("class_separation", self.class_separation),
            ("noise", self.noise),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return fail(format!("{name} must be finite and non-negative, got {v}"));
            }
        }
        Ok(())
    }

    pub fn subject_id(&self, client: usize) -> String {
        let width = (self.num_clients.saturating_sub(1))
            .to_string()
            .len()
            .max(3);
        format!("S{client:0width$}")
    }
}

/// Generated records plus the ground-truth group of every subject.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticData {
    pub records: Vec<RawRecord>,
    /// `(subject_id, group)` in subject order.
    pub groups: Vec<(String, usize)>,
}

fn normal_vec(rng: &mut impl Rng, scale: f64) -> Vec<f64> {
    (0..NUM_FEATURES)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            scale * z
        })
        .collect()
}

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticData> {
    spec.validate()?;
    let mut rng = seeds::rng(spec.seed);
    let classes = HAMD_BINS.len();
    let class_means: Vec<Vec<f64>> = (0..classes)
        .map(|_| normal_vec(&mut rng, spec.class_separation))
        .collect();
    let group_shifts: Vec<Vec<f64>> = (0..spec.num_latent_groups)
        .map(|_| normal_vec(&mut rng, spec.feature_shift_scale))
        .collect();

    let mut records = Vec::new();
    let mut groups = Vec::with_capacity(spec.num_clients);
    for client in 0..spec.num_clients {
        let group = client % spec.num_latent_groups;
        let subject_id = spec.subject_id(client);
        let favoured = group % classes;
        let n = rng.random_range(spec.min_samples..=spec.max_samples);
        for visit in 0..n {
            let label = if rng.random_bool(spec.label_skew) {
                favoured
            } else {
                rng.random_range(0..classes)
            };
            let features = (0..NUM_FEATURES)
                .map(|j| {
                    let eps: f64 = StandardNormal.sample(&mut rng);
                    class_means[label][j] + group_shifts[group][j] + spec.noise * eps
                })
                .collect();
            let (lo, hi) = HAMD_BINS[label];
            let hamd = rng.random_range(lo..=hi);
            records.push(RawRecord::new(
                subject_id.clone(),
                visit as u32,
                features,
                hamd,
            )?);
        }
        groups.push((subject_id, group));
    }
    Ok(SyntheticData { records, groups })
}

/// Ground-truth sidecar: `subject_id,group`.
pub fn write_groups_csv<W: Write>(groups: &[(String, usize)], mut out: W) -> std::io::Result<()> {
    writeln!(out, "subject_id,group")?;
    for (id, g) in groups {
        writeln!(out, "{id},{g}")?;
    }
    out.flush()
}

impl SyntheticData {
    pub fn write_groups_file(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        write_groups_csv(&self.groups, std::io::BufWriter::new(file))
            .map_err(|e| Error::io(path, e))
    }
}
