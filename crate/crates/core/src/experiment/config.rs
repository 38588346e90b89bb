use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::cluster::{CutCriterion, DeltaSelection, Linkage, Metric};
use crate::dataset::{LabelScheme, SyntheticSpec};
use crate::error::{Error, Result};
use crate::federation::{Aggregation, FedAvgConfig, LocalTrainConfig};
use crate::nn::{CnnSpec, SgdConfig};
use crate::personalization::{AssignmentMode, PersonalizationConfig, RegistrationStart};
use crate::seeds::{self, SeedTree};

/// Every setting of a run, as a flat TOML table.
///
/// Missing keys take the defaults below; unknown keys are rejected. A
/// resolved copy is written next to every run's outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    /// CSV input; synthetic data is generated when absent.
    pub data: Option<PathBuf>,
    /// Optional `subject_id,group` ground truth for CSV input.
    pub groups: Option<PathBuf>,
    pub out: PathBuf,
    pub classes: usize,
    pub split_fraction: f64,

    pub synth_clients: usize,
    pub synth_min_samples: usize,
    pub synth_max_samples: usize,
    pub synth_groups: usize,
    pub synth_label_skew: f64,
    pub synth_feature_shift: f64,
    pub synth_class_separation: f64,
    pub synth_noise: f64,

    pub conv1_channels: usize,
    pub conv2_channels: usize,
    pub kernel_side: usize,
    pub fc_hidden: usize,

    pub learning_rate: f64,
    pub momentum: f64,
    /// 0 means full-batch.
    pub batch_size: usize,

    pub rounds: usize,
    pub local_epochs: usize,
    pub server_lr: f64,
    pub aggregation: Aggregation,

    pub cluster_rounds: usize,
    pub metric: Metric,
    pub linkage: Linkage,
    #[serde(with = "cut_format")]
    pub cut: CutCriterion,
    pub delta_layers: DeltaSelection,

    /// Local rounds a new client trains before registering; defaults to
    /// `5 * local_epochs`.
    pub test_rounds: Option<usize>,
    pub assignment: AssignmentMode,
    pub registration_start: RegistrationStart,
}

mod cut_format {
    use serde::{Deserialize, Deserializer, Serializer};

    use crate::cluster::CutCriterion;

    pub fn serialize<S: Serializer>(cut: &CutCriterion, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(cut)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<CutCriterion, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let synth = SyntheticSpec::default();
        let cnn = CnnSpec::default();
        let sgd = SgdConfig::default();
        Self {
            seed: 0,
            data: None,
            groups: None,
            out: PathBuf::from("out"),
            classes: 3,
            split_fraction: 0.8,
            synth_clients: synth.num_clients,
            synth_min_samples: synth.min_samples,
            synth_max_samples: synth.max_samples,
            synth_groups: synth.num_latent_groups,
            synth_label_skew: synth.label_skew,
            synth_feature_shift: synth.feature_shift_scale,
            synth_class_separation: synth.class_separation,
            synth_noise: synth.noise,
            conv1_channels: cnn.conv1_channels,
            conv2_channels: cnn.conv2_channels,
            kernel_side: cnn.kernel_side,
            fc_hidden: cnn.fc_hidden,
            learning_rate: sgd.learning_rate,
            momentum: sgd.momentum,
            batch_size: 0,
            rounds: 50,
            local_epochs: 1,
            server_lr: 1.0,
            aggregation: Aggregation::Unweighted,
            cluster_rounds: 20,
            metric: Metric::Cosine,
            linkage: Linkage::Average,
            cut: CutCriterion::LargestGap,
            delta_layers: DeltaSelection::All,
            test_rounds: None,
            assignment: AssignmentMode::Direction,
            registration_start: RegistrationStart::Global,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let config: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Copy with every derived default filled in.
    pub fn resolved(&self) -> Self {
        Self {
            test_rounds: Some(self.test_rounds()),
            ..self.clone()
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("flat config always serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        LabelScheme::from_classes(self.classes)?;
        self.cnn_spec().validate()?;
        if !(0.0..=1.0).contains(&self.split_fraction) {
            return fail(format!(
                "split_fraction {} outside [0, 1]",
                self.split_fraction
            ));
        }
        if self.local_epochs == 0 {
            return fail("local_epochs must be at least 1".into());
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return fail(format!(
                "learning_rate must be non-negative, got {}",
                self.learning_rate
            ));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return fail(format!("momentum {} outside [0, 1)", self.momentum));
        }
        if !(self.server_lr.is_finite() && self.server_lr >= 0.0) {
            return fail(format!(
                "server_lr must be non-negative, got {}",
                self.server_lr
            ));
        }
        if let CutCriterion::Clusters(0) = self.cut {
            return fail("cut k must be at least 1".into());
        }
        if self.data.is_none() {
            self.synthetic_spec().validate()?;
        }
        Ok(())
    }

    pub fn seeds(&self) -> SeedTree {
        SeedTree::new(self.seed)
    }

    pub fn label_scheme(&self) -> LabelScheme {
        LabelScheme::from_classes(self.classes).unwrap_or_default()
    }

    pub fn cnn_spec(&self) -> CnnSpec {
        CnnSpec {
            conv1_channels: self.conv1_channels,
            conv2_channels: self.conv2_channels,
            kernel_side: self.kernel_side,
            fc_hidden: self.fc_hidden,
            num_classes: self.classes,
            ..CnnSpec::default()
        }
    }

    pub fn synthetic_spec(&self) -> SyntheticSpec {
        SyntheticSpec {
            num_clients: self.synth_clients,
            min_samples: self.synth_min_samples,
            max_samples: self.synth_max_samples,
            num_latent_groups: self.synth_groups,
            label_skew: self.synth_label_skew,
            feature_shift_scale: self.synth_feature_shift,
            class_separation: self.synth_class_separation,
            noise: self.synth_noise,
            seed: self.seeds().synth,
        }
    }

    pub fn local(&self) -> LocalTrainConfig {
        LocalTrainConfig {
            epochs: self.local_epochs,
            sgd: SgdConfig {
                learning_rate: self.learning_rate,
                momentum: self.momentum,
            },
            batch_size: (self.batch_size > 0).then_some(self.batch_size),
            shuffle_seed: self.seeds().shuffle,
        }
    }

    pub fn fedavg(&self) -> FedAvgConfig {
        FedAvgConfig {
            rounds: self.rounds,
            local: self.local(),
            server_lr: self.server_lr,
            aggregation: self.aggregation,
        }
    }

    /// FedAvg settings inside each cluster (and for the baseline
    /// continuation), on a separate shuffle stream.
    pub fn cluster_fedavg(&self) -> FedAvgConfig {
        FedAvgConfig {
            rounds: self.cluster_rounds,
            local: self.local().reseeded(seeds::fnv1a(b"cluster")),
            ..self.fedavg()
        }
    }

    pub fn test_rounds(&self) -> usize {
        self.test_rounds.unwrap_or(5 * self.local_epochs)
    }

    pub fn personalization(&self) -> PersonalizationConfig {
        PersonalizationConfig {
            rounds: self.test_rounds(),
            local: self.local().reseeded(seeds::fnv1a(b"registration")),
            assignment: self.assignment,
            start: self.registration_start,
            fresh_seed: seeds::derive(self.seeds().init, "registration"),
        }
    }
}
