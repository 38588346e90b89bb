use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architecture of the CNN.
///
/// `input_side × input_side` single-channel input, two `kernel_side` square
/// convolutions with stride 1 and "same" zero padding (spatial size is
/// preserved), then `fc_hidden` hidden units and `num_classes` logits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CnnSpec {
    pub input_side: usize,
    pub in_channels: usize,
    pub conv1_channels: usize,
    pub conv2_channels: usize,
    pub kernel_side: usize,
    pub fc_hidden: usize,
    pub num_classes: usize,
}

impl Default for CnnSpec {
    fn default() -> Self {
        Self {
            input_side: 9,
            in_channels: 1,
            conv1_channels: 10,
            conv2_channels: 20,
            kernel_side: 3,
            fc_hidden: 50,
            num_classes: 3,
        }
    }
}

/// Canonical layer names in flattening order.
pub(crate) const LAYER_NAMES: [&str; 8] = [
    "conv1.weight",
    "conv1.bias",
    "conv2.weight",
    "conv2.bias",
    "fc1.weight",
    "fc1.bias",
    "fc2.weight",
    "fc2.bias",
];

impl CnnSpec {
    pub fn with_classes(num_classes: usize) -> Self {
        Self {
            num_classes,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("input_side", self.input_side),
            ("in_channels", self.in_channels),
            ("conv1_channels", self.conv1_channels),
            ("conv2_channels", self.conv2_channels),
            ("kernel_side", self.kernel_side),
            ("fc_hidden", self.fc_hidden),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Spec(format!("{name} must be positive")));
        }
        if self.kernel_side.is_multiple_of(2) {
            return Err(Error::Spec(format!(
                "kernel_side {} must be odd for same padding",
                self.kernel_side
            )));
        }
        if !(2..=3).contains(&self.num_classes) {
            return Err(Error::Spec(format!(
                "num_classes must be 2 or 3, got {}",
                self.num_classes
            )));
        }
        Ok(())
    }

    pub fn padding(&self) -> usize {
        self.kernel_side / 2
    }

    /// Pixels per feature map (unchanged by the padded convolutions).
    pub fn spatial(&self) -> usize {
        self.input_side * self.input_side
    }

    pub fn kernel_area(&self) -> usize {
        self.kernel_side * self.kernel_side
    }

    /// Width of the flattened conv2 output feeding `fc1`.
    pub fn flat_features(&self) -> usize {
        self.conv2_channels * self.spatial()
    }

    pub fn input_shape(&self, batch: usize) -> Vec<usize> {
        vec![batch, self.in_channels, self.input_side, self.input_side]
    }

    /// Shapes of all parameter tensors in canonical order.
    pub fn layer_shapes(&self) -> [(&'static str, Vec<usize>); 8] {
        let k = self.kernel_side;
        [
            (
                LAYER_NAMES[0],
                vec![self.conv1_channels, self.in_channels, k, k],
            ),
            (LAYER_NAMES[1], vec![self.conv1_channels]),
            (
                LAYER_NAMES[2],
                vec![self.conv2_channels, self.conv1_channels, k, k],
            ),
            (LAYER_NAMES[3], vec![self.conv2_channels]),
            (LAYER_NAMES[4], vec![self.fc_hidden, self.flat_features()]),
            (LAYER_NAMES[5], vec![self.fc_hidden]),
            (LAYER_NAMES[6], vec![self.num_classes, self.fc_hidden]),
            (LAYER_NAMES[7], vec![self.num_classes]),
        ]
    }

    /// Fan-in used by the initializer for each layer (bias shares its
    /// weight's fan-in).
    pub(crate) fn fan_in(&self, layer: usize) -> usize {
        match layer {
            0 | 1 => self.in_channels * self.kernel_area(),
            2 | 3 => self.conv1_channels * self.kernel_area(),
            4 | 5 => self.flat_features(),
            _ => self.fc_hidden,
        }
    }

    pub fn param_count(&self) -> usize {
        self.layer_shapes()
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }
}
