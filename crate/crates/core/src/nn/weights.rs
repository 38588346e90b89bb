use std::fmt;
use std::sync::Arc;

use rand::Rng;

use super::spec::CnnSpec;
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::seeds;

/// Position of one parameter tensor inside a flat weight vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerSlot {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl LayerSlot {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Ordered description of how parameter tensors are packed into a flat
/// vector. Slots are contiguous, start at offset 0 and cover the vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    slots: Vec<LayerSlot>,
    total: usize,
}

impl Layout {
    pub fn from_slots(slots: Vec<LayerSlot>) -> Result<Self> {
        let mut next = 0;
        for slot in &slots {
            if slot.offset != next {
                return Err(Error::Layout(format!(
                    "slot `{}` starts at {} but the previous slot ends at {next}",
                    slot.name, slot.offset
                )));
            }
            if slot.shape.is_empty() || slot.shape.contains(&0) {
                return Err(Error::Layout(format!(
                    "slot `{}` has an empty shape",
                    slot.name
                )));
            }
            next += slot.len();
        }
        Ok(Self { slots, total: next })
    }

    /// Packs `(name, shape)` pairs back to back.
    pub fn packed<'a>(entries: impl IntoIterator<Item = (&'a str, Vec<usize>)>) -> Result<Self> {
        let mut offset = 0;
        let slots = entries
            .into_iter()
            .map(|(name, shape)| {
                let slot = LayerSlot {
                    name: name.to_owned(),
                    shape,
                    offset,
                };
                offset += slot.len();
                slot
            })
            .collect();
        Self::from_slots(slots)
    }

    pub fn for_spec(spec: &CnnSpec) -> Result<Self> {
        spec.validate()?;
        Self::packed(spec.layer_shapes())
    }

    pub fn slots(&self) -> &[LayerSlot] {
        &self.slots
    }

    pub fn slot(&self, name: &str) -> Option<&LayerSlot> {
        self.slots.iter().find(|s| s.name == name)
    }

    pub fn total(&self) -> usize {
        self.total
    }
}

impl fmt::Display for Layout {
    /// `name[d0,d1,..]@offset` entries joined by `;`.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, slot) in self.slots.iter().enumerate() {
            if i > 0 {
                f.write_str(";")?;
            }
            let dims: Vec<String> = slot.shape.iter().map(usize::to_string).collect();
            write!(f, "{}[{}]@{}", slot.name, dims.join(","), slot.offset)?;
        }
        Ok(())
    }
}

/// A named parameter tensor, the per-layer view of a model.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub tensor: Tensor,
}

/// All model parameters as one flat vector plus the layout describing it.
///
/// This is the unit that is sent to the server, averaged, subtracted and
/// compared. Layouts are shared behind an `Arc` so clones stay cheap.
#[derive(Debug, Clone, PartialEq)]
pub struct FlatWeights {
    values: Vec<f64>,
    layout: Arc<Layout>,
}

impl FlatWeights {
    pub fn new(layout: Arc<Layout>, values: Vec<f64>) -> Result<Self> {
        if values.len() != layout.total() {
            return Err(Error::Length {
                expected: layout.total(),
                actual: values.len(),
            });
        }
        Ok(Self { values, layout })
    }

    pub fn zeros(layout: Arc<Layout>) -> Self {
        Self {
            values: vec![0.0; layout.total()],
            layout,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.layout.clone())
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn layout(&self) -> &Arc<Layout> {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn layer(&self, name: &str) -> Option<&[f64]> {
        self.layout.slot(name).map(|s| &self.values[s.range()])
    }

    /// Concatenation of the named layers, in the order given.
    pub fn select(&self, names: &[&str]) -> Result<Vec<f64>> {
        let mut out = Vec::new();
        for name in names {
            let values = self
                .layer(name)
                .ok_or_else(|| Error::Layout(format!("no layer named `{name}`")))?;
            out.extend_from_slice(values);
        }
        Ok(out)
    }

    pub fn same_layout(&self, other: &FlatWeights) -> bool {
        Arc::ptr_eq(&self.layout, &other.layout) || self.layout == other.layout
    }

    pub fn check_layout(&self, other: &FlatWeights) -> Result<()> {
        if self.same_layout(other) {
            Ok(())
        } else {
            Err(Error::Layout(format!(
                "`{}` vs `{}`",
                self.layout, other.layout
            )))
        }
    }

    /// `self - other`.
    pub fn sub(&self, other: &FlatWeights) -> Result<FlatWeights> {
        self.check_layout(other)?;
        let values = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a - b)
            .collect();
        Ok(Self {
            values,
            layout: self.layout.clone(),
        })
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, other: &FlatWeights, scale: f64) -> Result<()> {
        self.check_layout(other)?;
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += scale * b;
        }
        Ok(())
    }

    pub fn scale(&mut self, factor: f64) {
        self.values.iter_mut().for_each(|v| *v *= factor);
    }

    pub fn dot(&self, other: &FlatWeights) -> Result<f64> {
        self.check_layout(other)?;
        Ok(dot(&self.values, &other.values))
    }

    pub fn norm(&self) -> f64 {
        dot(&self.values, &self.values).sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Little-endian bytes of every value, for byte-level comparisons.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        self.values.iter().flat_map(|v| v.to_le_bytes()).collect()
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Packs per-layer tensors into a flat vector. The tensors must appear in
/// the spec's canonical order with the spec's shapes.
pub fn flatten(params: &[NamedTensor], spec: &CnnSpec) -> Result<FlatWeights> {
    let layout = Layout::for_spec(spec)?;
    if params.len() != layout.slots().len() {
        return Err(Error::Layout(format!(
            "expected {} layers, got {}",
            layout.slots().len(),
            params.len()
        )));
    }
    let mut values = Vec::with_capacity(layout.total());
    for (param, slot) in params.iter().zip(layout.slots()) {
        if param.name != slot.name {
            return Err(Error::Layout(format!(
                "layer `{}` found where `{}` was expected",
                param.name, slot.name
            )));
        }
        if param.tensor.shape() != slot.shape.as_slice() {
            return Err(Error::Shape {
                layer: slot.name.clone(),
                expected: slot.shape.clone(),
                actual: param.tensor.shape().to_vec(),
            });
        }
        values.extend_from_slice(param.tensor.data());
    }
    FlatWeights::new(Arc::new(layout), values)
}

/// Splits a flat vector into per-layer tensors. Rejects vectors whose layout
/// is not the spec's canonical one, including layouts with the same layers in
/// a different order.
pub fn unflatten(weights: &FlatWeights, spec: &CnnSpec) -> Result<Vec<NamedTensor>> {
    let expected = Layout::for_spec(spec)?;
    if weights.len() != expected.total() {
        return Err(Error::Length {
            expected: expected.total(),
            actual: weights.len(),
        });
    }
    if **weights.layout() != expected {
        return Err(Error::Layout(format!(
            "layout `{}` is not the canonical `{expected}`",
            weights.layout()
        )));
    }
    expected
        .slots()
        .iter()
        .map(|slot| {
            Ok(NamedTensor {
                name: slot.name.clone(),
                tensor: Tensor::new(slot.shape.clone(), weights.values()[slot.range()].to_vec())?,
            })
        })
        .collect()
}

/// Uniform `[-1/sqrt(fan_in), 1/sqrt(fan_in)]` initialization, drawn layer by
/// layer in canonical order from a ChaCha stream seeded with `seed`.
pub fn init_weights(spec: &CnnSpec, seed: u64) -> Result<FlatWeights> {
    let layout = Arc::new(Layout::for_spec(spec)?);
    let mut rng = seeds::rng(seed);
    let mut values = Vec::with_capacity(layout.total());
    for (i, slot) in layout.slots().iter().enumerate() {
        let bound = 1.0 / (spec.fan_in(i) as f64).sqrt();
        values.extend((0..slot.len()).map(|_| rng.random_range(-bound..=bound)));
    }
    FlatWeights::new(layout, values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn closed_form_params(s: &CnnSpec) -> usize {
        let k2 = s.kernel_side * s.kernel_side;
        s.conv1_channels * (s.in_channels * k2 + 1)
            + s.conv2_channels * (s.conv1_channels * k2 + 1)
            + s.fc_hidden * (s.conv2_channels * s.input_side * s.input_side + 1)
            + s.num_classes * (s.fc_hidden + 1)
    }

    #[test]
    fn layout_length_matches_closed_form() {
        for classes in [2, 3] {
            let spec = CnnSpec::with_classes(classes);
            let layout = Layout::for_spec(&spec).unwrap();
            assert_eq!(layout.total(), closed_form_params(&spec));
            assert_eq!(layout.total(), spec.param_count());
        }
        assert_eq!(closed_form_params(&CnnSpec::default()), 83_123);
    }

    #[test]
    fn layout_rejects_gaps() {
        let slots = vec![
            LayerSlot {
                name: "a".into(),
                shape: vec![2],
                offset: 0,
            },
            LayerSlot {
                name: "b".into(),
                shape: vec![2],
                offset: 3,
            },
        ];
        assert!(Layout::from_slots(slots).is_err());
    }

    #[test]
    fn permuted_layer_order_is_rejected() {
        let spec = CnnSpec::default();
        let mut shapes = spec.layer_shapes().to_vec();
        shapes.swap(0, 2);
        let permuted = Arc::new(Layout::packed(shapes).unwrap());
        let w = FlatWeights::zeros(permuted);
        assert!(matches!(unflatten(&w, &spec), Err(Error::Layout(_))));

        let mut params = unflatten(&init_weights(&spec, 1).unwrap(), &spec).unwrap();
        params.swap(4, 6);
        assert!(flatten(&params, &spec).is_err());
    }

    #[test]
    fn length_mismatch_is_rejected() {
        let layout = Arc::new(Layout::for_spec(&CnnSpec::default()).unwrap());
        assert!(matches!(
            FlatWeights::new(layout, vec![0.0; 3]),
            Err(Error::Length { .. })
        ));
    }

    #[test]
    fn init_is_seeded() {
        let spec = CnnSpec::default();
        let a = init_weights(&spec, 5).unwrap();
        assert_eq!(a, init_weights(&spec, 5).unwrap());
        assert_ne!(a.values(), init_weights(&spec, 6).unwrap().values());
    }

    #[test]
    fn init_layer_means_are_centred() {
        let spec = CnnSpec::default();
        let w = init_weights(&spec, 11).unwrap();
        for (i, slot) in w.layout().slots().iter().enumerate() {
            let bound = 1.0 / (spec.fan_in(i) as f64).sqrt();
            let vals = &w.values()[slot.range()];
            let n = vals.len() as f64;
            let mean = vals.iter().sum::<f64>() / n;
            // uniform(-b, b) has standard deviation b / sqrt(3)
            let stderr = bound / 3f64.sqrt() / n.sqrt();
            assert!(mean.abs() <= 3.0 * stderr, "{}: mean {mean}", slot.name);
            assert!(vals.iter().all(|v| v.abs() <= bound));
        }
    }

    proptest! {
        #[test]
        fn flatten_unflatten_roundtrip(seed in any::<u64>()) {
            let spec = CnnSpec { conv1_channels: 2, conv2_channels: 3, fc_hidden: 4, ..CnnSpec::default() };
            let layout = Arc::new(Layout::for_spec(&spec).unwrap());
            let mut rng = seeds::rng(seed);
            let values: Vec<f64> = (0..layout.total()).map(|_| rng.random_range(-1e3..1e3)).collect();
            let w = FlatWeights::new(layout, values).unwrap();
            let back = flatten(&unflatten(&w, &spec).unwrap(), &spec).unwrap();
            prop_assert_eq!(back.values(), w.values());
        }
    }
}
