use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

/// Which part of the network a parameter belongs to. Learners select
/// parameters by partition, never by name.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Partition {
    /// Representation network of the OML architecture.
    Encoder,
    /// Final linear layer mapping representations to class scores.
    Head,
    /// Encoder of the gated prediction network (ANML and MAML).
    PnEncoder,
    /// Trainable tail of the neuromodulatory network.
    Nm,
    /// Random projection at the front of the neuromodulatory network. Never trained.
    NmEncoder,
    /// Encoder layers excluded from training by `freeze_lower_encoder`.
    FrozenEncoder,
}

impl Partition {
    pub fn as_str(self) -> &'static str {
        match self {
            Partition::Encoder => "encoder",
            Partition::Head => "head",
            Partition::PnEncoder => "pn_encoder",
            Partition::Nm => "nm",
            Partition::NmEncoder => "nm_encoder",
            Partition::FrozenEncoder => "frozen_encoder",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "encoder" => Partition::Encoder,
            "head" => Partition::Head,
            "pn_encoder" => Partition::PnEncoder,
            "nm" => Partition::Nm,
            "nm_encoder" => Partition::NmEncoder,
            "frozen_encoder" => Partition::FrozenEncoder,
            _ => return None,
        })
    }
}

impl fmt::Display for Partition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

pub type PartitionSet = BTreeSet<Partition>;

/// First and second moment estimates for one parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamSlot {
    pub m: Tensor,
    pub v: Tensor,
    pub step: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub value: Tensor,
    pub partition: Partition,
    /// Lazily created on the first Adam update of this parameter.
    pub adam: Option<AdamSlot>,
}

/// Named model parameters with their partition labels and optimizer state.
///
/// Iteration is in name order; that order is also the flattening order used
/// whenever gradients are treated as a single vector.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParameterSet {
    params: BTreeMap<String, Param>,
}

impl ParameterSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor, partition: Partition) {
        self.params.insert(
            name.into(),
            Param {
                value,
                partition,
                adam: None,
            },
        );
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.params.get_mut(name)
    }

    /// The tensor stored under `name`. Panics when absent: model code only
    /// asks for names it created.
    pub fn value(&self, name: &str) -> &Tensor {
        &self
            .params
            .get(name)
            .unwrap_or_else(|| panic!("no parameter named {name}"))
            .value
    }

    pub fn value_mut(&mut self, name: &str) -> &mut Tensor {
        &mut self
            .params
            .get_mut(name)
            .unwrap_or_else(|| panic!("no parameter named {name}"))
            .value
    }

    pub fn partition(&self, name: &str) -> Option<Partition> {
        self.params.get(name).map(|p| p.partition)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn names_in(&self, filter: &PartitionSet) -> Vec<String> {
        self.params
            .iter()
            .filter(|(_, p)| filter.contains(&p.partition))
            .map(|(k, _)| k.clone())
            .collect()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(|p| p.value.len()).sum()
    }

    /// True when every parameter outside `filter` is bit-identical in `other`.
    pub fn identical_outside(&self, other: &ParameterSet, filter: &PartitionSet) -> bool {
        self.params.iter().all(|(name, p)| {
            filter.contains(&p.partition)
                || other.params.get(name).is_some_and(|q| {
                    q.value.shape() == p.value.shape()
                        && q.value
                            .data()
                            .iter()
                            .zip(p.value.data())
                            .all(|(a, b)| a.to_bits() == b.to_bits())
                })
        })
    }

    /// Checks that optimizer state matches parameter shapes.
    pub fn validate(&self) -> Result<()> {
        for (name, p) in &self.params {
            if let Some(slot) = &p.adam {
                if !slot.m.same_shape(&p.value) || !slot.v.same_shape(&p.value) {
                    return Err(Error::input(format!(
                        "optimizer state of {name} does not match its shape"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Gradients keyed by parameter name. Only parameters that were asked for
/// have an entry.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GradMap {
    grads: BTreeMap<String, Tensor>,
}

impl GradMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, grad: Tensor) {
        self.grads.insert(name.into(), grad);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.grads.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.grads.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.grads.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.grads.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.grads.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.grads.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn same_keys(&self, other: &GradMap) -> bool {
        self.grads.len() == other.grads.len() && self.grads.keys().eq(other.grads.keys())
    }

    /// Concatenation of all gradients in key order.
    pub fn flatten(&self) -> Vec<f64> {
        self.grads
            .values()
            .flat_map(|t| t.data().iter().copied())
            .collect()
    }

    /// Sum of elementwise products over matching keys.
    pub fn dot(&self, other: &GradMap) -> f64 {
        self.grads
            .iter()
            .filter_map(|(k, a)| other.grads.get(k).map(|b| a.dot(b)))
            .sum()
    }

    pub fn norm_sq(&self) -> f64 {
        self.grads.values().map(Tensor::norm_sq).sum()
    }

    /// `self += scale * other` for every key of `other`, inserting missing keys.
    pub fn add_scaled(&mut self, other: &GradMap, scale: f64) {
        for (k, g) in &other.grads {
            match self.grads.get_mut(k) {
                Some(t) => t.add_scaled(g, scale),
                None => {
                    let mut t = g.clone();
                    t.scale(scale);
                    self.grads.insert(k.clone(), t);
                }
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.grads.values().all(Tensor::is_finite)
    }
}

impl FromIterator<(String, Tensor)> for GradMap {
    fn from_iter<I: IntoIterator<Item = (String, Tensor)>>(iter: I) -> Self {
        Self {
            grads: iter.into_iter().collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partition_names_round_trip() {
        for p in [
            Partition::Encoder,
            Partition::Head,
            Partition::PnEncoder,
            Partition::Nm,
            Partition::NmEncoder,
            Partition::FrozenEncoder,
        ] {
            assert_eq!(Partition::parse(p.as_str()), Some(p));
        }
    }

    #[test]
    fn grad_map_dot_and_flatten_follow_key_order() {
        let mut a = GradMap::new();
        a.insert("b", Tensor::vector(vec![3.0]));
        a.insert("a", Tensor::vector(vec![1.0, 2.0]));
        assert_eq!(a.flatten(), vec![1.0, 2.0, 3.0]);
        assert_eq!(a.dot(&a), 14.0);
    }

    #[test]
    fn identical_outside_ignores_filtered_partitions() {
        let mut p = ParameterSet::new();
        p.insert("enc", Tensor::vector(vec![1.0]), Partition::Encoder);
        p.insert("head", Tensor::vector(vec![2.0]), Partition::Head);
        let mut q = p.clone();
        q.value_mut("head").data_mut()[0] = 5.0;
        let head_only: PartitionSet = [Partition::Head].into();
        assert!(p.identical_outside(&q, &head_only));
        assert!(!p.identical_outside(&q, &PartitionSet::new()));
    }
}
