use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::Tensor;
use crate::error::{Error, Result};

/// Index of one named tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub group: String,
    pub tensor: Tensor,
}

/// A named set of tensors that share a freeze flag.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamGroup {
    pub name: String,
    pub frozen: bool,
    pub params: Vec<ParamId>,
}

/// Flat parameter storage with group membership. Names are unique.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    groups: Vec<ParamGroup>,
    #[serde(skip)]
    by_name: BTreeMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, group: &str, name: &str, tensor: Tensor) -> ParamId {
        assert!(!self.by_name.contains_key(name), "duplicate parameter name `{name}`");
        let id = ParamId(self.entries.len());
        self.entries.push(ParamEntry { name: name.to_string(), group: group.to_string(), tensor });
        self.by_name.insert(name.to_string(), id);
        match self.groups.iter_mut().find(|g| g.name == group) {
            Some(g) => g.params.push(id),
            None => self.groups.push(ParamGroup {
                name: group.to_string(),
                frozen: false,
                params: vec![id],
            }),
        }
        id
    }

    /// `N(0, std²)` initialised tensor.
    pub fn add_normal(
        &mut self,
        group: &str,
        name: &str,
        shape: &[usize],
        std: f64,
        rng: &mut impl Rng,
    ) -> ParamId {
        let normal = Normal::new(0.0, std).expect("finite std");
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| normal.sample(rng)).collect();
        let t = Tensor::new(shape.to_vec(), data).expect("valid shape");
        self.add(group, name, t)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].tensor
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn groups(&self) -> &[ParamGroup] {
        &self.groups
    }

    pub fn group(&self, name: &str) -> Option<&ParamGroup> {
        self.groups.iter().find(|g| g.name == name)
    }

    pub fn is_frozen(&self, id: ParamId) -> bool {
        let group = &self.entries[id.0].group;
        self.groups.iter().any(|g| &g.name == group && g.frozen)
    }

    pub fn set_frozen(&mut self, group: &str, frozen: bool) -> Result<()> {
        let g = self
            .groups
            .iter_mut()
            .find(|g| g.name == group)
            .ok_or_else(|| Error::Input(format!("unknown parameter group `{group}`")))?;
        g.frozen = frozen;
        Ok(())
    }

    /// Overwrites a tensor's values, keeping its shape.
    pub fn set(&mut self, id: ParamId, tensor: Tensor) -> Result<()> {
        let slot = &mut self.entries[id.0];
        if slot.tensor.shape() != tensor.shape() {
            return Err(Error::Shape(format!(
                "`{}`: expected {:?}, got {:?}",
                slot.name,
                slot.tensor.shape(),
                tensor.shape()
            )));
        }
        slot.tensor = tensor;
        Ok(())
    }

    /// SHA-256 over the names, shapes and values of the listed groups.
    pub fn group_hash(&self, groups: &[&str]) -> String {
        let mut h = Sha256::new();
        for gname in groups {
            h.update(gname.as_bytes());
            if let Some(g) = self.group(gname) {
                for &id in &g.params {
                    let e = &self.entries[id.0];
                    h.update(e.name.as_bytes());
                    for s in e.tensor.shape() {
                        h.update((*s as u64).to_le_bytes());
                    }
                    h.update(e.tensor.to_le_bytes());
                }
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Per-parameter gradients; `None` means the parameter was not reached.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Gradients {
    slots: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn new(n: usize) -> Self {
        Self { slots: vec![None; n] }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.slots.get(id.0).and_then(|s| s.as_ref())
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.iter().all(|s| s.is_none())
    }

    pub fn insert(&mut self, id: ParamId, t: Tensor) {
        if self.slots.len() <= id.0 {
            self.slots.resize(id.0 + 1, None);
        }
        match &mut self.slots[id.0] {
            Some(acc) => acc.add_assign(&t),
            slot @ None => *slot = Some(t),
        }
    }

    /// Adds `other` into `self`. Summation order is the call order.
    pub fn accumulate(&mut self, other: &Gradients) {
        for (i, g) in other.slots.iter().enumerate() {
            if let Some(g) = g {
                self.insert(ParamId(i), g.clone());
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for t in self.slots.iter_mut().flatten() {
            for v in t.data_mut() {
                *v *= factor;
            }
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.slots.iter().enumerate().filter_map(|(i, s)| s.as_ref().map(|t| (ParamId(i), t)))
    }

    pub fn global_norm(&self) -> f64 {
        self.iter().flat_map(|(_, t)| t.data()).map(|v| v * v).sum::<f64>().sqrt()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn groups_track_membership_and_freeze() {
        let mut s = ParamStore::new();
        let a = s.add("enc", "enc.w", Tensor::zeros(&[2, 2]));
        let b = s.add("head", "head.w", Tensor::zeros(&[2]));
        s.set_frozen("enc", true).unwrap();
        assert!(s.is_frozen(a));
        assert!(!s.is_frozen(b));
        assert_eq!(s.group("enc").unwrap().params, vec![a]);
        assert!(s.set_frozen("nope", true).is_err());
    }

    #[test]
    fn group_hash_sees_value_changes() {
        let mut s = ParamStore::new();
        let a = s.add("enc", "enc.w", Tensor::zeros(&[2, 2]));
        let h0 = s.group_hash(&["enc"]);
        s.get_mut(a).data_mut()[3] = 1e-300;
        assert_ne!(h0, s.group_hash(&["enc"]));
    }
}
