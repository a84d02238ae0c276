//! Named parameter tensors with group-level freeze control.
//!
//! Names are dotted paths (`vit.blocks.0.attn.wq`); the first segment is
//! the parameter group. Insertion order is fixed and used everywhere a
//! deterministic iteration order matters (seeding, serialization).

use std::collections::HashMap;

use crate::tape::{Tape, TensorId};
use crate::tensor::{Tensor, TensorError, TensorResult};

#[derive(Clone, Debug, Default)]
pub struct ParamSet {
    names: Vec<String>,
    index: HashMap<String, usize>,
    tensors: Vec<Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet::default()
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor) -> TensorResult<()> {
        if self.index.contains_key(name) {
            return Err(TensorError::InvalidConfig {
                what: format!("duplicate parameter name {name}"),
            });
        }
        self.index.insert(name.to_string(), self.tensors.len());
        self.names.push(name.to_string());
        self.tensors.push(tensor);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index.get(name).map(|&i| &mut self.tensors[i])
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Iterate `(name, tensor)` in insertion order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(|n| n.as_str()).zip(self.tensors.iter())
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.names
            .iter()
            .map(|n| n.as_str())
            .zip(self.tensors.iter_mut())
    }

    /// Group of a parameter: the leading dotted segment.
    pub fn group_of(name: &str) -> &str {
        name.split('.').next().unwrap_or(name)
    }

    /// Distinct groups in insertion order.
    pub fn groups(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for n in &self.names {
            let g = Self::group_of(n);
            if !out.iter().any(|e| e == g) {
                out.push(g.to_string());
            }
        }
        out
    }

    /// Make exactly the named groups trainable; everything else frozen.
    pub fn set_trainable_groups(&mut self, groups: &[&str]) -> TensorResult<()> {
        let known = self.groups();
        for g in groups {
            if !known.iter().any(|k| k == g) {
                return Err(TensorError::InvalidConfig {
                    what: format!("unknown parameter group {g}"),
                });
            }
        }
        for (name, t) in self.iter_mut() {
            t.requires_grad = groups.contains(&Self::group_of(name));
            t.grad = None;
        }
        Ok(())
    }

    pub fn trainable_group_names(&self) -> Vec<String> {
        let mut out = Vec::new();
        for (name, t) in self.iter() {
            if t.requires_grad {
                let g = Self::group_of(name).to_string();
                if !out.contains(&g) {
                    out.push(g);
                }
            }
        }
        out
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(|t| t.numel()).sum()
    }

    pub fn numel_trainable(&self) -> usize {
        self.tensors
            .iter()
            .filter(|t| t.requires_grad)
            .map(|t| t.numel())
            .sum()
    }

    pub fn numel_of_group(&self, group: &str) -> usize {
        self.iter()
            .filter(|(n, _)| Self::group_of(n) == group)
            .map(|(_, t)| t.numel())
            .sum()
    }

    /// Zero out all gradient buffers.
    pub fn clear_grads(&mut self) {
        for t in self.tensors.iter_mut() {
            t.grad = None;
        }
    }
}

/// Tape bindings for one forward pass: parameter name -> leaf id.
pub struct Bound {
    ids: HashMap<String, TensorId>,
}

impl Bound {
    /// Insert every parameter as a tape leaf.
    pub fn bind_all(tape: &mut Tape, params: &ParamSet) -> Bound {
        let mut ids = HashMap::with_capacity(params.len());
        for (name, t) in params.iter() {
            ids.insert(name.to_string(), tape.leaf(t));
        }
        Bound { ids }
    }

    pub fn id(&self, name: &str) -> TensorId {
        *self
            .ids
            .get(name)
            .unwrap_or_else(|| panic!("parameter {name} not bound"))
    }

    /// Copy tape gradients back into the parameter set, accumulating into
    /// any gradient already present (for multi-sample batches).
    pub fn pull_grads(&self, tape: &Tape, params: &mut ParamSet) {
        for (name, t) in params.iter_mut() {
            if !t.requires_grad {
                continue;
            }
            if let Some(g) = tape.grad(self.id(name)) {
                match &mut t.grad {
                    Some(acc) => {
                        for (a, &gv) in acc.iter_mut().zip(g) {
                            *a += gv;
                        }
                    }
                    None => t.grad = Some(g.to_vec()),
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ps() -> ParamSet {
        let mut p = ParamSet::new();
        p.insert("lm.embed", Tensor::zeros(vec![4, 2])).unwrap();
        p.insert("vit.cls", Tensor::zeros(vec![1, 2])).unwrap();
        p.insert("bridge.0.w", Tensor::zeros(vec![2, 2])).unwrap();
        p
    }

    #[test]
    fn groups_and_freeze() {
        let mut p = ps();
        assert_eq!(p.groups(), vec!["lm", "vit", "bridge"]);
        p.set_trainable_groups(&["bridge"]).unwrap();
        assert!(!p.get("lm.embed").unwrap().requires_grad);
        assert!(p.get("bridge.0.w").unwrap().requires_grad);
        assert_eq!(p.trainable_group_names(), vec!["bridge"]);
        assert_eq!(p.numel_trainable(), 4);
    }

    #[test]
    fn unknown_group_rejected() {
        let mut p = ps();
        let err = p.set_trainable_groups(&["adapterx"]).unwrap_err();
        match err {
            TensorError::InvalidConfig { what } => assert!(what.contains("adapterx")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn duplicate_name_rejected() {
        let mut p = ps();
        assert!(p.insert("lm.embed", Tensor::zeros(vec![1])).is_err());
    }
}
