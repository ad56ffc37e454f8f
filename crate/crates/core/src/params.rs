//! Named parameter storage, binding onto a tape, and checkpoint directories.
//!
//! A checkpoint directory holds one tensor file per parameter plus
//! `manifest.txt`, one `name file` pair per line in registration order.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::ops::Index;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const MANIFEST: &str = "manifest.txt";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    by_name: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter. Names must be unique.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            !self.by_name.contains_key(&name),
            "parameter {name} registered twice"
        );
        self.by_name.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Total number of trainable scalars.
    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn values(&self) -> &[Tensor] {
        &self.values
    }

    pub(crate) fn values_mut(&mut self) -> &mut [Tensor] {
        &mut self.values
    }

    /// Registers every parameter as a differentiable leaf.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        Bound {
            vars: self.values.iter().map(|v| tape.param(v.clone())).collect(),
        }
    }

    /// Registers every parameter as a constant (inference).
    pub fn bind_frozen(&self, tape: &mut Tape) -> Bound {
        Bound {
            vars: self.values.iter().map(|v| tape.constant(v.clone())).collect(),
        }
    }

    pub fn save_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
        let mut manifest = String::new();
        for (i, (name, value)) in self.names.iter().zip(&self.values).enumerate() {
            let file = format!("{i:04}_{name}.tnsr");
            value.save(dir.join(&file))?;
            manifest.push_str(&format!("{name} {file}\n"));
        }
        let path = dir.join(MANIFEST);
        let mut f = fs::File::create(&path).map_err(|e| Error::io(path.display().to_string(), e))?;
        f.write_all(manifest.as_bytes())
            .map_err(|e| Error::io(path.display().to_string(), e))
    }

    /// Loads tensors from a checkpoint directory into an existing store,
    /// requiring identical names and shapes.
    pub fn load_dir(&mut self, dir: &Path) -> Result<()> {
        let path = dir.join(MANIFEST);
        let text =
            fs::read_to_string(&path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let bad = |reason: String| Error::Format {
            path: path.display().to_string(),
            reason,
        };
        let mut seen = 0;
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (name, file) = line
                .split_once(' ')
                .ok_or_else(|| bad(format!("bad manifest line {line:?}")))?;
            let id = self
                .id(name)
                .ok_or_else(|| bad(format!("unknown parameter {name}")))?;
            let t = Tensor::load(dir.join(file.trim()))?;
            if t.shape() != self.get(id).shape() {
                return Err(bad(format!(
                    "{name}: shape {:?}, expected {:?}",
                    t.shape(),
                    self.get(id).shape()
                )));
            }
            self.values[id.0] = t;
            seen += 1;
        }
        if seen != self.len() {
            return Err(bad(format!("{seen} of {} parameters present", self.len())));
        }
        Ok(())
    }
}

/// Parameters registered on one tape.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    /// Wraps vars registered by hand, in store order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self { vars }
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Gradients for every parameter after `tape.backward`; parameters the
    /// loss did not touch get zeros.
    pub fn grads(&self, tape: &Tape) -> Vec<Tensor> {
        self.vars
            .iter()
            .map(|&v| tape.grad(v).unwrap_or_else(|| Tensor::zeros(tape.shape(v))))
            .collect()
    }
}

impl Index<ParamId> for Bound {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        &self.vars[id.0]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = ParamStore::new();
        store.add("a.w", Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        store.add("b", Tensor::full(&[3], -0.5));
        store.save_dir(dir.path()).unwrap();
        let manifest = fs::read_to_string(dir.path().join(MANIFEST)).unwrap();
        assert_eq!(manifest, "a.w 0000_a.w.tnsr\nb 0001_b.tnsr\n");

        let mut other = ParamStore::new();
        other.add("a.w", Tensor::zeros(&[2, 2]));
        other.add("b", Tensor::zeros(&[3]));
        other.load_dir(dir.path()).unwrap();
        assert_eq!(other, store);

        let mut wrong = ParamStore::new();
        wrong.add("a.w", Tensor::zeros(&[4]));
        wrong.add("b", Tensor::zeros(&[3]));
        assert!(matches!(wrong.load_dir(dir.path()), Err(Error::Format { .. })));
    }

    #[test]
    fn counts_scalars() {
        let mut store = ParamStore::new();
        store.add("x", Tensor::zeros(&[3, 4]));
        store.add("y", Tensor::zeros(&[5]));
        assert_eq!(store.num_scalars(), 17);
        assert_eq!(store.len(), 2);
    }
}
