use crate::error::{shape, Error, Result};
use crate::rng::RngStream;
use crate::tensor::Matrix;

/// Handle into a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How the optimizer and gradient post-processing treat a parameter.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamRole {
    Weight,
    /// Layer or batch norm affine.
    Norm,
    /// Key or value table of a gated memory with `num_blocks` experts.
    Expert { num_blocks: usize },
    /// Gate embeddings.
    Gate,
    /// Running statistics; saved with the model, never optimized.
    Buffer,
}

#[derive(Clone, Debug, PartialEq)]
struct Entry {
    name: String,
    role: ParamRole,
    value: Matrix,
}

/// Named parameter matrices in registration order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<Entry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, role: ParamRole, value: Matrix) -> ParamId {
        self.entries.push(Entry {
            name: name.into(),
            role,
            value,
        });
        ParamId(self.entries.len() - 1)
    }

    /// Adds a `rows × cols` matrix drawn from `N(0, std²)`.
    pub fn add_normal(
        &mut self,
        name: &str,
        role: ParamRole,
        rows: usize,
        cols: usize,
        std: f64,
        rng: &mut RngStream,
    ) -> ParamId {
        let m = Matrix::from_fn(rows, cols, |_, _| rng.normal(0.0, std));
        self.add(name, role, m)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Matrix {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.entries[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn role(&self, id: ParamId) -> ParamRole {
        self.entries[id.0].role
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    /// Total scalar count.
    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.data().len()).sum()
    }

    pub fn zero_grads(&self) -> Grads {
        Grads(
            self.entries
                .iter()
                .map(|e| Matrix::zeros(e.value.rows(), e.value.cols()))
                .collect(),
        )
    }

    /// Replaces a value, keeping its shape.
    pub fn set(&mut self, id: ParamId, value: Matrix) -> Result<()> {
        let cur = &mut self.entries[id.0];
        if cur.value.shape() != value.shape() {
            return Err(shape(
                "ParamStore::set",
                format!("{} is {:?}, got {:?}", cur.name, cur.value.shape(), value.shape()),
            ));
        }
        cur.value = value;
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.entries.iter().all(|e| e.value.is_finite())
    }

    /// `(name, matrix)` pairs in registration order.
    pub fn named(&self) -> impl Iterator<Item = (&str, &Matrix)> {
        self.entries.iter().map(|e| (e.name.as_str(), &e.value))
    }

    /// Overwrites values by name. Every stored name must be present once.
    pub fn load_named(&mut self, named: Vec<(String, Matrix)>) -> Result<()> {
        if named.len() != self.entries.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {} tensors, model has {}",
                named.len(),
                self.entries.len()
            )));
        }
        for (name, m) in named {
            let id = self
                .find(&name)
                .ok_or_else(|| Error::Checkpoint(format!("unknown tensor {name}")))?;
            self.set(id, m)
                .map_err(|e| Error::Checkpoint(e.to_string()))?;
        }
        Ok(())
    }
}

/// Gradients mirroring a [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct Grads(Vec<Matrix>);

impl Grads {
    pub fn get(&self, id: ParamId) -> &Matrix {
        &self.0[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.0[id.0]
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Matrix)> {
        self.0.iter().enumerate().map(|(i, m)| (ParamId(i), m))
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(Matrix::is_finite)
    }

    pub fn max_abs(&self) -> f64 {
        self.0.iter().map(Matrix::max_abs).fold(0.0, f64::max)
    }
}
