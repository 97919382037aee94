use std::sync::Arc;

use crate::numeric::tensor::Tensor;

pub type ParamId = usize;

/// Per-parameter gradient buffers, index-aligned with a [`ParamSet`].
pub type ParamGrads = Vec<Vec<f64>>;

#[derive(Debug, Clone)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Arc<Vec<f64>>,
}

/// Named, ordered collection of learnable tensors.
///
/// Storage is `Arc<Vec<f64>>` so read-only snapshots can be shared with
/// concurrent rollout tapes at zero copy; the single training thread
/// regains unique access (`Arc::make_mut`) once those tapes are dropped.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    entries: Vec<ParamEntry>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet { entries: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<f64>) -> ParamId {
        let numel: usize = shape.iter().product();
        assert_eq!(numel, data.len());
        let id = self.entries.len();
        self.entries.push(ParamEntry { name: name.into(), shape, data: Arc::new(data) });
        id
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id]
    }

    pub fn data(&self, id: ParamId) -> &Arc<Vec<f64>> {
        &self.entries[id].data
    }

    pub fn values_mut(&mut self, id: ParamId) -> &mut Vec<f64> {
        Arc::make_mut(&mut self.entries[id].data)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ParamEntry)> {
        self.entries.iter().enumerate()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name)
    }

    pub fn total_values(&self) -> usize {
        self.entries.iter().map(|e| e.data.len()).sum()
    }

    pub fn zero_grads(&self) -> ParamGrads {
        self.entries.iter().map(|e| vec![0.0; e.data.len()]).collect()
    }

    pub fn to_tensor(&self, id: ParamId) -> Tensor {
        let e = &self.entries[id];
        Tensor::new(e.shape.clone(), e.data.as_ref().clone())
    }
}
