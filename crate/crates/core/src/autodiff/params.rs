use ndarray::Array2;

use super::Tape;

/// Handle to a named trainable matrix in a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named parameters with accumulated gradients, in registration order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Array2<f64>>,
    grads: Vec<Array2<f64>>,
    trainable: Vec<bool>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter. Names must be unique.
    pub fn add(&mut self, name: impl Into<String>, value: Array2<f64>) -> ParamId {
        self.insert(name.into(), value, true)
    }

    /// Registers a matrix that is recorded on tapes like a parameter but never
    /// updated by the optimizer and excluded from the trainable count.
    pub fn add_frozen(&mut self, name: impl Into<String>, value: Array2<f64>) -> ParamId {
        self.insert(name.into(), value, false)
    }

    fn insert(&mut self, name: String, value: Array2<f64>, trainable: bool) -> ParamId {
        assert!(!self.names.contains(&name), "duplicate parameter name {name}");
        self.grads.push(Array2::zeros(value.raw_dim()));
        self.values.push(value);
        self.names.push(name);
        self.trainable.push(trainable);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn value(&self, id: ParamId) -> &Array2<f64> {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Array2<f64> {
        &mut self.values[id.0]
    }

    pub fn grad(&self, id: ParamId) -> &Array2<f64> {
        &self.grads[id.0]
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.trainable[id.0]
    }

    /// Number of scalar entries the optimizer updates.
    pub fn trainable_count(&self) -> usize {
        self.ids().filter(|&id| self.is_trainable(id)).map(|id| self.values[id.0].len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for g in &mut self.grads {
            g.fill(0.0);
        }
    }

    /// Adds the gradients accumulated on `tape` for parameter leaves.
    pub fn accumulate_grads(&mut self, tape: &Tape) {
        for (id, grad) in tape.param_grads() {
            self.grads[id.0] += grad;
        }
    }

    /// Visits every trainable parameter with its accumulated gradient.
    pub fn for_each_trainable(&mut self, mut f: impl FnMut(ParamId, &mut Array2<f64>, &Array2<f64>)) {
        for i in 0..self.values.len() {
            if self.trainable[i] {
                f(ParamId(i), &mut self.values[i], &self.grads[i]);
            }
        }
    }

    pub fn scale_grads(&mut self, factor: f64) {
        for g in &mut self.grads {
            g.mapv_inplace(|x| x * factor);
        }
    }
}
