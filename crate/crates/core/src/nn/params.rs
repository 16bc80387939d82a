use indexmap::IndexMap;

use super::array::Array;
use crate::error::{Error, Result};

/// Named trainable parameters with matching gradient buffers.
///
/// Insertion order is preserved and defines checkpoint layout.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    values: IndexMap<String, Array>,
    grads: IndexMap<String, Array>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Array) -> Result<()> {
        let name = name.into();
        if self.values.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        self.grads.insert(name.clone(), Array::zeros(value.shape()));
        self.values.insert(name, value);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Array> {
        self.values.get(name)
    }

    pub fn value(&self, name: &str) -> &Array {
        self.values
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn value_mut(&mut self, name: &str) -> &mut Array {
        self.values
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn grad(&self, name: &str) -> &Array {
        self.grads
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn grad_mut(&mut self, name: &str) -> &mut Array {
        self.grads
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.values.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.values.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array)> {
        self.values.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.values.values().map(Array::len).sum()
    }

    pub fn zero_grads(&mut self) {
        self.grads.values_mut().for_each(|g| g.fill(0.0));
    }

    /// Adds `scale · grad` into the named gradient buffer.
    pub fn accumulate_grad(&mut self, name: &str, grad: &Array, scale: f64) {
        let buf = self.grad_mut(name);
        debug_assert!(buf.same_shape(grad));
        for (b, g) in buf.data_mut().iter_mut().zip(grad.data()) {
            *b += scale * g;
        }
    }

    /// Rounds every value to the nearest single-precision float.
    pub fn round_to_f32(&mut self) {
        for v in self.values.values_mut() {
            v.data_mut().iter_mut().for_each(|x| *x = f64::from(*x as f32));
        }
    }

    /// Bitwise snapshot of one parameter, for equality checks.
    pub fn bits(&self, name: &str) -> Vec<u64> {
        self.value(name).data().iter().map(|v| v.to_bits()).collect()
    }
}
