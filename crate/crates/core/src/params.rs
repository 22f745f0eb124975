//! Named parameter storage shared by every model in the crate.

use ebt_autodiff::rng::{standard_normal, uniform, EngineRng};
use ebt_autodiff::Value;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub value: Value,
    /// Excluded from weight decay (gains, the step size).
    pub no_decay: bool,
}

/// Ordered parameter table. Order is registration order and is stable, so
/// optimizer state and checkpoints can be matched positionally or by name.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: impl Into<String>, value: Value, no_decay: bool) -> ParamId {
        let name = name.into();
        assert!(
            self.params.iter().all(|p| p.name != name),
            "duplicate parameter name {name}"
        );
        let value = if value.requires_grad() { value } else { value.detach_requiring_grad() };
        self.params.push(Param { name, value, no_decay });
        ParamId(self.params.len() - 1)
    }

    /// Xavier-uniform matrix `[fan_in, fan_out]`.
    pub fn xavier(&mut self, name: impl Into<String>, fan_in: usize, fan_out: usize, rng: &mut EngineRng) -> ParamId {
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data = uniform(rng, fan_in * fan_out, -a, a);
        self.register(name, Value::parameter(data, &[fan_in, fan_out]), false)
    }

    pub fn normal(&mut self, name: impl Into<String>, shape: &[usize], std: f64, rng: &mut EngineRng) -> ParamId {
        let n = shape.iter().product();
        let data = standard_normal(rng, n).into_iter().map(|v| v * std).collect();
        self.register(name, Value::parameter(data, shape), false)
    }

    pub fn gain(&mut self, name: impl Into<String>, dim: usize) -> ParamId {
        self.register(name, Value::parameter(vec![1.0; dim], &[dim]), true)
    }

    pub fn get(&self, id: ParamId) -> &Value {
        &self.params[id.0].value
    }

    pub fn by_name(&self, name: &str) -> Option<&Param> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn values(&self) -> Vec<Value> {
        self.params.iter().map(|p| p.value.clone()).collect()
    }

    /// Replaces the value at position `index` with a fresh trainable leaf.
    pub fn set(&mut self, index: usize, data: Vec<f64>) {
        let p = &mut self.params[index];
        p.value = Value::parameter(data, &p.value.shape().to_vec());
    }

    pub fn count(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }
}
