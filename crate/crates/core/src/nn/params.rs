use super::matrix::Matrix;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

/// Partition of the parameters: the shared backbone and one block per agent.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamGroup {
    Backbone,
    Manage,
    Item,
    Attr,
    Cat,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 5] = [
        ParamGroup::Backbone,
        ParamGroup::Manage,
        ParamGroup::Item,
        ParamGroup::Attr,
        ParamGroup::Cat,
    ];

    fn bit(self) -> u8 {
        1 << (self as u8)
    }
}

/// Freeze mask over [`ParamGroup`]s.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Trainable(u8);

impl Trainable {
    pub fn all() -> Self {
        Trainable(0b11111)
    }

    pub fn none() -> Self {
        Trainable(0)
    }

    pub fn only(groups: &[ParamGroup]) -> Self {
        Trainable(groups.iter().fold(0, |m, g| m | g.bit()))
    }

    pub fn allows(self, g: ParamGroup) -> bool {
        self.0 & g.bit() != 0
    }
}

/// Named parameter tensors, each tagged with its group.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    groups: Vec<ParamGroup>,
    values: Vec<Matrix>,
}

impl ParamStore {
    pub fn add(&mut self, name: impl Into<String>, group: ParamGroup, value: Matrix) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.groups.push(group);
        self.values.push(value);
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

    pub fn get(&self, id: ParamId) -> &Matrix {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn group(&self, id: ParamId) -> ParamGroup {
        self.groups[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    /// Sum of squared values over one group, for freeze checks.
    pub fn group_values(&self, group: ParamGroup) -> Vec<f64> {
        self.ids()
            .filter(|&id| self.group(id) == group)
            .flat_map(|id| self.get(id).data.iter().copied())
            .collect()
    }
}

/// Per-parameter gradient tensors, absent where a parameter was unused.
#[derive(Clone, Debug)]
pub struct Gradients {
    tensors: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Gradients {
            tensors: vec![None; store.len()],
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Matrix> {
        self.tensors[id.0].as_ref()
    }

    pub fn accumulate(&mut self, id: ParamId, g: &Matrix) {
        match &mut self.tensors[id.0] {
            Some(m) => m.add_assign(g),
            slot @ None => *slot = Some(g.clone()),
        }
    }

    pub fn merge(&mut self, other: &Gradients) {
        for (i, g) in other.tensors.iter().enumerate() {
            if let Some(g) = g {
                self.accumulate(ParamId(i), g);
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for m in self.tensors.iter_mut().flatten() {
            m.data.iter_mut().for_each(|v| *v *= s);
        }
    }

    /// Drops the gradients of frozen groups.
    pub fn mask(&mut self, store: &ParamStore, trainable: Trainable) {
        for id in store.ids() {
            if !trainable.allows(store.group(id)) {
                self.tensors[id.0] = None;
            }
        }
    }

    pub fn norm(&self) -> f64 {
        self.tensors
            .iter()
            .flatten()
            .map(|m| m.data.iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().flatten().all(|m| m.is_finite())
    }

    /// Rescales so the global norm is at most `max_norm`.
    pub fn clip_norm(&mut self, max_norm: f64) {
        let n = self.norm();
        if n > max_norm && n > 0.0 {
            self.scale(max_norm / n);
        }
    }
}

/// Adam with per-tensor moment estimates; frozen groups are never touched.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    m: Vec<Option<Matrix>>,
    v: Vec<Option<Matrix>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients, trainable: Trainable) {
        if self.m.len() != store.len() {
            self.m = vec![None; store.len()];
            self.v = vec![None; store.len()];
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        for id in store.ids() {
            if !trainable.allows(store.group(id)) {
                continue;
            }
            let Some(g) = grads.get(id) else { continue };
            let p = &mut store.values[id.0];
            let m = self.m[id.0].get_or_insert_with(|| Matrix::zeros(p.rows, p.cols));
            let v = self.v[id.0].get_or_insert_with(|| Matrix::zeros(p.rows, p.cols));
            for k in 0..p.data.len() {
                let gk = g.data[k];
                m.data[k] = self.beta1 * m.data[k] + (1.0 - self.beta1) * gk;
                v.data[k] = self.beta2 * v.data[k] + (1.0 - self.beta2) * gk * gk;
                let mh = m.data[k] / bc1;
                let vh = v.data[k] / bc2;
                p.data[k] -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}
