use super::{AutogradError, Graph, ParamId, Tensor, Var};

/// Named trainable arrays, addressed by [`ParamId`] (insertion order).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Params {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl Params {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
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

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    /// Records every parameter as a leaf of `graph`; the returned vars are
    /// indexed by `ParamId`.
    pub fn bind(&self, graph: &mut Graph) -> Vec<Var> {
        self.values
            .iter()
            .enumerate()
            .map(|(i, v)| graph.param(ParamId(i), v.clone()))
            .collect()
    }

    /// Records every parameter as a constant (inference only).
    pub fn bind_frozen(&self, graph: &mut Graph) -> Vec<Var> {
        self.values
            .iter()
            .map(|v| graph.constant(v.clone()))
            .collect()
    }

    pub fn zeros_like(&self) -> Vec<Tensor> {
        self.values
            .iter()
            .map(|v| Tensor::zeros(v.shape().to_vec()))
            .collect()
    }
}

/// SGD with heavy-ball momentum: `v ← μ·v + g`, `p ← p − lr·v`.
#[derive(Clone, Debug)]
pub struct Sgd {
    learning_rate: f64,
    momentum: f64,
    velocity: Vec<Tensor>,
    steps: u64,
}

impl Sgd {
    pub fn new(params: &Params, learning_rate: f64, momentum: f64) -> Result<Self, AutogradError> {
        if !(learning_rate >= 0.0 && learning_rate.is_finite()) {
            return Err(AutogradError::InvalidHyperParameter {
                name: "learning_rate",
                value: learning_rate,
            });
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(AutogradError::InvalidHyperParameter {
                name: "momentum",
                value: momentum,
            });
        }
        Ok(Self {
            learning_rate,
            momentum,
            velocity: params.zeros_like(),
            steps: 0,
        })
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Applies one update. `grads` are indexed by `ParamId`.
    pub fn step(&mut self, params: &mut Params, grads: &[Tensor]) -> Result<(), AutogradError> {
        if grads.len() != params.len() {
            return Err(AutogradError::ShapeMismatch {
                op: "sgd_step",
                lhs: vec![params.len()],
                rhs: vec![grads.len()],
            });
        }
        for (i, g) in grads.iter().enumerate() {
            let p = params.get(ParamId(i));
            if p.shape() != g.shape() {
                return Err(AutogradError::ShapeMismatch {
                    op: "sgd_step",
                    lhs: p.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
        }
        for (i, g) in grads.iter().enumerate() {
            let v = &mut self.velocity[i];
            for (vv, gg) in v.data_mut().iter_mut().zip(g.data()) {
                *vv = self.momentum * *vv + gg;
            }
            let p = params.get_mut(ParamId(i));
            for (pp, vv) in p.data_mut().iter_mut().zip(v.data()) {
                *pp -= self.learning_rate * vv;
            }
        }
        self.steps += 1;
        Ok(())
    }
}
