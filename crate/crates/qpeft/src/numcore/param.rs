use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::numcore::matrix::Matrix;
use crate::numcore::scalar::Scalar;

/// Handle to a tensor inside a [`ParamStore`]; ordered by insertion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(usize);

impl ParamId {
    #[inline]
    pub fn index(self) -> usize {
        self.0
    }
}

/// A named tensor with its gradient buffer and trainability flag.
#[derive(Debug, Clone)]
pub struct ParamTensor<S> {
    name: String,
    value: Matrix<S>,
    grad: Matrix<S>,
    trainable: bool,
}

impl<S: Scalar> ParamTensor<S> {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn value(&self) -> &Matrix<S> {
        &self.value
    }

    pub fn value_mut(&mut self) -> &mut Matrix<S> {
        &mut self.value
    }

    pub fn grad(&self) -> &Matrix<S> {
        &self.grad
    }

    pub fn trainable(&self) -> bool {
        self.trainable
    }
}

/// Flat registry of all model tensors (frozen and trainable alike).
#[derive(Debug, Clone, Default)]
pub struct ParamStore<S> {
    params: Vec<ParamTensor<S>>,
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        ParamStore { params: Vec::new() }
    }

    /// Register a tensor under a unique name. Panics on a duplicate name:
    /// that is a programming error, not a runtime condition.
    pub fn insert(&mut self, name: &str, value: Matrix<S>, trainable: bool) -> ParamId {
        assert!(
            self.id_of(name).is_none(),
            "duplicate parameter name {name:?}"
        );
        let grad = Matrix::zeros(value.rows(), value.cols());
        self.params.push(ParamTensor {
            name: name.to_string(),
            value,
            grad,
            trainable,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.params
            .iter()
            .position(|p| p.name == name)
            .map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// All ids in insertion order.
    pub fn ids(&self) -> Vec<ParamId> {
        (0..self.params.len()).map(ParamId).collect()
    }

    pub fn tensor(&self, id: ParamId) -> &ParamTensor<S> {
        &self.params[id.0]
    }

    pub fn tensor_mut(&mut self, id: ParamId) -> &mut ParamTensor<S> {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Matrix<S> {
        &self.params[id.0].value
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.params[id.0].trainable = trainable;
    }

    /// Mark every tensor frozen (used after language-model pretraining).
    pub fn freeze_all(&mut self) {
        for p in &mut self.params {
            p.trainable = false;
        }
    }

    /// Add `scale * g` into each tensor's gradient buffer.
    pub fn accumulate_grads(&mut self, grads: &BTreeMap<ParamId, Matrix<S>>, scale: S) -> Result<()> {
        for (&id, g) in grads {
            self.params[id.0].grad.add_assign_scaled(g, scale)?;
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.fill(S::zero());
        }
    }
}

/// Adam hyperparameters.
#[derive(Debug, Clone)]
pub struct AdamConfig<S> {
    pub lr: S,
    pub beta1: S,
    pub beta2: S,
    pub epsilon: S,
}

impl<S: Scalar> AdamConfig<S> {
    pub fn with_lr(lr: S) -> Self {
        AdamConfig {
            lr,
            beta1: S::from_c(0.9),
            beta2: S::from_c(0.999),
            epsilon: S::from_c(1e-8),
        }
    }
}

/// Per-tensor Adam moment buffers.
#[derive(Debug, Clone)]
pub struct AdamState<S> {
    step: u64,
    m: Matrix<S>,
    v: Matrix<S>,
}

impl<S: Scalar> AdamState<S> {
    pub fn new(rows: usize, cols: usize) -> Self {
        AdamState {
            step: 0,
            m: Matrix::zeros(rows, cols),
            v: Matrix::zeros(rows, cols),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One Adam update on a single tensor, consuming and zeroing its gradient.
///
/// Bias-corrected moments; the stabilizer sits outside the square root:
/// `value -= lr * m_hat / (sqrt(v_hat) + epsilon)`. Applying to a frozen
/// tensor is a contract violation.
pub fn adam_step<S: Scalar>(
    param: &mut ParamTensor<S>,
    state: &mut AdamState<S>,
    cfg: &AdamConfig<S>,
) -> Result<()> {
    if !param.trainable {
        return Err(Error::Contract(format!(
            "adam_step on frozen tensor {:?}",
            param.name
        )));
    }
    if state.m.shape() != param.value.shape() {
        return Err(Error::Dim(format!(
            "adam state {:?} vs tensor {:?}",
            state.m.shape(),
            param.value.shape()
        )));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = S::one() - cfg.beta1.powi(t);
    let c2 = S::one() - cfg.beta2.powi(t);
    let one = S::one();
    for i in 0..param.value.len() {
        let g = param.grad.as_slice()[i];
        let m = &mut state.m.as_mut_slice()[i];
        *m = cfg.beta1 * *m + (one - cfg.beta1) * g;
        let v = &mut state.v.as_mut_slice()[i];
        *v = cfg.beta2 * *v + (one - cfg.beta2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        let w = &mut param.value.as_mut_slice()[i];
        *w = *w - cfg.lr * m_hat / (v_hat.sqrt() + cfg.epsilon);
    }
    param.grad.fill(S::zero());
    param.value.check_finite(&format!("adam update of {}", param.name))
}

/// Adam over every trainable tensor of a store.
#[derive(Debug, Clone)]
pub struct Adam<S> {
    cfg: AdamConfig<S>,
    states: BTreeMap<ParamId, AdamState<S>>,
}

impl<S: Scalar> Adam<S> {
    pub fn new(cfg: AdamConfig<S>) -> Self {
        Adam {
            cfg,
            states: BTreeMap::new(),
        }
    }

    pub fn config(&self) -> &AdamConfig<S> {
        &self.cfg
    }

    /// Update all trainable tensors from their accumulated gradients and
    /// zero the gradients.
    pub fn step(&mut self, store: &mut ParamStore<S>) -> Result<()> {
        for id in store.ids() {
            if !store.tensor(id).trainable() {
                continue;
            }
            let (r, c) = store.value(id).shape();
            let state = self
                .states
                .entry(id)
                .or_insert_with(|| AdamState::new(r, c));
            adam_step(store.tensor_mut(id), state, &self.cfg)?;
        }
        Ok(())
    }
}
