use crate::error::{NnError, Result};
use crate::params::{Gradients, ParamStore};
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
        }
    }
}

/// Adam moments, one slot per parameter.
#[derive(Clone, Debug)]
pub struct OptimizerState<F> {
    pub config: AdamConfig,
    pub step: u64,
    m: Vec<Option<Tensor<F>>>,
    v: Vec<Option<Tensor<F>>>,
}

impl<F: Real> OptimizerState<F> {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn first_moment(&self, index: usize) -> Option<&Tensor<F>> {
        self.m.get(index).and_then(Option::as_ref)
    }

    pub fn second_moment(&self, index: usize) -> Option<&Tensor<F>> {
        self.v.get(index).and_then(Option::as_ref)
    }
}

/// One Adam update with bias correction at the state's current learning rate.
///
/// Frozen parameters and parameters without a gradient are left untouched.
pub fn adam_step<F: Real>(
    params: &mut ParamStore<F>,
    grads: &Gradients<F>,
    state: &mut OptimizerState<F>,
) -> Result<()> {
    for (id, g) in grads.iter() {
        let p = params.get(id);
        if p.shape() != g.shape() {
            return Err(NnError::ParamShape {
                name: params.name(id).to_string(),
                expected: p.shape().to_vec(),
                found: g.shape().to_vec(),
            });
        }
    }
    if state.m.len() < params.len() {
        state.m.resize(params.len(), None);
        state.v.resize(params.len(), None);
    }
    state.step += 1;
    let c = state.config;
    let t = state.step as i32;
    let b1 = F::of(c.beta1);
    let b2 = F::of(c.beta2);
    let corr1 = F::of(1.0 - c.beta1.powi(t));
    let corr2 = F::of(1.0 - c.beta2.powi(t));
    let lr = F::of(c.lr);
    let eps = F::of(c.eps);
    for (id, g) in grads.iter() {
        if params.is_frozen(id) {
            continue;
        }
        let i = id.index();
        let shape = g.shape().to_vec();
        let m = state.m[i].get_or_insert_with(|| Tensor::zeros(shape.clone()));
        let v = state.v[i].get_or_insert_with(|| Tensor::zeros(shape));
        let p = params.get_mut(id);
        for (((pv, mv), vv), &gv) in p
            .data_mut()
            .iter_mut()
            .zip(m.data_mut())
            .zip(v.data_mut())
            .zip(g.data())
        {
            *mv = b1 * *mv + (F::one() - b1) * gv;
            *vv = b2 * *vv + (F::one() - b2) * gv * gv;
            let mhat = *mv / corr1;
            let vhat = *vv / corr2;
            *pv -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Linear warmup followed by inverse square-root decay.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoamSchedule {
    pub peak_lr: f64,
    pub warmup_steps: u64,
}

impl NoamSchedule {
    /// Learning rate for the 1-based optimizer step.
    pub fn lr(&self, step: u64) -> f64 {
        let s = step.max(1) as f64;
        let w = self.warmup_steps.max(1) as f64;
        self.peak_lr * (s / w).min((w / s).sqrt())
    }
}
