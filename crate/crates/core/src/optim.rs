//! Adam with bias correction.

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::params::{ParamKind, ParamStore};
use crate::tensor::{Element, Result, Tensor, TensorError};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One in-place Adam update of `params` given `grads` at step `t ≥ 1`.
pub fn adam_step<T: Element>(
    params: &mut [T],
    grads: &[T],
    m: &mut [T],
    v: &mut [T],
    t: u64,
    cfg: &AdamConfig,
    checked: bool,
) -> Result<()> {
    if t == 0 {
        return Err(TensorError::invalid("adam_step", "step counter starts at 1"));
    }
    if grads.len() != params.len() || m.len() != params.len() || v.len() != params.len() {
        return Err(TensorError::dim(
            "adam_step",
            format!(
                "params {} / grads {} / moments {}, {}",
                params.len(),
                grads.len(),
                m.len(),
                v.len()
            ),
        ));
    }
    if checked && grads.iter().any(|g| !g.is_finite()) {
        return Err(TensorError::NonFinite { op: "adam_step" });
    }
    let b1 = T::from_f64(cfg.beta1);
    let b2 = T::from_f64(cfg.beta2);
    let c1 = T::from_f64(1.0 - cfg.beta1.powi(t as i32));
    let c2 = T::from_f64(1.0 - cfg.beta2.powi(t as i32));
    let lr = T::from_f64(cfg.lr);
    let eps = T::from_f64(cfg.eps);
    for i in 0..params.len() {
        let g = grads[i];
        m[i] = b1 * m[i] + (T::one() - b1) * g;
        v[i] = b2 * v[i] + (T::one() - b2) * g * g;
        let mhat = m[i] / c1;
        let vhat = v[i] / c2;
        params[i] -= lr * mhat / (vhat.sqrt() + eps);
    }
    Ok(())
}

/// Adam state over a [`ParamStore`]. Parameters without a gradient in a
/// given step are left untouched, including their moments.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub config: AdamConfig,
    pub checked: bool,
    t: u64,
    moments: IndexMap<String, (Vec<T>, Vec<T>)>,
}

impl<T: Element> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            checked: false,
            t: 0,
            moments: IndexMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &IndexMap<String, Tensor<T>>) -> Result<()> {
        self.t += 1;
        for (name, grad) in grads {
            let entry = store.entry(name)?;
            if entry.kind != ParamKind::Param || !entry.trainable {
                continue;
            }
            let n = entry.tensor.numel();
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (vec![T::zero(); n], vec![T::zero(); n]));
            let param = store.tensor_mut(name)?;
            adam_step(param.data_mut(), grad.data(), m, v, self.t, &self.config, self.checked)?;
        }
        Ok(())
    }
}
