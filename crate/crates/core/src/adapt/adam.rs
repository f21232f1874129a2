use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::AdaptError;
use crate::autodiff::{GradientMap, ParamId};
use crate::nn::Model;
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig {
            lr,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone)]
pub struct Moments<T> {
    pub first: Tensor<T>,
    pub second: Tensor<T>,
}

/// First and second moments per parameter, plus the shared step counter.
#[derive(Debug, Clone)]
pub struct AdamState<T> {
    pub step: u64,
    pub moments: BTreeMap<ParamId, Moments<T>>,
}

impl<T: Real> Default for AdamState<T> {
    fn default() -> Self {
        AdamState {
            step: 0,
            moments: BTreeMap::new(),
        }
    }
}

impl<T: Real> AdamState<T> {
    pub fn new() -> Self {
        Self::default()
    }

    /// One bias-corrected update of every parameter in `params`. Each must
    /// have a gradient of matching shape in `grads`.
    pub fn update<'a>(
        &mut self,
        params: impl IntoIterator<Item = (ParamId, &'a mut Tensor<T>)>,
        grads: &GradientMap<T>,
        cfg: &AdamConfig,
    ) -> Result<(), AdaptError> {
        let params: Vec<_> = params.into_iter().collect();
        for (id, p) in &params {
            match grads.get(id) {
                Some(g) if g.shape() == p.shape() => {}
                Some(g) => {
                    return Err(AdaptError::Contract(format!(
                        "gradient of `{id}` has shape {:?}, parameter {:?}",
                        g.shape(),
                        p.shape()
                    )))
                }
                None => {
                    return Err(AdaptError::Contract(format!(
                        "no gradient for parameter `{id}`"
                    )))
                }
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (T::c(cfg.beta1), T::c(cfg.beta2));
        let c1 = T::one() - T::c(cfg.beta1.powi(t));
        let c2 = T::one() - T::c(cfg.beta2.powi(t));
        let (lr, eps) = (T::c(cfg.lr), T::c(cfg.eps));
        for (id, p) in params {
            let g = grads.get(&id).expect("checked above");
            let m = self.moments.entry(id).or_insert_with(|| Moments {
                first: Tensor::zeros(p.shape()),
                second: Tensor::zeros(p.shape()),
            });
            let (first, second) = (m.first.data_mut(), m.second.data_mut());
            for (i, (w, &gi)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                first[i] = b1 * first[i] + (T::one() - b1) * gi;
                second[i] = b2 * second[i] + (T::one() - b2) * gi * gi;
                let m_hat = first[i] / c1;
                let v_hat = second[i] / c2;
                *w = *w - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }

    /// Updates every parameter of `model`.
    pub fn update_model(
        &mut self,
        model: &mut Model<T>,
        grads: &GradientMap<T>,
        cfg: &AdamConfig,
    ) -> Result<(), AdaptError> {
        let instance = model.instance().to_string();
        let params = model
            .params_mut()
            .map(|(name, t)| (ParamId::new(&instance, name), t));
        self.update(params, grads, cfg)
    }
}

/// One Adam step on `params` given `grads`.
pub fn adam_step<'a, T: Real>(
    params: impl IntoIterator<Item = (ParamId, &'a mut Tensor<T>)>,
    grads: &GradientMap<T>,
    state: &mut AdamState<T>,
    cfg: &AdamConfig,
) -> Result<(), AdaptError> {
    state.update(params, grads, cfg)
}
