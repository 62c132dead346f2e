use crate::error::{Error, Result};
use crate::mask::{is_maskable, ParameterMask};
use crate::tensor::{ParamStore, Scalar};

/// Inverse-square-root decay after linear warmup.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub warmup_steps: u64,
}

impl LrSchedule {
    pub fn new(base_lr: f64, warmup_steps: u64) -> Result<Self> {
        if !(base_lr > 0.0 && base_lr.is_finite()) {
            return Err(Error::config("base_lr", "must be a positive finite number"));
        }
        if warmup_steps == 0 {
            return Err(Error::config("warmup_steps", "must be at least 1"));
        }
        Ok(Self {
            base_lr,
            warmup_steps,
        })
    }

    /// Learning rate for 1-based `step`: `base · min(step/warmup, sqrt(warmup/step))`.
    pub fn lr_at(&self, step: u64) -> Result<f64> {
        if step == 0 {
            return Err(Error::Precondition("learning-rate steps are 1-based".into()));
        }
        let s = step as f64;
        let w = self.warmup_steps as f64;
        Ok(self.base_lr * (s / w).min((w / s).sqrt()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for Adam {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam moments, shape-congruent with the store they were created for.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<T> {
    pub first_moment: Vec<Vec<T>>,
    pub second_moment: Vec<Vec<T>>,
    pub step_count: u64,
    pub hyper: Adam,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(store: &ParamStore<T>) -> Self {
        Self::with_hyper(store, Adam::default())
    }

    pub fn with_hyper(store: &ParamStore<T>, hyper: Adam) -> Self {
        let zeros = || {
            store
                .entries()
                .iter()
                .map(|e| vec![T::zero(); e.len()])
                .collect::<Vec<_>>()
        };
        Self {
            first_moment: zeros(),
            second_moment: zeros(),
            step_count: 0,
            hyper,
        }
    }
}

/// One Adam step over the gradients held in `store`.
///
/// With a mask, maskable tensors only update where the bit is 1; at bit-0
/// positions both the value and the moments are left untouched, so the
/// value is bit-identical after the step. Tensors outside the maskable set
/// always update.
pub fn optimizer_step<T: Scalar>(
    store: &mut ParamStore<T>,
    state: &mut OptimizerState<T>,
    lr: f64,
    mask: Option<&ParameterMask>,
) -> Result<()> {
    if state.first_moment.len() != store.len()
        || store
            .entries()
            .iter()
            .zip(&state.first_moment)
            .any(|(e, m)| e.len() != m.len())
    {
        return Err(Error::Structure(
            "optimizer state is not shape-congruent with the parameter store".into(),
        ));
    }
    if let Some(mask) = mask {
        mask.check_congruent(store)?;
    }
    state.step_count += 1;
    let t = state.step_count as f64;
    let Adam { beta1, beta2, eps } = state.hyper;
    let b1 = T::lit(beta1);
    let b2 = T::lit(beta2);
    let one_b1 = T::lit(1.0 - beta1);
    let one_b2 = T::lit(1.0 - beta2);
    let bc1 = T::lit(1.0 - beta1.powf(t));
    let bc2 = T::lit(1.0 - beta2.powf(t));
    let lr = T::lit(lr);
    let eps = T::lit(eps);

    for (i, entry) in store.entries_mut().iter_mut().enumerate() {
        let bits = match mask {
            Some(m) if is_maskable(&entry.name) => Some(m.bits(&entry.name)?),
            _ => None,
        };
        let m = &mut state.first_moment[i];
        let v = &mut state.second_moment[i];
        for j in 0..entry.values.len() {
            if let Some(bits) = bits {
                if !bits.get(j) {
                    continue;
                }
            }
            let g = entry.grad[j];
            m[j] = b1 * m[j] + one_b1 * g;
            v[j] = b2 * v[j] + one_b2 * g * g;
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            entry.values[j] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}
