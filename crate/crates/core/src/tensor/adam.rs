use super::nn::Parameter;
use super::Scalar;
use crate::error::{Error, Result};

/// Adam hyper-parameters.
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
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update applied in place; gradients are cleared
/// afterwards. Fails without touching any parameter if one lacks a gradient.
pub fn adam_step<'a, T, I>(params: I, cfg: &AdamConfig) -> Result<()>
where
    T: Scalar,
    I: IntoIterator<Item = &'a mut Parameter<T>>,
{
    let mut params: Vec<&mut Parameter<T>> = params.into_iter().collect();
    if let Some(p) = params.iter().find(|p| p.grad.is_none()) {
        return Err(Error::MissingGradient(p.name.clone()));
    }
    let b1 = T::of(cfg.beta1);
    let b2 = T::of(cfg.beta2);
    let one = T::one();
    for p in params.iter_mut() {
        let grad = p.grad.take().expect("checked above");
        p.step_count += 1;
        let t = p.step_count as i32;
        let c1 = T::of(1.0 - cfg.beta1.powi(t));
        let c2 = T::of(1.0 - cfg.beta2.powi(t));
        let lr = T::of(cfg.lr);
        let eps = T::of(cfg.eps);
        let Parameter {
            value,
            adam_m,
            adam_v,
            ..
        } = &mut **p;
        for (((w, m), v), &g) in value
            .data_mut()
            .iter_mut()
            .zip(adam_m.data_mut())
            .zip(adam_v.data_mut())
            .zip(grad.data())
        {
            *m = b1 * *m + (one - b1) * g;
            *v = b2 * *v + (one - b2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *w -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}
