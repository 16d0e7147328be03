//! Adam optimizer.

use crate::error::Result;
use crate::tensor::Parameter;

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 5e-5, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// One bias-corrected Adam update over `params`. Every parameter must have
/// a populated gradient; `step_count` increments by exactly one.
pub fn adam_step(params: &mut [Parameter], cfg: AdamConfig) -> Result<()> {
    for p in params.iter_mut() {
        p.grad()?;
    }
    for p in params.iter_mut() {
        p.step_count += 1;
        let t = p.step_count.min(i32::MAX as u64) as i32;
        let bc1 = 1.0 - (cfg.beta1 as f64).powi(t);
        let bc2 = 1.0 - (cfg.beta2 as f64).powi(t);
        let grad = p.value.grad.take().expect("checked above");
        for (i, &g) in grad.iter().enumerate() {
            p.adam_m[i] = cfg.beta1 * p.adam_m[i] + (1.0 - cfg.beta1) * g;
            p.adam_v[i] = cfg.beta2 * p.adam_v[i] + (1.0 - cfg.beta2) * g * g;
            let m_hat = p.adam_m[i] as f64 / bc1;
            let v_hat = p.adam_v[i] as f64 / bc2;
            p.value.data[i] -=
                (cfg.lr as f64 * m_hat / (v_hat.sqrt() + cfg.eps as f64)) as f32;
        }
        p.value.grad = Some(grad);
    }
    Ok(())
}
