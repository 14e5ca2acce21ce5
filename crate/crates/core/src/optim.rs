//! AdamW with decoupled weight decay and the linear-warmup /
//! cosine-annealing learning-rate schedule.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::network::NetworkParams;
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub peak_lr: f64,
    pub final_lr: f64,
    pub warmup_epochs: usize,
    pub total_epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            peak_lr: 0.002,
            final_lr: 1e-5,
            warmup_epochs: 4,
            total_epochs: 45,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            batch_size: 4,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.final_lr > 0.0 && self.final_lr < self.peak_lr) {
            return Err(Error::config(format!(
                "learning rates must satisfy 0 < final_lr < peak_lr (got {} .. {})",
                self.final_lr, self.peak_lr
            )));
        }
        if self.warmup_epochs >= self.total_epochs {
            return Err(Error::config("warmup_epochs must be below total_epochs"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::config("betas must lie in [0, 1)"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::config("weight_decay must be non-negative"));
        }
        Ok(())
    }
}

/// Learning rate at a global step: linear from 0 to `peak_lr` across the
/// warmup steps, cosine from `peak_lr` down to `final_lr` across the
/// remaining steps, constant `final_lr` afterwards.
pub fn lr_at(step: u64, steps_per_epoch: usize, cfg: &OptimizerConfig) -> f64 {
    let warmup = (cfg.warmup_epochs * steps_per_epoch) as u64;
    let total = (cfg.total_epochs * steps_per_epoch) as u64;
    if step < warmup {
        return cfg.peak_lr * step as f64 / warmup as f64;
    }
    if step >= total {
        return cfg.final_lr;
    }
    let t = (step - warmup) as f64 / (total - warmup) as f64;
    cfg.final_lr + (cfg.peak_lr - cfg.final_lr) * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
}

/// One AdamW update on a flat parameter block.
///
/// `step_t` is the 1-based update count used for bias correction. Weight
/// decay is decoupled: `p <- p - lr * (m_hat / (sqrt(v_hat) + eps) + wd * p)`.
pub fn adamw_update<R: Real>(
    params: &mut [R],
    grads: &[R],
    m: &mut [R],
    v: &mut [R],
    step_t: u64,
    lr: f64,
    cfg: &OptimizerConfig,
) -> Result<()> {
    if grads.len() != params.len() || m.len() != params.len() || v.len() != params.len() {
        return Err(Error::shape("adamw buffers differ in length"));
    }
    if let Some(g) = grads.iter().find(|g| !g.is_finite()) {
        return Err(Error::numeric(format!("non-finite gradient value {g}")));
    }
    let b1 = R::from_f64_c(cfg.beta1);
    let b2 = R::from_f64_c(cfg.beta2);
    let eps = R::from_f64_c(cfg.eps);
    let lr_r = R::from_f64_c(lr);
    let wd = R::from_f64_c(cfg.weight_decay);
    let corr1 = R::from_f64_c(1.0 - cfg.beta1.powi(step_t as i32));
    let corr2 = R::from_f64_c(1.0 - cfg.beta2.powi(step_t as i32));
    for i in 0..params.len() {
        let g = grads[i];
        m[i] = b1 * m[i] + (R::one() - b1) * g;
        v[i] = b2 * v[i] + (R::one() - b2) * g * g;
        let m_hat = m[i] / corr1;
        let v_hat = v[i] / corr2;
        params[i] = params[i] - lr_r * (m_hat / (v_hat.sqrt() + eps) + wd * params[i]);
    }
    Ok(())
}

/// AdamW state over every named network parameter.
pub struct AdamW<R: Real> {
    cfg: OptimizerConfig,
    step: u64,
    names: Vec<String>,
    m: Vec<Vec<R>>,
    v: Vec<Vec<R>>,
}

impl<R: Real> AdamW<R> {
    pub fn new(params: &NetworkParams<R>, cfg: OptimizerConfig) -> Result<Self> {
        cfg.validate()?;
        let mut names = Vec::new();
        let mut m = Vec::new();
        let mut v = Vec::new();
        params.for_each(|name, t| {
            names.push(name.to_string());
            m.push(vec![R::zero(); t.len()]);
            v.push(vec![R::zero(); t.len()]);
        });
        Ok(AdamW {
            cfg,
            step: 0,
            names,
            m,
            v,
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Apply one update from named gradients. Parameters without a
    /// gradient entry are treated as having zero gradient (they still
    /// decay). Non-finite gradients abort, naming the parameter block.
    pub fn step(
        &mut self,
        params: &mut NetworkParams<R>,
        grads: &HashMap<String, Tensor<R>>,
        lr: f64,
    ) -> Result<()> {
        self.step += 1;
        let step_t = self.step;
        let mut index = 0usize;
        let mut result = Ok(());
        let (names, m_all, v_all, cfg) = (&self.names, &mut self.m, &mut self.v, &self.cfg);
        params.for_each_mut(|name, tensor| {
            if result.is_err() {
                return;
            }
            debug_assert_eq!(name, names[index]);
            let zeros;
            let g: &[R] = match grads.get(name) {
                Some(t) => t.data(),
                None => {
                    zeros = vec![R::zero(); tensor.len()];
                    &zeros
                }
            };
            if let Err(e) = adamw_update(
                tensor.data_mut(),
                g,
                &mut m_all[index],
                &mut v_all[index],
                step_t,
                lr,
                cfg,
            ) {
                result = Err(Error::numeric(format!("parameter block '{name}': {e}")));
            }
            index += 1;
        });
        result
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> OptimizerConfig {
        OptimizerConfig::default()
    }

    #[test]
    fn schedule_hits_paper_values() {
        let c = cfg();
        let spe = 100;
        assert_eq!(lr_at(0, spe, &c), 0.0);
        let warmup_end = (c.warmup_epochs * spe) as u64;
        assert_eq!(lr_at(warmup_end, spe, &c), 0.002);
        let final_step = (c.total_epochs * spe) as u64;
        assert_eq!(lr_at(final_step, spe, &c), 1e-5);
        assert_eq!(lr_at(final_step + 500, spe, &c), 1e-5);
    }

    #[test]
    fn schedule_continuous_and_monotone_after_peak() {
        let c = cfg();
        let spe = 50;
        let warmup_end = (c.warmup_epochs * spe) as u64;
        // Continuity at the boundary: the linear limit equals the cosine start.
        let linear_limit = c.peak_lr * (warmup_end as f64) / (warmup_end as f64);
        assert!((linear_limit - lr_at(warmup_end, spe, &c)).abs() < 1e-9);
        let mut last = lr_at(warmup_end, spe, &c);
        for step in warmup_end..(c.total_epochs * spe) as u64 + 100 {
            let lr = lr_at(step, spe, &c);
            assert!(lr <= last + 1e-15, "lr increased at step {step}");
            last = lr;
        }
    }

    #[test]
    fn adamw_pure_decay_with_zero_gradient() {
        let c = cfg();
        let mut p = [1.0f64, -2.0];
        let g = [0.0, 0.0];
        let mut m = [0.0, 0.0];
        let mut v = [0.0, 0.0];
        adamw_update(&mut p, &g, &mut m, &mut v, 1, 0.1, &c).unwrap();
        // Zero moments keep the Adam term at zero; only decay acts.
        assert!((p[0] - 1.0 * (1.0 - 0.1 * c.weight_decay)).abs() < 1e-15);
        assert!((p[1] - -2.0 * (1.0 - 0.1 * c.weight_decay)).abs() < 1e-15);
    }

    #[test]
    fn adamw_constant_gradient_approaches_signed_lr_step() {
        let mut c = cfg();
        c.weight_decay = 0.0;
        let mut p = [5.0f64];
        let mut m = [0.0];
        let mut v = [0.0];
        let g = [0.25];
        let lr = 0.01;
        let mut last_delta = 0.0;
        for t in 1..=200u64 {
            let before = p[0];
            adamw_update(&mut p, &g, &mut m, &mut v, t, lr, &c).unwrap();
            last_delta = p[0] - before;
        }
        // At the fixed point m_hat / sqrt(v_hat) -> sign(g).
        assert!((last_delta + lr).abs() < 1e-6, "delta {last_delta}");
    }

    #[test]
    fn adamw_zero_lr_updates_moments_only() {
        let c = cfg();
        let mut p = [3.0f64];
        let mut m = [0.0];
        let mut v = [0.0];
        adamw_update(&mut p, &[2.0], &mut m, &mut v, 1, 0.0, &c).unwrap();
        assert_eq!(p[0], 3.0);
        assert!(m[0] > 0.0 && v[0] > 0.0);
    }

    #[test]
    fn adamw_rejects_non_finite_gradients() {
        let c = cfg();
        let mut p = [0.0f64];
        let mut m = [0.0];
        let mut v = [0.0];
        assert!(adamw_update(&mut p, &[f64::NAN], &mut m, &mut v, 1, 0.1, &c).is_err());
    }

    #[test]
    fn adamw_matches_reference_adam_for_100_steps() {
        // Independent re-derivation of Adam on a 1-parameter problem with
        // wd = 0, compared bitwise-tight against the implementation.
        let mut c = cfg();
        c.weight_decay = 0.0;
        let lr = 0.003;
        let mut p = [0.7f64];
        let mut m = [0.0];
        let mut v = [0.0];

        let mut p_ref = 0.7f64;
        let mut m_ref = 0.0f64;
        let mut v_ref = 0.0f64;
        for t in 1..=100u64 {
            // Gradient of f(x) = (x - 2)^2 / 2.
            let g = p[0] - 2.0;
            adamw_update(&mut p, &[g], &mut m, &mut v, t, lr, &c).unwrap();

            let g_ref = p_ref - 2.0;
            m_ref = c.beta1 * m_ref + (1.0 - c.beta1) * g_ref;
            v_ref = c.beta2 * v_ref + (1.0 - c.beta2) * g_ref * g_ref;
            let mh = m_ref / (1.0 - c.beta1.powi(t as i32));
            let vh = v_ref / (1.0 - c.beta2.powi(t as i32));
            p_ref -= lr * mh / (vh.sqrt() + c.eps);
            assert!((p[0] - p_ref).abs() < 1e-12, "step {t}: {} vs {p_ref}", p[0]);
        }
    }

    #[test]
    fn optimizer_abort_names_the_offending_block() {
        use crate::cloud::CropBounds;
        use crate::projection::{PlaneKind, PlaneSetConfig};
        let bounds = CropBounds {
            x_min: -10.0,
            x_max: 10.0,
            y_min: -10.0,
            y_max: 10.0,
            z_min: -3.0,
            z_max: 3.0,
        };
        let config = crate::network::NetworkConfig {
            layers: 5,
            channels: 4,
            k_neighbors: 3,
            num_classes: 3,
            mlp_hidden: 6,
            conv_hidden: 4,
            bn_momentum: 0.1,
            bn_eps: 1e-5,
            plane_order: PlaneKind::ALL,
            planes: PlaneSetConfig::from_crop_bounds(&bounds, 2.0),
        };
        let mut params = crate::network::init_params::<f64>(&config, 0).unwrap();
        let mut opt = AdamW::new(&params, cfg()).unwrap();
        let mut grads = HashMap::new();
        grads.insert(
            "layer02.spatial.gate.bias".to_string(),
            Tensor::full(&[4], f64::NAN),
        );
        let err = opt.step(&mut params, &grads, 0.01).unwrap_err();
        assert!(
            err.to_string().contains("layer02.spatial.gate.bias"),
            "diagnostic should name the block: {err}"
        );
    }

    #[test]
    fn optimizer_steps_full_network_params() {
        use crate::cloud::CropBounds;
        use crate::projection::{PlaneKind, PlaneSetConfig};
        let bounds = CropBounds {
            x_min: -10.0,
            x_max: 10.0,
            y_min: -10.0,
            y_max: 10.0,
            z_min: -3.0,
            z_max: 3.0,
        };
        let config = crate::network::NetworkConfig {
            layers: 5,
            channels: 4,
            k_neighbors: 3,
            num_classes: 3,
            mlp_hidden: 6,
            conv_hidden: 4,
            bn_momentum: 0.1,
            bn_eps: 1e-5,
            plane_order: PlaneKind::ALL,
            planes: PlaneSetConfig::from_crop_bounds(&bounds, 2.0),
        };
        let mut params = crate::network::init_params::<f64>(&config, 0).unwrap();
        let mut opt = AdamW::new(&params, cfg()).unwrap();
        let mut grads = HashMap::new();
        grads.insert(
            "head.weight".to_string(),
            Tensor::full(&[3, 4], 0.5),
        );
        let before = params.head.weight.clone();
        opt.step(&mut params, &grads, 0.01).unwrap();
        assert_ne!(params.head.weight, before);
        assert_eq!(opt.step_count(), 1);
    }
}
