//! AdamW, the EMA teacher update, and the warmup-cosine learning-rate
//! schedule.

use std::collections::BTreeMap;

use ndarray::ArrayD;

use crate::autodiff::Gradients;
use crate::backbone::ModelParams;
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 1e-4 }
    }
}

/// First/second moment estimates, lazily allocated per parameter.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Moments {
    pub m: BTreeMap<String, ArrayD<f64>>,
    pub v: BTreeMap<String, ArrayD<f64>>,
}

/// One decoupled-weight-decay Adam update. `t` is the 1-based step count for
/// bias correction. Rejects non-finite gradients without touching the
/// parameters.
pub fn adamw_step(
    params: &mut ModelParams,
    moments: &mut Moments,
    grads: &Gradients,
    lr: f64,
    t: u64,
    cfg: &AdamWConfig,
) -> Result<()> {
    if t == 0 {
        return Err(Error::invalid("adamw step count must be >= 1"));
    }
    if !grads.all_finite() {
        return Err(Error::Numeric("non-finite gradient; step rejected".into()));
    }
    let bc1 = 1.0 - cfg.beta1.powi(t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(t as i32);
    for (name, g) in &grads.by_param {
        let p = params.get_mut(name);
        if p.shape() != g.shape() {
            return Err(Error::shape(format!("gradient shape mismatch for {name}")));
        }
        let m = moments.m.entry(name.clone()).or_insert_with(|| ArrayD::zeros(g.raw_dim()));
        let v = moments.v.entry(name.clone()).or_insert_with(|| ArrayD::zeros(g.raw_dim()));
        ndarray::Zip::from(p)
            .and(m)
            .and(v)
            .and(g)
            .for_each(|pv, mv, vv, &gv| {
                *mv = cfg.beta1 * *mv + (1.0 - cfg.beta1) * gv;
                *vv = cfg.beta2 * *vv + (1.0 - cfg.beta2) * gv * gv;
                let mhat = *mv / bc1;
                let vhat = *vv / bc2;
                *pv -= lr * (mhat / (vhat.sqrt() + cfg.eps) + cfg.weight_decay * *pv);
            });
    }
    Ok(())
}

/// `teacher <- momentum * teacher + (1 - momentum) * student`, per parameter.
pub fn ema_update(teacher: &mut ModelParams, student: &ModelParams, momentum: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&momentum) {
        return Err(Error::invalid(format!("EMA momentum {momentum} outside [0,1]")));
    }
    if !teacher.same_schema(student) {
        return Err(Error::shape("teacher and student parameter schemas differ"));
    }
    for ((_, t), (_, s)) in teacher.iter_mut().zip(student.iter()) {
        ndarray::Zip::from(t).and(s).for_each(|tv, &sv| {
            *tv = momentum * *tv + (1.0 - momentum) * sv;
        });
    }
    Ok(())
}

/// Dynamically adjusted EMA momentum: ramps as `1 - 1/(t+1)` and saturates at
/// `max_momentum`.
pub fn ema_momentum(step: u64, max_momentum: f64) -> f64 {
    (1.0 - 1.0 / (step as f64 + 1.0)).min(max_momentum)
}

/// Linear warmup from 0 to `peak_lr` over `warmup_steps`, then cosine decay
/// to 0 at `total_steps`.
pub fn lr_schedule(step: u64, total_steps: u64, warmup_steps: u64, peak_lr: f64) -> f64 {
    let step = step.min(total_steps);
    if warmup_steps > 0 && step <= warmup_steps {
        return peak_lr * step as f64 / warmup_steps as f64;
    }
    if total_steps == warmup_steps {
        return peak_lr;
    }
    let progress = (step - warmup_steps) as f64 / (total_steps - warmup_steps) as f64;
    peak_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::BackboneConfig;
    use ndarray::IxDyn;

    fn tiny_params(value: f64) -> ModelParams {
        let mut map = BTreeMap::new();
        map.insert("p".to_string(), ArrayD::from_elem(IxDyn(&[1]), value));
        ModelParams::from_map(map)
    }

    #[test]
    fn zero_gradients_zero_decay_is_a_fixed_point() {
        let mut params = tiny_params(0.7);
        let mut moments = Moments::default();
        let mut grads = Gradients::default();
        grads.by_param.insert("p".to_string(), ArrayD::zeros(IxDyn(&[1])));
        let cfg = AdamWConfig { weight_decay: 0.0, ..Default::default() };
        for t in 1..=5 {
            adamw_step(&mut params, &mut moments, &grads, 1e-2, t, &cfg).unwrap();
        }
        assert_eq!(params.get("p")[[0]], 0.7);
    }

    #[test]
    fn single_parameter_trajectory_matches_scalar_oracle() {
        let cfg = AdamWConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 };
        let mut params = tiny_params(1.5);
        let mut moments = Moments::default();

        // Hand-rolled scalar AdamW over the same gradient sequence.
        let mut p = 1.5f64;
        let mut m = 0.0f64;
        let mut v = 0.0f64;
        let lr = 3e-3;
        for t in 1..=10u64 {
            let g = (t as f64 * 0.37).sin();
            let mut grads = Gradients::default();
            grads.by_param.insert("p".to_string(), ArrayD::from_elem(IxDyn(&[1]), g));
            adamw_step(&mut params, &mut moments, &grads, lr, t, &cfg).unwrap();

            m = cfg.beta1 * m + (1.0 - cfg.beta1) * g;
            v = cfg.beta2 * v + (1.0 - cfg.beta2) * g * g;
            let mhat = m / (1.0 - cfg.beta1.powi(t as i32));
            let vhat = v / (1.0 - cfg.beta2.powi(t as i32));
            p -= lr * (mhat / (vhat.sqrt() + cfg.eps) + cfg.weight_decay * p);

            let got = params.get("p")[[0]];
            assert!((got - p).abs() < 1e-12, "step {t}: {got} vs oracle {p}");
        }
    }

    #[test]
    fn non_finite_gradient_rejected_without_update() {
        let mut params = tiny_params(0.4);
        let mut moments = Moments::default();
        let mut grads = Gradients::default();
        grads.by_param.insert("p".to_string(), ArrayD::from_elem(IxDyn(&[1]), f64::NAN));
        let err = adamw_step(&mut params, &mut moments, &grads, 1e-3, 1, &AdamWConfig::default());
        assert!(err.is_err());
        assert_eq!(params.get("p")[[0]], 0.4);
    }

    #[test]
    fn ema_boundary_momenta() {
        let cfg = BackboneConfig { level_channels: vec![2, 3], ..Default::default() };
        let student = ModelParams::init(&cfg, 1).unwrap();
        let mut teacher = ModelParams::init(&cfg, 2).unwrap();
        let frozen = teacher.clone();
        ema_update(&mut teacher, &student, 1.0).unwrap();
        assert_eq!(teacher, frozen, "momentum 1 must leave the teacher unchanged");
        ema_update(&mut teacher, &student, 0.0).unwrap();
        assert_eq!(teacher, student, "momentum 0 must copy the student");
    }

    #[test]
    fn ema_momentum_schedule_closed_form() {
        for t in [0u64, 1, 5, 99, 10_000] {
            let expected = (1.0 - 1.0 / (t as f64 + 1.0)).min(0.999);
            assert_eq!(ema_momentum(t, 0.999), expected);
        }
        assert_eq!(ema_momentum(0, 0.999), 0.0);
        assert_eq!(ema_momentum(10_000, 0.999), 0.999);
    }

    #[test]
    fn schedule_anchors() {
        let peak = 1e-4;
        assert_eq!(lr_schedule(40, 400, 40, peak), peak);
        assert_eq!(lr_schedule(20, 400, 40, peak), peak / 2.0);
        let end = lr_schedule(400, 400, 40, peak);
        assert!(end.abs() < 1e-19);
        assert_eq!(lr_schedule(0, 400, 40, peak), 0.0);
    }
}
