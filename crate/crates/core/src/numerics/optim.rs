use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::params::{ParamId, ParamStore};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub first: Vec<f32>,
    pub second: Vec<f32>,
}

/// Adam state: one pair of moment buffers per trainable parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    step: u64,
    moments: Vec<Option<Moments>>,
    lr_scale: Vec<f32>,
}

impl OptimizerState {
    pub fn new(params: &ParamStore) -> Self {
        Self::with_hyperparams(params, 0.9, 0.999, 1e-8)
    }

    pub fn with_hyperparams(params: &ParamStore, beta1: f32, beta2: f32, eps: f32) -> Self {
        let moments: Vec<Option<Moments>> = params
            .iter()
            .map(|(_, _, t)| {
                t.requires_grad().then(|| Moments {
                    first: vec![0.0; t.len()],
                    second: vec![0.0; t.len()],
                })
            })
            .collect();
        Self {
            beta1,
            beta2,
            eps,
            step: 0,
            lr_scale: vec![1.0; moments.len()],
            moments,
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn moments(&self, id: ParamId) -> Option<&Moments> {
        self.moments.get(id.index()).and_then(Option::as_ref)
    }

    /// Multiplies the learning rate of one parameter.
    pub fn set_lr_scale(&mut self, id: ParamId, scale: f32) -> Result<()> {
        if !(scale > 0.0) || id.index() >= self.lr_scale.len() {
            return Err(Error::Parameter(format!("invalid lr scale {scale} for parameter {}", id.index())));
        }
        self.lr_scale[id.index()] = scale;
        Ok(())
    }

    pub(crate) fn from_parts(
        beta1: f32,
        beta2: f32,
        eps: f32,
        step: u64,
        moments: Vec<Option<Moments>>,
    ) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            step,
            lr_scale: vec![1.0; moments.len()],
            moments,
        }
    }
}

/// Applies one bias-corrected Adam update using the gradients stored in
/// `params`, then checks every updated parameter is finite.
pub fn adam_step(params: &mut ParamStore, state: &mut OptimizerState, lr: f32) -> Result<()> {
    if !(lr > 0.0) {
        return Err(Error::Parameter(format!("learning rate must be positive, got {lr}")));
    }
    if state.moments.len() != params.len() {
        return Err(Error::TrainingLoop(format!(
            "optimizer tracks {} parameters, store has {}",
            state.moments.len(),
            params.len()
        )));
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2, eps) = (state.beta1, state.beta2, state.eps);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    let ids: Vec<ParamId> = params.ids().collect();
    for id in ids {
        let name = params.name(id).to_string();
        let tensor = params.get_mut(id);
        if !tensor.requires_grad() {
            continue;
        }
        let Some(m) = state.moments[id.index()].as_mut() else {
            return Err(Error::TrainingLoop(format!("no optimizer state for trainable {name}")));
        };
        let Some(grad) = tensor.grad().map(<[f32]>::to_vec) else {
            return Err(Error::TrainingLoop(format!("missing gradient for trainable {name}")));
        };
        let lr = lr * state.lr_scale[id.index()];
        let data = tensor.data_mut();
        for (((p, g), m1), m2) in data.iter_mut().zip(&grad).zip(&mut m.first).zip(&mut m.second) {
            *m1 = b1 * *m1 + (1.0 - b1) * g;
            *m2 = b2 * *m2 + (1.0 - b2) * g * g;
            let mhat = *m1 / c1;
            let vhat = *m2 / c2;
            *p -= lr * mhat / (vhat.sqrt() + eps);
        }
        if !tensor.is_finite() {
            return Err(Error::Numeric(format!(
                "parameter {name} after optimizer step {}",
                state.step
            )));
        }
    }
    Ok(())
}

/// Global L2 norm of the stored gradients of trainable parameters.
pub fn global_grad_norm(params: &ParamStore) -> Result<f32> {
    let mut sq = 0.0f64;
    for (_, name, t) in params.iter() {
        if let Some(g) = t.grad() {
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!("gradient of {name}")));
            }
            sq += g.iter().map(|&v| f64::from(v) * f64::from(v)).sum::<f64>();
        }
    }
    Ok(sq.sqrt() as f32)
}

/// Rescales all gradients so their global norm is at most `threshold`.
/// Returns the factor applied (1.0 when no clipping was needed).
pub fn clip_global_norm(params: &mut ParamStore, threshold: f32) -> Result<f32> {
    if !(threshold > 0.0) {
        return Err(Error::Parameter(format!("clip threshold must be positive, got {threshold}")));
    }
    let norm = global_grad_norm(params)?;
    if norm <= threshold {
        return Ok(1.0);
    }
    let scale = threshold / norm;
    let ids: Vec<ParamId> = params.ids().collect();
    for id in ids {
        if let Some(g) = params.get_mut(id).grad_mut() {
            g.iter_mut().for_each(|v| *v *= scale);
        }
    }
    Ok(scale)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::tensor::Tensor;

    fn store_with(values: &[f32]) -> (ParamStore, ParamId) {
        let mut s = ParamStore::new();
        let id = s
            .add("w", Tensor::new(&[values.len()], values.to_vec()).unwrap())
            .unwrap();
        (s, id)
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let (mut s, id) = store_with(&[1.0, -2.0, 3.0]);
        s.get_mut(id).accumulate_grad(&[0.5, -4.0, 1e-3]).unwrap();
        let mut st = OptimizerState::with_hyperparams(&s, 0.9, 0.999, 0.0);
        adam_step(&mut s, &mut st, 0.01).unwrap();
        let got = s.get(id).data();
        for (g, want) in got.iter().zip([0.99, -1.99, 2.99]) {
            assert!((g - want).abs() < 1e-6, "{got:?}");
        }
        assert_eq!(st.step(), 1);
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let (mut s, id) = store_with(&[1.0, -2.0]);
        s.get_mut(id).accumulate_grad(&[0.0, 0.0]).unwrap();
        let mut st = OptimizerState::new(&s);
        adam_step(&mut s, &mut st, 0.1).unwrap();
        assert_eq!(s.get(id).data(), &[1.0, -2.0]);
    }

    #[test]
    fn missing_gradient_is_a_training_loop_error() {
        let (mut s, _) = store_with(&[1.0]);
        let mut st = OptimizerState::new(&s);
        assert!(matches!(
            adam_step(&mut s, &mut st, 0.1),
            Err(Error::TrainingLoop(_))
        ));
    }

    #[test]
    fn frozen_parameters_have_no_moments() {
        let (mut s, id) = store_with(&[1.0]);
        s.get_mut(id).set_requires_grad(false);
        let st = OptimizerState::new(&s);
        assert!(st.moments(id).is_none());
    }

    // Scalar recurrence for f(w) = |w|^2 run independently of the store.
    fn reference_adam_quadratic(w0: f64, lr: f64, steps: usize) -> f64 {
        let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8f64);
        let (mut w, mut m, mut v) = (w0, 0.0, 0.0);
        for t in 1..=steps {
            let g = 2.0 * w;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t as i32));
            let vh = v / (1.0 - b2.powi(t as i32));
            w -= lr * mh / (vh.sqrt() + eps);
        }
        w
    }

    #[test]
    fn hundred_steps_shrink_quadratic() {
        let (mut s, id) = store_with(&[1.0]);
        let mut st = OptimizerState::new(&s);
        for _ in 0..100 {
            s.zero_grads();
            let w = s.get(id).data()[0];
            s.get_mut(id).accumulate_grad(&[2.0 * w]).unwrap();
            adam_step(&mut s, &mut st, 0.1).unwrap();
        }
        let w = s.get(id).data()[0];
        let reference = reference_adam_quadratic(1.0, 0.1, 100);
        assert!(reference.abs() < 0.1, "reference {reference}");
        assert!(w.abs() < 0.1, "w = {w}");
        assert!((f64::from(w) - reference).abs() < 1e-4);
    }

    #[test]
    fn clipping_scales_to_threshold() {
        let (mut s, id) = store_with(&[0.0, 0.0]);
        s.get_mut(id).accumulate_grad(&[1.2, 1.6]).unwrap();
        let scale = clip_global_norm(&mut s, 1.0).unwrap();
        assert!((scale - 0.5).abs() < 1e-7);
        let (mut s, id) = store_with(&[0.0]);
        s.get_mut(id).accumulate_grad(&[0.3]).unwrap();
        assert_eq!(clip_global_norm(&mut s, 1.0).unwrap(), 1.0);
        assert_eq!(s.get(id).grad().unwrap(), &[0.3]);
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let (mut s, id) = store_with(&[0.0]);
        s.get_mut(id).accumulate_grad(&[f32::NAN]).unwrap();
        match clip_global_norm(&mut s, 1.0) {
            Err(Error::Numeric(msg)) => assert!(msg.contains('w')),
            other => panic!("unexpected {other:?}"),
        }
    }
}
