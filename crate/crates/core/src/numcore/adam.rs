use serde::{Deserialize, Serialize};

use super::param::Parameter;
use crate::error::{Error, Result};

/// Adam hyper-parameters plus the number of utterances averaged per step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamHyper {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub batch_size: usize,
}

impl Default for AdamHyper {
    /// Pre-training defaults: learning rate 1e-4, batch 32.
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            batch_size: 32,
        }
    }
}

impl AdamHyper {
    /// Defaults used while retraining a pruned model: learning rate 1e-5, batch 4.
    pub fn compression() -> Self {
        Self {
            learning_rate: 1e-5,
            batch_size: 4,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let beta_ok = |b: f64| b > 0.0 && b < 1.0;
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config(format!("learning rate {} must be positive", self.learning_rate)));
        }
        if !beta_ok(self.beta1) || !beta_ok(self.beta2) {
            return Err(Error::config(format!(
                "Adam betas ({}, {}) must lie in (0, 1)",
                self.beta1, self.beta2
            )));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::config("Adam epsilon must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch size must be at least 1"));
        }
        Ok(())
    }
}

/// One bias-corrected Adam update for every parameter. Gradients are
/// consumed; masked entries stay exactly zero.
pub fn adam_step<'a>(params: impl IntoIterator<Item = &'a mut Parameter>, hyper: &AdamHyper) -> Result<()> {
    let mut params: Vec<&mut Parameter> = params.into_iter().collect();
    if params.iter().any(|p| p.grad.is_none()) {
        return Err(Error::contract("adam_step called on a parameter without a gradient"));
    }
    for p in params.iter_mut() {
        p.apply_mask();
        let grad = p.grad.take().expect("checked above");
        let state = &mut p.adam;
        state.step += 1;
        let t = state.step as i32;
        let c1 = 1.0 - hyper.beta1.powi(t);
        let c2 = 1.0 - hyper.beta2.powi(t);
        let values = p.value.data_mut();
        let (m, v) = (state.m.data_mut(), state.v.data_mut());
        for i in 0..values.len() {
            let g = grad.data()[i];
            m[i] = hyper.beta1 * m[i] + (1.0 - hyper.beta1) * g;
            v[i] = hyper.beta2 * v[i] + (1.0 - hyper.beta2) * g * g;
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            values[i] -= hyper.learning_rate * m_hat / (v_hat.sqrt() + hyper.epsilon);
        }
        p.apply_mask();
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::Tensor;

    fn hyper(lr: f64) -> AdamHyper {
        AdamHyper {
            learning_rate: lr,
            ..AdamHyper::default()
        }
    }

    #[test]
    fn zero_gradient_leaves_values_and_decays_moments() {
        let mut p = Parameter::new(Tensor::from_rows(1, 2, vec![0.5, -1.0]));
        p.adam.m = Tensor::from_rows(1, 2, vec![1.0, 1.0]);
        p.adam.v = Tensor::from_rows(1, 2, vec![1.0, 1.0]);
        p.accumulate_grad(&Tensor::zeros(1, 2));
        let before = p.value.clone();
        adam_step([&mut p], &hyper(0.1)).unwrap();
        assert_eq!(p.adam.m.data(), &[0.9, 0.9]);
        assert_eq!(p.adam.v.data(), &[0.999, 0.999]);

        let mut q = Parameter::new(before.clone());
        q.accumulate_grad(&Tensor::zeros(1, 2));
        adam_step([&mut q], &hyper(0.1)).unwrap();
        assert_eq!(q.value, before);
        assert_eq!(q.adam.step, 1);
    }

    #[test]
    fn single_step_moves_by_learning_rate() {
        let mut p = Parameter::new(Tensor::scalar(0.0));
        p.accumulate_grad(&Tensor::scalar(1.0));
        adam_step([&mut p], &hyper(0.1)).unwrap();
        // m_hat = 1, v_hat = 1: step = 0.1 / (1 + 1e-8).
        let expected = -0.1 / (1.0 + 1e-8);
        assert!((p.value.item() - expected).abs() < 1e-15);
    }

    #[test]
    fn masked_scalar_stays_zero() {
        let mut p = Parameter::new(Tensor::scalar(0.3));
        p.set_mask(Tensor::scalar(0.0)).unwrap();
        for _ in 0..3 {
            p.accumulate_grad(&Tensor::scalar(5.0));
            adam_step([&mut p], &hyper(0.1)).unwrap();
            assert_eq!(p.value.item(), 0.0);
        }
    }

    #[test]
    fn missing_grad_is_a_contract_violation() {
        let mut p = Parameter::new(Tensor::scalar(1.0));
        assert!(matches!(adam_step([&mut p], &hyper(0.1)), Err(Error::Contract(_))));
    }

    #[test]
    fn invalid_hyper_rejected() {
        assert!(AdamHyper { beta1: 1.0, ..AdamHyper::default() }.validate().is_err());
        assert!(AdamHyper { learning_rate: 0.0, ..AdamHyper::default() }.validate().is_err());
        assert!(AdamHyper::compression().validate().is_ok());
    }
}
