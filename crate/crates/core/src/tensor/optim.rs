//! AdamW with decoupled weight decay.

use super::{Real, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig { learning_rate: 3e-4, beta1: 0.9, beta2: 0.999, epsilon: 1e-8, weight_decay: 1e-4 }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate >= 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.epsilon > 0.0
            && self.weight_decay >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid optimizer settings {self:?}")))
        }
    }
}

/// First and second moment estimates, one pair per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct OptState<T: Real> {
    pub step: u64,
    pub first: Vec<Tensor<T>>,
    pub second: Vec<Tensor<T>>,
}

impl<T: Real> OptState<T> {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor<T>>) -> Self {
        let (first, second) = params
            .into_iter()
            .map(|p| (Tensor::zeros(p.shape().to_vec()), Tensor::zeros(p.shape().to_vec())))
            .unzip();
        OptState { step: 0, first, second }
    }
}

pub struct AdamW {
    pub config: AdamWConfig,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Result<Self> {
        config.validate()?;
        Ok(AdamW { config })
    }

    /// Applies one update to every parameter. All gradients are validated
    /// before any parameter is touched.
    pub fn step<T: Real>(
        &self,
        names: &[String],
        params: &mut [Tensor<T>],
        grads: &[Tensor<T>],
        state: &mut OptState<T>,
    ) -> Result<()> {
        if params.len() != grads.len() || params.len() != state.first.len() || params.len() != names.len() {
            return Err(Error::contract(
                "adamw_step",
                format!("{} params, {} grads, {} moment slots", params.len(), grads.len(), state.first.len()),
            ));
        }
        for ((name, p), g) in names.iter().zip(params.iter()).zip(grads) {
            if p.shape() != g.shape() {
                return Err(Error::contract("adamw_step", format!("{name}: param {:?} vs grad {:?}", p.shape(), g.shape())));
            }
            if !g.is_finite() {
                return Err(Error::NonFinite(format!("gradient of parameter {name}")));
            }
        }
        let c = &self.config;
        state.step += 1;
        let t = state.step as i32;
        let lr = T::from_f64c(c.learning_rate);
        let decay = T::one() - T::from_f64c(c.learning_rate * c.weight_decay);
        let (b1, b2) = (T::from_f64c(c.beta1), T::from_f64c(c.beta2));
        let (one_b1, one_b2) = (T::one() - b1, T::one() - b2);
        let bc1 = T::one() - b1.powi(t);
        let bc2 = T::one() - b2.powi(t);
        let eps = T::from_f64c(c.epsilon);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let m = state.first[i].data_mut();
            let v = state.second[i].data_mut();
            for (((pv, &gv), mv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mv = b1 * *mv + one_b1 * gv;
                *vv = b2 * *vv + one_b2 * gv * gv;
                let mhat = *mv / bc1;
                let vhat = *vv / bc2;
                *pv = *pv * decay - lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(cfg: AdamWConfig, p0: f64, grads: &[f64]) -> Vec<f64> {
        let opt = AdamW::new(cfg).unwrap();
        let mut params = vec![Tensor::<f64>::scalar(p0)];
        let mut state = OptState::new(&params);
        let names = vec!["p".to_string()];
        let mut traj = Vec::new();
        for &g in grads {
            opt.step(&names, &mut params, &[Tensor::scalar(g)], &mut state).unwrap();
            traj.push(params[0].item());
        }
        traj
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let cfg = AdamWConfig { weight_decay: 0.0, ..Default::default() };
        assert_eq!(run(cfg, 0.7, &[0.0, 0.0]), vec![0.7, 0.7]);
    }

    #[test]
    fn decay_is_decoupled_from_the_gradient() {
        let cfg = AdamWConfig { learning_rate: 1.0, weight_decay: 1e-4, ..Default::default() };
        let after = run(cfg, 2.0, &[0.0]);
        assert!((after[0] - 2.0 * (1.0 - 1e-4)).abs() < 1e-15);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let cfg = AdamWConfig { learning_rate: 0.01, weight_decay: 0.0, ..Default::default() };
        let after = run(cfg, 0.0, &[1.0]);
        // m_hat = 1, v_hat = 1 => step = lr / (1 + eps)
        assert!((after[0] + 0.01 / (1.0 + 1e-8)).abs() < 1e-15);
    }

    #[test]
    fn step_counter_and_nan_diagnostic() {
        let opt = AdamW::new(AdamWConfig::default()).unwrap();
        let mut params = vec![Tensor::<f64>::scalar(1.0)];
        let mut state = OptState::new(&params);
        let names = vec!["decoder.w".to_string()];
        opt.step(&names, &mut params, &[Tensor::scalar(0.5)], &mut state).unwrap();
        assert_eq!(state.step, 1);
        let err = opt.step(&names, &mut params, &[Tensor::scalar(f64::NAN)], &mut state).unwrap_err();
        assert!(err.to_string().contains("decoder.w"), "{err}");
        assert_eq!(state.step, 1);
    }

    #[test]
    fn rejects_bad_config() {
        assert!(AdamW::new(AdamWConfig { beta1: 1.0, ..Default::default() }).is_err());
        assert!(AdamW::new(AdamWConfig { epsilon: 0.0, ..Default::default() }).is_err());
    }
}
