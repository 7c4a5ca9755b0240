use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Bias-corrected Adam moments for a fixed, ordered list of named tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    /// Number of completed steps.
    pub step: u64,
    pub names: Vec<String>,
    pub first_moment: Vec<Tensor<T>>,
    pub second_moment: Vec<Tensor<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new<'a>(params: impl IntoIterator<Item = (String, &'a Tensor<T>)>) -> Self {
        Self::with_config(params, AdamConfig::default())
    }

    pub fn with_config<'a>(
        params: impl IntoIterator<Item = (String, &'a Tensor<T>)>,
        config: AdamConfig,
    ) -> Self {
        let mut names = Vec::new();
        let mut first_moment = Vec::new();
        for (name, t) in params {
            names.push(name);
            first_moment.push(t.zeros_like());
        }
        AdamState {
            config,
            step: 0,
            names,
            second_moment: first_moment.clone(),
            first_moment,
        }
    }

    /// Applies one update to `params` (same order and names as at construction).
    ///
    /// All gradients are validated before any parameter is touched, so a
    /// rejected step leaves both parameters and moments unchanged.
    pub fn apply(
        &mut self,
        params: Vec<(String, &mut Tensor<T>)>,
        grads: Vec<(String, &Tensor<T>)>,
        learning_rate: T,
    ) -> Result<()> {
        if params.len() != self.names.len() || grads.len() != self.names.len() {
            return Err(Error::shape(
                "adam step tensor count",
                self.names.len(),
                (params.len(), grads.len()),
            ));
        }
        for (i, ((pname, p), (gname, g))) in params.iter().zip(&grads).enumerate() {
            if *pname != self.names[i] || *gname != self.names[i] {
                return Err(Error::shape(
                    "adam step tensor order",
                    &self.names[i],
                    (pname, gname),
                ));
            }
            if p.shape() != g.shape() || p.shape() != self.first_moment[i].shape() {
                return Err(Error::shape(
                    format!("adam step `{pname}`"),
                    self.first_moment[i].shape(),
                    (p.shape(), g.shape()),
                ));
            }
            if !g.all_finite() {
                return Err(Error::Training(format!("non-finite gradient for `{gname}`")));
            }
        }

        self.step += 1;
        let b1 = T::of(self.config.beta1);
        let b2 = T::of(self.config.beta2);
        let eps = T::of(self.config.epsilon);
        let c1 = T::one() - T::of(self.config.beta1.powf(self.step as f64));
        let c2 = T::one() - T::of(self.config.beta2.powf(self.step as f64));
        for (i, ((_, p), (_, g))) in params.into_iter().zip(grads).enumerate() {
            let m = self.first_moment[i].data_mut();
            let v = self.second_moment[i].data_mut();
            for (((p, &g), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                *m = b1 * *m + (T::one() - b1) * g;
                *v = b2 * *v + (T::one() - b2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *p -= learning_rate * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn step(state: &mut AdamState<f64>, p: &mut Tensor<f64>, g: &Tensor<f64>, lr: f64) -> Result<()> {
        state.apply(vec![("p".into(), p)], vec![("p".into(), g)], lr)
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = Tensor::from_vec(vec![0.0]);
        let mut state = AdamState::new([("p".to_string(), &p)]);
        step(&mut state, &mut p, &Tensor::from_vec(vec![1.0]), 0.01).unwrap();
        let expected = -0.01 * (1.0 / (1.0 + 1e-8));
        assert!((p.data()[0] - expected).abs() < 1e-15);
        assert_eq!(state.step, 1);
    }

    #[test]
    fn zero_gradient_leaves_parameter() {
        let mut p = Tensor::from_vec(vec![1.5, -2.0]);
        let mut state = AdamState::new([("p".to_string(), &p)]);
        step(&mut state, &mut p, &Tensor::zeros([2]), 0.1).unwrap();
        assert_eq!(p.data(), &[1.5, -2.0]);
    }

    #[test]
    fn repeated_positive_gradient_decreases_monotonically() {
        let mut p = Tensor::from_vec(vec![0.0]);
        let mut state = AdamState::new([("p".to_string(), &p)]);
        let mut prev = 0.0;
        for _ in 0..2 {
            step(&mut state, &mut p, &Tensor::from_vec(vec![1.0]), 1e-3).unwrap();
            assert!(p.data()[0] < prev);
            prev = p.data()[0];
        }
    }

    #[test]
    fn first_update_sign_ignores_gradient_scale() {
        for g in [1e-6, -3.0, 250.0, -1e4] {
            let mut p = Tensor::from_vec(vec![0.0]);
            let mut state = AdamState::new([("p".to_string(), &p)]);
            step(&mut state, &mut p, &Tensor::from_vec(vec![g]), 1e-3).unwrap();
            assert_eq!(p.data()[0].signum(), -g.signum());
        }
    }

    #[test]
    fn non_finite_gradient_names_parameter_and_changes_nothing() {
        let mut p = Tensor::from_vec(vec![1.0]);
        let mut state = AdamState::new([("encoder.0.weight".to_string(), &p)]);
        let err = state
            .apply(
                vec![("encoder.0.weight".into(), &mut p)],
                vec![("encoder.0.weight".into(), &Tensor::from_vec(vec![f64::NAN]))],
                0.1,
            )
            .unwrap_err();
        assert!(err.to_string().contains("encoder.0.weight"));
        assert_eq!(p.data(), &[1.0]);
        assert_eq!(state.step, 0);
    }
}
