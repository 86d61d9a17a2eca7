use serde::{Deserialize, Serialize};

use super::network::Model;
use super::params::Weights;
use super::Float;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-7,
        }
    }
}

/// First and second moments for a list of flat tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    pub step: u64,
    first: Vec<Vec<T>>,
    second: Vec<Vec<T>>,
}

impl<T: Float> AdamState<T> {
    pub fn new(config: AdamConfig, sizes: &[usize]) -> Self {
        Self {
            config,
            step: 0,
            first: sizes.iter().map(|&n| vec![T::zero(); n]).collect(),
            second: sizes.iter().map(|&n| vec![T::zero(); n]).collect(),
        }
    }

    pub fn for_weights(config: AdamConfig, weights: &Weights<T>) -> Self {
        let sizes: Vec<usize> = weights.tensors().iter().map(|(_, t)| t.len()).collect();
        Self::new(config, &sizes)
    }

    pub fn second_moments(&self) -> impl Iterator<Item = &T> {
        self.second.iter().flatten()
    }

    /// One bias-corrected Adam update of `params` in place.
    pub fn update(&mut self, params: &mut [&mut [T]], grads: &[&[T]]) -> Result<()> {
        if params.len() != self.first.len() || grads.len() != self.first.len() {
            return Err(Error::Shape(format!(
                "optimizer tracks {} tensors, got {} parameters and {} gradients",
                self.first.len(),
                params.len(),
                grads.len()
            )));
        }
        for ((p, g), m) in params.iter().zip(grads).zip(&self.first) {
            if p.len() != m.len() || g.len() != m.len() {
                return Err(Error::Shape("gradient tensor size mismatch".into()));
            }
        }

        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let b1 = T::lit(c.beta1);
        let b2 = T::lit(c.beta2);
        let one = T::one();
        let correct1 = T::lit(1.0 / (1.0 - c.beta1.powi(t)));
        let correct2 = T::lit(1.0 / (1.0 - c.beta2.powi(t)));
        let lr = T::lit(c.learning_rate);
        let eps = T::lit(c.epsilon);

        for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.first[k], &mut self.second[k]);
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (one - b1) * g[i];
                v[i] = b2 * v[i] + (one - b2) * g[i] * g[i];
                let m_hat = m[i] * correct1;
                let v_hat = v[i] * correct2;
                p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Updates the trainable weights of `model`; running statistics are untouched.
pub fn adam_step<T: Float>(
    model: &mut Model<T>,
    grads: &Weights<T>,
    state: &mut AdamState<T>,
) -> Result<()> {
    let grad_views: Vec<&[T]> = grads.tensors().into_iter().map(|(_, g)| g).collect();
    let mut params: Vec<&mut [T]> = model
        .weights
        .tensors_mut()
        .into_iter()
        .map(|(_, p)| p)
        .collect();
    state.update(&mut params, &grad_views)?;
    model.bump_generation();
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{init_params, ModelConfig};

    fn small() -> ModelConfig {
        ModelConfig {
            seq_len: 3,
            hidden_per_dir: 2,
            dense_units: 3,
            ..ModelConfig::new(2)
        }
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut model = init_params::<f32>(&small(), 1).unwrap();
        let before = model.clone();
        let zeros = Weights::zeros(&model.config);
        let mut state = AdamState::for_weights(AdamConfig::default(), &model.weights);
        adam_step(&mut model, &zeros, &mut state).unwrap();
        assert_eq!(model.weights, before.weights);
        assert_eq!(model.bn_state, before.bn_state);
        assert_eq!(state.step, 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut state = AdamState::<f64>::new(AdamConfig::default(), &[4]);
        let mut p = vec![0.0; 4];
        let g = [0.5, -2.0, 1e-2, -3e2];
        state.update(&mut [&mut p[..]], &[&g[..]]).unwrap();
        for (x, gi) in p.iter().zip(g) {
            let expected = -1e-3 * gi.signum();
            assert!((x - expected).abs() < 1e-8, "{x} vs {expected}");
        }
    }

    #[test]
    fn converges_on_scalar_quadratic() {
        // f(x) = (x - 0.1)^2 from x = 0 at the default learning rate.
        let mut state = AdamState::<f64>::new(AdamConfig::default(), &[1]);
        let mut x = vec![0.0];
        for _ in 0..200 {
            let g = [2.0 * (x[0] - 0.1)];
            state.update(&mut [&mut x[..]], &[&g[..]]).unwrap();
        }
        assert!((x[0] - 0.1).abs() < 1e-2, "x = {}", x[0]);
        assert!(state.second_moments().all(|&v| v >= 0.0));
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut state = AdamState::<f64>::new(AdamConfig::default(), &[2]);
        let mut p = vec![0.0; 3];
        assert!(state
            .update(&mut [&mut p[..]], &[&[1.0, 1.0, 1.0][..]])
            .is_err());
        assert_eq!(state.step, 0);
    }
}
