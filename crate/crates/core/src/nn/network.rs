use ndarray::{Array2, ArrayView3};

use super::layers::{
    batchnorm_backward, batchnorm_forward, dense_backward, dense_forward, dropout_backward,
    dropout_forward, softmax_xent_backward, Activation, BatchNormCache, BatchNormParams,
    DenseCache, DropoutMask,
};
use super::lstm::{bilstm_backward, bilstm_forward, BiLstmCache};
use super::params::{BatchNormState, Weights};
use super::{Float, Mode, ModelConfig};
use crate::error::{Error, Result};

/// Network weights plus batch-norm running statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub weights: Weights<T>,
    pub bn_state: BatchNormState<T>,
    generation: u64,
}

/// Everything a training-mode forward pass keeps for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache<T> {
    generation: u64,
    input_shape: (usize, usize, usize),
    bilstm: BiLstmCache<T>,
    dropout: DropoutMask<T>,
    batchnorm: BatchNormCache<T>,
    bn_out: Array2<T>,
    dense: DenseCache<T>,
    hidden: Array2<T>,
    /// Softmax outputs, `B x C`.
    pub probs: Array2<T>,
}

impl<T: Float> Model<T> {
    pub fn from_parts(
        config: ModelConfig,
        weights: Weights<T>,
        bn_state: BatchNormState<T>,
    ) -> Result<Self> {
        config.validate()?;
        weights.check_matches(&config)?;
        if bn_state.running_mean.len() != config.features()
            || bn_state.running_var.len() != config.features()
        {
            return Err(Error::Shape("batch-norm state width mismatch".into()));
        }
        if bn_state
            .running_var
            .iter()
            .any(|&v| v.is_nan() || v < T::zero())
        {
            return Err(Error::InvalidArgument(
                "running variance must be non-negative".into(),
            ));
        }
        Ok(Self {
            config,
            weights,
            bn_state,
            generation: 0,
        })
    }

    pub(crate) fn bump_generation(&mut self) {
        self.generation += 1;
    }

    fn check_input(&self, x: &ArrayView3<'_, T>) -> Result<()> {
        let (_, l, d) = x.dim();
        if l != self.config.seq_len || d != self.config.input_dim {
            return Err(Error::Shape(format!(
                "model expects sequences of {}x{}, got {l}x{d}",
                self.config.seq_len, self.config.input_dim
            )));
        }
        Ok(())
    }

    /// Training-mode forward pass. Updates batch-norm running statistics.
    pub fn forward_train(
        &mut self,
        x: ArrayView3<'_, T>,
        dropout_seed: u64,
    ) -> Result<ForwardCache<T>> {
        self.check_input(&x)?;
        let w = &self.weights;
        let (features, bilstm) = bilstm_forward(x, &w.forward, &w.backward)?;
        let (dropped, mask) = dropout_forward(
            features.view(),
            self.config.dropout_rate,
            Mode::Train,
            dropout_seed,
        )?;
        let params = BatchNormParams {
            gamma: w.bn_gamma.view(),
            beta: w.bn_beta.view(),
            epsilon: self.config.bn_epsilon,
            momentum: self.config.bn_momentum,
        };
        let (bn_out, bn_cache) = batchnorm_forward(
            dropped.view(),
            params,
            &mut self.bn_state.running_mean,
            &mut self.bn_state.running_var,
            Mode::Train,
        )?;
        let (hidden, dense) = dense_forward(
            bn_out.view(),
            w.dense.w.view(),
            w.dense.b.view(),
            Activation::Relu,
        )?;
        let (probs, _) = dense_forward(
            hidden.view(),
            w.output.w.view(),
            w.output.b.view(),
            Activation::Softmax,
        )?;
        Ok(ForwardCache {
            generation: self.generation,
            input_shape: x.dim(),
            bilstm,
            dropout: mask.expect("training mode yields a mask"),
            batchnorm: bn_cache.expect("training mode yields a cache"),
            bn_out,
            dense,
            hidden,
            probs,
        })
    }

    /// Inference-mode class probabilities (`B x C`). Pure.
    pub fn predict_proba(&self, x: ArrayView3<'_, T>) -> Result<Array2<T>> {
        self.check_input(&x)?;
        let w = &self.weights;
        let (features, _) = bilstm_forward(x, &w.forward, &w.backward)?;
        let params = BatchNormParams {
            gamma: w.bn_gamma.view(),
            beta: w.bn_beta.view(),
            epsilon: self.config.bn_epsilon,
            momentum: self.config.bn_momentum,
        };
        // Inference never touches the running statistics.
        let mut mean = self.bn_state.running_mean.clone();
        let mut var = self.bn_state.running_var.clone();
        let (bn_out, _) =
            batchnorm_forward(features.view(), params, &mut mean, &mut var, Mode::Infer)?;
        let (hidden, _) = dense_forward(
            bn_out.view(),
            w.dense.w.view(),
            w.dense.b.view(),
            Activation::Relu,
        )?;
        let (probs, _) = dense_forward(
            hidden.view(),
            w.output.w.view(),
            w.output.b.view(),
            Activation::Softmax,
        )?;
        Ok(probs)
    }
}

/// Analytic gradients of the weighted cross-entropy for the batch in `cache`.
pub fn backward<T: Float>(
    model: &Model<T>,
    cache: &ForwardCache<T>,
    labels: &[usize],
    sample_weights: &[T],
) -> Result<Weights<T>> {
    if cache.generation != model.generation {
        return Err(Error::InvalidArgument(
            "forward cache is stale: the weights changed after it was produced".into(),
        ));
    }
    if cache.input_shape.0 != labels.len() {
        return Err(Error::Shape(format!(
            "cache holds {} samples but {} labels were given",
            cache.input_shape.0,
            labels.len()
        )));
    }
    let w = &model.weights;

    let d_logits = softmax_xent_backward(cache.probs.view(), labels, sample_weights)?;
    let identity = DenseCache {
        pre_activation: Array2::zeros((0, 0)),
    };
    let (d_out_w, d_out_b, d_hidden) = dense_backward(
        cache.hidden.view(),
        w.output.w.view(),
        &identity,
        Activation::Identity,
        d_logits.view(),
    )?;
    let (d_dense_w, d_dense_b, d_bn_out) = dense_backward(
        cache.bn_out.view(),
        w.dense.w.view(),
        &cache.dense,
        Activation::Relu,
        d_hidden.view(),
    )?;
    let (d_gamma, d_beta, d_dropped) =
        batchnorm_backward(&cache.batchnorm, w.bn_gamma.view(), d_bn_out.view());
    let d_features = dropout_backward(&cache.dropout, d_dropped.view());
    let (d_fwd, d_bwd, _) =
        bilstm_backward(&cache.bilstm, &w.forward, &w.backward, d_features.view())?;

    Ok(Weights {
        forward: d_fwd,
        backward: d_bwd,
        bn_gamma: d_gamma,
        bn_beta: d_beta,
        dense: super::params::DenseParams {
            w: d_dense_w,
            b: d_dense_b,
        },
        output: super::params::DenseParams {
            w: d_out_w,
            b: d_out_b,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::init_params;
    use crate::rng::SplitMix64;
    use ndarray::Array3;

    fn toy_config() -> ModelConfig {
        ModelConfig {
            seq_len: 12,
            input_dim: 5,
            hidden_per_dir: 4,
            dense_units: 5,
            num_classes: 3,
            ..ModelConfig::new(3)
        }
    }

    fn one_hot_input(b: usize, l: usize, seed: u64) -> Array3<f64> {
        let mut rng = SplitMix64::new(seed);
        let mut x = Array3::zeros((b, l, 5));
        for i in 0..b {
            for t in 0..l {
                x[[i, t, rng.below(5) as usize]] = 1.0;
            }
        }
        x
    }

    #[test]
    fn full_network_gradient_check() {
        let shape = crate::nn::gradcheck::CheckShape {
            batch: 3,
            len: 12,
            input_dim: 5,
            hidden: 4,
            classes: 3,
        };
        let r = crate::nn::gradcheck::check_network(shape, 17, 1e-5).unwrap();
        assert!(r.max_relative_error < 1e-4, "{r:?}");
    }

    #[test]
    fn zero_sample_weights_zero_gradients() {
        let config = toy_config();
        let mut model = init_params::<f64>(&config, 3).unwrap();
        let x = one_hot_input(4, 12, 1);
        let cache = model.forward_train(x.view(), 1).unwrap();
        let g = backward(&model, &cache, &[0, 1, 2, 0], &[0.0; 4]).unwrap();
        assert!(g.tensors().iter().all(|(_, t)| t.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn gradients_are_finite_on_random_inputs() {
        let config = toy_config();
        for seed in 0..5 {
            let mut model = init_params::<f32>(&config, seed).unwrap();
            let x = one_hot_input(4, 12, seed + 10).mapv(|v| v as f32);
            let cache = model.forward_train(x.view(), seed).unwrap();
            let g = backward(&model, &cache, &[0, 1, 2, 1], &[1.0; 4]).unwrap();
            assert!(g.is_finite());
        }
    }

    #[test]
    fn stale_cache_is_rejected() {
        let config = toy_config();
        let mut model = init_params::<f64>(&config, 3).unwrap();
        let x = one_hot_input(2, 12, 1);
        let cache = model.forward_train(x.view(), 1).unwrap();
        model.bump_generation();
        assert!(backward(&model, &cache, &[0, 1], &[1.0; 2]).is_err());
    }

    #[test]
    fn inference_is_pure_and_normalized() {
        let config = toy_config();
        let model = init_params::<f64>(&config, 8).unwrap();
        let x = one_hot_input(5, 12, 4);
        let a = model.predict_proba(x.view()).unwrap();
        let b = model.predict_proba(x.view()).unwrap();
        assert_eq!(a, b);
        for row in a.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-9);
        }
        let bad = one_hot_input(1, 11, 4);
        assert!(model.predict_proba(bad.view()).is_err());
    }
}
