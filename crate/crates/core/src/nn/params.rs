use ndarray::{Array1, Array2};

use super::{count_params, Float, ModelConfig};
use crate::error::{Error, Result};
use crate::rng::SplitMix64;

/// One LSTM direction. Rows of every matrix are packed in gate order
/// input, forget, cell candidate, output (`i, f, g, o`), `hidden` rows each.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmParams<T> {
    /// `4H x D`
    pub w_ih: Array2<T>,
    /// `4H x H`
    pub w_hh: Array2<T>,
    /// `4H`
    pub bias: Array1<T>,
}

impl<T: Float> LstmParams<T> {
    pub fn zeros(input_dim: usize, hidden: usize) -> Self {
        Self {
            w_ih: Array2::zeros((4 * hidden, input_dim)),
            w_hh: Array2::zeros((4 * hidden, hidden)),
            bias: Array1::zeros(4 * hidden),
        }
    }

    pub fn hidden(&self) -> usize {
        self.w_hh.ncols()
    }

    pub fn input_dim(&self) -> usize {
        self.w_ih.ncols()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseParams<T> {
    /// `out x in`
    pub w: Array2<T>,
    pub b: Array1<T>,
}

impl<T: Float> DenseParams<T> {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            w: Array2::zeros((outputs, inputs)),
            b: Array1::zeros(outputs),
        }
    }
}

/// Trainable weights. Also used as the container for gradients and Adam moments.
#[derive(Debug, Clone, PartialEq)]
pub struct Weights<T> {
    pub forward: LstmParams<T>,
    pub backward: LstmParams<T>,
    pub bn_gamma: Array1<T>,
    pub bn_beta: Array1<T>,
    pub dense: DenseParams<T>,
    pub output: DenseParams<T>,
}

/// Batch-norm moving statistics (non-trainable).
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormState<T> {
    pub running_mean: Array1<T>,
    pub running_var: Array1<T>,
}

impl<T: Float> BatchNormState<T> {
    pub fn new(features: usize) -> Self {
        Self {
            running_mean: Array1::zeros(features),
            running_var: Array1::ones(features),
        }
    }
}

fn flat<T>(a: &impl AsFlat<T>) -> &[T] {
    a.flat()
}

trait AsFlat<T> {
    fn flat(&self) -> &[T];
    fn flat_mut(&mut self) -> &mut [T];
}

impl<T, D: ndarray::Dimension> AsFlat<T> for ndarray::Array<T, D> {
    fn flat(&self) -> &[T] {
        self.as_slice()
            .expect("parameters are stored in standard layout")
    }
    fn flat_mut(&mut self) -> &mut [T] {
        self.as_slice_mut()
            .expect("parameters are stored in standard layout")
    }
}

/// Tensor names in checkpoint order.
pub(crate) const TRAINABLE_NAMES: [&str; 12] = [
    "bilstm.forward.w_ih",
    "bilstm.forward.w_hh",
    "bilstm.forward.bias",
    "bilstm.backward.w_ih",
    "bilstm.backward.w_hh",
    "bilstm.backward.bias",
    "batchnorm.gamma",
    "batchnorm.beta",
    "dense.w",
    "dense.b",
    "output.w",
    "output.b",
];

pub(crate) const STATE_NAMES: [&str; 2] = ["batchnorm.running_mean", "batchnorm.running_var"];

impl<T: Float> Weights<T> {
    pub fn zeros(config: &ModelConfig) -> Self {
        let f = config.features();
        Self {
            forward: LstmParams::zeros(config.input_dim, config.hidden_per_dir),
            backward: LstmParams::zeros(config.input_dim, config.hidden_per_dir),
            bn_gamma: Array1::zeros(f),
            bn_beta: Array1::zeros(f),
            dense: DenseParams::zeros(f, config.dense_units),
            output: DenseParams::zeros(config.dense_units, config.num_classes),
        }
    }

    /// Flat views of every tensor, in checkpoint order.
    pub fn tensors(&self) -> Vec<(&'static str, &[T])> {
        let parts = [
            flat(&self.forward.w_ih),
            flat(&self.forward.w_hh),
            flat(&self.forward.bias),
            flat(&self.backward.w_ih),
            flat(&self.backward.w_hh),
            flat(&self.backward.bias),
            flat(&self.bn_gamma),
            flat(&self.bn_beta),
            flat(&self.dense.w),
            flat(&self.dense.b),
            flat(&self.output.w),
            flat(&self.output.b),
        ];
        TRAINABLE_NAMES.into_iter().zip(parts).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<(&'static str, &mut [T])> {
        let parts = [
            self.forward.w_ih.flat_mut(),
            self.forward.w_hh.flat_mut(),
            self.forward.bias.flat_mut(),
            self.backward.w_ih.flat_mut(),
            self.backward.w_hh.flat_mut(),
            self.backward.bias.flat_mut(),
            self.bn_gamma.flat_mut(),
            self.bn_beta.flat_mut(),
            self.dense.w.flat_mut(),
            self.dense.b.flat_mut(),
            self.output.w.flat_mut(),
            self.output.b.flat_mut(),
        ];
        TRAINABLE_NAMES.into_iter().zip(parts).collect()
    }

    pub fn shapes(&self) -> Vec<Vec<usize>> {
        vec![
            self.forward.w_ih.shape().to_vec(),
            self.forward.w_hh.shape().to_vec(),
            self.forward.bias.shape().to_vec(),
            self.backward.w_ih.shape().to_vec(),
            self.backward.w_hh.shape().to_vec(),
            self.backward.bias.shape().to_vec(),
            self.bn_gamma.shape().to_vec(),
            self.bn_beta.shape().to_vec(),
            self.dense.w.shape().to_vec(),
            self.dense.b.shape().to_vec(),
            self.output.w.shape().to_vec(),
            self.output.b.shape().to_vec(),
        ]
    }

    pub fn num_values(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|(_, t)| t.iter().all(|v| v.is_finite()))
    }

    pub fn cast<U: Float>(&self) -> Weights<U> {
        let c = |a: &Array2<T>| a.mapv(|v| U::from_f64(v.to_f64().unwrap()).unwrap());
        let c1 = |a: &Array1<T>| a.mapv(|v| U::from_f64(v.to_f64().unwrap()).unwrap());
        let l = |p: &LstmParams<T>| LstmParams {
            w_ih: c(&p.w_ih),
            w_hh: c(&p.w_hh),
            bias: c1(&p.bias),
        };
        let d = |p: &DenseParams<T>| DenseParams {
            w: c(&p.w),
            b: c1(&p.b),
        };
        Weights {
            forward: l(&self.forward),
            backward: l(&self.backward),
            bn_gamma: c1(&self.bn_gamma),
            bn_beta: c1(&self.bn_beta),
            dense: d(&self.dense),
            output: d(&self.output),
        }
    }

    pub(crate) fn check_matches(&self, config: &ModelConfig) -> Result<()> {
        let expected = Weights::<T>::zeros(config).shapes();
        if self.shapes() != expected {
            return Err(Error::Shape(
                "weights do not match the model configuration".into(),
            ));
        }
        Ok(())
    }
}

impl<T: Float> BatchNormState<T> {
    pub fn tensors(&self) -> Vec<(&'static str, &[T])> {
        STATE_NAMES
            .into_iter()
            .zip([flat(&self.running_mean), flat(&self.running_var)])
            .collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<(&'static str, &mut [T])> {
        let parts = [self.running_mean.flat_mut(), self.running_var.flat_mut()];
        STATE_NAMES.into_iter().zip(parts).collect()
    }
}

fn glorot<T: Float>(a: &mut Array2<T>, fan_in: usize, fan_out: usize, rng: &mut SplitMix64) {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    for v in a.iter_mut() {
        *v = T::lit(rng.uniform(-limit, limit));
    }
}

/// Glorot-uniform matrices, zero biases with forget-gate bias 1, identity
/// batch-norm. Tensors are drawn in checkpoint order from one stream.
pub fn init_params<T: Float>(config: &ModelConfig, seed: u64) -> Result<super::Model<T>> {
    config.validate()?;
    let mut rng = SplitMix64::new(seed);
    let mut w = Weights::zeros(config);
    let (d, h) = (config.input_dim, config.hidden_per_dir);
    for dir in [&mut w.forward, &mut w.backward] {
        glorot(&mut dir.w_ih, d, 4 * h, &mut rng);
        glorot(&mut dir.w_hh, h, 4 * h, &mut rng);
        dir.bias.slice_mut(ndarray::s![h..2 * h]).fill(T::one());
    }
    w.bn_gamma.fill(T::one());
    glorot(
        &mut w.dense.w,
        config.features(),
        config.dense_units,
        &mut rng,
    );
    glorot(
        &mut w.output.w,
        config.dense_units,
        config.num_classes,
        &mut rng,
    );
    let model =
        super::Model::from_parts(config.clone(), w, BatchNormState::new(config.features()))?;
    debug_assert_eq!(
        model.weights.num_values() + 2 * config.features(),
        count_params(config).total
    );
    Ok(model)
}
