//! From-scratch network layers with analytic gradients.
//!
//! The classifier is a single bidirectional LSTM whose final hidden states
//! are concatenated, followed by dropout, batch normalization, a ReLU dense
//! layer and a softmax output layer. Every layer has an explicit backward
//! pass; there is no tape or autograd graph.
//!
//! All layers are generic over [`Float`] so that training runs in `f32`
//! while gradient checks run the exact same code in `f64`.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

mod adam;
mod checkpoint;
pub mod gradcheck;
mod layers;
mod lstm;
mod network;
mod params;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_MAGIC, GATE_ORDER};
pub use layers::{
    batchnorm_backward, batchnorm_forward, dense_backward, dense_forward, dropout_backward,
    dropout_forward, loss_forward, softmax_rows, softmax_xent_backward, Activation, BatchNormCache,
    BatchNormParams, DenseCache, DropoutMask,
};
pub use lstm::{
    bilstm_backward, bilstm_forward, lstm_backward, lstm_forward, BiLstmCache, Direction, LstmCache,
};
pub use network::{backward, ForwardCache, Model};
pub use params::{init_params, BatchNormState, DenseParams, LstmParams, Weights};

/// Numeric type the network can run in.
pub trait Float:
    num_traits::Float
    + num_traits::FromPrimitive
    + ndarray::LinalgScalar
    + ndarray::ScalarOperand
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("representable constant")
    }

    /// Hyperbolic tangent used by the LSTM cell.
    #[inline]
    fn act_tanh(self) -> Self {
        self.tanh()
    }
}

impl Float for f32 {
    /// About 3x faster than libm's `tanhf` and within 2.5e-7 relative error.
    #[inline]
    fn act_tanh(self) -> Self {
        let a = self.abs();
        if a < 0.3125 {
            let x2 = self * self;
            // Odd Taylor series through x^9.
            return self
                * (1.0
                    + x2 * (-1.0 / 3.0
                        + x2 * (2.0 / 15.0 + x2 * (-17.0 / 315.0 + x2 * (62.0 / 2835.0)))));
        }
        let e = (-2.0 * a).exp();
        ((1.0 - e) / (1.0 + e)).copysign(self)
    }
}

impl Float for f64 {}

/// `a b` in standard (row-major) layout whatever the operand layouts.
pub(crate) fn matmul<T: Float>(
    a: ndarray::ArrayView2<'_, T>,
    b: ndarray::ArrayView2<'_, T>,
) -> ndarray::Array2<T> {
    let mut out = ndarray::Array2::zeros((a.nrows(), b.ncols()));
    ndarray::linalg::general_mat_mul(T::one(), &a, &b, T::zero(), &mut out);
    out
}

#[inline]
pub(crate) fn sigmoid<T: Float>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

/// Training or inference behavior of dropout and batch normalization.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub seq_len: usize,
    pub input_dim: usize,
    pub hidden_per_dir: usize,
    pub dense_units: usize,
    pub num_classes: usize,
    pub dropout_rate: f64,
    pub bn_epsilon: f64,
    pub bn_momentum: f64,
}

impl ModelConfig {
    /// The published architecture for `num_classes` hosts.
    pub fn new(num_classes: usize) -> Self {
        Self {
            seq_len: 400,
            input_dim: 5,
            hidden_per_dir: 128,
            dense_units: 64,
            num_classes,
            dropout_rate: 0.2,
            bn_epsilon: 1e-3,
            bn_momentum: 0.99,
        }
    }

    /// Width of the concatenated forward/backward hidden state.
    pub fn features(&self) -> usize {
        2 * self.hidden_per_dir
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("seq_len", self.seq_len),
            ("input_dim", self.input_dim),
            ("hidden_per_dir", self.hidden_per_dir),
            ("dense_units", self.dense_units),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.num_classes < 2 {
            return Err(Error::Config("at least 2 classes are required".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config("dropout rate must be in [0, 1)".into()));
        }
        if self.bn_epsilon <= 0.0 || !(0.0..=1.0).contains(&self.bn_momentum) {
            return Err(Error::Config("invalid batch-norm constants".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCount {
    pub total: usize,
    pub trainable: usize,
    pub non_trainable: usize,
}

/// Parameter totals, split the way a layer summary reports them.
pub fn count_params(config: &ModelConfig) -> ParamCount {
    let (d, h) = (config.input_dim, config.hidden_per_dir);
    let f = config.features();
    let (u, c) = (config.dense_units, config.num_classes);
    let lstm = 2 * (4 * (d + h + 1) * h);
    let bn_trainable = 2 * f;
    let dense = f * u + u;
    let output = u * c + c;
    let trainable = lstm + bn_trainable + dense + output;
    let non_trainable = 2 * f;
    ParamCount {
        total: trainable + non_trainable,
        trainable,
        non_trainable,
    }
}
