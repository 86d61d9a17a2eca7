use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};

use super::{matmul, Float, Mode};
use crate::error::{Error, Result};
use crate::rng::SplitMix64;

/// Inverted-dropout keep mask: entries are `0` or `1 / (1 - rate)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DropoutMask<T>(pub Array2<T>);

impl<T: Float> DropoutMask<T> {
    pub fn sample(shape: (usize, usize), rate: f64, seed: u64) -> Result<Self> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::InvalidArgument(format!(
                "dropout rate must be in [0, 1), got {rate}"
            )));
        }
        let mut rng = SplitMix64::new(seed);
        let keep = T::lit(1.0 / (1.0 - rate));
        Ok(Self(Array2::from_shape_fn(shape, |_| {
            if rng.next_f64() < rate {
                T::zero()
            } else {
                keep
            }
        })))
    }
}

/// Training mode draws a mask from `seed`; inference mode is the identity.
pub fn dropout_forward<T: Float>(
    x: ArrayView2<'_, T>,
    rate: f64,
    mode: Mode,
    seed: u64,
) -> Result<(Array2<T>, Option<DropoutMask<T>>)> {
    match mode {
        Mode::Infer => Ok((x.to_owned(), None)),
        Mode::Train => {
            let mask = DropoutMask::sample(x.dim(), rate, seed)?;
            Ok((&x * &mask.0, Some(mask)))
        }
    }
}

pub fn dropout_backward<T: Float>(mask: &DropoutMask<T>, dy: ArrayView2<'_, T>) -> Array2<T> {
    &dy * &mask.0
}

#[derive(Debug, Clone, Copy)]
pub struct BatchNormParams<'a, T> {
    pub gamma: ArrayView1<'a, T>,
    pub beta: ArrayView1<'a, T>,
    pub epsilon: f64,
    pub momentum: f64,
}

#[derive(Debug, Clone)]
pub struct BatchNormCache<T> {
    pub normalized: Array2<T>,
    pub inv_std: Array1<T>,
    pub batch_mean: Array1<T>,
    pub batch_var: Array1<T>,
}

/// Batch normalization over the batch axis.
///
/// Training mode normalizes by the (biased) batch statistics and folds them
/// into the running statistics with `running = momentum * running + (1 -
/// momentum) * batch`. Inference mode uses the running statistics only.
pub fn batchnorm_forward<T: Float>(
    x: ArrayView2<'_, T>,
    params: BatchNormParams<'_, T>,
    running_mean: &mut Array1<T>,
    running_var: &mut Array1<T>,
    mode: Mode,
) -> Result<(Array2<T>, Option<BatchNormCache<T>>)> {
    let (b, f) = x.dim();
    if params.gamma.len() != f || params.beta.len() != f || running_mean.len() != f {
        return Err(Error::Shape(format!(
            "batch norm over {f} features with {} parameters",
            params.gamma.len()
        )));
    }
    let eps = T::lit(params.epsilon);
    match mode {
        Mode::Infer => {
            let inv_std = running_var.mapv(|v| T::one() / (v + eps).sqrt());
            let y = (&x - &*running_mean) * &inv_std * &params.gamma + &params.beta;
            Ok((y, None))
        }
        Mode::Train => {
            if b < 2 {
                return Err(Error::InvalidArgument(
                    "batch normalization needs at least 2 samples in training mode".into(),
                ));
            }
            let n = T::from_usize(b).unwrap();
            let mean = x.sum_axis(Axis(0)) / n;
            let centered = &x - &mean;
            let var = centered.mapv(|v| v * v).sum_axis(Axis(0)) / n;
            let inv_std = var.mapv(|v| T::one() / (v + eps).sqrt());
            let normalized = &centered * &inv_std;
            let y = &normalized * &params.gamma + &params.beta;

            let m = T::lit(params.momentum);
            let keep = T::one() - m;
            running_mean.zip_mut_with(&mean, |r, &v| *r = m * *r + keep * v);
            running_var.zip_mut_with(&var, |r, &v| *r = m * *r + keep * v);

            Ok((
                y,
                Some(BatchNormCache {
                    normalized,
                    inv_std,
                    batch_mean: mean,
                    batch_var: var,
                }),
            ))
        }
    }
}

/// Returns `(d_gamma, d_beta, dx)`.
pub fn batchnorm_backward<T: Float>(
    cache: &BatchNormCache<T>,
    gamma: ArrayView1<'_, T>,
    dy: ArrayView2<'_, T>,
) -> (Array1<T>, Array1<T>, Array2<T>) {
    let n = T::from_usize(dy.nrows()).unwrap();
    let d_beta = dy.sum_axis(Axis(0));
    let d_gamma = (&dy * &cache.normalized).sum_axis(Axis(0));
    let d_norm = &dy * &gamma;
    let sum_d = d_norm.sum_axis(Axis(0));
    let sum_dx = (&d_norm * &cache.normalized).sum_axis(Axis(0));
    let dx = ((&d_norm * n) - &sum_d - &cache.normalized * &sum_dx) * &(&cache.inv_std / n);
    (d_gamma, d_beta, dx)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Relu,
    Softmax,
}

#[derive(Debug, Clone)]
pub struct DenseCache<T> {
    pub pre_activation: Array2<T>,
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows<T: Float>(z: ArrayView2<'_, T>) -> Array2<T> {
    let mut out = z.to_owned();
    for mut row in out.rows_mut() {
        let max = row.fold(T::neg_infinity(), |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

/// `activation(x W^T + b)`.
pub fn dense_forward<T: Float>(
    x: ArrayView2<'_, T>,
    w: ArrayView2<'_, T>,
    b: ArrayView1<'_, T>,
    activation: Activation,
) -> Result<(Array2<T>, DenseCache<T>)> {
    if x.ncols() != w.ncols() || w.nrows() != b.len() {
        return Err(Error::Shape(format!(
            "dense layer {}x{} cannot take {} inputs",
            w.nrows(),
            w.ncols(),
            x.ncols()
        )));
    }
    let pre = matmul(x, w.t()) + &b;
    let out = match activation {
        Activation::Identity => pre.clone(),
        Activation::Relu => pre.mapv(|v| v.max(T::zero())),
        Activation::Softmax => softmax_rows(pre.view()),
    };
    Ok((
        out,
        DenseCache {
            pre_activation: pre,
        },
    ))
}

/// Backward through an identity or ReLU dense layer. Returns `(dW, db, dx)`.
///
/// Softmax outputs are handled by [`softmax_xent_backward`], which yields the
/// gradient on the pre-activation directly; pass it here with
/// `Activation::Identity`.
pub fn dense_backward<T: Float>(
    x: ArrayView2<'_, T>,
    w: ArrayView2<'_, T>,
    cache: &DenseCache<T>,
    activation: Activation,
    d_out: ArrayView2<'_, T>,
) -> Result<(Array2<T>, Array1<T>, Array2<T>)> {
    let d_pre = match activation {
        Activation::Identity => d_out.to_owned(),
        Activation::Relu => {
            let mut d = d_out.to_owned();
            d.zip_mut_with(&cache.pre_activation, |g, &z| {
                if z <= T::zero() {
                    *g = T::zero()
                }
            });
            d
        }
        Activation::Softmax => {
            return Err(Error::InvalidArgument(
                "softmax layers are differentiated through the fused cross-entropy".into(),
            ))
        }
    };
    Ok((
        matmul(d_pre.t(), x),
        d_pre.sum_axis(Axis(0)),
        matmul(d_pre.view(), w),
    ))
}

const PROB_FLOOR: f64 = 1e-12;

fn check_labels(labels: &[usize], rows: usize, classes: usize) -> Result<()> {
    if labels.len() != rows {
        return Err(Error::Shape(format!(
            "{} labels for {rows} predictions",
            labels.len()
        )));
    }
    if let Some(&l) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::InvalidArgument(format!(
            "label {l} out of range for {classes} classes"
        )));
    }
    Ok(())
}

/// Weighted sparse categorical cross-entropy, `(1/B) sum_i w_i * -ln p[i, y_i]`,
/// with probabilities floored at `1e-12`. The normalizer is the batch size,
/// not the weight total.
pub fn loss_forward<T: Float>(
    probs: ArrayView2<'_, T>,
    labels: &[usize],
    sample_weights: &[T],
) -> Result<T> {
    check_labels(labels, probs.nrows(), probs.ncols())?;
    if sample_weights.len() != labels.len() {
        return Err(Error::Shape("one weight per sample is required".into()));
    }
    if labels.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let floor = T::lit(PROB_FLOOR);
    let total: T = labels
        .iter()
        .zip(sample_weights)
        .enumerate()
        .map(|(i, (&y, &w))| -w * probs[[i, y]].max(floor).ln())
        .sum();
    Ok(total / T::from_usize(labels.len()).unwrap())
}

/// Gradient of [`loss_forward`] with respect to the softmax logits:
/// `w_i / B * (p_i - onehot(y_i))`.
pub fn softmax_xent_backward<T: Float>(
    probs: ArrayView2<'_, T>,
    labels: &[usize],
    sample_weights: &[T],
) -> Result<Array2<T>> {
    check_labels(labels, probs.nrows(), probs.ncols())?;
    if sample_weights.len() != labels.len() {
        return Err(Error::Shape("one weight per sample is required".into()));
    }
    let n = T::from_usize(labels.len()).unwrap();
    let mut d = probs.to_owned();
    for (i, mut row) in d.rows_mut().into_iter().enumerate() {
        row[labels[i]] -= T::one();
        let scale = sample_weights[i] / n;
        row.mapv_inplace(|v| v * scale);
    }
    Ok(d)
}
