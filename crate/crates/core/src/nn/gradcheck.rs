//! Central finite-difference checks of every analytic backward pass, in `f64`.
//!
//! Each check draws random inputs and parameters for the given shape, forms a
//! scalar loss (a fixed random projection of the layer output, or the network
//! loss itself) and compares every analytic partial derivative against
//! `(f(v + h) - f(v - h)) / 2h`.

use ndarray::{Array1, Array2, Array3};

use super::layers::{
    batchnorm_backward, batchnorm_forward, dense_backward, dense_forward, dropout_backward,
    loss_forward, softmax_rows, softmax_xent_backward, Activation, BatchNormParams, DropoutMask,
};
use super::lstm::{bilstm_backward, bilstm_forward, lstm_backward, lstm_forward, Direction};
use super::network::backward;
use super::params::{init_params, LstmParams};
use super::{Mode, ModelConfig};
use crate::error::Result;
use crate::rng::SplitMix64;

pub const DEFAULT_STEP: f64 = 1e-5;

/// Gradients smaller than this are compared in absolute terms.
pub const ERROR_FLOOR: f64 = 1e-6;

/// `|a - n| / max(|a|, |n|, ERROR_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(ERROR_FLOOR)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CheckShape {
    pub batch: usize,
    pub len: usize,
    pub input_dim: usize,
    pub hidden: usize,
    pub classes: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerReport {
    pub layer: &'static str,
    pub max_relative_error: f64,
    /// Partial derivatives compared.
    pub checked: usize,
}

#[derive(Default)]
struct Tally {
    worst: f64,
    checked: usize,
}

impl Tally {
    fn add(&mut self, analytic: &[f64], numeric: &[f64]) {
        for (&a, &n) in analytic.iter().zip(numeric) {
            self.worst = self.worst.max(relative_error(a, n));
            self.checked += 1;
        }
    }

    fn report(self, layer: &'static str) -> LayerReport {
        LayerReport {
            layer,
            max_relative_error: self.worst,
            checked: self.checked,
        }
    }
}

/// Central differences of `f` with respect to each value exposed by `slot`.
fn numeric<S: Clone>(
    state: &S,
    slot: impl Fn(&mut S) -> &mut [f64],
    f: impl Fn(&S) -> f64,
    step: f64,
) -> Vec<f64> {
    let mut probe = state.clone();
    let n = slot(&mut probe).len();
    (0..n)
        .map(|i| {
            let orig = slot(&mut probe)[i];
            slot(&mut probe)[i] = orig + step;
            let plus = f(&probe);
            slot(&mut probe)[i] = orig - step;
            let minus = f(&probe);
            slot(&mut probe)[i] = orig;
            (plus - minus) / (2.0 * step)
        })
        .collect()
}

fn random2(rng: &mut SplitMix64, shape: (usize, usize), scale: f64) -> Array2<f64> {
    Array2::from_shape_simple_fn(shape, || rng.uniform(-scale, scale))
}

fn random3(rng: &mut SplitMix64, shape: (usize, usize, usize), scale: f64) -> Array3<f64> {
    Array3::from_shape_simple_fn(shape, || rng.uniform(-scale, scale))
}

fn random1(rng: &mut SplitMix64, n: usize, scale: f64) -> Array1<f64> {
    Array1::from_shape_simple_fn(n, || rng.uniform(-scale, scale))
}

fn random_lstm(rng: &mut SplitMix64, d: usize, h: usize) -> LstmParams<f64> {
    LstmParams {
        w_ih: random2(rng, (4 * h, d), 0.6),
        w_hh: random2(rng, (4 * h, h), 0.6),
        bias: random1(rng, 4 * h, 0.5),
    }
}

#[derive(Clone)]
struct LstmState {
    x: Array3<f64>,
    p: LstmParams<f64>,
}

fn lstm_slots() -> [(fn(&mut LstmState) -> &mut [f64], usize); 4] {
    [
        (|s| s.p.w_ih.as_slice_mut().unwrap(), 0),
        (|s| s.p.w_hh.as_slice_mut().unwrap(), 1),
        (|s| s.p.bias.as_slice_mut().unwrap(), 2),
        (|s| s.x.as_slice_mut().unwrap(), 3),
    ]
}

/// One LSTM direction, loss = `sum(R * h_final)`.
pub fn check_lstm(
    shape: CheckShape,
    direction: Direction,
    seed: u64,
    step: f64,
) -> Result<LayerReport> {
    let mut rng = SplitMix64::new(seed);
    let state = LstmState {
        x: random3(&mut rng, (shape.batch, shape.len, shape.input_dim), 1.0),
        p: random_lstm(&mut rng, shape.input_dim, shape.hidden),
    };
    let r = random2(&mut rng, (shape.batch, shape.hidden), 1.0);
    let (_, cache) = lstm_forward(state.x.view(), &state.p, direction)?;
    let (g, dx) = lstm_backward(&cache, &state.p, r.view())?;
    let loss = |s: &LstmState| {
        let (h, _) = lstm_forward(s.x.view(), &s.p, direction).unwrap();
        (&h * &r).sum()
    };
    let analytic: [Vec<f64>; 4] = [
        g.w_ih.iter().copied().collect(),
        g.w_hh.iter().copied().collect(),
        g.bias.iter().copied().collect(),
        dx.iter().copied().collect(),
    ];
    let mut tally = Tally::default();
    for (slot, k) in lstm_slots() {
        tally.add(&analytic[k], &numeric(&state, slot, loss, step));
    }
    Ok(tally.report(match direction {
        Direction::Forward => "lstm_forward_direction",
        Direction::Backward => "lstm_backward_direction",
    }))
}

/// Both directions with concatenated outputs, loss = `sum(R * [h_f | h_b])`.
pub fn check_bilstm(shape: CheckShape, seed: u64, step: f64) -> Result<LayerReport> {
    #[derive(Clone)]
    struct S {
        x: Array3<f64>,
        f: LstmParams<f64>,
        b: LstmParams<f64>,
    }
    let mut rng = SplitMix64::new(seed);
    let state = S {
        x: random3(&mut rng, (shape.batch, shape.len, shape.input_dim), 1.0),
        f: random_lstm(&mut rng, shape.input_dim, shape.hidden),
        b: random_lstm(&mut rng, shape.input_dim, shape.hidden),
    };
    let r = random2(&mut rng, (shape.batch, 2 * shape.hidden), 1.0);
    let (_, cache) = bilstm_forward(state.x.view(), &state.f, &state.b)?;
    let (gf, gb, dx) = bilstm_backward(&cache, &state.f, &state.b, r.view())?;
    let loss = |s: &S| {
        let (h, _) = bilstm_forward(s.x.view(), &s.f, &s.b).unwrap();
        (&h * &r).sum()
    };
    let slots: [(fn(&mut S) -> &mut [f64], Vec<f64>); 7] = [
        (
            |s| s.f.w_ih.as_slice_mut().unwrap(),
            gf.w_ih.iter().copied().collect(),
        ),
        (
            |s| s.f.w_hh.as_slice_mut().unwrap(),
            gf.w_hh.iter().copied().collect(),
        ),
        (|s| s.f.bias.as_slice_mut().unwrap(), gf.bias.to_vec()),
        (
            |s| s.b.w_ih.as_slice_mut().unwrap(),
            gb.w_ih.iter().copied().collect(),
        ),
        (
            |s| s.b.w_hh.as_slice_mut().unwrap(),
            gb.w_hh.iter().copied().collect(),
        ),
        (|s| s.b.bias.as_slice_mut().unwrap(), gb.bias.to_vec()),
        (
            |s| s.x.as_slice_mut().unwrap(),
            dx.iter().copied().collect(),
        ),
    ];
    let mut tally = Tally::default();
    for (slot, analytic) in slots {
        tally.add(&analytic, &numeric(&state, slot, loss, step));
    }
    Ok(tally.report("bilstm_concat"))
}

/// Inverted dropout with a fixed mask, loss = `sum(R * y)`.
pub fn check_dropout(shape: CheckShape, rate: f64, seed: u64, step: f64) -> Result<LayerReport> {
    let mut rng = SplitMix64::new(seed);
    let f = 2 * shape.hidden;
    let x = random2(&mut rng, (shape.batch, f), 1.0);
    let r = random2(&mut rng, (shape.batch, f), 1.0);
    let mask = DropoutMask::<f64>::sample((shape.batch, f), rate, rng.next_u64())?;
    let dx = dropout_backward(&mask, r.view());
    let loss = |x: &Array2<f64>| (&(x * &mask.0) * &r).sum();
    let mut tally = Tally::default();
    tally.add(
        &dx.iter().copied().collect::<Vec<_>>(),
        &numeric(&x, |x| x.as_slice_mut().unwrap(), loss, step),
    );
    Ok(tally.report("dropout"))
}

/// Training-mode batch normalization, loss = `sum(R * y)`.
pub fn check_batchnorm(shape: CheckShape, seed: u64, step: f64) -> Result<LayerReport> {
    #[derive(Clone)]
    struct S {
        x: Array2<f64>,
        gamma: Array1<f64>,
        beta: Array1<f64>,
    }
    let mut rng = SplitMix64::new(seed);
    let f = 2 * shape.hidden;
    let state = S {
        x: random2(&mut rng, (shape.batch, f), 1.0),
        gamma: random1(&mut rng, f, 1.0) + 1.0,
        beta: random1(&mut rng, f, 0.5),
    };
    let r = random2(&mut rng, (shape.batch, f), 1.0);
    let forward = |s: &S| {
        let (mut rm, mut rv) = (Array1::zeros(f), Array1::ones(f));
        let params = BatchNormParams {
            gamma: s.gamma.view(),
            beta: s.beta.view(),
            epsilon: 1e-3,
            momentum: 0.99,
        };
        batchnorm_forward(s.x.view(), params, &mut rm, &mut rv, Mode::Train).unwrap()
    };
    let (_, cache) = forward(&state);
    let (dg, db, dx) = batchnorm_backward(&cache.unwrap(), state.gamma.view(), r.view());
    let loss = |s: &S| (&forward(s).0 * &r).sum();
    let slots: [(fn(&mut S) -> &mut [f64], Vec<f64>); 3] = [
        (|s| s.gamma.as_slice_mut().unwrap(), dg.to_vec()),
        (|s| s.beta.as_slice_mut().unwrap(), db.to_vec()),
        (
            |s| s.x.as_slice_mut().unwrap(),
            dx.iter().copied().collect(),
        ),
    ];
    let mut tally = Tally::default();
    for (slot, analytic) in slots {
        tally.add(&analytic, &numeric(&state, slot, loss, step));
    }
    Ok(tally.report("batchnorm"))
}

/// Dense layer with identity or ReLU activation, loss = `sum(R * y)`.
pub fn check_dense(
    shape: CheckShape,
    activation: Activation,
    seed: u64,
    step: f64,
) -> Result<LayerReport> {
    #[derive(Clone)]
    struct S {
        x: Array2<f64>,
        w: Array2<f64>,
        b: Array1<f64>,
    }
    let mut rng = SplitMix64::new(seed);
    let (fin, fout) = (2 * shape.hidden, shape.hidden + 1);
    let state = S {
        x: random2(&mut rng, (shape.batch, fin), 1.0),
        w: random2(&mut rng, (fout, fin), 0.8),
        b: random1(&mut rng, fout, 0.3),
    };
    let r = random2(&mut rng, (shape.batch, fout), 1.0);
    let (_, cache) = dense_forward(state.x.view(), state.w.view(), state.b.view(), activation)?;
    let (dw, db, dx) =
        dense_backward(state.x.view(), state.w.view(), &cache, activation, r.view())?;
    let loss = |s: &S| {
        let (y, _) = dense_forward(s.x.view(), s.w.view(), s.b.view(), activation).unwrap();
        (&y * &r).sum()
    };
    let slots: [(fn(&mut S) -> &mut [f64], Vec<f64>); 3] = [
        (
            |s| s.w.as_slice_mut().unwrap(),
            dw.iter().copied().collect(),
        ),
        (|s| s.b.as_slice_mut().unwrap(), db.to_vec()),
        (
            |s| s.x.as_slice_mut().unwrap(),
            dx.iter().copied().collect(),
        ),
    ];
    let mut tally = Tally::default();
    for (slot, analytic) in slots {
        tally.add(&analytic, &numeric(&state, slot, loss, step));
    }
    Ok(tally.report(match activation {
        Activation::Relu => "dense_relu",
        _ => "dense_identity",
    }))
}

/// Weighted cross-entropy of softmax(z) with respect to the logits `z`.
pub fn check_softmax_xent(shape: CheckShape, seed: u64, step: f64) -> Result<LayerReport> {
    let mut rng = SplitMix64::new(seed);
    let c = shape.classes;
    let z = random2(&mut rng, (shape.batch, c), 2.0);
    let labels: Vec<usize> = (0..shape.batch)
        .map(|_| rng.below(c as u64) as usize)
        .collect();
    let w: Vec<f64> = (0..shape.batch).map(|_| rng.uniform(0.2, 3.0)).collect();
    let dz = softmax_xent_backward(softmax_rows(z.view()).view(), &labels, &w)?;
    let loss = |z: &Array2<f64>| loss_forward(softmax_rows(z.view()).view(), &labels, &w).unwrap();
    let mut tally = Tally::default();
    tally.add(
        &dz.iter().copied().collect::<Vec<_>>(),
        &numeric(&z, |z| z.as_slice_mut().unwrap(), loss, step),
    );
    Ok(tally.report("softmax_cross_entropy"))
}

/// The whole classifier in training mode with a fixed dropout mask: every
/// trainable tensor against the weighted loss.
pub fn check_network(shape: CheckShape, seed: u64, step: f64) -> Result<LayerReport> {
    let config = ModelConfig {
        seq_len: shape.len,
        input_dim: shape.input_dim,
        hidden_per_dir: shape.hidden,
        dense_units: shape.hidden + 1,
        ..ModelConfig::new(shape.classes)
    };
    let mut rng = SplitMix64::new(seed);
    let mut model = init_params::<f64>(&config, rng.next_u64())?;
    for (_, t) in model.weights.tensors_mut() {
        for v in t.iter_mut() {
            *v += rng.uniform(-0.3, 0.3);
        }
    }
    let x = random3(&mut rng, (shape.batch, shape.len, shape.input_dim), 1.0);
    let labels: Vec<usize> = (0..shape.batch)
        .map(|_| rng.below(shape.classes as u64) as usize)
        .collect();
    let w: Vec<f64> = (0..shape.batch).map(|_| rng.uniform(0.2, 3.0)).collect();
    let dropout_seed = rng.next_u64();

    let cache = model.clone().forward_train(x.view(), dropout_seed)?;
    let grads = backward(&model, &cache, &labels, &w)?;
    let loss = |m: &super::Model<f64>| {
        let cache = m.clone().forward_train(x.view(), dropout_seed).unwrap();
        loss_forward(cache.probs.view(), &labels, &w).unwrap()
    };
    let mut tally = Tally::default();
    let tensors = grads.tensors().len();
    for k in 0..tensors {
        let analytic = grads.tensors()[k].1.to_vec();
        let num = numeric(
            &model,
            |m| m.weights.tensors_mut().swap_remove(k).1,
            loss,
            step,
        );
        tally.add(&analytic, &num);
    }
    Ok(tally.report("network"))
}

/// Every check above for one shape.
pub fn check_all(shape: CheckShape, seed: u64, step: f64) -> Result<Vec<LayerReport>> {
    Ok(vec![
        check_lstm(shape, Direction::Forward, seed, step)?,
        check_lstm(shape, Direction::Backward, seed ^ 1, step)?,
        check_bilstm(shape, seed ^ 2, step)?,
        check_dropout(shape, 0.2, seed ^ 3, step)?,
        check_batchnorm(shape, seed ^ 4, step)?,
        check_dense(shape, Activation::Identity, seed ^ 5, step)?,
        check_dense(shape, Activation::Relu, seed ^ 6, step)?,
        check_softmax_xent(shape, seed ^ 7, step)?,
        check_network(shape, seed ^ 8, step)?,
    ])
}
