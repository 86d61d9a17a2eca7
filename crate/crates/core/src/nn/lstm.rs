//! LSTM recurrence and its backward pass through time.
//!
//! Buffers are time-major in *processing* order: block `s` (rows
//! `s*B..(s+1)*B`) belongs to the `s`-th consumed step, which is time index
//! `s` for the forward direction and `L-1-s` for the backward direction.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array2, Array3, ArrayView2, ArrayView3, Axis};

use super::params::LstmParams;
use super::{matmul, sigmoid, Float};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Backward,
}

impl Direction {
    #[inline]
    fn time(self, step: usize, len: usize) -> usize {
        match self {
            Direction::Forward => step,
            Direction::Backward => len - 1 - step,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LstmCache<T> {
    direction: Direction,
    batch: usize,
    len: usize,
    /// `L*B x D` inputs in processing order.
    inputs: Array2<T>,
    /// `L*B x 4H` activated gates `i, f, g, o`.
    gates: Array2<T>,
    /// `(L+1)*B x H`, block 0 is the zero initial state.
    hidden: Array2<T>,
    /// `(L+1)*B x H`, block 0 is the zero initial state.
    cell: Array2<T>,
}

impl<T: Float> LstmCache<T> {
    pub fn direction(&self) -> Direction {
        self.direction
    }

    /// Hidden state after the final consumed step (`B x H`).
    pub fn final_hidden(&self) -> ArrayView2<'_, T> {
        self.hidden.slice(s![self.len * self.batch.., ..])
    }
}

fn check_input<T: Float>(x: &ArrayView3<'_, T>, p: &LstmParams<T>) -> Result<()> {
    let (b, l, d) = x.dim();
    if d != p.input_dim() {
        return Err(Error::Shape(format!(
            "LSTM expects {} input channels, got {d}",
            p.input_dim()
        )));
    }
    if b == 0 || l == 0 {
        return Err(Error::Shape("LSTM input must be non-empty".into()));
    }
    let h = p.hidden();
    if p.w_ih.nrows() != 4 * h || p.w_hh.nrows() != 4 * h || p.bias.len() != 4 * h {
        return Err(Error::Shape("inconsistent LSTM parameter shapes".into()));
    }
    Ok(())
}

/// Runs one direction over `x` (`B x L x D`) and returns the hidden state after
/// the last consumed step.
pub fn lstm_forward<T: Float>(
    x: ArrayView3<'_, T>,
    p: &LstmParams<T>,
    direction: Direction,
) -> Result<(Array2<T>, LstmCache<T>)> {
    check_input(&x, p)?;
    let (b, l, d) = x.dim();
    let h = p.hidden();

    let mut inputs = Array2::zeros((l * b, d));
    for step in 0..l {
        let t = direction.time(step, l);
        inputs
            .slice_mut(s![step * b..(step + 1) * b, ..])
            .assign(&x.slice(s![.., t, ..]));
    }

    // Input projections for every step in one product; bias folded in.
    let mut gates = matmul(inputs.view(), p.w_ih.t());
    gates += &p.bias;

    let mut hidden = Array2::zeros(((l + 1) * b, h));
    let mut cell = Array2::zeros(((l + 1) * b, h));
    let w_hh_t = p.w_hh.t();

    for step in 0..l {
        let rows = step * b..(step + 1) * b;
        let mut g = gates.slice_mut(s![rows.clone(), ..]);
        {
            let h_prev = hidden.slice(s![rows.clone(), ..]);
            general_mat_mul(T::one(), &h_prev, &w_hh_t, T::one(), &mut g);
        }
        let g = g.as_slice_mut().expect("contiguous gate block");
        let (prev_c, next_c) = cell.view_mut().split_at(Axis(0), (step + 1) * b);
        let c_prev = prev_c.slice_move(s![step * b.., ..]);
        let mut c_next = next_c.slice_move(s![..b, ..]);
        let mut h_next = hidden.slice_mut(s![(step + 1) * b..(step + 2) * b, ..]);
        let c_prev = c_prev.as_slice().expect("contiguous");
        let c_next = c_next.as_slice_mut().expect("contiguous");
        let h_next = h_next.as_slice_mut().expect("contiguous");
        for r in 0..b {
            let gr = &mut g[r * 4 * h..(r + 1) * 4 * h];
            for j in 0..h {
                let i = sigmoid(gr[j]);
                let f = sigmoid(gr[h + j]);
                let cand = gr[2 * h + j].act_tanh();
                let o = sigmoid(gr[3 * h + j]);
                gr[j] = i;
                gr[h + j] = f;
                gr[2 * h + j] = cand;
                gr[3 * h + j] = o;
                let c = f * c_prev[r * h + j] + i * cand;
                c_next[r * h + j] = c;
                h_next[r * h + j] = o * c.act_tanh();
            }
        }
    }

    let cache = LstmCache {
        direction,
        batch: b,
        len: l,
        inputs,
        gates,
        hidden,
        cell,
    };
    Ok((cache.final_hidden().to_owned(), cache))
}

/// Backpropagation through time from a gradient on the final hidden state.
/// Returns parameter gradients and the input gradient (`B x L x D`).
pub fn lstm_backward<T: Float>(
    cache: &LstmCache<T>,
    p: &LstmParams<T>,
    d_final: ArrayView2<'_, T>,
) -> Result<(LstmParams<T>, Array3<T>)> {
    let (b, l) = (cache.batch, cache.len);
    let h = p.hidden();
    if d_final.dim() != (b, h) || cache.gates.ncols() != 4 * h {
        return Err(Error::Shape(format!(
            "LSTM backward expects a {b}x{h} gradient for this cache"
        )));
    }

    let mut d_pre = Array2::<T>::zeros((l * b, 4 * h));
    let mut dh = d_final.as_standard_layout().into_owned();
    let mut dc = Array2::<T>::zeros((b, h));
    let one = T::one();

    for step in (0..l).rev() {
        let rows = step * b..(step + 1) * b;
        let gates = cache.gates.slice(s![rows.clone(), ..]);
        let gates = gates.as_slice().expect("contiguous");
        let c_prev = cache.cell.slice(s![rows.clone(), ..]);
        let c_prev = c_prev.as_slice().expect("contiguous");
        let c_cur = cache.cell.slice(s![(step + 1) * b..(step + 2) * b, ..]);
        let c_cur = c_cur.as_slice().expect("contiguous");
        {
            let mut dp = d_pre.slice_mut(s![rows.clone(), ..]);
            let dp = dp.as_slice_mut().expect("contiguous");
            let dh_s = dh.as_slice().expect("contiguous");
            let dc_s = dc.as_slice_mut().expect("contiguous");
            for r in 0..b {
                let gr = &gates[r * 4 * h..(r + 1) * 4 * h];
                let dr = &mut dp[r * 4 * h..(r + 1) * 4 * h];
                for j in 0..h {
                    let k = r * h + j;
                    let (i, f, g, o) = (gr[j], gr[h + j], gr[2 * h + j], gr[3 * h + j]);
                    let tc = c_cur[k].act_tanh();
                    let dhv = dh_s[k];
                    let dcv = dc_s[k] + dhv * o * (one - tc * tc);
                    dr[j] = dcv * g * i * (one - i);
                    dr[h + j] = dcv * c_prev[k] * f * (one - f);
                    dr[2 * h + j] = dcv * i * (one - g * g);
                    dr[3 * h + j] = dhv * tc * o * (one - o);
                    dc_s[k] = dcv * f;
                }
            }
        }
        let dp = d_pre.slice(s![rows, ..]);
        general_mat_mul(one, &dp, &p.w_hh, T::zero(), &mut dh);
    }

    let h_prev = cache.hidden.slice(s![..l * b, ..]);
    let grads = LstmParams {
        w_ih: matmul(d_pre.t(), cache.inputs.view()),
        w_hh: matmul(d_pre.t(), h_prev),
        bias: d_pre.sum_axis(Axis(0)),
    };

    let d_inputs = matmul(d_pre.view(), p.w_ih.view());
    let d = p.input_dim();
    let mut dx = Array3::zeros((b, l, d));
    for step in 0..l {
        let t = cache.direction.time(step, l);
        dx.slice_mut(s![.., t, ..])
            .assign(&d_inputs.slice(s![step * b..(step + 1) * b, ..]));
    }
    Ok((grads, dx))
}

#[derive(Debug, Clone)]
pub struct BiLstmCache<T> {
    pub forward: LstmCache<T>,
    pub backward: LstmCache<T>,
}

/// `[forward final state | backward final state]`, `B x 2H`.
pub fn bilstm_forward<T: Float>(
    x: ArrayView3<'_, T>,
    forward: &LstmParams<T>,
    backward: &LstmParams<T>,
) -> Result<(Array2<T>, BiLstmCache<T>)> {
    if forward.hidden() != backward.hidden() {
        return Err(Error::Shape("direction widths differ".into()));
    }
    let (hf, cf) = lstm_forward(x, forward, Direction::Forward)?;
    let (hb, cb) = lstm_forward(x, backward, Direction::Backward)?;
    let out = ndarray::concatenate(Axis(1), &[hf.view(), hb.view()])
        .map_err(|e| Error::Shape(e.to_string()))?;
    Ok((
        out,
        BiLstmCache {
            forward: cf,
            backward: cb,
        },
    ))
}

pub fn bilstm_backward<T: Float>(
    cache: &BiLstmCache<T>,
    forward: &LstmParams<T>,
    backward: &LstmParams<T>,
    d_out: ArrayView2<'_, T>,
) -> Result<(LstmParams<T>, LstmParams<T>, Array3<T>)> {
    let h = forward.hidden();
    if d_out.ncols() != 2 * h {
        return Err(Error::Shape(format!(
            "BiLSTM backward expects width {}, got {}",
            2 * h,
            d_out.ncols()
        )));
    }
    let (gf, dxf) = lstm_backward(&cache.forward, forward, d_out.slice(s![.., ..h]))?;
    let (gb, dxb) = lstm_backward(&cache.backward, backward, d_out.slice(s![.., h..]))?;
    Ok((gf, gb, dxf + dxb))
}
