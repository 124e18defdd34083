//! Fused GRU recurrence with hand-written backpropagation through time.
//!
//! Gate layout along the `3H` axis is `[update | reset | candidate]`:
//!
//! ```text
//! z  = sigmoid(xz + h W_hz + b_hz)
//! r  = sigmoid(xr + h W_hr + b_hr)
//! n  = tanh(xn + r * (h W_hn + b_hn))
//! h' = (1 - z) * n + z * h
//! ```

use super::tape::sigmoid_scalar;
use super::tensor::{gemm, gemm_slices, GemmArg};
use super::Tensor;

/// Per-step activations saved for the backward pass, each `L x H` and
/// indexed by processing step (not by input row).
#[derive(Debug)]
pub(crate) struct GruCache {
    hidden: usize,
    z: Vec<f64>,
    r: Vec<f64>,
    n: Vec<f64>,
    /// `h W_hn + b_hn` before the reset gate is applied.
    hn: Vec<f64>,
    h_prev: Vec<f64>,
}

fn row_of(step: usize, len: usize, reverse: bool) -> usize {
    if reverse {
        len - 1 - step
    } else {
        step
    }
}

pub(crate) fn gru_forward(xproj: &Tensor, w_h: &Tensor, b_h: &Tensor, reverse: bool) -> (Tensor, GruCache) {
    let len = xproj.rows();
    let h = w_h.rows();
    let w = w_h.data();
    let b = b_h.data();
    let mut states = Tensor::zeros(len, h);
    let mut cache = GruCache {
        hidden: h,
        z: vec![0.0; len * h],
        r: vec![0.0; len * h],
        n: vec![0.0; len * h],
        hn: vec![0.0; len * h],
        h_prev: vec![0.0; len * h],
    };
    let mut prev = vec![0.0; h];
    let mut gh = vec![0.0; 3 * h];
    for step in 0..len {
        let row = row_of(step, len, reverse);
        let x = xproj.row_slice(row);
        gh.copy_from_slice(b);
        for (k, &hk) in prev.iter().enumerate() {
            if hk != 0.0 {
                for (acc, wv) in gh.iter_mut().zip(&w[k * 3 * h..(k + 1) * 3 * h]) {
                    *acc += hk * wv;
                }
            }
        }
        let base = step * h;
        let out = &mut states.data_mut()[row * h..(row + 1) * h];
        for j in 0..h {
            let z = sigmoid_scalar(x[j] + gh[j]);
            let r = sigmoid_scalar(x[h + j] + gh[h + j]);
            let hn = gh[2 * h + j];
            let n = (x[2 * h + j] + r * hn).tanh();
            let next = (1.0 - z) * n + z * prev[j];
            cache.z[base + j] = z;
            cache.r[base + j] = r;
            cache.n[base + j] = n;
            cache.hn[base + j] = hn;
            cache.h_prev[base + j] = prev[j];
            out[j] = next;
        }
        prev.copy_from_slice(out);
    }
    (states, cache)
}

/// Returns gradients for `(xproj, w_h, b_h)` given the upstream gradient of
/// all hidden states.
pub(crate) fn gru_backward(w_h: &Tensor, cache: &GruCache, d_states: &Tensor, reverse: bool) -> (Tensor, Tensor, Tensor) {
    let h = cache.hidden;
    let len = d_states.rows();
    let w = w_h.data();
    let mut dx = Tensor::zeros(len, 3 * h);
    // Gradients of the hidden-path pre-activations, one row per step.
    let mut dgh = Tensor::zeros(len, 3 * h);
    let mut carry = vec![0.0; h];
    for step in (0..len).rev() {
        let row = row_of(step, len, reverse);
        let base = step * h;
        let up = d_states.row_slice(row);
        let mut dprev = vec![0.0; h];
        {
            let gx = &mut dx.data_mut()[row * 3 * h..(row + 1) * 3 * h];
            let gg = &mut dgh.data_mut()[step * 3 * h..(step + 1) * 3 * h];
            for j in 0..h {
                let dh = up[j] + carry[j];
                let (z, r, n, hn, hp) = (
                    cache.z[base + j],
                    cache.r[base + j],
                    cache.n[base + j],
                    cache.hn[base + j],
                    cache.h_prev[base + j],
                );
                let dn = dh * (1.0 - z) * (1.0 - n * n);
                let dz = dh * (hp - n) * z * (1.0 - z);
                let dr = dn * hn * r * (1.0 - r);
                dprev[j] = dh * z;
                gx[j] = dz;
                gx[h + j] = dr;
                gx[2 * h + j] = dn;
                gg[j] = dz;
                gg[h + j] = dr;
                gg[2 * h + j] = dn * r;
            }
        }
        let gg = dgh.row_slice(step);
        for (k, dp) in dprev.iter_mut().enumerate() {
            let wr = &w[k * 3 * h..(k + 1) * 3 * h];
            *dp += wr.iter().zip(gg).map(|(a, b)| a * b).sum::<f64>();
        }
        carry = dprev;
    }
    let h_prev = Tensor::matrix(len, h, cache.h_prev.clone()).expect("cache shape");
    let mut dw = Tensor::zeros(h, 3 * h);
    gemm(GemmArg::t(&h_prev), GemmArg::plain(&dgh), &mut dw, 0.0);
    let mut db = vec![0.0; 3 * h];
    for step in 0..len {
        for (a, b) in db.iter_mut().zip(dgh.row_slice(step)) {
            *a += b;
        }
    }
    (dx, dw, Tensor::row(&db))
}

/// Cache of [`gru_batch_forward`]. Sequences are processed in order of
/// decreasing length so the rows still running at any step form a prefix.
#[derive(Debug)]
pub(crate) struct GruBatchCache {
    hidden: usize,
    /// Sequence index at each sorted position.
    order: Vec<usize>,
    offsets: Vec<usize>,
    lengths: Vec<usize>,
    /// Number of running sequences per step.
    active: Vec<usize>,
    /// First cache row of each step.
    step_base: Vec<usize>,
    z: Vec<f64>,
    r: Vec<f64>,
    n: Vec<f64>,
    hn: Vec<f64>,
    h_prev: Vec<f64>,
}

impl GruBatchCache {
    fn input_row(&self, pos: usize, step: usize, reverse: bool) -> usize {
        let k = self.order[pos];
        self.offsets[k] + row_of(step, self.lengths[k], reverse)
    }
}

/// Runs one GRU over several sequences stored back to back in `xproj` and
/// returns the final state of each, `B x H` in input order.
pub(crate) fn gru_batch_forward(
    xproj: &Tensor,
    lengths: &[usize],
    w_h: &Tensor,
    b_h: &Tensor,
    reverse: bool,
) -> (Tensor, GruBatchCache) {
    let h = w_h.rows();
    let count = lengths.len();
    let mut offsets = Vec::with_capacity(count);
    let mut total = 0;
    for &l in lengths {
        offsets.push(total);
        total += l;
    }
    let mut order: Vec<usize> = (0..count).collect();
    order.sort_by(|&a, &b| lengths[b].cmp(&lengths[a]));
    let max_len = lengths.iter().copied().max().unwrap_or(0);
    let active: Vec<usize> = (0..max_len)
        .map(|t| order.iter().take_while(|&&k| lengths[k] > t).count())
        .collect();
    let mut step_base = Vec::with_capacity(max_len);
    let mut acc = 0;
    for &a in &active {
        step_base.push(acc);
        acc += a;
    }
    let mut cache = GruBatchCache {
        hidden: h,
        order,
        offsets,
        lengths: lengths.to_vec(),
        active,
        step_base,
        z: vec![0.0; total * h],
        r: vec![0.0; total * h],
        n: vec![0.0; total * h],
        hn: vec![0.0; total * h],
        h_prev: vec![0.0; total * h],
    };
    let mut last = Tensor::zeros(count, h);
    let mut state = vec![0.0; count * h];
    let mut gh = vec![0.0; count * 3 * h];
    for step in 0..max_len {
        let a = cache.active[step];
        for row in gh[..a * 3 * h].chunks_exact_mut(3 * h) {
            row.copy_from_slice(b_h.data());
        }
        gemm_slices((a, h, 3 * h), &state, false, w_h.data(), false, &mut gh, 1.0);
        let base = cache.step_base[step] * h;
        cache.h_prev[base..base + a * h].copy_from_slice(&state[..a * h]);
        for pos in 0..a {
            let x = xproj.row_slice(cache.input_row(pos, step, reverse));
            let g = &gh[pos * 3 * h..(pos + 1) * 3 * h];
            let c = base + pos * h;
            for j in 0..h {
                let z = sigmoid_scalar(x[j] + g[j]);
                let r = sigmoid_scalar(x[h + j] + g[h + j]);
                let hn = g[2 * h + j];
                let n = (x[2 * h + j] + r * hn).tanh();
                let prev = state[pos * h + j];
                cache.z[c + j] = z;
                cache.r[c + j] = r;
                cache.n[c + j] = n;
                cache.hn[c + j] = hn;
                state[pos * h + j] = (1.0 - z) * n + z * prev;
            }
            let k = cache.order[pos];
            if cache.lengths[k] == step + 1 {
                last.data_mut()[k * h..(k + 1) * h].copy_from_slice(&state[pos * h..(pos + 1) * h]);
            }
        }
    }
    (last, cache)
}

/// Gradients for `(xproj, w_h, b_h)` given the upstream gradient of the
/// final states returned by [`gru_batch_forward`].
pub(crate) fn gru_batch_backward(
    w_h: &Tensor,
    cache: &GruBatchCache,
    d_last: &Tensor,
    total_rows: usize,
    reverse: bool,
) -> (Tensor, Tensor, Tensor) {
    let h = cache.hidden;
    let count = cache.order.len();
    let rows: usize = cache.active.iter().sum();
    let mut dx = Tensor::zeros(total_rows, 3 * h);
    let mut dgh = vec![0.0; rows * 3 * h];
    let mut dh = vec![0.0; count * h];
    for step in (0..cache.active.len()).rev() {
        let a = cache.active[step];
        let base = cache.step_base[step];
        for pos in 0..a {
            let k = cache.order[pos];
            if cache.lengths[k] == step + 1 {
                for (d, u) in dh[pos * h..(pos + 1) * h].iter_mut().zip(d_last.row_slice(k)) {
                    *d += u;
                }
            }
            let row = cache.input_row(pos, step, reverse);
            let gx = &mut dx.data_mut()[row * 3 * h..(row + 1) * 3 * h];
            let gg = &mut dgh[(base + pos) * 3 * h..(base + pos + 1) * 3 * h];
            let c = (base + pos) * h;
            for j in 0..h {
                let d = dh[pos * h + j];
                let (z, r, n, hn, hp) = (cache.z[c + j], cache.r[c + j], cache.n[c + j], cache.hn[c + j], cache.h_prev[c + j]);
                let dn = d * (1.0 - z) * (1.0 - n * n);
                let dz = d * (hp - n) * z * (1.0 - z);
                let dr = dn * hn * r * (1.0 - r);
                dh[pos * h + j] = d * z;
                gx[j] = dz;
                gx[h + j] = dr;
                gx[2 * h + j] = dn;
                gg[j] = dz;
                gg[h + j] = dr;
                gg[2 * h + j] = dn * r;
            }
        }
        let gg = &dgh[base * 3 * h..(base + a) * 3 * h];
        gemm_slices((a, 3 * h, h), gg, false, w_h.data(), true, &mut dh, 1.0);
    }
    let mut dw = Tensor::zeros(h, 3 * h);
    gemm_slices((h, rows, 3 * h), &cache.h_prev, true, &dgh, false, dw.data_mut(), 0.0);
    let mut db = vec![0.0; 3 * h];
    for row in dgh.chunks_exact(3 * h) {
        for (a, b) in db.iter_mut().zip(row) {
            *a += b;
        }
    }
    (dx, dw, Tensor::row(&db))
}
