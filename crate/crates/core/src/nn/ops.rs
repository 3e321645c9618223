//! Differentiable operations recorded on a [`Graph`].
//!
//! Sequence tensors are `[batch, length, channels]`, row-major.

use super::graph::{Backward, Graph, Var};
use super::linalg::{gemm, MatMut, MatRef};
use super::tensor::Tensor;
use crate::error::{Error, Result};

fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::Shape {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn dims3(t: &Tensor, op: &'static str) -> Result<(usize, usize, usize)> {
    match t.shape() {
        &[b, l, c] => Ok((b, l, c)),
        s => Err(shape_err(op, s, &[0, 0, 0])),
    }
}

// ---------------------------------------------------------------- conv1d

/// Rows `[lo, hi)` of the output that see input row `t + k - pad` in range.
fn conv_span(len: usize, k: usize, pad: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(k);
    let hi = (len + pad).saturating_sub(k).min(len);
    (lo, hi.max(lo))
}

struct Conv1d {
    pad: usize,
}

impl Backward for Conv1d {
    fn backward(&self, inputs: &[&Tensor], _out: &Tensor, grad: &[f64], needs: &[bool]) -> Vec<Option<Vec<f64>>> {
        let (x, w) = (inputs[0], inputs[1]);
        let (b, l, cin) = (x.dim(0), x.dim(1), x.dim(2));
        let (kernel, cout) = (w.dim(0), w.dim(2));
        let mut dx = needs[0].then(|| vec![0.0; x.len()]);
        let mut dw = needs[1].then(|| vec![0.0; w.len()]);
        for bi in 0..b {
            let xb = &x.data()[bi * l * cin..(bi + 1) * l * cin];
            let gb = &grad[bi * l * cout..(bi + 1) * l * cout];
            for k in 0..kernel {
                let (lo, hi) = conv_span(l, k, self.pad);
                if hi == lo {
                    continue;
                }
                let n = hi - lo;
                let src = lo + k - self.pad;
                let g_rows = MatRef::new(&gb[lo * cout..hi * cout], n, cout);
                let wk = &w.data()[k * cin * cout..(k + 1) * cin * cout];
                if let Some(dw) = dw.as_mut() {
                    let x_rows = MatRef::new(&xb[src * cin..(src + n) * cin], n, cin);
                    gemm(1.0, x_rows.t(), g_rows, 1.0, MatMut::new(&mut dw[k * cin * cout..(k + 1) * cin * cout], cin, cout));
                }
                if let Some(dx) = dx.as_mut() {
                    let dxb = &mut dx[bi * l * cin..(bi + 1) * l * cin];
                    gemm(1.0, g_rows, MatRef::new(wk, cin, cout).t(), 1.0, MatMut::new(&mut dxb[src * cin..(src + n) * cin], n, cin));
                }
            }
        }
        let db = needs[2].then(|| {
            let mut db = vec![0.0; cout];
            for row in grad.chunks_exact(cout) {
                db.iter_mut().zip(row).for_each(|(a, g)| *a += g);
            }
            db
        });
        vec![dx, dw, db]
    }
}

// ---------------------------------------------------------------- max pool

struct MaxPool {
    argmax: Vec<u32>,
}

impl Backward for MaxPool {
    fn backward(&self, inputs: &[&Tensor], out: &Tensor, grad: &[f64], _needs: &[bool]) -> Vec<Option<Vec<f64>>> {
        let x = inputs[0];
        let (l, c) = (x.dim(1), x.dim(2));
        let (b, lo) = (out.dim(0), out.dim(1));
        let mut dx = vec![0.0; x.len()];
        for bi in 0..b {
            for t in 0..lo {
                for ch in 0..c {
                    let o = (bi * lo + t) * c + ch;
                    let src = self.argmax[o] as usize;
                    dx[(bi * l + src) * c + ch] += grad[o];
                }
            }
        }
        vec![Some(dx)]
    }
}

/// Output length of a valid max-pool.
pub fn pooled_len(len: usize, size: usize, stride: usize) -> Option<usize> {
    (len >= size && size > 0 && stride > 0).then(|| (len - size) / stride + 1)
}

// ---------------------------------------------------------------- batch norm

/// Per-channel statistics of one training batch.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

struct BatchNormTrain {
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
}

impl Backward for BatchNormTrain {
    fn backward(&self, inputs: &[&Tensor], _out: &Tensor, grad: &[f64], _needs: &[bool]) -> Vec<Option<Vec<f64>>> {
        let gamma = inputs[1].data();
        let c = gamma.len();
        let n = (grad.len() / c) as f64;
        let mut dgamma = vec![0.0; c];
        let mut dbeta = vec![0.0; c];
        for (g, xh) in grad.chunks_exact(c).zip(self.xhat.chunks_exact(c)) {
            for ch in 0..c {
                dbeta[ch] += g[ch];
                dgamma[ch] += g[ch] * xh[ch];
            }
        }
        // dx = gamma * inv_std / n * (n * dy - sum(dy) - xhat * sum(dy * xhat))
        let mut dx = vec![0.0; grad.len()];
        for ((d, g), xh) in dx.chunks_exact_mut(c).zip(grad.chunks_exact(c)).zip(self.xhat.chunks_exact(c)) {
            for ch in 0..c {
                d[ch] = gamma[ch] * self.inv_std[ch] / n * (n * g[ch] - dbeta[ch] - xh[ch] * dgamma[ch]);
            }
        }
        vec![Some(dx), Some(dgamma), Some(dbeta)]
    }
}

struct BatchNormInfer {
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
}

impl Backward for BatchNormInfer {
    fn backward(&self, inputs: &[&Tensor], _out: &Tensor, grad: &[f64], _needs: &[bool]) -> Vec<Option<Vec<f64>>> {
        let gamma = inputs[1].data();
        let c = gamma.len();
        let mut dgamma = vec![0.0; c];
        let mut dbeta = vec![0.0; c];
        let mut dx = vec![0.0; grad.len()];
        for ((d, g), xh) in dx.chunks_exact_mut(c).zip(grad.chunks_exact(c)).zip(self.xhat.chunks_exact(c)) {
            for ch in 0..c {
                dbeta[ch] += g[ch];
                dgamma[ch] += g[ch] * xh[ch];
                d[ch] = g[ch] * gamma[ch] * self.inv_std[ch];
            }
        }
        vec![Some(dx), Some(dgamma), Some(dbeta)]
    }
}

// ---------------------------------------------------------------- LSTM

/// Cached activations of one LSTM direction.
struct Lstm {
    reverse: bool,
    hidden: usize,
    /// Post-activation gates `[i, f, g, o]` per (batch, time).
    gates: Vec<f64>,
    cells: Vec<f64>,
}

impl Lstm {
    fn order(&self, len: usize) -> impl DoubleEndedIterator<Item = usize> {
        let rev = self.reverse;
        (0..len).map(move |s| if rev { len - 1 - s } else { s })
    }

    fn prev(&self, t: usize, len: usize) -> Option<usize> {
        if self.reverse {
            (t + 1 < len).then_some(t + 1)
        } else {
            t.checked_sub(1)
        }
    }
}

impl Backward for Lstm {
    fn backward(&self, inputs: &[&Tensor], out: &Tensor, grad: &[f64], needs: &[bool]) -> Vec<Option<Vec<f64>>> {
        let (x, wx, wh) = (inputs[0], inputs[1], inputs[2]);
        let (b, l, f) = (x.dim(0), x.dim(1), x.dim(2));
        let h = self.hidden;
        let g4 = 4 * h;
        let hs = out.data();
        let mut dz = vec![0.0; b * l * g4];
        let mut dh_next = vec![0.0; b * h];
        let mut dc_next = vec![0.0; b * h];
        let steps: Vec<usize> = self.order(l).collect();
        for (s, &t) in steps.iter().enumerate().rev() {
            let prev = self.prev(t, l);
            for bi in 0..b {
                let row = bi * l + t;
                let gate = &self.gates[row * g4..(row + 1) * g4];
                let dzr = &mut dz[row * g4..(row + 1) * g4];
                for j in 0..h {
                    let (i_g, f_g, g_g, o_g) = (gate[j], gate[h + j], gate[2 * h + j], gate[3 * h + j]);
                    let c = self.cells[row * h + j];
                    let c_prev = prev.map_or(0.0, |p| self.cells[(bi * l + p) * h + j]);
                    let tc = c.tanh();
                    let dh = grad[row * h + j] + dh_next[bi * h + j];
                    let d_o = dh * tc;
                    let dc = dc_next[bi * h + j] + dh * o_g * (1.0 - tc * tc);
                    dzr[j] = dc * g_g * i_g * (1.0 - i_g);
                    dzr[h + j] = dc * c_prev * f_g * (1.0 - f_g);
                    dzr[2 * h + j] = dc * i_g * (1.0 - g_g * g_g);
                    dzr[3 * h + j] = d_o * o_g * (1.0 - o_g);
                    dc_next[bi * h + j] = dc * f_g;
                }
            }
            if s > 0 {
                // dh_{prev} = dz_t · Wh^T
                let dz_t = MatRef::strided(&dz[t * g4..], b, g4, l * g4, 1);
                gemm(1.0, dz_t, MatRef::new(wh.data(), h, g4).t(), 0.0, MatMut::new(&mut dh_next, b, h));
            }
        }
        let dz_all = MatRef::new(&dz, b * l, g4);
        let dx = needs[0].then(|| {
            let mut dx = vec![0.0; x.len()];
            gemm(1.0, dz_all, MatRef::new(wx.data(), f, g4).t(), 0.0, MatMut::new(&mut dx, b * l, f));
            dx
        });
        let dwx = needs[1].then(|| {
            let mut dwx = vec![0.0; wx.len()];
            gemm(1.0, MatRef::new(x.data(), b * l, f).t(), dz_all, 0.0, MatMut::new(&mut dwx, f, g4));
            dwx
        });
        let dwh = needs[2].then(|| {
            let mut h_prev = vec![0.0; b * l * h];
            for bi in 0..b {
                for t in 0..l {
                    if let Some(p) = self.prev(t, l) {
                        let (dst, src) = ((bi * l + t) * h, (bi * l + p) * h);
                        h_prev[dst..dst + h].copy_from_slice(&hs[src..src + h]);
                    }
                }
            }
            let mut dwh = vec![0.0; wh.len()];
            gemm(1.0, MatRef::new(&h_prev, b * l, h).t(), dz_all, 0.0, MatMut::new(&mut dwh, h, g4));
            dwh
        });
        let db = needs[3].then(|| {
            let mut db = vec![0.0; g4];
            for row in dz.chunks_exact(g4) {
                db.iter_mut().zip(row).for_each(|(a, g)| *a += g);
            }
            db
        });
        vec![dx, dwx, dwh, db]
    }
}

// ---------------------------------------------------------------- misc

struct SelectTime {
    t: usize,
}

impl Backward for SelectTime {
    fn backward(&self, inputs: &[&Tensor], _out: &Tensor, grad: &[f64], _needs: &[bool]) -> Vec<Option<Vec<f64>>> {
        let x = inputs[0];
        let (b, l, c) = (x.dim(0), x.dim(1), x.dim(2));
        let mut dx = vec![0.0; x.len()];
        for bi in 0..b {
            let dst = (bi * l + self.t) * c;
            dx[dst..dst + c].copy_from_slice(&grad[bi * c..(bi + 1) * c]);
        }
        vec![Some(dx)]
    }
}

struct ConcatLast {
    widths: Vec<usize>,
}

impl Backward for ConcatLast {
    fn backward(&self, inputs: &[&Tensor], _out: &Tensor, grad: &[f64], needs: &[bool]) -> Vec<Option<Vec<f64>>> {
        let total: usize = self.widths.iter().sum();
        let rows = grad.len() / total;
        let mut offset = 0;
        let mut out = Vec::with_capacity(inputs.len());
        for (k, &w) in self.widths.iter().enumerate() {
            if needs[k] {
                let mut d = vec![0.0; rows * w];
                for r in 0..rows {
                    d[r * w..(r + 1) * w].copy_from_slice(&grad[r * total + offset..r * total + offset + w]);
                }
                out.push(Some(d));
            } else {
                out.push(None);
            }
            offset += w;
        }
        out
    }
}

struct Linear;

impl Backward for Linear {
    fn backward(&self, inputs: &[&Tensor], _out: &Tensor, grad: &[f64], needs: &[bool]) -> Vec<Option<Vec<f64>>> {
        let (x, w) = (inputs[0], inputs[1]);
        let (b, f) = (x.dim(0), x.dim(1));
        let o = w.dim(1);
        let g = MatRef::new(grad, b, o);
        let dx = needs[0].then(|| {
            let mut dx = vec![0.0; x.len()];
            gemm(1.0, g, MatRef::new(w.data(), f, o).t(), 0.0, MatMut::new(&mut dx, b, f));
            dx
        });
        let dw = needs[1].then(|| {
            let mut dw = vec![0.0; w.len()];
            gemm(1.0, MatRef::new(x.data(), b, f).t(), g, 0.0, MatMut::new(&mut dw, f, o));
            dw
        });
        let db = needs[2].then(|| {
            let mut db = vec![0.0; o];
            for row in grad.chunks_exact(o) {
                db.iter_mut().zip(row).for_each(|(a, g)| *a += g);
            }
            db
        });
        vec![dx, dw, db]
    }
}

struct Relu;

impl Backward for Relu {
    fn backward(&self, inputs: &[&Tensor], _out: &Tensor, grad: &[f64], _needs: &[bool]) -> Vec<Option<Vec<f64>>> {
        let dx = inputs[0].data().iter().zip(grad).map(|(&x, &g)| if x > 0.0 { g } else { 0.0 }).collect();
        vec![Some(dx)]
    }
}

struct Softmax;

impl Backward for Softmax {
    fn backward(&self, _inputs: &[&Tensor], out: &Tensor, grad: &[f64], _needs: &[bool]) -> Vec<Option<Vec<f64>>> {
        let c = out.dim(out.rank() - 1);
        let mut dx = vec![0.0; grad.len()];
        for ((d, y), g) in dx.chunks_exact_mut(c).zip(out.data().chunks_exact(c)).zip(grad.chunks_exact(c)) {
            let dot: f64 = y.iter().zip(g).map(|(a, b)| a * b).sum();
            for k in 0..c {
                d[k] = y[k] * (g[k] - dot);
            }
        }
        vec![Some(dx)]
    }
}

struct Mse;

impl Backward for Mse {
    fn backward(&self, inputs: &[&Tensor], _out: &Tensor, grad: &[f64], needs: &[bool]) -> Vec<Option<Vec<f64>>> {
        let (p, t) = (inputs[0].data(), inputs[1].data());
        let scale = 2.0 * grad[0] / p.len() as f64;
        let dp: Vec<f64> = p.iter().zip(t).map(|(a, b)| scale * (a - b)).collect();
        let dt = needs[1].then(|| dp.iter().map(|v| -v).collect());
        vec![Some(dp), dt]
    }
}

struct WeightedSum {
    weights: Vec<f64>,
}

impl Backward for WeightedSum {
    fn backward(&self, _inputs: &[&Tensor], _out: &Tensor, grad: &[f64], _needs: &[bool]) -> Vec<Option<Vec<f64>>> {
        vec![Some(self.weights.iter().map(|w| w * grad[0]).collect())]
    }
}

// ---------------------------------------------------------------- graph API

impl<'a> Graph<'a> {
    /// Stride-1 cross-correlation with "same" zero padding.
    /// `x: [b, l, cin]`, `w: [kernel, cin, cout]`, `bias: [cout]`.
    pub fn conv1d(&mut self, x: Var, w: Var, bias: Var) -> Result<Var> {
        let (b, l, cin) = dims3(self.value(x), "conv1d")?;
        let ws = self.shape(w).to_vec();
        if ws.len() != 3 || ws[1] != cin {
            return Err(shape_err("conv1d", self.shape(x), &ws));
        }
        let (kernel, cout) = (ws[0], ws[2]);
        if self.shape(bias) != [cout] {
            return Err(shape_err("conv1d bias", self.shape(bias), &[cout]));
        }
        let pad = (kernel - 1) / 2;
        let mut out = vec![0.0; b * l * cout];
        {
            let (xv, wv, bv) = (self.value(x).data(), self.value(w).data(), self.value(bias).data());
            for row in out.chunks_exact_mut(cout) {
                row.copy_from_slice(bv);
            }
            for bi in 0..b {
                let xb = &xv[bi * l * cin..(bi + 1) * l * cin];
                let ob = &mut out[bi * l * cout..(bi + 1) * l * cout];
                for k in 0..kernel {
                    let (lo, hi) = conv_span(l, k, pad);
                    if hi == lo {
                        continue;
                    }
                    let n = hi - lo;
                    let src = lo + k - pad;
                    gemm(
                        1.0,
                        MatRef::new(&xb[src * cin..(src + n) * cin], n, cin),
                        MatRef::new(&wv[k * cin * cout..(k + 1) * cin * cout], cin, cout),
                        1.0,
                        MatMut::new(&mut ob[lo * cout..hi * cout], n, cout),
                    );
                }
            }
        }
        let t = Tensor::new(vec![b, l, cout], out)?;
        Ok(self.push(t, &[x, w, bias], Conv1d { pad }))
    }

    /// Max over windows of `size` every `stride` steps (valid padding).
    /// Gradient goes to the first maximal element of each window.
    pub fn maxpool1d(&mut self, x: Var, size: usize, stride: usize) -> Result<Var> {
        let (b, l, c) = dims3(self.value(x), "maxpool1d")?;
        let lo = pooled_len(l, size, stride).ok_or_else(|| shape_err("maxpool1d", &[b, l, c], &[size, stride]))?;
        let xv = self.value(x).data();
        let mut out = vec![0.0; b * lo * c];
        let mut argmax = vec![0u32; b * lo * c];
        for bi in 0..b {
            for t in 0..lo {
                let start = t * stride;
                for ch in 0..c {
                    let mut best = start;
                    let mut val = xv[(bi * l + start) * c + ch];
                    for s in start + 1..start + size {
                        let v = xv[(bi * l + s) * c + ch];
                        if v > val {
                            val = v;
                            best = s;
                        }
                    }
                    let o = (bi * lo + t) * c + ch;
                    out[o] = val;
                    argmax[o] = best as u32;
                }
            }
        }
        let t = Tensor::new(vec![b, lo, c], out)?;
        Ok(self.push(t, &[x], MaxPool { argmax }))
    }

    /// Training-mode batch norm over `batch x length` per channel. Returns
    /// the batch statistics (biased variance) so the caller can update
    /// running averages.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<(Var, BatchStats)> {
        let (b, l, c) = dims3(self.value(x), "batch_norm")?;
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(shape_err("batch_norm", self.shape(x), self.shape(gamma)));
        }
        let n = b * l;
        if n < 2 {
            return Err(Error::invalid("training-mode batch norm needs more than one element per channel"));
        }
        let xv = self.value(x).data();
        let mut mean = vec![0.0; c];
        for row in xv.chunks_exact(c) {
            mean.iter_mut().zip(row).for_each(|(m, v)| *m += v);
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0.0; c];
        for row in xv.chunks_exact(c) {
            for ch in 0..c {
                let d = row[ch] - mean[ch];
                var[ch] += d * d;
            }
        }
        var.iter_mut().for_each(|v| *v /= n as f64);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (gv, bv) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; xv.len()];
        let mut out = vec![0.0; xv.len()];
        for ((xh, o), row) in xhat.chunks_exact_mut(c).zip(out.chunks_exact_mut(c)).zip(xv.chunks_exact(c)) {
            for ch in 0..c {
                xh[ch] = (row[ch] - mean[ch]) * inv_std[ch];
                o[ch] = gv[ch] * xh[ch] + bv[ch];
            }
        }
        let t = Tensor::new(vec![b, l, c], out)?;
        let v = self.push(t, &[x, gamma, beta], BatchNormTrain { xhat, inv_std });
        Ok((v, BatchStats { mean, var }))
    }

    /// Inference-mode batch norm with fixed running statistics.
    pub fn batch_norm_infer(&mut self, x: Var, gamma: Var, beta: Var, mean: &[f64], var: &[f64], eps: f64) -> Result<Var> {
        let (b, l, c) = dims3(self.value(x), "batch_norm")?;
        if self.shape(gamma) != [c] || mean.len() != c || var.len() != c {
            return Err(shape_err("batch_norm", self.shape(x), self.shape(gamma)));
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let xv = self.value(x).data();
        let (gv, bv) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; xv.len()];
        let mut out = vec![0.0; xv.len()];
        for ((xh, o), row) in xhat.chunks_exact_mut(c).zip(out.chunks_exact_mut(c)).zip(xv.chunks_exact(c)) {
            for ch in 0..c {
                xh[ch] = (row[ch] - mean[ch]) * inv_std[ch];
                o[ch] = gv[ch] * xh[ch] + bv[ch];
            }
        }
        let t = Tensor::new(vec![b, l, c], out)?;
        Ok(self.push(t, &[x, gamma, beta], BatchNormInfer { xhat, inv_std }))
    }

    /// One LSTM direction over `x: [b, l, f]` with `wx: [f, 4h]`,
    /// `wh: [h, 4h]`, `bias: [4h]`, gate order input, forget, candidate,
    /// output. Returns hidden states `[b, l, h]` indexed by original time.
    pub fn lstm(&mut self, x: Var, wx: Var, wh: Var, bias: Var, reverse: bool) -> Result<Var> {
        let (b, l, f) = dims3(self.value(x), "lstm")?;
        let ws = self.shape(wx).to_vec();
        if ws.len() != 2 || ws[0] != f || ws[1] % 4 != 0 {
            return Err(shape_err("lstm input weights", self.shape(x), &ws));
        }
        let g4 = ws[1];
        let h = g4 / 4;
        if self.shape(wh) != [h, g4] || self.shape(bias) != [g4] {
            return Err(shape_err("lstm recurrent weights", self.shape(wh), &[h, g4]));
        }
        let (xv, wxv, whv, bv) = (
            self.value(x).data(),
            self.value(wx).data(),
            self.value(wh).data(),
            self.value(bias).data(),
        );
        let mut gates = vec![0.0; b * l * g4];
        for row in gates.chunks_exact_mut(g4) {
            row.copy_from_slice(bv);
        }
        gemm(1.0, MatRef::new(xv, b * l, f), MatRef::new(wxv, f, g4), 1.0, MatMut::new(&mut gates, b * l, g4));
        let mut cells = vec![0.0; b * l * h];
        let mut hs = vec![0.0; b * l * h];
        let mut prev_t: Option<usize> = None;
        for s in 0..l {
            let t = if reverse { l - 1 - s } else { s };
            if let Some(p) = prev_t {
                gemm(
                    1.0,
                    MatRef::strided(&hs[p * h..], b, h, l * h, 1),
                    MatRef::new(whv, h, g4),
                    1.0,
                    MatMut::strided(&mut gates[t * g4..], b, g4, l * g4, 1),
                );
            }
            for bi in 0..b {
                let row = bi * l + t;
                let z = &mut gates[row * g4..(row + 1) * g4];
                for j in 0..h {
                    let i_g = sigmoid(z[j]);
                    let f_g = sigmoid(z[h + j]);
                    let g_g = z[2 * h + j].tanh();
                    let o_g = sigmoid(z[3 * h + j]);
                    z[j] = i_g;
                    z[h + j] = f_g;
                    z[2 * h + j] = g_g;
                    z[3 * h + j] = o_g;
                    let c_prev = prev_t.map_or(0.0, |p| cells[(bi * l + p) * h + j]);
                    let c = f_g * c_prev + i_g * g_g;
                    cells[row * h + j] = c;
                    hs[row * h + j] = o_g * c.tanh();
                }
            }
            prev_t = Some(t);
        }
        let t = Tensor::new(vec![b, l, h], hs)?;
        Ok(self.push(
            t,
            &[x, wx, wh, bias],
            Lstm {
                reverse,
                hidden: h,
                gates,
                cells,
            },
        ))
    }

    /// `x[:, t, :]` of a `[b, l, c]` tensor.
    pub fn select_time(&mut self, x: Var, t: usize) -> Result<Var> {
        let (b, l, c) = dims3(self.value(x), "select_time")?;
        if t >= l {
            return Err(shape_err("select_time", &[b, l, c], &[t]));
        }
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(b * c);
        for bi in 0..b {
            out.extend_from_slice(&xv[(bi * l + t) * c..(bi * l + t + 1) * c]);
        }
        let v = Tensor::new(vec![b, c], out)?;
        Ok(self.push(v, &[x], SelectTime { t }))
    }

    /// Concatenate along the last axis; leading dimensions must agree.
    pub fn concat_last(&mut self, xs: &[Var]) -> Result<Var> {
        let first = self.shape(*xs.first().ok_or_else(|| Error::invalid("concat of nothing"))?).to_vec();
        let lead = &first[..first.len() - 1];
        let mut widths = Vec::with_capacity(xs.len());
        for &v in xs {
            let s = self.shape(v);
            if s.len() != first.len() || &s[..s.len() - 1] != lead {
                return Err(shape_err("concat", &first, s));
            }
            widths.push(s[s.len() - 1]);
        }
        let total: usize = widths.iter().sum();
        let rows: usize = lead.iter().product();
        let mut out = vec![0.0; rows * total];
        let mut offset = 0;
        for (&v, &w) in xs.iter().zip(&widths) {
            let data = self.value(v).data();
            for r in 0..rows {
                out[r * total + offset..r * total + offset + w].copy_from_slice(&data[r * w..(r + 1) * w]);
            }
            offset += w;
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        let t = Tensor::new(shape, out)?;
        Ok(self.push(t, xs, ConcatLast { widths }))
    }

    /// `x · w + b` for `x: [b, f]`, `w: [f, o]`, `b: [o]`.
    pub fn linear(&mut self, x: Var, w: Var, bias: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[0] {
            return Err(shape_err("linear", &xs, &ws));
        }
        let (b, f, o) = (xs[0], xs[1], ws[1]);
        if self.shape(bias) != [o] {
            return Err(shape_err("linear bias", self.shape(bias), &[o]));
        }
        let mut out = vec![0.0; b * o];
        for row in out.chunks_exact_mut(o) {
            row.copy_from_slice(self.value(bias).data());
        }
        gemm(
            1.0,
            MatRef::new(self.value(x).data(), b, f),
            MatRef::new(self.value(w).data(), f, o),
            1.0,
            MatMut::new(&mut out, b, o),
        );
        let t = Tensor::new(vec![b, o], out)?;
        Ok(self.push(t, &[x, w, bias], Linear))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|v| v.max(0.0)).collect();
        let out = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        self.push(out, &[x], Relu)
    }

    /// Row-wise softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let c = t.dim(t.rank() - 1);
        let mut data = t.data().to_vec();
        for row in data.chunks_exact_mut(c) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            row.iter_mut().for_each(|v| *v /= sum);
        }
        let out = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        self.push(out, &[x], Softmax)
    }

    /// Mean of squared differences over every element.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        if self.shape(pred) != self.shape(target) {
            return Err(shape_err("mse", self.shape(pred), self.shape(target)));
        }
        let (p, t) = (self.value(pred).data(), self.value(target).data());
        let loss = p.iter().zip(t).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / p.len() as f64;
        Ok(self.push(Tensor::scalar(loss), &[pred, target], Mse))
    }

    /// `sum(x * weights)`, a scalar probe used by gradient checks.
    pub fn weighted_sum(&mut self, x: Var, weights: &[f64]) -> Result<Var> {
        if self.value(x).len() != weights.len() {
            return Err(shape_err("weighted_sum", self.shape(x), &[weights.len()]));
        }
        let s = self.value(x).data().iter().zip(weights).map(|(a, b)| a * b).sum();
        Ok(self.push(
            Tensor::scalar(s),
            &[x],
            WeightedSum {
                weights: weights.to_vec(),
            },
        ))
    }
}

/// Check that `target` holds one-hot rows.
pub fn check_one_hot(target: &Tensor) -> Result<()> {
    let c = target.dim(target.rank() - 1);
    for (i, row) in target.data().chunks_exact(c).enumerate() {
        let ones = row.iter().filter(|&&v| v == 1.0).count();
        let zeros = row.iter().filter(|&&v| v == 0.0).count();
        if ones != 1 || zeros != c - 1 {
            return Err(Error::invalid(format!("target row {i} is not one-hot")));
        }
    }
    Ok(())
}
