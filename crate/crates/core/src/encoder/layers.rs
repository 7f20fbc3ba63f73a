//! Forward and backward passes of the encoder building blocks.
//!
//! Matrices follow the `out x in` convention: a projection of token rows
//! `X` (n x in) is `X W^T`.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softmax(logits: ArrayView1<f64>) -> Array1<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out = logits.mapv(|v| (v - max).exp());
    let sum = out.sum();
    out /= sum;
    out
}

pub(crate) fn log_softmax_at(logits: ArrayView1<f64>, index: usize) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
    logits[index] - lse
}

fn softmax_rows_inplace(m: &mut Array2<f64>) {
    for mut row in m.rows_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
}

/// Cached intermediates of a (multi-head) scaled dot-product self-attention
/// without output projection.
#[derive(Debug, Clone)]
pub(crate) struct AttentionCache {
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    probs: Vec<Array2<f64>>,
}

pub(crate) struct AttentionWeights<'a> {
    pub wq: ArrayView2<'a, f64>,
    pub wk: ArrayView2<'a, f64>,
    pub wv: ArrayView2<'a, f64>,
    pub heads: usize,
}

pub(crate) struct AttentionGrads {
    pub dx: Array2<f64>,
    pub dwq: Array2<f64>,
    pub dwk: Array2<f64>,
    pub dwv: Array2<f64>,
}

impl AttentionWeights<'_> {
    fn head_width(&self) -> usize {
        self.wq.nrows() / self.heads
    }

    pub(crate) fn forward(&self, x: ArrayView2<f64>) -> (Array2<f64>, AttentionCache) {
        let q = x.dot(&self.wq.t());
        let k = x.dot(&self.wk.t());
        let v = x.dot(&self.wv.t());
        let dh = self.head_width();
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = Array2::zeros((x.nrows(), self.wv.nrows()));
        let mut probs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let cols = s![.., h * dh..(h + 1) * dh];
            let mut a = q.slice(cols).dot(&k.slice(cols).t()) * scale;
            softmax_rows_inplace(&mut a);
            out.slice_mut(cols).assign(&a.dot(&v.slice(cols)));
            probs.push(a);
        }
        (out, AttentionCache { q, k, v, probs })
    }

    pub(crate) fn backward(
        &self,
        x: ArrayView2<f64>,
        cache: &AttentionCache,
        dout: ArrayView2<f64>,
    ) -> AttentionGrads {
        let dh = self.head_width();
        let scale = 1.0 / (dh as f64).sqrt();
        let mut dq = Array2::zeros(cache.q.raw_dim());
        let mut dk = Array2::zeros(cache.k.raw_dim());
        let mut dv = Array2::zeros(cache.v.raw_dim());
        for (h, a) in cache.probs.iter().enumerate() {
            let cols = s![.., h * dh..(h + 1) * dh];
            let dout_h = dout.slice(cols);
            let da = dout_h.dot(&cache.v.slice(cols).t());
            dv.slice_mut(cols).assign(&a.t().dot(&dout_h));
            // softmax Jacobian, row by row
            let row_dot = (&da * a).sum_axis(Axis(1)).insert_axis(Axis(1));
            let ds = a * &(&da - &row_dot) * scale;
            dq.slice_mut(cols).assign(&ds.dot(&cache.k.slice(cols)));
            dk.slice_mut(cols).assign(&ds.t().dot(&cache.q.slice(cols)));
        }
        let dx = dq.dot(&self.wq) + dk.dot(&self.wk) + dv.dot(&self.wv);
        AttentionGrads {
            dx,
            dwq: dq.t().dot(&x),
            dwk: dk.t().dot(&x),
            dwv: dv.t().dot(&x),
        }
    }
}

/// Gated recurrent update of a GCN weight matrix, applied column-wise with
/// the matrix acting as both input and hidden state:
///
/// ```text
/// Z  = sigmoid(Uz W + Bz)
/// R  = sigmoid(Ur W + Br)
/// H~ = tanh(Hin W + Hhid (R * W) + Bh)
/// W' = (1 - Z) * W + Z * H~
/// ```
pub(crate) struct EvolveWeights<'a> {
    pub uz: ArrayView2<'a, f64>,
    pub ur: ArrayView2<'a, f64>,
    pub h_in: ArrayView2<'a, f64>,
    pub h_hid: ArrayView2<'a, f64>,
    pub bz: ArrayView2<'a, f64>,
    pub br: ArrayView2<'a, f64>,
    pub bh: ArrayView2<'a, f64>,
}

#[derive(Debug, Clone)]
pub(crate) struct EvolveCache {
    w: Array2<f64>,
    z: Array2<f64>,
    r: Array2<f64>,
    gated: Array2<f64>,
    cand: Array2<f64>,
}

pub(crate) struct EvolveGrads {
    pub dw_prev: Array2<f64>,
    pub duz: Array2<f64>,
    pub dur: Array2<f64>,
    pub dh_in: Array2<f64>,
    pub dh_hid: Array2<f64>,
    pub dbz: Array2<f64>,
    pub dbr: Array2<f64>,
    pub dbh: Array2<f64>,
}

impl EvolveWeights<'_> {
    pub(crate) fn forward(&self, w: &Array2<f64>) -> (Array2<f64>, EvolveCache) {
        let z = (self.uz.dot(w) + self.bz).mapv(sigmoid);
        let r = (self.ur.dot(w) + self.br).mapv(sigmoid);
        let gated = &r * w;
        let cand = (self.h_in.dot(w) + self.h_hid.dot(&gated) + self.bh).mapv(f64::tanh);
        let mut next = w.clone();
        Zip::from(&mut next)
            .and(&z)
            .and(&cand)
            .for_each(|n, &zv, &c| *n = (1.0 - zv) * *n + zv * c);
        (
            next,
            EvolveCache {
                w: w.clone(),
                z,
                r,
                gated,
                cand,
            },
        )
    }

    pub(crate) fn backward(&self, cache: &EvolveCache, dnext: &Array2<f64>) -> EvolveGrads {
        let EvolveCache { w, z, r, gated, cand } = cache;
        let dz = dnext * &(cand - w);
        let dcand = dnext * z;
        let mut dw = dnext * &z.mapv(|v| 1.0 - v);

        let dph = dcand * &cand.mapv(|c| 1.0 - c * c);
        let dh_in = dph.dot(&w.t());
        let dh_hid = dph.dot(&gated.t());
        dw += &self.h_in.t().dot(&dph);
        let dgated = self.h_hid.t().dot(&dph);
        let dr = &dgated * w;
        dw += &(&dgated * r);

        let dpr = dr * &r.mapv(|v| v * (1.0 - v));
        let dur = dpr.dot(&w.t());
        dw += &self.ur.t().dot(&dpr);

        let dpz = dz * &z.mapv(|v| v * (1.0 - v));
        let duz = dpz.dot(&w.t());
        dw += &self.uz.t().dot(&dpz);

        EvolveGrads {
            dw_prev: dw,
            duz,
            dur,
            dh_in,
            dh_hid,
            dbz: dpz,
            dbr: dpr,
            dbh: dph,
        }
    }
}
