//! Forward/backward primitives for the attention model.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, ArrayView2, Axis};

pub type Mat = Array2<f64>;

const LN_EPS: f64 = 1e-5;

pub fn linear(x: &ArrayView2<f64>, w: &Mat, b: &Mat) -> Mat {
    let mut y = x.dot(w);
    y += &b.row(0);
    y
}

/// Accumulates weight gradients and returns the input gradient.
pub fn linear_back(x: &ArrayView2<f64>, w: &Mat, dy: &Mat, gw: &mut Mat, gb: &mut Mat) -> Mat {
    general_mat_mul(1.0, &x.t(), dy, 1.0, gw);
    let mut row = gb.row_mut(0);
    row += &dy.sum_axis(Axis(0));
    dy.dot(&w.t())
}

pub fn linear_back_params_only(x: &ArrayView2<f64>, dy: &Mat, gw: &mut Mat, gb: &mut Mat) {
    general_mat_mul(1.0, &x.t(), dy, 1.0, gw);
    let mut row = gb.row_mut(0);
    row += &dy.sum_axis(Axis(0));
}

pub struct LnCache {
    xhat: Mat,
    inv_std: Array1<f64>,
}

pub fn layer_norm(x: &Mat, g: &Mat, b: &Mat) -> (Mat, LnCache) {
    let d = x.ncols() as f64;
    let mut xhat = x.clone();
    let mut inv_std = Array1::zeros(x.nrows());
    for (mut row, is) in xhat.rows_mut().into_iter().zip(inv_std.iter_mut()) {
        let mean = row.sum() / d;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
        *is = 1.0 / (var + LN_EPS).sqrt();
        let k = *is;
        row.mapv_inplace(|v| (v - mean) * k);
    }
    let mut y = &xhat * &g.row(0);
    y += &b.row(0);
    (y, LnCache { xhat, inv_std })
}

pub fn layer_norm_back(dy: &Mat, cache: &LnCache, g: &Mat, gg: &mut Mat, gb: &mut Mat) -> Mat {
    let d = dy.ncols() as f64;
    {
        let mut r = gg.row_mut(0);
        r += &(dy * &cache.xhat).sum_axis(Axis(0));
        let mut r = gb.row_mut(0);
        r += &dy.sum_axis(Axis(0));
    }
    let dxhat = dy * &g.row(0);
    let mut dx = Mat::zeros(dy.raw_dim());
    for i in 0..dy.nrows() {
        let dh = dxhat.row(i);
        let xh = cache.xhat.row(i);
        let sum_dh = dh.sum();
        let sum_dh_xh = dh.dot(&xh);
        let k = cache.inv_std[i] / d;
        for j in 0..dy.ncols() {
            dx[[i, j]] = k * (d * dh[j] - sum_dh - xh[j] * sum_dh_xh);
        }
    }
    dx
}

/// Row-wise softmax in place; `-inf` entries become exact zeros.
pub fn softmax_rows(m: &mut Mat) {
    for mut row in m.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
}

/// Names of one attention block's parameters.
pub struct AttnParams<'a> {
    pub wq: &'a Mat,
    pub bq: &'a Mat,
    pub wk: &'a Mat,
    pub bk: &'a Mat,
    pub wv: &'a Mat,
    pub bv: &'a Mat,
    pub wo: &'a Mat,
    pub bo: &'a Mat,
}

pub struct AttnGrads<'a> {
    pub wq: &'a mut Mat,
    pub bq: &'a mut Mat,
    pub wk: &'a mut Mat,
    pub bk: &'a mut Mat,
    pub wv: &'a mut Mat,
    pub bv: &'a mut Mat,
    pub wo: &'a mut Mat,
    pub bo: &'a mut Mat,
}

pub struct AttnCache {
    xq: Mat,
    xkv: Mat,
    q: Mat,
    k: Mat,
    v: Mat,
    probs: Vec<Mat>,
    ctx: Mat,
}

/// Scaled dot-product attention of one head, with an optional additive
/// logit bias.
pub fn attend_head(
    q: ArrayView2<f64>,
    k: ArrayView2<f64>,
    v: ArrayView2<f64>,
    causal: bool,
    bias: Option<ArrayView2<f64>>,
) -> (Mat, Mat) {
    let scale = 1.0 / (q.ncols() as f64).sqrt();
    let mut scores = q.dot(&k.t());
    scores *= scale;
    if let Some(b) = bias {
        scores += &b;
    }
    if causal {
        for (i, mut row) in scores.rows_mut().into_iter().enumerate() {
            row.slice_mut(s![i + 1..]).fill(f64::NEG_INFINITY);
        }
    }
    softmax_rows(&mut scores);
    let ctx = scores.dot(&v);
    (ctx, scores)
}

/// Multi-head attention; `bias` holds one constant logit offset matrix per head.
pub fn attention(
    xq: &Mat,
    xkv: &Mat,
    p: &AttnParams,
    heads: usize,
    causal: bool,
    bias: Option<&[Mat]>,
) -> (Mat, AttnCache) {
    let q = linear(&xq.view(), p.wq, p.bq);
    let k = linear(&xkv.view(), p.wk, p.bk);
    let v = linear(&xkv.view(), p.wv, p.bv);
    let d = q.ncols();
    let dh = d / heads;
    let mut ctx = Mat::zeros((q.nrows(), d));
    let mut probs = Vec::with_capacity(heads);
    for h in 0..heads {
        let cols = s![.., h * dh..(h + 1) * dh];
        let (c, pr) = attend_head(
            q.slice(cols),
            k.slice(cols),
            v.slice(cols),
            causal,
            bias.map(|b| b[h].view()),
        );
        ctx.slice_mut(cols).assign(&c);
        probs.push(pr);
    }
    let y = linear(&ctx.view(), p.wo, p.bo);
    (
        y,
        AttnCache {
            xq: xq.clone(),
            xkv: xkv.clone(),
            q,
            k,
            v,
            probs,
            ctx,
        },
    )
}

/// Returns `(d_xq, d_xkv)`.
pub fn attention_back(dy: &Mat, c: &AttnCache, p: &AttnParams, g: AttnGrads, heads: usize) -> (Mat, Mat) {
    let dctx = linear_back(&c.ctx.view(), p.wo, dy, g.wo, g.bo);
    let d = c.q.ncols();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dq = Mat::zeros(c.q.raw_dim());
    let mut dk = Mat::zeros(c.k.raw_dim());
    let mut dv = Mat::zeros(c.v.raw_dim());
    for h in 0..heads {
        let cols = s![.., h * dh..(h + 1) * dh];
        let pr = &c.probs[h];
        let dctx_h = dctx.slice(cols);
        // dV = P^T dO
        dv.slice_mut(cols).assign(&pr.t().dot(&dctx_h));
        // dP = dO V^T ; dS = P * (dP - rowsum(dP * P))
        let mut ds = dctx_h.dot(&c.v.slice(cols).t());
        for (mut drow, prow) in ds.rows_mut().into_iter().zip(pr.rows()) {
            let dot = drow.dot(&prow);
            drow.zip_mut_with(&prow, |a, &pp| *a = pp * (*a - dot) * scale);
        }
        dq.slice_mut(cols).assign(&ds.dot(&c.k.slice(cols)));
        dk.slice_mut(cols).assign(&ds.t().dot(&c.q.slice(cols)));
    }
    let dxq = linear_back(&c.xq.view(), p.wq, &dq, g.wq, g.bq);
    let mut dxkv = linear_back(&c.xkv.view(), p.wk, &dk, g.wk, g.bk);
    dxkv += &linear_back(&c.xkv.view(), p.wv, &dv, g.wv, g.bv);
    (dxq, dxkv)
}

pub struct FfCache {
    x: Mat,
    hidden: Mat,
}

pub fn feed_forward(x: &Mat, w1: &Mat, b1: &Mat, w2: &Mat, b2: &Mat) -> (Mat, FfCache) {
    let hidden = linear(&x.view(), w1, b1).mapv(|v| v.max(0.0));
    let y = linear(&hidden.view(), w2, b2);
    (y, FfCache { x: x.clone(), hidden })
}

#[allow(clippy::too_many_arguments)]
pub fn feed_forward_back(
    dy: &Mat,
    c: &FfCache,
    w1: &Mat,
    w2: &Mat,
    gw1: &mut Mat,
    gb1: &mut Mat,
    gw2: &mut Mat,
    gb2: &mut Mat,
) -> Mat {
    let mut dh = linear_back(&c.hidden.view(), w2, dy, gw2, gb2);
    dh.zip_mut_with(&c.hidden, |d, &h| {
        if h <= 0.0 {
            *d = 0.0
        }
    });
    linear_back(&c.x.view(), w1, &dh, gw1, gb1)
}

/// Sinusoidal encoding of timestamps (seconds), `pos_rate` positions per second.
pub fn positional_encoding(times: &[f64], d: usize, pos_rate: f64) -> Mat {
    Mat::from_shape_fn((times.len(), d), |(t, j)| {
        let pos = times[t] * pos_rate;
        let freq = 1.0 / 10000f64.powf((2 * (j / 2)) as f64 / d as f64);
        if j % 2 == 0 {
            (pos * freq).sin()
        } else {
            (pos * freq).cos()
        }
    })
}
