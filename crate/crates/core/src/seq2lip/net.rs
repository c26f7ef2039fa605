//! Encoder-decoder network: pre-LN self-attention encoder over stacked Mel
//! frames and an autoregressive decoder with causal self-attention and
//! cross-attention over the encoder output.
//!
//! Positions on both sides are sinusoidal encodings of the frame timestamp in
//! seconds, so decoder queries at the video rate line up with encoder keys at
//! the feature rate without explicit resampling.

use std::collections::BTreeMap;

use ndarray::{s, Array2, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::nn::*;
use super::params::{xavier, Weights};
use crate::audiofeat::MelConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Hyper {
    pub n_mels: usize,
    /// Consecutive Mel frames concatenated into one encoder input frame.
    pub stack: usize,
    pub d_model: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub out_dim: usize,
    pub fps_out: f64,
    /// Positional-encoding positions per second.
    pub pos_rate: f64,
    pub sample_rate: u32,
    pub mel: MelConfig,
    /// Per-head cross-attention distance penalty in logits per second of
    /// |query time - key time|. Missing heads get no penalty.
    pub cross_slopes: Vec<f64>,
}

impl Default for Hyper {
    fn default() -> Self {
        Self {
            n_mels: 80,
            stack: 4,
            d_model: 64,
            heads: 4,
            ff_dim: 128,
            enc_layers: 2,
            dec_layers: 2,
            out_dim: 8,
            fps_out: 30.0,
            pos_rate: 100.0,
            sample_rate: crate::audiofeat::SAMPLE_RATE,
            mel: MelConfig::default(),
            cross_slopes: vec![0.0, 10.0, 30.0, 100.0],
        }
    }
}

impl Hyper {
    pub fn enc_times(&self, groups: usize) -> Vec<f64> {
        let dt = self.mel.hop as f64 / self.sample_rate as f64;
        let centre = (self.stack as f64 - 1.0) / 2.0;
        (0..groups).map(|k| ((k * self.stack) as f64 + centre) * dt).collect()
    }

    pub fn dec_times(&self, frames: usize) -> Vec<f64> {
        (0..frames).map(|t| (t as f64 + 0.5) / self.fps_out).collect()
    }

    /// Cross-attention logit offsets for the given query and key times, or
    /// `None` when every slope is zero.
    pub fn cross_bias(&self, q_times: &[f64], k_times: &[f64]) -> Option<Vec<Mat>> {
        if self.cross_slopes.iter().all(|&s| s == 0.0) {
            return None;
        }
        Some(
            (0..self.heads)
                .map(|hd| {
                    let slope = self.cross_slopes.get(hd).copied().unwrap_or(0.0);
                    Mat::from_shape_fn((q_times.len(), k_times.len()), |(i, j)| {
                        -slope * (q_times[i] - k_times[j]).abs()
                    })
                })
                .collect(),
        )
    }
}

fn attn_names(prefix: &str) -> [String; 8] {
    ["wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo"].map(|n| format!("{prefix}.{n}"))
}

pub fn init_weights(h: &Hyper, seed: u64) -> Weights {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = h.d_model;
    let mut w = Weights::default();
    let ones = |n| Array2::from_elem((1, n), 1.0);
    let zeros = |n| Array2::zeros((1, n));

    let lin = |w: &mut Weights, rng: &mut ChaCha8Rng, name: &str, i: usize, o: usize| {
        w.insert(format!("{name}.w"), xavier(rng, i, o));
        w.insert(format!("{name}.b"), zeros(o));
    };
    let ln = |w: &mut Weights, name: &str| {
        w.insert(format!("{name}.g"), ones(d));
        w.insert(format!("{name}.b"), zeros(d));
    };
    let att = |w: &mut Weights, rng: &mut ChaCha8Rng, name: &str| {
        let n = attn_names(name);
        for pair in n.chunks(2) {
            w.insert(pair[0].clone(), xavier(rng, d, d));
            w.insert(pair[1].clone(), zeros(d));
        }
    };

    lin(&mut w, &mut rng, "enc.in", h.n_mels * h.stack, d);
    for l in 0..h.enc_layers {
        ln(&mut w, &format!("enc.{l}.ln1"));
        att(&mut w, &mut rng, &format!("enc.{l}.att"));
        ln(&mut w, &format!("enc.{l}.ln2"));
        lin(&mut w, &mut rng, &format!("enc.{l}.ff1"), d, h.ff_dim);
        lin(&mut w, &mut rng, &format!("enc.{l}.ff2"), h.ff_dim, d);
    }
    ln(&mut w, "enc.ln");

    lin(&mut w, &mut rng, "dec.in", h.out_dim, d);
    for l in 0..h.dec_layers {
        ln(&mut w, &format!("dec.{l}.ln1"));
        att(&mut w, &mut rng, &format!("dec.{l}.self"));
        ln(&mut w, &format!("dec.{l}.ln2"));
        att(&mut w, &mut rng, &format!("dec.{l}.cross"));
        ln(&mut w, &format!("dec.{l}.ln3"));
        lin(&mut w, &mut rng, &format!("dec.{l}.ff1"), d, h.ff_dim);
        lin(&mut w, &mut rng, &format!("dec.{l}.ff2"), h.ff_dim, d);
    }
    ln(&mut w, "dec.ln");
    lin(&mut w, &mut rng, "dec.out", d, h.out_dim);
    w
}

fn attn_params<'a>(w: &'a Weights, prefix: &str) -> AttnParams<'a> {
    let n = attn_names(prefix);
    AttnParams {
        wq: w.get(&n[0]),
        bq: w.get(&n[1]),
        wk: w.get(&n[2]),
        bk: w.get(&n[3]),
        wv: w.get(&n[4]),
        bv: w.get(&n[5]),
        wo: w.get(&n[6]),
        bo: w.get(&n[7]),
    }
}

/// Disjoint mutable borrows of every gradient under `prefix.`, keyed by suffix.
fn grads_under<'a>(g: &'a mut Weights, prefix: &str) -> BTreeMap<String, &'a mut Array2<f64>> {
    let p = format!("{prefix}.");
    g.tensors
        .iter_mut()
        .filter_map(|(k, v)| k.strip_prefix(&p).map(|s| (s.to_string(), v)))
        .collect()
}

fn attn_grads<'a>(g: &'a mut Weights, prefix: &str) -> AttnGrads<'a> {
    let mut m = grads_under(g, prefix);
    let mut take = |n: &str| m.remove(n).unwrap_or_else(|| panic!("missing gradient {prefix}.{n}"));
    AttnGrads {
        wq: take("wq"),
        bq: take("bq"),
        wk: take("wk"),
        bk: take("bk"),
        wv: take("wv"),
        bv: take("bv"),
        wo: take("wo"),
        bo: take("bo"),
    }
}

fn lin_fwd(w: &Weights, name: &str, x: &ArrayView2<f64>) -> Mat {
    linear(x, w.get(&format!("{name}.w")), w.get(&format!("{name}.b")))
}

fn lin_back(w: &Weights, g: &mut Weights, name: &str, x: &ArrayView2<f64>, dy: &Mat) -> Mat {
    let mut m = grads_under(g, name);
    let gw = m.remove("w").unwrap();
    let gb = m.remove("b").unwrap();
    linear_back(x, w.get(&format!("{name}.w")), dy, gw, gb)
}

fn ln_fwd(w: &Weights, name: &str, x: &Mat) -> (Mat, LnCache) {
    layer_norm(x, w.get(&format!("{name}.g")), w.get(&format!("{name}.b")))
}

fn ln_back(w: &Weights, g: &mut Weights, name: &str, dy: &Mat, c: &LnCache) -> Mat {
    let mut m = grads_under(g, name);
    let gg = m.remove("g").unwrap();
    let gb = m.remove("b").unwrap();
    layer_norm_back(dy, c, w.get(&format!("{name}.g")), gg, gb)
}

fn ff_fwd(w: &Weights, name: &str, x: &Mat) -> (Mat, FfCache) {
    feed_forward(
        x,
        w.get(&format!("{name}.ff1.w")),
        w.get(&format!("{name}.ff1.b")),
        w.get(&format!("{name}.ff2.w")),
        w.get(&format!("{name}.ff2.b")),
    )
}

fn ff_back(w: &Weights, g: &mut Weights, name: &str, dy: &Mat, c: &FfCache) -> Mat {
    let mut m1 = grads_under(g, &format!("{name}.ff1"));
    let (gw1, gb1) = (m1.remove("w").unwrap(), m1.remove("b").unwrap());
    // ff1 and ff2 borrow disjoint entries but the borrow checker cannot see it
    // through two calls, so ff2's gradients are accumulated into scratch space.
    let mut gw2 = Array2::zeros(w.get(&format!("{name}.ff2.w")).raw_dim());
    let mut gb2 = Array2::zeros(w.get(&format!("{name}.ff2.b")).raw_dim());
    let dx = feed_forward_back(
        dy,
        c,
        w.get(&format!("{name}.ff1.w")),
        w.get(&format!("{name}.ff2.w")),
        gw1,
        gb1,
        &mut gw2,
        &mut gb2,
    );
    *g.get_mut(&format!("{name}.ff2.w")) += &gw2;
    *g.get_mut(&format!("{name}.ff2.b")) += &gb2;
    dx
}

/// Concatenate `stack` consecutive frames; the tail repeats the last frame.
pub fn stack_frames(x: &Mat, stack: usize) -> Mat {
    let (t, m) = x.dim();
    let groups = t.div_ceil(stack).max(1);
    Mat::from_shape_fn((groups, m * stack), |(k, c)| {
        let src = (k * stack + c / m).min(t.saturating_sub(1));
        x[[src, c % m]]
    })
}

struct EncLayerCache {
    ln1: LnCache,
    a1: Mat,
    att: AttnCache,
    ln2: LnCache,
    ff: FfCache,
}

pub struct EncCache {
    stacked: Mat,
    layers: Vec<EncLayerCache>,
    ln_f: LnCache,
}

/// Encode normalized Mel frames (`T x n_mels`).
pub fn encode(w: &Weights, h: &Hyper, mel: &Mat) -> (Mat, EncCache) {
    let stacked = stack_frames(mel, h.stack);
    let mut x = lin_fwd(w, "enc.in", &stacked.view());
    x += &positional_encoding(&h.enc_times(stacked.nrows()), h.d_model, h.pos_rate);
    let mut layers = Vec::with_capacity(h.enc_layers);
    for l in 0..h.enc_layers {
        let p = format!("enc.{l}");
        let (a1, ln1) = ln_fwd(w, &format!("{p}.ln1"), &x);
        let (o, att) = attention(&a1, &a1, &attn_params(w, &format!("{p}.att")), h.heads, false, None);
        x += &o;
        let (a2, ln2) = ln_fwd(w, &format!("{p}.ln2"), &x);
        let (o, ff) = ff_fwd(w, &p, &a2);
        x += &o;
        layers.push(EncLayerCache { ln1, a1, att, ln2, ff });
    }
    let (out, ln_f) = ln_fwd(w, "enc.ln", &x);
    (out, EncCache { stacked, layers, ln_f })
}

pub fn encode_back(w: &Weights, h: &Hyper, d_out: &Mat, c: &EncCache, g: &mut Weights) {
    let mut dx = ln_back(w, g, "enc.ln", d_out, &c.ln_f);
    for l in (0..h.enc_layers).rev() {
        let p = format!("enc.{l}");
        let lc = &c.layers[l];
        let da2 = ff_back(w, g, &p, &dx, &lc.ff);
        dx += &ln_back(w, g, &format!("{p}.ln2"), &da2, &lc.ln2);
        let (dq, dkv) = attention_back(
            &dx,
            &lc.att,
            &attn_params(w, &format!("{p}.att")),
            attn_grads(g, &format!("{p}.att")),
            h.heads,
        );
        let _ = &lc.a1;
        let da1 = dq + dkv;
        dx += &ln_back(w, g, &format!("{p}.ln1"), &da1, &lc.ln1);
    }
    let mut m = grads_under(g, "enc.in");
    let (gw, gb) = (m.remove("w").unwrap(), m.remove("b").unwrap());
    linear_back_params_only(&c.stacked.view(), &dx, gw, gb);
}

struct DecLayerCache {
    ln1: LnCache,
    self_att: AttnCache,
    ln2: LnCache,
    cross: AttnCache,
    ln3: LnCache,
    ff: FfCache,
}

pub struct DecCache {
    prev: Mat,
    layers: Vec<DecLayerCache>,
    ln_f: LnCache,
    hidden: Mat,
}

/// Teacher-forced decoding: row `t` of `prev` is the frame preceding output `t`.
pub fn decode(w: &Weights, h: &Hyper, prev: &Mat, enc_out: &Mat) -> (Mat, DecCache) {
    let mut x = lin_fwd(w, "dec.in", &prev.view());
    x += &positional_encoding(&h.dec_times(prev.nrows()), h.d_model, h.pos_rate);
    let bias = h.cross_bias(&h.dec_times(prev.nrows()), &h.enc_times(enc_out.nrows()));
    let mut layers = Vec::with_capacity(h.dec_layers);
    for l in 0..h.dec_layers {
        let p = format!("dec.{l}");
        let (a, ln1) = ln_fwd(w, &format!("{p}.ln1"), &x);
        let (o, self_att) = attention(&a, &a, &attn_params(w, &format!("{p}.self")), h.heads, true, None);
        x += &o;
        let (a, ln2) = ln_fwd(w, &format!("{p}.ln2"), &x);
        let (o, cross) = attention(
            &a,
            enc_out,
            &attn_params(w, &format!("{p}.cross")),
            h.heads,
            false,
            bias.as_deref(),
        );
        x += &o;
        let (a, ln3) = ln_fwd(w, &format!("{p}.ln3"), &x);
        let (o, ff) = ff_fwd(w, &p, &a);
        x += &o;
        layers.push(DecLayerCache {
            ln1,
            self_att,
            ln2,
            cross,
            ln3,
            ff,
        });
    }
    let (hidden, ln_f) = ln_fwd(w, "dec.ln", &x);
    let y = lin_fwd(w, "dec.out", &hidden.view());
    (
        y,
        DecCache {
            prev: prev.clone(),
            layers,
            ln_f,
            hidden,
        },
    )
}

/// Returns the gradient with respect to the encoder output.
pub fn decode_back(w: &Weights, h: &Hyper, dy: &Mat, c: &DecCache, g: &mut Weights, enc_rows: usize) -> Mat {
    let dhid = lin_back(w, g, "dec.out", &c.hidden.view(), dy);
    let mut dx = ln_back(w, g, "dec.ln", &dhid, &c.ln_f);
    let mut d_enc = Mat::zeros((enc_rows, h.d_model));
    for l in (0..h.dec_layers).rev() {
        let p = format!("dec.{l}");
        let lc = &c.layers[l];
        let da = ff_back(w, g, &p, &dx, &lc.ff);
        dx += &ln_back(w, g, &format!("{p}.ln3"), &da, &lc.ln3);
        let (dq, dkv) = attention_back(
            &dx,
            &lc.cross,
            &attn_params(w, &format!("{p}.cross")),
            attn_grads(g, &format!("{p}.cross")),
            h.heads,
        );
        d_enc += &dkv;
        dx += &ln_back(w, g, &format!("{p}.ln2"), &dq, &lc.ln2);
        let (dq, dkv) = attention_back(
            &dx,
            &lc.self_att,
            &attn_params(w, &format!("{p}.self")),
            attn_grads(g, &format!("{p}.self")),
            h.heads,
        );
        let da = dq + dkv;
        dx += &ln_back(w, g, &format!("{p}.ln1"), &da, &lc.ln1);
    }
    let mut m = grads_under(g, "dec.in");
    let (gw, gb) = (m.remove("w").unwrap(), m.remove("b").unwrap());
    linear_back_params_only(&c.prev.view(), &dx, gw, gb);
    d_enc
}

/// Build the teacher-forcing input: the start frame followed by all but the
/// last target frame.
pub fn shift_right(target: &ArrayView2<f64>, start: &[f64]) -> Mat {
    let (t, d) = target.dim();
    let mut prev = Mat::zeros((t, d));
    prev.row_mut(0).iter_mut().zip(start).for_each(|(p, s)| *p = *s);
    if t > 1 {
        prev.slice_mut(s![1.., ..]).assign(&target.slice(s![..t - 1, ..]));
    }
    prev
}

/// Autoregressive decoder with cached keys and values, one frame per step.
pub struct IncrementalDecoder<'a> {
    w: &'a Weights,
    h: &'a Hyper,
    cross_k: Vec<Mat>,
    cross_v: Vec<Mat>,
    enc_times: Vec<f64>,
    self_k: Vec<Mat>,
    self_v: Vec<Mat>,
    step: usize,
    capacity: usize,
}

impl<'a> IncrementalDecoder<'a> {
    pub fn new(w: &'a Weights, h: &'a Hyper, enc_out: &Mat, capacity: usize) -> Self {
        let mut cross_k = Vec::with_capacity(h.dec_layers);
        let mut cross_v = Vec::with_capacity(h.dec_layers);
        for l in 0..h.dec_layers {
            let p = attn_params(w, &format!("dec.{l}.cross"));
            cross_k.push(linear(&enc_out.view(), p.wk, p.bk));
            cross_v.push(linear(&enc_out.view(), p.wv, p.bv));
        }
        let empty = || Mat::zeros((capacity, h.d_model));
        Self {
            w,
            h,
            cross_k,
            cross_v,
            enc_times: h.enc_times(enc_out.nrows()),
            self_k: (0..h.dec_layers).map(|_| empty()).collect(),
            self_v: (0..h.dec_layers).map(|_| empty()).collect(),
            step: 0,
            capacity,
        }
    }

    fn attend(&self, q: &Mat, k: ArrayView2<f64>, v: ArrayView2<f64>, p: &AttnParams, bias: Option<&[Mat]>) -> Mat {
        let dh = self.h.d_model / self.h.heads;
        let mut ctx = Mat::zeros((1, self.h.d_model));
        for hd in 0..self.h.heads {
            let cols = s![.., hd * dh..(hd + 1) * dh];
            let (c, _) = attend_head(
                q.slice(cols),
                k.slice(cols),
                v.slice(cols),
                false,
                bias.map(|b| b[hd].view()),
            );
            ctx.slice_mut(cols).assign(&c);
        }
        linear(&ctx.view(), p.wo, p.bo)
    }

    /// Feed the previous frame, get the next prediction.
    pub fn next(&mut self, prev: &[f64]) -> Vec<f64> {
        assert!(self.step < self.capacity, "decoder capacity exceeded");
        let (w, h, t) = (self.w, self.h, self.step);
        let prev = Mat::from_shape_vec((1, prev.len()), prev.to_vec()).expect("one row");
        let now = (t as f64 + 0.5) / h.fps_out;
        let bias = h.cross_bias(&[now], &self.enc_times);
        let mut x = lin_fwd(w, "dec.in", &prev.view());
        x += &positional_encoding(&[now], h.d_model, h.pos_rate);
        for l in 0..h.dec_layers {
            let pre = format!("dec.{l}");
            let (a, _) = ln_fwd(w, &format!("{pre}.ln1"), &x);
            let p = attn_params(w, &format!("{pre}.self"));
            let q = linear(&a.view(), p.wq, p.bq);
            self.self_k[l].row_mut(t).assign(&linear(&a.view(), p.wk, p.bk).row(0));
            self.self_v[l].row_mut(t).assign(&linear(&a.view(), p.wv, p.bv).row(0));
            let o = self.attend(
                &q,
                self.self_k[l].slice(s![..=t, ..]),
                self.self_v[l].slice(s![..=t, ..]),
                &p,
                None,
            );
            x += &o;

            let (a, _) = ln_fwd(w, &format!("{pre}.ln2"), &x);
            let p = attn_params(w, &format!("{pre}.cross"));
            let q = linear(&a.view(), p.wq, p.bq);
            let o = self.attend(&q, self.cross_k[l].view(), self.cross_v[l].view(), &p, bias.as_deref());
            x += &o;

            let (a, _) = ln_fwd(w, &format!("{pre}.ln3"), &x);
            let (o, _) = ff_fwd(w, &pre, &a);
            x += &o;
        }
        let (hid, _) = ln_fwd(w, "dec.ln", &x);
        self.step += 1;
        lin_fwd(w, "dec.out", &hid.view()).row(0).to_vec()
    }
}
