//! Building blocks with hand-written forward and backward passes.
//!
//! Every `forward` returns the output plus a cache holding what `backward`
//! needs; `apply` is the cache-free inference path. Backward passes only
//! accumulate into gradient buffers of trainable tensors but always return
//! the input gradient.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::params::{Grads, ParamId, ParamStore};
use super::tensor::{accumulate_tn, dot, matmul_nn, matmul_nt, softmax_in_place, Mat, Scalar};

const LN_EPS: f64 = 1e-5;
const MASK_VALUE: f64 = -1e9;

/// Forward-pass context: parameters plus the dropout RNG when training.
pub(crate) struct Fwd<'a, S> {
    pub store: &'a ParamStore<S>,
    pub rng: Option<&'a mut ChaCha8Rng>,
}

impl<S: Scalar> Fwd<'_, S> {
    /// Inverted-dropout mask (entries 0 or 1/(1-p)), `None` when inactive.
    pub fn dropout_mask(&mut self, len: usize, p: f64) -> Option<Vec<S>> {
        let rng = self.rng.as_deref_mut()?;
        if p <= 0.0 {
            return None;
        }
        let keep = S::c(1.0 / (1.0 - p));
        Some(
            (0..len)
                .map(|_| if rng.random::<f64>() < p { S::zero() } else { keep })
                .collect(),
        )
    }
}

fn apply_mask<S: Scalar>(m: &mut Mat<S>, mask: &Option<Vec<S>>) {
    if let Some(mask) = mask {
        for (v, k) in m.data.iter_mut().zip(mask) {
            *v *= *k;
        }
    }
}

/// Residual dropout helper shared by the transformer blocks.
pub(crate) fn dropout<S: Scalar>(f: &mut Fwd<'_, S>, mut x: Mat<S>, p: f64) -> (Mat<S>, Option<Vec<S>>) {
    let mask = f.dropout_mask(x.data.len(), p);
    apply_mask(&mut x, &mask);
    (x, mask)
}

pub(crate) fn dropout_backward<S: Scalar>(mut dy: Mat<S>, mask: &Option<Vec<S>>) -> Mat<S> {
    apply_mask(&mut dy, mask);
    dy
}

/// Low-rank adapter attached to a [`Linear`].
#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    /// `r × d_in`
    pub a: ParamId,
    /// `d_out × r`
    pub b: ParamId,
    pub r: usize,
    pub scale: f64,
    pub dropout_p: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub name: String,
    /// `d_out × d_in`
    pub w: ParamId,
    pub bias: ParamId,
    pub d_in: usize,
    pub d_out: usize,
    pub lora: Option<LoraAdapter>,
}

pub(crate) struct LinearCache<S> {
    x: Mat<S>,
    lora: Option<LoraCache<S>>,
}

struct LoraCache<S> {
    mask: Option<Vec<S>>,
    /// dropped-out input, only stored when a mask was drawn
    xd: Option<Mat<S>>,
    u: Mat<S>,
}

impl Linear {
    fn base<S: Scalar>(&self, store: &ParamStore<S>, x: &Mat<S>) -> Mat<S> {
        let mut y = matmul_nt(x, store.get(self.w), self.d_out);
        let b = store.get(self.bias);
        for t in 0..y.rows {
            for (v, bi) in y.row_mut(t).iter_mut().zip(b) {
                *v += *bi;
            }
        }
        y
    }

    fn add_lora<S: Scalar>(store: &ParamStore<S>, lora: &LoraAdapter, d_out: usize, xd: &Mat<S>, y: &mut Mat<S>) -> Mat<S> {
        let u = matmul_nt(xd, store.get(lora.a), lora.r);
        let mut v = matmul_nt(&u, store.get(lora.b), d_out);
        v.scale(S::c(lora.scale));
        y.add_assign(&v);
        u
    }

    pub(crate) fn forward<S: Scalar>(&self, f: &mut Fwd<'_, S>, x: &Mat<S>) -> (Mat<S>, LinearCache<S>) {
        let mut y = self.base(f.store, x);
        let lora = self.lora.as_ref().map(|lora| {
            let mask = f.dropout_mask(x.data.len(), lora.dropout_p);
            let xd = mask.as_ref().map(|_| {
                let mut xd = x.clone();
                apply_mask(&mut xd, &mask);
                xd
            });
            let u = Self::add_lora(f.store, lora, self.d_out, xd.as_ref().unwrap_or(x), &mut y);
            LoraCache { mask, xd, u }
        });
        (
            y,
            LinearCache {
                x: x.clone(),
                lora,
            },
        )
    }

    pub(crate) fn apply<S: Scalar>(&self, store: &ParamStore<S>, x: &Mat<S>) -> Mat<S> {
        let mut y = self.base(store, x);
        if let Some(lora) = &self.lora {
            Self::add_lora(store, lora, self.d_out, x, &mut y);
        }
        y
    }

    pub(crate) fn backward<S: Scalar>(
        &self,
        store: &ParamStore<S>,
        grads: &mut Grads<S>,
        cache: &LinearCache<S>,
        dy: &Mat<S>,
    ) -> Mat<S> {
        if store.trainable(self.w) {
            accumulate_tn(dy, &cache.x, grads.get_mut(self.w));
        }
        if store.trainable(self.bias) {
            let db = grads.get_mut(self.bias);
            for t in 0..dy.rows {
                for (g, d) in db.iter_mut().zip(dy.row(t)) {
                    *g += *d;
                }
            }
        }
        let mut dx = matmul_nn(dy, store.get(self.w), self.d_in);
        if let (Some(lora), Some(lc)) = (&self.lora, &cache.lora) {
            let mut dv = dy.clone();
            dv.scale(S::c(lora.scale));
            if store.trainable(lora.b) {
                accumulate_tn(&dv, &lc.u, grads.get_mut(lora.b));
            }
            let du = matmul_nn(&dv, store.get(lora.b), lora.r);
            if store.trainable(lora.a) {
                accumulate_tn(&du, lc.xd.as_ref().unwrap_or(&cache.x), grads.get_mut(lora.a));
            }
            let mut dxd = matmul_nn(&du, store.get(lora.a), self.d_in);
            apply_mask(&mut dxd, &lc.mask);
            dx.add_assign(&dxd);
        }
        dx
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
    pub d: usize,
}

pub(crate) struct LayerNormCache<S> {
    xhat: Mat<S>,
    inv_std: Vec<S>,
}

impl LayerNorm {
    fn normalize<S: Scalar>(&self, x: &Mat<S>) -> (Mat<S>, Vec<S>) {
        let d = S::c(self.d as f64);
        let mut xhat = Mat::zeros(x.rows, x.cols);
        let mut inv_std = Vec::with_capacity(x.rows);
        for t in 0..x.rows {
            let row = x.row(t);
            let mean = row.iter().copied().sum::<S>() / d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / d;
            let is = S::one() / (var + S::c(LN_EPS)).sqrt();
            for (o, &v) in xhat.row_mut(t).iter_mut().zip(row) {
                *o = (v - mean) * is;
            }
            inv_std.push(is);
        }
        (xhat, inv_std)
    }

    fn affine<S: Scalar>(&self, store: &ParamStore<S>, xhat: &Mat<S>) -> Mat<S> {
        let g = store.get(self.gain);
        let b = store.get(self.bias);
        let mut y = xhat.clone();
        for t in 0..y.rows {
            for ((v, gi), bi) in y.row_mut(t).iter_mut().zip(g).zip(b) {
                *v = *v * *gi + *bi;
            }
        }
        y
    }

    pub(crate) fn forward<S: Scalar>(&self, store: &ParamStore<S>, x: &Mat<S>) -> (Mat<S>, LayerNormCache<S>) {
        let (xhat, inv_std) = self.normalize(x);
        let y = self.affine(store, &xhat);
        (y, LayerNormCache { xhat, inv_std })
    }

    pub(crate) fn apply<S: Scalar>(&self, store: &ParamStore<S>, x: &Mat<S>) -> Mat<S> {
        self.affine(store, &self.normalize(x).0)
    }

    pub(crate) fn backward<S: Scalar>(
        &self,
        store: &ParamStore<S>,
        grads: &mut Grads<S>,
        cache: &LayerNormCache<S>,
        dy: &Mat<S>,
    ) -> Mat<S> {
        let d = S::c(self.d as f64);
        let g = store.get(self.gain);
        if store.trainable(self.gain) {
            let dg = grads.get_mut(self.gain);
            for t in 0..dy.rows {
                for ((acc, &dv), &xh) in dg.iter_mut().zip(dy.row(t)).zip(cache.xhat.row(t)) {
                    *acc += dv * xh;
                }
            }
        }
        if store.trainable(self.bias) {
            let db = grads.get_mut(self.bias);
            for t in 0..dy.rows {
                for (acc, &dv) in db.iter_mut().zip(dy.row(t)) {
                    *acc += dv;
                }
            }
        }
        let mut dx = Mat::zeros(dy.rows, dy.cols);
        let mut dxhat = vec![S::zero(); self.d];
        for t in 0..dy.rows {
            for ((o, &dv), &gi) in dxhat.iter_mut().zip(dy.row(t)).zip(g) {
                *o = dv * gi;
            }
            let xh = cache.xhat.row(t);
            let mean_d = dxhat.iter().copied().sum::<S>() / d;
            let mean_dx = dot(&dxhat, xh) / d;
            let is = cache.inv_std[t];
            for ((o, &dh), &x) in dx.row_mut(t).iter_mut().zip(&dxhat).zip(xh) {
                *o = is * (dh - mean_d - x * mean_dx);
            }
        }
        dx
    }
}

/// Multi-head scaled dot-product attention.
#[derive(Debug, Clone, PartialEq)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub n_heads: usize,
    pub d_model: usize,
}

pub(crate) struct AttentionCache<S> {
    qc: LinearCache<S>,
    kc: LinearCache<S>,
    vc: LinearCache<S>,
    oc: LinearCache<S>,
    q: Mat<S>,
    k: Mat<S>,
    v: Mat<S>,
    /// per-head attention probabilities, `tq × tk`
    probs: Vec<Mat<S>>,
}

impl Attention {
    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Attention core on already-projected q/k/v. `key_masked[j]` hides key j;
    /// with `causal`, query i only sees keys `0..=i + causal_offset`.
    pub(crate) fn attend<S: Scalar>(
        &self,
        q: &Mat<S>,
        k: &Mat<S>,
        v: &Mat<S>,
        key_masked: &[bool],
        causal: Option<usize>,
    ) -> (Mat<S>, Vec<Mat<S>>) {
        let dh = self.head_dim();
        let scale = S::c(1.0 / (dh as f64).sqrt());
        let (tq, tk) = (q.rows, k.rows);
        let mut out = Mat::zeros(tq, self.d_model);
        let mut probs = Vec::with_capacity(self.n_heads);
        for h in 0..self.n_heads {
            let cols = h * dh..(h + 1) * dh;
            let mut p = Mat::zeros(tq, tk);
            for i in 0..tq {
                let qi = &q.row(i)[cols.clone()];
                let row = p.row_mut(i);
                for j in 0..tk {
                    let hidden = key_masked[j] || causal.is_some_and(|off| j > i + off);
                    row[j] = if hidden {
                        S::c(MASK_VALUE)
                    } else {
                        dot(qi, &k.row(j)[cols.clone()]) * scale
                    };
                }
                softmax_in_place(row);
                let orow = &mut out.row_mut(i)[cols.clone()];
                for j in 0..tk {
                    let pij = p.row(i)[j];
                    if pij != S::zero() {
                        for (o, &vv) in orow.iter_mut().zip(&v.row(j)[cols.clone()]) {
                            *o += pij * vv;
                        }
                    }
                }
            }
            probs.push(p);
        }
        (out, probs)
    }

    pub(crate) fn forward<S: Scalar>(
        &self,
        f: &mut Fwd<'_, S>,
        xq: &Mat<S>,
        xkv: &Mat<S>,
        key_masked: &[bool],
        causal: bool,
    ) -> (Mat<S>, AttentionCache<S>) {
        let (q, qc) = self.q.forward(f, xq);
        let (k, kc) = self.k.forward(f, xkv);
        let (v, vc) = self.v.forward(f, xkv);
        let (ctx, probs) = self.attend(&q, &k, &v, key_masked, causal.then_some(0));
        let (out, oc) = self.o.forward(f, &ctx);
        (
            out,
            AttentionCache {
                qc,
                kc,
                vc,
                oc,
                q,
                k,
                v,
                probs,
            },
        )
    }

    /// Returns `(d_xq, d_xkv)`.
    pub(crate) fn backward<S: Scalar>(
        &self,
        store: &ParamStore<S>,
        grads: &mut Grads<S>,
        c: &AttentionCache<S>,
        dout: &Mat<S>,
    ) -> (Mat<S>, Mat<S>) {
        let dh = self.head_dim();
        let scale = S::c(1.0 / (dh as f64).sqrt());
        let dctx = self.o.backward(store, grads, &c.oc, dout);
        let (tq, tk) = (c.q.rows, c.k.rows);
        let mut dq = Mat::zeros(tq, self.d_model);
        let mut dk = Mat::zeros(tk, self.d_model);
        let mut dv = Mat::zeros(tk, self.d_model);
        let mut ds = vec![S::zero(); tk];
        for h in 0..self.n_heads {
            let cols = h * dh..(h + 1) * dh;
            let p = &c.probs[h];
            for i in 0..tq {
                let dci = &dctx.row(i)[cols.clone()];
                let pi = p.row(i);
                let mut weighted = S::zero();
                for j in 0..tk {
                    let dp = dot(dci, &c.v.row(j)[cols.clone()]);
                    ds[j] = dp;
                    weighted += dp * pi[j];
                    if pi[j] != S::zero() {
                        for (g, &d) in dv.row_mut(j)[cols.clone()].iter_mut().zip(dci) {
                            *g += pi[j] * d;
                        }
                    }
                }
                for j in 0..tk {
                    let s = pi[j] * (ds[j] - weighted) * scale;
                    if s == S::zero() {
                        continue;
                    }
                    for (g, &kv) in dq.row_mut(i)[cols.clone()].iter_mut().zip(&c.k.row(j)[cols.clone()]) {
                        *g += s * kv;
                    }
                    for (g, &qv) in dk.row_mut(j)[cols.clone()].iter_mut().zip(&c.q.row(i)[cols.clone()]) {
                        *g += s * qv;
                    }
                }
            }
        }
        let dxq = self.q.backward(store, grads, &c.qc, &dq);
        let mut dxkv = self.k.backward(store, grads, &c.kc, &dk);
        dxkv.add_assign(&self.v.backward(store, grads, &c.vc, &dv));
        (dxq, dxkv)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu<S: Scalar>(x: S) -> S {
    let inner = S::c(GELU_C) * (x + S::c(GELU_A) * x * x * x);
    S::c(0.5) * x * (S::one() + inner.tanh())
}

fn gelu_grad<S: Scalar>(x: S) -> S {
    let inner = S::c(GELU_C) * (x + S::c(GELU_A) * x * x * x);
    let t = inner.tanh();
    let dinner = S::c(GELU_C) * (S::one() + S::c(3.0 * GELU_A) * x * x);
    S::c(0.5) * (S::one() + t) + S::c(0.5) * x * (S::one() - t * t) * dinner
}

/// Position-wise feed-forward block: `down(gelu(up(x)))`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

pub(crate) struct FeedForwardCache<S> {
    up: LinearCache<S>,
    pre: Mat<S>,
    down: LinearCache<S>,
}

impl FeedForward {
    pub(crate) fn forward<S: Scalar>(&self, f: &mut Fwd<'_, S>, x: &Mat<S>) -> (Mat<S>, FeedForwardCache<S>) {
        let (pre, up) = self.up.forward(f, x);
        let mut act = pre.clone();
        act.data.iter_mut().for_each(|v| *v = gelu(*v));
        let (y, down) = self.down.forward(f, &act);
        (y, FeedForwardCache { up, pre, down })
    }

    pub(crate) fn apply<S: Scalar>(&self, store: &ParamStore<S>, x: &Mat<S>) -> Mat<S> {
        let mut act = self.up.apply(store, x);
        act.data.iter_mut().for_each(|v| *v = gelu(*v));
        self.down.apply(store, &act)
    }

    pub(crate) fn backward<S: Scalar>(
        &self,
        store: &ParamStore<S>,
        grads: &mut Grads<S>,
        c: &FeedForwardCache<S>,
        dy: &Mat<S>,
    ) -> Mat<S> {
        let mut dact = self.down.backward(store, grads, &c.down, dy);
        for (g, &x) in dact.data.iter_mut().zip(&c.pre.data) {
            *g *= gelu_grad(x);
        }
        self.up.backward(store, grads, &c.up, &dact)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gelu_derivative_matches_difference() {
        for &x in &[-3.0f64, -0.7, 0.0, 0.3, 2.5] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8, "x={x}");
        }
    }
}
