//! Forward and backward passes.
//!
//! Only the `valid_len` prefix of a window is computed: padding is never a
//! key, so padded rows cannot influence `[CLS]`. The last layer computes only
//! the `[CLS]` row, the single row the classification head reads.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::layout::{build_layout, row_blocks, RowBlock};
use super::{ClassifierModel, LayerOffsets, ModelError, RowLayout};
use crate::class::NUM_CLASSES;
use crate::real::Real;
use crate::tokenizer::TokenWindow;

const LN_EPS: f64 = 1e-5;

/// Gradient buffer laid out exactly like the model parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T: Real>(pub Vec<T>);

impl<T: Real> Gradients<T> {
    pub fn zeros(len: usize) -> Self {
        Self(vec![T::zero(); len])
    }

    pub fn add_assign(&mut self, other: &Gradients<T>) {
        for (a, &b) in self.0.iter_mut().zip(&other.0) {
            *a += b;
        }
    }

    pub fn scale(&mut self, factor: T) {
        self.0.iter_mut().for_each(|v| *v *= factor);
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }
}

struct LayerCache<T> {
    x: Vec<T>,
    rows: usize,
    q: Vec<T>,
    k: Vec<T>,
    v: Vec<T>,
    blocks: Vec<RowBlock>,
    /// Attention weights per block, `[head][row][block key]`.
    probs: Vec<T>,
    att: Vec<T>,
    drop1: Option<Vec<T>>,
    ln1_xhat: Vec<T>,
    ln1_rstd: Vec<T>,
    h1: Vec<T>,
    u: Vec<T>,
    a: Vec<T>,
    drop2: Option<Vec<T>>,
    ln2_xhat: Vec<T>,
    ln2_rstd: Vec<T>,
}

/// Activations kept from a forward pass for backpropagation.
pub struct ForwardCache<T> {
    ids: Vec<u32>,
    layers: Vec<LayerCache<T>>,
    cls: Vec<T>,
    logits: Vec<T>,
}

impl<T: Real> ForwardCache<T> {
    pub fn logits_f64(&self) -> [f64; NUM_CLASSES] {
        std::array::from_fn(|c| self.logits[c].to_f64_lossy())
    }
}

/// `y[rows x out] = x[rows x inp] * w[inp x out] (+ bias)`.
fn linear<T: Real>(x: &[T], rows: usize, inp: usize, w: &[T], bias: Option<&[T]>, out: usize) -> Vec<T> {
    let mut y = vec![T::zero(); rows * out];
    T::gemm(rows, inp, out, T::one(), x, inp as isize, 1, w, out as isize, 1, T::zero(), &mut y, out as isize, 1);
    if let Some(b) = bias {
        for row in y.chunks_exact_mut(out) {
            for (v, &bb) in row.iter_mut().zip(b) {
                *v += bb;
            }
        }
    }
    y
}

/// Backward of [`linear`]: accumulates `dw += x^T dy`, `db += sum(dy)` and
/// returns `dy w^T` added into `dx`.
#[allow(clippy::too_many_arguments)]
fn linear_backward<T: Real>(
    x: &[T],
    dy: &[T],
    rows: usize,
    inp: usize,
    out: usize,
    w: &[T],
    dw: &mut [T],
    db: Option<&mut [T]>,
    dx: &mut [T],
) {
    T::gemm(inp, rows, out, T::one(), x, 1, inp as isize, dy, out as isize, 1, T::one(), dw, out as isize, 1);
    if let Some(db) = db {
        for row in dy.chunks_exact(out) {
            for (g, &v) in db.iter_mut().zip(row) {
                *g += v;
            }
        }
    }
    T::gemm(rows, out, inp, T::one(), dy, out as isize, 1, w, 1, out as isize, T::one(), dx, inp as isize, 1);
}

fn layer_norm<T: Real>(x: &[T], rows: usize, d: usize, gamma: &[T], beta: &[T]) -> (Vec<T>, Vec<T>, Vec<T>) {
    let eps = T::from_f64_lossy(LN_EPS);
    let inv_d = T::one() / T::from_usize(d).unwrap();
    let mut xhat = vec![T::zero(); rows * d];
    let mut rstd = vec![T::zero(); rows];
    let mut y = vec![T::zero(); rows * d];
    for r in 0..rows {
        let xr = &x[r * d..(r + 1) * d];
        let mean = xr.iter().copied().sum::<T>() * inv_d;
        let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
        let rs = T::one() / (var + eps).sqrt();
        rstd[r] = rs;
        for c in 0..d {
            let xh = (xr[c] - mean) * rs;
            xhat[r * d + c] = xh;
            y[r * d + c] = gamma[c] * xh + beta[c];
        }
    }
    (xhat, rstd, y)
}

fn layer_norm_backward<T: Real>(
    dy: &[T],
    xhat: &[T],
    rstd: &[T],
    rows: usize,
    d: usize,
    gamma: &[T],
    dgamma: &mut [T],
    dbeta: &mut [T],
) -> Vec<T> {
    let inv_d = T::one() / T::from_usize(d).unwrap();
    let mut dx = vec![T::zero(); rows * d];
    let mut dxhat = vec![T::zero(); d];
    for r in 0..rows {
        let dyr = &dy[r * d..(r + 1) * d];
        let xr = &xhat[r * d..(r + 1) * d];
        let mut mean_dxhat = T::zero();
        let mut mean_dxhat_xhat = T::zero();
        for c in 0..d {
            dgamma[c] += dyr[c] * xr[c];
            dbeta[c] += dyr[c];
            dxhat[c] = dyr[c] * gamma[c];
            mean_dxhat += dxhat[c];
            mean_dxhat_xhat += dxhat[c] * xr[c];
        }
        mean_dxhat *= inv_d;
        mean_dxhat_xhat *= inv_d;
        for c in 0..d {
            dx[r * d + c] = rstd[r] * (dxhat[c] - mean_dxhat - xr[c] * mean_dxhat_xhat);
        }
    }
    dx
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

#[inline]
fn gelu<T: Real>(u: T) -> T {
    let c = T::from_f64_lossy(GELU_C);
    let a = T::from_f64_lossy(GELU_A);
    let half = T::from_f64_lossy(0.5);
    half * u * (T::one() + (c * (u + a * u * u * u)).tanh())
}

#[inline]
fn gelu_grad<T: Real>(u: T) -> T {
    let c = T::from_f64_lossy(GELU_C);
    let a = T::from_f64_lossy(GELU_A);
    let half = T::from_f64_lossy(0.5);
    let three = T::from_f64_lossy(3.0);
    let t = (c * (u + a * u * u * u)).tanh();
    half * (T::one() + t) + half * u * (T::one() - t * t) * c * (T::one() + three * a * u * u)
}

fn dropout_mask<T: Real>(len: usize, rate: f64, rng: &mut ChaCha8Rng) -> Vec<T> {
    let keep = T::from_f64_lossy(1.0 / (1.0 - rate));
    (0..len)
        .map(|_| if rng.random::<f64>() < rate { T::zero() } else { keep })
        .collect()
}

/// Copies rows `keys` of the `[_, d]` matrix `src` into `dst`.
fn gather<T: Real>(src: &[T], keys: &[u32], d: usize, dst: &mut Vec<T>) {
    dst.clear();
    for &k in keys {
        dst.extend_from_slice(&src[k as usize * d..(k as usize + 1) * d]);
    }
}

/// Row-wise softmax over the admitted entries of `scores`; the rest become 0.
fn masked_softmax<T: Real>(scores: &mut [T], admit: &[bool], width: usize) {
    for (row, flags) in scores.chunks_exact_mut(width).zip(admit.chunks_exact(width)) {
        let mut max = T::neg_infinity();
        for (&s, &ok) in row.iter().zip(flags) {
            if ok && s > max {
                max = s;
            }
        }
        let mut sum = T::zero();
        for (s, &ok) in row.iter_mut().zip(flags) {
            *s = if ok { (*s - max).exp() } else { T::zero() };
            sum += *s;
        }
        let inv = T::one() / sum;
        row.iter_mut().for_each(|s| *s *= inv);
    }
}

#[inline]
fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut s = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        s += x * y;
    }
    s
}

#[inline]
fn axpy<T: Real>(alpha: T, x: &[T], y: &mut [T]) {
    for (yy, &xx) in y.iter_mut().zip(x) {
        *yy += alpha * xx;
    }
}

impl<T: Real> ClassifierModel<T> {
    fn p(&self, offset: usize, len: usize) -> &[T] {
        &self.params[offset..offset + len]
    }

    /// Forward pass keeping every activation. With `dropout_seed` set, the
    /// pass runs in training mode with seeded dropout masks.
    pub fn forward_cached(&self, window: &TokenWindow, dropout_seed: Option<u64>) -> Result<ForwardCache<T>, ModelError> {
        self.check_window(window)?;
        let cfg = &self.config;
        let d = cfg.d_model;
        let n = window.valid_len;
        let layout = build_layout(&cfg.pattern, cfg.context, n, n)?;
        let mut rng = dropout_seed
            .filter(|_| cfg.dropout > 0.0)
            .map(ChaCha8Rng::seed_from_u64);

        let ids = window.ids[..n].to_vec();
        let mut x = vec![T::zero(); n * d];
        for (t, &id) in ids.iter().enumerate() {
            let tok = self.p(self.layout.tok_emb + id as usize * d, d);
            let pos = self.p(self.layout.pos_emb + t * d, d);
            for c in 0..d {
                x[t * d + c] = tok[c] + pos[c];
            }
        }

        let last = cfg.layers - 1;
        let mut layers = Vec::with_capacity(cfg.layers);
        for (l, off) in self.layout.layers.iter().enumerate() {
            let rows = if l == last { 1 } else { n };
            let (cache, out) = self.layer_forward(off, x, n, rows, &layout, rng.as_mut());
            layers.push(cache);
            x = out;
        }
        let cls = x[..d].to_vec();
        let k = cfg.classes;
        let logits = linear(&cls, 1, d, self.p(self.layout.head_w, d * k), Some(self.p(self.layout.head_b, k)), k);
        if !logits.iter().all(|v| v.is_finite()) {
            return Err(ModelError::NumericalFault("classifier logits".into()));
        }
        Ok(ForwardCache { ids, layers, cls, logits })
    }

    fn layer_forward(
        &self,
        off: &LayerOffsets,
        x: Vec<T>,
        n: usize,
        rows: usize,
        layout: &RowLayout,
        rng: Option<&mut ChaCha8Rng>,
    ) -> (LayerCache<T>, Vec<T>) {
        let cfg = &self.config;
        let d = cfg.d_model;
        let f = cfg.ffn_dim();
        let heads = cfg.heads;
        let dh = cfg.head_dim();
        let scale = T::one() / T::from_usize(dh).unwrap().sqrt();

        let q = linear(&x[..rows * d], rows, d, self.p(off.wq, d * d), Some(self.p(off.bq, d)), d);
        let k = linear(&x, n, d, self.p(off.wk, d * d), Some(self.p(off.bk, d)), d);
        let v = linear(&x, n, d, self.p(off.wv, d * d), Some(self.p(off.bv, d)), d);

        let blocks = row_blocks(layout, rows);
        let mut probs = Vec::new();
        let mut att = vec![T::zero(); rows * d];
        let (mut kg, mut vg) = (Vec::new(), Vec::new());
        for blk in &blocks {
            let (r0, bn, width) = (blk.rows.start, blk.rows.len(), blk.keys.len());
            gather(&k, &blk.keys, d, &mut kg);
            gather(&v, &blk.keys, d, &mut vg);
            let base = probs.len();
            probs.resize(base + heads * bn * width, T::zero());
            for h in 0..heads {
                let hd = h * dh;
                let s = &mut probs[base + h * bn * width..base + (h + 1) * bn * width];
                let (ds, w) = (d as isize, width as isize);
                T::gemm(bn, dh, width, scale, &q[r0 * d + hd..], ds, 1, &kg[hd..], 1, ds, T::zero(), s, w, 1);
                masked_softmax(s, &blk.admit, width);
                T::gemm(bn, width, dh, T::one(), s, w, 1, &vg[hd..], ds, 1, T::zero(), &mut att[r0 * d + hd..], ds, 1);
            }
        }

        let ao = linear(&att, rows, d, self.p(off.wo, d * d), Some(self.p(off.bo, d)), d);
        let mut rng = rng;
        let drop1 = rng.as_deref_mut().map(|r| dropout_mask::<T>(rows * d, cfg.dropout, r));
        let mut r1 = x[..rows * d].to_vec();
        for (idx, val) in r1.iter_mut().enumerate() {
            let m = drop1.as_ref().map_or(T::one(), |m| m[idx]);
            *val += ao[idx] * m;
        }
        let (ln1_xhat, ln1_rstd, h1) = layer_norm(&r1, rows, d, self.p(off.ln1_g, d), self.p(off.ln1_b, d));

        let u = linear(&h1, rows, d, self.p(off.w1, d * f), Some(self.p(off.b1, f)), f);
        let a: Vec<T> = u.iter().map(|&z| gelu(z)).collect();
        let g = linear(&a, rows, f, self.p(off.w2, f * d), Some(self.p(off.b2, d)), d);
        let drop2 = rng.map(|r| dropout_mask::<T>(rows * d, cfg.dropout, r));
        let mut r2 = h1.clone();
        for (idx, val) in r2.iter_mut().enumerate() {
            let m = drop2.as_ref().map_or(T::one(), |m| m[idx]);
            *val += g[idx] * m;
        }
        let (ln2_xhat, ln2_rstd, out) = layer_norm(&r2, rows, d, self.p(off.ln2_g, d), self.p(off.ln2_b, d));

        let cache = LayerCache {
            x,
            rows,
            q,
            k,
            v,
            blocks,
            probs,
            att,
            drop1,
            ln1_xhat,
            ln1_rstd,
            h1,
            u,
            a,
            drop2,
            ln2_xhat,
            ln2_rstd,
        };
        (cache, out)
    }

    /// Backpropagates `dlogits` (gradient of the loss w.r.t. the head's raw
    /// scores) through a cached forward pass.
    pub fn backward(&self, cache: &ForwardCache<T>, dlogits: &[T]) -> Gradients<T> {
        let cfg = &self.config;
        let d = cfg.d_model;
        let k = cfg.classes;
        let mut grads = Gradients::zeros(self.layout.total);
        let g = &mut grads.0;

        let mut dx = vec![T::zero(); d];
        {
            let (hw, hb) = (self.layout.head_w, self.layout.head_b);
            let mut dw = g[hw..hw + d * k].to_vec();
            let mut db = g[hb..hb + k].to_vec();
            linear_backward(&cache.cls, dlogits, 1, d, k, self.p(hw, d * k), &mut dw, Some(&mut db), &mut dx);
            g[hw..hw + d * k].copy_from_slice(&dw);
            g[hb..hb + k].copy_from_slice(&db);
        }

        for (off, lc) in self.layout.layers.iter().zip(&cache.layers).rev() {
            dx = self.layer_backward(off, lc, &dx, g);
        }

        for (t, &id) in cache.ids.iter().enumerate() {
            let row = &dx[t * d..(t + 1) * d];
            let tok = self.layout.tok_emb + id as usize * d;
            let pos = self.layout.pos_emb + t * d;
            for c in 0..d {
                g[tok + c] += row[c];
                g[pos + c] += row[c];
            }
        }
        grads
    }

    fn layer_backward(&self, off: &LayerOffsets, lc: &LayerCache<T>, dout: &[T], g: &mut [T]) -> Vec<T> {
        let cfg = &self.config;
        let d = cfg.d_model;
        let f = cfg.ffn_dim();
        let heads = cfg.heads;
        let dh = cfg.head_dim();
        let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
        let rows = lc.rows;
        let n = lc.x.len() / d;

        // Splits `g` so several parameter gradients can be borrowed at once.
        fn take<T: Real>(g: &mut [T], off: usize, len: usize) -> Vec<T> {
            g[off..off + len].to_vec()
        }
        fn put<T: Real>(g: &mut [T], off: usize, v: &[T]) {
            g[off..off + v.len()].copy_from_slice(v);
        }

        // Second sublayer: layer norm, residual, feed-forward.
        let (mut dg2, mut db2n) = (take(g, off.ln2_g, d), take(g, off.ln2_b, d));
        let dr2 = layer_norm_backward(dout, &lc.ln2_xhat, &lc.ln2_rstd, rows, d, self.p(off.ln2_g, d), &mut dg2, &mut db2n);
        put(g, off.ln2_g, &dg2);
        put(g, off.ln2_b, &db2n);

        let mut dh1 = dr2.clone();
        let dgff: Vec<T> = match &lc.drop2 {
            Some(m) => dr2.iter().zip(m).map(|(&a, &b)| a * b).collect(),
            None => dr2,
        };
        let mut da = vec![T::zero(); rows * f];
        let (mut dw2, mut db2) = (take(g, off.w2, f * d), take(g, off.b2, d));
        linear_backward(&lc.a, &dgff, rows, f, d, self.p(off.w2, f * d), &mut dw2, Some(&mut db2), &mut da);
        put(g, off.w2, &dw2);
        put(g, off.b2, &db2);
        for (dv, &u) in da.iter_mut().zip(&lc.u) {
            *dv *= gelu_grad(u);
        }
        let (mut dw1, mut db1) = (take(g, off.w1, d * f), take(g, off.b1, f));
        linear_backward(&lc.h1, &da, rows, d, f, self.p(off.w1, d * f), &mut dw1, Some(&mut db1), &mut dh1);
        put(g, off.w1, &dw1);
        put(g, off.b1, &db1);

        // First sublayer: layer norm, residual, attention.
        let (mut dg1, mut db1n) = (take(g, off.ln1_g, d), take(g, off.ln1_b, d));
        let dr1 = layer_norm_backward(&dh1, &lc.ln1_xhat, &lc.ln1_rstd, rows, d, self.p(off.ln1_g, d), &mut dg1, &mut db1n);
        put(g, off.ln1_g, &dg1);
        put(g, off.ln1_b, &db1n);

        let mut dx = vec![T::zero(); n * d];
        dx[..rows * d].copy_from_slice(&dr1);
        let dao: Vec<T> = match &lc.drop1 {
            Some(m) => dr1.iter().zip(m).map(|(&a, &b)| a * b).collect(),
            None => dr1,
        };
        let mut datt = vec![T::zero(); rows * d];
        let (mut dwo, mut dbo) = (take(g, off.wo, d * d), take(g, off.bo, d));
        linear_backward(&lc.att, &dao, rows, d, d, self.p(off.wo, d * d), &mut dwo, Some(&mut dbo), &mut datt);
        put(g, off.wo, &dwo);
        put(g, off.bo, &dbo);

        let mut dq = vec![T::zero(); rows * d];
        let mut dk = vec![T::zero(); n * d];
        let mut dv = vec![T::zero(); n * d];
        let (mut kg, mut vg) = (Vec::new(), Vec::new());
        let mut base = 0;
        for blk in &lc.blocks {
            let (r0, bn, width) = (blk.rows.start, blk.rows.len(), blk.keys.len());
            let (ds, w) = (d as isize, width as isize);
            gather(&lc.k, &blk.keys, d, &mut kg);
            gather(&lc.v, &blk.keys, d, &mut vg);
            let mut dkg = vec![T::zero(); width * d];
            let mut dvg = vec![T::zero(); width * d];
            let mut dsc = vec![T::zero(); bn * width];
            for h in 0..heads {
                let hd = h * dh;
                let p = &lc.probs[base + h * bn * width..base + (h + 1) * bn * width];
                let da = &datt[r0 * d + hd..];
                // dP = dA V^T, dV += P^T dA
                T::gemm(bn, dh, width, T::one(), da, ds, 1, &vg[hd..], 1, ds, T::zero(), &mut dsc, w, 1);
                T::gemm(width, bn, dh, T::one(), p, 1, w, da, ds, 1, T::one(), &mut dvg[hd..], ds, 1);
                // Softmax backward; masked entries have p = 0 and stay 0.
                for (row, pr) in dsc.chunks_exact_mut(width).zip(p.chunks_exact(width)) {
                    let weighted = dot(pr, row);
                    for (x, &pp) in row.iter_mut().zip(pr) {
                        *x = pp * (*x - weighted) * scale;
                    }
                }
                T::gemm(bn, width, dh, T::one(), &dsc, w, 1, &kg[hd..], ds, 1, T::one(), &mut dq[r0 * d + hd..], ds, 1);
                T::gemm(width, bn, dh, T::one(), &dsc, 1, w, &lc.q[r0 * d + hd..], ds, 1, T::one(), &mut dkg[hd..], ds, 1);
            }
            for (slot, &key) in blk.keys.iter().enumerate() {
                let key = key as usize;
                axpy(T::one(), &dkg[slot * d..(slot + 1) * d], &mut dk[key * d..(key + 1) * d]);
                axpy(T::one(), &dvg[slot * d..(slot + 1) * d], &mut dv[key * d..(key + 1) * d]);
            }
            base += heads * bn * width;
        }

        let (mut dwq, mut dbq) = (take(g, off.wq, d * d), take(g, off.bq, d));
        linear_backward(&lc.x[..rows * d], &dq, rows, d, d, self.p(off.wq, d * d), &mut dwq, Some(&mut dbq), &mut dx[..rows * d]);
        put(g, off.wq, &dwq);
        put(g, off.bq, &dbq);
        let (mut dwk, mut dbk) = (take(g, off.wk, d * d), take(g, off.bk, d));
        linear_backward(&lc.x, &dk, n, d, d, self.p(off.wk, d * d), &mut dwk, Some(&mut dbk), &mut dx);
        put(g, off.wk, &dwk);
        put(g, off.bk, &dbk);
        let (mut dwv, mut dbv) = (take(g, off.wv, d * d), take(g, off.bv, d));
        linear_backward(&lc.x, &dv, n, d, d, self.p(off.wv, d * d), &mut dwv, Some(&mut dbv), &mut dx);
        put(g, off.wv, &dwv);
        put(g, off.bv, &dbv);
        dx
    }
}
