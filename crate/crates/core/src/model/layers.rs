//! Transformer building blocks with explicit backward passes. Every forward
//! returns a cache holding exactly what its backward needs.

use ndarray::{s, Array1, Array2, ArrayView2, Axis, Zip};

use crate::scalar::Scalar;

use super::params::{AttentionParams, FfnParams, LayerNormParams};

pub const LN_EPS: f64 = 1e-5;

pub struct LnCache<T> {
    xhat: Array2<T>,
    inv_std: Array1<T>,
}

pub fn ln_forward<T: Scalar>(x: &Array2<T>, p: &LayerNormParams<T>) -> (Array2<T>, LnCache<T>) {
    let d = T::lit(x.ncols() as f64);
    let eps = T::lit(LN_EPS);
    let mut xhat = x.clone();
    let mut inv_std = Array1::zeros(x.nrows());
    for (mut row, inv) in xhat.rows_mut().into_iter().zip(inv_std.iter_mut()) {
        let mean = row.sum() / d;
        row.mapv_inplace(|v| v - mean);
        let var = row.iter().map(|&v| v * v).sum::<T>() / d;
        *inv = T::one() / (var + eps).sqrt();
        let s = *inv;
        row.mapv_inplace(|v| v * s);
    }
    let y = &xhat * &p.gamma + &p.beta;
    (y, LnCache { xhat, inv_std })
}

pub fn ln_backward<T: Scalar>(
    dy: &Array2<T>,
    cache: &LnCache<T>,
    p: &LayerNormParams<T>,
    grad: &mut LayerNormParams<T>,
) -> Array2<T> {
    grad.gamma += &(dy * &cache.xhat).sum_axis(Axis(0));
    grad.beta += &dy.sum_axis(Axis(0));
    let d = T::lit(dy.ncols() as f64);
    let mut dx = dy * &p.gamma;
    for ((mut row, xhat), &inv) in dx
        .rows_mut()
        .into_iter()
        .zip(cache.xhat.rows())
        .zip(cache.inv_std.iter())
    {
        let sum = row.sum();
        let dot = row.dot(&xhat);
        Zip::from(&mut row).and(&xhat).for_each(|g, &xh| {
            *g = inv * (*g * d - sum - xh * dot) / d;
        });
    }
    dx
}

/// Single-row layer norm, used by the row-at-a-time decoder.
pub fn ln_row<T: Scalar>(x: &Array1<T>, p: &LayerNormParams<T>) -> Array1<T> {
    let d = T::lit(x.len() as f64);
    let mean = x.sum() / d;
    let centered = x.mapv(|v| v - mean);
    let var = centered.iter().map(|&v| v * v).sum::<T>() / d;
    let inv = T::one() / (var + T::lit(LN_EPS)).sqrt();
    centered * inv * &p.gamma + &p.beta
}

const GELU_C: f64 = 0.044_715;

#[inline]
fn gelu_k<T: Scalar>() -> T {
    T::lit((2.0 / std::f64::consts::PI).sqrt())
}

/// `tanh(k·(x + c·x³))`, the inner term of the GELU approximation, via one `exp`.
#[inline]
fn gelu_tanh<T: Scalar>(x: T) -> T {
    let z = gelu_k::<T>() * (x + T::lit(GELU_C) * x * x * x);
    T::one() - T::lit(2.0) / ((z + z).exp() + T::one())
}

#[inline]
fn gelu_from_tanh<T: Scalar>(x: T, t: T) -> T {
    T::lit(0.5) * x * (T::one() + t)
}

#[inline]
fn gelu_grad_from_tanh<T: Scalar>(x: T, t: T) -> T {
    let half = T::lit(0.5);
    let poly = T::one() + T::lit(3.0 * GELU_C) * x * x;
    half * (T::one() + t) + half * x * (T::one() - t * t) * gelu_k::<T>() * poly
}

/// Tanh approximation of GELU.
#[inline]
pub fn gelu<T: Scalar>(x: T) -> T {
    gelu_from_tanh(x, gelu_tanh(x))
}

#[inline]
pub fn gelu_grad<T: Scalar>(x: T) -> T {
    gelu_grad_from_tanh(x, gelu_tanh(x))
}

pub struct FfnCache<T> {
    x: Array2<T>,
    pre: Array2<T>,
    tanh: Array2<T>,
    act: Array2<T>,
}

pub fn ffn_forward<T: Scalar>(x: &Array2<T>, p: &FfnParams<T>) -> (Array2<T>, FfnCache<T>) {
    let pre = x.dot(&p.w1);
    let tanh = pre.mapv(gelu_tanh);
    let act = Zip::from(&pre).and(&tanh).map_collect(|&x, &t| gelu_from_tanh(x, t));
    let y = act.dot(&p.w2);
    (
        y,
        FfnCache {
            x: x.clone(),
            pre,
            tanh,
            act,
        },
    )
}

pub fn ffn_backward<T: Scalar>(
    dy: &Array2<T>,
    cache: &FfnCache<T>,
    p: &FfnParams<T>,
    grad: &mut FfnParams<T>,
) -> Array2<T> {
    grad.w2 += &cache.act.t().dot(dy);
    let mut dpre = dy.dot(&p.w2.t());
    Zip::from(&mut dpre)
        .and(&cache.pre)
        .and(&cache.tanh)
        .for_each(|g, &x, &t| *g *= gelu_grad_from_tanh(x, t));
    grad.w1 += &cache.x.t().dot(&dpre);
    dpre.dot(&p.w1.t())
}

pub fn ffn_row<T: Scalar>(x: &Array1<T>, p: &FfnParams<T>) -> Array1<T> {
    x.dot(&p.w1).mapv(gelu).dot(&p.w2)
}

pub struct AttnCache<T> {
    xq: Array2<T>,
    xkv: Array2<T>,
    q: Array2<T>,
    k: Array2<T>,
    v: Array2<T>,
    /// One `Lq × Lk` attention matrix per head.
    probs: Vec<Array2<T>>,
    ctx: Array2<T>,
}

impl<T> AttnCache<T> {
    pub fn probs(&self) -> &[Array2<T>] {
        &self.probs
    }
}

fn softmax_inplace<T: Scalar>(mut s: ndarray::ArrayViewMut2<'_, T>) {
    for mut row in s.rows_mut() {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        row.mapv_inplace(|x| (x - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|x| x / sum);
    }
}

/// Multi-head attention of `xq` over `xkv`. With `causal`, query `i` sees keys
/// `0..=i` only.
pub fn attn_forward<T: Scalar>(
    xq: &Array2<T>,
    xkv: &Array2<T>,
    p: &AttentionParams<T>,
    heads: usize,
    causal: bool,
) -> (Array2<T>, AttnCache<T>) {
    let d = p.wq.ncols();
    let dh = d / heads;
    let scale = T::lit(1.0 / (dh as f64).sqrt());
    let q = xq.dot(&p.wq);
    let k = xkv.dot(&p.wk);
    let v = xkv.dot(&p.wv);
    let mut ctx = Array2::zeros((xq.nrows(), d));
    let mut probs = Vec::with_capacity(heads);
    for h in 0..heads {
        let cols = s![.., h * dh..(h + 1) * dh];
        let mut scores = q.slice(cols).dot(&k.slice(cols).t());
        scores.mapv_inplace(|x| x * scale);
        if causal {
            for (i, mut row) in scores.rows_mut().into_iter().enumerate() {
                row.slice_mut(s![i + 1..]).fill(T::neg_infinity());
            }
        }
        softmax_inplace(scores.view_mut());
        ctx.slice_mut(cols).assign(&scores.dot(&v.slice(cols)));
        probs.push(scores);
    }
    let out = ctx.dot(&p.wo);
    let cache = AttnCache {
        xq: xq.clone(),
        xkv: xkv.clone(),
        q,
        k,
        v,
        probs,
        ctx,
    };
    (out, cache)
}

/// Returns `(d_xq, d_xkv)`.
pub fn attn_backward<T: Scalar>(
    dout: &Array2<T>,
    cache: &AttnCache<T>,
    p: &AttentionParams<T>,
    grad: &mut AttentionParams<T>,
) -> (Array2<T>, Array2<T>) {
    let heads = cache.probs.len();
    let d = p.wq.ncols();
    let dh = d / heads;
    let scale = T::lit(1.0 / (dh as f64).sqrt());
    grad.wo += &cache.ctx.t().dot(dout);
    let dctx = dout.dot(&p.wo.t());
    let mut dq = Array2::zeros(cache.q.raw_dim());
    let mut dk = Array2::zeros(cache.k.raw_dim());
    let mut dv = Array2::zeros(cache.v.raw_dim());
    for (h, a) in cache.probs.iter().enumerate() {
        let cols = s![.., h * dh..(h + 1) * dh];
        let dctx_h = dctx.slice(cols);
        let mut ds = dctx_h.dot(&cache.v.slice(cols).t());
        dv.slice_mut(cols).assign(&a.t().dot(&dctx_h));
        for (mut g, arow) in ds.rows_mut().into_iter().zip(a.rows()) {
            let inner = g.dot(&arow);
            Zip::from(&mut g)
                .and(&arow)
                .for_each(|g, &p| *g = p * (*g - inner) * scale);
        }
        dq.slice_mut(cols).assign(&ds.dot(&cache.k.slice(cols)));
        dk.slice_mut(cols).assign(&ds.t().dot(&cache.q.slice(cols)));
    }
    grad.wq += &cache.xq.t().dot(&dq);
    grad.wk += &cache.xkv.t().dot(&dk);
    grad.wv += &cache.xkv.t().dot(&dv);
    let dxq = dq.dot(&p.wq.t());
    let dxkv = dk.dot(&p.wk.t()) + dv.dot(&p.wv.t());
    (dxq, dxkv)
}

/// One query row against precomputed keys and values, head by head.
pub fn attn_row<T: Scalar>(
    xq: &Array1<T>,
    keys: ArrayView2<'_, T>,
    values: ArrayView2<'_, T>,
    p: &AttentionParams<T>,
    heads: usize,
) -> Array1<T> {
    let d = p.wq.ncols();
    let dh = d / heads;
    let scale = T::lit(1.0 / (dh as f64).sqrt());
    let q = xq.dot(&p.wq);
    let mut ctx = Array1::zeros(d);
    for h in 0..heads {
        let range = h * dh..(h + 1) * dh;
        let qh = q.slice(s![range.clone()]);
        let mut weights: Vec<T> = keys
            .rows()
            .into_iter()
            .map(|k| qh.dot(&k.slice(s![range.clone()])) * scale)
            .collect();
        let max = weights.iter().copied().fold(T::neg_infinity(), T::max);
        let mut total = T::zero();
        for w in weights.iter_mut() {
            *w = (*w - max).exp();
            total += *w;
        }
        let mut out = ctx.slice_mut(s![range.clone()]);
        for (w, vrow) in weights.iter().zip(values.rows()) {
            out.scaled_add(*w / total, &vrow.slice(s![range.clone()]));
        }
    }
    ctx.dot(&p.wo)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn reference(x: f64) -> f64 {
        0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + GELU_C * x.powi(3))).tanh())
    }

    #[test]
    fn gelu_matches_tanh_form() {
        for i in -400..=400 {
            let x = i as f64 / 40.0;
            assert!((gelu(x) - reference(x)).abs() < 1e-12, "{x}");
            assert!((gelu(x as f32) as f64 - reference(x)).abs() < 1e-5, "{x}");
            let fd = (reference(x + 1e-6) - reference(x - 1e-6)) / 2e-6;
            assert!((gelu_grad(x) - fd).abs() < 1e-7, "{x}");
        }
        for x in [-1e4f32, -88.0, 88.0, 1e4] {
            assert!(gelu(x).is_finite() && gelu_grad(x).is_finite());
        }
        assert_eq!(gelu(1e4f32), 1e4);
        assert_eq!(gelu(-1e4f32), 0.0);
    }

    #[test]
    fn layer_norm_standardizes_rows() {
        let x: Array2<f64> = array![[1.0, 2.0, 3.0, 4.0], [-5.0, 0.0, 5.0, 10.0]];
        let p = LayerNormParams {
            gamma: Array1::ones(4),
            beta: Array1::zeros(4),
        };
        let (y, _) = ln_forward(&x, &p);
        for (row, src) in y.rows().into_iter().zip(x.rows()) {
            assert!(row.mean().unwrap().abs() < 1e-12);
            let var = row.mapv(|v| v * v).mean().unwrap();
            let src_var = src.var(0.0);
            assert!((var - src_var / (src_var + LN_EPS)).abs() < 1e-12);
            assert_eq!(ln_row(&src.to_owned(), &p), row);
        }
    }
}
