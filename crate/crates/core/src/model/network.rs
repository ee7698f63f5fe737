//! Encoder, spatially conditioned decoder and the tied output projection.

use ndarray::{s, Array1, Array2, Axis};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::vocab::EmbeddingMatrix;

use super::layers::{
    attn_backward, attn_forward, attn_row, ffn_backward, ffn_forward, ffn_row, ln_backward, ln_forward, ln_row,
    AttnCache, FfnCache, LnCache,
};
use super::params::{DecoderLayer, EncoderLayer, ModelConfig, ModelParams};

/// Contextualized embeddings, `L_x × D`.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderOutput<T> {
    pub ctx: Array2<T>,
}

/// One decoder output per image token, `L_I × D`.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderOutput<T> {
    pub h: Array2<T>,
}

pub(crate) struct EncLayerCache<T> {
    ln1: LnCache<T>,
    attn: AttnCache<T>,
    ln2: LnCache<T>,
    ffn: FfnCache<T>,
}

#[cfg(test)]
impl<T> EncLayerCache<T> {
    pub(crate) fn attention(&self) -> &AttnCache<T> {
        &self.attn
    }
}

pub(crate) struct DecLayerCache<T> {
    ln1: LnCache<T>,
    self_attn: AttnCache<T>,
    ln2: LnCache<T>,
    cross: AttnCache<T>,
    ln3: LnCache<T>,
    ffn: FfnCache<T>,
}

/// Adds image positions to the first `L_I` rows and text positions to the rest.
pub(crate) fn add_positions<T: Scalar>(
    e_x: &Array2<T>,
    params: &ModelParams<T>,
    cfg: &ModelConfig,
) -> Result<Array2<T>> {
    let li = cfg.image_tokens;
    if e_x.ncols() != cfg.dim {
        return Err(Error::shape(format!("input width {} vs D = {}", e_x.ncols(), cfg.dim)));
    }
    if e_x.nrows() < li {
        return Err(Error::shape(format!(
            "input has {} rows, fewer than L_I = {li}",
            e_x.nrows()
        )));
    }
    let lt = e_x.nrows() - li;
    if lt > cfg.prompt_max {
        return Err(Error::shape(format!(
            "prompt of {lt} tokens exceeds prompt_max = {}",
            cfg.prompt_max
        )));
    }
    let mut x = e_x.clone();
    x.slice_mut(s![..li, ..]).scaled_add(T::one(), &params.pos_image);
    x.slice_mut(s![li.., ..])
        .scaled_add(T::one(), &params.pos_text.slice(s![..lt, ..]));
    Ok(x)
}

pub(crate) fn encoder_forward<T: Scalar>(
    mut x: Array2<T>,
    layers: &[EncoderLayer<T>],
    heads: usize,
) -> (Array2<T>, Vec<EncLayerCache<T>>) {
    let mut caches = Vec::with_capacity(layers.len());
    for layer in layers {
        let (n1, ln1) = ln_forward(&x, &layer.ln1);
        let (a, attn) = attn_forward(&n1, &n1, &layer.attn, heads, false);
        x += &a;
        let (n2, ln2) = ln_forward(&x, &layer.ln2);
        let (f, ffn) = ffn_forward(&n2, &layer.ffn);
        x += &f;
        caches.push(EncLayerCache { ln1, attn, ln2, ffn });
    }
    (x, caches)
}

pub(crate) fn encoder_backward<T: Scalar>(
    mut dx: Array2<T>,
    caches: &[EncLayerCache<T>],
    layers: &[EncoderLayer<T>],
    grads: &mut [EncoderLayer<T>],
) -> Array2<T> {
    for ((cache, layer), grad) in caches.iter().zip(layers).zip(grads.iter_mut()).rev() {
        let dn2 = ffn_backward(&dx, &cache.ffn, &layer.ffn, &mut grad.ffn);
        dx += &ln_backward(&dn2, &cache.ln2, &layer.ln2, &mut grad.ln2);
        let (dq, dkv) = attn_backward(&dx, &cache.attn, &layer.attn, &mut grad.attn);
        let dn1 = dq + dkv;
        dx += &ln_backward(&dn1, &cache.ln1, &layer.ln1, &mut grad.ln1);
    }
    dx
}

/// `[e_BOS; ctx_0; …; ctx_{L_I−2}]` plus the image position embeddings.
pub(crate) fn decoder_inputs<T: Scalar>(
    ctx: &Array2<T>,
    params: &ModelParams<T>,
    cfg: &ModelConfig,
) -> Result<Array2<T>> {
    let li = cfg.image_tokens;
    if ctx.nrows() < li {
        return Err(Error::shape(format!(
            "encoder output has {} rows, decoder needs L_I = {li}",
            ctx.nrows()
        )));
    }
    if ctx.ncols() != cfg.dim {
        return Err(Error::shape(format!(
            "encoder width {} vs D = {}",
            ctx.ncols(),
            cfg.dim
        )));
    }
    let mut d = Array2::zeros((li, cfg.dim));
    d.row_mut(0).assign(&params.bos);
    d.slice_mut(s![1.., ..]).assign(&ctx.slice(s![..li - 1, ..]));
    d += &params.pos_image;
    Ok(d)
}

pub(crate) fn decoder_forward<T: Scalar>(
    mut x: Array2<T>,
    mem: &Array2<T>,
    layers: &[DecoderLayer<T>],
    heads: usize,
    causal: bool,
) -> (Array2<T>, Vec<DecLayerCache<T>>) {
    let mut caches = Vec::with_capacity(layers.len());
    for layer in layers {
        let (n1, ln1) = ln_forward(&x, &layer.ln1);
        let (a, self_attn) = attn_forward(&n1, &n1, &layer.self_attn, heads, causal);
        x += &a;
        let (n2, ln2) = ln_forward(&x, &layer.ln2);
        let (c, cross) = attn_forward(&n2, mem, &layer.cross_attn, heads, false);
        x += &c;
        let (n3, ln3) = ln_forward(&x, &layer.ln3);
        let (f, ffn) = ffn_forward(&n3, &layer.ffn);
        x += &f;
        caches.push(DecLayerCache {
            ln1,
            self_attn,
            ln2,
            cross,
            ln3,
            ffn,
        });
    }
    (x, caches)
}

/// Returns `(d_input, d_memory)`.
pub(crate) fn decoder_backward<T: Scalar>(
    mut dx: Array2<T>,
    mem_rows: usize,
    caches: &[DecLayerCache<T>],
    layers: &[DecoderLayer<T>],
    grads: &mut [DecoderLayer<T>],
) -> (Array2<T>, Array2<T>) {
    let mut dmem = Array2::zeros((mem_rows, dx.ncols()));
    for ((cache, layer), grad) in caches.iter().zip(layers).zip(grads.iter_mut()).rev() {
        let dn3 = ffn_backward(&dx, &cache.ffn, &layer.ffn, &mut grad.ffn);
        dx += &ln_backward(&dn3, &cache.ln3, &layer.ln3, &mut grad.ln3);
        let (dq, dkv) = attn_backward(&dx, &cache.cross, &layer.cross_attn, &mut grad.cross_attn);
        dmem += &dkv;
        dx += &ln_backward(&dq, &cache.ln2, &layer.ln2, &mut grad.ln2);
        let (dq, dkv) = attn_backward(&dx, &cache.self_attn, &layer.self_attn, &mut grad.self_attn);
        let dn1 = dq + dkv;
        dx += &ln_backward(&dn1, &cache.ln1, &layer.ln1, &mut grad.ln1);
    }
    (dx, dmem)
}

/// Runs the encoder over `e_x = [e_I; e_T]` (positions are added here).
pub fn encode<T: Scalar>(e_x: &Array2<T>, params: &ModelParams<T>, cfg: &ModelConfig) -> Result<EncoderOutput<T>> {
    let x = add_positions(e_x, params, cfg)?;
    let (ctx, _) = encoder_forward(x, &params.encoder, cfg.heads);
    Ok(EncoderOutput { ctx })
}

/// Decodes all `L_I` positions in one pass. Decoder input `i > 0` is the
/// encoder output at `i − 1`; input 0 is the BOS embedding.
pub fn decode_spatial<T: Scalar>(
    enc: &EncoderOutput<T>,
    params: &ModelParams<T>,
    cfg: &ModelConfig,
) -> Result<DecoderOutput<T>> {
    let d = decoder_inputs(&enc.ctx, params, cfg)?;
    let (h, _) = decoder_forward(d, &enc.ctx, &params.decoder, cfg.heads, cfg.decoder_mask.is_causal());
    Ok(DecoderOutput { h })
}

/// Position-by-position decode built from single-row kernels. Output row `i`
/// is computed from the decoder inputs visible to position `i` only: all of
/// them for the bidirectional mask, `0..=i` for the causal one.
pub fn decode_sequential<T: Scalar>(
    enc: &EncoderOutput<T>,
    params: &ModelParams<T>,
    cfg: &ModelConfig,
) -> Result<DecoderOutput<T>> {
    let inputs = decoder_inputs(&enc.ctx, params, cfg)?;
    let li = cfg.image_tokens;
    let causal = cfg.decoder_mask.is_causal();
    let mut h = Array2::zeros((li, cfg.dim));
    for i in 0..li {
        let visible = if causal { i + 1 } else { li };
        let mut rows: Vec<Array1<T>> = inputs.rows().into_iter().take(visible).map(|r| r.to_owned()).collect();
        for layer in &params.decoder {
            rows = decoder_layer_rows(&rows, &enc.ctx, layer, cfg.heads, causal);
        }
        h.row_mut(i).assign(&rows[i]);
    }
    Ok(DecoderOutput { h })
}

fn decoder_layer_rows<T: Scalar>(
    rows: &[Array1<T>],
    mem: &Array2<T>,
    layer: &DecoderLayer<T>,
    heads: usize,
    causal: bool,
) -> Vec<Array1<T>> {
    let normed: Vec<Array1<T>> = rows.iter().map(|r| ln_row(r, &layer.ln1)).collect();
    let keys = stack(
        normed.iter().map(|n| n.dot(&layer.self_attn.wk)),
        layer.self_attn.wk.ncols(),
    );
    let values = stack(
        normed.iter().map(|n| n.dot(&layer.self_attn.wv)),
        layer.self_attn.wv.ncols(),
    );
    let mem_keys = mem.dot(&layer.cross_attn.wk);
    let mem_values = mem.dot(&layer.cross_attn.wv);
    rows.iter()
        .zip(&normed)
        .enumerate()
        .map(|(i, (x, n1))| {
            let seen = if causal { i + 1 } else { rows.len() };
            let mut x = x + &attn_row(
                n1,
                keys.slice(s![..seen, ..]),
                values.slice(s![..seen, ..]),
                &layer.self_attn,
                heads,
            );
            let n2 = ln_row(&x, &layer.ln2);
            x += &attn_row(&n2, mem_keys.view(), mem_values.view(), &layer.cross_attn, heads);
            let n3 = ln_row(&x, &layer.ln3);
            x += &ffn_row(&n3, &layer.ffn);
            x
        })
        .collect()
}

fn stack<T: Scalar>(rows: impl Iterator<Item = Array1<T>>, width: usize) -> Array2<T> {
    let flat: Vec<T> = rows.flat_map(|r| r.into_iter()).collect();
    let n = flat.len() / width.max(1);
    Array2::from_shape_vec((n, width), flat).expect("rows share a width")
}

/// `logits[i] = E · h[i]` over every embedding row.
pub fn output_logits<T: Scalar>(h: &DecoderOutput<T>, embedding: &EmbeddingMatrix<T>) -> Result<Array2<T>> {
    if h.h.ncols() != embedding.dim() {
        return Err(Error::shape(format!(
            "decoder width {} vs embedding width {}",
            h.h.ncols(),
            embedding.dim()
        )));
    }
    Ok(h.h.dot(&embedding.rows.t()))
}

/// Logits for a subset of embedding rows only (the category columns).
pub(crate) fn selected_logits<T: Scalar>(h: &Array2<T>, embedding: &EmbeddingMatrix<T>, ids: &[usize]) -> Array2<T> {
    let rows = embedding.rows.select(Axis(0), ids);
    h.dot(&rows.t())
}
