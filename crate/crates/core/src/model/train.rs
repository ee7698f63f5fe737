//! Training objective, reverse-mode gradients and the AdamW update.

use ndarray::{s, Array2, Axis};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::segpipe::{softmax_rows, IGNORE};
use crate::vocab::{Prompt, SegCategorySet};

use super::network::{
    add_positions, decoder_backward, decoder_forward, decoder_inputs, encoder_backward, encoder_forward,
    selected_logits,
};
use super::params::{ModelConfig, ModelParams};

/// Image tokens of one example.
#[derive(Clone, Debug, PartialEq)]
pub enum ImageInput<T> {
    /// Embedding row per position; the live rows are looked up at every
    /// forward, so their gradients reach the embedding matrix.
    Rows(Vec<u32>),
    /// Fixed `L_I × D` token embeddings (e.g. projected backbone features).
    Embeddings(Array2<T>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainExample<T> {
    pub image: ImageInput<T>,
    /// Category index per position, [`IGNORE`] to skip.
    pub targets: Vec<u32>,
}

/// Everything fixed across a training run besides the weights.
#[derive(Clone, Copy, Debug)]
pub struct Task<'a> {
    pub cfg: &'a ModelConfig,
    pub prompt: &'a Prompt,
    pub cats: &'a SegCategorySet,
}

/// Builds `e_x = [e_I; e_T]` without positions.
pub fn input_embeddings<T: Scalar>(
    image: &ImageInput<T>,
    params: &ModelParams<T>,
    task: &Task<'_>,
) -> Result<Array2<T>> {
    let li = task.cfg.image_tokens;
    let image = match image {
        ImageInput::Rows(ids) => {
            if ids.len() != li {
                return Err(Error::shape(format!("{} image tokens, expected L_I = {li}", ids.len())));
            }
            params.embedding.lookup(ids)?
        }
        ImageInput::Embeddings(e) => {
            if e.dim() != (li, task.cfg.dim) {
                return Err(Error::shape(format!(
                    "image embeddings {:?}, expected ({li}, {})",
                    e.dim(),
                    task.cfg.dim
                )));
            }
            e.clone()
        }
    };
    let text = params.embedding.lookup(&task.prompt.ids)?;
    ndarray::concatenate(Axis(0), &[image.view(), text.view()]).map_err(|e| Error::shape(e.to_string()))
}

/// Mean NLL of one example over non-ignored positions. With `grads`, the
/// gradient of that loss is accumulated into it, scaled by `weight`.
pub fn example_loss<T: Scalar>(
    example: &TrainExample<T>,
    params: &ModelParams<T>,
    task: &Task<'_>,
    grads: Option<(&mut ModelParams<T>, T)>,
) -> Result<T> {
    let cfg = task.cfg;
    let li = cfg.image_tokens;
    let m = task.cats.len();
    if example.targets.len() != li {
        return Err(Error::shape(format!(
            "{} targets, expected L_I = {li}",
            example.targets.len()
        )));
    }
    if let Some(&bad) = example.targets.iter().find(|&&t| t != IGNORE && t as usize >= m) {
        return Err(Error::invalid(format!("target {bad} out of range for {m} categories")));
    }
    let counted = example.targets.iter().filter(|&&t| t != IGNORE).count();
    if counted == 0 {
        return Err(Error::invalid("every target position is ignored"));
    }

    let e_x = input_embeddings(&example.image, params, task)?;
    let x = add_positions(&e_x, params, cfg)?;
    let (ctx, enc_caches) = encoder_forward(x, &params.encoder, cfg.heads);
    let dec_in = decoder_inputs(&ctx, params, cfg)?;
    let (h, dec_caches) = decoder_forward(dec_in, &ctx, &params.decoder, cfg.heads, cfg.decoder_mask.is_causal());
    let cat_rows: Vec<usize> = task.cats.merged_ids.iter().map(|&i| i as usize).collect();
    let logits = selected_logits(&h, &params.embedding, &cat_rows);
    let probs = softmax_rows(logits.view());

    let mut loss = T::zero();
    for (row, &t) in logits.rows().into_iter().zip(&example.targets) {
        if t == IGNORE {
            continue;
        }
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
        loss += lse - row[t as usize];
    }
    let inv_count = T::one() / T::lit(counted as f64);
    loss *= inv_count;
    if !loss.is_finite() {
        return Err(Error::Numerical(format!("non-finite loss {loss}")));
    }

    let Some((grads, weight)) = grads else {
        return Ok(loss);
    };

    // d loss / d logits = (softmax − onehot) / count
    let scale = weight * inv_count;
    let mut dlogits = probs;
    for (mut row, &t) in dlogits.rows_mut().into_iter().zip(&example.targets) {
        if t == IGNORE {
            row.fill(T::zero());
        } else {
            row[t as usize] -= T::one();
            row.mapv_inplace(|v| v * scale);
        }
    }
    let cat_emb = params.embedding.rows.select(Axis(0), &cat_rows);
    let dh = dlogits.dot(&cat_emb);
    let dcat = dlogits.t().dot(&h);
    for (k, &row) in cat_rows.iter().enumerate() {
        let mut g = grads.embedding.rows.row_mut(row);
        g += &dcat.row(k);
    }

    let (d_dec_in, d_mem) = decoder_backward(dh, ctx.nrows(), &dec_caches, &params.decoder, &mut grads.decoder);
    grads.pos_image += &d_dec_in;
    grads.bos += &d_dec_in.row(0);
    let mut d_ctx = d_mem;
    d_ctx
        .slice_mut(s![..li - 1, ..])
        .scaled_add(T::one(), &d_dec_in.slice(s![1.., ..]));

    let d_x = encoder_backward(d_ctx, &enc_caches, &params.encoder, &mut grads.encoder);
    let d_image = d_x.slice(s![..li, ..]);
    let d_text = d_x.slice(s![li.., ..]);
    grads.pos_image += &d_image;
    let lt = d_text.nrows();
    grads.pos_text.slice_mut(s![..lt, ..]).scaled_add(T::one(), &d_text);
    if let ImageInput::Rows(ids) = &example.image {
        scatter_rows(&mut grads.embedding.rows, ids, d_image);
    }
    scatter_rows(&mut grads.embedding.rows, &task.prompt.ids, d_text);
    Ok(loss)
}

fn scatter_rows<T: Scalar>(dst: &mut Array2<T>, ids: &[u32], src: ndarray::ArrayView2<'_, T>) {
    for (&id, row) in ids.iter().zip(src.rows()) {
        let mut d = dst.row_mut(id as usize);
        d += &row;
    }
}

/// Mean loss of a batch and its gradient (a fresh tensor set shaped like `params`).
/// Examples are accumulated in index order.
pub fn batch_gradients<T: Scalar>(
    batch: &[TrainExample<T>],
    params: &ModelParams<T>,
    task: &Task<'_>,
) -> Result<(T, ModelParams<T>)> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let mut grads = params.zeros_like();
    let weight = T::one() / T::lit(batch.len() as f64);
    let mut total = T::zero();
    for example in batch {
        total += example_loss(example, params, task, Some((&mut grads, weight)))?;
    }
    Ok((total * weight, grads))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 3e-4,
            weight_decay: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("lr", "must be positive and finite"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::config("wd", "must be non-negative"));
        }
        if !(0.0..1.0).contains(&self.beta1) {
            return Err(Error::config("beta1", "must lie in [0, 1)"));
        }
        if !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::config("beta2", "must lie in [0, 1)"));
        }
        if self.eps.is_nan() || self.eps <= 0.0 {
            return Err(Error::config("eps", "must be positive"));
        }
        Ok(())
    }
}

/// Adam with decoupled weight decay:
/// `θ ← θ·(1 − lr·wd) − lr·m̂ / (√v̂ + ε)`, moments bias-corrected.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW<T> {
    pub hp: AdamWConfig,
    pub m: ModelParams<T>,
    pub v: ModelParams<T>,
    pub step: u64,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(hp: AdamWConfig, params: &ModelParams<T>) -> Self {
        AdamW {
            hp,
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
        }
    }

    pub fn update(&mut self, params: &mut ModelParams<T>, grads: &ModelParams<T>) {
        self.step += 1;
        let hp = self.hp;
        let b1 = T::lit(hp.beta1);
        let b2 = T::lit(hp.beta2);
        let c1 = T::lit(1.0 - hp.beta1.powi(self.step as i32));
        let c2 = T::lit(1.0 - hp.beta2.powi(self.step as i32));
        let lr = T::lit(hp.lr);
        let decay = T::one() - T::lit(hp.lr * hp.weight_decay);
        let eps = T::lit(hp.eps);
        let one = T::one();
        let tensors = params
            .named_mut()
            .into_iter()
            .zip(grads.named())
            .zip(self.m.named_mut())
            .zip(self.v.named_mut());
        for ((((_, mut p), (_, g)), (_, mut m)), (_, mut v)) in tensors {
            ndarray::Zip::from(&mut p)
                .and(&g)
                .and(&mut m)
                .and(&mut v)
                .for_each(|p, &g, m, v| {
                    *m = b1 * *m + (one - b1) * g;
                    *v = b2 * *v + (one - b2) * g * g;
                    let m_hat = *m / c1;
                    let v_hat = *v / c2;
                    *p = *p * decay - lr * m_hat / (v_hat.sqrt() + eps);
                });
        }
    }
}

/// Forward, backward and one AdamW update over `batch`; returns the mean loss.
pub fn train_step<T: Scalar>(
    batch: &[TrainExample<T>],
    params: &mut ModelParams<T>,
    opt: &mut AdamW<T>,
    task: &Task<'_>,
) -> Result<T> {
    let (loss, grads) = batch_gradients(batch, params, task)?;
    if !grads.is_finite() {
        return Err(Error::Numerical(format!(
            "non-finite gradient at step {}",
            opt.step + 1
        )));
    }
    opt.update(params, &grads);
    Ok(loss)
}
