use ndarray::{Array1, Array2, ArrayViewD, ArrayViewMutD};
use rand::Rng;

use crate::container::{Tensor, TensorMap};
use crate::error::{Error, Result};
use crate::rng::trunc_normal;
use crate::scalar::Scalar;
use crate::vocab::EmbeddingMatrix;

/// Standard deviation of the truncated-normal weight init.
pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DecoderMask {
    /// Every decoder position attends to every other.
    Bidirectional,
    /// Position `i` attends to positions `0..=i`.
    Causal,
}

impl DecoderMask {
    pub fn is_causal(self) -> bool {
        matches!(self, DecoderMask::Causal)
    }

    pub fn name(self) -> &'static str {
        match self {
            DecoderMask::Bidirectional => "bidirectional",
            DecoderMask::Causal => "causal",
        }
    }
}

impl std::str::FromStr for DecoderMask {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "bidirectional" => Ok(DecoderMask::Bidirectional),
            "causal" => Ok(DecoderMask::Causal),
            other => Err(format!("unknown decoder mask {other:?} (bidirectional or causal)")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub dim: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub heads: usize,
    /// `L_I = H·W`.
    pub image_tokens: usize,
    /// Capacity of the text position table.
    pub prompt_max: usize,
    pub ffn_mult: usize,
    pub decoder_mask: DecoderMask,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let checks = [
            ("D", self.dim),
            ("enc_layers", self.enc_layers),
            ("dec_layers", self.dec_layers),
            ("heads", self.heads),
            ("image_tokens", self.image_tokens),
            ("prompt_max", self.prompt_max),
            ("ffn_mult", self.ffn_mult),
        ];
        for (key, value) in checks {
            if value == 0 {
                return Err(Error::config(key, "must be >= 1"));
            }
        }
        if !self.dim.is_multiple_of(self.heads) {
            return Err(Error::config(
                "heads",
                format!("{} does not divide D = {}", self.heads, self.dim),
            ));
        }
        Ok(())
    }

    pub fn hidden(&self) -> usize {
        self.ffn_mult * self.dim
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNormParams<T> {
    pub gamma: Array1<T>,
    pub beta: Array1<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams<T> {
    pub wq: Array2<T>,
    pub wk: Array2<T>,
    pub wv: Array2<T>,
    pub wo: Array2<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FfnParams<T> {
    pub w1: Array2<T>,
    pub w2: Array2<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderLayer<T> {
    pub ln1: LayerNormParams<T>,
    pub attn: AttentionParams<T>,
    pub ln2: LayerNormParams<T>,
    pub ffn: FfnParams<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderLayer<T> {
    pub ln1: LayerNormParams<T>,
    pub self_attn: AttentionParams<T>,
    pub ln2: LayerNormParams<T>,
    pub cross_attn: AttentionParams<T>,
    pub ln3: LayerNormParams<T>,
    pub ffn: FfnParams<T>,
}

/// All trainable weights, including the shared word embedding.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    pub embedding: EmbeddingMatrix<T>,
    pub bos: Array1<T>,
    pub pos_image: Array2<T>,
    pub pos_text: Array2<T>,
    pub encoder: Vec<EncoderLayer<T>>,
    pub decoder: Vec<DecoderLayer<T>>,
}

/// Named traversal of every tensor, in a fixed order.
pub trait Visit<T> {
    fn visit<'a>(&'a self, name: &str, out: &mut Vec<(String, ArrayViewD<'a, T>)>);
    fn visit_mut<'a>(&'a mut self, name: &str, out: &mut Vec<(String, ArrayViewMutD<'a, T>)>);
}

fn join(prefix: &str, field: &str) -> String {
    if prefix.is_empty() {
        field.to_string()
    } else {
        format!("{prefix}.{field}")
    }
}

impl<T: Scalar> Visit<T> for Array1<T> {
    fn visit<'a>(&'a self, name: &str, out: &mut Vec<(String, ArrayViewD<'a, T>)>) {
        out.push((name.to_string(), self.view().into_dyn()));
    }
    fn visit_mut<'a>(&'a mut self, name: &str, out: &mut Vec<(String, ArrayViewMutD<'a, T>)>) {
        out.push((name.to_string(), self.view_mut().into_dyn()));
    }
}

impl<T: Scalar> Visit<T> for Array2<T> {
    fn visit<'a>(&'a self, name: &str, out: &mut Vec<(String, ArrayViewD<'a, T>)>) {
        out.push((name.to_string(), self.view().into_dyn()));
    }
    fn visit_mut<'a>(&'a mut self, name: &str, out: &mut Vec<(String, ArrayViewMutD<'a, T>)>) {
        out.push((name.to_string(), self.view_mut().into_dyn()));
    }
}

impl<T: Scalar> Visit<T> for EmbeddingMatrix<T> {
    fn visit<'a>(&'a self, name: &str, out: &mut Vec<(String, ArrayViewD<'a, T>)>) {
        self.rows.visit(name, out);
    }
    fn visit_mut<'a>(&'a mut self, name: &str, out: &mut Vec<(String, ArrayViewMutD<'a, T>)>) {
        self.rows.visit_mut(name, out);
    }
}

impl<T: Scalar, V: Visit<T>> Visit<T> for Vec<V> {
    fn visit<'a>(&'a self, name: &str, out: &mut Vec<(String, ArrayViewD<'a, T>)>) {
        for (i, item) in self.iter().enumerate() {
            item.visit(&join(name, &i.to_string()), out);
        }
    }
    fn visit_mut<'a>(&'a mut self, name: &str, out: &mut Vec<(String, ArrayViewMutD<'a, T>)>) {
        for (i, item) in self.iter_mut().enumerate() {
            item.visit_mut(&join(name, &i.to_string()), out);
        }
    }
}

macro_rules! visit_fields {
    ($ty:ident { $($field:ident),* $(,)? }) => {
        impl<T: Scalar> Visit<T> for $ty<T> {
            fn visit<'a>(&'a self, name: &str, out: &mut Vec<(String, ArrayViewD<'a, T>)>) {
                $( self.$field.visit(&join(name, stringify!($field)), out); )*
            }
            fn visit_mut<'a>(&'a mut self, name: &str, out: &mut Vec<(String, ArrayViewMutD<'a, T>)>) {
                $( self.$field.visit_mut(&join(name, stringify!($field)), out); )*
            }
        }
    };
}

visit_fields!(LayerNormParams { gamma, beta });
visit_fields!(AttentionParams { wq, wk, wv, wo });
visit_fields!(FfnParams { w1, w2 });
visit_fields!(EncoderLayer { ln1, attn, ln2, ffn });
visit_fields!(DecoderLayer {
    ln1,
    self_attn,
    ln2,
    cross_attn,
    ln3,
    ffn
});
visit_fields!(ModelParams {
    embedding,
    bos,
    pos_image,
    pos_text,
    encoder,
    decoder
});

struct Init<'r, R: ?Sized> {
    rng: &'r mut R,
}

impl<R: Rng + ?Sized> Init<'_, R> {
    fn matrix<T: Scalar>(&mut self, rows: usize, cols: usize) -> Array2<T> {
        Array2::from_shape_simple_fn((rows, cols), || T::lit(trunc_normal(self.rng, INIT_STD)))
    }

    fn vector<T: Scalar>(&mut self, n: usize) -> Array1<T> {
        Array1::from_shape_simple_fn(n, || T::lit(trunc_normal(self.rng, INIT_STD)))
    }

    fn attention<T: Scalar>(&mut self, d: usize) -> AttentionParams<T> {
        AttentionParams {
            wq: self.matrix(d, d),
            wk: self.matrix(d, d),
            wv: self.matrix(d, d),
            wo: self.matrix(d, d),
        }
    }

    fn ffn<T: Scalar>(&mut self, d: usize, hidden: usize) -> FfnParams<T> {
        FfnParams {
            w1: self.matrix(d, hidden),
            w2: self.matrix(hidden, d),
        }
    }
}

fn layer_norm<T: Scalar>(d: usize) -> LayerNormParams<T> {
    LayerNormParams {
        gamma: Array1::ones(d),
        beta: Array1::zeros(d),
    }
}

impl<T: Scalar> ModelParams<T> {
    /// Truncated-normal weights (σ = 0.02, cut at ±2σ), layer norms at
    /// scale 1 / offset 0. The embedding is supplied by the caller, already
    /// extended with merged category rows.
    pub fn init<R: Rng + ?Sized>(cfg: &ModelConfig, embedding: EmbeddingMatrix<T>, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        if embedding.dim() != cfg.dim {
            return Err(Error::shape(format!(
                "embedding width {} vs D = {}",
                embedding.dim(),
                cfg.dim
            )));
        }
        let d = cfg.dim;
        let mut init = Init { rng };
        let bos = init.vector(d);
        let pos_image = init.matrix(cfg.image_tokens, d);
        let pos_text = init.matrix(cfg.prompt_max, d);
        let encoder = (0..cfg.enc_layers)
            .map(|_| EncoderLayer {
                ln1: layer_norm(d),
                attn: init.attention(d),
                ln2: layer_norm(d),
                ffn: init.ffn(d, cfg.hidden()),
            })
            .collect();
        let decoder = (0..cfg.dec_layers)
            .map(|_| DecoderLayer {
                ln1: layer_norm(d),
                self_attn: init.attention(d),
                ln2: layer_norm(d),
                cross_attn: init.attention(d),
                ln3: layer_norm(d),
                ffn: init.ffn(d, cfg.hidden()),
            })
            .collect();
        Ok(ModelParams {
            embedding,
            bos,
            pos_image,
            pos_text,
            encoder,
            decoder,
        })
    }

    pub fn zeros_like(&self) -> Self {
        let mut out = self.clone();
        out.fill(T::zero());
        out
    }

    pub fn fill(&mut self, value: T) {
        for (_, mut t) in self.named_mut() {
            t.fill(value);
        }
    }

    pub fn named(&self) -> Vec<(String, ArrayViewD<'_, T>)> {
        let mut out = Vec::new();
        self.visit("", &mut out);
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, T>)> {
        let mut out = Vec::new();
        self.visit_mut("", &mut out);
        out
    }

    pub fn element_count(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.named().iter().all(|(_, t)| t.iter().all(|v| v.is_finite()))
    }

    /// Adds `scale · other` elementwise.
    pub fn add_scaled(&mut self, other: &ModelParams<T>, scale: T) {
        for ((_, mut a), (_, b)) in self.named_mut().into_iter().zip(other.named()) {
            a.scaled_add(scale, &b);
        }
    }

    /// One section per tensor, named `<prefix><tensor name>`.
    pub fn write_sections(&self, prefix: &str, map: &mut TensorMap) -> Result<()> {
        for (name, t) in self.named() {
            map.insert(format!("{prefix}{name}"), Tensor::from_array(&t.to_owned()))?;
        }
        Ok(())
    }

    /// Overwrites every tensor from `<prefix><tensor name>` sections; shapes must match.
    pub fn read_sections(&mut self, prefix: &str, map: &TensorMap) -> Result<()> {
        for (name, mut t) in self.named_mut() {
            let key = format!("{prefix}{name}");
            let src = map.require(&key)?.to_array::<T>()?;
            if src.shape() != t.shape() {
                return Err(Error::shape(format!(
                    "section `{key}` has shape {:?}, expected {:?}",
                    src.shape(),
                    t.shape()
                )));
            }
            t.assign(&src);
        }
        Ok(())
    }
}
