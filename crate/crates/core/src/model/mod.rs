//! Toy transformer encoder-decoder with spatially conditioned decoding.

mod gradcheck;
pub mod layers;
mod network;
mod params;
mod train;

pub use gradcheck::{gradient_check, TensorGradCheck};
pub use network::{decode_sequential, decode_spatial, encode, output_logits, DecoderOutput, EncoderOutput};
pub use params::{
    AttentionParams, DecoderLayer, DecoderMask, EncoderLayer, FfnParams, LayerNormParams, ModelConfig, ModelParams,
    Visit, INIT_STD,
};
pub use train::{
    batch_gradients, example_loss, input_embeddings, train_step, AdamW, AdamWConfig, ImageInput, Task, TrainExample,
};

#[cfg(test)]
mod tests;
