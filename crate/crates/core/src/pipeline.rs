//! End-to-end wiring: configuration → vocabulary and categories → model →
//! artificial data, training, inference, checkpoints.

use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;

use crate::artgen::{sample_stream, token_rows, ArtificialGridSpec, GridSample};
use crate::backbone::{Backbone, FeatureMap, RasterImage};
use crate::config::RunConfig;
use crate::container::{Tensor, TensorData, TensorMap};
use crate::error::{Error, Result};
use crate::eval::ConfusionMatrix;
use crate::model::{
    decode_spatial, encode, input_embeddings, output_logits, train_step, AdamW, ImageInput, ModelConfig, ModelParams,
    Task, TrainExample, INIT_STD,
};
use crate::rng::{mix_seed, seed_rng};
use crate::scalar::Scalar;
use crate::segpipe::{masked_probs, predict, ProbabilityMap, SegmentationMask};
use crate::vocab::{build_prompt, register_categories, EmbeddingMatrix, Prompt, SegCategorySet, Vocabulary};

pub const CHECKPOINT_VERSION: f64 = 1.0;

/// Stream tags separating the seeds of on-the-fly training data, held-out
/// evaluation data and shuffling from those used by `gen-data`.
const TRAIN_STREAM: u64 = 0x7472_6169_6e00_0001;
const HELDOUT_STREAM: u64 = 0x6865_6c64_6f75_7402;
const SHUFFLE_STREAM: u64 = 0x7368_7566_666c_6503;
const VALID_STREAM: u64 = 0x7661_6c69_6400_0004;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepReport {
    pub step: u64,
    pub loss: f64,
    pub tokens_per_sec: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HeldOutReport {
    pub token_accuracy: f64,
    pub miou: f64,
}

/// Stop training once accuracy on `samples` validation draws reaches
/// `target_accuracy`, checked every `every` steps.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EarlyStop {
    pub every: usize,
    pub samples: u64,
    pub target_accuracy: f64,
}

#[derive(Clone, Debug)]
pub struct Pipeline<T> {
    pub run: RunConfig,
    pub model_cfg: ModelConfig,
    pub grid: ArtificialGridSpec,
    pub vocab: Vocabulary,
    pub cats: SegCategorySet,
    pub prompt: Prompt,
    pub params: ModelParams<T>,
    pub backbone: Backbone<T>,
    pub opt: AdamW<T>,
}

impl<T: Scalar> Pipeline<T> {
    /// Fresh pipeline; every random draw derives from `run.seed`.
    pub fn new(run: &RunConfig) -> Result<Self> {
        run.validate()?;
        let vocab = match &run.vocab_file {
            Some(p) => Vocabulary::from_file(p)?,
            None => Vocabulary::builtin(),
        };
        let model_cfg = run.model_config();
        let mut rng = seed_rng(run.seed);
        let mut embedding = EmbeddingMatrix::init(vocab.len(), run.dim, INIT_STD, &mut rng);
        let cats = register_categories(&run.category_names()?, &vocab, &mut embedding)?;
        let prompt = build_prompt(&cats, &vocab)?;
        if prompt.len() > run.prompt_max {
            return Err(Error::config(
                "prompt_max",
                format!("prompt needs {} tokens, capacity is {}", prompt.len(), run.prompt_max),
            ));
        }
        let params = ModelParams::init(&model_cfg, embedding, &mut rng)?;
        let backbone = Backbone::init(run.patch, run.channels, run.dim, &mut rng);
        let opt = AdamW::new(run.optimizer, &params);
        Ok(Pipeline {
            run: run.clone(),
            model_cfg,
            grid: run.grid(),
            vocab,
            cats,
            prompt,
            params,
            backbone,
            opt,
        })
    }

    pub fn task(&self) -> Task<'_> {
        Task {
            cfg: &self.model_cfg,
            prompt: &self.prompt,
            cats: &self.cats,
        }
    }

    /// Sample `index` of the `gen-data` stream.
    pub fn data_sample(&self, index: u64) -> Result<GridSample> {
        sample_stream(&self.grid, self.cats.len(), self.run.seed, index)
    }

    pub fn train_sample(&self, index: u64) -> Result<GridSample> {
        sample_stream(&self.grid, self.cats.len(), self.run.seed ^ TRAIN_STREAM, index)
    }

    pub fn heldout_sample(&self, index: u64) -> Result<GridSample> {
        sample_stream(&self.grid, self.cats.len(), self.run.seed ^ HELDOUT_STREAM, index)
    }

    /// Validation stream for early stopping, disjoint from the held-out one.
    pub fn validation_sample(&self, index: u64) -> Result<GridSample> {
        sample_stream(&self.grid, self.cats.len(), self.run.seed ^ VALID_STREAM, index)
    }

    pub fn example(&self, sample: &GridSample) -> Result<TrainExample<T>> {
        Ok(TrainExample {
            image: ImageInput::Rows(token_rows(&sample.map, &self.cats)?),
            targets: sample.map.iter().copied().collect(),
        })
    }

    /// One AdamW step on `batch`; returns the mean loss.
    pub fn step(&mut self, batch: &[TrainExample<T>]) -> Result<f64> {
        let task = Task {
            cfg: &self.model_cfg,
            prompt: &self.prompt,
            cats: &self.cats,
        };
        let loss = train_step(batch, &mut self.params, &mut self.opt, &task)?;
        Ok(loss.as_f64())
    }

    /// The batch for optimizer step `step` (0-based). Without a dataset,
    /// samples come from the on-the-fly training stream; with one, from a
    /// per-epoch seeded shuffle of it.
    pub fn batch_for(&self, step: u64, data: Option<&[TrainExample<T>]>) -> Result<Vec<TrainExample<T>>> {
        let b = self.run.batch as u64;
        match data {
            None => (step * b..(step + 1) * b)
                .map(|i| self.example(&self.train_sample(i)?))
                .collect(),
            Some([]) => Err(Error::invalid("training dataset is empty")),
            Some(data) => {
                let n = data.len() as u64;
                (step * b..(step + 1) * b)
                    .map(|i| {
                        let epoch = i / n;
                        let mut order: Vec<usize> = (0..data.len()).collect();
                        order.shuffle(&mut seed_rng(mix_seed(self.run.seed ^ SHUFFLE_STREAM, epoch)));
                        Ok(data[order[(i % n) as usize]].clone())
                    })
                    .collect()
            }
        }
    }

    /// Runs `steps` optimizer steps, reporting every `log_every` steps and at the end.
    pub fn train(
        &mut self,
        steps: usize,
        data: Option<&[TrainExample<T>]>,
        mut report: impl FnMut(&StepReport),
    ) -> Result<f64> {
        let tokens_per_step = (self.run.batch * (self.model_cfg.image_tokens + self.prompt.len())) as f64;
        let mut window_start = std::time::Instant::now();
        let mut window_steps = 0usize;
        let mut window_loss = 0.0;
        let mut last = f64::NAN;
        for i in 0..steps {
            let step = self.opt.step;
            let batch = self.batch_for(step, data)?;
            last = self.step(&batch)?;
            window_loss += last;
            window_steps += 1;
            let done = self.opt.step;
            if done.is_multiple_of(self.run.log_every as u64) || i + 1 == steps {
                let secs = window_start.elapsed().as_secs_f64().max(1e-9);
                report(&StepReport {
                    step: done,
                    loss: window_loss / window_steps as f64,
                    tokens_per_sec: tokens_per_step * window_steps as f64 / secs,
                });
                window_start = std::time::Instant::now();
                window_steps = 0;
                window_loss = 0.0;
            }
        }
        Ok(last)
    }

    /// Trains for at most `max_steps`, stopping early per `stop`. Returns the
    /// number of steps taken and the last validation report.
    pub fn train_until(
        &mut self,
        max_steps: usize,
        stop: EarlyStop,
        data: Option<&[TrainExample<T>]>,
        mut report: impl FnMut(&StepReport),
        mut validated: impl FnMut(u64, &HeldOutReport),
    ) -> Result<(usize, HeldOutReport)> {
        if stop.every == 0 || stop.samples == 0 {
            return Err(Error::invalid(
                "early stopping needs a positive interval and sample count",
            ));
        }
        let mut taken = 0;
        loop {
            let chunk = stop.every.min(max_steps - taken);
            self.train(chunk, data, &mut report)?;
            taken += chunk;
            let val = self.evaluate_on(stop.samples, |i| self.validation_sample(i))?;
            validated(self.opt.step, &val);
            if val.token_accuracy >= stop.target_accuracy || taken == max_steps {
                return Ok((taken, val));
            }
        }
    }

    /// Category probabilities at backbone resolution (`H × W`).
    pub fn probabilities(&self, image: &ImageInput<T>) -> Result<ProbabilityMap<T>> {
        let task = self.task();
        let e_x = input_embeddings(image, &self.params, &task)?;
        let enc = encode(&e_x, &self.params, &self.model_cfg)?;
        let dec = decode_spatial(&enc, &self.params, &self.model_cfg)?;
        let logits = output_logits(&dec, &self.params.embedding)?;
        masked_probs(logits.view(), &self.cats, self.grid.h, self.grid.w)
    }

    /// Tokenizes a raster with the frozen backbone. Its patch grid must match `H × W`.
    pub fn image_tokens(&self, img: &RasterImage<T>) -> Result<(FeatureMap<T>, Array2<T>)> {
        let (fm, tokens) = self.backbone.embed(img)?;
        if (fm.h, fm.w) != (self.grid.h, self.grid.w) {
            return Err(Error::shape(format!(
                "image gives a {}x{} patch grid, model expects {}x{} (patch {})",
                fm.h, fm.w, self.grid.h, self.grid.w, self.backbone.patch
            )));
        }
        Ok((fm, tokens))
    }

    /// Token accuracy and mIoU of argmax predictions on `count` held-out samples.
    pub fn evaluate_heldout(&self, count: u64) -> Result<HeldOutReport> {
        self.evaluate_on(count, |i| self.heldout_sample(i))
    }

    fn evaluate_on(&self, count: u64, draw: impl Fn(u64) -> Result<GridSample>) -> Result<HeldOutReport> {
        let mut cm = ConfusionMatrix::new(self.cats.len());
        for i in 0..count {
            let sample = draw(i)?;
            let example = self.example(&sample)?;
            let pred = predict(&self.probabilities(&example.image)?);
            let gt = SegmentationMask::new(sample.map.clone(), self.cats.len())?;
            cm.accumulate(&pred, &gt)?;
        }
        Ok(HeldOutReport {
            token_accuracy: cm.pixel_accuracy()?,
            miou: cm.miou()?,
        })
    }

    fn meta(&self) -> Vec<f64> {
        let c = &self.model_cfg;
        let hp = &self.opt.hp;
        vec![
            CHECKPOINT_VERSION,
            c.dim as f64,
            c.enc_layers as f64,
            c.dec_layers as f64,
            c.heads as f64,
            c.ffn_mult as f64,
            c.image_tokens as f64,
            c.prompt_max as f64,
            c.decoder_mask.is_causal() as u8 as f64,
            self.params.embedding.total() as f64,
            self.params.embedding.base_count as f64,
            self.opt.step as f64,
            self.backbone.patch as f64,
            self.backbone.channels as f64,
            self.grid.h as f64,
            self.grid.w as f64,
            hp.lr,
            hp.weight_decay,
            hp.beta1,
            hp.beta2,
            hp.eps,
        ]
    }

    /// Parameters (`param.*`), optimizer moments (`adam.m.*`, `adam.v.*`),
    /// frozen backbone (`backbone.*`) and metadata (`meta`, `meta.seed`,
    /// `meta.categories`).
    pub fn checkpoint(&self) -> Result<TensorMap> {
        let mut map = TensorMap::new();
        map.insert(
            "meta",
            Tensor::new(vec![self.meta().len()], TensorData::F64(self.meta()))?,
        )?;
        map.insert(
            "meta.seed",
            Tensor::from_u32(vec![2], vec![self.run.seed as u32, (self.run.seed >> 32) as u32])?,
        )?;
        map.insert(
            "meta.categories",
            Tensor::from_u32(vec![self.cats.len()], self.cats.merged_ids.clone())?,
        )?;
        self.params.write_sections("param.", &mut map)?;
        self.opt.m.write_sections("adam.m.", &mut map)?;
        self.opt.v.write_sections("adam.v.", &mut map)?;
        map.insert(
            "backbone.weight",
            Tensor::from_array(&self.backbone.weight.clone().into_dyn()),
        )?;
        map.insert(
            "backbone.bias",
            Tensor::from_array(&self.backbone.bias.clone().into_dyn()),
        )?;
        Ok(map)
    }

    pub fn save_checkpoint(&self, path: impl AsRef<Path>) -> Result<()> {
        self.checkpoint()?.write(path)
    }

    /// Rebuilds the pipeline for `run` and overwrites its state from `map`.
    pub fn from_checkpoint(run: &RunConfig, map: &TensorMap) -> Result<Self> {
        let mut pipe = Pipeline::new(run)?;
        let meta = map.require("meta")?.to_array::<f64>()?;
        let meta = meta.as_slice().ok_or_else(|| Error::shape("meta section"))?;
        let expected = pipe.meta();
        if meta.len() != expected.len() || meta[0] != CHECKPOINT_VERSION {
            return Err(Error::invalid("checkpoint metadata has an unexpected layout"));
        }
        const NAMES: [&str; 16] = [
            "version",
            "D",
            "enc_layers",
            "dec_layers",
            "heads",
            "ffn_mult",
            "image_tokens",
            "prompt_max",
            "decoder_mask",
            "embedding rows",
            "vocabulary size",
            "step",
            "patch",
            "channels",
            "H",
            "W",
        ];
        for (i, name) in NAMES.iter().enumerate() {
            if *name != "step" && meta[i] != expected[i] {
                return Err(Error::config(
                    name,
                    format!("checkpoint has {}, config gives {}", meta[i], expected[i]),
                ));
            }
        }
        let cats = map.require("meta.categories")?.as_u32()?;
        if cats != pipe.cats.merged_ids.as_slice() {
            return Err(Error::config(
                "categories",
                "checkpoint was trained on a different category set",
            ));
        }
        pipe.params.read_sections("param.", map)?;
        pipe.opt.m.read_sections("adam.m.", map)?;
        pipe.opt.v.read_sections("adam.v.", map)?;
        pipe.opt.step = meta[11] as u64;
        let weight = map.require("backbone.weight")?.to_array::<T>()?;
        let bias = map.require("backbone.bias")?.to_array::<T>()?;
        pipe.backbone.weight = weight
            .into_dimensionality()
            .map_err(|e| Error::shape(format!("backbone.weight: {e}")))?;
        pipe.backbone.bias = bias
            .into_dimensionality()
            .map_err(|e| Error::shape(format!("backbone.bias: {e}")))?;
        Ok(pipe)
    }

    pub fn load_checkpoint(run: &RunConfig, path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint(run, &TensorMap::read(path)?)
    }

    /// `gen-data` container for samples `0..count`: `tokens` `[count, H·W, D]`
    /// (embedding rows at the current weights) and `targets` `[count, H·W]`.
    pub fn generate(&self, count: usize) -> Result<(TensorMap, Vec<GridSample>)> {
        let li = self.model_cfg.image_tokens;
        let d = self.model_cfg.dim;
        let mut tokens = Vec::with_capacity(count * li * d);
        let mut targets = Vec::with_capacity(count * li);
        let mut samples = Vec::with_capacity(count);
        for i in 0..count {
            let sample = self.data_sample(i as u64)?;
            let rows = token_rows(&sample.map, &self.cats)?;
            let emb = self.params.embedding.lookup(&rows)?;
            tokens.extend(emb.iter().map(|v| v.as_f64() as f32));
            targets.extend(sample.map.iter().copied());
            samples.push(sample);
        }
        let mut map = TensorMap::new();
        map.insert("tokens", Tensor::new(vec![count, li, d], TensorData::F32(tokens))?)?;
        map.insert("targets", Tensor::from_u32(vec![count, li], targets)?)?;
        Ok((map, samples))
    }

    /// Training examples from a `gen-data` container. Token rows are looked up
    /// from the live embedding via the targets, so the stored `tokens` section
    /// is not consulted.
    pub fn examples_from_container(&self, map: &TensorMap) -> Result<Vec<TrainExample<T>>> {
        let targets = map.require("targets")?;
        let li = self.model_cfg.image_tokens;
        if targets.dims.len() != 2 || targets.dims[1] != li {
            return Err(Error::shape(format!(
                "targets {:?}, expected [count, {li}]",
                targets.dims
            )));
        }
        targets
            .as_u32()?
            .chunks(li)
            .map(|t| {
                let map = Array2::from_shape_vec((self.grid.h, self.grid.w), t.to_vec()).expect("L_I = H*W");
                let image = ImageInput::Rows(token_rows(&map, &self.cats)?);
                Ok(TrainExample {
                    image,
                    targets: t.to_vec(),
                })
            })
            .collect()
    }
}
