use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use ndarray::{Array2, Ix3};

use ifseg_core::artgen::token_rows;
use ifseg_core::backbone::{FeatureMap, RasterImage};
use ifseg_core::config::RunConfig;
use ifseg_core::container::{Tensor, TensorMap};
use ifseg_core::eval::ConfusionMatrix;
use ifseg_core::model::ImageInput;
use ifseg_core::pipeline::EarlyStop;
use ifseg_core::postproc::{knn_graph, smooth, PostprocessConfig};
use ifseg_core::segpipe::{bilinear_upsample, predict, ProbabilityMap, SegmentationMask};
use ifseg_core::{Error, FeatureMapF32, PipelineF32, ProbabilityMapF32};

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_NUMERICAL: u8 = 3;

#[derive(Parser)]
#[command(
    name = "ifseg",
    version,
    about = "Segmentation from category names alone, trained on artificial token maps"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write artificial samples (`tokens`, `targets`) to a tensor container.
    GenData(GenDataArgs),
    /// Train a model and write a checkpoint.
    Train(TrainArgs),
    /// Segment a generated sample or a PGM/PPM image with a checkpoint.
    Infer(InferArgs),
    /// Smooth probabilities over a KNN graph of the features.
    Postprocess(PostprocessArgs),
    /// Score predicted masks against ground truth.
    Eval(EvalArgs),
    /// Print the effective configuration as `key = value` lines.
    PrintConfig(ConfigArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// `key = value` configuration file; defaults apply without one.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig, Error> {
        let mut run = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        if let Some(seed) = self.seed {
            run.seed = seed;
        }
        run.validate()?;
        Ok(run)
    }
}

#[derive(Args)]
struct GenDataArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    count: usize,
    #[arg(long)]
    out: PathBuf,
    /// Also write each target map as `sample_<i>.pgm` here.
    #[arg(long)]
    mask_dir: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// `gen-data` container; samples are drawn on the fly without one.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Overrides the configured step count.
    #[arg(long)]
    steps: Option<usize>,
    /// Stop once validation accuracy reaches this value.
    #[arg(long)]
    target_accuracy: Option<f64>,
    #[arg(long, default_value_t = 100)]
    check_every: usize,
    #[arg(long, default_value_t = 128)]
    val_samples: u64,
}

#[derive(Clone, Copy, ValueEnum)]
enum TokenSource {
    /// Look up the current embedding rows of the sample's targets.
    Live,
    /// Use the `tokens` section as written by `gen-data`.
    Stored,
}

#[derive(Args)]
struct InferArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    checkpoint: PathBuf,
    /// A `gen-data` container or a binary PGM/PPM image.
    #[arg(long)]
    input: PathBuf,
    /// Sample index within a container input.
    #[arg(long, default_value_t = 0)]
    index: usize,
    #[arg(long, value_enum, default_value = "live")]
    tokens: TokenSource,
    /// Mask size as HxW; defaults to the token grid (container) or the image size.
    #[arg(long, value_parser = parse_size)]
    size: Option<(usize, usize)>,
    /// Output prefix: writes `<out>.pgm`, `<out>.pgm.names.txt` and `<out>.ifsg`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PostprocessArgs {
    /// Configuration supplying K, iterations and the category names.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Container with a `probs` section `[h, w, M]`.
    #[arg(long)]
    probs: PathBuf,
    /// Container with a `features` section `[h, w, C]`; defaults to the `--probs` file.
    #[arg(long)]
    features: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    iterations: Option<usize>,
    /// Also write the argmax mask, upsampled to the `size` section if present.
    #[arg(long)]
    mask: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// Predicted mask; repeat in step with `--gt`.
    #[arg(long, required = true)]
    pred: Vec<PathBuf>,
    #[arg(long, required = true)]
    gt: Vec<PathBuf>,
    /// Number of categories.
    #[arg(long)]
    classes: usize,
    /// Split file listing unseen class indices, whitespace separated.
    #[arg(long)]
    unseen: Option<PathBuf>,
}

fn parse_size(s: &str) -> Result<(usize, usize), String> {
    let (h, w) = s.split_once(['x', 'X']).ok_or("expected HxW")?;
    let h: usize = h.trim().parse().map_err(|e| format!("height: {e}"))?;
    let w: usize = w.trim().parse().map_err(|e| format!("width: {e}"))?;
    if h == 0 || w == 0 {
        return Err("size must be positive".into());
    }
    Ok((h, w))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Infer(a) => infer(a),
        Command::Postprocess(a) => postprocess(a),
        Command::Eval(a) => eval(a),
        Command::PrintConfig(a) => a.load().map(|run| print!("{}", run.render())),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error: {msg}");
            ExitCode::from(match e {
                Error::Numerical(_) => EXIT_NUMERICAL,
                _ => EXIT_DATA,
            })
        }
    }
}

fn gen_data(a: GenDataArgs) -> Result<(), Error> {
    let run = a.config.load()?;
    let pipe = PipelineF32::new(&run)?;
    let (map, samples) = pipe.generate(a.count)?;
    if let Some(dir) = &a.mask_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::Io {
            path: dir.clone(),
            source: e,
        })?;
        for (i, s) in samples.iter().enumerate() {
            let mask = SegmentationMask::new(s.map.clone(), pipe.cats.len())?;
            mask.write_pgm(dir.join(format!("sample_{i}.pgm")), Some(&pipe.cats.names))?;
        }
    }
    map.write(&a.out)?;
    println!(
        "samples={} tokens_per_sample={} dim={}",
        a.count, pipe.model_cfg.image_tokens, pipe.model_cfg.dim
    );
    Ok(())
}

fn train(a: TrainArgs) -> Result<(), Error> {
    let run = a.config.load()?;
    let mut pipe = PipelineF32::new(&run)?;
    let data = match &a.data {
        Some(path) => Some(pipe.examples_from_container(&TensorMap::read(path)?)?),
        None => None,
    };
    let steps = a.steps.unwrap_or(run.steps);
    let log = |r: &ifseg_core::pipeline::StepReport| {
        println!(
            "step={} loss={:.6} tokens_per_s={:.0}",
            r.step, r.loss, r.tokens_per_sec
        )
    };
    match a.target_accuracy {
        Some(target) => {
            let stop = EarlyStop {
                every: a.check_every,
                samples: a.val_samples,
                target_accuracy: target,
            };
            let (taken, val) = pipe.train_until(steps, stop, data.as_deref(), log, |step, r| {
                println!(
                    "step={step} val_accuracy={:.6} val_miou={:.6}",
                    r.token_accuracy, r.miou
                )
            })?;
            println!(
                "steps={taken} val_accuracy={:.6} val_miou={:.6}",
                val.token_accuracy, val.miou
            );
        }
        None => {
            pipe.train(steps, data.as_deref(), log)?;
        }
    }
    pipe.save_checkpoint(&a.out)
}

fn is_image(path: &Path) -> bool {
    matches!(
        path.extension()
            .and_then(|e| e.to_str())
            .map(str::to_ascii_lowercase)
            .as_deref(),
        Some("pgm" | "ppm" | "pnm")
    )
}

fn with_suffix(prefix: &Path, suffix: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(suffix);
    s.into()
}

fn grid_tensor<T: ifseg_core::Scalar>(rows: &Array2<T>, h: usize, w: usize) -> Tensor {
    let c = rows.ncols();
    Tensor::from_array(&rows.to_shape((h, w, c)).expect("h*w rows").to_owned().into_dyn())
}

fn infer(a: InferArgs) -> Result<(), Error> {
    let run = a.config.load()?;
    let pipe = PipelineF32::load_checkpoint(&run, &a.checkpoint)?;
    let (h, w) = (pipe.grid.h, pipe.grid.w);
    let (image, features, default_size) = if is_image(&a.input) {
        let img = RasterImage::<f32>::read(&a.input)?;
        let (fm, tokens) = pipe.image_tokens(&img)?;
        (ImageInput::Embeddings(tokens), fm, (img.height, img.width))
    } else {
        let map = TensorMap::read(&a.input)?;
        let image = match a.tokens {
            TokenSource::Live => {
                let targets = sample_slice(map.require("targets")?.as_u32()?, pipe.model_cfg.image_tokens, a.index)?;
                let labels = Array2::from_shape_vec((h, w), targets.to_vec()).expect("L_I = H*W");
                ImageInput::Rows(token_rows(&labels, &pipe.cats)?)
            }
            TokenSource::Stored => {
                let all = map.require("tokens")?.to_array::<f32>()?;
                let all = all
                    .into_dimensionality::<Ix3>()
                    .map_err(|e| Error::Shape(format!("tokens: {e}")))?;
                if a.index >= all.shape()[0] {
                    return Err(Error::Invalid(format!(
                        "index {} out of range for {} samples",
                        a.index,
                        all.shape()[0]
                    )));
                }
                ImageInput::Embeddings(all.index_axis(ndarray::Axis(0), a.index).to_owned())
            }
        };
        let rows = ifseg_core::model::input_embeddings(&image, &pipe.params, &pipe.task())?;
        let fm = FeatureMap::new(rows.slice(ndarray::s![..h * w, ..]).to_owned(), h, w)?;
        (image, fm, (h, w))
    };
    let probs = pipe.probabilities(&image)?;
    let (oh, ow) = a.size.unwrap_or(default_size);
    let mask = predict(&bilinear_upsample(&probs, oh, ow)?);

    let mut out = TensorMap::new();
    out.insert("probs", grid_tensor(&probs.probs, h, w))?;
    out.insert("features", grid_tensor(&features.rows, features.h, features.w))?;
    out.insert("size", Tensor::from_u32(vec![2], vec![oh as u32, ow as u32])?)?;
    mask.write_pgm(with_suffix(&a.out, ".pgm"), Some(&pipe.cats.names))?;
    out.write(with_suffix(&a.out, ".ifsg"))?;
    println!("mask={}x{} categories={}", oh, ow, pipe.cats.len());
    Ok(())
}

fn sample_slice(data: &[u32], len: usize, index: usize) -> Result<&[u32], Error> {
    if !data.len().is_multiple_of(len) {
        return Err(Error::Shape(format!(
            "targets hold {} values, not a multiple of {len}",
            data.len()
        )));
    }
    data.chunks(len)
        .nth(index)
        .ok_or_else(|| Error::Invalid(format!("index {index} out of range for {} samples", data.len() / len)))
}

fn read_grid(map: &TensorMap, name: &str) -> Result<(Array2<f32>, usize, usize), Error> {
    let t = map.require(name)?.to_array::<f32>()?;
    let t = t
        .into_dimensionality::<Ix3>()
        .map_err(|e| Error::Shape(format!("{name}: {e}")))?;
    let (h, w, c) = t.dim();
    let rows = t.to_shape((h * w, c)).expect("contiguous").to_owned();
    Ok((rows, h, w))
}

fn postprocess(a: PostprocessArgs) -> Result<(), Error> {
    let run = match &a.config {
        Some(path) => Some(RunConfig::load(path)?),
        None => None,
    };
    let defaults = run.as_ref().map(RunConfig::postprocess).unwrap_or_default();
    let cfg = PostprocessConfig::new(a.k.unwrap_or(defaults.k), a.iterations.unwrap_or(defaults.iterations))?;
    let probs_map = TensorMap::read(&a.probs)?;
    let feature_map = match &a.features {
        Some(path) => TensorMap::read(path)?,
        None => probs_map.clone(),
    };
    let (probs, h, w) = read_grid(&probs_map, "probs")?;
    let (features, fh, fw) = read_grid(&feature_map, "features")?;
    if (fh, fw) != (h, w) {
        return Err(Error::Shape(format!("features {fh}x{fw} vs probabilities {h}x{w}")));
    }
    let p: ProbabilityMapF32 = ProbabilityMap::new(probs, h, w)?;
    let graph = knn_graph(&FeatureMapF32::new(features, h, w)?, cfg.k)?;
    let smoothed = smooth(&p, &graph, cfg.iterations)?;

    let mut out = TensorMap::new();
    out.insert("probs", grid_tensor(&smoothed.probs, h, w))?;
    if let Some(size) = probs_map.get("size") {
        out.insert("size", size.clone())?;
    }
    if let Some(mask_path) = &a.mask {
        let (oh, ow) = match probs_map.get("size") {
            Some(t) => match t.as_u32()? {
                [oh, ow] => (*oh as usize, *ow as usize),
                _ => return Err(Error::Shape("size section must hold two values".into())),
            },
            None => (h, w),
        };
        let mask = predict(&bilinear_upsample(&smoothed, oh, ow)?);
        let names = run.as_ref().map(RunConfig::category_names).transpose()?;
        mask.write_pgm(mask_path, names.as_deref())?;
    }
    out.write(&a.out)?;
    println!("k={} iterations={} positions={}", cfg.k, cfg.iterations, h * w);
    Ok(())
}

fn eval(a: EvalArgs) -> Result<(), Error> {
    if a.pred.len() != a.gt.len() {
        return Err(Error::Invalid(format!(
            "{} --pred masks but {} --gt masks",
            a.pred.len(),
            a.gt.len()
        )));
    }
    if a.classes == 0 {
        return Err(Error::Invalid("--classes must be positive".into()));
    }
    let mut cm = ConfusionMatrix::new(a.classes);
    for (pred, gt) in a.pred.iter().zip(&a.gt) {
        let pred = SegmentationMask::read_pgm(pred, a.classes)?;
        let gt = SegmentationMask::read_pgm(gt, a.classes)?;
        cm.accumulate(&pred, &gt)?;
    }
    for (c, iou) in cm.iou().iter().enumerate() {
        match iou {
            Some(v) => println!("iou.{c}={v:.6}"),
            None => println!("iou.{c}=nan"),
        }
    }
    println!("pixels={}", cm.total());
    println!("accuracy={:.6}", cm.pixel_accuracy()?);
    println!("miou={:.6}", cm.miou()?);
    if let Some(path) = &a.unseen {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.clone(),
            source: e,
        })?;
        let unseen = text
            .split_whitespace()
            .map(|t| match t.parse::<usize>() {
                Ok(c) if c < a.classes => Ok(c),
                _ => Err(Error::Format {
                    path: path.clone(),
                    msg: format!("`{t}` is not a class index below {}", a.classes),
                }),
            })
            .collect::<Result<Vec<_>, _>>()?;
        let (u, s, h) = cm.hiou(&unseen)?;
        println!("miou_unseen={u:.6}");
        println!("miou_seen={s:.6}");
        println!("hiou={h:.6}");
    }
    Ok(())
}
