use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::layers::attn_forward;
use super::network::{add_positions, encoder_forward};
use super::*;
use crate::rng::seed_rng;
use crate::scalar::Scalar;
use crate::vocab::{EmbeddingMatrix, Prompt, SegCategorySet};

const VOCAB: usize = 12;

struct Fixture<T> {
    cfg: ModelConfig,
    params: ModelParams<T>,
    prompt: Prompt,
    cats: SegCategorySet,
}

impl<T: Scalar> Fixture<T> {
    fn task(&self) -> Task<'_> {
        Task {
            cfg: &self.cfg,
            prompt: &self.prompt,
            cats: &self.cats,
        }
    }
}

fn config(dim: usize, layers: usize, heads: usize, image_tokens: usize, mask: DecoderMask) -> ModelConfig {
    ModelConfig {
        dim,
        enc_layers: layers,
        dec_layers: layers,
        heads,
        image_tokens,
        prompt_max: 6,
        ffn_mult: 2,
        decoder_mask: mask,
    }
}

/// Parameters with every entry drawn from N(0, std²), layer-norm gains around 1.
fn fixture<T: Scalar>(cfg: ModelConfig, std: f64, seed: u64) -> Fixture<T> {
    let mut rng = seed_rng(seed);
    let embedding = EmbeddingMatrix::init(VOCAB, cfg.dim, INIT_STD, &mut rng);
    let mut params = ModelParams::init(&cfg, embedding, &mut rng).unwrap();
    for (name, mut t) in params.named_mut() {
        let gain = name.ends_with("gamma");
        t.mapv_inplace(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            T::lit(if gain { 1.0 + 0.2 * z } else { std * z })
        });
    }
    let cats = SegCategorySet {
        names: vec!["a".into(), "b".into(), "c".into()],
        merged_ids: vec![3, 4, 5],
        subtoken_ids: vec![vec![3], vec![4], vec![5]],
    };
    let prompt = Prompt {
        text: String::new(),
        ids: vec![6, 7, 8],
    };
    Fixture {
        cfg,
        params,
        prompt,
        cats,
    }
}

fn random_example<T: Scalar>(cfg: &ModelConfig, seed: u64) -> TrainExample<T> {
    let mut rng = seed_rng(seed);
    let targets: Vec<u32> = (0..cfg.image_tokens).map(|_| rng.random_range(0..3)).collect();
    let rows = targets.iter().map(|&t| t + 3).collect();
    TrainExample {
        image: ImageInput::Rows(rows),
        targets,
    }
}

fn max_abs_diff<T: Scalar>(a: &Array2<T>, b: &Array2<T>) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x.as_f64() - y.as_f64()).abs())
        .fold(0.0, f64::max)
}

fn zero_blocks<T: Scalar>(params: &mut ModelParams<T>) {
    for (name, mut t) in params.named_mut() {
        if (name.starts_with("encoder.") || name.starts_with("decoder.")) && !name.contains(".ln") {
            t.fill(T::zero());
        }
    }
}

#[test]
fn zero_blocks_pass_inputs_through() {
    let mut fx = fixture::<f64>(config(8, 2, 2, 4, DecoderMask::Bidirectional), 0.3, 1);
    zero_blocks(&mut fx.params);
    let task = fx.task();
    let e_x = input_embeddings(&random_example::<f64>(&fx.cfg, 2).image, &fx.params, &task).unwrap();
    let enc = encode(&e_x, &fx.params, &fx.cfg).unwrap();
    let x = add_positions(&e_x, &fx.params, &fx.cfg).unwrap();
    assert_eq!(enc.ctx, x);
    let dec = decode_spatial(&enc, &fx.params, &fx.cfg).unwrap();
    assert_eq!(dec.h.row(0), &fx.params.bos + &fx.params.pos_image.row(0));
    for i in 1..4 {
        assert_eq!(dec.h.row(i), &enc.ctx.row(i - 1) + &fx.params.pos_image.row(i));
    }
}

#[test]
fn attention_rows_are_distributions() {
    let fx = fixture::<f64>(config(8, 2, 2, 4, DecoderMask::Bidirectional), 0.5, 3);
    let e_x = input_embeddings(&random_example::<f64>(&fx.cfg, 4).image, &fx.params, &fx.task()).unwrap();
    let x = add_positions(&e_x, &fx.params, &fx.cfg).unwrap();
    let (_, caches) = encoder_forward(x, &fx.params.encoder, fx.cfg.heads);
    for cache in &caches {
        for p in cache.attention().probs() {
            assert_eq!(p.dim(), (7, 7));
            for row in p.rows() {
                assert!((row.sum() - 1.0).abs() < 1e-12);
                assert!(row.iter().all(|&v| v >= 0.0));
            }
        }
    }
}

#[test]
fn causal_attention_ignores_later_keys() {
    let fx = fixture::<f64>(config(8, 1, 2, 4, DecoderMask::Causal), 0.5, 5);
    let p = &fx.params.decoder[0].self_attn;
    let mut rng = seed_rng(6);
    let x = Array2::from_shape_fn((5, 8), |_| rng.random_range(-1.0..1.0));
    let mut y = x.clone();
    y.row_mut(4).fill(3.0);
    let (a, cache) = attn_forward(&x, &x, p, 2, true);
    let (b, _) = attn_forward(&y, &y, p, 2, true);
    assert_eq!(a.slice(ndarray::s![..4, ..]), b.slice(ndarray::s![..4, ..]));
    for probs in cache.probs() {
        for (i, row) in probs.rows().into_iter().enumerate() {
            assert!(row.iter().skip(i + 1).all(|&v| v == 0.0));
        }
    }
}

#[test]
fn parallel_and_sequential_decode_agree() {
    for mask in [DecoderMask::Bidirectional, DecoderMask::Causal] {
        for seed in 0..5 {
            let fx = fixture::<f32>(config(16, 2, 4, 9, mask), 0.2, 100 + seed);
            let e_x = input_embeddings(&random_example::<f32>(&fx.cfg, seed).image, &fx.params, &fx.task()).unwrap();
            let enc = encode(&e_x, &fx.params, &fx.cfg).unwrap();
            let a = decode_spatial(&enc, &fx.params, &fx.cfg).unwrap();
            let b = decode_sequential(&enc, &fx.params, &fx.cfg).unwrap();
            assert!(max_abs_diff(&a.h, &b.h) <= 1e-5, "{mask:?} seed {seed}");
        }
    }
}

#[test]
fn cross_attention_permutation() {
    let fx = fixture::<f64>(config(8, 1, 2, 4, DecoderMask::Bidirectional), 0.5, 7);
    let p = &fx.params.decoder[0].cross_attn;
    let mut rng = seed_rng(8);
    let q = Array2::from_shape_fn((4, 8), |_| rng.random_range(-1.0..1.0));
    let mem = Array2::from_shape_fn((6, 8), |_| rng.random_range(-1.0..1.0));
    let perm = [3usize, 0, 5, 1, 4, 2];
    let mem_p = mem.select(ndarray::Axis(0), &perm);
    let q_p = q.select(ndarray::Axis(0), &[2, 0, 3, 1]);
    let (out, _) = attn_forward(&q, &mem, p, 2, false);
    let (out_mem, _) = attn_forward(&q, &mem_p, p, 2, false);
    let (out_q, _) = attn_forward(&q_p, &mem, p, 2, false);
    assert!(max_abs_diff(&out, &out_mem) <= 1e-6);
    assert!(max_abs_diff(&out.select(ndarray::Axis(0), &[2, 0, 3, 1]), &out_q) <= 1e-6);
}

#[test]
fn output_logits_are_embedding_dot_products() {
    let emb = EmbeddingMatrix::new(ndarray::array![[1.0, 0.0], [0.0, 2.0], [1.0, 1.0]]);
    let h = DecoderOutput {
        h: ndarray::array![[3.0, 4.0], [0.0, 0.0]],
    };
    let logits = output_logits(&h, &emb).unwrap();
    assert_eq!(logits, ndarray::array![[3.0, 8.0, 7.0], [0.0, 0.0, 0.0]]);
    let bad = DecoderOutput {
        h: Array2::<f64>::zeros((1, 3)),
    };
    assert!(output_logits(&bad, &emb).is_err());
}

#[test]
fn gradcheck_f64() {
    let fx = fixture::<f64>(config(8, 1, 2, 4, DecoderMask::Bidirectional), 0.4, 11);
    let ex = random_example(&fx.cfg, 12);
    for r in gradient_check(&ex, &fx.params, &fx.task(), 1e-5).unwrap() {
        assert!(r.rel_error <= 1e-5, "{r:?}");
    }
}

#[test]
fn gradcheck_f32_causal() {
    let fx = fixture::<f32>(config(8, 1, 2, 4, DecoderMask::Causal), 0.4, 13);
    let ex = random_example(&fx.cfg, 14);
    for r in gradient_check(&ex, &fx.params, &fx.task(), 1e-2).unwrap() {
        assert!(r.rel_error <= 1e-3, "{r:?}");
    }
}

#[test]
fn gradcheck_with_ignored_targets_and_fixed_embeddings() {
    let fx = fixture::<f64>(config(8, 1, 2, 4, DecoderMask::Bidirectional), 0.4, 15);
    let mut rng = seed_rng(16);
    let image = ImageInput::Embeddings(Array2::from_shape_fn((4, 8), |_| rng.random_range(-0.5..0.5)));
    let ex = TrainExample {
        image,
        targets: vec![0, crate::segpipe::IGNORE, 2, 1],
    };
    for r in gradient_check(&ex, &fx.params, &fx.task(), 1e-5).unwrap() {
        assert!(r.rel_error <= 1e-5, "{r:?}");
    }
}

#[test]
fn loss_validates_targets() {
    let fx = fixture::<f64>(config(8, 1, 2, 4, DecoderMask::Bidirectional), 0.1, 17);
    let task = fx.task();
    let bad = TrainExample {
        image: ImageInput::Rows(vec![3; 4]),
        targets: vec![0, 1, 3, 0],
    };
    assert!(example_loss(&bad, &fx.params, &task, None).is_err());
    let ignored = TrainExample {
        image: ImageInput::Rows(vec![3; 4]),
        targets: vec![crate::segpipe::IGNORE; 4],
    };
    assert!(example_loss(&ignored, &fx.params, &task, None).is_err());
    let short = TrainExample {
        image: ImageInput::Rows(vec![3; 3]),
        targets: vec![0; 3],
    };
    assert!(example_loss(&short, &fx.params, &task, None).is_err());
}

#[test]
fn uniform_logits_give_log_m() {
    let mut fx = fixture::<f64>(config(8, 1, 2, 4, DecoderMask::Bidirectional), 0.1, 18);
    // identical category rows make every logit equal
    for id in 3..6 {
        fx.params.embedding.rows.row_mut(id).fill(0.25);
    }
    let ex = random_example(&fx.cfg, 19);
    let loss = example_loss(&ex, &fx.params, &fx.task(), None).unwrap();
    assert!((loss - 3f64.ln()).abs() < 1e-12);
}

#[test]
fn adamw_zero_gradient_is_pure_decay() {
    let fx = fixture::<f64>(config(8, 1, 2, 4, DecoderMask::Bidirectional), 0.3, 20);
    let hp = AdamWConfig {
        lr: 0.01,
        weight_decay: 0.5,
        ..AdamWConfig::default()
    };
    let mut opt = AdamW::new(hp, &fx.params);
    let mut params = fx.params.clone();
    opt.update(&mut params, &fx.params.zeros_like());
    let factor = 1.0 - 0.01 * 0.5;
    for ((_, a), (_, b)) in params.named().iter().zip(fx.params.named()) {
        for (x, y) in a.iter().zip(b.iter()) {
            assert_eq!(*x, y * factor);
        }
    }
}

#[test]
fn adamw_first_step_closed_form() {
    let mut fx = fixture::<f64>(config(8, 1, 2, 4, DecoderMask::Bidirectional), 0.3, 21);
    fx.params.fill(0.0);
    fx.params.bos[0] = 2.0;
    let mut grads = fx.params.zeros_like();
    grads.bos[0] = -0.3;
    let hp = AdamWConfig {
        lr: 0.1,
        weight_decay: 0.2,
        beta1: 0.9,
        beta2: 0.99,
        eps: 1e-8,
    };
    let mut opt = AdamW::new(hp, &fx.params);
    let mut params = fx.params.clone();
    opt.update(&mut params, &grads);
    let expected = 2.0 * (1.0 - 0.1 * 0.2) - 0.1 * (-0.3) / (0.3 + 1e-8);
    assert!((params.bos[0] - expected).abs() < 1e-15);
    assert_eq!(opt.step, 1);
    assert!((opt.m.bos[0] - 0.1 * -0.3).abs() < 1e-15);
    assert!((opt.v.bos[0] - 0.01 * 0.09).abs() < 1e-15);
    assert_eq!(params.bos[1], 0.0);
}

#[test]
fn adamw_rejects_bad_hyperparameters() {
    assert!(AdamWConfig {
        lr: -1.0,
        ..AdamWConfig::default()
    }
    .validate()
    .is_err());
    assert!(AdamWConfig {
        beta1: 1.0,
        ..AdamWConfig::default()
    }
    .validate()
    .is_err());
    assert!(AdamWConfig {
        eps: 0.0,
        ..AdamWConfig::default()
    }
    .validate()
    .is_err());
    assert!(AdamWConfig::default().validate().is_ok());
}

#[test]
fn training_is_bit_reproducible_and_lowers_loss() {
    let run = |seed| {
        let fx = fixture::<f32>(config(8, 1, 2, 4, DecoderMask::Bidirectional), 0.1, seed);
        let mut params = fx.params.clone();
        let mut opt = AdamW::new(
            AdamWConfig {
                lr: 1e-2,
                ..AdamWConfig::default()
            },
            &params,
        );
        let batch: Vec<_> = (0..4).map(|i| random_example(&fx.cfg, 40 + i)).collect();
        let task = Task {
            cfg: &fx.cfg,
            prompt: &fx.prompt,
            cats: &fx.cats,
        };
        let losses: Vec<f32> = (0..60)
            .map(|_| train_step(&batch, &mut params, &mut opt, &task).unwrap())
            .collect();
        (params, losses)
    };
    let (a, la) = run(30);
    let (b, lb) = run(30);
    assert_eq!(a, b);
    assert_eq!(la, lb);
    assert!(la[59] < 0.5 * la[0], "{} -> {}", la[0], la[59]);
}

#[test]
fn init_statistics() {
    let cfg = config(64, 2, 4, 64, DecoderMask::Bidirectional);
    let mut rng = seed_rng(50);
    let emb = EmbeddingMatrix::<f64>::init(10, 64, INIT_STD, &mut rng);
    let params = ModelParams::init(&cfg, emb, &mut rng).unwrap();
    let w: Array1<f64> = params.encoder[0].attn.wq.iter().copied().collect();
    let mean = w.mean().unwrap();
    let std = w.std(0.0);
    assert!(mean.abs() < 3.0 * 0.02 / (w.len() as f64).sqrt() * 1.5);
    // truncation at ±2σ shrinks the deviation to about 0.88σ
    assert!((std - 0.0176).abs() < 0.001, "{std}");
    assert!(w.iter().all(|v| v.abs() <= 0.04));
    assert!(params.encoder[0].ln1.gamma.iter().all(|&g| g == 1.0));
    assert!(params.decoder[1].ln3.beta.iter().all(|&b| b == 0.0));
}
