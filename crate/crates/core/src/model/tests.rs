use rand::Rng;

use super::*;
use crate::rng;

fn small() -> ModelConfig {
    ModelConfig {
        embed_dim: 16,
        num_blocks: 2,
        num_heads: 2,
        encoder_channels: vec![4, 8],
        adapter_bottleneck: 4,
        decoder_heads: 2,
        mhca_kv_grid: 4,
        ..ModelConfig::default()
    }
}

fn random_input(shape: &[usize], seed: u64) -> Vec<f32> {
    let mut r = rng::stream(seed, &[]);
    (0..shape.iter().product::<usize>()).map(|_| r.random::<f32>()).collect()
}

fn logits(model: &Model, x: &[f32], dims: BatchDims, views: Option<&[View]>) -> Vec<f32> {
    model.predict_logits(x, dims, views).unwrap()
}

/// Randomizes zero-initialized tensors so that every path carries signal.
fn perturb_zero_params(model: &mut Model) {
    let mut r = rng::stream(99, &[]);
    for p in model.params.iter_mut() {
        if p.value.data().iter().all(|v| *v == 0.0) {
            for v in p.value.data_mut() {
                *v = r.random_range(-0.2..0.2);
            }
        }
    }
}

#[test]
fn build_is_deterministic() {
    let cfg = ModelConfig { num_blocks: 2, ..ModelConfig::default() };
    let a = Model::<f32>::build(cfg.clone(), 7).unwrap();
    let b = Model::<f32>::build(cfg.clone(), 7).unwrap();
    assert_eq!(a, b);
    let c = Model::<f32>::build(cfg, 8).unwrap();
    assert_ne!(a.params, c.params);
}

#[test]
fn partition_covers_every_parameter_once() {
    let cfg = ModelConfig { num_blocks: 3, ..small() };
    let m = Model::<f32>::build(cfg, 1).unwrap();
    let part = m.partition();
    // per block: q, k, v, o weights and biases of spatial attention, fc1 and fc2 weights and biases
    assert_eq!(part.frozen.len(), 3 * (8 + 4));
    let mut all: Vec<&String> = part.frozen.iter().chain(&part.trainable).collect();
    all.sort();
    all.dedup();
    assert_eq!(all.len(), m.params.len());
    assert!(part.frozen.iter().all(|n| !part.trainable.contains(n)));
    assert!(part.frozen.iter().all(|n| n.contains(".spatial.") || n.contains(".ffn.")));
}

#[test]
fn frozen_count_grows_by_block_size() {
    let (f2, t2) = Model::<f32>::build(ModelConfig { num_blocks: 2, ..small() }, 1).unwrap().count_parameters();
    let (f4, t4) = Model::<f32>::build(ModelConfig { num_blocks: 4, ..small() }, 1).unwrap().count_parameters();
    let c = 16;
    let per_block = 4 * (c * c + c) + (c * 4 * c + 4 * c) + (4 * c * c + c);
    assert_eq!(f4 - f2, 2 * per_block);
    assert!(t4 > t2);
    let m = Model::<f32>::build(small(), 1).unwrap();
    let (f, t) = m.count_parameters();
    assert_eq!(f + t, m.params.iter().map(|p| p.value.numel()).sum::<usize>());
}

#[test]
fn invalid_configs_name_the_invariant() {
    let err = Model::<f32>::build(ModelConfig { num_blocks: 0, ..small() }, 1).unwrap_err();
    assert!(err.to_string().contains("num_blocks"), "{err}");
    let err = Model::<f32>::build(ModelConfig { embed_dim: 10, num_heads: 4, ..small() }, 1).unwrap_err();
    assert!(err.to_string().contains("num_heads"), "{err}");
    let err = Model::<f32>::build(ModelConfig { adapter_scale: -1.0, ..small() }, 1).unwrap_err();
    assert!(err.to_string().contains("adapter_scale"), "{err}");
}

#[test]
fn encoder_shapes_follow_stage_count() {
    let cfg = ModelConfig { encoder_channels: vec![4, 8, 16], embed_dim: 16, ..small() };
    let m = Model::<f32>::build(cfg.clone(), 2).unwrap();
    let shape = [2, 1, 64, 64, 5];
    let mut g = Graph::bind(&m.params, false);
    let x = g.tape.constant(Tensor::new(shape.to_vec(), random_input(&shape, 1)));
    let dims = BatchDims { batch: 2, height: 64, width: 64, phases: 5 };
    let (tokens, skips, tdims) = encoder_forward(&mut g, &cfg, x, dims).unwrap();
    assert_eq!(g.shape(tokens), vec![10, 8, 8, 16]);
    let sides: Vec<usize> = skips.iter().map(|s| g.shape(*s)[2]).collect();
    assert_eq!(sides, vec![64, 32, 16]);
    assert_eq!(tdims, TokenDims { batch: 2, phases: 5, height: 8, width: 8 });
    let bad = BatchDims { height: 60, ..dims };
    let y = g.tape.constant(Tensor::zeros(vec![2, 1, 60, 64, 5]));
    assert!(matches!(encoder_forward(&mut g, &cfg, y, bad), Err(Error::DimensionMismatch(_))));
}

#[test]
fn encoder_treats_frames_as_images() {
    let cfg = small();
    let m = Model::<f32>::build(cfg.clone(), 3).unwrap();
    let (b, h, w, t) = (2, 8, 8, 3);
    let clip = random_input(&[b, 1, h, w, t], 4);
    // the same frames as B*T single-phase clips, frame-major order b*T + t
    let mut frames = vec![0f32; clip.len()];
    for bi in 0..b {
        for ti in 0..t {
            for p in 0..h * w {
                frames[(bi * t + ti) * h * w + p] = clip[bi * h * w * t + p * t + ti];
            }
        }
    }
    let run = |data: Vec<f32>, dims: BatchDims| {
        let mut g = Graph::bind(&m.params, false);
        let x = g.tape.constant(Tensor::new(vec![dims.batch, 1, h, w, dims.phases], data));
        let (tok, _, _) = encoder_forward(&mut g, &cfg, x, dims).unwrap();
        g.tape.value(tok).clone()
    };
    let a = run(clip, BatchDims { batch: b, height: h, width: w, phases: t });
    let c = run(frames, BatchDims { batch: b * t, height: h, width: w, phases: 1 });
    assert_eq!(a, c);
}

#[test]
fn zero_scaled_adapter_matches_adapter_free_block() {
    let cfg = ModelConfig { adapter_scale: 0.0, ..small() };
    let mut m = Model::<f32>::build(cfg.clone(), 5).unwrap();
    perturb_zero_params(&mut m);
    let dims = TokenDims { batch: 2, phases: 3, height: 2, width: 2 };
    let shape = [6, 2, 2, 16];
    let data = random_input(&shape, 6);
    let run = |adapter: bool| {
        let mut g = Graph::bind(&m.params, false);
        let x = g.tape.constant(Tensor::new(shape.to_vec(), data.clone()));
        let y = block_forward(&mut g, &cfg, 0, x, dims, adapter).unwrap();
        g.tape.value(y).clone()
    };
    let (with, without) = (run(true), run(false));
    assert_eq!(with.max_abs_diff(&without), 0.0);
    assert!(with.data().iter().zip(without.data()).all(|(a, b)| a == b));
    let scaled = ModelConfig { adapter_scale: 0.5, ..cfg.clone() };
    let mut g = Graph::bind(&m.params, false);
    let x = g.tape.constant(Tensor::new(shape.to_vec(), data.clone()));
    let y = block_forward(&mut g, &scaled, 0, x, dims, true).unwrap();
    assert!(g.tape.value(y).max_abs_diff(&without) > 0.0);
}

#[test]
fn single_phase_temporal_attention_is_value_then_output_projection() {
    let cfg = ModelConfig { use_temporal_pos_embed: false, ..small() };
    let m = Model::<f32>::build(cfg, 8).unwrap();
    let mut g = Graph::bind(&m.params.cast::<f64>(), false);
    let shape = [5, 1, 16];
    let data: Vec<f64> = random_input(&shape, 9).into_iter().map(f64::from).collect();
    let x = g.tape.constant(Tensor::new(shape.to_vec(), data));
    let a = g.attention("blocks.0.temporal", x, x, 2);
    let v = g.linear("blocks.0.temporal.v", x);
    let direct = g.linear("blocks.0.temporal.o", v);
    assert!(g.tape.value(a).max_abs_diff(g.tape.value(direct)) < 1e-12);
}

#[test]
fn block_rejects_inconsistent_dims() {
    let cfg = small();
    let m = Model::<f32>::build(cfg.clone(), 1).unwrap();
    let mut g = Graph::bind(&m.params, false);
    let x = g.tape.constant(Tensor::zeros(vec![6, 2, 2, 16]));
    let dims = TokenDims { batch: 2, phases: 2, height: 2, width: 2 };
    assert!(matches!(block_forward(&mut g, &cfg, 0, x, dims, true), Err(Error::Shape(_))));
}

#[test]
fn frame_permutation_commutes_without_position_table() {
    let cfg = ModelConfig { use_temporal_pos_embed: false, ..small() };
    let mut m = Model::<f32>::build(cfg, 10).unwrap();
    perturb_zero_params(&mut m);
    let (b, h, w, t) = (2, 8, 8, 5);
    let dims = BatchDims { batch: b, height: h, width: w, phases: t };
    let x = random_input(&[b, 1, h, w, t], 11);
    let perm = [3, 0, 4, 1, 2];
    let permute = |v: &[f32]| -> Vec<f32> {
        let mut out = vec![0f32; v.len()];
        for (i, chunk) in v.chunks(t).enumerate() {
            for (k, &src) in perm.iter().enumerate() {
                out[i * t + k] = chunk[src];
            }
        }
        out
    };
    let base = logits(&m, &x, dims, Some(&[View::Sax, View::Lax]));
    let moved = logits(&m, &permute(&x), dims, Some(&[View::Sax, View::Lax]));
    let want = permute(&base);
    let err = want.iter().zip(&moved).map(|(a, b)| (a - b).abs()).fold(0f32, f32::max);
    assert!(err <= 1e-5, "max abs diff {err}");
}

#[test]
fn prompts_change_the_output() {
    let m = Model::<f32>::build(small(), 12).unwrap();
    let dims = BatchDims { batch: 1, height: 8, width: 8, phases: 2 };
    let x = random_input(&[1, 1, 8, 8, 2], 13);
    let sax = logits(&m, &x, dims, Some(&[View::Sax]));
    let lax = logits(&m, &x, dims, Some(&[View::Lax]));
    let none = logits(&m, &x, dims, None);
    assert_ne!(sax, lax);
    assert_ne!(sax, none);
    assert!(m.predict_logits(&x, dims, Some(&[View::Sax, View::Lax])).is_err());
}

#[test]
fn batch_members_are_independent() {
    let m = Model::<f32>::build(small(), 14).unwrap();
    let one = random_input(&[1, 1, 8, 8, 3], 15);
    let two: Vec<f32> = one.iter().chain(&one).copied().collect();
    let d1 = BatchDims { batch: 1, height: 8, width: 8, phases: 3 };
    let d2 = BatchDims { batch: 2, ..d1 };
    let a = logits(&m, &one, d1, Some(&[View::Lax]));
    let b = logits(&m, &two, d2, Some(&[View::Lax, View::Lax]));
    assert_eq!(&b[..a.len()], &b[a.len()..]);
    let err = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0f32, f32::max);
    assert!(err < 1e-5, "{err}");
}

#[test]
fn full_forward_shapes_and_trace() {
    let m = Model::<f32>::build(ModelConfig { num_blocks: 2, ..ModelConfig::default() }, 16).unwrap();
    let shape = [2, 1, 64, 64, 5];
    let x = random_input(&shape, 17);
    let mut g = Graph::bind(&m.params, false);
    let xv = g.tape.constant(Tensor::new(shape.to_vec(), x.clone()));
    let out = m.forward(&mut g, xv, Some(&[View::Sax, View::Lax])).unwrap();
    assert_eq!(g.shape(out), shape.to_vec());
    assert!(g.tape.value(out).data().iter().all(|v| v.is_finite()));
    let seen = |label: &str| -> Vec<Vec<usize>> {
        g.trace.iter().filter(|(l, _)| *l == label).map(|(_, s)| s.clone()).collect()
    };
    assert_eq!(seen("encoder input (BT) x C x H x W"), vec![vec![10, 1, 64, 64]]);
    assert_eq!(seen("temporal (BHW) x T x C"), vec![vec![128, 5, 64]; 2]);
    assert_eq!(seen("spatial (BT) x (H'W') x C"), vec![vec![10, 64, 64]; 2]);
    let again = m.predict_logits(&x, BatchDims { batch: 2, height: 64, width: 64, phases: 5 }, Some(&[View::Sax, View::Lax]));
    assert_eq!(again.unwrap(), g.tape.value(out).data());
}
