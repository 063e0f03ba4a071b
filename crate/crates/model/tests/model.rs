use proptest::prelude::*;
use rand::Rng;
use vascufold_core::image::Image;
use vascufold_core::rng::rng;
use vascufold_core::srus::{PlanePose, Slice, SliceStack};
use vascufold_core::Channel;
use vascufold_model::network::{block_on_tape, embed_input, Bound};
use vascufold_model::tape::{attention_weights, sigmoid, Tape};
use vascufold_model::train::history_csv;
use vascufold_model::*;

/// Random stack on z-normal planes 20 µm apart with 20 µm pixels.
fn stack(s: usize, h: usize, w: usize, seed: u64) -> SliceStack {
    let mut rng = rng(seed);
    let channels = Channel::ALL.to_vec();
    let slices = (0..s)
        .map(|k| Slice {
            pose: PlanePose {
                origin: [0.0, 0.0, 0.01 + 0.02 * k as f64],
                normal: [0.0, 0.0, 1.0],
                u: [1.0, 0.0, 0.0],
                v: [0.0, 1.0, 0.0],
            },
            data: channels
                .iter()
                .map(|_| Image::from_vec(w, h, (0..w * h).map(|_| rng.random_range(0.0f32..1.0)).collect()).unwrap())
                .collect(),
            warning: false,
        })
        .collect();
    SliceStack {
        width: w,
        height: h,
        pixel_spacing_um: 20.0,
        channels,
        slices,
        warps: vec![None; s],
        normalization: vec![None; s],
    }
}

/// Small configuration exercising every stage.
fn small() -> ModelConfig {
    ModelConfig {
        channels: vec![Channel::Grayscale, Channel::FlowDensity, Channel::FlowAngle],
        input_dims: [2, 8, 8],
        patch: [1, 2, 2],
        embed_dim: 8,
        heads: 2,
        depth: 2,
        pyramid_scales: 3,
        fusion_dim: 6,
        decoder_channels: vec![4],
        output_dims: [8, 8, 4],
        seed: 5,
    }
}

fn random_params(cfg: &ModelConfig, seed: u64) -> ModelParams<f64> {
    let mut p = ModelParams::<f64>::init(cfg).unwrap();
    let mut rng = rng(seed);
    // perturb the deterministic ones/zeros so every path carries signal
    for (name, t) in p.names().to_vec().iter().zip(p.tensors.iter_mut()) {
        if name.ends_with(".g") || name.ends_with(".b") || name.ends_with("gate") {
            t.data.iter_mut().for_each(|v| *v += rng.random_range(-0.3..0.3));
        }
    }
    p
}

fn random_tokens(n: usize, e: usize, seed: u64) -> Tensor<f64> {
    let mut rng = rng(seed);
    Tensor::from_vec(&[n, e], (0..n * e).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

#[test]
fn patch_embedding_shape() {
    let cfg = ModelConfig { input_dims: [8, 32, 32], ..Default::default() };
    let p = ModelParams::<f64>::init(&cfg).unwrap();
    let t = patch_embed(&stack(8, 32, 32, 1), &p).unwrap();
    assert_eq!(t.dims, vec![256, cfg.embed_dim]);
}

#[test]
fn indivisible_stack_names_the_axis() {
    let p = ModelParams::<f64>::init(&small()).unwrap();
    let err = patch_embed(&stack(2, 7, 8, 1), &p).unwrap_err();
    assert!(matches!(err, ModelError::Shape(_)));
    assert!(err.to_string().contains("height"), "{err}");
    let err = patch_embed(&stack(3, 8, 8, 1), &p).unwrap_err();
    assert!(err.to_string().contains("slices"), "{err}");
}

#[test]
fn zero_input_embeds_to_positional_encoding() {
    let cfg = small();
    let p = ModelParams::<f64>::init(&cfg).unwrap();
    let t = embed_input(&ModelInput::zeros(&cfg), &p);
    assert_eq!(&t, p.get("pos").unwrap());
}

#[test]
fn modality_permutation_symmetry() {
    let cfg = small();
    let p = ModelParams::<f64>::init(&cfg).unwrap();
    let input = ModelInput::<f64>::from_stack(&stack(2, 8, 8, 3), &cfg).unwrap();
    let a = embed_input(&input, &p);
    // swap the data of the first two modalities and their projections
    let mut swapped = input.clone();
    swapped.patches.swap(0, 1);
    let mut q = p.clone();
    let n0 = format!("patch.{}.w", cfg.channels[0].name());
    let n1 = format!("patch.{}.w", cfg.channels[1].name());
    let (w0, w1) = (p.get(&n0).unwrap().clone(), p.get(&n1).unwrap().clone());
    *q.get_mut(&n0).unwrap() = w1;
    *q.get_mut(&n1).unwrap() = w0;
    let b = embed_input(&swapped, &q);
    assert!(a.max_abs_diff(&b) < 1e-12);
}

#[test]
fn attention_rows_are_stochastic() {
    let cfg = small();
    let p = random_params(&cfg, 2);
    let mut tape = Tape::new();
    let bound = Bound::new(&mut tape, &p);
    let x = tape.constant(random_tokens(cfg.n_tokens(), cfg.embed_dim, 9));
    let before = tape.len();
    block_on_tape(&mut tape, &bound, x, 0);
    let n = cfg.n_tokens();
    let mut seen = 0;
    for v in tape.vars().skip(before) {
        if let Some(probs) = tape.attention_probs(v) {
            seen += 1;
            assert_eq!(probs.len(), cfg.heads * n * n);
            for row in probs.chunks(n) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }
    }
    assert_eq!(seen, 1);
}

#[test]
fn identical_keys_give_uniform_attention() {
    let n = 5;
    let q: Vec<f64> = (0..n * 3).map(|i| (i as f64).sin()).collect();
    let k: Vec<f64> = (0..n).flat_map(|_| [0.3, -1.2, 0.8]).collect();
    let w = attention_weights(&q, &k, n, 3);
    assert!(w.iter().all(|&v| (v - 1.0 / n as f64).abs() < 1e-15));
}

#[test]
fn two_token_closed_form() {
    // d = 1, so the logits are q·k exactly: [0, ln 3]
    let q = [1.0, 1.0];
    let k = [0.0, 3f64.ln()];
    let w = attention_weights(&q, &k, 2, 1);
    for row in w.chunks(2) {
        assert!((row[0] - 0.25).abs() < 1e-15 && (row[1] - 0.75).abs() < 1e-15, "{row:?}");
    }
}

fn project(f: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>) -> Vec<f64> {
    let (n, k, m) = (f.dims[0], f.dims[1], w.dims[1]);
    let mut out = Vec::with_capacity(n * m);
    for i in 0..n {
        for j in 0..m {
            out.push(b.data[j] + (0..k).map(|t| f.data[i * k + t] * w.data[t * m + j]).sum::<f64>());
        }
    }
    out
}

#[test]
fn single_scale_pyramid_is_a_projection() {
    let cfg = ModelConfig { pyramid_scales: 1, ..small() };
    let p = random_params(&cfg, 4);
    let f = random_tokens(cfg.n_tokens(), cfg.embed_dim, 1);
    let out = feature_pyramid(std::slice::from_ref(&f), &p).unwrap();
    let gate = p.get("pyramid0.gate").unwrap().data[0];
    let want: Vec<f64> =
        project(&f, p.get("pyramid0.w").unwrap(), p.get("pyramid0.b").unwrap()).into_iter().map(|v| v * gate).collect();
    let diff = out.data.iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(diff < 1e-12);
}

#[test]
fn pyramid_gating_and_additivity() {
    let cfg = small();
    let mut p = random_params(&cfg, 6);
    let feats: Vec<Tensor<f64>> = (0..3).map(|s| random_tokens(cfg.n_tokens(), cfg.embed_dim, 20 + s)).collect();
    for (s, g) in [1.0, 0.0, 0.0].iter().enumerate() {
        p.get_mut(&format!("pyramid{s}.gate")).unwrap().data[0] = *g;
    }
    let out = feature_pyramid(&feats, &p).unwrap();
    let finest = project(&feats[0], p.get("pyramid0.w").unwrap(), p.get("pyramid0.b").unwrap());
    let diff = out.data.iter().zip(&finest).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(diff < 1e-12);

    // zeroing scale 1 removes exactly its gated, pooled and repeated projection
    let mut p = random_params(&cfg, 7);
    p.get_mut("pyramid1.gate").unwrap().data[0] = 0.7;
    let full = feature_pyramid(&feats, &p).unwrap();
    let mut zeroed = feats.clone();
    zeroed[1].data.fill(0.0);
    let without = feature_pyramid(&zeroed, &p).unwrap();
    let [gz, gy, gx] = cfg.token_grid();
    let st = cfg.pool_stride(1);
    let (e, f) = (cfg.embed_dim, cfg.fusion_dim);
    let w = p.get("pyramid1.w").unwrap();
    for z in 0..gz {
        for y in 0..gy {
            for x in 0..gx {
                let i = (z * gy + y) * gx + x;
                // average over the pooling block holding (z, y, x)
                let (bz, by, bx) = (z / st[0] * st[0], y / st[1] * st[1], x / st[2] * st[2]);
                let mut pooled = vec![0.0; e];
                for dz in 0..st[0] {
                    for dy in 0..st[1] {
                        for dx in 0..st[2] {
                            let j = ((bz + dz) * gy + by + dy) * gx + bx + dx;
                            for (p, f) in pooled.iter_mut().zip(&feats[1].data[j * e..(j + 1) * e]) {
                                *p += f;
                            }
                        }
                    }
                }
                let cnt = (st[0] * st[1] * st[2]) as f64;
                for c in 0..f {
                    let contrib: f64 = (0..e).map(|t| pooled[t] / cnt * w.data[t * f + c]).sum::<f64>() * 0.7;
                    let got = full.data[i * f + c] - without.data[i * f + c];
                    assert!((got - contrib).abs() < 1e-12, "token {i} channel {c}: {got} vs {contrib}");
                }
            }
        }
    }
}

#[test]
fn decoder_output_dims_and_affine_degenerate() {
    let cfg = small();
    let mut p = random_params(&cfg, 8);
    let fused = random_tokens(cfg.n_tokens(), cfg.fusion_dim, 2);
    let out = decode(&fused, &p).unwrap();
    let [x, y, z] = cfg.output_dims;
    assert_eq!(out.dims, vec![1, z, y, x]);
    for (name, t) in p.names().to_vec().iter().zip(p.tensors.iter_mut()) {
        if name.starts_with("decoder") || name.starts_with("head") {
            t.data.fill(0.0);
        }
    }
    p.get_mut("head.b").unwrap().data[0] = -0.37;
    let out = decode(&fused, &p).unwrap();
    assert!(out.data.iter().all(|&v| v == -0.37));
}

#[test]
fn decoder_is_translation_equivariant_inside() {
    let cfg = ModelConfig {
        input_dims: [2, 32, 32],
        patch: [1, 2, 2],
        output_dims: [32, 32, 4],
        decoder_channels: vec![4],
        ..small()
    };
    cfg.validate().unwrap();
    let p = random_params(&cfg, 10);
    let [gz, gy, gx] = cfg.token_grid();
    let fdim = cfg.fusion_dim;
    let fused = random_tokens(cfg.n_tokens(), fdim, 3);
    let mut shifted = fused.clone();
    for z in 0..gz {
        for y in 0..gy {
            for x in 1..gx {
                let (dst, src) = ((z * gy + y) * gx + x, (z * gy + y) * gx + x - 1);
                for c in 0..fdim {
                    shifted.data[dst * fdim + c] = fused.data[src * fdim + c];
                }
            }
        }
    }
    let a = decode(&fused, &p).unwrap();
    let b = decode(&shifted, &p).unwrap();
    let [nx, ny, nz] = cfg.output_dims;
    let factor = nx / gx;
    let margin = 3 * factor;
    for z in 0..nz {
        for y in 0..ny {
            for x in margin..nx - margin {
                let i = (z * ny + y) * nx + x;
                let j = (z * ny + y) * nx + x - factor;
                assert!((b.data[i] - a.data[j]).abs() < 1e-12, "voxel ({x}, {y}, {z})");
            }
        }
    }
}

#[test]
fn forward_probabilities_are_open_unit_and_deterministic() {
    let cfg = small();
    let p = random_params(&cfg, 11);
    let s = stack(2, 8, 8, 5);
    let v = forward(&s, &p).unwrap();
    assert_eq!(v.grid.dims, cfg.output_dims);
    assert!(v.data.iter().all(|&x| x > 0.0 && x < 1.0));
    let again = forward(&s, &ModelParams::<f64>::init(&cfg).map(|_| p.clone()).unwrap()).unwrap();
    assert_eq!(v.data, again.data);
    // grid spans the slab of planes
    assert!((v.grid.spacing[2] - 0.01).abs() < 1e-12);
    assert!((v.grid.origin[2] - 0.0).abs() < 1e-12);
}

#[test]
fn doubling_logits_sharpens() {
    let cfg = small();
    let p = random_params(&cfg, 12);
    let input = ModelInput::from_stack(&stack(2, 8, 8, 6), &cfg).unwrap();
    let z = forward_logits(&input, &p);
    for &l in &z.data {
        let (a, b) = (sigmoid(l), sigmoid(2.0 * l));
        assert!((b - 0.5).abs() >= (a - 0.5).abs());
    }
}

#[test]
fn full_network_gradient_matches_finite_differences() {
    let cfg = small();
    let p = random_params(&cfg, 13);
    let input = ModelInput::from_stack(&stack(2, 8, 8, 7), &cfg).unwrap();
    let n: usize = cfg.output_dims.iter().product();
    let mut rng = rng(14);
    let target: Vec<f64> = (0..n).map(|_| (rng.random::<f64>() < 0.3) as u8 as f64).collect();
    let positions: Vec<usize> = (0..200).map(|_| rng.random_range(0..p.count())).collect();
    let check = gradient_check(&input, &target, &p, &positions, 1e-5, 1e-6);
    assert_eq!(check.checked, 200);
    assert!(check.max_rel_error < 1e-4, "{check:?}");
}

fn toy_sample(cfg: &ModelConfig, seed: u64) -> train::Sample {
    let s = stack(cfg.input_dims[0], cfg.input_dims[1], cfg.input_dims[2], seed);
    let input = ModelInput::from_stack(&s, cfg).unwrap();
    let [nx, ny, nz] = cfg.output_dims;
    // a bar along x through the middle of the volume
    let mut target = vec![0.0; nx * ny * nz];
    for z in 1..nz - 1 {
        for y in ny / 2 - 1..ny / 2 + 1 {
            for x in 0..nx {
                target[(z * ny + y) * nx + x] = 1.0;
            }
        }
    }
    Sample { input, target }
}

#[test]
fn single_sample_overfits() {
    let cfg = ModelConfig { embed_dim: 16, fusion_dim: 16, decoder_channels: vec![16], ..small() };
    let sample = toy_sample(&cfg, 15);
    let tc =
        TrainConfig { epochs: 300, learning_rate: 0.05, batch_size: 1, grad_clip: Some(1.0), ..Default::default() };

    let out = train(std::slice::from_ref(&sample), &[], ModelParams::init(&cfg).unwrap(), &tc).unwrap();
    let z = forward_logits(&sample.input, &out.params);
    let p: Vec<f64> = z.data.iter().map(|&v| sigmoid(v)).collect();
    let l = loss(&p, &sample.target).unwrap();
    assert!(l.soft_dice < 0.05, "soft-Dice {}", l.soft_dice);
}

#[test]
fn zero_learning_rate_changes_nothing() {
    let cfg = small();
    let data: Vec<Sample> = (0..3).map(|i| toy_sample(&cfg, 30 + i)).collect();
    let init = ModelParams::init(&cfg).unwrap();
    let tc = TrainConfig { epochs: 3, learning_rate: 0.0, batch_size: 2, ..Default::default() };
    let out = train(&data, &data[..1], init.clone(), &tc).unwrap();
    assert_eq!(out.params, init);
    assert!(out.history.iter().all(|h| h.loss == out.history[0].loss && h.val_dice == out.history[0].val_dice));
}

#[test]
fn training_is_seeded() {
    let cfg = small();
    let data: Vec<Sample> = (0..4).map(|i| toy_sample(&cfg, 40 + i)).collect();
    let tc = TrainConfig { epochs: 3, batch_size: 2, ..Default::default() };
    let run = || train(&data, &data[..2], ModelParams::init(&cfg).unwrap(), &tc).unwrap();
    let (a, b) = (run(), run());
    let strip = |h: &[EpochRecord]| h.iter().map(|r| (r.epoch, r.loss, r.val_dice)).collect::<Vec<_>>();
    assert_eq!(strip(&a.history), strip(&b.history));
    assert_eq!(a.params, b.params);
    assert!(history_csv(&a.history).starts_with("epoch,loss,val_dice,wall_ms\n"));
}

#[test]
fn divergence_names_the_step() {
    let cfg = small();
    let data = vec![toy_sample(&cfg, 50)];
    let mut init = ModelParams::<f64>::init(&cfg).unwrap();
    init.get_mut("head.b").unwrap().data[0] = f64::NAN;
    let err = train(&data, &[], init, &TrainConfig::default()).unwrap_err();
    assert!(matches!(err, ModelError::Diverged(_)));
    assert!(err.to_string().contains("step 0"), "{err}");
}

#[test]
fn save_load_is_bit_exact() {
    let cfg = small();
    let p = random_params(&cfg, 16);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("params.json");
    p.save(&path).unwrap();
    let q = ModelParams::<f64>::load(&path).unwrap();
    assert_eq!(p, q);
    let s = stack(2, 8, 8, 8);
    assert_eq!(reconstruct(&s, &p, 0.5).unwrap().mask, reconstruct(&s, &q, 0.5).unwrap().mask);
    // a truncated payload is rejected
    let bin = dir.path().join("params.bin");
    let bytes = std::fs::read(&bin).unwrap();
    std::fs::write(&bin, &bytes[..bytes.len() - 8]).unwrap();
    assert!(ModelParams::<f64>::load(&path).is_err());
}

#[test]
fn reconstruct_threshold_boundaries() {
    let cfg = small();
    let mut p = random_params(&cfg, 17);
    let s = stack(2, 8, 8, 9);
    let all = reconstruct(&s, &p, 0.0).unwrap();
    assert_eq!(all.mask.count(), all.mask.data.len());
    p.get_mut("head.w").unwrap().data.fill(0.0);
    p.get_mut("head.b").unwrap().data[0] = -30.0;
    assert_eq!(reconstruct(&s, &p, 0.5).unwrap().mask.count(), 0);
    // inference also runs in single precision
    let p32: ModelParams<f32> = p.cast();
    assert_eq!(reconstruct(&s, &p32, 0.5).unwrap().mask.count(), 0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]
    #[test]
    fn parameter_count_formula(
        e_mult in 1usize..4, heads in 1usize..3, depth in 1usize..4, scales in 1usize..4,
        fusion in 1usize..6, n_ch in 1usize..7, c0 in 1usize..5, c1 in 1usize..5,
    ) {
        let cfg = ModelConfig {
            channels: Channel::ALL[..n_ch].to_vec(),
            input_dims: [4, 8, 8],
            patch: [1, 2, 2],
            embed_dim: e_mult * heads * 2,
            heads,
            depth,
            pyramid_scales: scales,
            fusion_dim: fusion,
            decoder_channels: vec![c0, c1],
            output_dims: [16, 16, 16],
            seed: 0,
        };
        prop_assume!(cfg.validate().is_ok());
        let p = ModelParams::<f64>::init(&cfg).unwrap();
        prop_assert_eq!(p.count(), cfg.param_count());
    }
}
