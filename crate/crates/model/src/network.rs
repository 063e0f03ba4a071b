//! Forward pass: patch embedding, transformer encoder, feature pyramid and
//! decoder, both as tape builders and as plain tensor functions.

use vascufold_core::srus::SliceStack;
use vascufold_core::volume::Volume;
use vascufold_core::Real;

use crate::config::ModelConfig;
use crate::error::{ModelError, Result};
use crate::input::{output_grid, ModelInput};
use crate::params::ModelParams;
use crate::tape::{sigmoid, Tape, Var};
use crate::tensor::Tensor;

/// Parameters placed on a tape, addressable by name.
pub struct Bound<'a, T> {
    params: &'a ModelParams<T>,
    pub vars: Vec<Var>,
}

impl<'a, T: Real> Bound<'a, T> {
    pub fn new(tape: &mut Tape<T>, params: &'a ModelParams<T>) -> Self {
        let vars = params.tensors.iter().map(|t| tape.param(t.clone())).collect();
        Self { params, vars }
    }

    pub fn var(&self, name: &str) -> Var {
        let i = self.params.position(name).unwrap_or_else(|| panic!("missing parameter {name}"));
        self.vars[i]
    }

    pub fn config(&self) -> &ModelConfig {
        &self.params.config
    }
}

pub fn embed_on_tape<T: Real>(tape: &mut Tape<T>, p: &Bound<T>, input: &ModelInput<T>) -> Var {
    let mut acc = p.var("pos");
    for (c, patches) in p.config().channels.iter().zip(&input.patches) {
        let x = tape.constant(patches.clone());
        let proj = tape.linear(x, p.var(&format!("patch.{}.w", c.name())), None);
        acc = tape.add(acc, proj);
    }
    acc
}

pub fn block_on_tape<T: Real>(tape: &mut Tape<T>, p: &Bound<T>, x: Var, i: usize) -> Var {
    let n = |s: &str| p.var(&format!("block{i}.{s}"));
    let h = tape.layer_norm(x, n("ln1.g"), n("ln1.b"));
    let qkv = tape.linear(h, n("qkv.w"), Some(n("qkv.b")));
    let a = tape.attention(qkv, p.config().heads);
    let a = tape.linear(a, n("out.w"), Some(n("out.b")));
    let x = tape.add(x, a);
    let h = tape.layer_norm(x, n("ln2.g"), n("ln2.b"));
    let h = tape.linear(h, n("mlp1.w"), Some(n("mlp1.b")));
    let h = tape.gelu(h);
    let h = tape.linear(h, n("mlp2.w"), Some(n("mlp2.b")));
    tape.add(x, h)
}

/// Fuses per-scale token features, `taps[s]` feeding scale `s`.
pub fn pyramid_on_tape<T: Real>(tape: &mut Tape<T>, p: &Bound<T>, taps: &[Var]) -> Var {
    let cfg = p.config();
    let grid = cfg.token_grid();
    let mut acc: Option<Var> = None;
    for (s, &t) in taps.iter().enumerate() {
        let stride = cfg.pool_stride(s);
        let pooled = tape.pool(t, grid, stride);
        let proj = tape.linear(pooled, p.var(&format!("pyramid{s}.w")), Some(p.var(&format!("pyramid{s}.b"))));
        let up = tape.unpool(proj, grid, stride);
        let gated = tape.gate(up, p.var(&format!("pyramid{s}.gate")));
        acc = Some(match acc {
            Some(a) => tape.add(a, gated),
            None => gated,
        });
    }
    acc.expect("at least one pyramid scale")
}

/// Fused `[n × F]` tokens to `[1, Z, Y, X]` logits.
pub fn decode_on_tape<T: Real>(tape: &mut Tape<T>, p: &Bound<T>, fused: Var) -> Var {
    let cfg = p.config();
    let mut x = tape.to_channels_first(fused, cfg.token_grid());
    for (i, axes) in cfg.upsample_plan().iter().enumerate() {
        for (a, &up) in axes.iter().enumerate() {
            if up {
                x = tape.upsample(x, a + 1);
            }
        }
        x = tape.conv3d(x, p.var(&format!("decoder{i}.w")), p.var(&format!("decoder{i}.b")));
        x = tape.gelu(x);
    }
    tape.conv3d(x, p.var("head.w"), p.var("head.b"))
}

pub fn logits_on_tape<T: Real>(tape: &mut Tape<T>, p: &Bound<T>, input: &ModelInput<T>) -> Var {
    let cfg = p.config();
    let mut x = embed_on_tape(tape, p, input);
    let mut outs = Vec::with_capacity(cfg.depth);
    for i in 0..cfg.depth {
        x = block_on_tape(tape, p, x, i);
        outs.push(x);
    }
    let taps: Vec<Var> = (0..cfg.pyramid_scales).map(|s| outs[cfg.tap_block(s)]).collect();
    let fused = pyramid_on_tape(tape, p, &taps);
    decode_on_tape(tape, p, fused)
}

/// Token embeddings of a stack, `[n_tokens × embed_dim]`.
pub fn patch_embed<T: Real>(stack: &SliceStack, params: &ModelParams<T>) -> Result<Tensor<T>> {
    let input = ModelInput::from_stack(stack, &params.config)?;
    Ok(embed_input(&input, params))
}

pub fn embed_input<T: Real>(input: &ModelInput<T>, params: &ModelParams<T>) -> Tensor<T> {
    let mut tape = Tape::new();
    let p = Bound::new(&mut tape, params);
    let out = embed_on_tape(&mut tape, &p, input);
    tape.value(out).clone()
}

/// One encoder block applied to `[n × embed_dim]` tokens.
pub fn mhsa_block<T: Real>(tokens: &Tensor<T>, params: &ModelParams<T>, block: usize) -> Result<Tensor<T>> {
    let cfg = &params.config;
    if tokens.dims.len() != 2 || tokens.dims[1] != cfg.embed_dim || block >= cfg.depth {
        return Err(ModelError::Shape(format!(
            "block {block} expects [n × {}] tokens, got {:?}",
            cfg.embed_dim, tokens.dims
        )));
    }
    let mut tape = Tape::new();
    let p = Bound::new(&mut tape, params);
    let x = tape.constant(tokens.clone());
    let out = block_on_tape(&mut tape, &p, x, block);
    Ok(tape.value(out).clone())
}

/// Fuses one `[n_tokens × embed_dim]` feature map per pyramid scale.
pub fn feature_pyramid<T: Real>(features: &[Tensor<T>], params: &ModelParams<T>) -> Result<Tensor<T>> {
    let cfg = &params.config;
    if features.len() != cfg.pyramid_scales {
        return Err(ModelError::Shape(format!("{} pyramid inputs for {} scales", features.len(), cfg.pyramid_scales)));
    }
    let want = [cfg.n_tokens(), cfg.embed_dim];
    if let Some(f) = features.iter().find(|f| f.dims != want) {
        return Err(ModelError::Shape(format!("pyramid input {:?} differs from {want:?}", f.dims)));
    }
    let mut tape = Tape::new();
    let p = Bound::new(&mut tape, params);
    let taps: Vec<Var> = features.iter().map(|f| tape.constant(f.clone())).collect();
    let out = pyramid_on_tape(&mut tape, &p, &taps);
    Ok(tape.value(out).clone())
}

/// Logits `[1, Z, Y, X]` from fused `[n_tokens × fusion_dim]` features.
pub fn decode<T: Real>(fused: &Tensor<T>, params: &ModelParams<T>) -> Result<Tensor<T>> {
    let cfg = &params.config;
    let want = [cfg.n_tokens(), cfg.fusion_dim];
    if fused.dims != want {
        return Err(ModelError::Shape(format!("decoder input {:?} differs from {want:?}", fused.dims)));
    }
    let mut tape = Tape::new();
    let p = Bound::new(&mut tape, params);
    let x = tape.constant(fused.clone());
    let out = decode_on_tape(&mut tape, &p, x);
    Ok(tape.value(out).clone())
}

pub fn forward_logits<T: Real>(input: &ModelInput<T>, params: &ModelParams<T>) -> Tensor<T> {
    let mut tape = Tape::new();
    let p = Bound::new(&mut tape, params);
    let out = logits_on_tape(&mut tape, &p, input);
    tape.value(out).clone()
}

/// Occupancy probabilities on the stack's output grid.
pub fn forward<T: Real>(stack: &SliceStack, params: &ModelParams<T>) -> Result<Volume<T>> {
    let input = ModelInput::from_stack(stack, &params.config)?;
    let grid = output_grid(stack, &params.config)?;
    let logits = forward_logits(&input, params);
    let probs = logits.data.into_iter().map(sigmoid).collect();
    Ok(Volume::from_data(grid, probs)?)
}
