//! Reverse-mode differentiation over layer-level operations.
//!
//! Each op records its inputs and whatever forward state its backward pass
//! needs. `backward` walks the tape once in reverse. Summation order is
//! fixed, so gradients are bit-reproducible.

use vascufold_core::Real;

use crate::tensor::{matmul_acc, matmul_at_acc, matmul_bt_acc, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    /// `x[n×k] · w[k×m] + b`
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Add(Var, Var),
    /// Multiplies by a one-element tensor.
    Gate {
        x: Var,
        g: Var,
    },
    LayerNorm {
        x: Var,
        g: Var,
        b: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Gelu(Var),
    /// Fused multi-head attention over a packed `[n × 3E]` QKV matrix.
    Attention {
        qkv: Var,
        heads: usize,
        probs: Vec<T>,
    },
    /// Token-grid average pooling, `[n × c]` rows ordered (z, y, x).
    Pool {
        x: Var,
        grid: [usize; 3],
        stride: [usize; 3],
    },
    /// Nearest-neighbour token-grid upsampling; `grid` is the coarse grid.
    Unpool {
        x: Var,
        grid: [usize; 3],
        stride: [usize; 3],
    },
    /// `[n × c]` to `[c × n]`.
    Transpose(Var),
    /// 2x linear upsampling of one spatial axis of a `[C, Z, Y, X]` tensor.
    Upsample {
        x: Var,
        axis: usize,
    },
    /// Zero-padded same-size 3D convolution, odd cubic kernel.
    Conv {
        x: Var,
        w: Var,
        b: Var,
    },
    /// Soft-Dice plus mean binary cross-entropy on logits.
    DiceBce {
        z: Var,
        target: Vec<T>,
        p: Vec<T>,
        inter: T,
        denom: T,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    first_nonfinite: Option<usize>,
}

/// Soft-Dice smoothing constant.
pub const DICE_EPS: f64 = 1.0;

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

pub fn gelu<T: Real>(x: T) -> T {
    let (c, a, h) = (T::lit(GELU_C), T::lit(GELU_A), T::lit(0.5));
    h * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

fn gelu_grad<T: Real>(x: T) -> T {
    let (c, a, h) = (T::lit(GELU_C), T::lit(GELU_A), T::lit(0.5));
    let t = (c * (x + a * x * x * x)).tanh();
    h * (T::one() + t) + h * x * (T::one() - t * t) * c * (T::one() + T::lit(3.0) * a * x * x)
}

pub fn sigmoid<T: Real>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

/// `ln(1 + e^z)` without overflow.
fn softplus<T: Real>(z: T) -> T {
    z.max(T::zero()) + (-z.abs()).exp().ln_1p()
}

/// Row-wise softmax of an `[n × m]` matrix, in place.
pub fn softmax_rows<T: Real>(s: &mut [T], m: usize) {
    for row in s.chunks_mut(m) {
        let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - mx).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
}

/// Scaled dot-product attention weights `softmax(q kᵀ / √d)`, with `q` and
/// `k` stored `[n × d]`.
pub fn attention_weights<T: Real>(q: &[T], k: &[T], n: usize, d: usize) -> Vec<T> {
    let mut s = vec![T::zero(); n * n];
    matmul_bt_acc(q, k, &mut s, n, d, n);
    let scale = T::one() / T::lit(d as f64).sqrt();
    for v in &mut s {
        *v *= scale;
    }
    softmax_rows(&mut s, n);
    s
}

fn head_slice<T: Real>(qkv: &[T], n: usize, e: usize, part: usize, h: usize, dh: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(n * dh);
    for i in 0..n {
        let off = i * 3 * e + part * e + h * dh;
        out.extend_from_slice(&qkv[off..off + dh]);
    }
    out
}

fn pool_index(g: [usize; 3], st: [usize; 3], fine: [usize; 3]) -> usize {
    let c = [fine[0] / st[0], fine[1] / st[1], fine[2] / st[2]];
    (c[0] * (g[1] / st[1]) + c[1]) * (g[2] / st[2]) + c[2]
}

/// Maps each fine grid cell to its coarse cell.
fn coarse_map(fine: [usize; 3], st: [usize; 3]) -> Vec<usize> {
    let mut m = Vec::with_capacity(fine.iter().product());
    for z in 0..fine[0] {
        for y in 0..fine[1] {
            for x in 0..fine[2] {
                m.push(pool_index(fine, st, [z, y, x]));
            }
        }
    }
    m
}

/// Two-tap weights for 2x upsampling with half-pixel centres: output `o`
/// reads input `lo` with weight ¾ and `hi` with weight ¼.
fn upsample_taps(o: usize, n: usize) -> (usize, usize) {
    let i = o / 2;
    let other = if o.is_multiple_of(2) { i.saturating_sub(1) } else { (i + 1).min(n - 1) };
    (i, other)
}

fn outer_inner(dims: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = dims[..axis].iter().product();
    let inner: usize = dims[axis + 1..].iter().product();
    (outer, dims[axis], inner)
}

/// Runs `f(out_offset, in_offset, len)` over every valid row pair of a
/// zero-padded same-size 3D convolution tap `(dz, dy, dx)`.
fn conv_rows(dims: [usize; 3], d: [isize; 3], mut f: impl FnMut(usize, usize, usize)) {
    let [nz, ny, nx] = dims.map(|v| v as isize);
    let range = |n: isize, d: isize| (0.max(-d), n.min(n - d));
    let (z0, z1) = range(nz, d[0]);
    let (y0, y1) = range(ny, d[1]);
    let (x0, x1) = range(nx, d[2]);
    if x0 >= x1 {
        return;
    }
    for z in z0..z1 {
        for y in y0..y1 {
            let o = ((z * ny + y) * nx + x0) as usize;
            let i = (((z + d[0]) * ny + y + d[1]) * nx + x0 + d[2]) as usize;
            f(o, i, (x1 - x0) as usize);
        }
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), first_nonfinite: None }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Handles of all recorded nodes, in recording order.
    pub fn vars(&self) -> impl Iterator<Item = Var> {
        (0..self.nodes.len()).map(Var)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Index of the first op whose output held a NaN or infinity. Only
    /// tracked in debug builds.
    pub fn first_nonfinite(&self) -> Option<usize> {
        self.first_nonfinite
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, parents: &[Var]) -> Var {
        if cfg!(debug_assertions) && self.first_nonfinite.is_none() && !value.all_finite() {
            log::debug!("non-finite output at op {}", self.nodes.len());
            self.first_nonfinite = Some(self.nodes.len());
        }
        let needs_grad = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// A differentiable input.
    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node { value: t, op: Op::Leaf, needs_grad: true });
        Var(self.nodes.len() - 1)
    }

    /// A constant input; no gradient is accumulated for it.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node { value: t, op: Op::Leaf, needs_grad: false });
        Var(self.nodes.len() - 1)
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let (xv, wv) = (self.value(x), self.value(w));
        let (n, k, m) = (xv.dims[0], xv.dims[1], wv.dims[1]);
        assert_eq!(wv.dims[0], k, "linear: inner dims differ");
        let mut out = vec![T::zero(); n * m];
        if let Some(b) = b {
            let bv = &self.value(b).data;
            for row in out.chunks_mut(m) {
                row.copy_from_slice(bv);
            }
        }
        matmul_acc(&xv.data, &wv.data, &mut out, n, k, m);
        let value = Tensor { dims: vec![n, m], data: out };
        let mut parents = vec![x, w];
        parents.extend(b);
        self.push(value, Op::Linear { x, w, b }, &parents)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut v = self.value(a).clone();
        assert_eq!(v.dims, self.value(b).dims, "add: dims differ");
        v.add_assign(self.value(b));
        self.push(v, Op::Add(a, b), &[a, b])
    }

    pub fn gate(&mut self, x: Var, g: Var) -> Var {
        let s = self.value(g).data[0];
        let mut v = self.value(x).clone();
        v.data.iter_mut().for_each(|a| *a *= s);
        self.push(v, Op::Gate { x, g }, &[x, g])
    }

    /// Normalizes each row of an `[n × e]` matrix.
    pub fn layer_norm(&mut self, x: Var, g: Var, b: Var) -> Var {
        let xv = self.value(x);
        let (n, e) = (xv.dims[0], xv.dims[1]);
        let (gv, bv) = (&self.value(g).data, &self.value(b).data);
        let mut xhat = vec![T::zero(); n * e];
        let mut rstd = vec![T::zero(); n];
        let mut out = vec![T::zero(); n * e];
        let inv_e = T::one() / T::lit(e as f64);
        for i in 0..n {
            let row = &xv.data[i * e..(i + 1) * e];
            let mean = row.iter().copied().sum::<T>() * inv_e;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_e;
            let r = T::one() / (var + T::lit(LN_EPS)).sqrt();
            rstd[i] = r;
            for j in 0..e {
                let h = (row[j] - mean) * r;
                xhat[i * e + j] = h;
                out[i * e + j] = h * gv[j] + bv[j];
            }
        }
        let value = Tensor { dims: vec![n, e], data: out };
        self.push(value, Op::LayerNorm { x, g, b, xhat, rstd }, &[x, g, b])
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let mut v = self.value(x).clone();
        v.data.iter_mut().for_each(|a| *a = gelu(*a));
        self.push(v, Op::Gelu(x), &[x])
    }

    pub fn attention(&mut self, qkv: Var, heads: usize) -> Var {
        let v = self.value(qkv);
        let (n, e3) = (v.dims[0], v.dims[1]);
        let e = e3 / 3;
        let dh = e / heads;
        let mut out = vec![T::zero(); n * e];
        let mut probs = Vec::with_capacity(heads * n * n);
        for h in 0..heads {
            let q = head_slice(&v.data, n, e, 0, h, dh);
            let k = head_slice(&v.data, n, e, 1, h, dh);
            let vv = head_slice(&v.data, n, e, 2, h, dh);
            let p = attention_weights(&q, &k, n, dh);
            debug_assert!(p.chunks(n).all(|r| (r.iter().copied().sum::<T>() - T::one()).abs() < T::lit(1e-6)));
            let mut o = vec![T::zero(); n * dh];
            matmul_acc(&p, &vv, &mut o, n, n, dh);
            for i in 0..n {
                out[i * e + h * dh..i * e + (h + 1) * dh].copy_from_slice(&o[i * dh..(i + 1) * dh]);
            }
            probs.extend(p);
        }
        let value = Tensor { dims: vec![n, e], data: out };
        self.push(value, Op::Attention { qkv, heads, probs }, &[qkv])
    }

    /// Attention probabilities recorded by an attention op, `[heads × n × n]`.
    pub fn attention_probs(&self, v: Var) -> Option<&[T]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    pub fn pool(&mut self, x: Var, grid: [usize; 3], stride: [usize; 3]) -> Var {
        if stride == [1, 1, 1] {
            return x;
        }
        let xv = self.value(x);
        let c = xv.dims[1];
        let coarse = [0, 1, 2].map(|a| grid[a] / stride[a]);
        let nc: usize = coarse.iter().product();
        let map = coarse_map(grid, stride);
        let mut out = vec![T::zero(); nc * c];
        for (i, &j) in map.iter().enumerate() {
            for k in 0..c {
                out[j * c + k] += xv.data[i * c + k];
            }
        }
        let inv = T::one() / T::lit(stride.iter().product::<usize>() as f64);
        out.iter_mut().for_each(|v| *v *= inv);
        let value = Tensor { dims: vec![nc, c], data: out };
        self.push(value, Op::Pool { x, grid, stride }, &[x])
    }

    /// Inverse of `pool`'s grid change: each coarse token is repeated over
    /// its block. `grid` is the fine grid.
    pub fn unpool(&mut self, x: Var, grid: [usize; 3], stride: [usize; 3]) -> Var {
        if stride == [1, 1, 1] {
            return x;
        }
        let xv = self.value(x);
        let c = xv.dims[1];
        let map = coarse_map(grid, stride);
        let mut out = Vec::with_capacity(map.len() * c);
        for &j in &map {
            out.extend_from_slice(&xv.data[j * c..(j + 1) * c]);
        }
        let value = Tensor { dims: vec![map.len(), c], data: out };
        self.push(value, Op::Unpool { x, grid, stride }, &[x])
    }

    /// `[n × c]` tokens to `[c × n]`, then reshaped to `[c, dims...]`.
    pub fn to_channels_first(&mut self, x: Var, grid: [usize; 3]) -> Var {
        let xv = self.value(x);
        let (n, c) = (xv.dims[0], xv.dims[1]);
        assert_eq!(n, grid.iter().product::<usize>());
        let mut out = vec![T::zero(); n * c];
        for i in 0..n {
            for k in 0..c {
                out[k * n + i] = xv.data[i * c + k];
            }
        }
        let value = Tensor { dims: vec![c, grid[0], grid[1], grid[2]], data: out };
        self.push(value, Op::Transpose(x), &[x])
    }

    /// 2x upsampling along tensor axis `axis` (1..=3 of `[C, Z, Y, X]`).
    pub fn upsample(&mut self, x: Var, axis: usize) -> Var {
        let xv = self.value(x);
        let (outer, n, inner) = outer_inner(&xv.dims, axis);
        let mut dims = xv.dims.clone();
        dims[axis] = 2 * n;
        let mut out = vec![T::zero(); outer * 2 * n * inner];
        let (w0, w1) = (T::lit(0.75), T::lit(0.25));
        for o in 0..outer {
            let src = &xv.data[o * n * inner..(o + 1) * n * inner];
            let dst = &mut out[o * 2 * n * inner..(o + 1) * 2 * n * inner];
            for j in 0..2 * n {
                let (a, b) = upsample_taps(j, n);
                let row = &mut dst[j * inner..(j + 1) * inner];
                for ((r, &va), &vb) in
                    row.iter_mut().zip(&src[a * inner..(a + 1) * inner]).zip(&src[b * inner..(b + 1) * inner])
                {
                    *r = w0 * va + w1 * vb;
                }
            }
        }
        self.push(Tensor { dims, data: out }, Op::Upsample { x, axis }, &[x])
    }

    /// `x: [Cin, Z, Y, X]`, `w: [Cout, Cin, k, k, k]`, `b: [Cout]`.
    pub fn conv3d(&mut self, x: Var, w: Var, b: Var) -> Var {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        let (cin, sp) = (xv.dims[0], [xv.dims[1], xv.dims[2], xv.dims[3]]);
        let (cout, k) = (wv.dims[0], wv.dims[2]);
        assert_eq!(wv.dims[1], cin, "conv: channel mismatch");
        let vox: usize = sp.iter().product();
        let pad = (k / 2) as isize;
        let mut out = vec![T::zero(); cout * vox];
        for co in 0..cout {
            let dst = &mut out[co * vox..(co + 1) * vox];
            dst.fill(bv.data[co]);
            for ci in 0..cin {
                let src = &xv.data[ci * vox..(ci + 1) * vox];
                let wbase = (co * cin + ci) * k * k * k;
                for t in 0..k * k * k {
                    let wt = wv.data[wbase + t];
                    if wt == T::zero() {
                        continue;
                    }
                    let d = [(t / (k * k)) as isize - pad, ((t / k) % k) as isize - pad, (t % k) as isize - pad];
                    conv_rows(sp, d, |o, i, len| {
                        for (r, &s) in dst[o..o + len].iter_mut().zip(&src[i..i + len]) {
                            *r += wt * s;
                        }
                    });
                }
            }
        }
        let value = Tensor { dims: vec![cout, sp[0], sp[1], sp[2]], data: out };
        self.push(value, Op::Conv { x, w, b }, &[x, w, b])
    }

    /// Scalar soft-Dice (ε = 1) plus mean BCE of `sigmoid(z)` against a
    /// binary target of the same length.
    pub fn dice_bce(&mut self, z: Var, target: Vec<T>) -> Var {
        let zv = self.value(z);
        assert_eq!(zv.len(), target.len(), "loss: prediction and target sizes differ");
        let eps = T::lit(DICE_EPS);
        let p: Vec<T> = zv.data.iter().map(|&v| sigmoid(v)).collect();
        let mut inter = T::zero();
        let mut sp = T::zero();
        let mut st = T::zero();
        let mut bce = T::zero();
        for ((&zi, &pi), &ti) in zv.data.iter().zip(&p).zip(&target) {
            inter += pi * ti;
            sp += pi;
            st += ti;
            bce += softplus(zi) - ti * zi;
        }
        let n = T::lit(target.len() as f64);
        let denom = sp + st + eps;
        let dice = T::one() - (T::lit(2.0) * inter + eps) / denom;
        let value = Tensor::scalar(dice + bce / n);
        self.push(value, Op::DiceBce { z, target, p, inter, denom }, &[z])
    }

    /// Gradients of the scalar `out` with respect to every node that needs
    /// one, indexed by `Var::index`.
    pub fn backward(&self, out: Var) -> Vec<Option<Tensor<T>>> {
        self.backward_seeded(out, Tensor::filled(&self.value(out).dims, T::one()))
    }

    /// Vector-Jacobian product: gradients of `Σ seed ⊙ out`.
    pub fn backward_seeded(&self, out: Var, seed: Tensor<T>) -> Vec<Option<Tensor<T>>> {
        assert_eq!(seed.dims, self.value(out).dims, "seed dims differ from output");
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(seed);
        for idx in (0..=out.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(gy) = grads[idx].take() else { continue };
            self.backprop(node, &gy, &mut grads);
            grads[idx] = Some(gy);
        }
        grads
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, f: impl FnOnce(&mut [T])) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        let g = grads[v.0].get_or_insert_with(|| Tensor::zeros(&self.nodes[v.0].value.dims));
        f(&mut g.data);
    }

    fn backprop(&self, node: &Node<T>, gy: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let g = &gy.data;
        match &node.op {
            Op::Leaf => {}
            Op::Linear { x, w, b } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (n, k, m) = (xv.dims[0], xv.dims[1], wv.dims[1]);
                self.accumulate(grads, *x, |dx| matmul_bt_acc(g, &wv.data, dx, n, m, k));
                self.accumulate(grads, *w, |dw| matmul_at_acc(&xv.data, g, dw, n, k, m));
                if let Some(b) = b {
                    self.accumulate(grads, *b, |db| {
                        for row in g.chunks(m) {
                            for (d, &v) in db.iter_mut().zip(row) {
                                *d += v;
                            }
                        }
                    });
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    self.accumulate(grads, v, |d| d.iter_mut().zip(g).for_each(|(d, &v)| *d += v));
                }
            }
            Op::Gate { x, g: gate } => {
                let s = self.value(*gate).data[0];
                self.accumulate(grads, *x, |d| d.iter_mut().zip(g).for_each(|(d, &v)| *d += s * v));
                let xv = &self.value(*x).data;
                self.accumulate(grads, *gate, |d| d[0] += xv.iter().zip(g).map(|(&a, &b)| a * b).sum::<T>());
            }
            Op::LayerNorm { x, g: gamma, b, xhat, rstd } => {
                let e = node.value.dims[1];
                let gv = &self.value(*gamma).data;
                self.accumulate(grads, *gamma, |d| {
                    for (hrow, grow) in xhat.chunks(e).zip(g.chunks(e)) {
                        for j in 0..e {
                            d[j] += hrow[j] * grow[j];
                        }
                    }
                });
                self.accumulate(grads, *b, |d| {
                    for grow in g.chunks(e) {
                        for j in 0..e {
                            d[j] += grow[j];
                        }
                    }
                });
                let inv_e = T::one() / T::lit(e as f64);
                self.accumulate(grads, *x, |dx| {
                    for (i, (hrow, grow)) in xhat.chunks(e).zip(g.chunks(e)).enumerate() {
                        let gh: Vec<T> = (0..e).map(|j| grow[j] * gv[j]).collect();
                        let m1 = gh.iter().copied().sum::<T>() * inv_e;
                        let m2 = gh.iter().zip(hrow).map(|(&a, &h)| a * h).sum::<T>() * inv_e;
                        for j in 0..e {
                            dx[i * e + j] += rstd[i] * (gh[j] - m1 - hrow[j] * m2);
                        }
                    }
                });
            }
            Op::Gelu(x) => {
                let xv = &self.value(*x).data;
                self.accumulate(grads, *x, |d| {
                    for ((d, &xi), &gi) in d.iter_mut().zip(xv).zip(g) {
                        *d += gelu_grad(xi) * gi;
                    }
                });
            }
            Op::Attention { qkv, heads, probs } => {
                let v = self.value(*qkv);
                let (n, e) = (v.dims[0], v.dims[1] / 3);
                let dh = e / heads;
                let scale = T::one() / T::lit(dh as f64).sqrt();
                self.accumulate(grads, *qkv, |d| {
                    for h in 0..*heads {
                        let p = &probs[h * n * n..(h + 1) * n * n];
                        let q = head_slice(&v.data, n, e, 0, h, dh);
                        let k = head_slice(&v.data, n, e, 1, h, dh);
                        let vv = head_slice(&v.data, n, e, 2, h, dh);
                        let mut go = Vec::with_capacity(n * dh);
                        for i in 0..n {
                            go.extend_from_slice(&g[i * e + h * dh..i * e + (h + 1) * dh]);
                        }
                        let mut dv = vec![T::zero(); n * dh];
                        matmul_at_acc(p, &go, &mut dv, n, n, dh);
                        let mut dp = vec![T::zero(); n * n];
                        matmul_bt_acc(&go, &vv, &mut dp, n, dh, n);
                        for i in 0..n {
                            let (pr, dr) = (&p[i * n..(i + 1) * n], &mut dp[i * n..(i + 1) * n]);
                            let dot = pr.iter().zip(dr.iter()).map(|(&a, &b)| a * b).sum::<T>();
                            for j in 0..n {
                                dr[j] = pr[j] * (dr[j] - dot) * scale;
                            }
                        }
                        let mut dq = vec![T::zero(); n * dh];
                        matmul_acc(&dp, &k, &mut dq, n, n, dh);
                        let mut dk = vec![T::zero(); n * dh];
                        matmul_at_acc(&dp, &q, &mut dk, n, n, dh);
                        for i in 0..n {
                            for (part, src) in [(0, &dq), (1, &dk), (2, &dv)] {
                                let off = i * 3 * e + part * e + h * dh;
                                for j in 0..dh {
                                    d[off + j] += src[i * dh + j];
                                }
                            }
                        }
                    }
                });
            }
            Op::Pool { x, grid, stride } => {
                let c = node.value.dims[1];
                let map = coarse_map(*grid, *stride);
                let inv = T::one() / T::lit(stride.iter().product::<usize>() as f64);
                self.accumulate(grads, *x, |d| {
                    for (i, &j) in map.iter().enumerate() {
                        for k in 0..c {
                            d[i * c + k] += g[j * c + k] * inv;
                        }
                    }
                });
            }
            Op::Unpool { x, grid, stride } => {
                let c = node.value.dims[1];
                let map = coarse_map(*grid, *stride);
                self.accumulate(grads, *x, |d| {
                    for (i, &j) in map.iter().enumerate() {
                        for k in 0..c {
                            d[j * c + k] += g[i * c + k];
                        }
                    }
                });
            }
            Op::Transpose(x) => {
                let c = node.value.dims[0];
                let n = gy.len() / c;
                self.accumulate(grads, *x, |d| {
                    for i in 0..n {
                        for k in 0..c {
                            d[i * c + k] += g[k * n + i];
                        }
                    }
                });
            }
            Op::Upsample { x, axis } => {
                let (outer, n, inner) = outer_inner(&self.value(*x).dims, *axis);
                let (w0, w1) = (T::lit(0.75), T::lit(0.25));
                self.accumulate(grads, *x, |d| {
                    for o in 0..outer {
                        let src = &g[o * 2 * n * inner..(o + 1) * 2 * n * inner];
                        let dst = &mut d[o * n * inner..(o + 1) * n * inner];
                        for j in 0..2 * n {
                            let (a, b) = upsample_taps(j, n);
                            for t in 0..inner {
                                let gv = src[j * inner + t];
                                dst[a * inner + t] += w0 * gv;
                                dst[b * inner + t] += w1 * gv;
                            }
                        }
                    }
                });
            }
            Op::Conv { x, w, b } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (cin, sp) = (xv.dims[0], [xv.dims[1], xv.dims[2], xv.dims[3]]);
                let (cout, k) = (wv.dims[0], wv.dims[2]);
                let vox: usize = sp.iter().product();
                let pad = (k / 2) as isize;
                let kk = k * k * k;
                let tap =
                    |t: usize| [(t / (k * k)) as isize - pad, ((t / k) % k) as isize - pad, (t % k) as isize - pad];
                self.accumulate(grads, *b, |db| {
                    for co in 0..cout {
                        db[co] += g[co * vox..(co + 1) * vox].iter().copied().sum::<T>();
                    }
                });
                self.accumulate(grads, *w, |dw| {
                    for co in 0..cout {
                        let go = &g[co * vox..(co + 1) * vox];
                        for ci in 0..cin {
                            let src = &xv.data[ci * vox..(ci + 1) * vox];
                            for t in 0..kk {
                                let mut acc = T::zero();
                                conv_rows(sp, tap(t), |o, i, len| {
                                    for (&a, &s) in go[o..o + len].iter().zip(&src[i..i + len]) {
                                        acc += a * s;
                                    }
                                });
                                dw[(co * cin + ci) * kk + t] += acc;
                            }
                        }
                    }
                });
                self.accumulate(grads, *x, |dx| {
                    for co in 0..cout {
                        let go = &g[co * vox..(co + 1) * vox];
                        for ci in 0..cin {
                            let dst = &mut dx[ci * vox..(ci + 1) * vox];
                            for t in 0..kk {
                                let wt = wv.data[(co * cin + ci) * kk + t];
                                if wt == T::zero() {
                                    continue;
                                }
                                conv_rows(sp, tap(t), |o, i, len| {
                                    for (r, &a) in dst[i..i + len].iter_mut().zip(&go[o..o + len]) {
                                        *r += wt * a;
                                    }
                                });
                            }
                        }
                    }
                });
            }
            Op::DiceBce { z, target, p, inter, denom } => {
                let s = g[0];
                let eps = T::lit(DICE_EPS);
                let two = T::lit(2.0);
                let num = two * *inter + eps;
                let inv_n = T::one() / T::lit(target.len() as f64);
                let d2 = *denom * *denom;
                self.accumulate(grads, *z, |d| {
                    for ((d, &pi), &ti) in d.iter_mut().zip(p).zip(target) {
                        let ddice = -(two * ti * *denom - num) / d2;
                        *d += s * (ddice * pi * (T::one() - pi) + (pi - ti) * inv_n);
                    }
                });
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(dims: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(dims, data.to_vec()).unwrap()
    }

    /// Sum of `out ⊙ r` for a fixed pseudo-random `r`, so every output
    /// element contributes a distinct weight to the scalar.
    fn probe(tape: &Tape<f64>, out: Var) -> f64 {
        let v = tape.value(out);
        v.data.iter().enumerate().map(|(i, &a)| a * ((i as f64 * 0.7).sin() + 0.3)).sum()
    }

    fn check_grad(build: impl Fn(&mut Tape<f64>, &[Tensor<f64>]) -> Var, inputs: &[Tensor<f64>]) {
        let eval = |inp: &[Tensor<f64>]| {
            let mut tape = Tape::new();
            let out = build(&mut tape, inp);
            probe(&tape, out)
        };
        let mut tape = Tape::new();
        let out = build(&mut tape, inputs);
        let r: Vec<f64> = (0..tape.value(out).len()).map(|i| (i as f64 * 0.7).sin() + 0.3).collect();
        let dims = tape.value(out).dims.clone();
        let grads = tape.backward_seeded(out, t(&dims, &r));
        for (pi, inp) in inputs.iter().enumerate() {
            for j in 0..inp.len() {
                let h = 1e-6;
                let mut a = inputs.to_vec();
                a[pi].data[j] += h;
                let mut b = inputs.to_vec();
                b[pi].data[j] -= h;
                let fd = (eval(&a) - eval(&b)) / (2.0 * h);
                let an = grads[pi].as_ref().unwrap().data[j];
                assert!((fd - an).abs() <= 1e-6 * (1.0 + fd.abs()), "input {pi}[{j}]: fd {fd} vs {an}");
            }
        }
    }

    fn seq(dims: &[usize], k: f64) -> Tensor<f64> {
        let n: usize = dims.iter().product();
        t(dims, &(0..n).map(|i| ((i as f64 + 1.0) * k).sin()).collect::<Vec<_>>())
    }

    #[test]
    fn linear_layernorm_gelu_gradients() {
        let inputs = [seq(&[3, 4], 0.9), seq(&[4, 5], 1.3), seq(&[5], 0.4), seq(&[5], 2.1), seq(&[5], 0.2)];
        check_grad(
            |tp, i| {
                let v: Vec<Var> = i.iter().map(|x| tp.param(x.clone())).collect();
                let y = tp.linear(v[0], v[1], Some(v[2]));
                let y = tp.layer_norm(y, v[3], v[4]);
                tp.gelu(y)
            },
            &inputs,
        );
    }

    #[test]
    fn attention_gradients() {
        let inputs = [seq(&[5, 12], 0.37)];
        check_grad(
            |tp, i| {
                let x = tp.param(i[0].clone());
                tp.attention(x, 2)
            },
            &inputs,
        );
    }

    #[test]
    fn pooling_gate_and_upsample_gradients() {
        let inputs = [seq(&[16, 2], 0.5), seq(&[1], 0.8)];
        check_grad(
            |tp, i| {
                let x = tp.param(i[0].clone());
                let g = tp.param(i[1].clone());
                let p = tp.pool(x, [2, 2, 4], [1, 2, 2]);
                let u = tp.unpool(p, [2, 2, 4], [1, 2, 2]);
                let u = tp.gate(u, g);
                let s = tp.add(u, x);
                let v = tp.to_channels_first(s, [2, 2, 4]);
                let v = tp.upsample(v, 1);
                tp.upsample(v, 3)
            },
            &inputs,
        );
    }

    #[test]
    fn conv_gradients() {
        let inputs = [seq(&[2, 3, 4, 5], 0.3), seq(&[3, 2, 3, 3, 3], 0.71), seq(&[3], 0.5)];
        check_grad(
            |tp, i| {
                let v: Vec<Var> = i.iter().map(|x| tp.param(x.clone())).collect();
                tp.conv3d(v[0], v[1], v[2])
            },
            &inputs,
        );
    }

    #[test]
    fn loss_gradient() {
        let target: Vec<f64> = (0..10).map(|i| (i % 3 == 0) as u8 as f64).collect();
        let inputs = [seq(&[10], 1.7)];
        check_grad(
            |tp, i| {
                let z = tp.param(i[0].clone());
                tp.dice_bce(z, target.clone())
            },
            &inputs,
        );
    }

    #[test]
    fn conv_identity_kernel() {
        let mut tp = Tape::new();
        let x = tp.constant(seq(&[1, 2, 3, 4], 0.3));
        let mut w = Tensor::zeros(&[1, 1, 3, 3, 3]);
        w.data[13] = 1.0;
        let w = tp.constant(w);
        let b = tp.constant(t(&[1], &[0.0]));
        let y = tp.conv3d(x, w, b);
        assert_eq!(tp.value(y).data, tp.value(x).data);
    }

    #[test]
    fn upsample_of_constant_is_constant() {
        let mut tp = Tape::new();
        let x = tp.constant(Tensor::filled(&[1, 2, 3, 3], 0.5));
        let y = tp.upsample(x, 2);
        assert_eq!(tp.value(y).dims, vec![1, 2, 6, 3]);
        assert!(tp.value(y).data.iter().all(|&v| v == 0.5));
    }
}
