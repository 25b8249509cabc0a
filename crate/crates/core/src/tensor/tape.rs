use super::kernels::{self, col2im_add, gemm, im2col, inverse_perm, permute_data, View};
use super::{Real, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Linear { x: Var, w: Var, b: Option<Var> },
    MatMul { a: Var, b: Var, ta: bool, tb: bool, batch: usize, b_batched: bool, m: usize, k: usize, n: usize },
    Add { a: Var, b: Var },
    AddSuffix { a: Var, b: Var },
    Scale { a: Var, s: T },
    Gelu { a: Var },
    Softmax { a: Var },
    LayerNorm { x: Var, g: Var, b: Var, mean: Vec<T>, rstd: Vec<T> },
    Permute { a: Var, perm: Vec<usize> },
    Reshape { a: Var },
    Concat { parts: Vec<Var>, axis: usize },
    Narrow { a: Var, axis: usize, start: usize },
    ExpandLeading { a: Var, n: usize },
    Conv2d { x: Var, w: Var, b: Option<Var>, k: usize },
    AvgPool { a: Var, k: usize },
    Upsample { a: Var, f: usize },
    SumAll { a: Var },
    Bce { z: Var, target: Vec<T> },
    SoftDice { z: Var, target: Vec<T>, groups: usize, smooth: T },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Records a forward computation so that [`Tape::backward`] can replay it in reverse.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Grads<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn outer_inner(shape: &[usize], axis: usize) -> (usize, usize) {
    (shape[..axis].iter().product(), shape[axis + 1..].iter().product())
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += *s;
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.ng(v)
    }

    /// `x·w + b` over the last axis; `w` is stored `[in, out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        assert_eq!(ws.len(), 2, "linear weight must be 2-D");
        let (din, dout) = (ws[0], ws[1]);
        assert_eq!(*xs.last().expect("linear input rank"), din, "linear: input {xs:?} vs weight {ws:?}");
        let rows = xs.iter().product::<usize>() / din.max(1);
        let mut out = vec![T::zero(); rows * dout];
        if let Some(b) = b {
            let bias = self.value(b).data();
            assert_eq!(bias.len(), dout, "linear bias length");
            for row in out.chunks_mut(dout) {
                row.copy_from_slice(bias);
            }
        }
        let beta = if b.is_some() { T::one() } else { T::zero() };
        gemm(
            rows,
            din,
            dout,
            T::one(),
            self.value(x).data(),
            View::rm(din),
            self.value(w).data(),
            View::rm(dout),
            beta,
            &mut out,
            View::rm(dout),
        );
        let mut shape = xs;
        *shape.last_mut().unwrap() = dout;
        let ng = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        self.push(Tensor::new(shape, out), Op::Linear { x, w, b }, ng)
    }

    /// Batched matrix product over the last two axes, optionally transposing
    /// either operand. `b` may be 2-D, in which case it is shared by every batch.
    pub fn matmul(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Var {
        let ashape = self.shape(a).to_vec();
        let bshape = self.shape(b).to_vec();
        assert!(ashape.len() >= 2 && bshape.len() >= 2, "matmul needs rank >= 2");
        let ra = ashape.len();
        let rb = bshape.len();
        let (m, k) = if ta { (ashape[ra - 1], ashape[ra - 2]) } else { (ashape[ra - 2], ashape[ra - 1]) };
        let (kb, n) = if tb { (bshape[rb - 1], bshape[rb - 2]) } else { (bshape[rb - 2], bshape[rb - 1]) };
        assert_eq!(k, kb, "matmul inner dims: {ashape:?} x {bshape:?} (ta={ta}, tb={tb})");
        let batch: usize = ashape[..ra - 2].iter().product();
        let b_batched = rb > 2;
        if b_batched {
            assert_eq!(&ashape[..ra - 2], &bshape[..rb - 2], "matmul batch dims");
        }
        let av = if ta { View::tr(m) } else { View::rm(k) };
        let bv = if tb { View::tr(k) } else { View::rm(n) };
        let mut out = vec![T::zero(); batch * m * n];
        {
            let ad = self.value(a).data();
            let bd = self.value(b).data();
            for i in 0..batch {
                let bo = if b_batched { i * k * n } else { 0 };
                gemm(
                    m,
                    k,
                    n,
                    T::one(),
                    &ad[i * m * k..(i + 1) * m * k],
                    av,
                    &bd[bo..bo + k * n],
                    bv,
                    T::zero(),
                    &mut out[i * m * n..(i + 1) * m * n],
                    View::rm(n),
                );
            }
        }
        let mut shape = ashape[..ra - 2].to_vec();
        shape.extend([m, n]);
        let ng = self.ng(a) || self.ng(b);
        self.push(
            Tensor::new(shape, out),
            Op::MatMul { a, b, ta, tb, batch, b_batched, m, k, n },
            ng,
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add: shape mismatch");
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| *x + *y)
            .collect();
        let shape = self.shape(a).to_vec();
        let ng = self.ng(a) || self.ng(b);
        self.push(Tensor::new(shape, data), Op::Add { a, b }, ng)
    }

    /// Adds `b` to `a`, broadcasting `b` over the leading axes of `a`.
    /// `b.shape` must equal a suffix of `a.shape`.
    pub fn add_suffix(&mut self, a: Var, b: Var) -> Var {
        let ashape = self.shape(a).to_vec();
        let bshape = self.shape(b).to_vec();
        assert!(
            bshape.len() <= ashape.len() && ashape[ashape.len() - bshape.len()..] == bshape[..],
            "add_suffix: {bshape:?} is not a suffix of {ashape:?}"
        );
        let bd = self.value(b).data();
        let nb = bd.len();
        let data = self
            .value(a)
            .data()
            .chunks(nb)
            .flat_map(|row| row.iter().zip(bd).map(|(x, y)| *x + *y))
            .collect();
        let ng = self.ng(a) || self.ng(b);
        self.push(Tensor::new(ashape, data), Op::AddSuffix { a, b }, ng)
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let t = self.value(a);
        let data = t.data().iter().map(|x| *x * s).collect();
        let shape = t.shape().to_vec();
        let ng = self.ng(a);
        self.push(Tensor::new(shape, data), Op::Scale { a, s }, ng)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let data = t.data().iter().map(|x| kernels::gelu(*x)).collect();
        let shape = t.shape().to_vec();
        let ng = self.ng(a);
        self.push(Tensor::new(shape, data), Op::Gelu { a }, ng)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let n = *t.shape().last().expect("softmax rank");
        let mut data = t.data().to_vec();
        for row in data.chunks_mut(n) {
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            for v in row.iter_mut() {
                *v = (*v - mx).exp_fast();
            }
            let inv = T::one() / row.iter().copied().sum::<T>();
            for v in row.iter_mut() {
                *v *= inv;
            }
        }
        let shape = t.shape().to_vec();
        let ng = self.ng(a);
        self.push(Tensor::new(shape, data), Op::Softmax { a }, ng)
    }

    /// Layer normalization over the last axis with affine `g`, `b`.
    pub fn layer_norm(&mut self, x: Var, g: Var, b: Var, eps: f64) -> Var {
        let t = self.value(x);
        let c = *t.shape().last().expect("layer_norm rank");
        let gd = self.value(g).data();
        let bd = self.value(b).data();
        assert_eq!(gd.len(), c, "layer_norm gain");
        assert_eq!(bd.len(), c, "layer_norm bias");
        let rows = t.numel() / c.max(1);
        let mut out = vec![T::zero(); t.numel()];
        let mut mean = Vec::with_capacity(rows);
        let mut rstd = Vec::with_capacity(rows);
        let inv_c = T::one() / T::of(c as f64);
        for (src, dst) in t.data().chunks(c).zip(out.chunks_mut(c)) {
            let mu = src.iter().copied().sum::<T>() * inv_c;
            let var = src.iter().map(|v| (*v - mu) * (*v - mu)).sum::<T>() * inv_c;
            let r = T::one() / (var + T::of(eps)).sqrt();
            for i in 0..c {
                dst[i] = (src[i] - mu) * r * gd[i] + bd[i];
            }
            mean.push(mu);
            rstd.push(r);
        }
        let shape = t.shape().to_vec();
        let ng = self.ng(x) || self.ng(g) || self.ng(b);
        self.push(Tensor::new(shape, out), Op::LayerNorm { x, g, b, mean, rstd }, ng)
    }

    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Var {
        let t = self.value(a);
        let (shape, data) = permute_data(t.shape(), t.data(), perm);
        let ng = self.ng(a);
        self.push(Tensor::new(shape, data), Op::Permute { a, perm: perm.to_vec() }, ng)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let t = self.value(a).clone().reshape(shape.to_vec());
        let ng = self.ng(a);
        self.push(t, Op::Reshape { a }, ng)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        let first = self.shape(parts[0]).to_vec();
        let (outer, inner) = outer_inner(&first, axis);
        let mut total_axis = 0;
        for p in parts {
            let s = self.shape(*p);
            assert_eq!(s.len(), first.len(), "concat rank");
            for (i, (x, y)) in s.iter().zip(&first).enumerate() {
                assert!(i == axis || x == y, "concat: {s:?} vs {first:?} on axis {axis}");
            }
            total_axis += s[axis];
        }
        let mut data = Vec::with_capacity(outer * total_axis * inner);
        for o in 0..outer {
            for p in parts {
                let len = self.shape(*p)[axis] * inner;
                data.extend_from_slice(&self.value(*p).data()[o * len..(o + 1) * len]);
            }
        }
        let mut shape = first;
        shape[axis] = total_axis;
        let ng = parts.iter().any(|p| self.ng(*p));
        self.push(Tensor::new(shape, data), Op::Concat { parts: parts.to_vec(), axis }, ng)
    }

    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Var {
        let s = self.shape(a).to_vec();
        assert!(start + len <= s[axis], "narrow {start}+{len} beyond {s:?} axis {axis}");
        let (outer, inner) = outer_inner(&s, axis);
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * s[axis] + start) * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        let ng = self.ng(a);
        self.push(Tensor::new(shape, data), Op::Narrow { a, axis, start }, ng)
    }

    /// Repeats `a` `n` times along a new leading axis.
    pub fn expand_leading(&mut self, a: Var, n: usize) -> Var {
        let t = self.value(a);
        let mut data = Vec::with_capacity(n * t.numel());
        for _ in 0..n {
            data.extend_from_slice(t.data());
        }
        let mut shape = vec![n];
        shape.extend_from_slice(t.shape());
        let ng = self.ng(a);
        self.push(Tensor::new(shape, data), Op::ExpandLeading { a, n }, ng)
    }

    /// Stride-1 2D convolution with zero padding `k / 2` (odd `k`), NCHW layout.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        assert_eq!(xs.len(), 4, "conv2d input must be NCHW");
        assert_eq!(ws.len(), 4, "conv2d weight must be OIKK");
        let (n, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (o, k) = (ws[0], ws[2]);
        assert_eq!(ws[1], c, "conv2d channels: input {xs:?} weight {ws:?}");
        assert_eq!(ws[3], k, "square kernels only");
        assert_eq!(k % 2, 1, "odd kernels only");
        let hw = h * wd;
        let ck = c * k * k;
        let mut out = vec![T::zero(); n * o * hw];
        let xd = self.value(x).data();
        let wdata = self.value(w).data();
        let bias = b.map(|b| self.value(b).data());
        let mut cols = if k == 1 { Vec::new() } else { vec![T::zero(); ck * hw] };
        for img in 0..n {
            let xin = &xd[img * c * hw..(img + 1) * c * hw];
            let dst = &mut out[img * o * hw..(img + 1) * o * hw];
            if let Some(bias) = bias {
                for (ch, plane) in dst.chunks_mut(hw).enumerate() {
                    plane.fill(bias[ch]);
                }
            }
            let src: &[T] = if k == 1 {
                xin
            } else {
                im2col(xin, c, h, wd, k, &mut cols);
                &cols
            };
            let beta = if bias.is_some() { T::one() } else { T::zero() };
            gemm(o, ck, hw, T::one(), wdata, View::rm(ck), src, View::rm(hw), beta, dst, View::rm(hw));
        }
        let ng = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        self.push(Tensor::new(vec![n, o, h, wd], out), Op::Conv2d { x, w, b, k }, ng)
    }

    /// Non-overlapping `k x k` average pooling over the last two axes of NCHW.
    pub fn avg_pool(&mut self, a: Var, k: usize) -> Var {
        let s = self.shape(a).to_vec();
        assert_eq!(s.len(), 4, "avg_pool input must be NCHW");
        let (h, w) = (s[2], s[3]);
        assert!(h % k == 0 && w % k == 0, "avg_pool: {h}x{w} not divisible by {k}");
        let (ho, wo) = (h / k, w / k);
        let planes = s[0] * s[1];
        let src = self.value(a).data();
        let mut out = vec![T::zero(); planes * ho * wo];
        let inv = T::one() / T::of((k * k) as f64);
        for p in 0..planes {
            let plane = &src[p * h * w..(p + 1) * h * w];
            let dst = &mut out[p * ho * wo..(p + 1) * ho * wo];
            for y in 0..h {
                for x in 0..w {
                    dst[(y / k) * wo + x / k] += plane[y * w + x];
                }
            }
            for v in dst.iter_mut() {
                *v *= inv;
            }
        }
        let ng = self.ng(a);
        self.push(Tensor::new(vec![s[0], s[1], ho, wo], out), Op::AvgPool { a, k }, ng)
    }

    /// Nearest-neighbour upsampling by an integer factor over the last two axes of NCHW.
    pub fn upsample(&mut self, a: Var, f: usize) -> Var {
        let s = self.shape(a).to_vec();
        assert_eq!(s.len(), 4, "upsample input must be NCHW");
        let (h, w) = (s[2], s[3]);
        let (ho, wo) = (h * f, w * f);
        let planes = s[0] * s[1];
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(planes * ho * wo);
        for p in 0..planes {
            let plane = &src[p * h * w..(p + 1) * h * w];
            for y in 0..ho {
                let row = &plane[(y / f) * w..(y / f + 1) * w];
                for x in 0..wo {
                    out.push(row[x / f]);
                }
            }
        }
        let ng = self.ng(a);
        self.push(Tensor::new(vec![s[0], s[1], ho, wo], out), Op::Upsample { a, f }, ng)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().copied().sum::<T>();
        let ng = self.ng(a);
        self.push(Tensor::scalar(s), Op::SumAll { a }, ng)
    }

    /// Mean binary cross-entropy of logits `z` against a `{0,1}` target,
    /// evaluated in the stable form `max(z,0) - z*y + ln(1 + e^-|z|)`.
    pub fn bce_with_logits(&mut self, z: Var, target: &[T]) -> Var {
        let zd = self.value(z).data();
        assert_eq!(zd.len(), target.len(), "bce: logits/target length");
        let mut acc = 0.0f64;
        for (zv, yv) in zd.iter().zip(target) {
            let zf = zv.as_f64();
            let yf = yv.as_f64();
            acc += zf.max(0.0) - zf * yf + (-zf.abs()).exp().ln_1p();
        }
        let loss = T::of(acc / zd.len().max(1) as f64);
        let ng = self.ng(z);
        self.push(Tensor::scalar(loss), Op::Bce { z, target: target.to_vec() }, ng)
    }

    /// Soft Dice loss `1 - (2Σpy + s)/(Σp + Σy + s)` with `p = σ(z)`, computed
    /// per contiguous group (one group per clip) and averaged over groups.
    pub fn soft_dice(&mut self, z: Var, target: &[T], groups: usize, smooth: T) -> Var {
        let zd = self.value(z).data();
        assert_eq!(zd.len(), target.len(), "dice: logits/target length");
        assert!(groups > 0 && zd.len().is_multiple_of(groups), "dice: {groups} groups over {}", zd.len());
        let per = zd.len() / groups;
        let mut total = T::zero();
        for g in 0..groups {
            let (mut inter, mut ps, mut ys) = (T::zero(), T::zero(), T::zero());
            for i in g * per..(g + 1) * per {
                let p = kernels::sigmoid(zd[i]);
                inter += p * target[i];
                ps += p;
                ys += target[i];
            }
            total += T::one() - (T::of(2.0) * inter + smooth) / (ps + ys + smooth);
        }
        let loss = total / T::of(groups as f64);
        let ng = self.ng(z);
        self.push(
            Tensor::scalar(loss),
            Op::SoftDice { z, target: target.to_vec(), groups, smooth },
            ng,
        )
    }

    /// Reverse-mode sweep from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Grads<T> {
        assert_eq!(self.value(loss).numel(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(dy) = grads[i].take() else { continue };
            self.backward_node(node, &dy, &mut grads);
        }
        Grads { grads }
    }

    fn grad_buf<'g>(&self, grads: &'g mut [Option<Vec<T>>], v: Var) -> Option<&'g mut Vec<T>> {
        if !self.ng(v) {
            return None;
        }
        let n = self.nodes[v.0].value.numel();
        Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); n]))
    }

    fn backward_node(&self, node: &Node<T>, dy: &[T], grads: &mut [Option<Vec<T>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Linear { x, w, b } => {
                let ws = self.shape(*w);
                let (din, dout) = (ws[0], ws[1]);
                let rows = dy.len() / dout.max(1);
                let wd = self.value(*w).data();
                let xd = self.value(*x).data();
                if let Some(dx) = self.grad_buf(grads, *x) {
                    gemm(rows, dout, din, T::one(), dy, View::rm(dout), wd, View::tr(dout), T::one(), dx, View::rm(din));
                }
                if let Some(dw) = self.grad_buf(grads, *w) {
                    gemm(din, rows, dout, T::one(), xd, View::tr(din), dy, View::rm(dout), T::one(), dw, View::rm(dout));
                }
                if let Some(b) = b {
                    if let Some(db) = self.grad_buf(grads, *b) {
                        for row in dy.chunks(dout) {
                            add_into(db, row);
                        }
                    }
                }
            }
            &Op::MatMul { a, b, ta, tb, batch, b_batched, m, k, n } => {
                let ad = self.value(a).data();
                let bd = self.value(b).data();
                if let Some(da) = self.grad_buf(grads, a) {
                    // d op(A) = dC · op(B)^T
                    let btv = if tb { View::rm(k) } else { View::tr(n) };
                    let dav = if ta { View::tr(m) } else { View::rm(k) };
                    for i in 0..batch {
                        let bo = if b_batched { i * k * n } else { 0 };
                        gemm(
                            m,
                            n,
                            k,
                            T::one(),
                            &dy[i * m * n..(i + 1) * m * n],
                            View::rm(n),
                            &bd[bo..bo + k * n],
                            btv,
                            T::one(),
                            &mut da[i * m * k..(i + 1) * m * k],
                            dav,
                        );
                    }
                }
                if let Some(db) = self.grad_buf(grads, b) {
                    // d op(B) = op(A)^T · dC
                    let atv = if ta { View::rm(m) } else { View::tr(k) };
                    let dbv = if tb { View::tr(k) } else { View::rm(n) };
                    for i in 0..batch {
                        let bo = if b_batched { i * k * n } else { 0 };
                        gemm(
                            k,
                            m,
                            n,
                            T::one(),
                            &ad[i * m * k..(i + 1) * m * k],
                            atv,
                            &dy[i * m * n..(i + 1) * m * n],
                            View::rm(n),
                            T::one(),
                            &mut db[bo..bo + k * n],
                            dbv,
                        );
                    }
                }
            }
            Op::Add { a, b } => {
                if let Some(da) = self.grad_buf(grads, *a) {
                    add_into(da, dy);
                }
                if let Some(db) = self.grad_buf(grads, *b) {
                    add_into(db, dy);
                }
            }
            Op::AddSuffix { a, b } => {
                if let Some(da) = self.grad_buf(grads, *a) {
                    add_into(da, dy);
                }
                if let Some(db) = self.grad_buf(grads, *b) {
                    let nb = db.len();
                    for row in dy.chunks(nb) {
                        add_into(db, row);
                    }
                }
            }
            Op::Scale { a, s } => {
                if let Some(da) = self.grad_buf(grads, *a) {
                    for (d, g) in da.iter_mut().zip(dy) {
                        *d += *g * *s;
                    }
                }
            }
            Op::Gelu { a } => {
                let xd = self.value(*a).data();
                if let Some(da) = self.grad_buf(grads, *a) {
                    for ((d, g), x) in da.iter_mut().zip(dy).zip(xd) {
                        *d += *g * kernels::gelu_grad(*x);
                    }
                }
            }
            Op::Softmax { a } => {
                let y = node.value.data();
                let n = *node.value.shape().last().unwrap();
                if let Some(da) = self.grad_buf(grads, *a) {
                    for ((drow, grow), yrow) in da.chunks_mut(n).zip(dy.chunks(n)).zip(y.chunks(n)) {
                        let dot: T = grow.iter().zip(yrow).map(|(g, y)| *g * *y).sum();
                        for j in 0..n {
                            drow[j] += yrow[j] * (grow[j] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm { x, g, b, mean, rstd } => {
                let xd = self.value(*x).data();
                let gd = self.value(*g).data();
                let c = gd.len();
                let inv_c = T::one() / T::of(c as f64);
                if self.ng(*g) || self.ng(*b) {
                    let mut dg = vec![T::zero(); c];
                    let mut dbeta = vec![T::zero(); c];
                    for (r, (xrow, grow)) in xd.chunks(c).zip(dy.chunks(c)).enumerate() {
                        for j in 0..c {
                            let xhat = (xrow[j] - mean[r]) * rstd[r];
                            dg[j] += grow[j] * xhat;
                            dbeta[j] += grow[j];
                        }
                    }
                    if let Some(buf) = self.grad_buf(grads, *g) {
                        add_into(buf, &dg);
                    }
                    if let Some(buf) = self.grad_buf(grads, *b) {
                        add_into(buf, &dbeta);
                    }
                }
                if let Some(dx) = self.grad_buf(grads, *x) {
                    let mut dxhat = vec![T::zero(); c];
                    for (r, ((xrow, grow), drow)) in
                        xd.chunks(c).zip(dy.chunks(c)).zip(dx.chunks_mut(c)).enumerate()
                    {
                        let mut m1 = T::zero();
                        let mut m2 = T::zero();
                        for j in 0..c {
                            dxhat[j] = grow[j] * gd[j];
                            let xhat = (xrow[j] - mean[r]) * rstd[r];
                            m1 += dxhat[j];
                            m2 += dxhat[j] * xhat;
                        }
                        m1 *= inv_c;
                        m2 *= inv_c;
                        for j in 0..c {
                            let xhat = (xrow[j] - mean[r]) * rstd[r];
                            drow[j] += rstd[r] * (dxhat[j] - m1 - xhat * m2);
                        }
                    }
                }
            }
            Op::Permute { a, perm } => {
                if let Some(da) = self.grad_buf(grads, *a) {
                    let (_, back) = permute_data(node.value.shape(), dy, &inverse_perm(perm));
                    add_into(da, &back);
                }
            }
            Op::Reshape { a } => {
                if let Some(da) = self.grad_buf(grads, *a) {
                    add_into(da, dy);
                }
            }
            Op::Concat { parts, axis } => {
                let (outer, inner) = outer_inner(node.value.shape(), *axis);
                let total = node.value.shape()[*axis] * inner;
                let mut offset = 0;
                for p in parts {
                    let len = self.shape(*p)[*axis] * inner;
                    if let Some(dp) = self.grad_buf(grads, *p) {
                        for o in 0..outer {
                            add_into(&mut dp[o * len..(o + 1) * len], &dy[o * total + offset..o * total + offset + len]);
                        }
                    }
                    offset += len;
                }
            }
            Op::Narrow { a, axis, start } => {
                let full = self.shape(*a)[*axis];
                let (outer, inner) = outer_inner(self.shape(*a), *axis);
                let len = node.value.shape()[*axis];
                if let Some(da) = self.grad_buf(grads, *a) {
                    for o in 0..outer {
                        let base = (o * full + start) * inner;
                        add_into(&mut da[base..base + len * inner], &dy[o * len * inner..(o + 1) * len * inner]);
                    }
                }
            }
            Op::ExpandLeading { a, n } => {
                if let Some(da) = self.grad_buf(grads, *a) {
                    let len = da.len();
                    for i in 0..*n {
                        add_into(da, &dy[i * len..(i + 1) * len]);
                    }
                }
            }
            Op::Conv2d { x, w, b, k } => {
                let xs = self.shape(*x);
                let (n, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
                let o = self.shape(*w)[0];
                let k = *k;
                let hw = h * wd;
                let ck = c * k * k;
                let xd = self.value(*x).data();
                let wdata = self.value(*w).data();
                if let Some(b) = b {
                    if let Some(db) = self.grad_buf(grads, *b) {
                        for img in 0..n {
                            for ch in 0..o {
                                let plane = &dy[(img * o + ch) * hw..(img * o + ch + 1) * hw];
                                db[ch] += plane.iter().copied().sum::<T>();
                            }
                        }
                    }
                }
                let need_w = self.ng(*w);
                let need_x = self.ng(*x);
                let mut cols = vec![T::zero(); if k == 1 { 0 } else { ck * hw }];
                let mut dcols = vec![T::zero(); if need_x && k != 1 { ck * hw } else { 0 }];
                if need_w {
                    let dw = grads[w.0].get_or_insert_with(|| vec![T::zero(); o * ck]);
                    for img in 0..n {
                        let xin = &xd[img * c * hw..(img + 1) * c * hw];
                        let src: &[T] = if k == 1 {
                            xin
                        } else {
                            im2col(xin, c, h, wd, k, &mut cols);
                            &cols
                        };
                        let g = &dy[img * o * hw..(img + 1) * o * hw];
                        gemm(o, hw, ck, T::one(), g, View::rm(hw), src, View::tr(hw), T::one(), dw, View::rm(ck));
                    }
                }
                if need_x {
                    let dx = grads[x.0].get_or_insert_with(|| vec![T::zero(); n * c * hw]);
                    for img in 0..n {
                        let g = &dy[img * o * hw..(img + 1) * o * hw];
                        let dxi = &mut dx[img * c * hw..(img + 1) * c * hw];
                        if k == 1 {
                            gemm(ck, o, hw, T::one(), wdata, View::tr(ck), g, View::rm(hw), T::one(), dxi, View::rm(hw));
                        } else {
                            gemm(ck, o, hw, T::one(), wdata, View::tr(ck), g, View::rm(hw), T::zero(), &mut dcols, View::rm(hw));
                            col2im_add(&dcols, c, h, wd, k, dxi);
                        }
                    }
                }
            }
            Op::AvgPool { a, k } => {
                let s = self.shape(*a);
                let (h, w) = (s[2], s[3]);
                let (ho, wo) = (h / k, w / k);
                let planes = s[0] * s[1];
                let inv = T::one() / T::of((k * k) as f64);
                if let Some(da) = self.grad_buf(grads, *a) {
                    for p in 0..planes {
                        let g = &dy[p * ho * wo..(p + 1) * ho * wo];
                        let dst = &mut da[p * h * w..(p + 1) * h * w];
                        for y in 0..h {
                            for x in 0..w {
                                dst[y * w + x] += g[(y / k) * wo + x / k] * inv;
                            }
                        }
                    }
                }
            }
            Op::Upsample { a, f } => {
                let s = self.shape(*a);
                let (h, w) = (s[2], s[3]);
                let (ho, wo) = (h * f, w * f);
                let planes = s[0] * s[1];
                if let Some(da) = self.grad_buf(grads, *a) {
                    for p in 0..planes {
                        let g = &dy[p * ho * wo..(p + 1) * ho * wo];
                        let dst = &mut da[p * h * w..(p + 1) * h * w];
                        for y in 0..ho {
                            for x in 0..wo {
                                dst[(y / f) * w + x / f] += g[y * wo + x];
                            }
                        }
                    }
                }
            }
            Op::SumAll { a } => {
                if let Some(da) = self.grad_buf(grads, *a) {
                    for d in da.iter_mut() {
                        *d += dy[0];
                    }
                }
            }
            Op::Bce { z, target } => {
                let zd = self.value(*z).data();
                let scale = dy[0] / T::of(zd.len().max(1) as f64);
                if let Some(dz) = self.grad_buf(grads, *z) {
                    for ((d, zv), yv) in dz.iter_mut().zip(zd).zip(target) {
                        *d += (kernels::sigmoid(*zv) - *yv) * scale;
                    }
                }
            }
            Op::SoftDice { z, target, groups, smooth } => {
                let zd = self.value(*z).data();
                let per = zd.len() / groups;
                let gscale = dy[0] / T::of(*groups as f64);
                if let Some(dz) = self.grad_buf(grads, *z) {
                    for g in 0..*groups {
                        let range = g * per..(g + 1) * per;
                        let (mut inter, mut ps, mut ys) = (T::zero(), T::zero(), T::zero());
                        for i in range.clone() {
                            let p = kernels::sigmoid(zd[i]);
                            inter += p * target[i];
                            ps += p;
                            ys += target[i];
                        }
                        let den = ps + ys + *smooth;
                        let num = T::of(2.0) * inter + *smooth;
                        for i in range {
                            let p = kernels::sigmoid(zd[i]);
                            let dl_dp = -(T::of(2.0) * target[i] / den - num / (den * den));
                            dz[i] += gscale * dl_dp * p * (T::one() - p);
                        }
                    }
                }
            }
        }
    }
}
