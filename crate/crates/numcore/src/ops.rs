//! Forward and backward kernels for every [`Op`].

use crate::error::{NumError, Result};
use crate::graph::Op;
use crate::tensor::{Element, Tensor};

fn mismatch(node: usize, op: &Op, detail: impl Into<String>) -> NumError {
    NumError::DimMismatch {
        node,
        op: op.name(),
        detail: detail.into(),
    }
}

fn broadcasts(a: &[usize], b: &[usize]) -> bool {
    b.len() <= a.len() && a[a.len() - b.len()..] == *b
}

/// Split `dims` around `axis` into (outer, mid, inner) extents.
fn split_at_axis(dims: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = dims[..axis].iter().product();
    let inner = dims[axis + 1..].iter().product();
    (outer, dims[axis], inner)
}

/// For each output position of a permutation, the flat input position.
fn permute_map(dims: &[usize], axes: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let rank = dims.len();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * dims[i + 1];
    }
    let out_dims: Vec<usize> = axes.iter().map(|&a| dims[a]).collect();
    let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let total: usize = dims.iter().product();
    let mut map = Vec::with_capacity(total);
    let mut counter = vec![0usize; rank];
    let mut offset = 0usize;
    for _ in 0..total {
        map.push(offset);
        for ax in (0..rank).rev() {
            counter[ax] += 1;
            offset += strides[ax];
            if counter[ax] < out_dims[ax] {
                break;
            }
            offset -= strides[ax] * out_dims[ax];
            counter[ax] = 0;
        }
    }
    (out_dims, map)
}

fn same_pad(size: usize, kernel: usize, stride: usize) -> (usize, usize) {
    let out = size.div_ceil(stride);
    let total = ((out - 1) * stride + kernel).saturating_sub(size);
    (out, total / 2)
}

fn log_sum_exp<E: Element>(vals: &[E]) -> E {
    let m = vals.iter().copied().fold(E::neg_infinity(), E::max);
    if m == E::neg_infinity() {
        return m;
    }
    m + vals.iter().map(|&v| (v - m).exp()).sum::<E>().ln()
}

fn lse2<E: Element>(a: E, b: E) -> E {
    if a == E::neg_infinity() {
        return b;
    }
    if b == E::neg_infinity() {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Frames a CTC target needs: one per label plus a blank between repeats.
pub fn ctc_required_frames(target: &[usize]) -> usize {
    target.len() + target.windows(2).filter(|w| w[0] == w[1]).count()
}

struct CtcLattice<E> {
    alpha: Vec<E>,
    beta: Vec<E>,
    ext: Vec<usize>,
    log_p: E,
}

fn ctc_lattice<E: Element>(lp: &[E], frames: usize, classes: usize, target: &[usize], blank: usize) -> CtcLattice<E> {
    let mut ext = Vec::with_capacity(2 * target.len() + 1);
    ext.push(blank);
    for &t in target {
        ext.push(t);
        ext.push(blank);
    }
    let s_len = ext.len();
    let ninf = E::neg_infinity();
    let at = |t: usize, k: usize| lp[t * classes + k];
    let skip_ok = |s: usize| s >= 2 && ext[s] != blank && ext[s] != ext[s - 2];

    let mut alpha = vec![ninf; frames * s_len];
    alpha[0] = at(0, ext[0]);
    if s_len > 1 {
        alpha[1] = at(0, ext[1]);
    }
    for t in 1..frames {
        for s in 0..s_len {
            let prev = &alpha[(t - 1) * s_len..t * s_len];
            let mut acc = prev[s];
            if s >= 1 {
                acc = lse2(acc, prev[s - 1]);
            }
            if skip_ok(s) {
                acc = lse2(acc, prev[s - 2]);
            }
            alpha[t * s_len + s] = if acc == ninf { ninf } else { acc + at(t, ext[s]) };
        }
    }

    let mut beta = vec![ninf; frames * s_len];
    let last = frames - 1;
    beta[last * s_len + s_len - 1] = at(last, ext[s_len - 1]);
    if s_len > 1 {
        beta[last * s_len + s_len - 2] = at(last, ext[s_len - 2]);
    }
    for t in (0..last).rev() {
        for s in 0..s_len {
            let next = &beta[(t + 1) * s_len..(t + 2) * s_len];
            let mut acc = next[s];
            if s + 1 < s_len {
                acc = lse2(acc, next[s + 1]);
            }
            if s + 2 < s_len && skip_ok(s + 2) {
                acc = lse2(acc, next[s + 2]);
            }
            beta[t * s_len + s] = if acc == ninf { ninf } else { acc + at(t, ext[s]) };
        }
    }

    let tail = &alpha[last * s_len..];
    let log_p = if s_len > 1 {
        lse2(tail[s_len - 1], tail[s_len - 2])
    } else {
        tail[0]
    };
    CtcLattice {
        alpha,
        beta,
        ext,
        log_p,
    }
}

pub(crate) fn forward<E: Element>(node: usize, op: &Op, xs: &[&Tensor<E>]) -> Result<Tensor<E>> {
    let fail = |detail: String| mismatch(node, op, detail);
    match op {
        Op::Leaf(_) | Op::Const(_) => unreachable!("leaves are bound, not computed"),
        Op::Add | Op::Mul => {
            let (a, b) = (xs[0], xs[1]);
            if !broadcasts(a.dims(), b.dims()) {
                return Err(fail(format!("{:?} vs {:?}", a.dims(), b.dims())));
            }
            let inner = b.len();
            let bd = b.data();
            let data = a
                .data()
                .iter()
                .enumerate()
                .map(|(i, &v)| {
                    if matches!(op, Op::Add) {
                        v + bd[i % inner]
                    } else {
                        v * bd[i % inner]
                    }
                })
                .collect();
            Ok(Tensor::from_parts(a.dims().to_vec(), data))
        }
        Op::Sub => {
            let (a, b) = (xs[0], xs[1]);
            if a.dims() != b.dims() {
                return Err(fail(format!("{:?} vs {:?}", a.dims(), b.dims())));
            }
            let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x - y).collect();
            Ok(Tensor::from_parts(a.dims().to_vec(), data))
        }
        Op::Scale(f) => {
            let f = E::from_f64_lossy(*f);
            Ok(xs[0].map(|v| v * f))
        }
        Op::MatMul => {
            let (a, b) = (xs[0], xs[1]);
            if a.rank() != 2 || b.rank() != 2 || a.dims()[1] != b.dims()[0] {
                return Err(fail(format!("{:?} x {:?}", a.dims(), b.dims())));
            }
            let (m, k, n) = (a.dims()[0], a.dims()[1], b.dims()[1]);
            Ok(Tensor::from_parts(vec![m, n], matmul(a.data(), b.data(), m, k, n)))
        }
        Op::Permute(axes) => {
            let a = xs[0];
            let mut seen = vec![false; a.rank()];
            if axes.len() != a.rank() || axes.iter().any(|&x| x >= a.rank() || std::mem::replace(&mut seen[x], true)) {
                return Err(fail(format!("axes {axes:?} for dims {:?}", a.dims())));
            }
            let (out_dims, map) = permute_map(a.dims(), axes);
            let d = a.data();
            Ok(Tensor::from_parts(out_dims, map.iter().map(|&i| d[i]).collect()))
        }
        Op::Reshape(dims) => {
            let a = xs[0];
            if dims.iter().any(|&d| d == 0) || dims.iter().product::<usize>() != a.len() {
                return Err(fail(format!("{:?} -> {dims:?}", a.dims())));
            }
            Ok(Tensor::from_parts(dims.clone(), a.data().to_vec()))
        }
        Op::Slice { axis, start, len } => {
            let a = xs[0];
            if *axis >= a.rank() || *len == 0 || start + len > a.dims()[*axis] {
                return Err(fail(format!("slice axis {axis} [{start}, +{len}) of {:?}", a.dims())));
            }
            let (outer, mid, inner) = split_at_axis(a.dims(), *axis);
            let d = a.data();
            let mut data = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                let base = (o * mid + start) * inner;
                data.extend_from_slice(&d[base..base + len * inner]);
            }
            let mut dims = a.dims().to_vec();
            dims[*axis] = *len;
            Ok(Tensor::from_parts(dims, data))
        }
        Op::Concat { axis } => {
            let first = xs.first().ok_or_else(|| fail("no inputs".into()))?;
            if *axis >= first.rank() {
                return Err(fail(format!("axis {axis} for rank {}", first.rank())));
            }
            let mut total = 0;
            for x in xs {
                let same = x.rank() == first.rank()
                    && x.dims().iter().zip(first.dims()).enumerate().all(|(i, (a, b))| i == *axis || a == b);
                if !same {
                    return Err(fail(format!("{:?} vs {:?}", x.dims(), first.dims())));
                }
                total += x.dims()[*axis];
            }
            let (outer, _, inner) = split_at_axis(first.dims(), *axis);
            let mut data = Vec::with_capacity(outer * total * inner);
            for o in 0..outer {
                for x in xs {
                    let chunk = x.dims()[*axis] * inner;
                    data.extend_from_slice(&x.data()[o * chunk..(o + 1) * chunk]);
                }
            }
            let mut dims = first.dims().to_vec();
            dims[*axis] = total;
            Ok(Tensor::from_parts(dims, data))
        }
        Op::Conv2d { stride } => {
            let (x, k, b) = (xs[0], xs[1], xs[2]);
            if x.rank() != 3 || k.rank() != 4 || k.dims()[1] != x.dims()[0] || b.dims() != [k.dims()[0]] || *stride == 0 {
                return Err(fail(format!("x {:?} k {:?} b {:?}", x.dims(), k.dims(), b.dims())));
            }
            let g = ConvGeom::same(x.dims(), k.dims(), *stride);
            let mut out = vec![E::zero(); g.co * g.oh * g.ow];
            let (xd, kd, bd) = (x.data(), k.data(), b.data());
            for o in 0..g.co {
                for i in 0..g.oh {
                    for j in 0..g.ow {
                        let mut acc = bd[o];
                        g.for_taps(i, j, |c, p, q, xi| {
                            acc = acc + kd[g.kidx(o, c, p, q)] * xd[xi];
                        });
                        out[(o * g.oh + i) * g.ow + j] = acc;
                    }
                }
            }
            Ok(Tensor::from_parts(vec![g.co, g.oh, g.ow], out))
        }
        Op::ConvTranspose2d { stride } => {
            let (x, k, b) = (xs[0], xs[1], xs[2]);
            if x.rank() != 3 || k.rank() != 4 || k.dims()[0] != x.dims()[0] || b.dims() != [k.dims()[1]] || *stride == 0 {
                return Err(fail(format!("x {:?} k {:?} b {:?}", x.dims(), k.dims(), b.dims())));
            }
            let g = TConvGeom::new(x.dims(), k.dims(), *stride);
            let mut out = vec![E::zero(); g.co * g.oh * g.ow];
            let (xd, kd, bd) = (x.data(), k.data(), b.data());
            for o in 0..g.co {
                out[o * g.oh * g.ow..(o + 1) * g.oh * g.ow].fill(bd[o]);
            }
            for c in 0..g.ci {
                for i in 0..g.h {
                    for j in 0..g.w {
                        let xv = xd[(c * g.h + i) * g.w + j];
                        for o in 0..g.co {
                            for p in 0..g.kh {
                                for q in 0..g.kw {
                                    let yi = (o * g.oh + i * g.s + p) * g.ow + j * g.s + q;
                                    out[yi] = out[yi] + xv * kd[((c * g.co + o) * g.kh + p) * g.kw + q];
                                }
                            }
                        }
                    }
                }
            }
            Ok(Tensor::from_parts(vec![g.co, g.oh, g.ow], out))
        }
        Op::LayerNorm { eps } => {
            let (x, gamma, beta) = (xs[0], xs[1], xs[2]);
            let d = *x.dims().last().unwrap_or(&0);
            if gamma.dims() != [d] || beta.dims() != [d] {
                return Err(fail(format!("x {:?} gamma {:?} beta {:?}", x.dims(), gamma.dims(), beta.dims())));
            }
            let eps = E::from_f64_lossy(*eps);
            let mut out = Vec::with_capacity(x.len());
            for row in x.data().chunks(d) {
                let (_, _, xhat) = normalize_row(row, eps);
                out.extend(xhat.iter().zip(gamma.data()).zip(beta.data()).map(|((&h, &g), &b)| h * g + b));
            }
            Ok(Tensor::from_parts(x.dims().to_vec(), out))
        }
        Op::Softmax | Op::LogSoftmax => {
            let x = xs[0];
            let d = *x.dims().last().unwrap_or(&0);
            let mut out = Vec::with_capacity(x.len());
            for row in x.data().chunks(d) {
                if matches!(op, Op::Softmax) {
                    let m = row.iter().copied().fold(E::neg_infinity(), E::max);
                    let start = out.len();
                    out.extend(row.iter().map(|&v| (v - m).exp()));
                    let total = out[start..].iter().copied().sum::<E>();
                    out[start..].iter_mut().for_each(|v| *v = *v / total);
                } else {
                    let lse = log_sum_exp(row);
                    out.extend(row.iter().map(|&v| v - lse));
                }
            }
            Ok(Tensor::from_parts(x.dims().to_vec(), out))
        }
        Op::Relu => Ok(xs[0].map(|v| if v > E::zero() { v } else { E::zero() })),
        Op::Embedding { ids } => {
            let table = xs[0];
            if table.rank() != 2 || ids.is_empty() {
                return Err(fail(format!("table {:?}, {} ids", table.dims(), ids.len())));
            }
            let (vocab, d) = (table.dims()[0], table.dims()[1]);
            let mut data = Vec::with_capacity(ids.len() * d);
            for &id in ids {
                if id >= vocab {
                    return Err(NumError::IndexOutOfRange { index: id, size: vocab });
                }
                data.extend_from_slice(table.row(id));
            }
            Ok(Tensor::from_parts(vec![ids.len(), d], data))
        }
        Op::Sum => Ok(Tensor::scalar(xs[0].data().iter().copied().sum())),
        Op::Mean => {
            let n = E::from_usize(xs[0].len()).unwrap_or_else(E::one);
            Ok(Tensor::scalar(xs[0].data().iter().copied().sum::<E>() / n))
        }
        Op::SqErr => {
            let (a, b) = (xs[0], xs[1]);
            if a.dims() != b.dims() {
                return Err(fail(format!("{:?} vs {:?}", a.dims(), b.dims())));
            }
            Ok(Tensor::scalar(a.data().iter().zip(b.data()).map(|(&x, &y)| (x - y) * (x - y)).sum()))
        }
        Op::Ctc { target, blank } => {
            let lp = xs[0];
            if lp.rank() != 2 || *blank >= lp.dims()[1] || target.iter().any(|&t| t >= lp.dims()[1] || t == *blank) {
                return Err(fail(format!("log-probs {:?}, blank {blank}, target {target:?}", lp.dims())));
            }
            let (frames, classes) = (lp.dims()[0], lp.dims()[1]);
            let required = ctc_required_frames(target);
            if frames < required {
                return Err(NumError::Unalignable {
                    target_len: target.len(),
                    required,
                    frames,
                });
            }
            let lat = ctc_lattice(lp.data(), frames, classes, target, *blank);
            Ok(Tensor::scalar(-lat.log_p))
        }
    }
}

fn normalize_row<E: Element>(row: &[E], eps: E) -> (E, E, Vec<E>) {
    let n = E::from_usize(row.len()).unwrap_or_else(E::one);
    let mean = row.iter().copied().sum::<E>() / n;
    let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<E>() / n;
    let inv = E::one() / (var + eps).sqrt();
    let xhat = row.iter().map(|&v| (v - mean) * inv).collect();
    (mean, inv, xhat)
}

fn matmul<E: Element>(a: &[E], b: &[E], m: usize, k: usize, n: usize) -> Vec<E> {
    let mut c = vec![E::zero(); m * n];
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == E::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv = *cv + av * bv;
            }
        }
    }
    c
}

/// `a^T b` for `a: [m, k]`, `b: [m, n]`.
fn matmul_tn<E: Element>(a: &[E], b: &[E], m: usize, k: usize, n: usize) -> Vec<E> {
    let mut c = vec![E::zero(); k * n];
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == E::zero() {
                continue;
            }
            let crow = &mut c[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv = *cv + av * bv;
            }
        }
    }
    c
}

/// `a b^T` for `a: [m, n]`, `b: [k, n]`.
fn matmul_nt<E: Element>(a: &[E], b: &[E], m: usize, n: usize, k: usize) -> Vec<E> {
    let mut c = vec![E::zero(); m * k];
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            c[i * k + p] = arow.iter().zip(brow).map(|(&x, &y)| x * y).sum();
        }
    }
    c
}

struct ConvGeom {
    ci: usize,
    h: usize,
    w: usize,
    co: usize,
    kh: usize,
    kw: usize,
    s: usize,
    oh: usize,
    ow: usize,
    pt: usize,
    pl: usize,
}

impl ConvGeom {
    fn same(x: &[usize], k: &[usize], s: usize) -> Self {
        let (oh, pt) = same_pad(x[1], k[2], s);
        let (ow, pl) = same_pad(x[2], k[3], s);
        Self {
            ci: x[0],
            h: x[1],
            w: x[2],
            co: k[0],
            kh: k[2],
            kw: k[3],
            s,
            oh,
            ow,
            pt,
            pl,
        }
    }

    fn kidx(&self, o: usize, c: usize, p: usize, q: usize) -> usize {
        ((o * self.ci + c) * self.kh + p) * self.kw + q
    }

    /// Visits every in-bounds input tap feeding output `(i, j)`.
    fn for_taps(&self, i: usize, j: usize, mut f: impl FnMut(usize, usize, usize, usize)) {
        for p in 0..self.kh {
            let Some(ii) = (i * self.s + p).checked_sub(self.pt).filter(|&v| v < self.h) else {
                continue;
            };
            for q in 0..self.kw {
                let Some(jj) = (j * self.s + q).checked_sub(self.pl).filter(|&v| v < self.w) else {
                    continue;
                };
                for c in 0..self.ci {
                    f(c, p, q, (c * self.h + ii) * self.w + jj);
                }
            }
        }
    }
}

struct TConvGeom {
    ci: usize,
    h: usize,
    w: usize,
    co: usize,
    kh: usize,
    kw: usize,
    s: usize,
    oh: usize,
    ow: usize,
}

impl TConvGeom {
    fn new(x: &[usize], k: &[usize], s: usize) -> Self {
        Self {
            ci: x[0],
            h: x[1],
            w: x[2],
            co: k[1],
            kh: k[2],
            kw: k[3],
            s,
            oh: (x[1] - 1) * s + k[2],
            ow: (x[2] - 1) * s + k[3],
        }
    }
}

fn tile_sum<E: Element>(g: &[E], inner: usize) -> Vec<E> {
    let mut out = vec![E::zero(); inner];
    for (i, &v) in g.iter().enumerate() {
        out[i % inner] = out[i % inner] + v;
    }
    out
}

/// Gradients of the scalar objective w.r.t. each input, given the gradient
/// `g` w.r.t. this node's output. `None` for inputs that carry no gradient.
pub(crate) fn backward<E: Element>(op: &Op, xs: &[&Tensor<E>], y: &Tensor<E>, g: &[E]) -> Vec<Option<Vec<E>>> {
    match op {
        Op::Leaf(_) | Op::Const(_) => vec![],
        Op::Add => {
            let inner = xs[1].len();
            vec![Some(g.to_vec()), Some(tile_sum(g, inner))]
        }
        Op::Sub => vec![Some(g.to_vec()), Some(g.iter().map(|&v| -v).collect())],
        Op::Mul => {
            let (a, b) = (xs[0].data(), xs[1].data());
            let inner = b.len();
            let da = g.iter().enumerate().map(|(i, &v)| v * b[i % inner]).collect();
            let prod: Vec<E> = g.iter().zip(a).map(|(&v, &x)| v * x).collect();
            vec![Some(da), Some(tile_sum(&prod, inner))]
        }
        Op::Scale(f) => {
            let f = E::from_f64_lossy(*f);
            vec![Some(g.iter().map(|&v| v * f).collect())]
        }
        Op::MatMul => {
            let (a, b) = (xs[0], xs[1]);
            let (m, k, n) = (a.dims()[0], a.dims()[1], b.dims()[1]);
            let da = matmul_nt(g, b.data(), m, n, k);
            let db = matmul_tn(a.data(), g, m, k, n);
            vec![Some(da), Some(db)]
        }
        Op::Permute(axes) => {
            let (_, map) = permute_map(xs[0].dims(), axes);
            let mut dx = vec![E::zero(); g.len()];
            for (o, &i) in map.iter().enumerate() {
                dx[i] = g[o];
            }
            vec![Some(dx)]
        }
        Op::Reshape(_) => vec![Some(g.to_vec())],
        Op::Slice { axis, start, len } => {
            let x = xs[0];
            let (outer, mid, inner) = split_at_axis(x.dims(), *axis);
            let mut dx = vec![E::zero(); x.len()];
            for o in 0..outer {
                let base = (o * mid + start) * inner;
                dx[base..base + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
            }
            vec![Some(dx)]
        }
        Op::Concat { axis } => {
            let (outer, _, inner) = split_at_axis(xs[0].dims(), *axis);
            let total: usize = xs.iter().map(|x| x.dims()[*axis]).sum();
            let mut offset = 0;
            xs.iter()
                .map(|x| {
                    let chunk = x.dims()[*axis] * inner;
                    let mut dx = Vec::with_capacity(x.len());
                    for o in 0..outer {
                        let base = o * total * inner + offset;
                        dx.extend_from_slice(&g[base..base + chunk]);
                    }
                    offset += chunk;
                    Some(dx)
                })
                .collect()
        }
        Op::Conv2d { stride } => {
            let (x, k) = (xs[0], xs[1]);
            let geo = ConvGeom::same(x.dims(), k.dims(), *stride);
            let (xd, kd) = (x.data(), k.data());
            let mut dx = vec![E::zero(); x.len()];
            let mut dk = vec![E::zero(); k.len()];
            let mut db = vec![E::zero(); geo.co];
            for o in 0..geo.co {
                for i in 0..geo.oh {
                    for j in 0..geo.ow {
                        let gv = g[(o * geo.oh + i) * geo.ow + j];
                        if gv == E::zero() {
                            continue;
                        }
                        db[o] = db[o] + gv;
                        geo.for_taps(i, j, |c, p, q, xi| {
                            let ki = geo.kidx(o, c, p, q);
                            dx[xi] = dx[xi] + gv * kd[ki];
                            dk[ki] = dk[ki] + gv * xd[xi];
                        });
                    }
                }
            }
            vec![Some(dx), Some(dk), Some(db)]
        }
        Op::ConvTranspose2d { stride } => {
            let (x, k) = (xs[0], xs[1]);
            let geo = TConvGeom::new(x.dims(), k.dims(), *stride);
            let (xd, kd) = (x.data(), k.data());
            let mut dx = vec![E::zero(); x.len()];
            let mut dk = vec![E::zero(); k.len()];
            let plane = geo.oh * geo.ow;
            let db = (0..geo.co).map(|o| g[o * plane..(o + 1) * plane].iter().copied().sum()).collect();
            for c in 0..geo.ci {
                for i in 0..geo.h {
                    for j in 0..geo.w {
                        let xi = (c * geo.h + i) * geo.w + j;
                        let xv = xd[xi];
                        let mut acc = E::zero();
                        for o in 0..geo.co {
                            for p in 0..geo.kh {
                                for q in 0..geo.kw {
                                    let gv = g[(o * geo.oh + i * geo.s + p) * geo.ow + j * geo.s + q];
                                    let ki = ((c * geo.co + o) * geo.kh + p) * geo.kw + q;
                                    acc = acc + gv * kd[ki];
                                    dk[ki] = dk[ki] + gv * xv;
                                }
                            }
                        }
                        dx[xi] = acc;
                    }
                }
            }
            vec![Some(dx), Some(dk), Some(db)]
        }
        Op::LayerNorm { eps } => {
            let (x, gamma) = (xs[0], xs[1]);
            let d = gamma.len();
            let eps = E::from_f64_lossy(*eps);
            let n = E::from_usize(d).unwrap_or_else(E::one);
            let mut dx = Vec::with_capacity(x.len());
            let mut dgamma = vec![E::zero(); d];
            let mut dbeta = vec![E::zero(); d];
            for (row, grow) in x.data().chunks(d).zip(g.chunks(d)) {
                let (_, inv, xhat) = normalize_row(row, eps);
                let dxhat: Vec<E> = grow.iter().zip(gamma.data()).map(|(&a, &b)| a * b).collect();
                for i in 0..d {
                    dgamma[i] = dgamma[i] + grow[i] * xhat[i];
                    dbeta[i] = dbeta[i] + grow[i];
                }
                let mean_d = dxhat.iter().copied().sum::<E>() / n;
                let mean_dx = dxhat.iter().zip(&xhat).map(|(&a, &b)| a * b).sum::<E>() / n;
                dx.extend((0..d).map(|i| inv * (dxhat[i] - mean_d - xhat[i] * mean_dx)));
            }
            vec![Some(dx), Some(dgamma), Some(dbeta)]
        }
        Op::Softmax => {
            let d = *y.dims().last().unwrap_or(&1);
            let mut dx = Vec::with_capacity(y.len());
            for (yrow, grow) in y.data().chunks(d).zip(g.chunks(d)) {
                let dot: E = yrow.iter().zip(grow).map(|(&a, &b)| a * b).sum();
                dx.extend(yrow.iter().zip(grow).map(|(&yv, &gv)| yv * (gv - dot)));
            }
            vec![Some(dx)]
        }
        Op::LogSoftmax => {
            let d = *y.dims().last().unwrap_or(&1);
            let mut dx = Vec::with_capacity(y.len());
            for (yrow, grow) in y.data().chunks(d).zip(g.chunks(d)) {
                let total: E = grow.iter().copied().sum();
                dx.extend(yrow.iter().zip(grow).map(|(&yv, &gv)| gv - yv.exp() * total));
            }
            vec![Some(dx)]
        }
        Op::Relu => {
            let dx = xs[0].data().iter().zip(g).map(|(&x, &gv)| if x > E::zero() { gv } else { E::zero() }).collect();
            vec![Some(dx)]
        }
        Op::Embedding { ids } => {
            let table = xs[0];
            let d = table.dims()[1];
            let mut dt = vec![E::zero(); table.len()];
            for (r, &id) in ids.iter().enumerate() {
                for c in 0..d {
                    dt[id * d + c] = dt[id * d + c] + g[r * d + c];
                }
            }
            vec![Some(dt)]
        }
        Op::Sum => vec![Some(vec![g[0]; xs[0].len()])],
        Op::Mean => {
            let n = E::from_usize(xs[0].len()).unwrap_or_else(E::one);
            vec![Some(vec![g[0] / n; xs[0].len()])]
        }
        Op::SqErr => {
            let two = E::from_f64_lossy(2.0);
            let da: Vec<E> = xs[0].data().iter().zip(xs[1].data()).map(|(&a, &b)| two * (a - b) * g[0]).collect();
            let db = da.iter().map(|&v| -v).collect();
            vec![Some(da), Some(db)]
        }
        Op::Ctc { target, blank } => {
            let lp = xs[0];
            let (frames, classes) = (lp.dims()[0], lp.dims()[1]);
            let lat = ctc_lattice(lp.data(), frames, classes, target, *blank);
            let s_len = lat.ext.len();
            let mut dx = vec![E::zero(); lp.len()];
            for t in 0..frames {
                for s in 0..s_len {
                    let a = lat.alpha[t * s_len + s];
                    let b = lat.beta[t * s_len + s];
                    if a == E::neg_infinity() || b == E::neg_infinity() {
                        continue;
                    }
                    let k = lat.ext[s];
                    let occ = (a + b - lp.data()[t * classes + k] - lat.log_p).exp();
                    dx[t * classes + k] = dx[t * classes + k] - occ * g[0];
                }
            }
            vec![Some(dx)]
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn permute_map_transposes() {
        let (dims, map) = permute_map(&[2, 3], &[1, 0]);
        assert_eq!(dims, vec![3, 2]);
        assert_eq!(map, vec![0, 3, 1, 4, 2, 5]);
    }

    #[test]
    fn same_padding_halves_rounding_up() {
        for n in 1..40 {
            assert_eq!(same_pad(n, 3, 2).0, n.div_ceil(2));
        }
        assert_eq!(same_pad(4, 3, 2), (2, 0));
        assert_eq!(same_pad(5, 3, 2), (3, 1));
    }

    #[test]
    fn required_frames_counts_repeats() {
        assert_eq!(ctc_required_frames(&[]), 0);
        assert_eq!(ctc_required_frames(&[1, 2]), 2);
        assert_eq!(ctc_required_frames(&[1, 1]), 3);
        assert_eq!(ctc_required_frames(&[1, 1, 1]), 5);
    }
}
