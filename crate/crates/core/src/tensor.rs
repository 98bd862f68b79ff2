//! Dense row-major `f64` tensors and the raw kernels the autodiff graph is
//! built on.
//!
//! Nothing in this module knows about gradients; [`crate::graph`] records
//! these kernels and composes their adjoints.

use std::fmt;

use crate::error::{Error, Result};

/// An n-dimensional array of `f64` stored in row-major order.
///
/// The empty shape `[]` denotes a scalar holding exactly one value.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.data.len() <= 16 {
            write!(f, "Tensor{:?}{:?}", self.shape, self.data)
        } else {
            write!(
                f,
                "Tensor{:?}[{}, {}, ... {} values]",
                self.shape,
                self.data[0],
                self.data[1],
                self.data.len()
            )
        }
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::invalid("tensor", format!("zero-sized dimension in {shape:?}")));
        }
        if numel(shape) != data.len() {
            return Err(Error::invalid(
                "tensor",
                format!("shape {shape:?} needs {} values, got {}", numel(shape), data.len()),
            ));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; numel(shape)],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel(shape)],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: (0..numel(shape)).map(&mut f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        if numel(shape) != self.data.len() {
            return Err(Error::shape("reshape", &self.shape, shape));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::shape(op, &self.shape, &other.shape));
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn dot(&self, other: &Tensor) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Selects index `i` along the leading axis, dropping that axis.
    pub fn index_outer(&self, i: usize) -> Tensor {
        let inner: usize = self.shape[1..].iter().product();
        let shape = if self.shape.len() > 1 {
            self.shape[1..].to_vec()
        } else {
            Vec::new()
        };
        Tensor {
            shape,
            data: self.data[i * inner..(i + 1) * inner].to_vec(),
        }
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(items: &[Tensor]) -> Result<Tensor> {
        let first = items
            .first()
            .ok_or_else(|| Error::invalid("stack", "no tensors to stack"))?;
        let mut data = Vec::with_capacity(first.len() * items.len());
        for t in items {
            if t.shape != first.shape {
                return Err(Error::shape("stack", &first.shape, &t.shape));
            }
            data.extend_from_slice(&t.data);
        }
        let mut shape = vec![items.len()];
        shape.extend_from_slice(&first.shape);
        Ok(Tensor { shape, data })
    }
}

/// Shape produced by reducing `shape` over `axes` while keeping those axes as
/// size one.
pub(crate) fn reduced_shape(shape: &[usize], axes: &[usize]) -> Vec<usize> {
    shape
        .iter()
        .enumerate()
        .map(|(i, &d)| if axes.contains(&i) { 1 } else { d })
        .collect()
}

/// Walks every index of `big` and yields the matching flat index of `small`,
/// where `small` has the same rank with some dimensions collapsed to one.
fn for_each_broadcast_pair(big: &[usize], small: &[usize], mut f: impl FnMut(usize, usize)) {
    let rank = big.len();
    let mut small_strides = vec![0usize; rank];
    let mut acc = 1;
    for i in (0..rank).rev() {
        small_strides[i] = if small[i] == 1 { 0 } else { acc };
        acc *= small[i];
    }
    let total = numel(big);
    if rank == 0 {
        f(0, 0);
        return;
    }
    let inner = big[rank - 1];
    let inner_stride = small_strides[rank - 1];
    let mut idx = vec![0usize; rank];
    let mut big_flat = 0;
    while big_flat < total {
        let base: usize = (0..rank - 1).map(|i| idx[i] * small_strides[i]).sum();
        for j in 0..inner {
            f(big_flat + j, base + j * inner_stride);
        }
        big_flat += inner;
        // advance the outer multi-index
        let mut d = rank - 1;
        while d > 0 {
            d -= 1;
            idx[d] += 1;
            if idx[d] < big[d] {
                break;
            }
            idx[d] = 0;
        }
    }
}

pub(crate) fn sum_keep(x: &Tensor, axes: &[usize]) -> Tensor {
    let shape = reduced_shape(&x.shape, axes);
    let mut out = Tensor::zeros(&shape);
    for_each_broadcast_pair(&x.shape, &shape, |b, s| out.data[s] += x.data[b]);
    out
}

/// Expands size-one dimensions of `x` to `target` (same rank).
pub(crate) fn expand(x: &Tensor, target: &[usize]) -> Result<Tensor> {
    if x.shape.len() != target.len()
        || x
            .shape
            .iter()
            .zip(target)
            .any(|(&s, &t)| s != t && s != 1)
    {
        return Err(Error::shape("expand", &x.shape, target));
    }
    let mut out = Tensor::zeros(target);
    for_each_broadcast_pair(target, &x.shape, |b, s| out.data[b] = x.data[s]);
    Ok(out)
}

pub(crate) fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape.len() != 2 || b.shape.len() != 2 || a.shape[1] != b.shape[0] {
        return Err(Error::shape("matmul", &a.shape, &b.shape));
    }
    let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a.data[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b.data[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor::new(&[m, n], out)
}

pub(crate) fn transpose(a: &Tensor) -> Result<Tensor> {
    if a.shape.len() != 2 {
        return Err(Error::invalid("transpose", format!("expected a matrix, got {:?}", a.shape)));
    }
    let (m, n) = (a.shape[0], a.shape[1]);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a.data[i * n + j];
        }
    }
    Tensor::new(&[n, m], out)
}

/// Stride and zero-padding of a 2-D cross-correlation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_len(&self, input: usize, kernel: usize) -> Option<usize> {
        let padded = input + 2 * self.pad;
        if padded < kernel || self.stride == 0 {
            return None;
        }
        Some((padded - kernel) / self.stride + 1)
    }

    /// Output positions `o` in `0..out` for which `o * stride + tap - pad`
    /// lands inside `0..input`.
    fn valid_range(&self, tap: usize, input: usize, out: usize) -> (usize, usize) {
        let s = self.stride as isize;
        let off = tap as isize - self.pad as isize;
        // o*s + off >= 0  and  o*s + off < input
        let lo = if off >= 0 { 0 } else { ((-off) + s - 1) / s };
        let hi_excl = if (input as isize) - off <= 0 {
            0
        } else {
            (((input as isize) - off) + s - 1) / s
        };
        let lo = lo as usize;
        let hi = (hi_excl.max(0) as usize).min(out);
        (lo, hi.max(lo))
    }
}

fn conv_dims(x: &[usize], w: &[usize], geom: ConvGeom) -> Result<(usize, usize)> {
    if x.len() != 4 || w.len() != 4 || x[1] != w[1] {
        return Err(Error::shape("conv2d", x, w));
    }
    let ho = geom.out_len(x[2], w[2]);
    let wo = geom.out_len(x[3], w[3]);
    match (ho, wo) {
        (Some(h), Some(v)) => Ok((h, v)),
        _ => Err(Error::shape("conv2d", x, w)),
    }
}

/// Cross-correlation of `x` `[K, Ci, H, W]` with `w` `[Co, Ci, kh, kw]`.
pub(crate) fn conv2d(x: &Tensor, w: &Tensor, geom: ConvGeom) -> Result<Tensor> {
    let (ho, wo) = conv_dims(&x.shape, &w.shape, geom)?;
    let [k, ci, h, wd] = [x.shape[0], x.shape[1], x.shape[2], x.shape[3]];
    let [co, _, kh, kw] = [w.shape[0], w.shape[1], w.shape[2], w.shape[3]];
    let s = geom.stride;
    let mut out = vec![0.0; k * co * ho * wo];
    for b in 0..k {
        for o in 0..co {
            let out_plane = &mut out[(b * co + o) * ho * wo..(b * co + o + 1) * ho * wo];
            for c in 0..ci {
                let in_plane = &x.data[(b * ci + c) * h * wd..(b * ci + c + 1) * h * wd];
                for ky in 0..kh {
                    let (oy0, oy1) = geom.valid_range(ky, h, ho);
                    for kx in 0..kw {
                        let wv = w.data[((o * ci + c) * kh + ky) * kw + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        let (ox0, ox1) = geom.valid_range(kx, wd, wo);
                        for oy in oy0..oy1 {
                            let iy = oy * s + ky - geom.pad;
                            let orow = &mut out_plane[oy * wo..(oy + 1) * wo];
                            let irow = &in_plane[iy * wd..(iy + 1) * wd];
                            for ox in ox0..ox1 {
                                orow[ox] += wv * irow[ox * s + kx - geom.pad];
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(&[k, co, ho, wo], out)
}

/// Adjoint of [`conv2d`] with respect to its input: maps an output-shaped
/// `g` back to an input of spatial size `in_hw`.
pub(crate) fn conv2d_input_grad(
    g: &Tensor,
    w: &Tensor,
    geom: ConvGeom,
    in_hw: (usize, usize),
) -> Result<Tensor> {
    if g.shape.len() != 4 || w.shape.len() != 4 || g.shape[1] != w.shape[0] {
        return Err(Error::shape("conv2d_input_grad", &g.shape, &w.shape));
    }
    let [k, co, ho, wo] = [g.shape[0], g.shape[1], g.shape[2], g.shape[3]];
    let [_, ci, kh, kw] = [w.shape[0], w.shape[1], w.shape[2], w.shape[3]];
    let (h, wd) = in_hw;
    if geom.out_len(h, kh) != Some(ho) || geom.out_len(wd, kw) != Some(wo) {
        return Err(Error::shape("conv2d_input_grad", &g.shape, &w.shape));
    }
    let s = geom.stride;
    let mut out = vec![0.0; k * ci * h * wd];
    for b in 0..k {
        for o in 0..co {
            let g_plane = &g.data[(b * co + o) * ho * wo..(b * co + o + 1) * ho * wo];
            for c in 0..ci {
                let in_plane = &mut out[(b * ci + c) * h * wd..(b * ci + c + 1) * h * wd];
                for ky in 0..kh {
                    let (oy0, oy1) = geom.valid_range(ky, h, ho);
                    for kx in 0..kw {
                        let wv = w.data[((o * ci + c) * kh + ky) * kw + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        let (ox0, ox1) = geom.valid_range(kx, wd, wo);
                        for oy in oy0..oy1 {
                            let iy = oy * s + ky - geom.pad;
                            let grow = &g_plane[oy * wo..(oy + 1) * wo];
                            let irow = &mut in_plane[iy * wd..(iy + 1) * wd];
                            for ox in ox0..ox1 {
                                irow[ox * s + kx - geom.pad] += wv * grow[ox];
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(&[k, ci, h, wd], out)
}

/// Adjoint of [`conv2d`] with respect to its weight.
pub(crate) fn conv2d_weight_grad(
    x: &Tensor,
    g: &Tensor,
    geom: ConvGeom,
    kernel: (usize, usize),
) -> Result<Tensor> {
    if x.shape.len() != 4 || g.shape.len() != 4 || x.shape[0] != g.shape[0] {
        return Err(Error::shape("conv2d_weight_grad", &x.shape, &g.shape));
    }
    let [k, ci, h, wd] = [x.shape[0], x.shape[1], x.shape[2], x.shape[3]];
    let [_, co, ho, wo] = [g.shape[0], g.shape[1], g.shape[2], g.shape[3]];
    let (kh, kw) = kernel;
    if geom.out_len(h, kh) != Some(ho) || geom.out_len(wd, kw) != Some(wo) {
        return Err(Error::shape("conv2d_weight_grad", &x.shape, &g.shape));
    }
    let s = geom.stride;
    let mut out = vec![0.0; co * ci * kh * kw];
    for b in 0..k {
        for o in 0..co {
            let g_plane = &g.data[(b * co + o) * ho * wo..(b * co + o + 1) * ho * wo];
            for c in 0..ci {
                let in_plane = &x.data[(b * ci + c) * h * wd..(b * ci + c + 1) * h * wd];
                for ky in 0..kh {
                    let (oy0, oy1) = geom.valid_range(ky, h, ho);
                    for kx in 0..kw {
                        let (ox0, ox1) = geom.valid_range(kx, wd, wo);
                        let mut acc = 0.0;
                        for oy in oy0..oy1 {
                            let iy = oy * s + ky - geom.pad;
                            let grow = &g_plane[oy * wo..(oy + 1) * wo];
                            let irow = &in_plane[iy * wd..(iy + 1) * wd];
                            for ox in ox0..ox1 {
                                acc += grow[ox] * irow[ox * s + kx - geom.pad];
                            }
                        }
                        out[((o * ci + c) * kh + ky) * kw + kx] += acc;
                    }
                }
            }
        }
    }
    Tensor::new(&[co, ci, kh, kw], out)
}

fn pool_dims(shape: &[usize], k: usize, op: &'static str) -> Result<(usize, usize)> {
    if shape.len() != 4 || k == 0 || shape[2] < k || shape[3] < k {
        return Err(Error::invalid(op, format!("cannot pool {shape:?} with window {k}")));
    }
    Ok((shape[2] / k, shape[3] / k))
}

/// Non-overlapping `k`×`k` average pooling; trailing rows/columns that do not
/// fill a window are dropped.
pub(crate) fn avg_pool(x: &Tensor, k: usize) -> Result<Tensor> {
    let (ho, wo) = pool_dims(&x.shape, k, "avg_pool")?;
    let [n, c, h, w] = [x.shape[0], x.shape[1], x.shape[2], x.shape[3]];
    let scale = 1.0 / (k * k) as f64;
    let mut out = vec![0.0; n * c * ho * wo];
    for p in 0..n * c {
        let plane = &x.data[p * h * w..(p + 1) * h * w];
        let oplane = &mut out[p * ho * wo..(p + 1) * ho * wo];
        for oy in 0..ho {
            for dy in 0..k {
                let row = &plane[(oy * k + dy) * w..(oy * k + dy + 1) * w];
                for ox in 0..wo {
                    let mut acc = 0.0;
                    for dx in 0..k {
                        acc += row[ox * k + dx];
                    }
                    oplane[oy * wo + ox] += acc * scale;
                }
            }
        }
    }
    Tensor::new(&[n, c, ho, wo], out)
}

/// Adjoint of [`avg_pool`]: spreads each pooled value evenly over its window.
pub(crate) fn avg_pool_back(g: &Tensor, k: usize, in_hw: (usize, usize)) -> Result<Tensor> {
    let (h, w) = in_hw;
    if g.shape.len() != 4 || g.shape[2] != h / k || g.shape[3] != w / k {
        return Err(Error::shape("avg_pool_back", &g.shape, &[h, w]));
    }
    let [n, c, ho, wo] = [g.shape[0], g.shape[1], g.shape[2], g.shape[3]];
    let scale = 1.0 / (k * k) as f64;
    let mut out = vec![0.0; n * c * h * w];
    for p in 0..n * c {
        let gplane = &g.data[p * ho * wo..(p + 1) * ho * wo];
        let plane = &mut out[p * h * w..(p + 1) * h * w];
        for oy in 0..ho {
            for dy in 0..k {
                let row = &mut plane[(oy * k + dy) * w..(oy * k + dy + 1) * w];
                for ox in 0..wo {
                    let v = gplane[oy * wo + ox] * scale;
                    for dx in 0..k {
                        row[ox * k + dx] = v;
                    }
                }
            }
        }
    }
    Tensor::new(&[n, c, h, w], out)
}

/// Flat input index of the maximum in every `k`×`k` window. Ties go to the
/// first maximal element in row-major window order.
pub(crate) fn max_pool_indices(x: &Tensor, k: usize) -> Result<(Vec<usize>, Vec<usize>)> {
    let (ho, wo) = pool_dims(&x.shape, k, "max_pool")?;
    let [n, c, h, w] = [x.shape[0], x.shape[1], x.shape[2], x.shape[3]];
    let mut idx = Vec::with_capacity(n * c * ho * wo);
    for p in 0..n * c {
        let base = p * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = base + oy * k * w + ox * k;
                for dy in 0..k {
                    for dx in 0..k {
                        let i = base + (oy * k + dy) * w + ox * k + dx;
                        if x.data[i] > x.data[best] {
                            best = i;
                        }
                    }
                }
                idx.push(best);
            }
        }
    }
    Ok((idx, vec![n, c, ho, wo]))
}

pub(crate) fn gather(x: &Tensor, indices: &[usize], out_shape: &[usize]) -> Result<Tensor> {
    Tensor::new(out_shape, indices.iter().map(|&i| x.data[i]).collect())
}

pub(crate) fn scatter(g: &Tensor, indices: &[usize], out_shape: &[usize]) -> Tensor {
    let mut out = Tensor::zeros(out_shape);
    for (&i, &v) in indices.iter().zip(&g.data) {
        out.data[i] += v;
    }
    out
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) fn slice(x: &Tensor, axis: usize, start: usize, len: usize) -> Result<Tensor> {
    if axis >= x.shape.len() || len == 0 || start + len > x.shape[axis] {
        return Err(Error::invalid(
            "slice",
            format!("range {start}..{} on axis {axis} of {:?}", start + len, x.shape),
        ));
    }
    let (outer, dim, inner) = split_axis(&x.shape, axis);
    let mut data = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let base = o * dim * inner;
        data.extend_from_slice(&x.data[base + start * inner..base + (start + len) * inner]);
    }
    let mut shape = x.shape.clone();
    shape[axis] = len;
    Tensor::new(&shape, data)
}

/// Zero-pads `x` along `axis` with `before` and `after` entries.
pub(crate) fn pad(x: &Tensor, axis: usize, before: usize, after: usize) -> Result<Tensor> {
    if axis >= x.shape.len() {
        return Err(Error::invalid("pad", format!("axis {axis} of {:?}", x.shape)));
    }
    let (outer, dim, inner) = split_axis(&x.shape, axis);
    let new_dim = dim + before + after;
    let mut data = vec![0.0; outer * new_dim * inner];
    for o in 0..outer {
        let src = &x.data[o * dim * inner..(o + 1) * dim * inner];
        let dst = o * new_dim * inner + before * inner;
        data[dst..dst + dim * inner].copy_from_slice(src);
    }
    let mut shape = x.shape.clone();
    shape[axis] = new_dim;
    Tensor::new(&shape, data)
}

pub(crate) fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
    let first = parts
        .first()
        .ok_or_else(|| Error::invalid("concat", "nothing to concatenate"))?;
    if axis >= first.shape.len() {
        return Err(Error::invalid("concat", format!("axis {axis} of {:?}", first.shape)));
    }
    for p in parts {
        let ok = p.shape.len() == first.shape.len()
            && p
                .shape
                .iter()
                .zip(&first.shape)
                .enumerate()
                .all(|(i, (a, b))| i == axis || a == b);
        if !ok {
            return Err(Error::shape("concat", &first.shape, &p.shape));
        }
    }
    let (outer, _, inner) = split_axis(&first.shape, axis);
    let total: usize = parts.iter().map(|p| p.shape[axis]).sum();
    let mut data = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for p in parts {
            let d = p.shape[axis];
            data.extend_from_slice(&p.data[o * d * inner..(o + 1) * d * inner]);
        }
    }
    let mut shape = first.shape.clone();
    shape[axis] = total;
    Tensor::new(&shape, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn rejects_inconsistent_buffers() {
        assert!(Tensor::new(&[2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::new(&[0, 2], vec![]).is_err());
    }

    #[test]
    fn scalar_kernel_scales_input() {
        let x = t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let w = t(&[1, 1, 1, 1], &[2.0]);
        let y = conv2d(&x, &w, ConvGeom { stride: 1, pad: 0 }).unwrap();
        assert_eq!(y.data(), &[2.0, 4.0, 6.0, 8.0]);
    }

    #[test]
    fn conv_with_padding_and_stride_matches_naive_loop() {
        let x = Tensor::from_fn(&[2, 2, 5, 4], |i| ((i * 7) % 11) as f64 - 5.0);
        let w = Tensor::from_fn(&[3, 2, 3, 3], |i| ((i * 5) % 7) as f64 - 3.0);
        for geom in [ConvGeom { stride: 1, pad: 1 }, ConvGeom { stride: 2, pad: 1 }, ConvGeom { stride: 2, pad: 0 }] {
            let y = conv2d(&x, &w, geom).unwrap();
            let (ho, wo) = (y.shape()[2], y.shape()[3]);
            for b in 0..2 {
                for o in 0..3 {
                    for oy in 0..ho {
                        for ox in 0..wo {
                            let mut acc = 0.0;
                            for c in 0..2 {
                                for ky in 0..3 {
                                    for kx in 0..3 {
                                        let iy = (oy * geom.stride + ky) as isize - geom.pad as isize;
                                        let ix = (ox * geom.stride + kx) as isize - geom.pad as isize;
                                        if iy < 0 || ix < 0 || iy >= 5 || ix >= 4 {
                                            continue;
                                        }
                                        acc += x.data()[((b * 2 + c) * 5 + iy as usize) * 4 + ix as usize]
                                            * w.data()[((o * 2 + c) * 3 + ky) * 3 + kx];
                                    }
                                }
                            }
                            let got = y.data()[((b * 3 + o) * ho + oy) * wo + ox];
                            assert_eq!(got, acc);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn conv_adjoints_satisfy_inner_product_identity() {
        // <conv(x, w), g> = <x, input_grad(g, w)> = <w, weight_grad(x, g)>
        let geom = ConvGeom { stride: 2, pad: 1 };
        let x = Tensor::from_fn(&[2, 3, 7, 6], |i| (i as f64 * 0.37).sin());
        let w = Tensor::from_fn(&[4, 3, 3, 3], |i| (i as f64 * 0.11).cos());
        let y = conv2d(&x, &w, geom).unwrap();
        let g = Tensor::from_fn(y.shape(), |i| (i as f64 * 0.23).sin());
        let lhs = y.dot(&g);
        let gx = conv2d_input_grad(&g, &w, geom, (7, 6)).unwrap();
        let gw = conv2d_weight_grad(&x, &g, geom, (3, 3)).unwrap();
        assert!((lhs - x.dot(&gx)).abs() < 1e-10);
        assert!((lhs - w.dot(&gw)).abs() < 1e-10);
    }

    #[test]
    fn reduce_and_expand() {
        let x = t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(sum_keep(&x, &[0]).data(), &[5.0, 7.0, 9.0]);
        assert_eq!(sum_keep(&x, &[1]).data(), &[6.0, 15.0]);
        assert_eq!(sum_keep(&x, &[0, 1]).data(), &[21.0]);
        let e = expand(&t(&[1, 3], &[1.0, 2.0, 3.0]), &[2, 3]).unwrap();
        assert_eq!(e.data(), &[1.0, 2.0, 3.0, 1.0, 2.0, 3.0]);
        assert!(expand(&x, &[3, 3]).is_err());
    }

    #[test]
    fn matmul_row_sums() {
        let a = t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let ones = Tensor::full(&[3, 1], 1.0);
        assert_eq!(matmul(&a, &ones).unwrap().data(), &[6.0, 15.0]);
        assert!(matmul(&a, &a).is_err());
    }

    #[test]
    fn pooling() {
        let x = Tensor::from_fn(&[1, 1, 4, 4], |i| i as f64);
        let a = avg_pool(&x, 2).unwrap();
        assert_eq!(a.data(), &[2.5, 4.5, 10.5, 12.5]);
        let (idx, shape) = max_pool_indices(&x, 2).unwrap();
        assert_eq!(gather(&x, &idx, &shape).unwrap().data(), &[5.0, 7.0, 13.0, 15.0]);
        // ties route to the first element of the window
        let flat = Tensor::full(&[1, 1, 2, 2], 1.0);
        assert_eq!(max_pool_indices(&flat, 2).unwrap().0, vec![0]);
    }

    #[test]
    fn slice_pad_concat() {
        let x = Tensor::from_fn(&[2, 3], |i| i as f64);
        let s = slice(&x, 1, 1, 2).unwrap();
        assert_eq!(s.data(), &[1.0, 2.0, 4.0, 5.0]);
        let p = pad(&s, 1, 1, 0).unwrap();
        assert_eq!(p.data(), &[0.0, 1.0, 2.0, 0.0, 4.0, 5.0]);
        let c = concat(&[&x, &s], 1).unwrap();
        assert_eq!(c.shape(), &[2, 5]);
        assert_eq!(c.data(), &[0.0, 1.0, 2.0, 1.0, 2.0, 3.0, 4.0, 5.0, 4.0, 5.0]);
    }
}
