//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records every operation of one forward pass. Nodes are
//! appended in evaluation order, so walking the tape backwards is a valid
//! topological order for the backward pass. Graphs are single-sample and
//! single-threaded; batch parallelism builds one graph per sample over a
//! shared, read-only [`ParamStore`].

use crate::error::{Error, Result};
use crate::fourier;
use crate::params::{ParamGrads, ParamId, ParamStore};
use crate::tensor::{self, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

const NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum KlOrder {
    /// `Σ target · (ln target − ln pred)`
    TargetWeighted,
    /// `Σ pred · (ln pred − ln target)`
    PredWeighted,
}

#[derive(Debug)]
enum Op {
    Input,
    Leaf,
    Param,
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Conv2d { x: Var, w: Var, b: Option<Var>, pad: usize },
    AvgPool { x: Var, k: usize },
    Upsample2(Var),
    Concat(Vec<Var>),
    Silu(Var),
    Sigmoid(Var),
    InstanceNorm { x: Var, gamma: Var, beta: Var },
    LayerNorm { x: Var, gamma: Var, beta: Var },
    Softmax { x: Var, axis: usize },
    Reshape(Var),
    Transpose(Var),
    MatMul(Var, Var),
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    Gather { table: Var, idx: Vec<usize> },
    SpatialMean(Var),
    ChannelStats(Var),
    Linear { x: Var, w: Var, b: Var },
    L2Normalize(Var),
    FftLogMag(Var),
    SoftArgmax { x: Var, temperature: f64, cell: f64 },
    Huber { x: Var, target: [f64; 2], delta: f64 },
    Kl { pred: Var, target: Tensor, eps: f64, order: KlOrder },
    Bce { p: Var, label: f64, eps: f64 },
    SelectColumn { x: Var, row: usize, col: usize },
    Sum(Var),
    DotConst { x: Var, weights: Tensor },
    SqDist { x: Var, target: Tensor },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
}

fn rank3(shape: &[usize]) -> [usize; 3] {
    match *shape {
        [a] => [1, 1, a],
        [a, b] => [1, a, b],
        [a, b, c] => [a, b, c],
        _ => panic!("broadcast ops support rank ≤ 3, got {shape:?}"),
    }
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    if a == b {
        return Ok(a.to_vec());
    }
    if a.len() > 3 || b.len() > 3 {
        return Err(Error::invalid("broadcast supports rank ≤ 3"));
    }
    let (ra, rb) = (rank3(a), rank3(b));
    let mut out = [0usize; 3];
    for d in 0..3 {
        out[d] = match (ra[d], rb[d]) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            (x, y) => return Err(Error::shape(format!("broadcast axis {d}"), x, y)),
        };
    }
    let rank = a.len().max(b.len());
    Ok(out[3 - rank..].to_vec())
}

/// Visits `(out_index, a_index, b_index)` for a broadcast binary op.
fn for_each_broadcast(
    out: &[usize],
    a: &[usize],
    b: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    if a == b {
        for i in 0..a.iter().product() {
            f(i, i, i);
        }
        return;
    }
    let (ro, ra, rb) = (rank3(out), rank3(a), rank3(b));
    let sa = [ra[1] * ra[2], ra[2], 1];
    let sb = [rb[1] * rb[2], rb[2], 1];
    let mut o = 0;
    for i in 0..ro[0] {
        let ia = if ra[0] == 1 { 0 } else { i * sa[0] };
        let ib = if rb[0] == 1 { 0 } else { i * sb[0] };
        for j in 0..ro[1] {
            let ja = ia + if ra[1] == 1 { 0 } else { j * sa[1] };
            let jb = ib + if rb[1] == 1 { 0 } else { j * sb[1] };
            for k in 0..ro[2] {
                let ka = ja + if ra[2] == 1 { 0 } else { k };
                let kb = jb + if rb[2] == 1 { 0 } else { k };
                f(o, ka, kb);
                o += 1;
            }
        }
    }
}

/// Unfolds a padded `c × h × w` plane stack into `(c·k·k) × (h·w)` patches
/// for a stride-1, same-size convolution.
fn im2col(x: &[f64], c: usize, h: usize, w: usize, k: usize, pad: usize) -> Vec<f64> {
    let oh = h + 2 * pad + 1 - k;
    let ow = w + 2 * pad + 1 - k;
    let mut cols = vec![0.0; c * k * k * oh * ow];
    for ci in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let dst = &mut cols[row * oh * ow..(row + 1) * oh * ow];
                for oi in 0..oh {
                    let ii = oi as isize + ki as isize - pad as isize;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    let src = &x[ci * h * w + ii as usize * w..ci * h * w + (ii as usize + 1) * w];
                    for oj in 0..ow {
                        let jj = oj as isize + kj as isize - pad as isize;
                        if jj >= 0 && jj < w as isize {
                            dst[oi * ow + oj] = src[jj as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f64], dx: &mut [f64], c: usize, h: usize, w: usize, k: usize, pad: usize) {
    let oh = h + 2 * pad + 1 - k;
    let ow = w + 2 * pad + 1 - k;
    for ci in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let src = &cols[row * oh * ow..(row + 1) * oh * ow];
                for oi in 0..oh {
                    let ii = oi as isize + ki as isize - pad as isize;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    let base = ci * h * w + ii as usize * w;
                    for oj in 0..ow {
                        let jj = oj as isize + kj as isize - pad as isize;
                        if jj >= 0 && jj < w as isize {
                            dx[base + jj as usize] += src[oi * ow + oj];
                        }
                    }
                }
            }
        }
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Per-group normalization shared by instance and layer norm.
/// Returns `(xhat, inv_std)` for a group of values.
fn normalize_group(x: &[f64]) -> (Vec<f64>, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv_std = 1.0 / (var + NORM_EPS).sqrt();
    (x.iter().map(|v| (v - mean) * inv_std).collect(), inv_std)
}

fn normalize_group_backward(xhat: &[f64], inv_std: f64, dxhat: &[f64], dx: &mut [f64]) {
    let n = xhat.len() as f64;
    let sum_d: f64 = dxhat.iter().sum();
    let sum_dx: f64 = dxhat.iter().zip(xhat).map(|(d, x)| d * x).sum();
    for i in 0..xhat.len() {
        dx[i] += inv_std / n * (n * dxhat[i] - sum_d - xhat[i] * sum_dx);
    }
}

/// Splits a shape into `(outer, len, inner)` around `axis`.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Sharpened distribution used by soft-argmax: `q ∝ p^(1/T)`, evaluated in
/// log space relative to the maximum so tiny temperatures do not underflow.
pub(crate) fn sharpen(p: &[f64], temperature: f64) -> (Vec<f64>, f64, f64) {
    let a = 1.0 / temperature;
    let pmax = p.iter().cloned().fold(0.0, f64::max);
    let w: Vec<f64> = p.iter().map(|&v| (v / pmax).powf(a)).collect();
    let s: f64 = w.iter().sum();
    (w.iter().map(|v| v / s).collect(), pmax, s)
}

/// Expected cell-centre coordinates `(x, y)` under the sharpened map.
pub(crate) fn soft_argmax_values(p: &[f64], h: usize, w: usize, temperature: f64, cell: f64) -> [f64; 2] {
    let (q, _, _) = sharpen(p, temperature);
    let mut xy = [0.0; 2];
    for r in 0..h {
        for c in 0..w {
            let qi = q[r * w + c];
            xy[0] += qi * (c as f64 + 0.5) * cell;
            xy[1] += qi * (r as f64 + 0.5) * cell;
        }
    }
    xy
}

pub(crate) fn huber_value(r: f64, delta: f64) -> f64 {
    if r.abs() <= delta {
        0.5 * r * r
    } else {
        delta * (r.abs() - 0.5 * delta)
    }
}

pub(crate) fn kl_value(pred: &[f64], target: &[f64], eps: f64, order: KlOrder) -> f64 {
    pred.iter()
        .zip(target)
        .map(|(&p, &t)| match order {
            KlOrder::TargetWeighted => t * ((t + eps).ln() - (p + eps).ln()),
            KlOrder::PredWeighted => p * ((p + eps).ln() - (t + eps).ln()),
        })
        .sum()
}

pub(crate) fn bce_value(p: f64, label: f64, eps: f64) -> f64 {
    -(label * (p + eps).ln() + (1.0 - label) * (1.0 - p + eps).ln())
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Graph {
            params,
            nodes: Vec::new(),
            param_vars: vec![None; params.len()],
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let needs_grad = match op {
            Op::Input => false,
            Op::Leaf | Op::Param => true,
            _ => parents.iter().any(|p| self.nodes[p.0].needs_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A constant input; no gradient flows into it.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Input, &[])
    }

    /// An input whose gradient is tracked (used by gradient checks).
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, &[])
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        let v = self.push(self.params.get(id).clone(), Op::Param, &[]);
        self.param_vars[id.0] = Some(v);
        v
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let out_shape = broadcast_shape(&sa, &sb)?;
        let mut out = Tensor::zeros(&out_shape);
        {
            let (va, vb) = (self.value(a).data(), self.value(b).data());
            let od = out.data_mut();
            for_each_broadcast(&out_shape, &sa, &sb, |o, i, j| od[o] = va[i] + vb[j]);
        }
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let out_shape = broadcast_shape(&sa, &sb)?;
        let mut out = Tensor::zeros(&out_shape);
        {
            let (va, vb) = (self.value(a).data(), self.value(b).data());
            let od = out.data_mut();
            for_each_broadcast(&out_shape, &sa, &sb, |o, i, j| od[o] = va[i] * vb[j]);
        }
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let mut out = self.value(x).clone();
        out.scale(s);
        self.push(out, Op::Scale(x, s), &[x])
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Var {
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().for_each(|v| *v += s);
        self.push(out, Op::AddScalar(x), &[x])
    }

    /// Stride-1 2D convolution of `x: [C, H, W]` with `w: [O, C, k, k]` and
    /// zero padding `pad` on every side.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, pad: usize) -> Result<Var> {
        let (c, h, wd) = self.value(x).dims3()?;
        let ws = self.shape(w).to_vec();
        if ws.len() != 4 || ws[2] != ws[3] {
            return Err(Error::invalid(format!("conv weight must be [O, C, k, k], got {ws:?}")));
        }
        if ws[1] != c {
            return Err(Error::shape("conv input channels", ws[1], c));
        }
        let (o, k) = (ws[0], ws[2]);
        if h + 2 * pad < k || wd + 2 * pad < k {
            return Err(Error::invalid("conv kernel larger than padded input"));
        }
        if let Some(b) = b {
            if self.shape(b) != [o] {
                return Err(Error::shape("conv bias", o, self.value(b).len()));
            }
        }
        let oh = h + 2 * pad + 1 - k;
        let ow = wd + 2 * pad + 1 - k;
        let cols = im2col(self.value(x).data(), c, h, wd, k, pad);
        let mut out = vec![0.0; o * oh * ow];
        if let Some(b) = b {
            for (oc, &bv) in self.value(b).data().iter().enumerate() {
                out[oc * oh * ow..(oc + 1) * oh * ow].fill(bv);
            }
        }
        tensor::matmul_acc(self.value(w).data(), &cols, &mut out, o, c * k * k, oh * ow);
        let t = Tensor::new(&[o, oh, ow], out)?;
        let parents: Vec<Var> = std::iter::once(x).chain(std::iter::once(w)).chain(b).collect();
        Ok(self.push(t, Op::Conv2d { x, w, b, pad }, &parents))
    }

    /// Non-overlapping `k × k` average pooling.
    pub fn avg_pool(&mut self, x: Var, k: usize) -> Result<Var> {
        let (c, h, w) = self.value(x).dims3()?;
        if k == 0 || h % k != 0 {
            return Err(Error::shape("pool height", h - h % k.max(1), h));
        }
        if w % k != 0 {
            return Err(Error::shape("pool width", w - w % k, w));
        }
        let (oh, ow) = (h / k, w / k);
        let xv = self.value(x).data();
        let inv = 1.0 / (k * k) as f64;
        let mut out = vec![0.0; c * oh * ow];
        for ci in 0..c {
            for i in 0..h {
                for j in 0..w {
                    out[ci * oh * ow + (i / k) * ow + j / k] += xv[ci * h * w + i * w + j] * inv;
                }
            }
        }
        let t = Tensor::new(&[c, oh, ow], out)?;
        Ok(self.push(t, Op::AvgPool { x, k }, &[x]))
    }

    /// Nearest-neighbour ×2 upsampling.
    pub fn upsample2(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = self.value(x).dims3()?;
        let xv = self.value(x).data();
        let (oh, ow) = (2 * h, 2 * w);
        let mut out = vec![0.0; c * oh * ow];
        for ci in 0..c {
            for i in 0..oh {
                for j in 0..ow {
                    out[ci * oh * ow + i * ow + j] = xv[ci * h * w + (i / 2) * w + j / 2];
                }
            }
        }
        let t = Tensor::new(&[c, oh, ow], out)?;
        Ok(self.push(t, Op::Upsample2(x), &[x]))
    }

    /// Concatenation along axis 0 (channels for `[C, H, W]`, elements for vectors).
    pub fn concat(&mut self, xs: &[Var]) -> Result<Var> {
        let first = self.shape(xs[0]).to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        for &x in xs {
            let s = self.shape(x);
            if s.len() != first.len() || s[1..] != first[1..] {
                return Err(Error::invalid(format!(
                    "concat: trailing dims differ ({:?} vs {first:?})",
                    s
                )));
            }
            lead += s[0];
            data.extend_from_slice(self.value(x).data());
        }
        let mut shape = first.clone();
        shape[0] = lead;
        let t = Tensor::new(&shape, data)?;
        Ok(self.push(t, Op::Concat(xs.to_vec()), xs))
    }

    /// `x · sigmoid(x)`: smooth, slope bounded in roughly [-0.1, 1.1].
    pub fn silu(&mut self, x: Var) -> Var {
        let out = Tensor::from_fn(self.shape(x), |i| {
            let v = self.value(x).data()[i];
            v * sigmoid(v)
        });
        self.push(out, Op::Silu(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = Tensor::from_fn(self.shape(x), |i| sigmoid(self.value(x).data()[i]));
        self.push(out, Op::Sigmoid(x), &[x])
    }

    /// Per-channel normalization over spatial positions with affine `gamma`, `beta` of shape `[C]`.
    pub fn instance_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (c, h, w) = self.value(x).dims3()?;
        if self.value(gamma).len() != c || self.value(beta).len() != c {
            return Err(Error::shape("norm affine channels", c, self.value(gamma).len()));
        }
        let n = h * w;
        let mut out = vec![0.0; c * n];
        let (xv, gv, bv) = (self.value(x).data(), self.value(gamma).data(), self.value(beta).data());
        for ci in 0..c {
            let (xhat, _) = normalize_group(&xv[ci * n..(ci + 1) * n]);
            for (o, xh) in out[ci * n..(ci + 1) * n].iter_mut().zip(xhat) {
                *o = gv[ci] * xh + bv[ci];
            }
        }
        let t = Tensor::new(&[c, h, w], out)?;
        Ok(self.push(t, Op::InstanceNorm { x, gamma, beta }, &[x, gamma, beta]))
    }

    /// Normalization over all elements of `x` with element-wise affine parameters.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let n = self.value(x).len();
        if self.value(gamma).len() != n || self.value(beta).len() != n {
            return Err(Error::shape("layer norm affine", n, self.value(gamma).len()));
        }
        let (xhat, _) = normalize_group(self.value(x).data());
        let (gv, bv) = (self.value(gamma).data(), self.value(beta).data());
        let out: Vec<f64> = (0..n).map(|i| gv[i] * xhat[i] + bv[i]).collect();
        let t = Tensor::new(self.shape(x), out)?;
        Ok(self.push(t, Op::LayerNorm { x, gamma, beta }, &[x, gamma, beta]))
    }

    /// Softmax along `axis`, computed with max subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::invalid(format!("softmax axis {axis} out of range for {shape:?}")));
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        let xv = self.value(x).data();
        let mut out = vec![0.0; xv.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| o * len * inner + k * inner + i;
                let m = (0..len).map(|k| xv[at(k)]).fold(f64::NEG_INFINITY, f64::max);
                let mut s = 0.0;
                for k in 0..len {
                    let e = (xv[at(k)] - m).exp();
                    out[at(k)] = e;
                    s += e;
                }
                for k in 0..len {
                    out[at(k)] /= s;
                }
            }
        }
        let t = Tensor::new(&shape, out)?;
        Ok(self.push(t, Op::Softmax { x, axis }, &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshaped(shape)?;
        Ok(self.push(t, Op::Reshape(x), &[x]))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = match *self.shape(x) {
            [r, c] => (r, c),
            _ => return Err(Error::invalid("transpose needs a matrix")),
        };
        let xv = self.value(x).data();
        let out = Tensor::from_fn(&[c, r], |i| xv[(i % r) * c + i / r]);
        Ok(self.push(out, Op::Transpose(x), &[x]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = match *self.shape(a) {
            [m, k] => (m, k),
            _ => return Err(Error::invalid("matmul lhs must be a matrix")),
        };
        let (k2, n) = match *self.shape(b) {
            [k2, n] => (k2, n),
            _ => return Err(Error::invalid("matmul rhs must be a matrix")),
        };
        if k != k2 {
            return Err(Error::shape("matmul inner dimension", k, k2));
        }
        let mut out = vec![0.0; m * n];
        tensor::matmul_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let t = Tensor::new(&[m, n], out)?;
        Ok(self.push(t, Op::MatMul(a, b), &[a, b]))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = match *self.shape(x) {
            [r, c] => (r, c),
            _ => return Err(Error::invalid("slice_cols needs a matrix")),
        };
        if start + len > c {
            return Err(Error::shape("slice columns", c, start + len));
        }
        let xv = self.value(x).data();
        let out = Tensor::from_fn(&[r, len], |i| xv[(i / len) * c + start + i % len]);
        Ok(self.push(out, Op::SliceCols { x, start }, &[x]))
    }

    pub fn concat_cols(&mut self, xs: &[Var]) -> Result<Var> {
        let r = self.shape(xs[0])[0];
        let mut widths = Vec::new();
        for &x in xs {
            match *self.shape(x) {
                [rr, c] if rr == r => widths.push(c),
                [rr, _] => return Err(Error::shape("concat_cols rows", r, rr)),
                _ => return Err(Error::invalid("concat_cols needs matrices")),
            }
        }
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; r * total];
        let mut off = 0;
        for (&x, &c) in xs.iter().zip(&widths) {
            let xv = self.value(x).data();
            for i in 0..r {
                out[i * total + off..i * total + off + c].copy_from_slice(&xv[i * c..(i + 1) * c]);
            }
            off += c;
        }
        let t = Tensor::new(&[r, total], out)?;
        Ok(self.push(t, Op::ConcatCols(xs.to_vec()), xs))
    }

    /// `out[i] = table[idx[i]]` (flat indices), reshaped to `shape`.
    pub fn gather(&mut self, table: Var, idx: Vec<usize>, shape: &[usize]) -> Result<Var> {
        let tv = self.value(table).data();
        if let Some(&bad) = idx.iter().find(|&&i| i >= tv.len()) {
            return Err(Error::shape("gather index", tv.len(), bad));
        }
        let t = Tensor::new(shape, idx.iter().map(|&i| tv[i]).collect())?;
        Ok(self.push(t, Op::Gather { table, idx }, &[table]))
    }

    /// Global average over spatial positions: `[C, H, W] → [C]`.
    pub fn spatial_mean(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = self.value(x).dims3()?;
        let n = h * w;
        let xv = self.value(x).data();
        let out = Tensor::from_fn(&[c], |ci| xv[ci * n..(ci + 1) * n].iter().sum::<f64>() / n as f64);
        Ok(self.push(out, Op::SpatialMean(x), &[x]))
    }

    /// Per-location mean and standard deviation over channels: `[C, H, W] → [2, H, W]`.
    pub fn channel_stats(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = self.value(x).dims3()?;
        let n = h * w;
        let xv = self.value(x).data();
        let mut out = vec![0.0; 2 * n];
        for p in 0..n {
            let mean = (0..c).map(|ci| xv[ci * n + p]).sum::<f64>() / c as f64;
            let var = (0..c).map(|ci| (xv[ci * n + p] - mean).powi(2)).sum::<f64>() / c as f64;
            out[p] = mean;
            out[n + p] = (var + NORM_EPS).sqrt();
        }
        let t = Tensor::new(&[2, h, w], out)?;
        Ok(self.push(t, Op::ChannelStats(x), &[x]))
    }

    /// `W · vec(x) + b` with `w: [M, N]`, `b: [M]`; output `[M]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let n = self.value(x).len();
        let (m, n2) = match *self.shape(w) {
            [m, n2] => (m, n2),
            _ => return Err(Error::invalid("linear weight must be a matrix")),
        };
        if n != n2 {
            return Err(Error::shape("linear input", n2, n));
        }
        if self.value(b).len() != m {
            return Err(Error::shape("linear bias", m, self.value(b).len()));
        }
        let (xv, wv, bv) = (self.value(x).data(), self.value(w).data(), self.value(b).data());
        let out = Tensor::from_fn(&[m], |i| bv[i] + tensor::dot(&wv[i * n..(i + 1) * n], xv));
        Ok(self.push(out, Op::Linear { x, w, b }, &[x, w, b]))
    }

    pub fn l2_normalize(&mut self, x: Var) -> Var {
        let xv = self.value(x).data();
        let norm = xv.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        let out = Tensor::from_fn(self.shape(x), |i| xv[i] / norm);
        self.push(out, Op::L2Normalize(x), &[x])
    }

    /// Per-channel centred `log(1 + |DFT|)` of a `[C, H, W]` map.
    pub fn fft_log_magnitude(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = self.value(x).dims3()?;
        let n = h * w;
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(c * n);
        for ci in 0..c {
            out.extend(fourier::log_magnitude_plane(&xv[ci * n..(ci + 1) * n], h, w));
        }
        let t = Tensor::new(&[c, h, w], out)?;
        Ok(self.push(t, Op::FftLogMag(x), &[x]))
    }

    /// Expected `(x, y)` cell-centre coordinates, in units of `cell`, under
    /// the map `x: [.., H, W]` sharpened by `1 / temperature`.
    pub fn soft_argmax(&mut self, x: Var, temperature: f64, cell: f64) -> Result<Var> {
        let s = self.shape(x);
        if s.len() < 2 || temperature <= 0.0 {
            return Err(Error::invalid("soft_argmax needs a [.., H, W] map and temperature > 0"));
        }
        let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
        if self.value(x).len() != h * w {
            return Err(Error::invalid("soft_argmax expects a single-channel map"));
        }
        let xy = soft_argmax_values(self.value(x).data(), h, w, temperature, cell);
        let t = Tensor::new(&[2], xy.to_vec())?;
        Ok(self.push(t, Op::SoftArgmax { x, temperature, cell }, &[x]))
    }

    /// Sum of per-coordinate Huber penalties between `x: [2]` and `target`.
    pub fn huber(&mut self, x: Var, target: [f64; 2], delta: f64) -> Result<Var> {
        if self.value(x).len() != 2 {
            return Err(Error::shape("huber input", 2, self.value(x).len()));
        }
        let xv = self.value(x).data();
        let v = huber_value(xv[0] - target[0], delta) + huber_value(xv[1] - target[1], delta);
        Ok(self.push(Tensor::scalar(v), Op::Huber { x, target, delta }, &[x]))
    }

    pub fn kl(&mut self, pred: Var, target: Tensor, eps: f64, order: KlOrder) -> Result<Var> {
        if self.value(pred).len() != target.len() {
            return Err(Error::shape("kl target", self.value(pred).len(), target.len()));
        }
        let v = kl_value(self.value(pred).data(), target.data(), eps, order);
        Ok(self.push(Tensor::scalar(v), Op::Kl { pred, target, eps, order }, &[pred]))
    }

    pub fn bce(&mut self, p: Var, label: f64, eps: f64) -> Var {
        let v = bce_value(self.value(p).item(), label, eps);
        self.push(Tensor::scalar(v), Op::Bce { p, label, eps }, &[p])
    }

    /// `x[:, row, col]` of a `[K, H, W]` tensor.
    pub fn select_column(&mut self, x: Var, row: usize, col: usize) -> Result<Var> {
        let (k, h, w) = self.value(x).dims3()?;
        if row >= h || col >= w {
            return Err(Error::invalid(format!("column ({row}, {col}) outside {h}×{w}")));
        }
        let xv = self.value(x).data();
        let t = Tensor::from_fn(&[k], |i| xv[i * h * w + row * w + col]);
        Ok(self.push(t, Op::SelectColumn { x, row, col }, &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let v = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(v), Op::Sum(x), &[x])
    }

    /// `Σ x ⊙ weights` against a constant weight tensor.
    pub fn dot_const(&mut self, x: Var, weights: Tensor) -> Result<Var> {
        if weights.len() != self.value(x).len() {
            return Err(Error::shape("dot weights", self.value(x).len(), weights.len()));
        }
        let v = tensor::dot(self.value(x).data(), weights.data());
        Ok(self.push(Tensor::scalar(v), Op::DotConst { x, weights }, &[x]))
    }

    /// `Σ (x − target)²`.
    pub fn sq_dist(&mut self, x: Var, target: Tensor) -> Result<Var> {
        if target.len() != self.value(x).len() {
            return Err(Error::shape("sq_dist target", self.value(x).len(), target.len()));
        }
        let v = self
            .value(x)
            .data()
            .iter()
            .zip(target.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        Ok(self.push(Tensor::scalar(v), Op::SqDist { x, target }, &[x]))
    }

    /// Backpropagates `1.0` from a scalar node.
    pub fn backward(&self, out: Var) -> Gradients {
        self.backward_seeded(&[(out, Tensor::filled(self.shape(out), 1.0))])
    }

    /// Backpropagates arbitrary seed gradients from several nodes at once.
    pub fn backward_seeded(&self, seeds: &[(Var, Tensor)]) -> Gradients {
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        for (v, g) in seeds {
            assert_eq!(g.shape(), self.shape(*v), "seed gradient shape mismatch");
            accumulate(&mut grads, *v, g);
        }
        for idx in (0..self.nodes.len()).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !self.nodes[idx].needs_grad {
                continue;
            }
            self.backward_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn backward_node(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[idx];
        let gd = g.data();
        match &node.op {
            Op::Input | Op::Leaf | Op::Param => {}
            Op::Add(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let mut ga = Tensor::zeros(sa);
                let mut gb = Tensor::zeros(sb);
                {
                    let (gad, gbd) = (ga.data_mut(), gb.data_mut());
                    for_each_broadcast(node.value.shape(), sa, sb, |o, i, j| {
                        gad[i] += gd[o];
                        gbd[j] += gd[o];
                    });
                }
                self.acc(grads, *a, ga);
                self.acc(grads, *b, gb);
            }
            Op::Mul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                let mut ga = Tensor::zeros(sa);
                let mut gb = Tensor::zeros(sb);
                {
                    let (gad, gbd) = (ga.data_mut(), gb.data_mut());
                    for_each_broadcast(node.value.shape(), sa, sb, |o, i, j| {
                        gad[i] += gd[o] * vb[j];
                        gbd[j] += gd[o] * va[i];
                    });
                }
                self.acc(grads, *a, ga);
                self.acc(grads, *b, gb);
            }
            Op::Scale(x, s) => {
                let mut gx = g.clone();
                gx.scale(*s);
                self.acc(grads, *x, gx);
            }
            Op::AddScalar(x) | Op::Reshape(x) => {
                let gx = Tensor::new(self.shape(*x), gd.to_vec()).expect("same length");
                self.acc(grads, *x, gx);
            }
            Op::Conv2d { x, w, b, pad } => {
                let (c, h, wd) = self.value(*x).dims3().expect("rank 3");
                let ws = self.shape(*w);
                let (o, k) = (ws[0], ws[2]);
                let (_, oh, ow) = node.value.dims3().expect("rank 3");
                let s = oh * ow;
                let q = c * k * k;
                let cols = im2col(self.value(*x).data(), c, h, wd, k, *pad);
                if self.needs(*w) {
                    let mut gw = Tensor::zeros(ws);
                    tensor::matmul_nt_acc(gd, &cols, gw.data_mut(), o, s, q);
                    self.acc(grads, *w, gw);
                }
                if let Some(b) = b {
                    if self.needs(*b) {
                        let gb = Tensor::from_fn(&[o], |oc| gd[oc * s..(oc + 1) * s].iter().sum());
                        self.acc(grads, *b, gb);
                    }
                }
                if self.needs(*x) {
                    let mut dcols = vec![0.0; q * s];
                    tensor::matmul_tn_acc(self.value(*w).data(), gd, &mut dcols, o, q, s);
                    let mut gx = Tensor::zeros(&[c, h, wd]);
                    col2im(&dcols, gx.data_mut(), c, h, wd, k, *pad);
                    self.acc(grads, *x, gx);
                }
            }
            Op::AvgPool { x, k } => {
                let (c, h, w) = self.value(*x).dims3().expect("rank 3");
                let (oh, ow) = (h / k, w / k);
                let inv = 1.0 / (k * k) as f64;
                let gx = Tensor::from_fn(&[c, h, w], |i| {
                    let (ci, r, cc) = (i / (h * w), (i / w) % h, i % w);
                    gd[ci * oh * ow + (r / k) * ow + cc / k] * inv
                });
                self.acc(grads, *x, gx);
            }
            Op::Upsample2(x) => {
                let (c, h, w) = self.value(*x).dims3().expect("rank 3");
                let (oh, ow) = (2 * h, 2 * w);
                let mut gx = Tensor::zeros(&[c, h, w]);
                {
                    let gxd = gx.data_mut();
                    for ci in 0..c {
                        for i in 0..oh {
                            for j in 0..ow {
                                gxd[ci * h * w + (i / 2) * w + j / 2] += gd[ci * oh * ow + i * ow + j];
                            }
                        }
                    }
                }
                self.acc(grads, *x, gx);
            }
            Op::Concat(xs) => {
                let mut off = 0;
                for &x in xs {
                    let n = self.value(x).len();
                    if self.needs(x) {
                        let gx = Tensor::new(self.shape(x), gd[off..off + n].to_vec()).expect("len");
                        self.acc(grads, x, gx);
                    }
                    off += n;
                }
            }
            Op::Silu(x) => {
                let xv = self.value(*x).data();
                let gx = Tensor::from_fn(self.shape(*x), |i| {
                    let s = sigmoid(xv[i]);
                    gd[i] * s * (1.0 + xv[i] * (1.0 - s))
                });
                self.acc(grads, *x, gx);
            }
            Op::Sigmoid(x) => {
                let y = node.value.data();
                let gx = Tensor::from_fn(self.shape(*x), |i| gd[i] * y[i] * (1.0 - y[i]));
                self.acc(grads, *x, gx);
            }
            Op::InstanceNorm { x, gamma, beta } => {
                let (c, h, w) = self.value(*x).dims3().expect("rank 3");
                let n = h * w;
                let xv = self.value(*x).data();
                let gv = self.value(*gamma).data();
                let mut gx = Tensor::zeros(&[c, h, w]);
                let mut gg = Tensor::zeros(&[c]);
                let mut gb = Tensor::zeros(&[c]);
                for ci in 0..c {
                    let (xhat, inv_std) = normalize_group(&xv[ci * n..(ci + 1) * n]);
                    let gslice = &gd[ci * n..(ci + 1) * n];
                    gg.data_mut()[ci] = gslice.iter().zip(&xhat).map(|(a, b)| a * b).sum();
                    gb.data_mut()[ci] = gslice.iter().sum();
                    let dxhat: Vec<f64> = gslice.iter().map(|v| v * gv[ci]).collect();
                    normalize_group_backward(&xhat, inv_std, &dxhat, &mut gx.data_mut()[ci * n..(ci + 1) * n]);
                }
                self.acc(grads, *x, gx);
                self.acc(grads, *gamma, gg);
                self.acc(grads, *beta, gb);
            }
            Op::LayerNorm { x, gamma, beta } => {
                let (xhat, inv_std) = normalize_group(self.value(*x).data());
                let gv = self.value(*gamma).data();
                let shape = self.shape(*x);
                let gg = Tensor::from_fn(self.shape(*gamma), |i| gd[i] * xhat[i]);
                let gb = Tensor::new(self.shape(*beta), gd.to_vec()).expect("len");
                let dxhat: Vec<f64> = gd.iter().zip(gv).map(|(a, b)| a * b).collect();
                let mut gx = Tensor::zeros(shape);
                normalize_group_backward(&xhat, inv_std, &dxhat, gx.data_mut());
                self.acc(grads, *x, gx);
                self.acc(grads, *gamma, gg);
                self.acc(grads, *beta, gb);
            }
            Op::Softmax { x, axis } => {
                let shape = node.value.shape();
                let (outer, len, inner) = axis_split(shape, *axis);
                let y = node.value.data();
                let mut gx = Tensor::zeros(shape);
                {
                    let gxd = gx.data_mut();
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |k: usize| o * len * inner + k * inner + i;
                            let dotp: f64 = (0..len).map(|k| gd[at(k)] * y[at(k)]).sum();
                            for k in 0..len {
                                gxd[at(k)] = y[at(k)] * (gd[at(k)] - dotp);
                            }
                        }
                    }
                }
                self.acc(grads, *x, gx);
            }
            Op::Transpose(x) => {
                let (r, c) = (self.shape(*x)[0], self.shape(*x)[1]);
                // g is [c, r]
                let gx = Tensor::from_fn(&[r, c], |i| gd[(i % c) * r + i / c]);
                self.acc(grads, *x, gx);
            }
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                if self.needs(*a) {
                    let mut ga = Tensor::zeros(&[m, k]);
                    tensor::matmul_nt_acc(gd, self.value(*b).data(), ga.data_mut(), m, n, k);
                    self.acc(grads, *a, ga);
                }
                if self.needs(*b) {
                    let mut gb = Tensor::zeros(&[k, n]);
                    tensor::matmul_tn_acc(self.value(*a).data(), gd, gb.data_mut(), m, k, n);
                    self.acc(grads, *b, gb);
                }
            }
            Op::SliceCols { x, start } => {
                let (r, c) = (self.shape(*x)[0], self.shape(*x)[1]);
                let len = node.value.shape()[1];
                let mut gx = Tensor::zeros(&[r, c]);
                for i in 0..r {
                    gx.data_mut()[i * c + start..i * c + start + len].copy_from_slice(&gd[i * len..(i + 1) * len]);
                }
                self.acc(grads, *x, gx);
            }
            Op::ConcatCols(xs) => {
                let (r, total) = (node.value.shape()[0], node.value.shape()[1]);
                let mut off = 0;
                for &x in xs {
                    let c = self.shape(x)[1];
                    if self.needs(x) {
                        let gx = Tensor::from_fn(&[r, c], |i| gd[(i / c) * total + off + i % c]);
                        self.acc(grads, x, gx);
                    }
                    off += c;
                }
            }
            Op::Gather { table, idx } => {
                let mut gt = Tensor::zeros(self.shape(*table));
                for (o, &i) in idx.iter().enumerate() {
                    gt.data_mut()[i] += gd[o];
                }
                self.acc(grads, *table, gt);
            }
            Op::SpatialMean(x) => {
                let (c, h, w) = self.value(*x).dims3().expect("rank 3");
                let n = h * w;
                let gx = Tensor::from_fn(&[c, h, w], |i| gd[i / n] / n as f64);
                self.acc(grads, *x, gx);
            }
            Op::ChannelStats(x) => {
                let (c, h, w) = self.value(*x).dims3().expect("rank 3");
                let n = h * w;
                let xv = self.value(*x).data();
                let y = node.value.data();
                let gx = Tensor::from_fn(&[c, h, w], |i| {
                    let p = i % n;
                    let (mean, std) = (y[p], y[n + p]);
                    gd[p] / c as f64 + gd[n + p] * (xv[i] - mean) / (c as f64 * std)
                });
                self.acc(grads, *x, gx);
            }
            Op::Linear { x, w, b } => {
                let n = self.value(*x).len();
                let m = node.value.len();
                let (xv, wv) = (self.value(*x).data(), self.value(*w).data());
                if self.needs(*x) {
                    let mut gx = vec![0.0; n];
                    tensor::matmul_acc(gd, wv, &mut gx, 1, m, n);
                    self.acc(grads, *x, Tensor::new(self.shape(*x), gx).expect("len"));
                }
                if self.needs(*w) {
                    let gw = Tensor::from_fn(&[m, n], |i| gd[i / n] * xv[i % n]);
                    self.acc(grads, *w, gw);
                }
                self.acc(grads, *b, g.clone());
            }
            Op::L2Normalize(x) => {
                let xv = self.value(*x).data();
                let norm = xv.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
                let y = node.value.data();
                let yg = tensor::dot(y, gd);
                let gx = Tensor::from_fn(self.shape(*x), |i| (gd[i] - y[i] * yg) / norm);
                self.acc(grads, *x, gx);
            }
            Op::FftLogMag(x) => {
                let (c, h, w) = self.value(*x).dims3().expect("rank 3");
                let n = h * w;
                let xv = self.value(*x).data();
                let mut gx = Vec::with_capacity(c * n);
                for ci in 0..c {
                    gx.extend(fourier::log_magnitude_plane_backward(
                        &xv[ci * n..(ci + 1) * n],
                        &gd[ci * n..(ci + 1) * n],
                        h,
                        w,
                    ));
                }
                self.acc(grads, *x, Tensor::new(&[c, h, w], gx).expect("len"));
            }
            Op::SoftArgmax { x, temperature, cell } => {
                let s = self.shape(*x);
                let w = s[s.len() - 1];
                let p = self.value(*x).data();
                let a = 1.0 / temperature;
                let (_, pmax, ssum) = sharpen(p, *temperature);
                let (xs, ys) = (node.value.data()[0], node.value.data()[1]);
                let gx = Tensor::from_fn(s, |i| {
                    let (r, c) = (i / w, i % w);
                    let cx = (c as f64 + 0.5) * cell;
                    let cy = (r as f64 + 0.5) * cell;
                    let ratio = if a == 1.0 {
                        1.0 / (pmax * ssum)
                    } else {
                        (p[i].max(1e-300) / pmax).powf(a - 1.0) / (pmax * ssum)
                    };
                    a * ratio * (gd[0] * (cx - xs) + gd[1] * (cy - ys))
                });
                self.acc(grads, *x, gx);
            }
            Op::Huber { x, target, delta } => {
                let xv = self.value(*x).data();
                let gx = Tensor::from_fn(&[2], |i| gd[0] * (xv[i] - target[i]).clamp(-delta, *delta));
                self.acc(grads, *x, gx);
            }
            Op::Kl { pred, target, eps, order } => {
                let pv = self.value(*pred).data();
                let tv = target.data();
                let gx = Tensor::from_fn(self.shape(*pred), |i| match order {
                    KlOrder::TargetWeighted => -gd[0] * tv[i] / (pv[i] + eps),
                    KlOrder::PredWeighted => {
                        gd[0] * ((pv[i] + eps).ln() - (tv[i] + eps).ln() + pv[i] / (pv[i] + eps))
                    }
                });
                self.acc(grads, *pred, gx);
            }
            Op::Bce { p, label, eps } => {
                let pv = self.value(*p).item();
                let d = -label / (pv + eps) + (1.0 - label) / (1.0 - pv + eps);
                self.acc(grads, *p, Tensor::new(self.shape(*p), vec![gd[0] * d]).expect("len"));
            }
            Op::SelectColumn { x, row, col } => {
                let (k, h, w) = self.value(*x).dims3().expect("rank 3");
                let mut gx = Tensor::zeros(&[k, h, w]);
                for i in 0..k {
                    gx.data_mut()[i * h * w + row * w + col] = gd[i];
                }
                self.acc(grads, *x, gx);
            }
            Op::Sum(x) => {
                self.acc(grads, *x, Tensor::filled(self.shape(*x), gd[0]));
            }
            Op::DotConst { x, weights } => {
                let gx = Tensor::from_fn(self.shape(*x), |i| gd[0] * weights.data()[i]);
                self.acc(grads, *x, gx);
            }
            Op::SqDist { x, target } => {
                let xv = self.value(*x).data();
                let gx = Tensor::from_fn(self.shape(*x), |i| 2.0 * gd[0] * (xv[i] - target.data()[i]));
                self.acc(grads, *x, gx);
            }
        }
    }

    fn acc(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if self.needs(v) {
            accumulate_owned(grads, v, g);
        }
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: &Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(g),
        slot => *slot = Some(g.clone()),
    }
}

fn accumulate_owned(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot => *slot = Some(g),
    }
}

pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Collects parameter gradients into store order; parameters not reached
    /// by the backward pass get zeros.
    pub fn param_grads(&self, graph: &Graph<'_>) -> ParamGrads {
        let mut out = ParamGrads::zeros_like(graph.params);
        for (pid, var) in graph.param_vars.iter().enumerate() {
            if let Some(var) = var {
                if let Some(g) = &self.grads[var.0] {
                    out.grads[pid] = g.clone();
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Central-difference check of `f(leaf)` against the tape gradient.
    fn check(shape: &[usize], build: impl Fn(&mut Graph, Var) -> Var) {
        let store = ParamStore::new();
        let x0 = Tensor::from_fn(shape, |i| (i as f64 * 0.731 + 0.17).sin() * 1.3);
        let mut g = Graph::new(&store);
        let x = g.leaf(x0.clone());
        let y = build(&mut g, x);
        let scalar = {
            let w = Tensor::from_fn(g.shape(y), |i| (i as f64 * 1.37).cos());
            g.dot_const(y, w).unwrap()
        };
        let grads = g.backward(scalar);
        let analytic = grads.wrt(x).unwrap().clone();
        let eval = |t: Tensor| {
            let mut g = Graph::new(&store);
            let x = g.leaf(t);
            let y = build(&mut g, x);
            let w = Tensor::from_fn(g.shape(y), |i| (i as f64 * 1.37).cos());
            let s = g.dot_const(y, w).unwrap();
            g.value(s).item()
        };
        let h = 1e-5;
        for i in 0..x0.len() {
            let mut plus = x0.clone();
            plus.data_mut()[i] += h;
            let mut minus = x0.clone();
            minus.data_mut()[i] -= h;
            let fd = (eval(plus) - eval(minus)) / (2.0 * h);
            let a = analytic.data()[i];
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-8);
            assert!(rel < 1e-5, "coord {i}: analytic {a} vs fd {fd}");
        }
    }

    #[test]
    fn grad_conv_pool_upsample() {
        check(&[2, 4, 4], |g, x| {
            let w = g.input(Tensor::from_fn(&[3, 2, 3, 3], |i| (i as f64 * 0.3).sin()));
            let y = g.conv2d(x, w, None, 1).unwrap();
            let p = g.avg_pool(y, 2).unwrap();
            g.upsample2(p).unwrap()
        });
    }

    #[test]
    fn grad_norms_and_activations() {
        check(&[3, 2, 2], |g, x| {
            let gamma = g.input(Tensor::from_fn(&[3], |i| 1.0 + i as f64 * 0.1));
            let beta = g.input(Tensor::from_fn(&[3], |i| i as f64 * 0.2));
            let n = g.instance_norm(x, gamma, beta).unwrap();
            let s = g.silu(n);
            let st = g.channel_stats(s).unwrap();
            g.sigmoid(st)
        });
        check(&[6], |g, x| {
            let gamma = g.input(Tensor::filled(&[6], 1.2));
            let beta = g.input(Tensor::filled(&[6], 0.1));
            let n = g.layer_norm(x, gamma, beta).unwrap();
            g.l2_normalize(n)
        });
    }

    #[test]
    fn grad_matrix_ops() {
        check(&[3, 4], |g, x| {
            let xt = g.transpose(x).unwrap();
            let m = g.matmul(x, xt).unwrap();
            let sm = g.softmax(m, 1).unwrap();
            let a = g.slice_cols(x, 1, 2).unwrap();
            let b = g.concat_cols(&[a, sm]).unwrap();
            let idx: Vec<usize> = (0..6).map(|i| (i * 5) % 15).collect();
            let gth = g.gather(b, idx, &[2, 3]).unwrap();
            g.mul(gth, gth).unwrap()
        });
    }

    #[test]
    fn grad_broadcast_and_fft() {
        check(&[2, 4, 4], |g, x| {
            let gate = g.input(Tensor::from_fn(&[1, 4, 4], |i| 0.5 + 0.01 * i as f64));
            let y = g.mul(x, gate).unwrap();
            let cg = g.spatial_mean(y).unwrap();
            let cg = g.reshape(cg, &[2, 1, 1]).unwrap();
            let z = g.add(y, cg).unwrap();
            g.fft_log_magnitude(z).unwrap()
        });
    }

    #[test]
    fn grad_heads_and_losses() {
        check(&[1, 3, 4], |g, x| {
            let p = g.reshape(x, &[12]).unwrap();
            let p = g.softmax(p, 0).unwrap();
            let p = g.reshape(p, &[1, 3, 4]).unwrap();
            let xy = g.soft_argmax(p, 0.5, 2.0).unwrap();
            let hub = g.huber(xy, [3.0, 1.0], 1.0).unwrap();
            let target = Tensor::from_fn(&[12], |i| (i + 1) as f64 / 78.0);
            let kl = g.kl(p, target.clone(), 1e-9, KlOrder::TargetWeighted).unwrap();
            let kl2 = g.kl(p, target, 1e-9, KlOrder::PredWeighted).unwrap();
            let s = g.add(hub, kl).unwrap();
            g.add(s, kl2).unwrap()
        });
        check(&[4], |g, x| {
            let w = g.input(Tensor::from_fn(&[1, 4], |i| 0.3 * i as f64 - 0.4));
            let b = g.input(Tensor::scalar(0.1));
            let l = g.linear(x, w, b).unwrap();
            let p = g.sigmoid(l);
            let bce = g.bce(p, 1.0, 1e-9);
            let sq = g.sq_dist(x, Tensor::filled(&[4], 0.25)).unwrap();
            g.add(bce, sq).unwrap()
        });
    }

    #[test]
    fn shared_param_nodes_accumulate() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::new(&[2], vec![2.0, 3.0]).unwrap());
        let mut g = Graph::new(&store);
        let a = g.param(id);
        let b = g.param(id);
        assert_eq!(a, b);
        let prod = g.mul(a, b).unwrap();
        let s = g.sum(prod);
        let pg = g.backward(s).param_grads(&g);
        assert_eq!(pg.get(id).data(), &[4.0, 6.0]);
    }

    #[test]
    fn shape_errors_name_the_axis() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let x = g.input(Tensor::zeros(&[3, 4, 4]));
        let w = g.input(Tensor::zeros(&[2, 5, 3, 3]));
        let err = g.conv2d(x, w, None, 1).unwrap_err().to_string();
        assert!(err.contains("conv input channels"), "{err}");
    }
}
