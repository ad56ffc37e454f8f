//! Define-by-run reverse-mode differentiation.
//!
//! Every operation appends a node holding its forward value and whatever the
//! backward rule needs. [`Tape::backward`] walks the nodes in reverse order,
//! so the tape is append-only until then. Non-finite values are rejected at
//! every op boundary.

use crate::tensor::{check_finite, Result, Tensor, TensorError};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug)]
enum BinKind {
    Add,
    Sub,
    Mul,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Binary { kind: BinKind, a: Var, b: Var },
    Scale { x: Var, factor: f64 },
    MatMul { a: Var, b: Var, trans_b: bool },
    Transpose { x: Var },
    Reshape { x: Var },
    Narrow { x: Var, axis: usize, start: usize },
    Concat { inputs: Vec<Var>, axis: usize },
    Sum { x: Var },
    Mean { x: Var },
    Softmax { x: Var, axis: usize },
    Sigmoid { x: Var },
    Relu { x: Var },
    Gelu { x: Var },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    AvgPool2x { x: Var },
    Upsample { x: Var, mode: Resize },
    Patchify { x: Var, patch: usize },
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<f64> },
    GateMix { gate: Var, a: Var, b: Var },
}

/// Interpolation used by [`Tape::upsample`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Resize {
    Nearest,
    /// Half-pixel-centred bilinear interpolation with edge clamping.
    Bilinear,
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    backward_done: bool,
}

fn shape_err(op: &'static str, detail: String) -> TensorError {
    TensorError::Shape { op, detail }
}

/// `(outer, len, inner)` split of `shape` around `axis`.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// `c (+)= op(a) * op(b)` for row-major buffers, where `op` optionally
/// transposes. `a` is logically `[m, k]`, `b` is `[k, n]`.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the asserts above bound every index reachable through the
    // given dimensions and strides to the provided slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Source taps for one output coordinate along one axis.
fn resize_taps(src: usize, dst: usize, mode: Resize) -> Vec<(usize, usize, f64)> {
    let ratio = src as f64 / dst as f64;
    (0..dst)
        .map(|o| match mode {
            Resize::Nearest => {
                let i = ((o as f64 * ratio).floor() as usize).min(src - 1);
                (i, i, 0.0)
            }
            Resize::Bilinear => {
                let pos = ((o as f64 + 0.5) * ratio - 0.5).clamp(0.0, (src - 1) as f64);
                let i0 = pos.floor() as usize;
                let i1 = (i0 + 1).min(src - 1);
                (i0, i1, pos - i0 as f64)
            }
        })
        .collect()
}

/// Flat source index for each element of a patchified `[h, w, c]` tensor.
fn patch_gather_index(h: usize, w: usize, c: usize, p: usize) -> Vec<usize> {
    let (gh, gw) = (h / p, w / p);
    let mut idx = Vec::with_capacity(h * w * c);
    for by in 0..gh {
        for bx in 0..gw {
            for py in 0..p {
                for px in 0..p {
                    let base = ((by * p + py) * w + bx * p + px) * c;
                    idx.extend(base..base + c);
                }
            }
        }
    }
    idx
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn num_leaves(&self) -> usize {
        self.nodes.iter().filter(|n| matches!(n.op, Op::Leaf)).count()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_checked(
        &mut self,
        name: &'static str,
        shape: Vec<usize>,
        data: Vec<f64>,
        op: Op,
        inputs: &[Var],
    ) -> Result<Var> {
        check_finite(name, &data)?;
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push(Tensor::from_parts(shape, data), op, rg))
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Differentiable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    fn binary(&mut self, kind: BinKind, a: Var, b: Var) -> Result<Var> {
        let name = match kind {
            BinKind::Add => "add",
            BinKind::Sub => "sub",
            BinKind::Mul => "mul",
        };
        let (sa, sb) = (self.shape(a), self.shape(b));
        let out_shape = if sa.ends_with(sb) {
            sa.to_vec()
        } else if sb.ends_with(sa) {
            sb.to_vec()
        } else {
            return Err(shape_err(name, format!("cannot broadcast {sa:?} with {sb:?}")));
        };
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let (na, nb) = (da.len(), db.len());
        let n: usize = out_shape.iter().product();
        let f = match kind {
            BinKind::Add => |x: f64, y: f64| x + y,
            BinKind::Sub => |x: f64, y: f64| x - y,
            BinKind::Mul => |x: f64, y: f64| x * y,
        };
        let data = if na == nb {
            da.iter().zip(db).map(|(&x, &y)| f(x, y)).collect()
        } else {
            (0..n).map(|i| f(da[i % na], db[i % nb])).collect()
        };
        self.push_checked(name, out_shape, data, Op::Binary { kind, a, b }, &[a, b])
    }

    /// Elementwise sum; a suffix-shaped operand is broadcast over the
    /// other's leading axes.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Mul, a, b)
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let v = self.value(x);
        let data = v.data().iter().map(|&e| e * factor).collect();
        let shape = v.shape().to_vec();
        self.push_checked("scale", shape, data, Op::Scale { x, factor }, &[x])
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let name = if trans_b { "matmul_t" } else { "matmul" };
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 {
            return Err(shape_err(name, format!("expected matrices, got {sa:?} and {sb:?}")));
        }
        let (m, k) = (sa[0], sa[1]);
        let (kb, n) = if trans_b { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        if k != kb {
            return Err(shape_err(name, format!("inner axes differ: {sa:?} x {sb:?}")));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            trans_b,
            &mut out,
            false,
        );
        self.push_checked(name, vec![m, n], out, Op::MatMul { a, b, trans_b }, &[a, b])
    }

    /// `a · b` for `a: [m, k]`, `b: [k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ` for `a: [m, k]`, `b: [n, k]`, without materialising `bᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 {
            return Err(shape_err("transpose", format!("expected a matrix, got {s:?}")));
        }
        let (r, c) = (s[0], s[1]);
        let d = self.value(x).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = d[i * c + j];
            }
        }
        self.push_checked("transpose", vec![c, r], out, Op::Transpose { x }, &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).reshaped(shape)?;
        let rg = self.requires_grad(x);
        Ok(self.push(v, Op::Reshape { x }, rg))
    }

    /// Slice `len` entries starting at `start` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() {
            return Err(TensorError::Axis {
                op: "narrow",
                axis,
                rank: s.len(),
            });
        }
        if start + len > s[axis] {
            return Err(shape_err(
                "narrow",
                format!("range {start}..{} exceeds axis length {}", start + len, s[axis]),
            ));
        }
        let (outer, full, inner) = axis_split(&s, axis);
        let d = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            out.extend_from_slice(&d[base..base + len * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        self.push_checked("narrow", shape, out, Op::Narrow { x, axis, start }, &[x])
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| shape_err("concat", "no inputs".into()))?;
        let s0 = self.shape(*first).to_vec();
        if axis >= s0.len() {
            return Err(TensorError::Axis {
                op: "concat",
                axis,
                rank: s0.len(),
            });
        }
        let mut total = 0;
        for v in inputs {
            let s = self.shape(*v);
            let compatible = s.len() == s0.len()
                && s.iter()
                    .zip(&s0)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(shape_err("concat", format!("{s:?} incompatible with {s0:?}")));
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_split(&s0, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for v in inputs {
                let len = self.shape(*v)[axis];
                let d = self.value(*v).data();
                out.extend_from_slice(&d[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = s0;
        shape[axis] = total;
        let op = Op::Concat {
            inputs: inputs.to_vec(),
            axis,
        };
        self.push_checked("concat", shape, out, op, inputs)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        self.push_checked("sum", vec![], vec![s], Op::Sum { x }, &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let d = self.value(x).data();
        let m = d.iter().sum::<f64>() / d.len() as f64;
        self.push_checked("mean", vec![], vec![m], Op::Mean { x }, &[x])
    }

    /// Numerically stable softmax along `axis` (max-subtracted).
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() {
            return Err(TensorError::Axis {
                op: "softmax",
                axis,
                rank: s.len(),
            });
        }
        let (outer, len, inner) = axis_split(&s, axis);
        let d = self.value(x).data();
        let mut out = vec![0.0; d.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * len + j) * inner + i;
                let max = (0..len).map(|j| d[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for j in 0..len {
                    let e = (d[at(j)] - max).exp();
                    out[at(j)] = e;
                    total += e;
                }
                for j in 0..len {
                    out[at(j)] /= total;
                }
            }
        }
        self.push_checked("softmax", s, out, Op::Softmax { x, axis }, &[x])
    }

    fn unary(&mut self, name: &'static str, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let v = self.value(x);
        let data = v.data().iter().map(|&e| f(e)).collect();
        let shape = v.shape().to_vec();
        self.push_checked(name, shape, data, op, &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary("sigmoid", x, sigmoid, Op::Sigmoid { x })
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary("relu", x, |e| e.max(0.0), Op::Relu { x })
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.unary("gelu", x, gelu, Op::Gelu { x })
    }

    /// Normalises over the last axis, then applies `gamma`/`beta` of shape `[C]`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let c = *s
            .last()
            .ok_or_else(|| shape_err("layer_norm", "scalar input".into()))?;
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(shape_err(
                "layer_norm",
                format!("affine params must be [{c}], got {:?} / {:?}", self.shape(gamma), self.shape(beta)),
            ));
        }
        let d = self.value(x).data();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let rows = d.len() / c;
        let mut xhat = vec![0.0; d.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; d.len()];
        for r in 0..rows {
            let row = &d[r * c..(r + 1) * c];
            let mu = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|e| (e - mu) * (e - mu)).sum::<f64>() / c as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..c {
                let xh = (row[j] - mu) * rs;
                xhat[r * c + j] = xh;
                out[r * c + j] = xh * g[j] + b[j];
            }
        }
        let op = Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            rstd,
        };
        self.push_checked("layer_norm", s, out, op, &[x, gamma, beta])
    }

    /// `x · w + b` for `x: [n, cin]`, `w: [cin, cout]`, `b: [cout]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add(y, b)
    }

    /// 1×1 convolution over a channels-last map of any leading shape, as a
    /// reshaped matrix multiply with `w: [cin, cout]` and `b: [cout]`.
    pub fn conv1x1(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let cin = *s.last().ok_or_else(|| shape_err("conv1x1", "scalar input".into()))?;
        let cout = self.shape(w).get(1).copied().unwrap_or(0);
        let rows = s.iter().product::<usize>() / cin.max(1);
        let flat = self.reshape(x, &[rows, cin])?;
        let y = self.linear(flat, w, b)?;
        let mut out_shape = s;
        *out_shape.last_mut().expect("non-scalar") = cout;
        self.reshape(y, &out_shape)
    }

    fn hwc(&self, name: &'static str, x: Var) -> Result<(usize, usize, usize)> {
        match *self.shape(x) {
            [h, w, c] => Ok((h, w, c)),
            ref s => Err(shape_err(name, format!("expected [h, w, c], got {s:?}"))),
        }
    }

    /// 2×2 average pooling with stride 2 on `[h, w, c]`.
    pub fn avg_pool2x(&mut self, x: Var) -> Result<Var> {
        let (h, w, c) = self.hwc("avg_pool2x", x)?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(shape_err("avg_pool2x", format!("odd spatial size {h}x{w}")));
        }
        let d = self.value(x).data();
        let (oh, ow) = (h / 2, w / 2);
        let mut out = vec![0.0; oh * ow * c];
        for y in 0..oh {
            for xx in 0..ow {
                for ch in 0..c {
                    let at = |dy: usize, dx: usize| d[((2 * y + dy) * w + 2 * xx + dx) * c + ch];
                    out[(y * ow + xx) * c + ch] =
                        0.25 * (at(0, 0) + at(0, 1) + at(1, 0) + at(1, 1));
                }
            }
        }
        self.push_checked("avg_pool2x", vec![oh, ow, c], out, Op::AvgPool2x { x }, &[x])
    }

    /// Resizes `[h, w, c]` to `[out_h, out_w, c]`.
    pub fn upsample(&mut self, x: Var, out_h: usize, out_w: usize, mode: Resize) -> Result<Var> {
        let (h, w, c) = self.hwc("upsample", x)?;
        if h == 0 || w == 0 || out_h == 0 || out_w == 0 {
            return Err(shape_err("upsample", "empty spatial size".into()));
        }
        let (ty, tx) = (resize_taps(h, out_h, mode), resize_taps(w, out_w, mode));
        let d = self.value(x).data();
        let mut out = vec![0.0; out_h * out_w * c];
        for (oy, &(y0, y1, wy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, wx)) in tx.iter().enumerate() {
                let o = (oy * out_w + ox) * c;
                for ch in 0..c {
                    let p = |y: usize, xx: usize| d[(y * w + xx) * c + ch];
                    out[o + ch] = (1.0 - wy) * ((1.0 - wx) * p(y0, x0) + wx * p(y0, x1))
                        + wy * ((1.0 - wx) * p(y1, x0) + wx * p(y1, x1));
                }
            }
        }
        self.push_checked("upsample", vec![out_h, out_w, c], out, Op::Upsample { x, mode }, &[x])
    }

    /// Non-overlapping `patch × patch` blocks of `[h, w, c]` flattened to
    /// `[(h/p)·(w/p), p·p·c]`, rows in raster order.
    pub fn patchify(&mut self, x: Var, patch: usize) -> Result<Var> {
        let (h, w, c) = self.hwc("patchify", x)?;
        if patch == 0 || h % patch != 0 || w % patch != 0 {
            return Err(shape_err("patchify", format!("{h}x{w} not divisible by {patch}")));
        }
        let d = self.value(x).data();
        let out = patch_gather_index(h, w, c, patch)
            .into_iter()
            .map(|i| d[i])
            .collect();
        let shape = vec![(h / patch) * (w / patch), patch * patch * c];
        self.push_checked("patchify", shape, out, Op::Patchify { x, patch }, &[x])
    }

    /// Mean softmax cross-entropy of `logits: [n, k]` against class ids.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (n, k) = match *self.shape(logits) {
            [n, k] => (n, k),
            ref s => return Err(shape_err("cross_entropy", format!("expected [n, k], got {s:?}"))),
        };
        if targets.len() != n || n == 0 {
            return Err(shape_err(
                "cross_entropy",
                format!("{} targets for {n} rows", targets.len()),
            ));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= k) {
            return Err(shape_err("cross_entropy", format!("class {t} out of range 0..{k}")));
        }
        let d = self.value(logits).data();
        let mut probs = vec![0.0; n * k];
        let mut loss = 0.0;
        for r in 0..n {
            let row = &d[r * k..(r + 1) * k];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|e| (e - max).exp()).sum::<f64>().ln();
            for j in 0..k {
                probs[r * k + j] = (row[j] - lse).exp();
            }
            loss += lse - row[targets[r]];
        }
        let op = Op::CrossEntropy {
            logits,
            targets: targets.to_vec(),
            probs,
        };
        self.push_checked("cross_entropy", vec![], vec![loss / n as f64], op, &[logits])
    }

    /// `gate ⊙ a + (1 − gate) ⊙ b`, clamped to `[min(a, b), max(a, b)]`
    /// so rounding never leaves the segment.
    pub fn gate_mix(&mut self, gate: Var, a: Var, b: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if self.shape(b) != s.as_slice() || self.shape(gate) != s.as_slice() {
            return Err(shape_err(
                "gate_mix",
                format!("gate {:?}, a {s:?}, b {:?}", self.shape(gate), self.shape(b)),
            ));
        }
        let (g, da, db) = (
            self.value(gate).data(),
            self.value(a).data(),
            self.value(b).data(),
        );
        let out = (0..da.len())
            .map(|i| {
                let (x, y) = (da[i], db[i]);
                (y + g[i] * (x - y)).clamp(x.min(y), x.max(y))
            })
            .collect();
        self.push_checked("gate_mix", s, out, Op::GateMix { gate, a, b }, &[gate, a, b])
    }

    /// Gradient of the last backward pass with respect to `v`, if `v` is a
    /// differentiable leaf.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let node = self.nodes.get(v.0)?;
        let g = self.grads.get(v.0)?.as_ref()?;
        Some(Tensor::from_parts(node.value.shape().to_vec(), g.clone()))
    }

    /// Clears gradients so `backward` may run again.
    pub fn zero_grad(&mut self) {
        self.grads.clear();
        self.backward_done = false;
    }

    /// Populates `d loss / d leaf` for every differentiable leaf.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(TensorError::BackwardTwice);
        }
        let s = self.shape(loss);
        if !s.is_empty() && s.iter().product::<usize>() != 1 {
            return Err(TensorError::NotScalar(s.to_vec()));
        }
        if !self.requires_grad(loss) {
            return Err(TensorError::Detached);
        }
        self.backward_done = true;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                check_finite("backward", &g)?;
                grads[idx] = Some(g);
                continue;
            }
            self.propagate(idx, &g, &mut grads);
        }
        self.grads = grads;
        Ok(())
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let val = |v: Var| nodes[v.0].value.data();
        let out = nodes[idx].value.data();
        // Accumulates into an input's gradient buffer, allocating on first use.
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.numel()]);
            f(slot);
        };
        match &nodes[idx].op {
            Op::Leaf => {}
            Op::Binary { kind, a, b } => {
                let (a, b, kind) = (*a, *b, *kind);
                let (da, db) = (val(a), val(b));
                let (na, nb) = (da.len(), db.len());
                acc(a, &mut |ga| match kind {
                    BinKind::Add | BinKind::Sub => {
                        for (i, gi) in g.iter().enumerate() {
                            ga[i % na] += gi;
                        }
                    }
                    BinKind::Mul => {
                        for (i, gi) in g.iter().enumerate() {
                            ga[i % na] += gi * db[i % nb];
                        }
                    }
                });
                acc(b, &mut |gb| match kind {
                    BinKind::Add => {
                        for (i, gi) in g.iter().enumerate() {
                            gb[i % nb] += gi;
                        }
                    }
                    BinKind::Sub => {
                        for (i, gi) in g.iter().enumerate() {
                            gb[i % nb] -= gi;
                        }
                    }
                    BinKind::Mul => {
                        for (i, gi) in g.iter().enumerate() {
                            gb[i % nb] += gi * da[i % na];
                        }
                    }
                });
            }
            Op::Scale { x, factor } => acc(*x, &mut |gx| {
                for (o, gi) in gx.iter_mut().zip(g) {
                    *o += gi * factor;
                }
            }),
            Op::MatMul { a, b, trans_b } => {
                let (sa, sb) = (nodes[a.0].value.shape(), nodes[b.0].value.shape());
                let (m, k) = (sa[0], sa[1]);
                let n = if *trans_b { sb[0] } else { sb[1] };
                let (da, db) = (val(*a), val(*b));
                // C = A·B: dA = G·Bᵀ, dB = Aᵀ·G.  C = A·Bᵀ: dA = G·B, dB = Gᵀ·A.
                acc(*a, &mut |ga| gemm(m, n, k, g, false, db, !*trans_b, ga, true));
                acc(*b, &mut |gb| {
                    if *trans_b {
                        gemm(n, m, k, g, true, da, false, gb, true)
                    } else {
                        gemm(k, m, n, da, true, g, false, gb, true)
                    }
                });
            }
            Op::Transpose { x } => {
                let s = nodes[x.0].value.shape();
                let (r, c) = (s[0], s[1]);
                acc(*x, &mut |gx| {
                    for i in 0..r {
                        for j in 0..c {
                            gx[i * c + j] += g[j * r + i];
                        }
                    }
                });
            }
            Op::Reshape { x } => acc(*x, &mut |gx| {
                for (o, gi) in gx.iter_mut().zip(g) {
                    *o += gi;
                }
            }),
            Op::Narrow { x, axis, start } => {
                let s = nodes[x.0].value.shape();
                let (outer, full, inner) = axis_split(s, *axis);
                let len = nodes[idx].value.shape()[*axis];
                acc(*x, &mut |gx| {
                    for o in 0..outer {
                        let dst = (o * full + start) * inner;
                        let src = o * len * inner;
                        for t in 0..len * inner {
                            gx[dst + t] += g[src + t];
                        }
                    }
                });
            }
            Op::Concat { inputs, axis } => {
                let total = nodes[idx].value.shape()[*axis];
                let (outer, _, inner) = axis_split(nodes[idx].value.shape(), *axis);
                let mut offset = 0;
                for v in inputs {
                    let len = nodes[v.0].value.shape()[*axis];
                    acc(*v, &mut |gv| {
                        for o in 0..outer {
                            let src = (o * total + offset) * inner;
                            for t in 0..len * inner {
                                gv[o * len * inner + t] += g[src + t];
                            }
                        }
                    });
                    offset += len;
                }
            }
            Op::Sum { x } => acc(*x, &mut |gx| {
                for o in gx.iter_mut() {
                    *o += g[0];
                }
            }),
            Op::Mean { x } => {
                let n = nodes[x.0].value.numel() as f64;
                acc(*x, &mut |gx| {
                    for o in gx.iter_mut() {
                        *o += g[0] / n;
                    }
                })
            }
            Op::Softmax { x, axis } => {
                let (outer, len, inner) = axis_split(nodes[idx].value.shape(), *axis);
                acc(*x, &mut |gx| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |j: usize| (o * len + j) * inner + i;
                            let dot: f64 = (0..len).map(|j| g[at(j)] * out[at(j)]).sum();
                            for j in 0..len {
                                gx[at(j)] += out[at(j)] * (g[at(j)] - dot);
                            }
                        }
                    }
                });
            }
            Op::Sigmoid { x } => acc(*x, &mut |gx| {
                for ((o, gi), y) in gx.iter_mut().zip(g).zip(out) {
                    *o += gi * y * (1.0 - y);
                }
            }),
            Op::Relu { x } => {
                let dx = val(*x);
                acc(*x, &mut |gx| {
                    for ((o, gi), xi) in gx.iter_mut().zip(g).zip(dx) {
                        if *xi > 0.0 {
                            *o += gi;
                        }
                    }
                })
            }
            Op::Gelu { x } => {
                let dx = val(*x);
                acc(*x, &mut |gx| {
                    for ((o, gi), xi) in gx.iter_mut().zip(g).zip(dx) {
                        *o += gi * gelu_grad(*xi);
                    }
                })
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let c = nodes[gamma.0].value.numel();
                let gm = val(*gamma);
                let rows = xhat.len() / c;
                acc(*gamma, &mut |gg| {
                    for r in 0..rows {
                        for j in 0..c {
                            gg[j] += g[r * c + j] * xhat[r * c + j];
                        }
                    }
                });
                acc(*beta, &mut |gb| {
                    for r in 0..rows {
                        for j in 0..c {
                            gb[j] += g[r * c + j];
                        }
                    }
                });
                acc(*x, &mut |gx| {
                    let mut gxh = vec![0.0; c];
                    for r in 0..rows {
                        let (mut s1, mut s2) = (0.0, 0.0);
                        for j in 0..c {
                            gxh[j] = g[r * c + j] * gm[j];
                            s1 += gxh[j];
                            s2 += gxh[j] * xhat[r * c + j];
                        }
                        let k = rstd[r] / c as f64;
                        for j in 0..c {
                            gx[r * c + j] +=
                                k * (c as f64 * gxh[j] - s1 - xhat[r * c + j] * s2);
                        }
                    }
                });
            }
            Op::AvgPool2x { x } => {
                let s = nodes[x.0].value.shape();
                let (w, c) = (s[1], s[2]);
                let (oh, ow) = (s[0] / 2, w / 2);
                acc(*x, &mut |gx| {
                    for y in 0..oh {
                        for xx in 0..ow {
                            for ch in 0..c {
                                let gi = 0.25 * g[(y * ow + xx) * c + ch];
                                for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                                    gx[((2 * y + dy) * w + 2 * xx + dx) * c + ch] += gi;
                                }
                            }
                        }
                    }
                });
            }
            Op::Upsample { x, mode } => {
                let s = nodes[x.0].value.shape();
                let (h, w, c) = (s[0], s[1], s[2]);
                let so = nodes[idx].value.shape();
                let (out_h, out_w) = (so[0], so[1]);
                let (ty, tx) = (resize_taps(h, out_h, *mode), resize_taps(w, out_w, *mode));
                acc(*x, &mut |gx| {
                    for (oy, &(y0, y1, wy)) in ty.iter().enumerate() {
                        for (ox, &(x0, x1, wx)) in tx.iter().enumerate() {
                            let o = (oy * out_w + ox) * c;
                            for ch in 0..c {
                                let gi = g[o + ch];
                                let mut put = |y: usize, xx: usize, wgt: f64| {
                                    gx[(y * w + xx) * c + ch] += gi * wgt;
                                };
                                put(y0, x0, (1.0 - wy) * (1.0 - wx));
                                put(y0, x1, (1.0 - wy) * wx);
                                put(y1, x0, wy * (1.0 - wx));
                                put(y1, x1, wy * wx);
                            }
                        }
                    }
                });
            }
            Op::Patchify { x, patch } => {
                let s = nodes[x.0].value.shape();
                let index = patch_gather_index(s[0], s[1], s[2], *patch);
                acc(*x, &mut |gx| {
                    for (j, &i) in index.iter().enumerate() {
                        gx[i] += g[j];
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let n = targets.len();
                let k = probs.len() / n;
                let scale = g[0] / n as f64;
                acc(*logits, &mut |gl| {
                    for r in 0..n {
                        for j in 0..k {
                            let onehot = if targets[r] == j { 1.0 } else { 0.0 };
                            gl[r * k + j] += scale * (probs[r * k + j] - onehot);
                        }
                    }
                });
            }
            Op::GateMix { gate, a, b } => {
                let (dg, da, db) = (val(*gate), val(*a), val(*b));
                acc(*gate, &mut |gg| {
                    for i in 0..g.len() {
                        gg[i] += g[i] * (da[i] - db[i]);
                    }
                });
                acc(*a, &mut |ga| {
                    for i in 0..g.len() {
                        ga[i] += g[i] * dg[i];
                    }
                });
                acc(*b, &mut |gb| {
                    for i in 0..g.len() {
                        gb[i] += g[i] * (1.0 - dg[i]);
                    }
                });
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_hand_sum() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = tape.constant(t(&[2, 1], &[1.0, 1.0]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[3.0, 7.0]);
        assert_eq!(tape.shape(c), &[2, 1]);
    }

    #[test]
    fn identity_matmul_returns_input() {
        let mut tape = Tape::new();
        let x = t(&[2, 3], &[1.5, -2.0, 0.25, 4.0, 5.0, -6.0]);
        let i = tape.constant(Tensor::eye(2));
        let xv = tape.constant(x.clone());
        let y = tape.matmul(i, xv).unwrap();
        assert_eq!(tape.value(y), &x);
    }

    #[test]
    fn matmul_shape_mismatch() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        assert!(matches!(tape.matmul(a, b), Err(TensorError::Shape { .. })));
        assert!(tape.matmul_t(a, b).is_ok());
    }

    #[test]
    fn softmax_values() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[3], &[0.0, 0.0, 0.0]));
        let y = tape.softmax(x, 0).unwrap();
        for v in tape.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let x = tape.constant(t(&[2], &[1.0, 2.0]));
        let y = tape.softmax(x, 0).unwrap();
        let d = tape.value(y).data();
        assert!((d[0] - 0.26894).abs() < 1e-5);
        assert!((d[1] - 0.73106).abs() < 1e-5);
        assert!(matches!(tape.softmax(x, 1), Err(TensorError::Axis { .. })));
    }

    #[test]
    fn softmax_along_leading_axis() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2, 2], &[0.0, 5.0, 0.0, 5.0]));
        let y = tape.softmax(x, 0).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, 0.5, 0.5, 0.5]);
    }

    #[test]
    fn sigmoid_values() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[3], &[0.0, 2.0, -2.0]));
        let y = tape.sigmoid(x).unwrap();
        let d = tape.value(y).data();
        assert_eq!(d[0], 0.5);
        assert!((d[1] - 0.880797).abs() < 1e-6);
        assert!((d[1] + d[2] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn backward_of_sum_and_square() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[3], &[1.0, -2.0, 0.5]));
        let l = tape.sum(x).unwrap();
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[1.0, 1.0, 1.0]);

        let mut tape = Tape::new();
        let x = tape.param(t(&[3], &[1.0, -2.0, 0.5]));
        let sq = tape.mul(x, x).unwrap();
        let l = tape.sum(sq).unwrap();
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn backward_errors() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[2], &[1.0, 2.0]));
        assert!(matches!(tape.backward(x), Err(TensorError::NotScalar(_))));
        let c = tape.constant(t(&[2], &[1.0, 2.0]));
        let s = tape.sum(c).unwrap();
        assert!(matches!(tape.backward(s), Err(TensorError::Detached)));
        let l = tape.sum(x).unwrap();
        tape.backward(l).unwrap();
        assert!(matches!(tape.backward(l), Err(TensorError::BackwardTwice)));
        tape.zero_grad();
        assert!(tape.grad(x).is_none());
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[1.0, 1.0]);
    }

    #[test]
    fn broadcast_add_over_leading_axes() {
        let mut tape = Tape::new();
        let a = tape.param(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = tape.param(t(&[2], &[10.0, 20.0]));
        let c = tape.add(b, a).unwrap();
        assert_eq!(tape.value(c).data(), &[11.0, 22.0, 13.0, 24.0]);
        let l = tape.sum(c).unwrap();
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(b).unwrap().data(), &[2.0, 2.0]);
        let bad = tape.constant(Tensor::zeros(&[3]));
        assert!(tape.add(a, bad).is_err());
    }

    #[test]
    fn non_finite_rejected_at_op_boundary() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1], &[1e300]));
        assert!(matches!(tape.mul(x, x), Err(TensorError::NonFinite { op: "mul" })));
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::zeros(&[5, 4]));
        let l = tape.cross_entropy(x, &[0, 1, 2, 3, 0]).unwrap();
        assert!((tape.value(l).item() - 4f64.ln()).abs() < 1e-15);
        assert!(tape.cross_entropy(x, &[0, 1, 2, 3, 4]).is_err());
    }

    #[test]
    fn patchify_layout() {
        let mut tape = Tape::new();
        // 2x2 image, 1 channel, values = raster index
        let x = tape.constant(t(&[2, 4, 1], &[0., 1., 2., 3., 4., 5., 6., 7.]));
        let p = tape.patchify(x, 2).unwrap();
        assert_eq!(tape.shape(p), &[2, 4]);
        assert_eq!(tape.value(p).data(), &[0., 1., 4., 5., 2., 3., 6., 7.]);
    }

    #[test]
    fn resize_and_pool_shapes() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2, 2, 1], &[1., 2., 3., 4.]));
        let n = tape.upsample(x, 4, 4, Resize::Nearest).unwrap();
        assert_eq!(tape.value(n).get(&[3, 0, 0]), 3.0);
        let p = tape.avg_pool2x(n).unwrap();
        assert_eq!(tape.value(p).data(), &[1., 2., 3., 4.]);
        let b = tape.upsample(x, 4, 4, Resize::Bilinear).unwrap();
        // corners clamp, interior interpolates
        assert_eq!(tape.value(b).get(&[0, 0, 0]), 1.0);
        assert!((tape.value(b).get(&[1, 1, 0]) - 1.75).abs() < 1e-15);
        let c = tape.constant(Tensor::ones(&[3, 3, 1]));
        assert!(tape.avg_pool2x(c).is_err());
    }

    #[test]
    fn gate_mix_saturation_and_equal_inputs() {
        let mut tape = Tape::new();
        let g = tape.constant(Tensor::full(&[3], 1.0));
        let a = tape.constant(t(&[3], &[0.1, 0.7, -3.0]));
        let b = tape.constant(t(&[3], &[5.0, -1.0, 2.0]));
        let y = tape.gate_mix(g, a, b).unwrap();
        assert_eq!(tape.value(y), tape.value(a));
        let y = tape.gate_mix(g, b, b).unwrap();
        assert_eq!(tape.value(y), tape.value(b));
    }
}
