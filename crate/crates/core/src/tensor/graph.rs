//! Recording graph (Wengert tape) and the differentiable op set.
//!
//! Nodes are appended in execution order, so reverse index order is a valid
//! topological order for the backward sweep. Every op validates shapes up
//! front and checks its output for non-finite values.

use super::kernels::{
    conv_geometry, conv_t_geometry, gemm, pack_conv_t_weight, pack_conv_weight, unpack_conv_t_weight,
    unpack_conv_weight, ConvParams, Geometry,
};
use super::Tensor;
use crate::error::{CstError, Result};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Storage precision of recorded values. Gradients are always accumulated in
/// 64-bit; in `F32` mode every forward value is rounded through `f32`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Precision {
    F32,
    #[default]
    F64,
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul {
        a: Var,
        b: Var,
        batch: usize,
        n: usize,
        k: usize,
        m: usize,
        tb: bool,
    },
    Conv {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geo: Geometry,
        packed: Vec<f64>,
    },
    ConvT {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geo: Geometry,
        packed: Vec<f64>,
    },
    AvgPool {
        input: Var,
        k: usize,
    },
    LayerNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Softmax {
        input: Var,
        axis: usize,
    },
    LogSumExp {
        input: Var,
        axis: usize,
    },
    Gelu(Var),
    Sigmoid(Var),
    Relu(Var),
    Gather {
        input: Var,
        idx: Vec<usize>,
    },
    Scatter {
        input: Var,
        idx: Vec<usize>,
    },
    Reshape(Var),
    Permute {
        input: Var,
        axes: Vec<usize>,
    },
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Slice {
        input: Var,
        axis: usize,
        start: usize,
    },
    Expand(Var),
    Sum(Var),
    Mean(Var),
    Square(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recording context for one forward/backward pass.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    precision: Precision,
    grads: Option<Vec<Option<Vec<f64>>>>,
}

/// `(outer, len, inner)` extents around `axis`.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Visit every multi-index of `shape` in row-major order, passing the source
/// offset computed from `src_strides`.
fn for_each_offset(shape: &[usize], src_strides: &[usize], mut f: impl FnMut(usize, usize)) {
    let n: usize = shape.iter().product();
    if n == 0 {
        return;
    }
    let rank = shape.len();
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for lin in 0..n {
        f(lin, off);
        for d in (0..rank).rev() {
            idx[d] += 1;
            off += src_strides[d];
            if idx[d] < shape[d] {
                break;
            }
            off -= src_strides[d] * shape[d];
            idx[d] = 0;
        }
    }
}

fn permute_data(data: &[f64], shape: &[usize], axes: &[usize]) -> (Vec<f64>, Vec<usize>) {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let src: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let mut out = vec![0.0; data.len()];
    for_each_offset(&out_shape, &src, |lin, off| out[lin] = data[off]);
    (out, out_shape)
}

fn std_normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn std_normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn with_precision(precision: Precision) -> Self {
        Graph {
            precision,
            ..Graph::default()
        }
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, parents: &[Var]) -> Result<Var> {
        if !value.all_finite() {
            return Err(CstError::Numeric { op: name });
        }
        if self.grads.is_some() {
            return Err(CstError::Graph("graph already differentiated".into()));
        }
        let value = match self.precision {
            Precision::F64 => value,
            Precision::F32 => value.map(|v| v as f32 as f64),
        };
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Leaf node. Parameters and probed inputs set `requires_grad`.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        let value = match self.precision {
            Precision::F64 => value,
            Precision::F32 => value.map(|v| v as f32 as f64),
        };
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
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

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(CstError::dims(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (x, y) = (self.value(a), self.value(b));
        Tensor::from_fn(x.shape(), |i| f(x.data()[i], y.data()[i]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = self.zip(a, b, |x, y| x + y);
        self.push("add", v, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = self.zip(a, b, |x, y| x - y);
        self.push("sub", v, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let v = self.zip(a, b, |x, y| x * y);
        self.push("mul", v, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let v = self.value(a).map(|x| x * s);
        self.push("scale", v, Op::Scale(a, s), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Result<Var> {
        let v = self.value(a).map(|x| x + s);
        self.push("add_scalar", v, Op::AddScalar(a), &[a])
    }

    fn matmul_impl(&mut self, a: Var, b: Var, tb: bool, batched: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let rank = if batched { 3 } else { 2 };
        let off = rank - 2;
        if sa.len() != rank || sb.len() != rank || (batched && sa[0] != sb[0]) {
            return Err(CstError::dims("matmul", &sa, &sb));
        }
        let batch = if batched { sa[0] } else { 1 };
        let (n, k) = (sa[off], sa[off + 1]);
        let (kb, m) = if tb {
            (sb[off + 1], sb[off])
        } else {
            (sb[off], sb[off + 1])
        };
        if k != kb {
            return Err(CstError::dims("matmul", &sa, &sb));
        }
        let mut out = vec![0.0; batch * n * m];
        gemm(
            batch,
            n,
            k,
            m,
            self.value(a).data(),
            false,
            self.value(b).data(),
            tb,
            &mut out,
        );
        let shape = if batched { vec![batch, n, m] } else { vec![n, m] };
        let v = Tensor::new(&shape, out)?;
        self.push(
            "matmul",
            v,
            Op::MatMul {
                a,
                b,
                batch,
                n,
                k,
                m,
                tb,
            },
            &[a, b],
        )
    }

    /// `[n, k] x [k, m]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false, false)
    }

    /// `[n, k] x [m, k]^T`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true, false)
    }

    /// `[B, n, k] x [B, k, m]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false, true)
    }

    /// `[B, n, k] x [B, m, k]^T`.
    pub fn bmm_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true, true)
    }

    /// Channels-last conv2d: input `[H, W, Cin]`, weight `[Cout, Cin/groups, kh, kw]`.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Option<Var>, p: ConvParams) -> Result<Var> {
        let geo = conv_geometry(self.shape(input), self.shape(weight), p)?;
        let packed = pack_conv_weight(self.value(weight).data(), &geo);
        let mut out = vec![0.0; geo.hs * geo.ws * geo.cs];
        if let Some(b) = bias {
            if self.shape(b) != [geo.cs] {
                return Err(CstError::dims("conv2d bias", self.shape(b), &[geo.cs]));
            }
            let bv = self.value(b).data();
            for site in out.chunks_mut(geo.cs) {
                site.copy_from_slice(bv);
            }
        }
        geo.gather(self.value(input).data(), &packed, &mut out);
        let v = Tensor::new(&[geo.hs, geo.ws, geo.cs], out)?;
        let mut parents = vec![input, weight];
        parents.extend(bias);
        self.push(
            "conv2d",
            v,
            Op::Conv {
                input,
                weight,
                bias,
                geo,
                packed,
            },
            &parents,
        )
    }

    /// Channels-last transposed conv2d: input `[H, W, Cin]`, weight `[Cin, Cout/groups, kh, kw]`.
    pub fn conv_transpose2d(&mut self, input: Var, weight: Var, bias: Option<Var>, p: ConvParams) -> Result<Var> {
        let geo = conv_t_geometry(self.shape(input), self.shape(weight), p)?;
        let packed = pack_conv_t_weight(self.value(weight).data(), &geo);
        let mut out = vec![0.0; geo.hb * geo.wb * geo.cb];
        if let Some(b) = bias {
            if self.shape(b) != [geo.cb] {
                return Err(CstError::dims("conv_transpose2d bias", self.shape(b), &[geo.cb]));
            }
            let bv = self.value(b).data();
            for site in out.chunks_mut(geo.cb) {
                site.copy_from_slice(bv);
            }
        }
        geo.scatter(self.value(input).data(), &packed, &mut out);
        let v = Tensor::new(&[geo.hb, geo.wb, geo.cb], out)?;
        let mut parents = vec![input, weight];
        parents.extend(bias);
        self.push(
            "conv_transpose2d",
            v,
            Op::ConvT {
                input,
                weight,
                bias,
                geo,
                packed,
            },
            &parents,
        )
    }

    /// Non-overlapping `k x k` average pooling on `[H, W, C]`.
    pub fn avg_pool2d(&mut self, input: Var, k: usize) -> Result<Var> {
        let s = self.shape(input).to_vec();
        if s.len() != 3 || k == 0 || !s[0].is_multiple_of(k) || !s[1].is_multiple_of(k) {
            return Err(CstError::dims("avg_pool2d", &s, &[k, k]));
        }
        let (h, w, c) = (s[0], s[1], s[2]);
        let (ho, wo) = (h / k, w / k);
        let x = self.value(input).data();
        let mut out = vec![0.0; ho * wo * c];
        let norm = 1.0 / (k * k) as f64;
        for y in 0..h {
            for xx in 0..w {
                let o = ((y / k) * wo + xx / k) * c;
                let i = (y * w + xx) * c;
                for ch in 0..c {
                    out[o + ch] += x[i + ch] * norm;
                }
            }
        }
        let v = Tensor::new(&[ho, wo, c], out)?;
        self.push("avg_pool2d", v, Op::AvgPool { input, k }, &[input])
    }

    /// Normalizes over the last (channel) axis at every site, eps = 1e-5.
    pub fn layer_norm(&mut self, input: Var, gamma: Var, beta: Var) -> Result<Var> {
        const EPS: f64 = 1e-5;
        let s = self.shape(input).to_vec();
        let c = *s.last().ok_or_else(|| CstError::dims("layer_norm", &s, &[]))?;
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(CstError::dims("layer_norm", &s, self.shape(gamma)));
        }
        let x = self.value(input).data();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let sites = x.len() / c;
        let mut xhat = vec![0.0; x.len()];
        let mut rstd = vec![0.0; sites];
        let mut out = vec![0.0; x.len()];
        for site in 0..sites {
            let row = &x[site * c..][..c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let r = 1.0 / (var + EPS).sqrt();
            rstd[site] = r;
            for ch in 0..c {
                let xh = (row[ch] - mean) * r;
                xhat[site * c + ch] = xh;
                out[site * c + ch] = xh * g[ch] + b[ch];
            }
        }
        let v = Tensor::new(&s, out)?;
        self.push(
            "layer_norm",
            v,
            Op::LayerNorm {
                input,
                gamma,
                beta,
                xhat,
                rstd,
            },
            &[input, gamma, beta],
        )
    }

    pub fn softmax(&mut self, input: Var, axis: usize) -> Result<Var> {
        let s = self.shape(input).to_vec();
        if axis >= s.len() {
            return Err(CstError::dims("softmax", &s, &[axis]));
        }
        let (outer, len, inner) = axis_split(&s, axis);
        let x = self.value(input).data();
        let mut out = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * len + j) * inner + i;
                let mx = (0..len).map(|j| x[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for j in 0..len {
                    let e = (x[at(j)] - mx).exp();
                    out[at(j)] = e;
                    z += e;
                }
                for j in 0..len {
                    out[at(j)] /= z;
                }
            }
        }
        let v = Tensor::new(&s, out)?;
        self.push("softmax", v, Op::Softmax { input, axis }, &[input])
    }

    /// `log(sum(exp(x)))` along `axis`, which is removed from the shape.
    pub fn logsumexp(&mut self, input: Var, axis: usize) -> Result<Var> {
        let s = self.shape(input).to_vec();
        if axis >= s.len() {
            return Err(CstError::dims("logsumexp", &s, &[axis]));
        }
        let (outer, len, inner) = axis_split(&s, axis);
        let x = self.value(input).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * len + j) * inner + i;
                let mx = (0..len).map(|j| x[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = (0..len).map(|j| (x[at(j)] - mx).exp()).sum();
                out[o * inner + i] = mx + z.ln();
            }
        }
        let mut shape = s.clone();
        shape.remove(axis);
        let v = Tensor::new(&shape, out)?;
        self.push("logsumexp", v, Op::LogSumExp { input, axis }, &[input])
    }

    /// Exact (erf-based) GELU.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(|x| x * std_normal_cdf(x));
        self.push("gelu", v, Op::Gelu(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(|x| 1.0 / (1.0 + (-x).exp()));
        self.push("sigmoid", v, Op::Sigmoid(a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(|x| x.max(0.0));
        self.push("relu", v, Op::Relu(a), &[a])
    }

    /// Selects rows (first axis) by index: `[N, ...] -> [idx.len(), ...]`.
    pub fn gather(&mut self, input: Var, idx: &[usize]) -> Result<Var> {
        let s = self.shape(input).to_vec();
        if s.is_empty() || idx.iter().any(|&i| i >= s[0]) {
            return Err(CstError::dims("gather", &s, &[idx.len()]));
        }
        let row: usize = s[1..].iter().product();
        let x = self.value(input).data();
        let mut out = Vec::with_capacity(idx.len() * row);
        for &i in idx {
            out.extend_from_slice(&x[i * row..][..row]);
        }
        let mut shape = s.clone();
        shape[0] = idx.len();
        let v = Tensor::new(&shape, out)?;
        self.push(
            "gather",
            v,
            Op::Gather {
                input,
                idx: idx.to_vec(),
            },
            &[input],
        )
    }

    /// Scatter-adds rows into a zero tensor with `rows` rows: `out[idx[i]] += x[i]`.
    pub fn scatter(&mut self, input: Var, idx: &[usize], rows: usize) -> Result<Var> {
        let s = self.shape(input).to_vec();
        if s.is_empty() || s[0] != idx.len() || idx.iter().any(|&i| i >= rows) {
            return Err(CstError::dims("scatter", &s, &[idx.len(), rows]));
        }
        let row: usize = s[1..].iter().product();
        let x = self.value(input).data();
        let mut out = vec![0.0; rows * row];
        for (src, &dst) in idx.iter().enumerate() {
            for (o, &v) in out[dst * row..][..row].iter_mut().zip(&x[src * row..][..row]) {
                *o += v;
            }
        }
        let mut shape = s.clone();
        shape[0] = rows;
        let v = Tensor::new(&shape, out)?;
        self.push(
            "scatter",
            v,
            Op::Scatter {
                input,
                idx: idx.to_vec(),
            },
            &[input],
        )
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).clone().reshape(shape)?;
        self.push("reshape", v, Op::Reshape(a), &[a])
    }

    pub fn permute(&mut self, input: Var, axes: &[usize]) -> Result<Var> {
        let s = self.shape(input).to_vec();
        let mut seen = vec![false; s.len()];
        if axes.len() != s.len()
            || axes
                .iter()
                .any(|&a| a >= s.len() || std::mem::replace(&mut seen[a], true))
        {
            return Err(CstError::dims("permute", &s, axes));
        }
        let (out, shape) = permute_data(self.value(input).data(), &s, axes);
        let v = Tensor::new(&shape, out)?;
        self.push(
            "permute",
            v,
            Op::Permute {
                input,
                axes: axes.to_vec(),
            },
            &[input],
        )
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .shape(
                *inputs
                    .first()
                    .ok_or_else(|| CstError::Graph("concat of nothing".into()))?,
            )
            .to_vec();
        if axis >= first.len() {
            return Err(CstError::dims("concat", &first, &[axis]));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible =
                s.len() == first.len() && s.iter().zip(&first).enumerate().all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(CstError::dims("concat", &first, s));
            }
            total += s[axis];
        }
        let mut shape = first.clone();
        shape[axis] = total;
        let (outer, _, inner) = axis_split(&shape, axis);
        let mut out = vec![0.0; shape.iter().product()];
        let mut offset = 0;
        for &v in inputs {
            let len = self.shape(v)[axis];
            let x = self.value(v).data();
            for o in 0..outer {
                let dst = (o * total + offset) * inner;
                out[dst..dst + len * inner].copy_from_slice(&x[o * len * inner..][..len * inner]);
            }
            offset += len;
        }
        let v = Tensor::new(&shape, out)?;
        self.push(
            "concat",
            v,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            inputs,
        )
    }

    /// `[start, start + len)` along `axis`.
    pub fn slice(&mut self, input: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(input).to_vec();
        if axis >= s.len() || start + len > s[axis] {
            return Err(CstError::dims("slice", &s, &[axis, start, len]));
        }
        let (outer, full, inner) = axis_split(&s, axis);
        let x = self.value(input).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            out.extend_from_slice(&x[(o * full + start) * inner..][..len * inner]);
        }
        let mut shape = s.clone();
        shape[axis] = len;
        let v = Tensor::new(&shape, out)?;
        self.push("slice", v, Op::Slice { input, axis, start }, &[input])
    }

    /// Repeats unit axes to reach `shape` (same rank, explicit only).
    pub fn expand(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        let s = self.shape(input).to_vec();
        if s.len() != shape.len() || s.iter().zip(shape).any(|(&a, &b)| a != b && a != 1) {
            return Err(CstError::dims("expand", &s, shape));
        }
        let src: Vec<usize> = strides(&s)
            .iter()
            .zip(&s)
            .map(|(&st, &d)| if d == 1 { 0 } else { st })
            .collect();
        let x = self.value(input).data();
        let mut out = vec![0.0; shape.iter().product()];
        for_each_offset(shape, &src, |lin, off| out[lin] = x[off]);
        let v = Tensor::new(shape, out)?;
        self.push("expand", v, Op::Expand(input), &[input])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let v = Tensor::scalar(self.value(a).sum());
        self.push("sum", v, Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let v = Tensor::scalar(t.sum() / t.len() as f64);
        self.push("mean", v, Op::Mean(a), &[a])
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(|x| x * x);
        self.push("square", v, Op::Square(a), &[a])
    }

    /// Mean of squared differences.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let sq = self.square(d)?;
        self.mean(sq)
    }

    /// Gradient of the last `backward` with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let grads = self.grads.as_ref()?;
        let shape = self.shape(v);
        Some(match &grads[v.0] {
            Some(g) => Tensor::new(shape, g.clone()).expect("grad shape"),
            None => Tensor::zeros(shape),
        })
    }

    /// Reverse sweep from a scalar loss. May be called once per recording.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.grads.is_some() {
            return Err(CstError::Graph("backward already ran on this graph".into()));
        }
        if self.value(loss).len() != 1 {
            return Err(CstError::Graph(format!(
                "loss must be scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        if !self.nodes[loss.0].requires_grad {
            return Err(CstError::Graph("loss is detached from every leaf".into()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        grads.resize(self.nodes.len(), None);
        self.grads = Some(grads);
        Ok(())
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let val = |v: Var| nodes[v.0].value.data();
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.len()]);
            f(slot);
        };
        let out = nodes[i].value.data();
        match &nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, &mut |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g));
                acc(*b, &mut |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g));
                acc(*b, &mut |s| s.iter_mut().zip(g).for_each(|(s, g)| *s -= g));
            }
            Op::Mul(a, b) => {
                let (x, y) = (val(*a), val(*b));
                acc(*a, &mut |s| {
                    for j in 0..s.len() {
                        s[j] += g[j] * y[j];
                    }
                });
                acc(*b, &mut |s| {
                    for j in 0..s.len() {
                        s[j] += g[j] * x[j];
                    }
                });
            }
            Op::Scale(a, c) => acc(*a, &mut |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += c * g)),
            Op::AddScalar(a) => acc(*a, &mut |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g)),
            Op::MatMul {
                a,
                b,
                batch,
                n,
                k,
                m,
                tb,
            } => {
                let (av, bv) = (val(*a), val(*b));
                let (batch, n, k, m) = (*batch, *n, *k, *m);
                if *tb {
                    // C = A B^T, B is [m, k]
                    acc(*a, &mut |s| gemm(batch, n, m, k, g, false, bv, false, s));
                    acc(*b, &mut |s| gemm(batch, m, n, k, g, true, av, false, s));
                } else {
                    acc(*a, &mut |s| gemm(batch, n, m, k, g, false, bv, true, s));
                    acc(*b, &mut |s| gemm(batch, k, n, m, av, true, g, false, s));
                }
            }
            Op::Conv {
                input,
                weight,
                bias,
                geo,
                packed,
            } => {
                acc(*input, &mut |s| geo.scatter(g, packed, s));
                acc(*weight, &mut |s| {
                    let mut dwt = vec![0.0; packed.len()];
                    geo.weight_grad(val(*input), g, &mut dwt);
                    for (s, d) in s.iter_mut().zip(unpack_conv_weight(&dwt, geo)) {
                        *s += d;
                    }
                });
                if let Some(b) = bias {
                    acc(*b, &mut |s| {
                        for site in g.chunks(geo.cs) {
                            s.iter_mut().zip(site).for_each(|(s, g)| *s += g);
                        }
                    });
                }
            }
            Op::ConvT {
                input,
                weight,
                bias,
                geo,
                packed,
            } => {
                acc(*input, &mut |s| geo.gather(g, packed, s));
                acc(*weight, &mut |s| {
                    let mut dwt = vec![0.0; packed.len()];
                    geo.weight_grad(g, val(*input), &mut dwt);
                    for (s, d) in s.iter_mut().zip(unpack_conv_t_weight(&dwt, geo)) {
                        *s += d;
                    }
                });
                if let Some(b) = bias {
                    acc(*b, &mut |s| {
                        for site in g.chunks(geo.cb) {
                            s.iter_mut().zip(site).for_each(|(s, g)| *s += g);
                        }
                    });
                }
            }
            Op::AvgPool { input, k } => {
                let s_in = nodes[input.0].value.shape();
                let (h, w, c) = (s_in[0], s_in[1], s_in[2]);
                let wo = w / k;
                let norm = 1.0 / (k * k) as f64;
                acc(*input, &mut |s| {
                    for y in 0..h {
                        for x in 0..w {
                            let o = ((y / k) * wo + x / k) * c;
                            let i = (y * w + x) * c;
                            for ch in 0..c {
                                s[i + ch] += g[o + ch] * norm;
                            }
                        }
                    }
                });
            }
            Op::LayerNorm {
                input,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let gm = val(*gamma);
                let c = gm.len();
                acc(*gamma, &mut |s| {
                    for (site, gs) in g.chunks(c).enumerate() {
                        for ch in 0..c {
                            s[ch] += gs[ch] * xhat[site * c + ch];
                        }
                    }
                });
                acc(*beta, &mut |s| {
                    for gs in g.chunks(c) {
                        s.iter_mut().zip(gs).for_each(|(s, g)| *s += g);
                    }
                });
                acc(*input, &mut |s| {
                    for (site, gs) in g.chunks(c).enumerate() {
                        let xh = &xhat[site * c..][..c];
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for ch in 0..c {
                            let d = gs[ch] * gm[ch];
                            m1 += d;
                            m2 += d * xh[ch];
                        }
                        m1 /= c as f64;
                        m2 /= c as f64;
                        for ch in 0..c {
                            let d = gs[ch] * gm[ch];
                            s[site * c + ch] += rstd[site] * (d - m1 - xh[ch] * m2);
                        }
                    }
                });
            }
            Op::Softmax { input, axis } => {
                let (outer, len, inner) = axis_split(nodes[i].value.shape(), *axis);
                acc(*input, &mut |s| {
                    for o in 0..outer {
                        for ii in 0..inner {
                            let at = |j: usize| (o * len + j) * inner + ii;
                            let dot: f64 = (0..len).map(|j| g[at(j)] * out[at(j)]).sum();
                            for j in 0..len {
                                s[at(j)] += out[at(j)] * (g[at(j)] - dot);
                            }
                        }
                    }
                });
            }
            Op::LogSumExp { input, axis } => {
                let x = val(*input);
                let (outer, len, inner) = axis_split(nodes[input.0].value.shape(), *axis);
                acc(*input, &mut |s| {
                    for o in 0..outer {
                        for ii in 0..inner {
                            let r = o * inner + ii;
                            for j in 0..len {
                                let at = (o * len + j) * inner + ii;
                                s[at] += g[r] * (x[at] - out[r]).exp();
                            }
                        }
                    }
                });
            }
            Op::Gelu(a) => {
                let x = val(*a);
                acc(*a, &mut |s| {
                    for j in 0..s.len() {
                        s[j] += g[j] * (std_normal_cdf(x[j]) + x[j] * std_normal_pdf(x[j]));
                    }
                });
            }
            Op::Sigmoid(a) => acc(*a, &mut |s| {
                for j in 0..s.len() {
                    s[j] += g[j] * out[j] * (1.0 - out[j]);
                }
            }),
            Op::Relu(a) => {
                let x = val(*a);
                acc(*a, &mut |s| {
                    for j in 0..s.len() {
                        if x[j] > 0.0 {
                            s[j] += g[j];
                        }
                    }
                });
            }
            Op::Gather { input, idx } => {
                let row = if idx.is_empty() { 0 } else { g.len() / idx.len() };
                acc(*input, &mut |s| {
                    for (src, &dst) in idx.iter().enumerate() {
                        for (s, &gv) in s[dst * row..][..row].iter_mut().zip(&g[src * row..][..row]) {
                            *s += gv;
                        }
                    }
                });
            }
            Op::Scatter { input, idx } => {
                let row = if idx.is_empty() {
                    0
                } else {
                    nodes[input.0].value.len() / idx.len()
                };
                acc(*input, &mut |s| {
                    for (dst, &src) in idx.iter().enumerate() {
                        for (s, &gv) in s[dst * row..][..row].iter_mut().zip(&g[src * row..][..row]) {
                            *s += gv;
                        }
                    }
                });
            }
            Op::Reshape(a) => acc(*a, &mut |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g)),
            Op::Permute { input, axes } => {
                let mut inv = vec![0; axes.len()];
                for (d, &a) in axes.iter().enumerate() {
                    inv[a] = d;
                }
                let (back, _) = permute_data(g, nodes[i].value.shape(), &inv);
                acc(*input, &mut |s| s.iter_mut().zip(&back).for_each(|(s, g)| *s += g));
            }
            Op::Concat { inputs, axis } => {
                let shape = nodes[i].value.shape();
                let (outer, total, inner) = axis_split(shape, *axis);
                let mut offset = 0;
                for &v in inputs {
                    let len = nodes[v.0].value.shape()[*axis];
                    acc(v, &mut |s| {
                        for o in 0..outer {
                            let src = &g[(o * total + offset) * inner..][..len * inner];
                            for (s, &gv) in s[o * len * inner..][..len * inner].iter_mut().zip(src) {
                                *s += gv;
                            }
                        }
                    });
                    offset += len;
                }
            }
            Op::Slice { input, axis, start } => {
                let (outer, full, inner) = axis_split(nodes[input.0].value.shape(), *axis);
                let len = nodes[i].value.shape()[*axis];
                acc(*input, &mut |s| {
                    for o in 0..outer {
                        let dst = &mut s[(o * full + start) * inner..][..len * inner];
                        for (d, &gv) in dst.iter_mut().zip(&g[o * len * inner..][..len * inner]) {
                            *d += gv;
                        }
                    }
                });
            }
            Op::Expand(a) => {
                let s_in = nodes[a.0].value.shape();
                let src: Vec<usize> = strides(s_in)
                    .iter()
                    .zip(s_in)
                    .map(|(&st, &d)| if d == 1 { 0 } else { st })
                    .collect();
                let shape = nodes[i].value.shape();
                acc(*a, &mut |s| for_each_offset(shape, &src, |lin, off| s[off] += g[lin]));
            }
            Op::Sum(a) => acc(*a, &mut |s| s.iter_mut().for_each(|s| *s += g[0])),
            Op::Mean(a) => {
                let n = nodes[a.0].value.len() as f64;
                acc(*a, &mut |s| s.iter_mut().for_each(|s| *s += g[0] / n));
            }
            Op::Square(a) => {
                let x = val(*a);
                acc(*a, &mut |s| {
                    for j in 0..s.len() {
                        s[j] += 2.0 * x[j] * g[j];
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
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn identity_matmul() {
        let mut g = Graph::new();
        let i = g.constant(Tensor::eye(2));
        let a = g.constant(t(&[2, 2], &[1.0, -2.0, 3.5, 4.0]));
        let c = g.matmul(i, a).unwrap();
        assert_eq!(g.value(c), g.value(a));
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[3]));
        let y = g.softmax(x, 0).unwrap();
        for &v in g.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut g = Graph::new();
        let x = g.param(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let s = g.sum(x).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), Tensor::ones(&[2, 3]));
    }

    #[test]
    fn square_sum_gradient() {
        let mut g = Graph::new();
        let x = g.param(t(&[2], &[1.0, 2.0]));
        let y = g.mul(x, x).unwrap();
        let s = g.sum(y).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_twice_is_an_error() {
        let mut g = Graph::new();
        let x = g.param(Tensor::ones(&[2]));
        let s = g.sum(x).unwrap();
        g.backward(s).unwrap();
        assert!(matches!(g.backward(s), Err(CstError::Graph(_))));
    }

    #[test]
    fn backward_rejects_non_scalar_and_detached_losses() {
        let mut g = Graph::new();
        let x = g.param(Tensor::ones(&[2]));
        assert!(g.backward(x).is_err());
        let mut g = Graph::new();
        let c = g.constant(Tensor::ones(&[2]));
        let s = g.sum(c).unwrap();
        assert!(matches!(g.backward(s), Err(CstError::Graph(_))));
    }

    #[test]
    fn shape_mismatch_reports_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::ones(&[2, 3]));
        let b = g.constant(Tensor::ones(&[3, 2]));
        match g.add(a, b) {
            Err(CstError::Dimension { lhs, rhs, .. }) => {
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![3, 2]);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn non_finite_output_names_the_op() {
        let mut g = Graph::new();
        let a = g.constant(t(&[1], &[f64::MAX]));
        match g.scale(a, 10.0) {
            Err(CstError::Numeric { op }) => assert_eq!(op, "scale"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn f32_precision_rounds_values() {
        let mut g = Graph::with_precision(Precision::F32);
        let a = g.constant(t(&[1], &[0.1]));
        assert_eq!(g.value(a).data()[0], 0.1f32 as f64);
    }

    #[test]
    fn permute_then_inverse_is_identity() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_fn(&[2, 3, 4], |i| i as f64));
        let p = g.permute(x, &[2, 0, 1]).unwrap();
        assert_eq!(g.shape(p), &[4, 2, 3]);
        // element (c, a, b) == x(a, b, c)
        assert_eq!(g.value(p).data()[(2 + 1) * 3 + 2], ((3 + 2) * 4 + 1) as f64);
        let q = g.permute(p, &[1, 2, 0]).unwrap();
        assert_eq!(g.value(q), g.value(x));
    }

    #[test]
    fn concat_and_slice_are_inverse() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::from_fn(&[2, 2, 3], |i| i as f64));
        let b = g.constant(Tensor::from_fn(&[2, 2, 1], |i| -(i as f64)));
        let c = g.concat(&[a, b], 2).unwrap();
        assert_eq!(g.shape(c), &[2, 2, 4]);
        let a2 = g.slice(c, 2, 0, 3).unwrap();
        let b2 = g.slice(c, 2, 3, 1).unwrap();
        assert_eq!(g.value(a2), g.value(a));
        assert_eq!(g.value(b2), g.value(b));
    }

    #[test]
    fn expand_repeats_unit_axes() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2, 1], &[1.0, 2.0]));
        let e = g.expand(a, &[2, 3]).unwrap();
        assert_eq!(g.value(e).data(), &[1.0, 1.0, 1.0, 2.0, 2.0, 2.0]);
    }

    #[test]
    fn logsumexp_matches_direct_formula() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2, 2], &[0.0, 1.0, 2.0, -1.0]));
        let l = g.logsumexp(a, 1).unwrap();
        let v = g.value(l).data();
        assert!((v[0] - (1.0f64 + 1f64.exp()).ln()).abs() < 1e-14);
        assert!((v[1] - (2f64.exp() + (-1f64).exp()).ln()).abs() < 1e-14);
    }
}
