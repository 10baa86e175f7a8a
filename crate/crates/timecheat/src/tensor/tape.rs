use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

const LAYER_NORM_EPS: f64 = 1e-5;

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddScalar(Var),
    MulScalar(Var, f64),
    Matmul(Var, Var),
    Affine { x: Var, w: Var, b: Var },
    Transpose(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    GatherRows { x: Var, idx: Vec<usize> },
    SliceCols { x: Var, start: usize },
    Reshape(Var),
    Sin(Var),
    Cos(Var),
    Relu(Var),
    Exp(Var),
    Ln(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    SegmentSoftmax { x: Var, seg: Vec<usize> },
    SegmentSum { x: Var, seg: Vec<usize> },
    SumAll(Var),
    MeanAll(Var),
    SumAxis1(Var),
    MeanAxis0(Var),
    RepeatCols(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Records primitive operations applied during a forward pass so the
/// backward pass can replay them in exact reverse order.
///
/// A tape is single-threaded; separate tapes over shared read-only
/// parameter tensors may run concurrently.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// The forward value of a recorded variable.
    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Registers an input tensor (parameter or data) as a differentiable leaf.
    pub fn leaf(&mut self, t: Tensor) -> Result<Var> {
        if !t.all_finite() {
            return Err(Error::NonFinite { op: "leaf" });
        }
        Ok(self.push(t, Op::Leaf))
    }

    pub fn leaf_from(&mut self, t: &Tensor) -> Result<Var> {
        self.leaf(t.clone())
    }

    fn want_matrix(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        let t = self.value(v);
        if !t.is_matrix() {
            return Err(Error::BadShape {
                op,
                expected: "2-D tensor".into(),
                got: t.shape().to_vec(),
            });
        }
        Ok((t.rows(), t.cols()))
    }

    fn want_same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::ShapeMismatch {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        Ok(())
    }

    // ---- elementwise ----

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.want_same_shape("add", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        Ok(self.push(Tensor { shape, data }, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.want_same_shape("sub", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x - y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        Ok(self.push(Tensor { shape, data }, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.want_same_shape("mul", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        Ok(self.push(Tensor { shape, data }, Op::Mul(a, b)))
    }

    /// Scalar-with-tensor broadcast, the only broadcast the substrate allows.
    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let t = self.value(a);
        let out = Tensor {
            shape: t.shape().to_vec(),
            data: t.data().iter().map(|x| x + s).collect(),
        };
        self.push(out, Op::AddScalar(a))
    }

    pub fn mul_scalar(&mut self, a: Var, s: f64) -> Var {
        let t = self.value(a);
        let out = Tensor {
            shape: t.shape().to_vec(),
            data: t.data().iter().map(|x| x * s).collect(),
        };
        self.push(out, Op::MulScalar(a, s))
    }

    fn map_unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let t = self.value(a);
        let out = Tensor {
            shape: t.shape().to_vec(),
            data: t.data().iter().map(|&x| f(x)).collect(),
        };
        self.push(out, op)
    }

    pub fn sin(&mut self, a: Var) -> Var {
        self.map_unary(a, f64::sin, Op::Sin(a))
    }

    pub fn cos(&mut self, a: Var) -> Var {
        self.map_unary(a, f64::cos, Op::Cos(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map_unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let v = self.map_unary(a, f64::exp, Op::Exp(a));
        if !self.value(v).all_finite() {
            return Err(Error::NonFinite { op: "exp" });
        }
        Ok(v)
    }

    pub fn ln(&mut self, a: Var) -> Result<Var> {
        let v = self.map_unary(a, f64::ln, Op::Ln(a));
        if !self.value(v).all_finite() {
            return Err(Error::NonFinite { op: "ln" });
        }
        Ok(v)
    }

    // ---- linear algebra ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = self.want_matrix("matmul", a)?;
        let (k2, m) = self.want_matrix("matmul", b)?;
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: vec![n, k],
                rhs: vec![k2, m],
            });
        }
        let out = matmul_nn(self.value(a), self.value(b));
        Ok(self.push(out, Op::Matmul(a, b)))
    }

    /// `x @ w + b` with `b` a row vector broadcast over the rows of the product.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (n, k) = self.want_matrix("affine", x)?;
        let (k2, m) = self.want_matrix("affine", w)?;
        let (br, bc) = self.want_matrix("affine", b)?;
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "affine",
                lhs: vec![n, k],
                rhs: vec![k2, m],
            });
        }
        if br != 1 || bc != m {
            return Err(Error::ShapeMismatch {
                op: "affine",
                lhs: vec![1, m],
                rhs: vec![br, bc],
            });
        }
        let mut out = matmul_nn(self.value(x), self.value(w));
        let bias = self.value(b).data();
        for row in out.data.chunks_mut(m) {
            for (o, bv) in row.iter_mut().zip(bias) {
                *o += bv;
            }
        }
        Ok(self.push(out, Op::Affine { x, w, b }))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (n, m) = self.want_matrix("transpose", a)?;
        let t = self.value(a);
        let mut out = Tensor::zeros(vec![m, n]);
        for i in 0..n {
            for j in 0..m {
                out.data[j * n + i] = t.data[i * m + j];
            }
        }
        Ok(self.push(out, Op::Transpose(a)))
    }

    // ---- shape ops ----

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::BadShape {
                op: "concat_cols",
                expected: "at least one part".into(),
                got: vec![],
            });
        }
        let (n, _) = self.want_matrix("concat_cols", parts[0])?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.want_matrix("concat_cols", p)?;
            if r != n {
                return Err(Error::ShapeMismatch {
                    op: "concat_cols",
                    lhs: self.value(parts[0]).shape().to_vec(),
                    rhs: self.value(p).shape().to_vec(),
                });
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Tensor::zeros(vec![n, total]);
        let mut offset = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let src = self.value(p);
            for i in 0..n {
                out.data[i * total + offset..i * total + offset + w]
                    .copy_from_slice(&src.data[i * w..(i + 1) * w]);
            }
            offset += w;
        }
        Ok(self.push(out, Op::ConcatCols(parts.to_vec())))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::BadShape {
                op: "concat_rows",
                expected: "at least one part".into(),
                got: vec![],
            });
        }
        let (_, m) = self.want_matrix("concat_rows", parts[0])?;
        let mut total = 0;
        for &p in parts {
            let (r, c) = self.want_matrix("concat_rows", p)?;
            if c != m {
                return Err(Error::ShapeMismatch {
                    op: "concat_rows",
                    lhs: self.value(parts[0]).shape().to_vec(),
                    rhs: self.value(p).shape().to_vec(),
                });
            }
            total += r;
        }
        let mut data = Vec::with_capacity(total * m);
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        Ok(self.push(
            Tensor {
                shape: vec![total, m],
                data,
            },
            Op::ConcatRows(parts.to_vec()),
        ))
    }

    /// Row gather; rows may repeat. Backward scatter-adds into the source.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (n, m) = self.want_matrix("gather_rows", x)?;
        for &i in idx {
            if i >= n {
                return Err(Error::IndexRange {
                    op: "gather_rows",
                    index: i,
                    bound: n,
                });
            }
        }
        let src = self.value(x);
        let mut data = Vec::with_capacity(idx.len() * m);
        for &i in idx {
            data.extend_from_slice(&src.data[i * m..(i + 1) * m]);
        }
        Ok(self.push(
            Tensor {
                shape: vec![idx.len(), m],
                data,
            },
            Op::GatherRows {
                x,
                idx: idx.to_vec(),
            },
        ))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (n, m) = self.want_matrix("slice_cols", x)?;
        if start > end || end > m {
            return Err(Error::IndexRange {
                op: "slice_cols",
                index: end,
                bound: m,
            });
        }
        let w = end - start;
        let src = self.value(x);
        let mut data = Vec::with_capacity(n * w);
        for i in 0..n {
            data.extend_from_slice(&src.data[i * m + start..i * m + end]);
        }
        Ok(self.push(
            Tensor {
                shape: vec![n, w],
                data,
            },
            Op::SliceCols { x, start },
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let out = self.value(x).clone().reshaped(shape)?;
        Ok(self.push(out, Op::Reshape(x)))
    }

    // ---- softmax family ----

    /// Row softmax with max-subtraction stabilization.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (_, m) = self.want_matrix("softmax_rows", x)?;
        let src = self.value(x);
        let mut out = Tensor::zeros(src.shape().to_vec());
        for (row, orow) in src.data.chunks(m).zip(out.data.chunks_mut(m)) {
            softmax_into(row, orow);
        }
        Ok(self.push(out, Op::SoftmaxRows(x)))
    }

    pub fn log_softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (_, m) = self.want_matrix("log_softmax_rows", x)?;
        let src = self.value(x);
        let mut out = Tensor::zeros(src.shape().to_vec());
        for (row, orow) in src.data.chunks(m).zip(out.data.chunks_mut(m)) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            for (o, v) in orow.iter_mut().zip(row) {
                *o = v - lse;
            }
        }
        Ok(self.push(out, Op::LogSoftmaxRows(x)))
    }

    /// Column-wise softmax within row segments: rows with the same segment id
    /// compete with each other, independently per column. Used for attention
    /// over variable-size graph neighborhoods (one column per head).
    pub fn segment_softmax(&mut self, x: Var, seg: &[usize], segments: usize) -> Result<Var> {
        let (n, m) = self.want_matrix("segment_softmax", x)?;
        self.check_segments("segment_softmax", seg, n, segments)?;
        let src = self.value(x);
        let mut maxs = vec![f64::NEG_INFINITY; segments * m];
        for (i, row) in src.data.chunks(m).enumerate() {
            let base = seg[i] * m;
            for (j, &v) in row.iter().enumerate() {
                if v > maxs[base + j] {
                    maxs[base + j] = v;
                }
            }
        }
        let mut out = Tensor::zeros(src.shape().to_vec());
        let mut sums = vec![0.0f64; segments * m];
        for (i, row) in src.data.chunks(m).enumerate() {
            let base = seg[i] * m;
            let orow = &mut out.data[i * m..(i + 1) * m];
            for (j, (&v, o)) in row.iter().zip(orow.iter_mut()).enumerate() {
                let e = (v - maxs[base + j]).exp();
                *o = e;
                sums[base + j] += e;
            }
        }
        for (i, orow) in out.data.chunks_mut(m).enumerate() {
            let base = seg[i] * m;
            for (j, o) in orow.iter_mut().enumerate() {
                *o /= sums[base + j];
            }
        }
        Ok(self.push(
            out,
            Op::SegmentSoftmax {
                x,
                seg: seg.to_vec(),
            },
        ))
    }

    /// Sums the rows of `x` into `segments` output rows keyed by `seg`.
    /// Segments with no rows come out as zero rows.
    pub fn segment_sum(&mut self, x: Var, seg: &[usize], segments: usize) -> Result<Var> {
        let (n, m) = self.want_matrix("segment_sum", x)?;
        self.check_segments("segment_sum", seg, n, segments)?;
        let src = self.value(x);
        let mut out = Tensor::zeros(vec![segments, m]);
        for (i, row) in src.data.chunks(m).enumerate() {
            let orow = &mut out.data[seg[i] * m..(seg[i] + 1) * m];
            for (o, &v) in orow.iter_mut().zip(row) {
                *o += v;
            }
        }
        Ok(self.push(
            out,
            Op::SegmentSum {
                x,
                seg: seg.to_vec(),
            },
        ))
    }

    fn check_segments(
        &self,
        op: &'static str,
        seg: &[usize],
        rows: usize,
        segments: usize,
    ) -> Result<()> {
        if seg.len() != rows {
            return Err(Error::BadShape {
                op,
                expected: format!("{rows} segment ids"),
                got: vec![seg.len()],
            });
        }
        for &s in seg {
            if s >= segments {
                return Err(Error::IndexRange {
                    op,
                    index: s,
                    bound: segments,
                });
            }
        }
        Ok(())
    }

    // ---- reductions and broadcasts ----

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::SumAll(x))
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let n = t.len().max(1);
        let s: f64 = t.data().iter().sum();
        self.push(Tensor::scalar(s / n as f64), Op::MeanAll(x))
    }

    /// Row sums as a column vector `(n, 1)`.
    pub fn sum_axis1(&mut self, x: Var) -> Result<Var> {
        let (n, m) = self.want_matrix("sum_axis1", x)?;
        let src = self.value(x);
        let data: Vec<f64> = src.data.chunks(m).map(|r| r.iter().sum()).collect();
        Ok(self.push(
            Tensor {
                shape: vec![n, 1],
                data,
            },
            Op::SumAxis1(x),
        ))
    }

    /// Column means as a row vector `(1, m)`.
    pub fn mean_axis0(&mut self, x: Var) -> Result<Var> {
        let (n, m) = self.want_matrix("mean_axis0", x)?;
        let src = self.value(x);
        let mut data = vec![0.0; m];
        for row in src.data.chunks(m) {
            for (d, &v) in data.iter_mut().zip(row) {
                *d += v;
            }
        }
        let denom = n.max(1) as f64;
        for d in &mut data {
            *d /= denom;
        }
        Ok(self.push(
            Tensor {
                shape: vec![1, m],
                data,
            },
            Op::MeanAxis0(x),
        ))
    }

    /// Tiles a column vector `(n, 1)` to `(n, reps)`.
    pub fn repeat_cols(&mut self, x: Var, reps: usize) -> Result<Var> {
        let (n, m) = self.want_matrix("repeat_cols", x)?;
        if m != 1 {
            return Err(Error::BadShape {
                op: "repeat_cols",
                expected: "(n, 1) column vector".into(),
                got: vec![n, m],
            });
        }
        let src = self.value(x);
        let mut data = Vec::with_capacity(n * reps);
        for &v in &src.data {
            data.extend(std::iter::repeat(v).take(reps));
        }
        Ok(self.push(
            Tensor {
                shape: vec![n, reps],
                data,
            },
            Op::RepeatCols(x),
        ))
    }

    /// Row-wise layer normalization with learned scale and shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (n, m) = self.want_matrix("layer_norm", x)?;
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            let (r, c) = self.want_matrix("layer_norm", v)?;
            if r != 1 || c != m {
                return Err(Error::BadShape {
                    op: "layer_norm",
                    expected: format!("{name} of shape (1, {m})"),
                    got: vec![r, c],
                });
            }
        }
        let src = self.value(x);
        let g = self.value(gamma).data().to_vec();
        let b = self.value(beta).data().to_vec();
        let mut out = Tensor::zeros(vec![n, m]);
        for (row, orow) in src.data.chunks(m).zip(out.data.chunks_mut(m)) {
            let (mu, sigma) = row_stats(row);
            for (j, (o, &v)) in orow.iter_mut().zip(row).enumerate() {
                *o = g[j] * (v - mu) / sigma + b[j];
            }
        }
        Ok(self.push(out, Op::LayerNorm { x, gamma, beta }))
    }

    // ---- backward ----

    /// Backpropagates from a scalar output with seed 1.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let shape = self.value(output).shape().to_vec();
        if shape.iter().product::<usize>() != 1 {
            return Err(Error::BadShape {
                op: "backward",
                expected: "scalar output (or use backward_with_seed)".into(),
                got: shape,
            });
        }
        let mut seed = Tensor::zeros(shape);
        seed.data_mut()[0] = 1.0;
        self.backward_with_seed(output, seed)
    }

    /// Backpropagates an explicit seed, visiting operations in exact reverse
    /// order of recording.
    pub fn backward_with_seed(&self, output: Var, seed: Tensor) -> Result<Gradients> {
        if self.nodes.is_empty() {
            return Err(Error::BackwardBeforeForward);
        }
        let out_shape = self.value(output).shape();
        if seed.shape() != out_shape {
            return Err(Error::SeedShape {
                expected: out_shape.to_vec(),
                got: seed.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(seed);

        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.apply_backward(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn apply_backward(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(grads, *a, g.clone());
                acc(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(grads, *a, g.clone());
                acc(grads, *b, scale(g, -1.0));
            }
            Op::Mul(a, b) => {
                acc(grads, *a, ew_mul(g, self.value(*b)));
                acc(grads, *b, ew_mul(g, self.value(*a)));
            }
            Op::AddScalar(a) => acc(grads, *a, g.clone()),
            Op::MulScalar(a, s) => acc(grads, *a, scale(g, *s)),
            Op::Matmul(a, b) => {
                acc(grads, *a, matmul_nt(g, self.value(*b)));
                acc(grads, *b, matmul_tn(self.value(*a), g));
            }
            Op::Affine { x, w, b } => {
                acc(grads, *x, matmul_nt(g, self.value(*w)));
                acc(grads, *w, matmul_tn(self.value(*x), g));
                acc(grads, *b, col_sums(g));
            }
            Op::Transpose(a) => {
                let (m, n) = (g.rows(), g.cols());
                let mut out = Tensor::zeros(vec![n, m]);
                for i in 0..m {
                    for j in 0..n {
                        out.data[j * m + i] = g.data[i * n + j];
                    }
                }
                acc(grads, *a, out);
            }
            Op::ConcatCols(parts) => {
                let total = g.cols();
                let n = g.rows();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    let mut part = Tensor::zeros(vec![n, w]);
                    for r in 0..n {
                        part.data[r * w..(r + 1) * w]
                            .copy_from_slice(&g.data[r * total + offset..r * total + offset + w]);
                    }
                    acc(grads, p, part);
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let m = g.cols();
                let mut offset = 0;
                for &p in parts {
                    let r = self.value(p).rows();
                    let part = Tensor {
                        shape: vec![r, m],
                        data: g.data[offset * m..(offset + r) * m].to_vec(),
                    };
                    acc(grads, p, part);
                    offset += r;
                }
            }
            Op::GatherRows { x, idx } => {
                let (n, m) = (self.value(*x).rows(), self.value(*x).cols());
                let mut out = Tensor::zeros(vec![n, m]);
                for (r, &i) in idx.iter().enumerate() {
                    let dst = &mut out.data[i * m..(i + 1) * m];
                    for (d, &v) in dst.iter_mut().zip(&g.data[r * m..(r + 1) * m]) {
                        *d += v;
                    }
                }
                acc(grads, *x, out);
            }
            Op::SliceCols { x, start } => {
                let (n, m) = (self.value(*x).rows(), self.value(*x).cols());
                let w = g.cols();
                let mut out = Tensor::zeros(vec![n, m]);
                for r in 0..n {
                    out.data[r * m + start..r * m + start + w]
                        .copy_from_slice(&g.data[r * w..(r + 1) * w]);
                }
                acc(grads, *x, out);
            }
            Op::Reshape(x) => {
                let shape = self.value(*x).shape().to_vec();
                let back = Tensor {
                    shape,
                    data: g.data.clone(),
                };
                acc(grads, *x, back);
            }
            Op::Sin(a) => acc(grads, *a, ew_map_mul(g, self.value(*a), f64::cos)),
            Op::Cos(a) => acc(grads, *a, ew_map_mul(g, self.value(*a), |x| -x.sin())),
            Op::Relu(a) => acc(
                grads,
                *a,
                ew_map_mul(g, self.value(*a), |x| if x > 0.0 { 1.0 } else { 0.0 }),
            ),
            Op::Exp(a) => acc(grads, *a, ew_mul(g, &node.value)),
            Op::Ln(a) => acc(grads, *a, ew_map_mul(g, self.value(*a), |x| 1.0 / x)),
            Op::SoftmaxRows(a) => {
                let s = &node.value;
                let m = s.cols();
                let mut out = Tensor::zeros(s.shape().to_vec());
                for ((srow, grow), orow) in s
                    .data
                    .chunks(m)
                    .zip(g.data.chunks(m))
                    .zip(out.data.chunks_mut(m))
                {
                    let dot: f64 = srow.iter().zip(grow).map(|(s, g)| s * g).sum();
                    for ((o, &sv), &gv) in orow.iter_mut().zip(srow).zip(grow) {
                        *o = sv * (gv - dot);
                    }
                }
                acc(grads, *a, out);
            }
            Op::LogSoftmaxRows(a) => {
                let lsm = &node.value;
                let m = lsm.cols();
                let mut out = Tensor::zeros(lsm.shape().to_vec());
                for ((lrow, grow), orow) in lsm
                    .data
                    .chunks(m)
                    .zip(g.data.chunks(m))
                    .zip(out.data.chunks_mut(m))
                {
                    let gsum: f64 = grow.iter().sum();
                    for ((o, &lv), &gv) in orow.iter_mut().zip(lrow).zip(grow) {
                        *o = gv - lv.exp() * gsum;
                    }
                }
                acc(grads, *a, out);
            }
            Op::SegmentSoftmax { x, seg } => {
                let s = &node.value;
                let m = s.cols();
                let segments = seg.iter().copied().max().map_or(0, |v| v + 1);
                let mut dots = vec![0.0f64; segments * m];
                for (i, (srow, grow)) in s.data.chunks(m).zip(g.data.chunks(m)).enumerate() {
                    let base = seg[i] * m;
                    for (j, (&sv, &gv)) in srow.iter().zip(grow).enumerate() {
                        dots[base + j] += sv * gv;
                    }
                }
                let mut out = Tensor::zeros(s.shape().to_vec());
                for (i, ((srow, grow), orow)) in s
                    .data
                    .chunks(m)
                    .zip(g.data.chunks(m))
                    .zip(out.data.chunks_mut(m))
                    .enumerate()
                {
                    let base = seg[i] * m;
                    for (j, ((o, &sv), &gv)) in orow.iter_mut().zip(srow).zip(grow).enumerate() {
                        *o = sv * (gv - dots[base + j]);
                    }
                }
                acc(grads, *x, out);
            }
            Op::SegmentSum { x, seg } => {
                let m = g.cols();
                let mut out = Tensor::zeros(self.value(*x).shape().to_vec());
                for (i, orow) in out.data.chunks_mut(m).enumerate() {
                    orow.copy_from_slice(&g.data[seg[i] * m..(seg[i] + 1) * m]);
                }
                acc(grads, *x, out);
            }
            Op::SumAll(x) => {
                let v = g.item();
                let t = self.value(*x);
                acc(
                    grads,
                    *x,
                    Tensor {
                        shape: t.shape().to_vec(),
                        data: vec![v; t.len()],
                    },
                );
            }
            Op::MeanAll(x) => {
                let t = self.value(*x);
                let v = g.item() / t.len().max(1) as f64;
                acc(
                    grads,
                    *x,
                    Tensor {
                        shape: t.shape().to_vec(),
                        data: vec![v; t.len()],
                    },
                );
            }
            Op::SumAxis1(x) => {
                let t = self.value(*x);
                let (n, m) = (t.rows(), t.cols());
                let mut out = Tensor::zeros(vec![n, m]);
                for (i, orow) in out.data.chunks_mut(m).enumerate() {
                    orow.fill(g.data[i]);
                }
                acc(grads, *x, out);
            }
            Op::MeanAxis0(x) => {
                let t = self.value(*x);
                let (n, m) = (t.rows(), t.cols());
                let inv = 1.0 / n.max(1) as f64;
                let mut out = Tensor::zeros(vec![n, m]);
                for orow in out.data.chunks_mut(m) {
                    for (o, &gv) in orow.iter_mut().zip(&g.data) {
                        *o = gv * inv;
                    }
                }
                acc(grads, *x, out);
            }
            Op::RepeatCols(x) => {
                let m = g.cols();
                let n = g.rows();
                let mut out = Tensor::zeros(vec![n, 1]);
                for (i, grow) in g.data.chunks(m).enumerate() {
                    out.data[i] = grow.iter().sum();
                }
                acc(grads, *x, out);
            }
            Op::LayerNorm { x, gamma, beta } => {
                let src = self.value(*x);
                let gam = self.value(*gamma).data();
                let (n, m) = (src.rows(), src.cols());
                let mut dx = Tensor::zeros(vec![n, m]);
                let mut dgamma = Tensor::zeros(vec![1, m]);
                let mut dbeta = Tensor::zeros(vec![1, m]);
                for ((row, grow), dxrow) in src
                    .data
                    .chunks(m)
                    .zip(g.data.chunks(m))
                    .zip(dx.data.chunks_mut(m))
                {
                    let (mu, sigma) = row_stats(row);
                    let inv = 1.0 / sigma;
                    let xhat: Vec<f64> = row.iter().map(|&v| (v - mu) * inv).collect();
                    let gh: Vec<f64> = grow.iter().zip(gam).map(|(&g, &w)| g * w).collect();
                    let a = gh.iter().sum::<f64>() / m as f64;
                    let b = gh.iter().zip(&xhat).map(|(&g, &h)| g * h).sum::<f64>() / m as f64;
                    for (j, d) in dxrow.iter_mut().enumerate() {
                        *d = (gh[j] - a - xhat[j] * b) * inv;
                    }
                    for (j, (&gv, &h)) in grow.iter().zip(&xhat).enumerate() {
                        dgamma.data[j] += gv * h;
                        dbeta.data[j] += gv;
                    }
                }
                acc(grads, *x, dx);
                acc(grads, *gamma, dgamma);
                acc(grads, *beta, dbeta);
            }
        }
    }
}

/// Per-variable gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient for `v`, or zeros of the given shape when `v` did not
    /// influence the output.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor {
        match self.get(v) {
            Some(t) => t.clone(),
            None => Tensor::zeros(shape.to_vec()),
        }
    }
}

fn acc(grads: &mut [Option<Tensor>], v: Var, delta: Tensor) {
    match &mut grads[v.0] {
        Some(t) => {
            debug_assert_eq!(t.shape(), delta.shape());
            for (a, b) in t.data.iter_mut().zip(&delta.data) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(delta),
    }
}

fn scale(t: &Tensor, s: f64) -> Tensor {
    Tensor {
        shape: t.shape().to_vec(),
        data: t.data.iter().map(|v| v * s).collect(),
    }
}

fn ew_mul(a: &Tensor, b: &Tensor) -> Tensor {
    Tensor {
        shape: a.shape().to_vec(),
        data: a.data.iter().zip(&b.data).map(|(x, y)| x * y).collect(),
    }
}

fn ew_map_mul(g: &Tensor, x: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor {
        shape: g.shape().to_vec(),
        data: g.data.iter().zip(&x.data).map(|(gv, &xv)| gv * f(xv)).collect(),
    }
}

fn col_sums(g: &Tensor) -> Tensor {
    let m = g.cols();
    let mut out = Tensor::zeros(vec![1, m]);
    for row in g.data.chunks(m) {
        for (o, &v) in out.data.iter_mut().zip(row) {
            *o += v;
        }
    }
    out
}

fn softmax_into(row: &[f64], out: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(row) {
        let e = (v - max).exp();
        *o = e;
        sum += e;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

fn row_stats(row: &[f64]) -> (f64, f64) {
    let m = row.len() as f64;
    let mu = row.iter().sum::<f64>() / m;
    let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<f64>() / m;
    (mu, (var + LAYER_NORM_EPS).sqrt())
}

fn matmul_nn(a: &Tensor, b: &Tensor) -> Tensor {
    let (n, k) = (a.rows(), a.cols());
    let m = b.cols();
    let mut out = Tensor::zeros(vec![n, m]);
    for i in 0..n {
        let arow = &a.data[i * k..(i + 1) * k];
        let orow = &mut out.data[i * m..(i + 1) * m];
        for (p, &av) in arow.iter().enumerate() {
            if av != 0.0 {
                let brow = &b.data[p * m..(p + 1) * m];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
    }
    out
}

/// `a @ b^T` without materializing the transpose.
fn matmul_nt(a: &Tensor, b: &Tensor) -> Tensor {
    let (n, m) = (a.rows(), a.cols());
    let k = b.rows();
    debug_assert_eq!(b.cols(), m);
    let mut out = Tensor::zeros(vec![n, k]);
    for i in 0..n {
        let arow = &a.data[i * m..(i + 1) * m];
        for j in 0..k {
            let brow = &b.data[j * m..(j + 1) * m];
            out.data[i * k + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    out
}

/// `a^T @ b` without materializing the transpose.
fn matmul_tn(a: &Tensor, b: &Tensor) -> Tensor {
    let (n, k) = (a.rows(), a.cols());
    let m = b.cols();
    debug_assert_eq!(b.rows(), n);
    let mut out = Tensor::zeros(vec![k, m]);
    for i in 0..n {
        let arow = &a.data[i * k..(i + 1) * k];
        let brow = &b.data[i * m..(i + 1) * m];
        for (p, &av) in arow.iter().enumerate() {
            if av != 0.0 {
                let orow = &mut out.data[p * m..(p + 1) * m];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t2(rows: &[Vec<f64>]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut tape = Tape::new();
        let x = tape.leaf(t2(&[vec![0.0, 0.0]])).unwrap();
        let s = tape.softmax_rows(x).unwrap();
        assert_eq!(tape.value(s).data(), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_rows_sum_to_one_and_lie_in_open_unit_interval() {
        let mut tape = Tape::new();
        let x = tape
            .leaf(t2(&[vec![3.0, -1.0, 0.5], vec![100.0, 99.0, -40.0]]))
            .unwrap();
        let s = tape.softmax_rows(x).unwrap();
        for row in tape.value(s).data().chunks(3) {
            let sum: f64 = row.iter().sum();
            assert!((sum - 1.0).abs() < 1e-9);
            assert!(row.iter().all(|&v| v > 0.0 && v < 1.0));
        }
    }

    #[test]
    fn matmul_identity_is_identity() {
        let mut tape = Tape::new();
        let a = t2(&[
            vec![1.0, 2.0, 3.0],
            vec![4.0, 5.0, 6.0],
            vec![7.0, 8.0, 9.0],
        ]);
        let i = tape.leaf(Tensor::identity(3)).unwrap();
        let av = tape.leaf(a.clone()).unwrap();
        let out = tape.matmul(i, av).unwrap();
        assert_eq!(tape.value(out), &a);
    }

    #[test]
    fn sin_cos_at_zero() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(0.0)).unwrap();
        let s = tape.sin(x);
        let c = tape.cos(x);
        assert_eq!(tape.value(s).item(), 0.0);
        assert_eq!(tape.value(c).item(), 1.0);
    }

    #[test]
    fn derivative_of_sin_at_zero_is_one() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(0.0)).unwrap();
        let y = tape.sin(x);
        let grads = tape.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap().item(), 1.0);
    }

    #[test]
    fn softmax_sum_has_zero_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(t2(&[vec![0.3, -1.2, 2.0, 0.7]])).unwrap();
        let s = tape.softmax_rows(x).unwrap();
        let total = tape.sum_all(s);
        let grads = tape.backward(total).unwrap();
        for &g in grads.get(x).unwrap().data() {
            assert!(g.abs() < 1e-12, "expected conservation, got {g}");
        }
    }

    #[test]
    fn matmul_shape_mismatch_names_op_and_shapes() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::zeros(vec![2, 3])).unwrap();
        let b = tape.leaf(Tensor::zeros(vec![2, 3])).unwrap();
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("matmul") && msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn backward_on_empty_tape_is_usage_error() {
        let tape = Tape::new();
        let err = tape
            .backward_with_seed(Var(0), Tensor::scalar(1.0))
            .unwrap_err();
        assert!(matches!(err, crate::error::Error::BackwardBeforeForward));
    }

    #[test]
    fn backward_seed_shape_checked() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(vec![2, 2])).unwrap();
        let y = tape.relu(x);
        let err = tape
            .backward_with_seed(y, Tensor::zeros(vec![3]))
            .unwrap_err();
        assert!(matches!(err, crate::error::Error::SeedShape { .. }));
    }

    #[test]
    fn leaf_rejects_non_finite() {
        let mut tape = Tape::new();
        let t = Tensor {
            shape: vec![1],
            data: vec![f64::INFINITY],
        };
        assert!(tape.leaf(t).is_err());
    }

    #[test]
    fn forward_is_deterministic() {
        let run = || {
            let mut tape = Tape::new();
            let x = tape
                .leaf(t2(&[vec![0.1, -0.4], vec![1.7, 0.03]]))
                .unwrap();
            let w = tape.leaf(t2(&[vec![0.5, -1.0], vec![0.25, 2.0]])).unwrap();
            let y = tape.matmul(x, w).unwrap();
            let s = tape.softmax_rows(y).unwrap();
            tape.value(s).data().to_vec()
        };
        let a = run();
        let b = run();
        assert_eq!(a, b, "bit-identical outputs expected");
    }

    #[test]
    fn gather_rows_out_of_range() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(vec![2, 2])).unwrap();
        assert!(tape.gather_rows(x, &[0, 2]).is_err());
    }

    #[test]
    fn segment_sum_groups_rows() {
        let mut tape = Tape::new();
        let x = tape
            .leaf(t2(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![10.0, 20.0]]))
            .unwrap();
        let s = tape.segment_sum(x, &[1, 1, 0], 3).unwrap();
        assert_eq!(
            tape.value(s).data(),
            &[10.0, 20.0, 4.0, 6.0, 0.0, 0.0],
            "empty segment stays zero"
        );
    }

    #[test]
    fn segment_softmax_normalizes_within_segments() {
        let mut tape = Tape::new();
        let x = tape
            .leaf(t2(&[vec![0.0], vec![0.0], vec![5.0]]))
            .unwrap();
        let s = tape.segment_softmax(x, &[0, 0, 1], 2).unwrap();
        let d = tape.value(s).data();
        assert!((d[0] - 0.5).abs() < 1e-12);
        assert!((d[1] - 0.5).abs() < 1e-12);
        assert!((d[2] - 1.0).abs() < 1e-12);
    }
}
