use super::kernels::{self, View};
use super::{NumericsError, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Exp(Var),
    Ln(Var),
    Abs(Var),
    Sigmoid(Var),
    Gelu(Var),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    Transpose(Var),
    Gather(Var, Vec<usize>),
    SoftmaxRows(Var),
    L2NormalizeRows { input: Var, eps: f64, norms: Vec<f64> },
    LayerNormRows { input: Var, gamma: Var, beta: Var, normalized: Vec<f64>, inv_std: Vec<f64> },
    ConcatCols(Vec<Var>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Linear record of operations for reverse-mode differentiation.
///
/// Nodes are appended in evaluation order, so every node's inputs precede it.
/// A tape is built fresh for each forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

fn finite(op: &'static str, values: &[f64]) -> Result<(), NumericsError> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(NumericsError::NonFinite { op })
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, contribution: Vec<f64>) {
    match slot {
        Some(existing) => existing.iter_mut().zip(contribution).for_each(|(e, c)| *e += c),
        None => *slot = Some(contribution),
    }
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

    /// Records a leaf; it receives a gradient iff `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let requires_grad = tensor.requires_grad();
        self.push(tensor, Op::Leaf, requires_grad)
    }

    pub fn param(&mut self, tensor: Tensor) -> Var {
        self.leaf(tensor.with_requires_grad(true))
    }

    pub fn constant(&mut self, tensor: Tensor) -> Var {
        self.leaf(tensor.with_requires_grad(false))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient of the last `backward` loss with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn record(&mut self, name: &'static str, shape: Vec<usize>, values: Vec<f64>, op: Op, inputs: &[Var]) -> Result<Var, NumericsError> {
        finite(name, &values)?;
        let value = Tensor::new(shape, values)?;
        let requires_grad = self.needs(inputs);
        Ok(self.push(value, op, requires_grad))
    }

    fn dims2(&self, op: &'static str, v: Var) -> Result<(usize, usize), NumericsError> {
        self.value(v).dims2().map_err(|_| NumericsError::Rank {
            op,
            expected: 2,
            shape: self.shape(v).to_vec(),
        })
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), NumericsError> {
        if self.shape(a) != self.shape(b) {
            return Err(NumericsError::ShapeMismatch {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    fn row_operand(&self, op: &'static str, x: Var, row: Var) -> Result<(usize, usize), NumericsError> {
        let (m, n) = self.dims2(op, x)?;
        if self.value(row).len() != n || self.shape(row).len() > 2 {
            return Err(NumericsError::ShapeMismatch {
                op,
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(row).to_vec(),
            });
        }
        Ok((m, n))
    }

    fn map_unary(&mut self, name: &'static str, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var, NumericsError> {
        let t = self.value(x);
        let values = t.values().iter().map(|&v| f(v)).collect();
        let shape = t.shape().to_vec();
        self.record(name, shape, values, op, &[x])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (m, k) = self.dims2("matmul", a)?;
        let (k2, n) = self.dims2("matmul", b)?;
        if k != k2 {
            return Err(NumericsError::ShapeMismatch {
                op: "matmul",
                lhs: vec![m, k],
                rhs: vec![k2, n],
            });
        }
        let mut out = vec![0.0; m * n];
        kernels::gemm(
            m,
            k,
            n,
            View::row_major(self.value(a).values(), k),
            View::row_major(self.value(b).values(), n),
            &mut out,
            0.0,
        );
        self.record("matmul", vec![m, n], out, Op::MatMul(a, b), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.same_shape("add", a, b)?;
        let values = self.value(a).values().iter().zip(self.value(b).values()).map(|(x, y)| x + y).collect();
        self.record("add", self.shape(a).to_vec(), values, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.same_shape("sub", a, b)?;
        let values = self.value(a).values().iter().zip(self.value(b).values()).map(|(x, y)| x - y).collect();
        self.record("sub", self.shape(a).to_vec(), values, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.same_shape("mul", a, b)?;
        let values = self.value(a).values().iter().zip(self.value(b).values()).map(|(x, y)| x * y).collect();
        self.record("mul", self.shape(a).to_vec(), values, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var, NumericsError> {
        self.map_unary("scale", x, |v| v * c, Op::Scale(x, c))
    }

    /// Adds a length-`n` row vector to every row of an `m x n` matrix.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var, NumericsError> {
        let (_, n) = self.row_operand("add_row", x, row)?;
        let r = self.value(row).values();
        let values = self.value(x).values().chunks_exact(n).flat_map(|xr| xr.iter().zip(r).map(|(a, b)| a + b)).collect();
        self.record("add_row", self.shape(x).to_vec(), values, Op::AddRow(x, row), &[x, row])
    }

    /// Multiplies every row of an `m x n` matrix elementwise by a length-`n` vector,
    /// i.e. right-multiplication by a diagonal matrix.
    pub fn mul_row(&mut self, x: Var, row: Var) -> Result<Var, NumericsError> {
        let (_, n) = self.row_operand("mul_row", x, row)?;
        let r = self.value(row).values();
        let values = self.value(x).values().chunks_exact(n).flat_map(|xr| xr.iter().zip(r).map(|(a, b)| a * b)).collect();
        self.record("mul_row", self.shape(x).to_vec(), values, Op::MulRow(x, row), &[x, row])
    }

    pub fn exp(&mut self, x: Var) -> Result<Var, NumericsError> {
        self.map_unary("exp", x, f64::exp, Op::Exp(x))
    }

    pub fn ln(&mut self, x: Var) -> Result<Var, NumericsError> {
        self.map_unary("ln", x, f64::ln, Op::Ln(x))
    }

    pub fn abs(&mut self, x: Var) -> Result<Var, NumericsError> {
        self.map_unary("abs", x, f64::abs, Op::Abs(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var, NumericsError> {
        self.map_unary("sigmoid", x, kernels::sigmoid, Op::Sigmoid(x))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var, NumericsError> {
        self.map_unary("gelu", x, kernels::gelu, Op::Gelu(x))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var, NumericsError> {
        let s = kernels::sum_compensated(self.value(x).values());
        self.record("sum", vec![], vec![s], Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var, NumericsError> {
        let t = self.value(x);
        let s = kernels::sum_compensated(t.values()) / t.len() as f64;
        self.record("mean", vec![], vec![s], Op::Mean(x), &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, NumericsError> {
        let t = self.value(x);
        if shape.iter().product::<usize>() != t.len() {
            return Err(NumericsError::ShapeMismatch {
                op: "reshape",
                lhs: t.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let values = t.values().to_vec();
        self.record("reshape", shape.to_vec(), values, Op::Reshape(x), &[x])
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var, NumericsError> {
        let (m, n) = self.dims2("transpose", x)?;
        let src = self.value(x).values();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        self.record("transpose", vec![n, m], out, Op::Transpose(x), &[x])
    }

    /// `out.flat[i] = x.flat[indices[i]]`, reshaped to `shape`.
    pub fn gather(&mut self, x: Var, indices: Vec<usize>, shape: &[usize]) -> Result<Var, NumericsError> {
        let src = self.value(x).values();
        if let Some(&bad) = indices.iter().find(|&&i| i >= src.len()) {
            return Err(NumericsError::InvalidArgument {
                op: "gather",
                reason: format!("index {bad} out of range for {} elements", src.len()),
            });
        }
        let values = indices.iter().map(|&i| src[i]).collect();
        self.record("gather", shape.to_vec(), values, Op::Gather(x, indices), &[x])
    }

    /// Main diagonal of a square matrix.
    pub fn diagonal(&mut self, x: Var) -> Result<Var, NumericsError> {
        let (m, n) = self.dims2("diagonal", x)?;
        if m != n {
            return Err(NumericsError::InvalidArgument {
                op: "diagonal",
                reason: format!("expected a square matrix, got {m}x{n}"),
            });
        }
        self.gather(x, (0..n).map(|i| i * n + i).collect(), &[n])
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var, NumericsError> {
        let (m, n) = self.dims2("softmax_rows", x)?;
        finite("softmax_rows", self.value(x).values())?;
        let values = kernels::softmax_rows(self.value(x).values(), n);
        self.record("softmax_rows", vec![m, n], values, Op::SoftmaxRows(x), &[x])
    }

    /// Divides each row by `max(||row||, eps)`.
    pub fn l2_normalize_rows(&mut self, x: Var, eps: f64) -> Result<Var, NumericsError> {
        if !(eps > 0.0) {
            return Err(NumericsError::InvalidArgument {
                op: "l2_normalize_rows",
                reason: format!("eps must be positive, got {eps}"),
            });
        }
        let (m, n) = self.dims2("l2_normalize_rows", x)?;
        let src = self.value(x).values();
        let norms = kernels::row_norms(src, n);
        let values = kernels::l2_normalize_rows(src, n, eps);
        self.record("l2_normalize_rows", vec![m, n], values, Op::L2NormalizeRows { input: x, eps, norms }, &[x])
    }

    /// Per-row layer normalization with learnable gain and bias.
    pub fn layer_norm_rows(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var, NumericsError> {
        let (m, n) = self.row_operand("layer_norm_rows", x, gamma)?;
        self.row_operand("layer_norm_rows", x, beta)?;
        let src = self.value(x).values();
        let g = self.value(gamma).values();
        let b = self.value(beta).values();
        let mut normalized = vec![0.0; m * n];
        let mut inv_std = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &src[i * n..(i + 1) * n];
            let mu = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n as f64;
            let r = 1.0 / (var + eps).sqrt();
            inv_std[i] = r;
            for j in 0..n {
                let xh = (row[j] - mu) * r;
                normalized[i * n + j] = xh;
                out[i * n + j] = g[j] * xh + b[j];
            }
        }
        self.record(
            "layer_norm_rows",
            vec![m, n],
            out,
            Op::LayerNormRows { input: x, gamma, beta, normalized, inv_std },
            &[x, gamma, beta],
        )
    }

    /// Concatenates matrices with equal row counts along the column axis.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, NumericsError> {
        let first = *parts.first().ok_or(NumericsError::InvalidArgument {
            op: "concat_cols",
            reason: "no inputs".into(),
        })?;
        let (m, _) = self.dims2("concat_cols", first)?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pm, pn) = self.dims2("concat_cols", p)?;
            if pm != m {
                return Err(NumericsError::ShapeMismatch {
                    op: "concat_cols",
                    lhs: self.shape(first).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
            widths.push(pn);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * total);
        for i in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).values()[i * w..(i + 1) * w]);
            }
        }
        self.record("concat_cols", vec![m, total], out, Op::ConcatCols(parts.to_vec()), parts)
    }

    /// Reverse sweep from a scalar `loss`. Gradients become available through
    /// [`Tape::grad`] and are also stored on every gradient-requiring leaf.
    pub fn backward(&mut self, loss: Var) -> Result<(), NumericsError> {
        let shape = self.shape(loss).to_vec();
        if self.value(loss).len() != 1 {
            return Err(NumericsError::NonScalarLoss { shape });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            for (input, contribution) in self.input_grads(idx, &g) {
                if self.nodes[input.0].requires_grad {
                    accumulate(&mut grads[input.0], contribution);
                }
            }
            grads[idx] = Some(g);
        }
        for (node, g) in self.nodes.iter_mut().zip(&grads) {
            if matches!(node.op, Op::Leaf) && node.requires_grad {
                node.value.set_grad(Some(g.clone().unwrap_or_else(|| vec![0.0; node.value.len()])));
            }
        }
        self.grads = grads;
        Ok(())
    }

    fn input_grads(&self, idx: usize, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let node = &self.nodes[idx];
        let out = node.value.values();
        let val = |v: Var| self.nodes[v.0].value.values();
        let need = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => vec![],
            &Op::MatMul(a, b) => {
                let (m, k) = self.nodes[a.0].value.dims2().expect("rank 2");
                let n = self.nodes[b.0].value.dims2().expect("rank 2").1;
                let mut res = Vec::new();
                if need(a) {
                    let mut ga = vec![0.0; m * k];
                    kernels::gemm(m, n, k, View::row_major(g, n), View::transposed(val(b), n), &mut ga, 0.0);
                    res.push((a, ga));
                }
                if need(b) {
                    let mut gb = vec![0.0; k * n];
                    kernels::gemm(k, m, n, View::transposed(val(a), k), View::row_major(g, n), &mut gb, 0.0);
                    res.push((b, gb));
                }
                res
            }
            &Op::Add(a, b) => vec![(a, g.to_vec()), (b, g.to_vec())],
            &Op::Sub(a, b) => vec![(a, g.to_vec()), (b, g.iter().map(|v| -v).collect())],
            &Op::Mul(a, b) => vec![
                (a, g.iter().zip(val(b)).map(|(g, y)| g * y).collect()),
                (b, g.iter().zip(val(a)).map(|(g, x)| g * x).collect()),
            ],
            &Op::Scale(x, c) => vec![(x, g.iter().map(|v| v * c).collect())],
            &Op::AddRow(x, row) => {
                let n = val(row).len();
                let mut gr = vec![0.0; n];
                for gi in g.chunks_exact(n) {
                    gr.iter_mut().zip(gi).for_each(|(r, v)| *r += v);
                }
                vec![(x, g.to_vec()), (row, gr)]
            }
            &Op::MulRow(x, row) => {
                let r = val(row);
                let n = r.len();
                let gx = g.chunks_exact(n).flat_map(|gi| gi.iter().zip(r).map(|(a, b)| a * b)).collect();
                let mut gr = vec![0.0; n];
                for (gi, xi) in g.chunks_exact(n).zip(val(x).chunks_exact(n)) {
                    for j in 0..n {
                        gr[j] += gi[j] * xi[j];
                    }
                }
                vec![(x, gx), (row, gr)]
            }
            &Op::Exp(x) => vec![(x, g.iter().zip(out).map(|(g, y)| g * y).collect())],
            &Op::Ln(x) => vec![(x, g.iter().zip(val(x)).map(|(g, v)| g / v).collect())],
            &Op::Abs(x) => vec![(
                x,
                g.iter()
                    .zip(val(x))
                    .map(|(g, &v)| if v > 0.0 { *g } else if v < 0.0 { -g } else { 0.0 })
                    .collect(),
            )],
            &Op::Sigmoid(x) => vec![(x, g.iter().zip(out).map(|(g, y)| g * y * (1.0 - y)).collect())],
            &Op::Gelu(x) => vec![(x, g.iter().zip(val(x)).map(|(g, &v)| g * kernels::gelu_grad(v)).collect())],
            &Op::Sum(x) => vec![(x, vec![g[0]; val(x).len()])],
            &Op::Mean(x) => {
                let n = val(x).len();
                vec![(x, vec![g[0] / n as f64; n])]
            }
            &Op::Reshape(x) => vec![(x, g.to_vec())],
            &Op::Transpose(x) => {
                // output is n x m; input m x n
                let (n, m) = node.value.dims2().expect("rank 2");
                let mut gx = vec![0.0; m * n];
                for i in 0..n {
                    for j in 0..m {
                        gx[j * n + i] = g[i * m + j];
                    }
                }
                vec![(x, gx)]
            }
            Op::Gather(x, indices) => {
                let mut gx = vec![0.0; val(*x).len()];
                for (&i, gv) in indices.iter().zip(g) {
                    gx[i] += gv;
                }
                vec![(*x, gx)]
            }
            &Op::SoftmaxRows(x) => {
                let n = node.value.dims2().expect("rank 2").1;
                let mut gx = vec![0.0; g.len()];
                for ((gi, yi), dst) in g.chunks_exact(n).zip(out.chunks_exact(n)).zip(gx.chunks_exact_mut(n)) {
                    let dot: f64 = gi.iter().zip(yi).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        dst[j] = yi[j] * (gi[j] - dot);
                    }
                }
                vec![(x, gx)]
            }
            Op::L2NormalizeRows { input, eps, norms } => {
                let n = node.value.dims2().expect("rank 2").1;
                let mut gx = vec![0.0; g.len()];
                for (((gi, yi), dst), &norm) in g.chunks_exact(n).zip(out.chunks_exact(n)).zip(gx.chunks_exact_mut(n)).zip(norms) {
                    if norm > *eps {
                        let dot: f64 = gi.iter().zip(yi).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            dst[j] = (gi[j] - yi[j] * dot) / norm;
                        }
                    } else {
                        for j in 0..n {
                            dst[j] = gi[j] / eps;
                        }
                    }
                }
                vec![(*input, gx)]
            }
            Op::LayerNormRows { input, gamma, beta, normalized, inv_std } => {
                let n = node.value.dims2().expect("rank 2").1;
                let gam = val(*gamma);
                let mut gx = vec![0.0; g.len()];
                let mut gg = vec![0.0; n];
                let mut gb = vec![0.0; n];
                for (i, (gi, xh)) in g.chunks_exact(n).zip(normalized.chunks_exact(n)).enumerate() {
                    let mut mean_d = 0.0;
                    let mut mean_dx = 0.0;
                    for j in 0..n {
                        gg[j] += gi[j] * xh[j];
                        gb[j] += gi[j];
                        let d = gi[j] * gam[j];
                        mean_d += d;
                        mean_dx += d * xh[j];
                    }
                    mean_d /= n as f64;
                    mean_dx /= n as f64;
                    let dst = &mut gx[i * n..(i + 1) * n];
                    for j in 0..n {
                        dst[j] = inv_std[i] * (gi[j] * gam[j] - mean_d - xh[j] * mean_dx);
                    }
                }
                vec![(*input, gx), (*gamma, gg), (*beta, gb)]
            }
            Op::ConcatCols(parts) => {
                let total = node.value.dims2().expect("rank 2").1;
                let mut offset = 0;
                let mut res = Vec::with_capacity(parts.len());
                for &p in parts {
                    let (m, w) = self.nodes[p.0].value.dims2().expect("rank 2");
                    let mut gp = Vec::with_capacity(m * w);
                    for i in 0..m {
                        gp.extend_from_slice(&g[i * total + offset..i * total + offset + w]);
                    }
                    offset += w;
                    res.push((p, gp));
                }
                res
            }
        }
    }
}
