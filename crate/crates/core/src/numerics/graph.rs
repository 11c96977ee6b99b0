//! Tape-based reverse-mode differentiation.
//!
//! Every op appends a node holding its forward value; nodes are created in
//! topological order, so `backward` is a single reverse sweep that visits each
//! node once.

use super::kernels;
use super::tensor::{permute_data, Tensor};
use crate::error::{Error, Result};
use crate::quant::{qdq_value, QuantGrid};

/// Handle to a node in a [`Graph`].
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
    Gemm { a: Var, b: Var, ta: bool, tb: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Tile(Var),
    Concat(Vec<Var>, usize),
    Softmax(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Gelu(Var),
    RfftMag(Var),
    Rope { x: Var, positions: Vec<f64>, base: f64 },
    Im2col { x: Var, kernel: usize, stride: usize, pad: usize },
    WhereRows { x: Var, fill: Var, mask: Vec<bool> },
    GatherRows { table: Var, index: Vec<usize> },
    Sum(Var),
    SoftmaxXent { logits: Var, labels: Vec<usize>, probs: Vec<f64> },
    BceLogits { logits: Var, targets: Vec<f64> },
    FakeQuant { x: Var, pass: Vec<bool> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recorded computation plus gradient accumulators.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    macs: u64,
}

fn dim_err<T>(msg: String) -> Result<T> {
    Err(Error::Dimension(msg))
}

/// Batched product `op(a)·op(b)`; rank-2 or rank-3 operands of equal rank.
fn gemm_tensor(a: &Tensor, b: &Tensor, ta: bool, tb: bool) -> Result<(Tensor, u64)> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.len() != sb.len() || !(sa.len() == 2 || sa.len() == 3) {
        return dim_err(format!("matmul needs two rank-2 or two rank-3 operands, got {sa:?} and {sb:?}"));
    }
    let r = sa.len();
    let batch = if r == 3 { sa[0] } else { 1 };
    if r == 3 && sb[0] != batch {
        return dim_err(format!("matmul batch mismatch {sa:?} vs {sb:?}"));
    }
    let (ar, ac) = (sa[r - 2], sa[r - 1]);
    let (br, bc) = (sb[r - 2], sb[r - 1]);
    let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
    let (k2, n) = if tb { (bc, br) } else { (br, bc) };
    if k != k2 {
        return dim_err(format!("matmul inner extents differ: {sa:?}{} x {sb:?}{}", if ta { "ᵀ" } else { "" }, if tb { "ᵀ" } else { "" }));
    }
    let mut out = vec![0.0; batch * m * n];
    for bi in 0..batch {
        kernels::gemm(
            &a.data()[bi * m * k..(bi + 1) * m * k],
            &b.data()[bi * k * n..(bi + 1) * k * n],
            m,
            k,
            n,
            ta,
            tb,
            &mut out[bi * m * n..(bi + 1) * m * n],
        );
    }
    let shape = if r == 3 { vec![batch, m, n] } else { vec![m, n] };
    Ok((Tensor::new(shape, out)?, (batch * m * n * k) as u64))
}

/// MACs charged for one magnitude spectrum of a length-`n` row (naive real DFT).
pub fn rfft_macs(n: usize) -> u64 {
    (2 * n * (n / 2 + 1)) as u64
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Multiply-accumulates performed by the forward ops recorded so far.
    pub fn macs(&self) -> u64 {
        self.macs
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Accumulated gradient after [`Graph::backward`]; `None` when nothing flowed in.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient, or zeros of the node's shape when the node is off every path to the loss.
    pub fn grad_or_zeros(&self, v: Var) -> Tensor {
        self.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(self.shape(v)))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.gemm(a, b, false, false)
    }

    /// `op(a)·op(b)` with optional transposes of the last two axes.
    pub fn gemm(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (out, macs) = gemm_tensor(self.value(a), self.value(b), ta, tb)?;
        self.macs += macs;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Gemm { a, b, ta, tb }, rg))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return dim_err(format!("{what}: {:?} vs {:?}", self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    /// `x[..., n] + row[n]`, broadcasting the row over all leading axes.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let n = self.value(x).last_dim();
        if self.shape(row) != [n] {
            return dim_err(format!("add_row: row {:?} vs last axis {n}", self.shape(row)));
        }
        let r = self.value(row).data().to_vec();
        let mut out = self.value(x).clone();
        for chunk in out.data_mut().chunks_mut(n) {
            for (v, b) in chunk.iter_mut().zip(&r) {
                *v += b;
            }
        }
        let rg = self.rg(x) || self.rg(row);
        Ok(self.push(out, Op::AddRow(x, row), rg))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let out = self.value(x).map(|v| v * factor);
        let rg = self.rg(x);
        self.push(out, Op::Scale(x, factor), rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Reshape(x), rg))
    }

    /// Reorder axes; `perm[i]` is the source axis of output axis `i`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return dim_err(format!("invalid permutation {perm:?} for shape {shape:?}"));
        }
        let (data, s) = permute_data(self.value(x).data(), &shape, perm);
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(s, data)?, Op::Permute(x, perm.to_vec()), rg))
    }

    /// Stack `reps` copies of `x` along a new leading axis.
    pub fn tile(&mut self, x: Var, reps: usize) -> Var {
        let v = self.value(x);
        let mut shape = vec![reps];
        shape.extend_from_slice(v.shape());
        let data = v.data().repeat(reps);
        let rg = self.rg(x);
        self.push(Tensor::new(shape, data).expect("tile shape"), Op::Tile(x), rg)
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(*xs.first().ok_or_else(|| Error::Dimension("concat of nothing".into()))?).to_vec();
        if axis >= first.len() {
            return dim_err(format!("concat axis {axis} out of range for {first:?}"));
        }
        let outer: usize = first[..axis].iter().product();
        let mut total = 0;
        for &x in xs {
            let s = self.shape(x);
            if s.len() != first.len() || s[..axis] != first[..axis] || s[axis + 1..] != first[axis + 1..] {
                return dim_err(format!("concat: {s:?} incompatible with {first:?} on axis {axis}"));
            }
            total += s[axis];
        }
        let mut data = Vec::with_capacity(outer * total * first[axis + 1..].iter().product::<usize>());
        for o in 0..outer {
            for &x in xs {
                let v = self.value(x);
                let chunk = v.numel() / outer;
                data.extend_from_slice(&v.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let rg = xs.iter().any(|&x| self.rg(x));
        Ok(self.push(Tensor::new(shape, data)?, Op::Concat(xs.to_vec(), axis), rg))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        let n = out.last_dim();
        for row in out.data_mut().chunks_mut(n) {
            kernels::softmax_row(row);
        }
        let rg = self.rg(x);
        self.push(out, Op::Softmax(x), rg)
    }

    /// Layer normalisation over the last axis: `(x-μ)/sqrt(σ²+eps)·γ + β`, population variance.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let n = self.value(x).last_dim();
        if self.shape(gamma) != [n] || self.shape(beta) != [n] {
            return dim_err(format!("layer_norm: affine params must be [{n}]"));
        }
        let xv = self.value(x);
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let rows = xv.numel() / n;
        let mut xhat = Vec::with_capacity(xv.numel());
        let mut rstd = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(xv.numel());
        for row in xv.data().chunks(n) {
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd.push(rs);
            for (j, v) in row.iter().enumerate() {
                let h = (v - mean) * rs;
                xhat.push(h);
                out.push(h * g[j] + b[j]);
            }
        }
        let shape = xv.shape().to_vec();
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(Tensor::new(shape, out)?, Op::LayerNorm { x, gamma, beta, xhat, rstd }, rg))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(kernels::gelu);
        let rg = self.rg(x);
        self.push(out, Op::Gelu(x), rg)
    }

    /// Magnitude spectrum over the last axis: `[..., N] -> [..., N/2+1]`.
    pub fn rfft_mag(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let n = v.last_dim();
        kernels::check_fft_len(n)?;
        let bins = n / 2 + 1;
        let rows = v.numel() / n;
        let mut data = Vec::with_capacity(rows * bins);
        for row in v.data().chunks(n) {
            data.extend(kernels::rfft_mag(row)?);
        }
        let mut shape = v.shape().to_vec();
        *shape.last_mut().unwrap() = bins;
        self.macs += rows as u64 * rfft_macs(n);
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(shape, data)?, Op::RfftMag(x), rg))
    }

    /// Rotary embedding on `[..., L, dim]`; `positions[l]` is the position of sequence slot `l`.
    pub fn rope(&mut self, x: Var, positions: &[f64], base: f64) -> Result<Var> {
        let v = self.value(x);
        let s = v.shape();
        if s.len() < 2 || s[s.len() - 2] != positions.len() {
            return dim_err(format!("rope: {} positions for shape {s:?}", positions.len()));
        }
        let dim = v.last_dim();
        if dim % 2 != 0 {
            return Err(Error::Config(format!("rope needs an even head width, got {dim}")));
        }
        let mut out = v.clone();
        let seq = positions.len();
        for (r, row) in out.data_mut().chunks_mut(dim).enumerate() {
            kernels::rope_rotate_row(row, positions[r % seq], base, 1.0);
        }
        let rg = self.rg(x);
        Ok(self.push(out, Op::Rope { x, positions: positions.to_vec(), base }, rg))
    }

    /// Unroll 1-D convolution windows: `[N, L, Cin] -> [N·Lout, K·Cin]`, zero padded.
    pub fn im2col(&mut self, x: Var, kernel: usize, stride: usize, pad: usize) -> Result<Var> {
        let v = self.value(x);
        let s = v.shape();
        if s.len() != 3 || stride == 0 || s[1] + 2 * pad < kernel {
            return dim_err(format!("im2col: bad input {s:?} for kernel {kernel}, stride {stride}, pad {pad}"));
        }
        let (n, l, cin) = (s[0], s[1], s[2]);
        let lout = (l + 2 * pad - kernel) / stride + 1;
        let mut data = vec![0.0; n * lout * kernel * cin];
        for b in 0..n {
            for o in 0..lout {
                let row = (b * lout + o) * kernel * cin;
                for k in 0..kernel {
                    let t = (o * stride + k) as isize - pad as isize;
                    if t < 0 || t as usize >= l {
                        continue;
                    }
                    let src = (b * l + t as usize) * cin;
                    data[row + k * cin..row + (k + 1) * cin].copy_from_slice(&v.data()[src..src + cin]);
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(vec![n * lout, kernel * cin], data)?, Op::Im2col { x, kernel, stride, pad }, rg))
    }

    /// Replace the rows of `x[N, D]` flagged in `mask` by `fill[D]`.
    pub fn where_rows(&mut self, x: Var, fill: Var, mask: &[bool]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || mask.len() != s[0] || self.shape(fill) != [s[1]] {
            return dim_err(format!("where_rows: x {s:?}, fill {:?}, mask {}", self.shape(fill), mask.len()));
        }
        let f = self.value(fill).data().to_vec();
        let mut out = self.value(x).clone();
        for (row, &m) in out.data_mut().chunks_mut(s[1]).zip(mask) {
            if m {
                row.copy_from_slice(&f);
            }
        }
        let rg = self.rg(x) || self.rg(fill);
        Ok(self.push(out, Op::WhereRows { x, fill, mask: mask.to_vec() }, rg))
    }

    /// Row lookup `table[index[i]]`: `[R, D] -> [len(index), D]`.
    pub fn gather_rows(&mut self, table: Var, index: &[usize]) -> Result<Var> {
        let s = self.shape(table).to_vec();
        if s.len() != 2 || index.iter().any(|&i| i >= s[0]) {
            return dim_err(format!("gather_rows: table {s:?}, index {index:?}"));
        }
        let t = self.value(table);
        let mut data = Vec::with_capacity(index.len() * s[1]);
        for &i in index {
            data.extend_from_slice(t.row(i));
        }
        let rg = self.rg(table);
        Ok(self.push(Tensor::new(vec![index.len(), s[1]], data)?, Op::GatherRows { table, index: index.to_vec() }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(x);
        self.push(out, Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Mean softmax cross-entropy of `logits[B, K]` against class indices.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || labels.len() != s[0] || labels.iter().any(|&l| l >= s[1]) {
            return dim_err(format!("cross entropy: logits {s:?}, {} labels", labels.len()));
        }
        let mut probs = self.value(logits).data().to_vec();
        let mut loss = 0.0;
        for (row, &l) in probs.chunks_mut(s[1]).zip(labels) {
            kernels::softmax_row(row);
            loss -= row[l].max(f64::MIN_POSITIVE).ln();
        }
        loss /= s[0] as f64;
        let rg = self.rg(logits);
        Ok(self.push(Tensor::scalar(loss), Op::SoftmaxXent { logits, labels: labels.to_vec(), probs }, rg))
    }

    /// Mean binary cross-entropy of `logits[B, K]` against 0/1 targets (multi-label heads).
    pub fn bce_with_logits(&mut self, logits: Var, targets: &Tensor) -> Result<Var> {
        self.same_shape_t(logits, targets)?;
        let z = self.value(logits).data();
        let n = z.len() as f64;
        let loss = z
            .iter()
            .zip(targets.data())
            .map(|(&z, &t)| z.max(0.0) - z * t + (-z.abs()).exp().ln_1p())
            .sum::<f64>()
            / n;
        let rg = self.rg(logits);
        Ok(self.push(Tensor::scalar(loss), Op::BceLogits { logits, targets: targets.data().to_vec() }, rg))
    }

    fn same_shape_t(&self, a: Var, t: &Tensor) -> Result<()> {
        if self.shape(a) != t.shape() {
            return dim_err(format!("{:?} vs {:?}", self.shape(a), t.shape()));
        }
        Ok(())
    }

    /// Quantise-dequantise with a straight-through gradient inside the clip range.
    pub fn fake_quant(&mut self, x: Var, grid: &QuantGrid) -> Result<Var> {
        let v = self.value(x);
        let channels = grid.scales.len();
        if channels == 0 || v.numel() % channels != 0 || grid.zero_points.len() != channels {
            return dim_err(format!("fake_quant: {} scales for {} values", channels, v.numel()));
        }
        let chunk = v.numel() / channels;
        let mut out = Vec::with_capacity(v.numel());
        let mut pass = Vec::with_capacity(v.numel());
        for (c, vals) in v.data().chunks(chunk).enumerate() {
            for &x in vals {
                let (y, inside) = qdq_value(x, grid.scales[c], grid.zero_points[c], grid.qmin, grid.qmax);
                out.push(y);
                pass.push(inside);
            }
        }
        let shape = v.shape().to_vec();
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(shape, out)?, Op::FakeQuant { x, pass }, rg))
    }

    fn accumulate(&mut self, target: Var, g: Tensor) {
        if !self.nodes[target.0].requires_grad {
            return;
        }
        match &mut self.grads[target.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    /// Reverse sweep from a scalar `loss`; gradients accumulate on every node that requires them.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return dim_err(format!("backward needs a scalar, got {:?}", self.shape(loss)));
        }
        if !self.rg(loss) {
            return Err(Error::NoGraph);
        }
        self.grads = vec![None; self.nodes.len()];
        self.grads[loss.0] = Some(Tensor::scalar(1.0));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad || matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = self.grads[i].take() else { continue };
            self.backprop_node(i, &g)?;
        }
        Ok(())
    }

    fn backprop_node(&mut self, i: usize, g: &Tensor) -> Result<()> {
        // Temporarily move the op out so parents can be borrowed mutably.
        let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        let res = self.backprop_op(i, &op, g);
        self.nodes[i].op = op;
        res
    }

    fn backprop_op(&mut self, i: usize, op: &Op, g: &Tensor) -> Result<()> {
        match *op {
            Op::Leaf => {}
            Op::Gemm { a, b, ta, tb } => {
                if self.rg(a) {
                    let bv = self.value(b);
                    let (da, _) = if !ta { gemm_tensor(g, bv, false, !tb)? } else { gemm_tensor(bv, g, tb, true)? };
                    self.accumulate(a, da);
                }
                if self.rg(b) {
                    let av = self.value(a);
                    let (db, _) = if !tb { gemm_tensor(av, g, !ta, false)? } else { gemm_tensor(g, av, true, ta)? };
                    self.accumulate(b, db);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(a, g.clone());
                self.accumulate(b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(a, g.clone());
                self.accumulate(b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                if self.rg(a) {
                    let d = g.zip_map(self.value(b), |g, y| g * y);
                    self.accumulate(a, d);
                }
                if self.rg(b) {
                    let d = g.zip_map(self.value(a), |g, x| g * x);
                    self.accumulate(b, d);
                }
            }
            Op::AddRow(x, row) => {
                self.accumulate(x, g.clone());
                if self.rg(row) {
                    let n = g.last_dim();
                    let mut acc = vec![0.0; n];
                    for chunk in g.data().chunks(n) {
                        for (a, v) in acc.iter_mut().zip(chunk) {
                            *a += v;
                        }
                    }
                    self.accumulate(row, Tensor::new(vec![n], acc)?);
                }
            }
            Op::Scale(x, f) => self.accumulate(x, g.map(|v| v * f)),
            Op::Reshape(x) => {
                let s = self.shape(x).to_vec();
                self.accumulate(x, g.clone().reshape(&s)?);
            }
            Op::Permute(x, ref perm) => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                let (d, s) = permute_data(g.data(), g.shape(), &inv);
                self.accumulate(x, Tensor::new(s, d)?);
            }
            Op::Tile(x) => {
                let s = self.shape(x).to_vec();
                let n = self.value(x).numel();
                let mut acc = vec![0.0; n];
                for chunk in g.data().chunks(n) {
                    for (a, v) in acc.iter_mut().zip(chunk) {
                        *a += v;
                    }
                }
                self.accumulate(x, Tensor::new(s, acc)?);
            }
            Op::Concat(ref xs, axis) => {
                let outer: usize = g.shape()[..axis].iter().product();
                let sizes: Vec<usize> = xs.iter().map(|&x| self.value(x).numel() / outer).collect();
                let total: usize = sizes.iter().sum();
                for (j, &x) in xs.iter().enumerate() {
                    if !self.rg(x) {
                        continue;
                    }
                    let off: usize = sizes[..j].iter().sum();
                    let mut d = Vec::with_capacity(sizes[j] * outer);
                    for o in 0..outer {
                        d.extend_from_slice(&g.data()[o * total + off..o * total + off + sizes[j]]);
                    }
                    let s = self.shape(x).to_vec();
                    self.accumulate(x, Tensor::new(s, d)?);
                }
            }
            Op::Softmax(x) => {
                let y = &self.nodes[i].value;
                let n = y.last_dim();
                let mut d = Vec::with_capacity(y.numel());
                for (yr, gr) in y.data().chunks(n).zip(g.data().chunks(n)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    d.extend(yr.iter().zip(gr).map(|(y, g)| y * (g - dot)));
                }
                let s = y.shape().to_vec();
                self.accumulate(x, Tensor::new(s, d)?);
            }
            Op::LayerNorm { x, gamma, beta, ref xhat, ref rstd } => {
                let n = g.last_dim();
                let gam = self.value(gamma).data().to_vec();
                if self.rg(gamma) || self.rg(beta) {
                    let mut dg = vec![0.0; n];
                    let mut db = vec![0.0; n];
                    for (gr, hr) in g.data().chunks(n).zip(xhat.chunks(n)) {
                        for j in 0..n {
                            dg[j] += gr[j] * hr[j];
                            db[j] += gr[j];
                        }
                    }
                    self.accumulate(gamma, Tensor::new(vec![n], dg)?);
                    self.accumulate(beta, Tensor::new(vec![n], db)?);
                }
                if self.rg(x) {
                    let mut dx = Vec::with_capacity(g.numel());
                    for ((gr, hr), &rs) in g.data().chunks(n).zip(xhat.chunks(n)).zip(rstd) {
                        let dh: Vec<f64> = gr.iter().zip(&gam).map(|(a, b)| a * b).collect();
                        let m1 = dh.iter().sum::<f64>() / n as f64;
                        let m2 = dh.iter().zip(hr).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                        dx.extend(dh.iter().zip(hr).map(|(d, h)| rs * (d - m1 - h * m2)));
                    }
                    let s = self.shape(x).to_vec();
                    self.accumulate(x, Tensor::new(s, dx)?);
                }
            }
            Op::Gelu(x) => {
                let d = g.zip_map(self.value(x), |g, x| g * kernels::gelu_grad(x));
                self.accumulate(x, d);
            }
            Op::RfftMag(x) => {
                let xv = self.value(x);
                let n = xv.last_dim();
                let bins = g.last_dim();
                let mut d = Vec::with_capacity(xv.numel());
                for (xr, gr) in xv.data().chunks(n).zip(g.data().chunks(bins)) {
                    d.extend(kernels::rfft_mag_backward(xr, gr)?);
                }
                let s = xv.shape().to_vec();
                self.accumulate(x, Tensor::new(s, d)?);
            }
            Op::Rope { x, ref positions, base } => {
                let mut d = g.clone();
                let dim = d.last_dim();
                let seq = positions.len();
                for (r, row) in d.data_mut().chunks_mut(dim).enumerate() {
                    kernels::rope_rotate_row(row, positions[r % seq], base, -1.0);
                }
                self.accumulate(x, d);
            }
            Op::Im2col { x, kernel, stride, pad } => {
                let s = self.shape(x).to_vec();
                let (n, l, cin) = (s[0], s[1], s[2]);
                let lout = (l + 2 * pad - kernel) / stride + 1;
                let mut d = vec![0.0; n * l * cin];
                for b in 0..n {
                    for o in 0..lout {
                        let row = (b * lout + o) * kernel * cin;
                        for k in 0..kernel {
                            let t = (o * stride + k) as isize - pad as isize;
                            if t < 0 || t as usize >= l {
                                continue;
                            }
                            let dst = (b * l + t as usize) * cin;
                            for c in 0..cin {
                                d[dst + c] += g.data()[row + k * cin + c];
                            }
                        }
                    }
                }
                self.accumulate(x, Tensor::new(s, d)?);
            }
            Op::WhereRows { x, fill, ref mask } => {
                let w = g.last_dim();
                if self.rg(x) {
                    let mut d = g.clone();
                    for (row, &m) in d.data_mut().chunks_mut(w).zip(mask) {
                        if m {
                            row.iter_mut().for_each(|v| *v = 0.0);
                        }
                    }
                    self.accumulate(x, d);
                }
                if self.rg(fill) {
                    let mut acc = vec![0.0; w];
                    for (row, &m) in g.data().chunks(w).zip(mask) {
                        if m {
                            acc.iter_mut().zip(row).for_each(|(a, v)| *a += v);
                        }
                    }
                    self.accumulate(fill, Tensor::new(vec![w], acc)?);
                }
            }
            Op::GatherRows { table, ref index } => {
                let s = self.shape(table).to_vec();
                let mut d = vec![0.0; s[0] * s[1]];
                for (row, &ix) in g.data().chunks(s[1]).zip(index) {
                    d[ix * s[1]..(ix + 1) * s[1]].iter_mut().zip(row).for_each(|(a, v)| *a += v);
                }
                self.accumulate(table, Tensor::new(s, d)?);
            }
            Op::Sum(x) => {
                let s = self.shape(x).to_vec();
                self.accumulate(x, Tensor::full(&s, g.data()[0]));
            }
            Op::SoftmaxXent { logits, ref labels, ref probs } => {
                let s = self.shape(logits).to_vec();
                let scale = g.data()[0] / s[0] as f64;
                let mut d = probs.clone();
                for (row, &l) in d.chunks_mut(s[1]).zip(labels) {
                    row[l] -= 1.0;
                    row.iter_mut().for_each(|v| *v *= scale);
                }
                self.accumulate(logits, Tensor::new(s, d)?);
            }
            Op::BceLogits { logits, ref targets } => {
                let z = self.value(logits);
                let scale = g.data()[0] / z.numel() as f64;
                let d: Vec<f64> = z
                    .data()
                    .iter()
                    .zip(targets)
                    .map(|(&z, &t)| (1.0 / (1.0 + (-z).exp()) - t) * scale)
                    .collect();
                let s = z.shape().to_vec();
                self.accumulate(logits, Tensor::new(s, d)?);
            }
            Op::FakeQuant { x, ref pass } => {
                let mut d = g.clone();
                for (v, &p) in d.data_mut().iter_mut().zip(pass) {
                    if !p {
                        *v = 0.0;
                    }
                }
                self.accumulate(x, d);
            }
        }
        Ok(())
    }
}
