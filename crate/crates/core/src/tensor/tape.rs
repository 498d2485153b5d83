//! Computation tape. Every op appends a node holding its output value and
//! the data its backward rule needs; `backward` replays nodes in reverse.

use super::kernels::{self, gemm, View};
use super::{Result, Scalar, Tensor, TensorError};
use crate::topology::LayerMask;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
    },
    /// `x · (w⊙m)` or, with `transpose_w`, `x · (w⊙m)ᵀ`.
    MaskedMatMul {
        x: Var,
        w: Var,
        effective: Vec<T>,
        transpose_w: bool,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Gelu {
        x: Var,
    },
    MaskedSoftmax {
        x: Var,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        heads: usize,
        probs: Vec<T>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<T>,
    },
    Sum {
        x: Var,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    grad: Option<Vec<T>>,
    requires_grad: bool,
    op: Op<T>,
}

#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

const LN_EPS: f64 = 1e-5;

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Vec<T>> {
        self.nodes[v.0].grad.take()
    }

    fn push(&mut self, value: Tensor<T>, requires_grad: bool, op: Op<T>) -> Var {
        self.nodes.push(Node { value, grad: None, requires_grad, op });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn mat(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.matrix_dims()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.mat(a);
        let (k2, n) = self.mat(b);
        if k != k2 {
            return Err(TensorError::Dimension { op: "matmul", detail: format!("{m}x{k} · {k2}x{n}") });
        }
        let out = kernels::matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor { shape: vec![m, n], data: out }, rg, Op::MatMul { a, b }))
    }

    /// `x · (w ⊙ mask)`. The gradient reaching `w` is dense: inactive
    /// positions receive `xᵀ·g` as if they were live.
    pub fn masked_matmul(&mut self, x: Var, w: Var, mask: &LayerMask) -> Result<Var> {
        self.masked_matmul_impl(x, w, Some(mask), false)
    }

    /// `x · (w ⊙ mask)ᵀ` for weights stored output-major (e.g. a tied head).
    pub fn masked_matmul_t(&mut self, x: Var, w: Var, mask: Option<&LayerMask>) -> Result<Var> {
        self.masked_matmul_impl(x, w, mask, true)
    }

    fn masked_matmul_impl(&mut self, x: Var, w: Var, mask: Option<&LayerMask>, transpose_w: bool) -> Result<Var> {
        let (m, k) = self.mat(x);
        let (wr, wc) = self.mat(w);
        if let Some(mask) = mask {
            if mask.rows() != wr || mask.cols() != wc {
                return Err(TensorError::Dimension {
                    op: "masked_matmul",
                    detail: format!("mask {}x{} vs weight {wr}x{wc}", mask.rows(), mask.cols()),
                });
            }
        }
        let (inner, n) = if transpose_w { (wc, wr) } else { (wr, wc) };
        if inner != k {
            return Err(TensorError::Dimension {
                op: "masked_matmul",
                detail: format!("{m}x{k} · weight {wr}x{wc} (transposed: {transpose_w})"),
            });
        }
        let mut effective = self.value(w).data().to_vec();
        if let Some(mask) = mask {
            mask.apply(&mut effective);
        }
        let mut out = vec![T::zero(); m * n];
        let wv = if transpose_w { View::transposed(wc) } else { View::row_major(wc) };
        gemm(
            m,
            k,
            n,
            T::one(),
            self.value(x).data(),
            View::row_major(k),
            &effective,
            wv,
            T::zero(),
            &mut out,
            View::row_major(n),
        );
        let rg = self.rg(x) || self.rg(w);
        Ok(self.push(Tensor { shape: vec![m, n], data: out }, rg, Op::MaskedMatMul { x, w, effective, transpose_w }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let data = self.zip(a, b, |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        let shape = self.value(a).shape().to_vec();
        Ok(self.push(Tensor { shape, data }, rg, Op::Add { a, b }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data = self.zip(a, b, |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        let shape = self.value(a).shape().to_vec();
        Ok(self.push(Tensor { shape, data }, rg, Op::Mul { a, b }))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(TensorError::Dimension {
                op,
                detail: format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape()),
            });
        }
        Ok(())
    }

    fn zip(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Vec<T> {
        self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| f(x, y)).collect()
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let src = self.value(x);
        let data = src.data().iter().map(|&v| kernels::gelu(v)).collect();
        let shape = src.shape().to_vec();
        let rg = self.rg(x);
        self.push(Tensor { shape, data }, rg, Op::Gelu { x })
    }

    /// Row-wise softmax of a `rows×cols` matrix where `allowed` (same
    /// layout) marks live entries. Masked entries come out exactly 0.
    pub fn softmax_masked(&mut self, x: Var, allowed: &[bool]) -> Result<Var> {
        let (rows, cols) = self.mat(x);
        if allowed.len() != rows * cols {
            return Err(TensorError::Dimension {
                op: "softmax_masked",
                detail: format!("mask length {} for {rows}x{cols}", allowed.len()),
            });
        }
        let mut data = self.value(x).data().to_vec();
        for r in 0..rows {
            let span = r * cols..(r + 1) * cols;
            if !kernels::masked_softmax_row(&mut data[span.clone()], &allowed[span]) {
                return Err(TensorError::EmptySoftmaxRow { row: r });
            }
        }
        let shape = self.value(x).shape().to_vec();
        let rg = self.rg(x);
        Ok(self.push(Tensor { shape, data }, rg, Op::MaskedSoftmax { x }))
    }

    /// Layer normalization over the last dimension with a learned gain and
    /// no bias.
    pub fn layernorm(&mut self, x: Var, gain: Var) -> Result<Var> {
        let (rows, cols) = self.mat(x);
        if self.value(gain).len() != cols {
            return Err(TensorError::Dimension {
                op: "layernorm",
                detail: format!("gain length {} for width {cols}", self.value(gain).len()),
            });
        }
        let eps = T::from_f64_lossy(LN_EPS);
        let n = T::from_usize(cols).unwrap();
        let src = self.value(x).data();
        let g = self.value(gain).data();
        let mut xhat = vec![T::zero(); rows * cols];
        let mut inv_std = vec![T::zero(); rows];
        let mut out = vec![T::zero(); rows * cols];
        for r in 0..rows {
            let row = &src[r * cols..(r + 1) * cols];
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let is = T::one() / (var + eps).sqrt();
            inv_std[r] = is;
            for c in 0..cols {
                let h = (row[c] - mean) * is;
                xhat[r * cols + c] = h;
                out[r * cols + c] = h * g[c];
            }
        }
        let shape = self.value(x).shape().to_vec();
        let rg = self.rg(x) || self.rg(gain);
        Ok(self.push(Tensor { shape, data: out }, rg, Op::LayerNorm { x, gain, xhat, inv_std }))
    }

    /// Row lookup `table[ids]`, optionally through a mask on the table.
    pub fn gather(&mut self, table: Var, ids: &[usize], mask: Option<&LayerMask>) -> Result<Var> {
        let (rows, cols) = self.mat(table);
        let src = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * cols);
        for &id in ids {
            if id >= rows {
                return Err(TensorError::OutOfRange { what: "embedding table", index: id, size: rows });
            }
            let start = out.len();
            out.extend_from_slice(&src[id * cols..(id + 1) * cols]);
            if let Some(mask) = mask {
                for c in 0..cols {
                    if !mask.is_active(id * cols + c) {
                        out[start + c] = T::zero();
                    }
                }
            }
        }
        let rg = self.rg(table);
        Ok(self.push(Tensor { shape: vec![ids.len(), cols], data: out }, rg, Op::Gather { table, ids: ids.to_vec() }))
    }

    /// Multi-head scaled dot-product attention over `batch` sequences laid
    /// out as `(batch·seq)×width` rows. Every head uses the same `allowed`
    /// `seq×seq` connectivity, intersected with the causal mask.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, batch: usize, heads: usize, allowed: &[bool]) -> Result<Var> {
        let (rows, width) = self.mat(q);
        if self.mat(k) != (rows, width) || self.mat(v) != (rows, width) {
            return Err(TensorError::Dimension { op: "attention", detail: "q/k/v shapes differ".into() });
        }
        if batch == 0 || heads == 0 || rows % batch != 0 || width % heads != 0 {
            return Err(TensorError::Dimension {
                op: "attention",
                detail: format!("{rows}x{width} with batch {batch}, heads {heads}"),
            });
        }
        let seq = rows / batch;
        let d = width / heads;
        if allowed.len() != seq * seq {
            return Err(TensorError::Dimension {
                op: "attention",
                detail: format!("pattern length {} for sequence {seq}", allowed.len()),
            });
        }
        let scale = T::one() / T::from_usize(d).unwrap().sqrt();
        let qd = self.value(q).data();
        let kd = self.value(k).data();
        let vd = self.value(v).data();
        let mut probs = vec![T::zero(); batch * heads * seq * seq];
        let mut out = vec![T::zero(); rows * width];
        for b in 0..batch {
            for h in 0..heads {
                let base = b * seq * width + h * d;
                let p = &mut probs[(b * heads + h) * seq * seq..][..seq * seq];
                gemm(
                    seq,
                    d,
                    seq,
                    scale,
                    qd,
                    View::at(base, width),
                    kd,
                    View::at(base, width).t(),
                    T::zero(),
                    p,
                    View::row_major(seq),
                );
                for i in 0..seq {
                    // columns past the diagonal are never allowed
                    let row = &mut p[i * seq..(i + 1) * seq];
                    let (live, future) = row.split_at_mut(i + 1);
                    future.fill(T::zero());
                    if !kernels::masked_softmax_row(live, &allowed[i * seq..i * seq + i + 1]) {
                        return Err(TensorError::EmptySoftmaxRow { row: i });
                    }
                }
                gemm(
                    seq,
                    seq,
                    d,
                    T::one(),
                    p,
                    View::row_major(seq),
                    vd,
                    View::at(base, width),
                    T::zero(),
                    &mut out,
                    View::at(base, width),
                );
            }
        }
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        Ok(self.push(
            Tensor { shape: vec![rows, width], data: out },
            rg,
            Op::Attention { q, k, v, batch, heads, probs },
        ))
    }

    /// Mean next-token cross entropy of `logits (T×V)` against `targets`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (rows, vocab) = self.mat(logits);
        if targets.len() != rows {
            return Err(TensorError::Dimension {
                op: "cross_entropy",
                detail: format!("{} targets for {rows} rows", targets.len()),
            });
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= vocab) {
            return Err(TensorError::OutOfRange { what: "target id", index: bad, size: vocab });
        }
        let src = self.value(logits).data();
        let mut probs = vec![T::zero(); rows * vocab];
        let mut loss = 0.0f64;
        for r in 0..rows {
            let row = &src[r * vocab..(r + 1) * vocab];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut sum = T::zero();
            for (p, &z) in probs[r * vocab..(r + 1) * vocab].iter_mut().zip(row) {
                *p = (z - max).exp();
                sum = sum + *p;
            }
            for p in &mut probs[r * vocab..(r + 1) * vocab] {
                *p = *p / sum;
            }
            let logp = (row[targets[r]] - max) - sum.ln();
            loss -= logp.to_f64_lossy();
        }
        let loss = T::from_f64_lossy(loss / rows as f64);
        let rg = self.rg(logits);
        Ok(self.push(Tensor::scalar(loss), rg, Op::CrossEntropy { logits, targets: targets.to_vec(), probs }))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), rg, Op::Sum { x })
    }

    /// Reverse sweep from a scalar output.
    pub fn backward(&mut self, out: Var) -> Result<()> {
        if self.value(out).len() != 1 {
            return Err(TensorError::NotScalar(self.value(out).shape().to_vec()));
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        self.nodes[out.0].grad = Some(vec![T::one()]);
        for idx in (0..=out.0).rev() {
            let (before, rest) = self.nodes.split_at_mut(idx);
            let node = &mut rest[0];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = node.grad.as_ref() else { continue };
            let contributions = node_backward(before, node, g);
            for (var, delta) in contributions {
                let target = &mut before[var.0];
                if !target.requires_grad {
                    continue;
                }
                match target.grad.as_mut() {
                    Some(acc) => kernels::add_assign(acc, &delta),
                    None => target.grad = Some(delta),
                }
            }
        }
        Ok(())
    }
}

fn node_backward<T: Scalar>(before: &[Node<T>], node: &Node<T>, g: &[T]) -> Vec<(Var, Vec<T>)> {
    let val = |v: Var| before[v.0].value.data();
    let dims = |v: Var| before[v.0].value.matrix_dims();
    let wants = |v: Var| before[v.0].requires_grad;
    let mut out = Vec::new();
    match &node.op {
        Op::Leaf => {}
        Op::MatMul { a, b } => {
            let (m, k) = dims(*a);
            let (_, n) = dims(*b);
            if wants(*a) {
                let mut da = vec![T::zero(); m * k];
                gemm(
                    m,
                    n,
                    k,
                    T::one(),
                    g,
                    View::row_major(n),
                    val(*b),
                    View::transposed(n),
                    T::zero(),
                    &mut da,
                    View::row_major(k),
                );
                out.push((*a, da));
            }
            if wants(*b) {
                let mut db = vec![T::zero(); k * n];
                gemm(
                    k,
                    m,
                    n,
                    T::one(),
                    val(*a),
                    View::transposed(k),
                    g,
                    View::row_major(n),
                    T::zero(),
                    &mut db,
                    View::row_major(n),
                );
                out.push((*b, db));
            }
        }
        Op::MaskedMatMul { x, w, effective, transpose_w } => {
            let (m, k) = dims(*x);
            let (wr, wc) = dims(*w);
            let n = if *transpose_w { wr } else { wc };
            if wants(*x) {
                let mut dx = vec![T::zero(); m * k];
                // dx = g · W_effᵀ (or g · W_eff when W is stored transposed)
                let wv = if *transpose_w { View::row_major(wc) } else { View::transposed(wc) };
                gemm(m, n, k, T::one(), g, View::row_major(n), effective, wv, T::zero(), &mut dx, View::row_major(k));
                out.push((*x, dx));
            }
            if wants(*w) {
                let mut dw = vec![T::zero(); wr * wc];
                if *transpose_w {
                    // W is n×k: dW = gᵀ · x
                    gemm(
                        n,
                        m,
                        k,
                        T::one(),
                        g,
                        View::transposed(n),
                        val(*x),
                        View::row_major(k),
                        T::zero(),
                        &mut dw,
                        View::row_major(k),
                    );
                } else {
                    gemm(
                        k,
                        m,
                        n,
                        T::one(),
                        val(*x),
                        View::transposed(k),
                        g,
                        View::row_major(n),
                        T::zero(),
                        &mut dw,
                        View::row_major(n),
                    );
                }
                out.push((*w, dw));
            }
        }
        Op::Add { a, b } => {
            if wants(*a) {
                out.push((*a, g.to_vec()));
            }
            if wants(*b) {
                out.push((*b, g.to_vec()));
            }
        }
        Op::Mul { a, b } => {
            if wants(*a) {
                out.push((*a, g.iter().zip(val(*b)).map(|(&gi, &bi)| gi * bi).collect()));
            }
            if wants(*b) {
                out.push((*b, g.iter().zip(val(*a)).map(|(&gi, &ai)| gi * ai).collect()));
            }
        }
        Op::Gelu { x } => {
            out.push((*x, g.iter().zip(val(*x)).map(|(&gi, &xi)| gi * kernels::gelu_grad(xi)).collect()));
        }
        Op::MaskedSoftmax { x } => {
            let (rows, cols) = dims(*x);
            let y = node.value.data();
            let mut dx = vec![T::zero(); rows * cols];
            for r in 0..rows {
                let s = r * cols..(r + 1) * cols;
                kernels::softmax_row_backward(&y[s.clone()], &g[s.clone()], &mut dx[s]);
            }
            out.push((*x, dx));
        }
        Op::LayerNorm { x, gain, xhat, inv_std } => {
            let (rows, cols) = dims(*x);
            let gv = val(*gain);
            let n = T::from_usize(cols).unwrap();
            if wants(*gain) {
                let mut dg = vec![T::zero(); cols];
                for r in 0..rows {
                    for c in 0..cols {
                        dg[c] = dg[c] + g[r * cols + c] * xhat[r * cols + c];
                    }
                }
                out.push((*gain, dg));
            }
            if wants(*x) {
                let mut dx = vec![T::zero(); rows * cols];
                for (r, &inv) in inv_std.iter().enumerate() {
                    let s = r * cols;
                    let mut mean_d = T::zero();
                    let mut mean_dx = T::zero();
                    for c in 0..cols {
                        let d = g[s + c] * gv[c];
                        mean_d = mean_d + d;
                        mean_dx = mean_dx + d * xhat[s + c];
                    }
                    mean_d = mean_d / n;
                    mean_dx = mean_dx / n;
                    for c in 0..cols {
                        let d = g[s + c] * gv[c];
                        dx[s + c] = inv * (d - mean_d - xhat[s + c] * mean_dx);
                    }
                }
                out.push((*x, dx));
            }
        }
        Op::Gather { table, ids } => {
            let (rows, cols) = dims(*table);
            let mut dt = vec![T::zero(); rows * cols];
            for (r, &id) in ids.iter().enumerate() {
                kernels::add_assign(&mut dt[id * cols..(id + 1) * cols], &g[r * cols..(r + 1) * cols]);
            }
            out.push((*table, dt));
        }
        Op::Attention { q, k, v, batch, heads, probs } => {
            let (rows, width) = dims(*q);
            let seq = rows / batch;
            let d = width / heads;
            let scale = T::one() / T::from_usize(d).unwrap().sqrt();
            let (qd, kd, vd) = (val(*q), val(*k), val(*v));
            let mut dq = vec![T::zero(); rows * width];
            let mut dk = vec![T::zero(); rows * width];
            let mut dv = vec![T::zero(); rows * width];
            let mut dp = vec![T::zero(); seq * seq];
            let mut ds = vec![T::zero(); seq * seq];
            for b in 0..*batch {
                for h in 0..*heads {
                    let base = b * seq * width + h * d;
                    let at = View::at(base, width);
                    let p = &probs[(b * heads + h) * seq * seq..][..seq * seq];
                    // dP = dO · Vᵀ ; dV = Pᵀ · dO
                    gemm(seq, d, seq, T::one(), g, at, vd, at.t(), T::zero(), &mut dp, View::row_major(seq));
                    gemm(seq, seq, d, T::one(), p, View::transposed(seq), g, at, T::one(), &mut dv, at);
                    ds.iter_mut().for_each(|x| *x = T::zero());
                    for i in 0..seq {
                        let s = i * seq..(i + 1) * seq;
                        kernels::softmax_row_backward(&p[s.clone()], &dp[s.clone()], &mut ds[s]);
                    }
                    // S = scale · Q Kᵀ
                    gemm(seq, seq, d, scale, &ds, View::row_major(seq), kd, at, T::one(), &mut dq, at);
                    gemm(seq, seq, d, scale, &ds, View::transposed(seq), qd, at, T::one(), &mut dk, at);
                }
            }
            out.push((*q, dq));
            out.push((*k, dk));
            out.push((*v, dv));
        }
        Op::CrossEntropy { logits, targets, probs } => {
            let (rows, vocab) = dims(*logits);
            let scale = g[0] / T::from_usize(rows).unwrap();
            let mut dl: Vec<T> = probs.iter().map(|&p| p * scale).collect();
            for (r, &t) in targets.iter().enumerate() {
                dl[r * vocab + t] = dl[r * vocab + t] - scale;
            }
            out.push((*logits, dl));
        }
        Op::Sum { x } => {
            out.push((*x, vec![g[0]; before[x.0].value.len()]));
        }
    }
    out
}
