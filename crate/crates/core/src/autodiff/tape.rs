use super::{AutodiffError, Param, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Broadcast {
    Same,
    /// rhs is `[n]` or `[1, n]` against lhs `[m, n]`.
    Row,
    /// rhs is `[m, 1]` against lhs `[m, n]`.
    Col,
    Scalar,
}

impl Broadcast {
    #[inline]
    fn rhs_index(self, i: usize, cols: usize) -> usize {
        match self {
            Broadcast::Same => i,
            Broadcast::Row => i % cols,
            Broadcast::Col => i / cols,
            Broadcast::Scalar => 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Binary(BinaryKind, Var, Var, Broadcast),
    Scale(Var, f32),
    Relu(Var),
    Gelu(Var),
    Softmax(Var),
    LogSoftmax(Var),
    Log(Var),
    ClampMin(Var, f32),
    Transpose(Var),
    Reshape(Var),
    Concat(Vec<Var>),
    Sum(Var),
    Mean(Var),
    SumRows(Var),
    StraightThrough(Var, Vec<bool>),
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Append-only record of a forward computation.
///
/// Nodes are pushed in evaluation order, so every node's inputs precede it and
/// a single reverse sweep is a valid backward pass.
#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f32>>>,
}

impl Gradients {
    /// `None` when the variable does not require grad or is unreachable from the loss.
    pub fn get(&self, v: Var) -> Option<&[f32]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Accumulates the gradient of `v` into `param`, if there is one.
    pub fn write_to(&self, v: Var, param: &mut Param) -> Result<(), AutodiffError> {
        if let Some(g) = self.get(v) {
            param.tensor.accumulate_grad(g)?;
        }
        Ok(())
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn mismatch(op: &'static str, detail: String) -> AutodiffError {
    AutodiffError::ShapeMismatch { op, detail }
}

fn rows_cols(shape: &[usize]) -> (usize, usize) {
    let cols = *shape.last().unwrap_or(&1);
    let numel: usize = shape.iter().product();
    (numel.checked_div(cols).unwrap_or(0), cols)
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Scalar value of a one-element node.
    pub fn scalar(&self, v: Var) -> f32 {
        self.nodes[v.0].value.data()[0]
    }

    fn push(&mut self, data: Vec<f32>, shape: Vec<usize>, op: Op, requires_grad: bool) -> Var {
        let mut value = Tensor::new(shape, data).expect("op produced consistent shape");
        value.set_requires_grad(false);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Records a leaf; it takes `requires_grad` from the tensor.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        let rg = t.requires_grad();
        self.push(t.data().to_vec(), t.shape().to_vec(), Op::Leaf, rg)
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.push(t.data().to_vec(), t.shape().to_vec(), Op::Leaf, false)
    }

    pub fn param(&mut self, p: &Param) -> Var {
        self.leaf(&p.tensor)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        let (m, k, n) = match (sa, sb) {
            ([m, k], [k2, n]) if k == k2 => (*m, *k, *n),
            _ => {
                return Err(mismatch(
                    "matmul",
                    format!("cannot contract {sa:?} with {sb:?}"),
                ))
            }
        };
        let out = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, vec![m, n], Op::MatMul(a, b), rg))
    }

    fn broadcast_kind(&self, op: &'static str, a: Var, b: Var) -> Result<Broadcast, AutodiffError> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa == sb {
            return Ok(Broadcast::Same);
        }
        if self.value(b).numel() == 1 {
            return Ok(Broadcast::Scalar);
        }
        match (sa, sb) {
            ([_, n], [n2]) | ([_, n], [1, n2]) if n == n2 => Ok(Broadcast::Row),
            ([m, _], [m2, 1]) if m == m2 => Ok(Broadcast::Col),
            _ => Err(mismatch(op, format!("cannot broadcast {sb:?} onto {sa:?}"))),
        }
    }

    fn binary(&mut self, kind: BinaryKind, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let name = match kind {
            BinaryKind::Add => "add",
            BinaryKind::Sub => "sub",
            BinaryKind::Mul => "mul",
            BinaryKind::Div => "div",
        };
        let bc = self.broadcast_kind(name, a, b)?;
        let av = self.value(a);
        let bv = self.value(b).data();
        let (_, cols) = rows_cols(av.shape());
        let out: Vec<f32> = av
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let y = bv[bc.rhs_index(i, cols)];
                match kind {
                    BinaryKind::Add => x + y,
                    BinaryKind::Sub => x - y,
                    BinaryKind::Mul => x * y,
                    BinaryKind::Div => x / y,
                }
            })
            .collect();
        let shape = av.shape().to_vec();
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, shape, Op::Binary(kind, a, b, bc), rg))
    }

    /// Elementwise sum; `b` may broadcast as a row, a column or a scalar.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.binary(BinaryKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.binary(BinaryKind::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.binary(BinaryKind::Div, a, b)
    }

    pub fn scale(&mut self, a: Var, k: f32) -> Var {
        let v = self.value(a);
        let out = v.data().iter().map(|x| x * k).collect();
        let shape = v.shape().to_vec();
        let rg = self.rg(&[a]);
        self.push(out, shape, Op::Scale(a, k), rg)
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f32) -> f32) -> Var {
        let v = self.value(a);
        let out = v.data().iter().map(|&x| f(x)).collect();
        let shape = v.shape().to_vec();
        let rg = self.rg(&[a]);
        self.push(out, shape, op, rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Relu(a), |x| x.max(0.0))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Gelu(a), |x| {
            let x = x as f64;
            (0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())) as f32
        })
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, Op::Log(a), f32::ln)
    }

    pub fn clamp_min(&mut self, a: Var, floor: f32) -> Var {
        self.unary(a, Op::ClampMin(a, floor), |x| x.max(floor))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let (rows, cols) = rows_cols(v.shape());
        let mut out = vec![0.0f32; v.numel()];
        for r in 0..rows {
            let x = &v.data()[r * cols..(r + 1) * cols];
            let m = x.iter().fold(f32::NEG_INFINITY, |m, &y| m.max(y)) as f64;
            let e: Vec<f64> = x.iter().map(|&y| (y as f64 - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for (o, ei) in out[r * cols..(r + 1) * cols].iter_mut().zip(&e) {
                *o = (ei / z) as f32;
            }
        }
        let shape = v.shape().to_vec();
        let rg = self.rg(&[a]);
        self.push(out, shape, Op::Softmax(a), rg)
    }

    /// Log-softmax over the last axis, stabilized with log-sum-exp.
    pub fn log_softmax(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let (rows, cols) = rows_cols(v.shape());
        let mut out = vec![0.0f32; v.numel()];
        for r in 0..rows {
            let x = &v.data()[r * cols..(r + 1) * cols];
            let m = x.iter().fold(f32::NEG_INFINITY, |m, &y| m.max(y)) as f64;
            let lse = m + x.iter().map(|&y| (y as f64 - m).exp()).sum::<f64>().ln();
            for (o, &xi) in out[r * cols..(r + 1) * cols].iter_mut().zip(x) {
                *o = (xi as f64 - lse) as f32;
            }
        }
        let shape = v.shape().to_vec();
        let rg = self.rg(&[a]);
        self.push(out, shape, Op::LogSoftmax(a), rg)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let v = self.value(a);
        let (r, c) = v
            .dims2()
            .ok_or_else(|| mismatch("transpose", format!("expected 2-d, got {:?}", v.shape())))?;
        let out = transpose_raw(v.data(), r, c);
        let rg = self.rg(&[a]);
        Ok(self.push(out, vec![c, r], Op::Transpose(a), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var, AutodiffError> {
        let v = self.value(a);
        let numel: usize = shape.iter().product();
        if shape.is_empty() || numel != v.numel() {
            return Err(mismatch(
                "reshape",
                format!(
                    "{:?} has {} elements, target {:?} has {numel}",
                    v.shape(),
                    v.numel(),
                    shape
                ),
            ));
        }
        let out = v.data().to_vec();
        let rg = self.rg(&[a]);
        Ok(self.push(out, shape, Op::Reshape(a), rg))
    }

    /// Concatenates 2-d tensors with equal row counts along the column axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var, AutodiffError> {
        if parts.is_empty() {
            return Err(mismatch("concat", "no inputs".into()));
        }
        let mut dims = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.value(p).shape();
            match s {
                [r, c] => dims.push((*r, *c)),
                _ => return Err(mismatch("concat", format!("expected 2-d input, got {s:?}"))),
            }
        }
        let rows = dims[0].0;
        if let Some((r, _)) = dims.iter().find(|(r, _)| *r != rows) {
            return Err(mismatch(
                "concat",
                format!("row count {r} differs from {rows}"),
            ));
        }
        let total: usize = dims.iter().map(|d| d.1).sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &(_, c)) in parts.iter().zip(&dims) {
                out.extend_from_slice(&self.value(p).data()[r * c..(r + 1) * c]);
            }
        }
        let rg = self.rg(parts);
        Ok(self.push(out, vec![rows, total], Op::Concat(parts.to_vec()), rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).data().iter().map(|&x| x as f64).sum();
        let rg = self.rg(&[a]);
        self.push(vec![s as f32], vec![1], Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s: f64 = v.data().iter().map(|&x| x as f64).sum();
        let n = v.numel().max(1) as f64;
        let rg = self.rg(&[a]);
        self.push(vec![(s / n) as f32], vec![1], Op::Mean(a), rg)
    }

    /// Sums over the last axis, keeping it as size 1.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let (rows, cols) = rows_cols(v.shape());
        let out: Vec<f32> = (0..rows)
            .map(|r| {
                v.data()[r * cols..(r + 1) * cols]
                    .iter()
                    .map(|&x| x as f64)
                    .sum::<f64>() as f32
            })
            .collect();
        let rg = self.rg(&[a]);
        self.push(out, vec![rows, 1], Op::SumRows(a), rg)
    }

    /// Substitutes `values` in the forward pass; the backward pass lets the
    /// gradient through where `pass` is true and zeroes it elsewhere.
    pub fn straight_through(
        &mut self,
        a: Var,
        values: Vec<f32>,
        pass: Vec<bool>,
    ) -> Result<Var, AutodiffError> {
        let v = self.value(a);
        if values.len() != v.numel() || pass.len() != v.numel() {
            return Err(mismatch(
                "straight_through",
                format!(
                    "input has {} elements, got {} values and {} mask entries",
                    v.numel(),
                    values.len(),
                    pass.len()
                ),
            ));
        }
        let shape = v.shape().to_vec();
        let rg = self.rg(&[a]);
        Ok(self.push(values, shape, Op::StraightThrough(a, pass), rg))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients, AutodiffError> {
        if self.nodes.is_empty() {
            return Err(AutodiffError::EmptyTape);
        }
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(AutodiffError::NotScalar {
                shape: lv.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; self.nodes.len()];
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        for (g, n) in grads.iter_mut().zip(&self.nodes) {
            if !n.requires_grad {
                *g = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &[f32], grads: &mut [Option<Vec<f32>>]) {
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k) = av.dims2().unwrap();
                let n = bv.dims2().unwrap().1;
                if self.requires_grad(*a) {
                    let bt = transpose_raw(bv.data(), k, n);
                    let da = matmul_raw(g, &bt, m, n, k);
                    accumulate(grads, *a, &da);
                }
                if self.requires_grad(*b) {
                    let at = transpose_raw(av.data(), m, k);
                    let db = matmul_raw(&at, g, k, m, n);
                    accumulate(grads, *b, &db);
                }
            }
            Op::Binary(kind, a, b, bc) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let (_, cols) = rows_cols(self.value(*a).shape());
                if self.requires_grad(*a) {
                    let da: Vec<f32> = g
                        .iter()
                        .enumerate()
                        .map(|(i, &gi)| match kind {
                            BinaryKind::Add | BinaryKind::Sub => gi,
                            BinaryKind::Mul => gi * bv[bc.rhs_index(i, cols)],
                            BinaryKind::Div => gi / bv[bc.rhs_index(i, cols)],
                        })
                        .collect();
                    accumulate(grads, *a, &da);
                }
                if self.requires_grad(*b) {
                    let mut db = vec![0.0f64; bv.len()];
                    for (i, &gi) in g.iter().enumerate() {
                        let j = bc.rhs_index(i, cols);
                        let gi = gi as f64;
                        db[j] += match kind {
                            BinaryKind::Add => gi,
                            BinaryKind::Sub => -gi,
                            BinaryKind::Mul => gi * av[i] as f64,
                            BinaryKind::Div => {
                                let bj = bv[j] as f64;
                                -gi * av[i] as f64 / (bj * bj)
                            }
                        };
                    }
                    let db: Vec<f32> = db.into_iter().map(|x| x as f32).collect();
                    accumulate(grads, *b, &db);
                }
            }
            Op::Scale(a, k) => {
                let da: Vec<f32> = g.iter().map(|x| x * k).collect();
                accumulate(grads, *a, &da);
            }
            Op::Relu(a) => {
                let x = self.value(*a).data();
                let da: Vec<f32> = g
                    .iter()
                    .zip(x)
                    .map(|(&gi, &xi)| if xi > 0.0 { gi } else { 0.0 })
                    .collect();
                accumulate(grads, *a, &da);
            }
            Op::Gelu(a) => {
                let x = self.value(*a).data();
                let da: Vec<f32> = g
                    .iter()
                    .zip(x)
                    .map(|(&gi, &xi)| {
                        let x = xi as f64;
                        let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
                        let d = 0.5 * (1.0 + t)
                            + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x);
                        (gi as f64 * d) as f32
                    })
                    .collect();
                accumulate(grads, *a, &da);
            }
            Op::Softmax(a) => {
                let (rows, cols) = rows_cols(node.value.shape());
                let mut da = vec![0.0f32; y.len()];
                for r in 0..rows {
                    let span = r * cols..(r + 1) * cols;
                    let dot: f64 = g[span.clone()]
                        .iter()
                        .zip(&y[span.clone()])
                        .map(|(&gi, &yi)| gi as f64 * yi as f64)
                        .sum();
                    for j in span {
                        da[j] = (y[j] as f64 * (g[j] as f64 - dot)) as f32;
                    }
                }
                accumulate(grads, *a, &da);
            }
            Op::LogSoftmax(a) => {
                let (rows, cols) = rows_cols(node.value.shape());
                let mut da = vec![0.0f32; y.len()];
                for r in 0..rows {
                    let span = r * cols..(r + 1) * cols;
                    let gs: f64 = g[span.clone()].iter().map(|&x| x as f64).sum();
                    for j in span {
                        da[j] = (g[j] as f64 - (y[j] as f64).exp() * gs) as f32;
                    }
                }
                accumulate(grads, *a, &da);
            }
            Op::Log(a) => {
                let x = self.value(*a).data();
                let da: Vec<f32> = g.iter().zip(x).map(|(gi, xi)| gi / xi).collect();
                accumulate(grads, *a, &da);
            }
            Op::ClampMin(a, floor) => {
                let x = self.value(*a).data();
                let da: Vec<f32> = g
                    .iter()
                    .zip(x)
                    .map(|(&gi, &xi)| if xi > *floor { gi } else { 0.0 })
                    .collect();
                accumulate(grads, *a, &da);
            }
            Op::Transpose(a) => {
                let (r, c) = node.value.dims2().unwrap();
                let da = transpose_raw(g, r, c);
                accumulate(grads, *a, &da);
            }
            Op::Reshape(a) => accumulate(grads, *a, g),
            Op::Concat(parts) => {
                let (rows, total) = node.value.dims2().unwrap();
                let mut offset = 0;
                for &p in parts {
                    let c = self.value(p).dims2().unwrap().1;
                    if self.requires_grad(p) {
                        let mut dp = Vec::with_capacity(rows * c);
                        for r in 0..rows {
                            dp.extend_from_slice(&g[r * total + offset..r * total + offset + c]);
                        }
                        accumulate(grads, p, &dp);
                    }
                    offset += c;
                }
            }
            Op::Sum(a) => {
                let da = vec![g[0]; self.value(*a).numel()];
                accumulate(grads, *a, &da);
            }
            Op::Mean(a) => {
                let n = self.value(*a).numel();
                let da = vec![g[0] / n.max(1) as f32; n];
                accumulate(grads, *a, &da);
            }
            Op::SumRows(a) => {
                let (rows, cols) = rows_cols(self.value(*a).shape());
                let mut da = Vec::with_capacity(rows * cols);
                for &gr in g.iter().take(rows) {
                    da.extend(std::iter::repeat_n(gr, cols));
                }
                accumulate(grads, *a, &da);
            }
            Op::StraightThrough(a, pass) => {
                let da: Vec<f32> = g
                    .iter()
                    .zip(pass)
                    .map(|(&gi, &p)| if p { gi } else { 0.0 })
                    .collect();
                accumulate(grads, *a, &da);
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Vec<f32>>], v: Var, g: &[f32]) {
    match &mut grads[v.0] {
        Some(buf) => buf.iter_mut().zip(g).for_each(|(b, x)| *b += x),
        slot @ None => *slot = Some(g.to_vec()),
    }
}

/// `[m,k] x [k,n]` with 64-bit accumulation.
pub(crate) fn matmul_raw(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; m * n];
    let mut acc = vec![0.0f64; n];
    for i in 0..m {
        acc.iter_mut().for_each(|x| *x = 0.0);
        for p in 0..k {
            let aip = a[i * k + p] as f64;
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (x, &bv) in acc.iter_mut().zip(brow) {
                *x += aip * bv as f64;
            }
        }
        for (o, x) in out[i * n..(i + 1) * n].iter_mut().zip(&acc) {
            *o = *x as f32;
        }
    }
    out
}

pub(crate) fn transpose_raw(a: &[f32], r: usize, c: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = a[i * c + j];
        }
    }
    out
}
