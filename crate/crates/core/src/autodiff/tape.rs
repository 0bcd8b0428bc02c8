use std::sync::Arc;

use rand::Rng;

use super::matrix::Matrix;
use super::TensorError;
use crate::scalar::Scalar;

type Result<T> = std::result::Result<T, TensorError>;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Whether stochastic layers are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Mode {
    Train,
    #[default]
    Eval,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Affine { x: Var, w: Var, b: Option<Var> },
    Add(Var, Var),
    Scale(Var, T),
    LeakyRelu { x: Var, slope: T },
    Gather { x: Var, idx: Arc<[usize]> },
    SegmentSum { x: Var, seg: Arc<[usize]> },
    SegmentMean { x: Var, seg: Arc<[usize]>, inv_count: Vec<T> },
    SegmentSoftmax { x: Var, seg: Arc<[usize]>, n: usize },
    ScaleRows { x: Var, s: Var },
    ConcatCols(Vec<Var>),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Matrix<T>, inv_std: Vec<T> },
    Dropout { x: Var, mask: Vec<T> },
    SumAll(Var),
    CrossEntropy { logits: Var, targets: Matrix<T>, weights: Vec<T>, probs: Matrix<T>, norm: T },
}

#[derive(Debug)]
struct Node<T> {
    value: Matrix<T>,
    grad: Option<Matrix<T>>,
    requires_grad: bool,
    op: Op<T>,
}

/// Records primitive applications in order; `backward` replays them in reverse.
#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

fn shape_err(op: &'static str, detail: String) -> TensorError {
    TensorError::Shape { op, detail }
}

fn check_index(op: &'static str, idx: &[usize], len: usize) -> Result<()> {
    match idx.iter().find(|&&i| i >= len) {
        Some(&index) => Err(TensorError::IndexOutOfRange { op, index, len }),
        None => Ok(()),
    }
}

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

    fn push(&mut self, value: Matrix<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, grad: None, requires_grad, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Matrix<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, grad: None, requires_grad, op: Op::Leaf });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Matrix<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Matrix<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn value(&self, v: Var) -> &Matrix<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of the last `backward` target w.r.t. `v`.
    pub fn grad(&self, v: Var) -> Option<&Matrix<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    /// Gradient, or zeros when `v` did not influence the target.
    pub fn grad_or_zeros(&self, v: Var) -> Matrix<T> {
        let (r, c) = self.value(v).shape();
        self.grad(v).cloned().unwrap_or_else(|| Matrix::zeros(r, c))
    }

    pub fn zero_grads(&mut self) {
        self.nodes.iter_mut().for_each(|n| n.grad = None);
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.cols() != vb.rows() {
            return Err(shape_err("matmul", format!("{:?} · {:?}", va.shape(), vb.shape())));
        }
        let out = va.matmul(vb);
        Ok(self.push(out, Op::MatMul(a, b), &[a, b]))
    }

    /// `x · w + b`, with `b` a `1 × d_out` row broadcast over rows.
    pub fn affine(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (vx, vw) = (self.value(x), self.value(w));
        if vx.cols() != vw.rows() {
            return Err(shape_err("affine", format!("x {:?} vs W {:?}", vx.shape(), vw.shape())));
        }
        let mut out = vx.matmul(vw);
        if let Some(b) = b {
            let vb = self.value(b);
            if vb.shape() != (1, vw.cols()) {
                return Err(shape_err("affine", format!("bias {:?} vs W {:?}", vb.shape(), vw.shape())));
            }
            for i in 0..out.rows() {
                out.row_mut(i).iter_mut().zip(vb.data()).for_each(|(o, &bv)| *o += bv);
            }
        }
        let inputs: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        Ok(self.push(out, Op::Affine { x, w, b }, &inputs))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(shape_err("add", format!("{:?} + {:?}", va.shape(), vb.shape())));
        }
        let mut out = va.clone();
        out.add_assign(vb);
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let out = self.value(x).map(|v| v * c);
        self.push(out, Op::Scale(x, c), &[x])
    }

    /// `max(x, 0) + slope * min(x, 0)`; `slope = 0` is ReLU.
    pub fn leaky_relu(&mut self, x: Var, slope: T) -> Var {
        let out = self.value(x).map(|v| if v > T::zero() { v } else { v * slope });
        self.push(out, Op::LeakyRelu { x, slope }, &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.leaky_relu(x, T::zero())
    }

    /// Row `k` of the output is row `idx[k]` of `x`.
    pub fn gather_rows(&mut self, x: Var, idx: Arc<[usize]>) -> Result<Var> {
        let vx = self.value(x);
        check_index("gather_rows", &idx, vx.rows())?;
        let mut out = Matrix::zeros(idx.len(), vx.cols());
        for (k, &i) in idx.iter().enumerate() {
            out.row_mut(k).copy_from_slice(vx.row(i));
        }
        Ok(self.push(out, Op::Gather { x, idx }, &[x]))
    }

    fn segment_totals(&self, op: &'static str, x: Var, seg: &[usize], n: usize) -> Result<Matrix<T>> {
        let vx = self.value(x);
        if seg.len() != vx.rows() {
            return Err(shape_err(op, format!("{} segment ids for {} rows", seg.len(), vx.rows())));
        }
        check_index(op, seg, n)?;
        let mut out = Matrix::zeros(n, vx.cols());
        for (e, &s) in seg.iter().enumerate() {
            out.row_mut(s).iter_mut().zip(vx.row(e)).for_each(|(o, &v)| *o += v);
        }
        Ok(out)
    }

    /// Sums rows of `x` into `n` output rows by segment id.
    pub fn segment_sum(&mut self, x: Var, seg: Arc<[usize]>, n: usize) -> Result<Var> {
        let out = self.segment_totals("segment_sum", x, &seg, n)?;
        Ok(self.push(out, Op::SegmentSum { x, seg }, &[x]))
    }

    /// Mean of rows per segment; empty segments yield zero rows.
    pub fn segment_mean(&mut self, x: Var, seg: Arc<[usize]>, n: usize) -> Result<Var> {
        let mut out = self.segment_totals("segment_mean", x, &seg, n)?;
        let mut counts = vec![0usize; n];
        seg.iter().for_each(|&s| counts[s] += 1);
        let inv_count: Vec<T> =
            counts.iter().map(|&c| if c == 0 { T::zero() } else { T::one() / T::of(c as f64) }).collect();
        for (s, &ic) in inv_count.iter().enumerate() {
            out.row_mut(s).iter_mut().for_each(|v| *v *= ic);
        }
        Ok(self.push(out, Op::SegmentMean { x, seg, inv_count }, &[x]))
    }

    /// Column-wise softmax over the rows sharing a segment id.
    pub fn segment_softmax(&mut self, x: Var, seg: Arc<[usize]>, n: usize) -> Result<Var> {
        let vx = self.value(x);
        if seg.len() != vx.rows() {
            return Err(shape_err("segment_softmax", format!("{} segment ids for {} rows", seg.len(), vx.rows())));
        }
        check_index("segment_softmax", &seg, n)?;
        let out = segment_softmax_matrix(vx, &seg, n);
        Ok(self.push(out, Op::SegmentSoftmax { x, seg, n }, &[x]))
    }

    /// Multiplies row `e` of `x` by the scalar `s[e]`.
    pub fn scale_rows(&mut self, x: Var, s: Var) -> Result<Var> {
        let (vx, vs) = (self.value(x), self.value(s));
        if vs.shape() != (vx.rows(), 1) {
            return Err(shape_err("scale_rows", format!("x {:?} vs s {:?}", vx.shape(), vs.shape())));
        }
        let mut out = vx.clone();
        for e in 0..out.rows() {
            let c = vs.get(e, 0);
            out.row_mut(e).iter_mut().for_each(|v| *v *= c);
        }
        Ok(self.push(out, Op::ScaleRows { x, s }, &[x, s]))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(first) = parts.first() else {
            return Err(shape_err("concat_cols", "no inputs".into()));
        };
        let rows = self.value(*first).rows();
        if let Some(p) = parts.iter().find(|p| self.value(**p).rows() != rows) {
            return Err(shape_err("concat_cols", format!("{} rows vs {:?}", rows, self.value(*p).shape())));
        }
        let cols: usize = parts.iter().map(|p| self.value(*p).cols()).sum();
        let mut out = Matrix::zeros(rows, cols);
        for i in 0..rows {
            let mut off = 0;
            for p in parts {
                let src = self.value(*p).row(i);
                out.row_mut(i)[off..off + src.len()].copy_from_slice(src);
                off += src.len();
            }
        }
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), parts))
    }

    /// Per-row standardization followed by the `gamma`/`beta` affine.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let vx = self.value(x);
        let (n, d) = vx.shape();
        if d == 0 {
            return Err(shape_err("layer_norm", "zero-width input".into()));
        }
        if self.value(gamma).shape() != (1, d) || self.value(beta).shape() != (1, d) {
            return Err(shape_err(
                "layer_norm",
                format!("x {:?} vs gamma {:?}", vx.shape(), self.value(gamma).shape()),
            ));
        }
        let dn = T::of(d as f64);
        let mut xhat = Matrix::zeros(n, d);
        let mut inv_std = Vec::with_capacity(n);
        for i in 0..n {
            let row = vx.row(i);
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let is = T::one() / (var + eps).sqrt();
            xhat.row_mut(i).iter_mut().zip(row).for_each(|(h, &v)| *h = (v - mean) * is);
            inv_std.push(is);
        }
        let (g, b) = (self.value(gamma), self.value(beta));
        let mut out = xhat.clone();
        for i in 0..n {
            out.row_mut(i).iter_mut().zip(g.data().iter().zip(b.data())).for_each(|(o, (&gv, &bv))| *o = *o * gv + bv);
        }
        Ok(self.push(out, Op::LayerNorm { x, gamma, beta, xhat, inv_std }, &[x, gamma, beta]))
    }

    /// Inverted dropout. Identity in eval mode or when `p == 0`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, mode: Mode, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(TensorError::InvalidProbability(p));
        }
        if mode == Mode::Eval || p == 0.0 {
            return Ok(x);
        }
        let keep_scale = T::of(1.0 / (1.0 - p));
        let vx = self.value(x);
        let mask: Vec<T> =
            (0..vx.len()).map(|_| if rng.random::<f64>() < p { T::zero() } else { keep_scale }).collect();
        let mut out = vx.clone();
        out.data_mut().iter_mut().zip(&mask).for_each(|(v, &m)| *v *= m);
        Ok(self.push(out, Op::Dropout { x, mask }, &[x]))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let out = Matrix::scalar(self.value(x).sum());
        self.push(out, Op::SumAll(x), &[x])
    }

    /// Weighted mean over rows of the cross-entropy between `softmax(logits)`
    /// and the soft target distributions in `targets`:
    /// `Σ_i w_i · CE_i / Σ_i w_i` (zero when all weights vanish).
    pub fn cross_entropy(&mut self, logits: Var, targets: Matrix<T>, weights: Vec<T>) -> Result<Var> {
        let vl = self.value(logits);
        if targets.shape() != vl.shape() || weights.len() != vl.rows() {
            return Err(shape_err(
                "cross_entropy",
                format!("logits {:?}, targets {:?}, {} weights", vl.shape(), targets.shape(), weights.len()),
            ));
        }
        if !vl.is_finite() {
            return Err(TensorError::NonFinite("cross_entropy logits"));
        }
        let (n, c) = vl.shape();
        let mut probs = Matrix::zeros(n, c);
        let mut total = T::zero();
        for i in 0..n {
            let row = vl.row(i);
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|&z| (z - m).exp()).sum::<T>().ln() + m;
            let mut ce = T::zero();
            for j in 0..c {
                let logp = row[j] - lse;
                probs.set(i, j, logp.exp());
                let t = targets.get(i, j);
                if t != T::zero() {
                    ce -= t * logp;
                }
            }
            total += weights[i] * ce;
        }
        let norm: T = weights.iter().copied().sum();
        let loss = if norm == T::zero() { T::zero() } else { total / norm };
        Ok(self.push(Matrix::scalar(loss), Op::CrossEntropy { logits, targets, weights, probs, norm }, &[logits]))
    }

    /// Reverse sweep from a `1 × 1` target. Gradients accumulate into
    /// previously stored ones; call [`Tape::zero_grads`] to start fresh.
    pub fn backward(&mut self, target: Var) -> Result<()> {
        if self.value(target).shape() != (1, 1) {
            return Err(TensorError::NonScalarLoss(self.value(target).shape()));
        }
        self.accumulate(target, Matrix::scalar(T::one()));
        for i in (0..=target.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.nodes[i].grad.take() else { continue };
            let contributions = self.local_grads(i, &g);
            self.nodes[i].grad = Some(g);
            for (v, m) in contributions {
                if self.nodes[v.0].requires_grad {
                    self.accumulate(v, m);
                }
            }
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, m: Matrix<T>) {
        match &mut self.nodes[v.0].grad {
            Some(g) => g.add_assign(&m),
            slot @ None => *slot = Some(m),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn local_grads(&self, i: usize, g: &Matrix<T>) -> Vec<(Var, Matrix<T>)> {
        let node = &self.nodes[i];
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.wants(*a) {
                    out.push((*a, g.matmul_nt(self.value(*b))));
                }
                if self.wants(*b) {
                    out.push((*b, self.value(*a).matmul_tn(g)));
                }
            }
            Op::Affine { x, w, b } => {
                if self.wants(*x) {
                    out.push((*x, g.matmul_nt(self.value(*w))));
                }
                if self.wants(*w) {
                    out.push((*w, self.value(*x).matmul_tn(g)));
                }
                if let Some(b) = b {
                    if self.wants(*b) {
                        out.push((*b, g.col_sums()));
                    }
                }
            }
            Op::Add(a, b) => {
                out.push((*a, g.clone()));
                out.push((*b, g.clone()));
            }
            Op::Scale(x, c) => out.push((*x, g.map(|v| v * *c))),
            Op::LeakyRelu { x, slope } => {
                let vx = self.value(*x);
                let mut dx = g.clone();
                dx.data_mut().iter_mut().zip(vx.data()).for_each(|(d, &v)| {
                    if v <= T::zero() {
                        *d *= *slope;
                    }
                });
                out.push((*x, dx));
            }
            Op::Gather { x, idx } => {
                let vx = self.value(*x);
                let mut dx = Matrix::zeros(vx.rows(), vx.cols());
                for (k, &r) in idx.iter().enumerate() {
                    dx.row_mut(r).iter_mut().zip(g.row(k)).for_each(|(d, &v)| *d += v);
                }
                out.push((*x, dx));
            }
            Op::SegmentSum { x, seg } => {
                let mut dx = Matrix::zeros(seg.len(), g.cols());
                for (e, &s) in seg.iter().enumerate() {
                    dx.row_mut(e).copy_from_slice(g.row(s));
                }
                out.push((*x, dx));
            }
            Op::SegmentMean { x, seg, inv_count } => {
                let mut dx = Matrix::zeros(seg.len(), g.cols());
                for (e, &s) in seg.iter().enumerate() {
                    let ic = inv_count[s];
                    dx.row_mut(e).iter_mut().zip(g.row(s)).for_each(|(d, &v)| *d = v * ic);
                }
                out.push((*x, dx));
            }
            Op::SegmentSoftmax { x, seg, n } => {
                let y = &node.value;
                let cols = y.cols();
                let mut dots = Matrix::<T>::zeros(*n, cols);
                for (e, &s) in seg.iter().enumerate() {
                    for j in 0..cols {
                        let v = dots.get(s, j) + g.get(e, j) * y.get(e, j);
                        dots.set(s, j, v);
                    }
                }
                let mut dx = Matrix::zeros(y.rows(), cols);
                for (e, &s) in seg.iter().enumerate() {
                    for j in 0..cols {
                        dx.set(e, j, y.get(e, j) * (g.get(e, j) - dots.get(s, j)));
                    }
                }
                out.push((*x, dx));
            }
            Op::ScaleRows { x, s } => {
                let (vx, vs) = (self.value(*x), self.value(*s));
                if self.wants(*x) {
                    let mut dx = g.clone();
                    for e in 0..dx.rows() {
                        let c = vs.get(e, 0);
                        dx.row_mut(e).iter_mut().for_each(|v| *v *= c);
                    }
                    out.push((*x, dx));
                }
                if self.wants(*s) {
                    let ds = Matrix::from_fn(vx.rows(), 1, |e, _| {
                        vx.row(e).iter().zip(g.row(e)).map(|(&a, &b)| a * b).sum()
                    });
                    out.push((*s, ds));
                }
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for p in parts {
                    let w = self.value(*p).cols();
                    if self.wants(*p) {
                        let part = Matrix::from_fn(g.rows(), w, |r, c| g.get(r, off + c));
                        out.push((*p, part));
                    }
                    off += w;
                }
            }
            Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                let gv = self.value(*gamma);
                let (n, d) = xhat.shape();
                if self.wants(*gamma) {
                    let mut dg = Matrix::zeros(1, d);
                    for r in 0..n {
                        dg.data_mut()
                            .iter_mut()
                            .zip(g.row(r).iter().zip(xhat.row(r)))
                            .for_each(|(o, (&a, &h))| *o += a * h);
                    }
                    out.push((*gamma, dg));
                }
                if self.wants(*beta) {
                    out.push((*beta, g.col_sums()));
                }
                if self.wants(*x) {
                    let dn = T::of(d as f64);
                    let mut dx = Matrix::zeros(n, d);
                    let mut dxhat = vec![T::zero(); d];
                    for r in 0..n {
                        dxhat.iter_mut().zip(g.row(r).iter().zip(gv.data())).for_each(|(o, (&a, &gm))| *o = a * gm);
                        let sum_d: T = dxhat.iter().copied().sum();
                        let sum_dh: T = dxhat.iter().zip(xhat.row(r)).map(|(&a, &h)| a * h).sum();
                        let scale = inv_std[r] / dn;
                        for (j, o) in dx.row_mut(r).iter_mut().enumerate() {
                            *o = scale * (dn * dxhat[j] - sum_d - xhat.get(r, j) * sum_dh);
                        }
                    }
                    out.push((*x, dx));
                }
            }
            Op::Dropout { x, mask } => {
                let mut dx = g.clone();
                dx.data_mut().iter_mut().zip(mask).for_each(|(d, &m)| *d *= m);
                out.push((*x, dx));
            }
            Op::SumAll(x) => {
                let (r, c) = self.value(*x).shape();
                out.push((*x, Matrix::filled(r, c, g.get(0, 0))));
            }
            Op::CrossEntropy { logits, targets, weights, probs, norm } => {
                let (n, c) = probs.shape();
                let mut dl = Matrix::zeros(n, c);
                if *norm != T::zero() {
                    let g0 = g.get(0, 0) / *norm;
                    for i in 0..n {
                        // targets need not sum to one exactly
                        let tsum: T = targets.row(i).iter().copied().sum();
                        let wi = weights[i] * g0;
                        for j in 0..c {
                            dl.set(i, j, wi * (probs.get(i, j) * tsum - targets.get(i, j)));
                        }
                    }
                }
                out.push((*logits, dl));
            }
        }
        out
    }
}

fn segment_softmax_matrix<T: Scalar>(x: &Matrix<T>, seg: &[usize], n: usize) -> Matrix<T> {
    let cols = x.cols();
    let mut max = Matrix::filled(n, cols, T::neg_infinity());
    for (e, &s) in seg.iter().enumerate() {
        for j in 0..cols {
            max.set(s, j, max.get(s, j).max(x.get(e, j)));
        }
    }
    let mut out = Matrix::zeros(x.rows(), cols);
    let mut denom = Matrix::zeros(n, cols);
    for (e, &s) in seg.iter().enumerate() {
        for j in 0..cols {
            let v = (x.get(e, j) - max.get(s, j)).exp();
            out.set(e, j, v);
            denom.set(s, j, denom.get(s, j) + v);
        }
    }
    for (e, &s) in seg.iter().enumerate() {
        for j in 0..cols {
            out.set(e, j, out.get(e, j) / denom.get(s, j));
        }
    }
    out
}

/// Softmax of `logits` computed independently within each segment id.
pub fn segment_softmax<T: Scalar>(logits: &[T], segments: &[usize]) -> Result<Vec<T>> {
    if segments.is_empty() {
        return Err(TensorError::EmptySegments);
    }
    if segments.len() != logits.len() {
        return Err(shape_err(
            "segment_softmax",
            format!("{} segment ids for {} logits", segments.len(), logits.len()),
        ));
    }
    let n = segments.iter().copied().max().map_or(0, |m| m + 1);
    let x = Matrix::from_vec(logits.len(), 1, logits.to_vec()).expect("column vector");
    Ok(segment_softmax_matrix(&x, segments, n).into_vec())
}
