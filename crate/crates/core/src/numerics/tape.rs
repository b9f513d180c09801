use serde::{Deserialize, Serialize};

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// A contiguous run of rows belonging to one sequence in a packed batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Segment {
    pub start: usize,
    pub len: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionMode {
    #[default]
    Causal,
    Bidirectional,
}

enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var, trans_b: bool },
    Add(Var, Var),
    AddRow { x: Var, bias: Var },
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Transpose(Var),
    Gelu(Var),
    Relu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        /// (mean, 1/std) per row
        stats: Vec<(T, T)>,
    },
    Gather { table: Var, ids: Vec<usize> },
    SoftmaxRows(Var),
    SegmentMean { x: Var, segments: Vec<Segment> },
    SegmentLast { x: Var, segments: Vec<Segment> },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        segments: Vec<Segment>,
        heads: usize,
        probs: Vec<T>,
    },
    Sum(Var),
    DiagCrossEntropy { s: Var, probs: Vec<T> },
    L2NormalizeRows { x: Var, norms: Vec<T> },
    OffDiagMean(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Append-only record of executed ops. Nodes are stored in execution order,
/// which is a topological order of the graph.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of trainable leaves after a backward pass.
pub struct Grads<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Grads<T> {
    /// Gradient for a leaf, `None` for constants and intermediate values.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Move a leaf gradient out. Panics if `v` is not a trainable leaf.
    pub fn take(&mut self, v: Var) -> Tensor<T> {
        self.grads[v.0]
            .take()
            .expect("gradient requested for a non-trainable value")
    }
}

fn accumulate<T: Scalar>(slot: &mut Option<Vec<T>>, len: usize) -> &mut Vec<T> {
    slot.get_or_insert_with(|| vec![T::zero(); len])
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        let t = &self.nodes[v.0].value;
        (t.rows(), t.cols())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ` without materializing the transpose.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (br, bc) = self.dims(b);
        let (kb, n) = if trans_b { (bc, br) } else { (br, bc) };
        if k != kb {
            return Err(Error::shape("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![T::zero(); m * n];
        let bs = if trans_b {
            (1, k as isize)
        } else {
            (n as isize, 1)
        };
        T::gemm(
            m,
            k,
            n,
            self.value(a).data(),
            (k as isize, 1),
            self.value(b).data(),
            bs,
            &mut out,
            false,
        );
        let value = Tensor::new(&[m, n], out)?;
        Ok(self.push(value, Op::MatMul { a, b, trans_b }, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("add", self.shape(a), self.shape(b)));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let value = Tensor::new(self.shape(a), data)?;
        Ok(self.push(value, Op::Add(a, b), &[a, b]))
    }

    /// Add a length-C vector to every row of an R×C matrix.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (_, c) = self.dims(x);
        if self.value(bias).len() != c {
            return Err(Error::shape("add_row", self.shape(x), self.shape(bias)));
        }
        let b = self.value(bias).data();
        let data = self
            .value(x)
            .data()
            .chunks(c)
            .flat_map(|row| row.iter().zip(b).map(|(&x, &y)| x + y))
            .collect();
        let value = Tensor::new(self.shape(x), data)?;
        Ok(self.push(value, Op::AddRow { x, bias }, &[x, bias]))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("mul", self.shape(a), self.shape(b)));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let value = Tensor::new(self.shape(a), data)?;
        Ok(self.push(value, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let value = self.value(x).map(|v| v * c);
        self.push(value, Op::Scale(x, c), &[x])
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> Var {
        let value = self.value(x).map(|v| v + c);
        self.push(value, Op::AddScalar(x), &[x])
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let value = self.value(x).transpose();
        self.push(value, Op::Transpose(x), &[x])
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(gelu);
        self.push(value, Op::Gelu(x), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.max(T::zero()));
        self.push(value, Op::Relu(x), &[x])
    }

    /// Row-wise layer normalization with affine gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var> {
        let (r, c) = self.dims(x);
        if self.value(gain).len() != c || self.value(bias).len() != c {
            return Err(Error::shape("layer_norm", self.shape(x), self.shape(gain)));
        }
        let xs = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let n = T::from_f64(c as f64);
        let mut out = vec![T::zero(); r * c];
        let mut stats = Vec::with_capacity(r);
        for i in 0..r {
            let row = &xs[i * c..(i + 1) * c];
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let rstd = (var + eps).sqrt().recip();
            for j in 0..c {
                out[i * c + j] = (row[j] - mean) * rstd * g[j] + b[j];
            }
            stats.push((mean, rstd));
        }
        let value = Tensor::new(self.shape(x), out)?;
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                stats,
            },
            &[x, gain, bias],
        ))
    }

    /// Rows of `table` selected by `ids`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, m) = self.dims(table);
        if let Some(&bad) = ids.iter().find(|&&id| id >= v) {
            return Err(Error::Vocab { id: bad, size: v });
        }
        let t = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * m);
        for &id in ids {
            out.extend_from_slice(&t[id * m..(id + 1) * m]);
        }
        let value = Tensor::new(&[ids.len(), m], out)?;
        Ok(self.push(
            value,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let (r, c) = self.dims(x);
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(c).take(r) {
            softmax_in_place(row);
        }
        let value = Tensor::new(self.shape(x), out).expect("same shape");
        self.push(value, Op::SoftmaxRows(x), &[x])
    }

    /// Mean over all rows of an L×m matrix, producing a length-m vector.
    pub fn mean_pool(&mut self, x: Var) -> Result<Var> {
        let (l, m) = self.dims(x);
        let pooled = self.segment_mean(x, &[Segment { start: 0, len: l }])?;
        self.nodes[pooled.0].value = self.nodes[pooled.0].value.clone().reshape(&[m])?;
        Ok(pooled)
    }

    fn check_segments(&self, x: Var, segments: &[Segment]) -> Result<()> {
        let (r, _) = self.dims(x);
        for s in segments {
            if s.len == 0 {
                return Err(Error::EmptySequence("pooling over zero positions".into()));
            }
            if s.start + s.len > r {
                return Err(Error::shape("segment", &[s.start, s.len], &[r]));
            }
        }
        Ok(())
    }

    /// Mean of each segment's rows: one output row per segment.
    pub fn segment_mean(&mut self, x: Var, segments: &[Segment]) -> Result<Var> {
        self.check_segments(x, segments)?;
        let (_, m) = self.dims(x);
        let xs = self.value(x).data();
        let mut out = vec![T::zero(); segments.len() * m];
        for (s, seg) in segments.iter().enumerate() {
            let dst = &mut out[s * m..(s + 1) * m];
            for r in seg.start..seg.start + seg.len {
                for (d, &v) in dst.iter_mut().zip(&xs[r * m..(r + 1) * m]) {
                    *d += v;
                }
            }
            let inv = T::from_f64(seg.len as f64).recip();
            dst.iter_mut().for_each(|d| *d *= inv);
        }
        let value = Tensor::new(&[segments.len(), m], out)?;
        Ok(self.push(
            value,
            Op::SegmentMean {
                x,
                segments: segments.to_vec(),
            },
            &[x],
        ))
    }

    /// Last row of each segment.
    pub fn segment_last(&mut self, x: Var, segments: &[Segment]) -> Result<Var> {
        self.check_segments(x, segments)?;
        let (_, m) = self.dims(x);
        let xs = self.value(x).data();
        let mut out = Vec::with_capacity(segments.len() * m);
        for seg in segments {
            let r = seg.start + seg.len - 1;
            out.extend_from_slice(&xs[r * m..(r + 1) * m]);
        }
        let value = Tensor::new(&[segments.len(), m], out)?;
        Ok(self.push(
            value,
            Op::SegmentLast {
                x,
                segments: segments.to_vec(),
            },
            &[x],
        ))
    }

    /// Multi-head scaled dot-product attention over packed sequences.
    ///
    /// `q`, `k`, `v` are R×m with rows grouped by `segments`; attention never
    /// crosses a segment boundary. Under [`AttentionMode::Causal`] position i
    /// attends to positions ≤ i of its own segment.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        segments: &[Segment],
        heads: usize,
        mode: AttentionMode,
    ) -> Result<Var> {
        let (r, m) = self.dims(q);
        if self.shape(k) != self.shape(q) || self.shape(v) != self.shape(q) {
            return Err(Error::shape("attention", self.shape(q), self.shape(k)));
        }
        if heads == 0 || m % heads != 0 {
            return Err(Error::Contract(format!(
                "width {m} not divisible by {heads} heads"
            )));
        }
        self.check_segments(q, segments)?;
        let dh = m / heads;
        let scale = T::from_f64(1.0 / (dh as f64).sqrt());
        let qd = self.value(q).data();
        let kd = self.value(k).data();
        let vd = self.value(v).data();
        let mut out = vec![T::zero(); r * m];
        let prob_len: usize = segments.iter().map(|s| s.len * s.len * heads).sum();
        let mut probs = Vec::with_capacity(prob_len);
        let mut tmp = Vec::new();
        for seg in segments {
            let l = seg.len;
            for h in 0..heads {
                let off = seg.start * m + h * dh;
                let mut p = vec![T::zero(); l * l];
                T::gemm(
                    l,
                    dh,
                    l,
                    &qd[off..],
                    (m as isize, 1),
                    &kd[off..],
                    (1, m as isize),
                    &mut p,
                    false,
                );
                for i in 0..l {
                    let row = &mut p[i * l..(i + 1) * l];
                    let visible = match mode {
                        AttentionMode::Causal => i + 1,
                        AttentionMode::Bidirectional => l,
                    };
                    row[..visible].iter_mut().for_each(|s| *s *= scale);
                    softmax_in_place(&mut row[..visible]);
                    row[visible..].iter_mut().for_each(|s| *s = T::zero());
                }
                tmp.clear();
                tmp.resize(l * dh, T::zero());
                T::gemm(
                    l,
                    l,
                    dh,
                    &p,
                    (l as isize, 1),
                    &vd[off..],
                    (m as isize, 1),
                    &mut tmp,
                    false,
                );
                for i in 0..l {
                    out[off + i * m..off + i * m + dh].copy_from_slice(&tmp[i * dh..(i + 1) * dh]);
                }
                probs.extend_from_slice(&p);
            }
        }
        let value = Tensor::new(&[r, m], out)?;
        Ok(self.push(
            value,
            Op::Attention {
                q,
                k,
                v,
                segments: segments.to_vec(),
                heads,
                probs,
            },
            &[q, k, v],
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        self.push(value, Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len().max(1);
        let s = self.sum(x);
        self.scale(s, T::from_f64(n as f64).recip())
    }

    /// `-(1/N) Σᵢ log softmax(S)ᵢᵢ` for a square matrix S, via log-sum-exp.
    pub fn diag_cross_entropy(&mut self, s: Var) -> Result<Var> {
        let (n, c) = self.dims(s);
        if n != c || n == 0 {
            return Err(Error::shape("diag_cross_entropy", self.shape(s), &[n, n]));
        }
        let sd = self.value(s).data();
        let mut probs = sd.to_vec();
        let mut total = T::zero();
        for i in 0..n {
            let row = &sd[i * n..(i + 1) * n];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
            total += lse - row[i];
            softmax_in_place(&mut probs[i * n..(i + 1) * n]);
        }
        let value = Tensor::scalar(total / T::from_f64(n as f64));
        Ok(self.push(value, Op::DiagCrossEntropy { s, probs }, &[s]))
    }

    /// Divide each row by its L2 norm.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Var {
        let (r, c) = self.dims(x);
        let mut out = self.value(x).data().to_vec();
        let mut norms = Vec::with_capacity(r);
        let floor = T::from_f64(1e-12);
        for row in out.chunks_mut(c).take(r) {
            let norm = row.iter().map(|&v| v * v).sum::<T>().sqrt().max(floor);
            row.iter_mut().for_each(|v| *v /= norm);
            norms.push(norm);
        }
        let value = Tensor::new(self.shape(x), out).expect("same shape");
        self.push(value, Op::L2NormalizeRows { x, norms }, &[x])
    }

    /// Mean of the off-diagonal entries of a square matrix (N ≥ 2).
    pub fn offdiag_mean(&mut self, x: Var) -> Result<Var> {
        let (n, c) = self.dims(x);
        if n != c || n < 2 {
            return Err(Error::shape("offdiag_mean", self.shape(x), &[n, n]));
        }
        let d = self.value(x).data();
        let mut total = T::zero();
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    total += d[i * n + j];
                }
            }
        }
        let value = Tensor::scalar(total / T::from_f64((n * (n - 1)) as f64));
        Ok(self.push(value, Op::OffDiagMean(x), &[x]))
    }

    /// Reverse pass from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Grads<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.backward_seeded(loss, &Tensor::scalar(T::one()))
    }

    /// Reverse pass seeded with an explicit upstream gradient for `out`.
    pub fn backward_seeded(&self, out: Var, seed: &Tensor<T>) -> Result<Grads<T>> {
        if seed.len() != self.value(out).len() {
            return Err(Error::shape("backward seed", seed.shape(), self.shape(out)));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[out.0].requires_grad {
            grads[out.0] = Some(seed.data().to_vec());
        }
        for i in (0..=out.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(node, &g, &mut grads);
        }
        let grads = self
            .nodes
            .iter()
            .zip(grads)
            .map(|(node, g)| match node.op {
                Op::Leaf if node.requires_grad => Some(
                    Tensor::new(
                        node.value.shape(),
                        g.unwrap_or_else(|| vec![T::zero(); node.value.len()]),
                    )
                    .expect("gradient shape matches value"),
                ),
                _ => None,
            })
            .collect();
        Ok(Grads { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backward_node(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let len_of = |v: Var| self.nodes[v.0].value.len();
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, trans_b } => {
                let (m, k) = self.dims(a);
                let n = node.value.cols();
                let ad = self.value(a).data();
                let bd = self.value(b).data();
                if self.wants(a) {
                    let da = accumulate(&mut grads[a.0], m * k);
                    let bs = if trans_b {
                        (k as isize, 1)
                    } else {
                        (1, n as isize)
                    };
                    T::gemm(m, n, k, g, (n as isize, 1), bd, bs, da, true);
                }
                if self.wants(b) {
                    let db = accumulate(&mut grads[b.0], k * n);
                    if trans_b {
                        T::gemm(n, m, k, g, (1, n as isize), ad, (k as isize, 1), db, true);
                    } else {
                        T::gemm(k, m, n, ad, (1, k as isize), g, (n as isize, 1), db, true);
                    }
                }
            }
            &Op::Add(a, b) => {
                for v in [a, b] {
                    if self.wants(v) {
                        let d = accumulate(&mut grads[v.0], g.len());
                        d.iter_mut().zip(g).for_each(|(d, &g)| *d += g);
                    }
                }
            }
            &Op::AddRow { x, bias } => {
                if self.wants(x) {
                    let d = accumulate(&mut grads[x.0], g.len());
                    d.iter_mut().zip(g).for_each(|(d, &g)| *d += g);
                }
                if self.wants(bias) {
                    let c = len_of(bias);
                    let d = accumulate(&mut grads[bias.0], c);
                    for row in g.chunks(c) {
                        d.iter_mut().zip(row).for_each(|(d, &g)| *d += g);
                    }
                }
            }
            &Op::Mul(a, b) => {
                let ad = self.value(a).data();
                let bd = self.value(b).data();
                if self.wants(a) {
                    let d = accumulate(&mut grads[a.0], g.len());
                    for ((d, &g), &y) in d.iter_mut().zip(g).zip(bd) {
                        *d += g * y;
                    }
                }
                if self.wants(b) {
                    let d = accumulate(&mut grads[b.0], g.len());
                    for ((d, &g), &x) in d.iter_mut().zip(g).zip(ad) {
                        *d += g * x;
                    }
                }
            }
            &Op::Scale(x, c) => {
                if self.wants(x) {
                    let d = accumulate(&mut grads[x.0], g.len());
                    d.iter_mut().zip(g).for_each(|(d, &g)| *d += g * c);
                }
            }
            &Op::AddScalar(x) => {
                if self.wants(x) {
                    let d = accumulate(&mut grads[x.0], g.len());
                    d.iter_mut().zip(g).for_each(|(d, &g)| *d += g);
                }
            }
            &Op::Transpose(x) => {
                if self.wants(x) {
                    // node is c×r; input was r×c
                    let (c, r) = (node.value.rows(), node.value.cols());
                    let d = accumulate(&mut grads[x.0], g.len());
                    for i in 0..r {
                        for j in 0..c {
                            d[i * c + j] += g[j * r + i];
                        }
                    }
                }
            }
            &Op::Gelu(x) => {
                if self.wants(x) {
                    let xd = self.value(x).data();
                    let d = accumulate(&mut grads[x.0], g.len());
                    for ((d, &g), &x) in d.iter_mut().zip(g).zip(xd) {
                        *d += g * gelu_grad(x);
                    }
                }
            }
            &Op::Relu(x) => {
                if self.wants(x) {
                    let xd = self.value(x).data();
                    let d = accumulate(&mut grads[x.0], g.len());
                    for ((d, &g), &x) in d.iter_mut().zip(g).zip(xd) {
                        if x > T::zero() {
                            *d += g;
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                stats,
            } => {
                let (r, c) = self.dims(*x);
                let xd = self.value(*x).data();
                let gd = self.value(*gain).data();
                let n = T::from_f64(c as f64);
                let want_x = self.wants(*x);
                let mut dx = vec![T::zero(); if want_x { r * c } else { 0 }];
                let mut dgain = vec![T::zero(); c];
                let mut dbias = vec![T::zero(); c];
                let mut xhat = vec![T::zero(); c];
                let mut dxhat = vec![T::zero(); c];
                for i in 0..r {
                    let (mean, rstd) = stats[i];
                    let row = &xd[i * c..(i + 1) * c];
                    let gr = &g[i * c..(i + 1) * c];
                    let mut m1 = T::zero();
                    let mut m2 = T::zero();
                    for j in 0..c {
                        xhat[j] = (row[j] - mean) * rstd;
                        dxhat[j] = gr[j] * gd[j];
                        dgain[j] += gr[j] * xhat[j];
                        dbias[j] += gr[j];
                        m1 += dxhat[j];
                        m2 += dxhat[j] * xhat[j];
                    }
                    m1 /= n;
                    m2 /= n;
                    if want_x {
                        let dst = &mut dx[i * c..(i + 1) * c];
                        for j in 0..c {
                            dst[j] = rstd * (dxhat[j] - m1 - xhat[j] * m2);
                        }
                    }
                }
                for (v, d) in [(*x, dx), (*gain, dgain), (*bias, dbias)] {
                    if self.wants(v) {
                        let acc = accumulate(&mut grads[v.0], d.len());
                        acc.iter_mut().zip(&d).for_each(|(a, &b)| *a += b);
                    }
                }
            }
            Op::Gather { table, ids } => {
                if self.wants(*table) {
                    let (v, m) = self.dims(*table);
                    let d = accumulate(&mut grads[table.0], v * m);
                    for (i, &id) in ids.iter().enumerate() {
                        let dst = &mut d[id * m..(id + 1) * m];
                        dst.iter_mut()
                            .zip(&g[i * m..(i + 1) * m])
                            .for_each(|(d, &g)| *d += g);
                    }
                }
            }
            &Op::SoftmaxRows(x) => {
                if self.wants(x) {
                    let c = node.value.cols();
                    let y = node.value.data();
                    let d = accumulate(&mut grads[x.0], g.len());
                    for ((dr, gr), yr) in d.chunks_mut(c).zip(g.chunks(c)).zip(y.chunks(c)) {
                        let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                        for j in 0..c {
                            dr[j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::SegmentMean { x, segments } => {
                if self.wants(*x) {
                    let m = node.value.cols();
                    let d = accumulate(&mut grads[x.0], len_of(*x));
                    for (s, seg) in segments.iter().enumerate() {
                        let inv = T::from_f64(seg.len as f64).recip();
                        let gs = &g[s * m..(s + 1) * m];
                        for r in seg.start..seg.start + seg.len {
                            d[r * m..(r + 1) * m]
                                .iter_mut()
                                .zip(gs)
                                .for_each(|(d, &g)| *d += g * inv);
                        }
                    }
                }
            }
            Op::SegmentLast { x, segments } => {
                if self.wants(*x) {
                    let m = node.value.cols();
                    let d = accumulate(&mut grads[x.0], len_of(*x));
                    for (s, seg) in segments.iter().enumerate() {
                        let r = seg.start + seg.len - 1;
                        d[r * m..(r + 1) * m]
                            .iter_mut()
                            .zip(&g[s * m..(s + 1) * m])
                            .for_each(|(d, &g)| *d += g);
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                segments,
                heads,
                probs,
            } => self.attention_backward(*q, *k, *v, segments, *heads, probs, g, grads),
            &Op::Sum(x) => {
                if self.wants(x) {
                    let d = accumulate(&mut grads[x.0], len_of(x));
                    d.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::DiagCrossEntropy { s, probs } => {
                if self.wants(*s) {
                    let n = self.dims(*s).0;
                    let scale = g[0] / T::from_f64(n as f64);
                    let d = accumulate(&mut grads[s.0], n * n);
                    for i in 0..n {
                        for j in 0..n {
                            let target = if i == j { T::one() } else { T::zero() };
                            d[i * n + j] += scale * (probs[i * n + j] - target);
                        }
                    }
                }
            }
            Op::L2NormalizeRows { x, norms } => {
                if self.wants(*x) {
                    let c = node.value.cols();
                    let y = node.value.data();
                    let d = accumulate(&mut grads[x.0], g.len());
                    for (i, &norm) in norms.iter().enumerate() {
                        let yr = &y[i * c..(i + 1) * c];
                        let gr = &g[i * c..(i + 1) * c];
                        let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                        for j in 0..c {
                            d[i * c + j] += (gr[j] - yr[j] * dot) / norm;
                        }
                    }
                }
            }
            &Op::OffDiagMean(x) => {
                if self.wants(x) {
                    let n = self.dims(x).0;
                    let scale = g[0] / T::from_f64((n * (n - 1)) as f64);
                    let d = accumulate(&mut grads[x.0], n * n);
                    for i in 0..n {
                        for j in 0..n {
                            if i != j {
                                d[i * n + j] += scale;
                            }
                        }
                    }
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        segments: &[Segment],
        heads: usize,
        probs: &[T],
        g: &[T],
        grads: &mut [Option<Vec<T>>],
    ) {
        let (r, m) = self.dims(q);
        let dh = m / heads;
        let scale = T::from_f64(1.0 / (dh as f64).sqrt());
        let qd = self.value(q).data();
        let kd = self.value(k).data();
        let vd = self.value(v).data();
        let mut dq = vec![T::zero(); r * m];
        let mut dk = vec![T::zero(); r * m];
        let mut dv = vec![T::zero(); r * m];
        let mut p_off = 0;
        let mut tmp = Vec::new();
        let scatter = |dst: &mut [T], off: usize, tmp: &[T], l: usize| {
            for i in 0..l {
                dst[off + i * m..off + i * m + dh]
                    .iter_mut()
                    .zip(&tmp[i * dh..(i + 1) * dh])
                    .for_each(|(d, &t)| *d += t);
            }
        };
        for seg in segments {
            let l = seg.len;
            for h in 0..heads {
                let off = seg.start * m + h * dh;
                let p = &probs[p_off..p_off + l * l];
                p_off += l * l;
                tmp.clear();
                tmp.resize(l * dh, T::zero());
                // dV = Pᵀ · dO
                T::gemm(
                    l,
                    l,
                    dh,
                    p,
                    (1, l as isize),
                    &g[off..],
                    (m as isize, 1),
                    &mut tmp,
                    false,
                );
                scatter(&mut dv, off, &tmp, l);
                // dP = dO · Vᵀ
                let mut ds = vec![T::zero(); l * l];
                T::gemm(
                    l,
                    dh,
                    l,
                    &g[off..],
                    (m as isize, 1),
                    &vd[off..],
                    (1, m as isize),
                    &mut ds,
                    false,
                );
                for i in 0..l {
                    let pr = &p[i * l..(i + 1) * l];
                    let dr = &mut ds[i * l..(i + 1) * l];
                    let dot: T = pr.iter().zip(dr.iter()).map(|(&a, &b)| a * b).sum();
                    for j in 0..l {
                        dr[j] = pr[j] * (dr[j] - dot) * scale;
                    }
                }
                // dQ = dS · K
                T::gemm(
                    l,
                    l,
                    dh,
                    &ds,
                    (l as isize, 1),
                    &kd[off..],
                    (m as isize, 1),
                    &mut tmp,
                    false,
                );
                scatter(&mut dq, off, &tmp, l);
                // dK = dSᵀ · Q
                T::gemm(
                    l,
                    l,
                    dh,
                    &ds,
                    (1, l as isize),
                    &qd[off..],
                    (m as isize, 1),
                    &mut tmp,
                    false,
                );
                scatter(&mut dk, off, &tmp, l);
            }
        }
        for (var, d) in [(q, dq), (k, dk), (v, dv)] {
            if self.wants(var) {
                let acc = accumulate(&mut grads[var.0], r * m);
                acc.iter_mut().zip(&d).for_each(|(a, &b)| *a += b);
            }
        }
    }
}

fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    row.iter_mut().for_each(|v| *v /= total);
}

const GELU_C: f64 = 0.044_715;

fn gelu<T: Scalar>(x: T) -> T {
    let s = T::from_f64((2.0 / std::f64::consts::PI).sqrt());
    let half = T::from_f64(0.5);
    half * x * (T::one() + (s * (x + T::from_f64(GELU_C) * x * x * x)).tanh())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let s = T::from_f64((2.0 / std::f64::consts::PI).sqrt());
    let half = T::from_f64(0.5);
    let c = T::from_f64(GELU_C);
    let t = (s * (x + c * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * s * (T::one() + T::from_f64(3.0) * c * x * x)
}
