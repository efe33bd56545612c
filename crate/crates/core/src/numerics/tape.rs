use std::collections::HashMap;

use crate::rng::SeedStream;
use crate::{bail, Result};

use super::{gemm, Float, ParamId, ParamStore, Tensor};

const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

struct Node<T> {
    value: Tensor<T>,
    grad: Option<Vec<T>>,
    requires_grad: bool,
    op: Op<T>,
}

enum Op<T> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        trans_a: bool,
        trans_b: bool,
    },
    Add(Var, Var),
    AddBias {
        x: Var,
        bias: Var,
    },
    Scale(Var, T),
    Sum(Var),
    Transpose(Var),
    ConcatCols(Vec<Var>),
    Reshape(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Gelu(Var),
    Dropout {
        x: Var,
        mask: Vec<T>,
    },
    GatherRows {
        table: Var,
        rows: Vec<usize>,
    },
    GatherColumns {
        src: Var,
        index: Vec<usize>,
    },
    Softmax(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        scale: T,
        probs: Vec<T>,
    },
    VqCrossEntropy {
        code_logits: Var,
        codes: Vec<usize>,
        scale: T,
        weights: Vec<T>,
    },
    CausalAttention {
        qkv: Var,
        batch: usize,
        seq: usize,
        heads: usize,
        probs: Vec<T>,
        mask: Option<Vec<T>>,
    },
}

/// Records forward operations and replays them in reverse to accumulate
/// gradients.
///
/// Values are immutable once recorded. Gradients are additive: calling
/// [`Tape::backward`] twice without [`Tape::zero_grads`] sums both passes.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    bindings: HashMap<ParamId, Var>,
    flops: u64,
}

impl<T: Float> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Float> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            bindings: HashMap::new(),
            flops: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every recorded node. Parameter values live in the
    /// [`ParamStore`] and are untouched.
    pub fn clear(&mut self) {
        self.nodes.clear();
        self.bindings.clear();
        self.flops = 0;
    }

    /// Multiply-add FLOPs (`2·m·k·n` per product) of forward matmuls since
    /// construction or the last [`Tape::clear`].
    pub fn matmul_flops(&self) -> u64 {
        self.flops
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value.data()[0]
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records parameter `id` as a leaf; repeated calls return the same var so
    /// shared (tied) parameters accumulate a single gradient.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.bindings.get(&id) {
            return v;
        }
        let p = store.get(id);
        let v = self.leaf(p.value.clone(), p.trainable);
        self.bindings.insert(id, v);
        v
    }

    /// Adds the gradient of every bound trainable parameter into `store`.
    pub fn accumulate_param_grads(&self, store: &mut ParamStore<T>) {
        for (&id, &v) in &self.bindings {
            let p = store.get_mut(id);
            if !p.trainable {
                continue;
            }
            if let Some(g) = self.nodes[v.0].grad.as_ref() {
                for (dst, &src) in p.grad.iter_mut().zip(g) {
                    *dst = *dst + src;
                }
            }
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var], name: &str) -> Result<Var> {
        if !value.all_finite() {
            bail!(Numeric, "{name} produced a non-finite value");
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dims2()
    }

    // ----- forward operations -------------------------------------------

    /// `a · b` for `a: m×k`, `b: k×n`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, false, b, false)
    }

    /// `a · bᵀ` for `a: m×k`, `b: n×k`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, false, b, true)
    }

    /// General product `op(a) · op(b)` where `op` optionally transposes.
    pub fn matmul_t(&mut self, a: Var, trans_a: bool, b: Var, trans_b: bool) -> Result<Var> {
        let (ra, ca) = self.dims(a);
        let (rb, cb) = self.dims(b);
        let (m, k) = if trans_a { (ca, ra) } else { (ra, ca) };
        let (k2, n) = if trans_b { (cb, rb) } else { (rb, cb) };
        if k != k2 {
            bail!(Dimension, "matmul inner extents differ: {m}×{k} · {k2}×{n}");
        }
        self.flops += 2 * (m * k * n) as u64;
        let mut out = vec![T::zero(); m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            trans_a,
            self.value(b).data(),
            trans_b,
            &mut out,
            false,
        );
        let value = Tensor::new(&[m, n], out)?;
        self.push(
            value,
            Op::MatMul {
                a,
                b,
                trans_a,
                trans_b,
            },
            &[a, b],
            "matmul",
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let va = self.value(a);
        let vb = self.value(b);
        if va.shape() != vb.shape() {
            bail!(Dimension, "add: {:?} vs {:?}", va.shape(), vb.shape());
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x + y).collect();
        let value = Tensor::new(va.shape(), data)?;
        self.push(value, Op::Add(a, b), &[a, b], "add")
    }

    /// Adds a length-`n` vector to every row of an `m×n` matrix.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.dims(x);
        if self.value(bias).len() != n {
            bail!(Dimension, "add_bias: bias length {} for {n} columns", self.value(bias).len());
        }
        let b = self.value(bias).data();
        let mut data = self.value(x).data().to_vec();
        for r in 0..m {
            for (d, &bb) in data[r * n..(r + 1) * n].iter_mut().zip(b) {
                *d = *d + bb;
            }
        }
        let value = Tensor::new(self.value(x).shape(), data)?;
        self.push(value, Op::AddBias { x, bias }, &[x, bias], "add_bias")
    }

    pub fn scale(&mut self, x: Var, s: T) -> Result<Var> {
        let vx = self.value(x);
        let value = Tensor::new(vx.shape(), vx.data().iter().map(|&v| v * s).collect())?;
        self.push(value, Op::Scale(x, s), &[x], "scale")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().fold(T::zero(), |acc, &v| acc + v);
        self.push(Tensor::scalar(s), Op::Sum(x), &[x], "sum")
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.dims(x);
        let src = self.value(x).data();
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        let value = Tensor::new(&[n, m], out)?;
        self.push(value, Op::Transpose(x), &[x], "transpose")
    }

    /// Concatenates matrices with equal row counts along the column axis.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            bail!(Dimension, "concat of zero tensors");
        }
        let m = self.dims(parts[0]).0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pm, pn) = self.dims(p);
            if pm != m {
                bail!(Dimension, "concat: row counts {m} vs {pm}");
            }
            widths.push(pn);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * total);
        for r in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let value = Tensor::new(&[m, total], out)?;
        self.push(value, Op::ConcatCols(parts.to_vec()), parts, "concat")
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        self.push(value, Op::Reshape(x), &[x], "reshape")
    }

    /// Row-wise layer normalization with affine gain and bias.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (m, n) = self.dims(x);
        if self.value(gamma).len() != n || self.value(beta).len() != n {
            bail!(Dimension, "layer_norm: affine parameters must have length {n}");
        }
        let eps = T::from_f64_lossy(LAYER_NORM_EPS);
        let nf = T::from_usize(n).unwrap();
        let src = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![T::zero(); m * n];
        let mut rstd = vec![T::zero(); m];
        let mut out = vec![T::zero(); m * n];
        for r in 0..m {
            let row = &src[r * n..(r + 1) * n];
            let mean = row.iter().fold(T::zero(), |a, &v| a + v) / nf;
            let var = row.iter().fold(T::zero(), |a, &v| a + (v - mean) * (v - mean)) / nf;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for c in 0..n {
                let xh = (row[c] - mean) * rs;
                xhat[r * n + c] = xh;
                out[r * n + c] = xh * g[c] + b[c];
            }
        }
        let value = Tensor::new(self.value(x).shape(), out)?;
        self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            &[x, gamma, beta],
            "layer_norm",
        )
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        let value = Tensor::new(vx.shape(), vx.data().iter().map(|&v| gelu(v)).collect())?;
        self.push(value, Op::Gelu(x), &[x], "gelu")
    }

    /// Inverted dropout with drop probability `p`. Identity when `p == 0`.
    pub fn dropout(&mut self, x: Var, p: f64, rng: &mut SeedStream) -> Result<Var> {
        if p <= 0.0 {
            return Ok(x);
        }
        if p >= 1.0 {
            bail!(Config, "dropout probability must be < 1, got {p}");
        }
        let keep = T::from_f64_lossy(1.0 / (1.0 - p));
        let vx = self.value(x);
        let mask: Vec<T> = (0..vx.len())
            .map(|_| if rng.uniform() < p { T::zero() } else { keep })
            .collect();
        let data = vx.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let value = Tensor::new(vx.shape(), data)?;
        self.push(value, Op::Dropout { x, mask }, &[x], "dropout")
    }

    /// Row lookup: `out[r] = table[rows[r]]`. Backward scatter-adds rows.
    pub fn gather_rows(&mut self, table: Var, rows: &[usize]) -> Result<Var> {
        let (v, d) = self.dims(table);
        let src = self.value(table).data();
        let mut out = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            if r >= v {
                bail!(Index, "row {r} out of range for table with {v} rows");
            }
            out.extend_from_slice(&src[r * d..(r + 1) * d]);
        }
        let value = Tensor::new(&[rows.len(), d], out)?;
        self.push(
            value,
            Op::GatherRows {
                table,
                rows: rows.to_vec(),
            },
            &[table],
            "gather_rows",
        )
    }

    /// Embedding lookup; alias of [`Tape::gather_rows`].
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        self.gather_rows(table, ids)
    }

    /// Column expansion `out[:, i] = src[:, index[i]]`. Backward scatter-adds
    /// every output column back into its source column.
    pub fn gather_columns(&mut self, src: Var, index: &[usize]) -> Result<Var> {
        let (m, k) = self.dims(src);
        if let Some(&bad) = index.iter().find(|&&j| j >= k) {
            bail!(Index, "gather index {bad} out of range for {k} columns");
        }
        let s = self.value(src).data();
        let v = index.len();
        let mut out = Vec::with_capacity(m * v);
        for r in 0..m {
            let row = &s[r * k..(r + 1) * k];
            out.extend(index.iter().map(|&j| row[j]));
        }
        let value = Tensor::new(&[m, v], out)?;
        self.push(
            value,
            Op::GatherColumns {
                src,
                index: index.to_vec(),
            },
            &[src],
            "gather_columns",
        )
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        if !vx.all_finite() {
            bail!(Numeric, "softmax input is not finite");
        }
        let (m, n) = vx.dims2();
        let mut out = vx.data().to_vec();
        for r in 0..m {
            softmax_in_place(&mut out[r * n..(r + 1) * n]);
        }
        let value = Tensor::new(vx.shape(), out)?;
        self.push(value, Op::Softmax(x), &[x], "softmax")
    }

    /// Mean cross-entropy of `logits` rows against `targets`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let m = targets.len().max(1);
        self.cross_entropy_scaled(logits, targets, T::one() / T::from_usize(m).unwrap())
    }

    /// `scale · Σ_r (logsumexp(row_r) − row_r[target_r])`.
    pub fn cross_entropy_scaled(&mut self, logits: Var, targets: &[usize], scale: T) -> Result<Var> {
        let (m, n) = self.dims(logits);
        if targets.len() != m {
            bail!(Dimension, "cross_entropy: {m} rows but {} targets", targets.len());
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= n) {
            bail!(Index, "target {bad} out of range for {n} classes");
        }
        let mut probs = self.value(logits).data().to_vec();
        let mut total = T::zero();
        for (r, &t) in targets.iter().enumerate() {
            let row = &mut probs[r * n..(r + 1) * n];
            let target_logit = row[t];
            let mx = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
            let mut z = T::zero();
            for p in row.iter_mut() {
                *p = (*p - mx).exp();
                z = z + *p;
            }
            let inv = T::one() / z;
            for p in row.iter_mut() {
                *p = *p * inv;
            }
            total = total + (mx + z.ln() - target_logit);
        }
        let value = Tensor::scalar(total * scale);
        self.push(
            value,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                scale,
                probs,
            },
            &[logits],
            "cross_entropy",
        )
    }

    /// Cross-entropy over a vocabulary whose logits are copies of codebook
    /// logits, evaluated on the `m×K` codebook logits only.
    ///
    /// `counts[j]` is the number of vocabulary items sharing code `j` and
    /// `codes[r]` is the code of row `r`'s target token. The partition
    /// function over the vocabulary is `Σ_j counts[j]·exp(L_c[j])`; codes with
    /// zero members contribute nothing.
    pub fn vq_cross_entropy_scaled(
        &mut self,
        code_logits: Var,
        counts: &[usize],
        codes: &[usize],
        scale: T,
    ) -> Result<Var> {
        let (m, k) = self.dims(code_logits);
        if counts.len() != k {
            bail!(Dimension, "vq_cross_entropy: {} counts for {k} codes", counts.len());
        }
        if codes.len() != m {
            bail!(Dimension, "vq_cross_entropy: {m} rows but {} targets", codes.len());
        }
        for &c in codes {
            if c >= k {
                bail!(Index, "code {c} out of range for {k} codes");
            }
            if counts[c] == 0 {
                bail!(Index, "target mapped to empty code {c}");
            }
        }
        let log_counts: Vec<Option<T>> = counts
            .iter()
            .map(|&c| (c > 0).then(|| T::from_usize(c).unwrap().ln()))
            .collect();
        let src = self.value(code_logits).data();
        let mut weights = vec![T::zero(); m * k];
        let mut total = T::zero();
        for (r, &code) in codes.iter().enumerate() {
            let row = &src[r * k..(r + 1) * k];
            let mut mx = T::neg_infinity();
            for (j, lc) in log_counts.iter().enumerate() {
                if let Some(lc) = lc {
                    mx = mx.max(row[j] + *lc);
                }
            }
            let mut z = T::zero();
            for (j, lc) in log_counts.iter().enumerate() {
                if let Some(lc) = lc {
                    let e = (row[j] + *lc - mx).exp();
                    weights[r * k + j] = e;
                    z = z + e;
                }
            }
            let lse = mx + z.ln();
            total = total + (lse - row[code]);
            for w in &mut weights[r * k..(r + 1) * k] {
                *w = *w / z;
            }
        }
        let value = Tensor::scalar(total * scale);
        self.push(
            value,
            Op::VqCrossEntropy {
                code_logits,
                codes: codes.to_vec(),
                scale,
                weights,
            },
            &[code_logits],
            "vq_cross_entropy",
        )
    }

    /// Multi-head causal self-attention over packed `[q | k | v]` rows.
    ///
    /// `qkv` is `(batch·seq) × 3d`; the output is `(batch·seq) × d`. Attention
    /// weights are dropped out with probability `dropout` when `rng` is given.
    pub fn causal_attention(
        &mut self,
        qkv: Var,
        batch: usize,
        seq: usize,
        heads: usize,
        dropout: f64,
        rng: Option<&mut SeedStream>,
    ) -> Result<Var> {
        let (rows, width) = self.dims(qkv);
        if rows != batch * seq || width % 3 != 0 || (width / 3) % heads != 0 {
            bail!(
                Dimension,
                "attention: qkv {rows}×{width} incompatible with batch {batch}, seq {seq}, heads {heads}"
            );
        }
        let d = width / 3;
        let dh = d / heads;
        let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
        let src = self.value(qkv).data();
        let mut probs = vec![T::zero(); batch * heads * seq * seq];
        let mut out = vec![T::zero(); rows * d];
        let mask = match rng {
            Some(rng) if dropout > 0.0 => {
                let keep = T::from_f64_lossy(1.0 / (1.0 - dropout));
                Some(
                    (0..probs.len())
                        .map(|_| if rng.uniform() < dropout { T::zero() } else { keep })
                        .collect::<Vec<T>>(),
                )
            }
            _ => None,
        };
        let mut scores = vec![T::zero(); seq];
        for b in 0..batch {
            for h in 0..heads {
                let base = (b * heads + h) * seq * seq;
                for i in 0..seq {
                    let qi = &src[(b * seq + i) * width + h * dh..][..dh];
                    let mut mx = T::neg_infinity();
                    for j in 0..=i {
                        let kj = &src[(b * seq + j) * width + d + h * dh..][..dh];
                        let s = dot(qi, kj) * scale;
                        scores[j] = s;
                        mx = mx.max(s);
                    }
                    let mut z = T::zero();
                    for s in &mut scores[..=i] {
                        *s = (*s - mx).exp();
                        z = z + *s;
                    }
                    let o = &mut out[(b * seq + i) * d + h * dh..][..dh];
                    for j in 0..=i {
                        let p = scores[j] / z;
                        probs[base + i * seq + j] = p;
                        let pd = match &mask {
                            Some(mk) => p * mk[base + i * seq + j],
                            None => p,
                        };
                        let vj = &src[(b * seq + j) * width + 2 * d + h * dh..][..dh];
                        for (ot, &vt) in o.iter_mut().zip(vj) {
                            *ot = *ot + pd * vt;
                        }
                    }
                }
            }
        }
        let value = Tensor::new(&[rows, d], out)?;
        self.push(
            value,
            Op::CausalAttention {
                qkv,
                batch,
                seq,
                heads,
                probs,
                mask,
            },
            &[qkv],
            "causal_attention",
        )
    }

    // ----- reverse pass -------------------------------------------------

    /// Accumulates `d loss / d v` for every recorded `v` that requires grad.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            bail!(Dimension, "backward needs a scalar loss");
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        // intermediates restart from zero; leaves keep accumulating
        for n in &mut self.nodes[..=loss.0] {
            if !matches!(n.op, Op::Leaf) {
                n.grad = None;
            }
        }
        {
            let g = self.nodes[loss.0].grad.get_or_insert_with(|| vec![T::zero()]);
            g[0] = g[0] + T::one();
        }
        for i in (0..=loss.0).rev() {
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &mut rest[0];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = node.grad.take() else { continue };
            backprop_node(before, node, &g);
            node.grad = Some(g);
        }
        Ok(())
    }
}

fn take_grad<T: Float>(nodes: &mut [Node<T>], v: Var) -> Option<Vec<T>> {
    let n = &mut nodes[v.0];
    if !n.requires_grad {
        return None;
    }
    Some(n.grad.take().unwrap_or_else(|| vec![T::zero(); n.value.len()]))
}

fn put_grad<T: Float>(nodes: &mut [Node<T>], v: Var, g: Option<Vec<T>>) {
    if let Some(g) = g {
        nodes[v.0].grad = Some(g);
    }
}

/// `grad(v) += f(i)` elementwise.
fn accumulate<T: Float>(nodes: &mut [Node<T>], v: Var, f: impl Fn(usize) -> T) {
    let mut g = take_grad(nodes, v);
    if let Some(buf) = g.as_mut() {
        for (i, x) in buf.iter_mut().enumerate() {
            *x = *x + f(i);
        }
    }
    put_grad(nodes, v, g);
}

fn backprop_node<T: Float>(nodes: &mut [Node<T>], node: &Node<T>, g: &[T]) {
    match &node.op {
        Op::Leaf => {}
        &Op::MatMul {
            a,
            b,
            trans_a,
            trans_b,
        } => {
            let (ra, ca) = nodes[a.0].value.dims2();
            let (rb, cb) = nodes[b.0].value.dims2();
            let (m, k) = if trans_a { (ca, ra) } else { (ra, ca) };
            let n = if trans_b { rb } else { cb };
            let mut ga = take_grad(nodes, a);
            if let Some(ga) = ga.as_mut() {
                let bv = nodes[b.0].value.data();
                if trans_a {
                    gemm(k, n, m, bv, trans_b, g, true, ga, true);
                } else {
                    gemm(m, n, k, g, false, bv, !trans_b, ga, true);
                }
            }
            put_grad(nodes, a, ga);
            let mut gb = take_grad(nodes, b);
            if let Some(gb) = gb.as_mut() {
                let av = nodes[a.0].value.data();
                if trans_b {
                    gemm(n, m, k, g, true, av, trans_a, gb, true);
                } else {
                    gemm(k, m, n, av, !trans_a, g, false, gb, true);
                }
            }
            put_grad(nodes, b, gb);
        }
        &Op::Add(a, b) => {
            accumulate(nodes, a, |i| g[i]);
            accumulate(nodes, b, |i| g[i]);
        }
        &Op::AddBias { x, bias } => {
            accumulate(nodes, x, |i| g[i]);
            let n = nodes[bias.0].value.len();
            let m = g.len() / n;
            let mut gb = take_grad(nodes, bias);
            if let Some(gb) = gb.as_mut() {
                for r in 0..m {
                    for (acc, &gv) in gb.iter_mut().zip(&g[r * n..(r + 1) * n]) {
                        *acc = *acc + gv;
                    }
                }
            }
            put_grad(nodes, bias, gb);
        }
        &Op::Scale(x, s) => accumulate(nodes, x, |i| g[i] * s),
        &Op::Sum(x) => accumulate(nodes, x, |_| g[0]),
        &Op::Transpose(x) => {
            let (m, n) = nodes[x.0].value.dims2();
            // out is n×m; out[j, i] = x[i, j]
            accumulate(nodes, x, |idx| {
                let (i, j) = (idx / n, idx % n);
                g[j * m + i]
            });
        }
        Op::ConcatCols(parts) => {
            let total: usize = parts.iter().map(|p| nodes[p.0].value.dims2().1).sum();
            let mut offset = 0;
            for &p in parts {
                let w = nodes[p.0].value.dims2().1;
                accumulate(nodes, p, |idx| {
                    let (r, c) = (idx / w, idx % w);
                    g[r * total + offset + c]
                });
                offset += w;
            }
        }
        &Op::Reshape(x) => accumulate(nodes, x, |i| g[i]),
        Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            rstd,
        } => {
            let n = nodes[gamma.0].value.len();
            let m = rstd.len();
            let gam = nodes[gamma.0].value.data().to_vec();
            let mut gg = take_grad(nodes, *gamma);
            if let Some(gg) = gg.as_mut() {
                for r in 0..m {
                    for c in 0..n {
                        gg[c] = gg[c] + g[r * n + c] * xhat[r * n + c];
                    }
                }
            }
            put_grad(nodes, *gamma, gg);
            let mut gbt = take_grad(nodes, *beta);
            if let Some(gbt) = gbt.as_mut() {
                for r in 0..m {
                    for c in 0..n {
                        gbt[c] = gbt[c] + g[r * n + c];
                    }
                }
            }
            put_grad(nodes, *beta, gbt);
            let mut gx = take_grad(nodes, *x);
            if let Some(gx) = gx.as_mut() {
                let nf = T::from_usize(n).unwrap();
                for r in 0..m {
                    let mut s1 = T::zero();
                    let mut s2 = T::zero();
                    for c in 0..n {
                        let dxh = g[r * n + c] * gam[c];
                        s1 = s1 + dxh;
                        s2 = s2 + dxh * xhat[r * n + c];
                    }
                    let (m1, m2) = (s1 / nf, s2 / nf);
                    for c in 0..n {
                        let dxh = g[r * n + c] * gam[c];
                        gx[r * n + c] = gx[r * n + c] + rstd[r] * (dxh - m1 - xhat[r * n + c] * m2);
                    }
                }
            }
            put_grad(nodes, *x, gx);
        }
        &Op::Gelu(x) => {
            let xs = nodes[x.0].value.data().to_vec();
            accumulate(nodes, x, |i| g[i] * gelu_grad(xs[i]));
        }
        Op::Dropout { x, mask } => accumulate(nodes, *x, |i| g[i] * mask[i]),
        Op::GatherRows { table, rows } => {
            let d = nodes[table.0].value.dims2().1;
            let mut gt = take_grad(nodes, *table);
            if let Some(gt) = gt.as_mut() {
                for (r, &row) in rows.iter().enumerate() {
                    for c in 0..d {
                        gt[row * d + c] = gt[row * d + c] + g[r * d + c];
                    }
                }
            }
            put_grad(nodes, *table, gt);
        }
        Op::GatherColumns { src, index } => {
            let (m, k) = nodes[src.0].value.dims2();
            let v = index.len();
            let mut gs = take_grad(nodes, *src);
            if let Some(gs) = gs.as_mut() {
                for r in 0..m {
                    let dst = &mut gs[r * k..(r + 1) * k];
                    for (&j, &gv) in index.iter().zip(&g[r * v..(r + 1) * v]) {
                        dst[j] = dst[j] + gv;
                    }
                }
            }
            put_grad(nodes, *src, gs);
        }
        &Op::Softmax(x) => {
            let y = node.value.data();
            let (m, n) = node.value.dims2();
            let mut gx = take_grad(nodes, x);
            if let Some(gx) = gx.as_mut() {
                for r in 0..m {
                    let yr = &y[r * n..(r + 1) * n];
                    let gr = &g[r * n..(r + 1) * n];
                    let s = dot(yr, gr);
                    for c in 0..n {
                        gx[r * n + c] = gx[r * n + c] + yr[c] * (gr[c] - s);
                    }
                }
            }
            put_grad(nodes, x, gx);
        }
        Op::CrossEntropy {
            logits,
            targets,
            scale,
            probs,
        } => {
            let n = nodes[logits.0].value.dims2().1;
            let f = g[0] * *scale;
            let mut gl = take_grad(nodes, *logits);
            if let Some(gl) = gl.as_mut() {
                for (r, &t) in targets.iter().enumerate() {
                    for c in 0..n {
                        gl[r * n + c] = gl[r * n + c] + f * probs[r * n + c];
                    }
                    gl[r * n + t] = gl[r * n + t] - f;
                }
            }
            put_grad(nodes, *logits, gl);
        }
        Op::VqCrossEntropy {
            code_logits,
            codes,
            scale,
            weights,
        } => {
            let k = nodes[code_logits.0].value.dims2().1;
            let f = g[0] * *scale;
            let mut gl = take_grad(nodes, *code_logits);
            if let Some(gl) = gl.as_mut() {
                for (r, &c) in codes.iter().enumerate() {
                    for j in 0..k {
                        gl[r * k + j] = gl[r * k + j] + f * weights[r * k + j];
                    }
                    gl[r * k + c] = gl[r * k + c] - f;
                }
            }
            put_grad(nodes, *code_logits, gl);
        }
        Op::CausalAttention {
            qkv,
            batch,
            seq,
            heads,
            probs,
            mask,
        } => {
            let (batch, seq, heads) = (*batch, *seq, *heads);
            let width = nodes[qkv.0].value.dims2().1;
            let d = width / 3;
            let dh = d / heads;
            let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
            let mut gq = take_grad(nodes, *qkv);
            let Some(gqkv) = gq.as_mut() else { return };
            let src = nodes[qkv.0].value.data();
            let mut dp = vec![T::zero(); seq];
            for b in 0..batch {
                for h in 0..heads {
                    let base = (b * heads + h) * seq * seq;
                    for i in 0..seq {
                        let go = &g[(b * seq + i) * d + h * dh..][..dh];
                        let mut s = T::zero();
                        for j in 0..=i {
                            let vrow = (b * seq + j) * width + 2 * d + h * dh;
                            let m = mask.as_ref().map_or(T::one(), |mk| mk[base + i * seq + j]);
                            let p = probs[base + i * seq + j];
                            let dpd = dot(go, &src[vrow..vrow + dh]);
                            for t in 0..dh {
                                gqkv[vrow + t] = gqkv[vrow + t] + p * m * go[t];
                            }
                            dp[j] = dpd * m;
                            s = s + p * dp[j];
                        }
                        let qrow = (b * seq + i) * width + h * dh;
                        for j in 0..=i {
                            let p = probs[base + i * seq + j];
                            let ds = p * (dp[j] - s) * scale;
                            let krow = (b * seq + j) * width + d + h * dh;
                            for t in 0..dh {
                                gqkv[qrow + t] = gqkv[qrow + t] + ds * src[krow + t];
                                gqkv[krow + t] = gqkv[krow + t] + ds * src[qrow + t];
                            }
                        }
                    }
                }
            }
            put_grad(nodes, *qkv, gq);
        }
    }
}

pub(crate) fn dot<T: Float>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

pub(crate) fn logsumexp<T: Float>(row: &[T]) -> T {
    let mx = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
    let s = row.iter().fold(T::zero(), |a, &v| a + (v - mx).exp());
    mx + s.ln()
}

pub(crate) fn softmax_in_place<T: Float>(row: &mut [T]) {
    let mx = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
    let mut z = T::zero();
    for v in row.iter_mut() {
        *v = (*v - mx).exp();
        z = z + *v;
    }
    for v in row.iter_mut() {
        *v = *v / z;
    }
}

fn gelu_consts<T: Float>() -> (T, T) {
    (
        T::from_f64_lossy((2.0 / std::f64::consts::PI).sqrt()),
        T::from_f64_lossy(0.044715),
    )
}

pub(crate) fn gelu<T: Float>(x: T) -> T {
    let (c, a) = gelu_consts::<T>();
    let half = T::from_f64_lossy(0.5);
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

fn gelu_grad<T: Float>(x: T) -> T {
    let (c, a) = gelu_consts::<T>();
    let half = T::from_f64_lossy(0.5);
    let three = T::from_f64_lossy(3.0);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + three * a * x * x)
}
