use super::tape::{Op, SoftmaxOutput, Tape, Var};
use super::{gelu, gelu_grad, gemm_into, sigmoid, softplus, Real, Result, SubstrateError};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Number of (query, key) pairs with key <= query in a causal window.
pub fn causal_pairs(seq: usize) -> usize {
    seq * (seq + 1) / 2
}

impl<T: Real> Tape<T> {
    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shapes[a.0] != self.shapes[b.0] {
            return Err(SubstrateError::Shape {
                op,
                lhs: self.shapes[a.0].clone(),
                rhs: self.shapes[b.0].clone(),
            });
        }
        Ok(())
    }

    /// `a [m, k] x b [k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (&self.shapes[a.0], &self.shapes[b.0]);
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(SubstrateError::Shape {
                op: "matmul",
                lhs: sa.clone(),
                rhs: sb.clone(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        gemm_into(&self.values[a.0], false, &self.values[b.0], false, m, k, n, &mut out, false);
        let needs = self.any_grad(&[a, b]);
        Ok(self.push(vec![m, n], out, Op::MatMul { a, b, m, k, n }, needs))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.values[a.0]
            .iter()
            .zip(&self.values[b.0])
            .map(|(&x, &y)| x + y)
            .collect();
        let needs = self.any_grad(&[a, b]);
        Ok(self.push(self.shapes[a.0].clone(), out, Op::Add { a, b }, needs))
    }

    /// Adds a row vector to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (_, cols) = self.rows_cols(a);
        if self.values[row.0].len() != cols {
            return Err(SubstrateError::Shape {
                op: "add_row",
                lhs: self.shapes[a.0].clone(),
                rhs: self.shapes[row.0].clone(),
            });
        }
        let r = &self.values[row.0];
        let out = self.values[a.0]
            .chunks(cols.max(1))
            .flat_map(|chunk| chunk.iter().zip(r).map(|(&x, &y)| x + y))
            .collect();
        let needs = self.any_grad(&[a, row]);
        Ok(self.push(self.shapes[a.0].clone(), out, Op::AddRow { a, row }, needs))
    }

    /// `alpha * x + y`.
    pub fn axpy(&mut self, alpha: f64, x: Var, y: Var) -> Result<Var> {
        self.same_shape("axpy", x, y)?;
        let alpha = T::lit(alpha);
        let out = self.values[x.0]
            .iter()
            .zip(&self.values[y.0])
            .map(|(&a, &b)| alpha * a + b)
            .collect();
        let needs = self.any_grad(&[x, y]);
        Ok(self.push(self.shapes[x.0].clone(), out, Op::Axpy { x, y, alpha }, needs))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.values[a.0]
            .iter()
            .zip(&self.values[b.0])
            .map(|(&x, &y)| x * y)
            .collect();
        let needs = self.any_grad(&[a, b]);
        Ok(self.push(self.shapes[a.0].clone(), out, Op::Mul { a, b }, needs))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let s = T::lit(s);
        let out = self.values[a.0].iter().map(|&x| x * s).collect();
        let needs = self.any_grad(&[a]);
        self.push(self.shapes[a.0].clone(), out, Op::Scale { a, s }, needs)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.values[a.0].iter().map(|&x| gelu(x)).collect();
        let needs = self.any_grad(&[a]);
        self.push(self.shapes[a.0].clone(), out, Op::Gelu { a }, needs)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let out = self.values[a.0].iter().map(|&x| softplus(x)).collect();
        let needs = self.any_grad(&[a]);
        self.push(self.shapes[a.0].clone(), out, Op::Softplus { a }, needs)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.values[a.0].iter().copied().sum();
        let needs = self.any_grad(&[a]);
        self.push(vec![1], vec![s], Op::Sum { a }, needs)
    }

    /// Normalises each row over the last axis, then applies gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (rows, cols) = self.rows_cols(x);
        if self.values[gain.0].len() != cols || self.values[bias.0].len() != cols {
            return Err(SubstrateError::Shape {
                op: "layer_norm",
                lhs: self.shapes[x.0].clone(),
                rhs: self.shapes[gain.0].clone(),
            });
        }
        let eps = T::lit(LAYER_NORM_EPS);
        let n = T::lit(cols as f64);
        let xs = &self.values[x.0];
        let g = &self.values[gain.0];
        let b = &self.values[bias.0];
        let mut xhat = vec![T::zero(); rows * cols];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); rows * cols];
        for r in 0..rows {
            let row = &xs[r * cols..(r + 1) * cols];
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for c in 0..cols {
                let h = (row[c] - mean) * rs;
                xhat[r * cols + c] = h;
                out[r * cols + c] = h * g[c] + b[c];
            }
        }
        let needs = self.any_grad(&[x, gain, bias]);
        Ok(self.push(
            self.shapes[x.0].clone(),
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            needs,
        ))
    }

    /// Gathers rows of `table [rows, dim]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (rows, dim) = self.rows_cols(table);
        let t = &self.values[table.0];
        let mut out = Vec::with_capacity(ids.len() * dim);
        for &id in ids {
            if id >= rows {
                return Err(SubstrateError::Index { index: id, rows });
            }
            out.extend_from_slice(&t[id * dim..(id + 1) * dim]);
        }
        let needs = self.any_grad(&[table]);
        Ok(self.push(
            vec![ids.len(), dim],
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            needs,
        ))
    }

    /// Columns `start..start + len` of a 2-D value.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = self.rows_cols(a);
        if start + len > cols {
            return Err(SubstrateError::Shape {
                op: "slice_cols",
                lhs: self.shapes[a.0].clone(),
                rhs: vec![start, len],
            });
        }
        let src = &self.values[a.0];
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&src[r * cols + start..r * cols + start + len]);
        }
        let needs = self.any_grad(&[a]);
        Ok(self.push(vec![rows, len], out, Op::SliceCols { a, start, cols }, needs))
    }

    /// Row softmax of `x + mask`, where the additive mask holds 0 for allowed
    /// entries and `-inf` for disallowed ones.
    pub fn softmax_rows(&mut self, x: Var, mask: &[T]) -> Result<SoftmaxOutput> {
        if mask.len() != self.values[x.0].len() {
            return Err(SubstrateError::Shape {
                op: "softmax_rows",
                lhs: self.shapes[x.0].clone(),
                rhs: vec![mask.len()],
            });
        }
        let (rows, cols) = self.rows_cols(x);
        let xs = &self.values[x.0];
        let mut out = vec![T::zero(); rows * cols];
        let mut fully_masked_rows = Vec::new();
        for r in 0..rows {
            let range = r * cols..(r + 1) * cols;
            let max = range
                .clone()
                .map(|i| xs[i] + mask[i])
                .fold(T::neg_infinity(), T::max);
            if max == T::neg_infinity() {
                fully_masked_rows.push(r);
                continue;
            }
            let mut total = T::zero();
            for i in range.clone() {
                let z = xs[i] + mask[i];
                let e = if z == T::neg_infinity() {
                    T::zero()
                } else {
                    (z - max).exp()
                };
                out[i] = e;
                total += e;
            }
            for i in range {
                out[i] /= total;
            }
        }
        let needs = self.any_grad(&[x]);
        let var = self.push(self.shapes[x.0].clone(), out, Op::Softmax { a: x, cols }, needs);
        Ok(SoftmaxOutput {
            var,
            fully_masked_rows,
        })
    }

    /// Causal multi-head scaled dot-product attention.
    ///
    /// `q`, `k`, `v` are `[batch * seq, heads * head_dim]` with each sequence
    /// stored contiguously. `bias`, when given, is `[heads, seq, seq]` and is
    /// added to the scaled scores of every sequence.
    pub fn causal_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        bias: Option<Var>,
        batch: usize,
        seq: usize,
        heads: usize,
    ) -> Result<Var> {
        self.same_shape("attention", q, k)?;
        self.same_shape("attention", q, v)?;
        let (rows, width) = self.rows_cols(q);
        if rows != batch * seq || heads == 0 || width % heads != 0 {
            return Err(SubstrateError::Shape {
                op: "attention",
                lhs: self.shapes[q.0].clone(),
                rhs: vec![batch, seq, heads],
            });
        }
        if let Some(b) = bias {
            if self.values[b.0].len() != heads * seq * seq {
                return Err(SubstrateError::Shape {
                    op: "attention bias",
                    lhs: self.shapes[b.0].clone(),
                    rhs: vec![heads, seq, seq],
                });
            }
        }
        let d = width / heads;
        let scale = T::one() / T::lit(d as f64).sqrt();
        let (qs, ks, vs) = (&self.values[q.0], &self.values[k.0], &self.values[v.0]);
        let bs = bias.map(|b| &self.values[b.0]);
        let mut probs = vec![T::zero(); batch * heads * seq * seq];
        let mut out = vec![T::zero(); rows * width];
        let mut scores = vec![T::zero(); seq];
        for b in 0..batch {
            for h in 0..heads {
                let pbase = (b * heads + h) * seq * seq;
                for i in 0..seq {
                    let qi = &qs[(b * seq + i) * width + h * d..][..d];
                    let mut max = T::neg_infinity();
                    for j in 0..=i {
                        let kj = &ks[(b * seq + j) * width + h * d..][..d];
                        let mut s = dot(qi, kj) * scale;
                        if let Some(bs) = bs {
                            s += bs[(h * seq + i) * seq + j];
                        }
                        scores[j] = s;
                        max = max.max(s);
                    }
                    let mut total = T::zero();
                    for s in scores.iter_mut().take(i + 1) {
                        *s = (*s - max).exp();
                        total += *s;
                    }
                    let prow = &mut probs[pbase + i * seq..][..seq];
                    let orow = &mut out[(b * seq + i) * width + h * d..][..d];
                    for j in 0..=i {
                        let p = scores[j] / total;
                        prow[j] = p;
                        let vj = &vs[(b * seq + j) * width + h * d..][..d];
                        for (o, &x) in orow.iter_mut().zip(vj) {
                            *o += p * x;
                        }
                    }
                }
            }
        }
        let needs = self.any_grad(&[q, k, v]) || bias.is_some_and(|b| self.needs_grad[b.0]);
        Ok(self.push(
            self.shapes[q.0].clone(),
            out,
            Op::Attention {
                q,
                k,
                v,
                bias,
                batch,
                seq,
                heads,
                probs,
            },
            needs,
        ))
    }

    /// Rotary rotation of the first `rot` dimensions of every head.
    ///
    /// `positions[r]` is the position of row `r`; pairs `(2i, 2i + 1)` turn
    /// by `pos / base^(2i / rot)`.
    pub fn rope(
        &mut self,
        a: Var,
        positions: &[usize],
        heads: usize,
        rot: usize,
        base: f64,
    ) -> Result<Var> {
        if rot % 2 != 0 {
            return Err(SubstrateError::OddRotarySpan(rot));
        }
        let (rows, width) = self.rows_cols(a);
        if heads == 0 || width % heads != 0 || rot > width / heads || positions.len() != rows {
            return Err(SubstrateError::Shape {
                op: "rope",
                lhs: self.shapes[a.0].clone(),
                rhs: vec![positions.len(), heads, rot],
            });
        }
        let head_dim = width / heads;
        let half = rot / 2;
        let mut cos = vec![T::zero(); rows * half];
        let mut sin = vec![T::zero(); rows * half];
        for (r, &p) in positions.iter().enumerate() {
            for i in 0..half {
                let freq = base.powf(-(2.0 * i as f64) / rot as f64);
                let angle = p as f64 * freq;
                cos[r * half + i] = T::lit(angle.cos());
                sin[r * half + i] = T::lit(angle.sin());
            }
        }
        let mut out = self.values[a.0].clone();
        rotate(&mut out, &cos, &sin, width, heads, head_dim, half, false);
        let needs = self.any_grad(&[a]);
        Ok(self.push(
            self.shapes[a.0].clone(),
            out,
            Op::Rope {
                a,
                cos,
                sin,
                heads,
                head_dim,
                rot,
            },
            needs,
        ))
    }

    /// `sum_n weights[n] * -log softmax(logits[n])[targets[n]]`.
    ///
    /// Rows with zero weight contribute nothing and receive zero gradient.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], weights: &[T]) -> Result<Var> {
        let (rows, vocab) = self.rows_cols(logits);
        if targets.len() != rows || weights.len() != rows {
            return Err(SubstrateError::Shape {
                op: "cross_entropy",
                lhs: self.shapes[logits.0].clone(),
                rhs: vec![targets.len(), weights.len()],
            });
        }
        let ls = &self.values[logits.0];
        let mut probs = vec![T::zero(); rows * vocab];
        let mut loss = T::zero();
        for r in 0..rows {
            if weights[r] == T::zero() {
                continue;
            }
            let t = targets[r];
            if t >= vocab {
                return Err(SubstrateError::Index {
                    index: t,
                    rows: vocab,
                });
            }
            let row = &ls[r * vocab..(r + 1) * vocab];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut total = T::zero();
            let prow = &mut probs[r * vocab..(r + 1) * vocab];
            for (p, &x) in prow.iter_mut().zip(row) {
                *p = (x - max).exp();
                total += *p;
            }
            for p in prow.iter_mut() {
                *p /= total;
            }
            loss += weights[r] * (total.ln() + max - row[t]);
        }
        let needs = self.any_grad(&[logits]);
        Ok(self.push(
            vec![1],
            vec![loss],
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                probs,
            },
            needs,
        ))
    }

    /// Normalised log-distance feeding the relative-bias network:
    /// `log(c (i - j) + 1) / log(c max(i, l) + 1)` for every causal pair,
    /// ordered by query then key. `c` and `l` are positive scalars.
    pub fn fire_input(&mut self, c: Var, l: Var, seq: usize) -> Result<Var> {
        if self.values[c.0].len() != 1 || self.values[l.0].len() != 1 {
            return Err(SubstrateError::Shape {
                op: "fire_input",
                lhs: self.shapes[c.0].clone(),
                rhs: self.shapes[l.0].clone(),
            });
        }
        let (cv, lv) = (self.values[c.0][0], self.values[l.0][0]);
        let mut out = Vec::with_capacity(causal_pairs(seq));
        for i in 0..seq {
            let m = T::lit(i as f64).max(lv);
            let den = (cv * m).ln_1p();
            for j in 0..=i {
                let num = (cv * T::lit((i - j) as f64)).ln_1p();
                let u = num / den;
                if !u.is_finite() {
                    return Err(SubstrateError::Invalid(format!(
                        "relative bias input not finite at ({i}, {j}) with c={cv}, L={lv}"
                    )));
                }
                out.push(u);
            }
        }
        let needs = self.any_grad(&[c, l]);
        let n = out.len();
        Ok(self.push(vec![n, 1], out, Op::FireInput { c, l, seq }, needs))
    }

    /// Spreads per-pair head values `[pairs, heads]` into a `[heads, seq, seq]`
    /// lower-triangular bias.
    pub fn fire_scatter(&mut self, a: Var, seq: usize) -> Result<Var> {
        let (rows, heads) = self.rows_cols(a);
        if rows != causal_pairs(seq) {
            return Err(SubstrateError::Shape {
                op: "fire_scatter",
                lhs: self.shapes[a.0].clone(),
                rhs: vec![causal_pairs(seq), heads],
            });
        }
        let src = &self.values[a.0];
        let mut out = vec![T::zero(); heads * seq * seq];
        let mut p = 0;
        for i in 0..seq {
            for j in 0..=i {
                for h in 0..heads {
                    out[(h * seq + i) * seq + j] = src[p * heads + h];
                }
                p += 1;
            }
        }
        let needs = self.any_grad(&[a]);
        Ok(self.push(vec![heads, seq, seq], out, Op::FireScatter { a, seq, heads }, needs))
    }

    pub(crate) fn backprop(&mut self, i: usize, g: &[T]) {
        let Tape {
            ops,
            values,
            grads,
            needs_grad,
            fault,
            ..
        } = self;
        let acc = |grads: &mut [Option<Vec<T>>], v: Var, f: &mut dyn FnMut(&mut [T])| {
            Tape::accumulate(grads, needs_grad, values, v, |s| f(s));
        };
        match &ops[i] {
            Op::Leaf => {}
            &Op::MatMul { a, b, m, k, n } => {
                let (av, bv) = (&values[a.0], &values[b.0]);
                // dA = G B^T, dB = A^T G
                acc(grads, a, &mut |s| gemm_into(g, false, bv, true, m, n, k, s, true));
                acc(grads, b, &mut |s| gemm_into(av, true, g, false, k, m, n, s, true));
            }
            &Op::Add { a, b } => {
                acc(grads, a, &mut |s| add_into(s, g));
                acc(grads, b, &mut |s| add_into(s, g));
            }
            &Op::AddRow { a, row } => {
                acc(grads, a, &mut |s| add_into(s, g));
                acc(grads, row, &mut |s| {
                    let cols = s.len();
                    for chunk in g.chunks(cols) {
                        add_into(s, chunk);
                    }
                });
            }
            &Op::Axpy { x, y, alpha } => {
                acc(grads, x, &mut |s| {
                    for (d, &gv) in s.iter_mut().zip(g) {
                        *d += alpha * gv;
                    }
                });
                acc(grads, y, &mut |s| add_into(s, g));
            }
            &Op::Mul { a, b } => {
                let (av, bv) = (&values[a.0], &values[b.0]);
                acc(grads, a, &mut |s| {
                    for ((d, &gv), &y) in s.iter_mut().zip(g).zip(bv) {
                        *d += gv * y;
                    }
                });
                acc(grads, b, &mut |s| {
                    for ((d, &gv), &x) in s.iter_mut().zip(g).zip(av) {
                        *d += gv * x;
                    }
                });
            }
            &Op::Scale { a, s: factor } => {
                acc(grads, a, &mut |s| {
                    for (d, &gv) in s.iter_mut().zip(g) {
                        *d += factor * gv;
                    }
                });
            }
            &Op::Gelu { a } => {
                let av = &values[a.0];
                acc(grads, a, &mut |s| {
                    for ((d, &gv), &x) in s.iter_mut().zip(g).zip(av) {
                        *d += gv * gelu_grad(x);
                    }
                });
            }
            &Op::Softplus { a } => {
                let av = &values[a.0];
                acc(grads, a, &mut |s| {
                    for ((d, &gv), &x) in s.iter_mut().zip(g).zip(av) {
                        *d += gv * sigmoid(x);
                    }
                });
            }
            &Op::Sum { a } => {
                acc(grads, a, &mut |s| {
                    for d in s.iter_mut() {
                        *d += g[0];
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let gv = &values[gain.0];
                let cols = gv.len();
                let rows = rstd.len();
                let n = T::lit(cols as f64);
                let factor = fault.unwrap_or(T::one());
                acc(grads, *x, &mut |s| {
                    let mut dxhat = vec![T::zero(); cols];
                    for r in 0..rows {
                        let gr = &g[r * cols..(r + 1) * cols];
                        let hr = &xhat[r * cols..(r + 1) * cols];
                        let mut mean_d = T::zero();
                        let mut mean_dh = T::zero();
                        for c in 0..cols {
                            dxhat[c] = gr[c] * gv[c];
                            mean_d += dxhat[c];
                            mean_dh += dxhat[c] * hr[c];
                        }
                        mean_d /= n;
                        mean_dh /= n;
                        let sr = &mut s[r * cols..(r + 1) * cols];
                        for c in 0..cols {
                            sr[c] += factor * rstd[r] * (dxhat[c] - mean_d - hr[c] * mean_dh);
                        }
                    }
                });
                acc(grads, *gain, &mut |s| {
                    for (gr, hr) in g.chunks(cols).zip(xhat.chunks(cols)) {
                        for c in 0..cols {
                            s[c] += gr[c] * hr[c];
                        }
                    }
                });
                acc(grads, *bias, &mut |s| {
                    for gr in g.chunks(cols) {
                        add_into(s, gr);
                    }
                });
            }
            Op::Embedding { table, ids } => {
                acc(grads, *table, &mut |s| {
                    let dim = g.len() / ids.len().max(1);
                    for (r, &id) in ids.iter().enumerate() {
                        add_into(&mut s[id * dim..(id + 1) * dim], &g[r * dim..(r + 1) * dim]);
                    }
                });
            }
            &Op::SliceCols { a, start, cols } => {
                acc(grads, a, &mut |s| {
                    let len = g.len() / (s.len() / cols).max(1);
                    for (r, gr) in g.chunks(len.max(1)).enumerate() {
                        add_into(&mut s[r * cols + start..r * cols + start + len], gr);
                    }
                });
            }
            &Op::Softmax { a, cols } => {
                let y = &values[i];
                acc(grads, a, &mut |s| {
                    for ((sr, yr), gr) in s.chunks_mut(cols).zip(y.chunks(cols)).zip(g.chunks(cols)) {
                        let dot: T = yr.iter().zip(gr).map(|(&p, &d)| p * d).sum();
                        for c in 0..cols {
                            sr[c] += yr[c] * (gr[c] - dot);
                        }
                    }
                });
            }
            Op::Attention {
                q,
                k,
                v,
                bias,
                batch,
                seq,
                heads,
                probs,
            } => {
                let (batch, seq, heads) = (*batch, *seq, *heads);
                let width = g.len() / (batch * seq).max(1);
                let d = width / heads;
                let scale = T::one() / T::lit(d as f64).sqrt();
                let (qs, ks, vs) = (&values[q.0], &values[k.0], &values[v.0]);
                let mut dq = vec![T::zero(); g.len()];
                let mut dk = vec![T::zero(); g.len()];
                let mut dv = vec![T::zero(); g.len()];
                let mut dbias = bias.map(|_| vec![T::zero(); heads * seq * seq]);
                let mut ds = vec![T::zero(); seq];
                for b in 0..batch {
                    for h in 0..heads {
                        let pbase = (b * heads + h) * seq * seq;
                        for i in 0..seq {
                            let row = (b * seq + i) * width + h * d;
                            let gi = &g[row..row + d];
                            let prow = &probs[pbase + i * seq..][..seq];
                            let mut total = T::zero();
                            for j in 0..=i {
                                let col = (b * seq + j) * width + h * d;
                                let p = prow[j];
                                let dvj = &mut dv[col..col + d];
                                for (o, &x) in dvj.iter_mut().zip(gi) {
                                    *o += p * x;
                                }
                                let dp = dot(gi, &vs[col..col + d]);
                                ds[j] = dp;
                                total += p * dp;
                            }
                            for j in 0..=i {
                                let s = prow[j] * (ds[j] - total);
                                if let Some(db) = dbias.as_mut() {
                                    db[(h * seq + i) * seq + j] += s;
                                }
                                let s = s * scale;
                                let col = (b * seq + j) * width + h * d;
                                let (qi, kj) = (&qs[row..row + d], &ks[col..col + d]);
                                for (o, &x) in dq[row..row + d].iter_mut().zip(kj) {
                                    *o += s * x;
                                }
                                for (o, &x) in dk[col..col + d].iter_mut().zip(qi) {
                                    *o += s * x;
                                }
                            }
                        }
                    }
                }
                acc(grads, *q, &mut |s| add_into(s, &dq));
                acc(grads, *k, &mut |s| add_into(s, &dk));
                acc(grads, *v, &mut |s| add_into(s, &dv));
                if let (Some(bv), Some(db)) = (bias, dbias) {
                    acc(grads, *bv, &mut |s| add_into(s, &db));
                }
            }
            Op::Rope {
                a,
                cos,
                sin,
                heads,
                head_dim,
                rot,
                ..
            } => {
                let width = heads * head_dim;
                acc(grads, *a, &mut |s| {
                    let mut back = g.to_vec();
                    rotate(&mut back, cos, sin, width, *heads, *head_dim, rot / 2, true);
                    add_into(s, &back);
                });
            }
            Op::CrossEntropy {
                logits,
                targets,
                weights,
                probs,
            } => {
                let vocab = probs.len() / targets.len().max(1);
                acc(grads, *logits, &mut |s| {
                    for (r, (&t, &w)) in targets.iter().zip(weights).enumerate() {
                        if w == T::zero() {
                            continue;
                        }
                        let scale = w * g[0];
                        let sr = &mut s[r * vocab..(r + 1) * vocab];
                        for (d, &p) in sr.iter_mut().zip(&probs[r * vocab..(r + 1) * vocab]) {
                            *d += scale * p;
                        }
                        sr[t] -= scale;
                    }
                });
            }
            &Op::FireInput { c, l, seq } => {
                let (cv, lv) = (values[c.0][0], values[l.0][0]);
                let mut dc = T::zero();
                let mut dl = T::zero();
                let mut p = 0;
                for i in 0..seq {
                    let fi = T::lit(i as f64);
                    let m = fi.max(lv);
                    let den = (cv * m).ln_1p();
                    let dden_dc = m / (T::one() + cv * m);
                    let dden_dl = if lv > fi {
                        cv / (T::one() + cv * lv)
                    } else {
                        T::zero()
                    };
                    for j in 0..=i {
                        let dist = T::lit((i - j) as f64);
                        let num = (cv * dist).ln_1p();
                        let dnum_dc = dist / (T::one() + cv * dist);
                        let gp = g[p];
                        dc += gp * (dnum_dc * den - num * dden_dc) / (den * den);
                        dl += gp * (-num * dden_dl) / (den * den);
                        p += 1;
                    }
                }
                acc(grads, c, &mut |s| s[0] += dc);
                acc(grads, l, &mut |s| s[0] += dl);
            }
            &Op::FireScatter { a, seq, heads } => {
                acc(grads, a, &mut |s| {
                    let mut p = 0;
                    for i in 0..seq {
                        for j in 0..=i {
                            for h in 0..heads {
                                s[p * heads + h] += g[(h * seq + i) * seq + j];
                            }
                            p += 1;
                        }
                    }
                });
            }
        }
    }
}

fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut acc = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

#[allow(clippy::too_many_arguments)]
fn rotate<T: Real>(
    data: &mut [T],
    cos: &[T],
    sin: &[T],
    width: usize,
    heads: usize,
    head_dim: usize,
    half: usize,
    inverse: bool,
) {
    if half == 0 {
        return;
    }
    for (r, row) in data.chunks_mut(width).enumerate() {
        let (cr, sr) = (&cos[r * half..(r + 1) * half], &sin[r * half..(r + 1) * half]);
        for h in 0..heads {
            let head = &mut row[h * head_dim..(h + 1) * head_dim];
            for i in 0..half {
                let (x0, x1) = (head[2 * i], head[2 * i + 1]);
                let s = if inverse { -sr[i] } else { sr[i] };
                head[2 * i] = x0 * cr[i] - x1 * s;
                head[2 * i + 1] = x0 * s + x1 * cr[i];
            }
        }
    }
}
