use super::kernels::{self, axis_split};
use super::{accumulate, shape_err, Op, Result, Tape, Tensor, TensorError, Var};

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable binary cross-entropy with logits.
fn bce_with_logits(x: f64, t: f64) -> f64 {
    x.max(0.0) - x * t + (-x.abs()).exp().ln_1p()
}

fn check_finite(op: &'static str, data: &[f64]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(TensorError::NonFinite(op))
    }
}

enum Broadcast {
    Same,
    LeftScalar,
    RightScalar,
}

fn broadcast(op: &'static str, a: &Tensor, b: &Tensor) -> Result<Broadcast> {
    if a.shape == b.shape || (a.len() == 1 && b.len() == 1) {
        Ok(Broadcast::Same)
    } else if a.len() == 1 {
        Ok(Broadcast::LeftScalar)
    } else if b.len() == 1 {
        Ok(Broadcast::RightScalar)
    } else {
        Err(shape_err(op, format!("{:?} vs {:?}", a.shape, b.shape)))
    }
}

impl Tape {
    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let v = self.value(x);
        let out = Tensor { shape: v.shape.clone(), data: v.data.iter().map(|&a| f(a)).collect() };
        let rg = self.any_grad(&[x]);
        self.push(out, op, rg)
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let out = match broadcast(name, ta, tb)? {
            Broadcast::Same => Tensor {
                shape: ta.shape.clone(),
                data: ta.data.iter().zip(&tb.data).map(|(&x, &y)| f(x, y)).collect(),
            },
            Broadcast::LeftScalar => {
                let x = ta.data[0];
                Tensor { shape: tb.shape.clone(), data: tb.data.iter().map(|&y| f(x, y)).collect() }
            }
            Broadcast::RightScalar => {
                let y = tb.data[0];
                Tensor { shape: ta.shape.clone(), data: ta.data.iter().map(|&x| f(x, y)).collect() }
            }
        };
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, op, rg))
    }

    /// Matrix product of rank-2 tensors.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2()?;
        let (k2, n) = self.value(b).dims2()?;
        if k != k2 {
            return Err(shape_err("matmul", format!("[{m}x{k}] x [{k2}x{n}]")));
        }
        let data = kernels::matmul(&self.value(a).data, &self.value(b).data, m, k, n);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor { shape: vec![m, n], data }, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.value(a).dims2()?;
        let data = kernels::transpose(&self.value(a).data, r, c);
        let rg = self.any_grad(&[a]);
        Ok(self.push(Tensor { shape: vec![c, r], data }, Op::Transpose(a), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("minimum", a, b, f64::min, Op::Minimum(a, b))
    }

    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("maximum", a, b, f64::max, Op::Maximum(a, b))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, |a| a * c, Op::Scale(x, c))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, |a| a + c, Op::AddScalar(x))
    }

    pub fn clamp_min(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, |a| a.max(c), Op::ClampMin(x, c))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |a| a.max(0.0), Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, f64::abs, Op::Abs(x))
    }

    /// Natural logarithm; inputs must be strictly positive.
    pub fn ln(&mut self, x: Var) -> Result<Var> {
        if self.value(x).data.iter().any(|&a| !(a > 0.0)) {
            return Err(TensorError::NonFinite("ln"));
        }
        Ok(self.unary(x, f64::ln, Op::Ln(x)))
    }

    /// x[m×n] + b[n] on every row.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let (m, n) = self.value(x).dims2()?;
        if self.value(b).len() != n {
            return Err(shape_err("add_row", format!("[{m}x{n}] + {:?}", self.shape(b))));
        }
        let bv = &self.value(b).data;
        let mut data = self.value(x).data.clone();
        for row in data.chunks_mut(n) {
            for (v, &bb) in row.iter_mut().zip(bv) {
                *v += bb;
            }
        }
        let rg = self.any_grad(&[x, b]);
        Ok(self.push(Tensor { shape: vec![m, n], data }, Op::AddRow(x, b), rg))
    }

    /// x[m×n] ⊙ g[n] on every row.
    pub fn mul_row(&mut self, x: Var, g: Var) -> Result<Var> {
        let (m, n) = self.value(x).dims2()?;
        if self.value(g).len() != n {
            return Err(shape_err("mul_row", format!("[{m}x{n}] * {:?}", self.shape(g))));
        }
        let gv = &self.value(g).data;
        let mut data = self.value(x).data.clone();
        for row in data.chunks_mut(n) {
            for (v, &gg) in row.iter_mut().zip(gv) {
                *v *= gg;
            }
        }
        let rg = self.any_grad(&[x, g]);
        Ok(self.push(Tensor { shape: vec![m, n], data }, Op::MulRow(x, g), rg))
    }

    /// Softmax along `axis`, with max subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let v = self.value(x);
        if axis >= v.rank() {
            return Err(shape_err("softmax", format!("axis {axis} for shape {:?}", v.shape)));
        }
        if v.data.iter().any(|a| a.is_nan()) {
            return Err(TensorError::NonFinite("softmax"));
        }
        let (outer, n, inner) = axis_split(&v.shape, axis);
        let mut out = vec![0.0; v.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * n + j) * inner + i;
                let mx = (0..n).map(|j| v.data[idx(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut s = 0.0;
                for j in 0..n {
                    let e = (v.data[idx(j)] - mx).exp();
                    out[idx(j)] = e;
                    s += e;
                }
                for j in 0..n {
                    out[idx(j)] /= s;
                }
            }
        }
        let shape = v.shape.clone();
        let rg = self.any_grad(&[x]);
        Ok(self.push(Tensor { shape, data: out }, Op::Softmax { x, axis }, rg))
    }

    /// Row softmax of a rank-2 tensor restricted to `allowed` entries; the
    /// remaining entries are exactly zero. Every row needs one allowed entry.
    pub fn masked_softmax(&mut self, x: Var, allowed: &[bool]) -> Result<Var> {
        let (m, n) = self.value(x).dims2()?;
        if allowed.len() != m * n {
            return Err(shape_err("masked_softmax", format!("mask of {} for [{m}x{n}]", allowed.len())));
        }
        let v = &self.value(x).data;
        if v.iter().any(|a| a.is_nan()) {
            return Err(TensorError::NonFinite("masked_softmax"));
        }
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            let row = &v[r * n..(r + 1) * n];
            let ok = &allowed[r * n..(r + 1) * n];
            let mx = row
                .iter()
                .zip(ok)
                .filter(|(_, &a)| a)
                .map(|(&x, _)| x)
                .fold(f64::NEG_INFINITY, f64::max);
            if mx == f64::NEG_INFINITY && !ok.iter().any(|&a| a) {
                return Err(shape_err("masked_softmax", format!("row {r} has no allowed entry")));
            }
            let o = &mut out[r * n..(r + 1) * n];
            let mut s = 0.0;
            for j in 0..n {
                if ok[j] {
                    let e = (row[j] - mx).exp();
                    o[j] = e;
                    s += e;
                }
            }
            for j in 0..n {
                if ok[j] {
                    o[j] /= s;
                }
            }
        }
        let rg = self.any_grad(&[x]);
        Ok(self.push(
            Tensor { shape: vec![m, n], data: out },
            Op::MaskedSoftmax(x),
            rg,
        ))
    }

    /// Normalizes the last axis to zero mean and unit (biased) variance.
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Result<Var> {
        let v = self.value(x);
        let n = *v.shape.last().ok_or_else(|| shape_err("layer_norm", "rank 0"))?;
        let mut out = vec![0.0; v.len()];
        let mut inv_std = Vec::with_capacity(v.len() / n.max(1));
        for (row, o) in v.data.chunks(n).zip(out.chunks_mut(n)) {
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + eps).sqrt();
            for (oo, a) in o.iter_mut().zip(row) {
                *oo = (a - mean) * is;
            }
            inv_std.push(is);
        }
        check_finite("layer_norm", &out)?;
        let shape = v.shape.clone();
        let rg = self.any_grad(&[x]);
        Ok(self.push(Tensor { shape, data: out }, Op::LayerNorm { x, inv_std }, rg))
    }

    /// Concatenates along axis 0 (any rank, equal trailing extents) or
    /// axis 1 (rank 2, equal row counts).
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts.first().ok_or_else(|| shape_err("concat", "no inputs"))?;
        let shape0 = self.shape(*first).to_vec();
        let out = match axis {
            0 => {
                let tail = &shape0[1..];
                let mut rows = 0;
                let mut data = Vec::new();
                for &p in parts {
                    let t = self.value(p);
                    if t.rank() != shape0.len() || &t.shape[1..] != tail {
                        return Err(shape_err("concat", format!("{:?} vs {:?}", shape0, t.shape)));
                    }
                    rows += t.shape[0];
                    data.extend_from_slice(&t.data);
                }
                let mut shape = shape0.clone();
                shape[0] = rows;
                Tensor { shape, data }
            }
            1 => {
                let (m, _) = self.value(*first).dims2()?;
                let mut widths = Vec::with_capacity(parts.len());
                for &p in parts {
                    let (r, c) = self.value(p).dims2()?;
                    if r != m {
                        return Err(shape_err("concat", format!("row counts {m} vs {r}")));
                    }
                    widths.push(c);
                }
                let total: usize = widths.iter().sum();
                let mut data = Vec::with_capacity(m * total);
                for r in 0..m {
                    for (&p, &w) in parts.iter().zip(&widths) {
                        data.extend_from_slice(&self.value(p).data[r * w..(r + 1) * w]);
                    }
                }
                Tensor { shape: vec![m, total], data }
            }
            _ => return Err(shape_err("concat", format!("unsupported axis {axis}"))),
        };
        let rg = self.any_grad(parts);
        Ok(self.push(out, Op::Concat { parts: parts.to_vec(), axis }, rg))
    }

    /// Columns `start..end` of a rank-2 tensor.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (m, n) = self.value(x).dims2()?;
        if start > end || end > n {
            return Err(shape_err("slice_cols", format!("{start}..{end} of {n}")));
        }
        let w = end - start;
        let src = &self.value(x).data;
        let mut data = Vec::with_capacity(m * w);
        for r in 0..m {
            data.extend_from_slice(&src[r * n + start..r * n + end]);
        }
        let rg = self.any_grad(&[x]);
        Ok(self.push(Tensor { shape: vec![m, w], data }, Op::SliceCols { x, start }, rg))
    }

    /// Rows `start..end` along axis 0.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let t = self.value(x);
        let rows = *t.shape.first().ok_or_else(|| shape_err("slice_rows", "rank 0"))?;
        if start > end || end > rows {
            return Err(shape_err("slice_rows", format!("{start}..{end} of {rows}")));
        }
        let stride = t.len() / rows.max(1);
        let data = t.data[start * stride..end * stride].to_vec();
        let mut shape = t.shape.clone();
        shape[0] = end - start;
        let rg = self.any_grad(&[x]);
        Ok(self.push(Tensor { shape, data }, Op::SliceRows { x, start }, rg))
    }

    /// Selects rows along axis 0; indices may repeat.
    pub fn gather_rows(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let t = self.value(x);
        let rows = *t.shape.first().ok_or_else(|| shape_err("gather_rows", "rank 0"))?;
        let stride = t.len() / rows.max(1);
        let mut data = Vec::with_capacity(index.len() * stride);
        for &i in index {
            if i >= rows {
                return Err(shape_err("gather_rows", format!("index {i} of {rows}")));
            }
            data.extend_from_slice(&t.data[i * stride..(i + 1) * stride]);
        }
        let mut shape = t.shape.clone();
        shape[0] = index.len();
        let rg = self.any_grad(&[x]);
        Ok(self.push(Tensor { shape, data }, Op::GatherRows { x, index: index.to_vec() }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshaped(shape.to_vec())?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data.iter().sum();
        let rg = self.any_grad(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.data.iter().sum::<f64>() / t.len().max(1) as f64;
        let rg = self.any_grad(&[x]);
        self.push(Tensor::scalar(s), Op::Mean(x), rg)
    }

    /// Sum of absolute values (L1 norm of the flattened tensor).
    pub fn abs_sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data.iter().map(|a| a.abs()).sum();
        let rg = self.any_grad(&[x]);
        self.push(Tensor::scalar(s), Op::AbsSum(x), rg)
    }

    /// Summed sigmoid focal loss over all elements:
    /// `α_t · (1 − p_t)^γ · BCE(x, t)` with `p = σ(x)`.
    pub fn sigmoid_focal(&mut self, logits: Var, targets: &Tensor, alpha: f64, gamma: f64) -> Result<Var> {
        let x = self.value(logits);
        if x.shape != targets.shape {
            return Err(shape_err("sigmoid_focal", format!("{:?} vs {:?}", x.shape, targets.shape)));
        }
        check_finite("sigmoid_focal", &x.data)?;
        let mut s = 0.0;
        for (&xi, &t) in x.data.iter().zip(&targets.data) {
            s += focal_element(xi, t, alpha, gamma);
        }
        let rg = self.any_grad(&[logits]);
        Ok(self.push(
            Tensor::scalar(s),
            Op::SigmoidFocal { logits, targets: targets.data.clone(), alpha, gamma },
            rg,
        ))
    }

    /// `Σ_i w_i · (−log softmax(logits_i)[target_i])` over rows.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], weights: &[f64]) -> Result<Var> {
        let (m, c) = self.value(logits).dims2()?;
        if targets.len() != m || weights.len() != m || targets.iter().any(|&t| t >= c) {
            return Err(shape_err("cross_entropy", format!("{m} rows, {c} classes, {} targets", targets.len())));
        }
        let v = &self.value(logits).data;
        check_finite("cross_entropy", v)?;
        let mut s = 0.0;
        for r in 0..m {
            let row = &v[r * c..(r + 1) * c];
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|a| (a - mx).exp()).sum::<f64>().ln();
            s += weights[r] * (lse - row[targets[r]]);
        }
        let rg = self.any_grad(&[logits]);
        Ok(self.push(
            Tensor::scalar(s),
            Op::CrossEntropy { logits, targets: targets.to_vec(), weights: weights.to_vec() },
            rg,
        ))
    }

    pub(crate) fn backprop_node(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        let out = &node.value.data;
        let rg = |v: Var| self.nodes[v.0].requires_grad;
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = val(*a).dims2().unwrap();
                let n = val(*b).shape[1];
                if rg(*a) {
                    accumulate(grads, *a, kernels::matmul_nt(g, &val(*b).data, m, n, k));
                }
                if rg(*b) {
                    accumulate(grads, *b, kernels::matmul_tn(&val(*a).data, g, m, k, n));
                }
            }
            Op::Transpose(a) => {
                let (r, c) = val(*a).dims2().unwrap();
                accumulate(grads, *a, kernels::transpose(g, c, r));
            }
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) | Op::Minimum(a, b) | Op::Maximum(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let n = out.len();
                let av = |i: usize| if ta.len() == 1 { ta.data[0] } else { ta.data[i] };
                let bv = |i: usize| if tb.len() == 1 { tb.data[0] } else { tb.data[i] };
                let (da, db): (Box<dyn Fn(usize) -> f64>, Box<dyn Fn(usize) -> f64>) = match &node.op {
                    Op::Add(..) => (Box::new(|_| 1.0), Box::new(|_| 1.0)),
                    Op::Sub(..) => (Box::new(|_| 1.0), Box::new(|_| -1.0)),
                    Op::Mul(..) => (Box::new(|i| bv(i)), Box::new(|i| av(i))),
                    Op::Div(..) => (
                        Box::new(|i| 1.0 / bv(i)),
                        Box::new(|i| -av(i) / (bv(i) * bv(i))),
                    ),
                    Op::Minimum(..) => (
                        Box::new(|i| if av(i) <= bv(i) { 1.0 } else { 0.0 }),
                        Box::new(|i| if av(i) <= bv(i) { 0.0 } else { 1.0 }),
                    ),
                    _ => (
                        Box::new(|i| if av(i) >= bv(i) { 1.0 } else { 0.0 }),
                        Box::new(|i| if av(i) >= bv(i) { 0.0 } else { 1.0 }),
                    ),
                };
                for (v, t, d) in [(*a, ta, &da), (*b, tb, &db)] {
                    if !rg(v) {
                        continue;
                    }
                    if t.len() == 1 && n != 1 {
                        let s: f64 = (0..n).map(|i| g[i] * d(i)).sum();
                        accumulate(grads, v, vec![s]);
                    } else {
                        accumulate(grads, v, (0..n).map(|i| g[i] * d(i)).collect());
                    }
                }
            }
            Op::Scale(x, c) => accumulate(grads, *x, g.iter().map(|a| a * c).collect()),
            Op::AddScalar(x) | Op::Reshape(x) => accumulate(grads, *x, g.to_vec()),
            Op::ClampMin(x, c) => {
                let xv = &val(*x).data;
                accumulate(grads, *x, g.iter().zip(xv).map(|(a, &v)| if v > *c { *a } else { 0.0 }).collect());
            }
            Op::AddRow(x, b) => {
                let n = val(*b).len();
                if rg(*x) {
                    accumulate(grads, *x, g.to_vec());
                }
                if rg(*b) {
                    let mut gb = vec![0.0; n];
                    for row in g.chunks(n) {
                        for (s, a) in gb.iter_mut().zip(row) {
                            *s += a;
                        }
                    }
                    accumulate(grads, *b, gb);
                }
            }
            Op::MulRow(x, w) => {
                let n = val(*w).len();
                let wv = &val(*w).data;
                let xv = &val(*x).data;
                if rg(*x) {
                    let gx = g.chunks(n).flat_map(|row| row.iter().zip(wv).map(|(a, b)| a * b)).collect();
                    accumulate(grads, *x, gx);
                }
                if rg(*w) {
                    let mut gw = vec![0.0; n];
                    for (grow, xrow) in g.chunks(n).zip(xv.chunks(n)) {
                        for ((s, a), b) in gw.iter_mut().zip(grow).zip(xrow) {
                            *s += a * b;
                        }
                    }
                    accumulate(grads, *w, gw);
                }
            }
            Op::Relu(x) => {
                let xv = &val(*x).data;
                accumulate(grads, *x, g.iter().zip(xv).map(|(a, &v)| if v > 0.0 { *a } else { 0.0 }).collect());
            }
            Op::Sigmoid(x) => {
                accumulate(grads, *x, g.iter().zip(out).map(|(a, &y)| a * y * (1.0 - y)).collect());
            }
            Op::Ln(x) => {
                let xv = &val(*x).data;
                accumulate(grads, *x, g.iter().zip(xv).map(|(a, &v)| a / v).collect());
            }
            Op::Abs(x) => {
                let xv = &val(*x).data;
                accumulate(grads, *x, g.iter().zip(xv).map(|(a, &v)| a * sign(v)).collect());
            }
            Op::Softmax { x, axis } => {
                let (outer, n, inner) = axis_split(&node.value.shape, *axis);
                let mut gx = vec![0.0; out.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |j: usize| (o * n + j) * inner + i;
                        let dot: f64 = (0..n).map(|j| g[idx(j)] * out[idx(j)]).sum();
                        for j in 0..n {
                            gx[idx(j)] = out[idx(j)] * (g[idx(j)] - dot);
                        }
                    }
                }
                accumulate(grads, *x, gx);
            }
            Op::MaskedSoftmax(x) => {
                let n = node.value.shape[1];
                let mut gx = vec![0.0; out.len()];
                for ((grow, yrow), dst) in g.chunks(n).zip(out.chunks(n)).zip(gx.chunks_mut(n)) {
                    let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                    for ((d, a), y) in dst.iter_mut().zip(grow).zip(yrow) {
                        *d = y * (a - dot);
                    }
                }
                accumulate(grads, *x, gx);
            }
            Op::LayerNorm { x, inv_std } => {
                let n = *node.value.shape.last().unwrap();
                let mut gx = vec![0.0; out.len()];
                for (((grow, yrow), dst), is) in g.chunks(n).zip(out.chunks(n)).zip(gx.chunks_mut(n)).zip(inv_std) {
                    let mg = grow.iter().sum::<f64>() / n as f64;
                    let mgy = grow.iter().zip(yrow).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                    for ((d, a), y) in dst.iter_mut().zip(grow).zip(yrow) {
                        *d = is * (a - mg - y * mgy);
                    }
                }
                accumulate(grads, *x, gx);
            }
            Op::Concat { parts, axis } => match axis {
                0 => {
                    let mut off = 0;
                    for &p in parts {
                        let len = val(p).len();
                        if rg(p) {
                            accumulate(grads, p, g[off..off + len].to_vec());
                        }
                        off += len;
                    }
                }
                _ => {
                    let total = node.value.shape[1];
                    let mut off = 0;
                    for &p in parts {
                        let (m, w) = val(p).dims2().unwrap();
                        if rg(p) {
                            let mut gp = Vec::with_capacity(m * w);
                            for r in 0..m {
                                gp.extend_from_slice(&g[r * total + off..r * total + off + w]);
                            }
                            accumulate(grads, p, gp);
                        }
                        off += w;
                    }
                }
            },
            Op::SliceCols { x, start } => {
                let (m, n) = val(*x).dims2().unwrap();
                let w = node.value.shape[1];
                let mut gx = vec![0.0; m * n];
                for r in 0..m {
                    gx[r * n + start..r * n + start + w].copy_from_slice(&g[r * w..(r + 1) * w]);
                }
                accumulate(grads, *x, gx);
            }
            Op::SliceRows { x, start } => {
                let t = val(*x);
                let stride = t.len() / t.shape[0].max(1);
                let mut gx = vec![0.0; t.len()];
                gx[start * stride..start * stride + g.len()].copy_from_slice(g);
                accumulate(grads, *x, gx);
            }
            Op::GatherRows { x, index } => {
                let t = val(*x);
                let stride = t.len() / t.shape[0].max(1);
                let mut gx = vec![0.0; t.len()];
                for (k, &i) in index.iter().enumerate() {
                    for c in 0..stride {
                        gx[i * stride + c] += g[k * stride + c];
                    }
                }
                accumulate(grads, *x, gx);
            }
            Op::Sum(x) => accumulate(grads, *x, vec![g[0]; val(*x).len()]),
            Op::Mean(x) => {
                let n = val(*x).len();
                accumulate(grads, *x, vec![g[0] / n as f64; n]);
            }
            Op::AbsSum(x) => {
                accumulate(grads, *x, val(*x).data.iter().map(|&v| g[0] * sign(v)).collect());
            }
            Op::SigmoidFocal { logits, targets, alpha, gamma } => {
                let xv = &val(*logits).data;
                let gx = xv
                    .iter()
                    .zip(targets)
                    .map(|(&x, &t)| g[0] * focal_element_grad(x, t, *alpha, *gamma))
                    .collect();
                accumulate(grads, *logits, gx);
            }
            Op::CrossEntropy { logits, targets, weights } => {
                let (m, c) = val(*logits).dims2().unwrap();
                let v = &val(*logits).data;
                let mut gx = vec![0.0; m * c];
                for r in 0..m {
                    let row = &v[r * c..(r + 1) * c];
                    let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let s: f64 = row.iter().map(|a| (a - mx).exp()).sum();
                    for j in 0..c {
                        let p = (row[j] - mx).exp() / s;
                        let onehot = if j == targets[r] { 1.0 } else { 0.0 };
                        gx[r * c + j] = g[0] * weights[r] * (p - onehot);
                    }
                }
                accumulate(grads, *logits, gx);
            }
        }
    }
}

/// Subgradient of |x|; zero at the kink.
fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// One element of the sigmoid focal loss.
pub fn focal_element(x: f64, t: f64, alpha: f64, gamma: f64) -> f64 {
    let p = sigmoid(x);
    let p_t = p * t + (1.0 - p) * (1.0 - t);
    let alpha_t = alpha * t + (1.0 - alpha) * (1.0 - t);
    alpha_t * (1.0 - p_t).powf(gamma) * bce_with_logits(x, t)
}

fn focal_element_grad(x: f64, t: f64, alpha: f64, gamma: f64) -> f64 {
    let p = sigmoid(x);
    let p_t = p * t + (1.0 - p) * (1.0 - t);
    let alpha_t = alpha * t + (1.0 - alpha) * (1.0 - t);
    let q = 1.0 - p_t;
    let ce = bce_with_logits(x, t);
    let mut d = (p - t) * q.powf(gamma);
    if gamma != 0.0 && q > 0.0 {
        d -= ce * gamma * q.powf(gamma - 1.0) * (2.0 * t - 1.0) * p * (1.0 - p);
    }
    alpha_t * d
}
