use super::{Gradients, ParamId, ParamStore, Rng};
use crate::error::{dim_err, Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    OneMinus(Var),
    /// vector * scalar node
    MulScalar {
        x: Var,
        s: Var,
    },
    Sigmoid(Var),
    Tanh(Var),
    Softmax {
        x: Var,
        outer: usize,
        n: usize,
        inner: usize,
    },
    LogSoftmax {
        x: Var,
        outer: usize,
        n: usize,
        inner: usize,
    },
    LogClamped {
        x: Var,
        floor: f64,
    },
    Concat {
        parts: Vec<Var>,
        outer: usize,
        inner: usize,
    },
    Slice {
        x: Var,
        start: usize,
    },
    Gather {
        x: Var,
        idx: Vec<usize>,
    },
    GatherRows {
        table: Var,
        ids: Vec<usize>,
        width: usize,
    },
    ScatterAdd {
        x: Var,
        idx: Vec<usize>,
    },
    Sum(Var),
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
    /// Output is `[h'; c']`. `acts` holds post-activation gates `[i; f; g; o]`
    /// followed by `tanh(c')`.
    Lstm {
        x: Var,
        h: Var,
        c: Var,
        w: Var,
        b: Var,
        acts: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
}

/// Define-by-run computation graph over a borrowed [`ParamStore`].
///
/// A recording graph keeps every operation for [`Graph::backward`]; an
/// inference graph keeps values only.
pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
    record: bool,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn axis_split(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return dim_err(format!("axis {axis} out of range for shape {shape:?}"));
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            param_vars: vec![None; params.len()],
            record: true,
        }
    }

    /// Graph that computes values without recording operations.
    pub fn inference(params: &'p ParamStore) -> Self {
        Self {
            record: false,
            ..Self::new(params)
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn is_recording(&self) -> bool {
        self.record
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        let op = if self.record { op } else { Op::Leaf };
        self.nodes.push(Node { shape, value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn numel(&self, v: Var) -> usize {
        self.nodes[v.0].value.len()
    }

    pub fn scalar_value(&self, v: Var) -> Result<f64> {
        match self.value(v) {
            [x] => Ok(*x),
            other => dim_err(format!("expected scalar, got {} values", other.len())),
        }
    }

    // ---------------------------------------------------------------- leaves

    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return dim_err(format!(
                "shape {shape:?} holds {n} values, got {}",
                data.len()
            ));
        }
        Ok(self.push(shape, data, Op::Leaf))
    }

    pub fn vector(&mut self, data: Vec<f64>) -> Var {
        let n = data.len();
        self.push(vec![n], data, Op::Leaf)
    }

    pub fn scalar(&mut self, x: f64) -> Var {
        self.push(vec![], vec![x], Op::Leaf)
    }

    pub fn zeros(&mut self, n: usize) -> Var {
        self.push(vec![n], vec![0.0; n], Op::Leaf)
    }

    /// Leaf bound to a stored parameter. Repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        let t = self.params.tensor(id);
        let value = t.data().iter().map(|&x| x as f64).collect();
        let v = self.push(t.shape().to_vec(), value, Op::Param(id));
        self.param_vars[id.0] = Some(v);
        v
    }

    pub fn param_named(&mut self, name: &str) -> Result<Var> {
        let id = self.params.id(name)?;
        Ok(self.param(id))
    }

    // ------------------------------------------------------------ algebra

    /// Matrix product. A 1-D left operand is a row vector and a 1-D right
    /// operand a column vector; the corresponding output axis is dropped.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (m, k, a_vec) = match sa.as_slice() {
            [k] => (1, *k, true),
            [m, k] => (*m, *k, false),
            _ => return dim_err(format!("matmul operand shapes {sa:?} x {sb:?}")),
        };
        let (k2, n, b_vec) = match sb.as_slice() {
            [k] => (*k, 1, true),
            [k, n] => (*k, *n, false),
            _ => return dim_err(format!("matmul operand shapes {sa:?} x {sb:?}")),
        };
        if k != k2 {
            return dim_err(format!("matmul inner dimensions differ: {sa:?} x {sb:?}"));
        }
        let av = self.value(a);
        let bv = self.value(b);
        let mut out = vec![0.0; m * n];
        if n == 1 {
            for i in 0..m {
                let row = &av[i * k..(i + 1) * k];
                out[i] = row.iter().zip(bv).map(|(x, y)| x * y).sum();
            }
        } else {
            for i in 0..m {
                let orow = &mut out[i * n..(i + 1) * n];
                for p in 0..k {
                    let x = av[i * k + p];
                    if x == 0.0 {
                        continue;
                    }
                    let brow = &bv[p * n..(p + 1) * n];
                    for (o, y) in orow.iter_mut().zip(brow) {
                        *o += x * y;
                    }
                }
            }
        }
        let mut shape = Vec::new();
        if !a_vec {
            shape.push(m);
        }
        if !b_vec {
            shape.push(n);
        }
        Ok(self.push(shape, out, Op::MatMul { a, b, m, k, n }))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return dim_err(format!(
                "{what}: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            ));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        self.push(shape, out, op)
    }

    fn map(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let out = self.value(a).iter().map(|&x| f(x)).collect();
        let shape = self.shape(a).to_vec();
        self.push(shape, out, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        Ok(self.zip_with(a, b, |x, y| x + y, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        Ok(self.zip_with(a, b, |x, y| x - y, Op::Sub(a, b)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        Ok(self.zip_with(a, b, |x, y| x * y, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        self.map(a, |x| x * factor, Op::Scale(a, factor))
    }

    /// `1 - x` elementwise.
    pub fn one_minus(&mut self, a: Var) -> Var {
        self.map(a, |x| 1.0 - x, Op::OneMinus(a))
    }

    /// Multiplies every element of `x` by the single value held in `s`.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        let sv = self.scalar_value(s)?;
        Ok(self.map(x, |v| v * sv, Op::MulScalar { x, s }))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map(a, f64::tanh, Op::Tanh(a))
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (outer, n, inner) = axis_split(self.shape(x), axis)?;
        if n == 0 {
            return dim_err("softmax over an empty axis");
        }
        let xv = self.value(x);
        let mut out = vec![0.0; xv.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * n * inner + j * inner + i;
                let max = (0..n).map(|j| xv[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for j in 0..n {
                    let e = (xv[at(j)] - max).exp();
                    out[at(j)] = e;
                    z += e;
                }
                for j in 0..n {
                    out[at(j)] /= z;
                }
            }
        }
        let shape = self.shape(x).to_vec();
        Ok(self.push(shape, out, Op::Softmax { x, outer, n, inner }))
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (outer, n, inner) = axis_split(self.shape(x), axis)?;
        if n == 0 {
            return dim_err("log_softmax over an empty axis");
        }
        let xv = self.value(x);
        let mut out = vec![0.0; xv.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * n * inner + j * inner + i;
                let max = (0..n).map(|j| xv[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                let lse = max + (0..n).map(|j| (xv[at(j)] - max).exp()).sum::<f64>().ln();
                for j in 0..n {
                    out[at(j)] = xv[at(j)] - lse;
                }
            }
        }
        let shape = self.shape(x).to_vec();
        Ok(self.push(shape, out, Op::LogSoftmax { x, outer, n, inner }))
    }

    /// `ln(max(x, floor))`; zero gradient where the floor is active.
    pub fn log_clamped(&mut self, x: Var, floor: f64) -> Var {
        self.map(x, |v| v.max(floor).ln(), Op::LogClamped { x, floor })
    }

    /// Concatenation along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = match parts.first() {
            Some(&p) => self.shape(p).to_vec(),
            None => return dim_err("concat of zero tensors"),
        };
        let (outer, _, inner) = axis_split(&first, axis)?;
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == first.len()
                && s.iter()
                    .zip(&first)
                    .enumerate()
                    .all(|(d, (x, y))| d == axis || x == y);
            if !compatible {
                return dim_err(format!("concat axis {axis}: shapes {first:?} and {s:?}"));
            }
            total += s[axis];
        }
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let width = self.shape(p)[axis] * inner;
                out.extend_from_slice(&self.value(p)[o * width..(o + 1) * width]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        Ok(self.push(
            shape,
            out,
            Op::Concat {
                parts: parts.to_vec(),
                outer,
                inner,
            },
        ))
    }

    /// Contiguous 1-D slice `x[start..start + len]`.
    pub fn slice(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        if self.shape(x).len() != 1 || start + len > self.numel(x) {
            return dim_err(format!(
                "slice {start}..{} of shape {:?}",
                start + len,
                self.shape(x)
            ));
        }
        let out = self.value(x)[start..start + len].to_vec();
        Ok(self.push(vec![len], out, Op::Slice { x, start }))
    }

    /// Stacks equal-length vectors into a `[rows x width]` matrix.
    pub fn stack(&mut self, rows: &[Var]) -> Result<Var> {
        let width = match rows.first() {
            Some(&r) => self.numel(r),
            None => return dim_err("stack of zero rows"),
        };
        for &r in rows {
            if self.shape(r) != [width] {
                return dim_err(format!(
                    "stack expects vectors of length {width}, got {:?}",
                    self.shape(r)
                ));
            }
        }
        let stacked = self.concat(rows, 0)?;
        // concat along axis 0 of 1-D vectors; reinterpret as a matrix
        self.nodes[stacked.0].shape = vec![rows.len(), width];
        Ok(stacked)
    }

    /// Selects elements of a 1-D tensor.
    pub fn gather(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let n = self.numel(x);
        if self.shape(x).len() != 1 {
            return dim_err(format!("gather expects a vector, got {:?}", self.shape(x)));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(Error::Index(format!("gather index {bad} out of range {n}")));
        }
        let xv = self.value(x);
        let out = idx.iter().map(|&i| xv[i]).collect();
        Ok(self.push(
            vec![idx.len()],
            out,
            Op::Gather {
                x,
                idx: idx.to_vec(),
            },
        ))
    }

    /// Scalar element `x[i]` of a vector.
    pub fn pick(&mut self, x: Var, i: usize) -> Result<Var> {
        let v = self.gather(x, &[i])?;
        self.nodes[v.0].shape = vec![];
        Ok(v)
    }

    /// Rows of `table` selected by `ids`, as a `[ids.len() x width]` matrix.
    pub fn embedding_lookup(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (rows, width) = match self.shape(table) {
            &[r, w] => (r, w),
            s => return dim_err(format!("embedding table must be 2-D, got {s:?}")),
        };
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(Error::Index(format!(
                "token id {bad} outside table of {rows} rows"
            )));
        }
        let tv = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * width);
        for &i in ids {
            out.extend_from_slice(&tv[i * width..(i + 1) * width]);
        }
        Ok(self.push(
            vec![ids.len(), width],
            out,
            Op::GatherRows {
                table,
                ids: ids.to_vec(),
                width,
            },
        ))
    }

    /// Single embedding row as a vector.
    pub fn embedding_row(&mut self, table: Var, id: usize) -> Result<Var> {
        let v = self.embedding_lookup(table, &[id])?;
        let w = self.numel(v);
        self.nodes[v.0].shape = vec![w];
        Ok(v)
    }

    /// `out[idx[j]] += x[j]` into a zero vector of length `size`.
    pub fn scatter_add(&mut self, x: Var, idx: &[usize], size: usize) -> Result<Var> {
        if self.shape(x) != [idx.len()] {
            return dim_err(format!(
                "scatter_add of shape {:?} with {} indices",
                self.shape(x),
                idx.len()
            ));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= size) {
            return Err(Error::Index(format!(
                "scatter index {bad} out of range {size}"
            )));
        }
        let mut out = vec![0.0; size];
        for (&i, &v) in idx.iter().zip(self.value(x)) {
            out[i] += v;
        }
        Ok(self.push(
            vec![size],
            out,
            Op::ScatterAdd {
                x,
                idx: idx.to_vec(),
            },
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().sum();
        self.push(vec![], vec![s], Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.numel(x).max(1) as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Sum of several same-shape tensors.
    pub fn add_all(&mut self, xs: &[Var]) -> Result<Var> {
        let (&first, rest) = xs
            .split_first()
            .ok_or_else(|| Error::Dimension("add_all of zero tensors".into()))?;
        rest.iter().try_fold(first, |acc, &x| self.add(acc, x))
    }

    /// Negative log-likelihood `-logp[target]` of a log-distribution.
    pub fn cross_entropy(&mut self, log_probs: Var, target: usize) -> Result<Var> {
        let n = self.numel(log_probs);
        if target >= n {
            return Err(Error::Index(format!(
                "target {target} outside distribution of {n}"
            )));
        }
        let p = self.pick(log_probs, target)?;
        Ok(self.scale(p, -1.0))
    }

    /// Inverted dropout. Identity when `training` is false or `rate` is 0.
    pub fn dropout(&mut self, x: Var, rate: f64, rng: &mut Rng, training: bool) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!("dropout rate {rate} outside [0, 1)")));
        }
        if !training || rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - rate);
        let mask: Vec<f64> = (0..self.numel(x))
            .map(|_| if rng.next_f64() < rate { 0.0 } else { keep })
            .collect();
        let out = self
            .value(x)
            .iter()
            .zip(&mask)
            .map(|(v, m)| v * m)
            .collect();
        let shape = self.shape(x).to_vec();
        Ok(self.push(shape, out, Op::Dropout { x, mask }))
    }

    /// One LSTM step with gate layout `[input; forget; cell; output]`.
    ///
    /// `w` is `[4*d_h x (d_in + d_h)]` acting on `[x; h]`, `b` is `[4*d_h]`.
    /// Returns `(h', c')`.
    pub fn lstm_cell(&mut self, x: Var, h: Var, c: Var, w: Var, b: Var) -> Result<(Var, Var)> {
        let d_in = self.numel(x);
        let d_h = self.numel(h);
        let cols = d_in + d_h;
        if self.shape(h) != [d_h]
            || self.shape(c) != [d_h]
            || self.shape(x) != [d_in]
            || self.shape(w) != [4 * d_h, cols]
            || self.shape(b) != [4 * d_h]
        {
            return dim_err(format!(
                "lstm_cell: x {:?}, h {:?}, c {:?}, w {:?}, b {:?}",
                self.shape(x),
                self.shape(h),
                self.shape(c),
                self.shape(w),
                self.shape(b)
            ));
        }
        let (xv, hv, cv, wv, bv) = (
            self.value(x),
            self.value(h),
            self.value(c),
            self.value(w),
            self.value(b),
        );
        let mut acts = vec![0.0; 5 * d_h];
        for (r, act) in acts[..4 * d_h].iter_mut().enumerate() {
            let row = &wv[r * cols..(r + 1) * cols];
            let z = bv[r]
                + row[..d_in].iter().zip(xv).map(|(a, b)| a * b).sum::<f64>()
                + row[d_in..].iter().zip(hv).map(|(a, b)| a * b).sum::<f64>();
            *act = if (2 * d_h..3 * d_h).contains(&r) {
                z.tanh()
            } else {
                sigmoid(z)
            };
        }
        let mut out = vec![0.0; 2 * d_h];
        for j in 0..d_h {
            let (i, f, g, o) = (acts[j], acts[d_h + j], acts[2 * d_h + j], acts[3 * d_h + j]);
            let c_new = f * cv[j] + i * g;
            let tc = c_new.tanh();
            acts[4 * d_h + j] = tc;
            out[j] = o * tc;
            out[d_h + j] = c_new;
        }
        let both = self.push(
            vec![2 * d_h],
            out,
            Op::Lstm {
                x,
                h,
                c,
                w,
                b,
                acts,
            },
        );
        let h_new = self.slice(both, 0, d_h)?;
        let c_new = self.slice(both, d_h, d_h)?;
        Ok((h_new, c_new))
    }

    // ----------------------------------------------------------- backward

    /// Reverse pass from scalar `loss`, adding parameter gradients into
    /// `grads`. Calling it again on the same graph accumulates again.
    pub fn backward(&self, loss: Var, grads: &mut Gradients) -> Result<()> {
        if !self.record {
            return Err(Error::Usage("backward on an inference graph".into()));
        }
        if self.numel(loss) != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        if grads.len() != self.params.len() {
            return Err(Error::Usage(
                "gradient buffer does not match parameter store".into(),
            ));
        }
        let mut g: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        g[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(dout) = g[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => grads.accumulate(*id, &dout),
                Op::MatMul { a, b, m, k, n } => {
                    let (m, k, n) = (*m, *k, *n);
                    let av = self.value(*a);
                    let bv = self.value(*b);
                    {
                        let da = buf(&mut g, *a, m * k);
                        for i in 0..m {
                            for p in 0..k {
                                let brow = &bv[p * n..(p + 1) * n];
                                let drow = &dout[i * n..(i + 1) * n];
                                da[i * k + p] +=
                                    drow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                            }
                        }
                    }
                    let db = buf(&mut g, *b, k * n);
                    for i in 0..m {
                        let drow = &dout[i * n..(i + 1) * n];
                        for p in 0..k {
                            let x = av[i * k + p];
                            for (d, y) in db[p * n..(p + 1) * n].iter_mut().zip(drow) {
                                *d += x * y;
                            }
                        }
                    }
                }
                Op::Add(a, b) => {
                    add_into(buf(&mut g, *a, dout.len()), &dout);
                    add_into(buf(&mut g, *b, dout.len()), &dout);
                }
                Op::Sub(a, b) => {
                    add_into(buf(&mut g, *a, dout.len()), &dout);
                    let db = buf(&mut g, *b, dout.len());
                    for (d, x) in db.iter_mut().zip(&dout) {
                        *d -= x;
                    }
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let da = buf(&mut g, *a, dout.len());
                    for ((d, x), y) in da.iter_mut().zip(&dout).zip(bv) {
                        *d += x * y;
                    }
                    let db = buf(&mut g, *b, dout.len());
                    for ((d, x), y) in db.iter_mut().zip(&dout).zip(av) {
                        *d += x * y;
                    }
                }
                Op::Scale(a, f) => {
                    for (d, x) in buf(&mut g, *a, dout.len()).iter_mut().zip(&dout) {
                        *d += x * f;
                    }
                }
                Op::OneMinus(a) => {
                    for (d, x) in buf(&mut g, *a, dout.len()).iter_mut().zip(&dout) {
                        *d -= x;
                    }
                }
                Op::MulScalar { x, s } => {
                    let sv = self.value(*s)[0];
                    let xv = self.value(*x);
                    let ds: f64 = dout.iter().zip(xv).map(|(d, v)| d * v).sum();
                    for (d, o) in buf(&mut g, *x, dout.len()).iter_mut().zip(&dout) {
                        *d += o * sv;
                    }
                    buf(&mut g, *s, 1)[0] += ds;
                }
                Op::Sigmoid(a) => {
                    let y = &node.value;
                    for ((d, o), y) in buf(&mut g, *a, dout.len()).iter_mut().zip(&dout).zip(y) {
                        *d += o * y * (1.0 - y);
                    }
                }
                Op::Tanh(a) => {
                    let y = &node.value;
                    for ((d, o), y) in buf(&mut g, *a, dout.len()).iter_mut().zip(&dout).zip(y) {
                        *d += o * (1.0 - y * y);
                    }
                }
                Op::Softmax { x, outer, n, inner } => {
                    let y = &node.value;
                    let dx = buf(&mut g, *x, dout.len());
                    for o in 0..*outer {
                        for i in 0..*inner {
                            let at = |j: usize| o * n * inner + j * inner + i;
                            let dot: f64 = (0..*n).map(|j| dout[at(j)] * y[at(j)]).sum();
                            for j in 0..*n {
                                dx[at(j)] += y[at(j)] * (dout[at(j)] - dot);
                            }
                        }
                    }
                }
                Op::LogSoftmax { x, outer, n, inner } => {
                    let y = &node.value;
                    let dx = buf(&mut g, *x, dout.len());
                    for o in 0..*outer {
                        for i in 0..*inner {
                            let at = |j: usize| o * n * inner + j * inner + i;
                            let total: f64 = (0..*n).map(|j| dout[at(j)]).sum();
                            for j in 0..*n {
                                dx[at(j)] += dout[at(j)] - y[at(j)].exp() * total;
                            }
                        }
                    }
                }
                Op::LogClamped { x, floor } => {
                    let xv = self.value(*x);
                    for ((d, o), v) in buf(&mut g, *x, dout.len()).iter_mut().zip(&dout).zip(xv) {
                        if *v > *floor {
                            *d += o / v;
                        }
                    }
                }
                Op::Concat {
                    parts,
                    outer,
                    inner,
                } => {
                    let total: usize = parts.iter().map(|&p| self.numel(p)).sum();
                    let row = total / outer.max(&1);
                    let mut offset = 0;
                    for &p in parts {
                        let width = self.numel(p) / outer.max(&1);
                        let dp = buf(&mut g, p, self.numel(p));
                        for o in 0..*outer {
                            add_into(
                                &mut dp[o * width..(o + 1) * width],
                                &dout[o * row + offset..o * row + offset + width],
                            );
                        }
                        offset += width;
                    }
                    let _ = inner;
                }
                Op::Slice { x, start } => {
                    let dx = buf(&mut g, *x, self.numel(*x));
                    add_into(&mut dx[*start..*start + dout.len()], &dout);
                }
                Op::Gather { x, idx } => {
                    let dx = buf(&mut g, *x, self.numel(*x));
                    for (&i, o) in idx.iter().zip(&dout) {
                        dx[i] += o;
                    }
                }
                Op::GatherRows { table, ids, width } => {
                    let dt = buf(&mut g, *table, self.numel(*table));
                    for (r, &i) in ids.iter().enumerate() {
                        add_into(
                            &mut dt[i * width..(i + 1) * width],
                            &dout[r * width..(r + 1) * width],
                        );
                    }
                }
                Op::ScatterAdd { x, idx } => {
                    let dx = buf(&mut g, *x, idx.len());
                    for (d, &i) in dx.iter_mut().zip(idx) {
                        *d += dout[i];
                    }
                }
                Op::Sum(x) => {
                    let o = dout[0];
                    buf(&mut g, *x, self.numel(*x))
                        .iter_mut()
                        .for_each(|d| *d += o);
                }
                Op::Dropout { x, mask } => {
                    for ((d, o), m) in buf(&mut g, *x, dout.len()).iter_mut().zip(&dout).zip(mask) {
                        *d += o * m;
                    }
                }
                Op::Lstm {
                    x,
                    h,
                    c,
                    w,
                    b,
                    acts,
                } => {
                    self.lstm_backward(&mut g, &dout, *x, *h, *c, *w, *b, acts);
                }
            }
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn lstm_backward(
        &self,
        g: &mut [Option<Vec<f64>>],
        dout: &[f64],
        x: Var,
        h: Var,
        c: Var,
        w: Var,
        b: Var,
        acts: &[f64],
    ) {
        let d_h = self.numel(h);
        let d_in = self.numel(x);
        let cols = d_in + d_h;
        let (dh_out, dc_out) = dout.split_at(d_h);
        let cv = self.value(c);
        let mut dz = vec![0.0; 4 * d_h];
        let mut dc_prev = vec![0.0; d_h];
        for j in 0..d_h {
            let (i, f, gg, o, tc) = (
                acts[j],
                acts[d_h + j],
                acts[2 * d_h + j],
                acts[3 * d_h + j],
                acts[4 * d_h + j],
            );
            let dc = dc_out[j] + dh_out[j] * o * (1.0 - tc * tc);
            let d_o = dh_out[j] * tc;
            dz[j] = dc * gg * i * (1.0 - i);
            dz[d_h + j] = dc * cv[j] * f * (1.0 - f);
            dz[2 * d_h + j] = dc * i * (1.0 - gg * gg);
            dz[3 * d_h + j] = d_o * o * (1.0 - o);
            dc_prev[j] = dc * f;
        }
        add_into(buf(g, c, d_h), &dc_prev);
        add_into(buf(g, b, 4 * d_h), &dz);
        let xv = self.value(x);
        let hv = self.value(h);
        {
            let dw = buf(g, w, 4 * d_h * cols);
            for (r, &z) in dz.iter().enumerate() {
                if z == 0.0 {
                    continue;
                }
                let row = &mut dw[r * cols..(r + 1) * cols];
                for (d, v) in row[..d_in].iter_mut().zip(xv) {
                    *d += z * v;
                }
                for (d, v) in row[d_in..].iter_mut().zip(hv) {
                    *d += z * v;
                }
            }
        }
        let wv = self.value(w);
        let mut dxh = vec![0.0; cols];
        for (r, &z) in dz.iter().enumerate() {
            if z == 0.0 {
                continue;
            }
            for (d, v) in dxh.iter_mut().zip(&wv[r * cols..(r + 1) * cols]) {
                *d += z * v;
            }
        }
        add_into(buf(g, x, d_in), &dxh[..d_in]);
        add_into(buf(g, h, d_h), &dxh[d_in..]);
    }
}

fn buf(g: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut Vec<f64> {
    g[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
