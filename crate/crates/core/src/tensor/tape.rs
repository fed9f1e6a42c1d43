use crate::error::{Error, Result};

use super::array::{kernels, DenseArray};

/// Handle to an array recorded on a [`Tape`].
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
    BatchMatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, f64),
    Permute(Var, Vec<usize>),
    Reshape(Var),
    Concat(Vec<Var>, usize),
    Slice { x: Var, axis: usize, start: usize },
    Sum(Var),
    Mean(Var),
    Softmax(Var, usize),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        floored: Vec<bool>,
    },
    Gelu(Var),
    Dropout(Var, Vec<f64>),
    RepeatInterleave(Var, usize),
}

#[derive(Debug)]
struct Node {
    value: DenseArray,
    op: Op,
    requires_grad: bool,
}

/// Records array operations in execution order and replays them in reverse
/// to accumulate gradients.
///
/// The tape owns every value it records. Entries are appended only, so each
/// entry's inputs always precede it.
#[derive(Debug)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    training: bool,
    dropout_seed: u64,
    dropout_calls: u64,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    /// An evaluation-mode tape: dropout is the identity.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            training: false,
            dropout_seed: 0,
            dropout_calls: 0,
        }
    }

    /// A training-mode tape whose dropout masks derive from `seed`.
    pub fn training(seed: u64) -> Self {
        Self {
            training: true,
            dropout_seed: seed,
            ..Self::new()
        }
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: DenseArray, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: DenseArray) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: DenseArray) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &DenseArray {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient of the last `backward` target with respect to `v`.
    ///
    /// `None` if `v` does not require gradients; zeros if it does but did not
    /// contribute to the loss.
    pub fn grad(&self, v: Var) -> Option<DenseArray> {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        let shape = node.value.shape().to_vec();
        let data = self
            .grads
            .get(v.0)
            .and_then(|g| g.clone())
            .unwrap_or_else(|| vec![0.0; node.value.len()]);
        Some(DenseArray::new(shape, data).expect("gradient shape mirrors value"))
    }

    fn push(&mut self, value: DenseArray, op: Op, inputs: &[Var], name: &str) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(name.to_string()));
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Shape(format!("matmul of {sa:?} and {sb:?}")));
        }
        let out = self.value(a).matmul(self.value(b))?;
        self.push(out, Op::MatMul(a, b), &[a, b], "matmul")
    }

    /// Batched product of `[batch, m, k]` and `[batch, k, n]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(Error::Shape(format!("bmm of {sa:?} and {sb:?}")));
        }
        let (batch, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![0.0; batch * m * n];
        {
            let (av, bv) = (self.value(a).data(), self.value(b).data());
            for i in 0..batch {
                kernels::matmul(
                    &av[i * m * k..(i + 1) * m * k],
                    &bv[i * k * n..(i + 1) * k * n],
                    &mut out[i * m * n..(i + 1) * m * n],
                    m,
                    k,
                    n,
                );
            }
        }
        let out = DenseArray::new(vec![batch, m, n], out)?;
        self.push(out, Op::BatchMatMul(a, b), &[a, b], "bmm")
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape(format!(
                "{what} of {:?} and {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> DenseArray {
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        DenseArray::new(x.shape().to_vec(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out = self.zip_with(a, b, |p, q| p + q);
        self.push(out, Op::Add(a, b), &[a, b], "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let out = self.zip_with(a, b, |p, q| p - q);
        self.push(out, Op::Sub(a, b), &[a, b], "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out = self.zip_with(a, b, |p, q| p * q);
        self.push(out, Op::Mul(a, b), &[a, b], "mul")
    }

    /// Adds a vector along the last axis of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let last = *self.shape(x).last().unwrap_or(&1);
        if self.shape(bias) != [last] {
            return Err(Error::Shape(format!(
                "bias {:?} for input {:?}",
                self.shape(bias),
                self.shape(x)
            )));
        }
        let b = self.value(bias).data().to_vec();
        let mut out = self.value(x).clone();
        for chunk in out.data_mut().chunks_mut(last) {
            chunk.iter_mut().zip(&b).for_each(|(o, bv)| *o += bv);
        }
        self.push(out, Op::AddBias(x, bias), &[x, bias], "add_bias")
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let out = self.value(x).map(|v| v * factor);
        self.push(out, Op::Scale(x, factor), &[x], "scale")
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let nd = self.shape(x).len();
        if nd < 2 {
            return Err(Error::Shape("transpose needs at least 2 axes".into()));
        }
        let mut perm: Vec<usize> = (0..nd).collect();
        perm.swap(nd - 2, nd - 1);
        self.permute(x, &perm)
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::Shape(format!("invalid permutation {perm:?} for {shape:?}")));
        }
        let (out_shape, src) = permute_index(&shape, perm);
        let xv = self.value(x).data();
        let data = src.iter().map(|&i| xv[i]).collect();
        let out = DenseArray::new(out_shape, data)?;
        self.push(out, Op::Permute(x, perm.to_vec()), &[x], "permute")
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        self.push(out, Op::Reshape(x), &[x], "reshape")
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::Shape("concat of nothing".into()))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::Shape(format!("concat axis {axis} for {base:?}")));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::Shape(format!("concat of {base:?} and {s:?} on axis {axis}")));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let n = self.shape(v)[axis];
                let src = self.value(v).data();
                data.extend_from_slice(&src[o * n * inner..(o + 1) * n * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let out = DenseArray::new(shape, data)?;
        self.push(out, Op::Concat(inputs.to_vec(), axis), inputs, "concat")
    }

    /// Copies the half-open range `[start, end)` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start >= end || end > shape[axis] {
            return Err(Error::Bounds(format!("slice {start}..{end} on axis {axis} of {shape:?}")));
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        let w = end - start;
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(outer * w * inner);
        for o in 0..outer {
            let base = (o * n + start) * inner;
            data.extend_from_slice(&src[base..base + w * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = w;
        let out = DenseArray::new(out_shape, data)?;
        self.push(out, Op::Slice { x, axis, start }, &[x], "slice")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        self.push(DenseArray::scalar(s), Op::Sum(x), &[x], "sum")
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let m = v.data().iter().sum::<f64>() / v.len() as f64;
        self.push(DenseArray::scalar(m), Op::Mean(x), &[x], "mean")
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::Shape(format!("softmax axis {axis} for {shape:?}")));
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        let src = self.value(x).data();
        let mut data = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * n + j) * inner + i;
                let max = (0..n).map(|j| src[idx(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for j in 0..n {
                    let e = (src[idx(j)] - max).exp();
                    data[idx(j)] = e;
                    total += e;
                }
                for j in 0..n {
                    data[idx(j)] /= total;
                }
            }
        }
        let out = DenseArray::new(shape, data)?;
        self.push(out, Op::Softmax(x, axis), &[x], "softmax")
    }

    /// Normalises each last-axis slice to zero mean and unit variance, then
    /// applies `gain` and `bias`. The variance is floored at `eps`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(Error::Contract("layer_norm eps must be positive".into()));
        }
        let last = *self.shape(x).last().unwrap_or(&1);
        if self.shape(gain) != [last] || self.shape(bias) != [last] {
            return Err(Error::Shape(format!(
                "layer_norm gain {:?} / bias {:?} for input {:?}",
                self.shape(gain),
                self.shape(bias),
                self.shape(x)
            )));
        }
        let src = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let rows = src.len() / last;
        let mut xhat = vec![0.0; src.len()];
        let mut out = vec![0.0; src.len()];
        let mut inv_std = Vec::with_capacity(rows);
        let mut floored = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &src[r * last..(r + 1) * last];
            let mean = row.iter().sum::<f64>() / last as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / last as f64;
            let is_floored = var < eps;
            let inv = 1.0 / var.max(eps).sqrt();
            for j in 0..last {
                let h = (row[j] - mean) * inv;
                xhat[r * last + j] = h;
                out[r * last + j] = h * g[j] + b[j];
            }
            inv_std.push(inv);
            floored.push(is_floored);
        }
        let out = DenseArray::new(self.shape(x).to_vec(), out)?;
        self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
                floored,
            },
            &[x, gain, bias],
            "layer_norm",
        )
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(gelu);
        self.push(out, Op::Gelu(x), &[x], "gelu")
    }

    /// Inverted dropout. Identity on an evaluation tape or when `rate == 0`.
    pub fn dropout(&mut self, x: Var, rate: f64) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Contract(format!("dropout rate {rate} outside [0, 1)")));
        }
        if !self.training || rate == 0.0 {
            return Ok(x);
        }
        let call = self.dropout_calls;
        self.dropout_calls += 1;
        let keep = 1.0 / (1.0 - rate);
        let n = self.value(x).len();
        let mask: Vec<f64> = (0..n as u64)
            .map(|i| {
                let u = unit_uniform(self.dropout_seed, call, i);
                if u < rate {
                    0.0
                } else {
                    keep
                }
            })
            .collect();
        let src = self.value(x);
        let data = src.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let out = DenseArray::new(src.shape().to_vec(), data)?;
        self.push(out, Op::Dropout(x, mask), &[x], "dropout")
    }

    /// Repeats each leading-axis slice `times` times in place:
    /// `[b, ...] -> [b * times, ...]` with row `i * times + t` copied from row `i`.
    pub fn repeat_interleave(&mut self, x: Var, times: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.is_empty() || times == 0 {
            return Err(Error::Shape(format!("repeat_interleave x{times} of {shape:?}")));
        }
        let inner: usize = shape[1..].iter().product();
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(src.len() * times);
        for chunk in src.chunks(inner) {
            for _ in 0..times {
                data.extend_from_slice(chunk);
            }
        }
        let mut out_shape = shape;
        out_shape[0] *= times;
        let out = DenseArray::new(out_shape, data)?;
        self.push(out, Op::RepeatInterleave(x, times), &[x], "repeat_interleave")
    }

    /// Fully connected map over the last axis: `x · weight + bias`.
    pub fn linear(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d_in = *shape.last().ok_or_else(|| Error::Shape("linear on a scalar".into()))?;
        let d_out = *self.shape(weight).get(1).unwrap_or(&0);
        let rows = self.value(x).len() / d_in;
        let flat = if shape.len() == 2 { x } else { self.reshape(x, &[rows, d_in])? };
        let y = self.matmul(flat, weight)?;
        let y = self.add_bias(y, bias)?;
        if shape.len() == 2 {
            Ok(y)
        } else {
            let mut out_shape = shape;
            *out_shape.last_mut().unwrap() = d_out;
            self.reshape(y, &out_shape)
        }
    }

    /// Reverse pass from a scalar `loss`. Gradients from earlier calls are
    /// discarded.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::Contract("loss is not on this tape".into()));
        }
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        let nodes = &self.nodes;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let mut acc = |v: Var, contrib: &dyn Fn(&mut [f64])| {
                if !nodes[v.0].requires_grad {
                    return;
                }
                let slot = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.len()]);
                contrib(slot);
            };
            match &node.op {
                Op::Leaf => {
                    grads[id] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                    let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                    acc(*a, &|s| kernels::matmul_nt_acc(&g, bv.data(), s, m, k, n));
                    acc(*b, &|s| kernels::matmul_tn_acc(av.data(), &g, s, m, k, n));
                }
                Op::BatchMatMul(a, b) => {
                    let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                    let (batch, m, k, n) = (av.shape()[0], av.shape()[1], av.shape()[2], bv.shape()[2]);
                    acc(*a, &|s| {
                        for i in 0..batch {
                            kernels::matmul_nt_acc(
                                &g[i * m * n..(i + 1) * m * n],
                                &bv.data()[i * k * n..(i + 1) * k * n],
                                &mut s[i * m * k..(i + 1) * m * k],
                                m,
                                k,
                                n,
                            );
                        }
                    });
                    acc(*b, &|s| {
                        for i in 0..batch {
                            kernels::matmul_tn_acc(
                                &av.data()[i * m * k..(i + 1) * m * k],
                                &g[i * m * n..(i + 1) * m * n],
                                &mut s[i * k * n..(i + 1) * k * n],
                                m,
                                k,
                                n,
                            );
                        }
                    });
                }
                Op::Add(a, b) => {
                    acc(*a, &|s| add_into(s, &g));
                    acc(*b, &|s| add_into(s, &g));
                }
                Op::Sub(a, b) => {
                    acc(*a, &|s| add_into(s, &g));
                    acc(*b, &|s| s.iter_mut().zip(&g).for_each(|(o, v)| *o -= v));
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                    acc(*a, &|s| {
                        for ((o, gv), y) in s.iter_mut().zip(&g).zip(bv) {
                            *o += gv * y;
                        }
                    });
                    acc(*b, &|s| {
                        for ((o, gv), x) in s.iter_mut().zip(&g).zip(av) {
                            *o += gv * x;
                        }
                    });
                }
                Op::AddBias(x, bias) => {
                    let last = nodes[bias.0].value.len();
                    acc(*x, &|s| add_into(s, &g));
                    acc(*bias, &|s| {
                        for chunk in g.chunks(last) {
                            add_into(s, chunk);
                        }
                    });
                }
                Op::Scale(x, factor) => {
                    acc(*x, &|s| s.iter_mut().zip(&g).for_each(|(o, v)| *o += factor * v));
                }
                Op::Permute(x, perm) => {
                    let (_, src) = permute_index(nodes[x.0].value.shape(), perm);
                    acc(*x, &|s| {
                        for (o, &i) in src.iter().enumerate() {
                            s[i] += g[o];
                        }
                    });
                }
                Op::Reshape(x) => acc(*x, &|s| add_into(s, &g)),
                Op::Concat(inputs, axis) => {
                    let base = nodes[inputs[0].0].value.shape();
                    let outer: usize = base[..*axis].iter().product();
                    let inner: usize = base[axis + 1..].iter().product();
                    let total = node.value.shape()[*axis];
                    let mut offset = 0;
                    for v in inputs {
                        let n = nodes[v.0].value.shape()[*axis];
                        acc(*v, &|s| {
                            for o in 0..outer {
                                let from = (o * total + offset) * inner;
                                add_into(&mut s[o * n * inner..(o + 1) * n * inner], &g[from..from + n * inner]);
                            }
                        });
                        offset += n;
                    }
                }
                Op::Slice { x, axis, start } => {
                    let (outer, n, inner) = split_axis(nodes[x.0].value.shape(), *axis);
                    let w = node.value.shape()[*axis];
                    acc(*x, &|s| {
                        for o in 0..outer {
                            let base = (o * n + start) * inner;
                            add_into(&mut s[base..base + w * inner], &g[o * w * inner..(o + 1) * w * inner]);
                        }
                    });
                }
                Op::Sum(x) => acc(*x, &|s| s.iter_mut().for_each(|o| *o += g[0])),
                Op::Mean(x) => {
                    let n = nodes[x.0].value.len() as f64;
                    acc(*x, &|s| s.iter_mut().for_each(|o| *o += g[0] / n));
                }
                Op::Softmax(x, axis) => {
                    let (outer, n, inner) = split_axis(node.value.shape(), *axis);
                    let y = node.value.data();
                    acc(*x, &|s| {
                        for o in 0..outer {
                            for i in 0..inner {
                                let idx = |j: usize| (o * n + j) * inner + i;
                                let dot: f64 = (0..n).map(|j| g[idx(j)] * y[idx(j)]).sum();
                                for j in 0..n {
                                    s[idx(j)] += y[idx(j)] * (g[idx(j)] - dot);
                                }
                            }
                        }
                    });
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    inv_std,
                    floored,
                } => {
                    let gv = nodes[gain.0].value.data();
                    let last = gv.len();
                    acc(*x, &|s| {
                        for (r, (&inv, &fl)) in inv_std.iter().zip(floored).enumerate() {
                            let span = r * last..(r + 1) * last;
                            let gh: Vec<f64> = g[span.clone()].iter().zip(gv).map(|(a, b)| a * b).collect();
                            let h = &xhat[span.clone()];
                            let mean_gh = gh.iter().sum::<f64>() / last as f64;
                            let mean_ghh = if fl {
                                0.0
                            } else {
                                gh.iter().zip(h).map(|(a, b)| a * b).sum::<f64>() / last as f64
                            };
                            for (j, o) in s[span].iter_mut().enumerate() {
                                *o += inv * (gh[j] - mean_gh - h[j] * mean_ghh);
                            }
                        }
                    });
                    acc(*gain, &|s| {
                        for (gc, hc) in g.chunks(last).zip(xhat.chunks(last)) {
                            for j in 0..last {
                                s[j] += gc[j] * hc[j];
                            }
                        }
                    });
                    acc(*bias, &|s| {
                        for gc in g.chunks(last) {
                            add_into(s, gc);
                        }
                    });
                }
                Op::Gelu(x) => {
                    let xv = nodes[x.0].value.data();
                    acc(*x, &|s| {
                        for ((o, gv), &v) in s.iter_mut().zip(&g).zip(xv) {
                            *o += gv * gelu_grad(v);
                        }
                    });
                }
                Op::Dropout(x, mask) => {
                    acc(*x, &|s| {
                        for ((o, gv), m) in s.iter_mut().zip(&g).zip(mask) {
                            *o += gv * m;
                        }
                    });
                }
                Op::RepeatInterleave(x, times) => {
                    let inner = nodes[x.0].value.len() / nodes[x.0].value.shape()[0];
                    acc(*x, &|s| {
                        for (r, chunk) in g.chunks(inner).enumerate() {
                            let dst = r / times;
                            add_into(&mut s[dst * inner..(dst + 1) * inner], chunk);
                        }
                    });
                }
            }
            grads[id] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Output shape of a permutation and, for each output position, the source
/// offset in the input.
fn permute_index(shape: &[usize], perm: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let nd = shape.len();
    let mut strides = vec![1; nd];
    for i in (0..nd.saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| strides[p]).collect();
    let total: usize = shape.iter().product();
    let mut src = Vec::with_capacity(total);
    let mut counter = vec![0usize; nd];
    let mut offset = 0usize;
    for _ in 0..total {
        src.push(offset);
        for d in (0..nd).rev() {
            counter[d] += 1;
            offset += src_strides[d];
            if counter[d] < out_shape[d] {
                break;
            }
            offset -= src_strides[d] * out_shape[d];
            counter[d] = 0;
        }
    }
    (out_shape, src)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let inner = GELU_C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    let d_inner = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * d_inner
}

/// Counter-based uniform draw in [0, 1) from (seed, call, index).
fn unit_uniform(seed: u64, call: u64, index: u64) -> f64 {
    let mut z = seed
        .wrapping_add(call.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(index.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^= z >> 31;
    (z >> 11) as f64 / (1u64 << 53) as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn arr(shape: &[usize], data: &[f64]) -> DenseArray {
        DenseArray::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn softmax_uniform_and_saturated() {
        let mut t = Tape::new();
        let x = t.constant(arr(&[3], &[0.0, 0.0, 0.0]));
        let y = t.softmax(x, 0).unwrap();
        for v in t.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let x = t.constant(arr(&[3], &[1000.0, 0.0, 0.0]));
        let y = t.softmax(x, 0).unwrap();
        let out = t.value(y).data();
        assert!((out[0] - 1.0).abs() < 1e-12);
        assert!(out[1].abs() < 1e-12 && out[2].abs() < 1e-12);
    }

    #[test]
    fn layer_norm_constant_and_hand_case() {
        let mut t = Tape::new();
        let g = t.constant(DenseArray::ones(&[3]));
        let b = t.constant(DenseArray::zeros(&[3]));
        let x = t.constant(arr(&[1, 3], &[4.0, 4.0, 4.0]));
        let y = t.layer_norm(x, g, b, 1e-5).unwrap();
        assert!(t.value(y).data().iter().all(|&v| v == 0.0));

        let x = t.constant(arr(&[1, 3], &[1.0, 2.0, 3.0]));
        let y = t.layer_norm(x, g, b, 1e-12).unwrap();
        let expect = [-1.2247, 0.0, 1.2247];
        for (v, e) in t.value(y).data().iter().zip(expect) {
            assert!((v - e).abs() < 1e-3);
        }
    }

    #[test]
    fn backward_linear_and_square() {
        let mut t = Tape::new();
        let x = t.param(DenseArray::full(&[2, 2], 3.0));
        let s = t.sum(x).unwrap();
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap().data(), &[1.0; 4]);

        let mut t = Tape::new();
        let x = t.param(arr(&[2], &[1.0, -2.0]));
        let sq = t.mul(x, x).unwrap();
        let s = t.sum(sq).unwrap();
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap().data(), &[2.0, -4.0]);
    }

    #[test]
    fn unused_leaf_gets_zero_grad_and_non_scalar_loss_fails() {
        let mut t = Tape::new();
        let x = t.param(DenseArray::ones(&[2]));
        let unused = t.param(DenseArray::ones(&[3]));
        let c = t.constant(DenseArray::ones(&[2]));
        let s = t.sum(x).unwrap();
        t.backward(s).unwrap();
        assert_eq!(t.grad(unused).unwrap().data(), &[0.0; 3]);
        assert!(t.grad(c).is_none());
        assert!(matches!(t.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn permute_matches_manual_transpose() {
        let mut t = Tape::new();
        let x = t.constant(arr(&[2, 3], &[1., 2., 3., 4., 5., 6.]));
        let y = t.transpose(x).unwrap();
        assert_eq!(t.value(y), &t.value(x).transpose());

        let data: Vec<f64> = (0..24).map(f64::from).collect();
        let x = t.constant(arr(&[2, 3, 4], &data));
        let y = t.permute(x, &[2, 0, 1]).unwrap();
        assert_eq!(t.shape(y), &[4, 2, 3]);
        // out[k][i][j] = in[i][j][k]
        let out = t.value(y).data();
        for i in 0..2 {
            for j in 0..3 {
                for k in 0..4 {
                    assert_eq!(out[(k * 2 + i) * 3 + j], data[(i * 3 + j) * 4 + k]);
                }
            }
        }
    }

    #[test]
    fn concat_slice_inverse() {
        let mut t = Tape::new();
        let a = t.constant(arr(&[2, 1, 2], &[1., 2., 3., 4.]));
        let b = t.constant(arr(&[2, 2, 2], &[5., 6., 7., 8., 9., 10., 11., 12.]));
        let c = t.concat(&[a, b], 1).unwrap();
        assert_eq!(t.shape(c), &[2, 3, 2]);
        assert_eq!(t.value(c).data(), &[1., 2., 5., 6., 7., 8., 3., 4., 9., 10., 11., 12.]);
        let back = t.slice(c, 1, 1, 3).unwrap();
        assert_eq!(t.value(back), t.value(b));
    }

    #[test]
    fn dropout_is_seeded_and_identity_in_eval() {
        let x = DenseArray::ones(&[50]);
        let mut eval = Tape::new();
        let v = eval.constant(x.clone());
        let y = eval.dropout(v, 0.5).unwrap();
        assert_eq!(v, y);

        let run = |seed| {
            let mut t = Tape::training(seed);
            let v = t.constant(x.clone());
            let y = t.dropout(v, 0.5).unwrap();
            t.value(y).clone()
        };
        assert_eq!(run(7), run(7));
        assert_ne!(run(7), run(8));
        let kept = run(7).data().iter().filter(|&&v| v != 0.0).count();
        assert!(kept > 10 && kept < 40);
        assert!(run(7).data().iter().all(|&v| v == 0.0 || v == 2.0));
    }

    #[test]
    fn non_finite_forward_is_an_error() {
        let mut t = Tape::new();
        let x = t.constant(DenseArray::full(&[2], 1e300));
        let r = t.mul(x, x);
        assert!(matches!(r, Err(Error::NonFinite(_))));
    }

    #[test]
    fn repeat_interleave_layout() {
        let mut t = Tape::new();
        let x = t.param(arr(&[2, 2], &[1., 2., 3., 4.]));
        let y = t.repeat_interleave(x, 3).unwrap();
        assert_eq!(t.value(y).data(), &[1., 2., 1., 2., 1., 2., 3., 4., 3., 4., 3., 4.]);
        let s = t.sum(y).unwrap();
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap().data(), &[3.0; 4]);
    }
}
