use super::params::{Gradients, ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Lower clamp applied to probabilities before taking logarithms.
pub const PROB_CLAMP: f64 = 1e-12;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Param(ParamId),
    Constant,
    /// Each output row is the mean of the listed parameter rows.
    Bag(Vec<Vec<(ParamId, usize)>>),
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRowBias(Var, Var),
    Scale(Var, f64),
    Tanh(Var),
    Relu(Var),
    Sigmoid(Var),
    SoftmaxRows(Var),
    SoftmaxCols(Var),
    SumCols(Var),
    MeanRows(Var),
    SumAll(Var),
    MeanAll(Var),
    HConcat(Vec<Var>),
    VStack(Vec<Var>),
    SelectRows(Var, Vec<usize>),
    WeightedSum(Var, Var),
    RowDot(Var, Var),
    ScaleRows(Var, Var),
    RowSqNorm(Var),
    BceMean(Var, Vec<f64>),
    SumSquares(Var),
}

#[derive(Debug)]
struct Node {
    op: Op,
    // `None` for parameter leaves, whose value lives in the store.
    value: Option<Tensor>,
}

/// Define-by-run reverse-mode tape over a borrowed parameter store.
///
/// The tape is append-only during the forward pass. [`Tape::backward`]
/// walks it in reverse creation order and then clears it.
pub struct Tape<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
}

fn dims(t: &Tensor) -> (usize, usize) {
    (t.rows(), t.cols())
}

fn softmax_rows_of(x: &Tensor) -> Tensor {
    let (m, n) = dims(x);
    let mut out = Tensor::zeros(m, n);
    for i in 0..m {
        let row = x.row_slice(i);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let o = out.row_slice_mut(i);
        let mut total = 0.0;
        for (o, &v) in o.iter_mut().zip(row) {
            *o = (v - max).exp();
            total += *o;
        }
        for o in o.iter_mut() {
            *o /= total;
        }
    }
    out
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            param_vars: vec![None; params.len()],
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(t), _) => t,
            (None, Op::Param(id)) => self.params.get(*id),
            _ => unreachable!("node without value"),
        }
    }

    fn push(&mut self, op: Op, value: Tensor) -> Var {
        self.nodes.push(Node {
            op,
            value: Some(value),
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf for a whole parameter tensor. Repeated calls return the same var.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        self.nodes.push(Node {
            op: Op::Param(id),
            value: None,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id.0] = Some(v);
        v
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(Op::Constant, t)
    }

    /// Embedding bag: output row `r` is the mean of the parameter rows listed
    /// in `rows[r]`. All referenced tables must share a column count.
    pub fn bag(&mut self, rows: Vec<Vec<(ParamId, usize)>>) -> Result<Var> {
        if rows.is_empty() {
            return Err(Error::invalid("bag: no output rows"));
        }
        let first = rows
            .iter()
            .flat_map(|r| r.first())
            .next()
            .ok_or_else(|| Error::invalid("bag: every row is empty"))?;
        let width = self.params.get(first.0).cols();
        let mut out = Tensor::zeros(rows.len(), width);
        for (r, sources) in rows.iter().enumerate() {
            if sources.is_empty() {
                return Err(Error::invalid(format!("bag: output row {r} has no sources")));
            }
            let scale = 1.0 / sources.len() as f64;
            let o = out.row_slice_mut(r);
            for &(id, idx) in sources {
                let table = self.params.get(id);
                if table.cols() != width {
                    return Err(Error::shape("bag", &[width], &[table.cols()]));
                }
                if idx >= table.rows() {
                    return Err(Error::invalid(format!(
                        "bag: row {idx} out of range for parameter {} with {} rows",
                        self.params.name(id),
                        table.rows()
                    )));
                }
                for (o, &v) in o.iter_mut().zip(table.row_slice(idx)) {
                    *o += scale * v;
                }
            }
        }
        Ok(self.push(Op::Bag(rows), out))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(Op::MatMul(a, b), out))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).transpose();
        self.push(Op::Transpose(a), out)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (x, y) = (self.value(a), self.value(b));
        if dims(x) != dims(y) {
            return Err(Error::shape(op, x.shape(), y.shape()));
        }
        Ok(())
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (x, y) = (self.value(a), self.value(b));
        let mut out = Tensor::zeros(x.rows(), x.cols());
        for ((o, &p), &q) in out.data_mut().iter_mut().zip(x.data()).zip(y.data()) {
            *o = f(p, q);
        }
        out
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.zip_with(a, b, |p, q| p + q);
        Ok(self.push(Op::Add(a, b), out))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.zip_with(a, b, |p, q| p - q);
        Ok(self.push(Op::Sub(a, b), out))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.zip_with(a, b, |p, q| p * q);
        Ok(self.push(Op::Mul(a, b), out))
    }

    /// `a (m×n) + b (1×n)` with `b` added to every row.
    pub fn add_row_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (x, b) = (self.value(a), self.value(bias));
        if b.rows() != 1 || b.cols() != x.cols() {
            return Err(Error::shape("add_row_bias", x.shape(), b.shape()));
        }
        let mut out = x.clone();
        for i in 0..out.rows() {
            for (o, &v) in out.row_slice_mut(i).iter_mut().zip(b.data()) {
                *o += v;
            }
        }
        Ok(self.push(Op::AddRowBias(a, bias), out))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let out = self.value(a).map(|x| x * factor);
        self.push(Op::Scale(a, factor), out)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::tanh);
        self.push(Op::Tanh(a), out)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.max(0.0));
        self.push(Op::Relu(a), out)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        self.push(Op::Sigmoid(a), out)
    }

    /// Softmax over each row, max-subtracted.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let out = softmax_rows_of(self.value(a));
        self.push(Op::SoftmaxRows(a), out)
    }

    /// Softmax over each column, max-subtracted.
    pub fn softmax_cols(&mut self, a: Var) -> Var {
        let out = softmax_rows_of(&self.value(a).transpose()).transpose();
        self.push(Op::SoftmaxCols(a), out)
    }

    /// Column sums of an `m × n` matrix as a `1 × n` row.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut out = Tensor::zeros(1, x.cols());
        for i in 0..x.rows() {
            for (o, &v) in out.data_mut().iter_mut().zip(x.row_slice(i)) {
                *o += v;
            }
        }
        self.push(Op::SumCols(a), out)
    }

    /// Mean over the rows of an `m × n` matrix as a `1 × n` row.
    pub fn avg_over_attributes(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let m = x.rows() as f64;
        let mut out = Tensor::zeros(1, x.cols());
        for i in 0..x.rows() {
            for (o, &v) in out.data_mut().iter_mut().zip(x.row_slice(i)) {
                *o += v;
            }
        }
        for o in out.data_mut() {
            *o /= m;
        }
        self.push(Op::MeanRows(a), out)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Op::SumAll(a), Tensor::scalar(s))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let s = x.data().iter().sum::<f64>() / x.len() as f64;
        self.push(Op::MeanAll(a), Tensor::scalar(s))
    }

    /// Side-by-side concatenation of matrices with equal row counts.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat: empty input list"))?;
        let m = self.value(*first).rows();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let t = self.value(p);
            if t.rows() != m {
                return Err(Error::shape("concat", &[m], t.shape()));
            }
            widths.push(t.cols());
        }
        let total: usize = widths.iter().sum();
        let mut out = Tensor::zeros(m, total);
        let mut offset = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let t = self.value(p);
            for i in 0..m {
                out.row_slice_mut(i)[offset..offset + w].copy_from_slice(t.row_slice(i));
            }
            offset += w;
        }
        Ok(self.push(Op::HConcat(parts.to_vec()), out))
    }

    /// Vertical stacking of matrices with equal column counts.
    pub fn vstack(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("vstack: empty input list"))?;
        let n = self.value(*first).cols();
        let mut data = Vec::new();
        for &p in parts {
            let t = self.value(p);
            if t.cols() != n {
                return Err(Error::shape("vstack", &[n], t.shape()));
            }
            data.extend_from_slice(t.data());
        }
        let m = data.len() / n.max(1);
        let out = Tensor::matrix(m, n, data)?;
        Ok(self.push(Op::VStack(parts.to_vec()), out))
    }

    /// Rows of `a` picked by index; indices may repeat.
    pub fn select_rows(&mut self, a: Var, idx: Vec<usize>) -> Result<Var> {
        let x = self.value(a);
        let mut out = Tensor::zeros(idx.len(), x.cols());
        for (r, &i) in idx.iter().enumerate() {
            if i >= x.rows() {
                return Err(Error::invalid(format!(
                    "select_rows: row {i} out of range for {} rows",
                    x.rows()
                )));
            }
            out.row_slice_mut(r).copy_from_slice(x.row_slice(i));
        }
        Ok(self.push(Op::SelectRows(a, idx), out))
    }

    /// `Σ_j w_j · v_j` for weights of length `L` (row or column) and an `L × d`
    /// matrix, producing a `1 × d` row.
    pub fn weighted_sum(&mut self, weights: Var, vectors: Var) -> Result<Var> {
        let (w, v) = (self.value(weights), self.value(vectors));
        if w.len() != v.rows() || (w.rows() != 1 && w.cols() != 1) {
            return Err(Error::shape("weighted_sum", w.shape(), v.shape()));
        }
        let mut out = Tensor::zeros(1, v.cols());
        for (j, &wj) in w.data().iter().enumerate() {
            for (o, &x) in out.data_mut().iter_mut().zip(v.row_slice(j)) {
                *o += wj * x;
            }
        }
        Ok(self.push(Op::WeightedSum(weights, vectors), out))
    }

    /// Per-row dot product of two `m × n` matrices, giving `m × 1`.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("row_dot", a, b)?;
        let (x, y) = (self.value(a), self.value(b));
        let mut out = Tensor::zeros(x.rows(), 1);
        for i in 0..x.rows() {
            out.data_mut()[i] = x.row_slice(i).iter().zip(y.row_slice(i)).map(|(p, q)| p * q).sum();
        }
        Ok(self.push(Op::RowDot(a, b), out))
    }

    /// Multiplies row `i` of `a (m×n)` by `s[i]` where `s` is `m × 1`.
    pub fn scale_rows(&mut self, a: Var, s: Var) -> Result<Var> {
        let (x, f) = (self.value(a), self.value(s));
        if f.len() != x.rows() || f.cols() != 1 {
            return Err(Error::shape("scale_rows", x.shape(), f.shape()));
        }
        let mut out = x.clone();
        for i in 0..out.rows() {
            let k = f.data()[i];
            for o in out.row_slice_mut(i) {
                *o *= k;
            }
        }
        Ok(self.push(Op::ScaleRows(a, s), out))
    }

    /// Squared L2 norm of every row, `m × 1`.
    pub fn row_sq_norm(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut out = Tensor::zeros(x.rows(), 1);
        for i in 0..x.rows() {
            out.data_mut()[i] = x.row_slice(i).iter().map(|v| v * v).sum();
        }
        self.push(Op::RowSqNorm(a), out)
    }

    /// Mean binary cross-entropy of probabilities against 0/1 labels, with
    /// probabilities clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]`.
    pub fn bce_mean(&mut self, probs: Var, labels: Vec<f64>) -> Result<Var> {
        let p = self.value(probs);
        if p.len() != labels.len() || labels.is_empty() {
            return Err(Error::shape("bce_mean", p.shape(), &[labels.len()]));
        }
        let mut total = 0.0;
        for (&pi, &y) in p.data().iter().zip(&labels) {
            let c = pi.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
            total -= y * c.ln() + (1.0 - y) * (1.0 - c).ln();
        }
        let out = Tensor::scalar(total / labels.len() as f64);
        Ok(self.push(Op::BceMean(probs, labels), out))
    }

    /// `Σ x²` over every element.
    pub fn sum_squares(&mut self, a: Var) -> Var {
        let s = self.value(a).sum_squares();
        self.push(Op::SumSquares(a), Tensor::scalar(s))
    }

    /// Reverse sweep from a scalar `loss`. Returns one gradient per parameter
    /// in the store (zeros for parameters the loss does not touch) and clears
    /// the tape.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[loss.0] = Some(Tensor::filled(1, 1, 1.0));
        let mut param_grads: Vec<Option<Tensor>> = vec![None; self.params.len()];

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, g, &mut grads, &mut param_grads)?;
        }

        let out = param_grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| g.unwrap_or_else(|| Tensor::zeros_like(self.params.get(ParamId(i)))))
            .collect();
        self.nodes.clear();
        self.param_vars.iter_mut().for_each(|v| *v = None);
        Ok(Gradients::new(out))
    }

    fn propagate(
        &self,
        idx: usize,
        g: Tensor,
        grads: &mut [Option<Tensor>],
        param_grads: &mut [Option<Tensor>],
    ) -> Result<()> {
        let accumulate = |grads: &mut [Option<Tensor>], v: Var, t: Tensor| match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&t),
            slot @ None => *slot = Some(t),
        };
        let node = &self.nodes[idx];
        let out = self.value(Var(idx));
        match &node.op {
            Op::Constant => {}
            Op::Param(id) => match &mut param_grads[id.0] {
                Some(existing) => existing.add_assign(&g),
                slot @ None => {
                    let mut t = g;
                    // keep the parameter's declared shape (1-d stays 1-d)
                    t = Tensor::new(self.params.get(*id).shape().to_vec(), t.into_data())?;
                    *slot = Some(t);
                }
            },
            Op::Bag(rows) => {
                for (r, sources) in rows.iter().enumerate() {
                    let scale = 1.0 / sources.len() as f64;
                    let gr = g.row_slice(r);
                    for &(id, row) in sources {
                        let slot = param_grads[id.0]
                            .get_or_insert_with(|| Tensor::zeros_like(self.params.get(id)));
                        for (s, &v) in slot.row_slice_mut(row).iter_mut().zip(gr) {
                            *s += scale * v;
                        }
                    }
                }
            }
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let ga = g.matmul(&bv.transpose())?;
                let gb = av.transpose().matmul(&g)?;
                accumulate(grads, *a, ga);
                accumulate(grads, *b, gb);
            }
            Op::Transpose(a) => accumulate(grads, *a, g.transpose()),
            Op::Add(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g);
            }
            Op::Sub(a, b) => {
                accumulate(grads, *b, g.map(|x| -x));
                accumulate(grads, *a, g);
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let mut ga = g.clone();
                for (x, &y) in ga.data_mut().iter_mut().zip(bv.data()) {
                    *x *= y;
                }
                let mut gb = g;
                for (x, &y) in gb.data_mut().iter_mut().zip(av.data()) {
                    *x *= y;
                }
                accumulate(grads, *a, ga);
                accumulate(grads, *b, gb);
            }
            Op::AddRowBias(a, b) => {
                let mut gb = Tensor::zeros(1, g.cols());
                for i in 0..g.rows() {
                    for (o, &v) in gb.data_mut().iter_mut().zip(g.row_slice(i)) {
                        *o += v;
                    }
                }
                accumulate(grads, *b, gb);
                accumulate(grads, *a, g);
            }
            Op::Scale(a, f) => accumulate(grads, *a, g.map(|x| x * f)),
            Op::Tanh(a) => {
                let mut ga = g;
                for (x, &y) in ga.data_mut().iter_mut().zip(out.data()) {
                    *x *= 1.0 - y * y;
                }
                accumulate(grads, *a, ga);
            }
            Op::Relu(a) => {
                let mut ga = g;
                for (x, &y) in ga.data_mut().iter_mut().zip(out.data()) {
                    if y <= 0.0 {
                        *x = 0.0;
                    }
                }
                accumulate(grads, *a, ga);
            }
            Op::Sigmoid(a) => {
                let mut ga = g;
                for (x, &y) in ga.data_mut().iter_mut().zip(out.data()) {
                    *x *= y * (1.0 - y);
                }
                accumulate(grads, *a, ga);
            }
            Op::SoftmaxRows(a) => accumulate(grads, *a, softmax_rows_backward(out, &g)),
            Op::SoftmaxCols(a) => {
                let ga = softmax_rows_backward(&out.transpose(), &g.transpose()).transpose();
                accumulate(grads, *a, ga);
            }
            Op::SumCols(a) => {
                let m = self.value(*a).rows();
                let mut ga = Tensor::zeros(m, g.cols());
                for i in 0..m {
                    ga.row_slice_mut(i).copy_from_slice(g.data());
                }
                accumulate(grads, *a, ga);
            }
            Op::MeanRows(a) => {
                let m = self.value(*a).rows();
                let mut ga = Tensor::zeros(m, g.cols());
                for i in 0..m {
                    for (o, &v) in ga.row_slice_mut(i).iter_mut().zip(g.data()) {
                        *o = v / m as f64;
                    }
                }
                accumulate(grads, *a, ga);
            }
            Op::SumAll(a) => {
                let x = self.value(*a);
                accumulate(grads, *a, Tensor::filled(x.rows(), x.cols(), g.item()));
            }
            Op::MeanAll(a) => {
                let x = self.value(*a);
                let v = g.item() / x.len() as f64;
                accumulate(grads, *a, Tensor::filled(x.rows(), x.cols(), v));
            }
            Op::HConcat(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    let mut gp = Tensor::zeros(g.rows(), w);
                    for i in 0..g.rows() {
                        gp.row_slice_mut(i).copy_from_slice(&g.row_slice(i)[offset..offset + w]);
                    }
                    offset += w;
                    accumulate(grads, p, gp);
                }
            }
            Op::VStack(parts) => {
                let mut offset = 0;
                let n = g.cols();
                for &p in parts {
                    let m = self.value(p).rows();
                    let slice = g.data()[offset * n..(offset + m) * n].to_vec();
                    offset += m;
                    accumulate(grads, p, Tensor::matrix(m, n, slice)?);
                }
            }
            Op::SelectRows(a, idx) => {
                let x = self.value(*a);
                let mut ga = Tensor::zeros(x.rows(), x.cols());
                for (r, &i) in idx.iter().enumerate() {
                    for (o, &v) in ga.row_slice_mut(i).iter_mut().zip(g.row_slice(r)) {
                        *o += v;
                    }
                }
                accumulate(grads, *a, ga);
            }
            Op::WeightedSum(w, v) => {
                let (wv, vv) = (self.value(*w), self.value(*v));
                let mut gw = Tensor::zeros(wv.rows(), wv.cols());
                let mut gv = Tensor::zeros(vv.rows(), vv.cols());
                for j in 0..vv.rows() {
                    let row = vv.row_slice(j);
                    gw.data_mut()[j] = row.iter().zip(g.data()).map(|(a, b)| a * b).sum();
                    let wj = wv.data()[j];
                    for (o, &gv_) in gv.row_slice_mut(j).iter_mut().zip(g.data()) {
                        *o = wj * gv_;
                    }
                }
                accumulate(grads, *w, gw);
                accumulate(grads, *v, gv);
            }
            Op::RowDot(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let mut ga = bv.clone();
                let mut gb = av.clone();
                for i in 0..av.rows() {
                    let k = g.data()[i];
                    ga.row_slice_mut(i).iter_mut().for_each(|x| *x *= k);
                    gb.row_slice_mut(i).iter_mut().for_each(|x| *x *= k);
                }
                accumulate(grads, *a, ga);
                accumulate(grads, *b, gb);
            }
            Op::ScaleRows(a, s) => {
                let (av, sv) = (self.value(*a), self.value(*s));
                let mut ga = g.clone();
                let mut gs = Tensor::zeros(sv.rows(), 1);
                for i in 0..av.rows() {
                    let k = sv.data()[i];
                    gs.data_mut()[i] = g.row_slice(i).iter().zip(av.row_slice(i)).map(|(p, q)| p * q).sum();
                    ga.row_slice_mut(i).iter_mut().for_each(|x| *x *= k);
                }
                accumulate(grads, *a, ga);
                accumulate(grads, *s, gs);
            }
            Op::RowSqNorm(a) => {
                let av = self.value(*a);
                let mut ga = av.clone();
                for i in 0..av.rows() {
                    let k = 2.0 * g.data()[i];
                    ga.row_slice_mut(i).iter_mut().for_each(|x| *x *= k);
                }
                accumulate(grads, *a, ga);
            }
            Op::BceMean(p, labels) => {
                let pv = self.value(*p);
                let scale = g.item() / labels.len() as f64;
                let mut gp = Tensor::zeros(pv.rows(), pv.cols());
                for ((o, &pi), &y) in gp.data_mut().iter_mut().zip(pv.data()).zip(labels) {
                    if pi > PROB_CLAMP && pi < 1.0 - PROB_CLAMP {
                        *o = -scale * (y / pi - (1.0 - y) / (1.0 - pi));
                    }
                }
                accumulate(grads, *p, gp);
            }
            Op::SumSquares(a) => {
                let k = 2.0 * g.item();
                accumulate(grads, *a, self.value(*a).map(|x| k * x));
            }
        }
        Ok(())
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softmax_rows_backward(y: &Tensor, g: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(y.rows(), y.cols());
    for i in 0..y.rows() {
        let (yr, gr) = (y.row_slice(i), g.row_slice(i));
        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
        for ((o, &yv), &gv) in out.row_slice_mut(i).iter_mut().zip(yr).zip(gr) {
            *o = yv * (gv - dot);
        }
    }
    out
}
