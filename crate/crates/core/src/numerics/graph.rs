use std::collections::HashMap;

use super::{gemm, DenseArray, NumericsError, ParamId, ParamStore};

/// Handle to a node in a [`Graph`].
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// An operation defined outside this module, with its own backward rule.
pub trait CustomOp: Send + Sync {
    fn name(&self) -> &'static str;
    fn forward(&self, inputs: &[&DenseArray]) -> Result<DenseArray, NumericsError>;
    /// Gradient with respect to each input, given the upstream gradient.
    fn backward(
        &self,
        inputs: &[&DenseArray],
        output: &DenseArray,
        grad_out: &DenseArray,
    ) -> Vec<DenseArray>;
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    /// `a * b^T`
    MatMulBt(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var, f64),
    Square(Var),
    Sqrt(Var),
    Relu(Var),
    Gelu(Var),
    Tanh(Var),
    Cos(Var),
    Sin(Var),
    Sum(Var),
    Mean(Var),
    SumRows(Var),
    MeanRows(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize, usize),
    /// Per-column standardization over rows: `(x - mean) / sqrt(var + eps)`
    /// with the biased batch variance.
    BatchStandardize(Var, f64),
    Custom(Box<dyn CustomOp>, Vec<Var>),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::MatMulBt(..) => "matmul_bt",
            Op::Transpose(..) => "transpose",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRow(..) => "add_row",
            Op::MulRow(..) => "mul_row",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Square(..) => "square",
            Op::Sqrt(..) => "sqrt",
            Op::Relu(..) => "relu",
            Op::Gelu(..) => "gelu",
            Op::Tanh(..) => "tanh",
            Op::Cos(..) => "cos",
            Op::Sin(..) => "sin",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::SumRows(..) => "sum_rows",
            Op::MeanRows(..) => "mean_rows",
            Op::ConcatCols(..) => "concat_cols",
            Op::ConcatRows(..) => "concat_rows",
            Op::SliceRows(..) => "slice_rows",
            Op::BatchStandardize(..) => "batch_standardize",
            Op::Custom(op, _) => op.name(),
        }
    }

    fn inputs(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf => vec![],
            MatMul(a, b) | MatMulBt(a, b) | Add(a, b) | Sub(a, b) | Mul(a, b) | AddRow(a, b)
            | MulRow(a, b) => vec![*a, *b],
            Transpose(a) | Scale(a, _) | AddScalar(a, _) | Square(a) | Sqrt(a) | Relu(a)
            | Gelu(a) | Tanh(a) | Cos(a) | Sin(a) | Sum(a) | Mean(a) | SumRows(a)
            | MeanRows(a) | SliceRows(a, ..) | BatchStandardize(a, _) => vec![*a],
            ConcatCols(v) | ConcatRows(v) | Custom(_, v) => v.clone(),
        }
    }
}

struct Node {
    op: Op,
    value: DenseArray,
    param: Option<ParamId>,
}

/// Define-by-run computation graph. Values are computed eagerly when nodes
/// are added; [`Graph::forward`] re-evaluates every node after leaf edits.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    param_vars: HashMap<ParamId, Var>,
}

/// Per-node gradients produced by [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<DenseArray>>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&DenseArray> {
        self.grads[v.0].as_ref()
    }

    /// Gradient for every parameter in `store`; parameters that were not
    /// reached from the loss get zeros.
    pub fn param_grads(&self, graph: &Graph, store: &ParamStore) -> Vec<DenseArray> {
        let mut out: Vec<DenseArray> = store
            .values()
            .iter()
            .map(|v| DenseArray::zeros(v.shape()))
            .collect();
        for (i, node) in graph.nodes.iter().enumerate() {
            if let (Some(pid), Some(g)) = (node.param, &self.grads[i]) {
                out[pid.0].add_assign(g);
            }
        }
        out
    }
}

fn shape_err(op: &'static str, a: &DenseArray, b: &DenseArray) -> NumericsError {
    NumericsError::ShapeMismatch {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let th = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

fn eval(op: &Op, vals: &[&DenseArray]) -> Result<DenseArray, NumericsError> {
    use Op::*;
    let out = match op {
        Leaf => unreachable!("leaves are not evaluated"),
        MatMul(..) => vals[0].matmul(vals[1])?,
        MatMulBt(..) => {
            let (a, b) = (vals[0], vals[1]);
            if a.cols() != b.cols() {
                return Err(shape_err("matmul_bt", a, b));
            }
            let (m, k, n) = (a.rows(), a.cols(), b.rows());
            let mut out = vec![0.0; m * n];
            gemm(m, k, n, a.data(), false, b.data(), true, &mut out, 0.0);
            DenseArray::matrix(m, n, out)
        }
        Transpose(..) => vals[0].transpose(),
        Add(..) | Sub(..) | Mul(..) => {
            let (a, b) = (vals[0], vals[1]);
            if a.shape() != b.shape() {
                return Err(shape_err(op.name(), a, b));
            }
            match op {
                Add(..) => a.zip_map(b, |x, y| x + y),
                Sub(..) => a.zip_map(b, |x, y| x - y),
                _ => a.zip_map(b, |x, y| x * y),
            }
        }
        AddRow(..) | MulRow(..) => {
            let (a, r) = (vals[0], vals[1]);
            if r.len() != a.cols() {
                return Err(shape_err(op.name(), a, r));
            }
            let c = a.cols();
            let mut out = a.clone();
            let add = matches!(op, AddRow(..));
            for row in out.data_mut().chunks_mut(c.max(1)) {
                for (x, &y) in row.iter_mut().zip(r.data()) {
                    if add {
                        *x += y;
                    } else {
                        *x *= y;
                    }
                }
            }
            out
        }
        Scale(_, c) => vals[0].map(|x| x * c),
        AddScalar(_, c) => vals[0].map(|x| x + c),
        Square(..) => vals[0].map(|x| x * x),
        Sqrt(..) => vals[0].map(f64::sqrt),
        Relu(..) => vals[0].map(|x| x.max(0.0)),
        Gelu(..) => vals[0].map(gelu),
        Tanh(..) => vals[0].map(f64::tanh),
        Cos(..) => vals[0].map(f64::cos),
        Sin(..) => vals[0].map(f64::sin),
        Sum(..) => DenseArray::scalar(vals[0].sum()),
        Mean(..) => {
            if vals[0].is_empty() {
                return Err(NumericsError::Invalid("mean of empty array".into()));
            }
            DenseArray::scalar(vals[0].mean())
        }
        SumRows(..) | MeanRows(..) => {
            let a = vals[0];
            let (r, c) = (a.rows(), a.cols());
            let mut out = vec![0.0; c];
            for i in 0..r {
                for (o, x) in out.iter_mut().zip(a.row(i)) {
                    *o += x;
                }
            }
            if matches!(op, MeanRows(..)) {
                if r == 0 {
                    return Err(NumericsError::Invalid("mean_rows of empty array".into()));
                }
                out.iter_mut().for_each(|o| *o /= r as f64);
            }
            DenseArray::row_vector(out)
        }
        ConcatCols(..) => {
            let rows = vals[0].rows();
            for v in vals {
                if v.rows() != rows {
                    return Err(shape_err("concat_cols", vals[0], v));
                }
            }
            let total: usize = vals.iter().map(|v| v.cols()).sum();
            let mut out = Vec::with_capacity(rows * total);
            for i in 0..rows {
                for v in vals {
                    out.extend_from_slice(v.row(i));
                }
            }
            DenseArray::matrix(rows, total, out)
        }
        ConcatRows(..) => {
            let cols = vals[0].cols();
            for v in vals {
                if v.cols() != cols {
                    return Err(shape_err("concat_rows", vals[0], v));
                }
            }
            let rows: usize = vals.iter().map(|v| v.rows()).sum();
            let mut out = Vec::with_capacity(rows * cols);
            for v in vals {
                out.extend_from_slice(v.data());
            }
            DenseArray::matrix(rows, cols, out)
        }
        SliceRows(_, s, e) => {
            let a = vals[0];
            if s > e || *e > a.rows() {
                return Err(NumericsError::Invalid(format!(
                    "slice_rows {s}..{e} out of range for {:?}",
                    a.shape()
                )));
            }
            a.slice_rows(*s, *e)
        }
        BatchStandardize(_, eps) => {
            let a = vals[0];
            let (r, c) = (a.rows(), a.cols());
            if r < 2 {
                return Err(NumericsError::Invalid(
                    "batch standardization needs at least 2 rows".into(),
                ));
            }
            let (mean, var) = column_moments(a);
            let mut out = a.clone();
            for i in 0..r {
                let row = out.row_mut(i);
                for j in 0..c {
                    row[j] = (row[j] - mean[j]) / (var[j] + eps).sqrt();
                }
            }
            out
        }
        Custom(op, _) => op.forward(vals)?,
    };
    Ok(out)
}

/// Column means and biased column variances.
pub(crate) fn column_moments(a: &DenseArray) -> (Vec<f64>, Vec<f64>) {
    let (r, c) = (a.rows(), a.cols());
    let mut mean = vec![0.0; c];
    for i in 0..r {
        for (m, x) in mean.iter_mut().zip(a.row(i)) {
            *m += x;
        }
    }
    mean.iter_mut().for_each(|m| *m /= r as f64);
    let mut var = vec![0.0; c];
    for i in 0..r {
        for ((v, x), m) in var.iter_mut().zip(a.row(i)).zip(&mean) {
            *v += (x - m) * (x - m);
        }
    }
    var.iter_mut().for_each(|v| *v /= r as f64);
    (mean, var)
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &DenseArray {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    fn leaf(&mut self, value: DenseArray, param: Option<ParamId>) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
            param,
        });
        Var(self.nodes.len() - 1)
    }

    /// Non-trainable leaf.
    pub fn constant(&mut self, value: DenseArray) -> Var {
        self.leaf(value, None)
    }

    /// Trainable leaf bound to a parameter; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let v = self.leaf(store.get(id).clone(), Some(id));
        self.param_vars.insert(id, v);
        v
    }

    /// Replaces a leaf value; call [`Graph::forward`] afterwards.
    pub fn set_value(&mut self, v: Var, value: DenseArray) -> Result<(), NumericsError> {
        let node = &mut self.nodes[v.0];
        if !matches!(node.op, Op::Leaf) {
            return Err(NumericsError::Invalid(format!("node {} is not a leaf", v.0)));
        }
        if node.value.shape() != value.shape() {
            return Err(shape_err("set_value", &node.value, &value));
        }
        node.value = value;
        Ok(())
    }

    fn push(&mut self, op: Op) -> Result<Var, NumericsError> {
        let inputs = op.inputs();
        let value = {
            let vals: Vec<&DenseArray> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
            eval(&op, &vals)?
        };
        let node = self.nodes.len();
        if !value.all_finite() {
            return Err(NumericsError::NonFinite {
                node,
                op: op.name(),
            });
        }
        self.nodes.push(Node {
            op,
            value,
            param: None,
        });
        Ok(Var(node))
    }

    /// Re-evaluates every non-leaf node in insertion (topological) order.
    pub fn forward(&mut self) -> Result<(), NumericsError> {
        for i in 0..self.nodes.len() {
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let inputs = self.nodes[i].op.inputs();
            let value = {
                let vals: Vec<&DenseArray> =
                    inputs.iter().map(|v| &self.nodes[v.0].value).collect();
                eval(&self.nodes[i].op, &vals)?
            };
            if !value.all_finite() {
                return Err(NumericsError::NonFinite {
                    node: i,
                    op: self.nodes[i].op.name(),
                });
            }
            self.nodes[i].value = value;
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.push(Op::MatMul(a, b))
    }
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.push(Op::MatMulBt(a, b))
    }
    pub fn transpose(&mut self, a: Var) -> Result<Var, NumericsError> {
        self.push(Op::Transpose(a))
    }
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.push(Op::Add(a, b))
    }
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.push(Op::Sub(a, b))
    }
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.push(Op::Mul(a, b))
    }
    /// Adds a `1 x C` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var, NumericsError> {
        self.push(Op::AddRow(a, row))
    }
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var, NumericsError> {
        self.push(Op::MulRow(a, row))
    }
    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var, NumericsError> {
        self.push(Op::Scale(a, c))
    }
    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var, NumericsError> {
        self.push(Op::AddScalar(a, c))
    }
    pub fn square(&mut self, a: Var) -> Result<Var, NumericsError> {
        self.push(Op::Square(a))
    }
    pub fn sqrt(&mut self, a: Var) -> Result<Var, NumericsError> {
        self.push(Op::Sqrt(a))
    }
    pub fn relu(&mut self, a: Var) -> Result<Var, NumericsError> {
        self.push(Op::Relu(a))
    }
    /// Tanh approximation of GELU.
    pub fn gelu(&mut self, a: Var) -> Result<Var, NumericsError> {
        self.push(Op::Gelu(a))
    }
    pub fn tanh(&mut self, a: Var) -> Result<Var, NumericsError> {
        self.push(Op::Tanh(a))
    }
    pub fn cos(&mut self, a: Var) -> Result<Var, NumericsError> {
        self.push(Op::Cos(a))
    }
    pub fn sin(&mut self, a: Var) -> Result<Var, NumericsError> {
        self.push(Op::Sin(a))
    }
    pub fn sum(&mut self, a: Var) -> Result<Var, NumericsError> {
        self.push(Op::Sum(a))
    }
    pub fn mean(&mut self, a: Var) -> Result<Var, NumericsError> {
        self.push(Op::Mean(a))
    }
    pub fn sum_rows(&mut self, a: Var) -> Result<Var, NumericsError> {
        self.push(Op::SumRows(a))
    }
    pub fn mean_rows(&mut self, a: Var) -> Result<Var, NumericsError> {
        self.push(Op::MeanRows(a))
    }
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, NumericsError> {
        if parts.is_empty() {
            return Err(NumericsError::Invalid("concat of zero arrays".into()));
        }
        self.push(Op::ConcatCols(parts.to_vec()))
    }
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, NumericsError> {
        if parts.is_empty() {
            return Err(NumericsError::Invalid("concat of zero arrays".into()));
        }
        self.push(Op::ConcatRows(parts.to_vec()))
    }
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var, NumericsError> {
        self.push(Op::SliceRows(a, start, end))
    }
    pub fn batch_standardize(&mut self, a: Var, eps: f64) -> Result<Var, NumericsError> {
        self.push(Op::BatchStandardize(a, eps))
    }
    pub fn custom(&mut self, op: Box<dyn CustomOp>, inputs: &[Var]) -> Result<Var, NumericsError> {
        self.push(Op::Custom(op, inputs.to_vec()))
    }

    /// Reverse-mode sweep from a scalar `loss` node.
    pub fn backward(&self, loss: Var) -> Result<Gradients, NumericsError> {
        let lv = &self.nodes[loss.0].value;
        if lv.len() != 1 {
            return Err(NumericsError::NonScalarLoss {
                node: loss.0,
                shape: lv.shape().to_vec(),
            });
        }
        // only nodes that depend on a parameter carry gradient
        let mut tracked = vec![false; loss.0 + 1];
        for i in 0..=loss.0 {
            let node = &self.nodes[i];
            tracked[i] = match node.op {
                Op::Leaf => node.param.is_some(),
                ref op => op.inputs().iter().any(|v| tracked[v.0]),
            };
        }
        let mut grads: Vec<Option<DenseArray>> = (0..self.nodes.len()).map(|_| None).collect();
        if tracked[loss.0] {
            grads[loss.0] = Some(DenseArray::filled(lv.shape(), 1.0));
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            let inputs = node.op.inputs();
            if !inputs.is_empty() {
                let need: Vec<bool> = inputs.iter().map(|v| tracked[v.0]).collect();
                let contribs = self.local_backward(i, &g, &need);
                for ((v, c), &needed) in inputs.iter().zip(contribs).zip(&need) {
                    if !needed {
                        continue;
                    }
                    match &mut grads[v.0] {
                        Some(acc) => acc.add_assign(&c),
                        slot @ None => *slot = Some(c),
                    }
                }
            }
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Input gradients; entries whose `need` flag is false may be left empty.
    fn local_backward(&self, i: usize, g: &DenseArray, need: &[bool]) -> Vec<DenseArray> {
        use Op::*;
        let node = &self.nodes[i];
        let out = &node.value;
        let val = |v: &Var| &self.nodes[v.0].value;
        match &node.op {
            Leaf => vec![],
            MatMul(a, b) => {
                let (av, bv) = (val(a), val(b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                let mut ga = DenseArray::zeros(&[0]);
                let mut gb = DenseArray::zeros(&[0]);
                if need[0] {
                    ga = DenseArray::zeros(av.shape());
                    gemm(m, n, k, g.data(), false, bv.data(), true, ga.data_mut(), 0.0);
                }
                if need[1] {
                    gb = DenseArray::zeros(bv.shape());
                    gemm(k, m, n, av.data(), true, g.data(), false, gb.data_mut(), 0.0);
                }
                vec![ga, gb]
            }
            MatMulBt(a, b) => {
                // out = a b^T; a: m x k, b: n x k
                let (av, bv) = (val(a), val(b));
                let (m, k, n) = (av.rows(), av.cols(), bv.rows());
                let mut ga = DenseArray::zeros(&[0]);
                let mut gb = DenseArray::zeros(&[0]);
                if need[0] {
                    ga = DenseArray::zeros(av.shape());
                    gemm(m, n, k, g.data(), false, bv.data(), false, ga.data_mut(), 0.0);
                }
                if need[1] {
                    gb = DenseArray::zeros(bv.shape());
                    gemm(n, m, k, g.data(), true, av.data(), false, gb.data_mut(), 0.0);
                }
                vec![ga, gb]
            }
            Transpose(a) => {
                let t = g.transpose();
                vec![t.reshape(val(a).shape().to_vec()).unwrap()]
            }
            Add(..) => vec![g.clone(), g.clone()],
            Sub(..) => vec![g.clone(), g.map(|x| -x)],
            Mul(a, b) => vec![g.zip_map(val(b), |x, y| x * y), g.zip_map(val(a), |x, y| x * y)],
            AddRow(_, r) => {
                let gr = col_sums(g);
                vec![g.clone(), DenseArray::new(val(r).shape().to_vec(), gr).unwrap()]
            }
            MulRow(a, r) => {
                let (av, rv) = (val(a), val(r));
                let c = av.cols();
                let mut ga = g.clone();
                let mut gr = vec![0.0; c];
                for row in 0..av.rows() {
                    let gi = &mut ga.data_mut()[row * c..(row + 1) * c];
                    let ai = av.row(row);
                    for j in 0..c {
                        gr[j] += gi[j] * ai[j];
                        gi[j] *= rv.data()[j];
                    }
                }
                vec![ga, DenseArray::new(rv.shape().to_vec(), gr).unwrap()]
            }
            Scale(_, c) => vec![g.map(|x| x * c)],
            AddScalar(..) => vec![g.clone()],
            Square(a) => vec![g.zip_map(val(a), |x, y| 2.0 * x * y)],
            Sqrt(_) => vec![g.zip_map(out, |x, s| x * 0.5 / s)],
            Relu(a) => vec![g.zip_map(val(a), |x, y| if y > 0.0 { x } else { 0.0 })],
            Gelu(a) => vec![g.zip_map(val(a), |x, y| x * gelu_grad(y))],
            Tanh(_) => vec![g.zip_map(out, |x, t| x * (1.0 - t * t))],
            Cos(a) => vec![g.zip_map(val(a), |x, y| -x * y.sin())],
            Sin(a) => vec![g.zip_map(val(a), |x, y| x * y.cos())],
            Sum(a) => vec![DenseArray::filled(val(a).shape(), g.item())],
            Mean(a) => {
                let n = val(a).len() as f64;
                vec![DenseArray::filled(val(a).shape(), g.item() / n)]
            }
            SumRows(a) | MeanRows(a) => {
                let av = val(a);
                let scale = if matches!(node.op, MeanRows(..)) {
                    1.0 / av.rows() as f64
                } else {
                    1.0
                };
                let mut ga = DenseArray::zeros(av.shape());
                let c = av.cols();
                for row in ga.data_mut().chunks_mut(c.max(1)) {
                    for (x, &y) in row.iter_mut().zip(g.data()) {
                        *x = y * scale;
                    }
                }
                vec![ga]
            }
            ConcatCols(parts) => {
                let rows = g.rows();
                let mut offset = 0;
                let mut out = Vec::with_capacity(parts.len());
                for p in parts {
                    let pv = val(p);
                    let c = pv.cols();
                    let mut d = Vec::with_capacity(rows * c);
                    for r in 0..rows {
                        d.extend_from_slice(&g.row(r)[offset..offset + c]);
                    }
                    offset += c;
                    out.push(DenseArray::new(pv.shape().to_vec(), d).unwrap());
                }
                out
            }
            ConcatRows(parts) => {
                let mut start = 0;
                parts
                    .iter()
                    .map(|p| {
                        let pv = val(p);
                        let r = pv.rows();
                        let s = g.slice_rows(start, start + r);
                        start += r;
                        s.reshape(pv.shape().to_vec()).unwrap()
                    })
                    .collect()
            }
            SliceRows(a, s, _) => {
                let av = val(a);
                let mut ga = DenseArray::zeros(av.shape());
                let c = av.cols();
                ga.data_mut()[s * c..s * c + g.len()].copy_from_slice(g.data());
                vec![ga]
            }
            BatchStandardize(a, eps) => {
                let av = val(a);
                let (r, c) = (av.rows(), av.cols());
                let (_, var) = column_moments(av);
                let inv: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
                // xhat is the node output
                let mut sum_g = vec![0.0; c];
                let mut sum_gx = vec![0.0; c];
                for row in 0..r {
                    for j in 0..c {
                        sum_g[j] += g.get(row, j);
                        sum_gx[j] += g.get(row, j) * out.get(row, j);
                    }
                }
                let n = r as f64;
                let mut ga = DenseArray::zeros(av.shape());
                for row in 0..r {
                    for j in 0..c {
                        let v = inv[j] / n
                            * (n * g.get(row, j) - sum_g[j] - out.get(row, j) * sum_gx[j]);
                        ga.set(row, j, v);
                    }
                }
                vec![ga]
            }
            Custom(op, inputs) => {
                let vals: Vec<&DenseArray> = inputs.iter().map(val).collect();
                op.backward(&vals, out, g)
            }
        }
    }
}

fn col_sums(a: &DenseArray) -> Vec<f64> {
    let c = a.cols();
    let mut out = vec![0.0; c];
    for row in a.data().chunks(c.max(1)) {
        for (o, x) in out.iter_mut().zip(row) {
            *o += x;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{central_difference, grad_check, SeededRng};

    fn mat(rng: &mut SeededRng, r: usize, c: usize) -> DenseArray {
        DenseArray::matrix(r, c, rng.normal_vec(r * c))
    }

    #[test]
    fn forward_examples() {
        let mut g = Graph::new();
        let x = g.constant(DenseArray::scalar(3.0));
        let y = g.mul(x, x).unwrap();
        assert_eq!(g.scalar(y), 9.0);

        let zero = g.constant(DenseArray::scalar(0.0));
        let z = g.mul(zero, x).unwrap();
        assert_eq!(g.scalar(z), 0.0);

        let v = g.constant(DenseArray::row_vector(vec![1.0, 2.0, 3.0, 6.0]));
        let m = g.mean(v).unwrap();
        assert_eq!(g.scalar(m), 3.0);
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(DenseArray::zeros(&[2, 3]));
        let b = g.constant(DenseArray::zeros(&[3, 2]));
        let err = g.add(a, b).unwrap_err();
        assert_eq!(
            err,
            NumericsError::ShapeMismatch {
                op: "add",
                left: vec![2, 3],
                right: vec![3, 2]
            }
        );
    }

    #[test]
    fn non_finite_is_reported_with_node() {
        let mut g = Graph::new();
        let a = g.constant(DenseArray::scalar(-1.0));
        match g.sqrt(a) {
            Err(NumericsError::NonFinite { node, op }) => {
                assert_eq!(node, 1);
                assert_eq!(op, "sqrt");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn backward_examples() {
        let mut store = ParamStore::new();
        let xid = store.add("x", DenseArray::scalar(3.0));
        let cid = store.add("unused", DenseArray::scalar(1.0));
        let mut g = Graph::new();
        let x = g.param(&store, xid);
        let y = g.square(x).unwrap();
        let grads = g.backward(y).unwrap();
        let pg = grads.param_grads(&g, &store);
        assert_eq!(pg[xid.0].item(), 6.0);
        assert_eq!(pg[cid.0].item(), 0.0);

        // constant with respect to x
        let mut g = Graph::new();
        let _x = g.param(&store, xid);
        let c = g.constant(DenseArray::scalar(5.0));
        let y = g.square(c).unwrap();
        let pg = g.backward(y).unwrap().param_grads(&g, &store);
        assert_eq!(pg[xid.0].item(), 0.0);

        // f(W) = sum(W v)
        let mut store = ParamStore::new();
        let wid = store.add("w", DenseArray::matrix(2, 3, vec![0.5; 6]));
        let mut g = Graph::new();
        let w = g.param(&store, wid);
        let v = g.constant(DenseArray::matrix(3, 1, vec![1.0, -2.0, 4.0]));
        let wv = g.matmul(w, v).unwrap();
        let s = g.sum(wv).unwrap();
        let pg = g.backward(s).unwrap().param_grads(&g, &store);
        assert_eq!(pg[wid.0].data(), &[1.0, -2.0, 4.0, 1.0, -2.0, 4.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let a = g.constant(DenseArray::zeros(&[2, 2]));
        let b = g.square(a).unwrap();
        assert!(matches!(
            g.backward(b),
            Err(NumericsError::NonScalarLoss { .. })
        ));
    }

    #[test]
    fn forward_is_pure_and_tracks_leaf_edits() {
        let mut rng = SeededRng::new(3);
        let mut g = Graph::new();
        let a = g.constant(mat(&mut rng, 3, 4));
        let b = g.constant(mat(&mut rng, 4, 2));
        let c = g.matmul(a, b).unwrap();
        let d = g.tanh(c).unwrap();
        let s = g.mean(d).unwrap();
        let first = g.scalar(s);
        g.forward().unwrap();
        assert_eq!(g.scalar(s).to_bits(), first.to_bits());
        g.set_value(a, DenseArray::zeros(&[3, 4])).unwrap();
        g.forward().unwrap();
        assert_eq!(g.scalar(s), 0.0);
    }

    /// Every primitive rule checked against central differences.
    #[test]
    fn every_op_passes_grad_check() {
        let mut rng = SeededRng::new(11);
        let mut store = ParamStore::new();
        let a = store.add("a", mat(&mut rng, 4, 3));
        let b = store.add("b", mat(&mut rng, 3, 5));
        let c = store.add("c", mat(&mut rng, 4, 3));
        let r = store.add("r", mat(&mut rng, 1, 3));
        let p = store.add("p", DenseArray::matrix(4, 3, (0..12).map(|i| 0.5 + i as f64 * 0.1).collect()));
        let err = grad_check(&store, 1e-5, |g, s| {
            let a = g.param(s, a);
            let b = g.param(s, b);
            let c = g.param(s, c);
            let r = g.param(s, r);
            let p = g.param(s, p);
            let ab = g.matmul(a, b)?;
            let abt = g.matmul_bt(a, c)?;
            let t = g.transpose(abt)?;
            let x = g.add(a, c)?;
            let x = g.sub(x, c)?;
            let x = g.mul(x, c)?;
            let x = g.add_row(x, r)?;
            let x = g.mul_row(x, r)?;
            let x = g.scale(x, 0.7)?;
            let x = g.add_scalar(x, 0.1)?;
            let x1 = g.gelu(x)?;
            let x2 = g.tanh(x)?;
            let x3 = g.cos(x)?;
            let x4 = g.sin(x)?;
            let x5 = g.sqrt(p)?;
            let x6 = g.batch_standardize(x, 1e-5)?;
            let x7 = g.relu(x)?;
            let cat = g.concat_cols(&[x1, x2, x3])?;
            let cat2 = g.concat_rows(&[x4, x5, x6, x7])?;
            let sl = g.slice_rows(cat2, 2, 9)?;
            let m1 = g.mean_rows(cat)?;
            let m2 = g.sum_rows(sl)?;
            let sq = g.square(ab)?;
            let l1 = g.mean(sq)?;
            let l2 = g.sum(m1)?;
            let l3 = g.mean(m2)?;
            let tt = g.square(t)?;
            let l4 = g.sum(tt)?;
            let l = g.add(l1, l2)?;
            let l = g.add(l, l3)?;
            g.add(l, l4)
        })
        .unwrap();
        assert!(err < 1e-6, "max relative error {err}");
    }

    #[test]
    fn quadratic_grad_check_is_tight() {
        let mut store = ParamStore::new();
        let x = store.add("x", DenseArray::row_vector(vec![1.0, -2.0, 0.5]));
        let err = grad_check(&store, 1e-5, |g, s| {
            let x = g.param(s, x);
            let q = g.square(x)?;
            let q = g.scale(q, 3.0)?;
            g.sum(q)
        })
        .unwrap();
        assert!(err < 1e-6);
        // the oracle itself on f(x) = 3x^2 at x=1
        let d = central_difference(|v| 3.0 * v * v, 1.0, 1e-5);
        assert!((d - 6.0).abs() < 1e-8);
    }

    #[test]
    fn backward_is_linear_in_losses() {
        let mut rng = SeededRng::new(5);
        let mut store = ParamStore::new();
        let w = store.add("w", mat(&mut rng, 3, 3));
        let x = mat(&mut rng, 5, 3);
        let build = |which: u8| {
            let mut g = Graph::new();
            let wv = g.param(&store, w);
            let xv = g.constant(x.clone());
            let h = g.matmul(xv, wv).unwrap();
            let h = g.tanh(h).unwrap();
            let sq = g.square(h).unwrap();
            let l1 = g.mean(sq).unwrap();
            let cs = g.cos(h).unwrap();
            let l2 = g.sum(cs).unwrap();
            let loss = match which {
                0 => l1,
                1 => l2,
                _ => g.add(l1, l2).unwrap(),
            };
            let grads = g.backward(loss).unwrap();
            grads.param_grads(&g, &store).remove(w.0)
        };
        let (g1, g2, g12) = (build(0), build(1), build(2));
        for i in 0..g12.len() {
            assert!((g1.data()[i] + g2.data()[i] - g12.data()[i]).abs() < 1e-12);
        }
    }
}
