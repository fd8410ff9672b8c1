//! The Wengert tape: forward ops append nodes, `backward` replays them in
//! reverse and accumulates adjoints.

use super::{AutodiffError, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// The operations a tape can record.
///
/// Payload-carrying variants hold static configuration (selection indices, a
/// fixed scale factor); tensor operands always arrive through the input node
/// list.
#[derive(Clone, Debug, PartialEq)]
pub enum OpKind {
    /// Elementwise sum of two same-shape tensors.
    Add,
    /// Row-wise bias addition: `[n, d]` matrix plus length-`d` vector.
    AddBias,
    /// Elementwise difference.
    Sub,
    /// Elementwise product.
    Mul,
    /// Matrix product `[n, k] x [k, m]`.
    MatMul,
    Relu,
    Tanh,
    Exp,
    Log,
    Square,
    /// Sum of all entries, yielding a scalar.
    Sum,
    /// Mean of all entries, yielding a scalar.
    Mean,
    /// Multiplication by a fixed scalar constant.
    Scale(f64),
    /// Column-wise concatenation of two matrices with equal row counts.
    Concat,
    /// Row gather; indices may repeat, adjoints scatter-add back.
    RowSelect(Vec<usize>),
    /// Row-wise softmax.
    Softmax,
    /// Row-wise log-softmax.
    LogSoftmax,
    /// All-pairs Euclidean distances between two row sets.
    PairwiseL2,
}

impl OpKind {
    fn name(&self) -> &'static str {
        match self {
            OpKind::Add => "add",
            OpKind::AddBias => "add_bias",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::MatMul => "matmul",
            OpKind::Relu => "relu",
            OpKind::Tanh => "tanh",
            OpKind::Exp => "exp",
            OpKind::Log => "log",
            OpKind::Square => "square",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::Scale(_) => "scale",
            OpKind::Concat => "concat",
            OpKind::RowSelect(_) => "row-select",
            OpKind::Softmax => "softmax",
            OpKind::LogSoftmax => "log-softmax",
            OpKind::PairwiseL2 => "pairwise_l2",
        }
    }

    fn arity(&self) -> usize {
        match self {
            OpKind::Add
            | OpKind::AddBias
            | OpKind::Sub
            | OpKind::Mul
            | OpKind::MatMul
            | OpKind::Concat
            | OpKind::PairwiseL2 => 2,
            _ => 1,
        }
    }
}

struct Node {
    value: Tensor,
    op: Option<(OpKind, Vec<NodeId>)>,
    is_param: bool,
}

/// Gradients returned by [`Tape::backward`], indexed by node id.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// The adjoint of `id`, if the node was reached from the loss.
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.index()).and_then(Option::as_ref)
    }

    /// The adjoint of `id`, or a zero tensor of the given shape when the node
    /// did not influence the loss.
    pub fn get_or_zeros(&self, id: NodeId, shape: &[usize]) -> Tensor {
        match self.get(id) {
            Some(g) => g.clone(),
            None => Tensor::zeros(shape),
        }
    }
}

/// A record of forward operations supporting one reverse sweep.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
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

    /// Registers a trainable leaf.
    pub fn param(&mut self, value: Tensor) -> NodeId {
        self.push(value, None, true)
    }

    /// Registers a non-trainable leaf (inputs, targets, frozen weights).
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, None, false)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.index()].value
    }

    pub fn is_param(&self, id: NodeId) -> bool {
        self.nodes[id.index()].is_param
    }

    fn push(&mut self, value: Tensor, op: Option<(OpKind, Vec<NodeId>)>, is_param: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            is_param,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn check_id(&self, id: NodeId) -> Result<(), AutodiffError> {
        if id.index() >= self.nodes.len() {
            return Err(AutodiffError::UnknownNode {
                id: id.index(),
                len: self.nodes.len(),
            });
        }
        Ok(())
    }

    /// Evaluates one operation and records it on the tape.
    pub fn forward_op(&mut self, op: OpKind, inputs: &[NodeId]) -> Result<NodeId, AutodiffError> {
        if inputs.len() != op.arity() {
            return Err(AutodiffError::WrongArity {
                op: op.name(),
                expected: op.arity(),
                got: inputs.len(),
            });
        }
        for &id in inputs {
            self.check_id(id)?;
        }
        let a = self.value(inputs[0]);
        let value = match &op {
            OpKind::Add => a.add(self.value(inputs[1]))?,
            OpKind::AddBias => a.add_bias(self.value(inputs[1]))?,
            OpKind::Sub => a.sub(self.value(inputs[1]))?,
            OpKind::Mul => a.mul(self.value(inputs[1]))?,
            OpKind::MatMul => a.matmul(self.value(inputs[1]))?,
            OpKind::Relu => a.map(|v| v.max(0.0)),
            OpKind::Tanh => a.map(f64::tanh),
            OpKind::Exp => a.map(f64::exp),
            OpKind::Log => {
                if let Some(&bad) = a.data().iter().find(|v| **v <= 0.0) {
                    return Err(AutodiffError::LogDomain { value: bad });
                }
                a.map(f64::ln)
            }
            OpKind::Square => a.map(|v| v * v),
            OpKind::Sum => Tensor::scalar(a.sum_all()),
            OpKind::Mean => Tensor::scalar(a.mean_all()),
            OpKind::Scale(c) => a.scale(*c),
            OpKind::Concat => a.concat_cols(self.value(inputs[1]))?,
            OpKind::RowSelect(indices) => a.select_rows(indices)?,
            OpKind::Softmax => a.softmax_rows()?,
            OpKind::LogSoftmax => a.log_softmax_rows()?,
            OpKind::PairwiseL2 => a.pairwise_l2(self.value(inputs[1]))?,
        };
        if !value.all_finite() {
            return Err(AutodiffError::NonFinite { op: op.name() });
        }
        Ok(self.push(value, Some((op, inputs.to_vec())), false))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        self.forward_op(OpKind::Add, &[a, b])
    }

    pub fn add_bias(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId, AutodiffError> {
        self.forward_op(OpKind::AddBias, &[a, bias])
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        self.forward_op(OpKind::Sub, &[a, b])
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        self.forward_op(OpKind::Mul, &[a, b])
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        self.forward_op(OpKind::MatMul, &[a, b])
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId, AutodiffError> {
        self.forward_op(OpKind::Relu, &[a])
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId, AutodiffError> {
        self.forward_op(OpKind::Tanh, &[a])
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId, AutodiffError> {
        self.forward_op(OpKind::Exp, &[a])
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId, AutodiffError> {
        self.forward_op(OpKind::Log, &[a])
    }

    pub fn square(&mut self, a: NodeId) -> Result<NodeId, AutodiffError> {
        self.forward_op(OpKind::Square, &[a])
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId, AutodiffError> {
        self.forward_op(OpKind::Sum, &[a])
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId, AutodiffError> {
        self.forward_op(OpKind::Mean, &[a])
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId, AutodiffError> {
        self.forward_op(OpKind::Scale(c), &[a])
    }

    pub fn concat(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        self.forward_op(OpKind::Concat, &[a, b])
    }

    pub fn row_select(&mut self, a: NodeId, indices: Vec<usize>) -> Result<NodeId, AutodiffError> {
        self.forward_op(OpKind::RowSelect(indices), &[a])
    }

    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId, AutodiffError> {
        self.forward_op(OpKind::Softmax, &[a])
    }

    pub fn log_softmax(&mut self, a: NodeId) -> Result<NodeId, AutodiffError> {
        self.forward_op(OpKind::LogSoftmax, &[a])
    }

    pub fn pairwise_l2(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        self.forward_op(OpKind::PairwiseL2, &[a, b])
    }

    /// Reverse sweep from a scalar loss node. Returns the adjoint of every
    /// node the loss depends on, parameters and constants alike.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients, AutodiffError> {
        self.check_id(loss)?;
        let loss_value = self.value(loss);
        if !loss_value.is_scalar() {
            return Err(AutodiffError::NonScalarLoss {
                shape: loss_value.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.index()] = Some(Tensor::new(
            loss_value.shape().to_vec(),
            vec![1.0],
        )?);
        for idx in (0..=loss.index()).rev() {
            let Some(d) = grads[idx].take() else {
                continue;
            };
            if let Some((op, inputs)) = &self.nodes[idx].op {
                self.propagate(op, inputs, &self.nodes[idx].value, &d, &mut grads)?;
            }
            grads[idx] = Some(d);
        }
        Ok(Gradients { grads })
    }

    fn propagate(
        &self,
        op: &OpKind,
        inputs: &[NodeId],
        out_value: &Tensor,
        d: &Tensor,
        grads: &mut [Option<Tensor>],
    ) -> Result<(), AutodiffError> {
        let accumulate = |grads: &mut [Option<Tensor>], id: NodeId, add: Tensor| -> Result<(), AutodiffError> {
            // Constant leaves absorb no gradient: they are frozen by
            // definition, and skipping them keeps frozen networks cheap.
            let node = &self.nodes[id.index()];
            if node.op.is_none() && !node.is_param {
                return Ok(());
            }
            let slot = &mut grads[id.index()];
            match slot {
                Some(existing) => *existing = existing.add(&add)?,
                None => *slot = Some(add),
            }
            Ok(())
        };
        match op {
            OpKind::Add => {
                accumulate(grads, inputs[0], d.clone())?;
                accumulate(grads, inputs[1], d.clone())?;
            }
            OpKind::AddBias => {
                accumulate(grads, inputs[0], d.clone())?;
                accumulate(grads, inputs[1], d.col_sums()?)?;
            }
            OpKind::Sub => {
                accumulate(grads, inputs[0], d.clone())?;
                accumulate(grads, inputs[1], d.scale(-1.0))?;
            }
            OpKind::Mul => {
                accumulate(grads, inputs[0], d.mul(self.value(inputs[1]))?)?;
                accumulate(grads, inputs[1], d.mul(self.value(inputs[0]))?)?;
            }
            OpKind::MatMul => {
                // C = A B: dA = dC B^T, dB = A^T dC.
                accumulate(grads, inputs[0], d.matmul_nt(self.value(inputs[1]))?)?;
                accumulate(grads, inputs[1], self.value(inputs[0]).matmul_tn(d)?)?;
            }
            OpKind::Relu => {
                let x = self.value(inputs[0]);
                let mut g = d.clone();
                // Subgradient 0 at the kink: x == 0 passes nothing through.
                for (gv, &xv) in g.data_mut().iter_mut().zip(x.data()) {
                    if xv <= 0.0 {
                        *gv = 0.0;
                    }
                }
                accumulate(grads, inputs[0], g)?;
            }
            OpKind::Tanh => {
                let mut g = d.clone();
                for (gv, &yv) in g.data_mut().iter_mut().zip(out_value.data()) {
                    *gv *= 1.0 - yv * yv;
                }
                accumulate(grads, inputs[0], g)?;
            }
            OpKind::Exp => {
                accumulate(grads, inputs[0], d.mul(out_value)?)?;
            }
            OpKind::Log => {
                let x = self.value(inputs[0]);
                let mut g = d.clone();
                for (gv, &xv) in g.data_mut().iter_mut().zip(x.data()) {
                    *gv /= xv;
                }
                accumulate(grads, inputs[0], g)?;
            }
            OpKind::Square => {
                let x = self.value(inputs[0]);
                let mut g = d.clone();
                for (gv, &xv) in g.data_mut().iter_mut().zip(x.data()) {
                    *gv *= 2.0 * xv;
                }
                accumulate(grads, inputs[0], g)?;
            }
            OpKind::Sum => {
                let shape = self.value(inputs[0]).shape().to_vec();
                accumulate(grads, inputs[0], Tensor::full(&shape, d.scalar_value()))?;
            }
            OpKind::Mean => {
                let src = self.value(inputs[0]);
                let g = Tensor::full(src.shape(), d.scalar_value() / src.numel() as f64);
                accumulate(grads, inputs[0], g)?;
            }
            OpKind::Scale(c) => {
                accumulate(grads, inputs[0], d.scale(*c))?;
            }
            OpKind::Concat => {
                let (n, c1) = self.value(inputs[0]).dims2("concat")?;
                let (_, c2) = self.value(inputs[1]).dims2("concat")?;
                let mut left = Vec::with_capacity(n * c1);
                let mut right = Vec::with_capacity(n * c2);
                for row in d.data().chunks(c1 + c2) {
                    left.extend_from_slice(&row[..c1]);
                    right.extend_from_slice(&row[c1..]);
                }
                accumulate(grads, inputs[0], Tensor::new(vec![n, c1], left)?)?;
                accumulate(grads, inputs[1], Tensor::new(vec![n, c2], right)?)?;
            }
            OpKind::RowSelect(indices) => {
                let src = self.value(inputs[0]);
                let (_, cols) = src.dims2("row-select")?;
                let mut g = Tensor::zeros(src.shape());
                for (&i, d_row) in indices.iter().zip(d.data().chunks(cols)) {
                    let dst = &mut g.data_mut()[i * cols..(i + 1) * cols];
                    for (o, &v) in dst.iter_mut().zip(d_row) {
                        *o += v;
                    }
                }
                accumulate(grads, inputs[0], g)?;
            }
            OpKind::Softmax => {
                let (_, cols) = out_value.dims2("softmax")?;
                let mut g = d.clone();
                for (g_row, y_row) in g.data_mut().chunks_mut(cols).zip(out_value.data().chunks(cols)) {
                    let dot: f64 = g_row.iter().zip(y_row).map(|(&dv, &yv)| dv * yv).sum();
                    for (gv, &yv) in g_row.iter_mut().zip(y_row) {
                        *gv = yv * (*gv - dot);
                    }
                }
                accumulate(grads, inputs[0], g)?;
            }
            OpKind::LogSoftmax => {
                let (_, cols) = out_value.dims2("log-softmax")?;
                let mut g = d.clone();
                for (g_row, y_row) in g.data_mut().chunks_mut(cols).zip(out_value.data().chunks(cols)) {
                    let dsum: f64 = g_row.iter().sum();
                    for (gv, &yv) in g_row.iter_mut().zip(y_row) {
                        *gv -= yv.exp() * dsum;
                    }
                }
                accumulate(grads, inputs[0], g)?;
            }
            OpKind::PairwiseL2 => {
                let a = self.value(inputs[0]);
                let b = self.value(inputs[1]);
                let (n1, dim) = a.dims2("pairwise_l2")?;
                let (n2, _) = b.dims2("pairwise_l2")?;
                let mut ga = Tensor::zeros(a.shape());
                let mut gb = Tensor::zeros(b.shape());
                for k in 0..n1 {
                    for l in 0..n2 {
                        let dist = out_value.data()[k * n2 + l];
                        // Coincident rows get subgradient 0.
                        if dist == 0.0 {
                            continue;
                        }
                        let coef = d.data()[k * n2 + l] / dist;
                        if coef == 0.0 {
                            continue;
                        }
                        for j in 0..dim {
                            let diff = a.data()[k * dim + j] - b.data()[l * dim + j];
                            ga.data_mut()[k * dim + j] += coef * diff;
                            gb.data_mut()[l * dim + j] -= coef * diff;
                        }
                    }
                }
                accumulate(grads, inputs[0], ga)?;
                accumulate(grads, inputs[1], gb)?;
            }
        }
        Ok(())
    }
}

/// Checks an analytic gradient against central finite differences.
///
/// `build` must deterministically construct a scalar loss from the given
/// parameter nodes (any sampling has to be baked into captured constants).
/// The parameters are registered in order; the function returns the maximum
/// over all parameter coordinates of
/// `|analytic - central_difference| / max(1, |central_difference|)`.
pub fn finite_diff_check<F>(build: F, params: &[Tensor], h: f64) -> Result<f64, AutodiffError>
where
    F: Fn(&mut Tape, &[NodeId]) -> Result<NodeId, AutodiffError>,
{
    let eval = |values: &[Tensor]| -> Result<(f64, Option<Gradients>, Vec<NodeId>), AutodiffError> {
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = values.iter().map(|t| tape.param(t.clone())).collect();
        let loss = build(&mut tape, &ids)?;
        let value = tape.value(loss);
        if !value.is_scalar() {
            return Err(AutodiffError::NonScalarLoss {
                shape: value.shape().to_vec(),
            });
        }
        let v = value.scalar_value();
        let grads = tape.backward(loss)?;
        Ok((v, Some(grads), ids))
    };

    let (_, grads, ids) = eval(params)?;
    let grads = grads.expect("gradients computed");
    let analytic: Vec<Tensor> = ids
        .iter()
        .zip(params)
        .map(|(&id, p)| grads.get_or_zeros(id, p.shape()))
        .collect();

    let mut worst: f64 = 0.0;
    let mut perturbed: Vec<Tensor> = params.to_vec();
    for (pi, param) in params.iter().enumerate() {
        for ci in 0..param.numel() {
            let base = param.data()[ci];
            perturbed[pi].data_mut()[ci] = base + h;
            let f_plus = value_only(&build, &perturbed)?;
            perturbed[pi].data_mut()[ci] = base - h;
            let f_minus = value_only(&build, &perturbed)?;
            perturbed[pi].data_mut()[ci] = base;
            let fd = (f_plus - f_minus) / (2.0 * h);
            let a = analytic[pi].data()[ci];
            if !fd.is_finite() || !a.is_finite() {
                return Err(AutodiffError::FiniteDiffNonFinite { param: pi, coord: ci });
            }
            let rel = (a - fd).abs() / fd.abs().max(1.0);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}

fn value_only<F>(build: &F, params: &[Tensor]) -> Result<f64, AutodiffError>
where
    F: Fn(&mut Tape, &[NodeId]) -> Result<NodeId, AutodiffError>,
{
    let mut tape = Tape::new();
    let ids: Vec<NodeId> = params.iter().map(|t| tape.param(t.clone())).collect();
    let loss = build(&mut tape, &ids)?;
    Ok(tape.value(loss).scalar_value())
}
