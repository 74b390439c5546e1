use super::{DiffError, Tensor};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Elementwise operations. Binary variants accept equal shapes or one
/// single-element operand.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ElementwiseOp {
    Add,
    Sub,
    Mul,
    Exp,
    Log,
    Sigmoid,
    Relu,
    Clamp { min: f64, max: f64 },
}

impl ElementwiseOp {
    fn is_binary(self) -> bool {
        matches!(self, Self::Add | Self::Sub | Self::Mul)
    }

    fn name(self) -> &'static str {
        match self {
            Self::Add => "add",
            Self::Sub => "sub",
            Self::Mul => "mul",
            Self::Exp => "exp",
            Self::Log => "log",
            Self::Sigmoid => "sigmoid",
            Self::Relu => "relu",
            Self::Clamp { .. } => "clamp",
        }
    }
}

/// Inputs handed to [`Function::backward`].
pub struct BackwardContext<'a> {
    pub inputs: &'a [&'a Tensor],
    pub output: &'a Tensor,
    pub grad_output: &'a Tensor,
    /// `needs_grad[i]` is false when input `i` does not lead to any
    /// gradient-requiring leaf; implementations may skip that input.
    pub needs_grad: &'a [bool],
}

/// A differentiable operation with a hand-written vector-Jacobian product.
///
/// The forward value is computed by the caller and passed to
/// [`Graph::custom`]; the implementor keeps whatever it needs for backward.
pub trait Function: Send {
    fn name(&self) -> &str;

    /// One entry per input. `None` means "no gradient" and is only allowed
    /// where `needs_grad` is false.
    fn backward(&self, ctx: &BackwardContext<'_>) -> Vec<Option<Tensor>>;
}

enum Op {
    Leaf,
    Elementwise(ElementwiseOp),
    Scale(f64),
    Abs,
    MatMul,
    Sum,
    Mean,
    Reshape,
    Custom(Box<dyn Function>),
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    inputs: Vec<Var>,
    op: Op,
}

/// Reverse-mode tape. Nodes are appended in creation order, which is a
/// topological order because every input exists before its consumer.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
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

    /// A leaf that receives gradients.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, true, Vec::new(), Op::Leaf)
    }

    /// A leaf that never receives gradients.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, false, Vec::new(), Op::Leaf)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Vec::new(), Op::Leaf)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, inputs: Vec<Var>, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            inputs,
            op,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn any_requires_grad(&self, inputs: &[Var]) -> bool {
        inputs.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn record(&mut self, value: Tensor, inputs: Vec<Var>, op: Op) -> Var {
        let requires_grad = self.any_requires_grad(&inputs);
        if requires_grad {
            self.push(value, true, inputs, op)
        } else {
            self.push(value, false, Vec::new(), Op::Leaf)
        }
    }

    pub fn elementwise(&mut self, op: ElementwiseOp, a: Var, b: Option<Var>) -> Result<Var, DiffError> {
        let av = &self.nodes[a.0].value;
        match (op.is_binary(), b) {
            (true, Some(b)) => {
                let bv = &self.nodes[b.0].value;
                let out = binary_forward(op, av, bv)?;
                Ok(self.record(out, vec![a, b], Op::Elementwise(op)))
            }
            (false, None) => {
                let out = unary_forward(op, av);
                Ok(self.record(out, vec![a], Op::Elementwise(op)))
            }
            (true, None) => Err(DiffError::Arity {
                op: op.name(),
                expected: 2,
            }),
            (false, Some(_)) => Err(DiffError::Arity {
                op: op.name(),
                expected: 1,
            }),
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.elementwise(ElementwiseOp::Add, a, Some(b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.elementwise(ElementwiseOp::Sub, a, Some(b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.elementwise(ElementwiseOp::Mul, a, Some(b))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(ElementwiseOp::Exp, a)
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(ElementwiseOp::Log, a)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(ElementwiseOp::Sigmoid, a)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(ElementwiseOp::Relu, a)
    }

    pub fn clamp(&mut self, a: Var, min: f64, max: f64) -> Var {
        self.unary(ElementwiseOp::Clamp { min, max }, a)
    }

    fn unary(&mut self, op: ElementwiseOp, a: Var) -> Var {
        let out = unary_forward(op, &self.nodes[a.0].value);
        self.record(out, vec![a], Op::Elementwise(op))
    }

    /// Multiplication by a compile-time constant.
    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let out = self.nodes[a.0].value.map(|v| v * factor);
        self.record(out, vec![a], Op::Scale(factor))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let out = self.nodes[a.0].value.map(f64::abs);
        self.record(out, vec![a], Op::Abs)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        let (m, k) = matrix_dims(av, "matmul")?;
        let (k2, n) = matrix_dims(bv, "matmul")?;
        if k != k2 {
            return Err(DiffError::ShapeMismatch {
                op: "matmul",
                left: av.shape().to_vec(),
                right: bv.shape().to_vec(),
            });
        }
        let out = matmul_raw(av.data(), bv.data(), m, k, n);
        let out = Tensor::new([m, n], out)?;
        Ok(self.record(out, vec![a, b], Op::MatMul))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.nodes[a.0].value.sum());
        self.record(out, vec![a], Op::Sum)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = &self.nodes[a.0].value;
        let out = Tensor::scalar(v.sum() / v.len().max(1) as f64);
        self.record(out, vec![a], Op::Mean)
    }

    pub fn reshape(&mut self, a: Var, shape: impl Into<Vec<usize>>) -> Result<Var, DiffError> {
        let out = self.nodes[a.0].value.reshape(shape)?;
        Ok(self.record(out, vec![a], Op::Reshape))
    }

    /// Records an operation whose forward value was computed externally.
    pub fn custom(&mut self, function: impl Function + 'static, inputs: &[Var], output: Tensor) -> Var {
        self.record(output, inputs.to_vec(), Op::Custom(Box::new(function)))
    }

    /// Accumulated gradient of a leaf. Leaves that require gradients but were
    /// not reached report zeros; non-differentiable values report `None`.
    pub fn grad(&self, var: Var) -> Option<Tensor> {
        let node = &self.nodes[var.0];
        if !node.requires_grad || !matches!(node.op, Op::Leaf) {
            return None;
        }
        let data = self.grads[var.0].clone().unwrap_or_else(|| vec![0.0; node.value.len()]);
        Some(Tensor::new(node.value.shape().to_vec(), data).expect("gradient shape"))
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    /// Back-propagates from a single-element `root`, adding into every
    /// reachable gradient-requiring leaf.
    pub fn backward(&mut self, root: Var) -> Result<(), DiffError> {
        let root_value = &self.nodes[root.0].value;
        if !root_value.is_scalar() {
            return Err(DiffError::NotScalar {
                shape: root_value.shape().to_vec(),
            });
        }
        if !self.nodes[root.0].requires_grad {
            return Ok(());
        }
        let mut pending: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        pending[root.0] = Some(vec![1.0]);

        for idx in (0..=root.0).rev() {
            let Some(grad) = pending[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                match &mut self.grads[idx] {
                    Some(acc) => acc.iter_mut().zip(&grad).for_each(|(a, g)| *a += g),
                    slot @ None => *slot = Some(grad),
                }
                continue;
            }
            let grad_tensor = Tensor::new(node.value.shape().to_vec(), grad)?;
            let input_grads = self.local_backward(idx, &grad_tensor)?;
            for (input, g) in node.inputs.iter().zip(input_grads) {
                let Some(g) = g else { continue };
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                let expected = self.nodes[input.0].value.len();
                if g.len() != expected {
                    return Err(DiffError::GradientShape {
                        op: self.op_name(idx),
                        expected: self.nodes[input.0].value.shape().to_vec(),
                        got: g.shape().to_vec(),
                    });
                }
                match &mut pending[input.0] {
                    Some(acc) => acc.iter_mut().zip(g.data()).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(g.into_vec()),
                }
            }
        }
        Ok(())
    }

    fn op_name(&self, idx: usize) -> String {
        match &self.nodes[idx].op {
            Op::Leaf => "leaf".into(),
            Op::Elementwise(op) => op.name().into(),
            Op::Scale(_) => "scale".into(),
            Op::Abs => "abs".into(),
            Op::MatMul => "matmul".into(),
            Op::Sum => "sum".into(),
            Op::Mean => "mean".into(),
            Op::Reshape => "reshape".into(),
            Op::Custom(f) => f.name().into(),
        }
    }

    fn local_backward(&self, idx: usize, grad: &Tensor) -> Result<Vec<Option<Tensor>>, DiffError> {
        let node = &self.nodes[idx];
        let input = |i: usize| &self.nodes[node.inputs[i].0].value;
        let needs = |i: usize| self.nodes[node.inputs[i].0].requires_grad;
        let g = grad.data();
        let out = match &node.op {
            Op::Leaf => unreachable!("leaves are handled by the caller"),
            Op::Elementwise(op) if op.is_binary() => {
                let (a, b) = (input(0), input(1));
                let (ga, gb) = binary_backward(*op, a, b, g);
                vec![needs(0).then(|| reduce_to(ga, a)), needs(1).then(|| reduce_to(gb, b))]
            }
            Op::Elementwise(op) => {
                let x = input(0);
                let y = &node.value;
                let d: Vec<f64> = x
                    .data()
                    .iter()
                    .zip(y.data())
                    .zip(g)
                    .map(|((&x, &y), &g)| g * unary_derivative(*op, x, y))
                    .collect();
                vec![Some(Tensor::new(x.shape().to_vec(), d)?)]
            }
            Op::Scale(c) => vec![Some(grad.map(|v| v * c))],
            Op::Abs => {
                let x = input(0);
                let d = x
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&x, &g)| {
                        if x > 0.0 {
                            g
                        } else if x < 0.0 {
                            -g
                        } else {
                            0.0
                        }
                    })
                    .collect();
                vec![Some(Tensor::new(x.shape().to_vec(), d)?)]
            }
            Op::MatMul => {
                let (a, b) = (input(0), input(1));
                let (m, k) = matrix_dims(a, "matmul")?;
                let (_, n) = matrix_dims(b, "matmul")?;
                let ga = needs(0)
                    .then(|| {
                        // dA = G Bᵀ
                        let bt = transpose(b.data(), k, n);
                        Tensor::new([m, k], matmul_raw(g, &bt, m, n, k))
                    })
                    .transpose()?;
                let gb = needs(1)
                    .then(|| {
                        // dB = Aᵀ G
                        let at = transpose(a.data(), m, k);
                        Tensor::new([k, n], matmul_raw(&at, g, k, m, n))
                    })
                    .transpose()?;
                vec![ga, gb]
            }
            Op::Sum => {
                let x = input(0);
                vec![Some(Tensor::full(x.shape().to_vec(), g[0]))]
            }
            Op::Mean => {
                let x = input(0);
                vec![Some(Tensor::full(x.shape().to_vec(), g[0] / x.len().max(1) as f64))]
            }
            Op::Reshape => vec![Some(grad.reshape(input(0).shape().to_vec())?)],
            Op::Custom(f) => {
                let inputs: Vec<&Tensor> = node.inputs.iter().map(|v| &self.nodes[v.0].value).collect();
                let needs_grad: Vec<bool> = (0..node.inputs.len()).map(needs).collect();
                let ctx = BackwardContext {
                    inputs: &inputs,
                    output: &node.value,
                    grad_output: grad,
                    needs_grad: &needs_grad,
                };
                let grads = f.backward(&ctx);
                if grads.len() != node.inputs.len() {
                    return Err(DiffError::Arity {
                        op: "custom backward",
                        expected: node.inputs.len(),
                    });
                }
                grads
            }
        };
        Ok(out)
    }
}

fn matrix_dims(t: &Tensor, op: &'static str) -> Result<(usize, usize), DiffError> {
    match t.shape() {
        [m, n] => Ok((*m, *n)),
        other => Err(DiffError::NotMatrix {
            op,
            shape: other.to_vec(),
        }),
    }
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    out
}

fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

fn binary_forward(op: ElementwiseOp, a: &Tensor, b: &Tensor) -> Result<Tensor, DiffError> {
    let f = |x: f64, y: f64| match op {
        ElementwiseOp::Add => x + y,
        ElementwiseOp::Sub => x - y,
        ElementwiseOp::Mul => x * y,
        _ => unreachable!(),
    };
    if a.shape() == b.shape() {
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(a.shape().to_vec(), data)
    } else if b.is_scalar() {
        let y = b.data()[0];
        Ok(a.map(|x| f(x, y)))
    } else if a.is_scalar() {
        let x = a.data()[0];
        Ok(b.map(|y| f(x, y)))
    } else {
        Err(DiffError::ShapeMismatch {
            op: op.name(),
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        })
    }
}

/// Gradients in the broadcast (output) shape; `reduce_to` folds them back.
fn binary_backward(op: ElementwiseOp, a: &Tensor, b: &Tensor, g: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let at = |i: usize| if a.is_scalar() { a.data()[0] } else { a.data()[i] };
    let bt = |i: usize| if b.is_scalar() { b.data()[0] } else { b.data()[i] };
    match op {
        ElementwiseOp::Add => (g.to_vec(), g.to_vec()),
        ElementwiseOp::Sub => (g.to_vec(), g.iter().map(|v| -v).collect()),
        ElementwiseOp::Mul => (
            g.iter().enumerate().map(|(i, &g)| g * bt(i)).collect(),
            g.iter().enumerate().map(|(i, &g)| g * at(i)).collect(),
        ),
        _ => unreachable!(),
    }
}

fn reduce_to(grad: Vec<f64>, target: &Tensor) -> Tensor {
    if grad.len() == target.len() {
        Tensor::new(target.shape().to_vec(), grad).expect("same length")
    } else {
        Tensor::new(target.shape().to_vec(), vec![grad.iter().sum()]).expect("scalar operand")
    }
}

fn unary_forward(op: ElementwiseOp, a: &Tensor) -> Tensor {
    match op {
        ElementwiseOp::Exp => a.map(f64::exp),
        ElementwiseOp::Log => a.map(f64::ln),
        ElementwiseOp::Sigmoid => a.map(sigmoid),
        ElementwiseOp::Relu => a.map(|x| x.max(0.0)),
        ElementwiseOp::Clamp { min, max } => a.map(|x| x.clamp(min, max)),
        _ => unreachable!("binary op in unary position"),
    }
}

fn unary_derivative(op: ElementwiseOp, x: f64, y: f64) -> f64 {
    match op {
        ElementwiseOp::Exp => y,
        ElementwiseOp::Log => 1.0 / x,
        ElementwiseOp::Sigmoid => y * (1.0 - y),
        ElementwiseOp::Relu => {
            if x > 0.0 {
                1.0
            } else {
                0.0
            }
        }
        ElementwiseOp::Clamp { min, max } => {
            if x > min && x < max {
                1.0
            } else {
                0.0
            }
        }
        _ => unreachable!(),
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
