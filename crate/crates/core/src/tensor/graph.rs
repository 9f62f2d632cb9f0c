use super::conv::{self, ConvGeom};
use super::{numel, Element, Tensor};
use crate::error::{MastError, Result};

/// Handle to a value recorded on a [`Graph`].
///
/// Handles are invalidated when the graph is cleared; using a stale handle is
/// a contract error rather than silently aliasing a new node.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    id: usize,
    generation: u32,
}

impl Var {
    pub fn index(&self) -> usize {
        self.id
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum UnaryKind {
    Relu,
    Sqrt,
    Log,
    Exp,
    Square,
    Neg,
    /// `max(x, c)`; the gradient at a tie goes to the constant.
    MaxScalar(f64),
    AddScalar(f64),
    MulScalar(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceKind {
    Sum,
    Mean,
    /// Population variance (denominator = number of reduced elements).
    Var,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Broadcast {
    None,
    /// Left operand is a single value.
    Left,
    /// Right operand is a single value.
    Right,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Unary {
        x: usize,
        kind: UnaryKind,
    },
    Binary {
        a: usize,
        b: usize,
        kind: BinaryKind,
        bcast: Broadcast,
    },
    MatMul {
        a: usize,
        b: usize,
    },
    Transpose {
        x: usize,
    },
    Reshape {
        x: usize,
    },
    Conv2d {
        x: usize,
        kernel: usize,
        bias: Option<usize>,
        geom: ConvGeom,
    },
    Reduce {
        x: usize,
        kind: ReduceKind,
        map: Vec<usize>,
        count: usize,
        means: Vec<T>,
    },
    ExpandRows {
        x: usize,
    },
    SelectColumns {
        x: usize,
        cols: Vec<usize>,
    },
    ConcatColumns {
        a: usize,
        b: usize,
    },
    SliceRows {
        x: usize,
        start: usize,
    },
    Gem {
        x: usize,
        p: usize,
        eps: f64,
        plane: usize,
    },
}

#[derive(Debug)]
struct Node<T> {
    shape: Vec<usize>,
    value: Vec<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients of a scalar loss with respect to every trainable leaf.
#[derive(Debug)]
pub struct Gradients<T> {
    generation: u32,
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Element> Gradients<T> {
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        if var.generation != self.generation {
            return None;
        }
        self.grads.get(var.id).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor<T>> {
        if var.generation != self.generation {
            return None;
        }
        self.grads.get_mut(var.id).and_then(|g| g.take())
    }

    /// Moves the gradient for `var` into `param.grad`, replacing any previous one.
    pub fn write_to(&mut self, var: Var, param: &mut Tensor<T>) {
        param.grad = self.take(var).map(Tensor::into_data);
    }
}

/// Dynamic reverse-mode tape.
///
/// Every operation evaluates eagerly and appends a node; node order is a
/// topological order of the computation. A graph is single-threaded; build
/// independent graphs for independent computations.
#[derive(Debug)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    generation: u32,
    strict: bool,
    validate: bool,
}

impl<T: Element> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// `(pooled, max, mean((x/max)^p))` for one spatial plane, with entries
/// floored at `eps`.
fn gem_stats<T: Element>(xs: &[T], p: T, eps: T) -> (T, T, T) {
    let max = xs.iter().fold(eps, |m, &v| if v > m { v } else { m });
    let n = T::f(xs.len() as f64);
    let s = xs
        .iter()
        .map(|&v| (if v > eps { v } else { eps } / max).powf(p))
        .sum::<T>()
        / n;
    (max * s.powf(T::one() / p), max, s)
}

fn axpy_into<T: Element>(dst: &mut [T], src: &[T]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d = *d + *s;
    }
}

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            generation: 0,
            strict: false,
            validate: false,
        }
    }

    /// Strict mode turns division by an exact zero into a domain error.
    pub fn with_strict(mut self, strict: bool) -> Self {
        self.strict = strict;
        self
    }

    /// Validation mode checks every produced value for NaN/Inf.
    pub fn with_validation(mut self, validate: bool) -> Self {
        self.validate = validate;
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops all recorded nodes; existing handles become stale.
    pub fn clear(&mut self) {
        self.nodes.clear();
        self.generation = self.generation.wrapping_add(1);
    }

    fn node(&self, v: Var) -> Result<&Node<T>> {
        if v.generation != self.generation || v.id >= self.nodes.len() {
            return Err(MastError::contract("stale or foreign graph handle"));
        }
        Ok(&self.nodes[v.id])
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<T>, op: Op<T>, requires_grad: bool, name: &'static str) -> Result<Var> {
        debug_assert_eq!(numel(&shape), value.len());
        if self.validate && !value.iter().all(|v| v.is_finite()) {
            return Err(MastError::NonFinite { op: name });
        }
        let id = self.nodes.len();
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Ok(Var {
            id,
            generation: self.generation,
        })
    }

    fn rg(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].requires_grad)
    }

    /// Records a tensor as a leaf. It is trainable iff `tensor.requires_grad`.
    pub fn leaf(&mut self, tensor: &Tensor<T>) -> Result<Var> {
        self.push(
            tensor.shape().to_vec(),
            tensor.data().to_vec(),
            Op::Leaf,
            tensor.requires_grad,
            "leaf",
        )
    }

    /// Records a trainable leaf regardless of the tensor's flag.
    pub fn param(&mut self, tensor: &Tensor<T>) -> Result<Var> {
        self.push(tensor.shape().to_vec(), tensor.data().to_vec(), Op::Leaf, true, "param")
    }

    /// Records a non-trainable leaf, taking ownership of the buffer.
    pub fn constant(&mut self, tensor: Tensor<T>) -> Result<Var> {
        let shape = tensor.shape().to_vec();
        self.push(shape, tensor.into_data(), Op::Leaf, false, "constant")
    }

    pub fn scalar(&mut self, value: T) -> Result<Var> {
        self.constant(Tensor::scalar(value))
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.node(v).expect("valid handle").value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).expect("valid handle").shape
    }

    pub fn tensor(&self, v: Var) -> Tensor<T> {
        let n = self.node(v).expect("valid handle");
        Tensor::new(n.shape.clone(), n.value.clone()).expect("node shape is consistent")
    }

    pub fn item(&self, v: Var) -> Result<T> {
        let n = self.node(v)?;
        if n.value.len() != 1 {
            return Err(MastError::contract(format!("item() on shape {:?}", n.shape)));
        }
        Ok(n.value[0])
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.node(v).map(|n| n.requires_grad).unwrap_or(false)
    }

    // ----- elementwise -------------------------------------------------

    pub fn unary(&mut self, kind: UnaryKind, x: Var) -> Result<Var> {
        let n = self.node(x)?;
        let xs = &n.value;
        let value: Vec<T> = match kind {
            UnaryKind::Relu => xs.iter().map(|&v| if v > T::zero() { v } else { T::zero() }).collect(),
            UnaryKind::Sqrt => {
                if self.strict && xs.iter().any(|&v| v < T::zero()) {
                    return Err(MastError::domain("sqrt of negative value"));
                }
                xs.iter().map(|v| v.sqrt()).collect()
            }
            UnaryKind::Log => {
                if self.strict && xs.iter().any(|&v| v <= T::zero()) {
                    return Err(MastError::domain("log of nonpositive value"));
                }
                xs.iter().map(|v| v.ln()).collect()
            }
            UnaryKind::Exp => xs.iter().map(|v| v.exp()).collect(),
            UnaryKind::Square => xs.iter().map(|&v| v * v).collect(),
            UnaryKind::Neg => xs.iter().map(|&v| -v).collect(),
            UnaryKind::MaxScalar(c) => {
                let c = T::f(c);
                xs.iter().map(|&v| if v > c { v } else { c }).collect()
            }
            UnaryKind::AddScalar(c) => {
                let c = T::f(c);
                xs.iter().map(|&v| v + c).collect()
            }
            UnaryKind::MulScalar(c) => {
                let c = T::f(c);
                xs.iter().map(|&v| v * c).collect()
            }
        };
        let shape = n.shape.clone();
        let rg = n.requires_grad;
        self.push(shape, value, Op::Unary { x: x.id, kind }, rg, "unary")
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Relu, x)
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Sqrt, x)
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Log, x)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Exp, x)
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Square, x)
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Neg, x)
    }

    pub fn max_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary(UnaryKind::MaxScalar(c), x)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary(UnaryKind::AddScalar(c), x)
    }

    pub fn mul_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary(UnaryKind::MulScalar(c), x)
    }

    pub fn binary(&mut self, kind: BinaryKind, a: Var, b: Var) -> Result<Var> {
        let (na, nb) = (self.node(a)?, self.node(b)?);
        let (la, lb) = (na.value.len(), nb.value.len());
        let (bcast, shape) = if na.shape == nb.shape || (la == lb && la == 1) {
            (Broadcast::None, na.shape.clone())
        } else if la == 1 {
            (Broadcast::Left, nb.shape.clone())
        } else if lb == 1 {
            (Broadcast::Right, na.shape.clone())
        } else {
            return Err(MastError::dim(format!(
                "{kind:?}: shapes {:?} and {:?} are not broadcast-compatible",
                na.shape, nb.shape
            )));
        };
        let len = numel(&shape);
        let (av, bv) = (&na.value, &nb.value);
        let ai = |i: usize| if bcast == Broadcast::Left { av[0] } else { av[i] };
        let bi = |i: usize| if bcast == Broadcast::Right { bv[0] } else { bv[i] };
        if kind == BinaryKind::Div && self.strict && bv.iter().any(|v| v.is_zero()) {
            return Err(MastError::domain("division by zero"));
        }
        let value: Vec<T> = (0..len)
            .map(|i| match kind {
                BinaryKind::Add => ai(i) + bi(i),
                BinaryKind::Sub => ai(i) - bi(i),
                BinaryKind::Mul => ai(i) * bi(i),
                BinaryKind::Div => ai(i) / bi(i),
            })
            .collect();
        let rg = self.rg(&[a.id, b.id]);
        self.push(
            shape,
            value,
            Op::Binary {
                a: a.id,
                b: b.id,
                kind,
                bcast,
            },
            rg,
            "binary",
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Div, a, b)
    }

    // ----- linear algebra ----------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (na, nb) = (self.node(a)?, self.node(b)?);
        if na.shape.len() != 2 || nb.shape.len() != 2 || na.shape[1] != nb.shape[0] {
            return Err(MastError::dim(format!(
                "matmul: {:?} x {:?}",
                na.shape, nb.shape
            )));
        }
        let (n, p, m) = (na.shape[0], na.shape[1], nb.shape[1]);
        let mut out = vec![T::zero(); n * m];
        T::gemm(
            n, p, m, &na.value, p as isize, 1, &nb.value, m as isize, 1, T::zero(), &mut out, m as isize, 1,
        );
        let rg = self.rg(&[a.id, b.id]);
        self.push(vec![n, m], out, Op::MatMul { a: a.id, b: b.id }, rg, "matmul")
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let n = self.node(x)?;
        if n.shape.len() != 2 {
            return Err(MastError::dim(format!("transpose needs 2-D, got {:?}", n.shape)));
        }
        let (r, c) = (n.shape[0], n.shape[1]);
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = n.value[i * c + j];
            }
        }
        let rg = n.requires_grad;
        self.push(vec![c, r], out, Op::Transpose { x: x.id }, rg, "transpose")
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let n = self.node(x)?;
        if numel(shape) != n.value.len() {
            return Err(MastError::dim(format!("reshape {:?} -> {shape:?}", n.shape)));
        }
        let (value, rg) = (n.value.clone(), n.requires_grad);
        self.push(shape.to_vec(), value, Op::Reshape { x: x.id }, rg, "reshape")
    }

    /// Valid-padding cross-correlation of `[n,c,h,w]` with `[c',c,kh,kw]`,
    /// plus an optional per-output-channel bias `[c']`.
    pub fn conv2d(&mut self, x: Var, kernel: Var, bias: Option<Var>, stride: usize) -> Result<Var> {
        let (nx, nk) = (self.node(x)?, self.node(kernel)?);
        if nx.shape.len() != 4 || nk.shape.len() != 4 {
            return Err(MastError::dim(format!(
                "conv2d expects 4-D input and kernel, got {:?} and {:?}",
                nx.shape, nk.shape
            )));
        }
        if stride == 0 {
            return Err(MastError::domain("conv2d stride must be >= 1"));
        }
        let geom = ConvGeom {
            n: nx.shape[0],
            c: nx.shape[1],
            h: nx.shape[2],
            w: nx.shape[3],
            co: nk.shape[0],
            kh: nk.shape[2],
            kw: nk.shape[3],
            stride,
        };
        if nk.shape[1] != geom.c {
            return Err(MastError::dim(format!(
                "conv2d: input has {} channels, kernel expects {}",
                geom.c, nk.shape[1]
            )));
        }
        if geom.kh > geom.h || geom.kw > geom.w || geom.kh == 0 || geom.kw == 0 {
            return Err(MastError::dim(format!(
                "conv2d: kernel {}x{} does not fit input {}x{}",
                geom.kh, geom.kw, geom.h, geom.w
            )));
        }
        let bias_vals = match bias {
            Some(b) => {
                let nb = self.node(b)?;
                if nb.value.len() != geom.co {
                    return Err(MastError::dim(format!(
                        "conv2d bias has {} values for {} channels",
                        nb.value.len(),
                        geom.co
                    )));
                }
                Some(nb.value.as_slice())
            }
            None => None,
        };
        let out = conv::forward(&geom, &nx.value, &nk.value, bias_vals);
        let mut ids = vec![x.id, kernel.id];
        ids.extend(bias.map(|b| b.id));
        let rg = self.rg(&ids);
        self.push(
            vec![geom.n, geom.co, geom.oh(), geom.ow()],
            out,
            Op::Conv2d {
                x: x.id,
                kernel: kernel.id,
                bias: bias.map(|b| b.id),
                geom,
            },
            rg,
            "conv2d",
        )
    }

    // ----- reductions --------------------------------------------------

    /// Reduces over `axes` (removed from the output shape).
    pub fn reduce(&mut self, kind: ReduceKind, x: Var, axes: &[usize]) -> Result<Var> {
        let n = self.node(x)?;
        let shape = &n.shape;
        let mut reduced = vec![false; shape.len()];
        for &a in axes {
            if a >= shape.len() || reduced[a] {
                return Err(MastError::dim(format!("invalid reduction axes {axes:?} for {shape:?}")));
            }
            reduced[a] = true;
        }
        let count: usize = axes.iter().map(|&a| shape[a]).product();
        if count == 0 {
            return Err(MastError::domain("reduction over an empty axis"));
        }
        let out_shape: Vec<usize> = shape
            .iter()
            .zip(&reduced)
            .filter(|(_, r)| !**r)
            .map(|(s, _)| *s)
            .collect();
        let out_len = numel(&out_shape);

        // map[i] = output slot of input element i
        let mut map = Vec::with_capacity(n.value.len());
        let mut idx = vec![0usize; shape.len()];
        for _ in 0..n.value.len() {
            let mut o = 0;
            for (d, &i) in idx.iter().enumerate() {
                if !reduced[d] {
                    o = o * shape[d] + i;
                }
            }
            map.push(o);
            for d in (0..shape.len()).rev() {
                idx[d] += 1;
                if idx[d] < shape[d] {
                    break;
                }
                idx[d] = 0;
            }
        }

        let mut sums = vec![T::zero(); out_len];
        for (v, &o) in n.value.iter().zip(&map) {
            sums[o] = sums[o] + *v;
        }
        let cnt = T::f(count as f64);
        let (value, means) = match kind {
            ReduceKind::Sum => (sums, Vec::new()),
            ReduceKind::Mean => (sums.into_iter().map(|s| s / cnt).collect(), Vec::new()),
            ReduceKind::Var => {
                let means: Vec<T> = sums.into_iter().map(|s| s / cnt).collect();
                let mut acc = vec![T::zero(); out_len];
                for (v, &o) in n.value.iter().zip(&map) {
                    let d = *v - means[o];
                    acc[o] = acc[o] + d * d;
                }
                (acc.into_iter().map(|s| s / cnt).collect(), means)
            }
        };
        let rg = n.requires_grad;
        self.push(
            out_shape,
            value,
            Op::Reduce {
                x: x.id,
                kind,
                map,
                count,
                means,
            },
            rg,
            "reduce",
        )
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let axes: Vec<usize> = (0..self.shape(x).len()).collect();
        if axes.is_empty() {
            return Ok(x);
        }
        self.reduce(ReduceKind::Sum, x, &axes)
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let axes: Vec<usize> = (0..self.shape(x).len()).collect();
        if axes.is_empty() {
            return Ok(x);
        }
        self.reduce(ReduceKind::Mean, x, &axes)
    }

    // ----- structural --------------------------------------------------

    /// Tiles a vector `[m]` into `[rows, m]`.
    pub fn expand_rows(&mut self, x: Var, rows: usize) -> Result<Var> {
        let n = self.node(x)?;
        if n.shape.len() != 1 {
            return Err(MastError::dim(format!("expand_rows needs 1-D, got {:?}", n.shape)));
        }
        let m = n.shape[0];
        let mut out = Vec::with_capacity(rows * m);
        for _ in 0..rows {
            out.extend_from_slice(&n.value);
        }
        let rg = n.requires_grad;
        self.push(vec![rows, m], out, Op::ExpandRows { x: x.id }, rg, "expand_rows")
    }

    /// Gathers columns of a 2-D value, in the given order.
    pub fn select_columns(&mut self, x: Var, cols: &[usize]) -> Result<Var> {
        let n = self.node(x)?;
        if n.shape.len() != 2 {
            return Err(MastError::dim(format!("select_columns needs 2-D, got {:?}", n.shape)));
        }
        let (r, c) = (n.shape[0], n.shape[1]);
        if let Some(bad) = cols.iter().find(|&&k| k >= c) {
            return Err(MastError::contract(format!("column {bad} out of range for {c} columns")));
        }
        let k = cols.len();
        let mut out = Vec::with_capacity(r * k);
        for i in 0..r {
            for &j in cols {
                out.push(n.value[i * c + j]);
            }
        }
        let rg = n.requires_grad;
        self.push(
            vec![r, k],
            out,
            Op::SelectColumns {
                x: x.id,
                cols: cols.to_vec(),
            },
            rg,
            "select_columns",
        )
    }

    pub fn concat_columns(&mut self, a: Var, b: Var) -> Result<Var> {
        let (na, nb) = (self.node(a)?, self.node(b)?);
        if na.shape.len() != 2 || nb.shape.len() != 2 || na.shape[0] != nb.shape[0] {
            return Err(MastError::dim(format!(
                "concat_columns: {:?} and {:?}",
                na.shape, nb.shape
            )));
        }
        let (r, ca, cb) = (na.shape[0], na.shape[1], nb.shape[1]);
        let mut out = Vec::with_capacity(r * (ca + cb));
        for i in 0..r {
            out.extend_from_slice(&na.value[i * ca..(i + 1) * ca]);
            out.extend_from_slice(&nb.value[i * cb..(i + 1) * cb]);
        }
        let rg = self.rg(&[a.id, b.id]);
        self.push(vec![r, ca + cb], out, Op::ConcatColumns { a: a.id, b: b.id }, rg, "concat_columns")
    }

    /// Rows `start..end` along the leading axis (any rank).
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let n = self.node(x)?;
        if n.shape.is_empty() || start > end || end > n.shape[0] {
            return Err(MastError::dim(format!("slice_rows {start}..{end} of {:?}", n.shape)));
        }
        let row: usize = n.shape[1..].iter().product();
        let value = n.value[start * row..end * row].to_vec();
        let mut shape = n.shape.clone();
        shape[0] = end - start;
        let rg = n.requires_grad;
        self.push(shape, value, Op::SliceRows { x: x.id, start }, rg, "slice_rows")
    }

    /// Generalized-mean pooling over the trailing two axes of `[n, c, h, w]`:
    /// `(mean max(x, eps)^p)^(1/p)` per `(n, c)`, with a scalar exponent `p`.
    pub fn gem_pool(&mut self, x: Var, p: Var, eps: f64) -> Result<Var> {
        let (nx, np) = (self.node(x)?, self.node(p)?);
        if nx.shape.len() != 4 {
            return Err(MastError::dim(format!("gem_pool expects [n,c,h,w], got {:?}", nx.shape)));
        }
        if np.value.len() != 1 {
            return Err(MastError::dim("gem_pool exponent must be a scalar"));
        }
        let pv = np.value[0];
        if self.strict && pv <= T::zero() {
            return Err(MastError::domain("gem_pool exponent must be positive"));
        }
        let plane = nx.shape[2] * nx.shape[3];
        if plane == 0 {
            return Err(MastError::domain("gem_pool over an empty spatial map"));
        }
        let e = T::f(eps);
        let value: Vec<T> = nx
            .value
            .chunks(plane)
            .map(|xs| gem_stats(xs, pv, e).0)
            .collect();
        let shape = vec![nx.shape[0], nx.shape[1]];
        let rg = self.rg(&[x.id, p.id]);
        self.push(
            shape,
            value,
            Op::Gem {
                x: x.id,
                p: p.id,
                eps,
                plane,
            },
            rg,
            "gem_pool",
        )
    }

    /// Which side of its kink every input of a piecewise primitive (ReLU,
    /// max-with-scalar, GeM floor) lies on. Two evaluations with equal
    /// patterns lie on one smooth piece of the function.
    pub fn branch_pattern(&self) -> Vec<bool> {
        let mut out = Vec::new();
        for node in &self.nodes {
            let (x, at) = match node.op {
                Op::Unary {
                    x,
                    kind: UnaryKind::Relu,
                } => (x, T::zero()),
                Op::Unary {
                    x,
                    kind: UnaryKind::MaxScalar(c),
                } => (x, T::f(c)),
                Op::Gem { x, eps, .. } => (x, T::f(eps)),
                _ => continue,
            };
            out.extend(self.nodes[x].value.iter().map(|&v| v > at));
        }
        out
    }

    // ----- backward ----------------------------------------------------

    /// Back-propagates from a scalar `loss`, returning gradients for every
    /// trainable leaf, then clears the graph.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        let ln = self.node(loss)?;
        if ln.value.len() != 1 {
            return Err(MastError::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                ln.shape
            )));
        }
        let generation = self.generation;
        let count = self.nodes.len();
        let mut grads: Vec<Option<Vec<T>>> = (0..count).map(|_| None).collect();
        let mut leaves: Vec<Option<Tensor<T>>> = (0..count).map(|_| None).collect();
        grads[loss.id] = Some(vec![T::one()]);

        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            self.propagate(id, g, &mut grads, &mut leaves)?;
        }

        self.clear();
        Ok(Gradients {
            generation,
            grads: leaves,
        })
    }

    fn propagate(
        &self,
        id: usize,
        g: Vec<T>,
        grads: &mut [Option<Vec<T>>],
        leaves: &mut [Option<Tensor<T>>],
    ) -> Result<()> {
        let nodes = &self.nodes;
        let node = &nodes[id];
        let mut send = |target: usize, contribution: Vec<T>| {
            if !nodes[target].requires_grad {
                return;
            }
            match &mut grads[target] {
                Some(acc) => axpy_into(acc, &contribution),
                slot @ None => *slot = Some(contribution),
            }
        };

        match &node.op {
            Op::Leaf => {
                leaves[id] = Some(Tensor::new(node.shape.clone(), g)?);
            }
            Op::Unary { x, kind } => {
                let xv = &nodes[*x].value;
                let y = &node.value;
                let dx: Vec<T> = match *kind {
                    UnaryKind::Relu => g
                        .iter()
                        .zip(xv)
                        .map(|(&gi, &xi)| if xi > T::zero() { gi } else { T::zero() })
                        .collect(),
                    UnaryKind::Sqrt => g
                        .iter()
                        .zip(y)
                        .map(|(&gi, &yi)| gi / (yi + yi))
                        .collect(),
                    UnaryKind::Log => g.iter().zip(xv).map(|(&gi, &xi)| gi / xi).collect(),
                    UnaryKind::Exp => g.iter().zip(y).map(|(&gi, &yi)| gi * yi).collect(),
                    UnaryKind::Square => g
                        .iter()
                        .zip(xv)
                        .map(|(&gi, &xi)| gi * (xi + xi))
                        .collect(),
                    UnaryKind::Neg => g.iter().map(|&gi| -gi).collect(),
                    UnaryKind::MaxScalar(c) => {
                        let c = T::f(c);
                        g.iter()
                            .zip(xv)
                            .map(|(&gi, &xi)| if xi > c { gi } else { T::zero() })
                            .collect()
                    }
                    UnaryKind::AddScalar(_) => g,
                    UnaryKind::MulScalar(c) => {
                        let c = T::f(c);
                        g.iter().map(|&gi| gi * c).collect()
                    }
                };
                send(*x, dx);
            }
            Op::Binary { a, b, kind, bcast } => {
                let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
                let ai = |i: usize| if *bcast == Broadcast::Left { av[0] } else { av[i] };
                let bi = |i: usize| if *bcast == Broadcast::Right { bv[0] } else { bv[i] };
                let (da, db): (Vec<T>, Vec<T>) = match kind {
                    BinaryKind::Add => (g.clone(), g),
                    BinaryKind::Sub => (g.clone(), g.iter().map(|&v| -v).collect()),
                    BinaryKind::Mul => (
                        g.iter().enumerate().map(|(i, &gi)| gi * bi(i)).collect(),
                        g.iter().enumerate().map(|(i, &gi)| gi * ai(i)).collect(),
                    ),
                    BinaryKind::Div => (
                        g.iter().enumerate().map(|(i, &gi)| gi / bi(i)).collect(),
                        g.iter()
                            .enumerate()
                            .map(|(i, &gi)| -gi * ai(i) / (bi(i) * bi(i)))
                            .collect(),
                    ),
                };
                let collapse = |v: Vec<T>| vec![v.into_iter().sum::<T>()];
                let da = if *bcast == Broadcast::Left { collapse(da) } else { da };
                let db = if *bcast == Broadcast::Right { collapse(db) } else { db };
                send(*a, da);
                send(*b, db);
            }
            Op::MatMul { a, b } => {
                let (na, nb) = (&nodes[*a], &nodes[*b]);
                let (n, p, m) = (na.shape[0], na.shape[1], nb.shape[1]);
                if na.requires_grad {
                    // dA = dC · B^T
                    let mut da = vec![T::zero(); n * p];
                    T::gemm(n, m, p, &g, m as isize, 1, &nb.value, 1, m as isize, T::zero(), &mut da, p as isize, 1);
                    send(*a, da);
                }
                if nb.requires_grad {
                    // dB = A^T · dC
                    let mut db = vec![T::zero(); p * m];
                    T::gemm(p, n, m, &na.value, 1, p as isize, &g, m as isize, 1, T::zero(), &mut db, m as isize, 1);
                    send(*b, db);
                }
            }
            Op::Transpose { x } => {
                let (r, c) = (node.shape[0], node.shape[1]);
                let mut dx = vec![T::zero(); r * c];
                for i in 0..r {
                    for j in 0..c {
                        dx[j * r + i] = g[i * c + j];
                    }
                }
                send(*x, dx);
            }
            Op::Reshape { x } => send(*x, g),
            Op::Conv2d { x, kernel, bias, geom } => {
                let grads_c = conv::backward(
                    geom,
                    &nodes[*x].value,
                    &nodes[*kernel].value,
                    &g,
                    nodes[*x].requires_grad,
                    nodes[*kernel].requires_grad,
                    bias.map(|b| nodes[b].requires_grad).unwrap_or(false),
                );
                if let Some(dx) = grads_c.input {
                    send(*x, dx);
                }
                if let Some(dk) = grads_c.kernel {
                    send(*kernel, dk);
                }
                if let (Some(b), Some(db)) = (bias, grads_c.bias) {
                    send(*b, db);
                }
            }
            Op::Reduce {
                x,
                kind,
                map,
                count,
                means,
            } => {
                let xv = &nodes[*x].value;
                let cnt = T::f(*count as f64);
                let dx: Vec<T> = match kind {
                    ReduceKind::Sum => map.iter().map(|&o| g[o]).collect(),
                    ReduceKind::Mean => map.iter().map(|&o| g[o] / cnt).collect(),
                    ReduceKind::Var => {
                        let two = T::f(2.0);
                        map.iter()
                            .zip(xv)
                            .map(|(&o, &xi)| g[o] * two * (xi - means[o]) / cnt)
                            .collect()
                    }
                };
                send(*x, dx);
            }
            Op::ExpandRows { x } => {
                let m = node.shape[1];
                let mut dx = vec![T::zero(); m];
                for row in g.chunks(m) {
                    axpy_into(&mut dx, row);
                }
                send(*x, dx);
            }
            Op::SelectColumns { x, cols } => {
                let c = nodes[*x].shape[1];
                let k = cols.len();
                let mut dx = vec![T::zero(); nodes[*x].value.len()];
                for (i, row) in g.chunks(k.max(1)).enumerate().take(node.shape[0]) {
                    for (slot, &j) in cols.iter().enumerate() {
                        dx[i * c + j] = dx[i * c + j] + row[slot];
                    }
                }
                send(*x, dx);
            }
            Op::ConcatColumns { a, b } => {
                let (ca, cb) = (nodes[*a].shape[1], nodes[*b].shape[1]);
                let mut da = Vec::with_capacity(nodes[*a].value.len());
                let mut db = Vec::with_capacity(nodes[*b].value.len());
                for row in g.chunks(ca + cb) {
                    da.extend_from_slice(&row[..ca]);
                    db.extend_from_slice(&row[ca..]);
                }
                send(*a, da);
                send(*b, db);
            }
            Op::SliceRows { x, start } => {
                let row: usize = node.shape[1..].iter().product();
                let mut dx = vec![T::zero(); nodes[*x].value.len()];
                dx[start * row..start * row + g.len()].copy_from_slice(&g);
                send(*x, dx);
            }
            Op::Gem { x, p, eps, plane } => {
                let pv = nodes[*p].value[0];
                let e = T::f(*eps);
                let n = T::f(*plane as f64);
                let mut dx = vec![T::zero(); nodes[*x].value.len()];
                let mut dp = T::zero();
                for ((xs, dxs), &gi) in nodes[*x].value.chunks(*plane).zip(dx.chunks_mut(*plane)).zip(&g) {
                    let (pooled, max, s) = gem_stats(xs, pv, e);
                    let mut r_p_log = T::zero();
                    for (xi, di) in xs.iter().zip(dxs.iter_mut()) {
                        let clamped = *xi < e;
                        let r = if clamped { e } else { *xi } / max;
                        let rp1 = r.powf(pv - T::one());
                        r_p_log = r_p_log + rp1 * r * r.ln();
                        if !clamped {
                            *di = gi * pooled * rp1 / (n * s * max);
                        }
                    }
                    let mean_rp_log = r_p_log / n;
                    let dlog = -s.ln() / (pv * pv) + mean_rp_log / (pv * s);
                    dp = dp + gi * pooled * dlog;
                }
                send(*x, dx);
                send(*p, vec![dp]);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn relu_clamps_negatives() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[3], &[-1.0, 0.0, 2.0])).unwrap();
        let y = g.relu(x).unwrap();
        assert_eq!(g.value(y), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn add_zero_is_identity() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[2, 2], &[1.0, -2.0, 3.5, 4.0])).unwrap();
        let z = g.scalar(0.0).unwrap();
        let y = g.add(x, z).unwrap();
        assert_eq!(g.value(y), g.value(x));
        assert_eq!(g.shape(y), &[2, 2]);
    }

    #[test]
    fn mismatched_shapes_are_rejected() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(t(&[2], &[1.0, 2.0])).unwrap();
        let b = g.constant(t(&[3], &[1.0, 2.0, 3.0])).unwrap();
        assert!(matches!(g.add(a, b), Err(MastError::Dimension(_))));
    }

    #[test]
    fn strict_division_by_zero() {
        let mut g = Graph::<f64>::new().with_strict(true);
        let a = g.constant(t(&[2], &[1.0, 2.0])).unwrap();
        let b = g.constant(t(&[2], &[1.0, 0.0])).unwrap();
        assert!(matches!(g.div(a, b), Err(MastError::Domain(_))));
        let mut lax = Graph::<f64>::new();
        let a = lax.constant(t(&[2], &[1.0, 2.0])).unwrap();
        let b = lax.constant(t(&[2], &[1.0, 0.0])).unwrap();
        assert!(lax.div(a, b).is_ok());
    }

    #[test]
    fn validation_mode_flags_non_finite() {
        let mut g = Graph::<f64>::new().with_validation(true);
        let a = g.constant(t(&[1], &[-1.0])).unwrap();
        assert!(matches!(g.log(a), Err(MastError::NonFinite { .. })));
    }

    #[test]
    fn matmul_examples() {
        let mut g = Graph::<f64>::new();
        let i2 = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0])).unwrap();
        let x = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0])).unwrap();
        let y = g.matmul(i2, x).unwrap();
        assert_eq!(g.value(y), g.value(x));
        let ones = g.constant(t(&[2, 1], &[1.0, 1.0])).unwrap();
        let z = g.matmul(x, ones).unwrap();
        assert_eq!(g.shape(z), &[2, 1]);
        assert_eq!(g.value(z), &[3.0, 7.0]);
        assert!(matches!(g.matmul(ones, ones), Err(MastError::Dimension(_))));
    }

    #[test]
    fn conv_examples() {
        let mut g = Graph::<f64>::new();
        let img = g.constant(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0])).unwrap();
        let one = g.constant(t(&[1, 1, 1, 1], &[1.0])).unwrap();
        let same = g.conv2d(img, one, None, 1).unwrap();
        assert_eq!(g.value(same), g.value(img));
        let k = g.constant(t(&[1, 1, 2, 2], &[1.0; 4])).unwrap();
        let y = g.conv2d(img, k, None, 1).unwrap();
        assert_eq!(g.shape(y), &[1, 1, 1, 1]);
        assert_eq!(g.value(y), &[10.0]);
        let big = g.constant(t(&[1, 1, 3, 3], &[0.0; 9])).unwrap();
        assert!(matches!(g.conv2d(img, big, None, 1), Err(MastError::Dimension(_))));
    }

    #[test]
    fn conv_output_extents() {
        let mut g = Graph::<f32>::new();
        let img = g.constant(Tensor::zeros(vec![2, 3, 32, 32])).unwrap();
        let k = g.constant(Tensor::zeros(vec![16, 3, 3, 3])).unwrap();
        let y = g.conv2d(img, k, None, 2).unwrap();
        assert_eq!(g.shape(y), &[2, 16, 15, 15]);
    }

    #[test]
    fn reductions() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[3], &[2.0, 4.0, 6.0])).unwrap();
        let m = g.reduce(ReduceKind::Mean, x, &[0]).unwrap();
        assert_eq!(g.value(m), &[4.0]);
        let c = g.constant(t(&[3], &[1.0, 1.0, 1.0])).unwrap();
        let v = g.reduce(ReduceKind::Var, c, &[0]).unwrap();
        assert_eq!(g.value(v), &[0.0]);
        let p = g.constant(t(&[2], &[0.0, 2.0])).unwrap();
        let v = g.reduce(ReduceKind::Var, p, &[0]).unwrap();
        assert_eq!(g.value(v), &[1.0]);

        let m2 = g.constant(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0])).unwrap();
        let cols = g.reduce(ReduceKind::Sum, m2, &[0]).unwrap();
        assert_eq!(g.value(cols), &[5.0, 7.0, 9.0]);
        let rows = g.reduce(ReduceKind::Mean, m2, &[1]).unwrap();
        assert_eq!(g.value(rows), &[2.0, 5.0]);
        assert!(g.reduce(ReduceKind::Sum, m2, &[2]).is_err());

        let empty = g.constant(Tensor::zeros(vec![0, 3])).unwrap();
        assert!(matches!(g.reduce(ReduceKind::Mean, empty, &[0]), Err(MastError::Domain(_))));
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut g = Graph::<f64>::new();
        let xt = t(&[2, 3], &[1.0, -2.0, 3.0, 0.5, 0.0, 7.0]).with_grad();
        let x = g.leaf(&xt).unwrap();
        let s = g.sum_all(x).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1.0; 6]);
        assert!(g.is_empty());
    }

    #[test]
    fn backward_of_zero_times_x_is_zero() {
        let mut g = Graph::<f64>::new();
        let x = g.param(&t(&[3], &[1.0, 2.0, 3.0])).unwrap();
        let y = g.mul_scalar(x, 0.0).unwrap();
        let s = g.sum_all(y).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[0.0; 3]);
    }

    #[test]
    fn square_gradient_matches_central_difference() {
        let h = 1e-5;
        let fd = ((3.0f64 + h).powi(2) - (3.0f64 - h).powi(2)) / (2.0 * h);
        let mut g = Graph::<f64>::new();
        let x = g.param(&Tensor::scalar(3.0)).unwrap();
        let y = g.square(x).unwrap();
        let grads = g.backward(y).unwrap();
        let analytic = grads.get(x).unwrap().item().unwrap();
        assert!((analytic - 6.0).abs() < 1e-12);
        assert!((analytic - fd).abs() < 1e-6);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut g = Graph::<f64>::new();
        let x = g.param(&t(&[2], &[1.0, 2.0])).unwrap();
        assert!(matches!(g.backward(x), Err(MastError::Contract(_))));
    }

    #[test]
    fn stale_handles_are_rejected() {
        let mut g = Graph::<f64>::new();
        let x = g.param(&Tensor::scalar(1.0)).unwrap();
        g.clear();
        assert!(g.relu(x).is_err());
    }

    #[test]
    fn gradient_accumulates_over_reuse() {
        let mut g = Graph::<f64>::new();
        let x = g.param(&Tensor::scalar(2.0)).unwrap();
        let y = g.mul(x, x).unwrap();
        let z = g.add(y, x).unwrap();
        let grads = g.backward(z).unwrap();
        assert_eq!(grads.get(x).unwrap().item().unwrap(), 5.0);
    }
}
