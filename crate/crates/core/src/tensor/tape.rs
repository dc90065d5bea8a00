use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use super::{numel, Tensor, TensorId};
use crate::error::{contract, dim_err, Error, Result};
use crate::scalar::Scalar;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul {
        a: usize,
        b: usize,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        // `b` is a single [k, n] matrix applied to every batch slice.
        b_shared: bool,
    },
    Add {
        a: usize,
        b: usize,
    },
    Mul {
        a: usize,
        b: usize,
    },
    Scale {
        a: usize,
        c: T,
    },
    Gelu {
        a: usize,
    },
    Reshape {
        a: usize,
    },
    // out[o] = in[index[o]]; covers transpose, permute, slice and expand.
    Gather {
        a: usize,
        index: Rc<Vec<usize>>,
    },
    Concat {
        inputs: Vec<usize>,
        lens: Vec<usize>,
        outer: usize,
        inner: usize,
    },
    Softmax {
        a: usize,
        outer: usize,
        len: usize,
        inner: usize,
    },
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        d: usize,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Sum {
        a: usize,
    },
    Mean {
        a: usize,
    },
    CrossEntropy {
        logits: usize,
        cols: usize,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
}

#[derive(Debug)]
struct Node<T> {
    shape: Vec<usize>,
    value: Vec<T>,
    op: Op<T>,
    requires_grad: bool,
    leaf: Option<TensorId>,
}

/// Define-by-run computation record. Build one per forward pass.
#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: RefCell<Vec<Node<T>>>,
}

/// Result of [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients<T> {
    per_node: Vec<Option<Vec<T>>>,
    per_tensor: HashMap<TensorId, Vec<T>>,
    visit_order: Vec<usize>,
}

impl<T: Scalar> Gradients<T> {
    pub fn of(&self, v: Var) -> Option<&[T]> {
        self.per_node.get(v.0).and_then(|g| g.as_deref())
    }

    /// Summed gradient over every leaf created from the tensor `id`.
    pub fn for_tensor(&self, id: TensorId) -> Option<&[T]> {
        self.per_tensor.get(&id).map(|g| g.as_slice())
    }

    /// Node indices in the order the reverse pass processed them.
    pub fn visit_order(&self) -> &[usize] {
        &self.visit_order
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let len = shape[axis];
    let inner = shape[axis + 1..].iter().product();
    (outer, len, inner)
}

fn is_suffix(long: &[usize], short: &[usize]) -> bool {
    short.len() <= long.len() && long[long.len() - short.len()..] == *short
}

// c[m,n] += a[m,k] * b[k,n]
fn mm_acc<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += aip * bv;
            }
        }
    }
}

// da[m,k] += g[m,n] * b[k,n]^T
fn mm_grad_a<T: Scalar>(g: &[T], b: &[T], da: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let mut acc = T::zero();
            for (&gv, &bv) in grow.iter().zip(brow) {
                acc += gv * bv;
            }
            da[i * k + p] += acc;
        }
    }
}

// db[k,n] += a[m,k]^T * g[m,n]
fn mm_grad_b<T: Scalar>(a: &[T], g: &[T], db: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == T::zero() {
                continue;
            }
            let drow = &mut db[p * n..(p + 1) * n];
            for (dv, &gv) in drow.iter_mut().zip(grow) {
                *dv += aip * gv;
            }
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh-form GELU: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3))).
pub(crate) fn gelu_scalar<T: Scalar>(x: T) -> T {
    let c = T::lit(GELU_C);
    let a = T::lit(GELU_A);
    let half = T::lit(0.5);
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

fn gelu_deriv<T: Scalar>(x: T) -> T {
    let c = T::lit(GELU_C);
    let a = T::lit(GELU_A);
    let half = T::lit(0.5);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let du = c * (T::one() + T::lit(3.0) * a * x * x);
    half * (T::one() + t) + half * x * (T::one() - t * t) * du
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, shape: Vec<usize>, value: Vec<T>, op: Op<T>, requires_grad: bool) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
            leaf: None,
        });
        Var(nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].shape.clone()
    }

    pub fn value(&self, v: Var) -> Vec<T> {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn with_value<R>(&self, v: Var, f: impl FnOnce(&[T]) -> R) -> R {
        f(&self.nodes.borrow()[v.0].value)
    }

    /// Value of a node as a standalone (frozen) tensor.
    pub fn to_tensor(&self, v: Var) -> Tensor<T> {
        let nodes = self.nodes.borrow();
        let n = &nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("node shapes are consistent")
    }

    pub fn item(&self, v: Var) -> Result<T> {
        let nodes = self.nodes.borrow();
        let n = &nodes[v.0];
        if n.value.len() != 1 {
            return Err(contract(format!("item() on tensor of shape {:?}", n.shape)));
        }
        Ok(n.value[0])
    }

    /// Records a parameter. Gradients flow back to it iff it is trainable.
    pub fn leaf(&self, t: &Tensor<T>) -> Var {
        let v = self.push(
            t.shape().to_vec(),
            t.data().to_vec(),
            Op::Leaf,
            t.is_trainable(),
        );
        self.nodes.borrow_mut()[v.0].leaf = Some(t.id());
        v
    }

    pub fn constant(&self, shape: Vec<usize>, value: Vec<T>) -> Result<Var> {
        if numel(&shape) != value.len() {
            return Err(dim_err(format!(
                "constant of shape {shape:?} given {} values",
                value.len()
            )));
        }
        Ok(self.push(shape, value, Op::Leaf, false))
    }

    pub fn constant_tensor(&self, t: &Tensor<T>) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, false)
    }

    /// Matrix product.
    ///
    /// `[.., m, k] x [k, n]` applies the right matrix to every row block;
    /// `[b, m, k] x [b, k, n]` multiplies slice by slice.
    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let mismatch = || dim_err(format!("matmul of {sa:?} by {sb:?}"));
        if sa.len() < 2 || sb.len() < 2 {
            return Err(mismatch());
        }
        let k = sa[sa.len() - 1];
        let (batch, m, n, b_shared) = if sb.len() == 2 {
            if sb[0] != k {
                return Err(mismatch());
            }
            (1, numel(&sa) / k, sb[1], true)
        } else if sa.len() == 3 && sb.len() == 3 {
            if sa[0] != sb[0] || sb[1] != k {
                return Err(mismatch());
            }
            (sa[0], sa[1], sb[2], false)
        } else {
            return Err(mismatch());
        };
        let mut out = vec![T::zero(); batch * m * n];
        {
            let nodes = self.nodes.borrow();
            let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
            for bi in 0..batch {
                let bs = if b_shared { 0 } else { bi * k * n };
                mm_acc(
                    &av[bi * m * k..(bi + 1) * m * k],
                    &bv[bs..bs + k * n],
                    &mut out[bi * m * n..(bi + 1) * m * n],
                    m,
                    k,
                    n,
                );
            }
        }
        let mut shape = sa[..sa.len() - 1].to_vec();
        shape.push(n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            shape,
            out,
            Op::MatMul {
                a: a.0,
                b: b.0,
                batch,
                m,
                k,
                n,
                b_shared,
            },
            rg,
        ))
    }

    fn broadcast_binary(&self, a: Var, b: Var, name: &str, mul: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if !is_suffix(&sa, &sb) {
            return Err(dim_err(format!("{name} of {sa:?} with {sb:?}")));
        }
        let out: Vec<T> = {
            let nodes = self.nodes.borrow();
            let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
            let nb = bv.len();
            av.chunks(nb)
                .flat_map(|chunk| {
                    chunk
                        .iter()
                        .zip(bv)
                        .map(move |(&x, &y)| if mul { x * y } else { x + y })
                })
                .collect()
        };
        let rg = self.rg(a) || self.rg(b);
        let op = if mul {
            Op::Mul { a: a.0, b: b.0 }
        } else {
            Op::Add { a: a.0, b: b.0 }
        };
        Ok(self.push(sa, out, op, rg))
    }

    /// Elementwise sum; `b` may have a suffix shape of `a` and is broadcast over the leading axes.
    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.broadcast_binary(a, b, "add", false)
    }

    /// Elementwise product with the same broadcasting rule as [`Tape::add`].
    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.broadcast_binary(a, b, "mul", true)
    }

    pub fn scale(&self, a: Var, c: T) -> Var {
        let (shape, out) = {
            let nodes = self.nodes.borrow();
            let n = &nodes[a.0];
            (n.shape.clone(), n.value.iter().map(|&x| x * c).collect())
        };
        let rg = self.rg(a);
        self.push(shape, out, Op::Scale { a: a.0, c }, rg)
    }

    pub fn gelu(&self, a: Var) -> Var {
        let (shape, out) = {
            let nodes = self.nodes.borrow();
            let n = &nodes[a.0];
            (
                n.shape.clone(),
                n.value.iter().map(|&x| gelu_scalar(x)).collect(),
            )
        };
        let rg = self.rg(a);
        self.push(shape, out, Op::Gelu { a: a.0 }, rg)
    }

    /// `x @ w + b` over the last axis.
    pub fn linear(&self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add(y, b)
    }

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Result<Var> {
        let (old, value) = {
            let nodes = self.nodes.borrow();
            let n = &nodes[a.0];
            (n.shape.clone(), n.value.clone())
        };
        if numel(&old) != numel(shape) {
            return Err(dim_err(format!("reshape {old:?} into {shape:?}")));
        }
        let rg = self.rg(a);
        Ok(self.push(shape.to_vec(), value, Op::Reshape { a: a.0 }, rg))
    }

    fn gather(&self, a: Var, shape: Vec<usize>, index: Vec<usize>) -> Var {
        let out = {
            let nodes = self.nodes.borrow();
            let src = &nodes[a.0].value;
            index.iter().map(|&i| src[i]).collect()
        };
        let rg = self.rg(a);
        self.push(
            shape,
            out,
            Op::Gather {
                a: a.0,
                index: Rc::new(index),
            },
            rg,
        )
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&self, a: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(a);
        let rank = shape.len();
        let mut seen = vec![false; rank];
        if perm.len() != rank
            || perm
                .iter()
                .any(|&p| p >= rank || std::mem::replace(&mut seen[p], true))
        {
            return Err(dim_err(format!("permutation {perm:?} for shape {shape:?}")));
        }
        let mut in_strides = vec![1usize; rank];
        for i in (0..rank.saturating_sub(1)).rev() {
            in_strides[i] = in_strides[i + 1] * shape[i + 1];
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
        let total = numel(&shape);
        let mut index = Vec::with_capacity(total);
        let mut counter = vec![0usize; rank];
        for _ in 0..total {
            index.push(counter.iter().zip(&strides).map(|(c, s)| c * s).sum());
            for ax in (0..rank).rev() {
                counter[ax] += 1;
                if counter[ax] < out_shape[ax] {
                    break;
                }
                counter[ax] = 0;
            }
        }
        Ok(self.gather(a, out_shape, index))
    }

    /// Swaps the last two axes.
    pub fn transpose(&self, a: Var) -> Result<Var> {
        let rank = self.shape(a).len();
        if rank < 2 {
            return Err(dim_err(format!("transpose of rank-{rank} tensor")));
        }
        let mut perm: Vec<usize> = (0..rank).collect();
        perm.swap(rank - 2, rank - 1);
        self.permute(a, &perm)
    }

    pub fn slice(&self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a);
        if axis >= shape.len() || start + len > shape[axis] || len == 0 {
            return Err(dim_err(format!(
                "slice [{start}, {}) on axis {axis} of {shape:?}",
                start + len
            )));
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        let mut index = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            for j in start..start + len {
                let base = (o * n + j) * inner;
                index.extend(base..base + inner);
            }
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        Ok(self.gather(a, out_shape, index))
    }

    /// Stacks `n` copies along a new leading axis.
    pub fn expand(&self, a: Var, n: usize) -> Result<Var> {
        if n == 0 {
            return Err(dim_err("expand to zero copies"));
        }
        let shape = self.shape(a);
        let m = numel(&shape);
        let index = (0..n).flat_map(|_| 0..m).collect();
        let mut out_shape = vec![n];
        out_shape.extend(shape);
        Ok(self.gather(a, out_shape, index))
    }

    pub fn concat(&self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .map(|&v| self.shape(v))
            .ok_or_else(|| dim_err("concat of zero tensors"))?;
        if axis >= first.len() {
            return Err(dim_err(format!("concat axis {axis} for shape {first:?}")));
        }
        let mut lens = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == first.len()
                && s.iter()
                    .zip(&first)
                    .enumerate()
                    .all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(dim_err(format!(
                    "concat {s:?} with {first:?} on axis {axis}"
                )));
            }
            lens.push(s[axis]);
        }
        let (outer, _, inner) = split_axis(&first, axis);
        let total: usize = lens.iter().sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        {
            let nodes = self.nodes.borrow();
            for o in 0..outer {
                for (&p, &l) in parts.iter().zip(&lens) {
                    let src = &nodes[p.0].value;
                    out.extend_from_slice(&src[o * l * inner..(o + 1) * l * inner]);
                }
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            shape,
            out,
            Op::Concat {
                inputs: parts.iter().map(|p| p.0).collect(),
                lens,
                outer,
                inner,
            },
            rg,
        ))
    }

    /// Softmax along `axis`, stabilised by subtracting the running maximum.
    pub fn softmax(&self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a);
        if axis >= shape.len() {
            return Err(dim_err(format!("softmax axis {axis} for shape {shape:?}")));
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        let mut out = vec![T::zero(); numel(&shape)];
        {
            let nodes = self.nodes.borrow();
            let x = &nodes[a.0].value;
            if x.iter().any(|v| v.is_nan()) {
                return Err(Error::Numeric("NaN entering softmax".into()));
            }
            for o in 0..outer {
                for i in 0..inner {
                    let at = |j: usize| (o * n + j) * inner + i;
                    let mut mx = T::neg_infinity();
                    for j in 0..n {
                        mx = mx.max(x[at(j)]);
                    }
                    let mut sum = T::zero();
                    for j in 0..n {
                        let e = (x[at(j)] - mx).exp();
                        out[at(j)] = e;
                        sum += e;
                    }
                    for j in 0..n {
                        out[at(j)] /= sum;
                    }
                }
            }
        }
        let rg = self.rg(a);
        Ok(self.push(
            shape,
            out,
            Op::Softmax {
                a: a.0,
                outer,
                len: n,
                inner,
            },
            rg,
        ))
    }

    /// Normalises each row of the last axis to zero mean and unit variance, then applies `gain` and `bias`.
    pub fn layer_norm(&self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var> {
        let (sx, sg, sb) = (self.shape(x), self.shape(gain), self.shape(bias));
        let d = *sx.last().ok_or_else(|| dim_err("layer_norm of a scalar"))?;
        if sg != [d] || sb != [d] {
            return Err(dim_err(format!(
                "layer_norm over {sx:?} with gain {sg:?} and bias {sb:?}"
            )));
        }
        let rows = numel(&sx) / d;
        let mut out = vec![T::zero(); rows * d];
        let mut xhat = vec![T::zero(); rows * d];
        let mut rstd = vec![T::zero(); rows];
        {
            let nodes = self.nodes.borrow();
            let (xv, gv, bv) = (
                &nodes[x.0].value,
                &nodes[gain.0].value,
                &nodes[bias.0].value,
            );
            let dn = T::lit(d as f64);
            for r in 0..rows {
                let row = &xv[r * d..(r + 1) * d];
                let mean = row.iter().copied().sum::<T>() / dn;
                let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
                let rs = T::one() / (var + eps).sqrt();
                rstd[r] = rs;
                for j in 0..d {
                    let h = (row[j] - mean) * rs;
                    xhat[r * d + j] = h;
                    out[r * d + j] = h * gv[j] + bv[j];
                }
            }
        }
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            sx,
            out,
            Op::LayerNorm {
                x: x.0,
                gain: gain.0,
                bias: bias.0,
                d,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    pub fn sum(&self, a: Var) -> Var {
        let s = self.with_value(a, |v| v.iter().copied().sum::<T>());
        let rg = self.rg(a);
        self.push(vec![], vec![s], Op::Sum { a: a.0 }, rg)
    }

    pub fn mean(&self, a: Var) -> Var {
        let s = self.with_value(a, |v| v.iter().copied().sum::<T>() / T::lit(v.len() as f64));
        let rg = self.rg(a);
        self.push(vec![], vec![s], Op::Mean { a: a.0 }, rg)
    }

    /// Mean cross-entropy of `[rows, classes]` logits.
    ///
    /// With a mask, columns marked `false` are excluded from the softmax
    /// and receive no gradient; every label must be an allowed column.
    pub fn cross_entropy(
        &self,
        logits: Var,
        labels: &[usize],
        mask: Option<&[bool]>,
    ) -> Result<Var> {
        let shape = self.shape(logits);
        if shape.len() != 2 || shape[0] != labels.len() {
            return Err(dim_err(format!(
                "cross_entropy logits {shape:?} with {} labels",
                labels.len()
            )));
        }
        let (rows, cols) = (shape[0], shape[1]);
        if let Some(m) = mask {
            if m.len() != cols {
                return Err(dim_err(format!(
                    "class mask of {} for {cols} classes",
                    m.len()
                )));
            }
        }
        let allowed = |c: usize| mask.is_none_or(|m| m[c]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= cols || !allowed(l)) {
            return Err(contract(format!("label {bad} outside the allowed classes")));
        }
        let mut probs = vec![T::zero(); rows * cols];
        let mut total = T::zero();
        {
            let nodes = self.nodes.borrow();
            let x = &nodes[logits.0].value;
            if x.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric("non-finite logits".into()));
            }
            for r in 0..rows {
                let row = &x[r * cols..(r + 1) * cols];
                let mut mx = T::neg_infinity();
                for c in (0..cols).filter(|&c| allowed(c)) {
                    mx = mx.max(row[c]);
                }
                let mut sum = T::zero();
                for c in (0..cols).filter(|&c| allowed(c)) {
                    let e = (row[c] - mx).exp();
                    probs[r * cols + c] = e;
                    sum += e;
                }
                for c in (0..cols).filter(|&c| allowed(c)) {
                    probs[r * cols + c] /= sum;
                }
                total += sum.ln() + mx - row[labels[r]];
            }
        }
        let loss = total / T::lit(rows as f64);
        let rg = self.rg(logits);
        Ok(self.push(
            vec![],
            vec![loss],
            Op::CrossEntropy {
                logits: logits.0,
                cols,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.0];
        if root.value.len() != 1 {
            return Err(contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.shape
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..nodes.len()).map(|_| None).collect();
        let mut visit_order = Vec::new();
        if root.requires_grad {
            grads[loss.0] = Some(vec![T::one()]);
        }
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            visit_order.push(idx);
            let node = &nodes[idx];
            propagate(&nodes, node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        let mut per_tensor: HashMap<TensorId, Vec<T>> = HashMap::new();
        for (idx, node) in nodes.iter().enumerate() {
            if let (Some(id), Some(g)) = (node.leaf, grads[idx].as_ref()) {
                per_tensor
                    .entry(id)
                    .and_modify(|acc| acc.iter_mut().zip(g).for_each(|(a, &b)| *a += b))
                    .or_insert_with(|| g.clone());
            }
        }
        Ok(Gradients {
            per_node: grads,
            per_tensor,
            visit_order,
        })
    }
}

fn slot<'a, T: Scalar>(
    nodes: &[Node<T>],
    grads: &'a mut [Option<Vec<T>>],
    i: usize,
) -> Option<&'a mut Vec<T>> {
    if !nodes[i].requires_grad {
        return None;
    }
    let len = nodes[i].value.len();
    Some(grads[i].get_or_insert_with(|| vec![T::zero(); len]))
}

fn propagate<T: Scalar>(nodes: &[Node<T>], node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
    match &node.op {
        Op::Leaf => {}
        &Op::MatMul {
            a,
            b,
            batch,
            m,
            k,
            n,
            b_shared,
        } => {
            let (av, bv) = (&nodes[a].value, &nodes[b].value);
            if let Some(da) = slot(nodes, grads, a) {
                for bi in 0..batch {
                    let bs = if b_shared { 0 } else { bi * k * n };
                    mm_grad_a(
                        &g[bi * m * n..(bi + 1) * m * n],
                        &bv[bs..bs + k * n],
                        &mut da[bi * m * k..(bi + 1) * m * k],
                        m,
                        k,
                        n,
                    );
                }
            }
            if let Some(db) = slot(nodes, grads, b) {
                for bi in 0..batch {
                    let bs = if b_shared { 0 } else { bi * k * n };
                    mm_grad_b(
                        &av[bi * m * k..(bi + 1) * m * k],
                        &g[bi * m * n..(bi + 1) * m * n],
                        &mut db[bs..bs + k * n],
                        m,
                        k,
                        n,
                    );
                }
            }
        }
        &Op::Add { a, b } => {
            if let Some(da) = slot(nodes, grads, a) {
                da.iter_mut().zip(g).for_each(|(d, &x)| *d += x);
            }
            if let Some(db) = slot(nodes, grads, b) {
                let nb = db.len();
                for chunk in g.chunks(nb) {
                    db.iter_mut().zip(chunk).for_each(|(d, &x)| *d += x);
                }
            }
        }
        &Op::Mul { a, b } => {
            let (av, bv) = (&nodes[a].value, &nodes[b].value);
            let nb = bv.len();
            if let Some(da) = slot(nodes, grads, a) {
                for (i, (d, &x)) in da.iter_mut().zip(g).enumerate() {
                    *d += x * bv[i % nb];
                }
            }
            if let Some(db) = slot(nodes, grads, b) {
                for (i, (&x, &y)) in g.iter().zip(av).enumerate() {
                    db[i % nb] += x * y;
                }
            }
        }
        &Op::Scale { a, c } => {
            if let Some(da) = slot(nodes, grads, a) {
                da.iter_mut().zip(g).for_each(|(d, &x)| *d += x * c);
            }
        }
        &Op::Gelu { a } => {
            let av = &nodes[a].value;
            if let Some(da) = slot(nodes, grads, a) {
                for ((d, &x), &v) in da.iter_mut().zip(g).zip(av) {
                    *d += x * gelu_deriv(v);
                }
            }
        }
        &Op::Reshape { a } => {
            if let Some(da) = slot(nodes, grads, a) {
                da.iter_mut().zip(g).for_each(|(d, &x)| *d += x);
            }
        }
        Op::Gather { a, index } => {
            if let Some(da) = slot(nodes, grads, *a) {
                for (&i, &x) in index.iter().zip(g) {
                    da[i] += x;
                }
            }
        }
        Op::Concat {
            inputs,
            lens,
            outer,
            inner,
        } => {
            let total: usize = lens.iter().sum();
            let mut offset = 0;
            for (&p, &l) in inputs.iter().zip(lens) {
                if let Some(dp) = slot(nodes, grads, p) {
                    for o in 0..*outer {
                        let src =
                            &g[(o * total + offset) * inner..(o * total + offset + l) * inner];
                        dp[o * l * inner..(o + 1) * l * inner]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(d, &x)| *d += x);
                    }
                }
                offset += l;
            }
        }
        &Op::Softmax {
            a,
            outer,
            len,
            inner,
        } => {
            let y = &node.value;
            if let Some(da) = slot(nodes, grads, a) {
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| (o * len + j) * inner + i;
                        let dot: T = (0..len).map(|j| g[at(j)] * y[at(j)]).sum();
                        for j in 0..len {
                            da[at(j)] += y[at(j)] * (g[at(j)] - dot);
                        }
                    }
                }
            }
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            d,
            xhat,
            rstd,
        } => {
            let d = *d;
            let rows = xhat.len() / d;
            let gv = &nodes[*gain].value;
            if let Some(dg) = slot(nodes, grads, *gain) {
                for r in 0..rows {
                    for j in 0..d {
                        dg[j] += g[r * d + j] * xhat[r * d + j];
                    }
                }
            }
            if let Some(db) = slot(nodes, grads, *bias) {
                for r in 0..rows {
                    for j in 0..d {
                        db[j] += g[r * d + j];
                    }
                }
            }
            if let Some(dx) = slot(nodes, grads, *x) {
                let dn = T::lit(d as f64);
                for r in 0..rows {
                    let mut mean_dh = T::zero();
                    let mut mean_dh_h = T::zero();
                    for j in 0..d {
                        let dh = g[r * d + j] * gv[j];
                        mean_dh += dh;
                        mean_dh_h += dh * xhat[r * d + j];
                    }
                    mean_dh /= dn;
                    mean_dh_h /= dn;
                    for j in 0..d {
                        let dh = g[r * d + j] * gv[j];
                        dx[r * d + j] += rstd[r] * (dh - mean_dh - xhat[r * d + j] * mean_dh_h);
                    }
                }
            }
        }
        &Op::Sum { a } => {
            if let Some(da) = slot(nodes, grads, a) {
                da.iter_mut().for_each(|d| *d += g[0]);
            }
        }
        &Op::Mean { a } => {
            if let Some(da) = slot(nodes, grads, a) {
                let s = g[0] / T::lit(da.len() as f64);
                da.iter_mut().for_each(|d| *d += s);
            }
        }
        Op::CrossEntropy {
            logits,
            cols,
            labels,
            probs,
        } => {
            if let Some(dl) = slot(nodes, grads, *logits) {
                let scale = g[0] / T::lit(labels.len() as f64);
                for (r, &label) in labels.iter().enumerate() {
                    for c in 0..*cols {
                        let mut p = probs[r * cols + c];
                        if c == label {
                            p -= T::one();
                        }
                        dl[r * cols + c] += p * scale;
                    }
                }
            }
        }
    }
}
