use super::kernels::{self, Window};
use super::{axis_extents, Scalar, Tensor};
use crate::error::{Error, Result};

/// Adjoint of one recorded operation: `(grad_out, inputs, output)` to one
/// optional gradient per input, in input order.
pub type BackwardFn<T> = Box<dyn Fn(&Tensor<T>, &[&Tensor<T>], &Tensor<T>) -> Vec<Option<Tensor<T>>>>;

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

struct Node<T> {
    value: Tensor<T>,
    parents: Vec<usize>,
    backward: Option<BackwardFn<T>>,
    requires_grad: bool,
}

/// Tape of executed operations, replayed in reverse by [`Graph::backward`].
///
/// A graph is single-threaded by construction (it is `!Send` because of
/// boxed closures) and is meant to live for one forward/backward pass.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    check_finite: bool,
    scope: Vec<String>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of leaf variables after a backward pass.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn scale<T: Scalar>(t: &Tensor<T>, s: T) -> Tensor<T> {
    t.map(|v| v * s)
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), check_finite: false, scope: Vec::new() }
    }

    /// Turns on NaN/Inf detection after every recorded operation.
    pub fn with_finite_checks(mut self, on: bool) -> Self {
        self.check_finite = on;
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Runs `f` with `name` pushed onto the diagnostic scope path.
    pub fn scoped<R>(&mut self, name: &str, f: impl FnOnce(&mut Self) -> R) -> R {
        self.scope.push(name.to_owned());
        let r = f(self);
        self.scope.pop();
        r
    }

    pub fn push_scope(&mut self, name: &str) {
        self.scope.push(name.to_owned());
    }

    pub fn pop_scope(&mut self) {
        self.scope.pop();
    }

    pub fn scope_path(&self) -> String {
        self.scope.join(".")
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, parents: Vec::new(), backward: None, requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records a custom operation. The backward closure receives the output
    /// gradient, the input values and the output value.
    pub fn record(&mut self, op: &'static str, value: Tensor<T>, inputs: &[Var], backward: BackwardFn<T>) -> Result<Var> {
        if self.check_finite && !value.is_finite() {
            return Err(Error::NonFinite { op, scope: self.scope_path() });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            parents: inputs.iter().map(|v| v.0).collect(),
            backward: requires_grad.then_some(backward),
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Reverse-mode sweep from a scalar `loss`. Gradients are retained for
    /// leaves only; intermediate adjoints are dropped once propagated.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(self.nodes[loss.0].value.shape()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            let Some(backward) = node.backward.as_ref() else { continue };
            let Some(g) = grads[i].take() else { continue };
            let inputs: Vec<&Tensor<T>> = node.parents.iter().map(|&p| &self.nodes[p].value).collect();
            let parent_grads = backward(&g, &inputs, &node.value);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (&p, pg) in node.parents.iter().zip(parent_grads) {
                let Some(pg) = pg else { continue };
                if !self.nodes[p].requires_grad {
                    continue;
                }
                debug_assert_eq!(pg.shape(), self.nodes[p].value.shape());
                match &mut grads[p] {
                    Some(acc) => acc.add_assign(&pg),
                    slot => *slot = Some(pg),
                }
            }
        }
        Ok(Gradients { grads })
    }

    // -----------------------------------------------------------------------
    // linear algebra

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = kernels::matmul(self.value(a), self.value(b))?;
        self.record(
            "matmul",
            out,
            &[a, b],
            Box::new(|g, ins, _| {
                let (da, db) = kernels::matmul_backward(ins[0], ins[1], g);
                vec![Some(da), Some(db)]
            }),
        )
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose2()?;
        self.record("transpose", out, &[a], Box::new(|g, _, _| vec![Some(g.transpose2().expect("rank 2"))]))
    }

    // -----------------------------------------------------------------------
    // convolutions

    pub fn conv2d(&mut self, x: Var, w: Var, bias: Option<Var>, win: Window) -> Result<Var> {
        let out = kernels::conv2d(self.value(x), self.value(w), bias.map(|b| self.value(b)), win)?;
        let mut inputs = vec![x, w];
        inputs.extend(bias);
        self.record(
            "conv2d",
            out,
            &inputs,
            Box::new(move |g, ins, _| {
                let (dx, dw, db) = kernels::conv2d_backward(ins[0], ins[1], ins.len() == 3, win, g);
                let mut v = vec![Some(dx), Some(dw)];
                if ins.len() == 3 {
                    v.push(db);
                }
                v
            }),
        )
    }

    pub fn depthwise_conv2d(&mut self, x: Var, w: Var, bias: Option<Var>, win: Window) -> Result<Var> {
        let out = kernels::depthwise_conv2d(self.value(x), self.value(w), bias.map(|b| self.value(b)), win)?;
        let mut inputs = vec![x, w];
        inputs.extend(bias);
        self.record(
            "depthwise_conv2d",
            out,
            &inputs,
            Box::new(move |g, ins, _| {
                let (dx, dw, db) = kernels::depthwise_conv2d_backward(ins[0], ins[1], ins.len() == 3, win, g);
                let mut v = vec![Some(dx), Some(dw)];
                if ins.len() == 3 {
                    v.push(db);
                }
                v
            }),
        )
    }

    pub fn transpose_conv2d(&mut self, x: Var, w: Var, bias: Option<Var>, win: Window) -> Result<Var> {
        let out = kernels::transpose_conv2d(self.value(x), self.value(w), bias.map(|b| self.value(b)), win)?;
        let mut inputs = vec![x, w];
        inputs.extend(bias);
        self.record(
            "transpose_conv2d",
            out,
            &inputs,
            Box::new(move |g, ins, _| {
                let (dx, dw, db) = kernels::transpose_conv2d_backward(ins[0], ins[1], ins.len() == 3, win, g);
                let mut v = vec![Some(dx), Some(dw)];
                if ins.len() == 3 {
                    v.push(db);
                }
                v
            }),
        )
    }

    // -----------------------------------------------------------------------
    // pooling and resampling

    pub fn avg_pool(&mut self, x: Var, win: Window) -> Result<Var> {
        let out = kernels::avg_pool(self.value(x), win)?;
        self.record(
            "avg_pool",
            out,
            &[x],
            Box::new(move |g, ins, _| vec![Some(kernels::avg_pool_backward(ins[0].shape(), win, g))]),
        )
    }

    pub fn max_pool(&mut self, x: Var, kernel: usize, stride: usize) -> Result<Var> {
        let (out, argmax) = kernels::max_pool(self.value(x), kernel, stride)?;
        self.record(
            "max_pool",
            out,
            &[x],
            Box::new(move |g, ins, _| vec![Some(kernels::max_pool_backward(ins[0].shape(), &argmax, g))]),
        )
    }

    pub fn bilinear_resize(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let out = kernels::bilinear_resize(self.value(x), out_h, out_w)?;
        self.record(
            "bilinear_upsample",
            out,
            &[x],
            Box::new(|g, ins, _| vec![Some(kernels::bilinear_resize_backward(ins[0].shape(), g))]),
        )
    }

    /// Bilinear upsampling by an integer factor.
    pub fn upsample(&mut self, x: Var, factor: usize) -> Result<Var> {
        if factor == 0 {
            return Err(Error::dim("bilinear_upsample", "factor must be at least 1"));
        }
        let (h, w, _) = self.value(x).hwc("bilinear_upsample")?;
        self.bilinear_resize(x, h * factor, w * factor)
    }

    // -----------------------------------------------------------------------
    // normalization

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let out = kernels::softmax(self.value(x), axis)?;
        self.record(
            "softmax",
            out,
            &[x],
            Box::new(move |g, _, y| vec![Some(kernels::softmax_backward(y, axis, g))]),
        )
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (out, cache) = kernels::layer_norm(self.value(x), self.value(gamma), self.value(beta), eps)?;
        self.record(
            "layer_norm",
            out,
            &[x, gamma, beta],
            Box::new(move |g, ins, _| {
                let (dx, dg, db) = kernels::layer_norm_backward(&cache, ins[1], g);
                vec![Some(dx), Some(dg), Some(db)]
            }),
        )
    }

    // -----------------------------------------------------------------------
    // elementwise

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        self.record("add", out, &[a, b], Box::new(|g, _, _| vec![Some(g.clone()), Some(g.clone())]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x - y).collect();
        let out = Tensor::new(va.shape(), data)?;
        self.record("sub", out, &[a, b], Box::new(|g, _, _| vec![Some(g.clone()), Some(g.map(|v| -v))]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x * y).collect();
        let out = Tensor::new(va.shape(), data)?;
        self.record(
            "mul",
            out,
            &[a, b],
            Box::new(|g, ins, _| {
                let da = g.data().iter().zip(ins[1].data()).map(|(&gv, &y)| gv * y).collect();
                let db = g.data().iter().zip(ins[0].data()).map(|(&gv, &x)| gv * x).collect();
                vec![
                    Some(Tensor::new(g.shape(), da).expect("shape")),
                    Some(Tensor::new(g.shape(), db).expect("shape")),
                ]
            }),
        )
    }

    pub fn mul_scalar(&mut self, a: Var, s: f64) -> Result<Var> {
        let s = T::of(s);
        let out = scale(self.value(a), s);
        self.record("mul_scalar", out, &[a], Box::new(move |g, _, _| vec![Some(scale(g, s))]))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|v| v.max(T::zero()));
        self.record(
            "relu",
            out,
            &[a],
            Box::new(|g, ins, _| {
                let d = g
                    .data()
                    .iter()
                    .zip(ins[0].data())
                    .map(|(&gv, &x)| if x > T::zero() { gv } else { T::zero() })
                    .collect();
                vec![Some(Tensor::new(g.shape(), d).expect("shape"))]
            }),
        )
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(kernels::gelu);
        self.record(
            "gelu",
            out,
            &[a],
            Box::new(|g, ins, _| {
                let d = g
                    .data()
                    .iter()
                    .zip(ins[0].data())
                    .map(|(&gv, &x)| gv * kernels::gelu_grad(x))
                    .collect();
                vec![Some(Tensor::new(g.shape(), d).expect("shape"))]
            }),
        )
    }

    // -----------------------------------------------------------------------
    // reductions and shape ops

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(a).sum());
        self.record("sum", out, &[a], Box::new(|g, ins, _| vec![Some(Tensor::full(ins[0].shape(), g.item()))]))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).numel() as f64;
        let s = self.sum(a)?;
        self.mul_scalar(s, 1.0 / n)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        self.record(
            "reshape",
            out,
            &[a],
            Box::new(|g, ins, _| vec![Some(g.clone().reshape(ins[0].shape()).expect("same numel"))]),
        )
    }

    /// `H × W × C` to `HW × C`.
    pub fn flatten_spatial(&mut self, a: Var) -> Result<Var> {
        let (h, w, c) = self.value(a).hwc("flatten_spatial")?;
        self.reshape(a, &[h * w, c])
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        const OP: &str = "concat";
        let Some(&first) = parts.first() else {
            return Err(Error::dim(OP, "nothing to concatenate"));
        };
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(Error::dim(OP, format!("axis {axis} out of range for {base:?}")));
        }
        let mut lens = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::dim(OP, format!("{s:?} does not line up with {base:?} on axis {axis}")));
            }
            lens.push(s[axis]);
        }
        let total: usize = lens.iter().sum();
        let (outer, _, inner) = axis_extents(&base, axis);
        let mut out_shape = base.clone();
        out_shape[axis] = total;
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&p, &len) in parts.iter().zip(&lens) {
                data.extend_from_slice(&self.value(p).data()[o * len * inner..][..len * inner]);
            }
        }
        let out = Tensor::new(&out_shape, data)?;
        self.record(
            OP,
            out,
            parts,
            Box::new(move |g, ins, _| {
                let mut start = 0;
                ins.iter()
                    .zip(&lens)
                    .map(|(x, &len)| {
                        let t = slice_axis(g, axis, start, len, x.shape());
                        start += len;
                        Some(t)
                    })
                    .collect()
            }),
        )
    }

    /// Contiguous range `[start, start + len)` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::dim("slice", format!("range {start}+{len} on axis {axis} of {shape:?}")));
        }
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        let out = slice_axis(self.value(a), axis, start, len, &out_shape);
        self.record(
            "slice",
            out,
            &[a],
            Box::new(move |g, ins, _| {
                let (outer, full, inner) = axis_extents(ins[0].shape(), axis);
                let mut d = vec![T::zero(); ins[0].numel()];
                for o in 0..outer {
                    d[(o * full + start) * inner..][..len * inner]
                        .copy_from_slice(&g.data()[o * len * inner..][..len * inner]);
                }
                vec![Some(Tensor::new(ins[0].shape(), d).expect("shape"))]
            }),
        )
    }

    /// Splits `axis` into consecutive pieces of the given sizes.
    pub fn split_sizes(&mut self, a: Var, axis: usize, sizes: &[usize]) -> Result<Vec<Var>> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || sizes.iter().sum::<usize>() != shape[axis] {
            return Err(Error::dim("split", format!("sizes {sizes:?} do not partition axis {axis} of {shape:?}")));
        }
        let mut start = 0;
        let mut out = Vec::with_capacity(sizes.len());
        for &s in sizes {
            out.push(self.slice(a, axis, start, s)?);
            start += s;
        }
        Ok(out)
    }

    /// Splits `axis` into `parts` equal pieces.
    pub fn split(&mut self, a: Var, axis: usize, parts: usize) -> Result<Vec<Var>> {
        let shape = self.shape(a).to_vec();
        if parts == 0 || axis >= shape.len() || !shape[axis].is_multiple_of(parts) {
            return Err(Error::dim("split", format!("cannot split axis {axis} of {shape:?} into {parts}")));
        }
        self.split_sizes(a, axis, &vec![shape[axis] / parts; parts])
    }
}

fn slice_axis<T: Scalar>(x: &Tensor<T>, axis: usize, start: usize, len: usize, out_shape: &[usize]) -> Tensor<T> {
    let (outer, full, inner) = axis_extents(x.shape(), axis);
    let mut data = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        data.extend_from_slice(&x.data()[(o * full + start) * inner..][..len * inner]);
    }
    Tensor::new(out_shape, data).expect("slice shape")
}
