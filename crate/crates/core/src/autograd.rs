//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Tape`] records every operation applied to its [`Var`] handles. Calling
//! [`Tape::backward`] on a scalar walks the record in reverse and returns the
//! gradient of that scalar with respect to every trainable parameter and every
//! tracked input. Parameters live in a [`ParamStore`] and are read onto the tape
//! by [`Tape::param`]; frozen parameters enter the graph as constants.

use std::collections::BTreeMap;
use std::sync::Arc;

use ndarray::{Array2, ArrayD, ArrayView2, Axis, IxDyn, Zip};

use crate::params::{ParamId, ParamStore};

pub type Tensor = ArrayD<f64>;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

type BackwardFn = Box<dyn Fn(&Tensor) -> Vec<Option<Tensor>> + Send + Sync>;

enum Op {
    Leaf,
    Param(ParamId),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    MatMul(Var, Var),
    BatchMatMul(Var, Var),
    Permute {
        x: Var,
        inverse: Vec<usize>,
    },
    Reshape(Var),
    Softmax {
        x: Var,
        axis: usize,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Tensor,
        inv_std: Tensor,
    },
    Gelu(Var),
    Relu(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeometry,
        cols: Array2<f64>,
    },
    Resample {
        x: Var,
        rows: Arc<Array2<f64>>,
        cols: Arc<Array2<f64>>,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Sum(Var),
    Custom {
        inputs: Vec<Var>,
        backward: BackwardFn,
    },
}

struct Node {
    value: Arc<Tensor>,
    op: Op,
    needs_grad: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct ConvGeometry {
    batch: usize,
    in_channels: usize,
    in_h: usize,
    in_w: usize,
    kernel_h: usize,
    kernel_w: usize,
    stride: usize,
    pad: usize,
    out_h: usize,
    out_w: usize,
}

/// Operation record for one forward pass.
pub struct Tape {
    nodes: Vec<Node>,
    grad_enabled: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: true,
        }
    }

    /// A tape that keeps values but records no backward information.
    pub fn inference() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: false,
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.push_shared(Arc::new(value), op, needs_grad)
    }

    fn push_shared(&mut self, value: Arc<Tensor>, op: Op, needs_grad: bool) -> Var {
        let needs_grad = needs_grad && self.grad_enabled;
        let op = if needs_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Untracked input.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Tracked input: gradients with respect to it are reported by `backward`.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Read a parameter onto the tape. Frozen parameters become constants.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let p = store.get(id);
        self.push_shared(p.shared_value(), Op::Param(id), p.trainable)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) + self.value(b);
        let ng = self.needs(a) || self.needs(b);
        self.push(value, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) - self.value(b);
        let ng = self.needs(a) || self.needs(b);
        self.push(value, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) * self.value(b);
        let ng = self.needs(a) || self.needs(b);
        self.push(value, Op::Mul(a, b), ng)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let value = self.value(a) * factor;
        let ng = self.needs(a);
        self.push(value, Op::Scale(a, factor), ng)
    }

    /// `x · wᵀ + b` over the last axis of `x`, with `w` laid out `[out, in]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w);
        assert_eq!(ws.len(), 2, "linear weight must be 2-D");
        let (out_f, in_f) = (ws[0], ws[1]);
        assert_eq!(*xs.last().expect("linear input is scalar"), in_f, "linear input width");
        let x2 = as_matrix(self.value(x), in_f);
        let w2 = self.value(w).view().into_dimensionality::<ndarray::Ix2>().unwrap();
        let mut y = x2.dot(&w2.t());
        if let Some(b) = b {
            let bv = self.value(b).view().into_shape_with_order(out_f).expect("bias shape");
            y += &bv;
        }
        let mut out_shape = xs;
        *out_shape.last_mut().unwrap() = out_f;
        let value = standard(y).into_shape_with_order(IxDyn(&out_shape)).unwrap();
        let ng = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        self.push(value, Op::Linear { x, w, b }, ng)
    }

    /// `a · b` where `b` is a 2-D matrix and `a` has any number of leading axes.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let bs = self.shape(b).to_vec();
        assert_eq!(bs.len(), 2, "matmul rhs must be 2-D");
        let a_shape = self.shape(a).to_vec();
        let a2 = as_matrix(self.value(a), bs[0]);
        let b2 = self.value(b).view().into_dimensionality::<ndarray::Ix2>().unwrap();
        let y = a2.dot(&b2);
        let mut out_shape = a_shape;
        *out_shape.last_mut().unwrap() = bs[1];
        let value = standard(y).into_shape_with_order(IxDyn(&out_shape)).unwrap();
        let ng = self.needs(a) || self.needs(b);
        self.push(value, Op::MatMul(a, b), ng)
    }

    /// Batched product `[B, m, k] · [B, k, n] → [B, m, n]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Var {
        let value = bmm_values(self.value(a), self.value(b), false, false);
        let ng = self.needs(a) || self.needs(b);
        self.push(value, Op::BatchMatMul(a, b), ng)
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Var {
        let value = self
            .value(x)
            .view()
            .permuted_axes(IxDyn(axes))
            .as_standard_layout()
            .into_owned();
        let mut inverse = vec![0; axes.len()];
        for (i, &a) in axes.iter().enumerate() {
            inverse[a] = i;
        }
        let ng = self.needs(x);
        self.push(value, Op::Permute { x, inverse }, ng)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let value = self
            .value(x)
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order(IxDyn(shape))
            .unwrap_or_else(|_| panic!("cannot reshape {:?} to {:?}", self.shape(x), shape));
        let ng = self.needs(x);
        self.push(value, Op::Reshape(x), ng)
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Var {
        let mut value = self.value(x).clone();
        for mut lane in value.lanes_mut(Axis(axis)) {
            let max = lane.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            lane.mapv_inplace(|v| (v - max).exp());
            let sum = lane.sum();
            lane.mapv_inplace(|v| v / sum);
        }
        let ng = self.needs(x);
        self.push(value, Op::Softmax { x, axis }, ng)
    }

    /// Normalize over the last axis, then apply the affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let d = *xv.shape().last().unwrap();
        let x2 = as_matrix(xv, d);
        let rows = x2.nrows();
        let mut xhat = Array2::<f64>::zeros((rows, d));
        let mut inv_std = ndarray::Array1::<f64>::zeros(rows);
        for (r, row) in x2.outer_iter().enumerate() {
            let mean = row.sum() / d as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for (o, v) in xhat.row_mut(r).iter_mut().zip(row.iter()) {
                *o = (v - mean) * is;
            }
        }
        let g = self.value(gamma).view().into_shape_with_order(d).expect("gamma shape");
        let b = self.value(beta).view().into_shape_with_order(d).expect("beta shape");
        let y = &xhat * &g + &b;
        let value = standard(y).into_shape_with_order(IxDyn(xv.shape())).unwrap();
        let ng = self.needs(x) || self.needs(gamma) || self.needs(beta);
        let op = Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat: xhat.into_dyn(),
            inv_std: inv_std.into_dyn(),
        };
        self.push(value, op, ng)
    }

    /// Normalize over the channel axis (1) of an `[N, C, H, W]` map.
    pub fn channel_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let t = self.permute(x, &[0, 2, 3, 1]);
        let n = self.layer_norm(t, gamma, beta, eps);
        self.permute(n, &[0, 3, 1, 2])
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let value = self.value(x).mapv(|v| v * std_normal_cdf(v));
        let ng = self.needs(x);
        self.push(value, Op::Gelu(x), ng)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).mapv(|v| v.max(0.0));
        let ng = self.needs(x);
        self.push(value, Op::Relu(x), ng)
    }

    /// 2-D convolution with zero padding. `x: [N, C, H, W]`, `w: [O, C, kh, kw]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        assert_eq!(xs.len(), 4, "conv2d input must be [N, C, H, W], got {xs:?}");
        assert_eq!(ws.len(), 4, "conv2d weight must be [O, C, kh, kw]");
        assert_eq!(xs[1], ws[1], "conv2d channel mismatch: input {xs:?}, weight {ws:?}");
        assert!(stride >= 1);
        assert!(
            xs[2] + 2 * pad >= ws[2] && xs[3] + 2 * pad >= ws[3],
            "conv2d kernel {ws:?} larger than padded input {xs:?}"
        );
        let geom = ConvGeometry {
            batch: xs[0],
            in_channels: xs[1],
            in_h: xs[2],
            in_w: xs[3],
            kernel_h: ws[2],
            kernel_w: ws[3],
            stride,
            pad,
            out_h: (xs[2] + 2 * pad - ws[2]) / stride + 1,
            out_w: (xs[3] + 2 * pad - ws[3]) / stride + 1,
        };
        let cols = im2col(self.value(x), &geom);
        let out_c = ws[0];
        let w2 = self
            .value(w)
            .view()
            .into_shape_with_order((out_c, ws[1] * ws[2] * ws[3]))
            .expect("conv weight layout");
        let mut y = cols.dot(&w2.t());
        if let Some(b) = b {
            let bv = self.value(b).view().into_shape_with_order(out_c).expect("bias shape");
            y += &bv;
        }
        let value = standard(y)
            .into_shape_with_order((geom.batch, geom.out_h, geom.out_w, out_c))
            .unwrap()
            .permuted_axes([0, 3, 1, 2])
            .as_standard_layout()
            .into_owned()
            .into_dyn();
        let ng = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        let cols = if ng && self.grad_enabled {
            cols
        } else {
            Array2::zeros((0, 0))
        };
        self.push(value, Op::Conv2d { x, w, b, geom, cols }, ng)
    }

    /// Separable linear resampling of the last two axes: `Y = R · X · Cᵀ`.
    pub fn resample(&mut self, x: Var, rows: Arc<Array2<f64>>, cols: Arc<Array2<f64>>) -> Var {
        let value = resample_values(self.value(x), &rows, &cols, false);
        let ng = self.needs(x);
        self.push(value, Op::Resample { x, rows, cols }, ng)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let value = ndarray::concatenate(Axis(axis), &views).expect("concat shapes");
        let ng = parts.iter().any(|&p| self.needs(p));
        self.push(
            value,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            ng,
        )
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Var {
        let value = self
            .value(x)
            .slice_axis(Axis(axis), ndarray::Slice::from(start..end))
            .as_standard_layout()
            .into_owned();
        let ng = self.needs(x);
        self.push(value, Op::Slice { x, axis, start }, ng)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = ArrayD::from_elem(IxDyn(&[]), self.value(x).sum());
        let ng = self.needs(x);
        self.push(value, Op::Sum(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len().max(1) as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Record an operation whose value and vector-Jacobian product are supplied
    /// by the caller. `backward` maps the output gradient to one gradient per
    /// input (or `None` where no gradient flows).
    pub fn custom(
        &mut self,
        inputs: &[Var],
        value: Tensor,
        backward: impl Fn(&Tensor) -> Vec<Option<Tensor>> + Send + Sync + 'static,
    ) -> Var {
        let ng = inputs.iter().any(|&i| self.needs(i));
        self.push(
            value,
            Op::Custom {
                inputs: inputs.to_vec(),
                backward: Box::new(backward),
            },
            ng,
        )
    }

    /// Differentiate the scalar `root` with respect to everything tracked.
    pub fn backward(&self, root: Var) -> Gradients {
        assert!(
            self.value(root).len() == 1,
            "backward needs a scalar, got shape {:?}",
            self.shape(root)
        );
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut param_grads: BTreeMap<ParamId, Tensor> = BTreeMap::new();
        if !self.needs(root) {
            return Gradients { grads, param_grads };
        }
        grads[root.0] = Some(ArrayD::from_elem(self.value(root).raw_dim(), 1.0));

        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let g = match &node.op {
                Op::Leaf | Op::Param(_) => match &grads[idx] {
                    Some(g) => g.clone(),
                    None => continue,
                },
                _ => match grads[idx].take() {
                    Some(g) => g,
                    None => continue,
                },
            };
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => accumulate_map(&mut param_grads, *id, g),
                Op::Add(a, b) => {
                    let ga = sum_to_shape(&g, self.shape(*a));
                    let gb = sum_to_shape(&g, self.shape(*b));
                    self.acc(&mut grads, *a, ga);
                    self.acc(&mut grads, *b, gb);
                }
                Op::Sub(a, b) => {
                    let ga = sum_to_shape(&g, self.shape(*a));
                    let gb = sum_to_shape(&g, self.shape(*b)).mapv(|v| -v);
                    self.acc(&mut grads, *a, ga);
                    self.acc(&mut grads, *b, gb);
                }
                Op::Mul(a, b) => {
                    if self.needs(*a) {
                        let ga = sum_to_shape(&(&g * self.value(*b)), self.shape(*a));
                        self.acc(&mut grads, *a, ga);
                    }
                    if self.needs(*b) {
                        let gb = sum_to_shape(&(&g * self.value(*a)), self.shape(*b));
                        self.acc(&mut grads, *b, gb);
                    }
                }
                Op::Scale(a, f) => self.acc(&mut grads, *a, g * *f),
                Op::Linear { x, w, b } => {
                    let wv = self.value(*w).view().into_dimensionality::<ndarray::Ix2>().unwrap();
                    let (out_f, in_f) = (wv.nrows(), wv.ncols());
                    let g2 = as_matrix(&g, out_f);
                    if self.needs(*x) {
                        let gx = standard(g2.dot(&wv)).into_shape_with_order(IxDyn(self.shape(*x))).unwrap();
                        self.acc(&mut grads, *x, gx);
                    }
                    if self.needs(*w) {
                        let x2 = as_matrix(self.value(*x), in_f);
                        let gw = g2.t().dot(&x2).into_dyn();
                        self.acc(&mut grads, *w, gw);
                    }
                    if let Some(b) = b {
                        if self.needs(*b) {
                            let gb = g2
                                .sum_axis(Axis(0))
                                .into_shape_with_order(IxDyn(self.shape(*b)))
                                .unwrap();
                            self.acc(&mut grads, *b, gb);
                        }
                    }
                }
                Op::MatMul(a, b) => {
                    let bv = self.value(*b).view().into_dimensionality::<ndarray::Ix2>().unwrap();
                    let g2 = as_matrix(&g, bv.ncols());
                    if self.needs(*a) {
                        let ga = standard(g2.dot(&bv.t())).into_shape_with_order(IxDyn(self.shape(*a))).unwrap();
                        self.acc(&mut grads, *a, ga);
                    }
                    if self.needs(*b) {
                        let a2 = as_matrix(self.value(*a), bv.nrows());
                        self.acc(&mut grads, *b, a2.t().dot(&g2).into_dyn());
                    }
                }
                Op::BatchMatMul(a, b) => {
                    if self.needs(*a) {
                        let ga = bmm_values(&g, self.value(*b), false, true);
                        self.acc(&mut grads, *a, ga);
                    }
                    if self.needs(*b) {
                        let gb = bmm_values(self.value(*a), &g, true, false);
                        self.acc(&mut grads, *b, gb);
                    }
                }
                Op::Permute { x, inverse } => {
                    let gx = g
                        .view()
                        .permuted_axes(IxDyn(inverse))
                        .as_standard_layout()
                        .into_owned();
                    self.acc(&mut grads, *x, gx);
                }
                Op::Reshape(x) => {
                    let gx = g
                        .as_standard_layout()
                        .into_owned()
                        .into_shape_with_order(IxDyn(self.shape(*x)))
                        .unwrap();
                    self.acc(&mut grads, *x, gx);
                }
                Op::Softmax { x, axis } => {
                    let y = &node.value;
                    let mut gx = &g * &**y;
                    let sums = gx.sum_axis(Axis(*axis)).insert_axis(Axis(*axis));
                    Zip::from(&mut gx).and(&**y).and_broadcast(&sums).for_each(|o, &yv, &s| {
                        *o -= yv * s;
                    });
                    self.acc(&mut grads, *x, gx);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let d = *self.shape(*x).last().unwrap();
                    let g2 = as_matrix(&g, d);
                    let xh = xhat.view().into_dimensionality::<ndarray::Ix2>().unwrap();
                    if self.needs(*gamma) {
                        let gg = (&g2 * &xh).sum_axis(Axis(0));
                        let gg = gg.into_shape_with_order(IxDyn(self.shape(*gamma))).unwrap();
                        self.acc(&mut grads, *gamma, gg);
                    }
                    if self.needs(*beta) {
                        let gb = g2.sum_axis(Axis(0));
                        let gb = gb.into_shape_with_order(IxDyn(self.shape(*beta))).unwrap();
                        self.acc(&mut grads, *beta, gb);
                    }
                    if self.needs(*x) {
                        let gv = self.value(*gamma).view().into_shape_with_order(d).unwrap();
                        let gxh = &g2 * &gv;
                        let mut gx = Array2::<f64>::zeros(gxh.raw_dim());
                        let df = d as f64;
                        for r in 0..gxh.nrows() {
                            let gr = gxh.row(r);
                            let xr = xh.row(r);
                            let s1 = gr.sum();
                            let s2 = gr.dot(&xr);
                            let is = inv_std[[r]];
                            for c in 0..d {
                                gx[[r, c]] = is / df * (df * gr[c] - s1 - xr[c] * s2);
                            }
                        }
                        let gx = gx.into_shape_with_order(IxDyn(self.shape(*x))).unwrap();
                        self.acc(&mut grads, *x, gx);
                    }
                }
                Op::Gelu(x) => {
                    let mut gx = g;
                    Zip::from(&mut gx).and(self.value(*x)).for_each(|o, &v| {
                        *o *= std_normal_cdf(v) + v * std_normal_pdf(v);
                    });
                    self.acc(&mut grads, *x, gx);
                }
                Op::Relu(x) => {
                    let mut gx = g;
                    Zip::from(&mut gx).and(self.value(*x)).for_each(|o, &v| {
                        if v <= 0.0 {
                            *o = 0.0;
                        }
                    });
                    self.acc(&mut grads, *x, gx);
                }
                Op::Conv2d { x, w, b, geom, cols } => {
                    let out_c = self.shape(*w)[0];
                    let g2 = g
                        .view()
                        .permuted_axes(IxDyn(&[0, 2, 3, 1]))
                        .as_standard_layout()
                        .into_owned()
                        .into_shape_with_order((geom.batch * geom.out_h * geom.out_w, out_c))
                        .unwrap();
                    if self.needs(*w) {
                        let gw = g2.t().dot(cols);
                        let gw = standard(gw).into_shape_with_order(IxDyn(self.shape(*w))).unwrap();
                        self.acc(&mut grads, *w, gw);
                    }
                    if let Some(b) = b {
                        if self.needs(*b) {
                            let gb = g2.sum_axis(Axis(0)).into_dyn();
                            self.acc(&mut grads, *b, gb);
                        }
                    }
                    if self.needs(*x) {
                        let ws = self.shape(*w);
                        let w2 = self
                            .value(*w)
                            .view()
                            .into_shape_with_order((out_c, ws[1] * ws[2] * ws[3]))
                            .unwrap();
                        let gcols = g2.dot(&w2);
                        let gx = col2im(&gcols, geom);
                        self.acc(&mut grads, *x, gx);
                    }
                }
                Op::Resample { x, rows, cols } => {
                    let gx = resample_values(&g, rows, cols, true);
                    self.acc(&mut grads, *x, gx);
                }
                Op::Concat { parts, axis } => {
                    let mut start = 0;
                    for &p in parts {
                        let len = self.shape(p)[*axis];
                        if self.needs(p) {
                            let gp = g
                                .slice_axis(Axis(*axis), ndarray::Slice::from(start..start + len))
                                .as_standard_layout()
                                .into_owned();
                            self.acc(&mut grads, p, gp);
                        }
                        start += len;
                    }
                }
                Op::Slice { x, axis, start } => {
                    let mut gx = ArrayD::zeros(IxDyn(self.shape(*x)));
                    let len = g.shape()[*axis];
                    gx.slice_axis_mut(Axis(*axis), ndarray::Slice::from(*start..*start + len))
                        .assign(&g);
                    self.acc(&mut grads, *x, gx);
                }
                Op::Sum(x) => {
                    let s = g.iter().next().copied().unwrap_or(0.0);
                    let gx = ArrayD::from_elem(IxDyn(self.shape(*x)), s);
                    self.acc(&mut grads, *x, gx);
                }
                Op::Custom { inputs, backward } => {
                    for (&i, gi) in inputs.iter().zip(backward(&g)) {
                        if let Some(gi) = gi {
                            if self.needs(i) {
                                self.acc(&mut grads, i, gi);
                            }
                        }
                    }
                }
            }
        }
        Gradients { grads, param_grads }
    }

    fn acc(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.needs(v) {
            return;
        }
        debug_assert_eq!(g.shape(), self.shape(v), "gradient shape for {v:?}");
        match &mut grads[v.0] {
            Some(existing) => *existing += &g,
            slot @ None => *slot = Some(g),
        }
    }
}

fn accumulate_map(map: &mut BTreeMap<ParamId, Tensor>, id: ParamId, g: Tensor) {
    match map.get_mut(&id) {
        Some(existing) => *existing += &g,
        None => {
            map.insert(id, g);
        }
    }
}

/// Result of [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    param_grads: BTreeMap<ParamId, Tensor>,
}

impl Gradients {
    /// Gradient with respect to a tracked input, if any flowed to it.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.param_grads.get(&id)
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.param_grads.iter().map(|(k, v)| (*k, v))
    }

    pub fn into_params(self) -> BTreeMap<ParamId, Tensor> {
        self.param_grads
    }
}

pub(crate) fn std_normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + statrs::function::erf::erf(x / std::f64::consts::SQRT_2))
}

fn std_normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Row-major copy if `a` is not already row-major; `dot` may return
/// column-major results for degenerate shapes.
fn standard<D: ndarray::Dimension>(a: ndarray::Array<f64, D>) -> ndarray::Array<f64, D> {
    if a.is_standard_layout() {
        a
    } else {
        a.as_standard_layout().into_owned()
    }
}

/// View a tensor as `[rows, width]`, collapsing all leading axes.
fn as_matrix(t: &Tensor, width: usize) -> Array2<f64> {
    let rows = if width == 0 { 0 } else { t.len() / width };
    t.as_standard_layout()
        .into_owned()
        .into_shape_with_order((rows, width))
        .expect("matrix view")
}

/// Reduce a broadcast gradient back to `shape` (numpy broadcasting rules).
pub(crate) fn sum_to_shape(g: &Tensor, shape: &[usize]) -> Tensor {
    if g.shape() == shape {
        return g.clone();
    }
    let mut out = g.clone();
    while out.ndim() > shape.len() {
        out = out.sum_axis(Axis(0));
    }
    for (axis, &dim) in shape.iter().enumerate() {
        if dim == 1 && out.shape()[axis] != 1 {
            out = out.sum_axis(Axis(axis)).insert_axis(Axis(axis));
        }
    }
    out
}

fn pick(m: ArrayView2<'_, f64>, transpose: bool) -> ArrayView2<'_, f64> {
    if transpose {
        m.reversed_axes()
    } else {
        m
    }
}

fn bmm_values(a: &Tensor, b: &Tensor, transpose_a: bool, transpose_b: bool) -> Tensor {
    let a3 = a.view().into_dimensionality::<ndarray::Ix3>().expect("bmm lhs must be 3-D");
    let b3 = b.view().into_dimensionality::<ndarray::Ix3>().expect("bmm rhs must be 3-D");
    assert_eq!(a3.shape()[0], b3.shape()[0], "bmm batch mismatch");
    let m = if transpose_a { a3.shape()[2] } else { a3.shape()[1] };
    let n = if transpose_b { b3.shape()[1] } else { b3.shape()[2] };
    let mut out = ndarray::Array3::<f64>::zeros((a3.shape()[0], m, n));
    for ((ai, bi), mut oi) in a3.outer_iter().zip(b3.outer_iter()).zip(out.outer_iter_mut()) {
        let lhs = pick(ai, transpose_a);
        let rhs = pick(bi, transpose_b);
        ndarray::linalg::general_mat_mul(1.0, &lhs, &rhs, 0.0, &mut oi);
    }
    out.into_dyn()
}

fn resample_values(x: &Tensor, rows: &Array2<f64>, cols: &Array2<f64>, adjoint: bool) -> Tensor {
    let shape = x.shape();
    let nd = shape.len();
    assert!(nd >= 2, "resample needs at least two axes");
    let (h, w) = (shape[nd - 2], shape[nd - 1]);
    let (r, c) = if adjoint {
        (rows.t(), cols.t())
    } else {
        (rows.view(), cols.view())
    };
    assert_eq!(r.ncols(), h, "resample row operator does not match height");
    assert_eq!(c.ncols(), w, "resample column operator does not match width");
    let (oh, ow) = (r.nrows(), c.nrows());
    let lead: usize = shape[..nd - 2].iter().product();
    let x3 = x
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order((lead, h, w))
        .unwrap();
    let mut out = ndarray::Array3::<f64>::zeros((lead, oh, ow));
    for (xi, mut oi) in x3.outer_iter().zip(out.outer_iter_mut()) {
        let tmp = r.dot(&xi);
        ndarray::linalg::general_mat_mul(1.0, &tmp, &c.t(), 0.0, &mut oi);
    }
    let mut out_shape = shape.to_vec();
    out_shape[nd - 2] = oh;
    out_shape[nd - 1] = ow;
    standard(out).into_shape_with_order(IxDyn(&out_shape)).unwrap()
}

fn im2col(x: &Tensor, g: &ConvGeometry) -> Array2<f64> {
    let xs = x.as_standard_layout();
    let data = xs.as_slice().expect("standard layout");
    let k = g.in_channels * g.kernel_h * g.kernel_w;
    let mut cols = Array2::<f64>::zeros((g.batch * g.out_h * g.out_w, k));
    let out = cols.as_slice_mut().unwrap();
    let plane = g.in_h * g.in_w;
    let mut row = 0;
    for n in 0..g.batch {
        let base = n * g.in_channels * plane;
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let dst = &mut out[row * k..(row + 1) * k];
                let mut j = 0;
                for c in 0..g.in_channels {
                    let cbase = base + c * plane;
                    for ky in 0..g.kernel_h {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        for kx in 0..g.kernel_w {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if iy >= 0 && ix >= 0 && (iy as usize) < g.in_h && (ix as usize) < g.in_w {
                                dst[j] = data[cbase + iy as usize * g.in_w + ix as usize];
                            }
                            j += 1;
                        }
                    }
                }
                row += 1;
            }
        }
    }
    cols
}

fn col2im(cols: &Array2<f64>, g: &ConvGeometry) -> Tensor {
    let mut x = ArrayD::<f64>::zeros(IxDyn(&[g.batch, g.in_channels, g.in_h, g.in_w]));
    let data = x.as_slice_mut().unwrap();
    let cs = cols.as_standard_layout();
    let src = cs.as_slice().unwrap();
    let k = g.in_channels * g.kernel_h * g.kernel_w;
    let plane = g.in_h * g.in_w;
    let mut row = 0;
    for n in 0..g.batch {
        let base = n * g.in_channels * plane;
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let s = &src[row * k..(row + 1) * k];
                let mut j = 0;
                for c in 0..g.in_channels {
                    let cbase = base + c * plane;
                    for ky in 0..g.kernel_h {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        for kx in 0..g.kernel_w {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if iy >= 0 && ix >= 0 && (iy as usize) < g.in_h && (ix as usize) < g.in_w {
                                data[cbase + iy as usize * g.in_w + ix as usize] += s[j];
                            }
                            j += 1;
                        }
                    }
                }
                row += 1;
            }
        }
    }
    x
}
