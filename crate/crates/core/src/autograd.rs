//! Reverse-mode automatic differentiation over `f64` ndarrays.
//!
//! Small tape-free graph: every `Tensor` owns its parents through `Rc`, and
//! `backward()` walks the graph in reverse topological order. All arithmetic
//! is 64-bit and single-threaded, which keeps training and generation
//! bit-reproducible.

use ndarray::{Array1, Array2, Array3, ArrayD, Axis, Ix1, Ix2, Ix3, IxDyn};
use std::cell::{Ref, RefCell};
use std::collections::HashSet;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

static NEXT_ID: AtomicU64 = AtomicU64::new(0);

/// Probabilities below this are clamped inside log terms of the GAN losses.
pub const LOG_CLAMP: f64 = 1e-7;

type BackwardFn = Box<dyn Fn(&ArrayD<f64>, &[Tensor])>;

struct Node {
    id: u64,
    value: RefCell<ArrayD<f64>>,
    grad: RefCell<Option<ArrayD<f64>>>,
    requires_grad: bool,
    parents: Vec<Tensor>,
    backward: Option<BackwardFn>,
}

#[derive(Clone)]
pub struct Tensor {
    node: Rc<Node>,
}

impl Tensor {
    pub fn leaf(value: ArrayD<f64>) -> Tensor {
        Tensor::new(value, true, Vec::new(), None)
    }

    pub fn constant(value: ArrayD<f64>) -> Tensor {
        Tensor::new(value, false, Vec::new(), None)
    }

    pub fn scalar_const(v: f64) -> Tensor {
        Tensor::constant(ArrayD::from_elem(IxDyn(&[]), v))
    }

    fn new(
        value: ArrayD<f64>,
        leaf_requires: bool,
        parents: Vec<Tensor>,
        backward: Option<BackwardFn>,
    ) -> Tensor {
        let requires_grad = leaf_requires || parents.iter().any(|p| p.requires_grad());
        Tensor {
            node: Rc::new(Node {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                value: RefCell::new(value),
                grad: RefCell::new(None),
                requires_grad,
                parents,
                backward,
            }),
        }
    }

    fn op(parents: Vec<Tensor>, value: ArrayD<f64>, backward: BackwardFn) -> Tensor {
        Tensor::new(value, false, parents, Some(backward))
    }

    pub fn array(&self) -> Ref<'_, ArrayD<f64>> {
        self.node.value.borrow()
    }

    pub fn to_array(&self) -> ArrayD<f64> {
        self.node.value.borrow().clone()
    }

    /// Overwrite a leaf value in place (optimizer updates, finite differences).
    pub fn set_value(&self, v: ArrayD<f64>) {
        *self.node.value.borrow_mut() = v;
    }

    pub fn shape(&self) -> Vec<usize> {
        self.node.value.borrow().shape().to_vec()
    }

    pub fn scalar(&self) -> f64 {
        let v = self.node.value.borrow();
        debug_assert_eq!(v.len(), 1);
        *v.iter().next().expect("scalar tensor is empty")
    }

    pub fn requires_grad(&self) -> bool {
        self.node.requires_grad
    }

    pub fn grad(&self) -> Option<ArrayD<f64>> {
        self.node.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.node.grad.borrow_mut() = None;
    }

    fn accum_grad(&self, g: &ArrayD<f64>) {
        if !self.node.requires_grad {
            return;
        }
        let mut slot = self.node.grad.borrow_mut();
        match slot.as_mut() {
            Some(acc) => *acc += g,
            None => *slot = Some(g.clone()),
        }
    }

    /// Cut the graph: same value, no gradient flow.
    pub fn detach(&self) -> Tensor {
        Tensor::constant(self.to_array())
    }

    /// Backpropagate from a scalar output. Gradients accumulate into every
    /// reachable node with `requires_grad`.
    pub fn backward(&self) {
        assert_eq!(
            self.node.value.borrow().len(),
            1,
            "backward() requires a scalar output"
        );
        let order = topo_order(self);
        self.accum_grad(&ArrayD::from_elem(
            self.node.value.borrow().raw_dim(),
            1.0,
        ));
        for t in order.iter().rev() {
            if !t.node.requires_grad {
                continue;
            }
            if let Some(f) = &t.node.backward {
                let g = t.node.grad.borrow().clone();
                if let Some(g) = g {
                    f(&g, &t.node.parents);
                }
            }
        }
    }
}

fn topo_order(root: &Tensor) -> Vec<Tensor> {
    let mut order = Vec::new();
    let mut seen: HashSet<u64> = HashSet::new();
    // Iterative post-order DFS; graphs from long rollouts get deep.
    let mut stack: Vec<(Tensor, usize)> = vec![(root.clone(), 0)];
    seen.insert(root.node.id);
    while let Some((t, child)) = stack.pop() {
        if child < t.node.parents.len() {
            let next = t.node.parents[child].clone();
            stack.push((t.clone(), child + 1));
            if next.node.requires_grad && seen.insert(next.node.id) {
                stack.push((next, 0));
            }
        } else {
            order.push(t);
        }
    }
    order
}

// ---------------------------------------------------------------------------
// Elementwise and scalar ops
// ---------------------------------------------------------------------------

impl Tensor {
    pub fn add(&self, other: &Tensor) -> Tensor {
        assert_eq!(self.shape(), other.shape(), "add: shape mismatch");
        let v = &*self.array() + &*other.array();
        Tensor::op(
            vec![self.clone(), other.clone()],
            v,
            Box::new(|g, p| {
                p[0].accum_grad(g);
                p[1].accum_grad(g);
            }),
        )
    }

    pub fn sub(&self, other: &Tensor) -> Tensor {
        assert_eq!(self.shape(), other.shape(), "sub: shape mismatch");
        let v = &*self.array() - &*other.array();
        Tensor::op(
            vec![self.clone(), other.clone()],
            v,
            Box::new(|g, p| {
                p[0].accum_grad(g);
                p[1].accum_grad(&(-g));
            }),
        )
    }

    pub fn mul(&self, other: &Tensor) -> Tensor {
        assert_eq!(self.shape(), other.shape(), "mul: shape mismatch");
        let v = &*self.array() * &*other.array();
        Tensor::op(
            vec![self.clone(), other.clone()],
            v,
            Box::new(|g, p| {
                p[0].accum_grad(&(g * &*p[1].array()));
                p[1].accum_grad(&(g * &*p[0].array()));
            }),
        )
    }

    pub fn add_scalar(&self, s: f64) -> Tensor {
        let v = &*self.array() + s;
        Tensor::op(
            vec![self.clone()],
            v,
            Box::new(|g, p| p[0].accum_grad(g)),
        )
    }

    pub fn mul_scalar(&self, s: f64) -> Tensor {
        let v = &*self.array() * s;
        Tensor::op(
            vec![self.clone()],
            v,
            Box::new(move |g, p| p[0].accum_grad(&(g * s))),
        )
    }

    /// Elementwise multiplication by a constant (non-differentiated) array.
    pub fn mul_const(&self, c: &ArrayD<f64>) -> Tensor {
        assert_eq!(self.shape(), c.shape().to_vec(), "mul_const: shape mismatch");
        let v = &*self.array() * c;
        let c = c.clone();
        Tensor::op(
            vec![self.clone()],
            v,
            Box::new(move |g, p| p[0].accum_grad(&(g * &c))),
        )
    }

    pub fn relu(&self) -> Tensor {
        let v = self.array().mapv(|x| x.max(0.0));
        Tensor::op(
            vec![self.clone()],
            v,
            Box::new(|g, p| {
                let mask = p[0].array().mapv(|x| if x > 0.0 { 1.0 } else { 0.0 });
                p[0].accum_grad(&(g * &mask));
            }),
        )
    }

    pub fn leaky_relu(&self, slope: f64) -> Tensor {
        let v = self.array().mapv(|x| if x > 0.0 { x } else { slope * x });
        Tensor::op(
            vec![self.clone()],
            v,
            Box::new(move |g, p| {
                let mask = p[0]
                    .array()
                    .mapv(|x| if x > 0.0 { 1.0 } else { slope });
                p[0].accum_grad(&(g * &mask));
            }),
        )
    }

    pub fn tanh_t(&self) -> Tensor {
        let v = self.array().mapv(f64::tanh);
        Tensor::op(
            vec![self.clone()],
            v,
            Box::new(|g, p| {
                let d = p[0].array().mapv(|x| 1.0 - x.tanh().powi(2));
                p[0].accum_grad(&(g * &d));
            }),
        )
    }

    pub fn square(&self) -> Tensor {
        self.mul(self)
    }

    pub fn sum_all(&self) -> Tensor {
        let v = ArrayD::from_elem(IxDyn(&[]), self.array().sum());
        Tensor::op(
            vec![self.clone()],
            v,
            Box::new(|g, p| {
                let s = *g.iter().next().unwrap();
                let full = ArrayD::from_elem(p[0].array().raw_dim(), s);
                p[0].accum_grad(&full);
            }),
        )
    }

    pub fn mean_all(&self) -> Tensor {
        let n = self.array().len() as f64;
        self.sum_all().mul_scalar(1.0 / n)
    }

    /// `-log(clamp(sigmoid(x), 1e-7, 1))`, elementwise; stable softplus form.
    pub fn neg_log_sigmoid(&self) -> Tensor {
        let clamp_max = -LOG_CLAMP.ln();
        let v = self.array().mapv(|x| softplus(-x).min(clamp_max));
        Tensor::op(
            vec![self.clone()],
            v,
            Box::new(move |g, p| {
                let d = p[0].array().mapv(|x| {
                    if softplus(-x) >= clamp_max {
                        0.0
                    } else {
                        sigmoid(x) - 1.0
                    }
                });
                p[0].accum_grad(&(g * &d));
            }),
        )
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

pub fn softplus(x: f64) -> f64 {
    // log(1 + e^x), stable for large |x|
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

// ---------------------------------------------------------------------------
// Matrix ops (2-D)
// ---------------------------------------------------------------------------

fn as2(a: &ArrayD<f64>) -> Array2<f64> {
    a.view().into_dimensionality::<Ix2>().unwrap().to_owned()
}

fn as1(a: &ArrayD<f64>) -> Array1<f64> {
    a.view().into_dimensionality::<Ix1>().unwrap().to_owned()
}

impl Tensor {
    /// `A (n×k) · B (k×m)`.
    pub fn matmul(&self, other: &Tensor) -> Tensor {
        let a = as2(&self.array());
        let b = as2(&other.array());
        assert_eq!(a.ncols(), b.nrows(), "matmul: inner dim mismatch");
        let v = a.dot(&b).into_dyn();
        Tensor::op(
            vec![self.clone(), other.clone()],
            v,
            Box::new(|g, p| {
                let g2 = as2(g);
                let a = as2(&p[0].array());
                let b = as2(&p[1].array());
                p[0].accum_grad(&g2.dot(&b.t()).into_dyn());
                p[1].accum_grad(&a.t().dot(&g2).into_dyn());
            }),
        )
    }

    /// `A (n×k) · Bᵀ (m×k)` → n×m.
    pub fn matmul_nt(&self, other: &Tensor) -> Tensor {
        let a = as2(&self.array());
        let b = as2(&other.array());
        assert_eq!(a.ncols(), b.ncols(), "matmul_nt: inner dim mismatch");
        let v = a.dot(&b.t()).into_dyn();
        Tensor::op(
            vec![self.clone(), other.clone()],
            v,
            Box::new(|g, p| {
                let g2 = as2(g);
                let a = as2(&p[0].array());
                let b = as2(&p[1].array());
                p[0].accum_grad(&g2.dot(&b).into_dyn());
                p[1].accum_grad(&g2.t().dot(&a).into_dyn());
            }),
        )
    }

    /// Add a bias row vector (len m) to every row of an n×m matrix.
    pub fn add_bias_rows(&self, bias: &Tensor) -> Tensor {
        let m = as2(&self.array());
        let b = as1(&bias.array());
        assert_eq!(m.ncols(), b.len(), "add_bias_rows: dim mismatch");
        let v = (&m + &b).into_dyn();
        Tensor::op(
            vec![self.clone(), bias.clone()],
            v,
            Box::new(|g, p| {
                let g2 = as2(g);
                p[0].accum_grad(&g2.clone().into_dyn());
                p[1].accum_grad(&g2.sum_axis(Axis(0)).into_dyn());
            }),
        )
    }

    /// Row-wise L2 normalization of an n×d matrix.
    pub fn normalize_rows(&self) -> Tensor {
        const EPS: f64 = 1e-12;
        let x = as2(&self.array());
        let mut v = x.clone();
        for mut row in v.rows_mut() {
            let n = (row.dot(&row) + EPS).sqrt();
            row.mapv_inplace(|e| e / n);
        }
        Tensor::op(
            vec![self.clone()],
            v.into_dyn(),
            Box::new(|g, p| {
                let g2 = as2(g);
                let x = as2(&p[0].array());
                let mut dx = Array2::<f64>::zeros(x.raw_dim());
                for i in 0..x.nrows() {
                    let xi = x.row(i);
                    let gi = g2.row(i);
                    let n = (xi.dot(&xi) + EPS).sqrt();
                    let dot = gi.dot(&xi);
                    for j in 0..x.ncols() {
                        dx[[i, j]] = gi[j] / n - xi[j] * dot / (n * n * n);
                    }
                }
                p[0].accum_grad(&dx.into_dyn());
            }),
        )
    }

    /// Per-row log-sum-exp of an n×m matrix → length-n vector.
    pub fn logsumexp_rows(&self) -> Tensor {
        let x = as2(&self.array());
        let v = Array1::from_iter(x.rows().into_iter().map(|r| {
            let m = r.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            m + r.iter().map(|&e| (e - m).exp()).sum::<f64>().ln()
        }));
        Tensor::op(
            vec![self.clone()],
            v.into_dyn(),
            Box::new(|g, p| {
                let g1 = as1(g);
                let x = as2(&p[0].array());
                let mut dx = Array2::<f64>::zeros(x.raw_dim());
                for i in 0..x.nrows() {
                    let r = x.row(i);
                    let m = r.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
                    let z: f64 = r.iter().map(|&e| (e - m).exp()).sum();
                    for j in 0..x.ncols() {
                        dx[[i, j]] = g1[i] * (x[[i, j]] - m).exp() / z;
                    }
                }
                p[0].accum_grad(&dx.into_dyn());
            }),
        )
    }

    /// Same data, new shape (element count must match).
    pub fn reshape(&self, shape: &[usize]) -> Tensor {
        let old = self.shape();
        let v = self
            .to_array()
            .into_shape(IxDyn(shape))
            .expect("reshape: element count mismatch");
        Tensor::op(
            vec![self.clone()],
            v,
            Box::new(move |g, p| {
                let back = g.clone().into_shape(IxDyn(&old)).unwrap();
                p[0].accum_grad(&back);
            }),
        )
    }

    /// Select rows of an n×d matrix by index (duplicates allowed).
    pub fn gather_rows(&self, indices: &[usize]) -> Tensor {
        let x = as2(&self.array());
        let d = x.ncols();
        let mut y = Array2::<f64>::zeros((indices.len(), d));
        for (k, &i) in indices.iter().enumerate() {
            y.row_mut(k).assign(&x.row(i));
        }
        let idx = indices.to_vec();
        Tensor::op(
            vec![self.clone()],
            y.into_dyn(),
            Box::new(move |g, p| {
                let g2 = as2(g);
                let sh = p[0].shape();
                let mut dx = Array2::<f64>::zeros((sh[0], sh[1]));
                for (k, &i) in idx.iter().enumerate() {
                    let mut row = dx.row_mut(i);
                    row += &g2.row(k);
                }
                p[0].accum_grad(&dx.into_dyn());
            }),
        )
    }

    /// Diagonal of an n×n matrix → length-n vector.
    pub fn take_diag(&self) -> Tensor {
        let x = as2(&self.array());
        assert_eq!(x.nrows(), x.ncols(), "take_diag: matrix not square");
        let v = Array1::from_iter((0..x.nrows()).map(|i| x[[i, i]]));
        Tensor::op(
            vec![self.clone()],
            v.into_dyn(),
            Box::new(|g, p| {
                let g1 = as1(g);
                let n = g1.len();
                let mut dx = Array2::<f64>::zeros((n, n));
                for i in 0..n {
                    dx[[i, i]] = g1[i];
                }
                p[0].accum_grad(&dx.into_dyn());
            }),
        )
    }
}

// ---------------------------------------------------------------------------
// Spatial ops (3-D, C×H×W)
// ---------------------------------------------------------------------------

fn as3(a: &ArrayD<f64>) -> Array3<f64> {
    a.view().into_dimensionality::<Ix3>().unwrap().to_owned()
}

fn im2col(
    x: &Array3<f64>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Array2<f64> {
    let (c, h, w) = x.dim();
    let mut col = Array2::<f64>::zeros((c * kh * kw, oh * ow));
    for ci in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ci * kh + ki) * kw + kj;
                for oi in 0..oh {
                    let ii = (oi * stride + ki) as isize - pad as isize;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    for oj in 0..ow {
                        let jj = (oj * stride + kj) as isize - pad as isize;
                        if jj < 0 || jj >= w as isize {
                            continue;
                        }
                        col[[row, oi * ow + oj]] = x[[ci, ii as usize, jj as usize]];
                    }
                }
            }
        }
    }
    col
}

#[allow(clippy::too_many_arguments)]
fn col2im(
    dcol: &Array2<f64>,
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Array3<f64> {
    let mut dx = Array3::<f64>::zeros((c, h, w));
    for ci in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ci * kh + ki) * kw + kj;
                for oi in 0..oh {
                    let ii = (oi * stride + ki) as isize - pad as isize;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    for oj in 0..ow {
                        let jj = (oj * stride + kj) as isize - pad as isize;
                        if jj < 0 || jj >= w as isize {
                            continue;
                        }
                        dx[[ci, ii as usize, jj as usize]] += dcol[[row, oi * ow + oj]];
                    }
                }
            }
        }
    }
    dx
}

pub fn conv_out_size(h: usize, k: usize, stride: usize, pad: usize) -> usize {
    assert!(h + 2 * pad >= k, "conv: input smaller than kernel");
    (h + 2 * pad - k) / stride + 1
}

impl Tensor {
    /// 2-D convolution. `self`: C×H×W, `weight`: O×C×kh×kw, `bias`: O.
    pub fn conv2d(&self, weight: &Tensor, bias: &Tensor, stride: usize, pad: usize) -> Tensor {
        let x = as3(&self.array());
        let wsh = weight.shape();
        let (o, c, kh, kw) = (wsh[0], wsh[1], wsh[2], wsh[3]);
        let (xc, h, w) = x.dim();
        assert_eq!(xc, c, "conv2d: channel mismatch");
        let oh = conv_out_size(h, kh, stride, pad);
        let ow = conv_out_size(w, kw, stride, pad);
        let col = im2col(&x, kh, kw, stride, pad, oh, ow);
        let wmat = weight
            .array()
            .view()
            .into_shape((o, c * kh * kw))
            .unwrap()
            .to_owned();
        let b = as1(&bias.array());
        let mut ymat = wmat.dot(&col);
        for (mut row, bv) in ymat.rows_mut().into_iter().zip(b.iter()) {
            row += *bv;
        }
        let y = ymat.into_shape((o, oh, ow)).unwrap();
        Tensor::op(
            vec![self.clone(), weight.clone(), bias.clone()],
            y.into_dyn(),
            Box::new(move |g, p| {
                let x = as3(&p[0].array());
                let g3 = as3(g);
                let gmat = g3.into_shape((o, oh * ow)).unwrap();
                // col is recomputed rather than saved; memory over time.
                let col = im2col(&x, kh, kw, stride, pad, oh, ow);
                if p[1].requires_grad() {
                    let dw = gmat.dot(&col.t());
                    p[1].accum_grad(&dw.into_shape((o, c, kh, kw)).unwrap().into_dyn());
                }
                if p[2].requires_grad() {
                    p[2].accum_grad(&gmat.sum_axis(Axis(1)).into_dyn());
                }
                if p[0].requires_grad() {
                    let wmat = p[1]
                        .array()
                        .view()
                        .into_shape((o, c * kh * kw))
                        .unwrap()
                        .to_owned();
                    let dcol = wmat.t().dot(&gmat);
                    let dx = col2im(&dcol, c, x.dim().1, x.dim().2, kh, kw, stride, pad, oh, ow);
                    p[0].accum_grad(&dx.into_dyn());
                }
            }),
        )
    }

    /// Nearest-neighbour 2× upsampling of C×H×W.
    pub fn upsample_nearest2(&self) -> Tensor {
        let x = as3(&self.array());
        let (c, h, w) = x.dim();
        let mut y = Array3::<f64>::zeros((c, h * 2, w * 2));
        for ci in 0..c {
            for i in 0..h {
                for j in 0..w {
                    let v = x[[ci, i, j]];
                    y[[ci, 2 * i, 2 * j]] = v;
                    y[[ci, 2 * i + 1, 2 * j]] = v;
                    y[[ci, 2 * i, 2 * j + 1]] = v;
                    y[[ci, 2 * i + 1, 2 * j + 1]] = v;
                }
            }
        }
        Tensor::op(
            vec![self.clone()],
            y.into_dyn(),
            Box::new(move |g, p| {
                let g3 = as3(g);
                let mut dx = Array3::<f64>::zeros((c, h, w));
                for ci in 0..c {
                    for i in 0..h {
                        for j in 0..w {
                            dx[[ci, i, j]] = g3[[ci, 2 * i, 2 * j]]
                                + g3[[ci, 2 * i + 1, 2 * j]]
                                + g3[[ci, 2 * i, 2 * j + 1]]
                                + g3[[ci, 2 * i + 1, 2 * j + 1]];
                        }
                    }
                }
                p[0].accum_grad(&dx.into_dyn());
            }),
        )
    }

    /// Average pooling with a square window of `factor`, stride `factor`.
    pub fn avg_pool2(&self, factor: usize) -> Tensor {
        let x = as3(&self.array());
        let (c, h, w) = x.dim();
        assert!(
            h % factor == 0 && w % factor == 0,
            "avg_pool2: size not divisible by factor"
        );
        let (oh, ow) = (h / factor, w / factor);
        let mut y = Array3::<f64>::zeros((c, oh, ow));
        let inv = 1.0 / (factor * factor) as f64;
        for ci in 0..c {
            for i in 0..oh {
                for j in 0..ow {
                    let mut s = 0.0;
                    for di in 0..factor {
                        for dj in 0..factor {
                            s += x[[ci, i * factor + di, j * factor + dj]];
                        }
                    }
                    y[[ci, i, j]] = s * inv;
                }
            }
        }
        Tensor::op(
            vec![self.clone()],
            y.into_dyn(),
            Box::new(move |g, p| {
                let g3 = as3(g);
                let mut dx = Array3::<f64>::zeros((c, h, w));
                for ci in 0..c {
                    for i in 0..oh {
                        for j in 0..ow {
                            let v = g3[[ci, i, j]] * inv;
                            for di in 0..factor {
                                for dj in 0..factor {
                                    dx[[ci, i * factor + di, j * factor + dj]] = v;
                                }
                            }
                        }
                    }
                }
                p[0].accum_grad(&dx.into_dyn());
            }),
        )
    }

    /// Instance normalization over spatial dims with per-channel affine params.
    pub fn instance_norm(&self, gamma: &Tensor, beta: &Tensor, eps: f64) -> Tensor {
        let x = as3(&self.array());
        let (c, h, w) = x.dim();
        let g1 = as1(&gamma.array());
        let b1 = as1(&beta.array());
        let n = (h * w) as f64;
        let mut y = Array3::<f64>::zeros((c, h, w));
        for ci in 0..c {
            let ch = x.index_axis(Axis(0), ci);
            let mu = ch.sum() / n;
            let var = ch.mapv(|e| (e - mu) * (e - mu)).sum() / n;
            let sd = (var + eps).sqrt();
            for i in 0..h {
                for j in 0..w {
                    y[[ci, i, j]] = g1[ci] * (x[[ci, i, j]] - mu) / sd + b1[ci];
                }
            }
        }
        Tensor::op(
            vec![self.clone(), gamma.clone(), beta.clone()],
            y.into_dyn(),
            Box::new(move |g, p| {
                let x = as3(&p[0].array());
                let gamma = as1(&p[1].array());
                let gy = as3(g);
                let mut dx = Array3::<f64>::zeros((c, h, w));
                let mut dgamma = Array1::<f64>::zeros(c);
                let mut dbeta = Array1::<f64>::zeros(c);
                for ci in 0..c {
                    let ch = x.index_axis(Axis(0), ci);
                    let gch = gy.index_axis(Axis(0), ci);
                    let mu = ch.sum() / n;
                    let var = ch.mapv(|e| (e - mu) * (e - mu)).sum() / n;
                    let sd = (var + eps).sqrt();
                    let mut sum_g = 0.0;
                    let mut sum_gx = 0.0;
                    for i in 0..h {
                        for j in 0..w {
                            let xhat = (ch[[i, j]] - mu) / sd;
                            sum_g += gch[[i, j]];
                            sum_gx += gch[[i, j]] * xhat;
                        }
                    }
                    dbeta[ci] = sum_g;
                    dgamma[ci] = sum_gx;
                    let k = gamma[ci] / sd;
                    for i in 0..h {
                        for j in 0..w {
                            let xhat = (ch[[i, j]] - mu) / sd;
                            dx[[ci, i, j]] =
                                k * (gch[[i, j]] - sum_g / n - xhat * sum_gx / n);
                        }
                    }
                }
                p[0].accum_grad(&dx.into_dyn());
                p[1].accum_grad(&dgamma.into_dyn());
                p[2].accum_grad(&dbeta.into_dyn());
            }),
        )
    }

    /// Mean over the channel axis of C×H×W → H×W.
    pub fn channel_mean(&self) -> Tensor {
        let x = as3(&self.array());
        let (c, h, w) = x.dim();
        let v = x.mean_axis(Axis(0)).unwrap();
        Tensor::op(
            vec![self.clone()],
            v.into_dyn(),
            Box::new(move |g, p| {
                let g2 = as2(g);
                let mut dx = Array3::<f64>::zeros((c, h, w));
                let inv = 1.0 / c as f64;
                for ci in 0..c {
                    for i in 0..h {
                        for j in 0..w {
                            dx[[ci, i, j]] = g2[[i, j]] * inv;
                        }
                    }
                }
                p[0].accum_grad(&dx.into_dyn());
            }),
        )
    }

    /// Gather feature vectors at spatial locations: C×H×W + N locations → N×C.
    pub fn gather_spatial(&self, locations: &[(usize, usize)]) -> Tensor {
        let x = as3(&self.array());
        let (c, _, _) = x.dim();
        let n = locations.len();
        let mut y = Array2::<f64>::zeros((n, c));
        for (k, &(i, j)) in locations.iter().enumerate() {
            for ci in 0..c {
                y[[k, ci]] = x[[ci, i, j]];
            }
        }
        let locs = locations.to_vec();
        Tensor::op(
            vec![self.clone()],
            y.into_dyn(),
            Box::new(move |g, p| {
                let g2 = as2(g);
                let sh = p[0].shape();
                let mut dx = Array3::<f64>::zeros((sh[0], sh[1], sh[2]));
                for (k, &(i, j)) in locs.iter().enumerate() {
                    for ci in 0..sh[0] {
                        dx[[ci, i, j]] += g2[[k, ci]];
                    }
                }
                p[0].accum_grad(&dx.into_dyn());
            }),
        )
    }
}

/// Channel-axis concatenation of C_i×H×W tensors.
pub fn concat_channels(parts: &[Tensor]) -> Tensor {
    assert!(!parts.is_empty());
    let arrs: Vec<Array3<f64>> = parts.iter().map(|t| as3(&t.array())).collect();
    let (_, h, w) = arrs[0].dim();
    let total: usize = arrs.iter().map(|a| a.dim().0).sum();
    let mut y = Array3::<f64>::zeros((total, h, w));
    let mut off = 0;
    let mut splits = Vec::with_capacity(arrs.len());
    for a in &arrs {
        let c = a.dim().0;
        y.slice_mut(ndarray::s![off..off + c, .., ..]).assign(a);
        splits.push((off, c));
        off += c;
    }
    Tensor::op(
        parts.to_vec(),
        y.into_dyn(),
        Box::new(move |g, p| {
            let g3 = as3(g);
            for (t, &(off, c)) in p.iter().zip(splits.iter()) {
                if t.requires_grad() {
                    let part = g3.slice(ndarray::s![off..off + c, .., ..]).to_owned();
                    t.accum_grad(&part.into_dyn());
                }
            }
        }),
    )
}

/// Column-wise concatenation of n×m_i matrices (equal row counts).
pub fn concat_cols(parts: &[Tensor]) -> Tensor {
    assert!(!parts.is_empty());
    let arrs: Vec<Array2<f64>> = parts.iter().map(|t| as2(&t.array())).collect();
    let n = arrs[0].nrows();
    let total: usize = arrs.iter().map(|a| a.ncols()).sum();
    let mut y = Array2::<f64>::zeros((n, total));
    let mut off = 0;
    let mut splits = Vec::with_capacity(arrs.len());
    for a in &arrs {
        let c = a.ncols();
        y.slice_mut(ndarray::s![.., off..off + c]).assign(a);
        splits.push((off, c));
        off += c;
    }
    Tensor::op(
        parts.to_vec(),
        y.into_dyn(),
        Box::new(move |g, p| {
            let g2 = as2(g);
            for (t, &(off, c)) in p.iter().zip(splits.iter()) {
                if t.requires_grad() {
                    let part = g2.slice(ndarray::s![.., off..off + c]).to_owned();
                    t.accum_grad(&part.into_dyn());
                }
            }
        }),
    )
}

// ---------------------------------------------------------------------------
// Gradient checking (independent finite-difference route, used by tests)
// ---------------------------------------------------------------------------

/// Compare the analytic gradient of `build()` (a scalar-valued graph over the
/// given leaves) against central finite differences. Returns the maximum
/// relative error over all leaf elements.
pub fn finite_diff_max_rel_err(build: &dyn Fn() -> Tensor, leaves: &[Tensor], h: f64) -> f64 {
    for l in leaves {
        l.zero_grad();
    }
    let out = build();
    out.backward();
    let analytic: Vec<ArrayD<f64>> = leaves
        .iter()
        .map(|l| {
            l.grad()
                .unwrap_or_else(|| ArrayD::zeros(l.array().raw_dim()))
        })
        .collect();
    let mut max_err: f64 = 0.0;
    for (leaf, an) in leaves.iter().zip(analytic.iter()) {
        let base = leaf.to_array();
        for idx in 0..base.len() {
            let mut plus = base.clone();
            let mut minus = base.clone();
            *plus.iter_mut().nth(idx).unwrap() += h;
            *minus.iter_mut().nth(idx).unwrap() -= h;
            leaf.set_value(plus);
            let fp = build().scalar();
            leaf.set_value(minus);
            let fm = build().scalar();
            leaf.set_value(base.clone());
            let num = (fp - fm) / (2.0 * h);
            let a = *an.iter().nth(idx).unwrap();
            let err = (a - num).abs() / a.abs().max(num.abs()).max(1.0);
            max_err = max_err.max(err);
        }
    }
    max_err
}
