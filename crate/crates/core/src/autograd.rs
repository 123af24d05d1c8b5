//! Minimal tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! Every operation records its output value and a closure mapping the output
//! gradient to parent gradients. Closures are only kept for nodes that depend
//! on a leaf with `requires_grad`, so inference passes store values only.

use std::cell::RefCell;
use std::rc::Rc;

use crate::conv::{self, ConvGeom};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};
use crate::wavelet::WaveletKernels;

type BackwardFn<T> = Box<dyn Fn(&Tensor<T>, &[bool]) -> Vec<Option<Tensor<T>>>>;

struct Node<T: Real> {
    value: Rc<Tensor<T>>,
    parents: Vec<usize>,
    requires_grad: bool,
    backward: Option<BackwardFn<T>>,
}

pub struct Tape<T: Real = f32> {
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

#[derive(Clone, Copy)]
pub struct Var<'t, T: Real = f32> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T: Real> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.value().shape())
    }
}

/// Gradients produced by [`Tape::backward`], indexed by node.
pub struct Grads<T: Real> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Grads<T> {
    pub fn get(&self, v: Var<'_, T>) -> Option<&Tensor<T>> {
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros shaped like its value when `v` was unreached.
    pub fn get_or_zeros(&self, v: Var<'_, T>) -> Tensor<T> {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(v.value().shape()))
    }
}

impl<T: Real> Tape<T> {
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

    pub fn leaf(&self, value: Tensor<T>, requires_grad: bool) -> Var<'_, T> {
        self.push_node(Rc::new(value), Vec::new(), requires_grad, None)
    }

    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.leaf(value, false)
    }

    fn push_node(
        &self,
        value: Rc<Tensor<T>>,
        parents: Vec<usize>,
        requires_grad: bool,
        backward: Option<BackwardFn<T>>,
    ) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            value,
            parents,
            requires_grad,
            backward,
        });
        Var { tape: self, id }
    }

    fn op(
        &self,
        value: Rc<Tensor<T>>,
        parents: &[Var<'_, T>],
        backward: impl Fn(&Tensor<T>, &[bool]) -> Vec<Option<Tensor<T>>> + 'static,
    ) -> Var<'_, T> {
        let requires = {
            let nodes = self.nodes.borrow();
            parents.iter().any(|p| nodes[p.id].requires_grad)
        };
        let ids = parents.iter().map(|p| p.id).collect();
        let bw: Option<BackwardFn<T>> = if requires {
            Some(Box::new(backward))
        } else {
            None
        };
        self.push_node(value, ids, requires, bw)
    }

    fn value_of(&self, id: usize) -> Rc<Tensor<T>> {
        self.nodes.borrow()[id].value.clone()
    }

    fn requires(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Reverse sweep from a scalar `loss` (seeded with gradient one).
    pub fn backward(&self, loss: Var<'_, T>) -> Grads<T> {
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(Tensor::full(nodes[loss.id].value.shape(), T::one()));
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            let Some(bw) = node.backward.as_ref() else {
                continue;
            };
            let Some(g) = grads[id].take() else {
                continue;
            };
            let need: Vec<bool> = node
                .parents
                .iter()
                .map(|&p| nodes[p].requires_grad)
                .collect();
            let pgs = bw(&g, &need);
            for ((&p, pg), &n) in node.parents.iter().zip(pgs).zip(&need) {
                if !n {
                    continue;
                }
                if let Some(pg) = pg {
                    match grads[p].as_mut() {
                        Some(acc) => acc.add_assign(&pg),
                        None => grads[p] = Some(pg),
                    }
                }
            }
            // keep gradients of leaves only
            if !node.parents.is_empty() {
                grads[id] = None;
            } else {
                grads[id] = Some(g);
            }
        }
        Grads { grads }
    }
}

fn unary<T: Real>(x: &Tensor<T>, f: impl Fn(T) -> T) -> Tensor<T> {
    x.map(f)
}

impl<'t, T: Real> Var<'t, T> {
    pub fn value(&self) -> Rc<Tensor<T>> {
        self.tape.value_of(self.id)
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires(self.id)
    }

    /// Value copied into a new constant leaf (gradient stops here).
    pub fn detach(&self) -> Var<'t, T> {
        self.tape.constant((*self.value()).clone())
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn conv3d(self, w: Var<'t, T>, b: Option<Var<'t, T>>, stride: usize, pad: usize) -> Result<Self> {
        let x = self.value();
        let wv = w.value();
        let [_, d, h, wd] = x.dims4();
        let geom = ConvGeom::conv([d, h, wd], wv.shape()[2], stride, pad)?;
        let bv = b.map(|b| b.value());
        let y = conv::conv3d_forward(&x, &wv, bv.as_deref(), &geom)?;
        let mut parents = vec![self, w];
        parents.extend(b);
        Ok(self.tape.op(Rc::new(y), &parents, move |g, need| {
            let gr = conv::conv3d_backward(&x, &wv, g, &geom, need[0], need[1]);
            let mut out = vec![gr.dx, need[1].then_some(gr.dw)];
            if need.len() > 2 {
                out.push(Some(gr.db));
            }
            out
        }))
    }

    /// Transposed convolution with weight `[Cin, Cout, k, k, k]`.
    pub fn conv_transpose3d(
        self,
        w: Var<'t, T>,
        b: Option<Var<'t, T>>,
        stride: usize,
        pad: usize,
        out_pad: usize,
    ) -> Result<Self> {
        let x = self.value();
        let wv = w.value();
        let [_, d, h, wd] = x.dims4();
        let geom = ConvGeom::transposed([d, h, wd], wv.shape()[2], stride, pad, out_pad)?;
        let bv = b.map(|b| b.value());
        let y = conv::conv_transpose3d_forward(&x, &wv, bv.as_deref(), &geom)?;
        let mut parents = vec![self, w];
        parents.extend(b);
        Ok(self.tape.op(Rc::new(y), &parents, move |g, need| {
            let gr = conv::conv_transpose3d_backward(&x, &wv, g, &geom, need[0], need[1]);
            let mut out = vec![gr.dx, need[1].then_some(gr.dw)];
            if need.len() > 2 {
                out.push(Some(gr.db));
            }
            out
        }))
    }

    /// Per-channel standardization over the spatial axes (no affine).
    pub fn instance_norm(self, eps: f64) -> Self {
        let x = self.value();
        let [c, d, h, w] = x.dims4();
        let n = d * h * w;
        let mut xhat = Tensor::zeros(x.shape());
        let mut inv_std = Vec::with_capacity(c);
        for ci in 0..c {
            let src = &x.data()[ci * n..(ci + 1) * n];
            let mean: f64 = src.iter().map(|v| v.to_f64().unwrap()).sum::<f64>() / n as f64;
            let var: f64 = src
                .iter()
                .map(|v| {
                    let e = v.to_f64().unwrap() - mean;
                    e * e
                })
                .sum::<f64>()
                / n as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std.push(is);
            for (o, v) in xhat.data_mut()[ci * n..(ci + 1) * n].iter_mut().zip(src) {
                *o = T::from_f64_lossy((v.to_f64().unwrap() - mean) * is);
            }
        }
        let xhat = Rc::new(xhat);
        let saved = xhat.clone();
        self.tape.op(xhat, &[self], move |g, _| {
            let mut dx = Tensor::zeros(g.shape());
            for (ci, &is) in inv_std.iter().enumerate() {
                let gs = &g.data()[ci * n..(ci + 1) * n];
                let xs = &saved.data()[ci * n..(ci + 1) * n];
                let mut mg = 0.0;
                let mut mgx = 0.0;
                for (a, b) in gs.iter().zip(xs) {
                    let (a, b) = (a.to_f64().unwrap(), b.to_f64().unwrap());
                    mg += a;
                    mgx += a * b;
                }
                mg /= n as f64;
                mgx /= n as f64;
                for ((o, a), b) in dx.data_mut()[ci * n..(ci + 1) * n].iter_mut().zip(gs).zip(xs) {
                    let (a, b) = (a.to_f64().unwrap(), b.to_f64().unwrap());
                    *o = T::from_f64_lossy(is * (a - mg - b * mgx));
                }
            }
            vec![Some(dx)]
        })
    }

    pub fn relu(self) -> Self {
        let y = Rc::new(unary(&self.value(), |v| v.max(T::zero())));
        let saved = y.clone();
        self.tape.op(y, &[self], move |g, _| {
            vec![Some(g.zip_map(&saved, |g, y| if y > T::zero() { g } else { T::zero() }))]
        })
    }

    pub fn tanh(self) -> Self {
        let y = Rc::new(unary(&self.value(), |v| v.tanh()));
        let saved = y.clone();
        self.tape.op(y, &[self], move |g, _| {
            vec![Some(g.zip_map(&saved, |g, y| g * (T::one() - y * y)))]
        })
    }

    pub fn sigmoid(self) -> Self {
        let y = Rc::new(unary(&self.value(), |v| T::one() / (T::one() + (-v).exp())));
        let saved = y.clone();
        self.tape.op(y, &[self], move |g, _| {
            vec![Some(g.zip_map(&saved, |g, y| g * y * (T::one() - y)))]
        })
    }

    pub fn add(self, other: Self) -> Self {
        let y = self.value().zip_map(&other.value(), |a, b| a + b);
        self.tape.op(Rc::new(y), &[self, other], |g, need| {
            vec![need[0].then(|| g.clone()), need[1].then(|| g.clone())]
        })
    }

    pub fn sub(self, other: Self) -> Self {
        let y = self.value().zip_map(&other.value(), |a, b| a - b);
        self.tape.op(Rc::new(y), &[self, other], |g, need| {
            vec![need[0].then(|| g.clone()), need[1].then(|| g.map(|v| -v))]
        })
    }

    /// Elementwise product with a constant tensor.
    pub fn mul_const(self, c: &Tensor<T>) -> Self {
        let y = self.value().zip_map(c, |a, b| a * b);
        let c = c.clone();
        self.tape.op(Rc::new(y), &[self], move |g, _| {
            vec![Some(g.zip_map(&c, |g, c| g * c))]
        })
    }

    /// `a * x + b`.
    pub fn affine(self, a: f64, b: f64) -> Self {
        let (ta, tb) = (T::from_f64_lossy(a), T::from_f64_lossy(b));
        let y = unary(&self.value(), |v| ta * v + tb);
        self.tape.op(Rc::new(y), &[self], move |g, _| vec![Some(g.scale(ta))])
    }

    pub fn abs(self) -> Self {
        let x = self.value();
        let y = unary(&x, |v| v.abs());
        self.tape.op(Rc::new(y), &[self], move |g, _| {
            vec![Some(g.zip_map(&x, |g, x| {
                if x > T::zero() {
                    g
                } else if x < T::zero() {
                    -g
                } else {
                    T::zero()
                }
            }))]
        })
    }

    pub fn square(self) -> Self {
        let x = self.value();
        let y = unary(&x, |v| v * v);
        self.tape.op(Rc::new(y), &[self], move |g, _| {
            let two = T::one() + T::one();
            vec![Some(g.zip_map(&x, |g, x| two * g * x))]
        })
    }

    /// `ln(max(x, eps))`; the gradient is zero where clamping is active.
    pub fn log_clamped(self, eps: f64) -> Self {
        let x = self.value();
        let e = T::from_f64_lossy(eps);
        let y = unary(&x, |v| v.max(e).ln());
        self.tape.op(Rc::new(y), &[self], move |g, _| {
            vec![Some(g.zip_map(&x, |g, x| if x > e { g / x } else { T::zero() }))]
        })
    }

    /// Mean over all elements (accumulated in `f64`).
    pub fn mean(self) -> Self {
        let x = self.value();
        let n = x.len();
        let shape = x.shape().to_vec();
        let y = Tensor::scalar(T::from_f64_lossy(x.mean_f64()));
        self.tape.op(Rc::new(y), &[self], move |g, _| {
            let v = g.data()[0] / T::from_usize(n).unwrap();
            vec![Some(Tensor::full(&shape, v))]
        })
    }

    pub fn sum(self) -> Self {
        let x = self.value();
        let shape = x.shape().to_vec();
        let y = Tensor::scalar(T::from_f64_lossy(x.sum_f64()));
        self.tape.op(Rc::new(y), &[self], move |g, _| {
            vec![Some(Tensor::full(&shape, g.data()[0]))]
        })
    }

    /// Weighted sum of scalar vars.
    pub fn weighted_sum(terms: &[(f64, Var<'t, T>)]) -> Result<Self> {
        let (_, first) = terms
            .first()
            .ok_or_else(|| Error::ShapeMismatch("empty weighted sum".into()))?;
        let mut acc = 0.0;
        for (w, v) in terms {
            let val = v.value();
            if val.len() != 1 {
                return Err(Error::ShapeMismatch("weighted_sum expects scalars".into()));
            }
            acc += w * val.data()[0].to_f64().unwrap();
        }
        let ws: Vec<T> = terms.iter().map(|(w, _)| T::from_f64_lossy(*w)).collect();
        let vars: Vec<Var<'t, T>> = terms.iter().map(|(_, v)| *v).collect();
        Ok(first.tape.op(
            Rc::new(Tensor::scalar(T::from_f64_lossy(acc))),
            &vars,
            move |g, need| {
                ws.iter()
                    .zip(need)
                    .map(|(&w, &n)| n.then(|| Tensor::scalar(g.data()[0] * w)))
                    .collect()
            },
        ))
    }

    pub fn concat_channels(parts: &[Var<'t, T>]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::ShapeMismatch("concat of zero vars".into()))?;
        let vals: Vec<Rc<Tensor<T>>> = parts.iter().map(|p| p.value()).collect();
        let refs: Vec<&Tensor<T>> = vals.iter().map(|v| v.as_ref()).collect();
        let y = Tensor::concat_channels(&refs)?;
        let counts: Vec<usize> = vals.iter().map(|v| v.shape()[0]).collect();
        Ok(first.tape.op(Rc::new(y), parts, move |g, need| {
            let mut start = 0;
            counts
                .iter()
                .zip(need)
                .map(|(&c, &n)| {
                    let s = start;
                    start += c;
                    n.then(|| g.channels(s, c))
                })
                .collect()
        }))
    }

    pub fn slice_channels(self, start: usize, len: usize) -> Self {
        let x = self.value();
        let shape = x.shape().to_vec();
        let y = x.channels(start, len);
        self.tape.op(Rc::new(y), &[self], move |g, _| {
            let mut dx = Tensor::zeros(&shape);
            let vox: usize = shape[1..].iter().product();
            dx.data_mut()[start * vox..(start + len) * vox].copy_from_slice(g.data());
            vec![Some(dx)]
        })
    }

    /// Wavelet analysis; output stacks the eight subbands band-major on channels.
    pub fn dwt3(self, kernels: &Rc<WaveletKernels<T>>) -> Result<Self> {
        let x = self.value();
        let source = x.dims4();
        let y = kernels.analyze(&x)?;
        let k = kernels.clone();
        Ok(self.tape.op(Rc::new(y), &[self], move |g, _| {
            vec![Some(k.analyze_adjoint(g, source))]
        }))
    }

    pub fn idwt3(self, kernels: &Rc<WaveletKernels<T>>) -> Result<Self> {
        let y = kernels.synthesize(&self.value())?;
        let k = kernels.clone();
        Ok(self.tape.op(Rc::new(y), &[self], move |g, _| {
            vec![Some(k.synthesize_adjoint(g))]
        }))
    }

    /// Multiply by a fixed mask (dropout); gradient is masked the same way.
    pub fn dropout_mask(self, mask: &Tensor<T>) -> Self {
        self.mul_const(mask)
    }

    /// Block Gram matrix `FᵀF / (rows·cols)` of a single-channel volume unfolded
    /// into non-overlapping `block³` cubes (rows of `F`).
    pub fn block_gram(self, block: usize) -> Result<Self> {
        let x = self.value();
        let f = unfold_blocks(&x, block)?;
        let (rows, cols) = (f.shape()[0], f.shape()[1]);
        let norm = T::from_usize(rows * cols).unwrap();
        let mut m = Tensor::zeros(&[cols, cols]);
        crate::tensor::matmul(cols, rows, cols, f.data(), true, f.data(), false, m.data_mut(), false);
        let m = m.map(|v| v / norm);
        let shape = x.shape().to_vec();
        Ok(self.tape.op(Rc::new(m), &[self], move |g, _| {
            // dF = F (G + Gᵀ) / norm
            let gs = Tensor::from_fn(&[cols, cols], |i| {
                let (r, c) = (i / cols, i % cols);
                (g.data()[r * cols + c] + g.data()[c * cols + r]) / norm
            });
            let mut df = Tensor::zeros(&[rows, cols]);
            crate::tensor::matmul(rows, cols, cols, f.data(), false, gs.data(), false, df.data_mut(), false);
            vec![Some(fold_blocks(&df, &shape, block))]
        }))
    }
}

/// Rows are `block³` cubes in raster order; columns are voxels within a cube.
pub(crate) fn unfold_blocks<T: Real>(x: &Tensor<T>, block: usize) -> Result<Tensor<T>> {
    let [c, d, h, w] = x.dims4();
    if c != 1 || d % block != 0 || h % block != 0 || w % block != 0 {
        return Err(Error::ShapeMismatch(format!(
            "block unfolding needs one channel and sizes divisible by {block}, got {:?}",
            x.shape()
        )));
    }
    let (nd, nh, nw) = (d / block, h / block, w / block);
    let cols = block * block * block;
    let mut f = Tensor::zeros(&[nd * nh * nw, cols]);
    for bz in 0..nd {
        for by in 0..nh {
            for bx in 0..nw {
                let r = (bz * nh + by) * nw + bx;
                for z in 0..block {
                    for y in 0..block {
                        for xx in 0..block {
                            let src = ((bz * block + z) * h + by * block + y) * w + bx * block + xx;
                            f.data_mut()[r * cols + (z * block + y) * block + xx] = x.data()[src];
                        }
                    }
                }
            }
        }
    }
    Ok(f)
}

fn fold_blocks<T: Real>(f: &Tensor<T>, shape: &[usize], block: usize) -> Tensor<T> {
    let (d, h, w) = (shape[1], shape[2], shape[3]);
    let (nh, nw) = (h / block, w / block);
    let cols = block * block * block;
    let mut x = Tensor::zeros(shape);
    for r in 0..f.shape()[0] {
        let (bz, by, bx) = (r / (nh * nw), (r / nw) % nh, r % nw);
        for z in 0..block {
            for y in 0..block {
                for xx in 0..block {
                    let dst = ((bz * block + z) * h + by * block + y) * w + bx * block + xx;
                    x.data_mut()[dst] = f.data()[r * cols + (z * block + y) * block + xx];
                }
            }
        }
    }
    debug_assert_eq!(x.len(), d * h * w);
    x
}
