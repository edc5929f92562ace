//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! Every forward op appends a node to the [`Tape`]; [`Tape::backward`]
//! walks the nodes in reverse and accumulates gradients for nodes that
//! require them. Parameters enter through [`Tape::param`], which caches one
//! leaf per name so gradients can be read back by name.

use std::collections::BTreeMap;

use crate::cha::{self, ChaSpec};
use crate::conv;
use crate::error::{dim_err, Result};
use crate::params::ParamStore;
use crate::tensor::{reflect_index, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine(Var, f64),
    Sigmoid(Var),
    Elu(Var),
    Relu(Var),
    Clamp { x: Var, lo: f64, hi: f64 },
    Abs(Var),
    Mean(Var),
    PadReflect { x: Var, pads: [usize; 4] },
    Crop { x: Var, top: usize, left: usize },
    Upsample2(Var),
    Concat(Vec<Var>),
    Conv { x: Var, w: Var, b: Option<Var>, stride: usize, dilation: usize },
    SpectralNorm { w: Var, u: Vec<f64>, v: Vec<f64>, sigma: f64 },
    Cha { x: Var, spec: Box<ChaSpec> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    bound: BTreeMap<String, (Var, bool)>,
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn elu(v: f64) -> f64 {
    if v > 0.0 {
        v
    } else {
        v.exp_m1()
    }
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(dim_err!("{what}: shapes {:?} and {:?} differ", a.shape(), b.shape()));
    }
    Ok(())
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A leaf that never receives gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf whose gradient is tracked.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Copy of `v`'s value with the gradient path cut.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    /// Bind a named parameter, reusing the leaf if it is already on the tape.
    pub fn param(&mut self, store: &ParamStore, name: &str, trainable: bool) -> Result<Var> {
        if let Some(&(v, _)) = self.bound.get(name) {
            return Ok(v);
        }
        let value = store.get(name)?.clone();
        let v = self.push(value, Op::Leaf, trainable);
        self.bound.insert(name.to_string(), (v, trainable));
        Ok(v)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self.value(a), self.value(b), "add")?;
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self.value(a), self.value(b), "sub")?;
        let bv = self.value(b).data().to_vec();
        let mut out = self.value(a).clone();
        out.data_mut().iter_mut().zip(&bv).for_each(|(x, y)| *x -= y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self.value(a), self.value(b), "mul")?;
        let bv = self.value(b).data().to_vec();
        let mut out = self.value(a).clone();
        out.data_mut().iter_mut().zip(&bv).for_each(|(x, y)| *x *= y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    /// `scale * x + shift`.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let out = self.value(x).map(|v| scale * v + shift);
        let rg = self.rg(x);
        self.push(out, Op::Affine(x, scale), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(sigmoid);
        let rg = self.rg(x);
        self.push(out, Op::Sigmoid(x), rg)
    }

    pub fn elu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(elu);
        let rg = self.rg(x);
        self.push(out, Op::Elu(x), rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(0.0));
        let rg = self.rg(x);
        self.push(out, Op::Relu(x), rg)
    }

    /// Elementwise clamp into `[lo, hi]`; the gradient passes only inside.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let out = self.value(x).map(|v| v.clamp(lo, hi));
        let rg = self.rg(x);
        self.push(out, Op::Clamp { x, lo, hi }, rg)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let out = self.value(x).map(f64::abs);
        let rg = self.rg(x);
        self.push(out, Op::Abs(x), rg)
    }

    /// Mean of all elements, as a one-element tensor.
    pub fn mean(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).mean());
        let rg = self.rg(x);
        self.push(out, Op::Mean(x), rg)
    }

    /// Reflect padding of a `[N, C, H, W]` tensor; `pads` is top, bottom, left, right.
    pub fn pad_reflect(&mut self, x: Var, pads: [usize; 4]) -> Var {
        if pads == [0; 4] {
            return x;
        }
        let out = pad_reflect_forward(self.value(x), pads);
        let rg = self.rg(x);
        self.push(out, Op::PadReflect { x, pads }, rg)
    }

    /// Spatial window `[top..top+h, left..left+w]`.
    pub fn crop(&mut self, x: Var, top: usize, left: usize, h: usize, w: usize) -> Result<Var> {
        let (n, c, ih, iw) = self.value(x).dims4();
        if top + h > ih || left + w > iw {
            return Err(dim_err!("crop {}x{}+{}+{} exceeds {}x{}", h, w, top, left, ih, iw));
        }
        if (top, left, h, w) == (0, 0, ih, iw) {
            return Ok(x);
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(n * c * h * w);
        for p in 0..n * c {
            for y in 0..h {
                let row = p * ih * iw + (top + y) * iw + left;
                out.extend_from_slice(&src[row..row + w]);
            }
        }
        let out = Tensor::from_vec(&[n, c, h, w], out)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Crop { x, top, left }, rg))
    }

    /// Nearest-neighbour 2x upsampling.
    pub fn upsample2(&mut self, x: Var) -> Var {
        let (n, c, h, w) = self.value(x).dims4();
        let src = self.value(x).data();
        let mut out = Tensor::zeros(&[n, c, 2 * h, 2 * w]);
        let dst = out.data_mut();
        for p in 0..n * c {
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    dst[p * 4 * h * w + y * 2 * w + xx] = src[p * h * w + (y / 2) * w + xx / 2];
                }
            }
        }
        let rg = self.rg(x);
        self.push(out, Op::Upsample2(x), rg)
    }

    /// Channel-wise concatenation of `[N, C_i, H, W]` tensors.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let (n, _, h, w) = self.value(parts[0]).dims4();
        let mut total_c = 0;
        for &p in parts {
            let (pn, pc, ph, pw) = self.value(p).dims4();
            if (pn, ph, pw) != (n, h, w) {
                return Err(dim_err!("concat: {:?} vs {:?}", self.value(p).shape(), self.value(parts[0]).shape()));
            }
            total_c += pc;
        }
        let mut out = Vec::with_capacity(n * total_c * h * w);
        for s in 0..n {
            for &p in parts {
                let t = self.value(p);
                let len = t.shape()[1] * h * w;
                out.extend_from_slice(&t.data()[s * len..(s + 1) * len]);
            }
        }
        let out = Tensor::from_vec(&[n, total_c, h, w], out)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(out, Op::Concat(parts.to_vec()), rg))
    }

    /// Valid (unpadded) 2-D convolution.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, dilation: usize) -> Result<Var> {
        let out = conv::conv2d_forward(self.value(x), self.value(w), b.map(|b| self.value(b)), stride, dilation)?;
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(out, Op::Conv { x, w, b, stride, dilation }, rg))
    }

    /// Divide a weight by its largest singular value, estimated with one
    /// power-iteration step started from `u`. Returns the normalized weight
    /// and the updated left singular vector.
    pub fn spectral_norm(&mut self, w: Var, u: &[f64]) -> Result<(Var, Vec<f64>)> {
        let wt = self.value(w);
        let rows = wt.shape()[0];
        let cols = wt.len() / rows;
        if u.len() != rows {
            return Err(dim_err!("spectral norm: u has {} entries for {} rows", u.len(), rows));
        }
        let wd = wt.data();
        let mut v = vec![0.0; cols];
        for (r, &ur) in u.iter().enumerate() {
            for (vj, &wij) in v.iter_mut().zip(&wd[r * cols..(r + 1) * cols]) {
                *vj += ur * wij;
            }
        }
        normalize(&mut v);
        let mut wv: Vec<f64> = (0..rows)
            .map(|r| wd[r * cols..(r + 1) * cols].iter().zip(&v).map(|(a, b)| a * b).sum())
            .collect();
        let sigma_raw = wv.iter().map(|x| x * x).sum::<f64>().sqrt();
        normalize(&mut wv);
        let u_new = wv;
        let sigma = sigma_raw.max(1e-12);
        let out = wt.map(|x| x / sigma);
        let rg = self.rg(w);
        let var = self.push(
            out,
            Op::SpectralNorm {
                w,
                u: u_new.clone(),
                v,
                sigma,
            },
            rg,
        );
        Ok((var, u_new))
    }

    /// Contextual highlight attention maps: `[N, 2C, H, W]` holding the
    /// highlight-fill map followed by the background-fill map.
    pub fn cha_maps(&mut self, x: Var, spec: ChaSpec) -> Result<Var> {
        let out = cha::maps_forward(self.value(x), &spec)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Cha { x, spec: Box::new(spec) }, rg))
    }

    /// Reverse pass from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients {
            grads,
            bound: self.bound.clone(),
        }
    }

    fn backprop_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let mut acc = |v: Var, t: Tensor| {
            if !self.rg(v) {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&t),
                slot => *slot = Some(t),
            }
        };
        let zip = |a: &Tensor, f: &dyn Fn(f64, f64) -> f64| -> Tensor {
            let mut out = g.clone();
            out.data_mut().iter_mut().zip(a.data()).for_each(|(o, &x)| *o = f(*o, x));
            out
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    acc(*a, zip(self.value(*b), &|g, y| g * y));
                }
                if self.rg(*b) {
                    acc(*b, zip(self.value(*a), &|g, x| g * x));
                }
            }
            Op::Affine(x, scale) => acc(*x, g.map(|v| v * scale)),
            Op::Sigmoid(x) => acc(*x, zip(&node.value, &|g, y| g * y * (1.0 - y))),
            Op::Elu(x) => acc(*x, zip(self.value(*x), &|g, x| if x > 0.0 { g } else { g * x.exp() })),
            Op::Relu(x) => acc(*x, zip(self.value(*x), &|g, x| if x > 0.0 { g } else { 0.0 })),
            Op::Clamp { x, lo, hi } => acc(
                *x,
                zip(self.value(*x), &|g, x| if x > *lo && x < *hi { g } else { 0.0 }),
            ),
            Op::Abs(x) => acc(*x, zip(self.value(*x), &|g, x| g * x.signum() * f64::from(x != 0.0))),
            Op::Mean(x) => {
                let n = self.value(*x).len() as f64;
                acc(*x, Tensor::full(self.value(*x).shape(), g.item() / n));
            }
            Op::PadReflect { x, pads } => acc(*x, pad_reflect_backward(g, self.value(*x).shape(), *pads)),
            Op::Crop { x, top, left } => {
                let shape = self.value(*x).shape();
                let (n, c, ih, iw) = (shape[0], shape[1], shape[2], shape[3]);
                let (_, _, h, w) = g.dims4();
                let mut gx = Tensor::zeros(shape);
                let dst = gx.data_mut();
                for p in 0..n * c {
                    for y in 0..h {
                        let row = p * ih * iw + (top + y) * iw + left;
                        dst[row..row + w].copy_from_slice(&g.data()[(p * h + y) * w..(p * h + y + 1) * w]);
                    }
                }
                acc(*x, gx);
            }
            Op::Upsample2(x) => {
                let (n, c, h, w) = self.value(*x).dims4();
                let mut gx = Tensor::zeros(&[n, c, h, w]);
                let dst = gx.data_mut();
                for p in 0..n * c {
                    for y in 0..2 * h {
                        for xx in 0..2 * w {
                            dst[p * h * w + (y / 2) * w + xx / 2] += g.data()[p * 4 * h * w + y * 2 * w + xx];
                        }
                    }
                }
                acc(*x, gx);
            }
            Op::Concat(parts) => {
                let (n, _, h, w) = g.dims4();
                let total = g.shape()[1];
                let mut offset = 0;
                for &p in parts {
                    let pc = self.value(p).shape()[1];
                    if self.rg(p) {
                        let mut gp = Vec::with_capacity(n * pc * h * w);
                        for s in 0..n {
                            let start = (s * total + offset) * h * w;
                            gp.extend_from_slice(&g.data()[start..start + pc * h * w]);
                        }
                        acc(p, Tensor::from_vec(&[n, pc, h, w], gp).expect("concat slice"));
                    }
                    offset += pc;
                }
            }
            Op::Conv { x, w, b, stride, dilation } => {
                let need = (self.rg(*x), self.rg(*w), b.is_some_and(|b| self.rg(b)));
                let cg = conv::conv2d_backward(self.value(*x), self.value(*w), g, *stride, *dilation, need);
                if let Some(gx) = cg.x {
                    acc(*x, gx);
                }
                if let Some(gw) = cg.w {
                    acc(*w, gw);
                }
                if let (Some(b), Some(gb)) = (b, cg.b) {
                    acc(*b, gb);
                }
            }
            Op::SpectralNorm { w, u, v, sigma } => {
                let wt = self.value(*w);
                let cols = v.len();
                let inner: f64 = g.data().iter().zip(wt.data()).map(|(a, b)| a * b).sum::<f64>() / (sigma * sigma);
                let mut gw = g.map(|x| x / sigma);
                for (i, row) in gw.data_mut().chunks_mut(cols).enumerate() {
                    for (j, e) in row.iter_mut().enumerate() {
                        *e -= inner * u[i] * v[j];
                    }
                }
                acc(*w, gw);
            }
            Op::Cha { x, spec } => acc(*x, cha::maps_backward(self.value(*x), spec, g)),
        }
    }
}

fn normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    v.iter_mut().for_each(|x| *x /= n);
}

pub(crate) fn pad_reflect_forward(x: &Tensor, [top, bottom, left, right]: [usize; 4]) -> Tensor {
    let (n, c, h, w) = x.dims4();
    let (oh, ow) = (h + top + bottom, w + left + right);
    let cols: Vec<usize> = (0..ow).map(|j| reflect_index(j as isize - left as isize, w)).collect();
    let mut out = Tensor::zeros(&[n, c, oh, ow]);
    let src = x.data();
    let dst = out.data_mut();
    for p in 0..n * c {
        for i in 0..oh {
            let si = reflect_index(i as isize - top as isize, h);
            let srow = &src[p * h * w + si * w..p * h * w + (si + 1) * w];
            let drow = &mut dst[p * oh * ow + i * ow..p * oh * ow + (i + 1) * ow];
            for (d, &sj) in drow.iter_mut().zip(&cols) {
                *d = srow[sj];
            }
        }
    }
    out
}

fn pad_reflect_backward(g: &Tensor, shape: &[usize], [top, _, left, _]: [usize; 4]) -> Tensor {
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let (_, _, oh, ow) = g.dims4();
    let cols: Vec<usize> = (0..ow).map(|j| reflect_index(j as isize - left as isize, w)).collect();
    let mut gx = Tensor::zeros(shape);
    let dst = gx.data_mut();
    for p in 0..n * c {
        for i in 0..oh {
            let si = reflect_index(i as isize - top as isize, h);
            for (j, &sj) in cols.iter().enumerate() {
                dst[p * h * w + si * w + sj] += g.data()[p * oh * ow + i * ow + j];
            }
        }
    }
    gx
}

/// Gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    bound: BTreeMap<String, (Var, bool)>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of a trainable parameter bound by name.
    pub fn param(&self, name: &str) -> Option<&Tensor> {
        let &(v, trainable) = self.bound.get(name)?;
        if trainable {
            self.get(v)
        } else {
            None
        }
    }

    /// All trainable parameter gradients, sorted by name.
    pub fn params(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.bound
            .iter()
            .filter(|(_, (_, trainable))| *trainable)
            .filter_map(|(k, (v, _))| self.get(*v).map(|g| (k.as_str(), g)))
    }
}
