//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] is built fresh for every forward pass. Each operation appends a
//! node holding its output value plus whatever it needs for the backward pass;
//! [`Graph::backward`] walks the tape once in reverse. Gradients are only
//! materialized for nodes that (transitively) depend on a leaf created with
//! `requires_grad = true`.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, LabError, Result};

use super::kernels::{col2im_acc, gemm_nn, gemm_nt, gemm_tn, im2col, ConvGeom};
use super::spectral::power_iteration;
use super::{Real, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    /// Concatenated ReLU: `[relu(x), relu(-x)]`, doubling the feature axis.
    Crelu,
    Tanh,
    Identity,
}

impl Activation {
    /// Output features per input feature.
    pub fn width_factor(self) -> usize {
        match self {
            Activation::Crelu => 2,
            _ => 1,
        }
    }

    /// Whether post-activation units of this kind count towards FAU.
    pub fn is_rectifier(self) -> bool {
        matches!(self, Activation::Relu | Activation::Crelu)
    }
}

const LAYER_NORM_EPS: f64 = 1e-5;

enum Op<T> {
    Leaf,
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Conv2d {
        x: Var,
        k: Var,
        b: Option<Var>,
        cols: Vec<T>,
        geom: ConvGeom,
    },
    Relu(Var),
    Crelu(Var),
    Tanh(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    SpectralNorm {
        w: Var,
        u: Vec<T>,
        v: Vec<T>,
        sigma: T,
    },
    Concat(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Minimum(Var, Var),
    Scale(Var, T),
    Sum(Var),
    Mean(Var),
    Mse {
        pred: Var,
        target: Vec<T>,
    },
    SqDist {
        x: Var,
        anchor: Vec<T>,
    },
    Reshape(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        let mut value = value;
        value.clear_grad();
        self.push(value, Op::Leaf, requires_grad)
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

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads[v.0].as_deref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Vec<T>> {
        self.grads[v.0].take()
    }

    /// Value of `v` with its accumulated gradient placed in the tensor's slot.
    pub fn tensor_with_grad(&self, v: Var) -> Tensor<T> {
        let mut t = self.nodes[v.0].value.clone();
        if let Some(g) = &self.grads[v.0] {
            t.set_grad(g.clone()).expect("gradient length matches value");
        }
        t
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// `out[i,j] = Σ_k x[i,k]·w[j,k] + b[j]`
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xs, ws) = (self.shape(x), self.shape(w));
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return shape_err(format!("linear: x{xs:?} incompatible with w{ws:?}"));
        }
        let (batch, inp, out) = (xs[0], xs[1], ws[0]);
        if let Some(b) = b {
            if self.shape(b) != [out] {
                return shape_err(format!(
                    "linear: bias {:?} should be [{out}]",
                    self.shape(b)
                ));
            }
        }
        let mut y = vec![T::zero(); batch * out];
        if let Some(b) = b {
            let bv = self.value(b).data();
            for row in y.chunks_mut(out) {
                row.copy_from_slice(bv);
            }
        }
        gemm_nt(
            self.value(x).data(),
            self.value(w).data(),
            &mut y,
            batch,
            inp,
            out,
        );
        let mut inputs = vec![x, w];
        inputs.extend(b);
        let rg = self.rg(&inputs);
        Ok(self.push(
            Tensor::new(vec![batch, out], y)?,
            Op::Linear { x, w, b },
            rg,
        ))
    }

    /// Valid (unpadded) convolution of `x[B,C,H,W]` with `k[F,C,kh,kw]`.
    pub fn conv2d(&mut self, x: Var, k: Var, b: Option<Var>, stride: usize) -> Result<Var> {
        let (xs, ks) = (self.shape(x).to_vec(), self.shape(k).to_vec());
        if xs.len() != 4 || ks.len() != 4 || xs[1] != ks[1] {
            return shape_err(format!("conv2d: x{xs:?} incompatible with k{ks:?}"));
        }
        if stride == 0 {
            return Err(LabError::Config("conv2d: stride must be >= 1".into()));
        }
        if ks[2] > xs[2] || ks[3] > xs[3] {
            return Err(LabError::Config(format!(
                "conv2d: kernel {}x{} larger than input {}x{}",
                ks[2], ks[3], xs[2], xs[3]
            )));
        }
        let geom = ConvGeom {
            batch: xs[0],
            in_ch: xs[1],
            height: xs[2],
            width: xs[3],
            out_ch: ks[0],
            kh: ks[2],
            kw: ks[3],
            stride,
            out_h: (xs[2] - ks[2]) / stride + 1,
            out_w: (xs[3] - ks[3]) / stride + 1,
        };
        if let Some(b) = b {
            if self.shape(b) != [geom.out_ch] {
                return shape_err(format!("conv2d: bias {:?}", self.shape(b)));
            }
        }
        let cols = im2col(self.value(x).data(), &geom);
        let (rows, f, pl) = (geom.rows(), geom.out_ch, geom.patch_len());
        let mut ym = vec![T::zero(); rows * f];
        if let Some(b) = b {
            let bv = self.value(b).data();
            for row in ym.chunks_mut(f) {
                row.copy_from_slice(bv);
            }
        }
        gemm_nt(&cols, self.value(k).data(), &mut ym, rows, pl, f);
        // [B·OH·OW, F] -> [B, F, OH, OW]
        let spatial = geom.out_h * geom.out_w;
        let mut y = vec![T::zero(); rows * f];
        for bi in 0..geom.batch {
            for s in 0..spatial {
                let src = &ym[(bi * spatial + s) * f..(bi * spatial + s + 1) * f];
                for (fi, &val) in src.iter().enumerate() {
                    y[(bi * f + fi) * spatial + s] = val;
                }
            }
        }
        let mut inputs = vec![x, k];
        inputs.extend(b);
        let rg = self.rg(&inputs);
        let keep_cols = if self.requires_grad(k) { cols } else { Vec::new() };
        Ok(self.push(
            Tensor::new(vec![geom.batch, f, geom.out_h, geom.out_w], y)?,
            Op::Conv2d {
                x,
                k,
                b,
                cols: keep_cols,
                geom,
            },
            rg,
        ))
    }

    pub fn activate(&mut self, x: Var, kind: Activation) -> Result<Var> {
        match kind {
            Activation::Relu => Ok(self.relu(x)),
            Activation::Crelu => self.crelu(x),
            Activation::Tanh => Ok(self.tanh(x)),
            Activation::Identity => Ok(x),
        }
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let y = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        let rg = self.rg(&[x]);
        self.push(y, Op::Relu(x), rg)
    }

    /// `[relu(x), relu(-x)]` along the feature axis (everything after axis 0).
    pub fn crelu(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let rows = xv.shape()[0];
        let d = xv.len() / rows;
        let mut y = Vec::with_capacity(2 * xv.len());
        for i in 0..rows {
            let r = xv.row(i);
            y.extend(r.iter().map(|&v| v.max(T::zero())));
            y.extend(r.iter().map(|&v| (-v).max(T::zero())));
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(vec![rows, 2 * d], y)?, Op::Crelu(x), rg))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let y = self.value(x).map(|v| v.tanh());
        let rg = self.rg(&[x]);
        self.push(y, Op::Tanh(x), rg)
    }

    /// Per-row normalization over all non-leading axes followed by an affine map.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let xv = self.value(x);
        let rows = xv.shape()[0];
        let d = xv.len() / rows;
        if d < 2 {
            return shape_err("layer_norm needs at least 2 features");
        }
        if self.value(gain).len() != d || self.value(bias).len() != d {
            return shape_err(format!("layer_norm: affine params must have {d} elements"));
        }
        let (gv, bv) = (self.value(gain).data(), self.value(bias).data());
        let eps = T::lit(LAYER_NORM_EPS);
        let dn = T::lit(d as f64);
        let mut xhat = Vec::with_capacity(xv.len());
        let mut inv_std = Vec::with_capacity(rows);
        let mut y = Vec::with_capacity(xv.len());
        for i in 0..rows {
            let r = xv.row(i);
            let mean = r.iter().copied().sum::<T>() / dn;
            let var = r.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let is = T::one() / (var + eps).sqrt();
            inv_std.push(is);
            for (j, &v) in r.iter().enumerate() {
                let h = (v - mean) * is;
                xhat.push(h);
                y.push(h * gv[j] + bv[j]);
            }
        }
        let shape = xv.shape().to_vec();
        let rg = self.rg(&[x, gain, bias]);
        Ok(self.push(
            Tensor::new(shape, y)?,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// `w / σ̂` where `σ̂ = ‖wᵀu‖` after `iters` power-iteration updates of `u`.
    /// `u` is treated as a constant buffer by the backward pass.
    pub fn spectral_norm(&mut self, w: Var, u: &mut [T], iters: usize) -> Result<Var> {
        let ws = self.shape(w).to_vec();
        if ws.len() != 2 || u.len() != ws[0] {
            return shape_err(format!(
                "spectral_norm: w{ws:?} with u of length {}",
                u.len()
            ));
        }
        let (v, sigma) = power_iteration(self.value(w).data(), ws[0], ws[1], u, iters);
        let inv = T::one() / sigma;
        let y = self.value(w).map(|x| x * inv);
        let rg = self.rg(&[w]);
        Ok(self.push(
            y,
            Op::SpectralNorm {
                w,
                u: u.to_vec(),
                v,
                sigma,
            },
            rg,
        ))
    }

    /// Concatenates `a[B,Da]` and `b[B,Db]` into `[B, Da+Db]`.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape().len() != 2 || bv.shape().len() != 2 || av.shape()[0] != bv.shape()[0] {
            return shape_err(format!(
                "concat: {:?} with {:?}",
                av.shape(),
                bv.shape()
            ));
        }
        let rows = av.shape()[0];
        let (da, db) = (av.shape()[1], bv.shape()[1]);
        let mut y = Vec::with_capacity(rows * (da + db));
        for i in 0..rows {
            y.extend_from_slice(av.row(i));
            y.extend_from_slice(bv.row(i));
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(vec![rows, da + db], y)?, Op::Concat(a, b), rg))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return shape_err(format!(
                "{what}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            ));
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (av, bv) = (self.value(a), self.value(b));
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(av.shape().to_vec(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let y = self.zip_map(a, b, |x, y| x + y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(y, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let y = self.zip_map(a, b, |x, y| x - y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(y, Op::Sub(a, b), rg))
    }

    /// Elementwise minimum; ties route the gradient to `a`.
    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "minimum")?;
        let y = self.zip_map(a, b, |x, y| if y < x { y } else { x });
        let rg = self.rg(&[a, b]);
        Ok(self.push(y, Op::Minimum(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let y = self.value(x).map(|v| v * c);
        let rg = self.rg(&[x]);
        self.push(y, Op::Scale(x, c), rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let s = xv.data().iter().copied().sum::<T>() / T::lit(xv.len() as f64);
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Mean(x), rg)
    }

    /// `mean((pred - target)²)` against a constant target.
    pub fn mse(&mut self, pred: Var, target: &[T]) -> Result<Var> {
        let pv = self.value(pred);
        if pv.len() != target.len() {
            return shape_err(format!(
                "mse: prediction has {} elements, target {}",
                pv.len(),
                target.len()
            ));
        }
        let n = T::lit(pv.len() as f64);
        let s = pv
            .data()
            .iter()
            .zip(target)
            .map(|(&p, &t)| (p - t) * (p - t))
            .sum::<T>()
            / n;
        let rg = self.rg(&[pred]);
        Ok(self.push(
            Tensor::scalar(s),
            Op::Mse {
                pred,
                target: target.to_vec(),
            },
            rg,
        ))
    }

    /// `Σ (x - anchor)²` against a constant anchor.
    pub fn sq_dist(&mut self, x: Var, anchor: &[T]) -> Result<Var> {
        let xv = self.value(x);
        if xv.len() != anchor.len() {
            return shape_err("sq_dist: anchor length mismatch");
        }
        let s = xv
            .data()
            .iter()
            .zip(anchor)
            .map(|(&a, &b)| (a - b) * (a - b))
            .sum::<T>();
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::scalar(s),
            Op::SqDist {
                x,
                anchor: anchor.to_vec(),
            },
            rg,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let y = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(y, Op::Reshape(x), rg))
    }

    /// Flattens everything after the leading axis.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        let rows = s[0];
        let rest = s[1..].iter().product();
        self.reshape(x, &[rows, rest])
    }

    /// Back-propagates from the scalar `loss`, accumulating gradients for every
    /// node that requires them.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return shape_err("backward: loss must be a scalar");
        }
        if !self.requires_grad(loss) {
            return Ok(());
        }
        for g in &mut self.grads {
            *g = None;
        }
        self.grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            if self.nodes[i].requires_grad {
                self.backprop_node(i, &g);
            }
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn backprop_node(&mut self, i: usize, g: &[T]) {
        let nodes = &self.nodes;
        let grads = &mut self.grads;
        macro_rules! with_grad {
            ($v:expr, |$dst:ident| $body:block) => {
                if let Some($dst) = grad_slot(nodes, grads, $v) {
                    $body
                }
            };
        }
        let value = |v: Var| nodes[v.0].value.data();
        let out = nodes[i].value.data();
        match &nodes[i].op {
            Op::Leaf => {}
            Op::Linear { x, w, b } => {
                let xs = nodes[x.0].value.shape();
                let (batch, inp) = (xs[0], xs[1]);
                let outd = nodes[w.0].value.shape()[0];
                with_grad!(*x, |dx| {
                    gemm_nn(g, value(*w), dx, batch, outd, inp);
                });
                with_grad!(*w, |dw| {
                    gemm_tn(g, value(*x), dw, outd, batch, inp);
                });
                if let Some(b) = b {
                    with_grad!(*b, |db| {
                        for row in g.chunks(outd) {
                            for (d, &gi) in db.iter_mut().zip(row) {
                                *d += gi;
                            }
                        }
                    });
                }
            }
            Op::Conv2d {
                x,
                k,
                b,
                cols,
                geom,
            } => {
                let (rows, f, pl) = (geom.rows(), geom.out_ch, geom.patch_len());
                let spatial = geom.out_h * geom.out_w;
                let mut gm = vec![T::zero(); rows * f];
                for bi in 0..geom.batch {
                    for fi in 0..f {
                        let src = &g[(bi * f + fi) * spatial..(bi * f + fi + 1) * spatial];
                        for (s, &val) in src.iter().enumerate() {
                            gm[(bi * spatial + s) * f + fi] = val;
                        }
                    }
                }
                with_grad!(*k, |dk| {
                    gemm_tn(&gm, cols, dk, f, rows, pl);
                });
                if let Some(b) = b {
                    with_grad!(*b, |db| {
                        for row in gm.chunks(f) {
                            for (d, &gi) in db.iter_mut().zip(row) {
                                *d += gi;
                            }
                        }
                    });
                }
                with_grad!(*x, |dx| {
                    let mut dcols = vec![T::zero(); rows * pl];
                    gemm_nn(&gm, value(*k), &mut dcols, rows, f, pl);
                    col2im_acc(&dcols, geom, dx);
                });
            }
            Op::Relu(x) => {
                with_grad!(*x, |dx| {
                    for ((d, &xi), &gi) in dx.iter_mut().zip(value(*x)).zip(g) {
                        if xi > T::zero() {
                            *d += gi;
                        }
                    }
                });
            }
            Op::Crelu(x) => {
                let xv = &nodes[x.0].value;
                let rows = xv.shape()[0];
                let d = xv.len() / rows;
                with_grad!(*x, |dx| {
                    for r in 0..rows {
                        let xr = xv.row(r);
                        let gr = &g[r * 2 * d..(r + 1) * 2 * d];
                        for j in 0..d {
                            if xr[j] > T::zero() {
                                dx[r * d + j] += gr[j];
                            } else if xr[j] < T::zero() {
                                dx[r * d + j] -= gr[d + j];
                            }
                        }
                    }
                });
            }
            Op::Tanh(x) => {
                with_grad!(*x, |dx| {
                    for ((d, &yi), &gi) in dx.iter_mut().zip(out).zip(g) {
                        *d += gi * (T::one() - yi * yi);
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let rows = inv_std.len();
                let d = xhat.len() / rows;
                let gv = value(*gain);
                with_grad!(*gain, |dg| {
                    for r in 0..rows {
                        for j in 0..d {
                            dg[j] += g[r * d + j] * xhat[r * d + j];
                        }
                    }
                });
                with_grad!(*bias, |db| {
                    for r in 0..rows {
                        for j in 0..d {
                            db[j] += g[r * d + j];
                        }
                    }
                });
                with_grad!(*x, |dx| {
                    let dn = T::lit(d as f64);
                    let mut dxhat = vec![T::zero(); d];
                    for r in 0..rows {
                        let mut s1 = T::zero();
                        let mut s2 = T::zero();
                        for j in 0..d {
                            let dh = g[r * d + j] * gv[j];
                            dxhat[j] = dh;
                            s1 += dh;
                            s2 += dh * xhat[r * d + j];
                        }
                        let scale = inv_std[r] / dn;
                        for j in 0..d {
                            dx[r * d + j] += scale * (dn * dxhat[j] - s1 - xhat[r * d + j] * s2);
                        }
                    }
                });
            }
            Op::SpectralNorm { w, u, v, sigma } => {
                with_grad!(*w, |dw| {
                    let wv = value(*w);
                    let inner: T = g.iter().zip(wv).map(|(&a, &b)| a * b).sum();
                    let inv = T::one() / *sigma;
                    let coef = inner * inv * inv;
                    let cols = v.len();
                    for (r, &ur) in u.iter().enumerate() {
                        for (c, &vc) in v.iter().enumerate() {
                            let idx = r * cols + c;
                            dw[idx] += g[idx] * inv - coef * ur * vc;
                        }
                    }
                });
            }
            Op::Concat(a, b) => {
                let da = nodes[a.0].value.shape()[1];
                let db = nodes[b.0].value.shape()[1];
                let rows = nodes[a.0].value.shape()[0];
                with_grad!(*a, |ga| {
                    for r in 0..rows {
                        for j in 0..da {
                            ga[r * da + j] += g[r * (da + db) + j];
                        }
                    }
                });
                with_grad!(*b, |gb| {
                    for r in 0..rows {
                        for j in 0..db {
                            gb[r * db + j] += g[r * (da + db) + da + j];
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                with_grad!(*a, |ga| {
                    for (d, &gi) in ga.iter_mut().zip(g) {
                        *d += gi;
                    }
                });
                with_grad!(*b, |gb| {
                    for (d, &gi) in gb.iter_mut().zip(g) {
                        *d += gi;
                    }
                });
            }
            Op::Sub(a, b) => {
                with_grad!(*a, |ga| {
                    for (d, &gi) in ga.iter_mut().zip(g) {
                        *d += gi;
                    }
                });
                with_grad!(*b, |gb| {
                    for (d, &gi) in gb.iter_mut().zip(g) {
                        *d -= gi;
                    }
                });
            }
            Op::Minimum(a, b) => {
                let (av, bv) = (value(*a), value(*b));
                with_grad!(*a, |ga| {
                    for j in 0..g.len() {
                        if av[j] <= bv[j] {
                            ga[j] += g[j];
                        }
                    }
                });
                with_grad!(*b, |gb| {
                    for j in 0..g.len() {
                        if bv[j] < av[j] {
                            gb[j] += g[j];
                        }
                    }
                });
            }
            Op::Scale(x, c) => {
                with_grad!(*x, |dx| {
                    for (d, &gi) in dx.iter_mut().zip(g) {
                        *d += gi * *c;
                    }
                });
            }
            Op::Sum(x) => {
                with_grad!(*x, |dx| {
                    for d in dx.iter_mut() {
                        *d += g[0];
                    }
                });
            }
            Op::Mean(x) => {
                with_grad!(*x, |dx| {
                    let s = g[0] / T::lit(dx.len() as f64);
                    for d in dx.iter_mut() {
                        *d += s;
                    }
                });
            }
            Op::Mse { pred, target } => {
                with_grad!(*pred, |dp| {
                    let s = g[0] * T::lit(2.0) / T::lit(target.len() as f64);
                    for ((d, &p), &t) in dp.iter_mut().zip(value(*pred)).zip(target) {
                        *d += s * (p - t);
                    }
                });
            }
            Op::SqDist { x, anchor } => {
                with_grad!(*x, |dx| {
                    let s = g[0] * T::lit(2.0);
                    for ((d, &p), &a) in dx.iter_mut().zip(value(*x)).zip(anchor) {
                        *d += s * (p - a);
                    }
                });
            }
            Op::Reshape(x) => {
                with_grad!(*x, |dx| {
                    for (d, &gi) in dx.iter_mut().zip(g) {
                        *d += gi;
                    }
                });
            }
        }
    }
}

/// Gradient accumulator for input `v`, created on first use; `None` when `v`
/// does not require a gradient.
fn grad_slot<'a, T: Real>(
    nodes: &[Node<T>],
    grads: &'a mut [Option<Vec<T>>],
    v: Var,
) -> Option<&'a mut Vec<T>> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    let n = nodes[v.0].value.len();
    Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); n]))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, data).unwrap()
    }

    #[test]
    fn linear_hand_arithmetic() {
        let mut g = Graph::new();
        let x = g.constant(t(&[1, 2], &[1.0, 2.0]));
        let w = g.constant(t(&[1, 2], &[3.0, 4.0]));
        let b = g.constant(t(&[1], &[5.0]));
        let y = g.linear(x, w, Some(b)).unwrap();
        assert_eq!(g.value(y).data(), &[16.0]);
    }

    #[test]
    fn linear_identity_weight() {
        let mut g = Graph::new();
        let xd = [0.5, -1.5, 2.0, 3.0, -0.25, 7.0];
        let x = g.constant(t(&[2, 3], &xd));
        let w = g.constant(t(&[3, 3], &[1., 0., 0., 0., 1., 0., 0., 0., 1.]));
        let b = g.constant(Tensor::zeros(&[3]));
        let y = g.linear(x, w, Some(b)).unwrap();
        assert_eq!(g.value(y).data(), &xd);
    }

    #[test]
    fn linear_weight_grad_is_column_sums() {
        let mut g = Graph::new();
        let x = g.constant(t(&[3, 2], &[1., 2., 3., 4., 5., 6.]));
        let w = g.leaf(t(&[2, 2], &[0.1, 0.2, 0.3, 0.4]), true);
        let y = g.linear(x, w, None).unwrap();
        let s = g.sum(y);
        g.backward(s).unwrap();
        assert_eq!(g.grad(w).unwrap(), &[9., 12., 9., 12.]);
        assert!(g.grad(x).is_none());
    }

    #[test]
    fn linear_shape_mismatch() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(&[2, 3]));
        let w = g.constant(Tensor::zeros(&[4, 2]));
        assert!(matches!(g.linear(x, w, None), Err(LabError::Shape(_))));
    }

    #[test]
    fn conv_examples() {
        let mut g = Graph::new();
        let xd: Vec<f64> = (0..2 * 9).map(|i| i as f64).collect();
        let x = g.constant(t(&[1, 2, 3, 3], &xd));
        // 1x1 identity kernel per channel
        let k = g.constant(t(&[2, 2, 1, 1], &[1., 0., 0., 1.]));
        let y = g.conv2d(x, k, None, 1).unwrap();
        assert_eq!(g.value(y).data(), &xd[..]);

        let ones = g.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
        let k = g.constant(Tensor::full(&[1, 1, 2, 2], 1.0));
        let y = g.conv2d(ones, k, None, 1).unwrap();
        assert_eq!(g.value(y).shape(), &[1, 1, 2, 2]);
        assert_eq!(g.value(y).data(), &[4.0; 4]);

        let big = g.constant(Tensor::full(&[1, 1, 4, 4], 1.0));
        let y = g.conv2d(ones, big, None, 1);
        assert!(matches!(y, Err(LabError::Config(_))));

        let x = g.constant(Tensor::full(&[1, 1, 7, 6], 1.0));
        let k = g.constant(Tensor::full(&[3, 1, 3, 3], 1.0));
        let y = g.conv2d(x, k, None, 2).unwrap();
        assert_eq!(g.value(y).shape(), &[1, 3, 3, 2]);
    }

    #[test]
    fn activation_examples() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[1, 2], &[2.0, -3.0]), true);
        let y = g.crelu(x).unwrap();
        assert_eq!(g.value(y).data(), &[2.0, 0.0, 0.0, 3.0]);

        let x = g.leaf(t(&[1, 2], &[-1.0, 1.0]), true);
        let y = g.relu(x);
        assert_eq!(g.value(y).data(), &[0.0, 1.0]);
        let s = g.sum(y);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[0.0, 1.0]);

        let x = g.constant(t(&[1, 3], &[-50.0, 0.0, 50.0]));
        let y = g.tanh(x);
        assert!(g.value(y).data().iter().all(|v| v.abs() <= 1.0));
        assert_eq!(g.activate(x, Activation::Identity).unwrap(), x);
    }

    #[test]
    fn layer_norm_examples() {
        let mut g = Graph::new();
        let gain = g.constant(Tensor::full(&[2], 1.0));
        let bias = g.constant(Tensor::zeros(&[2]));
        let x = g.constant(t(&[2, 2], &[3.0, 3.0, 1.0, -1.0]));
        let y = g.layer_norm(x, gain, bias).unwrap();
        let v = g.value(y).data();
        assert_eq!(&v[..2], &[0.0, 0.0]);
        assert!((v[2] - 1.0).abs() < 1e-5 && (v[3] + 1.0).abs() < 1e-5);

        let gain1 = g.constant(Tensor::full(&[1], 1.0));
        let x1 = g.constant(t(&[2, 1], &[1.0, 2.0]));
        assert!(g.layer_norm(x1, gain1, gain1).is_err());
    }

    #[test]
    fn min_routes_gradient_to_smaller() {
        let mut g = Graph::new();
        let a = g.leaf(t(&[3], &[1.0, 5.0, 2.0]), true);
        let b = g.leaf(t(&[3], &[2.0, 4.0, 2.0]), true);
        let m = g.minimum(a, b).unwrap();
        assert_eq!(g.value(m).data(), &[1.0, 4.0, 2.0]);
        let s = g.sum(m);
        g.backward(s).unwrap();
        assert_eq!(g.grad(a).unwrap(), &[1.0, 0.0, 1.0]);
        assert_eq!(g.grad(b).unwrap(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn loss_must_be_scalar() {
        let mut g = Graph::new();
        let a = g.leaf(t(&[2], &[1.0, 2.0]), true);
        assert!(g.backward(a).is_err());
    }

    #[test]
    fn constant_subgraph_has_no_grads() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2], &[1.0, 2.0]));
        let w = g.leaf(t(&[2], &[3.0, 4.0]), true);
        let c = g.scale(a, 2.0);
        let d = g.add(c, w).unwrap();
        let s = g.mean(d);
        g.backward(s).unwrap();
        assert!(g.grad(c).is_none());
        assert_eq!(g.grad(w).unwrap(), &[0.5, 0.5]);
        let tw = g.tensor_with_grad(w);
        assert_eq!(tw.grad().unwrap(), &[0.5, 0.5]);
    }

    #[test]
    fn quick_finite_difference_on_mixed_chain() {
        // conv -> relu -> flatten -> linear -> layer norm -> tanh -> mse
        let xd: Vec<f64> = (0..2 * 2 * 5 * 5).map(|i| ((i * 7 % 13) as f64 - 6.0) / 5.0).collect();
        let kd: Vec<f64> = (0..3 * 2 * 3 * 3).map(|i| ((i * 5 % 11) as f64 - 5.0) / 9.0).collect();
        let wd: Vec<f64> = (0..4 * 12).map(|i| ((i * 3 % 7) as f64 - 3.0) / 4.0).collect();
        let build = |kd: &[f64], g: &mut Graph<f64>| {
            let x = g.constant(t(&[2, 2, 5, 5], &xd));
            let k = g.leaf(t(&[3, 2, 3, 3], kd), true);
            let kb = g.leaf(t(&[3], &[0.1, -0.2, 0.05]), true);
            let h = g.conv2d(x, k, Some(kb), 2).unwrap();
            let h = g.relu(h);
            let h = g.flatten(h).unwrap();
            let w = g.leaf(t(&[4, 12], &wd), true);
            let h = g.linear(h, w, None).unwrap();
            let gain = g.leaf(t(&[4], &[1.0, 0.5, 2.0, -1.0]), true);
            let bias = g.leaf(t(&[4], &[0.0, 0.1, 0.2, 0.3]), true);
            let h = g.layer_norm(h, gain, bias).unwrap();
            let h = g.tanh(h);
            let loss = g.mse(h, &[0.3, -0.1, 0.5, 0.0, 0.2, 0.2, -0.4, 0.1]).unwrap();
            (k, loss)
        };
        let mut g = Graph::new();
        let (k, loss) = build(&kd, &mut g);
        g.backward(loss).unwrap();
        let analytic = g.grad(k).unwrap().to_vec();
        let h = 1e-6;
        for i in 0..kd.len() {
            let mut plus = kd.clone();
            plus[i] += h;
            let mut minus = kd.clone();
            minus[i] -= h;
            let mut gp = Graph::new();
            let (_, lp) = build(&plus, &mut gp);
            let mut gm = Graph::new();
            let (_, lm) = build(&minus, &mut gm);
            let fd = (gp.value(lp).data()[0] - gm.value(lm).data()[0]) / (2.0 * h);
            let err = (fd - analytic[i]).abs() / fd.abs().max(analytic[i].abs()).max(1e-6);
            assert!(err < 1e-4, "k[{i}]: fd {fd} vs {}", analytic[i]);
        }
    }
}
