//! Minimal reverse-mode automatic differentiation over n-d float arrays.
//!
//! A `Graph` records one forward pass; every op pushes a node holding its
//! value and a one-shot backward closure. `backward` walks the nodes in
//! reverse creation order and accumulates gradients into the leaves.
//!
//! Generic over `f32` (training) and `f64` (tight gradient checks). All ops
//! are deterministic: parallelism only ever splits work into independently
//! computed pieces that are combined in a fixed order.

use ndarray::{s, Array1, Array2, ArrayD, ArrayView2, Axis, Ix2, Ix4, IxDyn};
use rayon::prelude::*;

use crate::error::{Error, Result};

pub trait Scalar:
    ndarray::NdFloat + num_traits::FromPrimitive + num_traits::ToPrimitive + std::iter::Sum
{
    const DTYPE_TAG: u8;
    fn fr(x: f64) -> Self {
        num_traits::FromPrimitive::from_f64(x).expect("f64 conversion")
    }
    fn f64(self) -> f64 {
        num_traits::ToPrimitive::to_f64(&self).expect("f64 conversion")
    }
}

impl Scalar for f32 {
    const DTYPE_TAG: u8 = 0;
}
impl Scalar for f64 {
    const DTYPE_TAG: u8 = 1;
}

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub usize);

type BackwardFn<F> = Box<dyn FnOnce(&mut Graph<F>, ArrayD<F>)>;

pub struct Graph<F: Scalar> {
    values: Vec<ArrayD<F>>,
    grads: Vec<Option<ArrayD<F>>>,
    backward: Vec<Option<BackwardFn<F>>>,
    /// Monotone count of buffer bytes created during the pass (values plus
    /// saved backward context); a working-set estimate for cost reports.
    bytes_allocated: usize,
}

impl<F: Scalar> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Graph<F> {
    pub fn new() -> Self {
        Graph { values: Vec::new(), grads: Vec::new(), backward: Vec::new(), bytes_allocated: 0 }
    }

    pub fn bytes_allocated(&self) -> usize {
        self.bytes_allocated
    }

    fn note_bytes(&mut self, elems: usize) {
        self.bytes_allocated += elems * std::mem::size_of::<F>();
    }

    fn push(&mut self, value: ArrayD<F>) -> Var {
        self.note_bytes(value.len());
        self.values.push(value);
        self.grads.push(None);
        self.backward.push(None);
        Var(self.values.len() - 1)
    }

    fn set_backward(&mut self, v: Var, f: BackwardFn<F>) {
        self.backward[v.0] = Some(f);
    }

    pub fn leaf(&mut self, value: ArrayD<F>) -> Var {
        self.push(value)
    }

    pub fn value(&self, v: Var) -> &ArrayD<F> {
        &self.values[v.0]
    }

    pub fn grad(&self, v: Var) -> Option<&ArrayD<F>> {
        self.grads[v.0].as_ref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<ArrayD<F>> {
        self.grads[v.0].take()
    }

    pub fn scalar_value(&self, v: Var) -> F {
        let val = self.value(v);
        debug_assert_eq!(val.len(), 1);
        *val.iter().next().unwrap()
    }

    pub fn accum_grad(&mut self, v: Var, g: ArrayD<F>) {
        match &mut self.grads[v.0] {
            Some(existing) => *existing += &g,
            slot => *slot = Some(g),
        }
    }

    /// Reverse pass from `root` (typically a scalar loss). Leaf gradients
    /// stay readable afterwards; intermediate gradients are consumed.
    pub fn backward(&mut self, root: Var) {
        let shape = self.values[root.0].raw_dim();
        self.grads[root.0] = Some(ArrayD::ones(shape));
        for i in (0..=root.0).rev() {
            if let Some(f) = self.backward[i].take() {
                if let Some(g) = self.grads[i].take() {
                    f(self, g);
                }
            }
        }
    }

    // ---- elementwise ----

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b)?;
        let out = self.push(self.values[a.0].clone() + &self.values[b.0]);
        self.set_backward(out, Box::new(move |g, grad| {
            g.accum_grad(a, grad.clone());
            g.accum_grad(b, grad);
        }));
        Ok(out)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b)?;
        let out = self.push(self.values[a.0].clone() - &self.values[b.0]);
        self.set_backward(out, Box::new(move |g, grad| {
            g.accum_grad(a, grad.clone());
            g.accum_grad(b, -grad);
        }));
        Ok(out)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b)?;
        let out = self.push(self.values[a.0].clone() * &self.values[b.0]);
        self.set_backward(out, Box::new(move |g, grad| {
            let da = &grad * g.value(b);
            let db = grad * g.value(a);
            g.accum_grad(a, da);
            g.accum_grad(b, db);
        }));
        Ok(out)
    }

    pub fn scale(&mut self, a: Var, c: F) -> Var {
        let out = self.push(self.values[a.0].mapv(|x| x * c));
        self.set_backward(out, Box::new(move |g, grad| {
            g.accum_grad(a, grad.mapv(|x| x * c));
        }));
        out
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.push(self.values[a.0].mapv(|x| if x > F::zero() { x } else { F::zero() }));
        self.set_backward(out, Box::new(move |g, grad| {
            let mask = g.value(a).mapv(|x| if x > F::zero() { F::one() } else { F::zero() });
            g.accum_grad(a, grad * &mask);
        }));
        out
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let y = self.values[a.0].mapv(|x| {
            if x >= F::zero() {
                F::one() / (F::one() + (-x).exp())
            } else {
                let e = x.exp();
                e / (F::one() + e)
            }
        });
        let out = self.push(y);
        self.set_backward(out, Box::new(move |g, grad| {
            let y = g.value(out).clone();
            let d = grad * &y.mapv(|v| v * (F::one() - v));
            g.accum_grad(a, d);
        }));
        out
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.push(self.values[a.0].mapv(|x| x.tanh()));
        self.set_backward(out, Box::new(move |g, grad| {
            let y = g.value(out).clone();
            let d = grad * &y.mapv(|v| F::one() - v * v);
            g.accum_grad(a, d);
        }));
        out
    }

    // ---- linear algebra ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let av = self.as2(a)?;
        let bv = self.as2(b)?;
        if av.ncols() != bv.nrows() {
            return Err(Error::shape(format!(
                "matmul: {:?} x {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let y = parallel_matmul(av, bv).into_dyn();
        let out = self.push(y);
        self.set_backward(out, Box::new(move |g, grad| {
            let gm = grad.view().into_dimensionality::<Ix2>().unwrap();
            let da = parallel_matmul(gm, g.as2(b).unwrap().t()).into_dyn();
            let db = parallel_matmul(g.as2(a).unwrap().t(), gm).into_dyn();
            g.accum_grad(a, da);
            g.accum_grad(b, db);
        }));
        Ok(out)
    }

    /// x (r×c) + row vector b (c), broadcast over rows.
    pub fn add_rowvec(&mut self, x: Var, b: Var) -> Result<Var> {
        let xv = self.as2(x)?;
        let bl = self.values[b.0].len();
        if xv.ncols() != bl || self.values[b.0].ndim() != 1 {
            return Err(Error::shape(format!(
                "add_rowvec: {:?} + {:?}",
                xv.shape(),
                self.values[b.0].shape()
            )));
        }
        let brow = self.values[b.0].view().into_dimensionality::<ndarray::Ix1>().unwrap();
        let y = (&xv + &brow).into_dyn();
        let out = self.push(y);
        self.set_backward(out, Box::new(move |g, grad| {
            let gm = grad.view().into_dimensionality::<Ix2>().unwrap();
            let db = gm.sum_axis(Axis(0)).into_dyn();
            g.accum_grad(b, db);
            g.accum_grad(x, grad);
        }));
        Ok(out)
    }

    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_rowvec(y, b)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != self.values[a.0].len() {
            return Err(Error::shape(format!(
                "reshape {:?} -> {:?}",
                self.values[a.0].shape(),
                shape
            )));
        }
        let old_shape: Vec<usize> = self.values[a.0].shape().to_vec();
        let y = self.values[a.0].to_shape(IxDyn(shape)).unwrap().to_owned();
        let out = self.push(y);
        self.set_backward(out, Box::new(move |g, grad| {
            let back = grad.to_shape(IxDyn(&old_shape)).unwrap().to_owned();
            g.accum_grad(a, back);
        }));
        Ok(out)
    }

    /// Concatenate 2-d blocks along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::argument("concat_cols: empty input"));
        }
        let views: Vec<ArrayView2<F>> =
            parts.iter().map(|&p| self.as2(p)).collect::<Result<_>>()?;
        let rows = views[0].nrows();
        if views.iter().any(|v| v.nrows() != rows) {
            return Err(Error::shape("concat_cols: row count mismatch"));
        }
        let widths: Vec<usize> = views.iter().map(|v| v.ncols()).collect();
        let y = ndarray::concatenate(Axis(1), &views)
            .map_err(|e| Error::shape(format!("concat: {e}")))?
            .into_dyn();
        let out = self.push(y);
        let parts: Vec<Var> = parts.to_vec();
        self.set_backward(out, Box::new(move |g, grad| {
            let gm = grad.view().into_dimensionality::<Ix2>().unwrap();
            let mut off = 0;
            for (i, &p) in parts.iter().enumerate() {
                let slice = gm.slice(s![.., off..off + widths[i]]).to_owned().into_dyn();
                g.accum_grad(p, slice);
                off += widths[i];
            }
        }));
        Ok(out)
    }

    /// x (B,M,K) -> (B,K), picking index m along axis 1.
    pub fn select_axis1(&mut self, x: Var, m: usize) -> Result<Var> {
        let shape: Vec<usize> = self.values[x.0].shape().to_vec();
        if shape.len() != 3 || m >= shape[1] {
            return Err(Error::shape(format!("select_axis1: shape {shape:?}, m={m}")));
        }
        let y = self.values[x.0].index_axis(Axis(1), m).to_owned();
        let out = self.push(y.into_dyn());
        self.set_backward(out, Box::new(move |g, grad| {
            let mut dx = ArrayD::zeros(IxDyn(&shape));
            dx.index_axis_mut(Axis(1), m).assign(&grad);
            g.accum_grad(x, dx);
        }));
        Ok(out)
    }

    /// x (B,M,K) -> (B,K), arithmetic mean over axis 1.
    pub fn mean_axis1(&mut self, x: Var) -> Result<Var> {
        let shape: Vec<usize> = self.values[x.0].shape().to_vec();
        if shape.len() != 3 {
            return Err(Error::shape(format!("mean_axis1: shape {shape:?}")));
        }
        let m = shape[1];
        let y = self.values[x.0].mean_axis(Axis(1)).unwrap();
        let out = self.push(y);
        self.set_backward(out, Box::new(move |g, grad| {
            let inv = F::fr(1.0 / m as f64);
            let mut dx = ArrayD::zeros(IxDyn(&shape));
            let scaled = grad.mapv(|v| v * inv);
            for i in 0..m {
                dx.index_axis_mut(Axis(1), i).assign(&scaled);
            }
            g.accum_grad(x, dx);
        }));
        Ok(out)
    }

    /// From a 2-d (R, d) array whose rows form consecutive blocks of
    /// `block` rows, keep the first `take` rows of every block.
    pub fn take_block_rows(&mut self, x: Var, block: usize, take: usize) -> Result<Var> {
        let xv = self.as2(x)?;
        let (rows, d) = (xv.nrows(), xv.ncols());
        if block == 0 || take == 0 || take > block || rows % block != 0 {
            return Err(Error::shape(format!(
                "take_block_rows: {rows} rows, block {block}, take {take}"
            )));
        }
        let n_blocks = rows / block;
        let mut y = Array2::<F>::zeros((n_blocks * take, d));
        for i in 0..n_blocks {
            y.slice_mut(s![i * take..(i + 1) * take, ..])
                .assign(&xv.slice(s![i * block..i * block + take, ..]));
        }
        let out = self.push(y.into_dyn());
        self.set_backward(out, Box::new(move |g, grad| {
            let gv = grad.into_dimensionality::<Ix2>().unwrap();
            let mut dx = Array2::<F>::zeros((rows, d));
            for i in 0..n_blocks {
                dx.slice_mut(s![i * block..i * block + take, ..])
                    .assign(&gv.slice(s![i * take..(i + 1) * take, ..]));
            }
            g.accum_grad(x, dx.into_dyn());
        }));
        Ok(out)
    }

    /// Mean of all elements, as a 0-d scalar node.
    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.values[a.0].len();
        let mean: F = self.values[a.0].iter().copied().sum::<F>() / F::fr(n as f64);
        let out = self.push(ArrayD::from_elem(IxDyn(&[]), mean));
        self.set_backward(out, Box::new(move |g, grad| {
            let gs = *grad.iter().next().unwrap() / F::fr(n as f64);
            let shape = g.value(a).raw_dim();
            g.accum_grad(a, ArrayD::from_elem(shape, gs));
        }));
        out
    }

    // ---- normalization ----

    /// Row-wise L2 normalization of a 2-d array onto the unit sphere.
    pub fn l2norm_rows(&mut self, x: Var) -> Result<Var> {
        let xv = self.as2(x)?;
        let (r, d) = (xv.nrows(), xv.ncols());
        let tiny = F::fr(1e-30);
        let mut inv_norms = Array1::<F>::zeros(r);
        let mut y = Array2::<F>::zeros((r, d));
        for i in 0..r {
            let row = xv.row(i);
            let norm = row.iter().map(|&v| v * v).sum::<F>().sqrt().max(tiny);
            let inv = F::one() / norm;
            inv_norms[i] = inv;
            y.row_mut(i).assign(&row.mapv(|v| v * inv));
        }
        let out = self.push(y.into_dyn());
        self.note_bytes(r);
        self.set_backward(out, Box::new(move |g, grad| {
            let gm = grad.view().into_dimensionality::<Ix2>().unwrap();
            let yv = g.value(out).view().into_dimensionality::<Ix2>().unwrap();
            let mut dx = Array2::<F>::zeros((r, d));
            for i in 0..r {
                let yr = yv.row(i);
                let gr = gm.row(i);
                let dot = yr.iter().zip(gr.iter()).map(|(&a, &b)| a * b).sum::<F>();
                let inv = inv_norms[i];
                dx.row_mut(i).assign(
                    &gr.iter()
                        .zip(yr.iter())
                        .map(|(&gv, &yv_)| inv * (gv - yv_ * dot))
                        .collect::<Array1<F>>(),
                );
            }
            g.accum_grad(x, dx.into_dyn());
        }));
        Ok(out)
    }

    /// Per-channel normalization over the spatial dims of each sample,
    /// with learnable per-channel scale and shift. Batch-size independent.
    pub fn channel_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let xv = self.values[x.0].view().into_dimensionality::<Ix4>().map_err(|_| {
            Error::shape(format!("channel_norm expects 4-d input, got {:?}", self.values[x.0].shape()))
        })?;
        let (bsz, c, h, w) = xv.dim();
        if self.values[gamma.0].len() != c || self.values[beta.0].len() != c {
            return Err(Error::shape("channel_norm: gamma/beta length != channels"));
        }
        let eps = F::fr(1e-5);
        let n = h * w;
        let inv_n = F::fr(1.0 / n as f64);
        let gv = self.values[gamma.0].clone();
        let mut xhat = ndarray::Array4::<F>::zeros((bsz, c, h, w));
        let mut inv_std = Array2::<F>::zeros((bsz, c));
        for bi in 0..bsz {
            for ci in 0..c {
                let sl = xv.slice(s![bi, ci, .., ..]);
                let mu = sl.iter().copied().sum::<F>() * inv_n;
                let var = sl.iter().map(|&v| (v - mu) * (v - mu)).sum::<F>() * inv_n;
                let istd = F::one() / (var + eps).sqrt();
                inv_std[(bi, ci)] = istd;
                xhat.slice_mut(s![bi, ci, .., ..]).assign(&sl.mapv(|v| (v - mu) * istd));
            }
        }
        let mut y = ndarray::Array4::<F>::zeros((bsz, c, h, w));
        let bv = self.values[beta.0].clone();
        for ci in 0..c {
            let gline = gv[ci];
            let bline = bv[ci];
            y.slice_mut(s![.., ci, .., ..])
                .assign(&xhat.slice(s![.., ci, .., ..]).mapv(|v| v * gline + bline));
        }
        self.note_bytes(bsz * c * h * w + bsz * c);
        let out = self.push(y.into_dyn());
        self.set_backward(out, Box::new(move |g, grad| {
            let gm = grad.view().into_dimensionality::<Ix4>().unwrap();
            let gammav = g.value(gamma).clone();
            let mut dgamma = Array1::<F>::zeros(c);
            let mut dbeta = Array1::<F>::zeros(c);
            let mut dx = ndarray::Array4::<F>::zeros((bsz, c, h, w));
            for bi in 0..bsz {
                for ci in 0..c {
                    let go = gm.slice(s![bi, ci, .., ..]);
                    let xh = xhat.slice(s![bi, ci, .., ..]);
                    let sum_g = go.iter().copied().sum::<F>();
                    let sum_gx = go.iter().zip(xh.iter()).map(|(&a, &b)| a * b).sum::<F>();
                    dbeta[ci] += sum_g;
                    dgamma[ci] += sum_gx;
                    let gc = gammav[ci];
                    let m1 = sum_g * inv_n * gc;
                    let m2 = sum_gx * inv_n * gc;
                    let istd = inv_std[(bi, ci)];
                    let mut dsl = dx.slice_mut(s![bi, ci, .., ..]);
                    ndarray::Zip::from(&mut dsl).and(&go).and(&xh).for_each(|d, &gvv, &xv_| {
                        *d = istd * (gvv * gc - m1 - xv_ * m2);
                    });
                }
            }
            g.accum_grad(x, dx.into_dyn());
            g.accum_grad(gamma, dgamma.into_dyn());
            g.accum_grad(beta, dbeta.into_dyn());
        }));
        Ok(out)
    }

    // ---- convolution & pooling ----

    /// 2-d convolution, NCHW, square stride/pad, via im2col + matmul.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let xv = self.values[x.0].view().into_dimensionality::<Ix4>().map_err(|_| {
            Error::shape(format!("conv2d expects 4-d input, got {:?}", self.values[x.0].shape()))
        })?;
        let wv = self.values[w.0].view().into_dimensionality::<Ix4>().map_err(|_| {
            Error::shape(format!("conv2d expects 4-d kernel, got {:?}", self.values[w.0].shape()))
        })?;
        let (bsz, c, h, wd) = xv.dim();
        let (o, cw, kh, kw) = wv.dim();
        if cw != c {
            return Err(Error::shape(format!("conv2d: input has {c} channels, kernel expects {cw}")));
        }
        if self.values[b.0].len() != o {
            return Err(Error::shape("conv2d: bias length != out channels"));
        }
        if h + 2 * pad < kh || wd + 2 * pad < kw {
            return Err(Error::shape("conv2d: kernel larger than padded input"));
        }
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (wd + 2 * pad - kw) / stride + 1;
        let ckk = c * kh * kw;
        let bcol = bsz * oh * ow;

        let cols = im2col(&xv, kh, kw, stride, pad, oh, ow);
        let wmat = wv.to_shape((o, ckk)).unwrap().to_owned();
        let ymat = parallel_matmul(wmat.view(), cols.view());
        let bias = self.values[b.0].clone();
        self.note_bytes(cols.len());

        let mut out_arr = ndarray::Array4::<F>::zeros((bsz, o, oh, ow));
        {
            let out_slice = out_arr.as_slice_mut().unwrap();
            let ysl = ymat.as_slice().unwrap();
            for bi in 0..bsz {
                for oi in 0..o {
                    let bval = bias[oi];
                    let dst_base = ((bi * o) + oi) * oh * ow;
                    let src_base = oi * bcol + bi * oh * ow;
                    for p in 0..oh * ow {
                        out_slice[dst_base + p] = ysl[src_base + p] + bval;
                    }
                }
            }
        }
        let out = self.push(out_arr.into_dyn());
        self.set_backward(out, Box::new(move |g, grad| {
            let gm4 = grad.view().into_dimensionality::<Ix4>().unwrap();
            // gmat (O, B*OH*OW) in the same column order as cols
            let mut gmat = Array2::<F>::zeros((o, bcol));
            {
                let gsl = gmat.as_slice_mut().unwrap();
                let gr = gm4.as_slice().unwrap();
                for bi in 0..bsz {
                    for oi in 0..o {
                        let src_base = ((bi * o) + oi) * oh * ow;
                        let dst_base = oi * bcol + bi * oh * ow;
                        gsl[dst_base..dst_base + oh * ow]
                            .copy_from_slice(&gr[src_base..src_base + oh * ow]);
                    }
                }
            }
            let db = gmat.sum_axis(Axis(1)).into_dyn();
            let dwmat = parallel_matmul(gmat.view(), cols.t());
            let dw = dwmat.to_shape(IxDyn(&[o, c, kh, kw])).unwrap().to_owned();
            let wmat2 = g
                .value(w)
                .to_shape((o, ckk))
                .unwrap()
                .to_owned();
            let dcols = parallel_matmul(wmat2.t(), gmat.view());
            let dx = col2im(&dcols, bsz, c, h, wd, kh, kw, stride, pad, oh, ow);
            g.accum_grad(x, dx.into_dyn());
            g.accum_grad(w, dw);
            g.accum_grad(b, db);
        }));
        Ok(out)
    }

    /// Max pooling, NCHW, window k, stride s (floor semantics on odd dims).
    pub fn maxpool2d(&mut self, x: Var, k: usize, stride: usize) -> Result<Var> {
        let xv = self.values[x.0].view().into_dimensionality::<Ix4>().map_err(|_| {
            Error::shape(format!("maxpool2d expects 4-d input, got {:?}", self.values[x.0].shape()))
        })?;
        let (bsz, c, h, w) = xv.dim();
        if h < k || w < k {
            return Err(Error::shape("maxpool2d: window larger than input"));
        }
        let oh = (h - k) / stride + 1;
        let ow = (w - k) / stride + 1;
        let mut out_arr = ndarray::Array4::<F>::zeros((bsz, c, oh, ow));
        let mut argmax = vec![0u32; bsz * c * oh * ow];
        {
            let mut idx = 0;
            for bi in 0..bsz {
                for ci in 0..c {
                    let plane = xv.slice(s![bi, ci, .., ..]);
                    for ohi in 0..oh {
                        for owi in 0..ow {
                            let mut best = F::neg_infinity();
                            let mut best_at = 0u32;
                            for dr in 0..k {
                                for dc in 0..k {
                                    let (r, cc) = (ohi * stride + dr, owi * stride + dc);
                                    let v = plane[(r, cc)];
                                    if v > best {
                                        best = v;
                                        best_at = (r * w + cc) as u32;
                                    }
                                }
                            }
                            out_arr[(bi, ci, ohi, owi)] = best;
                            argmax[idx] = best_at;
                            idx += 1;
                        }
                    }
                }
            }
        }
        self.note_bytes(argmax.len());
        let out = self.push(out_arr.into_dyn());
        self.set_backward(out, Box::new(move |g, grad| {
            let gm = grad.view().into_dimensionality::<Ix4>().unwrap();
            let mut dx = ndarray::Array4::<F>::zeros((bsz, c, h, w));
            let mut idx = 0;
            for bi in 0..bsz {
                for ci in 0..c {
                    for ohi in 0..oh {
                        for owi in 0..ow {
                            let flat = argmax[idx] as usize;
                            dx[(bi, ci, flat / w, flat % w)] += gm[(bi, ci, ohi, owi)];
                            idx += 1;
                        }
                    }
                }
            }
            g.accum_grad(x, dx.into_dyn());
        }));
        Ok(out)
    }

    /// (B,C,H,W) -> (B,C) spatial average.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let xv = self.values[x.0].view().into_dimensionality::<Ix4>().map_err(|_| {
            Error::shape(format!("global_avg_pool expects 4-d input, got {:?}", self.values[x.0].shape()))
        })?;
        let (bsz, c, h, w) = xv.dim();
        let inv = F::fr(1.0 / (h * w) as f64);
        let mut y = Array2::<F>::zeros((bsz, c));
        for bi in 0..bsz {
            for ci in 0..c {
                y[(bi, ci)] = xv.slice(s![bi, ci, .., ..]).iter().copied().sum::<F>() * inv;
            }
        }
        let out = self.push(y.into_dyn());
        self.set_backward(out, Box::new(move |g, grad| {
            let gm = grad.view().into_dimensionality::<Ix2>().unwrap();
            let mut dx = ndarray::Array4::<F>::zeros((bsz, c, h, w));
            for bi in 0..bsz {
                for ci in 0..c {
                    dx.slice_mut(s![bi, ci, .., ..]).fill(gm[(bi, ci)] * inv);
                }
            }
            g.accum_grad(x, dx.into_dyn());
        }));
        Ok(out)
    }

    // ---- losses ----

    /// Mean squared error against a constant target, as a 0-d scalar node.
    pub fn mse(&mut self, pred: Var, target: &ArrayD<F>) -> Result<Var> {
        if self.values[pred.0].shape() != target.shape() {
            return Err(Error::shape(format!(
                "mse: pred {:?} vs target {:?}",
                self.values[pred.0].shape(),
                target.shape()
            )));
        }
        let n = target.len();
        let diff = self.values[pred.0].clone() - target;
        let val = diff.iter().map(|&d| d * d).sum::<F>() / F::fr(n as f64);
        let out = self.push(ArrayD::from_elem(IxDyn(&[]), val));
        self.set_backward(out, Box::new(move |g, grad| {
            let gs = *grad.iter().next().unwrap();
            let scale = gs * F::fr(2.0 / n as f64);
            g.accum_grad(pred, diff.mapv(|d| d * scale));
        }));
        Ok(out)
    }

    /// Patient-aware contrastive loss over `p` (N*M rows, patient-major),
    /// as printed: -(1/(M-1)) Σ_i Σ_m Σ_{l≠m} log softmax-style term whose
    /// denominator runs over all views of all patients minus the anchor's
    /// self term.
    pub fn patient_aware_loss(&mut self, p: Var, m: usize, tau: F) -> Result<Var> {
        let pv = self.as2(p)?;
        let rows = pv.nrows();
        if m < 2 {
            return Err(Error::argument("patient-aware loss needs M >= 2"));
        }
        if tau <= F::zero() {
            return Err(Error::argument("tau must be positive"));
        }
        if rows % m != 0 || rows / m < 2 {
            return Err(Error::argument(format!(
                "patient-aware loss: {rows} rows not divisible into >= 2 groups of {m}"
            )));
        }
        let inv_tau = F::one() / tau;
        let sim = {
            let mut sm = parallel_matmul(pv, pv.t());
            sm.mapv_inplace(|v| v * inv_tau);
            sm
        };
        self.note_bytes(sim.len());
        let n_pat = rows / m;

        let mut loss = F::zero();
        // positives: Σ over same-patient ordered pairs of the raw logit
        for i in 0..n_pat {
            for a in 0..m {
                for l in 0..m {
                    if a != l {
                        loss -= sim[(i * m + a, i * m + l)] / F::fr((m - 1) as f64);
                    }
                }
            }
        }
        // denominators: Σ_r log Σ_{r'≠r} exp(s_rr'), max-subtracted over the
        // off-diagonal entries (the self term would dominate at small tau)
        let mut log_denoms = Array1::<F>::zeros(rows);
        for r in 0..rows {
            let row = sim.row(r);
            let c = row
                .iter()
                .enumerate()
                .filter(|&(r2, _)| r2 != r)
                .map(|(_, &v)| v)
                .fold(F::neg_infinity(), F::max);
            let denom: F = row
                .iter()
                .enumerate()
                .filter(|&(r2, _)| r2 != r)
                .map(|(_, &v)| (v - c).exp())
                .sum();
            log_denoms[r] = denom.ln() + c;
            loss += log_denoms[r];
        }
        let out = self.push(ArrayD::from_elem(IxDyn(&[]), loss));
        self.set_backward(out, Box::new(move |g, grad| {
            let gs = *grad.iter().next().unwrap();
            let inv_m1 = F::fr(1.0 / (m - 1) as f64);
            let mut gmat = Array2::<F>::zeros((rows, rows));
            for r in 0..rows {
                let denom_log = log_denoms[r];
                for r2 in 0..rows {
                    let mut v = F::zero();
                    if r2 != r {
                        // softmax over the anchor's denominator
                        v = (sim[(r, r2)] - denom_log).exp();
                        if r / m == r2 / m {
                            v = v - inv_m1;
                        }
                    }
                    gmat[(r, r2)] = v;
                }
            }
            // dP = (G + Gᵀ) P / tau
            let gsym = &gmat + &gmat.t();
            let pvv = g.as2(p).unwrap().to_owned();
            let mut dp = parallel_matmul(gsym.view(), pvv.view());
            dp.mapv_inplace(|v| v * inv_tau * gs);
            g.accum_grad(p, dp.into_dyn());
        }));
        Ok(out)
    }

    /// Structure-aware contrastive loss over `p` (N*2M rows, patient-major;
    /// within a patient: M originals then their M augmented views).
    pub fn structure_aware_loss(&mut self, p: Var, m: usize, tau: F) -> Result<Var> {
        let pv = self.as2(p)?;
        let rows = pv.nrows();
        if m < 1 {
            return Err(Error::argument("structure-aware loss needs M >= 1"));
        }
        if tau <= F::zero() {
            return Err(Error::argument("tau must be positive"));
        }
        let group = 2 * m;
        if rows % group != 0 {
            return Err(Error::argument(format!(
                "structure-aware loss: {rows} rows not divisible into groups of {group}"
            )));
        }
        let n_pat = rows / group;
        let inv_tau = F::one() / tau;

        let mut loss = F::zero();
        // per-patient similarity blocks saved for the backward pass
        let mut blocks: Vec<Array2<F>> = Vec::with_capacity(n_pat);
        for i in 0..n_pat {
            let base = i * group;
            let pi = pv.slice(s![base..base + group, ..]);
            let mut sm = pi.dot(&pi.t());
            sm.mapv_inplace(|v| v * inv_tau);
            for a in 0..group {
                let pair = (a + m) % group;
                let c = (0..group)
                    .filter(|&l| l != a)
                    .map(|l| sm[(a, l)])
                    .fold(F::neg_infinity(), F::max);
                let lse: F = (0..group)
                    .filter(|&l| l != a)
                    .map(|l| (sm[(a, l)] - c).exp())
                    .sum::<F>()
                    .ln()
                    + c;
                loss -= sm[(a, pair)] - lse;
            }
            blocks.push(sm);
        }
        self.note_bytes(n_pat * group * group);
        let out = self.push(ArrayD::from_elem(IxDyn(&[]), loss));
        self.set_backward(out, Box::new(move |g, grad| {
            let gs = *grad.iter().next().unwrap();
            let pvv = g.as2(p).unwrap().to_owned();
            let mut dp = Array2::<F>::zeros(pvv.raw_dim());
            for (i, sm) in blocks.iter().enumerate() {
                let base = i * group;
                let mut gm = Array2::<F>::zeros((group, group));
                for a in 0..group {
                    let pair = (a + m) % group;
                    gm[(a, pair)] -= F::one();
                    let c = (0..group)
                        .filter(|&l| l != a)
                        .map(|l| sm[(a, l)])
                        .fold(F::neg_infinity(), F::max);
                    let total: F =
                        (0..group).filter(|&l| l != a).map(|l| (sm[(a, l)] - c).exp()).sum();
                    for l in 0..group {
                        if l != a {
                            gm[(a, l)] += (sm[(a, l)] - c).exp() / total;
                        }
                    }
                }
                let gsym = &gm + &gm.t();
                let pi = pvv.slice(s![base..base + group, ..]);
                let mut dpi = gsym.dot(&pi);
                dpi.mapv_inplace(|v| v * inv_tau * gs);
                dp.slice_mut(s![base..base + group, ..]).assign(&dpi);
            }
            g.accum_grad(p, dp.into_dyn());
        }));
        Ok(out)
    }

    // ---- helpers ----

    fn same_shape(&self, a: Var, b: Var) -> Result<()> {
        if self.values[a.0].shape() != self.values[b.0].shape() {
            return Err(Error::shape(format!(
                "shape mismatch: {:?} vs {:?}",
                self.values[a.0].shape(),
                self.values[b.0].shape()
            )));
        }
        Ok(())
    }

    fn as2(&self, v: Var) -> Result<ArrayView2<'_, F>> {
        self.values[v.0]
            .view()
            .into_dimensionality::<Ix2>()
            .map_err(|_| Error::shape(format!("expected 2-d array, got {:?}", self.values[v.0].shape())))
    }
}

/// Deterministic parallel matmul: columns of `b` are split into contiguous
/// chunks computed independently and concatenated in fixed order.
pub fn parallel_matmul<F: Scalar>(a: ArrayView2<F>, b: ArrayView2<F>) -> Array2<F> {
    let flops = a.nrows() * a.ncols() * b.ncols();
    let threads = rayon::current_num_threads();
    if flops < (1 << 18) || threads < 2 || b.ncols() < 2 * threads {
        return a.dot(&b);
    }
    let n = b.ncols();
    let chunk = n.div_ceil(threads);
    let starts: Vec<usize> = (0..n).step_by(chunk).collect();
    let pieces: Vec<Array2<F>> = starts
        .into_par_iter()
        .map(|start| {
            let end = (start + chunk).min(n);
            a.dot(&b.slice(s![.., start..end]))
        })
        .collect();
    let views: Vec<ArrayView2<F>> = pieces.iter().map(|p| p.view()).collect();
    ndarray::concatenate(Axis(1), &views).expect("concat matmul pieces")
}

fn im2col<F: Scalar>(
    x: &ndarray::ArrayView4<F>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Array2<F> {
    let (bsz, c, h, w) = x.dim();
    let ckk = c * kh * kw;
    let bcol = bsz * oh * ow;
    let mut cols = Array2::<F>::zeros((ckk, bcol));
    let xs = x.as_slice().expect("standard layout");
    let cs = cols.as_slice_mut().unwrap();
    for ci in 0..c {
        for kr in 0..kh {
            for kc in 0..kw {
                let row = (ci * kh + kr) * kw + kc;
                let row_base = row * bcol;
                for bi in 0..bsz {
                    let x_base = (bi * c + ci) * h * w;
                    for ohi in 0..oh {
                        let ih = (ohi * stride + kr) as isize - pad as isize;
                        let col_base = row_base + (bi * oh + ohi) * ow;
                        if ih < 0 || ih >= h as isize {
                            continue; // zeros already in place
                        }
                        let x_row = x_base + ih as usize * w;
                        for owi in 0..ow {
                            let iw = (owi * stride + kc) as isize - pad as isize;
                            if iw >= 0 && iw < w as isize {
                                cs[col_base + owi] = xs[x_row + iw as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

#[allow(clippy::too_many_arguments)]
fn col2im<F: Scalar>(
    dcols: &Array2<F>,
    bsz: usize,
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> ndarray::Array4<F> {
    let bcol = bsz * oh * ow;
    let mut dx = ndarray::Array4::<F>::zeros((bsz, c, h, w));
    let ds = dcols.as_slice().expect("standard layout");
    let xs = dx.as_slice_mut().unwrap();
    for ci in 0..c {
        for kr in 0..kh {
            for kc in 0..kw {
                let row = (ci * kh + kr) * kw + kc;
                let row_base = row * bcol;
                for bi in 0..bsz {
                    let x_base = (bi * c + ci) * h * w;
                    for ohi in 0..oh {
                        let ih = (ohi * stride + kr) as isize - pad as isize;
                        if ih < 0 || ih >= h as isize {
                            continue;
                        }
                        let col_base = row_base + (bi * oh + ohi) * ow;
                        let x_row = x_base + ih as usize * w;
                        for owi in 0..ow {
                            let iw = (owi * stride + kc) as isize - pad as isize;
                            if iw >= 0 && iw < w as isize {
                                xs[x_row + iw as usize] += ds[col_base + owi];
                            }
                        }
                    }
                }
            }
        }
    }
    dx
}
