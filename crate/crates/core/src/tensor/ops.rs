//! Differentiable operators: forward kernels recorded on the tape and their
//! vector-Jacobian products.

use super::gemm::gemm;
use super::tape::{Tape, Var};
use super::{numel, Real, Tensor};
use crate::error::{Error, Result};

pub(crate) enum Op<R: Real> {
    Leaf,
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Expand { x: Var },
    Scale { x: Var, factor: R },
    Reshape { x: Var },
    Narrow { x: Var, dim: usize, start: usize },
    Sum { x: Var },
    SumDim { x: Var, dim: usize },
    Relu { x: Var },
    Tanh { x: Var },
    Sigmoid { x: Var },
    Softmax { x: Var, dim: usize },
    Linear { x: Var, w: Var, b: Option<Var> },
    Conv2d { x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize },
    BatchNormTrain { x: Var, gamma: Var, beta: Var, xhat: Vec<R>, inv_std: Vec<R> },
    BatchNormEval { x: Var, gamma: Var, beta: Var, mean: Vec<R>, inv_std: Vec<R> },
    AvgPool { x: Var },
    Upsample { x: Var },
    L2Normalize { x: Var, group: usize, norms: Vec<R>, active: Vec<bool> },
    CrossEntropy { logits: Var, targets: Vec<Option<usize>>, probs: Vec<R>, count: usize },
    AssembleBorder { top: Var, bottom: Var, left: Var, right: Var, pad: usize },
}

impl<R: Real> Op<R> {
    pub(crate) fn parents(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf => Vec::new(),
            Add { a, b } | Mul { a, b } => vec![*a, *b],
            Expand { x }
            | Scale { x, .. }
            | Reshape { x }
            | Narrow { x, .. }
            | Sum { x }
            | SumDim { x, .. }
            | Relu { x }
            | Tanh { x }
            | Sigmoid { x }
            | Softmax { x, .. }
            | AvgPool { x }
            | Upsample { x }
            | L2Normalize { x, .. } => vec![*x],
            Linear { x, w, b } | Conv2d { x, w, b, .. } => {
                let mut v = vec![*x, *w];
                v.extend(b);
                v
            }
            BatchNormTrain { x, gamma, beta, .. } | BatchNormEval { x, gamma, beta, .. } => {
                vec![*x, *gamma, *beta]
            }
            CrossEntropy { logits, .. } => vec![*logits],
            AssembleBorder { top, bottom, left, right, .. } => vec![*top, *bottom, *left, *right],
        }
    }
}

/// Per output element, the flat index into a broadcast source.
fn broadcast_map(out: &[usize], src: &[usize]) -> Vec<usize> {
    let rank = out.len();
    let mut strides = vec![0usize; rank];
    let mut acc = 1;
    for d in (0..rank).rev() {
        strides[d] = if src[d] == 1 { 0 } else { acc };
        acc *= src[d];
    }
    let n = numel(out);
    let mut map = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    let mut flat = 0usize;
    for _ in 0..n {
        map.push(flat);
        for d in (0..rank).rev() {
            idx[d] += 1;
            flat += strides[d];
            if idx[d] < out[d] {
                break;
            }
            flat -= strides[d] * idx[d];
            idx[d] = 0;
        }
    }
    map
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    if a.len() != b.len() {
        return Err(Error::shape(format!("broadcast needs equal ranks: {a:?} vs {b:?}")));
    }
    a.iter()
        .zip(b)
        .map(|(&x, &y)| match (x, y) {
            _ if x == y => Ok(x),
            (1, _) => Ok(y),
            (_, 1) => Ok(x),
            _ => Err(Error::shape(format!("cannot broadcast {a:?} with {b:?}"))),
        })
        .collect()
}

fn reduce_to<R: Real>(src_len: usize, map: &[usize], g: &[R]) -> Vec<R> {
    let mut out = vec![R::zero(); src_len];
    for (&i, &v) in map.iter().zip(g) {
        out[i] = out[i] + v;
    }
    out
}

fn check_rank<R: Real>(t: &Tensor<R>, rank: usize, what: &str) -> Result<()> {
    if t.rank() != rank {
        return Err(Error::shape(format!("{what} expects rank {rank}, got {:?}", t.shape())));
    }
    Ok(())
}

/// Outer/axis/inner sizes for reducing over `dim`.
fn split_dim(shape: &[usize], dim: usize) -> (usize, usize, usize) {
    (numel(&shape[..dim]), shape[dim], numel(&shape[dim + 1..]))
}

/// Source taps for bilinear resampling with half-pixel centers.
fn bilinear_taps(input: usize, output: usize) -> Vec<(usize, usize, f64, f64)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            let l1 = src - i0 as f64;
            (i0, i1, 1.0 - l1, l1)
        })
        .collect()
}

#[allow(clippy::too_many_arguments)]
fn im2col<R: Real>(
    x: &[R],
    cin: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    cols: &mut [R],
) {
    let hw = ho * wo;
    for c in 0..cin {
        let plane = &x[c * h * w..(c + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut cols[((c * k + ky) * k + kx) * hw..][..hw];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    let dst = &mut row[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        dst.iter_mut().for_each(|v| *v = R::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        *d = if ix < 0 || ix >= w as isize { R::zero() } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im<R: Real>(
    cols: &[R],
    cin: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    x: &mut [R],
) {
    let hw = ho * wo;
    for c in 0..cin {
        let plane = &mut x[c * h * w..(c + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = &cols[((c * k + ky) * k + kx) * hw..][..hw];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] = dst[ix as usize] + row[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

struct ConvGeom {
    batch: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    k: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn new(x: &[usize], wt: &[usize], stride: usize, pad: usize) -> Result<Self> {
        if x.len() != 4 || wt.len() != 4 {
            return Err(Error::shape(format!("conv2d expects rank-4 input and weight, got {x:?}, {wt:?}")));
        }
        let (batch, cin, h, w) = (x[0], x[1], x[2], x[3]);
        let (cout, wcin, k, k2) = (wt[0], wt[1], wt[2], wt[3]);
        if wcin != cin || k != k2 || k == 0 {
            return Err(Error::shape(format!("conv2d weight {wt:?} incompatible with input {x:?}")));
        }
        if stride == 0 {
            return Err(Error::shape("conv2d stride must be at least 1"));
        }
        if h + 2 * pad < k || w + 2 * pad < k {
            return Err(Error::shape(format!("conv2d kernel {k} larger than padded input {x:?}")));
        }
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (w + 2 * pad - k) / stride + 1;
        Ok(ConvGeom { batch, cin, h, w, cout, k, ho, wo })
    }

    fn is_pointwise(&self, stride: usize, pad: usize) -> bool {
        self.k == 1 && stride == 1 && pad == 0
    }
}

impl<R: Real> Tape<R> {
    /// Element-wise sum with same-rank broadcasting.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let shape = broadcast_shape(&sa, &sb)?;
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let data = if sa == sb {
            va.iter().zip(vb).map(|(x, y)| *x + *y).collect()
        } else {
            let (ma, mb) = (broadcast_map(&shape, &sa), broadcast_map(&shape, &sb));
            ma.iter().zip(&mb).map(|(&i, &j)| va[i] + vb[j]).collect()
        };
        self.push(Tensor::new(shape, data)?, Op::Add { a, b }, "add")
    }

    /// Element-wise product with same-rank broadcasting.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let shape = broadcast_shape(&sa, &sb)?;
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let data = if sa == sb {
            va.iter().zip(vb).map(|(x, y)| *x * *y).collect()
        } else {
            let (ma, mb) = (broadcast_map(&shape, &sa), broadcast_map(&shape, &sb));
            ma.iter().zip(&mb).map(|(&i, &j)| va[i] * vb[j]).collect()
        };
        self.push(Tensor::new(shape, data)?, Op::Mul { a, b }, "mul")
    }

    /// Broadcasts `x` to `shape` (same rank, size-1 axes repeat).
    pub fn expand(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let src = self.shape(x).to_vec();
        if broadcast_shape(&src, shape)? != shape {
            return Err(Error::shape(format!("cannot expand {src:?} to {shape:?}")));
        }
        let v = self.value(x).data();
        let data = broadcast_map(shape, &src).into_iter().map(|i| v[i]).collect();
        self.push(Tensor::new(shape.to_vec(), data)?, Op::Expand { x }, "expand")
    }

    pub fn scale(&mut self, x: Var, factor: R) -> Result<Var> {
        let v = self.value(x);
        let out = Tensor::new(v.shape().to_vec(), v.data().iter().map(|&a| a * factor).collect())?;
        self.push(out, Op::Scale { x, factor }, "scale")
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshape(shape.to_vec())?;
        self.push(out, Op::Reshape { x }, "reshape")
    }

    /// Slice `[start, start+len)` along `dim`.
    pub fn narrow(&mut self, x: Var, dim: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if dim >= shape.len() || start + len > shape[dim] {
            return Err(Error::shape(format!("narrow({dim}, {start}, {len}) out of range for {shape:?}")));
        }
        let (outer, axis, inner) = split_dim(&shape, dim);
        let v = self.value(x).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            data.extend_from_slice(&v[(o * axis + start) * inner..(o * axis + start + len) * inner]);
        }
        let mut out_shape = shape;
        out_shape[dim] = len;
        self.push(Tensor::new(out_shape, data)?, Op::Narrow { x, dim, start }, "narrow")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::Sum { x }, "sum")
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = R::from_usize(self.value(x).numel().max(1)).unwrap();
        let s = self.sum(x)?;
        self.scale(s, R::one() / n)
    }

    /// Sums over `dim`, removing it.
    pub fn sum_dim(&mut self, x: Var, dim: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if dim >= shape.len() {
            return Err(Error::shape(format!("sum_dim({dim}) on {shape:?}")));
        }
        let (outer, axis, inner) = split_dim(&shape, dim);
        let v = self.value(x).data();
        let mut data = vec![R::zero(); outer * inner];
        for o in 0..outer {
            for a in 0..axis {
                let src = &v[(o * axis + a) * inner..][..inner];
                let dst = &mut data[o * inner..][..inner];
                dst.iter_mut().zip(src).for_each(|(d, s)| *d = *d + *s);
            }
        }
        let mut out_shape = shape;
        out_shape.remove(dim);
        self.push(Tensor::new(out_shape, data)?, Op::SumDim { x, dim }, "sum_dim")
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let out = Tensor::new(v.shape().to_vec(), v.data().iter().map(|&a| a.max(R::zero())).collect())?;
        self.push(out, Op::Relu { x }, "relu")
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let out = Tensor::new(v.shape().to_vec(), v.data().iter().map(|a| a.tanh()).collect())?;
        self.push(out, Op::Tanh { x }, "tanh")
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let out = Tensor::new(
            v.shape().to_vec(),
            v.data().iter().map(|&a| R::one() / (R::one() + (-a).exp())).collect(),
        )?;
        self.push(out, Op::Sigmoid { x }, "sigmoid")
    }

    /// Numerically stable softmax along `dim`.
    pub fn softmax(&mut self, x: Var, dim: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if dim >= shape.len() {
            return Err(Error::shape(format!("softmax dim {dim} invalid for {shape:?}")));
        }
        let (outer, axis, inner) = split_dim(&shape, dim);
        let v = self.value(x).data();
        let mut data = vec![R::zero(); v.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |a: usize| (o * axis + a) * inner + i;
                let max = (0..axis).map(|a| v[at(a)]).fold(R::neg_infinity(), R::max);
                let mut total = R::zero();
                for a in 0..axis {
                    let e = (v[at(a)] - max).exp();
                    data[at(a)] = e;
                    total = total + e;
                }
                for a in 0..axis {
                    data[at(a)] = data[at(a)] / total;
                }
            }
        }
        self.push(Tensor::new(shape, data)?, Op::Softmax { x, dim }, "softmax")
    }

    /// `x(B×Din) · w(Din×Dout) + b(Dout)`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 2 || sw.len() != 2 || sx[1] != sw[0] {
            return Err(Error::shape(format!("linear: input {sx:?} vs weight {sw:?}")));
        }
        let (batch, din, dout) = (sx[0], sx[1], sw[1]);
        let mut data = vec![R::zero(); batch * dout];
        gemm(batch, din, dout, self.value(x).data(), false, self.value(w).data(), false, &mut data, false);
        if let Some(b) = b {
            let bias = self.value(b);
            if bias.shape() != [dout] {
                return Err(Error::shape(format!("linear bias {:?}, expected [{dout}]", bias.shape())));
            }
            for row in data.chunks_mut(dout) {
                row.iter_mut().zip(bias.data()).for_each(|(r, b)| *r = *r + *b);
            }
        }
        self.push(Tensor::new(vec![batch, dout], data)?, Op::Linear { x, w, b }, "linear")
    }

    /// 2-D convolution of `x(B×Cin×H×W)` with square kernels `w(Cout×Cin×k×k)`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let g = ConvGeom::new(self.shape(x), self.shape(w), stride, pad)?;
        let ckk = g.cin * g.k * g.k;
        let (hw_in, hw_out) = (g.h * g.w, g.ho * g.wo);
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let mut out = vec![R::zero(); g.batch * g.cout * hw_out];
        let mut cols = if g.is_pointwise(stride, pad) { Vec::new() } else { vec![R::zero(); ckk * hw_out] };
        for n in 0..g.batch {
            let xs = &xv[n * g.cin * hw_in..(n + 1) * g.cin * hw_in];
            let dst = &mut out[n * g.cout * hw_out..(n + 1) * g.cout * hw_out];
            if g.is_pointwise(stride, pad) {
                gemm(g.cout, ckk, hw_out, wv, false, xs, false, dst, false);
            } else {
                im2col(xs, g.cin, g.h, g.w, g.k, stride, pad, g.ho, g.wo, &mut cols);
                gemm(g.cout, ckk, hw_out, wv, false, &cols, false, dst, false);
            }
        }
        if let Some(b) = b {
            let bias = self.value(b);
            if bias.shape() != [g.cout] {
                return Err(Error::shape(format!("conv2d bias {:?}, expected [{}]", bias.shape(), g.cout)));
            }
            for (i, plane) in out.chunks_mut(hw_out).enumerate() {
                let bv = bias.data()[i % g.cout];
                plane.iter_mut().for_each(|v| *v = *v + bv);
            }
        }
        let t = Tensor::new(vec![g.batch, g.cout, g.ho, g.wo], out)?;
        self.push(t, Op::Conv2d { x, w, b, stride, pad }, "conv2d")
    }

    /// Training-mode batch normalization over (B, H, W) per channel.
    ///
    /// Returns the output plus the batch mean and unbiased variance used to
    /// update running statistics.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: R,
    ) -> Result<(Var, Vec<R>, Vec<R>)> {
        let shape = self.shape(x).to_vec();
        check_rank(self.value(x), 4, "batch_norm2d")?;
        let (b, c, hw) = (shape[0], shape[1], shape[2] * shape[3]);
        self.check_affine(gamma, beta, c)?;
        let m = b * hw;
        if m < 2 {
            return Err(Error::DegenerateBatch(m));
        }
        let mf = R::from_usize(m).unwrap();
        let xv = self.value(x).data();
        let (gv, bv) = (self.value(gamma).data(), self.value(beta).data());
        let mut mean = vec![R::zero(); c];
        let mut var = vec![R::zero(); c];
        for ch in 0..c {
            let mut s = R::zero();
            for n in 0..b {
                s = s + xv[(n * c + ch) * hw..][..hw].iter().copied().sum::<R>();
            }
            let mu = s / mf;
            let mut ss = R::zero();
            for n in 0..b {
                for &v in &xv[(n * c + ch) * hw..][..hw] {
                    ss = ss + (v - mu) * (v - mu);
                }
            }
            mean[ch] = mu;
            var[ch] = ss / mf;
        }
        let inv_std: Vec<R> = var.iter().map(|&v| R::one() / (v + eps).sqrt()).collect();
        let mut xhat = vec![R::zero(); xv.len()];
        let mut out = vec![R::zero(); xv.len()];
        for n in 0..b {
            for ch in 0..c {
                let base = (n * c + ch) * hw;
                for i in base..base + hw {
                    let h = (xv[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = h;
                    out[i] = gv[ch] * h + bv[ch];
                }
            }
        }
        let unbiased = var.iter().map(|&v| v * mf / (mf - R::one())).collect();
        let t = Tensor::new(shape, out)?;
        let var_out = self.push(t, Op::BatchNormTrain { x, gamma, beta, xhat, inv_std }, "batch_norm2d")?;
        Ok((var_out, mean, unbiased))
    }

    /// Inference-mode batch normalization with fixed statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[R],
        running_var: &[R],
        eps: R,
    ) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        check_rank(self.value(x), 4, "batch_norm2d")?;
        let (b, c, hw) = (shape[0], shape[1], shape[2] * shape[3]);
        self.check_affine(gamma, beta, c)?;
        if running_mean.len() != c || running_var.len() != c {
            return Err(Error::shape("batch_norm2d running statistics length"));
        }
        let inv_std: Vec<R> = running_var.iter().map(|&v| R::one() / (v + eps).sqrt()).collect();
        let xv = self.value(x).data();
        let (gv, bv) = (self.value(gamma).data(), self.value(beta).data());
        let mut out = vec![R::zero(); xv.len()];
        for n in 0..b {
            for ch in 0..c {
                let base = (n * c + ch) * hw;
                let (mu, is, g, be) = (running_mean[ch], inv_std[ch], gv[ch], bv[ch]);
                for i in base..base + hw {
                    out[i] = g * (xv[i] - mu) * is + be;
                }
            }
        }
        let op = Op::BatchNormEval { x, gamma, beta, mean: running_mean.to_vec(), inv_std };
        self.push(Tensor::new(shape, out)?, op, "batch_norm2d")
    }

    fn check_affine(&self, gamma: Var, beta: Var, c: usize) -> Result<()> {
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::shape(format!(
                "batch_norm2d affine params {:?}/{:?} for {c} channels",
                self.shape(gamma),
                self.shape(beta)
            )));
        }
        Ok(())
    }

    /// Mean over each H×W plane, producing `B×C×1×1`.
    pub fn adaptive_avg_pool_to_1(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        check_rank(self.value(x), 4, "adaptive_avg_pool")?;
        let hw = shape[2] * shape[3];
        if hw == 0 {
            return Err(Error::shape("adaptive_avg_pool over an empty plane"));
        }
        let inv = R::one() / R::from_usize(hw).unwrap();
        let data = self.value(x).data().chunks(hw).map(|p| p.iter().copied().sum::<R>() * inv).collect();
        let t = Tensor::new(vec![shape[0], shape[1], 1, 1], data)?;
        self.push(t, Op::AvgPool { x }, "adaptive_avg_pool")
    }

    /// Bilinear resize (half-pixel centers, no corner alignment).
    pub fn bilinear_upsample(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        check_rank(self.value(x), 4, "bilinear_upsample")?;
        let (h, w) = (shape[2], shape[3]);
        if h == 0 || w == 0 || out_h < h || out_w < w {
            return Err(Error::shape(format!("bilinear_upsample {shape:?} to {out_h}×{out_w}")));
        }
        let (ty, tx) = (bilinear_taps(h, out_h), bilinear_taps(w, out_w));
        let planes = shape[0] * shape[1];
        let v = self.value(x).data();
        let mut data = vec![R::zero(); planes * out_h * out_w];
        for p in 0..planes {
            let src = &v[p * h * w..(p + 1) * h * w];
            let dst = &mut data[p * out_h * out_w..(p + 1) * out_h * out_w];
            for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
                for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                    let val = wy0 * (wx0 * src[y0 * w + x0].to_f64_lossy() + wx1 * src[y0 * w + x1].to_f64_lossy())
                        + wy1 * (wx0 * src[y1 * w + x0].to_f64_lossy() + wx1 * src[y1 * w + x1].to_f64_lossy());
                    dst[oy * out_w + ox] = R::from_f64_lossy(val);
                }
            }
        }
        let t = Tensor::new(vec![shape[0], shape[1], out_h, out_w], data)?;
        self.push(t, Op::Upsample { x }, "bilinear_upsample")
    }

    /// Divides each contiguous group of `group` elements by its L2 norm,
    /// clamped below by `eps`.
    pub fn l2_normalize_groups(&mut self, x: Var, group: usize, eps: R) -> Result<Var> {
        let v = self.value(x);
        if group == 0 || v.numel() % group != 0 {
            return Err(Error::shape(format!("cannot split {:?} into groups of {group}", v.shape())));
        }
        let mut data = Vec::with_capacity(v.numel());
        let mut norms = Vec::new();
        let mut active = Vec::new();
        for chunk in v.data().chunks(group) {
            let raw = chunk.iter().map(|&a| a * a).sum::<R>().sqrt();
            let norm = raw.max(eps);
            data.extend(chunk.iter().map(|&a| a / norm));
            norms.push(norm);
            active.push(raw > eps);
        }
        let t = Tensor::new(v.shape().to_vec(), data)?;
        self.push(t, Op::L2Normalize { x, group, norms, active }, "l2_normalize")
    }

    /// Per-(sample, channel) spatial L2 normalization of a `B×C×H×W` tensor.
    pub fn l2_normalize_channels(&mut self, x: Var, eps: R) -> Result<Var> {
        check_rank(self.value(x), 4, "l2_normalize_channels")?;
        let s = self.shape(x);
        let group = s[2] * s[3];
        self.l2_normalize_groups(x, group, eps)
    }

    /// Mean pixel cross-entropy of `logits(B×K×H×W)` against class indices.
    pub fn cross_entropy(&mut self, logits: Var, target: &[usize], ignore_index: Option<usize>) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        check_rank(self.value(logits), 4, "cross_entropy")?;
        let (b, k, hw) = (shape[0], shape[1], shape[2] * shape[3]);
        if target.len() != b * hw {
            return Err(Error::shape(format!("cross_entropy target length {} for logits {shape:?}", target.len())));
        }
        let targets: Vec<Option<usize>> = target
            .iter()
            .map(|&t| match t {
                _ if Some(t) == ignore_index => Ok(None),
                _ if t < k => Ok(Some(t)),
                _ => Err(Error::Target(format!("class {t} outside [0, {k})"))),
            })
            .collect::<Result<_>>()?;
        let count = targets.iter().flatten().count();
        if count == 0 {
            return Err(Error::Target("every pixel is ignored".into()));
        }
        let v = self.value(logits).data();
        let mut probs = vec![R::zero(); v.len()];
        let mut total = 0.0f64;
        for n in 0..b {
            for p in 0..hw {
                let at = |c: usize| (n * k + c) * hw + p;
                let max = (0..k).map(|c| v[at(c)]).fold(R::neg_infinity(), R::max);
                let mut z = R::zero();
                for c in 0..k {
                    let e = (v[at(c)] - max).exp();
                    probs[at(c)] = e;
                    z = z + e;
                }
                for c in 0..k {
                    probs[at(c)] = probs[at(c)] / z;
                }
                if let Some(t) = targets[n * hw + p] {
                    total += (max + z.ln() - v[at(t)]).to_f64_lossy();
                }
            }
        }
        let loss = R::from_f64_lossy(total / count as f64);
        let op = Op::CrossEntropy { logits, targets, probs, count };
        self.push(Tensor::scalar(loss), op, "cross_entropy")
    }

    /// Places four border strips around a zero center.
    ///
    /// `top`/`bottom` are `B×C×p×W` and own the corners; `left`/`right` are
    /// `B×C×(H−2p)×p`.
    pub fn assemble_border(&mut self, top: Var, bottom: Var, left: Var, right: Var) -> Result<Var> {
        let (st, sb, sl, sr) = (
            self.shape(top).to_vec(),
            self.shape(bottom).to_vec(),
            self.shape(left).to_vec(),
            self.shape(right).to_vec(),
        );
        if [&st, &sb, &sl, &sr].iter().any(|s| s.len() != 4) || st != sb || sl != sr {
            return Err(Error::shape(format!("assemble_border sides {st:?} {sb:?} {sl:?} {sr:?}")));
        }
        let (b, c, pad, w) = (st[0], st[1], st[2], st[3]);
        let mid = sl[2];
        if sl[0] != b || sl[1] != c || sl[3] != pad || w < 2 * pad {
            return Err(Error::shape(format!("assemble_border sides {st:?} and {sl:?} disagree")));
        }
        let h = mid + 2 * pad;
        let mut data = vec![R::zero(); b * c * h * w];
        let (vt, vb, vl, vr) = (
            self.value(top).data(),
            self.value(bottom).data(),
            self.value(left).data(),
            self.value(right).data(),
        );
        for plane in 0..b * c {
            let dst = &mut data[plane * h * w..(plane + 1) * h * w];
            dst[..pad * w].copy_from_slice(&vt[plane * pad * w..(plane + 1) * pad * w]);
            dst[(h - pad) * w..].copy_from_slice(&vb[plane * pad * w..(plane + 1) * pad * w]);
            for y in 0..mid {
                let row = &mut dst[(pad + y) * w..(pad + y + 1) * w];
                let src = plane * mid * pad + y * pad;
                row[..pad].copy_from_slice(&vl[src..src + pad]);
                row[w - pad..].copy_from_slice(&vr[src..src + pad]);
            }
        }
        let t = Tensor::new(vec![b, c, h, w], data)?;
        self.push(t, Op::AssembleBorder { top, bottom, left, right, pad }, "assemble_border")
    }
}

impl<R: Real> Op<R> {
    /// Gradients for each tracked parent given `g`, the gradient of the output.
    pub(crate) fn backward(
        &self,
        tape: &Tape<R>,
        out: &Tensor<R>,
        g: &[R],
        tracked: &dyn Fn(Var) -> bool,
    ) -> Result<Vec<(Var, Vec<R>)>> {
        let val = |v: Var| tape.value(v);
        let mut res = Vec::new();
        match self {
            Op::Leaf => {}
            Op::Add { a, b } => {
                for &p in [a, b] {
                    if tracked(p) {
                        let s = val(p).shape();
                        let gp = if s == out.shape() {
                            g.to_vec()
                        } else {
                            reduce_to(numel(s), &broadcast_map(out.shape(), s), g)
                        };
                        res.push((p, gp));
                    }
                }
            }
            Op::Mul { a, b } => {
                let (sa, sb) = (val(*a).shape(), val(*b).shape());
                let (ma, mb) = (broadcast_map(out.shape(), sa), broadcast_map(out.shape(), sb));
                let (va, vb) = (val(*a).data(), val(*b).data());
                if tracked(*a) {
                    let mut ga = vec![R::zero(); va.len()];
                    for ((&i, &j), &gi) in ma.iter().zip(&mb).zip(g) {
                        ga[i] = ga[i] + gi * vb[j];
                    }
                    res.push((*a, ga));
                }
                if tracked(*b) {
                    let mut gb = vec![R::zero(); vb.len()];
                    for ((&i, &j), &gi) in ma.iter().zip(&mb).zip(g) {
                        gb[j] = gb[j] + gi * va[i];
                    }
                    res.push((*b, gb));
                }
            }
            Op::Expand { x } => {
                let s = val(*x).shape();
                res.push((*x, reduce_to(numel(s), &broadcast_map(out.shape(), s), g)));
            }
            Op::Scale { x, factor } => res.push((*x, g.iter().map(|&v| v * *factor).collect())),
            Op::Reshape { x } => res.push((*x, g.to_vec())),
            Op::Narrow { x, dim, start } => {
                let s = val(*x).shape();
                let (outer, axis, inner) = split_dim(s, *dim);
                let len = out.shape()[*dim];
                let mut gx = vec![R::zero(); numel(s)];
                for o in 0..outer {
                    gx[(o * axis + start) * inner..(o * axis + start + len) * inner]
                        .copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                res.push((*x, gx));
            }
            Op::Sum { x } => res.push((*x, vec![g[0]; val(*x).numel()])),
            Op::SumDim { x, dim } => {
                let (outer, axis, inner) = split_dim(val(*x).shape(), *dim);
                let mut gx = Vec::with_capacity(outer * axis * inner);
                for o in 0..outer {
                    for _ in 0..axis {
                        gx.extend_from_slice(&g[o * inner..(o + 1) * inner]);
                    }
                }
                res.push((*x, gx));
            }
            Op::Relu { x } => {
                let gx = val(*x).data().iter().zip(g).map(|(&v, &gi)| if v > R::zero() { gi } else { R::zero() });
                res.push((*x, gx.collect()));
            }
            Op::Tanh { x } => {
                res.push((*x, out.data().iter().zip(g).map(|(&y, &gi)| gi * (R::one() - y * y)).collect()));
            }
            Op::Sigmoid { x } => {
                res.push((*x, out.data().iter().zip(g).map(|(&y, &gi)| gi * y * (R::one() - y)).collect()));
            }
            Op::Softmax { x, dim } => {
                let (outer, axis, inner) = split_dim(out.shape(), *dim);
                let y = out.data();
                let mut gx = vec![R::zero(); y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |a: usize| (o * axis + a) * inner + i;
                        let dot: R = (0..axis).map(|a| g[at(a)] * y[at(a)]).sum();
                        for a in 0..axis {
                            gx[at(a)] = y[at(a)] * (g[at(a)] - dot);
                        }
                    }
                }
                res.push((*x, gx));
            }
            Op::Linear { x, w, b } => {
                let (batch, din) = (val(*x).shape()[0], val(*x).shape()[1]);
                let dout = val(*w).shape()[1];
                if tracked(*x) {
                    let mut gx = vec![R::zero(); batch * din];
                    gemm(batch, dout, din, g, false, val(*w).data(), true, &mut gx, false);
                    res.push((*x, gx));
                }
                if tracked(*w) {
                    let mut gw = vec![R::zero(); din * dout];
                    gemm(din, batch, dout, val(*x).data(), true, g, false, &mut gw, false);
                    res.push((*w, gw));
                }
                if let Some(b) = b.filter(|b| tracked(*b)) {
                    let mut gb = vec![R::zero(); dout];
                    for row in g.chunks(dout) {
                        gb.iter_mut().zip(row).for_each(|(a, r)| *a = *a + *r);
                    }
                    res.push((b, gb));
                }
            }
            Op::Conv2d { x, w, b, stride, pad } => {
                let (stride, pad) = (*stride, *pad);
                let geo = ConvGeom::new(val(*x).shape(), val(*w).shape(), stride, pad)?;
                let ckk = geo.cin * geo.k * geo.k;
                let (hw_in, hw_out) = (geo.h * geo.w, geo.ho * geo.wo);
                let pointwise = geo.is_pointwise(stride, pad);
                let (xv, wv) = (val(*x).data(), val(*w).data());
                let (want_x, want_w) = (tracked(*x), tracked(*w));
                let mut gx = if want_x { vec![R::zero(); xv.len()] } else { Vec::new() };
                let mut gw = if want_w { vec![R::zero(); wv.len()] } else { Vec::new() };
                let mut cols = vec![R::zero(); ckk * hw_out];
                for n in 0..geo.batch {
                    let gn = &g[n * geo.cout * hw_out..(n + 1) * geo.cout * hw_out];
                    let xs = &xv[n * geo.cin * hw_in..(n + 1) * geo.cin * hw_in];
                    if want_w {
                        if pointwise {
                            gemm(geo.cout, hw_out, ckk, gn, false, xs, true, &mut gw, true);
                        } else {
                            im2col(xs, geo.cin, geo.h, geo.w, geo.k, stride, pad, geo.ho, geo.wo, &mut cols);
                            gemm(geo.cout, hw_out, ckk, gn, false, &cols, true, &mut gw, true);
                        }
                    }
                    if want_x {
                        let gxs = &mut gx[n * geo.cin * hw_in..(n + 1) * geo.cin * hw_in];
                        if pointwise {
                            gemm(ckk, geo.cout, hw_out, wv, true, gn, false, gxs, false);
                        } else {
                            gemm(ckk, geo.cout, hw_out, wv, true, gn, false, &mut cols, false);
                            col2im(&cols, geo.cin, geo.h, geo.w, geo.k, stride, pad, geo.ho, geo.wo, gxs);
                        }
                    }
                }
                if want_x {
                    res.push((*x, gx));
                }
                if want_w {
                    res.push((*w, gw));
                }
                if let Some(b) = b.filter(|b| tracked(*b)) {
                    let mut gb = vec![R::zero(); geo.cout];
                    for (i, plane) in g.chunks(hw_out).enumerate() {
                        gb[i % geo.cout] = gb[i % geo.cout] + plane.iter().copied().sum::<R>();
                    }
                    res.push((b, gb));
                }
            }
            Op::BatchNormTrain { x, gamma, beta, xhat, inv_std } => {
                let s = val(*x).shape();
                let (b, c, hw) = (s[0], s[1], s[2] * s[3]);
                let (sum_g, sum_gx) = channel_sums(g, xhat, b, c, hw);
                if tracked(*x) {
                    let m = R::from_usize(b * hw).unwrap();
                    let gam = val(*gamma).data();
                    let mut gx = vec![R::zero(); g.len()];
                    for n in 0..b {
                        for ch in 0..c {
                            let k = gam[ch] * inv_std[ch] / m;
                            let base = (n * c + ch) * hw;
                            for i in base..base + hw {
                                gx[i] = k * (m * g[i] - sum_g[ch] - xhat[i] * sum_gx[ch]);
                            }
                        }
                    }
                    res.push((*x, gx));
                }
                if tracked(*gamma) {
                    res.push((*gamma, sum_gx));
                }
                if tracked(*beta) {
                    res.push((*beta, sum_g));
                }
            }
            Op::BatchNormEval { x, gamma, beta, mean, inv_std } => {
                let s = val(*x).shape();
                let (b, c, hw) = (s[0], s[1], s[2] * s[3]);
                let xv = val(*x).data();
                let xhat: Vec<R> = xv
                    .iter()
                    .enumerate()
                    .map(|(i, &v)| {
                        let ch = (i / hw) % c;
                        (v - mean[ch]) * inv_std[ch]
                    })
                    .collect();
                let (sum_g, sum_gx) = channel_sums(g, &xhat, b, c, hw);
                if tracked(*x) {
                    let gam = val(*gamma).data();
                    let gx = g.iter().enumerate().map(|(i, &gi)| {
                        let ch = (i / hw) % c;
                        gi * gam[ch] * inv_std[ch]
                    });
                    res.push((*x, gx.collect()));
                }
                if tracked(*gamma) {
                    res.push((*gamma, sum_gx));
                }
                if tracked(*beta) {
                    res.push((*beta, sum_g));
                }
            }
            Op::AvgPool { x } => {
                let s = val(*x).shape();
                let hw = s[2] * s[3];
                let inv = R::one() / R::from_usize(hw).unwrap();
                let gx = g.iter().flat_map(|&v| std::iter::repeat_n(v * inv, hw)).collect();
                res.push((*x, gx));
            }
            Op::Upsample { x } => {
                let s = val(*x).shape();
                let (h, w) = (s[2], s[3]);
                let (out_h, out_w) = (out.shape()[2], out.shape()[3]);
                let (ty, tx) = (bilinear_taps(h, out_h), bilinear_taps(w, out_w));
                let mut gx = vec![0.0f64; numel(s)];
                for p in 0..s[0] * s[1] {
                    let dst = &mut gx[p * h * w..(p + 1) * h * w];
                    let src = &g[p * out_h * out_w..(p + 1) * out_h * out_w];
                    for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
                        for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                            let gv = src[oy * out_w + ox].to_f64_lossy();
                            dst[y0 * w + x0] += gv * wy0 * wx0;
                            dst[y0 * w + x1] += gv * wy0 * wx1;
                            dst[y1 * w + x0] += gv * wy1 * wx0;
                            dst[y1 * w + x1] += gv * wy1 * wx1;
                        }
                    }
                }
                res.push((*x, gx.into_iter().map(R::from_f64_lossy).collect()));
            }
            Op::L2Normalize { x, group, norms, active } => {
                let y = out.data();
                let mut gx = Vec::with_capacity(y.len());
                for ((yc, gc), (&n, &on)) in y.chunks(*group).zip(g.chunks(*group)).zip(norms.iter().zip(active)) {
                    if on {
                        let dot: R = yc.iter().zip(gc).map(|(a, b)| *a * *b).sum();
                        gx.extend(yc.iter().zip(gc).map(|(&yv, &gv)| (gv - yv * dot) / n));
                    } else {
                        gx.extend(gc.iter().map(|&gv| gv / n));
                    }
                }
                res.push((*x, gx));
            }
            Op::CrossEntropy { logits, targets, probs, count } => {
                let s = val(*logits).shape();
                let (b, k, hw) = (s[0], s[1], s[2] * s[3]);
                let scale = g[0] / R::from_usize(*count).unwrap();
                let mut gl = vec![R::zero(); probs.len()];
                for n in 0..b {
                    for p in 0..hw {
                        let Some(t) = targets[n * hw + p] else { continue };
                        for c in 0..k {
                            let i = (n * k + c) * hw + p;
                            let onehot = if c == t { R::one() } else { R::zero() };
                            gl[i] = (probs[i] - onehot) * scale;
                        }
                    }
                }
                res.push((*logits, gl));
            }
            Op::AssembleBorder { top, bottom, left, right, pad } => {
                let s = out.shape();
                let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
                let pad = *pad;
                let mid = h - 2 * pad;
                let (mut gt, mut gb) = (Vec::new(), Vec::new());
                let (mut gl, mut gr) = (Vec::new(), Vec::new());
                for plane in 0..b * c {
                    let src = &g[plane * h * w..(plane + 1) * h * w];
                    gt.extend_from_slice(&src[..pad * w]);
                    gb.extend_from_slice(&src[(h - pad) * w..]);
                    for y in 0..mid {
                        let row = &src[(pad + y) * w..(pad + y + 1) * w];
                        gl.extend_from_slice(&row[..pad]);
                        gr.extend_from_slice(&row[w - pad..]);
                    }
                }
                for (v, gv) in [(*top, gt), (*bottom, gb), (*left, gl), (*right, gr)] {
                    if tracked(v) {
                        res.push((v, gv));
                    }
                }
            }
        }
        Ok(res)
    }
}

fn channel_sums<R: Real>(g: &[R], xhat: &[R], b: usize, c: usize, hw: usize) -> (Vec<R>, Vec<R>) {
    let mut sum_g = vec![R::zero(); c];
    let mut sum_gx = vec![R::zero(); c];
    for n in 0..b {
        for ch in 0..c {
            let base = (n * c + ch) * hw;
            for i in base..base + hw {
                sum_g[ch] = sum_g[ch] + g[i];
                sum_gx[ch] = sum_gx[ch] + g[i] * xhat[i];
            }
        }
    }
    (sum_g, sum_gx)
}
