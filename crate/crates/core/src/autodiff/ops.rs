//! Differentiable operators recorded on the tape.

use std::sync::Arc;

use super::{BackwardArgs, OpKind, Var};
use crate::error::{Error, Result};
use crate::params::ParamId;
use crate::tensor::{gemm, spatial_dims, spatial_shape, MatRef, Scalar, Tensor};
use crate::window::{ShiftMask, NO_SOURCE};

/// Label value excluded from losses and metrics.
pub const IGNORE_LABEL: u8 = 255;

fn same_graph<T: Scalar>(a: &Var<'_, T>, b: &Var<'_, T>) {
    assert!(std::ptr::eq(a.g, b.g), "vars belong to different graphs");
}

fn dim_err(msg: String) -> Error {
    Error::Dimension(msg)
}

/// One-dimensional bilinear taps with half-pixel centers.
pub(crate) fn resize_taps<T: Scalar>(input: usize, output: usize) -> Vec<(usize, usize, T, T)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|i| {
            let src = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (input - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(input - 1);
            let frac = src - i0 as f64;
            (i0, i1, T::lit(1.0 - frac), T::lit(frac))
        })
        .collect()
}

impl<'g, T: Scalar> Var<'g, T> {
    /// `y[..., j] = sum_i x[..., i] * w[i, j] + b[j]`.
    pub fn linear(self, weight: Var<'g, T>, bias: Option<Var<'g, T>>) -> Result<Var<'g, T>> {
        same_graph(&self, &weight);
        let x = self.value();
        let w = weight.value();
        let (din, dout) = match w.shape() {
            [i, o] => (*i, *o),
            s => return Err(dim_err(format!("linear weight must be 2-d, got {s:?}"))),
        };
        if x.last_dim() != din || x.rank() == 0 {
            return Err(dim_err(format!("linear input {:?} does not end in {din}", x.shape())));
        }
        let b = match bias {
            Some(b) => {
                same_graph(&self, &b);
                let bv = b.value();
                if bv.shape() != [dout] {
                    return Err(dim_err(format!("linear bias {:?} != [{dout}]", bv.shape())));
                }
                Some((b, bv))
            }
            None => None,
        };
        let rows = x.numel() / din;
        let mut out = vec![T::zero(); rows * dout];
        gemm(MatRef::new(x.data(), rows, din, din), MatRef::new(w.data(), din, dout, dout), &mut out, dout, T::one(), false);
        if let Some((_, bv)) = &b {
            for row in out.chunks_exact_mut(dout) {
                for (o, &bb) in row.iter_mut().zip(bv.data()) {
                    *o += bb;
                }
            }
        }
        let mut shape = x.shape().to_vec();
        *shape.last_mut().unwrap() = dout;
        let mut parents = vec![self.id, weight.id];
        if let Some((bvar, _)) = &b {
            parents.push(bvar.id);
        }
        let flops = 2 * (rows * din * dout) as u64;
        let has_bias = b.is_some();
        Ok(self.g.push(
            "linear",
            OpKind::Linear,
            Tensor::new(shape, out)?,
            &parents,
            flops,
            Box::new(move |a: &BackwardArgs<'_, T>| {
                let dy = a.grad.data();
                let (x, w) = (a.inputs[0], a.inputs[1]);
                let dx = a.needs[0].then(|| {
                    let mut dx = vec![T::zero(); rows * din];
                    gemm(MatRef::new(dy, rows, dout, dout), MatRef::new(w.data(), din, dout, dout).t(), &mut dx, din, T::one(), false);
                    Tensor::new(x.shape().to_vec(), dx).unwrap()
                });
                let dw = a.needs[1].then(|| {
                    let mut dw = vec![T::zero(); din * dout];
                    gemm(MatRef::new(x.data(), rows, din, din).t(), MatRef::new(dy, rows, dout, dout), &mut dw, dout, T::one(), false);
                    Tensor::new(vec![din, dout], dw).unwrap()
                });
                let mut grads = vec![dx, dw];
                if has_bias {
                    grads.push(a.needs[2].then(|| {
                        let mut db = vec![T::zero(); dout];
                        for row in dy.chunks_exact(dout) {
                            for (d, &g) in db.iter_mut().zip(row) {
                                *d += g;
                            }
                        }
                        Tensor::new(vec![dout], db).unwrap()
                    }));
                }
                grads
            }),
        ))
    }

    /// Elementwise sum of two same-shape tensors.
    pub fn add(self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        Var::sum_of(&[self, other])
    }

    /// Elementwise sum of same-shape tensors, accumulated in slice order.
    pub fn sum_of(vars: &[Var<'g, T>]) -> Result<Var<'g, T>> {
        let first = vars.first().ok_or_else(|| dim_err("sum of no tensors".into()))?;
        let mut acc = first.value().as_ref().clone();
        for v in &vars[1..] {
            same_graph(first, v);
            let val = v.value();
            if val.shape() != acc.shape() {
                return Err(dim_err(format!("add shape mismatch {:?} vs {:?}", acc.shape(), val.shape())));
            }
            acc.add_assign(&val);
        }
        let parents: Vec<usize> = vars.iter().map(|v| v.id).collect();
        let n = parents.len();
        Ok(first.g.push(
            "add",
            OpKind::Add,
            acc,
            &parents,
            0,
            Box::new(move |a: &BackwardArgs<'_, T>| (0..n).map(|i| a.needs[i].then(|| a.grad.clone())).collect()),
        ))
    }

    /// Elementwise product of two same-shape tensors.
    pub fn mul(self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        same_graph(&self, &other);
        let (x, y) = (self.value(), other.value());
        if x.shape() != y.shape() {
            return Err(dim_err(format!("mul shape mismatch {:?} vs {:?}", x.shape(), y.shape())));
        }
        let out: Vec<T> = x.data().iter().zip(y.data()).map(|(&a, &b)| a * b).collect();
        Ok(self.g.push(
            "mul",
            OpKind::Add,
            Tensor::new(x.shape().to_vec(), out)?,
            &[self.id, other.id],
            x.numel() as u64,
            Box::new(|a: &BackwardArgs<'_, T>| {
                let (x, y) = (a.inputs[0], a.inputs[1]);
                let prod = |u: &Tensor<T>| {
                    let d = a.grad.data().iter().zip(u.data()).map(|(&g, &v)| g * v).collect();
                    Tensor::new(u.shape().to_vec(), d).unwrap()
                };
                vec![a.needs[0].then(|| prod(y)), a.needs[1].then(|| prod(x))]
            }),
        ))
    }

    /// Multiplication by a constant.
    pub fn scale(self, c: f64) -> Result<Var<'g, T>> {
        let k = T::lit(c);
        let x = self.value();
        Ok(self.g.push(
            "scale",
            OpKind::Add,
            x.map(|v| v * k),
            &[self.id],
            x.numel() as u64,
            Box::new(move |a: &BackwardArgs<'_, T>| vec![a.needs[0].then(|| a.grad.map(|g| g * k))]),
        ))
    }

    /// Sum of all elements as a scalar.
    pub fn sum(self) -> Result<Var<'g, T>> {
        let x = self.value();
        Ok(self.g.push(
            "sum",
            OpKind::Reduce,
            Tensor::scalar(x.sum()),
            &[self.id],
            0,
            Box::new(|a: &BackwardArgs<'_, T>| {
                let g = a.grad.data()[0];
                vec![a.needs[0].then(|| Tensor::full(a.inputs[0].shape().to_vec(), g))]
            }),
        ))
    }

    /// Same data, new shape.
    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Result<Var<'g, T>> {
        let x = self.value();
        let out = x.as_ref().clone().reshape(shape)?;
        Ok(self.g.push(
            "reshape",
            OpKind::Reshape,
            out,
            &[self.id],
            0,
            Box::new(|a: &BackwardArgs<'_, T>| {
                vec![a.needs[0].then(|| a.grad.clone().reshape(a.inputs[0].shape().to_vec()).unwrap())]
            }),
        ))
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(self, axis: usize) -> Result<Var<'g, T>> {
        let x = self.value();
        let shape = x.shape().to_vec();
        if axis >= shape.len() {
            return Err(dim_err(format!("softmax axis {axis} out of range for {shape:?}")));
        }
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let outer: usize = shape[..axis].iter().product();
        let mut out = x.data().to_vec();
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let max = (0..len).map(|k| out[base + k * inner]).fold(T::neg_infinity(), T::max);
                let mut total = T::zero();
                for k in 0..len {
                    let e = (out[base + k * inner] - max).exp();
                    out[base + k * inner] = e;
                    total += e;
                }
                for k in 0..len {
                    out[base + k * inner] = out[base + k * inner] / total;
                }
            }
        }
        Ok(self.g.push(
            "softmax",
            OpKind::Activation,
            Tensor::new(shape, out)?,
            &[self.id],
            x.numel() as u64,
            Box::new(move |a: &BackwardArgs<'_, T>| {
                let y = a.output.data();
                let dy = a.grad.data();
                let mut dx = vec![T::zero(); y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * len * inner + i;
                        let dot: T = (0..len).map(|k| y[base + k * inner] * dy[base + k * inner]).sum();
                        for k in 0..len {
                            let p = base + k * inner;
                            dx[p] = y[p] * (dy[p] - dot);
                        }
                    }
                }
                vec![a.needs[0].then(|| Tensor::new(a.output.shape().to_vec(), dx).unwrap())]
            }),
        ))
    }

    /// Layer normalization over the trailing axis.
    pub fn layer_norm(self, gamma: Var<'g, T>, beta: Var<'g, T>, eps: f64) -> Result<Var<'g, T>> {
        let x = self.value();
        let c = x.last_dim();
        let (gv, bv) = (gamma.value(), beta.value());
        if gv.shape() != [c] || bv.shape() != [c] {
            return Err(dim_err(format!("layer_norm affine {:?}/{:?} vs width {c}", gv.shape(), bv.shape())));
        }
        let rows = x.numel() / c;
        let eps = T::lit(eps);
        let inv_c = T::lit(1.0 / c as f64);
        let mut xhat = vec![T::zero(); x.numel()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); x.numel()];
        for r in 0..rows {
            let row = &x.data()[r * c..(r + 1) * c];
            let mean = row.iter().copied().sum::<T>() * inv_c;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_c;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..c {
                let h = (row[j] - mean) * rs;
                xhat[r * c + j] = h;
                out[r * c + j] = h * gv.data()[j] + bv.data()[j];
            }
        }
        Ok(self.g.push(
            "layer_norm",
            OpKind::Norm,
            Tensor::new(x.shape().to_vec(), out)?,
            &[self.id, gamma.id, beta.id],
            x.numel() as u64,
            Box::new(move |a: &BackwardArgs<'_, T>| {
                let dy = a.grad.data();
                let g = a.inputs[1].data();
                let dx = a.needs[0].then(|| {
                    let mut dx = vec![T::zero(); dy.len()];
                    for r in 0..rows {
                        let mut mean_g = T::zero();
                        let mut mean_gx = T::zero();
                        for j in 0..c {
                            let gj = dy[r * c + j] * g[j];
                            mean_g += gj;
                            mean_gx += gj * xhat[r * c + j];
                        }
                        mean_g = mean_g * inv_c;
                        mean_gx = mean_gx * inv_c;
                        for j in 0..c {
                            let gj = dy[r * c + j] * g[j];
                            dx[r * c + j] = rstd[r] * (gj - mean_g - xhat[r * c + j] * mean_gx);
                        }
                    }
                    Tensor::new(a.inputs[0].shape().to_vec(), dx).unwrap()
                });
                let (dg, db) = affine_grads(dy, &xhat, c);
                vec![dx, a.needs[1].then_some(dg), a.needs[2].then_some(db)]
            }),
        ))
    }

    /// Batch normalization over every leading position of a channels-last
    /// tensor. Train mode normalizes with batch statistics and records
    /// running-statistic updates on the graph; eval mode uses the running
    /// statistics.
    pub fn batch_norm(self, gamma: Var<'g, T>, beta: Var<'g, T>, running: (ParamId, ParamId), eps: f64, momentum: f64) -> Result<Var<'g, T>> {
        let x = self.value();
        let c = x.last_dim();
        let rows = x.numel() / c;
        let (rm_id, rv_id) = running;
        let rm = self.g.params[rm_id.index()].clone();
        let rv = self.g.params[rv_id.index()].clone();
        if rm.shape() != [c] || rv.shape() != [c] {
            return Err(dim_err(format!("batch_norm running stats {:?} vs width {c}", rm.shape())));
        }
        let train = self.g.is_training();
        if train && rows < 2 {
            return Err(dim_err("batch_norm in train mode needs at least two positions".into()));
        }
        let (mean, var) = if train {
            let mut mean = vec![T::zero(); c];
            let mut var = vec![T::zero(); c];
            for row in x.data().chunks_exact(c) {
                for (m, &v) in mean.iter_mut().zip(row) {
                    *m += v;
                }
            }
            let inv = T::lit(1.0 / rows as f64);
            mean.iter_mut().for_each(|m| *m = *m * inv);
            for row in x.data().chunks_exact(c) {
                for j in 0..c {
                    let d = row[j] - mean[j];
                    var[j] += d * d;
                }
            }
            var.iter_mut().for_each(|v| *v = *v * inv);
            let mom = T::lit(momentum);
            let unbias = T::lit(rows as f64 / (rows as f64 - 1.0));
            let new_rm = (0..c).map(|j| (T::one() - mom) * rm.data()[j] + mom * mean[j]).collect();
            let new_rv = (0..c).map(|j| (T::one() - mom) * rv.data()[j] + mom * var[j] * unbias).collect();
            self.g.record_buffer_update(rm_id, Tensor::new(vec![c], new_rm)?);
            self.g.record_buffer_update(rv_id, Tensor::new(vec![c], new_rv)?);
            (mean, var)
        } else {
            (rm.data().to_vec(), rv.data().to_vec())
        };
        let eps = T::lit(eps);
        let rstd: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let (gv, bv) = (gamma.value(), beta.value());
        let mut xhat = vec![T::zero(); x.numel()];
        let mut out = vec![T::zero(); x.numel()];
        for (r, row) in x.data().chunks_exact(c).enumerate() {
            for j in 0..c {
                let h = (row[j] - mean[j]) * rstd[j];
                xhat[r * c + j] = h;
                out[r * c + j] = h * gv.data()[j] + bv.data()[j];
            }
        }
        Ok(self.g.push(
            "batch_norm",
            OpKind::Norm,
            Tensor::new(x.shape().to_vec(), out)?,
            &[self.id, gamma.id, beta.id],
            x.numel() as u64,
            Box::new(move |a: &BackwardArgs<'_, T>| {
                let dy = a.grad.data();
                let g = a.inputs[1].data();
                let (dg, db) = affine_grads(dy, &xhat, c);
                let dx = a.needs[0].then(|| {
                    let mut dx = vec![T::zero(); dy.len()];
                    if train {
                        let n = T::lit(rows as f64);
                        for r in 0..rows {
                            for j in 0..c {
                                let k = g[j] * rstd[j] / n;
                                dx[r * c + j] = k * (n * dy[r * c + j] - db.data()[j] - xhat[r * c + j] * dg.data()[j]);
                            }
                        }
                    } else {
                        for r in 0..rows {
                            for j in 0..c {
                                dx[r * c + j] = dy[r * c + j] * g[j] * rstd[j];
                            }
                        }
                    }
                    Tensor::new(a.inputs[0].shape().to_vec(), dx).unwrap()
                });
                vec![dx, a.needs[1].then_some(dg), a.needs[2].then_some(db)]
            }),
        ))
    }

    pub fn relu(self) -> Result<Var<'g, T>> {
        let x = self.value();
        Ok(self.g.push(
            "relu",
            OpKind::Activation,
            x.map(|v| v.max(T::zero())),
            &[self.id],
            x.numel() as u64,
            Box::new(|a: &BackwardArgs<'_, T>| {
                let d = a.grad.data().iter().zip(a.inputs[0].data()).map(|(&g, &v)| if v > T::zero() { g } else { T::zero() });
                vec![a.needs[0].then(|| Tensor::new(a.grad.shape().to_vec(), d.collect()).unwrap())]
            }),
        ))
    }

    /// Gaussian error linear unit, exact erf form.
    pub fn gelu(self) -> Result<Var<'g, T>> {
        let x = self.value();
        let half = T::lit(0.5);
        let inv_sqrt2 = T::lit(std::f64::consts::FRAC_1_SQRT_2);
        Ok(self.g.push(
            "gelu",
            OpKind::Activation,
            x.map(|v| half * v * (T::one() + (v * inv_sqrt2).erf())),
            &[self.id],
            x.numel() as u64,
            Box::new(move |a: &BackwardArgs<'_, T>| {
                let inv_sqrt_2pi = T::lit(1.0 / (2.0 * std::f64::consts::PI).sqrt());
                let d = a.grad.data().iter().zip(a.inputs[0].data()).map(|(&g, &v)| {
                    let cdf = half * (T::one() + (v * inv_sqrt2).erf());
                    let pdf = (-half * v * v).exp() * inv_sqrt_2pi;
                    g * (cdf + v * pdf)
                });
                vec![a.needs[0].then(|| Tensor::new(a.grad.shape().to_vec(), d.collect()).unwrap())]
            }),
        ))
    }

    /// Bilinear resize of a channels-last map with half-pixel centers.
    pub fn resize(self, out_h: usize, out_w: usize) -> Result<Var<'g, T>> {
        if out_h == 0 || out_w == 0 {
            return Err(dim_err("resize target must be positive".into()));
        }
        let x = self.value();
        let shape = x.shape().to_vec();
        let (b, h, w, c) = spatial_dims(&shape)?;
        if (h, w) == (out_h, out_w) {
            return Ok(self);
        }
        let ty = resize_taps::<T>(h, out_h);
        let tx = resize_taps::<T>(w, out_w);
        let out = resize_forward(x.data(), b, h, w, c, &ty, &tx);
        let out_shape = spatial_shape(&shape, b, out_h, out_w, c);
        Ok(self.g.push(
            "bilinear_resize",
            OpKind::Resize,
            Tensor::new(out_shape, out)?,
            &[self.id],
            8 * (b * out_h * out_w * c) as u64,
            Box::new(move |a: &BackwardArgs<'_, T>| {
                let dy = a.grad.data();
                let mut dx = vec![T::zero(); b * h * w * c];
                for bi in 0..b {
                    for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
                        for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                            let o = ((bi * out_h + oy) * out_w + ox) * c;
                            let taps = [(y0, x0, wy0 * wx0), (y0, x1, wy0 * wx1), (y1, x0, wy1 * wx0), (y1, x1, wy1 * wx1)];
                            for (sy, sx, wt) in taps {
                                let s = ((bi * h + sy) * w + sx) * c;
                                for k in 0..c {
                                    dx[s + k] += wt * dy[o + k];
                                }
                            }
                        }
                    }
                }
                vec![a.needs[0].then(|| Tensor::new(a.inputs[0].shape().to_vec(), dx).unwrap())]
            }),
        ))
    }

    /// Rearranges `seg`-long chunks: output chunk `i` copies input chunk
    /// `index[i]`, or zeros for [`NO_SOURCE`]. Gradients scatter-add back.
    pub fn gather(self, op: &'static str, kind: OpKind, seg: usize, index: Arc<Vec<u32>>, out_shape: Vec<usize>) -> Result<Var<'g, T>> {
        let x = self.value();
        if seg == 0 || x.numel() % seg != 0 {
            return Err(dim_err(format!("{op}: chunk {seg} does not divide {:?}", x.shape())));
        }
        if out_shape.iter().product::<usize>() != index.len() * seg {
            return Err(dim_err(format!("{op}: {} chunks of {seg} do not fill {out_shape:?}", index.len())));
        }
        let chunks = x.numel() / seg;
        if let Some(&bad) = index.iter().find(|&&i| i != NO_SOURCE && i as usize >= chunks) {
            return Err(dim_err(format!("{op}: source chunk {bad} out of {chunks}")));
        }
        let mut out = vec![T::zero(); index.len() * seg];
        for (dst, &src) in out.chunks_exact_mut(seg).zip(index.iter()) {
            if src != NO_SOURCE {
                let s = src as usize * seg;
                dst.copy_from_slice(&x.data()[s..s + seg]);
            }
        }
        Ok(self.g.push(
            op,
            kind,
            Tensor::new(out_shape, out)?,
            &[self.id],
            0,
            Box::new(move |a: &BackwardArgs<'_, T>| {
                let dx = a.needs[0].then(|| {
                    let mut dx = vec![T::zero(); a.inputs[0].numel()];
                    for (g, &src) in a.grad.data().chunks_exact(seg).zip(index.iter()) {
                        if src != NO_SOURCE {
                            let s = src as usize * seg;
                            for (d, &v) in dx[s..s + seg].iter_mut().zip(g) {
                                *d += v;
                            }
                        }
                    }
                    Tensor::new(a.inputs[0].shape().to_vec(), dx).unwrap()
                });
                vec![dx]
            }),
        ))
    }

    /// Concatenation along the trailing axis.
    pub fn concat_last(vars: &[Var<'g, T>]) -> Result<Var<'g, T>> {
        let first = vars.first().ok_or_else(|| dim_err("concat of no tensors".into()))?;
        let values: Vec<_> = vars.iter().map(|v| v.value()).collect();
        let lead = &values[0].shape()[..values[0].rank() - 1];
        for v in &values {
            if &v.shape()[..v.rank() - 1] != lead {
                return Err(dim_err(format!("concat leading extents {:?} vs {:?}", v.shape(), values[0].shape())));
            }
        }
        let widths: Vec<usize> = values.iter().map(|v| v.last_dim()).collect();
        let total: usize = widths.iter().sum();
        let rows = values[0].numel() / widths[0];
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (v, &wd) in values.iter().zip(&widths) {
                out.extend_from_slice(&v.data()[r * wd..(r + 1) * wd]);
            }
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        let parents: Vec<usize> = vars.iter().map(|v| v.id).collect();
        Ok(first.g.push(
            "concat",
            OpKind::Concat,
            Tensor::new(shape, out)?,
            &parents,
            0,
            Box::new(move |a: &BackwardArgs<'_, T>| {
                let dy = a.grad.data();
                let mut offset = 0;
                widths
                    .iter()
                    .enumerate()
                    .map(|(i, &wd)| {
                        let off = offset;
                        offset += wd;
                        a.needs[i].then(|| {
                            let mut d = Vec::with_capacity(rows * wd);
                            for r in 0..rows {
                                d.extend_from_slice(&dy[r * total + off..r * total + off + wd]);
                            }
                            Tensor::new(a.inputs[i].shape().to_vec(), d).unwrap()
                        })
                    })
                    .collect()
            }),
        ))
    }

    /// Multi-head attention inside windows.
    ///
    /// `q`, `k`, `v` are `[windows, t, heads * d]`; `bias` is a dense
    /// `[heads, t, t]` additive term; `mask` adds per-window values. Returns
    /// the concatenated head outputs `[windows, t, heads * d]` (no output
    /// projection).
    pub fn window_attention(
        q: Var<'g, T>,
        k: Var<'g, T>,
        v: Var<'g, T>,
        bias: Option<Var<'g, T>>,
        mask: Option<Arc<ShiftMask>>,
        heads: usize,
    ) -> Result<Var<'g, T>> {
        same_graph(&q, &k);
        same_graph(&q, &v);
        let (qv, kv, vv) = (q.value(), k.value(), v.value());
        let [nw, t, e] = qv.shape()[..] else {
            return Err(dim_err(format!("attention q must be [windows, t, e], got {:?}", qv.shape())));
        };
        if kv.shape() != qv.shape() || vv.shape() != qv.shape() {
            return Err(dim_err(format!("attention q/k/v shapes {:?} {:?} {:?}", qv.shape(), kv.shape(), vv.shape())));
        }
        if heads == 0 || e % heads != 0 {
            return Err(dim_err(format!("embed {e} not divisible by {heads} heads")));
        }
        let bias_t = match bias {
            Some(b) => {
                let bv = b.value();
                if bv.shape() != [heads, t, t] {
                    return Err(dim_err(format!("attention bias {:?} != [{heads}, {t}, {t}]", bv.shape())));
                }
                Some(bv)
            }
            None => None,
        };
        if let Some(m) = &mask {
            if m.tokens() != t || nw % m.num_windows() != 0 {
                return Err(dim_err(format!("mask for {} windows of {} tokens vs {nw} windows of {t}", m.num_windows(), m.tokens())));
            }
        }
        let d = e / heads;
        let scale = T::lit(1.0 / (d as f64).sqrt());
        let tt = t * t;
        let mut probs = vec![T::zero(); nw * heads * tt];
        let mut out = vec![T::zero(); nw * t * e];
        for w in 0..nw {
            let base = w * t * e;
            let mask_w = mask.as_ref().map(|m| m.for_window(w));
            for h in 0..heads {
                let p = &mut probs[(w * heads + h) * tt..(w * heads + h + 1) * tt];
                let qh = MatRef::new(&qv.data()[base + h * d..], t, d, e);
                let kh = MatRef::new(&kv.data()[base + h * d..], t, d, e);
                gemm(qh, kh.t(), p, t, scale, false);
                if let Some(b) = &bias_t {
                    for (s, &bb) in p.iter_mut().zip(&b.data()[h * tt..(h + 1) * tt]) {
                        *s += bb;
                    }
                }
                if let Some(mw) = mask_w {
                    for (s, &mm) in p.iter_mut().zip(mw) {
                        *s += T::lit(mm as f64);
                    }
                }
                if p.iter().any(|s| !s.is_finite()) {
                    return Err(Error::Numeric(format!("non-finite attention score in window {w}, head {h}")));
                }
                for row in p.chunks_exact_mut(t) {
                    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
                    let mut total = T::zero();
                    for s in row.iter_mut() {
                        *s = (*s - max).exp();
                        total += *s;
                    }
                    for s in row.iter_mut() {
                        *s = *s / total;
                    }
                }
                let vh = MatRef::new(&vv.data()[base + h * d..], t, d, e);
                gemm(MatRef::new(p, t, t, t), vh, &mut out[base + h * d..], e, T::one(), false);
            }
        }
        let mut parents = vec![q.id, k.id, v.id];
        let has_bias = bias.is_some();
        if let Some(b) = bias {
            same_graph(&q, &b);
            parents.push(b.id);
        }
        let flops = 4 * (nw * tt * e) as u64;
        Ok(q.g.push(
            "window_attention",
            OpKind::Attention,
            Tensor::new(vec![nw, t, e], out)?,
            &parents,
            flops,
            Box::new(move |a: &BackwardArgs<'_, T>| {
                let dy = a.grad.data();
                let (qd, kd, vd) = (a.inputs[0].data(), a.inputs[1].data(), a.inputs[2].data());
                let need_bias = has_bias && a.needs[3];
                let mut dq = vec![T::zero(); nw * t * e];
                let mut dk = vec![T::zero(); nw * t * e];
                let mut dv = vec![T::zero(); nw * t * e];
                let mut db = vec![T::zero(); if need_bias { heads * tt } else { 0 }];
                let mut ds = vec![T::zero(); tt];
                for w in 0..nw {
                    let base = w * t * e;
                    for h in 0..heads {
                        let p = &probs[(w * heads + h) * tt..(w * heads + h + 1) * tt];
                        let doh = MatRef::new(&dy[base + h * d..], t, d, e);
                        // dP = dO V^T
                        gemm(doh, MatRef::new(&vd[base + h * d..], t, d, e).t(), &mut ds, t, T::one(), false);
                        // dV = P^T dO
                        gemm(MatRef::new(p, t, t, t).t(), doh, &mut dv[base + h * d..], e, T::one(), false);
                        for (srow, prow) in ds.chunks_exact_mut(t).zip(p.chunks_exact(t)) {
                            let dot: T = srow.iter().zip(prow).map(|(&g, &pp)| g * pp).sum();
                            for (s, &pp) in srow.iter_mut().zip(prow) {
                                *s = pp * (*s - dot);
                            }
                        }
                        if need_bias {
                            for (acc, &s) in db[h * tt..(h + 1) * tt].iter_mut().zip(&ds) {
                                *acc += s;
                            }
                        }
                        let dsm = MatRef::new(&ds, t, t, t);
                        gemm(dsm, MatRef::new(&kd[base + h * d..], t, d, e), &mut dq[base + h * d..], e, scale, false);
                        gemm(dsm.t(), MatRef::new(&qd[base + h * d..], t, d, e), &mut dk[base + h * d..], e, scale, false);
                    }
                }
                let shape = vec![nw, t, e];
                let mut grads = vec![
                    a.needs[0].then(|| Tensor::new(shape.clone(), dq).unwrap()),
                    a.needs[1].then(|| Tensor::new(shape.clone(), dk).unwrap()),
                    a.needs[2].then(|| Tensor::new(shape.clone(), dv).unwrap()),
                ];
                if has_bias {
                    grads.push(need_bias.then(|| Tensor::new(vec![heads, t, t], db).unwrap()));
                }
                grads
            }),
        ))
    }

    /// Mean cross-entropy of `[N, K]` logits against labels in `[0, K)`;
    /// [`IGNORE_LABEL`] positions are skipped. An all-ignored batch yields a
    /// zero loss with zero gradient.
    pub fn cross_entropy(self, labels: &[u8]) -> Result<Var<'g, T>> {
        let x = self.value();
        let [n, k] = x.shape()[..] else {
            return Err(dim_err(format!("cross_entropy logits must be [N, K], got {:?}", x.shape())));
        };
        if labels.len() != n {
            return Err(dim_err(format!("{} labels for {n} rows", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l != IGNORE_LABEL && l as usize >= k) {
            return Err(Error::Data(format!("label {bad} outside [0, {k})")));
        }
        let labels: Arc<Vec<u8>> = Arc::new(labels.to_vec());
        let count = labels.iter().filter(|&&l| l != IGNORE_LABEL).count();
        let mut total = T::zero();
        for (row, &l) in x.data().chunks_exact(k).zip(labels.iter()) {
            if l == IGNORE_LABEL {
                continue;
            }
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
            total += lse - row[l as usize];
        }
        let loss = if count == 0 { T::zero() } else { total / T::lit(count as f64) };
        Ok(self.g.push(
            "cross_entropy",
            OpKind::Loss,
            Tensor::scalar(loss),
            &[self.id],
            0,
            Box::new(move |a: &BackwardArgs<'_, T>| {
                let x = a.inputs[0];
                let mut dx = vec![T::zero(); x.numel()];
                if count > 0 {
                    let g = a.grad.data()[0] / T::lit(count as f64);
                    for ((row, drow), &l) in x.data().chunks_exact(k).zip(dx.chunks_exact_mut(k)).zip(labels.iter()) {
                        if l == IGNORE_LABEL {
                            continue;
                        }
                        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
                        let total: T = row.iter().map(|&v| (v - max).exp()).sum();
                        for (d, &v) in drow.iter_mut().zip(row) {
                            *d = (v - max).exp() / total * g;
                        }
                        drow[l as usize] -= g;
                    }
                }
                vec![a.needs[0].then(|| Tensor::new(x.shape().to_vec(), dx).unwrap())]
            }),
        ))
    }
}

fn affine_grads<T: Scalar>(dy: &[T], xhat: &[T], c: usize) -> (Tensor<T>, Tensor<T>) {
    let mut dg = vec![T::zero(); c];
    let mut db = vec![T::zero(); c];
    for (grow, hrow) in dy.chunks_exact(c).zip(xhat.chunks_exact(c)) {
        for j in 0..c {
            dg[j] += grow[j] * hrow[j];
            db[j] += grow[j];
        }
    }
    (Tensor::new(vec![c], dg).unwrap(), Tensor::new(vec![c], db).unwrap())
}

pub(crate) fn resize_forward<T: Scalar>(
    x: &[T],
    b: usize,
    h: usize,
    w: usize,
    c: usize,
    ty: &[(usize, usize, T, T)],
    tx: &[(usize, usize, T, T)],
) -> Vec<T> {
    let (out_h, out_w) = (ty.len(), tx.len());
    let mut out = vec![T::zero(); b * out_h * out_w * c];
    for bi in 0..b {
        for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                let o = ((bi * out_h + oy) * out_w + ox) * c;
                let p00 = ((bi * h + y0) * w + x0) * c;
                let p01 = ((bi * h + y0) * w + x1) * c;
                let p10 = ((bi * h + y1) * w + x0) * c;
                let p11 = ((bi * h + y1) * w + x1) * c;
                for k in 0..c {
                    let top = wx0 * x[p00 + k] + wx1 * x[p01 + k];
                    let bottom = wx0 * x[p10 + k] + wx1 * x[p11 + k];
                    out[o + k] = wy0 * top + wy1 * bottom;
                }
            }
        }
    }
    out
}

/// Bilinear resize of a plain tensor (no tape).
pub fn bilinear_resize<T: Scalar>(x: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    let (b, h, w, c) = spatial_dims(x.shape())?;
    if out_h == 0 || out_w == 0 {
        return Err(dim_err("resize target must be positive".into()));
    }
    if (h, w) == (out_h, out_w) {
        return Ok(x.clone());
    }
    let ty = resize_taps::<T>(h, out_h);
    let tx = resize_taps::<T>(w, out_w);
    Tensor::new(spatial_shape(x.shape(), b, out_h, out_w, c), resize_forward(x.data(), b, h, w, c, &ty, &tx))
}

/// Softmax over the trailing axis of a plain tensor (no tape).
pub fn softmax_last<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let k = x.last_dim();
    let mut out = x.data().to_vec();
    for row in out.chunks_exact_mut(k) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut total = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v = *v / total;
        }
    }
    Tensor::new(x.shape().to_vec(), out).unwrap()
}
