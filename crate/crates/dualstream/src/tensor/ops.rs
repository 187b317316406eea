//! Forward primitives and their reverse-mode derivatives.
//!
//! Every op validates shapes up front and pushes a node whose closure maps
//! the upstream gradient to parent gradients. Heavy kernels (matmul, conv)
//! parallelize over independent output rows, which keeps results identical
//! for any worker count.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::tape::Var;
use super::{shape_err, Scalar, Tensor, TensorError};

const PAR_THRESHOLD: usize = 1 << 13;

// ---------------------------------------------------------------------------
// raw tensor kernels (no tape involvement)
// ---------------------------------------------------------------------------

/// Batched matmul: [..., M, K] x [..., K, N] -> [..., M, N], equal leading dims.
pub(crate) fn raw_matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let (ash, bsh) = (a.shape(), b.shape());
    let (m, k) = (ash[ash.len() - 2], ash[ash.len() - 1]);
    let (k2, n) = (bsh[bsh.len() - 2], bsh[bsh.len() - 1]);
    assert_eq!(k, k2, "matmul inner dims");
    let batch: usize = ash[..ash.len() - 2].iter().product();

    let mut out_shape = ash[..ash.len() - 2].to_vec();
    out_shape.push(m);
    out_shape.push(n);
    let mut out = vec![T::zero(); batch * m * n];

    let ad = a.data();
    let bd = b.data();
    let row = |chunk: &mut [T], br: usize| {
        let (bi, r) = (br / m, br % m);
        let a_off = bi * m * k + r * k;
        let b_off = bi * k * n;
        for (j, o) in chunk.iter_mut().enumerate() {
            let mut acc = T::zero();
            for kk in 0..k {
                acc += ad[a_off + kk] * bd[b_off + kk * n + j];
            }
            *o = acc;
        }
    };
    if batch * m * n >= PAR_THRESHOLD {
        out.par_chunks_mut(n)
            .enumerate()
            .for_each(|(br, chunk)| row(chunk, br));
    } else {
        for (br, chunk) in out.chunks_mut(n).enumerate() {
            row(chunk, br);
        }
    }
    Tensor::new(out_shape, out)
}

/// Swap the last two axes.
pub(crate) fn raw_transpose_last<T: Scalar>(t: &Tensor<T>) -> Tensor<T> {
    let sh = t.shape();
    let nd = sh.len();
    let (m, n) = (sh[nd - 2], sh[nd - 1]);
    let batch: usize = sh[..nd - 2].iter().product();
    let mut shape = sh.to_vec();
    shape.swap(nd - 2, nd - 1);
    let src = t.data();
    let mut out = vec![T::zero(); src.len()];
    for b in 0..batch {
        let off = b * m * n;
        for i in 0..m {
            for j in 0..n {
                out[off + j * m + i] = src[off + i * n + j];
            }
        }
    }
    Tensor::new(shape, out)
}

fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

fn permuted<T: Scalar>(t: &Tensor<T>, axes: &[usize]) -> Tensor<T> {
    let sh = t.shape();
    assert_eq!(axes.len(), sh.len());
    let out_shape: Vec<usize> = axes.iter().map(|&a| sh[a]).collect();
    let in_strides = strides_of(sh);
    let out_strides = strides_of(&out_shape);
    let src = t.data();
    let mut out = vec![T::zero(); src.len()];
    for (oi, slot) in out.iter_mut().enumerate() {
        let mut rem = oi;
        let mut ii = 0;
        for (d, os) in out_strides.iter().enumerate() {
            let idx = rem / os;
            rem %= os;
            ii += idx * in_strides[axes[d]];
        }
        *slot = src[ii];
    }
    Tensor::new(out_shape, out)
}

fn inverse_axes(axes: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; axes.len()];
    for (i, &a) in axes.iter().enumerate() {
        inv[a] = i;
    }
    inv
}

/// (outer, len, inner) factorization of a shape around one axis.
fn around_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, len, inner)
}

// ---------------------------------------------------------------------------
// elementwise and structural ops
// ---------------------------------------------------------------------------

impl<'t, T: Scalar> Var<'t, T> {
    pub fn add(self, rhs: Var<'t, T>) -> Result<Var<'t, T>, TensorError> {
        let (a, b) = (self.value(), rhs.value());
        if a.shape() != b.shape() {
            return shape_err("add", a.shape(), b.shape());
        }
        let out = a.zip_map(&b, |x, y| x + y);
        Ok(self.tape.push(
            out,
            vec![self.id, rhs.id],
            Some(Box::new(|g| vec![g.clone(), g.clone()])),
            None,
        ))
    }

    pub fn sub(self, rhs: Var<'t, T>) -> Result<Var<'t, T>, TensorError> {
        let (a, b) = (self.value(), rhs.value());
        if a.shape() != b.shape() {
            return shape_err("sub", a.shape(), b.shape());
        }
        let out = a.zip_map(&b, |x, y| x - y);
        Ok(self.tape.push(
            out,
            vec![self.id, rhs.id],
            Some(Box::new(|g| vec![g.clone(), g.map(|v| -v)])),
            None,
        ))
    }

    pub fn mul(self, rhs: Var<'t, T>) -> Result<Var<'t, T>, TensorError> {
        let (a, b) = (self.value(), rhs.value());
        if a.shape() != b.shape() {
            return shape_err("mul", a.shape(), b.shape());
        }
        let out = a.zip_map(&b, |x, y| x * y);
        Ok(self.tape.push(
            out,
            vec![self.id, rhs.id],
            Some(Box::new(move |g| {
                vec![g.zip_map(&b, |gv, bv| gv * bv), g.zip_map(&a, |gv, av| gv * av)]
            })),
            None,
        ))
    }

    pub fn neg(self) -> Var<'t, T> {
        let out = self.value().map(|v| -v);
        self.tape.push(
            out,
            vec![self.id],
            Some(Box::new(|g| vec![g.map(|v| -v)])),
            None,
        )
    }

    pub fn scale(self, c: T) -> Var<'t, T> {
        let out = self.value().map(|v| v * c);
        self.tape.push(
            out,
            vec![self.id],
            Some(Box::new(move |g| vec![g.map(|v| v * c)])),
            None,
        )
    }

    pub fn add_scalar(self, c: T) -> Var<'t, T> {
        let out = self.value().map(|v| v + c);
        self.tape
            .push(out, vec![self.id], Some(Box::new(|g| vec![g.clone()])), None)
    }

    /// Multiply by a one-element var (a learned scalar).
    pub fn scale_by(self, s: Var<'t, T>) -> Result<Var<'t, T>, TensorError> {
        let sv = s.value();
        if sv.len() != 1 {
            return shape_err("scale_by", self.value().shape(), sv.shape());
        }
        let a = self.value();
        let c = sv.data()[0];
        let out = a.map(|v| v * c);
        let s_shape = sv.shape().to_vec();
        Ok(self.tape.push(
            out,
            vec![self.id, s.id],
            Some(Box::new(move |g| {
                let da = g.map(|v| v * c);
                let ds: T = g.data().iter().zip(a.data()).map(|(&gv, &av)| gv * av).sum();
                vec![da, Tensor::new(s_shape.clone(), vec![ds])]
            })),
            None,
        ))
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Var<'t, T>, TensorError> {
        let v = self.value();
        if shape.iter().product::<usize>() != v.len() {
            return shape_err("reshape", v.shape(), &shape);
        }
        let orig = v.shape().to_vec();
        let out = v.reshaped(shape);
        Ok(self.tape.push(
            out,
            vec![self.id],
            Some(Box::new(move |g| vec![g.reshaped(orig.clone())])),
            None,
        ))
    }

    pub fn permute(self, axes: Vec<usize>) -> Result<Var<'t, T>, TensorError> {
        let v = self.value();
        if axes.len() != v.shape().len() {
            return shape_err("permute", v.shape(), &axes);
        }
        let out = permuted(&v, &axes);
        let inv = inverse_axes(&axes);
        Ok(self.tape.push(
            out,
            vec![self.id],
            Some(Box::new(move |g| vec![permuted(g, &inv)])),
            None,
        ))
    }

    /// Contiguous slice of length `len` starting at `start` along `axis`.
    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Result<Var<'t, T>, TensorError> {
        let v = self.value();
        let sh = v.shape().to_vec();
        if axis >= sh.len() || start + len > sh[axis] {
            return shape_err("narrow", &sh, &[axis, start, len]);
        }
        let (outer, axis_len, inner) = around_axis(&sh, axis);
        let mut out_shape = sh.clone();
        out_shape[axis] = len;
        let src = v.data();
        let mut out = vec![T::zero(); outer * len * inner];
        for o in 0..outer {
            for j in 0..len {
                let s_off = (o * axis_len + start + j) * inner;
                let d_off = (o * len + j) * inner;
                out[d_off..d_off + inner].copy_from_slice(&src[s_off..s_off + inner]);
            }
        }
        let full_shape = sh.clone();
        Ok(self.tape.push(
            Tensor::new(out_shape, out),
            vec![self.id],
            Some(Box::new(move |g| {
                let mut dx = vec![T::zero(); full_shape.iter().product()];
                let gd = g.data();
                for o in 0..outer {
                    for j in 0..len {
                        let d_off = (o * axis_len + start + j) * inner;
                        let s_off = (o * len + j) * inner;
                        dx[d_off..d_off + inner].copy_from_slice(&gd[s_off..s_off + inner]);
                    }
                }
                vec![Tensor::new(full_shape.clone(), dx)]
            })),
            None,
        ))
    }

    /// Broadcast to `target`: shapes align right, each dim equal or 1.
    pub fn broadcast_to(self, target: Vec<usize>) -> Result<Var<'t, T>, TensorError> {
        let v = self.value();
        let src_shape = v.shape().to_vec();
        if target.len() < src_shape.len() {
            return shape_err("broadcast_to", &src_shape, &target);
        }
        let pad = target.len() - src_shape.len();
        let mut aligned = vec![1usize; pad];
        aligned.extend_from_slice(&src_shape);
        for (s, t) in aligned.iter().zip(&target) {
            if *s != *t && *s != 1 {
                return shape_err("broadcast_to", &src_shape, &target);
            }
        }
        let src_strides = strides_of(&aligned);
        let dst_strides = strides_of(&target);
        // stride 0 along broadcast dims
        let eff: Vec<usize> = aligned
            .iter()
            .zip(&src_strides)
            .zip(&target)
            .map(|((s, st), t)| if *s == *t { *st } else { 0 })
            .collect();

        let src = v.data();
        let total: usize = target.iter().product();
        let mut out = vec![T::zero(); total];
        for (oi, slot) in out.iter_mut().enumerate() {
            let mut rem = oi;
            let mut ii = 0;
            for (d, ds) in dst_strides.iter().enumerate() {
                let idx = rem / ds;
                rem %= ds;
                ii += idx * eff[d];
            }
            *slot = src[ii];
        }
        let aligned_c = aligned.clone();
        let target_c = target.clone();
        Ok(self.tape.push(
            Tensor::new(target, out),
            vec![self.id],
            Some(Box::new(move |g| {
                let mut dx = vec![T::zero(); src_shape.iter().product()];
                let gd = g.data();
                let eff: Vec<usize> = aligned_c
                    .iter()
                    .zip(strides_of(&aligned_c))
                    .zip(&target_c)
                    .map(|((s, st), t)| if *s == *t { st } else { 0 })
                    .collect();
                let dst_strides = strides_of(&target_c);
                for (oi, gv) in gd.iter().enumerate() {
                    let mut rem = oi;
                    let mut ii = 0;
                    for (d, ds) in dst_strides.iter().enumerate() {
                        let idx = rem / ds;
                        rem %= ds;
                        ii += idx * eff[d];
                    }
                    dx[ii] += *gv;
                }
                vec![Tensor::new(src_shape.clone(), dx)]
            })),
            None,
        ))
    }

    // -----------------------------------------------------------------------
    // activations
    // -----------------------------------------------------------------------

    pub fn relu(self) -> Var<'t, T> {
        let x = self.value();
        let out = x.map(|v| if v > T::zero() { v } else { T::zero() });
        self.tape.push(
            out,
            vec![self.id],
            Some(Box::new(move |g| {
                vec![g.zip_map(&x, |gv, xv| if xv > T::zero() { gv } else { T::zero() })]
            })),
            None,
        )
    }

    pub fn relu6(self) -> Var<'t, T> {
        let six = T::of_f64(6.0);
        let x = self.value();
        let out = x.map(|v| v.max(T::zero()).min(six));
        self.tape.push(
            out,
            vec![self.id],
            Some(Box::new(move |g| {
                vec![g.zip_map(&x, |gv, xv| {
                    if xv > T::zero() && xv < six {
                        gv
                    } else {
                        T::zero()
                    }
                })]
            })),
            None,
        )
    }

    /// Tanh-form GELU: `0.5 x (1 + tanh(s (x + 0.044715 x^3)))`.
    pub fn gelu(self) -> Var<'t, T> {
        let s = T::of_f64((2.0 / std::f64::consts::PI).sqrt());
        let c = T::of_f64(0.044715);
        let half = T::of_f64(0.5);
        let one = T::one();
        let three = T::of_f64(3.0);
        let x = self.value();
        let out = x.map(|v| {
            let t = (s * (v + c * v * v * v)).tanh();
            half * v * (one + t)
        });
        self.tape.push(
            out,
            vec![self.id],
            Some(Box::new(move |g| {
                vec![g.zip_map(&x, |gv, v| {
                    let inner = s * (v + c * v * v * v);
                    let t = inner.tanh();
                    let dinner = s * (one + three * c * v * v);
                    let d = half * (one + t) + half * v * (one - t * t) * dinner;
                    gv * d
                })]
            })),
            None,
        )
    }

    pub fn sigmoid(self) -> Var<'t, T> {
        let one = T::one();
        let out = self.value().map(|v| one / (one + (-v).exp()));
        let y = out.clone();
        self.tape.push(
            out,
            vec![self.id],
            Some(Box::new(move |g| {
                vec![g.zip_map(&y, |gv, yv| gv * yv * (one - yv))]
            })),
            None,
        )
    }

    /// Numerically-stable softmax along `axis`.
    pub fn softmax(self, axis: usize) -> Result<Var<'t, T>, TensorError> {
        let x = self.value();
        let sh = x.shape().to_vec();
        if axis >= sh.len() {
            return shape_err("softmax", &sh, &[axis]);
        }
        let (outer, len, inner) = around_axis(&sh, axis);
        let src = x.data();
        let mut out = vec![T::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * len + j) * inner + i;
                let mut mx = src[at(0)];
                for j in 1..len {
                    mx = mx.max(src[at(j)]);
                }
                let mut sum = T::zero();
                for j in 0..len {
                    let e = (src[at(j)] - mx).exp();
                    out[at(j)] = e;
                    sum += e;
                }
                for j in 0..len {
                    out[at(j)] /= sum;
                }
            }
        }
        let y = Tensor::new(sh, out);
        let yc = y.clone();
        Ok(self.tape.push(
            y,
            vec![self.id],
            Some(Box::new(move |g| {
                let gd = g.data();
                let yd = yc.data();
                let mut dx = vec![T::zero(); gd.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| (o * len + j) * inner + i;
                        let mut dot = T::zero();
                        for j in 0..len {
                            dot += gd[at(j)] * yd[at(j)];
                        }
                        for j in 0..len {
                            dx[at(j)] = yd[at(j)] * (gd[at(j)] - dot);
                        }
                    }
                }
                vec![Tensor::new(yc.shape().to_vec(), dx)]
            })),
            None,
        ))
    }

    // -----------------------------------------------------------------------
    // reductions
    // -----------------------------------------------------------------------

    pub fn sum_all(self) -> Var<'t, T> {
        let x = self.value();
        let s: T = x.data().iter().copied().sum();
        let shape = x.shape().to_vec();
        self.tape.push(
            Tensor::scalar(s),
            vec![self.id],
            Some(Box::new(move |g| {
                vec![Tensor::full(&shape, g.item())]
            })),
            None,
        )
    }

    pub fn mean_all(self) -> Var<'t, T> {
        let x = self.value();
        let n = T::of_f64(x.len() as f64);
        let s: T = x.data().iter().copied().sum();
        let shape = x.shape().to_vec();
        self.tape.push(
            Tensor::scalar(s / n),
            vec![self.id],
            Some(Box::new(move |g| {
                vec![Tensor::full(&shape, g.item() / n)]
            })),
            None,
        )
    }

    // -----------------------------------------------------------------------
    // linear algebra
    // -----------------------------------------------------------------------

    /// Batched matmul: [..., M, K] x [..., K, N], equal leading dims.
    pub fn matmul(self, rhs: Var<'t, T>) -> Result<Var<'t, T>, TensorError> {
        let (a, b) = (self.value(), rhs.value());
        let (ash, bsh) = (a.shape(), b.shape());
        if ash.len() < 2
            || bsh.len() != ash.len()
            || ash[ash.len() - 1] != bsh[bsh.len() - 2]
            || ash[..ash.len() - 2] != bsh[..bsh.len() - 2]
        {
            return shape_err("matmul", ash, bsh);
        }
        let out = raw_matmul(&a, &b);
        Ok(self.tape.push(
            out,
            vec![self.id, rhs.id],
            Some(Box::new(move |g| {
                let da = raw_matmul(g, &raw_transpose_last(&b));
                let db = raw_matmul(&raw_transpose_last(&a), g);
                vec![da, db]
            })),
            None,
        ))
    }
}

// ---------------------------------------------------------------------------
// multi-input ops (free functions)
// ---------------------------------------------------------------------------

/// Concatenate along `axis`; all other dims must agree.
pub fn concat<'t, T: Scalar>(
    parts: &[Var<'t, T>],
    axis: usize,
) -> Result<Var<'t, T>, TensorError> {
    assert!(!parts.is_empty());
    let tape = parts[0].tape();
    let values: Vec<Tensor<T>> = parts.iter().map(|p| p.value()).collect();
    let base = values[0].shape().to_vec();
    if axis >= base.len() {
        return shape_err("concat", &base, &[axis]);
    }
    let mut axis_total = 0;
    for v in &values {
        let sh = v.shape();
        if sh.len() != base.len() {
            return shape_err("concat", &base, sh);
        }
        for (d, (s, b)) in sh.iter().zip(&base).enumerate() {
            if d != axis && s != b {
                return shape_err("concat", &base, sh);
            }
        }
        axis_total += sh[axis];
    }
    let mut out_shape = base.clone();
    out_shape[axis] = axis_total;
    let (outer, _, inner) = around_axis(&out_shape, axis);

    let mut out = vec![T::zero(); out_shape.iter().product()];
    for o in 0..outer {
        let mut offset = 0;
        for v in &values {
            let len = v.shape()[axis];
            let src = v.data();
            let s_off = o * len * inner;
            let d_off = (o * axis_total + offset) * inner;
            out[d_off..d_off + len * inner].copy_from_slice(&src[s_off..s_off + len * inner]);
            offset += len;
        }
    }
    let lens: Vec<usize> = values.iter().map(|v| v.shape()[axis]).collect();
    let shapes: Vec<Vec<usize>> = values.iter().map(|v| v.shape().to_vec()).collect();
    Ok(tape.push(
        Tensor::new(out_shape, out),
        parts.iter().map(|p| p.id).collect(),
        Some(Box::new(move |g| {
            let gd = g.data();
            let mut grads = Vec::with_capacity(lens.len());
            let mut offset = 0;
            for (len, shape) in lens.iter().zip(&shapes) {
                let mut dx = vec![T::zero(); shape.iter().product()];
                for o in 0..outer {
                    let s_off = (o * axis_total + offset) * inner;
                    let d_off = o * len * inner;
                    dx[d_off..d_off + len * inner]
                        .copy_from_slice(&gd[s_off..s_off + len * inner]);
                }
                grads.push(Tensor::new(shape.clone(), dx));
                offset += len;
            }
            grads
        })),
        None,
    ))
}

/// Affine map over the last dim: y = x W^T + b with W [OUT, IN], b [OUT].
pub fn linear<'t, T: Scalar>(
    x: Var<'t, T>,
    w: Var<'t, T>,
    b: Option<Var<'t, T>>,
) -> Result<Var<'t, T>, TensorError> {
    let xv = x.value();
    let wv = w.value();
    let xsh = xv.shape().to_vec();
    let wsh = wv.shape();
    if wsh.len() != 2 || *xsh.last().unwrap() != wsh[1] {
        return shape_err("linear", &xsh, wsh);
    }
    let (out_dim, in_dim) = (wsh[0], wsh[1]);
    if let Some(bb) = &b {
        let bsh = bb.value();
        if bsh.shape() != [out_dim] {
            return shape_err("linear", bsh.shape(), wsh);
        }
    }
    let rows = xv.len() / in_dim;
    let bv = b.map(|bb| (bb, bb.value()));
    let bias_data: Option<Vec<T>> = bv.as_ref().map(|(_, bt)| bt.data().to_vec());

    let xd = xv.data();
    let wd = wv.data();
    let mut out = vec![T::zero(); rows * out_dim];
    let fill_row = |chunk: &mut [T], r: usize| {
        for (o, slot) in chunk.iter_mut().enumerate() {
            let mut acc = match &bias_data {
                Some(bd) => bd[o],
                None => T::zero(),
            };
            let x_off = r * in_dim;
            let w_off = o * in_dim;
            for i in 0..in_dim {
                acc += xd[x_off + i] * wd[w_off + i];
            }
            *slot = acc;
        }
    };
    if rows * out_dim >= PAR_THRESHOLD {
        out.par_chunks_mut(out_dim)
            .enumerate()
            .for_each(|(r, chunk)| fill_row(chunk, r));
    } else {
        for (r, chunk) in out.chunks_mut(out_dim).enumerate() {
            fill_row(chunk, r);
        }
    }

    let mut out_shape = xsh.clone();
    *out_shape.last_mut().unwrap() = out_dim;

    let mut parents = vec![x.id, w.id];
    if let Some((bb, _)) = &bv {
        parents.push(bb.id);
    }
    let has_bias = bv.is_some();
    let xv_c = xv.clone();
    let wv_c = wv.clone();
    Ok(x.tape().push(
        Tensor::new(out_shape, out),
        parents,
        Some(Box::new(move |g| {
            let gd = g.data();
            let xd = xv_c.data();
            let wd = wv_c.data();
            // dx = g W
            let mut dx = vec![T::zero(); rows * in_dim];
            let dx_row = |chunk: &mut [T], r: usize| {
                for (i, slot) in chunk.iter_mut().enumerate() {
                    let mut acc = T::zero();
                    for o in 0..out_dim {
                        acc += gd[r * out_dim + o] * wd[o * in_dim + i];
                    }
                    *slot = acc;
                }
            };
            if rows * in_dim >= PAR_THRESHOLD {
                dx.par_chunks_mut(in_dim)
                    .enumerate()
                    .for_each(|(r, chunk)| dx_row(chunk, r));
            } else {
                for (r, chunk) in dx.chunks_mut(in_dim).enumerate() {
                    dx_row(chunk, r);
                }
            }
            // dw[o, i] = sum_r g[r, o] x[r, i]
            let mut dw = vec![T::zero(); out_dim * in_dim];
            let dw_row = |chunk: &mut [T], o: usize| {
                for (i, slot) in chunk.iter_mut().enumerate() {
                    let mut acc = T::zero();
                    for r in 0..rows {
                        acc += gd[r * out_dim + o] * xd[r * in_dim + i];
                    }
                    *slot = acc;
                }
            };
            if out_dim * in_dim >= PAR_THRESHOLD {
                dw.par_chunks_mut(in_dim)
                    .enumerate()
                    .for_each(|(o, chunk)| dw_row(chunk, o));
            } else {
                for (o, chunk) in dw.chunks_mut(in_dim).enumerate() {
                    dw_row(chunk, o);
                }
            }
            let mut grads = vec![
                Tensor::new(xv_c.shape().to_vec(), dx),
                Tensor::new(vec![out_dim, in_dim], dw),
            ];
            if has_bias {
                let mut db = vec![T::zero(); out_dim];
                for r in 0..rows {
                    for (o, slot) in db.iter_mut().enumerate() {
                        *slot += gd[r * out_dim + o];
                    }
                }
                grads.push(Tensor::new(vec![out_dim], db));
            }
            grads
        })),
        None,
    ))
}

/// 2-D convolution over NCHW input with grouped channels.
pub fn conv2d<'t, T: Scalar>(
    x: Var<'t, T>,
    w: Var<'t, T>,
    b: Option<Var<'t, T>>,
    stride: usize,
    pad: usize,
    groups: usize,
) -> Result<Var<'t, T>, TensorError> {
    let xv = x.value();
    let wv = w.value();
    let xsh = xv.shape().to_vec();
    let wsh = wv.shape().to_vec();
    if xsh.len() != 4 || wsh.len() != 4 {
        return shape_err("conv2d", &xsh, &wsh);
    }
    let (bsz, cin, h, wdt) = (xsh[0], xsh[1], xsh[2], xsh[3]);
    let (cout, cin_g, kh, kw) = (wsh[0], wsh[1], wsh[2], wsh[3]);
    if cin % groups != 0 || cout % groups != 0 || cin / groups != cin_g {
        return shape_err("conv2d", &xsh, &wsh);
    }
    if h + 2 * pad < kh || wdt + 2 * pad < kw {
        return shape_err("conv2d", &xsh, &wsh);
    }
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wdt + 2 * pad - kw) / stride + 1;
    let cout_g = cout / groups;
    if let Some(bb) = &b {
        if bb.value().shape() != [cout] {
            return shape_err("conv2d", bb.value().shape(), &[cout]);
        }
    }
    let bv = b.map(|bb| (bb, bb.value()));
    let bias_data: Option<Vec<T>> = bv.as_ref().map(|(_, bt)| bt.data().to_vec());

    let xd = xv.data();
    let wd = wv.data();
    let mut out = vec![T::zero(); bsz * cout * oh * ow];
    let fill = |plane: &mut [T], idx: usize| {
        let (bi, co) = (idx / cout, idx % cout);
        let gi = co / cout_g;
        let ci_base = gi * cin_g;
        let bias = match &bias_data {
            Some(bd) => bd[co],
            None => T::zero(),
        };
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = bias;
                for ci in 0..cin_g {
                    let x_ch = (bi * cin + ci_base + ci) * h * wdt;
                    let w_ch = (co * cin_g + ci) * kh * kw;
                    for ky in 0..kh {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..kw {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= wdt as isize {
                                continue;
                            }
                            acc += xd[x_ch + iy as usize * wdt + ix as usize]
                                * wd[w_ch + ky * kw + kx];
                        }
                    }
                }
                plane[oy * ow + ox] = acc;
            }
        }
    };
    if bsz * cout * oh * ow >= PAR_THRESHOLD {
        out.par_chunks_mut(oh * ow)
            .enumerate()
            .for_each(|(idx, plane)| fill(plane, idx));
    } else {
        for (idx, plane) in out.chunks_mut(oh * ow).enumerate() {
            fill(plane, idx);
        }
    }

    let mut parents = vec![x.id, w.id];
    if let Some((bb, _)) = &bv {
        parents.push(bb.id);
    }
    let has_bias = bv.is_some();
    let xv_c = xv.clone();
    let wv_c = wv.clone();
    Ok(x.tape().push(
        Tensor::new(vec![bsz, cout, oh, ow], out),
        parents,
        Some(Box::new(move |g| {
            let gd = g.data();
            let xd = xv_c.data();
            let wd = wv_c.data();

            // dx: scatter every output grad through the kernel, per batch item
            let mut dx = vec![T::zero(); bsz * cin * h * wdt];
            let dx_batch = |chunk: &mut [T], bi: usize| {
                for co in 0..cout {
                    let gi = co / cout_g;
                    let ci_base = gi * cin_g;
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let gv = gd[((bi * cout + co) * oh + oy) * ow + ox];
                            if gv == T::zero() {
                                continue;
                            }
                            for ci in 0..cin_g {
                                let w_ch = (co * cin_g + ci) * kh * kw;
                                for ky in 0..kh {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    if iy < 0 || iy >= h as isize {
                                        continue;
                                    }
                                    for kx in 0..kw {
                                        let ix = (ox * stride + kx) as isize - pad as isize;
                                        if ix < 0 || ix >= wdt as isize {
                                            continue;
                                        }
                                        chunk[((ci_base + ci) * h + iy as usize) * wdt
                                            + ix as usize] += gv * wd[w_ch + ky * kw + kx];
                                    }
                                }
                            }
                        }
                    }
                }
            };
            if bsz * cin * h * wdt >= PAR_THRESHOLD {
                dx.par_chunks_mut(cin * h * wdt)
                    .enumerate()
                    .for_each(|(bi, chunk)| dx_batch(chunk, bi));
            } else {
                for (bi, chunk) in dx.chunks_mut(cin * h * wdt).enumerate() {
                    dx_batch(chunk, bi);
                }
            }

            // dw: correlate input with the output grad, per output channel
            let mut dw = vec![T::zero(); cout * cin_g * kh * kw];
            let dw_chan = |chunk: &mut [T], co: usize| {
                let gi = co / cout_g;
                let ci_base = gi * cin_g;
                for ci in 0..cin_g {
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let mut acc = T::zero();
                            for bi in 0..bsz {
                                let x_ch = (bi * cin + ci_base + ci) * h * wdt;
                                for oy in 0..oh {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    if iy < 0 || iy >= h as isize {
                                        continue;
                                    }
                                    for ox in 0..ow {
                                        let ix = (ox * stride + kx) as isize - pad as isize;
                                        if ix < 0 || ix >= wdt as isize {
                                            continue;
                                        }
                                        acc += gd[((bi * cout + co) * oh + oy) * ow + ox]
                                            * xd[x_ch + iy as usize * wdt + ix as usize];
                                    }
                                }
                            }
                            chunk[(ci * kh + ky) * kw + kx] = acc;
                        }
                    }
                }
            };
            if cout * cin_g * kh * kw >= PAR_THRESHOLD {
                dw.par_chunks_mut(cin_g * kh * kw)
                    .enumerate()
                    .for_each(|(co, chunk)| dw_chan(chunk, co));
            } else {
                for (co, chunk) in dw.chunks_mut(cin_g * kh * kw).enumerate() {
                    dw_chan(chunk, co);
                }
            }

            let mut grads = vec![
                Tensor::new(vec![bsz, cin, h, wdt], dx),
                Tensor::new(vec![cout, cin_g, kh, kw], dw),
            ];
            if has_bias {
                let mut db = vec![T::zero(); cout];
                for bi in 0..bsz {
                    for (co, slot) in db.iter_mut().enumerate() {
                        let off = ((bi * cout + co) * oh) * ow;
                        for v in &gd[off..off + oh * ow] {
                            *slot += *v;
                        }
                    }
                }
                grads.push(Tensor::new(vec![cout], db));
            }
            grads
        })),
        None,
    ))
}

/// Global average pool: [B, C, H, W] -> [B, C].
pub fn global_avg_pool<T: Scalar>(x: Var<'_, T>) -> Result<Var<'_, T>, TensorError> {
    let xv = x.value();
    let sh = xv.shape().to_vec();
    if sh.len() != 4 {
        return shape_err("global_avg_pool", &sh, &[4]);
    }
    let (b, c, h, w) = (sh[0], sh[1], sh[2], sh[3]);
    let n = T::of_f64((h * w) as f64);
    let xd = xv.data();
    let mut out = vec![T::zero(); b * c];
    for (i, slot) in out.iter_mut().enumerate() {
        let off = i * h * w;
        let mut acc = T::zero();
        for v in &xd[off..off + h * w] {
            acc += *v;
        }
        *slot = acc / n;
    }
    Ok(x.tape().push(
        Tensor::new(vec![b, c], out),
        vec![x.id],
        Some(Box::new(move |g| {
            let gd = g.data();
            let mut dx = vec![T::zero(); b * c * h * w];
            for (i, gv) in gd.iter().enumerate() {
                let share = *gv / n;
                for slot in &mut dx[i * h * w..(i + 1) * h * w] {
                    *slot = share;
                }
            }
            vec![Tensor::new(vec![b, c, h, w], dx)]
        })),
        None,
    ))
}

/// Layer normalization over the last axis with affine parameters.
pub fn layernorm<'t, T: Scalar>(
    x: Var<'t, T>,
    gamma: Var<'t, T>,
    beta: Var<'t, T>,
    eps: f64,
) -> Result<Var<'t, T>, TensorError> {
    let xv = x.value();
    let sh = xv.shape().to_vec();
    let d = *sh.last().ok_or(TensorError::Invalid {
        op: "layernorm",
        message: "0-d input".into(),
    })?;
    if gamma.value().shape() != [d] || beta.value().shape() != [d] {
        return shape_err("layernorm", &sh, gamma.value().shape());
    }
    let rows = xv.len() / d;
    let epsv = T::of_f64(eps);
    let dn = T::of_f64(d as f64);

    let xd = xv.data();
    let gv = gamma.value();
    let bv = beta.value();
    let mut out = vec![T::zero(); xv.len()];
    let mut xhat = vec![T::zero(); xv.len()];
    let mut inv_std = vec![T::zero(); rows];
    for r in 0..rows {
        let off = r * d;
        let mut mean = T::zero();
        for v in &xd[off..off + d] {
            mean += *v;
        }
        mean /= dn;
        let mut var = T::zero();
        for v in &xd[off..off + d] {
            let dv = *v - mean;
            var += dv * dv;
        }
        var /= dn;
        let inv = T::one() / (var + epsv).sqrt();
        inv_std[r] = inv;
        for j in 0..d {
            let xh = (xd[off + j] - mean) * inv;
            xhat[off + j] = xh;
            out[off + j] = xh * gv.data()[j] + bv.data()[j];
        }
    }

    let xhat_t = Tensor::new(sh.clone(), xhat);
    let gv_c = gv.clone();
    Ok(x.tape().push(
        Tensor::new(sh.clone(), out),
        vec![x.id, gamma.id, beta.id],
        Some(Box::new(move |g| {
            let gd = g.data();
            let xh = xhat_t.data();
            let gam = gv_c.data();
            let mut dx = vec![T::zero(); gd.len()];
            let mut dgamma = vec![T::zero(); d];
            let mut dbeta = vec![T::zero(); d];
            for r in 0..rows {
                let off = r * d;
                let inv = inv_std[r];
                let mut sum_dxhat = T::zero();
                let mut sum_dxhat_xhat = T::zero();
                for j in 0..d {
                    let dxhat = gd[off + j] * gam[j];
                    sum_dxhat += dxhat;
                    sum_dxhat_xhat += dxhat * xh[off + j];
                    dgamma[j] += gd[off + j] * xh[off + j];
                    dbeta[j] += gd[off + j];
                }
                for j in 0..d {
                    let dxhat = gd[off + j] * gam[j];
                    dx[off + j] =
                        inv / dn * (dn * dxhat - sum_dxhat - xh[off + j] * sum_dxhat_xhat);
                }
            }
            vec![
                Tensor::new(sh.clone(), dx),
                Tensor::new(vec![d], dgamma),
                Tensor::new(vec![d], dbeta),
            ]
        })),
        None,
    ))
}

/// Batch normalization over NCHW input.
///
/// In training mode the batch statistics are used and the running buffers are
/// updated in place; in eval mode the running statistics are read and the op
/// is a per-channel affine map.
#[allow(clippy::too_many_arguments)]
pub fn batchnorm2d<'t, T: Scalar>(
    x: Var<'t, T>,
    gamma: Var<'t, T>,
    beta: Var<'t, T>,
    running_mean: &super::param::Parameter<T>,
    running_var: &super::param::Parameter<T>,
    momentum: f64,
    eps: f64,
    train: bool,
) -> Result<Var<'t, T>, TensorError> {
    let xv = x.value();
    let sh = xv.shape().to_vec();
    if sh.len() != 4 {
        return shape_err("batchnorm2d", &sh, &[4]);
    }
    let (b, c, h, w) = (sh[0], sh[1], sh[2], sh[3]);
    if gamma.value().shape() != [c] || beta.value().shape() != [c] {
        return shape_err("batchnorm2d", &sh, gamma.value().shape());
    }
    let n = b * h * w;
    let nt = T::of_f64(n as f64);
    let epsv = T::of_f64(eps);
    let xd = xv.data();
    let gv = gamma.value();
    let bv = beta.value();

    let (mean, var) = if train {
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        for ci in 0..c {
            let mut acc = T::zero();
            for bi in 0..b {
                let off = (bi * c + ci) * h * w;
                for v in &xd[off..off + h * w] {
                    acc += *v;
                }
            }
            mean[ci] = acc / nt;
            let mut acc2 = T::zero();
            for bi in 0..b {
                let off = (bi * c + ci) * h * w;
                for v in &xd[off..off + h * w] {
                    let d = *v - mean[ci];
                    acc2 += d * d;
                }
            }
            var[ci] = acc2 / nt;
        }
        // update running stats (unbiased variance, matching common practice)
        let m = T::of_f64(momentum);
        let one_m = T::one() - m;
        let unbias = if n > 1 {
            T::of_f64(n as f64 / (n as f64 - 1.0))
        } else {
            T::one()
        };
        let rm = running_mean.value();
        let rv = running_var.value();
        let new_rm: Vec<T> = rm
            .data()
            .iter()
            .zip(&mean)
            .map(|(&old, &bm)| one_m * old + m * bm)
            .collect();
        let new_rv: Vec<T> = rv
            .data()
            .iter()
            .zip(&var)
            .map(|(&old, &bvr)| one_m * old + m * bvr * unbias)
            .collect();
        running_mean.set_value(Tensor::new(vec![c], new_rm));
        running_var.set_value(Tensor::new(vec![c], new_rv));
        (mean, var)
    } else {
        (
            running_mean.value().data().to_vec(),
            running_var.value().data().to_vec(),
        )
    };

    let inv: Vec<T> = var.iter().map(|&v| T::one() / (v + epsv).sqrt()).collect();
    let mut out = vec![T::zero(); xv.len()];
    let mut xhat = vec![T::zero(); xv.len()];
    for bi in 0..b {
        for ci in 0..c {
            let off = (bi * c + ci) * h * w;
            let (mu, iv) = (mean[ci], inv[ci]);
            let (ga, be) = (gv.data()[ci], bv.data()[ci]);
            for i in 0..h * w {
                let xh = (xd[off + i] - mu) * iv;
                xhat[off + i] = xh;
                out[off + i] = xh * ga + be;
            }
        }
    }

    let xhat_t = Tensor::new(sh.clone(), xhat);
    let gv_c = gv.clone();
    let inv_c = inv.clone();
    Ok(x.tape().push(
        Tensor::new(sh.clone(), out),
        vec![x.id, gamma.id, beta.id],
        Some(Box::new(move |g| {
            let gd = g.data();
            let xh = xhat_t.data();
            let gam = gv_c.data();
            let mut dgamma = vec![T::zero(); c];
            let mut dbeta = vec![T::zero(); c];
            for bi in 0..b {
                for ci in 0..c {
                    let off = (bi * c + ci) * h * w;
                    for i in 0..h * w {
                        dgamma[ci] += gd[off + i] * xh[off + i];
                        dbeta[ci] += gd[off + i];
                    }
                }
            }
            let mut dx = vec![T::zero(); gd.len()];
            if train {
                for ci in 0..c {
                    let iv = inv_c[ci];
                    let ga = gam[ci];
                    let sum_g = dbeta[ci];
                    let sum_gx = dgamma[ci];
                    for bi in 0..b {
                        let off = (bi * c + ci) * h * w;
                        for i in 0..h * w {
                            dx[off + i] = ga * iv / nt
                                * (nt * gd[off + i] - sum_g - xh[off + i] * sum_gx);
                        }
                    }
                }
            } else {
                for ci in 0..c {
                    let scale = gam[ci] * inv_c[ci];
                    for bi in 0..b {
                        let off = (bi * c + ci) * h * w;
                        for i in 0..h * w {
                            dx[off + i] = gd[off + i] * scale;
                        }
                    }
                }
            }
            vec![
                Tensor::new(sh.clone(), dx),
                Tensor::new(vec![c], dgamma),
                Tensor::new(vec![c], dbeta),
            ]
        })),
        None,
    ))
}

/// Inverted dropout. Identity when not training.
pub fn dropout<'t, T: Scalar>(
    x: Var<'t, T>,
    p: f64,
    train: bool,
    rng: &mut ChaCha8Rng,
) -> Var<'t, T> {
    if !train || p == 0.0 {
        return x;
    }
    let keep = 1.0 - p;
    let scale = T::of_f64(1.0 / keep);
    let xv = x.value();
    let mask: Vec<T> = (0..xv.len())
        .map(|_| {
            if rng.random_range(0.0..1.0) < keep {
                scale
            } else {
                T::zero()
            }
        })
        .collect();
    let mask_t = Tensor::new(xv.shape().to_vec(), mask);
    let out = xv.zip_map(&mask_t, |a, m| a * m);
    let mask_c = mask_t.clone();
    x.tape().push(
        out,
        vec![x.id],
        Some(Box::new(move |g| {
            vec![g.zip_map(&mask_c, |gv, m| gv * m)]
        })),
        None,
    )
}

/// Rearranges [B, C, S, S] into per-patch rows [B, P, C*p*p].
pub fn patchify<T: Scalar>(x: Var<'_, T>, patch: usize) -> Result<Var<'_, T>, TensorError> {
    let xv = x.value();
    let sh = xv.shape().to_vec();
    if sh.len() != 4 || sh[2] != sh[3] || sh[2] % patch != 0 {
        return shape_err("patchify", &sh, &[patch]);
    }
    let (b, c, s) = (sh[0], sh[1], sh[2]);
    let grid = s / patch;
    let p_count = grid * grid;
    let p_dim = c * patch * patch;
    let xd = xv.data();
    let mut out = vec![T::zero(); b * p_count * p_dim];
    for bi in 0..b {
        for gy in 0..grid {
            for gx in 0..grid {
                let pi = gy * grid + gx;
                for ci in 0..c {
                    for dy in 0..patch {
                        for dx in 0..patch {
                            let src = ((bi * c + ci) * s + gy * patch + dy) * s + gx * patch + dx;
                            let dst = (bi * p_count + pi) * p_dim + (ci * patch + dy) * patch + dx;
                            out[dst] = xd[src];
                        }
                    }
                }
            }
        }
    }
    Ok(x.tape().push(
        Tensor::new(vec![b, p_count, p_dim], out),
        vec![x.id],
        Some(Box::new(move |g| {
            let gd = g.data();
            let mut dx = vec![T::zero(); b * c * s * s];
            for bi in 0..b {
                for gy in 0..grid {
                    for gx in 0..grid {
                        let pi = gy * grid + gx;
                        for ci in 0..c {
                            for dy in 0..patch {
                                for dx_ in 0..patch {
                                    let src = ((bi * c + ci) * s + gy * patch + dy) * s
                                        + gx * patch
                                        + dx_;
                                    let dst = (bi * p_count + pi) * p_dim
                                        + (ci * patch + dy) * patch
                                        + dx_;
                                    dx[src] = gd[dst];
                                }
                            }
                        }
                    }
                }
            }
            vec![Tensor::new(vec![b, c, s, s], dx)]
        })),
        None,
    ))
}

/// Scaled dot-product attention with `heads` heads.
///
/// Inputs are already-projected sequences: q [B, Nq, D], k/v [B, Nk, D].
/// Built from recorded primitives, so its gradient needs no bespoke code.
pub fn scaled_dot_attention<'t, T: Scalar>(
    q: Var<'t, T>,
    k: Var<'t, T>,
    v: Var<'t, T>,
    heads: usize,
) -> Result<Var<'t, T>, TensorError> {
    let qs = q.value().shape().to_vec();
    let ks = k.value().shape().to_vec();
    let vs = v.value().shape().to_vec();
    if qs.len() != 3 || ks.len() != 3 || vs.len() != 3 || ks != vs || qs[0] != ks[0] {
        return shape_err("attention", &qs, &ks);
    }
    let d = qs[2];
    if d != ks[2] {
        return shape_err("attention", &qs, &ks);
    }
    if d % heads != 0 {
        return Err(TensorError::HeadsMismatch {
            op: "attention",
            heads,
            dim: d,
        });
    }
    let (b, nq, nk) = (qs[0], qs[1], ks[1]);
    let dh = d / heads;

    // [B, N, D] -> [B, h, N, dh]
    let split = |t: Var<'t, T>, n: usize| -> Result<Var<'t, T>, TensorError> {
        t.reshape(vec![b, n, heads, dh])?.permute(vec![0, 2, 1, 3])
    };
    let qh = split(q, nq)?;
    let kh = split(k, nk)?;
    let vh = split(v, nk)?;

    let kt = kh.permute(vec![0, 1, 3, 2])?; // [B, h, dh, Nk]
    let scale = T::of_f64(1.0 / (dh as f64).sqrt());
    let scores = qh.matmul(kt)?.scale(scale); // [B, h, Nq, Nk]
    let attn = scores.softmax(3)?;
    let ctx = attn.matmul(vh)?; // [B, h, Nq, dh]
    ctx.permute(vec![0, 2, 1, 3])?.reshape(vec![b, nq, d])
}

/// Mean softmax cross-entropy over a batch of logits.
pub fn cross_entropy_logits<'t, T: Scalar>(
    logits: Var<'t, T>,
    labels: &[usize],
) -> Result<Var<'t, T>, TensorError> {
    let lv = logits.value();
    let sh = lv.shape().to_vec();
    if sh.len() != 2 || sh[0] != labels.len() {
        return shape_err("cross_entropy", &sh, &[labels.len()]);
    }
    let (b, c) = (sh[0], sh[1]);
    for &l in labels {
        if l >= c {
            return Err(TensorError::Invalid {
                op: "cross_entropy",
                message: format!("label {l} out of range for {c} classes"),
            });
        }
    }
    let ld = lv.data();
    let mut probs = vec![T::zero(); b * c];
    let mut loss = T::zero();
    for r in 0..b {
        let off = r * c;
        let mut mx = ld[off];
        for j in 1..c {
            mx = mx.max(ld[off + j]);
        }
        let mut sum = T::zero();
        for j in 0..c {
            let e = (ld[off + j] - mx).exp();
            probs[off + j] = e;
            sum += e;
        }
        for j in 0..c {
            probs[off + j] /= sum;
        }
        loss += sum.ln() - (ld[off + labels[r]] - mx);
    }
    loss /= T::of_f64(b as f64);

    let probs_t = Tensor::new(vec![b, c], probs);
    let labels_c = labels.to_vec();
    Ok(logits.tape().push(
        Tensor::scalar(loss),
        vec![logits.id],
        Some(Box::new(move |g| {
            let scale = g.item() / T::of_f64(b as f64);
            let pd = probs_t.data();
            let mut dx = vec![T::zero(); b * c];
            for r in 0..b {
                for j in 0..c {
                    let onehot = if labels_c[r] == j { T::one() } else { T::zero() };
                    dx[r * c + j] = (pd[r * c + j] - onehot) * scale;
                }
            }
            vec![Tensor::new(vec![b, c], dx)]
        })),
        None,
    ))
}

/// Mean negative log-likelihood over probability rows (late-fusion loss).
pub fn nll_from_probs<'t, T: Scalar>(
    probs: Var<'t, T>,
    labels: &[usize],
) -> Result<Var<'t, T>, TensorError> {
    let pv = probs.value();
    let sh = pv.shape().to_vec();
    if sh.len() != 2 || sh[0] != labels.len() {
        return shape_err("nll", &sh, &[labels.len()]);
    }
    let (b, c) = (sh[0], sh[1]);
    let floor = T::of_f64(1e-12);
    let pd = pv.data();
    let mut loss = T::zero();
    for r in 0..b {
        loss -= pd[r * c + labels[r]].max(floor).ln();
    }
    loss /= T::of_f64(b as f64);
    let labels_c = labels.to_vec();
    Ok(probs.tape().push(
        Tensor::scalar(loss),
        vec![probs.id],
        Some(Box::new(move |g| {
            let scale = g.item() / T::of_f64(b as f64);
            let mut dx = vec![T::zero(); b * c];
            for r in 0..b {
                let p = pd_at(&pv, r * c + labels_c[r]).max(floor);
                dx[r * c + labels_c[r]] = -scale / p;
            }
            vec![Tensor::new(vec![b, c], dx)]
        })),
        None,
    ))
}

fn pd_at<T: Scalar>(t: &Tensor<T>, i: usize) -> T {
    t.data()[i]
}
