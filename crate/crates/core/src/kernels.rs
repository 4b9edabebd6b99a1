//! Forward and vector-Jacobian kernels on plain tensors.

use crate::error::{AefError, Result};
use crate::tensor::{broadcast_shape, broadcast_strides, for_each_offset, Tensor};

pub(crate) fn binary(op: &'static str, a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    if a.shape() == b.shape() {
        return a.zip_map(b, f);
    }
    let shape = broadcast_shape(op, a.shape(), b.shape())?;
    let sa = broadcast_strides(a.shape(), &shape);
    let sb = broadcast_strides(b.shape(), &shape);
    let (da, db) = (a.data(), b.data());
    let mut out = Tensor::zeros(shape.clone());
    let dst = out.data_mut();
    for_each_offset(&shape, [&sa, &sb], |flat, [oa, ob]| dst[flat] = f(da[oa], db[ob]));
    Ok(out)
}

/// Gather `t` broadcast to `shape` (materialized).
pub(crate) fn expand(t: &Tensor, shape: &[usize]) -> Tensor {
    if t.shape() == shape {
        return t.clone();
    }
    let s = broadcast_strides(t.shape(), shape);
    let src = t.data();
    let mut out = Tensor::zeros(shape.to_vec());
    let dst = out.data_mut();
    for_each_offset(shape, [&s], |flat, [o]| dst[flat] = src[o]);
    out
}

fn conv_dims(input: &[usize], weight: &[usize]) -> Result<(usize, usize, usize, usize, usize)> {
    if input.len() != 4 || weight.len() != 4 || weight[2] != 3 || weight[3] != 3 || weight[1] != input[1] {
        return Err(AefError::ShapeMismatch {
            op: "conv2d",
            lhs: input.to_vec(),
            rhs: weight.to_vec(),
        });
    }
    Ok((input[0], input[1], weight[0], input[2], input[3]))
}

/// `out += correlate(inp, k)` for one plane, 3×3 kernel, zero padding 1.
fn correlate_plane(out: &mut [f64], inp: &[f64], k: &[f64], h: usize, w: usize) {
    for ky in 0..3 {
        let (k0, k1, k2) = (k[ky * 3], k[ky * 3 + 1], k[ky * 3 + 2]);
        let y0 = usize::from(ky == 0);
        let y1 = if ky == 2 { h - 1 } else { h };
        for y in y0..y1 {
            let sy = y + ky - 1;
            let orow = &mut out[y * w..(y + 1) * w];
            let irow = &inp[sy * w..(sy + 1) * w];
            if w == 1 {
                orow[0] += k1 * irow[0];
                continue;
            }
            orow[0] += k1 * irow[0] + k2 * irow[1];
            orow[w - 1] += k0 * irow[w - 2] + k1 * irow[w - 1];
            for (o, ((a, b), c)) in orow[1..w - 1]
                .iter_mut()
                .zip(irow[..w - 2].iter().zip(&irow[1..w - 1]).zip(&irow[2..]))
            {
                *o += k0 * a + k1 * b + k2 * c;
            }
        }
    }
}

pub(crate) fn conv2d(input: &Tensor, weight: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    let (n, cin, cout, h, w) = conv_dims(input.shape(), weight.shape())?;
    if let Some(b) = bias {
        if b.shape() != [cout] {
            return Err(AefError::ShapeMismatch {
                op: "conv2d(bias)",
                lhs: weight.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
    }
    let hw = h * w;
    let mut out = Tensor::zeros([n, cout, h, w]);
    let (x, k) = (input.data(), weight.data());
    let dst = out.data_mut();
    for b in 0..n {
        for oc in 0..cout {
            let o = &mut dst[(b * cout + oc) * hw..][..hw];
            if let Some(bias) = bias {
                o.fill(bias.data()[oc]);
            }
            for ic in 0..cin {
                correlate_plane(o, &x[(b * cin + ic) * hw..][..hw], &k[(oc * cin + ic) * 9..][..9], h, w);
            }
        }
    }
    Ok(out)
}

pub(crate) fn conv2d_grad_input(gout: &Tensor, weight: &Tensor) -> Tensor {
    let s = gout.shape();
    let (n, cout, h, w) = (s[0], s[1], s[2], s[3]);
    let cin = weight.shape()[1];
    let hw = h * w;
    let mut gin = Tensor::zeros([n, cin, h, w]);
    let (g, k) = (gout.data(), weight.data());
    let dst = gin.data_mut();
    let mut flipped = [0.0; 9];
    for b in 0..n {
        for ic in 0..cin {
            let o = &mut dst[(b * cin + ic) * hw..][..hw];
            for oc in 0..cout {
                let kk = &k[(oc * cin + ic) * 9..][..9];
                for (i, f) in flipped.iter_mut().enumerate() {
                    *f = kk[8 - i];
                }
                correlate_plane(o, &g[(b * cout + oc) * hw..][..hw], &flipped, h, w);
            }
        }
    }
    gin
}

pub(crate) fn conv2d_grad_weight(gout: &Tensor, input: &Tensor) -> Tensor {
    let s = input.shape();
    let (n, cin, h, w) = (s[0], s[1], s[2], s[3]);
    let cout = gout.shape()[1];
    let hw = h * w;
    let mut gw = Tensor::zeros([cout, cin, 3, 3]);
    let (g, x) = (gout.data(), input.data());
    let dst = gw.data_mut();
    for b in 0..n {
        for oc in 0..cout {
            let gp = &g[(b * cout + oc) * hw..][..hw];
            for ic in 0..cin {
                let xp = &x[(b * cin + ic) * hw..][..hw];
                let kk = &mut dst[(oc * cin + ic) * 9..][..9];
                for ky in 0..3 {
                    let y0 = usize::from(ky == 0);
                    let y1 = if ky == 2 { h - 1 } else { h };
                    for kx in 0..3 {
                        let x0 = usize::from(kx == 0);
                        let x1 = if kx == 2 { w - 1 } else { w };
                        let mut acc = 0.0;
                        for y in y0..y1 {
                            let sy = y + ky - 1;
                            let grow = &gp[y * w + x0..y * w + x1];
                            let xrow = &xp[sy * w + x0 + kx - 1..sy * w + x1 + kx - 1];
                            acc += grow.iter().zip(xrow).map(|(a, b)| a * b).sum::<f64>();
                        }
                        kk[ky * 3 + kx] += acc;
                    }
                }
            }
        }
    }
    gw
}

pub(crate) fn conv2d_grad_bias(gout: &Tensor) -> Tensor {
    let s = gout.shape();
    let (n, cout, hw) = (s[0], s[1], s[2] * s[3]);
    let mut gb = Tensor::zeros([cout]);
    let g = gout.data();
    for b in 0..n {
        for oc in 0..cout {
            gb.data_mut()[oc] += g[(b * cout + oc) * hw..][..hw].iter().sum::<f64>();
        }
    }
    gb
}

/// Leading batch count and matrix dims of a 2-D or 3-D operand.
fn mat_dims(t: &[usize]) -> Option<(usize, usize, usize)> {
    match t {
        [m, k] => Some((1, *m, *k)),
        [b, m, k] => Some((*b, *m, *k)),
        _ => None,
    }
}

pub(crate) fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let err = || AefError::ShapeMismatch {
        op: "matmul",
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    };
    let (ba, m, k) = mat_dims(a.shape()).ok_or_else(err)?;
    let (bb, k2, n) = mat_dims(b.shape()).ok_or_else(err)?;
    if k != k2 || a.ndim() != b.ndim() || ba != bb {
        return Err(err());
    }
    let shape = if a.ndim() == 2 { vec![m, n] } else { vec![ba, m, n] };
    let mut out = Tensor::zeros(shape);
    let (da, db) = (a.data(), b.data());
    let dst = out.data_mut();
    for batch in 0..ba {
        let am = &da[batch * m * k..][..m * k];
        let bm = &db[batch * k * n..][..k * n];
        let om = &mut dst[batch * m * n..][..m * n];
        for i in 0..m {
            let orow = &mut om[i * n..(i + 1) * n];
            for p in 0..k {
                let av = am[i * k + p];
                for (o, &bv) in orow.iter_mut().zip(&bm[p * n..(p + 1) * n]) {
                    *o += av * bv;
                }
            }
        }
    }
    Ok(out)
}

/// Swap the last two axes.
pub(crate) fn transpose_last2(t: &Tensor) -> Result<Tensor> {
    let (b, m, n) = mat_dims(t.shape()).ok_or_else(|| AefError::InvalidShape {
        op: "transpose",
        msg: format!("expected 2-D or 3-D tensor, got {:?}", t.shape()),
    })?;
    let mut shape = t.shape().to_vec();
    let nd = shape.len();
    shape.swap(nd - 1, nd - 2);
    let mut out = Tensor::zeros(shape);
    let src = t.data();
    let dst = out.data_mut();
    for batch in 0..b {
        for i in 0..m {
            for j in 0..n {
                dst[batch * m * n + j * m + i] = src[batch * m * n + i * n + j];
            }
        }
    }
    Ok(out)
}

pub(crate) fn check_axes(op: &'static str, shape: &[usize], axes: &[usize]) -> Result<()> {
    for (i, &a) in axes.iter().enumerate() {
        if a >= shape.len() || axes[..i].contains(&a) {
            return Err(AefError::InvalidShape {
                op,
                msg: format!("bad axes {axes:?} for shape {shape:?}"),
            });
        }
    }
    Ok(())
}

/// Shape after reducing `axes` with `keepdim` semantics.
pub(crate) fn reduced_shape(shape: &[usize], axes: &[usize], keepdim: bool) -> Vec<usize> {
    shape
        .iter()
        .enumerate()
        .filter_map(|(i, &d)| match (axes.contains(&i), keepdim) {
            (true, true) => Some(1),
            (true, false) => None,
            (false, _) => Some(d),
        })
        .collect()
}

pub(crate) fn sum_axes(t: &Tensor, axes: &[usize], keepdim: bool) -> Tensor {
    let kept = reduced_shape(t.shape(), axes, true);
    let mut out = Tensor::zeros(kept.clone());
    let s = broadcast_strides(&kept, t.shape());
    let src = t.data();
    let dst = out.data_mut();
    for_each_offset(t.shape(), [&s], |flat, [o]| dst[o] += src[flat]);
    if keepdim {
        out
    } else {
        let shape = reduced_shape(t.shape(), axes, false);
        Tensor::new(shape, out.into_data()).expect("reduced shape")
    }
}

/// Split a shape into (outer, axis length, inner) around `axis`.
fn around(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) fn softmax(t: &Tensor, axis: usize) -> Tensor {
    let (outer, len, inner) = around(t.shape(), axis);
    let mut out = t.clone();
    let d = out.data_mut();
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| o * len * inner + j * inner + i;
            let max = (0..len).map(|j| d[at(j)]).fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for j in 0..len {
                let e = (d[at(j)] - max).exp();
                d[at(j)] = e;
                total += e;
            }
            for j in 0..len {
                d[at(j)] /= total;
            }
        }
    }
    out
}

pub(crate) fn softmax_grad(y: &Tensor, g: &Tensor, axis: usize) -> Tensor {
    let (outer, len, inner) = around(y.shape(), axis);
    let mut out = Tensor::zeros(y.shape().to_vec());
    let (yd, gd) = (y.data(), g.data());
    let d = out.data_mut();
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| o * len * inner + j * inner + i;
            let dot: f64 = (0..len).map(|j| yd[at(j)] * gd[at(j)]).sum();
            for j in 0..len {
                d[at(j)] = yd[at(j)] * (gd[at(j)] - dot);
            }
        }
    }
    out
}

fn spatial_dims(op: &'static str, t: &Tensor) -> Result<(usize, usize, usize)> {
    match t.shape() {
        [n, c, h, w] => Ok((n * c, *h, *w)),
        s => Err(AefError::InvalidShape {
            op,
            msg: format!("expected N×C×H×W, got {s:?}"),
        }),
    }
}

pub(crate) fn avg_pool2(t: &Tensor) -> Result<Tensor> {
    let (planes, h, w) = spatial_dims("avg_pool2", t)?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(AefError::InvalidShape {
            op: "avg_pool2",
            msg: format!("odd spatial size {h}×{w}"),
        });
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut shape = t.shape().to_vec();
    shape[2] = oh;
    shape[3] = ow;
    let mut out = Tensor::zeros(shape);
    let src = t.data();
    let dst = out.data_mut();
    for p in 0..planes {
        for y in 0..oh {
            for x in 0..ow {
                let base = p * h * w + 2 * y * w + 2 * x;
                dst[p * oh * ow + y * ow + x] = 0.25 * (src[base] + src[base + 1] + src[base + w] + src[base + w + 1]);
            }
        }
    }
    Ok(out)
}

pub(crate) fn avg_pool2_grad(g: &Tensor, in_shape: &[usize]) -> Tensor {
    let (h, w) = (in_shape[2], in_shape[3]);
    let (oh, ow) = (h / 2, w / 2);
    let planes = in_shape[0] * in_shape[1];
    let mut out = Tensor::zeros(in_shape.to_vec());
    let src = g.data();
    let dst = out.data_mut();
    for p in 0..planes {
        for y in 0..h {
            for x in 0..w {
                dst[p * h * w + y * w + x] = 0.25 * src[p * oh * ow + (y / 2) * ow + x / 2];
            }
        }
    }
    out
}

pub(crate) fn upsample2(t: &Tensor) -> Result<Tensor> {
    let (planes, h, w) = spatial_dims("upsample2", t)?;
    let (oh, ow) = (h * 2, w * 2);
    let mut shape = t.shape().to_vec();
    shape[2] = oh;
    shape[3] = ow;
    let mut out = Tensor::zeros(shape);
    let src = t.data();
    let dst = out.data_mut();
    for p in 0..planes {
        for y in 0..oh {
            for x in 0..ow {
                dst[p * oh * ow + y * ow + x] = src[p * h * w + (y / 2) * w + x / 2];
            }
        }
    }
    Ok(out)
}

pub(crate) fn upsample2_grad(g: &Tensor, in_shape: &[usize]) -> Tensor {
    let (h, w) = (in_shape[2], in_shape[3]);
    let (oh, ow) = (h * 2, w * 2);
    let planes = in_shape[0] * in_shape[1];
    let mut out = Tensor::zeros(in_shape.to_vec());
    let src = g.data();
    let dst = out.data_mut();
    for p in 0..planes {
        for y in 0..oh {
            for x in 0..ow {
                dst[p * h * w + (y / 2) * w + x / 2] += src[p * oh * ow + y * ow + x];
            }
        }
    }
    out
}

pub(crate) fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
    let first = parts.first().ok_or_else(|| AefError::InvalidShape {
        op: "concat",
        msg: "nothing to concatenate".into(),
    })?;
    if axis >= first.ndim() {
        return Err(AefError::InvalidShape {
            op: "concat",
            msg: format!("axis {axis} out of range for {:?}", first.shape()),
        });
    }
    let mut total = 0;
    for p in parts {
        let ok = p.ndim() == first.ndim()
            && p.shape().iter().zip(first.shape()).enumerate().all(|(i, (a, b))| i == axis || a == b);
        if !ok {
            return Err(AefError::ShapeMismatch {
                op: "concat",
                lhs: first.shape().to_vec(),
                rhs: p.shape().to_vec(),
            });
        }
        total += p.shape()[axis];
    }
    let mut shape = first.shape().to_vec();
    shape[axis] = total;
    let outer: usize = shape[..axis].iter().product();
    let mut data = Vec::with_capacity(shape.iter().product());
    for o in 0..outer {
        for p in parts {
            let chunk = p.shape()[axis..].iter().product::<usize>();
            data.extend_from_slice(&p.data()[o * chunk..(o + 1) * chunk]);
        }
    }
    Tensor::new(shape, data)
}

/// Inverse of [`concat`]: the slice of `g` belonging to each part.
pub(crate) fn split(g: &Tensor, sizes: &[usize], axis: usize) -> Vec<Tensor> {
    let shape = g.shape();
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let total = shape[axis];
    let mut start = 0;
    sizes
        .iter()
        .map(|&len| {
            let mut s = shape.to_vec();
            s[axis] = len;
            let mut data = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                let base = (o * total + start) * inner;
                data.extend_from_slice(&g.data()[base..base + len * inner]);
            }
            start += len;
            Tensor::new(s, data).expect("split shape")
        })
        .collect()
}
