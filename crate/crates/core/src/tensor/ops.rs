use super::{Element, Tensor4};
use crate::error::{shape_err, Result};

/// Per-axis taps of the fixed 4x4 bilinear transposed-convolution kernel.
pub const UPSAMPLE_TAPS: [f64; 4] = [0.25, 0.75, 0.75, 0.25];

/// Result of [`maxpool`]: pooled values plus, per output element, the
/// in-plane offset of the input element that produced it.
#[derive(Debug, Clone)]
pub struct MaxPoolOutput<T> {
    pub output: Tensor4<T>,
    pub argmax: Vec<u32>,
}

/// Non-overlapping `k`x`k` max pooling with stride `k`. Ties resolve to the
/// first maximal element in row-major order.
pub fn maxpool<T: Element>(input: &Tensor4<T>, k: usize) -> Result<MaxPoolOutput<T>> {
    let [n, c, h, w] = input.dims();
    if k == 0 || h % k != 0 || w % k != 0 {
        return Err(shape_err(
            "maxpool",
            format!("height {h} and width {w} must be divisible by {k}"),
        ));
    }
    let (oh, ow) = (h / k, w / k);
    let mut output = Tensor4::zeros([n, c, oh, ow]);
    let mut argmax = vec![0u32; n * c * oh * ow];
    let mut oi = 0;
    for b in 0..n {
        for ch in 0..c {
            let src = input.plane(b, ch);
            let dst = output.plane_mut(b, ch);
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best_off = oy * k * w + ox * k;
                    let mut best = src[best_off];
                    for dy in 0..k {
                        let row = (oy * k + dy) * w + ox * k;
                        for dx in 0..k {
                            let v = src[row + dx];
                            if v > best {
                                best = v;
                                best_off = row + dx;
                            }
                        }
                    }
                    dst[oy * ow + ox] = best;
                    argmax[oi] = best_off as u32;
                    oi += 1;
                }
            }
        }
    }
    Ok(MaxPoolOutput { output, argmax })
}

/// The values of [`maxpool`] without the argmax bookkeeping, for inference.
pub fn maxpool_values<T: Element>(input: &Tensor4<T>, k: usize) -> Result<Tensor4<T>> {
    let [n, c, h, w] = input.dims();
    if k == 0 || h % k != 0 || w % k != 0 {
        return Err(shape_err(
            "maxpool",
            format!("height {h} and width {w} must be divisible by {k}"),
        ));
    }
    let (oh, ow) = (h / k, w / k);
    let mut output = Tensor4::zeros([n, c, oh, ow]);
    for b in 0..n {
        for ch in 0..c {
            let src = input.plane(b, ch);
            let dst = output.plane_mut(b, ch);
            for (d, rows) in dst.chunks_exact_mut(ow).zip(src.chunks_exact(k * w)) {
                // same visiting order and strict comparison as `maxpool`
                for (ox, o) in d.iter_mut().enumerate() {
                    *o = rows[ox * k];
                }
                for dy in 0..k {
                    let row = &rows[dy * w..(dy + 1) * w];
                    for dx in usize::from(dy == 0)..k {
                        for (o, win) in d.iter_mut().zip(row.chunks_exact(k)) {
                            if win[dx] > *o {
                                *o = win[dx];
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(output)
}

/// Routes each pooled gradient to the recorded argmax element.
pub fn maxpool_backward<T: Element>(
    input_dims: [usize; 4],
    argmax: &[u32],
    grad_out: &Tensor4<T>,
) -> Result<Tensor4<T>> {
    if argmax.len() != grad_out.len() {
        return Err(shape_err(
            "maxpool_backward",
            format!("{} argmax entries for {} gradients", argmax.len(), grad_out.len()),
        ));
    }
    let [n, c, _, _] = input_dims;
    let mut gin = Tensor4::zeros(input_dims);
    let opl = grad_out.plane_len();
    for b in 0..n {
        for ch in 0..c {
            let g = grad_out.plane(b, ch);
            let base = (b * c + ch) * opl;
            let dst = gin.plane_mut(b, ch);
            for (j, &gv) in g.iter().enumerate() {
                dst[argmax[base + j] as usize] += gv;
            }
        }
    }
    Ok(gin)
}

/// Taps of one output coordinate along one axis: `(input index, weight)`
/// pairs of the stride-2, padding-1, 4-tap transposed convolution.
#[inline]
fn up_taps(o: usize, len: usize) -> [(usize, f64, bool); 2] {
    let m = o / 2;
    if o % 2 == 0 {
        // out[2m] = 0.75 in[m] + 0.25 in[m-1]
        [(m, UPSAMPLE_TAPS[1], true), (m.wrapping_sub(1), UPSAMPLE_TAPS[3], m >= 1)]
    } else {
        // out[2m+1] = 0.75 in[m] + 0.25 in[m+1]
        [(m, UPSAMPLE_TAPS[2], true), (m + 1, UPSAMPLE_TAPS[0], m + 1 < len)]
    }
}

/// 2x upsampling by a per-channel transposed convolution with the fixed
/// bilinear kernel `f(i)·f(j)`, `f = (0.25, 0.75, 0.75, 0.25)`, stride 2,
/// padding 1. Carries no learnable parameters.
pub fn upsample2x<T: Element>(input: &Tensor4<T>) -> Tensor4<T> {
    let [n, c, h, w] = input.dims();
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = Tensor4::zeros([n, c, oh, ow]);
    let mut rows = vec![T::zero(); h * ow];
    for b in 0..n {
        for ch in 0..c {
            let src = input.plane(b, ch);
            // horizontal pass
            for y in 0..h {
                let s = &src[y * w..(y + 1) * w];
                let d = &mut rows[y * ow..(y + 1) * ow];
                for (ox, dv) in d.iter_mut().enumerate() {
                    let mut acc = T::zero();
                    for (ix, f, ok) in up_taps(ox, w) {
                        if ok {
                            acc += T::from_f64(f) * s[ix];
                        }
                    }
                    *dv = acc;
                }
            }
            // vertical pass
            let dst = out.plane_mut(b, ch);
            for oy in 0..oh {
                let d = &mut dst[oy * ow..(oy + 1) * ow];
                for (iy, f, ok) in up_taps(oy, h) {
                    if ok {
                        let fv = T::from_f64(f);
                        for (dv, &r) in d.iter_mut().zip(&rows[iy * ow..(iy + 1) * ow]) {
                            *dv += fv * r;
                        }
                    }
                }
            }
        }
    }
    out
}

/// Adjoint of [`upsample2x`].
pub fn upsample2x_backward<T: Element>(grad_out: &Tensor4<T>) -> Result<Tensor4<T>> {
    let [n, c, oh, ow] = grad_out.dims();
    if oh % 2 != 0 || ow % 2 != 0 {
        return Err(shape_err(
            "upsample2x_backward",
            format!("gradient dims {oh}x{ow} are not even"),
        ));
    }
    let (h, w) = (oh / 2, ow / 2);
    let mut gin = Tensor4::zeros([n, c, h, w]);
    let mut rows = vec![T::zero(); h * ow];
    for b in 0..n {
        for ch in 0..c {
            let g = grad_out.plane(b, ch);
            rows.iter_mut().for_each(|v| *v = T::zero());
            // adjoint of the vertical pass
            for oy in 0..oh {
                let s = &g[oy * ow..(oy + 1) * ow];
                for (iy, f, ok) in up_taps(oy, h) {
                    if ok {
                        let fv = T::from_f64(f);
                        for (r, &gv) in rows[iy * ow..(iy + 1) * ow].iter_mut().zip(s) {
                            *r += fv * gv;
                        }
                    }
                }
            }
            // adjoint of the horizontal pass
            let dst = gin.plane_mut(b, ch);
            for y in 0..h {
                let r = &rows[y * ow..(y + 1) * ow];
                let d = &mut dst[y * w..(y + 1) * w];
                for (ox, &rv) in r.iter().enumerate() {
                    for (ix, f, ok) in up_taps(ox, w) {
                        if ok {
                            d[ix] += T::from_f64(f) * rv;
                        }
                    }
                }
            }
        }
    }
    Ok(gin)
}

/// Channel concatenation: channels of `a` first, then those of `b`.
pub fn concat_channels<T: Element>(a: &Tensor4<T>, b: &Tensor4<T>) -> Result<Tensor4<T>> {
    let [na, ca, ha, wa] = a.dims();
    let [nb, cb, hb, wb] = b.dims();
    if na != nb || ha != hb || wa != wb {
        return Err(shape_err(
            "concat_channels",
            format!("batch/spatial dims differ: {:?} vs {:?}", a.dims(), b.dims()),
        ));
    }
    let plane = ha * wa;
    let mut data = Vec::with_capacity(na * (ca + cb) * plane);
    for n in 0..na {
        data.extend_from_slice(&a.data()[n * ca * plane..(n + 1) * ca * plane]);
        data.extend_from_slice(&b.data()[n * cb * plane..(n + 1) * cb * plane]);
    }
    Tensor4::from_vec([na, ca + cb, ha, wa], data)
}

/// Inverse of [`concat_channels`]: splits off the first `ca` channels.
pub fn split_channels<T: Element>(t: &Tensor4<T>, ca: usize) -> Result<(Tensor4<T>, Tensor4<T>)> {
    let [n, c, h, w] = t.dims();
    if ca > c {
        return Err(shape_err(
            "split_channels",
            format!("cannot split {ca} channels from {c}"),
        ));
    }
    let cb = c - ca;
    let plane = h * w;
    let mut a = Vec::with_capacity(n * ca * plane);
    let mut b = Vec::with_capacity(n * cb * plane);
    for nn in 0..n {
        let base = nn * c * plane;
        a.extend_from_slice(&t.data()[base..base + ca * plane]);
        b.extend_from_slice(&t.data()[base + ca * plane..base + c * plane]);
    }
    Ok((
        Tensor4::from_vec([n, ca, h, w], a)?,
        Tensor4::from_vec([n, cb, h, w], b)?,
    ))
}

pub fn relu<T: Element>(input: &Tensor4<T>) -> Tensor4<T> {
    input.map(|v| if v > T::zero() { v } else { T::zero() })
}

#[inline]
pub(crate) fn sigmoid_scalar<T: Element>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

pub fn sigmoid<T: Element>(input: &Tensor4<T>) -> Tensor4<T> {
    input.map(sigmoid_scalar)
}

/// Zero-pads right and bottom so height and width become multiples of `m`.
/// Returns the padded tensor and the original `(height, width)`.
pub fn pad_to_multiple<T: Element>(input: &Tensor4<T>, m: usize) -> Result<(Tensor4<T>, (usize, usize))> {
    if m == 0 {
        return Err(shape_err("pad_to_multiple", "multiple must be at least 1"));
    }
    let [n, c, h, w] = input.dims();
    let (ph, pw) = (h.div_ceil(m) * m, w.div_ceil(m) * m);
    if (ph, pw) == (h, w) {
        return Ok((input.clone(), (h, w)));
    }
    let mut out = Tensor4::zeros([n, c, ph, pw]);
    for b in 0..n {
        for ch in 0..c {
            let s = input.plane(b, ch);
            let d = out.plane_mut(b, ch);
            for y in 0..h {
                d[y * pw..y * pw + w].copy_from_slice(&s[y * w..(y + 1) * w]);
            }
        }
    }
    Ok((out, (h, w)))
}

/// Keeps the top-left `h0`x`w0` window.
pub fn crop<T: Element>(input: &Tensor4<T>, h0: usize, w0: usize) -> Result<Tensor4<T>> {
    let [n, c, h, w] = input.dims();
    if h0 > h || w0 > w {
        return Err(shape_err(
            "crop",
            format!("target {h0}x{w0} exceeds {h}x{w}"),
        ));
    }
    if (h0, w0) == (h, w) {
        return Ok(input.clone());
    }
    let mut out = Tensor4::zeros([n, c, h0, w0]);
    for b in 0..n {
        for ch in 0..c {
            let s = input.plane(b, ch);
            let d = out.plane_mut(b, ch);
            for y in 0..h0 {
                d[y * w0..(y + 1) * w0].copy_from_slice(&s[y * w..y * w + w0]);
            }
        }
    }
    Ok(out)
}
