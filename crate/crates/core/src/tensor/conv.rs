//! 3x3 (stride 1, zero padding 1) and 1x1 convolutions with their adjoints.
//!
//! The 3x3 kernel is a direct convolution over a zero-padded copy of the
//! input. Each micro-tile accumulates `OB` output channels over `XB`
//! consecutive columns in registers, so one load of an input row segment feeds
//! `OB` fused multiply-adds per lane.

use rayon::prelude::*;

use super::{Element, Tensor4};
use crate::error::{shape_err, Result};

/// Output channels per micro-tile.
const OB: usize = 4;
/// Lanes of the reproducible reductions.
const LANES: usize = 16;

/// Columns per micro-tile. Sixteen `f32` or eight `f64` lanes keep the
/// `OB` accumulator rows within the vector register file.
#[inline]
fn tile_width<T>() -> usize {
    if std::mem::size_of::<T>() >= 8 {
        8
    } else {
        16
    }
}

/// Gradients of a convolution with respect to its operands.
#[derive(Debug, Clone)]
pub struct ConvGrads<T> {
    pub input: Option<Tensor4<T>>,
    pub weight: Tensor4<T>,
    pub bias: Vec<T>,
}

#[inline]
fn round_up(v: usize, m: usize) -> usize {
    v.div_ceil(m) * m
}

fn check_conv_shapes<T: Element>(
    op: &'static str,
    input: &Tensor4<T>,
    weight: &Tensor4<T>,
    bias_len: usize,
    k: usize,
) -> Result<()> {
    let [cout, cin, kh, kw] = weight.dims();
    if kh != k || kw != k {
        return Err(shape_err(
            op,
            format!("kernel height/width must be {k}x{k}, got {kh}x{kw}"),
        ));
    }
    if input.channels() != cin {
        return Err(shape_err(
            op,
            format!(
                "input channels {} do not match weight input channels {cin}",
                input.channels()
            ),
        ));
    }
    if bias_len != cout {
        return Err(shape_err(
            op,
            format!("bias length {bias_len} does not match output channels {cout}"),
        ));
    }
    Ok(())
}

/// Zero-padded copy of every plane of one batch element: one row/column of
/// zeros on top/left/bottom, and on the right enough zeros to reach a width of
/// `round_up(w, xb) + 2`.
fn pad_planes<T: Element>(src: &[T], c: usize, h: usize, w: usize, xb: usize) -> (Vec<T>, usize, usize) {
    let wr = round_up(w, xb);
    let pw = wr + 2;
    let ph = h + 2;
    let mut out = vec![T::zero(); c * ph * pw];
    for ch in 0..c {
        for y in 0..h {
            let s = &src[(ch * h + y) * w..(ch * h + y + 1) * w];
            let d = (ch * ph + y + 1) * pw + 1;
            out[d..d + w].copy_from_slice(s);
        }
    }
    (out, wr, pw)
}

/// Zero-padded copy of one batch element in `[row][channel][column]` order,
/// so the input rows one output row needs are contiguous across channels.
/// Padding matches [`pad_planes`]. Returns the buffer and the padded width.
fn pad_rows<T: Element>(src: &[T], c: usize, h: usize, w: usize, xb: usize) -> (Vec<T>, usize) {
    let pw = round_up(w, xb) + 2;
    let mut out = vec![T::zero(); (h + 2) * c * pw];
    for ch in 0..c {
        for y in 0..h {
            let s = &src[(ch * h + y) * w..(ch * h + y + 1) * w];
            let d = ((y + 1) * c + ch) * pw + 1;
            out[d..d + w].copy_from_slice(s);
        }
    }
    (out, pw)
}

/// Packs 3x3 taps as `[cout_p / OB][cin][tap][OB]`, zero-padding the output
/// channels to a multiple of `OB`, so the taps one micro-tile reads for an
/// input channel are contiguous.
fn pack_weight<T: Element>(cout: usize, cin: usize, tap_of: impl Fn(usize, usize, usize) -> T) -> (Vec<T>, usize) {
    let cout_p = round_up(cout, OB);
    let mut wt = vec![T::zero(); cin * 9 * cout_p];
    for o in 0..cout {
        for i in 0..cin {
            for tap in 0..9 {
                wt[((o / OB * cin + i) * 9 + tap) * OB + o % OB] = tap_of(o, i, tap);
            }
        }
    }
    (wt, cout_p)
}

/// Accumulates one input row into one output row for the three horizontal
/// taps, in `dx` order.
#[inline(always)]
fn fma_row<T: Element, const XB: usize, const XB2: usize>(
    acc: &mut [[T; XB]; OB],
    row: &[T; XB2],
    taps: &[T; 3 * OB],
) {
    for dx in 0..3 {
        for (k, a) in acc.iter_mut().enumerate() {
            let wk = taps[dx * OB + k];
            for l in 0..XB {
                a[l] = wk.mul_add(row[dx + l], a[l]);
            }
        }
    }
}

/// Output rows per parallel task. Even, so the two-row tile never straddles
/// a band, and small enough that a band's input rows stay in L2.
const BAND: usize = 16;

/// One task's output: rows `y0..y0 + BAND` of each plane of an `OB`-channel
/// block (fewer planes in a partial last block).
struct Band<'a, T> {
    blk: usize,
    y0: usize,
    planes: Vec<&'a mut [T]>,
    relu: bool,
}

/// Output rows `y..y+R` of `band` at columns `xc..xc+XB`. `wblk` holds the
/// block's packed taps. Every output sums over `(i, dy, dx)` in ascending
/// order.
#[allow(clippy::too_many_arguments)]
#[inline(always)]
fn conv3x3_rows<T: Element, const XB: usize, const XB2: usize, const R: usize, const R2: usize>(
    padded: &[T],
    cin: usize,
    w: usize,
    pw: usize,
    wblk: &[T],
    bias: &[T; OB],
    band: &mut Band<'_, T>,
    y: usize,
    xc: usize,
) {
    let rs = cin * pw;
    let base = y * rs + xc;
    let mut acc = [[[T::zero(); XB]; OB]; R];
    for rows in acc.iter_mut() {
        for (a, &b) in rows.iter_mut().zip(bias) {
            *a = [b; XB];
        }
    }
    assert!(cin > 0 && base + (R2 - 1) * rs + (cin - 1) * pw + XB2 <= padded.len() && wblk.len() == cin * 9 * OB);
    #[cfg(all(target_arch = "x86_64", target_feature = "avx512f"))]
    if XB == 16 && std::any::TypeId::of::<T>() == std::any::TypeId::of::<f32>() {
        // SAFETY: T is f32 and XB is 16, so `acc` has the layout of
        // `[[[f32; 16]; OB]; R]`; the assert bounds every read.
        unsafe {
            avx512::accumulate::<R, R2>(
                padded.as_ptr().add(base).cast(),
                cin,
                pw,
                rs,
                wblk.as_ptr().cast(),
                &mut *acc.as_mut_ptr().cast::<[[[f32; 16]; OB]; R]>(),
            );
        }
        store_rows(&acc, w, band, y, xc);
        return;
    }
    for (i, wi) in wblk.chunks_exact(9 * OB).enumerate() {
        let wi: &[[T; 3 * OB]; 3] = wi.as_chunks().0.try_into().unwrap();
        let rows: [&[T; XB2]; R2] = std::array::from_fn(|r| {
            let o = base + r * rs + i * pw;
            padded[o..o + XB2].try_into().unwrap()
        });
        for j in 0..R {
            for dy in 0..3 {
                fma_row(&mut acc[j], rows[j + dy], &wi[dy]);
            }
        }
    }
    store_rows(&acc, w, band, y, xc);
}

#[inline(always)]
fn store_rows<T: Element, const XB: usize, const R: usize>(
    acc: &[[[T; XB]; OB]; R],
    w: usize,
    band: &mut Band<'_, T>,
    y: usize,
    xc: usize,
) {
    let cols = XB.min(w - xc.min(w));
    for (j, rows) in acc.iter().enumerate() {
        for (plane, a) in band.planes.iter_mut().zip(rows) {
            let d = (y - band.y0 + j) * w + xc;
            if band.relu {
                for (o, &v) in plane[d..d + cols].iter_mut().zip(a) {
                    *o = if v > T::zero() { v } else { T::zero() };
                }
            } else {
                plane[d..d + cols].copy_from_slice(&a[..cols]);
            }
        }
    }
}

/// The f32 tile with sixteen columns per register. Each output receives the
/// same fused multiply-adds in the same order as the generic tile.
#[cfg(all(target_arch = "x86_64", target_feature = "avx512f"))]
mod avx512 {
    use std::arch::x86_64::*;

    use super::OB;

    /// # Safety
    /// For every `i < cin` and `r < R2`, the 18 floats at
    /// `src + r * row_stride + i * chan_stride` must be readable, as must
    /// `cin * 9 * OB` floats at `wblk`.
    #[inline(always)]
    pub(super) unsafe fn accumulate<const R: usize, const R2: usize>(
        src: *const f32,
        cin: usize,
        chan_stride: usize,
        row_stride: usize,
        wblk: *const f32,
        acc: &mut [[[f32; 16]; OB]; R],
    ) {
        let mut v = [[_mm512_setzero_ps(); OB]; R];
        for (vj, aj) in v.iter_mut().zip(acc.iter()) {
            for (vk, ak) in vj.iter_mut().zip(aj) {
                *vk = _mm512_loadu_ps(ak.as_ptr());
            }
        }
        for i in 0..cin {
            let src = src.add(i * chan_stride);
            let wi = wblk.add(i * 9 * OB);
            for (j, vj) in v.iter_mut().enumerate() {
                for dy in 0..3 {
                    let row = src.add((j + dy) * row_stride);
                    for dx in 0..3 {
                        let x = _mm512_loadu_ps(row.add(dx));
                        for (k, vk) in vj.iter_mut().enumerate() {
                            let wk = _mm512_set1_ps(*wi.add((dy * 3 + dx) * OB + k));
                            *vk = _mm512_fmadd_ps(wk, x, *vk);
                        }
                    }
                }
            }
        }
        for (vj, aj) in v.iter().zip(acc.iter_mut()) {
            for (vk, ak) in vj.iter().zip(aj) {
                _mm512_storeu_ps(ak.as_mut_ptr(), *vk);
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv3x3_band<T: Element, const XB: usize, const XB2: usize>(
    padded: &[T],
    cin: usize,
    h: usize,
    w: usize,
    pw: usize,
    wblk: &[T],
    bias: &[T; OB],
    band: &mut Band<'_, T>,
) {
    let y_end = (band.y0 + BAND).min(h);
    let mut y = band.y0;
    while y < y_end {
        let mut xc = 0;
        while xc + 2 < pw {
            if y + 1 < y_end {
                conv3x3_rows::<T, XB, XB2, 2, 4>(padded, cin, w, pw, wblk, bias, band, y, xc);
            } else {
                conv3x3_rows::<T, XB, XB2, 1, 3>(padded, cin, w, pw, wblk, bias, band, y, xc);
            }
            xc += XB;
        }
        y += 2;
    }
}

/// Runs the tiled kernel for every batch element, with `wt` already packed
/// by [`pack_weight`], optionally applying a ReLU on store. Tasks are ordered
/// band-major so consecutive tasks read the same input rows.
fn conv3x3_core<T: Element>(
    input: &Tensor4<T>,
    wt: &[T],
    cout: usize,
    cout_p: usize,
    bias: &[T],
    relu: bool,
) -> Tensor4<T> {
    let [n, cin, h, w] = input.dims();
    let mut out = Tensor4::zeros([n, cout, h, w]);
    if h == 0 || w == 0 || cout == 0 {
        return out;
    }
    let mut bias_p = vec![T::zero(); cout_p];
    bias_p[..cout].copy_from_slice(bias);
    let plane = h * w;
    let xb = tile_width::<T>();
    for b in 0..n {
        let src = &input.data()[b * cin * plane..(b + 1) * cin * plane];
        let (padded, pw) = pad_rows(src, cin, h, w, xb);
        let dst = &mut out.data_mut()[b * cout * plane..(b + 1) * cout * plane];
        let mut bands: Vec<Band<'_, T>> = Vec::new();
        for (blk, chunk) in dst.chunks_mut(OB * plane).enumerate() {
            let mut per_plane: Vec<_> = chunk.chunks_mut(plane).map(|p| p.chunks_mut(BAND * w)).collect();
            for y0 in (0..h).step_by(BAND) {
                let planes = per_plane.iter_mut().map(|it| it.next().unwrap()).collect();
                bands.push(Band { blk, y0, planes, relu });
            }
        }
        let blocks = cout_p / OB;
        bands.sort_by_key(|t| (t.y0, t.blk));
        debug_assert_eq!(bands.len(), blocks * h.div_ceil(BAND));
        bands.par_iter_mut().for_each(|band| {
            let blk = band.blk;
            let bias_blk: &[T; OB] = bias_p[blk * OB..(blk + 1) * OB].try_into().unwrap();
            let wblk = &wt[blk * cin * 9 * OB..(blk + 1) * cin * 9 * OB];
            if xb == 8 {
                conv3x3_band::<T, 8, 10>(&padded, cin, h, w, pw, wblk, bias_blk, band);
            } else {
                conv3x3_band::<T, 16, 18>(&padded, cin, h, w, pw, wblk, bias_blk, band);
            }
        });
    }
    out
}

/// 3x3 convolution, stride 1, zero padding 1.
///
/// `out[n,o,y,x] = bias[o] + Σ weight[o,i,dy,dx] · input[n,i,y+dy-1,x+dx-1]`.
pub fn conv2d_3x3<T: Element>(
    input: &Tensor4<T>,
    weight: &Tensor4<T>,
    bias: &[T],
) -> Result<Tensor4<T>> {
    check_conv_shapes("conv2d_3x3", input, weight, bias.len(), 3)?;
    let [cout, cin, _, _] = weight.dims();
    let wd = weight.data();
    let (wt, cout_p) = pack_weight(cout, cin, |o, i, tap| wd[(o * cin + i) * 9 + tap]);
    Ok(conv3x3_core(input, &wt, cout, cout_p, bias, false))
}

/// [`conv2d_3x3`] followed by a ReLU, fused into one pass. Bit-identical to
/// applying the two in turn.
pub fn conv2d_3x3_relu<T: Element>(input: &Tensor4<T>, weight: &Tensor4<T>, bias: &[T]) -> Result<Tensor4<T>> {
    check_conv_shapes("conv2d_3x3_relu", input, weight, bias.len(), 3)?;
    let [cout, cin, _, _] = weight.dims();
    let wd = weight.data();
    let (wt, cout_p) = pack_weight(cout, cin, |o, i, tap| wd[(o * cin + i) * 9 + tap]);
    Ok(conv3x3_core(input, &wt, cout, cout_p, bias, true))
}

/// Lane-split dot product; the summation order is fixed by the code, not by
/// the optimizer, so results are reproducible.
#[inline]
pub(crate) fn dot<T: Element>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [T::zero(); LANES];
    let chunks = a.len() / LANES;
    for c in 0..chunks {
        let x: &[T; LANES] = a[c * LANES..(c + 1) * LANES].try_into().unwrap();
        let y: &[T; LANES] = b[c * LANES..(c + 1) * LANES].try_into().unwrap();
        for l in 0..LANES {
            acc[l] = x[l].mul_add(y[l], acc[l]);
        }
    }
    let mut s = T::zero();
    for i in chunks * LANES..a.len() {
        s = a[i].mul_add(b[i], s);
    }
    acc.iter().fold(s, |t, &v| t + v)
}

#[inline]
pub(crate) fn sum_lanes<T: Element>(a: &[T]) -> T {
    let mut acc = [T::zero(); LANES];
    let chunks = a.len() / LANES;
    for c in 0..chunks {
        let x: &[T; LANES] = a[c * LANES..(c + 1) * LANES].try_into().unwrap();
        for l in 0..LANES {
            acc[l] += x[l];
        }
    }
    let s = a[chunks * LANES..].iter().fold(T::zero(), |t, &v| t + v);
    acc.iter().fold(s, |t, &v| t + v)
}

/// Weight gradient for a single output channel, accumulated into `gw_o`
/// (`cin * 9` entries).
fn weight_grad_channel<T: Element, const XB: usize, const XB2: usize>(
    padded: &[T],
    cin: usize,
    h: usize,
    wr: usize,
    pw: usize,
    gout: &[T],
    gw_o: &mut [T],
) {
    let ph = h + 2;
    for i in 0..cin {
        let plane = i * ph * pw;
        let mut acc = [[T::zero(); XB]; 9];
        for y in 0..h {
            let mut xc = 0;
            while xc < wr {
                let g: &[T; XB] = gout[y * wr + xc..y * wr + xc + XB].try_into().unwrap();
                for dy in 0..3 {
                    let rs = plane + (y + dy) * pw + xc;
                    let row: &[T; XB2] = padded[rs..rs + XB2].try_into().unwrap();
                    for dx in 0..3 {
                        let a = &mut acc[dy * 3 + dx];
                        for l in 0..XB {
                            a[l] = g[l].mul_add(row[dx + l], a[l]);
                        }
                    }
                }
                xc += XB;
            }
        }
        for (tap, a) in acc.iter().enumerate() {
            gw_o[i * 9 + tap] += a.iter().fold(T::zero(), |t, &v| t + v);
        }
    }
}

/// Gradients of [`conv2d_3x3`] given the upstream gradient `grad_out`.
/// The input gradient is only computed when `need_input` is set.
pub fn conv2d_3x3_backward<T: Element>(
    input: &Tensor4<T>,
    weight: &Tensor4<T>,
    grad_out: &Tensor4<T>,
    need_input: bool,
) -> Result<ConvGrads<T>> {
    let [cout, cin, _, _] = weight.dims();
    check_conv_shapes("conv2d_3x3_backward", input, weight, cout, 3)?;
    let [n, _, h, w] = input.dims();
    if grad_out.dims() != [n, cout, h, w] {
        return Err(shape_err(
            "conv2d_3x3_backward",
            format!(
                "grad_out dims {:?} expected {:?}",
                grad_out.dims(),
                [n, cout, h, w]
            ),
        ));
    }
    let plane = h * w;

    // bias
    let mut gb = vec![T::zero(); cout];
    for b in 0..n {
        for (o, g) in gb.iter_mut().enumerate() {
            *g += sum_lanes(grad_out.plane(b, o));
        }
    }

    // weight
    let mut gw = Tensor4::zeros([cout, cin, 3, 3]);
    if plane > 0 {
        for b in 0..n {
            let src = &input.data()[b * cin * plane..(b + 1) * cin * plane];
            let xb = tile_width::<T>();
            let (padded, wr, pw) = pad_planes(src, cin, h, w, xb);
            let mut gpad = vec![T::zero(); cout * h * wr];
            for o in 0..cout {
                let g = grad_out.plane(b, o);
                for y in 0..h {
                    let d = (o * h + y) * wr;
                    gpad[d..d + w].copy_from_slice(&g[y * w..(y + 1) * w]);
                }
            }
            gw.data_mut()
                .par_chunks_mut(cin * 9)
                .enumerate()
                .for_each(|(o, gw_o)| {
                    let g = &gpad[o * h * wr..(o + 1) * h * wr];
                    if xb == 8 {
                        weight_grad_channel::<T, 8, 10>(&padded, cin, h, wr, pw, g, gw_o);
                    } else {
                        weight_grad_channel::<T, 16, 18>(&padded, cin, h, wr, pw, g, gw_o);
                    }
                });
        }
    }

    // input: correlation of grad_out with the channel-transposed, spatially
    // flipped kernel
    let gin = if need_input {
        let wd = weight.data();
        let (wt, cin_p) = pack_weight(cin, cout, |i, o, tap| wd[(o * cin + i) * 9 + (8 - tap)]);
        let zero_bias = vec![T::zero(); cin];
        Some(conv3x3_core(grad_out, &wt, cin, cin_p, &zero_bias, false))
    } else {
        None
    };

    Ok(ConvGrads {
        input: gin,
        weight: gw,
        bias: gb,
    })
}

/// 1x1 convolution: `out[n,o,p] = bias[o] + Σ_c weight[o,c] · input[n,c,p]`.
pub fn conv1x1<T: Element>(
    input: &Tensor4<T>,
    weight: &Tensor4<T>,
    bias: &[T],
) -> Result<Tensor4<T>> {
    check_conv_shapes("conv1x1", input, weight, bias.len(), 1)?;
    let [n, cin, h, w] = input.dims();
    let cout = weight.dims()[0];
    let mut out = Tensor4::zeros([n, cout, h, w]);
    for b in 0..n {
        for o in 0..cout {
            let dst = out.plane_mut(b, o);
            dst.fill(bias[o]);
            for c in 0..cin {
                let wv = weight.data()[o * cin + c];
                for (d, &s) in dst.iter_mut().zip(input.plane(b, c)) {
                    *d = wv.mul_add(s, *d);
                }
            }
        }
    }
    Ok(out)
}

/// Gradients of [`conv1x1`].
pub fn conv1x1_backward<T: Element>(
    input: &Tensor4<T>,
    weight: &Tensor4<T>,
    grad_out: &Tensor4<T>,
    need_input: bool,
) -> Result<ConvGrads<T>> {
    let [cout, cin, _, _] = weight.dims();
    check_conv_shapes("conv1x1_backward", input, weight, cout, 1)?;
    let [n, _, h, w] = input.dims();
    if grad_out.dims() != [n, cout, h, w] {
        return Err(shape_err(
            "conv1x1_backward",
            format!("grad_out dims {:?}", grad_out.dims()),
        ));
    }
    let mut gb = vec![T::zero(); cout];
    let mut gw = Tensor4::zeros([cout, cin, 1, 1]);
    for b in 0..n {
        for o in 0..cout {
            let g = grad_out.plane(b, o);
            gb[o] += sum_lanes(g);
            for c in 0..cin {
                gw.data_mut()[o * cin + c] += dot(g, input.plane(b, c));
            }
        }
    }
    let gin = need_input.then(|| {
        let mut gin = Tensor4::zeros([n, cin, h, w]);
        for b in 0..n {
            for c in 0..cin {
                let dst = gin.plane_mut(b, c);
                for o in 0..cout {
                    let wv = weight.data()[o * cin + c];
                    for (d, &g) in dst.iter_mut().zip(grad_out.plane(b, o)) {
                        *d = wv.mul_add(g, *d);
                    }
                }
            }
        }
        gin
    });
    Ok(ConvGrads {
        input: gin,
        weight: gw,
        bias: gb,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(dims: [usize; 4], rng: &mut ChaCha8Rng) -> Tensor4<f64> {
        Tensor4::from_fn(dims, |_| rng.gen_range(-1.0..1.0))
    }

    /// Six nested loops straight from the definition.
    fn naive_conv3x3(x: &Tensor4<f64>, w: &Tensor4<f64>, b: &[f64]) -> Tensor4<f64> {
        let [n, cin, h, wd] = x.dims();
        let cout = w.dims()[0];
        Tensor4::from_fn([n, cout, h, wd], |[nn, o, y, xx]| {
            let mut s = b[o];
            for i in 0..cin {
                for dy in 0..3 {
                    for dx in 0..3 {
                        let yy = y as isize + dy as isize - 1;
                        let xs = xx as isize + dx as isize - 1;
                        if yy >= 0 && xs >= 0 && (yy as usize) < h && (xs as usize) < wd {
                            s += w.at(o, i, dy, dx) * x.at(nn, i, yy as usize, xs as usize);
                        }
                    }
                }
            }
            s
        })
    }

    #[test]
    fn identity_kernel_reproduces_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random([2, 3, 7, 9], &mut rng).cast::<f32>();
        let w = Tensor4::from_fn([3, 3, 3, 3], |[o, i, dy, dx]| {
            if o == i && dy == 1 && dx == 1 {
                1.0f32
            } else {
                0.0
            }
        });
        let y = conv2d_3x3(&x, &w, &[0.0; 3]).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn all_ones_kernel_counts_neighbours() {
        let x = Tensor4::full([1, 1, 5, 5], 1.0f32);
        let w = Tensor4::full([1, 1, 3, 3], 1.0f32);
        let y = conv2d_3x3(&x, &w, &[0.0]).unwrap();
        assert_eq!(y.at(0, 0, 2, 2), 9.0);
        assert_eq!(y.at(0, 0, 0, 0), 4.0);
        assert_eq!(y.at(0, 0, 4, 4), 4.0);
        assert_eq!(y.at(0, 0, 0, 2), 6.0);
        assert_eq!(y.at(0, 0, 2, 4), 6.0);
    }

    #[test]
    fn matches_naive_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for &(n, cin, cout, h, w) in &[(1, 2, 3, 6, 6), (2, 5, 11, 9, 21), (1, 16, 16, 8, 40)] {
            let x = random([n, cin, h, w], &mut rng);
            let wt = random([cout, cin, 3, 3], &mut rng);
            let b: Vec<f64> = (0..cout).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let got = conv2d_3x3(&x, &wt, &b).unwrap();
            let want = naive_conv3x3(&x, &wt, &b);
            for (g, e) in got.data().iter().zip(want.data()) {
                assert!((g - e).abs() < 1e-12, "{g} vs {e}");
            }
        }
    }

    #[test]
    fn f32_kernel_matches_naive_at_ragged_widths() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for &(cin, cout, h, w) in &[(3, 5, 7, 37), (8, 9, 17, 15), (4, 4, 1, 33), (2, 3, 35, 16)] {
            let x = random([1, cin, h, w], &mut rng);
            let wt = random([cout, cin, 3, 3], &mut rng);
            let b: Vec<f64> = (0..cout).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let bf: Vec<f32> = b.iter().map(|&v| v as f32).collect();
            let got = conv2d_3x3(&x.cast::<f32>(), &wt.cast::<f32>(), &bf).unwrap();
            let want = naive_conv3x3(&x.cast::<f32>().cast(), &wt.cast::<f32>().cast(), &b);
            for (g, e) in got.data().iter().zip(want.data()) {
                assert!((f64::from(*g) - e).abs() < 1e-5, "{g} vs {e}");
            }
        }
    }

    #[test]
    fn fused_relu_is_bit_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for &(n, cin, cout, h, w) in &[(1, 5, 7, 7, 37), (2, 3, 6, 19, 16), (1, 16, 12, 33, 50)] {
            let x = random([n, cin, h, w], &mut rng);
            let wt = random([cout, cin, 3, 3], &mut rng);
            let b: Vec<f64> = (0..cout).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let want = crate::tensor::relu(&conv2d_3x3(&x, &wt, &b).unwrap());
            assert_eq!(conv2d_3x3_relu(&x, &wt, &b).unwrap().data(), want.data());
            let (xf, wf) = (x.cast::<f32>(), wt.cast::<f32>());
            let bf: Vec<f32> = b.iter().map(|&v| v as f32).collect();
            let want = crate::tensor::relu(&conv2d_3x3(&xf, &wf, &bf).unwrap());
            assert_eq!(conv2d_3x3_relu(&xf, &wf, &bf).unwrap().data(), want.data());
        }
    }

    #[test]
    fn rejects_mismatched_channels() {
        let x = Tensor4::<f32>::zeros([1, 2, 4, 4]);
        let w = Tensor4::<f32>::zeros([3, 4, 3, 3]);
        let err = conv2d_3x3(&x, &w, &[0.0; 3]).unwrap_err().to_string();
        assert!(err.contains("input channels"), "{err}");
        let w = Tensor4::<f32>::zeros([3, 2, 3, 3]);
        let err = conv2d_3x3(&x, &w, &[0.0; 2]).unwrap_err().to_string();
        assert!(err.contains("bias length"), "{err}");
    }

    #[test]
    fn backward_matches_naive_adjoint() {
        // <conv(x), g> is bilinear, so its gradients can be read off the naive
        // forward by linearity.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (n, cin, cout, h, w) = (1, 3, 5, 6, 7);
        let x = random([n, cin, h, w], &mut rng);
        let wt = random([cout, cin, 3, 3], &mut rng);
        let g = random([n, cout, h, w], &mut rng);
        let grads = conv2d_3x3_backward(&x, &wt, &g, true).unwrap();
        let zero_b = vec![0.0; cout];
        let inner = |xx: &Tensor4<f64>, ww: &Tensor4<f64>| -> f64 {
            naive_conv3x3(xx, ww, &zero_b)
                .data()
                .iter()
                .zip(g.data())
                .map(|(a, b)| a * b)
                .sum()
        };
        let gin = grads.input.unwrap();
        for idx in 0..x.len() {
            let mut e = Tensor4::zeros(x.dims());
            e.data_mut()[idx] = 1.0;
            assert!((inner(&e, &wt) - gin.data()[idx]).abs() < 1e-12);
        }
        for idx in 0..wt.len() {
            let mut e = Tensor4::zeros(wt.dims());
            e.data_mut()[idx] = 1.0;
            assert!((inner(&x, &e) - grads.weight.data()[idx]).abs() < 1e-12);
        }
        for o in 0..cout {
            assert!((grads.bias[o] - g.plane(0, o).iter().sum::<f64>()).abs() < 1e-12);
        }
    }

    #[test]
    fn conv1x1_matches_definition() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random([1, 4, 3, 5], &mut rng);
        let w = random([2, 4, 1, 1], &mut rng);
        let b = [0.5, -0.25];
        let y = conv1x1(&x, &w, &b).unwrap();
        for o in 0..2 {
            for yy in 0..3 {
                for xx in 0..5 {
                    let e: f64 =
                        b[o] + (0..4).map(|c| w.at(o, c, 0, 0) * x.at(0, c, yy, xx)).sum::<f64>();
                    assert!((y.at(0, o, yy, xx) - e).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn dot_and_sum_lanes_handle_tails() {
        let a: Vec<f64> = (0..37).map(|v| v as f64).collect();
        let b = vec![2.0; 37];
        assert_eq!(dot(&a, &b), 2.0 * 666.0);
        assert_eq!(sum_lanes(&a), 666.0);
    }
}
