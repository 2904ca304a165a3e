//! Direct loops behind the tape operations.
//!
//! Convolutions run over an explicitly padded input so the inner loop is a
//! plain row update with no bounds logic. Forward kernels return the number
//! of scalar multiplies they executed; the count is what the MACs oracle
//! compares against the analytic model.

use crate::arch::PadMode;

use super::Scalar;

/// Geometry of a convolution over a padded input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub n: usize,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    /// Padded input size.
    pub hp: usize,
    pub wp: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new(n: usize, cin: usize, cout: usize, hp: usize, wp: usize, k: usize, stride: usize) -> Self {
        assert!(hp >= k && wp >= k, "kernel larger than padded input");
        ConvGeom {
            n,
            cin,
            cout,
            k,
            stride,
            hp,
            wp,
            ho: (hp - k) / stride + 1,
            wo: (wp - k) / stride + 1,
        }
    }
}

#[inline]
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let mut i = i;
    if i < 0 {
        i = -i;
    }
    if i >= n {
        i = 2 * (n - 1) - i;
    }
    i as usize
}

/// Pads every `h × w` plane by `lo` before and `hi` after, in both axes.
pub fn pad<T: Scalar>(x: &[T], planes: usize, h: usize, w: usize, lo: usize, hi: usize, mode: PadMode) -> Vec<T> {
    let (hp, wp) = (h + lo + hi, w + lo + hi);
    let mut out = vec![T::zero(); planes * hp * wp];
    if mode == PadMode::Reflect {
        assert!(lo < h && hi < h && lo < w && hi < w, "reflect padding exceeds input");
    }
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * hp * wp..(p + 1) * hp * wp];
        match mode {
            PadMode::Zero => {
                for y in 0..h {
                    let d = (y + lo) * wp + lo;
                    dst[d..d + w].copy_from_slice(&src[y * w..(y + 1) * w]);
                }
            }
            PadMode::Reflect => {
                for yp in 0..hp {
                    let sy = reflect(yp as isize - lo as isize, h);
                    for xp in 0..wp {
                        let sx = reflect(xp as isize - lo as isize, w);
                        dst[yp * wp + xp] = src[sy * w + sx];
                    }
                }
            }
        }
    }
    out
}

/// Adjoint of [`pad`]: folds the padded gradient back onto the input.
pub fn pad_backward<T: Scalar>(
    gp: &[T],
    planes: usize,
    h: usize,
    w: usize,
    lo: usize,
    hi: usize,
    mode: PadMode,
) -> Vec<T> {
    let (hp, wp) = (h + lo + hi, w + lo + hi);
    let mut out = vec![T::zero(); planes * h * w];
    for p in 0..planes {
        let src = &gp[p * hp * wp..(p + 1) * hp * wp];
        let dst = &mut out[p * h * w..(p + 1) * h * w];
        match mode {
            PadMode::Zero => {
                for y in 0..h {
                    let s = (y + lo) * wp + lo;
                    for (d, &v) in dst[y * w..(y + 1) * w].iter_mut().zip(&src[s..s + w]) {
                        *d += v;
                    }
                }
            }
            PadMode::Reflect => {
                for yp in 0..hp {
                    let sy = reflect(yp as isize - lo as isize, h);
                    for xp in 0..wp {
                        let sx = reflect(xp as isize - lo as isize, w);
                        dst[sy * w + sx] += src[yp * wp + xp];
                    }
                }
            }
        }
    }
    out
}

#[inline(always)]
fn axpy<T: Scalar>(a: T, x: &[T], y: &mut [T]) {
    for (yv, &xv) in y.iter_mut().zip(x) {
        *yv += a * xv;
    }
}

/// Dense kernels are compiled twice, once with AVX2 enabled. Neither
/// version fuses or reorders arithmetic, so both give identical results.
#[cfg(target_arch = "x86_64")]
fn has_avx2() -> bool {
    std::is_x86_feature_detected!("avx2")
}

/// Dense convolution. `w` is `(cout, cin, k, k)`; `out` is
/// `(n, cout, ho, wo)` and is overwritten. Returns the multiplies performed.
pub fn conv_forward<T: Scalar>(xp: &[T], g: &ConvGeom, w: &[T], bias: Option<&[T]>, out: &mut [T]) -> u64 {
    #[cfg(target_arch = "x86_64")]
    if has_avx2() {
        // SAFETY: the CPU supports AVX2.
        return unsafe { conv_forward_avx2(xp, g, w, bias, out) };
    }
    conv_forward_any(xp, g, w, bias, out)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn conv_forward_avx2<T: Scalar>(xp: &[T], g: &ConvGeom, w: &[T], bias: Option<&[T]>, out: &mut [T]) -> u64 {
    conv_forward_any(xp, g, w, bias, out)
}

#[inline(always)]
fn conv_forward_any<T: Scalar>(xp: &[T], g: &ConvGeom, w: &[T], bias: Option<&[T]>, out: &mut [T]) -> u64 {
    rows_forward(xp, g, w, bias, out, false);
    (g.n * g.ho * g.wo * g.k * g.k * g.cin * g.cout) as u64
}

/// Rows `y0, y0 + step, ..` (`h` of them) and columns `x0, x0 + step, ..`
/// (`w` of them) of the padded input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Window {
    pub y0: usize,
    pub x0: usize,
    pub h: usize,
    pub w: usize,
    pub step: usize,
}

impl Window {
    /// The whole padded input.
    pub fn full(g: &ConvGeom) -> Self {
        Window {
            y0: 0,
            x0: 0,
            h: g.hp,
            w: g.wp,
            step: 1,
        }
    }

    /// The original input inside a border of `pad` on every side.
    pub fn interior(g: &ConvGeom, pad: usize) -> Self {
        Window {
            y0: pad,
            x0: pad,
            h: g.hp - 2 * pad,
            w: g.wp - 2 * pad,
            step: 1,
        }
    }
}

/// Gradients of [`conv_forward`], added into whichever outputs are given.
/// The input gradient covers `window` and is laid out
/// `(n, cin, window.h, window.w)`.
pub fn conv_backward<T: Scalar>(
    xp: &[T],
    g: &ConvGeom,
    w: &[T],
    gout: &[T],
    dx: Option<(&mut [T], Window)>,
    dw: Option<&mut [T]>,
    db: Option<&mut [T]>,
) {
    #[cfg(target_arch = "x86_64")]
    if has_avx2() {
        // SAFETY: the CPU supports AVX2.
        return unsafe { conv_backward_avx2(xp, g, w, gout, dx, dw, db) };
    }
    conv_backward_any(xp, g, w, gout, dx, dw, db)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn conv_backward_avx2<T: Scalar>(
    xp: &[T],
    g: &ConvGeom,
    w: &[T],
    gout: &[T],
    dx: Option<(&mut [T], Window)>,
    dw: Option<&mut [T]>,
    db: Option<&mut [T]>,
) {
    conv_backward_any(xp, g, w, gout, dx, dw, db)
}

#[inline(always)]
fn conv_backward_any<T: Scalar>(
    xp: &[T],
    g: &ConvGeom,
    w: &[T],
    gout: &[T],
    dx: Option<(&mut [T], Window)>,
    dw: Option<&mut [T]>,
    db: Option<&mut [T]>,
) {
    let plane_out = g.ho * g.wo;
    if let Some(db) = db {
        for n in 0..g.n {
            for (o, d) in db.iter_mut().enumerate().take(g.cout) {
                *d += gout[(n * g.cout + o) * plane_out..(n * g.cout + o + 1) * plane_out].iter().copied().sum::<T>();
            }
        }
    }
    if let Some(dw) = dw {
        let gf = &flatten_pointwise(g);
        let mut o = 0;
        while o + ROW_CO <= g.cout {
            if gf.stride == 1 {
                weight_grad::<T, ROW_CO, true>(xp, gf, gout, dw, o);
            } else {
                weight_grad::<T, ROW_CO, false>(xp, gf, gout, dw, o);
            }
            o += ROW_CO;
        }
        for o in o..g.cout {
            if gf.stride == 1 {
                weight_grad::<T, 1, true>(xp, gf, gout, dw, o);
            } else {
                weight_grad::<T, 1, false>(xp, gf, gout, dw, o);
            }
        }
    }
    if let Some((dx, window)) = dx {
        input_grad(g, w, gout, dx, window);
    }
}

/// Output pixels per accumulator row and output channels per pass.
const ROW_LANES: usize = 8;
const ROW_CO: usize = 4;

/// An unpadded 1x1 convolution seen as a single row per plane.
fn flatten_pointwise(g: &ConvGeom) -> ConvGeom {
    if g.k == 1 && g.stride == 1 && g.hp == g.ho && g.wp == g.wo {
        let p = g.ho * g.wo;
        ConvGeom {
            hp: 1,
            wp: p,
            ho: 1,
            wo: p,
            ..*g
        }
    } else {
        *g
    }
}

/// Weights of output channels `o0..o0 + C` as `(cin, k, k, C)`.
fn pack_block<T: Scalar, const C: usize>(w: &[T], g: &ConvGeom, o0: usize) -> Vec<T> {
    let per = g.cin * g.k * g.k;
    let mut out = vec![T::zero(); per * C];
    for c in 0..C {
        for (i, &v) in w[(o0 + c) * per..(o0 + c + 1) * per].iter().enumerate() {
            out[i * C + c] = v;
        }
    }
    out
}

/// Offsets of the `k * k` taps relative to the window's top-left corner.
fn tap_offsets(g: &ConvGeom) -> Vec<usize> {
    (0..g.k).flat_map(|ky| (0..g.k).map(move |kx| ky * g.wp + kx)).collect()
}

/// Forward pass; adds into `out` instead of overwriting it when
/// `accumulate` is set.
#[inline(always)]
fn rows_forward<T: Scalar>(xp: &[T], g: &ConvGeom, w: &[T], bias: Option<&[T]>, out: &mut [T], accumulate: bool) {
    let g = &flatten_pointwise(g);
    let (ci, co) = (g.cin, g.cout);
    let plane_in = g.hp * g.wp;
    let plane_out = g.ho * g.wo;
    let offs = tap_offsets(g);
    let mut blocks = Vec::new();
    let mut o = 0;
    while o + ROW_CO <= co {
        blocks.push((o, pack_block::<T, ROW_CO>(w, g, o)));
        o += ROW_CO;
    }
    let singles: Vec<_> = (o..co).map(|o| (o, pack_block::<T, 1>(w, g, o))).collect();
    for n in 0..g.n {
        let xn = &xp[n * ci * plane_in..(n + 1) * ci * plane_in];
        let on = &mut out[n * co * plane_out..(n + 1) * co * plane_out];
        for (o, wb) in &blocks {
            forward_block::<T, ROW_CO>(xn, g, &offs, wb, bias, on, *o, accumulate);
        }
        for (o, wb) in &singles {
            forward_block::<T, 1>(xn, g, &offs, wb, bias, on, *o, accumulate);
        }
    }
}

#[allow(clippy::too_many_arguments)]
#[inline(always)]
fn forward_block<T: Scalar, const C: usize>(
    xn: &[T],
    g: &ConvGeom,
    offs: &[usize],
    wb: &[T],
    bias: Option<&[T]>,
    on: &mut [T],
    o0: usize,
    accumulate: bool,
) {
    let plane_out = g.ho * g.wo;
    let b: [T; C] = std::array::from_fn(|c| bias.map_or(T::zero(), |b| b[o0 + c]));
    // writes columns `from..to` of a tile that starts at column `at`
    let mut store = |oy: usize, at: usize, acc: &[[T; ROW_LANES]; C], from: usize, to: usize| {
        for (c, a) in acc.iter().enumerate() {
            let row = (o0 + c) * plane_out + oy * g.wo;
            let dst = &mut on[row + from..row + to];
            let src = &a[from - at..to - at];
            if accumulate {
                for (d, &v) in dst.iter_mut().zip(src) {
                    *d += v;
                }
            } else {
                dst.copy_from_slice(src);
            }
        }
    };
    for oy in 0..g.ho {
        let mut ox = 0;
        if g.wo >= ROW_LANES {
            while ox < g.wo {
                // the last tile may overlap the previous one; only its new
                // columns are written
                let at = ox.min(g.wo - ROW_LANES);
                let acc = if g.stride == 1 {
                    forward_tile::<T, C, ROW_LANES, true>(xn, g, offs, wb, b, oy, at)
                } else {
                    forward_tile::<T, C, ROW_LANES, false>(xn, g, offs, wb, b, oy, at)
                };
                store(oy, at, &acc, ox, at + ROW_LANES);
                ox = at + ROW_LANES;
            }
        }
        for ox in ox..g.wo {
            let one = forward_tile::<T, C, 1, false>(xn, g, offs, wb, b, oy, ox);
            let mut acc = [[T::zero(); ROW_LANES]; C];
            for (a, v) in acc.iter_mut().zip(one) {
                a[0] = v[0];
            }
            store(oy, ox, &acc, ox, ox + 1);
        }
    }
}

/// `C` output channels times `W` adjacent output pixels of row `oy`,
/// starting at column `ox`. `wb` is the packed block from [`pack_block`].
#[inline(always)]
fn forward_tile<T: Scalar, const C: usize, const W: usize, const UNIT: bool>(
    xn: &[T],
    g: &ConvGeom,
    offs: &[usize],
    wb: &[T],
    bias: [T; C],
    oy: usize,
    ox: usize,
) -> [[T; W]; C] {
    let s = if UNIT { 1 } else { g.stride };
    let plane_in = g.hp * g.wp;
    let span = (W - 1) * s + 1;
    let mut acc = [[T::zero(); W]; C];
    for (a, &bv) in acc.iter_mut().zip(&bias) {
        *a = [bv; W];
    }
    let corner = oy * s * g.wp + ox * s;
    for (ic, wi) in wb.chunks_exact(offs.len() * C).enumerate() {
        let base = ic * plane_in + corner;
        for (&off, wv) in offs.iter().zip(wi.chunks_exact(C)) {
            let seg = &xn[base + off..base + off + span];
            let mut xv = [T::zero(); W];
            for (j, v) in xv.iter_mut().enumerate() {
                *v = seg[j * s];
            }
            for (a, &wc) in acc.iter_mut().zip(wv) {
                for j in 0..W {
                    a[j] += wc * xv[j];
                }
            }
        }
    }
    acc
}

/// Weight gradient of output channels `o0..o0 + C`.
#[inline(always)]
fn weight_grad<T: Scalar, const C: usize, const UNIT: bool>(xp: &[T], g: &ConvGeom, gout: &[T], dw: &mut [T], o0: usize) {
    let (wp, ho, wo, ci, co) = (g.wp, g.ho, g.wo, g.cin, g.cout);
    let s = if UNIT { 1 } else { g.stride };
    let kk = g.k * g.k;
    let plane_in = g.hp * wp;
    let plane_out = ho * wo;
    let span = (ROW_LANES - 1) * s + 1;
    let full = wo - wo % ROW_LANES;
    let offs = tap_offsets(g);
    let mut acc = vec![[[T::zero(); ROW_LANES]; C]; kk];
    let mut tail = vec![[T::zero(); C]; kk];
    for ic in 0..ci {
        acc.iter_mut().for_each(|a| *a = [[T::zero(); ROW_LANES]; C]);
        tail.iter_mut().for_each(|t| *t = [T::zero(); C]);
        for n in 0..g.n {
            let xn = &xp[(n * ci + ic) * plane_in..(n * ci + ic + 1) * plane_in];
            let gn = &gout[(n * co + o0) * plane_out..(n * co + o0 + C) * plane_out];
            for oy in 0..ho {
                for ox in (0..full).step_by(ROW_LANES) {
                    let gv: [[T; ROW_LANES]; C] = std::array::from_fn(|c| {
                        let at = c * plane_out + oy * wo + ox;
                        gn[at..at + ROW_LANES].try_into().unwrap()
                    });
                    let corner = oy * s * wp + ox * s;
                    for (&off, a) in offs.iter().zip(acc.iter_mut()) {
                        let seg = &xn[corner + off..corner + off + span];
                        let mut xv = [T::zero(); ROW_LANES];
                        for (j, v) in xv.iter_mut().enumerate() {
                            *v = seg[j * s];
                        }
                        for (ac, gc) in a.iter_mut().zip(&gv) {
                            for j in 0..ROW_LANES {
                                ac[j] += gc[j] * xv[j];
                            }
                        }
                    }
                }
                for ox in full..wo {
                    let gv: [T; C] = std::array::from_fn(|c| gn[c * plane_out + oy * wo + ox]);
                    let corner = oy * s * wp + ox * s;
                    for (&off, tl) in offs.iter().zip(tail.iter_mut()) {
                        let xv = xn[corner + off];
                        for (t, &gc) in tl.iter_mut().zip(&gv) {
                            *t += gc * xv;
                        }
                    }
                }
            }
        }
        for (t, (a, tl)) in acc.iter().zip(&tail).enumerate() {
            for c in 0..C {
                let sum = a[c].iter().fold(T::zero(), |s, &v| s + v);
                dw[((o0 + c) * ci + ic) * kk + t] += sum + tl[c];
            }
        }
    }
}

/// Input gradient over `win`, computed as a correlation of the zero-dilated
/// output gradient with the flipped, transposed kernel.
#[inline(always)]
fn input_grad<T: Scalar>(g: &ConvGeom, w: &[T], gout: &[T], dx: &mut [T], win: Window) {
    let (k, s, ho, wo, ci, co) = (g.k, g.stride, g.ho, g.wo, g.cin, g.cout);
    debug_assert!(win.y0 + (win.h - 1) * win.step < g.hp && win.x0 + (win.w - 1) * win.step < g.wp);
    let kk = k * k;
    let (hg, wg) = ((win.h - 1) * win.step + k, (win.w - 1) * win.step + k);
    // row `a` of the buffer is padded-input row `win.y0 + a - (k - 1)`
    let mut buf = vec![T::zero(); g.n * co * hg * wg];
    for p in 0..g.n * co {
        for oy in 0..ho {
            let Some(a) = (oy * s + k - 1).checked_sub(win.y0).filter(|&a| a < hg) else {
                continue;
            };
            let src = &gout[(p * ho + oy) * wo..(p * ho + oy + 1) * wo];
            let dst = &mut buf[(p * hg + a) * wg..(p * hg + a + 1) * wg];
            for (ox, &v) in src.iter().enumerate() {
                if let Some(b) = (ox * s + k - 1).checked_sub(win.x0).filter(|&b| b < wg) {
                    dst[b] = v;
                }
            }
        }
    }
    let mut wf = vec![T::zero(); w.len()];
    for o in 0..co {
        for i in 0..ci {
            for t in 0..kk {
                wf[(i * co + o) * kk + kk - 1 - t] = w[(o * ci + i) * kk + t];
            }
        }
    }
    let gg = ConvGeom::new(g.n, co, ci, hg, wg, k, win.step);
    rows_forward(&buf, &gg, &wf, None, dx, true);
}

/// Depthwise convolution; `w` is `(c, 1, k, k)` and `g.cin == g.cout`.
pub fn depthwise_forward<T: Scalar>(xp: &[T], g: &ConvGeom, w: &[T], out: &mut [T]) -> u64 {
    let (k, s, wp, ho, wo) = (g.k, g.stride, g.wp, g.ho, g.wo);
    let plane_in = g.hp * wp;
    let plane_out = ho * wo;
    let mut muls = 0u64;
    for n in 0..g.n {
        for c in 0..g.cin {
            let p = n * g.cin + c;
            let o = &mut out[p * plane_out..(p + 1) * plane_out];
            o.iter_mut().for_each(|v| *v = T::zero());
            let xpl = &xp[p * plane_in..(p + 1) * plane_in];
            for ky in 0..k {
                for kx in 0..k {
                    let wv = w[(c * k + ky) * k + kx];
                    for oy in 0..ho {
                        let orow = &mut o[oy * wo..(oy + 1) * wo];
                        let base = (oy * s + ky) * wp + kx;
                        if s == 1 {
                            axpy(wv, &xpl[base..base + wo], orow);
                        } else {
                            for (ox, ov) in orow.iter_mut().enumerate() {
                                *ov += wv * xpl[base + ox * s];
                            }
                        }
                        muls += wo as u64;
                    }
                }
            }
        }
    }
    muls
}

pub fn depthwise_backward<T: Scalar>(
    xp: &[T],
    g: &ConvGeom,
    w: &[T],
    gout: &[T],
    mut dxp: Option<&mut [T]>,
    mut dw: Option<&mut [T]>,
) {
    let (k, s, wp, ho, wo) = (g.k, g.stride, g.wp, g.ho, g.wo);
    let plane_in = g.hp * wp;
    let plane_out = ho * wo;
    for n in 0..g.n {
        for c in 0..g.cin {
            let p = n * g.cin + c;
            let go = &gout[p * plane_out..(p + 1) * plane_out];
            let off = p * plane_in;
            let xpl = &xp[off..off + plane_in];
            for ky in 0..k {
                for kx in 0..k {
                    let wi = (c * k + ky) * k + kx;
                    let wv = w[wi];
                    let mut acc = T::zero();
                    for oy in 0..ho {
                        let grow = &go[oy * wo..(oy + 1) * wo];
                        let base = (oy * s + ky) * wp + kx;
                        for (ox, &gv) in grow.iter().enumerate() {
                            let xi = base + ox * s;
                            acc += gv * xpl[xi];
                            if let Some(dx) = dxp.as_deref_mut() {
                                dx[off + xi] += wv * gv;
                            }
                        }
                    }
                    if let Some(dw) = dw.as_deref_mut() {
                        dw[wi] += acc;
                    }
                }
            }
        }
    }
}

/// Inserts `stride - 1` zeros between input pixels and pads by `lo`/`hi`,
/// turning a transposed convolution into a stride-1 convolution.
pub fn dilate_pad<T: Scalar>(x: &[T], planes: usize, h: usize, w: usize, stride: usize, lo: usize, hi: usize) -> Vec<T> {
    let hd = (h - 1) * stride + 1 + lo + hi;
    let wd = (w - 1) * stride + 1 + lo + hi;
    let mut out = vec![T::zero(); planes * hd * wd];
    for p in 0..planes {
        for y in 0..h {
            for xx in 0..w {
                out[p * hd * wd + (lo + y * stride) * wd + lo + xx * stride] = x[(p * h + y) * w + xx];
            }
        }
    }
    out
}

/// Maps a transposed-conv weight `(cin, cout, k, k)` to the equivalent
/// stride-1 conv weight `(cout, cin, k, k)` with flipped taps.
pub fn transpose_flip<T: Scalar>(w: &[T], cin: usize, cout: usize, k: usize) -> Vec<T> {
    let mut out = vec![T::zero(); w.len()];
    for i in 0..cin {
        for o in 0..cout {
            for ky in 0..k {
                for kx in 0..k {
                    out[((o * cin + i) * k + ky) * k + kx] = w[((i * cout + o) * k + (k - 1 - ky)) * k + (k - 1 - kx)];
                }
            }
        }
    }
    out
}

/// Adjoint of [`transpose_flip`], accumulating into `dw`.
pub fn transpose_flip_backward<T: Scalar>(dflip: &[T], cin: usize, cout: usize, k: usize, dw: &mut [T]) {
    for i in 0..cin {
        for o in 0..cout {
            for ky in 0..k {
                for kx in 0..k {
                    dw[((i * cout + o) * k + (k - 1 - ky)) * k + (k - 1 - kx)] += dflip[((o * cin + i) * k + ky) * k + kx];
                }
            }
        }
    }
}

/// Layout of a normalization: statistics per (sample, channel) for
/// instance norm, per channel across the batch for batch norm.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NormGeom {
    pub n: usize,
    pub c: usize,
    pub hw: usize,
    pub per_sample: bool,
}

impl NormGeom {
    pub fn groups(&self) -> usize {
        if self.per_sample {
            self.n * self.c
        } else {
            self.c
        }
    }

    fn group_len(&self) -> usize {
        if self.per_sample {
            self.hw
        } else {
            self.n * self.hw
        }
    }

    fn channel(&self, group: usize) -> usize {
        if self.per_sample {
            group % self.c
        } else {
            group
        }
    }

    /// Start offsets of the contiguous `hw` runs making up `group`.
    fn runs(&self, group: usize) -> impl Iterator<Item = usize> + '_ {
        let per_sample = self.per_sample;
        let (n, c, hw) = (self.n, self.c, self.hw);
        (0..if per_sample { 1 } else { n }).map(move |i| {
            if per_sample {
                group * hw
            } else {
                (i * c + group) * hw
            }
        })
    }
}

#[derive(Debug, Clone)]
pub struct NormSaved<T> {
    pub xhat: Vec<T>,
    pub inv_std: Vec<f64>,
    pub mean: Vec<f64>,
    /// Biased variance per group.
    pub var: Vec<f64>,
}

/// Normalizes with statistics computed from `x`, then applies the affine
/// transform. Returns the output, saved values for backward, and the
/// multiply count (squared deviations plus normalization, `2 · numel`).
pub fn norm_forward<T: Scalar>(
    x: &[T],
    g: &NormGeom,
    gamma: &[T],
    beta: &[T],
    eps: f64,
) -> (Vec<T>, NormSaved<T>, u64) {
    let groups = g.groups();
    let m = g.group_len() as f64;
    let mut y = vec![T::zero(); x.len()];
    let mut xhat = vec![T::zero(); x.len()];
    let mut inv_std = vec![0.0; groups];
    let mut means = vec![0.0; groups];
    let mut vars = vec![0.0; groups];
    let mut muls = 0u64;
    for gi in 0..groups {
        let c = g.channel(gi);
        let mut sum = 0.0;
        for r in g.runs(gi) {
            sum += x[r..r + g.hw].iter().map(|v| v.f64()).sum::<f64>();
        }
        let mean = sum / m;
        let mut sq = 0.0;
        for r in g.runs(gi) {
            for v in &x[r..r + g.hw] {
                let d = v.f64() - mean;
                sq += d * d;
            }
            muls += g.hw as u64;
        }
        let var = sq / m;
        let inv = 1.0 / (var + eps).sqrt();
        let (gm, bt) = (gamma[c], beta[c]);
        for r in g.runs(gi) {
            for i in r..r + g.hw {
                let xh = T::of((x[i].f64() - mean) * inv);
                xhat[i] = xh;
                y[i] = gm * xh + bt;
            }
            muls += g.hw as u64;
        }
        inv_std[gi] = inv;
        means[gi] = mean;
        vars[gi] = var;
    }
    (
        y,
        NormSaved {
            xhat,
            inv_std,
            mean: means,
            var: vars,
        },
        muls,
    )
}

pub fn norm_backward<T: Scalar>(
    dy: &[T],
    g: &NormGeom,
    gamma: &[T],
    saved: &NormSaved<T>,
    mut dx: Option<&mut [T]>,
    mut dgamma: Option<&mut [T]>,
    mut dbeta: Option<&mut [T]>,
) {
    let m = g.group_len() as f64;
    for gi in 0..g.groups() {
        let c = g.channel(gi);
        let gm = gamma[c].f64();
        let (mut sdy, mut sdy_xh) = (0.0, 0.0);
        for r in g.runs(gi) {
            for i in r..r + g.hw {
                let d = dy[i].f64();
                sdy += d;
                sdy_xh += d * saved.xhat[i].f64();
            }
        }
        if let Some(db) = dbeta.as_deref_mut() {
            db[c] += T::of(sdy);
        }
        if let Some(dg) = dgamma.as_deref_mut() {
            dg[c] += T::of(sdy_xh);
        }
        if let Some(dx) = dx.as_deref_mut() {
            // dxhat = dy * gamma
            let inv = saved.inv_std[gi];
            let (s1, s2) = (gm * sdy, gm * sdy_xh);
            for r in g.runs(gi) {
                for i in r..r + g.hw {
                    let dxh = dy[i].f64() * gm;
                    let v = inv / m * (m * dxh - s1 - saved.xhat[i].f64() * s2);
                    dx[i] += T::of(v);
                }
            }
        }
    }
}

/// Normalization with fixed per-channel statistics (inference batch norm).
/// Foldable into the preceding convolution, so no multiplies are counted.
pub fn norm_fixed_forward<T: Scalar>(
    x: &[T],
    n: usize,
    c: usize,
    hw: usize,
    gamma: &[T],
    beta: &[T],
    mean: &[T],
    var: &[T],
    eps: f64,
) -> (Vec<T>, Vec<T>, Vec<f64>) {
    let mut y = vec![T::zero(); x.len()];
    let mut xhat = vec![T::zero(); x.len()];
    let inv: Vec<f64> = var.iter().map(|v| 1.0 / (v.f64() + eps).sqrt()).collect();
    for s in 0..n {
        for ch in 0..c {
            let off = (s * c + ch) * hw;
            let mu = mean[ch].f64();
            for i in off..off + hw {
                let xh = T::of((x[i].f64() - mu) * inv[ch]);
                xhat[i] = xh;
                y[i] = gamma[ch] * xh + beta[ch];
            }
        }
    }
    (y, xhat, inv)
}
