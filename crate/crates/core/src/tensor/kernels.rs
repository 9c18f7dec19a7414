//! Raw forward/backward kernels on flat buffers. Shape checking happens in
//! the graph layer; these assume consistent inputs.

use super::Real;

/// `c = alpha * op(a) * op(b) + beta * c` for row-major buffers, where
/// `op(a)` is `m x k` and `op(b)` is `k x n`.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    trans_a: bool,
    trans_b: bool,
    m: usize,
    n: usize,
    k: usize,
    alpha: Real,
    a: &[Real],
    b: &[Real],
    beta: Real,
    c: &mut [Real],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if trans_a {
        (1, m as isize)
    } else {
        (k as isize, 1)
    };
    let (rsb, csb) = if trans_b {
        (1, k as isize)
    } else {
        (n as isize, 1)
    };
    // SAFETY: the assertion above guarantees every strided access stays
    // inside the buffers for the given dimensions.
    unsafe {
        #[cfg(not(feature = "f64"))]
        matrixmultiply::sgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
        #[cfg(feature = "f64")]
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub fn conv_output_size(
    input: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
) -> Option<usize> {
    let padded = input + 2 * padding;
    if padded < kernel || stride == 0 {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    fn col_rows(&self) -> usize {
        self.cin * self.k * self.k
    }
    fn col_cols(&self) -> usize {
        self.ho * self.wo
    }
}

/// Output indices `o` in `[lo, hi)` whose input index `o * stride + off - pad`
/// lies inside `[0, n_in)`.
#[inline]
fn valid_span(n_out: usize, n_in: usize, stride: usize, off: usize, pad: usize) -> (usize, usize) {
    let lo = if pad > off {
        (pad - off).div_ceil(stride)
    } else {
        0
    };
    let hi = if n_in + pad > off {
        (n_in + pad - off).div_ceil(stride)
    } else {
        0
    };
    (lo.min(n_out), hi.min(n_out).max(lo.min(n_out)))
}

/// Unfolds one `Cin x H x W` image into a `(Cin*k*k) x (Ho*Wo)` matrix.
pub(crate) fn im2col(x: &[Real], g: &ConvGeom, col: &mut Vec<Real>) {
    col.clear();
    col.resize(g.col_rows() * g.col_cols(), 0.0);
    let p = g.col_cols();
    for c in 0..g.cin {
        for ky in 0..g.k {
            let (oy0, oy1) = valid_span(g.ho, g.h, g.stride, ky, g.pad);
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let dst = &mut col[row * p..(row + 1) * p];
                let (ox0, ox1) = valid_span(g.wo, g.w, g.stride, kx, g.pad);
                if ox0 == ox1 {
                    continue;
                }
                for oy in oy0..oy1 {
                    let iy = oy * g.stride + ky - g.pad;
                    let src = &x[(c * g.h + iy) * g.w..][..g.w];
                    let drow = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    let ix0 = ox0 * g.stride + kx - g.pad;
                    if g.stride == 1 {
                        drow[ox0..ox1].copy_from_slice(&src[ix0..ix0 + (ox1 - ox0)]);
                    } else {
                        for (d, s) in drow[ox0..ox1]
                            .iter_mut()
                            .zip(src[ix0..].iter().step_by(g.stride))
                        {
                            *d = *s;
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates a column matrix back into an image.
pub(crate) fn col2im(col: &[Real], g: &ConvGeom, dx: &mut [Real]) {
    let p = g.col_cols();
    for c in 0..g.cin {
        for ky in 0..g.k {
            let (oy0, oy1) = valid_span(g.ho, g.h, g.stride, ky, g.pad);
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let src = &col[row * p..(row + 1) * p];
                let (ox0, ox1) = valid_span(g.wo, g.w, g.stride, kx, g.pad);
                if ox0 == ox1 {
                    continue;
                }
                for oy in oy0..oy1 {
                    let iy = oy * g.stride + ky - g.pad;
                    let drow = &mut dx[(c * g.h + iy) * g.w..][..g.w];
                    let srow = &src[oy * g.wo + ox0..oy * g.wo + ox1];
                    let ix0 = ox0 * g.stride + kx - g.pad;
                    if g.stride == 1 {
                        for (d, &v) in drow[ix0..ix0 + srow.len()].iter_mut().zip(srow) {
                            *d += v;
                        }
                    } else {
                        for (d, &v) in drow[ix0..].iter_mut().step_by(g.stride).zip(srow) {
                            *d += v;
                        }
                    }
                }
            }
        }
    }
}

/// Forward convolution over a batch of `n` images.
pub(crate) fn conv2d_forward(
    x: &[Real],
    w: &[Real],
    b: &[Real],
    n: usize,
    cout: usize,
    g: &ConvGeom,
) -> Vec<Real> {
    let in_sz = g.cin * g.h * g.w;
    let out_sz = cout * g.col_cols();
    let mut out = vec![0.0; n * out_sz];
    let mut col = Vec::new();
    for i in 0..n {
        im2col(&x[i * in_sz..(i + 1) * in_sz], g, &mut col);
        let y = &mut out[i * out_sz..(i + 1) * out_sz];
        for (co, chunk) in y.chunks_exact_mut(g.col_cols()).enumerate() {
            chunk.fill(b[co]);
        }
        gemm(
            false,
            false,
            cout,
            g.col_cols(),
            g.col_rows(),
            1.0,
            w,
            &col,
            1.0,
            y,
        );
    }
    out
}

/// Returns `(dx, dw, db)` for the convolution given upstream `dy`.
pub(crate) fn conv2d_backward(
    x: &[Real],
    w: &[Real],
    dy: &[Real],
    n: usize,
    cout: usize,
    g: &ConvGeom,
    need_dx: bool,
    need_dw: bool,
) -> (Vec<Real>, Vec<Real>, Vec<Real>) {
    let in_sz = g.cin * g.h * g.w;
    let p = g.col_cols();
    let out_sz = cout * p;
    let mut dx = if need_dx {
        vec![0.0; n * in_sz]
    } else {
        Vec::new()
    };
    let mut dw = vec![0.0; w.len()];
    let mut db = vec![0.0; cout];
    let mut col = Vec::new();
    let mut dcol = vec![0.0; g.col_rows() * p];
    for i in 0..n {
        let dyi = &dy[i * out_sz..(i + 1) * out_sz];
        for (co, chunk) in dyi.chunks_exact(p).enumerate() {
            db[co] += chunk.iter().map(|&v| v as f64).sum::<f64>() as Real;
        }
        if need_dw {
            im2col(&x[i * in_sz..(i + 1) * in_sz], g, &mut col);
            gemm(
                false,
                true,
                cout,
                g.col_rows(),
                p,
                1.0,
                dyi,
                &col,
                1.0,
                &mut dw,
            );
        }
        if need_dx {
            gemm(
                true,
                false,
                g.col_rows(),
                p,
                cout,
                1.0,
                w,
                dyi,
                0.0,
                &mut dcol,
            );
            col2im(&dcol, g, &mut dx[i * in_sz..(i + 1) * in_sz]);
        }
    }
    (dx, dw, db)
}

/// Bilinear lookup weights for a coordinate in `[0, size-1]`.
#[inline]
pub(crate) fn bilinear_cell(coord: Real, size: usize) -> (usize, usize, Real) {
    if size == 1 {
        return (0, 0, 0.0);
    }
    let i0 = (coord.floor() as usize).min(size - 2);
    (i0, i0 + 1, coord - i0 as Real)
}

#[inline]
pub(crate) fn in_bounds(u: Real, v: Real, w: usize, h: usize) -> bool {
    u.is_finite()
        && v.is_finite()
        && u >= 0.0
        && v >= 0.0
        && u <= (w - 1) as Real
        && v <= (h - 1) as Real
}

/// Samples `map` (`C x H x W`) at pixel coordinates `coords` (`2 x Hg x Wg`,
/// channel 0 = u, channel 1 = v). Out-of-bounds samples are 0 and invalid.
pub(crate) fn grid_sample_forward(
    map: &[Real],
    c: usize,
    h: usize,
    w: usize,
    coords: &[Real],
    npix: usize,
) -> (Vec<Real>, Vec<bool>) {
    let mut out = vec![0.0; c * npix];
    let mut valid = vec![false; npix];
    let (us, vs) = coords.split_at(npix);
    for i in 0..npix {
        let (u, v) = (us[i], vs[i]);
        if !in_bounds(u, v, w, h) {
            continue;
        }
        valid[i] = true;
        let (x0, x1, fx) = bilinear_cell(u, w);
        let (y0, y1, fy) = bilinear_cell(v, h);
        let (w00, w01, w10, w11) = (
            (1.0 - fx) * (1.0 - fy),
            fx * (1.0 - fy),
            (1.0 - fx) * fy,
            fx * fy,
        );
        for ch in 0..c {
            let m = &map[ch * h * w..(ch + 1) * h * w];
            out[ch * npix + i] = w00 * m[y0 * w + x0]
                + w01 * m[y0 * w + x1]
                + w10 * m[y1 * w + x0]
                + w11 * m[y1 * w + x1];
        }
    }
    (out, valid)
}

/// Returns `(dmap, dcoords)`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn grid_sample_backward(
    map: &[Real],
    c: usize,
    h: usize,
    w: usize,
    coords: &[Real],
    npix: usize,
    valid: &[bool],
    dy: &[Real],
) -> (Vec<Real>, Vec<Real>) {
    let mut dmap = vec![0.0; map.len()];
    let mut dcoords = vec![0.0; 2 * npix];
    let (us, vs) = coords.split_at(npix);
    for i in 0..npix {
        if !valid[i] {
            continue;
        }
        let (x0, x1, fx) = bilinear_cell(us[i], w);
        let (y0, y1, fy) = bilinear_cell(vs[i], h);
        let (w00, w01, w10, w11) = (
            (1.0 - fx) * (1.0 - fy),
            fx * (1.0 - fy),
            (1.0 - fx) * fy,
            fx * fy,
        );
        let mut du = 0.0f64;
        let mut dv = 0.0f64;
        for ch in 0..c {
            let g = dy[ch * npix + i];
            if g == 0.0 {
                continue;
            }
            let base = ch * h * w;
            let m00 = map[base + y0 * w + x0];
            let m01 = map[base + y0 * w + x1];
            let m10 = map[base + y1 * w + x0];
            let m11 = map[base + y1 * w + x1];
            dmap[base + y0 * w + x0] += g * w00;
            dmap[base + y0 * w + x1] += g * w01;
            dmap[base + y1 * w + x0] += g * w10;
            dmap[base + y1 * w + x1] += g * w11;
            if w > 1 {
                du += (g * ((1.0 - fy) * (m01 - m00) + fy * (m11 - m10))) as f64;
            }
            if h > 1 {
                dv += (g * ((1.0 - fx) * (m10 - m00) + fx * (m11 - m01))) as f64;
            }
        }
        dcoords[i] = du as Real;
        dcoords[npix + i] = dv as Real;
    }
    (dmap, dcoords)
}

/// Central differences in the interior, one-sided at the borders.
/// `horizontal` selects d/du (along W) versus d/dv (along H).
pub(crate) fn spatial_gradient_forward(
    x: &[Real],
    c: usize,
    h: usize,
    w: usize,
    horizontal: bool,
) -> Vec<Real> {
    let mut out = vec![0.0; x.len()];
    for ch in 0..c {
        let m = &x[ch * h * w..(ch + 1) * h * w];
        let o = &mut out[ch * h * w..(ch + 1) * h * w];
        for y in 0..h {
            for xx in 0..w {
                o[y * w + xx] = if horizontal {
                    diff_at(|i| m[y * w + i], xx, w)
                } else {
                    diff_at(|i| m[i * w + xx], y, h)
                };
            }
        }
    }
    out
}

#[inline]
fn diff_at(f: impl Fn(usize) -> Real, i: usize, n: usize) -> Real {
    if i == 0 {
        f(1) - f(0)
    } else if i == n - 1 {
        f(n - 1) - f(n - 2)
    } else {
        0.5 * (f(i + 1) - f(i - 1))
    }
}

pub(crate) fn spatial_gradient_backward(
    dy: &[Real],
    c: usize,
    h: usize,
    w: usize,
    horizontal: bool,
) -> Vec<Real> {
    let mut dx = vec![0.0; dy.len()];
    let (n, stride) = if horizontal { (w, 1) } else { (h, w) };
    for ch in 0..c {
        let g = &dy[ch * h * w..(ch + 1) * h * w];
        let d = &mut dx[ch * h * w..(ch + 1) * h * w];
        for y in 0..h {
            for xx in 0..w {
                let idx = y * w + xx;
                let i = if horizontal { xx } else { y };
                let gv = g[idx];
                if gv == 0.0 {
                    continue;
                }
                let at = |j: usize| idx + j * stride - i * stride;
                if i == 0 {
                    d[at(1)] += gv;
                    d[at(0)] -= gv;
                } else if i == n - 1 {
                    d[at(n - 1)] += gv;
                    d[at(n - 2)] -= gv;
                } else {
                    d[at(i + 1)] += 0.5 * gv;
                    d[at(i - 1)] -= 0.5 * gv;
                }
            }
        }
    }
    dx
}

pub(crate) fn upsample2x_forward(x: &[Real], c: usize, h: usize, w: usize) -> Vec<Real> {
    let (h2, w2) = (2 * h, 2 * w);
    let mut out = vec![0.0; c * h2 * w2];
    for ch in 0..c {
        for y in 0..h2 {
            for xx in 0..w2 {
                out[(ch * h2 + y) * w2 + xx] = x[(ch * h + y / 2) * w + xx / 2];
            }
        }
    }
    out
}

/// Source index of every output pixel of an edge-replicate pad by `p`.
fn pad_edge_index(c: usize, h: usize, w: usize, p: usize) -> impl Iterator<Item = usize> {
    let (hp, wp) = (h + 2 * p, w + 2 * p);
    (0..c).flat_map(move |ch| {
        (0..hp).flat_map(move |y| {
            let sy = y.saturating_sub(p).min(h - 1);
            (0..wp).map(move |x| (ch * h + sy) * w + x.saturating_sub(p).min(w - 1))
        })
    })
}

pub(crate) fn pad_edge_forward(x: &[Real], c: usize, h: usize, w: usize, p: usize) -> Vec<Real> {
    pad_edge_index(c, h, w, p).map(|i| x[i]).collect()
}

pub(crate) fn pad_edge_backward(dy: &[Real], c: usize, h: usize, w: usize, p: usize) -> Vec<Real> {
    let mut dx = vec![0.0; c * h * w];
    for (i, &d) in pad_edge_index(c, h, w, p).zip(dy) {
        dx[i] += d;
    }
    dx
}

pub(crate) fn upsample2x_backward(dy: &[Real], c: usize, h: usize, w: usize) -> Vec<Real> {
    let (h2, w2) = (2 * h, 2 * w);
    let mut dx = vec![0.0; c * h * w];
    for ch in 0..c {
        for y in 0..h2 {
            for xx in 0..w2 {
                dx[(ch * h + y / 2) * w + xx / 2] += dy[(ch * h2 + y) * w2 + xx];
            }
        }
    }
    dx
}
