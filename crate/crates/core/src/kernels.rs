//! Raw slice kernels behind the tape ops.
//!
//! Matrix products go through `matrixmultiply`; 3×3 convolutions are
//! lowered to a product against an im2col buffer.

/// `c = a·b + beta·c` with `a: m×k`, `b: k×n`, both row-major unless the
/// matching `*_t` flag says the buffer holds the transpose.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the slice lengths are checked above against the m/k/n extents
    // and the strides describe dense row-major (or transposed) layouts.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
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

/// Unfolds a `c×h×w` image into a `(c·9)×(h·w)` patch matrix for a 3×3
/// stride-1 convolution with zero padding 1.
pub fn im2col3x3(x: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let hw = h * w;
    let mut col = vec![0.0; c * 9 * hw];
    for ch in 0..c {
        let plane = &x[ch * hw..(ch + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut col[((ch * 9) + ky * 3 + kx) * hw..][..hw];
                let (y0, y1) = valid_range(ky, h);
                let (x0, x1) = valid_range(kx, w);
                for y in y0..y1 {
                    let src = (y + ky - 1) * w;
                    let dst = &mut row[y * w + x0..y * w + x1];
                    dst.copy_from_slice(&plane[src + x0 + kx - 1..src + x1 + kx - 1]);
                }
            }
        }
    }
    col
}

/// Adjoint of [`im2col3x3`]: scatters a patch matrix back onto the image,
/// accumulating into `x`.
pub fn col2im3x3(col: &[f64], c: usize, h: usize, w: usize, x: &mut [f64]) {
    let hw = h * w;
    for ch in 0..c {
        let plane = &mut x[ch * hw..(ch + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &col[((ch * 9) + ky * 3 + kx) * hw..][..hw];
                let (y0, y1) = valid_range(ky, h);
                let (x0, x1) = valid_range(kx, w);
                for y in y0..y1 {
                    let dst = (y + ky - 1) * w;
                    let src = &row[y * w + x0..y * w + x1];
                    for (d, s) in plane[dst + x0 + kx - 1..dst + x1 + kx - 1]
                        .iter_mut()
                        .zip(src)
                    {
                        *d += s;
                    }
                }
            }
        }
    }
}

// Output rows/cols whose tap at offset `k - 1` lands inside the image.
fn valid_range(k: usize, n: usize) -> (usize, usize) {
    match k {
        0 => (1, n),
        1 => (0, n),
        _ => (0, n.saturating_sub(1)),
    }
}

/// Direct 3×3 convolution, used as a test oracle and for tiny fixed kernels.
pub fn conv3x3_direct(
    x: &[f64],
    c_in: usize,
    h: usize,
    w: usize,
    kernel: &[f64],
    c_out: usize,
) -> Vec<f64> {
    let mut out = vec![0.0; c_out * h * w];
    for o in 0..c_out {
        for y in 0..h {
            for xx in 0..w {
                let mut acc = 0.0;
                for i in 0..c_in {
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let sy = y as isize + ky as isize - 1;
                            let sx = xx as isize + kx as isize - 1;
                            if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                continue;
                            }
                            acc += kernel[((o * c_in + i) * 3 + ky) * 3 + kx]
                                * x[(i * h + sy as usize) * w + sx as usize];
                        }
                    }
                }
                out[(o * h + y) * w + xx] = acc;
            }
        }
    }
    out
}
