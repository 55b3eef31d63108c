//! Raw numeric kernels shared by the tape ops and tape-free preprocessing.

/// `c = a·b + beta·c` on strided row-major views.
///
/// `a` is `m×k`, `b` is `k×n`, `c` is `m×n` (contiguous). Transposition is
/// expressed through the `(row_stride, col_stride)` pairs.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (usize, usize),
    b: &[f64],
    b_strides: (usize, usize),
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(c.len() >= m * n);
    if k > 0 {
        let a_last = (m - 1) * a_strides.0 + (k - 1) * a_strides.1;
        let b_last = (k - 1) * b_strides.0 + (n - 1) * b_strides.1;
        assert!(a_last < a.len() && b_last < b.len());
    }
    // SAFETY: the asserts above bound every strided access into `a`, `b` and `c`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0 as isize,
            a_strides.1 as isize,
            b.as_ptr(),
            b_strides.0 as isize,
            b_strides.1 as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub const ROW_MAJOR: fn(usize) -> (usize, usize) = |cols| (cols, 1);
pub const TRANSPOSED: fn(usize) -> (usize, usize) = |cols| (1, cols);

#[derive(Clone, Copy, Debug)]
pub struct ConvGeom {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn new(c: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize) -> Option<Self> {
        if stride == 0 || h + 2 * pad < k || w + 2 * pad < k {
            return None;
        }
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (w + 2 * pad - k) / stride + 1;
        Some(Self { c, h, w, k, stride, pad, oh, ow })
    }

    pub fn col_rows(&self) -> usize {
        self.c * self.k * self.k
    }

    pub fn col_cols(&self) -> usize {
        self.oh * self.ow
    }
}

/// Unfolds one `C×H×W` image into a `(C·k·k) × (OH·OW)` matrix.
pub fn im2col(img: &[f64], g: &ConvGeom, col: &mut [f64]) {
    let cols = g.col_cols();
    for c in 0..g.c {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let dst = &mut col[row * cols..(row + 1) * cols];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let out_row = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize {
                        out_row.fill(0.0);
                        continue;
                    }
                    let src = &img[(c * g.h + iy as usize) * g.w..(c * g.h + iy as usize + 1) * g.w];
                    for (ox, o) in out_row.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *o = if ix < 0 || ix >= g.w as isize { 0.0 } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters-adds a column matrix back into an image.
pub fn col2im(col: &[f64], g: &ConvGeom, img: &mut [f64]) {
    let cols = g.col_cols();
    for c in 0..g.c {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let src = &col[row * cols..(row + 1) * cols];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let base = (c * g.h + iy as usize) * g.w;
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && (ix as usize) < g.w {
                            img[base + ix as usize] += src[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Interpolation taps along one axis: `(lower index, upper index, upper weight)`.
///
/// Half-pixel centers: `src = (dst + 0.5)·(in/out) − 0.5`, clamped to `[0, in−1]`.
pub fn resize_taps(in_len: usize, out_len: usize) -> Vec<(usize, usize, f64)> {
    let ratio = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|d| {
            let src = ((d as f64 + 0.5) * ratio - 0.5).clamp(0.0, (in_len - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(in_len - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

/// Bilinear resize of `planes` stacked `h×w` planes to `oh×ow`.
pub fn resize_bilinear(src: &[f64], planes: usize, h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
    let ty = resize_taps(h, oh);
    let tx = resize_taps(w, ow);
    let mut out = vec![0.0; planes * oh * ow];
    for p in 0..planes {
        let plane = &src[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for (y, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (x, &(x0, x1, fx)) in tx.iter().enumerate() {
                let top = (1.0 - fx) * plane[y0 * w + x0] + fx * plane[y0 * w + x1];
                let bot = (1.0 - fx) * plane[y1 * w + x0] + fx * plane[y1 * w + x1];
                dst[y * ow + x] = (1.0 - fy) * top + fy * bot;
            }
        }
    }
    out
}

/// Adjoint of [`resize_bilinear`].
pub fn resize_bilinear_adjoint(
    grad: &[f64],
    planes: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
    out: &mut [f64],
) {
    let ty = resize_taps(h, oh);
    let tx = resize_taps(w, ow);
    for p in 0..planes {
        let g = &grad[p * oh * ow..(p + 1) * oh * ow];
        let dst = &mut out[p * h * w..(p + 1) * h * w];
        for (y, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (x, &(x0, x1, fx)) in tx.iter().enumerate() {
                let v = g[y * ow + x];
                let top = (1.0 - fy) * v;
                let bot = fy * v;
                dst[y0 * w + x0] += (1.0 - fx) * top;
                dst[y0 * w + x1] += fx * top;
                dst[y1 * w + x0] += (1.0 - fx) * bot;
                dst[y1 * w + x1] += fx * bot;
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh-approximated GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_matches_naive_with_transposes() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2x3
        let b = [1.0, 0.5, -1.0, 2.0, 0.0, 1.0]; // 3x2
        let mut c = [0.0; 4];
        gemm(2, 3, 2, &a, ROW_MAJOR(3), &b, ROW_MAJOR(2), 0.0, &mut c);
        assert_eq!(c, [1.0 - 2.0, 0.5 + 4.0 + 3.0, 4.0 - 5.0, 2.0 + 10.0 + 6.0]);
        // aᵀ·a via strides: 3x3
        let mut ata = [0.0; 9];
        gemm(3, 2, 3, &a, TRANSPOSED(3), &a, ROW_MAJOR(3), 0.0, &mut ata);
        assert_eq!(ata[0], 1.0 + 16.0);
        assert_eq!(ata[1], 2.0 + 20.0);
        assert_eq!(ata[8], 9.0 + 36.0);
    }

    #[test]
    fn half_pixel_resize_upsample_line() {
        let out = resize_bilinear(&[0.0, 1.0], 1, 1, 2, 1, 4);
        assert_eq!(out, vec![0.0, 0.25, 0.75, 1.0]);
    }

    #[test]
    fn im2col_col2im_are_adjoint() {
        let g = ConvGeom::new(2, 5, 4, 3, 2, 1).unwrap();
        let img: Vec<f64> = (0..40).map(|i| (i as f64 * 0.37).sin()).collect();
        let mut col = vec![0.0; g.col_rows() * g.col_cols()];
        im2col(&img, &g, &mut col);
        let probe: Vec<f64> = (0..col.len()).map(|i| (i as f64 * 0.11).cos()).collect();
        let mut back = vec![0.0; img.len()];
        col2im(&probe, &g, &mut back);
        let lhs: f64 = col.iter().zip(&probe).map(|(a, b)| a * b).sum();
        let rhs: f64 = img.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn stable_scalar_functions() {
        assert!(softplus(800.0).is_finite() && softplus(-800.0) >= 0.0);
        assert_eq!(sigmoid(0.0), 0.5);
        assert!((gelu(0.0)).abs() < 1e-15);
    }
}
