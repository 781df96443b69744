//! Convolution lowering and the dense kernels behind the graph ops.

use crate::real::{gemm, Mat, Real};

/// Shape bookkeeping for a 2-D convolution over a `[c][h][w]` image.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub sh: usize,
    pub sw: usize,
    pub ph: usize,
    pub pw: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new(c: usize, h: usize, w: usize, kernel: [usize; 2], stride: [usize; 2], pad: [usize; 2]) -> Option<Self> {
        let [kh, kw] = kernel;
        let [sh, sw] = stride;
        let [ph, pw] = pad;
        if sh == 0 || sw == 0 || h + 2 * ph < kh || w + 2 * pw < kw {
            return None;
        }
        Some(Self {
            c,
            h,
            w,
            kh,
            kw,
            sh,
            sw,
            ph,
            pw,
            ho: (h + 2 * ph - kh) / sh + 1,
            wo: (w + 2 * pw - kw) / sw + 1,
        })
    }

    /// Rows of the lowered matrix, `c·kh·kw`.
    pub fn k(&self) -> usize {
        self.c * self.kh * self.kw
    }

    /// Columns of the lowered matrix, `ho·wo`.
    pub fn n(&self) -> usize {
        self.ho * self.wo
    }
}

impl ConvGeom {
    /// Output columns `lo..hi` whose tap `kj` lands inside the row, and the
    /// input column of `lo`.
    fn valid_cols(&self, kj: usize) -> (usize, usize, usize) {
        let lo = self.pw.saturating_sub(kj).div_ceil(self.sw).min(self.wo);
        let reach = self.w + self.pw;
        let hi = if reach > kj {
            ((reach - kj - 1) / self.sw + 1).min(self.wo)
        } else {
            0
        };
        let hi = hi.max(lo);
        (lo, hi, lo * self.sw + kj - self.pw.min(lo * self.sw + kj))
    }
}

/// Lowers `x` to `[c·kh·kw][ho·wo]` patches.
pub fn im2col<T: Real>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let n = g.n();
    debug_assert_eq!(cols.len(), g.k() * n);
    for c in 0..g.c {
        let img = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = ((c * g.kh + ki) * g.kw + kj) * n;
                let (lo, hi, ix0) = g.valid_cols(kj);
                for oy in 0..g.ho {
                    let dst = &mut cols[row + oy * g.wo..row + (oy + 1) * g.wo];
                    let iy = (oy * g.sh + ki) as isize - g.ph as isize;
                    if iy < 0 || iy >= g.h as isize || lo == hi {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src = &img[iy as usize * g.w..(iy as usize + 1) * g.w];
                    dst[..lo].fill(T::zero());
                    dst[hi..].fill(T::zero());
                    if g.sw == 1 {
                        dst[lo..hi].copy_from_slice(&src[ix0..ix0 + hi - lo]);
                    } else {
                        for (d, &v) in dst[lo..hi].iter_mut().zip(src[ix0..].iter().step_by(g.sw)) {
                            *d = v;
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters patches back, accumulating into `x`.
pub fn col2im<T: Real>(cols: &[T], g: &ConvGeom, x: &mut [T]) {
    let n = g.n();
    for c in 0..g.c {
        let img = &mut x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = ((c * g.kh + ki) * g.kw + kj) * n;
                let (lo, hi, ix0) = g.valid_cols(kj);
                if lo == hi {
                    continue;
                }
                for oy in 0..g.ho {
                    let iy = (oy * g.sh + ki) as isize - g.ph as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src = &cols[row + oy * g.wo + lo..row + oy * g.wo + hi];
                    let dst = &mut img[iy as usize * g.w..(iy as usize + 1) * g.w];
                    if g.sw == 1 {
                        for (d, &v) in dst[ix0..ix0 + hi - lo].iter_mut().zip(src) {
                            *d += v;
                        }
                    } else {
                        for (d, &v) in dst[ix0..].iter_mut().step_by(g.sw).zip(src) {
                            *d += v;
                        }
                    }
                }
            }
        }
    }
}

fn add_bias<T: Real>(y: &mut [T], bias: &[T], plane: usize) {
    for (co, &b) in bias.iter().enumerate() {
        for v in &mut y[co * plane..(co + 1) * plane] {
            *v += b;
        }
    }
}

fn bias_grad<T: Real>(dy: &[T], plane: usize, db: &mut [T]) {
    for (co, d) in db.iter_mut().enumerate() {
        *d += dy[co * plane..(co + 1) * plane].iter().copied().sum::<T>();
    }
}

/// Dense convolution; `w` is `[cout][c·kh·kw]`.
pub fn conv_forward<T: Real>(x: &[T], w: &[T], bias: Option<&[T]>, g: &ConvGeom, cout: usize) -> Vec<T> {
    let (k, n) = (g.k(), g.n());
    let mut cols = vec![T::zero(); k * n];
    im2col(x, g, &mut cols);
    let mut y = vec![T::zero(); cout * n];
    gemm(w, Mat::rm(0, cout, k), &cols, Mat::rm(0, k, n), &mut y, Mat::rm(0, cout, n), false);
    if let Some(b) = bias {
        add_bias(&mut y, b, n);
    }
    y
}

/// Accumulates gradients of a dense convolution.
#[allow(clippy::too_many_arguments)]
pub fn conv_backward<T: Real>(
    x: &[T],
    w: &[T],
    g: &ConvGeom,
    cout: usize,
    dy: &[T],
    dx: Option<&mut [T]>,
    dw: Option<&mut [T]>,
    db: Option<&mut [T]>,
) {
    let (k, n) = (g.k(), g.n());
    if let Some(db) = db {
        bias_grad(dy, n, db);
    }
    if let Some(dw) = dw {
        let mut cols = vec![T::zero(); k * n];
        im2col(x, g, &mut cols);
        gemm(dy, Mat::rm(0, cout, n), &cols, Mat::rm(0, k, n).t(), dw, Mat::rm(0, cout, k), true);
    }
    if let Some(dx) = dx {
        let mut dcols = vec![T::zero(); k * n];
        gemm(w, Mat::rm(0, cout, k).t(), dy, Mat::rm(0, cout, n), &mut dcols, Mat::rm(0, k, n), false);
        col2im(&dcols, g, dx);
    }
}

/// Stride-1 convolution whose weights change every `band` rows;
/// `w` is `[bands][cout][c·kh·kw]` and `bias` is `[bands][cout]`.
pub fn subband_forward<T: Real>(
    x: &[T],
    w: &[T],
    bias: Option<&[T]>,
    g: &ConvGeom,
    cout: usize,
    band: usize,
) -> Vec<T> {
    let (k, n) = (g.k(), g.n());
    let mut cols = vec![T::zero(); k * n];
    im2col(x, g, &mut cols);
    let mut y = vec![T::zero(); cout * n];
    for row in 0..g.ho {
        let bnd = row / band;
        gemm(
            w,
            Mat::rm(bnd * cout * k, cout, k),
            &cols,
            Mat::with_strides(row * g.wo, k, g.wo, n, 1),
            &mut y,
            Mat::with_strides(row * g.wo, cout, g.wo, n, 1),
            false,
        );
        if let Some(b) = bias {
            for co in 0..cout {
                let bv = b[bnd * cout + co];
                for v in &mut y[co * n + row * g.wo..co * n + (row + 1) * g.wo] {
                    *v += bv;
                }
            }
        }
    }
    y
}

#[allow(clippy::too_many_arguments)]
pub fn subband_backward<T: Real>(
    x: &[T],
    w: &[T],
    g: &ConvGeom,
    cout: usize,
    band: usize,
    dy: &[T],
    dx: Option<&mut [T]>,
    dw: Option<&mut [T]>,
    db: Option<&mut [T]>,
) {
    let (k, n) = (g.k(), g.n());
    if let Some(db) = db {
        for row in 0..g.ho {
            let bnd = row / band;
            for co in 0..cout {
                db[bnd * cout + co] += dy[co * n + row * g.wo..co * n + (row + 1) * g.wo]
                    .iter()
                    .copied()
                    .sum::<T>();
            }
        }
    }
    if let Some(dw) = dw {
        let mut cols = vec![T::zero(); k * n];
        im2col(x, g, &mut cols);
        for row in 0..g.ho {
            let bnd = row / band;
            gemm(
                dy,
                Mat::with_strides(row * g.wo, cout, g.wo, n, 1),
                &cols,
                Mat::with_strides(row * g.wo, g.wo, k, 1, n),
                dw,
                Mat::rm(bnd * cout * k, cout, k),
                true,
            );
        }
    }
    if let Some(dx) = dx {
        let mut dcols = vec![T::zero(); k * n];
        for row in 0..g.ho {
            let bnd = row / band;
            gemm(
                w,
                Mat::rm(bnd * cout * k, cout, k).t(),
                dy,
                Mat::with_strides(row * g.wo, cout, g.wo, n, 1),
                &mut dcols,
                Mat::with_strides(row * g.wo, k, g.wo, n, 1),
                false,
            );
        }
        col2im(&dcols, g, dx);
    }
}

/// Transposed convolution. `g` describes the forward convolution that maps
/// the `[cout][ho'][wo']` output back to the `[cin][h][w]` input, so
/// `g.c = cout`, `(g.h, g.w)` is the output size and `(g.ho, g.wo)` the input
/// size. `w` is `[cin][cout·kh·kw]`.
pub fn conv_t_forward<T: Real>(x: &[T], w: &[T], bias: Option<&[T]>, g: &ConvGeom, cin: usize) -> Vec<T> {
    let (k, n) = (g.k(), g.n());
    let mut cols = vec![T::zero(); k * n];
    gemm(w, Mat::rm(0, cin, k).t(), x, Mat::rm(0, cin, n), &mut cols, Mat::rm(0, k, n), false);
    let mut y = vec![T::zero(); g.c * g.h * g.w];
    col2im(&cols, g, &mut y);
    if let Some(b) = bias {
        add_bias(&mut y, b, g.h * g.w);
    }
    y
}

#[allow(clippy::too_many_arguments)]
pub fn conv_t_backward<T: Real>(
    x: &[T],
    w: &[T],
    g: &ConvGeom,
    cin: usize,
    dy: &[T],
    dx: Option<&mut [T]>,
    dw: Option<&mut [T]>,
    db: Option<&mut [T]>,
) {
    let (k, n) = (g.k(), g.n());
    if let Some(db) = db {
        bias_grad(dy, g.h * g.w, db);
    }
    if dx.is_none() && dw.is_none() {
        return;
    }
    let mut dcols = vec![T::zero(); k * n];
    im2col(dy, g, &mut dcols);
    if let Some(dx) = dx {
        gemm(w, Mat::rm(0, cin, k), &dcols, Mat::rm(0, k, n), dx, Mat::rm(0, cin, n), true);
    }
    if let Some(dw) = dw {
        gemm(x, Mat::rm(0, cin, n), &dcols, Mat::rm(0, k, n).t(), dw, Mat::rm(0, cin, k), true);
    }
}

#[inline]
pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct seven-loop convolution.
    fn naive_conv(x: &[f64], w: &[f64], g: &ConvGeom, cout: usize) -> Vec<f64> {
        let mut y = vec![0.0; cout * g.ho * g.wo];
        for co in 0..cout {
            for oy in 0..g.ho {
                for ox in 0..g.wo {
                    let mut acc = 0.0;
                    for c in 0..g.c {
                        for ki in 0..g.kh {
                            for kj in 0..g.kw {
                                let iy = (oy * g.sh + ki) as isize - g.ph as isize;
                                let ix = (ox * g.sw + kj) as isize - g.pw as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < g.h && (ix as usize) < g.w {
                                    acc += w[co * g.k() + (c * g.kh + ki) * g.kw + kj]
                                        * x[(c * g.h + iy as usize) * g.w + ix as usize];
                                }
                            }
                        }
                    }
                    y[(co * g.ho + oy) * g.wo + ox] = acc;
                }
            }
        }
        y
    }

    #[test]
    fn lowered_conv_matches_direct_loops() {
        let cases = [
            ([3, 3], [1, 1], [1, 1]),
            ([3, 3], [2, 2], [1, 1]),
            ([3, 3], [1, 2], [0, 1]),
            ([1, 1], [1, 1], [0, 0]),
            ([3, 5], [1, 3], [2, 3]),
            ([2, 3], [3, 2], [0, 2]),
        ];
        for (kernel, stride, pad) in cases {
            let g = ConvGeom::new(3, 7, 6, kernel, stride, pad).unwrap();
            let x: Vec<f64> = (0..3 * 7 * 6).map(|i| ((i * 37 % 11) as f64) - 5.0).collect();
            let w: Vec<f64> = (0..4 * g.k()).map(|i| ((i * 13 % 7) as f64) * 0.1 - 0.3).collect();
            let y = conv_forward(&x, &w, None, &g, 4);
            let want = naive_conv(&x, &w, &g, 4);
            for (a, b) in y.iter().zip(&want) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn strided_output_sizes() {
        let g = ConvGeom::new(1, 560, 96, [3, 3], [2, 2], [1, 1]).unwrap();
        assert_eq!((g.ho, g.wo), (280, 48));
        let g = ConvGeom::new(1, 35, 6, [3, 3], [2, 2], [1, 1]).unwrap();
        assert_eq!((g.ho, g.wo), (18, 3));
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        for (kernel, stride, pad) in [([3, 3], [2, 1], [1, 1]), ([3, 5], [1, 3], [2, 3]), ([1, 2], [2, 2], [0, 0])] {
            let g = ConvGeom::new(2, 5, 4, kernel, stride, pad).unwrap();
            let x: Vec<f64> = (0..40).map(|i| (i as f64 * 0.7).sin()).collect();
            let c: Vec<f64> = (0..g.k() * g.n()).map(|i| (i as f64 * 0.3).cos()).collect();
            let mut cols = vec![0.0; g.k() * g.n()];
            im2col(&x, &g, &mut cols);
            let mut back = vec![0.0; 40];
            col2im(&c, &g, &mut back);
            let lhs: f64 = cols.iter().zip(&c).map(|(a, b)| a * b).sum();
            let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() < 1e-10);
        }
    }

    #[test]
    fn transposed_conv_doubles_size() {
        // input 3×2, output 6×4 with stride 2, pad 1, output padding 1
        let g = ConvGeom::new(2, 6, 4, [3, 3], [2, 2], [1, 1]).unwrap();
        assert_eq!((g.ho, g.wo), (3, 2));
        let x = vec![1.0; 3 * 6];
        let w = vec![0.5; 3 * g.k()];
        let y = conv_t_forward(&x, &w, None, &g, 3);
        assert_eq!(y.len(), 2 * 6 * 4);
    }

    #[test]
    fn sigmoid_is_stable() {
        assert_eq!(sigmoid(-1000.0f64), 0.0);
        assert_eq!(sigmoid(1000.0f64), 1.0);
        assert!((sigmoid(0.0f64) - 0.5).abs() < 1e-15);
    }
}
