//! Signal-independent regularized least-squares Ambisonics encoder.
//!
//! Per frequency, `E(f) = Yᵀ Hᴴ(f) (H(f) Hᴴ(f) + β² I)⁻¹` where `H` holds the
//! array responses over a direction grid and `Y` the SN3D spherical harmonics
//! of the same directions.

use std::io::{Read, Write};

use nalgebra::DMatrix;
use num_complex::Complex64;
use rayon::prelude::*;

use crate::array::{atf, ArrayGeometry};
use crate::dsp::Spectrogram;
use crate::error::{Error, Result};
use crate::sh::{channel_count, sh_eval, DirectionGrid, Normalization};

const MAGIC: &[u8; 8] = b"AMBIENC1";

/// Cholesky pivots below this fraction of the largest diagonal entry count as singular.
const PIVOT_TOLERANCE: f64 = 1e-12;
/// Singular values below this fraction of the largest are dropped in the fallback solve.
const PINV_RCOND: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolveMethod {
    Cholesky,
    /// Regularized Gram matrix was numerically singular; solved with an
    /// eigendecomposition pseudo-inverse.
    PinvFallback,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StaticEncoder {
    pub order: usize,
    pub mics: usize,
    pub beta: f64,
    /// Sample rate of the STFT the bins belong to, 0 when the bins are arbitrary.
    pub sample_rate: f64,
    pub freqs: Vec<f64>,
    /// Per bin, a `(order+1)² × mics` row-major matrix.
    pub matrices: Vec<Vec<Complex64>>,
    pub methods: Vec<SolveMethod>,
}

impl StaticEncoder {
    pub fn channels(&self) -> usize {
        channel_count(self.order)
    }

    pub fn bins(&self) -> usize {
        self.matrices.len()
    }

    #[inline]
    pub fn entry(&self, bin: usize, c: usize, q: usize) -> Complex64 {
        self.matrices[bin][c * self.mics + q]
    }

    pub fn frobenius(&self, bin: usize) -> f64 {
        self.matrices[bin].iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
    }

    /// Bins whose Gram matrix needed the pseudo-inverse fallback.
    pub fn fallback_bins(&self) -> Vec<usize> {
        self.methods
            .iter()
            .enumerate()
            .filter(|(_, m)| **m == SolveMethod::PinvFallback)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&(self.mics as u32).to_le_bytes())?;
        w.write_all(&(self.order as u32).to_le_bytes())?;
        w.write_all(&(self.bins() as u32).to_le_bytes())?;
        w.write_all(&self.sample_rate.to_le_bytes())?;
        w.write_all(&self.beta.to_le_bytes())?;
        for m in &self.matrices {
            for z in m {
                w.write_all(&z.re.to_le_bytes())?;
                w.write_all(&z.im.to_le_bytes())?;
            }
        }
        Ok(())
    }

    /// Reads an encoder written by [`StaticEncoder::write_to`]. Bin
    /// frequencies are rebuilt as STFT bin centres; solve methods are not stored.
    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format("not an encoder file".into()));
        }
        let mut u = [0u8; 4];
        let mut f = [0u8; 8];
        let mut next_u32 = |r: &mut R| -> Result<usize> {
            r.read_exact(&mut u)?;
            Ok(u32::from_le_bytes(u) as usize)
        };
        let mics = next_u32(&mut r)?;
        let order = next_u32(&mut r)?;
        let bins = next_u32(&mut r)?;
        let mut next_f64 = |r: &mut R| -> Result<f64> {
            r.read_exact(&mut f)?;
            Ok(f64::from_le_bytes(f))
        };
        let sample_rate = next_f64(&mut r)?;
        let beta = next_f64(&mut r)?;
        let per_bin = channel_count(order) * mics;
        let mut matrices = Vec::with_capacity(bins);
        for _ in 0..bins {
            let mut m = Vec::with_capacity(per_bin);
            for _ in 0..per_bin {
                let re = next_f64(&mut r)?;
                let im = next_f64(&mut r)?;
                m.push(Complex64::new(re, im));
            }
            matrices.push(m);
        }
        let fft = 2 * bins.saturating_sub(1);
        let freqs = (0..bins)
            .map(|k| if fft > 0 { k as f64 * sample_rate / fft as f64 } else { 0.0 })
            .collect();
        Ok(Self {
            order,
            mics,
            beta,
            sample_rate,
            freqs,
            matrices,
            methods: vec![SolveMethod::Cholesky; bins],
        })
    }
}

/// In-place Cholesky of a Hermitian positive definite row-major `n×n`
/// matrix into its lower factor. Returns false on a non-positive pivot.
fn cholesky(a: &mut [Complex64], n: usize) -> bool {
    let max_diag = (0..n).map(|i| a[i * n + i].re).fold(0.0, f64::max);
    if max_diag <= 0.0 {
        return false;
    }
    for j in 0..n {
        let mut d = a[j * n + j].re;
        for k in 0..j {
            d -= a[j * n + k].norm_sqr();
        }
        if !(d > PIVOT_TOLERANCE * max_diag) {
            return false;
        }
        let d = d.sqrt();
        a[j * n + j] = Complex64::new(d, 0.0);
        for i in (j + 1)..n {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= a[i * n + k] * a[j * n + k].conj();
            }
            a[i * n + j] = s / d;
        }
        for i in 0..j {
            a[i * n + j] = Complex64::new(0.0, 0.0);
        }
    }
    true
}

/// Solves `L Lᴴ x = b` for every column of the row-major `n×m` right-hand side.
fn cholesky_solve(l: &[Complex64], n: usize, b: &mut [Complex64], m: usize) {
    for col in 0..m {
        for i in 0..n {
            let mut s = b[i * m + col];
            for k in 0..i {
                s -= l[i * n + k] * b[k * m + col];
            }
            b[i * m + col] = s / l[i * n + i];
        }
        for i in (0..n).rev() {
            let mut s = b[i * m + col];
            for k in (i + 1)..n {
                s -= l[k * n + i].conj() * b[k * m + col];
            }
            b[i * m + col] = s / l[i * n + i].re;
        }
    }
}

fn pinv_solve(gram: &[Complex64], n: usize, rhs: &[Complex64], m: usize) -> Vec<Complex64> {
    let g = DMatrix::from_row_slice(n, n, gram);
    let b = DMatrix::from_row_slice(n, m, rhs);
    // the Gram matrix is Hermitian PSD, so its eigendecomposition is its SVD
    let eig = g.symmetric_eigen();
    let smax = eig.eigenvalues.iter().fold(0.0f64, |a, &v| a.max(v.abs()));
    let u = eig.eigenvectors;
    // x = U Λ⁺ Uᴴ b
    let mut ub = u.adjoint() * b;
    for (k, &s) in eig.eigenvalues.iter().enumerate() {
        let inv = if s > PINV_RCOND * smax { 1.0 / s } else { 0.0 };
        ub.row_mut(k).scale_mut(inv);
    }
    let x = &u * ub;
    let mut out = Vec::with_capacity(n * m);
    for i in 0..n {
        for j in 0..m {
            out.push(x[(i, j)]);
        }
    }
    out
}

/// Designs the per-bin least-squares encoder for `g` over `grid`.
pub fn design_ls_encoder(
    g: &ArrayGeometry,
    order: usize,
    beta: f64,
    grid: &DirectionGrid,
    freqs: &[f64],
    speed_of_sound: f64,
) -> Result<StaticEncoder> {
    let q = g.len();
    let n_ch = channel_count(order);
    let d = grid.len();
    if q == 0 {
        return Err(Error::Config("empty array geometry".into()));
    }
    if d < n_ch || d < q {
        return Err(Error::Config(format!(
            "grid of {d} directions is too small for {n_ch} channels and {q} mics"
        )));
    }
    if !(beta >= 0.0) {
        return Err(Error::Config(format!("regularization must be non-negative, got {beta}")));
    }
    // Y: n_ch × d
    let y: Vec<Vec<f64>> = grid
        .directions
        .iter()
        .map(|dir| sh_eval(*dir, order, Normalization::Sn3d).map(|v| v.values))
        .collect::<Result<_>>()?;

    let solved: Vec<(Vec<Complex64>, SolveMethod)> = freqs
        .par_iter()
        .enumerate()
        .map(|(bin, &f)| {
            // H: q × d, stored direction-major for locality
            let h: Vec<Vec<Complex64>> = grid
                .directions
                .iter()
                .map(|dir| atf(g, f, *dir, speed_of_sound))
                .collect();
            let mut gram = vec![Complex64::new(0.0, 0.0); q * q];
            for hd in &h {
                for i in 0..q {
                    for j in 0..q {
                        gram[i * q + j] += hd[i] * hd[j].conj();
                    }
                }
            }
            for i in 0..q {
                gram[i * q + i] += beta * beta;
            }
            // rhs = (Yᵀ Hᴴ)ᴴ = H Y, q × n_ch
            let mut rhs = vec![Complex64::new(0.0, 0.0); q * n_ch];
            for (hd, yd) in h.iter().zip(&y) {
                for i in 0..q {
                    for c in 0..n_ch {
                        rhs[i * n_ch + c] += hd[i] * yd[c];
                    }
                }
            }
            let mut l = gram.clone();
            let (x, method) = if cholesky(&mut l, q) {
                let mut x = rhs.clone();
                cholesky_solve(&l, q, &mut x, n_ch);
                (x, SolveMethod::Cholesky)
            } else {
                (pinv_solve(&gram, q, &rhs, n_ch), SolveMethod::PinvFallback)
            };
            // E = xᴴ, n_ch × q
            let mut e = vec![Complex64::new(0.0, 0.0); n_ch * q];
            for c in 0..n_ch {
                for i in 0..q {
                    e[c * q + i] = x[i * n_ch + c].conj();
                }
            }
            if e.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
                return Err(Error::Numerical {
                    bin,
                    reason: "non-finite encoder coefficients".into(),
                });
            }
            Ok((e, method))
        })
        .collect::<Result<_>>()?;

    let (matrices, methods): (Vec<_>, Vec<_>) = solved.into_iter().unzip();
    for (bin, m) in methods.iter().enumerate() {
        if *m == SolveMethod::PinvFallback {
            log::warn!("bin {bin}: regularized Gram matrix singular, used the pseudo-inverse fallback");
        }
    }
    Ok(StaticEncoder {
        order,
        mics: q,
        beta,
        sample_rate: 0.0,
        freqs: freqs.to_vec(),
        matrices,
        methods,
    })
}

/// Centre frequencies of the `fft/2 + 1` STFT bins.
pub fn stft_bin_frequencies(sample_rate: u32, fft: usize) -> Vec<f64> {
    (0..=fft / 2)
        .map(|k| k as f64 * sample_rate as f64 / fft as f64)
        .collect()
}

/// Designs an encoder evaluated at the STFT bin centres.
pub fn design_for_stft(
    g: &ArrayGeometry,
    order: usize,
    beta: f64,
    grid: &DirectionGrid,
    sample_rate: u32,
    fft: usize,
    speed_of_sound: f64,
) -> Result<StaticEncoder> {
    let mut enc = design_ls_encoder(
        g,
        order,
        beta,
        grid,
        &stft_bin_frequencies(sample_rate, fft),
        speed_of_sound,
    )?;
    enc.sample_rate = sample_rate as f64;
    Ok(enc)
}

/// `b̂(t,f) = E(f) x(t,f)` for every bin and frame.
pub fn apply_static_encoder(enc: &StaticEncoder, x: &Spectrogram) -> Result<Spectrogram> {
    if x.channels != enc.mics {
        return Err(Error::Format(format!(
            "encoder expects {} channels, got {}",
            enc.mics, x.channels
        )));
    }
    if x.bins != enc.bins() {
        return Err(Error::Format(format!(
            "encoder has {} bins, spectrogram {}",
            enc.bins(),
            x.bins
        )));
    }
    let n_ch = enc.channels();
    let mut out = x.zeros_like(n_ch);
    for f in 0..x.bins {
        for c in 0..n_ch {
            for q in 0..enc.mics {
                let e = enc.entry(f, c, q);
                let src = (q * x.bins + f) * x.frames;
                let dst = (c * x.bins + f) * x.frames;
                for t in 0..x.frames {
                    out.data[dst + t] += e * x.data[src + t];
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::array::SPEED_OF_SOUND;
    use crate::sh::uniform_grid;

    #[test]
    fn single_omni_at_origin_is_identity() {
        let g = ArrayGeometry::new(vec![[0.0; 3]]);
        let grid = uniform_grid(64).unwrap();
        let enc = design_ls_encoder(&g, 0, 0.0, &grid, &[0.0, 500.0, 8000.0], SPEED_OF_SOUND)
            .unwrap();
        for bin in 0..3 {
            assert!((enc.entry(bin, 0, 0) - Complex64::new(1.0, 0.0)).norm() < 1e-12);
        }
    }

    #[test]
    fn heavy_regularization_vanishes() {
        let g = ArrayGeometry::new(vec![[0.05, 0.0, 0.0], [-0.05, 0.02, 0.01], [0.0, 0.0, 0.06]]);
        let grid = uniform_grid(200).unwrap();
        let enc = design_ls_encoder(&g, 1, 1e6, &grid, &[100.0, 3000.0], SPEED_OF_SOUND).unwrap();
        for m in &enc.matrices {
            assert!(m.iter().all(|z| z.norm() < 1e-6));
        }
    }

    #[test]
    fn dc_with_zero_beta_falls_back() {
        let g = ArrayGeometry::new(vec![[0.05, 0.0, 0.0], [-0.05, 0.02, 0.01]]);
        let grid = uniform_grid(100).unwrap();
        let enc = design_ls_encoder(&g, 1, 0.0, &grid, &[0.0, 1000.0], SPEED_OF_SOUND).unwrap();
        assert_eq!(enc.fallback_bins(), vec![0]);
        // at DC all mics see the same signal; the omni row splits it evenly
        assert!((enc.entry(0, 0, 0) - Complex64::new(0.5, 0.0)).norm() < 1e-9);
    }

    #[test]
    fn grid_too_small() {
        let g = ArrayGeometry::new(vec![[0.0; 3]; 5]);
        let grid = uniform_grid(3).unwrap();
        assert!(matches!(
            design_ls_encoder(&g, 1, 0.01, &grid, &[100.0], SPEED_OF_SOUND),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn cholesky_reconstructs() {
        let n = 3;
        let a = vec![
            Complex64::new(4.0, 0.0),
            Complex64::new(1.0, 1.0),
            Complex64::new(0.0, -0.5),
            Complex64::new(1.0, -1.0),
            Complex64::new(3.0, 0.0),
            Complex64::new(0.2, 0.0),
            Complex64::new(0.0, 0.5),
            Complex64::new(0.2, 0.0),
            Complex64::new(2.0, 0.0),
        ];
        let mut l = a.clone();
        assert!(cholesky(&mut l, n));
        for i in 0..n {
            for j in 0..n {
                let mut s = Complex64::new(0.0, 0.0);
                for k in 0..n {
                    s += l[i * n + k] * l[j * n + k].conj();
                }
                assert!((s - a[i * n + j]).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn shape_mismatch() {
        let g = ArrayGeometry::new(vec![[0.0; 3], [0.01, 0.0, 0.0]]);
        let grid = uniform_grid(50).unwrap();
        let enc = design_ls_encoder(&g, 0, 0.1, &grid, &[0.0, 10.0], SPEED_OF_SOUND).unwrap();
        let x = Spectrogram::zeros(3, 2, 4, 24000, 2, 1);
        assert!(matches!(apply_static_encoder(&enc, &x), Err(Error::Format(_))));
        let x = Spectrogram::zeros(2, 5, 4, 24000, 8, 4);
        assert!(matches!(apply_static_encoder(&enc, &x), Err(Error::Format(_))));
    }

    #[test]
    fn export_round_trip() {
        let g = ArrayGeometry::new(vec![[0.02, 0.0, 0.0], [-0.03, 0.04, 0.0], [0.0, 0.0, 0.05]]);
        let grid = uniform_grid(100).unwrap();
        let enc = design_for_stft(&g, 1, 0.01, &grid, 24000, 16, SPEED_OF_SOUND).unwrap();
        let mut buf = Vec::new();
        enc.write_to(&mut buf).unwrap();
        assert_eq!(buf.len(), 8 + 12 + 16 + 9 * 4 * 3 * 16);
        let back = StaticEncoder::read_from(buf.as_slice()).unwrap();
        assert_eq!(back.matrices, enc.matrices);
        assert_eq!(back.freqs, enc.freqs);
        assert_eq!((back.order, back.mics, back.beta), (1, 3, 0.01));
    }
}
