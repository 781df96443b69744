use ambienc_core::array::{atf, sample_geometry, ArrayGeometry, SPEED_OF_SOUND};
use ambienc_core::baseline::{
    apply_static_encoder, design_for_stft, design_ls_encoder, stft_bin_frequencies,
};
use ambienc_core::dsp::Spectrogram;
use ambienc_core::sh::{sh_eval, uniform_grid, DirectionGrid, Normalization};
use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// E = Yᵀ V diag(σ/(σ²+β²)) Uᴴ from the SVD H = U Σ Vᴴ of the array
/// response matrix itself, with no Gram matrix involved.
fn svd_oracle(g: &ArrayGeometry, order: usize, beta: f64, grid: &DirectionGrid, f: f64) -> DMatrix<Complex64> {
    let q = g.len();
    let d = grid.len();
    let n_ch = (order + 1) * (order + 1);
    let mut h = DMatrix::<Complex64>::zeros(q, d);
    let mut y = DMatrix::<Complex64>::zeros(n_ch, d);
    for (j, dir) in grid.directions.iter().enumerate() {
        for (i, v) in atf(g, f, *dir, SPEED_OF_SOUND).into_iter().enumerate() {
            h[(i, j)] = v;
        }
        for (c, v) in sh_eval(*dir, order, Normalization::Sn3d).unwrap().values.into_iter().enumerate() {
            y[(c, j)] = Complex64::new(v, 0.0);
        }
    }
    let svd = h.svd(true, true);
    let u = svd.u.unwrap(); // q × q
    let v_t = svd.v_t.unwrap(); // q × d
    let smax = svd.singular_values.max();
    let mut gain = DMatrix::<Complex64>::zeros(q, q);
    for k in 0..q {
        let s = svd.singular_values[k];
        let gk = if beta == 0.0 && s <= 1e-10 * smax { 0.0 } else { s / (s * s + beta * beta) };
        gain[(k, k)] = Complex64::new(gk, 0.0);
    }
    // Hᴴ(HHᴴ+β²I)⁻¹ = V diag(σ/(σ²+β²)) Uᴴ
    let v = v_t.adjoint();
    &y * v * gain * u.adjoint()
}

#[test]
fn matches_svd_oracle_for_random_arrays() {
    let grid = uniform_grid(1008).unwrap();
    let freqs = stft_bin_frequencies(24000, 1024);
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let start = std::time::Instant::now();
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let g = sample_geometry(&mut rng, 5, 0.02, 0.18).unwrap();
        for &beta in &[0.0, 0.01, 0.1] {
            let enc = design_ls_encoder(&g, 1, beta, &grid, &freqs, SPEED_OF_SOUND).unwrap();
            for bin in (0..freqs.len()).step_by(16).chain([1, 2, 512]) {
                let oracle = svd_oracle(&g, 1, beta, &grid, freqs[bin]);
                let mut diff = 0.0;
                for c in 0..4 {
                    for q in 0..5 {
                        diff += (enc.entry(bin, c, q) - oracle[(c, q)]).norm_sqr();
                    }
                }
                let rel = diff.sqrt() / oracle.norm();
                worst = worst.max(rel);
                assert!(rel < 1e-6, "beta {beta} bin {bin}: {rel:e}");
            }
        }
    }
    println!("worst relative Frobenius error {worst:e} in {:?}", start.elapsed());
}

#[test]
fn frobenius_norm_shrinks_with_regularization() {
    let grid = uniform_grid(400).unwrap();
    let freqs = stft_bin_frequencies(24000, 256);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let g = sample_geometry(&mut rng, 5, 0.02, 0.18).unwrap();
    let betas = [0.0, 1e-3, 1e-2, 0.1, 1.0, 10.0];
    let encs: Vec<_> = betas
        .iter()
        .map(|&b| design_ls_encoder(&g, 1, b, &grid, &freqs, SPEED_OF_SOUND).unwrap())
        .collect();
    for bin in 1..freqs.len() {
        for w in encs.windows(2) {
            assert!(w[1].frobenius(bin) <= w[0].frobenius(bin) * (1.0 + 1e-9));
        }
    }
    // deterministic
    let again = design_ls_encoder(&g, 1, 0.01, &grid, &freqs, SPEED_OF_SOUND).unwrap();
    assert_eq!(again.matrices, encs[2].matrices);
}

#[test]
fn application_matches_naive_loops() {
    let grid = uniform_grid(200).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let g = sample_geometry(&mut rng, 5, 0.02, 0.18).unwrap();
    let enc = design_for_stft(&g, 1, 0.01, &grid, 24000, 64, SPEED_OF_SOUND).unwrap();
    let mut x = Spectrogram::zeros(5, 33, 7, 24000, 64, 32);
    for v in x.data.iter_mut() {
        *v = Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
    }
    let out = apply_static_encoder(&enc, &x).unwrap();
    for c in 0..4 {
        for f in 0..33 {
            for t in 0..7 {
                let mut acc = Complex64::new(0.0, 0.0);
                for q in 0..5 {
                    acc += enc.matrices[f][c * 5 + q] * x.get(q, f, t);
                }
                assert!((acc - out.get(c, f, t)).norm() < 1e-12);
            }
        }
    }
    let zero = x.zeros_like(5);
    assert!(apply_static_encoder(&enc, &zero).unwrap().data.iter().all(|z| z.norm() == 0.0));
}

#[test]
fn selecting_rows_pass_channels_through() {
    let grid = uniform_grid(50).unwrap();
    let g = ArrayGeometry::new(vec![[0.0; 3], [0.02, 0.0, 0.0]]);
    let mut enc = design_ls_encoder(&g, 0, 0.1, &grid, &[0.0, 1.0, 2.0], SPEED_OF_SOUND).unwrap();
    for m in enc.matrices.iter_mut() {
        m[0] = Complex64::new(1.0, 0.0);
        m[1] = Complex64::new(0.0, 0.0);
    }
    let mut x = Spectrogram::zeros(2, 3, 4, 24000, 4, 2);
    for (i, v) in x.data.iter_mut().enumerate() {
        *v = Complex64::new(i as f64, -(i as f64));
    }
    let out = apply_static_encoder(&enc, &x).unwrap();
    assert_eq!(out.channel(0), x.channel(0));
}
