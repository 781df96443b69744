use ambienc_core::dsp::{hann, Stft};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn random_signal(seed: u64, len: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..len)
        .map(|_| {
            let v: f64 = StandardNormal.sample(&mut rng);
            v
        })
        .collect()
}

fn snr_db(x: &[f64], y: &[f64]) -> f64 {
    let s: f64 = x.iter().map(|v| v * v).sum();
    let e: f64 = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
    10.0 * (s / e.max(1e-300)).log10()
}

#[test]
fn round_trip_snr_exceeds_100_db() {
    let stft = Stft::new(1024, 512).unwrap();
    for seed in 0..4 {
        let x = random_signal(seed, 48000);
        let spec = stft.analyze(&[x.clone()], 24000).unwrap();
        assert_eq!((spec.frames, spec.bins), (94, 513));
        let y = stft.synthesize(&spec, x.len()).unwrap();
        let snr = snr_db(&x, &y[0]);
        assert!(snr >= 100.0, "seed {seed}: {snr} dB");
    }
}

#[test]
fn odd_lengths_and_other_hops_reconstruct() {
    for (fft, hop, len) in [(512, 256, 10_001), (1024, 256, 7777), (64, 32, 65)] {
        let stft = Stft::new(fft, hop).unwrap();
        let x = random_signal(len as u64, len);
        let spec = stft.analyze(&[x.clone()], 24000).unwrap();
        assert_eq!(spec.frames, len.div_ceil(hop));
        let y = stft.synthesize(&spec, len).unwrap();
        assert!(snr_db(&x, &y[0]) >= 100.0);
    }
}

#[test]
fn parseval_per_frame_sum() {
    // Σ_t Σ_k |X|² over the full spectrum equals N · Σ_t Σ_n (w·x)²; the
    // time-domain side is recomputed from the padded frames independently.
    let fft = 256;
    let hop = 128;
    let stft = Stft::new(fft, hop).unwrap();
    let x = random_signal(99, 3000);
    let spec = stft.analyze(&[x.clone()], 24000).unwrap();
    let mut spectral = 0.0;
    for t in 0..spec.frames {
        for k in 0..spec.bins {
            let w = if k == 0 || k == spec.bins - 1 { 1.0 } else { 2.0 };
            spectral += w * spec.get(0, k, t).norm_sqr();
        }
    }
    let window = hann(fft);
    let pad = fft / 2;
    let n = x.len() as isize;
    let reflect = |i: isize| -> f64 {
        let j = if i < 0 { -i } else if i >= n { 2 * (n - 1) - i } else { i };
        x[j as usize]
    };
    let mut temporal = 0.0;
    for t in 0..spec.frames {
        for m in 0..fft {
            let i = (t * hop + m) as isize - pad as isize;
            let v = window[m] * reflect(i);
            temporal += v * v;
        }
    }
    temporal *= fft as f64;
    assert!((spectral - temporal).abs() <= 1e-6 * temporal);
}
