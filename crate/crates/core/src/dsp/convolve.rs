use num_complex::Complex64;
use rustfft::FftPlanner;

/// Linear convolution of every signal with one kernel via FFT.
/// Each output has `signal.len() + kernel.len() − 1` samples.
pub fn convolve_many(signals: &[&[f64]], kernel: &[f64]) -> Vec<Vec<f64>> {
    let max_len = signals.iter().map(|s| s.len()).max().unwrap_or(0);
    if max_len == 0 || kernel.is_empty() {
        return signals.iter().map(|_| Vec::new()).collect();
    }
    let n = (max_len + kernel.len() - 1).next_power_of_two();
    let mut planner = FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(n);
    let inv = planner.plan_fft_inverse(n);
    let mut k: Vec<Complex64> = kernel.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    k.resize(n, Complex64::new(0.0, 0.0));
    fwd.process(&mut k);
    signals
        .iter()
        .map(|s| {
            if s.is_empty() {
                return Vec::new();
            }
            let mut buf: Vec<Complex64> = s.iter().map(|&v| Complex64::new(v, 0.0)).collect();
            buf.resize(n, Complex64::new(0.0, 0.0));
            fwd.process(&mut buf);
            for (b, kk) in buf.iter_mut().zip(&k) {
                *b *= kk;
            }
            inv.process(&mut buf);
            let scale = 1.0 / n as f64;
            buf[..s.len() + kernel.len() - 1]
                .iter()
                .map(|z| z.re * scale)
                .collect()
        })
        .collect()
}

pub fn convolve(signal: &[f64], kernel: &[f64]) -> Vec<f64> {
    convolve_many(&[signal], kernel).pop().unwrap_or_default()
}
