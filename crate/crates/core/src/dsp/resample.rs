use std::f64::consts::PI;

/// Zero crossings of the sinc kernel on each side.
const KERNEL_ZEROS: f64 = 24.0;

fn gcd(a: u32, b: u32) -> u32 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-12 {
        1.0
    } else {
        (PI * x).sin() / (PI * x)
    }
}

/// Blackman window evaluated at `x ∈ [−1, 1]`.
fn blackman(x: f64) -> f64 {
    if x.abs() >= 1.0 {
        return 0.0;
    }
    let t = PI * (x + 1.0);
    0.42 - 0.5 * t.cos() + 0.08 * (2.0 * t).cos()
}

/// Rational-ratio polyphase resampler with a Blackman-windowed sinc kernel.
#[derive(Debug, Clone)]
pub struct Resampler {
    up: usize,
    down: usize,
    half_taps: usize,
    /// One filter per output phase, each `2·half_taps` long.
    phases: Vec<Vec<f64>>,
}

impl Resampler {
    pub fn new(src: u32, dst: u32) -> Self {
        assert!(src > 0 && dst > 0, "sample rates must be positive");
        let g = gcd(src, dst);
        let up = (dst / g) as usize;
        let down = (src / g) as usize;
        // cutoff relative to the input Nyquist
        let cutoff = (dst as f64 / src as f64).min(1.0);
        let half_width = KERNEL_ZEROS / cutoff;
        let half_taps = half_width.ceil() as usize;
        let phases = (0..up)
            .map(|p| {
                let frac = p as f64 / up as f64;
                (0..2 * half_taps)
                    .map(|j| {
                        // tap j multiplies input sample floor(t) + j − half_taps + 1
                        let offset = j as f64 - half_taps as f64 + 1.0 - frac;
                        cutoff * sinc(cutoff * offset) * blackman(offset / half_width)
                    })
                    .collect()
            })
            .collect();
        Self {
            up,
            down,
            half_taps,
            phases,
        }
    }

    pub fn output_len(&self, input_len: usize) -> usize {
        ((input_len as f64) * self.up as f64 / self.down as f64).round() as usize
    }

    pub fn process(&self, input: &[f64]) -> Vec<f64> {
        if self.up == self.down {
            return input.to_vec();
        }
        let n_out = self.output_len(input.len());
        let mut out = Vec::with_capacity(n_out);
        for n in 0..n_out {
            let pos = n * self.down;
            let base = (pos / self.up) as isize;
            let phase = &self.phases[pos % self.up];
            let mut acc = 0.0;
            for (j, &h) in phase.iter().enumerate() {
                let k = base + j as isize - self.half_taps as isize + 1;
                if k >= 0 && (k as usize) < input.len() {
                    acc += input[k as usize] * h;
                }
            }
            out.push(acc);
        }
        out
    }
}

/// Converts `signal` sampled at `src` Hz to `dst` Hz.
pub fn resample(signal: &[f64], src: u32, dst: u32) -> Vec<f64> {
    if src == dst {
        return signal.to_vec();
    }
    Resampler::new(src, dst).process(signal)
}
