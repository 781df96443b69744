//! Objective encoding metrics and their frequency-averaged aggregation.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::dsp::Spectrogram;
use crate::error::{Error, Result};

pub const MAGNITUDE_FLOOR: f64 = 1e-9;
/// Reported SI-SNR for a perfect (scaled) estimate.
pub const SI_SNR_CEILING: f64 = 120.0;

/// One value per frequency bin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricCurve {
    pub bins: Vec<f64>,
    pub values: Vec<f64>,
}

impl MetricCurve {
    pub fn mean(&self) -> f64 {
        if self.values.is_empty() {
            return 0.0;
        }
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }

    /// Mean over bins whose frequency lies in `[lo, hi]`.
    pub fn band_mean(&self, lo: f64, hi: f64) -> Option<f64> {
        let sel: Vec<f64> = self
            .bins
            .iter()
            .zip(&self.values)
            .filter(|(f, _)| **f >= lo && **f <= hi)
            .map(|(_, v)| *v)
            .collect();
        (!sel.is_empty()).then(|| sel.iter().sum::<f64>() / sel.len() as f64)
    }
}

fn check_shapes(b: &Spectrogram, b_hat: &Spectrogram) -> Result<()> {
    if !b.same_shape(b_hat) {
        return Err(Error::Format(format!(
            "shape mismatch: [{}, {}, {}] vs [{}, {}, {}]",
            b.channels, b.bins, b.frames, b_hat.channels, b_hat.bins, b_hat.frames
        )));
    }
    Ok(())
}

/// Mean absolute dB ratio of magnitudes per bin, over channels and frames.
pub fn magnitude_spectrum_error(
    b: &Spectrogram,
    b_hat: &Spectrogram,
    floor: f64,
) -> Result<MetricCurve> {
    check_shapes(b, b_hat)?;
    let norm = 1.0 / (b.channels * b.frames) as f64;
    let values = (0..b.bins)
        .map(|f| {
            let mut acc = 0.0;
            for c in 0..b.channels {
                for t in 0..b.frames {
                    let r = b.get(c, f, t).norm().max(floor);
                    let e = b_hat.get(c, f, t).norm().max(floor);
                    acc += (20.0 * (r / e).log10()).abs();
                }
            }
            acc * norm
        })
        .collect();
    Ok(MetricCurve {
        bins: b.bin_frequencies(),
        values,
    })
}

/// Magnitude-squared coherence over time per bin, averaged over channels.
/// A bin where either signal is silent in a channel counts as coherent only
/// if both are silent.
pub fn coherence(b: &Spectrogram, b_hat: &Spectrogram) -> Result<MetricCurve> {
    check_shapes(b, b_hat)?;
    if b.frames == 0 {
        return Err(Error::Input("coherence needs at least one frame".into()));
    }
    let values = (0..b.bins)
        .map(|f| {
            let mut acc = 0.0;
            for c in 0..b.channels {
                let mut cross = num_complex::Complex64::new(0.0, 0.0);
                let (mut pr, mut pe) = (0.0, 0.0);
                for t in 0..b.frames {
                    let r = b.get(c, f, t);
                    let e = b_hat.get(c, f, t);
                    cross += r.conj() * e;
                    pr += r.norm_sqr();
                    pe += e.norm_sqr();
                }
                acc += if pr == 0.0 && pe == 0.0 {
                    1.0
                } else if pr == 0.0 || pe == 0.0 {
                    0.0
                } else {
                    (cross.norm_sqr() / (pr * pe)).min(1.0)
                };
            }
            acc / b.channels as f64
        })
        .collect();
    Ok(MetricCurve {
        bins: b.bin_frequencies(),
        values,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiSnrReport {
    /// `None` for channels whose reference is all zeros.
    pub per_channel: Vec<Option<f64>>,
    pub mean: f64,
    pub excluded: Vec<usize>,
}

/// Scale-invariant SNR of one channel in dB, clamped to [`SI_SNR_CEILING`].
/// `None` when the reference is silent.
pub fn si_snr_channel(s: &[f64], s_hat: &[f64]) -> Option<f64> {
    let energy: f64 = s.iter().map(|v| v * v).sum();
    if energy == 0.0 {
        return None;
    }
    let dot: f64 = s.iter().zip(s_hat).map(|(a, b)| a * b).sum();
    let alpha = dot / energy;
    let (mut target, mut noise) = (0.0, 0.0);
    for (a, b) in s.iter().zip(s_hat) {
        let t = alpha * a;
        target += t * t;
        noise += (b - t) * (b - t);
    }
    let db = if noise == 0.0 {
        SI_SNR_CEILING
    } else if target == 0.0 {
        -SI_SNR_CEILING
    } else {
        10.0 * (target / noise).log10()
    };
    Some(db.clamp(-SI_SNR_CEILING, SI_SNR_CEILING))
}

pub fn si_snr(s: &[Vec<f64>], s_hat: &[Vec<f64>]) -> Result<SiSnrReport> {
    if s.len() != s_hat.len() || s.iter().zip(s_hat).any(|(a, b)| a.len() != b.len()) {
        return Err(Error::Format("SI-SNR needs equal channel counts and lengths".into()));
    }
    let per_channel: Vec<Option<f64>> = s
        .iter()
        .zip(s_hat)
        .map(|(a, b)| si_snr_channel(a, b))
        .collect();
    let excluded: Vec<usize> = per_channel
        .iter()
        .enumerate()
        .filter(|(_, v)| v.is_none())
        .map(|(i, _)| i)
        .collect();
    let valid: Vec<f64> = per_channel.iter().flatten().copied().collect();
    if valid.is_empty() {
        return Err(Error::Input("every reference channel is silent".into()));
    }
    let mean = valid.iter().sum::<f64>() / valid.len() as f64;
    Ok(SiSnrReport {
        per_channel,
        mean,
        excluded,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Acoustics {
    Dry,
    Wet,
}

impl fmt::Display for Acoustics {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Acoustics::Dry => "dry",
            Acoustics::Wet => "wet",
        })
    }
}

/// Metrics of one method on one evaluation example.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub method: String,
    pub acoustics: Acoustics,
    pub sources: usize,
    pub si_snr: f64,
    pub coherence: MetricCurve,
    pub magnitude_error: MetricCurve,
}

/// Frequency-averaged group means.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub si_snr: f64,
    pub coherence: f64,
    pub magnitude_error: f64,
    pub count: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct GroupKey {
    pub sources: usize,
    pub acoustics: Acoustics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateTable {
    /// method → group → cell
    pub cells: BTreeMap<String, BTreeMap<GroupKey, Cell>>,
    pub methods: Vec<String>,
}

const GROUPS: [GroupKey; 4] = [
    GroupKey { sources: 1, acoustics: Acoustics::Dry },
    GroupKey { sources: 1, acoustics: Acoustics::Wet },
    GroupKey { sources: 2, acoustics: Acoustics::Dry },
    GroupKey { sources: 2, acoustics: Acoustics::Wet },
];

fn group_label(k: &GroupKey) -> String {
    let n = match k.sources {
        1 => "single".to_string(),
        2 => "dual".to_string(),
        n => format!("{n}src"),
    };
    format!("{n}_{}", k.acoustics)
}

impl AggregateTable {
    pub fn cell(&self, method: &str, sources: usize, acoustics: Acoustics) -> Option<&Cell> {
        self.cells.get(method)?.get(&GroupKey { sources, acoustics })
    }

    fn group_keys(&self) -> Vec<GroupKey> {
        let mut keys: Vec<GroupKey> = GROUPS.to_vec();
        for groups in self.cells.values() {
            for k in groups.keys() {
                if !keys.contains(k) {
                    keys.push(*k);
                }
            }
        }
        keys
    }

    /// CSV in the layout `metric,method,single_dry,single_wet,dual_dry,dual_wet`.
    /// Empty groups are left blank.
    pub fn to_csv(&self) -> String {
        let keys = self.group_keys();
        let mut out = String::from("metric,method");
        for k in &keys {
            out.push(',');
            out.push_str(&group_label(k));
        }
        out.push('\n');
        let metrics: [(&str, fn(&Cell) -> f64, usize); 3] = [
            ("si_snr", |c| c.si_snr, 1),
            ("coherence", |c| c.coherence, 2),
            ("magnitude_error", |c| c.magnitude_error, 1),
        ];
        for (name, get, digits) in metrics {
            for m in &self.methods {
                out.push_str(name);
                out.push(',');
                out.push_str(m);
                for k in &keys {
                    out.push(',');
                    if let Some(cell) = self.cells.get(m).and_then(|g| g.get(k)) {
                        out.push_str(&format!("{:.*}", digits, get(cell)));
                    }
                }
                out.push('\n');
            }
        }
        out
    }
}

/// Averages frequency-averaged metrics per (method, sources, acoustics).
pub fn aggregate_report(runs: &[RunMetrics]) -> Result<AggregateTable> {
    if runs.is_empty() {
        return Err(Error::Input("no runs to aggregate".into()));
    }
    let mut methods: Vec<String> = Vec::new();
    let mut sums: BTreeMap<String, BTreeMap<GroupKey, Cell>> = BTreeMap::new();
    for r in runs {
        if !methods.contains(&r.method) {
            methods.push(r.method.clone());
        }
        let key = GroupKey {
            sources: r.sources,
            acoustics: r.acoustics,
        };
        let cell = sums.entry(r.method.clone()).or_default().entry(key).or_insert(Cell {
            si_snr: 0.0,
            coherence: 0.0,
            magnitude_error: 0.0,
            count: 0,
        });
        cell.si_snr += r.si_snr;
        cell.coherence += r.coherence.mean();
        cell.magnitude_error += r.magnitude_error.mean();
        cell.count += 1;
    }
    for groups in sums.values_mut() {
        for cell in groups.values_mut() {
            let n = cell.count as f64;
            cell.si_snr /= n;
            cell.coherence /= n;
            cell.magnitude_error /= n;
        }
    }
    for m in &methods {
        for k in GROUPS {
            if !sums[m].contains_key(&k) {
                log::warn!("no runs for method {m} in group {}", group_label(&k));
            }
        }
    }
    Ok(AggregateTable {
        cells: sums,
        methods,
    })
}

/// Per-frequency curves CSV: `bin_hz,<method>_<metric>...` over the methods given.
pub fn curves_csv(curves: &[(String, MetricCurve)]) -> Result<String> {
    let Some((_, first)) = curves.first() else {
        return Err(Error::Input("no curves".into()));
    };
    if curves.iter().any(|(_, c)| c.bins.len() != first.bins.len()) {
        return Err(Error::Format("curves differ in bin count".into()));
    }
    let mut out = String::from("bin_hz");
    for (name, _) in curves {
        out.push(',');
        out.push_str(name);
    }
    out.push('\n');
    for (i, f) in first.bins.iter().enumerate() {
        out.push_str(&format!("{f}"));
        for (_, c) in curves {
            out.push_str(&format!(",{}", c.values[i]));
        }
        out.push('\n');
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use num_complex::Complex64;

    fn spec_from(vals: &[Complex64], c: usize, f: usize, t: usize) -> Spectrogram {
        let mut s = Spectrogram::zeros(c, f, t, 24000, 2 * (f - 1).max(1), 1);
        s.data.copy_from_slice(vals);
        s
    }

    #[test]
    fn halving_gives_six_db() {
        let vals: Vec<Complex64> = (0..24).map(|i| Complex64::new(1.0 + i as f64, -0.5)).collect();
        let b = spec_from(&vals, 2, 3, 4);
        let half: Vec<Complex64> = vals.iter().map(|v| v / 2.0).collect();
        let bh = spec_from(&half, 2, 3, 4);
        let s = magnitude_spectrum_error(&b, &bh, MAGNITUDE_FLOOR).unwrap();
        for v in s.values {
            assert!((v - 6.0206).abs() < 1e-4);
        }
        let same = magnitude_spectrum_error(&b, &b, MAGNITUDE_FLOOR).unwrap();
        assert!(same.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn silent_bins_are_coherent() {
        let b = Spectrogram::zeros(1, 2, 3, 24000, 2, 1);
        let c = coherence(&b, &b).unwrap();
        assert_eq!(c.values, vec![1.0, 1.0]);
    }

    #[test]
    fn single_frame_coherence_is_one() {
        let vals = vec![Complex64::new(0.3, 0.1), Complex64::new(-1.0, 2.0)];
        let b = spec_from(&vals, 1, 2, 1);
        let other = vec![Complex64::new(5.0, -0.1), Complex64::new(0.2, 0.2)];
        let bh = spec_from(&other, 1, 2, 1);
        let c = coherence(&b, &bh).unwrap();
        for v in c.values {
            assert!((v - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn si_snr_closed_forms() {
        let s = vec![vec![1.0, 0.0, -1.0, 0.0]];
        let scaled = vec![vec![2.0, 0.0, -2.0, 0.0]];
        assert_eq!(si_snr(&s, &scaled).unwrap().mean, SI_SNR_CEILING);
        // orthogonal error of equal energy
        let noisy = vec![vec![1.0, 1.0, -1.0, -1.0]];
        assert!(si_snr(&s, &noisy).unwrap().mean.abs() < 1e-12);
    }

    #[test]
    fn silent_reference_channel_is_excluded() {
        let s = vec![vec![0.0; 4], vec![1.0, 2.0, 3.0, 4.0]];
        let r = si_snr(&s, &s).unwrap();
        assert_eq!(r.excluded, vec![0]);
        assert_eq!(r.per_channel[0], None);
        assert_eq!(r.mean, SI_SNR_CEILING);
        assert!(si_snr(&[vec![0.0; 3]], &[vec![1.0; 3]]).is_err());
    }

    #[test]
    fn constant_curve_aggregates_to_itself() {
        let curve = MetricCurve {
            bins: vec![0.0, 10.0],
            values: vec![6.02, 6.02],
        };
        let run = RunMetrics {
            method: "baseline".into(),
            acoustics: Acoustics::Dry,
            sources: 1,
            si_snr: 5.0,
            coherence: MetricCurve {
                bins: vec![0.0, 10.0],
                values: vec![0.5, 0.7],
            },
            magnitude_error: curve,
        };
        let t = aggregate_report(&[run]).unwrap();
        let cell = t.cell("baseline", 1, Acoustics::Dry).unwrap();
        assert!((cell.magnitude_error - 6.02).abs() < 1e-12);
        assert!((cell.coherence - 0.6).abs() < 1e-12);
        assert!(t.cell("baseline", 2, Acoustics::Wet).is_none());
        assert!(aggregate_report(&[]).is_err());
    }

    #[test]
    fn paper_table_layout() {
        // dry single-source baseline cell of the published table as a formatting fixture
        let mut cells = BTreeMap::new();
        let mut groups = BTreeMap::new();
        groups.insert(
            GroupKey { sources: 1, acoustics: Acoustics::Dry },
            Cell { si_snr: 5.2, coherence: 0.25, magnitude_error: 9.0, count: 1 },
        );
        cells.insert("baseline".to_string(), groups);
        let t = AggregateTable { cells, methods: vec!["baseline".into()] };
        let csv = t.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "metric,method,single_dry,single_wet,dual_dry,dual_wet");
        assert_eq!(lines[1], "si_snr,baseline,5.2,,,");
        assert_eq!(lines[2], "coherence,baseline,0.25,,,");
        assert_eq!(lines[3], "magnitude_error,baseline,9.0,,,");
    }
}
