//! Microphone array geometries, their quantized conditioning form, and
//! ideal omnidirectional array transfer functions.

use std::f64::consts::PI;

use num_complex::Complex64;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sh::Direction;

pub const SPEED_OF_SOUND: f64 = 343.0;

/// Number of quantization steps across the cube edge; indices run 0..=QUANT_STEPS.
pub const QUANT_STEPS: u8 = 24;

/// Microphone positions in meters relative to the array origin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArrayGeometry {
    pub coords: Vec<[f64; 3]>,
}

impl ArrayGeometry {
    pub fn new(coords: Vec<[f64; 3]>) -> Self {
        Self { coords }
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn pairwise_distances(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (i, a) in self.coords.iter().enumerate() {
            for b in &self.coords[i + 1..] {
                out.push(distance(a, b));
            }
        }
        out
    }

    pub fn centroid(&self) -> [f64; 3] {
        let mut c = [0.0; 3];
        for p in &self.coords {
            for k in 0..3 {
                c[k] += p[k] / self.coords.len() as f64;
            }
        }
        c
    }
}

/// Integer coordinates on the 25-level grid spanning `[−d_max/2, d_max/2]`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct QuantizedGeometry {
    pub indices: Vec<[u8; 3]>,
}

impl QuantizedGeometry {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// Indices flattened mic-major: `[x0, y0, z0, x1, ...]`.
    pub fn flat(&self) -> Vec<usize> {
        self.indices
            .iter()
            .flat_map(|t| t.iter().map(|&v| v as usize))
            .collect()
    }
}

/// Serialized array metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArrayRecord {
    pub id: String,
    pub seed: u64,
    pub coords: Vec<[f64; 3]>,
    pub quantized: Vec<[u8; 3]>,
}

impl ArrayRecord {
    pub fn geometry(&self) -> ArrayGeometry {
        ArrayGeometry::new(self.coords.clone())
    }

    pub fn quantized_geometry(&self) -> QuantizedGeometry {
        QuantizedGeometry {
            indices: self.quantized.clone(),
        }
    }
}

pub(crate) fn distance(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

const SAMPLE_BUDGET: usize = 2_000_000;

/// Rejection-samples `q` microphones inside the cube of edge `d_max` centred
/// on the origin so that every pairwise distance lies in `[d_min, d_max]`.
pub fn sample_geometry<R: Rng + ?Sized>(
    rng: &mut R,
    q: usize,
    d_min: f64,
    d_max: f64,
) -> Result<ArrayGeometry> {
    if q < 2 {
        return Err(Error::Config(format!("an array needs at least 2 mics, got {q}")));
    }
    if !(d_min > 0.0 && d_min < d_max) {
        return Err(Error::Config(format!(
            "distance bounds must satisfy 0 < d_min < d_max, got {d_min} and {d_max}"
        )));
    }
    let half = d_max / 2.0;
    let mut coords: Vec<[f64; 3]> = Vec::with_capacity(q);
    let mut since_progress = 0usize;
    for _ in 0..SAMPLE_BUDGET {
        let p = [
            rng.gen_range(-half..=half),
            rng.gen_range(-half..=half),
            rng.gen_range(-half..=half),
        ];
        let ok = coords.iter().all(|c| {
            let d = distance(c, &p);
            d >= d_min && d <= d_max
        });
        if ok {
            coords.push(p);
            since_progress = 0;
            if coords.len() == q {
                return Ok(ArrayGeometry::new(coords));
            }
        } else {
            since_progress += 1;
            // earlier mics may have boxed the next one out; start over
            if since_progress > 20_000 {
                coords.clear();
                since_progress = 0;
            }
        }
    }
    Err(Error::Sampling(format!(
        "no {q}-mic geometry with distances in [{d_min}, {d_max}] m after {SAMPLE_BUDGET} draws"
    )))
}

/// Snaps coordinates to the 25-level grid over `[−d_max/2, d_max/2]`.
pub fn quantize_geometry(g: &ArrayGeometry, d_max: f64) -> Result<QuantizedGeometry> {
    let half = d_max / 2.0;
    let step = d_max / QUANT_STEPS as f64;
    let tol = 1e-12 * d_max;
    let mut indices = Vec::with_capacity(g.len());
    for p in &g.coords {
        let mut t = [0u8; 3];
        for k in 0..3 {
            if p[k].abs() > half + tol || !p[k].is_finite() {
                return Err(Error::Range {
                    value: p[k],
                    half_width: half,
                });
            }
            let idx = ((p[k] + half) / step).round().clamp(0.0, QUANT_STEPS as f64);
            t[k] = idx as u8;
        }
        indices.push(t);
    }
    Ok(QuantizedGeometry { indices })
}

pub fn dequantize_geometry(qg: &QuantizedGeometry, d_max: f64) -> ArrayGeometry {
    let half = d_max / 2.0;
    let step = d_max / QUANT_STEPS as f64;
    ArrayGeometry::new(
        qg.indices
            .iter()
            .map(|t| {
                [
                    -half + t[0] as f64 * step,
                    -half + t[1] as f64 * step,
                    -half + t[2] as f64 * step,
                ]
            })
            .collect(),
    )
}

/// Far-field plane-wave response of ideal omni mics: `exp(+i·2πf/c · r·u)`.
pub fn atf(g: &ArrayGeometry, freq: f64, dir: Direction, c: f64) -> Vec<Complex64> {
    let u = dir.unit_vector();
    let k = 2.0 * PI * freq / c;
    g.coords
        .iter()
        .map(|r| {
            let proj = r[0] * u[0] + r[1] * u[1] + r[2] * u[2];
            Complex64::from_polar(1.0, k * proj)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn sampled_geometry_respects_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let g = sample_geometry(&mut rng, 5, 0.02, 0.18).unwrap();
            assert_eq!(g.len(), 5);
            for d in g.pairwise_distances() {
                assert!((0.02..=0.18).contains(&d), "{d}");
            }
            let c = g.centroid();
            assert!(distance(&c, &[0.0; 3]) <= 0.18);
        }
    }

    #[test]
    fn near_degenerate_pair() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let g = sample_geometry(&mut rng, 2, 0.175, 0.18).unwrap();
        let d = g.pairwise_distances()[0];
        assert!((0.175..=0.18).contains(&d));
    }

    #[test]
    fn sampling_is_deterministic() {
        let a = sample_geometry(&mut ChaCha8Rng::seed_from_u64(5), 5, 0.02, 0.18).unwrap();
        let b = sample_geometry(&mut ChaCha8Rng::seed_from_u64(5), 5, 0.02, 0.18).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn bad_arguments() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(sample_geometry(&mut rng, 1, 0.02, 0.18), Err(Error::Config(_))));
        assert!(matches!(sample_geometry(&mut rng, 3, 0.2, 0.18), Err(Error::Config(_))));
        // 30 mics cannot be 2 cm apart inside an 18 cm cube with all pairs ≤ 3 cm
        assert!(matches!(
            sample_geometry(&mut rng, 30, 0.02, 0.03),
            Err(Error::Sampling(_))
        ));
    }

    #[test]
    fn quantization_endpoints() {
        let g = ArrayGeometry::new(vec![[-0.09, 0.0, 0.09]]);
        let q = quantize_geometry(&g, 0.18).unwrap();
        assert_eq!(q.indices[0], [0, 12, 24]);
        let out = ArrayGeometry::new(vec![[0.1, 0.0, 0.0]]);
        assert!(matches!(quantize_geometry(&out, 0.18), Err(Error::Range { .. })));
    }

    #[test]
    fn quantization_round_trip_error_is_half_step() {
        let d_max = 0.18;
        let step = d_max / 24.0;
        let n = 100_000;
        for i in 0..=n {
            let x = -d_max / 2.0 + d_max * i as f64 / n as f64;
            let g = ArrayGeometry::new(vec![[x, 0.0, 0.0]]);
            let back = dequantize_geometry(&quantize_geometry(&g, d_max).unwrap(), d_max);
            assert!((back.coords[0][0] - x).abs() <= step / 2.0 + 1e-15);
        }
    }

    #[test]
    fn indices_survive_dequantize_quantize() {
        for i in 0..=QUANT_STEPS {
            let qg = QuantizedGeometry {
                indices: vec![[i, QUANT_STEPS - i, i / 2]],
            };
            let g = dequantize_geometry(&qg, 0.18);
            assert_eq!(quantize_geometry(&g, 0.18).unwrap(), qg);
        }
    }

    #[test]
    fn atf_reference_values() {
        let origin = ArrayGeometry::new(vec![[0.0; 3]]);
        let h = atf(&origin, 3000.0, Direction::new(1.0, 0.3), SPEED_OF_SOUND);
        assert!((h[0] - Complex64::new(1.0, 0.0)).norm() < 1e-15);

        let g = ArrayGeometry::new(vec![[0.08575, 0.0, 0.0]]);
        let h = atf(&g, 1000.0, Direction::new(0.0, 0.0), SPEED_OF_SOUND);
        assert!((h[0] - Complex64::new(0.0, 1.0)).norm() < 1e-12);

        let planar = ArrayGeometry::new(vec![[0.05, -0.03, 0.0]]);
        let h = atf(&planar, 5000.0, Direction::new(0.0, PI / 2.0), SPEED_OF_SOUND);
        assert!((h[0] - Complex64::new(1.0, 0.0)).norm() < 1e-12);
    }

    #[test]
    fn atf_symmetries() {
        let g = ArrayGeometry::new(vec![[0.03, -0.05, 0.07], [-0.02, 0.01, 0.0]]);
        let d = Direction::new(0.7, -0.2);
        for &f in &[0.0, 120.0, 4000.0, 11000.0] {
            let h = atf(&g, f, d, SPEED_OF_SOUND);
            let hn = atf(&g, -f, d, SPEED_OF_SOUND);
            for (a, b) in h.iter().zip(&hn) {
                assert!((a.norm() - 1.0).abs() < 1e-14);
                assert!((a.conj() - b).norm() < 1e-14);
                if f == 0.0 {
                    assert_eq!(*a, Complex64::new(1.0, 0.0));
                }
            }
        }
    }
}
