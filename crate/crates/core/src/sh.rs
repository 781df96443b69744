//! Real spherical harmonics in ACN order and near-uniform direction grids.
//!
//! Angles use azimuth θ ∈ [0, 2π) measured from +x towards +y and elevation
//! φ ∈ [−π/2, π/2] measured from the horizontal plane. Associated Legendre
//! functions are evaluated at sin φ without the Condon–Shortley phase, which
//! gives the AmbiX sign convention (the ACN 3 dipole points at +x).

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Highest supported Ambisonic order.
pub const MAX_ORDER: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Direction {
    pub azimuth: f64,
    pub elevation: f64,
}

impl Direction {
    /// Builds a direction, wrapping the azimuth into [0, 2π) and clamping
    /// the elevation into [−π/2, π/2].
    pub fn new(azimuth: f64, elevation: f64) -> Self {
        Self {
            azimuth: azimuth.rem_euclid(2.0 * PI),
            elevation: elevation.clamp(-PI / 2.0, PI / 2.0),
        }
    }

    /// Direction of a (not necessarily normalized) non-zero vector.
    pub fn from_vector(v: [f64; 3]) -> Self {
        let horiz = v[0].hypot(v[1]);
        Self::new(v[1].atan2(v[0]), v[2].atan2(horiz))
    }

    pub fn unit_vector(&self) -> [f64; 3] {
        let (se, ce) = self.elevation.sin_cos();
        let (sa, ca) = self.azimuth.sin_cos();
        [ce * ca, ce * sa, se]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Normalization {
    /// Schmidt semi-normalized (AmbiX). The omnidirectional term is 1.
    #[default]
    Sn3d,
    /// Fully normalized; N3D = SN3D · √(2n+1).
    N3d,
}

/// Number of channels for an Ambisonic order.
pub fn channel_count(order: usize) -> usize {
    (order + 1) * (order + 1)
}

/// ACN channel index of order `n` and degree `m`.
pub fn acn(n: usize, m: i64) -> usize {
    debug_assert!(m.unsigned_abs() as usize <= n);
    (n as i64 * (n as i64 + 1) + m) as usize
}

/// Inverse of [`acn`].
pub fn acn_to_nm(index: usize) -> (usize, i64) {
    let n = (index as f64).sqrt().floor() as usize;
    // guard against rounding for perfect squares
    let n = if (n + 1) * (n + 1) <= index { n + 1 } else { n };
    let m = index as i64 - (n * (n + 1)) as i64;
    (n, m)
}

/// Real SH values of one direction, `(order+1)²` entries in ACN order.
#[derive(Debug, Clone, PartialEq)]
pub struct ShVector {
    pub order: usize,
    pub values: Vec<f64>,
}

fn factorial(k: usize) -> f64 {
    (1..=k).fold(1.0, |acc, i| acc * i as f64)
}

/// Associated Legendre values P_n^m(x) for 0 ≤ m ≤ n ≤ order, no Condon–Shortley phase.
/// Indexed `p[n][m]`.
fn legendre_table(order: usize, x: f64) -> Vec<Vec<f64>> {
    let mut p = vec![vec![0.0; order + 1]; order + 1];
    let s = (1.0 - x * x).max(0.0).sqrt();
    let mut pmm = 1.0;
    for m in 0..=order {
        if m > 0 {
            pmm *= (2 * m - 1) as f64 * s;
        }
        p[m][m] = pmm;
        if m < order {
            p[m + 1][m] = x * (2 * m + 1) as f64 * pmm;
        }
        for n in (m + 2)..=order {
            p[n][m] = ((2 * n - 1) as f64 * x * p[n - 1][m] - (n + m - 1) as f64 * p[n - 2][m])
                / (n - m) as f64;
        }
    }
    p
}

/// Evaluates all real spherical harmonics up to `order` in ACN order.
pub fn sh_eval(dir: Direction, order: usize, normalization: Normalization) -> Result<ShVector> {
    if order > MAX_ORDER {
        return Err(Error::Config(format!(
            "spherical harmonic order {order} exceeds the supported maximum {MAX_ORDER}"
        )));
    }
    let p = legendre_table(order, dir.elevation.sin());
    let mut values = vec![0.0; channel_count(order)];
    for n in 0..=order {
        let n3d = match normalization {
            Normalization::Sn3d => 1.0,
            Normalization::N3d => ((2 * n + 1) as f64).sqrt(),
        };
        for m in -(n as i64)..=(n as i64) {
            let am = m.unsigned_abs() as usize;
            let delta = if am == 0 { 1.0 } else { 2.0 };
            let norm = (delta * factorial(n - am) / factorial(n + am)).sqrt();
            let azi = if m >= 0 {
                (am as f64 * dir.azimuth).cos()
            } else {
                (am as f64 * dir.azimuth).sin()
            };
            values[acn(n, m)] = n3d * norm * p[n][am] * azi;
        }
    }
    Ok(ShVector { order, values })
}

/// Directions with positive quadrature weights summing to 4π.
#[derive(Debug, Clone)]
pub struct DirectionGrid {
    pub directions: Vec<Direction>,
    pub weights: Vec<f64>,
}

impl DirectionGrid {
    pub fn len(&self) -> usize {
        self.directions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.directions.is_empty()
    }
}

/// Spherical Fibonacci lattice with equal weights 4π/count.
pub fn uniform_grid(count: usize) -> Result<DirectionGrid> {
    if count == 0 {
        return Err(Error::Config("direction grid needs at least one point".into()));
    }
    let golden_angle = PI * (3.0 - 5f64.sqrt());
    let directions = (0..count)
        .map(|i| {
            let z = 1.0 - (2 * i + 1) as f64 / count as f64;
            Direction::new(i as f64 * golden_angle, z.clamp(-1.0, 1.0).asin())
        })
        .collect();
    let weights = vec![4.0 * PI / count as f64; count];
    Ok(DirectionGrid {
        directions,
        weights,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn acn_is_a_bijection() {
        let order = MAX_ORDER;
        let mut seen = vec![false; channel_count(order)];
        for n in 0..=order {
            for m in -(n as i64)..=(n as i64) {
                let i = acn(n, m);
                assert!(!seen[i]);
                seen[i] = true;
                assert_eq!(acn_to_nm(i), (n, m));
            }
        }
        assert!(seen.iter().all(|&s| s));
    }

    #[test]
    fn omni_is_unity_under_sn3d() {
        let y = sh_eval(Direction::new(1.2, -0.3), 0, Normalization::Sn3d).unwrap();
        assert_eq!(y.values, vec![1.0]);
    }

    #[test]
    fn x_dipole_on_axis() {
        let y = sh_eval(Direction::new(0.0, 0.0), 1, Normalization::Sn3d).unwrap();
        // ACN 1 = Y, 2 = Z, 3 = X
        assert!((y.values[3] - 1.0).abs() < 1e-15);
        assert!(y.values[1].abs() < 1e-15);
        assert!(y.values[2].abs() < 1e-15);
    }

    #[test]
    fn first_order_matches_unit_vector() {
        let d = Direction::new(2.1, 0.7);
        let u = d.unit_vector();
        let y = sh_eval(d, 1, Normalization::Sn3d).unwrap();
        assert!((y.values[1] - u[1]).abs() < 1e-14);
        assert!((y.values[2] - u[2]).abs() < 1e-14);
        assert!((y.values[3] - u[0]).abs() < 1e-14);
    }

    #[test]
    fn order_limit_is_enforced() {
        assert!(matches!(
            sh_eval(Direction::new(0.0, 0.0), 9, Normalization::Sn3d),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn n3d_differs_by_sqrt_2n_plus_1() {
        let d = Direction::new(4.0, -1.1);
        let s = sh_eval(d, MAX_ORDER, Normalization::Sn3d).unwrap();
        let n = sh_eval(d, MAX_ORDER, Normalization::N3d).unwrap();
        for (i, (a, b)) in s.values.iter().zip(&n.values).enumerate() {
            let (order, _) = acn_to_nm(i);
            assert!((a * ((2 * order + 1) as f64).sqrt() - b).abs() < 1e-12);
        }
    }

    #[test]
    fn unit_vector_has_unit_norm() {
        for k in 0..200 {
            let d = Direction::new(k as f64 * 0.37, (k as f64 * 0.11).sin() * 1.5);
            let u = d.unit_vector();
            let n = (u[0] * u[0] + u[1] * u[1] + u[2] * u[2]).sqrt();
            assert!((n - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn grid_weights() {
        let g = uniform_grid(1008).unwrap();
        assert_eq!(g.len(), 1008);
        let total: f64 = g.weights.iter().sum();
        assert!((total - 4.0 * PI).abs() < 1e-9 * 4.0 * PI);
        assert!(g.weights.iter().all(|&w| w > 0.0));

        let one = uniform_grid(1).unwrap();
        assert_eq!(one.len(), 1);
        assert!((one.weights[0] - 4.0 * PI).abs() < 1e-15);

        assert!(uniform_grid(0).is_err());
    }

    #[test]
    fn grid_is_balanced() {
        let g = uniform_grid(1008).unwrap();
        let mut mean = [0.0; 3];
        for d in &g.directions {
            let u = d.unit_vector();
            for k in 0..3 {
                mean[k] += u[k] / g.len() as f64;
            }
        }
        let norm = (mean[0] * mean[0] + mean[1] * mean[1] + mean[2] * mean[2]).sqrt();
        assert!(norm < 0.01, "mean vector norm {norm}");
    }

    #[test]
    fn from_vector_round_trip() {
        let d = Direction::new(5.5, -0.4);
        let back = Direction::from_vector(d.unit_vector());
        assert!((back.azimuth - d.azimuth).abs() < 1e-12);
        assert!((back.elevation - d.elevation).abs() < 1e-12);
    }
}
