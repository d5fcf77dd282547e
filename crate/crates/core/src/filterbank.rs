//! Log-radial harmonic basis filters.
//!
//! A basis filter of order `k` centred on orientation `phi_j` is
//!
//! ```text
//! S(r, phi) = r^-m * (K(phi, phi_j) + K(phi, phi_j + pi)) * exp(i (k ln r + beta))
//! K(phi, phi_j) = exp(-d(phi, phi_j)^2 / (2 sigma_phi^2))
//! ```
//!
//! Scaling the radius only rotates the phase and rescales the amplitude,
//! which is what makes the family steerable in scale. The filter is undefined
//! at `r = 0`; the exact centre pixel of a sampled grid is pinned to `1 + 0i`.

use std::f64::consts::{PI, TAU};

use ndarray::Array2;
use num_complex::Complex64;

use crate::error::{Error, Result};

/// Hyperparameters of a log-radial harmonic family.
#[derive(Debug, Clone, PartialEq)]
pub struct BasisSpec {
    /// Filter orders `k`; need not be integers.
    pub orders: Vec<f64>,
    /// Orientations `phi_j` in radians, each in `[0, 2pi)`.
    pub orientations: Vec<f64>,
    /// Angular Gaussian spread.
    pub sigma_phi: f64,
    /// Constant phase offset.
    pub beta: f64,
    /// Radial decay exponent in `1 / r^m`.
    pub m: f64,
}

impl Default for BasisSpec {
    /// Orders (0.5, 1, 2), eight orientations `j pi / 8` for `j = 1..=8`,
    /// `sigma_phi = pi / 16`, `beta = 0`, `m = 1`: 24 filters.
    fn default() -> Self {
        BasisSpec {
            orders: vec![0.5, 1.0, 2.0],
            orientations: evenly_spaced_orientations(8),
            sigma_phi: PI / 16.0,
            beta: 0.0,
            m: 1.0,
        }
    }
}

/// Orientations `j pi / count` for `j = 1..=count`.
pub fn evenly_spaced_orientations(count: usize) -> Vec<f64> {
    (1..=count).map(|j| j as f64 * PI / count as f64).collect()
}

impl BasisSpec {
    pub fn validate(&self) -> Result<()> {
        if self.orders.is_empty() {
            return Err(Error::invalid("basis needs at least one order"));
        }
        if let Some(k) = self.orders.iter().find(|k| !(k.is_finite() && **k > 0.0)) {
            return Err(Error::invalid(format!("filter order must be positive, got {k}")));
        }
        if self.orientations.is_empty() {
            return Err(Error::invalid("basis needs at least one orientation"));
        }
        for (i, phi) in self.orientations.iter().enumerate() {
            if !(0.0..TAU).contains(phi) {
                return Err(Error::invalid(format!(
                    "orientation {phi} outside [0, 2pi)"
                )));
            }
            if self.orientations[..i].contains(phi) {
                return Err(Error::invalid(format!("duplicate orientation {phi}")));
            }
        }
        if !(self.sigma_phi.is_finite() && self.sigma_phi > 0.0) {
            return Err(Error::invalid("sigma_phi must be positive"));
        }
        if !self.beta.is_finite() || !self.m.is_finite() {
            return Err(Error::invalid("beta and m must be finite"));
        }
        Ok(())
    }

    /// Number of basis filters, `|orders| * |orientations|`.
    pub fn len(&self) -> usize {
        self.orders.len() * self.orientations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Flat index of `(order, orientation)`; order-major.
    pub fn index(&self, order_index: usize, orientation_index: usize) -> usize {
        order_index * self.orientations.len() + orientation_index
    }

    /// Angular term `K(phi, phi_j) + K(phi, phi_j + pi)` for one orientation.
    pub fn angular_profile(&self, orientation_index: usize, phi: f64) -> f64 {
        let phi_j = self.orientations[orientation_index];
        let two_var = 2.0 * self.sigma_phi * self.sigma_phi;
        let near = angular_distance(phi, phi_j);
        let far = angular_distance(phi, phi_j + PI);
        (-near * near / two_var).exp() + (-far * far / two_var).exp()
    }

    /// Evaluates one basis filter at continuous offset `(x, y)` from the
    /// filter centre (y pointing up). Returns `1 + 0i` at the origin.
    pub fn evaluate(&self, order_index: usize, orientation_index: usize, x: f64, y: f64) -> Complex64 {
        let r2 = x * x + y * y;
        if r2 == 0.0 {
            return Complex64::new(1.0, 0.0);
        }
        let r = r2.sqrt();
        // The angular term is pi-periodic, so evaluate it on the upper half
        // plane; antipodal pixels then produce bit-identical values.
        let (ax, ay) = if y < 0.0 || (y == 0.0 && x < 0.0) { (-x, -y) } else { (x, y) };
        let angular = self.angular_profile(orientation_index, ay.atan2(ax));
        let k = self.orders[order_index];
        let amplitude = angular * r.powf(-self.m);
        Complex64::from_polar(amplitude, k * r.ln() + self.beta)
    }
}

/// Shortest arc between two angles, in `[0, pi]`.
pub fn angular_distance(phi: f64, phi_j: f64) -> f64 {
    let d = (phi - phi_j).abs().rem_euclid(TAU);
    d.min(TAU - d)
}

/// Offset `(x, y)` of pixel `(row, col)` from the centre of an odd grid,
/// with `y` pointing up.
pub fn pixel_offset(size: usize, row: usize, col: usize) -> (f64, f64) {
    let c = ((size - 1) / 2) as f64;
    (col as f64 - c, c - row as f64)
}

pub(crate) fn check_odd(size: usize) -> Result<()> {
    if size % 2 == 0 {
        return Err(Error::invalid(format!("filter size must be odd, got {size}")));
    }
    Ok(())
}

/// Samples one basis filter on a `size x size` grid. Pixel radii are divided
/// by `radial_scale` before evaluation.
pub fn sample_basis_filter(
    spec: &BasisSpec,
    order_index: usize,
    orientation_index: usize,
    size: usize,
    radial_scale: f64,
) -> Result<Array2<Complex64>> {
    check_odd(size)?;
    if order_index >= spec.orders.len() || orientation_index >= spec.orientations.len() {
        return Err(Error::invalid(format!(
            "basis index ({order_index}, {orientation_index}) out of range"
        )));
    }
    if !(radial_scale.is_finite() && radial_scale > 0.0) {
        return Err(Error::invalid("radial_scale must be positive"));
    }
    Ok(Array2::from_shape_fn((size, size), |(row, col)| {
        let (x, y) = pixel_offset(size, row, col);
        spec.evaluate(order_index, orientation_index, x / radial_scale, y / radial_scale)
    }))
}

/// A full basis sampled at one grid size.
#[derive(Debug, Clone)]
pub struct SampledBasis {
    pub spec: BasisSpec,
    pub size: usize,
    pub radial_scale: f64,
    /// Order-major, orientation-minor; see [`BasisSpec::index`].
    pub filters: Vec<Array2<Complex64>>,
}

impl SampledBasis {
    pub fn filter(&self, order_index: usize, orientation_index: usize) -> &Array2<Complex64> {
        &self.filters[self.spec.index(order_index, orientation_index)]
    }
}

pub fn build_basis(spec: &BasisSpec, size: usize, radial_scale: f64) -> Result<SampledBasis> {
    spec.validate()?;
    let mut filters = Vec::with_capacity(spec.len());
    for k in 0..spec.orders.len() {
        for j in 0..spec.orientations.len() {
            filters.push(sample_basis_filter(spec, k, j, size, radial_scale)?);
        }
    }
    Ok(SampledBasis {
        spec: spec.clone(),
        size,
        radial_scale,
        filters,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::E;

    #[test]
    fn angular_distance_examples() {
        assert_eq!(angular_distance(0.0, 0.0), 0.0);
        assert!(angular_distance(0.0, TAU).abs() < 1e-15);
        assert!((angular_distance(0.1, TAU - 0.1) - 0.2).abs() < 1e-12);
        assert!((angular_distance(PI, 0.0) - PI).abs() < 1e-15);
        assert!((angular_distance(-3.0 * PI / 2.0, 0.0) - PI / 2.0).abs() < 1e-12);
    }

    #[test]
    fn centre_pixel_is_one() {
        let basis = build_basis(&BasisSpec::default(), 9, 1.0).unwrap();
        for f in &basis.filters {
            assert_eq!(f[[4, 4]], Complex64::new(1.0, 0.0));
        }
    }

    #[test]
    fn on_axis_value_at_r_equals_e() {
        // Orientation 0, pixel (x = 3, y = 0), radial scale 3/e puts r at e.
        let spec = BasisSpec {
            orders: vec![1.0],
            orientations: vec![0.0],
            ..BasisSpec::default()
        };
        let grid = sample_basis_filter(&spec, 0, 0, 7, 3.0 / E).unwrap();
        let got = grid[[3, 6]];
        let sigma = PI / 16.0;
        let amp = (1.0 + (-PI * PI / (2.0 * sigma * sigma)).exp()) / E;
        let want = Complex64::new(amp * 1f64.cos(), amp * 1f64.sin());
        assert!((got - want).norm() < 1e-15, "{got} vs {want}");
    }

    #[test]
    fn perpendicular_pixel_is_negligible() {
        let spec = BasisSpec {
            orders: vec![1.0],
            orientations: vec![0.0],
            ..BasisSpec::default()
        };
        let grid = sample_basis_filter(&spec, 0, 0, 7, 1.0).unwrap();
        // (x = 0, y = 3): phi = pi/2, r = 3.
        let perp = grid[[0, 3]].norm();
        let bound = 2.0 / 3.0 * (-(PI / 2.0).powi(2) / (2.0 * (PI / 16.0).powi(2))).exp();
        assert!(perp <= bound * (1.0 + 1e-12));
        let on_axis = grid[[3, 6]].norm();
        assert!(perp / on_axis < 1e-13);
    }

    #[test]
    fn even_size_rejected() {
        let err = sample_basis_filter(&BasisSpec::default(), 0, 0, 8, 1.0);
        assert!(matches!(err, Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn index_out_of_range_rejected() {
        assert!(sample_basis_filter(&BasisSpec::default(), 3, 0, 7, 1.0).is_err());
        assert!(sample_basis_filter(&BasisSpec::default(), 0, 8, 7, 1.0).is_err());
    }

    #[test]
    fn build_basis_counts() {
        let b7 = build_basis(&BasisSpec::default(), 7, 1.0).unwrap();
        assert_eq!(b7.filters.len(), 24);
        assert!(b7.filters.iter().all(|f| f.dim() == (7, 7)));
        let b17 = build_basis(&BasisSpec::default(), 17, 1.0).unwrap();
        assert_eq!(b17.filters.len(), 24);
        assert!(b17.filters.iter().all(|f| f.dim() == (17, 17)));
        let single = BasisSpec {
            orders: vec![2.0],
            orientations: vec![1.0],
            ..BasisSpec::default()
        };
        assert_eq!(build_basis(&single, 5, 1.0).unwrap().filters.len(), 1);
    }

    #[test]
    fn invalid_specs_rejected() {
        let mut s = BasisSpec::default();
        s.orders = vec![];
        assert!(s.validate().is_err());
        let mut s = BasisSpec::default();
        s.orders[1] = -1.0;
        assert!(s.validate().is_err());
        let mut s = BasisSpec::default();
        s.orientations.push(PI);
        assert!(s.validate().is_err());
        let mut s = BasisSpec::default();
        s.orientations[0] = TAU;
        assert!(s.validate().is_err());
        let mut s = BasisSpec::default();
        s.sigma_phi = 0.0;
        assert!(s.validate().is_err());
    }

    #[test]
    fn magnitude_is_point_symmetric_and_phase_unit_modulus() {
        let spec = BasisSpec::default();
        let basis = build_basis(&spec, 15, 1.0).unwrap();
        for (idx, f) in basis.filters.iter().enumerate() {
            let j = idx % spec.orientations.len();
            for row in 0..15 {
                for col in 0..15 {
                    assert_eq!(f[[row, col]].norm(), f[[14 - row, 14 - col]].norm());
                    if (row, col) == (7, 7) {
                        continue;
                    }
                    let (x, y) = pixel_offset(15, row, col);
                    let r = (x * x + y * y).sqrt();
                    let expected = spec.angular_profile(j, y.atan2(x)) / r.powf(spec.m);
                    let got = f[[row, col]].norm();
                    assert!((got - expected).abs() <= 1e-12 * expected.max(1e-300));
                }
            }
        }
    }
}
