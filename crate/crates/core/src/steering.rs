//! Kernel synthesis from complex coefficients and scale steering.
//!
//! A kernel is `W = sum_kj c_kj S_kj`. Steering it by a factor `s` multiplies
//! every order-`k` group by `s^(m-2) exp(-i k ln s)` and resamples the basis on
//! a grid whose side grows with `s`; only the real part is used as a kernel.

use ndarray::Array2;
use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::filterbank::{angular_distance, build_basis, check_odd, pixel_offset, BasisSpec, SampledBasis};

/// The trainable coefficients of one steerable kernel.
#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientSet {
    pub spec: BasisSpec,
    /// One coefficient per basis filter, indexed like [`BasisSpec::index`].
    pub c: Vec<Complex64>,
}

impl CoefficientSet {
    pub fn new(spec: BasisSpec, c: Vec<Complex64>) -> Result<Self> {
        if c.len() != spec.len() {
            return Err(Error::invalid(format!(
                "expected {} coefficients, got {}",
                spec.len(),
                c.len()
            )));
        }
        Ok(CoefficientSet { spec, c })
    }

    pub fn zeros(spec: &BasisSpec) -> Self {
        CoefficientSet {
            spec: spec.clone(),
            c: vec![Complex64::new(0.0, 0.0); spec.len()],
        }
    }

    /// Real and imaginary parts drawn independently from `N(0, std^2)`.
    pub fn random<R: Rng + ?Sized>(spec: &BasisSpec, std: f64, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, std).expect("std must be finite and non-negative");
        let c = (0..spec.len())
            .map(|_| Complex64::new(normal.sample(rng), normal.sample(rng)))
            .collect();
        CoefficientSet { spec: spec.clone(), c }
    }

    pub fn get(&self, order_index: usize, orientation_index: usize) -> Complex64 {
        self.c[self.spec.index(order_index, orientation_index)]
    }

    /// Number of real trainable parameters (two per coefficient).
    pub fn real_param_count(&self) -> usize {
        2 * self.c.len()
    }
}

/// Real-valued kernel obtained by steering a coefficient set.
#[derive(Debug, Clone)]
pub struct SteeredKernel {
    pub values: Array2<f64>,
    pub scale: f64,
    pub size: usize,
}

/// Nearest odd integer to `base_size * s`; ties go to the larger size.
pub fn steered_size(base_size: usize, s: f64) -> Result<usize> {
    check_odd(base_size)?;
    if !(s.is_finite() && s > 0.0) {
        return Err(Error::invalid(format!("scale factor must be positive, got {s}")));
    }
    let target = base_size as f64 * s;
    let half = ((target - 1.0) / 2.0 + 0.5).floor();
    if half < 0.0 {
        return Err(Error::invalid(format!("steered size below 1 for scale {s}")));
    }
    Ok(2 * half as usize + 1)
}

/// The complex multiplier `s^(m-2) exp(-i k ln s)` applied to order-`k` terms.
pub fn steering_factor(k: f64, m: f64, s: f64) -> Complex64 {
    Complex64::from_polar(s.powf(m - 2.0), -k * s.ln())
}

/// `W = sum_kj c_kj S_kj` over a sampled basis.
pub fn synthesize(coeffs: &CoefficientSet, basis: &SampledBasis) -> Result<Array2<Complex64>> {
    if coeffs.spec != basis.spec {
        return Err(Error::invalid("coefficient set and basis use different specs"));
    }
    if coeffs.c.len() != basis.filters.len() {
        return Err(Error::invalid("coefficient count does not match basis size"));
    }
    let mut out = Array2::zeros((basis.size, basis.size));
    for (c, filter) in coeffs.c.iter().zip(&basis.filters) {
        out.scaled_add(*c, filter);
    }
    Ok(out)
}

/// Steers a kernel to scale `s` by phase multiplication on a freshly sampled
/// basis of the steered size.
pub fn steer(coeffs: &CoefficientSet, s: f64, base_size: usize) -> Result<SteeredKernel> {
    let size = steered_size(base_size, s)?;
    let spec = &coeffs.spec;
    let basis = build_basis(spec, size, 1.0)?;
    let mut total = Array2::<Complex64>::zeros((size, size));
    for (ki, &k) in spec.orders.iter().enumerate() {
        let mut group = Array2::<Complex64>::zeros((size, size));
        for ji in 0..spec.orientations.len() {
            group.scaled_add(coeffs.get(ki, ji), basis.filter(ki, ji));
        }
        total.scaled_add(steering_factor(k, spec.m, s), &group);
    }
    Ok(SteeredKernel {
        values: total.mapv(|z| z.re),
        scale: s,
        size,
    })
}

/// Per-pixel evaluation of `Re(s^(m-2) sum_kj c_kj exp(-ik ln s) S_kj(r, phi))`
/// at the steered size, folding the steering phase into each pixel's
/// exponent. Independent of the sampled-basis path used by [`steer`].
pub fn oracle_resample(coeffs: &CoefficientSet, s: f64, base_size: usize) -> Result<Array2<f64>> {
    let size = steered_size(base_size, s)?;
    let spec = &coeffs.spec;
    spec.validate()?;
    let ln_s = s.ln();
    let amp_s = s.powf(spec.m - 2.0);
    let two_var = 2.0 * spec.sigma_phi * spec.sigma_phi;
    let gauss = |d: f64| (-d * d / two_var).exp();
    Ok(Array2::from_shape_fn((size, size), |(row, col)| {
        let (x, y) = pixel_offset(size, row, col);
        let r = x.hypot(y);
        let phi = y.atan2(x);
        let mut acc = 0.0;
        for (ki, &k) in spec.orders.iter().enumerate() {
            for (ji, &phi_j) in spec.orientations.iter().enumerate() {
                let c = coeffs.get(ki, ji);
                let value = if r == 0.0 {
                    Complex64::new(amp_s, 0.0) * Complex64::from_polar(1.0, -k * ln_s)
                } else {
                    let angular = gauss(angular_distance(phi, phi_j))
                        + gauss(angular_distance(phi, phi_j + std::f64::consts::PI));
                    let magnitude = amp_s * angular / r.powf(spec.m);
                    Complex64::from_polar(magnitude, k * (r.ln() - ln_s) + spec.beta)
                };
                acc += (c * value).re;
            }
        }
        acc
    }))
}

/// The basis steered to one scale and split into real grids, so that a
/// steered kernel is `sum_kj Re(c_kj) * re[kj] + Im(c_kj) * im_neg[kj]`.
/// `gain` multiplies every grid (1 for plain steering).
#[derive(Debug, Clone)]
pub struct SteeredBasis {
    pub scale: f64,
    pub size: usize,
    /// `Re(f_k(s) S_kj)`, row-major `size * size`.
    pub re: Vec<Vec<f64>>,
    /// `-Im(f_k(s) S_kj)`, row-major `size * size`.
    pub im_neg: Vec<Vec<f64>>,
}

impl SteeredBasis {
    pub fn new(spec: &BasisSpec, s: f64, base_size: usize, gain: f64) -> Result<Self> {
        let size = steered_size(base_size, s)?;
        let basis = build_basis(spec, size, 1.0)?;
        let mut re = Vec::with_capacity(spec.len());
        let mut im_neg = Vec::with_capacity(spec.len());
        for (ki, &k) in spec.orders.iter().enumerate() {
            let factor = steering_factor(k, spec.m, s) * gain;
            for ji in 0..spec.orientations.len() {
                let grid = basis.filter(ki, ji);
                re.push(grid.iter().map(|z| (factor * z).re).collect());
                im_neg.push(grid.iter().map(|z| -(factor * z).im).collect());
            }
        }
        Ok(SteeredBasis {
            scale: s,
            size,
            re,
            im_neg,
        })
    }

    /// Writes the steered real kernel for `coeffs` into `out`.
    pub fn kernel_into(&self, coeffs: &[Complex64], out: &mut [f64]) {
        out.fill(0.0);
        for ((c, re), im) in coeffs.iter().zip(&self.re).zip(&self.im_neg) {
            for ((o, r), i) in out.iter_mut().zip(re).zip(im) {
                *o += c.re * r + c.im * i;
            }
        }
    }

    /// Chain rule from a kernel gradient to coefficient gradients
    /// (real part in `re`, imaginary part in `im`), accumulated into `grad`.
    pub fn project_into(&self, kernel_grad: &[f64], grad: &mut [Complex64]) {
        for ((g, re), im) in grad.iter_mut().zip(&self.re).zip(&self.im_neg) {
            let dre: f64 = kernel_grad.iter().zip(re).map(|(a, b)| a * b).sum();
            let dim: f64 = kernel_grad.iter().zip(im).map(|(a, b)| a * b).sum();
            *g += Complex64::new(dre, dim);
        }
    }
}

/// A continuous test image, sampled at offsets from the patch centre in base
/// pixel units (y up).
pub trait Pattern {
    fn sample(&self, x: f64, y: f64) -> f64;
}

impl<F: Fn(f64, f64) -> f64> Pattern for F {
    fn sample(&self, x: f64, y: f64) -> f64 {
        self(x, y)
    }
}

/// A pixel image treated as a continuous pattern by bicubic interpolation
/// (Keys, a = -0.5), zero outside the image. The patch centre is the image
/// centre.
#[derive(Debug, Clone, Copy)]
pub struct ImagePattern<'a> {
    pub image: &'a Array2<f64>,
}

fn cubic_weight(t: f64) -> f64 {
    const A: f64 = -0.5;
    let t = t.abs();
    if t <= 1.0 {
        ((A + 2.0) * t - (A + 3.0)) * t * t + 1.0
    } else if t < 2.0 {
        ((A * t - 5.0 * A) * t + 8.0 * A) * t - 4.0 * A
    } else {
        0.0
    }
}

impl Pattern for ImagePattern<'_> {
    fn sample(&self, x: f64, y: f64) -> f64 {
        let (h, w) = self.image.dim();
        let col = x + (w as f64 - 1.0) / 2.0;
        let row = (h as f64 - 1.0) / 2.0 - y;
        let c0 = col.floor();
        let r0 = row.floor();
        let mut acc = 0.0;
        for dr in -1..=2 {
            let rr = r0 as i64 + dr;
            if rr < 0 || rr >= h as i64 {
                continue;
            }
            let wr = cubic_weight(row - rr as f64);
            for dc in -1..=2 {
                let cc = c0 as i64 + dc;
                if cc < 0 || cc >= w as i64 {
                    continue;
                }
                acc += wr * cubic_weight(col - cc as f64) * self.image[[rr as usize, cc as usize]];
            }
        }
        acc
    }
}

/// Outcome of a discrete check of the scaling identity
/// `[I^s(a) * S(a)] = s^(m-2) e^(-ik ln s) [I(as) * S(as)]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalingIdentityReport {
    pub orders: Vec<f64>,
    /// Relative error of the complex response, one entry per order.
    pub per_order: Vec<f64>,
    /// Same, comparing real parts only.
    pub per_order_real: Vec<f64>,
    /// Relative error after summing all order groups.
    pub combined: f64,
    pub combined_real: f64,
}

/// Zero when both sides vanish (an order with no coefficients).
fn relative_error(a: Complex64, b: Complex64) -> f64 {
    let scale = a.norm().max(b.norm());
    if scale == 0.0 {
        0.0
    } else {
        (a - b).norm() / scale
    }
}

fn relative_error_real(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale == 0.0 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

/// Per-order centre responses `sum_x P(x) W_k(x) dA` over the disc of
/// `radius` (base pixel units), sampled with `upsample` points per unit.
fn disc_responses(
    coeffs: &CoefficientSet,
    radius: f64,
    upsample: usize,
    pattern: &dyn Fn(f64, f64) -> f64,
) -> Result<Vec<Complex64>> {
    let spec = &coeffs.spec;
    let u = upsample as f64;
    let half = (radius * u + 1e-9).floor() as usize;
    let size = 2 * half + 1;
    let basis = build_basis(spec, size, u)?;
    let area = 1.0 / (u * u);
    let limit = radius * radius * (1.0 + 1e-12);
    let mut weights = Array2::<f64>::zeros((size, size));
    for ((row, col), w) in weights.indexed_iter_mut() {
        let (px, py) = pixel_offset(size, row, col);
        let (x, y) = (px / u, py / u);
        if x * x + y * y <= limit {
            *w = pattern(x, y) * area;
        }
    }
    let mut out = vec![Complex64::new(0.0, 0.0); spec.orders.len()];
    for (ki, slot) in out.iter_mut().enumerate() {
        for ji in 0..spec.orientations.len() {
            let c = coeffs.get(ki, ji);
            let dot: Complex64 = basis
                .filter(ki, ji)
                .iter()
                .zip(weights.iter())
                .map(|(s, w)| s * w)
                .sum();
            *slot += c * dot;
        }
    }
    Ok(out)
}

/// Compares the response of a base-size kernel on the pattern shrunk by `s`
/// with the steered response of the `s`-times larger kernel on the original
/// pattern, at `upsample_factor` samples per base pixel.
pub fn verify_scaling_identity<P: Pattern + ?Sized>(
    pattern: &P,
    coeffs: &CoefficientSet,
    s: f64,
    base_size: usize,
    upsample_factor: usize,
) -> Result<ScalingIdentityReport> {
    check_odd(base_size)?;
    if !(s.is_finite() && s > 0.0) {
        return Err(Error::invalid("scale factor must be positive"));
    }
    if upsample_factor == 0 {
        return Err(Error::invalid("upsample factor must be at least 1"));
    }
    let spec = &coeffs.spec;
    let a = (base_size - 1) as f64 / 2.0;

    let scaled = disc_responses(coeffs, a, upsample_factor, &|x, y| pattern.sample(s * x, s * y))?;
    let plain = disc_responses(coeffs, a * s, upsample_factor, &|x, y| pattern.sample(x, y))?;
    let steered: Vec<Complex64> = plain
        .iter()
        .zip(&spec.orders)
        .map(|(r, &k)| r * steering_factor(k, spec.m, s))
        .collect();

    if scaled.iter().chain(&steered).all(|z| z.norm() == 0.0) {
        return Err(Error::Undefined(
            "pattern produces no response (all zeros?)".into(),
        ));
    }

    let mut per_order = Vec::with_capacity(scaled.len());
    let mut per_order_real = Vec::with_capacity(scaled.len());
    for (lhs, rhs) in scaled.iter().zip(&steered) {
        per_order.push(relative_error(*lhs, *rhs));
        per_order_real.push(relative_error_real(lhs.re, rhs.re));
    }
    let lhs: Complex64 = scaled.iter().sum();
    let rhs: Complex64 = steered.iter().sum();
    Ok(ScalingIdentityReport {
        orders: spec.orders.clone(),
        per_order,
        per_order_real,
        combined: relative_error(lhs, rhs),
        combined_real: relative_error_real(lhs.re, rhs.re),
    })
}
