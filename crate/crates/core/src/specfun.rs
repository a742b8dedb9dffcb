//! Spherical Bessel functions of the first kind, the Neumann roots of their
//! derivatives, and orthonormal complex spherical harmonics.
//!
//! Harmonics follow the Condon–Shortley phase convention and are normalized
//! so that the integral of |Y_n^m|^2 over the unit sphere is one:
//!
//! ```text
//! Y_n^m(θ, φ) = (-1)^m sqrt((2n+1)/(4π) (n-m)!/(n+m)!) P_n^m(cos θ) e^{imφ},  m ≥ 0
//! Y_n^{-m}    = (-1)^m conj(Y_n^m)
//! ```

use std::f64::consts::PI;

use num_complex::Complex64;

use crate::error::{Error, Result};

/// Absolute bisection tolerance on the dimensionless root `k * R0`.
pub const ROOT_TOL: f64 = 1e-12;

/// Ascending Neumann roots `k` of `d/dr j_n(k r) = 0` at `r = R0`.
#[derive(Debug, Clone, PartialEq)]
pub struct RootList {
    pub n: usize,
    pub r0: f64,
    pub roots: Vec<f64>,
}

fn check_arg(func: &'static str, x: f64) -> Result<()> {
    if !x.is_finite() {
        return Err(Error::domain(func, format!("argument must be finite, got {x}")));
    }
    if x < 0.0 {
        return Err(Error::domain(func, format!("argument must be non-negative, got {x}")));
    }
    Ok(())
}

/// Spherical Bessel function `j_n(x)` for `x ≥ 0`.
pub fn spherical_bessel_j(n: usize, x: f64) -> Result<f64> {
    check_arg("spherical_bessel_j", x)?;
    Ok(sph_jn(n, x))
}

/// Derivative `d/dx j_n(x)` for `x ≥ 0`.
pub fn spherical_bessel_j_prime(n: usize, x: f64) -> Result<f64> {
    check_arg("spherical_bessel_j_prime", x)?;
    Ok(sph_jn_prime(n, x))
}

/// Power series, used near the origin where the closed forms cancel.
fn series(n: usize, x: f64) -> f64 {
    let mut lead = 1.0;
    for i in 1..=n {
        lead *= x / (2 * i + 1) as f64;
    }
    let h = -0.5 * x * x;
    let mut term = 1.0;
    let mut sum = 1.0;
    for k in 1..200 {
        term *= h / (k as f64 * (2 * n + 2 * k + 1) as f64);
        sum += term;
        if term.abs() < 1e-17 * sum.abs() {
            break;
        }
    }
    lead * sum
}

/// Unchecked `j_n(x)`; callers guarantee `x ≥ 0`.
pub(crate) fn sph_jn(n: usize, x: f64) -> f64 {
    if x == 0.0 {
        return if n == 0 { 1.0 } else { 0.0 };
    }
    if x < 2.0 {
        return series(n, x);
    }
    let (s, c) = x.sin_cos();
    let j0 = s / x;
    if n == 0 {
        return j0;
    }
    let j1 = s / (x * x) - c / x;
    if n == 1 {
        return j1;
    }
    if n == 2 {
        return (3.0 / (x * x) - 1.0) * s / x - 3.0 * c / (x * x);
    }
    if x > n as f64 {
        // Upward recurrence is stable past the turning point.
        let (mut a, mut b) = (j0, j1);
        for l in 1..n {
            let next = (2 * l + 1) as f64 / x * b - a;
            a = b;
            b = next;
        }
        return b;
    }
    // Miller's downward recurrence, normalized against whichever of j0/j1
    // is further from a zero.
    let start = n + 60 + (x as usize);
    let mut above = 0.0;
    let mut cur = 1e-280;
    let mut at_n = 0.0;
    let mut at_0 = 0.0;
    let mut at_1 = 0.0;
    for l in (1..=start).rev() {
        let below = (2 * l + 1) as f64 / x * cur - above;
        above = cur;
        cur = below;
        // `cur` now holds order l - 1.
        if l - 1 == n {
            at_n = cur;
        }
        if l - 1 == 1 {
            at_1 = cur;
        }
        if l - 1 == 0 {
            at_0 = cur;
        }
        if cur.abs() > 1e250 {
            cur *= 1e-250;
            above *= 1e-250;
            at_n *= 1e-250;
            at_1 *= 1e-250;
        }
    }
    if j0.abs() >= j1.abs() {
        at_n * (j0 / at_0)
    } else {
        at_n * (j1 / at_1)
    }
}

/// Unchecked `j_n'(x)`.
pub(crate) fn sph_jn_prime(n: usize, x: f64) -> f64 {
    if x == 0.0 {
        return if n == 1 { 1.0 / 3.0 } else { 0.0 };
    }
    if n == 0 {
        return -sph_jn(1, x);
    }
    sph_jn(n - 1, x) - (n + 1) as f64 / x * sph_jn(n, x)
}

/// `j_n(k r) / r`, finite at `r = 0`.
pub(crate) fn sph_jn_over_r(n: usize, k: f64, r: f64) -> f64 {
    if r == 0.0 {
        return if n == 1 { k / 3.0 } else { 0.0 };
    }
    sph_jn(n, k * r) / r
}

fn bisect_prime_root(n: usize, mut lo: f64, mut hi: f64) -> f64 {
    let mut flo = sph_jn_prime(n, lo);
    while hi - lo > ROOT_TOL {
        let mid = 0.5 * (lo + hi);
        let fm = sph_jn_prime(n, mid);
        if fm == 0.0 {
            return mid;
        }
        if (fm > 0.0) == (flo > 0.0) {
            lo = mid;
            flo = fm;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// All zeros of `j_n'(x)` in `[0, x_max]`, ascending. Includes `x = 0` for `n = 0` only.
pub(crate) fn prime_zeros_below(n: usize, x_max: f64) -> Vec<f64> {
    let mut out = Vec::new();
    if n == 0 {
        out.push(0.0);
    }
    let step = PI / 4.0;
    // j_n is monotone below its turning point sqrt(n(n+1)), so no zero hides there.
    let mut a = if n == 0 {
        1e-3
    } else {
        (0.999 * ((n * (n + 1)) as f64).sqrt()).max(1e-3)
    };
    let mut fa = sph_jn_prime(n, a);
    while a < x_max {
        let b = (a + step).min(x_max);
        let fb = sph_jn_prime(n, b);
        if fa == 0.0 {
            out.push(a);
        } else if (fa > 0.0) != (fb > 0.0) && fb != 0.0 {
            out.push(bisect_prime_root(n, a, b));
        }
        if b >= x_max {
            if fb == 0.0 {
                out.push(b);
            }
            break;
        }
        a = b;
        fa = fb;
    }
    out
}

/// Largest `k R0` scanned when looking for `count` roots of order `n`.
fn scan_limit(n: usize, count: usize) -> f64 {
    PI * (count as f64 + 2.0) + 2.0 * n as f64 + 10.0
}

/// The first `count` Neumann wavenumbers of order `n` for a sphere of radius `r0`.
pub fn bessel_prime_roots(n: usize, count: usize, r0: f64) -> Result<RootList> {
    if count == 0 {
        return Err(Error::domain("bessel_prime_roots", "count must be at least 1"));
    }
    if !(r0 > 0.0 && r0.is_finite()) {
        return Err(Error::domain(
            "bessel_prime_roots",
            format!("R0 must be positive, got {r0}"),
        ));
    }
    let x_max = scan_limit(n, count);
    let zeros = prime_zeros_below(n, x_max);
    if zeros.len() < count {
        return Err(Error::RootBracket {
            n,
            wanted: count,
            found: zeros.len(),
            x_max,
        });
    }
    Ok(RootList {
        n,
        r0,
        roots: zeros[..count].iter().map(|x| x / r0).collect(),
    })
}

/// Normalized associated Legendre values at one polar angle, for all
/// `0 ≤ m ≤ n ≤ nmax`, with `θ`-derivatives and the pole-safe ratio `P/sin θ`.
#[derive(Debug, Clone)]
pub(crate) struct LegendreTable {
    nmax: usize,
    p: Vec<f64>,
    p_over_sin: Vec<f64>,
}

#[inline]
fn tri(n: usize, m: usize) -> usize {
    n * (n + 1) / 2 + m
}

impl LegendreTable {
    pub(crate) fn new(nmax: usize, theta: f64) -> Self {
        let x = theta.cos();
        let s = theta.sin().abs();
        let len = tri(nmax + 1, 0);
        let mut p = vec![0.0; len];
        let mut q = vec![0.0; len];
        let p00 = 1.0 / (4.0 * PI).sqrt();
        p[0] = p00;
        let mut diag_p = p00;
        let mut diag_q = 0.0;
        for m in 0..=nmax {
            if m > 0 {
                let f = -((2 * m + 1) as f64 / (2 * m) as f64).sqrt();
                diag_q = if m == 1 { f * p00 } else { f * s * diag_q };
                diag_p *= f * s;
            }
            p[tri(m, m)] = diag_p;
            q[tri(m, m)] = diag_q;
            if m < nmax {
                let a = ((2 * m + 3) as f64).sqrt();
                p[tri(m + 1, m)] = a * x * diag_p;
                q[tri(m + 1, m)] = a * x * diag_q;
            }
            let mut a_prev = ((2 * m + 3) as f64).sqrt();
            for n in (m + 2)..=nmax {
                let nf = n as f64;
                let mf = m as f64;
                let a = ((4.0 * nf * nf - 1.0) / (nf * nf - mf * mf)).sqrt();
                p[tri(n, m)] = a * (x * p[tri(n - 1, m)] - p[tri(n - 2, m)] / a_prev);
                q[tri(n, m)] = a * (x * q[tri(n - 1, m)] - q[tri(n - 2, m)] / a_prev);
                a_prev = a;
            }
        }
        LegendreTable { nmax, p, p_over_sin: q }
    }

    /// Signed-degree value, `P̃_n^{-m} = (-1)^m P̃_n^m`.
    pub(crate) fn p(&self, n: usize, m: i32) -> f64 {
        let am = m.unsigned_abs() as usize;
        if am > n || n > self.nmax {
            return 0.0;
        }
        let v = self.p[tri(n, am)];
        if m < 0 && am % 2 == 1 {
            -v
        } else {
            v
        }
    }

    /// `P̃_n^m / sin θ`, the analytic limit at the poles. Zero for `m = 0`
    /// (callers only need it multiplied by `m`).
    pub(crate) fn p_over_sin(&self, n: usize, m: i32) -> f64 {
        let am = m.unsigned_abs() as usize;
        if am == 0 || am > n || n > self.nmax {
            return 0.0;
        }
        let v = self.p_over_sin[tri(n, am)];
        if m < 0 && am % 2 == 1 {
            -v
        } else {
            v
        }
    }

    /// `d P̃_n^m(cos θ) / dθ` via the degree-ladder identity (no pole singularity).
    pub(crate) fn dp_dtheta(&self, n: usize, m: i32) -> f64 {
        let am = m.unsigned_abs() as usize;
        if am > n {
            return 0.0;
        }
        let nf = n as f64;
        let mf = am as f64;
        let v = if am == 0 {
            (nf * (nf + 1.0)).sqrt() * self.p(n, 1)
        } else {
            let up = ((nf - mf) * (nf + mf + 1.0)).sqrt() * self.p(n, am as i32 + 1);
            let down = ((nf + mf) * (nf - mf + 1.0)).sqrt() * self.p(n, am as i32 - 1);
            0.5 * (up - down)
        };
        if m < 0 && am % 2 == 1 {
            -v
        } else {
            v
        }
    }
}

fn check_harmonic_args(func: &'static str, n: usize, m: i32, theta: f64, phi: f64) -> Result<()> {
    if m.unsigned_abs() as usize > n {
        return Err(Error::domain(func, format!("|m| = {} exceeds n = {n}", m.abs())));
    }
    if !(0.0..=PI).contains(&theta) {
        return Err(Error::domain(func, format!("theta must lie in [0, pi], got {theta}")));
    }
    if !phi.is_finite() {
        return Err(Error::domain(func, format!("phi must be finite, got {phi}")));
    }
    Ok(())
}

/// Orthonormal complex spherical harmonic `Y_n^m(θ, φ)`.
pub fn spherical_harmonic(n: usize, m: i32, theta: f64, phi: f64) -> Result<Complex64> {
    check_harmonic_args("spherical_harmonic", n, m, theta, phi)?;
    let table = LegendreTable::new(n, theta);
    Ok(Complex64::from_polar(1.0, m as f64 * phi) * table.p(n, m))
}

/// `∂Y_n^m / ∂θ`, finite at the poles.
pub fn spherical_harmonic_dtheta(n: usize, m: i32, theta: f64, phi: f64) -> Result<Complex64> {
    check_harmonic_args("spherical_harmonic_dtheta", n, m, theta, phi)?;
    let table = LegendreTable::new(n + 1, theta);
    Ok(Complex64::from_polar(1.0, m as f64 * phi) * table.dp_dtheta(n, m))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn j0_closed(x: f64) -> f64 {
        x.sin() / x
    }
    fn j1_closed(x: f64) -> f64 {
        x.sin() / (x * x) - x.cos() / x
    }

    /// Reference j_n from Poisson's integral:
    /// j_n(x) = x^n / (2^{n+1} n!) ∫_{-1}^{1} cos(xs)(1-s^2)^n ds.
    /// Also returns the prefactor, which scales the oracle's own rounding error.
    fn jn_poisson(n: usize, x: f64) -> (f64, f64) {
        let r = crate::quad::integrate(|s| (x * s).cos() * (1.0 - s * s).powi(n as i32), -1.0, 1.0, 1e-14, 0.0);
        let mut pre = 1.0;
        for i in 1..=n {
            pre *= x / (2.0 * i as f64);
        }
        (pre * r.value / 2.0, pre)
    }

    #[test]
    fn closed_form_values() {
        assert!(spherical_bessel_j(0, PI).unwrap().abs() < 1e-15);
        assert_eq!(spherical_bessel_j(0, 0.0).unwrap(), 1.0);
        assert_eq!(spherical_bessel_j(3, 0.0).unwrap(), 0.0);
        assert_eq!(spherical_bessel_j_prime(0, 0.0).unwrap(), 0.0);
        assert_relative_eq!(spherical_bessel_j_prime(1, 0.0).unwrap(), 1.0 / 3.0);
    }

    #[test]
    fn first_maximum_of_j1() {
        let x = 2.081_576;
        let v = spherical_bessel_j(1, x).unwrap();
        assert_relative_eq!(v, j1_closed(x), max_relative = 1e-14);
        assert_relative_eq!(v, jn_poisson(1, x).0, max_relative = 1e-12);
        assert_relative_eq!(v, 0.436_182, epsilon = 1e-6);
    }

    #[test]
    fn matches_poisson_integral_across_regimes() {
        for &n in &[0usize, 1, 2, 3, 5, 8, 12, 20] {
            for &x in &[0.05, 0.7, 1.99, 2.01, 3.5, 7.0, 15.0, 19.5, 30.0] {
                let a = sph_jn(n, x);
                let (b, pre) = jn_poisson(n, x);
                // The integrand is O(1) while the integral may be tiny, so the
                // oracle carries an absolute error of order eps * prefactor.
                assert!(
                    (a - b).abs() <= 1e-12 * b.abs() + 1e-13 * pre,
                    "n={n} x={x}: {a} vs {b}"
                );
            }
        }
    }

    #[test]
    fn frozen_high_precision_values() {
        // sqrt(pi/2x) J_{n+1/2}(x) evaluated at 30 significant digits.
        let cases = [
            (5usize, 30.0, -0.020_504_008_736_827_49),
            (5, 19.5, -0.007_669_805_196_731_026),
            (20, 19.5, 0.031_542_523_549_018_01),
            (12, 7.0, 6.850_745_862_532_608e-4),
            (20, 0.7, 6.050_365_675_698_972e-29),
        ];
        for (n, x, v) in cases {
            assert_relative_eq!(sph_jn(n, x), v, max_relative = 1e-13);
        }
    }

    #[test]
    fn recurrence_residual() {
        for n in 1..=12usize {
            let mut x: f64 = 0.1;
            while x <= 50.0 {
                let res = sph_jn(n + 1, x) - (2 * n + 1) as f64 / x * sph_jn(n, x) + sph_jn(n - 1, x);
                // The recurrence amplifies by (2n+1)/x for small x; scale the bound accordingly.
                let scale = 1.0f64.max((2 * n + 1) as f64 / x * sph_jn(n, x).abs());
                assert!(res.abs() < 1e-10 * scale, "n={n} x={x} residual {res}");
                x += 0.0371;
            }
        }
    }

    #[test]
    fn derivative_matches_finite_differences() {
        for n in 0..=10usize {
            let mut x: f64 = 0.1;
            while x <= 50.0 {
                let h = 1e-5 * x.max(1.0);
                let fd = (sph_jn(n, x + h) - sph_jn(n, x - h)) / (2.0 * h);
                let d = sph_jn_prime(n, x);
                assert!((fd - d).abs() < 1e-7 * d.abs().max(1e-2), "n={n} x={x}: {d} vs {fd}");
                x += 0.173;
            }
        }
    }

    #[test]
    fn j0_prime_zero_at_first_j1_zero() {
        // j_0' = -j_1; bisection on the closed form (x cos x - sin x)/x^2.
        let f = |x: f64| (x * x.cos() - x.sin()) / (x * x);
        let (mut lo, mut hi) = (4.0, 5.0);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if f(lo) * f(mid) <= 0.0 {
                hi = mid
            } else {
                lo = mid
            }
        }
        assert_relative_eq!(lo, 4.493_409_457_909_064, epsilon = 1e-12);
        assert!(spherical_bessel_j_prime(0, 4.493_409).unwrap().abs() < 1e-6);
        assert!(sph_jn_prime(0, lo).abs() < 1e-13);
    }

    #[test]
    fn negative_argument_is_rejected() {
        assert!(matches!(spherical_bessel_j(0, -1.0), Err(Error::Domain { .. })));
        assert!(matches!(spherical_bessel_j_prime(2, -0.5), Err(Error::Domain { .. })));
        assert!(spherical_bessel_j(1, f64::NAN).is_err());
    }

    /// Independent root oracle: coarse scan + bisection on the closed forms.
    fn closed_form_prime_roots(n: usize, count: usize) -> Vec<f64> {
        let f = |x: f64| match n {
            0 => -j1_closed(x),
            1 => j0_closed(x) - 2.0 / x * j1_closed(x),
            _ => unreachable!(),
        };
        let mut out = if n == 0 { vec![0.0] } else { vec![] };
        let mut a = 0.01;
        while out.len() < count {
            let b = a + 0.05;
            if f(a) * f(b) < 0.0 {
                let (mut lo, mut hi) = (a, b);
                for _ in 0..100 {
                    let mid = 0.5 * (lo + hi);
                    if f(lo) * f(mid) <= 0.0 {
                        hi = mid
                    } else {
                        lo = mid
                    }
                }
                out.push(0.5 * (lo + hi));
            }
            a = b;
        }
        out
    }

    #[test]
    fn prime_roots_examples() {
        let r = bessel_prime_roots(0, 3, 1.0).unwrap();
        assert_eq!(r.roots[0], 0.0);
        let oracle = closed_form_prime_roots(0, 3);
        for (a, b) in r.roots.iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-10);
        }
        assert!((r.roots[1] - 4.493_409).abs() < 1e-6);
        assert!((r.roots[2] - 7.725_252).abs() < 1e-6);

        let r1 = bessel_prime_roots(1, 1, 1.0).unwrap();
        assert!((r1.roots[0] - closed_form_prime_roots(1, 1)[0]).abs() < 1e-10);
        assert!((r1.roots[0] - 2.081_576).abs() < 1e-6);

        let r2 = bessel_prime_roots(0, 2, 2.0).unwrap();
        assert_eq!(r2.roots[0], 0.0);
        assert!((r2.roots[1] - 2.246_704_7).abs() < 1e-6);
    }

    #[test]
    fn roots_are_certified_by_sign_change() {
        let delta = 10.0 * ROOT_TOL;
        for n in 0..=15usize {
            let list = bessel_prime_roots(n, 12, 1.0).unwrap();
            assert!(list.roots.windows(2).all(|w| w[0] < w[1]));
            for &k in list.roots.iter().filter(|&&k| k > 0.0) {
                let lo = sph_jn_prime(n, k - delta);
                let hi = sph_jn_prime(n, k + delta);
                assert!(lo * hi < 0.0, "n={n} k={k}");
                assert!(sph_jn_prime(n, k).abs() < 1e-10);
            }
            if n > 0 {
                assert!(list.roots[0] > 0.0);
            }
        }
    }

    #[test]
    fn invalid_root_requests() {
        assert!(bessel_prime_roots(0, 0, 1.0).is_err());
        assert!(bessel_prime_roots(0, 3, 0.0).is_err());
    }

    #[test]
    fn harmonic_examples() {
        let y00 = spherical_harmonic(0, 0, 1.2, -0.4).unwrap();
        assert_relative_eq!(y00.re, 0.282_094_791_773_878_1, max_relative = 1e-14);
        assert_eq!(y00.im, 0.0);
        assert!(spherical_harmonic(1, 0, PI / 2.0, 0.0).unwrap().norm() < 1e-16);
        // Y_1^1 = -sqrt(3/8π) sin θ e^{iφ}
        let y11 = spherical_harmonic(1, 1, 0.7, 0.3).unwrap();
        let expect = Complex64::from_polar(-(3.0 / (8.0 * PI)).sqrt() * 0.7f64.sin(), 0.3);
        assert_relative_eq!(y11.re, expect.re, max_relative = 1e-13);
        assert_relative_eq!(y11.im, expect.im, max_relative = 1e-13);
        assert!(spherical_harmonic(1, 2, 0.1, 0.0).is_err());
        assert!(spherical_harmonic(1, 0, -0.1, 0.0).is_err());
    }

    /// Gauss–Legendre in cos θ times trapezoid in φ, exact for band-limited products.
    fn overlap(n: usize, m: i32, n2: usize, m2: i32) -> Complex64 {
        let (xs, ws) = crate::quad::gauss_legendre(24);
        let nphi = 40;
        let mut acc = Complex64::new(0.0, 0.0);
        for (x, w) in xs.iter().zip(&ws) {
            let theta = x.acos();
            for j in 0..nphi {
                let phi = -PI + 2.0 * PI * j as f64 / nphi as f64;
                let a = spherical_harmonic(n, m, theta, phi).unwrap();
                let b = spherical_harmonic(n2, m2, theta, phi).unwrap();
                acc += a * b.conj() * (w * 2.0 * PI / nphi as f64);
            }
        }
        acc
    }

    #[test]
    fn harmonic_orthonormality() {
        let mut idx = Vec::new();
        for n in 0..=8usize {
            for m in -(n as i32)..=(n as i32) {
                idx.push((n, m));
            }
        }
        for &(n, m) in &idx {
            for &(n2, m2) in idx.iter().filter(|&&(a, b)| (a + n) % 3 == 0 || b == m) {
                let v = overlap(n, m, n2, m2);
                let expect = if (n, m) == (n2, m2) { 1.0 } else { 0.0 };
                assert!(
                    (v.re - expect).abs() < 1e-8 && v.im.abs() < 1e-8,
                    "({n},{m}) ({n2},{m2}) -> {v}"
                );
            }
        }
        let v = overlap(2, 1, 2, 1);
        assert_relative_eq!(v.re, 1.0, epsilon = 1e-12);
        let probe = spherical_harmonic(2, 1, PI / 4.0, PI / 3.0).unwrap();
        // Y_2^1 = -sqrt(15/8π) sin θ cos θ e^{iφ}
        let amp = -(15.0 / (8.0 * PI)).sqrt() * (PI / 4.0).sin() * (PI / 4.0).cos();
        assert_relative_eq!(probe.norm(), amp.abs(), max_relative = 1e-13);
    }

    #[test]
    fn dtheta_examples() {
        assert_eq!(spherical_harmonic_dtheta(0, 0, 0.4, 1.0).unwrap().norm(), 0.0);
        let d = spherical_harmonic_dtheta(1, 0, PI / 2.0, 0.0).unwrap();
        let h = 1e-6;
        let fd = (spherical_harmonic(1, 0, PI / 2.0 + h, 0.0).unwrap()
            - spherical_harmonic(1, 0, PI / 2.0 - h, 0.0).unwrap())
            / (2.0 * h);
        assert_relative_eq!(d.re, -(3.0 / (4.0 * PI)).sqrt(), max_relative = 1e-12);
        assert_relative_eq!(d.re, fd.re, max_relative = 1e-8);
        // Approach θ → 0 from above: one-sided differences converge to the pole value.
        let pole = spherical_harmonic_dtheta(1, 1, 0.0, 0.0).unwrap();
        assert!(pole.re.is_finite());
        let h = 1e-7;
        let fd = (spherical_harmonic(1, 1, h, 0.0).unwrap() - spherical_harmonic(1, 1, 0.0, 0.0).unwrap()) / h;
        assert_relative_eq!(pole.re, fd.re, max_relative = 1e-6);
        assert_relative_eq!(pole.re, -(3.0 / (8.0 * PI)).sqrt(), max_relative = 1e-12);
    }

    #[test]
    fn p_over_sin_has_finite_pole_limit() {
        let t = LegendreTable::new(6, 0.0);
        let near = LegendreTable::new(6, 1e-7);
        for n in 1..=6 {
            let lim = t.p_over_sin(n, 1);
            let approx = near.p(n, 1) / 1e-7f64.sin();
            assert_relative_eq!(lim, approx, max_relative = 1e-6);
            assert_eq!(t.p_over_sin(n, 0), 0.0);
        }
        assert!(t.p_over_sin(4, 2).abs() < 1e-300);
    }

    proptest! {
        #[test]
        fn dtheta_matches_finite_differences(n in 0usize..10, mfrac in 0.0f64..1.0, theta in 0.05f64..3.09, phi in -3.1f64..3.1) {
            let m = ((2 * n + 1) as f64 * mfrac).floor() as i32 - n as i32;
            let h = 1e-6;
            let d = spherical_harmonic_dtheta(n, m, theta, phi).unwrap();
            let fd = (spherical_harmonic(n, m, theta + h, phi).unwrap()
                - spherical_harmonic(n, m, theta - h, phi).unwrap()) / (2.0 * h);
            let scale = d.norm().max(1e-3);
            prop_assert!((d - fd).norm() < 1e-6 * scale.max(1.0), "n={} m={} {} vs {}", n, m, d, fd);
        }

        #[test]
        fn negative_degree_symmetry(n in 0usize..12, mfrac in 0.0f64..1.0, theta in 0.0f64..std::f64::consts::PI, phi in -3.1f64..3.1) {
            let m = (((n + 1) as f64) * mfrac).floor() as i32;
            let m = m.min(n as i32);
            let a = spherical_harmonic(n, -m, theta, phi).unwrap();
            let b = spherical_harmonic(n, m, theta, phi).unwrap().conj() * if m % 2 == 0 { 1.0 } else { -1.0 };
            prop_assert!((a - b).norm() < 1e-13);
        }
    }
}
