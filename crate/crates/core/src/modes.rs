//! Truncated Neumann eigensystem of a sphere.
//!
//! Mode `(n, ν, m)` has primal eigenfunction `K1 = j_n(k r) Y_n^m(θ, φ)` with
//! `j_n'(k R0) = 0`, eigenvalue `s = -D k²` and normalization
//! `N = ∫_0^R0 j_n(k r)² r² dr`. The adjoint kernel used by the forward
//! transform is `conj(K1)`.
//!
//! Radial counters: for `n = 0`, `ν = 0` is the constant mode (`k = 0`) and
//! `ν ≥ 1` are the positive roots; for `n ≥ 1`, `ν` starts at 1.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::sync::atomic::{AtomicU64, Ordering};

use num_complex::Complex64;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::quad;
use crate::specfun::{self, sph_jn, sph_jn_over_r, sph_jn_prime, LegendreTable};

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

/// Relative tolerance of the startup check of `N` against quadrature.
pub const NORM_CHECK_TOL: f64 = 1e-9;

/// A point in sphere-local spherical coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Point {
    pub r: f64,
    pub phi: f64,
    pub theta: f64,
}

impl Point {
    pub fn new(r: f64, phi: f64, theta: f64) -> Self {
        Point { r, phi, theta }
    }

    pub fn to_cartesian(&self) -> [f64; 3] {
        let (st, ct) = self.theta.sin_cos();
        let (sp, cp) = self.phi.sin_cos();
        [self.r * st * cp, self.r * st * sp, self.r * ct]
    }

    pub fn from_cartesian(v: [f64; 3]) -> Self {
        let r = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        let theta = if r == 0.0 {
            0.0
        } else {
            (v[2] / r).clamp(-1.0, 1.0).acos()
        };
        Point {
            r,
            phi: v[1].atan2(v[0]),
            theta,
        }
    }

    fn validate(&self, r0: f64, func: &'static str) -> Result<()> {
        if !(self.r.is_finite() && self.phi.is_finite() && self.theta.is_finite()) {
            return Err(Error::domain(func, "point coordinates must be finite"));
        }
        if self.r < 0.0 || self.r > r0 * (1.0 + 1e-12) {
            return Err(Error::domain(func, format!("r = {} outside [0, R0 = {r0}]", self.r)));
        }
        if !(0.0..=PI).contains(&self.theta) {
            return Err(Error::domain(func, format!("theta = {} outside [0, pi]", self.theta)));
        }
        Ok(())
    }
}

/// One eigenmode.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModeIndex {
    /// Flat position in the owning [`ModeSet`].
    pub mu: usize,
    pub n: usize,
    pub nu: usize,
    pub m: i32,
    /// Wavenumber (1/length).
    pub k: f64,
    /// Eigenvalue `-D k²` (1/time).
    pub s: f64,
    /// Normalization (length³).
    pub norm: f64,
}

/// Concentration and flux at one point.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct FieldVector {
    pub p: f64,
    pub i_r: f64,
    pub i_theta: f64,
    pub i_phi: f64,
}

/// The truncated, ordered family of modes of one sphere.
#[derive(Debug, Clone)]
pub struct ModeSet {
    r0: f64,
    d: f64,
    q_requested: usize,
    modes: Vec<ModeIndex>,
    id: u64,
}

/// `N = ∫_0^R0 j_n(k r)² r² dr` by its closed form at a Neumann root.
pub fn normalization(n: usize, k: f64, r0: f64) -> Result<f64> {
    let v = if k == 0.0 {
        if n != 0 {
            return Err(Error::Consistency(format!("k = 0 is not an eigenvalue for n = {n}")));
        }
        r0.powi(3) / 3.0
    } else {
        let x = k * r0;
        let j = sph_jn(n, x);
        0.5 * r0.powi(3) * j * j * (1.0 - (n * (n + 1)) as f64 / (x * x))
    };
    if !(v > 0.0 && v.is_finite()) {
        return Err(Error::Consistency(format!(
            "non-positive normalization {v} for n = {n}, k = {k}; root is likely wrong"
        )));
    }
    Ok(v)
}

/// `N` by adaptive quadrature, independent of the closed form.
pub fn normalization_quadrature(n: usize, k: f64, r0: f64) -> f64 {
    quad::integrate(
        |r| {
            let j = sph_jn(n, k * r);
            j * j * r * r
        },
        0.0,
        r0,
        1e-12,
        1e-300,
    )
    .value
}

fn check_model(r0: f64, d: f64, q: usize) -> Result<()> {
    if !(r0 > 0.0 && r0.is_finite()) {
        return Err(Error::domain(
            "enumerate_modes",
            format!("R0 must be positive, got {r0}"),
        ));
    }
    if !(d > 0.0 && d.is_finite()) {
        return Err(Error::domain("enumerate_modes", format!("D must be positive, got {d}")));
    }
    if q == 0 {
        return Err(Error::domain("enumerate_modes", "Q must be at least 1"));
    }
    Ok(())
}

/// Builds the `Q` modes with the smallest `|s|`, completing the last multiplet.
pub fn enumerate_modes(r0: f64, d: f64, q: usize) -> Result<ModeSet> {
    check_model(r0, d, q)?;
    // Weyl's law: about 2 X³ / (9π) Neumann modes have k R0 ≤ X.
    let mut x_max = (4.5 * PI * q as f64).cbrt() + 5.0;
    loop {
        let mut radial: Vec<(f64, usize, usize)> = Vec::new();
        let mut n = 0usize;
        // Zeros of j_n' lie above sqrt(n(n+1)), so orders beyond x_max contribute nothing.
        while ((n * (n + 1)) as f64).sqrt() < x_max {
            let zeros = specfun::prime_zeros_below(n, x_max);
            for (i, x) in zeros.into_iter().enumerate() {
                let nu = if n == 0 { i } else { i + 1 };
                radial.push((x, n, nu));
            }
            n += 1;
        }
        radial.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let available: usize = radial.iter().map(|r| 2 * r.1 + 1).sum();
        if available < q {
            x_max *= 1.3;
            continue;
        }
        let mut chosen = Vec::new();
        let mut count = 0;
        for &(x, n, nu) in &radial {
            if count >= q {
                break;
            }
            chosen.push((x, n, nu));
            count += 2 * n + 1;
        }
        return build(r0, d, q, &chosen);
    }
}

fn build(r0: f64, d: f64, q: usize, radial: &[(f64, usize, usize)]) -> Result<ModeSet> {
    let norms: Vec<f64> = radial
        .par_iter()
        .map(|&(x, n, _)| {
            let k = x / r0;
            let closed = normalization(n, k, r0)?;
            let quad = normalization_quadrature(n, k, r0);
            if (closed - quad).abs() > NORM_CHECK_TOL * closed {
                return Err(Error::Consistency(format!(
                    "normalization mismatch for n = {n}, k = {k}: closed form {closed}, quadrature {quad}"
                )));
            }
            Ok(closed)
        })
        .collect::<Result<_>>()?;
    let mut modes = Vec::new();
    for (&(x, n, nu), &norm) in radial.iter().zip(&norms) {
        let k = x / r0;
        for m in -(n as i32)..=(n as i32) {
            modes.push(ModeIndex {
                mu: modes.len(),
                n,
                nu,
                m,
                k,
                s: -d * k * k,
                norm,
            });
        }
    }
    Ok(ModeSet {
        r0,
        d,
        q_requested: q,
        modes,
        id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
    })
}

/// Per-mode observation coefficients at one point, already divided by `N`.
#[derive(Debug, Clone)]
pub struct FieldRows {
    pub p: Vec<Complex64>,
    pub i_r: Vec<Complex64>,
    pub i_theta: Vec<Complex64>,
    pub i_phi: Vec<Complex64>,
}

impl ModeSet {
    pub fn r0(&self) -> f64 {
        self.r0
    }

    pub fn diffusion(&self) -> f64 {
        self.d
    }

    /// Number of modes actually present (at least the requested `Q`).
    pub fn len(&self) -> usize {
        self.modes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.modes.is_empty()
    }

    pub fn q_requested(&self) -> usize {
        self.q_requested
    }

    pub fn modes(&self) -> &[ModeIndex] {
        &self.modes
    }

    pub fn mode(&self, mu: usize) -> &ModeIndex {
        &self.modes[mu]
    }

    /// Identity used to key caches; unique per construction.
    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn volume(&self) -> f64 {
        4.0 / 3.0 * PI * self.r0.powi(3)
    }

    pub fn n_max(&self) -> usize {
        self.modes.iter().map(|m| m.n).max().unwrap_or(0)
    }

    pub fn max_abs_s(&self) -> f64 {
        self.modes.iter().map(|m| m.s.abs()).fold(0.0, f64::max)
    }

    /// True when both sets describe the same eigensystem.
    pub fn same_system(&self, other: &ModeSet) -> bool {
        self.r0 == other.r0 && self.d == other.d && self.modes == other.modes
    }

    /// Mode indices grouped by `(n, m)`, each ascending in `ν`.
    pub fn blocks_by_nm(&self) -> BTreeMap<(usize, i32), Vec<usize>> {
        let mut map: BTreeMap<(usize, i32), Vec<usize>> = BTreeMap::new();
        for md in &self.modes {
            map.entry((md.n, md.m)).or_default().push(md.mu);
        }
        map
    }

    /// Mode indices grouped by degree `m`.
    pub fn blocks_by_m(&self) -> BTreeMap<i32, Vec<usize>> {
        let mut map: BTreeMap<i32, Vec<usize>> = BTreeMap::new();
        for md in &self.modes {
            map.entry(md.m).or_default().push(md.mu);
        }
        map
    }

    /// Primal eigenfunction `j_n(k r) Y_n^m(θ, φ)`.
    pub fn eval_k1(&self, mode: &ModeIndex, x: &Point) -> Result<Complex64> {
        x.validate(self.r0, "eval_k1")?;
        let y = specfun::spherical_harmonic(mode.n, mode.m, x.theta, x.phi)?;
        Ok(y * sph_jn(mode.n, mode.k * x.r))
    }

    /// Fourth adjoint entry `j_n(k r) conj(Y_n^m(θ, φ))`.
    pub fn eval_k4_adjoint(&self, mode: &ModeIndex, x: &Point) -> Result<Complex64> {
        Ok(self.eval_k1(mode, x)?.conj())
    }

    /// Flux rows `(radial, θ, φ)` of the primal eigenfunction, finite at the
    /// center and the poles.
    pub fn eval_k_flux(&self, mode: &ModeIndex, x: &Point) -> Result<[Complex64; 3]> {
        x.validate(self.r0, "eval_k_flux")?;
        let t = LegendreTable::new(mode.n + 1, x.theta);
        Ok(flux_rows(self.d, mode, x, &t))
    }

    /// Observation coefficients for every mode at `x`, so that
    /// `p(x) = Σ rows.p[μ] ȳ_μ` and likewise for the fluxes.
    pub fn field_rows(&self, x: &Point) -> Result<FieldRows> {
        x.validate(self.r0, "field_rows")?;
        let t = LegendreTable::new(self.n_max() + 1, x.theta);
        let q = self.modes.len();
        let mut rows = FieldRows {
            p: Vec::with_capacity(q),
            i_r: Vec::with_capacity(q),
            i_theta: Vec::with_capacity(q),
            i_phi: Vec::with_capacity(q),
        };
        for md in &self.modes {
            let e = Complex64::from_polar(1.0, md.m as f64 * x.phi);
            let inv = 1.0 / md.norm;
            rows.p.push(e * (t.p(md.n, md.m) * sph_jn(md.n, md.k * x.r) * inv));
            let [a, b, c] = flux_rows(self.d, md, x, &t);
            rows.i_r.push(a * inv);
            rows.i_theta.push(b * inv);
            rows.i_phi.push(c * inv);
        }
        Ok(rows)
    }

    /// Inverse transform of a full modal state at one point.
    pub fn reconstruct(&self, state: &[Complex64], x: &Point) -> Result<FieldVector> {
        if state.len() != self.modes.len() {
            return Err(Error::Consistency(format!(
                "state length {} does not match {} modes",
                state.len(),
                self.modes.len()
            )));
        }
        let rows = self.field_rows(x)?;
        let dot = |row: &[Complex64]| row.iter().zip(state).map(|(a, b)| a * b).sum::<Complex64>().re;
        Ok(FieldVector {
            p: dot(&rows.p),
            i_r: dot(&rows.i_r),
            i_theta: dot(&rows.i_theta),
            i_phi: dot(&rows.i_phi),
        })
    }
}

fn flux_rows(d: f64, md: &ModeIndex, x: &Point, t: &LegendreTable) -> [Complex64; 3] {
    let e = Complex64::from_polar(1.0, md.m as f64 * x.phi);
    let radial = -d * md.k * sph_jn_prime(md.n, md.k * x.r) * t.p(md.n, md.m);
    let over_r = sph_jn_over_r(md.n, md.k, x.r);
    let polar = -d * over_r * t.dp_dtheta(md.n, md.m);
    // ∂/∂φ brings down i m; P/sin θ stays finite at the poles.
    let azimuthal = Complex64::new(0.0, -d * md.m as f64 * over_r * t.p_over_sin(md.n, md.m));
    [e * radial, e * polar, e * azimuthal]
}
