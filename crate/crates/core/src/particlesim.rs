//! Brownian-dynamics oracle: independent particles with reflecting walls,
//! permeable membranes and the one-way S1 → S2 channel.
//!
//! Particles never interact, so each trajectory is simulated start to finish
//! on its own ChaCha8 stream `(seed, particle index)`. Results are therefore
//! independent of the thread count.
//!
//! Far from the wall a particle takes several `Δt` steps at once as one
//! Gaussian increment. The chunk length is chosen so the wall lies at least
//! six chunk standard deviations away, which makes a missed wall contact
//! vanishingly rare. Near the wall every step is taken individually.

use std::f64::consts::PI;
use std::sync::Arc;

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{StandardNormal, UnitSphere};
use rayon::prelude::*;

use crate::boundary::BoundaryRegion;
use crate::engine::{clipped_ball_volume, ObservationPoint, Permeability, Trace};
use crate::error::{Error, Result};
use crate::modes::{FieldVector, Point};
use crate::sources::{ReleaseEvent, SourceSchedule};

/// Minimum wall distance of a multi-step chunk, in chunk standard deviations.
const CHUNK_SIGMAS: f64 = 6.0;
/// Transferred particles land this fraction of `R0` inside S2.
const LANDING_DEPTH: f64 = 1e-9;

/// Monte Carlo settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OracleConfig {
    pub dt: f64,
    pub n_particles: usize,
    pub seed: u64,
    pub kernel_radius: f64,
    /// Spacing of the reported time samples.
    pub sample_dt: f64,
}

impl OracleConfig {
    /// Defaults for a sphere of radius `r0`.
    pub fn for_radius(r0: f64) -> Self {
        OracleConfig {
            dt: 1e-4,
            n_particles: 200_000,
            seed: 1,
            kernel_radius: 0.08 * r0,
            sample_dt: 0.1,
        }
    }
}

/// One sphere as seen by the particles.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleSphere {
    pub r0: f64,
    pub diffusion: f64,
    /// Permeable part of the wall; `None` for a fully reflective sphere.
    pub region: Option<BoundaryRegion>,
    pub permeability: Permeability,
}

impl OracleSphere {
    pub fn reflective(r0: f64, diffusion: f64) -> Self {
        OracleSphere {
            r0,
            diffusion,
            region: None,
            permeability: Permeability::Constant(0.0),
        }
    }
}

/// A complete oracle run.
#[derive(Debug, Clone)]
pub struct OracleSetup {
    /// One sphere, or S1 and S2. Releases happen at the center of S1.
    pub spheres: Vec<OracleSphere>,
    /// Probability that a particle leaving S1 through its membrane arrives in
    /// S2 (the channel gain `γ_S2`, at most 1). Required iff there are two spheres.
    pub channel_gain: Option<f64>,
    pub sources: Arc<SourceSchedule>,
    pub horizon: f64,
    pub observe: Vec<ObservationPoint>,
    pub config: OracleConfig,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Particle {
    pub position: [f64; 3],
    pub sphere: usize,
    pub alive: bool,
}

/// Birth of one particle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Release {
    pub time: f64,
    pub position: [f64; 3],
}

/// Oracle output: a [`Trace`] (fluxes NaN, no modal states) plus raw counts.
#[derive(Debug, Clone)]
pub struct OracleTrace {
    pub trace: Trace,
    /// Particles inside each kernel ball, `counts[point][k]`.
    pub counts: Vec<Vec<u64>>,
    /// Clipped kernel volume per observation point.
    pub kernel_volumes: Vec<f64>,
    pub n_particles: usize,
}

impl OracleTrace {
    /// One binomial standard deviation of the concentration estimate.
    pub fn sigma(&self, point: usize, k: usize) -> f64 {
        let n = self.n_particles as f64;
        let c = self.counts[point][k] as f64;
        let var = c * (1.0 - c / n);
        var.max(0.0).sqrt() / self.kernel_volumes[point] * self.trace.injected_mass / n
    }

    /// Binomial standard deviation of the estimate if the true concentration
    /// at the point were `c`; the band a correct prediction should fall in.
    pub fn sigma_at(&self, point: usize, c: f64) -> f64 {
        let n = self.n_particles as f64;
        let per = self.trace.injected_mass / n;
        let v = self.kernel_volumes[point];
        let p = (c * v / self.trace.injected_mass).clamp(0.0, 1.0);
        (n * p * (1.0 - p)).sqrt() / v * per
    }
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn add(a: [f64; 3], b: [f64; 3], s: f64) -> [f64; 3] {
    [a[0] + s * b[0], a[1] + s * b[1], a[2] + s * b[2]]
}

fn scale(a: [f64; 3], s: f64) -> [f64; 3] {
    [a[0] * s, a[1] * s, a[2] * s]
}

/// Per-collision crossing probability `γ√(πΔt/D)` before clamping.
pub fn crossing_probability(gamma: f64, dt: f64, diffusion: f64) -> f64 {
    gamma * (PI * dt / diffusion).sqrt()
}

/// Inverse CDF of the raised-cosine window on [0, 1]: solves `x − sin(2πx)/(2π) = u`.
fn raised_cosine_quantile(u: f64) -> f64 {
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    let mut x = u;
    for _ in 0..60 {
        let f = x - (2.0 * PI * x).sin() / (2.0 * PI) - u;
        if f > 0.0 {
            hi = x;
        } else {
            lo = x;
        }
        let df = 1.0 - (2.0 * PI * x).cos();
        let nx = if df > 1e-300 { x - f / df } else { f64::NAN };
        x = if nx > lo && nx < hi { nx } else { 0.5 * (lo + hi) };
        if hi - lo < 1e-15 {
            break;
        }
    }
    x
}

fn sample_release(ev: &ReleaseEvent, rng: &mut ChaCha8Rng) -> Release {
    let time = ev.t_start + ev.t0 * raised_cosine_quantile(rng.random::<f64>());
    // Density ∝ f_x(r)·r²: propose from r², accept with f_x ∈ [0, 1].
    let r = loop {
        let r = ev.r0 * rng.random::<f64>().cbrt();
        if rng.random::<f64>() <= 0.5 * (1.0 + (PI * r / ev.r0).cos()) {
            break r;
        }
    };
    let dir: [f64; 3] = rng.sample(UnitSphere);
    Release {
        time,
        position: scale(dir, r),
    }
}

/// Number of particles per event, proportional to event mass (largest remainder).
fn allocate(events: &[ReleaseEvent], n: usize) -> Vec<usize> {
    let total: f64 = events.iter().map(ReleaseEvent::mass).sum();
    if total <= 0.0 {
        return vec![0; events.len()];
    }
    let exact: Vec<f64> = events.iter().map(|e| e.mass() / total * n as f64).collect();
    let mut out: Vec<usize> = exact.iter().map(|x| x.floor() as usize).collect();
    let mut order: Vec<usize> = (0..events.len()).collect();
    order.sort_by(|&a, &b| {
        (exact[b] - exact[b].floor())
            .total_cmp(&(exact[a] - exact[a].floor()))
            .then(a.cmp(&b))
    });
    let missing = n - out.iter().sum::<usize>();
    for &i in order.iter().take(missing) {
        out[i] += 1;
    }
    out
}

fn particle_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

fn event_of(counts: &[usize], index: usize) -> usize {
    let mut acc = 0;
    for (e, &c) in counts.iter().enumerate() {
        acc += c;
        if index < acc {
            return e;
        }
    }
    counts.len() - 1
}

/// Release time and position of every particle, in particle order.
///
/// Times follow the raised-cosine window of the owning event; radii follow
/// `½(1 + cos(πr/r0))·r²` and directions are isotropic.
pub fn inject(sched: &SourceSchedule, cfg: &OracleConfig) -> Vec<Release> {
    let counts = allocate(sched.events(), cfg.n_particles);
    (0..cfg.n_particles)
        .into_par_iter()
        .map(|i| {
            let mut rng = particle_rng(cfg.seed, i);
            sample_release(&sched.events()[event_of(&counts, i)], &mut rng)
        })
        .collect()
}

/// Wall rules shared by all particles.
#[derive(Debug, Clone)]
pub struct World {
    pub spheres: Vec<OracleSphere>,
    pub channel_gain: Option<f64>,
}

/// Moves one particle by a Gaussian step of duration `h` starting at time `t`,
/// applying the wall rules at a crossing.
pub fn advance(p: &mut Particle, h: f64, t: f64, world: &World, rng: &mut ChaCha8Rng) {
    if !p.alive {
        return;
    }
    let sp = &world.spheres[p.sphere];
    let sd = (2.0 * sp.diffusion * h).sqrt();
    let xi = [
        sd * rng.sample::<f64, _>(StandardNormal),
        sd * rng.sample::<f64, _>(StandardNormal),
        sd * rng.sample::<f64, _>(StandardNormal),
    ];
    let x = p.position;
    let new = add(x, xi, 1.0);
    let r0 = sp.r0;
    if dot(new, new) <= r0 * r0 {
        p.position = new;
        return;
    }
    // Straight-line crossing point.
    let a = dot(xi, xi);
    let b = 2.0 * dot(x, xi);
    let c = (dot(x, x) - r0 * r0).min(0.0);
    let s = ((-b + (b * b - 4.0 * a * c).sqrt()) / (2.0 * a)).clamp(0.0, 1.0);
    let hit = add(x, xi, s);
    let normal = scale(hit, 1.0 / dot(hit, hit).sqrt());
    let theta = normal[2].clamp(-1.0, 1.0).acos();

    if let Some(region) = sp.region {
        if region.contains(theta) {
            let pc = crossing_probability(sp.permeability.gamma_at(t), h, sp.diffusion).min(1.0);
            if pc > 0.0 && rng.random::<f64>() < pc {
                match (p.sphere, world.channel_gain) {
                    (0, Some(g)) if world.spheres.len() > 1 => {
                        if rng.random::<f64>() < g {
                            p.sphere = 1;
                            p.position = scale(normal, world.spheres[1].r0 * (1.0 - LANDING_DEPTH));
                        } else {
                            p.alive = false;
                        }
                    }
                    _ => p.alive = false,
                }
                return;
            }
        }
    }

    let rem = scale(xi, 1.0 - s);
    let mut out = add(add(hit, rem, 1.0), normal, -2.0 * dot(rem, normal));
    let r = dot(out, out).sqrt();
    if r > r0 {
        // Grazing steps can land outside after one reflection; fold radially.
        out = scale(out, (2.0 * r0 - r).max(0.0) / r);
    }
    p.position = out;
}

/// Count-based concentration at each observation point: particles in the
/// kernel ball over the clipped ball volume, times `M_total / n_injected`.
pub fn estimate_concentration(
    particles: &[Particle],
    points: &[ObservationPoint],
    sphere_radii: &[f64],
    kernel_radius: f64,
    n_injected: usize,
    m_total: f64,
) -> Vec<f64> {
    if n_injected == 0 {
        return vec![0.0; points.len()];
    }
    points
        .iter()
        .map(|obs| {
            let a = obs.kernel_radius.unwrap_or(kernel_radius);
            let c = obs.point.to_cartesian();
            let n = particles
                .iter()
                .filter(|p| p.alive && p.sphere == obs.sphere)
                .filter(|p| {
                    let d = add(p.position, c, -1.0);
                    dot(d, d) <= a * a
                })
                .count();
            let v = clipped_ball_volume(sphere_radii[obs.sphere], a, obs.point.r);
            n as f64 / v * m_total / n_injected as f64
        })
        .collect()
}

fn validate(setup: &OracleSetup) -> Result<usize> {
    let cfg = &setup.config;
    let ns = setup.spheres.len();
    if !(1..=2).contains(&ns) {
        return Err(Error::config("spheres", "need one or two spheres"));
    }
    if (ns == 2) != setup.channel_gain.is_some() {
        return Err(Error::config(
            "network",
            "channel gain is required exactly for two spheres",
        ));
    }
    if let Some(g) = setup.channel_gain {
        if !(0.0..=1.0).contains(&g) {
            return Err(Error::config(
                "network.gamma_s2",
                format!("the particle oracle can only model channel gains in [0, 1], got {g}"),
            ));
        }
    }
    if !(cfg.dt > 0.0 && cfg.dt.is_finite()) {
        return Err(Error::config("oracle.dt", "must be positive"));
    }
    if cfg.n_particles == 0 {
        return Err(Error::config("oracle.n_particles", "must be positive"));
    }
    if cfg.sample_dt.is_nan() || cfg.sample_dt < cfg.dt {
        return Err(Error::config("oracle.sample_dt", "must be at least oracle.dt"));
    }
    for (i, sp) in setup.spheres.iter().enumerate() {
        if !(sp.r0 > 0.0 && sp.diffusion > 0.0) {
            return Err(Error::config(format!("spheres[{i}]"), "R0 and D must be positive"));
        }
        if (2.0 * sp.diffusion * cfg.dt).sqrt() > sp.r0 / 20.0 {
            return Err(Error::config("oracle.dt", "step too large: need sqrt(2 D dt) <= R0/20"));
        }
        if !(cfg.kernel_radius > 0.0 && cfg.kernel_radius <= sp.r0 / 5.0) {
            return Err(Error::config("oracle.kernel_radius", "must lie in (0, R0/5]"));
        }
        if let Some(region) = sp.region {
            region.validate()?;
        }
        sp.permeability.validate()?;
        let g_max = match &sp.permeability {
            Permeability::Constant(g) => *g,
            Permeability::Schedule(s) => s.iter().map(|p| p.1).fold(0.0, f64::max),
        };
        let pc = crossing_probability(g_max, cfg.dt, sp.diffusion);
        if sp.region.is_some() && pc > 1.0 {
            log::warn!("crossing probability {pc:.3} exceeds 1 and is clamped; use a smaller oracle dt");
        }
    }
    for (i, ev) in setup.sources.events().iter().enumerate() {
        ev.validate(setup.spheres[0].r0).map_err(|e| match e {
            Error::Config { path, message } => Error::config(format!("releases[{i}].{path}"), message),
            other => other,
        })?;
    }
    for (i, obs) in setup.observe.iter().enumerate() {
        let sp = setup
            .spheres
            .get(obs.sphere)
            .ok_or_else(|| Error::config(format!("observe[{i}].sphere"), "no such sphere"))?;
        if !(obs.point.r >= 0.0 && obs.point.r <= sp.r0) {
            return Err(Error::config(format!("observe[{i}]"), "point lies outside the sphere"));
        }
    }
    let k = (setup.horizon / cfg.sample_dt).round();
    if setup.horizon.is_nan()
        || setup.horizon <= 0.0
        || (k * cfg.sample_dt - setup.horizon).abs() > 1e-9 * setup.horizon
    {
        return Err(Error::config(
            "horizon",
            "must be a positive multiple of oracle.sample_dt",
        ));
    }
    Ok(k as usize)
}

struct Tally {
    counts: Vec<u64>,
    alive: Vec<u64>,
}

impl Tally {
    fn new(samples: usize, points: usize, spheres: usize) -> Self {
        Tally {
            counts: vec![0; samples * points],
            alive: vec![0; samples * spheres],
        }
    }

    fn merge(mut self, other: Tally) -> Tally {
        for (a, b) in self.counts.iter_mut().zip(other.counts) {
            *a += b;
        }
        for (a, b) in self.alive.iter_mut().zip(other.alive) {
            *a += b;
        }
        self
    }
}

/// Runs the oracle and reports estimates on the grid `j · sample_dt`.
pub fn run_oracle(setup: &OracleSetup) -> Result<OracleTrace> {
    let k_last = validate(setup)?;
    let cfg = setup.config;
    let samples = k_last + 1;
    let times: Vec<f64> = (0..samples).map(|j| j as f64 * cfg.sample_dt).collect();
    let world = World {
        spheres: setup.spheres.clone(),
        channel_gain: setup.channel_gain,
    };
    let n_pts = setup.observe.len();
    let n_sph = setup.spheres.len();
    let centers: Vec<([f64; 3], f64, usize)> = setup
        .observe
        .iter()
        .map(|o| {
            (
                o.point.to_cartesian(),
                o.kernel_radius.unwrap_or(cfg.kernel_radius),
                o.sphere,
            )
        })
        .collect();
    let alloc = allocate(setup.sources.events(), cfg.n_particles);

    let tally = (0..cfg.n_particles)
        .into_par_iter()
        .fold(
            || Tally::new(samples, n_pts, n_sph),
            |mut tally, i| {
                let mut rng = particle_rng(cfg.seed, i);
                let birth = sample_release(&setup.sources.events()[event_of(&alloc, i)], &mut rng);
                let mut p = Particle {
                    position: birth.position,
                    sphere: 0,
                    alive: true,
                };
                let mut t = birth.time;
                let first = times.partition_point(|&s| s < t);
                for (j, &s) in times.iter().enumerate().skip(first) {
                    while p.alive && s - t > 1e-12 * s.max(1.0) {
                        let sp = &world.spheres[p.sphere];
                        let wall = sp.r0 - dot(p.position, p.position).sqrt();
                        let chunk = ((wall / CHUNK_SIGMAS).powi(2) / (2.0 * sp.diffusion * cfg.dt)).floor();
                        let h = (chunk.max(1.0) * cfg.dt).min(s - t);
                        advance(&mut p, h, t, &world, &mut rng);
                        t += h;
                    }
                    if !p.alive {
                        break;
                    }
                    t = s;
                    tally.alive[j * n_sph + p.sphere] += 1;
                    for (q, (c, a, sph)) in centers.iter().enumerate() {
                        if *sph == p.sphere {
                            let d = add(p.position, *c, -1.0);
                            if dot(d, d) <= a * a {
                                tally.counts[j * n_pts + q] += 1;
                            }
                        }
                    }
                }
                tally
            },
        )
        .reduce(|| Tally::new(samples, n_pts, n_sph), Tally::merge);

    let m_total = setup.sources.total_mass();
    let per = m_total / cfg.n_particles as f64;
    let kernel_volumes: Vec<f64> = setup
        .observe
        .iter()
        .zip(&centers)
        .map(|(o, (_, a, sph))| clipped_ball_volume(setup.spheres[*sph].r0, *a, o.point.r))
        .collect();
    let counts: Vec<Vec<u64>> = (0..n_pts)
        .map(|q| (0..samples).map(|j| tally.counts[j * n_pts + q]).collect())
        .collect();
    let fields = counts
        .iter()
        .zip(&kernel_volumes)
        .map(|(series, v)| {
            series
                .iter()
                .map(|&c| FieldVector {
                    p: c as f64 / v * per,
                    i_r: f64::NAN,
                    i_theta: f64::NAN,
                    i_phi: f64::NAN,
                })
                .collect()
        })
        .collect();
    let mass = (0..n_sph)
        .map(|s| (0..samples).map(|j| tally.alive[j * n_sph + s] as f64 * per).collect())
        .collect();
    let r0 = setup.spheres[0].r0;
    Ok(OracleTrace {
        trace: Trace {
            times,
            observe: setup
                .observe
                .iter()
                .zip(&centers)
                .map(|(o, (_, a, _))| ObservationPoint {
                    kernel_radius: Some(*a),
                    ..*o
                })
                .collect(),
            fields,
            mass,
            final_states: Vec::new(),
            injected_mass: m_total,
            volume: 4.0 / 3.0 * PI * r0.powi(3),
        },
        counts,
        kernel_volumes,
        n_particles: cfg.n_particles,
    })
}

/// Spherical coordinates of a particle position.
pub fn particle_point(p: &Particle) -> Point {
    Point::from_cartesian(p.position)
}
