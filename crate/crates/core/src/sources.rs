//! Raised-cosine releases centered at the origin and their modal projections.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::sync::{Arc, RwLock};

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::modes::ModeSet;
use crate::quad;
use crate::specfun::sph_jn;

/// One release: a raised cosine of duration `t0` in time and radius `r0` in space.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReleaseEvent {
    pub t_start: f64,
    pub t0: f64,
    pub r0: f64,
    #[serde(default = "one")]
    pub amount_scale: f64,
}

fn one() -> f64 {
    1.0
}

impl ReleaseEvent {
    pub fn new(t_start: f64, t0: f64, r0: f64) -> Self {
        ReleaseEvent {
            t_start,
            t0,
            r0,
            amount_scale: 1.0,
        }
    }

    pub fn t_end(&self) -> f64 {
        self.t_start + self.t0
    }

    /// Checks the event against a sphere of radius `sphere_r0`.
    pub fn validate(&self, sphere_r0: f64) -> Result<()> {
        if !self.t_start.is_finite() {
            return Err(Error::config("t_start", "must be finite"));
        }
        if !(self.t0 > 0.0 && self.t0.is_finite()) {
            return Err(Error::config("t0", format!("must be positive, got {}", self.t0)));
        }
        if !(self.r0 > 0.0 && self.r0 <= sphere_r0) {
            return Err(Error::config(
                "r0",
                format!("must lie in (0, R0 = {sphere_r0}], got {}", self.r0),
            ));
        }
        if !(self.amount_scale >= 0.0 && self.amount_scale.is_finite()) {
            return Err(Error::config("amount_scale", "must be non-negative"));
        }
        Ok(())
    }

    /// `∫_V f_x dV` times `amount_scale`: the spatial amount per unit of temporal profile.
    pub fn spatial_amount(&self) -> f64 {
        self.amount_scale * 2.0 * PI * self.r0.powi(3) * (1.0 / 3.0 - 2.0 / (PI * PI))
    }

    /// Total amount released by this event.
    pub fn mass(&self) -> f64 {
        0.5 * self.t0 * self.spatial_amount()
    }
}

/// `½(1 − cos(2π(t − t_start)/t0))` inside the window, zero outside.
pub fn temporal_profile(t: f64, ev: &ReleaseEvent) -> f64 {
    if t < ev.t_start || t > ev.t_end() {
        return 0.0;
    }
    0.5 * (1.0 - (2.0 * PI * (t - ev.t_start) / ev.t0).cos())
}

/// `½(1 + cos(π r/r0))` for `r ≤ r0`, zero outside.
pub fn spatial_profile(r: f64, ev: &ReleaseEvent) -> f64 {
    if r > ev.r0 {
        return 0.0;
    }
    0.5 * (1.0 + (PI * r / ev.r0).cos())
}

/// Modal projection `∫ conj(K1) f_x dV` of one event, including `amount_scale`.
///
/// Only `(n, m) = (0, 0)` entries are nonzero; all others are exactly zero.
pub fn project_source(ms: &ModeSet, ev: &ReleaseEvent) -> Result<Vec<Complex64>> {
    ev.validate(ms.r0())?;
    Ok(unit_projection(ms, ev.r0)
        .into_iter()
        .map(|v| Complex64::new(v * ev.amount_scale, 0.0))
        .collect())
}

fn unit_projection(ms: &ModeSet, r0: f64) -> Vec<f64> {
    let shape = ReleaseEvent::new(0.0, 1.0, r0);
    let c = (4.0 * PI).sqrt();
    ms.modes()
        .iter()
        .map(|md| {
            if md.n != 0 {
                return 0.0;
            }
            let k = md.k;
            let r = quad::integrate(
                |r| sph_jn(0, k * r) * spatial_profile(r, &shape) * r * r,
                0.0,
                r0,
                1e-10,
                1e-300,
            );
            c * r.value
        })
        .collect()
}

type CacheKey = (u64, u64);

/// Release events sorted by start time, with projections cached per
/// `(mode set, r0)`.
#[derive(Debug, Default)]
pub struct SourceSchedule {
    events: Vec<ReleaseEvent>,
    cache: RwLock<HashMap<CacheKey, Arc<Vec<f64>>>>,
}

impl Clone for SourceSchedule {
    fn clone(&self) -> Self {
        SourceSchedule::new(self.events.clone())
    }
}

impl SourceSchedule {
    pub fn new(mut events: Vec<ReleaseEvent>) -> Self {
        events.sort_by(|a, b| a.t_start.total_cmp(&b.t_start));
        SourceSchedule {
            events,
            cache: RwLock::new(HashMap::new()),
        }
    }

    pub fn events(&self) -> &[ReleaseEvent] {
        &self.events
    }

    /// Sum of all event masses.
    pub fn total_mass(&self) -> f64 {
        self.events.iter().map(ReleaseEvent::mass).sum()
    }

    /// Time after which no event releases anything.
    pub fn end_time(&self) -> f64 {
        self.events
            .iter()
            .map(ReleaseEvent::t_end)
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// Projection of a unit-scale event with radius `r0` onto `ms`.
    pub fn unit_projection(&self, ms: &ModeSet, r0: f64) -> Arc<Vec<f64>> {
        let key = (ms.id(), r0.to_bits());
        if let Some(v) = self.cache.read().expect("projection cache poisoned").get(&key) {
            return Arc::clone(v);
        }
        let v = Arc::new(unit_projection(ms, r0));
        // Racing writers compute identical vectors, so keeping the first is fine.
        let mut w = self.cache.write().expect("projection cache poisoned");
        Arc::clone(w.entry(key).or_insert(v))
    }

    /// Projection of one event onto `ms`, including its amount scale.
    pub fn event_projection(&self, ms: &ModeSet, ev: &ReleaseEvent) -> Vec<Complex64> {
        self.unit_projection(ms, ev.r0)
            .iter()
            .map(|&v| Complex64::new(v * ev.amount_scale, 0.0))
            .collect()
    }

    /// Modal source vector at time `t`: `Σ_ev f_t(t) · projection(ev)`.
    pub fn source_vector_at(&self, ms: &ModeSet, t: f64) -> Vec<Complex64> {
        let mut out = vec![Complex64::new(0.0, 0.0); ms.len()];
        for ev in &self.events {
            let w = temporal_profile(t, ev) * ev.amount_scale;
            if w == 0.0 {
                continue;
            }
            let p = self.unit_projection(ms, ev.r0);
            for (o, v) in out.iter_mut().zip(p.iter()) {
                o.re += w * v;
            }
        }
        out
    }
}
