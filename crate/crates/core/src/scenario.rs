//! JSON experiment descriptions, built-in presets, and their translation
//! into engine and oracle runs.

use std::f64::consts::PI;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::boundary::{build_connection_matrix, build_feedback_matrix, BoundaryRegion};
use crate::engine::{closed_loop_spectrum, ObservationPoint, Permeability, Simulation, SourceIntegration, SphereModel};
use crate::error::{Error, Result};
use crate::modes::{enumerate_modes, ModeSet, Point};
use crate::particlesim::{OracleConfig, OracleSetup, OracleSphere};
use crate::sources::{ReleaseEvent, SourceSchedule};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SphereSpec {
    #[serde(rename = "R0")]
    pub r0: f64,
    #[serde(rename = "D")]
    pub d: f64,
    #[serde(rename = "Q")]
    pub q: usize,
    #[serde(rename = "T")]
    pub t: f64,
    #[serde(default)]
    pub source_integration: SourceIntegration,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleEntry {
    pub t_from: f64,
    pub gamma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum PermeabilitySpec {
    Constant { gamma: f64 },
    Schedule { schedule: Vec<ScheduleEntry> },
}

impl PermeabilitySpec {
    pub fn to_permeability(&self) -> Permeability {
        match self {
            PermeabilitySpec::Constant { gamma } => Permeability::Constant(*gamma),
            PermeabilitySpec::Schedule { schedule } => {
                Permeability::Schedule(schedule.iter().map(|e| (e.t_from, e.gamma)).collect())
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSpec {
    pub enabled: bool,
    pub gamma_s1: f64,
    pub gamma_s2: f64,
    pub theta0: f64,
}

fn first_sphere() -> usize {
    1
}

fn is_first(s: &usize) -> bool {
    *s == 1
}

/// Observation point; `sphere` is 1 for S1 (default) or 2 for S2.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObserveSpec {
    pub r: f64,
    pub phi: f64,
    pub theta: f64,
    #[serde(default = "first_sphere", skip_serializing_if = "is_first")]
    pub sphere: usize,
    /// Engine only: average over a ball of this radius.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kernel_radius: Option<f64>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dt: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_particles: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kernel_radius: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sample_dt: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSpec {
    #[serde(default)]
    pub normalized: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<String>,
}

/// A complete experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub sphere: SphereSpec,
    pub releases: Vec<ReleaseEvent>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub permeability: Option<PermeabilitySpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub region: Option<BoundaryRegion>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub network: Option<NetworkSpec>,
    pub observe: Vec<ObserveSpec>,
    pub horizon: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub oracle: Option<OracleSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<OutputSpec>,
}

fn prefixed(prefix: String, e: Error) -> Error {
    match e {
        Error::Config { path, message } => Error::Config {
            path: format!("{prefix}.{path}"),
            message,
        },
        other => other,
    }
}

impl Scenario {
    /// Parses and validates a scenario. Errors carry the JSON path of the offending field.
    pub fn from_json(text: &str) -> Result<Scenario> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let sc: Scenario = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            Error::config(
                if path == "." { String::new() } else { path },
                e.into_inner().to_string(),
            )
        })?;
        sc.validate()?;
        Ok(sc)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scenario serializes")
    }

    /// The network section, if present and enabled.
    pub fn active_network(&self) -> Option<&NetworkSpec> {
        self.network.as_ref().filter(|n| n.enabled)
    }

    pub fn validate(&self) -> Result<()> {
        let s = &self.sphere;
        let positive = |v: f64| v > 0.0 && v.is_finite();
        if !positive(s.r0) {
            return Err(Error::config("sphere.R0", "must be positive"));
        }
        if !positive(s.d) {
            return Err(Error::config("sphere.D", "must be positive"));
        }
        if s.q == 0 {
            return Err(Error::config("sphere.Q", "must be at least 1"));
        }
        if !positive(s.t) {
            return Err(Error::config("sphere.T", "must be positive"));
        }
        if self.releases.is_empty() {
            return Err(Error::config("releases", "need at least one release"));
        }
        for (i, ev) in self.releases.iter().enumerate() {
            ev.validate(s.r0).map_err(|e| prefixed(format!("releases[{i}]"), e))?;
        }
        if let Some(p) = &self.permeability {
            p.to_permeability().validate()?;
        }
        if let Some(r) = &self.region {
            r.validate()?;
        }
        let two = match self.active_network() {
            Some(n) => {
                if self.permeability.is_some() {
                    return Err(Error::config(
                        "permeability",
                        "must be absent when network.enabled is true (use network.gamma_s1)",
                    ));
                }
                if self.region.is_some() {
                    return Err(Error::config(
                        "region",
                        "must be absent when network.enabled is true (use network.theta0)",
                    ));
                }
                BoundaryRegion::Cap { theta0: n.theta0 }
                    .validate()
                    .map_err(|_| Error::config("network.theta0", format!("must lie in (0, pi], got {}", n.theta0)))?;
                for (name, g) in [("network.gamma_s1", n.gamma_s1), ("network.gamma_s2", n.gamma_s2)] {
                    if !(g >= 0.0 && g.is_finite()) {
                        return Err(Error::config(name, format!("must be non-negative, got {g}")));
                    }
                }
                true
            }
            None => false,
        };
        if self.observe.is_empty() {
            return Err(Error::config("observe", "need at least one observation point"));
        }
        for (i, o) in self.observe.iter().enumerate() {
            let max_sphere = if two { 2 } else { 1 };
            if o.sphere == 0 || o.sphere > max_sphere {
                return Err(Error::config(
                    format!("observe[{i}].sphere"),
                    format!("must be 1..={max_sphere}"),
                ));
            }
            if !(o.r >= 0.0 && o.r <= s.r0) || !o.phi.is_finite() || !o.theta.is_finite() {
                return Err(Error::config(
                    format!("observe[{i}]"),
                    "point must lie inside the sphere",
                ));
            }
            if let Some(a) = o.kernel_radius {
                if !positive(a) {
                    return Err(Error::config(format!("observe[{i}].kernel_radius"), "must be positive"));
                }
            }
        }
        let k = (self.horizon / s.t).round();
        if !positive(self.horizon) || (k * s.t - self.horizon).abs() > 1e-9 * self.horizon {
            return Err(Error::config("horizon", "must be a positive multiple of sphere.T"));
        }
        Ok(())
    }

    fn schedule(&self) -> Arc<SourceSchedule> {
        Arc::new(SourceSchedule::new(self.releases.clone()))
    }

    fn points(&self, kernel: Option<f64>) -> Vec<ObservationPoint> {
        self.observe
            .iter()
            .map(|o| ObservationPoint {
                sphere: o.sphere - 1,
                point: Point::new(o.r, o.phi, o.theta),
                kernel_radius: kernel.or(o.kernel_radius),
            })
            .collect()
    }

    /// The truncated mode set shared by every sphere of the scenario.
    pub fn mode_set(&self) -> Result<Arc<ModeSet>> {
        Ok(Arc::new(enumerate_modes(self.sphere.r0, self.sphere.d, self.sphere.q)?))
    }

    /// Engine run. `kernel` overrides every point's averaging radius.
    pub fn build_simulation(&self, kernel: Option<f64>) -> Result<Simulation> {
        self.build_simulation_with(self.mode_set()?, kernel)
    }

    /// Engine run on a precomputed mode set.
    pub fn build_simulation_with(&self, ms: Arc<ModeSet>, kernel: Option<f64>) -> Result<Simulation> {
        let (spheres, connection) = match self.active_network() {
            Some(n) => {
                let fb = build_feedback_matrix(&ms, BoundaryRegion::Cap { theta0: n.theta0 })?;
                let conn = build_connection_matrix(&ms, &ms, n.theta0, n.gamma_s1, n.gamma_s2)?;
                let s1 = SphereModel {
                    modes: Arc::clone(&ms),
                    feedback: Some(Arc::new(fb)),
                    permeability: Permeability::Constant(n.gamma_s1),
                };
                (vec![s1, SphereModel::reflective(Arc::clone(&ms))], Some(Arc::new(conn)))
            }
            None => {
                let perm = self.permeability.as_ref().map(PermeabilitySpec::to_permeability);
                let s1 = match perm {
                    Some(p) => {
                        let region = self.region.unwrap_or(BoundaryRegion::FullSphere);
                        SphereModel {
                            modes: Arc::clone(&ms),
                            feedback: Some(Arc::new(build_feedback_matrix(&ms, region)?)),
                            permeability: p,
                        }
                    }
                    None => SphereModel::reflective(Arc::clone(&ms)),
                };
                (vec![s1], None)
            }
        };
        Ok(Simulation {
            spheres,
            sources: self.schedule(),
            connection,
            dt: self.sphere.t,
            horizon: self.horizon,
            integration: self.sphere.source_integration,
            observe: self.points(kernel),
        })
    }

    /// Oracle settings with defaults filled in.
    pub fn oracle_config(&self) -> OracleConfig {
        let mut cfg = OracleConfig::for_radius(self.sphere.r0);
        if let Some(o) = &self.oracle {
            cfg.dt = o.dt.unwrap_or(cfg.dt);
            cfg.n_particles = o.n_particles.unwrap_or(cfg.n_particles);
            cfg.seed = o.seed.unwrap_or(cfg.seed);
            cfg.kernel_radius = o.kernel_radius.unwrap_or(cfg.kernel_radius);
            cfg.sample_dt = o.sample_dt.unwrap_or(cfg.sample_dt);
        }
        cfg
    }

    /// Particle run with the same physics as [`Scenario::build_simulation`].
    pub fn build_oracle(&self) -> Result<OracleSetup> {
        let (r0, d) = (self.sphere.r0, self.sphere.d);
        let (spheres, channel_gain) = match self.active_network() {
            Some(n) => {
                let s1 = OracleSphere {
                    r0,
                    diffusion: d,
                    region: Some(BoundaryRegion::Cap { theta0: n.theta0 }),
                    permeability: Permeability::Constant(n.gamma_s1),
                };
                (vec![s1, OracleSphere::reflective(r0, d)], Some(n.gamma_s2))
            }
            None => {
                let mut s1 = OracleSphere::reflective(r0, d);
                if let Some(p) = &self.permeability {
                    s1.region = Some(self.region.unwrap_or(BoundaryRegion::FullSphere));
                    s1.permeability = p.to_permeability();
                }
                (vec![s1], None)
            }
        };
        let config = self.oracle_config();
        Ok(OracleSetup {
            spheres,
            channel_gain,
            sources: self.schedule(),
            horizon: self.horizon,
            observe: self.points(None),
            config,
        })
    }
}

/// Mode budget for the single-sphere presets: 41 radial modes of order 0.
/// A narrow central release makes the truncated boundary concentration ring,
/// and permeable walls converge slowly near the wall, so few modes are not enough.
pub const FIG4_Q: usize = 160_000;
/// Mode budget of the two-sphere preset.
pub const FIG6_Q: usize = 240;

fn fig4_base(gamma: f64) -> Scenario {
    Scenario {
        sphere: SphereSpec {
            r0: 1.0,
            d: 1e-2,
            q: FIG4_Q,
            t: 0.01,
            source_integration: SourceIntegration::Exact,
        },
        releases: vec![ReleaseEvent::new(0.25, 0.1, 0.1), ReleaseEvent::new(3.0, 0.1, 0.1)],
        permeability: Some(PermeabilitySpec::Constant { gamma }),
        region: Some(BoundaryRegion::FullSphere),
        network: None,
        observe: [0.4, 0.9]
            .iter()
            .map(|&r| ObserveSpec {
                r,
                phi: PI / 3.0,
                theta: PI / 4.0,
                sphere: 1,
                kernel_radius: None,
            })
            .collect(),
        horizon: 20.0,
        oracle: Some(OracleSpec {
            dt: Some(1e-4),
            n_particles: Some(200_000),
            seed: Some(20_240),
            kernel_radius: Some(0.08),
            // Kernel counts decorrelate over roughly a²/(6D) ≈ 0.1 s; sparser
            // samples keep the per-sample 3σ test from multiplying false alarms.
            sample_dt: Some(0.5),
        }),
        output: Some(OutputSpec {
            normalized: true,
            path: None,
        }),
    }
}

/// `fig4`: one file per permeability.
pub fn fig4() -> Vec<(String, Scenario)> {
    [("0", 0.0), ("0.01", 0.01), ("0.1", 0.1)]
        .iter()
        .map(|(tag, g)| (format!("fig4_gamma{tag}"), fig4_base(*g)))
        .collect()
}

/// γ toggles 0 → 0.1 → 0 → 0.1 → 0 in 10 s intervals, first opening at 10 s.
pub fn fig5_schedule() -> Vec<ScheduleEntry> {
    [(0.0, 0.0), (10.0, 0.1), (20.0, 0.0), (30.0, 0.1), (40.0, 0.0)]
        .iter()
        .map(|&(t_from, gamma)| ScheduleEntry { t_from, gamma })
        .collect()
}

/// `fig5`: time-variant γ and the reflective reference, observed at r = 0.9.
pub fn fig5() -> Vec<(String, Scenario)> {
    let mut base = fig4_base(0.0);
    base.observe.retain(|o| o.r == 0.9);
    base.horizon = 50.0;
    let mut toggled = base.clone();
    toggled.permeability = Some(PermeabilitySpec::Schedule {
        schedule: fig5_schedule(),
    });
    vec![("fig5".to_string(), toggled), ("fig5_reference".to_string(), base)]
}

/// Slowest closed-loop decay time of S1's driven block in the `fig6` network.
pub fn fig6_time_constant(ms: &ModeSet, theta0: f64, gamma_s1: f64) -> Result<f64> {
    let fb = build_feedback_matrix(ms, BoundaryRegion::Cap { theta0 })?;
    let spec = closed_loop_spectrum(ms, Some(&fb), gamma_s1);
    let lead = spec
        .iter()
        .find(|b| b.modes.contains(&0))
        .and_then(|b| b.eigenvalues.first().copied())
        .ok_or_else(|| Error::Consistency("constant mode missing from the spectrum".into()))?;
    if lead.is_nan() || lead >= 0.0 {
        return Err(Error::Numerical(format!("dominant eigenvalue {lead} is not negative")));
    }
    Ok(-1.0 / lead)
}

/// `fig6`: the two-sphere network and S1 alone with a closed membrane.
/// The horizon is five dominant coupling time constants, rounded up to whole seconds.
pub fn fig6() -> Result<Vec<(String, Scenario)>> {
    let theta0 = PI / 4.0;
    let (gamma_s1, gamma_s2) = (0.1, 1.0);
    let ms = enumerate_modes(1.0, 1e-2, FIG6_Q)?;
    let tau = fig6_time_constant(&ms, theta0, gamma_s1)?;
    let horizon = (5.0 * tau).ceil();
    let at = |r: f64, sphere: usize| ObserveSpec {
        r,
        phi: 0.0,
        theta: PI / 2.0,
        sphere,
        kernel_radius: None,
    };
    let net = Scenario {
        sphere: SphereSpec {
            r0: 1.0,
            d: 1e-2,
            q: FIG6_Q,
            t: 0.01,
            source_integration: SourceIntegration::Exact,
        },
        releases: vec![ReleaseEvent::new(0.25, 0.4, 0.4), ReleaseEvent::new(3.0, 0.4, 0.4)],
        permeability: None,
        region: None,
        network: Some(NetworkSpec {
            enabled: true,
            gamma_s1,
            gamma_s2,
            theta0,
        }),
        observe: vec![at(1.0, 1), at(1.0, 2), at(0.1, 2)],
        horizon,
        oracle: None,
        output: Some(OutputSpec {
            normalized: true,
            path: None,
        }),
    };
    let mut reference = net.clone();
    reference.network = Some(NetworkSpec {
        gamma_s1: 0.0,
        ..net.network.unwrap()
    });
    Ok(vec![
        ("fig6".to_string(), net),
        ("fig6_reference".to_string(), reference),
    ])
}

/// Preset files by figure name.
pub fn preset(name: &str) -> Result<Vec<(String, Scenario)>> {
    match name {
        "fig4" => Ok(fig4()),
        "fig5" => Ok(fig5()),
        "fig6" => fig6(),
        other => Err(Error::config(
            "preset",
            format!("unknown preset `{other}` (expected fig4, fig5 or fig6)"),
        )),
    }
}
