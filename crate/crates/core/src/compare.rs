//! Engine versus oracle on matched kernel observables.

use crate::engine::Trace;
use crate::error::{Error, Result};
use crate::particlesim::OracleTrace;

/// Statistical floor, in binomial standard deviations.
pub const SIGMA_FLOOR: f64 = 3.0;

#[derive(Debug, Clone, PartialEq)]
pub struct PointComparison {
    pub point: usize,
    /// Peak of the engine curve.
    pub peak: f64,
    /// Largest |engine − oracle| over all samples.
    pub max_deviation: f64,
    pub worst_time: f64,
    /// Samples whose deviation exceeds `max(tol · peak, 3σ)`.
    pub failures: usize,
    pub samples: usize,
}

impl PointComparison {
    pub fn relative(&self) -> f64 {
        if self.peak > 0.0 {
            self.max_deviation / self.peak
        } else {
            0.0
        }
    }

    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub tol: f64,
    pub points: Vec<PointComparison>,
}

impl Comparison {
    pub fn passed(&self) -> bool {
        self.points.iter().all(PointComparison::passed)
    }

    /// Writes `point_id,peak,max_dev,max_dev_frac,worst_t,failures,samples,pass`.
    pub fn write_csv<W: std::io::Write>(&self, w: W) -> std::io::Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record([
            "point_id",
            "peak",
            "max_dev",
            "max_dev_frac",
            "worst_t",
            "failures",
            "samples",
            "pass",
        ])?;
        for p in &self.points {
            wr.write_record([
                p.point.to_string(),
                p.peak.to_string(),
                p.max_deviation.to_string(),
                p.relative().to_string(),
                p.worst_time.to_string(),
                p.failures.to_string(),
                p.samples.to_string(),
                p.passed().to_string(),
            ])?;
        }
        wr.flush()
    }
}

/// Compares at every oracle sample time. Each sample passes when
/// `|engine − oracle| ≤ max(tol · peak, 3σ)`, where σ is the binomial
/// spread of the kernel count around the engine's predicted occupancy.
pub fn compare_traces(engine: &Trace, oracle: &OracleTrace, tol: f64) -> Result<Comparison> {
    if engine.observe.len() != oracle.trace.observe.len() {
        return Err(Error::Consistency(
            "engine and oracle observe different point counts".into(),
        ));
    }
    let dt = match engine.times.as_slice() {
        [a, b, ..] => b - a,
        _ => return Err(Error::Consistency("engine trace too short".into())),
    };
    let mut index = Vec::with_capacity(oracle.trace.times.len());
    for &t in &oracle.trace.times {
        let k = (t / dt).round() as usize;
        match engine.times.get(k) {
            Some(&te) if (te - t).abs() <= 1e-9 * t.max(1.0) => index.push(k),
            _ => {
                return Err(Error::Consistency(format!(
                    "oracle sample t = {t} is not on the engine grid"
                )))
            }
        }
    }
    let points = (0..engine.observe.len())
        .map(|q| {
            let e = engine.concentration(q);
            let peak = e.iter().copied().fold(0.0, f64::max);
            let mut cmp = PointComparison {
                point: q,
                peak,
                max_deviation: 0.0,
                worst_time: 0.0,
                failures: 0,
                samples: index.len(),
            };
            for (j, &k) in index.iter().enumerate() {
                let dev = (e[k] - oracle.trace.fields[q][j].p).abs();
                if dev > cmp.max_deviation {
                    cmp.max_deviation = dev;
                    cmp.worst_time = oracle.trace.times[j];
                }
                if dev > (tol * peak).max(SIGMA_FLOOR * oracle.sigma_at(q, e[k])) {
                    cmp.failures += 1;
                }
            }
            cmp
        })
        .collect();
    Ok(Comparison { tol, points })
}
