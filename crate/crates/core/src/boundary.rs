//! Feedback matrices for permeable boundaries and the connection matrix
//! between two spheres.
//!
//! Both are block-sparse: a full-sphere boundary couples only modes sharing
//! `(n, m)`, a polar cap only modes sharing `m`. Blocks are square and index
//! the same modes on both sides.

use std::f64::consts::PI;
use std::sync::Arc;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::modes::{ModeIndex, ModeSet};
use crate::quad;
use crate::specfun::{sph_jn, LegendreTable};

/// Initial Gauss–Legendre order for cap integrals.
pub const CAP_QUAD_ORDER: usize = 64;
/// Entrywise tolerance between successive quadrature orders.
pub const CAP_QUAD_TOL: f64 = 1e-10;

/// The permeable part of a sphere's surface.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum BoundaryRegion {
    FullSphere,
    /// Polar cap `θ ∈ [0, theta0]`.
    Cap {
        theta0: f64,
    },
}

impl BoundaryRegion {
    pub fn validate(&self) -> Result<()> {
        if let BoundaryRegion::Cap { theta0 } = *self {
            if !(theta0 > 0.0 && theta0 <= PI) {
                return Err(Error::config(
                    "region.theta0",
                    format!("must lie in (0, pi], got {theta0}"),
                ));
            }
        }
        Ok(())
    }

    /// Whether a sphere-local polar angle lies in the region.
    pub fn contains(&self, theta: f64) -> bool {
        match *self {
            BoundaryRegion::FullSphere => true,
            BoundaryRegion::Cap { theta0 } => theta <= theta0,
        }
    }
}

/// One dense block acting on the listed modes.
#[derive(Debug, Clone)]
pub struct Block {
    pub modes: Vec<usize>,
    pub values: Arc<DMatrix<f64>>,
}

/// Square block-diagonal (after permutation) real matrix.
#[derive(Debug, Clone)]
pub struct BlockMatrix {
    dim: usize,
    blocks: Vec<Block>,
    /// `(block, local index)` per mode, if the mode belongs to any block.
    locate: Vec<Option<(usize, usize)>>,
}

impl BlockMatrix {
    pub(crate) fn new(dim: usize, blocks: Vec<Block>) -> Self {
        let mut locate = vec![None; dim];
        for (b, blk) in blocks.iter().enumerate() {
            for (l, &mu) in blk.modes.iter().enumerate() {
                locate[mu] = Some((b, l));
            }
        }
        BlockMatrix { dim, blocks, locate }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    /// Entry `(i, j)`; zero outside all blocks.
    pub fn entry(&self, i: usize, j: usize) -> f64 {
        match (self.locate[i], self.locate[j]) {
            (Some((bi, li)), Some((bj, lj))) if bi == bj => self.blocks[bi].values[(li, lj)],
            _ => 0.0,
        }
    }

    /// Dense copy; intended for small mode sets and diagnostics.
    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.dim, self.dim);
        for blk in &self.blocks {
            for (li, &i) in blk.modes.iter().enumerate() {
                for (lj, &j) in blk.modes.iter().enumerate() {
                    out[(i, j)] = blk.values[(li, lj)];
                }
            }
        }
        out
    }

    /// All stored entries as `(row, col, value)`.
    pub fn triplets(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        self.blocks.iter().flat_map(|blk| {
            blk.modes.iter().enumerate().flat_map(move |(li, &i)| {
                blk.modes
                    .iter()
                    .enumerate()
                    .map(move |(lj, &j)| (i, j, blk.values[(li, lj)]))
            })
        })
    }

    fn scaled(&self, c: f64) -> BlockMatrix {
        let blocks = self
            .blocks
            .iter()
            .map(|b| Block {
                modes: b.modes.clone(),
                values: Arc::new(b.values.as_ref() * c),
            })
            .collect();
        BlockMatrix::new(self.dim, blocks)
    }
}

/// Boundary feedback matrix without the permeability factor.
#[derive(Debug, Clone)]
pub struct FeedbackMatrix {
    pub region: BoundaryRegion,
    pub mode_set_id: u64,
    pub matrix: BlockMatrix,
}

/// Inter-sphere coupling including the `-γ_S1 γ_S2` prefactor.
#[derive(Debug, Clone)]
pub struct ConnectionMatrix {
    pub theta0: f64,
    pub gamma_s1: f64,
    pub gamma_s2: f64,
    pub matrix: BlockMatrix,
}

/// `j_n(k R0)` per mode.
fn surface_values(ms: &ModeSet) -> Vec<f64> {
    let r0 = ms.r0();
    ms.modes().iter().map(|md| sph_jn(md.n, md.k * r0)).collect()
}

fn full_sphere(ms: &ModeSet) -> BlockMatrix {
    let r0 = ms.r0();
    let b = surface_values(ms);
    let mut by_n: std::collections::HashMap<usize, Arc<DMatrix<f64>>> = Default::default();
    let mut blocks = Vec::new();
    for ((n, _m), modes) in ms.blocks_by_nm() {
        // Same ν list for every m of one order, so the block is shared.
        let values = by_n
            .entry(n)
            .or_insert_with(|| {
                let modes_ref: Vec<&ModeIndex> = modes.iter().map(|&mu| ms.mode(mu)).collect();
                Arc::new(DMatrix::from_fn(modes.len(), modes.len(), |i, j| {
                    r0 * r0 * b[modes_ref[i].mu] * b[modes_ref[j].mu] / modes_ref[j].norm
                }))
            })
            .clone();
        blocks.push(Block { modes, values });
    }
    BlockMatrix::new(ms.len(), blocks)
}

/// `A^m_{n n̂} = 2π ∫_{cos θ0}^{1} P̃_n^m P̃_n̂^m dx` for all `0 ≤ m ≤ n, n̂ ≤ nmax`.
fn cap_angular(nmax: usize, theta0: f64, order: usize) -> Vec<DMatrix<f64>> {
    let (xs, ws) = quad::gauss_legendre_on(order, theta0.cos(), 1.0);
    let mut out: Vec<DMatrix<f64>> = (0..=nmax).map(|m| DMatrix::zeros(nmax + 1 - m, nmax + 1 - m)).collect();
    let mut vals = vec![0.0; nmax + 1];
    for (x, w) in xs.iter().zip(&ws) {
        let t = LegendreTable::new(nmax, x.clamp(-1.0, 1.0).acos());
        for (m, a) in out.iter_mut().enumerate() {
            for n in m..=nmax {
                vals[n - m] = t.p(n, m as i32);
            }
            let len = nmax + 1 - m;
            for i in 0..len {
                let wi = 2.0 * PI * w * vals[i];
                for j in 0..len {
                    a[(i, j)] += wi * vals[j];
                }
            }
        }
    }
    out
}

fn cap_with_order(ms: &ModeSet, theta0: f64, order: usize) -> BlockMatrix {
    let r0 = ms.r0();
    let b = surface_values(ms);
    let ang = cap_angular(ms.n_max(), theta0, order);
    let mut by_abs_m: std::collections::HashMap<i32, Arc<DMatrix<f64>>> = Default::default();
    let mut blocks = Vec::new();
    for (m, modes) in ms.blocks_by_m() {
        let am = m.abs();
        // P̃^{-m} = (-1)^m P̃^m, so the angular products for ±m coincide.
        let values = by_abs_m
            .entry(am)
            .or_insert_with(|| {
                let a = &ang[am as usize];
                Arc::new(DMatrix::from_fn(modes.len(), modes.len(), |i, j| {
                    let (p, q) = (ms.mode(modes[i]), ms.mode(modes[j]));
                    let angular = a[(p.n - am as usize, q.n - am as usize)];
                    r0 * r0 * b[p.mu] * b[q.mu] / q.norm * angular
                }))
            })
            .clone();
        blocks.push(Block { modes, values });
    }
    BlockMatrix::new(ms.len(), blocks)
}

fn max_block_diff(a: &BlockMatrix, b: &BlockMatrix) -> f64 {
    a.blocks
        .iter()
        .zip(&b.blocks)
        .map(|(x, y)| (x.values.as_ref() - y.values.as_ref()).amax())
        .fold(0.0, f64::max)
}

fn cap_matrix(ms: &ModeSet, theta0: f64) -> Result<BlockMatrix> {
    let mut order = CAP_QUAD_ORDER;
    let mut cur = cap_with_order(ms, theta0, order);
    loop {
        let next = cap_with_order(ms, theta0, 2 * order);
        if max_block_diff(&cur, &next) <= CAP_QUAD_TOL {
            return Ok(next);
        }
        order *= 2;
        if order > 1 << 14 {
            return Err(Error::Numerical(format!(
                "cap quadrature did not converge at order {order} for theta0 = {theta0}"
            )));
        }
        cur = next;
    }
}

/// Feedback matrix `B̂K̂` of a permeable region, without `γ`.
pub fn build_feedback_matrix(ms: &ModeSet, region: BoundaryRegion) -> Result<FeedbackMatrix> {
    region.validate()?;
    let matrix = match region {
        BoundaryRegion::FullSphere => full_sphere(ms),
        BoundaryRegion::Cap { theta0 } => cap_matrix(ms, theta0)?,
    };
    Ok(FeedbackMatrix {
        region,
        mode_set_id: ms.id(),
        matrix,
    })
}

/// Connection matrix from S1's state to S2's boundary input over the cap `θ ≤ theta0`.
pub fn build_connection_matrix(
    ms_s1: &ModeSet,
    ms_s2: &ModeSet,
    theta0: f64,
    gamma_s1: f64,
    gamma_s2: f64,
) -> Result<ConnectionMatrix> {
    if !ms_s1.same_system(ms_s2) {
        return Err(Error::config(
            "network",
            "both spheres must share R0, D and the truncated mode set",
        ));
    }
    BoundaryRegion::Cap { theta0 }.validate()?;
    for (name, g) in [("network.gamma_s1", gamma_s1), ("network.gamma_s2", gamma_s2)] {
        if !(g >= 0.0 && g.is_finite()) {
            return Err(Error::config(name, format!("must be non-negative, got {g}")));
        }
    }
    let prefactor = -gamma_s1 * gamma_s2;
    let matrix = if prefactor == 0.0 {
        BlockMatrix::new(ms_s1.len(), Vec::new())
    } else {
        cap_matrix(ms_s2, theta0)?.scaled(prefactor)
    };
    Ok(ConnectionMatrix {
        theta0,
        gamma_s1,
        gamma_s2,
        matrix,
    })
}
