//! Evaluation metrics: vertex RMS error, a spatio-temporal edge-difference
//! score, and the physics residual.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::mesh::Adjacency;
use crate::sim::ShellSim;

/// RMS errors are reported in millimetres for meshes given in metres.
pub const MM_PER_M: f64 = 1000.0;

/// `sqrt(Σ_{m,i} ‖p − p̂‖² / (N·K))`, in millimetres.
pub fn m_rms(reference: &[Vec<f64>], candidate: &[Vec<f64>]) -> Result<f64> {
    check_len(reference.len(), candidate.len())?;
    if reference.is_empty() {
        return Err(Error::Config("no frames to compare".into()));
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for (a, b) in reference.iter().zip(candidate) {
        check_len(a.len(), b.len())?;
        sum += a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
        count += a.len() / 3;
    }
    Ok(MM_PER_M * (sum / count as f64).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StedConfig {
    /// Topological radius of the per-vertex edge neighbourhood.
    pub rings: usize,
    /// Weight of the temporal term in the combined score.
    pub temporal_weight: f64,
}

impl Default for StedConfig {
    fn default() -> Self {
        Self {
            rings: 1,
            temporal_weight: 0.3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StedParts {
    pub spatial: f64,
    pub temporal: f64,
    pub total: f64,
}

/// Precomputed edge neighbourhoods for STED on one topology.
#[derive(Debug, Clone)]
pub struct Sted {
    cfg: StedConfig,
    edges: Vec<(usize, usize)>,
    /// Edges with both ends within `rings` hops of the vertex.
    neighborhood: Vec<Vec<usize>>,
    /// Edges incident to the vertex.
    incident: Vec<Vec<usize>>,
}

fn length(p: &[f64], a: usize, b: usize) -> f64 {
    (0..3)
        .map(|d| (p[3 * a + d] - p[3 * b + d]).powi(2))
        .sum::<f64>()
        .sqrt()
}

impl Sted {
    pub fn new(adj: &Adjacency, cfg: StedConfig) -> Self {
        let k = adj.num_vertices();
        let edges = adj.edges();
        let mut incident = vec![Vec::new(); k];
        for (e, &(a, b)) in edges.iter().enumerate() {
            incident[a].push(e);
            incident[b].push(e);
        }
        let mut neighborhood = Vec::with_capacity(k);
        let mut hops = vec![usize::MAX; k];
        for v in 0..k {
            let mut seen = vec![v];
            hops[v] = 0;
            let mut queue = VecDeque::from([v]);
            while let Some(u) = queue.pop_front() {
                if hops[u] == cfg.rings {
                    continue;
                }
                for &w in &adj.one_ring[u] {
                    if hops[w] == usize::MAX {
                        hops[w] = hops[u] + 1;
                        seen.push(w);
                        queue.push_back(w);
                    }
                }
            }
            let mut list: Vec<usize> = seen
                .iter()
                .flat_map(|&u| incident[u].iter().copied())
                .filter(|&e| hops[edges[e].0] != usize::MAX && hops[edges[e].1] != usize::MAX)
                .collect();
            list.sort_unstable();
            list.dedup();
            neighborhood.push(list);
            for u in seen {
                hops[u] = usize::MAX;
            }
        }
        Self {
            cfg,
            edges,
            neighborhood,
            incident,
        }
    }

    pub fn config(&self) -> StedConfig {
        self.cfg
    }

    /// Spatial term: mean over frames and vertices of the length-weighted
    /// standard deviation of relative edge-length differences in the
    /// neighbourhood. Temporal term: RMS difference of per-vertex displacement
    /// between consecutive frames, each relative to the mean incident edge
    /// length of its own sequence.
    pub fn evaluate(&self, reference: &[Vec<f64>], candidate: &[Vec<f64>]) -> Result<StedParts> {
        check_len(reference.len(), candidate.len())?;
        if reference.len() < 2 {
            return Err(Error::Config("STED needs at least two frames".into()));
        }
        let k = self.neighborhood.len();
        for (a, b) in reference.iter().zip(candidate) {
            check_len(3 * k, a.len())?;
            check_len(3 * k, b.len())?;
        }
        let mut spatial = 0.0;
        for (a, b) in reference.iter().zip(candidate) {
            let ref_len: Vec<f64> = self.edges.iter().map(|&(i, j)| length(a, i, j)).collect();
            let rel: Vec<f64> = self
                .edges
                .iter()
                .zip(&ref_len)
                .map(|(&(i, j), l)| (length(b, i, j) - l) / l)
                .collect();
            for hood in &self.neighborhood {
                let wsum: f64 = hood.iter().map(|&e| ref_len[e]).sum();
                if hood.is_empty() || wsum <= 0.0 {
                    continue;
                }
                let mean = hood.iter().map(|&e| ref_len[e] * rel[e]).sum::<f64>() / wsum;
                let var = hood
                    .iter()
                    .map(|&e| ref_len[e] * (rel[e] - mean).powi(2))
                    .sum::<f64>()
                    / wsum;
                spatial += var.max(0.0).sqrt();
            }
        }
        spatial /= (reference.len() * k) as f64;

        let mean_incident = |p: &[f64], v: usize| -> f64 {
            let inc = &self.incident[v];
            inc.iter()
                .map(|&e| length(p, self.edges[e].0, self.edges[e].1))
                .sum::<f64>()
                / inc.len().max(1) as f64
        };
        let mut temporal = 0.0;
        for m in 0..reference.len() - 1 {
            let (a0, a1) = (&reference[m], &reference[m + 1]);
            let (b0, b1) = (&candidate[m], &candidate[m + 1]);
            for v in 0..k {
                let da = (0..3)
                    .map(|d| (a1[3 * v + d] - a0[3 * v + d]).powi(2))
                    .sum::<f64>()
                    .sqrt();
                let db = (0..3)
                    .map(|d| (b1[3 * v + d] - b0[3 * v + d]).powi(2))
                    .sum::<f64>()
                    .sqrt();
                let (la, lb) = (mean_incident(a0, v), mean_incident(b0, v));
                let ra = if la > 0.0 { da / la } else { 0.0 };
                let rb = if lb > 0.0 { db / lb } else { 0.0 };
                temporal += (rb - ra).powi(2);
            }
        }
        let temporal = (temporal / ((reference.len() - 1) * k) as f64).sqrt();
        Ok(StedParts {
            spatial,
            temporal,
            total: spatial + self.cfg.temporal_weight * temporal,
        })
    }

    /// Mean of per-window scores, each window a range of frame indices.
    pub fn evaluate_windows(
        &self,
        reference: &[Vec<f64>],
        candidate: &[Vec<f64>],
        windows: &[std::ops::Range<usize>],
    ) -> Result<StedParts> {
        check_len(reference.len(), candidate.len())?;
        if windows.is_empty() {
            return Err(Error::Config("no STED windows".into()));
        }
        let mut acc = StedParts {
            spatial: 0.0,
            temporal: 0.0,
            total: 0.0,
        };
        for w in windows {
            if w.end > reference.len() {
                return Err(Error::Config(format!(
                    "window {w:?} exceeds {} frames",
                    reference.len()
                )));
            }
            let s = self.evaluate(&reference[w.clone()], &candidate[w.clone()])?;
            acc.spatial += s.spatial;
            acc.temporal += s.temporal;
            acc.total += s.total;
        }
        let n = windows.len() as f64;
        Ok(StedParts {
            spatial: acc.spatial / n,
            temporal: acc.temporal / n,
            total: acc.total / n,
        })
    }
}

/// `‖∂L_phys/∂p‖²` over free DOFs for one frame triple.
pub fn m_phys(sim: &ShellSim, p_prev2: &[f64], p_prev1: &[f64], p: &[f64]) -> Result<f64> {
    sim.residual_sq(p_prev2, p_prev1, p)
}

/// Mean of [`m_phys`] over the triples ending at `ends`.
pub fn m_phys_mean(sim: &ShellSim, frames: &[Vec<f64>], ends: &[usize]) -> Result<f64> {
    if ends.is_empty() {
        return Err(Error::Config("no frame triples to evaluate".into()));
    }
    let mut s = 0.0;
    for &m in ends {
        if m < 2 || m >= frames.len() {
            return Err(Error::Config(format!(
                "triple ending at {m} is out of range"
            )));
        }
        s += m_phys(sim, &frames[m - 2], &frames[m - 1], &frames[m])?;
    }
    Ok(s / ends.len() as f64)
}

/// One row of an evaluation table.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub m_rms: f64,
    pub m_sted: f64,
    pub m_phys: f64,
}

impl Metrics {
    /// Largest relative increase of any metric over `base` (negative when all improve).
    pub fn worst_relative_change(&self, base: &Metrics) -> f64 {
        let rel = |a: f64, b: f64| {
            if b > 0.0 {
                (a - b) / b
            } else if a > 0.0 {
                f64::INFINITY
            } else {
                0.0
            }
        };
        rel(self.m_rms, base.m_rms)
            .max(rel(self.m_sted, base.m_sted))
            .max(rel(self.m_phys, base.m_phys))
    }
}
