use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Reference gravity magnitude used for the Newton tolerance when a config
/// runs without gravity.
pub const STANDARD_GRAVITY: f64 = 9.81;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaterialKind {
    /// Hooke springs over 1-ring edges (stretch) and 2-ring pairs (bend).
    MassSpring,
    /// StVK membrane per triangle plus quadratic dihedral-angle bending.
    FemShell,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sphere {
    pub center: [f64; 3],
    pub radius: f64,
}

/// Simulation parameters. Every field is explicit in the JSON form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    /// Timestep in seconds.
    pub dt: f64,
    /// Lumped per-vertex masses (kg).
    pub mass: Vec<f64>,
    /// Gravitational acceleration (m/s²).
    pub gravity: [f64; 3],
    pub material: MaterialKind,
    /// Base stretch stiffness `k_s` (spring constant, or StVK μ for the FEM shell).
    pub stretch_stiffness: f64,
    /// Base bending stiffness `k_b` (2-ring spring constant, or dihedral penalty).
    pub bend_stiffness: f64,
    /// Multiplier on the stretch term (material variants such as `0.1·P_s`).
    pub stretch_scale: f64,
    /// Multiplier on the bend term.
    pub bend_scale: f64,
    /// StVK λ/μ ratio for the FEM membrane.
    pub lame_ratio: f64,
    pub obstacle: Option<Sphere>,
    pub collision_stiffness: f64,
    pub collision_margin: f64,
    /// Grasped (constrained) vertex indices.
    pub grasp: Vec<usize>,
    /// Newton tolerance relative to `total mass · |g|`.
    pub newton_rel_tol: f64,
    pub max_newton: usize,
}

impl SimConfig {
    /// Desk-scale defaults: Δt = 1/60 s, 0.5 kg spread uniformly, k_s = 5000,
    /// k_b = 50, k_c = 1e4, 1 mm collision margin.
    pub fn desk_default(num_vertices: usize, material: MaterialKind, grasp: Vec<usize>) -> Self {
        Self {
            dt: 1.0 / 60.0,
            mass: vec![0.5 / num_vertices as f64; num_vertices],
            gravity: [0.0, 0.0, -9.8],
            material,
            stretch_stiffness: 5000.0,
            bend_stiffness: 50.0,
            stretch_scale: 1.0,
            bend_scale: 1.0,
            lame_ratio: 1.0,
            obstacle: None,
            collision_stiffness: 1e4,
            collision_margin: 1e-3,
            grasp,
            newton_rel_tol: 1e-6,
            max_newton: 50,
        }
    }

    pub fn num_vertices(&self) -> usize {
        self.mass.len()
    }

    pub fn total_mass(&self) -> f64 {
        self.mass.iter().sum()
    }

    pub fn stretch_k(&self) -> f64 {
        self.stretch_stiffness * self.stretch_scale
    }

    pub fn bend_k(&self) -> f64 {
        self.bend_stiffness * self.bend_scale
    }

    /// `tol_newton = rel · K · mean mass · |g|`; falls back to standard gravity
    /// when `g = 0`.
    pub fn newton_tolerance(&self) -> f64 {
        let g = self.gravity.iter().map(|x| x * x).sum::<f64>().sqrt();
        let g = if g > 0.0 { g } else { STANDARD_GRAVITY };
        self.newton_rel_tol * self.total_mass() * g
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0) {
            return Err(Error::Config("dt must be positive".into()));
        }
        if self.mass.iter().any(|m| !(*m > 0.0)) {
            return Err(Error::Config("all masses must be positive".into()));
        }
        let nonneg = [
            ("stretch_stiffness", self.stretch_stiffness),
            ("bend_stiffness", self.bend_stiffness),
            ("stretch_scale", self.stretch_scale),
            ("bend_scale", self.bend_scale),
            ("collision_stiffness", self.collision_stiffness),
            ("collision_margin", self.collision_margin),
        ];
        for (name, v) in nonneg {
            if !(v >= 0.0) {
                return Err(Error::Config(format!("{name} must be non-negative")));
            }
        }
        if let Some(s) = &self.obstacle {
            if !(s.radius > 0.0) {
                return Err(Error::Config("obstacle radius must be positive".into()));
            }
        }
        let k = self.num_vertices();
        let mut seen = vec![false; k];
        for &g in &self.grasp {
            if g >= k || seen[g] {
                return Err(Error::Config(format!(
                    "grasp index {g} out of range or repeated"
                )));
            }
            seen[g] = true;
        }
        if self.max_newton == 0 {
            return Err(Error::Config("max_newton must be at least 1".into()));
        }
        Ok(())
    }
}

/// Grasped vertices and their per-frame target positions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraspSet {
    pub indices: Vec<usize>,
    /// `trajectory[frame][g]` is the target of grasp point `g` at `frame`.
    pub trajectory: Vec<Vec<[f64; 3]>>,
}

impl GraspSet {
    pub fn targets(&self, frame: usize) -> &[[f64; 3]] {
        &self.trajectory[frame]
    }

    /// Grasp targets of a frame as a flat vector of length `3·|grasp|`.
    pub fn flat_targets(&self, frame: usize) -> Vec<f64> {
        self.trajectory[frame].iter().flatten().copied().collect()
    }

    pub fn validate(&self, num_vertices: usize, num_frames: usize) -> Result<()> {
        let mut seen = vec![false; num_vertices];
        for &g in &self.indices {
            if g >= num_vertices || seen[g] {
                return Err(Error::Config(format!(
                    "grasp index {g} out of range or repeated"
                )));
            }
            seen[g] = true;
        }
        if self.trajectory.len() != num_frames {
            return Err(Error::Config(format!(
                "grasp trajectory has {} frames, expected {num_frames}",
                self.trajectory.len()
            )));
        }
        if self
            .trajectory
            .iter()
            .any(|f| f.len() != self.indices.len())
        {
            return Err(Error::Config("grasp trajectory width mismatch".into()));
        }
        Ok(())
    }
}

/// The two trailing frames the recurrent step depends on.
#[derive(Debug, Clone, PartialEq)]
pub struct SimState {
    pub p_prev2: Vec<f64>,
    pub p_prev1: Vec<f64>,
}

impl SimState {
    /// Both trailing frames at the same configuration (zero initial velocity).
    pub fn at_rest(positions: Vec<f64>) -> Self {
        Self {
            p_prev2: positions.clone(),
            p_prev1: positions,
        }
    }
}

/// Writes grasp targets into a flat position vector.
pub fn apply_targets(positions: &mut [f64], grasp: &[usize], targets: &[[f64; 3]]) {
    for (&g, t) in grasp.iter().zip(targets) {
        positions[3 * g..3 * g + 3].copy_from_slice(t);
    }
}
