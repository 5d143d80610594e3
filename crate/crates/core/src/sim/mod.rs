//! Implicit-Euler thin-shell simulator posed as per-frame energy minimization.

mod config;
pub mod elements;

pub use config::{
    apply_targets, GraspSet, MaterialKind, SimConfig, SimState, Sphere, STANDARD_GRAVITY,
};

use nalgebra::{SMatrix, Vector3};

use crate::error::{Error, Result};
use crate::mesh::{vertex, Adjacency, TriMesh};
use sprs::CsMat;

use crate::sparse::{mul_vec, SpdFactor, Triplets};
use elements::{Hinge, Membrane, Spring, M3, V3};

/// Rest-state element data for the chosen material.
#[derive(Debug, Clone, PartialEq)]
pub enum MaterialModel {
    MassSpring {
        stretch: Vec<Spring>,
        bend: Vec<Spring>,
    },
    FemShell {
        membranes: Vec<Membrane>,
        hinges: Vec<Hinge>,
    },
}

impl MaterialModel {
    pub fn build(mesh: &TriMesh, adjacency: &Adjacency, kind: MaterialKind) -> Result<Self> {
        let x = mesh.vertices();
        match kind {
            MaterialKind::MassSpring => {
                let spring = |(i, j): (usize, usize)| {
                    let rest = (x[i] - x[j]).norm();
                    if rest > 0.0 {
                        Ok(Spring { i, j, rest })
                    } else {
                        Err(Error::DegenerateElement(format!(
                            "zero rest length between {i} and {j}"
                        )))
                    }
                };
                Ok(MaterialModel::MassSpring {
                    stretch: adjacency
                        .edges()
                        .into_iter()
                        .map(spring)
                        .collect::<Result<_>>()?,
                    bend: adjacency
                        .two_ring_pairs()
                        .into_iter()
                        .map(spring)
                        .collect::<Result<_>>()?,
                })
            }
            MaterialKind::FemShell => {
                let membranes = mesh
                    .triangles()
                    .iter()
                    .enumerate()
                    .map(|(t, tri)| {
                        Membrane::from_rest(*tri, [x[tri[0]], x[tri[1]], x[tri[2]]])
                            .ok_or(Error::DegenerateTriangle(t))
                    })
                    .collect::<Result<Vec<_>>>()?;
                let hinges = adjacency
                    .dihedral_pairs
                    .iter()
                    .map(|dp| {
                        let v = [dp.edge[0], dp.edge[1], dp.opposite[0], dp.opposite[1]];
                        let (rest_angle, _) =
                            elements::hinge_angle(v.map(|i| x[i])).ok_or_else(|| {
                                Error::DegenerateElement(format!("hinge over edge {:?}", dp.edge))
                            })?;
                        Ok(Hinge { v, rest_angle })
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(MaterialModel::FemShell { membranes, hinges })
            }
        }
    }
}

/// Energy broken down by term (already multiplied by stiffness scales).
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct EnergyTerms {
    pub gravity: f64,
    pub stretch: f64,
    pub bend: f64,
    pub collision: f64,
}

impl EnergyTerms {
    pub fn total(&self) -> f64 {
        self.gravity + self.stretch + self.bend + self.collision
    }

    pub fn elastic(&self) -> f64 {
        self.stretch + self.bend
    }
}

/// Which potential terms to include.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TermMask {
    pub gravity: bool,
    pub elastic: bool,
    pub collision: bool,
}

impl TermMask {
    pub const ALL: Self = Self {
        gravity: true,
        elastic: true,
        collision: true,
    };
    pub const ELASTIC: Self = Self {
        gravity: false,
        elastic: true,
        collision: false,
    };
}

/// A mesh bound to a simulation config: owns rest data and the free-DOF map.
#[derive(Debug, Clone)]
pub struct ShellSim {
    cfg: SimConfig,
    material: MaterialModel,
    num_vertices: usize,
    /// `free_index[dof]` is the position of a free DOF in the reduced system.
    free_index: Vec<Option<usize>>,
    num_free: usize,
    grasped: Vec<bool>,
}

impl ShellSim {
    pub fn new(mesh: &TriMesh, cfg: SimConfig) -> Result<Self> {
        let k = mesh.num_vertices();
        if cfg.num_vertices() != k {
            return Err(Error::ShapeMismatch {
                expected: k,
                got: cfg.num_vertices(),
            });
        }
        cfg.validate()?;
        let adjacency = Adjacency::build(mesh);
        let material = MaterialModel::build(mesh, &adjacency, cfg.material)?;
        let mut grasped = vec![false; k];
        for &g in &cfg.grasp {
            grasped[g] = true;
        }
        let mut free_index = vec![None; 3 * k];
        let mut num_free = 0;
        for v in 0..k {
            if !grasped[v] {
                for d in 0..3 {
                    free_index[3 * v + d] = Some(num_free);
                    num_free += 1;
                }
            }
        }
        Ok(Self {
            cfg,
            material,
            num_vertices: k,
            free_index,
            num_free,
            grasped,
        })
    }

    pub fn config(&self) -> &SimConfig {
        &self.cfg
    }

    pub fn material(&self) -> &MaterialModel {
        &self.material
    }

    pub fn num_vertices(&self) -> usize {
        self.num_vertices
    }

    pub fn grasp(&self) -> &[usize] {
        &self.cfg.grasp
    }

    pub fn is_grasped(&self, v: usize) -> bool {
        self.grasped[v]
    }

    fn check(&self, p: &[f64]) -> Result<()> {
        crate::error::check_len(3 * self.num_vertices, p.len())
    }

    /// Potential energy split into terms.
    pub fn energy_terms(&self, p: &[f64], mask: TermMask) -> Result<EnergyTerms> {
        self.check(p)?;
        let cfg = &self.cfg;
        let mut t = EnergyTerms::default();
        if mask.gravity {
            let g = Vector3::from(cfg.gravity);
            for (i, m) in cfg.mass.iter().enumerate() {
                t.gravity -= m * g.dot(&vertex(p, i));
            }
        }
        if mask.elastic {
            let (ks, kb) = (cfg.stretch_k(), cfg.bend_k());
            match &self.material {
                MaterialModel::MassSpring { stretch, bend } => {
                    for s in stretch {
                        t.stretch += s.energy(vertex(p, s.i), vertex(p, s.j), ks);
                    }
                    for s in bend {
                        t.bend += s.energy(vertex(p, s.i), vertex(p, s.j), kb);
                    }
                }
                MaterialModel::FemShell { membranes, hinges } => {
                    for m in membranes {
                        t.stretch += m.energy(m.v.map(|i| vertex(p, i)), ks, cfg.lame_ratio);
                    }
                    for h in hinges {
                        t.bend += h
                            .energy(h.v.map(|i| vertex(p, i)), kb)
                            .ok_or_else(|| Error::Divergence("degenerate hinge".into()))?;
                    }
                }
            }
        }
        if mask.collision {
            if let Some(s) = &cfg.obstacle {
                let c = Vector3::from(s.center);
                let reach = s.radius + cfg.collision_margin;
                for i in 0..self.num_vertices {
                    t.collision +=
                        elements::collision_energy(vertex(p, i), c, reach, cfg.collision_stiffness);
                }
            }
        }
        if !t.total().is_finite() {
            return Err(Error::Divergence("non-finite potential energy".into()));
        }
        Ok(t)
    }

    /// `P(p, q)`; grasped entries of `p` are expected to hold `q` already.
    pub fn potential_energy(&self, p: &[f64]) -> Result<f64> {
        Ok(self.energy_terms(p, TermMask::ALL)?.total())
    }

    /// Gradient of the masked potential; grasped DOFs are zeroed.
    pub fn gradient_masked(&self, p: &[f64], mask: TermMask) -> Result<Vec<f64>> {
        self.check(p)?;
        let cfg = &self.cfg;
        let mut g = vec![0.0; p.len()];
        let mut add = |i: usize, v: V3| {
            for d in 0..3 {
                g[3 * i + d] += v[d];
            }
        };
        if mask.gravity {
            let gr = Vector3::from(cfg.gravity);
            for (i, m) in cfg.mass.iter().enumerate() {
                add(i, -gr * *m);
            }
        }
        if mask.elastic {
            let (ks, kb) = (cfg.stretch_k(), cfg.bend_k());
            match &self.material {
                MaterialModel::MassSpring { stretch, bend } => {
                    for (list, k) in [(stretch, ks), (bend, kb)] {
                        for s in list {
                            let gi = s.gradient(vertex(p, s.i), vertex(p, s.j), k);
                            add(s.i, gi);
                            add(s.j, -gi);
                        }
                    }
                }
                MaterialModel::FemShell { membranes, hinges } => {
                    for m in membranes {
                        let ge = m.gradient(m.v.map(|i| vertex(p, i)), ks, cfg.lame_ratio);
                        for (a, &vi) in m.v.iter().enumerate() {
                            add(vi, ge[a]);
                        }
                    }
                    for h in hinges {
                        let ge = h
                            .gradient(h.v.map(|i| vertex(p, i)), kb)
                            .ok_or_else(|| Error::Divergence("degenerate hinge".into()))?;
                        for (a, &vi) in h.v.iter().enumerate() {
                            add(vi, ge[a]);
                        }
                    }
                }
            }
        }
        if mask.collision {
            if let Some(s) = &cfg.obstacle {
                let c = Vector3::from(s.center);
                let reach = s.radius + cfg.collision_margin;
                for i in 0..self.num_vertices {
                    add(
                        i,
                        elements::collision_gradient(
                            vertex(p, i),
                            c,
                            reach,
                            cfg.collision_stiffness,
                        ),
                    );
                }
            }
        }
        self.zero_grasped(&mut g);
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence("non-finite potential gradient".into()));
        }
        Ok(g)
    }

    pub fn potential_gradient(&self, p: &[f64]) -> Result<Vec<f64>> {
        self.gradient_masked(p, TermMask::ALL)
    }

    pub fn zero_grasped(&self, g: &mut [f64]) {
        for &v in &self.cfg.grasp {
            g[3 * v..3 * v + 3].fill(0.0);
        }
    }

    /// `‖p − 2p₁ + p₂‖²_M / (2Δt²) + P(p)`.
    pub fn physics_loss(&self, p_prev2: &[f64], p_prev1: &[f64], p: &[f64]) -> Result<f64> {
        self.check(p_prev2)?;
        self.check(p_prev1)?;
        Ok(self.kinetic(p_prev2, p_prev1, p) + self.potential_energy(p)?)
    }

    fn kinetic(&self, p_prev2: &[f64], p_prev1: &[f64], p: &[f64]) -> f64 {
        let mut s = 0.0;
        for (i, m) in self.cfg.mass.iter().enumerate() {
            for d in 0..3 {
                let k = 3 * i + d;
                let a = p[k] - 2.0 * p_prev1[k] + p_prev2[k];
                s += m * a * a;
            }
        }
        s / (2.0 * self.cfg.dt * self.cfg.dt)
    }

    /// `∂L_phys/∂p` with grasped DOFs zeroed.
    pub fn physics_gradient(
        &self,
        p_prev2: &[f64],
        p_prev1: &[f64],
        p: &[f64],
    ) -> Result<Vec<f64>> {
        self.check(p_prev2)?;
        self.check(p_prev1)?;
        let mut g = self.potential_gradient(p)?;
        let inv = 1.0 / (self.cfg.dt * self.cfg.dt);
        for (i, m) in self.cfg.mass.iter().enumerate() {
            if self.grasped[i] {
                continue;
            }
            for d in 0..3 {
                let k = 3 * i + d;
                g[k] += m * (p[k] - 2.0 * p_prev1[k] + p_prev2[k]) * inv;
            }
        }
        Ok(g)
    }

    /// Reduced (free-DOF) Hessian of the masked potential plus `diag_mass_scale · M`.
    fn reduced_hessian(
        &self,
        p: &[f64],
        mask: TermMask,
        diag_mass_scale: f64,
        project: bool,
    ) -> Triplets {
        let cfg = &self.cfg;
        let mut t = Triplets::new(self.num_free);
        for (i, m) in cfg.mass.iter().enumerate() {
            for d in 0..3 {
                if let Some(r) = self.free_index[3 * i + d] {
                    t.add(r, r, m * diag_mass_scale);
                }
            }
        }
        let free = &self.free_index;
        let mut block = |t: &mut Triplets, a: usize, b: usize, h: &M3| {
            for r in 0..3 {
                let Some(fr) = free[3 * a + r] else { continue };
                for c in 0..3 {
                    if let Some(fc) = free[3 * b + c] {
                        t.add(fr, fc, h[(r, c)]);
                    }
                }
            }
        };
        if mask.elastic {
            let (ks, kb) = (cfg.stretch_k(), cfg.bend_k());
            match &self.material {
                MaterialModel::MassSpring { stretch, bend } => {
                    for (list, k) in [(stretch, ks), (bend, kb)] {
                        for s in list {
                            let h = s.hessian(vertex(p, s.i), vertex(p, s.j), k, project);
                            block(&mut t, s.i, s.i, &h);
                            block(&mut t, s.j, s.j, &h);
                            block(&mut t, s.i, s.j, &(-h));
                            block(&mut t, s.j, s.i, &(-h));
                        }
                    }
                }
                MaterialModel::FemShell { membranes, hinges } => {
                    for m in membranes {
                        let h = m.hessian(m.v.map(|i| vertex(p, i)), ks, cfg.lame_ratio, project);
                        scatter(&mut t, &mut block, &m.v, &h);
                    }
                    for hg in hinges {
                        if let Some(h) = hg.hessian(hg.v.map(|i| vertex(p, i)), kb, project) {
                            scatter(&mut t, &mut block, &hg.v, &h);
                        }
                    }
                }
            }
        }
        if mask.collision {
            if let Some(s) = &cfg.obstacle {
                let c = Vector3::from(s.center);
                let reach = s.radius + cfg.collision_margin;
                for i in 0..self.num_vertices {
                    let h = elements::collision_hessian(
                        vertex(p, i),
                        c,
                        reach,
                        cfg.collision_stiffness,
                        project,
                    );
                    if h != M3::zeros() {
                        block(&mut t, i, i, &h);
                    }
                }
            }
        }
        t
    }

    /// Exact reduced Hessian together with a positive definite preconditioner:
    /// the exact Hessian itself when it factors, the PSD-projected one otherwise.
    fn newton_system(
        &self,
        x: &[f64],
        mask: TermMask,
        diag_mass_scale: f64,
    ) -> Result<(CsMat<f64>, CsMat<f64>, SpdFactor)> {
        let exact = self
            .reduced_hessian(x, mask, diag_mass_scale, false)
            .build();
        if let Ok(f) = SpdFactor::new(&exact) {
            return Ok((exact.clone(), exact, f));
        }
        let projected = self.reduced_hessian(x, mask, diag_mass_scale, true).build();
        let f = SpdFactor::new(&projected)?;
        Ok((exact, projected, f))
    }

    fn reduce(&self, full: &[f64]) -> Vec<f64> {
        let mut r = vec![0.0; self.num_free];
        for (k, f) in self.free_index.iter().enumerate() {
            if let Some(i) = f {
                r[*i] = full[k];
            }
        }
        r
    }

    fn expand_add(&self, x: &mut [f64], reduced: &[f64], alpha: f64) {
        for (k, f) in self.free_index.iter().enumerate() {
            if let Some(i) = f {
                x[k] += alpha * reduced[*i];
            }
        }
    }

    /// Trust-region Newton minimization of the masked objective over free DOFs.
    ///
    /// The subproblem is solved by preconditioned conjugate gradients on the
    /// exact Hessian (Steihaug), so directions of negative curvature are
    /// followed to the region boundary instead of being damped away.
    /// `objective` and `gradient` are evaluated on full position vectors;
    /// `diag_mass_scale` adds `scale·M` to the Hessian.
    #[allow(clippy::too_many_arguments)]
    fn minimize(
        &self,
        mut x: Vec<f64>,
        tol: f64,
        max_iter: usize,
        mask: TermMask,
        diag_mass_scale: f64,
        objective: &dyn Fn(&[f64]) -> Result<f64>,
        gradient: &dyn Fn(&[f64]) -> Result<Vec<f64>>,
    ) -> Result<Vec<f64>> {
        let mut g = gradient(&x)?;
        let mut residual = norm(&g);
        let mut f0 = objective(&x)?;
        let mut radius = f64::NAN;
        let mut system = None;
        for _ in 0..max_iter {
            if residual < tol || self.num_free == 0 {
                return Ok(x);
            }
            let (hess, pre, factor) = match system.take() {
                Some(s) => s,
                None => self.newton_system(&x, mask, diag_mass_scale)?,
            };
            let rg = self.reduce(&g);
            if radius.is_nan() {
                let y = factor.solve(&rg);
                radius = 2.0 * dot(&y, &mul_vec(&pre, &y)).sqrt();
            }
            let cg_tol = (0.1 * residual).min((1e-3 * residual).max(0.1 * tol));
            let (step, on_boundary) = steihaug(&hess, &pre, &factor, &rg, radius, cg_tol);
            let hs = mul_vec(&hess, &step);
            let predicted = -(dot(&rg, &step) + 0.5 * dot(&step, &hs));
            let mut trial = x.clone();
            self.expand_add(&mut trial, &step, 1.0);
            let f1 = objective(&trial).unwrap_or(f64::INFINITY);
            let actual = f0 - f1;
            let noise = 1e-13 * (f0.abs() + 1.0);
            let accept = if predicted > noise {
                let rho = actual / predicted;
                if rho < 0.25 {
                    radius *= 0.25;
                } else if rho > 0.75 && on_boundary {
                    radius *= 2.0;
                }
                rho > 1e-4
            } else {
                // Below round-off in the objective: judge by the gradient instead.
                f1.is_finite()
            };
            if accept {
                let gt = gradient(&trial)?;
                let rt = norm(&gt);
                if predicted > noise || rt < residual {
                    x = trial;
                    g = gt;
                    residual = rt;
                    f0 = f1;
                    continue;
                }
                radius *= 0.25;
            }
            system = Some((hess, pre, factor));
        }
        if residual < tol {
            return Ok(x);
        }
        Err(Error::NonConvergence {
            iterations: max_iter,
            residual,
            last_iterate: x,
        })
    }

    /// One implicit step: the minimizer of `L_phys` with grasped DOFs at `targets`.
    pub fn step(&self, state: &SimState, targets: &[[f64; 3]]) -> Result<Vec<f64>> {
        self.check(&state.p_prev2)?;
        self.check(&state.p_prev1)?;
        crate::error::check_len(self.cfg.grasp.len(), targets.len())?;
        let (p2, p1) = (&state.p_prev2, &state.p_prev1);
        let mut x: Vec<f64> = p1.iter().zip(p2).map(|(a, b)| 2.0 * a - b).collect();
        apply_targets(&mut x, &self.cfg.grasp, targets);
        let inv_dt2 = 1.0 / (self.cfg.dt * self.cfg.dt);
        self.minimize(
            x,
            0.5 * self.cfg.newton_tolerance(),
            self.cfg.max_newton,
            TermMask::ALL,
            inv_dt2,
            &|p| self.physics_loss(p2, p1, p),
            &|p| self.physics_gradient(p2, p1, p),
        )
    }

    /// Frames `p_3..` driven by `trajectory[m]` for each produced frame `m`.
    pub fn rollout(
        &self,
        initial: &SimState,
        trajectory: &[Vec<[f64; 3]>],
        n_frames: usize,
    ) -> Result<Vec<Vec<f64>>> {
        if trajectory.len() < n_frames {
            return Err(Error::Config(format!(
                "trajectory has {} frames, {n_frames} requested",
                trajectory.len()
            )));
        }
        let mut state = initial.clone();
        let mut out = Vec::with_capacity(n_frames);
        for (m, targets) in trajectory.iter().take(n_frames).enumerate() {
            let p = self.step(&state, targets).map_err(|e| e.at_frame(m))?;
            state = SimState {
                p_prev2: std::mem::take(&mut state.p_prev1),
                p_prev1: p.clone(),
            };
            out.push(p);
        }
        Ok(out)
    }

    /// Static minimizer of the elastic energy (optionally plus gravity) with
    /// grasped vertices fixed at their entries of `start`.
    pub fn static_solve(
        &self,
        start: Vec<f64>,
        mask: TermMask,
        tol: f64,
        max_iter: usize,
    ) -> Result<Vec<f64>> {
        // A small mass-proportional regularizer keeps the free-floating modes solvable.
        let reg = 1e-6 / (self.cfg.dt * self.cfg.dt);
        self.minimize(
            start,
            tol,
            max_iter,
            mask,
            reg,
            &|p| Ok(self.energy_terms(p, mask)?.total()),
            &|p| self.gradient_masked(p, mask),
        )
    }

    /// Residual `‖∂L_phys/∂p‖²` over free DOFs.
    pub fn residual_sq(&self, p_prev2: &[f64], p_prev1: &[f64], p: &[f64]) -> Result<f64> {
        let g = self.physics_gradient(p_prev2, p_prev1, p)?;
        Ok(g.iter().map(|v| v * v).sum())
    }
}

fn scatter<const N: usize>(
    t: &mut Triplets,
    block: &mut impl FnMut(&mut Triplets, usize, usize, &M3),
    verts: &[usize],
    h: &SMatrix<f64, N, N>,
) {
    for (a, &va) in verts.iter().enumerate() {
        for (b, &vb) in verts.iter().enumerate() {
            let sub: M3 = h.fixed_view::<3, 3>(3 * a, 3 * b).into_owned();
            block(t, va, vb, &sub);
        }
    }
}

pub(crate) fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Approximate minimizer of `gᵀs + ½ sᵀHs` subject to `‖s‖_P ≤ radius`, by
/// preconditioned CG stopped at negative curvature or the boundary. Returns
/// the step and whether it hit the boundary.
fn steihaug(
    hess: &CsMat<f64>,
    pre: &CsMat<f64>,
    factor: &SpdFactor,
    g: &[f64],
    radius: f64,
    cg_tol: f64,
) -> (Vec<f64>, bool) {
    let n = g.len();
    let mut z = vec![0.0; n];
    let mut r = g.to_vec();
    let mut y = factor.solve(&r);
    let mut d: Vec<f64> = y.iter().map(|v| -v).collect();
    let mut ry = dot(&r, &y);
    let to_boundary = |z: &[f64], d: &[f64]| -> Vec<f64> {
        let pz = mul_vec(pre, z);
        let pd = mul_vec(pre, d);
        let (a, b, c) = (
            dot(d, &pd),
            2.0 * dot(z, &pd),
            dot(z, &pz) - radius * radius,
        );
        let tau = (-b + (b * b - 4.0 * a * c).max(0.0).sqrt()) / (2.0 * a);
        z.iter().zip(d).map(|(zi, di)| zi + tau * di).collect()
    };
    for _ in 0..n.max(1).min(500) {
        let hd = mul_vec(hess, &d);
        let curv = dot(&d, &hd);
        if curv <= 0.0 {
            return (to_boundary(&z, &d), true);
        }
        let alpha = ry / curv;
        let next: Vec<f64> = z.iter().zip(&d).map(|(zi, di)| zi + alpha * di).collect();
        if dot(&next, &mul_vec(pre, &next)).sqrt() >= radius {
            return (to_boundary(&z, &d), true);
        }
        z = next;
        for (ri, hi) in r.iter_mut().zip(&hd) {
            *ri += alpha * hi;
        }
        if norm(&r) <= cg_tol {
            break;
        }
        y = factor.solve(&r);
        let ry_next = dot(&r, &y);
        let beta = ry_next / ry;
        ry = ry_next;
        for (di, yi) in d.iter_mut().zip(&y) {
            *di = -yi + beta * *di;
        }
    }
    (z, false)
}
