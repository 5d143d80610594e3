//! ACAP deformation features: per-vertex log-rotation and symmetric stretch of
//! the local deformation gradient, plus the constrained reconstruction back to
//! positions and its vector-Jacobian product.
//!
//! The local deformation gradient is fitted in each vertex's tangent frame:
//! reference 1-ring edges are projected to 2D and a 3×2 map is fitted by
//! cotangent-weighted least squares, then completed to 3×3 with a scaled
//! normal. Because the fit is linear in positions, reconstruction inverts the
//! fit operator itself and recovers consistent features exactly.

use nalgebra::{Matrix2, Matrix3, Matrix3x2, Vector2, Vector3};

use crate::error::{check_len, Error, Result};
use crate::mesh::{vertex, Adjacency, CotanWeights, TriMesh};
use crate::sparse::{SpdFactor, Triplets};

/// Values per vertex in a feature vector.
pub const FEATURE_WIDTH: usize = 9;

/// Relative singular-value floor for the polar decomposition.
const SINGULAR_FLOOR: f64 = 1e-10;

/// Reference shape data shared by the forward and inverse transforms.
#[derive(Debug, Clone)]
pub struct AcapReference {
    positions: Vec<f64>,
    adjacency: Adjacency,
    /// Cotangent weight per 1-ring entry.
    weights: Vec<Vec<f64>>,
    /// Reference edge `r_i − r_j` projected to the tangent frame of `i`.
    projected: Vec<Vec<Vector2<f64>>>,
    /// Inverse of `Σ_j c_ij d̂ d̂ᵀ`.
    metric_inv: Vec<Matrix2<f64>>,
    /// Fit of the reference itself.
    rest_fit: Vec<Matrix3x2<f64>>,
    /// `[F⁰ ν⁰]⁻¹`.
    rest_frame_inv: Vec<Matrix3<f64>>,
    order: Vec<usize>,
    parent: Vec<Option<usize>>,
}

impl AcapReference {
    pub fn new(mesh: &TriMesh) -> Result<Self> {
        let adjacency = Adjacency::build(mesh);
        let cot = CotanWeights::compute(mesh, &adjacency)?;
        let k = mesh.num_vertices();
        let positions = mesh.positions();

        let mut normals = vec![Vector3::zeros(); k];
        for tri in mesh.triangles() {
            let [a, b, c] = tri.map(|v| mesh.vertices()[v]);
            let n = (b - a).cross(&(c - a));
            for &v in tri {
                normals[v] += n;
            }
        }

        let mut weights = Vec::with_capacity(k);
        let mut projected = Vec::with_capacity(k);
        let mut metric_inv = Vec::with_capacity(k);
        for i in 0..k {
            let ring = &adjacency.one_ring[i];
            let ri = vertex(&positions, i);
            let n = normals[i]
                .try_normalize(0.0)
                .ok_or(Error::SingularNormal(i))?;
            let first = ring.first().ok_or(Error::SingularNormal(i))?;
            let d0 = ri - vertex(&positions, *first);
            let a = (d0 - n * d0.dot(&n))
                .try_normalize(1e-300)
                .ok_or(Error::SingularNormal(i))?;
            let b = n.cross(&a);
            let w: Vec<f64> = cot.ring(i).to_vec();
            let dh: Vec<Vector2<f64>> = ring
                .iter()
                .map(|&j| {
                    let d = ri - vertex(&positions, j);
                    Vector2::new(a.dot(&d), b.dot(&d))
                })
                .collect();
            let mut g = Matrix2::zeros();
            for (c, d) in w.iter().zip(&dh) {
                g += d * d.transpose() * *c;
            }
            let scale = g.trace().abs();
            let ginv = match g.try_inverse() {
                Some(inv) if g.determinant() > 1e-12 * scale * scale && g.trace() > 0.0 => inv,
                _ => return Err(Error::SingularNormal(i)),
            };
            weights.push(w);
            projected.push(dh);
            metric_inv.push(ginv);
        }

        let mut reference = Self {
            positions,
            adjacency,
            weights,
            projected,
            metric_inv,
            rest_fit: Vec::new(),
            rest_frame_inv: Vec::new(),
            order: Vec::new(),
            parent: Vec::new(),
        };
        let fits = reference.fits(&reference.positions);
        let mut frame_inv = Vec::with_capacity(k);
        for (i, f) in fits.iter().enumerate() {
            let full = complete(f);
            let inv = full
                .try_inverse()
                .filter(|_| full.determinant().abs() > 1e-12 * full.norm().powi(3))
                .ok_or(Error::SingularNormal(i))?;
            frame_inv.push(inv);
        }
        reference.rest_fit = fits;
        reference.rest_frame_inv = frame_inv;
        let (order, parent) = reference.adjacency.bfs_forest();
        reference.order = order;
        reference.parent = parent;
        Ok(reference)
    }

    pub fn num_vertices(&self) -> usize {
        self.adjacency.num_vertices()
    }

    pub fn feature_len(&self) -> usize {
        FEATURE_WIDTH * self.num_vertices()
    }

    pub fn adjacency(&self) -> &Adjacency {
        &self.adjacency
    }

    pub fn positions(&self) -> &[f64] {
        &self.positions
    }

    /// Local 3×2 fit `F_i(p) = Σ_j c_ij e_ij d̂_ijᵀ G_i⁻¹` for every vertex.
    fn fits(&self, p: &[f64]) -> Vec<Matrix3x2<f64>> {
        (0..self.num_vertices())
            .map(|i| {
                let pi = vertex(p, i);
                let mut acc = Matrix3x2::zeros();
                for ((&j, c), d) in self.adjacency.one_ring[i]
                    .iter()
                    .zip(&self.weights[i])
                    .zip(&self.projected[i])
                {
                    acc += (pi - vertex(p, j)) * d.transpose() * *c;
                }
                acc * self.metric_inv[i]
            })
            .collect()
    }

    /// Per-vertex deformation gradients `T_i` (identity at the reference).
    pub fn deformation_gradients(&self, p: &[f64]) -> Result<Vec<Matrix3<f64>>> {
        check_len(3 * self.num_vertices(), p.len())?;
        Ok(self
            .fits(p)
            .iter()
            .zip(&self.rest_frame_inv)
            .map(|(f, inv)| complete(f) * inv)
            .collect())
    }

    /// `ACAP(p)`: 9 values per vertex, `[ω₀ ω₁ ω₂ s₀₀ s₀₁ s₀₂ s₁₁ s₁₂ s₂₂]`.
    pub fn forward(&self, p: &[f64]) -> Result<Vec<f64>> {
        let ts = self.deformation_gradients(p)?;
        let mut rotations = Vec::with_capacity(ts.len());
        let mut stretches = Vec::with_capacity(ts.len());
        for t in &ts {
            let (r, s) = polar_decompose(t)?;
            rotations.push(r);
            stretches.push(s);
        }
        let omegas = consistent_log_with_forest(&rotations, &self.order, &self.parent);
        let mut out = Vec::with_capacity(self.feature_len());
        for (w, s) in omegas.iter().zip(&stretches) {
            out.extend_from_slice(w.as_slice());
            out.extend_from_slice(&pack_symmetric(s));
        }
        Ok(out)
    }
}

/// Completes a 3×2 map with the normal `f₁×f₂ / sqrt|f₁×f₂|`, which scales
/// linearly under uniform scaling and rotates with the columns.
fn complete(f: &Matrix3x2<f64>) -> Matrix3<f64> {
    let c = f.column(0).cross(&f.column(1));
    let len = c.norm();
    let nu = if len > 0.0 { c / len.sqrt() } else { c };
    Matrix3::from_columns(&[f.column(0).into_owned(), f.column(1).into_owned(), nu])
}

pub fn pack_symmetric(s: &Matrix3<f64>) -> [f64; 6] {
    [
        s[(0, 0)],
        s[(0, 1)],
        s[(0, 2)],
        s[(1, 1)],
        s[(1, 2)],
        s[(2, 2)],
    ]
}

pub fn unpack_symmetric(s: &[f64]) -> Matrix3<f64> {
    Matrix3::new(s[0], s[1], s[2], s[1], s[3], s[4], s[2], s[4], s[5])
}

/// `T = R·S` with `R` a proper rotation and `S` symmetric.
///
/// A reflection (`det T < 0`) is absorbed by flipping the smallest singular
/// direction, which leaves `S` indefinite.
pub fn polar_decompose(t: &Matrix3<f64>) -> Result<(Matrix3<f64>, Matrix3<f64>)> {
    if !t.iter().all(|v| v.is_finite()) {
        return Err(Error::DegenerateElement(
            "non-finite deformation gradient".into(),
        ));
    }
    let svd = t.svd(true, true);
    let (Some(mut u), Some(v_t)) = (svd.u, svd.v_t) else {
        return Err(Error::DegenerateElement("svd failed".into()));
    };
    let mut sigma = svd.singular_values;
    let max = sigma.max();
    let (min_idx, min) = sigma.argmin();
    if !(min > SINGULAR_FLOOR * max) {
        return Err(Error::DegenerateElement(format!(
            "near-singular deformation gradient (σ_min {min:e}, σ_max {max:e})"
        )));
    }
    let v = v_t.transpose();
    if (u * v_t).determinant() < 0.0 {
        u.column_mut(min_idx).neg_mut();
        sigma[min_idx] = -sigma[min_idx];
    }
    let r = u * v_t;
    let s = v * Matrix3::from_diagonal(&sigma) * v_t;
    let s = (s + s.transpose()) * 0.5;
    Ok((r, s))
}

/// `exp([ω]×)` via the Rodrigues formula.
pub fn rodrigues(w: &Vector3<f64>) -> Matrix3<f64> {
    let theta = w.norm();
    let (a, b) = rodrigues_coefficients(theta);
    let k = w.cross_matrix();
    Matrix3::identity() + k * a + k * k * b
}

/// `a = sinθ/θ`, `b = (1 − cosθ)/θ²` with series near zero.
fn rodrigues_coefficients(theta: f64) -> (f64, f64) {
    if theta < 1e-4 {
        let t2 = theta * theta;
        (
            1.0 - t2 / 6.0 + t2 * t2 / 120.0,
            0.5 - t2 / 24.0 + t2 * t2 / 720.0,
        )
    } else {
        (theta.sin() / theta, (1.0 - theta.cos()) / (theta * theta))
    }
}

/// `(da/dθ)/θ` and `(db/dθ)/θ` with series near zero.
fn rodrigues_derivative_coefficients(theta: f64) -> (f64, f64) {
    if theta < 1e-3 {
        let t2 = theta * theta;
        (-1.0 / 3.0 + t2 / 30.0, -1.0 / 12.0 + t2 / 180.0)
    } else {
        let (s, c) = theta.sin_cos();
        let t3 = theta * theta * theta;
        (
            (theta * c - s) / t3,
            (theta * s - 2.0 * (1.0 - c)) / (t3 * theta),
        )
    }
}

/// `∂R/∂ω_k` for `k = 0, 1, 2`.
pub fn rodrigues_jacobian(w: &Vector3<f64>) -> [Matrix3<f64>; 3] {
    let theta = w.norm();
    let (a, b) = rodrigues_coefficients(theta);
    let (alpha, beta) = rodrigues_derivative_coefficients(theta);
    let k = w.cross_matrix();
    let k2 = k * k;
    std::array::from_fn(|axis| {
        let e = Vector3::ith(axis, 1.0).cross_matrix();
        k * (alpha * w[axis]) + e * a + k2 * (beta * w[axis]) + (e * k + k * e) * b
    })
}

/// Principal log of a rotation, angle in `[0, π]`, via the quaternion form.
pub fn rotation_log(r: &Matrix3<f64>) -> Vector3<f64> {
    let tr = r.trace();
    // Shepperd: pick the largest of w², x², y², z² for the square root.
    let cands = [tr, r[(0, 0)], r[(1, 1)], r[(2, 2)]];
    let mut best = 0;
    for i in 1..4 {
        if cands[i] > cands[best] {
            best = i;
        }
    }
    let (w, x, y, z);
    if best == 0 {
        let s = (1.0 + tr).sqrt() * 2.0;
        w = 0.25 * s;
        x = (r[(2, 1)] - r[(1, 2)]) / s;
        y = (r[(0, 2)] - r[(2, 0)]) / s;
        z = (r[(1, 0)] - r[(0, 1)]) / s;
    } else if best == 1 {
        let s = (1.0 + r[(0, 0)] - r[(1, 1)] - r[(2, 2)]).sqrt() * 2.0;
        w = (r[(2, 1)] - r[(1, 2)]) / s;
        x = 0.25 * s;
        y = (r[(0, 1)] + r[(1, 0)]) / s;
        z = (r[(0, 2)] + r[(2, 0)]) / s;
    } else if best == 2 {
        let s = (1.0 + r[(1, 1)] - r[(0, 0)] - r[(2, 2)]).sqrt() * 2.0;
        w = (r[(0, 2)] - r[(2, 0)]) / s;
        x = (r[(0, 1)] + r[(1, 0)]) / s;
        y = 0.25 * s;
        z = (r[(1, 2)] + r[(2, 1)]) / s;
    } else {
        let s = (1.0 + r[(2, 2)] - r[(0, 0)] - r[(1, 1)]).sqrt() * 2.0;
        w = (r[(1, 0)] - r[(0, 1)]) / s;
        x = (r[(0, 2)] + r[(2, 0)]) / s;
        y = (r[(1, 2)] + r[(2, 1)]) / s;
        z = 0.25 * s;
    }
    let (w, v) = if w < 0.0 {
        (-w, -Vector3::new(x, y, z))
    } else {
        (w, Vector3::new(x, y, z))
    };
    let vn = v.norm();
    if vn < 1e-300 {
        return Vector3::zeros();
    }
    let theta = 2.0 * vn.atan2(w);
    v * (theta / vn)
}

/// Log-rotations whose branches are propagated along a breadth-first forest
/// of the vertex graph so neighbouring vectors stay close.
pub fn consistent_log(rotations: &[Matrix3<f64>], adjacency: &Adjacency) -> Vec<Vector3<f64>> {
    let (order, parent) = adjacency.bfs_forest();
    consistent_log_with_forest(rotations, &order, &parent)
}

fn consistent_log_with_forest(
    rotations: &[Matrix3<f64>],
    order: &[usize],
    parent: &[Option<usize>],
) -> Vec<Vector3<f64>> {
    let mut out = vec![Vector3::zeros(); rotations.len()];
    for &i in order {
        let principal = rotation_log(&rotations[i]);
        out[i] = match parent[i] {
            None => principal,
            Some(pa) => closest_branch(&principal, &out[pa]),
        };
    }
    out
}

fn closest_branch(principal: &Vector3<f64>, target: &Vector3<f64>) -> Vector3<f64> {
    let theta = principal.norm();
    if theta < 1e-12 {
        return *principal;
    }
    let axis = principal / theta;
    let tau = 2.0 * std::f64::consts::PI;
    let mut best = *principal;
    let mut best_d = (best - target).norm();
    for k in [-1.0, 1.0] {
        let cand = axis * (theta + tau * k);
        let d = (cand - target).norm();
        if d < best_d {
            best = cand;
            best_d = d;
        }
    }
    best
}

/// `T_i = exp(ω_i)·S_i` for every vertex of a feature vector.
pub fn feature_transforms(feat: &[f64]) -> Vec<Matrix3<f64>> {
    feat.chunks_exact(FEATURE_WIDTH)
        .map(|c| rodrigues(&Vector3::new(c[0], c[1], c[2])) * unpack_symmetric(&c[3..]))
        .collect()
}

/// Constrained reconstruction of positions from features, prefactorized for
/// one grasp set.
#[derive(Debug)]
pub struct PoissonSolver {
    num_vertices: usize,
    grasp: Vec<usize>,
    /// Reduced index of each vertex, `None` when constrained.
    free_index: Vec<Option<usize>>,
    factor: SpdFactor,
    /// `(free row, constrained slot, value)` entries of `L_fc`.
    coupling: Vec<(usize, usize, f64)>,
    /// Per-vertex local operator columns: `U_i x = Σ_(v, u) u · x_v`.
    local_ops: Vec<Vec<(usize, Vector2<f64>)>>,
}

impl PoissonSolver {
    /// Factorizes the reduced system for `grasp`; at least one vertex must be
    /// constrained to pin translation.
    pub fn new(reference: &AcapReference, grasp: &[usize]) -> Result<Self> {
        let k = reference.num_vertices();
        if grasp.is_empty() {
            return Err(Error::Config(
                "reconstruction needs at least one grasped vertex".into(),
            ));
        }
        let mut slot = vec![None; k];
        for (s, &g) in grasp.iter().enumerate() {
            if g >= k || slot[g].is_some() {
                return Err(Error::Config(format!(
                    "grasp index {g} out of range or repeated"
                )));
            }
            slot[g] = Some(s);
        }
        let mut free_index = vec![None; k];
        let mut nf = 0;
        for v in 0..k {
            if slot[v].is_none() {
                free_index[v] = Some(nf);
                nf += 1;
            }
        }
        let local_ops: Vec<Vec<(usize, Vector2<f64>)>> = (0..k)
            .map(|i| {
                let mut ops = Vec::with_capacity(reference.adjacency.one_ring[i].len() + 1);
                let mut own = Vector2::zeros();
                for ((&j, c), d) in reference.adjacency.one_ring[i]
                    .iter()
                    .zip(&reference.weights[i])
                    .zip(&reference.projected[i])
                {
                    own += d * *c;
                    ops.push((j, -d * *c));
                }
                ops.push((i, own));
                ops
            })
            .collect();

        let mut t = Triplets::new(nf);
        let mut coupling = Vec::new();
        for (i, ops) in local_ops.iter().enumerate() {
            let ginv = &reference.metric_inv[i];
            for (va, ua) in ops {
                let Some(ra) = free_index[*va] else { continue };
                let gu = ginv * ua;
                for (vb, ub) in ops {
                    let val = gu.dot(ub);
                    match (free_index[*vb], slot[*vb]) {
                        (Some(rb), _) => t.add(ra, rb, val),
                        (None, Some(sb)) => coupling.push((ra, sb, val)),
                        _ => unreachable!(),
                    }
                }
            }
        }
        let factor = SpdFactor::new(&t.build())?;
        Ok(Self {
            num_vertices: k,
            grasp: grasp.to_vec(),
            free_index,
            factor,
            coupling,
            local_ops,
        })
    }

    pub fn grasp(&self) -> &[usize] {
        &self.grasp
    }

    pub fn num_vertices(&self) -> usize {
        self.num_vertices
    }

    /// Positions whose fit reproduces the target 3×2 maps as closely as
    /// possible, with grasped vertices at `targets`.
    pub fn solve_fits(&self, targets_fit: &[Matrix3x2<f64>], q: &[[f64; 3]]) -> Result<Vec<f64>> {
        check_len(self.grasp.len(), q.len())?;
        let nf = self.factor.dim();
        let mut out = vec![0.0; 3 * self.num_vertices];
        for r in 0..3 {
            let mut rhs = vec![0.0; nf];
            for (i, ops) in self.local_ops.iter().enumerate() {
                let f = targets_fit[i].row(r).transpose();
                for (v, u) in ops {
                    if let Some(row) = self.free_index[*v] {
                        rhs[row] += u.dot(&f);
                    }
                }
            }
            for &(row, s, val) in &self.coupling {
                rhs[row] -= val * q[s][r];
            }
            let x = self.factor.solve(&rhs);
            for v in 0..self.num_vertices {
                out[3 * v + r] = match self.free_index[v] {
                    Some(row) => x[row],
                    None => 0.0,
                };
            }
        }
        for (&g, t) in self.grasp.iter().zip(q) {
            out[3 * g..3 * g + 3].copy_from_slice(t);
        }
        Ok(out)
    }

    /// `ACAP⁻¹(feat, q)`.
    pub fn inverse(
        &self,
        reference: &AcapReference,
        feat: &[f64],
        q: &[[f64; 3]],
    ) -> Result<Vec<f64>> {
        check_len(FEATURE_WIDTH * self.num_vertices, feat.len())?;
        let ts = feature_transforms(feat);
        let fits: Vec<Matrix3x2<f64>> = ts
            .iter()
            .zip(&reference.rest_fit)
            .map(|(t, f0)| t * f0)
            .collect();
        let p = self.solve_fits(&fits, q)?;
        if p.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence("non-finite reconstruction".into()));
        }
        Ok(p)
    }

    /// Vector-Jacobian product of `inverse` with respect to the features.
    pub fn inverse_vjp(
        &self,
        reference: &AcapReference,
        feat: &[f64],
        upstream: &[f64],
    ) -> Result<Vec<f64>> {
        let k = self.num_vertices;
        check_len(FEATURE_WIDTH * k, feat.len())?;
        check_len(3 * k, upstream.len())?;
        let nf = self.factor.dim();
        // Adjoint solves, one per coordinate; constrained entries stay zero.
        let mut lambda = vec![vec![0.0; k]; 3];
        for (r, lam) in lambda.iter_mut().enumerate() {
            let mut rhs = vec![0.0; nf];
            for v in 0..k {
                if let Some(row) = self.free_index[v] {
                    rhs[row] = upstream[3 * v + r];
                }
            }
            let x = self.factor.solve(&rhs);
            for v in 0..k {
                if let Some(row) = self.free_index[v] {
                    lam[v] = x[row];
                }
            }
        }
        let mut out = vec![0.0; FEATURE_WIDTH * k];
        for i in 0..k {
            let c = &feat[FEATURE_WIDTH * i..FEATURE_WIDTH * (i + 1)];
            let w = Vector3::new(c[0], c[1], c[2]);
            let s = unpack_symmetric(&c[3..]);
            let rot = rodrigues(&w);
            let mut fit_bar = Matrix3x2::zeros();
            for (r, lam) in lambda.iter().enumerate() {
                let mut row = Vector2::zeros();
                for (v, u) in &self.local_ops[i] {
                    row += u * lam[*v];
                }
                fit_bar[(r, 0)] = row[0];
                fit_bar[(r, 1)] = row[1];
            }
            let t_bar = fit_bar * reference.rest_fit[i].transpose();
            let r_bar = t_bar * s;
            let s_bar = rot.transpose() * t_bar;
            let jac = rodrigues_jacobian(&w);
            let o = &mut out[FEATURE_WIDTH * i..FEATURE_WIDTH * (i + 1)];
            for axis in 0..3 {
                o[axis] = r_bar.component_mul(&jac[axis]).sum();
            }
            o[3] = s_bar[(0, 0)];
            o[4] = s_bar[(0, 1)] + s_bar[(1, 0)];
            o[5] = s_bar[(0, 2)] + s_bar[(2, 0)];
            o[6] = s_bar[(1, 1)];
            o[7] = s_bar[(1, 2)] + s_bar[(2, 1)];
            o[8] = s_bar[(2, 2)];
        }
        Ok(out)
    }
}
