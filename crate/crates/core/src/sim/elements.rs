//! Per-element energies, gradients and (PSD) Hessian blocks.

use std::ops::AddAssign;

use nalgebra::{Matrix2, Matrix3, Matrix3x2, SMatrix, SymmetricEigen, Vector3};

pub type V3 = Vector3<f64>;
pub type M3 = Matrix3<f64>;

/// Hooke spring `k/2 (|d| − r)²` with `d = xi − xj`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Spring {
    pub i: usize,
    pub j: usize,
    pub rest: f64,
}

impl Spring {
    pub fn energy(&self, xi: V3, xj: V3, k: f64) -> f64 {
        let l = (xi - xj).norm();
        0.5 * k * (l - self.rest).powi(2)
    }

    /// Gradient with respect to `xi` (the `xj` gradient is its negation).
    pub fn gradient(&self, xi: V3, xj: V3, k: f64) -> V3 {
        let d = xi - xj;
        let l = d.norm();
        if l == 0.0 {
            return V3::zeros();
        }
        d * (k * (l - self.rest) / l)
    }

    /// Hessian block `∂²E/∂xi²`; the full element Hessian is `[H −H; −H H]`.
    /// With `project`, the lateral term is clamped at zero under compression.
    pub fn hessian(&self, xi: V3, xj: V3, k: f64, project: bool) -> M3 {
        let d = xi - xj;
        let l = d.norm();
        if l == 0.0 {
            return M3::identity() * k;
        }
        let u = d / l;
        let uu = u * u.transpose();
        let mut lateral = 1.0 - self.rest / l;
        if project {
            lateral = lateral.max(0.0);
        }
        (uu + (M3::identity() - uu) * lateral) * k
    }
}

/// Saint Venant–Kirchhoff membrane on the 2D rest metric of one triangle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Membrane {
    pub v: [usize; 3],
    pub dm_inv: Matrix2<f64>,
    pub area: f64,
}

impl Membrane {
    /// Rest metric from the reference triangle; `None` if degenerate.
    pub fn from_rest(v: [usize; 3], x: [V3; 3]) -> Option<Self> {
        let e1 = x[1] - x[0];
        let e2 = x[2] - x[0];
        let l1 = e1.norm();
        let n = e1.cross(&e2);
        let area = 0.5 * n.norm();
        if !(area > 0.0) || !(l1 > 0.0) {
            return None;
        }
        let u = e1 / l1;
        let w = n.normalize().cross(&u);
        let dm = Matrix2::new(l1, e2.dot(&u), 0.0, e2.dot(&w));
        let dm_inv = dm.try_inverse()?;
        Some(Self { v, dm_inv, area })
    }

    fn deformation(&self, x: [V3; 3]) -> Matrix3x2<f64> {
        let ds = Matrix3x2::from_columns(&[x[1] - x[0], x[2] - x[0]]);
        ds * self.dm_inv
    }

    /// `k·A·(‖E‖² + ½ λ tr(E)²)` with Green strain `E = ½(FᵀF − I)`.
    pub fn energy(&self, x: [V3; 3], k: f64, lame_ratio: f64) -> f64 {
        let f = self.deformation(x);
        let e = (f.transpose() * f - Matrix2::identity()) * 0.5;
        let tr = e.trace();
        k * self.area * (e.norm_squared() + 0.5 * lame_ratio * tr * tr)
    }

    /// First Piola stress `∂ψ/∂F` (per unit area, before `k·A`).
    fn piola(f: &Matrix3x2<f64>, lame_ratio: f64) -> Matrix3x2<f64> {
        let e = (f.transpose() * f - Matrix2::identity()) * 0.5;
        let s = e * 2.0 + Matrix2::identity() * (lame_ratio * e.trace());
        f * s
    }

    pub fn gradient(&self, x: [V3; 3], k: f64, lame_ratio: f64) -> [V3; 3] {
        let f = self.deformation(x);
        let p = Self::piola(&f, lame_ratio);
        let h = p * self.dm_inv.transpose() * (k * self.area);
        let g1 = h.column(0).into_owned();
        let g2 = h.column(1).into_owned();
        [-(g1 + g2), g1, g2]
    }

    /// Exact 9×9 Hessian, optionally projected onto the PSD cone.
    pub fn hessian(
        &self,
        x: [V3; 3],
        k: f64,
        lame_ratio: f64,
        project: bool,
    ) -> SMatrix<f64, 9, 9> {
        let f = self.deformation(x);
        let scale = k * self.area;
        // dF/dx: F = Σ_a x_a ⊗ b_a with b_0 = −(row0 + row1) of Dm⁻¹, b_1 = row0, b_2 = row1.
        let r0 = self.dm_inv.row(0).transpose();
        let r1 = self.dm_inv.row(1).transpose();
        let b = [-(r0 + r1), r0, r1];
        let e = (f.transpose() * f - Matrix2::identity()) * 0.5;
        let s = e * 2.0 + Matrix2::identity() * (lame_ratio * e.trace());
        let mut hess = SMatrix::<f64, 9, 9>::zeros();
        for a in 0..3 {
            for c in 0..3 {
                let col = a * 3 + c;
                // Directional derivative of F along unit displacement of x_a[c].
                let mut df = Matrix3x2::zeros();
                df[(c, 0)] = b[a][0];
                df[(c, 1)] = b[a][1];
                let de = (df.transpose() * f + f.transpose() * df) * 0.5;
                let ds = de * 2.0 + Matrix2::identity() * (lame_ratio * de.trace());
                let dp = df * s + f * ds;
                let dh = dp * self.dm_inv.transpose() * scale;
                let g1 = dh.column(0).into_owned();
                let g2 = dh.column(1).into_owned();
                let rows = [-(g1 + g2), g1, g2];
                for (va, gv) in rows.iter().enumerate() {
                    for d in 0..3 {
                        hess[(va * 3 + d, col)] = gv[d];
                    }
                }
            }
        }
        if project {
            project_psd(hess)
        } else {
            (hess + hess.transpose()) * 0.5
        }
    }
}

/// Quadratic penalty on the change of the dihedral angle across an interior edge.
///
/// `v = [e0, e1, opp_a, opp_b]` with the edge ordered as in the first triangle's winding.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hinge {
    pub v: [usize; 4],
    pub rest_angle: f64,
}

/// Signed dihedral angle of a hinge (0 when flat) and its gradient.
pub fn hinge_angle(x: [V3; 4]) -> Option<(f64, [V3; 4])> {
    let e = x[1] - x[0];
    let l2 = e.norm_squared();
    let l = l2.sqrt();
    let na = e.cross(&(x[2] - x[0]));
    let nb = (x[3] - x[0]).cross(&e);
    let na2 = na.norm_squared();
    let nb2 = nb.norm_squared();
    if !(l > 0.0 && na2 > 0.0 && nb2 > 0.0) {
        return None;
    }
    let theta = (na.cross(&nb).dot(&e) / l).atan2(na.dot(&nb));
    let g2 = na * (-l / na2);
    let g3 = nb * (-l / nb2);
    let ta = (x[2] - x[0]).dot(&e) / l2;
    let tb = (x[3] - x[0]).dot(&e) / l2;
    let g0 = -(g2 * (1.0 - ta)) - g3 * (1.0 - tb);
    let g1 = -(g2 * ta) - g3 * tb;
    Some((theta, [g0, g1, g2, g3]))
}

impl Hinge {
    fn deviation(&self, theta: f64) -> f64 {
        let d = theta - self.rest_angle;
        // Wrap to (−π, π] so a hinge folding through ±π stays continuous.
        (d + std::f64::consts::PI).rem_euclid(2.0 * std::f64::consts::PI) - std::f64::consts::PI
    }

    pub fn energy(&self, x: [V3; 4], k: f64) -> Option<f64> {
        let (theta, _) = hinge_angle(x)?;
        Some(k * self.deviation(theta).powi(2))
    }

    pub fn gradient(&self, x: [V3; 4], k: f64) -> Option<[V3; 4]> {
        let (theta, g) = hinge_angle(x)?;
        let c = 2.0 * k * self.deviation(theta);
        Some(g.map(|v| v * c))
    }

    /// Gauss–Newton Hessian `2k ∇θ ∇θᵀ` when `project`, otherwise the full
    /// Hessian with the curvature of θ taken by central differences of the
    /// analytic angle gradient.
    pub fn hessian(&self, x: [V3; 4], k: f64, project: bool) -> Option<SMatrix<f64, 12, 12>> {
        let (theta, g) = hinge_angle(x)?;
        let flat = flatten4(&g);
        let mut h = flat * flat.transpose() * (2.0 * k);
        let dev = self.deviation(theta);
        if !project && dev != 0.0 {
            let scale = (x[1] - x[0]).norm();
            let step = 1e-6 * scale;
            for col in 0..12 {
                let (a, d) = (col / 3, col % 3);
                let mut xp = x;
                let mut xm = x;
                xp[a][d] += step;
                xm[a][d] -= step;
                let gp = flatten4(&hinge_angle(xp)?.1);
                let gm = flatten4(&hinge_angle(xm)?.1);
                let dcol = (gp - gm) * (k * dev / step);
                h.column_mut(col).add_assign(&dcol);
            }
            h = (h + h.transpose()) * 0.5;
        }
        Some(h)
    }
}

fn flatten4(g: &[V3; 4]) -> SMatrix<f64, 12, 1> {
    let mut flat = SMatrix::<f64, 12, 1>::zeros();
    for (a, v) in g.iter().enumerate() {
        flat.fixed_rows_mut::<3>(3 * a).copy_from(v);
    }
    flat
}

/// `k_c·max(0, r + margin − |x − c|)²`.
pub fn collision_energy(x: V3, center: V3, reach: f64, k: f64) -> f64 {
    let pen = reach - (x - center).norm();
    if pen > 0.0 {
        k * pen * pen
    } else {
        0.0
    }
}

pub fn collision_gradient(x: V3, center: V3, reach: f64, k: f64) -> V3 {
    let d = x - center;
    let l = d.norm();
    let pen = reach - l;
    if pen <= 0.0 || l == 0.0 {
        return V3::zeros();
    }
    d * (-2.0 * k * pen / l)
}

/// Hessian `2k uuᵀ − 2k (pen/l)(I − uuᵀ)`; `project` drops the (negative)
/// curvature term.
pub fn collision_hessian(x: V3, center: V3, reach: f64, k: f64, project: bool) -> M3 {
    let d = x - center;
    let l = d.norm();
    let pen = reach - l;
    if pen <= 0.0 {
        return M3::zeros();
    }
    if l == 0.0 {
        return M3::identity() * (2.0 * k);
    }
    let u = d / l;
    let uu = u * u.transpose();
    if project {
        uu * (2.0 * k)
    } else {
        (uu - (M3::identity() - uu) * (pen / l)) * (2.0 * k)
    }
}

fn project_psd(h: SMatrix<f64, 9, 9>) -> SMatrix<f64, 9, 9> {
    let sym = (h + h.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let mut vals = eig.eigenvalues;
    if vals.iter().all(|v| *v >= 0.0) {
        return sym;
    }
    for v in vals.iter_mut() {
        *v = v.max(0.0);
    }
    eig.eigenvectors * SMatrix::<f64, 9, 9>::from_diagonal(&vals) * eig.eigenvectors.transpose()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fd_check(f: impl Fn(&[V3]) -> f64, x: &[V3], grad: &[V3]) {
        let h = 1e-6;
        for a in 0..x.len() {
            for d in 0..3 {
                let mut xp = x.to_vec();
                let mut xm = x.to_vec();
                xp[a][d] += h;
                xm[a][d] -= h;
                let fd = (f(&xp) - f(&xm)) / (2.0 * h);
                let an = grad[a][d];
                let denom = fd.abs().max(an.abs()).max(1e-6);
                assert!(
                    (fd - an).abs() / denom < 1e-5,
                    "vertex {a} dim {d}: fd {fd} vs {an}"
                );
            }
        }
    }

    #[test]
    fn spring_energy_matches_hooke() {
        let s = Spring {
            i: 0,
            j: 1,
            rest: 1.0,
        };
        let e = s.energy(V3::new(2.0, 0.0, 0.0), V3::zeros(), 10.0);
        assert_eq!(e, 5.0);
    }

    #[test]
    fn spring_gradient_matches_fd() {
        let s = Spring {
            i: 0,
            j: 1,
            rest: 0.7,
        };
        let x = [V3::new(0.3, -0.2, 0.9), V3::new(-0.1, 0.4, 0.2)];
        let g = s.gradient(x[0], x[1], 3.0);
        fd_check(|y| s.energy(y[0], y[1], 3.0), &x, &[g, -g]);
    }

    #[test]
    fn membrane_rest_energy_is_zero_and_gradient_matches_fd() {
        let rest = [
            V3::new(0.0, 0.0, 0.0),
            V3::new(1.0, 0.1, 0.0),
            V3::new(0.2, 0.8, 0.3),
        ];
        let m = Membrane::from_rest([0, 1, 2], rest).unwrap();
        assert!(m.energy(rest, 5.0, 1.0).abs() < 1e-24);
        let x = [
            V3::new(0.05, 0.0, -0.1),
            V3::new(1.2, 0.0, 0.1),
            V3::new(0.1, 0.9, 0.5),
        ];
        let g = m.gradient(x, 5.0, 1.0);
        fd_check(|y| m.energy([y[0], y[1], y[2]], 5.0, 1.0), &x, &g);
    }

    #[test]
    fn membrane_hessian_matches_gradient_differences_when_convex() {
        let rest = [
            V3::new(0.0, 0.0, 0.0),
            V3::new(1.0, 0.0, 0.0),
            V3::new(0.0, 1.0, 0.0),
        ];
        let m = Membrane::from_rest([0, 1, 2], rest).unwrap();
        // Stretched state: exact Hessian is PSD so projection leaves it intact.
        let x = [
            V3::new(0.0, 0.0, 0.0),
            V3::new(1.3, 0.0, 0.0),
            V3::new(0.0, 1.2, 0.0),
        ];
        let hess = m.hessian(x, 2.0, 1.0, true);
        let h = 1e-6;
        for col in 0..9 {
            let (a, d) = (col / 3, col % 3);
            let mut xp = x;
            let mut xm = x;
            xp[a][d] += h;
            xm[a][d] -= h;
            let gp = m.gradient(xp, 2.0, 1.0);
            let gm = m.gradient(xm, 2.0, 1.0);
            for row in 0..9 {
                let fd = (gp[row / 3][row % 3] - gm[row / 3][row % 3]) / (2.0 * h);
                assert!((fd - hess[(row, col)]).abs() < 1e-5 * (1.0 + fd.abs()));
            }
        }
    }

    #[test]
    fn hinge_flat_angle_is_zero() {
        let x = [
            V3::new(0.0, 0.0, 0.0),
            V3::new(1.0, 0.0, 0.0),
            V3::new(0.5, 1.0, 0.0),
            V3::new(0.3, -1.0, 0.0),
        ];
        let (theta, _) = hinge_angle(x).unwrap();
        assert!(theta.abs() < 1e-14);
    }

    #[test]
    fn hinge_angle_of_right_fold() {
        let x = [
            V3::new(0.0, 0.0, 0.0),
            V3::new(1.0, 0.0, 0.0),
            V3::new(0.5, 1.0, 0.0),
            V3::new(0.5, 0.0, 1.0),
        ];
        let (theta, _) = hinge_angle(x).unwrap();
        assert!((theta.abs() - std::f64::consts::FRAC_PI_2).abs() < 1e-12);
    }

    #[test]
    fn hinge_gradient_matches_fd() {
        let x = [
            V3::new(0.1, 0.0, -0.05),
            V3::new(1.0, 0.2, 0.0),
            V3::new(0.4, 1.0, 0.3),
            V3::new(0.7, -0.9, 0.4),
        ];
        let (_, g) = hinge_angle(x).unwrap();
        fd_check(|y| hinge_angle([y[0], y[1], y[2], y[3]]).unwrap().0, &x, &g);
        let hinge = Hinge {
            v: [0, 1, 2, 3],
            rest_angle: 0.2,
        };
        let ge = hinge.gradient(x, 7.0).unwrap();
        fd_check(
            |y| hinge.energy([y[0], y[1], y[2], y[3]], 7.0).unwrap(),
            &x,
            &ge,
        );
    }

    #[test]
    fn collision_values() {
        let c = V3::zeros();
        assert_eq!(collision_energy(V3::new(5.0, 0.0, 0.0), c, 1.001, 1e4), 0.0);
        let e = collision_energy(c, c, 1.001, 1e4);
        assert!((e - 1e4 * 1.001f64.powi(2)).abs() < 1e-9);
        let x = [V3::new(0.3, 0.5, 0.7)];
        let g = collision_gradient(x[0], c, 1.001, 1e4);
        fd_check(|y| collision_energy(y[0], c, 1.001, 1e4), &x, &[g]);
    }

    fn element_hessian_fd<const N: usize>(
        grad: impl Fn(&[V3]) -> Vec<V3>,
        x: &[V3],
        h: &SMatrix<f64, N, N>,
        tol: f64,
    ) {
        let step = 1e-6;
        for col in 0..N {
            let (a, d) = (col / 3, col % 3);
            let mut xp = x.to_vec();
            let mut xm = x.to_vec();
            xp[a][d] += step;
            xm[a][d] -= step;
            let (gp, gm) = (grad(&xp), grad(&xm));
            for row in 0..N {
                let fd = (gp[row / 3][row % 3] - gm[row / 3][row % 3]) / (2.0 * step);
                assert!(
                    (fd - h[(row, col)]).abs() < tol * (1.0 + fd.abs()),
                    "({row},{col}) fd {fd} vs {}",
                    h[(row, col)]
                );
            }
        }
    }

    #[test]
    fn exact_hessians_match_gradient_differences() {
        let s = Spring {
            i: 0,
            j: 1,
            rest: 1.3,
        };
        let x = [V3::new(0.1, 0.2, 0.3), V3::new(0.9, -0.1, 0.4)];
        let hb = s.hessian(x[0], x[1], 4.0, false);
        let mut full = SMatrix::<f64, 6, 6>::zeros();
        full.fixed_view_mut::<3, 3>(0, 0).copy_from(&hb);
        full.fixed_view_mut::<3, 3>(3, 3).copy_from(&hb);
        full.fixed_view_mut::<3, 3>(0, 3).copy_from(&(-hb));
        full.fixed_view_mut::<3, 3>(3, 0).copy_from(&(-hb));
        element_hessian_fd(
            |y| {
                let g = s.gradient(y[0], y[1], 4.0);
                vec![g, -g]
            },
            &x,
            &full,
            1e-6,
        );

        let rest = [
            V3::new(0.0, 0.0, 0.0),
            V3::new(1.0, 0.0, 0.0),
            V3::new(0.0, 1.0, 0.0),
        ];
        let m = Membrane::from_rest([0, 1, 2], rest).unwrap();
        let x = [
            V3::new(0.0, 0.1, 0.0),
            V3::new(0.7, 0.0, 0.2),
            V3::new(-0.1, 0.8, 0.1),
        ];
        let hm = m.hessian(x, 2.0, 1.0, false);
        element_hessian_fd(
            |y| m.gradient([y[0], y[1], y[2]], 2.0, 1.0).to_vec(),
            &x,
            &hm,
            1e-5,
        );

        let hinge = Hinge {
            v: [0, 1, 2, 3],
            rest_angle: 0.3,
        };
        let x = [
            V3::new(0.1, 0.0, -0.05),
            V3::new(1.0, 0.2, 0.0),
            V3::new(0.4, 1.0, 0.3),
            V3::new(0.7, -0.9, 0.4),
        ];
        let hh = hinge.hessian(x, 3.0, false).unwrap();
        element_hessian_fd(
            |y| {
                hinge
                    .gradient([y[0], y[1], y[2], y[3]], 3.0)
                    .unwrap()
                    .to_vec()
            },
            &x,
            &hh,
            1e-4,
        );

        let c = V3::zeros();
        let x = [V3::new(0.3, 0.2, 0.1)];
        let hc = collision_hessian(x[0], c, 0.5, 10.0, false);
        element_hessian_fd(
            |y| vec![collision_gradient(y[0], c, 0.5, 10.0)],
            &x,
            &hc,
            1e-6,
        );
    }
}
