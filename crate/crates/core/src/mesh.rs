//! Triangle meshes, neighborhoods, cotangent weights and OBJ IO.
//!
//! Positions are handled in two forms: `Vector3` per vertex inside [`TriMesh`],
//! and flat `[x0, y0, z0, x1, ...]` slices of length `3K` everywhere a frame of
//! a sequence is passed around.

use std::collections::{BTreeMap, VecDeque};
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::Vector3;

use crate::error::{Error, Result};

/// Area below which a reference triangle counts as degenerate.
const DEGENERATE_AREA: f64 = 1e-14;

#[derive(Debug, Clone, PartialEq)]
pub struct TriMesh {
    vertices: Vec<Vector3<f64>>,
    triangles: Vec<[usize; 3]>,
}

impl TriMesh {
    /// Builds a mesh and checks index range, triangle area and edge-manifoldness.
    pub fn new(vertices: Vec<Vector3<f64>>, triangles: Vec<[usize; 3]>) -> Result<Self> {
        let k = vertices.len();
        for (t, tri) in triangles.iter().enumerate() {
            if tri.iter().any(|&v| v >= k) {
                return Err(Error::InvalidMesh(format!(
                    "triangle {t} references a vertex outside [0, {k})"
                )));
            }
            if tri[0] == tri[1] || tri[1] == tri[2] || tri[0] == tri[2] {
                return Err(Error::DegenerateTriangle(t));
            }
            let [a, b, c] = tri.map(|v| vertices[v]);
            if 0.5 * (b - a).cross(&(c - a)).norm() <= DEGENERATE_AREA {
                return Err(Error::DegenerateTriangle(t));
            }
        }
        let mut edge_count: BTreeMap<(usize, usize), usize> = BTreeMap::new();
        for tri in &triangles {
            for e in 0..3 {
                let (a, b) = (tri[e], tri[(e + 1) % 3]);
                *edge_count.entry((a.min(b), a.max(b))).or_default() += 1;
            }
        }
        if let Some((&(a, b), _)) = edge_count.iter().find(|(_, &n)| n > 2) {
            return Err(Error::NonManifold(a, b));
        }
        Ok(Self {
            vertices,
            triangles,
        })
    }

    pub fn from_flat(positions: &[f64], triangles: Vec<[usize; 3]>) -> Result<Self> {
        if !positions.len().is_multiple_of(3) {
            return Err(Error::InvalidMesh(
                "flat position length is not a multiple of 3".into(),
            ));
        }
        Self::new(unflatten(positions), triangles)
    }

    pub fn num_vertices(&self) -> usize {
        self.vertices.len()
    }

    pub fn vertices(&self) -> &[Vector3<f64>] {
        &self.vertices
    }

    pub fn triangles(&self) -> &[[usize; 3]] {
        &self.triangles
    }

    pub fn positions(&self) -> Vec<f64> {
        flatten(&self.vertices)
    }

    /// Rounds every coordinate to the precision used by the OBJ writer, so that a
    /// save/load cycle reproduces the vertices bit for bit.
    pub fn quantized(&self) -> Self {
        let vertices = self
            .vertices
            .iter()
            .map(|v| {
                v.map(|x| {
                    format_coord(x)
                        .parse::<f64>()
                        .expect("formatted float parses")
                })
            })
            .collect();
        Self {
            vertices,
            triangles: self.triangles.clone(),
        }
    }

    pub fn parse_obj(text: &str) -> Result<Self> {
        let mut vertices = Vec::new();
        let mut faces: Vec<(usize, [i64; 3])> = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = lineno + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            let mut parts = content.split_whitespace();
            match parts.next() {
                Some("v") => {
                    let coords: Vec<f64> = parts
                        .take(3)
                        .map(|s| {
                            s.parse::<f64>().map_err(|_| Error::Parse {
                                line,
                                message: format!("bad coordinate `{s}`"),
                            })
                        })
                        .collect::<Result<_>>()?;
                    if coords.len() != 3 {
                        return Err(Error::Parse {
                            line,
                            message: "vertex needs three coordinates".into(),
                        });
                    }
                    vertices.push(Vector3::new(coords[0], coords[1], coords[2]));
                }
                Some("f") => {
                    let idx: Vec<i64> = parts
                        .map(|s| {
                            let head = s.split('/').next().unwrap_or("");
                            head.parse::<i64>().map_err(|_| Error::Parse {
                                line,
                                message: format!("bad face index `{s}`"),
                            })
                        })
                        .collect::<Result<_>>()?;
                    if idx.len() != 3 {
                        return Err(Error::Parse {
                            line,
                            message: format!(
                                "face has {} vertices, only triangles are supported",
                                idx.len()
                            ),
                        });
                    }
                    faces.push((line, [idx[0], idx[1], idx[2]]));
                }
                _ => {}
            }
        }
        let k = vertices.len() as i64;
        let mut triangles = Vec::with_capacity(faces.len());
        for (line, f) in faces {
            let mut tri = [0usize; 3];
            for (slot, &i) in tri.iter_mut().zip(f.iter()) {
                // negative indices are relative to the current end of the vertex list
                let resolved = if i > 0 { i - 1 } else { k + i };
                if resolved < 0 || resolved >= k {
                    return Err(Error::Parse {
                        line,
                        message: format!("face index {i} out of range"),
                    });
                }
                *slot = resolved as usize;
            }
            triangles.push(tri);
        }
        Self::new(vertices, triangles)
    }

    pub fn load_obj(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse_obj(&text)
    }

    pub fn to_obj_string(&self) -> String {
        obj_string(&flatten(&self.vertices), &self.triangles)
    }

    pub fn save_obj(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_obj_string())?;
        Ok(())
    }

    /// Writes the topology of this mesh with different vertex positions.
    pub fn save_obj_with_positions(&self, positions: &[f64], path: impl AsRef<Path>) -> Result<()> {
        crate::error::check_len(3 * self.num_vertices(), positions.len())?;
        std::fs::write(path, obj_string(positions, &self.triangles))?;
        Ok(())
    }
}

fn format_coord(x: f64) -> String {
    // 9 significant digits
    format!("{x:.8e}")
}

fn obj_string(positions: &[f64], triangles: &[[usize; 3]]) -> String {
    let mut out = String::with_capacity(positions.len() * 20 + triangles.len() * 16);
    for v in positions.chunks_exact(3) {
        let _ = writeln!(
            out,
            "v {} {} {}",
            format_coord(v[0]),
            format_coord(v[1]),
            format_coord(v[2])
        );
    }
    for t in triangles {
        let _ = writeln!(out, "f {} {} {}", t[0] + 1, t[1] + 1, t[2] + 1);
    }
    out
}

pub fn flatten(vertices: &[Vector3<f64>]) -> Vec<f64> {
    vertices.iter().flat_map(|v| [v.x, v.y, v.z]).collect()
}

pub fn unflatten(positions: &[f64]) -> Vec<Vector3<f64>> {
    positions
        .chunks_exact(3)
        .map(|c| Vector3::new(c[0], c[1], c[2]))
        .collect()
}

#[inline]
pub(crate) fn vertex(positions: &[f64], i: usize) -> Vector3<f64> {
    Vector3::new(positions[3 * i], positions[3 * i + 1], positions[3 * i + 2])
}

/// Length of the axis-aligned bounding box diagonal of a flat position vector.
pub fn bbox_diagonal(positions: &[f64]) -> f64 {
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for v in positions.chunks_exact(3) {
        for d in 0..3 {
            lo[d] = lo[d].min(v[d]);
            hi[d] = hi[d].max(v[d]);
        }
    }
    (0..3).map(|d| (hi[d] - lo[d]).powi(2)).sum::<f64>().sqrt()
}

/// Two triangles sharing an interior edge.
///
/// `edge` is ordered as it appears in `tri_a`'s winding; `opposite[0]` is the
/// third vertex of `tri_a`, `opposite[1]` the third vertex of `tri_b`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DihedralPair {
    pub tri_a: usize,
    pub tri_b: usize,
    pub edge: [usize; 2],
    pub opposite: [usize; 2],
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adjacency {
    pub one_ring: Vec<Vec<usize>>,
    pub two_ring: Vec<Vec<usize>>,
    pub dihedral_pairs: Vec<DihedralPair>,
}

impl Adjacency {
    pub fn build(mesh: &TriMesh) -> Self {
        let k = mesh.num_vertices();
        let mut one_ring = vec![Vec::new(); k];
        let mut edge_tris: BTreeMap<(usize, usize), Vec<(usize, usize)>> = BTreeMap::new();
        for (t, tri) in mesh.triangles().iter().enumerate() {
            for e in 0..3 {
                let (a, b) = (tri[e], tri[(e + 1) % 3]);
                one_ring[a].push(b);
                one_ring[b].push(a);
                edge_tris
                    .entry((a.min(b), a.max(b)))
                    .or_default()
                    .push((t, e));
            }
        }
        for ring in &mut one_ring {
            ring.sort_unstable();
            ring.dedup();
        }

        let mut two_ring = vec![Vec::new(); k];
        for i in 0..k {
            let mut set: Vec<usize> = one_ring[i]
                .iter()
                .flat_map(|&j| one_ring[j].iter().copied())
                .filter(|&m| m != i && one_ring[i].binary_search(&m).is_err())
                .collect();
            set.sort_unstable();
            set.dedup();
            two_ring[i] = set;
        }

        let tris = mesh.triangles();
        let dihedral_pairs = edge_tris
            .values()
            .filter(|v| v.len() == 2)
            .map(|v| {
                let (ta, ea) = v[0];
                let (tb, _) = v[1];
                let a = tris[ta];
                let edge = [a[ea], a[(ea + 1) % 3]];
                let opp_a = a[(ea + 2) % 3];
                let opp_b = *tris[tb]
                    .iter()
                    .find(|&&x| x != edge[0] && x != edge[1])
                    .expect("triangle has a vertex off the shared edge");
                DihedralPair {
                    tri_a: ta,
                    tri_b: tb,
                    edge,
                    opposite: [opp_a, opp_b],
                }
            })
            .collect();

        Self {
            one_ring,
            two_ring,
            dihedral_pairs,
        }
    }

    pub fn num_vertices(&self) -> usize {
        self.one_ring.len()
    }

    /// Unique undirected 1-ring edges `(i, j)` with `i < j`.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        self.one_ring
            .iter()
            .enumerate()
            .flat_map(|(i, ring)| ring.iter().filter(move |&&j| j > i).map(move |&j| (i, j)))
            .collect()
    }

    /// Unique undirected 2-ring pairs `(i, j)` with `i < j`.
    pub fn two_ring_pairs(&self) -> Vec<(usize, usize)> {
        self.two_ring
            .iter()
            .enumerate()
            .flat_map(|(i, ring)| ring.iter().filter(move |&&j| j > i).map(move |&j| (i, j)))
            .collect()
    }

    /// Breadth-first spanning forest of the vertex graph: visit order and parent
    /// of each vertex (`None` for component roots).
    pub fn bfs_forest(&self) -> (Vec<usize>, Vec<Option<usize>>) {
        let k = self.num_vertices();
        let mut parent = vec![None; k];
        let mut seen = vec![false; k];
        let mut order = Vec::with_capacity(k);
        let mut queue = VecDeque::new();
        for root in 0..k {
            if seen[root] {
                continue;
            }
            seen[root] = true;
            queue.push_back(root);
            while let Some(v) = queue.pop_front() {
                order.push(v);
                for &w in &self.one_ring[v] {
                    if !seen[w] {
                        seen[w] = true;
                        parent[w] = Some(v);
                        queue.push_back(w);
                    }
                }
            }
        }
        (order, parent)
    }
}

/// Cotangent weights `c_ij = (cot a_ij + cot b_ij) / 2`, stored parallel to the
/// 1-ring lists of an [`Adjacency`]. Boundary edges carry the single available term.
#[derive(Debug, Clone, PartialEq)]
pub struct CotanWeights {
    weights: Vec<Vec<f64>>,
    rings: Vec<Vec<usize>>,
}

impl CotanWeights {
    pub fn compute(mesh: &TriMesh, adjacency: &Adjacency) -> Result<Self> {
        Self::compute_with_positions(&mesh.positions(), mesh.triangles(), adjacency)
    }

    pub fn compute_with_positions(
        positions: &[f64],
        triangles: &[[usize; 3]],
        adjacency: &Adjacency,
    ) -> Result<Self> {
        let rings = adjacency.one_ring.clone();
        let mut weights: Vec<Vec<f64>> = rings.iter().map(|r| vec![0.0; r.len()]).collect();
        for (t, tri) in triangles.iter().enumerate() {
            for c in 0..3 {
                let o = tri[c];
                let i = tri[(c + 1) % 3];
                let j = tri[(c + 2) % 3];
                let a = vertex(positions, i) - vertex(positions, o);
                let b = vertex(positions, j) - vertex(positions, o);
                let cot = a.dot(&b) / a.cross(&b).norm();
                if !cot.is_finite() {
                    return Err(Error::DegenerateTriangle(t));
                }
                let half = 0.5 * cot;
                let ii = rings[i].binary_search(&j).expect("edge in ring");
                weights[i][ii] += half;
                let jj = rings[j].binary_search(&i).expect("edge in ring");
                weights[j][jj] += half;
            }
        }
        Ok(Self { weights, rings })
    }

    pub fn get(&self, i: usize, j: usize) -> Option<f64> {
        let pos = self.rings.get(i)?.binary_search(&j).ok()?;
        Some(self.weights[i][pos])
    }

    /// Weights of vertex `i`, aligned with `adjacency.one_ring[i]`.
    pub fn ring(&self, i: usize) -> &[f64] {
        &self.weights[i]
    }
}
