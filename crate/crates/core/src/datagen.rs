//! Scripted datasets: sheets and balls driven by grasp-point trajectories.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mesh::TriMesh;
use crate::sim::{apply_targets, GraspSet, MaterialKind, ShellSim, SimConfig, SimState, Sphere};

const FRAMES_MAGIC: &[u8; 8] = b"SHFRAMES";
const FRAMES_VERSION: u32 = 1;

/// Frames per split block and how many of them are training frames.
pub const SPLIT_PERIOD: usize = 17;
pub const SPLIT_TRAIN: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Split {
    Train,
    Test,
}

pub fn split_of(frame: usize) -> Split {
    if frame % SPLIT_PERIOD < SPLIT_TRAIN {
        Split::Train
    } else {
        Split::Test
    }
}

pub fn split_labels(n_frames: usize) -> Vec<Split> {
    (0..n_frames).map(split_of).collect()
}

/// Start indices of the 5-frame test windows (the trailing 5 of each block of 17).
pub fn test_windows(n_frames: usize) -> Vec<std::ops::Range<usize>> {
    (0..n_frames)
        .step_by(SPLIT_PERIOD)
        .map(|b| b + SPLIT_TRAIN..b + SPLIT_PERIOD)
        .filter(|r| r.end <= n_frames)
        .collect()
}

/// A regular `n×n` sheet of side 1 m in the XY plane; the two corners of the
/// last row are grasped. With `holes`, a centred block of
/// `(n−1)/4 × (n−1)/4` vertices is removed.
pub fn make_sheet(n: usize, holes: bool) -> Result<(TriMesh, Vec<usize>)> {
    if n < 3 {
        return Err(Error::Config("sheet resolution must be at least 3".into()));
    }
    let idx = |r: usize, c: usize| r * n + c;
    let mut removed = vec![false; n * n];
    if holes {
        let b = (n - 1) / 4;
        let start = (n - b) / 2;
        for r in start..start + b {
            for c in start..start + b {
                removed[idx(r, c)] = true;
            }
        }
    }
    let mut remap = vec![usize::MAX; n * n];
    let mut vertices = Vec::new();
    for r in 0..n {
        for c in 0..n {
            if !removed[idx(r, c)] {
                remap[idx(r, c)] = vertices.len();
                let h = 1.0 / (n - 1) as f64;
                vertices.push(Vector3::new(c as f64 * h, r as f64 * h, 0.0));
            }
        }
    }
    let mut triangles = Vec::new();
    for r in 0..n - 1 {
        for c in 0..n - 1 {
            let (v00, v10, v01, v11) = (idx(r, c), idx(r, c + 1), idx(r + 1, c), idx(r + 1, c + 1));
            for tri in [[v00, v10, v11], [v00, v11, v01]] {
                if tri.iter().all(|&v| !removed[v]) {
                    triangles.push(tri.map(|v| remap[v]));
                }
            }
        }
    }
    let mesh = TriMesh::new(vertices, triangles)?;
    let grasp = vec![remap[idx(n - 1, 0)], remap[idx(n - 1, n - 1)]];
    Ok((mesh, grasp))
}

/// Icosphere of the given radius centred at the origin; the topmost vertex
/// (index 0) is grasped.
pub fn make_ball(subdivisions: usize, radius: f64) -> Result<(TriMesh, Vec<usize>)> {
    let h = 1.0 / 5f64.sqrt();
    let rr = 2.0 * h;
    let mut verts = vec![Vector3::new(0.0, 0.0, 1.0)];
    for k in 0..5 {
        let a = 2.0 * std::f64::consts::PI * k as f64 / 5.0;
        verts.push(Vector3::new(rr * a.cos(), rr * a.sin(), h));
    }
    for k in 0..5 {
        let a = 2.0 * std::f64::consts::PI * (k as f64 + 0.5) / 5.0;
        verts.push(Vector3::new(rr * a.cos(), rr * a.sin(), -h));
    }
    verts.push(Vector3::new(0.0, 0.0, -1.0));
    let mut tris = Vec::new();
    for k in 0..5 {
        let (u0, u1) = (1 + k, 1 + (k + 1) % 5);
        let (l0, l1) = (6 + k, 6 + (k + 1) % 5);
        tris.push([0, u0, u1]);
        tris.push([u0, l0, u1]);
        tris.push([u1, l0, l1]);
        tris.push([11, l1, l0]);
    }
    for _ in 0..subdivisions {
        let mut mid = std::collections::BTreeMap::new();
        let mut next = Vec::with_capacity(tris.len() * 4);
        let mut midpoint = |a: usize, b: usize, verts: &mut Vec<Vector3<f64>>| -> usize {
            let key = (a.min(b), a.max(b));
            *mid.entry(key).or_insert_with(|| {
                verts.push(((verts[a] + verts[b]) * 0.5).normalize());
                verts.len() - 1
            })
        };
        for [a, b, c] in tris {
            let ab = midpoint(a, b, &mut verts);
            let bc = midpoint(b, c, &mut verts);
            let ca = midpoint(c, a, &mut verts);
            next.extend([[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]);
        }
        tris = next;
    }
    let verts = verts.into_iter().map(|v| v * radius).collect();
    Ok((TriMesh::new(verts, tris)?, vec![0]))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TrajectoryKind {
    #[serde(rename = "x")]
    X,
    #[serde(rename = "y")]
    Y,
    #[serde(rename = "z")]
    Z,
    /// Rotation about the vertical axis through the grasp centroid.
    #[serde(rename = "r")]
    R,
}

/// Back-and-forth motion `A·sin(2πf/T)`: a translation along an axis, or a
/// rotation by that angle (radians) about Z for [`TrajectoryKind::R`].
pub fn trajectory(
    base: &[[f64; 3]],
    kind: TrajectoryKind,
    amplitude: f64,
    period: f64,
    n_frames: usize,
) -> Result<Vec<Vec<[f64; 3]>>> {
    if !(period > 0.0) {
        return Err(Error::Config("trajectory period must be positive".into()));
    }
    let centroid = base
        .iter()
        .fold(Vector3::zeros(), |acc, p| acc + Vector3::from(*p))
        / base.len().max(1) as f64;
    Ok((0..n_frames)
        .map(|f| {
            let d = amplitude * (2.0 * std::f64::consts::PI * f as f64 / period).sin();
            base.iter()
                .map(|p| match kind {
                    TrajectoryKind::X => [p[0] + d, p[1], p[2]],
                    TrajectoryKind::Y => [p[0], p[1] + d, p[2]],
                    TrajectoryKind::Z => [p[0], p[1], p[2] + d],
                    TrajectoryKind::R => {
                        let (s, c) = d.sin_cos();
                        let (x, y) = (p[0] - centroid[0], p[1] - centroid[1]);
                        [
                            centroid[0] + c * x - s * y,
                            centroid[1] + s * x + c * y,
                            p[2],
                        ]
                    }
                })
                .collect()
        })
        .collect())
}

/// Generator parameters recorded alongside a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub generator: String,
    pub mesh_kind: String,
    pub trajectory: TrajectoryKind,
    pub amplitude: f64,
    pub period: f64,
    pub seed: u64,
    /// Standard deviation of the initial position jitter (0 disables it).
    pub jitter: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub mesh: TriMesh,
    pub frames: Vec<Vec<f64>>,
    pub grasp: GraspSet,
    pub cfg: SimConfig,
    pub split: Vec<Split>,
    pub provenance: Provenance,
}

/// Runs the simulator from rest. Frames 0 and 1 are the (quantized, optionally
/// jittered) rest pose; frame `m ≥ 2` is driven by `motion[m − 2]`.
pub fn generate(
    mesh: &TriMesh,
    cfg: &SimConfig,
    motion: &[Vec<[f64; 3]>],
    n_frames: usize,
    provenance: Provenance,
) -> Result<Dataset> {
    if n_frames < 2 {
        return Err(Error::Config("a dataset needs at least 2 frames".into()));
    }
    if motion.len() + 2 < n_frames {
        return Err(Error::Config(format!(
            "motion covers {} frames, {} requested",
            motion.len() + 2,
            n_frames
        )));
    }
    let mesh = mesh.quantized();
    let sim = ShellSim::new(&mesh, cfg.clone())?;
    let mut rest = mesh.positions();
    if provenance.jitter > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(provenance.seed);
        for (v, x) in rest.iter_mut().enumerate() {
            if !sim.is_grasped(v / 3) {
                *x += provenance.jitter * (rng.random::<f64>() * 2.0 - 1.0);
            }
        }
    }
    let base: Vec<[f64; 3]> = cfg
        .grasp
        .iter()
        .map(|&g| [rest[3 * g], rest[3 * g + 1], rest[3 * g + 2]])
        .collect();
    apply_targets(&mut rest, &cfg.grasp, &base);
    let mut trajectory = vec![base.clone(), base];
    trajectory.extend(motion.iter().take(n_frames - 2).cloned());
    let simulated = sim.rollout(
        &SimState::at_rest(rest.clone()),
        &trajectory[2..],
        n_frames - 2,
    )?;
    let mut frames = vec![rest.clone(), rest];
    frames.extend(simulated);
    Ok(Dataset {
        mesh,
        frames,
        grasp: GraspSet {
            indices: cfg.grasp.clone(),
            trajectory,
        },
        cfg: cfg.clone(),
        split: split_labels(n_frames),
        provenance,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MeshSpec {
    Sheet { resolution: usize, holes: bool },
    Ball { subdivisions: usize, radius: f64 },
}

impl MeshSpec {
    pub fn build(&self) -> Result<(TriMesh, Vec<usize>)> {
        match *self {
            MeshSpec::Sheet { resolution, holes } => make_sheet(resolution, holes),
            MeshSpec::Ball {
                subdivisions,
                radius,
            } => make_ball(subdivisions, radius),
        }
    }

    pub fn label(&self) -> String {
        match *self {
            MeshSpec::Sheet { resolution, holes } => {
                format!("sheet{resolution}{}", if holes { "_holes" } else { "" })
            }
            MeshSpec::Ball { subdivisions, .. } => format!("ball{subdivisions}"),
        }
    }
}

/// Mesh-independent simulation parameters; masses are spread uniformly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhysicsSpec {
    pub dt: f64,
    pub total_mass: f64,
    pub gravity: [f64; 3],
    pub material: MaterialKind,
    pub stretch_stiffness: f64,
    pub bend_stiffness: f64,
    pub stretch_scale: f64,
    pub bend_scale: f64,
    pub lame_ratio: f64,
    pub obstacle: Option<Sphere>,
    pub collision_stiffness: f64,
    pub collision_margin: f64,
    pub newton_rel_tol: f64,
    pub max_newton: usize,
}

impl PhysicsSpec {
    pub fn desk_default(material: MaterialKind) -> Self {
        let c = SimConfig::desk_default(1, material, Vec::new());
        Self {
            dt: c.dt,
            total_mass: c.total_mass(),
            gravity: c.gravity,
            material,
            stretch_stiffness: c.stretch_stiffness,
            bend_stiffness: c.bend_stiffness,
            stretch_scale: c.stretch_scale,
            bend_scale: c.bend_scale,
            lame_ratio: c.lame_ratio,
            obstacle: c.obstacle,
            collision_stiffness: c.collision_stiffness,
            collision_margin: c.collision_margin,
            newton_rel_tol: c.newton_rel_tol,
            max_newton: c.max_newton,
        }
    }

    pub fn sim_config(&self, num_vertices: usize, grasp: Vec<usize>) -> SimConfig {
        SimConfig {
            dt: self.dt,
            mass: vec![self.total_mass / num_vertices as f64; num_vertices],
            gravity: self.gravity,
            material: self.material,
            stretch_stiffness: self.stretch_stiffness,
            bend_stiffness: self.bend_stiffness,
            stretch_scale: self.stretch_scale,
            bend_scale: self.bend_scale,
            lame_ratio: self.lame_ratio,
            obstacle: self.obstacle,
            collision_stiffness: self.collision_stiffness,
            collision_margin: self.collision_margin,
            grasp,
            newton_rel_tol: self.newton_rel_tol,
            max_newton: self.max_newton,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceSpec {
    pub name: String,
    pub trajectory: TrajectoryKind,
    pub amplitude: f64,
    pub period: f64,
}

/// Everything needed to regenerate a set of sequences on one mesh.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub mesh: MeshSpec,
    pub physics: PhysicsSpec,
    pub frames: usize,
    pub seed: u64,
    pub jitter: f64,
    pub sequences: Vec<SequenceSpec>,
}

impl DatasetSpec {
    /// 17×17 sheet, one ±X sequence of amplitude 0.1 m and period 120 frames.
    pub fn desk_sheet(material: MaterialKind, frames: usize) -> Self {
        Self {
            mesh: MeshSpec::Sheet {
                resolution: 17,
                holes: false,
            },
            physics: PhysicsSpec::desk_default(material),
            frames,
            seed: 0,
            jitter: 0.0,
            sequences: vec![SequenceSpec {
                name: "x".into(),
                trajectory: TrajectoryKind::X,
                amplitude: 0.1,
                period: 120.0,
            }],
        }
    }

    pub fn generate_sequence(&self, index: usize) -> Result<Dataset> {
        let seq = self
            .sequences
            .get(index)
            .ok_or_else(|| Error::Config(format!("no sequence {index}")))?;
        let (mesh, grasp) = self.mesh.build()?;
        let cfg = self.physics.sim_config(mesh.num_vertices(), grasp.clone());
        let rest = mesh.quantized().positions();
        let base: Vec<[f64; 3]> = grasp
            .iter()
            .map(|&g| [rest[3 * g], rest[3 * g + 1], rest[3 * g + 2]])
            .collect();
        let motion = trajectory(
            &base,
            seq.trajectory,
            seq.amplitude,
            seq.period,
            self.frames,
        )?;
        let provenance = Provenance {
            generator: format!("shellflow {}", env!("CARGO_PKG_VERSION")),
            mesh_kind: self.mesh.label(),
            trajectory: seq.trajectory,
            amplitude: seq.amplitude,
            period: seq.period,
            seed: self.seed,
            jitter: self.jitter,
        };
        generate(&mesh, &cfg, &motion, self.frames, provenance)
    }

    /// All sequences, generated in parallel.
    pub fn generate_all(&self) -> Result<Vec<Dataset>> {
        use rayon::prelude::*;
        (0..self.sequences.len())
            .into_par_iter()
            .map(|i| self.generate_sequence(i))
            .collect()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    mesh_file: String,
    frames_file: String,
    num_frames: usize,
    num_vertices: usize,
    sim: SimConfig,
    grasp: GraspSet,
    split_rule: String,
    split: Vec<Split>,
    provenance: Provenance,
}

impl Dataset {
    pub fn num_frames(&self) -> usize {
        self.frames.len()
    }

    pub fn frames_of(&self, split: Split) -> Vec<usize> {
        (0..self.frames.len())
            .filter(|&f| self.split[f] == split)
            .collect()
    }

    /// Frame indices `m ≥ 2` whose triple `(m−2, m−1, m)` lies entirely in `split`.
    pub fn triples_in(&self, split: Split) -> Vec<usize> {
        (2..self.frames.len())
            .filter(|&m| (m - 2..=m).all(|f| self.split[f] == split))
            .collect()
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        self.mesh.save_obj(dir.join("mesh.obj"))?;
        write_frames(
            dir.join("frames.bin"),
            &self.frames,
            self.mesh.num_vertices(),
        )?;
        let manifest = Manifest {
            mesh_file: "mesh.obj".into(),
            frames_file: "frames.bin".into(),
            num_frames: self.frames.len(),
            num_vertices: self.mesh.num_vertices(),
            sim: self.cfg.clone(),
            grasp: self.grasp.clone(),
            split_rule: format!("frame mod {SPLIT_PERIOD} < {SPLIT_TRAIN} is train"),
            split: self.split.clone(),
            provenance: self.provenance.clone(),
        };
        write_atomic(
            dir.join("manifest.json"),
            serde_json::to_string_pretty(&manifest)?.as_bytes(),
        )
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let manifest: Manifest =
            serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)?;
        let mesh = TriMesh::load_obj(dir.join(&manifest.mesh_file))?;
        let frames = read_frames(dir.join(&manifest.frames_file))?;
        if mesh.num_vertices() != manifest.num_vertices || frames.len() != manifest.num_frames {
            return Err(Error::Format(
                "manifest does not match mesh or frames".into(),
            ));
        }
        if frames.iter().any(|f| f.len() != 3 * mesh.num_vertices()) {
            return Err(Error::Format("frame width does not match mesh".into()));
        }
        manifest.grasp.validate(mesh.num_vertices(), frames.len())?;
        Ok(Self {
            mesh,
            frames,
            grasp: manifest.grasp,
            cfg: manifest.sim,
            split: manifest.split,
            provenance: manifest.provenance,
        })
    }
}

/// Writes `bytes` to a temporary sibling and renames it into place.
pub fn write_atomic(path: impl AsRef<Path>, bytes: &[u8]) -> Result<()> {
    let path = path.as_ref();
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn write_frames(
    path: impl AsRef<Path>,
    frames: &[Vec<f64>],
    num_vertices: usize,
) -> Result<()> {
    let mut buf = Vec::with_capacity(28 + frames.len() * num_vertices * 24);
    buf.extend_from_slice(FRAMES_MAGIC);
    buf.extend_from_slice(&FRAMES_VERSION.to_le_bytes());
    buf.extend_from_slice(&(frames.len() as u64).to_le_bytes());
    buf.extend_from_slice(&(num_vertices as u64).to_le_bytes());
    for f in frames {
        if f.len() != 3 * num_vertices {
            return Err(Error::ShapeMismatch {
                expected: 3 * num_vertices,
                got: f.len(),
            });
        }
        for v in f {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    write_atomic(path, &buf)
}

pub fn read_frames(path: impl AsRef<Path>) -> Result<Vec<Vec<f64>>> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 28 || &bytes[..8] != FRAMES_MAGIC {
        return Err(Error::Format("bad frames header".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != FRAMES_VERSION {
        return Err(Error::Format(format!(
            "unsupported frames version {version}"
        )));
    }
    let n = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let k = u64::from_le_bytes(bytes[20..28].try_into().unwrap()) as usize;
    let payload = &bytes[28..];
    if payload.len() != n * k * 24 {
        return Err(Error::Format("frames payload has the wrong length".into()));
    }
    Ok(payload
        .chunks_exact(k * 24)
        .map(|frame| {
            frame
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
                .collect()
        })
        .collect())
}
