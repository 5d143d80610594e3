//! Small dense and graph layers with hand-written backward passes, a named
//! parameter store, Adam, and a binary checkpoint format.
//!
//! Matrices are row-major `out × in`. Per-vertex feature blocks are `K × c`
//! row-major (vertex-major).

use std::fs;
use std::io::Read;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::mesh::Adjacency;

const CHECKPOINT_MAGIC: &[u8; 8] = b"SHPARAMS";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<f64>,
}

/// Named tensors in insertion order, with gradient accumulators of the same
/// shapes.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    tensors: Vec<Tensor>,
    grads: Grads,
}

/// Gradient buffers laid out like a [`ParamStore`].
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Grads(Vec<Vec<f64>>);

impl Grads {
    pub fn get(&self, id: ParamId) -> &[f64] {
        &self.0[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.0[id.0]
    }

    /// Mutable access to several distinct tensors at once.
    pub fn many_mut<const N: usize>(&mut self, ids: [ParamId; N]) -> [&mut [f64]; N] {
        self.0
            .get_disjoint_mut(ids.map(|i| i.0))
            .expect("distinct parameter ids")
            .map(|v| v.as_mut_slice())
    }

    pub fn zero(&mut self) {
        for g in &mut self.0 {
            g.fill(0.0);
        }
    }

    /// `self += scale · other`.
    pub fn add_scaled(&mut self, other: &Grads, scale: f64) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += scale * y;
            }
        }
    }

    pub fn flat(&self) -> Vec<f64> {
        self.0.concat()
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().flatten().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().flatten().all(|v| v.is_finite())
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, shape: &[usize], value: Vec<f64>) -> ParamId {
        assert_eq!(
            shape.iter().product::<usize>(),
            value.len(),
            "tensor {name}"
        );
        assert!(self.find(name).is_none(), "duplicate tensor {name}");
        self.grads.0.push(vec![0.0; value.len()]);
        self.tensors.push(Tensor {
            name: name.to_string(),
            shape: shape.to_vec(),
            value,
        });
        ParamId(self.tensors.len() - 1)
    }

    /// Adds a tensor drawn uniformly from `±1/√fan_in`.
    pub fn add_uniform(
        &mut self,
        name: &str,
        shape: &[usize],
        fan_in: usize,
        rng: &mut ChaCha8Rng,
    ) -> ParamId {
        let a = 1.0 / (fan_in.max(1) as f64).sqrt();
        let n = shape.iter().product();
        let value = (0..n)
            .map(|_| a * (2.0 * rng.random::<f64>() - 1.0))
            .collect();
        self.add(name, shape, value)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.tensors
            .iter()
            .position(|t| t.name == name)
            .map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &[f64] {
        &self.tensors[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.tensors[id.0].value
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn grads(&self) -> &Grads {
        &self.grads
    }

    pub fn grads_mut(&mut self) -> &mut Grads {
        &mut self.grads
    }

    pub fn zero_grad(&mut self) {
        self.grads.zero();
    }

    /// Fresh zeroed buffers with this store's layout.
    pub fn zeros_like(&self) -> Grads {
        Grads(
            self.tensors
                .iter()
                .map(|t| vec![0.0; t.value.len()])
                .collect(),
        )
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.value.len()).sum()
    }

    pub fn flat(&self) -> Vec<f64> {
        self.tensors
            .iter()
            .flat_map(|t| t.value.iter().copied())
            .collect()
    }

    pub fn set_flat(&mut self, values: &[f64]) -> Result<()> {
        crate::error::check_len(self.num_scalars(), values.len())?;
        let mut off = 0;
        for t in &mut self.tensors {
            let n = t.value.len();
            t.value.copy_from_slice(&values[off..off + n]);
            off += n;
        }
        Ok(())
    }

    /// Writes the tensors as `magic, version, count, [name, shape]…, payload`,
    /// little-endian, payload in insertion order.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = Vec::with_capacity(16 + 8 * self.num_scalars());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            out.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
            for d in &t.shape {
                out.extend_from_slice(&(*d as u64).to_le_bytes());
            }
        }
        for t in &self.tensors {
            for v in &t.value {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        crate::datagen::write_atomic(path, &out)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut bytes = Vec::new();
        fs::File::open(path.as_ref())?.read_to_end(&mut bytes)?;
        let mut r = ByteReader {
            bytes: &bytes,
            pos: 0,
        };
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err(Error::Format("not a parameter checkpoint".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let count = r.u32()? as usize;
        let mut headers = Vec::with_capacity(count);
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec())
                .map_err(|_| Error::Format("tensor name is not utf-8".into()))?;
            let ndim = r.u32()? as usize;
            let shape = (0..ndim)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            headers.push((name, shape));
        }
        let mut store = ParamStore::new();
        for (name, shape) in headers {
            let n: usize = shape.iter().product();
            let value = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            if store.find(&name).is_some() {
                return Err(Error::Format(format!("duplicate tensor {name}")));
            }
            store.add(&name, &shape, value);
        }
        if r.pos != bytes.len() {
            return Err(Error::Format("trailing bytes in checkpoint".into()));
        }
        Ok(store)
    }

    /// Copies values from `other`, which must hold the same names and shapes.
    pub fn load_values_from(&mut self, other: &ParamStore) -> Result<()> {
        if self.tensors.len() != other.tensors.len() {
            return Err(Error::Format(format!(
                "checkpoint has {} tensors, model expects {}",
                other.tensors.len(),
                self.tensors.len()
            )));
        }
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            if a.name != b.name || a.shape != b.shape {
                return Err(Error::Format(format!(
                    "checkpoint tensor {} {:?} does not match {} {:?}",
                    b.name, b.shape, a.name, a.shape
                )));
            }
            a.value.copy_from_slice(&b.value);
        }
        Ok(())
    }
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format("truncated file".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Elementwise `max(x, slope·x)`.
pub fn leaky_relu(x: &[f64], slope: f64) -> Vec<f64> {
    x.iter()
        .map(|&v| if v > 0.0 { v } else { slope * v })
        .collect()
}

/// Backward of [`leaky_relu`] given the pre-activation `x`.
pub fn leaky_relu_backward(x: &[f64], dy: &[f64], slope: f64) -> Vec<f64> {
    x.iter()
        .zip(dy)
        .map(|(&v, &d)| if v > 0.0 { d } else { slope * d })
        .collect()
}

/// `y = W x + b` with `W` of shape `out × in`.
pub fn fc(w: &[f64], b: &[f64], x: &[f64]) -> Vec<f64> {
    let n_in = x.len();
    debug_assert_eq!(w.len(), b.len() * n_in);
    b.iter()
        .zip(w.chunks_exact(n_in))
        .map(|(bi, row)| bi + dot(row, x))
        .collect()
}

/// Accumulates `dW += dy xᵀ`, `db += dy` and returns `Wᵀ dy`.
pub fn fc_backward(w: &[f64], x: &[f64], dy: &[f64], dw: &mut [f64], db: &mut [f64]) -> Vec<f64> {
    let n_in = x.len();
    let mut dx = vec![0.0; n_in];
    for (o, &d) in dy.iter().enumerate() {
        db[o] += d;
        if d == 0.0 {
            continue;
        }
        let row = &w[o * n_in..(o + 1) * n_in];
        let drow = &mut dw[o * n_in..(o + 1) * n_in];
        for i in 0..n_in {
            drow[i] += d * x[i];
            dx[i] += d * row[i];
        }
    }
    dx
}

/// `y = Wᵀ x + b` for the same `out × in` storage as [`fc`]; `x` has length `out`.
pub fn fc_transpose(w: &[f64], b: &[f64], x: &[f64]) -> Vec<f64> {
    let n_in = b.len();
    debug_assert_eq!(w.len(), x.len() * n_in);
    let mut y = b.to_vec();
    for (o, &xo) in x.iter().enumerate() {
        if xo == 0.0 {
            continue;
        }
        for (yi, wi) in y.iter_mut().zip(&w[o * n_in..(o + 1) * n_in]) {
            *yi += xo * wi;
        }
    }
    y
}

/// Accumulates `dW += x dyᵀ`, `db += dy` and returns `W dy`.
pub fn fc_transpose_backward(
    w: &[f64],
    x: &[f64],
    dy: &[f64],
    dw: &mut [f64],
    db: &mut [f64],
) -> Vec<f64> {
    let n_in = dy.len();
    for (a, d) in db.iter_mut().zip(dy) {
        *a += d;
    }
    let mut dx = vec![0.0; x.len()];
    for (o, &xo) in x.iter().enumerate() {
        let row = &w[o * n_in..(o + 1) * n_in];
        let drow = &mut dw[o * n_in..(o + 1) * n_in];
        for i in 0..n_in {
            drow[i] += xo * dy[i];
        }
        dx[o] = dot(row, dy);
    }
    dx
}

/// 1-ring structure used by the graph convolution.
#[derive(Debug, Clone, PartialEq)]
pub struct Graph {
    neighbors: Vec<Vec<usize>>,
    inv_degree: Vec<f64>,
}

impl Graph {
    pub fn from_adjacency(adj: &Adjacency) -> Self {
        Self::from_neighbors(adj.one_ring.clone())
    }

    /// `neighbors` must be symmetric.
    pub fn from_neighbors(neighbors: Vec<Vec<usize>>) -> Self {
        let inv_degree = neighbors
            .iter()
            .map(|n| {
                if n.is_empty() {
                    0.0
                } else {
                    1.0 / n.len() as f64
                }
            })
            .collect();
        Self {
            neighbors,
            inv_degree,
        }
    }

    pub fn num_vertices(&self) -> usize {
        self.neighbors.len()
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighbors[i]
    }

    /// Per-vertex mean of the 1-ring rows of `x` (`K × c`); zero for isolated vertices.
    fn ring_mean(&self, x: &[f64], c: usize) -> Vec<f64> {
        let mut out = vec![0.0; x.len()];
        for (i, ring) in self.neighbors.iter().enumerate() {
            let o = &mut out[i * c..(i + 1) * c];
            for &j in ring {
                for (a, b) in o.iter_mut().zip(&x[j * c..(j + 1) * c]) {
                    *a += b;
                }
            }
            for a in o.iter_mut() {
                *a *= self.inv_degree[i];
            }
        }
        out
    }

    /// Transpose of [`Graph::ring_mean`]: row `i` gathers `x_j / |N_j|` over `j ∈ N_i`.
    fn ring_mean_transpose(&self, x: &[f64], c: usize) -> Vec<f64> {
        let mut out = vec![0.0; x.len()];
        for (i, ring) in self.neighbors.iter().enumerate() {
            let o = &mut out[i * c..(i + 1) * c];
            for &j in ring {
                let s = self.inv_degree[j];
                for (a, b) in o.iter_mut().zip(&x[j * c..(j + 1) * c]) {
                    *a += s * b;
                }
            }
        }
        out
    }
}

/// Weights of one graph convolution; `w` and `w_nbr` are `c_out × c_in`.
#[derive(Debug, Clone, Copy)]
pub struct ConvWeights<'a> {
    pub w: &'a [f64],
    pub w_nbr: &'a [f64],
    pub c_in: usize,
    pub c_out: usize,
}

fn rows_times_transpose(x: &[f64], w: &[f64], c_in: usize, c_out: usize, out: &mut [f64]) {
    // out_i += W x_i for every row i
    for (xi, oi) in x.chunks_exact(c_in).zip(out.chunks_exact_mut(c_out)) {
        for (o, row) in oi.iter_mut().zip(w.chunks_exact(c_in)) {
            *o += dot(row, xi);
        }
    }
}

fn rows_times(x: &[f64], w: &[f64], c_in: usize, c_out: usize, out: &mut [f64]) {
    // out_i += Wᵀ x_i for every row i
    for (xi, oi) in x.chunks_exact(c_out).zip(out.chunks_exact_mut(c_in)) {
        for (a, row) in xi.iter().zip(w.chunks_exact(c_in)) {
            for (o, wv) in oi.iter_mut().zip(row) {
                *o += a * wv;
            }
        }
    }
}

fn outer_accumulate(a: &[f64], b: &[f64], ca: usize, cb: usize, dw: &mut [f64]) {
    // dw (ca × cb) += Σ_i a_i b_iᵀ
    for (ai, bi) in a.chunks_exact(ca).zip(b.chunks_exact(cb)) {
        for (r, av) in ai.iter().enumerate() {
            if *av == 0.0 {
                continue;
            }
            for (d, bv) in dw[r * cb..(r + 1) * cb].iter_mut().zip(bi) {
                *d += av * bv;
            }
        }
    }
}

/// `y_i = W x_i + W_N · mean_{j∈N_i} x_j + b`.
pub fn graph_conv(g: &Graph, x: &[f64], p: ConvWeights, b: &[f64]) -> Vec<f64> {
    let k = g.num_vertices();
    debug_assert_eq!(x.len(), k * p.c_in);
    let mut y: Vec<f64> = (0..k).flat_map(|_| b.iter().copied()).collect();
    rows_times_transpose(x, p.w, p.c_in, p.c_out, &mut y);
    let m = g.ring_mean(x, p.c_in);
    rows_times_transpose(&m, p.w_nbr, p.c_in, p.c_out, &mut y);
    y
}

/// Backward of [`graph_conv`]; accumulates weight and bias gradients and returns `dx`.
pub fn graph_conv_backward(
    g: &Graph,
    x: &[f64],
    dy: &[f64],
    p: ConvWeights,
    dw: &mut [f64],
    dw_nbr: &mut [f64],
    db: &mut [f64],
) -> Vec<f64> {
    let m = g.ring_mean(x, p.c_in);
    outer_accumulate(dy, x, p.c_out, p.c_in, dw);
    outer_accumulate(dy, &m, p.c_out, p.c_in, dw_nbr);
    for dyi in dy.chunks_exact(p.c_out) {
        for (a, b) in db.iter_mut().zip(dyi) {
            *a += b;
        }
    }
    let mut dx = vec![0.0; x.len()];
    rows_times(dy, p.w, p.c_in, p.c_out, &mut dx);
    let mut dm = vec![0.0; x.len()];
    rows_times(dy, p.w_nbr, p.c_in, p.c_out, &mut dm);
    for (a, b) in dx.iter_mut().zip(g.ring_mean_transpose(&dm, p.c_in)) {
        *a += b;
    }
    dx
}

/// Exact transpose of the linear part of [`graph_conv`] plus its own bias:
/// input `K × c_out`, output `K × c_in`.
pub fn graph_conv_transpose(g: &Graph, x: &[f64], p: ConvWeights, b: &[f64]) -> Vec<f64> {
    let k = g.num_vertices();
    debug_assert_eq!(x.len(), k * p.c_out);
    let mut y: Vec<f64> = (0..k).flat_map(|_| b.iter().copied()).collect();
    rows_times(x, p.w, p.c_in, p.c_out, &mut y);
    let mut t = vec![0.0; k * p.c_in];
    rows_times(x, p.w_nbr, p.c_in, p.c_out, &mut t);
    for (a, v) in y.iter_mut().zip(g.ring_mean_transpose(&t, p.c_in)) {
        *a += v;
    }
    y
}

/// Backward of [`graph_conv_transpose`].
pub fn graph_conv_transpose_backward(
    g: &Graph,
    x: &[f64],
    dy: &[f64],
    p: ConvWeights,
    dw: &mut [f64],
    dw_nbr: &mut [f64],
    db: &mut [f64],
) -> Vec<f64> {
    for dyi in dy.chunks_exact(p.c_in) {
        for (a, b) in db.iter_mut().zip(dyi) {
            *a += b;
        }
    }
    // y = Wᵀx + Mᵀ(W_Nᵀ x) where M is the ring mean.
    outer_accumulate(x, dy, p.c_out, p.c_in, dw);
    let m_dy = g.ring_mean(dy, p.c_in);
    outer_accumulate(x, &m_dy, p.c_out, p.c_in, dw_nbr);
    let mut dx = vec![0.0; x.len()];
    rows_times_transpose(dy, p.w, p.c_in, p.c_out, &mut dx);
    rows_times_transpose(&m_dy, p.w_nbr, p.c_in, p.c_out, &mut dx);
    dx
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Learning-rate multiplier applied once per epoch.
    pub lr_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            lr_decay: 1.0,
        }
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub cfg: AdamConfig,
    lr: f64,
    step: u64,
    m: Grads,
    v: Grads,
}

impl Adam {
    pub fn new(store: &ParamStore, cfg: AdamConfig) -> Self {
        Self {
            cfg,
            lr: cfg.lr,
            step: 0,
            m: store.zeros_like(),
            v: store.zeros_like(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    /// Sets the learning rate for 1-based `epoch`: `lr · lr_decay^(epoch − 1)`.
    pub fn set_epoch(&mut self, epoch: usize) {
        self.lr = self.cfg.lr * self.cfg.lr_decay.powi(epoch.saturating_sub(1) as i32);
    }

    /// Applies one update from the store's accumulated gradients.
    pub fn step(&mut self, store: &mut ParamStore) {
        self.step += 1;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let tensors = store.tensors.iter_mut();
        for (((t, g), m), v) in tensors
            .zip(&store.grads.0)
            .zip(&mut self.m.0)
            .zip(&mut self.v.0)
        {
            for i in 0..t.value.len() {
                let gi = g[i];
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * gi;
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * gi * gi;
                t.value[i] -= self.lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + c.eps);
            }
        }
    }
}
