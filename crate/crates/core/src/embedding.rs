//! Weight-tied graph-convolutional autoencoder over ACAP features, its
//! training losses, first-stage training and latent-space inverse kinematics.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::acap::{AcapReference, PoissonSolver, FEATURE_WIDTH};
use crate::datagen::{test_windows, Dataset, Split, SPLIT_PERIOD, SPLIT_TRAIN};
use crate::error::{check_len, Error, Result};
use crate::metrics::{m_phys_mean, m_rms, Metrics, Sted, StedConfig};
use crate::nn::{self, Adam, AdamConfig, ConvWeights, Grads, Graph, ParamId, ParamStore};
use crate::sim::{ShellSim, SimConfig, TermMask};
use crate::TriMesh;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AutoencoderConfig {
    pub latent_dim: usize,
    /// Output channels of each graph convolution; the input has 9.
    pub conv_channels: Vec<usize>,
    pub leaky_slope: f64,
    pub seed: u64,
    /// Lower bound on per-channel standard deviations used for normalization.
    pub std_floor: f64,
}

impl Default for AutoencoderConfig {
    fn default() -> Self {
        Self {
            latent_dim: 128,
            conv_channels: vec![9, 9],
            leaky_slope: 0.1,
            seed: 0,
            std_floor: 1e-3,
        }
    }
}

/// Per-channel affine normalization of features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalizer {
    pub fn identity() -> Self {
        Self {
            mean: vec![0.0; FEATURE_WIDTH],
            std: vec![1.0; FEATURE_WIDTH],
        }
    }

    pub fn fit<'a>(features: impl IntoIterator<Item = &'a [f64]>, floor: f64) -> Self {
        let mut sum = [0.0; FEATURE_WIDTH];
        let mut sq = [0.0; FEATURE_WIDTH];
        let mut n = 0usize;
        for f in features {
            for v in f.chunks_exact(FEATURE_WIDTH) {
                for c in 0..FEATURE_WIDTH {
                    sum[c] += v[c];
                    sq[c] += v[c] * v[c];
                }
                n += 1;
            }
        }
        if n == 0 {
            return Self::identity();
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
        let std = (0..FEATURE_WIDTH)
            .map(|c| {
                (sq[c] / n as f64 - mean[c] * mean[c])
                    .max(0.0)
                    .sqrt()
                    .max(floor)
            })
            .collect();
        Self { mean, std }
    }
}

#[derive(Debug, Clone)]
struct ConvIds {
    w: ParamId,
    w_nbr: ParamId,
    b: ParamId,
    b_t: ParamId,
}

/// Encoder `F ∘ C_L ∘ … ∘ C_1` and decoder `C_1ᵀ ∘ … ∘ C_Lᵀ ∘ Fᵀ` sharing weights.
#[derive(Debug, Clone)]
pub struct Autoencoder {
    pub cfg: AutoencoderConfig,
    pub norm: Normalizer,
    pub store: ParamStore,
    graph: Graph,
    k: usize,
    channels: Vec<usize>,
    convs: Vec<ConvIds>,
    fc_w: ParamId,
    fc_b: ParamId,
    fc_b_t: ParamId,
}

#[derive(Debug, Clone)]
pub struct EncodeCache {
    conv_in: Vec<Vec<f64>>,
    conv_pre: Vec<Vec<f64>>,
    fc_in: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct DecodeCache {
    z: Vec<f64>,
    fc_pre: Vec<f64>,
    /// Input and pre-activation of each transposed convolution, by layer index.
    conv_in: Vec<Vec<f64>>,
    conv_pre: Vec<Vec<f64>>,
}

impl Autoencoder {
    pub fn new(
        adjacency: &crate::Adjacency,
        cfg: AutoencoderConfig,
        norm: Normalizer,
    ) -> Result<Self> {
        if cfg.latent_dim == 0 || cfg.conv_channels.contains(&0) {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        if !(cfg.leaky_slope >= 0.0 && cfg.leaky_slope < 1.0) {
            return Err(Error::Config("leaky slope must lie in [0, 1)".into()));
        }
        check_len(FEATURE_WIDTH, norm.mean.len())?;
        check_len(FEATURE_WIDTH, norm.std.len())?;
        let k = adjacency.num_vertices();
        let graph = Graph::from_adjacency(adjacency);
        let mut channels = vec![FEATURE_WIDTH];
        channels.extend(&cfg.conv_channels);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut store = ParamStore::new();
        let mut convs = Vec::new();
        for l in 0..cfg.conv_channels.len() {
            let (ci, co) = (channels[l], channels[l + 1]);
            let fan_in = 2 * ci;
            convs.push(ConvIds {
                w: store.add_uniform(&format!("conv{l}.w"), &[co, ci], fan_in, &mut rng),
                w_nbr: store.add_uniform(&format!("conv{l}.w_nbr"), &[co, ci], fan_in, &mut rng),
                b: store.add(&format!("conv{l}.b"), &[co], vec![0.0; co]),
                b_t: store.add(&format!("conv{l}.b_t"), &[ci], vec![0.0; ci]),
            });
        }
        let flat = k * channels.last().unwrap();
        let fc_w = store.add_uniform("fc.w", &[cfg.latent_dim, flat], flat, &mut rng);
        let fc_b = store.add("fc.b", &[cfg.latent_dim], vec![0.0; cfg.latent_dim]);
        let fc_b_t = store.add("fc.b_t", &[flat], vec![0.0; flat]);
        Ok(Self {
            cfg,
            norm,
            store,
            graph,
            k,
            channels,
            convs,
            fc_w,
            fc_b,
            fc_b_t,
        })
    }

    pub fn num_vertices(&self) -> usize {
        self.k
    }

    pub fn latent_dim(&self) -> usize {
        self.cfg.latent_dim
    }

    fn conv(&self, l: usize) -> ConvWeights<'_> {
        ConvWeights {
            w: self.store.get(self.convs[l].w),
            w_nbr: self.store.get(self.convs[l].w_nbr),
            c_in: self.channels[l],
            c_out: self.channels[l + 1],
        }
    }

    pub fn encode(&self, feat: &[f64]) -> Result<Vec<f64>> {
        Ok(self.encode_cached(feat)?.0)
    }

    pub fn encode_cached(&self, feat: &[f64]) -> Result<(Vec<f64>, EncodeCache)> {
        check_len(FEATURE_WIDTH * self.k, feat.len())?;
        let slope = self.cfg.leaky_slope;
        let mut h: Vec<f64> = feat
            .iter()
            .enumerate()
            .map(|(i, v)| {
                let c = i % FEATURE_WIDTH;
                (v - self.norm.mean[c]) / self.norm.std[c]
            })
            .collect();
        let mut conv_in = Vec::new();
        let mut conv_pre = Vec::new();
        for l in 0..self.convs.len() {
            let a = nn::graph_conv(
                &self.graph,
                &h,
                self.conv(l),
                self.store.get(self.convs[l].b),
            );
            conv_in.push(h);
            h = nn::leaky_relu(&a, slope);
            conv_pre.push(a);
        }
        let z = nn::fc(self.store.get(self.fc_w), self.store.get(self.fc_b), &h);
        Ok((
            z,
            EncodeCache {
                conv_in,
                conv_pre,
                fc_in: h,
            },
        ))
    }

    /// Accumulates parameter gradients for upstream `dz`.
    pub fn encode_backward(&self, cache: &EncodeCache, dz: &[f64], grads: &mut Grads) {
        let slope = self.cfg.leaky_slope;
        let [dw, db] = grads.many_mut([self.fc_w, self.fc_b]);
        let mut dh = nn::fc_backward(self.store.get(self.fc_w), &cache.fc_in, dz, dw, db);
        for l in (0..self.convs.len()).rev() {
            let da = nn::leaky_relu_backward(&cache.conv_pre[l], &dh, slope);
            let ids = &self.convs[l];
            let [dw, dwn, db] = grads.many_mut([ids.w, ids.w_nbr, ids.b]);
            dh = nn::graph_conv_backward(
                &self.graph,
                &cache.conv_in[l],
                &da,
                self.conv(l),
                dw,
                dwn,
                db,
            );
        }
    }

    pub fn decode(&self, z: &[f64]) -> Result<Vec<f64>> {
        Ok(self.decode_cached(z)?.0)
    }

    pub fn decode_cached(&self, z: &[f64]) -> Result<(Vec<f64>, DecodeCache)> {
        check_len(self.cfg.latent_dim, z.len())?;
        let slope = self.cfg.leaky_slope;
        let n = self.convs.len();
        let fc_pre = nn::fc_transpose(self.store.get(self.fc_w), self.store.get(self.fc_b_t), z);
        let mut h = nn::leaky_relu(&fc_pre, slope);
        let mut conv_in = vec![Vec::new(); n];
        let mut conv_pre = vec![Vec::new(); n];
        for l in (0..n).rev() {
            let a = nn::graph_conv_transpose(
                &self.graph,
                &h,
                self.conv(l),
                self.store.get(self.convs[l].b_t),
            );
            conv_in[l] = std::mem::take(&mut h);
            h = if l > 0 {
                nn::leaky_relu(&a, slope)
            } else {
                a.clone()
            };
            conv_pre[l] = a;
        }
        let out = h
            .iter()
            .enumerate()
            .map(|(i, v)| {
                let c = i % FEATURE_WIDTH;
                v * self.norm.std[c] + self.norm.mean[c]
            })
            .collect();
        Ok((
            out,
            DecodeCache {
                z: z.to_vec(),
                fc_pre,
                conv_in,
                conv_pre,
            },
        ))
    }

    /// Accumulates parameter gradients (when `grads` is given) and returns `dz`.
    pub fn decode_backward(
        &self,
        cache: &DecodeCache,
        dfeat: &[f64],
        grads: Option<&mut Grads>,
    ) -> Vec<f64> {
        let slope = self.cfg.leaky_slope;
        let n = self.convs.len();
        let mut scratch = self.store.zeros_like();
        let g: &mut Grads = match grads {
            Some(g) => g,
            None => &mut scratch,
        };
        let mut d: Vec<f64> = dfeat
            .iter()
            .enumerate()
            .map(|(i, v)| v * self.norm.std[i % FEATURE_WIDTH])
            .collect();
        for l in 0..n {
            let ids = &self.convs[l];
            let [dw, dwn, db] = g.many_mut([ids.w, ids.w_nbr, ids.b_t]);
            let dh = nn::graph_conv_transpose_backward(
                &self.graph,
                &cache.conv_in[l],
                &d,
                self.conv(l),
                dw,
                dwn,
                db,
            );
            let pre = if l + 1 < n {
                &cache.conv_pre[l + 1]
            } else {
                &cache.fc_pre
            };
            d = nn::leaky_relu_backward(pre, &dh, slope);
        }
        let [dw, db] = g.many_mut([self.fc_w, self.fc_b_t]);
        nn::fc_transpose_backward(self.store.get(self.fc_w), &cache.z, &d, dw, db)
    }
}

/// Everything needed to turn features back into positions and score them
/// physically, for one mesh and grasp set.
#[derive(Debug)]
pub struct ShellContext {
    pub reference: AcapReference,
    pub solver: PoissonSolver,
    pub sim: ShellSim,
    pub adjacency: crate::Adjacency,
}

impl ShellContext {
    pub fn new(mesh: &TriMesh, cfg: &SimConfig) -> Result<Self> {
        let reference = AcapReference::new(mesh)?;
        let solver = PoissonSolver::new(&reference, &cfg.grasp)?;
        let sim = ShellSim::new(mesh, cfg.clone())?;
        let adjacency = reference.adjacency().clone();
        Ok(Self {
            reference,
            solver,
            sim,
            adjacency,
        })
    }

    pub fn for_dataset(data: &Dataset) -> Result<Self> {
        Self::new(&data.mesh, &data.cfg)
    }

    /// ACAP features of every frame, in frame order.
    pub fn features(&self, frames: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        frames
            .par_iter()
            .map(|p| self.reference.forward(p))
            .collect()
    }

    pub fn reconstruct(&self, feat: &[f64], q: &[[f64; 3]]) -> Result<Vec<f64>> {
        self.solver.inverse(&self.reference, feat, q)
    }

    pub fn reconstruct_vjp(&self, feat: &[f64], upstream: &[f64]) -> Result<Vec<f64>> {
        self.solver.inverse_vjp(&self.reference, feat, upstream)
    }
}

/// Decoded features and positions for one latent code.
#[derive(Debug, Clone)]
pub struct Decoded {
    pub feat: Vec<f64>,
    pub positions: Vec<f64>,
    pub cache: DecodeCache,
}

pub fn decode_positions(
    ae: &Autoencoder,
    ctx: &ShellContext,
    z: &[f64],
    q: &[[f64; 3]],
) -> Result<Decoded> {
    let (feat, cache) = ae.decode_cached(z)?;
    let positions = ctx.reconstruct(&feat, q)?;
    Ok(Decoded {
        feat,
        positions,
        cache,
    })
}

/// `dz` of a position-space upstream through reconstruction and the decoder.
pub fn decode_positions_backward(
    ae: &Autoencoder,
    ctx: &ShellContext,
    d: &Decoded,
    dpos: &[f64],
    dfeat_extra: Option<&[f64]>,
    grads: Option<&mut Grads>,
) -> Result<Vec<f64>> {
    let mut dfeat = ctx.reconstruct_vjp(&d.feat, dpos)?;
    if let Some(extra) = dfeat_extra {
        for (a, b) in dfeat.iter_mut().zip(extra) {
            *a += b;
        }
    }
    Ok(ae.decode_backward(&d.cache, &dfeat, grads))
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Mean of `‖D(E(x)) − x‖²` over `features`.
pub fn loss_recon(ae: &Autoencoder, features: &[&[f64]]) -> Result<f64> {
    let mut s = 0.0;
    for x in features {
        s += sq_dist(&ae.decode(&ae.encode(x)?)?, x);
    }
    Ok(s / features.len().max(1) as f64)
}

/// Mean of `‖ACAP⁻¹(D(E(x)), q) − p‖²` over frames.
pub fn loss_vert(
    ae: &Autoencoder,
    ctx: &ShellContext,
    features: &[&[f64]],
    positions: &[&[f64]],
    targets: &[&[[f64; 3]]],
) -> Result<f64> {
    let mut s = 0.0;
    for ((x, p), q) in features.iter().zip(positions).zip(targets) {
        let d = decode_positions(ae, ctx, &ae.encode(x)?, q)?;
        s += sq_dist(&d.positions, p);
    }
    Ok(s / features.len().max(1) as f64)
}

/// `L_phys` on the reconstructions of a frame triple (oldest first).
pub fn loss_ephys(
    ae: &Autoencoder,
    ctx: &ShellContext,
    features: [&[f64]; 3],
    targets: [&[[f64; 3]]; 3],
) -> Result<f64> {
    let mut p = Vec::with_capacity(3);
    for (x, q) in features.iter().zip(targets) {
        p.push(decode_positions(ae, ctx, &ae.encode(x)?, q)?.positions);
    }
    ctx.sim.physics_loss(&p[0], &p[1], &p[2])
}

/// Gradients of [`loss_ephys`] with respect to the three latent codes; the
/// first two are cut off, so only the newest frame receives a gradient.
pub fn loss_ephys_latent_gradients(
    ae: &Autoencoder,
    ctx: &ShellContext,
    latents: [&[f64]; 3],
    targets: [&[[f64; 3]]; 3],
) -> Result<(f64, [Vec<f64>; 3])> {
    let d0 = decode_positions(ae, ctx, latents[0], targets[0])?;
    let d1 = decode_positions(ae, ctx, latents[1], targets[1])?;
    let d2 = decode_positions(ae, ctx, latents[2], targets[2])?;
    let loss = ctx
        .sim
        .physics_loss(&d0.positions, &d1.positions, &d2.positions)?;
    let dp = ctx
        .sim
        .physics_gradient(&d0.positions, &d1.positions, &d2.positions)?;
    let dz = decode_positions_backward(ae, ctx, &d2, &dp, None, None)?;
    let zeros = vec![0.0; ae.latent_dim()];
    Ok((loss, [zeros.clone(), zeros, dz]))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage1Config {
    pub lambda_recon: f64,
    pub lambda_vert: f64,
    pub lambda_ephys: f64,
    pub adam: AdamConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Self {
            lambda_recon: 1.0,
            lambda_vert: 1.0,
            lambda_ephys: 0.5,
            adam: AdamConfig::default(),
            epochs: 200,
            batch_size: 8,
            seed: 0,
        }
    }
}

impl Stage1Config {
    pub fn validate(&self) -> Result<()> {
        let l = [self.lambda_recon, self.lambda_vert, self.lambda_ephys];
        if l.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(Error::Config(
                "loss weights must be finite and non-negative".into(),
            ));
        }
        validate_common(self.batch_size, &self.adam)
    }
}

pub(crate) fn validate_common(batch_size: usize, adam: &AdamConfig) -> Result<()> {
    if batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    if !(adam.lr > 0.0)
        || !(0.0..1.0).contains(&adam.beta1)
        || !(0.0..1.0).contains(&adam.beta2)
        || !(adam.eps > 0.0)
        || !(adam.lr_decay > 0.0 && adam.lr_decay <= 1.0)
    {
        return Err(Error::Config("invalid optimizer settings".into()));
    }
    Ok(())
}

/// Per-epoch loss components for each split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub columns: Vec<String>,
    pub rows: Vec<HistoryRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub epoch: usize,
    pub split: Split,
    pub values: Vec<f64>,
}

impl History {
    pub fn new(columns: &[&str]) -> Self {
        Self {
            columns: columns.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, epoch: usize, split: Split, values: Vec<f64>) {
        debug_assert_eq!(values.len(), self.columns.len());
        self.rows.push(HistoryRow {
            epoch,
            split,
            values,
        });
    }

    /// Value of `column` in the last row for `split`.
    pub fn last(&self, split: Split, column: &str) -> Option<f64> {
        let c = self.columns.iter().position(|x| x == column)?;
        self.rows
            .iter()
            .rev()
            .find(|r| r.split == split)
            .map(|r| r.values[c])
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("epoch,split,{}\n", self.columns.join(","));
        for r in &self.rows {
            let split = match r.split {
                Split::Train => "train",
                Split::Test => "test",
            };
            let vals: Vec<String> = r.values.iter().map(|v| format!("{v:e}")).collect();
            s.push_str(&format!("{},{},{}\n", r.epoch, split, vals.join(",")));
        }
        s
    }
}

/// Data shared by the training stages: frames, their features and targets.
#[derive(Debug)]
pub struct TrainingData<'a> {
    pub data: &'a Dataset,
    pub ctx: &'a ShellContext,
    pub features: Vec<Vec<f64>>,
}

impl<'a> TrainingData<'a> {
    pub fn new(data: &'a Dataset, ctx: &'a ShellContext) -> Result<Self> {
        check_len(ctx.sim.num_vertices(), data.mesh.num_vertices())?;
        if ctx.solver.grasp() != data.grasp.indices.as_slice() {
            return Err(Error::Config(
                "context grasp set does not match the dataset".into(),
            ));
        }
        let features = ctx.features(&data.frames)?;
        Ok(Self {
            data,
            ctx,
            features,
        })
    }

    pub fn targets(&self, frame: usize) -> &[[f64; 3]] {
        self.data.grasp.targets(frame)
    }

    /// Normalizer fitted to the training frames.
    pub fn fit_normalizer(&self, floor: f64) -> Normalizer {
        let train = self.data.frames_of(Split::Train);
        Normalizer::fit(train.iter().map(|&f| self.features[f].as_slice()), floor)
    }
}

struct Stage1Sample {
    recon: f64,
    vert: f64,
    ephys: Option<f64>,
    grads: Option<Grads>,
}

/// Loss components for frame `f` and, when `ephys` is set, the triple ending
/// at `f`. With `weights`, also returns weighted parameter gradients.
fn stage1_sample(
    ae: &Autoencoder,
    td: &TrainingData,
    f: usize,
    ephys: bool,
    weights: Option<[f64; 3]>,
) -> Result<Stage1Sample> {
    let ctx = td.ctx;
    let x = &td.features[f];
    let (z, enc) = ae.encode_cached(x)?;
    let d = decode_positions(ae, ctx, &z, td.targets(f))?;
    let recon = sq_dist(&d.feat, x);
    let p = &td.data.frames[f];
    let vert = sq_dist(&d.positions, p);
    let mut ephys_val = None;
    let mut dphys = None;
    if ephys {
        let prev: Vec<Vec<f64>> = [f - 2, f - 1]
            .iter()
            .map(|&g| {
                Ok(
                    decode_positions(ae, ctx, &ae.encode(&td.features[g])?, td.targets(g))?
                        .positions,
                )
            })
            .collect::<Result<_>>()?;
        ephys_val = Some(ctx.sim.physics_loss(&prev[0], &prev[1], &d.positions)?);
        if weights.is_some() {
            dphys = Some(ctx.sim.physics_gradient(&prev[0], &prev[1], &d.positions)?);
        }
    }
    let grads = match weights {
        None => None,
        Some([wr, wv, we]) => {
            let mut g = ae.store.zeros_like();
            let mut dpos: Vec<f64> = d
                .positions
                .iter()
                .zip(p)
                .map(|(a, b)| 2.0 * wv * (a - b))
                .collect();
            if let Some(dp) = &dphys {
                for (a, b) in dpos.iter_mut().zip(dp) {
                    *a += we * b;
                }
            }
            let dfeat: Vec<f64> = d
                .feat
                .iter()
                .zip(x)
                .map(|(a, b)| 2.0 * wr * (a - b))
                .collect();
            let dz = decode_positions_backward(ae, ctx, &d, &dpos, Some(&dfeat), Some(&mut g))?;
            ae.encode_backward(&enc, &dz, &mut g);
            Some(g)
        }
    };
    Ok(Stage1Sample {
        recon,
        vert,
        ephys: ephys_val,
        grads,
    })
}

/// Frames `m` whose triple `(m−2, m−1, m)` is entirely in `split`.
fn triple_set(data: &Dataset, split: Split) -> Vec<bool> {
    let mut is = vec![false; data.num_frames()];
    for m in data.triples_in(split) {
        is[m] = true;
    }
    is
}

/// Mean recon, vert and ephys losses on `split` plus the weighted total.
pub fn stage1_losses(
    ae: &Autoencoder,
    td: &TrainingData,
    split: Split,
    cfg: &Stage1Config,
) -> Result<[f64; 4]> {
    let frames = td.data.frames_of(split);
    let triples = triple_set(td.data, split);
    let samples: Vec<Stage1Sample> = frames
        .par_iter()
        .map(|&f| stage1_sample(ae, td, f, triples[f], None))
        .collect::<Result<_>>()?;
    let n = samples.len().max(1) as f64;
    let recon = samples.iter().map(|s| s.recon).sum::<f64>() / n;
    let vert = samples.iter().map(|s| s.vert).sum::<f64>() / n;
    let e: Vec<f64> = samples.iter().filter_map(|s| s.ephys).collect();
    let ephys = if e.is_empty() {
        0.0
    } else {
        e.iter().sum::<f64>() / e.len() as f64
    };
    let total = cfg.lambda_recon * recon + cfg.lambda_vert * vert + cfg.lambda_ephys * ephys;
    Ok([recon, vert, ephys, total])
}

/// Weighted stage-1 loss on one batch of frames and its parameter gradient.
pub fn stage1_batch(
    ae: &Autoencoder,
    td: &TrainingData,
    batch: &[usize],
    cfg: &Stage1Config,
) -> Result<(f64, Grads)> {
    let triples = triple_set(td.data, Split::Train);
    let use_ephys = cfg.lambda_ephys > 0.0;
    let n = batch.len() as f64;
    let n_e = batch
        .iter()
        .filter(|&&f| use_ephys && triples[f])
        .count()
        .max(1) as f64;
    let w = [
        cfg.lambda_recon / n,
        cfg.lambda_vert / n,
        cfg.lambda_ephys / n_e,
    ];
    let samples: Vec<Stage1Sample> = batch
        .par_iter()
        .map(|&f| stage1_sample(ae, td, f, use_ephys && triples[f], Some(w)))
        .collect::<Result<_>>()?;
    let mut grads = ae.store.zeros_like();
    let mut loss = 0.0;
    for s in &samples {
        grads.add_scaled(s.grads.as_ref().unwrap(), 1.0);
        loss += w[0] * s.recon + w[1] * s.vert + w[2] * s.ephys.unwrap_or(0.0);
    }
    Ok((loss, grads))
}

pub const STAGE1_COLUMNS: [&str; 4] = ["recon", "vert", "ephys", "total"];

/// Deterministic shuffled batches of `items`.
pub(crate) fn batches(items: &[usize], size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut v = items.to_vec();
    v.shuffle(rng);
    v.chunks(size).map(|c| c.to_vec()).collect()
}

pub(crate) fn check_finite(epoch: usize, what: &str, v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::TrainingDiverged {
            epoch,
            detail: format!("{what} is {v}"),
        })
    }
}

/// Adam over shuffled training frames; logs train and test losses per epoch
/// (epoch 0 is before any update).
pub fn train_stage1(
    ae: &mut Autoencoder,
    td: &TrainingData,
    cfg: &Stage1Config,
) -> Result<History> {
    cfg.validate()?;
    let train = td.data.frames_of(Split::Train);
    if train.is_empty() {
        return Err(Error::Config("dataset has no training frames".into()));
    }
    let mut history = History::new(&STAGE1_COLUMNS);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Adam::new(&ae.store, cfg.adam);
    let has_test = !td.data.frames_of(Split::Test).is_empty();
    let log = |ae: &Autoencoder, epoch: usize, h: &mut History| -> Result<()> {
        let tr = stage1_losses(ae, td, Split::Train, cfg)?;
        check_finite(epoch, "training loss", tr[3])?;
        h.push(epoch, Split::Train, tr.to_vec());
        if has_test {
            h.push(
                epoch,
                Split::Test,
                stage1_losses(ae, td, Split::Test, cfg)?.to_vec(),
            );
        }
        Ok(())
    };
    log(ae, 0, &mut history)?;
    for epoch in 1..=cfg.epochs {
        opt.set_epoch(epoch);
        for batch in batches(&train, cfg.batch_size, &mut rng) {
            let (loss, grads) = stage1_batch(ae, td, &batch, cfg)?;
            check_finite(epoch, "batch loss", loss)?;
            if !grads.is_finite() {
                return Err(Error::TrainingDiverged {
                    epoch,
                    detail: "non-finite gradient".into(),
                });
            }
            *ae.store.grads_mut() = grads;
            opt.step(&mut ae.store);
        }
        log(ae, epoch, &mut history)?;
    }
    Ok(history)
}

/// Windows of consecutive frames on which STED is scored for `split`.
pub fn sted_windows(n_frames: usize, split: Split) -> Vec<std::ops::Range<usize>> {
    match split {
        Split::Test => test_windows(n_frames),
        Split::Train => (0..n_frames)
            .step_by(SPLIT_PERIOD)
            .map(|b| b..(b + SPLIT_TRAIN).min(n_frames))
            .filter(|r| r.len() >= 2)
            .collect(),
    }
}

/// Metrics of `candidate` against the dataset frames on `split`: RMS over
/// the split's frames, STED over its windows, physics residual over its triples.
pub fn split_metrics(
    td: &TrainingData,
    candidate: &[Vec<f64>],
    split: Split,
    sted: &StedConfig,
) -> Result<Metrics> {
    let data = td.data;
    check_len(data.num_frames(), candidate.len())?;
    let frames = data.frames_of(split);
    let reference: Vec<Vec<f64>> = frames.iter().map(|&f| data.frames[f].clone()).collect();
    let cand: Vec<Vec<f64>> = frames.iter().map(|&f| candidate[f].clone()).collect();
    let rms = m_rms(&reference, &cand)?;
    let s = Sted::new(&td.ctx.adjacency, *sted).evaluate_windows(
        &data.frames,
        candidate,
        &sted_windows(data.num_frames(), split),
    )?;
    let phys = m_phys_mean(&td.ctx.sim, candidate, &data.triples_in(split))?;
    Ok(Metrics {
        m_rms: rms,
        m_sted: s.total,
        m_phys: phys,
    })
}

/// `ACAP⁻¹(D(E(ACAP(p_f))), q_f)` for every frame.
pub fn reconstruct_all(ae: &Autoencoder, td: &TrainingData) -> Result<Vec<Vec<f64>>> {
    (0..td.data.num_frames())
        .into_par_iter()
        .map(|f| {
            Ok(
                decode_positions(ae, td.ctx, &ae.encode(&td.features[f])?, td.targets(f))?
                    .positions,
            )
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IkConfig {
    pub max_iter: usize,
    /// Stops once the latent gradient norm falls below this.
    pub grad_tol: f64,
    pub initial_step: f64,
}

impl Default for IkConfig {
    fn default() -> Self {
        Self {
            max_iter: 500,
            grad_tol: 1e-9,
            initial_step: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IkResult {
    pub z: Vec<f64>,
    pub positions: Vec<f64>,
    /// Objective after each accepted iteration, starting with the initial value.
    pub objective: Vec<f64>,
    pub grad_norm: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Elastic energy of the decoded, reconstructed shape and its latent gradient.
pub fn ik_objective(
    ae: &Autoencoder,
    ctx: &ShellContext,
    z: &[f64],
    q: &[[f64; 3]],
    with_grad: bool,
) -> Result<(f64, Vec<f64>, Option<Vec<f64>>)> {
    let d = decode_positions(ae, ctx, z, q)?;
    let e = ctx
        .sim
        .energy_terms(&d.positions, TermMask::ELASTIC)?
        .elastic();
    let g = if with_grad {
        let dp = ctx.sim.gradient_masked(&d.positions, TermMask::ELASTIC)?;
        Some(decode_positions_backward(ae, ctx, &d, &dp, None, None)?)
    } else {
        None
    };
    Ok((e, d.positions, g))
}

/// Gradient descent with Armijo backtracking on the elastic energy over the
/// latent code, grasped vertices held at `q`.
pub fn ik_solve(
    ae: &Autoencoder,
    ctx: &ShellContext,
    q: &[[f64; 3]],
    z0: &[f64],
    cfg: &IkConfig,
) -> Result<IkResult> {
    check_len(ae.latent_dim(), z0.len())?;
    check_len(ctx.solver.grasp().len(), q.len())?;
    let mut z = z0.to_vec();
    let (mut f, mut pos, g) = ik_objective(ae, ctx, &z, q, true)?;
    let mut g = g.unwrap();
    if !f.is_finite() {
        return Err(Error::Divergence(
            "non-finite inverse-kinematics objective".into(),
        ));
    }
    let mut objective = vec![f];
    let mut step = cfg.initial_step;
    let mut iterations = 0;
    let mut gn = nn::dot(&g, &g).sqrt();
    while iterations < cfg.max_iter && gn > cfg.grad_tol {
        iterations += 1;
        let mut accepted = false;
        while step > 1e-20 {
            let trial: Vec<f64> = z.iter().zip(&g).map(|(a, b)| a - step * b).collect();
            if let Ok((ft, pt, _)) = ik_objective(ae, ctx, &trial, q, false) {
                if ft.is_finite() && ft <= f - 1e-4 * step * gn * gn {
                    z = trial;
                    f = ft;
                    pos = pt;
                    accepted = true;
                    break;
                }
            }
            step *= 0.5;
        }
        if !accepted {
            break;
        }
        objective.push(f);
        step *= 2.0;
        let (_, _, gg) = ik_objective(ae, ctx, &z, q, true)?;
        g = gg.unwrap();
        gn = nn::dot(&g, &g).sqrt();
    }
    Ok(IkResult {
        z,
        positions: pos,
        objective,
        grad_norm: gn,
        iterations,
        converged: gn <= cfg.grad_tol,
    })
}
