//! Recurrent latent-space simulator: an MLP advancing `(z_{m−2}, z_{m−1}, q_m)`
//! to `z_m`, its training losses, second- and third-stage training, and rollout.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datagen::{test_windows, Split, SPLIT_PERIOD, SPLIT_TRAIN};
use crate::embedding::{
    batches, check_finite, decode_positions, decode_positions_backward, validate_common,
    Autoencoder, Decoded, History, ShellContext, TrainingData,
};
use crate::error::{check_len, Error, Result};
use crate::metrics::{m_phys, m_rms, Metrics, Sted, StedConfig};
use crate::nn::{self, Adam, AdamConfig, Grads, ParamId, ParamStore};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpConfig {
    pub hidden: Vec<usize>,
    pub leaky_slope: f64,
    pub seed: u64,
}

impl Default for MlpConfig {
    fn default() -> Self {
        Self {
            hidden: vec![256, 256, 256],
            leaky_slope: 0.1,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
struct Layer {
    w: ParamId,
    b: ParamId,
}

/// Fully connected network with leaky hidden layers and a linear output.
#[derive(Debug, Clone)]
pub struct LatentMlp {
    pub cfg: MlpConfig,
    pub store: ParamStore,
    latent_dim: usize,
    num_grasp: usize,
    layers: Vec<Layer>,
}

#[derive(Debug, Clone)]
pub struct MlpCache {
    inputs: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
}

impl LatentMlp {
    pub fn new(latent_dim: usize, num_grasp: usize, cfg: MlpConfig) -> Result<Self> {
        if latent_dim == 0 || cfg.hidden.contains(&0) {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        let mut widths = vec![2 * latent_dim + 3 * num_grasp];
        widths.extend(&cfg.hidden);
        widths.push(latent_dim);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut store = ParamStore::new();
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(l, w)| Layer {
                w: store.add_uniform(&format!("mlp{l}.w"), &[w[1], w[0]], w[0], &mut rng),
                b: store.add(&format!("mlp{l}.b"), &[w[1]], vec![0.0; w[1]]),
            })
            .collect();
        Ok(Self {
            cfg,
            store,
            latent_dim,
            num_grasp,
            layers,
        })
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    pub fn num_grasp(&self) -> usize {
        self.num_grasp
    }

    pub fn input_dim(&self) -> usize {
        2 * self.latent_dim + 3 * self.num_grasp
    }

    /// Weight matrices as `(out, in, values)` in layer order.
    pub fn weights(&self) -> Vec<(usize, usize, &[f64])> {
        self.layers
            .iter()
            .map(|l| {
                let b = self.store.get(l.b).len();
                let w = self.store.get(l.w);
                (b, w.len() / b, w)
            })
            .collect()
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward_cached(x)?.0)
    }

    pub fn forward_cached(&self, x: &[f64]) -> Result<(Vec<f64>, MlpCache)> {
        check_len(self.input_dim(), x.len())?;
        let n = self.layers.len();
        let mut inputs = Vec::with_capacity(n);
        let mut pre = Vec::with_capacity(n);
        let mut h = x.to_vec();
        for (l, layer) in self.layers.iter().enumerate() {
            let a = nn::fc(self.store.get(layer.w), self.store.get(layer.b), &h);
            inputs.push(h);
            h = if l + 1 < n {
                nn::leaky_relu(&a, self.cfg.leaky_slope)
            } else {
                a.clone()
            };
            pre.push(a);
        }
        Ok((h, MlpCache { inputs, pre }))
    }

    /// Accumulates parameter gradients and returns the input gradient.
    pub fn backward(&self, cache: &MlpCache, dy: &[f64], grads: &mut Grads) -> Vec<f64> {
        let n = self.layers.len();
        let mut d = dy.to_vec();
        for l in (0..n).rev() {
            if l + 1 < n {
                d = nn::leaky_relu_backward(&cache.pre[l], &d, self.cfg.leaky_slope);
            }
            let layer = &self.layers[l];
            let [dw, db] = grads.many_mut([layer.w, layer.b]);
            d = nn::fc_backward(self.store.get(layer.w), &cache.inputs[l], &d, dw, db);
        }
        d
    }

    /// `z_m` from the two previous codes and encoded grasp targets.
    pub fn step(&self, z_prev2: &[f64], z_prev1: &[f64], grasp_input: &[f64]) -> Result<Vec<f64>> {
        self.forward(&self.input(z_prev2, z_prev1, grasp_input)?)
    }

    pub fn input(&self, z_prev2: &[f64], z_prev1: &[f64], grasp_input: &[f64]) -> Result<Vec<f64>> {
        check_len(self.latent_dim, z_prev2.len())?;
        check_len(self.latent_dim, z_prev1.len())?;
        check_len(3 * self.num_grasp, grasp_input.len())?;
        Ok([z_prev2, z_prev1, grasp_input].concat())
    }
}

/// Centroid of a set of grasp targets.
pub fn grasp_origin(q: &[[f64; 3]]) -> [f64; 3] {
    let mut c = [0.0; 3];
    for t in q {
        for d in 0..3 {
            c[d] += t[d] / q.len() as f64;
        }
    }
    c
}

/// Grasp targets relative to `origin`, flattened.
pub fn grasp_input(q: &[[f64; 3]], origin: [f64; 3]) -> Vec<f64> {
    q.iter()
        .flat_map(|t| (0..3).map(move |d| t[d] - origin[d]))
        .collect()
}

/// Mean of `‖MLP(z_{m−2}, z_{m−1}, q_m) − z_m‖²` over `m = 2..N`, inputs taken
/// from `latents`. `grasp_inputs[m]` belongs to frame `m`.
pub fn loss_sim(mlp: &LatentMlp, latents: &[Vec<f64>], grasp_inputs: &[Vec<f64>]) -> Result<f64> {
    if latents.len() < 3 {
        return Err(Error::Config(
            "a latent sequence needs at least 3 frames".into(),
        ));
    }
    check_len(latents.len(), grasp_inputs.len())?;
    let mut s = 0.0;
    for m in 2..latents.len() {
        let y = mlp.step(&latents[m - 2], &latents[m - 1], &grasp_inputs[m])?;
        s += y
            .iter()
            .zip(&latents[m])
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>();
    }
    Ok(s / (latents.len() - 2) as f64)
}

/// One free-running unroll from two given codes.
#[derive(Debug, Clone)]
pub struct Unroll {
    /// Codes for every frame of the window, the first two given.
    pub latents: Vec<Vec<f64>>,
    pub decoded: Vec<Decoded>,
    caches: Vec<MlpCache>,
    /// `L_phys` of each predicted frame given its two predecessors.
    pub terms: Vec<f64>,
}

/// Unrolls the MLP over `grasp_inputs.len()` frames starting from `z_0, z_1`,
/// decoding every frame with the matching `targets`.
pub fn unroll(
    ae: &Autoencoder,
    mlp: &LatentMlp,
    ctx: &ShellContext,
    z0: &[f64],
    z1: &[f64],
    grasp_inputs: &[Vec<f64>],
    targets: &[&[[f64; 3]]],
) -> Result<Unroll> {
    let n = grasp_inputs.len();
    if n < 3 {
        return Err(Error::Config("an unroll needs at least 3 frames".into()));
    }
    check_len(n, targets.len())?;
    let mut latents = vec![z0.to_vec(), z1.to_vec()];
    let mut decoded = vec![
        decode_positions(ae, ctx, z0, targets[0])?,
        decode_positions(ae, ctx, z1, targets[1])?,
    ];
    let mut caches = Vec::with_capacity(n - 2);
    let mut terms = Vec::with_capacity(n - 2);
    for m in 2..n {
        let x = mlp.input(&latents[m - 2], &latents[m - 1], &grasp_inputs[m])?;
        let (z, cache) = mlp.forward_cached(&x)?;
        let d = decode_positions(ae, ctx, &z, targets[m])?;
        terms.push(ctx.sim.physics_loss(
            &decoded[m - 2].positions,
            &decoded[m - 1].positions,
            &d.positions,
        )?);
        latents.push(z);
        decoded.push(d);
        caches.push(cache);
    }
    Ok(Unroll {
        latents,
        decoded,
        caches,
        terms,
    })
}

/// Mean of the unrolled `L_phys` terms.
pub fn loss_mphys(u: &Unroll) -> f64 {
    u.terms.iter().sum::<f64>() / u.terms.len().max(1) as f64
}

/// Backward of `scale · loss_mphys`. Each term's dependence on its two older
/// frames is cut, so gradient reaches a predicted code only through the term
/// it completes and through later MLP inputs. Returns the gradients with
/// respect to the two given codes.
pub fn loss_mphys_backward(
    ae: &Autoencoder,
    mlp: &LatentMlp,
    ctx: &ShellContext,
    u: &Unroll,
    scale: f64,
    grads: &mut Grads,
) -> Result<[Vec<f64>; 2]> {
    let n = u.latents.len();
    let l = mlp.latent_dim();
    let w = scale / (n - 2) as f64;
    let mut dz = vec![vec![0.0; l]; n];
    for m in (2..n).rev() {
        let d = &u.decoded;
        let dp =
            ctx.sim
                .physics_gradient(&d[m - 2].positions, &d[m - 1].positions, &d[m].positions)?;
        let dp: Vec<f64> = dp.iter().map(|v| w * v).collect();
        let direct = decode_positions_backward(ae, ctx, &d[m], &dp, None, None)?;
        for (a, b) in dz[m].iter_mut().zip(&direct) {
            *a += b;
        }
        let dx = mlp.backward(&u.caches[m - 2], &dz[m], grads);
        for i in 0..l {
            dz[m - 2][i] += dx[i];
            dz[m - 1][i] += dx[l + i];
        }
    }
    let mut it = dz.into_iter();
    Ok([it.next().unwrap(), it.next().unwrap()])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage2Config {
    pub lambda_sim: f64,
    pub lambda_mphys: f64,
    pub adam: AdamConfig,
    pub epochs: usize,
    /// Windows per optimizer step.
    pub batch_size: usize,
    /// Frames per training window, the first two given.
    pub window: usize,
    pub seed: u64,
}

impl Default for Stage2Config {
    fn default() -> Self {
        Self {
            lambda_sim: 1.0,
            lambda_mphys: 1.0,
            adam: AdamConfig {
                lr_decay: 0.99,
                ..AdamConfig::default()
            },
            epochs: 300,
            batch_size: 4,
            window: 8,
            seed: 0,
        }
    }
}

impl Stage2Config {
    pub fn validate(&self) -> Result<()> {
        if [self.lambda_sim, self.lambda_mphys]
            .iter()
            .any(|v| !(*v >= 0.0) || !v.is_finite())
        {
            return Err(Error::Config(
                "loss weights must be finite and non-negative".into(),
            ));
        }
        if self.window < 3 {
            return Err(Error::Config(
                "training windows need at least 3 frames".into(),
            ));
        }
        validate_common(self.batch_size, &self.adam)
    }
}

/// Frozen encodings and decodings of a dataset, with grasp inputs per frame.
#[derive(Debug, Clone)]
pub struct LatentData {
    pub latents: Vec<Vec<f64>>,
    pub grasp_inputs: Vec<Vec<f64>>,
    pub origin: [f64; 3],
}

impl LatentData {
    pub fn new(ae: &Autoencoder, td: &TrainingData) -> Result<Self> {
        let latents = td
            .features
            .par_iter()
            .map(|x| ae.encode(x))
            .collect::<Result<Vec<_>>>()?;
        let origin = grasp_origin(td.targets(0));
        let grasp_inputs = (0..td.data.num_frames())
            .map(|f| grasp_input(td.targets(f), origin))
            .collect();
        Ok(Self {
            latents,
            grasp_inputs,
            origin,
        })
    }
}

/// Start frames `s` with `s .. s + window` entirely in `split`.
pub fn window_starts(td: &TrainingData, split: Split, window: usize) -> Vec<usize> {
    let n = td.data.num_frames();
    (0..n.saturating_sub(window - 1))
        .filter(|&s| (s..s + window).all(|f| td.data.split[f] == split))
        .collect()
}

struct WindowSample {
    sim: f64,
    mphys: f64,
    grads: Option<Grads>,
}

fn window_sample(
    ae: &Autoencoder,
    mlp: &LatentMlp,
    td: &TrainingData,
    ld: &LatentData,
    s: usize,
    w: usize,
    weights: Option<(f64, f64)>,
) -> Result<WindowSample> {
    let mut grads = weights.map(|_| mlp.store.zeros_like());
    let mut sim = 0.0;
    for m in s + 2..s + w {
        let x = mlp.input(&ld.latents[m - 2], &ld.latents[m - 1], &ld.grasp_inputs[m])?;
        let (y, cache) = mlp.forward_cached(&x)?;
        let r: Vec<f64> = y.iter().zip(&ld.latents[m]).map(|(a, b)| a - b).collect();
        sim += nn::dot(&r, &r);
        if let (Some(g), Some((ws, _))) = (grads.as_mut(), weights) {
            let dy: Vec<f64> = r.iter().map(|v| 2.0 * ws / (w - 2) as f64 * v).collect();
            mlp.backward(&cache, &dy, g);
        }
    }
    sim /= (w - 2) as f64;
    let mut mphys = 0.0;
    let need_mphys = weights.is_none_or(|(_, wm)| wm > 0.0);
    if need_mphys {
        let targets: Vec<&[[f64; 3]]> = (s..s + w).map(|f| td.targets(f)).collect();
        let u = unroll(
            ae,
            mlp,
            td.ctx,
            &ld.latents[s],
            &ld.latents[s + 1],
            &ld.grasp_inputs[s..s + w],
            &targets,
        )?;
        mphys = loss_mphys(&u);
        if let (Some(g), Some((_, wm))) = (grads.as_mut(), weights) {
            loss_mphys_backward(ae, mlp, td.ctx, &u, wm, g)?;
        }
    }
    Ok(WindowSample { sim, mphys, grads })
}

pub const STAGE2_COLUMNS: [&str; 3] = ["sim", "mphys", "total"];

/// Frames per evaluation window on `split`; test blocks are shorter than
/// the training window.
fn split_window(split: Split, cfg: &Stage2Config) -> usize {
    match split {
        Split::Train => cfg.window,
        Split::Test => cfg.window.min(SPLIT_PERIOD - SPLIT_TRAIN),
    }
}

/// Mean `L_sim`, `L_mphys` and weighted total over the windows of `split`.
pub fn stage2_losses(
    ae: &Autoencoder,
    mlp: &LatentMlp,
    td: &TrainingData,
    ld: &LatentData,
    split: Split,
    cfg: &Stage2Config,
) -> Result<[f64; 3]> {
    let w = split_window(split, cfg);
    let starts = window_starts(td, split, w);
    if starts.is_empty() {
        return Ok([f64::NAN; 3]);
    }
    let samples: Vec<WindowSample> = starts
        .par_iter()
        .map(|&s| window_sample(ae, mlp, td, ld, s, w, None))
        .collect::<Result<_>>()?;
    let n = samples.len() as f64;
    let sim = samples.iter().map(|s| s.sim).sum::<f64>() / n;
    let mphys = samples.iter().map(|s| s.mphys).sum::<f64>() / n;
    Ok([sim, mphys, cfg.lambda_sim * sim + cfg.lambda_mphys * mphys])
}

/// Weighted stage-2 loss on a batch of windows and its gradient.
pub fn stage2_batch(
    ae: &Autoencoder,
    mlp: &LatentMlp,
    td: &TrainingData,
    ld: &LatentData,
    batch: &[usize],
    cfg: &Stage2Config,
) -> Result<(f64, Grads)> {
    let n = batch.len() as f64;
    let weights = (cfg.lambda_sim / n, cfg.lambda_mphys / n);
    let samples: Vec<WindowSample> = batch
        .par_iter()
        .map(|&s| window_sample(ae, mlp, td, ld, s, cfg.window, Some(weights)))
        .collect::<Result<_>>()?;
    let mut grads = mlp.store.zeros_like();
    let mut loss = 0.0;
    for s in &samples {
        grads.add_scaled(s.grads.as_ref().unwrap(), 1.0);
        loss += weights.0 * s.sim + weights.1 * s.mphys;
    }
    Ok((loss, grads))
}

/// Trains the MLP with the autoencoder frozen.
pub fn train_stage2(
    ae: &Autoencoder,
    mlp: &mut LatentMlp,
    td: &TrainingData,
    cfg: &Stage2Config,
) -> Result<History> {
    cfg.validate()?;
    check_len(ae.latent_dim(), mlp.latent_dim())?;
    check_len(td.data.grasp.indices.len(), mlp.num_grasp())?;
    let ld = LatentData::new(ae, td)?;
    let starts = window_starts(td, Split::Train, cfg.window);
    if starts.is_empty() {
        return Err(Error::Config(format!(
            "no training window of {} frames",
            cfg.window
        )));
    }
    let mut history = History::new(&STAGE2_COLUMNS);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Adam::new(&mlp.store, cfg.adam);
    let log = |mlp: &LatentMlp, epoch: usize, h: &mut History| -> Result<()> {
        let tr = stage2_losses(ae, mlp, td, &ld, Split::Train, cfg)?;
        check_finite(epoch, "training loss", tr[2])?;
        h.push(epoch, Split::Train, tr.to_vec());
        let te = stage2_losses(ae, mlp, td, &ld, Split::Test, cfg)?;
        if te.iter().all(|v| v.is_finite()) {
            h.push(epoch, Split::Test, te.to_vec());
        }
        Ok(())
    };
    log(mlp, 0, &mut history)?;
    for epoch in 1..=cfg.epochs {
        opt.set_epoch(epoch);
        for batch in batches(&starts, cfg.batch_size, &mut rng) {
            let (loss, grads) = stage2_batch(ae, mlp, td, &ld, &batch, cfg)?;
            check_finite(epoch, "batch loss", loss)?;
            if !grads.is_finite() {
                return Err(Error::TrainingDiverged {
                    epoch,
                    detail: "non-finite gradient".into(),
                });
            }
            *mlp.store.grads_mut() = grads;
            opt.step(&mut mlp.store);
        }
        log(mlp, epoch, &mut history)?;
    }
    Ok(history)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage3Config {
    pub lambda_recon: f64,
    pub lambda_vert: f64,
    pub lambda_ephys: f64,
    pub lambda_sim: f64,
    /// Weight of the encoded code in the decoder input; the MLP prediction gets the rest.
    pub blend: f64,
    pub adam: AdamConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for Stage3Config {
    fn default() -> Self {
        Self {
            lambda_recon: 1.0,
            lambda_vert: 1.0,
            lambda_ephys: 0.5,
            lambda_sim: 1.0,
            blend: 0.5,
            adam: AdamConfig {
                lr: 1e-5,
                ..AdamConfig::default()
            },
            epochs: 20,
            batch_size: 8,
            seed: 0,
        }
    }
}

impl Stage3Config {
    pub fn validate(&self) -> Result<()> {
        let l = [
            self.lambda_recon,
            self.lambda_vert,
            self.lambda_ephys,
            self.lambda_sim,
        ];
        if l.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(Error::Config(
                "loss weights must be finite and non-negative".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.blend) {
            return Err(Error::Config("blend must lie in [0, 1]".into()));
        }
        validate_common(self.batch_size, &self.adam)
    }
}

/// `blend · z + (1 − blend) · ẑ`.
pub fn blend_codes(z: &[f64], predicted: &[f64], blend: f64) -> Vec<f64> {
    z.iter()
        .zip(predicted)
        .map(|(a, b)| blend * a + (1.0 - blend) * b)
        .collect()
}

struct Stage3Sample {
    values: [f64; 4],
    grads: Option<(Grads, Grads)>,
}

fn stage3_sample(
    ae: &Autoencoder,
    mlp: &LatentMlp,
    td: &TrainingData,
    ld_origin: [f64; 3],
    m: usize,
    cfg: &Stage3Config,
    weights: Option<[f64; 4]>,
) -> Result<Stage3Sample> {
    let ctx = td.ctx;
    let enc: Vec<_> = (m - 2..=m)
        .map(|f| ae.encode_cached(&td.features[f]))
        .collect::<Result<_>>()?;
    let gi = grasp_input(td.targets(m), ld_origin);
    let x_in = mlp.input(&enc[0].0, &enc[1].0, &gi)?;
    let (pred, mcache) = mlp.forward_cached(&x_in)?;
    let zc = &enc[2].0;
    let zb = blend_codes(zc, &pred, cfg.blend);
    let d = decode_positions(ae, ctx, &zb, td.targets(m))?;
    let x = &td.features[m];
    let p = &td.data.frames[m];
    let recon: f64 = d.feat.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum();
    let vert: f64 = d
        .positions
        .iter()
        .zip(p)
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    let prev0 = decode_positions(ae, ctx, &enc[0].0, td.targets(m - 2))?.positions;
    let prev1 = decode_positions(ae, ctx, &enc[1].0, td.targets(m - 1))?.positions;
    let ephys = ctx.sim.physics_loss(&prev0, &prev1, &d.positions)?;
    let r: Vec<f64> = pred.iter().zip(zc).map(|(a, b)| a - b).collect();
    let sim = nn::dot(&r, &r);
    let values = [recon, vert, ephys, sim];
    let grads = match weights {
        None => None,
        Some([wr, wv, we, ws]) => {
            let mut ga = ae.store.zeros_like();
            let mut gm = mlp.store.zeros_like();
            let mut dpos: Vec<f64> = d
                .positions
                .iter()
                .zip(p)
                .map(|(a, b)| 2.0 * wv * (a - b))
                .collect();
            if we > 0.0 {
                let dp = ctx.sim.physics_gradient(&prev0, &prev1, &d.positions)?;
                for (a, b) in dpos.iter_mut().zip(&dp) {
                    *a += we * b;
                }
            }
            let dfeat: Vec<f64> = d
                .feat
                .iter()
                .zip(x)
                .map(|(a, b)| 2.0 * wr * (a - b))
                .collect();
            let dzb = decode_positions_backward(ae, ctx, &d, &dpos, Some(&dfeat), Some(&mut ga))?;
            let l = ae.latent_dim();
            let mut dzc = vec![0.0; l];
            let mut dpred = vec![0.0; l];
            for i in 0..l {
                dzc[i] = cfg.blend * dzb[i] - 2.0 * ws * r[i];
                dpred[i] = (1.0 - cfg.blend) * dzb[i] + 2.0 * ws * r[i];
            }
            let dx = mlp.backward(&mcache, &dpred, &mut gm);
            ae.encode_backward(&enc[0].1, &dx[..l], &mut ga);
            ae.encode_backward(&enc[1].1, &dx[l..2 * l], &mut ga);
            ae.encode_backward(&enc[2].1, &dzc, &mut ga);
            Some((ga, gm))
        }
    };
    Ok(Stage3Sample { values, grads })
}

pub const STAGE3_COLUMNS: [&str; 5] = ["recon", "vert", "ephys", "sim", "total"];

pub fn stage3_losses(
    ae: &Autoencoder,
    mlp: &LatentMlp,
    td: &TrainingData,
    split: Split,
    cfg: &Stage3Config,
) -> Result<[f64; 5]> {
    let ends = td.data.triples_in(split);
    if ends.is_empty() {
        return Ok([f64::NAN; 5]);
    }
    let origin = grasp_origin(td.targets(0));
    let samples: Vec<Stage3Sample> = ends
        .par_iter()
        .map(|&m| stage3_sample(ae, mlp, td, origin, m, cfg, None))
        .collect::<Result<_>>()?;
    let n = samples.len() as f64;
    let mut v = [0.0; 5];
    for s in &samples {
        for i in 0..4 {
            v[i] += s.values[i] / n;
        }
    }
    v[4] = cfg.lambda_recon * v[0]
        + cfg.lambda_vert * v[1]
        + cfg.lambda_ephys * v[2]
        + cfg.lambda_sim * v[3];
    Ok(v)
}

pub fn stage3_batch(
    ae: &Autoencoder,
    mlp: &LatentMlp,
    td: &TrainingData,
    batch: &[usize],
    cfg: &Stage3Config,
) -> Result<(f64, Grads, Grads)> {
    let n = batch.len() as f64;
    let w = [
        cfg.lambda_recon / n,
        cfg.lambda_vert / n,
        cfg.lambda_ephys / n,
        cfg.lambda_sim / n,
    ];
    let origin = grasp_origin(td.targets(0));
    let samples: Vec<Stage3Sample> = batch
        .par_iter()
        .map(|&m| stage3_sample(ae, mlp, td, origin, m, cfg, Some(w)))
        .collect::<Result<_>>()?;
    let mut ga = ae.store.zeros_like();
    let mut gm = mlp.store.zeros_like();
    let mut loss = 0.0;
    for s in &samples {
        let (a, b) = s.grads.as_ref().unwrap();
        ga.add_scaled(a, 1.0);
        gm.add_scaled(b, 1.0);
        loss += (0..4).map(|i| w[i] * s.values[i]).sum::<f64>();
    }
    Ok((loss, ga, gm))
}

/// Joint fine-tuning of autoencoder and MLP with the blended decoder input.
pub fn finetune_stage3(
    ae: &mut Autoencoder,
    mlp: &mut LatentMlp,
    td: &TrainingData,
    cfg: &Stage3Config,
) -> Result<History> {
    cfg.validate()?;
    check_len(ae.latent_dim(), mlp.latent_dim())?;
    let ends = td.data.triples_in(Split::Train);
    if ends.is_empty() {
        return Err(Error::Config("dataset has no training triples".into()));
    }
    let mut history = History::new(&STAGE3_COLUMNS);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt_ae = Adam::new(&ae.store, cfg.adam);
    let mut opt_mlp = Adam::new(&mlp.store, cfg.adam);
    let log = |ae: &Autoencoder, mlp: &LatentMlp, epoch: usize, h: &mut History| -> Result<()> {
        let tr = stage3_losses(ae, mlp, td, Split::Train, cfg)?;
        check_finite(epoch, "training loss", tr[4])?;
        h.push(epoch, Split::Train, tr.to_vec());
        let te = stage3_losses(ae, mlp, td, Split::Test, cfg)?;
        if te.iter().all(|v| v.is_finite()) {
            h.push(epoch, Split::Test, te.to_vec());
        }
        Ok(())
    };
    log(ae, mlp, 0, &mut history)?;
    for epoch in 1..=cfg.epochs {
        opt_ae.set_epoch(epoch);
        opt_mlp.set_epoch(epoch);
        for batch in batches(&ends, cfg.batch_size, &mut rng) {
            let (loss, ga, gm) = stage3_batch(ae, mlp, td, &batch, cfg)?;
            check_finite(epoch, "batch loss", loss)?;
            if !ga.is_finite() || !gm.is_finite() {
                return Err(Error::TrainingDiverged {
                    epoch,
                    detail: "non-finite gradient".into(),
                });
            }
            *ae.store.grads_mut() = ga;
            *mlp.store.grads_mut() = gm;
            opt_ae.step(&mut ae.store);
            opt_mlp.step(&mut mlp.store);
        }
        log(ae, mlp, epoch, &mut history)?;
    }
    Ok(history)
}

/// Frames per evaluation window; the first two are given.
pub const PREDICTION_WINDOW: usize = SPLIT_PERIOD - SPLIT_TRAIN;

/// Evaluation windows for `split`: the test windows, or consecutive chunks of
/// each block's training frames.
pub fn prediction_windows(n_frames: usize, split: Split) -> Vec<std::ops::Range<usize>> {
    match split {
        Split::Test => test_windows(n_frames),
        Split::Train => (0..n_frames)
            .step_by(SPLIT_PERIOD)
            .flat_map(|b| {
                (b..b + SPLIT_TRAIN)
                    .step_by(PREDICTION_WINDOW)
                    .map(|s| s..s + PREDICTION_WINDOW)
                    .filter(move |r| r.end <= (b + SPLIT_TRAIN).min(n_frames))
            })
            .collect(),
    }
}

/// For each window, the first two frames reconstructed from their encodings
/// followed by the free-running prediction of the rest.
pub fn predict_windows(
    ae: &Autoencoder,
    mlp: &LatentMlp,
    td: &TrainingData,
    windows: &[std::ops::Range<usize>],
) -> Result<Vec<Vec<Vec<f64>>>> {
    let origin = grasp_origin(td.targets(0));
    windows
        .par_iter()
        .map(|w| {
            let z0 = ae.encode(&td.features[w.start])?;
            let z1 = ae.encode(&td.features[w.start + 1])?;
            let gi: Vec<Vec<f64>> = w
                .clone()
                .map(|f| grasp_input(td.targets(f), origin))
                .collect();
            let q: Vec<&[[f64; 3]]> = w.clone().map(|f| td.targets(f)).collect();
            let u = unroll(ae, mlp, td.ctx, &z0, &z1, &gi, &q)?;
            Ok(u.decoded.into_iter().map(|d| d.positions).collect())
        })
        .collect()
}

/// Metrics of windowed prediction on `split`: RMS over the predicted frames,
/// STED over whole windows, and the physics residual of each predicted frame
/// given the two frames before it in its window.
pub fn prediction_metrics(
    ae: &Autoencoder,
    mlp: &LatentMlp,
    td: &TrainingData,
    split: Split,
    sted: &StedConfig,
) -> Result<Metrics> {
    let data = td.data;
    let windows = prediction_windows(data.num_frames(), split);
    if windows.is_empty() {
        return Err(Error::Config("no prediction windows to evaluate".into()));
    }
    let seqs = predict_windows(ae, mlp, td, &windows)?;
    let mut reference = Vec::new();
    let mut cand = Vec::new();
    let mut sted_sum = 0.0;
    let mut phys = Vec::new();
    let scorer = Sted::new(&td.ctx.adjacency, *sted);
    for (w, seq) in windows.iter().zip(&seqs) {
        reference.extend(data.frames[w.start + 2..w.end].iter().cloned());
        cand.extend(seq[2..].iter().cloned());
        sted_sum += scorer.evaluate(&data.frames[w.clone()], seq)?.total;
        for m in 2..seq.len() {
            phys.push(m_phys(&td.ctx.sim, &seq[m - 2], &seq[m - 1], &seq[m])?);
        }
    }
    Ok(Metrics {
        m_rms: m_rms(&reference, &cand)?,
        m_sted: sted_sum / windows.len() as f64,
        m_phys: phys.iter().sum::<f64>() / phys.len() as f64,
    })
}

#[derive(Debug, Clone)]
pub struct LatentRollout {
    pub latents: Vec<Vec<f64>>,
    /// Predicted frames `3..N` (positions).
    pub frames: Vec<Vec<f64>>,
    pub seconds: f64,
}

/// Free-running prediction of `targets.len()` frames after `z_1, z_2`, each
/// decoded and reconstructed with its grasp targets.
pub fn rollout_latent(
    ae: &Autoencoder,
    mlp: &LatentMlp,
    ctx: &ShellContext,
    z1: &[f64],
    z2: &[f64],
    targets: &[Vec<[f64; 3]>],
    origin: [f64; 3],
) -> Result<LatentRollout> {
    let start = Instant::now();
    let mut latents = Vec::with_capacity(targets.len());
    let mut frames = Vec::with_capacity(targets.len());
    let (mut a, mut b) = (z1.to_vec(), z2.to_vec());
    for q in targets {
        let z = mlp.step(&a, &b, &grasp_input(q, origin))?;
        frames.push(ctx.reconstruct(&ae.decode(&z)?, q)?);
        a = std::mem::replace(&mut b, z.clone());
        latents.push(z);
    }
    Ok(LatentRollout {
        latents,
        frames,
        seconds: start.elapsed().as_secs_f64(),
    })
}
