mod common;

use common::{fd_gradient, rel_error, tiny_autoencoder, tiny_dataset};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use shellflow::datagen::Split;
use shellflow::embedding::{
    decode_positions, train_stage1, Autoencoder, ShellContext, Stage1Config, TrainingData,
};
use shellflow::latent::{
    blend_codes, finetune_stage3, grasp_input, grasp_origin, loss_mphys, loss_mphys_backward,
    loss_sim, rollout_latent, stage2_batch, stage3_batch, train_stage2, unroll, window_starts,
    LatentData, LatentMlp, MlpConfig, Stage2Config, Stage3Config,
};
use shellflow::nn::{Adam, AdamConfig};
use shellflow::MaterialKind;

fn mlp(latent: usize, grasp: usize, hidden: Vec<usize>, seed: u64) -> LatentMlp {
    LatentMlp::new(
        latent,
        grasp,
        MlpConfig {
            hidden,
            seed,
            ..MlpConfig::default()
        },
    )
    .unwrap()
}

fn random_vec(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect()
}

#[test]
fn zero_weights_output_final_bias() {
    let mut m = mlp(3, 2, vec![5, 4], 0);
    let names: Vec<String> = m.store.tensors().iter().map(|t| t.name.clone()).collect();
    for name in &names {
        let id = m.store.find(name).unwrap();
        m.store.get_mut(id).fill(0.0);
    }
    let b = m.store.find("mlp2.b").unwrap();
    m.store.get_mut(b).copy_from_slice(&[0.5, -1.0, 2.0]);
    let y = m
        .step(&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0], &[0.1; 6])
        .unwrap();
    assert_eq!(y, vec![0.5, -1.0, 2.0]);
    assert!(m.step(&[1.0; 2], &[1.0; 3], &[0.0; 6]).is_err());
    assert_eq!(m.input_dim(), 2 * 3 + 3 * 2);
}

/// Hidden layers carry `[z, −z]`; `leaky(a) − leaky(−a) = (1 + slope)·a`
/// lets the next layer recover `z` exactly.
fn copy_previous_mlp(latent: usize, grasp: usize) -> LatentMlp {
    let mut m = mlp(latent, grasp, vec![2 * latent; 3], 0);
    let s = m.cfg.leaky_slope;
    let n_in = m.input_dim();
    for l in 0..4 {
        let w = m.store.find(&format!("mlp{l}.w")).unwrap();
        let b = m.store.find(&format!("mlp{l}.b")).unwrap();
        m.store.get_mut(b).fill(0.0);
        let wv = m.store.get_mut(w);
        wv.fill(0.0);
        match l {
            0 => {
                for i in 0..latent {
                    wv[i * n_in + latent + i] = 1.0;
                    wv[(latent + i) * n_in + latent + i] = -1.0;
                }
            }
            3 => {
                for i in 0..latent {
                    wv[i * 2 * latent + i] = 1.0 / (1.0 + s);
                    wv[i * 2 * latent + latent + i] = -1.0 / (1.0 + s);
                }
            }
            _ => {
                for i in 0..latent {
                    let c = 1.0 / (1.0 + s);
                    wv[i * 2 * latent + i] = c;
                    wv[i * 2 * latent + latent + i] = -c;
                    wv[(latent + i) * 2 * latent + i] = -c;
                    wv[(latent + i) * 2 * latent + latent + i] = c;
                }
            }
        }
    }
    m
}

#[test]
fn copying_mlp_has_zero_loss_on_constant_sequence() {
    let m = copy_previous_mlp(4, 2);
    let z = vec![vec![0.3, -1.2, 2.0, 0.0]; 6];
    let q = vec![vec![0.5; 6]; 6];
    assert!(loss_sim(&m, &z, &q).unwrap() < 1e-28);
    let y = m.step(&z[0], &[1.0, -2.0, 0.25, 3.0], &q[0]).unwrap();
    for (a, b) in y.iter().zip([1.0, -2.0, 0.25, 3.0]) {
        assert!((a - b).abs() < 1e-14);
    }
    assert!(loss_sim(&m, &z[..2], &q[..2]).is_err());
}

#[test]
fn loss_sim_matches_direct_recomputation() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let m = mlp(3, 1, vec![7, 6], 2);
    let z: Vec<Vec<f64>> = (0..5).map(|_| random_vec(3, &mut rng)).collect();
    let q: Vec<Vec<f64>> = (0..5).map(|_| random_vec(3, &mut rng)).collect();
    let term = |k: usize| {
        let y = m.step(&z[k - 2], &z[k - 1], &q[k]).unwrap();
        y.iter()
            .zip(&z[k])
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
    };
    assert!((loss_sim(&m, &z[..3], &q[..3]).unwrap() - term(2)).abs() < 1e-14);
    let want = (term(2) + term(3) + term(4)) / 3.0;
    assert!((loss_sim(&m, &z, &q).unwrap() - want).abs() < 1e-14);
}

#[test]
fn mlp_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let m = mlp(4, 2, vec![9, 8, 7], 5);
    let x = random_vec(m.input_dim(), &mut rng);
    let dy = random_vec(4, &mut rng);
    let (_, cache) = m.forward_cached(&x).unwrap();
    let mut g = m.store.zeros_like();
    let dx = m.backward(&cache, &dy, &mut g);
    let f = |theta: &[f64], x: &[f64]| {
        let mut mm = m.clone();
        mm.store.set_flat(theta).unwrap();
        mm.forward(x)
            .unwrap()
            .iter()
            .zip(&dy)
            .map(|(a, b)| a * b)
            .sum::<f64>()
    };
    let theta = m.store.flat();
    let fd = fd_gradient(|t| f(t, &x), &theta, 1e-6);
    assert!(rel_error(&g.flat(), &fd, 1e-12) < 1e-7);
    let fdx = fd_gradient(|xx| f(&theta, xx), &x, 1e-6);
    assert!(rel_error(&dx, &fdx, 1e-12) < 1e-7);
}

fn spectral_norm(rows: usize, cols: usize, w: &[f64]) -> f64 {
    DMatrix::from_row_slice(rows, cols, w)
        .singular_values()
        .max()
}

#[test]
fn output_change_is_bounded_by_layer_norms() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let m = mlp(5, 2, vec![16, 16, 16], 7);
    let bound: f64 = m
        .weights()
        .iter()
        .map(|&(r, c, w)| spectral_norm(r, c, w))
        .product();
    for _ in 0..50 {
        let x = random_vec(m.input_dim(), &mut rng);
        let d = random_vec(m.input_dim(), &mut rng);
        let scale = 1e-3 * rng.random::<f64>();
        let xp: Vec<f64> = x.iter().zip(&d).map(|(a, b)| a + scale * b).collect();
        let dn = scale * d.iter().map(|v| v * v).sum::<f64>().sqrt();
        let y0 = m.forward(&x).unwrap();
        let y1 = m.forward(&xp).unwrap();
        let dy = y0
            .iter()
            .zip(&y1)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt();
        assert!(dy <= bound * dn * (1.0 + 1e-12));
    }
}

#[test]
fn overfits_one_transition() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut m = mlp(6, 2, vec![32, 32, 32], 1);
    let (za, zb, zc, q) = (
        random_vec(6, &mut rng),
        random_vec(6, &mut rng),
        random_vec(6, &mut rng),
        random_vec(6, &mut rng),
    );
    let mut opt = Adam::new(
        &m.store,
        AdamConfig {
            lr: 1e-3,
            ..AdamConfig::default()
        },
    );
    for _ in 0..3000 {
        let x = m.input(&za, &zb, &q).unwrap();
        let (y, cache) = m.forward_cached(&x).unwrap();
        let dy: Vec<f64> = y.iter().zip(&zc).map(|(a, b)| 2.0 * (a - b)).collect();
        let mut g = m.store.zeros_like();
        m.backward(&cache, &dy, &mut g);
        *m.store.grads_mut() = g;
        opt.step(&mut m.store);
    }
    let y = m.step(&za, &zb, &q).unwrap();
    for (a, b) in y.iter().zip(&zc) {
        assert!((a - b).abs() < 1e-4, "{a} vs {b}");
    }
}

#[test]
fn blend_with_exact_prediction_is_identity() {
    let z = vec![0.1, -3.7, 1e-9, 12345.678];
    assert_eq!(blend_codes(&z, &z, 0.5), z);
    assert_eq!(blend_codes(&z, &[0.0; 4], 1.0), z);
}

#[test]
fn grasp_input_is_relative_to_centroid() {
    let q = [[1.0, 2.0, 3.0], [3.0, 2.0, 1.0]];
    let o = grasp_origin(&q);
    assert_eq!(o, [2.0, 2.0, 2.0]);
    assert_eq!(grasp_input(&q, o), vec![-1.0, 0.0, 1.0, 1.0, 0.0, -1.0]);
}

struct Setup {
    data: shellflow::datagen::Dataset,
    ctx: ShellContext,
}

fn setup(frames: usize, material: MaterialKind) -> Setup {
    let data = tiny_dataset(frames, material);
    let ctx = ShellContext::for_dataset(&data).unwrap();
    Setup { data, ctx }
}

fn small_ae(td: &TrainingData, latent: usize) -> Autoencoder {
    tiny_autoencoder(td.ctx, td.fit_normalizer(1e-3), latent, 2)
}

#[test]
fn first_free_running_step_equals_teacher_forced_step() {
    let s = setup(12, MaterialKind::FemShell);
    let td = TrainingData::new(&s.data, &s.ctx).unwrap();
    let ae = small_ae(&td, 5);
    let m = mlp(5, 2, vec![16, 16, 16], 3);
    let ld = LatentData::new(&ae, &td).unwrap();
    let targets: Vec<&[[f64; 3]]> = (0..8).map(|f| td.targets(f)).collect();
    let u = unroll(
        &ae,
        &m,
        &s.ctx,
        &ld.latents[0],
        &ld.latents[1],
        &ld.grasp_inputs[..8],
        &targets,
    )
    .unwrap();
    let tf = m
        .step(&ld.latents[0], &ld.latents[1], &ld.grasp_inputs[2])
        .unwrap();
    assert_eq!(u.latents[2], tf);
    assert_eq!(u.terms.len(), 6);

    let q: Vec<Vec<[f64; 3]>> = (2..8).map(|f| td.targets(f).to_vec()).collect();
    let r = rollout_latent(
        &ae,
        &m,
        &s.ctx,
        &ld.latents[0],
        &ld.latents[1],
        &q,
        ld.origin,
    )
    .unwrap();
    for k in 0..6 {
        assert_eq!(r.latents[k], u.latents[k + 2]);
        assert_eq!(r.frames[k], u.decoded[k + 2].positions);
    }
    let empty = rollout_latent(
        &ae,
        &m,
        &s.ctx,
        &ld.latents[0],
        &ld.latents[1],
        &[],
        ld.origin,
    )
    .unwrap();
    assert!(empty.frames.is_empty());
}

/// `loss_mphys` with every term's two older frames held at their values
/// from the unperturbed unroll.
fn frozen_mphys(
    ae: &Autoencoder,
    m: &LatentMlp,
    ctx: &ShellContext,
    base: &[Vec<f64>],
    z0: &[f64],
    z1: &[f64],
    gi: &[Vec<f64>],
    q: &[&[[f64; 3]]],
) -> f64 {
    let u = unroll(ae, m, ctx, z0, z1, gi, q).unwrap();
    let mut s = 0.0;
    for k in 2..gi.len() {
        s += ctx
            .sim
            .physics_loss(&base[k - 2], &base[k - 1], &u.decoded[k].positions)
            .unwrap();
    }
    s / (gi.len() - 2) as f64
}

#[test]
fn mphys_gradient_matches_frozen_objective() {
    let s = setup(12, MaterialKind::MassSpring);
    let td = TrainingData::new(&s.data, &s.ctx).unwrap();
    let ae = small_ae(&td, 4);
    let m = mlp(4, 2, vec![8, 8, 8], 9);
    let ld = LatentData::new(&ae, &td).unwrap();
    let n = 6;
    let q: Vec<&[[f64; 3]]> = (3..3 + n).map(|f| td.targets(f)).collect();
    let gi = &ld.grasp_inputs[3..3 + n];
    let (z0, z1) = (&ld.latents[3], &ld.latents[4]);
    let u = unroll(&ae, &m, &s.ctx, z0, z1, gi, &q).unwrap();
    let base: Vec<Vec<f64>> = u.decoded.iter().map(|d| d.positions.clone()).collect();
    let mut g = m.store.zeros_like();
    let [dz0, dz1] = loss_mphys_backward(&ae, &m, &s.ctx, &u, 1.0, &mut g).unwrap();
    assert!((frozen_mphys(&ae, &m, &s.ctx, &base, z0, z1, gi, &q) - loss_mphys(&u)).abs() < 1e-14);

    let theta = m.store.flat();
    let fd = fd_gradient(
        |t| {
            let mut mm = m.clone();
            mm.store.set_flat(t).unwrap();
            frozen_mphys(&ae, &mm, &s.ctx, &base, z0, z1, gi, &q)
        },
        &theta,
        1e-7,
    );
    let err = rel_error(&g.flat(), &fd, 1e-12);
    assert!(err < 1e-3, "parameter gradient error {err}");

    let fd0 = fd_gradient(
        |z| frozen_mphys(&ae, &m, &s.ctx, &base, z, z1, gi, &q),
        z0,
        1e-5,
    );
    assert!(rel_error(&dz0, &fd0, 1e-12) < 1e-3, "{dz0:?} {fd0:?}");
    let fd1 = fd_gradient(
        |z| frozen_mphys(&ae, &m, &s.ctx, &base, z0, z, gi, &q),
        z1,
        1e-5,
    );
    assert!(rel_error(&dz1, &fd1, 1e-12) < 1e-3);

    // the unfrozen loss reacts to z_0 differently: the cut is real
    let full = fd_gradient(
        |z| {
            let u = unroll(&ae, &m, &s.ctx, z, z1, gi, &q).unwrap();
            loss_mphys(&u)
        },
        z0,
        1e-5,
    );
    assert!(rel_error(&dz0, &full, 1e-12) > 1e-2);
}

#[test]
fn stage2_gradient_matches_finite_differences() {
    let s = setup(12, MaterialKind::FemShell);
    let td = TrainingData::new(&s.data, &s.ctx).unwrap();
    let ae = small_ae(&td, 4);
    let m = mlp(4, 2, vec![8, 8, 8], 4);
    let ld = LatentData::new(&ae, &td).unwrap();
    let cfg = Stage2Config {
        lambda_sim: 1.5,
        lambda_mphys: 0.7,
        window: 6,
        ..Stage2Config::default()
    };
    let batch = window_starts(&td, Split::Train, cfg.window);
    assert_eq!(batch, vec![0, 1, 2, 3, 4, 5, 6]);
    let batch = &batch[1..4];
    let (loss, g) = stage2_batch(&ae, &m, &td, &ld, batch, &cfg).unwrap();
    let bases: Vec<Vec<Vec<f64>>> = batch
        .iter()
        .map(|&st| {
            let q: Vec<&[[f64; 3]]> = (st..st + cfg.window).map(|f| td.targets(f)).collect();
            let u = unroll(
                &ae,
                &m,
                &s.ctx,
                &ld.latents[st],
                &ld.latents[st + 1],
                &ld.grasp_inputs[st..st + cfg.window],
                &q,
            )
            .unwrap();
            u.decoded.iter().map(|d| d.positions.clone()).collect()
        })
        .collect();
    let objective = |t: &[f64]| {
        let mut mm = m.clone();
        mm.store.set_flat(t).unwrap();
        let mut v = 0.0;
        for (&st, base) in batch.iter().zip(&bases) {
            let r = st..st + cfg.window;
            let sim = loss_sim(&mm, &ld.latents[r.clone()], &ld.grasp_inputs[r.clone()]).unwrap();
            let q: Vec<&[[f64; 3]]> = r.clone().map(|f| td.targets(f)).collect();
            let ph = frozen_mphys(
                &ae,
                &mm,
                &s.ctx,
                base,
                &ld.latents[st],
                &ld.latents[st + 1],
                &ld.grasp_inputs[r],
                &q,
            );
            v += cfg.lambda_sim * sim + cfg.lambda_mphys * ph;
        }
        v / batch.len() as f64
    };
    let theta = m.store.flat();
    assert!((objective(&theta) - loss).abs() <= 1e-12 * loss.max(1.0));
    let fd = fd_gradient(objective, &theta, 1e-6);
    let err = rel_error(&g.flat(), &fd, 1e-12);
    assert!(err < 1e-3, "relative error {err}");
}

#[test]
fn stage3_gradient_matches_finite_differences() {
    let s = setup(10, MaterialKind::MassSpring);
    let td = TrainingData::new(&s.data, &s.ctx).unwrap();
    let ae = small_ae(&td, 4);
    let m = mlp(4, 2, vec![8, 8, 8], 6);
    let cfg = Stage3Config {
        lambda_vert: 2.0,
        lambda_ephys: 0.5,
        lambda_sim: 0.3,
        ..Stage3Config::default()
    };
    let batch = [4usize, 7];
    let (loss, ga, gm) = stage3_batch(&ae, &m, &td, &batch, &cfg).unwrap();
    let origin = grasp_origin(td.targets(0));
    let recon_at = |a: &Autoencoder, f: usize| {
        decode_positions(
            a,
            &s.ctx,
            &a.encode(&td.features[f]).unwrap(),
            td.targets(f),
        )
        .unwrap()
        .positions
    };
    let frozen: Vec<(Vec<f64>, Vec<f64>)> = batch
        .iter()
        .map(|&k| (recon_at(&ae, k - 2), recon_at(&ae, k - 1)))
        .collect();
    let objective = |a: &Autoencoder, mm: &LatentMlp| {
        let mut v = 0.0;
        for (&k, (p0, p1)) in batch.iter().zip(&frozen) {
            let z: Vec<Vec<f64>> = (k - 2..=k)
                .map(|f| a.encode(&td.features[f]).unwrap())
                .collect();
            let pred = mm
                .step(&z[0], &z[1], &grasp_input(td.targets(k), origin))
                .unwrap();
            let zb = blend_codes(&z[2], &pred, cfg.blend);
            let d = decode_positions(a, &s.ctx, &zb, td.targets(k)).unwrap();
            let recon: f64 = d
                .feat
                .iter()
                .zip(&td.features[k])
                .map(|(x, y)| (x - y).powi(2))
                .sum();
            let vert: f64 = d
                .positions
                .iter()
                .zip(&s.data.frames[k])
                .map(|(x, y)| (x - y).powi(2))
                .sum();
            let ephys = s.ctx.sim.physics_loss(p0, p1, &d.positions).unwrap();
            let sim: f64 = pred.iter().zip(&z[2]).map(|(x, y)| (x - y).powi(2)).sum();
            v += cfg.lambda_recon * recon
                + cfg.lambda_vert * vert
                + cfg.lambda_ephys * ephys
                + cfg.lambda_sim * sim;
        }
        v / batch.len() as f64
    };
    assert!((objective(&ae, &m) - loss).abs() <= 1e-12 * loss.max(1.0));
    let fd_ae = fd_gradient(
        |t| {
            let mut a = ae.clone();
            a.store.set_flat(t).unwrap();
            objective(&a, &m)
        },
        &ae.store.flat(),
        1e-6,
    );
    assert!(rel_error(&ga.flat(), &fd_ae, 1e-12) < 1e-3);
    let fd_m = fd_gradient(
        |t| {
            let mut mm = m.clone();
            mm.store.set_flat(t).unwrap();
            objective(&ae, &mm)
        },
        &m.store.flat(),
        1e-6,
    );
    assert!(rel_error(&gm.flat(), &fd_m, 1e-12) < 1e-3);
}

#[test]
fn stage2_and_stage3_are_bit_reproducible_and_reduce_loss() {
    let s = setup(40, MaterialKind::FemShell);
    let td = TrainingData::new(&s.data, &s.ctx).unwrap();
    let mut ae = small_ae(&td, 6);
    let c1 = Stage1Config {
        epochs: 5,
        batch_size: 4,
        ..Stage1Config::default()
    };
    train_stage1(&mut ae, &td, &c1).unwrap();
    let c2 = Stage2Config {
        epochs: 4,
        batch_size: 2,
        window: 6,
        seed: 5,
        ..Stage2Config::default()
    };
    let c3 = Stage3Config {
        epochs: 2,
        batch_size: 4,
        seed: 5,
        ..Stage3Config::default()
    };
    let run = || {
        let mut a = ae.clone();
        let mut m = mlp(6, 2, vec![16, 16, 16], 8);
        let h2 = train_stage2(&a, &mut m, &td, &c2).unwrap();
        let h3 = finetune_stage3(&mut a, &mut m, &td, &c3).unwrap();
        (h2, h3, a.store.flat(), m.store.flat())
    };
    let (h2, h3, a1, m1) = run();
    let (h2b, h3b, a2, m2) = run();
    assert_eq!(h2.to_csv(), h2b.to_csv());
    assert_eq!(h3.to_csv(), h3b.to_csv());
    let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a1), bits(&a2));
    assert_eq!(bits(&m1), bits(&m2));
    let first = h2
        .rows
        .iter()
        .find(|r| r.epoch == 0 && r.split == Split::Train)
        .unwrap()
        .values[0];
    let last = h2.last(Split::Train, "sim").unwrap();
    assert!(last < first, "L_sim {first} -> {last}");
    assert_eq!(h3.columns, vec!["recon", "vert", "ephys", "sim", "total"]);
}

#[test]
fn stage2_rejects_bad_configs() {
    let s = setup(10, MaterialKind::MassSpring);
    let td = TrainingData::new(&s.data, &s.ctx).unwrap();
    let ae = small_ae(&td, 4);
    let mut m = mlp(4, 2, vec![8], 0);
    let bad = Stage2Config {
        lambda_mphys: -1.0,
        ..Stage2Config::default()
    };
    assert!(train_stage2(&ae, &mut m, &td, &bad).is_err());
    let long = Stage2Config {
        window: 13,
        ..Stage2Config::default()
    };
    assert!(train_stage2(&ae, &mut m, &td, &long).is_err());
    let mut wrong = mlp(5, 2, vec![8], 0);
    assert!(train_stage2(&ae, &mut wrong, &td, &Stage2Config::default()).is_err());
}

#[test]
fn frozen_grasp_rollout_stays_bounded() {
    let s = setup(40, MaterialKind::FemShell);
    let td = TrainingData::new(&s.data, &s.ctx).unwrap();
    let mut ae = small_ae(&td, 6);
    let c1 = Stage1Config {
        epochs: 40,
        batch_size: 4,
        ..Stage1Config::default()
    };
    train_stage1(&mut ae, &td, &c1).unwrap();
    let mut m = mlp(6, 2, vec![32, 32, 32], 4);
    let c2 = Stage2Config {
        epochs: 20,
        batch_size: 2,
        window: 6,
        ..Stage2Config::default()
    };
    train_stage2(&ae, &mut m, &td, &c2).unwrap();

    let displacement = |frames: &[Vec<f64>]| {
        let rest = &s.data.frames[0];
        frames
            .iter()
            .flat_map(|p| {
                p.chunks(3).zip(rest.chunks(3)).map(|(a, b)| {
                    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
                })
            })
            .fold(0.0f64, f64::max)
    };
    let train_max = displacement(&s.data.frames);
    let feats = s.ctx.features(&s.data.frames[..2]).unwrap();
    let z1 = ae.encode(&feats[0]).unwrap();
    let z2 = ae.encode(&feats[1]).unwrap();
    let q0 = s.data.grasp.targets(0).to_vec();
    let targets = vec![q0.clone(); 100];
    let out = rollout_latent(&ae, &m, &s.ctx, &z1, &z2, &targets, grasp_origin(&q0)).unwrap();
    assert_eq!(out.frames.len(), 100);
    let pred_max = displacement(&out.frames);
    assert!(
        pred_max < 2.0 * train_max,
        "rollout {pred_max} vs data {train_max}"
    );
}
