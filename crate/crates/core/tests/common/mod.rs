#![allow(dead_code)]

use shellflow::datagen::{Dataset, DatasetSpec, MeshSpec};
use shellflow::embedding::{Autoencoder, AutoencoderConfig, Normalizer, ShellContext};
use shellflow::MaterialKind;

/// 4×4 sheet (16 vertices) driven along X.
pub fn tiny_dataset(frames: usize, material: MaterialKind) -> Dataset {
    let mut spec = DatasetSpec::desk_sheet(material, frames);
    spec.mesh = MeshSpec::Sheet {
        resolution: 4,
        holes: false,
    };
    spec.sequences[0].period = 20.0;
    spec.generate_sequence(0).unwrap()
}

pub fn tiny_autoencoder(
    ctx: &ShellContext,
    norm: Normalizer,
    latent_dim: usize,
    seed: u64,
) -> Autoencoder {
    let cfg = AutoencoderConfig {
        latent_dim,
        seed,
        ..AutoencoderConfig::default()
    };
    Autoencoder::new(&ctx.adjacency, cfg, norm).unwrap()
}

/// Central differences of `f` around `x`.
pub fn fd_gradient(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut y = x.to_vec();
    (0..x.len())
        .map(|i| {
            y[i] = x[i] + h;
            let fp = f(&y);
            y[i] = x[i] - h;
            let fm = f(&y);
            y[i] = x[i];
            (fp - fm) / (2.0 * h)
        })
        .collect()
}

/// `‖a − b‖ / max(‖b‖, floor)`.
pub fn rel_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    let d: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    let n: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    d / n.max(floor)
}
