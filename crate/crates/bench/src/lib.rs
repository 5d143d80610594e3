//! Shared fixtures for the benchmarks.

use shellflow::datagen::{Dataset, DatasetSpec};
use shellflow::embedding::{Autoencoder, AutoencoderConfig, Normalizer, ShellContext};
use shellflow::latent::{LatentMlp, MlpConfig};
use shellflow::{Adjacency, MaterialKind};

pub struct Fixture {
    pub data: Dataset,
    pub ctx: ShellContext,
    pub ae: Autoencoder,
    pub mlp: LatentMlp,
}

/// A short desk-sheet sequence with untrained networks of the default size.
pub fn fixture(frames: usize) -> Fixture {
    let spec = DatasetSpec::desk_sheet(MaterialKind::FemShell, frames);
    let data = spec.generate_sequence(0).expect("generate");
    let ctx = ShellContext::new(&data.mesh, &data.cfg).expect("context");
    let ae = Autoencoder::new(
        &Adjacency::build(&data.mesh),
        AutoencoderConfig::default(),
        Normalizer::identity(),
    )
    .expect("autoencoder");
    let mlp = LatentMlp::new(
        ae.cfg.latent_dim,
        data.grasp.indices.len(),
        MlpConfig::default(),
    )
    .expect("mlp");
    Fixture { data, ctx, ae, mlp }
}
