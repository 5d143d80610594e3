//! Model checkpoints: one parameter file per network plus a JSON manifest
//! holding the layer plan, seeds, normalizer and the mesh/simulator context.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::datagen::write_atomic;
use crate::embedding::{Autoencoder, AutoencoderConfig, Normalizer, ShellContext};
use crate::error::{Error, Result};
use crate::latent::{LatentMlp, MlpConfig};
use crate::mesh::{Adjacency, TriMesh};
use crate::nn::ParamStore;
use crate::sim::SimConfig;

pub const MANIFEST_FILE: &str = "checkpoint.json";
const FORMAT_VERSION: u32 = 1;
const MESH_FILE: &str = "mesh.obj";
const AE_FILE: &str = "autoencoder.bin";
const MLP_FILE: &str = "mlp.bin";

/// Hex SHA-256 of the JSON serialization of `value`.
pub fn config_hash(value: &impl Serialize) -> Result<String> {
    let digest = Sha256::digest(serde_json::to_vec(value)?);
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorInfo {
    pub name: String,
    pub shape: Vec<usize>,
}

fn layer_plan(store: &ParamStore) -> Vec<TensorInfo> {
    store
        .tensors()
        .iter()
        .map(|t| TensorInfo {
            name: t.name.clone(),
            shape: t.shape.clone(),
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpSection {
    pub config: MlpConfig,
    pub latent_dim: usize,
    pub num_grasp: usize,
    pub file: String,
    pub layers: Vec<TensorInfo>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format_version: u32,
    /// Last training stage applied (1, 2 or 3).
    pub stage: u8,
    pub seed: u64,
    /// Hash of the run configuration that produced this checkpoint.
    pub config_hash: String,
    pub mesh_file: String,
    pub sim: SimConfig,
    pub autoencoder: AutoencoderConfig,
    pub normalizer: Normalizer,
    pub autoencoder_file: String,
    pub autoencoder_layers: Vec<TensorInfo>,
    pub mlp: Option<MlpSection>,
}

/// A trained autoencoder, optionally with its latent simulator, and the
/// mesh and simulator settings they were trained on.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub stage: u8,
    pub seed: u64,
    pub config_hash: String,
    /// Expected to be quantized (as dataset meshes are) so the OBJ copy is exact.
    pub mesh: TriMesh,
    pub sim: SimConfig,
    pub autoencoder: Autoencoder,
    pub mlp: Option<LatentMlp>,
}

impl Checkpoint {
    pub fn manifest(&self) -> CheckpointManifest {
        let ae = &self.autoencoder;
        CheckpointManifest {
            format_version: FORMAT_VERSION,
            stage: self.stage,
            seed: self.seed,
            config_hash: self.config_hash.clone(),
            mesh_file: MESH_FILE.into(),
            sim: self.sim.clone(),
            autoencoder: ae.cfg.clone(),
            normalizer: ae.norm.clone(),
            autoencoder_file: AE_FILE.into(),
            autoencoder_layers: layer_plan(&ae.store),
            mlp: self.mlp.as_ref().map(|m| MlpSection {
                config: m.cfg.clone(),
                latent_dim: m.latent_dim(),
                num_grasp: m.num_grasp(),
                file: MLP_FILE.into(),
                layers: layer_plan(&m.store),
            }),
        }
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        self.mesh.save_obj(dir.join(MESH_FILE))?;
        self.autoencoder.store.save(dir.join(AE_FILE))?;
        if let Some(m) = &self.mlp {
            m.store.save(dir.join(MLP_FILE))?;
        }
        write_atomic(
            dir.join(MANIFEST_FILE),
            serde_json::to_string_pretty(&self.manifest())?.as_bytes(),
        )
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let manifest: CheckpointManifest =
            serde_json::from_str(&fs::read_to_string(dir.join(MANIFEST_FILE))?)?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint version {}",
                manifest.format_version
            )));
        }
        let mesh = TriMesh::load_obj(dir.join(&manifest.mesh_file))?;
        manifest.sim.validate()?;
        if manifest.sim.num_vertices() != mesh.num_vertices() {
            return Err(Error::Format(
                "simulator settings do not match the checkpoint mesh".into(),
            ));
        }
        let mut autoencoder = Autoencoder::new(
            &Adjacency::build(&mesh),
            manifest.autoencoder.clone(),
            manifest.normalizer.clone(),
        )?;
        check_plan(&autoencoder.store, &manifest.autoencoder_layers)?;
        autoencoder
            .store
            .load_values_from(&ParamStore::load(dir.join(&manifest.autoencoder_file))?)?;
        let mlp = match &manifest.mlp {
            None => None,
            Some(s) => {
                let mut m = LatentMlp::new(s.latent_dim, s.num_grasp, s.config.clone())?;
                check_plan(&m.store, &s.layers)?;
                m.store
                    .load_values_from(&ParamStore::load(dir.join(&s.file))?)?;
                Some(m)
            }
        };
        Ok(Self {
            stage: manifest.stage,
            seed: manifest.seed,
            config_hash: manifest.config_hash,
            mesh,
            sim: manifest.sim,
            autoencoder,
            mlp,
        })
    }

    pub fn context(&self) -> Result<ShellContext> {
        ShellContext::new(&self.mesh, &self.sim)
    }
}

fn check_plan(store: &ParamStore, plan: &[TensorInfo]) -> Result<()> {
    if layer_plan(store) != plan {
        return Err(Error::Format(
            "layer plan in the manifest does not match the configured network".into(),
        ));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::make_sheet;
    use crate::sim::MaterialKind;

    #[test]
    fn save_and_load_restore_every_parameter() {
        let (mesh, grasp) = make_sheet(4, false).unwrap();
        let mesh = mesh.quantized();
        let sim = SimConfig::desk_default(mesh.num_vertices(), MaterialKind::FemShell, grasp);
        let cfg = AutoencoderConfig {
            latent_dim: 5,
            seed: 3,
            ..AutoencoderConfig::default()
        };
        let ae = Autoencoder::new(&Adjacency::build(&mesh), cfg, Normalizer::identity()).unwrap();
        let mlp = LatentMlp::new(
            5,
            2,
            MlpConfig {
                hidden: vec![7, 7],
                seed: 1,
                ..MlpConfig::default()
            },
        )
        .unwrap();
        let ck = Checkpoint {
            stage: 2,
            seed: 11,
            config_hash: config_hash(&"run").unwrap(),
            mesh,
            sim,
            autoencoder: ae,
            mlp: Some(mlp),
        };
        let dir = tempfile::tempdir().unwrap();
        ck.save(dir.path()).unwrap();
        let back = Checkpoint::load(dir.path()).unwrap();
        assert_eq!(back.manifest(), ck.manifest());
        assert_eq!(back.mesh, ck.mesh);
        assert_eq!(back.autoencoder.store.flat(), ck.autoencoder.store.flat());
        assert_eq!(
            back.mlp.unwrap().store.flat(),
            ck.mlp.as_ref().unwrap().store.flat()
        );

        let mut m = ck.manifest();
        m.autoencoder.latent_dim = 6;
        std::fs::write(
            dir.path().join(MANIFEST_FILE),
            serde_json::to_string(&m).unwrap(),
        )
        .unwrap();
        assert!(Checkpoint::load(dir.path()).is_err());
    }

    #[test]
    fn config_hash_is_stable_and_sensitive() {
        let a = config_hash(&MlpConfig::default()).unwrap();
        assert_eq!(a.len(), 64);
        assert_eq!(a, config_hash(&MlpConfig::default()).unwrap());
        let other = MlpConfig {
            seed: 1,
            ..MlpConfig::default()
        };
        assert_ne!(a, config_hash(&other).unwrap());
    }
}
