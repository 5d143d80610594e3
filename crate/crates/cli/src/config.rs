//! Run configuration: one JSON file per run, layered over built-in defaults.

use serde::{Deserialize, Serialize};
use serde_json::Value;

use shellflow::datagen::DatasetSpec;
use shellflow::embedding::{AutoencoderConfig, IkConfig, Stage1Config};
use shellflow::latent::{MlpConfig, Stage2Config, Stage3Config};
use shellflow::metrics::StedConfig;
use shellflow::{Error, MaterialKind, Result};

/// Default number of frames generated by `gen-data`.
pub const DEFAULT_FRAMES: usize = 136;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub dataset: DatasetSpec,
    pub autoencoder: AutoencoderConfig,
    pub mlp: MlpConfig,
    pub stage1: Stage1Config,
    pub stage2: Stage2Config,
    pub stage3: Stage3Config,
    pub sted: StedConfig,
    pub ik: IkConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetSpec::desk_sheet(MaterialKind::FemShell, DEFAULT_FRAMES),
            autoencoder: AutoencoderConfig::default(),
            mlp: MlpConfig::default(),
            stage1: Stage1Config::default(),
            stage2: Stage2Config::default(),
            stage3: Stage3Config::default(),
            sted: StedConfig::default(),
            ik: IkConfig::default(),
        }
    }
}

impl RunConfig {
    /// Defaults overlaid with `text`. Objects merge key by key; any other value
    /// replaces the default. Unknown keys are rejected.
    pub fn from_json(text: &str) -> Result<Self> {
        let user: Value = serde_json::from_str(text)?;
        let mut base = serde_json::to_value(Self::default())?;
        merge(&mut base, user, "")?;
        Ok(serde_json::from_value(base)?)
    }

    /// Applies a seed to data generation, initialization and every training stage.
    pub fn set_seed(&mut self, seed: u64) {
        self.dataset.seed = seed;
        self.autoencoder.seed = seed;
        self.mlp.seed = seed;
        self.stage1.seed = seed;
        self.stage2.seed = seed;
        self.stage3.seed = seed;
    }
}

fn merge(base: &mut Value, user: Value, path: &str) -> Result<()> {
    match (base, user) {
        (Value::Object(b), Value::Object(u)) => {
            // a tagged variant switch replaces the whole object
            if let (Some(bk), Some(uk)) = (b.get("kind"), u.get("kind")) {
                if bk != uk {
                    *b = u;
                    return Ok(());
                }
            }
            for (k, v) in u {
                let here = format!("{path}.{k}");
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v, &here)?,
                    None => {
                        return Err(Error::Config(format!(
                            "unknown key {}",
                            here.trim_start_matches('.')
                        )))
                    }
                }
            }
            Ok(())
        }
        (slot, v) => {
            *slot = v;
            Ok(())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use shellflow::datagen::MeshSpec;

    #[test]
    fn empty_object_gives_defaults() {
        assert_eq!(RunConfig::from_json("{}").unwrap(), RunConfig::default());
    }

    #[test]
    fn nested_override_keeps_siblings() {
        let c = RunConfig::from_json(r#"{"stage1": {"epochs": 3}, "dataset": {"frames": 40}}"#)
            .unwrap();
        assert_eq!(c.stage1.epochs, 3);
        assert_eq!(c.stage1.batch_size, Stage1Config::default().batch_size);
        assert_eq!(c.dataset.frames, 40);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let e = RunConfig::from_json(r#"{"stage1": {"epoch": 3}}"#).unwrap_err();
        assert!(e.to_string().contains("stage1.epoch"), "{e}");
    }

    #[test]
    fn mesh_kind_switch_replaces_the_mesh() {
        let c = RunConfig::from_json(
            r#"{"dataset": {"mesh": {"kind": "ball", "subdivisions": 1, "radius": 0.2}}}"#,
        )
        .unwrap();
        assert_eq!(
            c.dataset.mesh,
            MeshSpec::Ball {
                subdivisions: 1,
                radius: 0.2
            }
        );
    }
}
