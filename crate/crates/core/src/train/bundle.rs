use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::TrainConfig;
use crate::error::{Error, Result};
use crate::graph::{AttributeScaler, GraphBuilder};
use crate::model::{Model, ModelConfig};
use crate::scalar::Scalar;
use crate::scene::Vocabulary;
use crate::tensor::{checkpoint, ParamStore};

/// Appended to a checkpoint path for its JSON metadata.
pub const BUNDLE_SUFFIX: &str = ".meta.json";

/// Everything besides raw weights needed to rebuild and run a model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bundle {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub scaler: AttributeScaler,
    pub vocab: Vocabulary,
}

fn meta_path(checkpoint: &Path) -> PathBuf {
    let mut s = checkpoint.as_os_str().to_owned();
    s.push(BUNDLE_SUFFIX);
    PathBuf::from(s)
}

impl Bundle {
    pub fn graph_builder(&self) -> GraphBuilder {
        GraphBuilder::new(self.train.k, self.train.coord_weight, self.scaler.clone())
    }

    /// Writes the weights to `path` and this metadata beside it.
    pub fn save<T: Scalar>(&self, path: &Path, params: &ParamStore<T>) -> Result<()> {
        checkpoint::save(path, params)?;
        let meta = meta_path(path);
        fs::write(&meta, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(&meta, e))
    }

    pub fn load_meta(path: &Path) -> Result<Self> {
        let meta = meta_path(path);
        let text = fs::read_to_string(&meta).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                Error::DataMissing(meta.display().to_string())
            } else {
                Error::io(&meta, e)
            }
        })?;
        serde_json::from_str(&text).map_err(|e| Error::Malformed {
            path: meta,
            detail: e.to_string(),
        })
    }

    /// Metadata plus a model carrying the stored weights.
    pub fn load<T: Scalar>(path: &Path) -> Result<(Self, Model<T>)> {
        let bundle = Self::load_meta(path)?;
        let mut model = Model::<T>::new(bundle.model.clone(), 0)?;
        checkpoint::load_into(path, &mut model.params)?;
        Ok((bundle, model))
    }
}
