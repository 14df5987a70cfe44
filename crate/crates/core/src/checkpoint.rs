//! JSON checkpoints: parameters plus everything needed to rebuild the
//! model around them.

use std::fs;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::LossWeights;
use crate::mesh::{SpectralBasis, TriMesh};
use crate::optim::ParamSet;
use crate::pipeline::{Model, ModelConfig};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub model: ModelConfig,
    pub loss_weights: LossWeights,
    /// Where the template was loaded from, if anywhere.
    pub mesh_path: Option<String>,
    /// [`TriMesh::content_hash`] of the template.
    pub mesh_hash: String,
    pub n_vertices: usize,
    /// Epochs trained so far.
    pub epochs: usize,
    pub params: ParamSet,
}

impl Checkpoint {
    pub fn new(model: &Model, params: &ParamSet, mesh_path: Option<String>, epochs: usize) -> Self {
        Checkpoint {
            format_version: FORMAT_VERSION,
            model: model.config.clone(),
            loss_weights: model.weights,
            mesh_path,
            mesh_hash: model.template.content_hash(),
            n_vertices: model.template.n_vertices(),
            epochs,
            params: params.clone(),
        }
    }

    /// Rebuilds the model, refusing a template other than the one trained on.
    pub fn bind(&self, template: Arc<TriMesh>, basis: Arc<SpectralBasis>) -> Result<Model> {
        if self.format_version != FORMAT_VERSION {
            return Err(Error::InvalidArgument(format!(
                "unsupported checkpoint format {}",
                self.format_version
            )));
        }
        if template.content_hash() != self.mesh_hash {
            return Err(Error::InvalidArgument(
                "template mesh does not match the checkpoint".into(),
            ));
        }
        Model::bind(template, basis, self.model.clone(), self.loss_weights, &self.params)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::primitives::icosahedron;
    use crate::mesh::spectral_basis;
    use crate::nn::MlpConfig;

    fn tiny() -> (Arc<TriMesh>, Arc<SpectralBasis>, Model, ParamSet) {
        let mesh = Arc::new(icosahedron());
        let basis = Arc::new(spectral_basis(&mesh, 4).unwrap());
        let cfg = ModelConfig {
            n_parts: 2,
            n_u: 4,
            phi: MlpConfig::narrow(8, 4, 1),
            psi: MlpConfig::narrow(8, 4, 1),
            ..Default::default()
        };
        let (model, params) = Model::new(mesh.clone(), basis.clone(), cfg, LossWeights::default(), 3).unwrap();
        (mesh, basis, model, params)
    }

    #[test]
    fn json_round_trip_is_exact() {
        let (mesh, basis, model, params) = tiny();
        let ck = Checkpoint::new(&model, &params, Some("ico.obj".into()), 0);
        let text = ck.to_json().unwrap();
        let back = Checkpoint::from_json(&text).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_json().unwrap(), text);
        let rebound = back.bind(mesh, basis).unwrap();
        assert_eq!(rebound.config, model.config);
    }

    #[test]
    fn save_and_load() {
        let (_, _, model, params) = tiny();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.json");
        let ck = Checkpoint::new(&model, &params, None, 5);
        ck.save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap(), ck);
        assert!(matches!(
            Checkpoint::load(&dir.path().join("missing.json")),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn rejects_a_different_template() {
        let (_, basis, model, params) = tiny();
        let ck = Checkpoint::new(&model, &params, None, 0);
        let moved = Arc::new(model.template.map_vertices(|v| v * 2.0));
        assert!(matches!(ck.bind(moved, basis), Err(Error::InvalidArgument(_))));
    }
}
