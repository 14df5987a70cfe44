//! Run configuration: one JSON file plus command-line overrides.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use dp3d_core::data::{segmented_cylinder, Corruption, PoseSamplerConfig};
use dp3d_core::loss::LossWeights;
use dp3d_core::mesh::{load_mesh, primitives, TriMesh};
use dp3d_core::nn::MlpConfig;
use dp3d_core::optim::OptimizerConfig;
use dp3d_core::pipeline::{FitConfig, ModelConfig, ModelVariant};

use crate::error::{CliError, CliResult};

/// Network and head settings that are not part of the top-level knobs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    pub phi: MlpConfig,
    pub psi: MlpConfig,
    pub n_blendshapes: usize,
    pub heteroscedastic: bool,
    pub uncertainty_hidden: usize,
    pub camera_scale: bool,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        let m = ModelConfig::default();
        NetworkConfig {
            phi: m.phi,
            psi: m.psi,
            n_blendshapes: m.n_blendshapes,
            heteroscedastic: m.heteroscedastic,
            uncertainty_hidden: m.uncertainty_hidden,
            camera_scale: m.camera_scale,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_instances: usize,
    pub pose: PoseSamplerConfig,
    pub corruption: Option<Corruption>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_instances: 200,
            pose: PoseSamplerConfig::default(),
            corruption: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// A mesh file (OBJ or PLY) or a built-in shape:
    /// `builtin:hinged_cylinder`, `builtin:chain:<segments>`,
    /// `builtin:icosphere:<levels>`, `builtin:icosahedron`.
    pub mesh: String,
    /// Ground-truth part labels, one integer per line. Built-in cylinders
    /// carry their own.
    pub labels: Option<PathBuf>,
    /// Precomputed basis from `lbo`; computed on the fly otherwise.
    pub basis: Option<PathBuf>,
    pub n_u: usize,
    /// Several values train one model each.
    pub m_parts: Vec<usize>,
    pub sigma_bar: f64,
    pub variant: ModelVariant,
    pub network: NetworkConfig,
    pub loss_weights: LossWeights,
    pub optimizer: OptimizerConfig,
    pub fit: FitConfig,
    pub synth: SynthConfig,
    /// Input dataset (JSON lines).
    pub dataset: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    /// Posed vertices to score, as written by `fit`.
    pub predictions: Option<PathBuf>,
    /// CSV joint regressor for `eval`; identity when absent.
    pub joint_regressor: Option<PathBuf>,
    /// Eigenfunction previews written by `lbo`; all of them when absent.
    pub n_preview: Option<usize>,
    /// Instances exported by `export`; all of them when absent.
    pub max_export: Option<usize>,
    pub out_dir: PathBuf,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let m = ModelConfig::default();
        RunConfig {
            mesh: "builtin:hinged_cylinder".into(),
            labels: None,
            basis: None,
            n_u: m.n_u,
            m_parts: vec![m.n_parts],
            sigma_bar: m.sigma_bar,
            variant: m.variant,
            network: NetworkConfig::default(),
            loss_weights: LossWeights::default(),
            optimizer: OptimizerConfig::default(),
            fit: FitConfig::default(),
            synth: SynthConfig::default(),
            dataset: None,
            checkpoint: None,
            predictions: None,
            joint_regressor: None,
            n_preview: None,
            max_export: None,
            out_dir: PathBuf::from("out"),
            seed: 0,
        }
    }
}

/// A template and, when known, its ground-truth part labels.
pub struct Template {
    pub mesh: TriMesh,
    pub labels: Option<Vec<usize>>,
}

impl RunConfig {
    pub fn from_json_file(path: &Path) -> CliResult<Self> {
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }

    /// Model configuration for one entry of `m_parts`.
    pub fn model_config(&self, n_parts: usize) -> ModelConfig {
        ModelConfig {
            variant: self.variant,
            n_parts,
            n_u: self.n_u,
            sigma_bar: self.sigma_bar,
            n_blendshapes: self.network.n_blendshapes,
            phi: self.network.phi,
            psi: self.network.psi,
            heteroscedastic: self.network.heteroscedastic,
            uncertainty_hidden: self.network.uncertainty_hidden,
            camera_scale: self.network.camera_scale,
        }
    }

    pub fn load_template(&self) -> CliResult<Template> {
        let (mesh, mut labels) = builtin_mesh(&self.mesh)?.map_or_else(
            || Ok::<_, CliError>((load_mesh(&self.mesh)?, None)),
            Ok,
        )?;
        if let Some(path) = &self.labels {
            labels = Some(read_labels(path)?);
        }
        if let Some(l) = &labels {
            if l.len() != mesh.n_vertices() {
                return Err(CliError::Config(format!(
                    "{} labels for {} vertices",
                    l.len(),
                    mesh.n_vertices()
                )));
            }
        }
        Ok(Template { mesh, labels })
    }

    /// Checks every setting against the template before any work starts.
    pub fn validate(&self, template: &TriMesh) -> CliResult<()> {
        if self.m_parts.is_empty() {
            return Err(CliError::Config("m_parts must list at least one value".into()));
        }
        for &m in &self.m_parts {
            self.model_config(m).validate(template.n_vertices())?;
        }
        self.loss_weights.validate()?;
        self.optimizer.validate()?;
        self.fit.validate()?;
        self.synth.pose.validate()?;
        if let Some(c) = &self.synth.corruption {
            c.validate()?;
        }
        if self.n_preview.is_some_and(|n| n > self.n_u) {
            return Err(CliError::Config("n_preview exceeds n_u".into()));
        }
        Ok(())
    }

    pub fn require<'a>(&self, field: &'a Option<PathBuf>, name: &str) -> CliResult<&'a Path> {
        field
            .as_deref()
            .ok_or_else(|| CliError::Config(format!("`{name}` is required for this command")))
    }
}

fn builtin_mesh(spec: &str) -> CliResult<Option<(TriMesh, Option<Vec<usize>>)>> {
    let Some(rest) = spec.strip_prefix("builtin:") else {
        return Ok(None);
    };
    let mut it = rest.split(':');
    let name = it.next().unwrap_or("");
    let arg = it
        .next()
        .map(|a| {
            a.parse::<usize>()
                .map_err(|_| CliError::Config(format!("bad built-in mesh argument `{a}`")))
        })
        .transpose()?;
    let mesh = match (name, arg) {
        ("hinged_cylinder", None) => {
            let (m, l) = dp3d_core::data::hinged_cylinder();
            (m, Some(l))
        }
        ("chain", Some(n)) if n >= 1 => {
            let (m, l) = chain_mesh(n);
            (m, Some(l))
        }
        ("icosphere", Some(levels)) if levels <= 6 => (primitives::icosphere(levels), None),
        ("icosahedron", None) => (primitives::icosahedron(), None),
        _ => return Err(CliError::Config(format!("unknown built-in mesh `{spec}`"))),
    };
    Ok(Some(mesh))
}

/// An `n`-segment articulated cylinder with rings spread evenly over the
/// segments.
pub fn chain_mesh(n_segments: usize) -> (TriMesh, Vec<usize>) {
    segmented_cylinder(n_segments, 0.1, 16, 6 * n_segments + 1)
}

pub fn read_labels(path: &Path) -> CliResult<Vec<usize>> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| {
            l.trim()
                .parse()
                .map_err(|_| CliError::Config(format!("{}:{}: bad label `{}`", path.display(), n + 1, l.trim())))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_json() {
        let c = RunConfig::default();
        let back: RunConfig = serde_json::from_str(&c.to_json()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn partial_json_fills_defaults() {
        let c: RunConfig = serde_json::from_str(r#"{"n_u": 8, "optimizer": {"epochs": 3}}"#).unwrap();
        assert_eq!(c.n_u, 8);
        assert_eq!(c.optimizer.epochs, 3);
        assert_eq!(c.optimizer.momentum, 0.99);
        assert_eq!(c.m_parts, vec![10]);
    }

    #[test]
    fn unknown_fields_are_rejected() {
        assert!(serde_json::from_str::<RunConfig>(r#"{"n_uu": 8}"#).is_err());
    }

    #[test]
    fn builtin_meshes_resolve() {
        let c = RunConfig {
            mesh: "builtin:icosphere:1".into(),
            ..Default::default()
        };
        let t = c.load_template().unwrap();
        assert_eq!(t.mesh.n_vertices(), 42);
        assert!(t.labels.is_none());
        let t = RunConfig::default().load_template().unwrap();
        assert_eq!(t.labels.unwrap().len(), t.mesh.n_vertices());
        let (m, l) = chain_mesh(6);
        assert_eq!(l.iter().max(), Some(&5));
        assert_eq!(l.len(), m.n_vertices());
        for bad in ["builtin:torus", "builtin:icosphere:x", "builtin:chain"] {
            let c = RunConfig {
                mesh: bad.into(),
                ..Default::default()
            };
            assert!(matches!(c.load_template(), Err(CliError::Config(_))), "{bad}");
        }
    }

    #[test]
    fn validation_catches_bad_settings() {
        let t = primitives::icosahedron();
        let ok = RunConfig {
            n_u: 12,
            ..Default::default()
        };
        ok.validate(&t).unwrap();
        let too_many = RunConfig { n_u: 13, ..ok.clone() };
        assert!(too_many.validate(&t).is_err());
        let no_parts = RunConfig {
            m_parts: vec![],
            ..ok.clone()
        };
        assert!(no_parts.validate(&t).is_err());
        let mut bad_opt = ok.clone();
        bad_opt.optimizer.momentum = 1.0;
        assert!(bad_opt.validate(&t).is_err());
        let bad_corruption = RunConfig {
            synth: SynthConfig {
                corruption: Some(Corruption::Sparsify { keep_fraction: 1.5 }),
                ..Default::default()
            },
            ..ok
        };
        assert!(bad_corruption.validate(&t).is_err());
    }
}
