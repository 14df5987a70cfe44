//! Shared fixtures for the benchmarks.

use std::sync::Arc;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use dp3d_core::data::{hinged_cylinder, synth_dataset, PoseSamplerConfig};
use dp3d_core::lie::Twist;
use dp3d_core::loss::KeypointSet;
use dp3d_core::mesh::{spectral_basis, SpectralBasis, TriMesh};
use dp3d_core::model::{init_part_model, PartModel, PoseParams};

/// The two-part cylinder with a 64-function basis and a 10-part model.
pub struct Fixture {
    pub mesh: Arc<TriMesh>,
    pub labels: Vec<usize>,
    pub basis: Arc<SpectralBasis>,
    pub parts: PartModel,
    pub pose: PoseParams,
}

impl Fixture {
    pub fn new() -> Self {
        let (mesh, labels) = hinged_cylinder();
        let mesh = Arc::new(mesh);
        let basis = Arc::new(spectral_basis(&mesh, 64).expect("basis"));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let parts = init_part_model(basis.clone(), 10, 32.0, &mut rng).expect("part model");
        let mut pose = PoseParams::identity(10);
        for t in &mut pose.twists {
            *t = Twist::new(
                Vector3::from_fn(|_, _| rng.random_range(-0.5..0.5)),
                Vector3::from_fn(|_, _| rng.random_range(-0.1..0.1)),
            );
        }
        Fixture {
            mesh,
            labels,
            basis,
            parts,
            pose,
        }
    }

    /// Synthetic keypoints for `n` instances.
    pub fn keypoints(&self, n: usize) -> Vec<KeypointSet> {
        synth_dataset(&self.mesh, &self.labels, &PoseSamplerConfig::default(), n, 0)
            .expect("dataset")
            .into_iter()
            .map(|d| d.keypoints)
            .collect()
    }
}

impl Default for Fixture {
    fn default() -> Self {
        Self::new()
    }
}
