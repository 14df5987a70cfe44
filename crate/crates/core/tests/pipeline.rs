use std::sync::Arc;

use dp3d_core::checkpoint::Checkpoint;
use dp3d_core::data::{read_dataset, synth_dataset, write_dataset, PoseSamplerConfig};
use dp3d_core::eval::{evaluate, JointRegressor, Scored};
use dp3d_core::loss::{loss_reprojection, KeypointSet, LossWeights};
use dp3d_core::mesh::{spectral_basis, TriMesh};
use dp3d_core::nn::MlpConfig;
use dp3d_core::optim::{train, OptimizerConfig, TrainStatus};
use dp3d_core::pipeline::{Model, ModelConfig, TrainObjective};

fn chain() -> (Arc<TriMesh>, Vec<usize>) {
    let (mesh, labels) = dp3d_core::data::segmented_cylinder(2, 0.1, 10, 9);
    (Arc::new(mesh), labels)
}

fn small_model(mesh: &Arc<TriMesh>, seed: u64) -> (Model, dp3d_core::optim::ParamSet) {
    let basis = Arc::new(spectral_basis(mesh, 8).unwrap());
    let config = ModelConfig {
        n_parts: 3,
        n_u: 8,
        phi: MlpConfig::narrow(32, 16, 1),
        psi: MlpConfig::narrow(32, 16, 1),
        ..Default::default()
    };
    Model::new(mesh.clone(), basis, config, LossWeights::default(), seed).unwrap()
}

#[test]
fn synthetic_ground_truth_reprojects_exactly() {
    let (mesh, labels) = chain();
    let data = synth_dataset(&mesh, &labels, &PoseSamplerConfig::default(), 8, 3).unwrap();
    let areas = vec![1.0; mesh.n_vertices()];
    for d in &data {
        let gt = d.gt_vertices.as_ref().unwrap();
        let l = loss_reprojection(gt, &dp3d_core::lie::RigidTransform::identity(), &d.keypoints, &areas, 0.01).unwrap();
        assert!(l < 1e-10, "{}: {l}", d.id);
    }
    let items: Vec<Scored> = data
        .iter()
        .map(|d| Scored {
            id: &d.id,
            pred: d.gt_vertices.as_ref().unwrap(),
            gt: d.gt_vertices.as_ref().unwrap(),
            keypoints: &d.keypoints,
        })
        .collect();
    let r = evaluate(&items, &JointRegressor::identity(mesh.n_vertices())).unwrap();
    assert_eq!((r.mpjpe, r.reprojection), (0.0, 0.0));
}

#[test]
fn datasets_survive_a_file_round_trip() {
    let (mesh, labels) = chain();
    let data = synth_dataset(&mesh, &labels, &PoseSamplerConfig::default(), 4, 9).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.jsonl");
    write_dataset(&path, &data).unwrap();
    assert_eq!(read_dataset(&path).unwrap(), data);
}

#[test]
fn short_training_lowers_the_loss_and_checkpoints_reproduce_predictions() {
    let (mesh, labels) = chain();
    let data = synth_dataset(&mesh, &labels, &PoseSamplerConfig::default(), 24, 1).unwrap();
    let kps: Vec<KeypointSet> = data.iter().map(|d| d.keypoints.clone()).collect();
    let (model, params) = small_model(&mesh, 4);
    let opt = OptimizerConfig {
        epochs: 15,
        batch_size: 8,
        learning_rate: 3e-4,
        lr_scale: [("part.w".to_string(), 100.0)].into_iter().collect(),
        ..Default::default()
    };
    let out = train(params, &TrainObjective { model: &model, data: &kps }, &opt, |_| {}).unwrap();
    assert_eq!(out.status, TrainStatus::Completed);
    let first = out.history.first().unwrap().loss.total;
    let last = out.history.last().unwrap().loss.total;
    assert!(last < first, "{first} -> {last}");

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck.json");
    Checkpoint::new(&model, &out.params, None, out.history.len()).save(&path).unwrap();
    let ck = Checkpoint::load(&path).unwrap();
    let restored = ck.bind(mesh.clone(), model.basis.clone()).unwrap();
    let refs: Vec<&KeypointSet> = kps.iter().take(3).collect();
    assert_eq!(
        restored.predict(&ck.params, &refs).unwrap(),
        model.predict(&out.params, &refs).unwrap()
    );
}
