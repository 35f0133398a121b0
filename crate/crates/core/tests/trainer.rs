use spformer::config::ModelConfig;
use spformer::scene::{generate_scene_set, SceneSetSpec};
use spformer::train::{history_tsv, load_checkpoint, save_checkpoint, train, OptimizerKind, TrainConfig};
use spformer::Error;

fn toy_config(steps: usize) -> TrainConfig {
    TrainConfig {
        seed: 1,
        lr: 1e-3,
        steps,
        optimizer: OptimizerKind::Adam,
        model: ModelConfig {
            feature_dim: 16,
            hidden_dim: 16,
            embed_dim: 16,
            heads: 2,
            ffn_dim: 32,
            layers: 2,
            queries: 6,
            num_classes: 3,
            ..ModelConfig::default()
        },
        data: SceneSetSpec {
            num_scenes: 4,
            min_instances: 2,
            max_instances: 2,
            points_per_instance: 24,
            num_classes: 3,
            background_points: 24,
            ..SceneSetSpec::default()
        },
        ..TrainConfig::default()
    }
}

#[test]
fn toy_run_lowers_the_loss_and_reaches_every_parameter() {
    let cfg = toy_config(300);
    let scenes = generate_scene_set(cfg.seed, &cfg.data).unwrap();
    assert!(scenes.iter().all(|s| s.ground_truth().unwrap().num_instances() == 2));
    let out = train(&cfg, &scenes).unwrap();
    let first = out.history[0].values.total;
    let last = out.history[299].values.total;
    assert!(last < first, "loss went from {first} to {last}");
    assert!(out.dead_parameters().is_empty(), "dead: {:?}", out.dead_parameters());
}

#[test]
fn identical_configs_give_identical_checkpoints() {
    let cfg = toy_config(20);
    let scenes = generate_scene_set(cfg.seed, &cfg.data).unwrap();
    let a = train(&cfg, &scenes).unwrap();
    let b = train(&cfg, &scenes).unwrap();
    assert_eq!(a.checkpoint(&cfg).to_text(), b.checkpoint(&cfg).to_text());
    assert_eq!(history_tsv(&a.history), history_tsv(&b.history));
}

#[test]
fn checkpoint_file_reproduces_trained_outputs() {
    let cfg = toy_config(10);
    let scenes = generate_scene_set(cfg.seed, &cfg.data).unwrap();
    let out = train(&cfg, &scenes).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("checkpoint.json");
    save_checkpoint(&out.checkpoint(&cfg), &path).unwrap();
    let ckpt = load_checkpoint(&path).unwrap();
    assert_eq!(ckpt.step, 10);
    assert_eq!(ckpt.config, cfg);
    let restored = ckpt.to_model().unwrap();
    for scene in &scenes {
        let a = out.model.infer(scene).unwrap();
        let b = restored.infer(scene).unwrap();
        assert_eq!(a.predictions, b.predictions);
        assert_eq!(a.cross_attention, b.cross_attention);
    }
}

#[test]
fn three_layer_checkpoint_rejects_six_layer_config() {
    let mut cfg = toy_config(1);
    cfg.model.layers = 3;
    let scenes = generate_scene_set(cfg.seed, &cfg.data).unwrap();
    let ckpt = train(&cfg, &scenes).unwrap().checkpoint(&cfg);
    let deeper = ModelConfig {
        layers: 6,
        ..cfg.model.clone()
    };
    match ckpt.to_model_with(&deeper) {
        Err(Error::Checkpoint(msg)) => {
            assert!(msg.contains("shape mismatch"), "{msg}");
            assert!(msg.contains("decoder.layer4"), "{msg}");
        }
        other => panic!("expected a checkpoint error, got {other:?}"),
    }
}
