//! Deterministic single-scene-batch training loop.

mod checkpoint;
mod optimizer;

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, ParamEntry};
pub use optimizer::{Optimizer, OptimizerKind};

use crate::config::{LossConfig, ModelConfig};
use crate::error::{Error, Result};
use crate::matching::{total_loss, LossValues, SceneTargets};
use crate::model::Model;
use crate::scene::{Scene, SceneSetSpec};
use crate::tensor::Tape;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub seed: u64,
    pub lr: f64,
    pub steps: usize,
    pub optimizer: OptimizerKind,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub data: SceneSetSpec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            lr: 1e-3,
            steps: 500,
            optimizer: OptimizerKind::Adam,
            model: ModelConfig::default(),
            loss: LossConfig::default(),
            data: SceneSetSpec::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!(
                "train.lr {} must be finite and non-negative",
                self.lr
            )));
        }
        if self.data.max_instances > self.model.queries {
            return Err(Error::Config(format!(
                "model.queries {} is below data.max_instances {}",
                self.model.queries, self.data.max_instances
            )));
        }
        if self.data.num_classes != self.model.num_classes {
            return Err(Error::Config(format!(
                "data.num_classes {} differs from model.num_classes {}",
                self.data.num_classes, self.model.num_classes
            )));
        }
        Ok(())
    }
}

/// Loss terms recorded after the forward pass of one step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    /// 1-based step index.
    pub step: usize,
    pub scene: usize,
    pub values: LossValues,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    pub history: Vec<StepRecord>,
    /// Per parameter, whether any step produced a nonzero gradient entry.
    pub gradient_seen: Vec<bool>,
}

impl TrainOutcome {
    pub fn checkpoint(&self, config: &TrainConfig) -> Checkpoint {
        Checkpoint::from_model(&self.model, config, self.history.len())
    }

    /// Names of parameters that never received a nonzero gradient.
    pub fn dead_parameters(&self) -> Vec<String> {
        self.model
            .store
            .ids()
            .zip(&self.gradient_seen)
            .filter(|(_, &seen)| !seen)
            .map(|(id, _)| self.model.store.name(id).to_string())
            .collect()
    }
}

/// Tab-separated loss history with a header row.
pub fn history_tsv(history: &[StepRecord]) -> String {
    let mut out = String::from("step\tscene\ttotal\tcls\tbce\tdice\tscore\n");
    for r in history {
        let v = &r.values;
        let _ = writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}",
            r.step, r.scene, v.total, v.cls, v.bce, v.dice, v.score
        );
    }
    out
}

/// Trains a freshly initialized model. Scenes are visited round-robin.
pub fn train(config: &TrainConfig, scenes: &[Scene]) -> Result<TrainOutcome> {
    let model = Model::new(&config.model, config.seed)?;
    train_from(config, model, scenes)
}

/// Continues training `model` for `config.steps` steps.
pub fn train_from(config: &TrainConfig, mut model: Model, scenes: &[Scene]) -> Result<TrainOutcome> {
    config.validate()?;
    if scenes.is_empty() {
        return Err(Error::Contract("training needs at least one scene".into()));
    }
    let targets = scenes
        .iter()
        .map(SceneTargets::from_scene)
        .collect::<Result<Vec<_>>>()?;
    if let Some(t) = targets.iter().find(|t| t.num_instances() > config.model.queries) {
        return Err(Error::Config(format!(
            "a training scene has {} instances but model.queries is {}",
            t.num_instances(),
            config.model.queries
        )));
    }

    let mut optimizer = Optimizer::new(config.optimizer, config.lr, model.store.values());
    let mut history = Vec::with_capacity(config.steps);
    let mut gradient_seen = vec![false; model.store.len()];
    for step in 1..=config.steps {
        let idx = (step - 1) % scenes.len();
        let mut tape = Tape::new();
        let bound = model.store.bind(&mut tape);
        let out = model.forward(&mut tape, &bound, &scenes[idx], None)?;
        // Matching cannot run on non-finite predictions.
        for (h, head) in out.heads.iter().enumerate() {
            for (term, v) in [
                ("class", head.class_probs),
                ("score", head.scores),
                ("mask", head.masks),
            ] {
                if !tape.value(v).is_finite() {
                    return Err(Error::NonFinite {
                        step,
                        term: format!("{term} prediction of head {h}"),
                    });
                }
            }
        }
        let loss = total_loss(
            &mut tape,
            &out.heads,
            &targets[idx],
            &config.loss,
            config.model.iterative_prediction,
            None,
        )?;
        let values = loss.values(&tape);
        if let Some(term) = values.first_non_finite() {
            return Err(Error::NonFinite {
                step,
                term: term.to_string(),
            });
        }
        let grads = tape.backward(loss.total)?;
        let grads = bound.collect_grads(&model.store, &grads);
        for (i, g) in grads.iter().enumerate() {
            if !g.is_finite() {
                return Err(Error::NonFinite {
                    step,
                    term: format!(
                        "gradient of {}",
                        model.store.name(model.store.ids().nth(i).expect("index"))
                    ),
                });
            }
            gradient_seen[i] |= g.data().iter().any(|&x| x != 0.0);
        }
        optimizer.step(&mut model.store, &grads);
        history.push(StepRecord {
            step,
            scene: idx,
            values,
        });
    }
    Ok(TrainOutcome {
        model,
        history,
        gradient_seen,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::generate_scene_set;

    fn toy() -> TrainConfig {
        TrainConfig {
            steps: 4,
            model: ModelConfig {
                feature_dim: 8,
                hidden_dim: 8,
                embed_dim: 8,
                heads: 2,
                ffn_dim: 16,
                layers: 2,
                queries: 6,
                ..ModelConfig::default()
            },
            data: SceneSetSpec {
                num_scenes: 2,
                points_per_instance: 16,
                background_points: 16,
                ..SceneSetSpec::default()
            },
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let cfg = TrainConfig { lr: 0.0, ..toy() };
        let scenes = generate_scene_set(cfg.seed, &cfg.data).unwrap();
        let out = train(&cfg, &scenes).unwrap();
        let init = Model::new(&cfg.model, cfg.seed).unwrap();
        assert_eq!(out.model.store.values(), init.store.values());
        let sgd = TrainConfig {
            optimizer: OptimizerKind::Sgd,
            ..cfg
        };
        let out = train(&sgd, &scenes).unwrap();
        assert_eq!(out.model.store.values(), init.store.values());
    }

    #[test]
    fn same_config_same_result() {
        let cfg = toy();
        let scenes = generate_scene_set(cfg.seed, &cfg.data).unwrap();
        let a = train(&cfg, &scenes).unwrap();
        let b = train(&cfg, &scenes).unwrap();
        assert_eq!(a.model.store.values(), b.model.store.values());
        assert_eq!(history_tsv(&a.history), history_tsv(&b.history));
        assert_eq!(a.history.len(), 4);
        assert_eq!(a.history[1].scene, 1);
        assert_eq!(a.history[2].scene, 0);
    }

    #[test]
    fn too_few_queries_rejected() {
        let mut cfg = toy();
        cfg.model.queries = 2;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn non_finite_loss_names_step() {
        let mut cfg = toy();
        cfg.lr = 1e300;
        cfg.optimizer = OptimizerKind::Sgd;
        cfg.steps = 6;
        let scenes = generate_scene_set(cfg.seed, &cfg.data).unwrap();
        match train(&cfg, &scenes) {
            Err(Error::NonFinite { step, term }) => {
                assert!(step >= 2, "{step}");
                assert!(!term.is_empty());
            }
            other => panic!("expected a non-finite failure, got {other:?}"),
        }
    }
}
