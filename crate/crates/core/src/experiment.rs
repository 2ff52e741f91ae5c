//! The synthetic end-to-end experiment: generate scenes, run the three
//! training stages, and evaluate held-out retrieval.

use std::time::Instant;

use crate::geometry::ProjectionKind;
use crate::losses::LocalLossMode;
use crate::model::{sample_seed, ModelConfig, ModelError, VxpModel};
use crate::params::ParamSet;
use crate::retrieval::{build_index, evaluate, IndexEntry, Metric, Query, RecallSpec};
use crate::sparse3d::BackboneConfig;
use crate::synth::{generate_dataset, synthetic_projection, SyntheticSample, SyntheticSceneParams};
use crate::trainer::{LrMultiplier, train_stage_global, train_stage_image, train_stage_local, Dataset, Stage, StageConfig, StageOutput, TrainError, TrainSample};
use crate::retrieval::EvalProtocol;

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub synth: SyntheticSceneParams,
    pub scenes: usize,
    pub train_scenes: usize,
    pub traversals: usize,
    pub model: ModelConfig,
    pub image: StageConfig,
    pub local: StageConfig,
    pub global: StageConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let mut image = StageConfig::new(Stage::Image);
        image.epochs = 12;
        image.base_lr = 2e-3;
        image.batch_size = 16;
        let mut local = StageConfig::new(Stage::Local);
        local.epochs = 20;
        local.base_lr = 3e-3;
        local.batch_size = 8;
        local.local_mode = LocalLossMode::CollisionNormalized;
        let mut global = StageConfig::new(Stage::Global);
        global.epochs = 20;
        global.base_lr = 1e-3;
        global.batch_size = 8;
        global.backbone_lr_scale = 0.1;
        for c in [&mut image, &mut local, &mut global] {
            c.lr_multiplier = LrMultiplier::Constant;
        }
        Self {
            synth: SyntheticSceneParams {
                pose_jitter_m: 0.25,
                ..Default::default()
            },
            scenes: 128,
            train_scenes: 96,
            traversals: 2,
            model: ModelConfig {
                image_channels: [32, 64, 64],
                backbone: BackboneConfig::with_feature_dim(16, 64),
                ..Default::default()
            },
            image,
            local,
            global,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Retrieval {
    pub cross_modal: Vec<(RecallSpec, f64)>,
    pub image_to_image: Vec<(RecallSpec, f64)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentReport {
    pub image: StageOutput,
    pub local: StageOutput,
    pub global: StageOutput,
    pub retrieval: Retrieval,
    pub seconds: f64,
}

fn dataset(samples: &[SyntheticSample]) -> Dataset {
    Dataset {
        samples: samples
            .iter()
            .map(|s| TrainSample {
                id: s.id.clone(),
                position: s.position,
                image: s.image.clone(),
                cloud: s.cloud.clone(),
            })
            .collect(),
        projection: synthetic_projection(),
    }
}

pub fn split(cfg: &ExperimentConfig) -> Result<(Dataset, Dataset), TrainError> {
    let all = generate_dataset(&cfg.synth, cfg.scenes, cfg.traversals)
        .map_err(|e| TrainError::InvalidConfig(e.to_string()))?;
    let (train, test): (Vec<_>, Vec<_>) = all.into_iter().partition(|s| s.scene < cfg.train_scenes);
    Ok((dataset(&train), dataset(&test)))
}

/// Held-out retrieval: traversal-1 images query traversal-0 clouds (cross
/// modal) and traversal-0 images (uni-modal).
pub fn evaluate_held_out(test: &Dataset, params: &ParamSet, specs: &[RecallSpec]) -> Result<Retrieval, ModelError> {
    let model = VxpModel::from_params(params)?;
    let mut queries = Vec::new();
    let mut clouds = Vec::new();
    let mut images = Vec::new();
    for (i, s) in test.samples.iter().enumerate() {
        let (_, _, _, img_desc) = model.encode_image(params, &s.image)?;
        if s.id.ends_with("_t0") {
            let (_, pc_desc) = model.encode_cloud(params, &s.cloud, sample_seed(&s.id))?;
            clouds.push(IndexEntry {
                id: i as u64,
                descriptor: pc_desc,
                position: s.position,
                timestamp: None,
            });
            images.push(IndexEntry {
                id: i as u64,
                descriptor: img_desc,
                position: s.position,
                timestamp: None,
            });
        } else {
            queries.push(Query {
                descriptor: img_desc,
                position: s.position,
                timestamp: None,
            });
        }
    }
    let protocol = EvalProtocol::default();
    let cross = build_index(clouds, Metric::L2).map_err(|e| ModelError::Config(e.to_string()))?;
    let uni = build_index(images, Metric::L2).map_err(|e| ModelError::Config(e.to_string()))?;
    let run = |idx| evaluate(&queries, idx, &protocol, specs).map_err(|e| ModelError::Config(e.to_string()));
    Ok(Retrieval {
        cross_modal: run(&cross)?,
        image_to_image: run(&uni)?,
    })
}

/// Stages 2 and 3 from a stage-1 checkpoint with the given projection.
pub fn train_point_branch(
    train: &Dataset,
    stage1: &ParamSet,
    cfg: &ExperimentConfig,
    projection: ProjectionKind,
) -> Result<(StageOutput, StageOutput), TrainError> {
    let mut local = cfg.local.clone();
    local.projection = projection;
    let s2 = train_stage_local(train, stage1, &local)?;
    log::info!("stage local: loss {:.4} -> {:.4}", s2.initial_loss, s2.final_loss);
    let s3 = train_stage_global(train, &s2.params, &cfg.global)?;
    log::info!("stage global: loss {:.4} -> {:.4}", s3.initial_loss, s3.final_loss);
    Ok((s2, s3))
}

pub fn run_experiment(cfg: &ExperimentConfig, specs: &[RecallSpec]) -> Result<ExperimentReport, TrainError> {
    let t0 = Instant::now();
    let (train, test) = split(cfg)?;
    let model = VxpModel::new(cfg.model.clone())?;
    let s1 = train_stage_image(&train, &model, &cfg.image, None)?;
    log::info!("stage image: loss {:.4} -> {:.4}", s1.initial_loss, s1.final_loss);
    let (s2, s3) = train_point_branch(&train, &s1.params, cfg, ProjectionKind::Perspective)?;
    let retrieval = evaluate_held_out(&test, &s3.params, specs)?;
    Ok(ExperimentReport {
        image: s1,
        local: s2,
        global: s3,
        retrieval,
        seconds: t0.elapsed().as_secs_f64(),
    })
}
