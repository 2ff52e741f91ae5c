use vxp::experiment::{split, ExperimentConfig};
use vxp::sparse3d::BackboneConfig;
use vxp::trainer::{image_branch_unchanged, train_stage_global, train_stage_image, train_stage_local, Dataset};
use vxp::{ModelConfig, VxpModel};

fn tiny() -> ExperimentConfig {
    let mut cfg = ExperimentConfig {
        scenes: 4,
        train_scenes: 4,
        model: ModelConfig {
            image_channels: [4, 8, 8],
            backbone: BackboneConfig::with_feature_dim(4, 8),
            descriptor_dim: 16,
            ..Default::default()
        },
        ..Default::default()
    };
    cfg.synth.points_per_cloud = 512;
    cfg.synth.image_width = 32;
    cfg.synth.image_height = 32;
    cfg.image.epochs = 2;
    cfg.image.batch_size = 8;
    cfg
}

fn one_pair(data: &Dataset) -> Dataset {
    let mut d = data.clone();
    d.samples.retain(|s| s.id.starts_with("s0000"));
    assert_eq!(d.samples.len(), 2);
    d
}

#[test]
fn point_stages_overfit_a_single_pair() {
    let mut cfg = tiny();
    let (train, _) = split(&cfg).unwrap();
    let model = VxpModel::new(cfg.model.clone()).unwrap();
    let s1 = train_stage_image(&train, &model, &cfg.image, None).unwrap();
    let pair = one_pair(&train);

    cfg.local.epochs = 150;
    cfg.local.base_lr = 1e-2;
    cfg.local.batch_size = 2;
    let s2 = train_stage_local(&pair, &s1.params, &cfg.local).unwrap();
    assert!(s2.final_loss < 0.2 * s2.initial_loss, "local {} -> {}", s2.initial_loss, s2.final_loss);
    assert!(image_branch_unchanged(&s1.params, &s2.params));

    cfg.global.epochs = 200;
    cfg.global.base_lr = 1e-2;
    cfg.global.batch_size = 2;
    cfg.global.backbone_lr_scale = 1.0;
    let s3 = train_stage_global(&pair, &s2.params, &cfg.global).unwrap();
    assert!(s3.final_loss < 0.1 * s3.initial_loss, "global {} -> {}", s3.initial_loss, s3.final_loss);
    assert!(image_branch_unchanged(&s1.params, &s3.params));
}

#[test]
fn image_stage_lowers_triplet_loss() {
    let mut cfg = tiny();
    cfg.image.epochs = 10;
    let (train, _) = split(&cfg).unwrap();
    let model = VxpModel::new(cfg.model.clone()).unwrap();
    let s1 = train_stage_image(&train, &model, &cfg.image, None).unwrap();
    assert!(s1.final_loss < s1.initial_loss, "{} -> {}", s1.initial_loss, s1.final_loss);
    assert!(s1.params.is_finite());
    assert!(!s1.history.is_empty());
}
