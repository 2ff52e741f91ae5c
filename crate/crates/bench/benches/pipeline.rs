use criterion::{black_box, criterion_group, criterion_main, BatchSize, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vxp::geometry::voxelize;
use vxp::retrieval::{build_index, IndexEntry, Metric};
use vxp::sparse3d::{BackboneConfig, PointBackbone};
use vxp::synth::{generate_synthetic_scene, SyntheticSceneParams};
use vxp::{ModelConfig, ParamSet, VoxelGridConfig, VxpModel};

fn cloud() -> vxp::PointCloud {
    generate_synthetic_scene(&SyntheticSceneParams::default(), 42, 0).unwrap().cloud
}

fn bench_voxelize(c: &mut Criterion) {
    let cloud = cloud();
    let cfg = VoxelGridConfig::default();
    c.bench_function("voxelize_2048", |b| b.iter(|| voxelize(black_box(&cloud), &cfg, 7).unwrap()));
}

fn bench_backbone(c: &mut Criterion) {
    let cloud = cloud();
    let config = BackboneConfig::default();
    let backbone = PointBackbone::new(config.clone());
    let mut params = ParamSet::new();
    backbone.init(&mut params, &mut ChaCha8Rng::seed_from_u64(1));
    let grid = voxelize(&cloud, &config.voxel, 7).unwrap();
    c.bench_function("sparse_backbone_forward", |b| b.iter(|| backbone.encode(black_box(&grid), &params).unwrap()));
}

fn bench_encode(c: &mut Criterion) {
    let scene = generate_synthetic_scene(&SyntheticSceneParams::default(), 42, 0).unwrap();
    let model = VxpModel::new(ModelConfig::default()).unwrap();
    let mut params = ParamSet::new();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    model.init_image_branch(&mut params, &mut rng);
    model.init_backbone(&mut params, &mut rng);
    model.init_point_head(&mut params, &mut rng);
    c.bench_function("encode_image_64x64", |b| b.iter(|| model.encode_image(&params, black_box(&scene.image)).unwrap()));
    c.bench_function("encode_cloud_2048", |b| b.iter(|| model.encode_cloud(&params, black_box(&scene.cloud), 5).unwrap()));
}

fn bench_knn(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let entries: Vec<IndexEntry> = (0..1000)
        .map(|i| IndexEntry {
            id: i,
            descriptor: (0..256).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            position: [i as f64, 0.0, 0.0],
            timestamp: None,
        })
        .collect();
    let index = build_index(entries, Metric::L2).unwrap();
    let q: Vec<f64> = (0..256).map(|_| rng.gen_range(-1.0..1.0)).collect();
    c.bench_function("knn_1000x256_k25", |b| b.iter(|| index.query_knn(black_box(&q), 25).unwrap()));
    c.bench_function("build_index_1000x256", |b| {
        b.iter_batched(|| index.entries().to_vec(), |e| build_index(e, Metric::L2).unwrap(), BatchSize::LargeInput)
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(20);
    targets = bench_voxelize, bench_backbone, bench_encode, bench_knn
}
criterion_main!(benches);
