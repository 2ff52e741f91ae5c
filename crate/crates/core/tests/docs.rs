use std::path::PathBuf;

use vxp::protocol::{check_doc_drift, render_protocol_docs};

fn doc_path() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../docs/PROTOCOLS.md")
}

#[test]
fn protocol_doc_matches_code() {
    let rendered = render_protocol_docs();
    let path = doc_path();
    if std::env::var_os("VXP_BLESS").is_some() {
        std::fs::write(&path, &rendered).unwrap();
    }
    let on_disk = std::fs::read_to_string(&path).expect("docs/PROTOCOLS.md exists; run with VXP_BLESS=1");
    check_doc_drift(&on_disk).unwrap();
    assert_eq!(on_disk, rendered, "docs/PROTOCOLS.md is stale; rerun with VXP_BLESS=1");
}

#[test]
fn documented_values_cover_core_constants() {
    let doc = render_protocol_docs();
    for needle in [
        "| triplet | margin | 0.3 |",
        "| triplet | expansion_rate | 1.4 |",
        "| triplet | max_batch | 256 |",
        "| triplet | zero_triplet_trigger | 0.3 |",
        "| tuples | positive_radius | 10 |",
        "| tuples | negative_radius | 25 |",
        "| kitti | revisit_min_gap | 10 |",
        "| kitti | sampling_interval | 20 |",
        "| voxels | input_grid_dims | 110 110 110 |",
        "| voxels | output_grid_dims | 28 28 28 |",
    ] {
        assert!(doc.contains(needle), "missing {needle}");
    }
}

#[test]
fn table_constants_match_live_defaults() {
    use vxp::geometry::VoxelGridConfig;
    use vxp::losses::TripletConfig;
    use vxp::protocol::{INPUT_GRID_DIMS, OUTPUT_GRID_DIMS};
    let grid = VoxelGridConfig::default();
    assert_eq!(grid.grid_dims(), INPUT_GRID_DIMS);
    let out = grid.frame().downsampled(2).downsampled(2);
    assert_eq!(out.dims, OUTPUT_GRID_DIMS);
    let t = TripletConfig::default();
    assert_eq!((t.margin, t.expansion_rate, t.max_batch), (0.3, 1.4, 256));
}
