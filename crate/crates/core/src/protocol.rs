//! Protocol constants and their rendered documentation.
//!
//! Every numeric default that defines the training or evaluation protocol is
//! declared here once. Code uses the constants directly; [`constants`] lists
//! them with provenance so `docs/PROTOCOLS.md` can be generated from, and
//! checked against, the same table.

use std::fmt::Write as _;

use thiserror::Error;

/// Positive pair radius for training tuples, meters.
pub const POSITIVE_RADIUS_M: f64 = 10.0;
/// Negative pair radius for training tuples, meters.
pub const NEGATIVE_RADIUS_M: f64 = 25.0;
pub const TRIPLET_MARGIN: f64 = 0.3;
/// Zero-triplet fraction above which the batch grows.
pub const ZERO_TRIPLET_TRIGGER: f64 = 0.30;
pub const BATCH_EXPANSION_RATE: f64 = 1.4;
pub const MAX_BATCH_SIZE: usize = 256;
pub const SMOOTH_L1_BETA: f64 = 1.0;
pub const GEM_P_INIT: f64 = 3.0;
pub const IMAGE_DOWNSAMPLE: usize = 8;

pub const VOXEL_RANGE_MIN: [f64; 3] = [0.0, -22.0, -4.0];
pub const VOXEL_RANGE_MAX: [f64; 3] = [44.0, 22.0, 18.0];
pub const VOXEL_SIZE: [f64; 3] = [0.4, 0.4, 0.2];
pub const MAX_POINTS_PER_VOXEL: usize = 32;
pub const INPUT_GRID_DIMS: [usize; 3] = [110, 110, 110];
pub const OUTPUT_GRID_DIMS: [usize; 3] = [28, 28, 28];
pub const CONV_STRIDE: usize = 2;

/// Retrieval success radius, meters.
pub const SUCCESS_RADIUS_M: f64 = 25.0;
pub const REVISIT_MIN_GAP_S: f64 = 10.0;
pub const KITTI_SAMPLING_INTERVAL_M: f64 = 20.0;
pub const KITTI_SAMPLING_OFFSET_M: f64 = 5.0;
pub const RECALL_CURVE_MAX_K: usize = 25;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;
pub const LR_DECAY_PER_EPOCH: f64 = 0.9;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Provenance {
    /// Value taken from the published method description.
    Reported,
    /// Value chosen for this implementation.
    Chosen,
}

impl Provenance {
    pub fn label(self) -> &'static str {
        match self {
            Provenance::Reported => "reported",
            Provenance::Chosen => "chosen",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProtocolConstant {
    pub protocol: &'static str,
    pub key: &'static str,
    pub value: String,
    pub unit: &'static str,
    pub provenance: Provenance,
    pub note: &'static str,
}

fn fmt_triple<T: std::fmt::Display>(v: [T; 3]) -> String {
    format!("{} {} {}", v[0], v[1], v[2])
}

pub fn constants() -> Vec<ProtocolConstant> {
    use Provenance::*;
    let c = |protocol, key, value: String, unit, provenance, note| ProtocolConstant {
        protocol,
        key,
        value,
        unit,
        provenance,
        note,
    };
    vec![
        c("tuples", "positive_radius", POSITIVE_RADIUS_M.to_string(), "m", Reported, "pairs strictly closer are positives"),
        c("tuples", "negative_radius", NEGATIVE_RADIUS_M.to_string(), "m", Reported, "pairs strictly farther are negatives"),
        c("triplet", "margin", TRIPLET_MARGIN.to_string(), "", Reported, "hinge margin of the batch-hard triplet loss"),
        c("triplet", "zero_triplet_trigger", ZERO_TRIPLET_TRIGGER.to_string(), "fraction", Reported, "strict: expand only when the per-batch ratio exceeds it"),
        c("triplet", "expansion_rate", BATCH_EXPANSION_RATE.to_string(), "", Reported, "new batch = ceil(batch * rate)"),
        c("triplet", "max_batch", MAX_BATCH_SIZE.to_string(), "samples", Reported, "expansion cap"),
        c("losses", "smooth_l1_beta", SMOOTH_L1_BETA.to_string(), "", Chosen, "transition point of the smooth-L1 loss"),
        c("heads", "gem_p_init", GEM_P_INIT.to_string(), "", Chosen, "initial GeM exponent"),
        c("heads", "image_downsample", IMAGE_DOWNSAMPLE.to_string(), "", Reported, "feature map is (H // 8, W // 8)"),
        c("voxels", "range_min", fmt_triple(VOXEL_RANGE_MIN), "m", Reported, "lower corner of the cropped point range"),
        c("voxels", "range_max", fmt_triple(VOXEL_RANGE_MAX), "m", Reported, "upper corner, exclusive"),
        c("voxels", "voxel_size", fmt_triple(VOXEL_SIZE), "m", Reported, "input voxel edge lengths"),
        c("voxels", "max_points_per_voxel", MAX_POINTS_PER_VOXEL.to_string(), "points", Chosen, "overflow is uniformly subsampled with a seed"),
        c("voxels", "input_grid_dims", fmt_triple(INPUT_GRID_DIMS), "cells", Reported, "ceil(range / voxel_size)"),
        c("voxels", "output_grid_dims", fmt_triple(OUTPUT_GRID_DIMS), "cells", Reported, "after two stride-2 sparse convolutions"),
        c("voxels", "conv_stride", CONV_STRIDE.to_string(), "", Chosen, "stride of each of the two default sparse convolutions"),
        c("retrieval", "success_radius", SUCCESS_RADIUS_M.to_string(), "m", Chosen, "a retrieval is correct within this distance"),
        c("kitti", "revisit_min_gap", REVISIT_MIN_GAP_S.to_string(), "s", Reported, "database entries must be strictly older than this"),
        c("kitti", "sampling_interval", KITTI_SAMPLING_INTERVAL_M.to_string(), "m", Reported, "queries and database sampled along the trajectory"),
        c("kitti", "sampling_offset", KITTI_SAMPLING_OFFSET_M.to_string(), "m", Reported, "start offset of the query sampling"),
        c("retrieval", "recall_curve_max_k", RECALL_CURVE_MAX_K.to_string(), "", Reported, "recall@K curve spans K = 1..25"),
        c("optimizer", "adam_beta1", ADAM_BETA1.to_string(), "", Chosen, "first moment decay"),
        c("optimizer", "adam_beta2", ADAM_BETA2.to_string(), "", Chosen, "second moment decay"),
        c("optimizer", "adam_eps", ADAM_EPS.to_string(), "", Chosen, "denominator guard"),
        c("optimizer", "lr_decay_per_epoch", LR_DECAY_PER_EPOCH.to_string(), "", Chosen, "lr = base * decay^epoch"),
    ]
}

#[derive(Debug, Error, PartialEq)]
pub enum DriftError {
    #[error("documented {key} = {documented} but code has {code}")]
    DriftDetected {
        key: String,
        documented: String,
        code: String,
    },
    #[error("constant {0} missing from the documentation")]
    Missing(String),
}

const TABLE_HEADER: &str = "| protocol | key | value | unit | source | notes |";

/// Renders the protocol reference as markdown.
pub fn render_protocol_docs() -> String {
    let mut s = String::new();
    s.push_str("# Protocol constants\n\n");
    s.push_str("Generated from `vxp::protocol::constants()`. Do not edit by hand; run\n");
    s.push_str("`VXP_BLESS=1 cargo test -p vxp-core --test docs` after changing a default.\n\n");
    s.push_str("Source `reported` marks values taken from the published method; `chosen`\n");
    s.push_str("marks values picked for this implementation where none was published.\n\n");
    s.push_str(TABLE_HEADER);
    s.push('\n');
    s.push_str("|---|---|---|---|---|---|\n");
    for c in constants() {
        let _ = writeln!(
            s,
            "| {} | {} | {} | {} | {} | {} |",
            c.protocol,
            c.key,
            c.value,
            c.unit,
            c.provenance.label(),
            c.note
        );
    }
    s.push_str(PROTOCOL_PROSE);
    s
}

/// Compares a rendered document against the code constants.
pub fn check_doc_drift(doc: &str) -> Result<(), DriftError> {
    let mut documented = std::collections::HashMap::new();
    for line in doc.lines().filter(|l| l.starts_with("| ") && *l != TABLE_HEADER) {
        let cells: Vec<&str> = line.trim_matches('|').split('|').map(str::trim).collect();
        if cells.len() >= 3 {
            documented.insert(format!("{}.{}", cells[0], cells[1]), cells[2].to_string());
        }
    }
    for c in constants() {
        let key = format!("{}.{}", c.protocol, c.key);
        match documented.get(&key) {
            None => return Err(DriftError::Missing(key)),
            Some(v) if *v != c.value => {
                return Err(DriftError::DriftDetected {
                    key,
                    documented: v.clone(),
                    code: c.value,
                })
            }
            Some(_) => {}
        }
    }
    Ok(())
}

const PROTOCOL_PROSE: &str = r#"
## Training tuples

For every anchor, positives are the samples whose Euclidean position
distance is below `positive_radius`, negatives those above
`negative_radius`. Samples in between are neither. Anchors without a positive
are dropped and counted.

## Batch-hard triplet training

Per anchor in a batch the farthest positive and the nearest negative (in
descriptor L2 distance, ties to the lowest index) form the triplet. When the
share of anchors whose hinge term is zero exceeds `zero_triplet_trigger`, the
next batch size is `min(ceil(batch * expansion_rate), max_batch)`.

## Plain evaluation

Every query retrieves the K nearest database descriptors. A query counts as
a success when one of them lies within `success_radius` of the query's
position. Queries with no database entry inside the radius are excluded and
reported. Recall@1% uses `K = max(1, ceil(N / 100))`.

## Pairwise-run evaluation

For every ordered pair of distinct runs, queries come from the first run
(optionally restricted to test regions) and the database is the full second
run. The reported recall is the unweighted mean over all ordered pairs.

## Revisit evaluation

Queries are taken every `sampling_interval` meters of travelled distance
starting at `sampling_offset`; the database every `sampling_interval`
meters starting at zero. A database entry is a candidate for query time `t0`
only when `t < t0` and `t0 - t > revisit_min_gap`. Retrieval is restricted to
candidates.
"#;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rendered_docs_have_no_drift() {
        assert_eq!(check_doc_drift(&render_protocol_docs()), Ok(()));
    }

    #[test]
    fn changed_value_is_detected() {
        let doc = render_protocol_docs().replace("| triplet | margin | 0.3 |", "| triplet | margin | 0.25 |");
        assert!(matches!(check_doc_drift(&doc), Err(DriftError::DriftDetected { key, .. }) if key == "triplet.margin"));
    }

    #[test]
    fn missing_row_is_detected() {
        let doc: String = render_protocol_docs()
            .lines()
            .filter(|l| !l.contains("| max_batch |"))
            .map(|l| format!("{l}\n"))
            .collect();
        assert_eq!(check_doc_drift(&doc), Err(DriftError::Missing("triplet.max_batch".into())));
    }
}
