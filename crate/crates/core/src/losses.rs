//! Training objectives: batch-hard triplet loss for the image branch, the
//! projected local descriptor loss and the global descriptor regression.

use std::rc::Rc;

use thiserror::Error;

use crate::geometry::ProjectedFeatureMap;
use crate::protocol;
use crate::tensor::{smooth_l1_scalar, Tape, Tensor, TensorError, Var};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error("anchor {anchor} has no positive in the batch")]
    NoPositive { anchor: usize },
    #[error("anchor {anchor} has no negative in the batch")]
    NoNegative { anchor: usize },
    #[error("smooth-L1 beta must be positive, got {0}")]
    NonPositiveBeta(f64),
    #[error("no voxel-pixel correspondences")]
    NoCorrespondences,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid triplet config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T, E = LossError> = std::result::Result<T, E>;

/// Summed smooth-L1 over all elements of `x`.
pub fn smooth_l1(x: &[f64], beta: f64) -> Result<f64> {
    if !(beta > 0.0) {
        return Err(LossError::NonPositiveBeta(beta));
    }
    Ok(x.iter().map(|v| smooth_l1_scalar(*v, beta)).sum())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Distance {
    L2,
    L1,
}

impl Distance {
    pub fn eval(self, a: &[f64], b: &[f64]) -> f64 {
        match self {
            Distance::L2 => a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt(),
            Distance::L1 => a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TripletConfig {
    pub margin: f64,
    pub distance: Distance,
    pub zero_triplet_trigger: f64,
    pub expansion_rate: f64,
    pub max_batch: usize,
}

impl Default for TripletConfig {
    fn default() -> Self {
        Self {
            margin: protocol::TRIPLET_MARGIN,
            distance: Distance::L2,
            zero_triplet_trigger: protocol::ZERO_TRIPLET_TRIGGER,
            expansion_rate: protocol::BATCH_EXPANSION_RATE,
            max_batch: protocol::MAX_BATCH_SIZE,
        }
    }
}

impl TripletConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.margin > 0.0) {
            return Err(LossError::InvalidConfig("margin must be positive".into()));
        }
        if !(self.zero_triplet_trigger > 0.0 && self.zero_triplet_trigger < 1.0) {
            return Err(LossError::InvalidConfig("trigger must lie in (0, 1)".into()));
        }
        if !(self.expansion_rate > 1.0) {
            return Err(LossError::InvalidConfig("expansion rate must exceed 1".into()));
        }
        Ok(())
    }
}

/// Descriptors of one mini-batch with their pair labels.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingBatch {
    /// `B × D_g`.
    pub descriptors: Tensor,
    pub positive_mask: Vec<Vec<bool>>,
    pub negative_mask: Vec<Vec<bool>>,
}

impl TrainingBatch {
    /// Labels pairs by position: closer than `pos_thresh` is positive,
    /// farther than `neg_thresh` negative. The diagonal is neither.
    pub fn from_positions(descriptors: Tensor, positions: &[[f64; 3]], pos_thresh: f64, neg_thresh: f64) -> Result<Self> {
        let b = positions.len();
        if descriptors.rows() != b {
            return Err(LossError::ShapeMismatch(format!(
                "{} descriptors for {b} positions",
                descriptors.rows()
            )));
        }
        let mut pos = vec![vec![false; b]; b];
        let mut neg = vec![vec![false; b]; b];
        for i in 0..b {
            for j in 0..b {
                if i == j {
                    continue;
                }
                let d = Distance::L2.eval(&positions[i], &positions[j]);
                pos[i][j] = d < pos_thresh;
                neg[i][j] = d > neg_thresh;
            }
        }
        Ok(Self {
            descriptors,
            positive_mask: pos,
            negative_mask: neg,
        })
    }

    pub fn len(&self) -> usize {
        self.positive_mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positive_mask.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HardTriplet {
    pub anchor: usize,
    pub positive: usize,
    pub negative: usize,
    pub positive_distance: f64,
    pub negative_distance: f64,
}

/// Per anchor, the farthest positive and the nearest negative under
/// `distance`. Ties go to the lowest index.
pub fn mine_hardest(batch: &TrainingBatch, distance: Distance) -> Vec<Result<HardTriplet>> {
    let desc = &batch.descriptors;
    (0..batch.len())
        .map(|a| {
            let mut best_pos: Option<(usize, f64)> = None;
            let mut best_neg: Option<(usize, f64)> = None;
            for j in 0..batch.len() {
                if !(batch.positive_mask[a][j] || batch.negative_mask[a][j]) {
                    continue;
                }
                let d = distance.eval(desc.row(a), desc.row(j));
                if batch.positive_mask[a][j] && best_pos.map_or(true, |(_, bd)| d > bd) {
                    best_pos = Some((j, d));
                }
                if batch.negative_mask[a][j] && best_neg.map_or(true, |(_, bd)| d < bd) {
                    best_neg = Some((j, d));
                }
            }
            let (positive, positive_distance) = best_pos.ok_or(LossError::NoPositive { anchor: a })?;
            let (negative, negative_distance) = best_neg.ok_or(LossError::NoNegative { anchor: a })?;
            Ok(HardTriplet {
                anchor: a,
                positive,
                negative,
                positive_distance,
                negative_distance,
            })
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct TripletOutcome {
    pub loss: Var,
    pub triplets: Vec<HardTriplet>,
    /// Mined triplets whose hinge term is already zero.
    pub zero_triplets: usize,
}

fn row_distances(tape: &mut Tape, a: Var, b: Var, distance: Distance) -> Result<Var> {
    let diff = tape.sub(a, b)?;
    Ok(match distance {
        Distance::L2 => tape.row_norms(diff)?,
        Distance::L1 => {
            let d = tape.value(diff).cols();
            let abs = tape.abs(diff)?;
            let ones = tape.constant(Tensor::matrix(d, 1, vec![1.0; d])?);
            let s = tape.matmul(abs, ones)?;
            let n = tape.value(s).rows();
            tape.reshape(s, vec![n])?
        }
    })
}

/// Batch-hard triplet loss `Σ_a max(0, d(a, p*) - d(a, n*) + m)` over
/// `descriptors` (`B × D_g` on the tape). Anchors that cannot be mined are
/// skipped; an error is returned only when no anchor can be.
pub fn triplet_loss_batch_hard(
    tape: &mut Tape,
    descriptors: Var,
    batch: &TrainingBatch,
    cfg: &TripletConfig,
) -> Result<TripletOutcome> {
    cfg.validate()?;
    let mut first_err = None;
    let mut triplets = Vec::new();
    for r in mine_hardest(batch, cfg.distance) {
        match r {
            Ok(t) => triplets.push(t),
            Err(e) => {
                first_err.get_or_insert(e);
            }
        }
    }
    if triplets.is_empty() {
        return Err(first_err.unwrap_or(LossError::NoPositive { anchor: 0 }));
    }
    let idx = |f: fn(&HardTriplet) -> usize| Rc::new(triplets.iter().map(f).collect::<Vec<_>>());
    let a = tape.gather_rows(descriptors, idx(|t| t.anchor))?;
    let p = tape.gather_rows(descriptors, idx(|t| t.positive))?;
    let n = tape.gather_rows(descriptors, idx(|t| t.negative))?;
    let dp = row_distances(tape, a, p, cfg.distance)?;
    let dn = row_distances(tape, a, n, cfg.distance)?;
    let diff = tape.sub(dp, dn)?;
    let margin = tape.constant(Tensor::vector(vec![cfg.margin; triplets.len()]));
    let pre = tape.add(diff, margin)?;
    let zero_triplets = tape.value(pre).data().iter().filter(|v| **v <= 0.0).count();
    let hinge = tape.relu(pre)?;
    let loss = tape.sum(hinge)?;
    Ok(TripletOutcome {
        loss,
        triplets,
        zero_triplets,
    })
}

/// Next batch size: grows by `expansion_rate` (capped) when the zero-triplet
/// share strictly exceeds the trigger.
pub fn zero_triplet_expansion(zero_count: usize, batch_size: usize, cfg: &TripletConfig) -> usize {
    if batch_size == 0 {
        return 0;
    }
    let ratio = zero_count as f64 / batch_size as f64;
    if ratio > cfg.zero_triplet_trigger {
        expanded_batch_size(batch_size, cfg)
    } else {
        batch_size
    }
}

/// `ceil(batch_size · expansion_rate)`, capped at `max_batch`.
pub fn expanded_batch_size(batch_size: usize, cfg: &TripletConfig) -> usize {
    let grown = (batch_size as f64 * cfg.expansion_rate - 1e-9).ceil() as usize;
    grown.min(cfg.max_batch)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum LocalLossMode {
    /// `Σ smooth_l1(d_i · v_i − M_I(u_i, v_i))`.
    #[default]
    Eq3Literal,
    /// `Σ w_i · smooth_l1(v_i − M_I(u_i, v_i))` with `w_i = d_i / Σ_{pixel} d_j`.
    CollisionNormalized,
}

impl std::str::FromStr for LocalLossMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "eq3_literal" | "literal" => Ok(Self::Eq3Literal),
            "collision_normalized" | "normalized" => Ok(Self::CollisionNormalized),
            _ => Err(format!("unknown local loss mode `{s}`")),
        }
    }
}

impl std::fmt::Display for LocalLossMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Eq3Literal => "eq3_literal",
            Self::CollisionNormalized => "collision_normalized",
        })
    }
}

/// Local descriptor loss between projected voxel features and the image
/// feature map. `voxel_feats` is `[T*, D]` indexed by the projection's voxel
/// rows; `image_feats` is `[H*·W*, D]` in row-major pixel order. Every
/// colliding voxel receives gradient.
pub fn local_descriptor_loss(
    tape: &mut Tape,
    voxel_feats: Var,
    projected: &ProjectedFeatureMap,
    image_feats: Var,
    image_dims: (usize, usize),
    mode: LocalLossMode,
    beta: f64,
) -> Result<Var> {
    if !(beta > 0.0) {
        return Err(LossError::NonPositiveBeta(beta));
    }
    if projected.entries.is_empty() {
        return Err(LossError::NoCorrespondences);
    }
    if (projected.width, projected.height) != image_dims {
        return Err(LossError::ShapeMismatch(format!(
            "projection is {}x{}, image features are {}x{}",
            projected.width, projected.height, image_dims.0, image_dims.1
        )));
    }
    let (tv, ti) = (tape.value(voxel_feats), tape.value(image_feats));
    if tv.cols() != ti.cols() || ti.rows() != image_dims.0 * image_dims.1 {
        return Err(LossError::ShapeMismatch(format!(
            "voxel features {:?} vs image features {:?}",
            tv.shape(),
            ti.shape()
        )));
    }
    let voxel_rows = Rc::new(projected.entries.iter().map(|e| e.voxel).collect::<Vec<_>>());
    let pixel_rows = Rc::new(projected.pixel_rows());
    let v = tape.gather_rows(voxel_feats, voxel_rows)?;
    let m = tape.gather_rows(image_feats, pixel_rows)?;
    let loss = match mode {
        LocalLossMode::Eq3Literal => {
            let d = Rc::new(projected.entries.iter().map(|e| e.inverse_depth).collect());
            let scaled = tape.scale_rows(v, d)?;
            let r = tape.sub(scaled, m)?;
            let s = tape.smooth_l1(r, beta)?;
            tape.sum(s)?
        }
        LocalLossMode::CollisionNormalized => {
            let r = tape.sub(v, m)?;
            let s = tape.smooth_l1(r, beta)?;
            let w = tape.scale_rows(s, Rc::new(projected.collision_weights()))?;
            tape.sum(w)?
        }
    };
    Ok(loss)
}

/// `Σ smooth_l1(img − pc)` over descriptors on the tape (any matching shape,
/// one row per pair).
pub fn global_descriptor_loss(tape: &mut Tape, img: Var, pc: Var, beta: f64) -> Result<Var> {
    if !(beta > 0.0) {
        return Err(LossError::NonPositiveBeta(beta));
    }
    let (a, b) = (tape.value(img).shape().to_vec(), tape.value(pc).shape().to_vec());
    if a.iter().product::<usize>() != b.iter().product::<usize>() {
        return Err(LossError::ShapeMismatch(format!("{a:?} vs {b:?}")));
    }
    let pc = if a != b { tape.reshape(pc, a)? } else { pc };
    let r = tape.sub(img, pc)?;
    let s = tape.smooth_l1(r, beta)?;
    Ok(tape.sum(s)?)
}

/// Untracked global loss between two descriptor vectors.
pub fn global_descriptor_loss_values(img: &[f64], pc: &[f64], beta: f64) -> Result<f64> {
    if img.len() != pc.len() {
        return Err(LossError::ShapeMismatch(format!("{} vs {}", img.len(), pc.len())));
    }
    let diff: Vec<f64> = img.iter().zip(pc).map(|(a, b)| a - b).collect();
    smooth_l1(&diff, beta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{CollisionSet, ProjectedEntry};

    #[test]
    fn smooth_l1_examples() {
        assert_eq!(smooth_l1(&[0.5], 1.0).unwrap(), 0.125);
        assert_eq!(smooth_l1(&[2.0], 1.0).unwrap(), 1.5);
        assert_eq!(smooth_l1(&[0.0], 1.0).unwrap(), 0.0);
        assert_eq!(smooth_l1(&[1.0], 0.0), Err(LossError::NonPositiveBeta(0.0)));
    }

    fn one_anchor_batch(dp: f64, dn: f64) -> TrainingBatch {
        // 1-D descriptors: anchor at 0, positive at dp, negative at -dn.
        TrainingBatch {
            descriptors: Tensor::matrix(3, 1, vec![0.0, dp, -dn]).unwrap(),
            positive_mask: vec![vec![false, true, false], vec![true, false, false], vec![false; 3]],
            negative_mask: vec![vec![false, false, true], vec![false, false, true], vec![true, true, false]],
        }
    }

    fn anchor0_loss(dp: f64, dn: f64) -> f64 {
        let batch = one_anchor_batch(dp, dn);
        let mut tape = Tape::new();
        let d = tape.constant(batch.descriptors.clone());
        // Only anchor 0 is checked: restrict the batch to it.
        let mut b = batch.clone();
        b.positive_mask[1] = vec![false; 3];
        let out = triplet_loss_batch_hard(&mut tape, d, &b, &TripletConfig::default()).unwrap();
        tape.value(out.loss).item()
    }

    #[test]
    fn triplet_hinge_examples() {
        assert_eq!(anchor0_loss(1.0, 1.5), 0.0);
        assert!((anchor0_loss(1.0, 1.1) - 0.2).abs() < 1e-12);
    }

    #[test]
    fn mining_picks_extremes() {
        let batch = TrainingBatch {
            descriptors: Tensor::matrix(5, 1, vec![0.0, 1.0, 2.0, 0.5, 3.0]).unwrap(),
            positive_mask: vec![
                vec![false, true, true, false, false],
                vec![true, false, false, false, false],
                vec![true, false, false, false, false],
                vec![false; 5],
                vec![false; 5],
            ],
            negative_mask: vec![
                vec![false, false, false, true, true],
                vec![false; 5],
                vec![false; 5],
                vec![true, false, false, false, false],
                vec![true, false, false, false, false],
            ],
        };
        let mined = mine_hardest(&batch, Distance::L2);
        let t = mined[0].as_ref().unwrap();
        assert_eq!((t.positive, t.negative), (2, 3));
        assert_eq!(mined[1], Err(LossError::NoNegative { anchor: 1 }));
        assert_eq!(mined[3], Err(LossError::NoPositive { anchor: 3 }));
    }

    #[test]
    fn expansion_examples() {
        let cfg = TripletConfig::default();
        assert_eq!(zero_triplet_expansion(20, 64, &cfg), 90);
        assert_eq!(zero_triplet_expansion(19, 64, &cfg), 64);
        assert_eq!(zero_triplet_expansion(100, 200, &cfg), 256);
        assert_eq!(zero_triplet_expansion(256, 256, &cfg), 256);
    }

    fn entry(voxel: usize, pixel: [usize; 2], depth: f64) -> ProjectedEntry {
        ProjectedEntry {
            pixel,
            continuous: [pixel[0] as f64, pixel[1] as f64],
            voxel,
            depth,
            inverse_depth: 1.0 / depth,
        }
    }

    fn single_entry_loss(voxel_feat: f64, image_feat: f64) -> f64 {
        let proj = ProjectedFeatureMap {
            width: 1,
            height: 1,
            entries: vec![entry(0, [0, 0], 2.0)],
            collisions: vec![CollisionSet {
                pixel: [0, 0],
                entries: vec![0],
            }],
        };
        let mut tape = Tape::new();
        let v = tape.constant(Tensor::matrix(1, 1, vec![voxel_feat]).unwrap());
        let m = tape.constant(Tensor::matrix(1, 1, vec![image_feat]).unwrap());
        let l = local_descriptor_loss(&mut tape, v, &proj, m, (1, 1), LocalLossMode::Eq3Literal, 1.0).unwrap();
        tape.value(l).item()
    }

    #[test]
    fn local_loss_literal_examples() {
        assert_eq!(single_entry_loss(2.0, 1.0), 0.0);
        assert_eq!(single_entry_loss(4.0, 1.0), 0.5);
    }

    #[test]
    fn local_loss_rejects_empty_and_mismatched() {
        let proj = ProjectedFeatureMap {
            width: 2,
            height: 1,
            entries: vec![],
            collisions: vec![],
        };
        let mut tape = Tape::new();
        let v = tape.constant(Tensor::matrix(1, 1, vec![1.0]).unwrap());
        let m = tape.constant(Tensor::matrix(2, 1, vec![1.0, 1.0]).unwrap());
        assert_eq!(
            local_descriptor_loss(&mut tape, v, &proj, m, (2, 1), LocalLossMode::Eq3Literal, 1.0).unwrap_err(),
            LossError::NoCorrespondences
        );
        let proj = ProjectedFeatureMap {
            entries: vec![entry(0, [0, 0], 1.0)],
            ..proj
        };
        assert!(matches!(
            local_descriptor_loss(&mut tape, v, &proj, m, (1, 2), LocalLossMode::Eq3Literal, 1.0),
            Err(LossError::ShapeMismatch(_))
        ));
    }

    #[test]
    fn global_loss_examples() {
        assert_eq!(global_descriptor_loss_values(&[1.0, 2.0], &[1.0, 2.0], 1.0).unwrap(), 0.0);
        assert_eq!(global_descriptor_loss_values(&[1.0; 4], &[0.0; 4], 1.0).unwrap(), 2.0);
        assert!(global_descriptor_loss_values(&[1.0; 4], &[0.0; 3], 1.0).is_err());
    }
}
