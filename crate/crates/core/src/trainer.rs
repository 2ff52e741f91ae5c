//! Staged training: image triplet training, frozen-image local feature
//! alignment of the voxel backbone, then global descriptor alignment with a
//! fresh point head. Adam with a per-epoch learning-rate multiplier.

use std::collections::BTreeMap;
use std::rc::Rc;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::data_io::LossRecord;
use crate::geometry::{GeometryError, PointCloud, ProjectedFeatureMap, ProjectionKind, ProjectionModel};
use crate::heads::{Image, ImagePlan, IMAGE_ENCODER_PREFIX, IMAGE_HEAD_PREFIX, POINT_HEAD_PREFIX};
use crate::losses::{
    expanded_batch_size, global_descriptor_loss, local_descriptor_loss, triplet_loss_batch_hard, LocalLossMode, LossError,
    TrainingBatch, TripletConfig,
};
use crate::model::{sample_seed, ModelError, VxpModel};
use crate::params::{ParamGrads, ParamSet};
use crate::protocol;
use crate::sparse3d::{BackbonePlan, VFE_PREFIX};
use crate::tensor::{Tape, Tensor, TensorError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrainError {
    #[error("degenerate dataset: {0}")]
    DegenerateDataset(String),
    #[error("missing prerequisite: {0}")]
    MissingPrerequisite(String),
    #[error("{skipped} of {total} pairs have no voxel-pixel correspondences")]
    TooManySkipped { skipped: usize, total: usize },
    #[error("gradient for `{name}` has shape {got:?}, parameter has {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("invalid stage config: {0}")]
    InvalidConfig(String),
    #[error("non-finite loss at epoch {epoch}, step {step}")]
    NonFiniteLoss { epoch: usize, step: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T, E = TrainError> = std::result::Result<T, E>;

impl From<crate::sparse3d::SparseError> for TrainError {
    fn from(e: crate::sparse3d::SparseError) -> Self {
        TrainError::Model(e.into())
    }
}

impl From<crate::heads::HeadError> for TrainError {
    fn from(e: crate::heads::HeadError) -> Self {
        TrainError::Model(e.into())
    }
}

// ---------------------------------------------------------------------------
// optimizer

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl Default for AdamState {
    fn default() -> Self {
        Self {
            beta1: protocol::ADAM_BETA1,
            beta2: protocol::ADAM_BETA2,
            eps: protocol::ADAM_EPS,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }
}

/// One bias-corrected Adam update of every parameter that has a gradient.
pub fn adam_step(params: &mut ParamSet, grads: &ParamGrads, state: &mut AdamState, lr: f64) -> Result<()> {
    adam_step_with(params, grads, state, |_| lr)
}

/// Adam with a per-parameter learning rate.
pub fn adam_step_with(params: &mut ParamSet, grads: &ParamGrads, state: &mut AdamState, lr: impl Fn(&str) -> f64) -> Result<()> {
    for (name, g) in grads.iter() {
        let p = params
            .get(name)
            .ok_or_else(|| TrainError::MissingPrerequisite(format!("gradient for unknown parameter `{name}`")))?;
        if p.shape() != g.shape() {
            return Err(TrainError::ShapeMismatch {
                name: name.to_string(),
                expected: p.shape().to_vec(),
                got: g.shape().to_vec(),
            });
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    for (name, g) in grads.iter() {
        let p = params.get_mut(name).expect("checked above");
        let lr = lr(name);
        let n = g.numel();
        let m = state.m.entry(name.to_string()).or_insert_with(|| vec![0.0; n]);
        let v = state.v.entry(name.to_string()).or_insert_with(|| vec![0.0; n]);
        for (i, (&gi, x)) in g.data().iter().zip(p.data_mut()).enumerate() {
            m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * gi;
            v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * gi * gi;
            let mh = m[i] / bc1;
            let vh = v[i] / bc2;
            *x -= lr * mh / (vh.sqrt() + state.eps);
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LrMultiplier {
    /// `factor^epoch`.
    Exponential(f64),
    Constant,
}

impl Default for LrMultiplier {
    fn default() -> Self {
        LrMultiplier::Exponential(protocol::LR_DECAY_PER_EPOCH)
    }
}

impl LrMultiplier {
    pub fn factor(&self, epoch: usize) -> f64 {
        match *self {
            LrMultiplier::Exponential(f) => f.powi(epoch as i32),
            LrMultiplier::Constant => 1.0,
        }
    }
}

pub fn lr_schedule(epoch: usize, base_lr: f64, multiplier: LrMultiplier) -> f64 {
    base_lr * multiplier.factor(epoch)
}

// ---------------------------------------------------------------------------
// configuration and data

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Image,
    Local,
    Global,
}

impl std::str::FromStr for Stage {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "image" => Ok(Stage::Image),
            "local" => Ok(Stage::Local),
            "global" => Ok(Stage::Global),
            _ => Err(format!("unknown stage `{s}` (expected image, local or global)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StageConfig {
    pub stage: Stage,
    pub epochs: usize,
    pub base_lr: f64,
    pub lr_multiplier: LrMultiplier,
    pub batch_size: usize,
    pub seed: u64,
    pub beta: f64,
    pub local_mode: LocalLossMode,
    pub projection: ProjectionKind,
    pub triplet: TripletConfig,
    pub pos_thresh_m: f64,
    pub neg_thresh_m: f64,
    /// Learning-rate factor for the voxel backbone in the point stages.
    pub backbone_lr_scale: f64,
}

impl StageConfig {
    pub fn new(stage: Stage) -> Self {
        Self {
            stage,
            epochs: 10,
            base_lr: 1e-3,
            lr_multiplier: LrMultiplier::default(),
            batch_size: 16,
            seed: 0,
            beta: protocol::SMOOTH_L1_BETA,
            local_mode: LocalLossMode::default(),
            projection: ProjectionKind::Perspective,
            triplet: TripletConfig::default(),
            pos_thresh_m: protocol::POSITIVE_RADIUS_M,
            neg_thresh_m: protocol::NEGATIVE_RADIUS_M,
            backbone_lr_scale: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(TrainError::InvalidConfig("epochs must be >= 1".into()));
        }
        if !(self.base_lr > 0.0) {
            return Err(TrainError::InvalidConfig("base_lr must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(TrainError::InvalidConfig("batch_size must be >= 1".into()));
        }
        if !(self.beta > 0.0) {
            return Err(TrainError::InvalidConfig("beta must be positive".into()));
        }
        if !(self.pos_thresh_m > 0.0 && self.pos_thresh_m < self.neg_thresh_m) {
            return Err(TrainError::InvalidConfig("need 0 < pos_thresh < neg_thresh".into()));
        }
        if !(self.backbone_lr_scale >= 0.0) {
            return Err(TrainError::InvalidConfig("backbone_lr_scale must be non-negative".into()));
        }
        self.triplet.validate()?;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSample {
    pub id: String,
    pub position: [f64; 3],
    pub image: Image,
    pub cloud: PointCloud,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub samples: Vec<TrainSample>,
    pub projection: ProjectionModel,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StageOutput {
    pub params: ParamSet,
    pub history: Vec<LossRecord>,
    /// Mean per-sample loss over the dataset before the first update.
    pub initial_loss: f64,
    /// The same measure after the last update.
    pub final_loss: f64,
    pub skipped: usize,
}

fn image_names(p: &str) -> bool {
    p.starts_with(IMAGE_ENCODER_PREFIX) || p.starts_with(IMAGE_HEAD_PREFIX)
}

fn backbone_names(p: &str) -> bool {
    p.starts_with(VFE_PREFIX) || p.starts_with("pc.conv")
}

fn require_all(params: &ParamSet, names: &[String], what: &str) -> Result<()> {
    match names.iter().find(|n| !params.contains(n)) {
        Some(n) => Err(TrainError::MissingPrerequisite(format!("{what}: `{n}` not in checkpoint"))),
        None => Ok(()),
    }
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

// ---------------------------------------------------------------------------
// stage 1: image branch

/// Batches holding at least one positive pair each: anchors are visited in
/// seeded order and each brings one of its positives along.
pub fn sample_batches(positions: &[[f64; 3]], batch_size: usize, pos_thresh: f64, rng: &mut impl Rng) -> Result<Vec<Vec<usize>>> {
    let n = positions.len();
    let positives: Vec<Vec<usize>> = (0..n)
        .map(|i| {
            (0..n)
                .filter(|&j| j != i && crate::losses::Distance::L2.eval(&positions[i], &positions[j]) < pos_thresh)
                .collect()
        })
        .collect();
    let mut anchors: Vec<usize> = (0..n).filter(|&i| !positives[i].is_empty()).collect();
    if anchors.is_empty() {
        return Err(TrainError::DegenerateDataset("no sample has a positive".into()));
    }
    let batch_size = batch_size.max(2);
    anchors.shuffle(rng);
    let mut used = vec![false; n];
    let mut batches = Vec::new();
    let mut cur: Vec<usize> = Vec::with_capacity(batch_size);
    for a in anchors {
        if used[a] {
            continue;
        }
        let free: Vec<usize> = positives[a].iter().copied().filter(|&p| !used[p]).collect();
        let Some(&p) = free.choose(rng) else { continue };
        if cur.len() + 2 > batch_size && !cur.is_empty() {
            batches.push(std::mem::take(&mut cur));
        }
        used[a] = true;
        used[p] = true;
        cur.push(a);
        cur.push(p);
    }
    if cur.len() >= 2 {
        batches.push(cur);
    }
    if batches.is_empty() {
        return Err(TrainError::DegenerateDataset("sampler formed no batch".into()));
    }
    Ok(batches)
}

struct ImageBatchResult {
    loss: f64,
    triplets: usize,
    zero: usize,
    grads: ParamGrads,
}

fn image_batch(
    model: &VxpModel,
    params: &ParamSet,
    data: &Dataset,
    plan: &ImagePlan,
    batch: &[usize],
    cfg: &StageConfig,
    with_grads: bool,
) -> Result<ImageBatchResult> {
    let image_params = params.subset("img.");
    let mut tapes = Vec::with_capacity(batch.len());
    let mut descs = Vec::new();
    for &i in batch {
        let mut tape = Tape::new();
        let bound = image_params.bind(&mut tape, |_| with_grads);
        let (_, d) = model.image_forward(&mut tape, &bound, &data.samples[i].image, plan)?;
        descs.extend_from_slice(tape.value(d).data());
        tapes.push((tape, bound, d));
    }
    let dg = model.config.descriptor_dim;
    let matrix = Tensor::matrix(batch.len(), dg, descs)?;
    let positions: Vec<[f64; 3]> = batch.iter().map(|&i| data.samples[i].position).collect();
    let tb = TrainingBatch::from_positions(matrix.clone(), &positions, cfg.pos_thresh_m, cfg.neg_thresh_m)?;
    let mut t = Tape::new();
    let dv = t.leaf(matrix, true);
    let out = triplet_loss_batch_hard(&mut t, dv, &tb, &cfg.triplet)?;
    let n = out.triplets.len();
    let loss = t.value(out.loss).item() / n as f64;
    let mut grads = ParamGrads::new();
    if with_grads {
        let g = t.backward(out.loss)?;
        if let Some(gd) = g.get(dv) {
            for (row, (tape, bound, d)) in tapes.iter().enumerate() {
                let seed: Vec<f64> = gd.row(row).iter().map(|x| x / n as f64).collect();
                if seed.iter().all(|x| *x == 0.0) {
                    continue;
                }
                let sg = tape.backward_seeded(*d, &Tensor::matrix(1, dg, seed)?)?;
                grads.accumulate(bound.collect(&sg));
            }
        }
    }
    Ok(ImageBatchResult {
        loss,
        triplets: n,
        zero: out.zero_triplets,
        grads,
    })
}

/// Stage 1: batch-hard triplet training of the image encoder and head. The
/// batch grows between epochs while zero triplets dominate. `init` resumes
/// from existing image weights; otherwise the branch is freshly initialized.
pub fn train_stage_image(data: &Dataset, model: &VxpModel, cfg: &StageConfig, init: Option<&ParamSet>) -> Result<StageOutput> {
    cfg.validate()?;
    let first = data
        .samples
        .first()
        .ok_or_else(|| TrainError::DegenerateDataset("empty dataset".into()))?;
    let plan = ImagePlan::new(first.image.width, first.image.height).map_err(ModelError::from)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = match init {
        Some(p) => {
            require_all(p, &model.image_param_names(), "image branch")?;
            p.clone()
        }
        None => {
            let mut p = ParamSet::new();
            model.init_image_branch(&mut p, &mut rng);
            p
        }
    };
    let positions: Vec<[f64; 3]> = data.samples.iter().map(|s| s.position).collect();
    let eval_batches = sample_batches(&positions, cfg.batch_size, cfg.pos_thresh_m, &mut ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed))?;
    let measure = |params: &ParamSet| -> Result<f64> {
        let mut losses = Vec::new();
        for b in &eval_batches {
            match image_batch(model, params, data, &plan, b, cfg, false) {
                Ok(r) => losses.push(r.loss),
                Err(TrainError::Loss(LossError::NoNegative { .. } | LossError::NoPositive { .. })) => {}
                Err(e) => return Err(e),
            }
        }
        Ok(mean(&losses))
    };
    let initial_loss = measure(&params)?;
    let mut state = AdamState::default();
    let mut history = Vec::new();
    let mut batch_size = cfg.batch_size;
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let lr = lr_schedule(epoch, cfg.base_lr, cfg.lr_multiplier);
        let batches = sample_batches(&positions, batch_size, cfg.pos_thresh_m, &mut rng)?;
        let (mut zero, mut total) = (0, 0);
        for b in &batches {
            let r = match image_batch(model, &params, data, &plan, b, cfg, true) {
                Ok(r) => r,
                Err(TrainError::Loss(LossError::NoNegative { .. } | LossError::NoPositive { .. })) => continue,
                Err(e) => return Err(e),
            };
            if !r.loss.is_finite() {
                return Err(TrainError::NonFiniteLoss { epoch, step });
            }
            adam_step(&mut params, &r.grads, &mut state, lr)?;
            zero += r.zero;
            total += r.triplets;
            history.push(LossRecord { epoch, step, loss: r.loss });
            step += 1;
        }
        if total > 0 && zero as f64 / total as f64 > cfg.triplet.zero_triplet_trigger {
            let next = expanded_batch_size(batch_size, &cfg.triplet);
            log::info!("epoch {epoch}: {zero}/{total} zero triplets, batch {batch_size} -> {next}");
            batch_size = next;
        }
        log::debug!("image epoch {epoch}: lr {lr:.3e}, {} batches", batches.len());
    }
    let final_loss = measure(&params)?;
    Ok(StageOutput {
        params,
        history,
        initial_loss,
        final_loss,
        skipped: 0,
    })
}

// ---------------------------------------------------------------------------
// stages 2 and 3: point branch against the frozen image branch

struct PointSample {
    plan: BackbonePlan,
    projected: Option<ProjectedFeatureMap>,
    image_feats: Rc<Tensor>,
    image_desc: Vec<f64>,
}

fn prepare_point_samples(data: &Dataset, model: &VxpModel, params: &ParamSet, kind: ProjectionKind) -> Result<Vec<PointSample>> {
    let mut out = Vec::with_capacity(data.samples.len());
    for s in &data.samples {
        let (feats, w, h, desc) = model.encode_image(params, &s.image)?;
        let plan = model.plan_cloud(&s.cloud, sample_seed(&s.id))?;
        let projected = match kind.project(plan.output_coords(), &plan.output_frame(), &data.projection, w, h) {
            Ok(p) => Some(p),
            Err(GeometryError::NoVisibleVoxels) => None,
            Err(e) => return Err(ModelError::from(e).into()),
        };
        out.push(PointSample {
            plan,
            projected,
            image_feats: Rc::new(feats),
            image_desc: desc,
        });
    }
    Ok(out)
}

fn local_sample(model: &VxpModel, point_params: &ParamSet, s: &PointSample, cfg: &StageConfig, with_grads: bool) -> Result<(f64, ParamGrads)> {
    let projected = s.projected.as_ref().expect("caller filters samples without correspondences");
    let mut tape = Tape::new();
    let bound = point_params.bind(&mut tape, |n| with_grads && backbone_names(n));
    let act = model.backbone.forward(&mut tape, &bound, &s.plan)?;
    let img = tape.constant((*s.image_feats).clone());
    let loss = local_descriptor_loss(
        &mut tape,
        act.feats,
        projected,
        img,
        (projected.width, projected.height),
        cfg.local_mode,
        cfg.beta,
    )?;
    let value = tape.value(loss).item();
    let grads = if with_grads {
        bound.collect(&tape.backward(loss)?)
    } else {
        ParamGrads::new()
    };
    Ok((value, grads))
}

fn global_sample(model: &VxpModel, point_params: &ParamSet, s: &PointSample, cfg: &StageConfig, with_grads: bool) -> Result<(f64, ParamGrads)> {
    let mut tape = Tape::new();
    let bound = point_params.bind(&mut tape, |_| with_grads);
    let act = model.backbone.forward(&mut tape, &bound, &s.plan)?;
    let desc = model.point_head.forward(&mut tape, &bound, act.feats)?;
    let target = tape.constant(Tensor::matrix(1, s.image_desc.len(), s.image_desc.clone())?);
    let loss = global_descriptor_loss(&mut tape, target, desc, cfg.beta)?;
    let value = tape.value(loss).item();
    let grads = if with_grads {
        bound.collect(&tape.backward(loss)?)
    } else {
        ParamGrads::new()
    };
    Ok((value, grads))
}

type SampleFn = fn(&VxpModel, &ParamSet, &PointSample, &StageConfig, bool) -> Result<(f64, ParamGrads)>;

fn run_point_stage(
    model: &VxpModel,
    mut params: ParamSet,
    samples: &[PointSample],
    active: &[usize],
    cfg: &StageConfig,
    f: SampleFn,
    skipped: usize,
) -> Result<StageOutput> {
    let measure = |params: &ParamSet| -> Result<f64> {
        let pp = params.subset("pc.");
        let mut v = Vec::with_capacity(active.len());
        for &i in active {
            v.push(f(model, &pp, &samples[i], cfg, false)?.0);
        }
        Ok(mean(&v))
    };
    let initial_loss = measure(&params)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut state = AdamState::default();
    let mut history = Vec::new();
    let mut order = active.to_vec();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let lr = lr_schedule(epoch, cfg.base_lr, cfg.lr_multiplier);
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let pp = params.subset("pc.");
            let mut grads = ParamGrads::new();
            let mut losses = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let (l, g) = f(model, &pp, &samples[i], cfg, true)?;
                losses.push(l);
                grads.accumulate(g);
            }
            let loss = mean(&losses);
            if !loss.is_finite() {
                return Err(TrainError::NonFiniteLoss { epoch, step });
            }
            grads.scale(1.0 / chunk.len() as f64);
            let scale = cfg.backbone_lr_scale;
            adam_step_with(&mut params, &grads, &mut state, |n| if backbone_names(n) { lr * scale } else { lr })?;
            history.push(LossRecord { epoch, step, loss });
            step += 1;
        }
        log::debug!("epoch {epoch}: lr {lr:.3e}, last loss {:?}", history.last().map(|r| r.loss));
    }
    let final_loss = measure(&params)?;
    Ok(StageOutput {
        params,
        history,
        initial_loss,
        final_loss,
        skipped,
    })
}

/// Stage 2: trains the voxel backbone so projected voxel features match the
/// frozen image feature map. `stage1` must hold the image branch; it is
/// returned unchanged alongside the new backbone weights.
pub fn train_stage_local(data: &Dataset, stage1: &ParamSet, cfg: &StageConfig) -> Result<StageOutput> {
    cfg.validate()?;
    let model = VxpModel::from_params(stage1).map_err(|e| TrainError::MissingPrerequisite(format!("stage-1 checkpoint: {e}")))?;
    require_all(stage1, &model.image_param_names(), "stage-1 checkpoint")?;
    if data.samples.is_empty() {
        return Err(TrainError::DegenerateDataset("empty dataset".into()));
    }
    let samples = prepare_point_samples(data, &model, stage1, cfg.projection)?;
    let active: Vec<usize> = (0..samples.len()).filter(|&i| samples[i].projected.is_some()).collect();
    let skipped = samples.len() - active.len();
    if skipped > 0 {
        log::warn!("{skipped} pairs without voxel-pixel correspondences skipped");
    }
    if skipped * 2 > samples.len() {
        return Err(TrainError::TooManySkipped {
            skipped,
            total: samples.len(),
        });
    }
    let mut params = stage1.clone();
    params.remove_prefix("pc.");
    model.init_backbone(&mut params, &mut ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xb0e5));
    run_point_stage(&model, params, &samples, &active, cfg, local_sample, skipped)
}

/// Stage 3: fine-tunes the backbone and trains a freshly initialized point
/// head so point descriptors match the frozen image descriptors.
pub fn train_stage_global(data: &Dataset, stage2: &ParamSet, cfg: &StageConfig) -> Result<StageOutput> {
    cfg.validate()?;
    let model = VxpModel::from_params(stage2).map_err(|e| TrainError::MissingPrerequisite(format!("stage-2 checkpoint: {e}")))?;
    require_all(stage2, &model.image_param_names(), "stage-2 checkpoint")?;
    require_all(stage2, &model.backbone.param_names(), "stage-2 checkpoint")?;
    if data.samples.is_empty() {
        return Err(TrainError::DegenerateDataset("empty dataset".into()));
    }
    let samples = prepare_point_samples(data, &model, stage2, ProjectionKind::Perspective)?;
    let active: Vec<usize> = (0..samples.len()).collect();
    let mut params = stage2.clone();
    params.remove_prefix(POINT_HEAD_PREFIX);
    model.init_point_head(&mut params, &mut ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9ead));
    run_point_stage(&model, params, &samples, &active, cfg, global_sample, 0)
}

/// Whether every image-branch tensor is bitwise identical in both sets.
pub fn image_branch_unchanged(before: &ParamSet, after: &ParamSet) -> bool {
    before.iter().filter(|(n, _)| image_names(n)).all(|(n, t)| after.get(n) == Some(t))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_first_step() {
        let mut p = ParamSet::new();
        p.insert("x", Tensor::scalar(1.0));
        let mut g = ParamGrads::new();
        g.insert("x", Tensor::scalar(2.0));
        let mut s = AdamState::default();
        adam_step(&mut p, &g, &mut s, 0.1).unwrap();
        assert!((p.get("x").unwrap().item() - 0.9).abs() < 1e-6);
    }

    #[test]
    fn adam_zero_grad_and_descent() {
        let mut p = ParamSet::new();
        p.insert("x", Tensor::scalar(1.0));
        let mut s = AdamState::default();
        let mut g = ParamGrads::new();
        g.insert("x", Tensor::scalar(0.0));
        adam_step(&mut p, &g, &mut s, 0.1).unwrap();
        assert_eq!(p.get("x").unwrap().item(), 1.0);
        let mut f = 1.0;
        for _ in 0..3 {
            let x = p.get("x").unwrap().item();
            let mut g = ParamGrads::new();
            g.insert("x", Tensor::scalar(2.0 * x));
            adam_step(&mut p, &g, &mut s, 0.1).unwrap();
            let x = p.get("x").unwrap().item();
            assert!(x * x < f);
            f = x * x;
        }
    }

    #[test]
    fn adam_shape_mismatch() {
        let mut p = ParamSet::new();
        p.insert("x", Tensor::scalar(1.0));
        let mut g = ParamGrads::new();
        g.insert("x", Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(
            adam_step(&mut p, &g, &mut AdamState::default(), 0.1),
            Err(TrainError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn schedule() {
        assert_eq!(lr_schedule(0, 0.01, LrMultiplier::default()), 0.01);
        assert!((lr_schedule(2, 1.0, LrMultiplier::default()) - 0.81).abs() < 1e-15);
        assert_eq!(lr_schedule(7, 0.5, LrMultiplier::Constant), 0.5);
    }

    #[test]
    fn sampler_batches_have_pairs() {
        let positions: Vec<[f64; 3]> = (0..20).map(|i| [(i / 2) as f64 * 100.0 + (i % 2) as f64, 0.0, 0.0]).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let batches = sample_batches(&positions, 6, 10.0, &mut rng).unwrap();
        assert_eq!(batches.iter().map(Vec::len).sum::<usize>(), 20);
        for b in &batches {
            assert!(b.len() <= 6);
            assert!(b.chunks(2).all(|p| (positions[p[0]][0] - positions[p[1]][0]).abs() < 10.0));
        }
        let lonely: Vec<[f64; 3]> = (0..5).map(|i| [i as f64 * 50.0, 0.0, 0.0]).collect();
        assert!(matches!(
            sample_batches(&lonely, 4, 10.0, &mut rng),
            Err(TrainError::DegenerateDataset(_))
        ));
    }
}
