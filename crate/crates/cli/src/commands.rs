use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use clap::{Args, ValueEnum};
use vxp::data_io::{
    self, parse_manifest, read_calibration, read_checkpoint, read_descriptors, write_calibration, write_checkpoint,
    write_descriptors, write_index, write_loss_history, write_manifest, write_point_cloud_bin, write_raw_image,
    DescriptorSet, Manifest, SampleManifestRow,
};
use vxp::model::{sample_seed, VxpModel};
use vxp::plot::{parse_recall_csv, render_recall_svg};
use vxp::retrieval::{
    build_index, evaluate, oxford_pairwise_eval, render_curve_csv, render_results_csv, sample_by_distance, EvalProtocol,
    EvalRun, IndexEntry, Metric, Query, RecallSpec, RetrievalIndex,
};
use vxp::synth::{generate_dataset, synthetic_projection};
use vxp::trainer::{train_stage_global, train_stage_image, train_stage_local, Dataset, Stage, StageOutput, TrainSample};
use vxp::{protocol, ParamSet};

use crate::settings::{parse_projection, Settings, UsageError};

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long)]
    scenes: usize,
    #[arg(long, default_value_t = 2)]
    traversals: usize,
    /// Also write train.csv and test.csv, holding out the last N scenes
    #[arg(long, default_value_t = 0)]
    holdout: usize,
    #[arg(long)]
    out: PathBuf,
}

pub fn synth(settings: &Settings, a: &SynthArgs) -> Result<()> {
    if a.scenes == 0 || a.traversals == 0 {
        return Err(UsageError("--scenes and --traversals must be positive".into()).into());
    }
    if a.holdout >= a.scenes {
        return Err(UsageError("--holdout must leave at least one training scene".into()).into());
    }
    let samples = generate_dataset(&settings.exp.synth, a.scenes, a.traversals)?;
    for sub in ["clouds", "images"] {
        fs::create_dir_all(a.out.join(sub)).with_context(|| format!("creating {}", a.out.join(sub).display()))?;
    }
    let mut rows = Vec::with_capacity(samples.len());
    for s in &samples {
        let cloud_path = format!("clouds/{}.bin", s.id);
        let image_path = format!("images/{}.raw", s.id);
        write_point_cloud_bin(&a.out.join(&cloud_path), &s.cloud)?;
        write_raw_image(&a.out.join(&image_path), &s.image)?;
        rows.push((
            s.scene,
            SampleManifestRow {
                id: s.id.clone(),
                timestamp_s: s.timestamp_s,
                position: s.position,
                cloud_path,
                image_path,
                run_id: s.run_id.clone(),
            },
        ));
    }
    let all: Vec<_> = rows.iter().map(|r| r.1.clone()).collect();
    write_manifest(&a.out.join("manifest.csv"), &all)?;
    if a.holdout > 0 {
        let cut = a.scenes - a.holdout;
        let pick = |train: bool| rows.iter().filter(|r| (r.0 < cut) == train).map(|r| r.1.clone()).collect::<Vec<_>>();
        write_manifest(&a.out.join("train.csv"), &pick(true))?;
        write_manifest(&a.out.join("test.csv"), &pick(false))?;
    }
    write_calibration(&a.out.join("calib.txt"), &synthetic_projection())?;
    println!("wrote {} samples to {}", all.len(), a.out.display());
    Ok(())
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long, value_parser = parse_stage)]
    stage: Stage,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    calib: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Starting checkpoint; required by the local and global stages
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Per-step loss history CSV
    #[arg(long)]
    history: Option<PathBuf>,
    /// Override local.projection
    #[arg(long, value_parser = parse_projection_arg)]
    projection: Option<vxp::geometry::ProjectionKind>,
}

fn parse_stage(s: &str) -> Result<Stage, String> {
    s.parse()
}

fn parse_projection_arg(s: &str) -> Result<vxp::geometry::ProjectionKind, String> {
    parse_projection(s).map_err(|e| e.0)
}

fn load_dataset(manifest: &Manifest, calib: &Path) -> Result<Dataset> {
    let projection = read_calibration(calib)?;
    let mut samples = Vec::with_capacity(manifest.rows.len());
    for row in &manifest.rows {
        samples.push(TrainSample {
            id: row.id.clone(),
            position: row.position,
            image: manifest.load_image(row)?,
            cloud: manifest.load_cloud(row)?,
        });
    }
    Ok(Dataset { samples, projection })
}

pub fn train(settings: &Settings, a: &TrainArgs) -> Result<()> {
    let manifest = parse_manifest(&a.manifest)?;
    let data = load_dataset(&manifest, &a.calib)?;
    let start = match &a.resume {
        Some(p) => Some(read_checkpoint(p)?),
        None => None,
    };
    let mut cfg = settings.stage(a.stage).clone();
    if let Some(p) = a.projection {
        cfg.projection = p;
    }
    let prerequisite = || start.clone().unwrap_or_else(ParamSet::new);
    let out: StageOutput = match a.stage {
        Stage::Image => {
            let model = match &start {
                Some(p) => VxpModel::from_params(p)?,
                None => VxpModel::new(settings.exp.model.clone())?,
            };
            train_stage_image(&data, &model, &cfg, start.as_ref())?
        }
        Stage::Local => train_stage_local(&data, &prerequisite(), &cfg)?,
        Stage::Global => train_stage_global(&data, &prerequisite(), &cfg)?,
    };
    write_checkpoint(&a.out, &out.params)?;
    if let Some(h) = &a.history {
        write_loss_history(h, &out.history)?;
    }
    println!(
        "stage {:?}: loss {:.6} -> {:.6} ({} samples skipped)",
        a.stage, out.initial_loss, out.final_loss, out.skipped
    );
    Ok(())
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum Modality {
    #[value(name = "2d")]
    Image,
    #[value(name = "3d")]
    Cloud,
}

#[derive(Args, Debug)]
pub struct ExtractArgs {
    #[arg(long, value_enum)]
    modality: Modality,
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Only encode rows of this run
    #[arg(long)]
    run: Option<String>,
}

/// Descriptor ids are manifest row indices.
pub fn extract(a: &ExtractArgs) -> Result<()> {
    let params = read_checkpoint(&a.ckpt)?;
    let model = VxpModel::from_params(&params)?;
    let manifest = parse_manifest(&a.manifest)?;
    let mut records = Vec::new();
    for (i, row) in manifest.rows.iter().enumerate() {
        if a.run.as_ref().is_some_and(|r| *r != row.run_id) {
            continue;
        }
        let desc = match a.modality {
            Modality::Image => model.encode_image(&params, &manifest.load_image(row)?)?.3,
            Modality::Cloud => model.encode_cloud(&params, &manifest.load_cloud(row)?, sample_seed(&row.id))?.1,
        };
        records.push((i as u64, desc));
    }
    ensure!(!records.is_empty(), "no manifest rows selected");
    let set = DescriptorSet::from_f64(model.config.descriptor_dim, &records)?;
    write_descriptors(&a.out, &set)?;
    println!("wrote {} descriptors to {}", set.len(), a.out.display());
    Ok(())
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum MetricArg {
    L2,
    L1,
}

impl From<MetricArg> for Metric {
    fn from(m: MetricArg) -> Self {
        match m {
            MetricArg::L2 => Metric::L2,
            MetricArg::L1 => Metric::L1,
        }
    }
}

fn entries(set: &DescriptorSet, manifest: &Manifest) -> Result<Vec<IndexEntry>> {
    set.ids
        .iter()
        .enumerate()
        .map(|(i, &id)| {
            let row = manifest
                .rows
                .get(id as usize)
                .with_context(|| format!("descriptor id {id} has no manifest row"))?;
            Ok(IndexEntry {
                id,
                descriptor: set.vector(i),
                position: row.position,
                timestamp: Some(row.timestamp_s),
            })
        })
        .collect()
}

#[derive(Args, Debug)]
pub struct IndexArgs {
    #[arg(long)]
    db: PathBuf,
    /// Manifest the descriptor ids refer to
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, value_enum, default_value_t = MetricArg::L2)]
    metric: MetricArg,
    #[arg(long)]
    out: PathBuf,
}

pub fn index(a: &IndexArgs) -> Result<()> {
    let manifest = parse_manifest(&a.manifest)?;
    let set = read_descriptors(&a.db)?;
    let idx = build_index(entries(&set, &manifest)?, a.metric.into())?;
    write_index(&a.out, &idx)?;
    println!("indexed {} descriptors ({})", idx.len(), idx.content_hash());
    Ok(())
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum ProtocolArg {
    Oxford,
    Kitti,
    Plain,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    query: PathBuf,
    /// VXPD descriptors or a VXPI index
    #[arg(long)]
    db: PathBuf,
    /// Manifest the descriptor ids refer to (positions, timestamps, runs)
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, value_enum, default_value_t = ProtocolArg::Plain)]
    protocol: ProtocolArg,
    /// Comma-separated list of K, `1pct` and `curveN`
    #[arg(long, default_value = "1,1pct")]
    recall: String,
    #[arg(long, default_value_t = protocol::SUCCESS_RADIUS_M)]
    radius: f64,
    #[arg(long, value_enum, default_value_t = MetricArg::L2)]
    metric: MetricArg,
    /// First CSV column; defaults to the protocol name
    #[arg(long)]
    label: Option<String>,
    #[arg(long)]
    out: PathBuf,
}

fn recall_specs(list: &str, db_len: usize) -> Result<Vec<RecallSpec>> {
    let mut specs = Vec::new();
    for item in list.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        if let Some(n) = item.strip_prefix("curve") {
            let n: usize = n
                .parse()
                .map_err(|_| UsageError(format!("bad recall item `{item}`")))?;
            specs.extend((1..=n.min(db_len)).map(RecallSpec::K));
        } else {
            specs.push(item.parse::<RecallSpec>().map_err(UsageError)?);
        }
    }
    if specs.is_empty() {
        return Err(UsageError("--recall is empty".into()).into());
    }
    specs.sort();
    specs.dedup();
    Ok(specs)
}

fn load_db(path: &Path, manifest: &Manifest, metric: Metric) -> Result<RetrievalIndex> {
    let bytes = data_io::read_file_bytes(path)?;
    if bytes.starts_with(&data_io::VXPI_MAGIC) {
        Ok(data_io::decode_index(&bytes).with_context(|| path.display().to_string())?)
    } else {
        let set = data_io::decode_descriptors(&bytes).with_context(|| path.display().to_string())?;
        Ok(build_index(entries(&set, manifest)?, metric)?)
    }
}

fn subset(index: &RetrievalIndex, keep: impl Fn(&IndexEntry) -> bool) -> Result<RetrievalIndex> {
    let picked: Vec<IndexEntry> = index.entries().iter().filter(|e| keep(e)).cloned().collect();
    Ok(build_index(picked, index.metric())?)
}

fn as_queries(entries: &[IndexEntry]) -> Vec<Query> {
    entries
        .iter()
        .map(|e| Query {
            descriptor: e.descriptor.clone(),
            position: e.position,
            timestamp: e.timestamp,
        })
        .collect()
}

pub fn eval(a: &EvalArgs) -> Result<()> {
    if !(a.radius > 0.0) {
        return Err(UsageError("--radius must be positive".into()).into());
    }
    let manifest = parse_manifest(&a.manifest)?;
    let q = read_descriptors(&a.query)?;
    let db = load_db(&a.db, &manifest, a.metric.into())?;
    let queries = entries(&q, &manifest)?;
    let base = EvalProtocol {
        success_radius_m: a.radius,
        revisit_min_gap_s: None,
    };
    let label = a.label.clone().unwrap_or_else(|| {
        match a.protocol {
            ProtocolArg::Oxford => "oxford",
            ProtocolArg::Kitti => "kitti",
            ProtocolArg::Plain => "plain",
        }
        .to_string()
    });
    let results = match a.protocol {
        ProtocolArg::Plain => {
            let specs = recall_specs(&a.recall, db.len())?;
            evaluate(&as_queries(&queries), &db, &base, &specs)?
        }
        ProtocolArg::Kitti => {
            let protocol = EvalProtocol {
                revisit_min_gap_s: Some(protocol::REVISIT_MIN_GAP_S),
                ..base
            };
            let q_pos: Vec<[f64; 3]> = queries.iter().map(|e| e.position).collect();
            let q_keep = sample_by_distance(&q_pos, protocol::KITTI_SAMPLING_INTERVAL_M, protocol::KITTI_SAMPLING_OFFSET_M);
            let db_pos: Vec<[f64; 3]> = db.entries().iter().map(|e| e.position).collect();
            let db_keep: std::collections::BTreeSet<u64> = sample_by_distance(&db_pos, protocol::KITTI_SAMPLING_INTERVAL_M, 0.0)
                .into_iter()
                .map(|i| db.entries()[i].id)
                .collect();
            let db = subset(&db, |e| db_keep.contains(&e.id))?;
            let picked: Vec<IndexEntry> = q_keep.into_iter().map(|i| queries[i].clone()).collect();
            let specs = recall_specs(&a.recall, db.len())?;
            evaluate(&as_queries(&picked), &db, &protocol, &specs)?
        }
        ProtocolArg::Oxford => {
            let run_of = |id: u64| manifest.rows.get(id as usize).map(|r| r.run_id.clone());
            let mut by_run: BTreeMap<String, Vec<IndexEntry>> = BTreeMap::new();
            for e in &queries {
                by_run.entry(run_of(e.id).unwrap_or_default()).or_default().push(e.clone());
            }
            let mut runs = Vec::new();
            let mut min_db = usize::MAX;
            for (name, qs) in by_run {
                let database = subset(&db, |e| run_of(e.id).as_deref() == Some(name.as_str()));
                let Ok(database) = database else {
                    log::warn!("run {name} has no database entries; skipped");
                    continue;
                };
                min_db = min_db.min(database.len());
                runs.push(EvalRun {
                    name,
                    queries: as_queries(&qs),
                    database,
                });
            }
            if runs.len() < 2 {
                bail!("oxford protocol needs at least two runs present in both query and database files");
            }
            let specs = recall_specs(&a.recall, min_db)?;
            oxford_pairwise_eval(&runs, |_| true, &base, &specs)?.mean
        }
    };
    let rows: Vec<(String, String, f64)> = results.iter().map(|(s, r)| (label.clone(), s.label(), *r)).collect();
    let csv = render_results_csv(&rows);
    fs::write(&a.out, &csv).with_context(|| format!("writing {}", a.out.display()))?;
    print!("{csv}");
    Ok(())
}

#[derive(Args, Debug)]
pub struct PlotArgs {
    #[arg(long = "in")]
    input: PathBuf,
    /// SVG output; the plotted curve is also written next to it as CSV
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "Recall@K")]
    title: String,
}

pub fn plot(a: &PlotArgs) -> Result<()> {
    let text = fs::read_to_string(&a.input).with_context(|| format!("reading {}", a.input.display()))?;
    let curve = parse_recall_csv(&text).with_context(|| a.input.display().to_string())?;
    fs::write(&a.out, render_recall_svg(&curve, &a.title)).with_context(|| format!("writing {}", a.out.display()))?;
    let csv_path = a.out.with_extension("csv");
    fs::write(&csv_path, render_curve_csv(&curve)).with_context(|| format!("writing {}", csv_path.display()))?;
    println!("plotted {} points to {}", curve.len(), a.out.display());
    Ok(())
}
