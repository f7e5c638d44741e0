//! Declarative experiment drivers: member training, fusion pipelines,
//! ablations, baseline comparisons and fusion cost measurement.
//!
//! Seeds run in parallel on a pool sized by `NT_THREADS`. Every number that
//! lands in a report is a deterministic function of the spec; wall-clock
//! times and allocation peaks go to a separate timings file.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datasets::{load_csv, load_idx, BlobsConfig, Dataset, Split};
use crate::error::{Error, Result};
use crate::fusion::{
    average_networks, concat_fuse, concat_networks, fuse, nt_fuse, prune_then_merge, transplant_fraction,
    EnsembleBundle, FusionMethod, FusionPlan, HeadSource, Pipeline,
};
use crate::network::{convnet_specs, mlp_specs, LayerSpec, Network};
use crate::pruning::{keep_count, magnitude_prune_with, prune_to_architecture_with, KeepPolicy};
use crate::report::{self, ReportFormat, ReportRow};
use crate::rng::{derive_seed, RngStream};
use crate::tensor::mem;
use crate::training::{self, distill, evaluate, loss::average_logits, predict_logits, KdConfig, TrainConfig};

fn one() -> usize {
    1
}

fn two() -> usize {
    2
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetDesc {
    Blobs {
        n_train: usize,
        n_test: usize,
        classes: usize,
        dim: usize,
        spread: f32,
        #[serde(default = "one")]
        clusters_per_class: usize,
        #[serde(default)]
        seed: u64,
    },
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
        #[serde(default)]
        limit_train: Option<usize>,
        #[serde(default)]
        limit_test: Option<usize>,
    },
    Csv {
        train: PathBuf,
        test: PathBuf,
    },
}

impl DatasetDesc {
    /// Train and test splits with a shared class count.
    pub fn load(&self) -> Result<(Dataset, Dataset)> {
        let (train, test) = match self {
            DatasetDesc::Blobs { n_train, n_test, classes, dim, spread, clusters_per_class, seed } => {
                let cfg = BlobsConfig {
                    classes: *classes,
                    dim: *dim,
                    spread: *spread,
                    clusters_per_class: *clusters_per_class,
                    seed: *seed,
                };
                (cfg.generate(*n_train, Split::Train)?, cfg.generate(*n_test, Split::Test)?)
            }
            DatasetDesc::Idx { train_images, train_labels, test_images, test_labels, limit_train, limit_test } => (
                load_idx(train_images, train_labels)?.truncate(limit_train.unwrap_or(0))?,
                load_idx(test_images, test_labels)?.truncate(limit_test.unwrap_or(0))?.with_split(Split::Test),
            ),
            DatasetDesc::Csv { train, test } => (load_csv(train, Split::Train)?, load_csv(test, Split::Test)?),
        };
        if train.sample_shape() != test.sample_shape() {
            return Err(Error::ShapeMismatch(format!(
                "train samples {:?} vs test samples {:?}",
                train.sample_shape(),
                test.sample_shape()
            )));
        }
        let classes = train.num_classes().max(test.num_classes());
        Ok((train.with_num_classes(classes)?, test.with_num_classes(classes)?))
    }
}

/// Architecture family with its width/depth knobs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ArchTemplate {
    Mlp { width: usize, depth: usize },
    Conv { channels: Vec<usize>, fc: Vec<usize> },
}

impl ArchTemplate {
    pub fn specs(&self, input_shape: &[usize], classes: usize) -> Result<Vec<LayerSpec>> {
        match self {
            ArchTemplate::Mlp { width, depth } => {
                let flat: usize = input_shape.iter().product();
                let mut specs = if input_shape.len() > 1 { vec![LayerSpec::Flatten] } else { vec![] };
                specs.extend(mlp_specs(flat, &vec![*width; *depth], classes));
                Ok(specs)
            }
            ArchTemplate::Conv { channels, fc } => match *input_shape {
                [c, h, w] => convnet_specs([c, h, w], channels, fc, classes),
                _ => Err(Error::ArchMismatch(format!("conv template needs c×h×w input, got {input_shape:?}"))),
            },
        }
    }

    pub fn with_width(&self, width: usize) -> Self {
        match self {
            ArchTemplate::Mlp { depth, .. } => ArchTemplate::Mlp { width, depth: *depth },
            ArchTemplate::Conv { channels, fc } => ArchTemplate::Conv {
                channels: vec![width; channels.len()],
                fc: vec![width; fc.len()],
            },
        }
    }

    pub fn with_depth(&self, depth: usize) -> Self {
        match self {
            ArchTemplate::Mlp { width, .. } => ArchTemplate::Mlp { width: *width, depth },
            ArchTemplate::Conv { channels, fc } => ArchTemplate::Conv {
                channels: vec![channels.first().copied().unwrap_or(8); depth],
                fc: fc.clone(),
            },
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    Width,
    Depth,
    TransplantFraction,
    Sparsity,
}

fn default_align_max_width() -> usize {
    1024
}

fn default_reps() -> usize {
    3
}

fn default_input_dim() -> usize {
    784
}

fn default_classes() -> usize {
    10
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostOptions {
    #[serde(default = "default_input_dim")]
    pub input_dim: usize,
    #[serde(default = "default_classes")]
    pub classes: usize,
    /// Timing repetitions; the minimum is reported.
    #[serde(default = "default_reps")]
    pub reps: usize,
    /// Alignment is cubic in width and skipped beyond this.
    #[serde(default = "default_align_max_width")]
    pub align_max_width: usize,
    #[serde(default)]
    pub seed: u64,
}

impl Default for CostOptions {
    fn default() -> Self {
        Self {
            input_dim: default_input_dim(),
            classes: default_classes(),
            reps: default_reps(),
            align_max_width: default_align_max_width(),
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ExperimentKind {
    /// The plan's pipeline, or each listed pipeline on the same members.
    #[default]
    Pipeline,
    Pipelines { pipelines: Vec<Pipeline> },
    Multimodel { ks: Vec<usize>, methods: Vec<FusionMethod> },
    Sweep { axis: SweepAxis, values: Vec<f64> },
    FailureCase,
    Compare {
        methods: Vec<FusionMethod>,
        #[serde(default)]
        distill: Option<KdConfig>,
    },
    Cost {
        widths: Vec<usize>,
        #[serde(flatten)]
        options: CostOptions,
    },
}

fn default_method() -> FusionMethod {
    FusionMethod::Nt
}

fn default_pipeline() -> Pipeline {
    Pipeline::MergePruneFt
}

fn default_true() -> bool {
    true
}

/// The fusion part of an experiment; fine-tuning comes from the spec.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanSpec {
    #[serde(default = "default_method")]
    pub method: FusionMethod,
    #[serde(default)]
    pub sparsity: Option<f32>,
    #[serde(default = "default_pipeline")]
    pub pipeline: Pipeline,
    #[serde(default = "default_true")]
    pub include_bias: bool,
    #[serde(default = "one")]
    pub pre_prune_epochs: usize,
}

impl Default for PlanSpec {
    fn default() -> Self {
        Self {
            method: default_method(),
            sparsity: None,
            pipeline: default_pipeline(),
            include_bias: true,
            pre_prune_epochs: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub name: String,
    pub dataset: DatasetDesc,
    pub arch: ArchTemplate,
    #[serde(default = "two")]
    pub k: usize,
    pub seeds: Vec<u64>,
    /// Member training.
    pub train: TrainConfig,
    #[serde(default)]
    pub plan: PlanSpec,
    /// Fine-tuning settings; defaults to `train`. Its epoch count is replaced
    /// by `finetune_epochs`.
    #[serde(default)]
    pub finetune: Option<TrainConfig>,
    pub finetune_epochs: usize,
    #[serde(default)]
    pub kind: ExperimentKind,
    #[serde(default)]
    pub outputs: Option<PathBuf>,
}

impl ExperimentSpec {
    pub fn from_json(text: &str) -> Result<Self> {
        let spec: Self = serde_json::from_str(text)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_json(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::InvalidArg("an experiment needs at least one seed".into()));
        }
        if self.k == 0 {
            return Err(Error::InvalidArg("k must be at least 1".into()));
        }
        self.train.validate()?;
        self.finetune_config(0).validate()
    }

    pub fn fusion_plan(&self) -> FusionPlan {
        FusionPlan {
            method: self.plan.method,
            sparsity: self.plan.sparsity,
            pipeline: self.plan.pipeline,
            finetune: self.finetune_config(0),
            include_bias: self.plan.include_bias,
            pre_prune_epochs: self.plan.pre_prune_epochs,
        }
    }

    /// Fine-tuning config for one seed; every method of a seed sees the same batch order.
    pub fn finetune_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.finetune_epochs,
            seed: derive_seed(seed, "finetune"),
            ..self.finetune.unwrap_or(self.train)
        }
    }
}

/// Outcome of one method on one seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedRecord {
    pub seed: u64,
    pub ensemble_acc: f32,
    pub best_member_acc: f32,
    pub immediate_acc: f32,
    /// Test accuracy after each fine-tuning epoch.
    pub finetuned_acc: Vec<f32>,
    #[serde(default)]
    pub extra: BTreeMap<String, f32>,
    pub wall_seconds: f64,
    pub peak_bytes_estimate: u64,
    pub model_bytes: u64,
}

impl SeedRecord {
    /// Best accuracy over the fine-tuning window.
    pub fn best_acc(&self) -> Option<f32> {
        self.finetuned_acc.iter().copied().reduce(f32::max)
    }

    /// Accuracy after `epochs` fine-tuning epochs (0 gives the immediate accuracy).
    pub fn acc_after(&self, epochs: usize) -> Option<f32> {
        match epochs {
            0 => Some(self.immediate_acc),
            e => self.finetuned_acc.get(e - 1).copied(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub experiment: String,
    pub method: String,
    pub records: Vec<SeedRecord>,
}

impl RunReport {
    /// Seed mean of a per-record quantity.
    pub fn mean(&self, f: impl Fn(&SeedRecord) -> f32) -> f64 {
        self.records.iter().map(|r| f(r) as f64).sum::<f64>() / self.records.len().max(1) as f64
    }

    /// Long-format rows; wall time and memory are excluded (see [`TimingRow`]).
    pub fn rows(&self) -> Vec<ReportRow> {
        let mut rows = Vec::new();
        for r in &self.records {
            let mut push = |epoch: Option<usize>, metric: &str, value: f32| {
                rows.push(ReportRow {
                    experiment: self.experiment.clone(),
                    method: self.method.clone(),
                    seed: r.seed,
                    epoch,
                    metric: metric.to_string(),
                    value,
                })
            };
            push(None, "ensemble_acc", r.ensemble_acc);
            push(None, "best_member_acc", r.best_member_acc);
            push(None, "immediate_acc", r.immediate_acc);
            if let Some(best) = r.best_acc() {
                push(None, "best_acc", best);
            }
            for (name, &v) in &r.extra {
                push(None, name, v);
            }
            for (e, &acc) in r.finetuned_acc.iter().enumerate() {
                push(Some(e + 1), "finetuned_acc", acc);
            }
        }
        rows
    }

    pub fn aggregate(&self) -> Vec<report::AggregateRow> {
        report::aggregate(&self.rows())
    }

    pub fn timings(&self) -> Vec<TimingRow> {
        self.records
            .iter()
            .map(|r| TimingRow {
                experiment: self.experiment.clone(),
                method: self.method.clone(),
                seed: r.seed,
                wall_seconds: r.wall_seconds,
                peak_bytes_estimate: r.peak_bytes_estimate,
                model_bytes: r.model_bytes,
            })
            .collect()
    }
}

/// Host-dependent measurements kept out of the deterministic report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingRow {
    pub experiment: String,
    pub method: String,
    pub seed: u64,
    pub wall_seconds: f64,
    pub peak_bytes_estimate: u64,
    pub model_bytes: u64,
}

/// Worker count from `NT_THREADS`, else the host's parallelism.
pub fn worker_threads() -> usize {
    std::env::var("NT_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

fn run_seeds<T: Send>(seeds: &[u64], f: impl Fn(u64) -> Result<T> + Sync) -> Result<Vec<T>> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(worker_threads())
        .build()
        .map_err(|e| Error::InvalidArg(format!("thread pool: {e}")))?;
    pool.install(|| seeds.par_iter().map(|&s| f(s)).collect())
}

struct Data {
    train: Dataset,
    test: Dataset,
    specs: Vec<LayerSpec>,
    input_shape: Vec<usize>,
}

impl Data {
    fn load(spec: &ExperimentSpec) -> Result<Self> {
        let (train, test) = spec.dataset.load()?;
        let input_shape = train.sample_shape().to_vec();
        let specs = spec.arch.specs(&input_shape, train.num_classes())?;
        Ok(Self { train, test, specs, input_shape })
    }
}

/// Trains member `index` of `seed`; init and batch order come from per-member streams.
pub fn train_member(
    specs: &[LayerSpec],
    input_shape: &[usize],
    train_ds: &Dataset,
    test_ds: &Dataset,
    cfg: &TrainConfig,
    seed: u64,
    index: usize,
) -> Result<Network> {
    let net = Network::init(input_shape, specs, &mut RngStream::new(seed, format!("member-{index}/init")))?;
    let cfg = TrainConfig { seed: derive_seed(seed, &format!("member-{index}/shuffle")), ..*cfg };
    Ok(training::train(net, train_ds, test_ds, &cfg)?.0)
}

fn train_members(spec: &ExperimentSpec, data: &Data, seed: u64, k: usize) -> Result<Vec<Network>> {
    (0..k)
        .map(|i| train_member(&data.specs, &data.input_shape, &data.train, &data.test, &spec.train, seed, i))
        .collect()
}

/// Accuracy of the logit-averaged ensemble and of its best member.
pub fn ensemble_stats(members: &[Network], test: &Dataset) -> Result<(f32, f32)> {
    let logits = members.iter().map(|m| predict_logits(m, test)).collect::<Result<Vec<_>>>()?;
    let best = logits
        .iter()
        .map(|l| training::score_logits(l, test.labels()).map(|e| e.accuracy))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .fold(0.0f32, f32::max);
    let ensemble = training::score_logits(&average_logits(&logits)?, test.labels())?.accuracy;
    Ok((ensemble, best))
}

type Builder<'a> = Box<dyn Fn(&[Network], &Data, &TrainConfig) -> Result<Network> + Send + Sync + 'a>;

/// One fused model per seed: which members it uses, how it is built and how
/// it is fine-tuned.
struct Arm<'a> {
    label: String,
    members: usize,
    build: Builder<'a>,
    distill: Option<KdConfig>,
    extra: BTreeMap<String, f32>,
}

impl<'a> Arm<'a> {
    fn new(
        label: impl Into<String>,
        members: usize,
        build: impl Fn(&[Network], &Data, &TrainConfig) -> Result<Network> + Send + Sync + 'a,
    ) -> Self {
        Self { label: label.into(), members, build: Box::new(build), distill: None, extra: BTreeMap::new() }
    }
}

fn run_arms(spec: &ExperimentSpec, data: &Data, n_members: usize, arms: &[Arm]) -> Result<Vec<RunReport>> {
    let per_seed = run_seeds(&spec.seeds, |seed| {
        let members = train_members(spec, data, seed, n_members)?;
        let ft = spec.finetune_config(seed);
        let mut stats: BTreeMap<usize, (f32, f32)> = BTreeMap::new();
        arms.iter()
            .map(|arm| {
                let used = &members[..arm.members];
                let (ensemble_acc, best_member_acc) = match stats.get(&arm.members) {
                    Some(&s) => s,
                    None => *stats.entry(arm.members).or_insert(ensemble_stats(used, &data.test)?),
                };
                let model_bytes = used.iter().map(|m| m.nbytes() as u64).sum();
                mem::reset_peak();
                let base = mem::live_bytes();
                let start = Instant::now();
                let fused = (arm.build)(used, data, &ft)?;
                let wall_seconds = start.elapsed().as_secs_f64();
                let peak_bytes_estimate = (mem::peak_bytes() - base).max(0) as u64;
                let immediate_acc = evaluate(&fused, &data.test)?.accuracy;
                let (_, history) = match arm.distill {
                    None => training::train(fused, &data.train, &data.test, &ft)?,
                    Some(kd) => distill(fused, used, &data.train, &data.test, &ft, &kd)?,
                };
                Ok(SeedRecord {
                    seed,
                    ensemble_acc,
                    best_member_acc,
                    immediate_acc,
                    finetuned_acc: history.records.iter().map(|r| r.test_accuracy).collect(),
                    extra: arm.extra.clone(),
                    wall_seconds,
                    peak_bytes_estimate,
                    model_bytes,
                })
            })
            .collect::<Result<Vec<_>>>()
    })?;
    Ok(arms
        .iter()
        .enumerate()
        .map(|(a, arm)| RunReport {
            experiment: spec.name.clone(),
            method: arm.label.clone(),
            records: per_seed.iter().map(|recs| recs[a].clone()).collect(),
        })
        .collect())
}

fn bundle_of(members: &[Network]) -> Result<EnsembleBundle> {
    EnsembleBundle::from_members(members.to_vec())
}

/// The merge (and, for `MergeFtPruneFt`, wide fine-tune and prune) stage.
fn merge_stage(members: &[Network], plan: &FusionPlan, data: &Data, ft: &TrainConfig) -> Result<Network> {
    let bundle = bundle_of(members)?;
    let nt_family = matches!(plan.method, FusionMethod::Nt | FusionMethod::NtIterative | FusionMethod::NtRecursive);
    if !nt_family {
        return fuse(&bundle, plan);
    }
    match plan.pipeline {
        Pipeline::MergePruneFt => fuse(&bundle, plan),
        Pipeline::PruneMergeFt => prune_then_merge(&bundle, plan.include_bias),
        Pipeline::MergeFtPruneFt => {
            let wide = concat_fuse(&bundle)?;
            let cfg = TrainConfig { epochs: plan.pre_prune_epochs, ..*ft };
            let (wide, _) = training::train(wide, &data.train, &data.test, &cfg)?;
            match plan.sparsity {
                None => prune_to_architecture_with(&wide, &members[0], plan.include_bias),
                Some(s) => magnitude_prune_with(&wide, &KeepPolicy::Sparsity(s), plan.include_bias),
            }
        }
    }
}

fn pipeline_label(plan: &FusionPlan) -> String {
    format!("{} {}", plan.method.label(), plan.pipeline.label())
}

/// Trains `k` members per seed, runs the plan's pipeline and fine-tunes.
pub fn run_pipeline(spec: &ExperimentSpec) -> Result<RunReport> {
    let mut out = run_pipelines(spec, &[spec.plan.pipeline])?;
    Ok(out.remove(0))
}

/// Several operation orders applied to the same trained members.
pub fn run_pipelines(spec: &ExperimentSpec, pipelines: &[Pipeline]) -> Result<Vec<RunReport>> {
    spec.validate()?;
    let data = Data::load(spec)?;
    let arms: Vec<Arm> = pipelines
        .iter()
        .map(|&pipeline| {
            let plan = FusionPlan { pipeline, ..spec.fusion_plan() };
            Arm::new(pipeline_label(&plan), spec.k, move |m, d, ft| merge_stage(m, &plan, d, ft))
        })
        .collect();
    run_arms(spec, &data, spec.k, &arms)
}

/// Every `(k, method)` pair; members are shared, larger `k` extends smaller.
pub fn ablation_multimodel(spec: &ExperimentSpec, ks: &[usize], methods: &[FusionMethod]) -> Result<Vec<RunReport>> {
    spec.validate()?;
    let data = Data::load(spec)?;
    let max_k = ks.iter().copied().max().ok_or_else(|| Error::InvalidArg("no k values".into()))?;
    let mut arms = Vec::new();
    for &k in ks {
        for &method in methods {
            let plan = FusionPlan { method, ..spec.fusion_plan() };
            arms.push(Arm::new(format!("{} k={k}", method.label()), k, move |m, d, ft| {
                merge_stage(m, &plan, d, ft)
            }));
        }
    }
    run_arms(spec, &data, max_k, &arms)
}

/// One report per axis value.
pub fn ablation_sweep(spec: &ExperimentSpec, axis: SweepAxis, values: &[f64]) -> Result<Vec<RunReport>> {
    spec.validate()?;
    match axis {
        SweepAxis::Width | SweepAxis::Depth => {
            let mut out = Vec::new();
            for &v in values {
                let n = v as usize;
                let arch = match axis {
                    SweepAxis::Width => spec.arch.with_width(n),
                    _ => spec.arch.with_depth(n),
                };
                let sub = ExperimentSpec { arch, ..spec.clone() };
                let mut rep = run_pipeline(&sub)?;
                let name = if axis == SweepAxis::Width { "width" } else { "depth" };
                rep.method = format!("{} {name}={n}", rep.method);
                for r in &mut rep.records {
                    r.extra.insert(name.to_string(), n as f32);
                }
                out.push(rep);
            }
            Ok(out)
        }
        SweepAxis::TransplantFraction => {
            let data = Data::load(spec)?;
            let arms: Vec<Arm> = values
                .iter()
                .map(|&p| {
                    let mut arm = Arm::new(format!("transplant p={p:.2}"), 2, move |m, _, _| {
                        transplant_fraction(&m[0], &m[1], p as f32, HeadSource::Recipient)
                    });
                    arm.extra.insert("fraction".into(), p as f32);
                    arm
                })
                .collect();
            let mut reports = run_arms(spec, &data, 2, &arms)?;
            // The recipient is member 0; record its accuracy for endpoint checks.
            let recipients = run_seeds(&spec.seeds, |seed| {
                let m = train_member(&data.specs, &data.input_shape, &data.train, &data.test, &spec.train, seed, 0)?;
                Ok(evaluate(&m, &data.test)?.accuracy)
            })?;
            for rep in &mut reports {
                for (r, &acc) in rep.records.iter_mut().zip(&recipients) {
                    r.extra.insert("recipient_acc".into(), acc);
                }
            }
            Ok(reports)
        }
        SweepAxis::Sparsity => {
            let data = Data::load(spec)?;
            let k = spec.k;
            let include_bias = spec.plan.include_bias;
            let arms: Vec<Arm> = values
                .iter()
                .map(|&s| {
                    let mut arm = Arm::new(format!("sparsity={s:.3}"), k, move |m, _, _| {
                        let wide = concat_networks(&m.iter().collect::<Vec<_>>())?;
                        magnitude_prune_with(&wide, &KeepPolicy::Sparsity(s as f32), include_bias)
                    });
                    let widths: Vec<usize> = Network::init(&data.input_shape, &data.specs, &mut RngStream::new(0, "shape"))
                        .map(|n| n.hidden_layers().iter().map(|h| h.units).collect())
                        .unwrap_or_default();
                    let member_size = widths.iter().all(|&w| keep_count(k * w, s as f32) == w);
                    arm.extra.insert("sparsity".into(), s as f32);
                    arm.extra.insert("member_size_point".into(), if member_size { 1.0 } else { 0.0 });
                    arm
                })
                .collect();
            run_arms(spec, &data, k, &arms)
        }
    }
}

/// Fuses each trained member with an exact copy of itself. Returns the NT
/// report followed by a weight-averaging control.
pub fn failure_case(spec: &ExperimentSpec) -> Result<Vec<RunReport>> {
    spec.validate()?;
    let data = Data::load(spec)?;
    let plan = spec.fusion_plan();
    let arms = vec![
        Arm::new("NT self-fusion", 1, move |m, _, _| {
            nt_fuse(&bundle_of(&[m[0].clone(), m[0].clone()])?, &FusionPlan { method: FusionMethod::Nt, ..plan.clone() })
        }),
        Arm::new("VanillaAvg self-fusion", 1, |m, _, _| average_networks(&[&m[0], &m[0]])),
    ];
    run_arms(spec, &data, 1, &arms)
}

/// Each method on the same `k` members, plus an optional distillation arm per method.
pub fn compare_methods(
    spec: &ExperimentSpec,
    methods: &[FusionMethod],
    kd: Option<KdConfig>,
) -> Result<Vec<RunReport>> {
    spec.validate()?;
    let data = Data::load(spec)?;
    let mut arms = Vec::new();
    for &method in methods {
        let plan = FusionPlan { method, ..spec.fusion_plan() };
        arms.push(Arm::new(method.label(), spec.k, {
            let plan = plan.clone();
            move |m, d, ft| merge_stage(m, &plan, d, ft)
        }));
        if let Some(kd) = kd {
            let mut arm = Arm::new(format!("{}+KD", method.label()), spec.k, move |m, d, ft| merge_stage(m, &plan, d, ft));
            arm.distill = Some(kd);
            arms.push(arm);
        }
    }
    run_arms(spec, &data, spec.k, &arms)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostRow {
    pub method: FusionMethod,
    pub width: usize,
    pub k: usize,
    /// Minimum over repetitions.
    pub wall_seconds: f64,
    /// Tensor-allocation high-water mark during fusion, above what was live before.
    pub peak_bytes: u64,
    /// Bytes of the input models.
    pub model_bytes: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CostTable {
    pub rows: Vec<CostRow>,
}

impl CostTable {
    pub fn get(&self, method: FusionMethod, width: usize) -> Option<&CostRow> {
        self.rows.iter().find(|r| r.method == method && r.width == width)
    }
}

/// Times weight averaging, NT and (up to `align_max_width`, `k = 2`) alignment
/// on randomly initialised one-hidden-layer networks.
pub fn measure_fusion_cost(widths: &[usize], k: usize, opts: &CostOptions) -> Result<CostTable> {
    let mut table = CostTable::default();
    for &width in widths {
        let specs = mlp_specs(opts.input_dim, &[width], opts.classes);
        let members = (0..k)
            .map(|i| Network::init(&[opts.input_dim], &specs, &mut RngStream::new(opts.seed, format!("cost/{width}/{i}"))))
            .collect::<Result<Vec<_>>>()?;
        let bundle = EnsembleBundle::from_members(members)?;
        let model_bytes = bundle.members().iter().map(|m| m.nbytes() as u64).sum();
        let plan = FusionPlan::new(FusionMethod::Nt, TrainConfig::new(0, 0.01, 0.9, 1, 0));
        let mut methods = vec![FusionMethod::VanillaAvg, FusionMethod::Nt];
        if k == 2 && width <= opts.align_max_width {
            methods.push(FusionMethod::AlignAvg);
        }
        for method in methods {
            let plan = FusionPlan { method, ..plan.clone() };
            let mut best = f64::INFINITY;
            let mut peak = 0u64;
            for _ in 0..opts.reps.max(1) {
                mem::reset_peak();
                let base = mem::live_bytes();
                let start = Instant::now();
                let out = fuse(&bundle, &plan)?;
                best = best.min(start.elapsed().as_secs_f64());
                peak = (mem::peak_bytes() - base).max(0) as u64;
                drop(out);
            }
            table.rows.push(CostRow { method, width, k, wall_seconds: best, peak_bytes: peak, model_bytes });
        }
    }
    Ok(table)
}

/// Everything one spec produces.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ExperimentOutput {
    pub reports: Vec<RunReport>,
    pub cost: Option<CostTable>,
    pub experiment: String,
}

impl ExperimentOutput {
    pub fn rows(&self) -> Vec<ReportRow> {
        let mut rows: Vec<ReportRow> = self.reports.iter().flat_map(RunReport::rows).collect();
        if let Some(cost) = &self.cost {
            for c in &cost.rows {
                for (metric, value) in [("peak_bytes", c.peak_bytes as f32), ("model_bytes", c.model_bytes as f32)] {
                    rows.push(ReportRow {
                        experiment: self.experiment.clone(),
                        method: format!("{} width={} k={}", c.method.label(), c.width, c.k),
                        seed: 0,
                        epoch: None,
                        metric: metric.into(),
                        value,
                    });
                }
            }
        }
        rows
    }

    pub fn timings(&self) -> serde_json::Value {
        let runs: Vec<TimingRow> = self.reports.iter().flat_map(RunReport::timings).collect();
        serde_json::json!({ "runs": runs, "cost": self.cost })
    }

    /// Writes `report.{csv,json,svg}` into `dir`. These depend only on the spec.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let rows = self.rows();
        [ReportFormat::Csv, ReportFormat::Json, ReportFormat::Svg]
            .into_iter()
            .map(|f| report::emit_report(&rows, f, dir))
            .collect()
    }

    /// Writes the host-dependent measurements to `path`.
    pub fn write_timings(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, serde_json::to_string_pretty(&self.timings())? + "\n").map_err(|e| Error::io(path, e))
    }
}

pub fn run_experiment(spec: &ExperimentSpec) -> Result<ExperimentOutput> {
    spec.validate()?;
    let mut out = ExperimentOutput { experiment: spec.name.clone(), ..Default::default() };
    match &spec.kind {
        ExperimentKind::Pipeline => out.reports.push(run_pipeline(spec)?),
        ExperimentKind::Pipelines { pipelines } => out.reports = run_pipelines(spec, pipelines)?,
        ExperimentKind::Multimodel { ks, methods } => out.reports = ablation_multimodel(spec, ks, methods)?,
        ExperimentKind::Sweep { axis, values } => out.reports = ablation_sweep(spec, *axis, values)?,
        ExperimentKind::FailureCase => out.reports = failure_case(spec)?,
        ExperimentKind::Compare { methods, distill } => out.reports = compare_methods(spec, methods, *distill)?,
        ExperimentKind::Cost { widths, options } => out.cost = Some(measure_fusion_cost(widths, spec.k, options)?),
    }
    Ok(out)
}
