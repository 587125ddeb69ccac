//! Experiment plumbing: seeded datasets, the training loop, evaluation with
//! per-case rows and ECDFs, and ablation grids.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::cost::network_cost;
use crate::error::{Error, Result};
use crate::loss::{compound_loss, one_hot};
use crate::metrics::{self, ecdf, mean_defined, SegmentationMask};
use crate::optim::{Adam, AdamConfig};
use crate::params::{apply_batch_stats, Parameters, Session};
use crate::synth::{self, DropoutSpec, QualityTier, Sequence, SequenceSpec};
use crate::tensor::Tensor;
use crate::tnsr;
use crate::unet::{network_logits, BackboneConfig, ConfigId, UNetParams};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
pub const BN_MOMENTUM: f64 = 0.1;
/// Foreground classes scored by evaluation.
pub const SCORED_CLASSES: [u8; 2] = [synth::CAVITY, synth::WALL];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub seed: u64,
    /// Extent of every spatial axis.
    pub size: usize,
    pub spatial_rank: usize,
    pub frames: usize,
    pub tier: QualityTier,
    pub contraction: f64,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    /// Frames that receive dropout patches; `None` targets the unannotated ones.
    pub dropout_frames: Option<Vec<usize>>,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            size: 64,
            spatial_rank: 2,
            frames: 2,
            tier: QualityTier::Good,
            contraction: 0.35,
            train: 16,
            val: 4,
            test: 8,
            dropout_frames: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    fn code(self) -> u64 {
        match self {
            Split::Train => 1,
            Split::Val => 2,
            Split::Test => 3,
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Split::ALL
            .into_iter()
            .find(|x| x.to_string().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown split {s:?}; expected train, val or test")))
    }
}

impl DatasetSpec {
    pub fn count(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train,
            Split::Val => self.val,
            Split::Test => self.test,
        }
    }

    /// Generator settings of one case.
    pub fn sequence_spec(&self, split: Split, index: usize) -> SequenceSpec {
        let seed = self
            .seed
            .wrapping_mul(0x9E37_79B9_7F4A_7C15)
            .wrapping_add(split.code() << 32)
            .wrapping_add(index as u64);
        SequenceSpec {
            seed,
            extents: vec![self.size; self.spatial_rank],
            frames: self.frames,
            contraction: self.contraction,
            dropout: DropoutSpec {
                frames: self.dropout_frames.clone(),
                ..Default::default()
            },
            ..Default::default()
        }
        .with_tier(self.tier)
    }

    pub fn validate(&self) -> Result<()> {
        if self.train == 0 {
            return Err(Error::Config("at least one training case is required".into()));
        }
        self.sequence_spec(Split::Train, 0).validate()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Case {
    pub id: String,
    pub split: Split,
    pub sequence: Sequence,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub spec: DatasetSpec,
    pub cases: Vec<Case>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseEntry {
    pub id: String,
    pub split: Split,
    pub seed: u64,
    pub frames: usize,
    pub annotated: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: String,
    pub spec: DatasetSpec,
    pub cases: Vec<CaseEntry>,
}

pub const MANIFEST_FILE: &str = "dataset.json";

impl Dataset {
    pub fn generate(spec: &DatasetSpec) -> Result<Self> {
        spec.validate()?;
        let mut cases = Vec::new();
        for split in Split::ALL {
            for i in 0..spec.count(split) {
                cases.push(Case {
                    id: format!("{split}_{i:03}"),
                    split,
                    sequence: synth::generate(&spec.sequence_spec(split, i))?,
                });
            }
        }
        Ok(Self {
            spec: spec.clone(),
            cases,
        })
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &Case> {
        self.cases.iter().filter(move |c| c.split == split)
    }

    pub fn manifest(&self) -> DatasetManifest {
        DatasetManifest {
            version: VERSION.into(),
            spec: self.spec.clone(),
            cases: self
                .cases
                .iter()
                .map(|c| CaseEntry {
                    id: c.id.clone(),
                    split: c.split,
                    seed: c.sequence.spec.seed,
                    frames: c.sequence.frames.len(),
                    annotated: c.sequence.annotated.clone(),
                })
                .collect(),
        }
    }

    /// Writes one directory per case plus `dataset.json`.
    pub fn save(&self, dir: &Path) -> Result<DatasetManifest> {
        for case in &self.cases {
            let d = dir.join(&case.id);
            std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
            case.sequence.save(&d)?;
        }
        let manifest = self.manifest();
        write_json(&dir.join(MANIFEST_FILE), &manifest)?;
        Ok(manifest)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: DatasetManifest = read_json(&dir.join(MANIFEST_FILE))?;
        let mut cases = Vec::with_capacity(manifest.cases.len());
        for entry in manifest.cases {
            let sequence = Sequence::load(&dir.join(&entry.id))?;
            cases.push(Case {
                id: entry.id,
                split: entry.split,
                sequence,
            });
        }
        Ok(Self {
            spec: manifest.spec,
            cases,
        })
    }
}

pub fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(|e| Error::Json {
        path: path.into(),
        source: e,
    })?;
    bytes.push(b'\n');
    tnsr::write_atomic(path, &bytes)
}

pub fn read_json<S: for<'de> Deserialize<'de>>(path: &Path) -> Result<S> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| Error::Json {
        path: path.into(),
        source: e,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub config: ConfigId,
    pub heads: usize,
    pub d_embed: Option<usize>,
    pub channels: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub data: DatasetSpec,
    pub output: Option<String>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            config: ConfigId::C1,
            heads: 8,
            d_embed: None,
            channels: vec![16, 32, 64, 128, 256],
            epochs: 50,
            batch_size: 4,
            lr: 1e-3,
            seed: 0,
            data: DatasetSpec::default(),
            output: None,
        }
    }
}

impl ExperimentConfig {
    pub fn frames(&self) -> usize {
        self.data.frames
    }

    pub fn backbone(&self) -> BackboneConfig {
        BackboneConfig {
            spatial_rank: self.data.spatial_rank,
            in_channels: 1,
            channels: self.channels.clone(),
            classes: synth::CLASSES as usize,
            heads: self.heads,
            d_embed: self.d_embed,
            ..Default::default()
        }
        .for_config(self.config)
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch size must be positive".into()));
        }
        if self.heads == 0 {
            return Err(Error::Config("heads must be positive".into()));
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::Config(format!("learning rate {} must be finite and non-negative", self.lr)));
        }
        self.data.validate()?;
        let backbone = self.backbone();
        backbone.validate()?;
        backbone.check_input(self.data.frames, &vec![self.data.size; self.data.spatial_rank])
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.data.train.div_ceil(self.batch_size)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub steps: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub val_dsc: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters of the epoch with the best validation DSC (the last epoch
    /// without validation cases).
    pub params: UNetParams<f32>,
    pub log: Vec<EpochLog>,
    pub best_epoch: usize,
    pub step_losses: Vec<f64>,
}

impl TrainOutcome {
    pub fn initial_loss(&self) -> f64 {
        self.step_losses[0]
    }

    /// Mean training loss of the final epoch.
    pub fn final_loss(&self) -> f64 {
        self.log.last().map(|l| l.train_loss).unwrap_or(f64::NAN)
    }
}

fn frame_inputs(s: &mut Session<f32>, seq: &Sequence) -> Result<Vec<Var>> {
    seq.frames
        .iter()
        .map(|f| {
            let mut shape = vec![1];
            shape.extend_from_slice(f.shape());
            Ok(s.input(f.clone().reshape(&shape)?))
        })
        .collect()
}

/// Mean compound loss over the annotated frames of one sequence.
pub fn sequence_loss(s: &mut Session<f32>, backbone: &BackboneConfig, params: &UNetParams<f32>, seq: &Sequence) -> Result<Var> {
    let inputs = frame_inputs(s, seq)?;
    let logits = network_logits(s, &inputs, backbone, params)?;
    let mut total: Option<Var> = None;
    for &t in &seq.annotated {
        let mask = &seq.masks[t];
        let truth = s.input(one_hot(mask.labels(), mask.shape(), backbone.classes)?);
        let probs = s.tape.softmax(logits[t], 0)?;
        let l = compound_loss(&mut s.tape, truth, probs)?;
        total = Some(match total {
            None => l,
            Some(acc) => s.tape.add(acc, l)?,
        });
    }
    let total = total.ok_or_else(|| Error::Config("sequence has no annotated frames".into()))?;
    Ok(s.tape.scale(total, 1.0 / seq.annotated.len() as f32))
}

fn validation(cfg: &BackboneConfig, params: &UNetParams<f32>, cases: &[&Case]) -> Result<(f64, f64)> {
    let mut loss = 0.0;
    let mut dsc = Vec::new();
    for case in cases {
        let mut s = Session::eval();
        let l = sequence_loss(&mut s, cfg, params, &case.sequence)?;
        loss += s.tape.value(l).item() as f64;
        let preds = predict(cfg, params, &case.sequence)?;
        for &t in &case.sequence.annotated {
            for class in SCORED_CLASSES {
                dsc.push(metrics::dsc(&preds[t], &case.sequence.masks[t], class)?);
            }
        }
    }
    let n = cases.len() as f64;
    Ok((loss / n, dsc.iter().sum::<f64>() / dsc.len() as f64))
}

/// Trains from a seeded initialization with Adam, keeping the parameters of
/// the best validation epoch. Single-threaded and deterministic.
pub fn train(cfg: &ExperimentConfig, data: &Dataset) -> Result<TrainOutcome> {
    train_with(cfg, data, |_| {})
}

/// [`train`] with a callback after every epoch.
pub fn train_with(cfg: &ExperimentConfig, data: &Dataset, mut on_epoch: impl FnMut(&EpochLog)) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.spec.frames != cfg.data.frames || data.spec.spatial_rank != cfg.data.spatial_rank {
        return Err(Error::Config(format!(
            "dataset has T={} rank {}, configuration expects T={} rank {}",
            data.spec.frames, data.spec.spatial_rank, cfg.data.frames, cfg.data.spatial_rank
        )));
    }
    let backbone = cfg.backbone();
    let mut params = UNetParams::<f32>::seeded(cfg.seed, &backbone)?;
    let mut adam = Adam::new(AdamConfig {
        lr: cfg.lr,
        ..Default::default()
    });
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5EED_0F_0D0E);
    let train_cases: Vec<&Case> = data.split(Split::Train).collect();
    let val_cases: Vec<&Case> = data.split(Split::Val).collect();
    if train_cases.is_empty() {
        return Err(Error::Config("dataset has no training cases".into()));
    }

    let mut log = Vec::with_capacity(cfg.epochs);
    let mut step_losses = Vec::new();
    let mut best: Option<(f64, usize, UNetParams<f32>)> = None;
    let mut order: Vec<usize> = (0..train_cases.len()).collect();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut steps = 0;
        for batch in order.chunks(cfg.batch_size) {
            let mut grads: Option<indexmap::IndexMap<String, Tensor<f32>>> = None;
            let mut stats = Vec::new();
            let mut batch_loss = 0.0;
            for &i in batch {
                let mut s = Session::train();
                let loss = sequence_loss(&mut s, &backbone, &params, &train_cases[i].sequence)?;
                let value = s.tape.value(loss).item() as f64;
                if !value.is_finite() {
                    return Err(Error::Numeric(format!(
                        "loss became {value} at epoch {epoch}, step {} (case {})",
                        steps + 1,
                        train_cases[i].id
                    )));
                }
                batch_loss += value;
                s.backward(loss)?;
                let g = s.gradients(&params);
                match &mut grads {
                    None => grads = Some(g),
                    Some(acc) => {
                        for (name, t) in acc.iter_mut() {
                            t.add_assign(&g[name]);
                        }
                    }
                }
                stats.extend(s.batch_stats(&params));
            }
            let scale = 1.0 / batch.len() as f32;
            let mut grads = grads.expect("non-empty batch");
            for t in grads.values_mut() {
                *t = t.map(|v| v * scale);
            }
            adam.step(&mut params, &grads)?;
            apply_batch_stats(&mut params, &stats, BN_MOMENTUM);
            let mean = batch_loss / batch.len() as f64;
            step_losses.push(mean);
            epoch_loss += mean;
            steps += 1;
        }
        let (val_loss, val_dsc) = if val_cases.is_empty() {
            (None, None)
        } else {
            let (l, d) = validation(&backbone, &params, &val_cases)?;
            (Some(l), Some(d))
        };
        let entry = EpochLog {
            epoch,
            steps,
            train_loss: epoch_loss / steps as f64,
            val_loss,
            val_dsc,
        };
        on_epoch(&entry);
        let score = val_dsc.unwrap_or(f64::INFINITY);
        if best.as_ref().map_or(true, |(b, _, _)| score > *b || val_dsc.is_none()) {
            best = Some((score, epoch, params.clone()));
        }
        log.push(entry);
    }
    let (_, best_epoch, params) = best.expect("at least one epoch");
    Ok(TrainOutcome {
        params,
        log,
        best_epoch,
        step_losses,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub kind: String,
    pub version: String,
    pub config: ExperimentConfig,
    pub epoch: usize,
}

pub fn save_checkpoint(path: &Path, cfg: &ExperimentConfig, params: &UNetParams<f32>, epoch: usize) -> Result<()> {
    let header = CheckpointHeader {
        kind: "unet".into(),
        version: VERSION.into(),
        config: cfg.clone(),
        epoch,
    };
    params.save(path, serde_json::to_value(header).expect("header serializes"))
}

/// Loads a checkpoint along with the configuration it was trained with.
pub fn load_checkpoint(path: &Path) -> Result<(CheckpointHeader, UNetParams<f32>)> {
    let bundle = tnsr::Bundle::load(path)?;
    let header: CheckpointHeader = serde_json::from_value(bundle.header.clone()).map_err(|e| Error::Json {
        path: path.into(),
        source: e,
    })?;
    if header.kind != "unet" {
        return Err(Error::Format {
            path: path.into(),
            msg: format!("expected a unet checkpoint, found {:?}", header.kind),
        });
    }
    let mut params = UNetParams::seeded(0, &header.config.backbone())?;
    crate::params::load_bundle(&mut params, &bundle)?;
    Ok((header, params))
}

/// Argmax masks for every frame of a sequence (running batch-norm statistics).
pub fn predict(cfg: &BackboneConfig, params: &UNetParams<f32>, seq: &Sequence) -> Result<Vec<SegmentationMask>> {
    let mut s = Session::eval();
    let inputs = frame_inputs(&mut s, seq)?;
    let logits = network_logits(&mut s, &inputs, cfg, params)?;
    logits
        .iter()
        .zip(&seq.masks)
        .map(|(&l, m)| SegmentationMask::from_scores(s.tape.value(l), m.spacing().to_vec()))
        .collect()
}

/// Metrics of one annotated frame and class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseRow {
    pub case: String,
    pub frame: usize,
    pub class: u8,
    pub dsc: f64,
    pub hd_mm: Option<f64>,
    pub masd_mm: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassSummary {
    pub class: u8,
    pub dsc: f64,
    pub hd_mm: Option<f64>,
    pub masd_mm: Option<f64>,
    /// Rows whose distance metrics were undefined.
    pub undefined: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<CaseRow>,
    pub classes: Vec<ClassSummary>,
    pub dsc: f64,
    pub hd_mm: Option<f64>,
    pub masd_mm: Option<f64>,
    /// Sorted `(value, cumulative fraction)` pairs per metric.
    pub ecdf: BTreeMap<String, Vec<(f64, f64)>>,
}

/// Rows for one case from its per-frame predictions.
pub fn case_rows(id: &str, preds: &[SegmentationMask], seq: &Sequence) -> Result<Vec<CaseRow>> {
    if preds.len() != seq.masks.len() {
        return Err(Error::Config(format!(
            "case {id}: {} predictions for {} frames",
            preds.len(),
            seq.masks.len()
        )));
    }
    let mut rows = Vec::new();
    for &t in &seq.annotated {
        let (p, truth) = (&preds[t], &seq.masks[t]);
        if p.classes() != truth.classes() {
            return Err(Error::Config(format!(
                "case {id}: prediction has {} classes, ground truth {}",
                p.classes(),
                truth.classes()
            )));
        }
        for m in metrics::evaluate(p, truth, &SCORED_CLASSES)?.classes {
            rows.push(CaseRow {
                case: id.to_string(),
                frame: t,
                class: m.class,
                dsc: m.dsc,
                hd_mm: m.hd_mm,
                masd_mm: m.masd_mm,
            });
        }
    }
    Ok(rows)
}

/// Aggregates rows into per-class and overall means plus ECDFs.
pub fn summarize(rows: Vec<CaseRow>) -> EvalReport {
    let classes = SCORED_CLASSES
        .iter()
        .map(|&class| {
            let sel: Vec<&CaseRow> = rows.iter().filter(|r| r.class == class).collect();
            let (hd, undefined) = mean_defined(sel.iter().map(|r| r.hd_mm));
            let (masd, _) = mean_defined(sel.iter().map(|r| r.masd_mm));
            ClassSummary {
                class,
                dsc: sel.iter().map(|r| r.dsc).sum::<f64>() / sel.len().max(1) as f64,
                hd_mm: hd,
                masd_mm: masd,
                undefined,
            }
        })
        .collect();
    let dsc = rows.iter().map(|r| r.dsc).sum::<f64>() / rows.len().max(1) as f64;
    let (hd, _) = mean_defined(rows.iter().map(|r| r.hd_mm));
    let (masd, _) = mean_defined(rows.iter().map(|r| r.masd_mm));
    let mut curves = BTreeMap::new();
    curves.insert("dsc".to_string(), ecdf(&rows.iter().map(|r| r.dsc).collect::<Vec<_>>()));
    curves.insert("hd_mm".to_string(), ecdf(&rows.iter().filter_map(|r| r.hd_mm).collect::<Vec<_>>()));
    curves.insert("masd_mm".to_string(), ecdf(&rows.iter().filter_map(|r| r.masd_mm).collect::<Vec<_>>()));
    EvalReport {
        rows,
        classes,
        dsc,
        hd_mm: hd,
        masd_mm: masd,
        ecdf: curves,
    }
}

/// Evaluates a model on one split.
pub fn evaluate(cfg: &BackboneConfig, params: &UNetParams<f32>, data: &Dataset, split: Split) -> Result<EvalReport> {
    if cfg.classes != synth::CLASSES as usize {
        return Err(Error::Config(format!(
            "model predicts {} classes, dataset has {}",
            cfg.classes,
            synth::CLASSES
        )));
    }
    let mut rows = Vec::new();
    for case in data.split(split) {
        let preds = predict(cfg, params, &case.sequence)?;
        rows.extend(case_rows(&case.id, &preds, &case.sequence)?);
    }
    Ok(summarize(rows))
}

/// Scores the ground truth against itself.
pub fn evaluate_oracle(data: &Dataset, split: Split) -> Result<EvalReport> {
    let mut rows = Vec::new();
    for case in data.split(split) {
        rows.extend(case_rows(&case.id, &case.sequence.masks, &case.sequence)?);
    }
    Ok(summarize(rows))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AblationAxis {
    Config,
    Heads,
    Frames,
    Tier,
}

impl fmt::Display for AblationAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AblationAxis::Config => "config",
            AblationAxis::Heads => "heads",
            AblationAxis::Frames => "frames",
            AblationAxis::Tier => "tier",
        })
    }
}

impl FromStr for AblationAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [AblationAxis::Config, AblationAxis::Heads, AblationAxis::Frames, AblationAxis::Tier]
            .into_iter()
            .find(|a| a.to_string().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown ablation axis {s:?}; expected config, heads, frames or tier")))
    }
}

/// One configuration per axis value, validated.
pub fn ablation_cells(axis: AblationAxis, values: &[String], base: &ExperimentConfig) -> Result<Vec<ExperimentConfig>> {
    if values.is_empty() {
        return Err(Error::Config("ablation needs at least one value".into()));
    }
    let parse_usize = |v: &str| {
        v.parse::<usize>()
            .map_err(|_| Error::Config(format!("{axis} value {v:?} is not a positive integer")))
    };
    values
        .iter()
        .map(|v| {
            let mut cfg = base.clone();
            match axis {
                AblationAxis::Config => cfg.config = v.parse()?,
                AblationAxis::Heads => cfg.heads = parse_usize(v)?,
                AblationAxis::Frames => cfg.data.frames = parse_usize(v)?,
                AblationAxis::Tier => cfg.data.tier = v.parse()?,
            }
            cfg.validate().map_err(|e| Error::Config(format!("{axis}={v}: {e}")))?;
            Ok(cfg)
        })
        .collect()
}

/// Outcome of one training run inside an ablation cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub cell: String,
    pub seed: u64,
    pub dsc: f64,
    pub hd_mm: Option<f64>,
    pub masd_mm: Option<f64>,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub best_epoch: usize,
}

/// Seed-averaged results of one cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub cell: String,
    pub config: ConfigId,
    pub heads: usize,
    pub frames: usize,
    pub tier: QualityTier,
    pub seeds: usize,
    pub dsc: f64,
    pub hd_mm: Option<f64>,
    pub masd_mm: Option<f64>,
    pub flops: u64,
    pub params: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationResult {
    pub axis: AblationAxis,
    pub rows: Vec<AblationRow>,
    pub runs: Vec<RunRecord>,
}

/// Trains and tests one configuration; `seed` drives both data and weights.
pub fn run_cell(cell: &str, cfg: &ExperimentConfig, seed: u64) -> Result<RunRecord> {
    let mut cfg = cfg.clone();
    cfg.seed = seed;
    cfg.data.seed = seed;
    let data = Dataset::generate(&cfg.data)?;
    let outcome = train(&cfg, &data)?;
    let report = evaluate(&cfg.backbone(), &outcome.params, &data, Split::Test)?;
    Ok(RunRecord {
        cell: cell.to_string(),
        seed,
        dsc: report.dsc,
        hd_mm: report.hd_mm,
        masd_mm: report.masd_mm,
        initial_loss: outcome.initial_loss(),
        final_loss: outcome.final_loss(),
        best_epoch: outcome.best_epoch,
    })
}

/// Runs every (value, seed) pair. With `threads > 1` runs execute on a
/// dedicated pool; each run is single-threaded, so output does not depend on
/// the thread count.
pub fn ablate(axis: AblationAxis, values: &[String], base: &ExperimentConfig, seeds: &[u64], threads: usize) -> Result<AblationResult> {
    if seeds.is_empty() {
        return Err(Error::Config("ablation needs at least one seed".into()));
    }
    let cells = ablation_cells(axis, values, base)?;
    let jobs: Vec<(usize, u64)> = (0..cells.len()).flat_map(|c| seeds.iter().map(move |&s| (c, s))).collect();
    let run = |&(c, seed): &(usize, u64)| run_cell(&values[c], &cells[c], seed);
    let runs: Vec<RunRecord> = if threads > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
        pool.install(|| jobs.par_iter().map(run).collect::<Result<Vec<_>>>())?
    } else {
        jobs.iter().map(run).collect::<Result<Vec<_>>>()?
    };

    let mut rows = Vec::with_capacity(cells.len());
    for (c, cfg) in cells.iter().enumerate() {
        let mine: Vec<&RunRecord> = runs.iter().filter(|r| r.cell == values[c]).collect();
        let backbone = cfg.backbone();
        let spatial = vec![cfg.data.size; cfg.data.spatial_rank];
        let cost = network_cost(&backbone, &spatial, cfg.data.frames)?;
        let params = UNetParams::<f32>::seeded(0, &backbone)?.trainable_count() as u64;
        rows.push(AblationRow {
            cell: values[c].clone(),
            config: cfg.config,
            heads: cfg.heads,
            frames: cfg.data.frames,
            tier: cfg.data.tier,
            seeds: mine.len(),
            dsc: mine.iter().map(|r| r.dsc).sum::<f64>() / mine.len() as f64,
            hd_mm: mean_defined(mine.iter().map(|r| r.hd_mm)).0,
            masd_mm: mean_defined(mine.iter().map(|r| r.masd_mm)).0,
            flops: cost.total_flops,
            params,
        });
    }
    Ok(AblationResult { axis, rows, runs })
}
