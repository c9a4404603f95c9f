use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use crate::backbones::{build_frozen_backbone, Backbone};
use crate::datakit::{split_leave_one_out, InteractionDataset, LeaveOneOut};
use crate::error::{Error, Result};
use crate::evalkit::{evaluate, EvalReport, EvalSplit, MetricsJson};
use crate::hscache::{CachedStates, HiddenSource, OnTheFlyStates};
use crate::model::{CheckpointHeader, CrossanModel};
use crate::modality::subset_tag;
use crate::seqrec::{train, TrainReport};

pub const CHECKPOINT_FILE: &str = "ckpt";
pub const RUN_FILE: &str = "run.json";
pub const METRICS_FILE: &str = "metrics.json";
pub const PER_USER_FILE: &str = "per_user.csv";
pub const TRAIN_LOG_FILE: &str = "train_log.jsonl";
pub const GATES_FILE: &str = "gates.csv";

/// A dataset with its split, frozen backbones and (optionally) their cache.
pub struct Workspace {
    pub dataset: InteractionDataset,
    pub split: LeaveOneOut,
    pub backbones: Vec<Backbone>,
    pub cache: Option<CachedStates>,
}

impl Workspace {
    pub fn new(dataset: InteractionDataset, cfg: &RunConfig) -> Result<Self> {
        cfg.check_dataset(&dataset)?;
        let backbones = dataset
            .modalities()
            .into_iter()
            .map(|m| build_frozen_backbone(&cfg.backbones.for_modality(m, &dataset)?))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            split: split_leave_one_out(&dataset),
            dataset,
            backbones,
            cache: None,
        })
    }

    /// Open the on-disk cache in `dir`, checking it matches.
    pub fn open_cache(mut self, dir: &Path) -> Result<Self> {
        self.cache = Some(CachedStates::open(dir, &self.dataset, &self.backbones)?);
        Ok(self)
    }

    /// Precompute the cache in memory.
    pub fn build_cache(mut self) -> Result<Self> {
        self.cache = Some(CachedStates::build(&self.dataset, &self.backbones)?);
        Ok(self)
    }

    pub fn on_the_fly(&self) -> OnTheFlyStates<'_> {
        OnTheFlyStates::new(&self.dataset, &self.backbones)
    }

    /// The cache when present, the backbones otherwise.
    pub fn source(&self) -> Box<dyn HiddenSource + Sync + '_> {
        match &self.cache {
            Some(c) => Box::new(c),
            None => Box::new(self.on_the_fly()),
        }
    }

    pub fn dataset_hash(&self) -> u64 {
        self.dataset.content_hash()
    }

    /// Error unless a checkpoint was trained on this workspace's dataset.
    pub fn check_checkpoint(&self, header: &CheckpointHeader) -> Result<()> {
        let have = format!("{:016x}", self.dataset_hash());
        if header.dataset_hash != have {
            return Err(Error::Config(format!(
                "checkpoint was trained on dataset {} but the data directory holds {have}",
                header.dataset_hash
            )));
        }
        Ok(())
    }
}

/// Short identifier such as `cross-momef-TIVA`.
pub fn model_name(cfg: &RunConfig) -> String {
    format!(
        "{}-{}-{}",
        cfg.sidenet.variant,
        cfg.fusion.method,
        subset_tag(&cfg.sidenet.modalities)
    )
}

/// Reproduction record written next to every checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunInfo {
    pub model: String,
    pub seed: u64,
    pub dataset_hash: String,
    pub version: String,
}

pub struct RunOutcome {
    pub model: CrossanModel,
    pub train: TrainReport,
    pub eval: EvalReport,
    pub metrics: MetricsJson,
    pub info: RunInfo,
}

pub fn metrics_json(name: &str, dataset_hash: u64, split: EvalSplit, r: &EvalReport) -> MetricsJson {
    MetricsJson {
        model: name.to_string(),
        dataset_hash: format!("{dataset_hash:016x}"),
        split,
        hr10: r.hr10,
        hr20: r.hr20,
        ndcg10: r.ndcg10,
        ndcg20: r.ndcg20,
        users: r.ranks.len(),
        per_user_csv: PER_USER_FILE.into(),
    }
}

/// Train a fresh model from `cfg` with `seed`, then evaluate it.
pub fn train_and_eval(
    cfg: &RunConfig,
    split: &LeaveOneOut,
    source: &dyn HiddenSource,
    dataset_hash: u64,
    seed: u64,
) -> Result<RunOutcome> {
    cfg.validate()?;
    let mut model = CrossanModel::new(cfg.model(), &cfg.backbone_widths(), seed)?;
    let report = train(&mut model, split, source, &cfg.train, seed)?;
    let eval = evaluate(&model, source, split, cfg.eval.split, cfg.eval.max_users)?;
    let name = model_name(cfg);
    Ok(RunOutcome {
        metrics: metrics_json(&name, dataset_hash, cfg.eval.split, &eval),
        info: RunInfo {
            model: name,
            seed,
            dataset_hash: format!("{dataset_hash:016x}"),
            version: env!("CARGO_PKG_VERSION").to_string(),
        },
        model,
        train: report,
        eval,
    })
}

pub(crate) fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub(crate) fn json_line<T: Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("plain struct") + "\n"
}

pub fn write_metrics(dir: &Path, metrics: &MetricsJson, eval: &EvalReport) -> Result<()> {
    write_file(&dir.join(METRICS_FILE), &json_line(metrics))?;
    write_file(&dir.join(PER_USER_FILE), &eval.per_user_csv())
}

/// Lay out a run directory: resolved config, run record, checkpoint,
/// training log, gate heatmap and metrics.
pub fn write_run(dir: &Path, cfg: &RunConfig, out: &RunOutcome, dataset_hash: u64) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    cfg.write_resolved(dir)?;
    write_file(&dir.join(RUN_FILE), &json_line(&out.info))?;
    out.model.save(&dir.join(CHECKPOINT_FILE), out.info.seed, dataset_hash)?;
    write_file(&dir.join(TRAIN_LOG_FILE), &out.train.log_jsonl())?;
    out.model.side.export_gate_heatmap(&out.model.store, &dir.join(GATES_FILE))?;
    write_metrics(dir, &out.metrics, &out.eval)
}
