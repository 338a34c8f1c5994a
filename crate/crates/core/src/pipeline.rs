//! End-to-end operations behind the command-line tool: train from a
//! manifest, encode images into a code database, evaluate, query and
//! inspect localization.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::checkpoint;
use crate::collab::{EpochLog, Sample, Trainer};
use crate::config::Config;
use crate::data::{load_image, DatasetManifest, Split};
use crate::error::{Error, Result};
use crate::geometry::{iou, BoundingBox, Proposal, ProposalSet};
use crate::model::{Encoding, Model};
use crate::retrieval::{CodeDatabase, Metrics, PackedCode, Queries};
use crate::synth::{read_boxes, synth_generate, SyntheticOutput, SyntheticSpec};

/// Build a model from `config` (seeded by `config.train.seed`) and train
/// it on `samples`, calling `on_epoch` after every epoch.
pub fn train_model(
    config: &Config,
    samples: &[Sample],
    mut on_epoch: impl FnMut(&EpochLog) -> Result<()>,
) -> Result<Model> {
    let mut model_cfg = config.model.clone();
    if config.num_classes > 0 {
        model_cfg.num_classes = config.num_classes;
    }
    let classes = model_cfg.num_classes;
    if let Some(s) = samples.iter().find(|s| s.label == 0 || s.label > classes) {
        return Err(Error::Label { label: s.label, classes });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.train.seed);
    let model = Model::new(model_cfg, &mut rng)?;
    let mut trainer = Trainer::new(model, config.train.clone())?;
    for _ in 0..config.train.epochs {
        let log = trainer.train_epoch(samples)?;
        log::info!(
            "epoch {} L_cls {:.4} L_rank {:.4} L_loc {:.4} total {:.4} lr {}",
            log.epoch,
            log.l_cls,
            log.l_rank,
            log.l_loc,
            log.total,
            log.lr
        );
        on_epoch(&log)?;
    }
    Ok(trainer.into_model())
}

/// Train on the manifest's train split; writes the checkpoint and a
/// JSON-lines log (one object per epoch) to the configured paths.
pub fn cmd_train(config: &Config) -> Result<Model> {
    let manifest_path = config
        .manifest
        .as_deref()
        .ok_or_else(|| Error::Config("manifest: no training manifest configured".into()))?;
    let manifest = DatasetManifest::read(manifest_path)?.split(Split::Train);
    let mut cfg = config.clone();
    cfg.resolve_classes(manifest.num_classes())?;
    let samples = manifest.load_samples(cfg.model.backbone.input_size)?;
    let log_path = &cfg.train_log;
    let mut log = std::fs::File::create(log_path).map_err(|e| Error::io(log_path, e))?;
    let model = train_model(&cfg, &samples, |entry| {
        let line = serde_json::to_string(entry).expect("log serializes");
        writeln!(log, "{line}").map_err(|e| Error::io(log_path, e))
    })?;
    checkpoint::save(&cfg.checkpoint, &model, &cfg)?;
    Ok(model)
}

pub fn encode_samples(model: &Model, samples: &[Sample]) -> Result<Vec<Encoding>> {
    samples.iter().map(|s| model.encode(&s.image)).collect()
}

pub fn database_from(model: &Model, samples: &[Sample]) -> Result<CodeDatabase> {
    let codes = encode_samples(model, samples)?;
    CodeDatabase::new(
        model.config.code_bits,
        codes.iter().map(|e| PackedCode::pack(&e.code)).collect(),
        samples.iter().map(|s| s.label).collect(),
    )
}

/// Encode the rows of `manifest` (optionally one split) and write the code
/// database to `out`.
pub fn cmd_encode(checkpoint_path: &Path, manifest: &Path, split: Option<Split>, out: &Path) -> Result<CodeDatabase> {
    let (model, _) = checkpoint::load(checkpoint_path)?;
    let mut m = DatasetManifest::read(manifest)?;
    if let Some(s) = split {
        m = m.split(s);
    }
    let samples = m.load_samples(model.input_size())?;
    let db = database_from(&model, &samples)?;
    db.save(out)?;
    Ok(db)
}

/// Where evaluation queries come from.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum QuerySource {
    /// A code database file with its labels sidecar.
    Codes(PathBuf),
    /// A manifest (optionally one split) encoded with a checkpoint.
    Manifest {
        manifest: PathBuf,
        split: Option<Split>,
        checkpoint: PathBuf,
    },
}

/// Compute metrics of `queries` against the database at `db_path`; writes
/// `<out>.json` and `<out>.csv` when `out` is given.
pub fn cmd_eval(db_path: &Path, queries: &QuerySource, config: &Config, out: Option<&Path>) -> Result<Metrics> {
    let db = CodeDatabase::load(db_path)?;
    let qdb = match queries {
        QuerySource::Codes(p) => CodeDatabase::load(p)?,
        QuerySource::Manifest {
            manifest,
            split,
            checkpoint: ckpt,
        } => {
            let (model, _) = checkpoint::load(ckpt)?;
            let mut m = DatasetManifest::read(manifest)?;
            if let Some(s) = split {
                m = m.split(*s);
            }
            database_from(&model, &m.load_samples(model.input_size())?)?
        }
    };
    let q = Queries::new(qdb.codes(), qdb.labels())?;
    let metrics = Metrics::compute(&q, &db, &config.eval)?;
    if let Some(stem) = out {
        write_metrics(&metrics, stem)?;
    }
    Ok(metrics)
}

pub fn write_metrics(metrics: &Metrics, stem: &Path) -> Result<(PathBuf, PathBuf)> {
    let json = stem.with_extension("json");
    let csv = stem.with_extension("csv");
    std::fs::write(&json, metrics.to_json()).map_err(|e| Error::io(&json, e))?;
    std::fs::write(&csv, metrics.to_csv()).map_err(|e| Error::io(&csv, e))?;
    Ok((json, csv))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Neighbor {
    pub rank: usize,
    pub index: usize,
    pub distance: u32,
    pub label: usize,
}

/// Encode one image and return its `k` nearest database entries.
pub fn cmd_query(checkpoint_path: &Path, db_path: &Path, image: &Path, k: usize) -> Result<Vec<Neighbor>> {
    let (model, _) = checkpoint::load(checkpoint_path)?;
    let db = CodeDatabase::load(db_path)?;
    let enc = model.encode(&load_image(image, model.input_size())?)?;
    let ranked = db.query(&PackedCode::pack(&enc.code), k)?;
    Ok(ranked
        .items
        .iter()
        .enumerate()
        .map(|(rank, &(index, distance))| Neighbor {
            rank: rank + 1,
            index,
            distance,
            label: db.labels()[index],
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct LocateReport {
    pub regions: [Proposal; 3],
    /// IoU of each region with the planted glyph, when known.
    pub iou: Option<[f64; 3]>,
}

impl LocateReport {
    pub fn to_json(&self) -> String {
        let regions: Vec<_> = self
            .regions
            .iter()
            .enumerate()
            .map(|(l, p)| {
                let (h, w, r) = p.grid_index;
                serde_json::json!({
                    "layer_id": p.layer_id,
                    "h": h,
                    "w": w,
                    "r": r,
                    "box": [p.bbox.x_min, p.bbox.y_min, p.bbox.x_max, p.bbox.y_max],
                    "score": p.score,
                    "iou": self.iou.map(|v| v[l]),
                })
            })
            .collect();
        serde_json::to_string_pretty(&serde_json::json!({ "regions": regions })).expect("json")
    }

    /// Box debug CSV, with an `iou` column when ground truth is known.
    pub fn to_csv(&self) -> String {
        let set: ProposalSet = self.regions.iter().cloned().collect();
        let csv = set.to_csv();
        match self.iou {
            None => csv,
            Some(ious) => csv
                .lines()
                .enumerate()
                .map(|(i, line)| {
                    if i == 0 {
                        format!("{line},iou\n")
                    } else {
                        format!("{line},{}\n", ious[i - 1])
                    }
                })
                .collect(),
        }
    }
}

/// The three selected regions of one image. If `boxes` lists the image, IoU against its glyph is added.
pub fn cmd_locate(checkpoint_path: &Path, image: &Path, boxes: Option<&Path>) -> Result<LocateReport> {
    let (model, _) = checkpoint::load(checkpoint_path)?;
    let tensor = load_image(image, model.input_size())?;
    let regions = model.locate(&tensor)?;
    let truth = match boxes {
        None => None,
        Some(b) => {
            let want = std::fs::canonicalize(image).map_err(|e| Error::io(image, e))?;
            read_boxes(b)?
                .into_iter()
                .find(|(p, _)| std::fs::canonicalize(p).is_ok_and(|c| c == want))
                .map(|(_, bbox)| bbox)
        }
    };
    Ok(LocateReport {
        iou: truth.map(|t: BoundingBox| std::array::from_fn(|l| iou(&regions[l].bbox, &t))),
        regions,
    })
}

/// Write a synthetic dataset under `dir` plus a `train.cfg` holding the
/// synthetic preset pointed at its manifest.
pub fn cmd_synth(spec: &SyntheticSpec, dir: &Path) -> Result<(SyntheticOutput, PathBuf)> {
    let out = synth_generate(spec, dir)?;
    let cfg = Config {
        manifest: Some(PathBuf::from("manifest.csv")),
        ..Config::synthetic()
    };
    let path = dir.join("train.cfg");
    std::fs::write(&path, cfg.to_text()).map_err(|e| Error::io(&path, e))?;
    Ok((out, path))
}
