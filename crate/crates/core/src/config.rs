//! Flat `key = value` configuration covering the model, training,
//! evaluation and file locations.
//!
//! Blank lines and lines starting with `#` are ignored. Every key is
//! optional; missing keys keep their defaults. Unknown and repeated keys
//! are rejected. Relative paths resolve against the config file's
//! directory when read with [`Config::load`].
//!
//! | key | meaning |
//! |---|---|
//! | `input_size` | backbone input side in pixels |
//! | `trunk`, `extra` | comma-separated `out:kernel:stride:padding` stages |
//! | `anchor_sizes` | comma-separated anchor sides |
//! | `anchor_ratios` | comma-separated `height:width` ratios |
//! | `num_classes` | class count, `0` to infer from the manifest |
//! | `fusion_dim`, `code_bits` | ranker widths |
//! | `triplet_margin`, `loc_margin` | loss margins |
//! | `lambda_cls`, `lambda_rank`, `lambda_loc` | loss weights |
//! | `n_hat`, `nms_iou` | localization target search |
//! | `triplets_per_anchor` | triplet mining cap |
//! | `batch_size`, `epochs`, `seed` | training loop |
//! | `learning_rate`, `lr_decay`, `lr_decay_every` | step schedule |
//! | `weight_decay`, `beta1`, `beta2`, `adam_epsilon` | optimizer |
//! | `warmup_epochs`, `warmup_crops` | classification pretraining |
//! | `schedule` | `joint` or `alternating` |
//! | `loc_loss_scope` | `all_cells` or `survivors` |
//! | `radius`, `empty_ball` | precision within a Hamming ball (`zero`/`skip`) |
//! | `map_cutoff` | `none` or a rank cutoff |
//! | `recall_levels`, `topn` | curve sampling |
//! | `manifest`, `checkpoint`, `train_log` | file locations |

use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::backbone::ConvStage;
use crate::collab::{LocLossScope, Schedule, TrainConfig};
use crate::error::{Error, Result};
use crate::geometry::AspectRatio;
use crate::model::ModelConfig;
use crate::retrieval::{EmptyBall, EvalOptions};

#[derive(Clone, Debug, PartialEq)]
pub struct Config {
    pub model: ModelConfig,
    /// `0` until resolved against a manifest.
    pub num_classes: usize,
    pub train: TrainConfig,
    pub eval: EvalOptions,
    pub manifest: Option<PathBuf>,
    pub checkpoint: PathBuf,
    pub train_log: PathBuf,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            num_classes: 0,
            train: TrainConfig::default(),
            eval: EvalOptions::default(),
            manifest: None,
            checkpoint: PathBuf::from("model.ckpt"),
            train_log: PathBuf::from("train_log.jsonl"),
        }
    }
}

impl Config {
    /// Desk-scale training for the synthetic benchmark: classification
    /// warm-up, then joint training at a larger step with smaller batches.
    pub fn synthetic() -> Self {
        Self {
            train: TrainConfig::synthetic(),
            ..Self::default()
        }
    }
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>>
where
    T::Err: Display,
{
    value
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| s.trim().parse::<T>().map_err(|e| bad_value(key, value, e)))
        .collect()
}

fn join_list<T: Display>(items: &[T]) -> String {
    items.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn bad_value(key: &str, value: &str, why: impl Display) -> Error {
    Error::Config(format!("{key}: invalid value `{value}` ({why})"))
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: Display,
{
    value.parse::<T>().map_err(|e| bad_value(key, value, e))
}

pub fn schedule_name(s: Schedule) -> &'static str {
    match s {
        Schedule::Joint => "joint",
        Schedule::Alternating => "alternating",
    }
}

pub fn scope_name(s: LocLossScope) -> &'static str {
    match s {
        LocLossScope::AllCells => "all_cells",
        LocLossScope::Survivors => "survivors",
    }
}

fn empty_ball_name(e: EmptyBall) -> &'static str {
    match e {
        EmptyBall::Zero => "zero",
        EmptyBall::Skip => "skip",
    }
}

impl Config {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Config::default();
        let mut seen = std::collections::BTreeSet::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            cfg.set(key, value)?;
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!("{key}: given more than once")));
            }
        }
        cfg.sync_anchor_slots();
        cfg.validate()?;
        Ok(cfg)
    }

    /// Read a config file; relative paths become relative to its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::parse(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        let resolve = |p: &Path| if p.is_absolute() { p.to_path_buf() } else { base.join(p) };
        cfg.manifest = cfg.manifest.as_deref().map(resolve);
        cfg.checkpoint = resolve(&cfg.checkpoint);
        cfg.train_log = resolve(&cfg.train_log);
        Ok(cfg)
    }

    /// Set one key from its text form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let m = &mut self.model;
        let t = &mut self.train;
        let e = &mut self.eval;
        match key {
            "input_size" => m.backbone.input_size = parse(key, value)?,
            "trunk" => m.backbone.trunk = parse_list::<ConvStage>(key, value)?,
            "extra" => m.backbone.extra = parse_list::<ConvStage>(key, value)?,
            "anchor_sizes" => m.anchors.sizes = parse_list(key, value)?,
            "anchor_ratios" => m.anchors.ratios = parse_list::<AspectRatio>(key, value)?,
            "num_classes" => self.num_classes = parse(key, value)?,
            "fusion_dim" => m.fusion_dim = parse(key, value)?,
            "code_bits" => m.code_bits = parse(key, value)?,
            "triplet_margin" => t.triplet_margin = parse(key, value)?,
            "loc_margin" => t.loc_margin = parse(key, value)?,
            "lambda_cls" => t.lambda_cls = parse(key, value)?,
            "lambda_rank" => t.lambda_rank = parse(key, value)?,
            "lambda_loc" => t.lambda_loc = parse(key, value)?,
            "n_hat" => t.n_hat = parse(key, value)?,
            "nms_iou" => t.nms_iou = parse(key, value)?,
            "triplets_per_anchor" => t.triplets_per_anchor = parse(key, value)?,
            "batch_size" => t.batch_size = parse(key, value)?,
            "learning_rate" => t.learning_rate = parse(key, value)?,
            "lr_decay" => t.lr_decay = parse(key, value)?,
            "lr_decay_every" => t.lr_decay_every = parse(key, value)?,
            "weight_decay" => t.weight_decay = parse(key, value)?,
            "beta1" => t.beta1 = parse(key, value)?,
            "beta2" => t.beta2 = parse(key, value)?,
            "adam_epsilon" => t.adam_epsilon = parse(key, value)?,
            "epochs" => t.epochs = parse(key, value)?,
            "warmup_epochs" => t.warmup_epochs = parse(key, value)?,
            "warmup_crops" => t.warmup_crops = parse(key, value)?,
            "seed" => t.seed = parse(key, value)?,
            "schedule" => {
                t.schedule = match value {
                    "joint" => Schedule::Joint,
                    "alternating" => Schedule::Alternating,
                    _ => return Err(bad_value(key, value, "expected joint or alternating")),
                }
            }
            "loc_loss_scope" => {
                t.loc_scope = match value {
                    "all_cells" => LocLossScope::AllCells,
                    "survivors" => LocLossScope::Survivors,
                    _ => return Err(bad_value(key, value, "expected all_cells or survivors")),
                }
            }
            "radius" => e.radius = parse(key, value)?,
            "empty_ball" => {
                e.empty_ball = match value {
                    "zero" => EmptyBall::Zero,
                    "skip" => EmptyBall::Skip,
                    _ => return Err(bad_value(key, value, "expected zero or skip")),
                }
            }
            "map_cutoff" => {
                e.map_cutoff = match value {
                    "none" | "" => None,
                    v => Some(parse(key, v)?),
                }
            }
            "recall_levels" => e.recall_levels = parse(key, value)?,
            "topn" => e.topn = parse_list(key, value)?,
            "manifest" => self.manifest = (!value.is_empty()).then(|| PathBuf::from(value)),
            "checkpoint" => self.checkpoint = PathBuf::from(value),
            "train_log" => self.train_log = PathBuf::from(value),
            _ => return Err(Error::UnknownKey(key.to_string())),
        }
        Ok(())
    }

    fn sync_anchor_slots(&mut self) {
        self.model.backbone.anchors_per_cell = self.model.anchors.per_cell();
        if self.num_classes > 0 {
            self.model.num_classes = self.num_classes;
        }
    }

    /// Fix the class count once the training manifest is known.
    pub fn resolve_classes(&mut self, manifest_classes: usize) -> Result<()> {
        if self.num_classes == 0 {
            self.model.num_classes = manifest_classes;
        } else if manifest_classes > self.num_classes {
            return Err(Error::Label {
                label: manifest_classes,
                classes: self.num_classes,
            });
        }
        self.model.validate()
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        let mut model = self.model.clone();
        if self.num_classes == 0 {
            model.num_classes = model.num_classes.max(2);
        }
        model.validate()?;
        if self.eval.recall_levels < 2 {
            return Err(Error::Config("recall_levels must be at least 2".into()));
        }
        Ok(())
    }

    /// Every key in a fixed order; parsing the result gives back `self`.
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let t = &self.train;
        let e = &self.eval;
        let mut pairs: Vec<(&str, String)> = vec![
            ("input_size", m.backbone.input_size.to_string()),
            ("trunk", join_list(&m.backbone.trunk)),
            ("extra", join_list(&m.backbone.extra)),
            ("anchor_sizes", join_list(&m.anchors.sizes)),
            ("anchor_ratios", join_list(&m.anchors.ratios)),
            ("num_classes", self.num_classes.to_string()),
            ("fusion_dim", m.fusion_dim.to_string()),
            ("code_bits", m.code_bits.to_string()),
            ("triplet_margin", t.triplet_margin.to_string()),
            ("loc_margin", t.loc_margin.to_string()),
            ("lambda_cls", t.lambda_cls.to_string()),
            ("lambda_rank", t.lambda_rank.to_string()),
            ("lambda_loc", t.lambda_loc.to_string()),
            ("n_hat", t.n_hat.to_string()),
            ("nms_iou", t.nms_iou.to_string()),
            ("triplets_per_anchor", t.triplets_per_anchor.to_string()),
            ("batch_size", t.batch_size.to_string()),
            ("learning_rate", t.learning_rate.to_string()),
            ("lr_decay", t.lr_decay.to_string()),
            ("lr_decay_every", t.lr_decay_every.to_string()),
            ("weight_decay", t.weight_decay.to_string()),
            ("beta1", t.beta1.to_string()),
            ("beta2", t.beta2.to_string()),
            ("adam_epsilon", t.adam_epsilon.to_string()),
            ("epochs", t.epochs.to_string()),
            ("warmup_epochs", t.warmup_epochs.to_string()),
            ("warmup_crops", t.warmup_crops.to_string()),
            ("seed", t.seed.to_string()),
            ("schedule", schedule_name(t.schedule).to_string()),
            ("loc_loss_scope", scope_name(t.loc_scope).to_string()),
            ("radius", e.radius.to_string()),
            ("empty_ball", empty_ball_name(e.empty_ball).to_string()),
            (
                "map_cutoff",
                e.map_cutoff.map_or_else(|| "none".to_string(), |k| k.to_string()),
            ),
            ("recall_levels", e.recall_levels.to_string()),
            ("topn", join_list(&e.topn)),
        ];
        if let Some(p) = &self.manifest {
            pairs.push(("manifest", p.display().to_string()));
        }
        pairs.push(("checkpoint", self.checkpoint.display().to_string()));
        pairs.push(("train_log", self.train_log.display().to_string()));
        pairs.into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}
