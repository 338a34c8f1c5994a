//! Collaborative training: the comparer manufactures localization targets,
//! the score heads learn them through a margin loss, and the highest-scoring
//! anchors feed zoomed regions back into the hash-coding pass.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{gap, gap_backward, FullTrace, ScoreTensor, StackTrace};
use crate::comparer::{classification_loss_and_grad, select_best_proposal, ProbabilityMatrix};
use crate::error::{Error, Result};
use crate::geometry::{nms, Proposal, ProposalSet};
use crate::model::Model;
use crate::nn::{Adam, Parameters};
use crate::ranker::{mine_triplets, triplet_loss_grad, RankerTrace};
use crate::tensor::Tensor3;

/// Inverse of the flat-index formula: the unique 1-based `(h, w, r)` with
/// `(r - 1)·H·W + (w - 1)·H + h = c`.
pub fn index_to_hwr(c: usize, height: usize, width: usize, anchors: usize) -> Result<(usize, usize, usize)> {
    let cells = height * width;
    if c < 1 || c > cells * anchors {
        return Err(Error::Index(format!(
            "flat index {c} outside 1..={}",
            cells * anchors
        )));
    }
    let c0 = c - 1;
    let r = c0 / cells + 1;
    let rem = c0 % cells;
    Ok((rem % height + 1, rem / height + 1, r))
}

/// Score-head target for one tap.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LocalizationTarget {
    pub layer_id: usize,
    pub target: (usize, usize, usize),
    pub flat_index: usize,
    /// Flat indices of every proposal the comparer saw.
    pub survivors: Vec<usize>,
}

/// Σ over cells `≠ target` of `max(0, ε + A(cell) − A(target))`.
pub fn localization_loss(scores: &ScoreTensor, target: (usize, usize, usize), margin: f64) -> f64 {
    localization_loss_grad(scores, target, margin, None).0
}

/// Loss and `dL/dA`. With `cells` the sum only runs over those flat
/// indices instead of the whole tensor.
pub fn localization_loss_grad(
    scores: &ScoreTensor,
    target: (usize, usize, usize),
    margin: f64,
    cells: Option<&[usize]>,
) -> (f64, Tensor3) {
    let (hh, ww, _) = scores.dims();
    let (h, w, r) = target;
    let t_flat = crate::geometry::flat_index(h, w, r, hh, ww);
    let t_off = scores.offset_of_flat(t_flat);
    let a_t = scores.values.data[t_off];
    let v = &scores.values;
    let mut grad = Tensor3::zeros(v.channels, v.height, v.width);
    let mut loss = 0.0;
    let mut active = 0.0;
    let mut visit = |off: usize| {
        if off == t_off {
            return;
        }
        let hinge = margin + scores.values.data[off] - a_t;
        if hinge > 0.0 {
            loss += hinge;
            grad.data[off] += 1.0;
            active += 1.0;
        }
    };
    match cells {
        None => (0..v.data.len()).for_each(&mut visit),
        Some(list) => list
            .iter()
            .map(|&c| scores.offset_of_flat(c))
            .for_each(&mut visit),
    }
    grad.data[t_off] -= active;
    (loss, grad)
}

/// Highest-scoring anchor of each tap (lowest flat index on ties), with
/// its score filled in.
pub fn select_regions(scores: &[ScoreTensor; 3], proposals: &[ProposalSet; 3]) -> [Proposal; 3] {
    std::array::from_fn(|l| {
        let flat = scores[l].flat_values();
        let mut best = 0;
        for (i, v) in flat.iter().enumerate() {
            if *v > flat[best] {
                best = i;
            }
        }
        let mut p = proposals[l].proposals[best].clone();
        p.score = flat[best];
        p
    })
}

/// Attach the tap's scores to its anchors.
pub fn scored_proposals(scores: &ScoreTensor, proposals: &ProposalSet) -> ProposalSet {
    let flat = scores.flat_values();
    proposals
        .iter()
        .map(|p| Proposal {
            score: flat[p.flat_index - 1],
            ..p.clone()
        })
        .collect()
}

/// Target for one tap: suppress, keep the top `n_hat`, let `compare` score
/// the survivors and take the best row in column `label`.
pub fn target_for_layer<F>(
    scored: &ProposalSet,
    dims: (usize, usize, usize),
    label: usize,
    n_hat: usize,
    nms_iou: f64,
    compare: F,
) -> Result<LocalizationTarget>
where
    F: FnOnce(&ProposalSet) -> Result<ProbabilityMatrix>,
{
    let survivors = nms(scored, nms_iou, n_hat);
    if survivors.is_empty() {
        return Err(Error::Index("no proposal survived suppression".into()));
    }
    let p = compare(&survivors)?;
    let row = select_best_proposal(&p, label)?;
    let winner = &survivors.proposals[row];
    let (hh, ww, rr) = dims;
    let target = index_to_hwr(winner.flat_index, hh, ww, rr)?;
    Ok(LocalizationTarget {
        layer_id: winner.layer_id,
        target,
        flat_index: winner.flat_index,
        survivors: survivors.iter().map(|p| p.flat_index).collect(),
    })
}

/// One target per tap, chosen by the comparer among zoomed NMS survivors.
/// Runs entirely in inference mode.
pub fn find_targets(
    model: &Model,
    image: &Tensor3,
    label: usize,
    scores: &[ScoreTensor; 3],
    n_hat: usize,
    nms_iou: f64,
) -> Result<[LocalizationTarget; 3]> {
    let mut out = Vec::with_capacity(3);
    for l in 0..3 {
        let scored = scored_proposals(&scores[l], &model.proposals[l]);
        let t = target_for_layer(&scored, scores[l].dims(), label, n_hat, nms_iou, |survivors| {
            let feats = survivors
                .iter()
                .map(|p| {
                    let crop = model.zoom(image, p)?;
                    Ok(gap(&model.backbone.trunk_features(&crop)?))
                })
                .collect::<Result<Vec<_>>>()?;
            let refs: Vec<&[f64]> = feats.iter().map(Vec::as_slice).collect();
            model.comparer.class_logits(&refs)
        })?;
        out.push(t);
    }
    Ok(out.try_into().expect("three targets"))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Schedule {
    /// Every step updates all losses together.
    Joint,
    /// Even steps train localization only, odd steps hash coding only.
    Alternating,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LocLossScope {
    /// Hinge over every other cell of the tensor.
    AllCells,
    /// Hinge over the other NMS survivors only.
    Survivors,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub triplet_margin: f64,
    pub loc_margin: f64,
    pub lambda_cls: f64,
    pub lambda_rank: f64,
    pub lambda_loc: f64,
    pub n_hat: usize,
    pub nms_iou: f64,
    pub triplets_per_anchor: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub lr_decay: f64,
    pub lr_decay_every: usize,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_epsilon: f64,
    pub epochs: usize,
    /// Leading epochs that pretrain the trunk and comparer on classification
    /// alone: the whole image and `warmup_crops` uniformly drawn anchor crops
    /// are each classified against the image label.
    pub warmup_epochs: usize,
    pub warmup_crops: usize,
    pub seed: u64,
    pub schedule: Schedule,
    pub loc_scope: LocLossScope,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            triplet_margin: 1.0,
            loc_margin: 0.5,
            lambda_cls: 1.0,
            lambda_rank: 1.0,
            lambda_loc: 1.0,
            n_hat: 6,
            nms_iou: 0.25,
            triplets_per_anchor: 8,
            batch_size: 50,
            learning_rate: 1e-4,
            lr_decay: 0.1,
            lr_decay_every: 100,
            weight_decay: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            adam_epsilon: 1e-8,
            epochs: 300,
            warmup_epochs: 0,
            warmup_crops: 6,
            seed: 1,
            schedule: Schedule::Joint,
            loc_scope: LocLossScope::AllCells,
        }
    }
}

impl TrainConfig {
    /// Desk-scale schedule for the synthetic benchmark: a classification
    /// warm-up, then joint training with a larger step and smaller batches.
    pub fn synthetic() -> Self {
        Self {
            batch_size: 16,
            learning_rate: 1e-3,
            lr_decay: 0.3,
            lr_decay_every: 60,
            epochs: 160,
            warmup_epochs: 60,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.triplet_margin > 0.0) || !(self.loc_margin > 0.0) {
            return bad("margins must be positive");
        }
        if [self.lambda_cls, self.lambda_rank, self.lambda_loc]
            .iter()
            .any(|w| !(*w >= 0.0))
        {
            return bad("loss weights must be non-negative");
        }
        if self.n_hat == 0 {
            return bad("n_hat must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.nms_iou) {
            return bad("nms_iou must lie in [0, 1]");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.learning_rate > 0.0) {
            return bad("learning_rate must be positive");
        }
        if self.lr_decay_every == 0 {
            return bad("lr_decay_every must be positive");
        }
        Ok(())
    }

    /// Step decay by `lr_decay` every `lr_decay_every` epochs (0-based).
    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        self.learning_rate * self.lr_decay.powi((epoch / self.lr_decay_every) as i32)
    }
}

/// A normalized image with its 1-based label.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Tensor3,
    pub label: usize,
}

/// Batch-mean losses of one step. `loc` is 0 when the localization term is
/// switched off for the step, since targets are not searched then.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossReport {
    pub cls: f64,
    pub rank: f64,
    pub loc: f64,
    pub total: f64,
    pub triplets: usize,
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    #[serde(rename = "L_cls")]
    pub l_cls: f64,
    #[serde(rename = "L_rank")]
    pub l_rank: f64,
    #[serde(rename = "L_loc")]
    pub l_loc: f64,
    pub total: f64,
    pub lr: f64,
}

struct ImageRecord {
    full: FullTrace,
    crops: Vec<StackTrace>,
    feats: Vec<Vec<f64>>,
    d_logits: Option<ProbabilityMatrix>,
    ranker: Option<RankerTrace>,
    d_scores: Option<[Tensor3; 3]>,
}

/// Owns the model, the optimizer state and the sampling stream.
pub struct Trainer {
    pub model: Model,
    pub config: TrainConfig,
    optimizer: Adam,
    rng: ChaCha8Rng,
    epoch: usize,
    steps: u64,
}

impl Trainer {
    pub fn new(model: Model, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let optimizer = Adam::new(
            config.learning_rate,
            config.beta1,
            config.beta2,
            config.adam_epsilon,
            config.weight_decay,
        );
        let rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_7a11);
        Ok(Self {
            model,
            config,
            optimizer,
            rng,
            epoch: 0,
            steps: 0,
        })
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn into_model(self) -> Model {
        self.model
    }

    fn step_weights(&self) -> (f64, f64, f64) {
        let c = &self.config;
        match c.schedule {
            Schedule::Joint => (c.lambda_cls, c.lambda_rank, c.lambda_loc),
            Schedule::Alternating if self.steps % 2 == 0 => (0.0, 0.0, c.lambda_loc),
            Schedule::Alternating => (c.lambda_cls, c.lambda_rank, 0.0),
        }
    }

    /// Forward every image, backpropagate the weighted losses and apply one
    /// optimizer update.
    pub fn train_step(&mut self, batch: &[&Sample]) -> Result<LossReport> {
        if batch.is_empty() {
            return Ok(LossReport::default());
        }
        let (w_cls, w_rank, w_loc) = self.step_weights();
        let cfg = self.config.clone();
        let n = batch.len() as f64;
        let model = &self.model;
        let mut report = LossReport::default();
        let mut records = Vec::with_capacity(batch.len());

        for sample in batch {
            let image = &sample.image;
            let full = model.backbone.forward_full_traced(image)?;
            let regions = select_regions(&full.scores, &model.proposals);
            let mut feats = vec![gap(full.trunk.output())];
            let mut crops = Vec::with_capacity(3);
            for region in &regions {
                let crop = model.zoom(image, region)?;
                let trace = model.backbone.forward_trunk_traced(&crop)?;
                feats.push(gap(trace.output()));
                crops.push(trace);
            }
            let refs: Vec<&[f64]> = feats.iter().map(Vec::as_slice).collect();

            let logits = model.comparer.class_logits(&refs)?;
            let (l_cls, d_logits) = classification_loss_and_grad(&logits, sample.label)?;
            report.cls += l_cls / n;

            let ranker = model.ranker.forward(&refs)?;

            let d_scores = if w_loc > 0.0 {
                let targets = find_targets(model, image, sample.label, &full.scores, cfg.n_hat, cfg.nms_iou)?;
                let mut grads = Vec::with_capacity(3);
                for (l, t) in targets.iter().enumerate() {
                    let cells = match cfg.loc_scope {
                        LocLossScope::AllCells => None,
                        LocLossScope::Survivors => Some(t.survivors.as_slice()),
                    };
                    let (loss, mut g) = localization_loss_grad(&full.scores[l], t.target, cfg.loc_margin, cells);
                    report.loc += loss / n;
                    g.data.iter_mut().for_each(|v| *v *= w_loc / n);
                    grads.push(g);
                }
                Some(grads.try_into().expect("three score grads"))
            } else {
                None
            };

            records.push(ImageRecord {
                full,
                crops,
                feats,
                d_logits: (w_cls > 0.0).then_some(d_logits),
                ranker: Some(ranker),
                d_scores,
            });
        }

        // Triplet term couples the batch through the relaxed codes.
        let labels: Vec<usize> = batch.iter().map(|s| s.label).collect();
        let triplets = mine_triplets(&labels, cfg.triplets_per_anchor, &mut self.rng);
        let bits = self.model.ranker.bits();
        let mut d_codes = vec![vec![0.0; bits]; batch.len()];
        if !triplets.is_empty() {
            let t = triplets.len() as f64;
            for &(i, j, k) in &triplets.triples {
                let code = |x: usize| &records[x].ranker.as_ref().expect("trace").code;
                let (loss, gi, gj, gk) = triplet_loss_grad(code(i), code(j), code(k), cfg.triplet_margin);
                report.rank += loss / t;
                if loss > 0.0 && w_rank > 0.0 {
                    let s = w_rank / t;
                    for (dst, src) in [(i, gi), (j, gj), (k, gk)] {
                        d_codes[dst].iter_mut().zip(src).for_each(|(d, g)| *d += s * g);
                    }
                }
            }
        }
        report.triplets = triplets.len();
        report.total = w_cls * report.cls + w_rank * report.rank + w_loc * report.loc;
        if !(report.total.is_finite() && report.cls.is_finite() && report.rank.is_finite() && report.loc.is_finite()) {
            return Err(Error::NonFinite(format!(
                "loss at epoch {} step {}: cls {} rank {} loc {}",
                self.epoch, self.steps, report.cls, report.rank, report.loc
            )));
        }

        self.model.zero_grad();
        for (rec, d_code) in records.iter_mut().zip(&d_codes) {
            let mut d_feats: Vec<Vec<f64>> = rec.feats.iter().map(|f| vec![0.0; f.len()]).collect();
            if let Some(dp) = rec.d_logits.as_mut() {
                dp.data.iter_mut().for_each(|g| *g *= w_cls / n);
                let refs: Vec<&[f64]> = rec.feats.iter().map(Vec::as_slice).collect();
                let df = self.model.comparer.backward(&refs, dp);
                for (acc, g) in d_feats.iter_mut().zip(df) {
                    acc.iter_mut().zip(g).for_each(|(a, b)| *a += b);
                }
            }
            if d_code.iter().any(|g| *g != 0.0) {
                let trace = rec.ranker.take().expect("trace");
                let df = self.model.ranker.backward(&trace, d_code);
                for (acc, g) in d_feats.iter_mut().zip(df) {
                    acc.iter_mut().zip(g).for_each(|(a, b)| *a += b);
                }
            }
            for (l, crop) in rec.crops.iter().enumerate() {
                let df = &d_feats[l + 1];
                if df.iter().all(|g| *g == 0.0) {
                    continue;
                }
                let d_tap = gap_backward(df, crop.output().shape());
                self.model.backbone.backward_trunk(crop, d_tap, false);
            }
            let d_tap1 = d_feats[0]
                .iter()
                .any(|g| *g != 0.0)
                .then(|| gap_backward(&d_feats[0], rec.full.trunk.output().shape()));
            if d_tap1.is_some() || rec.d_scores.is_some() {
                self.model
                    .backbone
                    .backward_full(&rec.full, d_tap1, rec.d_scores.as_ref(), false);
            }
        }

        let mut bad = None;
        self.model.visit("", &mut |name, p| {
            if bad.is_none() && p.grad.iter().any(|g| !g.is_finite()) {
                bad = Some(name.to_string());
            }
        });
        if let Some(name) = bad {
            return Err(Error::NonFinite(format!("gradient of {name}")));
        }

        self.optimizer.learning_rate = cfg.learning_rate_at(self.epoch);
        self.optimizer.step(&mut self.model);
        self.steps += 1;
        Ok(report)
    }

    /// Classification-only pretraining step: the whole view and
    /// `warmup_crops` zoomed anchors drawn uniformly (layer first, then
    /// anchor) are each classified against the image label. Only the trunk
    /// and comparer are updated.
    pub fn warmup_step(&mut self, batch: &[&Sample]) -> Result<LossReport> {
        if batch.is_empty() {
            return Ok(LossReport::default());
        }
        let n = batch.len() as f64;
        let k = self.config.warmup_crops;
        let mut report = LossReport::default();
        self.model.zero_grad();
        for sample in batch {
            let picks: Vec<(usize, usize)> = (0..k)
                .map(|_| {
                    let l = self.rng.gen_range(0..3);
                    (l, self.rng.gen_range(0..self.model.proposals[l].len()))
                })
                .collect();
            let mut traces = vec![self.model.backbone.forward_trunk_traced(&sample.image)?];
            for &(l, i) in &picks {
                let crop = self.model.zoom(&sample.image, &self.model.proposals[l].proposals[i])?;
                traces.push(self.model.backbone.forward_trunk_traced(&crop)?);
            }
            let feats: Vec<Vec<f64>> = traces.iter().map(|t| gap(t.output())).collect();
            let refs: Vec<&[f64]> = feats.iter().map(Vec::as_slice).collect();
            let logits = self.model.comparer.class_logits(&refs)?;
            let rows = logits.rows as f64;
            let mut grad = logits.clone();
            for i in 0..logits.rows {
                let row = ProbabilityMatrix::from_rows(vec![logits.row(i).to_vec()]);
                let (loss, g) = classification_loss_and_grad(&row, sample.label)?;
                report.cls += loss / (n * rows);
                let c = logits.cols;
                grad.data[i * c..(i + 1) * c]
                    .iter_mut()
                    .zip(&g.data)
                    .for_each(|(d, v)| *d = v / (n * rows));
            }
            let d_feats = self.model.comparer.backward(&refs, &grad);
            for (trace, df) in traces.iter().zip(&d_feats) {
                if df.iter().any(|g| *g != 0.0) {
                    let d_tap = gap_backward(df, trace.output().shape());
                    self.model.backbone.backward_trunk(trace, d_tap, false);
                }
            }
        }
        report.total = report.cls;
        if !report.total.is_finite() {
            return Err(Error::NonFinite(format!("warm-up loss at epoch {}", self.epoch)));
        }
        self.optimizer.learning_rate = self.config.learning_rate_at(self.epoch);
        self.optimizer
            .step_filtered(&mut self.model, &|name| !(name.starts_with("backbone.trunk") || name.starts_with("comparer")));
        self.steps += 1;
        Ok(report)
    }

    /// One shuffled pass over `data` in mini-batches.
    pub fn train_epoch(&mut self, data: &[Sample]) -> Result<EpochLog> {
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut self.rng);
        let lr = self.config.learning_rate_at(self.epoch);
        let mut sums = LossReport::default();
        let mut seen = 0.0;
        for chunk in order.chunks(self.config.batch_size) {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &data[i]).collect();
            let r = if self.epoch < self.config.warmup_epochs {
                self.warmup_step(&batch)?
            } else {
                self.train_step(&batch)?
            };
            let w = batch.len() as f64;
            sums.cls += r.cls * w;
            sums.rank += r.rank * w;
            sums.loc += r.loc * w;
            sums.total += r.total * w;
            seen += w;
        }
        let seen = seen.max(1.0);
        let log = EpochLog {
            epoch: self.epoch + 1,
            l_cls: sums.cls / seen,
            l_rank: sums.rank / seen,
            l_loc: sums.loc / seen,
            total: sums.total / seen,
            lr,
        };
        self.epoch += 1;
        Ok(log)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::BackboneConfig;
    use crate::geometry::AnchorSpec;
    use crate::model::ModelConfig;

    #[test]
    fn index_examples() {
        assert_eq!(index_to_hwr(1, 7, 7, 9).unwrap(), (1, 1, 1));
        assert_eq!(index_to_hwr(58, 7, 7, 9).unwrap(), (2, 2, 2));
        assert_eq!(index_to_hwr(441, 7, 7, 9).unwrap(), (7, 7, 9));
        assert!(index_to_hwr(0, 7, 7, 9).is_err());
        assert!(index_to_hwr(442, 7, 7, 9).is_err());
    }

    #[test]
    fn index_round_trip_exhaustive() {
        for &(hh, ww) in &[(7, 7), (4, 4), (2, 2), (3, 5)] {
            for c in 1..=hh * ww * 9 {
                let (h, w, r) = index_to_hwr(c, hh, ww, 9).unwrap();
                assert_eq!(crate::geometry::flat_index(h, w, r, hh, ww), c);
            }
        }
    }

    fn tensor(h: usize, w: usize, r: usize, vals: Vec<f64>) -> ScoreTensor {
        ScoreTensor::new(1, Tensor3::from_vec(r, h, w, vals))
    }

    #[test]
    fn localization_loss_examples() {
        // R × H × W storage of [[1, 2], [3, 4]] on a 2×2×1 grid
        let a = tensor(2, 2, 1, vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(a.get(2, 2, 1), 4.0);
        assert_eq!(localization_loss(&a, (2, 2, 1), 1.0), 0.0);
        assert_eq!(localization_loss(&a, (2, 2, 1), 2.0), 1.0);

        let flat = tensor(3, 3, 2, vec![0.7; 18]);
        assert!((localization_loss(&flat, (2, 3, 1), 0.5) - 17.0 * 0.5).abs() < 1e-12);

        let mut dominant = vec![0.0; 18];
        dominant[4] = 0.5;
        let d = tensor(3, 3, 2, dominant);
        assert_eq!(localization_loss(&d, (2, 2, 1), 0.5), 0.0);
    }

    #[test]
    fn localization_gradient_counts_active_hinges() {
        let a = tensor(2, 2, 1, vec![1.0, 2.0, 3.0, 4.0]);
        let (loss, g) = localization_loss_grad(&a, (1, 1, 1), 1.0, None);
        // hinges 1+2-1, 1+3-1, 1+4-1 all active
        assert_eq!(loss, 2.0 + 3.0 + 4.0);
        assert_eq!(g.data, vec![-3.0, 1.0, 1.0, 1.0]);
        let (loss, g) = localization_loss_grad(&a, (1, 1, 1), 1.0, Some(&[1, 2]));
        // flat 2 is (h=2, w=1) → value 3
        assert_eq!(loss, 3.0);
        assert_eq!(g.data, vec![-1.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn select_regions_examples() {
        let model = Model::zeros(ModelConfig::default()).unwrap();
        let zeros: [ScoreTensor; 3] = std::array::from_fn(|i| {
            let (h, _, _) = [(7, 7, 9), (4, 4, 9), (2, 2, 9)][i];
            ScoreTensor::new(i + 1, Tensor3::zeros(9, h, h))
        });
        let picked = select_regions(&zeros, &model.proposals);
        for (l, p) in picked.iter().enumerate() {
            assert_eq!(p.flat_index, 1);
            assert_eq!(p.layer_id, l + 1);
        }
        let mut one = zeros.clone();
        one[1].values.set(4, 2, 3, 5.0); // r = 5, h = 3, w = 4
        let picked = select_regions(&one, &model.proposals);
        assert_eq!(picked[1].grid_index, (3, 4, 5));
        assert_eq!(picked[1].score, 5.0);
    }

    #[test]
    fn target_follows_the_comparer() {
        let model = Model::zeros(ModelConfig::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let values = Tensor3::from_vec(9, 7, 7, (0..441).map(|_| rng.gen::<f64>()).collect());
        let scores = ScoreTensor::new(1, values);
        let scored = scored_proposals(&scores, &model.proposals[0]);
        let survivors = nms(&scored, 0.25, 6);
        let favourite = survivors.proposals[3].flat_index;
        let t = target_for_layer(&scored, (7, 7, 9), 2, 6, 0.25, |s| {
            Ok(ProbabilityMatrix::from_rows(
                s.iter()
                    .map(|p| vec![0.0, if p.flat_index == favourite { 1.0 } else { 0.0 }])
                    .collect(),
            ))
        })
        .unwrap();
        assert_eq!(t.flat_index, favourite);
        assert_eq!(t.target, index_to_hwr(favourite, 7, 7, 9).unwrap());
        assert_eq!(t.survivors.len(), 6);
    }

    fn toy_model(seed: u64) -> Model {
        let cfg = ModelConfig {
            backbone: BackboneConfig::toy(),
            anchors: AnchorSpec {
                sizes: vec![8.0, 12.0, 24.0],
                ..AnchorSpec::default()
            },
            num_classes: 2,
            fusion_dim: 6,
            code_bits: 8,
        };
        Model::new(cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    fn toy_batch(seed: u64) -> Vec<Sample> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..4)
            .map(|i| Sample {
                image: Tensor3::from_vec(3, 32, 32, (0..3072).map(|_| rng.gen_range(-1.0..1.0)).collect()),
                label: i % 2 + 1,
            })
            .collect()
    }

    #[test]
    fn zero_loc_weight_leaves_heads_untouched() {
        let data = toy_batch(1);
        let cfg = TrainConfig {
            lambda_loc: 0.0,
            ..TrainConfig::default()
        };
        let mut trainer = Trainer::new(toy_model(2), cfg).unwrap();
        let batch: Vec<&Sample> = data.iter().collect();
        let report = trainer.train_step(&batch).unwrap();
        assert_eq!(report.loc, 0.0);
        let mut head_grad = 0.0;
        let mut other_grad = 0.0;
        trainer.model.visit("", &mut |name, p| {
            let s: f64 = p.grad.iter().map(|g| g.abs()).sum();
            if name.contains(".heads.") {
                head_grad += s;
            } else {
                other_grad += s;
            }
        });
        assert_eq!(head_grad, 0.0);
        assert!(other_grad > 0.0);
    }

    #[test]
    fn training_is_bit_reproducible() {
        let data = toy_batch(5);
        let cfg = TrainConfig {
            batch_size: 2,
            learning_rate: 1e-3,
            ..TrainConfig::default()
        };
        let run = || {
            let mut t = Trainer::new(toy_model(9), cfg.clone()).unwrap();
            (0..2).map(|_| t.train_epoch(&data).unwrap()).collect::<Vec<_>>()
        };
        let a = run();
        let b = run();
        assert_eq!(a, b);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.total.to_bits(), y.total.to_bits());
        }
    }

    #[test]
    fn lr_schedule_steps_down() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.learning_rate_at(0), 1e-4);
        assert_eq!(cfg.learning_rate_at(99), 1e-4);
        assert!((cfg.learning_rate_at(100) - 1e-5).abs() < 1e-20);
        assert!((cfg.learning_rate_at(250) - 1e-6).abs() < 1e-20);
    }

    #[test]
    fn alternating_schedule_splits_terms() {
        let data = toy_batch(8);
        let cfg = TrainConfig {
            schedule: Schedule::Alternating,
            ..TrainConfig::default()
        };
        let mut t = Trainer::new(toy_model(4), cfg).unwrap();
        let batch: Vec<&Sample> = data.iter().collect();
        let first = t.train_step(&batch).unwrap();
        assert!((first.total - first.loc).abs() < 1e-12);
        let second = t.train_step(&batch).unwrap();
        assert_eq!(second.loc, 0.0);
        assert!((second.total - second.cls - second.rank).abs() < 1e-12);
    }

    #[test]
    fn warmup_moves_only_trunk_and_comparer() {
        let data = toy_batch(3);
        let cfg = TrainConfig {
            warmup_epochs: 1,
            warmup_crops: 2,
            learning_rate: 1e-2,
            ..TrainConfig::default()
        };
        let before = toy_model(6);
        let mut t = Trainer::new(before.clone(), cfg).unwrap();
        let log = t.train_epoch(&data).unwrap();
        assert!(log.l_cls > 0.0);
        assert_eq!((log.l_rank, log.l_loc), (0.0, 0.0));
        let after = t.into_model();
        assert_eq!(after.ranker, before.ranker);
        assert_ne!(after.comparer, before.comparer);
        let mut moved = Vec::new();
        let mut values = Vec::new();
        before.visit("", &mut |_, p| values.push(p.value.clone()));
        let mut i = 0;
        after.visit("", &mut |name, p| {
            if p.value != values[i] {
                moved.push(name.to_string());
            }
            i += 1;
        });
        assert!(moved.iter().all(|n| n.starts_with("backbone.trunk") || n.starts_with("comparer")));
        assert!(moved.iter().any(|n| n.starts_with("backbone.trunk")));
    }

    #[test]
    fn synthetic_preset_is_valid() {
        let cfg = TrainConfig::synthetic();
        cfg.validate().unwrap();
        assert!(cfg.warmup_epochs < cfg.epochs);
        assert!((cfg.learning_rate_at(cfg.warmup_epochs) - cfg.learning_rate * cfg.lr_decay).abs() < 1e-15);
    }
}
