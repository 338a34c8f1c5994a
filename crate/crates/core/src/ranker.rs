//! Gated fusion of the whole-image and region features into one relaxed
//! hash code, and the triplet loss that orders codes by label.

use rand::seq::index::sample;
use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{axpy, join, sigmoid, Linear, Param, Parameters};

/// Number of fused inputs: the whole image plus three regions.
pub const SLOTS: usize = 4;

/// Binary code in `{-1, +1}^b`.
pub type BinaryCode = Vec<i8>;

#[derive(Clone, Debug, PartialEq)]
pub struct Ranker {
    /// Per-slot `feature_dim → fusion_dim` maps.
    pub projections: Vec<Linear>,
    /// Per-slot candidate transforms `fusion_dim → fusion_dim`.
    pub candidates: Vec<Linear>,
    /// Per-slot gates over the concatenation, `4·fusion_dim → fusion_dim`.
    pub gates: Vec<Linear>,
    /// `fusion_dim → bits`
    pub hash: Linear,
}

/// Intermediate values of one forward pass.
#[derive(Clone, Debug)]
pub struct RankerTrace {
    pub inputs: Vec<Vec<f64>>,
    pub projected: Vec<Vec<f64>>,
    pub concat: Vec<f64>,
    pub candidates: Vec<Vec<f64>>,
    pub gates: Vec<Vec<f64>>,
    pub fused: Vec<f64>,
    /// Relaxed code in `(-1, 1)^b`.
    pub code: Vec<f64>,
}

impl Ranker {
    pub fn new<R: Rng>(feature_dim: usize, fusion_dim: usize, bits: usize, rng: &mut R) -> Self {
        Self {
            projections: (0..SLOTS)
                .map(|_| Linear::init(feature_dim, fusion_dim, 1.0, rng))
                .collect(),
            candidates: (0..SLOTS)
                .map(|_| Linear::init(fusion_dim, fusion_dim, 1.0, rng))
                .collect(),
            gates: (0..SLOTS)
                .map(|_| Linear::init(SLOTS * fusion_dim, fusion_dim, 1.0, rng))
                .collect(),
            hash: Linear::init(fusion_dim, bits, 1.0, rng),
        }
    }

    pub fn zeros(feature_dim: usize, fusion_dim: usize, bits: usize) -> Self {
        Self {
            projections: (0..SLOTS).map(|_| Linear::zeros(feature_dim, fusion_dim)).collect(),
            candidates: (0..SLOTS).map(|_| Linear::zeros(fusion_dim, fusion_dim)).collect(),
            gates: (0..SLOTS)
                .map(|_| Linear::zeros(SLOTS * fusion_dim, fusion_dim))
                .collect(),
            hash: Linear::zeros(fusion_dim, bits),
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.projections[0].inputs()
    }

    pub fn fusion_dim(&self) -> usize {
        self.projections[0].outputs()
    }

    pub fn bits(&self) -> usize {
        self.hash.outputs()
    }

    /// `f̂ = W f + b` for input slot `slot`.
    pub fn project(&self, slot: usize, f: &[f64]) -> Result<Vec<f64>> {
        check_len(self.feature_dim(), f.len())?;
        Ok(self.projections[slot].forward(f))
    }

    /// Returns `(h, concat, h_i, z_i)`.
    #[allow(clippy::type_complexity)]
    fn fuse_parts(&self, projected: &[Vec<f64>]) -> Result<(Vec<f64>, Vec<f64>, Vec<Vec<f64>>, Vec<Vec<f64>>)> {
        if projected.len() != SLOTS {
            return Err(Error::Dimension {
                expected: SLOTS,
                actual: projected.len(),
            });
        }
        let d = self.fusion_dim();
        for p in projected {
            check_len(d, p.len())?;
        }
        let concat: Vec<f64> = projected.iter().flatten().copied().collect();
        let mut fused = vec![0.0; d];
        let mut hs = Vec::with_capacity(SLOTS);
        let mut zs = Vec::with_capacity(SLOTS);
        for i in 0..SLOTS {
            let h: Vec<f64> = self.candidates[i]
                .forward(&projected[i])
                .into_iter()
                .map(f64::tanh)
                .collect();
            let z: Vec<f64> = self.gates[i]
                .forward(&concat)
                .into_iter()
                .map(sigmoid)
                .collect();
            for k in 0..d {
                fused[k] += h[k] * z[k];
            }
            hs.push(h);
            zs.push(z);
        }
        Ok((fused, concat, hs, zs))
    }

    /// `h = Σ tanh(W_i f̂_i + b_i) ⊙ σ(W_{z_i}·concat + b_{z_i})`.
    pub fn gated_fuse(&self, projected: &[Vec<f64>]) -> Result<Vec<f64>> {
        Ok(self.fuse_parts(projected)?.0)
    }

    /// Gate activations `z_i` for inspection.
    pub fn gate_values(&self, projected: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        Ok(self.fuse_parts(projected)?.3)
    }

    /// Relaxed code `tanh(W h + β)`.
    pub fn hash_head(&self, fused: &[f64]) -> Result<Vec<f64>> {
        check_len(self.fusion_dim(), fused.len())?;
        Ok(self.hash.forward(fused).into_iter().map(f64::tanh).collect())
    }

    /// Full forward from the four pooled feature vectors.
    pub fn forward(&self, features: &[&[f64]]) -> Result<RankerTrace> {
        if features.len() != SLOTS {
            return Err(Error::Dimension {
                expected: SLOTS,
                actual: features.len(),
            });
        }
        let projected = features
            .iter()
            .enumerate()
            .map(|(i, f)| self.project(i, f))
            .collect::<Result<Vec<_>>>()?;
        let (fused, concat, candidates, gates) = self.fuse_parts(&projected)?;
        let code = self.hash_head(&fused)?;
        Ok(RankerTrace {
            inputs: features.iter().map(|f| f.to_vec()).collect(),
            projected,
            concat,
            candidates,
            gates,
            fused,
            code,
        })
    }

    /// Accumulates parameter gradients from `dL/du`; returns `dL/df_i`.
    pub fn backward(&mut self, trace: &RankerTrace, d_code: &[f64]) -> Vec<Vec<f64>> {
        let d = self.fusion_dim();
        let d_pre: Vec<f64> = d_code
            .iter()
            .zip(&trace.code)
            .map(|(g, u)| g * (1.0 - u * u))
            .collect();
        let d_fused = self.hash.backward(&trace.fused, &d_pre);
        let mut d_proj: Vec<Vec<f64>> = vec![vec![0.0; d]; SLOTS];
        let mut d_concat = vec![0.0; SLOTS * d];
        for i in 0..SLOTS {
            let h = &trace.candidates[i];
            let z = &trace.gates[i];
            let d_cand_pre: Vec<f64> = (0..d)
                .map(|k| d_fused[k] * z[k] * (1.0 - h[k] * h[k]))
                .collect();
            let d_gate_pre: Vec<f64> = (0..d)
                .map(|k| d_fused[k] * h[k] * z[k] * (1.0 - z[k]))
                .collect();
            let dp = self.candidates[i].backward(&trace.projected[i], &d_cand_pre);
            axpy(1.0, &dp, &mut d_proj[i]);
            let dc = self.gates[i].backward(&trace.concat, &d_gate_pre);
            axpy(1.0, &dc, &mut d_concat);
        }
        (0..SLOTS)
            .map(|i| {
                axpy(1.0, &d_concat[i * d..(i + 1) * d], &mut d_proj[i]);
                self.projections[i].backward(&trace.inputs[i], &d_proj[i])
            })
            .collect()
    }
}

impl Parameters for Ranker {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        for (i, l) in self.projections.iter().enumerate() {
            l.visit(&join(prefix, &format!("projection.{i}")), f);
        }
        for (i, l) in self.candidates.iter().enumerate() {
            l.visit(&join(prefix, &format!("candidate.{i}")), f);
        }
        for (i, l) in self.gates.iter().enumerate() {
            l.visit(&join(prefix, &format!("gate.{i}")), f);
        }
        self.hash.visit(&join(prefix, "hash"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        for (i, l) in self.projections.iter_mut().enumerate() {
            l.visit_mut(&join(prefix, &format!("projection.{i}")), f);
        }
        for (i, l) in self.candidates.iter_mut().enumerate() {
            l.visit_mut(&join(prefix, &format!("candidate.{i}")), f);
        }
        for (i, l) in self.gates.iter_mut().enumerate() {
            l.visit_mut(&join(prefix, &format!("gate.{i}")), f);
        }
        self.hash.visit_mut(&join(prefix, "hash"), f);
    }
}

fn check_len(expected: usize, actual: usize) -> Result<()> {
    if expected != actual {
        return Err(Error::Dimension { expected, actual });
    }
    Ok(())
}

/// Element-wise sign with `sign(0) = +1`.
pub fn binarize(u: &[f64]) -> BinaryCode {
    u.iter().map(|&v| if v >= 0.0 { 1 } else { -1 }).collect()
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// `max(0, ε + ‖u_i − u_j‖ − ‖u_i − u_k‖)`
pub fn triplet_loss(ui: &[f64], uj: &[f64], uk: &[f64], margin: f64) -> f64 {
    (margin + euclidean(ui, uj) - euclidean(ui, uk)).max(0.0)
}

/// Loss and gradients with respect to `(u_i, u_j, u_k)`. Coincident codes
/// contribute a zero sub-gradient for that distance term.
pub fn triplet_loss_grad(
    ui: &[f64],
    uj: &[f64],
    uk: &[f64],
    margin: f64,
) -> (f64, Vec<f64>, Vec<f64>, Vec<f64>) {
    let n = ui.len();
    let dij = euclidean(ui, uj);
    let dik = euclidean(ui, uk);
    let loss = margin + dij - dik;
    let (mut gi, mut gj, mut gk) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    if loss <= 0.0 {
        return (0.0, gi, gj, gk);
    }
    for t in 0..n {
        if dij > 0.0 {
            let a = (ui[t] - uj[t]) / dij;
            gi[t] += a;
            gj[t] -= a;
        }
        if dik > 0.0 {
            let b = (ui[t] - uk[t]) / dik;
            gi[t] -= b;
            gk[t] += b;
        }
    }
    (loss, gi, gj, gk)
}

/// Index triples `(i, j, k)` with `label[i] == label[j] != label[k]`.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct TripletBatch {
    pub triples: Vec<(usize, usize, usize)>,
}

impl TripletBatch {
    pub fn len(&self) -> usize {
        self.triples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triples.is_empty()
    }
}

/// All valid in-batch triples, at most `cap_per_anchor` per anchor drawn
/// uniformly without replacement.
pub fn mine_triplets<R: Rng>(labels: &[usize], cap_per_anchor: usize, rng: &mut R) -> TripletBatch {
    let mut triples = Vec::new();
    for (i, &li) in labels.iter().enumerate() {
        let positives: Vec<usize> = (0..labels.len())
            .filter(|&j| j != i && labels[j] == li)
            .collect();
        let negatives: Vec<usize> = (0..labels.len()).filter(|&k| labels[k] != li).collect();
        let total = positives.len() * negatives.len();
        if total == 0 {
            continue;
        }
        let pick = |t: usize| (i, positives[t / negatives.len()], negatives[t % negatives.len()]);
        if total <= cap_per_anchor {
            triples.extend((0..total).map(pick));
        } else {
            let mut chosen = sample(rng, total, cap_per_anchor).into_vec();
            chosen.sort_unstable();
            triples.extend(chosen.into_iter().map(pick));
        }
    }
    TripletBatch { triples }
}
