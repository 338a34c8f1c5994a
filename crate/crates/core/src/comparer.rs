//! Shared classification head that compares a set of feature vectors.
//!
//! Every input row is scored against the `C` labels by one affine map.
//! Column-wise maxima pool the rows into one logit vector, so the loss only
//! rewards the single most convincing input per class. The same matrix,
//! read down the ground-truth column, names the most informative input.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{join, Linear, Param, Parameters};

/// `N × C` class scores; row `i` belongs to input `i`.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbabilityMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl ProbabilityMatrix {
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Self {
        let n = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        assert!(rows.iter().all(|r| r.len() == c), "ragged matrix");
        Self {
            rows: n,
            cols: c,
            data: rows.into_iter().flatten().collect(),
        }
    }

    #[inline]
    pub fn get(&self, i: usize, c: usize) -> f64 {
        self.data[i * self.cols + c]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }
}

/// Pooled logits `p` and their softmax `m`.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassDistribution {
    pub pooled: Vec<f64>,
    pub probs: Vec<f64>,
}

/// Column-wise maxima with the winning row per column (lowest row on ties).
pub fn column_max(p: &ProbabilityMatrix) -> (Vec<f64>, Vec<usize>) {
    assert!(p.rows >= 1, "column_max needs at least one row");
    let mut best = p.row(0).to_vec();
    let mut arg = vec![0; p.cols];
    for i in 1..p.rows {
        for (c, v) in p.row(i).iter().enumerate() {
            if *v > best[c] {
                best[c] = *v;
                arg[c] = i;
            }
        }
    }
    (best, arg)
}

/// Max-shifted softmax.
pub fn softmax_distribution(p: &[f64]) -> Vec<f64> {
    let max = p.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = p.iter().map(|v| (v - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

fn check_label(label: usize, classes: usize) -> Result<()> {
    if label == 0 || label > classes {
        return Err(Error::Label { label, classes });
    }
    Ok(())
}

/// `-log(m(y) / Σ m(c))` for a 1-based label.
pub fn classification_loss(m: &[f64], label: usize) -> Result<f64> {
    check_label(label, m.len())?;
    let total: f64 = m.iter().sum();
    Ok(-(m[label - 1] / total).ln())
}

/// Loss and `dL/dP` through the max-pool and softmax. The gradient lands
/// only on each column's winning row.
pub fn classification_loss_and_grad(
    p: &ProbabilityMatrix,
    label: usize,
) -> Result<(f64, ProbabilityMatrix)> {
    check_label(label, p.cols)?;
    let (pooled, arg) = column_max(p);
    let m = softmax_distribution(&pooled);
    let loss = classification_loss(&m, label)?;
    let mut grad = ProbabilityMatrix {
        rows: p.rows,
        cols: p.cols,
        data: vec![0.0; p.data.len()],
    };
    for c in 0..p.cols {
        let target = if c + 1 == label { 1.0 } else { 0.0 };
        grad.data[arg[c] * p.cols + c] = m[c] - target;
    }
    Ok((loss, grad))
}

/// Row with the largest value in column `label` (1-based in, 0-based out).
pub fn select_best_proposal(p: &ProbabilityMatrix, label: usize) -> Result<usize> {
    check_label(label, p.cols)?;
    if p.rows == 0 {
        return Err(Error::Index("empty probability matrix".into()));
    }
    let col = label - 1;
    let mut best = 0;
    for i in 1..p.rows {
        if p.get(i, col) > p.get(best, col) {
            best = i;
        }
    }
    Ok(best)
}

/// Single fully-connected layer from feature vectors to class scores.
#[derive(Clone, Debug, PartialEq)]
pub struct Comparer {
    pub fc: Linear,
}

impl Comparer {
    pub fn new<R: Rng>(feature_dim: usize, classes: usize, rng: &mut R) -> Self {
        Self {
            fc: Linear::init(feature_dim, classes, 1.0, rng),
        }
    }

    pub fn zeros(feature_dim: usize, classes: usize) -> Self {
        Self {
            fc: Linear::zeros(feature_dim, classes),
        }
    }

    pub fn classes(&self) -> usize {
        self.fc.outputs()
    }

    pub fn class_logits(&self, features: &[&[f64]]) -> Result<ProbabilityMatrix> {
        let dim = self.fc.inputs();
        let mut rows = Vec::with_capacity(features.len());
        for f in features {
            if f.len() != dim {
                return Err(Error::Dimension {
                    expected: dim,
                    actual: f.len(),
                });
            }
            rows.push(self.fc.forward(f));
        }
        Ok(ProbabilityMatrix {
            rows: rows.len(),
            cols: self.classes(),
            data: rows.into_iter().flatten().collect(),
        })
    }

    pub fn distribution(&self, features: &[&[f64]]) -> Result<ClassDistribution> {
        let p = self.class_logits(features)?;
        let (pooled, _) = column_max(&p);
        let probs = softmax_distribution(&pooled);
        Ok(ClassDistribution { pooled, probs })
    }

    /// Accumulates parameter gradients; returns `dL/d features[i]`.
    pub fn backward(&mut self, features: &[&[f64]], grad: &ProbabilityMatrix) -> Vec<Vec<f64>> {
        features
            .iter()
            .enumerate()
            .map(|(i, f)| {
                let row = grad.row(i);
                if row.iter().all(|g| *g == 0.0) {
                    vec![0.0; f.len()]
                } else {
                    self.fc.backward(f, row)
                }
            })
            .collect()
    }
}

impl Parameters for Comparer {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.fc.visit(&join(prefix, "fc"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.fc.visit_mut(&join(prefix, "fc"), f);
    }
}
