//! Packed binary codes, the Hamming-space database and retrieval metrics.
//!
//! Codes are packed with `+1 → 1` and `−1 → 0`, bit `j` of the code at bit
//! `j % 64` of word `j / 64`. A database file is
//!
//! ```text
//! magic   8 bytes  "FGHCODES"
//! version u32 LE   1
//! bits    u32 LE   b
//! count   u64 LE   n
//! words   n × ceil(b/64) u64 LE
//! ```
//!
//! with the labels in a sidecar text file (`<file>.labels`, one per line).

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DB_MAGIC: &[u8; 8] = b"FGHCODES";
pub const DB_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct PackedCode {
    bits: usize,
    words: Vec<u64>,
}

pub fn words_for(bits: usize) -> usize {
    bits.div_ceil(64)
}

impl PackedCode {
    /// Pack a sign vector. Anything `>= 0` packs as `+1`.
    pub fn pack(code: &[i8]) -> Self {
        let mut words = vec![0u64; words_for(code.len())];
        for (j, &s) in code.iter().enumerate() {
            if s >= 0 {
                words[j / 64] |= 1 << (j % 64);
            }
        }
        Self { bits: code.len(), words }
    }

    pub fn from_words(bits: usize, words: Vec<u64>) -> Result<Self> {
        if words.len() != words_for(bits) {
            return Err(Error::Dimension {
                expected: words_for(bits),
                actual: words.len(),
            });
        }
        let tail = bits % 64;
        if tail != 0 && words.last().is_some_and(|w| w >> tail != 0) {
            return Err(Error::Format("padding bits set past the code length".into()));
        }
        Ok(Self { bits, words })
    }

    pub fn bits(&self) -> usize {
        self.bits
    }

    pub fn words(&self) -> &[u64] {
        &self.words
    }

    pub fn unpack(&self) -> Vec<i8> {
        (0..self.bits)
            .map(|j| if self.words[j / 64] >> (j % 64) & 1 == 1 { 1 } else { -1 })
            .collect()
    }
}

/// Number of differing signs, by XOR and popcount.
pub fn hamming_distance(a: &PackedCode, b: &PackedCode) -> Result<u32> {
    if a.bits != b.bits {
        return Err(Error::Dimension {
            expected: a.bits,
            actual: b.bits,
        });
    }
    Ok(a.words.iter().zip(&b.words).map(|(x, y)| (x ^ y).count_ones()).sum())
}

/// Ranked neighbors: `(database index, distance)`, distances non-decreasing,
/// ties in ascending index.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankedResult {
    pub items: Vec<(usize, u32)>,
}

impl RankedResult {
    pub fn relevance(&self, labels: &[usize], query_label: usize) -> Vec<bool> {
        self.items.iter().map(|&(i, _)| labels[i] == query_label).collect()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct CodeDatabase {
    bits: usize,
    codes: Vec<PackedCode>,
    labels: Vec<usize>,
}

impl CodeDatabase {
    pub fn new(bits: usize, codes: Vec<PackedCode>, labels: Vec<usize>) -> Result<Self> {
        if codes.len() != labels.len() {
            return Err(Error::Dimension {
                expected: codes.len(),
                actual: labels.len(),
            });
        }
        if let Some(c) = codes.iter().find(|c| c.bits != bits) {
            return Err(Error::Dimension {
                expected: bits,
                actual: c.bits,
            });
        }
        if labels.contains(&0) {
            return Err(Error::Label { label: 0, classes: labels.iter().copied().max().unwrap_or(0) });
        }
        Ok(Self { bits, codes, labels })
    }

    pub fn from_signs(bits: usize, codes: &[Vec<i8>], labels: Vec<usize>) -> Result<Self> {
        Self::new(bits, codes.iter().map(|c| PackedCode::pack(c)).collect(), labels)
    }

    pub fn bits(&self) -> usize {
        self.bits
    }

    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    pub fn codes(&self) -> &[PackedCode] {
        &self.codes
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Full ranking of the database against `q`, truncated to `k`.
    pub fn query(&self, q: &PackedCode, k: usize) -> Result<RankedResult> {
        let mut items = self
            .codes
            .iter()
            .enumerate()
            .map(|(i, c)| Ok((i, hamming_distance(q, c)?)))
            .collect::<Result<Vec<_>>>()?;
        items.sort_by_key(|&(i, d)| (d, i));
        items.truncate(k);
        Ok(RankedResult { items })
    }

    pub fn sidecar_path(path: &Path) -> PathBuf {
        let mut s = path.as_os_str().to_owned();
        s.push(".labels");
        PathBuf::from(s)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(24 + 8 * self.codes.len() * words_for(self.bits));
        out.extend_from_slice(DB_MAGIC);
        out.extend_from_slice(&DB_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.bits as u32).to_le_bytes());
        out.extend_from_slice(&(self.codes.len() as u64).to_le_bytes());
        for c in &self.codes {
            for w in &c.words {
                out.extend_from_slice(&w.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], labels: Vec<usize>) -> Result<Self> {
        if bytes.len() < 24 || &bytes[..8] != DB_MAGIC {
            return Err(Error::Format("not a code database (bad magic)".into()));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes"));
        let version = u32_at(8);
        if version != DB_VERSION {
            return Err(Error::Format(format!("unsupported code database version {version}")));
        }
        let bits = u32_at(12) as usize;
        let count = u64::from_le_bytes(bytes[16..24].try_into().expect("8 bytes")) as usize;
        let per = words_for(bits);
        let expected = count
            .checked_mul(per * 8)
            .and_then(|b| b.checked_add(24))
            .ok_or_else(|| Error::Format("code count overflows".into()))?;
        if bytes.len() != expected {
            return Err(Error::Format(format!(
                "code database holds {} bytes, header implies {expected}",
                bytes.len()
            )));
        }
        let codes = bytes[24..]
            .chunks_exact(per * 8)
            .map(|chunk| {
                let words = chunk
                    .chunks_exact(8)
                    .map(|w| u64::from_le_bytes(w.try_into().expect("8 bytes")))
                    .collect();
                PackedCode::from_words(bits, words)
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(bits, codes, labels)
    }

    /// Write the binary file and its `.labels` sidecar.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))?;
        let side = Self::sidecar_path(path);
        let text: String = self.labels.iter().map(|l| format!("{l}\n")).collect();
        std::fs::write(&side, text).map_err(|e| Error::io(&side, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        let side = Self::sidecar_path(path);
        let text = std::fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
        let labels = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| {
                l.trim()
                    .parse::<usize>()
                    .map_err(|_| Error::data(&side, format!("bad label `{l}`")))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_bytes(&bytes, labels).map_err(|e| Error::data(path, e.to_string()))
    }
}

/// Average precision of one relevance list: `(1/n₊) Σ_k P_k·pos_k`, where
/// `n₊` counts the relevant items in the list. `None` when nothing is
/// relevant.
pub fn average_precision(relevant: &[bool]) -> Option<f64> {
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (k, &r) in relevant.iter().enumerate() {
        if r {
            hits += 1;
            sum += hits as f64 / (k + 1) as f64;
        }
    }
    (hits > 0).then(|| sum / hits as f64)
}

/// How a query with an empty Hamming ball enters `precision_at_radius`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmptyBall {
    /// Contributes precision 0.
    #[default]
    Zero,
    /// Left out of the mean.
    Skip,
}

/// Queries for evaluation: codes with their labels.
#[derive(Clone, Copy, Debug)]
pub struct Queries<'a> {
    pub codes: &'a [PackedCode],
    pub labels: &'a [usize],
}

impl<'a> Queries<'a> {
    pub fn new(codes: &'a [PackedCode], labels: &'a [usize]) -> Result<Self> {
        if codes.len() != labels.len() {
            return Err(Error::Dimension {
                expected: codes.len(),
                actual: labels.len(),
            });
        }
        Ok(Self { codes, labels })
    }

    fn rankings(&self, db: &CodeDatabase, k: usize) -> Result<Vec<(RankedResult, Vec<bool>)>> {
        self.codes
            .iter()
            .zip(self.labels)
            .map(|(q, &l)| {
                let r = db.query(q, k)?;
                let rel = r.relevance(db.labels(), l);
                Ok((r, rel))
            })
            .collect()
    }
}

/// Mean average precision over the ranking, cut at `cutoff` items when
/// given. Queries with no relevant item in the considered list are left out.
pub fn map_score(queries: &Queries, db: &CodeDatabase, cutoff: Option<usize>) -> Result<f64> {
    if queries.codes.is_empty() {
        return Err(Error::NoQueries);
    }
    let k = cutoff.unwrap_or(db.len());
    let aps: Vec<f64> = queries
        .rankings(db, k)?
        .iter()
        .filter_map(|(_, rel)| average_precision(rel))
        .collect();
    if aps.is_empty() {
        return Err(Error::NoQueries);
    }
    Ok(aps.iter().sum::<f64>() / aps.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub recall: f64,
    pub precision: f64,
}

/// Precision at evenly spaced recall levels `0, 1/(levels−1), …, 1`. For
/// each query the precision at a level is taken at the first rank whose
/// recall reaches it, or 0 if the ranking never does.
pub fn precision_recall_curve(queries: &Queries, db: &CodeDatabase, levels: usize) -> Result<Vec<PrPoint>> {
    let levels = levels.max(2);
    let grid: Vec<f64> = (0..levels).map(|i| i as f64 / (levels - 1) as f64).collect();
    let mut sums = vec![0.0; levels];
    let rankings = queries.rankings(db, db.len())?;
    let mut counted = 0usize;
    for (_, rel) in &rankings {
        let total = rel.iter().filter(|r| **r).count();
        if total == 0 {
            continue;
        }
        counted += 1;
        let mut hits = 0usize;
        let mut level = 0usize;
        for (k, &r) in rel.iter().enumerate() {
            hits += usize::from(r);
            let recall = hits as f64 / total as f64;
            let precision = hits as f64 / (k + 1) as f64;
            while level < levels && recall + 1e-12 >= grid[level] {
                sums[level] += precision;
                level += 1;
            }
        }
    }
    let n = counted.max(1) as f64;
    Ok(grid
        .into_iter()
        .zip(sums)
        .map(|(recall, s)| PrPoint {
            recall,
            precision: s / n,
        })
        .collect())
}

/// Mean precision among items within Hamming distance `radius`.
pub fn precision_at_radius(queries: &Queries, db: &CodeDatabase, radius: u32, empty: EmptyBall) -> Result<f64> {
    let mut sum = 0.0;
    let mut counted = 0usize;
    for (q, &label) in queries.codes.iter().zip(queries.labels) {
        let (mut inside, mut relevant) = (0usize, 0usize);
        for (c, &l) in db.codes().iter().zip(db.labels()) {
            if hamming_distance(q, c)? <= radius {
                inside += 1;
                relevant += usize::from(l == label);
            }
        }
        if inside == 0 {
            if empty == EmptyBall::Zero {
                counted += 1;
            }
            continue;
        }
        sum += relevant as f64 / inside as f64;
        counted += 1;
    }
    Ok(if counted == 0 { 0.0 } else { sum / counted as f64 })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TopNPoint {
    pub n: usize,
    pub precision: f64,
}

/// Mean precision of the top `n` returns for each `n`, capped at the
/// database size.
pub fn precision_at_topn(queries: &Queries, db: &CodeDatabase, ns: &[usize]) -> Result<Vec<TopNPoint>> {
    let rankings = queries.rankings(db, db.len())?;
    let nq = rankings.len().max(1) as f64;
    Ok(ns
        .iter()
        .map(|&n| {
            let n_eff = n.min(db.len());
            let sum: f64 = rankings
                .iter()
                .map(|(_, rel)| {
                    if n_eff == 0 {
                        0.0
                    } else {
                        rel[..n_eff].iter().filter(|r| **r).count() as f64 / n_eff as f64
                    }
                })
                .sum();
            TopNPoint {
                n,
                precision: sum / nq,
            }
        })
        .collect())
}

/// Evaluation settings.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalOptions {
    pub radius: u32,
    pub empty_ball: EmptyBall,
    pub map_cutoff: Option<usize>,
    pub recall_levels: usize,
    pub topn: Vec<usize>,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            radius: 3,
            empty_ball: EmptyBall::Zero,
            map_cutoff: None,
            recall_levels: 11,
            topn: vec![1, 5, 10, 20, 50, 100],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub map: f64,
    pub p_at_radius: f64,
    pub pr_curve: Vec<PrPoint>,
    pub topn_curve: Vec<TopNPoint>,
}

impl Metrics {
    pub fn compute(queries: &Queries, db: &CodeDatabase, opts: &EvalOptions) -> Result<Self> {
        Ok(Self {
            map: map_score(queries, db, opts.map_cutoff)?,
            p_at_radius: precision_at_radius(queries, db, opts.radius, opts.empty_ball)?,
            pr_curve: precision_recall_curve(queries, db, opts.recall_levels)?,
            topn_curve: precision_at_topn(queries, db, &opts.topn)?,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("metrics serialize")
    }

    /// Long-format CSV: `series,x,y` with series `map`, `p_at_radius`, `pr`
    /// (x = recall) and `topn` (x = N).
    pub fn to_csv(&self) -> String {
        let mut s = String::from("series,x,y\n");
        s.push_str(&format!("map,,{}\n", self.map));
        s.push_str(&format!("p_at_radius,,{}\n", self.p_at_radius));
        for p in &self.pr_curve {
            s.push_str(&format!("pr,{},{}\n", p.recall, p.precision));
        }
        for p in &self.topn_curve {
            s.push_str(&format!("topn,{},{}\n", p.n, p.precision));
        }
        s
    }
}
