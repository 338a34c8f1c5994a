// Discrete operations against brute-force reimplementations on random
// instances.

use fghash::backbone::{BackboneConfig, ScoreTensor};
use fghash::collab::{index_to_hwr, select_regions};
use fghash::comparer::{column_max, select_best_proposal, ProbabilityMatrix};
use fghash::geometry::{flat_index, generate_anchors, nms, AnchorSpec, BoundingBox, Proposal, ProposalSet};
use fghash::retrieval::{average_precision, CodeDatabase, PackedCode};
use fghash::tensor::Tensor3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const INSTANCES: usize = 150;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn overlap(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let w = a.x_max.min(b.x_max) - a.x_min.max(b.x_min);
    let h = a.y_max.min(b.y_max) - a.y_min.max(b.y_min);
    if w <= 0.0 || h <= 0.0 {
        return 0.0;
    }
    let area = |b: &BoundingBox| (b.x_max - b.x_min) * (b.y_max - b.y_min);
    w * h / (area(a) + area(b) - w * h)
}

/// Repeatedly take the best remaining box (earliest on ties) and delete
/// every box overlapping it by more than `t`.
fn nms_oracle(props: &[Proposal], t: f64, keep: usize) -> Vec<usize> {
    let mut alive: Vec<usize> = (0..props.len()).collect();
    let mut out = Vec::new();
    while !alive.is_empty() && out.len() < keep {
        let mut best = 0;
        for k in 1..alive.len() {
            if props[alive[k]].score > props[alive[best]].score {
                best = k;
            }
        }
        let pick = alive.remove(best);
        out.push(pick);
        alive.retain(|&i| overlap(&props[pick].bbox, &props[i].bbox) <= t);
    }
    out
}

fn random_props(r: &mut ChaCha8Rng, n: usize) -> Vec<Proposal> {
    (0..n)
        .map(|i| {
            let x = r.gen_range(0.0..80.0);
            let y = r.gen_range(0.0..80.0);
            let w = r.gen_range(4.0..40.0);
            let h = r.gen_range(4.0..40.0);
            Proposal {
                bbox: BoundingBox::new(x, y, x + w, y + h),
                // coarse scores so ties occur
                score: r.gen_range(0..8) as f64,
                layer_id: 1,
                grid_index: (i + 1, 1, 1),
                flat_index: i + 1,
            }
        })
        .collect()
}

pub fn nms_matches_oracle() {
    let mut r = rng(1);
    for _ in 0..INSTANCES {
        let n = r.gen_range(1..40);
        let props = random_props(&mut r, n);
        let t = [0.0, 0.1, 0.25, 0.5, 0.7, 1.0][r.gen_range(0..6)];
        let keep = r.gen_range(1..10);
        let set = ProposalSet { proposals: props.clone() };
        let got: Vec<usize> = nms(&set, t, keep).iter().map(|p| p.flat_index - 1).collect();
        assert_eq!(got, nms_oracle(&props, t, keep), "t={t} keep={keep}");
    }
}

fn score_tensor(r: &mut ChaCha8Rng, layer: usize, h: usize, w: usize, a: usize) -> ScoreTensor {
    let data = (0..h * w * a).map(|_| r.gen_range(0..20) as f64).collect();
    ScoreTensor::new(layer, Tensor3::from_vec(a, h, w, data))
}

pub fn per_layer_argmax_matches_oracle() {
    let backbone = BackboneConfig::default();
    let grids = backbone.grids().unwrap();
    let all = generate_anchors(&grids, &AnchorSpec::default(), backbone.input_size, true).unwrap();
    let proposals: [ProposalSet; 3] = std::array::from_fn(|i| all.layer(i + 1));
    let shapes = [(7, 7), (4, 4), (2, 2)];
    let mut r = rng(2);
    for _ in 0..INSTANCES {
        let scores: [ScoreTensor; 3] =
            std::array::from_fn(|l| score_tensor(&mut r, l + 1, shapes[l].0, shapes[l].1, 9));
        let picked = select_regions(&scores, &proposals);
        for l in 0..3 {
            let (hh, ww) = shapes[l];
            let mut best: Option<(f64, usize, (usize, usize, usize))> = None;
            for rr in 1..=9 {
                for w in 1..=ww {
                    for h in 1..=hh {
                        let v = scores[l].get(h, w, rr);
                        let c = (rr - 1) * hh * ww + (w - 1) * hh + h;
                        let better = match best {
                            None => true,
                            Some((bv, bc, _)) => v > bv || (v == bv && c < bc),
                        };
                        if better {
                            best = Some((v, c, (h, w, rr)));
                        }
                    }
                }
            }
            let (v, c, hwr) = best.unwrap();
            assert_eq!(picked[l].flat_index, c);
            assert_eq!(picked[l].grid_index, hwr);
            assert_eq!(picked[l].score, v);
            assert_eq!(picked[l].layer_id, l + 1);
        }
    }
}

pub fn column_max_and_best_row_match_oracle() {
    let mut r = rng(3);
    for _ in 0..INSTANCES {
        let n = r.gen_range(1..12);
        let c = r.gen_range(2..7);
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..c).map(|_| r.gen_range(-3..4) as f64).collect())
            .collect();
        let p = ProbabilityMatrix::from_rows(rows.clone());
        let (vals, args) = column_max(&p);
        for col in 0..c {
            let top = rows.iter().map(|row| row[col]).fold(f64::NEG_INFINITY, f64::max);
            let first = rows.iter().position(|row| row[col] == top).unwrap();
            assert_eq!(vals[col], top);
            assert_eq!(args[col], first);
            assert_eq!(select_best_proposal(&p, col + 1).unwrap(), first);
        }
    }
}

pub fn index_to_hwr_round_trips() {
    let mut r = rng(4);
    for _ in 0..INSTANCES {
        let (hh, ww, aa) = (r.gen_range(1..9), r.gen_range(1..9), r.gen_range(1..10));
        let mut seen = vec![false; hh * ww * aa];
        for c in 1..=hh * ww * aa {
            let (h, w, a) = index_to_hwr(c, hh, ww, aa).unwrap();
            assert!((1..=hh).contains(&h) && (1..=ww).contains(&w) && (1..=aa).contains(&a));
            assert_eq!(flat_index(h, w, a, hh, ww), c);
            assert!(!seen[c - 1]);
            seen[c - 1] = true;
        }
        assert!(index_to_hwr(0, hh, ww, aa).is_err());
        assert!(index_to_hwr(hh * ww * aa + 1, hh, ww, aa).is_err());
    }
}

fn random_code(r: &mut ChaCha8Rng, bits: usize) -> Vec<i8> {
    (0..bits).map(|_| if r.gen() { 1 } else { -1 }).collect()
}

pub fn hamming_ranking_matches_oracle() {
    let mut r = rng(5);
    for _ in 0..INSTANCES {
        let bits = [8, 16, 32, 48, 64, 70][r.gen_range(0..6)];
        let n = r.gen_range(1..60);
        let codes: Vec<Vec<i8>> = (0..n).map(|_| random_code(&mut r, bits)).collect();
        let labels: Vec<usize> = (0..n).map(|_| r.gen_range(1..4)).collect();
        let db = CodeDatabase::from_signs(bits, &codes, labels).unwrap();
        let q = random_code(&mut r, bits);
        let k = r.gen_range(1..n + 5);
        let got = db.query(&PackedCode::pack(&q), k).unwrap();

        let mut want: Vec<(usize, u32)> = codes
            .iter()
            .enumerate()
            .map(|(i, c)| (i, c.iter().zip(&q).filter(|(a, b)| a != b).count() as u32))
            .collect();
        want.sort_by_key(|&(i, d)| (d, i));
        want.truncate(k);
        assert_eq!(got.items, want);
    }
}

/// Mean over relevant positions of (relevant at or above) / position.
fn ap_oracle(rel: &[bool]) -> Option<f64> {
    let positions: Vec<usize> = rel.iter().enumerate().filter(|(_, r)| **r).map(|(i, _)| i + 1).collect();
    if positions.is_empty() {
        return None;
    }
    let total: f64 = positions
        .iter()
        .map(|&p| positions.iter().filter(|&&q| q <= p).count() as f64 / p as f64)
        .sum();
    Some(total / positions.len() as f64)
}

pub fn average_precision_matches_oracle() {
    let mut r = rng(6);
    for _ in 0..INSTANCES {
        let n = r.gen_range(1..80);
        let density = r.gen_range(0.05..0.9);
        let rel: Vec<bool> = (0..n).map(|_| r.gen_bool(density)).collect();
        match (average_precision(&rel), ap_oracle(&rel)) {
            (None, None) => {}
            (Some(a), Some(b)) => assert!((a - b).abs() <= 1e-9, "{a} vs {b}"),
            other => panic!("mismatch {other:?}"),
        }
    }
}
