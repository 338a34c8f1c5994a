// Analytic gradients against central finite differences.

use fghash::backbone::ScoreTensor;
use fghash::collab::localization_loss_grad;
use fghash::comparer::{classification_loss_and_grad, column_max, Comparer};
use fghash::nn::{Param, Parameters};
use fghash::ranker::{triplet_loss, triplet_loss_grad, Ranker};
use fghash::tensor::Tensor3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const POINTS: usize = 12;
pub const TOL: f64 = 1e-4;
const STEP: f64 = 1e-6;

pub fn rel_err(a: f64, n: f64) -> f64 {
    let scale = a.abs().max(n.abs());
    if scale < 1e-7 {
        (a - n).abs()
    } else {
        (a - n).abs() / scale
    }
}

fn central(mut f: impl FnMut(f64) -> f64, x: f64) -> f64 {
    (f(x + STEP) - f(x - STEP)) / (2.0 * STEP)
}

fn param_values(m: &impl Parameters) -> Vec<(String, Vec<f64>, Vec<f64>)> {
    let mut out = Vec::new();
    m.visit("", &mut |n, p: &Param| out.push((n.to_string(), p.value.clone(), p.grad.clone())));
    out
}

fn set_param(m: &mut impl Parameters, name: &str, idx: usize, v: f64) {
    m.visit_mut("", &mut |n, p| {
        if n == name {
            p.value[idx] = v;
        }
    });
}

fn vec_of(r: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| r.gen_range(-1.0..1.0)).collect()
}

pub fn gated_fusion_gradients() {
    let mut r = ChaCha8Rng::seed_from_u64(21);
    for _ in 0..POINTS {
        let mut ranker = Ranker::new(5, 4, 6, &mut r);
        let feats: Vec<Vec<f64>> = (0..4).map(|_| vec_of(&mut r, 5)).collect();
        let weights = vec_of(&mut r, 6);
        let loss = |rk: &Ranker, fs: &[Vec<f64>]| {
            let refs: Vec<&[f64]> = fs.iter().map(Vec::as_slice).collect();
            let u = rk.forward(&refs).unwrap().code;
            u.iter().zip(&weights).map(|(a, b)| a * b).sum::<f64>()
        };
        let refs: Vec<&[f64]> = feats.iter().map(Vec::as_slice).collect();
        let trace = ranker.forward(&refs).unwrap();
        ranker.zero_grad();
        let d_in = ranker.backward(&trace, &weights);

        for i in 0..4 {
            for k in 0..5 {
                let num = central(
                    |x| {
                        let mut fs = feats.clone();
                        fs[i][k] = x;
                        loss(&ranker, &fs)
                    },
                    feats[i][k],
                );
                assert!(rel_err(d_in[i][k], num) <= TOL, "input {i},{k}: {} vs {num}", d_in[i][k]);
            }
        }
        for (name, values, grads) in param_values(&ranker) {
            for idx in [0, values.len() / 2, values.len() - 1] {
                let mut probe = ranker.clone();
                let num = central(
                    |x| {
                        set_param(&mut probe, &name, idx, x);
                        loss(&probe, &feats)
                    },
                    values[idx],
                );
                assert!(rel_err(grads[idx], num) <= TOL, "{name}[{idx}]: {} vs {num}", grads[idx]);
            }
        }
    }
}

pub fn classification_loss_gradients_through_max_pool() {
    let mut r = ChaCha8Rng::seed_from_u64(22);
    let mut checked = 0;
    while checked < POINTS {
        let (n, dim, classes) = (r.gen_range(2..6), 4, r.gen_range(2..5));
        let mut comparer = Comparer::new(dim, classes, &mut r);
        let feats: Vec<Vec<f64>> = (0..n).map(|_| vec_of(&mut r, dim)).collect();
        let label = r.gen_range(1..=classes);
        let refs: Vec<&[f64]> = feats.iter().map(Vec::as_slice).collect();
        let p = comparer.class_logits(&refs).unwrap();
        // skip near-ties in the max-pool, where the loss has a kink
        let (top, arg) = column_max(&p);
        let mut gap = f64::INFINITY;
        for c in 0..p.cols {
            for i in (0..p.rows).filter(|&i| i != arg[c]) {
                gap = gap.min(top[c] - p.get(i, c));
            }
        }
        if gap < 1e-3 {
            continue;
        }
        checked += 1;
        let loss = |cp: &Comparer, fs: &[Vec<f64>]| {
            let refs: Vec<&[f64]> = fs.iter().map(Vec::as_slice).collect();
            classification_loss_and_grad(&cp.class_logits(&refs).unwrap(), label).unwrap().0
        };
        let (_, dp) = classification_loss_and_grad(&p, label).unwrap();
        comparer.zero_grad();
        let d_in = comparer.backward(&refs, &dp);
        for i in 0..n {
            for k in 0..dim {
                let num = central(
                    |x| {
                        let mut fs = feats.clone();
                        fs[i][k] = x;
                        loss(&comparer, &fs)
                    },
                    feats[i][k],
                );
                assert!(rel_err(d_in[i][k], num) <= TOL, "feature {i},{k}: {} vs {num}", d_in[i][k]);
            }
        }
        for (name, values, grads) in param_values(&comparer) {
            for idx in 0..values.len() {
                let mut probe = comparer.clone();
                let num = central(
                    |x| {
                        set_param(&mut probe, &name, idx, x);
                        loss(&probe, &feats)
                    },
                    values[idx],
                );
                assert!(rel_err(grads[idx], num) <= TOL, "{name}[{idx}]: {} vs {num}", grads[idx]);
            }
        }
    }
}

pub fn triplet_loss_gradients() {
    let mut r = ChaCha8Rng::seed_from_u64(23);
    let mut checked = 0;
    while checked < POINTS {
        let n = 6;
        let u: Vec<Vec<f64>> = (0..3).map(|_| vec_of(&mut r, n)).collect();
        let margin = r.gen_range(0.5..2.0);
        let l = triplet_loss(&u[0], &u[1], &u[2], margin);
        if l < 1e-3 {
            continue;
        }
        checked += 1;
        let (loss, gi, gj, gk) = triplet_loss_grad(&u[0], &u[1], &u[2], margin);
        assert_eq!(loss, l);
        for (which, g) in [gi, gj, gk].iter().enumerate() {
            for t in 0..n {
                let num = central(
                    |x| {
                        let mut v = u.clone();
                        v[which][t] = x;
                        triplet_loss(&v[0], &v[1], &v[2], margin)
                    },
                    u[which][t],
                );
                assert!(rel_err(g[t], num) <= TOL, "u{which}[{t}]: {} vs {num}", g[t]);
            }
        }
    }
}

pub fn localization_loss_gradients() {
    let mut r = ChaCha8Rng::seed_from_u64(24);
    let mut checked = 0;
    while checked < POINTS {
        let (hh, ww, aa) = (r.gen_range(2..5), r.gen_range(2..5), r.gen_range(1..4));
        let values = Tensor3::from_vec(aa, hh, ww, (0..hh * ww * aa).map(|_| r.gen_range(-1.0..1.0)).collect());
        let scores = ScoreTensor::new(1, values);
        let target = (r.gen_range(1..=hh), r.gen_range(1..=ww), r.gen_range(1..=aa));
        let margin = r.gen_range(0.2..1.0);
        let a_t = scores.get(target.0, target.1, target.2);
        // every hinge must sit away from its kink
        if scores.values.data.iter().any(|v| (margin + v - a_t).abs() < 1e-3 && *v != a_t) {
            continue;
        }
        checked += 1;
        let (_, grad) = localization_loss_grad(&scores, target, margin, None);
        for off in 0..scores.values.data.len() {
            let num = central(
                |x| {
                    let mut s = scores.clone();
                    s.values.data[off] = x;
                    localization_loss_grad(&s, target, margin, None).0
                },
                scores.values.data[off],
            );
            assert!(rel_err(grad.data[off], num) <= TOL, "offset {off}: {} vs {num}", grad.data[off]);
        }
    }
}
