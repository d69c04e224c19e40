use proptest::prelude::*;

use super::*;
use crate::numerics::{grad_check, Rng};

// ---- independent scalar oracles (plain loops, no shared helpers) ----

fn oracle_cos(u: &[f64], v: &[f64]) -> f64 {
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    let nu: f64 = u.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nv: f64 = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    dot / (nu * nv)
}

/// l(anchor_x, others_x) with negatives others_{x'}, x' != x.
fn oracle_l(anchor: &[f64], others: &[Vec<f64>], x: usize, tau: f64, include_pos: bool) -> f64 {
    let num = (oracle_cos(anchor, &others[x]) / tau).exp();
    let mut den = 0.0;
    for (xp, o) in others.iter().enumerate() {
        if xp != x || include_pos {
            den += (oracle_cos(anchor, o) / tau).exp();
        }
    }
    -(num / den).ln()
}

fn to_rows(m: &Matrix) -> Vec<Vec<f64>> {
    m.iter_rows().map(|r| r.iter().map(|&v| f64::from(v)).collect()).collect()
}

fn oracle_consensus(emb: &[Matrix], tau: f64, include_pos: bool) -> f64 {
    let k = emb.len();
    let n = emb[0].rows();
    let rows: Vec<Vec<Vec<f64>>> = emb.iter().map(to_rows).collect();
    let avg: Vec<Vec<f64>> = (0..n)
        .map(|x| {
            let d = rows[0][x].len();
            (0..d).map(|j| rows.iter().map(|r| r[x][j]).sum::<f64>() / k as f64).collect()
        })
        .collect();
    let mut total = 0.0;
    for dev in &rows {
        let mut inner = 0.0;
        for x in 0..n {
            inner += oracle_l(&dev[x], &avg, x, tau, include_pos);
            inner += oracle_l(&avg[x], dev, x, tau, include_pos);
        }
        total += inner / (2.0 * n as f64);
    }
    total / k as f64
}

fn oracle_pairwise(emb: &[Matrix], tau: f64) -> f64 {
    let k = emb.len();
    let n = emb[0].rows();
    let rows: Vec<Vec<Vec<f64>>> = emb.iter().map(to_rows).collect();
    let mut total = 0.0;
    let mut pairs = 0;
    for i in 0..k {
        for j in i + 1..k {
            let mut s = 0.0;
            for x in 0..n {
                s += oracle_l(&rows[i][x], &rows[j], x, tau, false);
                s += oracle_l(&rows[j][x], &rows[i], x, tau, false);
            }
            total += s / (2.0 * n as f64);
            pairs += 1;
        }
    }
    total / f64::from(pairs)
}

fn oracle_kl_distill(student: &Matrix, teacher: &Matrix, t: f64) -> f64 {
    let mut total = 0.0;
    for x in 0..student.rows() {
        let soft = |row: &[f32]| -> Vec<f64> {
            let e: Vec<f64> = row.iter().map(|&v| (f64::from(v) / t).exp()).collect();
            let s: f64 = e.iter().sum();
            e.into_iter().map(|v| v / s).collect()
        };
        let q = soft(student.row(x));
        let p = soft(teacher.row(x));
        total += q.iter().zip(&p).map(|(a, b)| a * (a / b).ln()).sum::<f64>();
    }
    t * t * total
}

// ---- fixtures ----

fn random(rows: usize, cols: usize, rng: &mut Rng) -> Matrix {
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.normal() as f32).collect()).unwrap()
}

fn random_embeddings(k: usize, n: usize, d: usize, rng: &mut Rng) -> Vec<Matrix> {
    (0..k).map(|_| random(n, d, rng)).collect()
}

fn unit(d: usize, i: usize) -> Vec<f32> {
    let mut v = vec![0.0; d];
    v[i] = 1.0;
    v
}

fn tau1() -> ContrastiveConfig {
    ContrastiveConfig { tau: 1.0, ..ContrastiveConfig::default() }
}

// ---- NT-Xent term ----

#[test]
fn ntxent_hand_examples() {
    let (e1, e2) = (unit(3, 0), unit(3, 1));
    // -log(e^1 / e^0)
    let l = ntxent_term(&e1, &e1, &[&e2], &tau1()).unwrap();
    assert!((l + 1.0).abs() < 1e-12);
    // positive identical to the sole negative
    let l = ntxent_term(&e1, &e2, &[&e2], &tau1()).unwrap();
    assert!(l.abs() < 1e-12);
}

#[test]
fn ntxent_errors() {
    let e1 = unit(3, 0);
    assert!(matches!(ntxent_term(&e1, &e1, &[], &tau1()), Err(Error::InvalidBatch(_))));
    let zero = vec![0.0; 3];
    assert!(matches!(ntxent_term(&e1, &zero, &[&e1], &tau1()), Err(Error::DegenerateVector(_))));
    let bad = ContrastiveConfig { tau: 0.0, ..tau1() };
    assert!(ntxent_term(&e1, &e1, &[&e1], &bad).is_err());
}

#[test]
fn ntxent_matches_oracle_on_random_batches() {
    let mut rng = Rng::new(21);
    for _ in 0..100 {
        let n = 2 + rng.below(7);
        let d = 1 + rng.below(12);
        let a = random(n, d, &mut rng);
        let b = random(n, d, &mut rng);
        let x = rng.below(n);
        let negatives: Vec<&[f32]> = (0..n).filter(|&o| o != x).map(|o| b.row(o)).collect();
        for include in [false, true] {
            let cfg = ContrastiveConfig { tau: 0.2, denominator_includes_positive: include, ..Default::default() };
            let got = ntxent_term(a.row(x), b.row(x), &negatives, &cfg).unwrap();
            let want = oracle_l(&to_rows(&a)[x], &to_rows(&b), x, 0.2, include);
            assert!((got - want).abs() < 1e-10, "{got} vs {want}");
        }
    }
}

// ---- centroid consensus loss ----

#[test]
fn consensus_two_identical_devices_orthogonal_samples() {
    let z = Matrix::from_rows(&[unit(4, 0), unit(4, 1)]).unwrap();
    let out = consensus_loss(&[z.clone(), z], &tau1()).unwrap();
    assert!((out.loss + 1.0).abs() < 1e-12, "{}", out.loss);
}

#[test]
fn consensus_all_identical_is_zero() {
    let z = Matrix::from_rows(&[vec![0.3, -1.0, 2.0], vec![0.3, -1.0, 2.0]]).unwrap();
    let out = consensus_loss(&[z.clone(), z.clone(), z], &ContrastiveConfig::default()).unwrap();
    assert!(out.loss.abs() < 1e-12);
    let pair = pairwise_consensus_loss(&[out.grads[0].map(|_| 1.0), out.grads[0].map(|_| 1.0)], &tau1());
    assert!(pair.unwrap().loss.abs() < 1e-12);
}

#[test]
fn consensus_rejects_small_batches() {
    let one = Matrix::from_rows(&[vec![1.0, 0.0]]).unwrap();
    let two = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
    assert!(matches!(consensus_loss(&[two.clone()], &tau1()), Err(Error::InvalidBatch(_))));
    assert!(matches!(consensus_loss(&[one.clone(), one], &tau1()), Err(Error::InvalidBatch(_))));
    let zero = Matrix::zeros(2, 2);
    assert!(matches!(consensus_loss(&[two, zero], &tau1()), Err(Error::DegenerateVector(_))));
}

#[test]
fn consensus_matches_oracle() {
    let mut rng = Rng::new(22);
    for _ in 0..100 {
        let k = 2 + rng.below(3);
        let n = 2 + rng.below(7);
        let d = 2 + rng.below(10);
        let emb = random_embeddings(k, n, d, &mut rng);
        for include in [false, true] {
            let cfg = ContrastiveConfig { tau: 0.2, denominator_includes_positive: include, ..Default::default() };
            let got = consensus_loss(&emb, &cfg).unwrap().loss;
            let want = oracle_consensus(&emb, 0.2, include);
            assert!((got - want).abs() < 1e-9, "{got} vs {want}");
        }
        let got = pairwise_consensus_loss(&emb, &ContrastiveConfig::default()).unwrap().loss;
        assert!((got - oracle_pairwise(&emb, 0.2)).abs() < 1e-9);
    }
}

fn consensus_grad_error(emb: &[Matrix], cfg: &ContrastiveConfig, pairwise: bool) -> f64 {
    let mut worst = 0.0f64;
    for dev in 0..emb.len() {
        let report = grad_check(
            |p| {
                let mut e = emb.to_vec();
                e[dev] = p.clone();
                let out = if pairwise {
                    pairwise_consensus_loss(&e, cfg).unwrap()
                } else {
                    consensus_loss(&e, cfg).unwrap()
                };
                (out.loss, out.grads[dev].clone())
            },
            &emb[dev],
            1e-3,
        );
        worst = worst.max(report.max_rel_error);
    }
    worst
}

#[test]
fn consensus_gradients_match_finite_differences() {
    let mut rng = Rng::new(23);
    for _ in 0..10 {
        let emb = random_embeddings(3, 5, 6, &mut rng);
        for include in [false, true] {
            let cfg = ContrastiveConfig { tau: 0.2, denominator_includes_positive: include, ..Default::default() };
            let err = consensus_grad_error(&emb, &cfg, false);
            assert!(err < 1e-4, "centroid {err}");
            let err = consensus_grad_error(&emb, &cfg, true);
            assert!(err < 1e-4, "pairwise {err}");
        }
    }
}

#[test]
fn stop_gradient_drops_the_centroid_path() {
    let mut rng = Rng::new(24);
    let emb = random_embeddings(3, 4, 5, &mut rng);
    let cfg = ContrastiveConfig { stop_gradient_centroid: true, ..Default::default() };
    let stopped = consensus_loss(&emb, &cfg).unwrap();
    let full = consensus_loss(&emb, &ContrastiveConfig::default()).unwrap();
    assert_eq!(stopped.loss, full.loss);
    assert_ne!(stopped.grads[0], full.grads[0]);

    // with the centroid frozen, the stopped gradient is the exact derivative
    let avg = Matrix::mean_of(&emb.iter().collect::<Vec<_>>()).unwrap();
    let frozen_loss = |z0: &Matrix| {
        let rows = to_rows(z0);
        let avg_rows = to_rows(&avg);
        let (n, k) = (rows.len(), emb.len() as f64);
        let mut s = 0.0;
        for x in 0..n {
            s += oracle_l(&rows[x], &avg_rows, x, 0.2, false) + oracle_l(&avg_rows[x], &rows, x, 0.2, false);
        }
        s / (2.0 * n as f64) / k
    };
    let report = grad_check(|p| (frozen_loss(p), stopped.grads[0].clone()), &emb[0], 1e-3);
    assert!(report.max_rel_error < 1e-4, "{report:?}");
}

#[test]
fn consensus_is_rotation_invariant() {
    let mut rng = Rng::new(25);
    let d = 6;
    for _ in 0..5 {
        let emb = random_embeddings(3, 5, d, &mut rng);
        // random orthogonal matrix by Gram-Schmidt
        let mut q = random(d, d, &mut rng);
        for i in 0..d {
            for j in 0..i {
                let dot: f32 = q.row(i).iter().zip(q.row(j)).map(|(a, b)| a * b).sum();
                let rj = q.row(j).to_vec();
                q.row_mut(i).iter_mut().zip(&rj).for_each(|(a, b)| *a -= dot * b);
            }
            let norm: f32 = q.row(i).iter().map(|a| a * a).sum::<f32>().sqrt();
            q.row_mut(i).iter_mut().for_each(|a| *a /= norm);
        }
        let rotated: Vec<Matrix> = emb.iter().map(|e| e.matmul(&q).unwrap()).collect();
        let a = consensus_loss(&emb, &ContrastiveConfig::default()).unwrap().loss;
        let b = consensus_loss(&rotated, &ContrastiveConfig::default()).unwrap().loss;
        assert!((a - b).abs() < 1e-5, "{a} vs {b}");
    }
}

#[test]
fn pairwise_with_two_devices_is_symmetric_ntxent() {
    let mut rng = Rng::new(26);
    let emb = random_embeddings(2, 4, 3, &mut rng);
    let got = pairwise_consensus_loss(&emb, &ContrastiveConfig::default()).unwrap().loss;
    let (a, b) = (to_rows(&emb[0]), to_rows(&emb[1]));
    let mut want = 0.0;
    for x in 0..4 {
        want += oracle_l(&a[x], &b, x, 0.2, false) + oracle_l(&b[x], &a, x, 0.2, false);
    }
    assert!((got - want / 8.0).abs() < 1e-10);
}

#[test]
fn pair_term_counts() {
    let mut rng = Rng::new(27);
    let n = 3;
    for k in [2, 4, 8, 16] {
        let emb = random_embeddings(k, n, 4, &mut rng);
        let c = consensus_loss(&emb, &ContrastiveConfig::default()).unwrap();
        let p = pairwise_consensus_loss(&emb, &ContrastiveConfig::default()).unwrap();
        assert_eq!(c.pair_terms, 2 * k * n);
        assert_eq!(p.pair_terms, k * (k - 1) * n);
    }
}

// ---- distillation ----

#[test]
fn distill_zero_cases() {
    let mut rng = Rng::new(28);
    let teacher = random(4, 5, &mut rng);
    let cfg = DistillConfig::default();
    assert!(distill_loss(&teacher, &teacher, &cfg).unwrap().value.abs() < 1e-12);
    let mut shifted = teacher.clone();
    for x in 0..4 {
        let c = rng.uniform(-10.0, 10.0);
        shifted.row_mut(x).iter_mut().for_each(|v| *v += c);
    }
    let out = distill_loss(&shifted, &teacher, &cfg).unwrap();
    assert!(out.value.abs() < 1e-9, "{}", out.value);
    assert!(out.grad.data().iter().all(|g| g.abs() < 1e-6));
    assert!(matches!(distill_loss(&random(4, 3, &mut rng), &teacher, &cfg), Err(Error::Shape(_))));
}

#[test]
fn distill_matches_oracle() {
    let mut rng = Rng::new(29);
    for _ in 0..100 {
        let rows = 1 + rng.below(8);
        let cols = 2 + rng.below(9);
        let s = random(rows, cols, &mut rng);
        let t = random(rows, cols, &mut rng);
        let got = distill_loss(&s, &t, &DistillConfig::default()).unwrap().value;
        let want = oracle_kl_distill(&s, &t, 3.0);
        assert!((got - want).abs() < 1e-9, "{got} vs {want}");
    }
}

#[test]
fn distill_gradient_matches_finite_differences() {
    let mut rng = Rng::new(30);
    for _ in 0..10 {
        let s = random(4, 6, &mut rng).scale(3.0);
        let t = random(4, 6, &mut rng).scale(3.0);
        let cfg = DistillConfig::default();
        let report = grad_check(
            |p| {
                let out = distill_loss(p, &t, &cfg).unwrap();
                (out.value, out.grad)
            },
            &s,
            1e-3,
        );
        assert!(report.max_rel_error < 1e-6, "{report:?}");
    }
}

// ---- cross-entropy ----

#[test]
fn cross_entropy_examples() {
    let uniform = Matrix::zeros(3, 7);
    let out = cross_entropy(&uniform, &[0, 3, 6]).unwrap();
    assert!((out.value - 7f64.ln()).abs() < 1e-12);

    let confident = Matrix::from_rows(&[vec![60.0, 0.0, 0.0]]).unwrap();
    assert!(cross_entropy(&confident, &[0]).unwrap().value < 1e-20);

    assert!(matches!(
        cross_entropy(&uniform, &[0, 1, 7]),
        Err(Error::InvalidLabel { label: 7, num_classes: 7 })
    ));
}

#[test]
fn cross_entropy_gradient() {
    let mut rng = Rng::new(31);
    let logits = random(5, 4, &mut rng);
    let labels = [0, 3, 1, 1, 2];
    let report = grad_check(
        |p| {
            let out = cross_entropy(p, &labels).unwrap();
            (out.value, out.grad)
        },
        &logits,
        1e-3,
    );
    assert!(report.max_rel_error < 1e-6, "{report:?}");
}

proptest! {
    #[test]
    fn distill_is_nonnegative(
        s in prop::collection::vec(-20.0f32..20.0, 12),
        t in prop::collection::vec(-20.0f32..20.0, 12),
    ) {
        let s = Matrix::from_vec(3, 4, s).unwrap();
        let t = Matrix::from_vec(3, 4, t).unwrap();
        let v = distill_loss(&s, &t, &DistillConfig::default()).unwrap().value;
        prop_assert!(v >= -1e-12);
    }
}
