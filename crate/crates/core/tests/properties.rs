use std::collections::{BTreeMap, BTreeSet};

use proptest::prelude::*;

use congrad::consensus::{consensus, deconflict_one, ConsensusGradient, TaskGradients};
use congrad::filtering::{congrad_score, quota, select, Direction, FilterConfig, FilterKind, FilterScore};
use congrad::lowrank::{cosine, flatten_concat, power_iterate, reconstruct, unflatten, DenseMatrix, FlatVector};
use congrad::preference::{lp_dpo_loss, sgd_step, DpoConfig, PreferencePair, ToyPolicy};

fn fv(v: Vec<f64>) -> FlatVector {
    FlatVector::new(v).unwrap()
}

fn vec_of(len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-10.0f64..10.0, len)
}

fn tasks(vs: &[Vec<f64>]) -> TaskGradients {
    let map: BTreeMap<String, FlatVector> = vs
        .iter()
        .enumerate()
        .map(|(i, v)| (format!("t{i}"), fv(v.clone())))
        .collect();
    TaskGradients::new(map).unwrap()
}

proptest! {
    #[test]
    fn cosine_is_scale_invariant(
        (a, b) in (1usize..30).prop_flat_map(|n| (vec_of(n), vec_of(n))),
        s in 0.001f64..1000.0,
        t in 0.001f64..1000.0,
    ) {
        prop_assume!(a.iter().any(|x| x.abs() > 1e-3) && b.iter().any(|x| x.abs() > 1e-3));
        let c = cosine(&a, &b).value;
        let sa: Vec<f64> = a.iter().map(|x| x * s).collect();
        let tb: Vec<f64> = b.iter().map(|x| x * t).collect();
        prop_assert!((cosine(&sa, &tb).value - c).abs() < 1e-9);
        prop_assert!((-1.0..=1.0).contains(&c));
    }

    #[test]
    fn flatten_round_trips(
        shapes in prop::collection::vec((1usize..6, 1usize..6), 1..5),
        seed in any::<u64>(),
    ) {
        let ms: Vec<DenseMatrix> = shapes
            .iter()
            .enumerate()
            .map(|(i, &(r, c))| DenseMatrix::random_normal(r, c, seed.wrapping_add(i as u64)))
            .collect();
        let flat = flatten_concat(&ms).unwrap();
        prop_assert_eq!(flat.len(), shapes.iter().map(|(r, c)| r * c).sum::<usize>());
        prop_assert_eq!(unflatten(&flat, &shapes).unwrap(), ms);
    }

    #[test]
    fn consensus_without_conflict_is_the_plain_sum(
        vs in (2usize..6, 1usize..20).prop_flat_map(|(k, n)| prop::collection::vec(prop::collection::vec(0.0f64..5.0, n), k)),
        seed in any::<u64>(),
    ) {
        let out = consensus(&tasks(&vs), seed).unwrap();
        let mut sum = vec![0.0; vs[0].len()];
        for v in &vs {
            for (s, x) in sum.iter_mut().zip(v) {
                *s += x;
            }
        }
        prop_assert_eq!(out.gradient.vector.as_slice(), sum.as_slice());
        prop_assert_eq!(out.gradient.conflicts_resolved, 0);
    }

    #[test]
    fn two_task_projection_removes_conflict(
        (a, b) in (1usize..30).prop_flat_map(|n| (vec_of(n), vec_of(n))),
    ) {
        let (a, b) = (fv(a), fv(b));
        prop_assume!(b.norm() > 1e-3);
        let p = deconflict_one(&a, &[&b]).unwrap();
        prop_assert!(p.dot(&b) >= -1e-9 * a.norm() * b.norm());
        if a.dot(&b) >= 0.0 {
            prop_assert_eq!(p, a);
        }
    }

    #[test]
    fn select_matches_sort_oracle(
        raw in prop::collection::vec((0usize..3, -1.0f64..1.0), 1..60),
        num in 1usize..10,
        extra in 0usize..10,
        max in any::<bool>(),
    ) {
        let rho = num as f64 / (num + extra) as f64;
        let direction = if max { Direction::Max } else { Direction::Min };
        let scores: Vec<FilterScore> = raw
            .iter()
            .enumerate()
            .map(|(i, &(l, s))| FilterScore {
                sample_id: i,
                language: format!("l{l}"),
                // coarse scores force ties
                score: (s * 4.0).round() / 4.0,
                kind: FilterKind::Congrad,
            })
            .collect();
        let cfg = FilterConfig { retain_fraction: rho, direction, kind: FilterKind::Congrad, seed: 0 };
        let kept = select(&scores, &cfg).unwrap();
        for (lang, ids) in &kept {
            let mut own: Vec<&FilterScore> = scores.iter().filter(|s| &s.language == lang).collect();
            own.sort_by(|a, b| {
                let o = a.score.partial_cmp(&b.score).unwrap();
                (if max { o.reverse() } else { o }).then(a.sample_id.cmp(&b.sample_id))
            });
            let k = (num * own.len()).div_ceil(num + extra);
            prop_assert_eq!(quota(rho, own.len()), k);
            let want: BTreeSet<usize> = own.iter().take(k).map(|s| s.sample_id).collect();
            prop_assert_eq!(ids, &want);
        }
    }

    #[test]
    fn max_and_min_are_dual_under_negation(
        raw in prop::collection::vec(-1.0f64..1.0, 1..40),
        num in 1usize..5,
    ) {
        let rho = num as f64 / 5.0;
        let mk = |sign: f64| -> Vec<FilterScore> {
            raw.iter()
                .enumerate()
                .map(|(i, &s)| FilterScore { sample_id: i, language: "x".into(), score: sign * s, kind: FilterKind::Congrad })
                .collect()
        };
        let max = FilterConfig { retain_fraction: rho, direction: Direction::Max, ..FilterConfig::default() };
        let min = FilterConfig { direction: Direction::Min, ..max };
        prop_assert_eq!(select(&mk(1.0), &max).unwrap(), select(&mk(-1.0), &min).unwrap());
    }

    #[test]
    fn congrad_score_is_a_bounded_cosine(
        (g, c) in (1usize..20).prop_flat_map(|n| (vec_of(n), vec_of(n))),
    ) {
        let cons = ConsensusGradient { vector: fv(c), conflicts_resolved: 0, language_count: 1 };
        let s = congrad_score(&fv(g), &cons).unwrap();
        prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&s));
    }

    #[test]
    fn loss_is_positive_and_falls_with_the_margin(
        seed in any::<u64>(),
        beta in 0.1f64..3.0,
        alpha in 0.0f64..0.05,
    ) {
        let policy = ToyPolicy::random(2, 5, 4, 1.0, seed).unwrap();
        let reference = ToyPolicy::random(2, 5, 4, 1.0, seed ^ 1).unwrap();
        let pair = PreferencePair {
            language: "x".into(),
            prompt_id: 1,
            chosen: vec![0, 1, 2],
            rejected: vec![3, 4],
            chosen_score: 5,
            rejected_score: 2,
        };
        let cfg = DpoConfig { beta, alpha };
        let before = lp_dpo_loss(&policy, &reference, &pair, &cfg).unwrap();
        prop_assert!(before > 0.0);
        // raising the chosen transitions raises the margin
        let mut up = policy.clone();
        for (r, c) in [(0usize, 1usize), (1, 2)] {
            let v = up.bigram().get(r, c);
            up.bigram_mut().set(r, c, v + 0.5);
        }
        let v = up.first_token().get(1, 0);
        up.first_token_mut().set(1, 0, v + 0.5);
        let after = lp_dpo_loss(&up, &reference, &pair, &cfg).unwrap();
        prop_assert!(after < before);
    }

    #[test]
    fn sgd_keeps_distributions_normalized(seed in any::<u64>(), lr in 0.0f64..5.0) {
        let policy = ToyPolicy::random(3, 6, 5, 1.0, seed).unwrap();
        let grad = fv(DenseMatrix::random_normal(1, policy.num_params(), seed ^ 7).into_vec());
        let next = sgd_step(&policy, &grad, lr).unwrap();
        for p in 0..3 {
            let s: f64 = next.next_token_probs(p, None).iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
        }
        for t in 0..6u32 {
            let s: f64 = next.next_token_probs(0, Some(t as _)).iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn consensus_is_stable_across_projection_orders() {
    // five tasks that share a direction and partly conflict
    let dim = 200;
    let shared = DenseMatrix::random_normal(1, dim, 1).into_vec();
    let vs: Vec<Vec<f64>> = (0..5)
        .map(|i| {
            let noise = DenseMatrix::random_normal(1, dim, 100 + i).into_vec();
            shared.iter().zip(&noise).map(|(s, n)| s + 0.8 * n).collect()
        })
        .collect();
    let t = tasks(&vs);
    let outs: Vec<FlatVector> = (0..10).map(|s| consensus(&t, s).unwrap().gradient.vector).collect();
    for o in &outs[1..] {
        let c = cosine(outs[0].as_slice(), o.as_slice()).value;
        assert!(c >= 0.95, "cosine {c} between orderings");
    }
}

#[test]
fn reconstruction_error_falls_with_rank() {
    let m = DenseMatrix::random_normal(40, 30, 9);
    let mut last = f64::INFINITY;
    for r in [1, 2, 4, 8, 16, 30] {
        let approx = reconstruct(&power_iterate(&m, r, 4, 3).unwrap());
        let mut d = approx;
        d.axpy(-1.0, &m);
        let err = d.frobenius_norm() / m.frobenius_norm();
        assert!(err <= last + 1e-9, "rank {r}: {err} > {last}");
        last = err;
    }
    assert!(last < 1e-9, "full rank error {last}");
}
