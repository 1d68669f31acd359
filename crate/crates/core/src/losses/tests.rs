use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::augment::weight_matrices;
use crate::autograd::{Graph, Tensor};
use crate::config::Patch;

fn unit(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

fn units(rng: &mut ChaCha8Rng, rows: usize, d: usize) -> Vec<f64> {
    (0..rows).flat_map(|_| unit(rng, d)).collect()
}

fn random_weights(rng: &mut ChaCha8Rng, b: usize) -> (WeightMatrix, WeightMatrix) {
    let betas: Vec<f64> = (0..b).map(|_| rng.gen_range(0.1..1.0)).collect();
    let partners: Vec<usize> = (0..b).map(|i| if b == 1 { 0 } else { (i + 1 + rng.gen_range(0..b - 1)) % b }).collect();
    weight_matrices(&betas, &partners).unwrap()
}

/// Direct evaluation without max subtraction or log-sum-exp.
fn naive_ce(sim: &[f64], wv: &WeightMatrix, wc: &WeightMatrix, tau: f64) -> f64 {
    let b = wv.n;
    let mut v2c = 0.0;
    let mut c2v = 0.0;
    for i in 0..b {
        for j in 0..b {
            let row_den: f64 = (0..b).map(|k| (sim[i * b + k] / tau).exp()).sum();
            v2c += wv.get(i, j) * ((sim[i * b + j] / tau).exp() / row_den).ln();
            let col_den: f64 = (0..b).map(|k| (sim[k * b + i] / tau).exp()).sum();
            c2v += wc.get(i, j) * ((sim[j * b + i] / tau).exp() / col_den).ln();
        }
    }
    -(v2c + c2v) / b as f64
}

#[test]
fn softmax_examples() {
    assert_eq!(scaled_softmax(&[0.0, 0.0], 1.0).unwrap(), vec![0.5, 0.5]);
    let s = scaled_softmax(&[1.0, 0.0], 1.0).unwrap();
    let e = std::f64::consts::E;
    assert!((s[0] - e / (e + 1.0)).abs() < 1e-15);
    assert!((s[0] - 0.7311).abs() < 1e-4 && (s[1] - 0.2689).abs() < 1e-4);
    assert!(matches!(scaled_softmax(&[f64::NAN], 1.0), Err(Error::Numeric(_))));
    assert!(scaled_softmax(&[1.0], 0.0).is_err());
}

proptest! {
    #[test]
    fn softmax_sums_to_one(x in prop::collection::vec(-50.0f64..50.0, 1..20), tau in 0.01f64..10.0) {
        let s = scaled_softmax(&x, tau).unwrap();
        prop_assert!((s.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(s.iter().all(|&p| p >= 0.0));
    }
}

#[test]
fn grounding_single_group_is_a_dot_product() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let g = unit(&mut rng, 5);
    let n = unit(&mut rng, 5);
    let want: f64 = g.iter().zip(&n).map(|(a, b)| a * b).sum();
    assert!((grounding_similarity(&g, &n, 5, 0.07).unwrap() - want).abs() < 1e-12);
}

#[test]
fn grounding_two_group_example() {
    let e = std::f64::consts::E;
    let (w0, w1) = (e / (e + 1.0), 1.0 / (e + 1.0));
    let want = w0 / (w0 * w0 + w1 * w1).sqrt();
    let got = grounding_similarity(&[1.0, 0.0, 0.0, 1.0], &[1.0, 0.0], 2, 1.0).unwrap();
    assert!((got - want).abs() < 1e-12);
    assert!((got - 0.9385).abs() < 1e-4);
}

#[test]
fn grounding_orthogonal_noun_scores_zero() {
    let g = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0];
    let n = [0.0, 0.0, 1.0];
    assert!(grounding_similarity(&g, &n, 3, 0.07).unwrap().abs() < 1e-15);
}

#[test]
fn batch_of_one_losses_vanish() {
    let w = WeightMatrix::identity(1);
    assert_eq!(grounding_loss(&[0.3], &w, &w, 0.07).unwrap(), 0.0);
    let v = vec![vec![1.0, 0.0]];
    assert_eq!(global_contrastive_loss(&v, &v, &w, &w, 0.07).unwrap(), 0.0);
}

#[test]
fn confident_grounding_goes_to_zero() {
    let w = WeightMatrix::identity(3);
    let mut last = f64::INFINITY;
    for margin in [1.0, 5.0, 20.0, 80.0] {
        let mut g = vec![0.0; 9];
        (0..3).for_each(|i| g[i * 4] = margin);
        let l = grounding_loss(&g, &w, &w, 1.0).unwrap();
        assert!(l < last);
        last = l;
    }
    assert!(last < 1e-30);
}

#[test]
fn grounding_loss_matches_naive_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..10 {
        let gm: Vec<f64> = (0..9).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let (wv, wc) = random_weights(&mut rng, 3);
        let got = grounding_loss(&gm, &wv, &wc, 0.5).unwrap();
        assert!((got - naive_ce(&gm, &wv, &wc, 0.5)).abs() < 1e-10);
    }
}

#[test]
fn contrastive_orthonormal_example() {
    let f = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
    let w = WeightMatrix::identity(2);
    let e = std::f64::consts::E;
    let per_dir = -(e / (e + 1.0)).ln();
    let l = global_contrastive_loss(&f, &f, &w, &w, 1.0).unwrap();
    assert!((l - 2.0 * per_dir).abs() < 1e-12);
    assert!((per_dir - 0.3133).abs() < 1e-4 && (l - 0.6266).abs() < 1e-4);
}

#[test]
fn identity_weights_give_infonce() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let b = 4;
    let fv: Vec<Vec<f64>> = (0..b).map(|_| unit(&mut rng, 6)).collect();
    let fc: Vec<Vec<f64>> = (0..b).map(|_| unit(&mut rng, 6)).collect();
    let tau = 0.07;
    let w = WeightMatrix::identity(b);
    let mut info = 0.0;
    for i in 0..b {
        let s = |a: &[f64], c: &[f64]| a.iter().zip(c).map(|(x, y)| x * y).sum::<f64>() / tau;
        let row: Vec<f64> = (0..b).map(|j| s(&fv[i], &fc[j])).collect();
        let col: Vec<f64> = (0..b).map(|j| s(&fv[j], &fc[i])).collect();
        let lse = |v: &[f64]| v.iter().map(|x| x.exp()).sum::<f64>().ln();
        info += (lse(&row) - row[i]) + (lse(&col) - col[i]);
    }
    info /= b as f64;
    let got = global_contrastive_loss(&fv, &fc, &w, &w, tau).unwrap();
    assert!((got - info).abs() < 1e-10);
}

#[test]
fn cross_entropy_is_bounded_by_target_entropy() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..20 {
        let b = 4;
        let sim: Vec<f64> = (0..b * b).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let (wv, wc) = random_weights(&mut rng, b);
        let (v2c, _) = weighted_cross_entropy(&sim, &wv, &wc, 0.3).unwrap();
        let h: f64 = (0..b)
            .map(|i| -wv.row(i).iter().filter(|&&w| w > 0.0).map(|w| w * w.ln()).sum::<f64>())
            .sum::<f64>()
            / b as f64;
        assert!(v2c >= h - 1e-12);
    }
    // equality when the softmax rows equal the targets
    let wv = weight_matrices(&[0.75, 0.5], &[1, 0]).unwrap().0;
    let sim: Vec<f64> = wv.data.iter().map(|w| w.ln()).collect();
    let (v2c, _) = weighted_cross_entropy(&sim, &wv, &wv.transpose(), 1.0).unwrap();
    let h = -(0.75f64 * 0.75f64.ln() + 0.25 * 0.25f64.ln() + 2.0 * 0.5 * 0.5f64.ln()) / 2.0;
    assert!((v2c - h).abs() < 1e-12);
}

#[test]
fn temperature_preserves_ranking() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x: Vec<f64> = (0..10).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let am = |v: Vec<f64>| (0..v.len()).max_by(|&a, &b| v[a].total_cmp(&v[b])).unwrap();
    let base = am(scaled_softmax(&x, 1.0).unwrap());
    for tau in [0.05, 0.07] {
        assert_eq!(am(scaled_softmax(&x, tau).unwrap()), base);
    }
}

#[test]
fn losses_are_permutation_invariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let b = 4;
    let fv: Vec<Vec<f64>> = (0..b).map(|_| unit(&mut rng, 3)).collect();
    let fc: Vec<Vec<f64>> = (0..b).map(|_| unit(&mut rng, 3)).collect();
    let betas = [0.25, 0.5, 0.75, 0.5];
    let partners = [2, 0, 3, 1];
    let (wv, wc) = weight_matrices(&betas, &partners).unwrap();
    let base = global_contrastive_loss(&fv, &fc, &wv, &wc, 0.07).unwrap();
    let perm = [3, 1, 0, 2];
    let pv: Vec<Vec<f64>> = perm.iter().map(|&i| fv[i].clone()).collect();
    let pc: Vec<Vec<f64>> = perm.iter().map(|&i| fc[i].clone()).collect();
    let pwv = wv.permuted(&perm);
    let got = global_contrastive_loss(&pv, &pc, &pwv, &pwv.transpose(), 0.07).unwrap();
    assert!((got - base).abs() < 1e-10);
}

#[test]
fn clip_pool_examples() {
    let grid = PatchGrid::new(8, 32, 32, Patch::new(2, 8, 8)).unwrap();
    let d = 3;
    let z: Vec<f64> = (0..64).flat_map(|_| [0.5, -1.0, 2.0]).collect();
    let c = clip_pool(&z, &grid, d, 2).unwrap();
    assert_eq!(c.len(), 4 * d);
    for row in c.chunks(d) {
        assert_eq!(row, &[0.5, -1.0, 2.0]);
    }
    assert!(matches!(clip_pool(&z, &grid, d, 3), Err(Error::Config(_))));
    assert!(matches!(clip_pool(&z, &grid, d, 1), Err(Error::Config(_))));
}

#[test]
fn clip_pool_ignores_spatial_order() {
    let grid = PatchGrid::new(8, 32, 32, Patch::new(2, 8, 8)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let d = 2;
    let z: Vec<f64> = (0..64 * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mut shuffled = z.clone();
    // reverse the spatial positions of every temporal row
    for tr in 0..4 {
        for p in 0..16 {
            let src = (tr * 16 + 15 - p) * d;
            let dst = (tr * 16 + p) * d;
            shuffled[dst..dst + d].copy_from_slice(&z[src..src + d]);
        }
    }
    let a = clip_pool(&z, &grid, d, 2).unwrap();
    let b = clip_pool(&shuffled, &grid, d, 2).unwrap();
    for (x, y) in a.iter().zip(&b) {
        assert!((x - y).abs() < 1e-14);
    }
}

#[test]
fn temporal_assignment_example() {
    let mask = ClipMask(vec![false, true]);
    let a = temporal_assignment(&[0.0, 1.0, 1.0, 0.0], 2, &mask).unwrap();
    // second clip (1, 0): centres z_b = (0, 1), z_f = (1, 0)
    assert!((a[1][0] - 0.2689).abs() < 1e-4 && (a[1][1] - 0.7311).abs() < 1e-4);
    for row in &a {
        assert!((row[0] + row[1] - 1.0).abs() < 1e-12);
    }
    assert!(temporal_assignment(&[0.0, 1.0, 1.0, 0.0], 2, &ClipMask(vec![true, true])).is_err());
}

#[test]
fn temporal_loss_examples() {
    let masks = vec![ClipMask(vec![false, true, true, false])];
    let perfect = vec![vec![[1.0, 0.0], [0.0, 1.0], [0.0, 1.0], [1.0, 0.0]]];
    assert_eq!(temporal_grouping_loss(&perfect, &masks).unwrap(), 0.0);
    // identical centres: every row is (0.5, 0.5)
    let z = vec![1.0, 2.0, 1.0, 2.0, 1.0, 2.0, 1.0, 2.0];
    let a = temporal_assignment(&z, 2, &masks[0]).unwrap();
    assert_eq!(temporal_grouping_loss(&[a], &masks).unwrap(), 0.25);
}

#[test]
fn temporal_loss_matches_scalar_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let masks = vec![ClipMask(vec![true, false, false]), ClipMask(vec![false, true, true])];
    let d = 4;
    let mut a = Vec::new();
    let mut oracle = 0.0;
    for m in &masks {
        let z: Vec<f64> = (0..3 * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let ai = temporal_assignment(&z, d, m).unwrap();
        // oracle: centres and softmax written out per element
        let cen = |fg: bool| -> Vec<f64> {
            let idx: Vec<usize> = (0..3).filter(|&j| m.0[j] == fg).collect();
            (0..d).map(|k| idx.iter().map(|&j| z[j * d + k]).sum::<f64>() / idx.len() as f64).collect()
        };
        let (zb, zf) = (cen(false), cen(true));
        let mut se = 0.0;
        for j in 0..3 {
            let lb: f64 = (0..d).map(|k| z[j * d + k] * zb[k]).sum();
            let lf: f64 = (0..d).map(|k| z[j * d + k] * zf[k]).sum();
            let pb = lb.exp() / (lb.exp() + lf.exp());
            let pf = 1.0 - pb;
            let (tb, tf) = if m.0[j] { (0.0, 1.0) } else { (1.0, 0.0) };
            se += (pb - tb).powi(2) + (pf - tf).powi(2);
        }
        oracle += se / 6.0;
        a.push(ai);
    }
    oracle /= 2.0;
    assert!((temporal_grouping_loss(&a, &masks).unwrap() - oracle).abs() < 1e-12);
}

#[test]
fn total_loss_weighting() {
    let p = LossParts {
        temporal: 0.5,
        grounding: 1.5,
        contrastive: 2.0,
    };
    assert_eq!(total_loss(&p, &LossWeights::default()).unwrap(), 4.0);
    let w = LossWeights {
        temporal: 0.0,
        grounding: 0.0,
        contrastive: 1.0,
    };
    assert_eq!(total_loss(&p, &w).unwrap(), 2.0);
    let w = LossWeights {
        temporal: 1.0,
        grounding: 0.0,
        contrastive: 1.0,
    };
    assert_eq!(total_loss(&p, &w).unwrap(), 2.5);
    let bad = LossParts {
        grounding: f64::NAN,
        ..p
    };
    match total_loss(&bad, &LossWeights::default()) {
        Err(Error::Numeric(msg)) => assert!(msg.contains("grounding")),
        other => panic!("{other:?}"),
    }
}

#[test]
fn tape_losses_match_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (b, m, k, dc) = (3, 4, 2, 5);
    let groups: Vec<Vec<f64>> = (0..b).map(|_| units(&mut rng, m, dc)).collect();
    let nouns: Vec<Vec<f64>> = (0..b).map(|_| units(&mut rng, k, dc)).collect();
    let (wv, wc) = random_weights(&mut rng, b);
    let tau = 0.2;
    let gm = grounding_matrix(&groups, &nouns, dc, tau).unwrap();
    let want = grounding_loss(&gm, &wv, &wc, tau).unwrap();

    let mut g: Graph<f64> = Graph::new();
    let gv = g.constant(Tensor::from_f64(&[b, m, dc], &groups.concat()));
    let nv = g.constant(Tensor::from_f64(&[b * k, dc], &nouns.concat()));
    let gmv = graph::grounding_matrix(&mut g, gv, nv, k, tau).unwrap();
    for (x, y) in g.value(gmv).data().iter().zip(&gm) {
        assert!((x - y).abs() < 1e-12);
    }
    let l = graph::weighted_cross_entropy(&mut g, gmv, &wv, &wc, tau).unwrap();
    assert!((g.value(l).data()[0] - want).abs() < 1e-10);

    let fv: Vec<Vec<f64>> = (0..b).map(|_| unit(&mut rng, dc)).collect();
    let fc: Vec<Vec<f64>> = (0..b).map(|_| unit(&mut rng, dc)).collect();
    let want = global_contrastive_loss(&fv, &fc, &wv, &wc, tau).unwrap();
    let a = g.constant(Tensor::from_f64(&[b, dc], &fv.concat()));
    let c = g.constant(Tensor::from_f64(&[b, dc], &fc.concat()));
    let l = graph::global_contrastive(&mut g, a, c, &wv, &wc, tau).unwrap();
    assert!((g.value(l).data()[0] - want).abs() < 1e-10);
}

#[test]
fn tape_temporal_loss_matches_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let grid = PatchGrid::new(8, 16, 16, Patch::new(2, 8, 8)).unwrap();
    let n = grid.num_tokens();
    let d = 3;
    let masks = vec![
        ClipMask(vec![false, true, true, false]),
        ClipMask(vec![true, false, false, false]),
    ];
    let z: Vec<f64> = (0..2 * n * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mut a = Vec::new();
    for (i, m) in masks.iter().enumerate() {
        let zc = clip_pool(&z[i * n * d..(i + 1) * n * d], &grid, d, 2).unwrap();
        a.push(temporal_assignment(&zc, d, m).unwrap());
    }
    let want = temporal_grouping_loss(&a, &masks).unwrap();
    let mut g: Graph<f64> = Graph::new();
    let zv = g.constant(Tensor::from_f64(&[2, n, d], &z));
    let l = graph::temporal_grouping(&mut g, zv, &grid, 2, &masks).unwrap().unwrap();
    assert!((g.value(l).data()[0] - want).abs() < 1e-12);

    let all_fg = vec![ClipMask::all_foreground(4); 2];
    assert!(graph::temporal_grouping(&mut g, zv, &grid, 2, &all_fg).unwrap().is_none());
}
