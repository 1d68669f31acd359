use super::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
}

/// Central-difference check of every input of `build`.
fn check(inputs: Vec<Tensor<f64>>, build: impl Fn(&mut Graph<f64>, &[Var]) -> Var) {
    let eval = |ins: &[Tensor<f64>]| {
        let mut g = Graph::new();
        let vars: Vec<Var> = ins.iter().map(|t| g.param(t.clone())).collect();
        let out = build(&mut g, &vars);
        (g, vars, out)
    };
    let (g, vars, out) = eval(&inputs);
    let grads = g.backward(out);
    let eps = 1e-6;
    for (i, t) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[i]).expect("missing grad").to_vec();
        for j in 0..t.len() {
            let mut plus = inputs.clone();
            plus[i].data_mut()[j] += eps;
            let mut minus = inputs.clone();
            minus[i].data_mut()[j] -= eps;
            let (gp, _, op) = eval(&plus);
            let (gm, _, om) = eval(&minus);
            let fd = (gp.value(op).data()[0] - gm.value(om).data()[0]) / (2.0 * eps);
            let a = analytic[j];
            let err = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-2);
            assert!(err < 1e-5, "input {i} elem {j}: analytic {a} vs fd {fd}");
        }
    }
}

/// Weighted sum so every output element gets a distinct cotangent.
fn probe(g: &mut Graph<f64>, v: Var) -> Var {
    let n = g.value(v).len();
    let w = Tensor::new(
        g.shape(v),
        (0..n).map(|i| ((i * 7 % 11) as f64 - 5.0) / 3.0).collect(),
    );
    let w = g.constant(w);
    let p = g.mul(v, w);
    g.sum_all(p)
}

#[test]
fn matmul_variants() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
        let a = random(if ta { &[2, 4, 3] } else { &[2, 3, 4] }, &mut rng);
        let b = random(if tb { &[2, 5, 4] } else { &[2, 4, 5] }, &mut rng);
        check(vec![a, b], |g, v| {
            let c = g.bmm(v[0], v[1], ta, tb);
            probe(g, c)
        });
        // shared right operand
        let a = random(if ta { &[3, 4, 3] } else { &[3, 3, 4] }, &mut rng);
        let b = random(if tb { &[5, 4] } else { &[4, 5] }, &mut rng);
        check(vec![a, b], |g, v| {
            let c = g.bmm(v[0], v[1], ta, tb);
            probe(g, c)
        });
        // shared left operand
        let a = random(if ta { &[4, 3] } else { &[3, 4] }, &mut rng);
        let b = random(if tb { &[2, 5, 4] } else { &[2, 4, 5] }, &mut rng);
        check(vec![a, b], |g, v| {
            let c = g.bmm(v[0], v[1], ta, tb);
            probe(g, c)
        });
    }
}

#[test]
fn elementwise_and_broadcast() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = random(&[3, 4], &mut rng);
    let b = random(&[3, 4], &mut rng);
    let c = random(&[4], &mut rng);
    check(vec![a, b, c], |g, v| {
        let x = g.add(v[0], v[1]);
        let y = g.sub(x, v[1]);
        let y = g.mul(y, v[1]);
        let y = g.add_bcast(y, v[2]);
        let y = g.mul_bcast(y, v[2]);
        let y = g.scale(y, 0.3);
        let y = g.add_scalar(y, 0.1);
        let y = g.gelu(y);
        let y = g.sqr(y);
        let y = g.add_scalar(y, 1.0);
        let y = g.log(y);
        let y = g.exp(y);
        probe(g, y)
    });
}

#[test]
fn softmax_family_and_norms() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = random(&[3, 5], &mut rng);
    let gain = random(&[5], &mut rng);
    let bias = random(&[5], &mut rng);
    check(vec![a, gain, bias], |g, v| {
        let x = g.layer_norm(v[0], v[1], v[2], 1e-5);
        let s = g.softmax(x);
        let l = g.log_softmax(v[0]);
        let n = g.l2_normalize(v[0]);
        let y = g.add(s, l);
        let y = g.add(y, n);
        probe(g, y)
    });
}

#[test]
fn reductions_gathers_and_layout() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let a = random(&[2, 3, 4], &mut rng);
    let s = Tensor::new(&[6], (0..6).map(|i| 1.5 + i as f64 * 0.25).collect());
    check(vec![a, s], |g, v| {
        let t = g.transpose(v[0]);
        let r = g.reshape(t, &[8, 3]);
        let m = g.row_mean(v[0], vec![vec![0, 2, 5], vec![], vec![1]], &[3, 4]);
        let sl = g.sum_last(m);
        let gr = g.gather_rows(r, &[7, 0, 7]);
        let dr = g.div_rows(v[0], v[1]);
        let c = g.clamp_min(dr, 0.0);
        let a = probe(g, gr);
        let b = probe(g, sl);
        let c = probe(g, c);
        let ab = g.add(a, b);
        g.add(ab, c)
    });
}

#[test]
fn attention_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let qkv = random(&[7, 12], &mut rng);
    check(vec![qkv], |g, v| {
        let o = g.attention(v[0], vec![(0, 3), (3, 4)], 2);
        probe(g, o)
    });
}

#[test]
fn attention_equals_unfused_composition() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (len, d) = (5, 4);
    let qkv = random(&[len, 3 * d], &mut rng);
    let mut g = Graph::new();
    let x = g.constant(qkv.clone());
    let fused = g.attention(x, vec![(0, len)], 1);
    let col = |c0: usize| {
        let data: Vec<f64> = (0..len)
            .flat_map(|r| qkv.row(r)[c0..c0 + d].to_vec())
            .collect();
        Tensor::new(&[len, d], data)
    };
    let q = g.constant(col(0));
    let k = g.constant(col(d));
    let vv = g.constant(col(2 * d));
    let s = g.bmm(q, k, false, true);
    let s = g.scale(s, 1.0 / (d as f64).sqrt());
    let p = g.softmax(s);
    let o = g.matmul(p, vv);
    for (a, b) in g.value(fused).data().iter().zip(g.value(o).data()) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn straight_through_is_hard_forward_soft_backward() {
    let mut g = Graph::<f64>::new();
    let x = g.param(Tensor::new(&[2, 3], vec![0.1, 0.7, 0.2, 0.5, 0.5, 0.0]));
    let h = g.straight_through(x);
    assert_eq!(g.value(h).data(), &[0.0, 1.0, 0.0, 1.0, 0.0, 0.0]);
    let s = probe(&mut g, h);
    let grads = g.backward(s);
    let gx = grads.get(x).unwrap();
    // identity backward: equals the probe weights
    let want: Vec<f64> = (0..6).map(|i| ((i * 7 % 11) as f64 - 5.0) / 3.0).collect();
    assert_eq!(gx, want.as_slice());
}

#[test]
fn constants_receive_no_gradient() {
    let mut g = Graph::<f64>::new();
    let c = g.constant(Tensor::new(&[2], vec![1.0, 2.0]));
    let p = g.param(Tensor::new(&[2], vec![3.0, 4.0]));
    let y = g.mul(c, p);
    let s = g.sum_all(y);
    let grads = g.backward(s);
    assert!(grads.get(c).is_none());
    assert_eq!(grads.get(p).unwrap(), &[1.0, 2.0]);
}

#[test]
fn zero_rows_normalize_to_zero() {
    let mut g = Graph::<f64>::new();
    let x = g.param(Tensor::new(&[2, 2], vec![0.0, 0.0, 3.0, 4.0]));
    let n = g.l2_normalize(x);
    assert_eq!(g.value(n).data(), &[0.0, 0.0, 0.6, 0.8]);
    let s = probe(&mut g, n);
    let grads = g.backward(s);
    assert_eq!(&grads.get(x).unwrap()[..2], &[0.0, 0.0]);
}
