mod common;

use common::{brute_force, max_abs_diff, random_graph, random_matrix};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use seqcl::fb::forward_backward;
use seqcl::graph::{build_denominator_graph, build_numerator_graph, estimate_bigram_lm, with_self_loops};
use seqcl::losses::{denlwf, estimate_fisher, ewc_penalty, lfmmi, lwf};
use seqcl::net::Architecture;
use seqcl::synth::{Split, Utterance};
use seqcl::{ClSnapshot, Graph, Matrix, ModelParams};

fn den_graph(p: usize) -> Graph {
    let lm = estimate_bigram_lm(&[vec![0, 1, 2], vec![2, 0], vec![1, 2, 1, 0]][..], p, 0.7).unwrap();
    build_denominator_graph(&with_self_loops(&lm, 0.35).unwrap()).unwrap()
}

#[test]
fn lfmmi_matches_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let den = den_graph(3);
    for _ in 0..50 {
        let t = rng.random_range(3..=5);
        let labels: Vec<usize> = (0..rng.random_range(1..=3)).map(|_| rng.random_range(0..3)).collect();
        let num = build_numerator_graph(&labels, 3, true).unwrap();
        let e = random_matrix(&mut rng, t, 3, -2.0, 2.0);
        let (num_total, num_gamma) = brute_force(&num, &e).unwrap();
        let (den_total, den_gamma) = brute_force(&den, &e).unwrap();
        let out = lfmmi(&num, &den, &e).unwrap();
        assert!((out.objective - (num_total - den_total)).abs() < 1e-9);
        let want: Vec<f64> = num_gamma.as_slice().iter().zip(den_gamma.as_slice()).map(|(a, b)| a - b).collect();
        assert!(max_abs_diff(out.grad.as_slice(), &want) < 1e-9);
    }
}

#[test]
fn denlwf_matches_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(32);
    for _ in 0..100 {
        let g = random_graph(&mut rng, 4, 3);
        let p = g.num_labels();
        let t = rng.random_range(1..=4);
        let e = random_matrix(&mut rng, t, p, -2.0, 1.0);
        let Some((total, gamma_den)) = brute_force(&g, &e) else {
            continue;
        };
        // any nonnegative reference works for the algebra; use a random one
        let gamma_src = random_matrix(&mut rng, t, p, 0.0, 1.0);
        let alpha = rng.random_range(0.1..2.0);
        let cross: f64 = gamma_src.as_slice().iter().zip(e.as_slice()).map(|(a, b)| a * b).sum();

        let out = denlwf(&g, &e, &gamma_src, alpha, true).unwrap();
        assert!((out.objective - alpha * (cross - total)).abs() < 1e-9);
        let want: Vec<f64> =
            gamma_src.as_slice().iter().zip(gamma_den.as_slice()).map(|(s, d)| alpha * (s - d)).collect();
        assert!(max_abs_diff(out.grad.as_slice(), &want) < 1e-9);

        let control = denlwf(&g, &e, &gamma_src, alpha, false).unwrap();
        assert!((control.objective - alpha * cross).abs() < 1e-9);
        let want: Vec<f64> = gamma_src.as_slice().iter().map(|s| alpha * s).collect();
        assert!(max_abs_diff(control.grad.as_slice(), &want) < 1e-12);
    }
}

#[test]
fn denlwf_gradient_vanishes_at_the_source() {
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let den = den_graph(3);
    for _ in 0..50 {
        let t = rng.random_range(2..=8);
        let e = random_matrix(&mut rng, t, 3, -3.0, 3.0);
        let gamma_src = forward_backward(&den, &e).unwrap().occupancies;
        let out = denlwf(&den, &e, &gamma_src, 0.6, true).unwrap();
        assert!(out.grad.max_abs() < 1e-9);
    }
}

#[test]
fn lwf_matches_direct_formula() {
    let mut rng = ChaCha8Rng::seed_from_u64(34);
    for _ in 0..50 {
        let (t, p) = (rng.random_range(1..=5), rng.random_range(2..=5));
        let e = random_matrix(&mut rng, t, p, -4.0, 4.0);
        let raw = random_matrix(&mut rng, t, p, 0.0, 1.0);
        let y_src = Matrix::from_fn(t, p, |i, j| raw[(i, j)] / raw.row(i).iter().sum::<f64>());
        let alpha = rng.random_range(0.1..2.0);
        let mut want_obj = 0.0;
        let mut want_grad = Matrix::zeros(t, p);
        for i in 0..t {
            let z: f64 = e.row(i).iter().map(|v| v.exp()).sum();
            for j in 0..p {
                let y = e[(i, j)].exp() / z;
                want_obj += y_src[(i, j)] * y.ln();
                want_grad[(i, j)] = alpha * (y_src[(i, j)] - y);
            }
        }
        let out = lwf(&e, &y_src, alpha).unwrap();
        assert!((out.objective - alpha * want_obj).abs() < 1e-9);
        assert!(max_abs_diff(out.grad.as_slice(), want_grad.as_slice()) < 1e-12);
    }
}

#[test]
fn ewc_matches_elementwise_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(35);
    let n = 17;
    let theta: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let snapshots: Vec<ClSnapshot> = (0..3)
        .map(|d| {
            let params = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let fisher = (0..n).map(|_| rng.random_range(0.0..3.0)).collect();
            ClSnapshot::new(d, params, fisher).unwrap()
        })
        .collect();
    let alpha = 2.5;
    let mut want_obj = 0.0;
    let mut want_grad = vec![0.0; n];
    for s in &snapshots {
        for j in 0..n {
            want_obj -= alpha * s.fisher[j] * (s.params[j] - theta[j]).powi(2);
            want_grad[j] += 2.0 * alpha * s.fisher[j] * (s.params[j] - theta[j]);
        }
    }
    let (obj, grad) = ewc_penalty(&theta, &snapshots, alpha).unwrap();
    assert!((obj - want_obj).abs() < 1e-10);
    assert!(max_abs_diff(&grad, &want_grad) < 1e-12);

    let (zero, zero_grad) = ewc_penalty(&theta, &snapshots, 0.0).unwrap();
    assert_eq!(zero, 0.0);
    assert!(zero_grad.iter().all(|&g| g == 0.0));
}

#[test]
fn fisher_matches_two_utterance_oracle() {
    let arch = Architecture {
        feature_dim: 2,
        context_radius: 1,
        hidden_dims: vec![3],
        num_labels: 3,
    };
    let model = ModelParams::xavier(arch, 9).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(36);
    let utts: Vec<Utterance> = [vec![0, 2], vec![1, 0, 2]]
        .into_iter()
        .enumerate()
        .map(|(i, labels)| Utterance {
            id: format!("u{i}"),
            domain: "X".into(),
            split: Split::Train,
            features: random_matrix(&mut rng, 5, 2, -1.0, 1.0),
            labels,
        })
        .collect();
    let den = den_graph(3);
    let num_builder = |l: &[usize]| build_numerator_graph(l, 3, true);

    // per-utterance gradient by central differences of the LF-MMI objective
    let h = 1e-6;
    let objective = |m: &ModelParams, u: &Utterance| {
        let num = num_builder(&u.labels).unwrap();
        lfmmi(&num, &den, &m.emissions(&u.features).unwrap()).unwrap().objective
    };
    let mut raw = vec![0.0; model.len()];
    for u in &utts {
        for (j, r) in raw.iter_mut().enumerate() {
            let mut plus = model.clone();
            plus.values_mut()[j] += h;
            let mut minus = model.clone();
            minus.values_mut()[j] -= h;
            let g = (objective(&plus, u) - objective(&minus, u)) / (2.0 * h);
            *r += g * g / utts.len() as f64;
        }
    }
    let mut sorted = raw.clone();
    sorted.sort_by(f64::total_cmp);
    let median = sorted[(sorted.len() - 1) / 2];

    let est = estimate_fisher(&model, &utts, &den, num_builder).unwrap();
    assert!(est.normalized);
    assert_eq!(est.utterances_used, 2);
    assert!((est.raw_median - median).abs() <= 1e-6 * median);
    for (j, (got, want)) in est.diagonal.iter().zip(&raw).enumerate() {
        assert!((got - want / median).abs() <= 1e-5 * (want / median).max(1e-3), "parameter {j}");
    }
}
