use forgetbench::autodiff::Graph;
use forgetbench::corpus::TokenId;
use forgetbench::metrics::{auc, ngram_overlap, rouge_l_recall};
use forgetbench::mrd::{hutchinson_trace, QuadraticScorer, TraceConfig};
use forgetbench::stats::{ranks, spearman};
use forgetbench::tensor::{gaussian_perturbation, Tensor};
use forgetbench::unlearn::{compute_weights, Weighting};
use forgetbench::ExecMode;
use proptest::prelude::*;

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-1.5f64..1.5, rows * cols)
}

/// sum(tanh(A·B) ⊙ C) through the tape.
fn tape_value_grad(a: &[f64], b: &[f64], c: &[f64], n: usize, k: usize, m: usize) -> (f64, Vec<f64>) {
    let mut g = Graph::new();
    let pa = g.param(Tensor::matrix(n, k, a.to_vec()).unwrap());
    let pb = g.constant(Tensor::matrix(k, m, b.to_vec()).unwrap());
    let pc = g.constant(Tensor::matrix(n, m, c.to_vec()).unwrap());
    let ab = g.matmul(pa, pb);
    let t = g.tanh(ab);
    let w = g.mul(t, pc);
    let s = g.sum(w);
    let v = g.value(s).unwrap();
    let grads = g.backward(s).unwrap();
    (v, grads.get(pa).unwrap().to_vec())
}

fn direct_value(a: &[f64], b: &[f64], c: &[f64], n: usize, k: usize, m: usize) -> f64 {
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..m {
            let dot: f64 = (0..k).map(|p| a[i * k + p] * b[p * m + j]).sum();
            total += dot.tanh() * c[i * m + j];
        }
    }
    total
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn tape_gradient_matches_central_differences(
        a in matrix(3, 4), b in matrix(4, 2), c in matrix(3, 2)
    ) {
        let (v, grad) = tape_value_grad(&a, &b, &c, 3, 4, 2);
        prop_assert!((v - direct_value(&a, &b, &c, 3, 4, 2)).abs() < 1e-12);
        let h = 1e-6;
        for j in 0..a.len() {
            let mut up = a.clone();
            up[j] += h;
            let mut down = a.clone();
            down[j] -= h;
            let fd = (direct_value(&up, &b, &c, 3, 4, 2) - direct_value(&down, &b, &c, 3, 4, 2)) / (2.0 * h);
            prop_assert!((fd - grad[j]).abs() <= 1e-7 * (1.0 + fd.abs()), "coordinate {j}: {fd} vs {}", grad[j]);
        }
    }

    #[test]
    fn softmax_rows_are_distributions_and_shift_invariant(x in matrix(3, 5), shift in -20.0f64..20.0) {
        let mut g = Graph::new();
        let a = g.constant(Tensor::matrix(3, 5, x.clone()).unwrap());
        let s = g.softmax(a, false);
        let shifted: Vec<f64> = x.iter().map(|v| v + shift).collect();
        let b = g.constant(Tensor::matrix(3, 5, shifted).unwrap());
        let t = g.softmax(b, false);
        let (p, q) = (g.tensor(s).data().to_vec(), g.tensor(t).data().to_vec());
        for r in 0..3 {
            let row = &p[r * 5..(r + 1) * 5];
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|&v| v > 0.0));
        }
        for (u, v) in p.iter().zip(&q) {
            prop_assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn hutchinson_is_exact_for_diagonal_hessians(
        diag in prop::collection::vec(-3.0f64..3.0, 1..20), probes in 1usize..4, seed: u64
    ) {
        let d = diag.len();
        let scorer = QuadraticScorer::diagonal(&diag, -1.0, vec![0.25; d], 3).unwrap();
        let tr = hutchinson_trace(&scorer, &[2, 2, 2, 2], &TraceConfig { probes, fd_step: 1e-3 }, seed, ExecMode::Sequential).unwrap();
        for t in tr.per_token {
            prop_assert!((t - scorer.trace()).abs() < 1e-8 * (1.0 + scorer.trace().abs()));
        }
    }

    #[test]
    fn perturbations_are_reproducible(d in 1usize..64, sigma in 1e-6f64..1.0, seed: u64) {
        let a = gaussian_perturbation(d, sigma, seed).unwrap();
        let b = gaussian_perturbation(d, sigma, seed).unwrap();
        prop_assert_eq!(a.delta, b.delta);
    }

    #[test]
    fn overlap_of_identical_sequences_is_one(x in prop::collection::vec(2u32..30, 3..20), n in 1usize..3) {
        let x: Vec<TokenId> = x.into_iter().map(|t| t as TokenId).collect();
        prop_assert_eq!(ngram_overlap(&x, &x, n).unwrap(), 1.0);
    }

    #[test]
    fn overlap_lies_in_unit_interval(
        a in prop::collection::vec(2u32..8, 2..15), b in prop::collection::vec(2u32..8, 2..15)
    ) {
        let a: Vec<TokenId> = a.into_iter().map(|t| t as TokenId).collect();
        let b: Vec<TokenId> = b.into_iter().map(|t| t as TokenId).collect();
        let v = ngram_overlap(&a, &b, 2).unwrap();
        prop_assert!((0.0..=1.0).contains(&v));
    }

    #[test]
    fn rouge_of_a_subsequence_is_its_length_ratio(
        r in prop::collection::vec(2u32..40, 1..25), keep in prop::collection::vec(any::<bool>(), 25)
    ) {
        let r: Vec<TokenId> = r.into_iter().map(|t| t as TokenId).collect();
        let sub: Vec<TokenId> = r.iter().zip(&keep).filter(|(_, k)| **k).map(|(t, _)| *t).collect();
        let got = rouge_l_recall(&r, &sub).unwrap();
        prop_assert!((got - sub.len() as f64 / r.len() as f64).abs() < 1e-12);
    }

    #[test]
    fn auc_is_invariant_under_monotone_maps(
        a in prop::collection::vec(-5.0f64..5.0, 1..20), b in prop::collection::vec(-5.0f64..5.0, 1..20)
    ) {
        let base = auc(&a, &b).unwrap();
        let f = |v: &f64| (0.7 * v).exp() + 3.0;
        let mapped = auc(&a.iter().map(f).collect::<Vec<_>>(), &b.iter().map(f).collect::<Vec<_>>()).unwrap();
        prop_assert!((base - mapped).abs() < 1e-12);
        prop_assert!((base + auc(&b, &a).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn spearman_is_rank_based(x in prop::collection::vec(-10.0f64..10.0, 3..30), y in prop::collection::vec(-10.0f64..10.0, 30)) {
        let y = &y[..x.len()];
        if let Ok(rho) = spearman(&x, y) {
            let mapped: Vec<f64> = x.iter().map(|v| v * v * v + 2.0 * v).collect();
            prop_assert!((rho - spearman(&mapped, y).unwrap()).abs() < 1e-12);
            prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&rho));
        }
        let n = x.len() as f64;
        prop_assert!((ranks(&x).iter().sum::<f64>() - n * (n + 1.0) / 2.0).abs() < 1e-9);
    }

    #[test]
    fn sampling_weights_are_distributions_in_mrd_order(mrd in prop::collection::vec(1e-6f64..10.0, 1..30)) {
        let w = compute_weights(&mrd, Weighting::MrdProportional).unwrap().per_sample;
        let inv = compute_weights(&mrd, Weighting::InverseMrdProportional).unwrap().per_sample;
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!((inv.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for i in 0..mrd.len() {
            for j in 0..mrd.len() {
                if mrd[i] > mrd[j] * (1.0 + 1e-9) {
                    prop_assert!(w[i] > w[j] && inv[i] < inv[j]);
                }
            }
        }
    }
}
