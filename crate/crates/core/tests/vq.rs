use edge_ensemble::models::{grad_check, GradPath, Layer, MlpParams, SharedEncoder};
use edge_ensemble::numerics::{RngStream, Tensor};
use edge_ensemble::vq::{straight_through_grad, vq_losses, Codebook};
use proptest::prelude::*;

fn brute_force(book: &Codebook, row: &[f64]) -> usize {
    let mut best = (f64::INFINITY, 0);
    for i in 0..book.size() {
        let d: f64 = book.codeword(i).iter().zip(row).map(|(a, b)| (a - b).powi(2)).sum();
        if d < best.0 {
            best = (d, i);
        }
    }
    best.1
}

#[test]
fn quantize_matches_exhaustive_scan() {
    let mut rng = RngStream::new(21);
    let book = Codebook::random(16, 4, 200, &mut rng).unwrap();
    let rows: Vec<f64> = (0..200 * 4).map(|_| rng.uniform_range(-0.1, 0.1)).collect();
    let q = book.quantize(&Tensor::matrix(200, 4, rows.clone()).unwrap()).unwrap();
    for (i, row) in rows.chunks(4).enumerate() {
        assert_eq!(q.indices[i], brute_force(&book, row), "row {i}");
    }
}

#[test]
fn loss_terms_match_direct_norms() {
    let mut rng = RngStream::new(22);
    let book = Codebook::random(8, 3, 5, &mut rng).unwrap();
    let x: Vec<f64> = (0..15).map(|_| rng.uniform_range(-0.3, 0.3)).collect();
    let features = Tensor::matrix(5, 3, x.clone()).unwrap();
    let q = book.quantize(&features).unwrap();
    let (vq, commit) = vq_losses(&features, &q, 0.25).unwrap();
    let direct: f64 = x.iter().zip(q.dequantized.data()).map(|(a, b)| (a - b) * (a - b)).sum();
    assert!((vq - direct).abs() < 1e-12);
    assert!((commit - 0.25 * direct).abs() < 1e-12);
}

#[test]
fn straight_through_keeps_bits() {
    let g = Tensor::matrix(2, 2, vec![1.5, -0.0, f64::MIN_POSITIVE, 3e300]).unwrap();
    let out = straight_through_grad(&g);
    let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&out), bits(&g));
}

#[test]
fn encoder_gradient_through_quantizer_fixture() {
    // 2 -> 2 (tanh) -> 2 encoder, 1-d codewords, 2 -> 3 linear decoder
    let encoder = MlpParams::new(vec![
        Layer {
            weights: Tensor::matrix(2, 2, vec![0.6, -0.4, 0.3, 0.8]).unwrap(),
            bias: vec![0.05, -0.1],
        },
        Layer {
            weights: Tensor::matrix(2, 2, vec![0.9, 0.2, -0.5, 0.7]).unwrap(),
            bias: vec![0.0, 0.1],
        },
    ])
    .unwrap();
    let codebook = Codebook::new(Tensor::matrix(4, 1, vec![-0.75, -0.25, 0.25, 0.75]).unwrap(), 2).unwrap();
    let shared = SharedEncoder::new(encoder, codebook).unwrap();
    let decoder = MlpParams::new(vec![Layer {
        weights: Tensor::matrix(3, 2, vec![1.0, -0.5, 0.25, 0.75, -1.0, 0.5]).unwrap(),
        bias: vec![0.1, 0.0, -0.1],
    }])
    .unwrap();
    let batch = vec![(vec![0.3, -0.7], 0), (vec![-0.2, 0.4], 2), (vec![0.9, 0.1], 1)];
    assert!(grad_check(&shared, &decoder, &batch, 0.25, GradPath::Encoder).unwrap() <= 1e-4);
    assert!(grad_check(&shared, &decoder, &batch, 0.25, GradPath::Decoder).unwrap() <= 1e-6);
}

fn codebook_strategy() -> impl Strategy<Value = (Codebook, Tensor)> {
    (0u32..6, 1usize..5, 1usize..5, any::<u64>()).prop_map(|(log_p, d, m, seed)| {
        let mut rng = RngStream::new(seed);
        let book = Codebook::random(1 << (log_p + 1), d, m, &mut rng).unwrap();
        let x: Vec<f64> = (0..m * d).map(|_| rng.uniform_range(-1.0, 1.0)).collect();
        (book, Tensor::matrix(m, d, x).unwrap())
    })
}

proptest! {
    #[test]
    fn quantize_is_idempotent((book, x) in codebook_strategy()) {
        let first = book.quantize(&x).unwrap();
        let again = book.quantize(&first.dequantized).unwrap();
        prop_assert_eq!(first.indices, again.indices);
    }

    #[test]
    fn chosen_codeword_is_closest((book, x) in codebook_strategy()) {
        let q = book.quantize(&x).unwrap();
        for (i, &idx) in q.indices.iter().enumerate() {
            let row = x.row(i);
            let dist = |c: &[f64]| -> f64 { c.iter().zip(row).map(|(a, b)| (a - b).powi(2)).sum() };
            let chosen = dist(book.codeword(idx));
            for e in 0..book.size() {
                prop_assert!(chosen <= dist(book.codeword(e)));
            }
        }
    }

    #[test]
    fn losses_invariant_under_codebook_permutation((book, x) in codebook_strategy(), seed in any::<u64>()) {
        let mut perm: Vec<usize> = (0..book.size()).collect();
        RngStream::new(seed).shuffle(&mut perm);
        let rows: Vec<f64> = perm.iter().flat_map(|&i| book.codeword(i).to_vec()).collect();
        let permuted = Codebook::new(Tensor::matrix(book.size(), book.dim(), rows).unwrap(), book.subvectors()).unwrap();
        let a = book.quantize(&x).unwrap();
        let b = permuted.quantize(&x).unwrap();
        prop_assert_eq!(vq_losses(&x, &a, 0.25).unwrap(), vq_losses(&x, &b, 0.25).unwrap());
        for (ia, ib) in a.indices.iter().zip(&b.indices) {
            prop_assert_eq!(book.codeword(*ia), permuted.codeword(*ib));
        }
    }

    #[test]
    fn bit_budget_adds_over_groups(log_p in 1u32..12, m1 in 1usize..32, m2 in 1usize..32) {
        let size = 1usize << log_p;
        let budget = |m: usize| {
            let rows: Vec<f64> = (0..size).map(|i| i as f64).collect();
            Codebook::new(Tensor::matrix(size, 1, rows).unwrap(), m).unwrap().bit_budget()
        };
        prop_assert_eq!(budget(m1 + m2), budget(m1) + budget(m2));
        prop_assert_eq!(budget(m1), m1 as u64 * log_p as u64);
    }
}
