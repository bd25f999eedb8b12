use std::collections::BTreeMap;

use proptest::prelude::*;

use hybrid_core::conversion::{pack_sequences, Sample};
use hybrid_core::eval::{pass_at_k, pass_at_k_single, ProblemResult};
use hybrid_core::grpo::compute_advantages;
use hybrid_core::mamba::{scan_chunked, scan_sequential, Discretization, ScanArgs};
use hybrid_core::model::{decode_container, encode_container};
use hybrid_core::tensor::ops;
use hybrid_core::{tokenizer, SeededRng, Tensor};

fn binom(n: usize, k: usize) -> f64 {
    if k > n {
        return 0.0;
    }
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn chunked_scan_matches_sequential(
        seed in any::<u64>(),
        batch in 1usize..3,
        len in 1usize..40,
        s in 1usize..6,
        groups in 1usize..3,
        chunk in 1usize..20,
        zoh in any::<bool>(),
    ) {
        let din = s * groups;
        let mut rng = SeededRng::new(seed, 0);
        let n = batch * len * din;
        let x = Tensor::<f64>::randn([n], 1.0, &mut rng);
        let delta = Tensor::<f64>::uniform([n], 0.001, 0.5, &mut rng);
        let b = Tensor::<f64>::randn([n], 1.0, &mut rng);
        let c = Tensor::<f64>::randn([n], 1.0, &mut rng);
        let a: Vec<f64> = (0..din * s).map(|_| -(0.1 + 2.0 * rng.uniform())).collect();
        let args = ScanArgs {
            batch,
            len,
            d_inner: din,
            d_state: s,
            x: x.data(),
            delta: delta.data(),
            b: b.data(),
            c: c.data(),
            a: &a,
            d_skip: None,
            rule: if zoh { Discretization::Zoh } else { Discretization::Euler },
            resets: None,
        };
        let (y_ref, h_ref) = scan_sequential(&args, None).unwrap();
        let (y, h) = scan_chunked(&args, None, chunk).unwrap();
        prop_assert!(y.max_abs_diff(&y_ref).unwrap() < 1e-9);
        for (p, q) in h.h.iter().zip(&h_ref.h) {
            prop_assert!((p - q).abs() < 1e-9);
        }
    }

    #[test]
    fn softmax_rows_are_distributions(vals in prop::collection::vec(-80.0f64..80.0, 1..40), rows in 1usize..4) {
        let cols = vals.len();
        let data: Vec<f64> = (0..rows).flat_map(|r| vals.iter().map(move |v| v * (r + 1) as f64)).collect();
        let t = Tensor::new([rows, cols], data).unwrap();
        let p = ops::softmax(&t).unwrap();
        let lp = ops::log_softmax(&t).unwrap();
        for r in 0..rows {
            let row = &p.data()[r * cols..(r + 1) * cols];
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|&v| (0.0..=1.0).contains(&v)));
            for (q, l) in row.iter().zip(&lp.data()[r * cols..(r + 1) * cols]) {
                prop_assert!((q.ln().max(-700.0) - l.max(-700.0)).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn pass_at_k_matches_subset_count(n in 1usize..16, c_frac in 0.0f64..=1.0, k_frac in 0.0f64..=1.0) {
        let c = ((n as f64) * c_frac).round() as usize;
        let k = 1 + ((n - 1) as f64 * k_frac).round() as usize;
        let expect = 1.0 - binom(n - c, k) / binom(n, k);
        prop_assert!((pass_at_k_single(n, c, k).unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn pass_at_k_is_monotone_in_k_and_c(n in 1usize..20, c in 0usize..20) {
        let c = c.min(n);
        let mut prev = 0.0;
        for k in 1..=n {
            let p = pass_at_k_single(n, c, k).unwrap();
            prop_assert!(p + 1e-12 >= prev);
            if c < n {
                prop_assert!(pass_at_k_single(n, c + 1, k).unwrap() + 1e-12 >= p);
            }
            prev = p;
        }
    }

    #[test]
    fn pass_at_1_is_mean_success_rate(counts in prop::collection::vec((1usize..12, 0.0f64..=1.0), 1..10)) {
        let results: Vec<ProblemResult> = counts
            .iter()
            .enumerate()
            .map(|(i, &(n, f))| {
                let c = (n as f64 * f).round() as usize;
                let comps: Vec<String> = (0..n).map(|j| if j < c { "\\boxed{1}".into() } else { "\\boxed{2}".into() }).collect();
                ProblemResult::score(format!("p{i}"), "1", &comps)
            })
            .collect();
        let mean = results.iter().map(|r| r.correct as f64 / r.n as f64).sum::<f64>() / results.len() as f64;
        prop_assert!((pass_at_k(&results, 1).unwrap() - mean).abs() < 1e-12);
    }

    #[test]
    fn advantages_are_centered_and_shift_invariant(
        rewards in prop::collection::vec(0.0f64..1.0, 2..16),
        shift in -5.0f64..5.0,
    ) {
        let a = compute_advantages(&rewards).unwrap();
        prop_assert!(a.iter().sum::<f64>().abs() < 1e-9);
        let shifted: Vec<f64> = rewards.iter().map(|r| r + shift).collect();
        let b = compute_advantages(&shifted).unwrap();
        let spread = rewards.iter().cloned().fold(f64::MIN, f64::max) - rewards.iter().cloned().fold(f64::MAX, f64::min);
        if spread > 1e-6 {
            for (p, q) in a.iter().zip(&b) {
                prop_assert!((p - q).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn packing_preserves_every_token(lens in prop::collection::vec(1usize..60, 1..20), l_max in 8usize..64) {
        let samples: Vec<Sample> = lens
            .iter()
            .enumerate()
            .map(|(i, &n)| Sample { ids: (0..n as u32).map(|t| t + i as u32).collect(), mask: vec![1; n] })
            .collect();
        let (rows, stats) = pack_sequences(&samples, l_max).unwrap();
        let kept: usize = lens.iter().map(|&n| n.min(l_max)).sum();
        prop_assert_eq!(stats.tokens, kept);
        prop_assert_eq!(stats.dropped_tokens, lens.iter().map(|&n| n.saturating_sub(l_max)).sum::<usize>());
        for r in &rows {
            prop_assert!(r.len <= l_max);
            for d in &r.documents[0] {
                prop_assert_eq!(r.positions[d.start], 0);
                prop_assert!(r.segments[d.clone()].iter().all(|&s| s == r.segments[d.start]));
            }
        }
    }

    #[test]
    fn tokenizer_round_trips(text in "\\PC{0,64}") {
        prop_assert_eq!(tokenizer::decode(&tokenizer::encode(&text)), text);
    }

    #[test]
    fn container_round_trips(shapes in prop::collection::vec(prop::collection::vec(1usize..5, 1..4), 1..5), seed in any::<u64>()) {
        let mut rng = SeededRng::new(seed, 0);
        let tensors: BTreeMap<String, Tensor<f32>> = shapes
            .iter()
            .enumerate()
            .map(|(i, s)| (format!("t{i}"), Tensor::randn(s.clone(), 1.0, &mut rng)))
            .collect();
        let cfg = serde_json::json!({ "seed": seed });
        let bytes = encode_container(&cfg, &tensors).unwrap();
        let back = decode_container(&bytes).unwrap();
        prop_assert_eq!(back.config, cfg);
        prop_assert_eq!(back.tensors, tensors);
        // any flipped payload byte is caught
        let mut bad = bytes.clone();
        let last = bad.len() - 5;
        bad[last] ^= 0x40;
        prop_assert!(decode_container(&bad).is_err());
    }
}
