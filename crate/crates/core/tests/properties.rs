use std::collections::HashMap;

use ktransformer::cluster::kmeans_fit;
use ktransformer::corpus::{batch_pairs, filter_pairs, preprocess, EncodedPair, PAD, UNK};
use ktransformer::metrics::{bleu, corpus_bleu, BleuConfig};
use ktransformer::tensor::{matmul, softmax_rows};
use ktransformer::{Graph, ParallelCorpus, Profile, Tensor, Vocabulary};
use proptest::prelude::*;

fn matrix(rows: std::ops::RangeInclusive<usize>, cols: std::ops::RangeInclusive<usize>) -> impl Strategy<Value = Tensor<f64>> {
    (rows, cols).prop_flat_map(|(r, c)| {
        prop::collection::vec(-10.0f64..10.0, r * c).prop_map(move |v| Tensor::new(&[r, c], v).unwrap())
    })
}

fn naive_matmul(a: &Tensor<f64>, b: &Tensor<f64>) -> Vec<f64> {
    let (n, k, m) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for j in 0..m {
            for t in 0..k {
                out[i * m + j] += a.row(i)[t] * b.row(t)[j];
            }
        }
    }
    out
}

fn ngrams(s: &[u8], n: usize) -> HashMap<&[u8], u64> {
    let mut m = HashMap::new();
    if s.len() >= n {
        for w in s.windows(n) {
            *m.entry(w).or_default() += 1;
        }
    }
    m
}

fn tokens() -> impl Strategy<Value = Vec<u8>> {
    prop::collection::vec(0u8..5, 0..14)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn matmul_matches_triple_loop((a, b) in (1usize..6, 1usize..6, 1usize..6).prop_flat_map(|(n, k, m)| (matrix(n..=n, k..=k), matrix(k..=k, m..=m)))) {
        let got = matmul(&a, &b).unwrap();
        for (x, y) in got.data().iter().zip(naive_matmul(&a, &b)) {
            prop_assert!((x - y).abs() <= 1e-12 * (1.0 + y.abs()));
        }
    }

    #[test]
    fn matmul_gradient_is_weight_times_transpose((a, b, w) in (1usize..5, 1usize..5, 1usize..5).prop_flat_map(|(n, k, m)| (matrix(n..=n, k..=k), matrix(k..=k, m..=m), matrix(n..=n, m..=m)))) {
        let mut g = Graph::new();
        let av = g.leaf(a.clone()).unwrap();
        let bv = g.leaf(b.clone()).unwrap();
        let p = g.matmul(av, bv).unwrap();
        let p = g.mul_const(p, &w).unwrap();
        let loss = g.sum(p).unwrap();
        g.backward(loss).unwrap();
        let (n, k, m) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let ga = g.grad(av).unwrap();
        for i in 0..n {
            for t in 0..k {
                let want: f64 = (0..m).map(|j| w.row(i)[j] * b.row(t)[j]).sum();
                prop_assert!((ga.row(i)[t] - want).abs() <= 1e-10 * (1.0 + want.abs()));
            }
        }
    }

    #[test]
    fn softmax_rows_are_distributions(x in matrix(1..=5, 1..=7), shift in -50.0f64..50.0) {
        let s = softmax_rows(&x).unwrap();
        let shifted = softmax_rows(&x.map(|v| v + shift)).unwrap();
        for i in 0..x.shape()[0] {
            let row = s.row(i);
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|&p| p > 0.0 && p <= 1.0));
            let max = x.row(i).iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = x.row(i).iter().map(|v| (v - max).exp()).sum();
            for (j, &p) in row.iter().enumerate() {
                prop_assert!((p - (x.row(i)[j] - max).exp() / z).abs() < 1e-12);
                prop_assert!((p - shifted.row(i)[j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn kmeans_history_monotone_and_deterministic(pts in matrix(1..=12, 1..=3), k in 1usize..4, seed in 0u64..1000) {
        let k = k.min(pts.shape()[0]);
        let r = kmeans_fit(&pts, k, seed, 100, 1e-9).unwrap();
        for w in r.mse_history.windows(2) {
            prop_assert!(w[1] <= w[0] + 1e-12);
        }
        prop_assert_eq!(r.k(), k);
        let mut used = r.assignments.clone();
        used.sort_unstable();
        used.dedup();
        prop_assert_eq!(used.len(), k);
        prop_assert_eq!(&r, &kmeans_fit(&pts, k, seed, 100, 1e-9).unwrap());
    }

    #[test]
    fn preprocess_is_idempotent(line in "[a-zA-Z0-9 ,.!?'\"()\\-:;\t]{0,40}") {
        for profile in [Profile::SpaceTokenized, Profile::CharTokenized] {
            let once = preprocess(&line, profile);
            let again = preprocess(&profile.join(&once), profile);
            prop_assert_eq!(&once, &again);
            prop_assert!(once.iter().all(|t| !t.is_empty() && !t.chars().any(char::is_whitespace)));
            prop_assert!(once.iter().all(|t| t.to_lowercase() == *t));
        }
    }

    #[test]
    fn vocabulary_matches_frequency_count(sents in prop::collection::vec(prop::collection::vec("[a-f]{1,2}", 0..8), 1..10), max_size in 4usize..20, min_freq in 1usize..3) {
        prop_assume!(sents.iter().any(|s| !s.is_empty()));
        let v = Vocabulary::build(&sents, max_size, min_freq).unwrap();
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for t in sents.iter().flatten() {
            *counts.entry(t).or_default() += 1;
        }
        let mut ranked: Vec<(&str, usize)> = counts.into_iter().filter(|(_, c)| *c >= min_freq).collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        ranked.truncate(max_size - 4);
        let expect: Vec<&str> = ranked.iter().map(|(t, _)| *t).collect();
        prop_assert_eq!(v.regular_tokens(), expect.as_slice());
        for s in &sents {
            let enc = v.encode(s);
            for (tok, &id) in s.iter().zip(&enc.ids) {
                if v.contains(tok) {
                    prop_assert_eq!(v.token(id).unwrap(), tok.as_str());
                } else {
                    prop_assert_eq!(id, UNK);
                }
            }
        }
        prop_assert_eq!(Vocabulary::from_text(&v.to_text()).unwrap(), v);
    }

    #[test]
    fn batches_cover_each_pair_once(lens in prop::collection::vec((1usize..6, 1usize..6), 1..30), batch in 1usize..8, seed in 0u64..100) {
        let pairs: Vec<EncodedPair> = lens
            .iter()
            .enumerate()
            .map(|(index, &(s, t))| EncodedPair { index, src: vec![4; s], tgt: vec![5; t] })
            .collect();
        let batches = batch_pairs(&pairs, batch, seed).unwrap();
        let mut seen: Vec<usize> = batches.iter().flat_map(|b| b.indices.clone()).collect();
        seen.sort_unstable();
        prop_assert_eq!(seen, (0..pairs.len()).collect::<Vec<_>>());
        for b in &batches {
            prop_assert!(b.len() <= batch);
            for (row, (&i, mask)) in b.src.iter().zip(b.indices.iter().zip(&b.src_mask)) {
                prop_assert_eq!(mask.iter().filter(|&&m| m).count(), lens[i].0);
                prop_assert!(row.iter().zip(mask).all(|(&id, &m)| m || id == PAD));
            }
        }
        prop_assert_eq!(&batches, &batch_pairs(&pairs, batch, seed).unwrap());
    }

    #[test]
    fn filter_keeps_exactly_fitting_pairs(lens in prop::collection::vec((0usize..8, 0usize..8), 1..20), max_len in 1usize..7) {
        let words = |n: usize| (0..n).map(|i| format!("w{i}")).collect::<Vec<_>>().join(" ");
        let src: Vec<String> = lens.iter().map(|&(s, _)| words(s)).collect();
        let tgt: Vec<String> = lens.iter().map(|&(_, t)| words(t)).collect();
        let pc = ParallelCorpus::from_lines(&src, &tgt, Profile::SpaceTokenized, Profile::SpaceTokenized).unwrap();
        let expect: Vec<usize> = (0..lens.len()).filter(|&i| lens[i].0 > 0 && lens[i].0 <= max_len && lens[i].1 <= max_len).collect();
        let sv = Vocabulary::from_tokens(["w0"]).unwrap();
        match filter_pairs(&pc, &sv, &sv, max_len) {
            Ok(kept) => prop_assert_eq!(kept.iter().map(|p| p.index).collect::<Vec<_>>(), expect),
            Err(_) => prop_assert!(expect.is_empty()),
        }
    }

    #[test]
    fn bleu_matches_ngram_enumeration(c in tokens(), r in tokens().prop_filter("non-empty", |r| !r.is_empty())) {
        let report = bleu(&c, &r, &BleuConfig::default()).unwrap();
        let mut logs = Vec::new();
        for n in 1..=4 {
            let (cg, rg) = (ngrams(&c, n), ngrams(&r, n));
            let matched: u64 = cg.iter().map(|(g, &k)| k.min(*rg.get(g).unwrap_or(&0))).sum();
            let total = c.len().saturating_sub(n - 1) as u64;
            prop_assert_eq!((report.precisions[n - 1].matched, report.precisions[n - 1].total), (matched, total));
            if total > 0 {
                logs.push(matched as f64 / total as f64);
            }
        }
        let want = if c.is_empty() || logs.iter().any(|&p| p == 0.0) {
            0.0
        } else {
            let bp = if c.len() > r.len() { 1.0 } else { (1.0 - r.len() as f64 / c.len() as f64).exp() };
            bp * (logs.iter().map(|p| p.ln()).sum::<f64>() / logs.len() as f64).exp()
        };
        prop_assert!((report.score - want).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&report.score));
    }

    #[test]
    fn corpus_bleu_ignores_pair_order(pairs in prop::collection::vec((tokens(), tokens().prop_filter("non-empty", |r| !r.is_empty())), 1..10), rot in 0usize..10) {
        let cfg = BleuConfig::default().smoothed();
        let a = corpus_bleu(&pairs, &cfg).unwrap();
        let mut shuffled = pairs.clone();
        shuffled.rotate_left(rot % pairs.len());
        shuffled.reverse();
        let b = corpus_bleu(&shuffled, &cfg).unwrap();
        prop_assert_eq!(a.precisions, b.precisions);
        prop_assert!((a.score - b.score).abs() < 1e-15);
    }
}
