use super::*;
use crate::tensor::finite_diff_check_params;

fn tiny(mode: ClusterMode, seed: u64) -> ModelConfig {
    ModelConfig {
        d_model: 8,
        heads: 2,
        d_ff: 16,
        layers_enc: 2,
        layers_dec: 2,
        dropout: 0.1,
        max_len: 12,
        clusters_k: 2,
        cluster_mode: mode,
        src_vocab: 10,
        tgt_vocab: 9,
        seed,
        ..ModelConfig::default()
    }
}

fn set_gains(model: &mut KTransformer<f64>, value: f64) {
    let heads = model.config().heads;
    for (l, cp) in model.cluster_params().into_iter().enumerate() {
        for (h, id) in [cp.gain_same, cp.gain_affinity].into_iter().enumerate() {
            let data = (0..heads).map(|i| value * (1.0 + (l + h + i) as f64 * 0.3)).collect();
            model.params_mut().set(id, Tensor::new(&[heads], data).unwrap()).unwrap();
        }
    }
}

#[test]
fn default_config_is_valid() {
    ModelConfig::default().validate().unwrap();
    let bad = ModelConfig {
        heads: 3,
        ..ModelConfig::default()
    };
    assert!(bad.validate().is_err());
}

#[test]
fn zero_gains_match_cluster_off() {
    for seed in 0..4 {
        let on = KTransformer::<f64>::new(tiny(ClusterMode::Both, seed)).unwrap();
        let mut off = on.clone();
        off.set_cluster_mode(ClusterMode::Off);
        let src = [4, 5, 6, 7, 8];
        let tgt_in = [BOS, 4, 5, 6];
        assert!(on.logits(&src, &tgt_in).unwrap().bit_eq(&off.logits(&src, &tgt_in).unwrap()));
    }
}

#[test]
fn nonzero_gains_change_the_output() {
    let mut on = KTransformer::<f64>::new(tiny(ClusterMode::Both, 1)).unwrap();
    set_gains(&mut on, 0.8);
    let mut off = on.clone();
    off.set_cluster_mode(ClusterMode::Off);
    let src = [4, 5, 6, 7, 8];
    let tgt_in = [BOS, 4];
    assert!(!on.logits(&src, &tgt_in).unwrap().bit_eq(&off.logits(&src, &tgt_in).unwrap()));
}

#[test]
fn logits_shape() {
    let m = KTransformer::<f32>::new(tiny(ClusterMode::Both, 0)).unwrap();
    let l = m.logits(&[4, 5, 6], &[BOS, 4, 5, 6, 7]).unwrap();
    assert_eq!(l.shape(), &[5, 9]);
}

#[test]
fn decoder_is_causal() {
    let mut m = KTransformer::<f64>::new(tiny(ClusterMode::Both, 2)).unwrap();
    set_gains(&mut m, 0.5);
    let src = [4, 6, 8, 5];
    let short = m.logits(&src, &[BOS, 4, 5]).unwrap();
    let long = m.logits(&src, &[BOS, 4, 5, 7, 8]).unwrap();
    for r in 0..3 {
        assert_eq!(short.row(r), long.row(r));
    }
}

#[test]
fn source_padding_is_invisible() {
    let mut m = KTransformer::<f64>::new(tiny(ClusterMode::Both, 3)).unwrap();
    set_gains(&mut m, 0.7);
    let a = m.logits(&[4, 6, 8, 5], &[BOS, 4, 5]).unwrap();
    let b = m.logits(&[4, 6, 8, 5, PAD, PAD], &[BOS, 4, 5]).unwrap();
    for (x, y) in a.data().iter().zip(b.data()) {
        assert!((x - y).abs() <= 1e-12 * (1.0 + x.abs()), "{x} vs {y}");
    }
}

#[test]
fn target_padding_does_not_change_loss() {
    let m = KTransformer::<f64>::new(tiny(ClusterMode::Both, 4)).unwrap();
    let loss = |tgt: &[usize]| {
        let mut g = Graph::with_params(m.params());
        let (l, n) = m.pair_loss(&mut g, &[4, 5, 6], tgt, &mut Pass::eval(), Reduction::Sum, None).unwrap();
        (g.value(l).data()[0], n)
    };
    let (a, na) = loss(&[4, 5]);
    let (b, nb) = loss(&[4, 5, PAD, PAD]);
    assert_eq!(na, 3);
    assert_eq!(nb, 3);
    assert!((a - b).abs() < 1e-12);
}

#[test]
fn teacher_forcing_layout() {
    assert_eq!(teacher_forcing(&[7, 8]), (vec![BOS, 7, 8], vec![7, 8, EOS]));
    assert_eq!(teacher_forcing(&[7, PAD]), (vec![BOS, 7, PAD], vec![7, EOS, PAD]));
    assert_eq!(teacher_forcing(&[]), (vec![BOS], vec![EOS]));
}

#[test]
fn loss_matches_direct_log_softmax() {
    let m = KTransformer::<f64>::new(tiny(ClusterMode::Both, 5)).unwrap();
    let src = [4, 7, 9];
    let tgt = [5, 6, 8];
    let (tgt_in, targets) = teacher_forcing(&tgt);
    let logits = m.logits(&src, &tgt_in).unwrap();
    let mut expected = 0.0;
    for (r, &t) in targets.iter().enumerate() {
        let row = logits.row(r);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        expected += lse - row[t];
    }
    expected /= targets.len() as f64;
    let mut g = Graph::with_params(m.params());
    let (l, _) = m.pair_loss(&mut g, &src, &tgt, &mut Pass::eval(), Reduction::Mean, None).unwrap();
    assert!((g.value(l).data()[0] - expected).abs() < 1e-12);
}

#[test]
fn uniform_output_gives_log_vocab_loss() {
    let mut m = KTransformer::<f64>::new(tiny(ClusterMode::Off, 6)).unwrap();
    let out_w = m.params().id("out.w").unwrap();
    let shape = m.params().get(out_w).shape().to_vec();
    m.params_mut().set(out_w, Tensor::zeros(&shape)).unwrap();
    let mut g = Graph::with_params(m.params());
    let (l, _) = m.pair_loss(&mut g, &[4, 5], &[6, 7], &mut Pass::eval(), Reduction::Mean, None).unwrap();
    assert!((g.value(l).data()[0] - 9f64.ln()).abs() < 1e-12);
}

#[test]
fn rejects_bad_inputs() {
    let m = KTransformer::<f32>::new(tiny(ClusterMode::Both, 0)).unwrap();
    assert!(matches!(m.logits(&[4, 99], &[BOS]), Err(Error::TokenOutOfRange { id: 99, size: 10 })));
    assert!(matches!(m.logits(&[4; 13], &[BOS]), Err(Error::TooLong { len: 13, max: 12 })));
    assert!(m.logits(&[PAD, PAD], &[BOS]).is_err());
    assert!(m.logits(&[], &[BOS]).is_err());
}

#[test]
fn greedy_respects_length_bound() {
    for seed in 0..5 {
        let m = KTransformer::<f32>::new(tiny(ClusterMode::Both, seed)).unwrap();
        let out = m.greedy_translate(&[4, 5, 6], 4).unwrap();
        assert!(out.len() <= 4);
        assert!(out.iter().all(|&t| t != PAD && t != BOS && t != EOS));
        assert!(m.greedy_translate(&[4, 5, 6], 1000).unwrap().len() <= 12);
    }
}

#[test]
fn greedy_stops_when_eos_dominates() {
    let mut m = KTransformer::<f64>::new(tiny(ClusterMode::Both, 7)).unwrap();
    let out_b = m.params().id("out.b").unwrap();
    let mut bias = vec![0.0; 9];
    bias[EOS] = 1e3;
    m.params_mut().set(out_b, Tensor::new(&[9], bias).unwrap()).unwrap();
    assert!(m.greedy_translate(&[4, 5], 10).unwrap().is_empty());
}

#[test]
fn greedy_matches_full_recompute() {
    let mut m = KTransformer::<f64>::new(tiny(ClusterMode::Both, 8)).unwrap();
    set_gains(&mut m, 0.4);
    let src = [4, 5, 6, 9];
    let out = m.greedy_translate(&src, 6).unwrap();
    let mut prefix = vec![BOS];
    for &tok in &out {
        let l = m.logits(&src, &prefix).unwrap();
        let row = l.row(prefix.len() - 1);
        let best = (0..row.len())
            .filter(|&i| i != PAD && i != BOS)
            .fold(EOS, |b, i| if row[i] > row[b] { i } else { b });
        assert_eq!(best, tok);
        prefix.push(tok);
    }
}

#[test]
fn evaluation_is_deterministic_and_dropout_is_seeded() {
    let m = KTransformer::<f64>::new(tiny(ClusterMode::Both, 9)).unwrap();
    let run = |pass: &mut Pass| {
        let mut g = Graph::with_params(m.params());
        let (l, _) = m.pair_loss(&mut g, &[4, 5, 6], &[7, 8], pass, Reduction::Mean, None).unwrap();
        g.value(l).data()[0]
    };
    assert_eq!(run(&mut Pass::eval()).to_bits(), run(&mut Pass::eval()).to_bits());
    assert_eq!(run(&mut Pass::train(3)).to_bits(), run(&mut Pass::train(3)).to_bits());
    assert_ne!(run(&mut Pass::train(3)).to_bits(), run(&mut Pass::eval()).to_bits());
}

#[test]
fn single_and_double_precision_agree() {
    let m64 = KTransformer::<f64>::new(tiny(ClusterMode::Both, 10)).unwrap();
    let m32: KTransformer<f32> = m64.cast().unwrap();
    let a = m64.logits(&[4, 5, 6, 7], &[BOS, 4]).unwrap();
    let b = m32.logits(&[4, 5, 6, 7], &[BOS, 4]).unwrap();
    for (x, y) in a.data().iter().zip(b.data()) {
        assert!((x - f64::from(*y)).abs() < 1e-4);
    }
}

#[test]
fn from_params_checks_layout() {
    let m = KTransformer::<f32>::new(tiny(ClusterMode::Both, 0)).unwrap();
    let back = KTransformer::from_params(m.config().clone(), m.params().clone()).unwrap();
    assert!(back.params().bit_eq(m.params()));
    let other = KTransformer::<f32>::new(ModelConfig {
        layers_dec: 1,
        ..tiny(ClusterMode::Both, 0)
    })
    .unwrap();
    assert!(KTransformer::from_params(m.config().clone(), other.params().clone()).is_err());
}

#[test]
fn full_loss_gradient_matches_finite_differences() {
    let cfg = ModelConfig {
        d_model: 4,
        heads: 2,
        d_ff: 6,
        layers_enc: 1,
        layers_dec: 1,
        dropout: 0.0,
        max_len: 6,
        clusters_k: 2,
        cluster_mode: ClusterMode::Both,
        src_vocab: 7,
        tgt_vocab: 6,
        seed: 11,
        ..ModelConfig::default()
    };
    let mut m = KTransformer::<f64>::new(cfg).unwrap();
    set_gains(&mut m, 0.6);
    let src = [4, 5, 6];
    let tgt = [4, 5];
    // Clusters are constants of the forward pass; freeze them so the
    // perturbed embeddings do not move cluster boundaries.
    let fixed = m.cluster_features(&src).unwrap().unwrap();
    let ids: Vec<ParamId> = m.params().ids().collect();
    let worst = finite_diff_check_params(
        m.params(),
        &ids,
        |g| {
            let (l, _) = m.pair_loss(g, &src, &tgt, &mut Pass::eval(), Reduction::Mean, Some(&fixed))?;
            Ok(l)
        },
        1e-6,
    )
    .unwrap();
    assert!(worst < 1e-4, "worst relative error {worst}");
}

#[test]
fn cluster_source_recovers_separated_groups() {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut rows = Vec::new();
    for i in 0..10 {
        let centre = if i < 5 { 5.0 } else { -5.0 };
        rows.push((0..3).map(|_| centre + rng.gen_range(-0.5..0.5)).collect::<Vec<f64>>());
    }
    let r = cluster_source(&Tensor::from_rows(&rows), 2, 0, 100, 1e-6).unwrap();
    assert!(r.assignments[..5].iter().all(|&a| a == r.assignments[0]));
    assert!(r.assignments[5..].iter().all(|&a| a == r.assignments[5]));
    assert_ne!(r.assignments[0], r.assignments[5]);
    let short = cluster_source(&Tensor::from_rows(&rows[..1]), 4, 0, 100, 1e-6).unwrap();
    assert_eq!(short.k(), 1);
}

#[test]
fn cluster_source_orders_by_centroid_norm() {
    use crate::cluster::{kmeans_fit, mse};
    let rows = vec![vec![0.1, 0.0], vec![0.0, 0.1], vec![4.0, 4.0], vec![4.1, 4.0], vec![-1.0, 1.0], vec![-1.0, 1.1]];
    let pts = Tensor::from_rows(&rows);
    let mut optimal = 0;
    for seed in 0..10 {
        let r = cluster_source(&pts, 3, seed, 100, 1e-9).unwrap();
        let plain = kmeans_fit(&pts, 3, seed, 100, 1e-9).unwrap();
        let norms: Vec<f64> = (0..3).map(|c| r.centroids.row(c).iter().map(|x| x * x).sum()).collect();
        assert!(norms.windows(2).all(|w| w[0] >= w[1]), "seed {seed}: {norms:?}");
        assert_eq!(plain.mse, r.mse);
        assert!((r.mse - mse(&pts, &r.centroids, &r.assignments)).abs() < 1e-15);
        for i in 0..6 {
            for j in 0..6 {
                let same = r.assignments[i] == r.assignments[j];
                assert_eq!(same, plain.assignments[i] == plain.assignments[j]);
            }
        }
        if r.assignments == [2, 2, 0, 0, 1, 1] {
            optimal += 1;
        }
    }
    assert!(optimal > 0);
}

#[test]
fn finite_outputs_across_seeds() {
    for seed in 0..20 {
        let mut m = KTransformer::<f32>::new(tiny(ClusterMode::Both, seed)).unwrap();
        let heads = m.config().heads;
        for cp in m.cluster_params() {
            m.params_mut().set(cp.gain_same, Tensor::full(&[heads], 2.0)).unwrap();
        }
        let len = 1 + (seed as usize % 12);
        let src: Vec<usize> = (0..len).map(|i| 4 + (i * 7 + seed as usize) % 6).collect();
        assert!(m.logits(&src, &[BOS, 4, 5]).unwrap().is_finite());
    }
}
