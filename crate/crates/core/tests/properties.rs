use mome_core::analysis::{covering_window, cross_scale_overlap, similarity_matrix, window_alignment, ActivationHistogram};
use mome_core::backbone::{AdapterSpec, Model, ModelConfig};
use mome_core::matryoshka::{
    build_entry, compress, compressed_len, CompressionMode, Modality, RateGrid, TokenSequence,
};
use mome_core::mome::{mome_forward, topk_gate, MomeConfig, MomeLayer, Placement};
use mome_core::objective::{load_balance_loss, BalanceNorm, LoadBalanceStats};
use mome_core::params::{Graph, ParamGroup, ParamStore, Trainable};
use mome_core::trainer::{cosine_lr, levenshtein};
use mome_core::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn matrix(rows: usize, cols: usize, seed: u64, bound: f64) -> Tensor {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| r.random_range(-bound..bound)).collect()).unwrap()
}

fn softmax_rows(x: &Tensor) -> Tensor {
    let mut out = Vec::with_capacity(x.len());
    for r in 0..x.rows() {
        let row = x.row(r);
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
        let z: f64 = e.iter().sum();
        out.extend(e.into_iter().map(|v| v / z));
    }
    Tensor::matrix(x.rows(), x.cols(), out).unwrap()
}

fn naive_matmul(a: &Tensor, b: &Tensor) -> Vec<Vec<f64>> {
    (0..a.rows())
        .map(|i| (0..b.cols()).map(|j| (0..a.cols()).map(|k| a.row(i)[k] * b.row(k)[j]).sum()).collect())
        .collect()
}

fn naive_gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

fn naive_expert(h: &Tensor, down: &Tensor, up: &Tensor) -> Vec<Vec<f64>> {
    let z = naive_matmul(h, down);
    let a: Vec<f64> = z.into_iter().flatten().map(naive_gelu).collect();
    naive_matmul(&Tensor::matrix(h.rows(), down.cols(), a).unwrap(), up)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn topk_keeps_k_largest_scores(t in 1usize..6, n in 1usize..9, k_raw in 0usize..8, seed in any::<u64>()) {
        let k = 1 + k_raw % n;
        let s = softmax_rows(&matrix(t, n, seed, 3.0));
        let g = topk_gate(&s, k).unwrap();
        for r in 0..t {
            let row = s.row(r);
            let sel = &g.selected[r];
            prop_assert_eq!(sel.len(), k);
            let mut dedup = sel.clone();
            dedup.sort_unstable();
            dedup.dedup();
            prop_assert_eq!(dedup.len(), k);
            for w in sel.windows(2) {
                prop_assert!(row[w[0]] > row[w[1]] || (row[w[0]] == row[w[1]] && w[0] < w[1]));
            }
            let kth = row[sel[k - 1]];
            for e in 0..n {
                let chosen = sel.contains(&e);
                prop_assert_eq!(g.gates.row(r)[e], if chosen { row[e] } else { 0.0 });
                if !chosen {
                    prop_assert!(row[e] < kth || (row[e] == kth && e > sel[k - 1]));
                }
            }
        }
    }

    #[test]
    fn topk_ties_go_to_lower_index(n in 2usize..8, k_raw in 0usize..8) {
        let k = 1 + k_raw % n;
        let s = Tensor::matrix(1, n, vec![1.0 / n as f64; n]).unwrap();
        let g = topk_gate(&s, k).unwrap();
        prop_assert_eq!(&g.selected[0], &(0..k).collect::<Vec<_>>());
    }

    #[test]
    fn dense_routing_matches_oracle(t in 1usize..6, n_shared in 0usize..3, n in 1usize..5, seed in any::<u64>()) {
        let (d, b) = (6, 3);
        let cfg = MomeConfig { n_routed: n, n_shared, top_k: n, bottleneck: b, placement: Placement::FfnParallel, shared_router: true };
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layer = MomeLayer::init(&mut store, &mut rng, "m", &cfg, d, 1);
        let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
        for id in ids {
            for v in store.value_mut(id).data_mut() {
                *v = rng.random_range(-1.0..1.0);
            }
        }
        let h = matrix(t, d, seed ^ 1, 1.5);
        let mut g = Graph::new(&store, Trainable::NONE);
        let hv = g.tape.constant(h.clone());
        let out = mome_forward(&mut g, hv, &layer, &cfg, 0).unwrap();
        let got = g.tape.value(out.out).clone();

        let scores = softmax_rows(&Tensor::matrix(t, n, naive_matmul(&h, store.value(layer.routers[0])).concat()).unwrap());
        let mut want = vec![vec![0.0; d]; t];
        for e in &layer.shared {
            let y = naive_expert(&h, store.value(e.w_down), store.value(e.w_up));
            for (w, y) in want.iter_mut().zip(&y) {
                for (a, b) in w.iter_mut().zip(y) { *a += b; }
            }
        }
        for (k, e) in layer.routed.iter().enumerate() {
            let y = naive_expert(&h, store.value(e.w_down), store.value(e.w_up));
            for (r, (w, y)) in want.iter_mut().zip(&y).enumerate() {
                for (a, b) in w.iter_mut().zip(y) { *a += scores.row(r)[k] * b; }
            }
        }
        for (r, w) in want.iter().enumerate() {
            for (c, &v) in w.iter().enumerate() {
                prop_assert!((got.row(r)[c] - v).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn compression_lengths(t in 1usize..50, d in 1usize..4, r in 1usize..8) {
        let x = matrix(t, d, t as u64, 1.0);
        let seq = TokenSequence::source(Modality::Audio, x.clone()).unwrap();
        let avg = compress(&seq, r, CompressionMode::Avg).unwrap();
        let stack = compress(&seq, r, CompressionMode::Stack).unwrap();
        prop_assert_eq!(avg.len(), t.div_ceil(r));
        prop_assert_eq!(compressed_len(t, r), t.div_ceil(r));
        prop_assert_eq!(avg.width(), d);
        prop_assert_eq!(stack.len(), t.div_ceil(r));
        prop_assert_eq!(stack.width(), r * d);
        for k in 0..avg.len() {
            let w = k * r..((k + 1) * r).min(t);
            for c in 0..d {
                let m = w.clone().map(|i| x.row(i)[c]).sum::<f64>() / w.len() as f64;
                prop_assert!((avg.tokens.row(k)[c] - m).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn balance_loss_matches_brute_force(t in 1usize..10, n in 1usize..7, k_raw in 0usize..6, seed in any::<u64>()) {
        let k = 1 + k_raw % n;
        let s = softmax_rows(&matrix(t, n, seed, 2.0));
        let g = topk_gate(&s, k).unwrap();
        let stats = LoadBalanceStats::from_gate(&g, BalanceNorm::PerAssignment).unwrap();
        let lb = load_balance_loss(&stats, n).unwrap();
        let mut want = 0.0;
        for e in 0..n {
            let count = g.selected.iter().filter(|sel| sel.contains(&e)).count() as f64;
            let p = (0..t).map(|r| s.row(r)[e]).sum::<f64>() / t as f64;
            want += count / (k * t) as f64 * p;
        }
        prop_assert!((lb - n as f64 * want).abs() < 1e-12);
    }

    #[test]
    fn balance_extremes(t in 1usize..20, n in 1usize..9) {
        // uniform scores with balanced assignments
        let uniform = LoadBalanceStats { f: vec![1.0 / n as f64; n], p: vec![1.0 / n as f64; n], tokens: t };
        prop_assert!((load_balance_loss(&uniform, n).unwrap() - 1.0).abs() < 1e-12);
        let mut one_hot = vec![0.0; n];
        one_hot[0] = 1.0;
        let collapsed = LoadBalanceStats { f: one_hot.clone(), p: one_hot, tokens: t };
        prop_assert!((load_balance_loss(&collapsed, n).unwrap() - n as f64).abs() < 1e-12);
    }

    #[test]
    fn levenshtein_is_a_metric(a in prop::collection::vec(0usize..4, 0..10), b in prop::collection::vec(0usize..4, 0..10), c in prop::collection::vec(0usize..4, 0..10)) {
        prop_assert_eq!(levenshtein(&a, &a), 0);
        prop_assert_eq!(levenshtein(&a, &b), levenshtein(&b, &a));
        prop_assert!(levenshtein(&a, &b) <= a.len().max(b.len()));
        prop_assert!(levenshtein(&a, &b) >= a.len().abs_diff(b.len()));
        prop_assert!(levenshtein(&a, &c) <= levenshtein(&a, &b) + levenshtein(&b, &c));
        prop_assert_eq!(levenshtein(&a, &[]), a.len());
    }

    #[test]
    fn cosine_schedule_bounds(total in 1usize..500, warmup in 0usize..50, step_raw in 0usize..600, lo in 0.0f64..1e-3) {
        let hi = 1e-3 + lo;
        let step = step_raw % (total + 1);
        let lr = cosine_lr(step, total, hi, lo, warmup);
        prop_assert!(lr <= hi + 1e-15);
        prop_assert!(lr >= 0.0);
        if step >= warmup {
            prop_assert!(lr >= lo - 1e-15);
            let next = cosine_lr((step + 1).min(total), total, hi, lo, warmup);
            prop_assert!(next <= lr + 1e-15);
        }
    }

    #[test]
    fn similarity_is_bounded(ra in 1usize..6, rb in 1usize..6, d in 1usize..5, seed in any::<u64>()) {
        let a = matrix(ra, d, seed, 5.0);
        let b = matrix(rb, d, seed ^ 7, 5.0);
        let s = similarity_matrix(&a, &b).unwrap();
        prop_assert_eq!(s.values.shape(), &[ra, rb]);
        prop_assert!(s.values.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        let self_sim = similarity_matrix(&a, &a).unwrap();
        for i in 0..ra {
            if !self_sim.zero_rows.contains(&i) {
                prop_assert!((self_sim.values.row(i)[i] - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn covering_window_contains_source_frames(k_raw in 0usize..40, fine in 1usize..5, mult in 1usize..5, len in 1usize..60) {
        let coarse = fine * mult;
        let k = k_raw % len.div_ceil(coarse);
        let w = covering_window(k, coarse, fine, len);
        for f in k * coarse..((k + 1) * coarse).min(len) {
            prop_assert!(w.contains(&(f / fine)));
        }
        prop_assert!(w.end <= len.div_ceil(fine));
    }

    #[test]
    fn overlap_is_a_fraction(seed in any::<u64>(), n in 2usize..8, m_raw in 0usize..8) {
        let grid = RateGrid::new(vec![2, 4], vec![1, 3]).unwrap();
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let counts = (0..2)
            .map(|_| (0..grid.len()).map(|_| (0..n).map(|_| r.random_range(0..20u64)).collect()).collect())
            .collect();
        let hist = ActivationHistogram::new(grid, counts).unwrap();
        let per_layer = cross_scale_overlap(&hist, 1 + m_raw % n).unwrap();
        prop_assert_eq!(per_layer.len(), 2);
        prop_assert!(per_layer.iter().all(|v| (0.0..=1.0).contains(v)));
        prop_assert!(cross_scale_overlap(&hist, n).unwrap().iter().all(|&v| v == 1.0));
    }
}

#[test]
fn piecewise_constant_streams_align_perfectly() {
    let (frames, coarse, fine) = (6, 4, 2);
    let base = matrix(frames, 5, 3, 1.0);
    let rows: Vec<Vec<f64>> = (0..frames * coarse).map(|i| base.row(i / coarse).to_vec()).collect();
    let seq = TokenSequence::source(Modality::Audio, Tensor::from_rows(&rows).unwrap()).unwrap();
    let c = compress(&seq, coarse, CompressionMode::Avg).unwrap();
    let f = compress(&seq, fine, CompressionMode::Avg).unwrap();
    let sim = similarity_matrix(&c.tokens, &f.tokens).unwrap();
    let a = window_alignment(&sim, coarse, fine, frames * coarse, 1e-12);
    assert_eq!((a.inside, a.total), (frames, frames));
}

fn small_config() -> ModelConfig {
    ModelConfig {
        d_model: 8,
        n_layers: 2,
        n_heads: 2,
        ffn_hidden: 16,
        projector_hidden: 16,
        vocab_size: 10,
        max_seq_len: 80,
        audio_dim: 4,
        video_dim: 3,
        max_audio_frames: 32,
        max_video_frames: 10,
        max_text_len: 8,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn fresh_adapters_leave_backbone_unchanged(seed in any::<u64>(), p in 0usize..3, shared_router in any::<bool>()) {
        let grid = RateGrid::new(vec![2, 4], vec![1, 2]).unwrap();
        let mut m = Model::new(small_config(), seed).unwrap();
        let bare = m.without_adapters().unwrap();
        let spec = AdapterSpec {
            mome: MomeConfig { n_routed: 4, n_shared: 1, top_k: 2, bottleneck: 3, placement: Placement::ALL[p], shared_router },
            grid: grid.clone(),
            mode: CompressionMode::Avg,
        };
        m.attach_adapters(spec, seed ^ 5).unwrap();
        prop_assert!(m.store.count(ParamGroup::Adapter) > 0);
        let audio = TokenSequence::source(Modality::Audio, matrix(16, 4, seed, 1.0)).unwrap();
        let video = TokenSequence::source(Modality::Video, matrix(5, 3, seed ^ 2, 1.0)).unwrap();
        for (s, pair) in grid.pairs().into_iter().enumerate() {
            let e = build_entry(&audio, &video, &[8, 7], &[1, 2, 3, 9], pair, CompressionMode::Avg).unwrap();
            let mut g0 = Graph::new(&bare.store, Trainable::NONE);
            let y0 = bare.forward(&mut g0, &e, None).unwrap();
            let mut g1 = Graph::new(&m.store, Trainable::NONE);
            let y1 = m.forward(&mut g1, &e, Some(s)).unwrap();
            let (a, b) = (g0.tape.value(y0.logits), g1.tape.value(y1.logits));
            for (x, y) in a.data().iter().zip(b.data()) {
                prop_assert!((x - y).abs() <= 1e-12);
            }
            prop_assert_eq!(y1.routing.iter().flatten().count(), 2);
        }
    }
}
