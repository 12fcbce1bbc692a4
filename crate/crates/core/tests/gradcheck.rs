//! Central finite differences against the tape's reverse pass.

use mome_core::backbone::{AdapterSpec, Model, ModelConfig};
use mome_core::matryoshka::{build_entry, CompressionMode, Modality, RateGrid, RatePair, TokenSequence};
use mome_core::mome::{MomeConfig, Placement};
use mome_core::objective::{load_balance_loss_var, BalanceNorm};
use mome_core::params::{Graph, ParamGroup, Trainable};
use mome_core::{Result, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-5;
const TOL: f64 = 1e-5;

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-3)
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Reduces `build`'s output with fixed random weights and compares the input
/// gradients with central differences.
fn check_op<F>(name: &str, inputs: Vec<Tensor>, build: F)
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |inputs: &[Tensor], grad: bool| -> (f64, Vec<Tensor>) {
        let mut t = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|x| t.leaf(x.clone(), grad)).collect();
        let out = build(&mut t, &vars).unwrap();
        let mut wr = ChaCha8Rng::seed_from_u64(99);
        let w = rand_tensor(&mut wr, t.value(out).shape());
        let w = t.constant(w);
        let p = t.mul(out, w).unwrap();
        let loss = t.sum(p);
        let value = t.value(loss).item();
        if !grad {
            return (value, Vec::new());
        }
        t.backward(loss).unwrap();
        let grads = vars
            .iter()
            .map(|&v| t.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(t.value(v).shape())))
            .collect();
        (value, grads)
    };
    let (_, grads) = eval(&inputs, true);
    let mut worst = 0.0f64;
    for (i, x) in inputs.iter().enumerate() {
        for k in 0..x.len() {
            let mut plus = inputs.clone();
            plus[i].data_mut()[k] += H;
            let mut minus = inputs.clone();
            minus[i].data_mut()[k] -= H;
            let num = (eval(&plus, false).0 - eval(&minus, false).0) / (2.0 * H);
            worst = worst.max(rel_err(grads[i].data()[k], num));
        }
    }
    assert!(worst < TOL, "{name}: max relative error {worst:e}");
}

#[test]
fn elementwise_and_linear_ops() {
    let mut r = ChaCha8Rng::seed_from_u64(1);
    let (a, b) = (rand_tensor(&mut r, &[3, 4]), rand_tensor(&mut r, &[4, 2]));
    check_op("matmul", vec![a.clone(), b], |t, v| t.matmul(v[0], v[1]));
    check_op("transpose", vec![a.clone()], |t, v| t.transpose(v[0]));
    let c = rand_tensor(&mut r, &[3, 4]);
    check_op("add", vec![a.clone(), c.clone()], |t, v| t.add(v[0], v[1]));
    check_op("mul", vec![a.clone(), c], |t, v| t.mul(v[0], v[1]));
    check_op("add_row", vec![a.clone(), rand_tensor(&mut r, &[4])], |t, v| t.add_row(v[0], v[1]));
    check_op("mul_col", vec![a.clone(), rand_tensor(&mut r, &[3, 1])], |t, v| t.mul_col(v[0], v[1]));
    check_op("scale", vec![a.clone()], |t, v| Ok(t.scale(v[0], -2.5)));
    check_op("gelu", vec![a.clone()], |t, v| Ok(t.gelu(v[0])));
    check_op("mean", vec![a.clone()], |t, v| Ok(t.mean(v[0])));
    check_op("mean_rows", vec![a], |t, v| t.mean_rows(v[0]));
}

#[test]
fn relu_away_from_kink() {
    let x = Tensor::matrix(2, 3, vec![0.5, -0.7, 1.2, -0.1, 0.3, -2.0]).unwrap();
    check_op("relu", vec![x], |t, v| Ok(t.relu(v[0])));
}

#[test]
fn normalizing_ops() {
    let mut r = ChaCha8Rng::seed_from_u64(2);
    let x = rand_tensor(&mut r, &[4, 5]);
    check_op("softmax rows", vec![x.clone()], |t, v| t.softmax(v[0], 1));
    check_op("softmax cols", vec![x.clone()], |t, v| t.softmax(v[0], 0));
    check_op(
        "layernorm",
        vec![x.clone(), rand_tensor(&mut r, &[5]), rand_tensor(&mut r, &[5])],
        |t, v| t.layernorm(v[0], v[1], v[2]),
    );
    check_op("cross_entropy", vec![x], |t, v| t.cross_entropy(v[0], &[1, 4, 0, 2]));
}

#[test]
fn indexing_ops() {
    let mut r = ChaCha8Rng::seed_from_u64(3);
    let x = rand_tensor(&mut r, &[5, 3]);
    check_op("slice_rows", vec![x.clone()], |t, v| t.slice_rows(v[0], 1, 4));
    check_op("slice_cols", vec![x.clone()], |t, v| t.slice_cols(v[0], 1, 3));
    check_op("concat_rows", vec![x.clone(), rand_tensor(&mut r, &[2, 3])], |t, v| t.concat_rows(&[v[0], v[1]]));
    check_op("concat_cols", vec![x.clone(), rand_tensor(&mut r, &[5, 2])], |t, v| t.concat_cols(&[v[0], v[1]]));
    check_op("gather_rows", vec![x.clone()], |t, v| t.gather_rows(v[0], &[4, 0, 4, 2]));
    check_op("scatter_rows", vec![rand_tensor(&mut r, &[2, 3])], |t, v| t.scatter_rows(v[0], &[3, 1], 5));
    check_op("gather_entries", vec![x.clone()], |t, v| t.gather_entries(v[0], &[(0, 2), (3, 1), (0, 2)]));
    check_op("pool_avg", vec![x.clone()], |t, v| t.pool_avg(v[0], 2));
    check_op("pool_stack", vec![x], |t, v| t.pool_stack(v[0], 2));
}

#[test]
fn fused_causal_attention() {
    let mut r = ChaCha8Rng::seed_from_u64(4);
    let (q, k, v) = (
        rand_tensor(&mut r, &[5, 6]),
        rand_tensor(&mut r, &[5, 6]),
        rand_tensor(&mut r, &[5, 6]),
    );
    check_op("causal_attention", vec![q, k, v], |t, v| t.causal_attention(v[0], v[1], v[2], 3));
}

fn tiny_model(placement: Placement, seed: u64) -> (Model, mome_core::matryoshka::MatryoshkaSequence) {
    let cfg = ModelConfig {
        d_model: 8,
        n_layers: 2,
        n_heads: 2,
        ffn_hidden: 12,
        projector_hidden: 10,
        vocab_size: 9,
        max_seq_len: 64,
        audio_dim: 3,
        video_dim: 2,
        max_audio_frames: 16,
        max_video_frames: 8,
        max_text_len: 8,
    };
    let mut m = Model::new(cfg, seed).unwrap();
    let spec = AdapterSpec {
        mome: MomeConfig {
            n_routed: 4,
            n_shared: 1,
            top_k: 2,
            bottleneck: 2,
            placement,
            shared_router: true,
        },
        grid: RateGrid::new(vec![2], vec![2]).unwrap(),
        mode: CompressionMode::Avg,
    };
    m.attach_adapters(spec, seed).unwrap();
    // move away from the zero-initialized up projections
    let mut r = ChaCha8Rng::seed_from_u64(seed + 100);
    let ids: Vec<_> = m
        .store
        .iter()
        .filter(|(_, p)| p.group == ParamGroup::Adapter)
        .map(|(id, _)| id)
        .collect();
    for id in ids {
        for v in m.store.value_mut(id).data_mut() {
            *v = r.random_range(-0.8..0.8);
        }
    }
    let audio = TokenSequence::source(Modality::Audio, rand_tensor(&mut r, &[8, 3])).unwrap();
    let video = TokenSequence::source(Modality::Video, rand_tensor(&mut r, &[4, 2])).unwrap();
    let entry = build_entry(&audio, &video, &[8, 6], &[1, 4, 2, 7], RatePair { audio: 2, video: 2 }, CompressionMode::Avg)
        .unwrap();
    (m, entry)
}

/// Loss, per-layer routing selections and (optionally) adapter gradients.
fn block_loss(m: &Model, e: &mome_core::matryoshka::MatryoshkaSequence, grad: bool) -> (f64, Vec<Vec<Vec<usize>>>, Vec<(usize, Tensor)>) {
    let mut g = Graph::new(&m.store, if grad { Trainable::ADAPTERS } else { Trainable::NONE });
    let (nll, out) = m.target_nll(&mut g, e, Some(0)).unwrap();
    let mut loss = nll;
    let mut sel = Vec::new();
    for r in out.routing.iter().flatten() {
        let (lb, _) = load_balance_loss_var(&mut g.tape, r.scores, &r.gate, BalanceNorm::PerAssignment).unwrap();
        let lb = g.tape.scale(lb, 0.3);
        loss = g.tape.add(loss, lb).unwrap();
        sel.push(r.gate.selected.clone());
    }
    let value = g.tape.value(loss).item();
    if !grad {
        return (value, sel, Vec::new());
    }
    g.tape.backward(loss).unwrap();
    let grads = g.param_grads().into_iter().map(|(id, t)| (id.0, t)).collect();
    (value, sel, grads)
}

#[test]
fn full_mome_block_all_placements() {
    for (i, placement) in Placement::ALL.into_iter().enumerate() {
        let (mut m, e) = tiny_model(placement, 10 + i as u64);
        let (_, sel0, grads) = block_loss(&m, &e, true);
        let mut worst = 0.0f64;
        let (mut checked, mut skipped) = (0, 0);
        for (id, g) in &grads {
            if m.store.get(mome_core::params::ParamId(*id)).group != ParamGroup::Adapter {
                continue;
            }
            for k in 0..g.len() {
                let pid = mome_core::params::ParamId(*id);
                let orig = m.store.value(pid).data()[k];
                m.store.value_mut(pid).data_mut()[k] = orig + H;
                let (lp, sp, _) = block_loss(&m, &e, false);
                m.store.value_mut(pid).data_mut()[k] = orig - H;
                let (lm, sm, _) = block_loss(&m, &e, false);
                m.store.value_mut(pid).data_mut()[k] = orig;
                if sp != sel0 || sm != sel0 {
                    skipped += 1;
                    continue;
                }
                checked += 1;
                worst = worst.max(rel_err(g.data()[k], (lp - lm) / (2.0 * H)));
            }
        }
        assert!(checked > 150, "{placement:?}: only {checked} coordinates checked");
        assert!(skipped * 20 < checked, "{placement:?}: {skipped} routing flips");
        assert!(worst < TOL, "{placement:?}: max relative error {worst:e}");
    }
}
