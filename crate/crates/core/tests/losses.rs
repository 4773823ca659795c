use std::f64::consts::LN_2;

use c3po_core::autodiff::Graph;
use c3po_core::losses::{
    anchor_loss, anchor_loss_graph, dpo_loss, dpo_loss_graph, re_loss, re_loss_graph, reward_r, sft_loss,
    sft_loss_graph, total_loss, total_loss_graph, LossWeights, RecordLogProbs, RewardInputs,
};
use c3po_core::model::{build_sequence, Bound, ModelConfig, ModelParams, Sequence, Trainable};
use c3po_core::vocab::Vocab;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn nls(x: f64) -> f64 {
    // −log σ(x) = log(1 + e^{−x}), written stably.
    if x > 0.0 {
        (-x).exp().ln_1p()
    } else {
        -x + x.exp().ln_1p()
    }
}

struct Oracle {
    re: f64,
    dpo: f64,
    anc: f64,
    total: f64,
}

fn oracle(inputs: &[RewardInputs], w: &LossWeights) -> Oracle {
    let n = inputs.len() as f64;
    let (mut re, mut dpo, mut anc) = (0.0, 0.0, 0.0);
    for i in inputs {
        let (p, r) = (&i.policy, &i.reference);
        let rz = p.pos_z - r.pos_z;
        let rzy = p.pos_zy - r.pos_zy;
        for k in 0..3 {
            re += nls(w.beta * rz - w.beta * (p.neg_z[k] - r.neg_z[k]));
            dpo += nls(w.beta * rzy - w.beta * (p.neg_zy[k] - r.neg_zy[k]));
        }
        anc += nls(w.beta * rz - w.delta) + w.lambda_dpo * nls(w.beta * rzy - w.delta);
    }
    let (re, dpo, anc) = (re / n, dpo / n, anc / n);
    Oracle {
        re,
        dpo,
        anc,
        total: re + w.lambda_dpo * dpo + w.lambda_anc * anc,
    }
}

fn lp() -> impl Strategy<Value = f64> {
    -60.0f64..-0.01
}

fn record() -> impl Strategy<Value = RecordLogProbs<f64>> {
    (lp(), lp(), prop::array::uniform3(lp()), prop::array::uniform3(lp())).prop_map(|(z, zy, nz, nzy)| RecordLogProbs {
        pos_z: z,
        pos_zy: z + zy.max(-30.0) * 0.5,
        neg_z: nz.to_vec(),
        neg_zy: nz.iter().zip(nzy).map(|(a, b)| a + b * 0.5).collect(),
    })
}

fn inputs() -> impl Strategy<Value = Vec<RewardInputs>> {
    prop::collection::vec((record(), record()), 1..5)
        .prop_map(|v| v.into_iter().map(|(policy, reference)| RewardInputs { policy, reference }).collect())
}

fn weights() -> impl Strategy<Value = LossWeights> {
    (0.01f64..2.0, -1.0f64..1.0, 0.0f64..2.0, 0.0f64..2.0).prop_map(|(beta, delta, lambda_dpo, lambda_anc)| {
        LossWeights {
            beta,
            delta,
            lambda_dpo,
            lambda_anc,
        }
    })
}

fn identical(lp: f64) -> Vec<RewardInputs> {
    let r = RecordLogProbs {
        pos_z: lp,
        pos_zy: 2.0 * lp,
        neg_z: vec![lp - 1.0; 3],
        neg_zy: vec![lp - 5.0; 3],
    };
    vec![RewardInputs {
        policy: r.clone(),
        reference: r,
    }]
}

#[test]
fn closed_forms_at_the_reference() {
    let w = LossWeights::default();
    let x = identical(-4.0);
    assert!((re_loss(&x, &w).unwrap() - 3.0 * LN_2).abs() < 1e-12);
    assert!((dpo_loss(&x, &w).unwrap() - 3.0 * LN_2).abs() < 1e-12);
    assert!((anchor_loss(&x, &w).unwrap() - 2.0 * LN_2).abs() < 1e-12);
    let t = total_loss(&x, &w).unwrap();
    assert!((t.l_total - 8.0 * LN_2).abs() < 1e-12);
    assert!((8.0 * LN_2 - 5.545177).abs() < 1e-6);
}

#[test]
fn reward_examples() {
    assert_eq!(reward_r(-2.5, -2.5), 0.0);
    assert_eq!(reward_r(-1.0, -3.0), 2.0);
    assert_eq!(reward_r(-1.0 - 0.25, -3.0 - 0.25), 2.0);
}

#[test]
fn uniform_sft_value() {
    let v = 20f64.ln();
    assert!((sft_loss(&[(-3.0 * v, -2.0 * v)]).unwrap() - 5.0 * v).abs() < 1e-12);
    assert!(sft_loss(&[(-1e-300, -1e-300)]).unwrap().abs() < 1e-12);
    assert!(sft_loss(&[]).is_err());
}

#[test]
fn dominant_positive_drives_losses_to_zero() {
    let mut x = identical(-4.0);
    x[0].policy.pos_z = -1e-6;
    x[0].policy.pos_zy = -1e-6;
    x[0].policy.neg_z = vec![-1e4; 3];
    x[0].policy.neg_zy = vec![-1e4; 3];
    x[0].reference.pos_z = -1e4;
    x[0].reference.pos_zy = -1e4;
    x[0].reference.neg_z = vec![-1.0; 3];
    x[0].reference.neg_zy = vec![-1.0; 3];
    let t = total_loss(&x, &LossWeights::default()).unwrap();
    assert!(t.l_total < 1e-12, "{t:?}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn matches_independent_recomputation(x in inputs(), w in weights()) {
        let o = oracle(&x, &w);
        let t = total_loss(&x, &w).unwrap();
        for (got, want) in [(t.l_re, o.re), (t.l_dpo, o.dpo), (t.l_anc, o.anc), (t.l_total, o.total)] {
            prop_assert!((got - want).abs() <= 1e-12 * want.abs().max(1.0), "{got} vs {want}");
        }
        prop_assert!((t.l_total - (t.l_re + w.lambda_dpo * t.l_dpo + w.lambda_anc * t.l_anc)).abs() < 1e-12);
        prop_assert!(t.l_re > 0.0 && t.l_dpo > 0.0 && t.l_anc > 0.0);

        let doubled = LossWeights { beta: 2.0 * w.beta, ..w };
        prop_assert!((re_loss(&x, &doubled).unwrap() - oracle(&x, &doubled).re).abs() < 1e-12 * o.re.max(1.0));
        let half = LossWeights { lambda_dpo: 0.5, ..w };
        prop_assert!((anchor_loss(&x, &half).unwrap() - oracle(&x, &half).anc).abs() < 1e-12 * o.anc.max(1.0));
    }

    #[test]
    fn shift_invariance(x in inputs(), w in weights(), c in -5.0f64..0.0) {
        let mut shifted = x.clone();
        for i in &mut shifted {
            for r in [&mut i.policy, &mut i.reference] {
                r.pos_z += c;
                r.pos_zy += c;
                r.neg_z.iter_mut().for_each(|v| *v += c);
                r.neg_zy.iter_mut().for_each(|v| *v += c);
            }
        }
        let (a, b) = (total_loss(&x, &w).unwrap(), total_loss(&shifted, &w).unwrap());
        prop_assert!((a.l_total - b.l_total).abs() < 1e-9);
        prop_assert!((a.l_re - b.l_re).abs() < 1e-9);
    }

    #[test]
    fn losses_fall_as_the_positive_gains(x in inputs(), w in weights(), step in 0.01f64..3.0) {
        let x = vec![x[0].clone()];
        let mut better = x.clone();
        better[0].reference.pos_z -= step;
        better[0].reference.pos_zy -= step;
        let (a, b) = (total_loss(&x, &w).unwrap(), total_loss(&better, &w).unwrap());
        for (before, after) in [(a.l_re, b.l_re), (a.l_dpo, b.l_dpo)] {
            prop_assert!(after <= before);
            if before > 1e-6 {
                prop_assert!(after < before);
            }
        }
        prop_assert!(b.l_anc <= a.l_anc);
    }

    #[test]
    fn zero_weights_reduce_to_reasoning_loss(x in inputs(), beta in 0.01f64..2.0) {
        let w = LossWeights { beta, delta: 0.0, lambda_dpo: 0.0, lambda_anc: 0.0 };
        let t = total_loss(&x, &w).unwrap();
        prop_assert_eq!(t.l_total, t.l_re);
    }
}

#[test]
fn malformed_batches_are_rejected() {
    let mut x = identical(-1.0);
    x[0].policy.neg_z.pop();
    assert!(total_loss(&x, &LossWeights::default()).is_err());
    let bad_beta = LossWeights {
        beta: 0.0,
        ..LossWeights::default()
    };
    assert!(re_loss(&identical(-1.0), &bad_beta).is_err());
    assert!(re_loss(&[], &LossWeights::default()).is_err());
}

// Gradients through the full model.

fn tiny() -> ModelConfig {
    ModelConfig {
        vocab_size: Vocab::new().len(),
        d_model: 8,
        n_layers: 1,
        n_heads: 2,
        d_ff: 8,
        context: 32,
        lora_rank: 2,
        lora_alpha: 4.0,
    }
}

fn words(vocab: &Vocab, rng: &mut ChaCha8Rng, n: usize) -> Vec<String> {
    (0..n).map(|_| vocab.word(rng.gen_range(9..vocab.len())).unwrap().to_string()).collect()
}

/// Positive followed by three negatives, all sharing one prompt.
fn sequences(vocab: &Vocab, rng: &mut ChaCha8Rng) -> [Sequence; 4] {
    let v = words(vocab, rng, 3);
    let x = words(vocab, rng, 2);
    std::array::from_fn(|_| {
        let z = words(vocab, rng, 3);
        let y = words(vocab, rng, 2);
        build_sequence(vocab, &v, &x, &z, &y).unwrap()
    })
}

#[derive(Clone, Copy, Debug)]
enum Which {
    Sft,
    Re,
    Dpo,
    Anc,
    Total,
}

fn record_lps(g: &mut Graph, b: &Bound, seqs: &[Sequence; 4]) -> RecordLogProbs<c3po_core::autodiff::Var> {
    let parts: Vec<_> = seqs.iter().map(|s| b.segment_logprobs(g, s).unwrap()).collect();
    RecordLogProbs {
        pos_z: parts[0].0,
        pos_zy: parts[0].1,
        neg_z: parts[1..].iter().map(|p| p.0).collect(),
        neg_zy: parts[1..].iter().map(|p| p.1).collect(),
    }
}

fn reference_lps(reference: &ModelParams, seqs: &[Sequence; 4]) -> RecordLogProbs<f64> {
    let mut g = Graph::new();
    let b = Bound::new(&mut g, reference, Trainable::Nothing).unwrap();
    let r = record_lps(&mut g, &b, seqs);
    RecordLogProbs {
        pos_z: g.item(r.pos_z),
        pos_zy: g.item(r.pos_zy),
        neg_z: r.neg_z.iter().map(|&v| g.item(v)).collect(),
        neg_zy: r.neg_zy.iter().map(|&v| g.item(v)).collect(),
    }
}

fn loss_node(
    g: &mut Graph,
    policy: &ModelParams,
    reference: &[RecordLogProbs<f64>],
    batch: &[[Sequence; 4]],
    which: Which,
    w: &LossWeights,
) -> (c3po_core::autodiff::Var, Bound) {
    let b = Bound::new(g, policy, Trainable::Base).unwrap();
    let lps: Vec<_> = batch.iter().map(|s| record_lps(g, &b, s)).collect();
    let node = match which {
        Which::Sft => {
            let pairs: Vec<_> = lps
                .iter()
                .map(|r| {
                    let y = g.sub(r.pos_zy, r.pos_z).unwrap();
                    (r.pos_z, y)
                })
                .collect();
            sft_loss_graph(g, &pairs).unwrap()
        }
        Which::Re => re_loss_graph(g, &lps, reference, w).unwrap(),
        Which::Dpo => dpo_loss_graph(g, &lps, reference, w).unwrap(),
        Which::Anc => anchor_loss_graph(g, &lps, reference, w).unwrap(),
        Which::Total => total_loss_graph(g, &lps, reference, w).unwrap().total,
    };
    (node, b)
}

#[test]
fn full_model_gradients_match_finite_differences() {
    let vocab = Vocab::new();
    let w = LossWeights {
        beta: 0.5,
        delta: 0.1,
        lambda_dpo: 0.7,
        lambda_anc: 1.3,
    };
    let h = 1e-5;
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let policy = ModelParams::init(tiny(), seed).unwrap();
        let reference = ModelParams::init(tiny(), seed + 1000).unwrap();
        let batch: Vec<[Sequence; 4]> = (0..2).map(|_| sequences(&vocab, &mut rng)).collect();
        let refs: Vec<_> = batch.iter().map(|s| reference_lps(&reference, s)).collect();
        for which in [Which::Sft, Which::Re, Which::Dpo, Which::Anc, Which::Total] {
            let value = |p: &ModelParams| {
                let mut g = Graph::new();
                let (l, _) = loss_node(&mut g, p, &refs, &batch, which, &w);
                g.item(l)
            };
            let mut g = Graph::new();
            let (l, b) = loss_node(&mut g, &policy, &refs, &batch, which, &w);
            let grads = g.backward(l).unwrap();
            for _ in 0..4 {
                let ti = rng.gen_range(0..policy.base.len());
                let k = rng.gen_range(0..policy.base[ti].numel());
                let Some(gt) = grads.get(b.base[ti]) else { continue };
                let mut plus = policy.clone();
                plus.base[ti].data_mut()[k] += h;
                let mut minus = policy.clone();
                minus.base[ti].data_mut()[k] -= h;
                let fd = (value(&plus) - value(&minus)) / (2.0 * h);
                let a = gt.data()[k];
                let err = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-6);
                assert!(err < 1e-4, "seed {seed} {which:?} tensor {ti}[{k}]: {a} vs {fd}");
            }
        }
    }
}

#[test]
fn training_can_start_from_the_reference() {
    let vocab = Vocab::new();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let policy = ModelParams::init(tiny(), 3).unwrap();
    let batch = vec![sequences(&vocab, &mut rng)];
    let refs = vec![reference_lps(&policy, &batch[0])];
    let w = LossWeights::default();
    let mut g = Graph::new();
    let (l, b) = loss_node(&mut g, &policy, &refs, &batch, Which::Total, &w);
    assert!((g.item(l) - 8.0 * LN_2).abs() < 1e-9);
    let grads = g.backward(l).unwrap();
    let norm: f64 = b
        .base
        .iter()
        .filter_map(|v| grads.get(*v))
        .flat_map(|t| t.data().iter().map(|x| x * x))
        .sum();
    assert!(norm > 1e-12);
}
