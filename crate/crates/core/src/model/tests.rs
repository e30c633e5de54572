use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::*;
use crate::autodiff::grad_check;
use crate::losses::{ctc_loss, Transcript};
use crate::nn::subsampled_len;

fn randn(seed: u64, shape: &[usize]) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| StandardNormal.sample(&mut rng)).collect()).unwrap()
}

/// One block per stage, d=8.
fn tiny(variant: Variant) -> ModelConfig {
    let mut c = ModelConfig::desk(variant);
    c.feat_dim = 4;
    c.subsample_channels = 6;
    c.d = 8;
    c.heads = 2;
    c.ff = 16;
    c.kernel = 3;
    c.max_dist = 4;
    c.vocab = 7;
    c.dropout = 0.0;
    c.dec_ff = 16;
    c.seed = 11;
    if variant == Variant::Sot {
        c.plain_blocks = 2;
    } else {
        c.mix_blocks = 1;
        c.spkr_blocks = 1;
        c.rec_blocks = 1;
        c.cross_blocks = usize::from(variant.has_cross());
    }
    if variant.has_decoder() {
        c.dec_blocks = 1;
    }
    c
}

fn model(c: ModelConfig) -> Model {
    Model::new(c).unwrap()
}

fn feats(seed: u64, t: usize, f: usize) -> Tensor {
    randn(seed, &[t, f])
}

#[test]
fn simo_branch_swap_swaps_outputs() {
    let mut m = model(tiny(Variant::SimoPit));
    let x = feats(1, 20, 4);
    let tape = Tape::new();
    let (h1, h2) = m.forward_simo(&Ctx::eval(&tape, &m.params), &x).unwrap();
    let (h1, h2) = (h1.value(), h2.value());
    assert_eq!(h1.rows(), subsampled_len(20));
    for id in m.params.ids().collect::<Vec<_>>() {
        let name = m.params.name(id).to_string();
        if let Some(rest) = name.strip_prefix("spkr1.") {
            let other = m.params.find(&format!("spkr2.{rest}")).unwrap();
            let a = m.params.get(id).clone();
            let b = m.params.get(other).clone();
            *m.params.get_mut(id) = b;
            *m.params.get_mut(other) = a;
        }
    }
    let tape = Tape::new();
    let (g1, g2) = m.forward_simo(&Ctx::eval(&tape, &m.params), &x).unwrap();
    assert_eq!(g1.value(), h2);
    assert_eq!(g2.value(), h1);
    assert!(h1.max_abs_diff(&h2) > 0.0);
}

#[test]
fn simo_gradient_reaches_both_branches() {
    let m = model(tiny(Variant::SimoHeat));
    let tape = Tape::new();
    let ctx = Ctx::eval(&tape, &m.params);
    let (h1, h2) = m.forward_simo(&ctx, &feats(2, 24, 4)).unwrap();
    let loss = ctc_loss(h1, &Transcript::from(vec![4]))
        .unwrap()
        .add(&ctc_loss(h2, &Transcript::from(vec![5])).unwrap())
        .unwrap();
    let grads = tape.backward(loss).unwrap();
    for branch in ["spkr1.", "spkr2."] {
        let total: f64 = m
            .params
            .ids()
            .filter(|&id| m.params.name(id).starts_with(branch))
            .map(|id| grads.wrt(ctx.p(id)).norm())
            .sum();
        assert!(total > 0.0, "{branch}");
    }
}

#[test]
fn wrong_variant_is_a_config_error() {
    let m = model(tiny(Variant::Cse));
    let tape = Tape::new();
    let ctx = Ctx::eval(&tape, &m.params);
    assert!(matches!(m.forward_simo(&ctx, &feats(1, 16, 4)), Err(Error::Config(_))));
    assert!(matches!(m.forward_sot(&ctx, &feats(1, 16, 4), &[4]), Err(Error::Config(_))));
    let s = model(tiny(Variant::SimoPit));
    assert!(matches!(s.forward_cse(&ctx, &feats(1, 16, 4)), Err(Error::Config(_))));
}

#[test]
fn cross_encode_keeps_partition_length() {
    for v in [Variant::Cse, Variant::CseNoPpe, Variant::CseNoMix, Variant::CseSot] {
        let m = model(tiny(v));
        let tape = Tape::new();
        let ctx = Ctx::eval(&tape, &m.params);
        let b = m.encode_branches(&ctx, &feats(3, 30, 4)).unwrap();
        let l = subsampled_len(30);
        let (s1, s2) = m.cross_encode(&ctx, &b).unwrap();
        assert_eq!((s1.rows(), s2.rows()), (l, l), "{v}");
        let (joint, offsets) = m.joint_sequence(&ctx, &b).unwrap();
        let parts = if v == Variant::CseNoMix { 2 } else { 3 };
        assert_eq!(joint.rows(), parts * l);
        assert_eq!(offsets, if parts == 3 { [l, 2 * l] } else { [0, l] });
    }
}

#[test]
fn cross_encode_rejects_mismatched_partitions() {
    let m = model(tiny(Variant::Cse));
    let tape = Tape::new();
    let ctx = Ctx::eval(&tape, &m.params);
    let b = BranchEncodings {
        x_hat: tape.leaf(randn(1, &[3, 8])),
        s1: tape.leaf(randn(2, &[3, 8])),
        s2: tape.leaf(randn(3, &[4, 8])),
    };
    assert!(matches!(m.cross_encode(&ctx, &b), Err(Error::Contract(_))));
}

#[test]
fn clipped_partitions_are_the_joint_output_ranges() {
    let m = model(tiny(Variant::Cse));
    let tape = Tape::new();
    let ctx = Ctx::eval(&tape, &m.params);
    let b = m.encode_branches(&ctx, &feats(4, 24, 4)).unwrap();
    let l = b.s1.rows();
    let (joint, _) = m.joint_sequence(&ctx, &b).unwrap();
    let full = run_blocks(&ctx, &m.net.cross, joint).unwrap().value();
    let (s1, s2) = m.cross_encode(&ctx, &b).unwrap();
    assert_eq!(s1.value(), full.slice_rows(l, l));
    assert_eq!(s2.value(), full.slice_rows(2 * l, l));
}

#[test]
fn zero_cross_weights_reduce_to_layer_norm() {
    let mut m = model(tiny(Variant::Cse));
    for id in m.params.ids().collect::<Vec<_>>() {
        let name = m.params.name(id);
        if name.starts_with("cross.") && !name.ends_with(".g") {
            m.params.get_mut(id).data_mut().fill(0.0);
        }
    }
    let tape = Tape::new();
    let ctx = Ctx::eval(&tape, &m.params);
    let b = m.encode_branches(&ctx, &feats(5, 24, 4)).unwrap();
    let (s1, s2) = m.cross_encode(&ctx, &b).unwrap();
    let norm = &m.net.cross[0].out_norm;
    let e1 = norm.forward(&ctx, b.s1).unwrap().value();
    let e2 = norm.forward(&ctx, b.s2).unwrap().value();
    assert!(s1.value().max_abs_diff(&e1) < 1e-12);
    assert!(s2.value().max_abs_diff(&e2) < 1e-12);
}

#[test]
fn partition_embedding_is_added_per_partition() {
    let mut c = tiny(Variant::Cse);
    c.d = 2;
    c.heads = 1;
    let mut m = model(c);
    let ppe = m.ppe_param().unwrap();
    *m.params.get_mut(ppe) = Tensor::from_rows(&[vec![0.0, 0.0], vec![1.0, 1.0], vec![2.0, 2.0]]).unwrap();
    let tape = Tape::new();
    let ctx = Ctx::eval(&tape, &m.params);
    let zero = tape.leaf(Tensor::zeros(&[1, 2]));
    let b = BranchEncodings {
        x_hat: zero,
        s1: zero,
        s2: zero,
    };
    let (joint, _) = m.joint_sequence(&ctx, &b).unwrap();
    assert_eq!(joint.value().data(), &[0.0, 0.0, 1.0, 1.0, 2.0, 2.0]);
    assert!(model(tiny(Variant::CseNoPpe)).ppe_param().is_none());
}

#[test]
fn second_branch_conditions_first() {
    let m = model(tiny(Variant::Cse));
    let tape = Tape::new();
    let ctx = Ctx::eval(&tape, &m.params);
    let b = m.encode_branches(&ctx, &feats(6, 24, 4)).unwrap();
    let (s1, _) = m.cross_encode(&ctx, &b).unwrap();
    let mut s2 = b.s2.value();
    s2.data_mut()[3] += 0.5;
    let probe = BranchEncodings {
        s2: tape.leaf(s2),
        ..b
    };
    let (t1, _) = m.cross_encode(&ctx, &probe).unwrap();
    assert!(s1.value().max_abs_diff(&t1.value()) > 0.0);
}

#[test]
fn cse_output_is_twice_the_branch_length() {
    for v in [Variant::Cse, Variant::CseNoPpe, Variant::CseNoMix] {
        let m = model(tiny(v));
        let tape = Tape::new();
        let h = m.forward_cse(&Ctx::eval(&tape, &m.params), &feats(7, 33, 4)).unwrap();
        assert_eq!(h.shape(), vec![2 * subsampled_len(33), 7]);
    }
}

#[test]
fn cse_end_to_end_grad_check() {
    let mut c = tiny(Variant::Cse);
    c.subsample_channels = 4;
    let mut m = model(c);
    // Move off the zero-bias initial point.
    for (i, p) in m.params.values_mut().iter_mut().enumerate() {
        let noise = randn(500 + i as u64, p.shape());
        for (x, n) in p.data_mut().iter_mut().zip(noise.data()) {
            *x += 0.3 * n;
        }
    }
    let x = feats(8, 16, 4);
    let w = randn(9, &[2 * subsampled_len(16), 7]);
    let err = grad_check(
        |tape, vars: &[Var]| {
            let ctx = Ctx::from_vars(tape, vars.to_vec(), 0.0, 0);
            m.forward_cse(&ctx, &x)?.mul(&tape.leaf(w.clone()))?.sum()
        },
        m.params.values(),
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-4, "{err}");
}

#[test]
fn variant_parity_with_bypassed_cross() {
    let x = feats(10, 28, 4);
    let simo = model(tiny(Variant::SimoJointHeat));
    let mut c = tiny(Variant::Cse);
    c.bypass_cross = true;
    // Same recognition depth on both sides.
    let cse = model(c);
    let tape = Tape::new();
    let a = simo.concat_logits(&Ctx::eval(&tape, &simo.params), &x).unwrap().value();
    let b = cse.forward_cse(&Ctx::eval(&tape, &cse.params), &x).unwrap().value();
    assert_eq!(a, b);
}

#[test]
fn ppe_changes_the_output() {
    let x = feats(11, 28, 4);
    let with = model(tiny(Variant::Cse));
    let without = model(tiny(Variant::CseNoPpe));
    let tape = Tape::new();
    let a = with.forward_cse(&Ctx::eval(&tape, &with.params), &x).unwrap().value();
    let b = without.forward_cse(&Ctx::eval(&tape, &without.params), &x).unwrap().value();
    assert!(a.max_abs_diff(&b) > 0.0);
    // Everything except the embedding table is shared.
    let names: Vec<_> = with.params.to_named();
    for (n, t) in without.params.to_named() {
        assert_eq!(names.iter().find(|(m, _)| *m == n).unwrap().1, t, "{n}");
    }
}

#[test]
fn forward_is_deterministic() {
    let x = feats(12, 28, 4);
    let run = || {
        let m = model(tiny(Variant::Cse));
        let tape = Tape::new();
        let out = m.forward_cse(&Ctx::eval(&tape, &m.params), &x).unwrap().value();
        out
    };
    assert_eq!(run(), run());
}

#[test]
fn sot_memory_and_heads() {
    let m = model(tiny(Variant::Sot));
    let tape = Tape::new();
    let ctx = Ctx::eval(&tape, &m.params);
    let x = feats(13, 40, 4);
    let serialized = [4, 5, 1, 6];
    let (ctc, dec) = m.forward_sot(&ctx, &x, &serialized).unwrap();
    assert_eq!(ctc.rows(), subsampled_len(40));
    assert_eq!(dec.shape(), vec![5, 7]);
    let loss = ctc.sum().unwrap().add(&dec.sum().unwrap()).unwrap();
    let grads = tape.backward(loss).unwrap();
    let enc = m.params.find("plain.block0.ff1.up.w").unwrap();
    assert!(grads.wrt(ctx.p(enc)).norm() > 0.0);

    // Decoder causality: row t is unchanged when a later token changes.
    let tape = Tape::new();
    let ctx = Ctx::eval(&tape, &m.params);
    let (_, a) = m.forward_sot(&ctx, &x, &[4, 5, 1, 6]).unwrap();
    let (_, b) = m.forward_sot(&ctx, &x, &[4, 5, 1, 5]).unwrap();
    let (a, b) = (a.value(), b.value());
    assert_eq!(a.slice_rows(0, 4), b.slice_rows(0, 4));
    assert!(a.slice_rows(4, 1).max_abs_diff(&b.slice_rows(4, 1)) > 0.0);
}

#[test]
fn cse_sot_memory_spans_both_branches() {
    let m = model(tiny(Variant::CseSot));
    let tape = Tape::new();
    let ctx = Ctx::eval(&tape, &m.params);
    let x = feats(14, 40, 4);
    let l = subsampled_len(40);
    let memory = m.encode_memory(&ctx, &x).unwrap();
    assert_eq!(memory.rows(), 2 * l);
    let (ctc, _) = m.forward_cse_sot(&ctx, &x, &[4, 1, 5]).unwrap();
    assert_eq!(ctc.rows(), 2 * l);
    ctx.start_capture();
    m.decode_logits(&ctx, memory, &[4, 1, 5]).unwrap();
    let probs = ctx.take_capture();
    let cross: Vec<_> = probs.iter().filter(|p| p.cols() == 2 * l).collect();
    assert_eq!(cross.len(), 2);
    for p in probs {
        for r in 0..p.rows() {
            assert!((p.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn parameter_count_matches_model() {
    for v in Variant::ALL {
        let c = tiny(v);
        assert_eq!(count_parameters(&c), model(c.clone()).params.numel(), "{v}");
        let d = ModelConfig::desk(v);
        assert_eq!(count_parameters(&d), model(d.clone()).params.numel(), "{v} desk");
    }
}

#[test]
fn zero_block_count_by_hand() {
    let mut c = ModelConfig::desk(Variant::SimoPit);
    c.feat_dim = 8;
    c.subsample_channels = 4;
    c.d = 4;
    c.mix_blocks = 0;
    c.spkr_blocks = 0;
    c.rec_blocks = 0;
    // conv1 24·4+4, conv2 12·4+4, proj 4·4+4, output 4·20+20.
    assert_eq!(count_parameters(&c), 100 + 52 + 20 + 100);
    assert_eq!(model(c).params.numel(), 272);
}

#[test]
fn parameter_count_is_affine_in_ff() {
    let mut c = ModelConfig::desk(Variant::Cse);
    let blocks = c.mix_blocks + 2 * c.spkr_blocks + c.cross_blocks + c.rec_blocks;
    let base = count_parameters(&c);
    c.ff *= 2;
    let doubled = count_parameters(&c);
    c.ff *= 2;
    let quadrupled = count_parameters(&c);
    // Two macaron feed-forward modules per block: 2·(2·d·ff + ff + d).
    let ff_part = |ff: usize| blocks * 2 * (2 * c.d * ff + ff + c.d);
    assert_eq!(doubled - base, ff_part(128) - ff_part(64));
    assert_eq!(quadrupled - doubled, 2 * (doubled - base));
}

#[test]
fn full_scale_cse_matches_simo() {
    let simo = count_parameters(&ModelConfig::full(Variant::SimoPit));
    let cse = count_parameters(&ModelConfig::full(Variant::Cse));
    // Only the 3×256 partition embedding separates them.
    assert_eq!(cse - simo, 3 * 256);
    let millions = |n: usize| (n as f64 / 1e4).round() / 100.0;
    assert_eq!(millions(simo), millions(cse));
    assert_eq!(
        count_parameters(&ModelConfig::full(Variant::CseNoPpe)),
        simo
    );
}

#[test]
fn averaging_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let write = |name: &str, v: f64| {
        let p = dir.path().join(name);
        save_params(&p, &[("w".to_string(), Tensor::full(&[2, 2], v)), ("b".into(), Tensor::full(&[3], -v))]).unwrap();
        p
    };
    let (a, b) = (write("a", 1.0), write("b", 3.0));
    let mean = average_checkpoints(&[a.clone(), b]).unwrap();
    assert!(mean[0].1.data().iter().all(|&x| x == 2.0));
    assert!(mean[1].1.data().iter().all(|&x| x == -2.0));
    assert_eq!(average_checkpoints(&[a.clone()]).unwrap(), load_params(&a).unwrap());
    let copies = average_checkpoints(&[a.clone(), a.clone(), a.clone()]).unwrap();
    assert_eq!(copies, load_params(&a).unwrap());

    let bad = dir.path().join("bad");
    save_params(&bad, &[("w".to_string(), Tensor::full(&[4], 1.0)), ("b".into(), Tensor::full(&[3], 1.0))]).unwrap();
    assert!(matches!(average_checkpoints(&[a.clone(), bad]), Err(Error::Checkpoint(_))));
    assert!(matches!(average_checkpoints(&[]), Err(Error::Checkpoint(_))));
}

#[test]
fn attention_dump_files() {
    let dir = tempfile::tempdir().unwrap();
    for (v, parts) in [(Variant::Cse, 3), (Variant::CseNoMix, 2)] {
        let mut c = tiny(v);
        c.cross_blocks = 2;
        let m = model(c);
        let out = dir.path().join(v.name());
        let files = m.dump_attention(&feats(15, 30, 4), &out).unwrap();
        assert_eq!(files.len(), 2 * 2);
        let n = parts * subsampled_len(30);
        for f in files {
            let mat = read_matrix(&f).unwrap();
            assert_eq!(mat.shape(), &[n, n]);
            for r in 0..n {
                assert!((mat.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }
    }
    let simo = model(tiny(Variant::SimoPit));
    assert!(simo.dump_attention(&feats(15, 30, 4), dir.path()).is_err());
}

#[test]
fn checkpoint_round_trip() {
    let m = model(tiny(Variant::Cse));
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("m.ckpt");
    m.save(&p).unwrap();
    let back = Model::load(m.config.clone(), &p).unwrap();
    assert_eq!(back.params.values(), m.params.values());
    let mut other = tiny(Variant::Cse);
    other.d = 16;
    assert!(matches!(Model::load(other, &p), Err(Error::Checkpoint(_))));
}
