use super::*;
use crate::autodiff::{grad_check, ParamSet, Tape};
use rand::seq::SliceRandom;
use rand::Rng;

fn rng(seed: u64) -> ChaCha12Rng {
    crate::rng::stream(seed, "perceiver-test")
}

fn random_matrix(tape: &mut Tape, rows: usize, cols: usize, r: &mut impl Rng) -> Var {
    let data = (0..rows * cols).map(|_| r.gen_range(-1.0..1.0)).collect();
    tape.constant(rows, cols, data)
}

fn small_latent_config() -> LatentConfig {
    LatentConfig {
        num_latents: 4,
        latent_channels: 8,
        self_layers_per_block: 2,
        heads_cross: 2,
        heads_self: 2,
        num_blocks: 2,
    }
}

#[test]
fn cross_attention_full_size_shapes() {
    // N=8, I=32, M=51, D=128
    let mut r = rng(0);
    let mut params = ParamSet::new();
    let block = CrossAttendBlock::build(&mut params, "cross", 32, 128, 4, &mut r);
    let mut tape = Tape::new();
    let latent = random_matrix(&mut tape, 8, 32, &mut r);
    let context = random_matrix(&mut tape, 51, 128, &mut r);
    let out = block
        .apply(&mut tape, &params, latent, context, 0.0, &mut rng(1))
        .unwrap();
    assert_eq!((out.rows, out.cols), (8, 32));
}

#[test]
fn singleton_context_attention_weights_are_one() {
    let mut r = rng(2);
    let mut params = ParamSet::new();
    let attn = MultiHeadAttention::build(&mut params, "attn", 8, 6, 6, 8, 2, &mut r);
    let mut tape = Tape::new();
    let q_in = random_matrix(&mut tape, 3, 8, &mut r);
    let kv_in = random_matrix(&mut tape, 1, 6, &mut r);
    let out = attn.apply(&mut tape, &params, q_in, kv_in).unwrap();

    // with one key the softmax is 1, so every query sees exactly wo(wv(kv))
    let v = attn.wv.apply(&mut tape, &params, kv_in).unwrap();
    let expected = attn.wo.apply(&mut tape, &params, v).unwrap();
    let expected_row = tape.value(expected).to_vec();
    for row in tape.value(out).chunks(out.cols) {
        for (a, b) in row.iter().zip(&expected_row) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn cross_block_macs_grow_linearly_in_context_rows() {
    let mut r = rng(3);
    let mut params = ParamSet::new();
    let block = CrossAttendBlock::build(&mut params, "cross", 8, 16, 2, &mut r);
    let macs_at = |m: usize| {
        let mut tape = Tape::new();
        let mut r2 = rng(4);
        let latent = random_matrix(&mut tape, 4, 8, &mut r2);
        let context = random_matrix(&mut tape, m, 16, &mut r2);
        tape.reset_macs();
        block
            .apply(&mut tape, &params, latent, context, 0.0, &mut rng(5))
            .unwrap();
        tape.macs() as f64
    };
    let (m1, m2, m4) = (macs_at(16), macs_at(32), macs_at(64));
    let d1 = m2 - m1;
    let d2 = m4 - m2;
    assert!(
        (d2 - 2.0 * d1).abs() / (2.0 * d1) < 0.05,
        "not linear: {m1} {m2} {m4}"
    );
}

#[test]
fn self_block_preserves_shape() {
    let mut r = rng(6);
    let mut params = ParamSet::new();
    let block = SelfAttendBlock::build(&mut params, "self", 8, 2, &mut r);
    for n in [1usize, 3, 7] {
        let mut tape = Tape::new();
        let latent = random_matrix(&mut tape, n, 8, &mut r);
        let out = block
            .apply(&mut tape, &params, latent, 0.0, &mut rng(7))
            .unwrap();
        assert_eq!((out.rows, out.cols), (n, 8));
    }
}

#[test]
fn self_block_attention_macs_grow_quadratically_in_latents() {
    let mut r = rng(8);
    let mut params = ParamSet::new();
    let block = SelfAttendBlock::build(&mut params, "self", 8, 2, &mut r);
    let macs_at = |n: usize| {
        let mut tape = Tape::new();
        let mut r2 = rng(9);
        let latent = random_matrix(&mut tape, n, 8, &mut r2);
        tape.reset_macs();
        block
            .apply(&mut tape, &params, latent, 0.0, &mut rng(10))
            .unwrap();
        tape.macs() as f64
    };
    // macs(n) = a n + b n^2; equally spaced second differences give
    // 2 b step^2, so doubling the step quadruples them
    let q1 = macs_at(24) - 2.0 * macs_at(16) + macs_at(8);
    let q2 = macs_at(48) - 2.0 * macs_at(32) + macs_at(16);
    assert!(
        (q2 / q1 - 4.0).abs() < 0.2,
        "attention term not quadratic: {q1} {q2}"
    );
}

#[test]
fn self_block_gradient_check() {
    let mut r = rng(11);
    let mut params = ParamSet::new();
    let block = SelfAttendBlock::build(&mut params, "self", 8, 2, &mut r);
    let latent_data: Vec<f64> = (0..32).map(|_| r.gen_range(-1.0..1.0)).collect();
    let weights: Vec<f64> = (0..32).map(|_| r.gen_range(-1.0..1.0)).collect();
    let report = grad_check(&mut params, 1e-5, 1e-5, |p, t| {
        let latent = t.constant(4, 8, latent_data.clone());
        let out = block.apply(t, p, latent, 0.0, &mut rng(12))?;
        let w = t.constant(4, 8, weights.clone());
        let prod = t.mul(out, w)?;
        Ok(t.sum_all(prod))
    })
    .unwrap();
    assert!(report.passed(), "worst {}", report.worst);
}

#[test]
fn encoder_output_is_exactly_permutation_invariant() {
    let mut r = rng(13);
    let mut params = ParamSet::new();
    let cfg = small_latent_config();
    let encoder = PerceiverEncoder::build(&mut params, "enc", 16, &cfg, &mut r);

    let m = 9;
    let rows: Vec<Vec<f64>> = (0..m)
        .map(|_| (0..16).map(|_| r.gen_range(-1.0..1.0)).collect())
        .collect();
    let encode_rows = |order: &[usize]| {
        let mut tape = Tape::new();
        let data: Vec<f64> = order.iter().flat_map(|&i| rows[i].clone()).collect();
        let ctx = tape.constant(m, 16, data);
        let out = encoder
            .encode(&mut tape, &params, ctx, 0.0, &mut rng(14))
            .unwrap();
        tape.value(out).to_vec()
    };

    let base = encode_rows(&(0..m).collect::<Vec<_>>());
    let mut order: Vec<usize> = (0..m).collect();
    for _ in 0..20 {
        order.shuffle(&mut r);
        assert_eq!(encode_rows(&order), base, "order {order:?}");
    }
}

#[test]
fn encoder_output_shape_is_independent_of_input_rows() {
    let mut r = rng(15);
    let mut params = ParamSet::new();
    let cfg = small_latent_config();
    let encoder = PerceiverEncoder::build(&mut params, "enc", 16, &cfg, &mut r);
    for m in [1usize, 5, 40] {
        let mut tape = Tape::new();
        let ctx = random_matrix(&mut tape, m, 16, &mut r);
        let out = encoder
            .encode(&mut tape, &params, ctx, 0.0, &mut rng(16))
            .unwrap();
        assert_eq!((out.rows, out.cols), (4, 8));
    }
}

#[test]
fn concat_latents_dimension() {
    let mut tape = Tape::new();
    let a = tape.constant(8, 32, vec![1.0; 256]);
    let b = tape.constant(8, 32, vec![2.0; 256]);
    let v = concat_latents(&mut tape, a, b).unwrap();
    assert_eq!((v.rows, v.cols), (1, 512));
    assert_eq!(tape.value(v)[0], 1.0);
    assert_eq!(tape.value(v)[256], 2.0);

    let mut tape = Tape::new();
    let a = tape.constant(1, 1, vec![3.0]);
    let b = tape.constant(1, 1, vec![4.0]);
    let v = concat_latents(&mut tape, a, b).unwrap();
    assert_eq!(tape.value(v), &[3.0, 4.0]);
}

#[test]
fn decoder_logit_lengths_match_class_counts() {
    let mut r = rng(17);
    let mut params = ParamSet::new();
    let dec3 = Decoder::build(&mut params, "risk", 8, 3, 2, &mut r);
    let dec2 = Decoder::build(&mut params, "downstream", 8, 2, 2, &mut r);
    let mut tape = Tape::new();
    let latent_vec = random_matrix(&mut tape, 1, 64, &mut r);
    let l3 = dec3
        .decode(&mut tape, &params, latent_vec, 0.0, &mut rng(18))
        .unwrap();
    let l2 = dec2
        .decode(&mut tape, &params, latent_vec, 0.0, &mut rng(18))
        .unwrap();
    assert_eq!(l3.numel(), 3);
    assert_eq!(l2.numel(), 2);
}

#[test]
fn decoder_zero_weights_yield_final_bias() {
    let mut r = rng(19);
    let mut params = ParamSet::new();
    let dec = Decoder::build(&mut params, "task", 8, 3, 2, &mut r);
    // zero every parameter, then set the final layer's bias
    for e in params.iter_mut() {
        e.tensor.data.iter_mut().for_each(|v| *v = 0.0);
    }
    let bias_id = dec.out.b.unwrap();
    params.get_mut(bias_id).tensor.data = vec![0.25, -0.5, 1.5];
    let mut tape = Tape::new();
    let latent_vec = tape.constant(1, 32, vec![0.0; 32]);
    let logits = dec
        .decode(&mut tape, &params, latent_vec, 0.0, &mut rng(20))
        .unwrap();
    assert_eq!(tape.value(logits), &[0.25, -0.5, 1.5]);
}

#[test]
fn decoder_gradient_check() {
    let mut r = rng(21);
    let mut params = ParamSet::new();
    let dec = Decoder::build(&mut params, "task", 4, 3, 2, &mut r);
    let latent_data: Vec<f64> = (0..16).map(|_| r.gen_range(-1.0..1.0)).collect();
    let report = grad_check(&mut params, 1e-5, 1e-4, |p, t| {
        let lv = t.constant(1, 16, latent_data.clone());
        let logits = dec.decode(t, p, lv, 0.0, &mut rng(22))?;
        t.cross_entropy(logits, &[1], 0.1)
    })
    .unwrap();
    assert!(report.passed(), "worst {}", report.worst);
}

#[test]
fn mlp_head_zero_hidden_is_affine() {
    let mut r = rng(23);
    let mut params = ParamSet::new();
    let head = MlpHead::build(&mut params, "head", 4, &[], 2, &mut r);
    assert_eq!(head.layers.len(), 1);
    let w = params.get(head.layers[0].w).tensor.data.clone();
    let b = params.get(head.layers[0].b.unwrap()).tensor.data.clone();
    let x = [0.3, -0.7, 1.1, 0.0];
    let mut tape = Tape::new();
    let xv = tape.constant(1, 4, x.to_vec());
    let out = head
        .apply(&mut tape, &params, xv, 0.0, &mut rng(24))
        .unwrap();
    for j in 0..2 {
        let expected: f64 = (0..4).map(|i| x[i] * w[i * 2 + j]).sum::<f64>() + b[j];
        assert!((tape.value(out)[j] - expected).abs() < 1e-12);
    }
}

#[test]
fn mlp_head_gradient_check() {
    let mut r = rng(25);
    let mut params = ParamSet::new();
    let head = MlpHead::build(&mut params, "head", 6, &[8, 4], 3, &mut r);
    let x: Vec<f64> = (0..6).map(|_| r.gen_range(-1.0..1.0)).collect();
    let report = grad_check(&mut params, 1e-5, 1e-5, |p, t| {
        let xv = t.constant(1, 6, x.clone());
        let logits = head.apply(t, p, xv, 0.0, &mut rng(26))?;
        t.cross_entropy(logits, &[2], 0.0)
    })
    .unwrap();
    assert!(report.passed(), "worst {}", report.worst);
}

#[test]
fn latent_config_validation() {
    let mut cfg = small_latent_config();
    assert!(cfg.validate(16).is_ok());
    cfg.heads_self = 3; // 8 % 3 != 0
    assert!(cfg.validate(16).is_err());
    let cfg = small_latent_config();
    assert!(cfg.validate(15).is_err()); // 15 % heads_cross != 0
}
