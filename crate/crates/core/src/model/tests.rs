use alloc::vec;
use alloc::vec::Vec;

use super::*;
use crate::rotation::{random_hadamard, OrthogonalTransform};
use crate::smoothing::{collect_act_stats, smooth_model, smoothing_factors};

fn small(d: usize, layers: usize) -> ModelConfig {
    ModelConfig {
        vocab: 32,
        hidden: d,
        intermediate: 4 * d,
        layers,
        heads: 2,
        gamma_range: (0.5, 2.0),
        rms_eps: 1e-6,
    }
}

fn tokens(rng: &mut Rng, n: usize, vocab: usize) -> Vec<u32> {
    (0..n).map(|_| rng.below(vocab) as u32).collect()
}

#[test]
fn zero_input_zero_output() {
    let mut rng = Rng::seed_from(1);
    let m = TinyModel::random(small(8, 1), &mut rng).unwrap();
    let x = Tensor::zeros(&[3, 8]);
    let y = ffn_forward(&m.layers[0].ffn, &x, Mode::Float, 0, &mut NoObserver).unwrap();
    assert!(y.data().iter().all(|v| *v == 0.0));
}

#[test]
fn ffn_hand_case() {
    // d = m = 2, identity gate/up, down sums the channels.
    let b = FfnBlock {
        w_gate: Tensor::identity(2),
        w_up: Tensor::identity(2),
        w_down: Tensor::from_rows(&[&[1.0, 0.0], &[1.0, 0.0]]).unwrap(),
        online_hadamard: false,
    };
    let x = Tensor::from_rows(&[&[1.0, -2.0]]).unwrap();
    let y = ffn_forward(&b, &x, Mode::Float, 0, &mut NoObserver).unwrap();
    let silu = |v: f64| v / (1.0 + (-v).exp());
    let want = silu(1.0) * 1.0 + silu(-2.0) * -2.0;
    assert!((y.get(0, 0) as f64 - want).abs() < 1e-6);
    assert_eq!(y.get(0, 1), 0.0);
}

#[test]
fn ffn_eight_bit_close_to_float() {
    let mut rng = Rng::seed_from(2);
    let m = TinyModel::random(small(64, 1), &mut rng).unwrap();
    let x = rng.normal_tensor(32, 64, 1.0);
    // Clip ratio 1: the sanity check isolates rounding precision from clipping.
    let spec = crate::quant::QuantSpec::per_token(8, 1.0).unwrap();
    let cfg = QuantConfig {
        act: Some(spec),
        ..QuantConfig::disabled()
    };
    let xq = crate::quant::fake_quant(&x, &spec).unwrap();
    assert!(xq.rel_error(&x).unwrap() <= 1e-2);
    // The SiLU-gated product is heavy-tailed, so the stacked sites land a little over 1%.
    let f = ffn_forward(&m.layers[0].ffn, &x, Mode::Float, 0, &mut NoObserver).unwrap();
    let q = ffn_forward(&m.layers[0].ffn, &x, Mode::Quantized(&cfg), 0, &mut NoObserver).unwrap();
    assert!(q.rel_error(&f).unwrap() <= 2e-2);
}

#[test]
fn ffn_shape_mismatch() {
    let mut rng = Rng::seed_from(2);
    let m = TinyModel::random(small(8, 1), &mut rng).unwrap();
    let x = Tensor::zeros(&[1, 4]);
    assert!(ffn_forward(&m.layers[0].ffn, &x, Mode::Float, 0, &mut NoObserver).is_err());
}

#[test]
fn single_token_attention_returns_value() {
    let attn = AttentionBlock {
        w_q: Tensor::identity(4),
        w_k: Tensor::identity(4),
        w_v: Tensor::identity(4),
        w_o: Tensor::identity(4),
        heads: 2,
        o_proj_hadamard: false,
    };
    let x = Tensor::from_rows(&[&[0.5, -1.0, 2.0, 3.0]]).unwrap();
    let mut cache = KvCache::new(4);
    let y = attention_forward(&attn, &x, &mut cache, Mode::Float, 0, &mut NoObserver).unwrap();
    for (a, b) in y.data().iter().zip(x.data()) {
        assert!((a - b).abs() < 1e-6);
    }
    assert_eq!(cache.len(), 1);
}

#[test]
fn kv_quant_toggle_and_high_bit() {
    let mut rng = Rng::seed_from(3);
    let m = TinyModel::random(small(16, 1), &mut rng).unwrap();
    let attn = &m.layers[0].attn;
    let x = rng.normal_tensor(10, 16, 1.0);
    let run = |cfg: &QuantConfig| {
        let mut cache = KvCache::new(16);
        attention_forward(attn, &x, &mut cache, Mode::Quantized(cfg), 0, &mut NoObserver).unwrap()
    };
    let float = attention_forward(attn, &x, &mut KvCache::new(16), Mode::Float, 0, &mut NoObserver).unwrap();
    assert_eq!(run(&QuantConfig::disabled()), float);
    let kv8 = QuantConfig {
        kv: Some(crate::quant::QuantSpec::grouped_asymmetric(8, 16, 1.0).unwrap()),
        ..QuantConfig::disabled()
    };
    assert!(run(&kv8).rel_error(&float).unwrap() <= 1e-2);
}

#[test]
fn incremental_decoding_matches_full_sequence() {
    let mut rng = Rng::seed_from(4);
    let m = TinyModel::random(small(16, 2), &mut rng).unwrap();
    let toks = tokens(&mut rng, 6, 32);
    let full = m.forward(&toks, Mode::Float, &mut NoObserver).unwrap();
    let mut caches: Vec<KvCache> = (0..2).map(|_| KvCache::new(16)).collect();
    let a = m.forward_cached(&toks[..4], &mut caches, Mode::Float, &mut NoObserver).unwrap();
    let b = m.forward_cached(&toks[4..], &mut caches, Mode::Float, &mut NoObserver).unwrap();
    let mut joined = a.into_data();
    joined.extend_from_slice(b.data());
    let joined = Tensor::new(vec![6, 32], joined).unwrap();
    assert!(joined.rel_inf_error(&full).unwrap() < 1e-5);
}

#[test]
fn logits_shape_and_token_range() {
    let mut rng = Rng::seed_from(5);
    let cfg = ModelConfig {
        vocab: 32,
        hidden: 8,
        intermediate: 32,
        layers: 1,
        heads: 2,
        ..ModelConfig::default()
    };
    let m = TinyModel::random(cfg, &mut rng).unwrap();
    let y = m.forward(&[1, 2, 3, 4], Mode::Float, &mut NoObserver).unwrap();
    assert_eq!(y.shape(), &[4, 32]);
    y.ensure_finite("logits").unwrap();
    assert!(matches!(
        m.forward(&[32], Mode::Float, &mut NoObserver),
        Err(Error::TokenOutOfRange { token: 32, vocab: 32 })
    ));
}

#[test]
fn quantized_run_differs_from_float() {
    let mut rng = Rng::seed_from(6);
    let m = TinyModel::random(small(16, 1), &mut rng).unwrap();
    let toks = tokens(&mut rng, 8, 32);
    let cfg = QuantConfig::w4a4kv4(16);
    let f = m.forward(&toks, Mode::Float, &mut NoObserver).unwrap();
    let q = m.forward(&toks, Mode::Quantized(&cfg), &mut NoObserver).unwrap();
    assert!(q.max_abs_diff(&f).unwrap() > 0.0);
}

#[test]
fn fuse_rmsnorm_invariance_and_idempotence() {
    let mut rng = Rng::seed_from(7);
    let m = TinyModel::random(small(16, 2), &mut rng).unwrap();
    let toks = tokens(&mut rng, 10, 32);
    let base = m.forward(&toks, Mode::Float, &mut NoObserver).unwrap();
    let mut fused = m.clone();
    assert_eq!(fuse_rmsnorm(&mut fused).unwrap(), FuseOutcome::Fused);
    assert!(fused.layers.iter().all(|l| l.attn_norm.is_unit() && l.ffn_norm.is_unit()));
    let y = fused.forward(&toks, Mode::Float, &mut NoObserver).unwrap();
    assert!(y.rel_inf_error(&base).unwrap() <= 1e-5);
    let snapshot = fused.clone();
    assert_eq!(fuse_rmsnorm(&mut fused).unwrap(), FuseOutcome::AlreadyFused);
    assert_eq!(fused, snapshot);
}

#[test]
fn fuse_rmsnorm_unit_and_constant_gamma() {
    let mut rng = Rng::seed_from(8);
    let mut m = TinyModel::random(small(8, 1), &mut rng).unwrap();
    for l in &mut m.layers {
        l.attn_norm.gamma = vec![1.0; 8];
        l.ffn_norm.gamma = vec![2.0; 8];
    }
    m.final_norm.gamma = vec![1.0; 8];
    let mut f = m.clone();
    fuse_rmsnorm(&mut f).unwrap();
    assert_eq!(f.layers[0].attn.w_q, m.layers[0].attn.w_q);
    let doubled = m.layers[0].ffn.w_up.map(|v| v * 2.0);
    assert_eq!(f.layers[0].ffn.w_up, doubled);
}

#[test]
fn rotation_requires_fused_norms() {
    let mut rng = Rng::seed_from(9);
    let mut m = TinyModel::random(small(16, 1), &mut rng).unwrap();
    let q = random_hadamard(16, &mut rng).unwrap();
    let err = rotate_model(&mut m, &q, RotateOptions::default()).unwrap_err();
    assert!(matches!(err, Error::InvalidState(msg) if msg.contains("fuse")));
}

#[test]
fn identity_rotation_without_hadamard_is_noop() {
    let mut rng = Rng::seed_from(10);
    let mut m = TinyModel::random(small(8, 1), &mut rng).unwrap();
    fuse_rmsnorm(&mut m).unwrap();
    let before = m.clone();
    let q = OrthogonalTransform::explicit(Tensor::identity(8)).unwrap();
    let opts = RotateOptions {
        down_proj_hadamard: false,
        o_proj_hadamard: false,
    };
    rotate_model(&mut m, &q, opts).unwrap();
    assert_eq!(m.layers, before.layers);
    assert_eq!(m.embedding, before.embedding);
    assert_eq!(m.head, before.head);
    assert_eq!(m.state, TransformState::Rotated);
}

#[test]
fn rotation_preserves_logits() {
    let mut rng = Rng::seed_from(11);
    let m = TinyModel::random(small(32, 2), &mut rng).unwrap();
    let toks = tokens(&mut rng, 12, 32);
    let base = m.forward(&toks, Mode::Float, &mut NoObserver).unwrap();
    for o_proj in [false, true] {
        let mut r = m.clone();
        fuse_rmsnorm(&mut r).unwrap();
        let q = random_hadamard(32, &mut rng).unwrap();
        let opts = RotateOptions {
            down_proj_hadamard: true,
            o_proj_hadamard: o_proj,
        };
        rotate_model(&mut r, &q, opts).unwrap();
        let y = r.forward(&toks, Mode::Float, &mut NoObserver).unwrap();
        assert!(y.rel_inf_error(&base).unwrap() <= 1e-5);
    }
}

#[test]
fn rotated_spike_has_smaller_peak() {
    let mut rng = Rng::seed_from(12);
    let m = TinyModel::random(small(16, 1), &mut rng).unwrap();
    let mut x = rng.normal_tensor(4, 16, 0.1);
    x.set(2, 3, 500.0);
    let q = random_hadamard(16, &mut rng).unwrap();
    let rotated = q.apply(&x).unwrap();
    assert!(rotated.abs_max() < x.abs_max());
    let _ = m;
}

#[test]
fn smoothing_then_rotation_tap_algebra() {
    let mut rng = Rng::seed_from(13);
    let m = TinyModel::random(small(16, 1), &mut rng).unwrap();
    let toks = tokens(&mut rng, 9, 32);
    let stats = collect_act_stats(&m, &[toks.clone()], "self").unwrap();
    let factors = smoothing_factors(&m, &stats, 0.5).unwrap();
    let mut orig_tap = TapRecorder::new();
    let base = m.forward(&toks, Mode::Float, &mut orig_tap).unwrap();

    let mut s = m.clone();
    smooth_model(&mut s, &factors).unwrap();
    fuse_rmsnorm(&mut s).unwrap();
    let q = random_hadamard(16, &mut rng).unwrap();
    rotate_model(&mut s, &q, RotateOptions::default()).unwrap();
    assert_eq!(s.state, TransformState::SmoothRot);
    let mut tap = TapRecorder::new();
    let y = s.forward(&toks, Mode::Float, &mut tap).unwrap();
    assert!(y.rel_inf_error(&base).unwrap() <= 1e-5);

    let mut expected = orig_tap.taps[0].pre_hadamard.clone();
    for row in expected.rows_iter_mut() {
        for (v, sj) in row.iter_mut().zip(&factors[0].s) {
            *v /= sj;
        }
    }
    let scale = expected.abs_max();
    let smoothed = &tap.taps[0].pre_hadamard;
    assert!(smoothed.max_abs_diff(&expected).unwrap() <= 1e-5 * scale.max(1.0));
    crate::rotation::walsh_hadamard_in_place(&mut expected).unwrap();
    assert!(tap.taps[0].pre_quant.max_abs_diff(&expected).unwrap() <= 1e-5 * scale.max(1.0));
}

#[test]
fn state_transitions_enforced() {
    let mut rng = Rng::seed_from(14);
    let mut m = TinyModel::random(small(16, 1), &mut rng).unwrap();
    fuse_rmsnorm(&mut m).unwrap();
    let q = random_hadamard(16, &mut rng).unwrap();
    rotate_model(&mut m, &q, RotateOptions::default()).unwrap();
    let ones = vec![crate::smoothing::SmoothingFactors::ones(64)];
    assert!(matches!(smooth_model(&mut m, &ones), Err(Error::InvalidState(_))));
    assert!(rotate_model(&mut m, &q, RotateOptions::default()).is_err());
}

#[test]
fn config_validation() {
    let bad = ModelConfig {
        hidden: 24,
        ..ModelConfig::default()
    };
    assert!(bad.validate().is_err());
    let bad = ModelConfig {
        heads: 3,
        ..ModelConfig::default()
    };
    assert!(bad.validate().is_err());
    assert!(ModelConfig::default().validate().is_ok());
}
