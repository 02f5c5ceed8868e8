use smoothrot::archive::Archive;
use smoothrot::config::ExperimentConfig;
use smoothrot::core::experiment::Pipeline;
use smoothrot::core::model::{Mode, NoObserver, QuantConfig};
use smoothrot::core::quant::{quantize, QuantSpec};
use smoothrot::core::rotation::{hadamard_matrix, OrthogonalTransform};
use smoothrot::core::smoothing::{collect_act_stats, smoothing_factors};
use smoothrot::core::{Rng, Tensor};
use smoothrot::harness::{apply_pipeline, generate_model, seeded_rotation};
use smoothrot::persist::*;

fn small_cfg(seed: u64) -> ExperimentConfig {
    ExperimentConfig::parse(&format!(
        "seed = {seed}\nvocab = 64\nhidden = 32\nintermediate = 64\nlayers = 2\nheads = 2\noutlier_channels = 2"
    ))
    .unwrap()
}

fn roundtrip(a: &Archive) -> Archive {
    Archive::from_bytes(&a.to_bytes().unwrap()).unwrap()
}

#[test]
fn model_round_trip_preserves_function_and_manifest() {
    let cfg = small_cfg(3);
    let (model, circuit) = generate_model(&cfg).unwrap();
    let quant = QuantConfig::w4a4kv4(32);
    let a = roundtrip(&model_to_archive(&model, Some(&quant), circuit.as_ref()));
    let (back, manifest) = model_from_archive(a).unwrap();
    assert_eq!(back, model);
    assert_eq!(manifest.quant, Some(quant));
    assert_eq!(manifest.outliers, circuit);
    assert_eq!(manifest.transform_state, model.state);
    let seq = vec![vec![0u32, 5, 9, 1, 33]];
    let x = model.forward_batch(&seq, Mode::Float, &mut NoObserver).unwrap();
    let y = back.forward_batch(&seq, Mode::Float, &mut NoObserver).unwrap();
    assert_eq!(x, y);
}

#[test]
fn transformed_model_round_trip_keeps_state_and_hadamard_flags() {
    let cfg = small_cfg(4);
    let (model, _) = generate_model(&cfg).unwrap();
    let calib = vec![(0..32u32).collect::<Vec<_>>()];
    let stats = collect_act_stats(&model, &calib, "unit").unwrap();
    let q = seeded_rotation(&cfg).unwrap();
    let v = apply_pipeline(&model, Some(&stats), Pipeline::SmoothRot, 0.5, Some(&q), Default::default()).unwrap();
    let (back, m) = model_from_archive(roundtrip(&model_to_archive(&v.model, None, None))).unwrap();
    assert_eq!(back, v.model);
    assert!(m.norms_fused);
    assert!(m.down_proj_hadamard.iter().all(|h| *h));
    assert_eq!(serde_json::to_value(m.transform_state).unwrap(), "smoothrot");
}

#[test]
fn model_archive_rejects_wrong_kind_and_shapes() {
    let cfg = small_cfg(5);
    let (model, _) = generate_model(&cfg).unwrap();
    let mut a = model_to_archive(&model, None, None);
    a.insert("head", Tensor::zeros(&[3, 3]));
    assert!(model_from_archive(a).is_err());
    let stats = stats_to_archive(&[]);
    assert!(model_from_archive(stats).is_err());
    assert!(model_from_archive(Archive::new()).is_err());
}

#[test]
fn stats_and_factors_round_trip() {
    let cfg = small_cfg(6);
    let (model, _) = generate_model(&cfg).unwrap();
    let calib = vec![(0..40u32).collect::<Vec<_>>(), (10..50u32).collect()];
    let stats = collect_act_stats(&model, &calib, "synthetic").unwrap();
    let back = stats_from_archive(&roundtrip(&stats_to_archive(&stats))).unwrap();
    assert_eq!(back, stats);

    let f = smoothing_factors(&model, &stats, 0.4).unwrap();
    let a = roundtrip(&factors_to_archive(&f, "synthetic", stats[0].token_count).unwrap());
    assert_eq!(a.tensor("s").unwrap().shape(), &[2, 64]);
    let (g, meta) = factors_from_archive(&a).unwrap();
    assert_eq!(g, f);
    assert_eq!(meta.alpha, 0.4);
    assert_eq!(meta.source, "synthetic");
    assert_eq!(meta.token_count, 80);
}

#[test]
fn quantized_tensor_round_trip() {
    let mut rng = Rng::seed_from(9);
    let x = rng.normal_tensor(4, 16, 1.0);
    let spec = QuantSpec::grouped_asymmetric(4, 8, 0.95).unwrap();
    let q = quantize(&x, &spec).unwrap();
    let mut a = Archive::new();
    insert_quantized(&mut a, "kv", &q);
    insert_quantized(&mut a, "other", &quantize(&x, &QuantSpec::per_token(8, 1.0).unwrap()).unwrap());
    let a = roundtrip(&a);
    assert_eq!(a.ints("kv.codes").unwrap().0, &[4, 16]);
    assert_eq!(load_quantized(&a, "kv").unwrap(), q);
    assert!(load_quantized(&a, "missing").is_err());
}

#[test]
fn quantized_tensor_with_out_of_range_code_is_rejected() {
    let x = Tensor::new(vec![1, 4], vec![1.0, -1.0, 0.5, 0.25]).unwrap();
    let mut q = quantize(&x, &QuantSpec::per_token(2, 1.0).unwrap()).unwrap();
    q.codes[0] = 5;
    let mut a = Archive::new();
    insert_quantized(&mut a, "w", &q);
    assert!(load_quantized(&roundtrip(&a), "w").is_err());
}

#[test]
fn explicit_rotation_loads_from_entry_q() {
    let h = hadamard_matrix(8).unwrap();
    let mut a = Archive::new();
    a.insert("Q", h.clone());
    let t = rotation_from_archive(&roundtrip(&a)).unwrap();
    assert!(matches!(t, OrthogonalTransform::Explicit(_)));
    assert_eq!(t.to_matrix(), h);

    let again = rotation_from_archive(&roundtrip(&rotation_to_archive(&t))).unwrap();
    assert_eq!(again, t);

    let mut bad = Archive::new();
    bad.insert("Q", Tensor::new(vec![2, 2], vec![1.0, 1.0, 0.0, 1.0]).unwrap());
    assert!(rotation_from_archive(&bad).is_err());
    assert!(rotation_from_archive(&Archive::new()).is_err());
}
