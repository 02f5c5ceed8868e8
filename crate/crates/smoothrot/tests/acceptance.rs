//! Acceptance suite. Each test prints one `[PASS]`/`[FAIL]` line with its
//! measured value and wall time, then asserts. Tests hold a shared lock so
//! timings are not inflated by each other on a single core.
//!
//! Run with `cargo test -p smoothrot --test acceptance`.

use std::io::Write;
use std::sync::Mutex;
use std::time::{Duration, Instant};

use proptest::prelude::*;
use proptest::test_runner::{Config as PropConfig, TestRunner};

use smoothrot::archive::Archive;
use smoothrot::config::{CalibSource, ExperimentConfig};
use smoothrot::core::experiment::Pipeline;
use smoothrot::core::model::{fuse_rmsnorm, rotate_model, Mode, ModelConfig, NoObserver, RotateOptions, TinyModel};
use smoothrot::core::quant::{dequantize, quantize, quantize_with, Granularity, QuantSpec, Scheme};
use smoothrot::core::rotation::{hadamard_matrix, random_hadamard, walsh_hadamard};
use smoothrot::core::smoothing::{collect_act_stats, smooth_model, smoothing_factors};
use smoothrot::core::weight_quant::{
    damped_hessian, damping_value, gptq_quantize_weight, gptq_with_hessian, proxy_loss, rtn_quantize_weight,
    ClipSearchConfig, GptqConfig,
};
use smoothrot::core::{Rng, Tensor};
use smoothrot::harness::{paired_trial, run_experiment, sweep_alpha, PairedTrial};
use smoothrot::persist::{model_from_archive, model_to_archive};

static SERIAL: Mutex<()> = Mutex::new(());

struct Outcome {
    passed: bool,
    detail: String,
}

fn criterion(id: u32, name: &str, budget: Duration, body: impl FnOnce() -> Outcome) {
    let _guard = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let start = Instant::now();
    let out = body();
    let took = start.elapsed();
    let in_budget = took <= budget;
    let passed = out.passed && in_budget;
    let line = format!(
        "[{}] {id:>2} {name}: {} ({:.2} s, budget {} s{})",
        if passed { "PASS" } else { "FAIL" },
        out.detail,
        took.as_secs_f64(),
        budget.as_secs(),
        if in_budget { "" } else { ", over budget" },
    );
    // Written past the harness capture so the line shows for passing tests too.
    let mut so = std::io::stdout().lock();
    let _ = writeln!(so, "{line}");
    let _ = so.flush();
    assert!(passed, "{line}");
}

fn outlier_cfg(seed: u64, extra: &[&str]) -> ExperimentConfig {
    let base = "calib_seqs=16 calib_len=64 compare=[\"rotate\"]".split(' ').map(String::from);
    let overrides: Vec<String> = base.chain(extra.iter().map(|s| s.to_string())).collect();
    ExperimentConfig::parse_with_overrides(&format!("seed = {seed}"), &overrides).unwrap()
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

// ---------------------------------------------------------------- quantizer

fn spec_strategy(cols: usize) -> impl Strategy<Value = QuantSpec> {
    let divisors: Vec<usize> = (1..=cols).filter(|g| cols % g == 0).collect();
    (
        prop::sample::select(vec![2u8, 4, 8]),
        prop::bool::ANY,
        0usize..4,
        prop::sample::select(divisors),
        0.5f32..=1.0,
    )
        .prop_map(|(bits, sym, gran, g, clip)| {
            let granularity = match gran {
                0 => Granularity::PerTensor,
                1 => Granularity::PerToken,
                2 => Granularity::PerChannel,
                _ => Granularity::PerGroup(g),
            };
            let scheme = if sym { Scheme::Symmetric } else { Scheme::Asymmetric };
            QuantSpec::new(bits, scheme, granularity, clip).unwrap()
        })
}

fn tensor_and_spec() -> impl Strategy<Value = (Tensor, QuantSpec)> {
    (1usize..6, 1usize..48)
        .prop_flat_map(|(rows, cols)| {
            let values = prop::collection::vec(
                prop_oneof![
                    8 => -4.0f32..4.0,
                    1 => -2000.0f32..2000.0,
                    1 => Just(0.0f32),
                ],
                rows * cols,
            );
            (Just(rows), Just(cols), values, spec_strategy(cols))
        })
        .prop_map(|(rows, cols, v, spec)| (Tensor::new(vec![rows, cols], v).unwrap(), spec))
}

fn check_quantizer(x: &Tensor, spec: &QuantSpec) -> Result<(), TestCaseError> {
    let q = quantize(x, spec).unwrap();
    let (lo, hi) = spec.code_range();
    let g = spec.group_len(x.shape()).unwrap();
    prop_assert!(q.codes.iter().all(|c| (lo..=hi).contains(c)), "code out of range");
    let deq = dequantize(&q).unwrap();
    for (gi, (xs, p)) in x.data().chunks_exact(g).zip(&q.params).enumerate() {
        let codes = &q.codes[gi * g..(gi + 1) * g];
        let d = &deq.data()[gi * g..(gi + 1) * g];
        for (&v, &r) in xs.iter().zip(d) {
            let t = v / p.delta + p.zero_point as f32;
            if t >= lo as f32 && t <= hi as f32 {
                let tol = 0.5 * p.delta * (1.0 + 1e-4) + 1e-6 * v.abs();
                prop_assert!((r - v).abs() <= tol, "|{r} - {v}| > Δ/2 with Δ={}", p.delta);
            }
        }
        let mut order: Vec<usize> = (0..g).collect();
        order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
        prop_assert!(order.windows(2).all(|w| codes[w[0]] <= codes[w[1]]), "not monotone");
    }
    let again = quantize_with(&deq, &q.params, spec).unwrap();
    prop_assert_eq!(&again.codes, &q.codes, "grid points are not fixed");
    Ok(())
}

#[test]
fn c01_quantizer_properties() {
    criterion(1, "quantizer property suite", Duration::from_secs(10), || {
        let mut runner = TestRunner::new_with_rng(
            PropConfig {
                cases: 1000,
                failure_persistence: None,
                ..PropConfig::default()
            },
            proptest::test_runner::TestRng::deterministic_rng(proptest::test_runner::RngAlgorithm::ChaCha),
        );
        let r = runner.run(&tensor_and_spec(), |(x, spec)| check_quantizer(&x, &spec));
        Outcome {
            passed: r.is_ok(),
            detail: match r {
                Ok(()) => "1000 random tensors x specs, 0 failures".into(),
                Err(e) => format!("failure: {e}"),
            },
        }
    });
}

// ---------------------------------------------------------------- hadamard

#[test]
fn c02_hadamard_algebra() {
    criterion(2, "Hadamard algebra", Duration::from_secs(10), || {
        let (mut orth, mut fast, mut spread) = (0.0f64, 0.0f64, 0.0f64);
        let mut rng = Rng::seed_from(2);
        let mut n = 2;
        while n <= 1024 {
            let h = hadamard_matrix(n).unwrap();
            let ht = h.transpose();
            let hth = ht.matmul(&h).unwrap();
            let err = hth.max_abs_diff(&Tensor::identity(n)).unwrap() as f64;
            orth = orth.max(err);
            orth = orth.max(random_hadamard(n, &mut rng).unwrap().orthogonality_error());

            // Dense reference accumulated in f64 so only the fast path's rounding shows.
            let x = rng.normal_tensor(4, n, 1.0);
            let y = walsh_hadamard(&x).unwrap();
            for r in 0..4 {
                for j in 0..n {
                    let dense: f64 = (0..n).map(|k| x.get(r, k) as f64 * h.get(k, j) as f64).sum();
                    fast = fast.max((y.get(r, j) as f64 - dense).abs());
                }
            }

            let m = 1400.0f32;
            let mut spike = Tensor::zeros(&[1, n]);
            spike.set(0, rng.below(n), m);
            let target = m / (n as f32).sqrt();
            let y = walsh_hadamard(&spike).unwrap();
            for v in y.data() {
                spread = spread.max(((v.abs() - target) / target).abs() as f64);
            }
            n *= 2;
        }
        Outcome {
            passed: orth <= 1e-6 && fast <= 1e-6 && spread <= 1e-6,
            detail: format!(
                "n=2..1024: |QtQ-I|inf {orth:.2e}, fast vs dense {fast:.2e}, spike spread rel err {spread:.2e} (tol 1e-6)"
            ),
        }
    });
}

// ---------------------------------------------------------------- invariance

fn logits(m: &TinyModel, seqs: &[Vec<u32>]) -> Tensor {
    m.forward_batch(seqs, Mode::Float, &mut NoObserver).unwrap()
}

#[test]
fn c03_float_invariance() {
    criterion(3, "computational invariance", Duration::from_secs(30), || {
        let mut worst = [0.0f64; 3];
        let mut failures = 0;
        for i in 0..20u64 {
            let d = [16, 32, 64][i as usize % 3];
            let mut rng = Rng::seed_from(300 + i);
            let config = ModelConfig {
                vocab: 128,
                hidden: d,
                intermediate: 4 * d,
                layers: 2,
                heads: 2,
                ..ModelConfig::default()
            };
            let base = TinyModel::random(config, &mut rng).unwrap();
            let seqs: Vec<Vec<u32>> = (0..2).map(|_| (0..32).map(|_| rng.below(128) as u32).collect()).collect();
            let reference = logits(&base, &seqs);

            let mut fused = base.clone();
            fuse_rmsnorm(&mut fused).unwrap();

            let stats = collect_act_stats(&base, &seqs, "random").unwrap();
            let mut smoothed = base.clone();
            let f = smoothing_factors(&smoothed, &stats, rng.uniform_range(0.05, 0.95)).unwrap();
            smooth_model(&mut smoothed, &f).unwrap();
            fuse_rmsnorm(&mut smoothed).unwrap();

            let mut rotated = smoothed.clone();
            let q = random_hadamard(d, &mut rng).unwrap();
            rotate_model(&mut rotated, &q, RotateOptions::default()).unwrap();

            for (k, m) in [&fused, &smoothed, &rotated].into_iter().enumerate() {
                let e = logits(m, &seqs).rel_inf_error(&reference).unwrap();
                worst[k] = worst[k].max(e);
                if e > 1e-5 {
                    failures += 1;
                }
            }
        }
        Outcome {
            passed: failures == 0,
            detail: format!(
                "20 models d in {{16,32,64}}: worst rel inf err fuse {:.2e}, +smooth {:.2e}, +rotate {:.2e}; {failures} failures (tol 1e-5)",
                worst[0], worst[1], worst[2]
            ),
        }
    });
}

// ---------------------------------------------------------------- paired trials

#[test]
fn c04_outlier_suppression() {
    criterion(4, "outlier suppression", Duration::from_secs(60), || {
        let (mut ordered, mut tenfold) = (0, 0);
        let mut ratios = Vec::new();
        let grid = "alpha_grid=[0.05,0.15,0.25,0.35,0.45,0.55,0.65,0.75,0.85,0.95]";
        for seed in 0..100u64 {
            let t: PairedTrial = paired_trial(&outlier_cfg(seed, &["val_seqs=1", grid]), 1, false).unwrap();
            if t.max_smoothrot < t.max_rotate && t.max_rotate < t.max_original {
                ordered += 1;
            }
            if t.max_smoothrot <= 0.1 * t.max_rotate {
                tenfold += 1;
            }
            ratios.push((t.max_rotate / t.max_smoothrot) as f64);
        }
        Outcome {
            passed: ordered == 100 && tenfold == 100,
            detail: format!(
                "ordering srot < rot < orig in {ordered}/100, srot <= 0.1 rot in {tenfold}/100, median rot/srot {:.1}x",
                median(ratios)
            ),
        }
    });
}

fn win_rate(extra: &[&str]) -> (usize, f64) {
    let mut wins = 0;
    let mut closures = Vec::new();
    for seed in 0..100u64 {
        let t = paired_trial(&outlier_cfg(seed, extra), 1, true).unwrap();
        if t.smoothrot_mse.unwrap() < t.rotate_mse.unwrap() {
            wins += 1;
        }
        closures.push(t.gap_closure().unwrap());
    }
    (wins, median(closures))
}

#[test]
fn c05_quantization_error_win_rate() {
    criterion(5, "4-bit RTN win rate", Duration::from_secs(300), || {
        let (wins, med) = win_rate(&[]);
        Outcome {
            passed: wins >= 95 && med >= 0.10,
            detail: format!("smoothrot < rotate logit MSE in {wins}/100 (need 95), median gap closure {:.1}% (need 10%)", 100.0 * med),
        }
    });
}

// ---------------------------------------------------------------- sweep

#[test]
fn c06_alpha_sweep_shape() {
    criterion(6, "alpha sweep shape", Duration::from_secs(120), || {
        let grid: Vec<f32> = (1..=19).map(|i| i as f32 * 0.05).collect();
        let cfg = outlier_cfg(6, &[]);
        let t = sweep_alpha(&cfg, &grid).unwrap();
        let wins = t.winning_alphas();
        let contiguous = t.winning_range_contiguous();

        let norm = outlier_cfg(6, &["normalize_weight_maxima=true"]);
        let n = sweep_alpha(&norm, &[0.0, 0.05]).unwrap();
        let end = n.rows[0].metric;
        let rel = (end - n.rotate_reference).abs() / n.rotate_reference;
        let near = (n.rows[1].metric - n.rotate_reference).abs() / n.rotate_reference;
        let range = match (wins.first(), wins.last()) {
            (Some(a), Some(b)) => format!("{a:.2}..{b:.2}"),
            _ => "none".into(),
        };
        Outcome {
            passed: !wins.is_empty() && contiguous && rel <= 0.05,
            detail: format!(
                "winning alpha range {range} ({} of 19, contiguous {contiguous}); normalized maxima: alpha 0 within {:.2}% of rotate, alpha 0.05 within {:.1}%",
                wins.len(),
                100.0 * rel,
                100.0 * near
            ),
        }
    });
}

#[test]
fn c07_random_token_calibration() {
    criterion(7, "random-token calibration", Duration::from_secs(300), || {
        let source = format!("calib_source={}", CalibSource::RandomTokens.as_str());
        let (wins, med) = win_rate(&[&source]);
        Outcome {
            passed: wins >= 90,
            detail: format!("smoothrot beats rotate in {wins}/100 (need 90), median gap closure {:.1}%", 100.0 * med),
        }
    });
}

// ---------------------------------------------------------------- GPTQ

fn correlated_inputs(rng: &mut Rng, tokens: usize, n: usize, mix: f32) -> Tensor {
    let z = rng.normal_tensor(tokens, n, 1.0);
    let a = Tensor::from_fn(n, n, |r, c| if r == c { 1.0 } else { mix * rng.normal() });
    z.matmul(&a).unwrap()
}

/// For a 2-column weight, the second code of each row must minimise the
/// proxy loss over every code once the first code is fixed.
fn brute_force_2x2() -> bool {
    let spec = QuantSpec::per_channel(2, 1.0).unwrap();
    let cfg = GptqConfig {
        clip: ClipSearchConfig::none(),
        ..GptqConfig::default()
    };
    let (lo, hi) = spec.code_range();
    let mut rng = Rng::seed_from(82);
    let mut ok = true;
    for _ in 0..50 {
        let w = rng.normal_tensor(2, 2, 1.0);
        let x = correlated_inputs(&mut rng, 64, 2, 1.5);
        let hd = damped_hessian(&x, cfg.damping);
        let g = gptq_quantize_weight(&w, &spec, &x, &cfg).unwrap();
        let rtn = rtn_quantize_weight(&w, &spec, &cfg.clip).unwrap();
        for r in 0..2 {
            let p = g.quantized.params[r];
            let c0 = g.quantized.codes[2 * r];
            ok &= c0 == rtn.quantized.codes[2 * r];
            let row_loss = |c1: i32| {
                let e0 = (w.get(r, 0) - (c0 - p.zero_point) as f32 * p.delta) as f64;
                let e1 = (w.get(r, 1) - (c1 - p.zero_point) as f32 * p.delta) as f64;
                hd[0] * e0 * e0 + 2.0 * hd[1] * e0 * e1 + hd[3] * e1 * e1
            };
            let best = (lo..=hi).map(row_loss).fold(f64::INFINITY, f64::min);
            ok &= row_loss(g.quantized.codes[2 * r + 1]) <= best * (1.0 + 1e-9) + 1e-12;
        }
    }
    ok
}

#[test]
fn c08_gptq_backend() {
    criterion(8, "GPTQ backend", Duration::from_secs(60), || {
        let spec = QuantSpec::per_channel(4, 1.0).unwrap();
        let cfg = GptqConfig::default();
        let mut rng = Rng::seed_from(8);
        let mut not_worse = 0;
        let mut gains = Vec::new();
        for _ in 0..100 {
            let (out, n) = (8 + rng.below(25), 8 + rng.below(25));
            let w = rng.normal_tensor(out, n, 1.0);
            let x = correlated_inputs(&mut rng, 4 * n, n, 0.4);
            let hd = damped_hessian(&x, cfg.damping);
            let g = gptq_quantize_weight(&w, &spec, &x, &cfg).unwrap();
            let r = rtn_quantize_weight(&w, &spec, &cfg.clip).unwrap();
            let lg = proxy_loss(&w, &dequantize(&g.quantized).unwrap(), &hd).unwrap();
            let lr = proxy_loss(&w, &dequantize(&r.quantized).unwrap(), &hd).unwrap();
            if lg <= lr + 1e-9 {
                not_worse += 1;
            }
            gains.push(1.0 - lg / lr);
        }

        let mut diag_equal = 0;
        for _ in 0..20 {
            let n = 4 + rng.below(29);
            let w = rng.normal_tensor(6, n, 1.0);
            let c = rng.uniform_range(0.5, 5.0) as f64;
            let mut h = vec![0.0; n * n];
            for i in 0..n {
                h[i * n + i] = c;
            }
            debug_assert!(damping_value(&h, n, cfg.damping) > 0.0);
            let g = gptq_with_hessian(&w, &spec, &h, &cfg).unwrap();
            let r = rtn_quantize_weight(&w, &spec, &cfg.clip).unwrap();
            if g.quantized == r.quantized {
                diag_equal += 1;
            }
        }
        let brute = brute_force_2x2();
        Outcome {
            passed: not_worse >= 99 && diag_equal == 20 && brute,
            detail: format!(
                "proxy loss <= RTN in {not_worse}/100 (median reduction {:.1}%), diagonal H equals RTN {diag_equal}/20, 2x2 b=2 brute force {}",
                100.0 * median(gains),
                if brute { "agrees" } else { "disagrees" }
            ),
        }
    });
}

// ---------------------------------------------------------------- clip search

#[test]
fn c09_clip_search() {
    criterion(9, "clip search", Duration::from_secs(10), || {
        let clip = ClipSearchConfig::default();
        let mut rng = Rng::seed_from(9);
        let (mut agree, mut clipped) = (0, 0);
        for i in 0..100 {
            let len = 16 + rng.below(113);
            let mut row: Vec<f32> = (0..len).map(|_| rng.normal() * 0.1).collect();
            if i % 2 == 0 {
                let k = rng.below(len);
                row[k] = rng.sign() * rng.uniform_range(1.0, 5.0);
            }
            let w = Tensor::new(vec![1, len], row).unwrap();
            let bits = [2u8, 4, 8][i % 3];
            let spec = QuantSpec::per_channel(bits, 1.0).unwrap();
            let mut best = (f64::INFINITY, 1.0f32);
            for &ratio in &clip.grid {
                let s = spec.with_clip(ratio).unwrap();
                let d = dequantize(&quantize(&w, &s).unwrap()).unwrap();
                let err: f64 = w.data().iter().zip(d.data()).map(|(a, b)| ((a - b) as f64).powi(2)).sum();
                if err < best.0 {
                    best = (err, ratio);
                }
            }
            let got = rtn_quantize_weight(&w, &spec, &clip).unwrap().ratios[0];
            if got == best.1 {
                agree += 1;
            }
            if best.1 < 1.0 {
                clipped += 1;
            }
        }
        Outcome {
            passed: agree == 100 && clipped > 0,
            detail: format!("search matches exhaustive grid minimum on {agree}/100 channels; optimum < 1.0 on {clipped}"),
        }
    });
}

// ---------------------------------------------------------------- determinism and I/O

#[test]
fn c10_determinism_and_io() {
    criterion(10, "determinism, archive I/O, default run", Duration::from_secs(120), || {
        let cfg = ExperimentConfig::with_seed(0);
        let start = Instant::now();
        let a = run_experiment(&cfg);
        let run_secs = start.elapsed().as_secs_f64();
        let b = run_experiment(&cfg);
        let identical = a.deterministic_json() == b.deterministic_json();
        let ok_run = a.error.is_none() && a.checks_passed();

        let (model, circuit) = smoothrot::harness::generate_model(&cfg).unwrap();
        let bytes = model_to_archive(&model, None, circuit.as_ref()).to_bytes().unwrap();
        let back = Archive::from_bytes(&bytes).unwrap();
        let exact = back.to_bytes().unwrap() == bytes && model_from_archive(back).unwrap().0 == model;

        let srot = a.variant(Pipeline::SmoothRot).and_then(|v| v.logit_mse).unwrap_or(f64::NAN);
        let rot = a.variant(Pipeline::Rotate).and_then(|v| v.logit_mse).unwrap_or(f64::NAN);
        Outcome {
            passed: identical && exact && ok_run && run_secs < 60.0,
            detail: format!(
                "reports identical {identical}, archive bit-exact {exact}, default run {run_secs:.1} s (limit 60 s) with checks {} (smoothrot {srot:.4} vs rotate {rot:.4})",
                if ok_run { "passing" } else { "failing" }
            ),
        }
    });
}
