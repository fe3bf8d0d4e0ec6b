//! Acceptance suite: one test per criterion, each printing a PASS line.
//!
//! Run with `cargo test --test acceptance -- --nocapture` to see the
//! per-criterion lines; the expensive toy-overfit training (criteria 6
//! and 7) runs once and is shared.

use std::sync::OnceLock;

use cwic::container::{self, CompressOpts, CompressedStream, RawImage};
use cwic::entropy::{self, EntropyModel, EntropyNet, EntropyTrainConfig, Predictor};
use cwic::metrics;
use cwic::nets::ModelParams;
use cwic::quant::{self, CodeBundle};
use cwic::tensor::{Tape, TensorId};
use cwic::train::{self, AdamState, TrainConfig};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

// ---------------------------------------------------------------------
// Criterion 1: gradient correctness.
// ---------------------------------------------------------------------

/// Central finite differences of a scalar graph against the tape
/// gradient; returns the worst relative error over every input element.
fn fd_worst(
    shapes: &[&[usize]],
    datas: &[Vec<f64>],
    build: impl Fn(&mut Tape, &[TensorId]) -> TensorId,
) -> f64 {
    let eval = |datas: &[Vec<f64>]| {
        let mut tape = Tape::new();
        let ids: Vec<TensorId> = shapes
            .iter()
            .zip(datas)
            .map(|(s, d)| tape.input(s, d.clone(), true))
            .collect();
        let loss = build(&mut tape, &ids);
        (tape.data(loss)[0], tape, ids, loss)
    };
    let (_, tape, ids, loss) = eval(datas);
    let store = tape.backward(loss).unwrap();
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for (arg, data) in datas.iter().enumerate() {
        let grad = store
            .grad(ids[arg])
            .map(<[f64]>::to_vec)
            .unwrap_or_default();
        for i in 0..data.len() {
            let mut plus = datas.to_vec();
            plus[arg][i] += h;
            let mut minus = datas.to_vec();
            minus[arg][i] -= h;
            let fd = (eval(&plus).0 - eval(&minus).0) / (2.0 * h);
            let a = if grad.is_empty() { 0.0 } else { grad[i] };
            worst = worst.max((a - fd).abs() / a.abs().max(fd.abs()).max(1e-6));
        }
    }
    worst
}

fn rand_vec(r: &mut ChaCha8Rng, len: usize) -> Vec<f64> {
    (0..len).map(|_| r.gen_range(-1.0..1.0)).collect()
}

/// Project onto a fixed random direction so non-scalar ops reduce to a
/// scalar loss that exercises the whole Jacobian.
fn project(tape: &mut Tape, out: TensorId, seed: u64) -> TensorId {
    let numel = tape.value(out).numel();
    let shape = tape.shape(out).to_vec();
    let dir = rand_vec(&mut ChaCha8Rng::seed_from_u64(seed), numel);
    let d = tape.input(&shape, dir, false);
    let prod = tape.mul(out, d).unwrap();
    tape.sum(prod)
}

#[test]
fn criterion_1_gradient_correctness() {
    let tol = 1e-4;
    let mut r = ChaCha8Rng::seed_from_u64(1);

    for case in 0..20 {
        // conv2d on random small geometry (input, weight, bias).
        let cin = r.gen_range(1..3);
        let cout = r.gen_range(1..3);
        let k = [1usize, 2, 3][case % 3];
        let stride = r.gen_range(1..3);
        let pad = r.gen_range(0..2);
        let h = r.gen_range(k..=4);
        let w = r.gen_range(k..=4);
        let x = rand_vec(&mut r, cin * h * w);
        let wt = rand_vec(&mut r, cout * cin * k * k);
        let b = rand_vec(&mut r, cout);
        let worst = fd_worst(
            &[&[1, cin, h, w], &[cout, cin, k, k], &[cout]],
            &[x, wt, b],
            |tape, ids| {
                let out = tape.conv2d(ids[0], ids[1], ids[2], stride, pad).unwrap();
                project(tape, out, 100 + case as u64)
            },
        );
        assert!(worst < tol, "conv2d case {case}: rel err {worst}");

        // sigmoid.
        let x = rand_vec(&mut r, 10);
        let worst = fd_worst(&[&[10]], &[x], |tape, ids| {
            let out = tape.sigmoid(ids[0]);
            project(tape, out, 200 + case as u64)
        });
        assert!(worst < tol, "sigmoid case {case}: rel err {worst}");

        // relu, sampled away from the kink where finite differences are
        // undefined.
        let x: Vec<f64> = rand_vec(&mut r, 10)
            .into_iter()
            .map(|v| if v.abs() < 0.05 { v + 0.2 } else { v })
            .collect();
        let worst = fd_worst(&[&[10]], &[x], |tape, ids| {
            let out = tape.relu(ids[0]);
            project(tape, out, 300 + case as u64)
        });
        assert!(worst < tol, "relu case {case}: rel err {worst}");

        // add, mul, sum in one graph.
        let x = rand_vec(&mut r, 9);
        let y = rand_vec(&mut r, 9);
        let worst = fd_worst(&[&[9], &[9]], &[x, y], |tape, ids| {
            let m = tape.mul(ids[0], ids[1]).unwrap();
            let a = tape.add(m, ids[1]).unwrap();
            tape.sum(a)
        });
        assert!(worst < tol, "mul/add/sum case {case}: rel err {worst}");

        // sq_error.
        let x = rand_vec(&mut r, 8);
        let y = rand_vec(&mut r, 8);
        let worst = fd_worst(&[&[8], &[8]], &[x, y], |tape, ids| {
            tape.sq_error(ids[0], ids[1]).unwrap()
        });
        assert!(worst < tol, "sq_error case {case}: rel err {worst}");

        // depth_to_space.
        let x = rand_vec(&mut r, 4 * 2 * 3);
        let worst = fd_worst(&[&[1, 4, 2, 3]], &[x], |tape, ids| {
            let out = tape.depth_to_space(ids[0], 2).unwrap();
            project(tape, out, 400 + case as u64)
        });
        assert!(worst < tol, "depth_to_space case {case}: rel err {worst}");
    }

    // Binarizer straight-through: the backward returns exactly the
    // upstream gradient everywhere on [0, 1].
    let mut r2 = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..20 {
        let e: Vec<f64> = (0..32).map(|_| r2.gen_range(0.0..1.0)).collect();
        let up: Vec<f64> = (0..32).map(|_| r2.gen_range(-3.0..3.0)).collect();
        let mut tape = Tape::new();
        let ei = tape.input(&[32], e, true);
        let b = quant::binarize(&mut tape, ei);
        let d = tape.input(&[32], up.clone(), false);
        let prod = tape.mul(b, d).unwrap();
        let loss = tape.sum(prod);
        let store = tape.backward(loss).unwrap();
        assert_eq!(store.grad(ei).unwrap(), up.as_slice());
    }

    // Mask gradient against the verbatim ceil-window condition, on an
    // exhaustive grid of 1000 p values times all k for n=64, L=16.
    let (n, levels) = (64usize, 16usize);
    for step in 1..=1000 {
        let p = step as f64 / 1001.0;
        for k in 1..=n {
            let ceil = ((k * levels) as f64 / n as f64).ceil();
            let expect = if levels as f64 * p - 1.0 <= ceil && ceil < levels as f64 * p + 2.0 {
                levels as f64
            } else {
                0.0
            };
            assert_eq!(
                quant::mask_backward(p, k, n, levels),
                expect,
                "p={p}, k={k}"
            );
        }
    }

    println!("ACCEPTANCE 1 (gradient correctness): PASS");
}

// ---------------------------------------------------------------------
// Criterion 2: quantizer oracle equivalence.
// ---------------------------------------------------------------------

#[test]
fn criterion_2_quantizer_oracle_equivalence() {
    fn quantize_oracle(p: f64, levels: usize) -> usize {
        (1..=levels)
            .find(|&l| (l - 1) as f64 / levels as f64 <= p && p < l as f64 / levels as f64)
            .unwrap()
            - 1
    }

    let mut r = ChaCha8Rng::seed_from_u64(3);
    for &(n, levels) in &[(64usize, 16usize), (128, 32)] {
        for _ in 0..5000 {
            let p = r.gen_range(1e-12..1.0);
            let q = quant::quantize_importance(p, levels).unwrap();
            assert_eq!(q, quantize_oracle(p, levels), "p={p}");
            let mask = quant::build_mask(&[q as u8], 1, 1, n, levels).unwrap();
            for k in 1..=n {
                let brute = u8::from(k as f64 <= (n / levels) as f64 * q as f64);
                assert_eq!(mask[k - 1], brute, "p={p}, k={k}");
            }
        }
    }

    // Exact bit-count identity on random maps.
    for _ in 0..200 {
        let (h, w, n, levels) = (7usize, 9usize, 64usize, 16usize);
        let imp_q: Vec<u8> = (0..h * w).map(|_| r.gen_range(0..levels as u8)).collect();
        let mask = quant::build_mask(&imp_q, h, w, n, levels).unwrap();
        let total: usize = mask.iter().map(|&m| m as usize).sum();
        let expect = (n / levels) * imp_q.iter().map(|&q| q as usize).sum::<usize>();
        assert_eq!(total, expect);
    }

    println!("ACCEPTANCE 2 (quantizer oracle equivalence): PASS");
}

// ---------------------------------------------------------------------
// Criterion 3: arithmetic coder roundtrip and length bound.
// ---------------------------------------------------------------------

#[test]
fn criterion_3_arithmetic_coder() {
    let mut r = ChaCha8Rng::seed_from_u64(4);
    let len = 100_000;
    for case in 0..200 {
        let probs: Vec<f64> = (0..len).map(|_| r.gen_range(1e-4..1.0 - 1e-4)).collect();
        let bits: Vec<bool> = probs.iter().map(|&p| r.gen_bool(p)).collect();
        let bytes = entropy::ac_encode(&bits, &probs);
        let decoded = entropy::ac_decode(&bytes, len, |idx, _| probs[idx]).unwrap();
        assert_eq!(decoded, bits, "case {case}: roundtrip mismatch");

        let budget_bits: f64 = bits
            .iter()
            .zip(&probs)
            .map(|(&b, &p)| -(if b { p } else { 1.0 - p }).log2())
            .sum();
        let limit = budget_bits * 1.02 / 8.0 + 8.0;
        assert!(
            (bytes.len() as f64) <= limit,
            "case {case}: {} bytes over the {limit:.1}-byte budget",
            bytes.len()
        );
    }
    println!("ACCEPTANCE 3 (arithmetic coder): PASS");
}

// ---------------------------------------------------------------------
// Criterion 4: encode/decode context symmetry.
// ---------------------------------------------------------------------

#[test]
fn criterion_4_context_symmetry() {
    let mut r = ChaCha8Rng::seed_from_u64(5);
    for case in 0..200 {
        let n = r.gen_range(1..=8usize);
        let h = r.gen_range(1..=8usize);
        let w = r.gen_range(1..=8usize);
        let levels = *[1usize, 2, 4, 8]
            .iter()
            .filter(|&&l| n % l == 0)
            .last()
            .unwrap();
        let raw: Vec<u8> = (0..n * h * w).map(|_| r.gen_range(0..=1)).collect();
        let imp_q: Vec<u8> = (0..h * w).map(|_| r.gen_range(0..levels as u8)).collect();
        let bundle = CodeBundle::build(n, levels, h, w, raw, imp_q).unwrap();

        // Decode side: bits arrive in schedule order; every cuboid must
        // match the encode side, which sees the full array.
        let mut partial = vec![0u8; bundle.codes.len()];
        for (k, i, j) in entropy::schedule(&bundle) {
            let enc = entropy::code_context(&bundle, k, i, j);
            let dec = entropy::extract_context(
                &partial,
                Some(&bundle.mask),
                bundle.n,
                bundle.h,
                bundle.w,
                k,
                i,
                j,
            );
            assert_eq!(enc, dec, "case {case} at ({k},{i},{j})");
            let idx = (k * bundle.h + i) * bundle.w + j;
            partial[idx] = bundle.codes[idx];
        }
        assert_eq!(partial, bundle.codes);

        // Both payloads roundtrip through the real coder on every bundle
        // (a net predictor every tenth case, frequency tables otherwise).
        let model = if case % 10 == 0 {
            Predictor::Net(EntropyNet::init(case as u64))
        } else {
            Predictor::Freq(entropy::FreqTable::new())
        };
        let bytes = entropy::encode_code_payload(&bundle, &mut model.clone());
        let decoded = entropy::decode_code_payload(
            &bytes,
            &bundle.mask,
            bundle.n,
            bundle.h,
            bundle.w,
            &mut model.clone(),
        )
        .unwrap();
        assert_eq!(decoded, bundle.codes, "case {case}: code payload roundtrip");
        if bundle.levels > 1 {
            let bytes = entropy::encode_importance_payload(
                &bundle.imp_q,
                bundle.h,
                bundle.w,
                bundle.levels,
                &mut model.clone(),
            )
            .unwrap();
            let decoded = entropy::decode_importance_payload(
                &bytes,
                bundle.h,
                bundle.w,
                bundle.levels,
                &mut model.clone(),
            )
            .unwrap();
            assert_eq!(decoded, bundle.imp_q, "case {case}: importance roundtrip");
        }
    }
    println!("ACCEPTANCE 4 (context symmetry): PASS");
}

// ---------------------------------------------------------------------
// Criterion 5: lossless transport and corruption robustness.
// ---------------------------------------------------------------------

#[test]
fn criterion_5_lossless_transport() {
    let mut r = ChaCha8Rng::seed_from_u64(6);
    for case in 0..50u64 {
        let n = if case % 10 == 9 { 128 } else { 64 };
        let mut params = ModelParams::init(1000 + case, n).unwrap();
        if case % 7 == 3 {
            params.importance_enabled = false;
        }
        let w = r.gen_range(8..40);
        let h = r.gen_range(8..40);
        let mut rgb = vec![0u8; w * h * 3];
        r.fill(rgb.as_mut_slice());
        let image = RawImage::new(w, h, rgb);

        let entropy_model = EntropyModel::net(case);
        let opts = match case % 3 {
            0 => CompressOpts::default(),
            1 => CompressOpts {
                entropy_codes: false,
                entropy_importance: false,
                use_freq_table: false,
            },
            _ => CompressOpts {
                use_freq_table: true,
                ..CompressOpts::default()
            },
        };

        let source = container::analyze(&image, &params).unwrap();
        let stream = container::compress(&image, &params, Some(&entropy_model), &opts).unwrap();
        let bytes = stream.to_bytes();
        let parsed = CompressedStream::from_bytes(&bytes).unwrap();
        let recovered = container::recover_bundle(&parsed, &params, Some(&entropy_model)).unwrap();
        assert_eq!(recovered.bundle.imp_q, source.imp_q, "case {case}");
        assert_eq!(recovered.bundle.codes, source.codes, "case {case}");

        // Entropy coding must never be catastrophic: coded payloads fall
        // back to raw, so the total stays within the raw size.
        let raw_total = entropy::raw_code_payload(&source).len()
            + if params.importance_enabled {
                entropy::raw_importance_payload(&source.imp_q, source.levels)
                    .unwrap()
                    .len()
            } else {
                0
            };
        assert!(
            stream.imp_payload.len() + stream.code_payload.len() <= raw_total + 16,
            "case {case}: coded payloads exceed raw + 16"
        );
    }

    // 1000 single-byte corruptions: every outcome is Ok or a clean error.
    let params = ModelParams::init(42, 64).unwrap();
    let entropy_model = EntropyModel::net(42);
    let image = RawImage::new(16, 16, vec![99; 16 * 16 * 3]);
    let stream = container::compress(
        &image,
        &params,
        Some(&entropy_model),
        &CompressOpts::default(),
    )
    .unwrap();
    let bytes = stream.to_bytes();
    let mut r = ChaCha8Rng::seed_from_u64(7);
    let mut clean_errors = 0usize;
    for _ in 0..1000 {
        let mut mutated = bytes.clone();
        let pos = r.gen_range(0..mutated.len());
        let bit = 1u8 << r.gen_range(0..8);
        mutated[pos] ^= bit;
        match CompressedStream::from_bytes(&mutated) {
            Err(_) => clean_errors += 1,
            Ok(parsed) => {
                if container::decompress(&parsed, &params, Some(&entropy_model)).is_err() {
                    clean_errors += 1;
                }
            }
        }
    }
    println!(
        "ACCEPTANCE 5 (lossless transport): PASS ({clean_errors}/1000 corruptions rejected, rest decoded to something)"
    );
}

// ---------------------------------------------------------------------
// Criteria 6 and 7 share one toy training experiment.
// ---------------------------------------------------------------------

const TOY_PATCH: usize = 64;
const TOY_STEPS: usize = 2000;

/// Eight deterministic 64x64 patches: gradients, sinusoid textures,
/// checkers, stripes. Generated on the u8 grid so PPM conversions are
/// exact.
fn toy_images() -> Vec<RawImage> {
    let ps = TOY_PATCH;
    let mut images = Vec::new();
    let makers: Vec<Box<dyn Fn(usize, usize) -> [u8; 3]>> = vec![
        Box::new(|x, y| [(x * 4) as u8, (y * 4) as u8, 128]),
        Box::new(|x, y| [(255 - x * 4) as u8, 64, (y * 4) as u8]),
        Box::new(|x, y| {
            let v = (127.0 + 120.0 * ((x as f64) / 4.5).sin() * ((y as f64) / 6.5).cos()) as u8;
            [v, v / 2 + 60, 255 - v]
        }),
        Box::new(|x, y| {
            let v = (127.0 + 110.0 * ((x as f64 + 2.0 * y as f64) / 7.0).sin()) as u8;
            [v, v, v]
        }),
        Box::new(|x, y| {
            if (x / 8 + y / 8) % 2 == 0 {
                [230, 40, 40]
            } else {
                [30, 30, 200]
            }
        }),
        Box::new(|x, y| {
            if (x + y) % 16 < 8 {
                [210, 210, 60]
            } else {
                [60, 120, 60]
            }
        }),
        Box::new(|x, y| {
            let dx = x as f64 - 32.0;
            let dy = y as f64 - 32.0;
            let d = ((dx * dx + dy * dy).sqrt() * 4.0) as u8;
            [d, 255 - d, d / 2 + 90]
        }),
        Box::new(|x, y| {
            let v = ((x * x + 3 * y) % 251) as u8;
            [v, (v / 3) * 2, 255 - v / 2]
        }),
    ];
    for f in makers {
        let mut rgb = vec![0u8; ps * ps * 3];
        for y in 0..ps {
            for x in 0..ps {
                let px = f(x, y);
                rgb[(y * ps + x) * 3..(y * ps + x) * 3 + 3].copy_from_slice(&px);
            }
        }
        images.push(RawImage::new(ps, ps, rgb));
    }
    images
}

fn toy_config(target_bpp: f64) -> TrainConfig {
    TrainConfig {
        gamma: 0.01,
        target_bpp,
        n: 64,
        levels: 16,
        batch_size: 1,
        max_steps_per_stage: TOY_STEPS,
        lr_ladder: vec![1e-4],
        seed: 9,
        patch_size: TOY_PATCH,
        importance_enabled: true,
        ma_window: 50,
        patience: 0,
    }
}

struct ToyRun {
    initial_objective: f64,
    final_objective: f64,
    final_rate_loss: f64,
    mean_sum_q: f64,
    params: ModelParams,
}

/// 2000 single-patch ADAM steps at lr 1e-4 over the 8-patch set.
fn toy_train(cfg: &TrainConfig, patches: &[Vec<f64>]) -> ToyRun {
    let batch: Vec<&[f64]> = patches.iter().map(|p| p.as_slice()).collect();
    let mut params = ModelParams::init(cfg.seed, cfg.n).unwrap();
    params.importance_enabled = cfg.importance_enabled;
    let (initial_objective, _) = train::objective(&batch, &params, cfg).unwrap();

    let mut state = AdamState::new(&params);
    for step in 0..TOY_STEPS {
        let pick = step % batch.len();
        let (_, grads) = train::objective_with_grads(&[batch[pick]], &params, cfg).unwrap();
        train::adam_step(&mut params, &grads, &mut state, cfg.lr_ladder[0]);
    }

    let (final_objective, stats) = train::objective(&batch, &params, cfg).unwrap();
    let final_rate_loss = stats.iter().map(|s| s.rate_loss).sum::<f64>();
    let mean_sum_q = stats.iter().map(|s| s.sum_q as f64).sum::<f64>() / stats.len() as f64;
    ToyRun {
        initial_objective,
        final_objective,
        final_rate_loss,
        mean_sum_q,
        params,
    }
}

struct ToyExperiment {
    /// r above sum(p) at initialization (r = h*w, unreachable by sum(p)).
    relaxed: ToyRun,
    /// r forced to zero: the rate penalty is always active.
    tight: ToyRun,
}

fn toy_experiment() -> &'static ToyExperiment {
    static EXPERIMENT: OnceLock<ToyExperiment> = OnceLock::new();
    EXPERIMENT.get_or_init(|| {
        let patches: Vec<Vec<f64>> = toy_images().iter().map(|img| img.to_planes()).collect();
        // code map is 8x8 = 64 positions; target_bpp 1.0 puts r at
        // h*w = 64 > sum(p) at init (~32); target_bpp 0 puts r at 0.
        let relaxed_cfg = toy_config(1.0);
        let tight_cfg = toy_config(0.0);
        let (relaxed, tight) = std::thread::scope(|scope| {
            let a = scope.spawn(|| toy_train(&relaxed_cfg, &patches));
            let b = scope.spawn(|| toy_train(&tight_cfg, &patches));
            (a.join().unwrap(), b.join().unwrap())
        });
        ToyExperiment { relaxed, tight }
    })
}

#[test]
fn criterion_6_toy_overfit_rate_distortion() {
    let exp = toy_experiment();

    // Objective falls by at least half over 2000 steps.
    let (initial, fin) = (exp.relaxed.initial_objective, exp.relaxed.final_objective);
    assert!(
        fin <= 0.5 * initial,
        "objective only moved {initial:.2} -> {fin:.2}"
    );

    // With r above sum(p) at init, the threshold is never exceeded and
    // the rate term is zero at convergence.
    assert_eq!(
        exp.relaxed.final_rate_loss, 0.0,
        "rate loss should sit at zero below the threshold"
    );

    // With r forced to 0 the penalty is always on, so the allocated bit
    // budget sum(Q) must come out strictly lower.
    assert!(
        exp.tight.mean_sum_q < exp.relaxed.mean_sum_q,
        "rate pressure did not reduce the bit budget: {} vs {}",
        exp.tight.mean_sum_q,
        exp.relaxed.mean_sum_q
    );

    println!(
        "ACCEPTANCE 6 (toy overfit): PASS (objective {:.1} -> {:.1}, rate loss {}, mean sumQ {:.1} vs {:.1})",
        initial, fin, exp.relaxed.final_rate_loss, exp.relaxed.mean_sum_q, exp.tight.mean_sum_q
    );
}

#[test]
fn criterion_7_entropy_coder_learning() {
    let exp = toy_experiment();
    let params = &exp.relaxed.params;
    let images = toy_images();

    // Harvest contexts from the first six patches; hold out the last two.
    let mut train_codes = entropy::ContextCorpus::default();
    let mut train_imp = entropy::ContextCorpus::default();
    let mut held_codes = entropy::ContextCorpus::default();
    for (idx, image) in images.iter().enumerate() {
        let bundle = container::analyze(image, params).unwrap();
        let codes = entropy::harvest_codes(&bundle);
        if idx < 6 {
            train_codes.extend(&codes);
            train_imp.extend(
                &entropy::harvest_importance(&bundle.imp_q, bundle.h, bundle.w, bundle.levels)
                    .unwrap(),
            );
        } else {
            held_codes.extend(&codes);
        }
    }
    assert!(!held_codes.is_empty(), "held-out patches produced no codes");

    let cfg = EntropyTrainConfig::default();
    let (codes_net, _train_nll) =
        entropy::train_net(&EntropyNet::init(1), &train_codes, &cfg).unwrap();
    let (imp_net, _) = entropy::train_net(&EntropyNet::init(2), &train_imp, &cfg).unwrap();
    let held_nll = entropy::nll_bits(&Predictor::Net(codes_net.clone()), &held_codes);
    assert!(
        held_nll < 1.0,
        "held-out NLL {held_nll} bits/bit is not below the 0.5-model"
    );

    // The fully entropy-coded file never exceeds the uncoded one, and the
    // trained model should beat it clearly in total.
    let model = EntropyModel {
        codes: Predictor::Net(codes_net),
        importance: Predictor::Net(imp_net),
    };
    let raw_opts = CompressOpts {
        entropy_codes: false,
        entropy_importance: false,
        use_freq_table: false,
    };
    let mut total_full = 0usize;
    let mut total_raw = 0usize;
    for image in &images {
        let full =
            container::compress(image, params, Some(&model), &CompressOpts::default()).unwrap();
        let raw = container::compress(image, params, None, &raw_opts).unwrap();
        assert!(
            full.total_bytes() <= raw.total_bytes(),
            "entropy-coded file larger than the raw one"
        );
        total_full += full.total_bytes();
        total_raw += raw.total_bytes();
    }
    assert!(
        total_full < total_raw,
        "entropy coding won nothing: {total_full} vs {total_raw}"
    );

    println!(
        "ACCEPTANCE 7 (entropy coder learning): PASS (held-out NLL {held_nll:.3} bits/bit, files {total_full} vs {total_raw} bytes raw)"
    );
}

// ---------------------------------------------------------------------
// Criterion 8: metrics.
// ---------------------------------------------------------------------

#[test]
fn criterion_8_metrics() {
    let mut r = ChaCha8Rng::seed_from_u64(8);
    let mut rgb = vec![0u8; 32 * 24 * 3];
    r.fill(rgb.as_mut_slice());
    let x = RawImage::new(32, 24, rgb);

    let s = metrics::ssim(&x, &x).unwrap();
    assert!((s - 1.0).abs() <= 1e-9, "ssim(x,x) = {s}");

    // Constant images match the closed form.
    let a_val = 52.0;
    let b_val = 178.0;
    let a = RawImage::new(16, 16, vec![a_val as u8; 16 * 16 * 3]);
    let b = RawImage::new(16, 16, vec![b_val as u8; 16 * 16 * 3]);
    let c1 = (0.01f64 * 255.0) * (0.01 * 255.0);
    let expect = (2.0 * a_val * b_val + c1) / (a_val * a_val + b_val * b_val + c1);
    let got = metrics::ssim(&a, &b).unwrap();
    assert!((got - expect).abs() <= 1e-9, "{got} vs {expect}");

    // The +5 constant offset case.
    let base: Vec<u8> = (0..16 * 16 * 3).map(|i| (i % 200) as u8).collect();
    let shifted: Vec<u8> = base.iter().map(|&v| v + 5).collect();
    let x = RawImage::new(16, 16, base);
    let y = RawImage::new(16, 16, shifted);
    let p = metrics::psnr(&x, &y).unwrap();
    assert!((p - 34.1514).abs() <= 0.01, "psnr {p}");
    assert_eq!(metrics::psnr(&x, &x).unwrap(), f64::INFINITY);

    // Reported bpp is exactly 8 * filesize / pixels.
    let dir = tempfile::tempdir().unwrap();
    let params = ModelParams::init(11, 64).unwrap();
    let image = RawImage::new(24, 16, vec![77; 24 * 16 * 3]);
    let stream = container::compress(
        &image,
        &params,
        None,
        &CompressOpts {
            use_freq_table: true,
            ..CompressOpts::default()
        },
    )
    .unwrap();
    let path = dir.path().join("x.cwic");
    std::fs::write(&path, stream.to_bytes()).unwrap();
    let file_len = std::fs::metadata(&path).unwrap().len() as usize;
    assert_eq!(file_len, stream.total_bytes());
    let bpp = metrics::bpp(file_len, 24, 16);
    assert_eq!(bpp, 8.0 * file_len as f64 / (24.0 * 16.0));

    println!("ACCEPTANCE 8 (metrics): PASS");
}

// ---------------------------------------------------------------------
// Criterion 9: bitplane representation.
// ---------------------------------------------------------------------

#[test]
fn criterion_9_bitplane_representation() {
    for levels in [16usize, 32] {
        let n_b = entropy::bitplane_count(levels);
        assert!(
            (1 << (n_b - 1)) < levels && levels <= (1 << n_b),
            "n_b constraint violated for L={levels}"
        );
        assert_eq!(n_b, if levels == 16 { 4 } else { 5 });
        let values: Vec<u8> = (0..levels as u8).collect();
        let planes = entropy::binarize_importance(&values, levels).unwrap();
        // Base-2 reconstruction is the identity on every level.
        let back = entropy::debinarize_importance(&planes, n_b, values.len());
        assert_eq!(back, values);
        for (pos, &q) in values.iter().enumerate() {
            let rebuilt: u8 = (0..n_b).map(|k| planes[k * values.len() + pos] << k).sum();
            assert_eq!(rebuilt, q);
        }
    }
    println!("ACCEPTANCE 9 (bitplane representation): PASS");
}
