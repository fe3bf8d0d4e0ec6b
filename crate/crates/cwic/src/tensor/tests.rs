use super::*;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Direct nested-loop convolution, kept independent of the im2col path.
fn conv_oracle(
    x: &[f64],
    xs: [usize; 4],
    w: &[f64],
    ws: [usize; 4],
    b: &[f64],
    stride: usize,
    pad: usize,
) -> (Vec<f64>, [usize; 4]) {
    let [n, cin, h, wd] = xs;
    let [cout, _, k, _] = ws;
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (wd + 2 * pad - k) / stride + 1;
    let mut out = vec![0.0; n * cout * oh * ow];
    for bi in 0..n {
        for co in 0..cout {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b[co];
                    for ci in 0..cin {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                acc += x[((bi * cin + ci) * h + iy as usize) * wd + ix as usize]
                                    * w[((co * cin + ci) * k + ky) * k + kx];
                            }
                        }
                    }
                    out[((bi * cout + co) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    (out, [n, cout, oh, ow])
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn rand_vec(rng: &mut ChaCha8Rng, len: usize) -> Vec<f64> {
    (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

/// Central-difference check of every input element against the tape
/// gradient. `build` must construct a scalar loss from the leaf ids.
pub fn fd_check(
    shapes: &[&[usize]],
    datas: &[Vec<f64>],
    build: impl Fn(&mut Tape, &[TensorId]) -> TensorId,
) -> f64 {
    let eval = |datas: &[Vec<f64>]| -> (f64, Option<GradStore>, Vec<TensorId>) {
        let mut tape = Tape::new();
        let ids: Vec<TensorId> = shapes
            .iter()
            .zip(datas)
            .map(|(s, d)| tape.input(s, d.clone(), true))
            .collect();
        let loss = build(&mut tape, &ids);
        let val = tape.data(loss)[0];
        (val, Some(tape.backward(loss).unwrap()), ids)
    };
    let (_, store, ids) = eval(datas);
    let store = store.unwrap();
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for (arg, data) in datas.iter().enumerate() {
        let analytic = store.grad(ids[arg]).unwrap_or(&[]).to_vec();
        for i in 0..data.len() {
            let mut plus = datas.to_vec();
            plus[arg][i] += h;
            let mut minus = datas.to_vec();
            minus[arg][i] -= h;
            let fd = (eval(&plus).0 - eval(&minus).0) / (2.0 * h);
            let a = if analytic.is_empty() {
                0.0
            } else {
                analytic[i]
            };
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-6);
            worst = worst.max(rel);
        }
    }
    worst
}

/// Loss wrapper: project an op output onto a fixed random direction so the
/// whole Jacobian is exercised through a scalar.
fn project(tape: &mut Tape, out: TensorId, seed: u64) -> TensorId {
    let numel = tape.value(out).numel();
    let dir = rand_vec(&mut rng(seed), numel);
    let shape = tape.shape(out).to_vec();
    let d = tape.input(&shape, dir, false);
    let prod = tape.mul(out, d).unwrap();
    tape.sum(prod)
}

#[test]
fn conv_all_ones_3x3_matches_hand_values_and_oracle() {
    let x = vec![1.0; 9];
    let w = vec![1.0; 9];
    let (expect, oshape) = conv_oracle(&x, [1, 1, 3, 3], &w, [1, 1, 3, 3], &[0.0], 1, 1);
    assert_eq!(oshape, [1, 1, 3, 3]);
    // Frozen from the oracle: full overlap in the center, 2x2 at corners.
    assert_eq!(expect[4], 9.0);
    assert_eq!(expect[0], 4.0);
    assert_eq!(expect[8], 4.0);

    let mut tape = Tape::new();
    let xi = tape.input(&[1, 1, 3, 3], x, false);
    let wi = tape.input(&[1, 1, 3, 3], w, false);
    let bi = tape.input(&[1], vec![0.0], false);
    let out = tape.conv2d(xi, wi, bi, 1, 1).unwrap();
    assert_eq!(tape.data(out), expect.as_slice());
}

#[test]
fn conv_identity_kernel_passes_input_through() {
    let mut r = rng(7);
    let x = rand_vec(&mut r, 2 * 3 * 4 * 4);
    let mut tape = Tape::new();
    let xi = tape.input(&[2, 3, 4, 4], x.clone(), false);
    // One 1x1 filter per channel pair: identity on a single channel needs
    // cout == cin with a diagonal kernel.
    let mut w = vec![0.0; 3 * 3];
    for c in 0..3 {
        w[c * 3 + c] = 1.0;
    }
    let wi = tape.input(&[3, 3, 1, 1], w, false);
    let bi = tape.input(&[3], vec![0.0; 3], false);
    let out = tape.conv2d(xi, wi, bi, 1, 0).unwrap();
    assert_eq!(tape.data(out), x.as_slice());
}

#[test]
fn conv_stride4_pad2_kernel8_halves_to_32() {
    let mut tape = Tape::new();
    let xi = tape.input(&[1, 1, 128, 128], vec![0.0; 128 * 128], false);
    let wi = tape.input(&[2, 1, 8, 8], vec![0.0; 2 * 64], false);
    let bi = tape.input(&[2], vec![0.0; 2], false);
    let out = tape.conv2d(xi, wi, bi, 4, 2).unwrap();
    assert_eq!(tape.shape(out), &[1, 2, 32, 32]);
}

#[test]
fn conv_rejects_channel_mismatch_with_diagnostic() {
    let mut tape = Tape::new();
    let xi = tape.input(&[1, 3, 4, 4], vec![0.0; 48], false);
    let wi = tape.input(&[2, 4, 3, 3], vec![0.0; 72], false);
    let bi = tape.input(&[2], vec![0.0; 2], false);
    let err = tape.conv2d(xi, wi, bi, 1, 1).unwrap_err();
    let msg = err.to_string();
    assert!(
        msg.contains('3') && msg.contains('4'),
        "diagnostic was: {msg}"
    );
}

#[test]
fn conv_matches_oracle_on_random_instances() {
    let mut r = rng(42);
    for case in 0..10 {
        let n = r.gen_range(1..3);
        let cin = r.gen_range(1..4);
        let cout = r.gen_range(1..4);
        let k = [1, 3, 4][case % 3];
        let stride = r.gen_range(1..3);
        let pad = r.gen_range(0..2);
        let h = r.gen_range(k + 1..k + 5);
        let w = r.gen_range(k + 1..k + 5);
        let x = rand_vec(&mut r, n * cin * h * w);
        let wt = rand_vec(&mut r, cout * cin * k * k);
        let b = rand_vec(&mut r, cout);
        let (expect, _) = conv_oracle(&x, [n, cin, h, w], &wt, [cout, cin, k, k], &b, stride, pad);
        let mut tape = Tape::new();
        let xi = tape.input(&[n, cin, h, w], x, false);
        let wi = tape.input(&[cout, cin, k, k], wt, false);
        let bi = tape.input(&[cout], b, false);
        let out = tape.conv2d(xi, wi, bi, stride, pad).unwrap();
        for (got, want) in tape.data(out).iter().zip(&expect) {
            assert!((got - want).abs() < 1e-12, "case {case}: {got} vs {want}");
        }
    }
}

#[test]
fn elementwise_op_values() {
    let mut tape = Tape::new();
    let x = tape.input(&[3], vec![0.0, -2.0, 3.0], true);
    let s = tape.sigmoid(x);
    assert_eq!(tape.data(s)[0], 0.5);
    let r = tape.relu(x);
    assert_eq!(tape.data(r), &[0.0, 0.0, 3.0]);

    let loss = tape.sum(r);
    let store = tape.backward(loss).unwrap();
    // relu gradient: 0 below zero (and at zero), 1 above.
    assert_eq!(store.grad(x).unwrap()[1], 0.0);
    assert_eq!(store.grad(x).unwrap()[2], 1.0);
}

#[test]
fn sq_error_of_identical_inputs_is_zero_with_zero_grad() {
    let mut tape = Tape::new();
    let x = tape.input(&[4], vec![0.3, -0.7, 1.5, 0.0], true);
    let y = tape.input(&[4], vec![0.3, -0.7, 1.5, 0.0], false);
    let loss = tape.sq_error(x, y).unwrap();
    assert_eq!(tape.data(loss)[0], 0.0);
    let store = tape.backward(loss).unwrap();
    assert!(store.grad(x).unwrap().iter().all(|&g| g == 0.0));
}

#[test]
fn add_and_mul_reject_shape_mismatch() {
    let mut tape = Tape::new();
    let x = tape.input(&[2], vec![1.0, 2.0], false);
    let y = tape.input(&[3], vec![1.0, 2.0, 3.0], false);
    assert!(tape.add(x, y).is_err());
    assert!(tape.mul(x, y).is_err());
}

#[test]
fn depth_to_space_maps_channels_per_stated_ordering() {
    // Index-mapping oracle for C=4, H=W=1, s=2: output channel 0 at
    // (dy, dx) reads input channel dy*2+dx, i.e. [[a, b], [c, d]].
    let mut tape = Tape::new();
    let x = tape.input(&[1, 4, 1, 1], vec![10.0, 20.0, 30.0, 40.0], false);
    let out = tape.depth_to_space(x, 2).unwrap();
    assert_eq!(tape.shape(out), &[1, 1, 2, 2]);
    assert_eq!(tape.data(out), &[10.0, 20.0, 30.0, 40.0]);
}

#[test]
fn depth_to_space_stride1_is_identity() {
    let mut r = rng(3);
    let x = rand_vec(&mut r, 2 * 3 * 2 * 2);
    let mut tape = Tape::new();
    let xi = tape.input(&[2, 3, 2, 2], x.clone(), false);
    let out = tape.depth_to_space(xi, 1).unwrap();
    assert_eq!(tape.data(out), x.as_slice());
}

#[test]
fn depth_to_space_shape_512_to_128() {
    let mut tape = Tape::new();
    let x = tape.input(&[1, 512, 16, 16], vec![0.0; 512 * 256], false);
    let out = tape.depth_to_space(x, 2).unwrap();
    assert_eq!(tape.shape(out), &[1, 128, 32, 32]);
    let y = tape.input(&[1, 512, 16, 16], vec![0.0; 512 * 256], false);
    assert!(tape.depth_to_space(y, 3).is_err());
}

#[test]
fn depth_to_space_roundtrips_through_inverse_permutation() {
    let mut r = rng(11);
    let x = rand_vec(&mut r, 8 * 3 * 2);
    let mut tape = Tape::new();
    let xi = tape.input(&[1, 8, 3, 2], x.clone(), false);
    let out = tape.depth_to_space(xi, 2).unwrap();
    // Inverse permutation applied directly to the output values.
    let (c, h, w, s) = (8usize, 3usize, 2usize, 2usize);
    let (co, oh, ow) = (c / 4, h * s, w * s);
    let got = tape.data(out);
    let mut back = vec![0.0; x.len()];
    for oc in 0..co {
        for y2 in 0..oh {
            for x2 in 0..ow {
                let (y, dy) = (y2 / s, y2 % s);
                let (xx, dx) = (x2 / s, x2 % s);
                let ci = oc * s * s + dy * s + dx;
                back[(ci * h + y) * w + xx] = got[(oc * oh + y2) * ow + x2];
            }
        }
    }
    assert_eq!(back, x);
}

#[test]
fn custom_unit_identity_passthrough() {
    let mut tape = Tape::new();
    let x = tape.input(&[3], vec![0.2, 0.7, -0.4], true);
    let y = tape.custom_unit(|d| d.to_vec(), |d| vec![1.0; d.len()], x);
    assert_eq!(tape.data(y), tape.data(x));
    let loss = tape.sum(y);
    let store = tape.backward(loss).unwrap();
    assert_eq!(store.grad(x).unwrap(), &[1.0, 1.0, 1.0]);
}

#[test]
fn custom_unit_rounding_forward_with_unit_gradient() {
    let mut tape = Tape::new();
    let x = tape.input(&[3], vec![0.2, 0.7, 1.4], true);
    let y = tape.custom_unit(
        |d| d.iter().map(|v| v.round()).collect(),
        |d| vec![1.0; d.len()],
        x,
    );
    assert_eq!(tape.data(y), &[0.0, 1.0, 1.0]);
    let loss = tape.sum(y);
    let store = tape.backward(loss).unwrap();
    assert_eq!(store.grad(x).unwrap(), &[1.0, 1.0, 1.0]);
}

#[test]
fn gradients_match_finite_differences_per_op() {
    let mut r = rng(1000);
    // conv2d: input, weight, bias all checked.
    let x = rand_vec(&mut r, 2 * 4 * 4);
    let w = rand_vec(&mut r, 3 * 2 * 3 * 3);
    let b = rand_vec(&mut r, 3);
    let worst = fd_check(
        &[&[1, 2, 4, 4], &[3, 2, 3, 3], &[3]],
        &[x, w, b],
        |tape, ids| {
            let out = tape.conv2d(ids[0], ids[1], ids[2], 1, 1).unwrap();
            project(tape, out, 5)
        },
    );
    assert!(worst < 1e-4, "conv2d worst rel err {worst}");

    // sigmoid.
    let x = rand_vec(&mut r, 12);
    let worst = fd_check(&[&[12]], &[x], |tape, ids| {
        let out = tape.sigmoid(ids[0]);
        project(tape, out, 6)
    });
    assert!(worst < 1e-4, "sigmoid worst rel err {worst}");

    // relu, inputs kept away from the kink.
    let x: Vec<f64> = rand_vec(&mut r, 12)
        .into_iter()
        .map(|v| if v.abs() < 0.05 { v + 0.1 } else { v })
        .collect();
    let worst = fd_check(&[&[12]], &[x], |tape, ids| {
        let out = tape.relu(ids[0]);
        project(tape, out, 7)
    });
    assert!(worst < 1e-4, "relu worst rel err {worst}");

    // mul + add + sum together.
    let x = rand_vec(&mut r, 8);
    let y = rand_vec(&mut r, 8);
    let worst = fd_check(&[&[8], &[8]], &[x, y], |tape, ids| {
        let m = tape.mul(ids[0], ids[1]).unwrap();
        let a = tape.add(m, ids[0]).unwrap();
        tape.sum(a)
    });
    assert!(worst < 1e-4, "mul/add worst rel err {worst}");

    // sq_error.
    let x = rand_vec(&mut r, 10);
    let y = rand_vec(&mut r, 10);
    let worst = fd_check(&[&[10], &[10]], &[x, y], |tape, ids| {
        tape.sq_error(ids[0], ids[1]).unwrap()
    });
    assert!(worst < 1e-4, "sq_error worst rel err {worst}");

    // depth_to_space.
    let x = rand_vec(&mut r, 8 * 2 * 2);
    let worst = fd_check(&[&[1, 8, 2, 2]], &[x], |tape, ids| {
        let out = tape.depth_to_space(ids[0], 2).unwrap();
        project(tape, out, 8)
    });
    assert!(worst < 1e-4, "depth_to_space worst rel err {worst}");
}

#[test]
fn chained_graph_gradient_matches_finite_differences() {
    // Depth-5 chain: conv -> relu -> depth_to_space -> mul -> sq_error.
    let mut r = rng(2024);
    let x = rand_vec(&mut r, 2 * 4 * 4);
    let w = rand_vec(&mut r, 4 * 2 * 3 * 3);
    let b = rand_vec(&mut r, 4);
    let m = rand_vec(&mut r, 8 * 8);
    let t = rand_vec(&mut r, 8 * 8);
    let worst = fd_check(
        &[
            &[1, 2, 4, 4],
            &[4, 2, 3, 3],
            &[4],
            &[1, 1, 8, 8],
            &[1, 1, 8, 8],
        ],
        &[x, w, b, m, t],
        |tape, ids| {
            let c = tape.conv2d(ids[0], ids[1], ids[2], 1, 1).unwrap();
            let a = tape.sigmoid(c);
            let d = tape.depth_to_space(a, 2).unwrap();
            let p = tape.mul(d, ids[3]).unwrap();
            tape.sq_error(p, ids[4]).unwrap()
        },
    );
    assert!(worst < 1e-4, "chain worst rel err {worst}");
}

#[test]
fn backward_rejects_non_scalar_loss() {
    let mut tape = Tape::new();
    let x = tape.input(&[2], vec![1.0, 2.0], true);
    let y = tape.relu(x);
    assert!(matches!(
        tape.backward(y),
        Err(TensorError::NonScalarLoss(_))
    ));
}

#[test]
fn no_ops_recorded_without_grads() {
    let mut tape = Tape::new();
    let x = tape.input(&[4], vec![1.0; 4], false);
    let y = tape.relu(x);
    let z = tape.sigmoid(y);
    let _ = tape.sum(z);
    assert!(tape.ops.is_empty());
}
