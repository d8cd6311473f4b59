//! Oracle checks for the tensor engine: direct-convolution and interpolation
//! references, and finite-difference validation of every adjoint rule.

use epl_core::tensor::{finite_diff_check, Tensor};

use proptest::prelude::*;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

/// Naive six-loop cross-correlation, independent of the shift-and-add
/// implementation it checks.
fn conv3d_reference(
    input: &[f64],
    in_shape: [usize; 4],
    kernel: &[f64],
    ker_shape: [usize; 5],
    stride: usize,
    padding: usize,
) -> Vec<f64> {
    let [c_in, d, h, w] = in_shape;
    let [c_out, _, k, _, _] = ker_shape;
    let od = (d + 2 * padding - k) / stride + 1;
    let oh = (h + 2 * padding - k) / stride + 1;
    let ow = (w + 2 * padding - k) / stride + 1;
    let mut out = vec![0.0; c_out * od * oh * ow];
    for co in 0..c_out {
        for zo in 0..od {
            for yo in 0..oh {
                for xo in 0..ow {
                    let mut acc = 0.0;
                    for ci in 0..c_in {
                        for kz in 0..k {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let zi = (zo * stride + kz) as i64 - padding as i64;
                                    let yi = (yo * stride + ky) as i64 - padding as i64;
                                    let xi = (xo * stride + kx) as i64 - padding as i64;
                                    if zi < 0
                                        || yi < 0
                                        || xi < 0
                                        || zi >= d as i64
                                        || yi >= h as i64
                                        || xi >= w as i64
                                    {
                                        continue;
                                    }
                                    let iv = input[((ci * d + zi as usize) * h + yi as usize) * w
                                        + xi as usize];
                                    let kv = kernel
                                        [(((co * c_in + ci) * k + kz) * k + ky) * k + kx];
                                    acc += iv * kv;
                                }
                            }
                        }
                    }
                    out[((co * od + zo) * oh + yo) * ow + xo] = acc;
                }
            }
        }
    }
    out
}

#[test]
fn conv3d_identity_kernel_passes_input_through() {
    let input = Tensor::from_vec((0..27).map(|i| i as f64).collect(), &[1, 3, 3, 3]).unwrap();
    let kernel = Tensor::from_vec(vec![1.0], &[1, 1, 1, 1, 1]).unwrap();
    let out = input.conv3d(&kernel, 1, 0).unwrap();
    assert_eq!(out.shape(), input.shape());
    assert_eq!(out.data(), input.data());
}

#[test]
fn conv3d_zero_kernel_gives_zero_output() {
    let input = Tensor::from_vec((0..54).map(|i| i as f64 * 0.3).collect(), &[2, 3, 3, 3]).unwrap();
    let kernel = Tensor::zeros(&[3, 2, 3, 3, 3]);
    let out = input.conv3d(&kernel, 1, 1).unwrap();
    assert!(out.data().iter().all(|&v| v == 0.0));
}

#[test]
fn conv3d_averaging_kernel_keeps_constant_interior() {
    // 3x3x3 averaging kernel on a constant 5^3 volume: interior equals the
    // constant; checked against the direct-convolution reference everywhere.
    let c = 0.7;
    let input = Tensor::full(&[1, 5, 5, 5], c);
    let kernel = Tensor::full(&[1, 1, 3, 3, 3], 1.0 / 27.0);
    let out = input.conv3d(&kernel, 1, 1).unwrap();
    assert_eq!(out.shape(), &[1, 5, 5, 5]);
    for z in 1..4 {
        for y in 1..4 {
            for x in 1..4 {
                let v = out.data()[(z * 5 + y) * 5 + x];
                assert!((v - c).abs() < 1e-12, "interior voxel {v} != {c}");
            }
        }
    }
    let reference = conv3d_reference(
        input.data(),
        [1, 5, 5, 5],
        kernel.data(),
        [1, 1, 3, 3, 3],
        1,
        1,
    );
    for (a, b) in out.data().iter().zip(reference.iter()) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn conv3d_matches_reference_on_random_cases() {
    let mut rng = StdRng::seed_from_u64(11);
    for &(c_in, c_out, d, h, w, k, stride) in &[
        (1usize, 2usize, 4usize, 5usize, 6usize, 3usize, 1usize),
        (2, 1, 6, 6, 6, 3, 2),
        (3, 2, 5, 4, 5, 1, 1),
        (2, 2, 8, 6, 4, 3, 2),
    ] {
        let padding = (k - 1) / 2;
        let input_data: Vec<f64> = (0..c_in * d * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let kernel_data: Vec<f64> =
            (0..c_out * c_in * k * k * k).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let input = Tensor::from_vec(input_data.clone(), &[c_in, d, h, w]).unwrap();
        let kernel = Tensor::from_vec(kernel_data.clone(), &[c_out, c_in, k, k, k]).unwrap();
        let out = input.conv3d(&kernel, stride, padding).unwrap();
        let reference = conv3d_reference(
            &input_data,
            [c_in, d, h, w],
            &kernel_data,
            [c_out, c_in, k, k, k],
            stride,
            padding,
        );
        assert_eq!(out.len(), reference.len());
        for (a, b) in out.data().iter().zip(reference.iter()) {
            assert!((a - b).abs() < 1e-10, "conv mismatch: {a} vs {b}");
        }
    }
}

#[test]
fn upsample_preserves_constants() {
    let input = Tensor::full(&[2, 3, 4, 5], 1.234);
    let out = input.trilinear_upsample([7, 9, 11]).unwrap();
    assert_eq!(out.shape(), &[2, 7, 9, 11]);
    for &v in out.data() {
        assert!((v - 1.234).abs() <= 1e-6);
    }
}

#[test]
fn upsample_doubling_matches_hand_values() {
    // 1D analogue [0, 1] upsampled x2 with align-corners-false.
    let input = Tensor::from_vec(vec![0.0, 1.0], &[1, 1, 1, 2]).unwrap();
    let out = input.trilinear_upsample([1, 1, 4]).unwrap();
    let expected = [0.0, 0.25, 0.75, 1.0];
    for (a, b) in out.data().iter().zip(expected.iter()) {
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }
}

#[test]
fn upsample_identity_target_is_bit_identical() {
    let mut rng = StdRng::seed_from_u64(3);
    let data: Vec<f64> = (0..2 * 3 * 4 * 5).map(|_| rng.gen_range(-2.0..2.0)).collect();
    let input = Tensor::from_vec(data, &[2, 3, 4, 5]).unwrap();
    let out = input.trilinear_upsample([3, 4, 5]).unwrap();
    assert_eq!(out.data(), input.data());
}

#[test]
fn upsample_matches_pointwise_reference() {
    // Brute-force evaluation of the interpolation formula at every output
    // voxel, clamping out-of-range source coordinates.
    let mut rng = StdRng::seed_from_u64(5);
    let (d, h, w) = (3usize, 4usize, 2usize);
    let data: Vec<f64> = (0..d * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let input = Tensor::from_vec(data.clone(), &[1, d, h, w]).unwrap();
    let (dt, ht, wt) = (5usize, 4usize, 6usize);
    let out = input.trilinear_upsample([dt, ht, wt]).unwrap();

    let sample = |z: f64, y: f64, x: f64| -> f64 {
        let pick = |coord: f64, len: usize| -> (usize, usize, f64) {
            let i0 = coord.floor();
            let frac = coord - i0;
            if i0 < 0.0 || i0 as usize >= len - 1 {
                let c = (i0.max(0.0) as usize).min(len - 1);
                (c, c, 0.0)
            } else {
                (i0 as usize, i0 as usize + 1, frac)
            }
        };
        let (z0, z1, fz) = pick(z, d);
        let (y0, y1, fy) = pick(y, h);
        let (x0, x1, fx) = pick(x, w);
        let at = |zi: usize, yi: usize, xi: usize| data[(zi * h + yi) * w + xi];
        let mut acc = 0.0;
        for (zi, wz) in [(z0, 1.0 - fz), (z1, fz)] {
            for (yi, wy) in [(y0, 1.0 - fy), (y1, fy)] {
                for (xi, wx) in [(x0, 1.0 - fx), (x1, fx)] {
                    acc += at(zi, yi, xi) * wz * wy * wx;
                }
            }
        }
        acc
    };
    for zo in 0..dt {
        for yo in 0..ht {
            for xo in 0..wt {
                let z = (zo as f64 + 0.5) * d as f64 / dt as f64 - 0.5;
                let y = (yo as f64 + 0.5) * h as f64 / ht as f64 - 0.5;
                let x = (xo as f64 + 0.5) * w as f64 / wt as f64 - 0.5;
                let want = sample(z, y, x);
                let got = out.data()[(zo * ht + yo) * wt + xo];
                assert!((want - got).abs() < 1e-12, "({zo},{yo},{xo}): {got} vs {want}");
            }
        }
    }
}

#[test]
fn conv3d_gradients_match_finite_differences() {
    let mut rng = StdRng::seed_from_u64(21);
    let input_data: Vec<f64> = (0..2 * 4 * 4 * 4).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let kernel_data: Vec<f64> = (0..2 * 2 * 27).map(|_| rng.gen_range(-0.5..0.5)).collect();
    let kernel = Tensor::from_vec(kernel_data.clone(), &[2, 2, 3, 3, 3]).unwrap();
    let input = Tensor::from_vec(input_data.clone(), &[2, 4, 4, 4]).unwrap();

    let err = finite_diff_check(
        |x| x.conv3d(&kernel, 1, 1)?.mul(&x.conv3d(&kernel, 1, 1)?)?.sum_all(),
        &input,
        1e-5,
    )
    .unwrap();
    assert!(err <= 1e-4, "conv input grad error {err}");

    let err = finite_diff_check(
        |k| input.conv3d(k, 2, 1)?.powf(2.0)?.sum_all(),
        &kernel,
        1e-5,
    )
    .unwrap();
    assert!(err <= 1e-4, "conv kernel grad error {err}");
}

#[test]
fn upsample_gradients_match_finite_differences() {
    let mut rng = StdRng::seed_from_u64(22);
    let data: Vec<f64> = (0..2 * 2 * 3 * 2).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let input = Tensor::from_vec(data, &[2, 2, 3, 2]).unwrap();
    let err = finite_diff_check(
        |x| x.trilinear_upsample([4, 5, 4])?.powf(2.0)?.sum_all(),
        &input,
        1e-5,
    )
    .unwrap();
    assert!(err <= 1e-4, "upsample grad error {err}");
}

#[test]
fn composite_graph_gradient_matches_finite_differences() {
    // Randomized composite of the registered elementwise/reduce ops, inputs
    // bounded away from the epsilon guards and relu kink.
    let mut rng = StdRng::seed_from_u64(77);
    for round in 0..8 {
        let data: Vec<f64> = (0..12).map(|_| rng.gen_range(0.4..2.0)).collect();
        let point = Tensor::from_vec(data, &[3, 4]).unwrap();
        let err = finite_diff_check(
            |x| {
                let a = x.softplus()?;
                let b = x.log()?.mul(&a)?;
                let c = b.exp()?.div(&a.add_scalar(1.0)?)?;
                let d = c.sum_axes(&[1], true)?;
                let e = c.div(&d)?.mul(&x.relu()?)?;
                e.mean_all()
            },
            &point,
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-4, "round {round}: composite FD error {err}");
    }
}

#[test]
fn max_reduce_routes_gradient_to_argmax() {
    let x = Tensor::from_vec(vec![1.0, 5.0, 3.0, 2.0], &[4]).unwrap();
    let m = x.max_axes(&[0], false).unwrap();
    assert_eq!(m.item().unwrap(), 5.0);
    let grads = m.backward().unwrap();
    assert_eq!(grads.get(&x).data(), &[0.0, 1.0, 0.0, 0.0]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn broadcast_equals_materialized(
        rows in 1usize..4,
        cols in 1usize..5,
        values in proptest::collection::vec(-3.0f64..3.0, 1..20),
    ) {
        let a_data: Vec<f64> = (0..rows).map(|i| values[i % values.len()]).collect();
        let b_data: Vec<f64> = (0..cols).map(|i| values[(i * 7 + 1) % values.len()]).collect();
        let a = Tensor::from_vec(a_data, &[rows, 1]).unwrap();
        let b = Tensor::from_vec(b_data, &[cols]).unwrap();
        let implicit = a.add(&b).unwrap();
        let explicit = a
            .broadcast_to(&[rows, cols]).unwrap()
            .add(&b.broadcast_to(&[rows, cols]).unwrap()).unwrap();
        prop_assert_eq!(implicit.data(), explicit.data());
    }

    #[test]
    fn sum_adjoint_is_exact_broadcast(
        values in proptest::collection::vec(-5.0f64..5.0, 6),
        upstream in -3.0f64..3.0,
    ) {
        let x = Tensor::from_vec(values, &[2, 3]).unwrap();
        let loss = x.sum_all().unwrap().mul_scalar(upstream).unwrap();
        let grads = loss.backward().unwrap();
        for &g in grads.get(&x).data() {
            prop_assert_eq!(g, upstream);
        }
    }

    #[test]
    fn upsample_constant_property(c in -10.0f64..10.0, d in 1usize..4, target in 4usize..9) {
        let input = Tensor::full(&[1, d, 2, 3], c);
        let out = input.trilinear_upsample([target, 5, 6]).unwrap();
        for &v in out.data() {
            prop_assert!((v - c).abs() <= 1e-6);
        }
    }
}
