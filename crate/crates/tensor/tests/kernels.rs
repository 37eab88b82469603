//! Forward kernels against naive reference loops.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use voxgraph_tensor::ops::{concat, conv3d, conv_transpose3d, leaky_relu, matmul, relu, softmax};
use voxgraph_tensor::Tensor;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn naive_conv3d(x: &Tensor<f64>, w: &Tensor<f64>, b: &[f64], stride: usize, pad: usize) -> Tensor<f64> {
    let [bn, cin, d, h, wd] = x.shape().try_into().unwrap();
    let [cout, _, k, _, _] = w.shape().try_into().unwrap();
    let od = (d + 2 * pad - k) / stride + 1;
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (wd + 2 * pad - k) / stride + 1;
    let mut out = Tensor::zeros(&[bn, cout, od, oh, ow]);
    let xs = x.data();
    let ws = w.data();
    for n in 0..bn {
        for co in 0..cout {
            for z in 0..od {
                for y in 0..oh {
                    for xx in 0..ow {
                        let mut acc = b[co];
                        for ci in 0..cin {
                            for kz in 0..k {
                                for ky in 0..k {
                                    for kx in 0..k {
                                        let iz = (z * stride + kz) as isize - pad as isize;
                                        let iy = (y * stride + ky) as isize - pad as isize;
                                        let ix = (xx * stride + kx) as isize - pad as isize;
                                        if iz < 0 || iy < 0 || ix < 0 || iz >= d as isize || iy >= h as isize || ix >= wd as isize {
                                            continue;
                                        }
                                        let xi = (((n * cin + ci) * d + iz as usize) * h + iy as usize) * wd + ix as usize;
                                        let wi = (((co * cin + ci) * k + kz) * k + ky) * k + kx;
                                        acc += xs[xi] * ws[wi];
                                    }
                                }
                            }
                        }
                        out.data_mut()[(((n * cout + co) * od + z) * oh + y) * ow + xx] = acc;
                    }
                }
            }
        }
    }
    out
}

fn naive_transpose(x: &Tensor<f64>, w: &Tensor<f64>, b: &[f64]) -> Tensor<f64> {
    let [bn, cin, d, h, wd] = x.shape().try_into().unwrap();
    let cout = w.shape()[1];
    let mut out = Tensor::zeros(&[bn, cout, 2 * d, 2 * h, 2 * wd]);
    for n in 0..bn {
        for co in 0..cout {
            for z in 0..2 * d {
                for y in 0..2 * h {
                    for xx in 0..2 * wd {
                        let idx = (((n * cout + co) * 2 * d + z) * 2 * h + y) * 2 * wd + xx;
                        out.data_mut()[idx] = b[co];
                    }
                }
            }
        }
        for ci in 0..cin {
            for z in 0..d {
                for y in 0..h {
                    for xx in 0..wd {
                        let v = x.data()[(((n * cin + ci) * d + z) * h + y) * wd + xx];
                        for co in 0..cout {
                            for kz in 0..2 {
                                for ky in 0..2 {
                                    for kx in 0..2 {
                                        let wv = w.data()[(((ci * cout + co) * 2 + kz) * 2 + ky) * 2 + kx];
                                        let (oz, oy, ox) = (2 * z + kz, 2 * y + ky, 2 * xx + kx);
                                        let idx = (((n * cout + co) * 2 * d + oz) * 2 * h + oy) * 2 * wd + ox;
                                        out.data_mut()[idx] += v * wv;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

fn assert_close(a: &Tensor<f64>, b: &Tensor<f64>, rel: f64) {
    assert_eq!(a.shape(), b.shape());
    for (i, (x, y)) in a.data().iter().zip(b.data()).enumerate() {
        assert!((x - y).abs() <= rel * x.abs().max(y.abs()).max(1.0), "index {}: {} vs {}", i, x, y);
    }
}

#[test]
fn unit_kernel_is_identity_bitwise() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = random(&[1, 1, 4, 4, 4], &mut rng);
    let w = Tensor::ones(&[1, 1, 1, 1, 1]);
    let b = Tensor::zeros(&[1]);
    let y = conv3d(&x, &w, Some(&b), 1, 0).unwrap();
    assert!(x.data().iter().zip(y.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
}

#[test]
fn impulse_response_is_box() {
    let x = Tensor::<f64>::from_fn(&[1, 1, 5, 5, 5], |i| if i == 62 { 1.0 } else { 0.0 });
    let w = Tensor::ones(&[1, 1, 3, 3, 3]);
    let y = conv3d(&x, &w, None, 1, 1).unwrap();
    for z in 0..5 {
        for r in 0..5 {
            for c in 0..5 {
                let inside = (1..=3).contains(&z) && (1..=3).contains(&r) && (1..=3).contains(&c);
                assert_eq!(y.data()[z * 25 + r * 5 + c], if inside { 1.0 } else { 0.0 });
            }
        }
    }
}

#[test]
fn strided_conv_matches_naive_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = random(&[2, 3, 6, 6, 6], &mut rng);
    let w = random(&[4, 3, 3, 3, 3], &mut rng);
    let b = random(&[4], &mut rng);
    let got = conv3d(&x, &w, Some(&b), 2, 1).unwrap();
    assert_close(&got, &naive_conv3d(&x, &w, b.data(), 2, 1), 1e-5);
    // Also the downsampling configuration and an uneven extent.
    let x = random(&[1, 2, 4, 6, 5], &mut rng);
    let w = random(&[3, 2, 2, 2, 2], &mut rng);
    let got = conv3d(&x, &w, None, 2, 0).unwrap();
    assert_close(&got, &naive_conv3d(&x, &w, &[0.0; 3], 2, 0), 1e-5);
}

#[test]
fn conv_f32_agrees_with_f64() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random(&[1, 2, 5, 5, 5], &mut rng);
    let w = random(&[2, 2, 3, 3, 3], &mut rng);
    let y64 = conv3d(&x, &w, None, 1, 1).unwrap();
    let y32 = conv3d(&x.cast::<f32>(), &w.cast::<f32>(), None, 1, 1).unwrap();
    assert_close(&y32.cast(), &y64, 1e-5);
}

#[test]
fn channel_mismatch_is_a_shape_error() {
    let x = Tensor::<f32>::zeros(&[1, 2, 4, 4, 4]);
    let w = Tensor::<f32>::zeros(&[1, 3, 3, 3, 3]);
    let err = conv3d(&x, &w, None, 1, 1).unwrap_err();
    assert!(err.to_string().contains("shape"), "{}", err);
}

#[test]
fn transpose_of_ones_is_ones() {
    let x = Tensor::<f64>::ones(&[1, 1, 2, 2, 2]);
    let w = Tensor::ones(&[1, 1, 2, 2, 2]);
    let y = conv_transpose3d(&x, &w, None, 2).unwrap();
    assert_eq!(y.shape(), &[1, 1, 4, 4, 4]);
    assert!(y.data().iter().all(|&v| v == 1.0));
}

#[test]
fn transpose_matches_scatter_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = random(&[2, 3, 2, 3, 2], &mut rng);
    let w = random(&[3, 2, 2, 2, 2], &mut rng);
    let b = random(&[2], &mut rng);
    let got = conv_transpose3d(&x, &w, Some(&b), 2).unwrap();
    assert_close(&got, &naive_transpose(&x, &w, b.data()), 1e-5);
}

#[test]
fn transpose_is_adjoint_of_strided_conv() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    // The strided conv uses kernel [Cout=2, Cin=3]; the transpose reads the same
    // tensor as [Cin'=2, Cout'=3].
    let w = random(&[2, 3, 2, 2, 2], &mut rng);
    let x = random(&[2, 3, 4, 6, 4], &mut rng);
    let y = random(&[2, 2, 2, 3, 2], &mut rng);
    let ax = conv3d(&x, &w, None, 2, 0).unwrap();
    let aty = conv_transpose3d(&y, &w, None, 2).unwrap();
    let lhs = ax.dot(&y).unwrap();
    let rhs = x.dot(&aty).unwrap();
    assert!((lhs - rhs).abs() <= 1e-5 * lhs.abs().max(1.0), "{} vs {}", lhs, rhs);
}

#[test]
fn transpose_rejects_other_strides() {
    let x = Tensor::<f32>::zeros(&[1, 1, 2, 2, 2]);
    assert!(conv_transpose3d(&x, &Tensor::zeros(&[1, 1, 3, 3, 3]), None, 3).is_err());
    assert!(conv_transpose3d(&x, &Tensor::zeros(&[1, 1, 2, 2, 2]), None, 1).is_err());
}

#[test]
fn activations() {
    let x = Tensor::<f64>::new(vec![3], vec![-1.0, 0.0, 2.0]).unwrap();
    assert_eq!(relu(&x).data(), &[0.0, 0.0, 2.0]);
    assert_eq!(leaky_relu(&x, 0.2).data(), &[-0.2, 0.0, 2.0]);
}

#[test]
fn softmax_examples() {
    let y = softmax(&Tensor::<f64>::zeros(&[3]), 0).unwrap();
    assert!(y.data().iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));
    let y = softmax(&Tensor::<f32>::new(vec![2], vec![1000.0, 1000.0]).unwrap(), 0).unwrap();
    assert_eq!(y.data(), &[0.5, 0.5]);
    let y = softmax(&Tensor::<f64>::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap(), 0).unwrap();
    let direct: Vec<f64> = [1.0f64, 2.0, 3.0].iter().map(|v| (v - 3.0).exp()).collect();
    let total: f64 = direct.iter().sum();
    for (a, b) in y.data().iter().zip(&direct) {
        assert!((a - b / total).abs() < 1e-7);
    }
}

#[test]
fn matmul_matches_triple_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let a = random(&[3, 4, 5], &mut rng);
    let b = random(&[3, 5, 2], &mut rng);
    let c = matmul(&a, &b).unwrap();
    for n in 0..3 {
        for i in 0..4 {
            for j in 0..2 {
                let want: f64 = (0..5).map(|k| a.data()[n * 20 + i * 5 + k] * b.data()[n * 10 + k * 2 + j]).sum();
                assert!((c.data()[n * 8 + i * 2 + j] - want).abs() < 1e-12);
            }
        }
    }
    // Shared right operand.
    let w = random(&[5, 2], &mut rng);
    let c = matmul(&a, &w).unwrap();
    assert_eq!(c.shape(), &[3, 4, 2]);
    let want: f64 = (0..5).map(|k| a.data()[20 + k] * w.data()[k * 2 + 1]).sum();
    assert!((c.data()[8 + 1] - want).abs() < 1e-12);
    // Identity.
    let eye = Tensor::from_fn(&[5, 5], |i| if i / 5 == i % 5 { 1.0 } else { 0.0 });
    assert_eq!(matmul(&a, &eye).unwrap(), a);
    assert!(matmul(&a, &random(&[4, 2], &mut rng)).is_err());
}

#[test]
fn concat_shape() {
    let a = Tensor::<f32>::zeros(&[1, 2, 4, 4, 4]);
    let b = Tensor::<f32>::ones(&[1, 3, 4, 4, 4]);
    let c = concat(&[&a, &b], 1).unwrap();
    assert_eq!(c.shape(), &[1, 5, 4, 4, 4]);
    assert_eq!(c.data()[2 * 64 - 1], 0.0);
    assert_eq!(c.data()[2 * 64], 1.0);
}
