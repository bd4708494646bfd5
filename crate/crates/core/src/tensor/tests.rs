// SPDX-License-Identifier: Apache-2.0

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, InitKind, Node, OpKind};
use super::model::{build_cifar_model, ModelConfig, CROP_SIDE};
use super::pipeline::{augment, center_crop, Pipeline};
use super::session::Session;
use super::{data, grad, ops, Tensor, TensorError};
use crate::enclave::{Enclave, EnclaveConfig, Mode};
use crate::fs_shield::{FsShield, PathPolicy, ShieldMode, StdIo};
use crate::sched::{sleep, SchedPolicy, Scheduler};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn enclave(mode: Mode) -> Arc<Enclave> {
    let cfg = EnclaveConfig {
        mode,
        ..EnclaveConfig::default()
    };
    Arc::new(Enclave::create(b"tensor tests", cfg).unwrap())
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f32, hi: f32) -> Tensor {
    let len = shape.iter().product();
    let data = (0..len).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

// ---------------------------------------------------------------------
// Numeric gradient oracle. Every analytic backward kernel is checked
// against central differences of its forward kernel through a random
// linear functional, before anything downstream relies on it.
// ---------------------------------------------------------------------

const FD_EPS: f64 = 1e-3;
const FD_TOL: f32 = 1e-2;

fn weighted_sum(t: &Tensor, w: &[f32]) -> f64 {
    t.data()
        .iter()
        .zip(w)
        .map(|(&v, &wv)| v as f64 * wv as f64)
        .sum()
}

fn numeric_grad(f: &dyn Fn(&Tensor) -> Tensor, x: &Tensor, w: &[f32]) -> Vec<f32> {
    (0..x.len())
        .map(|i| {
            let mut hi = x.clone();
            hi.data_mut()[i] += FD_EPS as f32;
            let mut lo = x.clone();
            lo.data_mut()[i] -= FD_EPS as f32;
            ((weighted_sum(&f(&hi), w) - weighted_sum(&f(&lo), w)) / (2.0 * FD_EPS)) as f32
        })
        .collect()
}

fn assert_grad_close(what: &str, analytic: &Tensor, numeric: &[f32], atol: f32) {
    assert_eq!(analytic.len(), numeric.len(), "{what}: gradient length");
    for (i, (&a, &n)) in analytic.data().iter().zip(numeric).enumerate() {
        let err = (a - n).abs();
        let rel = err / a.abs().max(n.abs()).max(1e-3);
        assert!(
            rel <= FD_TOL || err <= atol,
            "{what}[{i}]: analytic {a}, numeric {n}, rel {rel}, atol {atol}"
        );
    }
}

/// Check one input of a forward op against the numeric oracle.
///
/// The forward runs in f32, so a central difference carries rounding
/// noise of roughly ulp(f)/(2*eps); components smaller than that bound
/// are only checked absolutely. Structural mistakes still show up loud
/// on the components that carry the gradient's weight.
fn check_grad(
    what: &str,
    f: &dyn Fn(&Tensor) -> Tensor,
    x: &Tensor,
    analytic: &dyn Fn(&Tensor) -> Tensor,
    w: &[f32],
) {
    let out = f(x);
    let fmag = out.data().iter().fold(1f32, |m, &v| m.max(v.abs()));
    let atol =
        fmag * (out.len() as f32).sqrt() * f32::EPSILON / (2.0 * FD_EPS as f32) * 4.0 + 1e-6;
    let a = analytic(&Tensor::new(out.shape().to_vec(), w.to_vec()).unwrap());
    assert_grad_close(what, &a, &numeric_grad(f, x, w), atol);
}

fn loss_weights(rng: &mut ChaCha8Rng, len: usize) -> Vec<f32> {
    (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

#[test]
fn numeric_oracle_confirms_matmul_gradients() {
    let mut r = rng(10);
    for (m, k, n) in [(3, 4, 2), (1, 5, 1), (4, 1, 3)] {
        let a = rand_tensor(&mut r, &[m, k], -1.0, 1.0);
        let b = rand_tensor(&mut r, &[k, n], -1.0, 1.0);
        let w = loss_weights(&mut r, m * n);
        check_grad(
            "matmul/a",
            &|x| ops::matmul(x, &b).unwrap(),
            &a,
            &|g| grad::matmul(&a, &b, g).0,
            &w,
        );
        check_grad(
            "matmul/b",
            &|x| ops::matmul(&a, x).unwrap(),
            &b,
            &|g| grad::matmul(&a, &b, g).1,
            &w,
        );
    }
}

#[test]
fn numeric_oracle_confirms_add_gradients() {
    let mut r = rng(11);
    let a = rand_tensor(&mut r, &[3, 4], -1.0, 1.0);
    let b = rand_tensor(&mut r, &[3, 4], -1.0, 1.0);
    let w = loss_weights(&mut r, 12);
    check_grad(
        "add/a",
        &|x| ops::add(x, &b).unwrap(),
        &a,
        &|g| grad::add(&a, &b, g).0,
        &w,
    );
    check_grad(
        "add/b",
        &|x| ops::add(&a, x).unwrap(),
        &b,
        &|g| grad::add(&a, &b, g).1,
        &w,
    );

    let bias = rand_tensor(&mut r, &[4], -1.0, 1.0);
    check_grad(
        "add/bias",
        &|x| ops::add(&a, x).unwrap(),
        &bias,
        &|g| grad::add(&a, &bias, g).1,
        &w,
    );
}

#[test]
fn numeric_oracle_confirms_relu_gradient_off_the_kink() {
    let mut r = rng(12);
    let len = 24;
    let data: Vec<f32> = (0..len)
        .map(|_| {
            let mag = r.gen_range(0.05..1.0);
            if r.gen_bool(0.5) {
                mag
            } else {
                -mag
            }
        })
        .collect();
    let x = Tensor::new(vec![4, 6], data).unwrap();
    let w = loss_weights(&mut r, len);
    check_grad(
        "relu",
        &|x| ops::relu(x),
        &x,
        &|g| grad::relu(&x, g),
        &w,
    );
}

#[test]
fn numeric_oracle_confirms_softmax_gradient() {
    let mut r = rng(13);
    let x = rand_tensor(&mut r, &[3, 5], -2.0, 2.0);
    let w = loss_weights(&mut r, 15);
    let y = ops::softmax(&x).unwrap();
    check_grad(
        "softmax",
        &|x| ops::softmax(x).unwrap(),
        &x,
        &|g| grad::softmax(&y, g),
        &w,
    );
}

#[test]
fn numeric_oracle_confirms_cross_entropy_gradients() {
    let mut r = rng(14);
    let logits = rand_tensor(&mut r, &[4, 6], -2.0, 2.0);
    let labels = rand_tensor(&mut r, &[4, 6], 0.0, 1.0);
    let w = loss_weights(&mut r, 1);
    check_grad(
        "xent/logits",
        &|x| ops::softmax_xent(x, &labels).unwrap(),
        &logits,
        &|g| grad::softmax_xent(&logits, &labels, g).0,
        &w,
    );
    check_grad(
        "xent/labels",
        &|t| ops::softmax_xent(&logits, t).unwrap(),
        &labels,
        &|g| grad::softmax_xent(&logits, &labels, g).1,
        &w,
    );
}

#[test]
fn numeric_oracle_confirms_conv_gradients() {
    let mut r = rng(15);
    for (xs, ws) in [
        (vec![1, 6, 6, 2], vec![3, 3, 2, 3]),
        (vec![2, 5, 5, 3], vec![5, 5, 3, 2]),
    ] {
        let x = rand_tensor(&mut r, &xs, -1.0, 1.0);
        let w = rand_tensor(&mut r, &ws, -1.0, 1.0);
        let out_len = ops::conv2d_same(&x, &w).unwrap().len();
        let lw = loss_weights(&mut r, out_len);
        check_grad(
            "conv/x",
            &|x| ops::conv2d_same(x, &w).unwrap(),
            &x,
            &|g| grad::conv2d_same(&x, &w, g).0,
            &lw,
        );
        check_grad(
            "conv/w",
            &|w| ops::conv2d_same(&x, w).unwrap(),
            &w,
            &|g| grad::conv2d_same(&x, &w, g).1,
            &lw,
        );
    }
}

#[test]
fn conv_matches_a_hand_worked_example() {
    // One row of three pixels, one channel, kernel width 3 with SAME
    // padding: every product below is written out by hand.
    let x = Tensor::new(vec![1, 1, 3, 1], vec![1.0, 2.0, 3.0]).unwrap();
    let w = Tensor::new(vec![1, 3, 1, 1], vec![0.5, -1.0, 2.0]).unwrap();
    let out = ops::conv2d_same(&x, &w).unwrap();
    assert_eq!(out.data(), &[3.0, 4.5, -2.0]);

    let g = Tensor::new(vec![1, 1, 3, 1], vec![1.0, -2.0, 0.5]).unwrap();
    let (dx, dw) = grad::conv2d_same(&x, &w, &g);
    assert_eq!(dx.data(), &[-2.0, 4.25, -4.5]);
    assert_eq!(dw.data(), &[-1.0, -1.5, -4.0]);
}

#[test]
fn cross_entropy_matches_a_hand_worked_example() {
    let logits = Tensor::new(vec![1, 2], vec![0.0, (3f32).ln()]).unwrap();
    let labels = Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap();
    let loss = ops::softmax_xent(&logits, &labels).unwrap();
    assert!((loss.data()[0] - (4f32).ln()).abs() < 1e-6);

    let g = Tensor::scalar(1.0);
    let (dlogits, dlabels) = grad::softmax_xent(&logits, &labels, &g);
    assert!((dlogits.data()[0] - -0.75).abs() < 1e-6);
    assert!((dlogits.data()[1] - 0.75).abs() < 1e-6);
    assert!((dlabels.data()[0] - (4f32).ln()).abs() < 1e-6);
    assert!((dlabels.data()[1] - ((4f32).ln() - (3f32).ln())).abs() < 1e-6);
}

#[test]
fn numeric_oracle_confirms_maxpool_gradient_with_separated_maxima() {
    let mut r = rng(16);
    let mut x = rand_tensor(&mut r, &[1, 4, 4, 2], 0.0, 1.0);
    // Keep each window's champion clear of the runner-up so the finite
    // difference never switches winners.
    let (h, w, c) = (4, 4, 2);
    for wr in 0..h / 2 {
        for wc in 0..w / 2 {
            for ch in 0..c {
                let mut best = (0, f32::MIN);
                for dr in 0..2 {
                    for dc in 0..2 {
                        let i = ((wr * 2 + dr) * w + (wc * 2 + dc)) * c + ch;
                        if x.data()[i] > best.1 {
                            best = (i, x.data()[i]);
                        }
                    }
                }
                x.data_mut()[best.0] += 0.2;
            }
        }
    }
    let out_len = ops::maxpool2x2(&x).unwrap().len();
    let lw = loss_weights(&mut r, out_len);
    check_grad(
        "maxpool",
        &|x| ops::maxpool2x2(x).unwrap(),
        &x,
        &|g| grad::maxpool2x2(&x, g),
        &lw,
    );
}

#[test]
fn numeric_oracle_confirms_image_op_gradients() {
    let mut r = rng(17);

    let x = rand_tensor(&mut r, &[2, 6], -1.0, 1.0);
    let w = loss_weights(&mut r, 12);
    check_grad(
        "reshape",
        &|x| ops::reshape(x, &[3, 4]).unwrap(),
        &x,
        &|g| grad::reshape(&x, g),
        &w,
    );

    let img = rand_tensor(&mut r, &[5, 5, 3], 0.0, 1.0);
    let w = loss_weights(&mut r, 2 * 3 * 3);
    check_grad(
        "crop",
        &|x| ops::crop(x, 1, 2, 2, 3).unwrap(),
        &img,
        &|g| grad::crop(&img, 1, 2, g),
        &w,
    );

    let w = loss_weights(&mut r, img.len());
    check_grad(
        "flip_h",
        &|x| ops::flip_h(x).unwrap(),
        &img,
        &|g| grad::flip_h(g),
        &w,
    );

    let x = rand_tensor(&mut r, &[4, 3], 0.1, 0.7);
    let w = loss_weights(&mut r, 12);
    check_grad(
        "brightness",
        &|x| ops::brightness(x, 0.15),
        &x,
        &|g| grad::brightness(&x, 0.15, g),
        &w,
    );

    let x = rand_tensor(&mut r, &[2, 2, 3], 0.4, 0.6);
    let w = loss_weights(&mut r, 12);
    check_grad(
        "saturation",
        &|x| ops::saturation(x, 1.2).unwrap(),
        &x,
        &|g| grad::saturation(&x, 1.2, g),
        &w,
    );
}

// ---------------------------------------------------------------------
// Forward kernels.
// ---------------------------------------------------------------------

#[test]
fn matmul_against_identity_and_by_hand() {
    let a = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let eye = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    assert_eq!(ops::matmul(&a, &eye).unwrap(), a);

    let b = Tensor::new(vec![2, 1], vec![5.0, 6.0]).unwrap();
    let out = ops::matmul(&a, &b).unwrap();
    assert_eq!(out.shape(), [2, 1]);
    assert_eq!(out.data(), &[17.0, 39.0]);
}

#[test]
fn softmax_normalizes_and_splits_ties_evenly() {
    let x = Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap();
    assert_eq!(ops::softmax(&x).unwrap().data(), &[0.5, 0.5]);

    let mut r = rng(20);
    let x = rand_tensor(&mut r, &[6, 9], -30.0, 30.0);
    let y = ops::softmax(&x).unwrap();
    for row in y.data().chunks_exact(9) {
        let sum: f32 = row.iter().sum();
        assert!((sum - 1.0).abs() < 1e-6, "row sums to {sum}");
        assert!(row.iter().all(|&p| (0.0..=1.0).contains(&p)));
    }
}

#[test]
fn maxpool_keeps_the_window_maximum() {
    let x = Tensor::new(vec![1, 2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let y = ops::maxpool2x2(&x).unwrap();
    assert_eq!(y.shape(), [1, 1, 1, 1]);
    assert_eq!(y.data(), &[4.0]);
}

#[test]
fn cross_entropy_is_tiny_for_confident_truth_and_never_negative() {
    let logits = Tensor::new(vec![1, 2], vec![0.0, 20.0]).unwrap();
    let labels = Tensor::new(vec![1, 2], vec![0.0, 1.0]).unwrap();
    let loss = ops::softmax_xent(&logits, &labels).unwrap();
    assert!(loss.data()[0] < 1e-6, "confident loss {}", loss.data()[0]);

    let mut r = rng(21);
    for _ in 0..20 {
        let logits = rand_tensor(&mut r, &[3, 7], -5.0, 5.0);
        let mut labels = Tensor::zeros(&[3, 7]);
        for row in 0..3 {
            let hot = r.gen_range(0..7);
            labels.data_mut()[row * 7 + hot] = 1.0;
        }
        let loss = ops::softmax_xent(&logits, &labels).unwrap();
        assert!(loss.data()[0] >= 0.0);
    }
}

#[test]
fn gray_pixels_are_a_saturation_fixed_point() {
    let mut r = rng(22);
    let levels: Vec<f32> = (0..8).map(|_| r.gen_range(0.0..1.0)).collect();
    let data: Vec<f32> = levels.iter().flat_map(|&v| [v, v, v]).collect();
    let img = Tensor::new(vec![2, 4, 3], data).unwrap();
    for scale in [0.0, 0.37, 1.0, 1.4] {
        let out = ops::saturation(&img, scale).unwrap();
        assert_eq!(out.data(), img.data(), "scale {scale}");
    }
}

#[test]
fn crop_extracts_the_requested_window() {
    let data: Vec<f32> = (0..16).map(|v| v as f32).collect();
    let img = Tensor::new(vec![4, 4, 1], data).unwrap();
    let out = ops::crop(&img, 1, 1, 2, 2).unwrap();
    assert_eq!(out.shape(), [2, 2, 1]);
    assert_eq!(out.data(), &[5.0, 6.0, 9.0, 10.0]);

    assert!(matches!(
        ops::crop(&img, 3, 3, 2, 2),
        Err(TensorError::ShapeMismatch(_))
    ));
}

#[test]
fn flipping_twice_restores_the_image() {
    let mut r = rng(23);
    let img = rand_tensor(&mut r, &[3, 5, 3], 0.0, 1.0);
    let once = ops::flip_h(&img).unwrap();
    assert_eq!(ops::flip_h(&once).unwrap(), img);
    for row in 0..3 {
        for col in 0..5 {
            for ch in 0..3 {
                assert_eq!(
                    once.at(&[row, col, ch]),
                    img.at(&[row, 4 - col, ch])
                );
            }
        }
    }
}

#[test]
fn brightness_clamps_to_the_unit_range() {
    let x = Tensor::new(vec![3], vec![0.9, 0.05, 0.5]).unwrap();
    assert_eq!(ops::brightness(&x, 0.2).data(), &[1.0, 0.25, 0.7]);
    assert_eq!(ops::brightness(&x, -0.2).data(), &[0.7, 0.0, 0.3]);
}

#[test]
fn kernels_reject_malformed_shapes() {
    let mut r = rng(24);
    let a = rand_tensor(&mut r, &[2, 3], 0.0, 1.0);
    assert!(matches!(
        ops::matmul(&a, &a),
        Err(TensorError::ShapeMismatch(_))
    ));

    let x = rand_tensor(&mut r, &[1, 4, 4, 2], 0.0, 1.0);
    let even_kernel = rand_tensor(&mut r, &[4, 4, 2, 1], 0.0, 1.0);
    assert!(matches!(
        ops::conv2d_same(&x, &even_kernel),
        Err(TensorError::ShapeMismatch(_))
    ));

    let odd_sides = rand_tensor(&mut r, &[1, 3, 3, 1], 0.0, 1.0);
    assert!(matches!(
        ops::maxpool2x2(&odd_sides),
        Err(TensorError::ShapeMismatch(_))
    ));

    let two_channels = rand_tensor(&mut r, &[2, 2, 2], 0.0, 1.0);
    assert!(matches!(
        ops::saturation(&two_channels, 1.1),
        Err(TensorError::ShapeMismatch(_))
    ));

    assert!(matches!(
        ops::reshape(&a, &[-1, -1]),
        Err(TensorError::ShapeMismatch(_))
    ));
    assert!(matches!(
        ops::reshape(&a, &[4, 2]),
        Err(TensorError::ShapeMismatch(_))
    ));
    let inferred = ops::reshape(&a, &[-1, 2]).unwrap();
    assert_eq!(inferred.shape(), [3, 2]);
}

#[test]
fn tensors_validate_their_construction() {
    assert!(Tensor::new(vec![2, 0], vec![]).is_err());
    assert!(Tensor::new(vec![2, 2], vec![1.0]).is_err());
    let s = Tensor::scalar(3.5);
    assert_eq!(s.rank(), 0);
    assert_eq!(s.len(), 1);
    assert_eq!(s.data(), &[3.5]);
}

// ---------------------------------------------------------------------
// Graph construction and serialization.
// ---------------------------------------------------------------------

fn tiny_model() -> Graph {
    build_cifar_model(&ModelConfig::narrow(), 1e-3, "/data/train.bin", true, 8).unwrap()
}

#[test]
fn graphs_enforce_wiring_rules_at_add_time() {
    let mut g = Graph::default();
    g.add(Node::new(
        "x",
        OpKind::Placeholder { shape: vec![0, 4] },
        &[],
    ))
    .unwrap();

    let missing = g.add(Node::new("r", OpKind::Relu, &["ghost"]));
    assert!(matches!(missing, Err(TensorError::UnknownNode(n)) if n == "ghost"));

    let dup = g.add(Node::new(
        "x",
        OpKind::Placeholder { shape: vec![1] },
        &[],
    ));
    assert!(matches!(dup, Err(TensorError::DuplicateNode(_))));

    let arity = g.add(Node::new("m", OpKind::MatMul, &["x"]));
    assert!(matches!(arity, Err(TensorError::ShapeMismatch(_))));

    g.add(Node::new("r", OpKind::Relu, &["x"])).unwrap();
    assert_eq!(g.nodes().len(), 2);
}

#[test]
fn plans_visit_dependencies_first_and_skip_unreachable_nodes() {
    let mut g = Graph::default();
    g.add(Node::new(
        "a",
        OpKind::Placeholder { shape: vec![2] },
        &[],
    ))
    .unwrap();
    g.add(Node::new("b", OpKind::Relu, &["a"])).unwrap();
    g.add(Node::new(
        "orphan",
        OpKind::Placeholder { shape: vec![1] },
        &[],
    ))
    .unwrap();
    g.add(Node::new("c", OpKind::Relu, &["b"])).unwrap();

    let plan = g.plan(&["c"]).unwrap();
    let names: Vec<&str> = plan.iter().map(|&i| g.nodes()[i].name.as_str()).collect();
    assert_eq!(names, ["a", "b", "c"]);
    assert!(g.plan(&["ghost"]).is_err());
}

#[test]
fn graph_bytes_roundtrip_every_op_kind() {
    let g = tiny_model();
    let raw = g.to_bytes(None);
    let (back, folded) = Graph::from_bytes(&raw).unwrap();
    assert_eq!(back, g);
    assert!(folded.is_empty());
}

#[test]
fn graph_decoding_rejects_damage() {
    let g = tiny_model();
    let raw = g.to_bytes(None);

    let mut magic = raw.clone();
    magic[0] ^= 0xff;
    assert!(matches!(
        Graph::from_bytes(&magic),
        Err(TensorError::CorruptFile(_))
    ));

    let mut version = raw.clone();
    version[4] = 9;
    assert!(matches!(
        Graph::from_bytes(&version),
        Err(TensorError::FormatVersionUnknown(9))
    ));

    assert!(matches!(
        Graph::from_bytes(&raw[..raw.len() / 2]),
        Err(TensorError::CorruptFile(_))
    ));

    let mut trailing = raw.clone();
    trailing.push(0);
    assert!(matches!(
        Graph::from_bytes(&trailing),
        Err(TensorError::CorruptFile(_))
    ));
}

// ---------------------------------------------------------------------
// Records and synthetic data.
// ---------------------------------------------------------------------

#[test]
fn records_roundtrip_exactly() {
    let raw = data::synthetic_dataset(3, 77);
    assert_eq!(raw.len(), 3 * data::RECORD_LEN);
    for (i, rec) in raw.chunks_exact(data::RECORD_LEN).enumerate() {
        let (label, image) = data::decode_record(rec).unwrap();
        assert_eq!(label as usize, i % data::CLASSES);
        assert_eq!(image.shape(), [32, 32, 3]);
        assert!(image.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert_eq!(data::encode_record(label, &image).unwrap(), rec);
    }
    assert_eq!(data::synthetic_dataset(3, 77), raw);
    assert_ne!(data::synthetic_dataset(3, 78), raw);
}

#[test]
fn record_decoding_rejects_bad_labels_and_lengths() {
    let raw = data::synthetic_dataset(1, 1);
    assert!(matches!(
        data::decode_record(&raw[..100]),
        Err(TensorError::RecordTruncated)
    ));
    let mut bad = raw.clone();
    bad[0] = 10;
    assert!(matches!(
        data::decode_record(&bad),
        Err(TensorError::LabelOutOfRange(10))
    ));
}

#[test]
fn augmentation_is_reproducible_under_a_seed() {
    let raw = data::synthetic_dataset(1, 5);
    let (_, image) = data::decode_record(&raw[..data::RECORD_LEN]).unwrap();

    let a = augment(&image, &mut rng(40)).unwrap();
    let b = augment(&image, &mut rng(40)).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.shape(), [CROP_SIDE, CROP_SIDE, 3]);

    let c = augment(&image, &mut rng(41)).unwrap();
    assert_ne!(a, c);

    let center = center_crop(&image).unwrap();
    assert_eq!(center, ops::crop(&image, 4, 4, CROP_SIDE, CROP_SIDE).unwrap());
}

// ---------------------------------------------------------------------
// Model and session.
// ---------------------------------------------------------------------

fn graph_param_count(g: &Graph) -> usize {
    g.nodes()
        .iter()
        .filter_map(|n| match &n.op {
            OpKind::Variable { shape, .. } => Some(shape.iter().product::<usize>()),
            _ => None,
        })
        .sum()
}

#[test]
fn model_parameter_counts_match_the_layout() {
    let full = build_cifar_model(&ModelConfig::full(), 0.1, "/d", false, 128).unwrap();
    assert_eq!(graph_param_count(&full), ModelConfig::full().param_count());
    assert_eq!(ModelConfig::full().param_count(), 1_068_298);

    let narrow = tiny_model();
    assert_eq!(graph_param_count(&narrow), ModelConfig::narrow().param_count());
}

fn fresh_session(mode: Mode, seed: u64) -> Session {
    let graph = Arc::new(tiny_model());
    let mut s = Session::new(enclave(mode), graph).unwrap();
    s.initialize(seed).unwrap();
    s
}

fn batch(mut_rng: &mut ChaCha8Rng, n: usize) -> (Tensor, Tensor) {
    let images = rand_tensor(mut_rng, &[n, CROP_SIDE, CROP_SIDE, 3], 0.0, 1.0);
    let labels: Vec<u8> = (0..n).map(|_| mut_rng.gen_range(0..10)).collect();
    (images, data::one_hot(&labels, 10))
}

#[test]
fn zeroed_weights_spread_probability_evenly() {
    let mut s = fresh_session(Mode::Simulation, 1);
    let graph = s.graph().clone();
    for node in graph.nodes() {
        if let OpKind::Variable { shape, .. } = &node.op {
            s.set_variable(&node.name, Tensor::zeros(shape)).unwrap();
        }
    }
    let mut r = rng(30);
    let (images, _) = batch(&mut r, 3);
    let prob = s.run(&["prob"], &[("input", &images)]).unwrap().remove(0);
    assert_eq!(prob.shape(), [3, 10]);
    for &p in prob.data() {
        assert!((p - 0.1).abs() < 1e-6, "uniform probability, got {p}");
    }
}

#[test]
fn the_classifier_emits_one_row_per_image() {
    let mut s = fresh_session(Mode::Simulation, 2);
    let mut r = rng(31);
    let (images, labels) = batch(&mut r, 8);
    let out = s
        .run(
            &["logits", "prob", "loss"],
            &[("input", &images), ("labels", &labels)],
        )
        .unwrap();
    assert_eq!(out[0].shape(), [8, 10]);
    assert_eq!(out[1].shape(), [8, 10]);
    assert_eq!(out[2].rank(), 0);
    assert!(out[2].data()[0] > 0.0);
}

#[test]
fn identical_seeds_produce_identical_models_in_every_mode() {
    let mut r = rng(32);
    let (images, _) = batch(&mut r, 4);

    let mut native = fresh_session(Mode::Native, 7);
    let mut sim = fresh_session(Mode::Simulation, 7);
    let mut hw = fresh_session(Mode::HardwareSim, 7);

    let feeds = [("input", &images)];
    let a = native.run(&["logits"], &feeds).unwrap().remove(0);
    let b = sim.run(&["logits"], &feeds).unwrap().remove(0);
    let c = hw.run(&["logits"], &feeds).unwrap().remove(0);

    assert_eq!(a, b);
    assert_eq!(b, c);
    assert!(hw.enclave().cost_totals().total() > 0);
}

#[test]
fn an_sgd_fetch_returns_the_pre_step_loss_and_moves_the_weights() {
    let mut r = rng(33);
    let (images, labels) = batch(&mut r, 4);
    let feeds = [("input", &images), ("labels", &labels)];

    let mut a = fresh_session(Mode::Simulation, 9);
    let mut b = fresh_session(Mode::Simulation, 9);

    let plain = a.run(&["loss"], &feeds).unwrap().remove(0);
    let stepped = b.run(&["train_op"], &feeds).unwrap().remove(0);
    assert_eq!(plain, stepped);

    // Fetching the loss alone must not touch the weights; the SGD fetch
    // must.
    let untouched = fresh_session(Mode::Simulation, 9);
    assert_eq!(
        a.variable("conv1_w").unwrap(),
        untouched.variable("conv1_w").unwrap()
    );
    assert_ne!(
        a.variable("conv1_w").unwrap(),
        b.variable("conv1_w").unwrap()
    );
}

#[test]
fn training_reduces_loss_on_a_fixed_batch() {
    let mut s = fresh_session(Mode::Simulation, 3);
    let mut r = rng(34);
    let (images, labels) = batch(&mut r, 8);
    let feeds = [("input", &images), ("labels", &labels)];

    let mut losses = Vec::new();
    for _ in 0..20 {
        let loss = s.run(&["train_op"], &feeds).unwrap().remove(0);
        losses.push(loss.data()[0]);
    }
    for pair in losses.windows(2) {
        assert!(
            pair[1] <= pair[0] + 1e-3,
            "loss jumped from {} to {}",
            pair[0],
            pair[1]
        );
    }
    assert!(
        losses[19] < losses[0],
        "loss did not fall: {} -> {}",
        losses[0],
        losses[19]
    );
}

#[test]
fn a_linear_model_separates_two_clouds() {
    let dim = 8;
    let (features, labels) = data::separable_set(64, dim, 50);

    let mut g = Graph::default();
    g.add(Node::new(
        "x",
        OpKind::Placeholder {
            shape: vec![0, dim],
        },
        &[],
    ))
    .unwrap();
    g.add(Node::new(
        "t",
        OpKind::Placeholder { shape: vec![0, 2] },
        &[],
    ))
    .unwrap();
    g.add(Node::new(
        "w",
        OpKind::Variable {
            shape: vec![dim, 2],
            init: InitKind::Zeros,
        },
        &[],
    ))
    .unwrap();
    g.add(Node::new(
        "b",
        OpKind::Variable {
            shape: vec![2],
            init: InitKind::Zeros,
        },
        &[],
    ))
    .unwrap();
    g.add(Node::new("mm", OpKind::MatMul, &["x", "w"])).unwrap();
    g.add(Node::new("logits", OpKind::Add, &["mm", "b"])).unwrap();
    g.add(Node::new("loss", OpKind::SoftmaxXentLoss, &["logits", "t"]))
        .unwrap();
    g.add(Node::new("step", OpKind::SgdApply { lr: 0.1 }, &["loss"]))
        .unwrap();

    let mut s = Session::new(enclave(Mode::Simulation), Arc::new(g)).unwrap();
    s.initialize(0).unwrap();
    let feeds = [("x", &features), ("t", &labels)];
    for _ in 0..200 {
        s.run(&["step"], &feeds).unwrap();
    }
    let logits = s.run(&["logits"], &[("x", &features)]).unwrap().remove(0);
    let mut correct = 0;
    for (row, truth) in logits.data().chunks_exact(2).zip(labels.data().chunks_exact(2)) {
        let pred = usize::from(row[1] > row[0]);
        let want = usize::from(truth[1] > truth[0]);
        if pred == want {
            correct += 1;
        }
    }
    let accuracy = correct as f64 / 64.0;
    assert!(accuracy > 0.95, "accuracy {accuracy}");
}

#[test]
fn checkpoints_restore_exact_values() {
    let mut s = fresh_session(Mode::Simulation, 4);
    let mut r = rng(35);
    let (images, labels) = batch(&mut r, 4);
    let feeds = [("input", &images), ("labels", &labels)];

    s.run(&["train_op"], &feeds).unwrap();
    let saved = s.checkpoint_bytes().unwrap();
    let reference = s.run(&["logits"], &[("input", &images)]).unwrap().remove(0);

    s.run(&["train_op"], &feeds).unwrap();
    let drifted = s.run(&["logits"], &[("input", &images)]).unwrap().remove(0);
    assert_ne!(reference, drifted);

    s.restore_checkpoint(&saved).unwrap();
    let restored = s.run(&["logits"], &[("input", &images)]).unwrap().remove(0);
    assert_eq!(reference, restored);

    let mut broken = saved.clone();
    broken[0] ^= 0xff;
    assert!(matches!(
        s.restore_checkpoint(&broken),
        Err(TensorError::CorruptFile(_))
    ));
    let mut version = saved.clone();
    version[4] = 3;
    assert!(matches!(
        s.restore_checkpoint(&version),
        Err(TensorError::FormatVersionUnknown(3))
    ));
}

#[test]
fn a_frozen_graph_reloads_into_an_identical_model() {
    let mut s = fresh_session(Mode::Simulation, 5);
    let mut r = rng(36);
    let (images, _) = batch(&mut r, 2);
    let reference = s.run(&["logits"], &[("input", &images)]).unwrap().remove(0);

    let frozen = s.export_frozen().unwrap();
    let (graph, folded) = Graph::from_bytes(&frozen).unwrap();
    assert_eq!(&graph, s.graph().as_ref());
    assert_eq!(folded.len(), s.variables().len());

    let mut reloaded = Session::new(enclave(Mode::Simulation), Arc::new(graph)).unwrap();
    reloaded.restore_values(&folded).unwrap();
    let replayed = reloaded
        .run(&["logits"], &[("input", &images)])
        .unwrap()
        .remove(0);
    assert_eq!(reference, replayed);
}

#[test]
fn sessions_report_feed_and_fetch_mistakes() {
    let graph = Arc::new(tiny_model());
    let mut s = Session::new(enclave(Mode::Simulation), graph.clone()).unwrap();
    let mut r = rng(37);
    let (images, _) = batch(&mut r, 2);

    let t = s.run(&["logits"], &[("input", &images)]);
    assert!(matches!(t, Err(TensorError::Uninitialized(_))));

    s.initialize(0).unwrap();
    assert!(matches!(
        s.run(&["logits"], &[]),
        Err(TensorError::MissingFeed(n)) if n == "input"
    ));
    assert!(matches!(
        s.run(&["ghost"], &[("input", &images)]),
        Err(TensorError::UnknownNode(_))
    ));
    assert!(matches!(
        s.run(&["dequeue"], &[("input", &images)]),
        Err(TensorError::UnsupportedFetch(_))
    ));
    assert!(matches!(
        s.run(&["logits"], &[("conv1_w", &images)]),
        Err(TensorError::ShapeMismatch(_))
    ));
    let flat = rand_tensor(&mut r, &[2, 10], 0.0, 1.0);
    assert!(matches!(
        s.run(&["logits"], &[("input", &flat)]),
        Err(TensorError::ShapeMismatch(_))
    ));
}

// ---------------------------------------------------------------------
// Ingest pipeline.
// ---------------------------------------------------------------------

struct Rig {
    _dir: tempfile::TempDir,
    enclave: Arc<Enclave>,
    sched: Scheduler,
    shield: Arc<FsShield>,
    root: String,
}

fn rig(mode: ShieldMode, key: Option<[u8; 32]>) -> Rig {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_str().unwrap().to_string();
    let enclave = enclave(Mode::Simulation);
    let sched = Scheduler::new(enclave.clone(), SchedPolicy::RoundRobin);
    let shield = Arc::new(FsShield::new(
        enclave.clone(),
        Arc::new(StdIo),
        vec![PathPolicy::new(root.clone(), mode)],
        key,
    ));
    Rig {
        _dir: dir,
        enclave,
        sched,
        shield,
        root,
    }
}

fn queue_graph(path: &str, cycle: bool, batch: usize, capacity: usize) -> Graph {
    let mut g = Graph::default();
    g.add(Node::new(
        "enqueue",
        OpKind::RecordReader {
            path: path.to_string(),
            cycle,
        },
        &[],
    ))
    .unwrap();
    g.add(Node::new(
        "dequeue",
        OpKind::FifoQueue { capacity, batch },
        &["enqueue"],
    ))
    .unwrap();
    g
}

#[test]
fn the_pipeline_delivers_each_record_once_in_order() {
    let rig = rig(ShieldMode::EncryptAuth, Some([9; 32]));
    let path = format!("{}/train.bin", rig.root);
    rig.shield
        .write_all(&path, &data::synthetic_dataset(4, 60))
        .unwrap();

    let graph = queue_graph(&path, false, 2, 2);
    let pipe = Pipeline::start(
        &rig.sched,
        rig.enclave.clone(),
        rig.shield.clone(),
        &graph,
        "dequeue",
        false,
        1,
    )
    .unwrap();

    let consumer = rig.sched.spawn("consume", move || {
        let mut labels = Vec::new();
        for _ in 0..2 {
            let (images, hot) = pipe.next_batch()?;
            assert_eq!(images.shape(), [2, CROP_SIDE, CROP_SIDE, 3]);
            for row in hot.data().chunks_exact(10) {
                labels.push(row.iter().position(|&v| v == 1.0).unwrap());
            }
        }
        pipe.finish()?;
        Ok::<_, TensorError>(labels)
    });
    rig.sched.run_to_completion();
    let labels = consumer.join().unwrap().unwrap();
    assert_eq!(labels, [0, 1, 2, 3]);
}

#[test]
fn an_exhausted_reader_leaves_the_queue_open_and_consumers_waiting() {
    let rig = rig(ShieldMode::Passthrough, None);
    let path = format!("{}/two.bin", rig.root);
    rig.shield
        .write_all(&path, &data::synthetic_dataset(2, 61))
        .unwrap();

    let graph = queue_graph(&path, false, 1, 1);
    let pipe = Pipeline::start(
        &rig.sched,
        rig.enclave.clone(),
        rig.shield.clone(),
        &graph,
        "dequeue",
        false,
        1,
    )
    .unwrap();

    let handle = pipe.queue_handle();
    let consumer = rig.sched.spawn("consume", move || {
        let mut got = 0;
        for _ in 0..2 {
            pipe.next_batch()?;
            got += 1;
        }
        // The file is exhausted but nothing closed the queue: this pop
        // parks until the watchdog closes it, instead of inventing data.
        let starved = pipe.next_batch();
        assert!(matches!(starved, Err(TensorError::QueueClosed)));
        pipe.finish()?;
        Ok::<_, TensorError>(got)
    });
    rig.sched.spawn("watchdog", move || {
        sleep(5_000_000);
        handle.close();
    });
    rig.sched.run_to_completion();
    assert_eq!(consumer.join().unwrap().unwrap(), 2);
}

#[test]
fn a_cycling_reader_wraps_around_until_closed() {
    let rig = rig(ShieldMode::Passthrough, None);
    let path = format!("{}/three.bin", rig.root);
    rig.shield
        .write_all(&path, &data::synthetic_dataset(3, 62))
        .unwrap();

    let graph = queue_graph(&path, true, 5, 2);
    let pipe = Pipeline::start(
        &rig.sched,
        rig.enclave.clone(),
        rig.shield.clone(),
        &graph,
        "dequeue",
        false,
        1,
    )
    .unwrap();

    let consumer = rig.sched.spawn("consume", move || {
        let (_, hot) = pipe.next_batch()?;
        let labels: Vec<usize> = hot
            .data()
            .chunks_exact(10)
            .map(|row| row.iter().position(|&v| v == 1.0).unwrap())
            .collect();
        pipe.finish()?;
        Ok::<_, TensorError>(labels)
    });
    rig.sched.run_to_completion();
    assert_eq!(consumer.join().unwrap().unwrap(), [0, 1, 2, 0, 1]);
}

#[test]
fn a_tampered_record_file_never_yields_a_sample() {
    let rig = rig(ShieldMode::EncryptAuth, Some([8; 32]));
    let path = format!("{}/sealed.bin", rig.root);
    rig.shield
        .write_all(&path, &data::synthetic_dataset(4, 63))
        .unwrap();

    // Flip one ciphertext byte behind the shield's back.
    let mut on_disk = std::fs::read(&path).unwrap();
    let mid = on_disk.len() / 2;
    on_disk[mid] ^= 0x01;
    std::fs::write(&path, &on_disk).unwrap();

    let graph = queue_graph(&path, false, 1, 4);
    let pipe = Pipeline::start(
        &rig.sched,
        rig.enclave.clone(),
        rig.shield.clone(),
        &graph,
        "dequeue",
        false,
        1,
    )
    .unwrap();

    let consumer = rig.sched.spawn("consume", move || {
        let starved = pipe.next_batch();
        assert!(matches!(starved, Err(TensorError::QueueClosed)));
        match pipe.finish() {
            Err(TensorError::Fs(_)) => Ok::<_, TensorError>(()),
            other => panic!("expected a shield failure, got {other:?}"),
        }
    });
    rig.sched.run_to_completion();
    consumer.join().unwrap().unwrap();
}

#[test]
fn an_out_of_range_label_closes_the_queue() {
    let rig = rig(ShieldMode::Passthrough, None);
    let path = format!("{}/bad.bin", rig.root);
    let mut raw = data::synthetic_dataset(2, 64);
    raw[data::RECORD_LEN] = 10;
    rig.shield.write_all(&path, &raw).unwrap();

    let graph = queue_graph(&path, false, 1, 4);
    let pipe = Pipeline::start(
        &rig.sched,
        rig.enclave.clone(),
        rig.shield.clone(),
        &graph,
        "dequeue",
        false,
        1,
    )
    .unwrap();

    let consumer = rig.sched.spawn("consume", move || {
        let first = pipe.next_batch()?;
        assert_eq!(first.1.data()[0], 1.0);
        let starved = pipe.next_batch();
        assert!(matches!(starved, Err(TensorError::QueueClosed)));
        match pipe.finish() {
            Err(TensorError::LabelOutOfRange(10)) => Ok::<_, TensorError>(()),
            other => panic!("expected a label failure, got {other:?}"),
        }
    });
    rig.sched.run_to_completion();
    consumer.join().unwrap().unwrap();
}
