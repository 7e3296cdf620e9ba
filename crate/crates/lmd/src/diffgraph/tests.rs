use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use super::*;
use crate::corpus::Waveform;
use crate::dsp::{self, MaskKind, MaskMatrix, StftConfig, WindowKind};

const TOL_LINEAR: f64 = 1e-6;
const TOL_NONLINEAR: f64 = 1e-4;

fn rand_tensor(shape: Vec<usize>, seed: u64, lo: f64, hi: f64) -> Tensor {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect())
}

fn tiny_cfg() -> StftConfig {
    StftConfig {
        win_length: 16,
        hop: 8,
        fft_size: 16,
        window: WindowKind::Hann,
        center_padding: true,
    }
}

#[test]
fn pointwise_ops_grad_check() {
    let leaves = vec![
        rand_tensor(vec![7], 1, -1.5, 1.5),
        rand_tensor(vec![7], 2, -1.5, 1.5),
    ];
    type Build = fn(&mut Tape, &[VarId]) -> Result<VarId, DiffError>;
    let cases: Vec<(&str, Build, f64)> = vec![
        ("add", |t, l| { let y = t.add(l[0], l[1])?; t.sum(y) }, TOL_LINEAR),
        ("sub", |t, l| { let y = t.sub(l[0], l[1])?; t.sum(y) }, TOL_LINEAR),
        ("mul", |t, l| { let y = t.mul(l[0], l[1])?; t.sum(y) }, TOL_NONLINEAR),
        ("scale", |t, l| { let y = t.scale(l[0], -2.5)?; t.sum(y) }, TOL_LINEAR),
        ("add_scalar", |t, l| { let y = t.add_scalar(l[0], 0.7)?; t.sum(y) }, TOL_LINEAR),
        ("tanh", |t, l| { let y = t.tanh(l[0])?; t.sum(y) }, TOL_NONLINEAR),
        ("sigmoid", |t, l| { let y = t.sigmoid(l[0])?; t.sum(y) }, TOL_NONLINEAR),
        ("dot", |t, l| t.dot(l[0], l[1]), TOL_NONLINEAR),
    ];
    for (name, build, tol) in cases {
        for leaf_idx in 0..2 {
            let err = grad_check(build, &leaves, leaf_idx, 7, 1e-5, 9).unwrap();
            assert!(err <= tol, "{name} leaf {leaf_idx}: rel err {err}");
        }
    }
}

#[test]
fn abs_relu_log_grad_check() {
    // Keep probes away from the abs/relu kinks and log's pole.
    let x = Tensor::vector(vec![0.8, -1.2, 0.4, -0.3, 2.0]);
    let err = grad_check(
        |t, l| { let y = t.abs(l[0])?; t.sum(y) },
        &[x.clone()], 0, 5, 1e-6, 3,
    ).unwrap();
    assert!(err <= TOL_NONLINEAR, "abs: {err}");
    let err = grad_check(
        |t, l| { let y = t.relu(l[0])?; t.sum(y) },
        &[x], 0, 5, 1e-6, 3,
    ).unwrap();
    assert!(err <= TOL_NONLINEAR, "relu: {err}");

    let pos = Tensor::vector(vec![0.5, 1.7, 0.02, 3.0]);
    let err = grad_check(
        |t, l| { let y = t.log(l[0])?; t.sum(y) },
        &[pos], 0, 4, 1e-6, 4,
    ).unwrap();
    assert!(err <= TOL_NONLINEAR, "log: {err}");
}

#[test]
fn matmul_const_grad_check() {
    let m = Arc::new(ConstMatrix::new(3, 4, (0..12).map(|i| (i as f64 * 0.37).sin()).collect()));
    let x = rand_tensor(vec![4, 5], 11, -1.0, 1.0);
    let err = grad_check(
        move |t, l| {
            let y = t.matmul_const(Arc::clone(&m), l[0])?;
            let y2 = t.mul(y, y)?;
            t.sum(y2)
        },
        &[x], 0, 20, 1e-5, 5,
    ).unwrap();
    assert!(err <= TOL_NONLINEAR, "matmul_const: {err}");
}

#[test]
fn stft_istft_mask_grad_check() {
    let basis = Arc::new(StftBasis::new(tiny_cfg()).unwrap());
    let len = 40;
    let t_frames = basis.n_frames(len);
    let f = basis.n_bins();
    let x = rand_tensor(vec![len], 21, -1.0, 1.0);
    let mask_logits = rand_tensor(vec![f, t_frames], 22, -1.0, 1.0);

    // d/dx of sum(istft(mask ⊙ stft(x)))² path, probing the waveform.
    let b = Arc::clone(&basis);
    let err = grad_check(
        move |t, l| {
            let spec = t.stft(l[0], Arc::clone(&b))?;
            let m = t.sigmoid(l[1])?;
            let masked = t.mask_apply(spec, m)?;
            let y = t.istft(masked, Arc::clone(&b), len)?;
            let y2 = t.mul(y, y)?;
            t.sum(y2)
        },
        &[x.clone(), mask_logits.clone()], 0, 15, 1e-5, 6,
    ).unwrap();
    assert!(err <= TOL_NONLINEAR, "wave path: {err}");

    // Same graph, probing the mask logits.
    let b = Arc::clone(&basis);
    let err = grad_check(
        move |t, l| {
            let spec = t.stft(l[0], Arc::clone(&b))?;
            let m = t.sigmoid(l[1])?;
            let masked = t.mask_apply(spec, m)?;
            let y = t.istft(masked, Arc::clone(&b), len)?;
            let y2 = t.mul(y, y)?;
            t.sum(y2)
        },
        &[x, mask_logits], 1, 15, 1e-5, 7,
    ).unwrap();
    assert!(err <= TOL_NONLINEAR, "mask path: {err}");
}

#[test]
fn power_spec_and_two_plane_mask_grad_check() {
    let basis = Arc::new(StftBasis::new(tiny_cfg()).unwrap());
    let len = 40;
    let t_frames = basis.n_frames(len);
    let f = basis.n_bins();
    let x = rand_tensor(vec![len], 31, -1.0, 1.0);
    let mask2 = rand_tensor(vec![2, f, t_frames], 32, -1.0, 1.0);
    for leaf_idx in 0..2 {
        let b = Arc::clone(&basis);
        let err = grad_check(
            move |t, l| {
                let spec = t.stft(l[0], Arc::clone(&b))?;
                let m = t.sigmoid(l[1])?;
                let masked = t.mask_apply(spec, m)?;
                let p = t.power_spec(masked)?;
                t.sum(p)
            },
            &[x.clone(), mask2.clone()], leaf_idx, 15, 1e-5, 8,
        ).unwrap();
        assert!(err <= TOL_NONLINEAR, "leaf {leaf_idx}: {err}");
    }
}

#[test]
fn cmvn_grad_check() {
    let x = rand_tensor(vec![3, 9], 41, -2.0, 2.0);
    let w = rand_tensor(vec![3, 9], 42, -1.0, 1.0);
    let err = grad_check(
        |t, l| {
            let y = t.cmvn(l[0])?;
            let wy = t.mul(y, l[1])?;
            t.sum(wy)
        },
        &[x, w], 0, 27, 1e-5, 9,
    ).unwrap();
    assert!(err <= TOL_NONLINEAR, "cmvn: {err}");
}

#[test]
fn conv1d_grad_check() {
    let x = rand_tensor(vec![3, 11], 51, -1.0, 1.0);
    let w = rand_tensor(vec![2, 3, 5], 52, -0.5, 0.5);
    let b = rand_tensor(vec![2], 53, -0.2, 0.2);
    for leaf_idx in 0..3 {
        let err = grad_check(
            |t, l| {
                let y = t.conv1d(l[0], l[1], l[2])?;
                let a = t.tanh(y)?;
                t.sum(a)
            },
            &[x.clone(), w.clone(), b.clone()], leaf_idx, 15, 1e-5, 10,
        ).unwrap();
        assert!(err <= TOL_NONLINEAR, "conv1d leaf {leaf_idx}: {err}");
    }
}

#[test]
fn conv2d_grad_check() {
    let x = rand_tensor(vec![2, 6, 7], 61, -1.0, 1.0);
    let w = rand_tensor(vec![3, 2, 3, 3], 62, -0.5, 0.5);
    let b = rand_tensor(vec![3], 63, -0.2, 0.2);
    for leaf_idx in 0..3 {
        let err = grad_check(
            |t, l| {
                let y = t.conv2d(l[0], l[1], l[2])?;
                let a = t.sigmoid(y)?;
                t.sum(a)
            },
            &[x.clone(), w.clone(), b.clone()], leaf_idx, 15, 1e-5, 11,
        ).unwrap();
        assert!(err <= TOL_NONLINEAR, "conv2d leaf {leaf_idx}: {err}");
    }
}

#[test]
fn pooled_embedding_head_grad_check() {
    // mean_last → affine → l2_normalize → dot: the ASV head shape.
    let x = rand_tensor(vec![4, 9], 71, -1.0, 1.0);
    let w = rand_tensor(vec![3, 4], 72, -0.7, 0.7);
    let b = rand_tensor(vec![3], 73, -0.3, 0.3);
    let other = rand_tensor(vec![3], 74, -1.0, 1.0);
    for leaf_idx in 0..3 {
        let other = other.clone();
        let err = grad_check(
            move |t, l| {
                let pooled = t.mean_last(l[0])?;
                let z = t.affine(pooled, l[1], l[2])?;
                let e = t.l2_normalize(z)?;
                let o = t.constant(other.clone())?;
                let on = t.l2_normalize(o)?;
                t.dot(e, on)
            },
            &[x.clone(), w.clone(), b.clone()], leaf_idx, 12, 1e-5, 12,
        ).unwrap();
        assert!(err <= TOL_NONLINEAR, "head leaf {leaf_idx}: {err}");
    }
}

#[test]
fn stft_mask_istft_matches_dsp_route() {
    // The graph forward and the standalone signal route must agree closely:
    // both implement the same windowed transform with different DFT kernels.
    let cfg = StftConfig::detector();
    let basis = Arc::new(StftBasis::new(cfg.clone()).unwrap());
    let len = 1600;
    let mut rng = ChaCha20Rng::seed_from_u64(77);
    let samples: Vec<f64> = (0..len).map(|_| rng.gen_range(-1000.0..1000.0)).collect();
    let wave = Waveform { samples: samples.clone(), sample_rate: crate::corpus::SAMPLE_RATE };

    let spec = dsp::stft(&wave, &cfg).unwrap();
    let f = spec.n_bins;
    let t_frames = spec.n_frames;
    let mask_vals: Vec<f64> = (0..f * t_frames).map(|i| ((i % 7) as f64) / 7.0).collect();
    let mask = MaskMatrix::new(mask_vals.clone(), f, t_frames, 1, MaskKind::Ratio).unwrap();
    let direct = dsp::istft(&dsp::apply_mask(&spec, &mask).unwrap(), len).unwrap();

    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::vector(samples)).unwrap();
    let s = tape.stft(x, Arc::clone(&basis)).unwrap();
    let m = tape.constant(Tensor::new(vec![f, t_frames], mask_vals)).unwrap();
    let masked = tape.mask_apply(s, m).unwrap();
    let y = tape.istft(masked, basis, len).unwrap();

    let graph = &tape.value(y).data;
    assert_eq!(graph.len(), direct.len());
    let scale = direct.samples.iter().fold(1.0_f64, |a, &v| a.max(v.abs()));
    for (a, b) in graph.iter().zip(&direct.samples) {
        assert!((a - b).abs() / scale < 1e-9, "graph {a} vs direct {b}");
    }
}

#[test]
fn backward_is_linear_in_seed_and_deterministic() {
    let basis = Arc::new(StftBasis::new(tiny_cfg()).unwrap());
    let x = rand_tensor(vec![48], 81, -1.0, 1.0);
    let run = |seed: f64| {
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone()).unwrap();
        let s = tape.stft(xv, Arc::clone(&basis)).unwrap();
        let p = tape.power_spec(s).unwrap();
        let y = tape.sum(p).unwrap();
        let g = tape.backward_with_seed(y, seed).unwrap();
        g.wrt(xv).unwrap().to_vec()
    };
    let g1 = run(1.0);
    let g1b = run(1.0);
    let g3 = run(3.0);
    assert_eq!(g1, g1b, "backward must be bit-deterministic");
    for (a, b) in g1.iter().zip(&g3) {
        assert!((3.0 * a - b).abs() <= 1e-12 * b.abs().max(1.0));
    }
}

#[test]
fn constants_receive_no_gradient() {
    let mut tape = Tape::new();
    let a = tape.leaf(Tensor::vector(vec![1.0, 2.0])).unwrap();
    let c = tape.constant(Tensor::vector(vec![3.0, 4.0])).unwrap();
    let y = tape.dot(a, c).unwrap();
    let g = tape.backward(y).unwrap();
    assert_eq!(g.wrt(a).unwrap(), &[3.0, 4.0]);
    assert!(g.wrt(c).is_none());
}

#[test]
fn fan_out_accumulates() {
    // y = x·x + sum(x) ⇒ dy/dx_i = 2x_i + 1.
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::vector(vec![0.5, -2.0, 3.0])).unwrap();
    let d = tape.dot(x, x).unwrap();
    let s = tape.sum(x).unwrap();
    let y = tape.add(d, s).unwrap();
    let g = tape.backward(y).unwrap();
    assert_eq!(g.wrt(x).unwrap(), &[2.0, -3.0, 7.0]);
}

#[test]
fn shape_errors_are_reported() {
    let mut tape = Tape::new();
    let a = tape.leaf(Tensor::vector(vec![1.0, 2.0])).unwrap();
    let b = tape.leaf(Tensor::vector(vec![1.0, 2.0, 3.0])).unwrap();
    assert!(matches!(tape.add(a, b), Err(DiffError::Shape { .. })));
    assert!(matches!(tape.backward(a), Err(DiffError::NonScalarOutput(2))));
}

#[test]
fn non_finite_values_are_rejected() {
    let mut tape = Tape::new();
    let a = tape.leaf(Tensor::vector(vec![0.0])).unwrap();
    let err = tape.log(a).unwrap_err();
    assert!(matches!(err, DiffError::NonFinite { kind: "log", .. }));
}
